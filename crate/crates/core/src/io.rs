//! Trajectory CSV and g2o pose-graph files.
//!
//! CSV rows are `t,x,y,z,qx,qy,qz,qw` with the world position of the vehicle
//! and the world-from-body orientation. Trajectory files with velocities add
//! `vx,vy,vz,wx,wy,wz`, the estimator's body twist. Measurement files may add a
//! trailing `flag` column (`clean`, `noisy` or `outlier`).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use nalgebra::{Matrix3, Matrix6, Quaternion, UnitQuaternion, Vector3};

use crate::dataset::{GraphEdge, InjectionFlag, Measurement, PoseGraph, ProblemDataset};
use crate::engine::TrajectoryPosterior;
use crate::error::{Error, Result};
use crate::factors::StateKnot;
use crate::lie::{Pose, Twist};

pub const POSE_HEADER: [&str; 8] = ["t", "x", "y", "z", "qx", "qy", "qz", "qw"];
pub const VELOCITY_HEADER: [&str; 6] = ["vx", "vy", "vz", "wx", "wy", "wz"];

/// Accepted deviation of a quaternion norm from one.
pub const QUATERNION_NORM_TOL: f64 = 1e-6;

/// Rotational information in the estimator's twist is larger than that of
/// the quaternion vector part used by g2o by this factor on each side.
const QUAT_TO_ANGLE: f64 = -0.5;

/// Strong information on the dimensions an SE(2) edge does not constrain.
pub const SE2_LIFT_INFORMATION: f64 = 1e6;

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn pose_from_world(position: Vector3<f64>, q: UnitQuaternion<f64>) -> Pose {
    Pose::new(q.to_rotation_matrix().into_inner(), position).inverse()
}

fn world_quaternion(pose: &Pose) -> (Vector3<f64>, UnitQuaternion<f64>) {
    let wb = pose.inverse();
    let rot = nalgebra::Rotation3::from_matrix_unchecked(wb.rot);
    (wb.trans, UnitQuaternion::from_rotation_matrix(&rot))
}

fn checked_quaternion(path: &Path, line: u64, x: f64, y: f64, z: f64, w: f64) -> Result<UnitQuaternion<f64>> {
    let q = Quaternion::new(w, x, y, z);
    let norm = q.norm();
    if !((norm - 1.0).abs() <= QUATERNION_NORM_TOL) {
        return Err(Error::NonNormalizedQuaternion {
            path: path.to_path_buf(),
            line,
            norm,
        });
    }
    Ok(UnitQuaternion::from_quaternion(q))
}

fn pose_row(pose: &Pose) -> String {
    let (p, q) = world_quaternion(pose);
    let c = q.coords;
    format!(
        "{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}",
        p.x, p.y, p.z, c.x, c.y, c.z, c.w
    )
}

fn twist_row(v: &Twist) -> String {
    v.iter().map(|x| format!("{x:.16e}")).collect::<Vec<_>>().join(",")
}

/// Reads a trajectory CSV. Rows with velocities become groundtruth knots;
/// rows without become measurements.
pub fn read_trajectory_csv(path: &Path) -> Result<ProblemDataset> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_owned)
        .collect();
    let has = |names: &[&str], at: usize| {
        header.len() >= at + names.len() && names.iter().zip(&header[at..]).all(|(a, b)| a == b)
    };
    if !has(&POSE_HEADER, 0) {
        return Err(parse_err(path, 1, format!("expected header starting {}", POSE_HEADER.join(","))));
    }
    let with_velocity = has(&VELOCITY_HEADER, 8);
    let flag_col = header.iter().position(|h| h == "flag");
    let expected = 8 + if with_velocity { 6 } else { 0 } + usize::from(flag_col.is_some());
    if header.len() != expected {
        return Err(parse_err(path, 1, format!("unexpected columns in header: {}", header.join(","))));
    }
    let mut dataset = ProblemDataset::default();
    let mut groundtruth = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != expected {
            return Err(parse_err(path, line, format!("expected {expected} fields, found {}", record.len())));
        }
        let num = |i: usize| -> Result<f64> {
            record[i]
                .parse::<f64>()
                .map_err(|_| parse_err(path, line, format!("field {} is not a number: {:?}", header[i], &record[i])))
        };
        let t = num(0)?;
        let q = checked_quaternion(path, line, num(4)?, num(5)?, num(6)?, num(7)?)?;
        let pose = pose_from_world(Vector3::new(num(1)?, num(2)?, num(3)?), q);
        if let Some(&last) = dataset.times.last() {
            if t <= last {
                return Err(parse_err(path, line, "timestamps must increase"));
            }
        }
        dataset.times.push(t);
        if with_velocity {
            let v = Twist::from_fn(|i, _| num(8 + i).unwrap_or(f64::NAN));
            if v.iter().any(|x| x.is_nan()) {
                return Err(parse_err(path, line, "velocity fields must be numbers"));
            }
            groundtruth.push(StateKnot::new(t, pose, v));
        } else {
            let flag = match flag_col.map(|c| &record[c]) {
                None | Some("clean") => InjectionFlag::Clean,
                Some("noisy") => InjectionFlag::Noisy,
                Some("outlier") => InjectionFlag::Outlier,
                Some(other) => return Err(parse_err(path, line, format!("unknown flag {other:?}"))),
            };
            dataset.measurements.push(Measurement { time: t, pose, flag });
        }
    }
    if with_velocity {
        dataset.groundtruth = Some(groundtruth);
    }
    Ok(dataset)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    match e.kind() {
        csv::ErrorKind::Io(_) => match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::Io(io),
            _ => unreachable!(),
        },
        _ => parse_err(path, line, e.to_string()),
    }
}

/// Writes measurements with their injection flags.
pub fn write_measurements_csv(path: &Path, measurements: &[Measurement]) -> Result<()> {
    let mut s = format!("{},flag\n", POSE_HEADER.join(","));
    for m in measurements {
        writeln!(s, "{:.16e},{},{}", m.time, pose_row(&m.pose), m.flag.as_str()).unwrap();
    }
    Ok(fs::write(path, s)?)
}

/// Writes knots with velocities.
pub fn write_knots_csv(path: &Path, knots: &[StateKnot]) -> Result<()> {
    let mut s = format!("{},{}\n", POSE_HEADER.join(","), VELOCITY_HEADER.join(","));
    for k in knots {
        writeln!(s, "{:.16e},{},{}", k.time, pose_row(&k.pose), twist_row(&k.velocity)).unwrap();
    }
    Ok(fs::write(path, s)?)
}

/// Writes the posterior mean trajectory.
pub fn write_trajectory_csv(path: &Path, posterior: &TrajectoryPosterior) -> Result<()> {
    write_knots_csv(path, &posterior.knots)
}

/// Maps g2o `(t, q_vec)` information to the estimator's twist ordering.
fn information_from_g2o(omega: &Matrix6<f64>) -> Matrix6<f64> {
    let m = Matrix6::from_diagonal(&nalgebra::Vector6::new(1.0, 1.0, 1.0, QUAT_TO_ANGLE, QUAT_TO_ANGLE, QUAT_TO_ANGLE));
    m * omega * m
}

fn information_to_g2o(info: &Matrix6<f64>) -> Matrix6<f64> {
    let s = 1.0 / QUAT_TO_ANGLE;
    let m = Matrix6::from_diagonal(&nalgebra::Vector6::new(1.0, 1.0, 1.0, s, s, s));
    m * info * m
}

fn rot_z(theta: f64) -> Matrix3<f64> {
    Matrix3::new(theta.cos(), -theta.sin(), 0.0, theta.sin(), theta.cos(), 0.0, 0.0, 0.0, 1.0)
}

fn upper_triangular(values: &[f64], n: usize) -> nalgebra::DMatrix<f64> {
    let mut m = nalgebra::DMatrix::zeros(n, n);
    let mut it = values.iter();
    for i in 0..n {
        for j in i..n {
            let v = *it.next().unwrap();
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Reads the SE(3) and SE(2) vertex and edge records of a g2o file. SE(2)
/// records are lifted with zero height, roll and pitch. Other records are
/// counted in `unsupported` and skipped.
pub fn read_g2o(path: &Path) -> Result<PoseGraph> {
    let text = fs::read_to_string(path)?;
    let mut graph = PoseGraph::default();
    let mut index = std::collections::HashMap::new();
    let mut pending = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = n as u64 + 1;
        let mut tokens = raw.split_whitespace();
        let Some(tag) = tokens.next() else { continue };
        if tag.starts_with('#') {
            continue;
        }
        let rest: Vec<&str> = tokens.collect();
        let nums = |count: usize, skip: usize| -> Result<Vec<f64>> {
            if rest.len() != skip + count {
                return Err(parse_err(path, line, format!("{tag} expects {} fields, found {}", skip + count, rest.len())));
            }
            rest[skip..]
                .iter()
                .map(|t| t.parse::<f64>().map_err(|_| parse_err(path, line, format!("not a number: {t:?}"))))
                .collect()
        };
        let id = |i: usize| -> Result<i64> {
            rest.get(i)
                .and_then(|t| t.parse::<i64>().ok())
                .ok_or_else(|| parse_err(path, line, format!("{tag} has no integer id in field {}", i + 1)))
        };
        match tag {
            "VERTEX_SE3:QUAT" => {
                let v = nums(7, 1)?;
                let q = checked_quaternion(path, line, v[3], v[4], v[5], v[6])?;
                add_vertex(&mut graph, &mut index, id(0)?, pose_from_world(Vector3::new(v[0], v[1], v[2]), q), path, line)?;
            }
            "VERTEX_SE2" => {
                let v = nums(3, 1)?;
                let wb = Pose::new(rot_z(v[2]), Vector3::new(v[0], v[1], 0.0));
                add_vertex(&mut graph, &mut index, id(0)?, wb.inverse(), path, line)?;
            }
            "EDGE_SE3:QUAT" => {
                let v = nums(28, 2)?;
                let q = checked_quaternion(path, line, v[3], v[4], v[5], v[6])?;
                let z = Pose::new(q.to_rotation_matrix().into_inner(), Vector3::new(v[0], v[1], v[2]));
                let omega = upper_triangular(&v[7..], 6);
                let info = information_from_g2o(&Matrix6::from_iterator(omega.iter().copied()));
                pending.push((line, id(0)?, id(1)?, z, info));
            }
            "EDGE_SE2" => {
                let v = nums(9, 2)?;
                let z = Pose::new(rot_z(v[2]), Vector3::new(v[0], v[1], 0.0));
                let omega = upper_triangular(&v[3..], 3);
                let lift = [0usize, 1, 5];
                let mut info = Matrix6::from_diagonal_element(SE2_LIFT_INFORMATION);
                for (a, &i) in lift.iter().enumerate() {
                    for (b, &j) in lift.iter().enumerate() {
                        info[(i, j)] = omega[(a, b)];
                    }
                }
                // heading in the estimator's twist has the opposite sign
                let flip = Matrix6::from_diagonal(&nalgebra::Vector6::new(1.0, 1.0, 1.0, -1.0, -1.0, -1.0));
                pending.push((line, id(0)?, id(1)?, z, flip * info * flip));
            }
            _ => {
                log::warn!("{}:{line}: skipping unsupported record {tag}", path.display());
                graph.unsupported += 1;
            }
        }
    }
    for (line, a, b, z, info) in pending {
        let lookup = |id: i64| {
            index
                .get(&id)
                .copied()
                .ok_or_else(|| parse_err(path, line, format!("edge refers to unknown vertex {id}")))
        };
        let (ia, ib) = (lookup(a)?, lookup(b)?);
        // g2o stores X_a^{-1} X_b for world-from-body vertices X
        let (from, to, meas_rel, info) = if ia < ib {
            (ia, ib, z.inverse(), info)
        } else {
            let ad = crate::lie::adjoint(&z.inverse());
            (ib, ia, z, ad.transpose() * info * ad)
        };
        if from == to {
            return Err(parse_err(path, line, "edge connects a vertex to itself"));
        }
        graph.edges.push(GraphEdge {
            from,
            to,
            meas_rel,
            information: Some(info),
        });
    }
    if graph.unsupported > 0 {
        log::warn!("{}: {} unsupported records skipped", path.display(), graph.unsupported);
    }
    Ok(graph)
}

fn add_vertex(
    graph: &mut PoseGraph,
    index: &mut std::collections::HashMap<i64, usize>,
    id: i64,
    pose: Pose,
    path: &Path,
    line: u64,
) -> Result<()> {
    if index.insert(id, graph.vertices.len()).is_some() {
        return Err(parse_err(path, line, format!("duplicate vertex {id}")));
    }
    graph.ids.push(id);
    graph.vertices.push(pose);
    Ok(())
}

/// Writes a graph as SE(3) records. Edges without information get identity.
pub fn write_g2o(path: &Path, graph: &PoseGraph) -> Result<()> {
    let mut s = String::new();
    for (id, v) in graph.ids.iter().zip(&graph.vertices) {
        writeln!(s, "VERTEX_SE3:QUAT {id} {}", pose_row(v).replace(',', " ")).unwrap();
    }
    for e in &graph.edges {
        // stored relative pose is (X_from^{-1} X_to)^{-1}
        let z = e.meas_rel.inverse();
        let (p, q) = (z.trans, UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(z.rot)));
        let c = q.coords;
        let omega = e.information.map_or(Matrix6::identity(), |i| information_to_g2o(&i));
        write!(
            s,
            "EDGE_SE3:QUAT {} {} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e} {:.16e}",
            graph.ids[e.from], graph.ids[e.to], p.x, p.y, p.z, c.x, c.y, c.z, c.w
        )
        .unwrap();
        for i in 0..6 {
            for j in i..6 {
                write!(s, " {:.16e}", omega[(i, j)]).unwrap();
            }
        }
        s.push('\n');
    }
    Ok(fs::write(path, s)?)
}
