//! Datasets, problem construction, robust initialisation and trajectory metrics.

use nalgebra::{Matrix6, Vector3};

use crate::engine::TrajectoryPosterior;
use crate::error::{Error, Result};
use crate::factors::{FactorSpec, KnotLayout, NoiseBinding, Problem, StateKnot, StaticSlot};
use crate::lie::{self, Pose, Twist};

/// Timestamps match when they agree to this many seconds.
pub const TIME_MATCH_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectionFlag {
    Clean,
    Noisy,
    Outlier,
}

impl InjectionFlag {
    pub fn as_str(self) -> &'static str {
        match self {
            InjectionFlag::Clean => "clean",
            InjectionFlag::Noisy => "noisy",
            InjectionFlag::Outlier => "outlier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub time: f64,
    pub pose: Pose,
    pub flag: InjectionFlag,
}

/// Position of the vehicle in the world frame for a vehicle-from-world pose.
pub fn world_position(pose: &Pose) -> Vector3<f64> {
    -(pose.rot.transpose() * pose.trans)
}

/// Timestamped pose measurements with optional groundtruth.
#[derive(Debug, Clone, Default)]
pub struct ProblemDataset {
    pub times: Vec<f64>,
    pub measurements: Vec<Measurement>,
    pub groundtruth: Option<Vec<StateKnot>>,
    pub noise_sigma: Option<f64>,
    pub outlier_rate: Option<f64>,
    pub outlier_magnitude: Option<f64>,
}

impl ProblemDataset {
    /// Dataset whose knots are the measurement timestamps.
    pub fn from_measurements(measurements: Vec<Measurement>) -> Self {
        Self {
            times: measurements.iter().map(|m| m.time).collect(),
            measurements,
            ..Self::default()
        }
    }

    pub fn with_groundtruth(mut self, groundtruth: Vec<StateKnot>) -> Self {
        self.groundtruth = Some(groundtruth);
        self
    }

    fn knot_of(&self, time: f64) -> Result<usize> {
        let idx = self.times.partition_point(|&t| t < time - TIME_MATCH_TOL);
        match self.times.get(idx) {
            Some(&t) if (t - time).abs() <= TIME_MATCH_TOL => Ok(idx),
            _ => Err(Error::IllPosed(format!(
                "measurement at t={time} does not fall on a knot"
            ))),
        }
    }
}

/// How measurement factors are weighted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeasurementNoise {
    /// One shared covariance `W`.
    Static,
    /// One IW-distributed covariance per measurement.
    InverseWishart,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryProblemOptions {
    pub measurement_noise: MeasurementNoise,
    /// Add groundtruth pose factors for every `n`th knot (0 disables).
    pub groundtruth_every: usize,
}

impl Default for TrajectoryProblemOptions {
    fn default() -> Self {
        Self {
            measurement_noise: MeasurementNoise::InverseWishart,
            groundtruth_every: 0,
        }
    }
}

/// Motion-prior chain with one pose factor per measurement.
pub fn build_trajectory_problem(
    dataset: &ProblemDataset,
    options: &TrajectoryProblemOptions,
) -> Result<Problem> {
    let k = dataset.times.len();
    if k < 2 {
        return Err(Error::IllPosed("need at least two knots".into()));
    }
    let mut factors: Vec<FactorSpec> = (0..k - 1).map(FactorSpec::wnoa).collect();
    let mut iw = 0;
    for m in &dataset.measurements {
        let knot = dataset.knot_of(m.time)?;
        let binding = match options.measurement_noise {
            MeasurementNoise::Static => NoiseBinding::Static(StaticSlot::Measurement),
            MeasurementNoise::InverseWishart => {
                iw += 1;
                NoiseBinding::PerFactorIw(iw - 1)
            }
        };
        factors.push(FactorSpec::pose_measurement(knot, m.pose, binding));
    }
    if options.groundtruth_every > 0 {
        let gt = dataset
            .groundtruth
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("groundtruth factors requested without groundtruth".into()))?;
        for g in gt.iter().step_by(options.groundtruth_every) {
            factors.push(FactorSpec::groundtruth(dataset.knot_of(g.time)?, g.pose));
        }
    }
    let problem = Problem {
        times: dataset.times.clone(),
        layout: KnotLayout::PoseVelocity,
        factors,
        fix_first: false,
    };
    problem.validate()?;
    Ok(problem)
}

/// Initial trajectory from the measurements. A measurement is trusted when it
/// lies close to the medoid of the measurements in a window around it;
/// untrusted knots copy the nearest trusted one. Velocities come from finite
/// differences of the initial poses.
pub fn windowed_medoid_init(dataset: &ProblemDataset, half_window: usize) -> Result<Vec<StateKnot>> {
    let k = dataset.times.len();
    let mut by_knot: Vec<Option<Pose>> = vec![None; k];
    for m in &dataset.measurements {
        by_knot[dataset.knot_of(m.time)?] = Some(m.pose);
    }
    let present: Vec<usize> = (0..k).filter(|&i| by_knot[i].is_some()).collect();
    if present.is_empty() {
        return Err(Error::IllPosed("no measurements to initialise from".into()));
    }
    let mut trusted = vec![false; k];
    for (slot, &i) in present.iter().enumerate() {
        let lo = slot.saturating_sub(half_window);
        let hi = (slot + half_window + 1).min(present.len());
        let window: Vec<Pose> = present[lo..hi].iter().map(|&j| by_knot[j].unwrap()).collect();
        let pos: Vec<Vector3<f64>> = window.iter().map(world_position).collect();
        let medoid = (0..pos.len())
            .min_by(|&a, &b| {
                let sa: f64 = pos.iter().map(|p| (p - pos[a]).norm()).sum();
                let sb: f64 = pos.iter().map(|p| (p - pos[b]).norm()).sum();
                sa.total_cmp(&sb)
            })
            .unwrap();
        let mut dists: Vec<f64> = pos.iter().map(|p| (p - pos[medoid]).norm()).collect();
        dists.sort_by(f64::total_cmp);
        let scale = dists[dists.len() / 2];
        let me = by_knot[i].unwrap();
        let d = (world_position(&me) - pos[medoid]).norm();
        let angle = lie::log_so3(&(me.rot * window[medoid].rot.transpose()))
            .map(|v| v.norm())
            .unwrap_or(std::f64::consts::PI);
        trusted[i] = d <= 5.0 * scale + 1e-9 && angle <= 0.5 + 0.05 * half_window as f64;
    }
    let anchors: Vec<usize> = (0..k).filter(|&i| trusted[i]).collect();
    let anchors = if anchors.is_empty() { present } else { anchors };
    let poses: Vec<Pose> = (0..k)
        .map(|i| {
            let pos = anchors.partition_point(|&a| a < i);
            let near = match (pos.checked_sub(1).map(|p| anchors[p]), anchors.get(pos)) {
                (Some(a), Some(&b)) => {
                    if i - a <= b - i {
                        a
                    } else {
                        b
                    }
                }
                (Some(a), None) => a,
                (None, Some(&b)) => b,
                (None, None) => unreachable!(),
            };
            by_knot[near].unwrap()
        })
        .collect();
    let mut knots: Vec<StateKnot> = poses
        .iter()
        .zip(&dataset.times)
        .map(|(p, &t)| StateKnot::new(t, *p, Twist::zeros()))
        .collect();
    for (i, knot) in knots.iter_mut().enumerate() {
        knot.velocity = window_velocity(&poses, &dataset.times, i, half_window.max(1));
    }
    Ok(knots)
}

/// Body velocity from the relative pose across a window centred on knot `i`,
/// shrinking the window while the rotation across it exceeds one radian.
fn window_velocity(poses: &[Pose], times: &[f64], i: usize, half_window: usize) -> Twist {
    let k = poses.len();
    for h in (1..=half_window).rev() {
        let (a, b) = (i.saturating_sub(h), (i + h).min(k - 1));
        if a == b {
            break;
        }
        if let Ok(xi) = lie::log_se3(&(poses[b] * poses[a].inverse())) {
            if xi.fixed_rows::<3>(3).norm() <= 1.0 || h == 1 {
                return xi / (times[b] - times[a]);
            }
        }
    }
    Twist::zeros()
}

/// IW scale whose mode is the mean reported edge covariance, for pose graphs
/// whose edges carry information matrices.
pub fn iw_scale_from_information(graph: &PoseGraph, nu: f64) -> Matrix6<f64> {
    let covs: Vec<Matrix6<f64>> = graph
        .edges
        .iter()
        .filter_map(|e| e.information.and_then(|i| i.try_inverse()))
        .collect();
    let mean = if covs.is_empty() {
        Matrix6::identity()
    } else {
        covs.iter().sum::<Matrix6<f64>>() / covs.len() as f64
    };
    mean * (nu + crate::noise::IW_DIM as f64 + 1.0)
}

/// A pose graph with vehicle-from-world vertex poses.
#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    pub ids: Vec<i64>,
    pub vertices: Vec<Pose>,
    pub edges: Vec<GraphEdge>,
    /// Records that were skipped while reading.
    pub unsupported: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphEdge {
    pub from: usize,
    pub to: usize,
    /// Expected `T_to * T_from^{-1}`.
    pub meas_rel: Pose,
    /// Information in the estimator's twist ordering, if the file gave one.
    pub information: Option<Matrix6<f64>>,
}

impl GraphEdge {
    pub fn is_odometry(&self) -> bool {
        self.to == self.from + 1
    }
}

/// Weighting of pose-graph edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoseGraphNoise {
    /// Per-edge IW covariances.
    InverseWishart,
    /// Shared static covariances for odometry edges and for the remaining edges.
    Static,
}

/// Pose-only problem over the graph with the first vertex held fixed.
pub fn build_pose_graph_problem(graph: &PoseGraph, noise: PoseGraphNoise) -> Result<Problem> {
    let n = graph.vertices.len();
    if n < 2 {
        return Err(Error::IllPosed("pose graph needs at least two vertices".into()));
    }
    let factors = graph
        .edges
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let binding = match noise {
                PoseGraphNoise::InverseWishart => NoiseBinding::PerFactorIw(i),
                PoseGraphNoise::Static if e.is_odometry() => NoiseBinding::Static(StaticSlot::Odometry),
                PoseGraphNoise::Static => NoiseBinding::Static(StaticSlot::Measurement),
            };
            FactorSpec::relative(e.from, e.to, e.meas_rel, binding)
        })
        .collect();
    let problem = Problem {
        times: (0..n).map(|i| i as f64).collect(),
        layout: KnotLayout::PoseOnly,
        factors,
        fix_first: true,
    };
    problem.validate()?;
    Ok(problem)
}

/// Vertex poses as knots for a pose-graph problem.
pub fn pose_graph_knots(graph: &PoseGraph) -> Vec<StateKnot> {
    graph
        .vertices
        .iter()
        .enumerate()
        .map(|(i, p)| StateKnot::new(i as f64, *p, Twist::zeros()))
        .collect()
}

/// Initial vertices obtained by chaining odometry edges from the first vertex.
pub fn chain_odometry(graph: &PoseGraph) -> Vec<Pose> {
    let mut poses = graph.vertices.clone();
    for e in graph.edges.iter().filter(|e| e.is_odometry()) {
        poses[e.to] = e.meas_rel * poses[e.from];
    }
    poses
}

/// Mean of the edge covariances given in a graph file (identity if none).
pub fn mean_edge_covariance(graph: &PoseGraph, odometry: bool) -> Matrix6<f64> {
    let covs: Vec<Matrix6<f64>> = graph
        .edges
        .iter()
        .filter(|e| e.is_odometry() == odometry)
        .filter_map(|e| e.information.and_then(|i| i.try_inverse()))
        .collect();
    if covs.is_empty() {
        Matrix6::identity()
    } else {
        covs.iter().sum::<Matrix6<f64>>() / covs.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mean_err_m: f64,
    pub rmse_m: f64,
    pub ate_m: f64,
    /// Fraction of per-axis errors inside their 3-sigma envelopes.
    pub consistency_3sigma: Option<f64>,
    /// Per-knot world-frame position error.
    pub errors: Vec<Vector3<f64>>,
    /// Per-knot world-frame position standard deviations.
    pub sigmas: Option<Vec<Vector3<f64>>>,
}

impl MetricsReport {
    pub fn to_toml(&self) -> String {
        let mut s = format!(
            "mean_err_m = {:.16e}\nrmse_m = {:.16e}\nate_m = {:.16e}\n",
            self.mean_err_m, self.rmse_m, self.ate_m
        );
        if let Some(c) = self.consistency_3sigma {
            s.push_str(&format!("consistency_3sigma = {c:.16e}\n"));
        }
        s
    }
}

fn lookup_groundtruth(groundtruth: &[StateKnot], time: f64) -> Result<&StateKnot> {
    let idx = groundtruth.partition_point(|g| g.time < time - TIME_MATCH_TOL);
    groundtruth
        .get(idx)
        .filter(|g| (g.time - time).abs() <= TIME_MATCH_TOL)
        .ok_or(Error::MissingGroundtruth(time))
}

/// Translational error metrics of a posterior against groundtruth. With
/// `align_first` the estimate is first moved rigidly so its first pose matches.
pub fn evaluate(
    posterior: &TrajectoryPosterior,
    groundtruth: &[StateKnot],
    align_first: bool,
) -> Result<MetricsReport> {
    let k = posterior.knots.len();
    if k == 0 {
        return Err(Error::InvalidArgument("empty trajectory".into()));
    }
    let matched: Vec<&StateKnot> = posterior
        .knots
        .iter()
        .map(|kn| lookup_groundtruth(groundtruth, kn.time))
        .collect::<Result<_>>()?;
    // estimate' = estimate * A with A mapping the first estimate onto groundtruth
    let align = if align_first {
        posterior.knots[0].pose.inverse() * matched[0].pose
    } else {
        Pose::identity()
    };
    let mut errors = Vec::with_capacity(k);
    let mut sigmas = posterior.marginals.as_ref().map(|_| Vec::with_capacity(k));
    let mut inside = 0usize;
    for (i, (kn, gt)) in posterior.knots.iter().zip(&matched).enumerate() {
        let est = kn.pose * align;
        let err = world_position(&est) - world_position(&gt.pose);
        errors.push(err);
        if let Some(s) = sigmas.as_mut() {
            let cov = posterior.marginal(i, i)?;
            let srr = cov.fixed_view::<3, 3>(0, 0).into_owned();
            let c = est.rot;
            let pos_cov = c.transpose() * srr * c;
            let sd = pos_cov.diagonal().map(|v| v.max(0.0).sqrt());
            inside += (0..3).filter(|&a| err[a].abs() <= 3.0 * sd[a]).count();
            s.push(sd);
        }
    }
    let mean_err_m = errors.iter().map(|e| e.norm()).sum::<f64>() / k as f64;
    let rmse_m = (errors.iter().map(|e| e.norm_squared()).sum::<f64>() / k as f64).sqrt();
    let consistency_3sigma = sigmas.as_ref().map(|_| inside as f64 / (3 * k) as f64);
    Ok(MetricsReport {
        mean_err_m,
        rmse_m,
        ate_m: rmse_m,
        consistency_3sigma,
        errors,
        sigmas,
    })
}

/// Mean translational error of raw measurements against groundtruth.
pub fn measurement_error(measurements: &[Measurement], groundtruth: &[StateKnot]) -> Result<f64> {
    if measurements.is_empty() {
        return Err(Error::InvalidArgument("no measurements".into()));
    }
    let mut total = 0.0;
    for m in measurements {
        let gt = lookup_groundtruth(groundtruth, m.time)?;
        total += (world_position(&m.pose) - world_position(&gt.pose)).norm();
    }
    Ok(total / measurements.len() as f64)
}

/// Absolute trajectory error (RMSE of vertex positions) of pose-graph vertices.
pub fn pose_graph_ate(estimate: &[Pose], truth: &[Pose]) -> Result<f64> {
    if estimate.len() != truth.len() || estimate.is_empty() {
        return Err(Error::InvalidArgument("vertex count mismatch".into()));
    }
    let sq: f64 = estimate
        .iter()
        .zip(truth)
        .map(|(e, t)| (world_position(e) - world_position(t)).norm_squared())
        .sum();
    Ok((sq / estimate.len() as f64).sqrt())
}
