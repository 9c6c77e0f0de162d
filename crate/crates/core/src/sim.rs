//! Seeded synthetic data: WNOA trajectories, pose measurements, noise and
//! outlier injection, and a pose-graph fixture with false loop closures.
//!
//! All randomness comes from `ChaCha8Rng::seed_from_u64`, so datasets are
//! identical on every platform for a given seed.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix6, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::dataset::{GraphEdge, InjectionFlag, Measurement, PoseGraph, ProblemDataset};
use crate::error::{Error, Result};
use crate::factors::{wnoa_qk, StateKnot};
use crate::lie::{self, exp_se3, Pose, Twist};

pub fn rng_from_seed(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Symmetric square root `S` with `S S^T = cov`; tolerates singular `cov`.
pub fn covariance_sqrt(cov: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots)
}

fn standard_normal(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

fn sample_twist(rng: &mut ChaCha8Rng, sqrt: &DMatrix<f64>) -> Twist {
    let z = standard_normal(rng, 6);
    Twist::from_column_slice((sqrt * z).as_slice())
}

/// Samples `k` knots `dt` apart from the WNOA prior starting at the identity
/// pose with `initial_velocity`. Each interval draws `(e1, e2) ~ N(0, Q_k)` and sets
/// `xi = dt v + e1`, `T_k = exp(xi) T_{k-1}`, `v_k = J(xi) (v + e2)`, so the
/// motion-prior error of the interval is exactly the draw.
pub fn simulate_wnoa(
    k: usize,
    dt: f64,
    qc: &Matrix6<f64>,
    initial_velocity: &Twist,
    seed: u64,
) -> Result<Vec<StateKnot>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("need at least two knots, got {k}")));
    }
    let qk = wnoa_qk(dt, qc)?;
    let sqrt = covariance_sqrt(&DMatrix::from_column_slice(12, 12, qk.as_slice()));
    let mut rng = rng_from_seed(seed);
    let mut knots = Vec::with_capacity(k);
    knots.push(StateKnot::new(0.0, Pose::identity(), *initial_velocity));
    for i in 1..k {
        let prev = knots[i - 1];
        let e = &sqrt * standard_normal(&mut rng, 12);
        let e1 = Twist::from_column_slice(&e.as_slice()[..6]);
        let e2 = Twist::from_column_slice(&e.as_slice()[6..]);
        let xi = prev.velocity * dt + e1;
        let pose = (exp_se3(&xi) * prev.pose).orthonormalized();
        let velocity = lie::jac_se3(&xi) * (prev.velocity + e2);
        knots.push(StateKnot::new(i as f64 * dt, pose, velocity));
    }
    Ok(knots)
}

/// One pose measurement per knot, `T_meas = exp(n) T` with `n ~ N(0, w)`.
pub fn measure_poses(groundtruth: &[StateKnot], w: &Matrix6<f64>, seed: u64) -> ProblemDataset {
    let sqrt = covariance_sqrt(&DMatrix::from_column_slice(6, 6, w.as_slice()));
    let mut rng = rng_from_seed(seed);
    let measurements = groundtruth
        .iter()
        .map(|g| Measurement {
            time: g.time,
            pose: exp_se3(&sample_twist(&mut rng, &sqrt)) * g.pose,
            flag: InjectionFlag::Clean,
        })
        .collect();
    ProblemDataset::from_measurements(measurements).with_groundtruth(groundtruth.to_vec())
}

/// Adds `N(0, sigma^2 I)` to the translational part of every measurement.
pub fn inject_noise(dataset: &ProblemDataset, sigma: f64, seed: u64) -> Result<ProblemDataset> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("noise sigma must be >= 0, got {sigma}")));
    }
    let mut out = dataset.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = rng_from_seed(seed);
    for m in &mut out.measurements {
        let mut xi = Twist::zeros();
        for a in 0..3 {
            xi[a] = sigma * rng.sample::<f64, _>(StandardNormal);
        }
        m.pose = exp_se3(&xi) * m.pose;
        if m.flag == InjectionFlag::Clean {
            m.flag = InjectionFlag::Noisy;
        }
    }
    out.noise_sigma = Some(sigma);
    Ok(out)
}

/// Independently with probability `rate`, replaces a measurement by
/// `exp(xi) T_meas` with `xi` uniform on `[-magnitude, magnitude]^6`.
pub fn inject_outliers(
    dataset: &ProblemDataset,
    rate: f64,
    magnitude: f64,
    seed: u64,
) -> Result<ProblemDataset> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("outlier rate must lie in [0, 1], got {rate}")));
    }
    if !(magnitude >= 0.0) {
        return Err(Error::InvalidArgument(format!("outlier magnitude must be >= 0, got {magnitude}")));
    }
    let mut out = dataset.clone();
    let mut rng = rng_from_seed(seed);
    for m in &mut out.measurements {
        // draw every variate so the stream does not depend on earlier outcomes
        let hit = rng.random::<f64>() < rate;
        let xi = Twist::from_fn(|_, _| rng.random_range(-magnitude..=magnitude));
        if hit {
            m.pose = (exp_se3(&xi) * m.pose).orthonormalized();
            m.flag = InjectionFlag::Outlier;
        }
    }
    out.outlier_rate = Some(rate);
    out.outlier_magnitude = Some(magnitude);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseGraphFixture {
    pub laps: usize,
    pub vertices_per_lap: usize,
    /// Distance between consecutive vertices (m).
    pub step: f64,
    /// Radial growth per lap (m).
    pub lap_spacing: f64,
    pub odometry_sigma: (f64, f64),
    pub closure_sigma: (f64, f64),
    /// A true closure to the previous lap is added at every `closure_every`th vertex.
    pub closure_every: usize,
    pub false_closures: usize,
    /// Range of true distances (m) between the vertices a false closure joins.
    pub false_closure_span: (f64, f64),
}

impl Default for PoseGraphFixture {
    fn default() -> Self {
        Self {
            laps: 4,
            vertices_per_lap: 50,
            step: 1.0,
            lap_spacing: 0.5,
            odometry_sigma: (0.05, 0.005),
            closure_sigma: (0.05, 0.005),
            closure_every: 5,
            false_closures: 20,
            false_closure_span: (3.0, 10.0),
        }
    }
}

/// A generated graph together with the poses that produced it.
#[derive(Debug, Clone)]
pub struct GeneratedPoseGraph {
    /// Vertices initialised by chaining odometry.
    pub graph: PoseGraph,
    pub truth: Vec<Pose>,
    /// Indices into `graph.edges` of the false closures.
    pub false_edges: Vec<usize>,
}

impl GeneratedPoseGraph {
    /// The same graph without its false closures.
    pub fn without_false_closures(&self) -> PoseGraph {
        let mut g = self.graph.clone();
        g.edges = self
            .graph
            .edges
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.false_edges.contains(i))
            .map(|(_, e)| e.clone())
            .collect();
        g
    }
}

fn sigma_information(sigma: (f64, f64)) -> Matrix6<f64> {
    let (t, r) = (sigma.0.powi(-2), sigma.1.powi(-2));
    diag6([t, t, t, r, r, r])
}

fn noisy_relative(rng: &mut ChaCha8Rng, rel: Pose, sigma: (f64, f64)) -> Pose {
    let mut n = Twist::zeros();
    for a in 0..3 {
        n[a] = sigma.0 * rng.sample::<f64, _>(StandardNormal);
        n[a + 3] = sigma.1 * rng.sample::<f64, _>(StandardNormal);
    }
    exp_se3(&n) * rel
}

impl PoseGraphFixture {
    /// Vehicle-from-world pose of vertex `i` on a slowly widening circle.
    fn true_pose(&self, i: usize) -> Pose {
        let n = self.vertices_per_lap as f64;
        let r0 = self.step * n / (2.0 * std::f64::consts::PI);
        let theta = 2.0 * std::f64::consts::PI * i as f64 / n;
        let r = r0 + self.lap_spacing * i as f64 / n;
        let heading = theta + std::f64::consts::FRAC_PI_2;
        let world_from_body = Matrix3::new(
            heading.cos(), -heading.sin(), 0.0,
            heading.sin(), heading.cos(), 0.0,
            0.0, 0.0, 1.0,
        );
        let p = Vector3::new(r * theta.cos(), r * theta.sin(), 0.0);
        Pose::new(world_from_body, p).inverse()
    }

    pub fn generate(&self, seed: u64) -> Result<GeneratedPoseGraph> {
        let n = self.laps * self.vertices_per_lap;
        if n < 2 || self.closure_every == 0 {
            return Err(Error::InvalidArgument("pose-graph fixture needs at least two vertices".into()));
        }
        let truth: Vec<Pose> = (0..n).map(|i| self.true_pose(i)).collect();
        let mut rng = rng_from_seed(seed);
        let mut edges = Vec::new();
        for i in 0..n - 1 {
            let rel = truth[i + 1] * truth[i].inverse();
            edges.push(GraphEdge {
                from: i,
                to: i + 1,
                meas_rel: noisy_relative(&mut rng, rel, self.odometry_sigma),
                information: Some(sigma_information(self.odometry_sigma)),
            });
        }
        for i in (self.vertices_per_lap..n).step_by(self.closure_every) {
            let j = i - self.vertices_per_lap;
            let rel = truth[i] * truth[j].inverse();
            edges.push(GraphEdge {
                from: j,
                to: i,
                meas_rel: noisy_relative(&mut rng, rel, self.closure_sigma),
                information: Some(sigma_information(self.closure_sigma)),
            });
        }
        let mut false_edges = Vec::new();
        let (near, far_limit) = self.false_closure_span;
        while false_edges.len() < self.false_closures {
            let a = rng.random_range(0..n);
            let b = rng.random_range(0..n);
            let (from, to) = (a.min(b), a.max(b));
            let gap = (crate::dataset::world_position(&truth[from])
                - crate::dataset::world_position(&truth[to]))
            .norm();
            if to <= from + 1 || gap <= near || gap > far_limit {
                continue;
            }
            false_edges.push(edges.len());
            edges.push(GraphEdge {
                from,
                to,
                meas_rel: noisy_relative(&mut rng, Pose::identity(), self.closure_sigma),
                information: Some(sigma_information(self.closure_sigma)),
            });
        }
        let mut graph = PoseGraph {
            ids: (0..n as i64).collect(),
            vertices: vec![truth[0]; n],
            edges,
            unsupported: 0,
        };
        graph.vertices = crate::dataset::chain_odometry(&graph);
        Ok(GeneratedPoseGraph { graph, truth, false_edges })
    }
}

/// `Matrix6` from a diagonal.
pub fn diag6(d: [f64; 6]) -> Matrix6<f64> {
    Matrix6::from_diagonal(&nalgebra::Vector6::from_column_slice(&d))
}
