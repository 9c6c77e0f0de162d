//! Closed-form M-steps and the EM driver.

use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use nalgebra::{DMatrix, Matrix6};
use serde::Deserialize;

use crate::engine::{
    expect_outer_or_mean, loss_functional, run_estep, EStepConfig, EStepIteration,
    ExpectationMode, TrajectoryPosterior,
};
use crate::error::{Error, Result};
use crate::factors::{wnoa_qdt_inv, FactorKind, NoiseBinding, Problem, StaticSlot};
use crate::noise::{check_metaparameters, NoiseParameters, IW_DIM};

/// Relative eigenvalue floor applied to learned covariances.
pub const SPD_FLOOR: f64 = 1e-12;

/// Symmetrizes and floors the spectrum at `SPD_FLOOR * trace / d`.
fn floor_spd(m: &Matrix6<f64>, what: &'static str) -> Result<Matrix6<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let min_eig = eig.eigenvalues.min();
    let scale = sym.trace() / IW_DIM as f64;
    if !(scale > 1e-300) || !scale.is_finite() {
        return Err(Error::DegenerateUpdate { what, min_eig });
    }
    let floor = SPD_FLOOR * scale;
    if min_eig >= floor {
        return Ok(sym);
    }
    let clamped = eig.eigenvalues.map(|l| l.max(floor));
    let out = eig.eigenvectors * Matrix6::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok((out + out.transpose()) * 0.5)
}

fn to_matrix6(m: &DMatrix<f64>) -> Matrix6<f64> {
    Matrix6::from_iterator(m.iter().copied())
}

/// `W = (1/K) sum E[e e^T]` over the factors bound to `slot`.
pub fn mstep_static_w(
    problem: &Problem,
    posterior: &TrajectoryPosterior,
    slot: StaticSlot,
    mode: ExpectationMode,
) -> Result<Matrix6<f64>> {
    let mut acc = Matrix6::zeros();
    let mut count = 0usize;
    for (idx, f) in problem.factors.iter().enumerate() {
        if f.binding != NoiseBinding::Static(slot) {
            continue;
        }
        match expect_outer_or_mean(f, posterior, mode) {
            Ok(o) => {
                acc += to_matrix6(&o);
                count += 1;
            }
            Err(Error::AngleNearPi { .. }) => {
                warn!("factor {idx} left out of the covariance update: residual near pi");
            }
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(Error::InvalidArgument(format!("no factors bound to {slot:?}")));
    }
    floor_spd(&(acc / count as f64), "static covariance")
}

/// Sum over motion-prior intervals of `sum_ab (Q_dt^{-1})_ab E[e e^T]^{(b,a)}`,
/// and the number of intervals.
fn qc_statistic(
    problem: &Problem,
    posterior: &TrajectoryPosterior,
    mode: ExpectationMode,
) -> Result<(Matrix6<f64>, usize)> {
    let mut g = Matrix6::zeros();
    let mut count = 0usize;
    for f in &problem.factors {
        if f.kind != FactorKind::WnoaPrior {
            continue;
        }
        let dt = posterior.knots[f.knots[1]].time - posterior.knots[f.knots[0]].time;
        let outer = expect_outer_or_mean(f, posterior, mode)?;
        g += qc_statistic_term(&outer, dt);
        count += 1;
    }
    Ok((g, count))
}

fn qc_statistic_term(outer: &DMatrix<f64>, dt: f64) -> Matrix6<f64> {
    let qinv = wnoa_qdt_inv(dt);
    let mut g = Matrix6::zeros();
    for (a, row) in qinv.iter().enumerate() {
        for (b, &w) in row.iter().enumerate() {
            g += outer.fixed_view::<6, 6>(6 * b, 6 * a) * w;
        }
    }
    g
}

/// Power-spectral density from a set of per-interval `E[e e^T]` (12x12) and
/// their time steps.
pub fn qc_from_outer(outers: &[(DMatrix<f64>, f64)], diagonal: bool) -> Result<Matrix6<f64>> {
    if outers.is_empty() {
        return Err(Error::InvalidArgument("no motion-prior factors".into()));
    }
    let g: Matrix6<f64> = outers.iter().map(|(o, dt)| qc_statistic_term(o, *dt)).sum();
    finish_qc(g, outers.len(), diagonal)
}

fn finish_qc(g: Matrix6<f64>, count: usize, diagonal: bool) -> Result<Matrix6<f64>> {
    let mut qc = g / (2.0 * count as f64);
    if diagonal {
        qc = Matrix6::from_diagonal(&qc.diagonal());
    }
    floor_spd(&qc, "Q_c")
}

/// Motion-prior power-spectral density update, full or diagonal.
pub fn mstep_qc(
    problem: &Problem,
    posterior: &TrajectoryPosterior,
    mode: ExpectationMode,
    diagonal: bool,
) -> Result<Matrix6<f64>> {
    let (g, count) = qc_statistic(problem, posterior, mode)?;
    if count == 0 {
        return Err(Error::InvalidArgument("no motion-prior factors".into()));
    }
    finish_qc(g, count, diagonal)
}

/// `Psi^{-1} = (1/(K nu)) sum Upsilon^{-1}`, rescaled so that `det(Psi) = beta`.
pub fn mstep_psi(upsilons: &[Matrix6<f64>], nu: f64, beta: f64) -> Result<Matrix6<f64>> {
    check_metaparameters(nu, beta)?;
    if upsilons.is_empty() {
        return Err(Error::InvalidArgument("no IW-bound factors".into()));
    }
    let mut acc = Matrix6::zeros();
    for u in upsilons {
        acc += u
            .cholesky()
            .ok_or(Error::NotPositiveDefinite { what: "upsilon" })?
            .inverse();
    }
    let psi_inv = acc / (upsilons.len() as f64 * nu);
    let psi = psi_inv
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { what: "psi" })?
        .inverse();
    Ok(rescale_to_determinant(&psi, beta))
}

/// `(beta / |psi|)^(1/d) psi`, computed in log space.
pub fn rescale_to_determinant(psi: &Matrix6<f64>, beta: f64) -> Matrix6<f64> {
    let sym = (psi + psi.transpose()) * 0.5;
    let ln_det = match sym.cholesky() {
        Some(c) => 2.0 * c.l().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
        None => sym.determinant().ln(),
    };
    let scale = ((beta.ln() - ln_det) / IW_DIM as f64).exp();
    sym * scale
}

/// Which parameters EM updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LearnSet {
    pub qc: bool,
    pub w: bool,
    pub w_gt: bool,
    pub w_odo: bool,
    pub psi: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmConfig {
    pub estep: EStepConfig,
    pub rounds: usize,
    /// Stop when the relative change of the loss falls below this.
    pub tol: f64,
    pub learn: LearnSet,
    pub diagonal_qc: bool,
    /// Over-relax the M-step along the log-space EM direction, growing the
    /// multiplier while the loss keeps falling below the previous round.
    pub accelerate: bool,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            estep: EStepConfig::default(),
            rounds: 20,
            tol: 1e-6,
            learn: LearnSet {
                qc: true,
                w: false,
                w_gt: true,
                w_odo: false,
                psi: true,
            },
            diagonal_qc: false,
            accelerate: true,
        }
    }
}

/// Largest over-relaxation multiplier tried.
const MAX_RELAXATION: f64 = 16.0;

fn spd_log(m: &Matrix6<f64>) -> Matrix6<f64> {
    let eig = ((m + m.transpose()) * 0.5).symmetric_eigen();
    let d = eig.eigenvalues.map(|l| l.max(f64::MIN_POSITIVE).ln());
    eig.eigenvectors * Matrix6::from_diagonal(&d) * eig.eigenvectors.transpose()
}

fn sym_exp(m: &Matrix6<f64>) -> Matrix6<f64> {
    let eig = ((m + m.transpose()) * 0.5).symmetric_eigen();
    let d = eig.eigenvalues.map(f64::exp);
    let out = eig.eigenvectors * Matrix6::from_diagonal(&d) * eig.eigenvectors.transpose();
    (out + out.transpose()) * 0.5
}

/// `exp(log a + eta (log b - log a))` for SPD `a`, `b`.
pub fn spd_extrapolate(a: &Matrix6<f64>, b: &Matrix6<f64>, eta: f64) -> Matrix6<f64> {
    let la = spd_log(a);
    sym_exp(&(la + (spd_log(b) - la) * eta))
}

fn extrapolate_params(
    from: &NoiseParameters,
    to: &NoiseParameters,
    eta: f64,
) -> NoiseParameters {
    let opt = |a: &Option<Matrix6<f64>>, b: &Option<Matrix6<f64>>| match (a, b) {
        (Some(a), Some(b)) if a != b => Some(spd_extrapolate(a, b, eta)),
        _ => *b,
    };
    let mut out = to.clone();
    if from.qc != to.qc {
        out.qc = spd_extrapolate(&from.qc, &to.qc, eta);
    }
    out.w = opt(&from.w, &to.w);
    out.w_gt = opt(&from.w_gt, &to.w_gt);
    out.w_odo = opt(&from.w_odo, &to.w_odo);
    if from.psi != to.psi {
        out.psi = rescale_to_determinant(&spd_extrapolate(&from.psi, &to.psi, eta), to.beta);
    }
    out
}

#[derive(Debug, Clone)]
pub struct EmRound {
    pub round: usize,
    /// Loss after the E-step, with the parameters it ran under.
    pub v_estep: f64,
    /// Loss after the M-step.
    pub v: f64,
    pub params: NoiseParameters,
    pub estep_trace: Vec<EStepIteration>,
    pub estep_converged: bool,
}

#[derive(Debug, Clone, Default)]
pub struct EmReport {
    pub rounds: Vec<EmRound>,
    pub converged: bool,
}

impl EmReport {
    pub fn v_history(&self) -> Vec<f64> {
        self.rounds.iter().map(|r| r.v).collect()
    }

    pub fn final_v(&self) -> Option<f64> {
        self.rounds.last().map(|r| r.v)
    }
}

#[derive(Debug, Clone)]
pub struct EmResult {
    pub params: NoiseParameters,
    pub posterior: TrajectoryPosterior,
    pub report: EmReport,
}

/// Alternates E-steps with the M-steps selected by `config.learn` (in the
/// order Q_c, static covariances, Psi).
pub fn run_em(
    problem: &Problem,
    init_params: NoiseParameters,
    init: TrajectoryPosterior,
    config: &EmConfig,
) -> Result<EmResult> {
    problem.validate()?;
    let mode = config.estep.mode;
    let mut params = init_params;
    if params.upsilons.len() != problem.num_upsilons() {
        params.reset_upsilons(problem.num_upsilons());
    }
    let has = |slot| problem.has_binding(|b| *b == NoiseBinding::Static(slot));
    let has_prior = problem.factors.iter().any(|f| f.kind == FactorKind::WnoaPrior);
    let has_iw = problem.num_upsilons() > 0;

    let mut posterior = init;
    let mut report = EmReport::default();
    let mut eta: f64 = 2.0;
    // Posterior, plain M-step parameters and loss to fall back to when an
    // over-relaxed step does not pay off.
    let mut fallback: Option<(TrajectoryPosterior, NoiseParameters, f64)> = None;
    for round in 1..=config.rounds {
        let mut est = run_estep(problem, &mut params, posterior, &config.estep)?;
        if let Some((post, plain, bound)) = fallback.take() {
            if est.v <= bound {
                eta = (eta * 2.0).min(MAX_RELAXATION);
            } else {
                eta = 1.0;
                params = plain;
                est = run_estep(problem, &mut params, post, &config.estep)?;
            }
        }
        posterior = est.posterior;
        let before = params.clone();
        if config.learn.qc && has_prior {
            params.qc = mstep_qc(problem, &posterior, mode, config.diagonal_qc)?;
        }
        if config.learn.w && has(StaticSlot::Measurement) {
            params.w = Some(mstep_static_w(problem, &posterior, StaticSlot::Measurement, mode)?);
        }
        if config.learn.w_gt && has(StaticSlot::Groundtruth) {
            params.w_gt = Some(mstep_static_w(problem, &posterior, StaticSlot::Groundtruth, mode)?);
        }
        if config.learn.w_odo && has(StaticSlot::Odometry) {
            params.w_odo = Some(mstep_static_w(problem, &posterior, StaticSlot::Odometry, mode)?);
        }
        if config.learn.psi && has_iw {
            params.psi = mstep_psi(&params.upsilons, params.nu, params.beta)?;
        }
        let v = loss_functional(problem, &posterior, &params, mode)?;
        info!("em round={round} V={v:.12e} estep_iters={}", est.trace.len());
        let prev = report.final_v();
        report.rounds.push(EmRound {
            round,
            v_estep: est.v,
            v,
            params: params.clone(),
            estep_trace: est.trace,
            estep_converged: est.converged,
        });
        if let Some(prev) = prev {
            if (prev - v).abs() <= config.tol * v.abs().max(1.0) {
                report.converged = true;
                break;
            }
        }
        if config.accelerate && round < config.rounds {
            if eta > 1.0 {
                let trial = extrapolate_params(&before, &params, eta);
                fallback = Some((posterior.clone(), std::mem::replace(&mut params, trial), v));
            } else {
                eta = 2.0;
            }
        }
    }
    if !report.converged {
        warn!("EM stopped after {} rounds without meeting the tolerance", config.rounds);
    }
    Ok(EmResult {
        params,
        posterior,
        report,
    })
}

/// On-disk form of learned parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterArtifact {
    pub qc: Matrix6<f64>,
    pub w: Option<Matrix6<f64>>,
    pub w_gt: Option<Matrix6<f64>>,
    pub w_odo: Option<Matrix6<f64>>,
    pub psi: Matrix6<f64>,
    pub nu: f64,
    pub beta: f64,
    pub em_rounds: usize,
    pub final_v: f64,
    pub converged: bool,
}

#[derive(Deserialize)]
struct RawArtifact {
    #[serde(rename = "Qc")]
    qc: Vec<f64>,
    #[serde(rename = "W")]
    w: Option<Vec<f64>>,
    #[serde(rename = "W_gt")]
    w_gt: Option<Vec<f64>>,
    #[serde(rename = "W_odo")]
    w_odo: Option<Vec<f64>>,
    #[serde(rename = "Psi")]
    psi: Vec<f64>,
    nu: f64,
    beta: f64,
    em_rounds: usize,
    #[serde(rename = "final_V")]
    final_v: f64,
    #[serde(default = "default_true")]
    converged: bool,
}

fn default_true() -> bool {
    true
}

fn row_major(m: &Matrix6<f64>) -> String {
    let vals: Vec<String> = m.transpose().iter().map(|v| format!("{v:.16e}")).collect();
    format!("[{}]", vals.join(", "))
}

fn from_row_major(v: &[f64], key: &str, path: &Path) -> Result<Matrix6<f64>> {
    if v.len() != 36 {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            line: 0,
            message: format!("{key} needs 36 values, found {}", v.len()),
        });
    }
    Ok(Matrix6::from_row_slice(v))
}

impl ParameterArtifact {
    pub fn from_result(params: &NoiseParameters, report: &EmReport) -> Self {
        Self {
            qc: params.qc,
            w: params.w,
            w_gt: params.w_gt,
            w_odo: params.w_odo,
            psi: params.psi,
            nu: params.nu,
            beta: params.beta,
            em_rounds: report.rounds.len(),
            final_v: report.final_v().unwrap_or(f64::NAN),
            converged: report.converged,
        }
    }

    pub fn to_toml(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Qc = {}", row_major(&self.qc));
        if let Some(w) = &self.w {
            let _ = writeln!(s, "W = {}", row_major(w));
        }
        if let Some(w) = &self.w_gt {
            let _ = writeln!(s, "W_gt = {}", row_major(w));
        }
        if let Some(w) = &self.w_odo {
            let _ = writeln!(s, "W_odo = {}", row_major(w));
        }
        let _ = writeln!(s, "Psi = {}", row_major(&self.psi));
        let _ = writeln!(s, "nu = {:.16e}", self.nu);
        let _ = writeln!(s, "beta = {:.16e}", self.beta);
        let _ = writeln!(s, "em_rounds = {}", self.em_rounds);
        if self.final_v.is_finite() {
            let _ = writeln!(s, "final_V = {:.16e}", self.final_v);
        } else {
            let _ = writeln!(s, "final_V = nan");
        }
        let _ = writeln!(s, "converged = {}", self.converged);
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let raw: RawArtifact = toml::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e
                .span()
                .map(|s| text[..s.start].lines().count().max(1) as u64)
                .unwrap_or(0),
            message: e.message().to_string(),
        })?;
        let opt = |v: Option<Vec<f64>>, key: &str| v.map(|v| from_row_major(&v, key, path)).transpose();
        Ok(Self {
            qc: from_row_major(&raw.qc, "Qc", path)?,
            w: opt(raw.w, "W")?,
            w_gt: opt(raw.w_gt, "W_gt")?,
            w_odo: opt(raw.w_odo, "W_odo")?,
            psi: from_row_major(&raw.psi, "Psi", path)?,
            nu: raw.nu,
            beta: raw.beta,
            em_rounds: raw.em_rounds,
            final_v: raw.final_v,
            converged: raw.converged,
        })
    }

    /// Noise parameters with IW covariances reset to the mode of `psi`.
    pub fn to_params(&self, num_upsilons: usize) -> Result<NoiseParameters> {
        let mut p = NoiseParameters::initial(num_upsilons, self.nu, self.beta)?;
        p.qc = self.qc;
        p.w = self.w.or(p.w);
        p.w_gt = self.w_gt.or(p.w_gt);
        p.w_odo = self.w_odo.or(p.w_odo);
        p.psi = self.psi;
        p.reset_upsilons(num_upsilons);
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::factors::{wnoa_qk, FactorSpec, KnotLayout, StateKnot};
    use crate::lie::{exp_se3, Pose, Twist};
    use crate::sparse::{BlockCholesky, BlockSparseSym};
    use nalgebra::{Matrix3, Vector3, Vector6};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_spd(rng: &mut ChaCha8Rng, scale: f64) -> Matrix6<f64> {
        let a = Matrix6::from_fn(|_, _| rng.random_range(-1.0..1.0));
        (a * a.transpose() + Matrix6::identity() * 0.1) * scale
    }

    fn single_knot_problem(meas: Vec<Pose>) -> Problem {
        Problem {
            times: vec![0.0],
            layout: KnotLayout::PoseOnly,
            factors: meas
                .into_iter()
                .map(|m| FactorSpec::pose_measurement(0, m, NoiseBinding::Static(StaticSlot::Measurement)))
                .collect(),
            fix_first: false,
        }
    }

    fn posterior_with_cov(problem: &Problem, knots: Vec<StateKnot>, cov: &DMatrix<f64>) -> TrajectoryPosterior {
        let mut post = TrajectoryPosterior::new(problem, knots).unwrap();
        let mut info = BlockSparseSym::new(1, cov.nrows());
        info.add_block(0, 0, &cov.clone().try_inverse().unwrap());
        let chol = BlockCholesky::factor(&info).unwrap();
        post.marginals = Some(chol.partial_inverse());
        post.log_det_information = Some(chol.log_det());
        post
    }

    #[test]
    fn static_w_with_zero_residual_is_propagated_covariance() {
        let meas = exp_se3(&Twist::new(0.3, -0.2, 0.1, 0.2, 0.1, -0.3));
        let problem = single_knot_problem(vec![meas]);
        let knot = StateKnot::new(0.0, meas, Twist::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sigma = DMatrix::from_iterator(6, 6, random_spd(&mut rng, 0.01).iter().copied());
        let post = posterior_with_cov(&problem, vec![knot], &sigma);
        let w = mstep_static_w(&problem, &post, StaticSlot::Measurement, ExpectationMode::Linearized).unwrap();
        let jac = crate::factors::factor_jacobians(&problem.factors[0], &[knot], KnotLayout::PoseOnly).unwrap().jacobian;
        let expected = &jac * &sigma * jac.transpose();
        assert!((w - to_matrix6(&expected)).amax() < 1e-14);
    }

    /// Translation-only offsets make the pose residual exactly linear.
    #[test]
    fn static_w_linear_residual_closed_form() {
        let z = Vector3::new(0.4, -0.1, 0.2);
        let mu = Vector3::new(0.1, 0.3, -0.2);
        let meas = Pose::new(Matrix3::identity(), z);
        let problem = single_knot_problem(vec![meas]);
        let knot = StateKnot::new(0.0, Pose::new(Matrix3::identity(), mu), Twist::zeros());
        let mut sigma = DMatrix::zeros(6, 6);
        sigma.view_mut((0, 0), (3, 3)).copy_from(&(Matrix3::identity() * 0.02 + Matrix3::from_element(0.005)));
        for i in 3..6 {
            sigma[(i, i)] = 1e-30;
        }
        let post = posterior_with_cov(&problem, vec![knot], &sigma);
        let w = mstep_static_w(&problem, &post, StaticSlot::Measurement, ExpectationMode::Linearized).unwrap();
        let d = mu - z;
        let expected = d * d.transpose() + sigma.view((0, 0), (3, 3));
        assert!((w.fixed_view::<3, 3>(0, 0) - expected).amax() < 1e-12);
    }

    #[test]
    fn static_w_recovers_injected_noise_covariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w_true = random_spd(&mut rng, 0.001);
        let l = w_true.cholesky().unwrap().l();
        let k = 10_000;
        let truth: Vec<StateKnot> = (0..k)
            .map(|i| StateKnot::new(i as f64, exp_se3(&Twist::from_fn(|_, _| rng.random_range(-1.0..1.0))), Twist::zeros()))
            .collect();
        let mut factors = Vec::new();
        let mut samples = Matrix6::zeros();
        for (i, t) in truth.iter().enumerate() {
            let n = l * Vector6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            // residual log(T T_meas^{-1}) = n when T_meas = exp(-n) T
            factors.push(FactorSpec::pose_measurement(i, exp_se3(&(-n)) * t.pose, NoiseBinding::Static(StaticSlot::Measurement)));
            samples += n * n.transpose();
        }
        let problem = Problem { times: truth.iter().map(|t| t.time).collect(), layout: KnotLayout::PoseOnly, factors, fix_first: false };
        let post = TrajectoryPosterior::new(&problem, truth).unwrap();
        let w = mstep_static_w(&problem, &post, StaticSlot::Measurement, ExpectationMode::MapAtMean).unwrap();
        let sample_cov = samples / k as f64;
        assert!((w - sample_cov).norm() < 0.05 * sample_cov.norm());
    }

    #[test]
    fn static_w_sigmapoint_matches_monte_carlo() {
        let meas = exp_se3(&Twist::new(0.2, 0.1, -0.1, 0.3, -0.2, 0.1));
        let problem = single_knot_problem(vec![meas]);
        let mean = StateKnot::new(0.0, exp_se3(&Twist::new(0.1, 0.0, 0.2, 0.1, 0.2, 0.0)), Twist::zeros());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sigma6 = random_spd(&mut rng, 0.002);
        let sigma = DMatrix::from_iterator(6, 6, sigma6.iter().copied());
        let post = posterior_with_cov(&problem, vec![mean], &sigma);
        let w = mstep_static_w(&problem, &post, StaticSlot::Measurement, ExpectationMode::sigmapoint()).unwrap();
        let l = sigma6.cholesky().unwrap().l();
        let n = 1_000_000;
        let mut m1 = Matrix6::zeros();
        let mut m2 = Matrix6::zeros();
        for _ in 0..n {
            let d = l * Vector6::from_fn(|_, _| rng.sample::<f64, _>(StandardNormal));
            let k = mean.retract(d.as_slice(), KnotLayout::PoseOnly);
            let e = crate::factors::pose_meas_error(&k, &meas).unwrap();
            let o = e * e.transpose();
            m1 += o;
            m2 += o.component_mul(&o);
        }
        let mc = m1 / n as f64;
        let var = m2 / n as f64 - mc.component_mul(&mc);
        for i in 0..6 {
            for j in 0..6 {
                let se = (var[(i, j)] / n as f64).sqrt();
                assert!((w[(i, j)] - mc[(i, j)]).abs() <= 3.0 * se + 1e-12, "({i},{j}) {} vs {} ± {se}", w[(i, j)], mc[(i, j)]);
            }
        }
    }

    #[test]
    fn qc_fixed_point_and_hand_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let q = random_spd(&mut rng, 1.0);
        let outers: Vec<(DMatrix<f64>, f64)> = [0.1, 0.5, 2.0]
            .iter()
            .map(|&dt| (DMatrix::from_iterator(12, 12, wnoa_qk(dt, &q).unwrap().iter().copied()), dt))
            .collect();
        let got = qc_from_outer(&outers, false).unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((got[(i, j)] - q[(i, j)]).abs() <= 1e-10 * q[(i, j)].abs().max(1e-3));
            }
        }
        let got = qc_from_outer(&[(DMatrix::identity(12, 12), 1.0)], false).unwrap();
        assert!((got - Matrix6::identity() * 8.0).amax() < 1e-14);
        assert!(matches!(
            qc_from_outer(&[(DMatrix::zeros(12, 12), 1.0)], false),
            Err(Error::DegenerateUpdate { .. })
        ));
        let diag = qc_from_outer(&outers, true).unwrap();
        assert!((diag.diagonal() - q.diagonal()).amax() < 1e-10);
        assert_eq!(diag[(0, 1)], 0.0);
    }

    #[test]
    fn psi_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let u0 = random_spd(&mut rng, 0.5);
        let nu = 6.0;
        // unscaled: Psi = nu * U0; check proportionality after rescaling
        let psi = mstep_psi(&[u0, u0, u0], nu, 1.0).unwrap();
        let raw = u0 * nu;
        let ratio = psi[(0, 0)] / raw[(0, 0)];
        assert!((psi - raw * ratio).amax() < 1e-10 * psi.amax());
        assert!((psi.determinant() - 1.0).abs() < 1e-10);
        let id = Matrix6::<f64>::identity();
        assert!((rescale_to_determinant(&(id * 2.0), 1.0) - id).amax() < 1e-14);
        assert!(mstep_psi(&[u0], 5.0, 1.0).is_err());
        assert!(mstep_psi(&[-u0], 6.0, 1.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn psi_determinant_constraint(seed in 0u64..100_000, count in 1usize..20, beta in 0.01f64..100.0, scale in 1e-3f64..1e3) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ups: Vec<Matrix6<f64>> = (0..count).map(|_| random_spd(&mut rng, scale)).collect();
            let psi = mstep_psi(&ups, 6.0, beta).unwrap();
            prop_assert!((psi.determinant() - beta).abs() < 1e-10 * beta);
            let inv_sum: Matrix6<f64> = ups.iter().map(|u| u.try_inverse().unwrap()).sum();
            let unscaled = (inv_sum / (count as f64 * 6.0)).try_inverse().unwrap();
            let r = psi[(0, 0)] / unscaled[(0, 0)];
            prop_assert!((psi - unscaled * r).amax() < 1e-8 * psi.amax());
        }
    }

    #[test]
    fn artifact_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let art = ParameterArtifact {
            qc: random_spd(&mut rng, 1.0),
            w: Some(random_spd(&mut rng, 0.1)),
            w_gt: None,
            w_odo: Some(random_spd(&mut rng, 0.01)),
            psi: random_spd(&mut rng, 1.0),
            nu: 6.0,
            beta: 1.0,
            em_rounds: 7,
            final_v: -1234.567890123456789,
            converged: true,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("params.toml");
        art.write(&path).unwrap();
        let back = ParameterArtifact::read(&path).unwrap();
        assert_eq!(back, art);
        let text = std::fs::read_to_string(&path).unwrap();
        for key in ["Qc =", "W =", "Psi =", "nu =", "beta =", "em_rounds =", "final_V ="] {
            assert!(text.contains(key), "{key}");
        }
        std::fs::write(&path, "Qc = [1.0]\n").unwrap();
        assert!(matches!(ParameterArtifact::read(&path), Err(Error::Parse { .. })));
    }

    #[test]
    fn extrapolation_endpoints_and_commuting_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let a = random_spd(&mut rng, 1.0);
        let b = random_spd(&mut rng, 2.0);
        assert!((spd_extrapolate(&a, &b, 0.0) - a).amax() < 1e-9 * a.amax());
        assert!((spd_extrapolate(&a, &b, 1.0) - b).amax() < 1e-9 * b.amax());
        let da = Matrix6::from_diagonal(&Vector6::new(1.0, 2.0, 4.0, 0.5, 0.1, 3.0));
        let db = da * 4.0;
        let twice = spd_extrapolate(&da, &db, 2.0);
        assert!((twice - da * 16.0).amax() < 1e-9 * 16.0 * 4.0);
    }

    fn small_iw_problem(seed: u64) -> (Problem, TrajectoryPosterior, NoiseParameters) {
        use crate::dataset::{build_trajectory_problem, windowed_medoid_init, TrajectoryProblemOptions};
        use crate::sim::{diag6, measure_poses, simulate_wnoa};
        let qc = diag6([1.0, 0.5, 0.2, 0.005, 0.002, 0.01]);
        let r = 1.0 / 169.0;
        let v0 = Twist::new(-5.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let gt = simulate_wnoa(150, 0.1, &qc, &v0, seed).unwrap();
        let ds = measure_poses(&gt, &diag6([1.0, 1.0, 1.0, r, r, r]), seed + 1);
        let problem = build_trajectory_problem(&ds, &TrajectoryProblemOptions::default()).unwrap();
        let post = TrajectoryPosterior::new(&problem, windowed_medoid_init(&ds, 5).unwrap()).unwrap();
        let params = NoiseParameters::initial(problem.num_upsilons(), 6.0, 1.0).unwrap();
        (problem, post, params)
    }

    #[test]
    fn em_loss_is_monotone_and_acceleration_helps() {
        let (problem, post, params) = small_iw_problem(5);
        let run = |accelerate: bool| {
            let cfg = EmConfig {
                learn: LearnSet { qc: true, psi: true, ..Default::default() },
                diagonal_qc: true,
                rounds: 12,
                tol: 0.0,
                accelerate,
                ..Default::default()
            };
            run_em(&problem, params.clone(), post.clone(), &cfg).unwrap()
        };
        let plain = run(false);
        let fast = run(true);
        for res in [&plain, &fast] {
            let v = res.report.v_history();
            assert_eq!(v.len(), 12);
            for w in v.windows(2) {
                assert!(w[1] <= w[0] + 1e-9 * w[0].abs(), "V rose from {} to {}", w[0], w[1]);
            }
            assert!((res.params.psi.determinant() - 1.0).abs() < 1e-10);
            assert!(!res.report.converged);
        }
        assert!(fast.report.final_v().unwrap() <= plain.report.final_v().unwrap());
    }

    #[test]
    fn em_stops_once_the_loss_settles() {
        let (problem, post, params) = small_iw_problem(6);
        let cfg = EmConfig {
            learn: LearnSet { qc: true, psi: true, ..Default::default() },
            rounds: 200,
            tol: 1e-5,
            ..Default::default()
        };
        let res = run_em(&problem, params, post, &cfg).unwrap();
        assert!(res.report.converged);
        let v = res.report.v_history();
        let n = v.len();
        assert!(n < 200);
        assert!((v[n - 2] - v[n - 1]).abs() <= 1e-5 * v[n - 1].abs());
    }
}
