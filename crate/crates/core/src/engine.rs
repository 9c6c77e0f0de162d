//! Gaussian variational E-step: information assembly, damped mean updates,
//! sparse marginals, expectation approximations and the per-factor
//! Inverse-Wishart reweighting.

use log::{debug, warn};
use nalgebra::{DMatrix, DVector, Matrix6};

use crate::error::{Error, Result};
use crate::factors::{
    factor_jacobians, factor_residual, iw_factor_value, noise_information, FactorKind,
    FactorSpec, KnotLayout, NoiseBinding, Problem, StateKnot,
};
use crate::noise::{check_metaparameters, NoiseParameters};
use crate::sparse::{BlockCholesky, BlockSparseSym, PartialInverse};

pub const DEFAULT_KAPPA: f64 = 2.0;

/// How expectations over the posterior marginals are approximated.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ExpectationMode {
    /// Evaluate only at the mean (MAP Gauss-Newton).
    MapAtMean,
    /// First-order expansion about the mean.
    #[default]
    Linearized,
    /// Unscented points of the marginal with spread `kappa > 0`.
    Sigmapoint { kappa: f64 },
}

impl ExpectationMode {
    pub fn sigmapoint() -> Self {
        ExpectationMode::Sigmapoint {
            kappa: DEFAULT_KAPPA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            ExpectationMode::Sigmapoint { kappa } if !(kappa > 0.0) => Err(
                Error::InvalidArgument(format!("sigmapoint spread must be positive, got {kappa}")),
            ),
            _ => Ok(()),
        }
    }
}

/// Gaussian posterior over the trajectory.
#[derive(Debug, Clone)]
pub struct TrajectoryPosterior {
    pub knots: Vec<StateKnot>,
    pub layout: KnotLayout,
    pub fix_first: bool,
    /// Inverse covariance over the free knots.
    pub information: Option<BlockSparseSym>,
    pub log_det_information: Option<f64>,
    pub marginals: Option<PartialInverse>,
}

impl TrajectoryPosterior {
    pub fn new(problem: &Problem, knots: Vec<StateKnot>) -> Result<Self> {
        if knots.len() != problem.num_knots() {
            return Err(Error::InvalidArgument(format!(
                "expected {} knots, got {}",
                problem.num_knots(),
                knots.len()
            )));
        }
        Ok(Self {
            knots,
            layout: problem.layout,
            fix_first: problem.fix_first,
            information: None,
            log_det_information: None,
            marginals: None,
        })
    }

    pub fn num_free(&self) -> usize {
        self.knots.len() - usize::from(self.fix_first)
    }

    /// Index of a knot among the free variables.
    pub fn var_of(&self, knot: usize) -> Option<usize> {
        if self.fix_first {
            knot.checked_sub(1)
        } else {
            Some(knot)
        }
    }

    /// Covariance block between two knots (zero for a fixed knot).
    pub fn marginal(&self, a: usize, b: usize) -> Result<DMatrix<f64>> {
        let kd = self.layout.dim();
        match (self.var_of(a), self.var_of(b)) {
            (Some(va), Some(vb)) => self
                .marginals
                .as_ref()
                .ok_or(Error::MarginalUnavailable(a, b))?
                .block(va, vb)
                .map_err(|_| Error::MarginalUnavailable(a, b)),
            _ => Ok(DMatrix::zeros(kd, kd)),
        }
    }

    /// Joint covariance of the listed knots.
    pub fn joint_marginal(&self, knots: &[usize]) -> Result<DMatrix<f64>> {
        let kd = self.layout.dim();
        let mut m = DMatrix::zeros(kd * knots.len(), kd * knots.len());
        for (r, &a) in knots.iter().enumerate() {
            for (c, &b) in knots.iter().enumerate().skip(r) {
                let blk = self.marginal(a, b)?;
                m.view_mut((r * kd, c * kd), (kd, kd)).copy_from(&blk);
                if r != c {
                    m.view_mut((c * kd, r * kd), (kd, kd)).copy_from(&blk.transpose());
                }
            }
        }
        Ok(m)
    }

    fn local_knots(&self, factor: &FactorSpec) -> Vec<StateKnot> {
        factor.knots.iter().map(|&k| self.knots[k]).collect()
    }
}

/// Mean, second moment and cross-covariance from unscented points.
#[derive(Debug, Clone)]
pub struct SigmaMoments {
    pub mean: DVector<f64>,
    /// `E[e e^T]`.
    pub outer: DMatrix<f64>,
    /// `Cov(e, delta)`.
    pub cross: DMatrix<f64>,
    /// Statistical linearization `Cov(e, delta) * cov^+`.
    pub jacobian: DMatrix<f64>,
}

/// Unscented expectation of `f(delta)` with `delta ~ N(0, cov)` using `2n+1`
/// points at radius `sqrt(n + kappa)`.
pub fn unscented<F>(cov: &DMatrix<f64>, kappa: f64, f: F) -> Result<SigmaMoments>
where
    F: Fn(&DVector<f64>) -> Result<DVector<f64>>,
{
    if !(kappa > 0.0) {
        return Err(Error::InvalidArgument(format!("sigmapoint spread must be positive, got {kappa}")));
    }
    let n = cov.nrows();
    let sym = (cov + cov.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let scale = eig.eigenvalues.amax().max(f64::MIN_POSITIVE);
    let mut sqrt_cov = eig.eigenvectors.clone();
    let mut pinv_diag = DVector::zeros(n);
    for (c, &lam) in eig.eigenvalues.iter().enumerate() {
        let lam = lam.max(0.0);
        sqrt_cov.column_mut(c).scale_mut(lam.sqrt());
        if lam > 1e-13 * scale {
            pinv_diag[c] = 1.0 / lam;
        }
    }
    let radius = (n as f64 + kappa).sqrt();
    let w0 = kappa / (n as f64 + kappa);
    let wi = 1.0 / (2.0 * (n as f64 + kappa));

    let mut points = vec![DVector::zeros(n)];
    for c in 0..n {
        let col = sqrt_cov.column(c) * radius;
        points.push(col.clone());
        points.push(-col);
    }
    let values: Vec<DVector<f64>> = points.iter().map(&f).collect::<Result<_>>()?;
    let weight = |i: usize| if i == 0 { w0 } else { wi };
    let m = values[0].len();
    let mut mean = DVector::zeros(m);
    for (i, v) in values.iter().enumerate() {
        mean += v * weight(i);
    }
    let mut outer = DMatrix::zeros(m, m);
    let mut cross = DMatrix::zeros(m, n);
    for (i, (v, p)) in values.iter().zip(&points).enumerate() {
        outer += v * v.transpose() * weight(i);
        cross += (v - &mean) * p.transpose() * weight(i);
    }
    let cov_pinv = &eig.eigenvectors * DMatrix::from_diagonal(&pinv_diag) * eig.eigenvectors.transpose();
    let jacobian = &cross * cov_pinv;
    Ok(SigmaMoments {
        mean,
        outer: (&outer + outer.transpose()) * 0.5,
        cross,
        jacobian,
    })
}

fn retract_local(
    knots: &[StateKnot],
    delta: &DVector<f64>,
    layout: KnotLayout,
) -> Vec<StateKnot> {
    let kd = layout.dim();
    knots
        .iter()
        .enumerate()
        .map(|(s, k)| k.retract(&delta.as_slice()[s * kd..(s + 1) * kd], layout))
        .collect()
}

/// `E[e e^T]` of one factor under the posterior marginal of its knots.
pub fn expect_outer(
    factor: &FactorSpec,
    posterior: &TrajectoryPosterior,
    mode: ExpectationMode,
) -> Result<DMatrix<f64>> {
    let local = posterior.local_knots(factor);
    match mode {
        ExpectationMode::MapAtMean => {
            let e = factor_residual(factor, &local)?;
            Ok(&e * e.transpose())
        }
        ExpectationMode::Linearized => {
            let cov = posterior.joint_marginal(&factor.knots)?;
            let lin = factor_jacobians(factor, &local, posterior.layout)?;
            Ok(linearized_outer(&lin.residual, &lin.jacobian, &cov))
        }
        ExpectationMode::Sigmapoint { kappa } => {
            let cov = posterior.joint_marginal(&factor.knots)?;
            let layout = posterior.layout;
            let m = unscented(&cov, kappa, |d| {
                factor_residual(factor, &retract_local(&local, d, layout))
            })?;
            Ok(m.outer)
        }
    }
}

fn linearized_outer(e: &DVector<f64>, jac: &DMatrix<f64>, cov: &DMatrix<f64>) -> DMatrix<f64> {
    let m = e * e.transpose() + jac * cov * jac.transpose();
    (&m + m.transpose()) * 0.5
}

/// `E[e e^T]` with the fallback to the mean when the marginal is off-pattern.
pub(crate) fn expect_outer_or_mean(
    factor: &FactorSpec,
    posterior: &TrajectoryPosterior,
    mode: ExpectationMode,
) -> Result<DMatrix<f64>> {
    match expect_outer(factor, posterior, mode) {
        Err(Error::MarginalUnavailable(a, b)) => {
            warn!("marginal block ({a}, {b}) unavailable; using the mean for this factor");
            expect_outer(factor, posterior, ExpectationMode::MapAtMean)
        }
        other => other,
    }
}

/// `(Psi + E[e e^T]) / alpha` with `alpha = nu + d + 2`.
pub fn irls_update_upsilon(
    expected_outer: &Matrix6<f64>,
    psi: &Matrix6<f64>,
    nu: f64,
) -> Result<Matrix6<f64>> {
    check_metaparameters(nu, 1.0)?;
    let alpha = nu + 8.0;
    let u = (psi + expected_outer) / alpha;
    Ok((u + u.transpose()) * 0.5)
}

/// A factor's whitened contribution at the current iterate.
#[derive(Debug, Clone)]
pub struct FactorTerm {
    pub residual: DVector<f64>,
    pub jacobian: DMatrix<f64>,
    pub information: DMatrix<f64>,
    pub ln_det_cov: f64,
}

/// Residuals, Jacobians and noise of every factor. Measurement factors whose
/// residual lands in the near-pi zone are left out (`None`).
pub fn evaluate_terms(
    problem: &Problem,
    posterior: &TrajectoryPosterior,
    params: &NoiseParameters,
    mode: ExpectationMode,
) -> Result<Vec<Option<FactorTerm>>> {
    problem
        .factors
        .iter()
        .enumerate()
        .map(|(idx, f)| {
            let local = posterior.local_knots(f);
            let lin = match linearize(f, posterior, &local, mode) {
                Ok(l) => l,
                Err(Error::AngleNearPi { angle }) if f.kind != FactorKind::WnoaPrior => {
                    warn!("factor {idx} skipped this iteration: residual angle {angle} is near pi");
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let (information, ln_det_cov) = noise_information(f, &local, params)?;
            Ok(Some(FactorTerm {
                residual: lin.0,
                jacobian: lin.1,
                information,
                ln_det_cov,
            }))
        })
        .collect()
}

fn linearize(
    factor: &FactorSpec,
    posterior: &TrajectoryPosterior,
    local: &[StateKnot],
    mode: ExpectationMode,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if let ExpectationMode::Sigmapoint { kappa } = mode {
        if posterior.marginals.is_some() {
            match posterior.joint_marginal(&factor.knots) {
                Ok(cov) => {
                    let layout = posterior.layout;
                    let m = unscented(&cov, kappa, |d| {
                        factor_residual(factor, &retract_local(local, d, layout))
                    })?;
                    return Ok((m.mean, m.jacobian));
                }
                Err(Error::MarginalUnavailable(a, b)) => {
                    warn!("marginal block ({a}, {b}) unavailable; linearizing at the mean");
                }
                Err(e) => return Err(e),
            }
        }
    }
    let lin = factor_jacobians(factor, local, posterior.layout)?;
    Ok((lin.residual, lin.jacobian))
}

/// Information matrix and gradient over the free knots.
#[derive(Debug, Clone)]
pub struct Assembly {
    pub information: BlockSparseSym,
    pub gradient: DVector<f64>,
    pub terms: Vec<Option<FactorTerm>>,
}

/// `sum E^T M^{-1} E` and `sum E^T M^{-1} e`, scattered to the knots of each factor.
pub fn assemble_information(
    problem: &Problem,
    posterior: &TrajectoryPosterior,
    params: &NoiseParameters,
    mode: ExpectationMode,
) -> Result<Assembly> {
    let terms = evaluate_terms(problem, posterior, params, mode)?;
    Ok(assemble_terms(problem, posterior, terms))
}

fn assemble_terms(
    problem: &Problem,
    posterior: &TrajectoryPosterior,
    terms: Vec<Option<FactorTerm>>,
) -> Assembly {
    let kd = posterior.layout.dim();
    let n = posterior.num_free();
    let mut info = BlockSparseSym::new(n, kd);
    let mut grad = DVector::zeros(n * kd);
    for (f, term) in problem.factors.iter().zip(&terms) {
        // keep the pattern independent of which factors are active
        let vars: Vec<Option<usize>> = f.knots.iter().map(|&k| posterior.var_of(k)).collect();
        for (a, va) in vars.iter().enumerate() {
            for vb in vars.iter().skip(a + 1) {
                if let (Some(va), Some(vb)) = (va, vb) {
                    info.touch(*va, *vb);
                }
            }
        }
        let Some(t) = term else { continue };
        let wj = &t.information * &t.jacobian;
        let we = &t.information * &t.residual;
        for (a, va) in vars.iter().enumerate() {
            let Some(va) = *va else { continue };
            let ja = t.jacobian.columns(a * kd, kd);
            let mut g = grad.rows_mut(va * kd, kd);
            g += ja.transpose() * &we;
            for (b, vb) in vars.iter().enumerate() {
                let Some(vb) = *vb else { continue };
                if vb > va || (vb == va && b < a) {
                    continue;
                }
                let blk = ja.transpose() * wj.columns(b * kd, kd);
                if va == vb && a != b {
                    // the same knot appears twice in one factor
                    info.add_block(va, va, &(&blk + blk.transpose()));
                } else {
                    info.add_block(va, vb, &blk);
                }
            }
        }
    }
    Assembly {
        information: info,
        gradient: grad,
        terms,
    }
}

/// Solves `information * delta = -gradient`.
pub fn solve_mean_update(
    information: &BlockSparseSym,
    gradient: &DVector<f64>,
) -> Result<DVector<f64>> {
    let chol = BlockCholesky::factor(information)?;
    Ok(-chol.solve(gradient))
}

/// Perturbs each free knot by its slice of `delta`; cached covariances are dropped.
pub fn apply_update(posterior: &TrajectoryPosterior, delta: &DVector<f64>) -> TrajectoryPosterior {
    let kd = posterior.layout.dim();
    let knots = posterior
        .knots
        .iter()
        .enumerate()
        .map(|(k, knot)| match posterior.var_of(k) {
            Some(v) => knot.retract(&delta.as_slice()[v * kd..(v + 1) * kd], posterior.layout),
            None => *knot,
        })
        .collect();
    TrajectoryPosterior {
        knots,
        layout: posterior.layout,
        fix_first: posterior.fix_first,
        information: None,
        log_det_information: None,
        marginals: None,
    }
}

pub fn partial_inverse(information: &BlockSparseSym) -> Result<PartialInverse> {
    Ok(BlockCholesky::factor(information)?.partial_inverse())
}

fn iw_total(problem: &Problem, params: &NoiseParameters) -> Result<f64> {
    problem
        .factors
        .iter()
        .filter_map(|f| match f.binding {
            NoiseBinding::PerFactorIw(i) => Some(i),
            _ => None,
        })
        .map(|i| iw_factor_value(&params.upsilons[i], &params.psi, params.nu))
        .sum()
}

fn data_cost(terms: &[Option<FactorTerm>]) -> f64 {
    terms
        .iter()
        .flatten()
        .map(|t| 0.5 * ((t.residual.transpose() * &t.information * &t.residual)[(0, 0)] + t.ln_det_cov))
        .sum()
}

/// Loss functional `E_q[phi] + ln|Sigma^{-1}| / 2` of a posterior with cached
/// marginals, dropping constants.
pub fn loss_functional(
    problem: &Problem,
    posterior: &TrajectoryPosterior,
    params: &NoiseParameters,
    mode: ExpectationMode,
) -> Result<f64> {
    let log_det = posterior
        .log_det_information
        .ok_or_else(|| Error::InvalidArgument("posterior has no information factor".into()))?;
    let mut total = 0.5 * log_det + iw_total(problem, params)?;
    for (idx, f) in problem.factors.iter().enumerate() {
        let local = posterior.local_knots(f);
        let outer = match expect_outer_or_mean(f, posterior, mode) {
            Ok(o) => o,
            Err(Error::AngleNearPi { .. }) if f.kind != FactorKind::WnoaPrior => {
                warn!("factor {idx} left out of the loss: residual near pi");
                continue;
            }
            Err(e) => return Err(e),
        };
        let (info, ln_det) = noise_information(f, &local, params)?;
        total += 0.5 * ((&info * outer).trace() + ln_det);
    }
    Ok(total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EStepConfig {
    pub mode: ExpectationMode,
    /// Convergence threshold on `max |delta mu|`.
    pub tol: f64,
    pub max_iters: usize,
    /// Reweight IW-bound factors after every mean update.
    pub irls: bool,
    pub max_damping_steps: usize,
    /// Also stop once an accepted step lowers the loss by less than this
    /// fraction of its magnitude.
    pub rel_v_tol: f64,
}

impl Default for EStepConfig {
    fn default() -> Self {
        Self {
            mode: ExpectationMode::Linearized,
            tol: 1e-6,
            max_iters: 50,
            irls: true,
            max_damping_steps: 12,
            rel_v_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EStepIteration {
    pub iter: usize,
    pub v: f64,
    pub step_norm: f64,
    pub damped: bool,
}

#[derive(Debug, Clone)]
pub struct EStepResult {
    pub posterior: TrajectoryPosterior,
    pub trace: Vec<EStepIteration>,
    pub converged: bool,
    /// Loss functional of the returned posterior.
    pub v: f64,
}

struct Iterate {
    posterior: TrajectoryPosterior,
    assembly: Assembly,
    chol: Option<BlockCholesky>,
    cost: f64,
}

fn evaluate_iterate(
    problem: &Problem,
    posterior: TrajectoryPosterior,
    params: &NoiseParameters,
    mode: ExpectationMode,
) -> Result<Iterate> {
    let assembly = assemble_information(problem, &posterior, params, mode)?;
    finish_iterate(problem, posterior, assembly, params, mode)
}

/// Re-weights an iterate after the IW covariances changed; residuals and
/// Jacobians are reused.
fn reweighted_iterate(
    problem: &Problem,
    it: Iterate,
    params: &NoiseParameters,
    mode: ExpectationMode,
) -> Result<Iterate> {
    let mut terms = it.assembly.terms;
    for (f, term) in problem.factors.iter().zip(terms.iter_mut()) {
        let (NoiseBinding::PerFactorIw(_), Some(t)) = (f.binding, term.as_mut()) else {
            continue;
        };
        let local = it.posterior.local_knots(f);
        let (information, ln_det_cov) = noise_information(f, &local, params)?;
        t.information = information;
        t.ln_det_cov = ln_det_cov;
    }
    let assembly = assemble_terms(problem, &it.posterior, terms);
    finish_iterate(problem, it.posterior, assembly, params, mode)
}

fn finish_iterate(
    problem: &Problem,
    posterior: TrajectoryPosterior,
    assembly: Assembly,
    params: &NoiseParameters,
    mode: ExpectationMode,
) -> Result<Iterate> {
    let chol = match BlockCholesky::factor(&assembly.information) {
        Ok(c) => Some(c),
        Err(Error::FactorizationFailure { .. }) => None,
        Err(e) => return Err(e),
    };
    let data = data_cost(&assembly.terms) + iw_total(problem, params)?;
    let cost = match (&chol, mode) {
        (_, ExpectationMode::MapAtMean) => data,
        (Some(c), _) => data + 0.5 * c.log_det() + 0.5 * assembly.information.dim() as f64,
        (None, _) => f64::INFINITY,
    };
    Ok(Iterate {
        posterior,
        assembly,
        chol,
        cost,
    })
}

fn reported_v(it: &Iterate, mode: ExpectationMode) -> f64 {
    match (mode, &it.chol) {
        (ExpectationMode::MapAtMean, Some(c)) => it.cost + 0.5 * c.log_det(),
        _ => it.cost,
    }
}

/// Refreshes the cached covariance of an iterate from its own factorization.
fn attach_marginals(it: &mut Iterate) -> Result<()> {
    let chol = it
        .chol
        .as_ref()
        .ok_or(Error::NotPositiveDefinite { what: "information matrix" })?;
    it.posterior.marginals = Some(chol.partial_inverse());
    it.posterior.log_det_information = Some(chol.log_det());
    it.posterior.information = Some(it.assembly.information.clone());
    Ok(())
}

fn reweight(
    problem: &Problem,
    posterior: &TrajectoryPosterior,
    params: &mut NoiseParameters,
    mode: ExpectationMode,
) -> Result<()> {
    for (idx, f) in problem.factors.iter().enumerate() {
        let NoiseBinding::PerFactorIw(i) = f.binding else { continue };
        let outer = match expect_outer_or_mean(f, posterior, mode) {
            Ok(o) => o,
            Err(Error::AngleNearPi { .. }) => {
                warn!("factor {idx} keeps its covariance: residual near pi");
                continue;
            }
            Err(e) => return Err(e),
        };
        let outer = Matrix6::from_iterator(outer.iter().copied());
        params.upsilons[i] = irls_update_upsilon(&outer, &params.psi, params.nu)?;
    }
    Ok(())
}

/// Runs the E-step from `init`, updating the IW covariances in `params`.
pub fn run_estep(
    problem: &Problem,
    params: &mut NoiseParameters,
    init: TrajectoryPosterior,
    config: &EStepConfig,
) -> Result<EStepResult> {
    problem.validate()?;
    config.mode.validate()?;
    if params.upsilons.len() < problem.num_upsilons() {
        return Err(Error::InvalidArgument(format!(
            "{} IW covariances provided, {} needed",
            params.upsilons.len(),
            problem.num_upsilons()
        )));
    }
    let mode = config.mode;
    let has_iw = config.irls && problem.num_upsilons() > 0;
    let needs_marginals = !matches!(mode, ExpectationMode::MapAtMean);

    let mut init = init;
    init.marginals = None;
    let mut current = evaluate_iterate(problem, init, params, ExpectationMode::Linearized)?;
    if needs_marginals || has_iw {
        if current.chol.is_some() {
            attach_marginals(&mut current)?;
            if has_iw {
                reweight(problem, &current.posterior, params, mode)?;
            }
        }
        let post = current.posterior.clone();
        current = evaluate_iterate(problem, post, params, mode)?;
    } else if mode != ExpectationMode::Linearized {
        let post = current.posterior.clone();
        current = evaluate_iterate(problem, post, params, mode)?;
    }

    let mut trace = Vec::new();
    let mut converged = false;
    let mut lambda = 0.0_f64;
    for iter in 1..=config.max_iters {
        let mut damped = false;
        let mut accepted: Option<(Iterate, f64)> = None;
        for _ in 0..=config.max_damping_steps {
            let use_lambda = if current.chol.is_none() && lambda == 0.0 { 1e-6 } else { lambda };
            let chol = if use_lambda == 0.0 {
                current.chol.clone()
            } else {
                BlockCholesky::factor(
                    &current.assembly.information.damped(use_lambda, 1e-12),
                )
                .ok()
            };
            let Some(chol) = chol else {
                lambda = (use_lambda * 10.0).max(1e-6);
                damped = true;
                continue;
            };
            let delta = -chol.solve(&current.assembly.gradient);
            let norm = delta.amax();
            if !norm.is_finite() {
                lambda = (use_lambda * 10.0).max(1e-6);
                damped = true;
                continue;
            }
            let mut cand_post = apply_update(&current.posterior, &delta);
            if matches!(mode, ExpectationMode::Sigmapoint { .. }) {
                cand_post.marginals = current.posterior.marginals.clone();
            }
            let cand = match evaluate_iterate(problem, cand_post, params, mode) {
                Ok(c) => c,
                Err(Error::AngleNearPi { .. }) => {
                    lambda = (use_lambda * 10.0).max(1e-6);
                    damped = true;
                    continue;
                }
                Err(e) => return Err(e),
            };
            let slack = 1e-12 * current.cost.abs().max(1.0);
            if cand.cost <= current.cost + slack {
                accepted = Some((cand, norm));
                lambda = if use_lambda > 0.0 { use_lambda / 10.0 } else { 0.0 };
                if lambda < 1e-9 {
                    lambda = 0.0;
                }
                damped |= use_lambda > 0.0;
                break;
            }
            if norm < config.tol {
                break;
            }
            lambda = (use_lambda * 10.0).max(1e-6);
            damped = true;
        }

        let Some((mut next, step_norm)) = accepted else {
            // no damped step lowers the loss: the iterate is a local minimum
            let v = reported_v(&current, mode);
            debug!("iter={iter} V={v:.12e} |dmu|={:.6e} damped={damped}", 0.0);
            trace.push(EStepIteration {
                iter,
                v,
                step_norm: 0.0,
                damped,
            });
            converged = true;
            break;
        };

        if needs_marginals || has_iw {
            attach_marginals(&mut next)?;
            if has_iw {
                reweight(problem, &next.posterior, params, mode)?;
                next = reweighted_iterate(problem, next, params, mode)?;
                if next.chol.is_some() && matches!(mode, ExpectationMode::Sigmapoint { .. }) {
                    attach_marginals(&mut next)?;
                }
            }
        }
        let cost_before = current.cost;
        current = next;
        let v = reported_v(&current, mode);
        debug!("iter={iter} V={v:.12e} |dmu|={step_norm:.6e} damped={damped}");
        trace.push(EStepIteration {
            iter,
            v,
            step_norm,
            damped,
        });
        let small_gain = cost_before - current.cost <= config.rel_v_tol * current.cost.abs().max(1.0);
        if step_norm < config.tol || small_gain {
            converged = true;
            break;
        }
    }

    if current.chol.is_none() {
        return Err(Error::NotPositiveDefinite { what: "information matrix" });
    }
    attach_marginals(&mut current)?;
    let v = match mode {
        ExpectationMode::Linearized => current.cost,
        _ => loss_functional(problem, &current.posterior, params, mode)?,
    };
    if !converged {
        warn!("E-step stopped after {} iterations without converging", config.max_iters);
    }
    Ok(EStepResult {
        posterior: current.posterior,
        trace,
        converged,
        v,
    })
}
