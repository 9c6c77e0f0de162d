//! Factor-graph representation: knots, factor definitions, residuals and
//! analytic Jacobians.
//!
//! Knots are perturbed on the left, `T <- exp_se3(d_pose) * T` and
//! `w <- w + d_vel`, and all Jacobians are taken with respect to that local
//! perturbation (pose part first, velocity part second).

use nalgebra::{DMatrix, DVector, Matrix6, SMatrix, SVector};

use crate::error::{Error, Result};
use crate::lie::{self, Pose, Twist};
use crate::noise::{check_metaparameters, NoiseParameters, IW_DIM};

pub type Vector12 = SVector<f64, 12>;
pub type Matrix12 = SMatrix<f64, 12, 12>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KnotLayout {
    /// Pose and body velocity per knot (12-dim perturbation).
    PoseVelocity,
    /// Pose only (6-dim perturbation), used for pose graphs.
    PoseOnly,
}

impl KnotLayout {
    pub fn dim(self) -> usize {
        match self {
            KnotLayout::PoseVelocity => 12,
            KnotLayout::PoseOnly => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateKnot {
    pub time: f64,
    pub pose: Pose,
    pub velocity: Twist,
}

impl StateKnot {
    pub fn new(time: f64, pose: Pose, velocity: Twist) -> Self {
        Self {
            time,
            pose,
            velocity,
        }
    }

    /// Applies a local perturbation of length `layout.dim()`.
    pub fn retract(&self, delta: &[f64], layout: KnotLayout) -> StateKnot {
        debug_assert_eq!(delta.len(), layout.dim());
        let d_pose = Twist::from_column_slice(&delta[..6]);
        let pose = (lie::exp_se3(&d_pose) * self.pose).orthonormalized_if_drifting();
        let velocity = match layout {
            KnotLayout::PoseVelocity => self.velocity + Twist::from_column_slice(&delta[6..12]),
            KnotLayout::PoseOnly => self.velocity,
        };
        StateKnot {
            time: self.time,
            pose,
            velocity,
        }
    }
}

trait DriftGuard {
    fn orthonormalized_if_drifting(self) -> Self;
}

impl DriftGuard for Pose {
    fn orthonormalized_if_drifting(self) -> Self {
        let err = (self.rot.transpose() * self.rot - nalgebra::Matrix3::identity()).norm();
        if err > 1e-12 {
            self.orthonormalized()
        } else {
            self
        }
    }
}

/// Which static covariance a factor uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum StaticSlot {
    Measurement,
    Groundtruth,
    /// Odometry edges of a pose graph.
    Odometry,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseBinding {
    Static(StaticSlot),
    /// Index into `NoiseParameters::upsilons`.
    PerFactorIw(usize),
    MotionPrior,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FactorKind {
    WnoaPrior,
    PoseMeasurement(Pose),
    GroundtruthPose(Pose),
    /// Measured `T_to * T_from^{-1}`.
    RelativePose(Pose),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FactorSpec {
    pub kind: FactorKind,
    pub knots: Vec<usize>,
    pub binding: NoiseBinding,
}

impl FactorSpec {
    pub fn wnoa(prev: usize) -> Self {
        Self {
            kind: FactorKind::WnoaPrior,
            knots: vec![prev, prev + 1],
            binding: NoiseBinding::MotionPrior,
        }
    }

    pub fn pose_measurement(knot: usize, meas: Pose, binding: NoiseBinding) -> Self {
        Self {
            kind: FactorKind::PoseMeasurement(meas),
            knots: vec![knot],
            binding,
        }
    }

    pub fn groundtruth(knot: usize, meas: Pose) -> Self {
        Self {
            kind: FactorKind::GroundtruthPose(meas),
            knots: vec![knot],
            binding: NoiseBinding::Static(StaticSlot::Groundtruth),
        }
    }

    pub fn relative(from: usize, to: usize, meas_rel: Pose, binding: NoiseBinding) -> Self {
        Self {
            kind: FactorKind::RelativePose(meas_rel),
            knots: vec![from, to],
            binding,
        }
    }

    pub fn error_dim(&self) -> usize {
        match self.kind {
            FactorKind::WnoaPrior => 12,
            _ => 6,
        }
    }
}

/// A factor graph over a sequence of timestamped knots.
#[derive(Debug, Clone)]
pub struct Problem {
    pub times: Vec<f64>,
    pub layout: KnotLayout,
    pub factors: Vec<FactorSpec>,
    /// Hold the first knot fixed (gauge freedom of pose graphs).
    pub fix_first: bool,
}

impl Problem {
    pub fn num_knots(&self) -> usize {
        self.times.len()
    }

    pub fn num_upsilons(&self) -> usize {
        self.factors
            .iter()
            .filter_map(|f| match f.binding {
                NoiseBinding::PerFactorIw(i) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0)
    }

    pub fn has_binding(&self, pred: impl Fn(&NoiseBinding) -> bool) -> bool {
        self.factors.iter().any(|f| pred(&f.binding))
    }

    pub fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(Error::IllPosed("no knots".into()));
        }
        if self.times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::IllPosed("knot timestamps must be strictly increasing".into()));
        }
        let n = self.num_knots();
        let mut iw_seen = vec![false; self.num_upsilons()];
        for (idx, f) in self.factors.iter().enumerate() {
            if f.knots.iter().any(|&k| k >= n) {
                return Err(Error::IllPosed(format!("factor {idx} references a missing knot")));
            }
            let ok = match f.kind {
                FactorKind::WnoaPrior => {
                    self.layout == KnotLayout::PoseVelocity
                        && f.knots.len() == 2
                        && f.knots[1] == f.knots[0] + 1
                        && f.binding == NoiseBinding::MotionPrior
                }
                FactorKind::PoseMeasurement(_) | FactorKind::GroundtruthPose(_) => {
                    f.knots.len() == 1 && f.binding != NoiseBinding::MotionPrior
                }
                FactorKind::RelativePose(_) => {
                    f.knots.len() == 2
                        && f.knots[0] != f.knots[1]
                        && f.binding != NoiseBinding::MotionPrior
                }
            };
            if !ok {
                return Err(Error::IllPosed(format!("factor {idx} has an invalid shape: {f:?}")));
            }
            if let NoiseBinding::PerFactorIw(i) = f.binding {
                if iw_seen[i] {
                    return Err(Error::IllPosed(format!(
                        "upsilon {i} is bound to more than one factor"
                    )));
                }
                iw_seen[i] = true;
            }
        }
        if iw_seen.iter().any(|s| !s) {
            return Err(Error::IllPosed("unbound upsilon index".into()));
        }
        let anchored = self.fix_first
            || self.factors.iter().any(|f| {
                matches!(
                    f.kind,
                    FactorKind::PoseMeasurement(_) | FactorKind::GroundtruthPose(_)
                )
            });
        if !anchored {
            return Err(Error::IllPosed(
                "no unary factor and no fixed knot: gauge is free".into(),
            ));
        }
        Ok(())
    }
}

/// `Q_k = Q_dt (x) Q_c` for the white-noise-on-acceleration prior.
pub fn wnoa_qk(dt: f64, qc: &Matrix6<f64>) -> Result<Matrix12> {
    if !(dt > 0.0) {
        return Err(Error::NonPositiveDt(dt));
    }
    Ok(kron2(
        [[dt.powi(3) / 3.0, dt * dt / 2.0], [dt * dt / 2.0, dt]],
        qc,
    ))
}

/// `Q_k^{-1} = Q_dt^{-1} (x) Q_c^{-1}` from its closed form.
pub fn wnoa_qk_inv(dt: f64, qc_inv: &Matrix6<f64>) -> Result<Matrix12> {
    if !(dt > 0.0) {
        return Err(Error::NonPositiveDt(dt));
    }
    Ok(kron2(wnoa_qdt_inv(dt), qc_inv))
}

/// The 2x2 matrix `Q_dt^{-1}`.
pub fn wnoa_qdt_inv(dt: f64) -> [[f64; 2]; 2] {
    [
        [12.0 / dt.powi(3), -6.0 / (dt * dt)],
        [-6.0 / (dt * dt), 4.0 / dt],
    ]
}

fn kron2(a: [[f64; 2]; 2], b: &Matrix6<f64>) -> Matrix12 {
    let mut m = Matrix12::zeros();
    for (i, row) in a.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            m.fixed_view_mut::<6, 6>(6 * i, 6 * j).copy_from(&(b * v));
        }
    }
    m
}

/// Motion-prior error between consecutive knots.
pub fn wnoa_error(prev: &StateKnot, next: &StateKnot) -> Result<Vector12> {
    let dt = next.time - prev.time;
    if !(dt > 0.0) {
        return Err(Error::NonPositiveDt(dt));
    }
    let xi = lie::log_se3(&(next.pose * prev.pose.inverse()))?;
    let top = xi - prev.velocity * dt;
    let bottom = lie::jac_inv_se3(&xi)? * next.velocity - prev.velocity;
    let mut e = Vector12::zeros();
    e.fixed_rows_mut::<6>(0).copy_from(&top);
    e.fixed_rows_mut::<6>(6).copy_from(&bottom);
    Ok(e)
}

/// `log(T_k * T_meas^{-1})`.
pub fn pose_meas_error(knot: &StateKnot, meas: &Pose) -> Result<Twist> {
    lie::log_se3(&(knot.pose * meas.inverse()))
}

/// `log((T_to * T_from^{-1}) * meas_rel^{-1})`.
pub fn relative_pose_error(from: &StateKnot, to: &StateKnot, meas_rel: &Pose) -> Result<Twist> {
    lie::log_se3(&(to.pose * from.pose.inverse() * meas_rel.inverse()))
}

/// Residual of a factor given its knots in `factor.knots` order.
pub fn factor_residual(factor: &FactorSpec, knots: &[StateKnot]) -> Result<DVector<f64>> {
    Ok(match factor.kind {
        FactorKind::WnoaPrior => DVector::from_column_slice(wnoa_error(&knots[0], &knots[1])?.as_slice()),
        FactorKind::PoseMeasurement(m) | FactorKind::GroundtruthPose(m) => {
            DVector::from_column_slice(pose_meas_error(&knots[0], &m)?.as_slice())
        }
        FactorKind::RelativePose(m) => {
            DVector::from_column_slice(relative_pose_error(&knots[0], &knots[1], &m)?.as_slice())
        }
    })
}

/// Residual and stacked Jacobian of one factor.
#[derive(Debug, Clone)]
pub struct Linearization {
    pub residual: DVector<f64>,
    /// `error_dim x (knots.len() * layout.dim())`, columns ordered by `factor.knots`.
    pub jacobian: DMatrix<f64>,
}

pub fn factor_jacobians(
    factor: &FactorSpec,
    knots: &[StateKnot],
    layout: KnotLayout,
) -> Result<Linearization> {
    let kd = layout.dim();
    match factor.kind {
        FactorKind::WnoaPrior => {
            let (prev, next) = (&knots[0], &knots[1]);
            let dt = next.time - prev.time;
            if !(dt > 0.0) {
                return Err(Error::NonPositiveDt(dt));
            }
            let xi = lie::log_se3(&(next.pose * prev.pose.inverse()))?;
            let j_inv = lie::jac_inv_se3(&xi)?;
            let j_inv_neg = lie::jac_inv_se3(&(-xi))?;
            let d_vel = lie::jac_inv_se3_derivative(&xi, &next.velocity);
            let mut e = Vector12::zeros();
            e.fixed_rows_mut::<6>(0).copy_from(&(xi - prev.velocity * dt));
            e.fixed_rows_mut::<6>(6)
                .copy_from(&(j_inv * next.velocity - prev.velocity));

            let mut jac = DMatrix::zeros(12, 24);
            let id = Matrix6::<f64>::identity();
            // d xi / d prev_pose = -J^{-1}(-xi), d xi / d next_pose = J^{-1}(xi)
            jac.fixed_view_mut::<6, 6>(0, 0).copy_from(&(-j_inv_neg));
            jac.fixed_view_mut::<6, 6>(0, 6).copy_from(&(-id * dt));
            jac.fixed_view_mut::<6, 6>(0, 12).copy_from(&j_inv);
            jac.fixed_view_mut::<6, 6>(6, 0).copy_from(&(-d_vel * j_inv_neg));
            jac.fixed_view_mut::<6, 6>(6, 6).copy_from(&(-id));
            jac.fixed_view_mut::<6, 6>(6, 12).copy_from(&(d_vel * j_inv));
            jac.fixed_view_mut::<6, 6>(6, 18).copy_from(&j_inv);
            Ok(Linearization {
                residual: DVector::from_column_slice(e.as_slice()),
                jacobian: jac,
            })
        }
        FactorKind::PoseMeasurement(m) | FactorKind::GroundtruthPose(m) => {
            let e = pose_meas_error(&knots[0], &m)?;
            let mut jac = DMatrix::zeros(6, kd);
            jac.fixed_view_mut::<6, 6>(0, 0)
                .copy_from(&lie::jac_inv_se3(&e)?);
            Ok(Linearization {
                residual: DVector::from_column_slice(e.as_slice()),
                jacobian: jac,
            })
        }
        FactorKind::RelativePose(m) => {
            let (from, to) = (&knots[0], &knots[1]);
            let rel = to.pose * from.pose.inverse();
            let e = lie::log_se3(&(rel * m.inverse()))?;
            let j_inv = lie::jac_inv_se3(&e)?;
            let mut jac = DMatrix::zeros(6, 2 * kd);
            jac.fixed_view_mut::<6, 6>(0, 0)
                .copy_from(&(-j_inv * lie::adjoint(&rel)));
            jac.fixed_view_mut::<6, 6>(0, kd).copy_from(&j_inv);
            Ok(Linearization {
                residual: DVector::from_column_slice(e.as_slice()),
                jacobian: jac,
            })
        }
    }
}

/// Covariance bound to a factor.
pub fn noise_covariance(
    factor: &FactorSpec,
    knots: &[StateKnot],
    params: &NoiseParameters,
) -> Result<DMatrix<f64>> {
    Ok(match factor.binding {
        NoiseBinding::MotionPrior => {
            let dt = knots[1].time - knots[0].time;
            to_dynamic(&wnoa_qk(dt, &params.qc)?)
        }
        NoiseBinding::Static(slot) => to_dynamic(&static_covariance(params, slot)?),
        NoiseBinding::PerFactorIw(i) => to_dynamic(&params.upsilons[i]),
    })
}

pub fn static_covariance(params: &NoiseParameters, slot: StaticSlot) -> Result<Matrix6<f64>> {
    let m = match slot {
        StaticSlot::Measurement => params.w,
        StaticSlot::Groundtruth => params.w_gt,
        StaticSlot::Odometry => params.w_odo,
    };
    m.ok_or_else(|| Error::InvalidArgument(format!("no covariance set for {slot:?} factors")))
}

/// Inverse covariance and `ln|M|` of the noise bound to a factor.
pub fn noise_information(
    factor: &FactorSpec,
    knots: &[StateKnot],
    params: &NoiseParameters,
) -> Result<(DMatrix<f64>, f64)> {
    match factor.binding {
        NoiseBinding::MotionPrior => {
            let dt = knots[1].time - knots[0].time;
            let chol = params
                .qc
                .cholesky()
                .ok_or(Error::NotPositiveDefinite { what: "Q_c" })?;
            let qc_inv = chol.inverse();
            let ln_det_qc = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            // ln|Q_dt (x) Q_c| = 6 ln|Q_dt| + 2 ln|Q_c|, |Q_dt| = dt^4 / 12
            let ln_det = 6.0 * (dt.powi(4) / 12.0).ln() + 2.0 * ln_det_qc;
            Ok((to_dynamic(&wnoa_qk_inv(dt, &qc_inv)?), ln_det))
        }
        _ => {
            let m = noise_covariance(factor, knots, params)?;
            let chol = m
                .cholesky()
                .ok_or(Error::NotPositiveDefinite { what: "factor covariance" })?;
            let ln_det = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            Ok((chol.inverse(), ln_det))
        }
    }
}

/// Negative log of the Inverse-Wishart factor with constants dropped:
/// `-((alpha-1)/2) ln|U^{-1}| - (nu/2) ln|Psi| + tr(Psi U^{-1}) / 2`, `alpha = nu + d + 2`.
pub fn iw_factor_value(upsilon: &Matrix6<f64>, psi: &Matrix6<f64>, nu: f64) -> Result<f64> {
    check_metaparameters(nu, 1.0)?;
    let chol_u = upsilon
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { what: "upsilon" })?;
    let chol_p = psi
        .cholesky()
        .ok_or(Error::NotPositiveDefinite { what: "psi" })?;
    let alpha = nu + IW_DIM as f64 + 2.0;
    let ln_det_u = 2.0 * chol_u.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let ln_det_p = 2.0 * chol_p.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    let tr = (psi * chol_u.inverse()).trace();
    Ok(0.5 * (alpha - 1.0) * ln_det_u - 0.5 * nu * ln_det_p + 0.5 * tr)
}

/// `phi(x | theta)`: the sum of `(e^T M^{-1} e + ln|M|) / 2` over all factors plus the IW factors.
pub fn negative_log_likelihood(
    problem: &Problem,
    knots: &[StateKnot],
    params: &NoiseParameters,
) -> Result<f64> {
    let mut total = 0.0;
    for f in &problem.factors {
        let local: Vec<StateKnot> = f.knots.iter().map(|&k| knots[k]).collect();
        let e = factor_residual(f, &local)?;
        let (info, ln_det) = noise_information(f, &local, params)?;
        total += 0.5 * ((e.transpose() * &info * &e)[(0, 0)] + ln_det);
        if let NoiseBinding::PerFactorIw(i) = f.binding {
            total += iw_factor_value(&params.upsilons[i], &params.psi, params.nu)?;
        }
    }
    Ok(total)
}

pub(crate) fn to_dynamic<const R: usize, const C: usize>(
    m: &SMatrix<f64, R, C>,
) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lie::exp_se3;
    use nalgebra::{Matrix4, Vector3};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_twist(rng: &mut ChaCha8Rng, t: f64, r: f64) -> Twist {
        Twist::from_fn(|i, _| {
            let s = if i < 3 { t } else { r };
            rng.random_range(-s..s)
        })
    }

    fn random_knot(rng: &mut ChaCha8Rng, time: f64) -> StateKnot {
        StateKnot::new(
            time,
            exp_se3(&random_twist(rng, 3.0, 1.5)),
            random_twist(rng, 2.0, 0.5),
        )
    }

    #[test]
    fn wnoa_error_vanishes_when_stationary() {
        let p = StateKnot::new(0.0, exp_se3(&Twist::new(1.0, 2.0, 3.0, 0.1, 0.2, 0.3)), Twist::zeros());
        let n = StateKnot { time: 1.0, ..p };
        assert!(wnoa_error(&p, &n).unwrap().amax() < 1e-14);
    }

    #[test]
    fn wnoa_error_vanishes_on_pure_translation() {
        let v = Twist::new(1.0, 0.0, 0.0, 0.0, 0.0, 0.0);
        let p = StateKnot::new(0.0, Pose::identity(), v);
        let n = StateKnot::new(1.0, exp_se3(&v), v);
        assert_eq!(wnoa_error(&p, &n).unwrap(), Vector12::zeros());
    }

    #[test]
    fn wnoa_error_small_on_constant_velocity_with_rotation() {
        let v = Twist::new(2.0, 0.3, -0.1, 0.05, -0.2, 0.3);
        let dt = 0.1;
        let start = exp_se3(&Twist::new(0.5, -1.0, 2.0, 0.3, 0.2, -0.1));
        let p = StateKnot::new(0.0, start, v);
        let n = StateKnot::new(dt, exp_se3(&(v * dt)) * start, v);
        let e = wnoa_error(&p, &n).unwrap();
        assert!(e.amax() < 1e-6 * dt * dt, "{e}");
    }

    #[test]
    fn qk_closed_forms() {
        let qk = wnoa_qk(1.0, &Matrix6::identity()).unwrap();
        let id = Matrix6::<f64>::identity();
        assert_eq!(qk.fixed_view::<6, 6>(0, 0).into_owned(), id / 3.0);
        assert_eq!(qk.fixed_view::<6, 6>(0, 6).into_owned(), id / 2.0);
        assert_eq!(qk.fixed_view::<6, 6>(6, 6).into_owned(), id);
        let qi = wnoa_qk_inv(1.0, &Matrix6::identity()).unwrap();
        assert_eq!(qi.fixed_view::<6, 6>(0, 0).into_owned(), id * 12.0);
        assert_eq!(qi.fixed_view::<6, 6>(0, 6).into_owned(), id * -6.0);
        assert_eq!(qi.fixed_view::<6, 6>(6, 6).into_owned(), id * 4.0);

        let q = Matrix6::from_diagonal(&SVector::<f64, 6>::new(1.0, 2.0, 3.0, 0.5, 0.25, 4.0));
        let qk = wnoa_qk(2.0, &q).unwrap();
        assert!((qk.fixed_view::<6, 6>(0, 0) - q * (8.0 / 3.0)).amax() < 1e-15);
        assert!((qk.fixed_view::<6, 6>(0, 6) - q * 2.0).amax() < 1e-15);
        assert!((qk.fixed_view::<6, 6>(6, 0) - q * 2.0).amax() < 1e-15);
        assert!((qk.fixed_view::<6, 6>(6, 6) - q * 2.0).amax() < 1e-15);

        for dt in [0.01, 0.1, 3.0] {
            let qk = wnoa_qk(dt, &q).unwrap();
            let qi = wnoa_qk_inv(dt, &q.try_inverse().unwrap()).unwrap();
            let cond = {
                let ev = qk.symmetric_eigenvalues();
                ev.max() / ev.min()
            };
            assert!((qk * qi - Matrix12::identity()).amax() < 1e-8 * cond.max(1.0));
        }
        assert!(matches!(wnoa_qk(0.0, &q), Err(Error::NonPositiveDt(_))));
        assert!(matches!(wnoa_qk_inv(-1.0, &q), Err(Error::NonPositiveDt(_))));
    }

    #[test]
    fn pose_measurement_error_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let k = random_knot(&mut rng, 0.0);
        assert!(pose_meas_error(&k, &k.pose).unwrap().amax() < 1e-14);
        let xi = Twist::new(1e-3, -2e-3, 5e-4, 1e-3, 2e-3, -1e-3);
        let meas = exp_se3(&(-xi)) * k.pose;
        assert!((pose_meas_error(&k, &meas).unwrap() - xi).amax() < 1e-9);
    }

    /// Matrix logarithm by inverse scaling and squaring (Denman-Beavers square
    /// roots followed by a Mercator series).
    fn matrix_log(a: &Matrix4<f64>) -> Matrix4<f64> {
        let mut x = *a;
        let mut k = 0;
        while (x - Matrix4::identity()).norm() > 1e-3 {
            let mut y = x;
            let mut z = Matrix4::identity();
            for _ in 0..60 {
                let yi = y.try_inverse().unwrap();
                let zi = z.try_inverse().unwrap();
                y = (y + zi) * 0.5;
                z = (z + yi) * 0.5;
            }
            x = y;
            k += 1;
        }
        let d = x - Matrix4::identity();
        let mut term = d;
        let mut acc = Matrix4::zeros();
        for n in 1..30 {
            let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
            acc += term * (sign / n as f64);
            term *= d;
        }
        acc * 2f64.powi(k)
    }

    #[test]
    fn pose_measurement_error_matches_matrix_log() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let k = random_knot(&mut rng, 0.0);
            let meas = exp_se3(&random_twist(&mut rng, 2.0, 1.0)) * k.pose;
            let e = pose_meas_error(&k, &meas).unwrap();
            let l = matrix_log(&(k.pose * meas.inverse()).to_matrix());
            // T = exp(-xi^): -log T = [[phi^, -rho], [0, 0]]
            let phi = crate::lie::vee_so3(&(-l.fixed_view::<3, 3>(0, 0).into_owned()));
            let rho: Vector3<f64> = l.fixed_view::<3, 1>(0, 3).into_owned();
            let oracle = Twist::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z);
            assert!((e - oracle).amax() < 1e-8, "{e} vs {oracle}");
        }
    }

    #[test]
    fn relative_pose_error_basics() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_knot(&mut rng, 0.0);
        let b = random_knot(&mut rng, 1.0);
        let rel = b.pose * a.pose.inverse();
        assert!(relative_pose_error(&a, &b, &rel).unwrap().amax() < 1e-12);

        let id = StateKnot::new(0.0, Pose::identity(), Twist::zeros());
        let xi = Twist::new(2e-3, 1e-3, -1e-3, 5e-4, -5e-4, 1e-3);
        let r = relative_pose_error(&id, &StateKnot { time: 1.0, ..id }, &exp_se3(&(-xi))).unwrap();
        assert!((r - xi).amax() < 1e-9);

        // anchored at the origin, a relative factor is a unary factor
        let z = exp_se3(&random_twist(&mut rng, 1.0, 0.5));
        let lhs = relative_pose_error(&id, &b, &z).unwrap();
        let rhs = pose_meas_error(&b, &z).unwrap();
        assert!((lhs - rhs).amax() < 1e-12);
    }

    fn fd_jacobian(f: &FactorSpec, knots: &[StateKnot], layout: KnotLayout) -> DMatrix<f64> {
        let kd = layout.dim();
        let h = 1e-6;
        let dim_e = f.error_dim();
        let mut jac = DMatrix::zeros(dim_e, kd * knots.len());
        for (slot, _) in knots.iter().enumerate() {
            for c in 0..kd {
                let mut delta = vec![0.0; kd];
                delta[c] = h;
                let mut plus = knots.to_vec();
                plus[slot] = knots[slot].retract(&delta, layout);
                delta[c] = -h;
                let mut minus = knots.to_vec();
                minus[slot] = knots[slot].retract(&delta, layout);
                let col = (factor_residual(f, &plus).unwrap() - factor_residual(f, &minus).unwrap())
                    / (2.0 * h);
                jac.column_mut(slot * kd + c).copy_from(&col);
            }
        }
        jac
    }

    fn assert_close(analytic: &DMatrix<f64>, fd: &DMatrix<f64>) {
        let scale = fd.amax().max(1.0);
        let diff = (analytic - fd).amax();
        assert!(diff < 1e-5 * scale, "diff {diff}\nanalytic {analytic}\nfd {fd}");
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..100 {
            let dt = rng.random_range(0.05..1.0);
            let prev = random_knot(&mut rng, 0.0);
            let step = random_twist(&mut rng, 1.0, 0.6);
            let next = StateKnot::new(
                dt,
                exp_se3(&step) * prev.pose,
                random_twist(&mut rng, 2.0, 0.5),
            );
            let f = FactorSpec::wnoa(0);
            let lin = factor_jacobians(&f, &[prev, next], KnotLayout::PoseVelocity).unwrap();
            assert_close(&lin.jacobian, &fd_jacobian(&f, &[prev, next], KnotLayout::PoseVelocity));

            let meas = exp_se3(&random_twist(&mut rng, 1.0, 0.8)) * prev.pose;
            let f = FactorSpec::pose_measurement(0, meas, NoiseBinding::Static(StaticSlot::Measurement));
            for layout in [KnotLayout::PoseVelocity, KnotLayout::PoseOnly] {
                let lin = factor_jacobians(&f, &[prev], layout).unwrap();
                assert_close(&lin.jacobian, &fd_jacobian(&f, &[prev], layout));
            }

            let rel = exp_se3(&random_twist(&mut rng, 0.5, 0.5)) * next.pose * prev.pose.inverse();
            let f = FactorSpec::relative(0, 1, rel, NoiseBinding::PerFactorIw(0));
            for layout in [KnotLayout::PoseVelocity, KnotLayout::PoseOnly] {
                let lin = factor_jacobians(&f, &[prev, next], layout).unwrap();
                assert_close(&lin.jacobian, &fd_jacobian(&f, &[prev, next], layout));
            }
        }
    }

    #[test]
    fn unary_jacobian_at_zero_residual_is_identity() {
        let k = StateKnot::new(0.0, Pose::identity(), Twist::zeros());
        let f = FactorSpec::pose_measurement(0, Pose::identity(), NoiseBinding::Static(StaticSlot::Measurement));
        let lin = factor_jacobians(&f, &[k], KnotLayout::PoseVelocity).unwrap();
        let mut expected = DMatrix::zeros(6, 12);
        expected.view_mut((0, 0), (6, 6)).fill_with_identity();
        assert_eq!(lin.jacobian, expected);
    }

    #[test]
    fn wnoa_jacobian_wrt_previous_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let prev = random_knot(&mut rng, 0.0);
        let next = StateKnot::new(0.3, exp_se3(&random_twist(&mut rng, 0.5, 0.3)) * prev.pose, prev.velocity);
        let lin = factor_jacobians(&FactorSpec::wnoa(0), &[prev, next], KnotLayout::PoseVelocity).unwrap();
        let block = lin.jacobian.view((0, 6), (12, 6)).into_owned();
        let mut expected = DMatrix::zeros(12, 6);
        expected.view_mut((0, 0), (6, 6)).fill_with_identity();
        expected.view_mut((0, 0), (6, 6)).scale_mut(-0.3);
        expected.view_mut((6, 0), (6, 6)).fill_with_identity();
        expected.view_mut((6, 0), (6, 6)).scale_mut(-1.0);
        assert!((block - expected).amax() < 1e-15);
    }

    #[test]
    fn iw_factor_values() {
        let id = Matrix6::<f64>::identity();
        assert!((iw_factor_value(&id, &id, 6.0).unwrap() - 3.0).abs() < 1e-14);

        // direct re-evaluation for a scaled upsilon
        let psi = Matrix6::from_diagonal(&SVector::<f64, 6>::new(2.0, 1.0, 0.5, 1.5, 1.0, 0.8));
        let u = Matrix6::from_diagonal(&SVector::<f64, 6>::new(0.3, 0.4, 0.2, 0.1, 0.6, 0.5));
        let nu = 6.0;
        let alpha = nu + 8.0;
        let direct = |u: &Matrix6<f64>| {
            let ui = u.try_inverse().unwrap();
            -0.5 * (alpha - 1.0) * ui.determinant().ln() - 0.5 * nu * psi.determinant().ln()
                + 0.5 * (psi * ui).trace()
        };
        let v1 = iw_factor_value(&u, &psi, nu).unwrap();
        let v2 = iw_factor_value(&(u * 2.0), &psi, nu).unwrap();
        assert!((v1 - direct(&u)).abs() < 1e-12);
        assert!((v2 - direct(&(u * 2.0))).abs() < 1e-12);
        let tr = (psi * u.try_inverse().unwrap()).trace();
        let expected_shift = 0.5 * (alpha - 1.0) * 6.0 * 2f64.ln() - 0.25 * tr;
        assert!((v2 - v1 - expected_shift).abs() < 1e-12);

        assert!(matches!(iw_factor_value(&id, &id, 5.0), Err(Error::InvalidDof { .. })));
        assert!(matches!(
            iw_factor_value(&(-id), &id, 6.0),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn nll_matches_dense_monolithic_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let k = 6;
        let mut knots = vec![random_knot(&mut rng, 0.0)];
        for i in 1..k {
            let prev = knots[i - 1];
            knots.push(StateKnot::new(
                i as f64 * 0.5,
                exp_se3(&random_twist(&mut rng, 0.5, 0.2)) * prev.pose,
                random_twist(&mut rng, 1.0, 0.2),
            ));
        }
        let mut factors = Vec::new();
        for i in 0..k - 1 {
            factors.push(FactorSpec::wnoa(i));
        }
        for i in 0..k {
            let meas = exp_se3(&random_twist(&mut rng, 0.2, 0.1)) * knots[i].pose;
            let binding = if i % 2 == 0 {
                NoiseBinding::PerFactorIw(i / 2)
            } else {
                NoiseBinding::Static(StaticSlot::Measurement)
            };
            factors.push(FactorSpec::pose_measurement(i, meas, binding));
        }
        let problem = Problem {
            times: knots.iter().map(|k| k.time).collect(),
            layout: KnotLayout::PoseVelocity,
            factors,
            fix_first: false,
        };
        problem.validate().unwrap();
        let mut params = NoiseParameters::initial(problem.num_upsilons(), 6.0, 1.0).unwrap();
        params.qc = Matrix6::from_diagonal(&SVector::<f64, 6>::new(1.0, 2.0, 0.5, 0.1, 0.2, 0.3));
        params.w = Some(Matrix6::identity() * 0.04);
        for (i, u) in params.upsilons.iter_mut().enumerate() {
            *u = Matrix6::identity() * (0.1 + 0.05 * i as f64);
        }

        // dense oracle: one stacked residual with a block-diagonal covariance
        let mut blocks = Vec::new();
        let mut residuals = Vec::new();
        let mut iw = 0.0;
        for f in &problem.factors {
            let local: Vec<StateKnot> = f.knots.iter().map(|&i| knots[i]).collect();
            residuals.extend(factor_residual(f, &local).unwrap().iter().copied());
            blocks.push(noise_covariance(f, &local, &params).unwrap());
            if let NoiseBinding::PerFactorIw(i) = f.binding {
                iw += iw_factor_value(&params.upsilons[i], &params.psi, params.nu).unwrap();
            }
        }
        let n: usize = blocks.iter().map(|b| b.nrows()).sum();
        let mut big = DMatrix::zeros(n, n);
        let mut off = 0;
        for b in &blocks {
            big.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
            off += b.nrows();
        }
        let e = DVector::from_vec(residuals);
        let dense = 0.5 * ((e.transpose() * big.clone().try_inverse().unwrap() * &e)[(0, 0)]
            + big.determinant().ln())
            + iw;
        let sparse = negative_log_likelihood(&problem, &knots, &params).unwrap();
        assert!((dense - sparse).abs() < 1e-8 * dense.abs().max(1.0), "{dense} vs {sparse}");
    }

    #[test]
    fn validate_rejects_bad_shapes() {
        let base = Problem {
            times: vec![0.0, 1.0, 2.0],
            layout: KnotLayout::PoseVelocity,
            factors: vec![FactorSpec::wnoa(0), FactorSpec::wnoa(1)],
            fix_first: false,
        };
        assert!(matches!(base.validate(), Err(Error::IllPosed(_))));
        let mut p = base.clone();
        p.fix_first = true;
        p.validate().unwrap();
        let mut p = base.clone();
        p.fix_first = true;
        p.factors.push(FactorSpec {
            kind: FactorKind::WnoaPrior,
            knots: vec![0, 2],
            binding: NoiseBinding::MotionPrior,
        });
        assert!(p.validate().is_err());
        let mut p = base;
        p.times[2] = 1.0;
        p.fix_first = true;
        assert!(p.validate().is_err());
    }
}
