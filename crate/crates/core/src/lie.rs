//! Closed-form SO(3) and SE(3) operations.
//!
//! Sign convention: a rotation vector `phi` maps to `C = exp(-phi^)` and a
//! twist `xi = (rho; phi)` maps to `T = exp(-xi^)` where
//!
//! ```text
//! xi^ = [ phi^  -rho ]        curly(xi) = [ phi^  rho^ ]
//!       [ 0^T     0  ]                    [  0    phi^ ]
//! ```
//!
//! Twists are always ordered translation first, rotation second. With this
//! convention `exp_se3(xi) = [[C, S(phi) rho], [0, 1]]`, the left Jacobian
//! of SE(3) is `[[S, Q], [0, S]]`, and to first order
//! `exp_se3(xi + w) = exp_se3(jac_se3(xi) * w) * exp_se3(xi)`.

use nalgebra::{Matrix3, Matrix4, Matrix6, Vector3, Vector6};

use crate::error::{Error, Result};

/// Below this rotation magnitude the closed forms switch to Taylor series.
pub const SMALL_ANGLE: f64 = 1e-6;

/// `log_so3` refuses rotations with `tr(C) <= -1 + NEAR_PI_TRACE_MARGIN`.
pub const NEAR_PI_TRACE_MARGIN: f64 = 1e-6;

/// Distance from 2*pi at which `jac_inv_so3` reports a singular Jacobian.
pub const JAC_INV_SINGULAR_MARGIN: f64 = 1e-3;

/// Below this rotation magnitude the SE(3) `Q` block is evaluated by series.
const Q_SERIES_ANGLE: f64 = 0.1;

pub type Twist = Vector6<f64>;

/// Rigid-body transform `T = [[C, r], [0, 1]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rot: Matrix3<f64>,
    pub trans: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn new(rot: Matrix3<f64>, trans: Vector3<f64>) -> Self {
        Self { rot, trans }
    }

    pub fn identity() -> Self {
        Self {
            rot: Matrix3::identity(),
            trans: Vector3::zeros(),
        }
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rot.transpose();
        Self {
            rot: rt,
            trans: -(rt * self.trans),
        }
    }

    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rot: self.rot * other.rot,
            trans: self.rot * other.trans + self.trans,
        }
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rot);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.trans);
        m
    }

    /// Reads the upper 3x4 part of a homogeneous matrix; the bottom row is ignored.
    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self {
            rot: m.fixed_view::<3, 3>(0, 0).into_owned(),
            trans: m.fixed_view::<3, 1>(0, 3).into_owned(),
        }
    }

    /// Re-orthonormalizes the rotation block (polar projection via SVD).
    pub fn orthonormalized(&self) -> Self {
        let svd = self.rot.svd(true, true);
        let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
        let mut rot = u * vt;
        if rot.determinant() < 0.0 {
            let mut u = u;
            u.column_mut(2).neg_mut();
            rot = u * vt;
        }
        Self {
            rot,
            trans: self.trans,
        }
    }
}

impl std::ops::Mul for Pose {
    type Output = Pose;
    fn mul(self, rhs: Pose) -> Pose {
        self.compose(&rhs)
    }
}

impl std::ops::Mul<&Pose> for &Pose {
    type Output = Pose;
    fn mul(self, rhs: &Pose) -> Pose {
        self.compose(rhs)
    }
}

pub fn hat_so3(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

pub fn vee_so3(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)], m[(0, 2)], m[(1, 0)])
}

/// `C = exp(-phi^)`.
pub fn exp_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let px = hat_so3(phi);
    let px2 = px * px;
    if angle < SMALL_ANGLE {
        let px3 = px2 * px;
        let px4 = px2 * px2;
        return Matrix3::identity() - px + px2 * 0.5 - px3 / 6.0 + px4 / 24.0;
    }
    let half_sin = (0.5 * angle).sin();
    Matrix3::identity() - px * (angle.sin() / angle) + px2 * (2.0 * half_sin * half_sin / (angle * angle))
}

/// Inverse of [`exp_so3`], returning `phi` with `|phi| < pi`.
pub fn log_so3(c: &Matrix3<f64>) -> Result<Vector3<f64>> {
    let tr = c.trace();
    // C - C^T = -2 sin(angle) a^
    let skew = vee_so3(&(c - c.transpose()));
    let sin_angle = 0.5 * skew.norm();
    let cos_angle = 0.5 * (tr - 1.0);
    let angle = sin_angle.atan2(cos_angle);
    if tr <= -1.0 + NEAR_PI_TRACE_MARGIN {
        return Err(Error::AngleNearPi { angle });
    }
    let ratio = if angle < 1e-4 {
        // angle / sin(angle) to fourth order
        let a2 = angle * angle;
        1.0 + a2 / 6.0 + 7.0 * a2 * a2 / 360.0
    } else {
        angle / sin_angle
    };
    Ok(skew * (-0.5 * ratio))
}

/// The SO(3) Jacobian `S(phi) = int_0^1 C^alpha d alpha`.
pub fn jac_so3(phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let px = hat_so3(phi);
    let px2 = px * px;
    if angle < SMALL_ANGLE {
        let px3 = px2 * px;
        let px4 = px2 * px2;
        return Matrix3::identity() - px * 0.5 + px2 / 6.0 - px3 / 24.0 + px4 / 120.0;
    }
    let a2 = angle * angle;
    let half_sin = (0.5 * angle).sin();
    Matrix3::identity() - px * (2.0 * half_sin * half_sin / a2)
        + px2 * ((angle - angle.sin()) / (a2 * angle))
}

/// `S(phi)^{-1}`; undefined at nonzero multiples of 2*pi.
pub fn jac_inv_so3(phi: &Vector3<f64>) -> Result<Matrix3<f64>> {
    let angle = phi.norm();
    if (angle - 2.0 * std::f64::consts::PI).abs() < JAC_INV_SINGULAR_MARGIN
        || angle >= 2.0 * std::f64::consts::PI
    {
        return Err(Error::SingularJacobian { angle });
    }
    let px = hat_so3(phi);
    let px2 = px * px;
    let coeff = if angle < SMALL_ANGLE {
        1.0 / 12.0 + angle * angle / 720.0
    } else {
        let half = 0.5 * angle;
        (1.0 - half / half.tan()) / (angle * angle)
    };
    Ok(Matrix3::identity() + px * 0.5 + px2 * coeff)
}

/// `xi^` as a 4x4 matrix (the matrix whose negative exponential is the pose).
pub fn hat_se3(xi: &Twist) -> Matrix4<f64> {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat_so3(&phi));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&(-rho));
    m
}

pub fn curly_se3(xi: &Twist) -> Matrix6<f64> {
    let rho = xi.fixed_rows::<3>(0).into_owned();
    let phi = xi.fixed_rows::<3>(3).into_owned();
    let px = hat_so3(&phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&px);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&hat_so3(&rho));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&px);
    m
}

fn split(xi: &Twist) -> (Vector3<f64>, Vector3<f64>) {
    (
        xi.fixed_rows::<3>(0).into_owned(),
        xi.fixed_rows::<3>(3).into_owned(),
    )
}

pub fn exp_se3(xi: &Twist) -> Pose {
    let (rho, phi) = split(xi);
    Pose {
        rot: exp_so3(&phi),
        trans: jac_so3(&phi) * rho,
    }
}

pub fn log_se3(t: &Pose) -> Result<Twist> {
    let phi = log_so3(&t.rot)?;
    let rho = jac_inv_so3(&phi)? * t.trans;
    Ok(Twist::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z))
}

/// 6x6 adjoint `[[C, -r^ C], [0, C]]`, satisfying `exp_se3(Ad(T) w) = T exp_se3(w) T^{-1}`.
pub fn adjoint(t: &Pose) -> Matrix6<f64> {
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&t.rot);
    m.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-hat_so3(&t.trans) * t.rot));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&t.rot);
    m
}

/// The off-diagonal block `Q(rho, phi)` of the SE(3) left Jacobian.
pub fn q_block(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let angle = phi.norm();
    let px = hat_so3(phi);
    let rx = hat_so3(rho);
    let (c1, c2, c3) = if angle < Q_SERIES_ANGLE {
        let a2 = angle * angle;
        let a4 = a2 * a2;
        let a6 = a4 * a2;
        (
            1.0 / 6.0 - a2 / 120.0 + a4 / 5040.0 - a6 / 362_880.0,
            -1.0 / 24.0 + a2 / 720.0 - a4 / 40_320.0 + a6 / 3_628_800.0,
            1.0 / 120.0 - a2 / 2520.0 + a4 / 120_960.0 - a6 / 9_979_200.0,
        )
    } else {
        let a2 = angle * angle;
        let a3 = a2 * angle;
        let a4 = a2 * a2;
        let a5 = a4 * angle;
        let (s, c) = angle.sin_cos();
        let c2 = (1.0 - 0.5 * a2 - c) / a4;
        (
            (angle - s) / a3,
            c2,
            -0.5 * (c2 - 3.0 * (angle - s - a3 / 6.0) / a5),
        )
    };
    let prp = px * rx * px;
    rx * -0.5 + (px * rx + rx * px - prp) * c1 + (px * px * rx + rx * px * px - prp * 3.0) * c2
        + (prp * px + px * prp) * c3
}

/// Left Jacobian of SE(3): `[[S, Q], [0, S]]`.
pub fn jac_se3(xi: &Twist) -> Matrix6<f64> {
    let (rho, phi) = split(xi);
    let s = jac_so3(&phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&s);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&q_block(&rho, &phi));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&s);
    m
}

/// Inverse left Jacobian of SE(3): `[[S^-1, -S^-1 Q S^-1], [0, S^-1]]`.
pub fn jac_inv_se3(xi: &Twist) -> Result<Matrix6<f64>> {
    let (rho, phi) = split(xi);
    let si = jac_inv_so3(&phi)?;
    let q = q_block(&rho, &phi);
    let mut m = Matrix6::zeros();
    m.fixed_view_mut::<3, 3>(0, 0).copy_from(&si);
    m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-si * q * si));
    m.fixed_view_mut::<3, 3>(3, 3).copy_from(&si);
    Ok(m)
}

/// Right Jacobian: `exp_se3(xi + w) = exp_se3(xi) * exp_se3(jac_se3_right(xi) * w)` to first order.
pub fn jac_se3_right(xi: &Twist) -> Matrix6<f64> {
    jac_se3(&(-xi))
}

/// Left first-order BCH: `log(exp_se3(a) exp_se3(b))` keeping terms linear in `a`.
pub fn bch_left_linear(a: &Twist, b: &Twist) -> Result<Twist> {
    Ok(b + jac_inv_se3(b)? * a)
}

/// Right first-order BCH: `log(exp_se3(a) exp_se3(b))` keeping terms linear in `b`.
pub fn bch_right_linear(a: &Twist, b: &Twist) -> Result<Twist> {
    Ok(a + jac_inv_se3(&(-a))? * b)
}

/// Coefficients `(-1)^n B_n / n!` of the inverse-Jacobian series (Bernoulli numbers `B_n`).
const JAC_INV_SERIES: [f64; 41] = [
    1.00000000000000000e+00,
    5.00000000000000000e-01,
    8.33333333333333287e-02,
    0.00000000000000000e+00,
    -1.38888888888888894e-03,
    0.00000000000000000e+00,
    3.30687830687830710e-05,
    0.00000000000000000e+00,
    -8.26719576719576754e-07,
    0.00000000000000000e+00,
    2.08767569878681002e-08,
    0.00000000000000000e+00,
    -5.28419013868749322e-10,
    0.00000000000000000e+00,
    1.33825365306846789e-11,
    0.00000000000000000e+00,
    -3.38968029632258272e-13,
    0.00000000000000000e+00,
    8.58606205627784517e-15,
    0.00000000000000000e+00,
    -2.17486869855806192e-16,
    0.00000000000000000e+00,
    5.50900282836022953e-18,
    0.00000000000000000e+00,
    -1.39544646858125223e-19,
    0.00000000000000000e+00,
    3.53470703962946728e-21,
    0.00000000000000000e+00,
    -8.95351742703754628e-23,
    0.00000000000000000e+00,
    2.26795245233768293e-24,
    0.00000000000000000e+00,
    -5.74479066887220246e-26,
    0.00000000000000000e+00,
    1.45517247561486496e-27,
    0.00000000000000000e+00,
    -3.68599494066531029e-29,
    0.00000000000000000e+00,
    9.33673425709504507e-31,
    0.00000000000000000e+00,
    -2.36502241570062995e-32,
];

/// Derivative of `jac_inv_se3(xi) * v` with respect to `xi`.
///
/// Evaluated from the Bernoulli series of the inverse Jacobian, truncated once the
/// remaining terms drop below double precision.
pub fn jac_inv_se3_derivative(xi: &Twist, v: &Twist) -> Matrix6<f64> {
    let (rho, phi) = split(xi);
    let (a, r) = (phi.norm(), rho.norm());
    let mut n_terms = 1;
    let mut pow = 1.0;
    for n in 1..JAC_INV_SERIES.len() {
        // |c_n| (|phi|^n + n |rho| |phi|^(n-1)) bounds the n-th term
        let bound = JAC_INV_SERIES[n].abs() * (pow * a + n as f64 * r * pow);
        pow *= a;
        if JAC_INV_SERIES[n] != 0.0 {
            n_terms = n;
            if bound < 1e-18 {
                break;
            }
        }
    }
    let cx = curly_se3(xi);
    let mut powers = Vec::with_capacity(n_terms);
    let mut w = Vec::with_capacity(n_terms);
    powers.push(Matrix6::identity());
    w.push(*v);
    for i in 1..n_terms {
        powers.push(powers[i - 1] * cx);
        w.push(cx * w[i - 1]);
    }
    // d/dxi [curly(xi)^n v] = -sum_{i+j=n-1} curly(xi)^i curly(curly(xi)^j v)
    let mut d = Matrix6::zeros();
    for j in 0..n_terms {
        let mut left = Matrix6::zeros();
        for i in 0..(n_terms - j) {
            let c = JAC_INV_SERIES[i + j + 1];
            if c != 0.0 {
                left += powers[i] * c;
            }
        }
        d -= left * curly_se3(&w[j]);
    }
    d
}
