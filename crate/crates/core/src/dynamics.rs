//! Nonlinear relative-motion models in the Hill frame.
//!
//! Both orbit cases share one time-domain form
//!
//! ```text
//! q̈1 =  2w q̇2 + (w² + 2k) q1 + wd q2 + u1 + a1(q)
//! q̈2 = -2w q̇1 - wd q1 + (w² - k) q2 + u2 + a2(q)
//! q̈3 = -k q3 + u3 + a3(q)
//! ```
//!
//! where `w` is the frame rate, `wd` its time derivative, `k = μ/r³`, and the
//! quadratic/cubic gravity corrections `a(q)` are scaled by `c2 = μ/r⁴` and
//! `c3 = μ/r⁵`. For the circular case the coefficients are constant; for the
//! eccentric case they are functions of the target true anomaly ν.
//!
//! Models evolve a scalar *phase* alongside the state: elapsed time for the
//! autonomous models and ν for the eccentric one.

use nalgebra::{Matrix3, Matrix6, SMatrix};
use serde::{Deserialize, Serialize};

use crate::ad::Scalar;
use crate::error::{Error, Result};

pub const MU_EARTH: f64 = 398_600.441_8;

/// Conversion from m/s² (config units) to km/s².
pub const KM_PER_M: f64 = 1e-3;

/// Slack on the ν-range check, rad.
const NU_TOL: f64 = 1e-9;

/// Default maximum time step when mapping t to ν, s.
pub const DEFAULT_ANOMALY_STEP: f64 = 1.0;

const MAX_ANOMALY_STEPS: usize = 10_000_000;

pub type Vec6 = [f64; 6];
pub type Vec3 = [f64; 3];

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelativeState {
    pub q: Vec3,
    pub qdot: Vec3,
}

impl RelativeState {
    pub fn from_array(x: &Vec6) -> Self {
        Self { q: [x[0], x[1], x[2]], qdot: [x[3], x[4], x[5]] }
    }

    pub fn to_array(&self) -> Vec6 {
        [self.q[0], self.q[1], self.q[2], self.qdot[0], self.qdot[1], self.qdot[2]]
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ControlInput {
    pub u: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "variant", rename_all = "snake_case", deny_unknown_fields)]
pub enum OrbitModel {
    Circular {
        radius: f64,
        mean_motion: f64,
    },
    Eccentric {
        a: f64,
        e: f64,
        mu: f64,
        nu_range: [f64; 2],
        nu0: f64,
    },
    /// Linear time-invariant model `ẋ = A x + [0; I] u`, used for oracles.
    Linear { a: [[f64; 6]; 6] },
}

/// Frame and gravity coefficients at a given phase.
#[derive(Clone, Copy, Debug)]
pub struct Coefficients<S> {
    pub w: S,
    pub wd: S,
    pub k: S,
    pub c2: S,
    pub c3: S,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AnomalyKinematics {
    pub r: f64,
    pub nu_dot: f64,
    pub nu_ddot: f64,
}

impl OrbitModel {
    pub fn standard_circular() -> Self {
        OrbitModel::Circular { radius: 6871.0, mean_motion: 1.109e-3 }
    }

    /// `case` 1 covers ν ∈ [60°, 120°], case 2 covers ν ∈ [120°, 180°].
    pub fn standard_eccentric(case: u8) -> Self {
        let (lo, hi) = if case == 1 { (60.0f64, 120.0f64) } else { (120.0, 180.0) };
        OrbitModel::Eccentric {
            a: 22_903.33,
            e: 0.7,
            mu: MU_EARTH,
            nu_range: [lo.to_radians(), hi.to_radians()],
            nu0: lo.to_radians(),
        }
    }

    pub fn double_integrator() -> Self {
        let mut a = [[0.0; 6]; 6];
        for i in 0..3 {
            a[i][i + 3] = 1.0;
        }
        OrbitModel::Linear { a }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            OrbitModel::Circular { radius, mean_motion } => {
                if !(radius.is_finite() && *radius > 0.0) {
                    return Err(Error::Config(format!("circular radius must be > 0, got {radius}")));
                }
                if !(mean_motion.is_finite() && *mean_motion > 0.0) {
                    return Err(Error::Config(format!(
                        "circular mean motion must be > 0, got {mean_motion}"
                    )));
                }
            }
            OrbitModel::Eccentric { a, e, mu, nu_range, nu0 } => {
                if !(e.is_finite() && *e >= 0.0 && *e < 1.0) {
                    return Err(Error::Config(format!("eccentricity must be in [0, 1), got {e}")));
                }
                if !(a.is_finite() && a * (1.0 - e) > 0.0) {
                    return Err(Error::Config(format!("periapse radius a(1-e) must be > 0, a = {a}")));
                }
                if !(mu.is_finite() && *mu > 0.0) {
                    return Err(Error::Config(format!("mu must be > 0, got {mu}")));
                }
                if !(nu_range[0].is_finite() && nu_range[1].is_finite() && nu_range[0] <= nu_range[1]) {
                    return Err(Error::Config(format!("nu_range must be nondecreasing, got {nu_range:?}")));
                }
                if *nu0 < nu_range[0] - NU_TOL || *nu0 > nu_range[1] + NU_TOL {
                    return Err(Error::Config(format!("nu0 = {nu0} outside nu_range {nu_range:?}")));
                }
            }
            OrbitModel::Linear { a } => {
                if a.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Config("linear model matrix has non-finite entries".into()));
                }
            }
        }
        Ok(())
    }

    pub fn is_eccentric(&self) -> bool {
        matches!(self, OrbitModel::Eccentric { .. })
    }

    /// Phase at mission start.
    pub fn initial_phase(&self) -> f64 {
        match self {
            OrbitModel::Eccentric { nu0, .. } => *nu0,
            _ => 0.0,
        }
    }

    /// Phase reached at elapsed time `t` from mission start.
    pub fn phase_at(&self, t: f64) -> Result<f64> {
        match self {
            OrbitModel::Eccentric { nu0, .. } => {
                propagate_anomaly(self, 0.0, *nu0, t, DEFAULT_ANOMALY_STEP)
            }
            _ => Ok(t),
        }
    }

    pub fn check_phase(&self, phase: f64) -> Result<()> {
        if let OrbitModel::Eccentric { nu_range, .. } = self {
            if !phase.is_finite() || phase < nu_range[0] - NU_TOL || phase > nu_range[1] + NU_TOL {
                return Err(Error::Domain { nu: phase, lo: nu_range[0], hi: nu_range[1] });
            }
        }
        Ok(())
    }

    /// Largest elapsed time keeping the phase inside its admissible range.
    pub fn max_elapsed(&self) -> f64 {
        match self {
            OrbitModel::Eccentric { nu_range, nu0, .. } => {
                time_of_flight(self, *nu0, nu_range[1])
            }
            _ => f64::INFINITY,
        }
    }

    pub fn phase_rate<S: Scalar>(&self, phase: S) -> S {
        match self {
            OrbitModel::Eccentric { a, e, mu, .. } => {
                let nm = (mu / (a * a * a)).sqrt();
                let one_p = phase.cos() * *e + 1.0;
                one_p * one_p * (nm / (1.0 - e * e).powf(1.5))
            }
            _ => S::cst(1.0),
        }
    }

    /// Advance the phase by `dt` with `steps` classical RK4 steps. Matches the
    /// phase component of the joint state/phase integration exactly.
    pub fn advance_phase<S: Scalar>(&self, phase0: S, dt: S, steps: usize) -> S {
        match self {
            OrbitModel::Eccentric { .. } => {
                if steps == 0 {
                    return phase0;
                }
                let h = dt / steps as f64;
                let mut nu = phase0;
                for _ in 0..steps {
                    let k1 = self.phase_rate(nu);
                    let k2 = self.phase_rate(nu + k1 * h * 0.5);
                    let k3 = self.phase_rate(nu + k2 * h * 0.5);
                    let k4 = self.phase_rate(nu + k3 * h);
                    nu += (k1 + (k2 + k3) * 2.0 + k4) * h / 6.0;
                }
                nu
            }
            _ => phase0 + dt,
        }
    }

    pub fn coefficients<S: Scalar>(&self, phase: S) -> Coefficients<S> {
        match self {
            OrbitModel::Circular { radius, mean_motion } => {
                let n2 = mean_motion * mean_motion;
                Coefficients {
                    w: S::cst(*mean_motion),
                    wd: S::zero(),
                    k: S::cst(n2),
                    c2: S::cst(n2 / radius),
                    c3: S::cst(n2 / (radius * radius)),
                }
            }
            OrbitModel::Eccentric { a, e, mu, .. } => {
                let nm = (mu / (a * a * a)).sqrt();
                let ome2 = 1.0 - e * e;
                let one_p = phase.cos() * *e + 1.0;
                let w = one_p * one_p * (nm / ome2.powf(1.5));
                let wd = phase.sin() * one_p * one_p * one_p * (-2.0 * nm * nm * e / (ome2 * ome2 * ome2));
                let inv_r = one_p / (a * ome2);
                let inv_r3 = inv_r * inv_r * inv_r;
                let k = inv_r3 * *mu;
                let c2 = k * inv_r;
                let c3 = c2 * inv_r;
                Coefficients { w, wd, k, c2, c3 }
            }
            OrbitModel::Linear { .. } => Coefficients {
                w: S::zero(),
                wd: S::zero(),
                k: S::zero(),
                c2: S::zero(),
                c3: S::zero(),
            },
        }
    }

    /// State derivative at the given phase. Generic so the same code serves
    /// plain evaluation and dual-number differentiation.
    pub fn field<S: Scalar>(&self, phase: S, x: &[S; 6], u: &[S; 3]) -> [S; 6] {
        if let OrbitModel::Linear { a } = self {
            let mut out = [S::zero(); 6];
            for i in 0..6 {
                let mut acc = S::zero();
                for j in 0..6 {
                    if a[i][j] != 0.0 {
                        acc += x[j] * a[i][j];
                    }
                }
                out[i] = acc;
            }
            for i in 0..3 {
                out[i + 3] += u[i];
            }
            return out;
        }
        let c = self.coefficients(phase);
        let (q1, q2, q3) = (x[0], x[1], x[2]);
        let (v1, v2) = (x[3], x[4]);
        let w2 = c.w * c.w;
        let g = corrections(&c, q1, q2, q3);
        let acc1 = c.w * v2 * 2.0 + (w2 + c.k * 2.0) * q1 + c.wd * q2 + g[0];
        let acc2 = -(c.w * v1 * 2.0) - c.wd * q1 + (w2 - c.k) * q2 + g[1];
        let acc3 = -(c.k * q3) + g[2];
        [x[3], x[4], x[5], acc1 + u[0], acc2 + u[1], acc3 + u[2]]
    }

    pub fn anomaly_kinematics(&self, nu: f64) -> Option<AnomalyKinematics> {
        match self {
            OrbitModel::Eccentric { a, e, .. } => {
                let c: Coefficients<f64> = self.coefficients(nu);
                Some(AnomalyKinematics {
                    r: a * (1.0 - e * e) / (1.0 + e * nu.cos()),
                    nu_dot: c.w,
                    nu_ddot: c.wd,
                })
            }
            _ => None,
        }
    }

    /// Closed-form state Jacobian at a phase.
    pub fn jacobian_at(&self, phase: f64, x: &Vec6) -> Matrix6<f64> {
        let j = self.jacobian_generic(phase, x);
        Matrix6::from_fn(|r, c| j[r][c])
    }

    /// State Jacobian of [`OrbitModel::field`], generic in the scalar type.
    pub fn jacobian_generic<S: Scalar>(&self, phase: S, x: &[S; 6]) -> [[S; 6]; 6] {
        let mut m = [[S::zero(); 6]; 6];
        if let OrbitModel::Linear { a } = self {
            for i in 0..6 {
                for j in 0..6 {
                    m[i][j] = S::cst(a[i][j]);
                }
            }
            return m;
        }
        let c = self.coefficients(phase);
        let (q1, q2, q3) = (x[0], x[1], x[2]);
        let w2 = c.w * c.w;
        for i in 0..3 {
            m[i][i + 3] = S::cst(1.0);
        }
        let (c2, c3) = (c.c2, c.c3);
        let q1q2 = q1 * q2;
        let q1q3 = q1 * q3;
        let (s1, s2, s3) = (q1 * q1, q2 * q2, q3 * q3);
        m[3][0] = w2 + c.k * 2.0 - c2 * q1 * 6.0 + c3 * (s1 * 12.0 - s2 * 6.0 - s3 * 6.0);
        m[3][1] = c.wd + c2 * q2 * 3.0 - c3 * q1q2 * 12.0;
        m[3][2] = c2 * q3 * 3.0 - c3 * q1q3 * 12.0;
        m[4][0] = -c.wd + c2 * q2 * 3.0 - c3 * q1q2 * 12.0;
        m[4][1] = w2 - c.k + c2 * q1 * 3.0 + c3 * (s2 * 4.5 + s3 * 1.5 - s1 * 6.0);
        m[4][2] = c3 * q2 * q3 * 3.0;
        m[5][0] = m[3][2];
        m[5][1] = m[4][2];
        m[5][2] = -c.k + c2 * q1 * 3.0 + c3 * (s2 * 1.5 + s3 * 4.5 - s1 * 6.0);
        m[3][4] = c.w * 2.0;
        m[4][3] = -(c.w * 2.0);
        m
    }

    /// Closed-form per-component Hessians at a phase. Only the position block
    /// of the acceleration components is populated.
    pub fn hessian_at(&self, phase: f64, x: &Vec6) -> HessianTensor {
        let mut comps = [Matrix6::zeros(); 6];
        if let OrbitModel::Linear { .. } = self {
            return HessianTensor { components: comps };
        }
        let c: Coefficients<f64> = self.coefficients(phase);
        let (q1, q2, q3) = (x[0], x[1], x[2]);
        let (c2, c3) = (c.c2, c.c3);
        let blocks = [
            Matrix3::new(
                -6.0 * c2 + 24.0 * c3 * q1,
                -12.0 * c3 * q2,
                -12.0 * c3 * q3,
                -12.0 * c3 * q2,
                3.0 * c2 - 12.0 * c3 * q1,
                0.0,
                -12.0 * c3 * q3,
                0.0,
                3.0 * c2 - 12.0 * c3 * q1,
            ),
            Matrix3::new(
                -12.0 * c3 * q2,
                3.0 * c2 - 12.0 * c3 * q1,
                0.0,
                3.0 * c2 - 12.0 * c3 * q1,
                9.0 * c3 * q2,
                3.0 * c3 * q3,
                0.0,
                3.0 * c3 * q3,
                3.0 * c3 * q2,
            ),
            Matrix3::new(
                -12.0 * c3 * q3,
                0.0,
                3.0 * c2 - 12.0 * c3 * q1,
                0.0,
                3.0 * c3 * q3,
                3.0 * c3 * q2,
                3.0 * c2 - 12.0 * c3 * q1,
                3.0 * c3 * q2,
                9.0 * c3 * q3,
            ),
        ];
        for (i, b) in blocks.iter().enumerate() {
            comps[i + 3].fixed_view_mut::<3, 3>(0, 0).copy_from(b);
        }
        HessianTensor { components: comps }
    }

    /// Curvature bound over the tube of radius `radius` around position
    /// `q_center`. The Hessian is affine in q and the operator norm is convex,
    /// so the maximum over the enclosing cube sits at one of its corners.
    pub fn curvature_bound(
        &self,
        phase: f64,
        q_center: &Vec3,
        radius: f64,
        convention: CurvatureConvention,
    ) -> f64 {
        let r = radius.max(0.0);
        let mut best: f64 = 0.0;
        for corner in 0..8u32 {
            let mut x = [0.0; 6];
            for i in 0..3 {
                let sign = if corner & (1 << i) == 0 { -1.0 } else { 1.0 };
                x[i] = q_center[i] + sign * r;
            }
            best = best.max(hessian_norms(&self.hessian_at(phase, &x)).oper);
            if r == 0.0 {
                break;
            }
        }
        best * convention.scale()
    }
}

fn corrections<S: Scalar>(c: &Coefficients<S>, q1: S, q2: S, q3: S) -> [S; 3] {
    let q11 = q1 * q1;
    let q22 = q2 * q2;
    let q33 = q3 * q3;
    let a1 = c.c2 * ((q22 + q33) * 1.5 - q11 * 3.0) + c.c3 * (q11 * q1 * 4.0 - q1 * (q22 + q33) * 6.0);
    let a2 = c.c2 * (q1 * q2 * 3.0) + c.c3 * ((q22 * q2 + q2 * q33) * 1.5 - q11 * q2 * 6.0);
    let a3 = c.c2 * (q1 * q3 * 3.0) + c.c3 * ((q22 * q3 + q33 * q3) * 1.5 - q11 * q3 * 6.0);
    [a1, a2, a3]
}

/// Second-order correction vector (−2q1²+q2²+q3², 2q1q2, 2q1q3).
pub fn g2(q: &Vec3) -> Vec3 {
    [-2.0 * q[0] * q[0] + q[1] * q[1] + q[2] * q[2], 2.0 * q[0] * q[1], 2.0 * q[0] * q[2]]
}

/// Third-order correction vector.
pub fn g3(q: &Vec3) -> Vec3 {
    let (q1, q2, q3) = (q[0], q[1], q[2]);
    [
        4.0 * q1.powi(3) - 6.0 * q1 * q2 * q2 - 6.0 * q1 * q3 * q3,
        -6.0 * q1 * q1 * q2 + 1.5 * (q2.powi(3) + q2 * q3 * q3),
        -6.0 * q1 * q1 * q3 + 1.5 * (q2 * q2 * q3 + q3.powi(3)),
    ]
}

fn check_finite(x: &RelativeState, u: Option<&ControlInput>) -> Result<()> {
    if !x.is_finite() {
        return Err(Error::InvalidInput(format!("non-finite state {:?}", x.to_array())));
    }
    if let Some(u) = u {
        if u.u.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput(format!("non-finite control {:?}", u.u)));
        }
    }
    Ok(())
}

fn phase_checked(model: &OrbitModel, t: f64) -> Result<f64> {
    let phase = model.phase_at(t)?;
    model.check_phase(phase)?;
    Ok(phase)
}

/// State derivative at elapsed time `t`.
pub fn eval_dynamics(model: &OrbitModel, t: f64, x: &RelativeState, u: &ControlInput) -> Result<Vec6> {
    check_finite(x, Some(u))?;
    let phase = phase_checked(model, t)?;
    Ok(model.field(phase, &x.to_array(), &u.u))
}

pub fn jacobian_state(
    model: &OrbitModel,
    t: f64,
    x: &RelativeState,
    u: &ControlInput,
) -> Result<Matrix6<f64>> {
    check_finite(x, Some(u))?;
    let phase = phase_checked(model, t)?;
    Ok(model.jacobian_at(phase, &x.to_array()))
}

/// Control Jacobian `[0; I]`, identical for every model.
pub fn jacobian_control() -> SMatrix<f64, 6, 3> {
    let mut b = SMatrix::<f64, 6, 3>::zeros();
    for i in 0..3 {
        b[(i + 3, i)] = 1.0;
    }
    b
}

pub fn hessian_state(model: &OrbitModel, t: f64, x: &RelativeState) -> Result<HessianTensor> {
    check_finite(x, None)?;
    let phase = phase_checked(model, t)?;
    Ok(model.hessian_at(phase, &x.to_array()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct HessianTensor {
    pub components: [Matrix6<f64>; 6],
}

impl HessianTensor {
    pub fn zeros() -> Self {
        Self { components: [Matrix6::zeros(); 6] }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HessianNorms {
    pub oper: f64,
    pub frob: f64,
    pub spec: f64,
}

/// `oper`: largest per-component operator norm; `frob`: Frobenius norm of the
/// stacked tensor; `spec`: largest per-component spectral radius.
pub fn hessian_norms(h: &HessianTensor) -> HessianNorms {
    let mut out = HessianNorms::default();
    let mut frob2 = 0.0;
    for m in &h.components {
        if m.iter().all(|v| *v == 0.0) {
            continue;
        }
        let sv = m.singular_values();
        out.oper = out.oper.max(sv.max());
        frob2 += m.norm_squared();
        let sym = (m + m.transpose()) * 0.5;
        let ev = sym.symmetric_eigenvalues();
        out.spec = out.spec.max(ev.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    out.frob = frob2.sqrt();
    out
}

/// How the per-component Hessian norms are turned into the scalar H.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurvatureConvention {
    /// √6 · max component operator norm; bounds the stacked bilinear map.
    #[default]
    Rigorous,
    PerComponent,
}

impl CurvatureConvention {
    pub fn scale(self) -> f64 {
        match self {
            CurvatureConvention::Rigorous => 6f64.sqrt(),
            CurvatureConvention::PerComponent => 1.0,
        }
    }
}

/// Maps t to ν by integrating ν̇(ν) from `(t0, nu0)` with RK4 steps no longer
/// than `max_step`.
pub fn propagate_anomaly(model: &OrbitModel, t0: f64, nu0: f64, t: f64, max_step: f64) -> Result<f64> {
    if !(t.is_finite() && t0.is_finite()) || t < t0 {
        return Err(Error::InvalidInput(format!("propagate_anomaly needs t >= t0, got t0 = {t0}, t = {t}")));
    }
    if !(max_step > 0.0) {
        return Err(Error::Config(format!("anomaly step must be > 0, got {max_step}")));
    }
    let span = t - t0;
    if span == 0.0 {
        return Ok(nu0);
    }
    let steps = (span / max_step).ceil();
    if steps > MAX_ANOMALY_STEPS as f64 {
        return Err(Error::Config(format!(
            "anomaly propagation over {span} s needs {steps} steps (cap {MAX_ANOMALY_STEPS})"
        )));
    }
    Ok(model.advance_phase(nu0, span, (steps as usize).max(1)))
}

/// Kepler time of flight from `nu_a` to `nu_b` (both within one revolution).
pub fn time_of_flight(model: &OrbitModel, nu_a: f64, nu_b: f64) -> f64 {
    match model {
        OrbitModel::Eccentric { a, e, mu, .. } => {
            let nm = (mu / (a * a * a)).sqrt();
            let mean = |nu: f64| {
                let ecc = ((1.0 - e * e).sqrt() * nu.sin()).atan2(e + nu.cos());
                // keep the branch continuous with nu
                let turns = ((nu - ecc) / (2.0 * std::f64::consts::PI)).round();
                let ecc = ecc + turns * 2.0 * std::f64::consts::PI;
                ecc - e * ecc.sin()
            };
            (mean(nu_b) - mean(nu_a)) / nm
        }
        _ => nu_b - nu_a,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub e: f64,
    pub max_oper: f64,
    pub min_oper: f64,
    pub nu_at_max: f64,
    pub nu_at_min: f64,
}

/// For each eccentricity (periapse radius held at `periapse_km`), the largest
/// and smallest over the ν grid of the box-maximal Hessian operator norm on the
/// planar square `|q1|, |q2| ≤ box_km`.
pub fn curvature_sweep(
    periapse_km: f64,
    mu: f64,
    e_values: &[f64],
    nu_grid: &[f64],
    box_km: f64,
) -> Vec<SweepRow> {
    let mut rows = Vec::with_capacity(e_values.len());
    for &e in e_values {
        let model = OrbitModel::Eccentric {
            a: periapse_km / (1.0 - e),
            e,
            mu,
            nu_range: [f64::NEG_INFINITY, f64::INFINITY],
            nu0: 0.0,
        };
        let mut row = SweepRow {
            e,
            max_oper: f64::NEG_INFINITY,
            min_oper: f64::INFINITY,
            nu_at_max: f64::NAN,
            nu_at_min: f64::NAN,
        };
        for &nu in nu_grid {
            let mut box_max: f64 = 0.0;
            for (s1, s2) in [(-1.0, -1.0), (-1.0, 1.0), (1.0, -1.0), (1.0, 1.0)] {
                let x = [s1 * box_km, s2 * box_km, 0.0, 0.0, 0.0, 0.0];
                box_max = box_max.max(hessian_norms(&model.hessian_at(nu, &x)).oper);
            }
            if box_max > row.max_oper {
                row.max_oper = box_max;
                row.nu_at_max = nu;
            }
            if box_max < row.min_oper {
                row.min_oper = box_max;
                row.nu_at_min = nu;
            }
        }
        rows.push(row);
    }
    rows
}
