//! Fixed-step RK4 flow maps and variational equations.

use nalgebra::{Matrix6, SMatrix, Vector6};
use serde::{Deserialize, Serialize};

use crate::ad::Scalar;
use crate::dynamics::{jacobian_control, OrbitModel, Vec3, Vec6};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub steps_per_segment: usize,
    #[serde(default)]
    pub scheme: Scheme,
    /// When set, a span of length `dt` uses `ceil(dt / max_step)` steps
    /// instead of `steps_per_segment`.
    #[serde(default)]
    pub max_step: Option<f64>,
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self { steps_per_segment: 100, scheme: Scheme::Rk4, max_step: None }
    }
}

impl IntegratorConfig {
    pub fn with_steps(steps_per_segment: usize) -> Self {
        Self { steps_per_segment, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_segment == 0 {
            return Err(Error::Config("steps_per_segment must be >= 1".into()));
        }
        if let Some(h) = self.max_step {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::Config(format!("max_step must be > 0, got {h}")));
            }
        }
        Ok(())
    }

    pub fn steps_for(&self, dt: f64) -> usize {
        match self.max_step {
            Some(h) => ((dt.abs() / h).ceil() as usize).max(1),
            None => self.steps_per_segment,
        }
    }
}

pub type Mat63 = SMatrix<f64, 6, 3>;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowResult {
    pub x_end: Vec6,
    pub phase_end: f64,
    /// ∂x_end/∂x0.
    pub stm: Option<Matrix6<f64>>,
    /// ∂x_end/∂u for the constant control.
    pub input_map: Option<Mat63>,
    pub samples: Option<Vec<(f64, Vec6)>>,
}

fn axpy<S: Scalar>(x: &[S; 6], k: &[S; 6], h: S) -> [S; 6] {
    let mut out = *x;
    for i in 0..6 {
        out[i] += k[i] * h;
    }
    out
}

/// One RK4 segment of `steps` equal steps, integrating the phase jointly.
/// Generic in the scalar so it can be differentiated with dual numbers.
pub fn rk4_segment<S: Scalar>(
    model: &OrbitModel,
    phase0: S,
    x0: &[S; 6],
    u: &[S; 3],
    dt: S,
    steps: usize,
) -> Result<([S; 6], S)> {
    let steps = steps.max(1);
    let h = dt / steps as f64;
    let half = h * 0.5;
    let mut x = *x0;
    let mut p = phase0;
    let ecc = model.is_eccentric();
    for step in 0..steps {
        let (p2, p3, p4, pn);
        if ecc {
            let r1 = model.phase_rate(p);
            p2 = p + r1 * half;
            let r2 = model.phase_rate(p2);
            p3 = p + r2 * half;
            let r3 = model.phase_rate(p3);
            p4 = p + r3 * h;
            let r4 = model.phase_rate(p4);
            pn = p + (r1 + (r2 + r3) * 2.0 + r4) * h / 6.0;
        } else {
            p2 = p + half;
            p3 = p2;
            p4 = p + h;
            pn = p4;
        }
        let k1 = model.field(p, &x, u);
        let k2 = model.field(p2, &axpy(&x, &k1, half), u);
        let k3 = model.field(p3, &axpy(&x, &k2, half), u);
        let k4 = model.field(p4, &axpy(&x, &k3, h), u);
        for i in 0..6 {
            x[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * h / 6.0;
        }
        p = pn;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, t: h.value() * (step + 1) as f64 });
        }
    }
    Ok((x, p))
}

/// Step-map sensitivities of [`rk4_segment`]: the exact derivative of the
/// discrete RK4 map with respect to the initial state (`phi`) and the
/// control (`gamma`), generic so they can themselves be differentiated.
#[derive(Clone, Copy, Debug)]
pub struct Rk4Sensitivity<S> {
    pub x: [S; 6],
    pub phase: S,
    pub phi: [[S; 6]; 6],
    pub gamma: [[S; 3]; 6],
}

pub fn rk4_segment_sensitivity<S: Scalar>(
    model: &OrbitModel,
    phase0: S,
    x0: &[S; 6],
    u: &[S; 3],
    dt: S,
    steps: usize,
) -> Result<Rk4Sensitivity<S>> {
    // columns 0..6: d/dx0, 6..9: d/du
    type Sens<S> = [[S; 9]; 6];
    fn stage<S: Scalar>(model: &OrbitModel, p: S, y: &[S; 6], dy: &Sens<S>, u: &[S; 3]) -> ([S; 6], Sens<S>) {
        let f = model.field(p, y, u);
        let a = model.jacobian_generic(p, y);
        let mut dk = [[S::zero(); 9]; 6];
        for i in 0..6 {
            for c in 0..9 {
                let mut acc = S::zero();
                for j in 0..6 {
                    acc += a[i][j] * dy[j][c];
                }
                dk[i][c] = acc;
            }
        }
        for i in 0..3 {
            dk[i + 3][6 + i] += S::cst(1.0);
        }
        (f, dk)
    }
    fn shift<S: Scalar>(x: &[S; 6], dx: &Sens<S>, k: &[S; 6], dk: &Sens<S>, h: S) -> ([S; 6], Sens<S>) {
        let mut y = *x;
        let mut dy = *dx;
        for i in 0..6 {
            y[i] += k[i] * h;
            for c in 0..9 {
                dy[i][c] += dk[i][c] * h;
            }
        }
        (y, dy)
    }

    let steps = steps.max(1);
    let h = dt / steps as f64;
    let half = h * 0.5;
    let mut x = *x0;
    let mut p = phase0;
    let mut d: Sens<S> = [[S::zero(); 9]; 6];
    for i in 0..6 {
        d[i][i] = S::cst(1.0);
    }
    let ecc = model.is_eccentric();
    for step in 0..steps {
        let (p2, p3, p4, pn);
        if ecc {
            let r1 = model.phase_rate(p);
            p2 = p + r1 * half;
            let r2 = model.phase_rate(p2);
            p3 = p + r2 * half;
            let r3 = model.phase_rate(p3);
            p4 = p + r3 * h;
            let r4 = model.phase_rate(p4);
            pn = p + (r1 + (r2 + r3) * 2.0 + r4) * h / 6.0;
        } else {
            p2 = p + half;
            p3 = p2;
            p4 = p + h;
            pn = p4;
        }
        let (k1, d1) = stage(model, p, &x, &d, u);
        let (y2, e2) = shift(&x, &d, &k1, &d1, half);
        let (k2, d2) = stage(model, p2, &y2, &e2, u);
        let (y3, e3) = shift(&x, &d, &k2, &d2, half);
        let (k3, d3) = stage(model, p3, &y3, &e3, u);
        let (y4, e4) = shift(&x, &d, &k3, &d3, h);
        let (k4, d4) = stage(model, p4, &y4, &e4, u);
        for i in 0..6 {
            x[i] += (k1[i] + (k2[i] + k3[i]) * 2.0 + k4[i]) * h / 6.0;
            for c in 0..9 {
                d[i][c] += (d1[i][c] + (d2[i][c] + d3[i][c]) * 2.0 + d4[i][c]) * h / 6.0;
            }
        }
        p = pn;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, t: h.value() * (step + 1) as f64 });
        }
    }
    let mut phi = [[S::zero(); 6]; 6];
    let mut gamma = [[S::zero(); 3]; 6];
    for i in 0..6 {
        phi[i].copy_from_slice(&d[i][..6]);
        gamma[i].copy_from_slice(&d[i][6..]);
    }
    Ok(Rk4Sensitivity { x, phase: p, phi, gamma })
}

fn check_span(t0: f64, t1: f64) -> Result<()> {
    if !(t0.is_finite() && t1.is_finite()) || t1 < t0 {
        return Err(Error::InvalidInput(format!("flow needs t1 >= t0, got [{t0}, {t1}]")));
    }
    Ok(())
}

fn check_vec(x: &[f64]) -> Result<()> {
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite input {x:?}")));
    }
    Ok(())
}

/// Flow over `[t0, t1]` under constant control, starting at a known phase.
pub fn flow_from_phase(
    model: &OrbitModel,
    phase0: f64,
    x0: &Vec6,
    u: &Vec3,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<FlowResult> {
    check_vec(x0)?;
    check_vec(u)?;
    model.check_phase(phase0)?;
    let (x_end, phase_end) = if dt == 0.0 {
        (*x0, phase0)
    } else {
        rk4_segment(model, phase0, x0, u, dt, cfg.steps_for(dt))?
    };
    model.check_phase(phase_end)?;
    Ok(FlowResult { x_end, phase_end, stm: None, input_map: None, samples: None })
}

pub fn flow(
    model: &OrbitModel,
    x0: &Vec6,
    u: &Vec3,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<FlowResult> {
    check_span(t0, t1)?;
    let phase0 = model.phase_at(t0)?;
    flow_from_phase(model, phase0, x0, u, t1 - t0, cfg)
}

/// Flow together with the state-transition matrix Φ and the control
/// sensitivity Γ, from `Φ̇ = AΦ`, `Γ̇ = AΓ + B`, `Φ(0) = I`, `Γ(0) = 0`.
pub fn flow_with_stm_from_phase(
    model: &OrbitModel,
    phase0: f64,
    x0: &Vec6,
    u: &Vec3,
    dt: f64,
    cfg: &IntegratorConfig,
) -> Result<FlowResult> {
    check_vec(x0)?;
    check_vec(u)?;
    model.check_phase(phase0)?;
    let b = jacobian_control();
    let mut x = *x0;
    let mut phi = Matrix6::<f64>::identity();
    let mut gam = Mat63::zeros();
    let mut p = phase0;
    if dt != 0.0 {
        let steps = cfg.steps_for(dt);
        let h = dt / steps as f64;
        let half = 0.5 * h;
        let ecc = model.is_eccentric();
        let rhs = |p: f64, x: &Vec6, phi: &Matrix6<f64>, gam: &Mat63| {
            let a = model.jacobian_at(p, x);
            (model.field(p, x, u), a * phi, a * gam + b)
        };
        for step in 0..steps {
            let (p2, p3, p4, pn);
            if ecc {
                let r1 = model.phase_rate(p);
                p2 = p + r1 * half;
                let r2 = model.phase_rate(p2);
                p3 = p + r2 * half;
                let r3 = model.phase_rate(p3);
                p4 = p + r3 * h;
                let r4 = model.phase_rate(p4);
                pn = p + (r1 + (r2 + r3) * 2.0 + r4) * h / 6.0;
            } else {
                p2 = p + half;
                p3 = p2;
                p4 = p + h;
                pn = p4;
            }
            let (k1, f1, g1) = rhs(p, &x, &phi, &gam);
            let (k2, f2, g2) = rhs(p2, &axpy(&x, &k1, half), &(phi + f1 * half), &(gam + g1 * half));
            let (k3, f3, g3) = rhs(p3, &axpy(&x, &k2, half), &(phi + f2 * half), &(gam + g2 * half));
            let (k4, f4, g4) = rhs(p4, &axpy(&x, &k3, h), &(phi + f3 * h), &(gam + g3 * h));
            for i in 0..6 {
                x[i] += (k1[i] + 2.0 * (k2[i] + k3[i]) + k4[i]) * h / 6.0;
            }
            phi += (f1 + (f2 + f3) * 2.0 + f4) * (h / 6.0);
            gam += (g1 + (g2 + g3) * 2.0 + g4) * (h / 6.0);
            p = pn;
            if x.iter().any(|v| !v.is_finite()) || phi.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step, t: h * (step + 1) as f64 });
            }
        }
    }
    model.check_phase(p)?;
    Ok(FlowResult { x_end: x, phase_end: p, stm: Some(phi), input_map: Some(gam), samples: None })
}

pub fn flow_with_stm(
    model: &OrbitModel,
    x0: &Vec6,
    u: &Vec3,
    t0: f64,
    t1: f64,
    cfg: &IntegratorConfig,
) -> Result<FlowResult> {
    check_span(t0, t1)?;
    let phase0 = model.phase_at(t0)?;
    flow_with_stm_from_phase(model, phase0, x0, u, t1 - t0, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampledTrajectory {
    /// Segment-boundary states, starting with `(t0, x0)`.
    pub boundaries: Vec<(f64, Vec6)>,
    /// Boundary states plus `dense` interior samples per segment.
    pub samples: Vec<(f64, Vec6)>,
}

/// Chains [`flow`] over a piecewise-constant schedule of `(duration, u)`.
pub fn propagate_trajectory(
    model: &OrbitModel,
    x0: &Vec6,
    t0: f64,
    schedule: &[(f64, Vec3)],
    cfg: &IntegratorConfig,
    dense: usize,
) -> Result<SampledTrajectory> {
    let mut t = t0;
    let mut x = *x0;
    let mut phase = model.phase_at(t0)?;
    let mut boundaries = vec![(t, x)];
    let mut samples = vec![(t, x)];
    for (dur, u) in schedule {
        if !(*dur >= 0.0) {
            return Err(Error::InvalidInput(format!("negative segment duration {dur}")));
        }
        let steps = cfg.steps_for(*dur);
        if dense > 0 {
            // interior samples replay a prefix of the same step sequence
            for s in 1..=dense {
                let k = (steps * s) / (dense + 1);
                if k == 0 {
                    continue;
                }
                let dt = *dur * k as f64 / steps as f64;
                let (xs, _) = rk4_segment(model, phase, &x, u, dt, k)?;
                samples.push((t + dt, xs));
            }
        }
        let r = flow_from_phase(model, phase, &x, u, *dur, cfg)?;
        x = r.x_end;
        phase = r.phase_end;
        t += dur;
        boundaries.push((t, x));
        samples.push((t, x));
    }
    Ok(SampledTrajectory { boundaries, samples })
}

/// Multiple-shooting trajectory: node states at uniform segment boundaries
/// and one constant control per segment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseTrajectory {
    pub t0: f64,
    pub t_final: f64,
    pub nodes: Vec<Vec6>,
    pub controls: Vec<Vec3>,
    pub steps_per_segment: usize,
}

impl PiecewiseTrajectory {
    /// Forward simulation of `controls` over `[t0, t_final]` in equal segments.
    pub fn simulate(
        model: &OrbitModel,
        x0: &Vec6,
        t0: f64,
        t_final: f64,
        controls: &[Vec3],
        steps_per_segment: usize,
    ) -> Result<Self> {
        if controls.is_empty() {
            return Err(Error::InvalidInput("trajectory needs at least one segment".into()));
        }
        let h = (t_final - t0) / controls.len() as f64;
        let mut phase = model.phase_at(t0)?;
        let mut nodes = vec![*x0];
        let cfg = IntegratorConfig::with_steps(steps_per_segment);
        for u in controls {
            let r = flow_from_phase(model, phase, nodes.last().unwrap(), u, h, &cfg)?;
            phase = r.phase_end;
            nodes.push(r.x_end);
        }
        Ok(Self { t0, t_final, nodes, controls: controls.to_vec(), steps_per_segment })
    }

    pub fn segments(&self) -> usize {
        self.controls.len()
    }

    pub fn segment_duration(&self) -> f64 {
        (self.t_final - self.t0) / self.segments() as f64
    }

    pub fn covers(&self, t: f64) -> bool {
        let tol = 1e-9 * (self.t_final - self.t0).abs().max(1.0);
        t >= self.t0 - tol && t <= self.t_final + tol
    }

    /// Index of the segment containing `t` (right-continuous, clamped).
    pub fn segment_index(&self, t: f64) -> usize {
        let h = self.segment_duration();
        let k = ((t - self.t0) / h).floor();
        (k.max(0.0) as usize).min(self.segments() - 1)
    }

    pub fn control_at(&self, t: f64) -> Vec3 {
        self.controls[self.segment_index(t)]
    }

    /// Phase at the start of segment `k`, replaying the integrator's phase chain.
    pub fn node_phase(&self, model: &OrbitModel, k: usize) -> Result<f64> {
        let p0 = model.phase_at(self.t0)?;
        let h = self.segment_duration();
        Ok(model.advance_phase(p0, h * k as f64, self.steps_per_segment * k))
    }

    /// Phase and state at `t`, integrated from the preceding node with the
    /// trajectory's step density.
    pub fn state_and_phase_at(&self, model: &OrbitModel, t: f64) -> Result<(Vec6, f64)> {
        if !self.covers(t) {
            return Err(Error::Domain { nu: t, lo: self.t0, hi: self.t_final });
        }
        let h = self.segment_duration();
        let k = self.segment_index(t);
        let tk = self.t0 + h * k as f64;
        let p = self.node_phase(model, k)?;
        let dt = (t - tk).max(0.0);
        if dt == 0.0 {
            return Ok((self.nodes[k], p));
        }
        let steps = ((self.steps_per_segment as f64 * dt / h).ceil() as usize).max(1);
        let (x, pe) = rk4_segment(model, p, &self.nodes[k], &self.controls[k], dt, steps)?;
        Ok((x, pe))
    }

    pub fn state_at(&self, model: &OrbitModel, t: f64) -> Result<Vec6> {
        Ok(self.state_and_phase_at(model, t)?.0)
    }

    /// Largest continuity defect between consecutive nodes.
    pub fn max_defect(&self, model: &OrbitModel) -> Result<f64> {
        let h = self.segment_duration();
        let cfg = IntegratorConfig::with_steps(self.steps_per_segment);
        let mut worst: f64 = 0.0;
        for k in 0..self.segments() {
            let p = self.node_phase(model, k)?;
            let r = flow_from_phase(model, p, &self.nodes[k], &self.controls[k], h, &cfg)?;
            for i in 0..6 {
                worst = worst.max((r.x_end[i] - self.nodes[k + 1][i]).abs());
            }
        }
        Ok(worst)
    }
}

pub fn to_vector(x: &Vec6) -> Vector6<f64> {
    Vector6::from_column_slice(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::OrbitModel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const SQ: f64 = std::f64::consts::FRAC_1_SQRT_2;

    fn nominal_x0() -> Vec6 {
        [SQ, 0.0, SQ, 0.0, 0.0, 0.0]
    }

    fn rel(a: &[f64], b: &[f64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
        num / den
    }

    fn cwh_matrix(n: f64) -> Matrix6<f64> {
        let mut m = Matrix6::zeros();
        for i in 0..3 {
            m[(i, i + 3)] = 1.0;
        }
        m[(3, 0)] = 3.0 * n * n;
        m[(5, 2)] = -n * n;
        m[(3, 4)] = 2.0 * n;
        m[(4, 3)] = -2.0 * n;
        m
    }

    /// Scaling-and-squaring Taylor exponential, independent of nalgebra's.
    fn expm(a: &Matrix6<f64>) -> Matrix6<f64> {
        let s = 10;
        let b = a / 2f64.powi(s);
        let mut term = Matrix6::identity();
        let mut sum = Matrix6::identity();
        for k in 1..20 {
            term = term * b / k as f64;
            sum += term;
        }
        for _ in 0..s {
            sum = sum * sum;
        }
        sum
    }

    #[test]
    fn step_sensitivity_matches_dual_jacobian() {
        use crate::ad::jacobian_local;
        let m = OrbitModel::standard_eccentric(1);
        let x0 = [0.7, -0.2, 0.5, 1e-4, -3e-4, 2e-4];
        let u = [3e-7, -1e-6, 5e-7];
        let p0 = m.initial_phase();
        let sens = rk4_segment_sensitivity(&m, p0, &x0, &u, 400.0, 40).unwrap();
        let (xe, pe) = rk4_segment(&m, p0, &x0, &u, 400.0, 40).unwrap();
        assert_eq!(sens.x, xe);
        assert_eq!(sens.phase, pe);
        let z: Vec<f64> = x0.iter().chain(u.iter()).copied().collect();
        let (_, jac) = jacobian_local(&z, |v| -> Result<Vec<_>> {
            let x = [v[0], v[1], v[2], v[3], v[4], v[5]];
            let uu = [v[6], v[7], v[8]];
            let pc = crate::ad::Dual::constant(p0);
            let dt = crate::ad::Dual::constant(400.0);
            Ok(rk4_segment(&m, pc, &x, &uu, dt, 40)?.0.to_vec())
        })
        .unwrap();
        for i in 0..6 {
            for j in 0..6 {
                assert!((sens.phi[i][j] - jac[i][j]).abs() <= 1e-12 * (1.0 + jac[i][j].abs()));
            }
            for j in 0..3 {
                assert!((sens.gamma[i][j] - jac[i][6 + j]).abs() <= 1e-12 * (1.0 + jac[i][6 + j].abs()));
            }
        }
    }

    #[test]
    fn zero_span_is_identity() {
        let m = OrbitModel::standard_circular();
        let cfg = IntegratorConfig::default();
        let x0 = nominal_x0();
        let r = flow_with_stm(&m, &x0, &[1e-7, 0.0, 0.0], 5.0, 5.0, &cfg).unwrap();
        assert_eq!(r.x_end, x0);
        assert_eq!(r.stm.unwrap(), Matrix6::identity());
        assert_eq!(flow(&m, &x0, &[0.0; 3], 3.0, 3.0, &cfg).unwrap().x_end, x0);
    }

    #[test]
    fn linear_regime_matches_matrix_exponential() {
        let m = OrbitModel::standard_circular();
        let cfg = IntegratorConfig::with_steps(100);
        let x0 = [4e-7, -3e-7, 2e-7, 1e-10, -2e-10, 3e-10];
        let t = 600.0;
        let r = flow(&m, &x0, &[0.0; 3], 0.0, t, &cfg).unwrap();
        let lin = expm(&(cwh_matrix(1.109e-3) * t)) * to_vector(&x0);
        assert!(rel(&r.x_end, lin.as_slice()) <= 1e-9, "{}", rel(&r.x_end, lin.as_slice()));
    }

    fn observed_order(m: &OrbitModel, phase0: f64, x0: &Vec6, u: &Vec3, t: f64, n: usize) -> f64 {
        let run = |k: usize| rk4_segment(m, phase0, x0, u, t, k).unwrap().0;
        let (a, b, c) = (run(n), run(2 * n), run(4 * n));
        let d1: f64 = a.iter().zip(&b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        let d2: f64 = b.iter().zip(&c).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        (d1 / d2).log2()
    }

    #[test]
    fn rk4_convergence_order_circular() {
        let m = OrbitModel::standard_circular();
        let period = 2.0 * std::f64::consts::PI / 1.109e-3;
        let p = observed_order(&m, 0.0, &[1.0, 2.0, -0.5, 1e-3, -2e-3, 5e-4], &[1e-6, 0.0, -1e-6], period, 40);
        assert!(p >= 3.8, "order {p}");
    }

    #[test]
    fn rk4_convergence_order_eccentric() {
        let m = OrbitModel::standard_eccentric(1);
        let span = 0.99 * m.max_elapsed();
        let p = observed_order(&m, m.initial_phase(), &[1.0, 2.0, -0.5, 1e-3, -2e-3, 5e-4], &[1e-6, 0.0, -1e-6], span, 20);
        assert!(p >= 3.8, "order {p}");
    }

    #[test]
    fn stm_semigroup() {
        for m in [OrbitModel::standard_circular(), OrbitModel::standard_eccentric(2)] {
            let cfg = IntegratorConfig::with_steps(50);
            let x0 = [1.0, -0.5, 0.3, 1e-4, 2e-4, -1e-4];
            let u = [2e-7, -1e-7, 0.0];
            let a = flow_with_stm(&m, &x0, &u, 0.0, 700.0, &cfg).unwrap();
            let b = flow_with_stm_from_phase(&m, a.phase_end, &a.x_end, &u, 700.0, &cfg).unwrap();
            let full = flow_with_stm(&m, &x0, &u, 0.0, 1400.0, &IntegratorConfig::with_steps(100)).unwrap();
            let comp = b.stm.unwrap() * a.stm.unwrap();
            let f = full.stm.unwrap();
            assert!((comp - f).norm() <= 1e-8 * f.norm());
        }
    }

    #[test]
    fn stm_and_input_map_match_fd() {
        for m in [OrbitModel::standard_circular(), OrbitModel::standard_eccentric(1)] {
            let cfg = IntegratorConfig::with_steps(100);
            let x0 = [0.7, 0.2, 0.7, 1e-4, -1e-4, 2e-4];
            let u = [3e-7, -2e-7, 1e-7];
            let p0 = m.initial_phase();
            let r = flow_with_stm_from_phase(&m, p0, &x0, &u, 900.0, &cfg).unwrap();
            let stm = r.stm.unwrap();
            for j in 0..6 {
                let h = 1e-7 * x0[j].abs().max(1e-3);
                let mut xp = x0;
                let mut xm = x0;
                xp[j] += h;
                xm[j] -= h;
                let fp = flow_from_phase(&m, p0, &xp, &u, 900.0, &cfg).unwrap().x_end;
                let fm = flow_from_phase(&m, p0, &xm, &u, 900.0, &cfg).unwrap().x_end;
                let col: Vec<f64> = (0..6).map(|i| (fp[i] - fm[i]) / (2.0 * h)).collect();
                let exact: Vec<f64> = (0..6).map(|i| stm[(i, j)]).collect();
                assert!(rel(&col, &exact) <= 1e-5, "col {j}: {}", rel(&col, &exact));
            }
            let g = r.input_map.unwrap();
            for j in 0..3 {
                let h = 1e-9;
                let mut up = u;
                let mut um = u;
                up[j] += h;
                um[j] -= h;
                let fp = flow_from_phase(&m, p0, &x0, &up, 900.0, &cfg).unwrap().x_end;
                let fm = flow_from_phase(&m, p0, &x0, &um, 900.0, &cfg).unwrap().x_end;
                let col: Vec<f64> = (0..6).map(|i| (fp[i] - fm[i]) / (2.0 * h)).collect();
                let exact: Vec<f64> = (0..6).map(|i| g[(i, j)]).collect();
                assert!(rel(&col, &exact) <= 1e-5, "input col {j}");
            }
        }
    }

    #[test]
    fn flow_is_bitwise_deterministic() {
        let m = OrbitModel::standard_eccentric(1);
        let cfg = IntegratorConfig::default();
        let x0 = nominal_x0();
        let a = flow_with_stm(&m, &x0, &[1e-6, 0.0, 0.0], 10.0, 800.0, &cfg).unwrap();
        let b = flow_with_stm(&m, &x0, &[1e-6, 0.0, 0.0], 10.0, 800.0, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn divergence_reports_step() {
        let mut a = [[0.0; 6]; 6];
        a[0][0] = 10.0;
        let m = OrbitModel::Linear { a };
        let r = flow(&m, &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0], &[0.0; 3], 0.0, 1e7, &IntegratorConfig::with_steps(100));
        assert!(matches!(r, Err(Error::Divergence { .. })));
    }

    #[test]
    fn empty_schedule_gives_single_sample() {
        let m = OrbitModel::standard_circular();
        let tr = propagate_trajectory(&m, &nominal_x0(), 0.0, &[], &IntegratorConfig::default(), 3).unwrap();
        assert_eq!(tr.samples, vec![(0.0, nominal_x0())]);
        assert_eq!(tr.boundaries.len(), 1);
    }

    #[test]
    fn split_segments_compose() {
        let m = OrbitModel::standard_circular();
        let cfg = IntegratorConfig { max_step: Some(5.0), ..Default::default() };
        let u = [1e-6, -5e-7, 2e-7];
        let one = propagate_trajectory(&m, &nominal_x0(), 0.0, &[(1000.0, u)], &cfg, 0).unwrap();
        let two = propagate_trajectory(&m, &nominal_x0(), 0.0, &[(500.0, u), (500.0, u)], &cfg, 4).unwrap();
        let a = one.boundaries.last().unwrap().1;
        let b = two.boundaries.last().unwrap().1;
        assert!(rel(&a, &b) <= 1e-12);
        assert_eq!(two.samples.len(), 1 + 2 * 5);
        assert!(two.samples.windows(2).all(|w| w[1].0 > w[0].0));
    }

    #[test]
    fn coasting_drifts_away_from_linear_prediction() {
        let m = OrbitModel::standard_circular();
        let cfg = IntegratorConfig::with_steps(200);
        let x0 = nominal_x0();
        let mut last = 0.0;
        for t in [500.0, 1500.0, 3000.0, 5000.0] {
            let r = flow_with_stm(&m, &x0, &[0.0; 3], 0.0, t, &cfg).unwrap();
            // linearization about the origin: Φ_lin from the origin flow
            let lin = flow_with_stm(&m, &[0.0; 6], &[0.0; 3], 0.0, t, &cfg).unwrap().stm.unwrap() * to_vector(&x0);
            let dev: f64 = (to_vector(&r.x_end) - lin).norm();
            assert!(dev > last, "t = {t}: {dev} <= {last}");
            last = dev;
        }
    }

    #[test]
    fn stm_norm_within_exponential_bound() {
        let m = OrbitModel::standard_circular();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let controls: Vec<Vec3> = (0..10).map(|_| [rng.gen_range(-1e-6..1e-6), rng.gen_range(-1e-6..1e-6), 0.0]).collect();
        let tr = PiecewiseTrajectory::simulate(&m, &nominal_x0(), 0.0, 3000.0, &controls, 100).unwrap();
        let (s, t_end) = (600.0, 1800.0);
        let mut alpha: f64 = 0.0;
        let mut t = s;
        while t <= t_end {
            let x = tr.state_at(&m, t).unwrap();
            alpha = alpha.max(m.jacobian_at(0.0, &x).singular_values().max());
            t += 2.0;
        }
        let xs = tr.state_at(&m, s).unwrap();
        for k in 1..=12 {
            let dt = 100.0 * k as f64;
            let r = flow_with_stm(&m, &xs, &[0.0; 3], s, s + dt, &IntegratorConfig::with_steps(200)).unwrap();
            let norm = r.stm.unwrap().singular_values().max();
            assert!(norm <= (alpha * dt).exp());
        }
    }

    #[test]
    fn piecewise_trajectory_interpolates_nodes() {
        let m = OrbitModel::standard_eccentric(1);
        let controls = vec![[1e-6, 0.0, 0.0], [0.0, -1e-6, 0.0], [0.0, 0.0, 1e-6]];
        let tr = PiecewiseTrajectory::simulate(&m, &nominal_x0(), 0.0, 900.0, &controls, 60).unwrap();
        assert!(tr.max_defect(&m).unwrap() <= 1e-14);
        for k in 0..=3 {
            let x = tr.state_at(&m, 300.0 * k as f64).unwrap();
            assert!(rel(&x, &tr.nodes[k]) <= 1e-12);
        }
        assert_eq!(tr.control_at(450.0), controls[1]);
        assert_eq!(tr.control_at(900.0), controls[2]);
    }
}
