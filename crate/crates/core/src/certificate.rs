//! Robustness certificates for a missed-thrust window.
//!
//! Along the outage the deviation ρ = ‖ξ̃‖ obeys `ρ̇ ≤ αρ + f + (H/2)ρ²`.
//! The safe radius δ(ε) keeps the Taylor remainder within ε of the linear
//! term, and δτ_max is the time the scalar envelope takes to reach δ.

use serde::{Deserialize, Serialize};

use crate::dynamics::{jacobian_control, CurvatureConvention, OrbitModel, Vec6};
use crate::error::{Error, Result};
use crate::propagation::{rk4_segment, PiecewiseTrajectory};

/// Relative width under which Δ is treated as exactly zero.
const ZERO_DISCRIMINANT: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionBounds {
    pub alpha: f64,
    pub beta: f64,
    #[serde(rename = "H")]
    pub h: f64,
    pub u_min_dag: f64,
    pub u_max_dag: f64,
    pub f_min: f64,
    pub f_max: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Branch {
    PositiveDelta,
    ZeroDelta,
    NegativeDelta,
}

impl AssumptionBounds {
    pub fn new(alpha: f64, beta: f64, h: f64, u_min_dag: f64, u_max_dag: f64) -> Self {
        Self { alpha, beta, h, u_min_dag, u_max_dag, f_min: beta * u_min_dag, f_max: beta * u_max_dag }
    }

    /// Bounds given directly in forcing units (β = 1).
    pub fn from_forcing(alpha: f64, h: f64, f_min: f64, f_max: f64) -> Self {
        Self::new(alpha, 1.0, h, f_min, f_max)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !(ok(self.alpha) && ok(self.beta) && ok(self.h)) {
            return Err(Error::InvalidInput(format!(
                "alpha, beta, H must be finite and >= 0 (got {}, {}, {})",
                self.alpha, self.beta, self.h
            )));
        }
        if !(self.f_min > 0.0 && self.f_min <= self.f_max && self.f_max.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "need 0 < f_min <= f_max (got {}, {})",
                self.f_min, self.f_max
            )));
        }
        Ok(())
    }

    pub fn discriminant(&self) -> f64 {
        self.alpha * self.alpha - 2.0 * self.h * self.f_max
    }

    pub fn branch(&self) -> Branch {
        let d = self.discriminant();
        let scale = (self.alpha * self.alpha).max(2.0 * self.h * self.f_max);
        if d.abs() <= ZERO_DISCRIMINANT * scale {
            Branch::ZeroDelta
        } else if d > 0.0 {
            Branch::PositiveDelta
        } else {
            Branch::NegativeDelta
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SafeRadius {
    /// `f64::INFINITY` when the remainder vanishes identically (α = H = 0).
    pub delta_hat: f64,
    pub delta: f64,
}

/// Largest δ with `(H/2)δ² ≤ ε (f_min − αδ)`, capped at `f_min/α`.
pub fn safe_radius(b: &AssumptionBounds, epsilon: f64) -> Result<SafeRadius> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(Error::InvalidInput(format!("epsilon must be in (0, 1), got {epsilon}")));
    }
    b.validate()?;
    let (a, h, f) = (b.alpha, b.h, b.f_min);
    if a == 0.0 && h == 0.0 {
        return Ok(SafeRadius { delta_hat: f64::INFINITY, delta: f64::INFINITY });
    }
    // positive root of (H/2)δ² + εαδ − εf = 0, written without cancellation
    let ea = epsilon * a;
    let delta_hat = 2.0 * epsilon * f / ((ea * ea + 2.0 * epsilon * h * f).sqrt() + ea);
    let delta = if a > 0.0 { delta_hat.min(f / a) } else { delta_hat };
    Ok(SafeRadius { delta_hat, delta })
}

/// Time at which the envelope diverges, `f64::INFINITY` when it never does.
pub fn blowup_time(b: &AssumptionBounds) -> f64 {
    let (a, h, f) = (b.alpha, b.h, b.f_max);
    if h == 0.0 {
        return f64::INFINITY;
    }
    match b.branch() {
        Branch::PositiveDelta => {
            let s = b.discriminant().sqrt();
            let am = 2.0 * h * f / (a + s);
            ((a + s) / am).ln() / s
        }
        Branch::ZeroDelta => {
            if a == 0.0 {
                f64::INFINITY
            } else {
                2.0 / a
            }
        }
        Branch::NegativeDelta => {
            let s = (-b.discriminant()).sqrt();
            if a == 0.0 {
                std::f64::consts::PI / s
            } else {
                2.0 / s * (s / a).atan()
            }
        }
    }
}

fn envelope_unchecked(b: &AssumptionBounds, t: f64) -> f64 {
    let (a, h, f) = (b.alpha, b.h, b.f_max);
    match b.branch() {
        Branch::PositiveDelta => {
            let s = b.discriminant().sqrt();
            let am = 2.0 * h * f / (a + s); // α − s without cancellation
            let e = (s * t).exp_m1();
            2.0 * f * e / (2.0 * s - am * e)
        }
        Branch::ZeroDelta => f * t / (1.0 - 0.5 * a * t),
        Branch::NegativeDelta => {
            let s = (-b.discriminant()).sqrt();
            let tn = (0.5 * s * t).tan();
            2.0 * f * tn / (s - a * tn)
        }
    }
}

/// Solution of `ρ̇ = αρ + f_max + (H/2)ρ²`, `ρ(0) = 0`.
pub fn riccati_envelope(b: &AssumptionBounds, t: f64) -> Result<f64> {
    b.validate()?;
    if !(t >= 0.0) {
        return Err(Error::InvalidInput(format!("envelope time must be >= 0, got {t}")));
    }
    let tb = blowup_time(b);
    if t >= tb {
        return Err(Error::EnvelopeDiverged { blowup: tb });
    }
    let v = envelope_unchecked(b, t);
    if !(v.is_finite() && v >= 0.0) {
        return Err(Error::EnvelopeDiverged { blowup: tb });
    }
    Ok(v)
}

/// Exact inversion of the envelope at level `delta`.
fn invert_envelope(b: &AssumptionBounds, delta: f64) -> f64 {
    let (a, f) = (b.alpha, b.f_max);
    match b.branch() {
        Branch::PositiveDelta => {
            let s = b.discriminant().sqrt();
            let am = 2.0 * b.h * f / (a + s);
            let x = 2.0 * s * delta / (2.0 * f + delta * am);
            x.ln_1p() / s
        }
        Branch::ZeroDelta => delta / (f + 0.5 * a * delta),
        Branch::NegativeDelta => {
            let s = (-b.discriminant()).sqrt();
            2.0 / s * (delta * s / (2.0 * f + delta * a)).atan()
        }
    }
}

/// Time for the envelope to reach `delta`. The root is bracketed and refined
/// by bisection on the envelope, seeded by the closed-form inversion.
pub fn max_missed_thrust_duration(b: &AssumptionBounds, delta: f64) -> Result<f64> {
    b.validate()?;
    if !(delta > 0.0) {
        return Err(Error::InvalidInput(format!("delta must be > 0, got {delta}")));
    }
    if delta.is_infinite() {
        return Ok(blowup_time(b));
    }
    let tb = blowup_time(b);
    let guess = invert_envelope(b, delta);
    let g = |t: f64| envelope_unchecked(b, t) - delta;
    let (mut lo, mut hi) = (0.0f64, guess.max(f64::MIN_POSITIVE));
    // widen the bracket around the seed
    let mut k = 0;
    while g(hi) < 0.0 && hi < tb && k < 200 {
        lo = hi;
        hi = if tb.is_finite() { 0.5 * (hi + tb) } else { 2.0 * hi };
        k += 1;
    }
    if g(hi) < 0.0 {
        hi = tb;
    }
    let mut lo2 = guess * (1.0 - 1e-6);
    if lo2 > lo && lo2 < hi && g(lo2) < 0.0 {
        lo = lo2;
    }
    lo2 = guess * (1.0 + 1e-6);
    if lo2 < hi && lo2 > lo && g(lo2) >= 0.0 {
        hi = lo2;
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if g(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = if g(lo).abs() <= g(hi).abs() { lo } else { hi };
    Ok(t)
}

/// Closed-form δτ_max per branch, used as a cross-check of the root.
/// Case (iii) uses the tangent rate s/2 (with γ = s/H), which satisfies the
/// Riccati equation; see [`published_tangent_envelope`].
pub fn dtau_closed_form(b: &AssumptionBounds, delta: f64) -> f64 {
    let (a, h, f) = (b.alpha, b.h, b.f_max);
    match b.branch() {
        Branch::PositiveDelta => {
            let s = b.discriminant().sqrt();
            if h == 0.0 {
                return (a * delta / f).ln_1p() / a;
            }
            let r1 = -2.0 * f / (a + s);
            let r2 = (-a - s) / h;
            ((-delta / r1).ln_1p() - (-delta / r2).ln_1p()) / s
        }
        Branch::ZeroDelta => delta / (0.5 * a * delta + f),
        Branch::NegativeDelta => {
            let s = (-b.discriminant()).sqrt();
            let gamma = s / h;
            let phi = (a / s).atan();
            2.0 / s * (((delta + a / h) / gamma).atan() - phi)
        }
    }
}

/// Envelope of the form `−α/H + γ tan(γt + φ)` with `γ = √(2Hf − α²)/H`.
/// It satisfies the Riccati equation only when H = 2.
pub fn published_tangent_envelope(b: &AssumptionBounds, t: f64) -> f64 {
    let s = (-b.discriminant()).sqrt();
    let gamma = s / b.h;
    let phi = (b.alpha / (gamma * b.h)).atan();
    -b.alpha / b.h + gamma * (gamma * t + phi).tan()
}

/// Fixed-step RK4 integration of the envelope ODE.
pub fn riccati_ode_rk4(b: &AssumptionBounds, t: f64, steps: usize) -> f64 {
    let g = |r: f64| b.alpha * r + b.f_max + 0.5 * b.h * r * r;
    let h = t / steps.max(1) as f64;
    let mut r = 0.0;
    for _ in 0..steps.max(1) {
        let k1 = g(r);
        let k2 = g(r + 0.5 * h * k1);
        let k3 = g(r + 0.5 * h * k2);
        let k4 = g(r + h * k3);
        r += h / 6.0 * (k1 + 2.0 * (k2 + k3) + k4);
    }
    r
}

/// Grönwall bound on the linear part of the deviation.
pub fn linear_error_envelope(b: &AssumptionBounds, t: f64) -> f64 {
    let at = b.alpha * t;
    if at < 1e-12 {
        b.f_max * t * (1.0 + 0.5 * at)
    } else {
        b.f_max / b.alpha * at.exp_m1()
    }
}

/// `delta / (f_min/α)`; `None` when α = 0.
pub fn saturation_ratio(delta: f64, f_min: f64, alpha: f64) -> Option<f64> {
    if alpha > 0.0 {
        Some(delta / (f_min / alpha))
    } else {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub epsilon: f64,
    pub delta_hat: f64,
    pub delta: f64,
    pub discriminant: f64,
    pub branch: Branch,
    pub dtau_max: f64,
    pub r_sat: Option<f64>,
    /// The envelope reaches δ only after the realized outage has ended.
    pub beyond_outage: bool,
}

pub fn certify(b: &AssumptionBounds, epsilon: f64, dtau_realized: f64) -> Result<Certificate> {
    let sr = safe_radius(b, epsilon)?;
    let dtau_max = max_missed_thrust_duration(b, sr.delta)?;
    Ok(Certificate {
        epsilon,
        delta_hat: sr.delta_hat,
        delta: sr.delta,
        discriminant: b.discriminant(),
        branch: b.branch(),
        dtau_max,
        r_sat: saturation_ratio(sr.delta, b.f_min, b.alpha),
        beyond_outage: dtau_max > dtau_realized,
    })
}

/// Relative mismatch between the closed-form envelope at `dtau` and an RK4
/// integration of its ODE.
pub fn envelope_consistency(b: &AssumptionBounds, dtau: f64, delta: f64) -> f64 {
    if !(delta.is_finite() && dtau.is_finite()) {
        return 0.0;
    }
    (riccati_ode_rk4(b, dtau, 20_000) - delta).abs() / delta
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsOptions {
    pub samples_per_segment: usize,
    pub convention: CurvatureConvention,
    pub epsilon: f64,
}

impl Default for BoundsOptions {
    fn default() -> Self {
        Self { samples_per_segment: 20, convention: CurvatureConvention::Rigorous, epsilon: 0.05 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundsExtraction {
    pub bounds: AssumptionBounds,
    /// Radius of the tube over which H was maximized.
    pub tube_radius: f64,
    /// The safe radius fits inside the tube used for H.
    pub certifiable: bool,
}

struct WindowSample {
    t: f64,
    phase: f64,
    x: Vec6,
}

fn window_samples(
    model: &OrbitModel,
    reference: &PiecewiseTrajectory,
    tau1: f64,
    tau2: f64,
    per_segment: usize,
) -> Result<Vec<WindowSample>> {
    let h = reference.segment_duration();
    let n = (((tau2 - tau1) / h * per_segment.max(1) as f64).ceil() as usize).max(1);
    let mut out = Vec::with_capacity(n + 1);
    for i in 0..=n {
        let t = if i == n { tau2 } else { tau1 + (tau2 - tau1) * i as f64 / n as f64 };
        let (x, phase) = reference.state_and_phase_at(model, t)?;
        out.push(WindowSample { t, phase, x });
    }
    Ok(out)
}

fn control_extremes(reference: &PiecewiseTrajectory, tau1: f64, tau2: f64) -> Result<(f64, f64)> {
    let h = reference.segment_duration();
    let k0 = reference.segment_index(tau1);
    let mut k1 = reference.segment_index(tau2);
    // a window ending on a node does not reach into the next segment
    if k1 > k0 && (tau2 - (reference.t0 + h * k1 as f64)).abs() <= 1e-9 * h {
        k1 -= 1;
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for k in k0..=k1 {
        let u = reference.controls[k];
        let norm = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
        if norm == 0.0 {
            return Err(Error::AssumptionViolation { t: (reference.t0 + h * k as f64).max(tau1) });
        }
        lo = lo.min(norm);
        hi = hi.max(norm);
    }
    Ok((lo, hi))
}

/// Bounds sampled along the reference on `[tau1, tau2]` with H taken over a
/// tube of the given radius.
pub fn bounds_on_tube(
    model: &OrbitModel,
    reference: &PiecewiseTrajectory,
    tau1: f64,
    tau2: f64,
    per_segment: usize,
    tube_radius: f64,
    convention: CurvatureConvention,
) -> Result<AssumptionBounds> {
    if !(tau1 <= tau2) || !reference.covers(tau1) || !reference.covers(tau2) {
        return Err(Error::InvalidInput(format!(
            "outage [{tau1}, {tau2}] not covered by reference [{}, {}]",
            reference.t0, reference.t_final
        )));
    }
    let (u_min, u_max) = control_extremes(reference, tau1, tau2)?;
    let beta = jacobian_control().singular_values().max();
    let mut alpha: f64 = 0.0;
    let mut h: f64 = 0.0;
    for s in window_samples(model, reference, tau1, tau2, per_segment)? {
        let _ = s.t;
        alpha = alpha.max(model.jacobian_at(s.phase, &s.x).singular_values().max());
        h = h.max(model.curvature_bound(s.phase, &[s.x[0], s.x[1], s.x[2]], tube_radius, convention));
    }
    Ok(AssumptionBounds::new(alpha, beta, h, u_min, u_max))
}

/// Bounds with the tube radius for H fixed by one refinement pass.
///
/// The first tube is the linear-error reach over the window, capped by the
/// safe radius computed from reference-only curvature (the certificate never
/// relies on H beyond that radius). If the resulting safe radius exceeds the
/// tube, the tube is enlarged to it once; if δ still exceeds the tube the
/// extraction is flagged non-certifiable.
pub fn extract_bounds(
    model: &OrbitModel,
    reference: &PiecewiseTrajectory,
    tau1: f64,
    tau2: f64,
    opts: &BoundsOptions,
) -> Result<BoundsExtraction> {
    let n = opts.samples_per_segment;
    let b0 = bounds_on_tube(model, reference, tau1, tau2, n, 0.0, opts.convention)?;
    let d0 = safe_radius(&b0, opts.epsilon)?.delta;
    let r0 = linear_error_envelope(&b0, tau2 - tau1).min(d0);
    let b1 = bounds_on_tube(model, reference, tau1, tau2, n, r0, opts.convention)?;
    let d1 = safe_radius(&b1, opts.epsilon)?.delta;
    if d1 <= r0 {
        return Ok(BoundsExtraction { bounds: b1, tube_radius: r0, certifiable: true });
    }
    let b2 = bounds_on_tube(model, reference, tau1, tau2, n, d1, opts.convention)?;
    let d2 = safe_radius(&b2, opts.epsilon)?.delta;
    Ok(BoundsExtraction { bounds: b2, tube_radius: d1, certifiable: d2 <= d1 })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateTriad {
    pub delta_theoretical: f64,
    pub delta_computed: f64,
    pub dtau_theoretical: f64,
    pub dtau_computed: f64,
    pub dtau_actual: f64,
}

/// Deviation sample along the outage: realization minus reference.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviationSample {
    pub t: f64,
    pub phase: f64,
    pub reference: Vec6,
    pub realization: Vec6,
    pub u_ref: [f64; 3],
}

impl DeviationSample {
    pub fn deviation(&self) -> Vec6 {
        let mut d = [0.0; 6];
        for i in 0..6 {
            d[i] = self.realization[i] - self.reference[i];
        }
        d
    }

    pub fn deviation_norm(&self) -> f64 {
        self.deviation().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Reference and coasting realization sampled at `n + 1` times on `[tau1, tau2]`.
/// The realization follows the reference up to `tau1` and has u = 0 after.
pub fn coasting_deviation(
    model: &OrbitModel,
    reference: &PiecewiseTrajectory,
    tau1: f64,
    tau2: f64,
    n: usize,
) -> Result<Vec<DeviationSample>> {
    let (x1, p1) = reference.state_and_phase_at(model, tau1)?;
    let h_ref = reference.segment_duration() / reference.steps_per_segment as f64;
    let n = if tau2 > tau1 { n.max(1) } else { 0 };
    let mut out = Vec::with_capacity(n + 1);
    let (mut x, mut p, mut t) = (x1, p1, tau1);
    for i in 0..=n {
        let ti = if i == n { tau2 } else { tau1 + (tau2 - tau1) * i as f64 / n.max(1) as f64 };
        let dt = ti - t;
        if dt > 0.0 {
            let steps = ((dt / h_ref).ceil() as usize).max(1);
            let (xn, pn) = rk4_segment(model, p, &x, &[0.0; 3], dt, steps)?;
            x = xn;
            p = pn;
            t = ti;
        }
        let (xr, pr) = reference.state_and_phase_at(model, ti)?;
        out.push(DeviationSample { t: ti, phase: pr, reference: xr, realization: x, u_ref: reference.control_at(ti.min(tau2)) });
        let _ = p;
    }
    Ok(out)
}

/// Theoretical/computed/actual comparison from aligned reference and
/// realization samples on the outage window.
pub fn certificate_triad_from_samples(
    reference: &[(f64, Vec6)],
    realization: &[(f64, Vec6)],
    dtau_actual: f64,
    bounds: &AssumptionBounds,
    epsilon: f64,
) -> Result<CertificateTriad> {
    if reference.len() != realization.len()
        || reference.iter().zip(realization).any(|(a, b)| (a.0 - b.0).abs() > 1e-9 * a.0.abs().max(1.0))
    {
        return Err(Error::InvalidInput("reference and realization samples are not time-aligned".into()));
    }
    let mut delta_computed: f64 = 0.0;
    for ((_, a), (_, b)) in reference.iter().zip(realization) {
        let d: f64 = a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt();
        delta_computed = delta_computed.max(d);
    }
    let sr = safe_radius(bounds, epsilon)?;
    let dtau_theoretical = max_missed_thrust_duration(bounds, sr.delta)?;
    let dtau_computed = if delta_computed > 0.0 {
        max_missed_thrust_duration(bounds, delta_computed)?
    } else {
        0.0
    };
    Ok(CertificateTriad {
        delta_theoretical: sr.delta,
        delta_computed,
        dtau_theoretical,
        dtau_computed,
        dtau_actual,
    })
}

pub fn certificate_triad(
    model: &OrbitModel,
    reference: &PiecewiseTrajectory,
    tau1: f64,
    tau2: f64,
    bounds: &AssumptionBounds,
    epsilon: f64,
    samples: usize,
) -> Result<CertificateTriad> {
    let dev = coasting_deviation(model, reference, tau1, tau2, samples)?;
    let r: Vec<(f64, Vec6)> = dev.iter().map(|s| (s.t, s.reference)).collect();
    let w: Vec<(f64, Vec6)> = dev.iter().map(|s| (s.t, s.realization)).collect();
    certificate_triad_from_samples(&r, &w, tau2 - tau1, bounds, epsilon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn b(alpha: f64, h: f64, f: f64) -> AssumptionBounds {
        AssumptionBounds::from_forcing(alpha, h, f, f)
    }

    /// Positive root of (H/2)δ² + εαδ − εf by bisection.
    fn bisect_root(h: f64, a: f64, f: f64, eps: f64) -> f64 {
        let q = |d: f64| 0.5 * h * d * d + eps * a * d - eps * f;
        let (mut lo, mut hi) = (0.0, 1.0);
        while q(hi) < 0.0 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let m = 0.5 * (lo + hi);
            if q(m) < 0.0 {
                lo = m
            } else {
                hi = m
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn safe_radius_reference_values() {
        let r = safe_radius(&b(0.0, 2.0, 1.0), 0.5).unwrap();
        assert!((r.delta_hat - 0.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(r.delta, r.delta_hat);

        let r = safe_radius(&b(1.0, 1.0, 1.0), 0.05).unwrap();
        assert!((r.delta_hat - (0.1025f64.sqrt() - 0.05)).abs() < 1e-15);
        assert!((r.delta_hat - bisect_root(1.0, 1.0, 1.0, 0.05)).abs() < 1e-14);
        assert_eq!(r.delta, r.delta_hat);

        let r = safe_radius(&b(0.0, 0.0, 1.0), 0.05).unwrap();
        assert!(r.delta_hat.is_infinite());
    }

    #[test]
    fn safe_radius_saturates_at_control_limit() {
        // H → 0: δ̂ → f/α, where the cap binds
        let bb = b(2.0, 1e-30, 3.0);
        let r = safe_radius(&bb, 0.9).unwrap();
        assert!((r.delta_hat - 1.5).abs() < 1e-12);
        assert!(r.delta <= 1.5);
        assert!((saturation_ratio(r.delta, 3.0, 2.0).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(saturation_ratio(1.5, 3.0, 2.0), Some(1.0));
        assert_eq!(saturation_ratio(1.0, 3.0, 0.0), None);
    }

    #[test]
    fn zero_discriminant_envelope() {
        let bb = b(2.0, 1.0, 2.0);
        assert_eq!(bb.branch(), Branch::ZeroDelta);
        assert_eq!(riccati_envelope(&bb, 0.0).unwrap(), 0.0);
        // α²t / (2H(1 − αt/2)) at t = 0.5
        let v = riccati_envelope(&bb, 0.5).unwrap();
        assert!((v - 2.0).abs() < 1e-14);
        let t = max_missed_thrust_duration(&bb, 1.0).unwrap();
        assert!((t - 1.0 / 3.0).abs() < 1e-14);
        assert!((dtau_closed_form(&bb, 1.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((max_missed_thrust_duration(&bb, 2.0).unwrap() - 0.5).abs() < 1e-14);
    }

    #[test]
    fn envelope_errors_past_blowup() {
        let bb = b(1.0, 1.0, 2.0);
        let tb = blowup_time(&bb);
        assert!(matches!(riccati_envelope(&bb, tb * 1.01), Err(Error::EnvelopeDiverged { .. })));
        assert!(riccati_envelope(&bb, tb * 0.99).is_ok());
        assert!(matches!(max_missed_thrust_duration(&bb, 0.0), Err(Error::InvalidInput(_))));
    }

    fn random_bounds(rng: &mut ChaCha8Rng, branch: Branch) -> AssumptionBounds {
        let alpha = rng.gen_range(0.0..2.0);
        let h = rng.gen_range(0.05..3.0);
        let crit = alpha * alpha / (2.0 * h);
        let f = match branch {
            Branch::PositiveDelta => crit * rng.gen_range(0.05..0.95),
            Branch::ZeroDelta => crit,
            Branch::NegativeDelta => crit * rng.gen_range(1.05..5.0) + rng.gen_range(0.01..1.0),
        };
        if f <= 0.0 {
            return random_bounds(rng, branch);
        }
        b(alpha, h, f)
    }

    #[test]
    fn envelope_matches_ode_on_all_branches() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for branch in [Branch::PositiveDelta, Branch::ZeroDelta, Branch::NegativeDelta] {
            for _ in 0..30 {
                let bb = random_bounds(&mut rng, branch);
                if bb.alpha == 0.0 && branch == Branch::ZeroDelta {
                    continue;
                }
                let tb = blowup_time(&bb);
                let t_end = if tb.is_finite() { 0.95 * tb } else { 5.0 };
                for k in 1..=10 {
                    let t = t_end * k as f64 / 10.0;
                    let closed = riccati_envelope(&bb, t).unwrap();
                    let ode = riccati_ode_rk4(&bb, t, 200_000);
                    assert!((closed - ode).abs() <= 1e-8 * ode, "{branch:?} {bb:?} t={t}: {closed} vs {ode}");
                }
            }
        }
    }

    #[test]
    fn published_tangent_form_fails_ode_unless_h_is_two() {
        let bad = b(0.5, 1.0, 1.0);
        assert_eq!(bad.branch(), Branch::NegativeDelta);
        let t = 0.5;
        let pub_v = published_tangent_envelope(&bad, t);
        let ode = riccati_ode_rk4(&bad, t, 100_000);
        assert!((pub_v - ode).abs() > 1e-3 * ode);
        assert!((riccati_envelope(&bad, t).unwrap() - ode).abs() < 1e-10 * ode);

        let two = b(0.5, 2.0, 1.0);
        let pub_v = published_tangent_envelope(&two, t);
        let ode = riccati_ode_rk4(&two, t, 100_000);
        assert!((pub_v - ode).abs() < 1e-10 * ode);
    }

    #[test]
    fn closed_forms_agree_with_root() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for branch in [Branch::PositiveDelta, Branch::ZeroDelta, Branch::NegativeDelta] {
            for _ in 0..100 {
                let bb = random_bounds(&mut rng, branch);
                let delta = rng.gen_range(0.01..5.0);
                let t = max_missed_thrust_duration(&bb, delta).unwrap();
                let c = dtau_closed_form(&bb, delta);
                assert!((t - c).abs() <= 1e-9 * c, "{branch:?}: {t} vs {c}");
                let rho = riccati_envelope(&bb, t).unwrap();
                assert!((rho - delta).abs() <= 1e-12 * delta);
            }
        }
    }

    #[test]
    fn dtau_is_strictly_increasing_in_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for branch in [Branch::PositiveDelta, Branch::ZeroDelta, Branch::NegativeDelta] {
            for _ in 0..100 {
                let bb = random_bounds(&mut rng, branch);
                let mut prev = 0.0;
                for k in 1..=20 {
                    let t = max_missed_thrust_duration(&bb, 0.05 * k as f64).unwrap();
                    assert!(t > prev);
                    prev = t;
                }
            }
        }
    }

    #[test]
    fn small_delta_limit() {
        let bb = b(0.7, 1.3, 0.4);
        for d in [1e-6, 1e-9, 1e-12] {
            let t = max_missed_thrust_duration(&bb, d).unwrap();
            assert!((t * bb.f_max / d - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn branch_continuity_at_zero_discriminant() {
        let (alpha, h) = (1.3, 0.8);
        let crit = alpha * alpha / (2.0 * h);
        let delta = 0.6;
        let dpos = 1e-9 * alpha * alpha;
        // Δ = α² − 2Hf = ±1e-9 α²
        let above = b(alpha, h, crit - dpos / (2.0 * h));
        let below = b(alpha, h, crit + dpos / (2.0 * h));
        assert_eq!(above.branch(), Branch::PositiveDelta);
        assert_eq!(below.branch(), Branch::NegativeDelta);
        let ta = max_missed_thrust_duration(&above, delta).unwrap();
        let tb = max_missed_thrust_duration(&below, delta).unwrap();
        let t0 = max_missed_thrust_duration(&b(alpha, h, crit), delta).unwrap();
        assert!((ta - t0).abs() <= 1e-4 * t0);
        assert!((tb - t0).abs() <= 1e-4 * t0);
    }

    #[test]
    fn linear_envelope_values() {
        let bb = b(0.0, 0.0, 2.0);
        assert_eq!(linear_error_envelope(&bb, 0.0), 0.0);
        assert_eq!(linear_error_envelope(&bb, 3.0), 6.0);
        let bb = b(0.5, 0.0, 2.0);
        assert!((linear_error_envelope(&bb, 2.0) - 4.0 * 1f64.exp_m1()).abs() < 1e-14);
        let tiny = b(1e-14, 0.0, 2.0);
        assert!((linear_error_envelope(&tiny, 1.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn linear_envelope_dominates_ltv_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let alpha: f64 = rng.gen_range(0.1..1.0);
            let f: f64 = rng.gen_range(0.1..1.0);
            let bb = b(alpha, 0.0, f);
            let t_end = 3.0;
            let n = 3000;
            let dt = t_end / n as f64;
            let mut e = nalgebra::Vector6::<f64>::zeros();
            let mut mats = Vec::new();
            for _ in 0..4 {
                let m = nalgebra::Matrix6::<f64>::from_fn(|_, _| rng.gen_range(-1.0..1.0));
                mats.push(m * (alpha / m.singular_values().max()));
            }
            let dir = nalgebra::Vector6::<f64>::from_fn(|_, _| rng.gen_range(-1.0..1.0)).normalize() * f;
            for k in 0..n {
                let a = &mats[(k * 4) / n];
                let rhs = |e: &nalgebra::Vector6<f64>| a * e + dir;
                let k1 = rhs(&e);
                let k2 = rhs(&(e + k1 * (dt / 2.0)));
                let k3 = rhs(&(e + k2 * (dt / 2.0)));
                let k4 = rhs(&(e + k3 * dt));
                e += (k1 + (k2 + k3) * 2.0 + k4) * (dt / 6.0);
                let t = dt * (k + 1) as f64;
                assert!(e.norm() <= linear_error_envelope(&bb, t) * (1.0 + 1e-10));
            }
        }
    }

    #[test]
    fn certificate_bundle_invariants() {
        let bb = AssumptionBounds::new(1.0, 1.0, 2.6e-9, 1e-7, 1e-6);
        let c = certify(&bb, 0.05, 600.0).unwrap();
        assert!(c.delta > 0.0 && c.delta <= c.delta_hat);
        assert!(c.delta <= bb.f_min / bb.alpha);
        assert!(c.r_sat.unwrap() > 0.0 && c.r_sat.unwrap() <= 1.0);
        assert!(c.dtau_max > 0.0);
        assert!(!c.beyond_outage);
        assert!(envelope_consistency(&bb, c.dtau_max, c.delta) <= 1e-8);
    }

    #[test]
    fn triad_rejects_misaligned_samples() {
        let bb = b(1.0, 1.0, 1.0);
        let r = vec![(0.0, [0.0; 6]), (1.0, [0.0; 6])];
        let w = vec![(0.0, [0.0; 6]), (1.5, [0.0; 6])];
        assert!(matches!(certificate_triad_from_samples(&r, &w, 1.0, &bb, 0.05), Err(Error::InvalidInput(_))));
        let tri = certificate_triad_from_samples(&r, &r, 0.0, &bb, 0.05).unwrap();
        assert_eq!(tri.delta_computed, 0.0);
        assert_eq!(tri.dtau_computed, 0.0);
    }

    fn circular_reference(u: [f64; 3]) -> (OrbitModel, PiecewiseTrajectory) {
        let m = OrbitModel::standard_circular();
        let x0 = [0.5f64.sqrt(), 0.0, 0.5f64.sqrt(), 0.0, 0.0, 0.0];
        let traj = PiecewiseTrajectory::simulate(&m, &x0, 0.0, 1000.0, &vec![u; 10], 50).unwrap();
        (m, traj)
    }

    #[test]
    fn extracted_bounds_on_circular_reference() {
        let (m, traj) = circular_reference([3e-7, -4e-7, 0.0]);
        let opts = BoundsOptions::default();
        let ex = extract_bounds(&m, &traj, 200.0, 500.0, &opts).unwrap();
        let bb = ex.bounds;
        assert!(ex.certifiable);
        assert!((bb.u_min_dag - 5e-7).abs() < 1e-20 && (bb.u_max_dag - 5e-7).abs() < 1e-20);
        assert!((bb.beta - 1.0).abs() < 1e-14);
        // ‖A‖ is dominated by the identity kinematic block
        assert!(bb.alpha >= 1.0 && bb.alpha < 1.0 + 1e-5);
        let sr = safe_radius(&bb, opts.epsilon).unwrap();
        assert!(sr.delta <= ex.tube_radius);

        let dense = BoundsOptions { samples_per_segment: 10 * opts.samples_per_segment, ..opts };
        let bd = extract_bounds(&m, &traj, 200.0, 500.0, &dense).unwrap().bounds;
        assert!((bd.alpha - bb.alpha).abs() <= 0.01 * bd.alpha);
        assert!((bd.h - bb.h).abs() <= 0.01 * bd.h);
    }

    #[test]
    fn zero_reference_control_violates_bounds() {
        let (m, traj) = circular_reference([0.0; 3]);
        let r = extract_bounds(&m, &traj, 200.0, 500.0, &BoundsOptions::default());
        assert!(matches!(r, Err(Error::AssumptionViolation { .. })));
        assert!(matches!(
            extract_bounds(&m, &traj, 500.0, 1500.0, &BoundsOptions::default()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn coasting_deviation_stays_under_envelope() {
        let (m, traj) = circular_reference([3e-7, -4e-7, 2e-7]);
        let opts = BoundsOptions::default();
        let bb = extract_bounds(&m, &traj, 200.0, 500.0, &opts).unwrap().bounds;
        let dev = coasting_deviation(&m, &traj, 200.0, 500.0, 300).unwrap();
        assert_eq!(dev[0].deviation_norm(), 0.0);
        let tb = blowup_time(&bb);
        for s in &dev {
            let t = s.t - 200.0;
            if t < 0.99 * tb {
                assert!(s.deviation_norm() <= riccati_envelope(&bb, t).unwrap() * (1.0 + 1e-9) + 1e-15);
            }
        }
        // deviation grows like ½ f t² over a long coast
        let last = dev.last().unwrap();
        let expect = 0.5 * bb.f_max * 300.0f64.powi(2);
        assert!((last.deviation_norm() / expect - 1.0).abs() < 0.2);

        let tri = certificate_triad(&m, &traj, 200.0, 500.0, &bb, 0.05, 300).unwrap();
        assert!(tri.dtau_theoretical <= tri.dtau_computed);
        assert!(tri.dtau_computed <= tri.dtau_actual);
    }

    proptest! {
        #[test]
        fn delta_residual_and_bound(alpha in 0.0f64..3.0, h in 1e-3f64..5.0, f in 1e-3f64..5.0, eps in 0.001f64..0.99) {
            let bb = b(alpha, h, f);
            let r = safe_radius(&bb, eps).unwrap();
            let q = 0.5 * h * r.delta_hat.powi(2) + eps * alpha * r.delta_hat - eps * f;
            prop_assert!(q.abs() <= 1e-10 * (eps * f));
            if alpha > 0.0 {
                prop_assert!(r.delta <= f / alpha);
                let lhs = 0.5 * h * r.delta.powi(2) / (f - alpha * r.delta);
                prop_assert!(lhs <= eps * (1.0 + 1e-10) || r.delta == f / alpha);
            }
        }

        #[test]
        fn epsilon_monotonicity(alpha in 0.0f64..3.0, h in 1e-3f64..5.0, f in 1e-3f64..5.0,
                                e1 in 0.001f64..0.98, de in 0.0f64..0.01) {
            let bb = b(alpha, h, f);
            let e2 = (e1 + de).min(0.99);
            let r1 = safe_radius(&bb, e1).unwrap();
            let r2 = safe_radius(&bb, e2).unwrap();
            prop_assert!(r2.delta_hat >= r1.delta_hat * (1.0 - 1e-14));
            let t1 = max_missed_thrust_duration(&bb, r1.delta_hat).unwrap();
            let t2 = max_missed_thrust_duration(&bb, r2.delta_hat).unwrap();
            prop_assert!(t2 >= t1 * (1.0 - 1e-12));
        }
    }
}
