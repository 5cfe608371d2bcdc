//! Finite-horizon controllability-energy diagnostic for the post-outage
//! recovery: Gramian, minimum recovery energy, available energy and `r_e`.
//!
//! Two Gramians are formed along the reference over `[τ2, τ2 + T_rec]`:
//!
//! * `W  = ∫ Φ(t,τ2) B Bᵀ Φ(t,τ2)ᵀ dt`, the reported controllability Gramian;
//! * `Wr = ∫ Φ(τ2,t) B Bᵀ Φ(τ2,t)ᵀ dt`, whose inverse quadratic form is the
//!   exact minimum energy steering `ξ̃(τ2) = ξ⁺` to `ξ̃(τ2 + T_rec) = 0`.
//!
//! Both are positive definite exactly when the linearization is controllable
//! on the horizon. `E_min` is always evaluated with `Wr`.

use nalgebra::{Matrix6, SymmetricEigen, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::certificate::coasting_deviation;
use crate::dynamics::{jacobian_control, OrbitModel, Vec3, Vec6};
use crate::error::{Error, Result};
use crate::propagation::{flow_with_stm_from_phase, IntegratorConfig, PiecewiseTrajectory};

/// Condition number above which a Gramian is treated as singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GramianOptions {
    /// Composite Simpson intervals; rounded up to even.
    pub quadrature_steps: usize,
    /// RK4 steps per quadrature interval for the STM.
    pub substeps: usize,
}

impl Default for GramianOptions {
    fn default() -> Self {
        Self { quadrature_steps: 200, substeps: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gramians {
    pub forward: Matrix6<f64>,
    pub recovery: Matrix6<f64>,
}

/// Both Gramians over `[tau2, tau2 + t_rec]` along `reference`.
pub fn gramians(
    model: &OrbitModel,
    reference: &PiecewiseTrajectory,
    tau2: f64,
    t_rec: f64,
    opts: &GramianOptions,
) -> Result<Gramians> {
    if !(t_rec > 0.0 && t_rec.is_finite()) {
        return Err(Error::InvalidInput(format!("recovery horizon must be > 0, got {t_rec}")));
    }
    if opts.quadrature_steps == 0 || opts.substeps == 0 {
        return Err(Error::InvalidInput("quadrature_steps and substeps must be >= 1".into()));
    }
    let t_end = tau2 + t_rec;
    if !reference.covers(tau2) || !reference.covers(t_end) {
        return Err(Error::Domain { nu: t_end, lo: reference.t0, hi: reference.t_final });
    }
    let n = opts.quadrature_steps + opts.quadrature_steps % 2;
    let h = t_rec / n as f64;
    let b = jacobian_control();
    let (mut x, mut phase) = reference.state_and_phase_at(model, tau2)?;
    let mut phi = Matrix6::<f64>::identity();
    let mut fwd = Matrix6::<f64>::zeros();
    let mut rec = Matrix6::<f64>::zeros();
    let seg_h = reference.segment_duration();
    for i in 0..=n {
        let w = if i == 0 || i == n {
            1.0
        } else if i % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let pb = phi * b;
        fwd += pb * pb.transpose() * w;
        let inv = phi.try_inverse().ok_or(Error::Divergence { step: i, t: tau2 + h * i as f64 })?;
        let qb = inv * b;
        rec += qb * qb.transpose() * w;
        if i == n {
            break;
        }
        // advance to the next node, splitting at control switches
        let mut t = tau2 + h * i as f64;
        let t_next = tau2 + h * (i + 1) as f64;
        while t < t_next {
            let k = reference.segment_index(t);
            let boundary = reference.t0 + seg_h * (k + 1) as f64;
            let stop = if boundary > t && boundary < t_next { boundary } else { t_next };
            let dt = stop - t;
            let cfg = IntegratorConfig::with_steps(((opts.substeps as f64 * dt / h).ceil() as usize).max(1));
            let r = flow_with_stm_from_phase(model, phase, &x, &reference.controls[k], dt, &cfg)?;
            x = r.x_end;
            phase = r.phase_end;
            phi = r.stm.expect("stm requested") * phi;
            t = stop;
        }
    }
    let scale = h / 3.0;
    let sym = |m: Matrix6<f64>| (m + m.transpose()) * (0.5 * scale);
    Ok(Gramians { forward: sym(fwd), recovery: sym(rec) })
}

/// Reported controllability Gramian `∫ Φ(t,τ2) B Bᵀ Φ(t,τ2)ᵀ dt`.
pub fn controllability_gramian(
    model: &OrbitModel,
    reference: &PiecewiseTrajectory,
    tau2: f64,
    t_rec: f64,
    opts: &GramianOptions,
) -> Result<Matrix6<f64>> {
    Ok(gramians(model, reference, tau2, t_rec, opts)?.forward)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinEnergy {
    pub e_min: f64,
    pub condition: f64,
    /// Condition number above [`SINGULAR_CONDITION`]; `e_min` then uses the
    /// pseudo-inverse on the numerically controllable subspace.
    pub singular: bool,
}

/// `ξᵀ W⁻¹ ξ` for symmetric positive semidefinite `W`.
pub fn min_energy(w: &Matrix6<f64>, xi: &Vec6) -> Result<MinEnergy> {
    let v = Vector6::from_column_slice(xi);
    if v.iter().any(|c| !c.is_finite()) || w.iter().any(|c| !c.is_finite()) {
        return Err(Error::InvalidInput("non-finite Gramian or deviation".into()));
    }
    let eig = SymmetricEigen::new(*w);
    let lmax = eig.eigenvalues.max();
    let lmin = eig.eigenvalues.min();
    if lmax <= 0.0 {
        if v.norm() == 0.0 {
            return Ok(MinEnergy { e_min: 0.0, condition: f64::INFINITY, singular: true });
        }
        return Err(Error::InfeasibleRecovery);
    }
    let condition = if lmin > 0.0 { lmax / lmin } else { f64::INFINITY };
    if condition <= SINGULAR_CONDITION {
        let ch = w.cholesky().ok_or(Error::InfeasibleRecovery)?;
        let e = v.dot(&ch.solve(&v)).max(0.0);
        return Ok(MinEnergy { e_min: e, condition, singular: false });
    }
    let cut = lmax / SINGULAR_CONDITION;
    let mut e = 0.0;
    for k in 0..6 {
        let c = eig.eigenvectors.column(k).dot(&v);
        if eig.eigenvalues[k] > cut {
            e += c * c / eig.eigenvalues[k];
        } else if c.abs() > 1e-9 * v.norm().max(f64::MIN_POSITIVE) {
            return Err(Error::InfeasibleRecovery);
        }
    }
    Ok(MinEnergy { e_min: e, condition, singular: true })
}

/// `T_rec·‖ū‖²`.
pub fn available_energy(u_bar: &Vec3, t_rec: f64) -> Result<f64> {
    if u_bar.iter().any(|u| !(*u >= 0.0 && u.is_finite())) {
        return Err(Error::InvalidInput(format!("u_bar components must be >= 0, got {u_bar:?}")));
    }
    if !(t_rec >= 0.0) {
        return Err(Error::InvalidInput(format!("t_rec must be >= 0, got {t_rec}")));
    }
    Ok(t_rec * u_bar.iter().map(|u| u * u).sum::<f64>())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyRatio {
    /// `f64::INFINITY` when no recovery energy is needed.
    #[serde(serialize_with = "ser_inf", deserialize_with = "de_inf")]
    pub r_e: f64,
    pub feasible: bool,
}

pub fn energy_ratio(e_avail: f64, e_min: f64) -> EnergyRatio {
    let r_e = if e_min > 0.0 { e_avail / e_min } else { f64::INFINITY };
    EnergyRatio { r_e, feasible: r_e >= 1.0 }
}

fn ser_inf<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_none()
    }
}

fn de_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GramianReport {
    pub w: [[f64; 6]; 6],
    pub w_recovery: [[f64; 6]; 6],
    pub eig_min: f64,
    pub eig_max: f64,
    pub e_min: f64,
    pub e_avail: f64,
    #[serde(serialize_with = "ser_inf", deserialize_with = "de_inf")]
    pub r_e: f64,
    pub feasible: bool,
    pub singular: bool,
    pub tau2: f64,
    pub t_rec: f64,
    pub xi_plus: Vec6,
    /// Outage length over the mission time, when known.
    pub normalized_outage: Option<f64>,
}

fn to_rows(m: &Matrix6<f64>) -> [[f64; 6]; 6] {
    let mut r = [[0.0; 6]; 6];
    for (i, row) in r.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = m[(i, j)];
        }
    }
    r
}

/// Full diagnostic for a given post-outage deviation.
pub fn recovery_report(
    model: &OrbitModel,
    reference: &PiecewiseTrajectory,
    tau2: f64,
    t_rec: f64,
    xi_plus: &Vec6,
    u_bar: &Vec3,
    opts: &GramianOptions,
) -> Result<GramianReport> {
    let g = gramians(model, reference, tau2, t_rec, opts)?;
    let eig = SymmetricEigen::new(g.forward).eigenvalues;
    let me = min_energy(&g.recovery, xi_plus)?;
    let e_avail = available_energy(u_bar, t_rec)?;
    let ratio = energy_ratio(e_avail, me.e_min);
    Ok(GramianReport {
        w: to_rows(&g.forward),
        w_recovery: to_rows(&g.recovery),
        eig_min: eig.min(),
        eig_max: eig.max(),
        e_min: me.e_min,
        e_avail,
        r_e: ratio.r_e,
        feasible: ratio.feasible,
        singular: me.singular,
        tau2,
        t_rec,
        xi_plus: *xi_plus,
        normalized_outage: None,
    })
}

/// Coasts from `τ1` to `τ2` off the reference, then runs the diagnostic.
/// `t_rec` defaults to the rest of the horizon.
pub fn recovery_after_outage(
    model: &OrbitModel,
    reference: &PiecewiseTrajectory,
    tau1: f64,
    tau2: f64,
    t_rec: Option<f64>,
    u_bar: &Vec3,
    opts: &GramianOptions,
) -> Result<GramianReport> {
    let samples = ((tau2 - tau1) / reference.segment_duration() * reference.steps_per_segment as f64).ceil() as usize;
    let dev = coasting_deviation(model, reference, tau1, tau2, samples.max(1))?;
    let xi_plus = dev.last().map(|s| s.deviation()).unwrap_or([0.0; 6]);
    let t_rec = t_rec.unwrap_or(reference.t_final - tau2);
    let mut rep = recovery_report(model, reference, tau2, t_rec, &xi_plus, u_bar, opts)?;
    let mission = reference.t_final - reference.t0;
    if mission > 0.0 {
        rep.normalized_outage = Some((tau2 - tau1) / mission);
    }
    Ok(rep)
}
