//! Augmented-Lagrangian NLP solver with a projected Newton inner loop.

use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::Vec3;
use crate::error::{Error, Result};
use crate::transcription::NlpProblem;

const PROGRESS: f64 = 0.5;
const MULTIPLIER_BOUND: f64 = 1e12;

/// Coordinate-format sparse matrix.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for &(r, c, v) in &self.entries {
            d[r][c] += v;
        }
        d
    }
}

/// Smooth NLP `min f(z)` s.t. `c_E(z) = 0`, `c_I(z) ≤ 0`, `lo ≤ z ≤ hi`.
pub trait Nlp {
    fn num_variables(&self) -> usize;
    fn num_constraints(&self) -> usize;
    fn variable_bounds(&self) -> (Vec<f64>, Vec<f64>);
    /// `true` for rows of the form `c(z) ≤ 0`.
    fn inequality_rows(&self) -> Vec<bool>;
    fn objective(&self, z: &[f64]) -> Result<f64>;
    fn objective_gradient(&self, z: &[f64]) -> Result<Vec<f64>>;
    /// Objective Hessian; entries may repeat and are summed.
    fn objective_hessian(&self, z: &[f64]) -> Result<SparseMatrix>;
    fn constraints(&self, z: &[f64]) -> Result<Vec<f64>>;
    fn constraint_jacobian(&self, z: &[f64]) -> Result<SparseMatrix>;
    /// Per-row constraint Hessians, if available; otherwise the solver uses
    /// a Gauss-Newton model.
    fn constraint_hessians(&self, _z: &[f64]) -> Result<Option<RowHessians>> {
        Ok(None)
    }
}

/// Dense Hessians of a run of consecutive rows sharing one variable support.
#[derive(Clone, Debug, PartialEq)]
pub struct HessianBlock {
    pub row0: usize,
    pub vars: Vec<usize>,
    /// One row-major `vars.len()²` matrix per row.
    pub rows: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowHessians {
    pub blocks: Vec<HessianBlock>,
}

impl RowHessians {
    /// `Σ w_i ∇²c_i` as coordinate entries.
    pub fn combine(&self, w: &[f64]) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            let nv = b.vars.len();
            let mut acc = vec![0.0; nv * nv];
            for (r, h) in b.rows.iter().enumerate() {
                let wr = w[b.row0 + r];
                if wr != 0.0 {
                    acc.iter_mut().zip(h).for_each(|(a, v)| *a += wr * v);
                }
            }
            for i in 0..nv {
                for j in 0..nv {
                    let v = acc[i * nv + j];
                    if v != 0.0 {
                        out.push((b.vars[i], b.vars[j], v));
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolveOptions {
    pub max_outer_iterations: usize,
    pub max_inner_iterations: usize,
    /// Scaled ∞-norm of the constraint violation.
    pub constraint_tolerance: f64,
    /// Scaled ∞-norm of the projected Lagrangian gradient.
    pub stationarity_tolerance: f64,
    pub initial_penalty: f64,
    pub penalty_growth: f64,
    pub max_penalty: f64,
    /// Inner iterations between constraint-Hessian refreshes.
    pub curvature_refresh: usize,
    pub seed: u64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            max_outer_iterations: 60,
            max_inner_iterations: 300,
            constraint_tolerance: 1e-8,
            stationarity_tolerance: 1e-6,
            initial_penalty: 10.0,
            penalty_growth: 10.0,
            max_penalty: 1e12,
            curvature_refresh: 5,
            seed: 0,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.constraint_tolerance > 0.0 && self.stationarity_tolerance > 0.0) {
            return Err(Error::Config("tolerances must be > 0".into()));
        }
        if !(self.penalty_growth > 1.0) || !(self.initial_penalty > 0.0) {
            return Err(Error::Config("need initial_penalty > 0 and penalty_growth > 1".into()));
        }
        if self.max_outer_iterations == 0 || self.max_inner_iterations == 0 || self.curvature_refresh == 0 {
            return Err(Error::Config("iteration limits and curvature_refresh must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Converged,
    MaxIter,
    Diverged,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub status: SolveStatus,
    pub objective: f64,
    pub max_violation: f64,
    pub stationarity: f64,
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub wall_time_s: f64,
    /// Violation at each outer iteration that updated the multipliers.
    pub accepted_violations: Vec<f64>,
    /// Rows with the largest (or non-finite) residuals when diverged.
    pub offending_rows: Vec<usize>,
}

/// Problem with slacks appended for the inequality rows: `c_I(z) + s = 0`.
struct Slacked<'a, P: Nlp> {
    p: &'a P,
    n: usize,
    m: usize,
    slack_of: Vec<Option<usize>>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

struct Eval {
    f: f64,
    gf: DVector<f64>,
    hf: Vec<(usize, usize, f64)>,
    c: DVector<f64>,
    jac: Vec<(usize, usize, f64)>,
}

impl<'a, P: Nlp> Slacked<'a, P> {
    fn new(p: &'a P) -> Self {
        let n = p.num_variables();
        let m = p.num_constraints();
        let ineq = p.inequality_rows();
        let (mut lo, mut hi) = p.variable_bounds();
        let mut slack_of = vec![None; m];
        let mut ns = 0;
        for (i, &q) in ineq.iter().enumerate() {
            if q {
                slack_of[i] = Some(n + ns);
                ns += 1;
                lo.push(0.0);
                hi.push(f64::INFINITY);
            }
        }
        Self { p, n, m, slack_of, lo, hi }
    }

    fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Values only; derivatives are filled by [`Self::differentiate`].
    fn eval(&self, y: &[f64]) -> Result<Eval> {
        let z = &y[..self.n];
        let f = self.p.objective(z)?;
        let mut c = DVector::from_vec(self.p.constraints(z)?);
        for (i, s) in self.slack_of.iter().enumerate() {
            if let Some(j) = *s {
                c[i] += y[j];
            }
        }
        if !f.is_finite() || c.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step: 0, t: f64::NAN });
        }
        Ok(Eval { f, gf: DVector::zeros(0), hf: Vec::new(), c, jac: Vec::new() })
    }

    fn differentiate(&self, y: &[f64], e: &mut Eval) -> Result<()> {
        let z = &y[..self.n];
        let mut gf = self.p.objective_gradient(z)?;
        gf.resize(self.dim(), 0.0);
        e.gf = DVector::from_vec(gf);
        e.hf = self.p.objective_hessian(z)?.entries;
        let mut jac = self.p.constraint_jacobian(z)?.entries;
        for (i, s) in self.slack_of.iter().enumerate() {
            if let Some(j) = *s {
                jac.push((i, j, 1.0));
            }
        }
        e.jac = jac;
        Ok(())
    }

    /// Gradient of the augmented Lagrangian for multipliers `lam`.
    fn al_gradient(&self, e: &Eval, lam: &DVector<f64>, mu: f64) -> DVector<f64> {
        let mut g = e.gf.clone();
        for &(r, c, v) in &e.jac {
            g[c] += v * (lam[r] + mu * e.c[r]);
        }
        g
    }

    fn project(&self, y: &mut [f64]) {
        for i in 0..y.len() {
            y[i] = y[i].clamp(self.lo[i], self.hi[i]);
        }
    }

    fn projected_gradient_norm(&self, y: &[f64], g: &DVector<f64>) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..y.len() {
            let t = (y[i] - g[i]).clamp(self.lo[i], self.hi[i]);
            worst = worst.max((t - y[i]).abs());
        }
        worst
    }

    /// Violation of the original constraints (slacks removed).
    fn violation(&self, y: &[f64], e: &Eval) -> (f64, Vec<usize>) {
        let mut worst: f64 = 0.0;
        let mut rows: Vec<(usize, f64)> = Vec::new();
        for i in 0..self.m {
            let v = match self.slack_of[i] {
                Some(j) => (e.c[i] - y[j]).max(0.0),
                None => e.c[i].abs(),
            };
            worst = worst.max(v);
            rows.push((i, v));
        }
        rows.sort_by(|a, b| b.1.total_cmp(&a.1));
        (worst, rows.iter().take(10).map(|r| r.0).collect())
    }
}

fn merit(e: &Eval, lam: &DVector<f64>, mu: f64) -> f64 {
    e.f + lam.dot(&e.c) + 0.5 * mu * e.c.norm_squared()
}

/// Projected Newton direction on `∇²f + ∇²(wᵀc) + μJᵀJ + damping·I`. Variables pinned
/// by equal bounds never move; a variable at a bound whose step points
/// outward is fixed and the reduced system re-solved.
fn newton_direction<P: Nlp>(
    sp: &Slacked<'_, P>,
    y: &[f64],
    g: &DVector<f64>,
    e: &Eval,
    curv: &[(usize, usize, f64)],
    mu: f64,
    damping: f64,
) -> DVector<f64> {
    let dim = sp.dim();
    let tol = 1e-12;
    let at_lo = |i: usize| y[i] <= sp.lo[i] + tol;
    let at_hi = |i: usize| y[i] >= sp.hi[i] - tol;
    let mut fixed: Vec<bool> = (0..dim)
        .map(|i| sp.hi[i] - sp.lo[i] <= tol || (at_lo(i) && g[i] > 0.0) || (at_hi(i) && g[i] < 0.0))
        .collect();
    let mut d = DVector::<f64>::zeros(dim);
    for _ in 0..dim.min(20) + 1 {
        let free: Vec<usize> = (0..dim).filter(|&i| !fixed[i]).collect();
        d.fill(0.0);
        match reduced_solve(sp.m, &free, g, e, curv, mu, damping) {
            Some(df) => {
                for (k, &i) in free.iter().enumerate() {
                    d[i] = df[k];
                }
            }
            None => {
                for &i in &free {
                    d[i] = -g[i];
                }
            }
        }
        let mut changed = false;
        for &i in &free {
            if (at_lo(i) && d[i] < 0.0) || (at_hi(i) && d[i] > 0.0) {
                fixed[i] = true;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    d
}

/// Solves the free-variable block of the Newton system by Cholesky,
/// growing the diagonal shift until the factorization succeeds.
fn reduced_solve(
    m: usize,
    free: &[usize],
    g: &DVector<f64>,
    e: &Eval,
    curv: &[(usize, usize, f64)],
    mu: f64,
    damping: f64,
) -> Option<DVector<f64>> {
    let nf = free.len();
    if nf == 0 {
        return Some(DVector::zeros(0));
    }
    let mut pos = vec![usize::MAX; g.len()];
    for (k, &i) in free.iter().enumerate() {
        pos[i] = k;
    }
    let mut h = DMatrix::<f64>::zeros(nf, nf);
    for &(r, c, v) in e.hf.iter().chain(curv) {
        if pos[r] != usize::MAX && pos[c] != usize::MAX {
            h[(pos[r], pos[c])] += v;
        }
    }
    let mut by_row: Vec<Vec<(usize, f64)>> = vec![Vec::new(); m];
    for &(r, c, v) in &e.jac {
        if pos[c] != usize::MAX && v != 0.0 {
            by_row[r].push((pos[c], v));
        }
    }
    for row in &by_row {
        for &(a, va) in row {
            for &(b, vb) in row {
                h[(a, b)] += mu * va * vb;
            }
        }
    }
    let rhs = DVector::from_iterator(nf, free.iter().map(|&i| -g[i]));
    let diag_scale = (0..nf).map(|i| h[(i, i)].abs()).fold(1e-300, f64::max);
    let mut shift = damping * diag_scale.max(1.0);
    for _ in 0..12 {
        let mut hr = h.clone();
        for i in 0..nf {
            hr[(i, i)] += shift;
        }
        if let Some(ch) = hr.cholesky() {
            let d = ch.solve(&rhs);
            if d.iter().all(|v| v.is_finite()) {
                return Some(d);
            }
        }
        shift = if shift == 0.0 { 1e-12 * diag_scale } else { shift * 100.0 };
    }
    None
}

/// Augmented-Lagrangian solve from `z0`. Deterministic given `(z0, opts)`.
pub fn solve<P: Nlp>(problem: &P, z0: &[f64], opts: &SolveOptions) -> Result<(Vec<f64>, SolveReport)> {
    opts.validate()?;
    let start = Instant::now();
    let sp = Slacked::new(problem);
    if z0.len() != sp.n {
        return Err(Error::InvalidInput(format!("z0 has length {}, expected {}", z0.len(), sp.n)));
    }
    let dim = sp.dim();
    let mut y = z0.to_vec();
    y.resize(dim, 0.0);
    sp.project(&mut y);

    let mut report = SolveReport {
        status: SolveStatus::MaxIter,
        objective: f64::NAN,
        max_violation: f64::INFINITY,
        stationarity: f64::INFINITY,
        outer_iterations: 0,
        inner_iterations: 0,
        wall_time_s: 0.0,
        accepted_violations: Vec::new(),
        offending_rows: Vec::new(),
    };
    let diverged = |y: &[f64], mut report: SolveReport, rows: Vec<usize>| {
        report.status = SolveStatus::Diverged;
        report.offending_rows = rows;
        report.wall_time_s = start.elapsed().as_secs_f64();
        Ok((y[..sp.n].to_vec(), report))
    };

    let mut e = match sp.eval(&y) {
        Ok(e) => e,
        Err(_) => return diverged(&y, report, Vec::new()),
    };
    for (i, s) in sp.slack_of.iter().enumerate() {
        if let Some(j) = *s {
            y[j] = (-(e.c[i] - y[j])).max(0.0);
        }
    }
    e = sp.eval(&y)?;
    sp.differentiate(&y, &mut e)?;

    let mut lam = DVector::<f64>::zeros(sp.m);
    let mut mu = opts.initial_penalty;
    let mut omega = 1.0 / mu;
    let mut damping = 1e-10;
    let mut hess: Option<RowHessians> = None;
    let mut hess_age = opts.curvature_refresh;

    for outer in 0..opts.max_outer_iterations {
        report.outer_iterations = outer + 1;
        for _ in 0..opts.max_inner_iterations {
            let g = sp.al_gradient(&e, &lam, mu);
            if sp.projected_gradient_norm(&y, &g) <= omega {
                break;
            }
            report.inner_iterations += 1;
            let w: Vec<f64> = (0..sp.m).map(|i| lam[i] + mu * e.c[i]).collect();
            if hess_age >= opts.curvature_refresh {
                hess = sp.p.constraint_hessians(&y[..sp.n])?;
                hess_age = 0;
            }
            hess_age += 1;
            let curv = hess.as_ref().map(|h| h.combine(&w)).unwrap_or_default();
            let mut d = newton_direction(&sp, &y, &g, &e, &curv, mu, damping);
            if g.dot(&d) >= 0.0 {
                d = -g.clone();
            }
            let phi0 = merit(&e, &lam, mu);
            // decreases below this are roundoff in the merit value
            let noise = 100.0 * f64::EPSILON * (1.0 + phi0.abs());
            let mut alpha = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let mut yt: Vec<f64> = y.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect();
                sp.project(&mut yt);
                let slope: f64 = g.iter().zip(yt.iter().zip(&y)).map(|(gi, (a, b))| gi * (a - b)).sum();
                if slope < 0.0 {
                    if let Ok(et) = sp.eval(&yt) {
                        if merit(&et, &lam, mu) <= phi0 + 1e-4 * slope + noise {
                            accepted = Some((yt, et));
                            break;
                        }
                    }
                }
                alpha *= 0.5;
            }
            let Some((yn, en)) = accepted else {
                damping = (damping * 100.0).min(1.0);
                hess_age = opts.curvature_refresh;
                break;
            };
            damping = if alpha == 1.0 { (damping * 0.1).max(1e-12) } else { (damping * 10.0).min(1.0) };
            y = yn;
            e = en;
            sp.differentiate(&y, &mut e)?;
        }

        let (viol, rows) = sp.violation(&y, &e);
        let w = &lam + &e.c * mu;
        let stat = sp.projected_gradient_norm(&y, &sp.al_gradient(&e, &lam, mu));
        report.objective = e.f;
        report.max_violation = viol;
        report.stationarity = stat;
        report.offending_rows = rows;
        if !viol.is_finite() {
            let rows = report.offending_rows.clone();
            return diverged(&y, report, rows);
        }
        if viol <= opts.constraint_tolerance && stat <= opts.stationarity_tolerance {
            report.status = SolveStatus::Converged;
            break;
        }
        // first-order multiplier update, safeguarded; the penalty grows only
        // when the violation fails to shrink by `PROGRESS`
        lam = w.map(|v| v.clamp(-MULTIPLIER_BOUND, MULTIPLIER_BOUND));
        let prev = report.accepted_violations.last().copied().unwrap_or(f64::INFINITY);
        if viol <= PROGRESS * prev || viol <= opts.constraint_tolerance.min(prev) {
            report.accepted_violations.push(viol);
        } else if viol > opts.constraint_tolerance {
            mu = (mu * opts.penalty_growth).min(opts.max_penalty);
        }
        omega = (omega * 0.1).max(0.1 * opts.stationarity_tolerance);
    }

    // fresh evaluation backs the reported numbers
    let z: Vec<f64> = y[..sp.n].to_vec();
    let c = problem.constraints(&z)?;
    let ineq = problem.inequality_rows();
    let viol = c
        .iter()
        .zip(&ineq)
        .map(|(v, &q)| if q { v.max(0.0) } else { v.abs() })
        .fold(0.0, f64::max);
    report.max_violation = viol;
    report.objective = problem.objective(&z)?;
    if report.status == SolveStatus::Converged && viol > opts.constraint_tolerance {
        report.status = SolveStatus::MaxIter;
    }
    if report.status != SolveStatus::Diverged {
        report.offending_rows.clear();
    }
    report.wall_time_s = start.elapsed().as_secs_f64();
    Ok((z, report))
}

/// Random start: uniform leader controls inside the thrust box at the
/// nominal flight time, forward-simulated; the follower copies the mapped
/// leader controls off the outage, and costates come from back-substitution.
pub fn initialize<R: Rng>(problem: &NlpProblem, rng: &mut R) -> Result<Vec<f64>> {
    let c = &problem.config;
    let tm = c.thrust_max;
    let u: Vec<Vec3> = (0..c.n_leader).map(|_| [0, 1, 2].map(|_| rng.gen_range(-tm..=tm))).collect();
    problem.simulate_point(c.t_guess, &u, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    /// Scaled decision vector.
    pub z: Vec<f64>,
    pub report: SolveReport,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut c = self.clone();
        for v in [&mut c.report.objective, &mut c.report.max_violation, &mut c.report.stationarity] {
            if !v.is_finite() {
                *v = f64::MAX;
            }
        }
        std::fs::write(path, serde_json::to_string_pretty(&c)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::OrbitModel;
    use crate::propagation::{flow_with_stm, IntegratorConfig, PiecewiseTrajectory};
    use crate::transcription::{build_problem, TranscriptionConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `min ½‖z − a‖²` with optional linear equality `Σz = 1` and box bounds.
    struct Quad {
        a: Vec<f64>,
        lo: Vec<f64>,
        hi: Vec<f64>,
        sum_row: bool,
        ineq_row: Option<f64>,
    }

    impl Nlp for Quad {
        fn num_variables(&self) -> usize {
            self.a.len()
        }
        fn num_constraints(&self) -> usize {
            self.sum_row as usize + self.ineq_row.is_some() as usize
        }
        fn variable_bounds(&self) -> (Vec<f64>, Vec<f64>) {
            (self.lo.clone(), self.hi.clone())
        }
        fn inequality_rows(&self) -> Vec<bool> {
            let mut v = Vec::new();
            if self.sum_row {
                v.push(false);
            }
            if self.ineq_row.is_some() {
                v.push(true);
            }
            v
        }
        fn objective(&self, z: &[f64]) -> Result<f64> {
            Ok(0.5 * z.iter().zip(&self.a).map(|(x, a)| (x - a).powi(2)).sum::<f64>())
        }
        fn objective_gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
            Ok(z.iter().zip(&self.a).map(|(x, a)| x - a).collect())
        }
        fn objective_hessian(&self, z: &[f64]) -> Result<SparseMatrix> {
            let n = z.len();
            Ok(SparseMatrix { nrows: n, ncols: n, entries: (0..n).map(|i| (i, i, 1.0)).collect() })
        }
        fn constraints(&self, z: &[f64]) -> Result<Vec<f64>> {
            let mut c = Vec::new();
            if self.sum_row {
                c.push(z.iter().sum::<f64>() - 1.0);
            }
            if let Some(cap) = self.ineq_row {
                c.push(z[0] - cap);
            }
            Ok(c)
        }
        fn constraint_jacobian(&self, z: &[f64]) -> Result<SparseMatrix> {
            let mut e = Vec::new();
            let mut r = 0;
            if self.sum_row {
                e.extend((0..z.len()).map(|i| (0, i, 1.0)));
                r += 1;
            }
            if self.ineq_row.is_some() {
                e.push((r, 0, 1.0));
            }
            Ok(SparseMatrix { nrows: self.num_constraints(), ncols: z.len(), entries: e })
        }
    }

    #[test]
    fn box_constrained_quadratic_projects() {
        let q = Quad {
            a: vec![2.0, -3.0, 0.5, 0.0],
            lo: vec![-1.0; 4],
            hi: vec![1.0; 4],
            sum_row: false,
            ineq_row: None,
        };
        let (z, rep) = solve(&q, &[0.0; 4], &SolveOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged);
        for (zi, e) in z.iter().zip([1.0, -1.0, 0.5, 0.0]) {
            assert!((zi - e).abs() < 1e-6);
        }
    }

    #[test]
    fn equality_quadratic_is_symmetric() {
        let q = Quad {
            a: vec![0.0; 5],
            lo: vec![f64::NEG_INFINITY; 5],
            hi: vec![f64::INFINITY; 5],
            sum_row: true,
            ineq_row: None,
        };
        let (z, rep) = solve(&q, &[0.7, -0.1, 0.0, 0.3, 2.0], &SolveOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged);
        assert!(rep.max_violation <= 1e-8 && rep.stationarity <= 1e-6);
        for zi in &z {
            assert!((zi - 0.2).abs() < 1e-6);
        }
        let w = rep.accepted_violations.windows(2).all(|w| w[1] <= w[0]);
        assert!(w);
    }

    #[test]
    fn inequality_through_slack() {
        let q = Quad {
            a: vec![3.0, 1.0],
            lo: vec![f64::NEG_INFINITY; 2],
            hi: vec![f64::INFINITY; 2],
            sum_row: false,
            ineq_row: Some(1.5),
        };
        let (z, rep) = solve(&q, &[0.0, 0.0], &SolveOptions::default()).unwrap();
        assert_eq!(rep.status, SolveStatus::Converged);
        assert!((z[0] - 1.5).abs() < 1e-6 && (z[1] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_options_and_lengths() {
        let q = Quad { a: vec![0.0], lo: vec![-1.0], hi: vec![1.0], sum_row: false, ineq_row: None };
        let bad = SolveOptions { penalty_growth: 1.0, ..Default::default() };
        assert!(matches!(solve(&q, &[0.0], &bad), Err(Error::Config(_))));
        assert!(matches!(solve(&q, &[0.0, 1.0], &SolveOptions::default()), Err(Error::InvalidInput(_))));
    }

    fn four_segment_rendezvous() -> NlpProblem {
        let cfg = TranscriptionConfig {
            n_leader: 4,
            steps_per_segment: 20,
            t_bounds: [9000.0, 9000.0],
            t_guess: 9000.0,
            ..Default::default()
        };
        build_problem(&OrbitModel::standard_circular(), None, &cfg).unwrap()
    }

    #[test]
    fn leader_only_rendezvous_matches_simulation() {
        let p = four_segment_rendezvous();
        let z0 = p.simulate_point(9000.0, &[[0.0; 3]; 4], None).unwrap();
        let (z, rep) = solve(&p, &z0, &SolveOptions::default()).unwrap();
        assert!(rep.max_violation <= 1e-8, "{rep:?}");
        let dv = p.from_scaled(&z).unwrap();
        let sim = PiecewiseTrajectory::simulate(&p.model, &p.config.x0, 0.0, dv.t_dag, &dv.u_dag, 20).unwrap();
        let end = sim.nodes.last().unwrap();
        // first-order propagation of the node defects to the final time
        let cfg = IntegratorConfig { steps_per_segment: 20, ..Default::default() };
        let h = dv.t_dag / 4.0;
        let mut bound = [0.0; 6];
        let mut carry = nalgebra::Matrix6::<f64>::identity();
        for k in (0..4).rev() {
            let fr = flow_with_stm(&p.model, &dv.x_dag[k], &dv.u_dag[k], k as f64 * h, (k + 1) as f64 * h, &cfg).unwrap();
            for i in 0..6 {
                for j in 0..6 {
                    bound[i] += carry[(i, j)].abs() * (dv.x_dag[k + 1][j] - fr.x_end[j]).abs();
                }
            }
            carry *= fr.stm.unwrap();
        }
        for i in 0..6 {
            for j in 0..6 {
                bound[i] += carry[(i, j)].abs() * (dv.x_dag[0][j] - p.config.x0[j]).abs();
            }
        }
        for i in 0..6 {
            let tol = 1.1 * (bound[i] + (dv.x_dag[4][i] - p.config.x1[i]).abs()) + 1e-14;
            assert!((end[i] - p.config.x1[i]).abs() <= tol, "component {i}: {} > {tol}", (end[i] - p.config.x1[i]).abs());
        }
    }

    #[test]
    fn solve_is_deterministic_and_checkpoints() {
        let p = four_segment_rendezvous();
        let z0 = p.simulate_point(9000.0, &[[1e-7, 0.0, -2e-7]; 4], None).unwrap();
        let opts = SolveOptions { max_outer_iterations: 5, ..Default::default() };
        let (a, ra) = solve(&p, &z0, &opts).unwrap();
        let (b, rb) = solve(&p, &z0, &opts).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.max_violation, rb.max_violation);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let ck = Checkpoint { z: a.clone(), report: ra };
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.z, a);
        assert_eq!(back.report.status, ck.report.status);
    }

    #[test]
    fn initialize_is_seeded_and_consistent() {
        let cfg = TranscriptionConfig { n_leader: 4, steps_per_segment: 20, ..Default::default() };
        let s = crate::transcription::MteScenario::new(4, 1, 1).unwrap();
        let p = build_problem(&OrbitModel::standard_circular(), Some(&s), &cfg).unwrap();
        let a = initialize(&p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = initialize(&p, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, b);
        let c = initialize(&p, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_ne!(a, c);
        for blk in &p.blocks {
            if matches!(
                blk.kind,
                crate::transcription::BlockKind::LeaderContinuity(_) | crate::transcription::BlockKind::FollowerContinuity(_)
            ) {
                let r = p.eval_block(&a, blk.kind).unwrap();
                assert!(r.iter().all(|v| v.abs() <= 1e-12));
            }
        }
    }
}
