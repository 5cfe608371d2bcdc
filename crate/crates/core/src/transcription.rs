//! Multiple-shooting transcription of the leader/follower problem into a
//! single-level NLP.
//!
//! The leader (reference) and the follower (realization) share the clock
//! `[0, T]`. Follower nodes sit at `k·T/N^ω`; on `k ≤ m0` the follower is
//! pinned to the reference, the thrust outage covers segments `m0..=m1`, and
//! afterwards the follower obeys the first-order conditions of its tracking
//! problem.
//!
//! Row order:
//!
//! | block | rows |
//! |---|---|
//! | leader initial | 6 |
//! | leader continuity | 6·N† |
//! | leader terminal | 6 |
//! | leader obstacles (≤ 0) | n_obs·(N†+1) |
//! | follower time link (unless free) | 1 |
//! | branch, `k = 0..=m0` | 6·(m0+1) |
//! | pre-branch control pins, `k < m0` | 3·m0 |
//! | follower continuity, `k = m0..N` | 6·(N−m0) |
//! | follower terminal | 6 |
//! | outage, `k ∈ M` | 3·|M| |
//! | follower obstacles (≤ 0) | n_obs·(N+1) |
//! | stationarity, `k = m1+1..N` | 3·(N−1−m1) |
//! | costate, `k = m0..N` | 6·(N−m0) |
//! | transversality | 6 |
//! | costate pins, `k < m0` | 6·m0 |
//!
//! All rows and variables are scaled: positions in km, velocities times the
//! time scale, controls divided by the thrust limit, times divided by the
//! time scale. Costates are duals of the scaled continuity defects.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::ad::{jacobian_local, Dual, Scalar, CHUNK};
use crate::dynamics::{OrbitModel, Vec3, Vec6};
use crate::error::{Error, Result};
use crate::propagation::{rk4_segment, rk4_segment_sensitivity, PiecewiseTrajectory};
use crate::solver::{HessianBlock, Nlp, RowHessians, SparseMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: Vec3,
    pub radius: f64,
}

/// Problem data shared by every realization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranscriptionConfig {
    pub n_leader: usize,
    pub steps_per_segment: usize,
    pub x0: Vec6,
    pub x1: Vec6,
    pub q: [[f64; 6]; 6],
    pub r: [[f64; 3]; 3],
    pub qf: [[f64; 6]; 6],
    /// Per-component thrust acceleration limit, km/s².
    pub thrust_max: f64,
    pub obstacles: Vec<Obstacle>,
    pub state_lower: Option<Vec6>,
    pub state_upper: Option<Vec6>,
    /// Flight-time bounds, s.
    pub t_bounds: [f64; 2],
    pub t_guess: f64,
    /// Defaults to `t_guess`.
    pub time_scale: Option<f64>,
    pub w_t: f64,
    pub w_u: f64,
    /// Smoothing of the fuel norm, in units of the thrust limit.
    pub fuel_smoothing: f64,
    pub free_follower_time: bool,
    /// Constant multiplying the follower cost. It leaves the follower
    /// optimum unchanged and sets the size of the costates.
    pub follower_cost_scale: f64,
}

/// `v·I₆` as nested arrays.
pub fn diag6(v: f64) -> [[f64; 6]; 6] {
    let mut m = [[0.0; 6]; 6];
    for (i, row) in m.iter_mut().enumerate() {
        row[i] = v;
    }
    m
}

impl Default for TranscriptionConfig {
    fn default() -> Self {
        let h = 0.5f64.sqrt();
        Self {
            n_leader: 50,
            steps_per_segment: 100,
            x0: [h, 0.0, h, 0.0, 0.0, 0.0],
            x1: [0.0; 6],
            q: diag6(1.0),
            r: [[0.1, 0.0, 0.0], [0.0, 0.1, 0.0], [0.0, 0.0, 0.1]],
            qf: diag6(10.0),
            thrust_max: 1e-6,
            obstacles: Vec::new(),
            state_lower: None,
            state_upper: None,
            t_bounds: [2000.0, 12000.0],
            t_guess: 9000.0,
            time_scale: None,
            w_t: 0.0,
            w_u: 1.0,
            fuel_smoothing: 1e-3,
            free_follower_time: false,
            follower_cost_scale: 1e-2,
        }
    }
}

impl TranscriptionConfig {
    pub fn time_scale(&self) -> f64 {
        self.time_scale.unwrap_or(self.t_guess)
    }
}

/// A single outage realization on the follower grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MteScenario {
    pub n_follower: usize,
    /// Disabled follower segments, contiguous and ascending.
    pub m_om: Vec<usize>,
}

impl MteScenario {
    pub fn new(n_follower: usize, first: usize, count: usize) -> Result<Self> {
        let s = Self { n_follower, m_om: (first..first + count).collect() };
        s.validate()?;
        Ok(s)
    }

    /// Segments whose span overlaps `[tau1, tau1 + dtau]` on a horizon `t_om`.
    pub fn from_window(n_follower: usize, t_om: f64, tau1: f64, dtau: f64) -> Result<Self> {
        let h = t_om / n_follower as f64;
        let tau2 = tau1 + dtau;
        let m_om: Vec<usize> = (0..n_follower)
            .filter(|&k| {
                let (a, b) = (k as f64 * h, (k + 1) as f64 * h);
                a < tau2 && b > tau1
            })
            .collect();
        let s = Self { n_follower, m_om };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_follower == 0 {
            return Err(Error::Config("follower needs at least one segment".into()));
        }
        if self.m_om.is_empty() {
            return Err(Error::Config("outage set is empty".into()));
        }
        if self.m_om.windows(2).any(|w| w[1] != w[0] + 1) {
            return Err(Error::Config(format!("outage segments {:?} are not contiguous", self.m_om)));
        }
        if *self.m_om.last().unwrap() >= self.n_follower {
            return Err(Error::Config(format!(
                "outage segment {} out of range 0..{}",
                self.m_om.last().unwrap(),
                self.n_follower
            )));
        }
        Ok(())
    }

    pub fn first(&self) -> usize {
        self.m_om[0]
    }

    pub fn last(&self) -> usize {
        *self.m_om.last().unwrap()
    }

    pub fn contains(&self, k: usize) -> bool {
        k >= self.first() && k <= self.last()
    }

    /// Active (thrusting) follower segments.
    pub fn available(&self) -> Vec<usize> {
        (0..self.n_follower).filter(|&k| !self.contains(k)).collect()
    }

    pub fn tau1(&self, t_om: f64) -> f64 {
        self.first() as f64 * t_om / self.n_follower as f64
    }

    pub fn dtau(&self, t_om: f64) -> f64 {
        self.m_om.len() as f64 * t_om / self.n_follower as f64
    }
}

/// Leader segment nearest to follower segment `k_om` by midpoint time; ties
/// go to the earlier segment.
pub fn segment_map(k_om: usize, n_om: usize, n_dag: usize, t_om: f64, t_dag: f64) -> usize {
    let mid = (k_om as f64 + 0.5) * (t_om / n_om as f64);
    let x = mid / (t_dag / n_dag as f64) - 0.5;
    let j = (x - 0.5).ceil();
    j.clamp(0.0, (n_dag - 1) as f64) as usize
}

/// Follower segment count: `N† − |M|` unless overridden.
pub fn adaptive_segments(outage_len: usize, n_dag: usize, override_n: Option<usize>) -> Result<usize> {
    let n = match override_n {
        Some(n) => n as i64,
        None => n_dag as i64 - outage_len as i64,
    };
    if n <= 0 {
        return Err(Error::Config(format!("follower segment count {n} must be positive")));
    }
    Ok(n as usize)
}

/// Offsets of the flat decision vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub n_dag: usize,
    /// `None` for leader-only problems.
    pub n_om: Option<usize>,
}

impl Layout {
    pub fn t_dag(&self) -> usize {
        0
    }
    pub fn x_dag(&self, k: usize) -> usize {
        1 + 6 * k
    }
    pub fn u_dag(&self, k: usize) -> usize {
        1 + 6 * (self.n_dag + 1) + 3 * k
    }
    fn follower_base(&self) -> usize {
        1 + 6 * (self.n_dag + 1) + 3 * self.n_dag
    }
    pub fn t_om(&self) -> usize {
        self.follower_base()
    }
    pub fn x_om(&self, k: usize) -> usize {
        self.follower_base() + 1 + 6 * k
    }
    pub fn u_om(&self, k: usize) -> usize {
        self.follower_base() + 1 + 6 * (self.n_om.unwrap() + 1) + 3 * k
    }
    pub fn lam(&self, k: usize) -> usize {
        let n = self.n_om.unwrap();
        self.follower_base() + 1 + 6 * (n + 1) + 3 * n + 6 * k
    }
    /// Group label of variable `i`, e.g. `x_dag[3]` or `lam[0]`.
    pub fn variable_group(&self, i: usize) -> String {
        let fb = self.follower_base();
        if i == 0 {
            return "t_dag".into();
        }
        if i < self.u_dag(0) {
            return format!("x_dag[{}]", (i - 1) / 6);
        }
        if i < fb {
            return format!("u_dag[{}]", (i - self.u_dag(0)) / 3);
        }
        if i == fb {
            return "t_om".into();
        }
        if i < self.u_om(0) {
            return format!("x_om[{}]", (i - self.x_om(0)) / 6);
        }
        if i < self.lam(0) {
            return format!("u_om[{}]", (i - self.u_om(0)) / 3);
        }
        format!("lam[{}]", (i - self.lam(0)) / 6)
    }

    pub fn len(&self) -> usize {
        match self.n_om {
            None => self.follower_base(),
            Some(n) => self.follower_base() + 1 + 6 * (n + 1) + 3 * n + 6 * (n + 1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FollowerVariables {
    pub t_om: f64,
    pub x_om: Vec<Vec6>,
    pub u_om: Vec<Vec3>,
    pub lam_om: Vec<Vec6>,
}

/// Decision variables in physical units (costates in scaled units).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionVector {
    pub t_dag: f64,
    pub x_dag: Vec<Vec6>,
    pub u_dag: Vec<Vec3>,
    pub follower: Option<FollowerVariables>,
}

impl DecisionVector {
    pub fn layout(&self) -> Layout {
        Layout { n_dag: self.u_dag.len(), n_om: self.follower.as_ref().map(|f| f.u_om.len()) }
    }

    pub fn pack(&self) -> Vec<f64> {
        let mut z = Vec::with_capacity(self.layout().len());
        z.push(self.t_dag);
        self.x_dag.iter().for_each(|x| z.extend_from_slice(x));
        self.u_dag.iter().for_each(|u| z.extend_from_slice(u));
        if let Some(f) = &self.follower {
            z.push(f.t_om);
            f.x_om.iter().for_each(|x| z.extend_from_slice(x));
            f.u_om.iter().for_each(|u| z.extend_from_slice(u));
            f.lam_om.iter().for_each(|l| z.extend_from_slice(l));
        }
        z
    }

    pub fn unpack(layout: &Layout, z: &[f64]) -> Result<Self> {
        if z.len() != layout.len() {
            return Err(Error::InvalidInput(format!(
                "decision vector has length {}, layout expects {}",
                z.len(),
                layout.len()
            )));
        }
        let v6 = |i: usize| -> Vec6 { z[i..i + 6].try_into().unwrap() };
        let v3 = |i: usize| -> Vec3 { z[i..i + 3].try_into().unwrap() };
        let n = layout.n_dag;
        let follower = layout.n_om.map(|m| FollowerVariables {
            t_om: z[layout.t_om()],
            x_om: (0..=m).map(|k| v6(layout.x_om(k))).collect(),
            u_om: (0..m).map(|k| v3(layout.u_om(k))).collect(),
            lam_om: (0..=m).map(|k| v6(layout.lam(k))).collect(),
        });
        Ok(Self {
            t_dag: z[0],
            x_dag: (0..=n).map(|k| v6(layout.x_dag(k))).collect(),
            u_dag: (0..n).map(|k| v3(layout.u_dag(k))).collect(),
            follower,
        })
    }

    pub fn leader_trajectory(&self) -> PiecewiseTrajectory {
        PiecewiseTrajectory {
            t0: 0.0,
            t_final: self.t_dag,
            nodes: self.x_dag.clone(),
            controls: self.u_dag.clone(),
            steps_per_segment: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    LeaderInitial,
    LeaderContinuity(usize),
    LeaderTerminal,
    LeaderObstacle(usize, usize),
    TimeLink,
    Branch(usize),
    ControlPin(usize),
    FollowerContinuity(usize),
    FollowerTerminal,
    Outage(usize),
    FollowerObstacle(usize, usize),
    Stationarity(usize),
    Costate(usize),
    Transversality,
    CostatePin(usize),
}

impl BlockKind {
    pub fn label(&self) -> String {
        use BlockKind::*;
        match *self {
            LeaderInitial => "leader_initial".into(),
            LeaderContinuity(k) => format!("leader_continuity[{k}]"),
            LeaderTerminal => "leader_terminal".into(),
            LeaderObstacle(k, j) => format!("leader_obstacle[{k},{j}]"),
            TimeLink => "time_link".into(),
            Branch(k) => format!("branch[{k}]"),
            ControlPin(k) => format!("control_pin[{k}]"),
            FollowerContinuity(k) => format!("follower_continuity[{k}]"),
            FollowerTerminal => "follower_terminal".into(),
            Outage(k) => format!("outage[{k}]"),
            FollowerObstacle(k, j) => format!("follower_obstacle[{k},{j}]"),
            Stationarity(k) => format!("stationarity[{k}]"),
            Costate(k) => format!("costate[{k}]"),
            Transversality => "transversality".into(),
            CostatePin(k) => format!("costate_pin[{k}]"),
        }
    }

    pub fn is_kkt(&self) -> bool {
        matches!(self, BlockKind::Stationarity(_) | BlockKind::Costate(_) | BlockKind::Transversality)
    }

    pub fn is_leader(&self) -> bool {
        matches!(
            self,
            BlockKind::LeaderInitial
                | BlockKind::LeaderContinuity(_)
                | BlockKind::LeaderTerminal
                | BlockKind::LeaderObstacle(..)
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub kind: BlockKind,
    pub row0: usize,
    pub nrows: usize,
    pub inequality: bool,
    /// Sorted, deduplicated support.
    pub vars: Vec<usize>,
}

trait Access<S> {
    fn at(&self, i: usize) -> S;
}

struct Dense<'a>(&'a [f64]);

impl Access<f64> for Dense<'_> {
    fn at(&self, i: usize) -> f64 {
        self.0[i]
    }
}

struct Local<'a, S> {
    vars: &'a [usize],
    vals: &'a [S],
}

impl<S: Scalar> Access<S> for Local<'_, S> {
    fn at(&self, i: usize) -> S {
        match self.vars.binary_search(&i) {
            Ok(p) => self.vals[p],
            Err(_) => panic!("variable {i} outside declared block support"),
        }
    }
}

fn is_sym_psd<const D: usize>(m: &[[f64; D]; D], strict: bool) -> bool {
    let mat = nalgebra::DMatrix::<f64>::from_fn(D, D, |i, j| m[i][j]);
    let scale = 1.0 + mat.amax();
    if (&mat - mat.transpose()).amax() > 1e-12 * scale {
        return false;
    }
    let ev = SymmetricEigen::new(mat).eigenvalues;
    ev.iter().all(|&e| if strict { e > 1e-12 * scale } else { e >= -1e-12 * scale })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianEntry {
    pub row: usize,
    pub col: usize,
    pub exact: f64,
    pub fd: f64,
    /// `|J − J_FD| / (1 + |J_FD|)`.
    pub e_rel: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianCheck {
    pub max_e_rel: f64,
    pub median_e_rel: f64,
    pub max_outside_pattern: f64,
    pub entries: Vec<JacobianEntry>,
}

/// The transcribed NLP. Immutable after [`build_problem`].
#[derive(Clone, Debug)]
pub struct NlpProblem {
    pub model: OrbitModel,
    pub config: TranscriptionConfig,
    pub scenario: Option<MteScenario>,
    pub layout: Layout,
    pub blocks: Vec<Block>,
    pub num_rows: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    time_scale: f64,
    pi: Vec<usize>,
}

/// Assemble the problem. `scenario = None` gives a leader-only problem.
pub fn build_problem(
    model: &OrbitModel,
    scenario: Option<&MteScenario>,
    config: &TranscriptionConfig,
) -> Result<NlpProblem> {
    model.validate()?;
    let c = config;
    if c.n_leader == 0 || c.steps_per_segment == 0 {
        return Err(Error::Config("n_leader and steps_per_segment must be >= 1".into()));
    }
    if let Some(s) = scenario {
        s.validate()?;
    }
    if !is_sym_psd(&c.q, false) || !is_sym_psd(&c.qf, false) {
        return Err(Error::Config("Q and Qf must be symmetric positive semidefinite".into()));
    }
    if !is_sym_psd(&c.r, true) {
        return Err(Error::Config("R must be symmetric positive definite".into()));
    }
    if !(c.follower_cost_scale > 0.0 && c.follower_cost_scale.is_finite()) {
        return Err(Error::Config("follower_cost_scale must be finite and > 0".into()));
    }
    if !(c.thrust_max > 0.0) {
        return Err(Error::Config("thrust_max must be > 0".into()));
    }
    let [tl, th] = c.t_bounds;
    if !(tl > 0.0 && tl <= th && c.t_guess >= tl && c.t_guess <= th) {
        return Err(Error::Config(format!("need 0 < t_lo <= t_guess <= t_hi, got {:?} / {}", c.t_bounds, c.t_guess)));
    }
    if th > model.max_elapsed() {
        return Err(Error::Config(format!(
            "t_hi = {th} s exceeds the admissible phase span ({} s)",
            model.max_elapsed()
        )));
    }
    if c.obstacles.iter().any(|o| !(o.radius >= 0.0)) {
        return Err(Error::Config("obstacle radius must be >= 0".into()));
    }
    let ts = c.time_scale();
    if !(ts > 0.0 && ts.is_finite()) {
        return Err(Error::Config("time scale must be positive".into()));
    }

    let layout = Layout { n_dag: c.n_leader, n_om: scenario.map(|s| s.n_follower) };
    let mut p = NlpProblem {
        model: model.clone(),
        config: c.clone(),
        scenario: scenario.cloned(),
        layout,
        blocks: Vec::new(),
        num_rows: 0,
        lower: Vec::new(),
        upper: Vec::new(),
        time_scale: ts,
        pi: Vec::new(),
    };
    if let Some(s) = scenario {
        p.pi = (0..s.n_follower).map(|k| segment_map(k, s.n_follower, c.n_leader, 1.0, 1.0)).collect();
    }
    p.assemble_blocks();
    p.assemble_bounds();
    Ok(p)
}

fn range(start: usize, len: usize) -> impl Iterator<Item = usize> {
    start..start + len
}

impl NlpProblem {
    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }

    pub fn n_om(&self) -> usize {
        self.layout.n_om.unwrap_or(0)
    }

    pub fn segment_map_index(&self, k: usize) -> usize {
        self.pi[k]
    }

    fn state_scale(&self, i: usize) -> f64 {
        if i < 3 {
            1.0
        } else {
            self.time_scale
        }
    }

    /// Leader node and remainder for follower node `k` (`t_k` lies
    /// `rem/N^ω` of a leader segment past node `j`).
    fn ref_index(&self, k: usize) -> (usize, usize) {
        let n_om = self.n_om();
        let num = k * self.config.n_leader;
        (num / n_om, num % n_om)
    }

    fn ref_vars(&self, k: usize) -> Vec<usize> {
        let l = &self.layout;
        let (j, rem) = self.ref_index(k);
        let mut v: Vec<usize> = range(l.x_dag(j), 6).collect();
        if rem != 0 {
            v.push(l.t_dag());
            v.extend(range(l.u_dag(j), 3));
        }
        v
    }

    fn push_block(&mut self, kind: BlockKind, nrows: usize, inequality: bool, mut vars: Vec<usize>) {
        vars.sort_unstable();
        vars.dedup();
        self.blocks.push(Block { kind, row0: self.num_rows, nrows, inequality, vars });
        self.num_rows += nrows;
    }

    fn assemble_blocks(&mut self) {
        let l = self.layout;
        let n = self.config.n_leader;
        let nobs = self.config.obstacles.len();
        self.push_block(BlockKind::LeaderInitial, 6, false, range(l.x_dag(0), 6).collect());
        for k in 0..n {
            let mut v = vec![l.t_dag()];
            v.extend(range(l.x_dag(k), 6));
            v.extend(range(l.u_dag(k), 3));
            v.extend(range(l.x_dag(k + 1), 6));
            self.push_block(BlockKind::LeaderContinuity(k), 6, false, v);
        }
        self.push_block(BlockKind::LeaderTerminal, 6, false, range(l.x_dag(n), 6).collect());
        for k in 0..=n {
            for j in 0..nobs {
                self.push_block(BlockKind::LeaderObstacle(k, j), 1, true, range(l.x_dag(k), 3).collect());
            }
        }
        let Some(s) = self.scenario.clone() else { return };
        let nf = s.n_follower;
        let (m0, m1) = (s.first(), s.last());
        if !self.config.free_follower_time {
            self.push_block(BlockKind::TimeLink, 1, false, vec![l.t_dag(), l.t_om()]);
        }
        for k in 0..=m0 {
            let mut v: Vec<usize> = range(l.x_om(k), 6).collect();
            v.extend(self.ref_vars(k));
            self.push_block(BlockKind::Branch(k), 6, false, v);
        }
        for k in 0..m0 {
            let mut v: Vec<usize> = range(l.u_om(k), 3).collect();
            v.extend(range(l.u_dag(self.pi[k]), 3));
            self.push_block(BlockKind::ControlPin(k), 3, false, v);
        }
        for k in m0..nf {
            let mut v = vec![self.follower_clock()];
            v.extend(range(l.x_om(k), 6));
            v.extend(range(l.u_om(k), 3));
            v.extend(range(l.x_om(k + 1), 6));
            self.push_block(BlockKind::FollowerContinuity(k), 6, false, v);
        }
        self.push_block(BlockKind::FollowerTerminal, 6, false, range(l.x_om(nf), 6).collect());
        for k in m0..=m1 {
            self.push_block(BlockKind::Outage(k), 3, false, range(l.u_om(k), 3).collect());
        }
        for k in 0..=nf {
            for j in 0..nobs {
                self.push_block(BlockKind::FollowerObstacle(k, j), 1, true, range(l.x_om(k), 3).collect());
            }
        }
        for k in m1 + 1..nf {
            let mut v = vec![self.follower_clock()];
            v.extend(range(l.x_om(k), 6));
            v.extend(range(l.u_om(k), 3));
            v.extend(range(l.lam(k + 1), 6));
            v.extend(range(l.u_dag(self.pi[k]), 3));
            self.push_block(BlockKind::Stationarity(k), 3, false, v);
        }
        for k in m0..nf {
            let mut v = vec![self.follower_clock()];
            v.extend(range(l.x_om(k), 6));
            v.extend(range(l.u_om(k), 3));
            v.extend(range(l.lam(k), 12));
            v.extend(self.ref_vars(k));
            self.push_block(BlockKind::Costate(k), 6, false, v);
        }
        let mut v: Vec<usize> = range(l.x_om(nf), 6).collect();
        v.extend(range(l.lam(nf), 6));
        v.extend(self.ref_vars(nf));
        self.push_block(BlockKind::Transversality, 6, false, v);
        for k in 0..m0 {
            self.push_block(BlockKind::CostatePin(k), 6, false, range(l.lam(k), 6).collect());
        }
    }

    fn assemble_bounds(&mut self) {
        let l = self.layout;
        let c = &self.config;
        let ts = self.time_scale;
        let nlen = l.len();
        let mut lo = vec![f64::NEG_INFINITY; nlen];
        let mut hi = vec![f64::INFINITY; nlen];
        let set_state = |base: usize, lo: &mut Vec<f64>, hi: &mut Vec<f64>| {
            for i in 0..6 {
                let sc = if i < 3 { 1.0 } else { ts };
                if let Some(a) = c.state_lower {
                    lo[base + i] = a[i] * sc;
                }
                if let Some(b) = c.state_upper {
                    hi[base + i] = b[i] * sc;
                }
            }
        };
        lo[l.t_dag()] = c.t_bounds[0] / ts;
        hi[l.t_dag()] = c.t_bounds[1] / ts;
        for k in 0..=c.n_leader {
            set_state(l.x_dag(k), &mut lo, &mut hi);
        }
        for k in 0..c.n_leader {
            for i in 0..3 {
                lo[l.u_dag(k) + i] = -1.0;
                hi[l.u_dag(k) + i] = 1.0;
            }
        }
        if let Some(nf) = l.n_om {
            lo[l.t_om()] = c.t_bounds[0] / ts;
            hi[l.t_om()] = c.t_bounds[1] / ts;
            for k in 0..=nf {
                set_state(l.x_om(k), &mut lo, &mut hi);
            }
            for k in 0..nf {
                for i in 0..3 {
                    lo[l.u_om(k) + i] = -1.0;
                    hi[l.u_om(k) + i] = 1.0;
                }
            }
        }
        self.lower = lo;
        self.upper = hi;
    }

    // ---- scaling ----

    /// Physical decision vector to scaled NLP variables.
    pub fn to_scaled(&self, dv: &DecisionVector) -> Result<Vec<f64>> {
        if dv.layout() != self.layout {
            return Err(Error::InvalidInput("decision vector layout does not match the problem".into()));
        }
        let mut z = dv.pack();
        self.apply_scaling(&mut z, false);
        Ok(z)
    }

    pub fn from_scaled(&self, z: &[f64]) -> Result<DecisionVector> {
        let mut p = z.to_vec();
        if p.len() != self.layout.len() {
            return Err(Error::InvalidInput("decision vector length does not match the problem".into()));
        }
        self.apply_scaling(&mut p, true);
        DecisionVector::unpack(&self.layout, &p)
    }

    fn apply_scaling(&self, z: &mut [f64], inverse: bool) {
        let l = self.layout;
        let ts = self.time_scale;
        let tm = self.config.thrust_max;
        let mut f = |i: usize, s: f64| {
            if inverse {
                z[i] /= s
            } else {
                z[i] *= s
            }
        };
        f(l.t_dag(), 1.0 / ts);
        for k in 0..=l.n_dag {
            for i in 3..6 {
                f(l.x_dag(k) + i, ts);
            }
        }
        for k in 0..l.n_dag {
            for i in 0..3 {
                f(l.u_dag(k) + i, 1.0 / tm);
            }
        }
        if let Some(nf) = l.n_om {
            f(l.t_om(), 1.0 / ts);
            for k in 0..=nf {
                for i in 3..6 {
                    f(l.x_om(k) + i, ts);
                }
            }
            for k in 0..nf {
                for i in 0..3 {
                    f(l.u_om(k) + i, 1.0 / tm);
                }
            }
        }
    }

    // ---- generic kernels ----

    fn phys_state<S: Scalar, A: Access<S>>(&self, a: &A, base: usize) -> [S; 6] {
        let mut x = [S::zero(); 6];
        for (i, xi) in x.iter_mut().enumerate() {
            *xi = a.at(base + i) / self.state_scale(i);
        }
        x
    }

    fn phys_control<S: Scalar, A: Access<S>>(&self, a: &A, base: usize) -> [S; 3] {
        [0, 1, 2].map(|i| a.at(base + i) * self.config.thrust_max)
    }

    fn scaled_diff<S: Scalar>(&self, x: &[S; 6], y: &[S; 6]) -> [S; 6] {
        let mut d = [S::zero(); 6];
        for i in 0..6 {
            d[i] = (x[i] - y[i]) * self.state_scale(i);
        }
        d
    }

    fn scaled_control<S: Scalar, A: Access<S>>(&self, a: &A, base: usize) -> [S; 3] {
        [a.at(base), a.at(base + 1), a.at(base + 2)]
    }

    /// Phase at node `k` of an `nseg`-segment grid over `[0, t]`, replaying
    /// the integrator's phase chain.
    fn node_phase<S: Scalar>(&self, t: S, nseg: usize, k: usize) -> S {
        let p0 = S::cst(self.model.initial_phase());
        if self.model.is_eccentric() {
            let h = t / nseg as f64;
            let mut p = p0;
            for _ in 0..k {
                p = self.model.advance_phase(p, h, self.config.steps_per_segment);
            }
            p
        } else {
            p0 + t * (k as f64 / nseg as f64)
        }
    }

    fn leader_time<S: Scalar, A: Access<S>>(&self, a: &A) -> S {
        a.at(self.layout.t_dag()) * self.time_scale
    }

    /// Variable carrying the follower horizon: `T^ω` when free, else the shared `T†`.
    fn follower_clock(&self) -> usize {
        if self.config.free_follower_time {
            self.layout.t_om()
        } else {
            self.layout.t_dag()
        }
    }

    fn follower_time<S: Scalar, A: Access<S>>(&self, a: &A) -> S {
        a.at(self.follower_clock()) * self.time_scale
    }

    /// Reference state at follower node `k`, propagated from the preceding
    /// leader node.
    fn reference_at<S: Scalar, A: Access<S>>(&self, a: &A, k: usize) -> Result<[S; 6]> {
        let (j, rem) = self.ref_index(k);
        let xj = self.phys_state(a, self.layout.x_dag(j));
        if rem == 0 {
            return Ok(xj);
        }
        let n = self.config.n_leader;
        let t = self.leader_time(a);
        let frac = rem as f64 / self.n_om() as f64;
        let steps = ((self.config.steps_per_segment as f64 * frac).ceil() as usize).max(1);
        let p = self.node_phase(t, n, j);
        let u = self.phys_control(a, self.layout.u_dag(j));
        Ok(rk4_segment(&self.model, p, &xj, &u, t / n as f64 * frac, steps)?.0)
    }

    fn follower_sensitivity<S: Scalar, A: Access<S>>(
        &self,
        a: &A,
        k: usize,
    ) -> Result<crate::propagation::Rk4Sensitivity<S>> {
        let nf = self.n_om();
        let t = self.follower_time(a);
        let p = self.node_phase(t, nf, k);
        let x = self.phys_state(a, self.layout.x_om(k));
        let u = self.phys_control(a, self.layout.u_om(k));
        rk4_segment_sensitivity(&self.model, p, &x, &u, t / nf as f64, self.config.steps_per_segment)
    }

    fn residual<S: Scalar, A: Access<S>>(&self, kind: BlockKind, a: &A) -> Result<Vec<S>> {
        let l = &self.layout;
        let c = &self.config;
        let ns = c.steps_per_segment;
        let cst6 = |v: &Vec6| v.map(S::cst);
        let out: Vec<S> = match kind {
            BlockKind::LeaderInitial => {
                self.scaled_diff(&self.phys_state(a, l.x_dag(0)), &cst6(&c.x0)).to_vec()
            }
            BlockKind::LeaderContinuity(k) => {
                let n = c.n_leader;
                let t = self.leader_time(a);
                let p = self.node_phase(t, n, k);
                let x = self.phys_state(a, l.x_dag(k));
                let u = self.phys_control(a, l.u_dag(k));
                let (xe, _) = rk4_segment(&self.model, p, &x, &u, t / n as f64, ns)?;
                self.scaled_diff(&xe, &self.phys_state(a, l.x_dag(k + 1))).to_vec()
            }
            BlockKind::LeaderTerminal => {
                self.scaled_diff(&self.phys_state(a, l.x_dag(c.n_leader)), &cst6(&c.x1)).to_vec()
            }
            BlockKind::LeaderObstacle(k, j) => vec![self.obstacle(a, l.x_dag(k), j)],
            BlockKind::FollowerObstacle(k, j) => vec![self.obstacle(a, l.x_om(k), j)],
            BlockKind::TimeLink => vec![a.at(l.t_om()) - a.at(l.t_dag())],
            BlockKind::Branch(k) => {
                let xr = self.reference_at(a, k)?;
                self.scaled_diff(&self.phys_state(a, l.x_om(k)), &xr).to_vec()
            }
            BlockKind::ControlPin(k) => {
                let uf = self.scaled_control(a, l.u_om(k));
                let ud = self.scaled_control(a, l.u_dag(self.pi[k]));
                (0..3).map(|i| uf[i] - ud[i]).collect()
            }
            BlockKind::FollowerContinuity(k) => {
                let nf = self.n_om();
                let t = self.follower_time(a);
                let p = self.node_phase(t, nf, k);
                let x = self.phys_state(a, l.x_om(k));
                let u = self.phys_control(a, l.u_om(k));
                let (xe, _) = rk4_segment(&self.model, p, &x, &u, t / nf as f64, ns)?;
                self.scaled_diff(&xe, &self.phys_state(a, l.x_om(k + 1))).to_vec()
            }
            BlockKind::FollowerTerminal => {
                self.scaled_diff(&self.phys_state(a, l.x_om(self.n_om())), &cst6(&c.x1)).to_vec()
            }
            BlockKind::Outage(k) => self.scaled_control(a, l.u_om(k)).to_vec(),
            BlockKind::Stationarity(k) => {
                let sens = self.follower_sensitivity(a, k)?;
                let uf = self.scaled_control(a, l.u_om(k));
                let ud = self.scaled_control(a, l.u_dag(self.pi[k]));
                let du = [0, 1, 2].map(|i| uf[i] - ud[i]);
                let lam = [0, 1, 2, 3, 4, 5].map(|i| a.at(l.lam(k + 1) + i));
                (0..3)
                    .map(|col| {
                        let mut acc = S::zero();
                        for d in 0..3 {
                            acc += du[d] * (2.0 * c.follower_cost_scale * c.r[col][d]);
                        }
                        for i in 0..6 {
                            acc += sens.gamma[i][col] * lam[i] * (self.state_scale(i) * c.thrust_max);
                        }
                        acc
                    })
                    .collect()
            }
            BlockKind::Costate(k) => {
                let sens = self.follower_sensitivity(a, k)?;
                let xr = self.reference_at(a, k)?;
                let dx = self.scaled_diff(&self.phys_state(a, l.x_om(k)), &xr);
                let lam_k = [0, 1, 2, 3, 4, 5].map(|i| a.at(l.lam(k) + i));
                let lam_n = [0, 1, 2, 3, 4, 5].map(|i| a.at(l.lam(k + 1) + i));
                (0..6)
                    .map(|j| {
                        let mut acc = -lam_k[j];
                        for m in 0..6 {
                            acc += dx[m] * (2.0 * c.follower_cost_scale * c.q[j][m]);
                        }
                        for i in 0..6 {
                            acc += sens.phi[i][j] * lam_n[i] * (self.state_scale(i) / self.state_scale(j));
                        }
                        acc
                    })
                    .collect()
            }
            BlockKind::Transversality => {
                let nf = self.n_om();
                let xr = self.reference_at(a, nf)?;
                let dx = self.scaled_diff(&self.phys_state(a, l.x_om(nf)), &xr);
                (0..6)
                    .map(|j| {
                        let mut acc = -a.at(l.lam(nf) + j);
                        for m in 0..6 {
                            acc += dx[m] * (2.0 * c.follower_cost_scale * c.qf[j][m]);
                        }
                        acc
                    })
                    .collect()
            }
            BlockKind::CostatePin(k) => (0..6).map(|i| a.at(l.lam(k) + i)).collect(),
        };
        Ok(out)
    }

    fn obstacle<S: Scalar, A: Access<S>>(&self, a: &A, base: usize, j: usize) -> S {
        let o = &self.config.obstacles[j];
        let mut d2 = S::zero();
        for i in 0..3 {
            let d = a.at(base + i) - o.center[i];
            d2 += d * d;
        }
        -d2.sqrt() + o.radius
    }

    fn wrap(kind: BlockKind, e: Error) -> Error {
        Error::ConstraintEval { block: format!("{kind:?}"), source: Box::new(e) }
    }

    // ---- public evaluation ----

    pub fn eval_constraints(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z)?;
        let mut out = vec![0.0; self.num_rows];
        let a = Dense(z);
        for b in &self.blocks {
            let r = self.residual(b.kind, &a).map_err(|e| Self::wrap(b.kind, e))?;
            out[b.row0..b.row0 + b.nrows].copy_from_slice(&r);
        }
        Ok(out)
    }

    /// Residuals of one block.
    pub fn eval_block(&self, z: &[f64], kind: BlockKind) -> Result<Vec<f64>> {
        self.check_len(z)?;
        self.residual(kind, &Dense(z)).map_err(|e| Self::wrap(kind, e))
    }

    /// KKT rows (stationarity, costate, transversality) in build order.
    pub fn eval_kkt_rows(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z)?;
        let mut out = Vec::new();
        for b in self.blocks.iter().filter(|b| b.kind.is_kkt()) {
            out.extend(self.residual(b.kind, &Dense(z)).map_err(|e| Self::wrap(b.kind, e))?);
        }
        Ok(out)
    }

    fn check_len(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.layout.len() {
            return Err(Error::InvalidInput(format!(
                "decision vector has length {}, expected {}",
                z.len(),
                self.layout.len()
            )));
        }
        Ok(())
    }

    /// Scaled, smoothed objective used by the solver:
    /// `w_t·T/T_s + w_u·Σ √(‖U/T_max‖² + η²)`.
    pub fn objective_scaled(&self, z: &[f64]) -> f64 {
        let c = &self.config;
        let eta2 = c.fuel_smoothing * c.fuel_smoothing;
        let mut j = c.w_t * z[self.layout.t_dag()];
        for k in 0..c.n_leader {
            let b = self.layout.u_dag(k);
            j += c.w_u * (z[b] * z[b] + z[b + 1] * z[b + 1] + z[b + 2] * z[b + 2] + eta2).sqrt();
        }
        j
    }

    pub fn objective_scaled_gradient(&self, z: &[f64]) -> Vec<f64> {
        let c = &self.config;
        let eta2 = c.fuel_smoothing * c.fuel_smoothing;
        let mut g = vec![0.0; z.len()];
        g[self.layout.t_dag()] = c.w_t;
        for k in 0..c.n_leader {
            let b = self.layout.u_dag(k);
            let nrm = (z[b] * z[b] + z[b + 1] * z[b + 1] + z[b + 2] * z[b + 2] + eta2).sqrt();
            if nrm > 0.0 {
                for i in 0..3 {
                    g[b + i] = c.w_u * z[b + i] / nrm;
                }
            }
        }
        g
    }

    /// Hessian of [`Self::objective_scaled`]; one 3×3 block per leader control.
    pub fn objective_scaled_hessian(&self, z: &[f64]) -> Vec<(usize, usize, f64)> {
        let c = &self.config;
        let eta2 = c.fuel_smoothing * c.fuel_smoothing;
        let mut h = Vec::with_capacity(9 * c.n_leader);
        for k in 0..c.n_leader {
            let b = self.layout.u_dag(k);
            let v = [z[b], z[b + 1], z[b + 2]];
            let s = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2] + eta2).sqrt();
            if s > 0.0 {
                for i in 0..3 {
                    for j in 0..3 {
                        let d = if i == j { 1.0 / s } else { 0.0 };
                        h.push((b + i, b + j, c.w_u * (d - v[i] * v[j] / (s * s * s))));
                    }
                }
            }
        }
        h
    }

    /// Leader objective `w_t·T† + w_u·Σ‖U†_k‖` in physical units.
    pub fn eval_objective(&self, dv: &DecisionVector) -> f64 {
        let c = &self.config;
        c.w_t * dv.t_dag + c.w_u * dv.u_dag.iter().map(|u| (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt()).sum::<f64>()
    }

    /// Follower tracking cost on scaled deviations, times `follower_cost_scale`.
    pub fn eval_follower_objective(&self, z: &[f64]) -> Result<f64> {
        self.check_len(z)?;
        let Some(nf) = self.layout.n_om else { return Ok(0.0) };
        let a = Dense(z);
        let c = &self.config;
        let quad6 = |m: &[[f64; 6]; 6], v: &[f64; 6]| -> f64 {
            (0..6).map(|i| (0..6).map(|j| v[i] * m[i][j] * v[j]).sum::<f64>()).sum()
        };
        let mut j = 0.0;
        for k in 0..=nf {
            let xr = self.reference_at(&a, k)?;
            let dx = self.scaled_diff(&self.phys_state(&a, self.layout.x_om(k)), &xr);
            if k == nf {
                j += quad6(&c.qf, &dx);
            } else {
                j += quad6(&c.q, &dx);
                let uf = self.scaled_control(&a, self.layout.u_om(k));
                let ud = self.scaled_control(&a, self.layout.u_dag(self.pi[k]));
                let du = [uf[0] - ud[0], uf[1] - ud[1], uf[2] - ud[2]];
                j += (0..3).map(|i| (0..3).map(|m| du[i] * c.r[i][m] * du[m]).sum::<f64>()).sum::<f64>();
            }
        }
        Ok(c.follower_cost_scale * j)
    }

    /// Feedback controls `−½ (sR)⁻¹ G̃ᵀ Λ_{k+1}` (scaled) on the active
    /// post-outage segments, as `(k, Ũ_feedback + U†_π(k))`.
    pub fn feedback_controls(&self, z: &[f64]) -> Result<Vec<(usize, Vec3)>> {
        self.check_len(z)?;
        let Some(s) = &self.scenario else { return Ok(Vec::new()) };
        let a = Dense(z);
        let c = &self.config;
        let rinv = Matrix3::from_fn(|i, j| c.follower_cost_scale * c.r[i][j]).try_inverse().ok_or_else(|| Error::Config("R is singular".into()))?;
        let mut out = Vec::new();
        for k in s.last() + 1..s.n_follower {
            let sens = self.follower_sensitivity(&a, k)?;
            let mut gl = nalgebra::Vector3::zeros();
            for col in 0..3 {
                for i in 0..6 {
                    gl[col] += sens.gamma[i][col] * z[self.layout.lam(k + 1) + i] * self.state_scale(i) * c.thrust_max;
                }
            }
            let du = -0.5 * rinv * gl;
            let ud = self.scaled_control(&a, self.layout.u_dag(self.pi[k]));
            out.push((k, [du[0] + ud[0], du[1] + ud[1], du[2] + ud[2]]));
        }
        Ok(out)
    }

    // ---- derivatives ----

    /// Exact constraint Jacobian by forward-mode duals, in the declared pattern.
    pub fn jacobian(&self, z: &[f64]) -> Result<SparseMatrix> {
        self.check_len(z)?;
        let mut entries = Vec::new();
        for b in &self.blocks {
            let x: Vec<f64> = b.vars.iter().map(|&i| z[i]).collect();
            let (_, jac) = jacobian_local(&x, |d: &[Dual<CHUNK>]| {
                self.residual(b.kind, &Local { vars: &b.vars, vals: d })
            })
            .map_err(|e| Self::wrap(b.kind, e))?;
            for (r, row) in jac.iter().enumerate() {
                for (c, &v) in row.iter().enumerate() {
                    entries.push((b.row0 + r, b.vars[c], v));
                }
            }
        }
        Ok(SparseMatrix { nrows: self.num_rows, ncols: self.layout.len(), entries })
    }

    /// Per-row Hessians by forward differences of the exact block Jacobians.
    /// The initial-state and outage rows are linear and skipped.
    pub fn constraint_hessians(&self, z: &[f64]) -> Result<RowHessians> {
        self.check_len(z)?;
        let mut blocks = Vec::new();
        for b in &self.blocks {
            if matches!(b.kind, BlockKind::LeaderInitial | BlockKind::Outage(_) | BlockKind::TimeLink) {
                continue;
            }
            let jac = |x: &[f64]| -> Result<Vec<Vec<f64>>> {
                let (_, j) = jacobian_local(x, |d: &[Dual<CHUNK>]| {
                    self.residual(b.kind, &Local { vars: &b.vars, vals: d })
                })
                .map_err(|e| Self::wrap(b.kind, e))?;
                Ok(j)
            };
            let x: Vec<f64> = b.vars.iter().map(|&i| z[i]).collect();
            let j0 = jac(&x)?;
            let nv = x.len();
            let mut rows = vec![vec![0.0; nv * nv]; b.nrows];
            for c in 0..nv {
                let step = 1e-7 * (1.0 + x[c].abs());
                let mut xp = x.clone();
                xp[c] += step;
                let jc = jac(&xp)?;
                for (r, h) in rows.iter_mut().enumerate() {
                    for i in 0..nv {
                        h[i * nv + c] = (jc[r][i] - j0[r][i]) / step;
                    }
                }
            }
            for h in &mut rows {
                for i in 0..nv {
                    for j in 0..i {
                        let v = 0.5 * (h[i * nv + j] + h[j * nv + i]);
                        h[i * nv + j] = v;
                        h[j * nv + i] = v;
                    }
                }
            }
            blocks.push(HessianBlock { row0: b.row0, vars: b.vars.clone(), rows });
        }
        Ok(RowHessians { blocks })
    }

    /// Declared structural nonzeros `(row, col)`.
    pub fn sparsity(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for b in &self.blocks {
            for r in 0..b.nrows {
                for &c in &b.vars {
                    out.push((b.row0 + r, c));
                }
            }
        }
        out
    }

    /// Block label of constraint row `r`.
    pub fn row_group(&self, r: usize) -> Option<String> {
        self.blocks.iter().find(|b| r >= b.row0 && r < b.row0 + b.nrows).map(|b| b.kind.label())
    }

    pub fn write_sparsity_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row,col,row_group,col_group")?;
        for b in &self.blocks {
            let label = b.kind.label();
            for r in 0..b.nrows {
                for &c in &b.vars {
                    writeln!(w, "{},{c},\"{label}\",\"{}\"", b.row0 + r, self.layout.variable_group(c))?;
                }
            }
        }
        Ok(())
    }

    /// Exact Jacobian against central differences of step `step` in the
    /// scaled variables, over the declared pattern. Entries outside the
    /// pattern must vanish; their largest FD magnitude is reported.
    pub fn check_jacobian(&self, z: &[f64], step: f64) -> Result<JacobianCheck> {
        self.check_len(z)?;
        if !(step > 0.0) {
            return Err(Error::InvalidInput(format!("finite-difference step {step} must be > 0")));
        }
        let n = z.len();
        let mut exact: HashMap<(usize, usize), f64> = self.sparsity().into_iter().map(|k| (k, 0.0)).collect();
        for (r, c, v) in self.jacobian(z)?.entries {
            *exact.get_mut(&(r, c)).expect("jacobian entry outside declared pattern") += v;
        }
        let mut fd = vec![vec![0.0; n]; self.num_rows];
        for c in 0..n {
            let (mut zp, mut zm) = (z.to_vec(), z.to_vec());
            zp[c] += step;
            zm[c] -= step;
            let (cp, cm) = (self.eval_constraints(&zp)?, self.eval_constraints(&zm)?);
            for r in 0..self.num_rows {
                fd[r][c] = (cp[r] - cm[r]) / (2.0 * step);
            }
        }
        let mut entries: Vec<JacobianEntry> = exact
            .iter()
            .map(|(&(row, col), &ex)| {
                let f = fd[row][col];
                JacobianEntry { row, col, exact: ex, fd: f, e_rel: (ex - f).abs() / (1.0 + f.abs()) }
            })
            .collect();
        entries.sort_by_key(|e| (e.row, e.col));
        let mut outside: f64 = 0.0;
        for (r, row) in fd.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                if !exact.contains_key(&(r, c)) {
                    outside = outside.max(v.abs());
                }
            }
        }
        let mut rel: Vec<f64> = entries.iter().map(|e| e.e_rel).collect();
        rel.sort_by(f64::total_cmp);
        let median = if rel.is_empty() {
            0.0
        } else if rel.len() % 2 == 1 {
            rel[rel.len() / 2]
        } else {
            0.5 * (rel[rel.len() / 2 - 1] + rel[rel.len() / 2])
        };
        Ok(JacobianCheck { max_e_rel: rel.last().copied().unwrap_or(0.0), median_e_rel: median, max_outside_pattern: outside, entries })
    }

    pub fn write_e_rel_csv<W: Write>(&self, check: &JacobianCheck, mut w: W) -> std::io::Result<()> {
        writeln!(w, "row,col,row_group,col_group,exact,fd,e_rel")?;
        for e in &check.entries {
            let rg = self.row_group(e.row).unwrap_or_default();
            let cg = self.layout.variable_group(e.col);
            writeln!(w, "{},{},\"{rg}\",\"{cg}\",{:e},{:e},{:e}", e.row, e.col, e.exact, e.fd, e.e_rel)?;
        }
        Ok(())
    }

    pub fn equality_rows(&self) -> Vec<usize> {
        self.rows_where(false)
    }

    pub fn inequality_row_indices(&self) -> Vec<usize> {
        self.rows_where(true)
    }

    fn rows_where(&self, ineq: bool) -> Vec<usize> {
        self.blocks.iter().filter(|b| b.inequality == ineq).flat_map(|b| b.row0..b.row0 + b.nrows).collect()
    }

    // ---- consistent points ----

    /// Scaled decision vector obtained by forward simulation.
    ///
    /// Leader: `x0` propagated under `u_dag` (physical) over `[0, t]`.
    /// Follower: pinned to the reference up to the outage, zero thrust on
    /// the outage, `u_om_active[k]` (physical, or the mapped leader control
    /// when `None`) afterwards. Costates come from back-substitution of the
    /// transversality and costate rows, so those rows vanish exactly.
    pub fn simulate_point(&self, t: f64, u_dag: &[Vec3], u_om_active: Option<&[Vec3]>) -> Result<Vec<f64>> {
        let l = self.layout;
        let c = &self.config;
        let n = c.n_leader;
        if u_dag.len() != n {
            return Err(Error::InvalidInput(format!("need {n} leader controls, got {}", u_dag.len())));
        }
        let ts = self.time_scale;
        let tm = c.thrust_max;
        let mut z = vec![0.0; l.len()];
        z[l.t_dag()] = t / ts;
        for (k, u) in u_dag.iter().enumerate() {
            for i in 0..3 {
                z[l.u_dag(k) + i] = u[i] / tm;
            }
        }
        let put_state = |z: &mut Vec<f64>, base: usize, x: &Vec6| {
            for i in 0..6 {
                z[base + i] = x[i] * if i < 3 { 1.0 } else { ts };
            }
        };
        put_state(&mut z, l.x_dag(0), &c.x0);
        let h = t / n as f64;
        let mut p = self.model.initial_phase();
        for k in 0..n {
            let x = self.phys_state(&Dense(&z), l.x_dag(k));
            let (xe, pe) = rk4_segment(&self.model, p, &x, &u_dag[k], h, c.steps_per_segment)?;
            p = pe;
            put_state(&mut z, l.x_dag(k + 1), &xe);
        }
        let Some(s) = &self.scenario else { return Ok(z) };
        let nf = s.n_follower;
        let (m0, m1) = (s.first(), s.last());
        z[l.t_om()] = t / ts;
        for k in 0..=m0 {
            let xr = self.reference_at(&Dense(&z), k)?;
            put_state(&mut z, l.x_om(k), &xr);
        }
        for k in 0..nf {
            let v: Vec3 = if k < m0 {
                let b = l.u_dag(self.pi[k]);
                [z[b], z[b + 1], z[b + 2]]
            } else if k <= m1 {
                [0.0; 3]
            } else {
                match u_om_active {
                    Some(us) => [us[k][0] / tm, us[k][1] / tm, us[k][2] / tm],
                    None => {
                        let b = l.u_dag(self.pi[k]);
                        [z[b], z[b + 1], z[b + 2]]
                    }
                }
            };
            z[l.u_om(k)..l.u_om(k) + 3].copy_from_slice(&v);
        }
        let hf = t / nf as f64;
        let mut p = self.node_phase(t, nf, m0);
        for k in m0..nf {
            let x = self.phys_state(&Dense(&z), l.x_om(k));
            let u = self.phys_control(&Dense(&z), l.u_om(k));
            let (xe, pe) = rk4_segment(&self.model, p, &x, &u, hf, c.steps_per_segment)?;
            p = pe;
            put_state(&mut z, l.x_om(k + 1), &xe);
        }
        self.backsolve_costates(&mut z)?;
        Ok(z)
    }

    /// Overwrite the costates with the solution of the transversality and
    /// costate rows (and zeros before the branch).
    pub fn backsolve_costates(&self, z: &mut [f64]) -> Result<()> {
        self.check_len(z)?;
        let Some(s) = &self.scenario else { return Ok(()) };
        let l = self.layout;
        let nf = s.n_follower;
        let m0 = s.first();
        for k in 0..=nf {
            z[l.lam(k)..l.lam(k) + 6].fill(0.0);
        }
        // with Λ_k = 0 the rows return exactly the value Λ_k must take
        let r = self.residual(BlockKind::Transversality, &Dense(z))?;
        z[l.lam(nf)..l.lam(nf) + 6].copy_from_slice(&r);
        for k in (m0..nf).rev() {
            let r = self.residual(BlockKind::Costate(k), &Dense(z))?;
            z[l.lam(k)..l.lam(k) + 6].copy_from_slice(&r);
        }
        Ok(())
    }

    /// Projection of a scaled point onto the variable bounds.
    pub fn clamp(&self, z: &mut [f64]) {
        for i in 0..z.len() {
            z[i] = z[i].clamp(self.lower[i], self.upper[i]);
        }
    }
}

impl Nlp for NlpProblem {
    fn num_variables(&self) -> usize {
        self.layout.len()
    }
    fn num_constraints(&self) -> usize {
        self.num_rows
    }
    fn variable_bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (self.lower.clone(), self.upper.clone())
    }
    fn inequality_rows(&self) -> Vec<bool> {
        let mut v = vec![false; self.num_rows];
        for b in self.blocks.iter().filter(|b| b.inequality) {
            v[b.row0..b.row0 + b.nrows].fill(true);
        }
        v
    }
    fn objective(&self, z: &[f64]) -> Result<f64> {
        Ok(self.objective_scaled(z))
    }
    fn objective_gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.objective_scaled_gradient(z))
    }
    fn objective_hessian(&self, z: &[f64]) -> Result<SparseMatrix> {
        let n = z.len();
        Ok(SparseMatrix { nrows: n, ncols: n, entries: self.objective_scaled_hessian(z) })
    }
    fn constraint_hessians(&self, z: &[f64]) -> Result<Option<RowHessians>> {
        NlpProblem::constraint_hessians(self, z).map(Some)
    }
    fn constraints(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.eval_constraints(z)
    }
    fn constraint_jacobian(&self, z: &[f64]) -> Result<SparseMatrix> {
        self.jacobian(z)
    }
}
