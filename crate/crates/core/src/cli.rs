//! Commands behind the `mtd` binary: solve, certify, ensemble,
//! check-jacobian and recover. Each `*_run` function composes library
//! calls and returns plain data; [`run`] adds argument parsing, files and
//! exit codes.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::certificate::{
    certificate_triad, certify, envelope_consistency, extract_bounds, BoundsExtraction, BoundsOptions, Certificate,
    CertificateTriad,
};
use crate::config::ScenarioConfig;
use crate::error::{Error, Result};
use crate::propagation::PiecewiseTrajectory;
use crate::recovery::{recovery_after_outage, GramianReport};
use crate::solver::{initialize, solve, Checkpoint, SolveOptions, SolveReport, SolveStatus};
use crate::transcription::{DecisionVector, JacobianCheck, NlpProblem};

pub const SOLUTION_VERSION: u32 = 1;
pub const CERTIFICATE_VERSION: u32 = 1;
pub const ENSEMBLE_SCHEMA: &str = "mtd-ensemble v1";

/// Envelope closed form vs ODE mismatch tolerated before a certificate is written.
pub const CONSISTENCY_GATE: f64 = 1e-8;

/// Published feasibility ratios (%) of the three orbit cases, for comparison only.
pub const REFERENCE_FEASIBILITY_PERCENT: [(&str, f64); 3] =
    [("circular", 48.0), ("eccentric_case_1", 51.2), ("eccentric_case_2", 54.4)];

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_GATE: i32 = 4;

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Io(_) | Error::InvalidInput(_) | Error::Domain { .. } => EXIT_CONFIG,
        Error::Divergence { .. } | Error::ConstraintEval { .. } => EXIT_DIVERGED,
        Error::AssumptionViolation { .. } | Error::EnvelopeDiverged { .. } | Error::InfeasibleRecovery => EXIT_GATE,
    }
}

/// Solve output: the configuration, the scaled checkpoint and the decoded
/// decision vector in physical units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionFile {
    pub version: u32,
    pub seed: u64,
    pub config: ScenarioConfig,
    pub checkpoint: Checkpoint,
    pub decision: DecisionVector,
}

impl SolutionFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.clone();
        let r = &mut s.checkpoint.report;
        for v in [&mut r.objective, &mut r.max_violation, &mut r.stationarity] {
            if !v.is_finite() {
                *v = f64::MAX;
            }
        }
        fs::write(path, serde_json::to_string_pretty(&s)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        let s: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if s.version != SOLUTION_VERSION {
            return Err(Error::Config(format!("{}: unsupported solution version {}", path.display(), s.version)));
        }
        s.config.validate()?;
        Ok(s)
    }

    /// Leader trajectory with the configured integration resolution.
    pub fn reference(&self) -> PiecewiseTrajectory {
        let mut r = self.decision.leader_trajectory();
        r.steps_per_segment = self.config.transcription.steps_per_segment;
        r
    }
}

pub fn solve_run(cfg: &ScenarioConfig, seed: u64) -> Result<SolutionFile> {
    let p = cfg.problem()?;
    let z0 = initialize(&p, &mut ChaCha8Rng::seed_from_u64(seed))?;
    let (z, report) = solve(&p, &z0, &SolveOptions { seed, ..cfg.solver })?;
    let decision = p.from_scaled(&z)?;
    Ok(SolutionFile { version: SOLUTION_VERSION, seed, config: cfg.clone(), checkpoint: Checkpoint { z, report }, decision })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutageWindow {
    pub tau1: f64,
    pub tau2: f64,
    pub dtau: f64,
    /// `dtau` over the mission time.
    pub normalized: f64,
}

/// Missed-thrust durations over the mission time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedDurations {
    pub dtau_theoretical: f64,
    pub dtau_computed: f64,
    pub dtau_actual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateFile {
    pub version: u32,
    pub seed: u64,
    pub epsilon: f64,
    pub mission_time: f64,
    /// `None` for a zero-length or absent outage.
    pub window: Option<OutageWindow>,
    pub extraction: Option<BoundsExtraction>,
    pub certificate: Option<Certificate>,
    pub triad: CertificateTriad,
    pub normalized: NormalizedDurations,
    pub envelope_consistency: f64,
}

fn window(cfg: &ScenarioConfig, t_final: f64) -> Result<Option<OutageWindow>> {
    Ok(cfg.outage_window(t_final)?.filter(|(a, b)| b > a).map(|(tau1, tau2)| OutageWindow {
        tau1,
        tau2,
        dtau: tau2 - tau1,
        normalized: (tau2 - tau1) / t_final,
    }))
}

pub fn certify_run(sol: &SolutionFile, epsilon: f64) -> Result<CertificateFile> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::Config(format!("epsilon: must be finite and > 0, got {epsilon}")));
    }
    let cfg = &sol.config;
    let t_final = sol.decision.t_dag;
    let mut out = CertificateFile {
        version: CERTIFICATE_VERSION,
        seed: sol.seed,
        epsilon,
        mission_time: t_final,
        window: window(cfg, t_final)?,
        extraction: None,
        certificate: None,
        triad: CertificateTriad {
            delta_theoretical: 0.0,
            delta_computed: 0.0,
            dtau_theoretical: 0.0,
            dtau_computed: 0.0,
            dtau_actual: 0.0,
        },
        normalized: NormalizedDurations { dtau_theoretical: 0.0, dtau_computed: 0.0, dtau_actual: 0.0 },
        envelope_consistency: 0.0,
    };
    let Some(w) = out.window else { return Ok(out) };
    let reference = sol.reference();
    let opts = BoundsOptions {
        samples_per_segment: cfg.certificate.samples_per_segment,
        convention: cfg.certificate.convention,
        epsilon,
    };
    let ex = extract_bounds(&cfg.model, &reference, w.tau1, w.tau2, &opts)?;
    let cert = certify(&ex.bounds, epsilon, w.dtau)?;
    let triad = certificate_triad(&cfg.model, &reference, w.tau1, w.tau2, &ex.bounds, epsilon, cfg.certificate.triad_samples)?;
    out.envelope_consistency = envelope_consistency(&ex.bounds, cert.dtau_max, cert.delta);
    out.normalized = NormalizedDurations {
        dtau_theoretical: triad.dtau_theoretical / t_final,
        dtau_computed: triad.dtau_computed / t_final,
        dtau_actual: triad.dtau_actual / t_final,
    };
    out.extraction = Some(ex);
    out.certificate = Some(cert);
    out.triad = triad;
    Ok(out)
}

pub fn recover_run(sol: &SolutionFile, t_rec: Option<f64>) -> Result<GramianReport> {
    let cfg = &sol.config;
    let Some((tau1, tau2)) = cfg.outage_window(sol.decision.t_dag)? else {
        return Err(Error::InvalidInput("solution has no outage window".into()));
    };
    let t_rec = t_rec.or(cfg.recovery.t_rec);
    recovery_after_outage(&cfg.model, &sol.reference(), tau1, tau2, t_rec, &cfg.u_bar(), &cfg.recovery.gramian)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointSource {
    /// Uniform in `[-1, 1]` per scaled variable, clipped to its bounds.
    Random,
    /// The simulated initial guess used by `solve`.
    Simulated,
    /// The checkpoint of a solution file.
    File,
}

pub fn evaluation_point(p: &NlpProblem, source: PointSource, seed: u64, sol: Option<&SolutionFile>) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match source {
        PointSource::Simulated => initialize(p, &mut rng),
        PointSource::Random => Ok((0..p.layout.len())
            .map(|i| {
                let (lo, hi) = (p.lower[i].max(-1.0), p.upper[i].min(1.0));
                if lo < hi {
                    rng.gen_range(lo..hi)
                } else {
                    p.lower[i]
                }
            })
            .collect()),
        PointSource::File => {
            let sol = sol.ok_or_else(|| Error::InvalidInput("point source `file` needs --solution".into()))?;
            if sol.checkpoint.z.len() != p.layout.len() {
                return Err(Error::InvalidInput(format!(
                    "checkpoint has {} variables, problem has {}",
                    sol.checkpoint.z.len(),
                    p.layout.len()
                )));
            }
            Ok(sol.checkpoint.z.clone())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianSummary {
    pub point: PointSource,
    pub seed: u64,
    pub fd_step: f64,
    pub entries: usize,
    pub max_e_rel: f64,
    pub median_e_rel: f64,
    pub max_outside_pattern: f64,
    pub gate: f64,
    pub median_gate: f64,
    pub passed: bool,
    pub median_passed: bool,
}

pub fn check_jacobian_run(p: &NlpProblem, z: &[f64], cfg: &ScenarioConfig, point: PointSource, seed: u64) -> Result<(JacobianCheck, JacobianSummary)> {
    let j = &cfg.jacobian;
    let check = p.check_jacobian(z, j.fd_step)?;
    let summary = JacobianSummary {
        point,
        seed,
        fd_step: j.fd_step,
        entries: check.entries.len(),
        max_e_rel: check.max_e_rel,
        median_e_rel: check.median_e_rel,
        max_outside_pattern: check.max_outside_pattern,
        gate: j.gate,
        median_gate: j.median_gate,
        passed: check.max_e_rel <= j.gate && check.max_outside_pattern <= j.gate,
        median_passed: check.median_e_rel <= j.median_gate,
    };
    Ok((check, summary))
}

/// One ensemble member. Missing values are left empty in the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleRow {
    pub seed: u64,
    pub status: String,
    pub objective: Option<f64>,
    pub mission_time: Option<f64>,
    pub max_violation: Option<f64>,
    pub delta_theoretical: Option<f64>,
    pub delta_computed: Option<f64>,
    pub dtau_theoretical: Option<f64>,
    pub dtau_computed: Option<f64>,
    pub dtau_actual: Option<f64>,
    pub dtau_theoretical_norm: Option<f64>,
    pub dtau_computed_norm: Option<f64>,
    pub dtau_actual_norm: Option<f64>,
    pub r_sat: Option<f64>,
    pub r_e: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
    pub h: Option<f64>,
    pub f_min: Option<f64>,
    pub f_max: Option<f64>,
    pub error: Option<String>,
}

impl EnsembleRow {
    fn empty(seed: u64, status: &str) -> Self {
        Self {
            seed,
            status: status.into(),
            objective: None,
            mission_time: None,
            max_violation: None,
            delta_theoretical: None,
            delta_computed: None,
            dtau_theoretical: None,
            dtau_computed: None,
            dtau_actual: None,
            dtau_theoretical_norm: None,
            dtau_computed_norm: None,
            dtau_actual_norm: None,
            r_sat: None,
            r_e: None,
            alpha: None,
            beta: None,
            h: None,
            f_min: None,
            f_max: None,
            error: None,
        }
    }

    pub fn converged(&self) -> bool {
        self.status == "converged"
    }

    /// Named numeric columns, in schema order.
    pub fn metrics(&self) -> [(&'static str, Option<f64>); 18] {
        [
            ("objective", self.objective),
            ("mission_time", self.mission_time),
            ("max_violation", self.max_violation),
            ("delta_theoretical", self.delta_theoretical),
            ("delta_computed", self.delta_computed),
            ("dtau_theoretical", self.dtau_theoretical),
            ("dtau_computed", self.dtau_computed),
            ("dtau_actual", self.dtau_actual),
            ("dtau_theoretical_norm", self.dtau_theoretical_norm),
            ("dtau_computed_norm", self.dtau_computed_norm),
            ("dtau_actual_norm", self.dtau_actual_norm),
            ("r_sat", self.r_sat),
            ("r_e", self.r_e),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("h", self.h),
            ("f_min", self.f_min),
            ("f_max", self.f_max),
        ]
    }
}

fn status_name(s: SolveStatus) -> &'static str {
    match s {
        SolveStatus::Converged => "converged",
        SolveStatus::MaxIter => "max_iter",
        SolveStatus::Diverged => "diverged",
    }
}

/// Solve, then certify and run the recovery diagnostic on converged runs.
/// Failures are recorded in the row.
pub fn ensemble_member(cfg: &ScenarioConfig, seed: u64) -> EnsembleRow {
    let sol = match solve_run(cfg, seed) {
        Ok(s) => s,
        Err(e) => {
            let mut r = EnsembleRow::empty(seed, "error");
            r.error = Some(e.to_string());
            return r;
        }
    };
    let rep: &SolveReport = &sol.checkpoint.report;
    let mut row = EnsembleRow::empty(seed, status_name(rep.status));
    row.objective = Some(rep.objective).filter(|v| v.is_finite());
    row.mission_time = Some(sol.decision.t_dag);
    row.max_violation = Some(rep.max_violation).filter(|v| v.is_finite());
    if rep.status != SolveStatus::Converged {
        return row;
    }
    let mut errors = Vec::new();
    match certify_run(&sol, cfg.epsilon) {
        Ok(c) if c.window.is_some() => {
            let t = &c.triad;
            row.delta_theoretical = Some(t.delta_theoretical);
            row.delta_computed = Some(t.delta_computed);
            row.dtau_theoretical = Some(t.dtau_theoretical);
            row.dtau_computed = Some(t.dtau_computed);
            row.dtau_actual = Some(t.dtau_actual);
            row.dtau_theoretical_norm = Some(c.normalized.dtau_theoretical);
            row.dtau_computed_norm = Some(c.normalized.dtau_computed);
            row.dtau_actual_norm = Some(c.normalized.dtau_actual);
            row.r_sat = c.certificate.and_then(|c| c.r_sat);
            if let Some(ex) = c.extraction {
                let b = ex.bounds;
                row.alpha = Some(b.alpha);
                row.beta = Some(b.beta);
                row.h = Some(b.h);
                row.f_min = Some(b.f_min);
                row.f_max = Some(b.f_max);
            }
        }
        Ok(_) => {}
        Err(e) => errors.push(format!("certify: {e}")),
    }
    if cfg.outage.is_some() {
        match recover_run(&sol, None) {
            Ok(g) => row.r_e = Some(g.r_e),
            Err(e) => errors.push(format!("recover: {e}")),
        }
    }
    if !errors.is_empty() {
        row.error = Some(errors.join("; "));
    }
    row
}

/// Members for seeds `base, base + 1, …`, run in parallel and returned in
/// seed order.
pub fn ensemble_rows(cfg: &ScenarioConfig, runs: usize, base_seed: u64) -> Vec<EnsembleRow> {
    (0..runs as u64).into_par_iter().map(|i| ensemble_member(cfg, base_seed + i)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub count: usize,
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Linear-interpolation quantiles of the finite values.
pub fn quantiles(values: &[f64]) -> Option<Quantiles> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let x = p * (v.len() - 1) as f64;
        let (i, f) = (x.floor() as usize, x - x.floor());
        if i + 1 < v.len() {
            v[i] + f * (v[i + 1] - v[i])
        } else {
            v[i]
        }
    };
    Some(Quantiles { count: v.len(), min: v[0], q25: q(0.25), median: q(0.5), q75: q(0.75), max: v[v.len() - 1] })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSummary {
    pub schema: String,
    pub case: String,
    pub runs: usize,
    pub converged: usize,
    pub converged_fraction: f64,
    /// Converged rows with an infinite `r_e` (zero deviation at τ2).
    pub r_e_infinite: usize,
    /// Converged rows where `dtau_theoretical > dtau_computed`.
    pub ordering_violations: usize,
    pub ordering_checked: usize,
    /// Published feasibility ratios, reported beside `converged_fraction`.
    pub reference_feasibility_percent: BTreeMap<String, f64>,
    pub metrics: BTreeMap<String, Quantiles>,
}

pub fn summarize(case: &str, rows: &[EnsembleRow]) -> EnsembleSummary {
    let conv: Vec<&EnsembleRow> = rows.iter().filter(|r| r.converged()).collect();
    let mut metrics = BTreeMap::new();
    for (k, name) in EnsembleRow::empty(0, "").metrics().iter().map(|m| m.0).enumerate() {
        let vals: Vec<f64> = conv.iter().filter_map(|r| r.metrics()[k].1).collect();
        if let Some(q) = quantiles(&vals) {
            metrics.insert(name.to_string(), q);
        }
    }
    let ordered: Vec<(f64, f64)> = conv.iter().filter_map(|r| Some((r.dtau_theoretical?, r.dtau_computed?))).collect();
    EnsembleSummary {
        schema: ENSEMBLE_SCHEMA.into(),
        case: case.into(),
        runs: rows.len(),
        converged: conv.len(),
        converged_fraction: conv.len() as f64 / rows.len().max(1) as f64,
        r_e_infinite: conv.iter().filter(|r| r.r_e.is_some_and(|v| v.is_infinite())).count(),
        ordering_violations: ordered.iter().filter(|(t, c)| t > c).count(),
        ordering_checked: ordered.len(),
        reference_feasibility_percent: REFERENCE_FEASIBILITY_PERCENT.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        metrics,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub metric: String,
    pub bin: usize,
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
}

/// Equal-width binned counts of each metric over the converged rows.
pub fn histograms(rows: &[EnsembleRow], bins: usize) -> Vec<HistogramBin> {
    let conv: Vec<&EnsembleRow> = rows.iter().filter(|r| r.converged()).collect();
    let mut out = Vec::new();
    for (k, name) in EnsembleRow::empty(0, "").metrics().iter().map(|m| m.0).enumerate() {
        let vals: Vec<f64> = conv.iter().filter_map(|r| r.metrics()[k].1).filter(|v| v.is_finite()).collect();
        if vals.is_empty() {
            continue;
        }
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0usize; bins];
        for v in &vals {
            let i = if width > 0.0 { (((v - lo) / width) as usize).min(bins - 1) } else { 0 };
            counts[i] += 1;
        }
        for (i, c) in counts.into_iter().enumerate() {
            out.push(HistogramBin {
                metric: name.into(),
                bin: i,
                lower: lo + width * i as f64,
                upper: if i + 1 == bins { hi } else { lo + width * (i + 1) as f64 },
                count: c,
            });
        }
    }
    out
}

/// CSV with a leading `# <schema>` line.
pub fn write_csv<T: Serialize, W: Write>(mut w: W, items: &[T]) -> Result<()> {
    writeln!(w, "# {ENSEMBLE_SCHEMA}")?;
    let mut wr = csv::Writer::from_writer(w);
    for it in items {
        wr.serialize(it).map_err(|e| Error::Io(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_ensemble_csv(path: &Path) -> Result<Vec<EnsembleRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == format!("# {ENSEMBLE_SCHEMA}") => {}
        other => return Err(Error::Config(format!("{}: unexpected schema line {other:?}", path.display()))),
    }
    let body = lines.collect::<Vec<_>>().join("\n");
    csv::Reader::from_reader(body.as_bytes())
        .deserialize()
        .collect::<std::result::Result<Vec<EnsembleRow>, _>>()
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

// ---- command line ----

#[derive(Parser, Debug)]
#[command(name = "mtd", version, about = "Missed-thrust-robust trajectory design and robustness certificates")]
pub struct Cli {
    /// Scenario configuration (JSON).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Initialize, solve and write `solution.json`.
    Solve,
    /// Certificate of a solution: bounds, safe radius, δτ_max and the triad.
    Certify {
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        epsilon: Option<f64>,
    },
    /// Independent solves over consecutive seeds.
    Ensemble {
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Exact vs central-difference constraint Jacobian.
    CheckJacobian {
        #[arg(long, value_enum, default_value_t = PointSource::Simulated)]
        point: PointSource,
        #[arg(long)]
        solution: Option<PathBuf>,
    },
    /// Controllability-energy diagnostic after the outage.
    Recover {
        #[arg(long)]
        solution: PathBuf,
        #[arg(long = "t-rec")]
        t_rec: Option<f64>,
        /// Per-axis deviation-control bound, km/s².
        #[arg(long = "u-bar")]
        u_bar: Option<f64>,
    },
}

fn load_config(cli: &Cli) -> Result<ScenarioConfig> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ScenarioConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(v)?).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Result<fs::File> {
    fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn execute(cli: &Cli) -> Result<i32> {
    fs::create_dir_all(&cli.out).map_err(|e| Error::Io(format!("{}: {e}", cli.out.display())))?;
    match &cli.command {
        Command::Solve => {
            let cfg = load_config(cli)?;
            let sol = solve_run(&cfg, cfg.seed)?;
            let path = cli.out.join("solution.json");
            sol.save(&path)?;
            let r = &sol.checkpoint.report;
            println!(
                "{:?}: objective {:.6e}, violation {:.3e}, stationarity {:.3e}, T = {:.3} s -> {}",
                r.status,
                r.objective,
                r.max_violation,
                r.stationarity,
                sol.decision.t_dag,
                path.display()
            );
            Ok(if r.status == SolveStatus::Diverged { EXIT_DIVERGED } else { EXIT_OK })
        }
        Command::Certify { solution, epsilon } => {
            let sol = SolutionFile::load(solution)?;
            let c = certify_run(&sol, epsilon.unwrap_or(sol.config.epsilon))?;
            if c.envelope_consistency > CONSISTENCY_GATE {
                eprintln!("envelope consistency {:.3e} exceeds {CONSISTENCY_GATE:e}", c.envelope_consistency);
                return Ok(EXIT_GATE);
            }
            let path = cli.out.join("certificate.json");
            write_json(&path, &c)?;
            match &c.certificate {
                Some(k) => println!(
                    "delta = {:.6e} km, dtau_max = {:.6e} s ({:?}), dtau_actual = {:.6e} s -> {}",
                    k.delta,
                    k.dtau_max,
                    k.branch,
                    c.triad.dtau_actual,
                    path.display()
                ),
                None => println!("no outage: degenerate triad -> {}", path.display()),
            }
            Ok(EXIT_OK)
        }
        Command::Ensemble { runs } => {
            let cfg = load_config(cli)?;
            let runs = runs.unwrap_or(cfg.ensemble.runs);
            if runs == 0 {
                return Err(Error::Config("--runs: must be >= 1".into()));
            }
            let rows = ensemble_rows(&cfg, runs, cfg.seed);
            write_csv(create(&cli.out.join("ensemble.csv"))?, &rows)?;
            let summary = summarize(&cfg.case_label(), &rows);
            write_json(&cli.out.join("summary.json"), &summary)?;
            write_csv(create(&cli.out.join("histograms.csv"))?, &histograms(&rows, cfg.ensemble.histogram_bins))?;
            println!(
                "{} of {} runs converged ({:.1}%); ordering violations {} of {}",
                summary.converged,
                summary.runs,
                100.0 * summary.converged_fraction,
                summary.ordering_violations,
                summary.ordering_checked
            );
            Ok(EXIT_OK)
        }
        Command::CheckJacobian { point, solution } => {
            let sol = solution.as_deref().map(SolutionFile::load).transpose()?;
            let cfg = match (&cli.config, &sol) {
                (None, Some(s)) => s.config.clone(),
                _ => load_config(cli)?,
            };
            let seed = cli.seed.unwrap_or(cfg.seed);
            let p = cfg.problem()?;
            let z = evaluation_point(&p, *point, seed, sol.as_ref())?;
            let (check, summary) = check_jacobian_run(&p, &z, &cfg, *point, seed)?;
            p.write_e_rel_csv(&check, create(&cli.out.join("e_rel.csv"))?)?;
            p.write_sparsity_csv(create(&cli.out.join("sparsity.csv"))?)?;
            write_json(&cli.out.join("jacobian.json"), &summary)?;
            println!(
                "max e_rel {:.3e} (gate {:.0e}), median {:.3e}, {} entries",
                summary.max_e_rel, summary.gate, summary.median_e_rel, summary.entries
            );
            Ok(if summary.passed { EXIT_OK } else { EXIT_GATE })
        }
        Command::Recover { solution, t_rec, u_bar } => {
            let mut sol = SolutionFile::load(solution)?;
            if let Some(u) = u_bar {
                sol.config.recovery.u_bar = Some(*u);
                sol.config.validate()?;
            }
            let rep = recover_run(&sol, *t_rec)?;
            let path = cli.out.join("recovery.json");
            write_json(&path, &rep)?;
            println!(
                "E_min {:.6e}, E_avail {:.6e}, r_e {:.6e}{} -> {}",
                rep.e_min,
                rep.e_avail,
                rep.r_e,
                if rep.singular { " (singular Gramian)" } else { "" },
                path.display()
            );
            Ok(EXIT_OK)
        }
    }
}

/// Parse `args` and run; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
