//! Study configuration: a single JSON document holding the orbit model,
//! transcription, outage, certificate, solver, ensemble and diagnostic
//! settings. Everything is validated at load time.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::{CurvatureConvention, OrbitModel, Vec3};
use crate::error::{Error, Result};
use crate::recovery::GramianOptions;
use crate::solver::SolveOptions;
use crate::transcription::{adaptive_segments, build_problem, MteScenario, NlpProblem, TranscriptionConfig};

/// Outage placed on the follower grid: segments `first..first + count`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutageConfig {
    /// Follower segment count; `N† − count` when absent.
    #[serde(default)]
    pub n_follower: Option<usize>,
    pub first: usize,
    pub count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateSettings {
    /// Reference samples per leader segment for α and H.
    pub samples_per_segment: usize,
    pub convention: CurvatureConvention,
    /// Samples of the coasting realization for the triad.
    pub triad_samples: usize,
}

impl Default for CertificateSettings {
    fn default() -> Self {
        Self { samples_per_segment: 20, convention: CurvatureConvention::Rigorous, triad_samples: 200 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleSettings {
    pub runs: usize,
    pub histogram_bins: usize,
}

impl Default for EnsembleSettings {
    fn default() -> Self {
        Self { runs: 500, histogram_bins: 20 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoverySettings {
    /// Per-axis deviation-control bound, km/s²; defaults to the thrust limit.
    pub u_bar: Option<f64>,
    /// Recovery horizon, s; defaults to the rest of the mission.
    pub t_rec: Option<f64>,
    pub gramian: GramianOptions,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct JacobianSettings {
    pub fd_step: f64,
    /// Largest admissible pointwise e_rel.
    pub gate: f64,
    pub median_gate: f64,
}

impl Default for JacobianSettings {
    fn default() -> Self {
        Self { fd_step: 1e-6, gate: 1e-6, median_gate: 1e-9 }
    }
}

fn default_epsilon() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub model: OrbitModel,
    #[serde(default)]
    pub transcription: TranscriptionConfig,
    /// Realized outage. Without `bilevel` it only feeds the certificate and
    /// recovery diagnostics of a leader-only design.
    #[serde(default)]
    pub outage: Option<OutageConfig>,
    /// Embed the follower optimality system for the outage.
    #[serde(default)]
    pub bilevel: bool,
    /// Relative linearization-error budget.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub certificate: CertificateSettings,
    #[serde(default)]
    pub solver: SolveOptions,
    #[serde(default)]
    pub ensemble: EnsembleSettings,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub recovery: RecoverySettings,
    #[serde(default)]
    pub jacobian: JacobianSettings,
}

fn at(field: &str, e: Error) -> Error {
    match e {
        Error::Config(m) | Error::InvalidInput(m) => Error::Config(format!("{field}: {m}")),
        other => Error::Config(format!("{field}: {other}")),
    }
}

fn positive(field: &str, v: f64) -> Result<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!("{field}: must be finite and > 0, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn new(model: OrbitModel, transcription: TranscriptionConfig) -> Self {
        Self {
            model,
            transcription,
            outage: None,
            bilevel: false,
            epsilon: default_epsilon(),
            certificate: CertificateSettings::default(),
            solver: SolveOptions::default(),
            ensemble: EnsembleSettings::default(),
            seed: 0,
            recovery: RecoverySettings::default(),
            jacobian: JacobianSettings::default(),
        }
    }

    /// Parse and validate. Errors carry the field path, and parse errors
    /// also the line and column.
    pub fn from_json_str(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            if path == "." {
                Error::Config(inner.to_string())
            } else {
                Error::Config(format!("{path}: {inner}"))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate().map_err(|e| at("model", e))?;
        positive("epsilon", self.epsilon)?;
        self.solver.validate().map_err(|e| at("solver", e))?;
        if self.certificate.samples_per_segment == 0 {
            return Err(Error::Config("certificate.samples_per_segment: must be >= 1".into()));
        }
        if self.certificate.triad_samples == 0 {
            return Err(Error::Config("certificate.triad_samples: must be >= 1".into()));
        }
        if self.ensemble.runs == 0 {
            return Err(Error::Config("ensemble.runs: must be >= 1".into()));
        }
        if self.ensemble.histogram_bins == 0 {
            return Err(Error::Config("ensemble.histogram_bins: must be >= 1".into()));
        }
        if let Some(u) = self.recovery.u_bar {
            positive("recovery.u_bar", u)?;
        }
        if let Some(t) = self.recovery.t_rec {
            positive("recovery.t_rec", t)?;
        }
        let g = &self.recovery.gramian;
        if g.quadrature_steps == 0 || g.substeps == 0 {
            return Err(Error::Config("recovery.gramian: quadrature_steps and substeps must be >= 1".into()));
        }
        positive("jacobian.fd_step", self.jacobian.fd_step)?;
        positive("jacobian.gate", self.jacobian.gate)?;
        positive("jacobian.median_gate", self.jacobian.median_gate)?;
        if let Some(o) = &self.outage {
            let nf = self.follower_segments()?.unwrap_or(0);
            if o.first + o.count > nf {
                return Err(Error::Config(format!(
                    "outage: segments {}..{} exceed the {nf} follower segments",
                    o.first,
                    o.first + o.count
                )));
            }
        }
        if self.bilevel && self.scenario()?.is_none() {
            return Err(Error::Config("bilevel: needs an outage with count >= 1".into()));
        }
        self.problem().map_err(|e| at("transcription", e))?;
        Ok(())
    }

    pub fn follower_segments(&self) -> Result<Option<usize>> {
        let Some(o) = &self.outage else { return Ok(None) };
        adaptive_segments(o.count, self.transcription.n_leader, o.n_follower)
            .map(Some)
            .map_err(|e| at("outage.n_follower", e))
    }

    /// The outage as a follower scenario; `None` without an outage or for
    /// a zero-length one.
    pub fn scenario(&self) -> Result<Option<MteScenario>> {
        let (Some(o), Some(nf)) = (&self.outage, self.follower_segments()?) else { return Ok(None) };
        if o.count == 0 {
            return Ok(None);
        }
        MteScenario::new(nf, o.first, o.count).map(Some).map_err(|e| at("outage", e))
    }

    /// Outage window `[τ1, τ2]` on a mission of length `t_final`.
    pub fn outage_window(&self, t_final: f64) -> Result<Option<(f64, f64)>> {
        let (Some(o), Some(nf)) = (&self.outage, self.follower_segments()?) else { return Ok(None) };
        let h = t_final / nf as f64;
        let tau1 = o.first as f64 * h;
        Ok(Some((tau1, tau1 + o.count as f64 * h)))
    }

    /// Leader-only unless `bilevel` is set.
    pub fn problem(&self) -> Result<NlpProblem> {
        let s = if self.bilevel { self.scenario()? } else { None };
        build_problem(&self.model, s.as_ref(), &self.transcription)
    }

    pub fn u_bar(&self) -> Vec3 {
        [self.recovery.u_bar.unwrap_or(self.transcription.thrust_max); 3]
    }

    /// Short label of the orbit case, used in ensemble summaries.
    pub fn case_label(&self) -> String {
        match &self.model {
            OrbitModel::Circular { .. } => "circular".into(),
            OrbitModel::Eccentric { nu_range, .. } => {
                if nu_range[0] < 90f64.to_radians() {
                    "eccentric_case_1".into()
                } else {
                    "eccentric_case_2".into()
                }
            }
            OrbitModel::Linear { .. } => "linear".into(),
        }
    }
}
