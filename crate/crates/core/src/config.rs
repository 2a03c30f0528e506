//! TOML run configuration: a built-in case name or an inline case
//! specification, plus continuation, solver and output settings.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bvp::SolverSettings;
use crate::continuation::{ContinuationError, ContinuationSchedule};
use crate::excitation::{
    builtin_case, non_periodic_force, periodic_force, BoundarySpec, CaseSpec, ExcitationError,
    ForceTerm, FourierForce,
};
use crate::model::{ModelError, ModelParams};
use crate::postprocess::{ArcThresholds, DEFAULT_RESOLUTION};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },
}

impl ConfigError {
    fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        ConfigError::Invalid {
            key: key.into(),
            message: message.into(),
        }
    }

    /// The offending key for validation errors.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } => Some(key),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BuiltinForce {
    Periodic,
    NonPeriodic,
}

/// Either a reference to a bundled coefficient set (optionally with a
/// different overall scale) or an explicit list of terms.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExcitationConfig {
    pub builtin: Option<BuiltinForce>,
    pub scale: Option<f64>,
    pub terms: Option<Vec<ForceTerm>>,
}

impl ExcitationConfig {
    fn resolve(&self) -> Result<FourierForce, ConfigError> {
        let mut force = match (&self.builtin, &self.terms) {
            (Some(_), Some(_)) | (None, None) => {
                return Err(ConfigError::invalid(
                    "excitation",
                    "give exactly one of `builtin` or `terms`",
                ))
            }
            (Some(BuiltinForce::Periodic), None) => periodic_force(),
            (Some(BuiltinForce::NonPeriodic), None) => non_periodic_force(),
            (None, Some(terms)) => FourierForce {
                scale: 1.0,
                terms: terms.clone(),
            },
        };
        if let Some(scale) = self.scale {
            force.scale = scale;
        }
        force.validate().map_err(|e| match e {
            ExcitationError::InvalidFrequency { index, .. }
            | ExcitationError::ZeroFrequency { index } => {
                ConfigError::invalid(format!("excitation.terms[{index}].omega"), e.to_string())
            }
            ExcitationError::NonFinite { index } => {
                ConfigError::invalid(format!("excitation.terms[{index}]"), e.to_string())
            }
            ExcitationError::InvalidScale => {
                ConfigError::invalid("excitation.scale", e.to_string())
            }
            ExcitationError::LengthMismatch(_) => {
                ConfigError::invalid("excitation.terms", e.to_string())
            }
        })?;
        Ok(force)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputFormat {
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: Option<PathBuf>,
    pub formats: Vec<OutputFormat>,
    /// Number of dense trajectory samples.
    pub resolution: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: None,
            formats: vec![OutputFormat::Csv, OutputFormat::Json],
            resolution: DEFAULT_RESOLUTION,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Name of a built-in case; mutually exclusive with the inline tables.
    pub case: Option<String>,
    /// Identifier for an inline case.
    pub id: Option<String>,
    pub model: Option<ModelParams>,
    pub excitation: Option<ExcitationConfig>,
    pub boundary: Option<BoundarySpec>,
    #[serde(default)]
    pub schedule: ContinuationSchedule,
    #[serde(default)]
    pub solver: SolverSettings,
    #[serde(default)]
    pub output: OutputConfig,
    #[serde(default)]
    pub arcs: ArcThresholds,
}

impl RunConfig {
    /// Configuration running a built-in case with default settings.
    pub fn builtin(case: &str) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            case: Some(case.to_string()),
            id: None,
            model: None,
            excitation: None,
            boundary: None,
            schedule: ContinuationSchedule::default(),
            solver: SolverSettings::default(),
            output: OutputConfig::default(),
            arcs: ArcThresholds::default(),
        }
    }

    pub fn from_toml(source: &str) -> Result<Self, ConfigError> {
        toml::from_str(source).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|span| line_column(source, span.start))
                .unwrap_or((0, 0));
            ConfigError::Parse {
                line,
                column,
                message: e.message().to_string(),
            }
        })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let source = fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&source)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Checks every invariant and resolves the case to solve.
    pub fn resolve(&self) -> Result<CaseSpec, ConfigError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(ConfigError::invalid(
                "schema_version",
                format!(
                    "unsupported version {} (expected {SCHEMA_VERSION})",
                    self.schema_version
                ),
            ));
        }
        let inline = self.model.is_some() || self.excitation.is_some() || self.boundary.is_some();
        let case = match (&self.case, inline) {
            (Some(_), true) => {
                return Err(ConfigError::invalid(
                    "case",
                    "a built-in case name excludes the inline [model], [excitation] and [boundary] tables",
                ))
            }
            (Some(name), false) => builtin_case(name).ok_or_else(|| {
                ConfigError::invalid("case", format!("unknown built-in case {name:?} (expected case1, case2 or case3)"))
            })?,
            (None, true) => {
                let model = self
                    .model
                    .ok_or_else(|| ConfigError::invalid("model", "missing table"))?;
                let excitation = self
                    .excitation
                    .as_ref()
                    .ok_or_else(|| ConfigError::invalid("excitation", "missing table"))?;
                let boundary = self
                    .boundary
                    .clone()
                    .ok_or_else(|| ConfigError::invalid("boundary", "missing table"))?;
                CaseSpec {
                    id: self.id.clone().unwrap_or_else(|| "custom".into()),
                    model,
                    excitation: excitation.resolve()?,
                    boundary,
                }
            }
            (None, false) => {
                return Err(ConfigError::invalid(
                    "case",
                    "give either a built-in case name or inline [model], [excitation] and [boundary] tables",
                ))
            }
        };
        validate_case(&case)?;
        self.schedule.validate(&case).map_err(|e| match e {
            ContinuationError::InvalidSchedule(msg) => ConfigError::invalid("schedule", msg),
            other => ConfigError::invalid("schedule", other.to_string()),
        })?;
        self.solver
            .validate()
            .map_err(|e| ConfigError::invalid("solver", e.to_string()))?;
        if self.output.resolution < 3 {
            return Err(ConfigError::invalid(
                "output.resolution",
                "needs at least 3 samples",
            ));
        }
        if !(self.arcs.eta > 0.0 && self.arcs.eta < 1.0) {
            return Err(ConfigError::invalid("arcs.eta", "must lie in (0, 1)"));
        }
        if !(self.arcs.min_dwell >= 0.0 && self.arcs.min_dwell.is_finite()) {
            return Err(ConfigError::invalid(
                "arcs.min_dwell",
                "must be finite and non-negative",
            ));
        }
        Ok(case)
    }
}

fn validate_case(case: &CaseSpec) -> Result<(), ConfigError> {
    case.model.validate().map_err(|e| match e {
        ModelError::NotPositive { field, .. } => {
            ConfigError::invalid(format!("model.{field}"), e.to_string())
        }
        ModelError::InvalidBounds { .. } => ConfigError::invalid("model", e.to_string()),
    })?;
    let b = &case.boundary;
    for (key, value) in [
        ("boundary.x1_0", b.x1_0),
        ("boundary.x2_0", b.x2_0),
        ("boundary.t0", b.t0),
        ("boundary.tf", b.tf),
    ] {
        if !value.is_finite() {
            return Err(ConfigError::invalid(key, "must be finite"));
        }
    }
    if b.tf <= b.t0 {
        return Err(ConfigError::invalid(
            "boundary.tf",
            format!("final time {} must exceed initial time {}", b.tf, b.t0),
        ));
    }
    Ok(())
}

/// 1-based line and column of a byte offset.
fn line_column(source: &str, offset: usize) -> (usize, usize) {
    let before = &source[..offset.min(source.len())];
    let line = before.matches('\n').count() + 1;
    let column = before
        .rfind('\n')
        .map_or(before.len(), |nl| before.len() - nl - 1)
        + 1;
    (line, column)
}
