//! JSON scenario configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::models::{Design, GlmKind, IidFamily, Model, ModelError, OracleOptions, TruthSpec, DEFAULT_ORACLE_SEED};
use crate::verify::RunSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassName {
    Glm,
    Lad,
    Iid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum DesignConfig {
    /// Row `i` is `e_{i mod p}`; needs `n` divisible by `p`.
    OrthonormalReplicated,
    /// i.i.d. standard normal entries, optionally with a leading intercept column.
    StandardNormal {
        seed: u64,
        #[serde(default)]
        intercept: bool,
    },
    /// Headerless numeric CSV, resolved relative to the config file.
    Csv { path: PathBuf },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub draws: Option<usize>,
    #[serde(default = "default_oracle_seed")]
    pub seed: u64,
}

fn default_oracle_seed() -> u64 {
    DEFAULT_ORACLE_SEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub class: ClassName,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kind: Option<GlmKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub family: Option<IidFamily>,
    pub n: usize,
    pub p: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub design: Option<DesignConfig>,
    pub truth: TruthSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scales: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleConfig>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    Json,
    Csv,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub directory: PathBuf,
    pub formats: Vec<OutputFormat>,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { directory: PathBuf::from("out"), formats: vec![OutputFormat::Json, OutputFormat::Csv] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    #[serde(default)]
    pub run: RunSpec,
    #[serde(default)]
    pub output: OutputConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config schema: {0}")]
    Schema(String),
    #[error("config field `{field}`: {message}")]
    Field { field: String, message: String },
}

fn field(field: &str, message: impl Into<String>) -> ConfigError {
    ConfigError::Field { field: field.into(), message: message.into() }
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Config = serde_json::from_str(text).map_err(|e| ConfigError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads and validates a config; relative CSV paths are resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.into(), source })?;
        let mut cfg = Self::from_json(&text)?;
        if let Some(DesignConfig::Csv { path: csv }) = &mut cfg.model.design {
            if csv.is_relative() {
                if let Some(dir) = path.parent() {
                    *csv = dir.join(&*csv);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let m = &self.model;
        if m.n == 0 {
            return Err(field("model.n", "must be positive"));
        }
        if m.p == 0 {
            return Err(field("model.p", "must be positive"));
        }
        if m.n < m.p {
            return Err(field("model.n", format!("n = {} is below p = {}", m.n, m.p)));
        }
        match m.class {
            ClassName::Glm => {
                if m.kind.is_none() {
                    return Err(field("model.kind", "required for class glm"));
                }
                if m.design.is_none() {
                    return Err(field("model.design", "required for class glm"));
                }
            }
            ClassName::Lad => {
                if m.design.is_none() {
                    return Err(field("model.design", "required for class lad"));
                }
            }
            ClassName::Iid => {
                let fam = m.family.ok_or_else(|| field("model.family", "required for class iid"))?;
                if fam.dim() != m.p {
                    return Err(field("model.p", format!("family {} has dimension {}", fam.name(), fam.dim())));
                }
            }
        }
        if matches!(m.design, Some(DesignConfig::OrthonormalReplicated)) && !m.n.is_multiple_of(m.p) {
            return Err(field("model.design", "orthonormal_replicated needs n divisible by p"));
        }
        if let Some(s) = &m.scales {
            if s.len() != m.n {
                return Err(field("model.scales", format!("expected {} entries", m.n)));
            }
        }
        self.run.validate().map_err(|e| field("run", e.to_string()))
    }

    fn oracle(&self, default: OracleOptions) -> OracleOptions {
        match self.model.oracle {
            Some(o) => OracleOptions { draws: o.draws, seed: o.seed },
            None => default,
        }
    }

    pub fn build_design(&self) -> Result<Option<Design>, ModelError> {
        let m = &self.model;
        let design = match &m.design {
            None => return Ok(None),
            Some(DesignConfig::OrthonormalReplicated) => Design::orthonormal_replicated(m.p, m.n / m.p)?,
            Some(DesignConfig::StandardNormal { seed, intercept }) => {
                Design::standard_normal(m.n, m.p, *seed, *intercept)?
            }
            Some(DesignConfig::Csv { path }) => Design::from_csv(path)?,
        };
        if design.n() != m.n || design.p() != m.p {
            return Err(ModelError::InvalidSpec(format!(
                "design is {}x{}, config declares n = {}, p = {}",
                design.n(),
                design.p(),
                m.n,
                m.p
            )));
        }
        Ok(Some(design))
    }

    pub fn build_model(&self) -> Result<Model, ModelError> {
        let m = &self.model;
        let design = self.build_design()?;
        match m.class {
            ClassName::Glm => {
                Model::glm(design.expect("validated"), m.kind.expect("validated"), m.truth.clone(), m.scales.clone())
            }
            ClassName::Lad => {
                Model::lad(design.expect("validated"), m.truth.clone(), self.oracle(OracleOptions::density_default()))
            }
            ClassName::Iid => Model::iid(
                m.family.expect("validated"),
                m.n,
                m.truth.clone(),
                self.oracle(OracleOptions::expectation_default()),
            ),
        }
    }

    /// Resolved config as pretty JSON, embedded in every report.
    pub fn to_json_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
