//! Run configuration: a TOML file layered over a named profile.
//!
//! ```toml
//! profile = "desk"          # or "paper"
//!
//! [train]                   # TrainConfig fields
//! lambda_go = 1.0
//!
//! [source]                  # DomainSpec fields
//! identities = 200
//!
//! [target]
//! shift_offset = 0.5
//!
//! [ablate]
//! seeds = [0, 1, 2]
//! grid = { lambda_go = [0.0, 1.0], alpha = [0.4, 0.6] }
//!
//! [gradcheck]               # CertifyOptions fields
//! instances = 100
//! ```
//!
//! Keys left out keep the profile's value. Unknown keys and type errors are
//! reported with the line and column they occur on.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use dacouple::gradcheck::CertifyOptions;
use dacouple::synthetic::DomainSpec;
use dacouple::training::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// A problem with the configuration; maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Loss weights and schedule tuned for the default synthetic benchmark.
    #[default]
    Desk,
    /// The published hyper-parameters.
    Paper,
}

impl Profile {
    pub fn train(self) -> TrainConfig {
        match self {
            Profile::Desk => TrainConfig::desk(),
            Profile::Paper => TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub seeds: Vec<u64>,
    /// One-factor sweeps: each key is varied over its values with every
    /// other setting at the base value.
    pub grid: BTreeMap<String, Vec<Value>>,
}

impl Default for AblateConfig {
    fn default() -> Self {
        let values = |v: &[f64]| v.iter().map(|&x| Value::from(x)).collect::<Vec<_>>();
        let lambdas = [0.0, 0.01, 0.1, 1.0, 5.0];
        let grid = BTreeMap::from([
            ("lambda_go".to_string(), values(&lambdas)),
            ("lambda_lo".to_string(), values(&lambdas)),
            ("lambda_dim".to_string(), values(&[0.0, 0.05, 0.5, 5.0, 50.0])),
            ("alpha".to_string(), values(&[0.3, 0.4, 0.5, 0.6, 0.7, 0.8])),
            ("beta".to_string(), values(&[0.02, 0.05, 0.1, 0.2])),
        ]);
        Self { seeds: (0..5).collect(), grid }
    }
}

/// Fully resolved configuration, as recorded in the run manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub train: TrainConfig,
    pub source: DomainSpec,
    pub target: DomainSpec,
    pub ablate: AblateConfig,
    pub gradcheck: CertifyOptions,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            train: profile.train(),
            source: DomainSpec::default_source(),
            target: DomainSpec::default_target(),
            ablate: AblateConfig::default(),
            gradcheck: CertifyOptions::default(),
        }
    }

    /// Reads `path`, or returns the desk profile when `path` is `None`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::for_profile(Profile::Desk));
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_error(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| config_error(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        // Strict pass for diagnostics: every section must deserialize on its
        // own, which rejects unknown keys and wrong types with a location.
        let shape: FileShape = toml::from_str(text).map_err(|e| config_error(e.to_string().trim_end().to_string()))?;
        let mut base = serde_json::to_value(Self::for_profile(shape.profile.unwrap_or_default()))?;
        let user: Value = serde_json::to_value(toml::from_str::<toml::Table>(text)?)?;
        overlay(&mut base, &user);
        let config: Self = serde_json::from_value(base).map_err(|e| config_error(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.train.validate().map_err(|e| config_error(format!("[train] {e}")))?;
        self.source.validate().map_err(|e| config_error(format!("[source] {e}")))?;
        self.target.validate().map_err(|e| config_error(format!("[target] {e}")))?;
        if self.ablate.seeds.is_empty() {
            return Err(config_error("[ablate] seeds must not be empty"));
        }
        Ok(())
    }

    /// Copy with `key = value` set in the `[train]` section.
    pub fn with_train_value(&self, key: &str, value: &Value) -> anyhow::Result<Self> {
        let mut train = serde_json::to_value(&self.train)?;
        match &mut train {
            Value::Object(m) if m.contains_key(key) => {
                m.insert(key.to_string(), value.clone());
            }
            _ => return Err(config_error(format!("unknown train setting {key:?}"))),
        }
        let train: TrainConfig =
            serde_json::from_value(train).map_err(|e| config_error(format!("{key} = {value}: {e}")))?;
        train.validate().map_err(|e| config_error(format!("{key} = {value}: {e}")))?;
        Ok(Self { train, ..self.clone() })
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
#[allow(dead_code)]
struct FileShape {
    profile: Option<Profile>,
    train: Option<TrainConfig>,
    source: Option<DomainSpec>,
    target: Option<DomainSpec>,
    ablate: Option<AblateConfig>,
    gradcheck: Option<CertifyOptions>,
}

/// Replaces leaves of `base` with those of `over`, recursing into tables
/// except `ablate.grid`, which is taken whole.
fn overlay(base: &mut Value, over: &Value) {
    let (Value::Object(b), Value::Object(o)) = (base, over) else {
        return;
    };
    for (k, v) in o {
        match b.get_mut(k) {
            Some(slot @ Value::Object(_)) if v.is_object() && k != "grid" => overlay(slot, v),
            _ => {
                b.insert(k.clone(), v.clone());
            }
        }
    }
}

/// Parses one `--grid` value: JSON scalars (`0.1`, `true`) as such,
/// anything else as a string (`direct-transfer`).
pub fn parse_grid_value(s: &str) -> Value {
    serde_json::from_str(s).unwrap_or_else(|_| Value::String(s.to_string()))
}
