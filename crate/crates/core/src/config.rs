//! Run configuration: TOML sections over profile defaults, with dotted
//! `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::Scheme;
use crate::losses::LossWeights;
use crate::network::{Ablation, EncoderConfig, ModelConfig};
use crate::optim::AdamConfig;
use crate::synthdata::Mix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Published hyperparameters at full input size.
    Paper,
    /// Scaled down to finish on one CPU core.
    Desk,
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "paper" => Ok(Profile::Paper),
            "desk" => Ok(Profile::Desk),
            other => Err(Error::Config(format!("unknown profile `{}` (expected paper or desk)", other))),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Paper => "paper",
            Profile::Desk => "desk",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    /// Sizes and challenge mix used by `generate`.
    pub train_count: usize,
    pub test_count: usize,
    pub mix: String,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train: None,
            val: None,
            test: None,
            train_count: 200,
            test_count: 100,
            mix: "uniform".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub input_size: usize,
    pub stem_channels: usize,
    pub channels: [usize; 4],
    pub decoder_width: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let e = EncoderConfig::default();
        Self {
            input_size: e.input_size,
            stem_channels: e.stem_channels,
            channels: e.channels,
            decoder_width: ModelConfig::default().decoder_width,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationSection {
    pub no_afb: bool,
    pub no_aem: bool,
    pub no_iigm: bool,
    /// Comma-separated scheme codes; empty means all five.
    pub schemes: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
}

impl Default for OptimSection {
    fn default() -> Self {
        let a = AdamConfig::default();
        Self {
            lr: a.lr,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            batch_size: 16,
            epochs: 80,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub profile: Profile,
    pub out: PathBuf,
    pub data: DataConfig,
    pub model: ModelSection,
    pub ablation: AblationSection,
    pub loss: LossWeights,
    pub optim: OptimSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

/// Overwrites `base` with `over`, descending into tables.
fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Parses an override value as TOML, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {}", raw)
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').map(str::trim).collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key `{}`", key)));
    }
    let mut table = root;
    for p in &parts[..parts.len() - 1] {
        table = match table.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{}`: `{}` is not a section", key, p))),
        };
    }
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let mut c = RunConfig {
            seed: 7,
            profile,
            out: PathBuf::from("runs/desk"),
            data: DataConfig::default(),
            model: ModelSection::default(),
            ablation: AblationSection::default(),
            loss: LossWeights::default(),
            optim: OptimSection::default(),
        };
        match profile {
            Profile::Desk => {
                c.optim.lr = 1e-3;
                c.optim.batch_size = 8;
                c.optim.epochs = 30;
                c.model.input_size = 64;
            }
            Profile::Paper => {
                c.out = PathBuf::from("runs/paper");
                c.model.input_size = 352;
            }
        }
        c
    }

    /// Profile defaults, then the file, then `overrides` in order. The
    /// profile is taken from the last of: file, `profile`, a `profile` override.
    pub fn resolve(file: Option<&Path>, profile: Option<Profile>, overrides: &[(String, String)]) -> Result<Self> {
        let file_table = match file {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::io(p, e))?
                .parse::<toml::Table>()
                .map_err(|e| Error::format(p, e.message().to_string()))?,
            None => toml::Table::new(),
        };
        let mut chosen = match file_table.get("profile") {
            Some(v) => v
                .as_str()
                .ok_or_else(|| Error::Config("`profile` must be a string".into()))?
                .parse()?,
            None => Profile::Desk,
        };
        if let Some(p) = profile {
            chosen = p;
        }
        for (k, v) in overrides {
            if k == "profile" {
                chosen = v.trim_matches('"').parse()?;
            }
        }
        let mut table = toml::Table::try_from(Self::for_profile(chosen))
            .map_err(|e| Error::Config(format!("default config: {}", e)))?;
        merge(&mut table, file_table);
        for (k, v) in overrides {
            set_path(&mut table, k, parse_value(v))?;
        }
        table.insert("profile".into(), toml::Value::String(chosen.to_string()));
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn schemes(&self) -> Result<Option<Vec<Scheme>>> {
        let s = self.ablation.schemes.trim();
        if s.is_empty() {
            Ok(None)
        } else {
            Scheme::parse_list(s).map(Some)
        }
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                input_size: m.input_size,
                stem_channels: m.stem_channels,
                channels: m.channels,
            },
            decoder_width: m.decoder_width,
            ablation: Ablation {
                no_afb: self.ablation.no_afb,
                no_aem: self.ablation.no_aem,
                no_iigm: self.ablation.no_iigm,
                schemes: self.schemes()?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.optim.lr,
            beta1: self.optim.beta1,
            beta2: self.optim.beta2,
            eps: self.optim.eps,
        }
    }

    pub fn mix(&self) -> Result<Mix> {
        self.data.mix.parse()
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.adam().validate()?;
        self.loss.validate()?;
        self.mix()?;
        if self.optim.batch_size == 0 || self.optim.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be at least 1".into()));
        }
        Ok(())
    }
}

/// Splits `key=value`.
pub fn parse_override(s: &str) -> Result<(String, String)> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{}` is not key=value", s)))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}
