//! Configuration files, environment overrides, and run manifests.
//!
//! A config file is TOML with the sections `protect`, `schedule`, `eot`,
//! `extractors`, `evaluate`, and `robustness`. Unknown keys are errors.
//! Any key can be overridden from the environment as
//! `ANIMGUARD_<SECTION>_<KEY>`, where the value is read as a TOML literal
//! and falls back to a plain string.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::eot::EotConfig;
use crate::error::{Error, Result};
use crate::extractors::{ExtractorsConfig, ResolutionRecord};
use crate::losses::LossWeights;
use crate::metrics::{parse_metric_list, Metric};
use crate::pgd::{ProtectionConfig, ScheduleConfig};
use crate::robustness::SweepAxis;

pub const ENV_PREFIX: &str = "ANIMGUARD_";
pub const SECTIONS: [&str; 6] = ["protect", "schedule", "eot", "extractors", "evaluate", "robustness"];

/// A real number written either as a decimal or as a fraction such as
/// `16/255`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Fraction(pub f64);

impl FromStr for Fraction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |e: &dyn fmt::Display| Error::invalid(format!("cannot read `{s}` as a number or fraction: {e}"));
        let v = match s.split_once('/') {
            Some((n, d)) => {
                let n: f64 = n.trim().parse().map_err(|e| bad(&e))?;
                let d: f64 = d.trim().parse().map_err(|e| bad(&e))?;
                if d == 0.0 {
                    return Err(bad(&"zero denominator"));
                }
                n / d
            }
            None => s.parse().map_err(|e| bad(&e))?,
        };
        if !v.is_finite() {
            return Err(bad(&"not finite"));
        }
        Ok(Fraction(v))
    }
}

impl Serialize for Fraction {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.0)
    }
}

impl<'de> Deserialize<'de> for Fraction {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(i64),
            Float(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(v) => Ok(Fraction(v as f64)),
            Raw::Float(v) => Ok(Fraction(v)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtectSection {
    /// L-infinity budget.
    pub budget: Fraction,
    pub step_size: Fraction,
    pub iterations: usize,
    pub decay: f64,
    pub frames: usize,
    pub seed: u64,
    pub lambda_vae: f64,
    pub lambda_clip: f64,
    pub lambda_ref: f64,
    pub lambda_frame: f64,
    pub lambda_lpips: f64,
    /// Perceptual budget.
    pub lpips_budget: f64,
}

impl Default for ProtectSection {
    fn default() -> Self {
        let p = ProtectionConfig::default();
        let w = p.weights;
        Self {
            budget: Fraction(p.eta),
            step_size: Fraction(p.gamma),
            iterations: p.iterations,
            decay: p.decay,
            frames: p.frames,
            seed: p.seed,
            lambda_vae: w.lambda_vae,
            lambda_clip: w.lambda_clip,
            lambda_ref: w.lambda_ref,
            lambda_frame: w.lambda_frame,
            lambda_lpips: w.lambda_lpips,
            lpips_budget: w.zeta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluateSection {
    pub metrics: Vec<Metric>,
    /// Embedder family for the embedding metrics: `toy` or `none`.
    pub embedders: String,
}

impl Default for EvaluateSection {
    fn default() -> Self {
        Self { metrics: Metric::ALL.to_vec(), embedders: "toy".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RobustnessSection {
    /// Axes in `kind` or `kind:p1,p2` form.
    pub sweeps: Vec<String>,
    pub seed: u64,
    pub metrics: Vec<Metric>,
}

impl Default for RobustnessSection {
    fn default() -> Self {
        Self {
            sweeps: ["jpeg", "blur", "noise", "median", "bits"].map(String::from).to_vec(),
            seed: 0,
            metrics: vec![Metric::Psnr, Metric::Ssim, Metric::Lpips],
        }
    }
}

impl RobustnessSection {
    pub fn axes(&self) -> Result<Vec<SweepAxis>> {
        self.sweeps.iter().map(|s| s.parse()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct AppConfig {
    pub protect: ProtectSection,
    pub schedule: ScheduleConfig,
    pub eot: EotConfig,
    pub extractors: ExtractorsConfig,
    pub evaluate: EvaluateSection,
    pub robustness: RobustnessSection,
}

fn parse_literal(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl AppConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Configuration(e.to_string()))
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Configuration(format!("{}: {e}", path.display())))
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serde(e.to_string()))
    }

    /// Applies `ANIMGUARD_<SECTION>_<KEY>` overrides from `vars`.
    pub fn with_env<I, K, V>(&self, vars: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut doc = toml::Table::try_from(self).map_err(|e| Error::Serde(e.to_string()))?;
        let mut touched = false;
        for (k, v) in vars {
            let Some(rest) = k.as_ref().strip_prefix(ENV_PREFIX) else { continue };
            let rest = rest.to_ascii_lowercase();
            let (section, key) = SECTIONS
                .iter()
                .find_map(|s| rest.strip_prefix(s).and_then(|r| r.strip_prefix('_')).map(|r| (*s, r)))
                .ok_or_else(|| Error::Configuration(format!("environment override {} names no known section", k.as_ref())))?;
            if key.is_empty() {
                return Err(Error::Configuration(format!("environment override {} names no key", k.as_ref())));
            }
            let table = doc
                .entry(section)
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .expect("sections are tables");
            table.insert(key.to_string(), parse_literal(v.as_ref()));
            touched = true;
        }
        if !touched {
            return Ok(self.clone());
        }
        doc.try_into().map_err(|e: toml::de::Error| Error::Configuration(format!("environment override: {e}")))
    }

    /// File (or defaults) followed by process environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let base = match path {
            Some(p) => Self::from_file(p)?,
            None => Self::default(),
        };
        base.with_env(std::env::vars())
    }

    pub fn protection(&self) -> ProtectionConfig {
        let p = &self.protect;
        ProtectionConfig {
            eta: p.budget.0,
            gamma: p.step_size.0,
            iterations: p.iterations,
            decay: p.decay,
            weights: LossWeights {
                lambda_vae: p.lambda_vae,
                lambda_clip: p.lambda_clip,
                lambda_ref: p.lambda_ref,
                lambda_frame: p.lambda_frame,
                lambda_lpips: p.lambda_lpips,
                zeta: p.lpips_budget,
            },
            frames: p.frames,
            seed: p.seed,
            eot: self.eot.clone(),
            schedule: self.schedule.clone(),
        }
    }

    /// Every default written out and the extractor preset expanded.
    pub fn resolved(&self) -> Result<Self> {
        let out = Self { extractors: self.extractors.materialize()?, ..self.clone() };
        out.protection().validate()?;
        out.robustness.axes()?;
        Ok(out)
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> Result<String> {
        let json = serde_json::to_vec(self)?;
        Ok(hex::encode(Sha256::digest(&json)))
    }

    pub fn set_metrics(&mut self, list: &str) -> Result<()> {
        self.evaluate.metrics = parse_metric_list(list)?;
        Ok(())
    }
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: AppConfig,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub resolution: Option<ResolutionRecord>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub inputs: Vec<InputRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRecord {
    pub path: PathBuf,
    pub sha256: String,
}

impl InputRecord {
    pub fn of(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Ok(Self { path: path.to_path_buf(), sha256: hex::encode(Sha256::digest(&bytes)) })
    }
}

impl RunManifest {
    /// `config` must already be resolved.
    pub fn new(command: &str, config: AppConfig, resolution: Option<ResolutionRecord>) -> Result<Self> {
        Ok(Self {
            tool: "animguard".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: config.protect.seed,
            config_hash: config.hash()?,
            config,
            resolution,
            inputs: Vec::new(),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n")?;
        Ok(())
    }

    /// Reads a manifest and checks its hash against its config.
    pub fn read(path: &Path) -> Result<Self> {
        let m: RunManifest = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let actual = m.config.hash()?;
        if actual != m.config_hash {
            return Err(Error::Configuration(format!(
                "manifest {} config hash {} does not match its config ({actual})",
                path.display(),
                m.config_hash
            )));
        }
        Ok(m)
    }
}
