//! Run configuration: one TOML document with a section per module.
//!
//! Keys address as `section.key` (for example `association.theta`), both in
//! the file and in `--set` overrides.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::anchor::BankParams;
use crate::association::AssociationParams;
use crate::error::{Error, Result};
use crate::heads::AlignmentHeads;
use crate::prior::PriorParams;
use crate::reid::GateParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub k: usize,
    pub t0: usize,
    /// Softmax temperature of the language-to-anchor alignment.
    pub tau: f64,
    pub static_threshold: f64,
    pub min_area: usize,
    /// Seed for the orthonormal zero-shot heads when `d_l != d_v`.
    pub heads_seed: u64,
    /// Shared head output dimension; defaults to `min(d_l, d_v)`.
    pub heads_dim: Option<usize>,
    /// Learned heads file; overrides the zero-shot heads.
    pub heads_path: Option<PathBuf>,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        let b = BankParams::default();
        AnchorConfig {
            k: b.k,
            t0: b.t0,
            tau: 10.0,
            static_threshold: b.static_threshold,
            min_area: b.min_area,
            heads_seed: 0,
            heads_dim: None,
            heads_path: None,
        }
    }
}

impl AnchorConfig {
    pub fn bank_params(&self) -> BankParams {
        BankParams {
            k: self.k,
            t0: self.t0,
            static_threshold: self.static_threshold,
            min_area: self.min_area,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// When off, `A ≡ 1`: no spatial conditioning from the anchor bank.
    pub anchor_map: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig { anchor_map: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    /// IoU threshold for re-capture rate and latency.
    pub tau: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { tau: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub anchor: AnchorConfig,
    pub association: AssociationParams,
    pub prior: PriorParams,
    pub reid: GateParams,
    pub pipeline: PipelineConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.anchor.k == 0 {
            return Err(Error::Config("anchor.k must be ≥ 1".into()));
        }
        if self.anchor.t0 < 2 {
            return Err(Error::Config("anchor.t0 must be ≥ 2".into()));
        }
        if !(self.anchor.tau.is_finite() && self.anchor.tau > 0.0) {
            return Err(Error::Config("anchor.tau must be > 0".into()));
        }
        if !(self.anchor.static_threshold.is_finite() && self.anchor.static_threshold > 0.0) {
            return Err(Error::Config("anchor.static_threshold must be > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.metrics.tau) {
            return Err(Error::Config("metrics.tau must be in [0, 1]".into()));
        }
        self.association.validate()?;
        self.prior.validate()?;
        self.reid.validate()
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        Self::from_table(table)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies `section.key=value` overrides. Values parse as TOML scalars;
    /// anything that does not parse is taken as a string.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).map_err(|e| Error::Config(format!("config: {e}")))?;
        for raw in overrides {
            let raw = raw.as_ref();
            let (key, value) = raw
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{raw}` is not key=value")))?;
            let (section, field) = key
                .trim()
                .split_once('.')
                .ok_or_else(|| Error::Config(format!("override key `{key}` is not section.key")))?;
            let value = parse_scalar(value.trim());
            let slot = table
                .entry(section.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            let toml::Value::Table(sec) = slot else {
                return Err(Error::Config(format!("`{section}` is not a section")));
            };
            sec.insert(field.to_string(), value);
        }
        Self::from_table(table)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Alignment heads for the given encoder dimensions.
    pub fn heads(&self, text_dim: usize, feature_dim: usize) -> Result<AlignmentHeads> {
        let mut heads = match &self.anchor.heads_path {
            Some(p) => AlignmentHeads::load(p)?,
            None => AlignmentHeads::zero_shot(
                text_dim,
                feature_dim,
                self.anchor.heads_dim,
                self.anchor.heads_seed,
                self.anchor.tau,
            )?,
        };
        if heads.text_dim() != text_dim || heads.feature_dim() != feature_dim {
            return Err(Error::dim(format!(
                "heads expect d_l={} d_v={}, trace has d_l={text_dim} d_v={feature_dim}",
                heads.text_dim(),
                heads.feature_dim()
            )));
        }
        heads.temperature = self.anchor.tau;
        Ok(heads)
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::association::RefinerMode;

    #[test]
    fn defaults_round_trip_through_toml() {
        let d = RunConfig::default();
        let text = d.to_toml_string();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), d);
        assert_eq!(RunConfig::from_toml_str("").unwrap(), d);
    }

    #[test]
    fn shipped_defaults() {
        let d = RunConfig::default();
        assert_eq!(d.anchor.k, 64);
        assert_eq!(d.anchor.tau, 10.0);
        assert_eq!(d.association.lambda, 0.6);
        assert_eq!(d.association.theta, 0.4);
        assert_eq!(d.prior.beta, 0.8);
        assert_eq!(d.reid.gamma, 0.5);
    }

    #[test]
    fn overrides_apply_and_validate() {
        let d = RunConfig::default();
        let c = d
            .with_overrides(&[
                "association.theta=0.25",
                "anchor.k = 4",
                "association.refiner=none",
                "reid.enabled=false",
            ])
            .unwrap();
        assert_eq!(c.association.theta, 0.25);
        assert_eq!(c.anchor.k, 4);
        assert_eq!(c.association.refiner, RefinerMode::None);
        assert!(!c.reid.enabled);
        assert!(d.with_overrides(&["association.bogus=1"]).is_err());
        assert!(d.with_overrides(&["nosection=1"]).is_err());
        assert!(d.with_overrides(&["association.theta=2.0"]).is_err());
        assert!(d.with_overrides(&["anchor.heads_path=/tmp/h.json"]).is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml_str("[prior]\nbeta = 0.5\ngamma = 1\n").is_err());
        assert!(RunConfig::from_toml_str("[nope]\n").is_err());
    }
}
