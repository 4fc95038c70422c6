//! Run configuration: one TOML tree that fully determines a run.
//!
//! Values resolve in this order: built-in defaults, then the dataset
//! profile (`t`, `sigma`, `lambda`), then the config file, then `--set`
//! overrides. Unknown keys are rejected at every level.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::ModelConfig;
use crate::datapipe::SyntheticSpec;
use crate::error::{Error, Result};
use crate::losses::{LossMask, SsimConfig};
use crate::scoring::ScoringConfig;

/// Per-benchmark defaults for `t`, `sigma` and the hybrid weight `lambda`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Ped1,
    Ped2,
    Avenue,
    Shanghaitech,
    /// No profile values; everything comes from the config.
    Custom,
}

impl Profile {
    /// `(t, sigma, lambda)`, or `None` for [`Profile::Custom`].
    pub fn settings(self) -> Option<(usize, usize, f64)> {
        match self {
            Profile::Ped1 => Some((4, 4, 0.06)),
            Profile::Ped2 => Some((4, 4, 1.0)),
            Profile::Avenue => Some((8, 4, 0.2)),
            Profile::Shanghaitech => Some((4, 4, 0.06)),
            Profile::Custom => None,
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Profile::Ped1 => "ped1",
            Profile::Ped2 => "ped2",
            Profile::Avenue => "avenue",
            Profile::Shanghaitech => "shanghaitech",
            Profile::Custom => "custom",
        };
        f.write_str(s)
    }
}

impl FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        toml::Value::String(s.to_string())
            .try_into()
            .map_err(|_| Error::Config(format!("unknown profile `{s}` (ped1, ped2, avenue, shanghaitech, custom)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Seeds parameter init and window shuffling.
    pub seed: u64,
    pub loss_mask: LossMask,
    pub ssim: SsimConfig,
    /// Global gradient-norm clip; off when absent.
    pub grad_clip: Option<f64>,
    /// Window stride over training videos.
    pub stride: usize,
    /// Write a checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            loss_mask: LossMask::FULL,
            ssim: SsimConfig::default(),
            grad_clip: None,
            stride: 1,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("train: {m}")));
        if !(self.lr > 0.0) {
            return fail("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return fail("Adam betas must lie in [0, 1) and eps must be positive");
        }
        if self.batch_size == 0 || self.stride == 0 {
            return fail("batch_size and stride must be >= 1");
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return fail("grad_clip must be positive");
        }
        self.loss_mask.validate()?;
        self.ssim.validate()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    /// Generate the `[synth]` dataset in memory.
    #[default]
    Synthetic,
    /// Read `data.root/{train,test}`.
    Disk,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub root: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scoring: ScoringConfig,
    pub data: DataConfig,
    pub synth: SyntheticSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Ped1)
    }
}

impl RunConfig {
    /// Defaults with the profile's `t`, `sigma` and `lambda` applied.
    pub fn for_profile(profile: Profile) -> Self {
        let mut c = Self {
            profile,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            scoring: ScoringConfig::default(),
            data: DataConfig::default(),
            synth: SyntheticSpec::default(),
        };
        if let Some((t, sigma, lambda)) = profile.settings() {
            c.model.t = t;
            c.model.sigma = sigma;
            c.scoring.lambda = lambda;
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.scoring.validate()?;
        if self.data.source == DataSource::Synthetic {
            self.synth.validate()?;
        }
        Ok(())
    }

    /// Parses TOML text, applies `key=value` overrides and validates.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut user: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(format!("malformed config: {}", e.message())))?;
        for o in overrides {
            apply_override(&mut user, o)?;
        }
        let profile = match user.get("profile") {
            None => Profile::default(),
            Some(toml::Value::String(s)) => s.parse()?,
            Some(v) => return Err(Error::Config(format!("profile must be a string, got {v}"))),
        };
        let mut base = toml::Value::try_from(Self::for_profile(profile))
            .map_err(|e| Error::Config(format!("serializing defaults: {e}")))?;
        merge(&mut base, toml::Value::Table(user));
        let cfg: Self = base.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file (or starts from defaults when `path` is `None`).
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("reading {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("serializing config: {e}")))
    }

    /// SHA-256 over the canonical JSON form of the resolved config.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&json);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Recursively overlays `top` onto `base`; tables merge, everything else is
/// replaced.
fn merge(base: &mut toml::Value, top: toml::Value) {
    match (base, top) {
        (toml::Value::Table(b), toml::Value::Table(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies one `a.b.c=value` override. The value is read as a TOML literal
/// and falls back to a plain string.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        return Err(Error::Config(format!("override `{spec}` is not of the form key=value")));
    };
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override `{spec}` has an empty key segment")));
    }
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let mut cur = table;
    for seg in &path[..path.len() - 1] {
        let entry = cur.entry(seg.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("override `{spec}`: `{seg}` is not a section"))),
        };
    }
    cur.insert(path[path.len() - 1].to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profiles_set_horizon_and_lambda() {
        let c = RunConfig::from_toml_str("profile = \"avenue\"", &[]).unwrap();
        assert_eq!((c.model.t, c.model.sigma, c.scoring.lambda), (8, 4, 0.2));
        let c = RunConfig::from_toml_str("", &["profile=ped2".into()]).unwrap();
        assert_eq!(c.scoring.lambda, 1.0);
        // explicit values beat the profile
        let c = RunConfig::from_toml_str("profile = \"avenue\"\n[model]\nt = 3", &[]).unwrap();
        assert_eq!(c.model.t, 3);
    }

    #[test]
    fn overrides_and_unknown_keys() {
        let base = "[model]\nframe_size = 32";
        let c = RunConfig::from_toml_str(
            base,
            &["train.lr=0.001".into(), "train.loss_mask=no_fc".into(), "model.channel_plan=[4,8,16,32]".into()],
        )
        .unwrap();
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.train.loss_mask, "no_fc".parse().unwrap());
        assert_eq!(c.model.channel_plan, vec![4, 8, 16, 32]);
        for bad in ["train.lrr=1", "nosuch.key=1", "train.lr", "train.lr=-1", "model.t=0", "train.loss_mask=no_int"] {
            assert!(
                matches!(RunConfig::from_toml_str(base, &[bad.into()]), Err(Error::Config(_))),
                "{bad} should be rejected"
            );
        }
        assert!(matches!(RunConfig::from_toml_str("[model", &[]), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip_and_hash() {
        let c = RunConfig::from_toml_str("", &["train.grad_clip=5.0".into()]).unwrap();
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
        let other = RunConfig::from_toml_str("", &["train.seed=1".into()]).unwrap();
        assert_ne!(other.hash(), c.hash());
    }
}
