//! Ablation sweeps over GCAM stages, loss masks and the forward horizon.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::RunConfig;
use super::eval::evaluate;
use super::train::train;
use crate::backbone::Predictor;
use crate::datapipe::Video;
use crate::error::{Error, Result};
use crate::losses::LossMask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GcamCombo {
    /// Plain additive skips.
    None,
    Ega,
    Cfa,
    Full,
}

impl GcamCombo {
    pub const ALL: [GcamCombo; 4] = [GcamCombo::None, GcamCombo::Ega, GcamCombo::Cfa, GcamCombo::Full];

    /// `(use_cfa, use_ega)`
    pub fn flags(self) -> (bool, bool) {
        match self {
            GcamCombo::None => (false, false),
            GcamCombo::Ega => (false, true),
            GcamCombo::Cfa => (true, false),
            GcamCombo::Full => (true, true),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            GcamCombo::None => "none",
            GcamCombo::Ega => "ega",
            GcamCombo::Cfa => "cfa",
            GcamCombo::Full => "full",
        }
    }
}

/// The grid to run: every combination of the listed values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub gcam: Vec<GcamCombo>,
    pub loss: Vec<LossMask>,
    /// Forward horizons; empty keeps the base config's value.
    pub sigma: Vec<usize>,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self { gcam: GcamCombo::ALL.to_vec(), loss: LossMask::presets().to_vec(), sigma: Vec::new() }
    }
}

impl SweepSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Config(format!("malformed sweep file: {}", e.message())))?;
        if s.gcam.is_empty() || s.loss.is_empty() {
            return Err(Error::Config("sweep needs at least one gcam and one loss entry".into()));
        }
        Ok(s)
    }

    /// Named run configs in grid order.
    pub fn expand(&self, base: &RunConfig) -> Result<Vec<(String, RunConfig)>> {
        let sigmas = if self.sigma.is_empty() { vec![base.model.sigma] } else { self.sigma.clone() };
        let mut runs = Vec::new();
        for &g in &self.gcam {
            for &mask in &self.loss {
                for &sigma in &sigmas {
                    let mut cfg = base.clone();
                    (cfg.model.use_cfa, cfg.model.use_ega) = g.flags();
                    cfg.train.loss_mask = mask;
                    cfg.model.sigma = sigma;
                    cfg.validate()?;
                    runs.push((format!("gcam-{}_loss-{mask}_sigma-{sigma}", g.name()), cfg));
                }
            }
        }
        Ok(runs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub name: String,
    pub use_cfa: bool,
    pub use_ega: bool,
    pub loss_mask: LossMask,
    pub sigma: usize,
    pub params: usize,
    pub macs: u64,
    pub steps: u64,
    pub final_loss: Option<f64>,
    pub micro_auc: f64,
    pub macro_auc: Option<f64>,
    /// Both heads were trained against the same frame in every window.
    pub identical_targets: bool,
}

/// Trains and evaluates one configuration; returns the trained model too.
pub fn run_one(
    name: &str,
    cfg: &RunConfig,
    train_videos: &[Video],
    test_videos: &[Video],
    out_dir: Option<&Path>,
) -> Result<(AblationRow, Predictor)> {
    let run_dir = out_dir.map(|d| d.join(name));
    let outcome = train(cfg, train_videos, run_dir.as_deref())?;
    let (report, _) = evaluate(&outcome.model, test_videos, cfg, Some(outcome.steps))?;
    if let Some(dir) = &run_dir {
        let p = dir.join("eval.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&report)?).map_err(|e| Error::io(&p, e))?;
    }
    let row = AblationRow {
        name: name.to_string(),
        use_cfa: cfg.model.use_cfa,
        use_ega: cfg.model.use_ega,
        loss_mask: cfg.train.loss_mask,
        sigma: cfg.model.sigma,
        params: report.params,
        macs: report.macs,
        steps: outcome.steps,
        final_loss: outcome.history.last().map(|r| r.total),
        micro_auc: report.micro_auc,
        macro_auc: report.macro_auc,
        identical_targets: outcome.identical_targets,
    };
    Ok((row, outcome.model))
}

pub fn run_sweep(
    base: &RunConfig,
    sweep: &SweepSpec,
    train_videos: &[Video],
    test_videos: &[Video],
    out_dir: Option<&Path>,
) -> Result<Vec<AblationRow>> {
    let runs = sweep.expand(base)?;
    let mut rows = Vec::with_capacity(runs.len());
    for (i, (name, cfg)) in runs.iter().enumerate() {
        log::info!("ablation run {}/{}: {name}", i + 1, runs.len());
        rows.push(run_one(name, cfg, train_videos, test_videos, out_dir)?.0);
    }
    Ok(rows)
}

/// Fixed-width text table of the sweep results.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<36} {:>4} {:>4} {:>8} {:>5} {:>10} {:>8} {:>9} {:>9} {:>9}",
        "run", "cfa", "ega", "loss", "sigma", "params", "GMACs", "micro", "macro", "same_tgt"
    );
    for r in rows {
        let _ = writeln!(
            s,
            "{:<36} {:>4} {:>4} {:>8} {:>5} {:>10} {:>8.3} {:>9.4} {:>9} {:>9}",
            r.name,
            r.use_cfa as u8,
            r.use_ega as u8,
            r.loss_mask.to_string(),
            r.sigma,
            r.params,
            r.macs as f64 / 1e9,
            r.micro_auc,
            r.macro_auc.map_or("-".to_string(), |m| format!("{m:.4}")),
            r.identical_targets,
        );
    }
    s
}
