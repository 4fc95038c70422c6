use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint;
use super::config::{RunConfig, TrainConfig};
use super::optim::{clip_global_norm, global_norm, Adam};
use crate::backbone::{ModelConfig, Predictor};
use crate::datapipe::{make_windows, stack_windows, Batch, FrameWindow, Video};
use crate::error::{Error, Result};
use crate::losses::{total_loss, LossBreakdown};
use crate::nn::{Mode, Session};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub epoch: usize,
    pub l_pred: f64,
    pub l_fc: f64,
    pub l_con: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// Owns a model and its optimizer state.
pub struct Trainer {
    model: Predictor,
    opt: Adam,
    cfg: TrainConfig,
    step: u64,
}

impl Trainer {
    pub fn new(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        Self::from_model(Predictor::new(model_cfg, cfg.seed)?, cfg)
    }

    pub fn from_model(model: Predictor, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adam::new(model.store(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);
        Ok(Self { model, opt, cfg: cfg.clone(), step: 0 })
    }

    pub fn model(&self) -> &Predictor {
        &self.model
    }

    pub fn into_model(self) -> Predictor {
        self.model
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Loss of the current weights on `batch` without updating anything.
    pub fn loss(&self, batch: &Batch, mode: Mode) -> Result<LossBreakdown> {
        let mut s = Session::<f32>::new(self.model.store(), mode);
        let x = s.input(batch.inputs.clone());
        let (pi, pf) = self.model.forward(&mut s, x)?;
        let ti = s.input(batch.target_immediate.clone());
        let tf = s.input(batch.target_forward.clone());
        let lv = total_loss(&mut s.graph, pi, pf, ti, tf, self.cfg.loss_mask, &self.cfg.ssim)?;
        Ok(lv.values(&s.graph, self.cfg.loss_mask))
    }

    /// One optimizer step on `batch`.
    pub fn step(&mut self, batch: &Batch, epoch: usize) -> Result<StepRecord> {
        let mask = self.cfg.loss_mask;
        let (values, mut grads, stats) = {
            let mut s = Session::<f32>::new(self.model.store(), Mode::Train);
            let x = s.input(batch.inputs.clone());
            let (pi, pf) = self.model.forward(&mut s, x)?;
            let ti = s.input(batch.target_immediate.clone());
            let tf = s.input(batch.target_forward.clone());
            let lv = total_loss(&mut s.graph, pi, pf, ti, tf, mask, &self.cfg.ssim)?;
            let values = lv.values(&s.graph, mask);
            if !values.total.is_finite() {
                return Err(Error::Divergence {
                    step: self.step + 1,
                    detail: format!("non-finite loss (l_pred={}, l_fc={}, l_con={})", values.l_pred, values.l_fc, values.l_con),
                });
            }
            let mut g = s.graph.backward(lv.total)?;
            let grads = s.param_grads(&mut g);
            (values, grads, s.take_stat_updates())
        };
        let grad_norm = match self.cfg.grad_clip {
            Some(c) => clip_global_norm(&mut grads, c),
            None => global_norm(&grads),
        };
        if !grad_norm.is_finite() {
            return Err(Error::Divergence {
                step: self.step + 1,
                detail: format!("non-finite gradient norm at loss {}", values.total),
            });
        }
        self.opt.update(self.model.store_mut(), &grads)?;
        self.model.store_mut().apply_running_stats(&stats);
        self.step += 1;
        Ok(StepRecord {
            step: self.step,
            epoch,
            l_pred: values.l_pred,
            l_fc: values.l_fc,
            l_con: values.l_con,
            total: values.total,
            grad_norm,
        })
    }
}

/// Result of a full training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Predictor,
    pub steps: u64,
    pub history: Vec<StepRecord>,
    pub windows: usize,
    /// True when every window's two targets are the same frame (`sigma = 1`).
    pub identical_targets: bool,
    pub checkpoint: Option<PathBuf>,
}

/// Training windows of all videos, in video then frame order.
pub fn training_windows(videos: &[Video], t: usize, sigma: usize, stride: usize) -> Result<Vec<FrameWindow>> {
    let mut all = Vec::new();
    for v in videos {
        if v.labels.is_some() {
            return Err(Error::Data(format!("training video `{}` carries labels; use the train split", v.id)));
        }
        all.extend(make_windows(v, t, sigma, stride)?);
    }
    if all.is_empty() {
        return Err(Error::Data(format!("no training video is long enough for t={t}, sigma={sigma}")));
    }
    Ok(all)
}

/// Trains from scratch. With `out_dir`, writes `train_log.jsonl` and
/// `checkpoint.bin` (plus `checkpoint_epochN.bin` every
/// `checkpoint_every` epochs).
pub fn train(cfg: &RunConfig, videos: &[Video], out_dir: Option<&Path>) -> Result<TrainOutcome> {
    cfg.validate()?;
    let m = &cfg.model;
    let tc = &cfg.train;
    let windows = training_windows(videos, m.t, m.sigma, tc.stride)?;
    let identical_targets = windows.iter().all(|w| Arc::ptr_eq(&w.target_immediate, &w.target_forward));
    let mut trainer = Trainer::new(m, tc)?;
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let p = dir.join("train_log.jsonl");
            Some((BufWriter::new(fs::File::create(&p).map_err(|e| Error::io(&p, e))?), p))
        }
        None => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::new();
    'epochs: for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_steps = 0;
        for chunk in order.chunks(tc.batch_size) {
            if tc.max_steps.is_some_and(|n| trainer.steps() >= n) {
                break 'epochs;
            }
            let refs: Vec<&FrameWindow> = chunk.iter().map(|&i| &windows[i]).collect();
            let rec = trainer.step(&stack_windows(&refs)?, epoch)?;
            if let Some((w, p)) = log.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n").map_err(|e| Error::io(p.as_path(), e))?;
            }
            epoch_total += rec.total;
            epoch_steps += 1;
            history.push(rec);
        }
        log::info!("epoch {}/{}: mean loss {:.5}", epoch + 1, tc.epochs, epoch_total / epoch_steps.max(1) as f64);
        if let Some(dir) = out_dir {
            if tc.checkpoint_every > 0 && (epoch + 1) % tc.checkpoint_every == 0 {
                checkpoint::save(&dir.join(format!("checkpoint_epoch{}.bin", epoch + 1)), trainer.model(), trainer.steps())?;
            }
        }
    }
    if let Some((mut w, p)) = log {
        w.flush().map_err(|e| Error::io(&p, e))?;
    }
    let steps = trainer.steps();
    let model = trainer.into_model();
    let checkpoint = match out_dir {
        Some(dir) => {
            let p = dir.join("checkpoint.bin");
            checkpoint::save(&p, &model, steps)?;
            Some(p)
        }
        None => None,
    };
    Ok(TrainOutcome { model, steps, history, windows: windows.len(), identical_targets, checkpoint })
}
