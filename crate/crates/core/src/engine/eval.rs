use serde::{Deserialize, Serialize};

use super::bench::BenchRecord;
use super::config::RunConfig;
use crate::backbone::Predictor;
use crate::datapipe::Video;
use crate::error::{Error, Result};
use crate::scoring::{frame_auc, score_video, PairPredictor, ScoreMode, ScoreSeries, ScoringConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoAuc {
    pub video_id: String,
    pub frames: usize,
    pub scored: usize,
    pub positives: usize,
    /// `None` when the video holds a single class.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    /// Over all frames of all videos, concatenated.
    pub micro_auc: f64,
    /// Mean of the per-video AUCs that are defined.
    pub macro_auc: Option<f64>,
    pub per_video: Vec<VideoAuc>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub micro_auc: f64,
    pub macro_auc: Option<f64>,
    pub per_video: Vec<VideoAuc>,
    /// Videos too short to hold one window.
    pub skipped: Vec<String>,
    pub mode: ScoreMode,
    pub params: usize,
    pub macs: u64,
    pub flops: u64,
    pub checkpoint_step: Option<u64>,
    pub bench: Option<BenchRecord>,
    pub config_hash: String,
    pub config: RunConfig,
    pub version: String,
}

/// Scores every video; videos shorter than `t + sigma` are skipped and
/// returned by id.
pub fn score_videos(
    model: &impl PairPredictor,
    videos: &[Video],
    t: usize,
    sigma: usize,
    cfg: &ScoringConfig,
) -> Result<(Vec<ScoreSeries>, Vec<String>)> {
    let mut series = Vec::with_capacity(videos.len());
    let mut skipped = Vec::new();
    for v in videos {
        if let Some(l) = &v.labels {
            if l.len() != v.len() {
                return Err(Error::Data(format!("video `{}` has {} frames but {} labels", v.id, v.len(), l.len())));
            }
        }
        match score_video(v, model, t, sigma, cfg)? {
            Some(s) => series.push(s),
            None => {
                log::warn!("video `{}` has {} frames, fewer than t + sigma = {}; skipped", v.id, v.len(), t + sigma);
                skipped.push(v.id.to_string());
            }
        }
    }
    Ok((series, skipped))
}

/// Micro (concatenated) and macro (per-video mean) frame-level AUC.
pub fn auc_summary(series: &[ScoreSeries]) -> Result<AucSummary> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut per_video = Vec::with_capacity(series.len());
    for s in series {
        let Some(l) = &s.labels else {
            return Err(Error::Data(format!("test video `{}` has no labels", s.video_id)));
        };
        if l.len() != s.len() {
            return Err(Error::Data(format!("video `{}`: {} scores for {} labels", s.video_id, s.len(), l.len())));
        }
        let positives = l.iter().filter(|&&b| b).count();
        let auc = if positives == 0 || positives == l.len() { None } else { Some(frame_auc(&s.anomaly, l)?) };
        per_video.push(VideoAuc { video_id: s.video_id.clone(), frames: s.len(), scored: s.scored, positives, auc });
        scores.extend_from_slice(&s.anomaly);
        labels.extend_from_slice(l);
    }
    let micro_auc = frame_auc(&scores, &labels)?;
    let defined: Vec<f64> = per_video.iter().filter_map(|v| v.auc).collect();
    let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    Ok(AucSummary { micro_auc, macro_auc, per_video })
}

/// Scores the test videos and builds the report.
pub fn evaluate(
    model: &Predictor,
    videos: &[Video],
    cfg: &RunConfig,
    checkpoint_step: Option<u64>,
) -> Result<(EvalReport, Vec<ScoreSeries>)> {
    cfg.validate()?;
    if model.config() != &cfg.model {
        return Err(Error::Checkpoint("model config differs from the run config".into()));
    }
    let (series, skipped) = score_videos(model, videos, cfg.model.t, cfg.model.sigma, &cfg.scoring)?;
    let summary = auc_summary(&series)?;
    let cost = model.complexity();
    let report = EvalReport {
        micro_auc: summary.micro_auc,
        macro_auc: summary.macro_auc,
        per_video: summary.per_video,
        skipped,
        mode: cfg.scoring.mode,
        params: model.num_params(),
        macs: cost.macs,
        flops: cost.flops,
        checkpoint_step,
        bench: None,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    };
    Ok((report, series))
}
