//! Anomaly scoring.
//!
//! Per target frame: channel-averaged squared-error maps for both horizons,
//! fused as `E = E_i + lambda * E_f`, turned into a PSNR either from the
//! plain mean or from an error pyramid (for every window size the largest
//! mean-pooled patch error `v_i`, PSNR from `sum v_i`). Per video the PSNR
//! series is min-max normalized, Gaussian smoothed and inverted, so the
//! anomaly score is high where predictions fail.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::backbone::{PredictionPair, Predictor};
use crate::datapipe::{make_windows, stack_windows, Video};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Horizon {
    Immediate,
    Forward,
    Hybrid,
}

/// Non-negative per-pixel error of one frame.
#[derive(Clone, Debug, PartialEq)]
pub struct ErrorMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub horizon: Horizon,
}

impl ErrorMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len().max(1) as f64
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { values: self.values.iter().map(|v| v * s).collect(), ..self.clone() }
    }
}

/// Squared difference averaged over channels; each input is `C x H x W` or
/// `1 x C x H x W`.
pub fn error_map(pred: &Tensor<f32>, gt: &Tensor<f32>, horizon: Horizon) -> Result<ErrorMap> {
    let frame = |t: &Tensor<f32>| match t.shape()[..] {
        [c, h, w] | [1, c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!("error map expects one frame, got {:?}", t.shape()))),
    };
    let (c, h, w) = frame(pred)?;
    if frame(gt)? != (c, h, w) {
        return Err(Error::Shape(format!("error map operands differ: {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    let mut values = vec![0.0; h * w];
    for ch in 0..c {
        let (p, g) = (&pred.data()[ch * h * w..(ch + 1) * h * w], &gt.data()[ch * h * w..(ch + 1) * h * w]);
        for ((v, &a), &b) in values.iter_mut().zip(p).zip(g) {
            let d = a as f64 - b as f64;
            *v += d * d;
        }
    }
    for v in &mut values {
        *v /= c as f64;
    }
    Ok(ErrorMap { height: h, width: w, values, horizon })
}

/// `E = E_i + lambda * E_f`.
pub fn hybrid_error(ei: &ErrorMap, ef: &ErrorMap, lambda: f64) -> Result<ErrorMap> {
    if !(lambda >= 0.0) {
        return Err(Error::Config(format!("hybrid weight lambda must be >= 0, got {lambda}")));
    }
    if (ei.height, ei.width) != (ef.height, ef.width) {
        return Err(Error::Shape("hybrid error maps differ in size".into()));
    }
    let values = ei.values.iter().zip(&ef.values).map(|(a, b)| a + lambda * b).collect();
    Ok(ErrorMap { height: ei.height, width: ei.width, values, horizon: Horizon::Hybrid })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PyramidConfig {
    /// Non-overlapping mean-pooling window per level. A window larger than
    /// the map pools the whole map; a remainder at the right/bottom edge
    /// that does not fill a window is dropped.
    pub windows: Vec<usize>,
    pub epsilon: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        Self { windows: vec![4, 8, 16, 32], epsilon: DEFAULT_EPSILON }
    }
}

impl PyramidConfig {
    pub fn validate(&self) -> Result<()> {
        if self.windows.is_empty() || self.windows[0] == 0 || self.windows.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!("pyramid windows {:?} must be positive and strictly increasing", self.windows)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("pyramid epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// `10 * log10(1 / max(x, eps))`.
pub fn psnr_from_error(x: f64, eps: f64) -> f64 {
    10.0 * (1.0 / x.max(eps)).log10()
}

/// Largest mean over non-overlapping `k x k` patches.
pub fn max_patch_mean(e: &ErrorMap, k: usize) -> f64 {
    let (kh, kw) = (k.min(e.height), k.min(e.width));
    let (ph, pw) = (e.height / kh, e.width / kw);
    let mut best = f64::NEG_INFINITY;
    let mut row_sums = vec![0.0; pw];
    for py in 0..ph {
        row_sums.fill(0.0);
        for y in py * kh..(py + 1) * kh {
            let row = &e.values[y * e.width..(y + 1) * e.width];
            for (px, s) in row_sums.iter_mut().enumerate() {
                *s += row[px * kw..(px + 1) * kw].iter().sum::<f64>();
            }
        }
        for s in &row_sums {
            best = best.max(s / (kh * kw) as f64);
        }
    }
    best
}

/// Multi-scale PSNR of an error map.
pub fn pyramid_psnr(e: &ErrorMap, cfg: &PyramidConfig) -> f64 {
    let total: f64 = cfg.windows.iter().map(|&k| max_patch_mean(e, k)).sum();
    psnr_from_error(total, cfg.epsilon)
}

/// Single-scale PSNR from the mean error.
pub fn plain_psnr(e: &ErrorMap, eps: f64) -> f64 {
    psnr_from_error(e.mean(), eps)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMode {
    Plain,
    #[default]
    Pyramid,
}

impl fmt::Display for ScoreMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScoreMode::Plain => "plain",
            ScoreMode::Pyramid => "pyramid",
        })
    }
}

impl FromStr for ScoreMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(ScoreMode::Plain),
            "pyramid" => Ok(ScoreMode::Pyramid),
            _ => Err(Error::Config(format!("unknown scoring mode `{s}` (expected plain or pyramid)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    pub lambda: f64,
    pub mode: ScoreMode,
    pub pyramid: PyramidConfig,
    /// Standard deviation of the temporal smoothing, in frames.
    pub smoothing_sigma: f64,
    /// Windows per forward pass while scoring.
    pub batch_size: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            lambda: 0.06,
            mode: ScoreMode::Pyramid,
            pyramid: PyramidConfig::default(),
            smoothing_sigma: 3.0,
            batch_size: 8,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.smoothing_sigma > 0.0) {
            return Err(Error::Config("smoothing_sigma must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("scoring batch_size must be >= 1".into()));
        }
        self.pyramid.validate()
    }
}

/// PSNR of one target frame from its two predictions.
pub fn frame_psnr(
    pred_immediate: &Tensor<f32>,
    pred_forward: &Tensor<f32>,
    target_immediate: &Tensor<f32>,
    target_forward: &Tensor<f32>,
    cfg: &ScoringConfig,
) -> Result<f64> {
    let ei = error_map(pred_immediate, target_immediate, Horizon::Immediate)?;
    let ef = error_map(pred_forward, target_forward, Horizon::Forward)?;
    let e = hybrid_error(&ei, &ef, cfg.lambda)?;
    Ok(match cfg.mode {
        ScoreMode::Plain => plain_psnr(&e, cfg.pyramid.epsilon),
        ScoreMode::Pyramid => pyramid_psnr(&e, &cfg.pyramid),
    })
}

/// Per-video min-max normalization; a constant series maps to zeros.
pub fn normalize_scores(series: &[f64]) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(Error::Data("cannot normalize an empty score series".into()));
    }
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    let max = series.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    if !(range > 0.0) {
        return Ok(vec![0.0; series.len()]);
    }
    Ok(series.iter().map(|v| (v - min) / range).collect())
}

/// Normalized Gaussian taps over `[-r, r]`, `r = ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / sum).collect()
}

/// Folds an out-of-range index back into `0..n` by mirroring about the
/// sequence edges (the edge sample is repeated: `.. b a | a b c ..`).
fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Gaussian smoothing with reflected borders; preserves length.
pub fn gaussian_smooth(series: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::Config(format!("smoothing sigma must be positive, got {sigma}")));
    }
    if series.is_empty() {
        return Ok(Vec::new());
    }
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    Ok((0..series.len() as i64)
        .map(|i| k.iter().enumerate().map(|(j, w)| w * series[reflect_index(i + j as i64 - r, series.len())]).sum())
        .collect())
}

/// Scores of one video, one entry per frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSeries {
    pub video_id: String,
    /// Index of the first frame that has its own prediction.
    pub first_scored: usize,
    /// Number of scored frames; the rest are padding.
    pub scored: usize,
    pub mode: ScoreMode,
    /// PSNR per frame, padded frames copy the nearest scored value.
    pub raw_psnr: Vec<f64>,
    pub normalized: Vec<f64>,
    pub anomaly: Vec<f64>,
    pub labels: Option<Vec<bool>>,
}

impl ScoreSeries {
    pub fn len(&self) -> usize {
        self.anomaly.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anomaly.is_empty()
    }

    pub fn is_padded(&self, frame: usize) -> bool {
        frame < self.first_scored || frame >= self.first_scored + self.scored
    }
}

/// Pads per-target PSNR values to the full video, normalizes, smooths and
/// inverts. `psnr[k]` belongs to frame `first_scored + k`.
pub fn assemble_series(
    video_id: &str,
    len: usize,
    first_scored: usize,
    psnr: &[f64],
    mode: ScoreMode,
    smoothing_sigma: f64,
    labels: Option<Vec<bool>>,
) -> Result<ScoreSeries> {
    if psnr.is_empty() || first_scored + psnr.len() > len {
        return Err(Error::Data(format!(
            "video `{video_id}`: {} scores starting at frame {first_scored} do not fit {len} frames",
            psnr.len()
        )));
    }
    let mut raw = Vec::with_capacity(len);
    raw.extend(std::iter::repeat_n(psnr[0], first_scored));
    raw.extend_from_slice(psnr);
    raw.resize(len, psnr[psnr.len() - 1]);
    let normalized = normalize_scores(&raw)?;
    let smoothed = gaussian_smooth(&normalized, smoothing_sigma)?;
    let anomaly = smoothed.iter().map(|s| 1.0 - s).collect();
    Ok(ScoreSeries {
        video_id: video_id.to_string(),
        first_scored,
        scored: psnr.len(),
        mode,
        raw_psnr: raw,
        normalized,
        anomaly,
        labels,
    })
}

/// Anything that maps a stacked window batch to a pair of predictions.
pub trait PairPredictor {
    fn predict_pair(&self, inputs: Tensor<f32>) -> Result<PredictionPair>;
}

impl PairPredictor for Predictor {
    fn predict_pair(&self, inputs: Tensor<f32>) -> Result<PredictionPair> {
        self.predict(inputs)
    }
}

/// Raw PSNR for every window of a video, keyed to the immediate target.
pub fn video_psnr(
    video: &Video,
    model: &impl PairPredictor,
    t: usize,
    sigma: usize,
    cfg: &ScoringConfig,
) -> Result<Vec<f64>> {
    let windows = make_windows(video, t, sigma, 1)?;
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(cfg.batch_size) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = stack_windows(&refs)?;
        let pair = model.predict_pair(batch.inputs)?;
        for i in 0..chunk.len() {
            out.push(frame_psnr(
                &pair.immediate.index0(i)?,
                &pair.forward.index0(i)?,
                &batch.target_immediate.index0(i)?,
                &batch.target_forward.index0(i)?,
                cfg,
            )?);
        }
    }
    Ok(out)
}

/// Full per-video pipeline. Returns `Ok(None)` when the video is too short
/// to hold a single window.
pub fn score_video(
    video: &Video,
    model: &impl PairPredictor,
    t: usize,
    sigma: usize,
    cfg: &ScoringConfig,
) -> Result<Option<ScoreSeries>> {
    cfg.validate()?;
    if video.len() < t + sigma {
        return Ok(None);
    }
    let psnr = video_psnr(video, model, t, sigma, cfg)?;
    assemble_series(&video.id, video.len(), t, &psnr, cfg.mode, cfg.smoothing_sigma, video.labels.clone()).map(Some)
}

/// Area under the ROC curve with anomalies as the positive class. Ties get
/// half credit (average ranks).
pub fn frame_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Data(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN anomaly score".into()));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Data("AUC is undefined when only one class is present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1..=j+1 share their average
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}
