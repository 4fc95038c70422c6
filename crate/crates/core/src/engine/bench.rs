//! Throughput and budget measurement.
//!
//! End-to-end FPS covers preprocessing, the forward pass and scoring of one
//! target frame. The forward passes are timed once and shared by both
//! scoring modes; each scoring mode is timed separately over the same
//! predictions (best of a few repeats), so the two FPS figures differ only
//! by scoring cost. A model-only FPS is reported as well.

use std::sync::Arc;
use std::time::Instant;

use image::DynamicImage;
use serde::{Deserialize, Serialize};

use crate::backbone::{PredictionPair, Predictor};
use crate::datapipe::{make_windows, preprocess_frame, stack_windows, Video};
use crate::error::{Error, Result};
use crate::scoring::{frame_psnr, ScoreMode, ScoringConfig};
use crate::tensor::Tensor;

pub const MIN_BENCH_FRAMES: usize = 200;
const SCORING_REPEATS: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub frames: usize,
    pub frame_size: usize,
    pub params: usize,
    pub macs: u64,
    pub flops: u64,
    pub preprocess_secs: f64,
    pub model_secs: f64,
    pub plain_secs: f64,
    pub pyramid_secs: f64,
    pub fps_model: f64,
    pub fps_plain: f64,
    pub fps_pyramid: f64,
    /// Peak resident set size of the process, where the OS reports it.
    pub peak_mem_bytes: Option<u64>,
}

/// Raw frames needed to score `n` target frames.
pub fn frames_needed(model: &Predictor, n: usize) -> usize {
    n + model.config().t + model.config().sigma - 1
}

/// Benchmarks `model` on the first frames of `raw` (at least
/// [`MIN_BENCH_FRAMES`] scored frames).
pub fn bench(model: &Predictor, raw: &[Arc<DynamicImage>], scoring: &ScoringConfig, n_frames: usize) -> Result<BenchRecord> {
    scoring.validate()?;
    let n = n_frames.max(MIN_BENCH_FRAMES);
    let need = frames_needed(model, n);
    if raw.len() < need {
        return Err(Error::Config(format!("bench needs {need} raw frames to score {n}, got {}", raw.len())));
    }
    let c = model.config();

    // warm-up
    model.predict(Tensor::zeros([1, c.input_channels(), c.frame_size, c.frame_size]))?;

    let start = Instant::now();
    let frames = raw[..need]
        .iter()
        .map(|img| preprocess_frame(img, c.c_in, c.frame_size).map(Arc::new))
        .collect::<Result<Vec<_>>>()?;
    // one new frame per scored target in a streaming setting
    let preprocess_secs = start.elapsed().as_secs_f64() * n as f64 / need as f64;

    let video = Video { id: "bench".into(), frames, labels: None };
    let windows = make_windows(&video, c.t, c.sigma, 1)?;
    let mut outputs: Vec<(PredictionPair, Arc<Tensor<f32>>, Arc<Tensor<f32>>)> = Vec::with_capacity(n);
    let start = Instant::now();
    for w in &windows[..n] {
        let batch = stack_windows(&[w])?;
        outputs.push((model.predict(batch.inputs)?, w.target_immediate.clone(), w.target_forward.clone()));
    }
    let model_secs = start.elapsed().as_secs_f64();

    let time_mode = |mode: ScoreMode| -> Result<f64> {
        let cfg = ScoringConfig { mode, ..scoring.clone() };
        let mut best = f64::INFINITY;
        for _ in 0..SCORING_REPEATS {
            let start = Instant::now();
            let mut sink = 0.0;
            for (pair, ti, tf) in &outputs {
                sink += frame_psnr(&pair.immediate, &pair.forward, ti, tf, &cfg)?;
            }
            std::hint::black_box(sink);
            best = best.min(start.elapsed().as_secs_f64());
        }
        Ok(best)
    };
    let plain_secs = time_mode(ScoreMode::Plain)?;
    let pyramid_secs = time_mode(ScoreMode::Pyramid)?;
    let cost = model.complexity();
    let fps = |secs: f64| n as f64 / secs;
    Ok(BenchRecord {
        frames: n,
        frame_size: c.frame_size,
        params: model.num_params(),
        macs: cost.macs,
        flops: cost.flops,
        preprocess_secs,
        model_secs,
        plain_secs,
        pyramid_secs,
        fps_model: fps(model_secs),
        fps_plain: fps(preprocess_secs + model_secs + plain_secs),
        fps_pyramid: fps(preprocess_secs + model_secs + pyramid_secs),
        peak_mem_bytes: peak_memory_bytes(),
    })
}

/// `VmHWM` from `/proc/self/status`.
pub fn peak_memory_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}
