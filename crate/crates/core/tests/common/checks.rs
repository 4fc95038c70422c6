//! Acceptance checks shared by the `acceptance` harness and the regular
//! integration tests. Each returns a one-line summary or a failure reason.

#![allow(dead_code)]

use std::path::PathBuf;
use std::time::Instant;

use fcvad::backbone::{count_params, estimate_flops, ModelConfig, Predictor};
use fcvad::datapipe::SyntheticSpec;
use fcvad::engine::ablate::{run_one, AblationRow};
use fcvad::engine::bench::{bench, frames_needed, MIN_BENCH_FRAMES};
use fcvad::engine::eval::score_videos;
use fcvad::engine::{Datasets, RunConfig};
use fcvad::gcam::{eca_kernel_size, esa_kernel_size, ChannelAttention, GcamConfig};
use fcvad::losses::{consistency_loss, gradient_loss, intensity_loss, SsimConfig};
use fcvad::nn::{Init, Mode, ParamStore, Session};
use fcvad::scoring::{normalize_scores, pyramid_psnr, ErrorMap, Horizon, PyramidConfig, ScoringConfig};
use fcvad::tensor::{Graph, Tensor};

use super::*;

pub type Check = Result<String, String>;

fn lib<T>(r: fcvad::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn within(value: f64, target: f64, tol: f64) -> bool {
    (value - target).abs() <= tol * target
}

fn gcam_variant(use_cfa: bool, use_ega: bool) -> ModelConfig {
    ModelConfig { use_cfa, use_ega, ..ModelConfig::default() }
}

pub fn parameter_budget() -> Check {
    let start = Instant::now();
    let p = |cfa, ega| lib(count_params(&gcam_variant(cfa, ega))).map(|n| n as f64 / 1e6);
    let (base, ega, cfa, full) = (p(false, false)?, p(false, true)?, p(true, false)?, p(true, true)?);
    let secs = start.elapsed().as_secs_f64();
    let summary = format!(
        "base {base:.3}M, full {full:.3}M, EGA +{:.3}M, CFA +{:.3}M in {secs:.2}s",
        ega - base,
        cfa - base
    );
    let ok = within(base, 1.93, 0.05)
        && within(full, 2.17, 0.05)
        && within(ega - base, 0.04, 0.25)
        && within(cfa - base, 0.20, 0.30)
        && secs < 1.0;
    if ok {
        Ok(summary)
    } else {
        Err(summary)
    }
}

pub fn complexity_budget() -> Check {
    let full = lib(estimate_flops(&gcam_variant(true, true)))?;
    let base = lib(estimate_flops(&gcam_variant(false, false)))?;
    let (f, b) = (full.macs as f64 / 1e9, base.macs as f64 / 1e9);
    let summary = format!("full {f:.3}G, base {b:.3}G multiply-accumulates at 224x224 (flops field {:.3}G)", full.flops as f64 / 1e9);
    if within(f, 5.85, 0.15) && within(b, 4.06, 0.15) && full.flops == 2 * full.macs {
        Ok(summary)
    } else {
        Err(summary)
    }
}

/// `floor(v)`, bumped to odd.
fn odd(v: f64) -> usize {
    let f = v.floor() as usize;
    f + (f % 2 == 0) as usize
}

pub fn kernel_tables() -> Check {
    let eca_hand = [(8, 3), (16, 3), (32, 3), (64, 3), (128, 5), (256, 5), (512, 5)];
    let esa_hand = [(28, 5), (56, 7), (112, 7), (224, 9)];
    for (c, k) in eca_hand {
        let formula = odd(((c as f64).log2() + 1.0) / 2.0);
        let got = lib(eca_kernel_size(c))?;
        if got != k || formula != k {
            return Err(format!("channel kernel for C={c}: got {got}, formula {formula}, table {k}"));
        }
    }
    for (s, k) in esa_hand {
        let formula = odd((((s * s) as f64).log2() + 1.0) / 2.0).max(3);
        let got = esa_kernel_size(s, s);
        if got != k || formula != k {
            return Err(format!("spatial kernel for {s}x{s}: got {got}, formula {formula}, table {k}"));
        }
    }
    Ok(format!("{} channel and {} spatial sizes match", eca_hand.len(), esa_hand.len()))
}

#[derive(Clone, Copy, Debug)]
pub enum LossKind {
    Intensity,
    Gradient,
    Consistency,
}

fn small_ssim() -> SsimConfig {
    SsimConfig { window: 5, sigma: 1.0, ..SsimConfig::default() }
}

fn loss_graph(kind: LossKind, g: &mut Graph<f64>, p: fcvad::tensor::Var, t: fcvad::tensor::Var) -> fcvad::Result<fcvad::tensor::Var> {
    match kind {
        LossKind::Intensity => intensity_loss(g, p, t),
        LossKind::Gradient => gradient_loss(g, p, t),
        LossKind::Consistency => consistency_loss(g, p, t, &small_ssim()),
    }
}

fn loss_value(kind: LossKind, p: &[f64], t: &[f64], shape: [usize; 4]) -> f64 {
    let mut g = Graph::<f64>::new();
    let pv = g.constant(Tensor::from_vec(shape, p.to_vec()).unwrap());
    let tv = g.constant(Tensor::from_vec(shape, t.to_vec()).unwrap());
    let l = loss_graph(kind, &mut g, pv, tv).unwrap();
    g.scalar(l)
}

/// Worst relative error between backprop and central differences.
pub fn gradient_check(kind: LossKind, seed: u64) -> Result<f64, String> {
    let shape = [1, 2, 6, 6];
    let n: usize = shape.iter().product();
    let mut r = rng(seed);
    let p = uniform(&mut r, n, -1.0, 1.0);
    let t = uniform(&mut r, n, -1.0, 1.0);
    let mut g = Graph::<f64>::new();
    let pv = g.leaf(lib(Tensor::from_vec(shape, p.clone()))?);
    let tv = g.constant(lib(Tensor::from_vec(shape, t.clone()))?);
    let l = lib(loss_graph(kind, &mut g, pv, tv))?;
    let grads = lib(g.backward(l))?;
    let analytic = grads.get(pv).ok_or("no gradient reached the prediction")?.to_vec();
    let numeric = numeric_grad(|x| loss_value(kind, x, &t, shape), &p, 1e-6);
    Ok(relative_error(&analytic, &numeric))
}

pub fn loss_gradients() -> Check {
    let start = Instant::now();
    let mut worst = Vec::new();
    for kind in [LossKind::Intensity, LossKind::Gradient, LossKind::Consistency] {
        let mut w: f64 = 0.0;
        for seed in 0..20 {
            let e = gradient_check(kind, seed)?;
            if !(e < 1e-3) {
                return Err(format!("{kind:?} seed {seed}: relative error {e:.2e}"));
            }
            w = w.max(e);
        }
        worst.push(format!("{kind:?} {w:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = format!("worst relative error {} over 20 seeds in {secs:.1}s", worst.join(", "));
    if secs < 60.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

/// Library channel attention vs the loop oracle; returns the largest
/// absolute deviation over output and map.
pub fn channel_attention_deviation(seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let c = [8, 16, 32, 64][seed as usize % 4];
    let shape = [2, c, 3, 4];
    let mut store = ParamStore::default();
    let att = {
        let mut init = Init::new(&mut store, seed);
        lib(ChannelAttention::new(&mut init, "eca", c, &GcamConfig::default()))?
    };
    let id = att.weight();
    let kernel: Vec<f64> = uniform(&mut r, att.kernel, -2.0, 2.0);
    if store.params().len() != 1 {
        return Err(format!("channel attention owns {} tensors, expected one kernel", store.params().len()));
    }
    store.params_mut()[0].data = kernel.iter().map(|&v| v as f32).collect();
    let stored: Vec<f64> = store.param(id).data.iter().map(|&v| v as f64).collect();
    let x = uniform(&mut r, shape.iter().product(), -1.0, 1.0);
    let mut s = Session::<f64>::new(&store, Mode::Eval);
    let xv = s.input(lib(Tensor::from_vec(shape, x.clone()))?);
    let (out, map) = lib(att.forward(&mut s, xv))?;
    let (want_out, want_map) = channel_attention(&x, shape, &stored);
    let got_out = s.graph.value(out).data().to_vec();
    let got_map = s.graph.value(map).data().to_vec();
    Ok(max_abs_diff(&got_out, &want_out).max(max_abs_diff(&got_map, &want_map)))
}

pub fn pyramid_deviation(seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let (h, w) = (8 + (seed as usize * 7) % 33, 8 + (seed as usize * 13) % 41);
    let values = uniform(&mut r, h * w, 0.0, 0.5);
    let cfg = PyramidConfig::default();
    let e = ErrorMap { height: h, width: w, values: values.clone(), horizon: Horizon::Hybrid };
    let got = pyramid_psnr(&e, &cfg);
    let want = super::pyramid_psnr(&values, h, w, &cfg.windows, cfg.epsilon);
    Ok((got - want).abs())
}

pub fn gradient_loss_deviation(seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let shape = [2, 3, 4 + seed as usize % 3, 5];
    let n = shape.iter().product();
    let (p, t) = (uniform(&mut r, n, -1.0, 1.0), uniform(&mut r, n, -1.0, 1.0));
    Ok((loss_value(LossKind::Gradient, &p, &t, shape) - gradient(&p, &t, shape)).abs())
}

pub fn ssim_deviation(seed: u64) -> Result<f64, String> {
    let mut r = rng(seed);
    let cfg = SsimConfig::default();
    let shape = [1, 2, 11 + seed as usize % 4, 12];
    let n = shape.iter().product();
    let a = uniform(&mut r, n, -1.0, 1.0);
    // correlated partner so the index is far from zero
    let b: Vec<f64> = a.iter().zip(uniform(&mut r, n, -0.3, 0.3)).map(|(x, d)| (x + d).clamp(-1.0, 1.0)).collect();
    let got = lib(fcvad::losses::ssim_index(&lib(Tensor::from_vec(shape, a.clone()))?, &lib(Tensor::from_vec(shape, b.clone()))?, &cfg))?;
    let want = super::ssim(&a, &b, shape, cfg.window, cfg.sigma, cfg.c1(), cfg.c2());
    Ok((got - want).abs())
}

pub fn oracle_suite() -> Check {
    let start = Instant::now();
    let suites: [(&str, fn(u64) -> Result<f64, String>); 4] = [
        ("channel attention", channel_attention_deviation),
        ("pyramid", pyramid_deviation),
        ("gradient loss", gradient_loss_deviation),
        ("ssim", ssim_deviation),
    ];
    let mut parts = Vec::new();
    for (name, f) in suites {
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let d = f(seed)?;
            if !(d <= 1e-6) {
                return Err(format!("{name} seed {seed}: deviation {d:.2e}"));
            }
            worst = worst.max(d);
        }
        parts.push(format!("{name} {worst:.1e}"));
    }
    let secs = start.elapsed().as_secs_f64();
    let summary = format!("max deviation {} over 20 inputs in {secs:.1}s", parts.join(", "));
    if secs < 60.0 {
        Ok(summary)
    } else {
        Err(summary)
    }
}

fn tiny_model() -> ModelConfig {
    ModelConfig { frame_size: 16, channel_plan: vec![4, 6, 8, 12], ..ModelConfig::default() }
}

fn tiny_synth() -> SyntheticSpec {
    SyntheticSpec {
        frame_size: 32,
        train_videos: 1,
        test_videos: 2,
        frames_per_video: 30,
        anomaly_length: 6,
        shape_radius: [3.0, 5.0],
        ..SyntheticSpec::default()
    }
}

/// Anomaly scores of two independent constructions of the same tiny run.
pub fn anomaly_bits_twice() -> Result<(Vec<u64>, Vec<u64>), String> {
    let once = || -> Result<Vec<u64>, String> {
        let cfg = RunConfig { model: tiny_model(), synth: tiny_synth(), ..RunConfig::default() };
        let model = lib(Predictor::new(&cfg.model, 3))?;
        let videos = lib(lib(Datasets::open(&cfg))?.load_test(&cfg))?;
        let (series, _) = lib(score_videos(&model, &videos, cfg.model.t, cfg.model.sigma, &cfg.scoring))?;
        Ok(series.iter().flat_map(|s| s.anomaly.iter().map(|v| v.to_bits())).collect())
    };
    Ok((once()?, once()?))
}

pub fn scoring_properties() -> Check {
    let norm = lib(normalize_scores(&[20.0, 25.0, 30.0]))?;
    if norm != [0.0, 0.5, 1.0] {
        return Err(format!("normalize_scores([20,25,30]) = {norm:?}"));
    }
    let cfg = PyramidConfig::default();
    for seed in 0..20 {
        let mut r = rng(seed);
        let values = uniform(&mut r, 24 * 24, 0.0, 0.2);
        let e = ErrorMap { height: 24, width: 24, values, horizon: Horizon::Hybrid };
        let (p1, p2) = (pyramid_psnr(&e, &cfg), pyramid_psnr(&e.scaled(2.0), &cfg));
        if !(p2 < p1) {
            return Err(format!("seed {seed}: doubling the error map moved PSNR {p1} -> {p2}"));
        }
    }
    let (a, b) = anomaly_bits_twice()?;
    if a.is_empty() || a != b {
        return Err(format!("anomaly scores differ between runs ({} vs {} values)", a.len(), b.len()));
    }
    Ok(format!("normalization exact, pyramid monotone on 20 maps, {} anomaly scores bit-identical", a.len()))
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// The shipped desk-scale configuration.
pub fn desk_config() -> Result<RunConfig, String> {
    lib(RunConfig::load(Some(&workspace_root().join("configs/synthetic.toml")), &[]))
}

pub struct DeskRun {
    pub row: AblationRow,
    pub secs: f64,
}

pub struct DeskResults {
    pub full: DeskRun,
    pub variants: Vec<DeskRun>,
    pub degenerate: DeskRun,
    pub model: Predictor,
    pub bench_frames: Vec<std::sync::Arc<image::DynamicImage>>,
}

fn desk_variant(base: &RunConfig, cfa: bool, ega: bool) -> RunConfig {
    let mut cfg = base.clone();
    cfg.model.use_cfa = cfa;
    cfg.model.use_ega = ega;
    cfg
}

/// Trains the full model, the three reduced GCAM variants and the
/// one-step-horizon model on the synthetic task.
pub fn desk_runs() -> Result<DeskResults, String> {
    let base = desk_config()?;
    let start = Instant::now();
    let data = lib(Datasets::open(&base))?;
    let (train, test) = (lib(data.load_train(&base))?, lib(data.load_test(&base))?);
    let prep = start.elapsed().as_secs_f64();

    let run = |name: &str, cfg: &RunConfig| -> Result<(DeskRun, Predictor), String> {
        let t = Instant::now();
        let (row, model) = lib(run_one(name, cfg, &train, &test, None))?;
        Ok((DeskRun { row, secs: t.elapsed().as_secs_f64() }, model))
    };
    let (mut full, model) = run("full", &base)?;
    full.secs += prep;
    let mut variants = Vec::new();
    for (name, cfa, ega) in [("none", false, false), ("ega", false, true), ("cfa", true, false)] {
        variants.push(run(name, &desk_variant(&base, cfa, ega))?.0);
    }
    let mut degenerate_cfg = base.clone();
    degenerate_cfg.model.sigma = 1;
    let degenerate = run("sigma1", &degenerate_cfg)?.0;

    let need = MIN_BENCH_FRAMES + base.model.t + base.model.sigma;
    let bench_frames = lib(data.test.raw_frames(need))?;
    Ok(DeskResults { full, variants, degenerate, model, bench_frames })
}

pub fn speed_ordering(model: &Predictor, frames: &[std::sync::Arc<image::DynamicImage>]) -> Check {
    let n = MIN_BENCH_FRAMES;
    if frames.len() < frames_needed(model, n) {
        return Err(format!("only {} frames available", frames.len()));
    }
    let rec = lib(bench(model, frames, &ScoringConfig::default(), n))?;
    let summary = format!(
        "fps_plain {:.1} vs fps_pyramid {:.1} over {} frames (model only {:.1})",
        rec.fps_plain, rec.fps_pyramid, rec.frames, rec.fps_model
    );
    if rec.fps_plain > rec.fps_pyramid {
        Ok(summary)
    } else {
        Err(summary)
    }
}
