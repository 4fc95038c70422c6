use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use fcvad::backbone::Predictor;
use fcvad::datapipe::write_split;
use fcvad::engine::ablate::{format_table, run_sweep, SweepSpec};
use fcvad::engine::bench::{bench, frames_needed, MIN_BENCH_FRAMES};
use fcvad::engine::checkpoint;
use fcvad::engine::eval::{auc_summary, evaluate, score_videos};
use fcvad::engine::export::{dump_maps, write_series_csv};
use fcvad::engine::{train, DataSource, Datasets, RunConfig};
use fcvad::scoring::ScoreMode;
use fcvad::{Error, ErrorKind, Result};

/// Environment variable naming an on-disk dataset root; selects the disk source.
const DATA_ROOT_ENV: &str = "FCVAD_DATA_ROOT";

#[derive(Parser)]
#[command(name = "fcvad", version, about = "Frame-prediction video anomaly detection")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic moving-shape dataset on disk.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Generator seed (overrides synth.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a model and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Score test videos: per-video CSV curves and optional map dumps.
    Score {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Dump attention and error maps at each video's peak-score frame.
        #[arg(long)]
        dump_maps: bool,
    },
    /// Score and report frame-level AUC.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Measure throughput and complexity.
    Bench {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// Scored frames to time (at least 200).
        #[arg(long, default_value_t = MIN_BENCH_FRAMES)]
        frames: usize,
    },
    /// Run a GCAM / loss-mask / horizon sweep.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Sweep file; defaults to all GCAM combos and loss masks.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run config.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-key override, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Read the dataset from this root instead of generating it.
    #[arg(long, env = DATA_ROOT_ENV)]
    data: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Device::Cpu)]
    device: Device,
}

#[derive(Args)]
struct ModelArgs {
    /// Trained weights; random initialization when omitted.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Scoring mode (overrides scoring.mode).
    #[arg(long)]
    mode: Option<ScoreMode>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Device {
    Cpu,
}

impl Common {
    fn resolve(&self, mode: Option<ScoreMode>) -> Result<RunConfig> {
        let mut cfg = RunConfig::load(self.config.as_deref(), &self.overrides)?;
        if let Some(root) = &self.data {
            cfg.data.source = DataSource::Disk;
            cfg.data.root = Some(root.clone());
        }
        if let Some(m) = mode {
            cfg.scoring.mode = m;
        }
        cfg.validate()?;
        fs::create_dir_all(&self.out).map_err(|e| Error::io(&self.out, e))?;
        write_snapshot(&self.out, &cfg)?;
        Ok(cfg)
    }
}

/// Resolved config plus the code version, next to every run's outputs.
fn write_snapshot(out: &Path, cfg: &RunConfig) -> Result<()> {
    let p = out.join("config.toml");
    fs::write(&p, cfg.to_toml()?).map_err(|e| Error::io(&p, e))?;
    let version = serde_json::json!({
        "name": env!("CARGO_PKG_NAME"),
        "version": env!("CARGO_PKG_VERSION"),
        "config_hash": cfg.hash(),
    });
    write_json(&out.join("version.json"), &version)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_model(args: &ModelArgs, cfg: &RunConfig) -> Result<(Predictor, Option<u64>)> {
    match &args.checkpoint {
        Some(p) => {
            let ck = checkpoint::load(p, Some(&cfg.model))?;
            Ok((ck.model, Some(ck.step)))
        }
        None => {
            log::warn!("no checkpoint given; using randomly initialized weights (seed {})", cfg.train.seed);
            Ok((Predictor::new(&cfg.model, cfg.train.seed)?, None))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Command::Synth { mut common, seed } => {
            if let Some(s) = seed {
                common.overrides.push(format!("synth.seed={s}"));
            }
            common.data = None;
            let cfg = common.resolve(None)?;
            let d = fcvad::datapipe::synth_generate(&cfg.synth)?;
            write_split(&d.train, &common.out)?;
            write_split(&d.test, &common.out)?;
            write_json(&common.out.join("intervals.json"), &d.intervals)?;
            println!(
                "wrote {} train and {} test videos to {}",
                d.train.videos.len(),
                d.test.videos.len(),
                common.out.display()
            );
        }
        Command::Train { common } => {
            let cfg = common.resolve(None)?;
            let data = Datasets::open(&cfg)?;
            let videos = data.load_train(&cfg)?;
            let outcome = train(&cfg, &videos, Some(&common.out))?;
            let last = outcome.history.last().map_or(f64::NAN, |r| r.total);
            println!(
                "trained {} steps on {} windows; final loss {last:.5}; checkpoint {}",
                outcome.steps,
                outcome.windows,
                common.out.join("checkpoint.bin").display()
            );
        }
        Command::Score { common, model, dump_maps: dump } => {
            let cfg = common.resolve(model.mode)?;
            let (predictor, _) = load_model(&model, &cfg)?;
            let videos = Datasets::open(&cfg)?.load_test(&cfg)?;
            let (series, skipped) = score_videos(&predictor, &videos, cfg.model.t, cfg.model.sigma, &cfg.scoring)?;
            let dir = common.out.join("scores");
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for s in &series {
                write_series_csv(&dir.join(format!("{}.csv", s.video_id)), s)?;
            }
            if dump {
                let maps = common.out.join("maps");
                for (s, v) in series.iter().zip(videos.iter().filter(|v| !skipped.iter().any(|id| **id == *v.id))) {
                    let scored = s.first_scored..s.first_scored + s.scored;
                    let peak = scored.max_by(|&a, &b| s.anomaly[a].total_cmp(&s.anomaly[b])).expect("scored frames");
                    dump_maps(&predictor, v, &[peak], cfg.scoring.lambda, &maps)?;
                }
            }
            println!("scored {} videos ({} skipped) into {}", series.len(), skipped.len(), dir.display());
            if series.iter().all(|s| s.labels.is_some()) && !series.is_empty() {
                let summary = auc_summary(&series)?;
                println!("micro AUC {:.4}", summary.micro_auc);
            }
        }
        Command::Eval { common, model } => {
            let cfg = common.resolve(model.mode)?;
            let (predictor, step) = load_model(&model, &cfg)?;
            let videos = Datasets::open(&cfg)?.load_test(&cfg)?;
            let (report, _) = evaluate(&predictor, &videos, &cfg, step)?;
            write_json(&common.out.join("eval.json"), &report)?;
            let macro_auc = report.macro_auc.map_or("n/a".to_string(), |m| format!("{m:.4}"));
            println!("micro AUC {:.4}  macro AUC {macro_auc}  ({} mode)", report.micro_auc, report.mode);
        }
        Command::Bench { common, model, frames } => {
            let cfg = common.resolve(model.mode)?;
            let (predictor, _) = load_model(&model, &cfg)?;
            let need = frames_needed(&predictor, frames.max(MIN_BENCH_FRAMES));
            let raw = Datasets::open(&cfg)?.test.raw_frames(need)?;
            let record = bench(&predictor, &raw, &cfg.scoring, frames)?;
            write_json(&common.out.join("bench.json"), &record)?;
            println!(
                "params {:.3}M  MACs {:.3}G  FLOPs {:.3}G  fps_plain {:.1}  fps_pyramid {:.1}  fps_model {:.1}",
                record.params as f64 / 1e6,
                record.macs as f64 / 1e9,
                record.flops as f64 / 1e9,
                record.fps_plain,
                record.fps_pyramid,
                record.fps_model
            );
        }
        Command::Ablate { common, sweep } => {
            let cfg = common.resolve(None)?;
            let spec = match &sweep {
                Some(p) => SweepSpec::from_toml_str(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
                None => SweepSpec::default(),
            };
            let data = Datasets::open(&cfg)?;
            let (train_v, test_v) = (data.load_train(&cfg)?, data.load_test(&cfg)?);
            let rows = run_sweep(&cfg, &spec, &train_v, &test_v, Some(&common.out))?;
            write_json(&common.out.join("ablation.json"), &rows)?;
            let table = format_table(&rows);
            let p = common.out.join("ablation.txt");
            fs::write(&p, &table).map_err(|e| Error::io(&p, e))?;
            print!("{table}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = match e.kind() {
                ErrorKind::Config => (2, "config"),
                ErrorKind::Data => (3, "data"),
                ErrorKind::Runtime => (4, "runtime"),
            };
            eprintln!("error ({kind}): {e}");
            ExitCode::from(code)
        }
    }
}
