use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
[model]
frame_size = 16
channel_plan = [4, 6, 8, 12]

[train]
epochs = 1
batch_size = 4
max_steps = 2

[synth]
frame_size = 32
train_videos = 2
test_videos = 2
frames_per_video = 30
anomaly_length = 6
shape_radius = [3.0, 5.0]
"#;

fn fcvad(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcvad"))
        .args(args)
        .env_remove("FCVAD_DATA_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn tiny_config(dir: &Path) -> PathBuf {
    let p = dir.join("tiny.toml");
    fs::write(&p, TINY).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Relative path -> bytes for every file under `root`.
fn snapshot(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let o = fcvad(&["synth", "--config", s(&cfg), "--seed", "0", "--out", s(out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let (sa, sb) = (snapshot(&a), snapshot(&b));
    assert!(sa.iter().any(|(p, _)| p.ends_with("labels.txt")));
    assert_eq!(sa, sb);
}

#[test]
fn train_score_eval_bench_round() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let run = |args: &[&str]| {
        let o = fcvad(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    };
    let data = tmp.path().join("data");
    run(&["synth", "--config", s(&cfg), "--out", s(&data)]);
    let tr = tmp.path().join("train");
    run(&["train", "--config", s(&cfg), "--data", s(&data), "--out", s(&tr)]);
    let ck = tr.join("checkpoint.bin");
    assert!(ck.is_file());
    for dir in [&data, &tr] {
        assert!(dir.join("config.toml").is_file() && dir.join("version.json").is_file());
    }

    let csvs = |out: &Path| {
        run(&["score", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ck), "--dump-maps", "--out", s(out)]);
        snapshot(&out.join("scores"))
    };
    let (first, second) = (csvs(&tmp.path().join("s1")), csvs(&tmp.path().join("s2")));
    assert_eq!(first, second);
    let text = String::from_utf8(first[0].1.clone()).unwrap();
    assert_eq!(text.lines().next().unwrap(), "frame_index,raw_psnr,normalized,anomaly_score,label");
    assert_eq!(text.lines().count(), 31);
    let maps = fs::read_dir(tmp.path().join("s1/maps")).unwrap().count();
    assert_eq!(maps, 2 * (3 * 3 + 3));

    let ev = tmp.path().join("eval");
    let stdout = run(&["eval", "--config", s(&cfg), "--data", s(&data), "--checkpoint", s(&ck), "--mode", "plain", "--out", s(&ev)]);
    assert!(stdout.contains("micro AUC"));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(ev.join("eval.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "plain");
    assert!(report["micro_auc"].as_f64().is_some());

    let bn = tmp.path().join("bench");
    run(&["bench", "--config", s(&cfg), "--set", "synth.frames_per_video=110", "--checkpoint", s(&ck), "--out", s(&bn)]);
    let rec: serde_json::Value = serde_json::from_slice(&fs::read(bn.join("bench.json")).unwrap()).unwrap();
    for key in ["params", "flops", "fps_plain", "fps_pyramid"] {
        assert!(rec[key].is_number(), "bench record lacks {key}");
    }
}

#[test]
fn untrained_model_scores_near_chance() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/synthetic.toml");
    let tmp = tempfile::tempdir().unwrap();
    let o = fcvad(&["eval", "--config", s(&cfg), "--out", s(tmp.path())]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&fs::read(tmp.path().join("eval.json")).unwrap()).unwrap();
    let auc = report["micro_auc"].as_f64().unwrap();
    assert!((auc - 0.5).abs() <= 0.15, "random-weight AUC {auc}");
}

#[test]
fn failures_map_to_distinct_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let out = tmp.path().join("o");
    let code = |args: &[&str]| fcvad(args).status.code();

    assert_eq!(code(&["frobnicate"]), Some(2));
    assert_eq!(code(&["eval", "--config", s(&cfg), "--set", "model.bogus=1", "--out", s(&out)]), Some(2));
    assert_eq!(code(&["eval", "--config", s(&tmp.path().join("missing.toml")), "--out", s(&out)]), Some(2));
    assert_eq!(code(&["eval", "--config", s(&cfg), "--data", s(&tmp.path().join("nowhere")), "--out", s(&out)]), Some(3));

    let tr = tmp.path().join("train");
    assert_eq!(code(&["train", "--config", s(&cfg), "--out", s(&tr)]), Some(0));
    let ck = tr.join("checkpoint.bin");
    let mismatch = ["eval", "--config", s(&cfg), "--set", "model.use_ega=false", "--checkpoint", s(&ck), "--out", s(&out)];
    assert_eq!(code(&mismatch), Some(4));
    let o = fcvad(&mismatch);
    assert!(String::from_utf8_lossy(&o.stderr).contains("different model config"));
}

#[test]
fn ablate_writes_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config(tmp.path());
    let sweep = tmp.path().join("sweep.toml");
    fs::write(&sweep, "gcam = [\"none\", \"full\"]\nloss = [\"full\"]\nsigma = [1, 4]\n").unwrap();
    let out = tmp.path().join("ab");
    let o = fcvad(&["ablate", "--config", s(&cfg), "--sweep", s(&sweep), "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows: serde_json::Value = serde_json::from_slice(&fs::read(out.join("ablation.json")).unwrap()).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert_eq!(r["identical_targets"].as_bool().unwrap(), r["sigma"] == 1);
    }
    assert!(out.join("ablation.txt").is_file());
}
