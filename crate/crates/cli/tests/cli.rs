use std::path::Path;

use clap::Parser;
use dyadic_cli::commands::{run, Cli, Command};
use serde_json::Value;

const TINY: &str = r#"
[synth]
train_clips = 30
pool_clips = 6
test_clips = 6
[codec]
min_frames = 10
[model]
d_model = 16
n_layers = 1
[sft]
steps = 10
[dpo]
steps = 4
batch_size = 4
[candidates]
n = 4
"#;

fn dyadic(config: &Path, args: &[&str]) {
    let mut argv = vec!["dyadic", "--config", config.to_str().unwrap()];
    argv.extend_from_slice(args);
    run(Cli::try_parse_from(argv).unwrap()).unwrap();
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("pipeline.toml");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

#[test]
fn unknown_verb_and_flag_are_usage_errors() {
    assert!(Cli::try_parse_from(["dyadic", "frobnicate"]).is_err());
    assert!(Cli::try_parse_from(["dyadic", "fit-bins", "--nope"]).is_err());
    assert!(Cli::try_parse_from(["dyadic"]).is_err());
}

#[test]
fn fit_bins_defaults() {
    match Cli::try_parse_from(["dyadic", "fit-bins"]).unwrap().command {
        Command::FitBins { bins, trunc, .. } => {
            assert_eq!(bins, 256);
            assert_eq!(trunc, 0.01);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn every_verb_runs_over_a_tiny_config() {
    let (dir, cfg) = setup();
    let p = dir.path();
    dyadic(&cfg, &["synth-data"]);
    dyadic(&cfg, &["fit-bins"]);
    dyadic(&cfg, &["train-sft"]);
    dyadic(&cfg, &["sample-candidates"]);
    dyadic(&cfg, &["oracle-rate"]);
    let log = std::fs::read(p.join("run/ratings.jsonl")).unwrap();
    dyadic(&cfg, &["oracle-rate"]);
    assert_eq!(std::fs::read(p.join("run/ratings.jsonl")).unwrap(), log, "second pass must not re-rate");
    dyadic(&cfg, &["build-prefs"]);
    dyadic(&cfg, &["train-dpo"]);
    let pred = p.join("run/dpo");
    let gt = p.join("data/test");
    let out = p.join("report.json");
    dyadic(
        &cfg,
        &["evaluate", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap(), "--out", out.to_str().unwrap()],
    );
    let report: Value = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    for col in ["L2", "FD", "Variation", "Diversity", "P-FD", "L2Affect_x100"] {
        assert!(report[col].as_f64().unwrap().is_finite(), "{col}");
    }
    let fpm = p.join("clip.fpm");
    dyadic(
        &cfg,
        &["render", "--split", gt.to_str().unwrap(), "--clip", "test-00000", "--out", fpm.to_str().unwrap()],
    );
    let seq = dyadic_core::face::import_playback(&fpm).unwrap();
    assert_eq!(seq.frames.len(), 8);
    dyadic(&cfg, &["ablate"]);
    let rows: Value = serde_json::from_str(&std::fs::read_to_string(p.join("run/ablation.json")).unwrap()).unwrap();
    let names: Vec<&str> = rows.as_array().unwrap().iter().map(|r| r["variant"].as_str().unwrap()).collect();
    assert_eq!(names, ["Full", "Random-Prefer", "SFT-Preferred", "SFT-Only"]);
    for f in ["bins.json", "sft.ckpt", "sft_log.jsonl", "groups.jsonl", "prefs.jsonl", "prefs_summary.json", "dpo.ckpt", "dpo_log.jsonl"] {
        assert!(p.join("run").join(f).exists(), "{f}");
    }
    assert!(std::fs::read_dir(p.join("run/playback")).unwrap().count() > 0);
}

#[test]
fn synth_data_is_byte_identical_across_runs() {
    let (a, cfg_a) = setup();
    let (b, cfg_b) = setup();
    dyadic(&cfg_a, &["synth-data"]);
    dyadic(&cfg_b, &["synth-data"]);
    for f in ["train.jsonl", "pool.jsonl", "test.jsonl", "frames/test-00003.json"] {
        assert_eq!(
            std::fs::read(a.path().join("data").join(f)).unwrap(),
            std::fs::read(b.path().join("data").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn missing_data_dir_is_reported() {
    let (_dir, cfg) = setup();
    let cli = Cli::try_parse_from(["dyadic", "--config", cfg.to_str().unwrap(), "train-sft"]).unwrap();
    let err = run(cli).unwrap_err().to_string();
    assert!(err.contains("does not exist"), "{err}");
}
