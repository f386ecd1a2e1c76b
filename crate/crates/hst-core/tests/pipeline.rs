//! End-to-end pipeline tests through the `hst` binary: synth -> train ->
//! tokenize/reconstruct/analyze/evaluate/sweep, plus failure-path behaviour
//! (nonzero exit, partial run directories removed).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn hst() -> Command {
    Command::new(env!("CARGO_BIN_EXE_hst"))
}

fn run_ok(args: &[&str], out_root: &Path) -> Output {
    let output = hst().arg("--out").arg(out_root).args(args).output().expect("spawn hst");
    assert!(
        output.status.success(),
        "command {:?} failed:\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&output.stdout),
        String::from_utf8_lossy(&output.stderr)
    );
    output
}

/// The single run directory created by the last command of a kind.
fn run_dir(out_root: &Path, prefix: &str) -> PathBuf {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(out_root)
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.file_name().unwrap().to_string_lossy().starts_with(prefix))
        .collect();
    dirs.sort();
    dirs.pop().unwrap_or_else(|| panic!("no {prefix}-* directory under {}", out_root.display()))
}

const TINY: &[&str] = &[
    "--window", "16", "--hidden", "8", "--ssm-layers", "1", "--state-dim", "2", "--backend",
    "gru", "--enc-layers", "1", "--heads", "2", "--dec-layers", "1", "--k", "4",
];

fn synth_dataset(root: &Path) -> PathBuf {
    run_ok(
        &[
            "synth", "--states", "4", "--rois", "4", "--subjects", "6", "--timepoints", "64",
            "--dwell-mean", "8", "--noise-std", "0.05", "--seed", "5", "--groups", "2",
        ],
        root,
    );
    let dir = run_dir(root, "synth-");
    dir.join("dataset").join("manifest.csv")
}

#[test]
fn synth_writes_complete_dataset() {
    let root = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(root.path());
    assert!(manifest.exists());
    let dir = manifest.parent().unwrap();
    let csvs = std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| {
            let name = e.as_ref().unwrap().file_name().to_string_lossy().to_string();
            name.starts_with("sub-") && name.ends_with(".csv") && !name.contains(".states.")
        })
        .count();
    assert_eq!(csvs, 6, "one matrix CSV per subject");
    let sidecars = std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains(".states."))
        .count();
    assert_eq!(sidecars, 6, "ground-truth sidecars for synthetic data");
    let run = run_dir(root.path(), "synth-");
    assert!(run.join("run_config.json").exists(), "resolved config recorded");
    assert!(run.join("generator_group0.json").exists());
    assert!(run.join("generator_group1.json").exists());
    let rc = std::fs::read_to_string(run.join("run_config.json")).unwrap();
    assert!(rc.contains("\"version\""), "run config carries the code version");
}

#[test]
fn full_pipeline_and_deterministic_reports() {
    let root = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(root.path());
    let m = manifest.to_str().unwrap();

    // Tokenizer training.
    let mut args = vec!["train-tokenizer", "--manifest", m];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--steps", "6", "--batch", "4", "--seed", "3", "--lr", "1e-3"]);
    run_ok(&args, root.path());
    let tok_dir = run_dir(root.path(), "train-tokenizer-");
    let ckpt = tok_dir.join("tokenizer.hst");
    assert!(ckpt.exists());
    let metrics = std::fs::read_to_string(tok_dir.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 6, "one metrics line per step");
    assert!(metrics.lines().next().unwrap().contains("\"recon\""));
    let c = ckpt.to_str().unwrap();

    // Tokenize twice: identical token tables.
    run_ok(&["tokenize", "--checkpoint", c, "--manifest", m], root.path());
    let t1 = std::fs::read(run_dir(root.path(), "tokenize-").join("tokens.csv")).unwrap();
    run_ok(&["tokenize", "--checkpoint", c, "--manifest", m], root.path());
    let t2 = std::fs::read(run_dir(root.path(), "tokenize-").join("tokens.csv")).unwrap();
    assert_eq!(t1, t2, "tokenize must be deterministic");
    let table = String::from_utf8(t1).unwrap();
    assert!(table.starts_with(
        "subject_id,t,state_token,transition_token,state_residual_token,transition_residual_token"
    ));
    // 6 subjects x 64 timepoints -> 4 windows of 16 each.
    assert_eq!(table.lines().count() - 1, 6 * 64);

    // Analyze twice: identical statistical reports.
    run_ok(&["analyze", "--checkpoint", c, "--manifest", m, "--plot"], root.path());
    let a1 = run_dir(root.path(), "analyze-");
    run_ok(&["analyze", "--checkpoint", c, "--manifest", m, "--plot"], root.path());
    let a2 = run_dir(root.path(), "analyze-");
    assert_ne!(a1, a2);
    for file in ["comparison_state.csv", "comparison_transition.csv", "occupancy.csv", "activation_state.csv"] {
        let x = std::fs::read(a1.join(file)).unwrap();
        let y = std::fs::read(a2.join(file)).unwrap();
        assert_eq!(x, y, "{file} must be identical across runs");
    }
    assert!(a1.join("comparison_state.svg").exists(), "plot emitted on request");

    // The rank-based test variant also runs.
    run_ok(
        &["analyze", "--checkpoint", c, "--manifest", m, "--test", "mannwhitney"],
        root.path(),
    );

    // Reconstruction metrics.
    run_ok(&["reconstruct", "--checkpoint", c, "--manifest", m, "--dump"], root.path());
    let rec_dir = run_dir(root.path(), "reconstruct-");
    let recon = std::fs::read_to_string(rec_dir.join("reconstruction.csv")).unwrap();
    assert!(recon.lines().last().unwrap().starts_with("mean,"));
    assert!(rec_dir.join("sub-0000_recon.csv").exists(), "--dump writes reconstructions");

    // Classifier fine-tuning on top of the tokenizer checkpoint.
    run_ok(
        &["train-classifier", "--checkpoint", c, "--manifest", m, "--epochs", "2", "--lr", "1e-3"],
        root.path(),
    );
    let cls_dir = run_dir(root.path(), "train-classifier-");
    assert!(cls_dir.join("classifier.hst").exists());
    assert_eq!(std::fs::read_to_string(cls_dir.join("phase2.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn evaluate_and_sweep_emit_tables() {
    let root = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(root.path());
    let m = manifest.to_str().unwrap();

    let mut args = vec!["evaluate", "--manifest", m, "--folds", "2"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--steps", "4", "--epochs", "2", "--batch", "4", "--seed", "1", "--lr", "1e-3"]);
    run_ok(&args, root.path());
    let eval_dir = run_dir(root.path(), "evaluate-");
    let table = std::fs::read_to_string(eval_dir.join("cv_results.csv")).unwrap();
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], "fold,acc,sen,spe");
    assert_eq!(lines.len(), 4, "two fold rows plus header and summary");
    assert!(lines[3].starts_with("mean+-std"));
    assert!(eval_dir.join("fold_plan.json").exists());

    let mut args = vec!["sweep-k", "--manifest", m, "--grid", "4,8", "--holdout-folds", "3"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--steps", "4", "--epochs", "2", "--batch", "4", "--seed", "1", "--lr", "1e-3"]);
    run_ok(&args, root.path());
    let sweep = std::fs::read_to_string(run_dir(root.path(), "sweep-k-").join("sweep.csv")).unwrap();
    let lines: Vec<&str> = sweep.lines().collect();
    assert_eq!(lines[0], "k,variant,recon_r,recon_mse,test_acc");
    assert_eq!(lines.len(), 3, "one row per grid entry");
    assert!(lines[1].starts_with("4,hierarchical"));
    assert!(lines[2].starts_with("8,hierarchical"));
}

#[test]
fn failures_exit_nonzero_and_clean_up() {
    let root = tempfile::tempdir().unwrap();
    let out = hst()
        .arg("--out")
        .arg(root.path())
        .args(["train-tokenizer", "--manifest", "/nonexistent/manifest.csv"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    let leftovers = std::fs::read_dir(root.path()).unwrap().count();
    assert_eq!(leftovers, 0, "partial run directory must be removed on failure");

    // Unknown flag: usage error with nonzero status.
    let out = hst().args(["tokenize", "--no-such-flag"]).output().unwrap();
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2), "clap usage errors exit with 2");
}

#[test]
fn variant_flags_run_flat_and_continuous() {
    let root = tempfile::tempdir().unwrap();
    let manifest = synth_dataset(root.path());
    let m = manifest.to_str().unwrap();
    for variant in ["flat", "continuous"] {
        let mut args = vec!["train-tokenizer", "--manifest", m, "--variant", variant];
        args.extend_from_slice(TINY);
        args.extend_from_slice(&["--steps", "3", "--batch", "4", "--seed", "2", "--lr", "1e-3"]);
        run_ok(&args, root.path());
        let dir = run_dir(root.path(), "train-tokenizer-");
        assert!(dir.join("tokenizer.hst").exists(), "{variant} checkpoint written");
    }
}
