//! `hst` — train, tokenize, evaluate and analyze hierarchical state-token
//! models of multivariate time series.
//!
//! Every run writes its artifacts into a fresh timestamped directory under
//! `--out` (or `$HST_OUT_ROOT`, default `./runs`), together with the resolved
//! configuration (`run_config.json`). On failure the partial run directory is
//! removed and the exit status is nonzero.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hst_core::checkpoint::HstCheckpoint;
use hst_core::dataio::{
    load_dataset, prepare_windows, synth_switching_lds, write_dataset, SwitchingSystemSpec,
    TimeSeriesRecord, WindowSpec,
};
use hst_core::error::{HstError, Result};
use hst_core::eval::{cross_validate, predict_subject, stratified_kfold, CvConfig};
use hst_core::model::{ClassifierInput, HstModel, ModelConfig, QuantizeMode};
use hst_core::quant::TokenizedSequence;
use hst_core::ssm::SsmBackend;
use hst_core::stats::{
    group_comparison_report, occupancy, state_activation_map, write_comparison_csv,
    write_comparison_svg, GroupTest,
};
use hst_core::train::{
    class_index_map, train_classifier, train_tokenizer_logged, MetricsLog, OptimizerKind,
    TrainConfig,
};

#[derive(Parser)]
#[command(name = "hst", version, about = "Hierarchical state tokenization of multivariate time series")]
struct Cli {
    /// Output root; a timestamped run directory is created inside.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Serialize)]
enum Cmd {
    /// Generate a synthetic switching-dynamics dataset (manifest + CSVs).
    Synth(SynthArgs),
    /// Phase-1 training: tokenizer + codebooks on a manifest.
    TrainTokenizer(TrainTokenizerArgs),
    /// Phase-2 training: frozen-quantizer classifier fine-tuning.
    TrainClassifier(TrainClassifierArgs),
    /// Emit token streams as CSV for every subject in a manifest.
    Tokenize(TokenizeArgs),
    /// Reconstruct windows and report per-window correlation and MSE.
    Reconstruct(ReconstructArgs),
    /// Stratified cross-validation with the full two-phase pipeline.
    Evaluate(EvaluateArgs),
    /// Token occupancy statistics, group comparison and FDR correction.
    Analyze(AnalyzeArgs),
    /// Codebook-size grid: reconstruction + downstream accuracy per K.
    SweepK(SweepKArgs),
}

#[derive(Args, Serialize, Clone)]
struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    states: usize,
    #[arg(long, default_value_t = 16)]
    rois: usize,
    #[arg(long, default_value_t = 40)]
    subjects: usize,
    #[arg(long, default_value_t = 400)]
    timepoints: usize,
    #[arg(long, default_value_t = 20.0)]
    dwell_mean: f64,
    #[arg(long, default_value_t = 0.05)]
    noise_std: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// 1 = one population; 2 = two groups differing only in transition matrices.
    #[arg(long, default_value_t = 1)]
    groups: usize,
    /// Off-diagonal transition mass concentrated on each group's favored states.
    #[arg(long, default_value_t = 0.9)]
    favor_mass: f64,
    /// Generate from an explicit generator spec (JSON mirroring the
    /// switching-system fields) instead of the built-in construction.
    #[arg(long)]
    spec: Option<PathBuf>,
}

#[derive(Args, Serialize, Clone)]
struct ModelArgs {
    #[arg(long, default_value_t = 100)]
    window: usize,
    /// Window stride; defaults to the window length (non-overlapping).
    #[arg(long)]
    stride: Option<usize>,
    #[arg(long, default_value_t = 256)]
    hidden: usize,
    #[arg(long, default_value_t = 2)]
    ssm_layers: usize,
    #[arg(long, default_value_t = 16)]
    state_dim: usize,
    #[arg(long, default_value = "selective")]
    backend: String,
    #[arg(long, default_value_t = 2)]
    enc_layers: usize,
    #[arg(long, default_value_t = 4)]
    heads: usize,
    #[arg(long, default_value_t = 2)]
    dec_layers: usize,
    /// First-level codebook size for both vocabularies.
    #[arg(long, default_value_t = 8)]
    k: usize,
    /// Residual codebook size (defaults to --k).
    #[arg(long)]
    k_residual: Option<usize>,
    #[arg(long, default_value_t = 0.99)]
    gamma: f64,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    gamma_loss: f64,
    #[arg(long, default_value_t = 0.0)]
    commitment: f64,
    /// hierarchical | flat | continuous
    #[arg(long, default_value = "hierarchical")]
    variant: String,
    #[arg(long, default_value_t = false)]
    literal_spatial_gate: bool,
    #[arg(long, default_value_t = false)]
    literal_transition_residual: bool,
    #[arg(long, default_value_t = false)]
    linear_state_head: bool,
    /// quantized | continuous classifier input pooling.
    #[arg(long, default_value = "quantized")]
    classifier_input: String,
}

#[derive(Args, Serialize, Clone)]
struct TrainArgs {
    #[arg(long, default_value_t = 4000)]
    steps: usize,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = 2e-4)]
    lr: f64,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Serialize, Clone)]
struct TrainTokenizerArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Serialize, Clone)]
struct TrainClassifierArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Serialize, Clone)]
struct TokenizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
}

#[derive(Args, Serialize, Clone)]
struct ReconstructArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Also write reconstructed series per subject.
    #[arg(long, default_value_t = false)]
    dump: bool,
}

#[derive(Args, Serialize, Clone)]
struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[arg(long, default_value_t = false)]
    save_fold_checkpoints: bool,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
}

#[derive(Args, Serialize, Clone)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// welch | mannwhitney
    #[arg(long, default_value = "welch")]
    test: String,
    #[arg(long, default_value_t = 0.05)]
    q: f64,
    #[arg(long, default_value_t = false)]
    plot: bool,
}

#[derive(Args, Serialize, Clone)]
struct SweepKArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "8,16,32,64,128")]
    grid: String,
    /// Stratified split granularity; fold 0 is held out for test metrics.
    #[arg(long, default_value_t = 5)]
    holdout_folds: usize,
    #[arg(long, default_value_t = 0.5)]
    threshold: f64,
    #[command(flatten)]
    model: ModelArgs,
    #[command(flatten)]
    train: TrainArgs,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(dir) => {
            println!("artifacts written to {}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("HST_OUT_ROOT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn command_name(cmd: &Cmd) -> &'static str {
    match cmd {
        Cmd::Synth(_) => "synth",
        Cmd::TrainTokenizer(_) => "train-tokenizer",
        Cmd::TrainClassifier(_) => "train-classifier",
        Cmd::Tokenize(_) => "tokenize",
        Cmd::Reconstruct(_) => "reconstruct",
        Cmd::Evaluate(_) => "evaluate",
        Cmd::Analyze(_) => "analyze",
        Cmd::SweepK(_) => "sweep-k",
    }
}

fn make_run_dir(root: &Path, command: &str) -> Result<PathBuf> {
    let secs = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    for attempt in 0..10_000u64 {
        let name = if attempt == 0 {
            format!("{command}-{secs}")
        } else {
            format!("{command}-{secs}-{attempt}")
        };
        let dir = root.join(name);
        match std::fs::create_dir_all(root).and_then(|_| std::fs::create_dir(&dir)) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(HstError::io(&dir, e)),
        }
    }
    Err(HstError::Validation("could not allocate a run directory".into()))
}

fn run(cli: Cli) -> Result<PathBuf> {
    let root = out_root(&cli);
    let run_dir = make_run_dir(&root, command_name(&cli.cmd))?;
    let outcome = dispatch(&cli.cmd, &run_dir);
    match outcome {
        Ok(()) => Ok(run_dir),
        // Training aborts keep their partial metrics log as the diagnostic
        // snapshot; every other failure removes the partial run directory.
        Err(e @ HstError::Training { .. }) => {
            eprintln!("diagnostic snapshot retained in {}", run_dir.display());
            Err(e)
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&run_dir);
            Err(e)
        }
    }
}

fn write_run_config(dir: &Path, cmd: &Cmd) -> Result<()> {
    #[derive(Serialize)]
    struct RunConfig<'a> {
        command: &'a str,
        version: &'a str,
        args: &'a Cmd,
    }
    let rc = RunConfig {
        command: command_name(cmd),
        version: env!("CARGO_PKG_VERSION"),
        args: cmd,
    };
    let path = dir.join("run_config.json");
    let json = serde_json::to_vec_pretty(&rc)
        .map_err(|e| HstError::Validation(format!("config encode: {e}")))?;
    std::fs::write(&path, json).map_err(|e| HstError::io(&path, e))?;
    Ok(())
}

fn dispatch(cmd: &Cmd, dir: &Path) -> Result<()> {
    write_run_config(dir, cmd)?;
    match cmd {
        Cmd::Synth(a) => cmd_synth(a, dir),
        Cmd::TrainTokenizer(a) => cmd_train_tokenizer(a, dir),
        Cmd::TrainClassifier(a) => cmd_train_classifier(a, dir),
        Cmd::Tokenize(a) => cmd_tokenize(a, dir),
        Cmd::Reconstruct(a) => cmd_reconstruct(a, dir),
        Cmd::Evaluate(a) => cmd_evaluate(a, dir),
        Cmd::Analyze(a) => cmd_analyze(a, dir),
        Cmd::SweepK(a) => cmd_sweep_k(a, dir),
    }
}

// ---------------------------------------------------------------------------
// Shared assembly
// ---------------------------------------------------------------------------

fn infer_channels(records: &[TimeSeriesRecord]) -> Result<usize> {
    let m = records
        .first()
        .ok_or_else(|| HstError::Validation("manifest lists no subjects".into()))?
        .n_channels();
    for r in records {
        if r.n_channels() != m {
            return Err(HstError::Validation(format!(
                "subject `{}` has {} channels, expected {m}",
                r.subject_id,
                r.n_channels()
            )));
        }
    }
    Ok(m)
}

fn model_config(args: &ModelArgs, m: usize) -> Result<ModelConfig> {
    let stride = args.stride.unwrap_or(args.window);
    let mut cfg = ModelConfig::new(m, WindowSpec::new(args.window, stride)?);
    cfg.encoder.layers = args.enc_layers;
    cfg.encoder.heads = args.heads;
    cfg.encoder.literal_spatial_gate = args.literal_spatial_gate;
    cfg.ssm.backend = SsmBackend::parse(&args.backend)?;
    cfg.ssm.hidden = args.hidden;
    cfg.ssm.layers = args.ssm_layers;
    cfg.ssm.state_dim = args.state_dim;
    cfg.ssm.linear_state_head = args.linear_state_head;
    cfg.codebooks.k_state = args.k;
    cfg.codebooks.k_transition = args.k;
    cfg.codebooks.k_residual = args.k_residual;
    cfg.codebooks.gamma = args.gamma;
    cfg.codebooks.literal_transition_residual = args.literal_transition_residual;
    cfg.loss.alpha = args.alpha;
    cfg.loss.beta = args.beta;
    cfg.loss.gamma_loss = args.gamma_loss;
    cfg.loss.commitment = args.commitment;
    cfg.quantize = match args.variant.as_str() {
        "hierarchical" => QuantizeMode::Hierarchical,
        "flat" => QuantizeMode::FlatVq,
        "continuous" => QuantizeMode::Continuous,
        other => return Err(HstError::Config(format!("unknown variant `{other}`"))),
    };
    cfg.classifier.input = match args.classifier_input.as_str() {
        "quantized" => ClassifierInput::QuantizedConcat,
        "continuous" => ClassifierInput::ContinuousConcat,
        other => return Err(HstError::Config(format!("unknown classifier input `{other}`"))),
    };
    cfg.decoder_layers = args.dec_layers;
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(args: &TrainArgs) -> TrainConfig {
    TrainConfig {
        phase1_steps: args.steps,
        phase2_epochs: args.epochs,
        learning_rate: args.lr,
        batch_size: args.batch,
        seed: args.seed,
        optimizer: OptimizerKind::Adam,
    }
}

fn report_excluded(dir: &Path, excluded: &[String]) -> Result<()> {
    if excluded.is_empty() {
        return Ok(());
    }
    eprintln!(
        "warning: {} subject(s) shorter than one window were excluded (see excluded_subjects.txt)",
        excluded.len()
    );
    let path = dir.join("excluded_subjects.txt");
    std::fs::write(&path, excluded.join("\n") + "\n").map_err(|e| HstError::io(&path, e))?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut body = String::new();
    for row in rows {
        body.push_str(
            &serde_json::to_string(row)
                .map_err(|e| HstError::Validation(format!("metrics encode: {e}")))?,
        );
        body.push('\n');
    }
    std::fs::write(path, body).map_err(|e| HstError::io(path, e))
}

/// Token streams for every subject, window by window.
fn tokenize_records(
    model: &HstModel,
    records: &[TimeSeriesRecord],
) -> Result<Vec<(usize, usize, TokenizedSequence)>> {
    let (windows, _) = prepare_windows(records, &model.cfg.window)?;
    windows
        .iter()
        .map(|w| Ok((w.record_idx, w.offset, model.tokenize_window(&w.x)?)))
        .collect()
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn cmd_synth(a: &SynthArgs, dir: &Path) -> Result<()> {
    if a.groups == 0 || a.groups > 2 {
        return Err(HstError::Config("--groups must be 1 or 2".into()));
    }
    let mut specs = Vec::new();
    if let Some(spec_path) = &a.spec {
        let raw = std::fs::read(spec_path).map_err(|e| HstError::io(spec_path, e))?;
        let spec: SwitchingSystemSpec = serde_json::from_slice(&raw)
            .map_err(|e| HstError::Validation(format!("generator spec decode: {e}")))?;
        spec.validate()?;
        specs.push(spec);
        if a.groups == 2 {
            return Err(HstError::Config("--spec supplies a single generator; use --groups 1".into()));
        }
    } else if a.groups == 1 {
        specs.push(SwitchingSystemSpec::metastable(a.states, a.rois, a.dwell_mean, a.noise_std, a.seed));
    } else {
        let half = a.states / 2;
        let low: Vec<usize> = (0..half).collect();
        let high: Vec<usize> = (half..a.states).collect();
        specs.push(SwitchingSystemSpec::metastable_favoring(
            a.states, a.rois, a.dwell_mean, a.noise_std, a.seed, &low, a.favor_mass,
        ));
        specs.push(SwitchingSystemSpec::metastable_favoring(
            a.states, a.rois, a.dwell_mean, a.noise_std, a.seed, &high, a.favor_mass,
        ));
    }
    let mut records = Vec::with_capacity(a.subjects);
    for i in 0..a.subjects {
        let group = i % a.groups;
        let rec = synth_switching_lds(
            &specs[group],
            a.timepoints,
            a.seed.wrapping_mul(1_000_003).wrapping_add(i as u64),
            &format!("sub-{i:04}"),
            group as i64,
        )?;
        records.push(rec);
    }
    let data_dir = dir.join("dataset");
    let manifest = write_dataset(&data_dir, &records)?;
    for (g, spec) in specs.iter().enumerate() {
        let path = dir.join(format!("generator_group{g}.json"));
        let json = serde_json::to_vec_pretty(spec)
            .map_err(|e| HstError::Validation(format!("spec encode: {e}")))?;
        std::fs::write(&path, json).map_err(|e| HstError::io(&path, e))?;
    }
    println!("manifest: {}", manifest.display());
    Ok(())
}

fn cmd_train_tokenizer(a: &TrainTokenizerArgs, dir: &Path) -> Result<()> {
    let records = load_dataset(&a.manifest)?;
    let m = infer_channels(&records)?;
    let cfg = model_config(&a.model, m)?;
    let tcfg = train_config(&a.train);
    let (windows, excluded) = prepare_windows(&records, &cfg.window)?;
    report_excluded(dir, &excluded)?;
    let mut model = HstModel::new(cfg, tcfg.seed)?;
    let mut log = MetricsLog::create(&dir.join("metrics.jsonl"))?;
    let metrics = train_tokenizer_logged(&mut model, &windows, &tcfg, Some(&mut log))?;
    let ckpt = HstCheckpoint::from_model(&model, &tcfg, tcfg.phase1_steps, &metrics);
    ckpt.save(&dir.join("tokenizer.hst"))?;
    if let Some(last) = metrics.last() {
        println!(
            "step {}: total {:.5} recon {:.5} perplexity(state) {:.2}",
            last.step, last.total, last.recon, last.perplexity_state
        );
    }
    Ok(())
}

fn cmd_train_classifier(a: &TrainClassifierArgs, dir: &Path) -> Result<()> {
    let ckpt = HstCheckpoint::load(&a.checkpoint)?;
    let mut model = ckpt.into_model()?;
    let mut tcfg = ckpt.train_config.clone();
    if let Some(e) = a.epochs {
        tcfg.phase2_epochs = e;
    }
    if let Some(lr) = a.lr {
        tcfg.learning_rate = lr;
    }
    if let Some(b) = a.batch {
        tcfg.batch_size = b;
    }
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    let records = load_dataset(&a.manifest)?;
    let labels: Vec<i64> = records.iter().map(|r| r.label).collect();
    let class_map = class_index_map(&labels);
    if class_map.len() != model.cfg.classifier.classes {
        return Err(HstError::Validation(format!(
            "manifest has {} classes, model expects {}",
            class_map.len(),
            model.cfg.classifier.classes
        )));
    }
    let (windows, excluded) = prepare_windows(&records, &model.cfg.window)?;
    report_excluded(dir, &excluded)?;
    let window_labels: Vec<usize> =
        windows.iter().map(|w| class_map[&records[w.record_idx].label]).collect();
    let rows = train_classifier(&mut model, &windows, &window_labels, &tcfg)?;
    write_jsonl(&dir.join("phase2.jsonl"), &rows)?;
    let out = HstCheckpoint::from_model(&model, &tcfg, ckpt.step, &ckpt.metrics);
    out.save(&dir.join("classifier.hst"))?;
    if let Some(last) = rows.last() {
        println!("epoch {}: ce {:.5} train acc {:.4}", last.epoch, last.mean_ce, last.train_accuracy);
    }
    Ok(())
}

fn cmd_tokenize(a: &TokenizeArgs, dir: &Path) -> Result<()> {
    let ckpt = HstCheckpoint::load(&a.checkpoint)?;
    let model = ckpt.into_model()?;
    let records = load_dataset(&a.manifest)?;
    let streams = tokenize_records(&model, &records)?;
    let path = dir.join("tokens.csv");
    let mut wtr =
        csv::Writer::from_path(&path).map_err(|e| HstError::io(&path, std::io::Error::other(e)))?;
    wtr.write_record([
        "subject_id",
        "t",
        "state_token",
        "transition_token",
        "state_residual_token",
        "transition_residual_token",
    ])
    .map_err(|e| HstError::io(&path, std::io::Error::other(e)))?;
    for (ri, offset, seq) in &streams {
        let sid = &records[*ri].subject_id;
        for t in 0..seq.state_tokens.len() {
            wtr.write_record([
                sid.clone(),
                (offset + t).to_string(),
                seq.state_tokens[t].to_string(),
                seq.transition_tokens[t].to_string(),
                seq.state_residual_tokens[t].to_string(),
                seq.transition_residual_tokens[t].to_string(),
            ])
            .map_err(|e| HstError::io(&path, std::io::Error::other(e)))?;
        }
    }
    wtr.flush().map_err(|e| HstError::io(&path, e))?;
    println!("tokens: {}", path.display());
    Ok(())
}

fn cmd_reconstruct(a: &ReconstructArgs, dir: &Path) -> Result<()> {
    let ckpt = HstCheckpoint::load(&a.checkpoint)?;
    let model = ckpt.into_model()?;
    let records = load_dataset(&a.manifest)?;
    let (windows, excluded) = prepare_windows(&records, &model.cfg.window)?;
    report_excluded(dir, &excluded)?;
    let path = dir.join("reconstruction.csv");
    let mut wtr =
        csv::Writer::from_path(&path).map_err(|e| HstError::io(&path, std::io::Error::other(e)))?;
    wtr.write_record(["subject_id", "offset", "pearson_r", "mse"])
        .map_err(|e| HstError::io(&path, std::io::Error::other(e)))?;
    let mut r_sum = 0.0;
    let mut mse_sum = 0.0;
    let mut dumps: std::collections::BTreeMap<usize, Vec<(usize, hst_core::Mat)>> =
        Default::default();
    for w in &windows {
        let (x_hat, r, mse) = model.reconstruct_window(&w.x)?;
        r_sum += r;
        mse_sum += mse;
        wtr.write_record([
            records[w.record_idx].subject_id.clone(),
            w.offset.to_string(),
            format!("{r:.6}"),
            format!("{mse:.6e}"),
        ])
        .map_err(|e| HstError::io(&path, std::io::Error::other(e)))?;
        if a.dump {
            dumps.entry(w.record_idx).or_default().push((w.offset, x_hat));
        }
    }
    let n = windows.len().max(1) as f64;
    wtr.write_record(["mean", "", &format!("{:.6}", r_sum / n), &format!("{:.6e}", mse_sum / n)])
        .map_err(|e| HstError::io(&path, std::io::Error::other(e)))?;
    wtr.flush().map_err(|e| HstError::io(&path, e))?;
    if a.dump {
        for (ri, mut parts) in dumps {
            parts.sort_by_key(|(off, _)| *off);
            let w = model.cfg.window.w;
            let mut stacked = hst_core::Mat::zeros(parts.len() * w, model.cfg.m);
            for (pi, (_, x_hat)) in parts.iter().enumerate() {
                for t in 0..w {
                    stacked.row_mut(pi * w + t).copy_from_slice(x_hat.row(t));
                }
            }
            let p = dir.join(format!("{}_recon.csv", records[ri].subject_id));
            hst_core::dataio::write_matrix_csv(&p, &stacked)?;
        }
    }
    println!("mean r {:.4}, mean mse {:.5}", r_sum / n, mse_sum / n);
    Ok(())
}

fn cmd_evaluate(a: &EvaluateArgs, dir: &Path) -> Result<()> {
    let records = load_dataset(&a.manifest)?;
    let m = infer_channels(&records)?;
    let cfg = CvConfig {
        folds: a.folds,
        model: model_config(&a.model, m)?,
        train: train_config(&a.train),
        threshold: a.threshold,
    };
    let ckpt_dir = a.save_fold_checkpoints.then(|| dir.join("folds"));
    let out = cross_validate(&records, &cfg, ckpt_dir.as_deref())?;
    out.report.write_csv(&dir.join("cv_results.csv"))?;
    let plan_path = dir.join("fold_plan.json");
    let plan_json = serde_json::to_vec_pretty(&out.plan)
        .map_err(|e| HstError::Validation(format!("plan encode: {e}")))?;
    std::fs::write(&plan_path, plan_json).map_err(|e| HstError::io(&plan_path, e))?;
    println!(
        "accuracy {:.4} +- {:.4} over {} folds",
        out.report.mean_accuracy, out.report.std_accuracy, a.folds
    );
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs, dir: &Path) -> Result<()> {
    let ckpt = HstCheckpoint::load(&a.checkpoint)?;
    let model = ckpt.into_model()?;
    let records = load_dataset(&a.manifest)?;
    let test = match a.test.as_str() {
        "welch" => GroupTest::Welch,
        "mannwhitney" | "mann-whitney" | "mwu" => GroupTest::MannWhitney,
        other => return Err(HstError::Config(format!("unknown test `{other}`"))),
    };
    let labels: Vec<i64> = records.iter().map(|r| r.label).collect();
    let class_map = class_index_map(&labels);
    if class_map.len() != 2 {
        return Err(HstError::Validation(format!(
            "group comparison requires two classes, found {}",
            class_map.len()
        )));
    }
    let streams = tokenize_records(&model, &records)?;

    // Concatenate token streams per subject.
    let mut per_subject: Vec<(Vec<usize>, Vec<usize>)> = vec![Default::default(); records.len()];
    for (ri, _, seq) in &streams {
        per_subject[*ri].0.extend_from_slice(&seq.state_tokens);
        per_subject[*ri].1.extend_from_slice(&seq.transition_tokens);
    }
    let k_state = model.cfg.codebooks.k_state;
    let k_trans = model.cfg.codebooks.k_transition;
    let mut occ_state: Vec<Vec<f64>> = Vec::new();
    let mut occ_trans: Vec<Vec<f64>> = Vec::new();
    let mut group_of: Vec<usize> = Vec::new();
    let occ_path = dir.join("occupancy.csv");
    let mut occ_w = csv::Writer::from_path(&occ_path)
        .map_err(|e| HstError::io(&occ_path, std::io::Error::other(e)))?;
    let mut header = vec!["subject_id".to_string(), "label".to_string()];
    header.extend((0..k_state).map(|k| format!("state_{k}")));
    header.extend((0..k_trans).map(|k| format!("transition_{k}")));
    occ_w.write_record(&header).map_err(|e| HstError::io(&occ_path, std::io::Error::other(e)))?;
    for (ri, (st, tr)) in per_subject.iter().enumerate() {
        if st.is_empty() {
            continue; // subject shorter than one window
        }
        let os = occupancy(st, k_state)?;
        let ot = occupancy(tr, k_trans)?;
        let mut row = vec![records[ri].subject_id.clone(), records[ri].label.to_string()];
        row.extend(os.iter().map(|p| format!("{p:.8}")));
        row.extend(ot.iter().map(|p| format!("{p:.8}")));
        occ_w.write_record(&row).map_err(|e| HstError::io(&occ_path, std::io::Error::other(e)))?;
        occ_state.push(os);
        occ_trans.push(ot);
        group_of.push(class_map[&records[ri].label]);
    }
    occ_w.flush().map_err(|e| HstError::io(&occ_path, e))?;

    let split = |occ: &[Vec<f64>]| -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let a_side: Vec<Vec<f64>> = occ
            .iter()
            .zip(&group_of)
            .filter(|(_, &g)| g == 0)
            .map(|(o, _)| o.clone())
            .collect();
        let b_side: Vec<Vec<f64>> = occ
            .iter()
            .zip(&group_of)
            .filter(|(_, &g)| g == 1)
            .map(|(o, _)| o.clone())
            .collect();
        (a_side, b_side)
    };
    let (sa, sb) = split(&occ_state);
    let (ta, tb) = split(&occ_trans);
    let state_rows = group_comparison_report(&sa, &sb, test, a.q)?;
    let trans_rows = group_comparison_report(&ta, &tb, test, a.q)?;
    write_comparison_csv(&dir.join("comparison_state.csv"), &state_rows)?;
    write_comparison_csv(&dir.join("comparison_transition.csv"), &trans_rows)?;
    if a.plot {
        write_comparison_svg(&dir.join("comparison_state.svg"), &state_rows, "state occupancy")?;
        write_comparison_svg(
            &dir.join("comparison_transition.svg"),
            &trans_rows,
            "transition occupancy",
        )?;
    }

    // Activation maps on z-scored windows, aligned window-by-window.
    let (windows, _) = prepare_windows(&records, &model.cfg.window)?;
    let window_tokens: Vec<Vec<usize>> =
        streams.iter().map(|(_, _, seq)| seq.state_tokens.clone()).collect();
    let series: Vec<(&hst_core::Mat, &[usize])> = windows
        .iter()
        .zip(&window_tokens)
        .map(|(w, t)| (&w.x, t.as_slice()))
        .collect();
    let map_path = dir.join("activation_state.csv");
    let mut map_w = csv::Writer::from_path(&map_path)
        .map_err(|e| HstError::io(&map_path, std::io::Error::other(e)))?;
    let mut header = vec!["token".to_string(), "occurrences".to_string()];
    header.extend((0..model.cfg.m).map(|j| format!("roi_{j}")));
    map_w.write_record(&header).map_err(|e| HstError::io(&map_path, std::io::Error::other(e)))?;
    for token in 0..k_state {
        let occurrences: usize =
            window_tokens.iter().flat_map(|t| t.iter()).filter(|&&t| t == token).count();
        match state_activation_map(&series, token) {
            Some(map) => {
                let mut row = vec![token.to_string(), occurrences.to_string()];
                row.extend(map.iter().map(|v| format!("{v:.8}")));
                map_w
                    .write_record(&row)
                    .map_err(|e| HstError::io(&map_path, std::io::Error::other(e)))?;
            }
            None => {
                // Explicit no-occurrence marker.
                let mut row = vec![token.to_string(), "0".to_string()];
                row.extend(std::iter::repeat_n(String::new(), model.cfg.m));
                map_w
                    .write_record(&row)
                    .map_err(|e| HstError::io(&map_path, std::io::Error::other(e)))?;
            }
        }
    }
    map_w.flush().map_err(|e| HstError::io(&map_path, e))?;
    let n_sig = state_rows.iter().filter(|r| r.significant).count();
    println!(
        "state tokens with significant group differences after FDR: {n_sig}/{}",
        state_rows.len()
    );
    Ok(())
}

fn cmd_sweep_k(a: &SweepKArgs, dir: &Path) -> Result<()> {
    let records = load_dataset(&a.manifest)?;
    let m = infer_channels(&records)?;
    let grid: Vec<usize> = a
        .grid
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| HstError::Config(format!("bad grid entry `{s}`")))
        })
        .collect::<Result<_>>()?;
    // Hold out fold 0 of a stratified split for test metrics.
    let labels: Vec<i64> = records.iter().map(|r| r.label).collect();
    let class_map = class_index_map(&labels);
    let plan = stratified_kfold(&labels, a.holdout_folds, a.train.seed)?;
    let train_records: Vec<TimeSeriesRecord> = (0..records.len())
        .filter(|&i| plan.assignments[i] != 0)
        .map(|i| records[i].clone())
        .collect();
    let test_records: Vec<TimeSeriesRecord> = (0..records.len())
        .filter(|&i| plan.assignments[i] == 0)
        .map(|i| records[i].clone())
        .collect();

    let path = dir.join("sweep.csv");
    let mut wtr =
        csv::Writer::from_path(&path).map_err(|e| HstError::io(&path, std::io::Error::other(e)))?;
    wtr.write_record(["k", "variant", "recon_r", "recon_mse", "test_acc"])
        .map_err(|e| HstError::io(&path, std::io::Error::other(e)))?;
    let ks: Vec<usize> = if a.model.variant == "continuous" { vec![a.model.k] } else { grid };
    for &k in &ks {
        let mut margs = a.model.clone();
        margs.k = k;
        let cfg = model_config(&margs, m)?;
        let tcfg = train_config(&a.train);
        let (windows, _) = prepare_windows(&train_records, &cfg.window)?;
        let window_labels: Vec<usize> = windows
            .iter()
            .map(|w| class_map[&train_records[w.record_idx].label])
            .collect();
        let mut model = HstModel::new(cfg, tcfg.seed)?;
        train_tokenizer_logged(&mut model, &windows, &tcfg, None)?;
        train_classifier(&mut model, &windows, &window_labels, &tcfg)?;
        let (test_windows, _) = prepare_windows(&test_records, &model.cfg.window)?;
        let mut r_sum = 0.0;
        let mut mse_sum = 0.0;
        for w in &test_windows {
            let (_, r, mse) = model.reconstruct_window(&w.x)?;
            r_sum += r;
            mse_sum += mse;
        }
        let n = test_windows.len().max(1) as f64;
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for rec in &test_records {
            let (pred, _) = predict_subject(&model, rec, a.threshold)?;
            preds.push(pred);
            truths.push(class_map[&rec.label]);
        }
        let metrics = hst_core::eval::confusion_metrics(&preds, &truths)?;
        wtr.write_record([
            k.to_string(),
            a.model.variant.clone(),
            format!("{:.6}", r_sum / n),
            format!("{:.6e}", mse_sum / n),
            format!("{:.6}", metrics.accuracy),
        ])
        .map_err(|e| HstError::io(&path, std::io::Error::other(e)))?;
        println!("k = {k}: r {:.4}, mse {:.5}, acc {:.4}", r_sum / n, mse_sum / n, metrics.accuracy);
    }
    wtr.flush().map_err(|e| HstError::io(&path, e))?;
    Ok(())
}
