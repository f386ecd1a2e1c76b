//! Pilot run for the synthetic group-discrimination protocol: two groups of
//! subjects whose generators differ only in their transition matrices, full
//! two-phase pipeline under stratified cross-validation.

use std::time::Instant;

use hst_core::dataio::{synth_switching_lds, SwitchingSystemSpec, WindowSpec};
use hst_core::eval::{cross_validate, CvConfig};
use hst_core::model::ModelConfig;
use hst_core::ssm::SsmBackend;
use hst_core::train::{OptimizerKind, TrainConfig};

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let hidden = env_usize("PILOT_HIDDEN", 24);
    let steps = env_usize("PILOT_STEPS", 300);
    let epochs = env_usize("PILOT_EPOCHS", 20);
    let batch = env_usize("PILOT_BATCH", 8);
    let subjects_per_group = env_usize("PILOT_SUBJECTS", 40);
    let t_len = env_usize("PILOT_T", 200);
    let backend = std::env::var("PILOT_BACKEND").unwrap_or_else(|_| "gru".into());
    let folds = env_usize("PILOT_FOLDS", 5);
    let favor = env_f64("PILOT_FAVOR", 0.9);
    let dwell = env_f64("PILOT_DWELL", 15.0);
    let commitment = env_f64("PILOT_COMMIT", 0.0);
    let lr = env_f64("PILOT_LR", 2e-4);

    // Same dynamics and means (shared seed); only the chains differ.
    let spec_a = SwitchingSystemSpec::metastable_favoring(4, 16, dwell, 0.05, 11, &[0, 1], favor);
    let spec_b = SwitchingSystemSpec::metastable_favoring(4, 16, dwell, 0.05, 11, &[2, 3], favor);
    let mut records = Vec::new();
    for i in 0..subjects_per_group {
        records.push(
            synth_switching_lds(&spec_a, t_len, 2000 + i as u64, &format!("a{i:02}"), 0).unwrap(),
        );
        records.push(
            synth_switching_lds(&spec_b, t_len, 3000 + i as u64, &format!("b{i:02}"), 1).unwrap(),
        );
    }

    let mut mcfg = ModelConfig::new(16, WindowSpec { w: 100, stride: 100 });
    mcfg.ssm.backend = SsmBackend::parse(&backend).unwrap();
    mcfg.ssm.hidden = hidden;
    mcfg.ssm.state_dim = 8;
    mcfg.codebooks.k_state = 8;
    mcfg.codebooks.k_transition = 8;
    mcfg.classifier.hidden = vec![32, 16];
    mcfg.loss.commitment = commitment;
    let cfg = CvConfig {
        folds,
        model: mcfg,
        train: TrainConfig {
            phase1_steps: steps,
            phase2_epochs: epochs,
            learning_rate: lr,
            batch_size: batch,
            seed: 13,
            optimizer: OptimizerKind::Adam,
        },
        threshold: 0.5,
    };
    println!(
        "config: hidden={hidden} backend={backend} steps={steps} epochs={epochs} batch={batch} subjects={}x2 T={t_len} folds={folds}",
        subjects_per_group
    );
    let t0 = Instant::now();
    let out = cross_validate(&records, &cfg, None).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    for f in &out.report.per_fold {
        println!(
            "fold {}: acc {:.4} sen {:?} spe {:?}",
            f.fold, f.metrics.accuracy, f.metrics.sensitivity, f.metrics.specificity
        );
    }
    println!(
        "total {secs:.0}s | mean acc {:.4} +- {:.4}",
        out.report.mean_accuracy, out.report.std_accuracy
    );
}
