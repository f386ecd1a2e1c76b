//! Pilot run for the synthetic metastability-recovery protocol: trains the
//! tokenizer on switching-dynamics data and reports reconstruction
//! correlation, token purity and adjusted Rand index against the generator's
//! hidden states. Used to calibrate the acceptance fixture.

use std::time::Instant;

use hst_core::dataio::{prepare_windows, synth_switching_lds, SwitchingSystemSpec, WindowSpec};
use hst_core::eval::{adjusted_rand_index, cluster_purity};
use hst_core::model::{HstModel, ModelConfig};
use hst_core::rng::Rng;
use hst_core::ssm::SsmBackend;
use hst_core::stats::pearson;
use hst_core::train::{train_tokenizer, TrainConfig};

fn env_usize(name: &str, default: usize) -> usize {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn env_f64(name: &str, default: f64) -> f64 {
    std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
}

fn main() {
    let hidden = env_usize("PILOT_HIDDEN", 48);
    let steps = env_usize("PILOT_STEPS", 4000);
    let batch = env_usize("PILOT_BATCH", 8);
    let subjects = env_usize("PILOT_SUBJECTS", 12);
    let t_len = env_usize("PILOT_T", 400);
    let backend = std::env::var("PILOT_BACKEND").unwrap_or_else(|_| "selective".into());
    let lr = env_f64("PILOT_LR", 2e-4);
    let snr_db = env_f64("PILOT_SNR_DB", f64::INFINITY); // inf = noiseless
    let seed = env_usize("PILOT_SEED", 7) as u64;
    let commitment = env_f64("PILOT_COMMIT", 0.0);

    let spec = SwitchingSystemSpec::metastable(4, 16, 20.0, 0.0, 40 + seed);
    let mut records: Vec<_> = (0..subjects)
        .map(|i| {
            synth_switching_lds(&spec, t_len, 1000 + i as u64, &format!("s{i:02}"), 0).unwrap()
        })
        .collect();
    if snr_db.is_finite() {
        // Observation noise at the requested SNR over the pooled signal power.
        let mut rng = Rng::seed_from_u64(777);
        let pooled_var = {
            let mut s = 0.0;
            let mut s2 = 0.0;
            let mut n = 0usize;
            for r in &records {
                for v in r.x.as_slice() {
                    s += v;
                    s2 += v * v;
                    n += 1;
                }
            }
            let mean = s / n as f64;
            s2 / n as f64 - mean * mean
        };
        let noise_std = (pooled_var / 10f64.powf(snr_db / 10.0)).sqrt();
        for r in &mut records {
            for v in r.x.as_mut_slice() {
                *v += rng.normal_scaled(noise_std);
            }
        }
        println!("observation noise std {noise_std:.4} for SNR {snr_db} dB");
    }

    let window = WindowSpec { w: 100, stride: 100 };
    let mut cfg = ModelConfig::new(16, window);
    cfg.ssm.backend = SsmBackend::parse(&backend).unwrap();
    cfg.ssm.hidden = hidden;
    cfg.ssm.state_dim = 8;
    cfg.codebooks.k_state = 8;
    cfg.codebooks.k_transition = 8;
    cfg.loss.commitment = commitment;

    let tcfg = TrainConfig {
        phase1_steps: steps,
        phase2_epochs: 0,
        learning_rate: lr,
        batch_size: batch,
        seed,
        optimizer: hst_core::train::OptimizerKind::Adam,
    };
    let (windows, _) = prepare_windows(&records, &window).unwrap();
    println!(
        "config: hidden={hidden} backend={backend} steps={steps} batch={batch} lr={lr} windows={} seed={seed}",
        windows.len()
    );
    let mut model = HstModel::new(cfg, seed).unwrap();
    let t0 = Instant::now();
    let metrics = train_tokenizer(&mut model, &windows, &tcfg).unwrap();
    let train_secs = t0.elapsed().as_secs_f64();

    // Reconstruction + token agreement on the training corpus.
    let mut rs = Vec::new();
    let mut tokens_all = Vec::new();
    let mut truth_all = Vec::new();
    for w in &windows {
        let (x_hat, _, _) = model.reconstruct_window(&w.x).unwrap();
        rs.push(pearson(w.x.as_slice(), x_hat.as_slice()));
        let seq = model.tokenize_window(&w.x).unwrap();
        let truth = records[w.record_idx].true_states.as_ref().unwrap();
        tokens_all.extend_from_slice(&seq.state_tokens);
        truth_all.extend_from_slice(&truth[w.offset..w.offset + window.w]);
    }
    let mean_r = rs.iter().sum::<f64>() / rs.len() as f64;
    let purity = cluster_purity(&tokens_all, &truth_all);
    let ari = adjusted_rand_index(&tokens_all, &truth_all);
    let last = metrics.last().unwrap();
    println!(
        "train {train_secs:.1}s | final recon {:.5} | perpl(state) {:.2} dead {} | mean r {mean_r:.4} | purity {purity:.4} | ARI {ari:.4}",
        last.recon, last.perplexity_state, last.dead_state
    );
}
