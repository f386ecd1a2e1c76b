//! Acceptance suite. One test per criterion; each prints a single
//! `criterion N: PASS ...` line with the measured values when it succeeds.
//!
//! The two training criteria (6 and 7) use fixtures frozen from pilot runs;
//! the pilot measurements are recorded next to each fixture.

use std::time::Instant;

use hst_core::autodiff::Tape;
use hst_core::checkpoint::HstCheckpoint;
use hst_core::dataio::{
    prepare_windows, synth_switching_lds, zscore_normalize, SwitchingSystemSpec, WindowSpec,
};
use hst_core::eval::{adjusted_rand_index, cluster_purity, cross_validate, CvConfig};
use hst_core::gradcheck::finite_diff_check;
use hst_core::linalg::Mat;
use hst_core::model::{HstModel, ModelConfig};
use hst_core::params::{Binding, ParamGroup, ParamStore};
use hst_core::quant::{
    cluster_revive_update, flat_quantization_mse, hierarchical_quantization_mse,
    lloyd_kmeans, nearest_assign, quantize_vector, revival_weight, Codebook, CodebookRole,
};
use hst_core::recon::{decode, LossWeights};
use hst_core::rng::Rng;
use hst_core::ssm::{
    gru_step, lstm_step, rnn_step, state_head_step, zoh_discretize, SsmBackend,
};
use hst_core::stats::{fdr_bh, group_comparison_report, occupancy, pearson, GroupTest};
use hst_core::stencoder::encoder_forward;
use hst_core::train::{train_classifier, train_tokenizer, OptimizerKind, TrainConfig};

// ---------------------------------------------------------------------------
// 1. Quantization oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_quantization_oracle() {
    let start = Instant::now();
    let mut rng = Rng::seed_from_u64(101);
    let mut checked = 0usize;
    for &k in &[8usize, 16, 32] {
        for &d in &[8usize, 256] {
            let vectors = rng.normal_mat(k, d, 1.0);
            for _ in 0..1000 {
                let z = rng.normal_mat(1, d, 1.3);
                let fast = nearest_assign(z.row(0), &vectors).unwrap();
                // Exhaustive scan with explicit squared distances.
                let mut best = 0usize;
                let mut best_d = f64::INFINITY;
                for i in 0..k {
                    let dist: f64 = z
                        .row(0)
                        .iter()
                        .zip(vectors.row(i))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    if dist < best_d {
                        best_d = dist;
                        best = i;
                    }
                }
                assert_eq!(fast, best, "K={k} D={d}: oracle disagreement");
                checked += 1;
            }
        }
    }
    // Exact tie: both codes equidistant, lowest index wins.
    let cb = Mat::from_vec(2, 2, vec![0.0, 0.0, 1.0, 1.0]);
    assert_eq!(nearest_assign(&[0.5, 0.5], &cb).unwrap(), 0);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 10.0, "runtime {elapsed:?} exceeds 10 s");
    println!(
        "criterion 1: PASS ({checked} queries over K x D grid match the exhaustive oracle, tie-break to lowest index, {:.2}s)",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 2. Hierarchy dominance
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_hierarchy_dominance() {
    let start = Instant::now();
    // (a) Zero-seeded residual books never hurt: 10,000 random inputs.
    let mut rng = Rng::seed_from_u64(202);
    let d = 16;
    let first = Codebook::new(rng.normal_mat(8, d, 1.0), 0.99, CodebookRole::State).unwrap();
    let mut res_vec = rng.normal_mat(8, d, 0.4);
    for v in res_vec.row_mut(0) {
        *v = 0.0;
    }
    let residual = Codebook::new(res_vec, 0.99, CodebookRole::StateResidual).unwrap();
    for i in 0..10_000 {
        let z = rng.normal_mat(1, d, 1.5);
        let q = quantize_vector(z.row(0), &first, &residual).unwrap();
        assert!(
            q.error_post <= q.error_first + 1e-9,
            "case {i}: post {} > first {}",
            q.error_post,
            q.error_first
        );
    }

    // (b) Equal code budget on frozen synthetic features: 8+8 hierarchical
    // vs 16 flat, both Lloyd-trained with the same seed.
    let spec = SwitchingSystemSpec::metastable(4, 16, 20.0, 0.1, 77);
    let mut rows = Vec::new();
    for s in 0..6 {
        let rec = synth_switching_lds(&spec, 400, 600 + s, &format!("f{s}"), 0).unwrap();
        let z = zscore_normalize(&rec.x).unwrap();
        rows.extend_from_slice(z.x.as_slice());
    }
    let features = Mat::from_vec(rows.len() / 16, 16, rows);
    let flat = lloyd_kmeans(&features, 16, 30, &mut Rng::seed_from_u64(500));
    let first_lvl = lloyd_kmeans(&features, 8, 30, &mut Rng::seed_from_u64(500));
    let mut residuals = features.clone();
    for i in 0..features.rows() {
        let a = nearest_assign(features.row(i), &first_lvl).unwrap();
        for (r, c) in residuals.row_mut(i).iter_mut().zip(first_lvl.row(a)) {
            *r -= c;
        }
    }
    let res_lvl = lloyd_kmeans(&residuals, 8, 30, &mut Rng::seed_from_u64(500));
    let mse_flat = flat_quantization_mse(&features, &flat);
    let mse_hier = hierarchical_quantization_mse(&features, &first_lvl, &res_lvl);
    assert!(
        mse_hier <= mse_flat + 1e-9,
        "hierarchical ({mse_hier}) must not exceed flat ({mse_flat}) at equal budget"
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 300.0, "runtime {elapsed:?} exceeds 5 min");
    println!(
        "criterion 2: PASS (10000/10000 residual-dominance cases; 8+8 hierarchical MSE {mse_hier:.5} <= 16-flat MSE {mse_flat:.5}; {:.1}s)",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 3. Revival formula
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_revival_formula() {
    // Full revival: a never-used code (count stays 0) lands exactly on the
    // nearest batch feature.
    let mut cb = Codebook::new(
        Mat::from_vec(2, 2, vec![50.0, -50.0, 0.0, 0.0]),
        0.99,
        CodebookRole::State,
    )
    .unwrap();
    let feats = Mat::from_vec(3, 2, vec![30.0, -20.0, 0.1, 0.1, -4.0, 4.0]);
    cluster_revive_update(&mut cb, &feats, &[1, 1, 1]);
    assert_eq!(cb.vectors.row(0), &[30.0, -20.0], "alpha = exp(0) = 1 snaps exactly");

    // Count update: gamma=0.99, N=10, n=2 -> 9.92 within 1e-12.
    let mut cb2 =
        Codebook::new(Mat::from_vec(2, 1, vec![0.0, 1.0]), 0.99, CodebookRole::State).unwrap();
    cb2.ema_counts[0] = 10.0;
    let batch = Mat::from_vec(2, 1, vec![0.1, -0.1]);
    cluster_revive_update(&mut cb2, &batch, &[0, 0]);
    assert!(
        (cb2.ema_counts[0] - 9.92).abs() <= 1e-12,
        "N' = {} expected 9.92",
        cb2.ema_counts[0]
    );

    // Strict monotone decay of the revival weight in N over a sampled grid.
    let mut prev = f64::INFINITY;
    let mut sampled = 0;
    for i in 0..200 {
        let n = i as f64 * 2.5e-5;
        let a = revival_weight(n, 8, 0.99);
        if i > 0 {
            assert!(a < prev, "alpha must strictly decrease (N = {n})");
        }
        prev = a;
        sampled += 1;
    }
    println!(
        "criterion 3: PASS (exact snap at N'=0; N' = 9.92 +- 1e-12; alpha strictly decreasing over {sampled} grid points)"
    );
}

// ---------------------------------------------------------------------------
// 4. ZOH discretization
// ---------------------------------------------------------------------------

fn series_exp_20(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..20 {
        term *= x / k as f64;
        sum += term;
    }
    sum
}

fn series_phi_20(x: f64) -> f64 {
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..20 {
        term *= x / (k + 1) as f64;
        sum += term;
    }
    sum
}

#[test]
fn criterion_4_zoh_discretization() {
    let mut rng = Rng::seed_from_u64(404);
    let mut max_err = 0.0f64;
    for _ in 0..100 {
        let n = 1 + rng.below(8);
        let a: Vec<f64> = (0..n).map(|_| -(0.9 * rng.uniform() + 0.05) * 4.0).collect();
        let delta: Vec<f64> = (0..n).map(|_| 1e-3 + rng.uniform() * (1e-1 - 1e-3)).collect();
        let b = rng.normal_mat(n, 4, 1.0);
        let (abar, bbar) = zoh_discretize(&a, &b, &delta).unwrap();
        for i in 0..n {
            let x = a[i] * delta[i];
            max_err = max_err.max((abar[i] - series_exp_20(x)).abs());
            for j in 0..4 {
                let oracle = series_phi_20(x) * delta[i] * b.get(i, j);
                max_err = max_err.max((bbar.get(i, j) - oracle).abs());
            }
        }
    }
    assert!(max_err <= 1e-8, "series-oracle deviation {max_err}");
    let (abar, _) = zoh_discretize(&[std::f64::consts::LN_2], &Mat::scalar(1.0), &[1.0]).unwrap();
    assert!((abar[0] - 2.0).abs() <= 1e-12, "scalar ln2 case: {}", abar[0]);
    println!(
        "criterion 4: PASS (100 random diagonal systems within {max_err:.2e} of the 20-term series oracle; ln2 scalar exact)"
    );
}

// ---------------------------------------------------------------------------
// 5. Gradient checks
// ---------------------------------------------------------------------------

fn tiny_model_config() -> ModelConfig {
    let mut cfg = ModelConfig::new(4, WindowSpec { w: 8, stride: 8 });
    cfg.encoder.layers = 1;
    cfg.encoder.heads = 2;
    cfg.ssm.hidden = 6;
    cfg.ssm.layers = 1;
    cfg.ssm.state_dim = 3;
    cfg.ssm.backend = SsmBackend::Gru;
    cfg.codebooks.k_state = 4;
    cfg.codebooks.k_transition = 4;
    cfg.decoder_layers = 1;
    cfg.decoder_heads = 2;
    cfg.classifier.hidden = vec![8, 4];
    cfg
}

/// FD-check a tape program built from a parameter list.
fn fd_check_program(
    shapes: &[(usize, usize)],
    seed: u64,
    build: impl Fn(&mut Tape, &[hst_core::autodiff::Var]) -> hst_core::autodiff::Var,
) -> f64 {
    let mut rng = Rng::seed_from_u64(seed);
    let params: Vec<Mat> = shapes.iter().map(|&(r, c)| rng.normal_mat(r, c, 0.7)).collect();
    let mut tape = Tape::new();
    let vars: Vec<_> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let loss = build(&mut tape, &vars);
    let grads = tape.backward(loss);
    let analytic: Vec<Mat> = vars
        .iter()
        .zip(&params)
        .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Mat::zeros(p.rows(), p.cols())))
        .collect();
    let report = finite_diff_check(
        &params,
        &analytic,
        &mut |ps: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<_> = ps.iter().map(|p| t.leaf(p.clone())).collect();
            let l = build(&mut t, &vs);
            t.val(l).get(0, 0)
        },
        1e-4,
        48,
    );
    assert!(report.max_rel_err <= 1e-4, "FD mismatch: {:?}", report.worst);
    report.max_rel_err
}

#[test]
fn criterion_5_gradient_checks() {
    let start = Instant::now();
    let mut worst = 0.0f64;

    // Step operations.
    worst = worst.max(fd_check_program(&[(3, 4), (4, 4), (1, 4), (1, 4), (1, 3)], 51, |t, v| {
        let h = rnn_step(t, v[0], v[1], v[2], v[3], v[4]);
        t.sq_frobenius(h)
    }));
    worst = worst.max(fd_check_program(
        &[(3, 12), (3, 12), (1, 12), (1, 3), (1, 3), (1, 3)],
        52,
        |t, v| {
            let (h, c) = lstm_step(t, v[0], v[1], v[2], v[3], v[4], v[5]);
            let a = t.sq_frobenius(h);
            let b = t.sq_frobenius(c);
            t.add(a, b)
        },
    ));
    worst = worst.max(fd_check_program(&[(3, 9), (3, 9), (1, 9), (1, 3), (1, 3)], 53, |t, v| {
        let h = gru_step(t, v[0], v[1], v[2], v[3], v[4]);
        t.sq_frobenius(h)
    }));
    worst = worst.max(fd_check_program(
        &[(5, 4), (1, 4), (4, 4), (1, 4), (1, 2), (1, 3)],
        54,
        |t, v| {
            let o = state_head_step(t, v[0], v[1], v[2], v[3], v[4], v[5], false);
            t.sq_frobenius(o)
        },
    ));

    // decode w.r.t. every decoder parameter (constant quantized input).
    {
        let cfg = tiny_model_config();
        let model = HstModel::new(cfg, 55).unwrap();
        let mut rng = Rng::seed_from_u64(56);
        let dec_in = rng.normal_mat(8, 12, 1.0);
        let x = rng.normal_mat(8, 4, 1.0);
        let base: Vec<Mat> = model.store.iter().map(|(_, e)| (*e.value).clone()).collect();
        let decoder_param_ids: Vec<usize> = model
            .store
            .iter()
            .enumerate()
            .filter(|(_, (_, e))| e.group == ParamGroup::Decoder)
            .map(|(i, _)| i)
            .collect();
        let run = |ps: &[Mat]| {
            let mut store = ParamStore::new();
            for ((_, e), val) in model.store.iter().zip(ps) {
                store.add(e.group, e.name.clone(), val.clone());
            }
            let mut tape = Tape::new();
            let bind = Binding::bind(&store, &mut tape);
            let input = tape.constant(dec_in.clone());
            let out = decode(&mut tape, &bind, &model.decoder, input, 2).unwrap();
            let target = tape.constant(x.clone());
            let d = tape.sub(target, out);
            let sq = tape.sq_frobenius(d);
            let loss = tape.scale(sq, 1.0 / 32.0);
            (tape, bind, loss)
        };
        let (tape, bind, loss) = run(&base);
        let grads = tape.backward(loss);
        let dec_params: Vec<Mat> = decoder_param_ids.iter().map(|&i| base[i].clone()).collect();
        let analytic: Vec<Mat> = decoder_param_ids
            .iter()
            .map(|&i| {
                grads
                    .get(bind.vars()[i])
                    .cloned()
                    .unwrap_or_else(|| Mat::zeros(base[i].rows(), base[i].cols()))
            })
            .collect();
        let mut work = base.clone();
        let report = finite_diff_check(
            &dec_params,
            &analytic,
            &mut |ps: &[Mat]| {
                for (slot, &i) in ps.iter().zip(&decoder_param_ids) {
                    work[i] = slot.clone();
                }
                let (tape, _, loss) = run(&work);
                tape.val(loss).get(0, 0)
            },
            1e-4,
            12,
        );
        assert!(report.max_rel_err <= 1e-4, "decode FD: {:?}", report.worst);
        worst = worst.max(report.max_rel_err);
    }

    // Full phase-1 objective w.r.t. every trainable parameter, using the
    // algebraic-substitution oracle: straight-through deltas and sg targets
    // frozen at their base values, codebook gathers recomputed from the
    // perturbed codebooks.
    {
        let cfg = tiny_model_config();
        let model = HstModel::new(cfg.clone(), 57).unwrap();
        let mut rng = Rng::seed_from_u64(58);
        let x = rng.normal_mat(8, 4, 1.0);

        // Base pass: analytic gradients of the real objective.
        let pass = model.train_pass(&x).unwrap();
        let base: Vec<Mat> = model.store.iter().map(|(_, e)| (*e.value).clone()).collect();
        let analytic: Vec<Mat> = model
            .store
            .iter()
            .zip(&pass.grads)
            .map(|((_, e), g)| g.clone().unwrap_or_else(|| Mat::zeros(e.value.rows(), e.value.cols())))
            .collect();
        // Base quantization state for the frozen substitution.
        let tokens = pass.tokens.clone().expect("quantized mode");
        let (st_delta, tr_delta) = {
            let mut tape = Tape::new();
            let bind = Binding::bind(&model.store, &mut tape);
            let fwd = model.forward_window(&mut tape, &bind, &x).unwrap();
            let o = tape.val(fwd.o_seq).clone();
            let h = tape.val(fwd.h_seq).clone();
            let mut st = tokens.quantized_states.clone();
            st.add_scaled(&o, -1.0);
            let mut tr = tokens.quantized_transitions.clone();
            tr.add_scaled(&h, -1.0);
            (st, tr)
        };
        let t_state = pass.o_features.clone();
        let t_trans = pass.h_features.clone();
        let t_state_res = {
            let mut r = pass.o_features.clone();
            for (i, &a) in tokens.state_tokens.iter().enumerate() {
                for (rv, cv) in
                    r.row_mut(i).iter_mut().zip(model.store.get(model.cb_state).row(a))
                {
                    *rv -= cv;
                }
            }
            r
        };
        let t_trans_res = {
            let mut r = pass.h_features.clone();
            for (i, &a) in tokens.transition_tokens.iter().enumerate() {
                for (rv, cv) in
                    r.row_mut(i).iter_mut().zip(model.store.get(model.cb_transition).row(a))
                {
                    *rv -= cv;
                }
            }
            r
        };
        let weights = cfg.effective_loss();
        let w_rows = 8.0;
        let frozen = |ps: &[Mat]| -> f64 {
            let mut store = ParamStore::new();
            for ((_, e), val) in model.store.iter().zip(ps) {
                store.add(e.group, e.name.clone(), val.clone());
            }
            let mut tape = Tape::new();
            let bind = Binding::bind(&store, &mut tape);
            let xv = tape.constant(x.clone());
            let enc = encoder_forward(&mut tape, &bind, &model.encoder, &cfg.encoder, xv).unwrap();
            let (h_seq, o_seq) =
                hst_core::ssm::run_backbone(&mut tape, &bind, &model.backbone, &cfg.ssm, enc.fused)
                    .unwrap();
            // Straight-through with frozen deltas; codebook gathers live.
            let sd = tape.constant(st_delta.clone());
            let q_state = tape.add(o_seq, sd);
            let td = tape.constant(tr_delta.clone());
            let q_trans = tape.add(h_seq, td);
            let dec_in = tape.concat_cols(&[q_state, q_trans]);
            let x_hat = decode(&mut tape, &bind, &model.decoder, dec_in, cfg.decoder_heads).unwrap();
            let target = tape.constant(x.clone());
            let d = tape.sub(target, x_hat);
            let sq = tape.sq_frobenius(d);
            let recon = tape.scale(sq, 1.0 / 32.0);
            // Codebook terms with frozen targets.
            let o_hat = tape.gather_rows(bind.var(model.cb_state), &tokens.state_tokens);
            let h_hat = tape.gather_rows(bind.var(model.cb_transition), &tokens.transition_tokens);
            let o_res =
                tape.gather_rows(bind.var(model.cb_state_res), &tokens.state_residual_tokens);
            let h_res = tape
                .gather_rows(bind.var(model.cb_transition_res), &tokens.transition_residual_tokens);
            let mut total = tape.scale(recon, weights.alpha);
            for (target_mat, hat, w) in [
                (&t_state, o_hat, weights.beta),
                (&t_trans, h_hat, weights.beta),
                (&t_state_res, o_res, weights.gamma_loss),
                (&t_trans_res, h_res, weights.gamma_loss),
            ] {
                let tv = tape.constant(target_mat.clone());
                let diff = tape.sub(tv, hat);
                let sq = tape.sq_frobenius(diff);
                let term = tape.scale(sq, w / w_rows);
                total = tape.add(total, term);
            }
            tape.val(total).get(0, 0)
        };
        // Sanity: the frozen objective reproduces the real loss at base.
        let base_val = frozen(&base);
        assert!(
            (base_val - pass.loss.total).abs() < 1e-9,
            "frozen objective mismatch at base: {base_val} vs {}",
            pass.loss.total
        );
        let report = finite_diff_check(&base, &analytic, &mut frozen.clone(), 1e-4, 6);
        assert!(
            report.max_rel_err <= 1e-4,
            "total_loss FD over all trainable parameters: {:?}",
            report.worst
        );
        worst = worst.max(report.max_rel_err);

        // sg semantics: a codebook-only objective sends exactly zero gradient
        // into every encoder and backbone parameter.
        let mut cb_only = cfg.clone();
        cb_only.loss = LossWeights { alpha: 0.0, beta: 0.1, gamma_loss: 0.1, commitment: 0.0 };
        let model2 = HstModel::new(cb_only, 59).unwrap();
        let pass2 = model2.train_pass(&x).unwrap();
        for ((_, e), g) in model2.store.iter().zip(&pass2.grads) {
            if matches!(e.group, ParamGroup::Encoder | ParamGroup::Backbone) {
                let max = g.as_ref().map(|g| g.max_abs()).unwrap_or(0.0);
                assert_eq!(max, 0.0, "sg leak into {}", e.name);
            }
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 120.0, "runtime {elapsed:?} exceeds 2 min");
    println!(
        "criterion 5: PASS (max relative FD error {worst:.2e} <= 1e-4 across step ops, decode and the full objective; codebook-term gradients into the encoder exactly zero; {:.1}s)",
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 8. Statistics
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_statistics() {
    let (q, flags) = fdr_bh(&[0.01, 0.02, 0.04], 0.05);
    assert_eq!(q, vec![0.03, 0.03, 0.04], "BH worked example must be exact");
    assert_eq!(flags, vec![true, true, true]);

    let occ = occupancy(&[1, 1, 2, 3], 4).unwrap();
    assert_eq!(occ, vec![0.0, 0.5, 0.25, 0.25], "occupancy example must be exact");

    let group: Vec<Vec<f64>> = (0..6)
        .map(|i| vec![0.25 + 0.01 * i as f64, 0.35, 0.40 - 0.01 * i as f64])
        .collect();
    let rows = group_comparison_report(&group, &group, GroupTest::Welch, 0.05).unwrap();
    assert!(
        rows.iter().all(|r| !r.significant),
        "identical groups must produce no flags at q = 0.05"
    );
    println!("criterion 8: PASS (BH [0.03, 0.03, 0.04] exact; occupancy (0, 0.5, 0.25, 0.25) exact; identical groups unflagged)");
}

// ---------------------------------------------------------------------------
// 9. Reproducibility + persistence
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_reproducibility_and_persistence() {
    let spec = SwitchingSystemSpec::metastable(3, 4, 10.0, 0.05, 21);
    let records: Vec<_> = (0..4)
        .map(|i| synth_switching_lds(&spec, 64, 900 + i, &format!("r{i}"), 0).unwrap())
        .collect();
    let window = WindowSpec { w: 16, stride: 16 };
    let (windows, _) = prepare_windows(&records, &window).unwrap();
    let mut cfg = tiny_model_config();
    cfg.window = window;
    let tcfg = TrainConfig {
        phase1_steps: 30,
        phase2_epochs: 0,
        learning_rate: 1e-3,
        batch_size: 4,
        seed: 99,
        optimizer: OptimizerKind::Adam,
    };
    let run = || {
        let mut model = HstModel::new(cfg.clone(), tcfg.seed).unwrap();
        let metrics = train_tokenizer(&mut model, &windows, &tcfg).unwrap();
        (model, metrics)
    };
    let (model_a, metrics_a) = run();
    let (_, metrics_b) = run();
    let log_a = serde_json::to_string(&metrics_a).unwrap();
    let log_b = serde_json::to_string(&metrics_b).unwrap();
    assert_eq!(log_a, log_b, "fixed-seed loss logs must be identical");

    // Checkpoint round-trip is bit-exact on disk and in parameters.
    let dir = tempfile::tempdir().unwrap();
    let ckpt = HstCheckpoint::from_model(&model_a, &tcfg, 30, &metrics_a);
    let p1 = dir.path().join("a.hst");
    let p2 = dir.path().join("b.hst");
    ckpt.save(&p1).unwrap();
    let loaded = HstCheckpoint::load(&p1).unwrap();
    loaded.save(&p2).unwrap();
    assert_eq!(
        std::fs::read(&p1).unwrap(),
        std::fs::read(&p2).unwrap(),
        "save -> load -> save must be byte-identical"
    );
    let rebuilt = loaded.into_model().unwrap();
    for ((_, a), (_, b)) in model_a.store.iter().zip(rebuilt.store.iter()) {
        assert_eq!(a.value.as_slice(), b.value.as_slice(), "{} differs after reload", a.name);
    }
    println!(
        "criterion 9: PASS (30-step loss logs bit-identical across runs; checkpoint round-trip byte-exact)"
    );
}

// ---------------------------------------------------------------------------
// 6. Synthetic metastability recovery
// ---------------------------------------------------------------------------

/// The two training criteria share the machine so their runtime measurements
/// and memory footprints don't interfere. Poisoning is ignored: one failing
/// criterion must not cascade into the other.
static TRAIN_SLOT: std::sync::Mutex<()> = std::sync::Mutex::new(());

fn train_slot() -> std::sync::MutexGuard<'static, ()> {
    TRAIN_SLOT.lock().unwrap_or_else(|e| e.into_inner())
}

/// Fixture frozen from the pilot runs (hidden 32, GRU backend, batch 4,
/// lr 2e-4, commitment 0.25, 12 subjects x 400 points, seeds below):
///   noiseless pilot: mean r 0.9850, purity 0.7760, ARI 0.7046 (345 s)
///   SNR 10 dB pilot: mean r 0.9143 (purity 0.7496 / ARI 0.5403) (210 s)
/// The asserted thresholds stay at the specified 0.9 / 0.7 / 0.7 / 0.5.
struct RecoveryOutcome {
    mean_r: f64,
    purity: f64,
    ari: f64,
}

fn run_recovery(observation_snr_db: Option<f64>) -> RecoveryOutcome {
    let spec = SwitchingSystemSpec::metastable(4, 16, 20.0, 0.0, 47);
    let mut records: Vec<_> = (0..12)
        .map(|i| synth_switching_lds(&spec, 400, 1000 + i as u64, &format!("s{i:02}"), 0).unwrap())
        .collect();
    if let Some(snr_db) = observation_snr_db {
        let mut rng = Rng::seed_from_u64(777);
        let (mut s, mut s2, mut n) = (0.0, 0.0, 0usize);
        for r in &records {
            for v in r.x.as_slice() {
                s += v;
                s2 += v * v;
                n += 1;
            }
        }
        let mean = s / n as f64;
        let pooled_var = s2 / n as f64 - mean * mean;
        let noise_std = (pooled_var / 10f64.powf(snr_db / 10.0)).sqrt();
        for r in &mut records {
            for v in r.x.as_mut_slice() {
                *v += rng.normal_scaled(noise_std);
            }
        }
    }
    let window = WindowSpec { w: 100, stride: 100 };
    let mut cfg = ModelConfig::new(16, window);
    cfg.ssm.backend = SsmBackend::Gru;
    cfg.ssm.hidden = 32;
    cfg.ssm.state_dim = 8;
    cfg.codebooks.k_state = 8;
    cfg.codebooks.k_transition = 8;
    cfg.loss.commitment = 0.25;
    let tcfg = TrainConfig {
        phase1_steps: 4000,
        phase2_epochs: 0,
        learning_rate: 2e-4,
        batch_size: 4,
        seed: 7,
        optimizer: OptimizerKind::Adam,
    };
    let (windows, _) = prepare_windows(&records, &window).unwrap();
    let mut model = HstModel::new(cfg, tcfg.seed).unwrap();
    train_tokenizer(&mut model, &windows, &tcfg).unwrap();

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
    RecoveryOutcome {
        mean_r: rs.iter().sum::<f64>() / rs.len() as f64,
        purity: cluster_purity(&tokens_all, &truth_all),
        ari: adjusted_rand_index(&tokens_all, &truth_all),
    }
}

#[test]
fn criterion_6_metastability_recovery() {
    let _slot = train_slot();
    let start = Instant::now();
    let clean = run_recovery(None);
    assert!(clean.mean_r >= 0.9, "noiseless reconstruction r {} < 0.9", clean.mean_r);
    assert!(clean.purity >= 0.7, "token purity {} < 0.7", clean.purity);
    assert!(clean.ari >= 0.5, "adjusted Rand index {} < 0.5", clean.ari);
    let noisy = run_recovery(Some(10.0));
    assert!(noisy.mean_r >= 0.7, "SNR 10 dB reconstruction r {} < 0.7", noisy.mean_r);
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 900.0, "runtime {elapsed:?} exceeds 15 min");
    println!(
        "criterion 6: PASS (noiseless r {:.4}, purity {:.4}, ARI {:.4}; SNR 10 dB r {:.4}; {:.0}s)",
        clean.mean_r,
        clean.purity,
        clean.ari,
        noisy.mean_r,
        elapsed.as_secs_f64()
    );
}

// ---------------------------------------------------------------------------
// 7. Synthetic group discrimination
// ---------------------------------------------------------------------------

/// Fixture frozen from the pilot run (hidden 24, GRU backend, 1000 phase-1
/// steps, 15 phase-2 epochs, batch 8, lr 2e-4, commitment 0.25, dwell 12,
/// favor mass 0.95, 40 subjects per group x 300 points):
///   pilot: per-fold accuracy [1.0, 1.0, 0.875, 1.0, 1.0],
///   mean 0.9750 +- 0.0500, 577 s on two cores.
#[test]
fn criterion_7_group_discrimination() {
    let _slot = train_slot();
    let start = Instant::now();
    // Two generators sharing dynamics and means (same seed); only the
    // transition matrices differ.
    let spec_a = SwitchingSystemSpec::metastable_favoring(4, 16, 12.0, 0.05, 11, &[0, 1], 0.95);
    let spec_b = SwitchingSystemSpec::metastable_favoring(4, 16, 12.0, 0.05, 11, &[2, 3], 0.95);
    assert_eq!(
        spec_a.dynamics.iter().map(|m| m.as_slice().to_vec()).collect::<Vec<_>>(),
        spec_b.dynamics.iter().map(|m| m.as_slice().to_vec()).collect::<Vec<_>>(),
        "groups must differ only in transition matrices"
    );
    assert_eq!(spec_a.means, spec_b.means);
    assert_ne!(spec_a.transition, spec_b.transition);
    let mut records = Vec::new();
    for i in 0..40 {
        records.push(
            synth_switching_lds(&spec_a, 300, 2000 + i as u64, &format!("a{i:02}"), 0).unwrap(),
        );
        records.push(
            synth_switching_lds(&spec_b, 300, 3000 + i as u64, &format!("b{i:02}"), 1).unwrap(),
        );
    }
    let mut mcfg = ModelConfig::new(16, WindowSpec { w: 100, stride: 100 });
    mcfg.ssm.backend = SsmBackend::Gru;
    mcfg.ssm.hidden = 24;
    mcfg.ssm.state_dim = 8;
    mcfg.codebooks.k_state = 8;
    mcfg.codebooks.k_transition = 8;
    mcfg.classifier.hidden = vec![32, 16];
    mcfg.loss.commitment = 0.25;
    let tcfg = TrainConfig {
        phase1_steps: 1000,
        phase2_epochs: 15,
        learning_rate: 2e-4,
        batch_size: 8,
        seed: 13,
        optimizer: OptimizerKind::Adam,
    };

    // Freeze contract at fixture scale: train both phases on the fold-0
    // training split and require bitwise-identical codebooks across phase 2.
    {
        let labels: Vec<i64> = records.iter().map(|r| r.label).collect();
        let plan = hst_core::eval::stratified_kfold(&labels, 5, tcfg.seed).unwrap();
        let split: Vec<_> = records
            .iter()
            .zip(&plan.assignments)
            .filter(|(_, &f)| f != 0)
            .map(|(r, _)| r.clone())
            .collect();
        let (windows, _) = prepare_windows(&split, &mcfg.window).unwrap();
        let window_labels: Vec<usize> =
            windows.iter().map(|w| split[w.record_idx].label as usize).collect();
        let mut model = HstModel::new(mcfg.clone(), tcfg.seed).unwrap();
        train_tokenizer(&mut model, &windows, &tcfg).unwrap();
        let before: Vec<(String, Vec<f64>)> = model
            .store
            .iter()
            .filter(|(_, e)| e.group == ParamGroup::Quantizer)
            .map(|(_, e)| (e.name.clone(), e.value.as_slice().to_vec()))
            .collect();
        train_classifier(&mut model, &windows, &window_labels, &tcfg).unwrap();
        let mut checked = 0;
        for (_, e) in model.store.iter() {
            if e.group == ParamGroup::Quantizer {
                let (name, snapshot) = &before[checked];
                assert_eq!(name, &e.name);
                assert_eq!(
                    snapshot.as_slice(),
                    e.value.as_slice(),
                    "codebook {} changed during phase 2",
                    e.name
                );
                checked += 1;
            }
        }
        assert_eq!(checked, 4, "all four codebooks checked");
    }

    // Full 5-fold protocol.
    let cv = CvConfig { folds: 5, model: mcfg, train: tcfg, threshold: 0.5 };
    let out = cross_validate(&records, &cv, None).unwrap();
    let accs: Vec<f64> = out.report.per_fold.iter().map(|f| f.metrics.accuracy).collect();
    assert!(
        out.report.mean_accuracy >= 0.8,
        "mean accuracy {} < 0.8 (folds {:?})",
        out.report.mean_accuracy,
        accs
    );
    let elapsed = start.elapsed();
    assert!(elapsed.as_secs_f64() < 3600.0, "runtime {elapsed:?} exceeds 60 min");
    println!(
        "criterion 7: PASS (mean accuracy {:.4} +- {:.4} over folds {:?} vs 0.5 chance; codebooks bit-identical across phase 2; {:.0}s)",
        out.report.mean_accuracy,
        out.report.std_accuracy,
        accs,
        elapsed.as_secs_f64()
    );
}
