//! Two-phase training: tokenizer pretraining (reconstruction + codebook
//! objective, EMA usage update, revival move), then frozen-quantizer
//! classifier fine-tuning.
//!
//! Determinism contract: for a fixed seed the loss logs are bit-identical
//! across runs on one platform. Batch items evaluate in parallel but their
//! gradients fold in window order, so thread count never changes results.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::WindowSample;
use crate::error::{HstError, Result};
use crate::linalg::Mat;
use crate::model::{HstModel, QuantizeMode, WindowPass};
use crate::params::{ParamGroup, ParamStore};
use crate::quant::{cluster_revive_update, Codebook, CodebookRole};
use crate::recon::LossBreakdown;
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    Adam,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub phase1_steps: usize,
    pub phase2_epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            phase1_steps: 4000,
            phase2_epochs: 200,
            learning_rate: 2e-4,
            batch_size: 32,
            seed: 0,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(HstError::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(HstError::Config("batch size must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: usize,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let m = store.iter().map(|(_, e)| Mat::zeros_like(&e.value)).collect();
        let v = store.iter().map(|(_, e)| Mat::zeros_like(&e.value)).collect();
        Adam { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m, v }
    }

    pub fn steps_taken(&self) -> usize {
        self.t
    }

    /// One update over all parameters whose group passes `trainable`.
    /// `grads` aligns with the store; `None` entries are skipped.
    pub fn step(
        &mut self,
        store: &mut ParamStore,
        grads: &[Option<Mat>],
        trainable: impl Fn(ParamGroup) -> bool,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let refs: Vec<_> = store.iter().map(|(r, e)| (r, e.group)).collect();
        for ((r, group), g) in refs.into_iter().zip(grads) {
            let Some(g) = g else { continue };
            if !trainable(group) {
                continue;
            }
            let m = &mut self.m[r.0];
            let v = &mut self.v[r.0];
            let p = store.get_mut(r);
            for ((pv, (mv, vv)), gv) in p
                .as_mut_slice()
                .iter_mut()
                .zip(m.as_mut_slice().iter_mut().zip(v.as_mut_slice().iter_mut()))
                .zip(g.as_slice())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Metric rows
// ---------------------------------------------------------------------------

/// One JSON line per phase-1 step.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub total: f64,
    pub recon: f64,
    pub state_cb: f64,
    pub state_res_cb: f64,
    pub transition_cb: f64,
    pub transition_res_cb: f64,
    pub perplexity_state: f64,
    pub perplexity_transition: f64,
    pub dead_state: usize,
    pub dead_transition: usize,
}

/// One row per phase-2 epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Phase2Row {
    pub epoch: usize,
    pub mean_ce: f64,
    pub train_accuracy: f64,
}

// ---------------------------------------------------------------------------
// Batch iteration
// ---------------------------------------------------------------------------

/// Deterministic epoch-shuffled index stream.
struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: Rng,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        BatchSampler { order, cursor: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor >= self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Whole-epoch batches (phase 2): every index once, then chunked.
    fn epoch_batches(&mut self, size: usize) -> Vec<Vec<usize>> {
        self.rng.shuffle(&mut self.order);
        self.order.chunks(size).map(|c| c.to_vec()).collect()
    }
}

/// Fold per-window gradients (sum) into an accumulator in window order.
fn fold_grads(acc: &mut [Option<Mat>], passes: &[Vec<Option<Mat>>]) {
    for pass in passes {
        for (slot, g) in acc.iter_mut().zip(pass) {
            if let Some(g) = g {
                match slot {
                    Some(a) => a.add_scaled(g, 1.0),
                    s => *s = Some(g.clone()),
                }
            }
        }
    }
}

fn scale_grads(acc: &mut [Option<Mat>], factor: f64) {
    for slot in acc.iter_mut().flatten() {
        slot.scale_inplace(factor);
    }
}

// ---------------------------------------------------------------------------
// Phase 1: tokenizer training
// ---------------------------------------------------------------------------

fn phase1_trainable(group: ParamGroup) -> bool {
    matches!(
        group,
        ParamGroup::Encoder | ParamGroup::Backbone | ParamGroup::Quantizer | ParamGroup::Decoder
    )
}

fn phase2_trainable(group: ParamGroup) -> bool {
    matches!(group, ParamGroup::Encoder | ParamGroup::Backbone | ParamGroup::Classifier)
}

/// Apply the usage update and revival move to one codebook held in the store.
fn revive_codebook(
    model: &mut HstModel,
    which: CodebookRole,
    features: &Mat,
    assignments: &[usize],
) {
    let gamma = model.cfg.codebooks.gamma;
    let (vec_ref, counts) = match which {
        CodebookRole::State => (model.cb_state, model.cb_state_usage.state_counts.clone()),
        CodebookRole::Transition => {
            (model.cb_transition, model.cb_state_usage.transition_counts.clone())
        }
        CodebookRole::StateResidual => {
            (model.cb_state_res, model.cb_state_usage.state_res_counts.clone())
        }
        CodebookRole::TransitionResidual => {
            (model.cb_transition_res, model.cb_state_usage.transition_res_counts.clone())
        }
    };
    let mut cb = Codebook {
        vectors: model.store.get(vec_ref).clone(),
        ema_counts: counts,
        gamma,
        role: which,
    };
    cluster_revive_update(&mut cb, features, assignments);
    model.store.set(vec_ref, cb.vectors);
    match which {
        CodebookRole::State => model.cb_state_usage.state_counts = cb.ema_counts,
        CodebookRole::Transition => model.cb_state_usage.transition_counts = cb.ema_counts,
        CodebookRole::StateResidual => model.cb_state_usage.state_res_counts = cb.ema_counts,
        CodebookRole::TransitionResidual => {
            model.cb_state_usage.transition_res_counts = cb.ema_counts
        }
    }
}

/// Streaming metrics log: one JSON object per line, flushed per step, so the
/// log survives an aborted run as a diagnostic snapshot.
pub struct MetricsLog {
    writer: std::io::BufWriter<std::fs::File>,
    path: std::path::PathBuf,
}

impl MetricsLog {
    pub fn create(path: &std::path::Path) -> Result<Self> {
        let file = std::fs::File::create(path).map_err(|e| HstError::io(path, e))?;
        Ok(MetricsLog { writer: std::io::BufWriter::new(file), path: path.to_path_buf() })
    }

    fn write_line<T: serde::Serialize>(&mut self, row: &T) -> Result<()> {
        use std::io::Write;
        let line = serde_json::to_string(row)
            .map_err(|e| HstError::Validation(format!("metrics encode: {e}")))?;
        writeln!(self.writer, "{line}").map_err(|e| HstError::io(&self.path, e))?;
        self.writer.flush().map_err(|e| HstError::io(&self.path, e))?;
        Ok(())
    }
}

/// Run exactly `cfg.phase1_steps` optimizer steps of the tokenizer objective.
/// Returns one metrics row per step. Aborts with a diagnostic error on the
/// first non-finite loss.
pub fn train_tokenizer(
    model: &mut HstModel,
    windows: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<Vec<MetricsRow>> {
    train_tokenizer_logged(model, windows, cfg, None)
}

/// [`train_tokenizer`] with an optional streaming metrics log. On a
/// non-finite loss the log receives a final diagnostic line before the
/// trainer aborts, so the rows written so far form the failure snapshot.
pub fn train_tokenizer_logged(
    model: &mut HstModel,
    windows: &[WindowSample],
    cfg: &TrainConfig,
    mut log: Option<&mut MetricsLog>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(HstError::Validation("no training windows after windowing".into()));
    }
    let mut sampler = BatchSampler::new(windows.len(), cfg.seed ^ 0x5157_a1b3);
    let mut metrics = Vec::with_capacity(cfg.phase1_steps);
    if cfg.phase1_steps == 0 {
        return Ok(metrics);
    }

    // Seed codebooks from the first batch's encoder features.
    let first_batch = sampler.next_batch(cfg.batch_size.min(windows.len()));
    if model.cfg.quantize != QuantizeMode::Continuous && !model.cb_state_usage.initialized {
        let feats: Vec<(Mat, Mat)> = first_batch
            .par_iter()
            .map(|&i| {
                let mut tape = crate::autodiff::Tape::new();
                let bind = crate::params::Binding::bind(&model.store, &mut tape);
                let fwd = model.forward_window(&mut tape, &bind, &windows[i].x)?;
                Ok((tape.val(fwd.o_seq).clone(), tape.val(fwd.h_seq).clone()))
            })
            .collect::<Result<_>>()?;
        let w = model.cfg.window.w;
        let d = model.cfg.ssm.hidden;
        let mut o_all = Mat::zeros(feats.len() * w, d);
        let mut h_all = Mat::zeros(feats.len() * w, d);
        for (bi, (o, h)) in feats.iter().enumerate() {
            for t in 0..w {
                o_all.row_mut(bi * w + t).copy_from_slice(o.row(t));
                h_all.row_mut(bi * w + t).copy_from_slice(h.row(t));
            }
        }
        model.init_codebooks_from_features(&o_all, &h_all, cfg.seed ^ 0x00c0_ffee);
    }
    // The seeding batch is also the first training batch.
    let mut batch = first_batch;

    let mut opt = Adam::new(&model.store, cfg.learning_rate);
    for step in 0..cfg.phase1_steps {
        if step > 0 {
            batch = sampler.next_batch(cfg.batch_size);
        }
        let passes: Vec<WindowPass> = batch
            .par_iter()
            .map(|&i| model.train_pass(&windows[i].x))
            .collect::<Result<_>>()?;

        // Mean loss + mean gradient over the batch, folded in window order.
        let b = passes.len() as f64;
        let mut loss = LossBreakdown::default();
        for p in &passes {
            loss.total += p.loss.total / b;
            loss.recon += p.loss.recon / b;
            loss.state_cb += p.loss.state_cb / b;
            loss.state_res_cb += p.loss.state_res_cb / b;
            loss.transition_cb += p.loss.transition_cb / b;
            loss.transition_res_cb += p.loss.transition_res_cb / b;
        }
        if !loss.total.is_finite() {
            let message = format!("non-finite loss: {loss:?}");
            if let Some(log) = log.as_deref_mut() {
                let _ = log.write_line(&serde_json::json!({ "abort": message, "step": step }));
            }
            return Err(HstError::Training { step, message });
        }
        let mut acc: Vec<Option<Mat>> = vec![None; model.store.len()];
        let grad_lists: Vec<Vec<Option<Mat>>> = passes.iter().map(|p| p.grads.clone()).collect();
        fold_grads(&mut acc, &grad_lists);
        scale_grads(&mut acc, 1.0 / b);

        // Snapshot pre-update first-level codes for residual features.
        let quantized = model.cfg.quantize != QuantizeMode::Continuous;
        let pre_state = quantized.then(|| model.store.get(model.cb_state).clone());
        let pre_trans = quantized.then(|| model.store.get(model.cb_transition).clone());

        opt.step(&mut model.store, &acc, phase1_trainable);

        // Usage + revival, reading fresh post-step code positions.
        let mut row = MetricsRow {
            step,
            total: loss.total,
            recon: loss.recon,
            state_cb: loss.state_cb,
            state_res_cb: loss.state_res_cb,
            transition_cb: loss.transition_cb,
            transition_res_cb: loss.transition_res_cb,
            perplexity_state: 0.0,
            perplexity_transition: 0.0,
            dead_state: 0,
            dead_transition: 0,
        };
        if quantized {
            let w = model.cfg.window.w;
            let d = model.cfg.ssm.hidden;
            let n = passes.len() * w;
            let mut o_all = Mat::zeros(n, d);
            let mut h_all = Mat::zeros(n, d);
            let mut s_tok = Vec::with_capacity(n);
            let mut t_tok = Vec::with_capacity(n);
            let mut sr_tok = Vec::with_capacity(n);
            let mut tr_tok = Vec::with_capacity(n);
            for (bi, p) in passes.iter().enumerate() {
                let tokens = p.tokens.as_ref().expect("quantized mode");
                for t in 0..w {
                    o_all.row_mut(bi * w + t).copy_from_slice(p.o_features.row(t));
                    h_all.row_mut(bi * w + t).copy_from_slice(p.h_features.row(t));
                }
                s_tok.extend_from_slice(&tokens.state_tokens);
                t_tok.extend_from_slice(&tokens.transition_tokens);
                sr_tok.extend_from_slice(&tokens.state_residual_tokens);
                tr_tok.extend_from_slice(&tokens.transition_residual_tokens);
            }
            revive_codebook(model, CodebookRole::State, &o_all, &s_tok);
            revive_codebook(model, CodebookRole::Transition, &h_all, &t_tok);
            if model.cfg.quantize == QuantizeMode::Hierarchical {
                let residuals = |feats: &Mat, pre: &Mat, tokens: &[usize]| {
                    let mut r = feats.clone();
                    for (i, &a) in tokens.iter().enumerate() {
                        for (rv, cv) in r.row_mut(i).iter_mut().zip(pre.row(a)) {
                            *rv -= cv;
                        }
                    }
                    r
                };
                let o_res = residuals(&o_all, pre_state.as_ref().unwrap(), &s_tok);
                let h_res = residuals(&h_all, pre_trans.as_ref().unwrap(), &t_tok);
                revive_codebook(model, CodebookRole::StateResidual, &o_res, &sr_tok);
                if model.cfg.codebooks.literal_transition_residual {
                    revive_codebook(model, CodebookRole::StateResidual, &h_res, &tr_tok);
                } else {
                    revive_codebook(model, CodebookRole::TransitionResidual, &h_res, &tr_tok);
                }
            }
            let seqs: Vec<_> = passes.iter().filter_map(|p| p.tokens.as_ref()).collect();
            let m = model.batch_codebook_metrics(&seqs);
            row.perplexity_state = m[0].perplexity;
            row.perplexity_transition = m[1].perplexity;
            row.dead_state = m[0].dead_codes;
            row.dead_transition = m[1].dead_codes;
        }
        if let Some(log) = log.as_deref_mut() {
            log.write_line(&row)?;
        }
        metrics.push(row);
    }
    debug_assert_eq!(opt.steps_taken(), cfg.phase1_steps);
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Phase 2: frozen-quantizer classifier training
// ---------------------------------------------------------------------------

/// Train encoder + backbone + classifier for `cfg.phase2_epochs` epochs with
/// the quantizer and decoder frozen. `labels` aligns with `windows`.
pub fn train_classifier(
    model: &mut HstModel,
    windows: &[WindowSample],
    labels: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<Phase2Row>> {
    cfg.validate()?;
    if windows.is_empty() {
        return Err(HstError::Validation("no training windows for the classifier".into()));
    }
    if windows.len() != labels.len() {
        return Err(HstError::Shape("one label per training window required".into()));
    }
    if labels.iter().any(|&l| l >= model.cfg.classifier.classes) {
        return Err(HstError::Validation("window label out of class range".into()));
    }
    let mut sampler = BatchSampler::new(windows.len(), cfg.seed ^ 0x9e3_779b9);
    let mut opt = Adam::new(&model.store, cfg.learning_rate);
    let mut rows = Vec::with_capacity(cfg.phase2_epochs);
    for epoch in 0..cfg.phase2_epochs {
        let mut ce_sum = 0.0;
        let mut correct = 0usize;
        let mut count = 0usize;
        for batch in sampler.epoch_batches(cfg.batch_size) {
            let passes: Vec<(f64, Vec<f64>, Vec<Option<Mat>>)> = batch
                .par_iter()
                .map(|&i| model.classifier_pass(&windows[i].x, labels[i]))
                .collect::<Result<_>>()?;
            let b = passes.len() as f64;
            let mut acc: Vec<Option<Mat>> = vec![None; model.store.len()];
            let grad_lists: Vec<Vec<Option<Mat>>> =
                passes.iter().map(|(_, _, g)| g.clone()).collect();
            fold_grads(&mut acc, &grad_lists);
            scale_grads(&mut acc, 1.0 / b);
            for (bi, (ce, probs, _)) in passes.iter().enumerate() {
                ce_sum += ce;
                count += 1;
                let pred = probs
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probs"))
                    .map(|(i, _)| i)
                    .unwrap_or(0);
                if pred == labels[batch[bi]] {
                    correct += 1;
                }
            }
            if !ce_sum.is_finite() {
                return Err(HstError::Training {
                    step: epoch,
                    message: "non-finite classifier loss".into(),
                });
            }
            opt.step(&mut model.store, &acc, phase2_trainable);
        }
        rows.push(Phase2Row {
            epoch,
            mean_ce: ce_sum / count as f64,
            train_accuracy: correct as f64 / count as f64,
        });
    }
    Ok(rows)
}

/// Map raw record labels to dense class indices (sorted ascending).
pub fn class_index_map(labels: &[i64]) -> std::collections::BTreeMap<i64, usize> {
    let mut uniq: Vec<i64> = labels.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    uniq.into_iter().enumerate().map(|(i, l)| (l, i)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{prepare_windows, synth_switching_lds, SwitchingSystemSpec, WindowSpec};
    use crate::model::ModelConfig;
    use crate::ssm::SsmBackend;

    fn small_setup(seed: u64) -> (HstModel, Vec<WindowSample>) {
        let spec = SwitchingSystemSpec::metastable(3, 4, 10.0, 0.05, 7);
        let records: Vec<_> = (0..4)
            .map(|i| synth_switching_lds(&spec, 64, 100 + i, &format!("s{i}"), (i % 2) as i64).unwrap())
            .collect();
        let mut cfg = ModelConfig::new(4, WindowSpec { w: 16, stride: 16 });
        cfg.encoder.layers = 1;
        cfg.encoder.heads = 2;
        cfg.ssm.hidden = 6;
        cfg.ssm.layers = 1;
        cfg.ssm.backend = SsmBackend::Gru;
        cfg.ssm.state_dim = 2;
        cfg.codebooks.k_state = 4;
        cfg.codebooks.k_transition = 4;
        cfg.decoder_layers = 1;
        cfg.decoder_heads = 2;
        cfg.classifier.hidden = vec![8, 4];
        let model = HstModel::new(cfg, seed).unwrap();
        let (windows, _) = prepare_windows(&records, &WindowSpec { w: 16, stride: 16 }).unwrap();
        (model, windows)
    }

    fn quick_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            phase1_steps: steps,
            phase2_epochs: 3,
            learning_rate: 2e-3,
            batch_size: 4,
            seed: 11,
            optimizer: OptimizerKind::Adam,
        }
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let p = store.add(ParamGroup::Encoder, "x", Mat::from_vec(1, 2, vec![3.0, -2.0]));
        let mut opt = Adam::new(&store, 0.05);
        for _ in 0..500 {
            let g = store.get(p).map(|v| 2.0 * v);
            opt.step(&mut store, &[Some(g)], |_| true);
        }
        assert!(store.get(p).max_abs() < 1e-2, "{:?}", store.get(p));
    }

    #[test]
    fn adam_respects_freeze_mask() {
        let mut store = ParamStore::new();
        let a = store.add(ParamGroup::Encoder, "a", Mat::scalar(1.0));
        let b = store.add(ParamGroup::Quantizer, "b", Mat::scalar(1.0));
        let mut opt = Adam::new(&store, 0.1);
        let grads = vec![Some(Mat::scalar(1.0)), Some(Mat::scalar(1.0))];
        opt.step(&mut store, &grads, |g| g == ParamGroup::Encoder);
        assert!(store.get(a).get(0, 0) < 1.0);
        assert_eq!(store.get(b).get(0, 0), 1.0, "frozen group must not move");
    }

    #[test]
    fn zero_steps_is_a_noop() {
        let (mut model, windows) = small_setup(1);
        let before: Vec<Mat> = model.store.iter().map(|(_, e)| (*e.value).clone()).collect();
        let rows = train_tokenizer(&mut model, &windows, &quick_cfg(0)).unwrap();
        assert!(rows.is_empty());
        for ((_, e), b) in model.store.iter().zip(&before) {
            assert_eq!(&*e.value, b, "{} changed", e.name);
        }
    }

    #[test]
    fn loss_descends_on_learnable_data() {
        let (mut model, windows) = small_setup(2);
        let rows = train_tokenizer(&mut model, &windows, &quick_cfg(30)).unwrap();
        assert_eq!(rows.len(), 30);
        assert!(
            rows[29].recon < rows[0].recon,
            "reconstruction should improve: {} -> {}",
            rows[0].recon,
            rows[29].recon
        );
        for r in &rows {
            assert!(r.total.is_finite());
        }
    }

    #[test]
    fn fixed_seed_reproduces_loss_curve() {
        let (mut m1, w1) = small_setup(3);
        let (mut m2, w2) = small_setup(3);
        let r1 = train_tokenizer(&mut m1, &w1, &quick_cfg(10)).unwrap();
        let r2 = train_tokenizer(&mut m2, &w2, &quick_cfg(10)).unwrap();
        for (a, b) in r1.iter().zip(&r2) {
            assert_eq!(a.total.to_bits(), b.total.to_bits(), "step {}", a.step);
            assert_eq!(a.recon.to_bits(), b.recon.to_bits());
        }
        // And the full parameter state matches bitwise.
        for ((_, e1), (_, e2)) in m1.store.iter().zip(m2.store.iter()) {
            assert_eq!(&*e1.value, &*e2.value, "{} diverged", e1.name);
        }
    }

    #[test]
    fn phase2_freezes_quantizer_and_decoder() {
        let (mut model, windows) = small_setup(4);
        train_tokenizer(&mut model, &windows, &quick_cfg(5)).unwrap();
        let frozen_before: Vec<(String, Mat)> = model
            .store
            .iter()
            .filter(|(_, e)| {
                matches!(e.group, ParamGroup::Quantizer | ParamGroup::Decoder)
            })
            .map(|(_, e)| (e.name.clone(), (*e.value).clone()))
            .collect();
        let labels: Vec<usize> = windows.iter().map(|w| w.record_idx % 2).collect();
        let rows = train_classifier(&mut model, &windows, &labels, &quick_cfg(5)).unwrap();
        assert_eq!(rows.len(), 3);
        let mut idx = 0;
        for (_, e) in model.store.iter() {
            if matches!(e.group, ParamGroup::Quantizer | ParamGroup::Decoder) {
                let (name, before) = &frozen_before[idx];
                assert_eq!(name, &e.name);
                assert_eq!(
                    before.as_slice(),
                    e.value.as_slice(),
                    "{} must be bit-identical after phase 2",
                    e.name
                );
                idx += 1;
            }
        }
    }

    #[test]
    fn classifier_overfits_separable_windows() {
        // Two synthetic classes with very different means are separable from
        // pooled embeddings; training accuracy should approach 1.
        let spec_a = SwitchingSystemSpec::metastable(2, 4, 8.0, 0.02, 31);
        let mut spec_b = SwitchingSystemSpec::metastable(2, 4, 8.0, 0.02, 31);
        for mu in &mut spec_b.means {
            for v in mu.iter_mut() {
                *v = -*v * 1.5 + 3.0;
            }
        }
        let mut records = Vec::new();
        for i in 0..3 {
            records.push(synth_switching_lds(&spec_a, 32, 200 + i, &format!("a{i}"), 0).unwrap());
            records.push(synth_switching_lds(&spec_b, 32, 300 + i, &format!("b{i}"), 1).unwrap());
        }
        let mut cfg = ModelConfig::new(4, WindowSpec { w: 16, stride: 16 });
        cfg.encoder.layers = 1;
        cfg.encoder.heads = 2;
        cfg.ssm.hidden = 6;
        cfg.ssm.layers = 1;
        cfg.ssm.backend = SsmBackend::Rnn;
        cfg.ssm.state_dim = 2;
        cfg.codebooks.k_state = 4;
        cfg.codebooks.k_transition = 4;
        cfg.decoder_layers = 1;
        cfg.decoder_heads = 2;
        cfg.classifier.hidden = vec![8, 4];
        let mut model = HstModel::new(cfg, 5).unwrap();
        let (windows, _) = prepare_windows(&records, &WindowSpec { w: 16, stride: 16 }).unwrap();
        let labels: Vec<usize> =
            windows.iter().map(|w| records[w.record_idx].label as usize).collect();
        let tcfg = TrainConfig {
            phase1_steps: 20,
            phase2_epochs: 40,
            learning_rate: 3e-3,
            batch_size: 6,
            seed: 2,
            optimizer: OptimizerKind::Adam,
        };
        train_tokenizer(&mut model, &windows, &tcfg).unwrap();
        let rows = train_classifier(&mut model, &windows, &labels, &tcfg).unwrap();
        let last = rows.last().unwrap();
        assert!(
            last.train_accuracy >= 0.95,
            "separable data should overfit, got {}",
            last.train_accuracy
        );
    }

    #[test]
    fn class_map_sorted_dense() {
        let map = class_index_map(&[5, -1, 5, 2]);
        assert_eq!(map[&-1], 0);
        assert_eq!(map[&2], 1);
        assert_eq!(map[&5], 2);
    }
}
