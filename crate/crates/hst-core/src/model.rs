//! Full model assembly: encoder -> backbone -> hierarchical quantizer ->
//! decoder, plus the downstream classifier head.
//!
//! One [`HstModel`] owns every parameter (in a [`ParamStore`]) and the
//! codebook usage state. A forward pass over one window builds a fresh tape;
//! training code runs passes in parallel across a batch and folds gradients
//! in window order.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::dataio::WindowSpec;
use crate::error::{HstError, Result};
use crate::linalg::Mat;
use crate::params::{Binding, ParamGroup, ParamRef, ParamStore};
use crate::quant::{
    codebook_metrics, kmeanspp_init, kmeanspp_init_residual, quantize_pair_with, Codebook,
    CodebookMetrics, CodebookRole, CodebookSet, TokenizedSequence,
};
use crate::recon::{decode, total_loss, DecoderParams, LossBreakdown, LossNodes, LossWeights};
use crate::rng::Rng;
use crate::ssm::{run_backbone, BackboneParams, SsmConfig};
use crate::stencoder::{encoder_forward, EncoderConfig, EncoderParams};
use crate::stats::pearson;

/// Quantization variant: the full hierarchy, a single-level ablation, or a
/// continuous (no-quantization) baseline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum QuantizeMode {
    Hierarchical,
    FlatVq,
    Continuous,
}

/// What feeds the downstream classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ClassifierInput {
    /// Temporal mean of the concatenated quantized embeddings (default).
    QuantizedConcat,
    /// Temporal mean of the continuous `(o_t, h_t)` concatenation.
    ContinuousConcat,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodebookConfig {
    pub k_state: usize,
    pub k_transition: usize,
    /// Residual codebook size; defaults to the first-level size.
    pub k_residual: Option<usize>,
    /// EMA usage decay.
    pub gamma: f64,
    /// Match transition residuals against the state-residual codebook
    /// (literal-text variant).
    pub literal_transition_residual: bool,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            k_state: 8,
            k_transition: 8,
            k_residual: None,
            gamma: 0.99,
            literal_transition_residual: false,
        }
    }
}

impl CodebookConfig {
    pub fn k_res(&self) -> usize {
        self.k_residual.unwrap_or(self.k_state)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub hidden: Vec<usize>,
    pub classes: usize,
    pub input: ClassifierInput,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig { hidden: vec![256, 64], classes: 2, input: ClassifierInput::QuantizedConcat }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Number of input channels (ROIs).
    pub m: usize,
    pub window: WindowSpec,
    pub encoder: EncoderConfig,
    pub ssm: SsmConfig,
    pub codebooks: CodebookConfig,
    pub loss: LossWeights,
    pub quantize: QuantizeMode,
    pub classifier: ClassifierConfig,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
}

impl ModelConfig {
    pub fn new(m: usize, window: WindowSpec) -> Self {
        ModelConfig {
            m,
            window,
            encoder: EncoderConfig::default(),
            ssm: SsmConfig::default(),
            codebooks: CodebookConfig::default(),
            loss: LossWeights::default(),
            quantize: QuantizeMode::Hierarchical,
            classifier: ClassifierConfig::default(),
            decoder_layers: 2,
            decoder_heads: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate(self.window.w, self.m)?;
        self.ssm.validate()?;
        self.loss.validate()?;
        if self.codebooks.k_state < 2 || self.codebooks.k_transition < 2 || self.codebooks.k_res() < 2
        {
            return Err(HstError::Config("codebook sizes must be >= 2".into()));
        }
        if !(0.0..1.0).contains(&self.codebooks.gamma) || self.codebooks.gamma == 0.0 {
            return Err(HstError::Config("codebook gamma must be in (0,1)".into()));
        }
        let dec_width = 2 * self.ssm.hidden;
        if dec_width % self.decoder_heads != 0 {
            return Err(HstError::Config(format!(
                "decoder width {dec_width} must be divisible by decoder heads {}",
                self.decoder_heads
            )));
        }
        if self.classifier.classes < 2 {
            return Err(HstError::Config("classifier needs >= 2 classes".into()));
        }
        Ok(())
    }

    /// Loss weights with quantizer terms masked off for ablation modes.
    pub fn effective_loss(&self) -> LossWeights {
        let mut w = self.loss;
        match self.quantize {
            QuantizeMode::Hierarchical => {}
            QuantizeMode::FlatVq => w.gamma_loss = 0.0,
            QuantizeMode::Continuous => {
                w.beta = 0.0;
                w.gamma_loss = 0.0;
                w.commitment = 0.0;
            }
        }
        w
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub layers: Vec<(ParamRef, ParamRef)>,
}

impl ClassifierParams {
    fn init(store: &mut ParamStore, cfg: &ClassifierConfig, in_width: usize, rng: &mut Rng) -> Self {
        let mut widths = vec![in_width];
        widths.extend(&cfg.hidden);
        widths.push(cfg.classes);
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, pair)| {
                let s = 1.0 / (pair[0] as f64).sqrt();
                (
                    store.add(
                        ParamGroup::Classifier,
                        format!("classifier.l{i}.w"),
                        rng.normal_mat(pair[0], pair[1], s),
                    ),
                    store.add(
                        ParamGroup::Classifier,
                        format!("classifier.l{i}.b"),
                        Mat::zeros(1, pair[1]),
                    ),
                )
            })
            .collect();
        ClassifierParams { layers }
    }
}

/// Exponentially averaged usage counts for the four codebooks.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct CodebookState {
    pub state_counts: Vec<f64>,
    pub transition_counts: Vec<f64>,
    pub state_res_counts: Vec<f64>,
    pub transition_res_counts: Vec<f64>,
    pub initialized: bool,
}

pub struct HstModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub encoder: EncoderParams,
    pub backbone: BackboneParams,
    pub decoder: DecoderParams,
    pub classifier: ClassifierParams,
    pub cb_state: ParamRef,
    pub cb_transition: ParamRef,
    pub cb_state_res: ParamRef,
    pub cb_transition_res: ParamRef,
    pub cb_state_usage: CodebookState,
}

/// Everything a single-window forward pass exposes.
pub struct WindowForward {
    pub fused: Var,
    pub h_seq: Var,
    pub o_seq: Var,
    pub tokens: Option<TokenizedSequence>,
    pub o_hat: Var,
    pub o_res: Var,
    pub h_hat: Var,
    pub h_res: Var,
    /// Decoder input (`W x 2D`), straight-through in quantized modes.
    pub dec_in: Var,
    pub x_hat: Var,
}

impl HstModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let root = Rng::seed_from_u64(seed);
        let mut r_enc = root.derive(1);
        let mut r_bb = root.derive(2);
        let mut r_dec = root.derive(3);
        let mut r_cls = root.derive(4);
        let mut r_cb = root.derive(5);
        let encoder = EncoderParams::init(&mut store, &cfg.encoder, cfg.window.w, cfg.m, &mut r_enc)?;
        let backbone = BackboneParams::init(&mut store, &cfg.ssm, cfg.m, &mut r_bb);
        let d = cfg.ssm.hidden;
        let decoder = DecoderParams::init(
            &mut store,
            cfg.window.w,
            2 * d,
            cfg.m,
            cfg.decoder_layers,
            &mut r_dec,
        );
        let classifier = ClassifierParams::init(&mut store, &cfg.classifier, 2 * d, &mut r_cls);
        // Codebooks start as small random clouds; the first training batch
        // re-seeds them with k-means++ before any gradient step.
        let cb_state = store.add(
            ParamGroup::Quantizer,
            "quantizer.state",
            r_cb.normal_mat(cfg.codebooks.k_state, d, 0.1),
        );
        let cb_transition = store.add(
            ParamGroup::Quantizer,
            "quantizer.transition",
            r_cb.normal_mat(cfg.codebooks.k_transition, d, 0.1),
        );
        let cb_state_res = store.add(
            ParamGroup::Quantizer,
            "quantizer.state_res",
            r_cb.normal_mat(cfg.codebooks.k_res(), d, 0.03),
        );
        let cb_transition_res = store.add(
            ParamGroup::Quantizer,
            "quantizer.transition_res",
            r_cb.normal_mat(cfg.codebooks.k_res(), d, 0.03),
        );
        let usage = CodebookState {
            state_counts: vec![0.0; cfg.codebooks.k_state],
            transition_counts: vec![0.0; cfg.codebooks.k_transition],
            state_res_counts: vec![0.0; cfg.codebooks.k_res()],
            transition_res_counts: vec![0.0; cfg.codebooks.k_res()],
            initialized: false,
        };
        Ok(HstModel {
            cfg,
            store,
            encoder,
            backbone,
            decoder,
            classifier,
            cb_state,
            cb_transition,
            cb_state_res,
            cb_transition_res,
            cb_state_usage: usage,
        })
    }

    /// Current codebooks as plain values (for assignment and persistence).
    pub fn codebook_set(&self) -> CodebookSet {
        let gamma = self.cfg.codebooks.gamma;
        let mk = |r: ParamRef, counts: &[f64], role: CodebookRole| Codebook {
            vectors: self.store.get(r).clone(),
            ema_counts: counts.to_vec(),
            gamma,
            role,
        };
        CodebookSet {
            state: mk(self.cb_state, &self.cb_state_usage.state_counts, CodebookRole::State),
            transition: mk(
                self.cb_transition,
                &self.cb_state_usage.transition_counts,
                CodebookRole::Transition,
            ),
            state_residual: mk(
                self.cb_state_res,
                &self.cb_state_usage.state_res_counts,
                CodebookRole::StateResidual,
            ),
            transition_residual: mk(
                self.cb_transition_res,
                &self.cb_state_usage.transition_res_counts,
                CodebookRole::TransitionResidual,
            ),
        }
    }

    /// Forward one `W x M` window on the given tape.
    pub fn forward_window(&self, tape: &mut Tape, bind: &Binding, x: &Mat) -> Result<WindowForward> {
        let mut fwd = self.forward_features(tape, bind, x)?;
        fwd.x_hat = decode(tape, bind, &self.decoder, fwd.dec_in, self.cfg.decoder_heads)?;
        Ok(fwd)
    }

    /// Everything up to (and excluding) the decoder; the classifier path and
    /// tokenization don't pay for a reconstruction. `x_hat` is a placeholder
    /// equal to `dec_in` until [`HstModel::forward_window`] replaces it.
    fn forward_features(&self, tape: &mut Tape, bind: &Binding, x: &Mat) -> Result<WindowForward> {
        if x.shape() != (self.cfg.window.w, self.cfg.m) {
            return Err(HstError::Shape(format!(
                "window must be {}x{}, got {}x{}",
                self.cfg.window.w,
                self.cfg.m,
                x.rows(),
                x.cols()
            )));
        }
        let x_var = tape.constant(x.clone());
        let enc = encoder_forward(tape, bind, &self.encoder, &self.cfg.encoder, x_var)?;
        let (h_seq, o_seq) = run_backbone(tape, bind, &self.backbone, &self.cfg.ssm, enc.fused)?;
        let w = self.cfg.window.w;
        let d = self.cfg.ssm.hidden;

        let (tokens, o_hat, o_res, h_hat, h_res, dec_in) = match self.cfg.quantize {
            QuantizeMode::Continuous => {
                let zero = tape.constant(Mat::zeros(w, d));
                let dec_in = tape.concat_cols(&[o_seq, h_seq]);
                (None, zero, zero, zero, zero, dec_in)
            }
            mode => {
                let books = self.codebook_set();
                let mut seq = quantize_pair_with(
                    tape.val(o_seq),
                    tape.val(h_seq),
                    &books,
                    self.cfg.codebooks.literal_transition_residual,
                )?;
                if mode == QuantizeMode::FlatVq {
                    // Single-level ablation: residual stage pinned to zero.
                    seq.state_residual_tokens.iter_mut().for_each(|t| *t = 0);
                    seq.transition_residual_tokens.iter_mut().for_each(|t| *t = 0);
                    for t in 0..w {
                        let first = books.state.vectors.row(seq.state_tokens[t]).to_vec();
                        seq.quantized_states.row_mut(t).copy_from_slice(&first);
                        let firstt =
                            books.transition.vectors.row(seq.transition_tokens[t]).to_vec();
                        seq.quantized_transitions.row_mut(t).copy_from_slice(&firstt);
                    }
                }
                let o_hat = tape.gather_rows(bind.var(self.cb_state), &seq.state_tokens);
                let h_hat = tape.gather_rows(bind.var(self.cb_transition), &seq.transition_tokens);
                let (o_res, h_res) = if mode == QuantizeMode::FlatVq {
                    let zero = tape.constant(Mat::zeros(w, d));
                    (zero, zero)
                } else {
                    let o_res =
                        tape.gather_rows(bind.var(self.cb_state_res), &seq.state_residual_tokens);
                    let res_book = if self.cfg.codebooks.literal_transition_residual {
                        self.cb_state_res
                    } else {
                        self.cb_transition_res
                    };
                    let h_res =
                        tape.gather_rows(bind.var(res_book), &seq.transition_residual_tokens);
                    (o_res, h_res)
                };
                // Straight-through to the decoder: forward uses the summed
                // codes, gradient flows into the encoder path only.
                let q_state = tape.add(o_hat, o_res);
                let q_state = tape.straight_through(o_seq, q_state);
                let q_trans = tape.add(h_hat, h_res);
                let q_trans = tape.straight_through(h_seq, q_trans);
                let dec_in = tape.concat_cols(&[q_state, q_trans]);
                (Some(seq), o_hat, o_res, h_hat, h_res, dec_in)
            }
        };

        Ok(WindowForward {
            fused: enc.fused,
            h_seq,
            o_seq,
            tokens,
            o_hat,
            o_res,
            h_hat,
            h_res,
            dec_in,
            x_hat: dec_in,
        })
    }

    /// Objective nodes for one forwarded window.
    pub fn loss_nodes(
        &self,
        tape: &mut Tape,
        x: &Mat,
        fwd: &WindowForward,
    ) -> Result<LossNodes> {
        let x_const = tape.constant(x.clone());
        let weights = self.cfg.effective_loss();
        total_loss(
            tape,
            x_const,
            fwd.x_hat,
            fwd.o_seq,
            fwd.o_hat,
            fwd.o_res,
            fwd.h_seq,
            fwd.h_hat,
            fwd.h_res,
            &weights,
        )
    }

    /// Classifier logits for one forwarded window (`1 x classes`).
    pub fn classifier_logits(&self, tape: &mut Tape, bind: &Binding, fwd: &WindowForward) -> Var {
        let feats = match self.cfg.classifier.input {
            ClassifierInput::QuantizedConcat => fwd.dec_in,
            ClassifierInput::ContinuousConcat => tape.concat_cols(&[fwd.o_seq, fwd.h_seq]),
        };
        let mut h = tape.mean_rows(feats); // [1 x 2D]
        let last = self.classifier.layers.len() - 1;
        for (i, (w, b)) in self.classifier.layers.iter().enumerate() {
            h = tape.linear(h, bind.var(*w), bind.var(*b));
            if i != last {
                h = tape.relu(h);
            }
        }
        h
    }

    /// Seed the four codebooks from the first batch of encoder features.
    /// `o_feats` / `h_feats` stack every window's sequences row-wise.
    pub fn init_codebooks_from_features(&mut self, o_feats: &Mat, h_feats: &Mat, seed: u64) {
        let k_s = self.cfg.codebooks.k_state;
        let k_t = self.cfg.codebooks.k_transition;
        let k_r = self.cfg.codebooks.k_res();
        let root = Rng::seed_from_u64(seed);
        let state = kmeanspp_init(o_feats, k_s, &mut root.derive(11));
        let trans = kmeanspp_init(h_feats, k_t, &mut root.derive(12));
        let residual_of = |feats: &Mat, centers: &Mat| {
            let mut res = feats.clone();
            for i in 0..feats.rows() {
                let a = crate::quant::nearest_assign(feats.row(i), centers).expect("finite");
                for (r, c) in res.row_mut(i).iter_mut().zip(centers.row(a)) {
                    *r -= c;
                }
            }
            res
        };
        let o_resid = residual_of(o_feats, &state);
        let h_resid = residual_of(h_feats, &trans);
        let state_res = kmeanspp_init_residual(&o_resid, k_r, &mut root.derive(13));
        let trans_res = kmeanspp_init_residual(&h_resid, k_r, &mut root.derive(14));
        self.store.set(self.cb_state, state);
        self.store.set(self.cb_transition, trans);
        self.store.set(self.cb_state_res, state_res);
        self.store.set(self.cb_transition_res, trans_res);
        self.cb_state_usage.initialized = true;
    }

    /// Eval-mode tokenization of one window (no gradients).
    pub fn tokenize_window(&self, x: &Mat) -> Result<TokenizedSequence> {
        if self.cfg.quantize == QuantizeMode::Continuous {
            return Err(HstError::Config("continuous mode has no tokens".into()));
        }
        let mut tape = Tape::new();
        let bind = Binding::bind(&self.store, &mut tape);
        let fwd = self.forward_features(&mut tape, &bind, x)?;
        Ok(fwd.tokens.expect("quantized mode produces tokens"))
    }

    /// Eval-mode reconstruction of one window: `(x_hat, pearson_r, mse)`.
    pub fn reconstruct_window(&self, x: &Mat) -> Result<(Mat, f64, f64)> {
        let mut tape = Tape::new();
        let bind = Binding::bind(&self.store, &mut tape);
        let fwd = self.forward_window(&mut tape, &bind, x)?;
        let x_hat = tape.val(fwd.x_hat).clone();
        let r = pearson(x.as_slice(), x_hat.as_slice());
        let mse = x
            .as_slice()
            .iter()
            .zip(x_hat.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / x.len() as f64;
        Ok((x_hat, r, mse))
    }

    /// Eval-mode class probabilities for one window.
    pub fn classify_window(&self, x: &Mat) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let bind = Binding::bind(&self.store, &mut tape);
        let fwd = self.forward_features(&mut tape, &bind, x)?;
        let logits = self.classifier_logits(&mut tape, &bind, &fwd);
        let row = tape.val(logits).row(0).to_vec();
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        Ok(exps.into_iter().map(|e| e / z).collect())
    }

    /// Usage metrics of the four codebooks over one batch of token streams.
    pub fn batch_codebook_metrics(&self, sequences: &[&TokenizedSequence]) -> [CodebookMetrics; 4] {
        let collect = |f: &dyn Fn(&TokenizedSequence) -> &[usize]| -> Vec<usize> {
            sequences.iter().flat_map(|s| f(s).iter().copied()).collect()
        };
        [
            codebook_metrics(&collect(&|s| &s.state_tokens), self.cfg.codebooks.k_state),
            codebook_metrics(&collect(&|s| &s.transition_tokens), self.cfg.codebooks.k_transition),
            codebook_metrics(&collect(&|s| &s.state_residual_tokens), self.cfg.codebooks.k_res()),
            codebook_metrics(&collect(&|s| &s.transition_residual_tokens), self.cfg.codebooks.k_res()),
        ]
    }
}

/// One window's gradient contribution plus everything the quantizer update
/// and metric logging need.
pub struct WindowPass {
    pub loss: LossBreakdown,
    /// Gradients aligned with the parameter store order (None = no path).
    pub grads: Vec<Option<Mat>>,
    pub tokens: Option<TokenizedSequence>,
    pub o_features: Mat,
    pub h_features: Mat,
}

impl HstModel {
    /// Forward + backward on one window (phase-1 objective).
    pub fn train_pass(&self, x: &Mat) -> Result<WindowPass> {
        let mut tape = Tape::new();
        let bind = Binding::bind(&self.store, &mut tape);
        let fwd = self.forward_window(&mut tape, &bind, x)?;
        let nodes = self.loss_nodes(&mut tape, x, &fwd)?;
        let breakdown = nodes.breakdown(&tape);
        let mut grads_store = tape.backward(nodes.total);
        let grads =
            bind.vars().iter().map(|&v| grads_store.take(v)).collect::<Vec<Option<Mat>>>();
        Ok(WindowPass {
            loss: breakdown,
            grads,
            tokens: fwd.tokens,
            o_features: tape.val(fwd.o_seq).clone(),
            h_features: tape.val(fwd.h_seq).clone(),
        })
    }

    /// Forward + backward on one labeled window (phase-2 objective).
    /// Returns `(cross_entropy, probabilities, grads)`.
    pub fn classifier_pass(&self, x: &Mat, label: usize) -> Result<(f64, Vec<f64>, Vec<Option<Mat>>)> {
        if label >= self.cfg.classifier.classes {
            return Err(HstError::Validation(format!(
                "label {label} out of range for {} classes",
                self.cfg.classifier.classes
            )));
        }
        let mut tape = Tape::new();
        let bind = Binding::bind(&self.store, &mut tape);
        let fwd = self.forward_features(&mut tape, &bind, x)?;
        let logits = self.classifier_logits(&mut tape, &bind, &fwd);
        let loss = tape.cross_entropy(logits, &[label]);
        let loss_val = tape.val(loss).get(0, 0);
        let row = tape.val(logits).row(0).to_vec();
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let exps: Vec<f64> = row.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs = exps.into_iter().map(|e| e / z).collect();
        let mut grads_store = tape.backward(loss);
        let grads = bind.vars().iter().map(|&v| grads_store.take(v)).collect();
        Ok((loss_val, probs, grads))
    }
}
