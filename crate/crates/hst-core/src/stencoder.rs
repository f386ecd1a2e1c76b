//! Spatio-temporal encoder: dimension-preserving self-attention over time
//! tokens and over channel tokens, per-token squeeze-excite gates, and
//! cross-matrix fusion of the two branches.
//!
//! Both branches are pre-norm transformer stacks whose model width equals the
//! token width (`M` for the temporal branch, `W` for the spatial branch), so
//! shapes are preserved end to end. Learned positional embeddings are applied
//! on the temporal branch only; channel tokens are unordered.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{HstError, Result};
use crate::linalg::Mat;
use crate::params::{Binding, ParamGroup, ParamRef, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Learned positional embedding on the temporal branch.
    pub positional: bool,
    /// Derive the spatial gate from the temporal branch (the literal-text
    /// variant) instead of the spatial branch.
    pub literal_spatial_gate: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            heads: 4,
            dropout: 0.0,
            positional: true,
            literal_spatial_gate: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self, w: usize, m: usize) -> Result<()> {
        if self.layers == 0 || self.heads == 0 {
            return Err(HstError::Config("encoder layers and heads must be >= 1".into()));
        }
        if m % self.heads != 0 {
            return Err(HstError::Config(format!(
                "temporal width M = {m} must be divisible by heads = {}",
                self.heads
            )));
        }
        if w % self.heads != 0 {
            return Err(HstError::Config(format!(
                "spatial width W = {w} must be divisible by heads = {}",
                self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(HstError::Config("dropout must be in [0, 1)".into()));
        }
        if self.dropout != 0.0 {
            // Forward evaluation is deterministic by contract; stochastic
            // regularization is not wired through the training loop.
            return Err(HstError::Config(
                "dropout > 0 is reserved and not currently supported".into(),
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Transformer building blocks (shared with the decoder)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_g: ParamRef,
    pub ln1_b: ParamRef,
    pub wq: ParamRef,
    pub wk: ParamRef,
    pub wv: ParamRef,
    pub wo: ParamRef,
    pub bo: ParamRef,
    pub ln2_g: ParamRef,
    pub ln2_b: ParamRef,
    pub ff1: ParamRef,
    pub ff1_b: ParamRef,
    pub ff2: ParamRef,
    pub ff2_b: ParamRef,
}

impl BlockParams {
    pub fn init(
        store: &mut ParamStore,
        group: ParamGroup,
        prefix: &str,
        width: usize,
        rng: &mut Rng,
    ) -> Self {
        let s = 1.0 / (width as f64).sqrt();
        let hidden = 4 * width;
        let sh = 1.0 / (hidden as f64).sqrt();
        BlockParams {
            ln1_g: store.add(group, format!("{prefix}.ln1_g"), Mat::from_elem(1, width, 1.0)),
            ln1_b: store.add(group, format!("{prefix}.ln1_b"), Mat::zeros(1, width)),
            wq: store.add(group, format!("{prefix}.wq"), rng.normal_mat(width, width, s)),
            wk: store.add(group, format!("{prefix}.wk"), rng.normal_mat(width, width, s)),
            wv: store.add(group, format!("{prefix}.wv"), rng.normal_mat(width, width, s)),
            wo: store.add(group, format!("{prefix}.wo"), rng.normal_mat(width, width, s)),
            bo: store.add(group, format!("{prefix}.bo"), Mat::zeros(1, width)),
            ln2_g: store.add(group, format!("{prefix}.ln2_g"), Mat::from_elem(1, width, 1.0)),
            ln2_b: store.add(group, format!("{prefix}.ln2_b"), Mat::zeros(1, width)),
            ff1: store.add(group, format!("{prefix}.ff1"), rng.normal_mat(width, hidden, s)),
            ff1_b: store.add(group, format!("{prefix}.ff1_b"), Mat::zeros(1, hidden)),
            ff2: store.add(group, format!("{prefix}.ff2"), rng.normal_mat(hidden, width, sh)),
            ff2_b: store.add(group, format!("{prefix}.ff2_b"), Mat::zeros(1, width)),
        }
    }
}

/// Multi-head self-attention over `x [n x width]`.
fn mhsa(tape: &mut Tape, bind: &Binding, p: &BlockParams, x: Var, heads: usize) -> Var {
    let width = tape.val(x).cols();
    let dh = width / heads;
    let q = tape.matmul(x, bind.var(p.wq));
    let k = tape.matmul(x, bind.var(p.wk));
    let v = tape.matmul(x, bind.var(p.wv));
    let scale = 1.0 / (dh as f64).sqrt();
    let mut head_outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax_rows(scores);
        head_outs.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&head_outs);
    let out = tape.matmul(cat, bind.var(p.wo));
    tape.add_bias(out, bind.var(p.bo))
}

/// One pre-norm block: `x + MHSA(LN(x))`, then `x + FFN(LN(x))`.
pub fn transformer_block(
    tape: &mut Tape,
    bind: &Binding,
    p: &BlockParams,
    x: Var,
    heads: usize,
) -> Var {
    let ln1 = tape.layer_norm(x, bind.var(p.ln1_g), bind.var(p.ln1_b), 1e-5);
    let att = mhsa(tape, bind, p, ln1, heads);
    let x = tape.add(x, att);
    let ln2 = tape.layer_norm(x, bind.var(p.ln2_g), bind.var(p.ln2_b), 1e-5);
    let mid = tape.linear(ln2, bind.var(p.ff1), bind.var(p.ff1_b));
    let mid = tape.relu(mid);
    let ff = tape.linear(mid, bind.var(p.ff2), bind.var(p.ff2_b));
    tape.add(x, ff)
}

// ---------------------------------------------------------------------------
// Squeeze-excite
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct SqueezeExciteParams {
    /// Scalar squeeze to bottleneck: `[1 x b]`.
    pub w1: ParamRef,
    pub b1: ParamRef,
    /// Bottleneck to scalar gate: `[b x 1]`.
    pub w2: ParamRef,
    pub b2: ParamRef,
}

pub fn se_bottleneck(width: usize) -> usize {
    (width / 4).max(4)
}

impl SqueezeExciteParams {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        rng: &mut Rng,
    ) -> Self {
        let b = se_bottleneck(width);
        SqueezeExciteParams {
            w1: store.add(ParamGroup::Encoder, format!("{prefix}.w1"), rng.normal_mat(1, b, 1.0)),
            b1: store.add(ParamGroup::Encoder, format!("{prefix}.b1"), Mat::zeros(1, b)),
            w2: store.add(
                ParamGroup::Encoder,
                format!("{prefix}.w2"),
                rng.normal_mat(b, 1, 1.0 / (b as f64).sqrt()),
            ),
            b2: store.add(ParamGroup::Encoder, format!("{prefix}.b2"), Mat::zeros(1, 1)),
        }
    }
}

/// Per-token gate: squeeze each row of `h [n x c]` to its mean, pass the
/// scalar through bottleneck ReLU then a scalar sigmoid. Output `[n x 1]`
/// with every entry strictly inside `(0, 1)`.
pub fn excite(tape: &mut Tape, bind: &Binding, p: &SqueezeExciteParams, h: Var) -> Var {
    let s = tape.mean_cols(h); // [n x 1]
    let mid = tape.linear(s, bind.var(p.w1), bind.var(p.b1)); // [n x b]
    let mid = tape.relu(mid);
    let out = tape.linear(mid, bind.var(p.w2), bind.var(p.b2)); // [n x 1]
    tape.sigmoid(out)
}

/// Gate from an explicit squeeze vector (`[n x 1]`) instead of row means;
/// used by the literal-text spatial-gate variant.
pub fn excite_from_squeeze(
    tape: &mut Tape,
    bind: &Binding,
    p: &SqueezeExciteParams,
    s: Var,
) -> Var {
    let mid = tape.linear(s, bind.var(p.w1), bind.var(p.b1));
    let mid = tape.relu(mid);
    let out = tape.linear(mid, bind.var(p.w2), bind.var(p.b2));
    tape.sigmoid(out)
}

// ---------------------------------------------------------------------------
// Encoder assembly
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct EncoderParams {
    /// Temporal positional embedding `[W x M]` (zero-initialized).
    pub pos: ParamRef,
    pub temporal_blocks: Vec<BlockParams>,
    pub spatial_blocks: Vec<BlockParams>,
    pub se_temporal: SqueezeExciteParams,
    pub se_spatial: SqueezeExciteParams,
}

impl EncoderParams {
    pub fn init(
        store: &mut ParamStore,
        cfg: &EncoderConfig,
        w: usize,
        m: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate(w, m)?;
        let pos = store.add(ParamGroup::Encoder, "encoder.pos", Mat::zeros(w, m));
        let mut temporal_blocks = Vec::with_capacity(cfg.layers);
        let mut spatial_blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            temporal_blocks.push(BlockParams::init(
                store,
                ParamGroup::Encoder,
                &format!("encoder.temporal{l}"),
                m,
                rng,
            ));
            spatial_blocks.push(BlockParams::init(
                store,
                ParamGroup::Encoder,
                &format!("encoder.spatial{l}"),
                w,
                rng,
            ));
        }
        let se_temporal = SqueezeExciteParams::init(store, "encoder.se_t", m, rng);
        let se_spatial = SqueezeExciteParams::init(store, "encoder.se_s", w, rng);
        Ok(EncoderParams { pos, temporal_blocks, spatial_blocks, se_temporal, se_spatial })
    }
}

/// Time tokens of width `M`: `[W x M] -> [W x M]`.
pub fn encode_temporal(
    tape: &mut Tape,
    bind: &Binding,
    p: &EncoderParams,
    cfg: &EncoderConfig,
    x: Var,
) -> Var {
    let mut h = if cfg.positional { tape.add(x, bind.var(p.pos)) } else { x };
    for block in &p.temporal_blocks {
        h = transformer_block(tape, bind, block, h, cfg.heads);
    }
    h
}

/// Channel tokens of width `W`: `[W x M] -> [M x W]`. No positional encoding.
pub fn encode_spatial(
    tape: &mut Tape,
    bind: &Binding,
    p: &EncoderParams,
    cfg: &EncoderConfig,
    x: Var,
) -> Var {
    let mut h = tape.transpose(x);
    for block in &p.spatial_blocks {
        h = transformer_block(tape, bind, block, h, cfg.heads);
    }
    h
}

/// `Hf[t, m] = Ht[t, m] * As[m] + Hs[m, t] * At[t]`.
pub fn cross_fuse(tape: &mut Tape, ht: Var, hs: Var, at: Var, as_: Var) -> Result<Var> {
    let (w, m) = tape.val(ht).shape();
    if tape.val(hs).shape() != (m, w) {
        return Err(HstError::Shape(format!(
            "cross_fuse: Ht is {w}x{m} but Hs is {}x{}",
            tape.val(hs).rows(),
            tape.val(hs).cols()
        )));
    }
    if tape.val(at).shape() != (w, 1) || tape.val(as_).shape() != (m, 1) {
        return Err(HstError::Shape("cross_fuse: gate shapes must be Wx1 and Mx1".into()));
    }
    let as_row = tape.transpose(as_);
    let term1 = tape.mul_row_vec(ht, as_row);
    let hst = tape.transpose(hs);
    let term2 = tape.mul_col_vec(hst, at);
    Ok(tape.add(term1, term2))
}

pub struct EncoderOutput {
    pub fused: Var,
    pub temporal_gate: Var,
    pub spatial_gate: Var,
}

/// Full encoder: both branches, both gates, cross fusion.
pub fn encoder_forward(
    tape: &mut Tape,
    bind: &Binding,
    p: &EncoderParams,
    cfg: &EncoderConfig,
    x: Var,
) -> Result<EncoderOutput> {
    let (w, m) = tape.val(x).shape();
    cfg.validate(w, m)?;
    if !tape.val(x).all_finite() {
        return Err(HstError::Validation("encoder input contains non-finite values".into()));
    }
    let ht = encode_temporal(tape, bind, p, cfg, x);
    let hs = encode_spatial(tape, bind, p, cfg, x);
    let at = excite(tape, bind, &p.se_temporal, ht);
    let as_ = if cfg.literal_spatial_gate {
        // Literal-text reading: squeeze the temporal branch over time.
        let col_means = tape.mean_rows(ht); // [1 x M]
        let s = tape.transpose(col_means); // [M x 1]
        excite_from_squeeze(tape, bind, &p.se_spatial, s)
    } else {
        excite(tape, bind, &p.se_spatial, hs)
    };
    let fused = cross_fuse(tape, ht, hs, at, as_)?;
    Ok(EncoderOutput { fused, temporal_gate: at, spatial_gate: as_ })
}
