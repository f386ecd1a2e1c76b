//! Sequence backbones producing transition states `h_t` and output states
//! `o_t`.
//!
//! Four interchangeable backends (plain RNN, LSTM, GRU, and a selective
//! state-space scan with input-dependent step sizes and projections) plus a
//! two-layer state head that reads `(h_{t-1}, x_t)`. The backbone projects
//! the fused encoder output to the hidden width, stacks `layers` recurrent
//! layers, and emits both sequences.

use serde::{Deserialize, Serialize};

use crate::autodiff::{zoh_phi, Tape, Var};
use crate::error::{HstError, Result};
use crate::linalg::Mat;
use crate::params::{Binding, ParamGroup, ParamRef, ParamStore};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SsmBackend {
    Rnn,
    Lstm,
    Gru,
    SelectiveSsm,
}

impl SsmBackend {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rnn" => Ok(SsmBackend::Rnn),
            "lstm" => Ok(SsmBackend::Lstm),
            "gru" => Ok(SsmBackend::Gru),
            "mamba" | "selective" | "selective-ssm" | "ssm" => Ok(SsmBackend::SelectiveSsm),
            other => Err(HstError::Config(format!("unknown backend `{other}`"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SsmBackend::Rnn => "rnn",
            SsmBackend::Lstm => "lstm",
            SsmBackend::Gru => "gru",
            SsmBackend::SelectiveSsm => "selective",
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SsmConfig {
    pub backend: SsmBackend,
    pub hidden: usize,
    pub layers: usize,
    /// State expansion per channel (selective backend only).
    pub state_dim: usize,
    /// Reproduce the literal two-affine head with no nonlinearity between.
    pub linear_state_head: bool,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            backend: SsmBackend::SelectiveSsm,
            hidden: 256,
            layers: 2,
            state_dim: 16,
            linear_state_head: false,
        }
    }
}

impl SsmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.layers == 0 {
            return Err(HstError::Config("hidden and layers must be >= 1".into()));
        }
        if self.backend == SsmBackend::SelectiveSsm && self.state_dim == 0 {
            return Err(HstError::Config("state_dim must be >= 1 for the selective backend".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DenseCell {
    /// `[din x G*D]` input weights, `[D x G*D]` recurrent weights, `[1 x G*D]`
    /// bias; `G` is the gate multiplier (1 RNN, 3 GRU, 4 LSTM).
    pub wx: ParamRef,
    pub wh: ParamRef,
    pub b: ParamRef,
}

#[derive(Clone, Debug)]
pub struct SelectiveCell {
    /// `[D x N]` log-magnitudes; the evolution diagonal is `-exp(a_log)`.
    pub a_log: ParamRef,
    pub w_delta: ParamRef,
    pub b_delta: ParamRef,
    pub w_b: ParamRef,
    pub w_c: ParamRef,
    pub d_skip: ParamRef,
    /// Pre-scan layer norm; keeps the integrator's input at unit scale.
    pub ln_g: ParamRef,
    pub ln_b: ParamRef,
    /// Output projection back onto the residual stream.
    pub w_out: ParamRef,
}

#[derive(Clone, Debug)]
pub enum LayerParams {
    Rnn(DenseCell),
    Lstm(DenseCell),
    Gru(DenseCell),
    Selective(SelectiveCell),
}

#[derive(Clone, Debug)]
pub struct StateHeadParams {
    pub w1: ParamRef,
    pub b1: ParamRef,
    pub w2: ParamRef,
    pub b2: ParamRef,
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub in_w: ParamRef,
    pub in_b: ParamRef,
    pub layers: Vec<LayerParams>,
    pub head: StateHeadParams,
}

fn dense_cell(
    store: &mut ParamStore,
    prefix: &str,
    din: usize,
    d: usize,
    gates: usize,
    rng: &mut Rng,
) -> DenseCell {
    let sx = 1.0 / (din as f64).sqrt();
    let sh = 1.0 / (d as f64).sqrt();
    DenseCell {
        wx: store.add(ParamGroup::Backbone, format!("{prefix}.wx"), rng.normal_mat(din, gates * d, sx)),
        wh: store.add(ParamGroup::Backbone, format!("{prefix}.wh"), rng.normal_mat(d, gates * d, sh)),
        b: store.add(ParamGroup::Backbone, format!("{prefix}.b"), Mat::zeros(1, gates * d)),
    }
}

fn selective_cell(
    store: &mut ParamStore,
    prefix: &str,
    din: usize,
    d: usize,
    n: usize,
    rng: &mut Rng,
) -> SelectiveCell {
    // Evolution magnitudes log-spaced in [1e-3, 1] per state index, shared
    // across channels; step sizes log-spaced in [1e-3, 1e-1] per channel via
    // the softplus bias.
    let a_log = Mat::from_fn(d, n, |_, j| {
        let frac = if n == 1 { 1.0 } else { j as f64 / (n - 1) as f64 };
        let mag = 10f64.powf(-3.0 + 3.0 * frac);
        mag.ln()
    });
    let b_delta = Mat::from_fn(1, d, |_, i| {
        let frac = if d == 1 { 0.5 } else { i as f64 / (d - 1) as f64 };
        let dt = 10f64.powf(-3.0 + 2.0 * frac);
        // softplus^-1(dt)
        (dt.exp() - 1.0).ln()
    });
    let s = 1.0 / (din as f64).sqrt();
    SelectiveCell {
        a_log: store.add(ParamGroup::Backbone, format!("{prefix}.a_log"), a_log),
        w_delta: store.add(
            ParamGroup::Backbone,
            format!("{prefix}.w_delta"),
            rng.normal_mat(din, d, s * 0.1),
        ),
        b_delta: store.add(ParamGroup::Backbone, format!("{prefix}.b_delta"), b_delta),
        w_b: store.add(ParamGroup::Backbone, format!("{prefix}.w_b"), rng.normal_mat(din, n, s)),
        w_c: store.add(ParamGroup::Backbone, format!("{prefix}.w_c"), rng.normal_mat(din, n, s)),
        d_skip: store.add(ParamGroup::Backbone, format!("{prefix}.d_skip"), Mat::from_elem(1, d, 1.0)),
        ln_g: store.add(ParamGroup::Backbone, format!("{prefix}.ln_g"), Mat::from_elem(1, din, 1.0)),
        ln_b: store.add(ParamGroup::Backbone, format!("{prefix}.ln_b"), Mat::zeros(1, din)),
        // Small output scale so the residual stream dominates at init; the
        // scan's worst-case integrator gain over a window is large.
        w_out: store.add(
            ParamGroup::Backbone,
            format!("{prefix}.w_out"),
            rng.normal_mat(d, d, 0.1 / (d as f64).sqrt()),
        ),
    }
}

impl BackboneParams {
    /// `m` is the fused-encoder width feeding the backbone.
    pub fn init(store: &mut ParamStore, cfg: &SsmConfig, m: usize, rng: &mut Rng) -> Self {
        let d = cfg.hidden;
        let sm = 1.0 / (m as f64).sqrt();
        let in_w = store.add(ParamGroup::Backbone, "backbone.in_w", rng.normal_mat(m, d, sm));
        let in_b = store.add(ParamGroup::Backbone, "backbone.in_b", Mat::zeros(1, d));
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let prefix = format!("backbone.layer{l}");
            let layer = match cfg.backend {
                SsmBackend::Rnn => LayerParams::Rnn(dense_cell(store, &prefix, d, d, 1, rng)),
                SsmBackend::Lstm => LayerParams::Lstm(dense_cell(store, &prefix, d, d, 4, rng)),
                SsmBackend::Gru => LayerParams::Gru(dense_cell(store, &prefix, d, d, 3, rng)),
                SsmBackend::SelectiveSsm => {
                    LayerParams::Selective(selective_cell(store, &prefix, d, d, cfg.state_dim, rng))
                }
            };
            layers.push(layer);
        }
        let concat = d + m;
        let sc = 1.0 / (concat as f64).sqrt();
        let sd = 1.0 / (d as f64).sqrt();
        let head = StateHeadParams {
            w1: store.add(ParamGroup::Backbone, "backbone.head.w1", rng.normal_mat(concat, d, sc)),
            b1: store.add(ParamGroup::Backbone, "backbone.head.b1", Mat::zeros(1, d)),
            w2: store.add(ParamGroup::Backbone, "backbone.head.w2", rng.normal_mat(d, d, sd)),
            b2: store.add(ParamGroup::Backbone, "backbone.head.b2", Mat::zeros(1, d)),
        };
        BackboneParams { in_w, in_b, layers, head }
    }
}

// ---------------------------------------------------------------------------
// Step operations (tape)
// ---------------------------------------------------------------------------

/// `h_t = tanh(x W_x + h_{t-1} W_h + b)`.
pub fn rnn_step(tape: &mut Tape, wx: Var, wh: Var, b: Var, h_prev: Var, x: Var) -> Var {
    let xa = tape.matmul(x, wx);
    let ha = tape.matmul(h_prev, wh);
    let s = tape.add(xa, ha);
    let s = tape.add_bias(s, b);
    tape.tanh(s)
}

/// Standard LSTM cell; gate order `i, f, g, o` along the width.
pub fn lstm_step(
    tape: &mut Tape,
    wx: Var,
    wh: Var,
    b: Var,
    h_prev: Var,
    c_prev: Var,
    x: Var,
) -> (Var, Var) {
    let d = tape.val(h_prev).cols();
    let xa = tape.matmul(x, wx);
    let ha = tape.matmul(h_prev, wh);
    let s = tape.add(xa, ha);
    let s = tape.add_bias(s, b);
    let i_pre = tape.slice_cols(s, 0, d);
    let f_pre = tape.slice_cols(s, d, d);
    let g_pre = tape.slice_cols(s, 2 * d, d);
    let o_pre = tape.slice_cols(s, 3 * d, d);
    let i = tape.sigmoid(i_pre);
    let f = tape.sigmoid(f_pre);
    let g = tape.tanh(g_pre);
    let o = tape.sigmoid(o_pre);
    let fc = tape.mul(f, c_prev);
    let ig = tape.mul(i, g);
    let c = tape.add(fc, ig);
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc);
    (h, c)
}

/// Standard GRU cell; gate order `r, z, n` along the width.
/// `h_t = (1 - z) .* n + z .* h_{t-1}`, `n = tanh(x W_n + r .* (h W_hn) + b_n)`.
pub fn gru_step(tape: &mut Tape, wx: Var, wh: Var, b: Var, h_prev: Var, x: Var) -> Var {
    let d = tape.val(h_prev).cols();
    let xa = tape.matmul(x, wx);
    let xa = tape.add_bias(xa, b);
    let ha = tape.matmul(h_prev, wh);
    let r_pre = {
        let xr = tape.slice_cols(xa, 0, d);
        let hr = tape.slice_cols(ha, 0, d);
        tape.add(xr, hr)
    };
    let z_pre = {
        let xz = tape.slice_cols(xa, d, d);
        let hz = tape.slice_cols(ha, d, d);
        tape.add(xz, hz)
    };
    let r = tape.sigmoid(r_pre);
    let z = tape.sigmoid(z_pre);
    let n_pre = {
        let xn = tape.slice_cols(xa, 2 * d, d);
        let hn = tape.slice_cols(ha, 2 * d, d);
        let rhn = tape.mul(r, hn);
        tape.add(xn, rhn)
    };
    let n = tape.tanh(n_pre);
    let zn = {
        let one = tape.constant(Mat::from_elem(1, d, 1.0));
        let omz = tape.sub(one, z);
        tape.mul(omz, n)
    };
    let zh = tape.mul(z, h_prev);
    tape.add(zn, zh)
}

/// Two-layer state head on `(h_{t-1} || x_t)`; ReLU between the affine maps
/// unless `linear` is set.
pub fn state_head_step(
    tape: &mut Tape,
    p_w1: Var,
    p_b1: Var,
    p_w2: Var,
    p_b2: Var,
    h_prev: Var,
    x: Var,
    linear: bool,
) -> Var {
    let cat = tape.concat_cols(&[h_prev, x]);
    let a = tape.linear(cat, p_w1, p_b1);
    let a = if linear { a } else { tape.relu(a) };
    tape.linear(a, p_w2, p_b2)
}

// ---------------------------------------------------------------------------
// Zero-order hold discretization (plain f64 path)
// ---------------------------------------------------------------------------

/// Discretize a diagonal continuous system: `abar_i = exp(d_i a_i)`,
/// `bbar[i, j] = phi(d_i a_i) * d_i * b[i, j]` with
/// `phi(x) = (e^x - 1)/x` (series `1 + x/2` below `1e-6`).
pub fn zoh_discretize(a_diag: &[f64], b: &Mat, delta: &[f64]) -> Result<(Vec<f64>, Mat)> {
    if a_diag.len() != b.rows() || delta.len() != a_diag.len() {
        return Err(HstError::Shape(format!(
            "zoh: |A| = {}, B rows = {}, |delta| = {}",
            a_diag.len(),
            b.rows(),
            delta.len()
        )));
    }
    if delta.iter().any(|&d| d <= 0.0) {
        return Err(HstError::Validation("zoh: all step sizes must be positive".into()));
    }
    let abar: Vec<f64> = a_diag.iter().zip(delta).map(|(a, d)| (a * d).exp()).collect();
    let mut bbar = b.clone();
    for i in 0..b.rows() {
        let x = a_diag[i] * delta[i];
        let f = zoh_phi(x) * delta[i];
        for v in bbar.row_mut(i) {
            *v *= f;
        }
    }
    Ok((abar, bbar))
}

// ---------------------------------------------------------------------------
// Selective scan
// ---------------------------------------------------------------------------

pub struct SelectiveVars {
    pub a_log: Var,
    pub w_delta: Var,
    pub b_delta: Var,
    pub w_b: Var,
    pub w_c: Var,
    pub d_skip: Var,
}

impl SelectiveCell {
    pub fn bind(&self, bind: &Binding) -> SelectiveVars {
        SelectiveVars {
            a_log: bind.var(self.a_log),
            w_delta: bind.var(self.w_delta),
            b_delta: bind.var(self.b_delta),
            w_b: bind.var(self.w_b),
            w_c: bind.var(self.w_c),
            d_skip: bind.var(self.d_skip),
        }
    }
}

/// Input-dependent selective scan over a `W x din` sequence, producing
/// `W x D` channel outputs. Per step: `delta_t = softplus(x_t W_d + b_d)`,
/// `B_t = x_t W_b`, `C_t = x_t W_c`, states update with the ZOH-discretized
/// diagonal system, and `y_t = C_t`-weighted state readout plus a learned
/// skip. `h_0 = 0`.
pub fn selective_scan(tape: &mut Tape, v: &SelectiveVars, x_seq: Var, d: usize, n: usize) -> Var {
    let w = tape.val(x_seq).rows();
    // A = -exp(a_log) keeps every diagonal entry strictly negative.
    let a = {
        let e = tape.exp(v.a_log);
        tape.scale(e, -1.0)
    };
    let mut h_prev = tape.constant(Mat::zeros(d, n));
    let mut y_rows = Vec::with_capacity(w);
    for t in 0..w {
        let x_t = tape.row(x_seq, t);
        let delta = {
            let pre = tape.linear(x_t, v.w_delta, v.b_delta);
            tape.softplus(pre)
        }; // [1 x D]
        let b_t = tape.matmul(x_t, v.w_b); // [1 x N]
        let c_t = tape.matmul(x_t, v.w_c); // [1 x N]
        let delta_col = tape.transpose(delta); // [D x 1]
        let da = tape.mul_col_vec(a, delta_col); // [D x N]
        let abar = tape.exp(da);
        let phi = tape.zoh_phi(da);
        let db = tape.matmul(delta_col, b_t); // [D x N] outer product
        let bbar = tape.mul(phi, db);
        let u_col = tape.transpose(x_t); // channel inputs [D x 1] (din == D)
        let bu = tape.mul_col_vec(bbar, u_col);
        let ah = tape.mul(abar, h_prev);
        let h = tape.add(ah, bu); // [D x N]
        let c_col = tape.transpose(c_t); // [N x 1]
        let y_col = tape.matmul(h, c_col); // [D x 1]
        let y = tape.transpose(y_col); // [1 x D]
        let skip = tape.mul(x_t, v.d_skip);
        let y = tape.add(y, skip);
        y_rows.push(y);
        h_prev = h;
    }
    tape.stack_rows(&y_rows)
}

// ---------------------------------------------------------------------------
// Backbone
// ---------------------------------------------------------------------------

/// Selective layer as a normalized residual block:
/// `out = u + scan(LN(u)) @ w_out`. The raw scan keeps the ZOH recurrence;
/// the wrapper keeps stacked layers at unit scale.
fn selective_layer_forward(
    tape: &mut Tape,
    bind: &Binding,
    cell: &SelectiveCell,
    x_seq: Var,
    d: usize,
    n: usize,
) -> Var {
    let normed = tape.layer_norm(x_seq, bind.var(cell.ln_g), bind.var(cell.ln_b), 1e-5);
    let vars = cell.bind(bind);
    let y = selective_scan(tape, &vars, normed, d, n);
    let y = tape.matmul(y, bind.var(cell.w_out));
    tape.add(x_seq, y)
}

fn dense_layer_forward(
    tape: &mut Tape,
    bind: &Binding,
    cell: &DenseCell,
    kind: &SsmBackend,
    x_seq: Var,
    d: usize,
) -> Var {
    let w = tape.val(x_seq).rows();
    let wx = bind.var(cell.wx);
    let wh = bind.var(cell.wh);
    let b = bind.var(cell.b);
    let mut h = tape.constant(Mat::zeros(1, d));
    let mut c = tape.constant(Mat::zeros(1, d));
    let mut rows = Vec::with_capacity(w);
    for t in 0..w {
        let x_t = tape.row(x_seq, t);
        h = match kind {
            SsmBackend::Rnn => rnn_step(tape, wx, wh, b, h, x_t),
            SsmBackend::Gru => gru_step(tape, wx, wh, b, h, x_t),
            SsmBackend::Lstm => {
                let (nh, nc) = lstm_step(tape, wx, wh, b, h, c, x_t);
                c = nc;
                nh
            }
            SsmBackend::SelectiveSsm => unreachable!("selective handled separately"),
        };
        rows.push(h);
    }
    tape.stack_rows(&rows)
}

/// Run the stacked backbone over fused features `hf` (`W x M`), returning
/// `(h_seq, o_seq)`, both `W x D`. `o_t` reads the previous step's hidden
/// state and the current fused input: `o_t = head(h_{t-1} || hf_t)`.
pub fn run_backbone(
    tape: &mut Tape,
    bind: &Binding,
    p: &BackboneParams,
    cfg: &SsmConfig,
    hf: Var,
) -> Result<(Var, Var)> {
    cfg.validate()?;
    let d = cfg.hidden;
    let in_w = bind.var(p.in_w);
    let in_b = bind.var(p.in_b);
    let mut seq = tape.linear(hf, in_w, in_b); // [W x D]
    for layer in &p.layers {
        seq = match layer {
            LayerParams::Rnn(c) => dense_layer_forward(tape, bind, c, &SsmBackend::Rnn, seq, d),
            LayerParams::Lstm(c) => dense_layer_forward(tape, bind, c, &SsmBackend::Lstm, seq, d),
            LayerParams::Gru(c) => dense_layer_forward(tape, bind, c, &SsmBackend::Gru, seq, d),
            LayerParams::Selective(c) => {
                selective_layer_forward(tape, bind, c, seq, d, cfg.state_dim)
            }
        };
    }
    let h_seq = seq;
    let w = tape.val(hf).rows();
    let (w1, b1, w2, b2) =
        (bind.var(p.head.w1), bind.var(p.head.b1), bind.var(p.head.w2), bind.var(p.head.b2));
    let zero = tape.constant(Mat::zeros(1, d));
    let mut o_rows = Vec::with_capacity(w);
    for t in 0..w {
        let h_prev = if t == 0 { zero } else { tape.row(h_seq, t - 1) };
        let x_t = tape.row(hf, t);
        o_rows.push(state_head_step(tape, w1, b1, w2, b2, h_prev, x_t, cfg.linear_state_head));
    }
    let o_seq = tape.stack_rows(&o_rows);
    Ok((h_seq, o_seq))
}
