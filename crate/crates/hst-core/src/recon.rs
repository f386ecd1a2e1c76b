//! Transformer decoder over quantized embeddings and the training objective.
//!
//! The decoder consumes per-step concatenations of the quantized state and
//! transition vectors (`W x 2D`), applies learned positions and pre-norm
//! blocks, and maps back to the input width. The objective combines mean
//! reconstruction error with the four codebook terms; stop-gradients route
//! codebook-term gradients into code vectors only, never into the encoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{HstError, Result};
use crate::linalg::Mat;
use crate::params::{Binding, ParamGroup, ParamRef, ParamStore};
use crate::rng::Rng;
use crate::stencoder::{transformer_block, BlockParams};

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    /// Reconstruction weight.
    pub alpha: f64,
    /// First-level codebook terms.
    pub beta: f64,
    /// Residual codebook terms.
    pub gamma_loss: f64,
    /// Optional commitment pull of encoder outputs toward their codes
    /// (off by default).
    pub commitment: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 1.0, beta: 0.1, gamma_loss: 0.1, commitment: 0.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha < 0.0 || self.beta < 0.0 || self.gamma_loss < 0.0 || self.commitment < 0.0 {
            return Err(HstError::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub state_cb: f64,
    pub state_res_cb: f64,
    pub transition_cb: f64,
    pub transition_res_cb: f64,
    pub commitment: f64,
}

impl LossBreakdown {
    /// Recombine the parts under the given weights; must match `total`.
    pub fn recombined(&self, w: &LossWeights) -> f64 {
        w.alpha * self.recon
            + w.beta * (self.state_cb + self.transition_cb)
            + w.gamma_loss * (self.state_res_cb + self.transition_res_cb)
            + w.commitment * self.commitment
    }
}

// ---------------------------------------------------------------------------
// Decoder
// ---------------------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct DecoderParams {
    /// Learned positions `[W x 2D]` (zero-initialized).
    pub pos: ParamRef,
    pub blocks: Vec<BlockParams>,
    pub out_w: ParamRef,
    pub out_b: ParamRef,
}

impl DecoderParams {
    pub fn init(
        store: &mut ParamStore,
        w: usize,
        in_width: usize,
        out_width: usize,
        layers: usize,
        rng: &mut Rng,
    ) -> Self {
        let pos = store.add(ParamGroup::Decoder, "decoder.pos", Mat::zeros(w, in_width));
        let blocks = (0..layers)
            .map(|l| {
                BlockParams::init(store, ParamGroup::Decoder, &format!("decoder.block{l}"), in_width, rng)
            })
            .collect();
        let s = 1.0 / (in_width as f64).sqrt();
        DecoderParams {
            pos,
            blocks,
            out_w: store.add(ParamGroup::Decoder, "decoder.out_w", rng.normal_mat(in_width, out_width, s)),
            out_b: store.add(ParamGroup::Decoder, "decoder.out_b", Mat::zeros(1, out_width)),
        }
    }
}

/// Decode `W x 2D` quantized embeddings to a `W x M` reconstruction.
pub fn decode(
    tape: &mut Tape,
    bind: &Binding,
    p: &DecoderParams,
    dec_in: Var,
    heads: usize,
) -> Result<Var> {
    let (w, width) = tape.val(dec_in).shape();
    let pos_shape = tape.val(bind.var(p.pos)).shape();
    if pos_shape != (w, width) {
        return Err(HstError::Shape(format!(
            "decoder expects {}x{} input, got {w}x{width}",
            pos_shape.0, pos_shape.1
        )));
    }
    if width % heads != 0 {
        return Err(HstError::Config(format!(
            "decoder width {width} must be divisible by heads {heads}"
        )));
    }
    let mut h = tape.add(dec_in, bind.var(p.pos));
    for block in &p.blocks {
        h = transformer_block(tape, bind, block, h, heads);
    }
    let out = tape.linear(h, bind.var(p.out_w), bind.var(p.out_b));
    Ok(out)
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// Tape nodes for every loss component plus the weighted total.
pub struct LossNodes {
    pub total: Var,
    pub recon: Var,
    pub state_cb: Var,
    pub state_res_cb: Var,
    pub transition_cb: Var,
    pub transition_res_cb: Var,
    pub commitment: Option<Var>,
}

impl LossNodes {
    pub fn breakdown(&self, tape: &Tape) -> LossBreakdown {
        LossBreakdown {
            total: tape.val(self.total).get(0, 0),
            recon: tape.val(self.recon).get(0, 0),
            state_cb: tape.val(self.state_cb).get(0, 0),
            state_res_cb: tape.val(self.state_res_cb).get(0, 0),
            transition_cb: tape.val(self.transition_cb).get(0, 0),
            transition_res_cb: tape.val(self.transition_res_cb).get(0, 0),
            commitment: self.commitment.map(|c| tape.val(c).get(0, 0)).unwrap_or(0.0),
        }
    }
}

/// Mean squared error over all entries.
fn mse(tape: &mut Tape, a: Var, b: Var) -> Var {
    let d = tape.sub(a, b);
    let sq = tape.sq_frobenius(d);
    let n = tape.val(a).len() as f64;
    tape.scale(sq, 1.0 / n)
}

/// Per-step squared-norm average: `(1/W) sum_t ||row_t||^2`.
fn row_sqnorm_mean(tape: &mut Tape, a: Var) -> Var {
    let sq = tape.sq_frobenius(a);
    let w = tape.val(a).rows() as f64;
    tape.scale(sq, 1.0 / w)
}

/// Assemble the objective.
///
/// * `recon`: mean squared error between `x` and `x_hat`.
/// * First-level terms pull code vectors toward frozen encoder outputs:
///   `(1/W) sum_t ||sg(o_t) - o_hat_t||^2` (and the transition analog).
/// * Residual terms pull residual codes toward frozen first-level errors.
/// * Optional commitment term pulls encoder outputs toward frozen codes.
///
/// `o_hat`/`o_res` must be gather nodes over the codebook parameters so the
/// codebook gradients flow; everything on the encoder side of a `sg(..)` is
/// detached here.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    o_seq: Var,
    o_hat: Var,
    o_res: Var,
    h_seq: Var,
    h_hat: Var,
    h_res: Var,
    weights: &LossWeights,
) -> Result<LossNodes> {
    weights.validate()?;
    if tape.val(x).shape() != tape.val(x_hat).shape() {
        return Err(HstError::Shape("loss: x and x_hat shapes differ".into()));
    }
    let recon = mse(tape, x, x_hat);

    // beta * || sg(o) - o_hat ||^2 / W
    let state_cb = {
        let target = tape.detach(o_seq);
        let d = tape.sub(target, o_hat);
        row_sqnorm_mean(tape, d)
    };
    let transition_cb = {
        let target = tape.detach(h_seq);
        let d = tape.sub(target, h_hat);
        row_sqnorm_mean(tape, d)
    };
    // gamma * || sg(o - o_hat) - o_res ||^2 / W
    let state_res_cb = {
        let r = tape.sub(o_seq, o_hat);
        let target = tape.detach(r);
        let d = tape.sub(target, o_res);
        row_sqnorm_mean(tape, d)
    };
    let transition_res_cb = {
        let r = tape.sub(h_seq, h_hat);
        let target = tape.detach(r);
        let d = tape.sub(target, h_res);
        row_sqnorm_mean(tape, d)
    };

    let mut total = tape.scale(recon, weights.alpha);
    for (term, w) in [
        (state_cb, weights.beta),
        (transition_cb, weights.beta),
        (state_res_cb, weights.gamma_loss),
        (transition_res_cb, weights.gamma_loss),
    ] {
        let scaled = tape.scale(term, w);
        total = tape.add(total, scaled);
    }

    let commitment = if weights.commitment > 0.0 {
        // || o - sg(o_hat + o_res) ||^2 / W, both streams.
        let qs = tape.add(o_hat, o_res);
        let qs = tape.detach(qs);
        let ds = tape.sub(o_seq, qs);
        let cs = row_sqnorm_mean(tape, ds);
        let qt = tape.add(h_hat, h_res);
        let qt = tape.detach(qt);
        let dt = tape.sub(h_seq, qt);
        let ct = row_sqnorm_mean(tape, dt);
        let c = tape.add(cs, ct);
        let scaled = tape.scale(c, weights.commitment);
        total = tape.add(total, scaled);
        Some(c)
    } else {
        None
    };

    Ok(LossNodes {
        total,
        recon,
        state_cb,
        state_res_cb,
        transition_cb,
        transition_res_cb,
        commitment,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::finite_diff_check;

    fn decoder_setup(
        w: usize,
        in_width: usize,
        out_width: usize,
        layers: usize,
        seed: u64,
    ) -> (ParamStore, DecoderParams) {
        let mut store = ParamStore::new();
        let mut rng = Rng::seed_from_u64(seed);
        let p = DecoderParams::init(&mut store, w, in_width, out_width, layers, &mut rng);
        (store, p)
    }

    #[test]
    fn bias_only_decoder_outputs_constant() {
        let (mut store, p) = decoder_setup(5, 4, 3, 2, 1);
        for b in &p.blocks {
            store.set(b.wo, Mat::zeros_like(store.get(b.wo)));
            store.set(b.ff2, Mat::zeros_like(store.get(b.ff2)));
        }
        store.set(p.out_w, Mat::zeros_like(store.get(p.out_w)));
        store.set(p.out_b, Mat::from_vec(1, 3, vec![2.5, -1.0, 0.25]));
        let mut tape = Tape::new();
        let bind = Binding::bind(&store, &mut tape);
        let z = tape.constant(Mat::zeros(5, 4));
        let out = decode(&mut tape, &bind, &p, z, 2).unwrap();
        for i in 0..5 {
            assert_eq!(tape.val(out).row(i), &[2.5, -1.0, 0.25]);
        }
    }

    #[test]
    fn decoder_shape_contract_and_determinism() {
        let (store, p) = decoder_setup(10, 8, 16, 2, 2);
        let mut rng = Rng::seed_from_u64(3);
        let x = rng.normal_mat(10, 8, 1.0);
        let run = || {
            let mut tape = Tape::new();
            let bind = Binding::bind(&store, &mut tape);
            let xv = tape.constant(x.clone());
            let out = decode(&mut tape, &bind, &p, xv, 4).unwrap();
            tape.val(out).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.shape(), (10, 16));
        assert_eq!(a, b, "eval-mode decode must be bit-stable");
    }

    #[test]
    fn decoder_rejects_width_mismatch() {
        let (store, p) = decoder_setup(5, 4, 3, 1, 4);
        let mut tape = Tape::new();
        let bind = Binding::bind(&store, &mut tape);
        let bad = tape.constant(Mat::zeros(5, 6));
        assert!(decode(&mut tape, &bind, &p, bad, 2).is_err());
    }

    fn loss_inputs(seed: u64) -> Vec<Mat> {
        let mut rng = Rng::seed_from_u64(seed);
        vec![
            rng.normal_mat(4, 3, 1.0), // x
            rng.normal_mat(4, 3, 1.0), // x_hat
            rng.normal_mat(4, 5, 1.0), // o_seq
            rng.normal_mat(4, 5, 1.0), // o_hat
            rng.normal_mat(4, 5, 0.3), // o_res
            rng.normal_mat(4, 5, 1.0), // h_seq
            rng.normal_mat(4, 5, 1.0), // h_hat
            rng.normal_mat(4, 5, 0.3), // h_res
        ]
    }

    fn build_loss(tape: &mut Tape, vals: &[Mat], weights: &LossWeights) -> (Vec<Var>, LossNodes) {
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let nodes = total_loss(
            tape, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6], vars[7], weights,
        )
        .unwrap();
        (vars, nodes)
    }

    #[test]
    fn perfect_fit_gives_zero_loss() {
        let mut rng = Rng::seed_from_u64(6);
        let x = rng.normal_mat(4, 3, 1.0);
        let o = rng.normal_mat(4, 5, 1.0);
        let h = rng.normal_mat(4, 5, 1.0);
        let zeros = Mat::zeros(4, 5);
        let vals =
            vec![x.clone(), x, o.clone(), o, zeros.clone(), h.clone(), h, zeros];
        let mut tape = Tape::new();
        let (_, nodes) = build_loss(&mut tape, &vals, &LossWeights::default());
        let b = nodes.breakdown(&tape);
        assert!(b.total.abs() < 1e-12, "{b:?}");
    }

    #[test]
    fn mse_arithmetic_example() {
        // alpha = 1, all else 0; every residual entry 0.1 -> total = 0.01.
        let w = LossWeights { alpha: 1.0, beta: 0.0, gamma_loss: 0.0, commitment: 0.0 };
        let mut vals = loss_inputs(7);
        vals[1] = vals[0].map(|v| v - 0.1);
        let mut tape = Tape::new();
        let (_, nodes) = build_loss(&mut tape, &vals, &w);
        let b = nodes.breakdown(&tape);
        assert!((b.total - 0.01).abs() < 1e-12, "{}", b.total);
    }

    #[test]
    fn loss_matches_term_by_term_oracle() {
        let vals = loss_inputs(8);
        let weights = LossWeights { alpha: 0.7, beta: 0.2, gamma_loss: 0.15, commitment: 0.05 };
        let mut tape = Tape::new();
        let (_, nodes) = build_loss(&mut tape, &vals, &weights);
        let b = nodes.breakdown(&tape);

        // Independent recomputation with plain loops.
        let frob = |a: &Mat, bm: &Mat| -> f64 {
            a.as_slice().iter().zip(bm.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        let recon = frob(&vals[0], &vals[1]) / 12.0;
        let state_cb = frob(&vals[2], &vals[3]) / 4.0;
        let trans_cb = frob(&vals[5], &vals[6]) / 4.0;
        let resid = |seq: &Mat, hat: &Mat, res: &Mat| -> f64 {
            let mut s = 0.0;
            for i in 0..seq.len() {
                let r = seq.as_slice()[i] - hat.as_slice()[i] - res.as_slice()[i];
                s += r * r;
            }
            s / 4.0
        };
        let state_res = resid(&vals[2], &vals[3], &vals[4]);
        let trans_res = resid(&vals[5], &vals[6], &vals[7]);
        let commit = {
            let c = |seq: &Mat, hat: &Mat, res: &Mat| -> f64 {
                let mut s = 0.0;
                for i in 0..seq.len() {
                    let d = seq.as_slice()[i] - hat.as_slice()[i] - res.as_slice()[i];
                    s += d * d;
                }
                s / 4.0
            };
            c(&vals[2], &vals[3], &vals[4]) + c(&vals[5], &vals[6], &vals[7])
        };
        assert!((b.recon - recon).abs() < 1e-12);
        assert!((b.state_cb - state_cb).abs() < 1e-12);
        assert!((b.transition_cb - trans_cb).abs() < 1e-12);
        assert!((b.state_res_cb - state_res).abs() < 1e-12);
        assert!((b.transition_res_cb - trans_res).abs() < 1e-12);
        assert!((b.commitment - commit).abs() < 1e-12);
        let expect = 0.7 * recon + 0.2 * (state_cb + trans_cb) + 0.15 * (state_res + trans_res)
            + 0.05 * commit;
        assert!((b.total - expect).abs() < 1e-9, "recombination identity");
        assert!((b.recombined(&weights) - b.total).abs() < 1e-9);
    }

    #[test]
    fn negative_weights_rejected() {
        let vals = loss_inputs(9);
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.leaf(v.clone())).collect();
        let w = LossWeights { alpha: -1.0, ..Default::default() };
        assert!(total_loss(
            &mut tape, vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6], vars[7], &w
        )
        .is_err());
    }

    #[test]
    fn codebook_terms_leak_no_gradient_into_sequences() {
        // With alpha = 0 the total is pure codebook loss; gradients must hit
        // only o_hat / o_res / h_hat / h_res, never o_seq / h_seq.
        let vals = loss_inputs(10);
        let w = LossWeights { alpha: 0.0, beta: 0.3, gamma_loss: 0.2, commitment: 0.0 };
        let mut tape = Tape::new();
        let (vars, nodes) = build_loss(&mut tape, &vals, &w);
        let grads = tape.backward(nodes.total);
        assert!(grads.get(vars[2]).is_none(), "o_seq must receive no codebook gradient");
        assert!(grads.get(vars[5]).is_none(), "h_seq must receive no codebook gradient");
        assert!(grads.get(vars[3]).is_some(), "o_hat must be trained");
        assert!(grads.get(vars[4]).is_some(), "o_res must be trained");
        assert!(grads.get(vars[6]).is_some());
        assert!(grads.get(vars[7]).is_some());
    }

    #[test]
    fn loss_gradients_check() {
        // Finite differences would see through sg(..), so the FD closure
        // freezes every stop-gradient target at its base value (the
        // algebraic-substitution oracle); the analytic gradients of the real
        // loss must equal the true gradients of that frozen function.
        let vals = loss_inputs(11);
        let weights = LossWeights { alpha: 0.9, beta: 0.25, gamma_loss: 0.1, commitment: 0.02 };
        let mut tape = Tape::new();
        let (vars, nodes) = build_loss(&mut tape, &vals, &weights);
        let grads = tape.backward(nodes.total);
        let analytic: Vec<Mat> = vars
            .iter()
            .zip(&vals)
            .map(|(&v, p)| grads.get(v).cloned().unwrap_or_else(|| Mat::zeros(p.rows(), p.cols())))
            .collect();

        // Frozen sg targets from the base point.
        let sub = |a: &Mat, b: &Mat| {
            let mut d = a.clone();
            d.add_scaled(b, -1.0);
            d
        };
        let t_state = vals[2].clone();
        let t_state_res = sub(&vals[2], &vals[3]);
        let t_trans = vals[5].clone();
        let t_trans_res = sub(&vals[5], &vals[6]);
        let c_state = {
            let mut c = vals[3].clone();
            c.add_scaled(&vals[4], 1.0);
            c
        };
        let c_trans = {
            let mut c = vals[6].clone();
            c.add_scaled(&vals[7], 1.0);
            c
        };
        let frob = |a: &Mat, b: &Mat| -> f64 {
            a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| (x - y) * (x - y)).sum()
        };
        let w_rows = 4.0;
        let frozen = move |ps: &[Mat]| -> f64 {
            let recon = frob(&ps[0], &ps[1]) / 12.0;
            let state_cb = frob(&t_state, &ps[3]) / w_rows;
            let trans_cb = frob(&t_trans, &ps[6]) / w_rows;
            let state_res = frob(&t_state_res, &ps[4]) / w_rows;
            let trans_res = frob(&t_trans_res, &ps[7]) / w_rows;
            let commit = frob(&ps[2], &c_state) / w_rows + frob(&ps[5], &c_trans) / w_rows;
            weights.alpha * recon
                + weights.beta * (state_cb + trans_cb)
                + weights.gamma_loss * (state_res + trans_res)
                + weights.commitment * commit
        };
        let report = finite_diff_check(&vals, &analytic, &mut frozen.clone(), 1e-5, 24);
        assert!(report.max_rel_err < 1e-6, "{:?}", report.worst);
    }

    #[test]
    fn decode_gradients_check() {
        let (store, p) = decoder_setup(3, 4, 2, 1, 12);
        let mut rng = Rng::seed_from_u64(13);
        let x = rng.normal_mat(3, 4, 0.8);
        let params: Vec<Mat> = store.iter().map(|(_, e)| (*e.value).clone()).collect();
        let run = |ps: &[Mat]| {
            let mut store2 = ParamStore::new();
            for ((_, e), val) in store.iter().zip(ps) {
                store2.add(e.group, e.name.clone(), val.clone());
            }
            let mut tape = Tape::new();
            let bind = Binding::bind(&store2, &mut tape);
            let xv = tape.constant(x.clone());
            let out = decode(&mut tape, &bind, &p, xv, 2).unwrap();
            let loss = tape.sq_frobenius(out);
            (tape, bind, loss)
        };
        let (tape, bind, loss) = run(&params);
        let grads = tape.backward(loss);
        let analytic: Vec<Mat> = bind
            .vars()
            .iter()
            .zip(&params)
            .map(|(&v, pm)| grads.get(v).cloned().unwrap_or_else(|| Mat::zeros(pm.rows(), pm.cols())))
            .collect();
        let report = finite_diff_check(
            &params,
            &analytic,
            &mut |ps: &[Mat]| {
                let (tape, _, loss) = run(ps);
                tape.val(loss).get(0, 0)
            },
            1e-5,
            8,
        );
        assert!(report.max_rel_err < 1e-5, "{:?}", report.worst);
    }
}
