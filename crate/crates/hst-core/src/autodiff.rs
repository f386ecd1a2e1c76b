//! Minimal reverse-mode autodiff over [`Mat`].
//!
//! A [`Tape`] records one forward evaluation; [`Tape::backward`] walks the
//! recording once and accumulates gradients for every node. Stop-gradient
//! semantics (`sg(..)` in quantizer losses) map onto [`Tape::detach`], which
//! re-enters a value as a fresh constant.
//!
//! The op set is exactly what the encoder / state-space / quantizer / decoder
//! stack needs; every op's backward is finite-difference tested below.

use std::sync::Arc;

use crate::linalg::{self, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

type BackFn = Box<dyn Fn(&Mat, &mut Grads)>;

struct Node {
    val: Arc<Mat>,
    back: Option<BackFn>,
}

/// Per-node gradient slots produced by [`Tape::backward`].
pub struct Grads {
    slots: Vec<Option<Mat>>,
}

impl Grads {
    fn add(&mut self, v: Var, contribution: Mat) {
        match &mut self.slots[v.0] {
            Some(g) => g.add_scaled(&contribution, 1.0),
            slot => *slot = Some(contribution),
        }
    }

    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.slots[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.slots[v.0].take()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Stable softplus `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Zero-order-hold factor `phi(x) = (e^x - 1) / x`, with the two-term series
/// `1 + x/2` below `|x| < 1e-6` to avoid cancellation.
pub fn zoh_phi(x: f64) -> f64 {
    if x.abs() < 1e-6 {
        1.0 + 0.5 * x
    } else {
        x.exp_m1() / x
    }
}

/// Derivative of [`zoh_phi`]; series below `|x| < 1e-4`.
pub fn zoh_phi_prime(x: f64) -> f64 {
    if x.abs() < 1e-4 {
        0.5 + x / 3.0 + x * x / 8.0
    } else {
        (x.exp() * (x - 1.0) + 1.0) / (x * x)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, val: Mat, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { val: Arc::new(val), back });
        Var(self.nodes.len() - 1)
    }

    fn push_rc(&mut self, val: Arc<Mat>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { val, back });
        Var(self.nodes.len() - 1)
    }

    /// Enter a value that should receive gradients (parameters, probed inputs).
    pub fn leaf(&mut self, val: Mat) -> Var {
        self.push(val, None)
    }

    /// Zero-copy leaf sharing storage with the caller.
    pub fn leaf_rc(&mut self, val: Arc<Mat>) -> Var {
        self.push_rc(val, None)
    }

    /// Enter a value with no gradient path (inputs, masks, stop-gradients).
    pub fn constant(&mut self, val: Mat) -> Var {
        self.push(val, None)
    }

    pub fn val(&self, v: Var) -> &Mat {
        &self.nodes[v.0].val
    }

    fn rc(&self, v: Var) -> Arc<Mat> {
        Arc::clone(&self.nodes[v.0].val)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Reverse pass from a `1x1` loss node.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.val(loss).shape(), (1, 1), "backward needs a scalar loss");
        let mut grads = Grads { slots: (0..self.nodes.len()).map(|_| None).collect() };
        grads.slots[loss.0] = Some(Mat::scalar(1.0));
        for id in (0..=loss.0).rev() {
            if grads.slots[id].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[id].back {
                let g = grads.slots[id].take().expect("checked above");
                back(&g, &mut grads);
                grads.slots[id] = Some(g);
            }
        }
        grads
    }

    // ---- binary elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let mut out = (*av).clone();
        out.add_scaled(&bv, 1.0);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.add(a, g.clone());
                grads.add(b, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.shape(), bv.shape(), "sub shape mismatch");
        let mut out = (*av).clone();
        out.add_scaled(&bv, -1.0);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.add(a, g.clone());
                let mut neg = g.clone();
                neg.scale_inplace(-1.0);
                grads.add(b, neg);
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        assert_eq!(av.shape(), bv.shape(), "mul shape mismatch");
        let out = Mat::from_vec(
            av.rows(),
            av.cols(),
            av.as_slice().iter().zip(bv.as_slice()).map(|(x, y)| x * y).collect(),
        );
        let (ac, bc) = (Arc::clone(&av), Arc::clone(&bv));
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let da = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.as_slice().iter().zip(bc.as_slice()).map(|(gv, y)| gv * y).collect(),
                );
                let db = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.as_slice().iter().zip(ac.as_slice()).map(|(gv, x)| gv * x).collect(),
                );
                grads.add(a, da);
                grads.add(b, db);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let av = self.rc(a);
        let mut out = (*av).clone();
        out.scale_inplace(c);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut dg = g.clone();
                dg.scale_inplace(c);
                grads.add(a, dg);
            })),
        )
    }

    /// `[m x n] + [1 x n]` row-broadcast bias.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(bias));
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(av.cols(), bv.cols(), "bias width mismatch");
        let mut out = (*av).clone();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            for (x, b) in r.iter_mut().zip(bv.as_slice()) {
                *x += b;
            }
        }
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.add(a, g.clone());
                let mut db = Mat::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for (s, gv) in db.as_mut_slice().iter_mut().zip(g.row(i)) {
                        *s += gv;
                    }
                }
                grads.add(bias, db);
            })),
        )
    }

    // ---- matmul and structure ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.rc(a), self.rc(b));
        let out = linalg::matmul(&av, &bv);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.add(a, linalg::matmul_a_bt(g, &bv));
                grads.add(b, linalg::matmul_at_b(&av, g));
            })),
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.transpose();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                grads.add(a, g.transpose());
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let vals: Vec<Arc<Mat>> = parts.iter().map(|&p| self.rc(p)).collect();
        let rows = vals[0].rows();
        let total: usize = vals.iter().map(|v| v.cols()).collect::<Vec<_>>().iter().sum();
        let mut out = Mat::zeros(rows, total);
        for i in 0..rows {
            let mut off = 0;
            for v in &vals {
                assert_eq!(v.rows(), rows, "concat_cols row mismatch");
                out.row_mut(i)[off..off + v.cols()].copy_from_slice(v.row(i));
                off += v.cols();
            }
        }
        let widths: Vec<usize> = vals.iter().map(|v| v.cols()).collect();
        let parts: Vec<Var> = parts.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut dg = Mat::zeros(g.rows(), w);
                    for i in 0..g.rows() {
                        dg.row_mut(i).copy_from_slice(&g.row(i)[off..off + w]);
                    }
                    grads.add(p, dg);
                    off += w;
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.rc(a);
        assert!(start + len <= av.cols(), "slice_cols out of range");
        let mut out = Mat::zeros(av.rows(), len);
        for i in 0..av.rows() {
            out.row_mut(i).copy_from_slice(&av.row(i)[start..start + len]);
        }
        let (rows, cols) = av.shape();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut da = Mat::zeros(rows, cols);
                for i in 0..rows {
                    da.row_mut(i)[start..start + len].copy_from_slice(g.row(i));
                }
                grads.add(a, da);
            })),
        )
    }

    /// Stack `1 x n` rows into an `m x n` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty());
        let vals: Vec<Arc<Mat>> = rows.iter().map(|&p| self.rc(p)).collect();
        let n = vals[0].cols();
        let mut out = Mat::zeros(vals.len(), n);
        for (i, v) in vals.iter().enumerate() {
            assert_eq!(v.shape(), (1, n), "stack_rows expects 1x{n} rows");
            out.row_mut(i).copy_from_slice(v.row(0));
        }
        let rows: Vec<Var> = rows.to_vec();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                for (i, &p) in rows.iter().enumerate() {
                    grads.add(p, Mat::from_vec(1, g.cols(), g.row(i).to_vec()));
                }
            })),
        )
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let av = self.rc(a);
        let out = av.row_mat(i);
        let (rows, cols) = av.shape();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut da = Mat::zeros(rows, cols);
                da.row_mut(i).copy_from_slice(g.row(0));
                grads.add(a, da);
            })),
        )
    }

    /// Select rows of `a` by index, duplicates allowed; backward scatter-adds.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Var {
        let av = self.rc(a);
        let mut out = Mat::zeros(indices.len(), av.cols());
        for (t, &k) in indices.iter().enumerate() {
            out.row_mut(t).copy_from_slice(av.row(k));
        }
        let idx: Arc<Vec<usize>> = Arc::new(indices.to_vec());
        let (rows, cols) = av.shape();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut da = Mat::zeros(rows, cols);
                for (t, &k) in idx.iter().enumerate() {
                    for (s, gv) in da.row_mut(k).iter_mut().zip(g.row(t)) {
                        *s += gv;
                    }
                }
                grads.add(a, da);
            })),
        )
    }

    // ---- elementwise nonlinearities -------------------------------------------

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.map(|x| x.max(0.0));
        let ac = Arc::clone(&av);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let da = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.as_slice()
                        .iter()
                        .zip(ac.as_slice())
                        .map(|(gv, x)| if *x > 0.0 { *gv } else { 0.0 })
                        .collect(),
                );
                grads.add(a, da);
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.map(f64::tanh);
        let yc = Arc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let da = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.as_slice().iter().zip(yc.as_slice()).map(|(gv, y)| gv * (1.0 - y * y)).collect(),
                );
                grads.add(a, da);
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.map(sigmoid);
        let yc = Arc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let da = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.as_slice().iter().zip(yc.as_slice()).map(|(gv, y)| gv * y * (1.0 - y)).collect(),
                );
                grads.add(a, da);
            })),
        )
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.map(softplus);
        let ac = Arc::clone(&av);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let da = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.as_slice().iter().zip(ac.as_slice()).map(|(gv, x)| gv * sigmoid(*x)).collect(),
                );
                grads.add(a, da);
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.map(f64::exp);
        let yc = Arc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let da = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.as_slice().iter().zip(yc.as_slice()).map(|(gv, y)| gv * y).collect(),
                );
                grads.add(a, da);
            })),
        )
    }

    /// Elementwise `phi(x) = (e^x - 1)/x`, the ZOH input-matrix factor.
    pub fn zoh_phi(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let out = av.map(zoh_phi);
        let ac = Arc::clone(&av);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let da = Mat::from_vec(
                    g.rows(),
                    g.cols(),
                    g.as_slice()
                        .iter()
                        .zip(ac.as_slice())
                        .map(|(gv, x)| gv * zoh_phi_prime(*x))
                        .collect(),
                );
                grads.add(a, da);
            })),
        )
    }

    // ---- broadcast scalings ----------------------------------------------------

    /// Scale row `i` of `a [m x n]` by `v[i]` (`v` is `m x 1`).
    pub fn mul_col_vec(&mut self, a: Var, v: Var) -> Var {
        let (av, vv) = (self.rc(a), self.rc(v));
        assert_eq!(vv.shape(), (av.rows(), 1), "mul_col_vec wants m x 1");
        let mut out = (*av).clone();
        for i in 0..out.rows() {
            let s = vv.as_slice()[i];
            for x in out.row_mut(i) {
                *x *= s;
            }
        }
        let (ac, vc) = (Arc::clone(&av), Arc::clone(&vv));
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut da = g.clone();
                for i in 0..da.rows() {
                    let s = vc.as_slice()[i];
                    for x in da.row_mut(i) {
                        *x *= s;
                    }
                }
                grads.add(a, da);
                let mut dv = Mat::zeros(g.rows(), 1);
                for i in 0..g.rows() {
                    dv.as_mut_slice()[i] =
                        g.row(i).iter().zip(ac.row(i)).map(|(gv, x)| gv * x).sum();
                }
                grads.add(v, dv);
            })),
        )
    }

    /// Scale column `j` of `a [m x n]` by `v[j]` (`v` is `1 x n`).
    pub fn mul_row_vec(&mut self, a: Var, v: Var) -> Var {
        let (av, vv) = (self.rc(a), self.rc(v));
        assert_eq!(vv.shape(), (1, av.cols()), "mul_row_vec wants 1 x n");
        let mut out = (*av).clone();
        for i in 0..out.rows() {
            for (x, s) in out.row_mut(i).iter_mut().zip(vv.as_slice()) {
                *x *= s;
            }
        }
        let (ac, vc) = (Arc::clone(&av), Arc::clone(&vv));
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut da = g.clone();
                for i in 0..da.rows() {
                    for (x, s) in da.row_mut(i).iter_mut().zip(vc.as_slice()) {
                        *x *= s;
                    }
                }
                grads.add(a, da);
                let mut dv = Mat::zeros(1, g.cols());
                for i in 0..g.rows() {
                    for ((s, gv), x) in dv.as_mut_slice().iter_mut().zip(g.row(i)).zip(ac.row(i)) {
                        *s += gv * x;
                    }
                }
                grads.add(v, dv);
            })),
        )
    }

    // ---- reductions -------------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let s: f64 = av.as_slice().iter().sum();
        let (rows, cols) = av.shape();
        self.push(
            Mat::scalar(s),
            Some(Box::new(move |g, grads| {
                grads.add(a, Mat::from_elem(rows, cols, g.get(0, 0)));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let n = av.len() as f64;
        let s: f64 = av.as_slice().iter().sum();
        let (rows, cols) = av.shape();
        self.push(
            Mat::scalar(s / n),
            Some(Box::new(move |g, grads| {
                grads.add(a, Mat::from_elem(rows, cols, g.get(0, 0) / n));
            })),
        )
    }

    /// Sum of squared entries (`||a||_F^2`) as a scalar node.
    pub fn sq_frobenius(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let s: f64 = av.as_slice().iter().map(|x| x * x).sum();
        let ac = Arc::clone(&av);
        self.push(
            Mat::scalar(s),
            Some(Box::new(move |g, grads| {
                let gv = g.get(0, 0);
                let da = Mat::from_vec(
                    ac.rows(),
                    ac.cols(),
                    ac.as_slice().iter().map(|x| 2.0 * gv * x).collect(),
                );
                grads.add(a, da);
            })),
        )
    }

    /// Column means: `[m x n] -> [1 x n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let m = av.rows() as f64;
        let mut out = Mat::zeros(1, av.cols());
        for i in 0..av.rows() {
            for (s, x) in out.as_mut_slice().iter_mut().zip(av.row(i)) {
                *s += x / m;
            }
        }
        let rows = av.rows();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut da = Mat::zeros(rows, g.cols());
                for i in 0..rows {
                    for (x, gv) in da.row_mut(i).iter_mut().zip(g.row(0)) {
                        *x = gv / rows as f64;
                    }
                }
                grads.add(a, da);
            })),
        )
    }

    /// Row means: `[m x n] -> [m x 1]` (squeeze over token width).
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let n = av.cols() as f64;
        let mut out = Mat::zeros(av.rows(), 1);
        for i in 0..av.rows() {
            out.as_mut_slice()[i] = av.row(i).iter().sum::<f64>() / n;
        }
        let cols = av.cols();
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut da = Mat::zeros(g.rows(), cols);
                for i in 0..g.rows() {
                    let gv = g.get(i, 0) / cols as f64;
                    for x in da.row_mut(i) {
                        *x = gv;
                    }
                }
                grads.add(a, da);
            })),
        )
    }

    // ---- structured ops -----------------------------------------------------------

    /// Row-wise softmax with max-shift stabilization.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        let mut out = (*av).clone();
        for i in 0..out.rows() {
            let r = out.row_mut(i);
            let mx = r.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut z = 0.0;
            for x in r.iter_mut() {
                *x = (*x - mx).exp();
                z += *x;
            }
            for x in r.iter_mut() {
                *x /= z;
            }
        }
        let yc = Arc::new(out.clone());
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let mut da = Mat::zeros(g.rows(), g.cols());
                for i in 0..g.rows() {
                    let dot: f64 = g.row(i).iter().zip(yc.row(i)).map(|(gv, y)| gv * y).sum();
                    for ((x, gv), y) in da.row_mut(i).iter_mut().zip(g.row(i)).zip(yc.row(i)) {
                        *x = y * (gv - dot);
                    }
                }
                grads.add(a, da);
            })),
        )
    }

    /// Row-wise layer norm with learned gain/bias (`1 x n` each).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (xv, gv_, bv) = (self.rc(x), self.rc(gain), self.rc(bias));
        assert_eq!(gv_.shape(), (1, xv.cols()), "layer_norm gain shape");
        assert_eq!(bv.shape(), (1, xv.cols()), "layer_norm bias shape");
        let n = xv.cols() as f64;
        let mut xhat = Mat::zeros(xv.rows(), xv.cols());
        let mut inv_std = vec![0.0; xv.rows()];
        for i in 0..xv.rows() {
            let r = xv.row(i);
            let mu = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for (o, v) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (v - mu) * s;
            }
        }
        let mut out = xhat.clone();
        for i in 0..out.rows() {
            for ((o, g), b) in out.row_mut(i).iter_mut().zip(gv_.as_slice()).zip(bv.as_slice()) {
                *o = *o * g + b;
            }
        }
        let xhat = Arc::new(xhat);
        let inv_std = Arc::new(inv_std);
        let gain_val = Arc::clone(&gv_);
        self.push(
            out,
            Some(Box::new(move |g, grads| {
                let rows = g.rows();
                let cols = g.cols();
                let mut dgain = Mat::zeros(1, cols);
                let mut dbias = Mat::zeros(1, cols);
                let mut dx = Mat::zeros(rows, cols);
                for i in 0..rows {
                    for ((dgn, gv2), xh) in
                        dgain.as_mut_slice().iter_mut().zip(g.row(i)).zip(xhat.row(i))
                    {
                        *dgn += gv2 * xh;
                    }
                    for (dbn, gv2) in dbias.as_mut_slice().iter_mut().zip(g.row(i)) {
                        *dbn += gv2;
                    }
                    // dxhat = g * gain; dx = (dxhat - mean(dxhat) - xhat*mean(dxhat*xhat)) * inv_std
                    let dxhat: Vec<f64> = g
                        .row(i)
                        .iter()
                        .zip(gain_val.as_slice())
                        .map(|(gv2, gn)| gv2 * gn)
                        .collect();
                    let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                    let m2 = dxhat.iter().zip(xhat.row(i)).map(|(d, xh)| d * xh).sum::<f64>()
                        / cols as f64;
                    for ((o, d), xh) in dx.row_mut(i).iter_mut().zip(&dxhat).zip(xhat.row(i)) {
                        *o = (d - m1 - xh * m2) * inv_std[i];
                    }
                }
                grads.add(x, dx);
                grads.add(gain, dgain);
                grads.add(bias, dbias);
            })),
        )
    }

    /// Mean softmax cross-entropy over rows of logits.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.rc(logits);
        assert_eq!(lv.rows(), labels.len(), "one label per logit row");
        let m = lv.rows() as f64;
        let mut probs = (*lv).clone();
        let mut loss = 0.0;
        for i in 0..probs.rows() {
            let r = probs.row_mut(i);
            let mx = r.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for v in r.iter_mut() {
                *v = (*v - mx).exp();
                z += *v;
            }
            for v in r.iter_mut() {
                *v /= z;
            }
            loss -= r[labels[i]].max(1e-300).ln();
        }
        let probs = Arc::new(probs);
        let labels: Arc<Vec<usize>> = Arc::new(labels.to_vec());
        self.push(
            Mat::scalar(loss / m),
            Some(Box::new(move |g, grads| {
                let gv = g.get(0, 0) / m;
                let mut da = (*probs).clone();
                for (i, &y) in labels.iter().enumerate() {
                    da.row_mut(i)[y] -= 1.0;
                }
                da.scale_inplace(gv);
                grads.add(logits, da);
            })),
        )
    }

    /// Re-enter `a`'s value as a constant: identity forward, no backward path.
    pub fn detach(&mut self, a: Var) -> Var {
        let av = self.rc(a);
        self.push_rc(av, None)
    }

    /// Straight-through composition: forward value of `q`, gradient to `z`.
    pub fn straight_through(&mut self, z: Var, q: Var) -> Var {
        let (zv, qv) = (self.rc(z), self.rc(q));
        assert_eq!(zv.shape(), qv.shape(), "straight_through shape mismatch");
        let mut delta = (*qv).clone();
        delta.add_scaled(&zv, -1.0);
        let delta = self.constant(delta);
        self.add(z, delta)
    }

    /// Convenience: `x @ w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_bias(xw, b)
    }
}
