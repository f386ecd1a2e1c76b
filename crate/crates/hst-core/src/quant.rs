//! Hierarchical refined cluster vector quantization.
//!
//! Two vocabularies (states from `o_t`, transitions from `h_t`), each with a
//! first-level codebook and an error-feedback residual codebook, plus the
//! usage-driven revival update that snaps long-dead codes onto the nearest
//! live feature.

use serde::{Deserialize, Serialize};

use crate::error::{HstError, Result};
use crate::linalg::{euclidean_sq, Mat};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CodebookRole {
    State,
    Transition,
    StateResidual,
    TransitionResidual,
}

/// `K` learnable code vectors with exponentially averaged usage counts.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Codebook {
    pub vectors: Mat,
    pub ema_counts: Vec<f64>,
    /// Usage count decay in `(0, 1)`.
    pub gamma: f64,
    pub role: CodebookRole,
}

impl Codebook {
    pub fn new(vectors: Mat, gamma: f64, role: CodebookRole) -> Result<Self> {
        if vectors.rows() < 2 {
            return Err(HstError::Config(format!(
                "codebook needs K >= 2 vectors, got {}",
                vectors.rows()
            )));
        }
        if !(0.0..1.0).contains(&gamma) || gamma == 0.0 {
            return Err(HstError::Config(format!("gamma must be in (0,1), got {gamma}")));
        }
        if !vectors.all_finite() {
            return Err(HstError::Validation("codebook vectors must be finite".into()));
        }
        let k = vectors.rows();
        Ok(Codebook { vectors, ema_counts: vec![0.0; k], gamma, role })
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }
}

/// Index of the nearest code vector by Euclidean distance; ties break to the
/// lowest index.
pub fn nearest_assign(z: &[f64], vectors: &Mat) -> Result<usize> {
    if z.len() != vectors.cols() {
        return Err(HstError::Shape(format!(
            "query dim {} vs codebook dim {}",
            z.len(),
            vectors.cols()
        )));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(HstError::Validation("cannot quantize a non-finite vector".into()));
    }
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for i in 0..vectors.rows() {
        let d = euclidean_sq(z, vectors.row(i));
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    Ok(best)
}

/// Quantize the first-level error `z - first_code` against a residual codebook.
pub fn residual_assign(z: &[f64], first_code: &[f64], res_vectors: &Mat) -> Result<usize> {
    let r: Vec<f64> = z.iter().zip(first_code).map(|(a, b)| a - b).collect();
    nearest_assign(&r, res_vectors)
}

/// Full two-level quantization of a single feature vector.
#[derive(Clone, Debug)]
pub struct QuantizationResult {
    pub index: usize,
    pub code: Vec<f64>,
    pub residual_index: usize,
    pub residual_code: Vec<f64>,
    /// `||z - code||` before the residual stage.
    pub error_first: f64,
    /// `||z - code - residual_code||` after the residual stage.
    pub error_post: f64,
}

pub fn quantize_vector(z: &[f64], cb: &Codebook, cb_res: &Codebook) -> Result<QuantizationResult> {
    let index = nearest_assign(z, &cb.vectors)?;
    let code = cb.vectors.row(index).to_vec();
    let residual_index = residual_assign(z, &code, &cb_res.vectors)?;
    let residual_code = cb_res.vectors.row(residual_index).to_vec();
    let error_first = euclidean_sq(z, &code).sqrt();
    let recon: Vec<f64> = code.iter().zip(&residual_code).map(|(a, b)| a + b).collect();
    let error_post = euclidean_sq(z, &recon).sqrt();
    Ok(QuantizationResult { index, code, residual_index, residual_code, error_first, error_post })
}

/// Discrete token streams for one window, with the summed quantized vectors
/// that feed the decoder.
#[derive(Clone, Debug)]
pub struct TokenizedSequence {
    pub state_tokens: Vec<usize>,
    pub transition_tokens: Vec<usize>,
    pub state_residual_tokens: Vec<usize>,
    pub transition_residual_tokens: Vec<usize>,
    /// Per-step `code + residual_code` for the state stream (`W x D`).
    pub quantized_states: Mat,
    /// Per-step `code + residual_code` for the transition stream (`W x D`).
    pub quantized_transitions: Mat,
}

/// The four codebooks of the hierarchy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodebookSet {
    pub state: Codebook,
    pub transition: Codebook,
    pub state_residual: Codebook,
    pub transition_residual: Codebook,
}

impl CodebookSet {
    pub fn dim(&self) -> usize {
        self.state.dim()
    }
}

/// Quantize both streams. `literal_transition_residual` reproduces the
/// variant where transition residuals are matched against the state-residual
/// codebook instead of their own.
pub fn quantize_pair_with(
    o_seq: &Mat,
    h_seq: &Mat,
    books: &CodebookSet,
    literal_transition_residual: bool,
) -> Result<TokenizedSequence> {
    if o_seq.cols() != books.state.dim() || h_seq.cols() != books.transition.dim() {
        return Err(HstError::Shape(format!(
            "feature dim {} / {} vs codebook dim {}",
            o_seq.cols(),
            h_seq.cols(),
            books.state.dim()
        )));
    }
    if o_seq.rows() != h_seq.rows() {
        return Err(HstError::Shape("state and transition sequences differ in length".into()));
    }
    let w = o_seq.rows();
    let d = o_seq.cols();
    let mut out = TokenizedSequence {
        state_tokens: Vec::with_capacity(w),
        transition_tokens: Vec::with_capacity(w),
        state_residual_tokens: Vec::with_capacity(w),
        transition_residual_tokens: Vec::with_capacity(w),
        quantized_states: Mat::zeros(w, d),
        quantized_transitions: Mat::zeros(w, d),
    };
    let trans_res_book =
        if literal_transition_residual { &books.state_residual } else { &books.transition_residual };
    for t in 0..w {
        let o = o_seq.row(t);
        let h = h_seq.row(t);
        let si = nearest_assign(o, &books.state.vectors)?;
        let s_code = books.state.vectors.row(si);
        let sri = residual_assign(o, s_code, &books.state_residual.vectors)?;
        let s_res = books.state_residual.vectors.row(sri);
        let ti = nearest_assign(h, &books.transition.vectors)?;
        let t_code = books.transition.vectors.row(ti);
        let tri = residual_assign(h, t_code, &trans_res_book.vectors)?;
        let t_res = trans_res_book.vectors.row(tri);
        out.state_tokens.push(si);
        out.state_residual_tokens.push(sri);
        out.transition_tokens.push(ti);
        out.transition_residual_tokens.push(tri);
        for j in 0..d {
            out.quantized_states.set(t, j, s_code[j] + s_res[j]);
            out.quantized_transitions.set(t, j, t_code[j] + t_res[j]);
        }
    }
    Ok(out)
}

pub fn quantize_pair(o_seq: &Mat, h_seq: &Mat, books: &CodebookSet) -> Result<TokenizedSequence> {
    quantize_pair_with(o_seq, h_seq, books, false)
}

/// Revival weight `alpha_j = exp(-N_j * K * 10 / (1 - gamma))`.
pub fn revival_weight(n_j: f64, k: usize, gamma: f64) -> f64 {
    (-n_j * k as f64 * 10.0 / (1.0 - gamma)).exp()
}

/// One usage/revival update. Counts are refreshed first
/// (`N_j <- gamma N_j + (1-gamma) n_j` with `n_j` the batch assignment
/// counts); each code then moves toward the batch feature nearest to it with
/// weight `alpha_j` computed from the updated count. A code with a long-dead
/// count (`alpha ~ 1`) snaps onto that feature; heavily used codes do not
/// move. No-op on an empty batch.
pub fn cluster_revive_update(cb: &mut Codebook, batch_features: &Mat, assignments: &[usize]) {
    if batch_features.rows() == 0 {
        return;
    }
    debug_assert_eq!(batch_features.rows(), assignments.len());
    let k = cb.k();
    let mut counts = vec![0.0f64; k];
    for &a in assignments {
        debug_assert!(a < k);
        counts[a] += 1.0;
    }
    for j in 0..k {
        cb.ema_counts[j] = cb.gamma * cb.ema_counts[j] + (1.0 - cb.gamma) * counts[j];
    }
    for j in 0..k {
        let alpha = revival_weight(cb.ema_counts[j], k, cb.gamma);
        if alpha == 0.0 {
            continue;
        }
        // Nearest batch feature to this code.
        let code = cb.vectors.row(j).to_vec();
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for i in 0..batch_features.rows() {
            let d = euclidean_sq(&code, batch_features.row(i));
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        let z = batch_features.row(best);
        for (e, zv) in cb.vectors.row_mut(j).iter_mut().zip(z) {
            *e = *e * (1.0 - alpha) + zv * alpha;
        }
    }
}

/// Usage histogram, perplexity (`exp` of usage entropy) and dead-code count.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CodebookMetrics {
    pub usage: Vec<usize>,
    pub perplexity: f64,
    pub dead_codes: usize,
}

pub fn codebook_metrics(assignments: &[usize], k: usize) -> CodebookMetrics {
    let mut usage = vec![0usize; k];
    for &a in assignments {
        usage[a] += 1;
    }
    let total: usize = usage.iter().sum();
    let mut entropy = 0.0;
    if total > 0 {
        for &c in &usage {
            if c > 0 {
                let p = c as f64 / total as f64;
                entropy -= p * p.ln();
            }
        }
    }
    let dead_codes = usage.iter().filter(|&&c| c == 0).count();
    CodebookMetrics { usage, perplexity: entropy.exp(), dead_codes }
}

// ---------------------------------------------------------------------------
// Initialization
// ---------------------------------------------------------------------------

/// k-means++ seeding from a feature batch. If the batch is smaller than `k`,
/// remaining codes cycle through the features with a small deterministic
/// jitter so no two codes coincide.
pub fn kmeanspp_init(features: &Mat, k: usize, rng: &mut Rng) -> Mat {
    assert!(features.rows() > 0, "cannot seed a codebook from an empty batch");
    let n = features.rows();
    let d = features.cols();
    let mut centers = Mat::zeros(k, d);
    let first = rng.below(n);
    centers.row_mut(0).copy_from_slice(features.row(first));
    let mut chosen = 1usize;
    let mut dist2 = vec![0.0f64; n];
    while chosen < k {
        if chosen >= n {
            // Fewer features than codes: reuse features with jitter.
            let src = features.row(chosen % n);
            let dst = centers.row_mut(chosen);
            for (t, (c, s)) in dst.iter_mut().zip(src).enumerate() {
                *c = s + 1e-3 * ((chosen * d + t) as f64).sin();
            }
            chosen += 1;
            continue;
        }
        for (i, d2) in dist2.iter_mut().enumerate() {
            let mut best = f64::INFINITY;
            for c in 0..chosen {
                best = best.min(euclidean_sq(features.row(i), centers.row(c)));
            }
            *d2 = best;
        }
        let next = rng.weighted_index(&dist2);
        centers.row_mut(chosen).copy_from_slice(features.row(next));
        chosen += 1;
    }
    centers
}

/// Residual codebooks seed index 0 with the zero vector so the residual stage
/// can never hurt: assigning the zero code reproduces the first level exactly.
pub fn kmeanspp_init_residual(residuals: &Mat, k: usize, rng: &mut Rng) -> Mat {
    let inner = kmeanspp_init(residuals, k - 1, rng);
    let mut out = Mat::zeros(k, residuals.cols());
    for j in 1..k {
        out.row_mut(j).copy_from_slice(inner.row(j - 1));
    }
    out
}

/// Plain Lloyd k-means (k-means++ init, empty clusters re-seeded to the
/// farthest feature). Used for codebook-quality comparisons on frozen
/// features.
pub fn lloyd_kmeans(features: &Mat, k: usize, iters: usize, rng: &mut Rng) -> Mat {
    let n = features.rows();
    let d = features.cols();
    let mut centers = kmeanspp_init(features, k, rng);
    let mut assign = vec![0usize; n];
    for _ in 0..iters {
        for (i, a) in assign.iter_mut().enumerate() {
            *a = nearest_assign(features.row(i), &centers).expect("finite features");
        }
        let mut sums = Mat::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, &a) in assign.iter().enumerate() {
            counts[a] += 1;
            for (s, f) in sums.row_mut(a).iter_mut().zip(features.row(i)) {
                *s += f;
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                // Re-seed to the feature farthest from its center.
                let mut far = 0usize;
                let mut far_d = -1.0;
                for (i, &a) in assign.iter().enumerate() {
                    let dd = euclidean_sq(features.row(i), centers.row(a));
                    if dd > far_d {
                        far_d = dd;
                        far = i;
                    }
                }
                centers.row_mut(j).copy_from_slice(features.row(far));
            } else {
                let inv = 1.0 / counts[j] as f64;
                for (c, s) in centers.row_mut(j).iter_mut().zip(sums.row(j)) {
                    *c = s * inv;
                }
            }
        }
    }
    centers
}

/// Mean squared quantization error of `features` against a single codebook.
pub fn flat_quantization_mse(features: &Mat, vectors: &Mat) -> f64 {
    let mut total = 0.0;
    for i in 0..features.rows() {
        let a = nearest_assign(features.row(i), vectors).expect("finite features");
        total += euclidean_sq(features.row(i), vectors.row(a));
    }
    total / (features.rows() * features.cols()) as f64
}

/// Mean squared quantization error under a two-stage (code + residual) fit.
pub fn hierarchical_quantization_mse(features: &Mat, first: &Mat, residual: &Mat) -> f64 {
    let mut total = 0.0;
    for i in 0..features.rows() {
        let z = features.row(i);
        let a = nearest_assign(z, first).expect("finite features");
        let code = first.row(a);
        let r: Vec<f64> = z.iter().zip(code).map(|(x, c)| x - c).collect();
        let b = nearest_assign(&r, residual).expect("finite residuals");
        let rc = residual.row(b);
        total += z
            .iter()
            .zip(code)
            .zip(rc)
            .map(|((x, c), e)| {
                let diff = x - c - e;
                diff * diff
            })
            .sum::<f64>();
    }
    total / (features.rows() * features.cols()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn book(rows: Vec<Vec<f64>>, role: CodebookRole) -> Codebook {
        let k = rows.len();
        let d = rows[0].len();
        let flat: Vec<f64> = rows.into_iter().flatten().collect();
        Codebook::new(Mat::from_vec(k, d, flat), 0.99, role).unwrap()
    }

    #[test]
    fn nearest_by_inspection() {
        let cb = book(vec![vec![0.0, 0.0], vec![1.0, 1.0]], CodebookRole::State);
        assert_eq!(nearest_assign(&[0.9, 0.8], &cb.vectors).unwrap(), 1);
    }

    #[test]
    fn tie_breaks_to_lowest_index() {
        let cb = book(vec![vec![0.0, 0.0], vec![1.0, 1.0]], CodebookRole::State);
        // (0.5, 0.5) is exactly equidistant.
        assert_eq!(nearest_assign(&[0.5, 0.5], &cb.vectors).unwrap(), 0);
    }

    #[test]
    fn non_finite_query_rejected() {
        let cb = book(vec![vec![0.0], vec![1.0]], CodebookRole::State);
        assert!(nearest_assign(&[f64::NAN], &cb.vectors).is_err());
    }

    #[test]
    fn nearest_matches_bruteforce_oracle() {
        let mut rng = Rng::seed_from_u64(5);
        let vectors = rng.normal_mat(16, 8, 1.0);
        for _ in 0..1000 {
            let z = rng.normal_mat(1, 8, 1.5);
            let fast = nearest_assign(z.row(0), &vectors).unwrap();
            // Exhaustive scan oracle with explicit distance comparison.
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for i in 0..16 {
                let d = z
                    .row(0)
                    .iter()
                    .zip(vectors.row(i))
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                if d < best_d {
                    best_d = d;
                    best = i;
                }
            }
            assert_eq!(fast, best);
        }
    }

    #[test]
    fn zero_residual_when_code_matches() {
        let cb = book(vec![vec![1.0, 2.0], vec![3.0, 4.0]], CodebookRole::State);
        let cb_res = book(vec![vec![0.0, 0.0], vec![0.5, 0.5]], CodebookRole::StateResidual);
        let q = quantize_vector(&[1.0, 2.0], &cb, &cb_res).unwrap();
        assert_eq!(q.index, 0);
        assert_eq!(q.residual_code, vec![0.0, 0.0]);
        assert_eq!(q.error_post, 0.0);
    }

    #[test]
    fn residual_stage_never_hurts_with_zero_seed() {
        let mut rng = Rng::seed_from_u64(17);
        let cb_vec = rng.normal_mat(8, 6, 1.0);
        let mut res_vec = rng.normal_mat(8, 6, 0.3);
        for v in res_vec.row_mut(0) {
            *v = 0.0;
        }
        let cb = Codebook::new(cb_vec, 0.99, CodebookRole::State).unwrap();
        let cb_res = Codebook::new(res_vec, 0.99, CodebookRole::StateResidual).unwrap();
        for _ in 0..500 {
            let z = rng.normal_mat(1, 6, 1.4);
            let q = quantize_vector(z.row(0), &cb, &cb_res).unwrap();
            assert!(q.error_post <= q.error_first + 1e-12);
        }
    }

    #[test]
    fn assignment_scale_equivariance() {
        let mut rng = Rng::seed_from_u64(23);
        let vectors = rng.normal_mat(12, 4, 1.0);
        for _ in 0..200 {
            let z = rng.normal_mat(1, 4, 1.0);
            let c = 1e-3 + rng.uniform() * 100.0;
            let scaled = vectors.map(|v| v * c);
            let zs: Vec<f64> = z.row(0).iter().map(|v| v * c).collect();
            assert_eq!(
                nearest_assign(z.row(0), &vectors).unwrap(),
                nearest_assign(&zs, &scaled).unwrap()
            );
        }
    }

    #[test]
    fn ema_count_update_example() {
        let mut cb = book(vec![vec![0.0], vec![1.0]], CodebookRole::State);
        cb.ema_counts[0] = 10.0;
        // Two features land on code 0.
        let feats = Mat::from_vec(2, 1, vec![0.1, -0.1]);
        cluster_revive_update(&mut cb, &feats, &[0, 0]);
        assert!((cb.ema_counts[0] - 9.92).abs() < 1e-12, "{}", cb.ema_counts[0]);
    }

    #[test]
    fn dead_code_snaps_to_nearest_feature() {
        let mut cb = book(vec![vec![100.0, 100.0], vec![0.0, 0.0]], CodebookRole::State);
        // Code 0 unused and count stays zero -> alpha = exp(0) = 1.
        let feats = Mat::from_vec(2, 2, vec![1.0, 1.0, -5.0, 2.0]);
        cluster_revive_update(&mut cb, &feats, &[1, 1]);
        assert_eq!(cb.vectors.row(0), &[1.0, 1.0], "full revival to nearest feature");
    }

    #[test]
    fn used_code_is_effectively_frozen() {
        let mut cb = Codebook::new(
            Mat::from_vec(8, 2, (0..16).map(|i| i as f64).collect()),
            0.99,
            CodebookRole::State,
        )
        .unwrap();
        cb.ema_counts = vec![1.0; 8];
        let before = cb.vectors.clone();
        let feats = Mat::from_vec(2, 2, vec![100.0, 100.0, -100.0, -100.0]);
        cluster_revive_update(&mut cb, &feats, &[0, 1]);
        // After the count update every N_j >= gamma, so alpha <= exp(-7920).
        for j in 0..8 {
            let delta: f64 = cb
                .vectors
                .row(j)
                .iter()
                .zip(before.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(delta <= 1e-12, "code {j} moved {delta}");
        }
    }

    #[test]
    fn revival_weight_monotone_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..50 {
            let n = i as f64 * 1e-4;
            let a = revival_weight(n, 8, 0.99);
            assert!(a < prev || (i == 0 && a == 1.0), "alpha must strictly decrease");
            prev = a;
        }
        assert_eq!(revival_weight(0.0, 8, 0.99), 1.0);
    }

    #[test]
    fn ema_counts_stay_bracketed() {
        let mut rng = Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n0 = rng.uniform() * 20.0;
            let batch = (rng.uniform() * 10.0).floor();
            let updated = 0.99 * n0 + 0.01 * batch;
            assert!(updated >= n0.min(batch) - 1e-12 && updated <= n0.max(batch) + 1e-12);
        }
    }

    #[test]
    fn quantize_pair_composes_single_assignments() {
        let books = CodebookSet {
            state: book(vec![vec![0.0, 0.0], vec![1.0, 1.0]], CodebookRole::State),
            transition: book(vec![vec![0.0, 0.0], vec![-1.0, -1.0]], CodebookRole::Transition),
            state_residual: book(
                vec![vec![0.0, 0.0], vec![0.1, 0.1]],
                CodebookRole::StateResidual,
            ),
            transition_residual: book(
                vec![vec![0.0, 0.0], vec![-0.1, 0.0]],
                CodebookRole::TransitionResidual,
            ),
        };
        let o = Mat::from_vec(1, 2, vec![0.9, 0.8]);
        let h = Mat::from_vec(1, 2, vec![-0.9, -0.8]);
        let ts = quantize_pair(&o, &h, &books).unwrap();
        assert_eq!(ts.state_tokens, vec![1]);
        assert_eq!(ts.transition_tokens, vec![1]);
        // Residual of o: (-0.1, -0.2); zero code is nearer than (0.1, 0.1).
        assert_eq!(ts.state_residual_tokens, vec![0]);
        assert_eq!(ts.quantized_states.row(0), &[1.0, 1.0]);
    }

    #[test]
    fn quantize_pair_matches_composed_oracles_on_randoms() {
        let mut rng = Rng::seed_from_u64(31);
        let books = CodebookSet {
            state: Codebook::new(rng.normal_mat(8, 5, 1.0), 0.99, CodebookRole::State).unwrap(),
            transition: Codebook::new(rng.normal_mat(8, 5, 1.0), 0.99, CodebookRole::Transition)
                .unwrap(),
            state_residual: Codebook::new(
                rng.normal_mat(8, 5, 0.3),
                0.99,
                CodebookRole::StateResidual,
            )
            .unwrap(),
            transition_residual: Codebook::new(
                rng.normal_mat(8, 5, 0.3),
                0.99,
                CodebookRole::TransitionResidual,
            )
            .unwrap(),
        };
        let o = rng.normal_mat(20, 5, 1.2);
        let h = rng.normal_mat(20, 5, 1.2);
        let ts = quantize_pair(&o, &h, &books).unwrap();
        for t in 0..20 {
            let qo = quantize_vector(o.row(t), &books.state, &books.state_residual).unwrap();
            let qh =
                quantize_vector(h.row(t), &books.transition, &books.transition_residual).unwrap();
            assert_eq!(ts.state_tokens[t], qo.index);
            assert_eq!(ts.state_residual_tokens[t], qo.residual_index);
            assert_eq!(ts.transition_tokens[t], qh.index);
            assert_eq!(ts.transition_residual_tokens[t], qh.residual_index);
            for j in 0..5 {
                assert!(
                    (ts.quantized_states.get(t, j) - (qo.code[j] + qo.residual_code[j])).abs()
                        < 1e-15
                );
            }
        }
        // Token histograms over the window sum to W.
        let m = codebook_metrics(&ts.state_tokens, 8);
        assert_eq!(m.usage.iter().sum::<usize>(), 20);
    }

    #[test]
    fn literal_variant_reuses_state_residual_book() {
        let mut rng = Rng::seed_from_u64(47);
        let books = CodebookSet {
            state: Codebook::new(rng.normal_mat(4, 3, 1.0), 0.99, CodebookRole::State).unwrap(),
            transition: Codebook::new(rng.normal_mat(4, 3, 1.0), 0.99, CodebookRole::Transition)
                .unwrap(),
            state_residual: Codebook::new(
                rng.normal_mat(4, 3, 0.5),
                0.99,
                CodebookRole::StateResidual,
            )
            .unwrap(),
            transition_residual: Codebook::new(
                rng.normal_mat(4, 3, 0.5),
                0.99,
                CodebookRole::TransitionResidual,
            )
            .unwrap(),
        };
        let o = rng.normal_mat(10, 3, 1.0);
        let h = rng.normal_mat(10, 3, 1.0);
        let literal = quantize_pair_with(&o, &h, &books, true).unwrap();
        for t in 0..10 {
            let hv = h.row(t);
            let code = books.transition.vectors.row(literal.transition_tokens[t]);
            // Residual assignment must come from the state-residual book.
            let expected =
                residual_assign(hv, code, &books.state_residual.vectors).unwrap();
            assert_eq!(literal.transition_residual_tokens[t], expected);
            let res = books.state_residual.vectors.row(expected);
            for j in 0..3 {
                assert!(
                    (literal.quantized_transitions.get(t, j) - (code[j] + res[j])).abs() < 1e-15
                );
            }
        }
    }

    #[test]
    fn metrics_uniform_and_collapsed() {
        let uniform: Vec<usize> = (0..8).flat_map(|k| std::iter::repeat_n(k, 10)).collect();
        let m = codebook_metrics(&uniform, 8);
        assert!((m.perplexity - 8.0).abs() < 1e-12);
        assert_eq!(m.dead_codes, 0);

        let collapsed = vec![3usize; 40];
        let m = codebook_metrics(&collapsed, 8);
        assert!((m.perplexity - 1.0).abs() < 1e-12);
        assert_eq!(m.dead_codes, 7);
    }

    #[test]
    fn metrics_match_entropy_oracle() {
        let mut rng = Rng::seed_from_u64(77);
        let assignments: Vec<usize> = (0..500).map(|_| rng.below(11)).collect();
        let m = codebook_metrics(&assignments, 11);
        let mut counts = vec![0usize; 11];
        for &a in &assignments {
            counts[a] += 1;
        }
        let h: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / 500.0;
                -p * p.ln()
            })
            .sum();
        assert!((m.perplexity - h.exp()).abs() < 1e-12);
    }

    #[test]
    fn kmeanspp_handles_small_batches() {
        let mut rng = Rng::seed_from_u64(2);
        let feats = rng.normal_mat(3, 4, 1.0);
        let centers = kmeanspp_init(&feats, 8, &mut rng);
        assert_eq!(centers.shape(), (8, 4));
        // No two centers identical.
        for i in 0..8 {
            for j in (i + 1)..8 {
                assert!(euclidean_sq(centers.row(i), centers.row(j)) > 0.0);
            }
        }
    }

    #[test]
    fn residual_init_keeps_zero_code() {
        let mut rng = Rng::seed_from_u64(2);
        let feats = rng.normal_mat(50, 4, 0.5);
        let centers = kmeanspp_init_residual(&feats, 8, &mut rng);
        assert_eq!(centers.row(0), &[0.0; 4]);
    }

    #[test]
    fn hierarchical_beats_flat_at_equal_budget() {
        // Clustered features with fine structure: 8+8 two-stage should fit
        // better than 16 flat.
        let mut rng = Rng::seed_from_u64(13);
        let mut feats = Mat::zeros(800, 6);
        for i in 0..800 {
            let c = i % 8;
            for j in 0..6 {
                let center = ((c * 6 + j) as f64 * 1.7).sin() * 4.0;
                feats.set(i, j, center + rng.normal_scaled(0.5));
            }
        }
        let flat = lloyd_kmeans(&feats, 16, 25, &mut Rng::seed_from_u64(100));
        let first = lloyd_kmeans(&feats, 8, 25, &mut Rng::seed_from_u64(100));
        let mut residuals = Mat::zeros(800, 6);
        for i in 0..800 {
            let a = nearest_assign(feats.row(i), &first).unwrap();
            for j in 0..6 {
                residuals.set(i, j, feats.get(i, j) - first.get(a, j));
            }
        }
        let res = lloyd_kmeans(&residuals, 8, 25, &mut Rng::seed_from_u64(100));
        let mse_flat = flat_quantization_mse(&feats, &flat);
        let mse_hier = hierarchical_quantization_mse(&feats, &first, &res);
        assert!(
            mse_hier <= mse_flat + 1e-9,
            "hierarchical {mse_hier} must not exceed flat {mse_flat}"
        );
    }
}
