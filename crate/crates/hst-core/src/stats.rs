//! Token-dynamics statistics: occupancy probabilities, group comparison with
//! Welch's t-test (or Mann-Whitney U), Benjamini-Hochberg FDR control, and
//! per-token activation maps.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{HstError, Result};
use crate::linalg::Mat;

// ---------------------------------------------------------------------------
// Special functions (log-gamma, incomplete beta, erfc)
// ---------------------------------------------------------------------------

/// Lanczos log-gamma, |error| < 2e-10 for x > 0.
pub fn ln_gamma(x: f64) -> f64 {
    const COEF: [f64; 6] = [
        76.180_091_729_471_46,
        -86.505_320_329_416_77,
        24.014_098_240_830_91,
        -1.231_739_572_450_155,
        0.120_865_097_386_617_9e-2,
        -0.539_523_938_495_3e-5,
    ];
    let mut y = x;
    let tmp = x + 5.5;
    let tmp = tmp - (x + 0.5) * tmp.ln();
    let mut ser = 1.000_000_000_190_015_f64;
    for c in COEF {
        y += 1.0;
        ser += c / y;
    }
    -tmp + (2.506_628_274_631_000_5 * ser / x).ln()
}

/// Continued fraction for the incomplete beta (modified Lentz).
fn betacf(a: f64, b: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=300 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 3e-14 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn betai(a: f64, b: f64, x: f64) -> f64 {
    assert!((0.0..=1.0).contains(&x), "betai domain");
    if x == 0.0 || x == 1.0 {
        return x;
    }
    let bt = (ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b)
        + a * x.ln()
        + b * (1.0 - x).ln())
    .exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        bt * betacf(a, b, x) / a
    } else {
        1.0 - bt * betacf(b, a, 1.0 - x) / b
    }
}

/// Two-sided p-value of a t statistic with `df` degrees of freedom.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    if !t.is_finite() {
        return 0.0;
    }
    if df <= 0.0 {
        return 1.0;
    }
    betai(0.5 * df, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

/// Complementary error function (Chebyshev fit, |rel err| < 1.2e-7).
pub fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let ans = t
        * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98
                                    + t * (1.488_515_87
                                        + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
        .exp();
    if x >= 0.0 {
        ans
    } else {
        2.0 - ans
    }
}

/// Two-sided normal-tail p for a z statistic.
pub fn normal_two_sided_p(z: f64) -> f64 {
    erfc(z.abs() / std::f64::consts::SQRT_2).clamp(0.0, 1.0)
}

/// Pearson correlation of two equal-length samples; 0 when either side is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        let dx = x - ma;
        let dy = y - mb;
        num += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    num / (va.sqrt() * vb.sqrt())
}

// ---------------------------------------------------------------------------
// Occupancy
// ---------------------------------------------------------------------------

/// Per-token occurrence probabilities of one subject's token stream.
pub fn occupancy(tokens: &[usize], k: usize) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(HstError::Validation("occupancy of an empty token sequence".into()));
    }
    let mut counts = vec![0usize; k];
    for &t in tokens {
        if t >= k {
            return Err(HstError::Validation(format!("token {t} out of range [0, {k})")));
        }
        counts[t] += 1;
    }
    let n = tokens.len() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / n).collect())
}

// ---------------------------------------------------------------------------
// Group comparison
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupTest {
    Welch,
    MannWhitney,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() < 2 {
        0.0
    } else {
        xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
    };
    (mean, var)
}

/// Two-sided Welch t-test. Returns `(t, p)`.
///
/// Degenerate case: zero variance in both samples gives `p = 1` for equal
/// means and `p = 0` otherwise.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(HstError::Validation("Welch test needs >= 2 samples per group".into()));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        return Ok(if ma == mb { (0.0, 1.0) } else { (f64::INFINITY, 0.0) });
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    Ok((t, t_two_sided_p(t, df)))
}

/// Mann-Whitney U with normal approximation, tie correction and continuity
/// correction. Returns `(z, p)`.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<(f64, f64)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(HstError::Validation("Mann-Whitney needs >= 2 samples per group".into()));
    }
    let na = a.len() as f64;
    let nb = b.len() as f64;
    let n = na + nb;
    let mut all: Vec<(f64, usize)> = a
        .iter()
        .map(|&x| (x, 0usize))
        .chain(b.iter().map(|&x| (x, 1usize)))
        .collect();
    all.sort_by(|x, y| x.0.partial_cmp(&y.0).expect("finite sample values"));
    // Average ranks over ties.
    let mut ranks = vec![0.0f64; all.len()];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for r in ranks.iter_mut().take(j + 1).skip(i) {
            *r = avg;
        }
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let r_a: f64 =
        all.iter().zip(&ranks).filter(|((_, g), _)| *g == 0).map(|(_, r)| *r).sum();
    let u_a = r_a - na * (na + 1.0) / 2.0;
    let mu = na * nb / 2.0;
    let sigma2 = na * nb / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    if sigma2 <= 0.0 {
        // All values tied: no evidence of a difference.
        return Ok((0.0, 1.0));
    }
    let diff = u_a - mu;
    let corrected = if diff > 0.5 {
        diff - 0.5
    } else if diff < -0.5 {
        diff + 0.5
    } else {
        0.0
    };
    let z = corrected / sigma2.sqrt();
    Ok((z, normal_two_sided_p(z)))
}

/// One vocabulary entry of a group comparison.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TokenComparison {
    pub token: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    pub stat: f64,
    pub p: f64,
    pub q: f64,
    pub significant: bool,
}

/// Per-token occupancy means, test statistics and raw p-values for two groups
/// of per-subject occupancy vectors. FDR fields are filled by
/// [`group_comparison_report`].
pub fn group_compare(
    occ_a: &[Vec<f64>],
    occ_b: &[Vec<f64>],
    test: GroupTest,
) -> Result<Vec<TokenComparison>> {
    if occ_a.len() < 2 || occ_b.len() < 2 {
        return Err(HstError::Validation("each group needs >= 2 subjects".into()));
    }
    let k = occ_a[0].len();
    if occ_a.iter().chain(occ_b.iter()).any(|v| v.len() != k) {
        return Err(HstError::Shape("occupancy vectors differ in length".into()));
    }
    let mut rows = Vec::with_capacity(k);
    for token in 0..k {
        let a: Vec<f64> = occ_a.iter().map(|v| v[token]).collect();
        let b: Vec<f64> = occ_b.iter().map(|v| v[token]).collect();
        let (stat, p) = match test {
            GroupTest::Welch => welch_t_test(&a, &b)?,
            GroupTest::MannWhitney => mann_whitney_u(&a, &b)?,
        };
        rows.push(TokenComparison {
            token,
            mean_a: a.iter().sum::<f64>() / a.len() as f64,
            mean_b: b.iter().sum::<f64>() / b.len() as f64,
            stat,
            p,
            q: 1.0,
            significant: false,
        });
    }
    Ok(rows)
}

/// Benjamini-Hochberg step-up: adjusted q-values
/// (`q_(i) = min_{j >= i} p_(j) * m / j`, capped at 1) and significance flags
/// at level `q_level`.
pub fn fdr_bh(pvals: &[f64], q_level: f64) -> (Vec<f64>, Vec<bool>) {
    let m = pvals.len();
    if m == 0 {
        return (Vec::new(), Vec::new());
    }
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| pvals[i].partial_cmp(&pvals[j]).expect("finite p-values"));
    let mut adjusted = vec![0.0f64; m];
    let mut running = 1.0f64;
    for rank in (0..m).rev() {
        let idx = order[rank];
        let candidate = (pvals[idx] * m as f64 / (rank + 1) as f64).min(1.0);
        running = running.min(candidate);
        adjusted[idx] = running;
    }
    let flags = adjusted.iter().map(|&q| q <= q_level).collect();
    (adjusted, flags)
}

/// Full report: raw tests plus BH adjustment at `q_level`.
pub fn group_comparison_report(
    occ_a: &[Vec<f64>],
    occ_b: &[Vec<f64>],
    test: GroupTest,
    q_level: f64,
) -> Result<Vec<TokenComparison>> {
    let mut rows = group_compare(occ_a, occ_b, test)?;
    let pvals: Vec<f64> = rows.iter().map(|r| r.p).collect();
    let (qvals, flags) = fdr_bh(&pvals, q_level);
    for (row, (q, f)) in rows.iter_mut().zip(qvals.into_iter().zip(flags)) {
        row.q = q;
        row.significant = f;
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// Activation maps
// ---------------------------------------------------------------------------

/// Mean input vector over every time point assigned to `token`, across all
/// `(series, token stream)` pairs; streams align 1:1 with the leading rows of
/// their series. Returns `None` when the token never occurs.
pub fn state_activation_map(series: &[(&Mat, &[usize])], token: usize) -> Option<Vec<f64>> {
    let m = series.first().map(|(x, _)| x.cols())?;
    let mut acc = vec![0.0f64; m];
    let mut count = 0usize;
    for (x, tokens) in series {
        assert!(tokens.len() <= x.rows(), "token stream longer than its series");
        for (t, &tok) in tokens.iter().enumerate() {
            if tok == token {
                for (a, v) in acc.iter_mut().zip(x.row(t)) {
                    *a += v;
                }
                count += 1;
            }
        }
    }
    if count == 0 {
        return None;
    }
    for a in &mut acc {
        *a /= count as f64;
    }
    Some(acc)
}

// ---------------------------------------------------------------------------
// Report output
// ---------------------------------------------------------------------------

pub fn write_comparison_csv(path: &Path, rows: &[TokenComparison]) -> Result<()> {
    let mut wtr =
        csv::Writer::from_path(path).map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
    wtr.write_record(["token", "mean_a", "mean_b", "stat", "p", "q", "significant"])
        .map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
    for r in rows {
        wtr.write_record([
            r.token.to_string(),
            format!("{:.10}", r.mean_a),
            format!("{:.10}", r.mean_b),
            format!("{:.10}", r.stat),
            format!("{:.6e}", r.p),
            format!("{:.6e}", r.q),
            (r.significant as u8).to_string(),
        ])
        .map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
    }
    wtr.flush().map_err(|e| HstError::io(path, e))?;
    Ok(())
}

/// Paired-bar SVG of group occupancy means; significant tokens are marked.
pub fn write_comparison_svg(path: &Path, rows: &[TokenComparison], title: &str) -> Result<()> {
    let k = rows.len().max(1);
    let (w, h) = (60 + k * 56, 260);
    let max_v = rows
        .iter()
        .map(|r| r.mean_a.max(r.mean_b))
        .fold(1e-9f64, f64::max);
    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str(&format!(
        "<text x=\"10\" y=\"18\" font-family=\"sans-serif\" font-size=\"13\">{title}</text>\n"
    ));
    let base = 220.0;
    let span = 170.0;
    for (i, r) in rows.iter().enumerate() {
        let x0 = 50 + i * 56;
        let ha = span * r.mean_a / max_v;
        let hb = span * r.mean_b / max_v;
        svg.push_str(&format!(
            "<rect x=\"{x0}\" y=\"{:.1}\" width=\"20\" height=\"{ha:.1}\" fill=\"#4878cf\"/>\n",
            base - ha
        ));
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{:.1}\" width=\"20\" height=\"{hb:.1}\" fill=\"#d65f5f\"/>\n",
            x0 + 22,
            base - hb
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"238\" font-family=\"sans-serif\" font-size=\"11\">{}{}</text>\n",
            x0 + 8,
            r.token,
            if r.significant { "*" } else { "" }
        ));
    }
    std::fs::write(path, svg).map_err(|e| HstError::io(path, e))?;
    Ok(())
}
