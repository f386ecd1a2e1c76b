//! Dataset ingestion, normalization, windowing, and a synthetic
//! metastable-dynamics generator.
//!
//! On-disk layout:
//! * Manifest: UTF-8 CSV with header `subject_id,path,label,site`; `path` is
//!   resolved relative to the manifest's directory; `site` may be empty.
//! * Matrix file: CSV per subject, header row of channel (ROI) names, one row
//!   per time point.
//! * Ground-truth states (synthetic data): optional sidecar next to the
//!   matrix file, `<stem>.states.csv`, single `state` column, one row per
//!   time point.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{HstError, Result};
use crate::linalg::{self, Mat};
use crate::rng::Rng;

/// One subject's channels-by-time matrix with label and metadata.
#[derive(Clone, Debug)]
pub struct TimeSeriesRecord {
    pub subject_id: String,
    /// `T x M`: rows are time points, columns are channels.
    pub x: Mat,
    pub label: i64,
    pub site: Option<String>,
    /// Ground-truth hidden state per time point (synthetic data only).
    pub true_states: Option<Vec<usize>>,
}

impl TimeSeriesRecord {
    pub fn t_len(&self) -> usize {
        self.x.rows()
    }

    pub fn n_channels(&self) -> usize {
        self.x.cols()
    }

    fn validate(&self) -> Result<()> {
        if self.x.rows() < 1 || self.x.cols() < 1 {
            return Err(HstError::Validation(format!(
                "subject `{}`: matrix must be at least 1x1, got {}x{}",
                self.subject_id,
                self.x.rows(),
                self.x.cols()
            )));
        }
        if !self.x.all_finite() {
            return Err(HstError::Validation(format!(
                "subject `{}`: matrix contains NaN or infinite values",
                self.subject_id
            )));
        }
        if let Some(ts) = &self.true_states {
            if ts.len() != self.x.rows() {
                return Err(HstError::Validation(format!(
                    "subject `{}`: true_states length {} != T {}",
                    self.subject_id,
                    ts.len(),
                    self.x.rows()
                )));
            }
        }
        Ok(())
    }
}

/// Window length and stride, in time points.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
pub struct WindowSpec {
    pub w: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    fn default() -> Self {
        WindowSpec { w: 100, stride: 100 }
    }
}

impl WindowSpec {
    pub fn new(w: usize, stride: usize) -> Result<Self> {
        if w < 2 {
            return Err(HstError::Config(format!("window length must be >= 2, got {w}")));
        }
        if stride < 1 {
            return Err(HstError::Config("stride must be >= 1".into()));
        }
        Ok(WindowSpec { w, stride })
    }
}

// ---------------------------------------------------------------------------
// Manifest + matrix loading
// ---------------------------------------------------------------------------

fn read_matrix_csv(path: &Path) -> Result<Mat> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
    let width = rdr
        .headers()
        .map_err(|e| HstError::io(path, std::io::Error::other(e)))?
        .len();
    let mut data: Vec<f64> = Vec::new();
    let mut rows = 0usize;
    for (ri, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
        if rec.len() != width {
            return Err(HstError::Parse {
                path: path.to_path_buf(),
                row: ri + 2,
                col: rec.len(),
                message: format!("expected {} columns, got {}", width, rec.len()),
            });
        }
        for (ci, cell) in rec.iter().enumerate() {
            let v: f64 = cell.parse().map_err(|_| HstError::Parse {
                path: path.to_path_buf(),
                row: ri + 2,
                col: ci + 1,
                message: format!("non-numeric cell `{cell}`"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(HstError::Validation(format!("{}: matrix file has no data rows", path.display())));
    }
    Ok(Mat::from_vec(rows, width, data))
}

fn read_states_csv(path: &Path) -> Result<Vec<usize>> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
    let mut out = Vec::new();
    for (ri, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
        let cell = rec.get(0).unwrap_or("");
        let v: usize = cell.parse().map_err(|_| HstError::Parse {
            path: path.to_path_buf(),
            row: ri + 2,
            col: 1,
            message: format!("non-integer state `{cell}`"),
        })?;
        out.push(v);
    }
    Ok(out)
}

/// Sidecar path for ground-truth states: `<stem>.states.csv`.
pub fn states_sidecar_path(matrix_path: &Path) -> PathBuf {
    let stem = matrix_path.file_stem().and_then(|s| s.to_str()).unwrap_or("series");
    matrix_path.with_file_name(format!("{stem}.states.csv"))
}

/// Load every record listed in a manifest. Fails on the first missing or
/// malformed entry, naming the offending subject.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<TimeSeriesRecord>> {
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(manifest_path)
        .map_err(|e| HstError::io(manifest_path, std::io::Error::other(e)))?;
    let headers = rdr
        .headers()
        .map_err(|e| HstError::io(manifest_path, std::io::Error::other(e)))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (si, pi, li) = match (col("subject_id"), col("path"), col("label")) {
        (Some(s), Some(p), Some(l)) => (s, p, l),
        _ => {
            return Err(HstError::Validation(format!(
                "{}: manifest header must contain subject_id, path, label",
                manifest_path.display()
            )))
        }
    };
    let site_i = col("site");

    let mut records = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| HstError::io(manifest_path, std::io::Error::other(e)))?;
        let subject_id = rec.get(si).unwrap_or("").to_string();
        if subject_id.is_empty() {
            return Err(HstError::Validation(format!(
                "{}: manifest row with empty subject_id",
                manifest_path.display()
            )));
        }
        let rel = rec.get(pi).unwrap_or("");
        let label: i64 = rec.get(li).unwrap_or("").parse().map_err(|_| HstError::Manifest {
            subject: subject_id.clone(),
            message: format!("label `{}` is not an integer", rec.get(li).unwrap_or("")),
        })?;
        let site = site_i
            .and_then(|i| rec.get(i))
            .filter(|s| !s.is_empty())
            .map(|s| s.to_string());
        let matrix_path = base.join(rel);
        if !matrix_path.exists() {
            return Err(HstError::Manifest {
                subject: subject_id,
                message: format!("matrix file not found: {}", matrix_path.display()),
            });
        }
        let x = read_matrix_csv(&matrix_path)?;
        let sidecar = states_sidecar_path(&matrix_path);
        let true_states = if sidecar.exists() { Some(read_states_csv(&sidecar)?) } else { None };
        let record = TimeSeriesRecord { subject_id, x, label, site, true_states };
        record.validate()?;
        records.push(record);
    }
    Ok(records)
}

// ---------------------------------------------------------------------------
// Normalization + windowing
// ---------------------------------------------------------------------------

/// Result of per-channel standardization.
#[derive(Clone, Debug)]
pub struct Zscored {
    pub x: Mat,
    /// Columns whose variance was zero; they are mapped to all-zeros.
    pub zero_variance_cols: Vec<usize>,
}

/// Standardize each column to mean 0 and sample std 1 (n-1 convention).
/// Zero-variance columns become all-zeros and are flagged.
pub fn zscore_normalize(x: &Mat) -> Result<Zscored> {
    let (t, m) = x.shape();
    if t < 2 {
        return Err(HstError::Validation(format!("z-scoring needs T >= 2, got T = {t}")));
    }
    let mut out = x.clone();
    let mut flagged = Vec::new();
    for j in 0..m {
        let mut mean = 0.0;
        for i in 0..t {
            mean += x.get(i, j);
        }
        mean /= t as f64;
        let mut ss = 0.0;
        for i in 0..t {
            let d = x.get(i, j) - mean;
            ss += d * d;
        }
        let var = ss / (t as f64 - 1.0);
        if var <= 0.0 {
            flagged.push(j);
            for i in 0..t {
                out.set(i, j, 0.0);
            }
        } else {
            let inv = 1.0 / var.sqrt();
            for i in 0..t {
                out.set(i, j, (x.get(i, j) - mean) * inv);
            }
        }
    }
    Ok(Zscored { x: out, zero_variance_cols: flagged })
}

/// Slice `x` into windows at offsets `0, stride, 2*stride, ...`; a trailing
/// partial window is dropped. Returns an empty list when `W > T`.
pub fn window(x: &Mat, spec: &WindowSpec) -> Vec<Mat> {
    let (t, m) = x.shape();
    if spec.w > t {
        return Vec::new();
    }
    let count = (t - spec.w) / spec.stride + 1;
    let mut out = Vec::with_capacity(count);
    for k in 0..count {
        let off = k * spec.stride;
        let mut w = Mat::zeros(spec.w, m);
        for i in 0..spec.w {
            w.row_mut(i).copy_from_slice(x.row(off + i));
        }
        out.push(w);
    }
    out
}

/// A single training window with provenance back to its record.
#[derive(Clone, Debug)]
pub struct WindowSample {
    pub record_idx: usize,
    pub offset: usize,
    pub x: Mat,
}

/// Z-score each record and slice it into windows. Records shorter than the
/// window are excluded and reported by subject id (never silently dropped).
pub fn prepare_windows(
    records: &[TimeSeriesRecord],
    spec: &WindowSpec,
) -> Result<(Vec<WindowSample>, Vec<String>)> {
    let mut samples = Vec::new();
    let mut excluded = Vec::new();
    for (ri, rec) in records.iter().enumerate() {
        if rec.t_len() < spec.w {
            excluded.push(rec.subject_id.clone());
            continue;
        }
        let z = zscore_normalize(&rec.x)?;
        for (k, w) in window(&z.x, spec).into_iter().enumerate() {
            samples.push(WindowSample { record_idx: ri, offset: k * spec.stride, x: w });
        }
    }
    Ok((samples, excluded))
}

// ---------------------------------------------------------------------------
// Synthetic switching linear dynamical system
// ---------------------------------------------------------------------------

/// Markov-switching linear dynamical system:
/// `x_t = A_{s_t} x_{t-1} + mu_{s_t} + eps_t`, `eps_t ~ N(0, noise_std^2 I)`,
/// with `s_t` a Markov chain whose self-transitions give geometric dwell
/// times of mean `dwell_mean`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SwitchingSystemSpec {
    pub n_states: usize,
    pub m: usize,
    pub dwell_mean: f64,
    /// One `M x M` dynamics matrix per state; each must have spectral radius < 1.
    pub dynamics: Vec<Mat>,
    pub noise_std: f64,
    /// One length-`M` mean vector per state.
    pub means: Vec<Vec<f64>>,
    /// Row-stochastic `n_states x n_states`.
    pub transition: Mat,
}

impl SwitchingSystemSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_states == 0 || self.m == 0 {
            return Err(HstError::Config("n_states and M must be positive".into()));
        }
        if self.dwell_mean <= 0.0 {
            return Err(HstError::Config("dwell_mean must be positive".into()));
        }
        if self.noise_std < 0.0 {
            return Err(HstError::Config("noise_std must be non-negative".into()));
        }
        if self.dynamics.len() != self.n_states || self.means.len() != self.n_states {
            return Err(HstError::Config("need one dynamics matrix and mean per state".into()));
        }
        for (s, a) in self.dynamics.iter().enumerate() {
            if a.shape() != (self.m, self.m) {
                return Err(HstError::Config(format!("dynamics[{s}] must be {0}x{0}", self.m)));
            }
            let rho = linalg::spectral_radius_estimate(a, 12);
            if rho >= 1.0 {
                return Err(HstError::Validation(format!(
                    "dynamics[{s}] is unstable: spectral radius estimate {rho:.4} >= 1"
                )));
            }
        }
        for (s, mu) in self.means.iter().enumerate() {
            if mu.len() != self.m {
                return Err(HstError::Config(format!("means[{s}] must have length {}", self.m)));
            }
        }
        if self.transition.shape() != (self.n_states, self.n_states) {
            return Err(HstError::Config("transition matrix shape mismatch".into()));
        }
        for i in 0..self.n_states {
            let row = self.transition.row(i);
            if row.iter().any(|&p| p < 0.0) {
                return Err(HstError::Validation(format!("transition row {i} has negative entries")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(HstError::Validation(format!(
                    "transition row {i} sums to {s}, expected 1 +- 1e-9"
                )));
            }
        }
        Ok(())
    }

    /// A generic metastable system: per-state rotation-like stable dynamics,
    /// well-separated state means, and a uniform off-diagonal chain whose
    /// self-transition probability matches `dwell_mean`.
    pub fn metastable(
        n_states: usize,
        m: usize,
        dwell_mean: f64,
        noise_std: f64,
        seed: u64,
    ) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let mut dynamics = Vec::with_capacity(n_states);
        let mut means = Vec::with_capacity(n_states);
        for s in 0..n_states {
            dynamics.push(random_stable_dynamics(m, 0.6, &mut rng));
            // Orthogonal-ish mean directions, amplitude 2 so regimes separate
            // cleanly from unit-scale noise.
            let mut mu = vec![0.0; m];
            for (j, v) in mu.iter_mut().enumerate() {
                let phase = (s as f64 + 1.0) * (j as f64 + 1.0) * std::f64::consts::PI
                    / (n_states as f64 + 1.0);
                *v = 2.0 * phase.sin() * if (j + s) % 2 == 0 { 1.0 } else { -1.0 };
            }
            means.push(mu);
        }
        let transition = uniform_dwell_transition(n_states, dwell_mean, None);
        SwitchingSystemSpec { n_states, m, dwell_mean, dynamics, noise_std, means, transition }
    }

    /// Same dynamics and means as [`SwitchingSystemSpec::metastable`], but the
    /// chain concentrates `favor_mass` of each off-diagonal step onto
    /// `favored` states. Two specs built with the same seed and different
    /// `favored` sets differ only in their transition matrices.
    pub fn metastable_favoring(
        n_states: usize,
        m: usize,
        dwell_mean: f64,
        noise_std: f64,
        seed: u64,
        favored: &[usize],
        favor_mass: f64,
    ) -> Self {
        let mut spec = Self::metastable(n_states, m, dwell_mean, noise_std, seed);
        spec.transition =
            uniform_dwell_transition(n_states, dwell_mean, Some((favored, favor_mass)));
        spec
    }
}

/// Random stable dynamics: scaled random orthogonal-ish matrix with spectral
/// radius approximately `rho`.
fn random_stable_dynamics(m: usize, rho: f64, rng: &mut Rng) -> Mat {
    // Gram-Schmidt on a random Gaussian matrix gives an orthogonal Q
    // (spectral radius 1); scale it down to rho.
    let g = rng.normal_mat(m, m, 1.0);
    let mut q = Mat::zeros(m, m);
    for i in 0..m {
        let mut v: Vec<f64> = g.row(i).to_vec();
        for k in 0..i {
            let dot: f64 = v.iter().zip(q.row(k)).map(|(a, b)| a * b).sum();
            for (vj, qj) in v.iter_mut().zip(q.row(k)) {
                *vj -= dot * qj;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-12);
        for (qj, vj) in q.row_mut(i).iter_mut().zip(&v) {
            *qj = vj / norm * rho;
        }
    }
    q
}

/// Row-stochastic chain with self-transition `1 - 1/dwell_mean`; off-diagonal
/// mass uniform, or concentrated on `favored` states with weight `mass`.
fn uniform_dwell_transition(
    n_states: usize,
    dwell_mean: f64,
    favor: Option<(&[usize], f64)>,
) -> Mat {
    let p_stay = if n_states == 1 { 1.0 } else { (1.0 - 1.0 / dwell_mean).max(0.0) };
    let leave = 1.0 - p_stay;
    Mat::from_fn(n_states, n_states, |i, j| {
        if n_states == 1 {
            return 1.0;
        }
        if i == j {
            return p_stay;
        }
        match favor {
            None => leave / (n_states - 1) as f64,
            Some((favored, mass)) => {
                let fav_others: Vec<usize> = favored.iter().copied().filter(|&f| f != i).collect();
                let rest = n_states - 1 - fav_others.len();
                let is_fav = fav_others.contains(&j);
                if fav_others.is_empty() {
                    leave / (n_states - 1) as f64
                } else if rest == 0 {
                    if is_fav { leave / fav_others.len() as f64 } else { 0.0 }
                } else if is_fav {
                    leave * mass / fav_others.len() as f64
                } else {
                    leave * (1.0 - mass) / rest as f64
                }
            }
        }
    })
}

/// Simulate one record of length `t_len`. Deterministic for a fixed seed.
pub fn synth_switching_lds(
    spec: &SwitchingSystemSpec,
    t_len: usize,
    seed: u64,
    subject_id: &str,
    label: i64,
) -> Result<TimeSeriesRecord> {
    spec.validate()?;
    if t_len == 0 {
        return Err(HstError::Config("t_len must be positive".into()));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let mut states = Vec::with_capacity(t_len);
    let mut s = rng.below(spec.n_states);
    let mut x = Mat::zeros(t_len, spec.m);
    let mut prev = vec![0.0; spec.m];
    for t in 0..t_len {
        if t > 0 {
            s = rng.weighted_index(spec.transition.row(s));
        }
        states.push(s);
        let a = &spec.dynamics[s];
        let mu = &spec.means[s];
        let row = x.row_mut(t);
        for i in 0..spec.m {
            let mut v = mu[i];
            for (aij, pj) in a.row(i).iter().zip(&prev) {
                v += aij * pj;
            }
            if spec.noise_std > 0.0 {
                v += rng.normal_scaled(spec.noise_std);
            }
            row[i] = v;
        }
        prev.copy_from_slice(row);
    }
    let record = TimeSeriesRecord {
        subject_id: subject_id.to_string(),
        x,
        label,
        site: None,
        true_states: Some(states),
    };
    record.validate()?;
    Ok(record)
}

// ---------------------------------------------------------------------------
// Writing datasets (synthetic output, round-trip tests)
// ---------------------------------------------------------------------------

/// Write records as a manifest plus per-subject matrix CSVs (and state
/// sidecars when ground truth is present). Returns the manifest path.
pub fn write_dataset(dir: &Path, records: &[TimeSeriesRecord]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| HstError::io(dir, e))?;
    let manifest_path = dir.join("manifest.csv");
    let mut wtr = csv::Writer::from_path(&manifest_path)
        .map_err(|e| HstError::io(&manifest_path, std::io::Error::other(e)))?;
    wtr.write_record(["subject_id", "path", "label", "site"])
        .map_err(|e| HstError::io(&manifest_path, std::io::Error::other(e)))?;
    for rec in records {
        let fname = format!("{}.csv", rec.subject_id);
        let mpath = dir.join(&fname);
        write_matrix_csv(&mpath, &rec.x)?;
        if let Some(ts) = &rec.true_states {
            let spath = states_sidecar_path(&mpath);
            let mut sw = csv::Writer::from_path(&spath)
                .map_err(|e| HstError::io(&spath, std::io::Error::other(e)))?;
            sw.write_record(["state"])
                .map_err(|e| HstError::io(&spath, std::io::Error::other(e)))?;
            for s in ts {
                sw.write_record([s.to_string()])
                    .map_err(|e| HstError::io(&spath, std::io::Error::other(e)))?;
            }
            sw.flush().map_err(|e| HstError::io(&spath, e))?;
        }
        wtr.write_record([
            rec.subject_id.as_str(),
            fname.as_str(),
            &rec.label.to_string(),
            rec.site.as_deref().unwrap_or(""),
        ])
        .map_err(|e| HstError::io(&manifest_path, std::io::Error::other(e)))?;
    }
    wtr.flush().map_err(|e| HstError::io(&manifest_path, e))?;
    Ok(manifest_path)
}

pub fn write_matrix_csv(path: &Path, x: &Mat) -> Result<()> {
    let mut wtr =
        csv::Writer::from_path(path).map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
    let header: Vec<String> = (0..x.cols()).map(|j| format!("roi_{j}")).collect();
    wtr.write_record(&header).map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
    for i in 0..x.rows() {
        let row: Vec<String> = x.row(i).iter().map(|v| format!("{v:.17e}")).collect();
        wtr.write_record(&row).map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
    }
    wtr.flush().map_err(|e| HstError::io(path, e))?;
    Ok(())
}
