//! Downstream evaluation: stratified subject-level cross-validation, the
//! accuracy / sensitivity / specificity suite, and clustering-agreement
//! scores used to validate token-to-state recovery on synthetic data.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint::HstCheckpoint;
use crate::dataio::{prepare_windows, TimeSeriesRecord};
use crate::error::{HstError, Result};
use crate::model::{HstModel, ModelConfig};
use crate::train::{class_index_map, train_classifier, train_tokenizer, TrainConfig};

// ---------------------------------------------------------------------------
// Fold planning
// ---------------------------------------------------------------------------

/// Subject-level fold assignment; stratified per class.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    pub seed: u64,
    /// Fold index per record, aligned with the input order.
    pub assignments: Vec<usize>,
}

/// Stratified k-fold at subject granularity: within each class, subjects are
/// shuffled and dealt round-robin, so per-fold class counts differ from the
/// ideal proportion by at most one subject.
pub fn stratified_kfold(labels: &[i64], k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(HstError::Config("need at least 2 folds".into()));
    }
    let classes = class_index_map(labels);
    for (class, _) in classes.iter() {
        let n = labels.iter().filter(|&&l| l == *class).count();
        if n < k {
            return Err(HstError::Validation(format!(
                "class {class} has only {n} subjects, fewer than k = {k}"
            )));
        }
    }
    let mut assignments = vec![0usize; labels.len()];
    let root = crate::rng::Rng::seed_from_u64(seed);
    for (ci, (class, _)) in classes.iter().enumerate() {
        let mut members: Vec<usize> =
            (0..labels.len()).filter(|&i| labels[i] == *class).collect();
        let mut rng = root.derive(ci as u64 + 1);
        rng.shuffle(&mut members);
        for (pos, &idx) in members.iter().enumerate() {
            assignments[idx] = pos % k;
        }
    }
    Ok(FoldPlan { k, seed, assignments })
}

// ---------------------------------------------------------------------------
// Confusion metrics
// ---------------------------------------------------------------------------

/// Binary confusion metrics; the positive class is label 1 (patient).
/// A metric whose denominator is empty is reported as missing, never as 0.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ConfusionMetrics {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

pub fn confusion_metrics(preds: &[usize], labels: &[usize]) -> Result<ConfusionMetrics> {
    if preds.len() != labels.len() || preds.is_empty() {
        return Err(HstError::Shape("predictions and labels must align and be non-empty".into()));
    }
    if preds.iter().chain(labels).any(|&v| v > 1) {
        return Err(HstError::Validation("confusion metrics are binary (labels 0/1)".into()));
    }
    let mut m = ConfusionMetrics::default();
    for (&p, &l) in preds.iter().zip(labels) {
        match (p, l) {
            (1, 1) => m.tp += 1,
            (0, 1) => m.fn_ += 1,
            (0, 0) => m.tn += 1,
            (1, 0) => m.fp += 1,
            _ => unreachable!(),
        }
    }
    m.accuracy = (m.tp + m.tn) as f64 / preds.len() as f64;
    m.sensitivity = (m.tp + m.fn_ > 0).then(|| m.tp as f64 / (m.tp + m.fn_) as f64);
    m.specificity = (m.tn + m.fp > 0).then(|| m.tn as f64 / (m.tn + m.fp) as f64);
    Ok(m)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub fold: usize,
    pub metrics: ConfusionMetrics,
}

/// Mean and population standard deviation of the per-fold metrics.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_fold: Vec<FoldOutcome>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_sensitivity: Option<f64>,
    pub std_sensitivity: Option<f64>,
    pub mean_specificity: Option<f64>,
    pub std_specificity: Option<f64>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn summarize_folds(folds: Vec<FoldOutcome>) -> MetricReport {
    let acc: Vec<f64> = folds.iter().map(|f| f.metrics.accuracy).collect();
    let (mean_accuracy, std_accuracy) = mean_std(&acc);
    let sens: Vec<f64> = folds.iter().filter_map(|f| f.metrics.sensitivity).collect();
    let spec: Vec<f64> = folds.iter().filter_map(|f| f.metrics.specificity).collect();
    let (mean_sensitivity, std_sensitivity) = if sens.len() == folds.len() {
        let (m, s) = mean_std(&sens);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    let (mean_specificity, std_specificity) = if spec.len() == folds.len() {
        let (m, s) = mean_std(&spec);
        (Some(m), Some(s))
    } else {
        (None, None)
    };
    MetricReport {
        per_fold: folds,
        mean_accuracy,
        std_accuracy,
        mean_sensitivity,
        std_sensitivity,
        mean_specificity,
        std_specificity,
    }
}

impl MetricReport {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut wtr =
            csv::Writer::from_path(path).map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
        let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        wtr.write_record(["fold", "acc", "sen", "spe"])
            .map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
        for f in &self.per_fold {
            wtr.write_record([
                f.fold.to_string(),
                format!("{:.6}", f.metrics.accuracy),
                fmt_opt(f.metrics.sensitivity),
                fmt_opt(f.metrics.specificity),
            ])
            .map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
        }
        wtr.write_record([
            "mean+-std".to_string(),
            format!("{:.6}+-{:.6}", self.mean_accuracy, self.std_accuracy),
            self.mean_sensitivity
                .map(|m| format!("{m:.6}+-{:.6}", self.std_sensitivity.unwrap_or(0.0)))
                .unwrap_or_default(),
            self.mean_specificity
                .map(|m| format!("{m:.6}+-{:.6}", self.std_specificity.unwrap_or(0.0)))
                .unwrap_or_default(),
        ])
        .map_err(|e| HstError::io(path, std::io::Error::other(e)))?;
        wtr.flush().map_err(|e| HstError::io(path, e))?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Subject-level prediction + cross-validation
// ---------------------------------------------------------------------------

/// Mean positive-class probability over a subject's windows, thresholded.
pub fn predict_subject(model: &HstModel, record: &TimeSeriesRecord, threshold: f64) -> Result<(usize, f64)> {
    let (windows, _) = prepare_windows(std::slice::from_ref(record), &model.cfg.window)?;
    if windows.is_empty() {
        return Err(HstError::Validation(format!(
            "subject `{}` is shorter than one window",
            record.subject_id
        )));
    }
    let mut p_sum = 0.0;
    for w in &windows {
        let probs = model.classify_window(&w.x)?;
        p_sum += probs[1];
    }
    let p = p_sum / windows.len() as f64;
    Ok((usize::from(p >= threshold), p))
}

#[derive(Clone, Debug)]
pub struct CvConfig {
    pub folds: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub threshold: f64,
}

pub struct CvOutcome {
    pub report: MetricReport,
    pub plan: FoldPlan,
}

/// Full two-phase cross-validation: per fold, train the tokenizer and the
/// frozen-quantizer classifier on the training subjects, then score held-out
/// subjects by averaged window probabilities. Subject-level splitting by
/// construction; an explicit disjointness assertion guards against leakage.
pub fn cross_validate(
    records: &[TimeSeriesRecord],
    cfg: &CvConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<CvOutcome> {
    let labels: Vec<i64> = records.iter().map(|r| r.label).collect();
    let class_map = class_index_map(&labels);
    if class_map.len() != 2 {
        return Err(HstError::Validation(format!(
            "cross-validation requires binary labels, found {} classes",
            class_map.len()
        )));
    }
    let plan = stratified_kfold(&labels, cfg.folds, cfg.train.seed)?;
    let mut outcomes = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds {
        let train_idx: Vec<usize> =
            (0..records.len()).filter(|&i| plan.assignments[i] != fold).collect();
        let test_idx: Vec<usize> =
            (0..records.len()).filter(|&i| plan.assignments[i] == fold).collect();
        {
            let train_ids: std::collections::BTreeSet<&str> =
                train_idx.iter().map(|&i| records[i].subject_id.as_str()).collect();
            for &i in &test_idx {
                assert!(
                    !train_ids.contains(records[i].subject_id.as_str()),
                    "subject leakage across the fold split"
                );
            }
        }
        let train_records: Vec<TimeSeriesRecord> =
            train_idx.iter().map(|&i| records[i].clone()).collect();
        let (windows, _) = prepare_windows(&train_records, &cfg.model.window)?;
        let window_labels: Vec<usize> = windows
            .iter()
            .map(|w| class_map[&train_records[w.record_idx].label])
            .collect();
        let mut fold_train = cfg.train.clone();
        fold_train.seed = cfg.train.seed.wrapping_add(fold as u64);
        let mut model = HstModel::new(cfg.model.clone(), fold_train.seed)?;
        let metrics = train_tokenizer(&mut model, &windows, &fold_train)?;
        train_classifier(&mut model, &windows, &window_labels, &fold_train)?;
        if let Some(dir) = checkpoint_dir {
            std::fs::create_dir_all(dir).map_err(|e| HstError::io(dir, e))?;
            let ckpt =
                HstCheckpoint::from_model(&model, &fold_train, fold_train.phase1_steps, &metrics);
            ckpt.save(&dir.join(format!("fold{fold}.hst")))?;
        }
        let mut preds = Vec::with_capacity(test_idx.len());
        let mut truths = Vec::with_capacity(test_idx.len());
        for &i in &test_idx {
            let (pred, _) = predict_subject(&model, &records[i], cfg.threshold)?;
            preds.push(pred);
            truths.push(class_map[&records[i].label]);
        }
        outcomes.push(FoldOutcome { fold, metrics: confusion_metrics(&preds, &truths)? });
    }
    Ok(CvOutcome { report: summarize_folds(outcomes), plan })
}

// ---------------------------------------------------------------------------
// Clustering agreement (token vs ground-truth state)
// ---------------------------------------------------------------------------

/// Weighted purity: each cluster votes for its dominant class.
pub fn cluster_purity(assignments: &[usize], truth: &[usize]) -> f64 {
    assert_eq!(assignments.len(), truth.len());
    assert!(!assignments.is_empty());
    let k = assignments.iter().max().unwrap() + 1;
    let c = truth.iter().max().unwrap() + 1;
    let mut joint = vec![vec![0usize; c]; k];
    for (&a, &t) in assignments.iter().zip(truth) {
        joint[a][t] += 1;
    }
    let hits: usize = joint.iter().map(|row| row.iter().max().copied().unwrap_or(0)).sum();
    hits as f64 / assignments.len() as f64
}

/// Adjusted Rand index between two labelings.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(!a.is_empty());
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut joint = vec![vec![0usize; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        joint[x][y] += 1;
    }
    let choose2 = |n: usize| (n as f64) * (n as f64 - 1.0) / 2.0;
    let sum_ij: f64 = joint.iter().flatten().map(|&n| choose2(n)).sum();
    let row_sums: Vec<usize> = joint.iter().map(|r| r.iter().sum()).collect();
    let col_sums: Vec<usize> =
        (0..kb).map(|j| joint.iter().map(|r| r[j]).sum()).collect();
    let sum_a: f64 = row_sums.iter().map(|&n| choose2(n)).sum();
    let sum_b: f64 = col_sums.iter().map(|&n| choose2(n)).sum();
    let total = choose2(a.len());
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-12 {
        return 0.0;
    }
    (sum_ij - expected) / (max_index - expected)
}
