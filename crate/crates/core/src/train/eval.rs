//! Per-fold evaluation and report formatting.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{confusion, mean_std, metrics, roc_auc, Confusion, Metric, Metrics, RocPoint};
use crate::data::{Dataset, Label, SampleRef};
use crate::error::{Error, Result};
use crate::nn::Model;

pub const REPORT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub count: usize,
    pub confusion: Confusion,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub metric: Metric,
    pub mean: Option<f64>,
    /// Sample standard deviation over folds; absent with fewer than two.
    pub std: Option<f64>,
    /// Folds on which the metric was defined.
    pub defined_folds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub version: u32,
    pub threshold: f64,
    pub folds: Vec<FoldResult>,
    pub summary: Vec<MetricSummary>,
    /// ROC over all evaluated samples pooled; empty unless both classes
    /// occur.
    pub roc: Vec<RocPoint>,
    pub auc: Option<f64>,
}

/// Metrics from precomputed scores per fold.
pub fn evaluate_scores(fold_scores: &[(usize, Vec<f64>, Vec<bool>)], threshold: f64) -> Result<EvalReport> {
    if fold_scores.is_empty() {
        return Err(Error::Eval("no folds to evaluate".into()));
    }
    let mut folds = Vec::with_capacity(fold_scores.len());
    let (mut all_scores, mut all_labels) = (Vec::new(), Vec::new());
    for (fold, scores, labels) in fold_scores {
        if scores.is_empty() {
            return Err(Error::Eval(format!("fold {fold} is empty")));
        }
        let c = confusion(scores, labels, threshold)?;
        folds.push(FoldResult {
            fold: *fold,
            count: scores.len(),
            confusion: c,
            metrics: metrics(&c),
        });
        all_scores.extend_from_slice(scores);
        all_labels.extend_from_slice(labels);
    }
    let summary = Metric::ALL
        .iter()
        .map(|&m| {
            let vals: Vec<f64> = folds.iter().filter_map(|f| f.metrics.get(m)).collect();
            let ms = mean_std(&vals);
            MetricSummary {
                metric: m,
                mean: ms.map(|x| x.0),
                std: ms.and_then(|x| x.1),
                defined_folds: vals.len(),
            }
        })
        .collect();
    let both = all_labels.iter().any(|&y| y) && all_labels.iter().any(|&y| !y);
    let (roc, auc) = if both {
        let (roc, auc) = roc_auc(&all_scores, &all_labels)?;
        (roc, Some(auc))
    } else {
        (Vec::new(), None)
    };
    Ok(EvalReport {
        version: REPORT_VERSION,
        threshold,
        folds,
        summary,
        roc,
        auc,
    })
}

/// Sample indices for folds `1..=k`; every fold must be present.
pub fn fold_partition(dataset: &Dataset, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Eval("at least one fold is required".into()));
    }
    if k > dataset.manifest.folds {
        return Err(Error::Eval(format!(
            "{k} folds requested, the dataset defines {}",
            dataset.manifest.folds
        )));
    }
    (1..=k)
        .map(|f| {
            let idx = dataset.fold_indices(f);
            if idx.is_empty() {
                Err(Error::Eval(format!("val-fold-{f} has no samples")))
            } else {
                Ok(idx)
            }
        })
        .collect()
}

/// Score one fold.
pub fn score_fold(model: &Model<f32>, dataset: &Dataset, idx: &[usize]) -> Result<(Vec<f64>, Vec<bool>)> {
    let samples: Vec<SampleRef<'_>> = idx.iter().map(|&i| dataset.sample(i)).collect();
    let scores = model.predict_samples(&samples, 64)?;
    let labels = samples.iter().map(|s| s.label == Label::Worn).collect();
    Ok((scores, labels))
}

/// Evaluate `model` independently on validation folds `1..=k`.
pub fn kfold_eval(model: &Model<f32>, dataset: &Dataset, k: usize, threshold: f64) -> Result<EvalReport> {
    let parts = fold_partition(dataset, k)?;
    let scored = parts
        .iter()
        .enumerate()
        .map(|(i, idx)| score_fold(model, dataset, idx).map(|(s, l)| (i + 1, s, l)))
        .collect::<Result<Vec<_>>>()?;
    evaluate_scores(&scored, threshold)
}

fn percent(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{:.2}", 100.0 * x))
}

impl EvalReport {
    pub fn summary_of(&self, m: Metric) -> &MetricSummary {
        self.summary
            .iter()
            .find(|s| s.metric == m)
            .expect("every metric is summarized")
    }

    /// Cell such as `98.55 ± 0.35` (percent); no `±` for a single fold.
    pub fn cell(&self, m: Metric) -> String {
        let s = self.summary_of(m);
        match (s.mean, s.std) {
            (Some(_), Some(sd)) => format!("{} ± {}", percent(s.mean), percent(Some(sd))),
            _ => percent(s.mean),
        }
    }

    /// Two-line aligned table, one column per metric.
    pub fn table(&self) -> String {
        let cells: Vec<(String, String)> = Metric::ALL
            .iter()
            .map(|&m| (m.title().to_string(), self.cell(m)))
            .collect();
        let widths: Vec<usize> = cells
            .iter()
            .map(|(h, c)| h.chars().count().max(c.chars().count()))
            .collect();
        let mut out = String::new();
        for (i, (h, _)) in cells.iter().enumerate() {
            let _ = write!(out, "{}{:<w$}", if i > 0 { " | " } else { "" }, h, w = widths[i]);
        }
        out.push('\n');
        for (i, (_, c)) in cells.iter().enumerate() {
            let _ = write!(out, "{}{:<w$}", if i > 0 { " | " } else { "" }, c, w = widths[i]);
        }
        out.push('\n');
        out
    }

    /// `fold,metric,value`, one row per fold per metric; undefined values
    /// are left empty.
    pub fn folds_csv(&self) -> String {
        let mut out = String::from("fold,metric,value\n");
        for f in &self.folds {
            for m in Metric::ALL {
                let v = f.metrics.get(m).map(|v| v.to_string()).unwrap_or_default();
                let _ = writeln!(out, "{},{},{}", f.fold, m.name(), v);
            }
        }
        out
    }

    /// `threshold,fpr,tpr`; the first row's threshold is `inf`.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("threshold,fpr,tpr\n");
        for p in &self.roc {
            let _ = writeln!(out, "{},{},{}", p.threshold, p.fpr, p.tpr);
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        // JSON has no infinity: the open-ended first threshold is written as null
        let mut v = serde_json::to_value(self)?;
        if let Some(first) = v["roc"].get_mut(0) {
            if self.roc[0].threshold.is_infinite() {
                first["threshold"] = serde_json::Value::Null;
            }
        }
        let mut s = serde_json::to_string_pretty(&v)?;
        s.push('\n');
        Ok(s)
    }
}
