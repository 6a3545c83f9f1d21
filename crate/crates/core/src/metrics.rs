//! Classification metrics from a confusion matrix, in `f64`.
//!
//! Entry `[t][p]` counts samples of true class `t` predicted as `p`.
//! Precision, recall and F1 are macro-averaged; a 0/0 ratio counts as 0.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        Ok(ConfusionMatrix {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn record(&mut self, truth: usize, pred: usize) -> Result<()> {
        for i in [truth, pred] {
            if i >= self.classes {
                return Err(Error::Index {
                    index: i,
                    len: self.classes,
                });
            }
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|i| self.get(i, i)).sum()
    }

    /// Samples whose true class is `i`.
    pub fn row_sum(&self, i: usize) -> u64 {
        (0..self.classes).map(|j| self.get(i, j)).sum()
    }

    /// Samples predicted as `j`.
    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.get(i, j)).sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in self.rows() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    fn nonempty(&self) -> Result<f64> {
        match self.total() {
            0 => Err(Error::Usage("metrics of an empty confusion matrix".into())),
            n => Ok(n as f64),
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty()?;
    Ok(cm.trace() as f64 / n)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassScores {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub f1: Vec<f64>,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
}

pub fn precision_recall_f1(cm: &ConfusionMatrix) -> Result<ClassScores> {
    cm.nonempty()?;
    let c = cm.classes();
    let mut precision = Vec::with_capacity(c);
    let mut recall = Vec::with_capacity(c);
    let mut f1 = Vec::with_capacity(c);
    for i in 0..c {
        let tp = cm.get(i, i);
        let p = ratio(tp, cm.col_sum(i));
        let r = ratio(tp, cm.row_sum(i));
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        precision.push(p);
        recall.push(r);
        f1.push(f);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / c as f64;
    Ok(ClassScores {
        precision_macro: mean(&precision),
        recall_macro: mean(&recall),
        f1_macro: mean(&f1),
        precision,
        recall,
        f1,
    })
}

/// Cohen's kappa, `(P_o − P_e)/(1 − P_e)` with `P_e = Σ a_i·b_i / N²`.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let n = cm.nonempty()?;
    let po = cm.trace() as f64 / n;
    let pe = (0..cm.classes())
        .map(|i| cm.row_sum(i) as f64 * cm.col_sum(i) as f64)
        .sum::<f64>()
        / (n * n);
    if pe >= 1.0 {
        return Err(Error::Usage(
            "kappa undefined: expected agreement is 1 (all mass on one class)".into(),
        ));
    }
    Ok((po - pe) / (1.0 - pe))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub kappa: f64,
}

impl MetricRow {
    /// Kappa is reported as NaN when undefined.
    pub fn from_confusion(cm: &ConfusionMatrix) -> Result<Self> {
        let scores = precision_recall_f1(cm)?;
        Ok(MetricRow {
            accuracy: accuracy(cm)?,
            precision_macro: scores.precision_macro,
            recall_macro: scores.recall_macro,
            f1_macro: scores.f1_macro,
            kappa: kappa(cm).unwrap_or(f64::NAN),
        })
    }

    fn values(&self) -> [f64; 5] {
        [
            self.accuracy,
            self.precision_macro,
            self.recall_macro,
            self.f1_macro,
            self.kappa,
        ]
    }

    fn from_values(v: [f64; 5]) -> Self {
        MetricRow {
            accuracy: v[0],
            precision_macro: v[1],
            recall_macro: v[2],
            f1_macro: v[3],
            kappa: v[4],
        }
    }
}

pub const METRICS_HEADER: &str = "fold,accuracy,precision_macro,recall_macro,f1_macro,kappa";

/// Per-fold rows, labeled by fold index, followed by `mean` and population
/// `std` rows.
pub fn metrics_csv(rows: &[(usize, MetricRow)]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    let fmt_row = |out: &mut String, label: &str, r: &MetricRow| {
        let cells: Vec<String> = r.values().iter().map(|v| format!("{v:.6}")).collect();
        writeln!(out, "{label},{}", cells.join(",")).unwrap();
    };
    for (fold, r) in rows {
        fmt_row(&mut out, &fold.to_string(), r);
    }
    let n = rows.len().max(1) as f64;
    let mut mean = [0.0; 5];
    for (_, r) in rows {
        mean.iter_mut().zip(r.values()).for_each(|(m, v)| *m += v / n);
    }
    let mut var = [0.0; 5];
    for (_, r) in rows {
        var.iter_mut()
            .zip(r.values().iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / n);
    }
    fmt_row(&mut out, "mean", &MetricRow::from_values(mean));
    fmt_row(&mut out, "std", &MetricRow::from_values(var.map(f64::sqrt)));
    out
}

/// Writes `metrics.csv` and one `confusion_fold<i>.csv` per fold.
pub fn write_report(dir: &Path, folds: &[(usize, ConfusionMatrix)]) -> Result<()> {
    let write = |name: String, body: String| {
        let path = dir.join(name);
        std::fs::write(&path, body).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    };
    let rows = folds
        .iter()
        .map(|(fold, cm)| Ok((*fold, MetricRow::from_confusion(cm)?)))
        .collect::<Result<Vec<_>>>()?;
    write("metrics.csv".into(), metrics_csv(&rows))?;
    for (fold, cm) in folds {
        write(format!("confusion_fold{fold}.csv"), cm.to_csv())?;
    }
    Ok(())
}
