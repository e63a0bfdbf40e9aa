//! Ranking metrics at k: sample-averaged precision, recall and accuracy,
//! plus per-class (C-*) and overall (O-*) precision, recall and F1.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Ground truth and ranked predictions for one test sample.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    pub truth: BTreeSet<usize>,
    pub ranked: Vec<usize>,
}

impl PredictionSet {
    pub fn new(truth: impl IntoIterator<Item = usize>, ranked: Vec<usize>) -> Self {
        Self {
            truth: truth.into_iter().collect(),
            ranked,
        }
    }

    fn hits(&self, k: usize) -> usize {
        self.ranked[..k].iter().filter(|i| self.truth.contains(i)).count()
    }
}

/// Indices of the `k` largest scores, highest first; ties go to the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::contract(format!(
            "top_k needs 1 <= k <= {}, got {k}",
            scores.len()
        )));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

fn check(preds: &[PredictionSet], k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::contract("k must be positive"));
    }
    for (i, p) in preds.iter().enumerate() {
        if p.ranked.len() < k {
            return Err(Error::contract(format!(
                "sample {i} ranks {} tags but k = {k}",
                p.ranked.len()
            )));
        }
        if p.truth.is_empty() {
            return Err(Error::contract(format!("sample {i} has no ground-truth tags")));
        }
    }
    Ok(())
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// `(P@k, R@k, Acc@k)` averaged over samples.
pub fn precision_recall_accuracy_at_k(preds: &[PredictionSet], k: usize) -> Result<(f64, f64, f64)> {
    check(preds, k)?;
    if preds.is_empty() {
        return Ok((0.0, 0.0, 0.0));
    }
    let (mut p, mut r, mut a) = (0.0, 0.0, 0.0);
    for s in preds {
        let h = s.hits(k) as f64;
        p += h / k as f64;
        r += h / s.truth.len() as f64;
        if h >= 1.0 {
            a += 1.0;
        }
    }
    let n = preds.len() as f64;
    Ok((p / n, r / n, a / n))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ClassCounts {
    /// Times the class appears in a top-k list.
    pub predicted: usize,
    /// Times it appears in a top-k list and in that sample's ground truth.
    pub correct: usize,
    /// Times it appears in ground truth.
    pub actual: usize,
}

/// Per-class tallies, indexed by class id up to the largest id seen.
pub fn per_class_counts(preds: &[PredictionSet], k: usize) -> Result<Vec<ClassCounts>> {
    check(preds, k)?;
    let classes = preds
        .iter()
        .flat_map(|s| s.truth.iter().chain(&s.ranked[..k]))
        .max()
        .map_or(0, |m| m + 1);
    let mut counts = vec![ClassCounts::default(); classes];
    for s in preds {
        for &c in &s.ranked[..k] {
            counts[c].predicted += 1;
            if s.truth.contains(&c) {
                counts[c].correct += 1;
            }
        }
        for &c in &s.truth {
            counts[c].actual += 1;
        }
    }
    Ok(counts)
}

/// `(C-P, C-R, C-F1)`: unweighted means over classes. A class never
/// predicted is left out of C-P; a class never in ground truth is left out
/// of C-R.
pub fn per_class_metrics(preds: &[PredictionSet], k: usize) -> Result<(f64, f64, f64)> {
    let counts = per_class_counts(preds, k)?;
    let mean_ratio = |den: fn(&ClassCounts) -> usize| {
        let (sum, n) = counts
            .iter()
            .filter(|c| den(c) > 0)
            .fold((0.0, 0usize), |(s, n), c| (s + c.correct as f64 / den(c) as f64, n + 1));
        if n > 0 {
            sum / n as f64
        } else {
            0.0
        }
    };
    let cp = mean_ratio(|c| c.predicted);
    let cr = mean_ratio(|c| c.actual);
    Ok((cp, cr, f1(cp, cr)))
}

/// `(O-P, O-R, O-F1)` pooled over all samples.
pub fn overall_metrics(preds: &[PredictionSet], k: usize) -> Result<(f64, f64, f64)> {
    check(preds, k)?;
    let correct: usize = preds.iter().map(|s| s.hits(k)).sum();
    let truth: usize = preds.iter().map(|s| s.truth.len()).sum();
    let predicted = k * preds.len();
    let op = if predicted > 0 { correct as f64 / predicted as f64 } else { 0.0 };
    let or = if truth > 0 { correct as f64 / truth as f64 } else { 0.0 };
    Ok((op, or, f1(op, or)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricsRow {
    pub k: usize,
    pub precision: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub class_precision: f64,
    pub class_recall: f64,
    pub class_f1: f64,
    pub overall_precision: f64,
    pub overall_recall: f64,
    pub overall_f1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub rows: Vec<MetricsRow>,
}

const COLUMNS: [&str; 9] = ["P", "R", "Acc", "C-P", "C-R", "C-F1", "O-P", "O-R", "O-F1"];

impl MetricsRow {
    fn values(&self) -> [f64; 9] {
        [
            self.precision,
            self.recall,
            self.accuracy,
            self.class_precision,
            self.class_recall,
            self.class_f1,
            self.overall_precision,
            self.overall_recall,
            self.overall_f1,
        ]
    }
}

impl MetricsReport {
    pub fn evaluate(preds: &[PredictionSet], ks: &[usize]) -> Result<Self> {
        let rows = ks
            .iter()
            .map(|&k| {
                let (precision, recall, accuracy) = precision_recall_accuracy_at_k(preds, k)?;
                let (class_precision, class_recall, class_f1) = per_class_metrics(preds, k)?;
                let (overall_precision, overall_recall, overall_f1) = overall_metrics(preds, k)?;
                Ok(MetricsRow {
                    k,
                    precision,
                    recall,
                    accuracy,
                    class_precision,
                    class_recall,
                    class_f1,
                    overall_precision,
                    overall_recall,
                    overall_f1,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { rows })
    }

    pub fn at(&self, k: usize) -> Option<&MetricsRow> {
        self.rows.iter().find(|r| r.k == k)
    }

    pub fn to_table(&self) -> String {
        let mut out = format!("{:>4}", "k");
        for c in COLUMNS {
            let _ = write!(out, " {c:>7}");
        }
        out.push('\n');
        for row in &self.rows {
            let _ = write!(out, "{:>4}", row.k);
            for v in row.values() {
                let _ = write!(out, " {v:>7.4}");
            }
            out.push('\n');
        }
        out
    }

    /// One `k<TAB>metric<TAB>value` line per entry.
    pub fn to_records(&self) -> String {
        let mut out = String::new();
        for row in &self.rows {
            for (name, v) in COLUMNS.iter().zip(row.values()) {
                let _ = writeln!(out, "{}\t{}\t{:.17e}", row.k, name, v);
            }
        }
        out
    }
}

/// Renders `image_id<TAB>comma-separated ranked indices` lines.
pub fn write_prediction_dump<'a>(rows: impl IntoIterator<Item = (&'a str, &'a [usize])>) -> String {
    let mut out = String::new();
    for (id, ranked) in rows {
        let list = ranked.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "{id}\t{list}");
    }
    out
}

pub fn parse_prediction_dump(text: &str) -> Result<Vec<(String, Vec<usize>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let parse_err = |m: &str| Error::Parse {
            path: "<predictions>".into(),
            line: i + 1,
            message: m.to_string(),
        };
        let (id, list) = line.split_once('\t').ok_or_else(|| parse_err("missing tab"))?;
        let ranked = if list.is_empty() {
            Vec::new()
        } else {
            list.split(',')
                .map(|s| s.parse::<usize>().map_err(|_| parse_err("bad tag index")))
                .collect::<Result<Vec<_>>>()?
        };
        out.push((id.to_string(), ranked));
    }
    Ok(out)
}
