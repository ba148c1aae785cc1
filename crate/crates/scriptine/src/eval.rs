//! Recognition quality metrics: edit-distance alignment, character error
//! rate, improvement rates, and confusion tables.

use std::collections::BTreeMap;
use thiserror::Error;

use crate::recognizer::Prediction;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("line ids do not pair up: {0}")]
    UnpairedIds(String),
}

/// One step of an edit-distance alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    /// Equal characters.
    Match { gt: char, pred: char },
    /// `gt` was recognized as `pred`.
    Sub { gt: char, pred: char },
    /// `gt` is missing from the prediction.
    Del { gt: char },
    /// `pred` has no ground-truth counterpart.
    Ins { pred: char },
}

impl AlignOp {
    pub fn is_error(self) -> bool {
        !matches!(self, AlignOp::Match { .. })
    }
}

/// Full alignment between a ground-truth string and a prediction.
/// Replaying the ops reconstructs both strings; the number of non-match
/// ops equals the edit distance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub ops: Vec<AlignOp>,
}

/// Unit-cost Levenshtein distance with a backtraced alignment.
///
/// Backtrace ties prefer match > sub > del > ins.
pub fn edit_distance(gt: &str, pred: &str) -> (usize, Alignment) {
    let a: Vec<char> = gt.chars().collect();
    let b: Vec<char> = pred.chars().collect();
    let n = a.len();
    let m = b.len();

    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub_cost = usize::from(a[i - 1] != b[j - 1]);
            d[i][j] = (d[i - 1][j - 1] + sub_cost)
                .min(d[i - 1][j] + 1)
                .min(d[i][j - 1] + 1);
        }
    }

    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && a[i - 1] == b[j - 1] && d[i][j] == d[i - 1][j - 1] {
            ops.push(AlignOp::Match { gt: a[i - 1], pred: b[j - 1] });
            i -= 1;
            j -= 1;
        } else if i > 0 && j > 0 && d[i][j] == d[i - 1][j - 1] + 1 {
            ops.push(AlignOp::Sub { gt: a[i - 1], pred: b[j - 1] });
            i -= 1;
            j -= 1;
        } else if i > 0 && d[i][j] == d[i - 1][j] + 1 {
            ops.push(AlignOp::Del { gt: a[i - 1] });
            i -= 1;
        } else {
            ops.push(AlignOp::Ins { pred: b[j - 1] });
            j -= 1;
        }
    }
    ops.reverse();
    (d[n][m], Alignment { ops })
}

/// Pooled character error rate in percent over (gt, pred) pairs:
/// `100 * sum(edit distances) / sum(gt character counts)`.
///
/// A corpus with no ground-truth characters has CER 0 if every prediction
/// is empty and 100 otherwise.
pub fn cer_pairs<S1: AsRef<str>, S2: AsRef<str>>(pairs: &[(S1, S2)]) -> f64 {
    let mut dist_sum = 0usize;
    let mut gt_chars = 0usize;
    let mut pred_chars = 0usize;
    for (gt, pred) in pairs {
        let gt = gt.as_ref();
        let pred = pred.as_ref();
        dist_sum += edit_distance(gt, pred).0;
        gt_chars += gt.chars().count();
        pred_chars += pred.chars().count();
    }
    if gt_chars == 0 {
        return if pred_chars == 0 { 0.0 } else { 100.0 };
    }
    100.0 * dist_sum as f64 / gt_chars as f64
}

/// CER over two line lists paired by line id.
pub fn cer(gt: &[(String, String)], pred: &[(String, String)]) -> Result<f64, EvalError> {
    let gt_map: BTreeMap<&str, &str> =
        gt.iter().map(|(id, t)| (id.as_str(), t.as_str())).collect();
    let pred_map: BTreeMap<&str, &str> =
        pred.iter().map(|(id, t)| (id.as_str(), t.as_str())).collect();
    if gt_map.len() != gt.len() || pred_map.len() != pred.len() {
        return Err(EvalError::UnpairedIds("duplicate line id".into()));
    }
    if gt_map.len() != pred_map.len() {
        return Err(EvalError::UnpairedIds(format!(
            "{} gt lines vs {} predicted lines",
            gt_map.len(),
            pred_map.len()
        )));
    }
    let mut pairs = Vec::with_capacity(gt_map.len());
    for (id, gt_text) in &gt_map {
        match pred_map.get(id) {
            Some(pred_text) => pairs.push((*gt_text, *pred_text)),
            None => return Err(EvalError::UnpairedIds(format!("no prediction for {id:?}"))),
        }
    }
    Ok(cer_pairs(&pairs))
}

/// Relative improvement of `pt_cer` over a from-scratch baseline and over
/// the previous iteration, each rounded half-up to whole percent.
/// A zero denominator yields `None` instead of a division.
pub fn improvement_rates(
    fs_cer: f64,
    pt_cer: f64,
    prev_pt_cer: f64,
) -> (Option<i64>, Option<i64>) {
    let rate = |base: f64| {
        if base == 0.0 {
            None
        } else {
            Some((100.0 * (base - pt_cer) / base).round() as i64)
        }
    };
    (rate(fs_cer), rate(prev_pt_cer))
}

/// One confusion-table row: a ground-truth fragment that was recognized as
/// `pred` `count` times, with its share of all error operations.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionRow {
    pub gt: String,
    pub pred: String,
    pub count: usize,
    pub percent: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ConfusionTable {
    pub rows: Vec<ConfusionRow>,
    /// Error operations before fragment merging; the percent denominator.
    pub total_errors: usize,
}

/// Most common confusions over aligned (gt, pred) pairs.
///
/// Adjacent error operations merge into one multi-character fragment, so a
/// substitution next to a deletion reports e.g. "in" -> "m" as one entry.
/// Percentages are relative to the pre-merge error-op total. Rows sort by
/// count descending, then lexicographically by fragment.
pub fn confusion_table<S1: AsRef<str>, S2: AsRef<str>>(
    pairs: &[(S1, S2)],
    top_k: usize,
) -> ConfusionTable {
    let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
    let mut total_errors = 0usize;
    for (gt, pred) in pairs {
        let (dist, alignment) = edit_distance(gt.as_ref(), pred.as_ref());
        total_errors += dist;
        let mut run_gt = String::new();
        let mut run_pred = String::new();
        for op in alignment.ops.iter().chain(std::iter::once(&AlignOp::Match {
            gt: '\0',
            pred: '\0',
        })) {
            match *op {
                AlignOp::Match { .. } => {
                    if !run_gt.is_empty() || !run_pred.is_empty() {
                        *counts
                            .entry((run_gt.clone(), run_pred.clone()))
                            .or_insert(0) += 1;
                        run_gt.clear();
                        run_pred.clear();
                    }
                }
                AlignOp::Sub { gt, pred } => {
                    run_gt.push(gt);
                    run_pred.push(pred);
                }
                AlignOp::Del { gt } => run_gt.push(gt),
                AlignOp::Ins { pred } => run_pred.push(pred),
            }
        }
    }

    let mut rows: Vec<ConfusionRow> = counts
        .into_iter()
        .map(|((gt, pred), count)| ConfusionRow {
            gt,
            pred,
            count,
            percent: if total_errors == 0 {
                0.0
            } else {
                100.0 * count as f64 / total_errors as f64
            },
        })
        .collect();
    rows.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then_with(|| a.gt.cmp(&b.gt))
            .then_with(|| a.pred.cmp(&b.pred))
    });
    rows.truncate(top_k);
    ConfusionTable { rows, total_errors }
}

impl ConfusionTable {
    /// TSV with columns GT, PRED, CNT, %; spaces rendered as the open-box
    /// symbol so whitespace confusions stay visible, percent to one decimal.
    pub fn to_tsv(&self) -> String {
        let show = |s: &str| s.replace(' ', "\u{2423}");
        let mut out = String::from("GT\tPRED\tCNT\t%\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                show(&row.gt),
                show(&row.pred),
                row.count,
                format_half_up(row.percent, 1),
            ));
        }
        out
    }
}

/// Mean per-character confidence of a prediction; 0 when empty.
pub fn line_confidence(pred: &Prediction) -> f64 {
    if pred.confidences.is_empty() {
        return 0.0;
    }
    pred.confidences.iter().sum::<f64>() / pred.confidences.len() as f64
}

/// Format a non-negative value rounded half-up to `decimals` places.
pub fn format_half_up(value: f64, decimals: u32) -> String {
    let scale = 10f64.powi(decimals as i32);
    let rounded = (value * scale + 0.5).floor() / scale;
    format!("{rounded:.*}", decimals as usize)
}
