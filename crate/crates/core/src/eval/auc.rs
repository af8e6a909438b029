use crate::error::{Error, Result};

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|l| **l).count();
    (pos, labels.len() - pos)
}

fn check(scores: &[f64], labels: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("scores contain NaN".into()));
    }
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC-ROC needs both classes ({pos} positive, {neg} negative)"
        )));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via the Mann-Whitney U statistic with midranks,
/// i.e. `P(s+ > s-) + P(s+ = s-) / 2`. O(n log n).
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // doubled ranks keep midranks integral
    let mut pos_rank2: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + 1 + j + 1) as u128;
        pos_rank2 += mid2 * order[i..=j].iter().filter(|&&k| labels[k]).count() as u128;
        i = j + 1;
    }
    let (p, n) = (pos as u128, neg as u128);
    let u2 = pos_rank2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// Exhaustive pairwise reference: O(n_pos * n_neg).
pub fn auc_roc_pairwise(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let (pos, neg) = check(scores, labels)?;
    let mut twice: u128 = 0;
    for (&si, _) in scores.iter().zip(labels).filter(|(_, l)| **l) {
        for (&sj, _) in scores.iter().zip(labels).filter(|(_, l)| !**l) {
            twice += match si.partial_cmp(&sj).expect("no NaN") {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    Ok(twice as f64 / (2 * pos as u128 * neg as u128) as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultilabelAuc {
    pub value: f64,
    pub per_label: Vec<Option<f64>>,
    /// Label columns left out because they hold a single class.
    pub excluded: Vec<usize>,
}

/// Macro-averaged AUC over the label columns that contain both classes.
///
/// `scores` and `labels` are row-major `[items, k]`.
pub fn auc_roc_multilabel_detail(scores: &[f64], labels: &[bool], k: usize) -> Result<MultilabelAuc> {
    if k == 0 || scores.len() != labels.len() || !scores.len().is_multiple_of(k) {
        return Err(Error::Argument(format!(
            "score ({}) and label ({}) matrices do not have {k} columns",
            scores.len(),
            labels.len()
        )));
    }
    let mut per_label = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    for c in 0..k {
        let s: Vec<f64> = scores.iter().skip(c).step_by(k).copied().collect();
        let l: Vec<bool> = labels.iter().skip(c).step_by(k).copied().collect();
        match auc_roc(&s, &l) {
            Ok(v) => per_label.push(Some(v)),
            Err(Error::UndefinedMetric(_)) => {
                excluded.push(c);
                per_label.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let valid: Vec<f64> = per_label.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::UndefinedMetric("no label column contains both classes".into()));
    }
    if !excluded.is_empty() {
        log::warn!("AUC-ROC: label columns {excluded:?} hold a single class and are left out of the macro average");
    }
    Ok(MultilabelAuc {
        value: valid.iter().sum::<f64>() / valid.len() as f64,
        per_label,
        excluded,
    })
}

pub fn auc_roc_multilabel(scores: &[f64], labels: &[bool], k: usize) -> Result<f64> {
    Ok(auc_roc_multilabel_detail(scores, labels, k)?.value)
}
