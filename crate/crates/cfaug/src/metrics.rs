//! Evaluation metrics: accuracy, macro one-vs-rest AUC, saliency AUPR
//! against the foreground mask, next-class probability shift, and the
//! R^2 used for saliency-accuracy scatter summaries.

use serde::{Deserialize, Serialize};

use crate::autodiff::softmax;
use crate::error::{CfaugError, Result};
use crate::img::Region;
use crate::net::{forward_logits, input_gradient, Network, Saliency};
use crate::synth::LabeledExample;

/// Fraction of argmax matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(CfaugError::InvalidArgument(
            "accuracy needs equal-length nonempty inputs".into(),
        ));
    }
    let hits = predictions
        .iter()
        .zip(labels.iter())
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn argmax(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in scores.iter().enumerate() {
        if *v > scores[best] {
            best = i;
        }
    }
    best
}

/// Midranks of a score vector (average rank for ties, 1-based).
fn midranks(scores: &[f64]) -> Vec<f64> {
    let n = scores.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|a, b| scores[*a].partial_cmp(&scores[*b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// One-vs-rest ROC AUC for a single class via the rank-sum statistic.
pub fn binary_auc(scores: &[f64], positives: &[bool]) -> Option<f64> {
    let n_pos = positives.iter().filter(|p| **p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(positives.iter())
        .filter(|(_, p)| **p)
        .map(|(r, _)| r)
        .sum();
    Some((rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Unweighted mean over classes of one-vs-rest ROC AUC with midrank tie
/// handling. Classes absent from `labels` are skipped; the skipped count
/// is returned alongside.
pub fn macro_ovr_auc(scores: &[Vec<f64>], labels: &[usize], k: usize) -> Result<(f64, usize)> {
    if scores.is_empty() || scores.len() != labels.len() {
        return Err(CfaugError::InvalidArgument(
            "auc needs equal-length nonempty inputs".into(),
        ));
    }
    if scores.iter().any(|s| s.len() != k) {
        return Err(CfaugError::ShapeMismatch("scores must be (N, K)".into()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = 0usize;
    for class in 0..k {
        let col: Vec<f64> = scores.iter().map(|s| s[class]).collect();
        let pos: Vec<bool> = labels.iter().map(|l| *l == class).collect();
        match binary_auc(&col, &pos) {
            Some(a) => {
                total += a;
                used += 1;
            }
            None => skipped += 1,
        }
    }
    if used == 0 {
        return Err(CfaugError::InvalidArgument(
            "auc undefined: fewer than two classes present".into(),
        ));
    }
    Ok((total / used as f64, skipped))
}

/// Area under the precision-recall curve with foreground pixels as
/// positives, in average-precision form. All tied scores form a single
/// threshold group.
pub fn saliency_aupr(saliency: &Saliency, region: &Region) -> Result<f64> {
    if saliency.height != region.height || saliency.width != region.width {
        return Err(CfaugError::ShapeMismatch(
            "saliency and region sizes differ".into(),
        ));
    }
    let n_pos = region.foreground_count();
    let n_neg = region.background_count();
    if n_pos == 0 || n_neg == 0 {
        return Err(CfaugError::DegenerateMask(
            "aupr needs both foreground and background pixels".into(),
        ));
    }
    let mut indexed: Vec<(f64, bool)> = saliency
        .scores
        .iter()
        .zip(region.mask.iter())
        .map(|(s, m)| (*s, *m == 1))
        .collect();
    indexed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < indexed.len() {
        let mut j = i;
        let mut group_tp = 0usize;
        while j < indexed.len() && indexed[j].0 == indexed[i].0 {
            if indexed[j].1 {
                group_tp += 1;
            }
            j += 1;
        }
        tp += group_tp;
        seen = j;
        let precision = tp as f64 / seen as f64;
        ap += (group_tp as f64 / n_pos as f64) * precision;
        i = j;
    }
    debug_assert_eq!(seen, indexed.len());
    Ok(ap)
}

/// Mean increase of the next class's softmax probability when the
/// background is swapped to the next class. Splits must be paired: same
/// foregrounds in the same order.
pub fn next_class_shift(
    net: &Network,
    original: &[LabeledExample],
    mixed_next: &[LabeledExample],
) -> Result<f64> {
    if original.is_empty() || original.len() != mixed_next.len() {
        return Err(CfaugError::InvalidArgument(
            "paired splits required".into(),
        ));
    }
    let k = net.classes;
    let mut acc = 0.0;
    for (o, m) in original.iter().zip(mixed_next.iter()) {
        if o.label != m.label {
            return Err(CfaugError::InvalidArgument(
                "splits are not paired: labels differ".into(),
            ));
        }
        let next = (o.label + 1) % k;
        let po = softmax(&forward_logits(net, &o.image.normalize())?);
        let pm = softmax(&forward_logits(net, &m.image.normalize())?);
        acc += pm[next] - po[next];
    }
    Ok(acc / original.len() as f64)
}

/// Squared Pearson correlation.
pub fn r_squared(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() < 2 || xs.len() != ys.len() {
        return Err(CfaugError::InvalidArgument(
            "r_squared needs >= 2 paired points".into(),
        ));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys.iter()) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 {
        return Err(CfaugError::InvalidArgument("xs are constant".into()));
    }
    if syy == 0.0 {
        return Ok(0.0);
    }
    Ok((sxy * sxy) / (sxx * syy))
}

/// Per-split metric row, stored as fractions; render x100 for percent.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricReport {
    pub split: String,
    pub accuracy: f64,
    pub macro_auc: f64,
    pub saliency_aupr: f64,
    pub next_class_shift: f64,
    pub per_class_accuracy: Vec<f64>,
}

/// Accuracy, macro AUC, mean ground-truth-class saliency AUPR, and
/// per-class accuracy of a frozen network over a split.
pub fn evaluate_split(net: &Network, examples: &[LabeledExample], split: &str) -> Result<MetricReport> {
    if examples.is_empty() {
        return Err(CfaugError::InvalidArgument("empty split".into()));
    }
    let k = net.classes;
    let mut scores = Vec::with_capacity(examples.len());
    let mut predictions = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    let mut aupr_sum = 0.0;
    for e in examples {
        let logits = forward_logits(net, &e.image.normalize())?;
        predictions.push(argmax(&logits));
        labels.push(e.label);
        let (_, sal) = input_gradient(net, &e.image.normalize(), e.label)?;
        aupr_sum += saliency_aupr(&sal, &e.region)?;
        scores.push(softmax(&logits));
    }
    let acc = accuracy(&predictions, &labels)?;
    let (auc, _) = macro_ovr_auc(&scores, &labels, k)?;
    let mut per_class = vec![0.0; k];
    let mut per_class_n = vec![0usize; k];
    for (p, l) in predictions.iter().zip(labels.iter()) {
        per_class_n[*l] += 1;
        if p == l {
            per_class[*l] += 1.0;
        }
    }
    for c in 0..k {
        if per_class_n[c] > 0 {
            per_class[c] /= per_class_n[c] as f64;
        }
    }
    Ok(MetricReport {
        split: split.to_string(),
        accuracy: acc,
        macro_auc: auc,
        saliency_aupr: aupr_sum / examples.len() as f64,
        next_class_shift: 0.0,
        per_class_accuracy: per_class,
    })
}
