//! Ranking metrics for object- and point-level evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    Ok(())
}

fn descending(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Area under the ROC curve as the Mann-Whitney statistic with midranks.
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Precision-recall operating points at each distinct score threshold,
/// highest threshold first.
pub fn pr_curve(scores: &[f64], labels: &[bool]) -> Result<Vec<(f64, f64)>> {
    check(scores, labels)?;
    let pos = labels.iter().filter(|&&l| l).count();
    if pos == 0 {
        return Err(Error::NoPositives);
    }
    let order = descending(scores);
    let mut pts = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let t = scores[order[i]];
        while i < order.len() && scores[order[i]] == t {
            tp += labels[order[i]] as usize;
            seen += 1;
            i += 1;
        }
        pts.push((tp as f64 / pos as f64, tp as f64 / seen as f64));
    }
    Ok(pts)
}

/// Step-wise area under the precision-recall curve, using at each recall
/// level the best precision reachable at that recall or beyond.
pub fn aupr(scores: &[f64], labels: &[bool]) -> Result<f64> {
    let curve = pr_curve(scores, labels)?;
    let mut envelope = vec![0.0; curve.len()];
    let mut best: f64 = 0.0;
    for (e, &(_, p)) in envelope.iter_mut().zip(&curve).rev() {
        best = best.max(p);
        *e = best;
    }
    let mut area = 0.0;
    let mut prev_r = 0.0;
    for (&(r, _), e) in curve.iter().zip(envelope) {
        area += (r - prev_r) * e;
        prev_r = r;
    }
    Ok(area)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub o_auroc: Option<f64>,
    pub p_auroc: Option<f64>,
    pub o_aupr: Option<f64>,
    pub p_aupr: Option<f64>,
    pub samples: usize,
}

impl ClassMetrics {
    /// Object metrics from one score per cloud; point metrics from the
    /// concatenated per-point scores when labels are available.
    pub fn compute(object: &[(f64, bool)], points: Option<(&[f64], &[bool])>) -> Self {
        let (s, l): (Vec<f64>, Vec<bool>) = object.iter().copied().unzip();
        let (p_auroc, p_aupr) = match points {
            Some((ps, pl)) => (auroc(ps, pl).ok(), aupr(ps, pl).ok()),
            None => (None, None),
        };
        Self {
            o_auroc: auroc(&s, &l).ok(),
            o_aupr: aupr(&s, &l).ok(),
            p_auroc,
            p_aupr,
            samples: object.len(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub o_auroc: Option<f64>,
    pub p_auroc: Option<f64>,
    pub o_aupr: Option<f64>,
    pub p_aupr: Option<f64>,
    pub per_class: BTreeMap<String, ClassMetrics>,
}

fn mean(vals: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = vals.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

impl MetricSet {
    /// Means over the classes where each metric is defined.
    pub fn from_classes(per_class: BTreeMap<String, ClassMetrics>) -> Self {
        let c = || per_class.values();
        Self {
            o_auroc: mean(c().map(|m| m.o_auroc)),
            p_auroc: mean(c().map(|m| m.p_auroc)),
            o_aupr: mean(c().map(|m| m.o_aupr)),
            p_aupr: mean(c().map(|m| m.p_aupr)),
            per_class,
        }
    }
}
