//! Point-set losses with analytic gradients with respect to the predicted
//! set. Every gradient is returned flattened as `n × 3` (x, y, z per point).
//!
//! Nearest-neighbor assignments are treated as fixed when differentiating,
//! so gradients are exact wherever the assignment is locally constant.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{knn_with_dist2, Point3};

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

fn check_aligned(pred: &[Point3], target: &[Point3]) -> Result<()> {
    if pred.len() != target.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} targets",
            pred.len(),
            target.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(())
}

fn add3(g: &mut [f64], i: usize, v: Point3, s: f64) {
    g[3 * i] += s * v.x;
    g[3 * i + 1] += s * v.y;
    g[3 * i + 2] += s * v.z;
}

/// Mean squared distance over index-aligned pairs.
pub fn mse(pred: &[Point3], target: &[Point3]) -> Result<LossGrad> {
    check_aligned(pred, target)?;
    let inv = 1.0 / pred.len() as f64;
    let mut grad = vec![0.0; pred.len() * 3];
    let mut value = 0.0;
    for (i, (&p, &t)) in pred.iter().zip(target).enumerate() {
        let d = p - t;
        value += d.dot(d);
        add3(&mut grad, i, d, 2.0 * inv);
    }
    Ok(LossGrad {
        value: value * inv,
        grad,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosLoss {
    pub value: f64,
    pub grad: Vec<f64>,
    /// Pairs skipped because one side had zero norm.
    pub degenerate_pairs: usize,
}

/// Mean of `1 − cos∠(pred_i, target_i)`; zero-norm pairs contribute 0.
pub fn cosine(pred: &[Point3], target: &[Point3]) -> Result<CosLoss> {
    check_aligned(pred, target)?;
    let inv = 1.0 / pred.len() as f64;
    let mut grad = vec![0.0; pred.len() * 3];
    let mut value = 0.0;
    let mut degenerate_pairs = 0;
    for (i, (&p, &t)) in pred.iter().zip(target).enumerate() {
        let (np, nt) = (p.norm(), t.norm());
        if np == 0.0 || nt == 0.0 {
            degenerate_pairs += 1;
            continue;
        }
        let c = p.dot(t) / (np * nt);
        value += 1.0 - c;
        // d(1 - c)/dp = -(t/(|p||t|) - c·p/|p|²)
        let g = t * (1.0 / (np * nt)) - p * (c / (np * np));
        add3(&mut grad, i, g, -inv);
    }
    Ok(CosLoss {
        value: value * inv,
        grad,
        degenerate_pairs,
    })
}

fn nearest(p: Point3, set: &[Point3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, &q) in set.iter().enumerate() {
        let d = p.dist2(q);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Symmetric Chamfer distance (mean squared nearest-neighbor distance in
/// both directions); gradient is with respect to `pred`.
pub fn chamfer(pred: &[Point3], target: &[Point3]) -> Result<LossGrad> {
    if pred.is_empty() || target.is_empty() {
        return Err(Error::EmptySet);
    }
    let inv_p = 1.0 / pred.len() as f64;
    let inv_t = 1.0 / target.len() as f64;
    let mut grad = vec![0.0; pred.len() * 3];
    let mut forward = 0.0;
    for (i, &p) in pred.iter().enumerate() {
        let (j, d2) = nearest(p, target);
        forward += d2;
        add3(&mut grad, i, p - target[j], 2.0 * inv_p);
    }
    let mut backward = 0.0;
    for &q in target {
        let (i, d2) = nearest(q, pred);
        backward += d2;
        add3(&mut grad, i, pred[i] - q, 2.0 * inv_t);
    }
    Ok(LossGrad {
        value: forward * inv_p + backward * inv_t,
        grad,
    })
}

/// Which center-loss terms are active (all on by default).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownTerms {
    pub mse: bool,
    pub cos: bool,
    pub chamfer: bool,
}

impl Default for DownTerms {
    fn default() -> Self {
        Self {
            mse: true,
            cos: true,
            chamfer: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownLoss {
    pub mse: f64,
    pub cos: f64,
    pub chamfer: f64,
    pub total: f64,
    pub grad: Vec<f64>,
    pub degenerate_pairs: usize,
}

/// Unweighted sum of the active center losses. Inactive terms are still
/// reported but contribute neither value nor gradient.
pub fn down_loss(pred: &[Point3], target: &[Point3], terms: DownTerms) -> Result<DownLoss> {
    let m = mse(pred, target)?;
    let c = cosine(pred, target)?;
    let cd = chamfer(pred, target)?;
    let mut grad = vec![0.0; pred.len() * 3];
    let mut total = 0.0;
    for (on, value, g) in [
        (terms.mse, m.value, &m.grad),
        (terms.cos, c.value, &c.grad),
        (terms.chamfer, cd.value, &cd.grad),
    ] {
        if on {
            total += value;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }
    Ok(DownLoss {
        mse: m.value,
        cos: c.value,
        chamfer: cd.value,
        total,
        grad,
        degenerate_pairs: c.degenerate_pairs,
    })
}

/// `Σ_i Σ_{j ∈ kNN(i), j≠i} η(d)·ω(d)` with `η(d) = −d`, `ω(d) = exp(−d²)`.
pub fn repulsion(cloud: &[Point3], k: usize) -> Result<LossGrad> {
    repulsion_bandwidth(cloud, k, 1.0)
}

/// Repulsion with distances measured in units of `h`: each pair contributes
/// `η(d/h)·ω(d/h)`. `h = 1` is [`repulsion`].
pub fn repulsion_bandwidth(cloud: &[Point3], k: usize, h: f64) -> Result<LossGrad> {
    if k >= cloud.len() {
        return Err(Error::OutOfRange {
            what: "repulsion neighbor count",
            value: k,
            limit: cloud.len().saturating_sub(1),
        });
    }
    if !(h.is_finite() && h > 0.0) {
        return Err(Error::InvalidInput(format!("repulsion bandwidth {h}")));
    }
    let mut grad = vec![0.0; cloud.len() * 3];
    let mut value = 0.0;
    for (i, &p) in cloud.iter().enumerate() {
        let mut nbrs = knn_with_dist2(p, cloud, k + 1)?;
        match nbrs.iter().position(|&(_, j)| j == i) {
            Some(pos) => {
                nbrs.remove(pos);
            }
            None => {
                nbrs.pop();
            }
        }
        for (d2, j) in nbrs {
            let d = d2.sqrt();
            let u = d / h;
            let w = (-u * u).exp();
            value -= u * w;
            if d > 0.0 {
                // f'(u) = e^{-u²}(2u² − 1), du/dd = 1/h
                let fp = w * (2.0 * u * u - 1.0) / h;
                let dir = (p - cloud[j]) * (fp / d);
                add3(&mut grad, i, dir, 1.0);
                add3(&mut grad, j, dir, -1.0);
            }
        }
    }
    Ok(LossGrad { value, grad })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmdMode {
    /// One-directional sum of nearest-neighbor distances.
    #[default]
    Nearest,
    /// Optimal one-to-one assignment (Hungarian), for comparison.
    Assignment,
}

/// `Σ_{p ∈ pred} min_{q ∈ gt} ‖p − q‖`.
pub fn emd_nearest(pred: &[Point3], gt: &[Point3]) -> Result<LossGrad> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptySet);
    }
    let mut grad = vec![0.0; pred.len() * 3];
    let mut value = 0.0;
    for (i, &p) in pred.iter().enumerate() {
        let (j, d2) = nearest(p, gt);
        let d = d2.sqrt();
        value += d;
        if d > 0.0 {
            add3(&mut grad, i, p - gt[j], 1.0 / d);
        }
    }
    Ok(LossGrad { value, grad })
}

/// Minimum-cost matching of every predicted point to a distinct ground
/// truth point (requires `|pred| ≤ |gt|`), summed Euclidean cost.
pub fn emd_assignment(pred: &[Point3], gt: &[Point3]) -> Result<LossGrad> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::EmptySet);
    }
    if pred.len() > gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "assignment needs |pred| <= |gt|, got {} > {}",
            pred.len(),
            gt.len()
        )));
    }
    let assign = hungarian(pred.len(), gt.len(), |i, j| pred[i].dist(gt[j]));
    let mut grad = vec![0.0; pred.len() * 3];
    let mut value = 0.0;
    for (i, &j) in assign.iter().enumerate() {
        let d = pred[i].dist(gt[j]);
        value += d;
        if d > 0.0 {
            add3(&mut grad, i, pred[i] - gt[j], 1.0 / d);
        }
    }
    Ok(LossGrad { value, grad })
}

/// O(n²m) shortest-augmenting-path assignment for an `n × m` cost matrix
/// with `n ≤ m`; returns the column assigned to each row.
fn hungarian(n: usize, m: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based potentials; column 0 is the virtual start
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assign = vec![0; n];
    for j in 1..=m {
        if p[j] != 0 {
            assign[p[j] - 1] = j - 1;
        }
    }
    assign
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpTerms {
    pub rep: bool,
    pub emd: bool,
}

impl Default for UpTerms {
    fn default() -> Self {
        Self {
            rep: true,
            emd: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UpLoss {
    pub rep: f64,
    pub emd: f64,
    pub total: f64,
    pub grad: Vec<f64>,
}

pub fn up_loss(pred: &[Point3], gt: &[Point3], rep_k: usize, rep_h: f64, terms: UpTerms, mode: EmdMode) -> Result<UpLoss> {
    let rep = repulsion_bandwidth(pred, rep_k, rep_h)?;
    let emd = match mode {
        EmdMode::Nearest => emd_nearest(pred, gt)?,
        EmdMode::Assignment => emd_assignment(pred, gt)?,
    };
    let mut grad = vec![0.0; pred.len() * 3];
    let mut total = 0.0;
    for (on, l) in [(terms.rep, &rep), (terms.emd, &emd)] {
        if on {
            total += l.value;
            for (a, b) in grad.iter_mut().zip(&l.grad) {
                *a += b;
            }
        }
    }
    Ok(UpLoss {
        rep: rep.value,
        emd: emd.value,
        total,
        grad,
    })
}
