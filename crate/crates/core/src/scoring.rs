//! Anomaly scores from the distance between an input cloud and its
//! reconstruction.

use serde::Serialize;

use crate::down_net::{down_forward, DownNetModel};
use crate::error::{Error, Result};
use crate::geometry::{group, normalization_params, NormalizationParams, Point3, PointCloud};
use crate::noise::{inject, NoiseParams, NoisyPatchSet};
use crate::up_net::{up_forward, UpNetModel};

/// Distances from `p` to its `m ≤ 3` nearest points of `set`, ascending.
fn nearest3(p: Point3, set: &[Point3]) -> [f64; 3] {
    let mut best = [f64::INFINITY; 3];
    for &q in set {
        let d = p.dist2(q);
        if d < best[2] {
            if d < best[1] {
                best[2] = best[1];
                if d < best[0] {
                    best[1] = best[0];
                    best[0] = d;
                } else {
                    best[1] = d;
                }
            } else {
                best[2] = d;
            }
        }
    }
    best.map(f64::sqrt)
}

/// Nearest-neighbor distance from every input point to the reconstruction.
pub fn score_points(input: &[Point3], recon: &[Point3]) -> Result<Vec<f64>> {
    if recon.is_empty() {
        return Err(Error::EmptyReconstruction);
    }
    Ok(input.iter().map(|&p| nearest3(p, recon)[0]).collect())
}

/// `1 − e^{d1} / Σ_{j≤3} e^{dj}`, evaluated relative to `d1`.
pub fn weight_factor(d: [f64; 3]) -> f64 {
    1.0 - 1.0 / (1.0 + (d[1] - d[0]).exp() + (d[2] - d[0]).exp())
}

/// Discounts each raw score by the softmax share of the nearest of its
/// three closest reconstruction points.
pub fn normalize_scores(input: &[Point3], recon: &[Point3], raw: &[f64]) -> Result<Vec<f64>> {
    if recon.len() < 3 {
        return Err(Error::TooFewPoints {
            need: 3,
            got: recon.len(),
        });
    }
    if raw.len() != input.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} raw scores for {} points",
            raw.len(),
            input.len()
        )));
    }
    Ok(input
        .iter()
        .zip(raw)
        .map(|(&p, &s)| weight_factor(nearest3(p, recon)) * s)
        .collect())
}

pub fn object_score(normalized: &[f64]) -> Result<f64> {
    if normalized.is_empty() {
        return Err(Error::EmptyScores);
    }
    Ok(normalized.iter().copied().fold(f64::NEG_INFINITY, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AnomalyReport {
    pub id: String,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub object_score: f64,
    pub recon_size: usize,
    #[serde(skip)]
    pub reconstruction: Vec<Point3>,
    #[serde(skip)]
    pub labels: Option<Vec<bool>>,
}

impl AnomalyReport {
    /// Rows of `point_index,s,s_tilde,label`; label is empty when unknown.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("point_index,s,s_tilde,label\n");
        for (i, (s, t)) in self.raw.iter().zip(&self.normalized).enumerate() {
            let label = match &self.labels {
                Some(l) => (l[i] as u8).to_string(),
                None => String::new(),
            };
            out.push_str(&format!("{i},{s:.9e},{t:.9e},{label}\n"));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct InferOptions {
    /// `None` skips corruption at inference.
    pub noise: Option<NoiseParams>,
    /// Fixed normalization scale; `None` uses the cloud's own extent.
    pub reference_scale: Option<f64>,
}

pub fn infer_normalization(cloud: &PointCloud, reference_scale: Option<f64>) -> Result<NormalizationParams> {
    let mut p = normalization_params(cloud)?;
    if let Some(s) = reference_scale {
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::InvalidInput(format!("reference scale {s}")));
        }
        p.scale = s;
    }
    Ok(p)
}

/// Normalize, group, corrupt, reconstruct through both networks, map the
/// reconstruction back to input coordinates and score every input point.
pub fn infer(down: &DownNetModel, up: &UpNetModel, cloud: &PointCloud, opts: &InferOptions) -> Result<AnomalyReport> {
    let params = infer_normalization(cloud, opts.reference_scale)?;
    let norm = params.apply_cloud(cloud);
    let n = norm.len();
    let ps = group(&norm, down.config.g.min(n), down.config.k.min(n))?;
    let noisy = match &opts.noise {
        Some(p) => inject(&ps, p)?,
        None => NoisyPatchSet::clean(&ps),
    };
    let centers = down_forward(down, &noisy)?.predicted;
    let recon: Vec<Point3> = up_forward(up, &centers)?
        .into_iter()
        .map(|p| params.invert(p))
        .collect();
    let raw = score_points(cloud.points(), &recon)?;
    let normalized = normalize_scores(cloud.points(), &recon, &raw)?;
    Ok(AnomalyReport {
        id: cloud.id().to_string(),
        object_score: object_score(&normalized)?,
        raw,
        normalized,
        recon_size: recon.len(),
        reconstruction: recon,
        labels: cloud.labels().map(<[bool]>::to_vec),
    })
}
