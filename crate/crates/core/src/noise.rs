//! Noise injection on grouped patches: centers are corrupted at level
//! `alpha`, neighbor points at level `beta`.
//!
//! The generator is ChaCha8 seeded from a 64-bit seed. Draws happen in a
//! fixed order (patch-major; center x,y,z first, then each neighbor in
//! index order) so a seed fully determines the output.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PatchSet, Point3};

/// Probability that salt-and-pepper noise replaces a coordinate.
pub const SALT_PEPPER_PROB: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    #[default]
    Gaussian,
    /// Zero-mean uniform with the same standard deviation.
    Uniform,
    /// Coordinate replaced by ±(max extent) with probability 0.05.
    SaltPepper,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    #[serde(default)]
    pub kind: NoiseKind,
}

impl NoiseParams {
    pub fn new(alpha: f64, beta: f64, seed: u64) -> Self {
        Self {
            alpha,
            beta,
            seed,
            kind: NoiseKind::Gaussian,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::InvalidInput(format!(
                    "noise {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn with_seed(self, seed: u64) -> Self {
        Self { seed, ..self }
    }
}

pub struct NoiseRng(ChaCha8Rng);

impl NoiseRng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn standard_normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.0)
    }

    pub fn uniform(&mut self) -> f64 {
        self.0.random::<f64>()
    }
}

pub fn gsn_point(p: Point3, sigma: f64, rng: &mut NoiseRng) -> Point3 {
    if sigma == 0.0 {
        return p;
    }
    let dx = rng.standard_normal();
    let dy = rng.standard_normal();
    let dz = rng.standard_normal();
    p + Point3::new(dx, dy, dz) * sigma
}

fn uniform_point(p: Point3, sigma: f64, rng: &mut NoiseRng) -> Point3 {
    if sigma == 0.0 {
        return p;
    }
    let half = sigma * 3f64.sqrt();
    let mut d = [0.0; 3];
    for v in &mut d {
        *v = (2.0 * rng.uniform() - 1.0) * half;
    }
    p + Point3::from_array(d)
}

fn salt_pepper_point(p: Point3, sigma: f64, extent: f64, rng: &mut NoiseRng) -> Point3 {
    if sigma == 0.0 {
        return p;
    }
    let mut c = p.to_array();
    for v in &mut c {
        let hit = rng.uniform() < SALT_PEPPER_PROB;
        let sign = rng.uniform() < 0.5;
        if hit {
            *v = if sign { extent } else { -extent };
        }
    }
    Point3::from_array(c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyPatch {
    pub center: Point3,
    pub neighbors: Vec<Point3>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisyPatchSet {
    pub patches: Vec<NoisyPatch>,
    /// Uncorrupted FPS centers, index-aligned with `patches`.
    pub clean_centers: Vec<Point3>,
    pub source_id: String,
}

impl NoisyPatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn k(&self) -> usize {
        self.patches.first().map_or(0, |p| p.neighbors.len())
    }

    /// The clean patch set itself, without corruption.
    pub fn clean(ps: &PatchSet) -> Self {
        Self {
            patches: ps
                .patches
                .iter()
                .map(|p| NoisyPatch {
                    center: p.center,
                    neighbors: p.neighbors.clone(),
                })
                .collect(),
            clean_centers: ps.centers(),
            source_id: ps.source_id.clone(),
        }
    }
}

fn max_extent(ps: &PatchSet) -> f64 {
    ps.patches
        .iter()
        .flat_map(|p| std::iter::once(&p.center).chain(&p.neighbors))
        .map(|q| q.x.abs().max(q.y.abs()).max(q.z.abs()))
        .fold(0.0, f64::max)
}

pub fn inject(ps: &PatchSet, params: &NoiseParams) -> Result<NoisyPatchSet> {
    params.validate()?;
    let mut rng = NoiseRng::new(params.seed);
    let extent = match params.kind {
        NoiseKind::SaltPepper => max_extent(ps),
        _ => 0.0,
    };
    let mut corrupt = |p: Point3, sigma: f64| match params.kind {
        NoiseKind::Gaussian => gsn_point(p, sigma, &mut rng),
        NoiseKind::Uniform => uniform_point(p, sigma, &mut rng),
        NoiseKind::SaltPepper => salt_pepper_point(p, sigma, extent, &mut rng),
    };
    let mut patches = Vec::with_capacity(ps.len());
    for patch in &ps.patches {
        let center = corrupt(patch.center, params.alpha);
        let neighbors = patch
            .neighbors
            .iter()
            .map(|&q| corrupt(q, params.beta))
            .collect();
        patches.push(NoisyPatch { center, neighbors });
    }
    Ok(NoisyPatchSet {
        patches,
        clean_centers: ps.centers(),
        source_id: ps.source_id.clone(),
    })
}

/// SplitMix64 finalizer; derives independent per-step seeds.
pub fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.wrapping_mul(0xC2B2_AE3D_27D4_EB4F);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
