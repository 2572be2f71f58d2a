//! Deterministic synthetic corpora: surface samples of simple primitives
//! and localized defects with exact per-point labels.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, Point3, PointCloud};
use crate::io::write_xyz;
use crate::noise::{mix_seed, NoiseRng};

pub const MIN_POINTS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Primitive {
    Sphere,
    Box,
    Cylinder,
    Torus,
}

impl Primitive {
    pub const ALL: [Primitive; 4] = [Primitive::Sphere, Primitive::Box, Primitive::Cylinder, Primitive::Torus];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::Sphere => "sphere",
            Primitive::Box => "box",
            Primitive::Cylinder => "cylinder",
            Primitive::Torus => "torus",
        }
    }
}

impl std::str::FromStr for Primitive {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Primitive::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown category `{s}`")))
    }
}

pub const SPHERE_RADIUS: f64 = 1.0;
pub const BOX_DIMS: [f64; 3] = [1.6, 1.2, 0.8];
pub const CYLINDER_RADIUS: f64 = 0.6;
pub const CYLINDER_HEIGHT: f64 = 1.6;
pub const TORUS_MAJOR: f64 = 0.8;
pub const TORUS_MINOR: f64 = 0.3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapeSpec {
    pub kind: Primitive,
    pub n: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl ShapeSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < MIN_POINTS {
            return Err(Error::OutOfRange {
                what: "synthetic point count",
                value: self.n,
                limit: MIN_POINTS,
            });
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::InvalidInput(format!("jitter {}", self.jitter)));
        }
        Ok(())
    }
}

fn unit_vector(rng: &mut NoiseRng) -> Point3 {
    loop {
        let v = Point3::new(rng.standard_normal(), rng.standard_normal(), rng.standard_normal());
        if let Some(u) = v.normalized() {
            return u;
        }
    }
}

fn sample_surface(kind: Primitive, rng: &mut NoiseRng) -> Point3 {
    match kind {
        Primitive::Sphere => unit_vector(rng) * SPHERE_RADIUS,
        Primitive::Box => {
            let [a, b, c] = BOX_DIMS;
            let areas = [b * c, a * c, a * b];
            let total: f64 = areas.iter().sum();
            let mut t = rng.uniform() * total;
            let mut axis = 2;
            for (i, &ar) in areas.iter().enumerate() {
                if t < ar {
                    axis = i;
                    break;
                }
                t -= ar;
            }
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            let mut p = [0.0; 3];
            for (i, v) in p.iter_mut().enumerate() {
                *v = if i == axis {
                    sign * BOX_DIMS[i] / 2.0
                } else {
                    (rng.uniform() - 0.5) * BOX_DIMS[i]
                };
            }
            Point3::from_array(p)
        }
        Primitive::Cylinder => {
            let (r, h) = (CYLINDER_RADIUS, CYLINDER_HEIGHT);
            let side = 2.0 * PI * r * h;
            let cap = PI * r * r;
            let t = rng.uniform() * (side + 2.0 * cap);
            if t < side {
                let th = rng.uniform() * 2.0 * PI;
                Point3::new(r * th.cos(), r * th.sin(), (rng.uniform() - 0.5) * h)
            } else {
                let z = if t < side + cap { h / 2.0 } else { -h / 2.0 };
                let rr = r * rng.uniform().sqrt();
                let th = rng.uniform() * 2.0 * PI;
                Point3::new(rr * th.cos(), rr * th.sin(), z)
            }
        }
        Primitive::Torus => {
            let (big, small) = (TORUS_MAJOR, TORUS_MINOR);
            loop {
                let u = rng.uniform() * 2.0 * PI;
                let v = rng.uniform() * 2.0 * PI;
                if rng.uniform() * (big + small) <= big + small * v.cos() {
                    let ring = big + small * v.cos();
                    return Point3::new(ring * u.cos(), ring * u.sin(), small * v.sin());
                }
            }
        }
    }
}

/// Uniform surface samples plus isotropic Gaussian jitter; all labels 0.
pub fn gen_normal(spec: &ShapeSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut rng = NoiseRng::new(spec.seed);
    let pts: Vec<Point3> = (0..spec.n)
        .map(|_| {
            let p = sample_surface(spec.kind, &mut rng);
            if spec.jitter > 0.0 {
                p + Point3::new(rng.standard_normal(), rng.standard_normal(), rng.standard_normal()) * spec.jitter
            } else {
                p
            }
        })
        .collect();
    PointCloud::with_labels(format!("{}-{}", spec.kind.name(), spec.seed), pts, vec![false; spec.n])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnomalyKind {
    Bulge,
    Dent,
    Spike,
    CrackRemoval,
}

impl AnomalyKind {
    pub fn name(self) -> &'static str {
        match self {
            AnomalyKind::Bulge => "bulge",
            AnomalyKind::Dent => "dent",
            AnomalyKind::Spike => "spike",
            AnomalyKind::CrackRemoval => "crack_removal",
        }
    }
}

impl std::str::FromStr for AnomalyKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        [AnomalyKind::Bulge, AnomalyKind::Dent, AnomalyKind::Spike, AnomalyKind::CrackRemoval]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidInput(format!("unknown anomaly kind `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Region {
    /// Ball of this radius around the region center.
    Radius(f64),
    /// The nearest `ceil(f·N)` points to the region center.
    Fraction(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnomalySpec {
    pub kind: AnomalyKind,
    pub region: Region,
    pub magnitude: f64,
    pub seed: u64,
    /// Region center; a seeded random cloud point when absent.
    #[serde(default)]
    pub center: Option<[f64; 3]>,
}

/// Points labeled around a removed crack extend this factor past its radius.
pub const CRACK_RING: f64 = 1.5;

/// Displaces (or removes) the points inside a region and labels them.
pub fn gen_anomalous(normal: &PointCloud, spec: &AnomalySpec) -> Result<PointCloud> {
    if !(spec.magnitude > 0.0 && spec.magnitude.is_finite()) {
        return Err(Error::InvalidInput(format!("magnitude {}", spec.magnitude)));
    }
    let pts = normal.points();
    let n = pts.len();
    let mut rng = NoiseRng::new(spec.seed);
    let center = match spec.center {
        Some(c) => Point3::from_array(c),
        None => pts[((rng.uniform() * n as f64) as usize).min(n - 1)],
    };
    let d: Vec<f64> = pts.iter().map(|p| p.dist(center)).collect();
    let (inside, rho): (Vec<usize>, f64) = match spec.region {
        Region::Radius(r) => {
            if !(r > 0.0) {
                return Err(Error::EmptyRegion);
            }
            ((0..n).filter(|&i| d[i] < r).collect(), r)
        }
        Region::Fraction(f) => {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidInput(format!("region fraction {f}")));
            }
            let m = ((f * n as f64).ceil() as usize).clamp(1, n);
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
            order.truncate(m);
            let rho = d[order[m - 1]].max(f64::MIN_POSITIVE);
            order.sort_unstable();
            (order, rho)
        }
    };
    if inside.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let mid = centroid(pts);
    let mut out = pts.to_vec();
    let mut labels = vec![false; n];
    let mut keep = vec![true; n];
    match spec.kind {
        AnomalyKind::Bulge | AnomalyKind::Dent => {
            let sign = if spec.kind == AnomalyKind::Bulge { 1.0 } else { -1.0 };
            for &i in &inside {
                let t = (d[i] / rho).min(1.0);
                let dir = (pts[i] - mid).normalized().unwrap_or(Point3::new(0.0, 0.0, 1.0));
                out[i] = pts[i] + dir * (sign * spec.magnitude * (1.0 - t * t / 2.0));
                labels[i] = true;
            }
        }
        AnomalyKind::Spike => {
            let dir = (center - mid).normalized().unwrap_or(Point3::new(0.0, 0.0, 1.0));
            for &i in &inside {
                let t = (d[i] / rho).min(1.0);
                out[i] = pts[i] + dir * (spec.magnitude * (1.0 - 0.75 * t));
                labels[i] = true;
            }
        }
        AnomalyKind::CrackRemoval => {
            if inside.len() == n {
                return Err(Error::InvalidInput("crack would remove every point".into()));
            }
            for &i in &inside {
                keep[i] = false;
            }
            for i in 0..n {
                if keep[i] && d[i] < CRACK_RING * rho {
                    labels[i] = true;
                }
            }
        }
    }
    let (pts, labels): (Vec<Point3>, Vec<bool>) = out
        .into_iter()
        .zip(labels)
        .zip(keep)
        .filter_map(|(pl, k)| k.then_some(pl))
        .unzip();
    PointCloud::with_labels(format!("{}-{}", normal.id(), spec.kind.name()), pts, labels)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub categories: Vec<Primitive>,
    pub n: usize,
    pub jitter: f64,
    pub train: usize,
    pub test_normal: usize,
    pub test_anomalous: usize,
    /// Cycled over the anomalous test samples.
    pub anomaly_kinds: Vec<AnomalyKind>,
    pub region_fraction: f64,
    pub magnitude: f64,
    pub spike_magnitude: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            categories: Primitive::ALL.to_vec(),
            n: 2048,
            jitter: 0.005,
            train: 16,
            test_normal: 10,
            test_anomalous: 10,
            anomaly_kinds: vec![AnomalyKind::Bulge, AnomalyKind::Dent, AnomalyKind::Spike],
            region_fraction: 0.05,
            magnitude: 0.25,
            spike_magnitude: 0.4,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub category: Primitive,
    pub split: Split,
    pub anomaly: Option<AnomalyKind>,
    pub cloud: PointCloud,
}

/// Generates every sample of a corpus in a fixed order.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Vec<Sample>> {
    if spec.anomaly_kinds.is_empty() && spec.test_anomalous > 0 {
        return Err(Error::InvalidInput("no anomaly kinds".into()));
    }
    let mut out = Vec::new();
    for (ci, &cat) in spec.categories.iter().enumerate() {
        let shape = |slot: u64| ShapeSpec {
            kind: cat,
            n: spec.n,
            jitter: spec.jitter,
            seed: mix_seed(spec.seed, ci as u64, slot),
        };
        let name = cat.name();
        for i in 0..spec.train {
            let mut c = gen_normal(&shape(i as u64))?;
            c.set_id(format!("{name}_train_{i:03}"));
            out.push(Sample { category: cat, split: Split::Train, anomaly: None, cloud: c });
        }
        for i in 0..spec.test_normal {
            let mut c = gen_normal(&shape(1000 + i as u64))?;
            c.set_id(format!("{name}_good_{i:03}"));
            out.push(Sample { category: cat, split: Split::Test, anomaly: None, cloud: c });
        }
        for i in 0..spec.test_anomalous {
            let base = gen_normal(&shape(2000 + i as u64))?;
            let kind = spec.anomaly_kinds[i % spec.anomaly_kinds.len()];
            let magnitude = if kind == AnomalyKind::Spike { spec.spike_magnitude } else { spec.magnitude };
            let mut c = gen_anomalous(
                &base,
                &AnomalySpec {
                    kind,
                    region: Region::Fraction(spec.region_fraction),
                    magnitude,
                    seed: mix_seed(spec.seed, ci as u64, 3000 + i as u64),
                    center: None,
                },
            )?;
            c.set_id(format!("{name}_{}_{i:03}", kind.name()));
            out.push(Sample { category: cat, split: Split::Test, anomaly: Some(kind), cloud: c });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub category: Primitive,
    pub split: Split,
    pub anomaly: Option<AnomalyKind>,
    /// Relative to the corpus directory.
    pub path: String,
    pub points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: CorpusSpec,
    pub samples: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `<dir>/<category>/<split>/<id>.xyz` plus `manifest.json`.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec, samples: &[Sample]) -> Result<CorpusManifest> {
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        let split = match s.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let rel = PathBuf::from(s.category.name()).join(split).join(format!("{}.xyz", s.cloud.id()));
        let full = dir.join(&rel);
        fs::create_dir_all(full.parent().expect("has parent"))?;
        write_xyz(&full, &s.cloud)?;
        entries.push(ManifestEntry {
            id: s.cloud.id().to_string(),
            category: s.category,
            split: s.split,
            anomaly: s.anomaly,
            path: rel.to_string_lossy().replace('\\', "/"),
            points: s.cloud.len(),
        });
    }
    let manifest = CorpusManifest {
        spec: spec.clone(),
        samples: entries,
    };
    fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<CorpusManifest> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(Error::MissingCorpus(path.display().to_string()));
    }
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}
