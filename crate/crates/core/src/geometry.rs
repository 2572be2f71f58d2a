//! Point-cloud container and the deterministic geometric kernels used by
//! every stage of the pipeline: normalization, farthest-point sampling,
//! k-nearest-neighbor queries and patch grouping.
//!
//! Ties are always broken towards the lower index so the results can be
//! compared exactly against brute-force scans.

use std::cmp::Ordering;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Point3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Point3 {
    pub const ORIGIN: Point3 = Point3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Point3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dist2(self, o: Point3) -> f64 {
        let dx = self.x - o.x;
        let dy = self.y - o.y;
        let dz = self.z - o.z;
        dx * dx + dy * dy + dz * dz
    }

    pub fn dist(self, o: Point3) -> f64 {
        self.dist2(o).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Unit vector in the same direction, or `None` for the zero vector.
    pub fn normalized(self) -> Option<Point3> {
        let n = self.norm();
        (n > 0.0).then(|| self * (1.0 / n))
    }
}

impl Add for Point3 {
    type Output = Point3;
    fn add(self, o: Point3) -> Point3 {
        Point3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Point3 {
    fn add_assign(&mut self, o: Point3) {
        self.x += o.x;
        self.y += o.y;
        self.z += o.z;
    }
}

impl Sub for Point3 {
    type Output = Point3;
    fn sub(self, o: Point3) -> Point3 {
        Point3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Point3 {
    type Output = Point3;
    fn mul(self, s: f64) -> Point3 {
        Point3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Point3 {
    type Output = Point3;
    fn neg(self) -> Point3 {
        Point3::new(-self.x, -self.y, -self.z)
    }
}

/// Ordered point list with optional per-point anomaly labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point3>,
    labels: Option<Vec<bool>>,
    id: String,
}

impl PointCloud {
    pub fn new(id: impl Into<String>, points: Vec<Point3>) -> Result<Self> {
        Self::build(id.into(), points, None)
    }

    pub fn with_labels(
        id: impl Into<String>,
        points: Vec<Point3>,
        labels: Vec<bool>,
    ) -> Result<Self> {
        Self::build(id.into(), points, Some(labels))
    }

    fn build(id: String, points: Vec<Point3>, labels: Option<Vec<bool>>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptySet);
        }
        if let Some(i) = points.iter().position(|p| !p.is_finite()) {
            return Err(Error::InvalidInput(format!("point {i} is not finite")));
        }
        if let Some(l) = &labels {
            if l.len() != points.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} labels for {} points",
                    l.len(),
                    points.len()
                )));
            }
        }
        Ok(Self { points, labels, id })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn set_id(&mut self, id: impl Into<String>) {
        self.id = id.into();
    }

    pub fn into_parts(self) -> (String, Vec<Point3>, Option<Vec<bool>>) {
        (self.id, self.points, self.labels)
    }

    /// Keeps the points at the given indices (labels follow).
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let points = indices.iter().map(|&i| self.points[i]).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        Self::build(self.id.clone(), points, labels)
    }

    pub fn centroid(&self) -> Point3 {
        centroid(&self.points)
    }
}

pub fn centroid(points: &[Point3]) -> Point3 {
    let mut acc = Point3::ORIGIN;
    for &p in points {
        acc += p;
    }
    acc * (1.0 / points.len() as f64)
}

/// Affine map taking a raw cloud to centroid-origin, unit max-norm coordinates.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NormalizationParams {
    pub centroid: [f64; 3],
    pub scale: f64,
}

impl NormalizationParams {
    pub fn apply(&self, p: Point3) -> Point3 {
        (p - Point3::from_array(self.centroid)) * (1.0 / self.scale)
    }

    pub fn invert(&self, p: Point3) -> Point3 {
        p * self.scale + Point3::from_array(self.centroid)
    }

    pub fn apply_cloud(&self, cloud: &PointCloud) -> PointCloud {
        map_points(cloud, |p| self.apply(p))
    }

    pub fn invert_cloud(&self, cloud: &PointCloud) -> PointCloud {
        map_points(cloud, |p| self.invert(p))
    }
}

fn map_points(cloud: &PointCloud, f: impl Fn(Point3) -> Point3) -> PointCloud {
    PointCloud {
        points: cloud.points.iter().map(|&p| f(p)).collect(),
        labels: cloud.labels.clone(),
        id: cloud.id.clone(),
    }
}

/// Centroid and max-norm of a cloud, without rescaling it.
pub fn normalization_params(cloud: &PointCloud) -> Result<NormalizationParams> {
    let c = cloud.centroid();
    let scale = cloud
        .points
        .iter()
        .map(|&p| (p - c).norm())
        .fold(0.0f64, f64::max);
    let magnitude = cloud
        .points
        .iter()
        .map(|p| p.x.abs().max(p.y.abs()).max(p.z.abs()))
        .fold(1.0f64, f64::max);
    if scale <= 1e-12 * magnitude {
        return Err(Error::DegenerateCloud);
    }
    Ok(NormalizationParams {
        centroid: c.to_array(),
        scale,
    })
}

pub fn normalize(cloud: &PointCloud) -> Result<(PointCloud, NormalizationParams)> {
    let params = normalization_params(cloud)?;
    Ok((params.apply_cloud(cloud), params))
}

/// Index of the point farthest from the centroid (lowest index on ties).
pub fn default_seed_index(points: &[Point3]) -> usize {
    let c = centroid(points);
    let mut best = 0;
    let mut best_d = f64::NEG_INFINITY;
    for (i, &p) in points.iter().enumerate() {
        let d = p.dist2(c);
        if d > best_d {
            best = i;
            best_d = d;
        }
    }
    best
}

/// Greedy farthest-point sampling starting from `seed_index`.
pub fn fps(points: &[Point3], g: usize, seed_index: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if g == 0 || g > n {
        return Err(Error::OutOfRange {
            what: "sample count",
            value: g,
            limit: n,
        });
    }
    if seed_index >= n {
        return Err(Error::OutOfRange {
            what: "seed index",
            value: seed_index,
            limit: n.saturating_sub(1),
        });
    }
    let mut picked = Vec::with_capacity(g);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = seed_index;
    loop {
        picked.push(current);
        taken[current] = true;
        if picked.len() == g {
            break;
        }
        let c = points[current];
        let mut best = usize::MAX;
        let mut best_d = f64::NEG_INFINITY;
        for i in 0..n {
            let d = points[i].dist2(c);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && min_d[i] > best_d {
                best_d = min_d[i];
                best = i;
            }
        }
        current = best;
    }
    Ok(picked)
}

fn by_dist_then_index(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Indices and squared distances of the `k` nearest points, ascending.
pub fn knn_with_dist2(query: Point3, points: &[Point3], k: usize) -> Result<Vec<(f64, usize)>> {
    let n = points.len();
    if k > n {
        return Err(Error::OutOfRange {
            what: "neighbor count",
            value: k,
            limit: n,
        });
    }
    if k == 0 {
        return Ok(Vec::new());
    }
    let mut all: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, &p)| (p.dist2(query), i))
        .collect();
    if k < n {
        all.select_nth_unstable_by(k - 1, by_dist_then_index);
        all.truncate(k);
    }
    all.sort_unstable_by(by_dist_then_index);
    Ok(all)
}

pub fn knn(query: Point3, points: &[Point3], k: usize) -> Result<Vec<usize>> {
    Ok(knn_with_dist2(query, points, k)?
        .into_iter()
        .map(|(_, i)| i)
        .collect())
}

pub fn nn_distance(p: Point3, points: &[Point3]) -> Result<f64> {
    if points.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(points
        .iter()
        .map(|&q| p.dist2(q))
        .fold(f64::INFINITY, f64::min)
        .sqrt())
}

/// One group: an FPS center and its K nearest neighbors in the source cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub center: Point3,
    pub center_index: usize,
    pub neighbors: Vec<Point3>,
    pub neighbor_indices: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Patch>,
    pub source_id: String,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    /// Neighbor count per patch (uniform across the set).
    pub fn k(&self) -> usize {
        self.patches.first().map_or(0, |p| p.neighbors.len())
    }

    pub fn centers(&self) -> Vec<Point3> {
        self.patches.iter().map(|p| p.center).collect()
    }
}

/// Splits a cloud into `g` overlapping patches of `k` neighbors each.
pub fn group(cloud: &PointCloud, g: usize, k: usize) -> Result<PatchSet> {
    let pts = cloud.points();
    if k == 0 {
        return Err(Error::OutOfRange {
            what: "neighbor count",
            value: k,
            limit: pts.len(),
        });
    }
    let centers = fps(pts, g, default_seed_index(pts))?;
    let patches = centers
        .into_iter()
        .map(|ci| {
            let neighbor_indices = knn(pts[ci], pts, k)?;
            Ok(Patch {
                center: pts[ci],
                center_index: ci,
                neighbors: neighbor_indices.iter().map(|&j| pts[j]).collect(),
                neighbor_indices,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PatchSet {
        patches,
        source_id: cloud.id().to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(pts: &[[f64; 3]]) -> PointCloud {
        PointCloud::new("t", pts.iter().map(|&a| Point3::from_array(a)).collect()).unwrap()
    }

    #[test]
    fn normalize_rejects_coincident_points() {
        let c = cloud(&[[1.0, 1.0, 1.0], [1.0, 1.0, 1.0]]);
        assert!(matches!(normalize(&c), Err(Error::DegenerateCloud)));
    }

    #[test]
    fn normalize_two_points() {
        let c = cloud(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]);
        let (n, p) = normalize(&c).unwrap();
        assert_eq!(n.points()[0], Point3::new(-1.0, 0.0, 0.0));
        assert_eq!(n.points()[1], Point3::new(1.0, 0.0, 0.0));
        assert_eq!(p.centroid, [1.0, 0.0, 0.0]);
        assert_eq!(p.scale, 1.0);
    }

    #[test]
    fn normalize_is_idempotent() {
        let c = cloud(&[[0.0, 0.0, 0.0], [2.0, 1.0, 0.0], [0.5, -3.0, 1.0]]);
        let (once, _) = normalize(&c).unwrap();
        let (twice, p) = normalize(&once).unwrap();
        assert!(Point3::from_array(p.centroid).norm() < 1e-12);
        assert!((p.scale - 1.0).abs() < 1e-12);
        for (a, b) in once.points().iter().zip(twice.points()) {
            assert!(a.dist(*b) < 1e-12);
        }
    }

    #[test]
    fn fps_small_cases() {
        let pts = [
            Point3::new(0.0, 0.0, 0.0),
            Point3::new(0.1, 0.0, 0.0),
            Point3::new(5.0, 0.0, 0.0),
        ];
        assert_eq!(fps(&pts, 2, 0).unwrap(), vec![0, 2]);
        assert_eq!(fps(&pts, 1, 1).unwrap(), vec![1]);
        let mut all = fps(&pts, 3, 1).unwrap();
        all.sort();
        assert_eq!(all, vec![0, 1, 2]);
        assert!(matches!(fps(&pts, 4, 0), Err(Error::OutOfRange { .. })));
        assert!(matches!(fps(&pts, 1, 3), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn fps_distinct_with_duplicates() {
        let pts = vec![Point3::new(1.0, 0.0, 0.0); 4];
        assert_eq!(fps(&pts, 4, 2).unwrap(), vec![2, 0, 1, 3]);
    }

    #[test]
    fn knn_order_and_ties() {
        let pts = [
            Point3::new(3.0, 0.0, 0.0),
            Point3::new(1.0, 0.0, 0.0),
            Point3::new(2.0, 0.0, 0.0),
        ];
        assert_eq!(knn(Point3::ORIGIN, &pts, 2).unwrap(), vec![1, 2]);
        assert_eq!(knn(Point3::ORIGIN, &pts, 3).unwrap(), vec![1, 2, 0]);
        let dup = [Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 1.0, 0.0)];
        assert_eq!(knn(Point3::ORIGIN, &dup, 2).unwrap(), vec![0, 1]);
        assert!(knn(Point3::ORIGIN, &dup, 3).is_err());
    }

    #[test]
    fn nn_distance_cases() {
        let pts = [Point3::new(1.0, 0.0, 0.0), Point3::new(0.0, 2.0, 0.0)];
        assert_eq!(nn_distance(Point3::ORIGIN, &pts).unwrap(), 1.0);
        assert_eq!(nn_distance(pts[1], &pts).unwrap(), 0.0);
        assert!(nn_distance(Point3::ORIGIN, &[]).is_err());
    }

    #[test]
    fn group_extremes() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]]);
        let one = group(&c, 1, 4).unwrap();
        assert_eq!(one.len(), 1);
        let mut idx = one.patches[0].neighbor_indices.clone();
        idx.sort();
        assert_eq!(idx, vec![0, 1, 2, 3]);

        let all = group(&c, 4, 1).unwrap();
        for p in &all.patches {
            assert_eq!(p.neighbor_indices, vec![p.center_index]);
        }
    }

    #[test]
    fn labels_must_match_length() {
        let r = PointCloud::with_labels("x", vec![Point3::ORIGIN], vec![true, false]);
        assert!(matches!(r, Err(Error::ShapeMismatch(_))));
        let r = PointCloud::new("x", vec![Point3::new(f64::NAN, 0.0, 0.0)]);
        assert!(r.is_err());
    }
}
