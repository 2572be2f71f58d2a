//! Multi-scale upsampling network.
//!
//! Predicted centers are abstracted at scales 1, 1/2 and 1/4, the coarse
//! features are interpolated back onto the centers, fused pairwise and a
//! head regresses `γ` points per center.

use serde::{Deserialize, Serialize};

use crate::down_net::{down_forward, points_from_rows, rows_from_points, DownNetModel};
use crate::error::{Error, Result};
use crate::geometry::{default_seed_index, fps, group, knn_with_dist2, normalize, Point3, PointCloud};
use crate::losses::{up_loss, EmdMode, UpTerms};
use crate::nn::{AdamConfig, Checkpoint, Dtype, Graph, InitRng, Mlp, MlpSpec, ParamStore, Tensor, Var};
use crate::noise::{inject, mix_seed, NoiseParams, NoisyPatchSet};

pub const INTERP_EPS: f64 = 1e-9;

/// How head outputs become points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum UpOutput {
    /// Head outputs are the points.
    Absolute,
    /// Head outputs are added to the generating center.
    Offset,
    /// `center + radius·tanh(head)`: every point stays within `radius` of its center per axis.
    #[default]
    Bounded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpNetConfig {
    pub gamma: usize,
    /// Neighborhood size for set abstraction.
    pub sa_k: usize,
    pub sa_width: usize,
    pub conv_width: usize,
    pub head_hidden: usize,
    pub output: UpOutput,
    /// Per-axis reach of `Bounded` outputs in normalized units.
    pub offset_radius: f64,
}

impl Default for UpNetConfig {
    fn default() -> Self {
        Self {
            gamma: 4,
            sa_k: 8,
            sa_width: 64,
            conv_width: 64,
            head_hidden: 128,
            output: UpOutput::Bounded,
            offset_radius: 0.15,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UpNetModel {
    pub config: UpNetConfig,
    pub store: ParamStore,
    sa: [Mlp; 2],
    conv: [Mlp; 3],
    fuse: [Mlp; 2],
    head: Mlp,
}

/// Points and features at scales 1, 1/2 and 1/4.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalePyramid {
    pub points: [Vec<Point3>; 3],
    pub features: [Tensor; 3],
}

pub fn level_sizes(g: usize) -> [usize; 3] {
    [g, (g / 2).max(1), (g / 4).max(1)]
}

/// FPS-selects the coarser levels from the centers.
pub fn build_levels(centers: &[Point3]) -> Result<[Vec<Point3>; 3]> {
    let sizes = level_sizes(centers.len());
    let l0 = centers.to_vec();
    let i1 = fps(&l0, sizes[1], default_seed_index(&l0))?;
    let l1: Vec<Point3> = i1.iter().map(|&i| l0[i]).collect();
    let i2 = fps(&l1, sizes[2], default_seed_index(&l1))?;
    let l2: Vec<Point3> = i2.iter().map(|&i| l1[i]).collect();
    Ok([l0, l1, l2])
}

/// For each next-level point: shared MLP over `[p_j − p_i ; F_j]` for its
/// `k` nearest previous-level points, max-pooled.
pub fn set_abstraction(
    g: &mut Graph,
    store: &ParamStore,
    mlp: &Mlp,
    prev_pts: &[Point3],
    prev_feats: Var,
    next_pts: &[Point3],
    k: usize,
) -> Result<Var> {
    if prev_pts.is_empty() || k == 0 {
        return Err(Error::EmptyNeighborhood(0));
    }
    if g.shape(prev_feats).0 != prev_pts.len() {
        return Err(Error::ShapeMismatch("features not row-aligned with points".into()));
    }
    let kk = k.min(prev_pts.len());
    let mut idx = Vec::with_capacity(next_pts.len() * kk);
    let mut offsets = Vec::with_capacity(next_pts.len() * kk * 3);
    for (i, &p) in next_pts.iter().enumerate() {
        let nb = knn_with_dist2(p, prev_pts, kk)?;
        if nb.is_empty() {
            return Err(Error::EmptyNeighborhood(i));
        }
        for &(_, j) in &nb {
            idx.push(j);
            offsets.extend((prev_pts[j] - p).to_array());
        }
    }
    let off = g.input(idx.len(), 3, offsets)?;
    let gathered = g.gather_rows(prev_feats, idx)?;
    let x = g.concat_cols(&[off, gathered])?;
    let h = mlp.forward(g, store, x)?;
    g.segment_max(h, kk)
}

/// Neighbor indices and normalized inverse-distance weights, 3 per target
/// (fewer when the source is smaller).
pub fn interp_table(target: &[Point3], source: &[Point3]) -> Result<(Vec<usize>, Vec<f64>, usize)> {
    if source.is_empty() {
        return Err(Error::EmptySet);
    }
    let per = source.len().min(3);
    let mut idx = Vec::with_capacity(target.len() * per);
    let mut w = Vec::with_capacity(target.len() * per);
    for &t in target {
        let nb = knn_with_dist2(t, source, per)?;
        let raw: Vec<f64> = nb.iter().map(|&(d2, _)| 1.0 / d2.sqrt().max(INTERP_EPS)).collect();
        let sum: f64 = raw.iter().sum();
        for (&(_, j), r) in nb.iter().zip(raw) {
            idx.push(j);
            w.push(r / sum);
        }
    }
    Ok((idx, w, per))
}

pub fn tri_interpolate(target: &[Point3], source: &[Point3], source_feats: &Tensor) -> Result<Tensor> {
    if source_feats.rows() != source.len() {
        return Err(Error::ShapeMismatch("features not row-aligned with points".into()));
    }
    let (idx, w, per) = interp_table(target, source)?;
    let c = source_feats.cols();
    let mut out = vec![0.0; target.len() * c];
    for (i, o) in out.chunks_exact_mut(c.max(1)).enumerate().take(target.len()) {
        for j in i * per..(i + 1) * per {
            for (ov, sv) in o.iter_mut().zip(source_feats.row(idx[j])) {
                *ov += w[j] * sv;
            }
        }
    }
    Tensor::matrix(target.len(), c, out)
}

fn interp_var(g: &mut Graph, target: &[Point3], source: &[Point3], feats: Var) -> Result<Var> {
    let (idx, w, per) = interp_table(target, source)?;
    g.interp_rows(feats, idx, w, per)
}

impl UpNetModel {
    pub fn new(config: UpNetConfig, seed: u64) -> Result<Self> {
        if config.gamma == 0 || config.sa_k == 0 {
            return Err(Error::InvalidInput("gamma and sa_k must be positive".into()));
        }
        if config.output == UpOutput::Bounded && !(config.offset_radius.is_finite() && config.offset_radius > 0.0) {
            return Err(Error::InvalidInput(format!("offset radius {}", config.offset_radius)));
        }
        let mut store = ParamStore::new();
        let mut rng = InitRng::new(seed);
        let (s, c) = (config.sa_width, config.conv_width);
        let mut mlp = |name: &str, widths: &[usize], linear_last: bool| {
            Mlp::new(&mut store, name, MlpSpec::new(widths, linear_last), &mut rng)
        };
        let sa = [
            mlp("up.sa1", &[6, s, s], false)?,
            mlp("up.sa2", &[3 + s, s, s], false)?,
        ];
        let conv = [
            mlp("up.conv0", &[3, c, c, c], false)?,
            mlp("up.conv1", &[s, c, c, c], false)?,
            mlp("up.conv2", &[s, c, c, c], false)?,
        ];
        let fuse = [
            mlp("up.fuse_a", &[2 * c, c], false)?,
            mlp("up.fuse_b", &[2 * c, c], false)?,
        ];
        let head = mlp("up.head", &[2 * c, config.head_hidden, 3 * config.gamma], true)?;
        Ok(Self {
            config,
            store,
            sa,
            conv,
            fuse,
            head,
        })
    }

    /// Records the forward pass; returns the `(G·γ)×3` node and the levels.
    pub fn forward_graph(&self, g: &mut Graph, centers: &[Point3]) -> Result<(Var, [Vec<Point3>; 3], [Var; 3])> {
        let n = centers.len();
        if n < 4 {
            return Err(Error::ShapeMismatch(format!(
                "up-net needs at least 4 centers, got {n}"
            )));
        }
        let levels = build_levels(centers)?;
        let st = &self.store;
        let k = self.config.sa_k;
        let f0 = g.input(n, 3, rows_from_points(centers))?;
        let f1 = set_abstraction(g, st, &self.sa[0], &levels[0], f0, &levels[1], k)?;
        let f2 = set_abstraction(g, st, &self.sa[1], &levels[1], f1, &levels[2], k)?;
        let f1u = interp_var(g, &levels[0], &levels[1], f1)?;
        let f2u = interp_var(g, &levels[0], &levels[2], f2)?;
        let c0 = self.conv[0].forward(g, st, f0)?;
        let c1 = self.conv[1].forward(g, st, f1u)?;
        let c2 = self.conv[2].forward(g, st, f2u)?;
        let a_in = g.concat_cols(&[c0, c1])?;
        let a = self.fuse[0].forward(g, st, a_in)?;
        let b_in = g.concat_cols(&[c1, c2])?;
        let b = self.fuse[1].forward(g, st, b_in)?;
        let ab = g.concat_cols(&[a, b])?;
        let mut out = self.head.forward(g, st, ab)?;
        if self.config.output == UpOutput::Bounded {
            let t = g.tanh(out);
            out = g.scale(t, self.config.offset_radius);
        }
        if self.config.output != UpOutput::Absolute {
            let gamma = self.config.gamma;
            let rep: Vec<f64> = centers
                .iter()
                .flat_map(|c| std::iter::repeat_n(c.to_array(), gamma).flatten())
                .collect();
            let base = g.input(n, 3 * gamma, rep)?;
            out = g.add(out, base)?;
        }
        let pts = g.reshape(out, n * self.config.gamma, 3)?;
        Ok((pts, levels, [f0, f1, f2]))
    }

    pub fn to_checkpoint(&self, config_hash: &str, meta: serde_json::Value, dtype: Dtype) -> Result<Checkpoint> {
        let meta = serde_json::json!({ "config": self.config, "extra": meta });
        Ok(Checkpoint::from_store("up", config_hash, meta, &self.store, dtype))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.manifest.kind != "up" {
            return Err(Error::Checkpoint(format!(
                "expected an up checkpoint, found `{}`",
                ck.manifest.kind
            )));
        }
        let config: UpNetConfig = serde_json::from_value(ck.manifest.meta["config"].clone())?;
        let mut model = Self::new(config, 0)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }
}

pub fn up_forward(model: &UpNetModel, centers: &[Point3]) -> Result<Vec<Point3>> {
    let mut g = Graph::new();
    let (out, _, _) = model.forward_graph(&mut g, centers)?;
    Ok(points_from_rows(g.value(out)))
}

/// Forward pass that also returns the scale pyramid.
pub fn up_forward_pyramid(model: &UpNetModel, centers: &[Point3]) -> Result<(Vec<Point3>, ScalePyramid)> {
    let mut g = Graph::new();
    let (out, points, f) = model.forward_graph(&mut g, centers)?;
    let features = [g.tensor(f[0]), g.tensor(f[1]), g.tensor(f[2])];
    Ok((points_from_rows(g.value(out)), ScalePyramid { points, features }))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpTrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub terms: UpTerms,
    pub emd: EmdMode,
    pub rep_k: usize,
    /// Repulsion length scale in normalized units.
    pub rep_h: f64,
    /// Corrupt patches before the frozen Down-Net; `None` feeds clean patches.
    pub noise: Option<NoiseParams>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct UpEpochLog {
    pub epoch: usize,
    pub rep: f64,
    pub emd: f64,
    pub total: f64,
}

/// Frozen-Down-Net centers and the dense target for one training cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct UpSample {
    pub centers: Vec<Point3>,
    pub gt: Vec<Point3>,
}

pub fn prepare_up_samples(
    down: &DownNetModel,
    clouds: &[PointCloud],
    gamma: usize,
    noise: Option<&NoiseParams>,
) -> Result<Vec<UpSample>> {
    let (gc, kc) = (down.config.g, down.config.k);
    clouds
        .iter()
        .enumerate()
        .map(|(ci, c)| {
            let (norm, _) = normalize(c)?;
            let ps = group(&norm, gc, kc)?;
            let noisy = match noise {
                Some(p) => inject(&ps, &p.with_seed(mix_seed(p.seed, u64::MAX, ci as u64)))?,
                None => NoisyPatchSet::clean(&ps),
            };
            let centers = down_forward(down, &noisy)?.predicted;
            let pts = norm.points();
            let m = (gc * gamma).min(pts.len());
            let gt = fps(pts, m, default_seed_index(pts))?
                .into_iter()
                .map(|i| pts[i])
                .collect();
            Ok(UpSample { centers, gt })
        })
        .collect()
}

pub fn up_step(model: &mut UpNetModel, sample: &UpSample, cfg: &UpTrainConfig) -> Result<UpEpochLog> {
    let mut g = Graph::new();
    let (out, _, _) = model.forward_graph(&mut g, &sample.centers)?;
    let pred = points_from_rows(g.value(out));
    let l = up_loss(&pred, &sample.gt, cfg.rep_k, cfg.rep_h, cfg.terms, cfg.emd)?;
    let root = g.custom_scalar(out, l.total, l.grad)?;
    g.backward(root);
    model.store.zero_grad();
    model.store.accumulate(&g);
    model.store.adam_step(&cfg.adam)?;
    Ok(UpEpochLog {
        epoch: 0,
        rep: l.rep,
        emd: l.emd,
        total: l.total,
    })
}

pub fn train_up_samples(
    model: &mut UpNetModel,
    samples: &[UpSample],
    cfg: &UpTrainConfig,
    mut on_epoch: impl FnMut(&UpEpochLog),
) -> Result<Vec<UpEpochLog>> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("no training clouds".into()));
    }
    if !(cfg.terms.rep || cfg.terms.emd) {
        return Err(Error::InvalidInput("all up-net loss terms disabled".into()));
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = UpEpochLog {
            epoch: epoch + 1,
            ..Default::default()
        };
        for s in samples {
            let l = up_step(model, s, cfg)?;
            acc.rep += l.rep;
            acc.emd += l.emd;
            acc.total += l.total;
        }
        let inv = 1.0 / samples.len() as f64;
        acc.rep *= inv;
        acc.emd *= inv;
        acc.total *= inv;
        on_epoch(&acc);
        log.push(acc);
    }
    Ok(log)
}

/// The Down-Net is borrowed immutably, so it stays frozen.
pub fn train_up(
    model: &mut UpNetModel,
    frozen_down: &DownNetModel,
    clouds: &[PointCloud],
    cfg: &UpTrainConfig,
) -> Result<Vec<UpEpochLog>> {
    let samples = prepare_up_samples(frozen_down, clouds, model.config.gamma, cfg.noise.as_ref())?;
    train_up_samples(model, &samples, cfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(n: usize, seed: u64) -> Vec<Point3> {
        let mut rng = crate::noise::NoiseRng::new(seed);
        (0..n)
            .map(|_| Point3::new(rng.standard_normal(), rng.standard_normal(), rng.standard_normal()))
            .collect()
    }

    fn small(gamma: usize) -> UpNetConfig {
        UpNetConfig {
            gamma,
            sa_k: 4,
            sa_width: 8,
            conv_width: 8,
            head_hidden: 8,
            output: UpOutput::Bounded,
            offset_radius: 0.15,
        }
    }

    #[test]
    fn level_schedule() {
        assert_eq!(level_sizes(256), [256, 128, 64]);
        assert_eq!(level_sizes(5), [5, 2, 1]);
        assert_eq!(level_sizes(1), [1, 1, 1]);
    }

    #[test]
    fn output_shapes() {
        let m = UpNetModel::new(small(1), 1).unwrap();
        assert_eq!(up_forward(&m, &pts(4, 2)).unwrap().len(), 4);
        let m = UpNetModel::new(small(8), 1).unwrap();
        assert_eq!(up_forward(&m, &pts(256, 2)).unwrap().len(), 2048);
        assert!(matches!(up_forward(&m, &pts(3, 2)), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn pyramid_rows_align() {
        let m = UpNetModel::new(small(2), 1).unwrap();
        let (_, p) = up_forward_pyramid(&m, &pts(10, 3)).unwrap();
        for l in 0..3 {
            assert_eq!(p.points[l].len(), p.features[l].rows());
        }
        assert_eq!(p.points[1].len(), 5);
        assert_eq!(p.points[2].len(), 2);
    }

    #[test]
    fn interpolation_limits() {
        let src = vec![Point3::new(1., 0., 0.), Point3::new(0., 1., 0.), Point3::new(0., 0., 1.), Point3::new(5., 5., 5.)];
        let f = Tensor::matrix(4, 2, vec![1., 2., 3., 4., 5., 6., 7., 8.]).unwrap();
        let out = tri_interpolate(&[Point3::new(0., 0., 0.)], &src, &f).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 1e-12 && (out.data()[1] - 4.0).abs() < 1e-12);
        let out = tri_interpolate(&[src[1]], &src, &f).unwrap();
        assert!((out.data()[0] - 3.0).abs() < 3.0 * 1e-6);
        let one = tri_interpolate(&src, &src[..1], &Tensor::matrix(1, 1, vec![2.5]).unwrap()).unwrap();
        assert!(one.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
    }

    #[test]
    fn self_only_neighborhood() {
        let m = UpNetModel::new(small(1), 4).unwrap();
        let p = pts(1, 5);
        let mut g = Graph::new();
        let f = g.input(1, 3, vec![0.5, -1.0, 2.0]).unwrap();
        let out = set_abstraction(&mut g, &m.store, &m.sa[0], &p, f, &p, 8).unwrap();
        let direct = m.sa[0]
            .eval(&m.store, &Tensor::matrix(1, 6, vec![0., 0., 0., 0.5, -1.0, 2.0]).unwrap())
            .unwrap();
        assert_eq!(g.value(out), direct.data());
    }
}
