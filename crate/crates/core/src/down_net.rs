//! Center-preserving down-sampling network.
//!
//! Noisy patch centers are embedded by a position MLP, noisy neighbor sets
//! by a mini-PointNet; the concatenated group tokens pass through the
//! attention decoder and a head MLP regresses one clean center per group.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{group, normalize, PatchSet, Point3, PointCloud};
use crate::losses::{down_loss, DownTerms};
use crate::nn::{AdamConfig, Checkpoint, Decoder, DecoderSpec, Dtype, Graph, InitRng, Mlp, MlpSpec, ParamStore, PointNet, Var};
use crate::noise::{inject, mix_seed, NoiseParams, NoisyPatchSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownNetConfig {
    /// Number of groups.
    pub g: usize,
    /// Neighbors per group.
    pub k: usize,
    /// Position-embedding width.
    pub c1: usize,
    /// Patch-feature width.
    pub c2: usize,
    /// Decoder width.
    pub c3: usize,
    pub depth: usize,
    pub heads: usize,
    /// Hidden width of the position MLP, PointNet and head.
    pub hidden: usize,
    /// Feed-forward width inside each decoder block.
    pub ffn: usize,
}

impl Default for DownNetConfig {
    fn default() -> Self {
        Self {
            g: 256,
            k: 32,
            c1: 64,
            c2: 64,
            c3: 128,
            depth: 2,
            heads: 4,
            hidden: 64,
            ffn: 256,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DownNetModel {
    pub config: DownNetConfig,
    pub store: ParamStore,
    pos_mlp: Mlp,
    pointnet: PointNet,
    decoder: Decoder,
    head: Mlp,
}

/// Predicted centers, index-aligned with the clean FPS centers.
#[derive(Debug, Clone, PartialEq)]
pub struct CenterPrediction {
    pub predicted: Vec<Point3>,
    pub target: Vec<Point3>,
}

impl CenterPrediction {
    pub fn mean_error(&self) -> f64 {
        self.predicted
            .iter()
            .zip(&self.target)
            .map(|(p, t)| p.dist(*t))
            .sum::<f64>()
            / self.predicted.len().max(1) as f64
    }
}

pub(crate) fn points_from_rows(data: &[f64]) -> Vec<Point3> {
    data.chunks_exact(3)
        .map(|c| Point3::new(c[0], c[1], c[2]))
        .collect()
}

pub(crate) fn rows_from_points(points: &[Point3]) -> Vec<f64> {
    points.iter().flat_map(|p| p.to_array()).collect()
}

impl DownNetModel {
    pub fn new(config: DownNetConfig, seed: u64) -> Result<Self> {
        if config.g == 0 || config.k == 0 {
            return Err(Error::InvalidInput("G and K must be positive".into()));
        }
        let mut store = ParamStore::new();
        let mut rng = InitRng::new(seed);
        let pos_mlp = Mlp::new(
            &mut store,
            "down.pos",
            MlpSpec::new(&[3, config.hidden, config.c1], true),
            &mut rng,
        )?;
        let pointnet = PointNet::new(
            &mut store,
            "down.pointnet",
            MlpSpec::new(&[3, config.hidden, config.c2], true),
            &mut rng,
        )?;
        let decoder = Decoder::new(
            &mut store,
            "down.decoder",
            DecoderSpec {
                input: config.c1 + config.c2,
                width: config.c3,
                depth: config.depth,
                heads: config.heads,
                ffn: config.ffn,
            },
            &mut rng,
        )?;
        let head = Mlp::new(
            &mut store,
            "down.head",
            MlpSpec::new(&[config.c3, config.hidden, 3], true),
            &mut rng,
        )?;
        Ok(Self {
            config,
            store,
            pos_mlp,
            pointnet,
            decoder,
            head,
        })
    }

    /// Records the forward pass; returns the `G×3` prediction node.
    pub fn forward_graph(&self, g: &mut Graph, noisy: &NoisyPatchSet) -> Result<Var> {
        let groups = noisy.len();
        let k = noisy.k();
        if groups == 0 || k == 0 || noisy.patches.iter().any(|p| p.neighbors.len() != k) {
            return Err(Error::ShapeMismatch(
                "noisy patch set must have G >= 1 patches of equal K >= 1".into(),
            ));
        }
        let centers: Vec<Point3> = noisy.patches.iter().map(|p| p.center).collect();
        let nbrs: Vec<f64> = noisy
            .patches
            .iter()
            .flat_map(|p| p.neighbors.iter().flat_map(|q| q.to_array()))
            .collect();
        let c = g.input(groups, 3, rows_from_points(&centers))?;
        let n = g.input(groups * k, 3, nbrs)?;
        let e_c = self.pos_mlp.forward(g, &self.store, c)?;
        let e_p = self.pointnet.forward(g, &self.store, n, k)?;
        let tokens = g.concat_cols(&[e_c, e_p])?;
        let e_f = self.decoder.forward(g, &self.store, tokens)?.features;
        self.head.forward(g, &self.store, e_f)
    }

    pub fn to_checkpoint(&self, config_hash: &str, meta: serde_json::Value, dtype: Dtype) -> Result<Checkpoint> {
        let meta = serde_json::json!({ "config": self.config, "extra": meta });
        Ok(Checkpoint::from_store("down", config_hash, meta, &self.store, dtype))
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.manifest.kind != "down" {
            return Err(Error::Checkpoint(format!(
                "expected a down checkpoint, found `{}`",
                ck.manifest.kind
            )));
        }
        let config: DownNetConfig = serde_json::from_value(ck.manifest.meta["config"].clone())?;
        let mut model = Self::new(config, 0)?;
        ck.restore_into(&mut model.store)?;
        Ok(model)
    }
}

pub fn down_forward(model: &DownNetModel, noisy: &NoisyPatchSet) -> Result<CenterPrediction> {
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, noisy)?;
    Ok(CenterPrediction {
        predicted: points_from_rows(g.value(out)),
        target: noisy.clean_centers.clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DownTrainConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    /// `None` trains on clean patches.
    pub noise: Option<NoiseParams>,
    pub terms: DownTerms,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct DownEpochLog {
    pub epoch: usize,
    pub mse: f64,
    pub cos: f64,
    pub chamfer: f64,
    pub total: f64,
}

/// Normalizes and groups every training cloud.
pub fn prepare_patches(clouds: &[PointCloud], g: usize, k: usize) -> Result<Vec<PatchSet>> {
    clouds
        .iter()
        .map(|c| {
            let (n, _) = normalize(c)?;
            group(&n, g, k)
        })
        .collect()
}

/// One optimizer step on one patch set; returns the loss breakdown.
pub fn down_step(
    model: &mut DownNetModel,
    noisy: &NoisyPatchSet,
    cfg: &DownTrainConfig,
) -> Result<DownEpochLog> {
    let mut g = Graph::new();
    let out = model.forward_graph(&mut g, noisy)?;
    let pred = points_from_rows(g.value(out));
    let l = down_loss(&pred, &noisy.clean_centers, cfg.terms)?;
    let root = g.custom_scalar(out, l.total, l.grad)?;
    g.backward(root);
    model.store.zero_grad();
    model.store.accumulate(&g);
    model.store.adam_step(&cfg.adam)?;
    Ok(DownEpochLog {
        epoch: 0,
        mse: l.mse,
        cos: l.cos,
        chamfer: l.chamfer,
        total: l.total,
    })
}

/// Trains on already grouped clouds; one Adam step per cloud per epoch.
pub fn train_down_patches(
    model: &mut DownNetModel,
    sets: &[PatchSet],
    cfg: &DownTrainConfig,
    mut on_epoch: impl FnMut(&DownEpochLog),
) -> Result<Vec<DownEpochLog>> {
    if sets.is_empty() {
        return Err(Error::InvalidInput("no training clouds".into()));
    }
    if !(cfg.terms.mse || cfg.terms.cos || cfg.terms.chamfer) {
        return Err(Error::InvalidInput("all down-net loss terms disabled".into()));
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = DownEpochLog {
            epoch: epoch + 1,
            ..Default::default()
        };
        for (ci, ps) in sets.iter().enumerate() {
            let noisy = match &cfg.noise {
                Some(p) => inject(ps, &p.with_seed(mix_seed(p.seed, epoch as u64, ci as u64)))?,
                None => NoisyPatchSet::clean(ps),
            };
            let s = down_step(model, &noisy, cfg)?;
            acc.mse += s.mse;
            acc.cos += s.cos;
            acc.chamfer += s.chamfer;
            acc.total += s.total;
        }
        let inv = 1.0 / sets.len() as f64;
        acc.mse *= inv;
        acc.cos *= inv;
        acc.chamfer *= inv;
        acc.total *= inv;
        on_epoch(&acc);
        log.push(acc);
    }
    Ok(log)
}

pub fn train_down(
    model: &mut DownNetModel,
    clouds: &[PointCloud],
    cfg: &DownTrainConfig,
) -> Result<Vec<DownEpochLog>> {
    let sets = prepare_patches(clouds, model.config.g, model.config.k)?;
    train_down_patches(model, &sets, cfg, |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> DownNetConfig {
        DownNetConfig {
            g: 4,
            k: 3,
            c1: 4,
            c2: 4,
            c3: 8,
            depth: 1,
            heads: 2,
            hidden: 6,
            ffn: 8,
        }
    }

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = crate::noise::NoiseRng::new(seed);
        let pts = (0..n)
            .map(|_| Point3::new(rng.standard_normal(), rng.standard_normal(), rng.standard_normal()))
            .collect();
        PointCloud::new("c", pts).unwrap()
    }

    #[test]
    fn single_group_prediction() {
        let cfg = DownNetConfig { g: 1, k: 1, ..tiny() };
        let model = DownNetModel::new(cfg, 3).unwrap();
        let ps = prepare_patches(&[cloud(10, 1)], 1, 1).unwrap();
        let pred = down_forward(&model, &NoisyPatchSet::clean(&ps[0])).unwrap();
        assert_eq!(pred.predicted.len(), 1);
        assert!(pred.predicted[0].is_finite());
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut model = DownNetModel::new(tiny(), 3).unwrap();
        let before = model.store.clone();
        let cfg = DownTrainConfig {
            epochs: 0,
            adam: AdamConfig::default(),
            noise: Some(NoiseParams::new(0.08, 0.15, 1)),
            terms: DownTerms::default(),
        };
        train_down(&mut model, &[cloud(20, 2)], &cfg).unwrap();
        assert_eq!(model.store, before);
    }

    #[test]
    fn shape_mismatch_reported() {
        let model = DownNetModel::new(tiny(), 3).unwrap();
        let ps = prepare_patches(&[cloud(20, 1)], 4, 3).unwrap();
        let mut noisy = NoisyPatchSet::clean(&ps[0]);
        noisy.patches[1].neighbors.pop();
        assert!(matches!(down_forward(&model, &noisy), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = DownNetModel::new(tiny(), 9).unwrap();
        let ck = model.to_checkpoint("h", serde_json::Value::Null, Dtype::F64).unwrap();
        let back = DownNetModel::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back.store, model.store);
        assert_eq!(back.config, model.config);
    }
}
