//! Network building blocks: shared MLP, mini-PointNet and a post-norm
//! transformer decoder stack over group tokens.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Graph, Var};
use crate::nn::params::{InitRng, ParamId, ParamStore};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width followed by each layer's output width.
    pub widths: Vec<usize>,
    pub activation: Activation,
    /// Skip the activation after the final layer.
    pub linear_last: bool,
}

impl MlpSpec {
    pub fn new(widths: &[usize], linear_last: bool) -> Self {
        Self {
            widths: widths.to_vec(),
            activation: Activation::Relu,
            linear_last,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || self.widths.contains(&0) {
            return Err(Error::InvalidInput(format!(
                "MLP needs at least one layer of positive width, got {:?}",
                self.widths
            )));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().expect("validated")
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut InitRng,
    ) -> Result<Self> {
        let w = Tensor::matrix(fan_in, fan_out, rng.fan_in_uniform(fan_in, fan_in * fan_out))?;
        let b = Tensor::matrix(1, fan_out, rng.fan_in_uniform(fan_in, fan_out))?;
        Ok(Self {
            weight: store.add(format!("{name}.weight"), w)?,
            bias: store.add(format!("{name}.bias"), b)?,
            fan_in,
            fan_out,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        if g.shape(x).1 != self.fan_in {
            return Err(Error::ShapeMismatch(format!(
                "linear expects width {}, got {}",
                self.fan_in,
                g.shape(x).1
            )));
        }
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub layers: Vec<Linear>,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, spec: MlpSpec, rng: &mut InitRng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], rng))
            .collect::<Result<_>>()?;
        Ok(Self { spec, layers })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mut x: Var) -> Result<Var> {
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            x = layer.forward(g, store, x)?;
            if i < last || !self.spec.linear_last {
                x = match self.spec.activation {
                    Activation::Relu => g.relu(x),
                };
            }
        }
        Ok(x)
    }

    /// Eager evaluation on a `B×D_in` tensor.
    pub fn eval(&self, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.input(x.rows(), x.cols(), x.data().to_vec())?;
        let y = self.forward(&mut g, store, xv)?;
        Ok(g.tensor(y))
    }
}

/// Shared per-point MLP followed by a max over each patch.
#[derive(Debug, Clone)]
pub struct PointNet {
    pub mlp: Mlp,
}

impl PointNet {
    pub fn new(store: &mut ParamStore, name: &str, spec: MlpSpec, rng: &mut InitRng) -> Result<Self> {
        if spec.widths.first() != Some(&3) {
            return Err(Error::InvalidInput("PointNet input width must be 3".into()));
        }
        Ok(Self {
            mlp: Mlp::new(store, name, spec, rng)?,
        })
    }

    /// `points` holds `patches·k` rows of xyz, patch-major.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, points: Var, k: usize) -> Result<Var> {
        if k == 0 {
            return Err(Error::ShapeMismatch("PointNet needs k >= 1".into()));
        }
        let feats = self.mlp.forward(g, store, points)?;
        g.segment_max(feats, k)
    }

    /// Feature of a single `K×3` patch.
    pub fn eval_patch(&self, store: &ParamStore, patch: &Tensor) -> Result<Vec<f64>> {
        if patch.cols() != 3 || patch.rows() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "PointNet patch must be Kx3, got {:?}",
                patch.shape()
            )));
        }
        let mut g = Graph::new();
        let x = g.input(patch.rows(), 3, patch.data().to_vec())?;
        let y = self.forward(&mut g, store, x, patch.rows())?;
        Ok(g.value(y).to_vec())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderSpec {
    pub input: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub ffn: usize,
}

impl DecoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input == 0 || self.width == 0 || self.heads == 0 || self.ffn == 0 {
            return Err(Error::InvalidInput("decoder widths must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidInput(format!(
                "decoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Block {
    qkv: Linear,
    out: Linear,
    ln1: (ParamId, ParamId),
    ff1: Linear,
    ff2: Linear,
    ln2: (ParamId, ParamId),
}

/// Self-attention stack: input projection, then `depth` blocks of
/// attention + residual + layer-norm + feed-forward + residual + layer-norm.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub spec: DecoderSpec,
    in_proj: Linear,
    blocks: Vec<Block>,
}

/// Decoder output plus the per-block, per-head attention matrices.
pub struct DecoderOutput {
    pub features: Var,
    pub attention: Vec<Vec<Var>>,
}

fn layer_norm_params(store: &mut ParamStore, name: &str, width: usize) -> Result<(ParamId, ParamId)> {
    let gain = store.add(format!("{name}.gain"), Tensor::matrix(1, width, vec![1.0; width])?)?;
    let bias = store.add(format!("{name}.bias"), Tensor::zeros(vec![1, width]))?;
    Ok((gain, bias))
}

impl Decoder {
    pub fn new(store: &mut ParamStore, name: &str, spec: DecoderSpec, rng: &mut InitRng) -> Result<Self> {
        spec.validate()?;
        let in_proj = Linear::new(store, &format!("{name}.in"), spec.input, spec.width, rng)?;
        let blocks = (0..spec.depth)
            .map(|i| {
                let p = format!("{name}.block{i}");
                Ok(Block {
                    qkv: Linear::new(store, &format!("{p}.qkv"), spec.width, 3 * spec.width, rng)?,
                    out: Linear::new(store, &format!("{p}.out"), spec.width, spec.width, rng)?,
                    ln1: layer_norm_params(store, &format!("{p}.ln1"), spec.width)?,
                    ff1: Linear::new(store, &format!("{p}.ff1"), spec.width, spec.ffn, rng)?,
                    ff2: Linear::new(store, &format!("{p}.ff2"), spec.ffn, spec.width, rng)?,
                    ln2: layer_norm_params(store, &format!("{p}.ln2"), spec.width)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec,
            in_proj,
            blocks,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, tokens: Var) -> Result<DecoderOutput> {
        let (rows, cols) = g.shape(tokens);
        if rows == 0 || cols != self.spec.input {
            return Err(Error::ShapeMismatch(format!(
                "decoder expects Gx{} tokens, got {rows}x{cols}",
                self.spec.input
            )));
        }
        let w = self.spec.width;
        let hd = w / self.spec.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut x = self.in_proj.forward(g, store, tokens)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let qkv = b.qkv.forward(g, store, x)?;
            let mut heads = Vec::with_capacity(self.spec.heads);
            let mut maps = Vec::with_capacity(self.spec.heads);
            for h in 0..self.spec.heads {
                let q = g.slice_cols(qkv, h * hd, hd)?;
                let k = g.slice_cols(qkv, w + h * hd, hd)?;
                let v = g.slice_cols(qkv, 2 * w + h * hd, hd)?;
                let scores = g.matmul_nt(q, k)?;
                let scores = g.scale(scores, scale);
                let a = g.softmax_rows(scores);
                maps.push(a);
                heads.push(g.matmul(a, v)?);
            }
            let merged = g.concat_cols(&heads)?;
            let attn = b.out.forward(g, store, merged)?;
            let res = g.add(x, attn)?;
            let (g1, b1) = (g.param(store, b.ln1.0), g.param(store, b.ln1.1));
            x = g.layer_norm(res, g1, b1)?;
            let h1 = b.ff1.forward(g, store, x)?;
            let h1 = g.relu(h1);
            let h2 = b.ff2.forward(g, store, h1)?;
            let res = g.add(x, h2)?;
            let (g2, b2) = (g.param(store, b.ln2.0), g.param(store, b.ln2.1));
            x = g.layer_norm(res, g2, b2)?;
            attention.push(maps);
        }
        Ok(DecoderOutput {
            features: x,
            attention,
        })
    }

    pub fn eval(&self, store: &ParamStore, tokens: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let t = g.input(tokens.rows(), tokens.cols(), tokens.data().to_vec())?;
        let out = self.forward(&mut g, store, t)?;
        Ok(g.tensor(out.features))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_linear_layer() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", MlpSpec::new(&[3, 3], true), &mut InitRng::new(0)).unwrap();
        let l = &mlp.layers[0];
        let eye = vec![1., 0., 0., 0., 1., 0., 0., 0., 1.];
        store.tensor_mut(l.weight).data_mut().copy_from_slice(&eye);
        store.tensor_mut(l.bias).data_mut().fill(0.0);
        let x = Tensor::matrix(2, 3, vec![1., -2., 3., 0.5, 0., -1.]).unwrap();
        assert_eq!(mlp.eval(&store, &x).unwrap().data(), x.data());
    }

    #[test]
    fn zero_weights_give_zero() {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "m", MlpSpec::new(&[2, 4, 3], false), &mut InitRng::new(0)).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            store.tensor_mut(id).data_mut().fill(0.0);
        }
        let x = Tensor::matrix(1, 2, vec![3., 4.]).unwrap();
        assert!(mlp.eval(&store, &x).unwrap().data().iter().all(|&v| v == 0.0));
        let bad = Tensor::matrix(1, 3, vec![0.; 3]).unwrap();
        assert!(matches!(mlp.eval(&store, &bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn mlp_spec_validation() {
        assert!(MlpSpec::new(&[3], true).validate().is_err());
        assert!(MlpSpec::new(&[3, 0, 2], true).validate().is_err());
    }

    #[test]
    fn pointnet_single_point() {
        let mut store = ParamStore::new();
        let pn = PointNet::new(&mut store, "pn", MlpSpec::new(&[3, 8, 5], true), &mut InitRng::new(1)).unwrap();
        let p = Tensor::matrix(1, 3, vec![0.1, 0.2, 0.3]).unwrap();
        let feat = pn.eval_patch(&store, &p).unwrap();
        assert_eq!(feat, pn.mlp.eval(&store, &p).unwrap().data());
    }

    #[test]
    fn decoder_width_must_split_into_heads() {
        let spec = DecoderSpec {
            input: 4,
            width: 6,
            depth: 1,
            heads: 4,
            ffn: 8,
        };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn single_token_attention_is_one() {
        let mut store = ParamStore::new();
        let spec = DecoderSpec {
            input: 4,
            width: 8,
            depth: 2,
            heads: 2,
            ffn: 16,
        };
        let dec = Decoder::new(&mut store, "d", spec, &mut InitRng::new(2)).unwrap();
        let mut g = Graph::new();
        let t = g.input(1, 4, vec![0.3, -0.1, 0.7, 2.0]).unwrap();
        let out = dec.forward(&mut g, &store, t).unwrap();
        for maps in &out.attention {
            for &a in maps {
                assert_eq!(g.value(a), &[1.0]);
            }
        }
    }
}
