//! Run configuration: presets, TOML files and `key.path=value` overrides.
//!
//! Precedence is overrides, then file, then the chosen preset.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::down_net::DownNetConfig;
use crate::error::{Error, Result};
use crate::losses::{DownTerms, EmdMode, UpTerms};
use crate::nn::AdamConfig;
use crate::noise::{NoiseKind, NoiseParams};
use crate::synth::CorpusSpec;
use crate::up_net::{UpNetConfig, UpOutput};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSection {
    pub alpha: f64,
    pub beta: f64,
    pub seed: u64,
    pub kind: NoiseKind,
    /// Corrupt patches while training the Down-Net.
    pub enabled: bool,
    /// Corrupt patches at inference.
    pub at_inference: bool,
}

impl NoiseSection {
    pub fn params(&self) -> NoiseParams {
        NoiseParams {
            alpha: self.alpha,
            beta: self.beta,
            seed: self.seed,
            kind: self.kind,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupSection {
    pub g: usize,
    pub k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSection {
    pub c1: usize,
    pub c2: usize,
    pub c3: usize,
    pub depth: usize,
    pub heads: usize,
    pub hidden: usize,
    pub ffn: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpSection {
    pub gamma: usize,
    pub sa_k: usize,
    pub rep_k: usize,
    pub rep_h: f64,
    pub emd: EmdMode,
    pub sa_width: usize,
    pub conv_width: usize,
    pub head_hidden: usize,
    pub output: UpOutput,
    pub offset_radius: f64,
    /// Feed corrupted patches to the frozen Down-Net during Up-Net training.
    pub train_noise: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub up_epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub mse: bool,
    pub cos: bool,
    pub chamfer: bool,
    pub rep: bool,
    pub emd: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Per-cloud centroid, mean training scale.
    Reference,
    /// Per-cloud centroid and scale.
    PerCloud,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormSection {
    pub mode: NormMode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Keep `1/subsample` of each test cloud.
    pub subsample: usize,
    /// Std of Gaussian jitter added to test clouds.
    pub noise_std: f64,
    pub seed: u64,
    pub sweep_subsample: Vec<usize>,
    pub sweep_noise_std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub noise: NoiseSection,
    pub group: GroupSection,
    pub net: NetSection,
    pub up: UpSection,
    pub train: TrainSection,
    pub loss: LossSection,
    pub norm: NormSection,
    pub synth: CorpusSpec,
    pub eval: EvalSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let (g, k, gamma) = match p {
            Preset::Desk => (256, 32, 4),
            Preset::Paper => (8192, 640, 8),
        };
        Self {
            noise: NoiseSection {
                alpha: 0.08,
                beta: 0.15,
                seed: 11,
                kind: NoiseKind::Gaussian,
                enabled: true,
                at_inference: true,
            },
            group: GroupSection { g, k },
            net: NetSection {
                c1: 64,
                c2: 64,
                c3: 128,
                depth: 2,
                heads: 4,
                hidden: 64,
                ffn: 256,
            },
            up: UpSection {
                gamma,
                sa_k: 8,
                rep_k: 5,
                rep_h: 0.03,
                emd: EmdMode::Nearest,
                sa_width: 64,
                conv_width: 64,
                head_hidden: 128,
                output: UpOutput::Bounded,
                offset_radius: 0.15,
                train_noise: false,
            },
            train: TrainSection {
                lr: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                epochs: 200,
                up_epochs: 200,
                seed: 1,
            },
            loss: LossSection {
                mse: true,
                cos: true,
                chamfer: true,
                rep: true,
                emd: true,
            },
            norm: NormSection { mode: NormMode::Reference },
            synth: CorpusSpec::default(),
            eval: EvalSection {
                subsample: 1,
                noise_std: 0.0,
                seed: 5,
                sweep_subsample: vec![1, 2, 4, 6, 8],
                sweep_noise_std: vec![0.0, 0.001, 0.003, 0.005, 0.007, 0.009],
            },
        }
    }

    /// Builds a config from a preset, an optional TOML file and overrides.
    pub fn load(preset: Preset, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut value = toml::Value::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)?;
            let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
            merge(&mut value, toml::Value::Table(table));
        }
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: Self = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.noise.alpha >= 0.0 && self.noise.beta >= 0.0) {
            return bad("noise.alpha and noise.beta must be >= 0");
        }
        if self.group.g < 4 || self.group.k == 0 {
            return bad("group.g must be >= 4 and group.k >= 1");
        }
        if self.net.heads == 0 || self.net.c3 % self.net.heads != 0 {
            return bad("net.c3 must be divisible by net.heads");
        }
        if [self.net.c1, self.net.c2, self.net.hidden, self.net.ffn, self.net.depth].contains(&0) {
            return bad("net widths and depth must be positive");
        }
        if self.up.gamma == 0 || self.up.sa_k == 0 || self.up.rep_k == 0 {
            return bad("up.gamma, up.sa_k and up.rep_k must be positive");
        }
        if !(self.up.rep_h.is_finite() && self.up.rep_h > 0.0) {
            return bad("up.rep_h must be positive");
        }
        if self.group.g * self.up.gamma <= self.up.rep_k {
            return bad("up.rep_k must be below group.g * up.gamma");
        }
        if !(self.train.lr > 0.0) || !(0.0..1.0).contains(&self.train.beta1) || !(0.0..1.0).contains(&self.train.beta2) {
            return bad("train.lr must be > 0 and betas in [0, 1)");
        }
        if !(self.loss.mse || self.loss.cos || self.loss.chamfer) {
            return bad("at least one down-net loss term must be enabled");
        }
        if !(self.loss.rep || self.loss.emd) {
            return bad("at least one up-net loss term must be enabled");
        }
        if self.eval.subsample == 0 || self.eval.sweep_subsample.contains(&0) {
            return bad("subsample factors must be >= 1");
        }
        if !(self.eval.noise_std >= 0.0) || self.eval.sweep_noise_std.iter().any(|s| !(*s >= 0.0)) {
            return bad("noise std must be >= 0");
        }
        if self.synth.categories.is_empty() || self.synth.n < crate::synth::MIN_POINTS {
            return bad("synth needs at least one category and n >= 64");
        }
        if self.synth.n < self.group.g {
            return bad("synth.n must be >= group.g");
        }
        Ok(())
    }

    pub fn down_config(&self) -> DownNetConfig {
        let n = &self.net;
        DownNetConfig {
            g: self.group.g,
            k: self.group.k,
            c1: n.c1,
            c2: n.c2,
            c3: n.c3,
            depth: n.depth,
            heads: n.heads,
            hidden: n.hidden,
            ffn: n.ffn,
        }
    }

    pub fn up_config(&self) -> UpNetConfig {
        UpNetConfig {
            gamma: self.up.gamma,
            sa_k: self.up.sa_k,
            sa_width: self.up.sa_width,
            conv_width: self.up.conv_width,
            head_hidden: self.up.head_hidden,
            output: self.up.output,
            offset_radius: self.up.offset_radius,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.train.lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            ..AdamConfig::default()
        }
    }

    pub fn down_terms(&self) -> DownTerms {
        DownTerms {
            mse: self.loss.mse,
            cos: self.loss.cos,
            chamfer: self.loss.chamfer,
        }
    }

    pub fn up_terms(&self) -> UpTerms {
        UpTerms {
            rep: self.loss.rep,
            emd: self.loss.emd,
        }
    }

    /// Hash of everything that determines a trained Down-Net.
    pub fn down_hash(&self) -> String {
        let view = serde_json::json!({
            "noise": { "alpha": self.noise.alpha, "beta": self.noise.beta, "seed": self.noise.seed,
                       "kind": self.noise.kind, "enabled": self.noise.enabled },
            "group": self.group,
            "net": self.net,
            "train": { "lr": self.train.lr, "beta1": self.train.beta1, "beta2": self.train.beta2,
                       "epochs": self.train.epochs, "seed": self.train.seed },
            "loss": { "mse": self.loss.mse, "cos": self.loss.cos, "chamfer": self.loss.chamfer },
            "norm": self.norm,
            "synth": self.synth,
        });
        sha256_hex(view.to_string().as_bytes())
    }

    /// Hash of the full configuration minus evaluation settings.
    pub fn up_hash(&self) -> String {
        let view = serde_json::json!({ "down": self.down_hash(), "up": self.up, "loss": self.loss,
                                        "up_epochs": self.train.up_epochs });
        sha256_hex(view.to_string().as_bytes())
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn parse_scalar(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies one `a.b.c=value` override; the value is read as TOML, falling
/// back to a bare string.
pub fn apply_override(value: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad key path `{path}`")));
    }
    let mut cur = value;
    for k in &keys[..keys.len() - 1] {
        cur = cur
            .as_table_mut()
            .and_then(|t| t.get_mut(*k))
            .ok_or_else(|| Error::Config(format!("unknown config section `{k}` in `{path}`")))?;
    }
    let table = cur
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("`{path}` does not name a field")))?;
    let last = keys[keys.len() - 1];
    if !table.contains_key(last) {
        return Err(Error::Config(format!("unknown config key `{path}`")));
    }
    table.insert(last.to_string(), parse_scalar(raw.trim()));
    Ok(())
}
