//! Commands behind the CLI: corpus synthesis, two-stage training,
//! inference, evaluation, robustness sweeps, ablation and benchmarking.
//!
//! Output layout under the run directory:
//!
//! ```text
//! corpus/manifest.json
//! corpus/<category>/{train,test}/<id>.xyz
//! models/<category>/{down.ckpt,down_loss.csv,up.ckpt,up_loss.csv}
//! eval/metrics.json
//! eval/scores/<category>/<id>.csv
//! eval/robustness.csv
//! ablation/<variant>/...   ablation/report.json   ablation/ablation.csv
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{NormMode, RunConfig};
use crate::down_net::{prepare_patches, train_down_patches, DownEpochLog, DownNetModel, DownTrainConfig};
use crate::error::{Error, Result};
use crate::geometry::{normalization_params, Point3, PointCloud};
use crate::io::{read_cloud, write_xyz};
use crate::metrics::{ClassMetrics, MetricSet};
use crate::nn::{Checkpoint, Dtype};
use crate::noise::{mix_seed, NoiseRng};
use crate::scoring::{infer, AnomalyReport, InferOptions};
use crate::synth::{gen_corpus, read_manifest, write_corpus, CorpusManifest, ManifestEntry, Primitive, Split};
use crate::up_net::{prepare_up_samples, train_up_samples, UpEpochLog, UpNetModel, UpTrainConfig};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub root: PathBuf,
    corpus: Option<PathBuf>,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            corpus: None,
        }
    }

    /// Reads the corpus from somewhere other than `<root>/corpus`.
    pub fn with_corpus(mut self, dir: impl Into<PathBuf>) -> Self {
        self.corpus = Some(dir.into());
        self
    }

    pub fn corpus(&self) -> PathBuf {
        self.corpus.clone().unwrap_or_else(|| self.root.join("corpus"))
    }

    pub fn models(&self, category: Primitive) -> PathBuf {
        self.root.join("models").join(category.name())
    }

    pub fn down_ckpt(&self, category: Primitive) -> PathBuf {
        self.models(category).join("down.ckpt")
    }

    pub fn up_ckpt(&self, category: Primitive) -> PathBuf {
        self.models(category).join("up.ckpt")
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }
}

fn category_seed(base: u64, cat: Primitive) -> u64 {
    mix_seed(base, cat as u64 + 1, 0)
}

pub fn cmd_synth(cfg: &RunConfig, layout: &Layout) -> Result<CorpusManifest> {
    let samples = gen_corpus(&cfg.synth)?;
    let dir = layout.corpus();
    fs::create_dir_all(&dir)?;
    write_corpus(&dir, &cfg.synth, &samples)
}

pub fn categories(manifest: &CorpusManifest) -> Vec<Primitive> {
    let mut c: Vec<Primitive> = manifest.samples.iter().map(|s| s.category).collect();
    c.sort();
    c.dedup();
    c
}

/// Manifest entries of one category and split, sorted by id, with clouds.
pub fn load_split(
    layout: &Layout,
    manifest: &CorpusManifest,
    category: Primitive,
    split: Split,
) -> Result<Vec<(ManifestEntry, PointCloud)>> {
    let dir = layout.corpus();
    let mut entries: Vec<&ManifestEntry> = manifest
        .samples
        .iter()
        .filter(|s| s.category == category && s.split == split)
        .collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    entries
        .into_iter()
        .map(|e| {
            let mut c = read_cloud(&dir.join(&e.path))?;
            c.set_id(e.id.clone());
            Ok((e.clone(), c))
        })
        .collect()
}

fn write_csv<T>(path: &Path, header: &str, rows: &[T], line: impl Fn(&T) -> String) -> Result<()> {
    let mut out = String::from(header);
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DownSummary {
    pub category: Primitive,
    pub reference_scale: f64,
    pub log: Vec<DownEpochLog>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpSummary {
    pub category: Primitive,
    pub log: Vec<UpEpochLog>,
}

/// Trains one Down-Net per category and writes checkpoint plus loss log.
pub fn cmd_train_down(cfg: &RunConfig, layout: &Layout) -> Result<Vec<DownSummary>> {
    let manifest = read_manifest(&layout.corpus())?;
    let mut out = Vec::new();
    for cat in categories(&manifest) {
        let train: Vec<PointCloud> = load_split(layout, &manifest, cat, Split::Train)?
            .into_iter()
            .map(|(_, c)| c)
            .collect();
        if train.is_empty() {
            return Err(Error::MissingCorpus(format!("no training clouds for `{}`", cat.name())));
        }
        let scales: Vec<f64> = train
            .iter()
            .map(|c| normalization_params(c).map(|p| p.scale))
            .collect::<Result<_>>()?;
        let reference_scale = scales.iter().sum::<f64>() / scales.len() as f64;
        let sets = prepare_patches(&train, cfg.group.g, cfg.group.k)?;
        let mut model = DownNetModel::new(cfg.down_config(), category_seed(cfg.train.seed, cat))?;
        let tc = DownTrainConfig {
            epochs: cfg.train.epochs,
            adam: cfg.adam(),
            noise: cfg.noise.enabled.then(|| cfg.noise.params()),
            terms: cfg.down_terms(),
        };
        let epochs = tc.epochs;
        let log = train_down_patches(&mut model, &sets, &tc, |e| {
            if e.epoch == 1 || e.epoch % 20 == 0 || e.epoch == epochs {
                log::info!("{} down epoch {}: total {:.6}", cat.name(), e.epoch, e.total);
            }
        })?;
        let dir = layout.models(cat);
        fs::create_dir_all(&dir)?;
        let meta = serde_json::json!({ "category": cat, "reference_scale": reference_scale });
        model
            .to_checkpoint(&cfg.down_hash(), meta, Dtype::F64)?
            .save(&layout.down_ckpt(cat))?;
        write_csv(&dir.join("down_loss.csv"), "epoch,mse,cos,chamfer,total", &log, |e| {
            format!("{},{:.9e},{:.9e},{:.9e},{:.9e}", e.epoch, e.mse, e.cos, e.chamfer, e.total)
        })?;
        out.push(DownSummary {
            category: cat,
            reference_scale,
            log,
        });
    }
    Ok(out)
}

/// Loads a Down-Net checkpoint, refusing one trained under another config.
pub fn load_down(cfg: &RunConfig, layout: &Layout, cat: Primitive) -> Result<(DownNetModel, f64)> {
    let path = layout.down_ckpt(cat);
    if !path.exists() {
        return Err(Error::ConfigMismatch(format!(
            "no down checkpoint at {}; run train-down first",
            path.display()
        )));
    }
    let ck = Checkpoint::load(&path)?;
    let want = cfg.down_hash();
    if ck.manifest.config_hash != want {
        return Err(Error::ConfigMismatch(format!(
            "down checkpoint {} has config hash {}, current config is {}",
            path.display(),
            ck.manifest.config_hash,
            want
        )));
    }
    let scale = ck.manifest.meta["extra"]["reference_scale"]
        .as_f64()
        .ok_or_else(|| Error::Checkpoint("missing reference_scale".into()))?;
    Ok((DownNetModel::from_checkpoint(&ck)?, scale))
}

pub fn cmd_train_up(cfg: &RunConfig, layout: &Layout) -> Result<Vec<UpSummary>> {
    let manifest = read_manifest(&layout.corpus())?;
    let mut out = Vec::new();
    for cat in categories(&manifest) {
        let (down, scale) = load_down(cfg, layout, cat)?;
        let train: Vec<PointCloud> = load_split(layout, &manifest, cat, Split::Train)?
            .into_iter()
            .map(|(_, c)| c)
            .collect();
        let noise = (cfg.up.train_noise && cfg.noise.enabled).then(|| cfg.noise.params());
        let samples = prepare_up_samples(&down, &train, cfg.up.gamma, noise.as_ref())?;
        let mut model = UpNetModel::new(cfg.up_config(), category_seed(cfg.train.seed ^ 0x5550, cat))?;
        let tc = UpTrainConfig {
            epochs: cfg.train.up_epochs,
            adam: cfg.adam(),
            terms: cfg.up_terms(),
            emd: cfg.up.emd,
            rep_k: cfg.up.rep_k,
            rep_h: cfg.up.rep_h,
            noise,
        };
        let epochs = tc.epochs;
        let log = train_up_samples(&mut model, &samples, &tc, |e| {
            if e.epoch == 1 || e.epoch % 20 == 0 || e.epoch == epochs {
                log::info!("{} up epoch {}: total {:.6}", cat.name(), e.epoch, e.total);
            }
        })?;
        let dir = layout.models(cat);
        let meta = serde_json::json!({ "category": cat, "reference_scale": scale, "down_hash": cfg.down_hash() });
        model
            .to_checkpoint(&cfg.up_hash(), meta, Dtype::F64)?
            .save(&layout.up_ckpt(cat))?;
        write_csv(&dir.join("up_loss.csv"), "epoch,rep,emd,total", &log, |e| {
            format!("{},{:.9e},{:.9e},{:.9e}", e.epoch, e.rep, e.emd, e.total)
        })?;
        out.push(UpSummary { category: cat, log });
    }
    Ok(out)
}

/// Both trained networks of one category plus the inference settings.
pub struct CategoryModel {
    pub down: DownNetModel,
    pub up: UpNetModel,
    pub options: InferOptions,
}

pub fn load_models(cfg: &RunConfig, layout: &Layout, cat: Primitive) -> Result<CategoryModel> {
    let (down, scale) = load_down(cfg, layout, cat)?;
    let ck = Checkpoint::load(&layout.up_ckpt(cat))?;
    if ck.manifest.config_hash != cfg.up_hash() {
        return Err(Error::ConfigMismatch(format!(
            "up checkpoint for `{}` was trained under another config",
            cat.name()
        )));
    }
    let up = UpNetModel::from_checkpoint(&ck)?;
    Ok(CategoryModel {
        down,
        up,
        options: InferOptions {
            noise: cfg.noise.at_inference.then(|| cfg.noise.params()),
            reference_scale: (cfg.norm.mode == NormMode::Reference).then_some(scale),
        },
    })
}

/// Keeps a seeded `1/factor` subset and adds Gaussian jitter of `std`.
pub fn perturb(cloud: &PointCloud, factor: usize, std: f64, seed: u64) -> Result<PointCloud> {
    let mut c = if factor > 1 {
        let n = cloud.len();
        let m = (n / factor).max(1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = index::sample(&mut rng, n, m).into_vec();
        idx.sort_unstable();
        cloud.select(&idx)?
    } else {
        cloud.clone()
    };
    if std > 0.0 {
        let mut rng = NoiseRng::new(mix_seed(seed, 1, 1));
        let (id, pts, labels) = c.into_parts();
        let pts: Vec<Point3> = pts
            .into_iter()
            .map(|p| p + Point3::new(rng.standard_normal(), rng.standard_normal(), rng.standard_normal()) * std)
            .collect();
        c = match labels {
            Some(l) => PointCloud::with_labels(id, pts, l)?,
            None => PointCloud::new(id, pts)?,
        };
    }
    Ok(c)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub subsample: usize,
    pub noise_std: f64,
    /// Write `metrics.json` and per-sample score CSVs.
    pub write: bool,
}

impl EvalOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        Self {
            subsample: cfg.eval.subsample,
            noise_std: cfg.eval.noise_std,
            write: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalOutcome {
    #[serde(flatten)]
    pub metrics: MetricSet,
    /// Test clouds scored per second of wall time.
    pub fps_throughput: f64,
}

/// Scores every test cloud of one category; reports sorted by id.
pub fn score_category(
    cfg: &RunConfig,
    layout: &Layout,
    manifest: &CorpusManifest,
    cat: Primitive,
    opts: &EvalOptions,
) -> Result<Vec<(ManifestEntry, AnomalyReport)>> {
    let models = load_models(cfg, layout, cat)?;
    let test = load_split(layout, manifest, cat, Split::Test)?;
    test.par_iter()
        .enumerate()
        .map(|(i, (e, c))| {
            let seed = mix_seed(cfg.eval.seed, cat as u64, i as u64);
            let c = perturb(c, opts.subsample, opts.noise_std, seed)?;
            let r = infer(&models.down, &models.up, &c, &models.options)?;
            Ok((e.clone(), r))
        })
        .collect()
}

pub fn cmd_eval(cfg: &RunConfig, layout: &Layout, opts: &EvalOptions) -> Result<EvalOutcome> {
    let manifest = read_manifest(&layout.corpus())?;
    let mut per_class = BTreeMap::new();
    let mut clouds = 0usize;
    let mut seconds = 0.0;
    for cat in categories(&manifest) {
        let t = Instant::now();
        let reports = score_category(cfg, layout, &manifest, cat, opts)?;
        seconds += t.elapsed().as_secs_f64();
        clouds += reports.len();
        let object: Vec<(f64, bool)> = reports
            .iter()
            .map(|(e, r)| (r.object_score, e.anomaly.is_some()))
            .collect();
        let labeled = reports.iter().all(|(_, r)| r.labels.is_some());
        let (ps, pl): (Vec<f64>, Vec<bool>) = if labeled {
            reports
                .iter()
                .flat_map(|(_, r)| r.normalized.iter().copied().zip(r.labels.clone().unwrap_or_default()))
                .unzip()
        } else {
            log::warn!("`{}` test clouds lack point labels; point metrics omitted", cat.name());
            (Vec::new(), Vec::new())
        };
        let m = ClassMetrics::compute(&object, labeled.then_some((&ps[..], &pl[..])));
        per_class.insert(cat.name().to_string(), m);
        if opts.write {
            let dir = layout.eval().join("scores").join(cat.name());
            fs::create_dir_all(&dir)?;
            for (e, r) in &reports {
                fs::write(dir.join(format!("{}.csv", e.id)), r.to_csv())?;
            }
        }
    }
    let outcome = EvalOutcome {
        metrics: MetricSet::from_classes(per_class),
        fps_throughput: if seconds > 0.0 { clouds as f64 / seconds } else { 0.0 },
    };
    if opts.write {
        fs::create_dir_all(layout.eval())?;
        fs::write(
            layout.eval().join("metrics.json"),
            serde_json::to_string_pretty(&outcome)? + "\n",
        )?;
    }
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    /// `subsample` or `noise_std`.
    pub perturbation: &'static str,
    pub level: f64,
    pub o_auroc: Option<f64>,
    pub p_auroc: Option<f64>,
    pub o_aupr: Option<f64>,
    pub p_aupr: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.6}")).unwrap_or_default()
}

/// One metrics row per subsampling factor and per noise level.
pub fn cmd_robustness(cfg: &RunConfig, layout: &Layout) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let mut run = |perturbation: &'static str, level: f64, subsample: usize, noise_std: f64| -> Result<()> {
        let o = cmd_eval(cfg, layout, &EvalOptions { subsample, noise_std, write: false })?;
        let m = o.metrics;
        rows.push(SweepRow {
            perturbation,
            level,
            o_auroc: m.o_auroc,
            p_auroc: m.p_auroc,
            o_aupr: m.o_aupr,
            p_aupr: m.p_aupr,
        });
        Ok(())
    };
    for &s in &cfg.eval.sweep_subsample {
        run("subsample", s as f64, s, 0.0)?;
    }
    for &sd in &cfg.eval.sweep_noise_std {
        run("noise_std", sd, 1, sd)?;
    }
    fs::create_dir_all(layout.eval())?;
    write_csv(
        &layout.eval().join("robustness.csv"),
        "perturbation,level,o_auroc,p_auroc,o_aupr,p_aupr",
        &rows,
        |r| {
            format!(
                "{},{},{},{},{},{}",
                r.perturbation,
                r.level,
                opt(r.o_auroc),
                opt(r.p_auroc),
                opt(r.o_aupr),
                opt(r.p_aupr)
            )
        },
    )?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub o_auroc: Option<f64>,
    pub p_auroc: Option<f64>,
    pub o_aupr: Option<f64>,
    pub p_aupr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    /// Dropping the EMD term or noise injection costs more O-AUROC than
    /// dropping the cosine term.
    pub ordering_holds: bool,
}

pub fn ablation_variants(cfg: &RunConfig) -> Vec<(&'static str, RunConfig)> {
    let mut no_cos = cfg.clone();
    no_cos.loss.cos = false;
    let mut no_emd = cfg.clone();
    no_emd.loss.emd = false;
    let mut no_noise = cfg.clone();
    no_noise.noise.enabled = false;
    no_noise.noise.at_inference = false;
    vec![
        ("full", cfg.clone()),
        ("without_cos", no_cos),
        ("without_emd", no_emd),
        ("without_noise", no_noise),
    ]
}

fn copy_if_present(from: &Path, to: &Path) -> Result<bool> {
    if from.exists() {
        fs::create_dir_all(to.parent().expect("has parent"))?;
        fs::copy(from, to)?;
        Ok(true)
    } else {
        Ok(false)
    }
}

/// Trains and evaluates each ablation variant against the run's corpus.
/// Checkpoints already present under the run (or an earlier variant) with
/// a matching config hash are reused.
pub fn cmd_ablate(cfg: &RunConfig, layout: &Layout) -> Result<AblationReport> {
    let manifest = read_manifest(&layout.corpus())?;
    let cats = categories(&manifest);
    let base = layout.root.join("ablation");
    let mut trained: Vec<(String, String, Layout)> = vec![(cfg.down_hash(), cfg.up_hash(), layout.clone())];
    let mut rows = Vec::new();
    for (name, vcfg) in ablation_variants(cfg) {
        let vl = Layout::new(base.join(name)).with_corpus(layout.corpus());
        let source = |pick: &dyn Fn(&(String, String, Layout)) -> bool| trained.iter().find(|t| pick(t)).map(|t| t.2.clone());
        let down_src = source(&|t| t.0 == vcfg.down_hash());
        let up_src = source(&|t| t.1 == vcfg.up_hash());
        let mut have_down = false;
        if let Some(src) = &down_src {
            have_down = true;
            for &c in &cats {
                have_down &= copy_if_present(&src.down_ckpt(c), &vl.down_ckpt(c))?;
                copy_if_present(&src.models(c).join("down_loss.csv"), &vl.models(c).join("down_loss.csv"))?;
            }
        }
        if !have_down {
            log::info!("ablation `{name}`: training down-net");
            cmd_train_down(&vcfg, &vl)?;
        }
        let mut have_up = false;
        if let Some(src) = &up_src {
            have_up = true;
            for &c in &cats {
                have_up &= copy_if_present(&src.up_ckpt(c), &vl.up_ckpt(c))?;
                copy_if_present(&src.models(c).join("up_loss.csv"), &vl.models(c).join("up_loss.csv"))?;
            }
        }
        if !have_up {
            log::info!("ablation `{name}`: training up-net");
            cmd_train_up(&vcfg, &vl)?;
        }
        let o = cmd_eval(&vcfg, &vl, &EvalOptions { subsample: 1, noise_std: 0.0, write: true })?;
        trained.push((vcfg.down_hash(), vcfg.up_hash(), vl));
        rows.push(AblationRow {
            variant: name.to_string(),
            o_auroc: o.metrics.o_auroc,
            p_auroc: o.metrics.p_auroc,
            o_aupr: o.metrics.o_aupr,
            p_aupr: o.metrics.p_aupr,
        });
    }
    let get = |v: &str| {
        rows.iter()
            .find(|r| r.variant == v)
            .and_then(|r| r.o_auroc)
            .unwrap_or(f64::NAN)
    };
    let full = get("full");
    let drop = |v: &str| full - get(v);
    let ordering_holds = drop("without_emd") > drop("without_cos") && drop("without_noise") > drop("without_cos");
    let report = AblationReport { rows, ordering_holds };
    fs::create_dir_all(&base)?;
    fs::write(base.join("report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    write_csv(&base.join("ablation.csv"), "variant,o_auroc,p_auroc,o_aupr,p_aupr", &report.rows, |r| {
        format!("{},{},{},{},{}", r.variant, opt(r.o_auroc), opt(r.p_auroc), opt(r.o_aupr), opt(r.p_aupr))
    })?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchResult {
    pub clouds: usize,
    pub seconds: f64,
    pub clouds_per_second: f64,
}

/// Times inference over every test cloud, `repeats` times.
pub fn cmd_bench(cfg: &RunConfig, layout: &Layout, repeats: usize) -> Result<BenchResult> {
    let manifest = read_manifest(&layout.corpus())?;
    let mut work = Vec::new();
    for cat in categories(&manifest) {
        let m = load_models(cfg, layout, cat)?;
        let clouds: Vec<PointCloud> = load_split(layout, &manifest, cat, Split::Test)?
            .into_iter()
            .map(|(_, c)| c)
            .collect();
        work.push((m, clouds));
    }
    let t = Instant::now();
    let mut clouds = 0;
    for _ in 0..repeats.max(1) {
        for (m, cs) in &work {
            let done: Result<Vec<_>> = cs.par_iter().map(|c| infer(&m.down, &m.up, c, &m.options)).collect();
            clouds += done?.len();
        }
    }
    let seconds = t.elapsed().as_secs_f64();
    Ok(BenchResult {
        clouds,
        seconds,
        clouds_per_second: clouds as f64 / seconds.max(1e-12),
    })
}

/// Scores one cloud file with the models of `category`; writes the score
/// CSV and the reconstruction next to each other under `<root>/infer`.
pub fn cmd_infer(cfg: &RunConfig, layout: &Layout, input: &Path, category: Primitive) -> Result<AnomalyReport> {
    let cloud = read_cloud(input)?;
    let m = load_models(cfg, layout, category)?;
    let report = infer(&m.down, &m.up, &cloud, &m.options)?;
    let dir = layout.root.join("infer");
    fs::create_dir_all(&dir)?;
    let stem = input
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cloud".into());
    fs::write(dir.join(format!("{stem}.csv")), report.to_csv())?;
    write_xyz(
        &dir.join(format!("{stem}.recon.xyz")),
        &PointCloud::new(format!("{stem}-recon"), report.reconstruction.clone())?,
    )?;
    Ok(report)
}
