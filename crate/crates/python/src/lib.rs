//! Python bindings for the point-cloud anomaly detection core.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use duscloud_core::config::{Preset, RunConfig};
use duscloud_core::geometry::{default_seed_index, fps as core_fps, knn as core_knn, Point3, PointCloud};
use duscloud_core::pipeline::{self, CategoryModel, EvalOptions, Layout};
use duscloud_core::scoring::{infer, AnomalyReport};
use duscloud_core::synth::{self, AnomalyKind, AnomalySpec, Primitive, Region, ShapeSpec};
use duscloud_core::{io, losses, metrics, scoring};

create_exception!(pyduscloud, DuscloudError, PyException);

fn err(e: duscloud_core::Error) -> PyErr {
    DuscloudError::new_err(e.to_string())
}

fn pts(raw: Vec<[f64; 3]>) -> Vec<Point3> {
    raw.into_iter().map(|[x, y, z]| Point3::new(x, y, z)).collect()
}

fn raw(p: &[Point3]) -> Vec<(f64, f64, f64)> {
    p.iter().map(|q| (q.x, q.y, q.z)).collect()
}

fn parse<T: std::str::FromStr<Err = duscloud_core::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

fn json_to_py<'py, T: serde::Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| DuscloudError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

/// A point cloud with optional per-point anomaly labels.
#[pyclass(name = "Cloud", module = "pyduscloud")]
struct PyCloud {
    inner: PointCloud,
}

#[pymethods]
impl PyCloud {
    #[new]
    #[pyo3(signature = (points, labels=None, id="cloud"))]
    fn new(points: Vec<[f64; 3]>, labels: Option<Vec<bool>>, id: &str) -> PyResult<Self> {
        let p = pts(points);
        let inner = match labels {
            Some(l) => PointCloud::with_labels(id, p, l),
            None => PointCloud::new(id, p),
        }
        .map_err(err)?;
        Ok(Self { inner })
    }

    /// Reads `.xyz` or `.ply`.
    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: io::read_cloud(&path).map_err(err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        io::write_cloud(&path, &self.inner).map_err(err)
    }

    #[getter]
    fn id(&self) -> String {
        self.inner.id().to_string()
    }

    #[getter]
    fn points(&self) -> Vec<(f64, f64, f64)> {
        raw(self.inner.points())
    }

    #[getter]
    fn labels(&self) -> Option<Vec<bool>> {
        self.inner.labels().map(<[bool]>::to_vec)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!("Cloud(id={:?}, n={}, labeled={})", self.inner.id(), self.inner.len(), self.inner.labels().is_some())
    }
}

/// Scores from one reconstruction pass.
#[pyclass(name = "Report", module = "pyduscloud")]
struct PyReport {
    inner: AnomalyReport,
}

#[pymethods]
impl PyReport {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    /// Nearest-reconstruction distance per input point.
    #[getter]
    fn raw(&self) -> Vec<f64> {
        self.inner.raw.clone()
    }

    #[getter]
    fn normalized(&self) -> Vec<f64> {
        self.inner.normalized.clone()
    }

    #[getter]
    fn object_score(&self) -> f64 {
        self.inner.object_score
    }

    #[getter]
    fn reconstruction(&self) -> Vec<(f64, f64, f64)> {
        raw(&self.inner.reconstruction)
    }

    fn to_csv(&self) -> String {
        self.inner.to_csv()
    }
}

/// Trained Down-Net and Up-Net for one category.
#[pyclass(name = "Detector", module = "pyduscloud")]
struct PyDetector {
    model: CategoryModel,
}

#[pymethods]
impl PyDetector {
    fn score(&self, cloud: PyRef<'_, PyCloud>) -> PyResult<PyReport> {
        let inner = infer(&self.model.down, &self.model.up, &cloud.inner, &self.model.options).map_err(err)?;
        Ok(PyReport { inner })
    }
}

/// A run directory plus its resolved configuration.
#[pyclass(name = "Pipeline", module = "pyduscloud")]
struct PyPipeline {
    cfg: RunConfig,
    layout: Layout,
}

#[pymethods]
impl PyPipeline {
    #[new]
    #[pyo3(signature = (run_dir, preset="desk", config=None, overrides=Vec::new()))]
    fn new(run_dir: PathBuf, preset: &str, config: Option<PathBuf>, overrides: Vec<String>) -> PyResult<Self> {
        let preset: Preset = parse(preset)?;
        let cfg = RunConfig::load(preset, config.as_deref(), &overrides).map_err(err)?;
        Ok(Self { cfg, layout: Layout::new(run_dir) })
    }

    fn config_toml(&self) -> PyResult<String> {
        self.cfg.to_toml_string().map_err(err)
    }

    /// Writes the synthetic corpus; returns the number of clouds.
    fn synth(&self) -> PyResult<usize> {
        Ok(pipeline::cmd_synth(&self.cfg, &self.layout).map_err(err)?.samples.len())
    }

    /// Per-category loss logs.
    fn train_down<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let s = py.detach(|| pipeline::cmd_train_down(&self.cfg, &self.layout)).map_err(err)?;
        json_to_py(py, &s)
    }

    fn train_up<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let s = py.detach(|| pipeline::cmd_train_up(&self.cfg, &self.layout)).map_err(err)?;
        json_to_py(py, &s)
    }

    /// Metrics over the test split; also writes `eval/metrics.json` and per-cloud scores.
    #[pyo3(signature = (subsample=1, noise_std=0.0))]
    fn evaluate<'py>(&self, py: Python<'py>, subsample: usize, noise_std: f64) -> PyResult<Bound<'py, PyAny>> {
        let opts = EvalOptions { subsample, noise_std, write: true };
        let o = py.detach(|| pipeline::cmd_eval(&self.cfg, &self.layout, &opts)).map_err(err)?;
        json_to_py(py, &o)
    }

    fn detector(&self, category: &str) -> PyResult<PyDetector> {
        let cat: Primitive = parse(category)?;
        Ok(PyDetector { model: pipeline::load_models(&self.cfg, &self.layout, cat).map_err(err)? })
    }
}

#[pyfunction]
#[pyo3(signature = (points, g, seed_index=None))]
fn fps(points: Vec<[f64; 3]>, g: usize, seed_index: Option<usize>) -> PyResult<Vec<usize>> {
    let p = pts(points);
    let s = seed_index.unwrap_or_else(|| default_seed_index(&p));
    core_fps(&p, g, s).map_err(err)
}

#[pyfunction]
fn knn(query: [f64; 3], points: Vec<[f64; 3]>, k: usize) -> PyResult<Vec<usize>> {
    let [x, y, z] = query;
    core_knn(Point3::new(x, y, z), &pts(points), k).map_err(err)
}

#[pyfunction]
fn chamfer(a: Vec<[f64; 3]>, b: Vec<[f64; 3]>) -> PyResult<f64> {
    Ok(losses::chamfer(&pts(a), &pts(b)).map_err(err)?.value)
}

/// One-directional nearest-neighbor sum from `pred` to `gt`.
#[pyfunction]
fn emd(pred: Vec<[f64; 3]>, gt: Vec<[f64; 3]>) -> PyResult<f64> {
    Ok(losses::emd_nearest(&pts(pred), &pts(gt)).map_err(err)?.value)
}

#[pyfunction]
#[pyo3(signature = (cloud, k, h=1.0))]
fn repulsion(cloud: Vec<[f64; 3]>, k: usize, h: f64) -> PyResult<f64> {
    Ok(losses::repulsion_bandwidth(&pts(cloud), k, h).map_err(err)?.value)
}

#[pyfunction]
fn weight_factor(d: [f64; 3]) -> f64 {
    scoring::weight_factor(d)
}

#[pyfunction]
fn auroc(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::auroc(&scores, &labels).map_err(err)
}

#[pyfunction]
fn aupr(scores: Vec<f64>, labels: Vec<bool>) -> PyResult<f64> {
    metrics::aupr(&scores, &labels).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (kind, n=2048, jitter=0.005, seed=0))]
fn gen_normal(kind: &str, n: usize, jitter: f64, seed: u64) -> PyResult<PyCloud> {
    let spec = ShapeSpec { kind: parse(kind)?, n, jitter, seed };
    Ok(PyCloud { inner: synth::gen_normal(&spec).map_err(err)? })
}

#[pyfunction]
#[pyo3(signature = (cloud, kind, magnitude, fraction=0.05, seed=0))]
fn gen_anomalous(cloud: PyRef<'_, PyCloud>, kind: &str, magnitude: f64, fraction: f64, seed: u64) -> PyResult<PyCloud> {
    let kind: AnomalyKind = parse(kind)?;
    let spec = AnomalySpec { kind, region: Region::Fraction(fraction), magnitude, seed, center: None };
    Ok(PyCloud { inner: synth::gen_anomalous(&cloud.inner, &spec).map_err(err)? })
}

#[pymodule]
fn pyduscloud(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("DuscloudError", m.py().get_type::<DuscloudError>())?;
    m.add_class::<PyCloud>()?;
    m.add_class::<PyReport>()?;
    m.add_class::<PyDetector>()?;
    m.add_class::<PyPipeline>()?;
    for f in [
        wrap_pyfunction!(fps, m)?,
        wrap_pyfunction!(knn, m)?,
        wrap_pyfunction!(chamfer, m)?,
        wrap_pyfunction!(emd, m)?,
        wrap_pyfunction!(repulsion, m)?,
        wrap_pyfunction!(weight_factor, m)?,
        wrap_pyfunction!(auroc, m)?,
        wrap_pyfunction!(aupr, m)?,
        wrap_pyfunction!(gen_normal, m)?,
        wrap_pyfunction!(gen_anomalous, m)?,
    ] {
        m.add_function(f)?;
    }
    Ok(())
}
