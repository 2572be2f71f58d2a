//! Brute-force oracles and finite-difference checkers shared by the
//! integration tests and the acceptance runner.

#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use duscloud_core::down_net::{DownNetConfig, DownNetModel};
use duscloud_core::geometry::{fps, knn, Point3};
use duscloud_core::losses::{self, DownTerms, EmdMode, UpTerms};
use duscloud_core::nn::{Decoder, DecoderSpec, Graph, InitRng, Linear, Mlp, MlpSpec, ParamStore, PointNet, Tensor, Var};
use duscloud_core::noise::{inject, NoiseParams};
use duscloud_core::scoring::score_points;
use duscloud_core::up_net::{interp_table, set_abstraction, tri_interpolate, UpNetConfig, UpNetModel};
use duscloud_core::{group, PointCloud};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

pub fn random_points(r: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n).map(|_| Point3::new(normal(r), normal(r), normal(r))).collect()
}

/// Between 1 and `max` random points.
pub fn sized_points(r: &mut ChaCha8Rng, max: usize) -> Vec<Point3> {
    let n = r.random_range(1..=max);
    random_points(r, n)
}

/// Points on a coarse integer grid, so equal distances are common.
pub fn grid_points(r: &mut ChaCha8Rng, n: usize) -> Vec<Point3> {
    (0..n)
        .map(|_| {
            Point3::new(
                r.random_range(-3i32..=3) as f64,
                r.random_range(-3i32..=3) as f64,
                r.random_range(-3i32..=3) as f64,
            )
        })
        .collect()
}

fn sq(a: Point3, b: Point3) -> f64 {
    let (x, y, z) = (a.x - b.x, a.y - b.y, a.z - b.z);
    x * x + y * y + z * z
}

/// Recomputes every candidate's distance to the whole selected set at each
/// step; ties go to the lowest index.
pub fn oracle_fps(points: &[Point3], g: usize, seed: usize) -> Vec<usize> {
    let mut sel = vec![seed];
    while sel.len() < g {
        let mut best = None;
        let mut best_d = -1.0;
        for i in 0..points.len() {
            if sel.contains(&i) {
                continue;
            }
            let d = sel.iter().map(|&s| sq(points[i], points[s])).fold(f64::INFINITY, f64::min);
            if d > best_d {
                best_d = d;
                best = Some(i);
            }
        }
        sel.push(best.expect("candidate left"));
    }
    sel
}

/// Full sort by (distance, index).
pub fn oracle_knn(q: Point3, points: &[Point3], k: usize) -> Vec<usize> {
    let mut all: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, &p)| (sq(p, q), i)).collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|(_, i)| i).collect()
}

pub fn oracle_nn(p: Point3, set: &[Point3]) -> f64 {
    set.iter().map(|&q| sq(p, q).sqrt()).fold(f64::INFINITY, f64::min)
}

pub fn oracle_chamfer(a: &[Point3], b: &[Point3]) -> f64 {
    let one = |x: &[Point3], y: &[Point3]| x.iter().map(|&p| oracle_nn(p, y).powi(2)).sum::<f64>() / x.len() as f64;
    one(a, b) + one(b, a)
}

pub fn oracle_emd(pred: &[Point3], gt: &[Point3]) -> f64 {
    pred.iter().map(|&p| oracle_nn(p, gt)).sum()
}

pub fn oracle_interp(target: &[Point3], source: &[Point3], feats: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let c = feats[0].len();
    target
        .iter()
        .map(|&t| {
            let mut all: Vec<(f64, usize)> = source.iter().enumerate().map(|(i, &s)| (sq(s, t).sqrt(), i)).collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            let mut num = vec![0.0; c];
            let mut den = 0.0;
            for &(d, i) in all.iter().take(3) {
                let w = 1.0 / d.max(1e-9);
                den += w;
                for (n, f) in num.iter_mut().zip(&feats[i]) {
                    *n += w * f;
                }
            }
            num.into_iter().map(|v| v / den).collect()
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

impl Outcome {
    fn new(name: &str, ok: bool, detail: String) -> Self {
        Self {
            name: name.to_string(),
            ok,
            detail,
        }
    }
}

pub const ORACLE_TOL: f64 = 1e-9;

/// Runs `instances` random cases per kernel; sizes stay at or below 256.
pub fn oracle_suite(instances: usize, seed: u64) -> Vec<Outcome> {
    let mut r = rng(seed);
    let mut out = Vec::new();

    let mut bad = 0;
    for i in 0..instances {
        let n = r.random_range(1..=256usize);
        let pts = if i % 3 == 0 { grid_points(&mut r, n) } else { random_points(&mut r, n) };
        let g = r.random_range(1..=n.min(48));
        let s = r.random_range(0..n);
        if fps(&pts, g, s).unwrap() != oracle_fps(&pts, g, s) {
            bad += 1;
        }
    }
    out.push(Outcome::new("fps", bad == 0, format!("{bad}/{instances} index mismatches")));

    let mut bad = 0;
    for i in 0..instances {
        let n = r.random_range(1..=256usize);
        let pts = if i % 3 == 0 { grid_points(&mut r, n) } else { random_points(&mut r, n) };
        let k = r.random_range(1..=n);
        let q = if i % 2 == 0 { pts[r.random_range(0..n)] } else { random_points(&mut r, 1)[0] };
        if knn(q, &pts, k).unwrap() != oracle_knn(q, &pts, k) {
            bad += 1;
        }
    }
    out.push(Outcome::new("knn", bad == 0, format!("{bad}/{instances} index mismatches")));

    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let a = sized_points(&mut r, 256);
        let b = sized_points(&mut r, 256);
        let s = score_points(&a, &b).unwrap();
        for (p, v) in a.iter().zip(s) {
            worst = worst.max((v - oracle_nn(*p, &b)).abs());
        }
    }
    out.push(Outcome::new("score_points", worst <= ORACLE_TOL, format!("max abs err {worst:.3e}")));

    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let a = sized_points(&mut r, 256);
        let b = sized_points(&mut r, 256);
        let v = losses::chamfer(&a, &b).unwrap().value;
        worst = worst.max((v - oracle_chamfer(&a, &b)).abs());
    }
    out.push(Outcome::new("chamfer", worst <= ORACLE_TOL, format!("max abs err {worst:.3e}")));

    let mut worst: f64 = 0.0;
    for _ in 0..instances {
        let a = sized_points(&mut r, 256);
        let b = sized_points(&mut r, 256);
        let v = losses::emd_nearest(&a, &b).unwrap().value;
        worst = worst.max((v - oracle_emd(&a, &b)).abs());
    }
    out.push(Outcome::new("emd", worst <= ORACLE_TOL, format!("max abs err {worst:.3e}")));

    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let ns = r.random_range(1..=256usize);
        let src = random_points(&mut r, ns);
        let mut tgt = sized_points(&mut r, 64);
        if i % 4 == 0 {
            tgt.push(src[0]);
        }
        let c = r.random_range(1..=8usize);
        let feats: Vec<Vec<f64>> = (0..ns).map(|_| (0..c).map(|_| normal(&mut r)).collect()).collect();
        let t = Tensor::matrix(ns, c, feats.concat()).unwrap();
        let got = tri_interpolate(&tgt, &src, &t).unwrap();
        for (row, want) in oracle_interp(&tgt, &src, &feats).iter().enumerate() {
            for (a, b) in got.row(row).iter().zip(want) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    out.push(Outcome::new("tri_interpolate", worst <= ORACLE_TOL, format!("max abs err {worst:.3e}")));
    out
}

pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for the relative error.
pub const REL_FLOOR: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GradStats {
    pub max_rel: f64,
    pub checked: usize,
    /// Entries whose one-sided differences disagree (the step crossed a
    /// ReLU, max or nearest-neighbor switch) while the analytic value
    /// matches one side.
    pub kinks: usize,
}

impl GradStats {
    pub fn merge(&mut self, o: GradStats) {
        self.max_rel = self.max_rel.max(o.max_rel);
        self.checked += o.checked;
        self.kinks += o.kinks;
    }

    pub fn ok(&self) -> bool {
        self.max_rel < GRAD_TOL && self.kinks * 50 <= self.checked.max(1)
    }
}

/// Compares one analytic partial against central differences of `f` along
/// a coordinate, where `f(h)` evaluates the function with that coordinate
/// shifted by `h`.
pub fn check_entry(analytic: f64, f: &mut dyn FnMut(f64) -> f64, stats: &mut GradStats) {
    let f0 = f(0.0);
    let fp = f(FD_STEP);
    let fm = f(-FD_STEP);
    let central = (fp - fm) / (2.0 * FD_STEP);
    let e = rel_err(analytic, central);
    stats.checked += 1;
    if e < GRAD_TOL {
        stats.max_rel = stats.max_rel.max(e);
        return;
    }
    let fwd = (fp - f0) / FD_STEP;
    let bwd = (f0 - fm) / FD_STEP;
    let sides_disagree = rel_err(fwd, bwd) > 1e-2;
    if sides_disagree && (rel_err(analytic, fwd) < 1e-3 || rel_err(analytic, bwd) < 1e-3) {
        stats.kinks += 1;
    } else {
        stats.max_rel = stats.max_rel.max(e);
    }
}

/// Checks a flat analytic gradient of `f(x)` against finite differences.
pub fn check_vector(x: &[f64], analytic: &[f64], f: &dyn Fn(&[f64]) -> f64) -> GradStats {
    let mut stats = GradStats::default();
    let mut buf = x.to_vec();
    for i in 0..x.len() {
        let mut g = |h: f64| {
            buf[i] = x[i] + h;
            let v = f(&buf);
            buf[i] = x[i];
            v
        };
        check_entry(analytic[i], &mut g, &mut stats);
    }
    stats
}

fn flat(points: &[Point3]) -> Vec<f64> {
    points.iter().flat_map(|p| p.to_array()).collect()
}

fn unflat(x: &[f64]) -> Vec<Point3> {
    x.chunks_exact(3).map(|c| Point3::new(c[0], c[1], c[2])).collect()
}

fn loss_check(pred: &[Point3], f: impl Fn(&[Point3]) -> (f64, Vec<f64>)) -> GradStats {
    let (_, grad) = f(pred);
    check_vector(&flat(pred), &grad, &|x: &[f64]| f(&unflat(x)).0)
}

/// Adds N(0, 0.1²) to every parameter so gains and biases are generic.
pub fn jitter_store(store: &mut ParamStore, r: &mut ChaCha8Rng) {
    for id in store.ids().collect::<Vec<_>>() {
        for v in store.tensor_mut(id).data_mut() {
            *v += 0.1 * normal(r);
        }
    }
}

/// Parameter gradients keyed by parameter index.
pub fn collect_param_grads(g: &Graph) -> BTreeMap<usize, Vec<f64>> {
    g.param_grads().map(|(id, gr)| (id.index(), gr.to_vec())).collect()
}

/// Checks up to `per_tensor` random entries of every parameter tensor.
/// `eval` runs the forward pass; when `backward` is set it also returns
/// analytic parameter gradients.
pub fn check_params(
    store: &mut ParamStore,
    r: &mut ChaCha8Rng,
    per_tensor: usize,
    eval: &dyn Fn(&ParamStore, bool) -> (f64, BTreeMap<usize, Vec<f64>>),
) -> GradStats {
    let (_, grads) = eval(store, true);
    let mut stats = GradStats::default();
    for id in store.ids().collect::<Vec<_>>() {
        let len = store.tensor(id).len();
        let picks: Vec<usize> = if len <= per_tensor {
            (0..len).collect()
        } else {
            (0..per_tensor).map(|_| r.random_range(0..len)).collect()
        };
        for j in picks {
            let a = grads.get(&id.index()).map_or(0.0, |g| g[j]);
            let base = store.tensor(id).data()[j];
            let mut f = |h: f64| {
                store.tensor_mut(id).data_mut()[j] = base + h;
                let v = eval(store, false).0;
                store.tensor_mut(id).data_mut()[j] = base;
                v
            };
            check_entry(a, &mut f, &mut stats);
        }
    }
    stats
}

/// `Σ w ⊙ out` as the scalar root, with fixed random projection weights.
pub fn project(g: &mut Graph, out: Var, w: &[f64]) -> Var {
    let v: f64 = g.value(out).iter().zip(w).map(|(a, b)| a * b).sum();
    g.custom_scalar(out, v, w.to_vec()).unwrap()
}

fn weights(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(r) / (n as f64).sqrt()).collect()
}

/// Checks input and parameter gradients of a graph-built block.
fn block_check(
    store: &mut ParamStore,
    r: &mut ChaCha8Rng,
    input: &Tensor,
    forward: &dyn Fn(&mut Graph, &ParamStore, Var) -> Var,
) -> GradStats {
    let mut probe = Graph::new();
    let x = probe.input(input.rows(), input.cols(), input.data().to_vec()).unwrap();
    let out_len = {
        let y = forward(&mut probe, store, x);
        probe.value(y).len()
    };
    let w = weights(r, out_len);
    let run = |s: &ParamStore, data: &[f64], back: bool| -> (f64, BTreeMap<usize, Vec<f64>>, Vec<f64>) {
        let mut g = Graph::new();
        let x = g.input_with_grad(input.rows(), input.cols(), data.to_vec()).unwrap();
        let y = forward(&mut g, s, x);
        let root = project(&mut g, y, &w);
        let v = g.scalar(root);
        if !back {
            return (v, BTreeMap::new(), Vec::new());
        }
        g.backward(root);
        let xg = g.grad(x).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; data.len()]);
        (v, collect_param_grads(&g), xg)
    };
    let mut stats = check_params(store, r, 4, &|s, back| {
        let (v, p, _) = run(s, input.data(), back);
        (v, p)
    });
    let (_, _, xg) = run(store, input.data(), true);
    let frozen = store.clone();
    stats.merge(check_vector(input.data(), &xg, &|d: &[f64]| run(&frozen, d, false).0));
    stats
}

fn random_tensor(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| normal(r)).collect()).unwrap()
}

/// Finite-difference checks of every loss and network block over `seeds`
/// random seeds; one outcome per component.
pub fn gradient_suite(seeds: u64) -> Vec<Outcome> {
    let mut acc: BTreeMap<&'static str, GradStats> = BTreeMap::new();
    for seed in 0..seeds {
        let mut r = rng(1000 + seed);
        let mut add = |name: &'static str, s: GradStats| acc.entry(name).or_default().merge(s);

        let n = r.random_range(3..=12usize);
        let pred = random_points(&mut r, n);
        let tgt = random_points(&mut r, n);
        let extra = r.random_range(0..6usize);
        let gt = random_points(&mut r, n + extra);

        add("loss_mse", loss_check(&pred, |p| {
            let l = losses::mse(p, &tgt).unwrap();
            (l.value, l.grad)
        }));
        add("loss_cos", loss_check(&pred, |p| {
            let l = losses::cosine(p, &tgt).unwrap();
            (l.value, l.grad)
        }));
        add("loss_chamfer", loss_check(&pred, |p| {
            let l = losses::chamfer(p, &gt).unwrap();
            (l.value, l.grad)
        }));
        add("loss_down (mse+cos+chamfer)", loss_check(&pred, |p| {
            let l = losses::down_loss(p, &tgt, DownTerms::default()).unwrap();
            (l.total, l.grad)
        }));
        let spread: Vec<Point3> = pred.iter().map(|&p| p * 0.4).collect();
        add("loss_repulsion", loss_check(&spread, |p| {
            let l = losses::repulsion(p, 2).unwrap();
            (l.value, l.grad)
        }));
        let tight: Vec<Point3> = pred.iter().map(|&p| p * 0.04).collect();
        add("loss_repulsion (bandwidth)", loss_check(&tight, |p| {
            let l = losses::repulsion_bandwidth(p, 2, 0.1).unwrap();
            (l.value, l.grad)
        }));
        add("loss_emd", loss_check(&pred, |p| {
            let l = losses::emd_nearest(p, &gt).unwrap();
            (l.value, l.grad)
        }));
        add("loss_emd (assignment)", loss_check(&pred, |p| {
            let l = losses::emd_assignment(p, &gt).unwrap();
            (l.value, l.grad)
        }));
        add("loss_up (rep+emd)", loss_check(&spread, |p| {
            let l = losses::up_loss(p, &gt, 2, 1.0, UpTerms::default(), EmdMode::Nearest).unwrap();
            (l.total, l.grad)
        }));

        let mut store = ParamStore::new();
        let mut ir = InitRng::new(seed);
        let lin = Linear::new(&mut store, "lin", 4, 3, &mut ir).unwrap();
        jitter_store(&mut store, &mut r);
        let x = random_tensor(&mut r, 5, 4);
        add("block_linear", block_check(&mut store, &mut r, &x, &|g, s, x| lin.forward(g, s, x).unwrap()));

        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", MlpSpec::new(&[4, 6, 5, 3], true), &mut ir).unwrap();
        jitter_store(&mut store, &mut r);
        let x = random_tensor(&mut r, 6, 4);
        add("block_mlp", block_check(&mut store, &mut r, &x, &|g, s, x| mlp.forward(g, s, x).unwrap()));

        let mut store = ParamStore::new();
        let pn = PointNet::new(&mut store, "pn", MlpSpec::new(&[3, 6, 5], true), &mut ir).unwrap();
        jitter_store(&mut store, &mut r);
        let x = random_tensor(&mut r, 3 * 4, 3);
        add("block_pointnet", block_check(&mut store, &mut r, &x, &|g, s, x| pn.forward(g, s, x, 4).unwrap()));

        let mut store = ParamStore::new();
        let spec = DecoderSpec { input: 5, width: 6, depth: 2, heads: 2, ffn: 7 };
        let dec = Decoder::new(&mut store, "dec", spec, &mut ir).unwrap();
        jitter_store(&mut store, &mut r);
        let x = random_tensor(&mut r, 4, 5);
        add("block_decoder (attention+layernorm)", block_check(&mut store, &mut r, &x, &|g, s, x| {
            dec.forward(g, s, x).unwrap().features
        }));

        let mut store = ParamStore::new();
        let sa = Mlp::new(&mut store, "sa", MlpSpec::new(&[3 + 4, 6, 5], false), &mut ir).unwrap();
        jitter_store(&mut store, &mut r);
        let prev = random_points(&mut r, 16);
        let idx = fps(&prev, 8, 0).unwrap();
        let next: Vec<Point3> = idx.iter().map(|&i| prev[i]).collect();
        let f = random_tensor(&mut r, 16, 4);
        add("block_set_abstraction", block_check(&mut store, &mut r, &f, &|g, s, x| {
            set_abstraction(g, s, &sa, &prev, x, &next, 4).unwrap()
        }));

        let mut store = ParamStore::new();
        let src = random_points(&mut r, 8);
        let tgt_pts = random_points(&mut r, 16);
        let (ii, ww, per) = interp_table(&tgt_pts, &src).unwrap();
        let f = random_tensor(&mut r, 8, 3);
        add("block_tri_interpolate", block_check(&mut store, &mut r, &f, &|g, _, x| {
            g.interp_rows(x, ii.clone(), ww.clone(), per).unwrap()
        }));

        let dcfg = DownNetConfig { g: 6, k: 4, c1: 4, c2: 4, c3: 6, depth: 1, heads: 2, hidden: 5, ffn: 6 };
        let mut down = DownNetModel::new(dcfg, seed).unwrap();
        jitter_store(&mut down.store, &mut r);
        let cloud = PointCloud::new("c", random_points(&mut r, 24)).unwrap();
        let ps = group(&cloud, 6, 4).unwrap();
        let noisy = inject(&ps, &NoiseParams::new(0.08, 0.15, seed)).unwrap();
        let net = down.clone();
        let stats = check_params(&mut down.store, &mut r, 3, &|s, back| {
            let mut m = net.clone();
            m.store = s.clone();
            let mut g = Graph::new();
            let out = m.forward_graph(&mut g, &noisy).unwrap();
            let pred = unflat(g.value(out));
            let l = losses::down_loss(&pred, &noisy.clean_centers, DownTerms::default()).unwrap();
            let root = g.custom_scalar(out, l.total, l.grad).unwrap();
            if back {
                g.backward(root);
                (l.total, collect_param_grads(&g))
            } else {
                (l.total, BTreeMap::new())
            }
        });
        add("down_net end-to-end", stats);

        let ucfg = UpNetConfig { gamma: 2, sa_k: 3, sa_width: 5, conv_width: 4, head_hidden: 6, ..UpNetConfig::default() };
        let mut up = UpNetModel::new(ucfg, seed).unwrap();
        jitter_store(&mut up.store, &mut r);
        let centers = random_points(&mut r, 8);
        let ugt = random_points(&mut r, 20);
        let unet = up.clone();
        let stats = check_params(&mut up.store, &mut r, 3, &|s, back| {
            let mut m = unet.clone();
            m.store = s.clone();
            let mut g = Graph::new();
            let (out, _, _) = m.forward_graph(&mut g, &centers).unwrap();
            let pred = unflat(g.value(out));
            let l = losses::up_loss(&pred, &ugt, 3, 0.3, UpTerms::default(), EmdMode::Nearest).unwrap();
            let root = g.custom_scalar(out, l.total, l.grad).unwrap();
            if back {
                g.backward(root);
                (l.total, collect_param_grads(&g))
            } else {
                (l.total, BTreeMap::new())
            }
        });
        add("up_net end-to-end", stats);
    }
    acc.into_iter()
        .map(|(name, s)| {
            Outcome::new(
                name,
                s.ok(),
                format!("max rel err {:.2e} over {} entries ({} kink crossings)", s.max_rel, s.checked, s.kinks),
            )
        })
        .collect()
}
