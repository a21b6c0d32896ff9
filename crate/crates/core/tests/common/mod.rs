//! Independent reference implementations used as oracles by the test targets.
//! Nothing here calls into the library's numeric kernels.
#![allow(dead_code)]

use std::cmp::Ordering;

use p2sc_core::data::{synthetic_dataset, Dataset, ShapeFamily};
use p2sc_core::points::{Point, PointCloud};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_values(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_cloud(rng: &mut impl Rng, n: usize) -> PointCloud {
    PointCloud::new((0..n).map(|_| [0; 3].map(|_| rng.random_range(-1.0..1.0))).collect()).unwrap()
}

pub fn permutation(rng: &mut impl Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(rng);
    p
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn d2(a: &Point, b: &Point) -> f64 {
    (0..3).map(|e| (a[e] - b[e]).powi(2)).sum()
}

fn lex(a: &Point, b: &Point) -> Ordering {
    for e in 0..3 {
        match a[e].partial_cmp(&b[e]).unwrap() {
            Ordering::Equal => continue,
            o => return o,
        }
    }
    Ordering::Equal
}

/// Textbook FPS: recompute every candidate's distance to the selected set
/// from scratch at each step.
pub fn fps_naive(coords: &[Point], m: usize) -> Vec<usize> {
    let n = coords.len() as f64;
    let mut mean = [0.0; 3];
    for p in coords {
        for e in 0..3 {
            mean[e] += p[e];
        }
    }
    let mean = mean.map(|v| v / n);
    let better = |score: &dyn Fn(usize) -> f64, a: usize, b: usize| -> bool {
        let (sa, sb) = (score(a), score(b));
        sa > sb || (sa == sb && (lex(&coords[a], &coords[b]) == Ordering::Less || (lex(&coords[a], &coords[b]) == Ordering::Equal && a < b)))
    };
    let mut best = 0;
    for i in 1..coords.len() {
        if better(&|k| d2(&coords[k], &mean), i, best) {
            best = i;
        }
    }
    let mut selected = vec![best];
    while selected.len() < m {
        let score = |k: usize| selected.iter().map(|&s| d2(&coords[k], &coords[s])).fold(f64::INFINITY, f64::min);
        let mut pick: Option<usize> = None;
        for i in 0..coords.len() {
            if selected.contains(&i) {
                continue;
            }
            pick = match pick {
                Some(p) if !better(&score, i, p) => Some(p),
                _ => Some(i),
            };
        }
        selected.push(pick.unwrap());
    }
    selected
}

pub fn min_pairwise(coords: &[Point], idx: &[usize]) -> f64 {
    let mut best = f64::INFINITY;
    for a in 0..idx.len() {
        for b in a + 1..idx.len() {
            best = best.min(d2(&coords[idx[a]], &coords[idx[b]]).sqrt());
        }
    }
    best
}

/// Largest achievable minimum pairwise distance over all m-subsets.
pub fn best_dispersion(coords: &[Point], m: usize) -> f64 {
    fn rec(coords: &[Point], m: usize, start: usize, cur: &mut Vec<usize>, best: &mut f64) {
        if cur.len() == m {
            *best = best.max(min_pairwise(coords, cur));
            return;
        }
        for i in start..coords.len() {
            cur.push(i);
            rec(coords, m, i + 1, cur, best);
            cur.pop();
        }
    }
    let mut best = 0.0;
    rec(coords, m, 0, &mut Vec::new(), &mut best);
    best
}

/// Brute-force kNN: full sort by (distance, self first, lexicographic, index).
pub fn knn_naive(coords: &[Point], center: usize, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..coords.len()).collect();
    idx.sort_by(|&a, &b| {
        let (da, db) = (d2(&coords[a], &coords[center]), d2(&coords[b], &coords[center]));
        da.partial_cmp(&db)
            .unwrap()
            .then((b == center).cmp(&(a == center)))
            .then(lex(&coords[a], &coords[b]))
            .then(a.cmp(&b))
    });
    let mut row: Vec<usize> = idx.into_iter().take(k).collect();
    let first = row[0];
    row.resize(k, first);
    row
}

/// `a[i][k] = exp(x_i . w_k + b_k) / sum_k' exp(x_i . w_k' + b_k')`, `w` stored `[d, q]`.
pub fn soft_assign_naive(x: &[f64], n: usize, d: usize, w: &[f64], b: &[f64]) -> Vec<f64> {
    let q = b.len();
    let mut out = vec![0.0; n * q];
    for i in 0..n {
        let logits: Vec<f64> = (0..q).map(|k| (0..d).map(|e| x[i * d + e] * w[e * q + k]).sum::<f64>() + b[k]).collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - top).exp()).sum();
        for k in 0..q {
            out[i * q + k] = (logits[k] - top).exp() / z;
        }
    }
    out
}

/// `v[k][e] = sum_i a[i][k] (x[i][e] - c[k][e])` with explicit loops.
pub fn vlad_naive(x: &[f64], n: usize, d: usize, a: &[f64], centers: &[f64]) -> Vec<f64> {
    let q = centers.len() / d;
    let mut out = vec![0.0; q * d];
    for k in 0..q {
        for e in 0..d {
            let mut s = 0.0;
            for i in 0..n {
                s += a[i * q + k] * (x[i * d + e] - centers[k * d + e]);
            }
            out[k * d + e] = s;
        }
    }
    out
}

pub fn squash_naive(s: &[f64]) -> Vec<f64> {
    let n2: f64 = s.iter().map(|x| x * x).sum();
    if n2 == 0.0 {
        return vec![0.0; s.len()];
    }
    let f = n2 / (1.0 + n2) / n2.sqrt();
    s.iter().map(|x| x * f).collect()
}

pub struct RoutingReference {
    pub per_iteration: Vec<Vec<f64>>,
    pub couplings: Vec<Vec<f64>>,
}

/// Routing by agreement written as nested loops: `u` is `[I, dc]`,
/// `w` is `[I, J, dc, dd]`, `b0` is `[I, J]`.
pub fn routing_naive(u: &[f64], w: &[f64], b0: &[f64], ni: usize, nj: usize, dc: usize, dd: usize, iters: usize) -> RoutingReference {
    let mut uhat = vec![0.0; ni * nj * dd];
    for i in 0..ni {
        for j in 0..nj {
            for o in 0..dd {
                let mut s = 0.0;
                for c in 0..dc {
                    s += u[i * dc + c] * w[((i * nj + j) * dc + c) * dd + o];
                }
                uhat[(i * nj + j) * dd + o] = s;
            }
        }
    }
    let mut b = b0.to_vec();
    let mut per_iteration = Vec::new();
    let mut couplings = Vec::new();
    for it in 0..iters {
        let mut c = vec![0.0; ni * nj];
        for i in 0..ni {
            let z: f64 = (0..nj).map(|j| b[i * nj + j].exp()).sum();
            for j in 0..nj {
                c[i * nj + j] = b[i * nj + j].exp() / z;
            }
        }
        let mut v = Vec::with_capacity(nj * dd);
        for j in 0..nj {
            let s: Vec<f64> = (0..dd).map(|o| (0..ni).map(|i| c[i * nj + j] * uhat[(i * nj + j) * dd + o]).sum()).collect();
            v.extend(squash_naive(&s));
        }
        if it + 1 < iters {
            for i in 0..ni {
                for j in 0..nj {
                    b[i * nj + j] += (0..dd).map(|o| uhat[(i * nj + j) * dd + o] * v[j * dd + o]).sum::<f64>();
                }
            }
        }
        couplings.push(c);
        per_iteration.push(v);
    }
    RoutingReference { per_iteration, couplings }
}

/// Symmetric chamfer distance: mean nearest Euclidean distance both ways.
pub fn chamfer_naive(a: &[Point], b: &[Point]) -> f64 {
    let one = |x: &[Point], y: &[Point]| x.iter().map(|p| y.iter().map(|q| d2(p, q)).fold(f64::INFINITY, f64::min).sqrt()).sum::<f64>() / x.len() as f64;
    one(a, b) + one(b, a)
}

pub fn to_points(flat: &[f64]) -> Vec<Point> {
    flat.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

pub const TOY_FAMILIES: [ShapeFamily; 4] = [ShapeFamily::Sphere, ShapeFamily::Cube, ShapeFamily::Torus, ShapeFamily::Plane];

/// Toy classification data, normalized and resampled, split 4:1 by index.
pub fn toy_split(per_class: usize, points: usize, seed: u64) -> (Dataset, Dataset) {
    let data = synthetic_dataset(&TOY_FAMILIES, per_class, points, 0.01, seed).unwrap().prepared(points, seed).unwrap();
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (i, s) in data.samples.into_iter().enumerate() {
        if i % 5 == 4 {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    (Dataset { classes: data.classes.clone(), samples: train }, Dataset { classes: data.classes, samples: test })
}

/// Central-difference check of the full training loss against the tape
/// gradient, probing `probes` coordinates of every trainable tensor.
/// Returns the worst `|a - n| / max(1, |a|)` and the tensor it came from.
pub fn model_grad_check(
    model: &p2sc_core::model::Model,
    x: &p2sc_core::model::PreparedCloud,
    label: usize,
    probes: usize,
    eps: f64,
) -> (f64, String) {
    let analytic = model.sample_gradients(x, label).unwrap().grads;
    let loss_at = |m: &p2sc_core::model::Model| {
        let mut f = p2sc_core::nn::Forward::new(&m.params, true);
        m.loss(&mut f, x, label).unwrap().1.loss
    };
    let mut worst = (0.0, String::new());
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        let entry = &model.params.entries()[id.index()];
        if !entry.trainable {
            continue;
        }
        let n = entry.tensor.len();
        for p in 0..probes.min(n) {
            let c = (p * 7919 + id.index() * 31) % n;
            let mut plus = model.clone();
            plus.params.get_mut(id).data_mut()[c] += eps;
            let mut minus = model.clone();
            minus.params.get_mut(id).data_mut()[c] -= eps;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * eps);
            let a = analytic.get(id).map(|g| g[c]).unwrap_or(0.0);
            let err = (a - numeric).abs() / a.abs().max(1.0);
            if err > worst.0 {
                worst = (err, format!("{}[{c}] analytic {a:e} numeric {numeric:e}", entry.name));
            }
        }
    }
    worst
}
