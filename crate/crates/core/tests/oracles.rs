//! Brute-force oracle comparisons and structural invariants.

mod common;

use common::*;
use p2sc_core::aggregation::{soft_assign, vlad_aggregate, ClusterBank};
use p2sc_core::capsules::{dynamic_routing, squash_vec};
use p2sc_core::heads::{average_precision, classify, iou, mean_average_precision, retrieve, RetrievalEntry, RetrievalIndex};
use p2sc_core::losses::{chamfer, margin_loss};
use p2sc_core::nn::{Forward, ParamStore};
use p2sc_core::points::{farthest_point_sample, interpolate_features, knn_group, Point};
use p2sc_core::tensor::{grad_check, Graph, Tensor};
use p2sc_core::config::LossConfig;
use proptest::prelude::*;

fn cloud_strategy(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 2..max)
}

/// Coarse lattice coordinates produce many exact distance ties.
fn lattice_strategy(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(prop::array::uniform3((-2i32..=2).prop_map(f64::from)), 2..max)
}

fn sorted(mut pts: Vec<Point>) -> Vec<Point> {
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fps_matches_naive_reference(pts in cloud_strategy(40), m in 1usize..8) {
        let m = m.min(pts.len());
        prop_assert_eq!(farthest_point_sample(&pts, m).unwrap(), fps_naive(&pts, m));
    }

    #[test]
    fn fps_matches_naive_reference_under_ties(pts in lattice_strategy(30), m in 1usize..6) {
        let m = m.min(pts.len());
        prop_assert_eq!(farthest_point_sample(&pts, m).unwrap(), fps_naive(&pts, m));
    }

    #[test]
    fn fps_selected_coordinates_ignore_input_order(pts in lattice_strategy(30), m in 1usize..6, seed in any::<u64>()) {
        let m = m.min(pts.len());
        let perm = permutation(&mut rng(seed), pts.len());
        let shuffled: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
        let a: Vec<Point> = farthest_point_sample(&pts, m).unwrap().iter().map(|&i| pts[i]).collect();
        let b: Vec<Point> = farthest_point_sample(&shuffled, m).unwrap().iter().map(|&i| shuffled[i]).collect();
        prop_assert_eq!(sorted(a), sorted(b));
    }

    /// Greedy dispersion is a 2-approximation of the exhaustive optimum.
    #[test]
    fn fps_dispersion_within_factor_two_of_exhaustive(pts in cloud_strategy(16), m in 2usize..5) {
        let m = m.min(pts.len());
        let got = min_pairwise(&pts, &farthest_point_sample(&pts, m).unwrap());
        let best = best_dispersion(&pts, m);
        prop_assert!(got >= 0.5 * best - 1e-12, "fps {got} vs optimum {best}");
    }

    #[test]
    fn knn_matches_sorted_brute_force(pts in lattice_strategy(30), k in 1usize..12) {
        let centers: Vec<usize> = (0..pts.len()).step_by(3).collect();
        let table = knn_group(&pts, &centers, k).unwrap();
        for (r, &c) in centers.iter().enumerate() {
            let row = table.row(r);
            prop_assert_eq!(row.to_vec(), knn_naive(&pts, c, k));
            prop_assert_eq!(row[0], c);
            // the fill rule repeats the nearest point past the cloud size
            let genuine = &row[..k.min(pts.len())];
            let d: Vec<f64> = genuine.iter().map(|&i| (0..3).map(|e| (pts[i][e] - pts[c][e]).powi(2)).sum()).collect();
            prop_assert!(d.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn interpolation_reproduces_source_features(pts in cloud_strategy(20), d in 1usize..4, seed in any::<u64>()) {
        // distinct sources: drop exact duplicates
        let mut src = sorted(pts);
        src.dedup();
        let feats = random_values(&mut rng(seed), src.len() * d, 2.0);
        let out = interpolate_features(&src, &src, &feats, d, 3).unwrap();
        prop_assert!(max_abs_diff(&out, &feats) <= 1e-4);
    }

    #[test]
    fn soft_assignment_matches_loop_form(n in 1usize..8, d in 1usize..5, q in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (x, w, b) = (random_values(&mut r, n * d, 2.0), random_values(&mut r, d * q, 2.0), random_values(&mut r, q, 1.0));
        let mut g = Graph::new();
        let xv = g.constant(vec![n, d], x.clone()).unwrap();
        let wv = g.constant(vec![d, q], w.clone()).unwrap();
        let bv = g.constant(vec![q], b.clone()).unwrap();
        let a = soft_assign(&mut g, xv, wv, bv).unwrap();
        let expect = soft_assign_naive(&x, n, d, &w, &b);
        prop_assert!(max_abs_diff(g.value(a), &expect) <= 1e-12);
        for row in g.value(a).chunks(q) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn vlad_matches_loop_form_and_ignores_row_order(n in 1usize..10, d in 1usize..5, q in 1usize..5, seed in any::<u64>()) {
        let mut r = rng(seed);
        let (x, w, b, c) = (random_values(&mut r, n * d, 2.0), random_values(&mut r, d * q, 1.0), random_values(&mut r, q, 1.0), random_values(&mut r, q * d, 1.0));
        let perm = permutation(&mut r, n);
        let px: Vec<f64> = perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect();
        let run = |x: &[f64]| {
            let mut g = Graph::new();
            let xv = g.constant(vec![n, d], x.to_vec()).unwrap();
            let wv = g.constant(vec![d, q], w.clone()).unwrap();
            let bv = g.constant(vec![q], b.clone()).unwrap();
            let cv = g.constant(vec![q, d], c.clone()).unwrap();
            let a = soft_assign(&mut g, xv, wv, bv).unwrap();
            let v = vlad_aggregate(&mut g, xv, cv, a).unwrap();
            (g.value(v).to_vec(), g.value(a).to_vec())
        };
        let (v, a) = run(&x);
        prop_assert!(max_abs_diff(&v, &vlad_naive(&x, n, d, &a, &c)) <= 1e-12);
        prop_assert!(max_abs_diff(&v, &run(&px).0) <= 1e-6);
    }

    #[test]
    fn spatial_embedding_matches_loop_form(n in 1usize..12, q in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let mut store = ParamStore::new();
        let bank = ClusterBank::new(&mut store, &mut r, "bank", q, 4).unwrap();
        let coords = random_cloud(&mut r, n).coords().to_vec();
        let mut f = Forward::new(&store, false);
        let y = bank.spatial_embed(&mut f, &coords).unwrap();
        let flat: Vec<f64> = coords.iter().flatten().copied().collect();
        let a = soft_assign_naive(&flat, n, 3, store.get(bank.coord_assign_weights).data(), store.get(bank.coord_assign_biases).data());
        let expect = vlad_naive(&flat, n, 3, &a, store.get(bank.coord_centers).data());
        prop_assert!(max_abs_diff(f.g.value(y), &expect) <= 1e-12);
        let perm = permutation(&mut r, n);
        let shuffled: Vec<Point> = perm.iter().map(|&i| coords[i]).collect();
        let mut f2 = Forward::new(&store, false);
        let y2 = bank.spatial_embed(&mut f2, &shuffled).unwrap();
        prop_assert!(max_abs_diff(f.g.value(y), f2.g.value(y2)) <= 1e-6);
    }

    #[test]
    fn routing_matches_loop_form(seed in any::<u64>(), iters in 1usize..5) {
        let (ni, nj, dc, dd) = (4, 2, 3, 3);
        let mut r = rng(seed);
        let (u, w, b) = (random_values(&mut r, ni * dc, 1.0), random_values(&mut r, ni * nj * dc * dd, 1.0), random_values(&mut r, ni * nj, 0.5));
        let mut g = Graph::new();
        let uv = g.constant(vec![ni, dc], u.clone()).unwrap();
        let wv = g.constant(vec![ni, nj, dc, dd], w.clone()).unwrap();
        let bv = g.constant(vec![ni, nj], b.clone()).unwrap();
        let trace = dynamic_routing(&mut g, uv, wv, bv, iters).unwrap();
        let reference = routing_naive(&u, &w, &b, ni, nj, dc, dd, iters);
        for it in 0..iters {
            prop_assert!(max_abs_diff(g.value(trace.per_iteration[it]), &reference.per_iteration[it]) <= 1e-10);
            prop_assert!(max_abs_diff(g.value(trace.couplings[it]), &reference.couplings[it]) <= 1e-10);
            for row in g.value(trace.couplings[it]).chunks(nj) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
        let again = dynamic_routing(&mut g, uv, wv, bv, iters).unwrap();
        prop_assert_eq!(g.value(again.v), g.value(trace.v));
        let single = dynamic_routing(&mut g, uv, wv, bv, 1).unwrap();
        prop_assert_eq!(g.value(single.v), g.value(trace.per_iteration[0]));
    }

    #[test]
    fn squash_norm_below_one(x in prop::collection::vec(-50.0f64..50.0, 1..8)) {
        let n: f64 = squash_vec(&x).iter().map(|v| v * v).sum::<f64>().sqrt();
        prop_assert!(n < 1.0);
    }

    #[test]
    fn chamfer_symmetric_and_order_free(a in cloud_strategy(12), b in cloud_strategy(12), seed in any::<u64>()) {
        let flat = |p: &[Point]| p.iter().flatten().copied().collect::<Vec<f64>>();
        let eval = |t: &[Point], p: &[Point]| {
            let mut g = Graph::new();
            let pv = g.constant(vec![p.len(), 3], flat(p)).unwrap();
            let c = chamfer(&mut g, &flat(t), pv).unwrap();
            g.scalar_value(c)
        };
        let ab = eval(&a, &b);
        prop_assert!(rel_diff(ab, eval(&b, &a)) <= 1e-12);
        prop_assert!(rel_diff(ab, chamfer_naive(&a, &b)) <= 1e-12);
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(eval(&a, &a), 0.0);
        let pa: Vec<Point> = permutation(&mut rng(seed), a.len()).iter().map(|&i| a[i]).collect();
        let pb: Vec<Point> = permutation(&mut rng(seed ^ 1), b.len()).iter().map(|&i| b[i]).collect();
        prop_assert!(rel_diff(ab, eval(&pa, &pb)) <= 1e-12);
    }

    #[test]
    fn margin_loss_zero_exactly_at_margins(v in prop::collection::vec(0.0f64..1.0, 2..6), label in 0usize..6) {
        let label = label % v.len();
        let cfg = LossConfig::default();
        let mut g = Graph::new();
        let l = g.constant(vec![v.len()], v.clone()).unwrap();
        let m = margin_loss(&mut g, l, label, &cfg).unwrap();
        let loss = g.scalar_value(m);
        prop_assert!(loss >= 0.0);
        let satisfied = v[label] >= cfg.m_plus && v.iter().enumerate().all(|(j, &x)| j == label || x <= cfg.m_minus);
        prop_assert_eq!(loss == 0.0, satisfied);
    }

    #[test]
    fn classify_ignores_monotone_rescaling(v in prop::collection::vec(0.0f64..1.0, 1..8), a in 0.1f64..10.0, c in -3.0f64..3.0) {
        let scaled: Vec<f64> = v.iter().map(|x| a * x + c).collect();
        let cubed: Vec<f64> = v.iter().map(|x| x.powi(3)).collect();
        prop_assert_eq!(classify(&v), classify(&scaled));
        prop_assert_eq!(classify(&v), classify(&cubed));
    }

    #[test]
    fn retrieval_distances_are_a_metric(pts in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 3..8)) {
        let mut index = RetrievalIndex::new();
        for (i, p) in pts.iter().enumerate() {
            index.insert(RetrievalEntry { id: format!("s{i}"), lengths: p.clone(), label: 0 }).unwrap();
        }
        let dist = |a: usize, b: usize| retrieve(&pts[a], &index, pts.len()).unwrap().into_iter().find(|h| h.position == b).unwrap().distance;
        for a in 0..pts.len() {
            prop_assert_eq!(retrieve(&pts[a], &index, 1).unwrap()[0].distance, 0.0);
            for b in 0..pts.len() {
                prop_assert!(dist(a, b) >= 0.0);
                prop_assert_eq!(dist(a, b), dist(b, a));
                for c in 0..pts.len() {
                    prop_assert!(dist(a, c) <= dist(a, b) + dist(b, c) + 1e-12);
                }
            }
        }
    }

    #[test]
    fn iou_bounded_and_symmetric(pairs in prop::collection::vec((0usize..3, 0usize..3), 1..40)) {
        let (pred, gt): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
        let (per, mean) = iou(&pred, &gt, &[0, 1, 2]).unwrap();
        let (per2, mean2) = iou(&gt, &pred, &[0, 1, 2]).unwrap();
        prop_assert!(per.iter().all(|x| (0.0..=1.0).contains(x)));
        prop_assert_eq!(per, per2);
        prop_assert_eq!(mean, mean2);
    }
}

#[test]
fn aggregation_block_gradients() {
    let (n, d, q) = (6, 4, 3);
    let mut r = rng(3);
    let x = random_values(&mut r, n * d, 1.0);
    let w = Tensor::new(vec![d, q], random_values(&mut r, d * q, 1.0)).unwrap();
    let c = Tensor::new(vec![q, d], random_values(&mut r, q * d, 1.0)).unwrap();
    let block = |g: &mut Graph<'_>, wv, cv| {
        let xv = g.constant(vec![n, d], x.clone())?;
        let bv = g.constant(vec![q], vec![0.1, -0.2, 0.05])?;
        let a = soft_assign(g, xv, wv, bv)?;
        let v = vlad_aggregate(g, xv, cv, a)?;
        let v = g.normalize_rows(v)?;
        let wt = g.constant(vec![q, d], (0..q * d).map(|i| (i as f64).cos()).collect())?;
        let p = g.mul(v, wt)?;
        Ok(g.sum_all(p))
    };
    let err_w = grad_check(|g, wv| { let cv = g.constant(c.shape().to_vec(), c.data().to_vec())?; block(g, wv, cv) }, &w, 1e-5).unwrap();
    let err_c = grad_check(|g, cv| { let wv = g.constant(w.shape().to_vec(), w.data().to_vec())?; block(g, wv, cv) }, &c, 1e-5).unwrap();
    assert!(err_w <= 1e-5, "assignment weights {err_w:e}");
    assert!(err_c <= 1e-5, "centers {err_c:e}");
}

#[test]
fn squash_closed_forms() {
    assert_eq!(squash_vec(&[0.0, 0.0, 0.0]), vec![0.0; 3]);
    let n = |v: Vec<f64>| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((n(squash_vec(&[0.0, 1.0])) - 0.5).abs() <= 1e-15);
    assert!((n(squash_vec(&[0.0, 3.0, 0.0])) - 0.9).abs() <= 1e-15);
}

#[test]
fn margin_loss_hand_values() {
    let cfg = LossConfig::default();
    let mut g = Graph::new();
    let l = g.constant(vec![2], vec![0.5, 0.5]).unwrap();
    let m = margin_loss(&mut g, l, 0, &cfg).unwrap();
    // (0.9 - 0.5)^2 + 0.5 * (0.5 - 0.1)^2
    assert!((g.scalar_value(m) - 0.24).abs() <= 1e-15);
}

#[test]
fn chamfer_identity_and_known_value() {
    let mut g = Graph::new();
    let p = g.constant(vec![2, 3], vec![0.0, 0.0, 0.0, 2.0, 0.0, 0.0]).unwrap();
    let c = chamfer(&mut g, &[0.0, 0.0, 0.0], p).unwrap();
    // target->pred 0; pred->target (0 + 2) / 2
    assert_eq!(g.scalar_value(c), 1.0);
}

#[test]
fn average_precision_hand_values() {
    assert_eq!(average_precision(&[true, true, false]), Some(1.0));
    assert_eq!(average_precision(&[false, true]), Some(0.5));
    assert_eq!(average_precision(&[true, false, true]), Some(5.0 / 6.0));
    assert_eq!(average_precision(&[false, false]), None);
}

#[test]
fn perfect_ranking_gives_unit_map() {
    let mut index = RetrievalIndex::new();
    let mut queries = Vec::new();
    for label in 0..3 {
        for copy in 0..3 {
            let e = RetrievalEntry { id: format!("{label}-{copy}"), lengths: vec![label as f64 * 10.0, copy as f64 * 0.01], label };
            index.insert(e.clone()).unwrap();
            queries.push(e);
        }
    }
    let report = mean_average_precision(&queries, &index).unwrap();
    assert_eq!(report.map, 1.0);
    assert_eq!(report.queries, 9);
}

#[test]
fn iou_hand_values() {
    assert_eq!(iou(&[0, 1, 1], &[0, 1, 1], &[0, 1]).unwrap().1, 1.0);
    assert_eq!(iou(&[1, 1], &[0, 0], &[0, 1]).unwrap().1, 0.0);
    let (per, _) = iou(&[1, 1, 1], &[1, 0, 0], &[1]).unwrap();
    assert_eq!(per[0], 1.0 / 3.0);
}

#[test]
fn fps_small_example() {
    let pts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
    assert_eq!(farthest_point_sample(&pts, 2).unwrap(), vec![1, 0]);
}

#[test]
fn interpolation_matches_three_nearest_oracle() {
    let mut r = rng(21);
    let sources = random_cloud(&mut r, 9).coords().to_vec();
    let targets = random_cloud(&mut r, 5).coords().to_vec();
    let d = 2;
    let feats = random_values(&mut r, sources.len() * d, 1.0);
    let got = interpolate_features(&targets, &sources, &feats, d, 3).unwrap();
    for (t, target) in targets.iter().enumerate() {
        let mut dist: Vec<(f64, usize)> =
            sources.iter().enumerate().map(|(i, s)| ((0..3).map(|e| (s[e] - target[e]).powi(2)).sum::<f64>().sqrt(), i)).collect();
        dist.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let w: Vec<f64> = dist[..3].iter().map(|(x, _)| 1.0 / (x + 1e-8)).collect();
        let z: f64 = w.iter().sum();
        for e in 0..d {
            let expect: f64 = dist[..3].iter().zip(&w).map(|((_, i), wi)| wi / z * feats[i * d + e]).sum();
            assert!((got[t * d + e] - expect).abs() <= 1e-12);
        }
    }
}

#[test]
fn average_precision_long_lists_stay_finite() {
    let rel: Vec<bool> = (0..500).map(|i| i % 3 == 0).collect();
    let ap = average_precision(&rel).unwrap();
    let hits = rel.iter().filter(|r| **r).count() as f64;
    let mut h = 0.0;
    let naive: f64 = rel.iter().enumerate().filter(|(_, r)| **r).map(|(k, _)| { h += 1.0; h / (k + 1) as f64 }).sum::<f64>() / hits;
    assert!((ap - naive).abs() <= 1e-12);
}

#[test]
fn fps_dispersion_on_64_point_clouds() {
    for seed in 0..4 {
        let pts = random_cloud(&mut rng(100 + seed), 64).coords().to_vec();
        for m in 2..=4 {
            let got = min_pairwise(&pts, &farthest_point_sample(&pts, m).unwrap());
            let best = best_dispersion(&pts, m);
            assert!(got >= 0.5 * best - 1e-12, "seed {seed} m {m}: fps {got} vs optimum {best}");
        }
    }
}
