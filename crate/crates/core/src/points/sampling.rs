use std::cmp::Ordering;

use super::cloud::{dist2, lex_cmp, Point};
use crate::error::{Error, Result};

/// Ordering of candidate points by a score where larger wins, then smaller
/// lexicographic coordinates, then smaller index.
fn prefer(coords: &[Point], score: &[f64], a: usize, b: usize) -> Ordering {
    score[a]
        .total_cmp(&score[b])
        .then_with(|| lex_cmp(&coords[b], &coords[a]))
        .then_with(|| b.cmp(&a))
}

/// Greedy farthest point sampling.
///
/// The seed is the point farthest from the cloud mean. Each following pick
/// maximizes the distance to the already selected set. Ties go to the
/// lexicographically smallest coordinates, then the smallest index, so the
/// selected coordinates do not depend on the input order.
pub fn farthest_point_sample(coords: &[Point], m: usize) -> Result<Vec<usize>> {
    let n = coords.len();
    if m == 0 {
        return Err(Error::InvalidArgument("farthest point sampling needs m >= 1".into()));
    }
    if m > n {
        return Err(Error::InvalidArgument(format!("cannot sample {m} points from a cloud of {n}")));
    }
    let mut mean = [0.0; 3];
    for p in coords {
        for e in 0..3 {
            mean[e] += p[e];
        }
    }
    let mean = mean.map(|v| v / n as f64);
    let from_mean: Vec<f64> = coords.iter().map(|p| dist2(p, &mean)).collect();
    let seed = (0..n).max_by(|&a, &b| prefer(coords, &from_mean, a, b)).expect("non-empty cloud");

    let mut selected = Vec::with_capacity(m);
    let mut taken = vec![false; n];
    let mut min_d = vec![f64::INFINITY; n];
    let mut current = seed;
    loop {
        selected.push(current);
        taken[current] = true;
        if selected.len() == m {
            break;
        }
        let c = coords[current];
        for (i, p) in coords.iter().enumerate() {
            let d = dist2(p, &c);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
        current = (0..n)
            .filter(|&i| !taken[i])
            .max_by(|&a, &b| prefer(coords, &min_d, a, b))
            .expect("m <= n leaves a candidate");
    }
    Ok(selected)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent greedy oracle: recomputes the set distance from scratch
    /// at every step and scans candidates in lexicographic order.
    fn oracle_fps(coords: &[Point], m: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..coords.len()).collect();
        order.sort_by(|&a, &b| lex_cmp(&coords[a], &coords[b]).then(a.cmp(&b)));
        let n = coords.len() as f64;
        let mean = [0, 1, 2].map(|e| coords.iter().map(|p| p[e]).sum::<f64>() / n);
        let mut best = order[0];
        for &i in &order {
            if dist2(&coords[i], &mean) > dist2(&coords[best], &mean) {
                best = i;
            }
        }
        let mut sel = vec![best];
        while sel.len() < m {
            let set_dist = |i: usize| sel.iter().map(|&s| dist2(&coords[i], &coords[s])).fold(f64::INFINITY, f64::min);
            let mut pick: Option<usize> = None;
            for &i in &order {
                if sel.contains(&i) {
                    continue;
                }
                match pick {
                    None => pick = Some(i),
                    Some(p) if set_dist(i) > set_dist(p) => pick = Some(i),
                    _ => {}
                }
            }
            sel.push(pick.unwrap());
        }
        sel
    }

    #[test]
    fn three_point_example() {
        let coords = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.1, 0.0, 0.0]];
        assert_eq!(farthest_point_sample(&coords, 2).unwrap(), vec![1, 0]);
        assert_eq!(oracle_fps(&coords, 2), vec![1, 0]);
        assert_eq!(farthest_point_sample(&coords, 1).unwrap(), vec![1]);
    }

    #[test]
    fn exhausts_cloud() {
        let coords: Vec<Point> = (0..9).map(|i| [i as f64 * 0.3, (i % 3) as f64, 0.0]).collect();
        let mut idx = farthest_point_sample(&coords, 9).unwrap();
        idx.sort_unstable();
        assert_eq!(idx, (0..9).collect::<Vec<_>>());
    }

    #[test]
    fn invalid_counts() {
        let coords = [[0.0; 3]; 4];
        assert!(farthest_point_sample(&coords, 0).is_err());
        assert!(farthest_point_sample(&coords, 5).is_err());
    }

    #[test]
    fn duplicates_are_never_selected_twice() {
        let coords = [[0.0; 3], [0.0; 3], [1.0, 0.0, 0.0], [1.0, 0.0, 0.0]];
        let idx = farthest_point_sample(&coords, 4).unwrap();
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
    }

    #[test]
    fn matches_oracle_on_grids_with_ties() {
        // Integer grids are full of exact distance ties.
        let mut coords = Vec::new();
        for x in 0..4 {
            for y in 0..3 {
                for z in 0..2 {
                    coords.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        for m in 1..=coords.len() {
            assert_eq!(farthest_point_sample(&coords, m).unwrap(), oracle_fps(&coords, m), "m = {m}");
        }
    }

    use proptest::prelude::*;

    fn cloud_strategy() -> impl Strategy<Value = Vec<Point>> {
        prop::collection::vec(prop::array::uniform3(-1.0f64..1.0), 2..40)
    }

    proptest! {
        #[test]
        fn matches_oracle(coords in cloud_strategy(), frac in 0.0f64..1.0) {
            let m = 1 + ((coords.len() - 1) as f64 * frac) as usize;
            prop_assert_eq!(farthest_point_sample(&coords, m).unwrap(), oracle_fps(&coords, m));
        }

        #[test]
        fn selected_coordinates_are_permutation_invariant(coords in cloud_strategy(), seed in any::<u64>(), frac in 0.0f64..1.0) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let m = 1 + ((coords.len() - 1) as f64 * frac) as usize;
            let mut perm: Vec<usize> = (0..coords.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let shuffled: Vec<Point> = perm.iter().map(|&i| coords[i]).collect();
            let a: Vec<Point> = farthest_point_sample(&coords, m).unwrap().iter().map(|&i| coords[i]).collect();
            let b: Vec<Point> = farthest_point_sample(&shuffled, m).unwrap().iter().map(|&i| shuffled[i]).collect();
            prop_assert_eq!(a, b);
        }
    }
}
