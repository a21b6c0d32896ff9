//! Classification, retrieval and segmentation heads with their metrics.

use rand::Rng;

use crate::config::SegmentationConfig;
use crate::error::{Error, Result};
use crate::nn::{Dense, Forward, ParamStore, SharedMlp};
use crate::points::{InterpolationWeights, Point};
use crate::tensor::Var;

/// Index of the longest capsule; ties go to the smallest index.
pub fn classify(lengths: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in lengths.iter().enumerate() {
        if v > lengths[best] {
            best = j;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalEntry {
    pub id: String,
    pub lengths: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, Default)]
pub struct RetrievalIndex {
    entries: Vec<RetrievalEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalHit {
    pub position: usize,
    pub id: String,
    pub distance: f64,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

impl RetrievalIndex {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, entry: RetrievalEntry) -> Result<()> {
        if let Some(first) = self.entries.first() {
            if first.lengths.len() != entry.lengths.len() {
                return Err(Error::shape("retrieval_index", format!("width {} in an index of width {}", entry.lengths.len(), first.lengths.len())));
            }
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RetrievalEntry] {
        &self.entries
    }

    /// Full stable ranking by distance, skipping entries whose id is `exclude`.
    fn ranking(&self, query: &[f64], exclude: Option<&str>) -> Vec<(usize, f64)> {
        let mut ranked: Vec<(usize, f64)> = self
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| Some(e.id.as_str()) != exclude)
            .map(|(i, e)| (i, euclidean(query, &e.lengths)))
            .collect();
        ranked.sort_by(|a, b| a.1.total_cmp(&b.1));
        ranked
    }
}

/// The `top_k` closest gallery entries, ascending by Euclidean distance,
/// ties in insertion order.
pub fn retrieve(query: &[f64], index: &RetrievalIndex, top_k: usize) -> Result<Vec<RetrievalHit>> {
    if index.is_empty() {
        return Err(Error::InvalidArgument("retrieval over an empty index".into()));
    }
    if index.entries[0].lengths.len() != query.len() {
        return Err(Error::shape("retrieve", format!("query width {} against index width {}", query.len(), index.entries[0].lengths.len())));
    }
    Ok(index
        .ranking(query, None)
        .into_iter()
        .take(top_k)
        .map(|(i, d)| RetrievalHit { position: i, id: index.entries[i].id.clone(), distance: d })
        .collect())
}

/// Average precision of a ranked relevance list.
///
/// The precision sum is kept as an exact fraction while it fits in 128 bits,
/// so short lists give the correctly rounded value.
pub fn average_precision(relevant: &[bool]) -> Option<f64> {
    let mut hits = 0u64;
    let mut sum = 0.0;
    let mut exact = Some((0u128, 1u128));
    for (rank, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            let rank = rank as u64 + 1;
            sum += hits as f64 / rank as f64;
            exact = exact.and_then(|(n, d)| add_fraction(n, d, hits as u128, rank as u128));
        }
    }
    if hits == 0 {
        return None;
    }
    Some(match exact.and_then(|(n, d)| Some((n, d.checked_mul(hits as u128)?))) {
        Some((n, d)) => ratio_to_f64(n, d),
        None => sum / hits as f64,
    })
}

fn gcd(mut a: u128, mut b: u128) -> u128 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

fn add_fraction(n: u128, d: u128, p: u128, q: u128) -> Option<(u128, u128)> {
    let num = n.checked_mul(q)?.checked_add(p.checked_mul(d)?)?;
    let den = d.checked_mul(q)?;
    let g = gcd(num, den).max(1);
    Some((num / g, den / g))
}

/// Correctly rounded `n / d` for `n <= d`.
fn ratio_to_f64(n: u128, d: u128) -> f64 {
    // integer part is 0 or 1; produce 64 fraction bits by long division
    let int = n / d;
    let mut rem = n % d;
    let mut bits: u128 = 0;
    let mut nbits = 0;
    while nbits < 64 {
        bits <<= 1;
        // rem < d, so 2 * rem may overflow only if d > 2^127
        let (twice, over) = rem.overflowing_mul(2);
        if over || twice >= d {
            bits |= 1;
            rem = twice.wrapping_sub(d);
        } else {
            rem = twice;
        }
        nbits += 1;
    }
    // 64 fraction bits plus a sticky bit exceed f64 precision, so one
    // conversion of the scaled integer rounds correctly
    let sticky = u128::from(rem != 0);
    let scaled = (int << 64 | bits) << 1 | sticky;
    scaled as f64 / 2f64.powi(65)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalReport {
    pub map: f64,
    pub queries: usize,
    pub skipped: usize,
    /// Mean `(recall, precision)` at every rank.
    pub pr_curve: Vec<(f64, f64)>,
}

/// mAP with same-class relevance. A query never retrieves the gallery entry
/// that shares its id.
pub fn mean_average_precision(queries: &[RetrievalEntry], index: &RetrievalIndex) -> Result<RetrievalReport> {
    let mut aps = Vec::new();
    let mut skipped = 0;
    let mut curve: Vec<(f64, f64, usize)> = Vec::new();
    for q in queries {
        let ranked = index.ranking(&q.lengths, Some(&q.id));
        let rel: Vec<bool> = ranked.iter().map(|(i, _)| index.entries[*i].label == q.label).collect();
        let Some(ap) = average_precision(&rel) else {
            log::warn!("query {} has no relevant gallery items; excluded from mAP", q.id);
            skipped += 1;
            continue;
        };
        aps.push(ap);
        let total = rel.iter().filter(|r| **r).count() as f64;
        let mut hits = 0.0;
        for (k, &r) in rel.iter().enumerate() {
            if r {
                hits += 1.0;
            }
            if curve.len() <= k {
                curve.push((0.0, 0.0, 0));
            }
            curve[k].0 += hits / total;
            curve[k].1 += hits / (k + 1) as f64;
            curve[k].2 += 1;
        }
    }
    if aps.is_empty() {
        return Err(Error::InvalidArgument("no query has a relevant gallery item".into()));
    }
    let map = aps.iter().sum::<f64>() / aps.len() as f64;
    let pr_curve = curve.into_iter().map(|(r, p, n)| (r / n as f64, p / n as f64)).collect();
    Ok(RetrievalReport { map, queries: aps.len(), skipped, pr_curve })
}

/// Per-part IoU over `parts` and their mean. A part absent from both
/// prediction and ground truth scores 1.
pub fn iou(pred: &[usize], gt: &[usize], parts: &[usize]) -> Result<(Vec<f64>, f64)> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    if parts.is_empty() {
        return Err(Error::InvalidArgument("IoU needs at least one part class".into()));
    }
    let per: Vec<f64> = parts
        .iter()
        .map(|&p| {
            let (mut inter, mut union) = (0usize, 0usize);
            for (&a, &b) in pred.iter().zip(gt) {
                let (x, y) = (a == p, b == p);
                inter += (x && y) as usize;
                union += (x || y) as usize;
            }
            if union == 0 {
                1.0
            } else {
                inter as f64 / union as f64
            }
        })
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    Ok((per, mean))
}

/// Inputs the segmentation decoder takes from the rest of the model.
pub struct SegmentationInputs<'x> {
    /// Shuffled feature rows `[M2 * rows_per_centroid, D]`.
    pub rows: Var,
    pub rows_per_centroid: usize,
    /// Selected digit capsule `[1, d_digit]`.
    pub capsule: Var,
    /// Layer-1 features reduced over scales `[M1, C1]`.
    pub layer1: Var,
    pub to_layer1: &'x InterpolationWeights,
    pub to_points: &'x InterpolationWeights,
    pub coords: &'x [Point],
}

/// Duplicated capsule joined with shuffled rows, pooled per centroid, then
/// propagated back to the points by inverse-distance interpolation.
#[derive(Clone, Debug)]
pub struct SegmentationHead {
    pub parts: usize,
    pub row_mlp: SharedMlp,
    pub centroid_mlp: SharedMlp,
    pub point_mlp: SharedMlp,
    pub out: Dense,
}

impl SegmentationHead {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, cfg: &SegmentationConfig, row_width: usize, digit_dim: usize, layer1_width: usize) -> Self {
        let row_mlp = SharedMlp::new(store, rng, "seg.rows", row_width + digit_dim, &cfg.row_mlp);
        let centroid_mlp = SharedMlp::new(store, rng, "seg.centroids", row_mlp.output_width() + layer1_width, &cfg.centroid_mlp);
        let point_mlp = SharedMlp::new(store, rng, "seg.points", centroid_mlp.output_width() + 3, &cfg.point_mlp);
        let out = Dense::new(store, rng, "seg.out", point_mlp.output_width(), cfg.num_parts, true);
        Self { parts: cfg.num_parts, row_mlp, centroid_mlp, point_mlp, out }
    }

    /// `[N, P]` part logits.
    pub fn forward(&self, f: &mut Forward<'_>, x: &SegmentationInputs<'_>) -> Result<Var> {
        let rows = f.g.shape(x.rows)[0];
        if x.rows_per_centroid == 0 || !rows.is_multiple_of(x.rows_per_centroid) {
            return Err(Error::shape("segmentation", format!("{rows} rows in groups of {}", x.rows_per_centroid)));
        }
        let dup = f.g.gather_rows(x.capsule, &vec![0; rows])?;
        let joined = f.g.concat(&[x.rows, dup], 1)?;
        let h = self.row_mlp.forward(f, joined)?;
        let w = self.row_mlp.output_width();
        let h = f.g.reshape(h, vec![rows / x.rows_per_centroid, x.rows_per_centroid, w])?;
        let per_centroid = f.g.max(h, 1)?;

        let up = f.g.weighted_gather(per_centroid, &x.to_layer1.indices, &x.to_layer1.weights, x.to_layer1.k)?;
        let up = f.g.concat(&[up, x.layer1], 1)?;
        let h = self.centroid_mlp.forward(f, up)?;

        let up = f.g.weighted_gather(h, &x.to_points.indices, &x.to_points.weights, x.to_points.k)?;
        let xyz = f.g.constant(vec![x.coords.len(), 3], x.coords.iter().flat_map(|p| p.iter().copied()).collect())?;
        let up = f.g.concat(&[up, xyz], 1)?;
        let h = self.point_mlp.forward(f, up)?;
        let logits = self.out.forward(f, h)?;
        if f.g.shape(logits)[1] != self.parts {
            return Err(Error::shape("segmentation", format!("{} logits for {} parts", f.g.shape(logits)[1], self.parts)));
        }
        Ok(logits)
    }
}

/// Row-wise argmax of `[N, P]` logits.
pub fn part_predictions(logits: &[f64], parts: usize) -> Vec<usize> {
    logits.chunks(parts).map(classify).collect()
}
