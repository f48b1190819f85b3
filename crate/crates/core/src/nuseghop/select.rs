//! Single-split cross-entropy ranking of features against binary labels.

use rayon::prelude::*;

/// Uniform cut points tried per feature: `min + (max - min) * k / 32`.
pub const CANDIDATE_SPLITS: usize = 31;
const BINS: usize = CANDIDATE_SPLITS + 1;

fn entropy(p: f64) -> f64 {
    let h = |q: f64| if q > 0.0 { -q * q.log2() } else { 0.0 };
    h(p) + h(1.0 - p)
}

/// Class weights making both classes carry equal total weight.
pub(crate) fn balanced_weights(labels: &[bool]) -> (f64, f64) {
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = labels.len() as f64 - pos;
    let n = labels.len() as f64;
    let w = |c: f64| if c > 0.0 { n / (2.0 * c) } else { 0.0 };
    (w(neg), w(pos))
}

/// Weighted binary entropy of the best of the candidate splits of one
/// feature column; lower is more discriminant. A constant column scores the
/// unsplit entropy.
pub fn discriminant_loss(column: &[f32], labels: &[bool], weights: (f64, f64)) -> f64 {
    let (lo, hi) = column.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let mut counts = [[0.0f64; 2]; BINS];
    let span = (hi - lo) as f64;
    for (&v, &y) in column.iter().zip(labels) {
        let b = if span > 0.0 { (((v - lo) as f64 / span) * BINS as f64) as usize } else { 0 };
        let cls = usize::from(y);
        counts[b.min(BINS - 1)][cls] += if y { weights.1 } else { weights.0 };
    }
    let total = counts.iter().fold([0.0, 0.0], |a, c| [a[0] + c[0], a[1] + c[1]]);
    let side = |neg: f64, pos: f64| if neg + pos > 0.0 { (neg + pos) * entropy(pos / (neg + pos)) } else { 0.0 };
    let all = total[0] + total[1];
    if all <= 0.0 {
        return 1.0;
    }
    let mut best = side(total[0], total[1]) / all;
    let mut left = [0.0, 0.0];
    for c in counts.iter().take(CANDIDATE_SPLITS) {
        left[0] += c[0];
        left[1] += c[1];
        let loss = (side(left[0], left[1]) + side(total[0] - left[0], total[1] - left[1])) / all;
        best = best.min(loss);
    }
    best
}

/// Ranks `(loss, index)` pairs ascending and keeps the first `n_keep` indices.
pub(crate) fn top_by_loss(losses: &[f64], n_keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..losses.len()).collect();
    order.sort_by(|&a, &b| losses[a].total_cmp(&losses[b]).then(a.cmp(&b)));
    order.truncate(n_keep);
    order
}

/// Indices of the `n_keep` most discriminant columns of the row-major
/// `features` matrix (`labels.len()` rows), ties broken by lower index.
pub fn select_discriminant(features: &[f64], labels: &[bool], n_keep: usize) -> Vec<usize> {
    let n = labels.len();
    if n == 0 {
        return Vec::new();
    }
    let d = features.len() / n;
    let weights = balanced_weights(labels);
    let losses: Vec<f64> = (0..d)
        .into_par_iter()
        .map(|f| {
            let col: Vec<f32> = (0..n).map(|i| features[i * d + f] as f32).collect();
            discriminant_loss(&col, labels, weights)
        })
        .collect();
    top_by_loss(&losses, n_keep)
}
