//! Histogram gradient-boosted trees with logistic loss.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GbdtConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 penalty on leaf values.
    pub lambda: f64,
    /// Minimum hessian mass on each side of a split.
    pub min_child_weight: f64,
    /// Quantile bins per feature, at most 256.
    pub max_bins: usize,
}

impl Default for GbdtConfig {
    fn default() -> Self {
        Self { n_trees: 100, max_depth: 4, learning_rate: 0.075, lambda: 1.0, min_child_weight: 1.0, max_bins: 64 }
    }
}

pub(crate) const LEAF: u32 = u32::MAX;

/// Flattened tree node; leaves have `feature == LEAF`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub feature: u32,
    /// Samples with `x <= threshold` go left.
    pub threshold: f32,
    pub left: u32,
    pub right: u32,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f32]) -> f64 {
        let mut i = 0;
        loop {
            let n = &self.nodes[i];
            if n.feature == LEAF {
                return n.value;
            }
            i = if x[n.feature as usize] <= n.threshold { n.left } else { n.right } as usize;
        }
    }
}

/// Boosted ensemble emitting `P(y = 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gbdt {
    pub n_features: usize,
    pub base_score: f64,
    pub trees: Vec<Tree>,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Gbdt {
    pub fn margin(&self, x: &[f32]) -> f64 {
        self.base_score + self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn predict_proba(&self, x: &[f32]) -> f64 {
        sigmoid(self.margin(x))
    }

    pub fn node_count(&self) -> usize {
        self.trees.iter().map(|t| t.nodes.len()).sum()
    }

    /// Fits on row-major `x` (`labels.len()` rows) with per-sample weights.
    pub fn fit(x: &[f32], labels: &[bool], weights: &[f64], cfg: &GbdtConfig) -> Gbdt {
        let n = labels.len();
        assert!(n > 0 && x.len() % n == 0 && weights.len() == n);
        let d = x.len() / n;
        let binned = Binned::new(x, n, d, cfg.max_bins.clamp(2, 256));
        let wsum: f64 = weights.iter().sum();
        let pos: f64 = labels.iter().zip(weights).filter(|(y, _)| **y).map(|(_, w)| w).sum();
        let p0 = (pos / wsum).clamp(1e-6, 1.0 - 1e-6);
        let base_score = (p0 / (1.0 - p0)).ln();
        let mut margin = vec![base_score; n];
        let mut grad = vec![0.0; n];
        let mut hess = vec![0.0; n];
        let mut trees = Vec::with_capacity(cfg.n_trees);
        for _ in 0..cfg.n_trees {
            for i in 0..n {
                let p = sigmoid(margin[i]);
                grad[i] = weights[i] * (p - f64::from(u8::from(labels[i])));
                hess[i] = weights[i] * (p * (1.0 - p)).max(1e-16);
            }
            let tree = grow(&binned, &grad, &hess, cfg);
            for (i, m) in margin.iter_mut().enumerate() {
                *m += tree.predict(&x[i * d..(i + 1) * d]);
            }
            trees.push(tree);
        }
        Gbdt { n_features: d, base_score, trees }
    }
}

/// Column-major bin indices plus the cut values for each feature.
struct Binned {
    n: usize,
    bins: Vec<Vec<u8>>,
    /// Bin `b` holds `edges[b-1] < x <= edges[b]`; the last bin is open.
    edges: Vec<Vec<f32>>,
}

impl Binned {
    fn new(x: &[f32], n: usize, d: usize, max_bins: usize) -> Self {
        let (bins, edges) = (0..d)
            .into_par_iter()
            .map(|f| {
                let col: Vec<f32> = (0..n).map(|i| x[i * d + f]).collect();
                let mut sorted = col.clone();
                sorted.sort_by(f32::total_cmp);
                let mut edges: Vec<f32> = Vec::new();
                for k in 1..max_bins {
                    let v = sorted[(k * n / max_bins).min(n - 1)];
                    if edges.last().map_or(true, |&e| v > e) && v < sorted[n - 1] {
                        edges.push(v);
                    }
                }
                let b: Vec<u8> = col.iter().map(|&v| edges.partition_point(|&e| e < v) as u8).collect();
                (b, edges)
            })
            .unzip();
        Self { n, bins, edges }
    }
}

#[derive(Clone)]
struct Hist {
    g: Vec<Vec<f64>>,
    h: Vec<Vec<f64>>,
}

impl Hist {
    fn build(binned: &Binned, rows: &[u32], grad: &[f64], hess: &[f64]) -> Hist {
        let (g, h) = binned
            .bins
            .par_iter()
            .zip(&binned.edges)
            .map(|(col, edges)| {
                let mut g = vec![0.0; edges.len() + 1];
                let mut h = vec![0.0; edges.len() + 1];
                for &i in rows {
                    let b = col[i as usize] as usize;
                    g[b] += grad[i as usize];
                    h[b] += hess[i as usize];
                }
                (g, h)
            })
            .unzip();
        Hist { g, h }
    }

    fn minus(&self, other: &Hist) -> Hist {
        let sub = |a: &Vec<Vec<f64>>, b: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect()).collect()
        };
        Hist { g: sub(&self.g, &other.g), h: sub(&self.h, &other.h) }
    }
}

struct Split {
    feature: usize,
    bin: usize,
    gain: f64,
}

fn best_split(hist: &Hist, gsum: f64, hsum: f64, cfg: &GbdtConfig) -> Option<Split> {
    let score = |g: f64, h: f64| g * g / (h + cfg.lambda);
    let parent = score(gsum, hsum);
    let mut best: Option<Split> = None;
    for (f, (gs, hs)) in hist.g.iter().zip(&hist.h).enumerate() {
        let (mut gl, mut hl) = (0.0, 0.0);
        for b in 0..gs.len().saturating_sub(1) {
            gl += gs[b];
            hl += hs[b];
            let (gr, hr) = (gsum - gl, hsum - hl);
            if hl < cfg.min_child_weight || hr < cfg.min_child_weight {
                continue;
            }
            let gain = score(gl, hl) + score(gr, hr) - parent;
            if gain > 1e-12 && best.as_ref().map_or(true, |s| gain > s.gain) {
                best = Some(Split { feature: f, bin: b, gain });
            }
        }
    }
    best
}

fn grow(binned: &Binned, grad: &[f64], hess: &[f64], cfg: &GbdtConfig) -> Tree {
    struct Pending {
        node: usize,
        rows: Vec<u32>,
        hist: Hist,
        depth: usize,
    }
    let leaf = |g: f64, h: f64| Node {
        feature: LEAF,
        threshold: 0.0,
        left: 0,
        right: 0,
        value: -cfg.learning_rate * g / (h + cfg.lambda),
    };
    let sums = |rows: &[u32]| {
        rows.iter().fold((0.0, 0.0), |(g, h), &i| (g + grad[i as usize], h + hess[i as usize]))
    };
    let rows: Vec<u32> = (0..binned.n as u32).collect();
    let hist = Hist::build(binned, &rows, grad, hess);
    let mut nodes = vec![leaf(0.0, 0.0)];
    let mut queue = vec![Pending { node: 0, rows, hist, depth: 0 }];
    while let Some(p) = queue.pop() {
        let (gsum, hsum) = sums(&p.rows);
        nodes[p.node] = leaf(gsum, hsum);
        if p.depth >= cfg.max_depth || p.rows.len() < 2 {
            continue;
        }
        let Some(split) = best_split(&p.hist, gsum, hsum, cfg) else { continue };
        let col = &binned.bins[split.feature];
        let (left, right): (Vec<u32>, Vec<u32>) = p.rows.iter().partition(|&&i| col[i as usize] as usize <= split.bin);
        let (small_is_left, small) = if left.len() <= right.len() { (true, &left) } else { (false, &right) };
        let small_hist = Hist::build(binned, small, grad, hess);
        let large_hist = p.hist.minus(&small_hist);
        let (lh, rh) = if small_is_left { (small_hist, large_hist) } else { (large_hist, small_hist) };
        let (li, ri) = (nodes.len(), nodes.len() + 1);
        nodes.push(leaf(0.0, 0.0));
        nodes.push(leaf(0.0, 0.0));
        nodes[p.node] = Node {
            feature: split.feature as u32,
            threshold: binned.edges[split.feature][split.bin],
            left: li as u32,
            right: ri as u32,
            value: 0.0,
        };
        queue.push(Pending { node: ri, rows: right, hist: rh, depth: p.depth + 1 });
        queue.push(Pending { node: li, rows: left, hist: lh, depth: p.depth + 1 });
    }
    Tree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn learns_a_threshold() {
        let x: Vec<f32> = (0..200).map(|i| i as f32 / 200.0).collect();
        let y: Vec<bool> = x.iter().map(|&v| v > 0.3).collect();
        let m = Gbdt::fit(&x, &y, &vec![1.0; 200], &GbdtConfig::default());
        assert!(m.predict_proba(&[0.1]) < 0.2);
        assert!(m.predict_proba(&[0.9]) > 0.8);
        assert!(m.trees.iter().all(|t| t.nodes.len() <= 31));
    }

    #[test]
    fn learns_xor_with_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..1000 {
            let (a, b): (f32, f32) = (rng.gen(), rng.gen());
            x.extend([a, b]);
            y.push((a > 0.5) != (b > 0.5));
        }
        let m = Gbdt::fit(&x, &y, &vec![1.0; 1000], &GbdtConfig::default());
        let acc = (0..1000).filter(|&i| (m.predict_proba(&x[2 * i..2 * i + 2]) > 0.5) == y[i]).count();
        assert!(acc > 950, "{acc}");
    }

    #[test]
    fn constant_features_give_prior() {
        let y = [true, false, false, false];
        let m = Gbdt::fit(&[1.0; 4], &y, &[1.0; 4], &GbdtConfig::default());
        assert!(m.trees.iter().all(|t| t.nodes.len() == 1));
        assert!((m.predict_proba(&[1.0]) - 0.25).abs() < 0.05);
    }

    #[test]
    fn weights_shift_the_prior() {
        let y = [true, false];
        let cfg = GbdtConfig { n_trees: 0, ..GbdtConfig::default() };
        let m = Gbdt::fit(&[0.0, 0.0], &y, &[3.0, 1.0], &cfg);
        assert!((m.predict_proba(&[0.0]) - 0.75).abs() < 1e-9);
    }
}
