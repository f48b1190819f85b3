//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use lgnuseghop::InstanceMask;

/// Pixel sets of each positive label, found by scanning for every label.
fn instances(m: &InstanceMask) -> Vec<(u32, Vec<bool>)> {
    let mut labels: Vec<u32> = m.labels().iter().copied().filter(|&l| l != 0).collect();
    labels.sort_unstable();
    labels.dedup();
    labels.into_iter().map(|l| (l, m.labels().iter().map(|&x| x == l).collect())).collect()
}

fn count(a: &[bool], b: &[bool], f: fn(bool, bool) -> bool) -> usize {
    a.iter().zip(b).filter(|(x, y)| f(**x, **y)).count()
}

fn iou(a: &[bool], b: &[bool]) -> (usize, usize) {
    (count(a, b, |x, y| x && y), count(a, b, |x, y| x || y))
}

/// Greedy aggregated Jaccard, recomputing every IoU from raw pixel sets.
pub fn brute_aji(gt: &InstanceMask, pred: &InstanceMask) -> f64 {
    let g = instances(gt);
    let p = instances(pred);
    if g.is_empty() && p.is_empty() {
        return 1.0;
    }
    let mut used = vec![false; p.len()];
    let (mut num, mut den) = (0usize, 0usize);
    for (_, gs) in &g {
        let mut best: Option<(usize, usize, usize)> = None;
        for (k, (_, ps)) in p.iter().enumerate() {
            let (i, u) = iou(gs, ps);
            if used[k] || i == 0 {
                continue;
            }
            // Strictly better IoU by cross-multiplication; earlier (lower) label wins ties.
            if best.map_or(true, |(_, bi, bu)| i * bu > bi * u) {
                best = Some((k, i, u));
            }
        }
        match best {
            Some((k, i, u)) => {
                used[k] = true;
                num += i;
                den += u;
            }
            None => den += gs.iter().filter(|&&x| x).count(),
        }
    }
    for (k, (_, ps)) in p.iter().enumerate() {
        if !used[k] {
            den += ps.iter().filter(|&&x| x).count();
        }
    }
    num as f64 / den as f64
}

/// `(pq, dq, sq, tp, fp, fn)` by trying every partial one-to-one matching and
/// keeping the largest one made only of pairs with IoU above one half.
pub fn brute_pq(gt: &InstanceMask, pred: &InstanceMask) -> (f64, f64, f64, usize, usize, usize) {
    let g = instances(gt);
    let p = instances(pred);
    if g.is_empty() && p.is_empty() {
        return (1.0, 1.0, 1.0, 0, 0, 0);
    }
    let table: Vec<Vec<(usize, usize)>> = g.iter().map(|(_, a)| p.iter().map(|(_, b)| iou(a, b)).collect()).collect();
    let mut best: (usize, f64) = (0, 0.0);
    let mut assign = vec![usize::MAX; g.len()];
    fn walk(k: usize, assign: &mut Vec<usize>, used: &mut Vec<bool>, t: &[Vec<(usize, usize)>], best: &mut (usize, f64)) {
        if k == assign.len() {
            let pairs: Vec<(usize, usize)> =
                assign.iter().enumerate().filter(|(_, &j)| j != usize::MAX).map(|(i, &j)| t[i][j]).collect();
            if pairs.iter().all(|&(i, u)| 2 * i > u) && pairs.len() > best.0 {
                *best = (pairs.len(), pairs.iter().map(|&(i, u)| i as f64 / u as f64).sum());
            }
            return;
        }
        assign[k] = usize::MAX;
        walk(k + 1, assign, used, t, best);
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                assign[k] = j;
                walk(k + 1, assign, used, t, best);
                used[j] = false;
            }
        }
        assign[k] = usize::MAX;
    }
    walk(0, &mut assign, &mut vec![false; p.len()], &table, &mut best);
    let tp = best.0;
    let (fp, fn_) = (p.len() - tp, g.len() - tp);
    let dq = tp as f64 / (tp as f64 + 0.5 * (fp + fn_) as f64);
    let sq = if tp == 0 { 1.0 } else { best.1 / tp as f64 };
    (dq * sq, dq, sq, tp, fp, fn_)
}

/// Every label vector of length `n` over `0..=k`.
pub fn all_labelings(n: usize, k: u32) -> Vec<Vec<u32>> {
    let mut out = vec![vec![]];
    for _ in 0..n {
        out = out.into_iter().flat_map(|v| (0..=k).map(move |l| [v.clone(), vec![l]].concat())).collect();
    }
    out
}
