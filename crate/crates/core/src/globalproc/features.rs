//! Per-instance descriptors: first-order statistics of each HSI channel and
//! gray-level size-zone texture of the intensity channel.

use crate::raster::RgbTile;

/// Gray levels used for both the entropy histogram and the size-zone matrix.
pub const LEVELS: usize = 16;
pub const FIRST_ORDER_DIMS: usize = 6;
pub const GLSZM_DIMS: usize = 16;
pub const INSTANCE_FEATURE_DIMS: usize = 3 * FIRST_ORDER_DIMS + GLSZM_DIMS;

fn level(v: f64) -> usize {
    ((v * LEVELS as f64) as usize).min(LEVELS - 1)
}

/// Mean, standard deviation, skewness, min, max and histogram entropy (bits).
pub fn first_order(values: &[f64]) -> [f64; FIRST_ORDER_DIMS] {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let skew = if std > 1e-12 { values.iter().map(|v| ((v - mean) / std).powi(3)).sum::<f64>() / n } else { 0.0 };
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut hist = [0usize; LEVELS];
    for &v in values {
        hist[level(v)] += 1;
    }
    let entropy = -hist.iter().filter(|&&c| c > 0).map(|&c| c as f64 / n).map(|p| p * p.log2()).sum::<f64>();
    [mean, std, skew, min, max, entropy + 0.0]
}

/// Zone counts keyed by `(level, size)`: 8-connected runs of equal level
/// inside the instance.
pub fn size_zones(pixels: &[usize], values: &[f64], w: usize) -> Vec<(usize, usize)> {
    let set: std::collections::HashMap<usize, usize> =
        pixels.iter().zip(values).map(|(&i, &v)| (i, level(v))).collect();
    let mut seen = std::collections::HashSet::new();
    let mut zones = Vec::new();
    let mut sorted = pixels.to_vec();
    sorted.sort_unstable();
    for &start in &sorted {
        if !seen.insert(start) {
            continue;
        }
        let lv = set[&start];
        let mut size = 0;
        let mut stack = vec![start];
        while let Some(i) = stack.pop() {
            size += 1;
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for dr in -1..=1 {
                for dc in -1..=1 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr < 0 || nc < 0 || nc as usize >= w {
                        continue;
                    }
                    let j = nr as usize * w + nc as usize;
                    if set.get(&j) == Some(&lv) && seen.insert(j) {
                        stack.push(j);
                    }
                }
            }
        }
        zones.push((lv, size));
    }
    zones
}

/// The sixteen standard size-zone features, in order: small and large area
/// emphasis, gray-level and size-zone non-uniformity (raw and normalized),
/// zone percentage, gray-level and zone variance, zone entropy, low and high
/// gray-level zone emphasis, and the four mixed area/gray-level emphases.
/// Gray levels are numbered from 1.
pub fn glszm_features(zones: &[(usize, usize)], n_pixels: usize) -> [f64; GLSZM_DIMS] {
    let nz = zones.len() as f64;
    let mut cells: std::collections::BTreeMap<(usize, usize), f64> = std::collections::BTreeMap::new();
    for &(l, s) in zones {
        *cells.entry((l + 1, s)).or_insert(0.0) += 1.0;
    }
    let mut by_level = std::collections::BTreeMap::<usize, f64>::new();
    let mut by_size = std::collections::BTreeMap::<usize, f64>::new();
    for (&(i, j), &c) in &cells {
        *by_level.entry(i).or_insert(0.0) += c;
        *by_size.entry(j).or_insert(0.0) += c;
    }
    let sum = |f: &dyn Fn(f64, f64, f64) -> f64| -> f64 {
        cells.iter().map(|(&(i, j), &c)| f(i as f64, j as f64, c / nz)).sum()
    };
    let mu_i = sum(&|i, _, p| p * i);
    let mu_j = sum(&|_, j, p| p * j);
    let gln = by_level.values().map(|c| c * c).sum::<f64>();
    let szn = by_size.values().map(|c| c * c).sum::<f64>();
    [
        sum(&|_, j, p| p / (j * j)),
        sum(&|_, j, p| p * j * j),
        gln / nz,
        gln / (nz * nz),
        szn / nz,
        szn / (nz * nz),
        nz / n_pixels as f64,
        sum(&|i, _, p| p * (i - mu_i).powi(2)),
        sum(&|_, j, p| p * (j - mu_j).powi(2)),
        -sum(&|_, _, p| p * p.log2()) + 0.0,
        sum(&|i, _, p| p / (i * i)),
        sum(&|i, _, p| p * i * i),
        sum(&|i, j, p| p / (i * i * j * j)),
        sum(&|i, j, p| p * i * i / (j * j)),
        sum(&|i, j, p| p * j * j / (i * i)),
        sum(&|i, j, p| p * i * i * j * j),
    ]
}

/// 34-dim descriptor of an instance: first-order statistics of H, S and I
/// followed by size-zone features of I.
pub fn instance_features(pixels: &[usize], hsi: &RgbTile) -> [f64; INSTANCE_FEATURE_DIMS] {
    assert!(!pixels.is_empty(), "instance must be non-empty");
    let w = hsi.width();
    let mut out = [0.0; INSTANCE_FEATURE_DIMS];
    let mut intensity = Vec::new();
    for ch in 0..3 {
        let vals: Vec<f64> = pixels.iter().map(|&i| hsi.pixel(i / w, i % w)[ch]).collect();
        out[ch * FIRST_ORDER_DIMS..(ch + 1) * FIRST_ORDER_DIMS].copy_from_slice(&first_order(&vals));
        if ch == 2 {
            intensity = vals;
        }
    }
    let zones = size_zones(pixels, &intensity, w);
    out[3 * FIRST_ORDER_DIMS..].copy_from_slice(&glszm_features(&zones, pixels.len()));
    out
}
