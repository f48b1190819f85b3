//! Locally anomalous instance removal.
//!
//! Within each square patch, small instances (queries) are compared against
//! the mean descriptor of the larger ones (references) with a Gaussian
//! kernel; queries that look unlike their neighbors are deleted.

use serde::{Deserialize, Serialize};

use crate::raster::{InstanceMask, RgbTile};
use crate::regions::region_props;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LairConfig {
    pub patch_size: usize,
    /// Kernel width in `exp(-nu * d^2)`.
    pub nu: f64,
    /// Queries whose similarity is strictly below this are removed.
    pub similarity_threshold: f64,
    /// Area percentile (in `[0, 1]`) separating queries from references.
    pub size_percentile_split: f64,
}

impl Default for LairConfig {
    fn default() -> Self {
        Self { patch_size: 200, nu: 0.1, similarity_threshold: 0.7, size_percentile_split: 0.6 }
    }
}

/// Ranges narrower than this are treated as constant.
const NORMALIZE_EPS: f64 = 1e-9;

/// Gaussian-kernel similarity between a query descriptor and the reference mean.
pub fn similarity(reference: &[f64], query: &[f64], nu: f64) -> f64 {
    let d2: f64 = reference.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum();
    (-nu * d2).exp()
}

/// Mean and standard deviation of H, S and I over the instance pixels.
pub fn instance_descriptor(pixels: &[usize], hsi: &RgbTile) -> [f64; 6] {
    let n = pixels.len() as f64;
    let px = |i: usize| hsi.pixel(i / hsi.width(), i % hsi.width());
    let mut mean = [0.0; 3];
    for &i in pixels {
        let p = px(i);
        for c in 0..3 {
            mean[c] += p[c] / n;
        }
    }
    let mut var = [0.0; 3];
    for &i in pixels {
        let p = px(i);
        for c in 0..3 {
            var[c] += (p[c] - mean[c]).powi(2) / n;
        }
    }
    let std = var.map(f64::sqrt);
    [mean[0], mean[1], mean[2], std[0], std[1], std[2]]
}

/// Linear-interpolated percentile of unsorted data, `q` in `[0, 1]`.
pub(crate) fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

/// Removes anomalous query instances patch by patch. Instances belong to the
/// patch holding their centroid; patches with fewer than two references are
/// left alone.
pub fn lair_filter(mask: &InstanceMask, hsi: &RgbTile, cfg: &LairConfig) -> InstanceMask {
    assert_eq!(mask.dims(), hsi.dims(), "mask and raster must share dims");
    let props = region_props(mask);
    let lists = mask.pixel_lists();
    let size = cfg.patch_size.max(1);
    let cols = mask.width().div_ceil(size);
    let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); cols * mask.height().div_ceil(size)];
    for (k, p) in props.iter().enumerate() {
        let (r, c) = (p.centroid.0.round() as usize, p.centroid.1.round() as usize);
        let r = r.min(mask.height() - 1);
        let c = c.min(mask.width() - 1);
        buckets[(r / size) * cols + c / size].push(k);
    }
    let mut removed = vec![false; mask.max_label() as usize + 1];
    for bucket in buckets {
        if bucket.len() < 3 {
            continue;
        }
        let areas: Vec<f64> = bucket.iter().map(|&k| props[k].area as f64).collect();
        let split = percentile(&areas, cfg.size_percentile_split);
        let refs: Vec<usize> = bucket.iter().copied().filter(|&k| props[k].area as f64 > split).collect();
        if refs.len() < 2 {
            continue;
        }
        let mut desc: Vec<[f64; 6]> =
            bucket.iter().map(|&k| instance_descriptor(&lists[props[k].label as usize], hsi)).collect();
        for d in 0..6 {
            let lo = desc.iter().map(|x| x[d]).fold(f64::INFINITY, f64::min);
            let hi = desc.iter().map(|x| x[d]).fold(f64::NEG_INFINITY, f64::max);
            for x in &mut desc {
                x[d] = if hi - lo > NORMALIZE_EPS { (x[d] - lo) / (hi - lo) } else { 0.0 };
            }
        }
        let mut reference = [0.0; 6];
        for (j, &k) in bucket.iter().enumerate() {
            if props[k].area as f64 > split {
                for d in 0..6 {
                    reference[d] += desc[j][d] / refs.len() as f64;
                }
            }
        }
        for (j, &k) in bucket.iter().enumerate() {
            if props[k].area as f64 <= split
                && similarity(&reference, &desc[j], cfg.nu) < cfg.similarity_threshold
            {
                removed[props[k].label as usize] = true;
            }
        }
    }
    let labels = mask.labels().iter().map(|&l| if removed[l as usize] { 0 } else { l }).collect();
    InstanceMask::new(mask.width(), mask.height(), labels).expect("dims preserved")
}
