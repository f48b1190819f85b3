//! Whole-tile post-processing of the probability heatmap: confident-instance
//! extraction, blob seeds, seeded watershed, binarization and instance-level
//! false-positive rejection.

pub mod features;
pub mod log;
pub mod svm;
pub mod watershed;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use features::{instance_features, INSTANCE_FEATURE_DIMS};
pub use log::{detect_log_maxima, sigma_ladder, Seed, SeedSet};
pub use svm::SvmConfig;
pub use watershed::{watershed_refine, Elevation};

use crate::components::{connected_components, label_components};
use crate::error::{Error, Result};
use crate::raster::{Heatmap, InstanceMask, RgbTile};
use crate::regions::region_props;
use svm::ProbSvm;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GlobalConfig {
    /// Instances of `P >= 0.5` whose mean probability exceeds this are kept
    /// as they are.
    pub confident_mean_prob: f64,
    pub log_blob_threshold: f64,
    pub log_sigma_min: f64,
    pub log_sigma_max: f64,
    pub log_sigma_steps: usize,
    /// Final binarization threshold; flooding stops at half of it.
    pub t_p: f64,
    /// Watershed pieces smaller than this are dropped.
    pub min_area: usize,
    pub elevation: Elevation,
    pub svm: SvmConfig,
    pub removal_prob_cutoff: f64,
    /// Below this many instances the instance filter passes the mask through.
    pub min_instances_for_filter: usize,
    /// Placement tries per background sample.
    pub negative_attempts: usize,
    pub lmd_enabled: bool,
    pub watershed_enabled: bool,
    pub instance_filter_enabled: bool,
}

impl Default for GlobalConfig {
    fn default() -> Self {
        Self {
            confident_mean_prob: 0.95,
            log_blob_threshold: 0.05,
            log_sigma_min: 2.0,
            log_sigma_max: 10.0,
            log_sigma_steps: 8,
            t_p: 0.35,
            min_area: 30,
            elevation: Elevation::Complement,
            svm: SvmConfig::default(),
            removal_prob_cutoff: 0.5,
            min_instances_for_filter: 10,
            negative_attempts: 200,
            lmd_enabled: true,
            watershed_enabled: true,
            instance_filter_enabled: true,
        }
    }
}

impl GlobalConfig {
    pub fn validate(&self) -> Result<()> {
        let prob = |v: f64| v > 0.0 && v < 1.0;
        if !(prob(self.confident_mean_prob) && prob(self.t_p) && prob(self.removal_prob_cutoff)) {
            return Err(Error::Config("probability thresholds must lie in (0, 1)".into()));
        }
        if !(self.log_sigma_min > 0.0 && self.log_sigma_min < self.log_sigma_max) || self.log_sigma_steps == 0 {
            return Err(Error::Config("need 0 < log_sigma_min < log_sigma_max and at least one step".into()));
        }
        Ok(())
    }

    pub fn sigmas(&self) -> Vec<f64> {
        sigma_ladder(self.log_sigma_min, self.log_sigma_max, self.log_sigma_steps)
    }
}

/// Splits off instances whose mean probability is strictly above `cutoff`;
/// their pixels are zeroed in the returned heatmap, everything else is kept.
pub fn filter_confident(heatmap: &Heatmap, mask: &InstanceMask, cutoff: f64) -> Result<(InstanceMask, Heatmap)> {
    if heatmap.dims() != mask.dims() {
        return Err(Error::DimensionMismatch { expected: heatmap.dims(), found: mask.dims() });
    }
    let (w, h) = heatmap.dims();
    let mut confident = InstanceMask::empty(w, h);
    let mut p = heatmap.clone();
    let mut next = 1;
    for pixels in mask.pixel_lists().iter().skip(1).filter(|p| !p.is_empty()) {
        let mean = pixels.iter().map(|&i| heatmap.data()[i]).sum::<f64>() / pixels.len() as f64;
        if mean > cutoff {
            for &i in pixels {
                confident.labels_mut()[i] = next;
                p.data_mut()[i] = 0.0;
            }
            next += 1;
        }
    }
    Ok((confident, p))
}

/// Keeps each basin's pixels with `p >= t_p`, splits them into connected
/// pieces of at least `min_area`, then lays the confident instances on top
/// with fresh labels.
pub fn binarize_merge(
    p: &Heatmap,
    basins: &InstanceMask,
    confident: &InstanceMask,
    t_p: f64,
    min_area: usize,
) -> Result<InstanceMask> {
    if p.dims() != basins.dims() || p.dims() != confident.dims() {
        return Err(Error::DimensionMismatch { expected: p.dims(), found: basins.dims() });
    }
    let (w, h) = p.dims();
    let mut out = InstanceMask::empty(w, h);
    let mut next = 1u32;
    for pixels in basins.pixel_lists().iter().skip(1).filter(|p| !p.is_empty()) {
        let mut fg = vec![false; w * h];
        for &i in pixels {
            fg[i] = p.data()[i] >= t_p && confident.labels()[i] == 0;
        }
        let pieces = label_components(&fg, w, h);
        for piece in pieces.pixel_lists().iter().skip(1).filter(|q| q.len() >= min_area.max(1)) {
            for &i in piece {
                out.labels_mut()[i] = next;
            }
            next += 1;
        }
    }
    for pixels in confident.pixel_lists().iter().skip(1).filter(|p| !p.is_empty()) {
        for &i in pixels {
            out.labels_mut()[i] = next;
        }
        next += 1;
    }
    Ok(out)
}

/// Area-matched background samples: each instance's shape translated to a
/// random spot that overlaps no foreground. Instances that cannot be placed
/// within `attempts` tries are skipped.
fn background_samples(mask: &InstanceMask, lists: &[Vec<usize>], attempts: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let (w, h) = mask.dims();
    let mut out = Vec::new();
    for pixels in lists {
        let rows: Vec<isize> = pixels.iter().map(|&i| (i / w) as isize).collect();
        let cols: Vec<isize> = pixels.iter().map(|&i| (i % w) as isize).collect();
        let (r0, r1) = (*rows.iter().min().unwrap(), *rows.iter().max().unwrap());
        let (c0, c1) = (*cols.iter().min().unwrap(), *cols.iter().max().unwrap());
        let (bh, bw) = ((r1 - r0 + 1) as usize, (c1 - c0 + 1) as usize);
        if bh > h || bw > w {
            continue;
        }
        for _ in 0..attempts {
            let top = rng.gen_range(0..=h - bh) as isize;
            let left = rng.gen_range(0..=w - bw) as isize;
            let moved: Vec<usize> = rows
                .iter()
                .zip(&cols)
                .map(|(&r, &c)| (r - r0 + top) as usize * w + (c - c0 + left) as usize)
                .collect();
            if moved.iter().all(|&i| mask.labels()[i] == 0) {
                out.push(moved);
                break;
            }
        }
    }
    out
}

/// Trains an RBF classifier separating the detected instances from
/// area-matched background regions, then deletes instances whose calibrated
/// probability of being an instance falls below the cutoff. Labels of the
/// survivors are unchanged.
///
/// Passes the mask through when it holds fewer than
/// `min_instances_for_filter` instances or when fewer than half as many
/// background regions can be placed.
pub fn instance_classify_filter(mask: &InstanceMask, hsi: &RgbTile, cfg: &GlobalConfig, seed: u64) -> Result<InstanceMask> {
    if mask.dims() != hsi.dims() {
        return Err(Error::DimensionMismatch { expected: hsi.dims(), found: mask.dims() });
    }
    let all = mask.pixel_lists();
    let ids: Vec<u32> = mask.instance_ids();
    if ids.len() < cfg.min_instances_for_filter.max(2) {
        return Ok(mask.clone());
    }
    let lists: Vec<Vec<usize>> = ids.iter().map(|&l| all[l as usize].clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let negatives = background_samples(mask, &lists, cfg.negative_attempts, &mut rng);
    if negatives.len() * 2 < lists.len() {
        ::log::warn!("instance filter: placed {} of {} background samples, skipping", negatives.len(), lists.len());
        return Ok(mask.clone());
    }
    let pos: Vec<Vec<f64>> = lists.par_iter().map(|p| instance_features(p, hsi).to_vec()).collect();
    let neg: Vec<Vec<f64>> = negatives.par_iter().map(|p| instance_features(p, hsi).to_vec()).collect();
    let labels: Vec<bool> = pos.iter().map(|_| true).chain(neg.iter().map(|_| false)).collect();
    let x: Vec<Vec<f64>> = pos.iter().chain(&neg).cloned().collect();
    let model = ProbSvm::fit(&x, &labels, &cfg.svm, &mut rng);
    let mut removed = vec![false; mask.max_label() as usize + 1];
    for (&l, f) in ids.iter().zip(&pos) {
        removed[l as usize] = model.prob(f) < cfg.removal_prob_cutoff;
    }
    let out = mask.labels().iter().map(|&l| if removed[l as usize] { 0 } else { l }).collect();
    InstanceMask::new(mask.width(), mask.height(), out)
}

/// Intermediate and final products of the global stage.
#[derive(Debug, Clone)]
pub struct GlobalOutput {
    pub mask: InstanceMask,
    pub confident: InstanceMask,
    pub seeds: SeedSet,
}

/// Centroid seeds of the connected components of `p >= 0.5`.
fn centroid_seeds(p: &Heatmap) -> SeedSet {
    let cc = connected_components(&p.threshold(0.5));
    let seeds = region_props(&cc)
        .into_iter()
        .map(|r| {
            let (row, col) = (r.centroid.0.round() as usize, r.centroid.1.round() as usize);
            // A concave component's centroid may fall outside it.
            let i = row * p.width() + col;
            let (row, col) = if cc.labels()[i] == r.label {
                (row, col)
            } else {
                let first = cc.labels().iter().position(|&l| l == r.label).unwrap();
                (first / p.width(), first % p.width())
            };
            Seed { row, col, sigma: 0.0, response: p.get(row, col) }
        })
        .collect();
    SeedSet { seeds }
}

/// Components of `p >= t_p` holding at least one seed.
fn seeded_components(p: &Heatmap, seeds: &SeedSet, t_p: f64) -> InstanceMask {
    let cc = connected_components(&p.threshold(t_p));
    let mut hit = vec![false; cc.max_label() as usize + 1];
    for s in &seeds.seeds {
        hit[cc.get(s.row, s.col) as usize] = true;
    }
    hit[0] = false;
    let labels = cc.labels().iter().map(|&l| if hit[l as usize] { l } else { 0 }).collect();
    InstanceMask::new(p.width(), p.height(), labels).expect("dims preserved")
}

/// Runs the global stage on heatmap `p` with the toggles in `cfg`.
///
/// With both seed detection and watershed off, the result is the connected
/// components of `p >= 0.5`. Without seed detection the watershed is seeded
/// at component centroids; without watershed, seeded components of
/// `p >= t_p` are kept.
pub fn global_process(p: &Heatmap, hsi: &RgbTile, cfg: &GlobalConfig, seed: u64) -> Result<GlobalOutput> {
    cfg.validate()?;
    if p.dims() != hsi.dims() {
        return Err(Error::DimensionMismatch { expected: hsi.dims(), found: p.dims() });
    }
    let (w, h) = p.dims();
    let (mask, confident, seeds) = if !cfg.lmd_enabled && !cfg.watershed_enabled {
        (connected_components(&p.threshold(0.5)), InstanceMask::empty(w, h), SeedSet::default())
    } else {
        let coarse = connected_components(&p.threshold(0.5));
        let (confident, rest) = filter_confident(p, &coarse, cfg.confident_mean_prob)?;
        let seeds = if cfg.lmd_enabled {
            detect_log_maxima(&rest, &cfg.sigmas(), cfg.log_blob_threshold)
        } else {
            centroid_seeds(&rest)
        };
        let basins = if cfg.watershed_enabled {
            watershed_refine(&rest, &seeds, cfg.t_p / 2.0, cfg.elevation)
        } else {
            seeded_components(&rest, &seeds, cfg.t_p)
        };
        (binarize_merge(&rest, &basins, &confident, cfg.t_p, cfg.min_area)?, confident, seeds)
    };
    let mask = if cfg.instance_filter_enabled { instance_classify_filter(&mask, hsi, cfg, seed)? } else { mask };
    Ok(GlobalOutput { mask: mask.relabel_sequential(), confident, seeds })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_heat(w: usize, h: usize, squares: &[(usize, usize, usize, f64)]) -> Heatmap {
        let mut data = vec![0.0; w * h];
        for &(top, left, side, v) in squares {
            for r in top..top + side {
                for c in left..left + side {
                    data[r * w + c] = v;
                }
            }
        }
        Heatmap::new(w, h, data).unwrap()
    }

    #[test]
    fn confident_boundary_is_strict() {
        let p = square_heat(20, 10, &[(1, 1, 6, 0.99), (1, 10, 6, 0.95)]);
        let cc = connected_components(&p.threshold(0.5));
        let (conf, rest) = filter_confident(&p, &cc, 0.95).unwrap();
        assert_eq!(conf.instance_count(), 1);
        assert_eq!(conf.get(3, 3), 1);
        assert_eq!(rest.get(3, 3), 0.0);
        assert_eq!(rest.get(3, 12), 0.95);
        // Probability outside confident instances is untouched.
        for i in 0..200 {
            if conf.labels()[i] == 0 {
                assert_eq!(rest.data()[i], p.data()[i]);
            }
        }
    }

    #[test]
    fn mixed_tile_splits_one_each() {
        let p = square_heat(20, 10, &[(1, 1, 6, 0.99), (1, 10, 6, 0.6)]);
        let cc = connected_components(&p.threshold(0.5));
        let (conf, rest) = filter_confident(&p, &cc, 0.95).unwrap();
        assert_eq!(conf.instance_count(), 1);
        assert_eq!(connected_components(&rest.threshold(0.5)).instance_count(), 1);
    }

    #[test]
    fn merge_cases() {
        let (w, h) = (20, 12);
        let p = square_heat(w, h, &[(0, 0, 12, 0.6)]);
        let mut conf = InstanceMask::empty(w, h);
        for r in 2..6 {
            for c in 2..6 {
                conf.set(r, c, 1);
            }
        }
        let out = binarize_merge(&p, &InstanceMask::empty(w, h), &conf, 0.35, 5).unwrap();
        assert_eq!(out, conf);

        // A basin entirely below t_p disappears.
        let low = square_heat(w, h, &[(0, 0, 12, 0.2)]);
        let mut basin = InstanceMask::empty(w, h);
        for r in 0..12 {
            for c in 0..12 {
                basin.set(r, c, 1);
            }
        }
        let out = binarize_merge(&low, &basin, &InstanceMask::empty(w, h), 0.35, 5).unwrap();
        assert_eq!(out.instance_count(), 0);

        // Overlap: confident pixels win, the basin keeps its remainder.
        let out = binarize_merge(&p, &basin, &conf, 0.35, 5).unwrap();
        assert_eq!(out.instance_count(), 2);
        let conf_label = out.get(3, 3);
        assert!((2..6).all(|r| (2..6).all(|c| out.get(r, c) == conf_label)));
        assert_eq!(out.labels().iter().filter(|&&l| l != 0 && l != conf_label).count(), 144 - 16);
    }

    fn blob_tile(n: usize, fake: bool) -> (InstanceMask, RgbTile) {
        // Dark uniform nuclei on a bright, noisy background.
        let (w, h) = (160, 120);
        let mut mask = InstanceMask::empty(w, h);
        let mut data = vec![0.0; w * h * 3];
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for i in 0..w * h {
            let v: f64 = rng.gen_range(0.75..0.95);
            data[i * 3..i * 3 + 3].copy_from_slice(&[0.9, 0.2 + 0.1 * (v - 0.75), v]);
        }
        for k in 0..n {
            let (top, left) = ((k / 7) * 30 + 6, (k % 7) * 22 + 4);
            for r in top..top + 8 {
                for c in left..left + 8 {
                    mask.set(r, c, k as u32 + 1);
                    if !(fake && k == n - 1) {
                        let j = (r * w + c) * 3;
                        data[j..j + 3].copy_from_slice(&[0.7, 0.5, 0.3 + 0.01 * ((r + c) % 3) as f64]);
                    }
                }
            }
        }
        (mask, RgbTile::new(w, h, data).unwrap())
    }

    #[test]
    fn separable_instances_survive() {
        let (mask, hsi) = blob_tile(20, false);
        let out = instance_classify_filter(&mask, &hsi, &GlobalConfig::default(), 1).unwrap();
        assert_eq!(out, mask);
    }

    #[test]
    fn planted_background_instance_is_removed() {
        let (mask, hsi) = blob_tile(21, true);
        let out = instance_classify_filter(&mask, &hsi, &GlobalConfig::default(), 1).unwrap();
        assert_eq!(out.instance_count(), 20);
        assert!(!out.instance_ids().contains(&21));
        for (a, b) in mask.labels().iter().zip(out.labels()) {
            assert!(*b == 0 || a == b);
        }
    }

    #[test]
    fn few_instances_pass_through() {
        let (mask, hsi) = blob_tile(9, true);
        assert_eq!(instance_classify_filter(&mask, &hsi, &GlobalConfig::default(), 1).unwrap(), mask);
    }

    #[test]
    fn both_toggles_off_is_plain_components() {
        let p = square_heat(30, 12, &[(1, 1, 8, 0.7), (1, 15, 8, 0.4)]);
        let hsi = RgbTile::filled(30, 12, [0.5, 0.5, 0.5]).unwrap();
        let cfg = GlobalConfig {
            lmd_enabled: false,
            watershed_enabled: false,
            instance_filter_enabled: false,
            ..GlobalConfig::default()
        };
        let out = global_process(&p, &hsi, &cfg, 0).unwrap();
        assert_eq!(out.mask, connected_components(&p.threshold(0.5)));
    }
}
