//! Two-hop Saab feature extractor and the pixel classifier trained on the
//! pseudolabel.

pub mod gbdt;
mod maps;
mod model_io;
pub mod saab;
pub mod select;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use gbdt::{Gbdt, GbdtConfig};
pub use maps::FeatureRef;
pub use model_io::{read_model, write_model};
pub use saab::{apply_saab, fit_pca, fit_saab, PcaBasis, SaabKernel};
pub use select::select_discriminant;

use crate::error::{Error, Result};
use crate::raster::{Heatmap, InstanceMask, RgbTile};
use maps::{Geometry, MapId, Plan, TileMaps};
use saab::{PcaStats, SaabStats};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NuSegHopConfig {
    /// Side of the window around each pixel; odd.
    pub window: usize,
    pub layer1_filter: usize,
    pub pool: usize,
    pub layer2_filter: usize,
    /// Minimum energy share for a kept component, at every stage.
    pub energy_threshold: f64,
    /// Cap on kept components, at every stage.
    pub max_dims: usize,
    pub n_selected: usize,
    /// Training pixels per fit, split evenly between the two classes.
    pub n_samples: usize,
    /// Subset of the training pixels used for spectral fits and ranking.
    pub selection_samples: usize,
    pub classifier: GbdtConfig,
}

impl Default for NuSegHopConfig {
    fn default() -> Self {
        Self {
            window: 9,
            layer1_filter: 3,
            pool: 2,
            layer2_filter: 3,
            energy_threshold: 1e-3,
            max_dims: 10,
            n_selected: 100,
            n_samples: 50_000,
            selection_samples: 10_000,
            classifier: GbdtConfig::default(),
        }
    }
}

impl NuSegHopConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.window % 2 == 0 || self.layer1_filter % 2 == 0 || self.layer2_filter % 2 == 0 {
            return bad("window and filter sizes must be odd");
        }
        if self.pool == 0 || self.max_dims == 0 || self.n_selected == 0 || self.n_samples < 2 {
            return bad("pool, max_dims, n_selected must be positive and n_samples at least 2");
        }
        if !(self.energy_threshold > 0.0 && self.energy_threshold < 1.0) {
            return bad("energy_threshold must lie in (0, 1)");
        }
        if self.classifier.max_bins < 2 || self.classifier.max_bins > 256 {
            return bad("classifier.max_bins must lie in [2, 256]");
        }
        Ok(())
    }
}

/// Everything learned by a fit.
#[derive(Debug, Clone, PartialEq)]
pub struct NuSegHopModel {
    pub config: NuSegHopConfig,
    /// Joint kernel over the three input channels.
    pub layer1: SaabKernel,
    /// One kernel per layer-1 AC channel.
    pub layer2: Vec<SaabKernel>,
    /// One basis per layer-1 output channel, DC first.
    pub l1_spectral: Vec<PcaBasis>,
    /// Per layer-1 AC channel, one basis per layer-2 output channel.
    pub l2_spectral: Vec<Vec<PcaBasis>>,
    /// Indices into [`NuSegHopModel::features`].
    pub selected: Vec<usize>,
    pub classifier: Gbdt,
}

impl NuSegHopModel {
    /// The full feature list the selected indices refer to.
    pub fn features(&self) -> Vec<FeatureRef> {
        let l2: Vec<usize> = self.layer2.iter().map(|k| k.output_len()).collect();
        maps::catalog(&Geometry::new(&self.config), self.layer1.output_len(), &l2, &self.l1_spectral, &self.l2_spectral)
    }

    pub fn selected_features(&self) -> Vec<FeatureRef> {
        let all = self.features();
        self.selected.iter().map(|&i| all[i]).collect()
    }

    /// Learned projection weights across both hops and the spectral bases.
    pub fn parameter_count(&self) -> usize {
        self.layer1.weights.len()
            + self.layer2.iter().map(|k| k.weights.len()).sum::<usize>()
            + self.l1_spectral.iter().map(|b| b.components.len()).sum::<usize>()
            + self.l2_spectral.iter().flatten().map(|b| b.components.len()).sum::<usize>()
    }

    pub(crate) fn check(&self) -> Result<()> {
        let total = self.features().len();
        let mut seen = std::collections::HashSet::new();
        for &i in &self.selected {
            if i >= total || !seen.insert(i) {
                return Err(Error::FeatureMismatch { expected: total, found: i });
            }
        }
        if self.classifier.n_features != self.selected.len() {
            return Err(Error::FeatureMismatch { expected: self.selected.len(), found: self.classifier.n_features });
        }
        if self.layer2.len() != self.layer1.kept() || self.l1_spectral.len() != self.layer1.output_len() {
            return Err(Error::Format { what: "model", detail: "kernel counts disagree".into() });
        }
        Ok(())
    }
}

/// Class-balanced training pixels in random order.
fn sample_pixels(mask: &InstanceMask, n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    let (fg, bg): (Vec<usize>, Vec<usize>) = (0..mask.labels().len()).partition(|&i| mask.labels()[i] > 0);
    if fg.is_empty() || bg.is_empty() {
        return Err(Error::DegeneratePseudolabel);
    }
    let half = n / 2;
    let mut out = Vec::with_capacity(2 * half);
    for pool in [&fg, &bg] {
        let take = half.min(pool.len()).max(1);
        out.extend(index::sample(rng, pool.len(), take).into_iter().map(|j| pool[j]));
    }
    out.shuffle(rng);
    Ok(out)
}

/// Features of `samples` (pixel indices) as a row-major `f32` matrix.
#[allow(clippy::too_many_arguments)]
fn feature_rows(
    plan: &Plan,
    maps: &TileMaps,
    g: &Geometry,
    l1s: &[PcaBasis],
    l2s: &[Vec<PcaBasis>],
    samples: &[usize],
    w: usize,
) -> Vec<f32> {
    let width = plan.width;
    let mut out = vec![0.0f32; samples.len() * width];
    out.par_chunks_mut(width * 64).zip(samples.par_chunks(64)).for_each(|(dst, idx)| {
        let mut buf = Vec::new();
        for (row, &i) in dst.chunks_exact_mut(width).zip(idx) {
            plan.eval(maps, g, l1s, l2s, (i / w) as isize, (i % w) as isize, &mut buf, row);
        }
    });
    out
}

/// Fits the extractor and classifier on one tile against its pseudolabel.
///
/// `h_hsi` is the hematoxylin image in HSI. Fails with
/// [`Error::DegeneratePseudolabel`] if the pseudolabel has only one class.
pub fn fit_model(h_hsi: &RgbTile, pseudolabel: &InstanceMask, cfg: &NuSegHopConfig, seed: u64) -> Result<NuSegHopModel> {
    fit_model_multi(&[(h_hsi, pseudolabel)], cfg, seed)
}

/// Fits one model over several tiles, drawing an equal share of the training
/// pixels from each.
pub fn fit_model_multi(tiles: &[(&RgbTile, &InstanceMask)], cfg: &NuSegHopConfig, seed: u64) -> Result<NuSegHopModel> {
    cfg.validate()?;
    if tiles.is_empty() {
        return Err(Error::EmptyRaster);
    }
    for (t, m) in tiles {
        if t.dims() != m.dims() {
            return Err(Error::DimensionMismatch { expected: t.dims(), found: m.dims() });
        }
    }
    let g = Geometry::new(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_tile = (cfg.n_samples / tiles.len()).max(2);
    let samples: Vec<Vec<usize>> =
        tiles.iter().map(|(_, m)| sample_pixels(m, per_tile, &mut rng)).collect::<Result<_>>()?;
    let cover: Vec<(Vec<f64>, Vec<f64>)> =
        tiles.iter().zip(&samples).map(|((t, _), s)| maps::coverage(t.width(), t.height(), s, &g)).collect();

    let (f1, _, c1) = g.l1_dims();
    let mut stats = SaabStats::new(f1 * f1 * c1);
    for ((t, _), (w1, _)) in tiles.iter().zip(&cover) {
        stats.merge(&maps::layer1_stats(t, w1, &g));
    }
    let layer1 = stats.finish(g.l1_dims(), cfg.energy_threshold, cfg.max_dims)?;

    let l1_maps: Vec<Vec<maps::Plane>> = tiles.iter().map(|(t, _)| maps::layer1_maps(t, &layer1, &g)).collect();
    let pooled: Vec<Vec<maps::Plane>> =
        l1_maps.iter().map(|planes| planes[1..].iter().map(|p| maps::max_pool(p, g.pool)).collect()).collect();
    let (f2, _, _) = g.l2_dims();
    let layer2: Vec<SaabKernel> = (0..layer1.kept())
        .map(|c| {
            let mut stats = SaabStats::new(f2 * f2);
            for (tile_pooled, (_, w2)) in pooled.iter().zip(&cover) {
                stats.merge(&maps::layer2_stats(&tile_pooled[c], w2, &g));
            }
            match stats.finish(g.l2_dims(), cfg.energy_threshold, cfg.max_dims) {
                Ok(k) => Ok(k),
                Err(Error::EmptyKernel) => {
                    Ok(SaabKernel { weights: Vec::new(), energies: Vec::new(), input_dims: g.l2_dims(), dc_included: true })
                }
                Err(e) => Err(e),
            }
        })
        .collect::<Result<_>>()?;
    let tile_maps: Vec<TileMaps> = l1_maps
        .into_iter()
        .zip(&pooled)
        .map(|(l1, pl)| TileMaps {
            l2: pl.iter().zip(&layer2).map(|(p, k)| maps::layer2_maps(p, k, &g)).collect(),
            l1,
        })
        .collect();
    drop(pooled);

    // Spectral bases and ranking use a subset of the training pixels.
    let sel_per_tile = (cfg.selection_samples / tiles.len()).max(1);
    let subsets: Vec<&[usize]> = samples.iter().map(|s| &s[..s.len().min(sel_per_tile)]).collect();
    let l1_ids: Vec<MapId> = (0..layer1.output_len()).map(MapId::L1).collect();
    let l2_ids: Vec<MapId> =
        layer2.iter().enumerate().flat_map(|(c, k)| (0..k.output_len()).map(move |j| MapId::L2(c, j))).collect();
    let merged_fit = |ids: &[MapId]| -> Vec<PcaBasis> {
        // Pool the subset vectors across tiles by fitting on their union.
        let mut all = vec![Vec::new(); ids.len()];
        for (((t, _), m), s) in tiles.iter().zip(&tile_maps).zip(&subsets) {
            for (acc, b) in all.iter_mut().zip(spectral_fit_stats(m, &g, ids, s, t.width())) {
                acc.push(b);
            }
        }
        all.into_iter()
            .map(|parts| {
                let mut total = parts[0].clone();
                for p in &parts[1..] {
                    total.merge(p);
                }
                total.finish(cfg.energy_threshold, cfg.max_dims)
            })
            .collect()
    };
    let l1_spectral = merged_fit(&l1_ids);
    let flat_l2 = merged_fit(&l2_ids);
    let mut l2_spectral: Vec<Vec<PcaBasis>> = layer2.iter().map(|_| Vec::new()).collect();
    for (id, b) in l2_ids.iter().zip(flat_l2) {
        if let MapId::L2(c, _) = id {
            l2_spectral[*c].push(b);
        }
    }

    let l2_out: Vec<usize> = layer2.iter().map(|k| k.output_len()).collect();
    let catalog = maps::catalog(&g, layer1.output_len(), &l2_out, &l1_spectral, &l2_spectral);
    let labels_of = |m: &InstanceMask, s: &[usize]| -> Vec<bool> { s.iter().map(|&i| m.labels()[i] > 0).collect() };

    // Rank each map's features on the subset, one map at a time.
    let mut sub_labels = Vec::new();
    for ((_, m), s) in tiles.iter().zip(&subsets) {
        sub_labels.extend(labels_of(m, s));
    }
    let weights = select::balanced_weights(&sub_labels);
    let mut losses = vec![0.0; catalog.len()];
    let mut by_map: Vec<(MapId, Vec<usize>)> = Vec::new();
    for (i, f) in catalog.iter().enumerate() {
        match by_map.iter_mut().find(|(id, _)| *id == f.map()) {
            Some((_, v)) => v.push(i),
            None => by_map.push((f.map(), vec![i])),
        }
    }
    for (_, members) in &by_map {
        let feats: Vec<FeatureRef> = members.iter().map(|&i| catalog[i]).collect();
        let plan = Plan::new(&feats);
        let mut rows = Vec::new();
        for (((t, _), m), s) in tiles.iter().zip(&tile_maps).zip(&subsets) {
            rows.extend(feature_rows(&plan, m, &g, &l1_spectral, &l2_spectral, s, t.width()));
        }
        let n = sub_labels.len();
        let block: Vec<f64> = members
            .par_iter()
            .enumerate()
            .map(|(j, _)| {
                let col: Vec<f32> = (0..n).map(|r| rows[r * feats.len() + j]).collect();
                select::discriminant_loss(&col, &sub_labels, weights)
            })
            .collect();
        for (&i, l) in members.iter().zip(block) {
            losses[i] = l;
        }
    }
    let selected = select::top_by_loss(&losses, cfg.n_selected);

    // Train on every sampled pixel with the selected features.
    let chosen: Vec<FeatureRef> = selected.iter().map(|&i| catalog[i]).collect();
    let plan = Plan::new(&chosen);
    let mut x = Vec::new();
    let mut labels = Vec::new();
    for (((t, m), tm), s) in tiles.iter().zip(&tile_maps).zip(&samples) {
        x.extend(feature_rows(&plan, tm, &g, &l1_spectral, &l2_spectral, s, t.width()));
        labels.extend(labels_of(m, s));
    }
    let (w0, w1) = select::balanced_weights(&labels);
    let sample_weights: Vec<f64> = labels.iter().map(|&y| if y { w1 } else { w0 }).collect();
    let classifier = Gbdt::fit(&x, &labels, &sample_weights, &cfg.classifier);

    Ok(NuSegHopModel { config: cfg.clone(), layer1, layer2, l1_spectral, l2_spectral, selected, classifier })
}

fn spectral_fit_stats(maps: &TileMaps, g: &Geometry, ids: &[MapId], samples: &[usize], w: usize) -> Vec<PcaStats> {
    ids.par_iter()
        .map(|&id| {
            let plane = maps.plane(id);
            let len = match id {
                MapId::L1(_) => g.l1_positions(),
                MapId::L2(..) => g.l2_positions(),
            };
            let mut stats = PcaStats::new(len);
            let mut buf = Vec::with_capacity(len);
            for &i in samples {
                maps::gather(plane, id, g, (i / w) as isize, (i % w) as isize, &mut buf);
                stats.add(&buf);
            }
            stats
        })
        .collect()
}

/// Foreground probability for every pixel of `h_hsi`.
pub fn predict_heatmap(h_hsi: &RgbTile, model: &NuSegHopModel) -> Result<Heatmap> {
    model.check()?;
    let g = Geometry::new(&model.config);
    let chosen = model.selected_features();
    let plan = Plan::new(&chosen);
    let mut need_l2 = vec![false; model.layer2.len()];
    for id in plan.maps() {
        if let MapId::L2(c, _) = id {
            need_l2[c] = true;
        }
    }
    let maps = maps::tile_maps(h_hsi, &model.layer1, &model.layer2, &need_l2, &g)?;
    let (w, h) = h_hsi.dims();
    let mut probs = vec![0.0; w * h];
    probs.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        let mut buf = Vec::new();
        let mut x = vec![0.0f32; plan.width];
        for (c, p) in row.iter_mut().enumerate() {
            plan.eval(&maps, &g, &model.l1_spectral, &model.l2_spectral, r as isize, c as isize, &mut buf, &mut x);
            *p = model.classifier.predict_proba(&x);
        }
    });
    Heatmap::new(w, h, probs)
}
