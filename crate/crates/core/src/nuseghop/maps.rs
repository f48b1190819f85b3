//! Whole-tile response maps for both hops.
//!
//! Every pixel's window is a translate of every other pixel's, so the layer
//! responses are computed once per tile position and each window reads its
//! features from the shared maps. Positions outside the tile are mirrored
//! back in, both for the window itself and for the neighborhoods feeding
//! each layer.

use rayon::prelude::*;

use super::saab::{PcaBasis, SaabKernel, SaabStats};
use super::NuSegHopConfig;
use crate::error::Result;
use crate::raster::{reflect_index, RgbTile};

/// Rows per parallel work unit; fixed so reductions sum in a fixed order.
const ROW_CHUNK: usize = 8;

/// Single-channel map with mirrored out-of-range reads.
#[derive(Debug, Clone)]
pub(crate) struct Plane {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f32>,
}

impl Plane {
    #[inline]
    pub fn at(&self, r: isize, c: isize) -> f32 {
        self.data[reflect_index(r, self.h) * self.w + reflect_index(c, self.w)]
    }
}

/// Window layout derived from the config.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub window: usize,
    pub half: isize,
    pub f1_half: isize,
    pub pool: usize,
    pub grid: usize,
    pub f2_half: isize,
}

impl Geometry {
    pub fn new(cfg: &NuSegHopConfig) -> Self {
        Self {
            window: cfg.window,
            half: (cfg.window / 2) as isize,
            f1_half: (cfg.layer1_filter / 2) as isize,
            pool: cfg.pool,
            grid: cfg.window.div_ceil(cfg.pool),
            f2_half: (cfg.layer2_filter / 2) as isize,
        }
    }

    pub fn l1_positions(&self) -> usize {
        self.window * self.window
    }

    pub fn l2_positions(&self) -> usize {
        self.grid * self.grid
    }

    /// Offset of layer-1 window position `pos` from the window center.
    pub fn l1_offset(&self, pos: usize) -> (isize, isize) {
        ((pos / self.window) as isize - self.half, (pos % self.window) as isize - self.half)
    }

    /// Offset of the top-left pixel of pooled cell `pos`.
    pub fn l2_offset(&self, pos: usize) -> (isize, isize) {
        let p = self.pool as isize;
        ((pos / self.grid) as isize * p - self.half, (pos % self.grid) as isize * p - self.half)
    }

    pub fn l1_dims(&self) -> (usize, usize, usize) {
        let f = 2 * self.f1_half as usize + 1;
        (f, f, 3)
    }

    pub fn l2_dims(&self) -> (usize, usize, usize) {
        let f = 2 * self.f2_half as usize + 1;
        (f, f, 1)
    }
}

fn l1_cuboid(hsi: &RgbTile, g: &Geometry, r: isize, c: isize, out: &mut [f64]) {
    let (w, h) = hsi.dims();
    let data = hsi.data();
    let mut k = 0;
    for dr in -g.f1_half..=g.f1_half {
        let rr = reflect_index(r + dr, h);
        for dc in -g.f1_half..=g.f1_half {
            let base = (rr * w + reflect_index(c + dc, w)) * 3;
            out[k..k + 3].copy_from_slice(&data[base..base + 3]);
            k += 3;
        }
    }
}

fn l2_cuboid(pooled: &Plane, g: &Geometry, r: isize, c: isize, out: &mut [f64]) {
    let p = g.pool as isize;
    let mut k = 0;
    for u in -g.f2_half..=g.f2_half {
        for v in -g.f2_half..=g.f2_half {
            out[k] = pooled.at(r + p * u, c + p * v) as f64;
            k += 1;
        }
    }
}

/// How many sampled windows read each tile position, for layer 1 and for the
/// pooled grid of layer 2.
pub(crate) fn coverage(w: usize, h: usize, samples: &[usize], g: &Geometry) -> (Vec<f64>, Vec<f64>) {
    let mut c1 = vec![0.0; w * h];
    let mut c2 = vec![0.0; w * h];
    for &i in samples {
        let (r, c) = ((i / w) as isize, (i % w) as isize);
        for pos in 0..g.l1_positions() {
            let (dr, dc) = g.l1_offset(pos);
            c1[reflect_index(r + dr, h) * w + reflect_index(c + dc, w)] += 1.0;
        }
        for pos in 0..g.l2_positions() {
            let (dr, dc) = g.l2_offset(pos);
            c2[reflect_index(r + dr, h) * w + reflect_index(c + dc, w)] += 1.0;
        }
    }
    (c1, c2)
}

/// Coverage-weighted Saab statistics of the layer-1 cuboids.
pub(crate) fn layer1_stats(hsi: &RgbTile, weights: &[f64], g: &Geometry) -> SaabStats {
    let (w, h) = hsi.dims();
    let (f, _, ch) = g.l1_dims();
    let k = f * f * ch;
    let rows: Vec<usize> = (0..h).collect();
    let parts: Vec<SaabStats> = rows
        .par_chunks(ROW_CHUNK)
        .map(|chunk| {
            let mut stats = SaabStats::new(k);
            let mut buf = vec![0.0; k];
            for &r in chunk {
                for c in 0..w {
                    let wt = weights[r * w + c];
                    if wt > 0.0 {
                        l1_cuboid(hsi, g, r as isize, c as isize, &mut buf);
                        stats.add(&buf, wt);
                    }
                }
            }
            stats
        })
        .collect();
    merge_in_order(parts, k)
}

/// Coverage-weighted Saab statistics of one pooled channel's layer-2 cuboids.
pub(crate) fn layer2_stats(pooled: &Plane, weights: &[f64], g: &Geometry) -> SaabStats {
    let (w, h) = (pooled.w, pooled.h);
    let (f, _, _) = g.l2_dims();
    let k = f * f;
    let rows: Vec<usize> = (0..h).collect();
    let parts: Vec<SaabStats> = rows
        .par_chunks(ROW_CHUNK)
        .map(|chunk| {
            let mut stats = SaabStats::new(k);
            let mut buf = vec![0.0; k];
            for &r in chunk {
                for c in 0..w {
                    let wt = weights[r * w + c];
                    if wt > 0.0 {
                        l2_cuboid(pooled, g, r as isize, c as isize, &mut buf);
                        stats.add(&buf, wt);
                    }
                }
            }
            stats
        })
        .collect();
    merge_in_order(parts, k)
}

fn merge_in_order(parts: Vec<SaabStats>, k: usize) -> SaabStats {
    let mut total = SaabStats::new(k);
    for p in &parts {
        total.merge(p);
    }
    total
}

/// Applies a kernel at every position, giving `output_len` planes.
fn response_planes(w: usize, h: usize, kernel: &SaabKernel, fill: impl Fn(isize, isize, &mut [f64]) + Sync) -> Vec<Plane> {
    let m = kernel.output_len();
    let k = kernel.input_len();
    let mut interleaved = vec![0.0f32; w * h * m];
    interleaved.par_chunks_mut(w * m).enumerate().for_each(|(r, row)| {
        let mut buf = vec![0.0; k];
        let mut out = vec![0.0; m];
        for c in 0..w {
            fill(r as isize, c as isize, &mut buf);
            kernel.apply_one(&buf, &mut out);
            for (j, v) in out.iter().enumerate() {
                row[c * m + j] = *v as f32;
            }
        }
    });
    (0..m)
        .map(|j| Plane { w, h, data: interleaved.iter().skip(j).step_by(m).copied().collect() })
        .collect()
}

pub(crate) fn layer1_maps(hsi: &RgbTile, kernel: &SaabKernel, g: &Geometry) -> Vec<Plane> {
    let (w, h) = hsi.dims();
    response_planes(w, h, kernel, |r, c, buf| l1_cuboid(hsi, g, r, c, buf))
}

/// `pool x pool` max pooling anchored at each position's top-left corner.
pub(crate) fn max_pool(plane: &Plane, pool: usize) -> Plane {
    let (w, h) = (plane.w, plane.h);
    let mut data = vec![0.0f32; w * h];
    data.par_chunks_mut(w).enumerate().for_each(|(r, row)| {
        for (c, out) in row.iter_mut().enumerate() {
            let mut m = f32::NEG_INFINITY;
            for dr in 0..pool as isize {
                for dc in 0..pool as isize {
                    m = m.max(plane.at(r as isize + dr, c as isize + dc));
                }
            }
            *out = m;
        }
    });
    Plane { w, h, data }
}

pub(crate) fn layer2_maps(pooled: &Plane, kernel: &SaabKernel, g: &Geometry) -> Vec<Plane> {
    response_planes(pooled.w, pooled.h, kernel, |r, c, buf| l2_cuboid(pooled, g, r, c, buf))
}

/// Identifies one response map: a layer-1 channel or a layer-2 channel of a
/// layer-1 channel. Channel 0 is the DC map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub(crate) enum MapId {
    L1(usize),
    L2(usize, usize),
}

/// Mirrored reads of a window's positions on one map.
pub(crate) fn gather(plane: &Plane, id: MapId, g: &Geometry, r: isize, c: isize, out: &mut Vec<f64>) {
    out.clear();
    match id {
        MapId::L1(_) => {
            for pos in 0..g.l1_positions() {
                let (dr, dc) = g.l1_offset(pos);
                out.push(plane.at(r + dr, c + dc) as f64);
            }
        }
        MapId::L2(..) => {
            for pos in 0..g.l2_positions() {
                let (dr, dc) = g.l2_offset(pos);
                out.push(plane.at(r + dr, c + dc) as f64);
            }
        }
    }
}

/// Every response map of a tile under a fitted model.
pub(crate) struct TileMaps {
    pub l1: Vec<Plane>,
    /// Indexed by layer-1 AC channel (0-based), then layer-2 output channel.
    pub l2: Vec<Vec<Plane>>,
}

impl TileMaps {
    pub fn plane(&self, id: MapId) -> &Plane {
        match id {
            MapId::L1(ch) => &self.l1[ch],
            MapId::L2(c1, ch2) => &self.l2[c1][ch2],
        }
    }
}

/// Builds the maps a prediction needs; layer-2 channels outside `need_l2`
/// are left empty.
pub(crate) fn tile_maps(
    hsi: &RgbTile,
    l1: &SaabKernel,
    l2: &[SaabKernel],
    need_l2: &[bool],
    g: &Geometry,
) -> Result<TileMaps> {
    let l1_planes = layer1_maps(hsi, l1, g);
    let l2_planes = l2
        .iter()
        .enumerate()
        .map(|(c1, kernel)| {
            if need_l2[c1] {
                layer2_maps(&max_pool(&l1_planes[c1 + 1], g.pool), kernel, g)
            } else {
                Vec::new()
            }
        })
        .collect();
    Ok(TileMaps { l1: l1_planes, l2: l2_planes })
}

/// One feature of a window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureRef {
    /// Layer-1 channel (0 = DC) at window position `pos`.
    L1Spatial { ch: usize, pos: usize },
    /// Layer-2 channel `ch2` (0 = DC) of layer-1 AC channel `c1` at pooled
    /// position `pos`.
    L2Spatial { c1: usize, ch2: usize, pos: usize },
    /// Component `comp` of the spectral PCA over a layer-1 map.
    L1Spectral { ch: usize, comp: usize },
    /// Component `comp` of the spectral PCA over a layer-2 map.
    L2Spectral { c1: usize, ch2: usize, comp: usize },
}

impl FeatureRef {
    pub(crate) fn map(&self) -> MapId {
        match *self {
            FeatureRef::L1Spatial { ch, .. } | FeatureRef::L1Spectral { ch, .. } => MapId::L1(ch),
            FeatureRef::L2Spatial { c1, ch2, .. } | FeatureRef::L2Spectral { c1, ch2, .. } => MapId::L2(c1, ch2),
        }
    }
}

/// Enumerates all features: layer-1 spatial, layer-2 spatial, layer-1
/// spectral, layer-2 spectral, each in channel-major order.
pub(crate) fn catalog(
    g: &Geometry,
    l1_channels: usize,
    l2_channels: &[usize],
    l1_spectral: &[PcaBasis],
    l2_spectral: &[Vec<PcaBasis>],
) -> Vec<FeatureRef> {
    let mut out = Vec::new();
    for ch in 0..l1_channels {
        out.extend((0..g.l1_positions()).map(|pos| FeatureRef::L1Spatial { ch, pos }));
    }
    for (c1, &n) in l2_channels.iter().enumerate() {
        for ch2 in 0..n {
            out.extend((0..g.l2_positions()).map(|pos| FeatureRef::L2Spatial { c1, ch2, pos }));
        }
    }
    for (ch, b) in l1_spectral.iter().enumerate() {
        out.extend((0..b.kept()).map(|comp| FeatureRef::L1Spectral { ch, comp }));
    }
    for (c1, maps) in l2_spectral.iter().enumerate() {
        for (ch2, b) in maps.iter().enumerate() {
            out.extend((0..b.kept()).map(|comp| FeatureRef::L2Spectral { c1, ch2, comp }));
        }
    }
    out
}

/// Feature evaluation grouped by source map so each window is gathered once.
pub(crate) struct Plan {
    groups: Vec<(MapId, Vec<(usize, FeatureRef)>)>,
    pub width: usize,
}

impl Plan {
    pub fn new(features: &[FeatureRef]) -> Self {
        let mut groups: Vec<(MapId, Vec<(usize, FeatureRef)>)> = Vec::new();
        for (slot, f) in features.iter().enumerate() {
            let id = f.map();
            match groups.iter_mut().find(|(g, _)| *g == id) {
                Some((_, list)) => list.push((slot, *f)),
                None => groups.push((id, vec![(slot, *f)])),
            }
        }
        Self { groups, width: features.len() }
    }

    pub fn maps(&self) -> impl Iterator<Item = MapId> + '_ {
        self.groups.iter().map(|(id, _)| *id)
    }

    /// Features of the window centered at `(r, c)`, written into `out`.
    #[allow(clippy::too_many_arguments)]
    pub fn eval(
        &self,
        maps: &TileMaps,
        g: &Geometry,
        l1_spectral: &[PcaBasis],
        l2_spectral: &[Vec<PcaBasis>],
        r: isize,
        c: isize,
        buf: &mut Vec<f64>,
        out: &mut [f32],
    ) {
        for (id, list) in &self.groups {
            gather(maps.plane(*id), *id, g, r, c, buf);
            for &(slot, f) in list {
                out[slot] = match f {
                    FeatureRef::L1Spatial { pos, .. } | FeatureRef::L2Spatial { pos, .. } => buf[pos] as f32,
                    FeatureRef::L1Spectral { ch, comp } => l1_spectral[ch].project(buf, comp) as f32,
                    FeatureRef::L2Spectral { c1, ch2, comp } => l2_spectral[c1][ch2].project(buf, comp) as f32,
                };
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry() -> Geometry {
        Geometry::new(&NuSegHopConfig::default())
    }

    #[test]
    fn default_layout() {
        let g = geometry();
        assert_eq!((g.window, g.grid, g.l1_positions(), g.l2_positions()), (9, 5, 81, 25));
        assert_eq!(g.l1_offset(0), (-4, -4));
        assert_eq!(g.l1_offset(80), (4, 4));
        assert_eq!(g.l2_offset(24), (4, 4));
        assert_eq!(g.l1_dims(), (3, 3, 3));
    }

    #[test]
    fn coverage_counts_every_window_position() {
        let g = geometry();
        let (c1, c2) = coverage(20, 20, &[0, 210], &g);
        assert_eq!(c1.iter().sum::<f64>(), 2.0 * 81.0);
        assert_eq!(c2.iter().sum::<f64>(), 2.0 * 25.0);
        // Window at (10, 10) reads (6..=14)^2 once each.
        assert_eq!(c1[10 * 20 + 10], 1.0);
        assert_eq!(c1[6 * 20 + 14], 1.0);
    }

    #[test]
    fn max_pool_reads_the_corner_block() {
        let plane = Plane { w: 3, h: 2, data: vec![1.0, 5.0, 2.0, 3.0, 0.0, 4.0] };
        let p = max_pool(&plane, 2);
        assert_eq!(p.data[0], 5.0);
        assert_eq!(p.data[2], 4.0);
        // Mirrored at the bottom edge: row 2 reads row 1.
        assert_eq!(p.data[3], 3.0);
    }
}
