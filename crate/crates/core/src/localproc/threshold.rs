//! Bimodal histogram analysis and the perpendicular-intercept threshold
//! correction, applied over a multi-scale patch grid.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::histogram::{Histogram256, BINS};
use crate::preprocess::{patch_to_gray, GrayMode};
use crate::raster::{GrayMap, RgbTile};

/// Peak-finding knobs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BimodalCriteria {
    /// Moving-average width in bins.
    pub smoothing_width: usize,
    /// Minimum height of the smaller peak above the valley, as a fraction
    /// of the smoothed maximum.
    pub min_prominence: f64,
    /// Minimum distance between accepted peaks, in bins.
    pub min_separation: usize,
    /// The lowest point between the two peaks may be at most this fraction
    /// of the smaller peak. Noise ripples on a single mode fail this.
    pub max_valley_ratio: f64,
    /// Minimum Otsu separability (best between-class over total variance).
    /// A single Gaussian mode scores 2/pi, about 0.64.
    pub min_separability: f64,
}

impl Default for BimodalCriteria {
    fn default() -> Self {
        Self { smoothing_width: 5, min_prominence: 0.05, min_separation: 16, max_valley_ratio: 0.5, min_separability: 0.75 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BimodalFit {
    /// Darker peak position in `[0, 1]`.
    pub t1: f64,
    /// Brighter peak position in `[0, 1]`.
    pub t2: f64,
    /// Peak heights normalized by the smoothed histogram maximum.
    pub c1: f64,
    pub c2: f64,
    pub valid: bool,
}

impl BimodalFit {
    pub const INVALID: BimodalFit = BimodalFit { t1: 0.0, t2: 0.0, c1: 0.0, c2: 0.0, valid: false };
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdResult {
    /// Midpoint between the peaks.
    pub t_o: f64,
    /// Intensity-axis intercept of the perpendicular through the midpoint.
    pub t_c: f64,
    /// Corrected threshold, kept strictly between the peaks.
    pub t_hat: f64,
    pub lambda: f64,
}

/// Centered moving average; windows shrink at the edges.
fn smooth(bins: &[u64; BINS], width: usize) -> [f64; BINS] {
    let half = (width.max(1) - 1) / 2;
    let mut out = [0.0; BINS];
    for (i, o) in out.iter_mut().enumerate() {
        let lo = i.saturating_sub(half);
        let hi = (i + half).min(BINS - 1);
        let sum: u64 = bins[lo..=hi].iter().sum();
        *o = sum as f64 / (hi - lo + 1) as f64;
    }
    out
}

/// Otsu split of a histogram: the last bin of the lower class and the
/// between-class variance divided by the total variance. `None` for an
/// empty or constant histogram.
pub fn otsu_split(bins: &[u64; BINS]) -> Option<(usize, f64)> {
    let n: f64 = bins.iter().map(|&c| c as f64).sum();
    if n == 0.0 {
        return None;
    }
    let mean = bins.iter().enumerate().map(|(i, &c)| i as f64 * c as f64).sum::<f64>() / n;
    let total = bins.iter().enumerate().map(|(i, &c)| (i as f64 - mean).powi(2) * c as f64).sum::<f64>() / n;
    if total <= 0.0 {
        return None;
    }
    let (mut w0, mut s0) = (0.0, 0.0);
    let mut best = (0, 0.0f64);
    for (i, &c) in bins.iter().enumerate().take(BINS - 1) {
        w0 += c as f64 / n;
        s0 += i as f64 * c as f64 / n;
        if w0 <= 0.0 || w0 >= 1.0 {
            continue;
        }
        let m0 = s0 / w0;
        let m1 = (mean - s0) / (1.0 - w0);
        let between = w0 * (1.0 - w0) * (m0 - m1).powi(2);
        if between > best.1 {
            best = (i, between);
        }
    }
    Some((best.0, best.1 / total))
}

/// Between-class over total variance at the Otsu split; 0 when undefined.
pub fn otsu_separability(bins: &[u64; BINS]) -> f64 {
    otsu_split(bins).map_or(0.0, |s| s.1)
}

/// Index of the maximum; the center of the plateau when it is flat.
fn argmax(h: &[f64]) -> usize {
    let max = h.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let first = h.iter().position(|&v| v == max).unwrap_or(0);
    let last = h.iter().rposition(|&v| v == max).unwrap_or(0);
    (first + last) / 2
}

/// Smoothed peak of one class, ignoring counts outside `range`.
fn class_peak(bins: &[u64; BINS], range: std::ops::Range<usize>, width: usize) -> (usize, f64) {
    let mut masked = [0u64; BINS];
    masked[range.clone()].copy_from_slice(&bins[range.clone()]);
    let s = smooth(&masked, width);
    let i = argmax(&s).clamp(range.start, range.end - 1);
    (i, s[i])
}

/// Two-mode fit: the histogram is split into two classes by Otsu's method
/// and each class contributes its highest smoothed bin as a peak. The fit is
/// valid when the classes separate well, the peaks are far enough apart and
/// the valley between them is deep enough.
pub fn detect_bimodal(hist: &Histogram256, criteria: &BimodalCriteria) -> BimodalFit {
    let Some((split, separability)) = otsu_split(hist.bins()) else {
        return BimodalFit::INVALID;
    };
    if separability < criteria.min_separability {
        return BimodalFit::INVALID;
    }
    let w = criteria.smoothing_width;
    let (lo, p_lo) = class_peak(hist.bins(), 0..split + 1, w);
    let (hi, p_hi) = class_peak(hist.bins(), split + 1..BINS, w);
    let max = p_lo.max(p_hi);
    let smoothed = smooth(hist.bins(), w);
    let valley = smoothed[lo..=hi].iter().copied().fold(f64::INFINITY, f64::min);
    let smaller = p_lo.min(p_hi);
    if hi - lo < criteria.min_separation
        || valley > criteria.max_valley_ratio * smaller
        || smaller - valley < criteria.min_prominence * max
    {
        return BimodalFit::INVALID;
    }
    BimodalFit { t1: lo as f64 / 255.0, t2: hi as f64 / 255.0, c1: p_lo / max, c2: p_hi / max, valid: true }
}

/// Corrected threshold from the line through both peaks and its
/// perpendicular at the midpoint, on axes normalized to `[0, 1]`.
pub fn adaptive_threshold(fit: &BimodalFit, lambda: f64) -> ThresholdResult {
    let t_o = (fit.t1 + fit.t2) / 2.0;
    let count_at_mid = (fit.c1 + fit.c2) / 2.0;
    let slope = (fit.c2 - fit.c1) / (fit.t2 - fit.t1);
    // Perpendicular slope is -1/slope; solving for count = 0 gives
    // t_o + slope * count_at_mid, which is exact (t_c = t_o) for flat lines.
    let t_c = t_o + slope * count_at_mid;
    let raw = t_o + lambda * (t_o - t_c);
    let margin = (fit.t2 - fit.t1) * 1e-6;
    let t_hat = if raw <= fit.t1 {
        fit.t1 + margin
    } else if raw >= fit.t2 {
        fit.t2 - margin
    } else {
        raw
    };
    ThresholdResult { t_o, t_c, t_hat, lambda }
}

/// Which threshold to apply once a bimodal fit is found.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdMode {
    Adaptive,
    Midpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ThresholdConfig {
    pub lambda: f64,
    pub mode: ThresholdMode,
    pub patch_size: usize,
    /// Patch sizes tried, in order, where the primary patch is not bimodal.
    /// Smaller sizes subdivide the patch; larger ones add surrounding context.
    pub fallback_sizes: Vec<usize>,
    pub gray_mode: GrayMode,
    pub criteria: BimodalCriteria,
}

impl Default for ThresholdConfig {
    fn default() -> Self {
        Self {
            lambda: 0.2,
            mode: ThresholdMode::Adaptive,
            patch_size: 50,
            fallback_sizes: vec![25, 100],
            gray_mode: GrayMode::Pqr,
            criteria: BimodalCriteria::default(),
        }
    }
}

/// Region `(top, left, height, width)`.
type Rect = (usize, usize, usize, usize);

/// Splits `0..n` into runs of `size`; a trailing run shorter than half a
/// patch is merged into its predecessor.
fn spans(n: usize, size: usize) -> Vec<(usize, usize)> {
    let size = size.max(1);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let len = size.min(n - start);
        if len < size.div_ceil(2) && !out.is_empty() {
            let last: &mut (usize, usize) = out.last_mut().unwrap();
            last.1 += len;
        } else {
            out.push((start, len));
        }
        start += len;
    }
    out
}

fn grid(rect: Rect, size: usize) -> Vec<Rect> {
    let (top, left, h, w) = rect;
    let rows = spans(h, size);
    let cols = spans(w, size);
    rows.iter()
        .flat_map(|&(r, rh)| cols.iter().map(move |&(c, cw)| (top + r, left + c, rh, cw)))
        .collect()
}

/// Window of side `size` centered on `rect`, clipped to the tile.
fn context(rect: Rect, size: usize, tile_h: usize, tile_w: usize) -> Rect {
    let (top, left, h, w) = rect;
    let grow = |start: usize, len: usize, total: usize| {
        let want = size.max(len).min(total);
        let center = start + len / 2;
        let s = center.saturating_sub(want / 2).min(total - want);
        (s, want)
    };
    let (t, hh) = grow(top, h, tile_h);
    let (l, ww) = grow(left, w, tile_w);
    (t, l, hh, ww)
}

/// Threshold for one region if its histogram is bimodal. Returns the gray
/// values of the region and the threshold.
fn try_region(tile: &RgbTile, rect: Rect, cfg: &ThresholdConfig) -> Option<(GrayMap, f64)> {
    let (top, left, h, w) = rect;
    let gray = patch_to_gray(&tile.crop(top, left, h, w), cfg.gray_mode);
    let hist = Histogram256::from_values(gray.data().iter().copied()).ok()?;
    let fit = detect_bimodal(&hist, &cfg.criteria);
    if !fit.valid {
        return None;
    }
    let t = adaptive_threshold(&fit, cfg.lambda);
    let thr = match cfg.mode {
        ThresholdMode::Adaptive => t.t_hat,
        ThresholdMode::Midpoint => t.t_o,
    };
    Some((gray, thr))
}

/// `gray < thr` over `dst`, where `gray` covers `src`.
fn paint(src: Rect, gray: &GrayMap, thr: f64, dst: Rect) -> Vec<bool> {
    let (st, sl, _, sw) = src;
    let (dt, dl, dh, dw) = dst;
    let mut out = Vec::with_capacity(dh * dw);
    for r in dt..dt + dh {
        for c in dl..dl + dw {
            out.push(gray.data()[(r - st) * sw + (c - sl)] < thr);
        }
    }
    out
}

/// Binary foreground map (1 = nucleus) of the tile.
///
/// Each primary patch is converted to gray independently and thresholded
/// when its histogram is bimodal. Otherwise the fallback sizes are tried in
/// order: sizes below the patch size subdivide the region, larger sizes
/// threshold a centered context window. Pixels that no scale can threshold
/// stay background.
pub fn threshold_multiscale(tile: &RgbTile, cfg: &ThresholdConfig) -> GrayMap {
    let (w, h) = tile.dims();
    let patches = grid((0, 0, h, w), cfg.patch_size);
    let results: Vec<(Rect, Vec<bool>)> = patches
        .par_iter()
        .map(|&rect| {
            let flags = match try_region(tile, rect, cfg) {
                Some((gray, thr)) => paint(rect, &gray, thr, rect),
                None => fallback(tile, rect, cfg, 0),
            };
            (rect, flags)
        })
        .collect();
    let mut out = GrayMap::zeros(w, h);
    for ((top, left, _, pw), flags) in results {
        for (k, fg) in flags.into_iter().enumerate() {
            if fg {
                out.set(top + k / pw, left + k % pw, 1.0);
            }
        }
    }
    out
}

fn fallback(tile: &RgbTile, rect: Rect, cfg: &ThresholdConfig, step: usize) -> Vec<bool> {
    let (top, left, h, w) = rect;
    let Some(&size) = cfg.fallback_sizes.get(step) else {
        return vec![false; h * w];
    };
    if size >= cfg.patch_size {
        let src = context(rect, size, tile.height(), tile.width());
        return match try_region(tile, src, cfg) {
            Some((gray, thr)) => paint(src, &gray, thr, rect),
            None => fallback(tile, rect, cfg, step + 1),
        };
    }
    let mut flags = vec![false; h * w];
    for sub in grid(rect, size) {
        let sub_flags = match try_region(tile, sub, cfg) {
            Some((gray, thr)) => paint(sub, &gray, thr, sub),
            None => fallback(tile, sub, cfg, step + 1),
        };
        let (st, sl, sh, sw) = sub;
        for r in 0..sh {
            for c in 0..sw {
                flags[(st - top + r) * w + (sl - left + c)] = sub_flags[r * sw + c];
            }
        }
    }
    flags
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hist_with(spikes: &[(usize, u64)]) -> Histogram256 {
        let mut bins = [0u64; BINS];
        for &(b, c) in spikes {
            bins[b] = c;
        }
        Histogram256::from_counts(bins).unwrap()
    }

    #[test]
    fn two_spikes_are_bimodal() {
        let fit = detect_bimodal(&hist_with(&[(40, 500), (200, 300)]), &BimodalCriteria::default());
        assert!(fit.valid);
        assert!((fit.t1 - 40.0 / 255.0).abs() < 1e-12);
        assert!((fit.t2 - 200.0 / 255.0).abs() < 1e-12);
        assert!((fit.c1 - 1.0).abs() < 1e-12);
        assert!((fit.c2 - 0.6).abs() < 1e-12);
    }

    #[test]
    fn single_spike_and_uniform_are_not_bimodal() {
        let c = BimodalCriteria::default();
        assert!(!detect_bimodal(&hist_with(&[(128, 100)]), &c).valid);
        assert!(!detect_bimodal(&Histogram256::from_counts([7; BINS]).unwrap(), &c).valid);
    }

    #[test]
    fn close_spikes_merge() {
        let fit = detect_bimodal(&hist_with(&[(100, 50), (110, 40)]), &BimodalCriteria::default());
        assert!(!fit.valid);
    }

    #[test]
    fn worked_geometry_example() {
        let fit = BimodalFit { t1: 0.2, c1: 1.0, t2: 0.8, c2: 0.6, valid: true };
        let t = adaptive_threshold(&fit, 0.2);
        assert!((t.t_o - 0.5).abs() < 1e-12);
        assert!((t.t_c - (0.5 - 0.8 / 1.5)).abs() < 1e-12);
        assert!((t.t_hat - (0.5 + 0.2 * 0.8 / 1.5)).abs() < 1e-12);
        assert!((t.t_hat - 0.6067).abs() < 1e-4);
    }

    #[test]
    fn flat_line_keeps_midpoint() {
        let fit = BimodalFit { t1: 0.1, c1: 0.7, t2: 0.9, c2: 0.7, valid: true };
        for lambda in [0.0, 0.2, 1.0, 5.0] {
            let t = adaptive_threshold(&fit, lambda);
            assert_eq!(t.t_c, t.t_o);
            assert_eq!(t.t_hat, t.t_o);
        }
    }

    #[test]
    fn spans_merge_short_tail() {
        assert_eq!(spans(256, 50), vec![(0, 50), (50, 50), (100, 50), (150, 50), (200, 56)]);
        assert_eq!(spans(80, 50), vec![(0, 50), (50, 30)]);
        assert_eq!(spans(10, 50), vec![(0, 10)]);
    }

    #[test]
    fn blank_tile_is_background() {
        let tile = RgbTile::filled(120, 90, [0.9, 0.8, 0.85]).unwrap();
        let bin = threshold_multiscale(&tile, &ThresholdConfig::default());
        assert!(bin.data().iter().all(|&v| v == 0.0));
    }

    proptest! {
        #[test]
        fn lambda_zero_is_midpoint(t1 in 0.0..0.5f64, gap in 0.01..0.5f64, c1 in 0.0..=1.0f64, c2 in 0.0..=1.0f64) {
            let fit = BimodalFit { t1, t2: t1 + gap, c1, c2, valid: true };
            let t = adaptive_threshold(&fit, 0.0);
            prop_assert_eq!(t.t_hat, t.t_o);
        }

        #[test]
        fn t_hat_between_peaks(t1 in 0.0..0.5f64, gap in 0.01..0.5f64, c1 in 0.0..=1.0f64, c2 in 0.0..=1.0f64, lambda in -5.0..5.0f64) {
            let fit = BimodalFit { t1, t2: t1 + gap, c1, c2, valid: true };
            let t = adaptive_threshold(&fit, lambda);
            prop_assert!(t.t_hat > fit.t1 && t.t_hat < fit.t2);
        }

        #[test]
        fn monotone_in_lambda(t1 in 0.0..0.5f64, gap in 0.01..0.5f64, c1 in 0.0..=1.0f64, c2 in 0.0..=1.0f64, l1 in 0.0..2.0f64, dl in 0.0..2.0f64) {
            let fit = BimodalFit { t1, t2: t1 + gap, c1, c2, valid: true };
            let a = adaptive_threshold(&fit, l1);
            let b = adaptive_threshold(&fit, l1 + dl);
            if a.t_c < a.t_o {
                prop_assert!(b.t_o + (l1 + dl) * (b.t_o - b.t_c) >= a.t_o + l1 * (a.t_o - a.t_c));
            }
        }
    }
}
