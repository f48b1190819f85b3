//! Stain separation, histogram equalization and the per-patch PQR
//! color-to-gray projection.

use nalgebra::{Matrix3, SymmetricEigen, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::raster::{GrayMap, RgbTile};

/// Optical-density stain directions recovered from a tile.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StainBasis {
    pub hematoxylin_dir: [f64; 3],
    pub eosin_dir: [f64; 3],
    pub od_floor: f64,
}

/// Principal color axes of one patch. `p`, `q`, `r` are ordered by
/// decreasing variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PqrBasis {
    pub mean_color: [f64; 3],
    pub p: [f64; 3],
    pub q: [f64; 3],
    pub r: [f64; 3],
    /// Variance along `p`, `q`, `r`.
    pub variances: [f64; 3],
    pub sign_flag: f64,
}

impl PqrBasis {
    pub fn rows(&self) -> [[f64; 3]; 3] {
        [self.p, self.q, self.r]
    }
}

/// `(v * 255 + 1) / 256` keeps the logarithm finite for black pixels.
pub const OD_FLOOR: f64 = 1.0 / 256.0;

/// Pixels with optical-density norm below this are left out of the angle
/// statistics (near-white, no stain information).
const OD_ANGLE_MIN_NORM: f64 = 0.15;
const SINGULAR_FLOOR: f64 = 1e-6;
const COLLINEAR_DOT: f64 = 0.999;
/// Used as the second stain when the tile carries only one.
const REFERENCE_EOSIN: [f64; 3] = [0.072, 0.990, 0.105];
const REFERENCE_HEMATOXYLIN: [f64; 3] = [0.650, 0.704, 0.286];

pub fn optical_density(v: f64) -> f64 {
    -((v * 255.0 + 1.0) / 256.0).ln()
}

fn od_to_value(od: f64) -> f64 {
    ((256.0 * (-od).exp() - 1.0) / 255.0).clamp(0.0, 1.0)
}

fn normalize(v: Vector3<f64>) -> Vector3<f64> {
    let n = v.norm();
    if n > 0.0 {
        v / n
    } else {
        v
    }
}

fn to_array(v: Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Eigen-decomposition of a symmetric 3x3 with eigenpairs sorted by
/// decreasing eigenvalue and each vector's largest-magnitude entry positive.
fn sorted_eigen(m: Matrix3<f64>) -> ([f64; 3], [Vector3<f64>; 3]) {
    let eig = SymmetricEigen::new(m);
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.map(|i| eig.eigenvalues[i].max(0.0));
    let vecs = order.map(|i| {
        let v: Vector3<f64> = eig.eigenvectors.column(i).into();
        let big = if v.x.abs() >= v.y.abs() && v.x.abs() >= v.z.abs() {
            v.x
        } else if v.y.abs() >= v.z.abs() {
            v.y
        } else {
            v.z
        };
        if big < 0.0 {
            -v
        } else {
            v
        }
    });
    (vals, vecs)
}

fn percentile_sorted(sorted: &[f64], pct: f64) -> f64 {
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Separates the tile into hematoxylin and eosin optical-density directions
/// and reconstructs the hematoxylin-only image.
///
/// The stain plane is the span of the top two principal directions of the
/// centered optical densities. Stain directions are the 1st and 99th
/// percentile angles of the (uncentered) densities projected onto that plane.
/// The direction absorbing more red light is taken as hematoxylin.
pub fn stain_separate(tile: &RgbTile) -> Result<(RgbTile, StainBasis)> {
    let od: Vec<Vector3<f64>> = tile
        .pixels()
        .map(|[r, g, b]| Vector3::new(optical_density(r), optical_density(g), optical_density(b)))
        .collect();
    let n = od.len() as f64;
    let mean = od.iter().sum::<Vector3<f64>>() / n;
    let mut scatter = Matrix3::zeros();
    for v in &od {
        let d = v - mean;
        scatter += d * d.transpose();
    }
    let (vals, vecs) = sorted_eigen(scatter);
    if vals[0].sqrt() < SINGULAR_FLOOR && vals[1].sqrt() < SINGULAR_FLOOR {
        return Err(Error::ConstantTile);
    }
    let mut e1 = vecs[0];
    if e1.sum() < 0.0 {
        e1 = -e1;
    }
    let e2 = vecs[1];

    let angle_of = |v: &Vector3<f64>| v.dot(&e2).atan2(v.dot(&e1));
    let mut angles: Vec<f64> =
        od.iter().filter(|v| v.norm() >= OD_ANGLE_MIN_NORM).map(angle_of).collect();
    if angles.len() < 16 {
        angles = od.iter().filter(|v| v.norm() > 1e-9).map(angle_of).collect();
    }
    if angles.is_empty() {
        return Err(Error::ConstantTile);
    }
    angles.sort_by(f64::total_cmp);
    let dir_at = |phi: f64| {
        let v = e1 * phi.cos() + e2 * phi.sin();
        normalize(v.map(|x| x.max(0.0)))
    };
    let a = dir_at(percentile_sorted(&angles, 1.0));
    let b = dir_at(percentile_sorted(&angles, 99.0));

    let (h_dir, e_dir) = if a.dot(&b).abs() >= COLLINEAR_DOT || a.norm() == 0.0 || b.norm() == 0.0
    {
        let h = normalize(a + b);
        let h = if h.norm() == 0.0 { Vector3::from(REFERENCE_HEMATOXYLIN) } else { h };
        let mut e = normalize(Vector3::from(REFERENCE_EOSIN));
        if h.dot(&e).abs() >= COLLINEAR_DOT {
            e = normalize(Vector3::from(REFERENCE_HEMATOXYLIN));
        }
        (h, e)
    } else if a.x >= b.x {
        (a, b)
    } else {
        (b, a)
    };

    let conc = concentrations(&od, h_dir, e_dir);
    let data: Vec<f64> = conc
        .par_iter()
        .flat_map_iter(|&(ch, _)| {
            let od_h = h_dir * ch.max(0.0);
            [od_to_value(od_h.x), od_to_value(od_h.y), od_to_value(od_h.z)]
        })
        .collect();
    let h_image = RgbTile::new(tile.width(), tile.height(), data)?;
    Ok((
        h_image,
        StainBasis { hematoxylin_dir: to_array(h_dir), eosin_dir: to_array(e_dir), od_floor: OD_FLOOR },
    ))
}

/// Least-squares stain concentrations `(c_h, c_e)` per pixel.
fn concentrations(od: &[Vector3<f64>], h: Vector3<f64>, e: Vector3<f64>) -> Vec<(f64, f64)> {
    let (hh, he, ee) = (h.dot(&h), h.dot(&e), e.dot(&e));
    let det = hh * ee - he * he;
    od.par_iter()
        .map(|v| {
            let (bh, be) = (h.dot(v), e.dot(v));
            ((ee * bh - he * be) / det, (hh * be - he * bh) / det)
        })
        .collect()
}

/// Fraction of squared concentration carried by each stain.
pub fn stain_energy_shares(tile: &RgbTile, basis: &StainBasis) -> (f64, f64) {
    let od: Vec<Vector3<f64>> = tile
        .pixels()
        .map(|[r, g, b]| Vector3::new(optical_density(r), optical_density(g), optical_density(b)))
        .collect();
    let conc = concentrations(
        &od,
        Vector3::from(basis.hematoxylin_dir),
        Vector3::from(basis.eosin_dir),
    );
    let eh: f64 = conc.iter().map(|c| c.0 * c.0).sum();
    let ee: f64 = conc.iter().map(|c| c.1 * c.1).sum();
    let total = eh + ee;
    if total == 0.0 {
        (0.0, 0.0)
    } else {
        (eh / total, ee / total)
    }
}

/// Per-channel histogram equalization over 256 levels: each value maps to
/// the cumulative fraction of pixels at or below its level.
pub fn hist_equalize(tile: &RgbTile) -> RgbTile {
    equalize_clipped(tile, 0.0)
}

/// Histogram equalization with bin counts capped at `clip_limit` times the
/// mean bin count, the excess spread evenly over all bins. This bounds how
/// far a dominant narrow peak (flat background) gets stretched. A limit of 0
/// disables clipping.
pub fn equalize_clipped(tile: &RgbTile, clip_limit: f64) -> RgbTile {
    let n = (tile.width() * tile.height()) as f64;
    let level = |v: f64| (v * 255.0).round() as usize;
    let mut cdfs = [[0.0f64; 256]; 3];
    for (c, cdf) in cdfs.iter_mut().enumerate() {
        let mut counts = [0.0f64; 256];
        for px in tile.pixels() {
            counts[level(px[c])] += 1.0;
        }
        if clip_limit > 0.0 {
            let cap = clip_limit * n / 256.0;
            let excess: f64 = counts.iter().map(|&k| (k - cap).max(0.0)).sum();
            counts.iter_mut().for_each(|k| *k = k.min(cap) + excess / 256.0);
        }
        let mut acc = 0.0;
        for (k, slot) in cdf.iter_mut().enumerate() {
            acc += counts[k];
            *slot = (acc / n).min(1.0);
        }
    }
    let data = tile
        .data()
        .chunks_exact(3)
        .flat_map(|px| [cdfs[0][level(px[0])], cdfs[1][level(px[1])], cdfs[2][level(px[2])]])
        .collect();
    RgbTile::new(tile.width(), tile.height(), data).expect("CDF values are in [0, 1]")
}

/// Principal color axes of a patch.
///
/// `sign_flag` makes projections onto `p` correlate positively with pixel
/// intensity, so dark nuclei end up with low p-values.
pub fn fit_pqr(patch: &RgbTile) -> Result<PqrBasis> {
    let n = patch.width() * patch.height();
    if n < 4 {
        return Err(Error::DegeneratePatch);
    }
    let mut mean = Vector3::zeros();
    for px in patch.pixels() {
        mean += Vector3::from(px);
    }
    mean /= n as f64;
    let mut cov = Matrix3::zeros();
    for px in patch.pixels() {
        let d = Vector3::from(px) - mean;
        cov += d * d.transpose();
    }
    cov /= n as f64;
    let (vals, vecs) = sorted_eigen(cov);
    if vals[0] <= 1e-14 {
        return Err(Error::DegeneratePatch);
    }
    let p = vecs[0];
    let mean_i = mean.sum() / 3.0;
    let mut corr = 0.0;
    for px in patch.pixels() {
        let v = Vector3::from(px);
        corr += p.dot(&(v - mean)) * (v.sum() / 3.0 - mean_i);
    }
    let sign_flag = if corr > 0.0 || (corr == 0.0 && p.sum() >= 0.0) { 1.0 } else { -1.0 };
    Ok(PqrBasis {
        mean_color: to_array(mean),
        p: to_array(p),
        q: to_array(vecs[1]),
        r: to_array(vecs[2]),
        variances: vals,
        sign_flag,
    })
}

/// p-value map: `sign_flag * P . (pixel - mean)`, min-max rescaled to `[0, 1]`.
pub fn pqr_project(patch: &RgbTile, basis: &PqrBasis) -> GrayMap {
    let raw: Vec<f64> = patch
        .pixels()
        .map(|px| {
            let d = [0, 1, 2].map(|c| px[c] - basis.mean_color[c]);
            basis.sign_flag * (basis.p[0] * d[0] + basis.p[1] * d[1] + basis.p[2] * d[2])
        })
        .collect();
    GrayMap::new(patch.width(), patch.height(), min_max(raw)).expect("dims preserved")
}

pub(crate) fn min_max(mut v: Vec<f64>) -> Vec<f64> {
    let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for x in &mut v {
        *x = if span > 0.0 { (*x - lo) / span } else { 0.5 };
    }
    v
}

/// Gray conversion used by the thresholding stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrayMode {
    /// Per-patch principal color axis.
    Pqr,
    /// CIE L* lightness, a fixed colorspace conversion.
    FixedColorspace,
}

/// Converts a patch to gray in `[0, 1]` with nuclei dark. PQR falls back to
/// the intensity channel when the patch has no color variance.
pub fn patch_to_gray(patch: &RgbTile, mode: GrayMode) -> GrayMap {
    let values = match mode {
        GrayMode::Pqr => match fit_pqr(patch) {
            Ok(basis) => return pqr_project(patch, &basis),
            Err(_) => crate::color::intensity(patch),
        },
        GrayMode::FixedColorspace => patch.pixels().map(lightness).collect(),
    };
    GrayMap::new(patch.width(), patch.height(), min_max(values)).expect("dims preserved")
}

/// CIE L* (D65, sRGB primaries) scaled to `[0, 1]`.
pub fn lightness([r, g, b]: [f64; 3]) -> f64 {
    fn lin(c: f64) -> f64 {
        if c <= 0.04045 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    }
    let y = 0.2126 * lin(r) + 0.7152 * lin(g) + 0.0722 * lin(b);
    let f = if y > 216.0 / 24389.0 { y.cbrt() } else { (24389.0 / 27.0 * y + 16.0) / 116.0 };
    ((116.0 * f - 16.0) / 100.0).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn angle_deg(a: [f64; 3], b: [f64; 3]) -> f64 {
        let (a, b) = (Vector3::from(a), Vector3::from(b));
        (a.dot(&b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos().to_degrees()
    }

    /// Paints pixels by Beer-Lambert mixing of two OD directions with random
    /// concentrations.
    fn two_stain_tile(h: [f64; 3], e: [f64; 3], seed: u64, only_h: bool) -> RgbTile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, e) = (normalize(Vector3::from(h)), normalize(Vector3::from(e)));
        let mut data = Vec::new();
        for _ in 0..64 * 64 {
            let ch: f64 = rng.gen_range(0.0..1.2);
            let ce: f64 = if only_h { 0.0 } else { rng.gen_range(0.0..0.8) };
            let od = h * ch + e * ce;
            data.extend([od.x, od.y, od.z].map(od_to_value));
        }
        RgbTile::new(64, 64, data).unwrap()
    }

    #[test]
    fn recovers_generating_stains() {
        let h = [0.65, 0.70, 0.29];
        let e = [0.07, 0.99, 0.11];
        let tile = two_stain_tile(h, e, 7, false);
        let (_, basis) = stain_separate(&tile).unwrap();
        assert!(angle_deg(basis.hematoxylin_dir, h) < 5.0, "{:?}", basis);
        assert!(angle_deg(basis.eosin_dir, e) < 5.0, "{:?}", basis);
    }

    #[test]
    fn white_tile_is_constant() {
        let tile = RgbTile::filled(8, 8, [1.0; 3]).unwrap();
        assert!(matches!(stain_separate(&tile), Err(Error::ConstantTile)));
    }

    #[test]
    fn single_stain_tile() {
        let h = [0.65, 0.70, 0.29];
        let tile = two_stain_tile(h, [0.07, 0.99, 0.11], 3, true);
        let (h_img, basis) = stain_separate(&tile).unwrap();
        assert!(angle_deg(basis.hematoxylin_dir, h) < 5.0);
        let (_, e_share) = stain_energy_shares(&tile, &basis);
        assert!(e_share < 0.01, "eosin share {e_share}");
        let dot: f64 = (0..3).map(|i| basis.hematoxylin_dir[i] * basis.eosin_dir[i]).sum();
        assert!(dot.abs() < COLLINEAR_DOT);
        // Separating the hematoxylin image again keeps the direction.
        let (_, again) = stain_separate(&h_img).unwrap();
        assert!(angle_deg(again.hematoxylin_dir, basis.hematoxylin_dir) < 5.0);
    }

    #[test]
    fn basis_vectors_are_unit_and_nonnegative() {
        let tile = two_stain_tile([0.5, 0.8, 0.3], [0.1, 0.9, 0.4], 11, false);
        let (_, b) = stain_separate(&tile).unwrap();
        for v in [b.hematoxylin_dir, b.eosin_dir] {
            assert!((Vector3::from(v).norm() - 1.0).abs() < 1e-9);
            assert!(v.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn equalize_two_levels() {
        let mut data = Vec::new();
        for i in 0..100 {
            let v = if i < 75 { 0.25 } else { 0.75 };
            data.extend([v, v, v]);
        }
        let out = hist_equalize(&RgbTile::new(100, 1, data).unwrap());
        assert!((out.pixel(0, 0)[0] - 0.75).abs() <= 1.0 / 255.0);
        assert!((out.pixel(0, 99)[0] - 1.0).abs() <= 1.0 / 255.0);
    }

    #[test]
    fn equalize_uniform_and_constant() {
        let data: Vec<f64> = (0..256).flat_map(|i| [i as f64 / 255.0; 3]).collect();
        let tile = RgbTile::new(256, 1, data).unwrap();
        let out = hist_equalize(&tile);
        for (a, b) in tile.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1.0 / 255.0);
        }
        let flat = hist_equalize(&RgbTile::filled(4, 4, [0.3, 0.6, 0.9]).unwrap());
        assert!(flat.data().windows(3).step_by(3).all(|w| w == &flat.data()[..3]));
    }

    #[test]
    fn pqr_red_only() {
        let data: Vec<f64> = (0..16).flat_map(|i| [i as f64 / 15.0, 0.4, 0.6]).collect();
        let tile = RgbTile::new(4, 4, data).unwrap();
        let b = fit_pqr(&tile).unwrap();
        assert!((b.p[0].abs() - 1.0).abs() < 1e-9);
        let p = pqr_project(&tile, &b);
        // monotone increasing in red
        assert!(p.data().windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn pqr_constant_patch() {
        let tile = RgbTile::filled(4, 4, [0.2, 0.3, 0.4]).unwrap();
        assert!(matches!(fit_pqr(&tile), Err(Error::DegeneratePatch)));
        let tiny = RgbTile::new(3, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]).unwrap();
        assert!(matches!(fit_pqr(&tiny), Err(Error::DegeneratePatch)));
    }

    #[test]
    fn pqr_isotropic_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..60_000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let b = fit_pqr(&RgbTile::new(200, 100, data).unwrap()).unwrap();
        let total: f64 = b.variances.iter().sum();
        for v in b.variances {
            assert!((v / total - 1.0 / 3.0).abs() < 0.02);
        }
        let rows = b.rows();
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..3).map(|k| rows[i][k] * rows[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn pqr_mean_pixel_projects_to_zero() {
        let data: Vec<f64> = (0..16).flat_map(|i| [i as f64 / 15.0, 0.5, 1.0 - i as f64 / 15.0]).collect();
        let tile = RgbTile::new(4, 4, data).unwrap();
        let b = fit_pqr(&tile).unwrap();
        let d: f64 = (0..3).map(|c| b.p[c] * (b.mean_color[c] - b.mean_color[c])).sum();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn pqr_nuclei_are_low() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut data = Vec::new();
        let mut is_nucleus = Vec::new();
        for i in 0..400 {
            let dark = i % 3 == 0;
            let base = if dark { [0.35, 0.25, 0.55] } else { [0.92, 0.75, 0.80] };
            data.extend(base.map(|v: f64| (v + rng.gen_range(-0.03..0.03)).clamp(0.0, 1.0)));
            is_nucleus.push(dark);
        }
        let tile = RgbTile::new(20, 20, data).unwrap();
        let p = pqr_project(&tile, &fit_pqr(&tile).unwrap());
        let (mut dn, mut db) = (Vec::new(), Vec::new());
        for (v, &n) in p.data().iter().zip(&is_nucleus) {
            if n { dn.push(*v) } else { db.push(*v) }
        }
        let max_nucleus = dn.iter().copied().fold(0.0, f64::max);
        let min_bg = db.iter().copied().fold(1.0, f64::min);
        assert!(max_nucleus < min_bg);
    }
}
