//! Hole filling, small-instance removal and concavity-based splitting.

use serde::{Deserialize, Serialize};

use crate::components::{fill_holes, label_components};
use crate::raster::{GrayMap, InstanceMask};
use crate::regions::{convex_hull, pixel_corners, props_of, RegionProps};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MorphConfig {
    pub min_area: usize,
    /// Instances below this solidity are candidates for splitting.
    pub solidity_cutoff: f64,
    pub max_split_depth: usize,
    /// Minimum distance from a concavity point to its hull edge, in pixels.
    pub min_concavity_depth: f64,
}

impl Default for MorphConfig {
    fn default() -> Self {
        Self { min_area: 30, solidity_cutoff: 0.85, max_split_depth: 2, min_concavity_depth: 2.0 }
    }
}

/// Fills holes, drops components smaller than `min_area`, splits concave
/// components, and relabels.
pub fn morph_refine(binary: &GrayMap, cfg: &MorphConfig) -> InstanceMask {
    let (w, h) = binary.dims();
    let mut fg: Vec<bool> = (0..w * h).map(|i| binary.is_foreground(i)).collect();
    fill_holes(&mut fg, w, h);
    let labeled = label_components(&fg, w, h);
    let mut keep = vec![false; w * h];
    for pixels in labeled.pixel_lists().into_iter().skip(1) {
        if pixels.len() < cfg.min_area {
            continue;
        }
        let props = props_of(0, &pixels, w);
        for piece in split_concave(&pixels, &props, w, cfg) {
            for i in piece {
                keep[i] = true;
            }
        }
    }
    label_components(&keep, w, h)
}

/// Splits an instance along the chord between its two deepest concavities.
///
/// Returns the input unchanged when the instance is small, solid, or has
/// fewer than two concavities deeper than `min_concavity_depth` on distinct
/// hull edges. The chord pixels become background so the pieces stay
/// 8-disconnected.
pub fn split_concave(pixels: &[usize], props: &RegionProps, w: usize, cfg: &MorphConfig) -> Vec<Vec<usize>> {
    split_rec(pixels.to_vec(), props, w, cfg, 0)
}

fn split_rec(
    pixels: Vec<usize>,
    props: &RegionProps,
    w: usize,
    cfg: &MorphConfig,
    depth: usize,
) -> Vec<Vec<usize>> {
    if depth >= cfg.max_split_depth
        || pixels.len() < 2 * cfg.min_area
        || props.solidity >= cfg.solidity_cutoff
    {
        return vec![pixels];
    }
    let Some((a, b)) = concavity_pair(&pixels, w, cfg.min_concavity_depth) else {
        return vec![pixels];
    };
    let pieces = cut(&pixels, w, a, b);
    if pieces.len() < 2 || pieces.iter().filter(|p| p.len() >= cfg.min_area).count() < 2 {
        return vec![pixels];
    }
    pieces
        .into_iter()
        .filter(|p| p.len() >= cfg.min_area)
        .flat_map(|p| {
            let pp = props_of(0, &p, w);
            split_rec(p, &pp, w, cfg, depth + 1)
        })
        .collect()
}

/// Deepest boundary pixel per hull edge; returns the two deepest on
/// different edges as `(row, col)`.
fn concavity_pair(pixels: &[usize], w: usize, min_depth: f64) -> Option<((i64, i64), (i64, i64))> {
    let hull = convex_hull(&pixel_corners(pixels, w));
    if hull.len() < 3 {
        return None;
    }
    let set: std::collections::HashSet<usize> = pixels.iter().copied().collect();
    let inside = |r: i64, c: i64| r >= 0 && c >= 0 && (c as usize) < w && set.contains(&(r as usize * w + c as usize));
    let mut best: Vec<(f64, (i64, i64))> = vec![(0.0, (0, 0)); hull.len()];
    for &i in pixels {
        let (r, c) = ((i / w) as i64, (i % w) as i64);
        let boundary = [(-1, 0), (1, 0), (0, -1), (0, 1)].iter().any(|(dr, dc)| !inside(r + dr, c + dc));
        if !boundary {
            continue;
        }
        let (pr, pc) = (r as f64 + 0.5, c as f64 + 0.5);
        let (mut edge, mut dist) = (0, f64::INFINITY);
        for k in 0..hull.len() {
            let d = segment_distance((pr, pc), hull[k], hull[(k + 1) % hull.len()]);
            if d < dist {
                dist = d;
                edge = k;
            }
        }
        if dist > best[edge].0 {
            best[edge] = (dist, (r, c));
        }
    }
    let mut ranked: Vec<(f64, (i64, i64))> = best.into_iter().filter(|b| b.0 >= min_depth).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    match ranked.as_slice() {
        [first, second, ..] => Some((first.1, second.1)),
        _ => None,
    }
}

fn segment_distance(p: (f64, f64), a: (i64, i64), b: (i64, i64)) -> f64 {
    let (ax, ay) = (a.0 as f64, a.1 as f64);
    let (bx, by) = (b.0 as f64, b.1 as f64);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { (((p.0 - ax) * dx + (p.1 - ay) * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (qx, qy) = (ax + t * dx, ay + t * dy);
    ((p.0 - qx).powi(2) + (p.1 - qy).powi(2)).sqrt()
}

/// 4-connected digital line from `a` to `b`, extended one pixel past each end.
fn chord(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (dr, dc) = (b.0 - a.0, b.1 - a.1);
    let steps = dr.abs().max(dc.abs()).max(1);
    let ext = |t: f64| (a.0 as f64 + dr as f64 * t, a.1 as f64 + dc as f64 * t);
    let (sr, sc) = ext(-1.0 / steps as f64);
    let (er, ec) = ext(1.0 + 1.0 / steps as f64);
    let mut out = Vec::new();
    let (mut r, mut c) = (sr.round() as i64, sc.round() as i64);
    let (r1, c1) = (er.round() as i64, ec.round() as i64);
    let (ddr, ddc) = ((r1 - r).abs(), (c1 - c).abs());
    let (sgr, sgc) = ((r1 - r).signum(), (c1 - c).signum());
    let mut err = ddc - ddr;
    out.push((r, c));
    while r != r1 || c != c1 {
        // Step one axis at a time so consecutive pixels share an edge.
        if 2 * err > -ddr && c != c1 && (err >= 0 || r == r1) {
            err -= ddr;
            c += sgc;
        } else {
            err += ddc;
            r += sgr;
        }
        out.push((r, c));
    }
    out
}

fn cut(pixels: &[usize], w: usize, a: (i64, i64), b: (i64, i64)) -> Vec<Vec<usize>> {
    let line: std::collections::HashSet<(i64, i64)> = chord(a, b).into_iter().collect();
    let rest: Vec<usize> = pixels
        .iter()
        .copied()
        .filter(|&i| !line.contains(&((i / w) as i64, (i % w) as i64)))
        .collect();
    if rest.is_empty() {
        return Vec::new();
    }
    // Label the remainder inside its bounding box.
    let top = rest.iter().map(|&i| i / w).min().unwrap();
    let left = rest.iter().map(|&i| i % w).min().unwrap();
    let bh = rest.iter().map(|&i| i / w).max().unwrap() - top + 1;
    let bw = rest.iter().map(|&i| i % w).max().unwrap() - left + 1;
    let mut fg = vec![false; bh * bw];
    for &i in &rest {
        fg[(i / w - top) * bw + (i % w - left)] = true;
    }
    let labeled = label_components(&fg, bw, bh);
    labeled
        .pixel_lists()
        .into_iter()
        .skip(1)
        .filter(|p| !p.is_empty())
        .map(|p| p.into_iter().map(|j| (j / bw + top) * w + (j % bw + left)).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disk(fg: &mut [f64], w: usize, cr: f64, cc: f64, rad: f64) {
        let h = fg.len() / w;
        for r in 0..h {
            for c in 0..w {
                if (r as f64 - cr).powi(2) + (c as f64 - cc).powi(2) <= rad * rad {
                    fg[r * w + c] = 1.0;
                }
            }
        }
    }

    fn cfg() -> MorphConfig {
        MorphConfig::default()
    }

    #[test]
    fn fills_interior_hole() {
        let w = 30;
        let mut fg = vec![0.0; w * w];
        disk(&mut fg, w, 15.0, 15.0, 8.0);
        fg[15 * w + 15] = 0.0;
        let m = morph_refine(&GrayMap::new(w, w, fg).unwrap(), &cfg());
        assert_eq!(m.instance_count(), 1);
        assert!(m.get(15, 15) > 0);
    }

    #[test]
    fn removes_specks() {
        let mut fg = vec![0.0; 100];
        fg[11] = 1.0;
        fg[12] = 1.0;
        let m = morph_refine(&GrayMap::new(10, 10, fg).unwrap(), &cfg());
        assert_eq!(m.instance_count(), 0);
    }

    #[test]
    fn splits_dumbbell() {
        let (w, h) = (60, 30);
        let mut fg = vec![0.0; w * h];
        disk(&mut fg, w, 15.0, 15.0, 9.0);
        disk(&mut fg, w, 15.0, 44.0, 9.0);
        for c in 24..36 {
            fg[15 * w + c] = 1.0;
            fg[16 * w + c] = 1.0;
        }
        let m = morph_refine(&GrayMap::new(w, h, fg).unwrap(), &cfg());
        assert_eq!(m.instance_count(), 2);
        assert_ne!(m.get(15, 15), m.get(15, 44));
    }

    #[test]
    fn splits_figure_eight() {
        // Tangent disks: solidity about 0.83 once digitized.
        let (w, h) = (40, 56);
        let mut fg = vec![0.0; w * h];
        disk(&mut fg, w, 15.0, 20.0, 10.0);
        disk(&mut fg, w, 35.0, 20.0, 10.0);
        let m = morph_refine(&GrayMap::new(w, h, fg).unwrap(), &cfg());
        assert_eq!(m.instance_count(), 2);
        assert_ne!(m.get(15, 20), m.get(35, 20));
    }

    #[test]
    fn keeps_convex_ellipse() {
        let (w, h) = (60, 40);
        let mut fg = vec![0.0; w * h];
        for r in 0..h {
            for c in 0..w {
                let (y, x) = ((r as f64 - 20.0) / 10.0, (c as f64 - 30.0) / 20.0);
                if x * x + y * y <= 1.0 {
                    fg[r * w + c] = 1.0;
                }
            }
        }
        let m = morph_refine(&GrayMap::new(w, h, fg.clone()).unwrap(), &cfg());
        assert_eq!(m.instance_count(), 1);
        assert_eq!(m.foreground().data(), &fg[..]);
    }

    #[test]
    fn keeps_crescent() {
        let (w, h) = (50, 50);
        let mut fg = vec![0.0; w * h];
        disk(&mut fg, w, 25.0, 25.0, 15.0);
        let mut bite = vec![0.0; w * h];
        disk(&mut bite, w, 25.0, 36.0, 12.0);
        for i in 0..w * h {
            if bite[i] > 0.0 {
                fg[i] = 0.0;
            }
        }
        let binary = GrayMap::new(w, h, fg).unwrap();
        let labeled = crate::components::connected_components(&binary);
        let px = &labeled.pixel_lists()[1];
        let props = props_of(1, px, w);
        assert!(props.solidity < 0.85);
        let pieces = split_concave(px, &props, w, &cfg());
        assert_eq!(pieces.len(), 1);
    }

    #[test]
    fn chord_is_four_connected() {
        let line = chord((0, 0), (5, 9));
        for pair in line.windows(2) {
            let d = (pair[0].0 - pair[1].0).abs() + (pair[0].1 - pair[1].1).abs();
            assert_eq!(d, 1);
        }
    }

    #[test]
    fn never_grows_foreground_beyond_filled_input() {
        let (w, h) = (60, 30);
        let mut fg = vec![0.0; w * h];
        disk(&mut fg, w, 15.0, 15.0, 9.0);
        disk(&mut fg, w, 15.0, 30.0, 9.0);
        let mut filled: Vec<bool> = fg.iter().map(|&v| v > 0.5).collect();
        fill_holes(&mut filled, w, h);
        let m = morph_refine(&GrayMap::new(w, h, fg).unwrap(), &cfg());
        for (i, &l) in m.labels().iter().enumerate() {
            assert!(l == 0 || filled[i]);
        }
    }
}
