//! Per-instance geometry.

use crate::raster::InstanceMask;

#[derive(Debug, Clone, PartialEq)]
pub struct RegionProps {
    pub label: u32,
    pub area: usize,
    /// `(row, col)` of the pixel-center mean.
    pub centroid: (f64, f64),
    /// `(top, left, bottom, right)`, bottom/right exclusive.
    pub bbox: (usize, usize, usize, usize),
    /// Area over the area of the convex hull of the pixel squares.
    pub solidity: f64,
}

/// One record per positive label, in ascending label order.
pub fn region_props(mask: &InstanceMask) -> Vec<RegionProps> {
    let w = mask.width();
    mask.pixel_lists()
        .into_iter()
        .enumerate()
        .filter(|(_, px)| !px.is_empty())
        .map(|(label, px)| props_of(label as u32, &px, w))
        .collect()
}

/// Props of a pixel set given as raster indices into a width-`w` grid.
pub fn props_of(label: u32, pixels: &[usize], w: usize) -> RegionProps {
    let area = pixels.len();
    let (mut sr, mut sc) = (0.0, 0.0);
    let (mut top, mut left, mut bottom, mut right) = (usize::MAX, usize::MAX, 0, 0);
    for &i in pixels {
        let (r, c) = (i / w, i % w);
        sr += r as f64;
        sc += c as f64;
        top = top.min(r);
        left = left.min(c);
        bottom = bottom.max(r + 1);
        right = right.max(c + 1);
    }
    let hull = convex_hull(&pixel_corners(pixels, w));
    let hull_area = polygon_area(&hull);
    let solidity = if hull_area > 0.0 { (area as f64 / hull_area).min(1.0) } else { 1.0 };
    RegionProps {
        label,
        area,
        centroid: (sr / area as f64, sc / area as f64),
        bbox: (top, left, bottom, right),
        solidity,
    }
}

/// Corner points `(row, col)` of every pixel square, deduplicated per row run.
pub fn pixel_corners(pixels: &[usize], w: usize) -> Vec<(i64, i64)> {
    // Only the extreme columns of each row can be hull vertices.
    let mut rows: std::collections::BTreeMap<usize, (usize, usize)> = Default::default();
    for &i in pixels {
        let (r, c) = (i / w, i % w);
        let e = rows.entry(r).or_insert((c, c));
        e.0 = e.0.min(c);
        e.1 = e.1.max(c);
    }
    let mut pts = Vec::with_capacity(rows.len() * 4);
    for (r, (c0, c1)) in rows {
        let (r, c0, c1) = (r as i64, c0 as i64, c1 as i64);
        pts.extend([(r, c0), (r, c1 + 1), (r + 1, c0), (r + 1, c1 + 1)]);
    }
    pts
}

/// Andrew's monotone chain. Returns vertices counter-clockwise without
/// collinear points.
pub fn convex_hull(points: &[(i64, i64)]) -> Vec<(i64, i64)> {
    let mut pts = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    fn cross(o: (i64, i64), a: (i64, i64), b: (i64, i64)) -> i64 {
        (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
    }
    let mut hull: Vec<(i64, i64)> = Vec::with_capacity(2 * pts.len());
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// Shoelace area (absolute).
pub fn polygon_area(poly: &[(i64, i64)]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let twice: i64 = (0..poly.len())
        .map(|i| {
            let (a, b) = (poly[i], poly[(i + 1) % poly.len()]);
            a.0 * b.1 - b.0 * a.1
        })
        .sum();
    twice.abs() as f64 / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask_from(w: usize, h: usize, on: &[(usize, usize)]) -> InstanceMask {
        let mut m = InstanceMask::empty(w, h);
        for &(r, c) in on {
            m.set(r, c, 1);
        }
        m
    }

    #[test]
    fn single_pixel() {
        let p = &region_props(&mask_from(3, 3, &[(1, 1)]))[0];
        assert_eq!(p.area, 1);
        assert_eq!(p.solidity, 1.0);
        assert_eq!(p.bbox, (1, 1, 2, 2));
    }

    #[test]
    fn filled_square() {
        let on: Vec<_> = (1..4).flat_map(|r| (1..4).map(move |c| (r, c))).collect();
        let p = &region_props(&mask_from(5, 5, &on))[0];
        assert_eq!(p.area, 9);
        assert_eq!(p.centroid, (2.0, 2.0));
        assert!((p.solidity - 1.0).abs() < 1e-9);
    }

    #[test]
    fn l_tromino_against_explicit_polygon() {
        let p = &region_props(&mask_from(3, 3, &[(0, 0), (1, 0), (1, 1)]))[0];
        // Hull of the pixel squares, listed by hand: (0,0) (0,1) (1,2) (2,2) (2,0).
        let hand = [(0i64, 0i64), (0, 1), (1, 2), (2, 2), (2, 0)];
        let mut twice = 0i64;
        for i in 0..hand.len() {
            let (a, b) = (hand[i], hand[(i + 1) % hand.len()]);
            twice += a.0 * b.1 - b.0 * a.1;
        }
        let hull_area = twice.abs() as f64 / 2.0;
        assert_eq!(hull_area, 3.5);
        assert!((p.solidity - 3.0 / hull_area).abs() < 1e-12);
    }

    #[test]
    fn rectangles_are_fully_solid() {
        for (h, w) in [(1, 5), (2, 7), (4, 4), (6, 3)] {
            let on: Vec<_> = (0..h).flat_map(|r| (0..w).map(move |c| (r, c))).collect();
            let p = &region_props(&mask_from(8, 8, &on))[0];
            assert!((p.solidity - 1.0).abs() < 1e-9);
        }
    }
}
