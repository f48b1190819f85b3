//! Marker-controlled priority-flood watershed with one-pixel dividing lines.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::log::SeedSet;
use crate::raster::{neighbors8, Heatmap, InstanceMask};

/// Surface the basins are flooded on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Elevation {
    /// `1 - p`.
    #[default]
    Complement,
    /// Sobel gradient magnitude of `p`.
    Gradient,
}

fn elevation(p: &Heatmap, mode: Elevation) -> Vec<f64> {
    match mode {
        Elevation::Complement => p.data().iter().map(|v| 1.0 - v).collect(),
        Elevation::Gradient => {
            let (w, h) = p.dims();
            let at = |r: isize, c: isize| {
                p.get(r.clamp(0, h as isize - 1) as usize, c.clamp(0, w as isize - 1) as usize)
            };
            let mut out = vec![0.0; w * h];
            for r in 0..h as isize {
                for c in 0..w as isize {
                    let gx = at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1)
                        - at(r - 1, c - 1)
                        - 2.0 * at(r, c - 1)
                        - at(r + 1, c - 1);
                    let gy = at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1)
                        - at(r - 1, c - 1)
                        - 2.0 * at(r - 1, c)
                        - at(r - 1, c + 1);
                    out[r as usize * w + c as usize] = (gx * gx + gy * gy).sqrt();
                }
            }
            out
        }
    }
}

#[derive(PartialEq)]
struct Item {
    level: f64,
    order: u64,
    idx: usize,
}

impl Eq for Item {}

impl Ord for Item {
    // Min-heap on level, first-in first-out among equal levels.
    fn cmp(&self, other: &Self) -> Ordering {
        other.level.total_cmp(&self.level).then(other.order.cmp(&self.order))
    }
}

impl PartialOrd for Item {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Floods from each seed over pixels with `p >= floor`. A pixel reached by
/// two basins becomes background, so distinct basins never touch, even
/// diagonally. Seeds on pixels below the floor, or on a pixel already taken
/// by an earlier seed, start no basin.
pub fn watershed_refine(p: &Heatmap, seeds: &SeedSet, floor: f64, mode: Elevation) -> InstanceMask {
    let (w, h) = p.dims();
    let elev = elevation(p, mode);
    let open: Vec<bool> = p.data().iter().map(|&v| v >= floor).collect();
    const NONE: u32 = 0;
    const LINE: u32 = u32::MAX;
    let mut label = vec![NONE; w * h];
    let mut queued = vec![false; w * h];
    let mut heap = BinaryHeap::new();
    let mut order = 0u64;
    let mut next = 1u32;
    for s in &seeds.seeds {
        let i = s.row * w + s.col;
        if !open[i] || label[i] != NONE {
            continue;
        }
        label[i] = next;
        next += 1;
        queued[i] = true;
    }
    for i in 0..w * h {
        if label[i] != NONE && label[i] != LINE {
            for (r, c) in neighbors8(i / w, i % w, h, w) {
                let j = r * w + c;
                if open[j] && !queued[j] {
                    queued[j] = true;
                    heap.push(Item { level: elev[j], order, idx: j });
                    order += 1;
                }
            }
        }
    }
    while let Some(Item { idx, .. }) = heap.pop() {
        let mut found = NONE;
        let mut conflict = false;
        for (r, c) in neighbors8(idx / w, idx % w, h, w) {
            let l = label[r * w + c];
            if l == NONE || l == LINE {
                continue;
            }
            if found == NONE {
                found = l;
            } else if found != l {
                conflict = true;
            }
        }
        if conflict || found == NONE {
            label[idx] = LINE;
            continue;
        }
        label[idx] = found;
        for (r, c) in neighbors8(idx / w, idx % w, h, w) {
            let j = r * w + c;
            if open[j] && !queued[j] {
                queued[j] = true;
                heap.push(Item { level: elev[j].max(elev[idx]), order, idx: j });
                order += 1;
            }
        }
    }
    let labels = label.into_iter().map(|l| if l == LINE { 0 } else { l }).collect();
    InstanceMask::new(w, h, labels).expect("dims preserved")
}
