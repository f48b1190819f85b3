//! Connected-component labeling and related binary morphology.

use crate::raster::{neighbors4, neighbors8, GrayMap, InstanceMask};

/// Labels maximal 8-connected foreground components (`v > 0.5`) with
/// consecutive labels in raster-scan order of each component's first pixel.
pub fn connected_components(binary: &GrayMap) -> InstanceMask {
    let (w, h) = binary.dims();
    let fg: Vec<bool> = (0..w * h).map(|i| binary.is_foreground(i)).collect();
    label_components(&fg, w, h)
}

pub(crate) fn label_components(fg: &[bool], w: usize, h: usize) -> InstanceMask {
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !fg[start] || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for (nr, nc) in neighbors8(i / w, i % w, h, w) {
                let j = nr * w + nc;
                if fg[j] && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
    }
    InstanceMask::new(w, h, labels).expect("dims preserved")
}

/// Splits every label into its 8-connected pieces and relabels consecutively.
pub fn split_disconnected(mask: &InstanceMask) -> InstanceMask {
    let (w, h) = mask.dims();
    let src = mask.labels();
    let mut labels = vec![0u32; w * h];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..w * h {
        let l = src[start];
        if l == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            for (nr, nc) in neighbors8(i / w, i % w, h, w) {
                let j = nr * w + nc;
                if src[j] == l && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
    }
    InstanceMask::new(w, h, labels).expect("dims preserved")
}

/// Fills background regions that do not reach the raster border.
///
/// Background connectivity is 4, the dual of 8-connected foreground.
pub fn fill_holes(fg: &mut [bool], w: usize, h: usize) {
    let mut outside = vec![false; w * h];
    let mut stack: Vec<usize> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            if (r == 0 || c == 0 || r == h - 1 || c == w - 1) && !fg[r * w + c] {
                outside[r * w + c] = true;
                stack.push(r * w + c);
            }
        }
    }
    while let Some(i) = stack.pop() {
        for (nr, nc) in neighbors4(i / w, i % w, h, w) {
            let j = nr * w + nc;
            if !fg[j] && !outside[j] {
                outside[j] = true;
                stack.push(j);
            }
        }
    }
    for i in 0..w * h {
        if !outside[i] {
            fg[i] = true;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map(w: usize, h: usize, v: &[u8]) -> GrayMap {
        GrayMap::new(w, h, v.iter().map(|&x| x as f64).collect()).unwrap()
    }

    #[test]
    fn all_zero_has_no_instances() {
        assert_eq!(connected_components(&GrayMap::zeros(4, 3)).instance_count(), 0);
    }

    #[test]
    fn diagonal_pixels_join() {
        let m = connected_components(&map(2, 2, &[1, 0, 0, 1]));
        assert_eq!(m.instance_count(), 1);
    }

    #[test]
    fn zero_column_separates_two_blobs() {
        #[rustfmt::skip]
        let m = connected_components(&map(5, 5, &[
            1, 1, 0, 1, 1,
            1, 1, 0, 1, 1,
            0, 1, 0, 1, 0,
            1, 1, 0, 0, 1,
            0, 0, 0, 1, 1,
        ]));
        assert_eq!(m.instance_count(), 2);
        assert_eq!(m.get(0, 0), m.get(3, 0));
        assert_ne!(m.get(0, 0), m.get(4, 4));
    }

    #[test]
    fn fill_single_hole() {
        let mut fg = vec![true; 9];
        fg[4] = false;
        fill_holes(&mut fg, 3, 3);
        assert!(fg.iter().all(|&b| b));
        let mut open = vec![true, false, true, true, true, true, true, true, true];
        fill_holes(&mut open, 3, 3);
        assert!(!open[1]);
    }

    proptest! {
        #[test]
        fn relabel_reproduces_partition(bits in proptest::collection::vec(0u8..2, 64)) {
            let m1 = connected_components(&map(8, 8, &bits));
            let m2 = connected_components(&m1.foreground());
            prop_assert_eq!(&m1, &m2);
            prop_assert!(m1.labels_are_connected());
        }
    }
}
