//! Raster containers shared by every stage.
//!
//! All rasters are row-major. Color rasters interleave their three channels
//! per pixel (`[r, g, b, r, g, b, ...]`).

use crate::error::{Error, Result};

/// Three-channel raster with every value in `[0, 1]`.
///
/// Holds the input tile, the hematoxylin-only reconstruction, and (after
/// [`crate::color::rgb_to_hsi`]) HSI triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbTile {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl RgbTile {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::EmptyRaster);
        }
        if data.len() != width * height * 3 {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: (data.len() / 3 / height.max(1), height),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(*v));
        }
        Ok(Self { width, height, data })
    }

    /// Builds a tile from raw values, clamping each into `[0, 1]`.
    pub fn from_clamped(width: usize, height: usize, mut data: Vec<f64>) -> Result<Self> {
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self::new(width, height, data)
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<Self> {
        let data = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, data)
    }

    /// Converts an 8-bit RGB buffer by dividing each value by 255.
    pub fn from_u8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(width, height, bytes.iter().map(|&b| b as f64 / 255.0).collect())
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f64; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn pixels(&self) -> impl Iterator<Item = [f64; 3]> + '_ {
        self.data.chunks_exact(3).map(|c| [c[0], c[1], c[2]])
    }

    /// Extracts a single channel as a [`GrayMap`].
    pub fn channel(&self, c: usize) -> GrayMap {
        assert!(c < 3);
        GrayMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().skip(c).step_by(3).copied().collect(),
        }
    }

    /// Copies the rectangle `[top, top+h) x [left, left+w)`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> RgbTile {
        let mut data = Vec::with_capacity(h * w * 3);
        for r in top..top + h {
            let start = (r * self.width + left) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        RgbTile { width: w, height: h, data }
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data.iter().map(|v| (v * 255.0).round() as u8).collect()
    }
}

/// Single-channel real raster.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayMap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl GrayMap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: (data.len(), 1),
            });
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: f64) {
        self.data[row * self.width + col] = v;
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> GrayMap {
        let mut data = Vec::with_capacity(h * w);
        for r in top..top + h {
            let start = r * self.width + left;
            data.extend_from_slice(&self.data[start..start + w]);
        }
        GrayMap { width: w, height: h, data }
    }

    /// Binary foreground indicator: `v > 0.5`.
    pub fn is_foreground(&self, idx: usize) -> bool {
        self.data[idx] > 0.5
    }
}

/// Per-pixel foreground probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: (data.len(), 1),
            });
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::OutOfRange(*v));
        }
        Ok(Self { width, height, data })
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    /// Binary map of `p >= threshold`.
    pub fn threshold(&self, threshold: f64) -> GrayMap {
        GrayMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&p| if p >= threshold { 1.0 } else { 0.0 }).collect(),
        }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

/// Integer-labeled raster. Label 0 is background.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct InstanceMask {
    width: usize,
    height: usize,
    labels: Vec<u32>,
}

impl InstanceMask {
    pub fn new(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: (width, height),
                found: (labels.len(), 1),
            });
        }
        Ok(Self { width, height, labels })
    }

    pub fn empty(width: usize, height: usize) -> Self {
        Self { width, height, labels: vec![0; width * height] }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u32] {
        &mut self.labels
    }

    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.labels[row * self.width + col]
    }

    pub fn set(&mut self, row: usize, col: usize, label: u32) {
        self.labels[row * self.width + col] = label;
    }

    pub fn max_label(&self) -> u32 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Sorted list of distinct positive labels.
    pub fn instance_ids(&self) -> Vec<u32> {
        let mut seen = vec![false; self.max_label() as usize + 1];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (1..seen.len()).filter(|&l| seen[l]).map(|l| l as u32).collect()
    }

    pub fn instance_count(&self) -> usize {
        self.instance_ids().len()
    }

    /// Binary foreground map (`1.0` where label > 0).
    pub fn foreground(&self) -> GrayMap {
        GrayMap {
            width: self.width,
            height: self.height,
            data: self.labels.iter().map(|&l| if l > 0 { 1.0 } else { 0.0 }).collect(),
        }
    }

    /// Pixel indices of every instance, indexed by label.
    pub fn pixel_lists(&self) -> Vec<Vec<usize>> {
        let mut lists = vec![Vec::new(); self.max_label() as usize + 1];
        for (i, &l) in self.labels.iter().enumerate() {
            if l > 0 {
                lists[l as usize].push(i);
            }
        }
        lists
    }

    /// Renumbers instances to `1..=n` in order of first appearance.
    pub fn relabel_sequential(&self) -> InstanceMask {
        let mut map = vec![0u32; self.max_label() as usize + 1];
        let mut next = 0;
        let labels = self
            .labels
            .iter()
            .map(|&l| {
                if l == 0 {
                    return 0;
                }
                if map[l as usize] == 0 {
                    next += 1;
                    map[l as usize] = next;
                }
                map[l as usize]
            })
            .collect();
        InstanceMask { width: self.width, height: self.height, labels }
    }

    /// True when every positive label forms a single 8-connected component.
    pub fn labels_are_connected(&self) -> bool {
        let lists = self.pixel_lists();
        let mut visited = vec![false; self.labels.len()];
        for (label, pixels) in lists.iter().enumerate().skip(1) {
            let Some(&start) = pixels.first() else { continue };
            let mut stack = vec![start];
            visited[start] = true;
            let mut reached = 0;
            while let Some(i) = stack.pop() {
                reached += 1;
                let (r, c) = (i / self.width, i % self.width);
                for (nr, nc) in neighbors8(r, c, self.height, self.width) {
                    let j = nr * self.width + nc;
                    if !visited[j] && self.labels[j] == label as u32 {
                        visited[j] = true;
                        stack.push(j);
                    }
                }
            }
            if reached != pixels.len() {
                return false;
            }
        }
        true
    }
}

/// In-bounds 8-neighbors of `(r, c)`.
pub fn neighbors8(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    const OFFSETS: [(isize, isize); 8] =
        [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
    OFFSETS.into_iter().filter_map(move |(dr, dc)| {
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w)
            .then_some((nr as usize, nc as usize))
    })
}

/// In-bounds 4-neighbors of `(r, c)`.
pub fn neighbors4(r: usize, c: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    const OFFSETS: [(isize, isize); 4] = [(-1, 0), (0, -1), (0, 1), (1, 0)];
    OFFSETS.into_iter().filter_map(move |(dr, dc)| {
        let nr = r as isize + dr;
        let nc = c as isize + dc;
        (nr >= 0 && nc >= 0 && (nr as usize) < h && (nc as usize) < w)
            .then_some((nr as usize, nc as usize))
    })
}

/// Symmetric (edge-repeating) reflection of an out-of-range index into `0..n`.
pub fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let mut m = i.rem_euclid(period);
    if m >= n {
        m = period - 1 - m;
    }
    m as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_out_of_range_values() {
        assert!(matches!(RgbTile::new(1, 1, vec![0.0, 1.5, 0.0]), Err(Error::OutOfRange(_))));
        assert!(RgbTile::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn reflect_index_folds() {
        assert_eq!(reflect_index(-1, 5), 0);
        assert_eq!(reflect_index(-2, 5), 1);
        assert_eq!(reflect_index(5, 5), 4);
        assert_eq!(reflect_index(6, 5), 3);
        assert_eq!(reflect_index(-3, 1), 0);
        assert_eq!(reflect_index(12, 3), 0);
    }

    #[test]
    fn relabel_is_sequential() {
        let m = InstanceMask::new(3, 1, vec![7, 0, 3]).unwrap();
        assert_eq!(m.relabel_sequential().labels(), &[1, 0, 2]);
        assert_eq!(m.instance_ids(), vec![3, 7]);
    }

    #[test]
    fn connectivity_check() {
        let ok = InstanceMask::new(2, 2, vec![1, 0, 0, 1]).unwrap();
        assert!(ok.labels_are_connected());
        let split = InstanceMask::new(3, 1, vec![1, 0, 1]).unwrap();
        assert!(!split.labels_are_connected());
    }
}
