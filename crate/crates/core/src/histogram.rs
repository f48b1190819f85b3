use crate::error::{Error, Result};

pub const BINS: usize = 256;

/// 256-bin histogram over `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram256 {
    bins: [u64; BINS],
    total: u64,
}

impl Histogram256 {
    /// Bins values with `bin = floor(v * 256)` clamped to 255, so `1.0`
    /// lands in the last bin and each bin spans `1/256`.
    pub fn from_values<I: IntoIterator<Item = f64>>(values: I) -> Result<Self> {
        let mut bins = [0u64; BINS];
        let mut total = 0;
        for v in values {
            bins[bin_of(v)] += 1;
            total += 1;
        }
        if total == 0 {
            return Err(Error::EmptyPatch);
        }
        Ok(Self { bins, total })
    }

    /// Builds directly from counts; fails when every count is zero.
    pub fn from_counts(bins: [u64; BINS]) -> Result<Self> {
        let total = bins.iter().sum();
        if total == 0 {
            return Err(Error::EmptyPatch);
        }
        Ok(Self { bins, total })
    }

    pub fn bins(&self) -> &[u64; BINS] {
        &self.bins
    }

    pub fn total(&self) -> u64 {
        self.total
    }
}

pub fn bin_of(v: f64) -> usize {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    ((v * BINS as f64) as usize).min(BINS - 1)
}

/// Histogram of a gray patch.
pub fn build_histogram(patch: &crate::raster::GrayMap) -> Result<Histogram256> {
    Histogram256::from_values(patch.data().iter().copied())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::raster::GrayMap;
    use proptest::prelude::*;

    #[test]
    fn constant_patch_single_bin() {
        let h = build_histogram(&GrayMap::new(3, 3, vec![0.4; 9]).unwrap()).unwrap();
        assert_eq!(h.bins().iter().filter(|&&c| c > 0).count(), 1);
    }

    #[test]
    fn extremes_hit_end_bins() {
        let h = build_histogram(&GrayMap::new(2, 1, vec![0.0, 1.0]).unwrap()).unwrap();
        assert_eq!(h.bins()[0], 1);
        assert_eq!(h.bins()[255], 1);
    }

    #[test]
    fn uniform_ramp_fills_every_bin_once() {
        let ramp: Vec<f64> = (0..256).map(|i| i as f64 / 255.0).collect();
        let h = build_histogram(&GrayMap::new(256, 1, ramp).unwrap()).unwrap();
        assert!(h.bins().iter().all(|&c| c == 1));
    }

    #[test]
    fn empty_patch_errors() {
        assert!(matches!(build_histogram(&GrayMap::zeros(0, 0)), Err(Error::EmptyPatch)));
    }

    proptest! {
        #[test]
        fn total_is_conserved(vals in proptest::collection::vec(-0.5..1.5f64, 1..300)) {
            let h = Histogram256::from_values(vals.iter().copied()).unwrap();
            prop_assert_eq!(h.total(), vals.len() as u64);
            prop_assert_eq!(h.bins().iter().sum::<u64>(), vals.len() as u64);
        }
    }
}
