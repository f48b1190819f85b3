//! HSI color conversion (arccos hue formulation).

use std::f64::consts::PI;

use rayon::prelude::*;

use crate::raster::RgbTile;

/// Converts one RGB triplet to `(H, S, I)`, each in `[0, 1]`.
///
/// Achromatic and black pixels get `H = 0`; black pixels also get `S = 0`.
pub fn hsi_pixel([r, g, b]: [f64; 3]) -> [f64; 3] {
    let i = (r + g + b) / 3.0;
    if i <= 0.0 {
        return [0.0, 0.0, 0.0];
    }
    let min = r.min(g).min(b);
    let s = (1.0 - min / i).clamp(0.0, 1.0);
    let num = 0.5 * ((r - g) + (r - b));
    let den = ((r - g) * (r - g) + (r - b) * (g - b)).sqrt();
    let h = if den <= 1e-12 {
        0.0
    } else {
        let theta = (num / den).clamp(-1.0, 1.0).acos();
        let h = if b <= g { theta } else { 2.0 * PI - theta };
        // 2π wraps to 0
        let h = h / (2.0 * PI);
        if h >= 1.0 {
            0.0
        } else {
            h
        }
    };
    [h, s, i]
}

/// Pixel-wise RGB to HSI. The output reuses [`RgbTile`] with channels `(H, S, I)`.
pub fn rgb_to_hsi(tile: &RgbTile) -> RgbTile {
    let data: Vec<f64> = tile
        .data()
        .par_chunks_exact(3)
        .flat_map_iter(|c| hsi_pixel([c[0], c[1], c[2]]))
        .collect();
    RgbTile::new(tile.width(), tile.height(), data).expect("HSI values are in [0, 1]")
}

/// Channel mean `(R + G + B) / 3` per pixel.
pub fn intensity(tile: &RgbTile) -> Vec<f64> {
    tile.pixels().map(|[r, g, b]| (r + g + b) / 3.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn achromatic_and_black() {
        assert_eq!(hsi_pixel([0.5, 0.5, 0.5]), [0.0, 0.0, 0.5]);
        assert_eq!(hsi_pixel([0.0, 0.0, 0.0]), [0.0, 0.0, 0.0]);
    }

    #[test]
    fn pure_red() {
        let [h, s, i] = hsi_pixel([1.0, 0.0, 0.0]);
        assert_eq!(h, 0.0);
        assert!((s - 1.0).abs() < 1e-12);
        assert!((i - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn primaries_are_a_third_apart() {
        let [hg, ..] = hsi_pixel([0.0, 1.0, 0.0]);
        let [hb, ..] = hsi_pixel([0.0, 0.0, 1.0]);
        assert!((hg - 1.0 / 3.0).abs() < 1e-12);
        assert!((hb - 2.0 / 3.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn intensity_is_channel_mean(r in 0.0..=1.0f64, g in 0.0..=1.0f64, b in 0.0..=1.0f64) {
            let tile = RgbTile::new(1, 1, vec![r, g, b]).unwrap();
            let hsi = rgb_to_hsi(&tile);
            prop_assert_eq!(hsi.pixel(0, 0)[2], (r + g + b) / 3.0);
            let [h, s, _] = hsi.pixel(0, 0);
            prop_assert!((0.0..1.0).contains(&h));
            prop_assert!((0.0..=1.0).contains(&s));
        }
    }
}
