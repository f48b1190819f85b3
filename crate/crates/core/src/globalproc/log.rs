//! Multi-scale Laplacian-of-Gaussian blob seeds.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::raster::{reflect_index, Heatmap};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub row: usize,
    pub col: usize,
    pub sigma: f64,
    pub response: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeedSet {
    pub seeds: Vec<Seed>,
}

impl SeedSet {
    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    /// CSV with header `row,col,sigma,response`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "row,col,sigma,response")?;
        for s in &self.seeds {
            writeln!(out, "{},{},{},{}", s.row, s.col, s.sigma, s.response)?;
        }
        Ok(())
    }
}

/// `steps` geometrically spaced scales from `lo` to `hi` inclusive.
pub fn sigma_ladder(lo: f64, hi: f64, steps: usize) -> Vec<f64> {
    if steps <= 1 {
        return vec![lo];
    }
    (0..steps).map(|k| lo * (hi / lo).powf(k as f64 / (steps - 1) as f64)).collect()
}

fn gaussian_kernels(sigma: f64) -> (Vec<f64>, Vec<f64>) {
    let radius = (4.0 * sigma).ceil() as isize;
    let s2 = sigma * sigma;
    let g: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * s2)).exp()).collect();
    let norm: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / norm).collect();
    let mut d2: Vec<f64> =
        (-radius..=radius).zip(&g).map(|(x, v)| v * ((x * x) as f64 - s2) / (s2 * s2)).collect();
    // Zero sum so flat regions respond with exactly nothing.
    let mean = d2.iter().sum::<f64>() / d2.len() as f64;
    d2.iter_mut().for_each(|v| *v -= mean);
    (g, d2)
}

fn convolve_rows(data: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        let src = &data[y * w..(y + 1) * w];
        for (x, o) in row.iter_mut().enumerate() {
            *o = k.iter().enumerate().map(|(i, kv)| kv * src[reflect_index(x as isize + i as isize - r, w)]).sum();
        }
    });
    out
}

fn convolve_cols(data: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let r = (k.len() / 2) as isize;
    let mut out = vec![0.0; w * h];
    out.par_chunks_mut(w).enumerate().for_each(|(y, row)| {
        for (i, kv) in k.iter().enumerate() {
            let src = &data[reflect_index(y as isize + i as isize - r, h) * w..][..w];
            for (o, s) in row.iter_mut().zip(src) {
                *o += kv * s;
            }
        }
    });
    out
}

/// `-sigma^2 * LoG(sigma) * p`, so bright blobs respond positively.
pub fn log_response(p: &Heatmap, sigma: f64) -> Vec<f64> {
    let (w, h) = p.dims();
    let (g, d2) = gaussian_kernels(sigma);
    let gx = convolve_rows(p.data(), w, h, &g);
    let dxx = convolve_rows(p.data(), w, h, &d2);
    let a = convolve_cols(&dxx, w, h, &g);
    let b = convolve_cols(&gx, w, h, &d2);
    a.iter().zip(&b).map(|(x, y)| -sigma * sigma * (x + y)).collect()
}

/// Local maxima of the scale-normalized LoG over position and scale with
/// response above `threshold`. Maxima closer than the larger of their two
/// scales are merged, keeping the stronger.
pub fn detect_log_maxima(p: &Heatmap, sigmas: &[f64], threshold: f64) -> SeedSet {
    let (w, h) = p.dims();
    let stack: Vec<Vec<f64>> = sigmas.par_iter().map(|&s| log_response(p, s)).collect();
    let mut found = Vec::new();
    for (k, layer) in stack.iter().enumerate() {
        for r in 0..h {
            for c in 0..w {
                let v = layer[r * w + c];
                if v <= threshold {
                    continue;
                }
                let mut is_max = true;
                'scan: for kk in k.saturating_sub(1)..(k + 2).min(stack.len()) {
                    for rr in r.saturating_sub(1)..(r + 2).min(h) {
                        for cc in c.saturating_sub(1)..(c + 2).min(w) {
                            if stack[kk][rr * w + cc] > v {
                                is_max = false;
                                break 'scan;
                            }
                        }
                    }
                }
                if is_max {
                    found.push(Seed { row: r, col: c, sigma: sigmas[k], response: v });
                }
            }
        }
    }
    found.sort_by(|a, b| {
        b.response.total_cmp(&a.response).then((a.row, a.col).cmp(&(b.row, b.col))).then(a.sigma.total_cmp(&b.sigma))
    });
    let mut kept: Vec<Seed> = Vec::new();
    for s in found {
        let close = kept.iter().any(|k| {
            let d2 = (k.row as f64 - s.row as f64).powi(2) + (k.col as f64 - s.col as f64).powi(2);
            d2 < k.sigma.max(s.sigma).powi(2)
        });
        if !close {
            kept.push(s);
        }
    }
    SeedSet { seeds: kept }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bump(w: usize, h: usize, centers: &[(f64, f64)], s: f64) -> Heatmap {
        let mut data = vec![0.0; w * h];
        for r in 0..h {
            for c in 0..w {
                let v: f64 = centers
                    .iter()
                    .map(|(cr, cc)| (-((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)) / (2.0 * s * s)).exp())
                    .sum();
                data[r * w + c] = v.min(1.0);
            }
        }
        Heatmap::new(w, h, data).unwrap()
    }

    #[test]
    fn ladder_is_geometric() {
        let l = sigma_ladder(2.0, 10.0, 8);
        assert_eq!(l.len(), 8);
        assert!((l[0] - 2.0).abs() < 1e-12 && (l[7] - 10.0).abs() < 1e-12);
        let ratio = l[1] / l[0];
        assert!(l.windows(2).all(|p| (p[1] / p[0] - ratio).abs() < 1e-12));
    }

    #[test]
    fn zero_map_has_no_seeds() {
        let p = Heatmap::zeros(40, 30);
        assert!(detect_log_maxima(&p, &sigma_ladder(2.0, 10.0, 8), 0.05).is_empty());
    }

    #[test]
    fn center_response_matches_analytic_form() {
        // For a unit-height Gaussian of std s, the normalized response at its
        // center is 2 s^2 t^2 / (s^2 + t^2)^2 at scale t.
        let s = 4.0;
        let p = bump(81, 81, &[(40.0, 40.0)], s);
        for t in [2.0, 4.0, 6.0] {
            let got = log_response(&p, t)[40 * 81 + 40];
            let want = 2.0 * s * s * t * t / (s * s + t * t).powi(2);
            assert!((got - want).abs() < 0.01, "t {t}: {got} vs {want}");
        }
    }

    #[test]
    fn single_bump_scale_matches_its_width() {
        let ladder = sigma_ladder(2.0, 10.0, 8);
        let step = ladder[1] / ladder[0];
        for s in [3.0, 5.0] {
            let p = bump(90, 90, &[(45.0, 45.0)], s);
            let seeds = detect_log_maxima(&p, &ladder, 0.05);
            assert_eq!(seeds.len(), 1, "s {s}: {seeds:?}");
            let seed = seeds.seeds[0];
            assert_eq!((seed.row, seed.col), (45, 45));
            assert!(seed.sigma >= s / step - 1e-9 && seed.sigma <= s * step + 1e-9, "{}", seed.sigma);
        }
    }

    #[test]
    fn separated_bumps_give_two_seeds() {
        let s = 3.0;
        let p = bump(100, 60, &[(30.0, 25.0), (30.0, 25.0 + 5.0 * s * 2.0)], s);
        let seeds = detect_log_maxima(&p, &sigma_ladder(2.0, 10.0, 8), 0.05);
        assert_eq!(seeds.len(), 2);
        assert!(seeds.seeds.iter().all(|x| x.row < 60 && x.col < 100));
    }

    #[test]
    fn csv_has_header_and_rows() {
        let set = SeedSet { seeds: vec![Seed { row: 1, col: 2, sigma: 3.0, response: 0.5 }] };
        let mut out = Vec::new();
        set.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "row,col,sigma,response\n1,2,3,0.5\n");
    }
}
