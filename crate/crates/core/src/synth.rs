//! Seeded synthetic H&E-like tiles with exact instance ground truth.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::{neighbors8, InstanceMask, RgbTile};

/// Placement tries per nucleus before giving up on it.
const PLACEMENT_ATTEMPTS: usize = 300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    /// Inclusive range of requested nuclei.
    pub count: (usize, usize),
    /// Semi-major axis range in pixels.
    pub radius: (f64, f64),
    pub eccentricity: (f64, f64),
    pub hematoxylin: [f64; 3],
    pub eosin: [f64; 3],
    /// Uniform per-channel color jitter, applied per nucleus and per tile
    /// background.
    pub color_jitter: f64,
    /// 1 paints nuclei in the full hematoxylin color, 0 makes them invisible.
    pub nucleus_contrast: f64,
    /// Relative amplitude of slow variation in background eosin density.
    pub stroma_variation: f64,
    pub noise_sigma: f64,
    pub blur_sigma: f64,
    /// Chance that a nucleus is placed overlapping an earlier, still single
    /// one, forming a pair.
    pub overlap_prob: f64,
    /// Center distance of a pair as a fraction of the summed semi-major axes.
    /// Values near 1 give a thin neck, smaller values a deep overlap.
    pub pair_distance: (f64, f64),
    /// Minimum clearance between non-overlapping nuclei.
    pub gap: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            width: 256,
            height: 256,
            count: (30, 40),
            radius: (5.0, 8.0),
            eccentricity: (0.0, 0.6),
            hematoxylin: [0.35, 0.25, 0.55],
            eosin: [0.92, 0.75, 0.80],
            color_jitter: 0.05,
            nucleus_contrast: 1.0,
            stroma_variation: 0.3,
            noise_sigma: 0.03,
            blur_sigma: 0.8,
            overlap_prob: 0.0,
            pair_distance: (0.55, 0.85),
            gap: 3.0,
            seed: 0,
        }
    }
}

impl SceneSpec {
    /// Low jitter, no overlap.
    pub fn easy(seed: u64) -> Self {
        Self { color_jitter: 0.02, noise_sigma: 0.02, seed, ..Self::default() }
    }

    /// Mostly overlapping pairs that form dumbbells.
    pub fn dumbbell(seed: u64) -> Self {
        Self {
            count: (24, 30),
            eccentricity: (0.0, 0.3),
            overlap_prob: 0.7,
            pair_distance: (0.85, 1.0),
            ..Self::easy(seed)
        }
    }

    /// Half-contrast nuclei.
    pub fn faint(seed: u64) -> Self {
        Self { nucleus_contrast: 0.5, ..Self::easy(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.width == 0 || self.height == 0 {
            return bad("tile size must be positive");
        }
        if self.count.0 > self.count.1 {
            return bad("count range is reversed");
        }
        if !(self.radius.0 >= 2.0 && self.radius.0 <= self.radius.1) {
            return bad("radii must satisfy 2 <= min <= max");
        }
        if !(0.0 <= self.eccentricity.0 && self.eccentricity.0 <= self.eccentricity.1 && self.eccentricity.1 < 1.0) {
            return bad("eccentricity range must lie in [0, 1)");
        }
        let unit = |c: &[f64; 3]| c.iter().all(|v| (0.0..=1.0).contains(v));
        if !unit(&self.hematoxylin) || !unit(&self.eosin) {
            return bad("colors must lie in [0, 1]");
        }
        let nonneg = [self.color_jitter, self.nucleus_contrast, self.noise_sigma, self.blur_sigma, self.gap];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) || !(0.0..=1.0).contains(&self.overlap_prob) {
            return bad("jitter, contrast, noise, blur and gap must be non-negative; overlap_prob in [0, 1]");
        }
        if !(0.0 < self.pair_distance.0 && self.pair_distance.0 <= self.pair_distance.1) {
            return bad("pair_distance must satisfy 0 < min <= max");
        }
        if !(0.0..1.0).contains(&self.stroma_variation) {
            return bad("stroma_variation must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTile {
    pub tile: RgbTile,
    pub mask: InstanceMask,
    pub requested: usize,
    pub placed: usize,
}

impl SynthTile {
    /// Fewer nuclei fit than were requested.
    pub fn shortfall(&self) -> bool {
        self.placed < self.requested
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    r: f64,
    c: f64,
    a: f64,
    b: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, row: f64, col: f64) -> bool {
        let (dy, dx) = (row - self.r, col - self.c);
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn pixels(&self, w: usize, h: usize) -> Vec<usize> {
        let r0 = (self.r - self.a).floor().max(0.0) as usize;
        let r1 = ((self.r + self.a).ceil() as usize).min(h - 1);
        let c0 = (self.c - self.a).floor().max(0.0) as usize;
        let c1 = ((self.c + self.a).ceil() as usize).min(w - 1);
        let mut out = Vec::new();
        for row in r0..=r1 {
            for col in c0..=c1 {
                if self.contains(row as f64, col as f64) {
                    out.push(row * w + col);
                }
            }
        }
        out
    }
}

fn connected(labels: &[u32], label: u32, w: usize, h: usize) -> bool {
    let Some(start) = labels.iter().position(|&l| l == label) else { return false };
    let total = labels.iter().filter(|&&l| l == label).count();
    let mut seen = vec![false; labels.len()];
    seen[start] = true;
    let mut stack = vec![start];
    let mut n = 0;
    while let Some(i) = stack.pop() {
        n += 1;
        for (r, c) in neighbors8(i / w, i % w, h, w) {
            let j = r * w + c;
            if !seen[j] && labels[j] == label {
                seen[j] = true;
                stack.push(j);
            }
        }
    }
    n == total
}

fn jitter(rng: &mut ChaCha8Rng, base: [f64; 3], amount: f64) -> [f64; 3] {
    base.map(|v| (v + if amount > 0.0 { rng.gen_range(-amount..=amount) } else { 0.0 }).clamp(0.0, 1.0))
}

/// `(row frequency, column frequency, phase)` of the stroma texture.
type Wave = (f64, f64, f64);

fn stroma_waves(rng: &mut ChaCha8Rng) -> Vec<Wave> {
    (0..4)
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::PI);
            let k = std::f64::consts::TAU / rng.gen_range(30.0..90.0);
            (k * angle.sin(), k * angle.cos(), rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect()
}

/// Smooth field in `[-1, 1]`.
fn stroma_field(waves: &[Wave], r: f64, c: f64) -> f64 {
    waves.iter().map(|&(fr, fc, ph)| (fr * r + fc * c + ph).sin()).sum::<f64>() / waves.len() as f64
}

fn blur(data: &mut [f64], w: usize, h: usize, sigma: f64) {
    if sigma <= 0.0 {
        return;
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / norm).collect();
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; data.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                tmp[(r * w + c) * 3 + ch] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * data[(r * w + clamp(c as isize + i as isize - radius, w)) * 3 + ch])
                    .sum();
            }
        }
    }
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                data[(r * w + c) * 3 + ch] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[(clamp(r as isize + i as isize - radius, h) * w + c) * 3 + ch])
                    .sum();
            }
        }
    }
}

/// Renders one tile. Nuclei that cannot be placed are skipped and reported
/// through [`SynthTile::shortfall`].
pub fn generate_tile(spec: &SceneSpec) -> Result<SynthTile> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let requested = rng.gen_range(spec.count.0..=spec.count.1);
    let mut labels = vec![0u32; w * h];
    let mut placed: Vec<Ellipse> = Vec::new();
    let mut colors: Vec<[f64; 3]> = Vec::new();
    let mut paired: Vec<bool> = Vec::new();
    let background = jitter(&mut rng, spec.eosin, spec.color_jitter);

    for _ in 0..requested {
        let single: Vec<usize> = (0..placed.len()).filter(|&k| !paired[k]).collect();
        let overlap = !single.is_empty() && rng.gen_bool(spec.overlap_prob);
        let mut accepted = None;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let a = rng.gen_range(spec.radius.0..=spec.radius.1);
            let e = rng.gen_range(spec.eccentricity.0..=spec.eccentricity.1);
            let b = (a * (1.0 - e * e).sqrt()).max(2.0);
            let theta = rng.gen_range(0.0..std::f64::consts::PI);
            let (r, c, partner) = if overlap {
                let k = single[rng.gen_range(0..single.len())];
                let p = placed[k];
                let d = rng.gen_range(spec.pair_distance.0..=spec.pair_distance.1) * (p.a + a);
                let phi = rng.gen_range(0.0..std::f64::consts::TAU);
                (p.r + d * phi.sin(), p.c + d * phi.cos(), Some(k))
            } else {
                (rng.gen_range(a..h as f64 - a), rng.gen_range(a..w as f64 - a), None)
            };
            if r < a || c < a || r > h as f64 - a || c > w as f64 - a {
                continue;
            }
            let cand = Ellipse { r, c, a, b, theta };
            let clear = placed.iter().enumerate().all(|(k, p)| {
                Some(k) == partner || ((p.r - r).powi(2) + (p.c - c).powi(2)).sqrt() >= p.a + a + spec.gap
            });
            if !clear {
                continue;
            }
            let px = cand.pixels(w, h);
            let label = placed.len() as u32 + 1;
            let mut trial = labels.clone();
            for &i in &px {
                trial[i] = label;
            }
            // The covered nucleus must stay one piece holding at least half of its area.
            let ok = partner.map_or(true, |k| {
                let l = k as u32 + 1;
                let before = labels.iter().filter(|&&x| x == l).count();
                let after = trial.iter().filter(|&&x| x == l).count();
                2 * after >= before && connected(&trial, l, w, h)
            });
            if ok && !px.is_empty() {
                accepted = Some((cand, trial, partner));
                break;
            }
        }
        if let Some((cand, trial, partner)) = accepted {
            labels = trial;
            placed.push(cand);
            paired.push(partner.is_some());
            if let Some(k) = partner {
                paired[k] = true;
            }
            colors.push(jitter(&mut rng, spec.hematoxylin, spec.color_jitter));
        }
    }

    let waves = stroma_waves(&mut rng);
    let noise = Normal::new(0.0, spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut data = vec![0.0; w * h * 3];
    for i in 0..w * h {
        let density = 1.0 + spec.stroma_variation * stroma_field(&waves, (i / w) as f64, (i % w) as f64);
        let background = background.map(|v| v.max(1e-3).powf(density).min(1.0));
        let base = match labels[i] {
            0 => background,
            l => {
                let hc = colors[l as usize - 1];
                std::array::from_fn(|ch| background[ch] + spec.nucleus_contrast * (hc[ch] - background[ch]))
            }
        };
        for ch in 0..3 {
            let n = if spec.noise_sigma > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data[i * 3 + ch] = base[ch] + n;
        }
    }
    blur(&mut data, w, h, spec.blur_sigma);
    let tile = RgbTile::from_clamped(w, h, data)?;
    let mask = InstanceMask::new(w, h, labels)?;
    Ok(SynthTile { tile, mask, requested, placed: placed.len() })
}
