//! Saab kernels (DC split off, AC directions from PCA) and plain PCA bases.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Projection learned by one Saab stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaabKernel {
    /// Row-major `m_kept x k`; rows are orthonormal AC directions.
    pub weights: Vec<f64>,
    /// Share of the total AC energy carried by each kept row.
    pub energies: Vec<f64>,
    /// `(f, f, channels)`; `k = f * f * channels`.
    pub input_dims: (usize, usize, usize),
    /// Whether `apply` prepends the cuboid mean as feature 0.
    pub dc_included: bool,
}

impl SaabKernel {
    pub fn input_len(&self) -> usize {
        self.input_dims.0 * self.input_dims.1 * self.input_dims.2
    }

    /// Number of AC components kept.
    pub fn kept(&self) -> usize {
        self.energies.len()
    }

    /// Output width: AC components plus the DC column when included.
    pub fn output_len(&self) -> usize {
        self.kept() + usize::from(self.dc_included)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let k = self.input_len();
        &self.weights[i * k..(i + 1) * k]
    }

    /// Features of one cuboid, written into `out` (length `output_len`).
    pub fn apply_one(&self, cuboid: &[f64], out: &mut [f64]) {
        let k = self.input_len();
        debug_assert_eq!(cuboid.len(), k);
        let mean = cuboid.iter().sum::<f64>() / k as f64;
        let off = usize::from(self.dc_included);
        if self.dc_included {
            out[0] = mean;
        }
        for i in 0..self.kept() {
            out[off + i] = self.row(i).iter().zip(cuboid).map(|(w, x)| w * (x - mean)).sum();
        }
    }
}

/// Mean-centered PCA basis, used for the spectral stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub mean: Vec<f64>,
    /// Row-major `m_kept x k`.
    pub components: Vec<f64>,
    pub energies: Vec<f64>,
}

impl PcaBasis {
    pub fn input_len(&self) -> usize {
        self.mean.len()
    }

    pub fn kept(&self) -> usize {
        self.energies.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        let k = self.input_len();
        &self.components[i * k..(i + 1) * k]
    }

    pub fn project(&self, x: &[f64], i: usize) -> f64 {
        self.component(i).iter().zip(x).zip(&self.mean).map(|((w, v), m)| w * (v - m)).sum()
    }
}

/// Weighted first and second moments of `k`-dimensional vectors.
#[derive(Debug, Clone)]
pub(crate) struct Moments {
    k: usize,
    weight: f64,
    sum: Vec<f64>,
    /// Upper triangle used; mirrored on finish.
    outer: Vec<f64>,
}

impl Moments {
    pub(crate) fn new(k: usize) -> Self {
        Self { k, weight: 0.0, sum: vec![0.0; k], outer: vec![0.0; k * k] }
    }

    pub(crate) fn add(&mut self, x: &[f64], w: f64) {
        let k = self.k;
        self.weight += w;
        for i in 0..k {
            let wi = w * x[i];
            self.sum[i] += wi;
            let row = &mut self.outer[i * k..(i + 1) * k];
            for j in i..k {
                row[j] += wi * x[j];
            }
        }
    }

    pub(crate) fn merge(&mut self, other: &Moments) {
        self.weight += other.weight;
        self.sum.iter_mut().zip(&other.sum).for_each(|(a, b)| *a += b);
        self.outer.iter_mut().zip(&other.outer).for_each(|(a, b)| *a += b);
    }

    fn matrix(&self, centered: bool) -> DMatrix<f64> {
        let k = self.k;
        let n = self.weight.max(f64::MIN_POSITIVE);
        DMatrix::from_fn(k, k, |i, j| {
            let (a, b) = if i <= j { (i, j) } else { (j, i) };
            let m = self.outer[a * k + b] / n;
            if centered {
                m - (self.sum[a] / n) * (self.sum[b] / n)
            } else {
                m
            }
        })
    }
}

/// Eigenpairs sorted by decreasing eigenvalue, eigenvectors sign-fixed so
/// their largest-magnitude entry is positive.
fn sorted_eigen(m: DMatrix<f64>) -> Vec<(f64, Vec<f64>)> {
    let eig = SymmetricEigen::new(m);
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..eig.eigenvalues.len())
        .map(|i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let big = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
            if big < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            (eig.eigenvalues[i].max(0.0), v)
        })
        .collect();
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    pairs
}

/// Keeps leading eigenpairs whose share of `total` is at least `te`.
fn truncate(pairs: Vec<(f64, Vec<f64>)>, total: f64, te: f64, max_dims: usize) -> (Vec<f64>, Vec<f64>) {
    let mut weights = Vec::new();
    let mut energies = Vec::new();
    for (val, vec) in pairs.into_iter().take(max_dims) {
        let share = val / total;
        if share < te {
            break;
        }
        energies.push(share);
        weights.extend(vec);
    }
    (weights, energies)
}

/// AC energy below this fraction of the raw energy counts as none.
const AC_FLOOR: f64 = 1e-12;

/// Accumulates DC-removed cuboids for a Saab fit.
#[derive(Debug, Clone)]
pub(crate) struct SaabStats {
    ac: Moments,
    raw_energy: f64,
    buf: Vec<f64>,
}

impl SaabStats {
    pub(crate) fn new(k: usize) -> Self {
        Self { ac: Moments::new(k), raw_energy: 0.0, buf: vec![0.0; k] }
    }

    pub(crate) fn add(&mut self, cuboid: &[f64], w: f64) {
        let mean = cuboid.iter().sum::<f64>() / cuboid.len() as f64;
        for (b, x) in self.buf.iter_mut().zip(cuboid) {
            *b = x - mean;
        }
        self.raw_energy += w * cuboid.iter().map(|x| x * x).sum::<f64>();
        let buf = std::mem::take(&mut self.buf);
        self.ac.add(&buf, w);
        self.buf = buf;
    }

    pub(crate) fn merge(&mut self, other: &SaabStats) {
        self.ac.merge(&other.ac);
        self.raw_energy += other.raw_energy;
    }

    pub(crate) fn finish(&self, input_dims: (usize, usize, usize), te: f64, max_dims: usize) -> Result<SaabKernel> {
        let m = self.ac.matrix(false);
        let total = m.trace();
        let raw = self.raw_energy / self.ac.weight.max(f64::MIN_POSITIVE);
        if !(total > AC_FLOOR * raw) || total <= 0.0 {
            return Err(Error::EmptyKernel);
        }
        let (weights, energies) = truncate(sorted_eigen(m), total, te, max_dims);
        if energies.is_empty() {
            return Err(Error::EmptyKernel);
        }
        Ok(SaabKernel { weights, energies, input_dims, dc_included: true })
    }
}

/// Fits a Saab kernel on `samples`, a row-major matrix of cuboids flattened to
/// length `f * f * channels`.
///
/// Each cuboid's mean is removed before the eigen-decomposition of the second
/// moment. Components whose share of the AC energy is at least `te` are kept,
/// at most `max_dims` of them.
pub fn fit_saab(samples: &[f64], input_dims: (usize, usize, usize), te: f64, max_dims: usize) -> Result<SaabKernel> {
    let k = input_dims.0 * input_dims.1 * input_dims.2;
    if k == 0 || samples.is_empty() {
        return Err(Error::EmptyRaster);
    }
    if samples.len() % k != 0 {
        return Err(Error::FeatureMismatch { expected: k, found: samples.len() % k });
    }
    if samples.len() / k < k {
        return Err(Error::EmptyPatch);
    }
    let mut stats = SaabStats::new(k);
    for row in samples.chunks_exact(k) {
        stats.add(row, 1.0);
    }
    stats.finish(input_dims, te, max_dims)
}

/// Applies `kernel` to every cuboid; each output row is `[DC, AC...]`.
pub fn apply_saab(cuboids: &[f64], kernel: &SaabKernel) -> Result<Vec<f64>> {
    let k = kernel.input_len();
    if cuboids.len() % k != 0 {
        return Err(Error::FeatureMismatch { expected: k, found: cuboids.len() % k });
    }
    let width = kernel.output_len();
    let mut out = vec![0.0; cuboids.len() / k * width];
    for (row, dst) in cuboids.chunks_exact(k).zip(out.chunks_exact_mut(width)) {
        kernel.apply_one(row, dst);
    }
    Ok(out)
}

/// Accumulates vectors for a mean-centered PCA fit.
#[derive(Debug, Clone)]
pub(crate) struct PcaStats(Moments);

impl PcaStats {
    pub(crate) fn new(k: usize) -> Self {
        Self(Moments::new(k))
    }

    pub(crate) fn add(&mut self, x: &[f64]) {
        self.0.add(x, 1.0);
    }

    pub(crate) fn merge(&mut self, other: &PcaStats) {
        self.0.merge(&other.0);
    }

    /// Like the Saab fit but without per-vector DC removal. An input with no
    /// variance yields a basis with zero components.
    pub(crate) fn finish(&self, te: f64, max_dims: usize) -> PcaBasis {
        let n = self.0.weight.max(f64::MIN_POSITIVE);
        let mean: Vec<f64> = self.0.sum.iter().map(|s| s / n).collect();
        let m = self.0.matrix(true);
        let total = m.trace();
        let scale: f64 = mean.iter().map(|x| x * x).sum::<f64>() + total;
        if !(total > AC_FLOOR * scale) {
            return PcaBasis { mean, components: Vec::new(), energies: Vec::new() };
        }
        let (components, energies) = truncate(sorted_eigen(m), total, te, max_dims);
        PcaBasis { mean, components, energies }
    }
}

/// Mean-centered PCA of row-major `samples` with row length `k`.
pub fn fit_pca(samples: &[f64], k: usize, te: f64, max_dims: usize) -> PcaBasis {
    let mut stats = PcaStats::new(k);
    for row in samples.chunks_exact(k) {
        stats.add(row);
    }
    stats.finish(te, max_dims)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gram_error(w: &[f64], k: usize) -> f64 {
        let m = w.len() / k;
        let mut worst = 0.0f64;
        for i in 0..m {
            for j in 0..m {
                let d: f64 = (0..k).map(|t| w[i * k + t] * w[j * k + t]).sum();
                worst = worst.max((d - if i == j { 1.0 } else { 0.0 }).abs());
            }
        }
        worst
    }

    #[test]
    fn constant_cuboids_have_no_ac() {
        let samples: Vec<f64> = (0..40).flat_map(|i| vec![i as f64 * 0.1; 9]).collect();
        assert!(matches!(fit_saab(&samples, (3, 3, 1), 1e-3, 10), Err(Error::EmptyKernel)));
    }

    #[test]
    fn dc_removal_collapses_axis_cross() {
        // The four axis points lie on a line once each row's mean is removed.
        let samples = [1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0];
        let k = fit_saab(&samples, (1, 2, 1), 1e-3, 10).unwrap();
        assert_eq!(k.kept(), 1);
        let r = k.row(0);
        assert!((r[0].abs() - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert!((r[0] + r[1]).abs() < 1e-12);
    }

    #[test]
    fn centered_pca_on_axis_cross_is_isotropic() {
        let samples = [1.0, 0.0, 0.0, 1.0, -1.0, 0.0, 0.0, -1.0];
        let b = fit_pca(&samples, 2, 1e-3, 10);
        assert_eq!(b.kept(), 2);
        assert!((b.energies[0] - 0.5).abs() < 1e-12 && (b.energies[1] - 0.5).abs() < 1e-12);
        assert!(gram_error(&b.components, 2) < 1e-12);
    }

    #[test]
    fn apply_constant_and_basis_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples: Vec<f64> = (0..27 * 200).map(|_| rng.gen::<f64>()).collect();
        let k = fit_saab(&samples, (3, 3, 3), 1e-3, 10).unwrap();
        let out = apply_saab(&[0.4; 27], &k).unwrap();
        assert!((out[0] - 0.4).abs() < 1e-15);
        assert!(out[1..].iter().all(|v| v.abs() < 1e-12));
        // A kernel row has zero mean, so it maps to a unit vector.
        let row = k.row(2).to_vec();
        let out = apply_saab(&row, &k).unwrap();
        for (i, v) in out[1..].iter().enumerate() {
            assert!((v - if i == 2 { 1.0 } else { 0.0 }).abs() < 1e-9, "{i} {v}");
        }
    }

    #[test]
    fn rejects_mismatched_width() {
        let k = fit_saab(&[1.0, 0.0, 0.0, 1.0, 0.5, 0.2], (1, 2, 1), 1e-3, 10).unwrap();
        assert!(apply_saab(&[1.0, 2.0, 3.0], &k).is_err());
    }

    #[test]
    fn spectral_outputs_are_decorrelated() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let k = 6;
        let samples: Vec<f64> = (0..500)
            .flat_map(|_| {
                let a: f64 = rng.gen();
                let b: f64 = rng.gen();
                (0..k).map(move |j| a * j as f64 + b * (j as f64).sin()).collect::<Vec<_>>()
            })
            .collect();
        let basis = fit_pca(&samples, k, 1e-6, 10);
        let proj: Vec<Vec<f64>> =
            samples.chunks(k).map(|x| (0..basis.kept()).map(|i| basis.project(x, i)).collect()).collect();
        let m = basis.kept();
        let n = proj.len() as f64;
        let mut diag = 0.0;
        let mut off = 0.0f64;
        for i in 0..m {
            for j in 0..m {
                let c: f64 = proj.iter().map(|p| p[i] * p[j]).sum::<f64>() / n;
                if i == j {
                    diag += c.abs();
                } else {
                    off += c.abs();
                }
            }
        }
        assert!(off / diag < 1e-6, "{off} {diag}");
    }
}
