//! RBF-kernel support vector classifier (SMO with second-order working-set
//! selection) and Platt probability calibration.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvmConfig {
    /// RBF width; non-positive selects `1 / n_features`.
    pub gamma: f64,
    /// Box constraint.
    pub c: f64,
    /// KKT violation tolerance.
    pub tolerance: f64,
    /// Folds for the held-out decision values the calibration is fit on.
    pub calibration_folds: usize,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self { gamma: 0.0, c: 1.0, tolerance: 1e-3, calibration_folds: 5 }
    }
}

fn rbf(a: &[f64], b: &[f64], gamma: f64) -> f64 {
    (-gamma * a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>()).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RbfSvm {
    support: Vec<Vec<f64>>,
    /// `alpha_i * y_i` per support vector.
    coef: Vec<f64>,
    rho: f64,
    gamma: f64,
}

impl RbfSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.support.iter().zip(&self.coef).map(|(s, a)| a * rbf(s, x, self.gamma)).sum::<f64>() - self.rho
    }

    pub fn support_count(&self) -> usize {
        self.support.len()
    }

    pub fn fit(x: &[Vec<f64>], y: &[bool], gamma: f64, c: f64, tol: f64) -> RbfSvm {
        let n = x.len();
        let ys: Vec<f64> = y.iter().map(|&b| if b { 1.0 } else { -1.0 }).collect();
        let k: Vec<f64> = (0..n * n).map(|t| rbf(&x[t / n], &x[t % n], gamma)).collect();
        let q = |i: usize, j: usize| ys[i] * ys[j] * k[i * n + j];
        let mut alpha = vec![0.0; n];
        let mut grad = vec![-1.0; n];
        let up = |a: f64, yy: f64| (yy > 0.0 && a < c) || (yy < 0.0 && a > 0.0);
        let low = |a: f64, yy: f64| (yy > 0.0 && a > 0.0) || (yy < 0.0 && a < c);
        const TAU: f64 = 1e-12;
        let max_iter = (100 * n).max(10_000);
        for _ in 0..max_iter {
            let mut i = usize::MAX;
            let mut gmax = f64::NEG_INFINITY;
            for t in 0..n {
                if up(alpha[t], ys[t]) && -ys[t] * grad[t] > gmax {
                    gmax = -ys[t] * grad[t];
                    i = t;
                }
            }
            let mut j = usize::MAX;
            let mut gmin = f64::INFINITY;
            let mut best = f64::INFINITY;
            for t in 0..n {
                if !low(alpha[t], ys[t]) {
                    continue;
                }
                let v = -ys[t] * grad[t];
                gmin = gmin.min(v);
                if i != usize::MAX && v < gmax {
                    let b = gmax - v;
                    let a = (k[i * n + i] + k[t * n + t] - 2.0 * k[i * n + t]).max(TAU);
                    let obj = -b * b / a;
                    if obj < best {
                        best = obj;
                        j = t;
                    }
                }
            }
            if i == usize::MAX || j == usize::MAX || gmax - gmin < tol {
                break;
            }
            let (ai, aj) = (alpha[i], alpha[j]);
            if ys[i] != ys[j] {
                let quad = (q(i, i) + q(j, j) + 2.0 * q(i, j)).max(TAU);
                let delta = (-grad[i] - grad[j]) / quad;
                let diff = alpha[i] - alpha[j];
                alpha[i] += delta;
                alpha[j] += delta;
                if diff > 0.0 {
                    if alpha[j] < 0.0 {
                        alpha[j] = 0.0;
                        alpha[i] = diff;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = -diff;
                }
                if diff > 0.0 {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = c - diff;
                    }
                } else if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = c + diff;
                }
            } else {
                let quad = (q(i, i) + q(j, j) - 2.0 * q(i, j)).max(TAU);
                let delta = (grad[i] - grad[j]) / quad;
                let sum = alpha[i] + alpha[j];
                alpha[i] -= delta;
                alpha[j] += delta;
                if sum > c {
                    if alpha[i] > c {
                        alpha[i] = c;
                        alpha[j] = sum - c;
                    }
                } else if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = sum;
                }
                if sum > c {
                    if alpha[j] > c {
                        alpha[j] = c;
                        alpha[i] = sum - c;
                    }
                } else if alpha[i] < 0.0 {
                    alpha[i] = 0.0;
                    alpha[j] = sum;
                }
            }
            let (di, dj) = (alpha[i] - ai, alpha[j] - aj);
            for t in 0..n {
                grad[t] += q(t, i) * di + q(t, j) * dj;
            }
        }
        let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut free_sum, mut free_n) = (0.0, 0usize);
        for t in 0..n {
            let yg = ys[t] * grad[t];
            let at_upper = alpha[t] >= c;
            let at_lower = alpha[t] <= 0.0;
            if at_upper {
                if ys[t] < 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
            } else if at_lower {
                if ys[t] > 0.0 { ub = ub.min(yg) } else { lb = lb.max(yg) }
            } else {
                free_sum += yg;
                free_n += 1;
            }
        }
        let rho = if free_n > 0 { free_sum / free_n as f64 } else { (ub + lb) / 2.0 };
        let rho = if rho.is_finite() { rho } else { 0.0 };
        let mut support = Vec::new();
        let mut coef = Vec::new();
        for t in 0..n {
            if alpha[t] > 0.0 {
                support.push(x[t].clone());
                coef.push(alpha[t] * ys[t]);
            }
        }
        RbfSvm { support, coef, rho, gamma }
    }
}

/// `P(y = 1 | f) = 1 / (1 + exp(a f + b))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Platt {
    pub a: f64,
    pub b: f64,
}

impl Platt {
    pub fn prob(&self, f: f64) -> f64 {
        let z = self.a * f + self.b;
        if z >= 0.0 {
            (-z).exp() / (1.0 + (-z).exp())
        } else {
            1.0 / (1.0 + z.exp())
        }
    }

    /// Newton fit with backtracking on regularized targets.
    pub fn fit(dec: &[f64], y: &[bool]) -> Platt {
        let prior1 = y.iter().filter(|&&v| v).count() as f64;
        let prior0 = y.len() as f64 - prior1;
        let hi = (prior1 + 1.0) / (prior1 + 2.0);
        let lo = 1.0 / (prior0 + 2.0);
        let t: Vec<f64> = y.iter().map(|&v| if v { hi } else { lo }).collect();
        let objective = |a: f64, b: f64| -> f64 {
            dec.iter()
                .zip(&t)
                .map(|(&f, &ti)| {
                    let z = f * a + b;
                    if z >= 0.0 { ti * z + (1.0 + (-z).exp()).ln() } else { (ti - 1.0) * z + (1.0 + z.exp()).ln() }
                })
                .sum()
        };
        let (mut a, mut b) = (0.0, ((prior0 + 1.0) / (prior1 + 1.0)).ln());
        let mut fval = objective(a, b);
        for _ in 0..100 {
            let (mut h11, mut h22, mut h21, mut g1, mut g2) = (1e-12, 1e-12, 0.0, 0.0, 0.0);
            for (&f, &ti) in dec.iter().zip(&t) {
                let z = f * a + b;
                let (p, q) = if z >= 0.0 {
                    ((-z).exp() / (1.0 + (-z).exp()), 1.0 / (1.0 + (-z).exp()))
                } else {
                    (1.0 / (1.0 + z.exp()), z.exp() / (1.0 + z.exp()))
                };
                let d2 = p * q;
                h11 += f * f * d2;
                h22 += d2;
                h21 += f * d2;
                let d1 = ti - p;
                g1 += f * d1;
                g2 += d1;
            }
            if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
                break;
            }
            let det = h11 * h22 - h21 * h21;
            let da = -(h22 * g1 - h21 * g2) / det;
            let db = -(-h21 * g1 + h11 * g2) / det;
            let gd = g1 * da + g2 * db;
            let mut step = 1.0;
            while step >= 1e-10 {
                let (na, nb) = (a + step * da, b + step * db);
                let nf = objective(na, nb);
                if nf < fval + 1e-4 * step * gd {
                    a = na;
                    b = nb;
                    fval = nf;
                    break;
                }
                step /= 2.0;
            }
            if step < 1e-10 {
                break;
            }
        }
        Platt { a, b }
    }
}

/// Z-scored RBF classifier with calibrated probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbSvm {
    mean: Vec<f64>,
    scale: Vec<f64>,
    svm: RbfSvm,
    platt: Platt,
}

impl ProbSvm {
    fn standardize(&self, x: &[f64]) -> Vec<f64> {
        x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn prob(&self, x: &[f64]) -> f64 {
        self.platt.prob(self.svm.decision(&self.standardize(x)))
    }

    pub fn fit(x: &[Vec<f64>], y: &[bool], cfg: &SvmConfig, rng: &mut ChaCha8Rng) -> ProbSvm {
        let n = x.len();
        let d = x.first().map_or(0, |r| r.len());
        let mean: Vec<f64> = (0..d).map(|j| x.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
        let scale: Vec<f64> = (0..d)
            .map(|j| {
                let s = (x.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / n as f64).sqrt();
                if s > 1e-12 { s } else { 1.0 }
            })
            .collect();
        let z: Vec<Vec<f64>> =
            x.iter().map(|r| r.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s).collect()).collect();
        let gamma = if cfg.gamma > 0.0 { cfg.gamma } else { 1.0 / d.max(1) as f64 };

        let folds = cfg.calibration_folds.clamp(2, n.max(2));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);
        let mut dec = vec![0.0; n];
        for f in 0..folds {
            let test: Vec<usize> = order.iter().copied().skip(f).step_by(folds).collect();
            let train: Vec<usize> = order.iter().copied().filter(|i| !test.contains(i)).collect();
            let tx: Vec<Vec<f64>> = train.iter().map(|&i| z[i].clone()).collect();
            let ty: Vec<bool> = train.iter().map(|&i| y[i]).collect();
            let pos = ty.iter().filter(|&&v| v).count();
            // A single-class training fold predicts its class outright.
            let model = (pos > 0 && pos < ty.len()).then(|| RbfSvm::fit(&tx, &ty, gamma, cfg.c, cfg.tolerance));
            for &i in &test {
                dec[i] = match &model {
                    Some(m) => m.decision(&z[i]),
                    None if pos == 0 => -1.0,
                    None => 1.0,
                };
            }
        }
        let platt = Platt::fit(&dec, y);
        let svm = RbfSvm::fit(&z, y, gamma, cfg.c, cfg.tolerance);
        ProbSvm { mean, scale, svm, platt }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn blobs(n: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let pos = i % 2 == 0;
            let c = if pos { 2.0 } else { -2.0 };
            x.push(vec![c + rng.gen_range(-1.0..1.0), c + rng.gen_range(-1.0..1.0)]);
            y.push(pos);
        }
        (x, y)
    }

    #[test]
    fn separates_two_blobs() {
        let (x, y) = blobs(60, 1);
        let m = RbfSvm::fit(&x, &y, 0.5, 1.0, 1e-3);
        assert!(x.iter().zip(&y).all(|(r, &l)| (m.decision(r) > 0.0) == l));
        assert!(m.support_count() < 60);
    }

    #[test]
    fn learns_a_ring() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut x = Vec::new();
        let mut y = Vec::new();
        for _ in 0..200 {
            let (a, b): (f64, f64) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let r = (a * a + b * b).sqrt();
            if (r - 1.0).abs() < 0.15 {
                continue;
            }
            x.push(vec![a, b]);
            y.push(r < 1.0);
        }
        let m = RbfSvm::fit(&x, &y, 1.0, 10.0, 1e-3);
        let acc = x.iter().zip(&y).filter(|(r, &l)| (m.decision(r) > 0.0) == l).count() as f64 / x.len() as f64;
        assert!(acc > 0.95, "{acc}");
    }

    #[test]
    fn platt_recovers_a_logistic() {
        // Decision values with labels drawn from 1 / (1 + exp(-2 f)).
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let dec: Vec<f64> = (0..4000).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<bool> = dec.iter().map(|&f| rng.gen::<f64>() < 1.0 / (1.0 + (-2.0 * f).exp())).collect();
        let p = Platt::fit(&dec, &y);
        assert!((p.a + 2.0).abs() < 0.2, "{p:?}");
        assert!(p.b.abs() < 0.15, "{p:?}");
    }

    #[test]
    fn calibrated_probabilities_order_classes() {
        let (x, y) = blobs(80, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = ProbSvm::fit(&x, &y, &SvmConfig::default(), &mut rng);
        assert!(m.prob(&[2.0, 2.0]) > 0.8);
        assert!(m.prob(&[-2.0, -2.0]) < 0.2);
    }
}
