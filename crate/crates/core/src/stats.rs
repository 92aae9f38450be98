//! Numerical and statistical helpers shared by the estimators and the
//! limit-law tests.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KahanSum {
    sum: f64,
    comp: f64,
}

impl KahanSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }

    pub fn merge(&mut self, other: &KahanSum) {
        self.add(other.sum);
        self.add(other.comp);
    }
}

/// Mergeable sufficient statistics (count, Σx, Σx²).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub n: u64,
    pub sum: f64,
    pub sum_sq: f64,
}

impl Moments {
    #[inline]
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        self.sum += x;
        self.sum_sq += x * x;
    }

    pub fn merge(&mut self, other: &Moments) {
        self.n += other.n;
        self.sum += other.sum;
        self.sum_sq += other.sum_sq;
    }

    pub fn mean(&self) -> f64 {
        if self.n == 0 {
            return 0.0;
        }
        self.sum / self.n as f64
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        let n = self.n as f64;
        ((self.sum_sq - self.sum * self.sum / n) / (n - 1.0)).max(0.0)
    }

    pub fn stderr(&self) -> f64 {
        if self.n < 2 {
            return 0.0;
        }
        (self.variance() / self.n as f64).sqrt()
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut k = KahanSum::new();
    xs.iter().for_each(|&x| k.add(x));
    k.value() / xs.len() as f64
}

/// Central moments (mean, variance, excess kurtosis) of a sample.
pub fn describe(xs: &[f64]) -> (f64, f64, f64) {
    let m = mean(xs);
    let n = xs.len() as f64;
    let (mut m2, mut m4) = (0.0, 0.0);
    for &x in xs {
        let d = (x - m) * (x - m);
        m2 += d;
        m4 += d * d;
    }
    let var = m2 / n;
    let kurt = if var > 0.0 { (m4 / n) / (var * var) - 3.0 } else { 0.0 };
    (m, var, kurt)
}

/// Batch-means standard error of `stat` evaluated on `batches` contiguous
/// batches of `xs`. Returns `(stat on full sample, stderr)`.
pub fn batch_stderr<F>(xs: &[f64], batches: usize, stat: F) -> (f64, f64)
where
    F: Fn(&[f64]) -> f64,
{
    let full = stat(xs);
    let b = batches.max(2).min(xs.len().max(2));
    let size = xs.len() / b;
    if size == 0 {
        return (full, f64::NAN);
    }
    let vals: Vec<f64> = (0..b).map(|i| stat(&xs[i * size..(i + 1) * size])).collect();
    let bm = mean(&vals);
    let var = vals.iter().map(|v| (v - bm) * (v - bm)).sum::<f64>() / (b as f64 - 1.0);
    (full, (var / b as f64).sqrt())
}

/// Batch-means stderr of a plain mean over a correlated sequence.
pub fn batch_means(xs: &[f64], batches: usize) -> (f64, f64) {
    batch_stderr(xs, batches, mean)
}

/// One-sample Kolmogorov–Smirnov distance between the right-continuous
/// empirical CDF of `samples` and a continuous CDF. Ties are handled by
/// comparing both one-sided limits at each atom.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut xs: Vec<f64> = samples.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    ks_statistic_sorted(&xs, cdf)
}

pub fn ks_statistic_sorted<F: Fn(f64) -> f64>(xs: &[f64], cdf: F) -> f64 {
    let n = xs.len() as f64;
    let mut d: f64 = 0.0;
    let mut i = 0;
    while i < xs.len() {
        let x = xs[i];
        let mut j = i;
        while j < xs.len() && xs[j] == x {
            j += 1;
        }
        let f = cdf(x);
        let below = i as f64 / n;
        let at = j as f64 / n;
        d = d.max((f - below).abs()).max((at - f).abs());
        i = j;
    }
    d
}

/// Asymptotic Kolmogorov p-value with the Stephens small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    kolmogorov_sf(lambda)
}

/// Survival function of the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut s = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        s += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * s).clamp(0.0, 1.0)
}

/// Two-sample Kolmogorov–Smirnov statistic and asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> (f64, f64) {
    let mut xa = a.to_vec();
    let mut xb = b.to_vec();
    xa.sort_by(|p, q| p.total_cmp(q));
    xb.sort_by(|p, q| p.total_cmp(q));
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut d: f64 = 0.0;
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = na * nb / (na + nb);
    (d, ks_pvalue_effective(d, ne))
}

fn ks_pvalue_effective(d: f64, ne: f64) -> f64 {
    let sn = ne.sqrt();
    kolmogorov_sf((sn + 0.12 + 0.11 / sn) * d)
}

/// Pearson chi-square statistic and p-value for observed counts against
/// expected probabilities. Bins with expected count below 5 are pooled
/// into their neighbour.
pub fn chi_square_test(observed: &[u64], probs: &[f64]) -> (f64, usize, f64) {
    assert_eq!(observed.len(), probs.len());
    let total: u64 = observed.iter().sum();
    let n = total as f64;
    let mut stat = 0.0;
    let mut bins = 0usize;
    let (mut o_acc, mut e_acc) = (0.0, 0.0);
    for (&o, &p) in observed.iter().zip(probs) {
        o_acc += o as f64;
        e_acc += p * n;
        if e_acc >= 5.0 {
            stat += (o_acc - e_acc).powi(2) / e_acc;
            bins += 1;
            o_acc = 0.0;
            e_acc = 0.0;
        }
    }
    if e_acc > 0.0 {
        stat += (o_acc - e_acc).powi(2) / e_acc;
        bins += 1;
    }
    let dof = bins.saturating_sub(1).max(1);
    let p = ChiSquared::new(dof as f64).map(|c| c.sf(stat)).unwrap_or(f64::NAN);
    (stat, dof, p)
}

pub fn exponential_cdf(mean: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        1.0 - (-x / mean).exp()
    }
}

/// CDF of the centered Laplace law with variance `var`
/// (density e^{-√2|x|/s}/(s√2), s² = var).
pub fn laplace_cdf(var: f64, x: f64) -> f64 {
    let b = (var / 2.0).sqrt();
    if x < 0.0 {
        0.5 * (x / b).exp()
    } else {
        1.0 - 0.5 * (-x / b).exp()
    }
}

pub fn laplace_quantile(var: f64, p: f64) -> f64 {
    let b = (var / 2.0).sqrt();
    if p < 0.5 {
        b * (2.0 * p).ln()
    } else {
        -b * (2.0 * (1.0 - p)).ln()
    }
}

/// Ordinary least squares y = a + b·x with heteroskedasticity-robust (HC1)
/// standard errors.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LinearFit {
    pub intercept: f64,
    pub slope: f64,
    pub intercept_stderr: f64,
    pub slope_stderr: f64,
}

pub fn ols(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = mean(x);
    let my = mean(y);
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    // HC1 sandwich for (a, b).
    let mut s00 = 0.0;
    let mut s01 = 0.0;
    let mut s11 = 0.0;
    for (&xi, &yi) in x.iter().zip(y) {
        let e = yi - intercept - slope * xi;
        let e2 = e * e;
        s00 += e2;
        s01 += e2 * xi;
        s11 += e2 * xi * xi;
    }
    let sx: f64 = x.iter().sum();
    let sxx_raw: f64 = x.iter().map(|v| v * v).sum();
    let det = n * sxx_raw - sx * sx;
    // (X'X)^{-1} = [[sxx_raw, -sx], [-sx, n]] / det
    let inv = [[sxx_raw / det, -sx / det], [-sx / det, n / det]];
    let meat = [[s00, s01], [s01, s11]];
    let mut cov = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            let mut acc = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    acc += inv[i][k] * meat[k][l] * inv[l][j];
                }
            }
            cov[i][j] = acc * n / (n - 2.0);
        }
    }
    LinearFit {
        intercept,
        slope,
        intercept_stderr: cov[0][0].max(0.0).sqrt(),
        slope_stderr: cov[1][1].max(0.0).sqrt(),
    }
}

/// Gauss–Legendre nodes and weights on [-1, 1], computed by Newton
/// iteration on the Legendre recurrence.
pub fn gauss_legendre(order: usize) -> (Vec<f64>, Vec<f64>) {
    let n = order.max(1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 1 { x } else { p1 };
            let pn1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * pn - pn1) / (x * x - 1.0);
            let dx = pn / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n == 1 {
        nodes[0] = 0.0;
        weights[0] = 2.0;
    }
    (nodes, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::close;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol
        }
    }

    #[test]
    fn kahan_beats_naive_summation() {
        let mut k = KahanSum::new();
        let mut naive = 0.0;
        k.add(1e16);
        naive += 1e16;
        for _ in 0..1000 {
            k.add(1.0);
            naive += 1.0;
        }
        k.add(-1e16);
        naive -= 1e16;
        assert_eq!(k.value(), 1000.0);
        assert_ne!(naive, 1000.0);
    }

    #[test]
    fn ks_handles_atoms() {
        // All mass at 0.5 against U(0,1): D = 0.5.
        let xs = vec![0.5; 10];
        assert!(close(ks_statistic(&xs, |x| x.clamp(0.0, 1.0)), 0.5, 1e-15));
        // A single sample at 0 against U(0,1).
        assert!(close(ks_statistic(&[0.0], |x| x.clamp(0.0, 1.0)), 1.0, 1e-15));
    }

    #[test]
    fn kolmogorov_tail_known_values() {
        // Q(1.36) ≈ 0.0494 is the classical 5% point.
        assert!(close(kolmogorov_sf(1.358), 0.05, 5e-4));
        assert!(close(kolmogorov_sf(1.628), 0.01, 5e-4));
    }

    #[test]
    fn laplace_cdf_matches_quantile() {
        for &p in &[0.01, 0.2, 0.5, 0.7, 0.99] {
            let x = laplace_quantile(1.0, p);
            assert!(close(laplace_cdf(1.0, x), p, 1e-14));
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        let (x, w) = gauss_legendre(8);
        // ∫_{-1}^{1} t^14 dt = 2/15
        let v: f64 = x.iter().zip(&w).map(|(t, wi)| wi * t.powi(14)).sum();
        assert!(close(v, 2.0 / 15.0, 1e-14));
        let total: f64 = w.iter().sum();
        assert!(close(total, 2.0, 1e-14));
    }

    #[test]
    fn ols_recovers_line() {
        let x: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 0.5 * v).collect();
        let fit = ols(&x, &y);
        assert!(close(fit.slope, 0.5, 1e-12));
        assert!(close(fit.intercept, 2.0, 1e-10));
    }

    #[test]
    fn chi_square_uniform_counts_pass() {
        let obs = vec![100u64; 10];
        let probs = vec![0.1; 10];
        let (stat, dof, p) = chi_square_test(&obs, &probs);
        assert_eq!(stat, 0.0);
        assert_eq!(dof, 9);
        assert!(p > 0.99);
    }

    #[test]
    fn two_sample_ks_identical_samples() {
        let a: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let (d, p) = ks_two_sample(&a, &a);
        assert_eq!(d, 0.0);
        assert!(p > 0.99);
    }
}
