//! Exact combinatorics of the moment method for the joint limit law.
//!
//! The m-th moment of αΦ₀E + β√(Φ₀E)σN is assembled from admissible block
//! structures (N, ε): blocks of one or two indices, with ε marking pairs
//! of consecutive singletons whose correlation survives in the limit.
//! Identities are checked in exact rational arithmetic.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{One, Zero};
use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;
use std::ops::{Add, Div, Mul};

/// Arithmetic needed by the closed forms; implemented for `f64` and
/// `BigRational`.
pub trait Scalar: Clone + Zero + One + Add<Output = Self> + Mul<Output = Self> + Div<Output = Self> {
    fn from_u64(n: u64) -> Self;

    fn pow(&self, k: usize) -> Self {
        let mut r = Self::one();
        for _ in 0..k {
            r = r * self.clone();
        }
        r
    }
}

impl Scalar for f64 {
    fn from_u64(n: u64) -> Self {
        n as f64
    }

    fn pow(&self, k: usize) -> Self {
        self.powi(k as i32)
    }
}

impl Scalar for BigRational {
    fn from_u64(n: u64) -> Self {
        BigRational::from_integer(BigInt::from(n))
    }
}

/// Exact rational p/q.
pub fn ratio(p: i64, q: i64) -> BigRational {
    BigRational::new(BigInt::from(p), BigInt::from(q))
}

fn factorial(n: usize) -> BigInt {
    (1..=n as u64).fold(BigInt::one(), |a, k| a * k)
}

pub fn binomial(n: usize, k: usize) -> u64 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    (0..k).fold(1u64, |acc, i| acc * (n - i) as u64 / (i + 1) as u64)
}

/// c_N = #{φ: {1..m} → {1..q} : |φ⁻¹(j)| = N_j} = m!/(N₁!···N_q!).
pub fn multiplicity_cn(m: usize, parts: &[usize]) -> Result<BigInt> {
    if parts.iter().sum::<usize>() != m {
        return Err(Error::CompositionMismatch {
            m,
            parts: parts.to_vec(),
        });
    }
    let denom = parts.iter().fold(BigInt::one(), |a, &n| a * factorial(n));
    Ok(factorial(m) / denom)
}

/// c_N by enumerating all q^m maps.
pub fn multiplicity_brute_force(m: usize, parts: &[usize]) -> u64 {
    let q = parts.len();
    if q == 0 {
        return u64::from(m == 0);
    }
    let total = (q as u64).pow(m as u32);
    let mut count = 0;
    let mut fibers = vec![0usize; q];
    for code in 0..total {
        fibers.iter_mut().for_each(|f| *f = 0);
        let mut c = code;
        for _ in 0..m {
            fibers[(c % q as u64) as usize] += 1;
            c /= q as u64;
        }
        if fibers == parts {
            count += 1;
        }
    }
    count
}

/// A block structure: N_i ∈ {1, 2} indices in block i, and ε_i = 1 when
/// block i is correlated with block i − 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct AdmissiblePair {
    pub n: Vec<u8>,
    pub eps: Vec<u8>,
}

impl AdmissiblePair {
    pub fn new(n: Vec<u8>, eps: Vec<u8>) -> Self {
        Self { n, eps }
    }

    pub fn q(&self) -> usize {
        self.n.len()
    }

    pub fn m(&self) -> usize {
        self.n.iter().map(|&x| x as usize).sum()
    }

    /// N_i = 2 ⇒ ε_i = 0; ε_i = 1 ⇒ i ≥ 2, N_i = N_{i−1} = 1, ε_{i−1} = 0.
    pub fn is_admissible(&self) -> bool {
        if self.n.len() != self.eps.len() {
            return false;
        }
        if self.n.iter().any(|&x| x != 1 && x != 2) || self.eps.iter().any(|&e| e > 1) {
            return false;
        }
        (0..self.q()).all(|i| {
            if self.n[i] == 2 && self.eps[i] == 1 {
                return false;
            }
            if self.eps[i] == 1 {
                return i >= 1 && self.n[i] == 1 && self.n[i - 1] == 1 && self.eps[i - 1] == 0;
            }
            true
        })
    }

    /// Squared blocks (1-based).
    pub fn j2(&self) -> Vec<usize> {
        (0..self.q()).filter(|&i| self.n[i] == 2).map(|i| i + 1).collect()
    }

    /// First blocks of correlated pairs (1-based).
    pub fn j11(&self) -> Vec<usize> {
        (1..self.q()).filter(|&i| self.eps[i] == 1).collect()
    }

    /// Singleton blocks outside correlated pairs (1-based).
    pub fn j1(&self) -> Vec<usize> {
        (0..self.q())
            .filter(|&i| {
                self.n[i] == 1 && self.eps[i] == 0 && !(i + 1 < self.q() && self.eps[i + 1] == 1)
            })
            .map(|i| i + 1)
            .collect()
    }

    pub fn r(&self) -> usize {
        2 * (self.j2().len() + self.j11().len())
    }

    pub fn s(&self) -> usize {
        self.j2().len()
    }
}

/// Admissible pairs sharing (r, s).
#[derive(Debug, Clone, Serialize)]
pub struct AdmissibleGroup {
    pub r: usize,
    pub s: usize,
    pub pairs: Vec<AdmissiblePair>,
}

impl AdmissibleGroup {
    /// binom(m − r/2, r/2)·binom(r/2, s).
    pub fn expected_count(&self, m: usize) -> u64 {
        binomial(m - self.r / 2, self.r / 2) * binomial(self.r / 2, self.s)
    }
}

/// Largest m accepted by [`enumerate_admissible`].
pub const MAX_ENUMERATION_M: usize = 12;

/// All admissible pairs with Σ N = m, found by testing the predicate on
/// every (N, ε) ∈ {1,2}^q × {0,1}^q, grouped by (r, s) in increasing order.
pub fn enumerate_admissible(m: usize) -> Result<Vec<AdmissibleGroup>> {
    if m > MAX_ENUMERATION_M {
        return Err(Error::InvalidArgument(format!(
            "enumeration limited to m ≤ {MAX_ENUMERATION_M}, got {m}"
        )));
    }
    let per_q: Vec<Vec<AdmissiblePair>> = (1..=m.max(1))
        .into_par_iter()
        .map(|q| {
            let mut found = Vec::new();
            if m == 0 {
                return found;
            }
            for nbits in 0..1u32 << q {
                let n: Vec<u8> = (0..q).map(|i| 1 + ((nbits >> i) & 1) as u8).collect();
                if n.iter().map(|&x| x as usize).sum::<usize>() != m {
                    continue;
                }
                for ebits in 0..1u32 << q {
                    let eps: Vec<u8> = (0..q).map(|i| ((ebits >> i) & 1) as u8).collect();
                    let p = AdmissiblePair::new(n.clone(), eps);
                    if p.is_admissible() {
                        found.push(p);
                    }
                }
            }
            found
        })
        .collect();
    let mut groups: Vec<AdmissibleGroup> = Vec::new();
    for p in per_q.into_iter().flatten() {
        let (r, s) = (p.r(), p.s());
        match groups.iter_mut().find(|g| g.r == r && g.s == s) {
            Some(g) => g.pairs.push(p),
            None => groups.push(AdmissibleGroup { r, s, pairs: vec![p] }),
        }
    }
    if m == 0 {
        groups.push(AdmissibleGroup {
            r: 0,
            s: 0,
            pairs: vec![AdmissiblePair::new(vec![], vec![])],
        });
    }
    groups.sort_by_key(|g| (g.r, g.s));
    Ok(groups)
}

/// One CSV row of the enumeration table.
#[derive(Debug, Clone, Serialize)]
pub struct EnumerationRow {
    pub m: usize,
    pub q: usize,
    pub n: String,
    pub eps: String,
    pub j2: String,
    pub j1: String,
    pub j11: String,
    pub r: usize,
    pub s: usize,
}

pub fn enumeration_table(m: usize) -> Result<Vec<EnumerationRow>> {
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    let join8 = |v: &[u8]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ");
    Ok(enumerate_admissible(m)?
        .into_iter()
        .flat_map(|g| g.pairs)
        .map(|p| EnumerationRow {
            m,
            q: p.q(),
            n: join8(&p.n),
            eps: join8(&p.eps),
            j2: join(&p.j2()),
            j1: join(&p.j1()),
            j11: join(&p.j11()),
            r: p.r(),
            s: p.s(),
        })
        .collect())
}

/// E[(αΦ₀E + β√(Φ₀E)σN)^m]
/// = Σ_{r even} binom(m,r) α^{m−r} (m−r/2)! Φ₀^{m−r/2} r!/(2^{r/2}(r/2)!) (βσ)^r,
/// parametrized by σ² so that rational inputs stay rational.
pub fn limit_moment_closed<T: Scalar>(m: usize, alpha: &T, beta: &T, phi0: &T, sigma2: &T) -> T {
    let mut total = T::zero();
    for j in 0..=m / 2 {
        let r = 2 * j;
        // binom(m, r)·(m − j)!·r!/(2^j j!) as an exact integer.
        let coeff = BigInt::from(binomial(m, r)) * factorial(m - j) * factorial(r)
            / (factorial(j) * BigInt::from(2u64).pow(j as u32));
        let c = T::from_u64(u64::try_from(coeff).expect("coefficient fits in u64 for m ≤ 20"));
        total = total
            + c * alpha.pow(m - r)
                * phi0.pow(m - j)
                * beta.pow(r)
                * sigma2.pow(j);
    }
    total
}

/// The moment method's leading term
/// m!·Σ 2^{−|J₂|} Φ₀^{(m+|J₁|)/2} β^{m−|J₁|} α^{|J₁|} S₀^{|J₂|} S₁^{|J₁,₁|}
/// over admissible pairs, checked against the closed form with σ² = S₀ + 2S₁.
pub fn combinatorial_moment(
    m: usize,
    alpha: &BigRational,
    beta: &BigRational,
    phi0: &BigRational,
    s0: &BigRational,
    s1: &BigRational,
) -> Result<BigRational> {
    let groups = enumerate_admissible(m)?;
    let mfact = BigRational::from_integer(factorial(m));
    let half = ratio(1, 2);
    let mut total = BigRational::zero();
    for g in &groups {
        for p in &g.pairs {
            let j1 = p.j1().len();
            let j2 = p.j2().len();
            let j11 = p.j11().len();
            let term = Scalar::pow(&half, j2)
                * Scalar::pow(phi0, (m + j1) / 2)
                * Scalar::pow(beta, m - j1)
                * Scalar::pow(alpha, j1)
                * Scalar::pow(s0, j2)
                * Scalar::pow(s1, j11);
            total += term;
        }
    }
    total *= mfact;
    let sigma2 = s0 + BigRational::from_u64(2) * s1;
    let closed = limit_moment_closed(m, alpha, beta, phi0, &sigma2);
    if total != closed {
        return Err(Error::MismatchDetected {
            m,
            assembled: total.to_string(),
            closed: closed.to_string(),
        });
    }
    Ok(total)
}

/// Samples of (Φ₀E, σ√(Φ₀E)N) with independent E ~ Exp(1), N ~ N(0,1).
pub fn mc_limit_sampler(phi0: f64, sigma: f64, count: usize, rng: &mut StreamRng) -> Vec<(f64, f64)> {
    (0..count)
        .map(|_| {
            let e: f64 = rng.sample(Exp1);
            let n: f64 = rng.sample(StandardNormal);
            (phi0 * e, sigma * (phi0 * e).sqrt() * n)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn cn_examples() {
        assert_eq!(multiplicity_cn(3, &[1, 2]).unwrap(), BigInt::from(3));
        assert_eq!(multiplicity_brute_force(3, &[1, 2]), 3);
        assert_eq!(multiplicity_cn(5, &[1; 5]).unwrap(), BigInt::from(120));
        assert!(multiplicity_cn(4, &[1, 2]).is_err());
    }

    #[test]
    fn worked_example_sets() {
        let p = AdmissiblePair::new(vec![1, 1, 1, 2, 1, 1, 2, 2, 1, 1], vec![0, 0, 1, 0, 0, 1, 0, 0, 0, 0]);
        assert!(p.is_admissible());
        assert_eq!(p.j2(), vec![4, 7, 8]);
        assert_eq!(p.j1(), vec![1, 9, 10]);
        assert_eq!(p.j11(), vec![2, 5]);
        assert_eq!(p.m(), 2 * 3 + 2 * 2 + 3);
        let c = multiplicity_cn(p.m(), &p.n.iter().map(|&x| x as usize).collect::<Vec<_>>()).unwrap();
        assert_eq!(c, factorial(p.m()) / BigInt::from(8));
    }

    #[test]
    fn small_enumerations() {
        let g = enumerate_admissible(1).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].pairs, vec![AdmissiblePair::new(vec![1], vec![0])]);
        let g = enumerate_admissible(2).unwrap();
        let find = |r, s| g.iter().find(|x| x.r == r && x.s == s).unwrap();
        assert_eq!(find(2, 1).pairs, vec![AdmissiblePair::new(vec![2], vec![0])]);
        assert_eq!(find(2, 0).pairs, vec![AdmissiblePair::new(vec![1, 1], vec![0, 1])]);
        assert_eq!(find(0, 0).pairs, vec![AdmissiblePair::new(vec![1, 1], vec![0, 0])]);
    }

    #[test]
    fn closed_form_low_orders() {
        let (a, b, p, s2) = (ratio(2, 3), ratio(5, 7), ratio(1, 3), ratio(3, 2));
        assert_eq!(limit_moment_closed(0, &a, &b, &p, &s2), ratio(1, 1));
        assert_eq!(limit_moment_closed(1, &a, &b, &p, &s2), a.clone() * p.clone());
        let two = ratio(2, 1);
        let expect = two * a.clone() * a.clone() * p.clone() * p.clone() + b.clone() * b.clone() * s2.clone() * p.clone();
        assert_eq!(limit_moment_closed(2, &a, &b, &p, &s2), expect);
        let zero = BigRational::zero();
        assert!(limit_moment_closed(5, &zero, &b, &p, &s2).is_zero());
    }

    #[test]
    fn assembly_at_m4() {
        let one = ratio(1, 1);
        let v = combinatorial_moment(4, &one, &one, &ratio(1, 3), &one, &ratio(1, 2)).unwrap();
        assert_eq!(v, limit_moment_closed(4, &one, &one, &ratio(1, 3), &ratio(2, 1)));
    }

    #[test]
    fn sampler_second_coordinate_variance() {
        let mut rng = stream_rng(3, 0);
        let xs = mc_limit_sampler(0.5, 2.0, 200_000, &mut rng);
        let v: f64 = xs.iter().map(|(_, y)| y * y).sum::<f64>() / xs.len() as f64;
        assert!((v - 2.0).abs() < 0.05, "{v}");
    }
}
