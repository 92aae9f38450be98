//! Exactly solvable Z²-extensions of finite Markov chains.
//!
//! A chain is a stochastic matrix `M` with stationary vector `π` and a step
//! function `F` attached either to the departing state or to the edge
//! taken. The base point of the extension is the pair (x_k, x_{k+1}), so
//! edge-valued steps and edge observables are functions of the base point.
//!
//! All exact computations are single-threaded and deterministic; the
//! ensemble simulation parallelizes over trajectories with per-index
//! streams.

use crate::error::{Error, Result};
use crate::estimators::phi0_of;
use crate::rng::{stream_rng, StreamRng};
use crate::stats::ols;
use crate::system::{cell_add, Cell, Dynamics, Step};
use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// F as a function of the departing state or of the edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepLabels {
    State(Vec<Cell>),
    Edge(Vec<Vec<Cell>>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleChain {
    m: Vec<Vec<f64>>,
    pi: Vec<f64>,
    steps: StepLabels,
    cdf: Vec<Vec<f64>>,
    iid: bool,
}

impl OracleChain {
    pub fn new(m: Vec<Vec<f64>>, steps: StepLabels) -> Result<Self> {
        let d = m.len();
        if d == 0 {
            return Err(Error::InvalidChain("empty matrix".into()));
        }
        for (j, row) in m.iter().enumerate() {
            if row.len() != d {
                return Err(Error::InvalidChain(format!("row {j} has length {}", row.len())));
            }
            if row.iter().any(|&p| !(p >= 0.0)) {
                return Err(Error::InvalidChain(format!("row {j} has a negative entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-14 {
                return Err(Error::InvalidChain(format!("row {j} sums to {s}")));
            }
        }
        match &steps {
            StepLabels::State(f) if f.len() != d => {
                return Err(Error::InvalidChain(format!("{} step labels for {d} states", f.len())))
            }
            StepLabels::Edge(f) if f.len() != d || f.iter().any(|r| r.len() != d) => {
                return Err(Error::InvalidChain("edge step table is not d×d".into()))
            }
            _ => {}
        }
        if !primitive(&m) {
            return Err(Error::InvalidChain("chain is not irreducible and aperiodic".into()));
        }
        let pi = stationary(&m);
        let cdf = m
            .iter()
            .map(|row| {
                let mut acc = 0.0;
                row.iter()
                    .map(|p| {
                        acc += p;
                        acc
                    })
                    .collect()
            })
            .collect();
        let iid = m.iter().all(|row| row.iter().zip(&m[0]).all(|(a, b)| a == b));
        Ok(Self {
            m,
            pi,
            steps,
            cdf,
            iid,
        })
    }

    /// IID steps uniform on `labels`.
    pub fn iid(labels: Vec<Cell>) -> Self {
        let d = labels.len();
        let m = vec![vec![1.0 / d as f64; d]; d];
        Self::new(m, StepLabels::State(labels)).expect("uniform IID chain is valid")
    }

    /// Steps uniform on {0, ±e₁, ±e₂}.
    pub fn lazy_walk() -> Self {
        Self::iid(vec![[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1]])
    }

    /// Steps uniform on {±e₁, ±e₂}; periodic on Z².
    pub fn simple_walk() -> Self {
        Self::iid(vec![[1, 0], [-1, 0], [0, 1], [0, -1]])
    }

    /// Lazy walk with memory: the last step is repeated with probability
    /// ρ, otherwise a fresh uniform step is drawn. Σ² = (2/5)(1+ρ)/(1−ρ)·I.
    pub fn persistent_lazy_walk(rho: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&rho) {
            return Err(Error::InvalidArgument(format!("persistence must be in [0,1), got {rho}")));
        }
        let d = 5;
        let m = (0..d)
            .map(|j| {
                (0..d)
                    .map(|k| (1.0 - rho) / d as f64 + if j == k { rho } else { 0.0 })
                    .collect()
            })
            .collect();
        Self::new(
            m,
            StepLabels::State(vec![[0, 0], [1, 0], [-1, 0], [0, 1], [0, -1]]),
        )
    }

    /// Product of an IID chain with an independent IID mark uniform on
    /// `levels` values, returned with the standardized marks
    /// w = √(3/(K²−1))·(2j+1−K) (mean 0, variance 1), indexed by state.
    pub fn with_marks(&self, levels: usize) -> Result<(Self, Vec<f64>)> {
        if !self.iid {
            return Err(Error::InvalidChain("marks require an IID base chain".into()));
        }
        if levels < 2 {
            return Err(Error::InvalidArgument("at least two mark levels".into()));
        }
        let labels = match &self.steps {
            StepLabels::State(f) => f,
            StepLabels::Edge(_) => return Err(Error::InvalidChain("marks need state steps".into())),
        };
        let k = levels as f64;
        let scale = (3.0 / (k * k - 1.0)).sqrt();
        let mut steps = Vec::new();
        let mut marks = Vec::new();
        let mut row = Vec::new();
        for (j, f) in labels.iter().enumerate() {
            for l in 0..levels {
                steps.push(*f);
                marks.push(scale * (2.0 * l as f64 + 1.0 - k));
                row.push(self.m[0][j] / k);
            }
        }
        let d = steps.len();
        let chain = Self::new(vec![row; d], StepLabels::State(steps))?;
        Ok((chain, marks))
    }

    pub fn states(&self) -> usize {
        self.m.len()
    }

    pub fn stationary(&self) -> &[f64] {
        &self.pi
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.m
    }

    pub fn is_iid(&self) -> bool {
        self.iid
    }

    #[inline]
    pub fn step(&self, from: usize, to: usize) -> Cell {
        match &self.steps {
            StepLabels::State(f) => f[from],
            StepLabels::Edge(f) => f[from][to],
        }
    }

    pub fn max_step(&self) -> i64 {
        let d = self.states();
        let mut best = 0;
        for j in 0..d {
            for k in 0..d {
                let f = self.step(j, k);
                best = best.max(f[0].abs()).max(f[1].abs());
            }
        }
        best
    }

    #[inline]
    fn next_state(&self, from: usize, rng: &mut StreamRng) -> usize {
        let u: f64 = rng.random();
        let row = &self.cdf[from];
        row.iter().position(|&c| u < c).unwrap_or(row.len() - 1)
    }

    /// Σ² from the exact one-step and lag sums of the step process; used as
    /// the reference value for these chains.
    pub fn diffusion_exact(&self) -> [[f64; 2]; 2] {
        // Σ² = C₀ + Σ_{k≥1} (C_k + C_kᵀ) with F mean zero.
        let d = self.states();
        let mut c0 = [[0.0; 2]; 2];
        // a_k = E[F(x0,x1) 1{x1 = k}], b_k = E[F(x_k, x_{k+1}) | x_k = k].
        let mut a = vec![[0.0; 2]; d];
        let mut b = vec![[0.0; 2]; d];
        for j in 0..d {
            for k in 0..d {
                let p = self.pi[j] * self.m[j][k];
                let f = self.step(j, k);
                for r in 0..2 {
                    for c in 0..2 {
                        c0[r][c] += p * (f[r] * f[c]) as f64;
                    }
                    a[k][r] += p * f[r] as f64;
                    b[j][r] += self.m[j][k] * f[r] as f64;
                }
            }
        }
        let mut sigma = c0;
        let mut v = a;
        for _ in 0..100_000 {
            let mut term = [[0.0; 2]; 2];
            for k in 0..d {
                for r in 0..2 {
                    for c in 0..2 {
                        term[r][c] += v[k][r] * b[k][c];
                    }
                }
            }
            let mag = term.iter().flatten().map(|x| x.abs()).fold(0.0, f64::max);
            for r in 0..2 {
                for c in 0..2 {
                    sigma[r][c] += term[r][c] + term[c][r];
                }
            }
            if mag < 1e-18 {
                break;
            }
            let mut next = vec![[0.0; 2]; d];
            for (j, vj) in v.iter().enumerate() {
                for k in 0..d {
                    for r in 0..2 {
                        next[k][r] += vj[r] * self.m[j][k];
                    }
                }
            }
            v = next;
        }
        sigma
    }

    /// The twisted operator (P_u h)(k) = Σ_j π_j M_jk e^{i⟨u,F_jk⟩} h(j)/π_k
    /// as a row-major matrix acting on column vectors h.
    pub fn twisted_matrix(&self, u: [f64; 2]) -> Vec<Complex64> {
        let d = self.states();
        let mut p = vec![Complex64::new(0.0, 0.0); d * d];
        for k in 0..d {
            for j in 0..d {
                let f = self.step(j, k);
                let phase = u[0] * f[0] as f64 + u[1] * f[1] as f64;
                p[k * d + j] = Complex64::from_polar(self.pi[j] * self.m[j][k] / self.pi[k], phase);
            }
        }
        p
    }

    /// E[e^{i⟨u, S_k F⟩}] = π·P_u^k·1.
    pub fn characteristic(&self, u: [f64; 2], k: usize) -> Complex64 {
        let d = self.states();
        let p = self.twisted_matrix(u);
        let mut h = vec![Complex64::new(1.0, 0.0); d];
        for _ in 0..k {
            h = matvec(&p, &h, d);
        }
        h.iter().zip(&self.pi).map(|(x, w)| x * w).sum()
    }

    /// Leading eigenpair of P_u: eigenvalues from a complex Schur
    /// decomposition, eigenvectors by shifted inverse iteration.
    pub fn leading_eigen(&self, u: [f64; 2]) -> Eigen {
        let d = self.states();
        let p = self.twisted_matrix(u);
        let (mut ev, rank) = eigenvalues_ranked(&p, d);
        ev.sort_by(|a, b| b.norm().total_cmp(&a.norm()));
        let lambda = ev[0];
        let second_modulus = ev.get(1).map_or(0.0, |z| z.norm());
        let (v, rr) = inverse_iteration(&p, d, lambda, false);
        let (w, rl) = inverse_iteration(&p, d, lambda, true);
        // Two-sided Rayleigh quotient: error quadratic in the vector error.
        let pv = matvec(&p, &v, d);
        let num: Complex64 = w.iter().zip(&pv).map(|(a, b)| a * b).sum();
        let den: Complex64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        let refined = rank == d && den.norm() > 1e-300 && (num / den).is_finite();
        let lambda = if refined { num / den } else { lambda };
        let tol = 1e-10 * (1.0 + lambda.norm());
        Eigen {
            lambda,
            projector: projector(&v, &w),
            right: v,
            left: w,
            second_modulus,
            converged: rr < tol && rl < tol,
        }
    }

    /// Σ² from the curvature of λ_u at 0: −2 ln|λ_{te}|/t² extrapolated
    /// to t → 0 along e₁, e₂ and e₁ + e₂.
    pub fn sigma2_spectral(&self, h: f64) -> [[f64; 2]; 2] {
        let q = |e: [f64; 2]| {
            let ts: Vec<f64> = (1..=6).map(|k| k as f64 * h).collect();
            let g: Vec<f64> = ts
                .iter()
                .map(|&t| {
                    let l = self.leading_eigen([t * e[0], t * e[1]]).lambda;
                    -2.0 * l.norm().ln() / (t * t)
                })
                .collect();
            let x: Vec<f64> = ts.iter().map(|t| t * t).collect();
            neville_at_zero(&x, &g)
        };
        let a = q([1.0, 0.0]);
        let b = q([0.0, 1.0]);
        let c = (q([1.0, 1.0]) - a - b) / 2.0;
        [[a, c], [c, b]]
    }

    /// Spectral audit of P_u over an n×n grid of [−π, π]².
    pub fn twisted_spectrum(&self, n: usize, powers: usize) -> TwistedSpectrum {
        let sigma2 = self.sigma2_spectral(0.02);
        let mut points = Vec::with_capacity(n * n);
        let mut gap_collapse = Vec::new();
        let mut worst_idempotence: f64 = 0.0;
        let mut worst_rate: f64 = 0.0;
        let mut residual_exact = true;
        let d = self.states();
        for a in 0..n {
            for b in 0..n {
                let u = [
                    -PI + 2.0 * PI * a as f64 / (n - 1) as f64,
                    -PI + 2.0 * PI * b as f64 / (n - 1) as f64,
                ];
                let e = self.leading_eigen(u);
                let zero = u[0] == 0.0 && u[1] == 0.0;
                if !zero && e.lambda.norm() > 1.0 - 1e-9 {
                    gap_collapse.push(u);
                }
                let gap_ok = e.lambda.norm() - e.second_modulus > 1e-3;
                if gap_ok {
                    let pp = matmul(&e.projector, &e.projector, d);
                    let err = pp
                        .iter()
                        .zip(&e.projector)
                        .map(|(x, y)| (x - y).norm())
                        .fold(0.0, f64::max);
                    worst_idempotence = worst_idempotence.max(err);
                    let fit = self.residual_rate(u, &e, powers);
                    if let Some(r) = fit.rate {
                        residual_exact = false;
                        worst_rate = worst_rate.max(r);
                    }
                }
                points.push(SpectrumPoint {
                    u,
                    lambda: [e.lambda.re, e.lambda.im],
                    second_modulus: e.second_modulus,
                    converged: e.converged,
                });
            }
        }
        let eps = self.expansion_exponent(&sigma2);
        let pi_c = self.projector_continuity();
        TwistedSpectrum {
            grid: n,
            points,
            sigma2,
            expansion_exponent: eps,
            projector_lipschitz: pi_c,
            max_idempotence_error: worst_idempotence,
            residual_rate: if residual_exact { 0.0 } else { worst_rate },
            residual_exact,
            gap_collapse,
        }
    }

    /// Fitted geometric rate of ‖P_uⁿ − λⁿΠ_u‖ over n ≤ `powers`; `None`
    /// when the residual is at roundoff level throughout (rank-one P_u).
    pub fn residual_rate(&self, u: [f64; 2], e: &Eigen, powers: usize) -> ResidualFit {
        let d = self.states();
        let p = self.twisted_matrix(u);
        let mut pn = p.clone();
        let mut ln = e.lambda;
        let mut ns = Vec::new();
        let mut logs = Vec::new();
        let mut norms = Vec::new();
        for n in 1..=powers {
            let r = pn
                .iter()
                .zip(&e.projector)
                .map(|(x, q)| (x - ln * q).norm())
                .fold(0.0, f64::max);
            norms.push(r);
            if r > 1e-12 {
                ns.push(n as f64);
                logs.push(r.ln());
            }
            pn = matmul(&pn, &p, d);
            ln *= e.lambda;
        }
        let rate = if ns.len() >= 3 {
            Some(ols(&ns, &logs).slope.exp())
        } else {
            None
        };
        ResidualFit { norms, rate }
    }

    /// Exponent p of |λ_u − e^{−⟨Σ²u,u⟩/2}| ~ |u|^p along e₁.
    fn expansion_exponent(&self, sigma2: &[[f64; 2]; 2]) -> f64 {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for k in 0..10 {
            let t = 0.05 * 1.25f64.powi(k);
            let l = self.leading_eigen([t, 0.0]).lambda;
            let g = (-0.5 * sigma2[0][0] * t * t).exp();
            let r = (l - g).norm();
            if r > 1e-13 {
                xs.push(t.ln());
                ys.push(r.ln());
            }
        }
        if xs.len() < 3 {
            return f64::INFINITY;
        }
        ols(&xs, &ys).slope
    }

    /// max ‖Π_u − Π₀‖/|u| over small |u|.
    fn projector_continuity(&self) -> f64 {
        let p0 = self.leading_eigen([0.0, 0.0]).projector;
        let mut c: f64 = 0.0;
        for k in 1..=20 {
            let t = 0.01 * k as f64;
            for u in [[t, 0.0], [0.0, t], [t, t]] {
                let pu = self.leading_eigen(u).projector;
                let diff = pu
                    .iter()
                    .zip(&p0)
                    .map(|(a, b)| (a - b).norm())
                    .fold(0.0, f64::max);
                c = c.max(diff / (u[0] * u[0] + u[1] * u[1]).sqrt());
            }
        }
        c
    }

    /// P(S_ℓF = a) for |a|∞ ≤ radius, started from π at the origin.
    pub fn exact_step_distribution(&self, ell: usize, radius: i64) -> Result<StepDistribution> {
        let mut dp = StepDp::new(self, radius, ell)?;
        for _ in 0..ell {
            dp.advance();
        }
        Ok(dp.snapshot())
    }

    /// P(S_ℓF = a) via the inverse Fourier sum of π·P_u^ℓ·1 on a grid of
    /// `n`² points; exact when n exceeds the support width.
    pub fn fourier_probability(&self, ell: usize, a: Cell, n: usize) -> f64 {
        let mut s = Complex64::new(0.0, 0.0);
        for i in 0..n {
            for j in 0..n {
                let u = [2.0 * PI * i as f64 / n as f64, 2.0 * PI * j as f64 / n as f64];
                let phase = Complex64::from_polar(1.0, -(u[0] * a[0] as f64 + u[1] * a[1] as f64));
                s += phase * self.characteristic(u, ell);
            }
        }
        s.re / (n * n) as f64
    }

    /// sup_a |P(S_ℓ = a) − Φ(a/√ℓ)/ℓ| at each ℓ, from one exact pass.
    pub fn local_limit_rate(&self, ells: &[usize]) -> Result<LocalLimitRate> {
        let mut sorted = ells.to_vec();
        sorted.sort_unstable();
        let max = *sorted.last().ok_or_else(|| Error::InvalidArgument("empty ℓ grid".into()))?;
        let sigma2 = self.diffusion_exact();
        let phi0 = phi0_of(&sigma2)?;
        let det = sigma2[0][0] * sigma2[1][1] - sigma2[0][1] * sigma2[1][0];
        let inv = [
            [sigma2[1][1] / det, -sigma2[0][1] / det],
            [-sigma2[1][0] / det, sigma2[0][0] / det],
        ];
        let radius = max as i64 * self.max_step();
        let mut dp = StepDp::new(self, radius, max)?;
        let mut errors = Vec::new();
        let mut p0 = Vec::new();
        let mut t = 0;
        for &ell in &sorted {
            while t < ell {
                dp.advance();
                t += 1;
            }
            let l = ell as f64;
            let mut sup: f64 = 0.0;
            dp.for_each_cell(|a, p| {
                let x = [a[0] as f64, a[1] as f64];
                let q = (inv[0][0] * x[0] * x[0] + 2.0 * inv[0][1] * x[0] * x[1] + inv[1][1] * x[1] * x[1]) / l;
                sup = sup.max((p - phi0 * (-0.5 * q).exp() / l).abs());
            });
            errors.push(sup);
            p0.push(l * dp.prob([0, 0]));
        }
        let xs: Vec<f64> = sorted.iter().map(|&l| (l as f64).ln()).collect();
        let ys: Vec<f64> = errors.iter().map(|e| e.ln()).collect();
        let slope = ols(&xs, &ys).slope;
        Ok(LocalLimitRate {
            ells: sorted,
            sup_errors: errors,
            ell_p0: p0,
            phi0,
            slope,
            decays: slope < -1.0 - 1e-3,
        })
    }

    /// Exact σ̃²(f) for f(x, a) = w(x₀)·c(a) with state weights w, as the
    /// series Σ_{a,b} c(a)c(b)[δ_ab E w² + 2 Σ_{k≥1} E[w(x₀)w(x_k)1{S_k = b−a}]]
    /// computed by dynamic programming over (state, cell).
    pub fn exact_green_kubo(&self, w: &[f64], cells: &[(Cell, f64)], kmax: usize, tol: f64) -> Result<ExactVariance> {
        let d = self.states();
        if w.len() != d {
            return Err(Error::InvalidArgument(format!("{} weights for {d} states", w.len())));
        }
        let e_w2: f64 = (0..d).map(|j| self.pi[j] * w[j] * w[j]).sum();
        let diag: f64 = cells.iter().map(|(_, c)| c * c).sum();
        let mut sigma2 = diag * e_w2;
        let span = cells
            .iter()
            .flat_map(|(a, _)| cells.iter().map(move |(b, _)| (b[0] - a[0]).abs().max((b[1] - a[1]).abs())))
            .max()
            .unwrap_or(0);
        let radius = (kmax as i64 * self.max_step()).min(span + kmax as i64 * self.max_step());
        let mut v = JointDp::weighted_start(self, w, radius);
        let mut terms = Vec::with_capacity(kmax);
        let lambda2 = self.mixing_modulus();
        let wmax = w.iter().map(|x| x.abs()).fold(0.0, f64::max);
        let mut certified = false;
        for _ in 0..kmax {
            v.advance(self);
            let mut term = 0.0;
            for (a, ca) in cells {
                for (b, cb) in cells {
                    let diff = [b[0] - a[0], b[1] - a[1]];
                    term += ca * cb * v.weighted_at(diff, w);
                }
            }
            terms.push(2.0 * term);
            sigma2 += 2.0 * term;
            if term.abs() < tol && terms.len() >= 3 && terms[terms.len() - 3..].iter().all(|t| t.abs() < 2.0 * tol) {
                certified = true;
                break;
            }
        }
        let k = terms.len() as f64;
        let tail = if lambda2 < 1.0 {
            2.0 * diag * wmax * wmax * lambda2.powf(k) / (1.0 - lambda2)
        } else {
            f64::INFINITY
        };
        if !certified && tail > tol {
            return Err(Error::TailNotCertified(format!(
                "terms above {tol} after {} lags (|λ₂| = {lambda2:.3})",
                terms.len()
            )));
        }
        Ok(ExactVariance {
            sigma2,
            terms,
            tail_bound: tail.min(tol),
            exact: true,
        })
    }

    /// Exact σ̂²(w·1₀) where the induced map is explicit: for IID chains the
    /// state at each return is π-distributed and independent of the past,
    /// and for F ≡ 0 the induced map is the chain itself.
    pub fn exact_induced_variance(&self, w: &[f64]) -> Option<f64> {
        let d = self.states();
        let mean: f64 = (0..d).map(|j| self.pi[j] * w[j]).sum();
        let e_w2: f64 = (0..d).map(|j| self.pi[j] * w[j] * w[j]).sum();
        let zero_steps = (0..d).all(|j| (0..d).all(|k| self.m[j][k] == 0.0 || self.step(j, k) == [0, 0]));
        if zero_steps {
            return Some(self.asymptotic_variance_state(w));
        }
        if self.iid && mean.abs() < 1e-15 {
            return Some(e_w2);
        }
        None
    }

    /// Asymptotic variance of Σ w(x_k) for the stationary chain.
    pub fn asymptotic_variance_state(&self, w: &[f64]) -> f64 {
        let d = self.states();
        let mean: f64 = (0..d).map(|j| self.pi[j] * w[j]).sum();
        let wc: Vec<f64> = w.iter().map(|x| x - mean).collect();
        let mut s: f64 = (0..d).map(|j| self.pi[j] * wc[j] * wc[j]).sum();
        // term_n = Σ_j π_j wc_j (Mⁿ wc)_j
        let mut h = wc.clone();
        for _ in 0..100_000 {
            h = (0..d).map(|j| (0..d).map(|k| self.m[j][k] * h[k]).sum()).collect();
            let t: f64 = (0..d).map(|j| self.pi[j] * wc[j] * h[j]).sum();
            s += 2.0 * t;
            if t.abs() < 1e-18 {
                break;
            }
        }
        s
    }

    /// Asymptotic variance of Σ w(x_k, x_{k+1}) for an edge observable.
    pub fn asymptotic_variance_edge(&self, w: &[Vec<f64>]) -> f64 {
        let d = self.states();
        let mean: f64 = (0..d)
            .map(|j| (0..d).map(|k| self.pi[j] * self.m[j][k] * w[j][k]).sum::<f64>())
            .sum();
        let mut s: f64 = (0..d)
            .map(|j| {
                (0..d)
                    .map(|k| self.pi[j] * self.m[j][k] * (w[j][k] - mean).powi(2))
                    .sum::<f64>()
            })
            .sum();
        // a_k = Σ_j π_j M_jk (w_jk − mean), b_l = Σ_m M_lm (w_lm − mean)
        let mut a: Vec<f64> = (0..d)
            .map(|k| (0..d).map(|j| self.pi[j] * self.m[j][k] * (w[j][k] - mean)).sum())
            .collect();
        let b: Vec<f64> = (0..d)
            .map(|l| (0..d).map(|m| self.m[l][m] * (w[l][m] - mean)).sum())
            .collect();
        for _ in 0..100_000 {
            let t: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            s += 2.0 * t;
            if t.abs() < 1e-18 {
                break;
            }
            a = (0..d).map(|k| (0..d).map(|j| a[j] * self.m[j][k]).sum()).collect();
        }
        s
    }

    /// Modulus of the second eigenvalue of M (0 for IID chains).
    pub fn mixing_modulus(&self) -> f64 {
        let d = self.states();
        let mut p = vec![Complex64::new(0.0, 0.0); d * d];
        for j in 0..d {
            for k in 0..d {
                p[j * d + k] = Complex64::new(self.m[j][k] - self.pi[k], 0.0);
            }
        }
        spectral_radius(&p, d)
    }
}

/// Leading eigenpair data of a twisted operator.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub lambda: Complex64,
    pub right: Vec<Complex64>,
    pub left: Vec<Complex64>,
    /// Π_u = v wᵀ/(wᵀv), row-major.
    pub projector: Vec<Complex64>,
    pub second_modulus: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpectrumPoint {
    pub u: [f64; 2],
    pub lambda: [f64; 2],
    pub second_modulus: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwistedSpectrum {
    pub grid: usize,
    pub points: Vec<SpectrumPoint>,
    pub sigma2: [[f64; 2]; 2],
    /// Fitted p in |λ_u − e^{−⟨Σ²u,u⟩/2}| ~ |u|^p (ε = p − 2).
    pub expansion_exponent: f64,
    pub projector_lipschitz: f64,
    pub max_idempotence_error: f64,
    /// Largest fitted geometric rate of the decomposition residual.
    pub residual_rate: f64,
    /// The residual stayed at roundoff level (rank-one operators).
    pub residual_exact: bool,
    /// Grid points u ≠ 0 with |λ_u| = 1 (periodicity of the walk).
    pub gap_collapse: Vec<[f64; 2]>,
}

impl TwistedSpectrum {
    pub fn require_gap(&self) -> Result<()> {
        match self.gap_collapse.first() {
            Some(u) => Err(Error::GapCollapse(u[0], u[1])),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ResidualFit {
    pub norms: Vec<f64>,
    pub rate: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalLimitRate {
    pub ells: Vec<usize>,
    pub sup_errors: Vec<f64>,
    /// ℓ·P(S_ℓ = 0).
    pub ell_p0: Vec<f64>,
    pub phi0: f64,
    pub slope: f64,
    /// Whether the error decays faster than 1/ℓ; false flags periodicity.
    pub decays: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExactVariance {
    pub sigma2: f64,
    pub terms: Vec<f64>,
    pub tail_bound: f64,
    pub exact: bool,
}

#[derive(Debug, Clone)]
pub struct StepDistribution {
    pub ell: usize,
    pub radius: i64,
    probs: Vec<f64>,
}

impl StepDistribution {
    pub fn prob(&self, a: Cell) -> f64 {
        let r = self.radius;
        if a[0].abs() > r || a[1].abs() > r {
            return 0.0;
        }
        let w = (2 * r + 1) as usize;
        self.probs[(a[1] + r) as usize * w + (a[0] + r) as usize]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    pub fn cells(&self) -> impl Iterator<Item = (Cell, f64)> + '_ {
        let r = self.radius;
        let w = (2 * r + 1) as usize;
        self.probs
            .iter()
            .enumerate()
            .filter(|(_, p)| **p != 0.0)
            .map(move |(i, p)| ([(i % w) as i64 - r, (i / w) as i64 - r], *p))
    }
}

/// Forward DP for P(S_t = a): a cell-only convolution for IID chains, a
/// joint (state, cell) recursion otherwise.
struct StepDp<'a> {
    chain: &'a OracleChain,
    radius: i64,
    width: usize,
    t: i64,
    /// Per state (one slot for IID), a (2R+1)² grid.
    cur: Vec<Vec<f64>>,
    next: Vec<Vec<f64>>,
}

impl<'a> StepDp<'a> {
    fn new(chain: &'a OracleChain, radius: i64, ell: usize) -> Result<Self> {
        let needed = ell as i64 * chain.max_step();
        if radius < needed {
            return Err(Error::TruncationError {
                box_radius: radius,
                needed,
            });
        }
        let width = (2 * radius + 1) as usize;
        let slots = if chain.iid { 1 } else { chain.states() };
        let mut cur = vec![vec![0.0; width * width]; slots];
        let origin = radius as usize * width + radius as usize;
        if chain.iid {
            cur[0][origin] = 1.0;
        } else {
            for (j, p) in chain.pi.iter().enumerate() {
                cur[j][origin] = *p;
            }
        }
        let next = cur.clone();
        Ok(Self {
            chain,
            radius,
            width,
            t: 0,
            cur,
            next,
        })
    }

    fn advance(&mut self) {
        let r = self.radius;
        let w = self.width as i64;
        let mstep = self.chain.max_step();
        // Support before the step is within |a|∞ ≤ t·max|F|.
        let lo = (r - self.t * mstep).max(0);
        let hi = (r + self.t * mstep).min(2 * r);
        let lo2 = (r - (self.t + 1) * mstep).max(0);
        let hi2 = (r + (self.t + 1) * mstep).min(2 * r);
        for slot in self.next.iter_mut() {
            for y in lo2..=hi2 {
                let row = (y * w) as usize;
                slot[row + lo2 as usize..=row + hi2 as usize].fill(0.0);
            }
        }
        let d = self.chain.states();
        if self.chain.iid {
            let cur = &self.cur[0];
            let next = &mut self.next[0];
            for j in 0..d {
                let p = self.chain.pi[j];
                if p == 0.0 {
                    continue;
                }
                let f = self.chain.step(j, 0);
                let shift = f[1] * w + f[0];
                for y in lo..=hi {
                    let row = y * w;
                    let src = &cur[(row + lo) as usize..=(row + hi) as usize];
                    let start = (row + lo + shift) as usize;
                    let dst = &mut next[start..start + src.len()];
                    for (o, i) in dst.iter_mut().zip(src) {
                        *o += p * i;
                    }
                }
            }
        } else {
            for j in 0..d {
                for k in 0..d {
                    let p = self.chain.m[j][k];
                    if p == 0.0 {
                        continue;
                    }
                    let f = self.chain.step(j, k);
                    let shift = f[1] * w + f[0];
                    let (cur, next) = (&self.cur[j], &mut self.next[k]);
                    for y in lo..=hi {
                        let row = y * w;
                        let src = &cur[(row + lo) as usize..=(row + hi) as usize];
                        let start = (row + lo + shift) as usize;
                        let dst = &mut next[start..start + src.len()];
                        for (o, i) in dst.iter_mut().zip(src) {
                            *o += p * i;
                        }
                    }
                }
            }
        }
        std::mem::swap(&mut self.cur, &mut self.next);
        self.t += 1;
    }

    fn prob(&self, a: Cell) -> f64 {
        let r = self.radius;
        let i = ((a[1] + r) * self.width as i64 + a[0] + r) as usize;
        self.cur.iter().map(|s| s[i]).sum()
    }

    fn for_each_cell<F: FnMut(Cell, f64)>(&self, mut f: F) {
        let r = self.radius;
        let m = (self.t * self.chain.max_step()).min(r);
        for y in -m..=m {
            for x in -m..=m {
                f([x, y], self.prob([x, y]));
            }
        }
    }

    fn snapshot(&self) -> StepDistribution {
        let n = self.width * self.width;
        let mut probs = vec![0.0; n];
        for s in &self.cur {
            for (o, p) in probs.iter_mut().zip(s) {
                *o += p;
            }
        }
        StepDistribution {
            ell: self.t as usize,
            radius: self.radius,
            probs,
        }
    }
}

/// DP for v_k(j, a) = E[w(x₀)·1{x_k = j, S_k = a}].
struct JointDp {
    radius: i64,
    width: usize,
    t: i64,
    cur: Vec<Vec<f64>>,
}

impl JointDp {
    fn weighted_start(chain: &OracleChain, w: &[f64], radius: i64) -> Self {
        let width = (2 * radius + 1) as usize;
        let d = chain.states();
        let mut cur = vec![vec![0.0; width * width]; d];
        let origin = radius as usize * width + radius as usize;
        for j in 0..d {
            cur[j][origin] = chain.pi[j] * w[j];
        }
        Self {
            radius,
            width,
            t: 0,
            cur,
        }
    }

    fn advance(&mut self, chain: &OracleChain) {
        let d = chain.states();
        let r = self.radius;
        let w = self.width as i64;
        let mut next = vec![vec![0.0; self.width * self.width]; d];
        let m = (self.t * chain.max_step()).min(r);
        for j in 0..d {
            for k in 0..d {
                let p = chain.m[j][k];
                if p == 0.0 {
                    continue;
                }
                let f = chain.step(j, k);
                for y in -m..=m {
                    for x in -m..=m {
                        let v = self.cur[j][((y + r) * w + x + r) as usize];
                        if v == 0.0 {
                            continue;
                        }
                        let (nx, ny) = (x + f[0], y + f[1]);
                        if nx.abs() <= r && ny.abs() <= r {
                            next[k][((ny + r) * w + nx + r) as usize] += p * v;
                        }
                    }
                }
            }
        }
        self.cur = next;
        self.t += 1;
    }

    /// Σ_j w_j v_k(j, a).
    fn weighted_at(&self, a: Cell, w: &[f64]) -> f64 {
        let r = self.radius;
        if a[0].abs() > r || a[1].abs() > r {
            return 0.0;
        }
        let i = ((a[1] + r) * self.width as i64 + a[0] + r) as usize;
        self.cur.iter().zip(w).map(|(s, wj)| s[i] * wj).sum()
    }
}

/// p_k = P(S_k = 0) for the walk with P(step = 0) = q0 and the rest
/// uniform on {±e₁, ±e₂}, for k < n:
/// p_k = Σ_j C(k, 2j) q0^{k−2j} (1−q0)^{2j} (C(2j, j)/4^j)².
pub fn lazy_return_probabilities(q0: f64, n: usize) -> Vec<f64> {
    // ln of (C(2j,j)/4^j)^2, by the ratio (2j−1)/(2j).
    let half = n / 2 + 1;
    let mut lq = vec![0.0; half];
    for j in 1..half {
        lq[j] = lq[j - 1] + 2.0 * ((2 * j - 1) as f64 / (2 * j) as f64).ln();
    }
    let mut lfact = vec![0.0; n + 1];
    for k in 1..=n {
        lfact[k] = lfact[k - 1] + (k as f64).ln();
    }
    let l1 = (1.0 - q0).ln();
    let l0 = if q0 > 0.0 { q0.ln() } else { f64::NEG_INFINITY };
    (0..n)
        .map(|k| {
            if q0 == 0.0 {
                return if k % 2 == 0 { lq[k / 2].exp() } else { 0.0 };
            }
            let mut s = 0.0;
            for j in 0..=k / 2 {
                let m = 2 * j;
                let lc = lfact[k] - lfact[m] - lfact[k - m];
                s += (lc + (k - m) as f64 * l0 + m as f64 * l1 + lq[j]).exp();
            }
            s
        })
        .collect()
}

/// First-return probabilities f_k from p_k = Σ_{j=1}^k f_j p_{k−j}.
pub fn first_returns(p: &[f64]) -> Vec<f64> {
    let n = p.len();
    let mut f = vec![0.0; n];
    for k in 1..n {
        let mut s = p[k];
        for j in 1..k {
            s -= f[j] * p[k - j];
        }
        f[k] = s;
    }
    f
}

/// Exact law of N₀(n) = #{0 ≤ k < n : S_k = 0} from first-return
/// probabilities (f.len() ≥ n), truncating once the remaining mass is
/// below `tol`.
pub fn local_time_law(f: &[f64], n: usize, tol: f64) -> Vec<f64> {
    // g_j(t) = P(j-th return at time t), t < n; P(N₀ ≥ j+1) = Σ_t g_j(t).
    let mut law = Vec::new();
    let mut g = vec![0.0; n];
    g[0] = 1.0;
    let mut prev_tail = 1.0;
    loop {
        let mut next = vec![0.0; n];
        for (t, &gt) in g.iter().enumerate() {
            if gt == 0.0 {
                continue;
            }
            for s in 1..n - t {
                next[t + s] += gt * f[s];
            }
        }
        let tail: f64 = next.iter().sum();
        law.push(prev_tail - tail);
        prev_tail = tail;
        g = next;
        if tail < tol {
            break;
        }
    }
    law
}

/// Visit counts of the lazy oracle walk and mark sums for the IID-mark
/// observable w·1₀, sampled at each checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalTimeSamples {
    pub checkpoints: Vec<u64>,
    /// visits[c][i] = N₀(checkpoint c) on trajectory i.
    pub visits: Vec<Vec<u32>>,
    /// marks[c][i] = Σ_{k<n, S_k=0} w_k on trajectory i.
    pub marks: Vec<Vec<f64>>,
}

/// Fast simulation of the lazy walk: twelve uniform base-5 digits are
/// taken from each 64-bit draw (two per multiplication by 25), and marks
/// uniform on `levels` standardized values are drawn at each visit.
pub fn simulate_lazy_local_times(
    trajectories: usize,
    checkpoints: &[u64],
    levels: usize,
    seed: u64,
) -> LocalTimeSamples {
    let mut cps = checkpoints.to_vec();
    cps.sort_unstable();
    let k = levels as f64;
    let scale = (3.0 / (k * k - 1.0)).sqrt();
    let mark_values: Vec<f64> = (0..levels).map(|l| scale * (2.0 * l as f64 + 1.0 - k)).collect();
    let per: Vec<(Vec<u32>, Vec<f64>)> = (0..trajectories)
        .into_par_iter()
        .map(|i| lazy_trajectory(&cps, &mark_values, stream_rng(seed, i as u64)))
        .collect();
    let mut visits = vec![Vec::with_capacity(trajectories); cps.len()];
    let mut marks = vec![Vec::with_capacity(trajectories); cps.len()];
    for (v, m) in per {
        for c in 0..cps.len() {
            visits[c].push(v[c]);
            marks[c].push(m[c]);
        }
    }
    LocalTimeSamples {
        checkpoints: cps,
        visits,
        marks,
    }
}

const LAZY_DX: [i32; 5] = [0, 1, -1, 0, 0];
const LAZY_DY: [i32; 5] = [0, 0, 0, 1, -1];

fn lazy_trajectory(cps: &[u64], marks: &[f64], mut rng: StreamRng) -> (Vec<u32>, Vec<f64>) {
    let mut x = 0i32;
    let mut y = 0i32;
    let mut visits = 0u32;
    let mut msum = 0.0;
    let mut out_v = Vec::with_capacity(cps.len());
    let mut out_m = Vec::with_capacity(cps.len());
    let levels = marks.len() as u64;
    let visit = |rng: &mut StreamRng, visits: &mut u32, msum: &mut f64| {
        *visits += 1;
        let l = ((rng.next_u64() as u128 * levels as u128) >> 64) as usize;
        *msum += marks[l];
    };
    let mut t = 0u64;
    // The walk is at S_t before step t; S_0 = 0 counts as a visit.
    for &target in cps {
        while t < target {
            let remaining = target - t;
            if remaining >= 12 {
                let mut r = rng.next_u64();
                for _ in 0..6 {
                    let wide = r as u128 * 25;
                    let pair = (wide >> 64) as usize;
                    r = wide as u64;
                    if x == 0 && y == 0 {
                        visit(&mut rng, &mut visits, &mut msum);
                    }
                    x += LAZY_DX[pair / 5];
                    y += LAZY_DY[pair / 5];
                    if x == 0 && y == 0 {
                        visit(&mut rng, &mut visits, &mut msum);
                    }
                    x += LAZY_DX[pair % 5];
                    y += LAZY_DY[pair % 5];
                }
                t += 12;
            } else {
                let r = rng.next_u64();
                let digit = ((r as u128 * 5) >> 64) as usize;
                if x == 0 && y == 0 {
                    visit(&mut rng, &mut visits, &mut msum);
                }
                x += LAZY_DX[digit];
                y += LAZY_DY[digit];
                t += 1;
            }
        }
        out_v.push(visits);
        out_m.push(msum);
    }
    (out_v, out_m)
}

/// Base point (x_k, x_{k+1}) of the oracle extension.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OracleBase {
    pub current: usize,
    pub next: usize,
}

/// f(x, a) = w(x_k, x_{k+1})·c(a) with state or edge weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleObservable {
    pub weights: OracleWeights,
    pub cells: Vec<(Cell, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleWeights {
    One,
    State(Vec<f64>),
    Edge(Vec<Vec<f64>>),
}

impl OracleObservable {
    pub fn indicator(cell: Cell) -> Self {
        Self {
            weights: OracleWeights::One,
            cells: vec![(cell, 1.0)],
        }
    }

    pub fn marks_at_origin(w: Vec<f64>) -> Self {
        Self {
            weights: OracleWeights::State(w),
            cells: vec![([0, 0], 1.0)],
        }
    }

    #[inline]
    fn weight(&self, b: &OracleBase) -> f64 {
        match &self.weights {
            OracleWeights::One => 1.0,
            OracleWeights::State(w) => w[b.current],
            OracleWeights::Edge(w) => w[b.current][b.next],
        }
    }

    #[inline]
    fn coefficient(&self, cell: Cell) -> f64 {
        self.cells.iter().filter(|(a, _)| *a == cell).map(|(_, c)| c).sum()
    }
}

impl Dynamics for OracleChain {
    type Base = OracleBase;
    type Observable = OracleObservable;
    type FlowObservable = OracleObservable;

    fn sample_base(&self, rng: &mut StreamRng) -> OracleBase {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut current = self.states() - 1;
        for (j, p) in self.pi.iter().enumerate() {
            acc += p;
            if u < acc {
                current = j;
                break;
            }
        }
        OracleBase {
            current,
            next: self.next_state(current, rng),
        }
    }

    #[inline]
    fn advance(&self, base: &mut OracleBase, rng: &mut StreamRng) -> Result<Step> {
        let jump = self.step(base.current, base.next);
        base.current = base.next;
        base.next = self.next_state(base.current, rng);
        Ok(Step { jump, tau: 1.0 })
    }

    #[inline]
    fn observe(&self, obs: &OracleObservable, base: &OracleBase, cell: Cell) -> Result<f64> {
        let c = obs.coefficient(cell);
        Ok(if c == 0.0 { 0.0 } else { c * obs.weight(base) })
    }

    fn support(&self, obs: &OracleObservable) -> Vec<Cell> {
        let mut s: Vec<Cell> = obs.cells.iter().filter(|(_, c)| *c != 0.0).map(|(a, _)| *a).collect();
        s.sort_unstable();
        s.dedup();
        s
    }

    /// The flow spends one time unit on each state; the observable is
    /// constant along it.
    fn flow_segment(&self, obs: &OracleObservable, base: &OracleBase, cell: Cell, tau: f64, upto: f64) -> Result<f64> {
        Ok(self.observe(obs, base, cell)? * upto.min(tau))
    }

    fn flow_support(&self, obs: &OracleObservable) -> Vec<Cell> {
        self.support(obs)
    }

    fn mean_roof(&self) -> f64 {
        1.0
    }
}

/// Translate a cell by a step; exposed for tests of the extension.
pub fn shift(a: Cell, f: Cell) -> Cell {
    cell_add(a, f)
}

fn primitive(m: &[Vec<f64>]) -> bool {
    // Wielandt: a primitive d×d matrix has M^k > 0 for k = (d−1)² + 1.
    let d = m.len();
    let pattern: Vec<Vec<bool>> = m.iter().map(|r| r.iter().map(|&p| p > 0.0).collect()).collect();
    let mut pow = pattern.clone();
    let k = (d - 1) * (d - 1) + 1;
    for _ in 1..k {
        if pow.iter().all(|r| r.iter().all(|&b| b)) {
            return true;
        }
        let mut next = vec![vec![false; d]; d];
        for i in 0..d {
            for l in 0..d {
                if pow[i][l] {
                    for j in 0..d {
                        next[i][j] |= pattern[l][j];
                    }
                }
            }
        }
        pow = next;
    }
    pow.iter().all(|r| r.iter().all(|&b| b))
}

fn stationary(m: &[Vec<f64>]) -> Vec<f64> {
    let d = m.len();
    let mut pi = vec![1.0 / d as f64; d];
    for _ in 0..1_000_000 {
        let mut next = vec![0.0; d];
        for j in 0..d {
            for k in 0..d {
                next[k] += pi[j] * m[j][k];
            }
        }
        let s: f64 = next.iter().sum();
        next.iter_mut().for_each(|x| *x /= s);
        let diff = next.iter().zip(&pi).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        pi = next;
        if diff < 1e-17 {
            break;
        }
    }
    pi
}

fn matvec(p: &[Complex64], h: &[Complex64], d: usize) -> Vec<Complex64> {
    (0..d)
        .map(|k| (0..d).map(|j| p[k * d + j] * h[j]).sum())
        .collect()
}

fn matmul(a: &[Complex64], b: &[Complex64], d: usize) -> Vec<Complex64> {
    let mut c = vec![Complex64::new(0.0, 0.0); d * d];
    for i in 0..d {
        for l in 0..d {
            let x = a[i * d + l];
            if x == Complex64::new(0.0, 0.0) {
                continue;
            }
            for j in 0..d {
                c[i * d + j] += x * b[l * d + j];
            }
        }
    }
    c
}

fn eigenvalues(p: &[Complex64], d: usize) -> Vec<Complex64> {
    eigenvalues_ranked(p, d).0
}

/// Eigenvalues with the numerical rank. A rank-deficient P = Q R Πᵀ
/// (column-pivoted QR) is compressed to (R Πᵀ)ᵣ Qᵣ, whose spectrum is the
/// nonzero part of P's; this keeps small nonzero eigenvalues away from the
/// defective zero block.
fn eigenvalues_ranked(p: &[Complex64], d: usize) -> (Vec<Complex64>, usize) {
    let nan = || (vec![Complex64::new(f64::NAN, 0.0); d], d);
    let m = DMatrix::from_row_slice(d, d, p);
    let qr = m.clone().col_piv_qr();
    let mut r_mat = qr.r();
    let lead = r_mat[(0, 0)].norm();
    let tol = 1e-13 * lead.max(f64::MIN_POSITIVE) * d as f64;
    let r = (0..d).take_while(|&i| r_mat[(i, i)].norm() > tol).count();
    if r == d || r == 0 {
        return match m.schur().eigenvalues() {
            Some(e) => (e.iter().copied().collect(), d),
            None => nan(),
        };
    }
    let q = qr.q();
    qr.p().inv_permute_columns(&mut r_mat);
    let k = r_mat.rows(0, r) * q.columns(0, r);
    let Some(e) = k.schur().eigenvalues() else { return nan() };
    let mut out: Vec<Complex64> = e.iter().copied().collect();
    out.resize(d, Complex64::new(0.0, 0.0));
    (out, r)
}

/// Eigenvector of P (of Pᵀ if `transpose`) for the eigenvalue `lambda`,
/// with the residual ‖P v − λ v‖ of the normalized result.
fn inverse_iteration(p: &[Complex64], d: usize, lambda: Complex64, transpose: bool) -> (Vec<Complex64>, f64) {
    let mut m = DMatrix::from_row_slice(d, d, p);
    if transpose {
        m.transpose_mut();
    }
    let shift = lambda + Complex64::new(1e-10 * (1.0 + lambda.norm()), 0.0);
    let mut a = m.clone();
    for i in 0..d {
        a[(i, i)] -= shift;
    }
    let lu = a.lu();
    let mut v = DVector::from_fn(d, |j, _| Complex64::new(1.0 + 0.1 * (j as f64 + 1.0).sin(), 0.0));
    for _ in 0..3 {
        match lu.solve(&v) {
            Some(x) => v = x,
            None => break,
        }
        let n = v.norm();
        if n == 0.0 || !n.is_finite() {
            break;
        }
        v /= Complex64::new(n, 0.0);
    }
    let resid = (&m * &v - &v * lambda).norm();
    (v.iter().copied().collect(), resid)
}

fn projector(v: &[Complex64], w: &[Complex64]) -> Vec<Complex64> {
    let d = v.len();
    let s: Complex64 = w.iter().zip(v).map(|(a, b)| a * b).sum();
    let mut p = vec![Complex64::new(0.0, 0.0); d * d];
    for i in 0..d {
        for j in 0..d {
            p[i * d + j] = v[i] * w[j] / s;
        }
    }
    p
}

fn spectral_radius(a: &[Complex64], d: usize) -> f64 {
    let r = eigenvalues(a, d).iter().map(|z| z.norm()).fold(0.0, f64::max);
    if r < 1e-12 {
        0.0
    } else {
        r
    }
}

/// Value at 0 of the interpolating polynomial through (xᵢ, yᵢ).
fn neville_at_zero(x: &[f64], y: &[f64]) -> f64 {
    let mut p = y.to_vec();
    let n = x.len();
    for m in 1..n {
        for i in 0..n - m {
            p[i] = (x[i + m] * p[i] - x[i] * p[i + 1]) / (x[i + m] - x[i]);
        }
    }
    p[0]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lazy_walk_eigenvalue_closed_form() {
        let c = OracleChain::lazy_walk();
        for &(a, b) in &[(0.3, -1.2), (2.0, 0.5), (0.0, 0.0), (-3.0, 3.0)] {
            let e = c.leading_eigen([a, b]);
            let exact = (1.0 + 2.0 * f64::cos(a) + 2.0 * f64::cos(b)) / 5.0;
            assert!((e.lambda.re - exact).abs() < 1e-12, "{} vs {exact}", e.lambda);
            assert!(e.lambda.im.abs() < 1e-12);
        }
    }

    #[test]
    fn simple_walk_flags_periodicity() {
        let c = OracleChain::simple_walk();
        let e = c.leading_eigen([PI, PI]);
        assert!((e.lambda.re + 1.0).abs() < 1e-12);
        let s = c.twisted_spectrum(11, 10);
        assert!(s.require_gap().is_err());
    }

    #[test]
    fn sigma2_spectral_matches_exact() {
        let c = OracleChain::lazy_walk();
        let s = c.sigma2_spectral(0.05);
        assert!((s[0][0] - 0.4).abs() < 1e-10 && (s[1][1] - 0.4).abs() < 1e-10);
        assert!(s[0][1].abs() < 1e-10);
        let p = OracleChain::persistent_lazy_walk(0.5).unwrap();
        let s = p.sigma2_spectral(0.02);
        let exact = 0.4 * 1.5 / 0.5;
        assert!((s[0][0] - exact).abs() < 1e-9, "{s:?}");
        let e = p.diffusion_exact();
        assert!((e[0][0] - exact).abs() < 1e-12);
    }

    #[test]
    fn characteristic_function_at_two_steps() {
        let c = OracleChain::simple_walk();
        let u: [f64; 2] = [0.7, -0.4];
        let l = (u[0].cos() + u[1].cos()) / 2.0;
        assert!((c.characteristic(u, 2) - Complex64::new(l * l, 0.0)).norm() < 1e-14);
        let t = c.twisted_matrix([-0.7, 0.4]);
        let tc = c.twisted_matrix(u);
        assert!(t.iter().zip(&tc).all(|(a, b)| (a - b.conj()).norm() < 1e-15));
    }

    #[test]
    fn two_step_return_probability() {
        let c = OracleChain::simple_walk();
        let d = c.exact_step_distribution(2, 2).unwrap();
        assert!((d.prob([0, 0]) - 0.25).abs() < 1e-16);
        assert!((d.total() - 1.0).abs() < 1e-15);
        assert!(c.exact_step_distribution(3, 2).is_err());
    }

    #[test]
    fn markov_dp_matches_fourier() {
        let c = OracleChain::persistent_lazy_walk(0.3).unwrap();
        let d = c.exact_step_distribution(6, 6).unwrap();
        for a in [[0, 0], [1, 0], [2, -1], [3, 3]] {
            let f = c.fourier_probability(6, a, 16);
            assert!((d.prob(a) - f).abs() < 1e-12, "{a:?}");
        }
    }

    #[test]
    fn closed_form_return_probabilities_match_dp() {
        let c = OracleChain::lazy_walk();
        let p = lazy_return_probabilities(0.2, 30);
        for k in [1usize, 2, 5, 17, 29] {
            let d = c.exact_step_distribution(k, k as i64).unwrap();
            assert!((d.prob([0, 0]) - p[k]).abs() < 1e-13, "k={k}");
        }
    }

    #[test]
    fn local_time_law_is_a_distribution() {
        let p = lazy_return_probabilities(0.2, 200);
        let f = first_returns(&p);
        let law = local_time_law(&f, 200, 1e-14);
        let total: f64 = law.iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        // Mean equals the Green function Σ_{k<n} p_k.
        let mean: f64 = law.iter().enumerate().map(|(j, q)| (j + 1) as f64 * q).sum();
        let green: f64 = p.iter().sum();
        assert!((mean - green).abs() < 1e-9);
        // n = 1: N₀ = 1 deterministically.
        assert_eq!(local_time_law(&f, 1, 1e-14), vec![1.0]);
    }

    #[test]
    fn coboundary_edge_observable_has_zero_variance() {
        let c = OracleChain::persistent_lazy_walk(0.4).unwrap();
        let v = [0.3, -1.0, 2.0, 0.5, -0.7];
        let w: Vec<Vec<f64>> = (0..5).map(|j| (0..5).map(|k| v[j] - v[k]).collect()).collect();
        assert!(c.asymptotic_variance_edge(&w).abs() < 1e-12);
    }

    #[test]
    fn exact_green_kubo_marks() {
        let (c, w) = OracleChain::lazy_walk().with_marks(4).unwrap();
        let r = c.exact_green_kubo(&w, &[([0, 0], 1.0)], 20, 1e-14).unwrap();
        assert!((r.sigma2 - 1.0).abs() < 1e-12, "{}", r.sigma2);
        assert!((c.exact_induced_variance(&w).unwrap() - 1.0).abs() < 1e-14);
        let zero = vec![0.0; w.len()];
        let r = c.exact_green_kubo(&zero, &[([0, 0], 1.0)], 5, 1e-14).unwrap();
        assert_eq!(r.sigma2, 0.0);
    }
}
