//! Estimators of the limit-law constants: the diffusion matrix Σ², Φ(0),
//! the Green–Kubo variance σ̃²(f), the excursion variance σ̂²(f) and
//! empirical local-limit profiles.
//!
//! Every estimator runs stationary trajectories started from μ on
//! independent per-index streams and reduces them through mergeable
//! sufficient statistics in fixed batch order, so results do not depend on
//! the thread count. Standard errors are batch means over trajectory
//! batches.

use crate::dynamics::excursion;
use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::stats::{mean, KahanSum};
use crate::system::{cell_add, cell_sub, with_retries, Cell, Dynamics, ORIGIN};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::f64::consts::PI;

pub type Matrix2 = [[f64; 2]; 2];

/// Φ(0) = 1/(2π√det Σ²).
pub fn phi0_of(sigma2: &Matrix2) -> Result<f64> {
    let det = det2(sigma2);
    if !(det > 0.0) {
        return Err(Error::DegenerateMatrix(det));
    }
    Ok(1.0 / (2.0 * PI * det.sqrt()))
}

fn det2(m: &Matrix2) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

fn sym_eigenvalues(m: &Matrix2) -> [f64; 2] {
    let tr = m[0][0] + m[1][1];
    let off = 0.5 * (m[0][1] + m[1][0]);
    let disc = ((m[0][0] - m[1][1]).powi(2) / 4.0 + off * off).sqrt();
    [tr / 2.0 - disc, tr / 2.0 + disc]
}

/// Batch decomposition of `count` items: batch b covers
/// [b·count/batches, (b+1)·count/batches).
fn batch_ranges(count: usize, batches: usize) -> Vec<(usize, usize)> {
    let b = batches.clamp(1, count.max(1));
    (0..b).map(|i| (i * count / b, (i + 1) * count / b)).collect()
}

/// Mean and batch-means stderr of Σ numerators / Σ denominators over batches.
fn ratio_stderr(num: &[f64], den: &[f64]) -> (f64, f64) {
    let total: f64 = den.iter().sum();
    let value = num.iter().sum::<f64>() / total;
    let vals: Vec<f64> = num
        .iter()
        .zip(den)
        .filter(|(_, d)| **d > 0.0)
        .map(|(n, d)| n / d)
        .collect();
    let b = vals.len();
    if b < 2 {
        return (value, f64::NAN);
    }
    let m = mean(&vals);
    let var = vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (b as f64 - 1.0);
    (value, (var / b as f64).sqrt())
}

/// How the Green–Kubo series beyond the window is accounted for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TailModel {
    /// Report the window sum as is.
    None,
    /// Fit c/k² on the upper half of the window and add Σ_{k>K} c/k².
    InverseSquare,
}

/// Sampling plan shared by the trajectory-based estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Trajectories in the main pass.
    pub trajectories: usize,
    /// Collisions per trajectory.
    pub length: usize,
    /// Trajectories used to tabulate every lag up to `window_cap` and pick
    /// the window.
    pub pilot_trajectories: usize,
    pub window_cap: usize,
    /// Fixed window, bypassing automatic selection.
    pub window: Option<usize>,
    pub batches: usize,
    pub burn_in: usize,
    pub seed: u64,
    /// Fail with WindowTooSmall instead of flagging the report.
    pub strict_window: bool,
    pub tail: TailModel,
    /// Centering test |I(f)| ≤ k·stderr.
    pub centering_sigmas: f64,
    pub retry_budget: u32,
    /// Times n for the cross-check E[S_nF ⊗ S_nF]/n.
    pub direct_times: Vec<usize>,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            trajectories: 2_000,
            length: 10_000,
            pilot_trajectories: 256,
            window_cap: 200,
            window: None,
            batches: 64,
            burn_in: 0,
            seed: 1,
            strict_window: false,
            tail: TailModel::InverseSquare,
            centering_sigmas: 2.0,
            retry_budget: 8,
            direct_times: vec![1_000, 10_000],
        }
    }
}

/// One stationary trajectory: cells P_t (t ≤ L) and per-observable values
/// f(x_t, s) on the support cells s.
struct Path {
    cells: Vec<Cell>,
    values: Vec<Vec<f64>>,
}

fn sample_path<D: Dynamics>(
    d: &D,
    observables: &[&D::Observable],
    supports: &[Vec<Cell>],
    cfg: &EstimatorConfig,
    stream: u64,
) -> Result<Path> {
    let mut rng = stream_rng(cfg.seed, stream);
    let mut x = d.sample_base(&mut rng);
    for _ in 0..cfg.burn_in {
        d.advance(&mut x, &mut rng)?;
    }
    let l = cfg.length;
    let mut cells = Vec::with_capacity(l + 1);
    let mut values: Vec<Vec<f64>> = supports.iter().map(|s| Vec::with_capacity(l * s.len())).collect();
    let mut a = ORIGIN;
    let mut buf = vec![0.0; supports.iter().map(Vec::len).max().unwrap_or(0)];
    cells.push(a);
    for _ in 0..l {
        for ((f, s), v) in observables.iter().zip(supports).zip(values.iter_mut()) {
            // f(x_t, s) on the support; the cell label only shifts which
            // support cell is hit, values depend on x_t.
            let out = &mut buf[..s.len()];
            d.observe_many(f, &x, s, out)?;
            v.extend_from_slice(out);
        }
        let step = d.advance(&mut x, &mut rng)?;
        a = cell_add(a, step.jump);
        cells.push(a);
    }
    Ok(Path { cells, values })
}

/// Sliding sum W(c) = Σ_{t∈window} f(x_t, c + P_t) on a flat grid of
/// anchor labels c = s − P_t.
struct LabelGrid {
    x0: i64,
    y0: i64,
    w: i64,
    data: Vec<f64>,
}

impl LabelGrid {
    fn new(support: &[Cell], cells: &[Cell]) -> Self {
        let (mut pminx, mut pmaxx, mut pminy, mut pmaxy) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
        for p in cells {
            pminx = pminx.min(p[0]);
            pmaxx = pmaxx.max(p[0]);
            pminy = pminy.min(p[1]);
            pmaxy = pmaxy.max(p[1]);
        }
        let sminx = support.iter().map(|s| s[0]).min().unwrap_or(0);
        let smaxx = support.iter().map(|s| s[0]).max().unwrap_or(0);
        let sminy = support.iter().map(|s| s[1]).min().unwrap_or(0);
        let smaxy = support.iter().map(|s| s[1]).max().unwrap_or(0);
        let x0 = sminx - pmaxx;
        let y0 = sminy - pmaxy;
        let w = smaxx - pminx - x0 + 1;
        let h = smaxy - pminy - y0 + 1;
        Self {
            x0,
            y0,
            w,
            data: vec![0.0; (w * h) as usize],
        }
    }

    #[inline]
    fn idx(&self, c: Cell) -> usize {
        ((c[1] - self.y0) * self.w + c[0] - self.x0) as usize
    }

    #[inline]
    fn add(&mut self, support: &[Cell], p: Cell, vals: &[f64], sign: f64) {
        for (s, v) in support.iter().zip(vals) {
            if *v != 0.0 {
                let i = self.idx(cell_sub(*s, p));
                self.data[i] += sign * v;
            }
        }
    }

    #[inline]
    fn dot(&self, support: &[Cell], p: Cell, vals: &[f64]) -> f64 {
        let mut s = 0.0;
        for (c, v) in support.iter().zip(vals) {
            if *v != 0.0 {
                s += v * self.data[self.idx(cell_sub(*c, p))];
            }
        }
        s
    }
}

/// Per-trajectory sufficient statistics of one observable.
#[derive(Debug, Clone, Default)]
struct LagStats {
    /// Σ_t Σ_s f(x_t, s)² and Σ_t Σ_s f(x_t, s) over all t < L.
    zero: f64,
    integral: f64,
    steps: f64,
    /// Σ_j Σ_s f(x_j,s) Σ_{k=1..K} f(T̃ᵏ(x_j,s)) over anchors j < L − K.
    windowed: f64,
    anchors: f64,
    /// Per-lag sums for k = 1..=cap (pilot only) over anchors j < L − cap.
    lags: Vec<f64>,
    lag_anchors: f64,
}

impl LagStats {
    fn merge(&mut self, o: &LagStats) {
        self.zero += o.zero;
        self.integral += o.integral;
        self.steps += o.steps;
        self.windowed += o.windowed;
        self.anchors += o.anchors;
        if self.lags.len() < o.lags.len() {
            self.lags.resize(o.lags.len(), 0.0);
        }
        for (a, b) in self.lags.iter_mut().zip(&o.lags) {
            *a += b;
        }
        self.lag_anchors += o.lag_anchors;
    }
}

fn path_stats(path: &Path, support: &[Cell], values: &[f64], window: usize, lag_cap: usize) -> LagStats {
    let m = support.len();
    let l = path.cells.len() - 1;
    let row = |t: usize| &values[t * m..(t + 1) * m];
    let mut st = LagStats::default();
    let mut zero = KahanSum::new();
    let mut integral = KahanSum::new();
    for t in 0..l {
        for v in row(t) {
            zero.add(v * v);
            integral.add(*v);
        }
    }
    st.zero = zero.value();
    st.integral = integral.value();
    st.steps = l as f64;
    if window > 0 && l > window {
        let mut grid = LabelGrid::new(support, &path.cells);
        for t in 1..=window {
            grid.add(support, path.cells[t], row(t), 1.0);
        }
        let mut acc = KahanSum::new();
        for j in 0..l - window {
            acc.add(grid.dot(support, path.cells[j], row(j)));
            grid.add(support, path.cells[j + 1], row(j + 1), -1.0);
            if j + window + 1 < l {
                grid.add(support, path.cells[j + window + 1], row(j + window + 1), 1.0);
            }
        }
        st.windowed = acc.value();
        st.anchors = (l - window) as f64;
    }
    if lag_cap > 0 && l > lag_cap {
        let index: BTreeMap<Cell, usize> = support.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let reach = support
            .iter()
            .flat_map(|a| support.iter().map(move |b| cell_sub(*b, *a)))
            .map(|d| d[0].abs().max(d[1].abs()))
            .max()
            .unwrap_or(0);
        let mut lags = vec![0.0; lag_cap];
        for j in 0..l - lag_cap {
            let vj = row(j);
            if vj.iter().all(|v| *v == 0.0) {
                continue;
            }
            let pj = path.cells[j];
            for k in 1..=lag_cap {
                // f(T̃ᵏ(x_j, s)) = f(x_{j+k}, s + P_{j+k} − P_j)
                let dd = cell_sub(path.cells[j + k], pj);
                if dd[0].abs() > reach || dd[1].abs() > reach {
                    continue;
                }
                let vk = row(j + k);
                let mut s = 0.0;
                for (i, a) in support.iter().enumerate() {
                    if vj[i] != 0.0 {
                        if let Some(&ip) = index.get(&cell_add(*a, dd)) {
                            s += vj[i] * vk[ip];
                        }
                    }
                }
                lags[k - 1] += s;
            }
        }
        st.lags = lags;
        st.lag_anchors = (l - lag_cap) as f64;
    }
    st
}

/// Run `count` trajectories starting at stream `first`, reducing each
/// batch with `reduce` in batch order.
fn batched<T, F>(count: usize, batches: usize, first: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize, usize) -> Result<T> + Sync,
{
    batch_ranges(count, batches)
        .into_par_iter()
        .map(|(lo, hi)| f(first + lo, first + hi))
        .collect()
}

/// Σ² with its lag table and the direct cross-check.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiffusionMatrix {
    pub sigma2: Matrix2,
    pub stderr: Matrix2,
    pub window: usize,
    pub window_ok: bool,
    /// C_k = E[F ⊗ F∘Tᵏ] for k = 0..=cap (pilot ensemble).
    pub lag_terms: Vec<Matrix2>,
    pub lag_stderr: Vec<Matrix2>,
    pub direct: Vec<DirectEstimate>,
    pub eigenvalues: [f64; 2],
    pub psd_ok: bool,
    pub trajectories: usize,
    pub length: usize,
    pub retries: u32,
}

/// E[S_nF ⊗ S_nF]/n.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DirectEstimate {
    pub n: usize,
    pub sigma2: Matrix2,
    pub stderr: Matrix2,
}

impl DiffusionMatrix {
    /// Φ(0) with first-order delta-method stderr.
    pub fn phi0(&self) -> Result<(f64, f64)> {
        let p = phi0_of(&self.sigma2)?;
        let s = &self.sigma2;
        let e = &self.stderr;
        let off = 0.5 * (s[0][1] + s[1][0]);
        let se_off = 0.5 * (e[0][1] + e[1][0]);
        let var_det = (s[1][1] * e[0][0]).powi(2) + (s[0][0] * e[1][1]).powi(2) + (2.0 * off * se_off).powi(2);
        Ok((p, p / (2.0 * det2(s)) * var_det.sqrt()))
    }
}

#[derive(Default, Clone)]
struct JumpStats {
    c0: [f64; 4],
    windowed: [f64; 4],
    anchors: f64,
    steps: f64,
    lags: Vec<[f64; 4]>,
    lag_anchors: f64,
    direct: Vec<[f64; 4]>,
    direct_count: f64,
    retries: u32,
}

impl JumpStats {
    fn merge(&mut self, o: &JumpStats) {
        for i in 0..4 {
            self.c0[i] += o.c0[i];
            self.windowed[i] += o.windowed[i];
        }
        self.anchors += o.anchors;
        self.steps += o.steps;
        if self.lags.len() < o.lags.len() {
            self.lags.resize(o.lags.len(), [0.0; 4]);
        }
        for (a, b) in self.lags.iter_mut().zip(&o.lags) {
            for i in 0..4 {
                a[i] += b[i];
            }
        }
        self.lag_anchors += o.lag_anchors;
        if self.direct.len() < o.direct.len() {
            self.direct.resize(o.direct.len(), [0.0; 4]);
        }
        for (a, b) in self.direct.iter_mut().zip(&o.direct) {
            for i in 0..4 {
                a[i] += b[i];
            }
        }
        self.direct_count += o.direct_count;
        self.retries += o.retries;
    }
}

#[inline]
fn outer(a: Cell, b: Cell) -> [f64; 4] {
    [
        (a[0] * b[0]) as f64,
        (a[0] * b[1]) as f64,
        (a[1] * b[0]) as f64,
        (a[1] * b[1]) as f64,
    ]
}

fn jump_stats(cells: &[Cell], window: usize, lag_cap: usize, direct: &[usize]) -> JumpStats {
    let l = cells.len() - 1;
    let f: Vec<Cell> = (0..l).map(|t| cell_sub(cells[t + 1], cells[t])).collect();
    let mut st = JumpStats::default();
    for ft in &f {
        let o = outer(*ft, *ft);
        for i in 0..4 {
            st.c0[i] += o[i];
        }
    }
    st.steps = l as f64;
    if l > window {
        for j in 0..l - window {
            // Σ_{k=1..K} F_{j+k} = P_{j+K+1} − P_{j+1}
            let o = outer(f[j], cell_sub(cells[j + window + 1], cells[j + 1]));
            for i in 0..4 {
                st.windowed[i] += o[i];
            }
        }
        st.anchors = (l - window) as f64;
    }
    if lag_cap > 0 && l > lag_cap {
        let mut lags = vec![[0.0; 4]; lag_cap];
        for j in 0..l - lag_cap {
            let a = f[j];
            if a == ORIGIN {
                continue;
            }
            for k in 1..=lag_cap {
                let b = f[j + k];
                let o = outer(a, b);
                for i in 0..4 {
                    lags[k - 1][i] += o[i];
                }
            }
        }
        st.lags = lags;
        st.lag_anchors = (l - lag_cap) as f64;
    }
    st.direct = direct
        .iter()
        .map(|&n| {
            let p = cells[n.min(l)];
            let o = outer(p, p);
            [o[0] / n as f64, o[1] / n as f64, o[2] / n as f64, o[3] / n as f64]
        })
        .collect();
    st.direct_count = 1.0;
    st
}

/// Stationary jump sequences from μ: the pilot tabulates C_k up to the
/// cap and fixes the window, the main pass sums F_j ⊗ Σ_{k≤K} F_{j+k}
/// over every anchor through prefix sums.
pub fn diffusion_matrix<D: Dynamics>(d: &D, cfg: &EstimatorConfig) -> Result<DiffusionMatrix> {
    if cfg.direct_times.iter().any(|&n| n == 0 || n > cfg.length) {
        return Err(Error::InvalidArgument("direct times must lie in 1..=length".into()));
    }
    let run = |lo: usize, hi: usize, window: usize, cap: usize| -> Result<JumpStats> {
        let mut acc = JumpStats::default();
        for idx in lo..hi {
            let (path, r) = with_retries(idx as u64, cfg.retry_budget, |s| sample_path(d, &[], &[], cfg, s))?;
            let mut st = jump_stats(&path.cells, window, cap, &cfg.direct_times);
            st.retries = r;
            acc.merge(&st);
        }
        Ok(acc)
    };
    let cap = cfg.window_cap.min(cfg.length.saturating_sub(1));
    let pilot = batched(cfg.pilot_trajectories, cfg.batches, 0, |lo, hi| run(lo, hi, 0, cap))?;
    let mut lag_terms = Vec::with_capacity(cap + 1);
    let mut lag_stderr = Vec::with_capacity(cap + 1);
    let steps: Vec<f64> = pilot.iter().map(|b| b.steps).collect();
    let mut e = [[0.0; 2]; 2];
    let mut v = [[0.0; 2]; 2];
    for i in 0..4 {
        let (m, s) = ratio_stderr(&pilot.iter().map(|b| b.c0[i]).collect::<Vec<_>>(), &steps);
        v[i / 2][i % 2] = m;
        e[i / 2][i % 2] = s;
    }
    lag_terms.push(v);
    lag_stderr.push(e);
    let anchors: Vec<f64> = pilot.iter().map(|b| b.lag_anchors).collect();
    for k in 0..cap {
        let mut v = [[0.0; 2]; 2];
        let mut e = [[0.0; 2]; 2];
        for i in 0..4 {
            let nums: Vec<f64> = pilot.iter().map(|b| b.lags.get(k).map_or(0.0, |x| x[i])).collect();
            let (m, s) = ratio_stderr(&nums, &anchors);
            v[i / 2][i % 2] = m;
            e[i / 2][i % 2] = s;
        }
        lag_terms.push(v);
        lag_stderr.push(e);
    }
    let (window, window_ok) = match cfg.window {
        Some(k) => (k, true),
        None => select_window(
            &lag_terms[1..]
                .iter()
                .zip(&lag_stderr[1..])
                .map(|(t, s)| {
                    // Largest entry of C_k + C_kᵀ relative to its stderr.
                    let mut z: f64 = 0.0;
                    for r in 0..2 {
                        for c in 0..2 {
                            let val = t[r][c] + t[c][r];
                            let se = (s[r][c].powi(2) + s[c][r].powi(2)).sqrt();
                            z = z.max(val.abs() / se.max(1e-300));
                        }
                    }
                    z
                })
                .collect::<Vec<_>>(),
            cap,
        ),
    };
    if !window_ok && cfg.strict_window {
        let last = lag_terms.last().map_or(0.0, |t| t[0][0].abs().max(t[1][1].abs()));
        let floor = lag_stderr.last().map_or(0.0, |t| 3.0 * t[0][0].max(t[1][1]));
        return Err(Error::WindowTooSmall { window, last, floor });
    }
    let main = batched(cfg.trajectories, cfg.batches, cfg.pilot_trajectories, |lo, hi| run(lo, hi, window, 0))?;
    let steps: Vec<f64> = main.iter().map(|b| b.steps).collect();
    let anchors: Vec<f64> = main.iter().map(|b| b.anchors).collect();
    let c0: Vec<[f64; 4]> = main.iter().map(|b| b.c0).collect();
    let w: Vec<[f64; 4]> = main.iter().map(|b| b.windowed).collect();
    // Per-batch values of C₀ + W + Wᵀ for the stderr.
    let per_batch: Vec<[f64; 4]> = (0..main.len())
        .map(|b| {
            let mut out = [0.0; 4];
            for i in 0..4 {
                let t = [0, 2, 1, 3][i];
                out[i] = c0[b][i] / steps[b] + (w[b][i] + w[b][t]) / anchors[b];
            }
            out
        })
        .collect();
    let tot_steps: f64 = steps.iter().sum();
    let tot_anchors: f64 = anchors.iter().sum();
    let mut sigma2 = [[0.0; 2]; 2];
    let mut stderr = [[0.0; 2]; 2];
    for i in 0..4 {
        let t = [0, 2, 1, 3][i];
        let c: f64 = c0.iter().map(|x| x[i]).sum::<f64>() / tot_steps;
        let ww: f64 = w.iter().map(|x| x[i] + x[t]).sum::<f64>() / tot_anchors;
        sigma2[i / 2][i % 2] = c + ww;
        let vals: Vec<f64> = per_batch.iter().map(|x| x[i]).collect();
        stderr[i / 2][i % 2] = batch_se(&vals);
    }
    let direct = cfg
        .direct_times
        .iter()
        .enumerate()
        .map(|(di, &n)| {
            let counts: Vec<f64> = main.iter().map(|b| b.direct_count).collect();
            let mut s = [[0.0; 2]; 2];
            let mut e = [[0.0; 2]; 2];
            for i in 0..4 {
                let nums: Vec<f64> = main.iter().map(|b| b.direct[di][i]).collect();
                let (m, se) = ratio_stderr(&nums, &counts);
                s[i / 2][i % 2] = m;
                e[i / 2][i % 2] = se;
            }
            DirectEstimate { n, sigma2: s, stderr: e }
        })
        .collect();
    let eigenvalues = sym_eigenvalues(&sigma2);
    let se_max = stderr.iter().flatten().fold(0.0f64, |a, b| a.max(*b));
    let retries = pilot.iter().chain(&main).map(|b| b.retries).sum();
    Ok(DiffusionMatrix {
        sigma2,
        stderr,
        window,
        window_ok,
        lag_terms,
        lag_stderr,
        direct,
        eigenvalues,
        psd_ok: eigenvalues[0] >= -3.0 * se_max,
        trajectories: cfg.trajectories,
        length: cfg.length,
        retries,
    })
}

fn batch_se(vals: &[f64]) -> f64 {
    let b = vals.len();
    if b < 2 {
        return f64::NAN;
    }
    let m = mean(vals);
    (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / ((b - 1) * b) as f64).sqrt()
}

/// Smallest K such that lags K−2, K−1, K are all within 3 stderr of zero,
/// given |term|/stderr per lag (index 0 is lag 1).
fn select_window(z: &[f64], cap: usize) -> (usize, bool) {
    let mut run = 0;
    for (i, &zi) in z.iter().enumerate() {
        if zi <= 3.0 {
            run += 1;
            if run == 3 {
                return (i + 1, true);
            }
        } else {
            run = 0;
        }
    }
    (cap, false)
}

/// σ̃² or σ̂² with the data that produced it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarianceReport {
    pub sigma2: f64,
    pub stderr: f64,
    /// ∫f² dμ̃ (Green–Kubo) or ∫G² dμ (excursions).
    pub zero_lag: f64,
    /// Per-lag correlation terms, lag 1 first (pilot ensemble for
    /// Green–Kubo).
    pub lag_terms: Vec<f64>,
    pub lag_stderr: Vec<f64>,
    pub window: usize,
    /// Some lag within the window reached the noise floor.
    pub window_ok: bool,
    /// Tail added beyond the window and its stderr.
    pub tail: f64,
    pub tail_stderr: f64,
    /// Estimated ∫f dμ̃ and its stderr.
    pub integral: f64,
    pub integral_stderr: f64,
    pub induced: Option<InducedDetails>,
}

/// Bookkeeping of the excursion estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InducedDetails {
    pub orbits: usize,
    pub excursions: u64,
    pub censored: u64,
    pub censored_fraction: f64,
    pub cap: u64,
    /// σ̂² with Cesàro weights (1 − n/(M+1)) on the lag terms.
    pub cesaro: f64,
    pub cesaro_stderr: f64,
    /// Largest excursion length that returned.
    pub longest_return: u64,
    /// Mean collisions per excursion including censored ones.
    pub mean_length: f64,
}

/// Green–Kubo variance of each observable from shared trajectories.
///
/// For a trajectory from x ~ μ, ∫f·f∘T̃ᵏ dμ̃ = E_μ[Σ_s f(x,s) f(T̃ᵏ(x,s))]
/// over the support cells s; the sum over s is carried by a sliding grid
/// of anchor labels so that the window costs O(|supp|) per step.
pub fn green_kubo_variance<D: Dynamics>(
    d: &D,
    observables: &[&D::Observable],
    cfg: &EstimatorConfig,
) -> Result<Vec<VarianceReport>> {
    green_kubo_with_integrals(d, observables, &vec![None; observables.len()], cfg)
}

/// As [`green_kubo_variance`], with exact integrals where known (used for
/// the centering check instead of the estimate).
pub fn green_kubo_with_integrals<D: Dynamics>(
    d: &D,
    observables: &[&D::Observable],
    exact_integrals: &[Option<f64>],
    cfg: &EstimatorConfig,
) -> Result<Vec<VarianceReport>> {
    let supports: Vec<Vec<Cell>> = observables.iter().map(|f| d.support(f)).collect();
    let cap = cfg.window_cap.min(cfg.length.saturating_sub(1));
    let n_obs = observables.len();
    let run = |lo: usize, hi: usize, windows: &[usize], lag_cap: usize| -> Result<Vec<LagStats>> {
        let mut acc = vec![LagStats::default(); n_obs];
        for idx in lo..hi {
            let (path, _) = with_retries(idx as u64, cfg.retry_budget, |s| {
                sample_path(d, observables, &supports, cfg, s)
            })?;
            for o in 0..n_obs {
                let st = path_stats(&path, &supports[o], &path.values[o], windows[o], lag_cap);
                acc[o].merge(&st);
            }
        }
        Ok(acc)
    };
    let zeros = vec![0; n_obs];
    let pilot = batched(cfg.pilot_trajectories, cfg.batches, 0, |lo, hi| run(lo, hi, &zeros, cap))?;
    let mut windows = Vec::with_capacity(n_obs);
    let mut lag_tables = Vec::with_capacity(n_obs);
    for o in 0..n_obs {
        let anchors: Vec<f64> = pilot.iter().map(|b| b[o].lag_anchors).collect();
        let mut terms = Vec::with_capacity(cap);
        let mut ses = Vec::with_capacity(cap);
        for k in 0..cap {
            let nums: Vec<f64> = pilot.iter().map(|b| b[o].lags.get(k).copied().unwrap_or(0.0)).collect();
            let (m, s) = ratio_stderr(&nums, &anchors);
            terms.push(m);
            ses.push(s);
        }
        let (w, ok) = match cfg.window {
            Some(k) => (k.min(cap), true),
            None => {
                let z: Vec<f64> = terms
                    .iter()
                    .zip(&ses)
                    .map(|(t, s)| if *s > 0.0 { t.abs() / s } else if *t == 0.0 { 0.0 } else { f64::INFINITY })
                    .collect();
                select_window(&z, cap)
            }
        };
        if !ok && cfg.strict_window {
            return Err(Error::WindowTooSmall {
                window: w,
                last: terms.last().copied().unwrap_or(0.0),
                floor: 3.0 * ses.last().copied().unwrap_or(0.0),
            });
        }
        windows.push((w, ok));
        lag_tables.push((terms, ses));
    }
    let ws: Vec<usize> = windows.iter().map(|w| w.0).collect();
    let main = batched(cfg.trajectories, cfg.batches, cfg.pilot_trajectories, |lo, hi| run(lo, hi, &ws, 0))?;
    let mut reports = Vec::with_capacity(n_obs);
    for o in 0..n_obs {
        let steps: Vec<f64> = main.iter().map(|b| b[o].steps).collect();
        let anchors: Vec<f64> = main.iter().map(|b| b[o].anchors).collect();
        let (integral, integral_stderr) = ratio_stderr(&main.iter().map(|b| b[o].integral).collect::<Vec<_>>(), &steps);
        match exact_integrals[o] {
            Some(i) if i.abs() > 1e-12 => {
                return Err(Error::NotCentered {
                    integral: i,
                    stderr: 0.0,
                })
            }
            None if integral.abs() > cfg.centering_sigmas * integral_stderr && integral.abs() > 1e-12 => {
                return Err(Error::NotCentered {
                    integral,
                    stderr: integral_stderr,
                })
            }
            _ => {}
        }
        let (zero_lag, _) = ratio_stderr(&main.iter().map(|b| b[o].zero).collect::<Vec<_>>(), &steps);
        let (w, w_ok) = windows[o];
        let windowed = if w > 0 {
            main.iter().map(|b| b[o].windowed).sum::<f64>() / anchors.iter().sum::<f64>()
        } else {
            0.0
        };
        let per_batch: Vec<f64> = main
            .iter()
            .map(|b| {
                let wz = if w > 0 && b[o].anchors > 0.0 { b[o].windowed / b[o].anchors } else { 0.0 };
                b[o].zero / b[o].steps + 2.0 * wz
            })
            .collect();
        let se_main = batch_se(&per_batch);
        let (terms, ses) = &lag_tables[o];
        let (tail, tail_se) = match cfg.tail {
            TailModel::None => (0.0, 0.0),
            TailModel::InverseSquare => inverse_square_tail(terms, ses, w),
        };
        reports.push(VarianceReport {
            sigma2: zero_lag + 2.0 * windowed + tail,
            stderr: (se_main * se_main + tail_se * tail_se).sqrt(),
            zero_lag,
            lag_terms: terms.clone(),
            lag_stderr: ses.clone(),
            window: w,
            window_ok: w_ok,
            tail,
            tail_stderr: tail_se,
            integral,
            integral_stderr,
            induced: None,
        });
    }
    Ok(reports)
}

/// Fit term_k ≈ c/k² on lags [K/2, K] by weighted least squares and return
/// 2·Σ_{k>K} c/k² with its stderr.
fn inverse_square_tail(terms: &[f64], ses: &[f64], window: usize) -> (f64, f64) {
    if window < 2 {
        return (0.0, 0.0);
    }
    let lo = (window / 2).max(1);
    let (mut num, mut den) = (0.0, 0.0);
    for k in lo..=window.min(terms.len()) {
        let se = ses[k - 1];
        if !(se > 0.0) {
            continue;
        }
        let x = 1.0 / (k * k) as f64;
        let w = 1.0 / (se * se);
        num += w * x * terms[k - 1];
        den += w * x * x;
    }
    if den == 0.0 {
        return (0.0, 0.0);
    }
    let c = num / den;
    let se_c = 1.0 / den.sqrt();
    let k = window as f64;
    // Σ_{k>K} 1/k² by Euler–Maclaurin.
    let psi1 = 1.0 / k - 1.0 / (2.0 * k * k) + 1.0 / (6.0 * k * k * k);
    (2.0 * c * psi1, 2.0 * se_c * psi1)
}

/// Configuration of the excursion estimator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InducedConfig {
    /// Orbits of the induced map, each started from μ on cell 0.
    pub orbits: usize,
    /// Lag window M: each orbit runs up to M + 1 excursions.
    pub lag_window: usize,
    /// Collisions after which an excursion is censored.
    pub cap: u64,
    pub batches: usize,
    pub seed: u64,
    /// ReturnCapExceeded when more excursions than this fraction are
    /// censored.
    pub max_censored_fraction: f64,
    pub retry_budget: u32,
}

impl Default for InducedConfig {
    fn default() -> Self {
        Self {
            orbits: 20_000,
            lag_window: 32,
            cap: 20_000,
            batches: 64,
            seed: 2,
            max_censored_fraction: 0.5,
            retry_budget: 8,
        }
    }
}

/// One orbit of the induced map: excursion sums per observable, with the
/// last excursion possibly censored.
struct InducedOrbit {
    sums: Vec<Vec<f64>>,
    /// f(start, 0) of the censored excursion, per observable.
    censored_start: Option<Vec<f64>>,
    lengths: Vec<u64>,
}

#[derive(Default, Clone)]
struct InducedStats {
    orbits: f64,
    /// Per observable: Σ over orbits of known products G₀·Gₙ for n ≤ M and
    /// the censored parts needed for imputation.
    known: Vec<Vec<f64>>,
    /// Σ G₀ over orbits whose n-th excursion is censored (n ≥ 1), per lag.
    g0_with_censored: Vec<Vec<f64>>,
    /// Censored zero-lag pieces: Σ Ge², Σ Ge, count.
    zero_censored: Vec<[f64; 2]>,
    zero_censored_count: f64,
    /// Pool of L = Ge − f(start): Σ L, Σ L², count.
    pool: Vec<[f64; 2]>,
    pool_count: f64,
    excursions: u64,
    censored: u64,
    collisions: u64,
    longest: u64,
}

/// σ̂²(f) = ∫G² dμ + 2Σ_{n=1..M} ∫G·G∘T̃₀ⁿ dμ from orbits of the induced
/// map started at μ on cell 0.
///
/// Excursions longer than the cap are censored. Their unseen late part is
/// imputed by an independent copy of (early sum − f(start)) drawn from the
/// censored pool: for observables invariant under the reversal, or carried
/// by cell 0 alone, the return leg of a long excursion is in law the
/// reversed outbound leg. Lag products across a censored excursion are
/// imputed by 0, since the return point of a long excursion forgets the
/// start and E_μ[G] = ∫f dμ̃ = 0.
pub fn induced_variance<D: Dynamics>(
    d: &D,
    observables: &[&D::Observable],
    cfg: &InducedConfig,
) -> Result<Vec<VarianceReport>> {
    let n_obs = observables.len();
    let m = cfg.lag_window;
    let orbit = |idx: usize| -> Result<InducedOrbit> {
        let (o, _) = with_retries(idx as u64, cfg.retry_budget, |stream| {
            let mut rng = stream_rng(cfg.seed, stream);
            let mut x = d.sample_base(&mut rng);
            let mut sums = vec![Vec::with_capacity(m + 1); n_obs];
            let mut lengths = Vec::with_capacity(m + 1);
            let mut censored_start = None;
            for _ in 0..=m {
                let starts: Vec<f64> = observables
                    .iter()
                    .map(|f| d.observe(f, &x, ORIGIN))
                    .collect::<Result<_>>()?;
                let e = excursion(d, &x, observables, cfg.cap, &mut rng)?;
                for (s, v) in sums.iter_mut().zip(&e.sums) {
                    s.push(*v);
                }
                lengths.push(e.length);
                if !e.returned {
                    censored_start = Some(starts);
                    break;
                }
                x = e.end;
            }
            Ok(InducedOrbit {
                sums,
                censored_start,
                lengths,
            })
        })?;
        Ok(o)
    };
    let batches = batched(cfg.orbits, cfg.batches, 0, |lo, hi| {
        let mut st = InducedStats {
            known: vec![vec![0.0; m + 1]; n_obs],
            g0_with_censored: vec![vec![0.0; m + 1]; n_obs],
            zero_censored: vec![[0.0; 2]; n_obs],
            pool: vec![[0.0; 2]; n_obs],
            ..Default::default()
        };
        for idx in lo..hi {
            let o = orbit(idx)?;
            st.orbits += 1.0;
            let n_exc = o.lengths.len();
            st.excursions += n_exc as u64;
            st.collisions += o.lengths.iter().sum::<u64>();
            let last_censored = o.censored_start.is_some();
            if last_censored {
                st.censored += 1;
            }
            for (i, &len) in o.lengths.iter().enumerate() {
                if !(last_censored && i == n_exc - 1) {
                    st.longest = st.longest.max(len);
                }
            }
            for f in 0..n_obs {
                let g = &o.sums[f];
                let g0 = g[0];
                for n in 0..n_exc {
                    let censored_here = last_censored && n == n_exc - 1;
                    if n == 0 {
                        if censored_here {
                            st.zero_censored[f][0] += g0 * g0;
                            st.zero_censored[f][1] += g0;
                        } else {
                            st.known[f][0] += g0 * g0;
                        }
                    } else {
                        // Known early sum times G₀, plus G₀·E[L] imputed later.
                        st.known[f][n] += g0 * g[n];
                        if censored_here {
                            st.g0_with_censored[f][n] += g0;
                        }
                    }
                }
                if let Some(starts) = &o.censored_start {
                    let l = g[n_exc - 1] - starts[f];
                    st.pool[f][0] += l;
                    st.pool[f][1] += l * l;
                }
            }
            if last_censored {
                st.pool_count += 1.0;
                if n_exc == 1 {
                    st.zero_censored_count += 1.0;
                }
            }
        }
        Ok(st)
    })?;
    let excursions: u64 = batches.iter().map(|b| b.excursions).sum();
    let censored: u64 = batches.iter().map(|b| b.censored).sum();
    let collisions: u64 = batches.iter().map(|b| b.collisions).sum();
    let longest = batches.iter().map(|b| b.longest).max().unwrap_or(0);
    let censored_fraction = censored as f64 / excursions.max(1) as f64;
    if censored_fraction > cfg.max_censored_fraction {
        return Err(Error::ReturnCapExceeded(cfg.cap));
    }
    let pool_count: f64 = batches.iter().map(|b| b.pool_count).sum();
    let mut reports = Vec::with_capacity(n_obs);
    for f in 0..n_obs {
        let (pl, pl2) = if pool_count > 0.0 {
            (
                batches.iter().map(|b| b.pool[f][0]).sum::<f64>() / pool_count,
                batches.iter().map(|b| b.pool[f][1]).sum::<f64>() / pool_count,
            )
        } else {
            (0.0, 0.0)
        };
        // Per-batch lag moments with the imputations applied.
        let lag_values = |b: &InducedStats| -> Vec<f64> {
            let mut out = vec![0.0; m + 1];
            if b.orbits == 0.0 {
                return out;
            }
            out[0] = (b.known[f][0]
                + b.zero_censored[f][0]
                + 2.0 * b.zero_censored[f][1] * pl
                + b.zero_censored_count * pl2)
                / b.orbits;
            for n in 1..=m {
                out[n] = (b.known[f][n] + b.g0_with_censored[f][n] * pl) / b.orbits;
            }
            out
        };
        let per_batch: Vec<Vec<f64>> = batches.iter().map(lag_values).collect();
        let weights: Vec<f64> = batches.iter().map(|b| b.orbits).collect();
        let total_w: f64 = weights.iter().sum();
        let pooled: Vec<f64> = (0..=m)
            .map(|n| per_batch.iter().zip(&weights).map(|(v, w)| v[n] * w).sum::<f64>() / total_w)
            .collect();
        let lag_se: Vec<f64> = (0..=m)
            .map(|n| batch_se(&per_batch.iter().map(|v| v[n]).collect::<Vec<_>>()))
            .collect();
        let combine = |v: &[f64], cesaro: bool| -> f64 {
            v[0] + 2.0
                * (1..=m)
                    .map(|n| if cesaro { (1.0 - n as f64 / (m + 1) as f64) * v[n] } else { v[n] })
                    .sum::<f64>()
        };
        let sigma2 = combine(&pooled, false);
        let cesaro = combine(&pooled, true);
        let se = batch_se(&per_batch.iter().map(|v| combine(v, false)).collect::<Vec<_>>());
        let se_c = batch_se(&per_batch.iter().map(|v| combine(v, true)).collect::<Vec<_>>());
        // E_μ[G] over first excursions (known part) as the centering check.
        reports.push(VarianceReport {
            sigma2,
            stderr: se,
            zero_lag: pooled[0],
            lag_terms: pooled[1..].to_vec(),
            lag_stderr: lag_se[1..].to_vec(),
            window: m,
            window_ok: m == 0 || pooled[m].abs() <= 3.0 * lag_se[m],
            tail: 0.0,
            tail_stderr: 0.0,
            integral: f64::NAN,
            integral_stderr: f64::NAN,
            induced: Some(InducedDetails {
                orbits: cfg.orbits,
                excursions,
                censored,
                censored_fraction,
                cap: cfg.cap,
                cesaro,
                cesaro_stderr: se_c,
                longest_return: longest,
                mean_length: collisions as f64 / excursions.max(1) as f64,
            }),
        });
    }
    Ok(reports)
}

/// One row of the local-limit table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProfileRow {
    pub ell: usize,
    pub a: Cell,
    pub empirical: f64,
    pub predicted: f64,
    pub stderr: f64,
}

/// Empirical p̂(ℓ, a) against Φ(a/√ℓ)/ℓ.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LocalLimitProfile {
    pub rows: Vec<ProfileRow>,
    /// max_a |ℓ·p̂ − Φ(a/√ℓ)| over the requested cells, per ℓ.
    pub max_error: Vec<(usize, f64)>,
    /// Σ_a p̂(ℓ, a) over all observed cells, per ℓ (1 exactly).
    pub total_mass: Vec<(usize, f64)>,
    pub trajectories: usize,
}

pub fn local_limit_profile<D: Dynamics>(
    d: &D,
    sigma2: &Matrix2,
    ells: &[usize],
    cells: &[Cell],
    trajectories: usize,
    seed: u64,
) -> Result<LocalLimitProfile> {
    let mut sorted = ells.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    let phi0 = phi0_of(sigma2)?;
    let det = det2(sigma2);
    let inv = [[sigma2[1][1] / det, -sigma2[0][1] / det], [-sigma2[1][0] / det, sigma2[0][0] / det]];
    let per: Vec<Vec<Cell>> = (0..trajectories)
        .into_par_iter()
        .map(|i| {
            with_retries(i as u64, 8, |s| {
                let mut rng = stream_rng(seed, s);
                let mut x = d.sample_base(&mut rng);
                let mut a = ORIGIN;
                let mut out = Vec::with_capacity(sorted.len());
                let mut t = 0;
                for &l in &sorted {
                    while t < l {
                        a = cell_add(a, d.advance(&mut x, &mut rng)?.jump);
                        t += 1;
                    }
                    out.push(a);
                }
                Ok(out)
            })
            .map(|(v, _)| v)
        })
        .collect::<Result<_>>()?;
    let n = trajectories as f64;
    let mut rows = Vec::new();
    let mut max_error = Vec::new();
    let mut total_mass = Vec::new();
    for (li, &ell) in sorted.iter().enumerate() {
        let mut hist: BTreeMap<Cell, u64> = BTreeMap::new();
        for p in &per {
            *hist.entry(p[li]).or_default() += 1;
        }
        let total: u64 = hist.values().sum();
        total_mass.push((ell, total as f64 / n));
        let l = ell as f64;
        let mut worst: f64 = 0.0;
        for &a in cells {
            let count = hist.get(&a).copied().unwrap_or(0) as f64;
            let p = count / n;
            let x = [a[0] as f64, a[1] as f64];
            let q = (inv[0][0] * x[0] * x[0] + (inv[0][1] + inv[1][0]) * x[0] * x[1] + inv[1][1] * x[1] * x[1]) / l;
            let predicted = phi0 * (-0.5 * q).exp() / l;
            worst = worst.max((l * p - l * predicted).abs());
            rows.push(ProfileRow {
                ell,
                a,
                empirical: p,
                predicted,
                stderr: (p * (1.0 - p) / n).sqrt(),
            });
        }
        max_error.push((ell, worst));
    }
    Ok(LocalLimitProfile {
        rows,
        max_error,
        total_mass,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{OracleChain, OracleObservable};

    #[test]
    fn phi0_examples() {
        assert!((phi0_of(&[[0.5, 0.0], [0.0, 0.5]]).unwrap() - 1.0 / PI).abs() < 1e-15);
        assert!((phi0_of(&[[1.0, 0.0], [0.0, 1.0]]).unwrap() - 0.5 / PI).abs() < 1e-15);
        assert!((phi0_of(&[[0.4, 0.0], [0.0, 0.4]]).unwrap() - 1.25 / PI).abs() < 1e-15);
        assert!(phi0_of(&[[1.0, 1.0], [1.0, 1.0]]).is_err());
        let s = [[0.7, 0.1], [0.1, 0.3]];
        let c = 2.5;
        let sc = [[c * 0.7, c * 0.1], [c * 0.1, c * 0.3]];
        assert!((phi0_of(&sc).unwrap() - phi0_of(&s).unwrap() / c).abs() < 1e-15);
    }

    #[test]
    fn window_selection() {
        assert_eq!(select_window(&[10.0, 5.0, 1.0, 0.5, 2.0, 9.0], 6), (5, true));
        assert_eq!(select_window(&[10.0, 5.0, 4.0], 3), (3, false));
    }

    fn small_cfg() -> EstimatorConfig {
        EstimatorConfig {
            trajectories: 256,
            length: 2_000,
            pilot_trajectories: 64,
            window_cap: 20,
            batches: 32,
            direct_times: vec![2_000],
            ..Default::default()
        }
    }

    #[test]
    fn oracle_iid_diffusion() {
        let c = OracleChain::simple_walk();
        let r = diffusion_matrix(&c, &small_cfg()).unwrap();
        for i in 0..2 {
            assert!((r.sigma2[i][i] - 0.5).abs() < 4.0 * r.stderr[i][i], "{:?}", r.sigma2);
        }
        assert!(r.sigma2[0][1].abs() < 4.0 * r.stderr[0][1]);
        assert!(r.direct[0].sigma2[0][0] > 0.45 && r.direct[0].sigma2[0][0] < 0.55);
        let z: Vec<f64> = r.lag_terms[1..4]
            .iter()
            .zip(&r.lag_stderr[1..4])
            .map(|(t, s)| t[0][0].abs() / s[0][0])
            .collect();
        assert!(z.iter().all(|v| *v < 5.0), "{z:?}");
    }

    #[test]
    fn oracle_marks_green_kubo_and_induced() {
        let (c, w) = OracleChain::lazy_walk().with_marks(2).unwrap();
        let f = OracleObservable::marks_at_origin(w);
        let r = green_kubo_variance(&c, &[&f], &small_cfg()).unwrap();
        assert!((r[0].sigma2 - 1.0).abs() < 4.0 * r[0].stderr + 0.02, "{:?}", r[0].sigma2);
        let ic = InducedConfig {
            orbits: 4_000,
            lag_window: 3,
            cap: 2_000,
            batches: 32,
            ..Default::default()
        };
        let s = induced_variance(&c, &[&f], &ic).unwrap();
        assert!((s[0].sigma2 - 1.0).abs() < 4.0 * s[0].stderr, "{} ± {}", s[0].sigma2, s[0].stderr);
    }

    #[test]
    fn green_kubo_scaling_and_zero() {
        let (c, w) = OracleChain::lazy_walk().with_marks(2).unwrap();
        let f = OracleObservable::marks_at_origin(w.clone());
        let f2 = OracleObservable::marks_at_origin(w.iter().map(|x| 2.0 * x).collect());
        let z = OracleObservable::marks_at_origin(vec![0.0; w.len()]);
        let cfg = EstimatorConfig {
            trajectories: 64,
            length: 1_000,
            pilot_trajectories: 32,
            window_cap: 10,
            batches: 16,
            direct_times: vec![],
            ..Default::default()
        };
        let r = green_kubo_variance(&c, &[&f, &f2, &z], &cfg).unwrap();
        assert_eq!(r[1].sigma2, 4.0 * r[0].sigma2);
        assert_eq!(r[2].sigma2, 0.0);
    }

    #[test]
    fn profile_mass_is_one() {
        let c = OracleChain::lazy_walk();
        let p = local_limit_profile(&c, &[[0.4, 0.0], [0.0, 0.4]], &[10, 50], &[[0, 0], [1, 0]], 2_000, 5).unwrap();
        assert!(p.total_mass.iter().all(|(_, m)| *m == 1.0));
        let row = p.rows.iter().find(|r| r.ell == 50 && r.a == [0, 0]).unwrap();
        assert!((row.empirical - row.predicted).abs() < 4.0 * row.stderr + 1e-3);
    }
}
