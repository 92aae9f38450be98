//! Ensembles of trajectories from μ ⊗ δ₀ and tests of the joint limit law
//! (I(g)Φ(0)E, σ̃√(Φ(0)E)·N) against them.
//!
//! One pass per trajectory records every registered Birkhoff sum at the
//! whole time grid {n·s}, on the collision clock and optionally on the flow
//! clock (flow time n·s·E[τ]). All tests are post-processing of those
//! tables.

use crate::error::{Error, Result};
use crate::rng::stream_rng;
use crate::stats::{batch_stderr, describe, exponential_cdf, ks_pvalue, ks_statistic_sorted, laplace_cdf, laplace_quantile, mean, ols, LinearFit};
use crate::system::{cell_add, with_retries, Cell, Dynamics, ORIGIN};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnsembleConfig {
    pub trajectories: usize,
    pub seed: u64,
    /// Base times n.
    pub times: Vec<u64>,
    /// Grid S ⊂ [T₁, T₂]; checkpoints are n·s.
    pub grid: Vec<f64>,
    /// Also record flow-time statistics at t = n·s·E[τ].
    pub flow_clock: bool,
    pub retry_budget: u32,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        Self {
            trajectories: 1_000,
            seed: 7,
            times: vec![10_000, 100_000],
            grid: vec![1.0, 1.25, 1.5, 1.75, 2.0],
            flow_clock: true,
            retry_budget: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Clock {
    Map,
    Flow,
}

/// Per-trajectory statistics at every checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EnsembleRun {
    pub config: EnsembleConfig,
    pub map_names: Vec<String>,
    pub flow_names: Vec<String>,
    pub mean_roof: f64,
    /// [observable][checkpoint][trajectory], checkpoint = time·|S| + grid.
    map: Vec<Vec<Vec<f64>>>,
    flow: Vec<Vec<Vec<f64>>>,
    /// Resampled trajectories.
    pub retries: u64,
}

impl EnsembleRun {
    fn checkpoint(&self, n: u64, s: f64) -> Result<usize> {
        let ti = self.config.times.iter().position(|&t| t == n);
        let si = self.config.grid.iter().position(|&g| g == s);
        match (ti, si) {
            (Some(t), Some(g)) => Ok(t * self.config.grid.len() + g),
            _ => Err(Error::InvalidArgument(format!("({n}, {s}) is not on the time grid"))),
        }
    }

    /// S̃_{ns} of a map observable (collision clock) or ∫₀^{nsE[τ]} of a
    /// flow observable, one value per trajectory.
    pub fn values(&self, clock: Clock, obs: usize, n: u64, s: f64) -> Result<&[f64]> {
        let c = self.checkpoint(n, s)?;
        let table = match clock {
            Clock::Map => &self.map,
            Clock::Flow => &self.flow,
        };
        table
            .get(obs)
            .map(|t| t[c].as_slice())
            .ok_or_else(|| Error::InvalidArgument(format!("no {clock:?} observable {obs}")))
    }

    /// Elapsed time of the checkpoint in the units of the clock.
    pub fn time(&self, clock: Clock, n: u64, s: f64) -> f64 {
        match clock {
            Clock::Map => n as f64 * s,
            Clock::Flow => n as f64 * s * self.mean_roof,
        }
    }

    pub fn trajectories(&self) -> usize {
        self.config.trajectories
    }
}

/// Cells where an observable may be nonzero as a bounding box; `None`
/// means everywhere.
#[derive(Clone, Copy)]
struct Reach(Option<(Cell, Cell)>);

impl Reach {
    fn of(cells: &[Cell]) -> Self {
        if cells.is_empty() {
            return Reach(None);
        }
        let mut lo = cells[0];
        let mut hi = cells[0];
        for c in cells {
            for k in 0..2 {
                lo[k] = lo[k].min(c[k]);
                hi[k] = hi[k].max(c[k]);
            }
        }
        Reach(Some((lo, hi)))
    }

    #[inline]
    fn contains(&self, a: Cell) -> bool {
        match self.0 {
            None => true,
            Some((lo, hi)) => a[0] >= lo[0] && a[0] <= hi[0] && a[1] >= lo[1] && a[1] <= hi[1],
        }
    }
}

struct Tables {
    map: Vec<Vec<f64>>,
    flow: Vec<Vec<f64>>,
}

#[allow(clippy::too_many_arguments)]
fn run_trajectory<D: Dynamics>(
    d: &D,
    map_obs: &[&D::Observable],
    flow_obs: &[&D::FlowObservable],
    map_reach: &[Reach],
    flow_reach: &[Reach],
    map_times: &[(f64, usize)],
    flow_times: &[(f64, usize)],
    checkpoints: usize,
    seed: u64,
    stream: u64,
) -> Result<Tables> {
    let mut rng = stream_rng(seed, stream);
    let mut x = d.sample_base(&mut rng);
    let mut a = ORIGIN;
    let mut map = vec![vec![0.0; checkpoints]; map_obs.len()];
    let mut flow = vec![vec![0.0; checkpoints]; flow_obs.len()];
    let mut map_sum = vec![0.0; map_obs.len()];
    let mut flow_sum = vec![0.0; flow_obs.len()];
    let mut fk = vec![0.0; map_obs.len()];
    let (mut mi, mut fi) = (0, 0);
    let mut k = 0u64;
    let mut elapsed = 0.0;
    while mi < map_times.len() || fi < flow_times.len() {
        for (j, f) in map_obs.iter().enumerate() {
            fk[j] = if map_reach[j].contains(a) { d.observe(f, &x, a)? } else { 0.0 };
        }
        let next_k = (k + 1) as f64;
        while mi < map_times.len() && map_times[mi].0 < next_k {
            let (t, c) = map_times[mi];
            let frac = t - k as f64;
            for j in 0..map_obs.len() {
                map[j][c] = map_sum[j] + frac * fk[j];
            }
            mi += 1;
        }
        let base = x.clone();
        let step = d.advance(&mut x, &mut rng)?;
        if fi < flow_times.len() {
            while fi < flow_times.len() && flow_times[fi].0 < elapsed + step.tau {
                let (t, c) = flow_times[fi];
                for (j, f) in flow_obs.iter().enumerate() {
                    let part = if flow_reach[j].contains(a) {
                        d.flow_segment(f, &base, a, step.tau, t - elapsed)?
                    } else {
                        0.0
                    };
                    flow[j][c] = flow_sum[j] + part;
                }
                fi += 1;
            }
            for (j, f) in flow_obs.iter().enumerate() {
                if flow_reach[j].contains(a) {
                    flow_sum[j] += d.flow_segment(f, &base, a, step.tau, step.tau)?;
                }
            }
        }
        for j in 0..map_obs.len() {
            map_sum[j] += fk[j];
        }
        elapsed += step.tau;
        a = cell_add(a, step.jump);
        k += 1;
    }
    Ok(Tables { map, flow })
}

/// Run the ensemble. Trajectory i uses stream i (retries use derived
/// streams), so the output is a function of the seed alone.
pub fn run_ensemble<D: Dynamics>(
    d: &D,
    cfg: &EnsembleConfig,
    map_obs: &[(&str, &D::Observable)],
    flow_obs: &[(&str, &D::FlowObservable)],
) -> Result<EnsembleRun> {
    if cfg.times.is_empty() || cfg.grid.is_empty() {
        return Err(Error::InvalidArgument("empty time grid".into()));
    }
    if cfg.grid.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("grid points must be positive".into()));
    }
    let tau = d.mean_roof();
    let ng = cfg.grid.len();
    let mut map_times = Vec::new();
    let mut flow_times = Vec::new();
    for (ti, &n) in cfg.times.iter().enumerate() {
        for (si, &s) in cfg.grid.iter().enumerate() {
            map_times.push((n as f64 * s, ti * ng + si));
            if cfg.flow_clock {
                flow_times.push((n as f64 * s * tau, ti * ng + si));
            }
        }
    }
    map_times.sort_by(|a, b| a.0.total_cmp(&b.0));
    flow_times.sort_by(|a, b| a.0.total_cmp(&b.0));
    let checkpoints = cfg.times.len() * ng;
    let mo: Vec<&D::Observable> = map_obs.iter().map(|(_, f)| *f).collect();
    let fo: Vec<&D::FlowObservable> = if cfg.flow_clock { flow_obs.iter().map(|(_, f)| *f).collect() } else { Vec::new() };
    let map_reach: Vec<Reach> = mo.iter().map(|f| Reach::of(&d.support(f))).collect();
    let flow_reach: Vec<Reach> = fo.iter().map(|f| Reach::of(&d.flow_support(f))).collect();
    let per: Vec<(Tables, u32)> = (0..cfg.trajectories)
        .into_par_iter()
        .map(|i| {
            with_retries(i as u64, cfg.retry_budget, |stream| {
                run_trajectory(d, &mo, &fo, &map_reach, &flow_reach, &map_times, &flow_times, checkpoints, cfg.seed, stream)
            })
        })
        .collect::<Result<_>>()?;
    let transpose = |pick: &dyn Fn(&Tables) -> &Vec<Vec<f64>>, count: usize| -> Vec<Vec<Vec<f64>>> {
        (0..count)
            .map(|j| (0..checkpoints).map(|c| per.iter().map(|(t, _)| pick(t)[j][c]).collect()).collect())
            .collect()
    };
    let map = transpose(&|t: &Tables| &t.map, mo.len());
    let flow = transpose(&|t: &Tables| &t.flow, fo.len());
    Ok(EnsembleRun {
        config: cfg.clone(),
        map_names: map_obs.iter().map(|(n, _)| n.to_string()).collect(),
        flow_names: if cfg.flow_clock { flow_obs.iter().map(|(n, _)| n.to_string()).collect() } else { Vec::new() },
        mean_roof: tau,
        map,
        flow,
        retries: per.iter().map(|(_, r)| *r as u64).sum(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum TargetLaw {
    Exponential { mean: f64 },
    Laplace { variance: f64 },
}

impl TargetLaw {
    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            TargetLaw::Exponential { mean } => exponential_cdf(mean, x),
            TargetLaw::Laplace { variance } => laplace_cdf(variance, x),
        }
    }

    pub fn quantile(&self, p: f64) -> f64 {
        match *self {
            TargetLaw::Exponential { mean } => -mean * (1.0 - p).ln(),
            TargetLaw::Laplace { variance } => laplace_quantile(variance, p),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            TargetLaw::Exponential { mean } => mean,
            TargetLaw::Laplace { .. } => 0.0,
        }
    }

    pub fn variance(&self) -> f64 {
        match *self {
            TargetLaw::Exponential { mean } => mean * mean,
            TargetLaw::Laplace { variance } => variance,
        }
    }

    pub fn excess_kurtosis(&self) -> f64 {
        match self {
            TargetLaw::Exponential { .. } => 6.0,
            TargetLaw::Laplace { .. } => 3.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QqRow {
    pub level: f64,
    pub empirical: f64,
    pub theoretical: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LawTestReport {
    pub target: TargetLaw,
    /// Base time n and the elapsed clock time of the statistic.
    pub n: u64,
    pub time: f64,
    pub samples: usize,
    pub ks: f64,
    pub p_value: f64,
    pub mean: f64,
    pub mean_stderr: f64,
    pub variance: f64,
    pub variance_stderr: f64,
    pub excess_kurtosis: f64,
    pub kurtosis_stderr: f64,
    pub qq: Vec<QqRow>,
    /// All values equal: the statistic carries no law.
    pub degenerate: bool,
}

const MOMENT_BATCHES: usize = 64;

/// KS distance, moments and QQ table of a sample against a declared law.
pub fn law_test(values: &[f64], target: TargetLaw, n: u64, time: f64) -> LawTestReport {
    let mut xs = values.to_vec();
    xs.sort_by(|a, b| a.total_cmp(b));
    let ks = ks_statistic_sorted(&xs, |x| target.cdf(x));
    let (m, m_se) = batch_stderr(values, MOMENT_BATCHES, mean);
    let (v, v_se) = batch_stderr(values, MOMENT_BATCHES, |s| describe(s).1);
    let (k, k_se) = batch_stderr(values, MOMENT_BATCHES, |s| describe(s).2);
    let degenerate = xs.first() == xs.last();
    let qq = (1..100)
        .map(|i| {
            let p = i as f64 / 100.0;
            let idx = ((p * xs.len() as f64).ceil() as usize).clamp(1, xs.len().max(1)) - 1;
            QqRow {
                level: p,
                empirical: xs.get(idx).copied().unwrap_or(f64::NAN),
                theoretical: target.quantile(p),
            }
        })
        .collect();
    LawTestReport {
        target,
        n,
        time,
        samples: xs.len(),
        ks,
        p_value: ks_pvalue(ks, xs.len()),
        mean: m,
        mean_stderr: m_se,
        variance: v,
        variance_stderr: v_se,
        excess_kurtosis: if degenerate { f64::NAN } else { k },
        kurtosis_stderr: k_se,
        qq,
        degenerate,
    }
}

/// S_n g/ln n against Exp(I(g)·Φ(0)) at every base time (grid point s = 1,
/// or the first grid point if 1 is absent), on either clock.
pub fn exponential_test(run: &EnsembleRun, clock: Clock, g: usize, integral: f64, phi0: f64) -> Result<Vec<LawTestReport>> {
    let s = reference_grid_point(run);
    run.config
        .times
        .iter()
        .map(|&n| {
            let t = run.time(clock, n, s);
            let l = t.ln();
            let vals: Vec<f64> = run.values(clock, g, n, s)?.iter().map(|v| v / l).collect();
            Ok(law_test(&vals, TargetLaw::Exponential { mean: integral * phi0 }, n, t))
        })
        .collect()
}

fn reference_grid_point(run: &EnsembleRun) -> f64 {
    if run.config.grid.contains(&1.0) {
        1.0
    } else {
        run.config.grid[0]
    }
}

/// Variance estimate with stderr, as produced by the estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceInput {
    pub sigma2: f64,
    pub stderr: f64,
}

/// S_n f/√(Φ(0)·σ̃²·ln n) against the standard Laplace law.
pub fn laplace_test(run: &EnsembleRun, clock: Clock, f: usize, sigma2: VarianceInput, phi0: f64) -> Result<Vec<LawTestReport>> {
    if !(sigma2.sigma2 > 3.0 * sigma2.stderr) {
        return Err(Error::VarianceDegenerate {
            value: sigma2.sigma2,
            stderr: sigma2.stderr,
        });
    }
    let s = reference_grid_point(run);
    run.config
        .times
        .iter()
        .map(|&n| {
            let t = run.time(clock, n, s);
            let scale = (phi0 * sigma2.sigma2 * t.ln()).sqrt();
            let vals: Vec<f64> = run.values(clock, f, n, s)?.iter().map(|v| v / scale).collect();
            Ok(law_test(&vals, TargetLaw::Laplace { variance: 1.0 }, n, t))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointBin {
    pub count: usize,
    pub x_mean: f64,
    pub y_mean: f64,
    pub y_mean_stderr: f64,
    pub y2_mean: f64,
    pub y2_stderr: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointReport {
    pub n: u64,
    /// Fit E[Y² | X] = a + b·X over individual trajectories, HC1 errors.
    pub fit: LinearFit,
    pub slope_ci: (f64, f64),
    /// |a| within the critical value times its stderr.
    pub intercept_zero: bool,
    /// |E[Y | X]| ≤ 3·stderr in every bin.
    pub symmetric: bool,
    pub bins: Vec<JointBin>,
    /// Same fit after shuffling Y across trajectories.
    pub shuffled_fit: LinearFit,
    pub shuffled_intercept_zero: bool,
    pub expected_slope: Option<f64>,
    pub slope_contains_expected: Option<bool>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointConfig {
    pub bins: usize,
    pub min_per_bin: usize,
    /// Two-sided normal critical value of the CIs.
    pub z: f64,
    pub shuffle_seed: u64,
}

impl Default for JointConfig {
    fn default() -> Self {
        Self {
            bins: 10,
            min_per_bin: 30,
            z: 1.959_963_984_540_054,
            shuffle_seed: 11,
        }
    }
}

/// Conditional structure of Y = S_n f/√ln n given X = S_n g/ln n: the limit
/// has E[Y² | X] = (σ̃²/I(g))·X and E[Y | X] = 0.
pub fn joint_test(x: &[f64], y: &[f64], n: u64, expected_slope: Option<f64>, cfg: &JointConfig) -> Result<JointReport> {
    if x.len() != y.len() {
        return Err(Error::InvalidArgument("x and y lengths differ".into()));
    }
    let mut order: Vec<usize> = (0..x.len()).collect();
    order.sort_by(|&i, &j| x[i].total_cmp(&x[j]));
    let mut bins = Vec::new();
    let k = cfg.bins.max(1);
    let mut lo = 0;
    for b in 0..k {
        let mut hi = (b + 1) * x.len() / k;
        // Keep equal X values in one bin.
        while hi < x.len() && hi > 0 && x[order[hi]] == x[order[hi - 1]] {
            hi += 1;
        }
        if hi <= lo {
            continue;
        }
        let idx = &order[lo..hi];
        lo = hi;
        if idx.len() < cfg.min_per_bin {
            continue;
        }
        let xs: Vec<f64> = idx.iter().map(|&i| x[i]).collect();
        let ys: Vec<f64> = idx.iter().map(|&i| y[i]).collect();
        let y2: Vec<f64> = ys.iter().map(|v| v * v).collect();
        let (_, vy, _) = describe(&ys);
        let (_, vy2, _) = describe(&y2);
        let c = idx.len() as f64;
        bins.push(JointBin {
            count: idx.len(),
            x_mean: mean(&xs),
            y_mean: mean(&ys),
            y_mean_stderr: (vy / c).sqrt(),
            y2_mean: mean(&y2),
            y2_stderr: (vy2 / c).sqrt(),
        });
        if lo >= x.len() {
            break;
        }
    }
    if bins.len() < 3 {
        return Err(Error::InsufficientBins(bins.len()));
    }
    let y2: Vec<f64> = y.iter().map(|v| v * v).collect();
    let fit = ols(x, &y2);
    let mut shuffled = y2.clone();
    let mut rng = stream_rng(cfg.shuffle_seed, 0);
    shuffled.shuffle(&mut rng);
    let shuffled_fit = ols(x, &shuffled);
    let ci = (fit.slope - cfg.z * fit.slope_stderr, fit.slope + cfg.z * fit.slope_stderr);
    Ok(JointReport {
        n,
        fit,
        slope_ci: ci,
        intercept_zero: fit.intercept.abs() <= cfg.z * fit.intercept_stderr,
        symmetric: bins.iter().all(|b| b.y_mean.abs() <= 3.0 * b.y_mean_stderr),
        bins,
        shuffled_fit,
        shuffled_intercept_zero: shuffled_fit.intercept.abs() <= cfg.z * shuffled_fit.intercept_stderr,
        expected_slope,
        slope_contains_expected: expected_slope.map(|e| e >= ci.0 && e <= ci.1),
    })
}

/// [`joint_test`] on the run's statistics at base time n (grid point 1).
pub fn joint_test_run(run: &EnsembleRun, clock: Clock, g: usize, f: usize, n: u64, expected_slope: Option<f64>, cfg: &JointConfig) -> Result<JointReport> {
    let s = reference_grid_point(run);
    let l = run.time(clock, n, s).ln();
    let x: Vec<f64> = run.values(clock, g, n, s)?.iter().map(|v| v / l).collect();
    let y: Vec<f64> = run.values(clock, f, n, s)?.iter().map(|v| v / l.sqrt()).collect();
    joint_test(&x, &y, n, expected_slope, cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flatness {
    /// Centered f, normalized by √ln n.
    Centered,
    /// Integrable g, normalized by ln n.
    Integrable,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatnessRow {
    pub n: u64,
    pub mean: f64,
    pub stderr: f64,
    /// For g: E[W_n]·ln n / ln(⌈nT₂⌉/⌊nT₁⌋), the constant in the bound.
    pub bound_ratio: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub kind: Flatness,
    pub clock: Clock,
    pub rows: Vec<FlatnessRow>,
    /// Each E[W_n] is below the previous one plus one combined stderr.
    pub monotone: bool,
}

/// W_n = max_s |S̃_{ns} − S̃_{nT₁}| / norm(n) per trajectory, averaged.
pub fn functional_flatness(run: &EnsembleRun, clock: Clock, obs: usize, kind: Flatness) -> Result<FlatnessReport> {
    let grid = &run.config.grid;
    if grid.len() < 3 {
        return Err(Error::InvalidArgument("flatness needs at least three grid points".into()));
    }
    let t1 = grid.iter().cloned().fold(f64::INFINITY, f64::min);
    let t2 = grid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut rows = Vec::new();
    for &n in &run.config.times {
        let l = run.time(clock, n, 1.0).ln();
        let norm = match kind {
            Flatness::Centered => l.sqrt(),
            Flatness::Integrable => l,
        };
        let base = run.values(clock, obs, n, t1)?;
        let mut w = vec![0.0f64; base.len()];
        for &s in grid {
            let v = run.values(clock, obs, n, s)?;
            for (wi, (a, b)) in w.iter_mut().zip(v.iter().zip(base)) {
                *wi = wi.max((a - b).abs() / norm);
            }
        }
        let (m, se) = batch_stderr(&w, MOMENT_BATCHES, mean);
        let bound_ratio = match kind {
            Flatness::Integrable => {
                let r = ((n as f64 * t2).ceil() / (n as f64 * t1).floor()).ln();
                (r > 0.0).then(|| m * l / r)
            }
            Flatness::Centered => None,
        };
        rows.push(FlatnessRow {
            n,
            mean: m,
            stderr: se,
            bound_ratio,
        });
    }
    let monotone = rows
        .windows(2)
        .all(|p| p[1].mean <= p[0].mean + (p[0].stderr.powi(2) + p[1].stderr.powi(2)).sqrt());
    Ok(FlatnessReport {
        kind,
        clock,
        rows,
        monotone,
    })
}

/// Exponential and Laplace tests on the flow clock.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlowReports {
    pub exponential: Vec<LawTestReport>,
    pub laplace: Vec<LawTestReport>,
    /// Growth rate of E[∫₀ᵗ ψ] in ln t against ∫ψ dν̃·Φ(0).
    pub log_slope: LogSlope,
    pub expected_mean: f64,
}

/// Flow-clock tests: ∫₀ᵗψ/ln t against Exp(∫ψ dν̃·Φ(0)) and
/// ∫₀ᵗφ/√(Φ(0)σ̃²(G(φ)) ln t) against the standard Laplace law.
pub fn flow_tests(run: &EnsembleRun, psi: usize, psi_integral: f64, phi: usize, sigma2_g: VarianceInput, phi0: f64) -> Result<FlowReports> {
    Ok(FlowReports {
        exponential: exponential_test(run, Clock::Flow, psi, psi_integral, phi0)?,
        laplace: laplace_test(run, Clock::Flow, phi, sigma2_g, phi0)?,
        log_slope: log_slope(run, Clock::Flow, psi)?,
        expected_mean: psi_integral * phi0,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LogSlope {
    pub slope: f64,
    pub stderr: f64,
    pub intercept: f64,
}

/// Mean over trajectories of the least-squares slope of the statistic
/// against ln(time) across all checkpoints. For a local time the mean
/// grows as m·ln t + c, so the slope removes the constant c, which the
/// ratio S_t/ln t still carries at finite t.
pub fn log_slope(run: &EnsembleRun, clock: Clock, obs: usize) -> Result<LogSlope> {
    let mut points = Vec::new();
    for &n in &run.config.times {
        for &s in &run.config.grid {
            points.push((run.time(clock, n, s).ln(), run.values(clock, obs, n, s)?));
        }
    }
    let xbar = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let sxx: f64 = points.iter().map(|p| (p.0 - xbar).powi(2)).sum();
    if !(sxx > 0.0) {
        return Err(Error::InvalidArgument("log-slope needs at least two distinct times".into()));
    }
    let slopes: Vec<f64> = (0..run.trajectories())
        .map(|i| points.iter().map(|(x, v)| (x - xbar) * v[i]).sum::<f64>() / sxx)
        .collect();
    let levels: Vec<f64> = (0..run.trajectories())
        .map(|i| points.iter().map(|(_, v)| v[i]).sum::<f64>() / points.len() as f64)
        .collect();
    let (slope, stderr) = batch_stderr(&slopes, MOMENT_BATCHES, mean);
    Ok(LogSlope {
        slope,
        stderr,
        intercept: mean(&levels) - slope * xbar,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moments::mc_limit_sampler;
    use crate::oracle::{OracleChain, OracleObservable};

    fn oracle_run(seed: u64, grid: Vec<f64>) -> (EnsembleRun, OracleChain) {
        let (c, w) = OracleChain::lazy_walk().with_marks(2).unwrap();
        let g = OracleObservable::indicator([0, 0]);
        let f = OracleObservable::marks_at_origin(w);
        let cfg = EnsembleConfig {
            trajectories: 400,
            seed,
            times: vec![100, 1_000],
            grid,
            flow_clock: false,
            retry_budget: 0,
        };
        let run = run_ensemble(&c, &cfg, &[("g", &g), ("f", &f)], &[]).unwrap();
        (run, c)
    }

    #[test]
    fn deterministic_and_nested() {
        let (a, _) = oracle_run(3, vec![1.0, 1.5, 2.0]);
        let (b, _) = oracle_run(3, vec![1.0, 1.5, 2.0]);
        assert_eq!(a.values(Clock::Map, 1, 1_000, 2.0).unwrap(), b.values(Clock::Map, 1, 1_000, 2.0).unwrap());
        let (c, _) = oracle_run(3, vec![1.0]);
        assert_eq!(a.values(Clock::Map, 0, 1_000, 1.0).unwrap(), c.values(Clock::Map, 0, 1_000, 1.0).unwrap());
        // Local times are nondecreasing along the grid.
        let x = a.values(Clock::Map, 0, 100, 1.0).unwrap();
        let y = a.values(Clock::Map, 0, 1_000, 1.0).unwrap();
        assert!(x.iter().zip(y).all(|(p, q)| p <= q));
        assert!(x.iter().all(|v| *v >= 1.0));
    }

    #[test]
    fn laplace_sign_and_scale() {
        let (run, _) = oracle_run(4, vec![1.0, 1.5, 2.0]);
        let v = VarianceInput { sigma2: 1.0, stderr: 0.0 };
        let r = laplace_test(&run, Clock::Map, 1, v, 1.25 / std::f64::consts::PI).unwrap();
        let vals = run.values(Clock::Map, 1, 1_000, 1.0).unwrap();
        let neg: Vec<f64> = vals.iter().map(|x| -x).collect();
        let scale = (1.25 / std::f64::consts::PI * 1000f64.ln()).sqrt();
        let a = law_test(&vals.iter().map(|x| x / scale).collect::<Vec<_>>(), TargetLaw::Laplace { variance: 1.0 }, 1000, 1000.0);
        let b = law_test(&neg.iter().map(|x| x / scale).collect::<Vec<_>>(), TargetLaw::Laplace { variance: 1.0 }, 1000, 1000.0);
        assert!((a.ks - b.ks).abs() < 1e-12);
        assert!((r[1].ks - a.ks).abs() < 1e-12);
        assert!(laplace_test(&run, Clock::Map, 1, VarianceInput { sigma2: 0.01, stderr: 0.01 }, 0.4).is_err());
    }

    #[test]
    fn degenerate_and_flat_cases() {
        let r = law_test(&[0.0; 100], TargetLaw::Exponential { mean: 1.0 }, 1, 1.0);
        assert!(r.degenerate);
        let (run, _) = oracle_run(5, vec![1.0, 1.0, 1.0]);
        let f = functional_flatness(&run, Clock::Map, 1, Flatness::Centered).unwrap();
        assert!(f.rows.iter().all(|r| r.mean == 0.0));
        assert!(functional_flatness(&run, Clock::Map, 1, Flatness::Centered).is_ok());
    }

    #[test]
    fn joint_recovers_synthetic_slope() {
        let phi0 = 0.3;
        let samples = mc_limit_sampler(phi0, 1.5, 100_000, &mut stream_rng(6, 0));
        let x: Vec<f64> = samples.iter().map(|p| p.0).collect();
        let y: Vec<f64> = samples.iter().map(|p| p.1).collect();
        let r = joint_test(&x, &y, 0, Some(1.5 * 1.5), &JointConfig::default()).unwrap();
        assert_eq!(r.slope_contains_expected, Some(true), "{:?}", r.fit);
        assert!(r.intercept_zero && r.symmetric);
        assert!(!r.shuffled_intercept_zero);
        assert!(r.shuffled_fit.slope.abs() < 5.0 * r.shuffled_fit.slope_stderr);
    }

    #[test]
    fn log_slope_of_oracle_local_time() {
        let (run, _) = oracle_run(8, vec![1.0, 1.5, 2.0]);
        let s = log_slope(&run, Clock::Map, 0).unwrap();
        assert!((s.slope - 1.25 / std::f64::consts::PI).abs() < 4.0 * s.stderr + 0.02, "{s:?}");
    }
}
