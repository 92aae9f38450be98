//! Per-cell observables f(x, a) on the extended collision space, flow
//! observables on the extended billiard domain, and the flight integral
//! G(θ)(x, a) = ∫₀^τ(x) θ(Ỹ_s(x, a, 0)) ds that turns the latter into the
//! former.

use crate::dynamics::{Billiard, Collision};
use crate::error::{Error, Result};
use crate::geometry::{TableConfig, Vec2};
use crate::rng::stream_rng;
use crate::stats::{gauss_legendre, Moments};
use crate::system::{cell_add, cell_sub, Cell, Dynamics};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};

/// Base profile w(x) multiplying the per-cell coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BaseProfile {
    One,
    SinPhi,
    SinSqPhi,
    /// sin²φ − 1/3, centered under μ.
    SinSqPhiCentered,
    /// (1 − ((r − r0)/h)²)² on one obstacle, zero elsewhere.
    BumpR { obstacle: usize, center: f64, width: f64 },
}

impl BaseProfile {
    #[inline]
    pub fn eval(&self, cfg: &TableConfig, x: &Collision) -> f64 {
        match *self {
            BaseProfile::One => 1.0,
            BaseProfile::SinPhi => x.sin_phi(),
            BaseProfile::SinSqPhi => {
                let s = x.sin_phi();
                s * s
            }
            BaseProfile::SinSqPhiCentered => {
                let s = x.sin_phi();
                s * s - 1.0 / 3.0
            }
            BaseProfile::BumpR {
                obstacle,
                center,
                width,
            } => {
                if x.obstacle != obstacle {
                    return 0.0;
                }
                let per = TAU * cfg.obstacles()[obstacle].radius;
                let mut d = (x.arclength(cfg) - center).rem_euclid(per);
                if d > per / 2.0 {
                    d -= per;
                }
                let z = d / width;
                if z.abs() >= 1.0 {
                    0.0
                } else {
                    let t = 1.0 - z * z;
                    t * t
                }
            }
        }
    }

    /// ∫ w dμ in closed form.
    pub fn integral(&self, cfg: &TableConfig) -> f64 {
        match *self {
            BaseProfile::One => 1.0,
            BaseProfile::SinPhi | BaseProfile::SinSqPhiCentered => 0.0,
            BaseProfile::SinSqPhi => 1.0 / 3.0,
            BaseProfile::BumpR { width, .. } => 16.0 * width / 15.0 / cfg.boundary_total(),
        }
    }

    /// Declared Hölder exponent.
    pub fn holder_exponent(&self) -> f64 {
        1.0
    }

    pub fn sup_norm(&self) -> f64 {
        match self {
            BaseProfile::SinSqPhiCentered => 2.0 / 3.0,
            _ => 1.0,
        }
    }

    /// Declared Hölder norm: sup norm plus a Lipschitz constant in (r, φ).
    pub fn holder_norm(&self) -> f64 {
        match *self {
            BaseProfile::One => 1.0,
            BaseProfile::SinPhi => 2.0,
            BaseProfile::SinSqPhi | BaseProfile::SinSqPhiCentered => self.sup_norm() + 1.0,
            // max |d/dz (1 − z²)²| = 8/(3√3), scaled by 1/h.
            BaseProfile::BumpR { width, .. } => 1.0 + 8.0 / (3.0 * 3f64.sqrt()) / width,
        }
    }
}

/// Envelope ‖f(·, a)‖∞ = e(|a|) for observables without compact support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Envelope {
    /// (1 + |a|)^(−exponent)
    Power { exponent: f64 },
    /// 1 / ln(2 + |a|)
    InverseLog,
}

impl Envelope {
    pub fn eval(&self, rho: f64) -> f64 {
        match *self {
            Envelope::Power { exponent } => (1.0 + rho).powf(-exponent),
            Envelope::InverseLog => 1.0 / (2.0 + rho).ln(),
        }
    }

    /// Upper bound on Σ_{|a| > R} A·|a|^e·env(|a|), or `None` if the sum
    /// diverges. Uses e(|a|) ≤ e(ρ − 1) on the unit square around a and
    /// (ρ + 2)(ρ + 1)^e ≤ 2^(1+e)·ρ^(1+e) for ρ ≥ 2.
    fn tail_bound(&self, a: f64, e: f64, radius: f64) -> Option<f64> {
        match *self {
            Envelope::Power { exponent } => {
                let p = exponent - 2.0 - e;
                if p <= 0.0 {
                    return None;
                }
                let r0 = (radius - 1.0).max(2.0);
                Some(2f64.powf(2.0 + e) * PI * a * r0.powf(-p) / p)
            }
            Envelope::InverseLog => None,
        }
    }
}

/// A map observable f(x, a).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellObservable {
    /// f(x, a) = w(x)·c(a) with finitely many nonzero c(a).
    Profile {
        profile: BaseProfile,
        cells: Vec<(Cell, f64)>,
    },
    /// f(x, a) = w(x)·e(|a|) truncated to |a|∞ ≤ radius.
    Decaying {
        profile: BaseProfile,
        envelope: Envelope,
        radius: i64,
    },
    /// f = G(θ), the flight integral of a flow observable.
    Flight(FlowObservable),
    /// Σ cᵢ·fᵢ.
    Combination(Vec<(f64, CellObservable)>),
}

impl CellObservable {
    pub fn indicator(cell: Cell) -> Self {
        CellObservable::Profile {
            profile: BaseProfile::One,
            cells: vec![(cell, 1.0)],
        }
    }

    /// g₀ = 1₀.
    pub fn cell0() -> Self {
        Self::indicator([0, 0])
    }

    /// w(x)·1₀(a).
    pub fn profile_at_origin(profile: BaseProfile) -> Self {
        CellObservable::Profile {
            profile,
            cells: vec![([0, 0], 1.0)],
        }
    }

    /// 1₀ − 1_(1,0).
    pub fn dipole() -> Self {
        CellObservable::Profile {
            profile: BaseProfile::One,
            cells: vec![([0, 0], 1.0), ([1, 0], -1.0)],
        }
    }

    /// Per-cell coefficients from a table of (cell, coefficient) rows.
    pub fn from_table(profile: BaseProfile, rows: Vec<(Cell, f64)>) -> Self {
        CellObservable::Profile {
            profile,
            cells: rows,
        }
    }

    pub fn scaled(self, c: f64) -> Self {
        CellObservable::Combination(vec![(c, self)])
    }

    /// f − I·g₀, where `integral` is the estimate of ∫f and I(g₀) = 1.
    pub fn centered(self, integral: f64, reference: CellObservable) -> Self {
        CellObservable::Combination(vec![(1.0, self), (-integral, reference)])
    }

    /// Evaluate at a billiard point.
    pub fn evaluate(&self, b: &Billiard, x: &Collision, cell: Cell) -> Result<f64> {
        Ok(match self {
            CellObservable::Profile { profile, cells } => {
                let c = coefficient(cells, cell);
                if c == 0.0 {
                    0.0
                } else {
                    c * profile.eval(b.table(), x)
                }
            }
            CellObservable::Decaying {
                profile,
                envelope,
                radius,
            } => {
                if cell[0].abs().max(cell[1].abs()) > *radius {
                    0.0
                } else {
                    let rho = ((cell[0] * cell[0] + cell[1] * cell[1]) as f64).sqrt();
                    envelope.eval(rho) * profile.eval(b.table(), x)
                }
            }
            CellObservable::Flight(theta) => flight_integrate(b, theta, x, cell)?,
            CellObservable::Combination(parts) => {
                let mut s = 0.0;
                for (c, f) in parts {
                    s += c * f.evaluate(b, x, cell)?;
                }
                s
            }
        })
    }

    /// Evaluate at every cell of `cells`, sharing the flight computation.
    pub fn evaluate_many(
        &self,
        b: &Billiard,
        x: &Collision,
        cells: &[Cell],
        out: &mut [f64],
    ) -> Result<()> {
        match self {
            CellObservable::Flight(theta) => {
                let (q, v, tau) = b.flight_segment(x)?;
                for (o, &a) in out.iter_mut().zip(cells) {
                    *o = theta.segment_integral(b, x, a, q, v, tau, tau)?;
                }
            }
            CellObservable::Combination(parts) => {
                out.iter_mut().for_each(|o| *o = 0.0);
                let mut tmp = vec![0.0; cells.len()];
                for (c, f) in parts {
                    f.evaluate_many(b, x, cells, &mut tmp)?;
                    for (o, t) in out.iter_mut().zip(&tmp) {
                        *o += c * t;
                    }
                }
            }
            _ => {
                for (o, &a) in out.iter_mut().zip(cells) {
                    *o = self.evaluate(b, x, a)?;
                }
            }
        }
        Ok(())
    }

    /// Cells carrying the observable. `reach` is the largest cell offset a
    /// single flight can cover, needed for flight integrals.
    pub fn support(&self, reach: i64) -> Vec<Cell> {
        let mut set = BTreeSet::new();
        self.collect_support(reach, &mut set);
        set.into_iter().collect()
    }

    fn collect_support(&self, reach: i64, set: &mut BTreeSet<Cell>) {
        match self {
            CellObservable::Profile { cells, .. } => {
                set.extend(cells.iter().filter(|(_, c)| *c != 0.0).map(|(a, _)| *a))
            }
            CellObservable::Decaying { radius, .. } => {
                for x in -radius..=*radius {
                    for y in -radius..=*radius {
                        set.insert([x, y]);
                    }
                }
            }
            CellObservable::Flight(theta) => {
                for s in theta.spatial_support() {
                    for dx in -reach..=reach {
                        for dy in -reach..=reach {
                            set.insert(cell_sub(s, [dx, dy]));
                        }
                    }
                }
            }
            CellObservable::Combination(parts) => {
                for (_, f) in parts {
                    f.collect_support(reach, set);
                }
            }
        }
    }

    /// Declared Hölder exponent (the minimum over components).
    pub fn holder_exponent(&self) -> f64 {
        match self {
            CellObservable::Profile { profile, .. } | CellObservable::Decaying { profile, .. } => {
                profile.holder_exponent()
            }
            CellObservable::Flight(_) => 1.0,
            CellObservable::Combination(parts) => parts
                .iter()
                .map(|(_, f)| f.holder_exponent())
                .fold(1.0, f64::min),
        }
    }
}

fn coefficient(cells: &[(Cell, f64)], cell: Cell) -> f64 {
    cells
        .iter()
        .filter(|(a, _)| *a == cell)
        .map(|(_, c)| *c)
        .sum()
}

/// A flow observable θ(q, v) on the extended billiard domain. Spatial cells
/// are the unit squares a + [0,1)².
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowObservable {
    Constant(f64),
    /// θ(q, v) = c(⌊q⌋).
    SpatialCells(Vec<(Cell, f64)>),
    /// θ(q, v) = c(⌊q⌋)·v_x.
    VelocityX(Vec<(Cell, f64)>),
    /// θ(q, v) = c(⌊q⌋)·cos(2π⟨k, q⟩), k integer so θ is cell-periodic.
    PositionWave {
        cells: Vec<(Cell, f64)>,
        frequency: [i64; 2],
    },
    /// f(x, a)/τ(x) spread over the flight leaving (x, a), so G = f.
    MapLift(Box<CellObservable>),
    Combination(Vec<(f64, FlowObservable)>),
}

impl FlowObservable {
    /// ψ = indicator of the cell-0 fundamental domain.
    pub fn cell0() -> Self {
        FlowObservable::SpatialCells(vec![([0, 0], 1.0)])
    }

    /// Spatial dipole 1_{[0,1)²} − 1_{(1,0)+[0,1)²}.
    pub fn dipole() -> Self {
        FlowObservable::SpatialCells(vec![([0, 0], 1.0), ([1, 0], -1.0)])
    }

    /// Spatial cells where θ may be nonzero; empty for observables that
    /// are not spatially localized (their G is handled directly).
    pub fn spatial_support(&self) -> Vec<Cell> {
        let mut set = BTreeSet::new();
        self.collect_spatial(&mut set);
        set.into_iter().collect()
    }

    fn collect_spatial(&self, set: &mut BTreeSet<Cell>) {
        match self {
            FlowObservable::Constant(_) | FlowObservable::MapLift(_) => {}
            FlowObservable::SpatialCells(c)
            | FlowObservable::VelocityX(c)
            | FlowObservable::PositionWave { cells: c, .. } => {
                set.extend(c.iter().filter(|(_, v)| *v != 0.0).map(|(a, _)| *a))
            }
            FlowObservable::Combination(parts) => {
                for (_, f) in parts {
                    f.collect_spatial(set);
                }
            }
        }
    }

    /// ∫ θ dν̃ with the normalization Leb([0,1)²×S¹) = π/Σ|∂Oᵢ|, for the
    /// cell-constant and velocity families.
    pub fn flow_integral(&self, cfg: &TableConfig) -> Option<f64> {
        let per_cell = cfg.flow_cell_volume();
        match self {
            FlowObservable::Constant(_) | FlowObservable::MapLift(_) => None,
            FlowObservable::SpatialCells(c) => Some(per_cell * c.iter().map(|(_, v)| v).sum::<f64>()),
            FlowObservable::VelocityX(_) => Some(0.0),
            FlowObservable::PositionWave { .. } => None,
            FlowObservable::Combination(parts) => {
                let mut s = 0.0;
                for (c, f) in parts {
                    s += c * f.flow_integral(cfg)?;
                }
                Some(s)
            }
        }
    }

    /// ∫₀^upto θ along the flight from `q` (position in the frame of the
    /// collision cell `a`) with velocity `v`; `tau` is the full flight.
    #[allow(clippy::too_many_arguments)]
    pub fn segment_integral(
        &self,
        b: &Billiard,
        x: &Collision,
        a: Cell,
        q: Vec2,
        v: Vec2,
        tau: f64,
        upto: f64,
    ) -> Result<f64> {
        match self {
            FlowObservable::Constant(c) => Ok(c * upto),
            FlowObservable::SpatialCells(cells) => {
                let mut s = 0.0;
                if touches(cells, a, q, v, upto) {
                    cell_pieces(q, v, upto, |o, s0, s1| {
                        s += coefficient(cells, cell_add(a, o)) * (s1 - s0);
                    });
                }
                Ok(s)
            }
            FlowObservable::VelocityX(cells) => {
                let mut s = 0.0;
                if touches(cells, a, q, v, upto) {
                    cell_pieces(q, v, upto, |o, s0, s1| {
                        s += coefficient(cells, cell_add(a, o)) * v[0] * (s1 - s0);
                    });
                }
                Ok(s)
            }
            FlowObservable::PositionWave { cells, frequency } => {
                let mut s = 0.0;
                let mut err = None;
                if touches(cells, a, q, v, upto) {
                    let k = [frequency[0] as f64, frequency[1] as f64];
                    let g = |t: f64| (TAU * (k[0] * (q[0] + t * v[0]) + k[1] * (q[1] + t * v[1]))).cos();
                    cell_pieces(q, v, upto, |o, s0, s1| {
                        let c = coefficient(cells, cell_add(a, o));
                        if c != 0.0 && err.is_none() {
                            match b.quadrature().integrate(&g, s0, s1) {
                                Ok(val) => s += c * val,
                                Err(e) => err = Some(e),
                            }
                        }
                    });
                }
                match err {
                    Some(e) => Err(e),
                    None => Ok(s),
                }
            }
            FlowObservable::MapLift(f) => Ok(f.evaluate(b, x, a)? * upto / tau),
            FlowObservable::Combination(parts) => {
                let mut s = 0.0;
                for (c, f) in parts {
                    s += c * f.segment_integral(b, x, a, q, v, tau, upto)?;
                }
                Ok(s)
            }
        }
    }
}

/// Whether the bounding box of the segment meets a support cell.
#[inline]
fn touches(cells: &[(Cell, f64)], a: Cell, q: Vec2, v: Vec2, len: f64) -> bool {
    let e = [q[0] + len * v[0], q[1] + len * v[1]];
    let lo = [q[0].min(e[0]).floor() as i64, q[1].min(e[1]).floor() as i64];
    let hi = [q[0].max(e[0]).floor() as i64, q[1].max(e[1]).floor() as i64];
    cells.iter().any(|(c, _)| {
        let o = cell_sub(*c, a);
        o[0] >= lo[0] && o[0] <= hi[0] && o[1] >= lo[1] && o[1] <= hi[1]
    })
}

/// Split the segment q + s·v, s ∈ [0, len], at the integer grid lines and
/// report each piece as (cell offset ⌊q + s v⌋, s₀, s₁).
pub fn cell_pieces<F: FnMut(Cell, f64, f64)>(q: Vec2, v: Vec2, len: f64, mut f: F) {
    let mut c = [q[0].floor() as i64, q[1].floor() as i64];
    let stepping = |p: f64, vel: f64, ci: i64| -> (f64, f64, i64) {
        if vel > 0.0 {
            (((ci + 1) as f64 - p) / vel, 1.0 / vel, 1)
        } else if vel < 0.0 {
            ((ci as f64 - p) / vel, -1.0 / vel, -1)
        } else {
            (f64::INFINITY, f64::INFINITY, 0)
        }
    };
    let (mut tx, dx, sx) = stepping(q[0], v[0], c[0]);
    let (mut ty, dy, sy) = stepping(q[1], v[1], c[1]);
    let mut s = 0.0;
    loop {
        let e = tx.min(ty).min(len);
        if e > s {
            f(c, s, e);
        }
        if e >= len {
            break;
        }
        if tx <= ty {
            c[0] += sx;
            tx += dx;
        } else {
            c[1] += sy;
            ty += dy;
        }
        s = e;
    }
}

/// G(θ)(x, a): integral of θ over the whole flight leaving (x, a).
pub fn flight_integrate(b: &Billiard, theta: &FlowObservable, x: &Collision, a: Cell) -> Result<f64> {
    let (q, v, tau) = b.flight_segment(x)?;
    theta.segment_integral(b, x, a, q, v, tau, tau)
}

/// Gauss–Legendre rule with adaptive bisection on disagreement.
#[derive(Debug, Clone)]
pub struct Quadrature {
    nodes: Vec<f64>,
    weights: Vec<f64>,
    tol: f64,
    max_depth: usize,
}

impl Quadrature {
    pub fn new(order: usize) -> Self {
        let (nodes, weights) = gauss_legendre(order);
        Self {
            nodes,
            weights,
            tol: 1e-12,
            max_depth: 12,
        }
    }

    pub fn order(&self) -> usize {
        self.nodes.len()
    }

    fn rule<G: Fn(f64) -> f64>(&self, g: &G, a: f64, b: f64) -> f64 {
        let h = 0.5 * (b - a);
        let m = 0.5 * (a + b);
        h * self
            .nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * g(m + h * x))
            .sum::<f64>()
    }

    pub fn integrate<G: Fn(f64) -> f64>(&self, g: &G, a: f64, b: f64) -> Result<f64> {
        let whole = self.rule(g, a, b);
        self.refine(g, a, b, whole, 0)
    }

    fn refine<G: Fn(f64) -> f64>(&self, g: &G, a: f64, b: f64, whole: f64, depth: usize) -> Result<f64> {
        let m = 0.5 * (a + b);
        let left = self.rule(g, a, m);
        let right = self.rule(g, m, b);
        if (left + right - whole).abs() <= self.tol * (1.0 + whole.abs()) {
            return Ok(left + right);
        }
        if depth >= self.max_depth {
            return Err(Error::QuadratureUnstable(depth));
        }
        Ok(self.refine(g, a, m, left, depth + 1)? + self.refine(g, m, b, right, depth + 1)?)
    }
}

/// Monte Carlo estimate of ∫_Ã f dμ̃ = Σ_a E_μ[f(·, a)] with its standard
/// error.
pub fn integral<D: Dynamics>(dynamics: &D, f: &D::Observable, samples: usize, seed: u64) -> Result<(f64, f64)> {
    let support = dynamics.support(f);
    let mut rng = stream_rng(seed, 0);
    let mut m = Moments::default();
    let mut buf = vec![0.0; support.len()];
    for _ in 0..samples {
        let x = dynamics.sample_base(&mut rng);
        dynamics.observe_many(f, &x, &support, &mut buf)?;
        m.push(buf.iter().sum());
    }
    Ok((m.mean(), m.stderr()))
}

/// Hypothesis sums of the decay conditions on an observable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayReport {
    pub kappa: f64,
    pub holder_exponent: f64,
    /// Σ_a |a|^κ ‖f(·,a)‖_η, `None` if divergent.
    pub holder_sum: Option<f64>,
    /// Σ_a (1 + ln₊|a|)^(1/2+κ) ‖f(·,a)‖∞, `None` if divergent.
    pub log_sum: Option<f64>,
    /// Upper bounds on the neglected tails of the two sums.
    pub holder_tail: Option<f64>,
    pub log_tail: Option<f64>,
    /// Decay hypothesis of the map-time limit theorem.
    pub map_theorem_ok: bool,
    /// Decay hypothesis of the induced-variance identity.
    pub induced_ok: bool,
}

/// Evaluate both decay sums. Compact supports are summed exactly; decaying
/// envelopes are summed to |a| ≤ `sum_radius` with an integral-comparison
/// tail bound (without the truncation used for evaluation).
pub fn decay_check(f: &CellObservable, kappa: f64, sum_radius: i64) -> DecayReport {
    let eta = f.holder_exponent();
    let (holder_sum, log_sum, holder_tail, log_tail) = match decay_parts(f, kappa, sum_radius) {
        Some((h, l, ht, lt)) => (h, l, ht, lt),
        None => (None, None, None, None),
    };
    DecayReport {
        kappa,
        holder_exponent: eta,
        holder_sum,
        log_sum,
        holder_tail,
        log_tail,
        map_theorem_ok: holder_sum.is_some(),
        induced_ok: log_sum.is_some(),
    }
}

type DecayParts = (Option<f64>, Option<f64>, Option<f64>, Option<f64>);

fn log_weight(rho: f64, kappa: f64) -> f64 {
    (1.0 + rho.ln().max(0.0)).powf(0.5 + kappa)
}

fn decay_parts(f: &CellObservable, kappa: f64, sum_radius: i64) -> Option<DecayParts> {
    match f {
        CellObservable::Profile { profile, cells } => {
            let mut h = 0.0;
            let mut l = 0.0;
            for (a, c) in cells {
                let rho = ((a[0] * a[0] + a[1] * a[1]) as f64).sqrt();
                h += rho.powf(kappa) * c.abs() * profile.holder_norm();
                l += log_weight(rho, kappa) * c.abs() * profile.sup_norm();
            }
            Some((Some(h), Some(l), Some(0.0), Some(0.0)))
        }
        CellObservable::Decaying {
            profile, envelope, ..
        } => {
            let mut h = 0.0;
            let mut l = 0.0;
            for x in -sum_radius..=sum_radius {
                for y in -sum_radius..=sum_radius {
                    let rho = ((x * x + y * y) as f64).sqrt();
                    if rho > sum_radius as f64 {
                        continue;
                    }
                    let e = envelope.eval(rho);
                    h += rho.powf(kappa) * e * profile.holder_norm();
                    l += log_weight(rho, kappa) * e * profile.sup_norm();
                }
            }
            let r = sum_radius as f64;
            let ht = envelope.tail_bound(profile.holder_norm(), kappa, r);
            // For ρ ≥ R: (1 + ln ρ)^c ≤ (1 + ln R)^c·(ρ/R)^ε with
            // ε = c/(1 + ln R).
            let c = 0.5 + kappa;
            let eps = c / (1.0 + r.ln());
            let amp = log_weight(r, kappa) * r.powf(-eps) * profile.sup_norm();
            let lt = envelope.tail_bound(amp, eps, r);
            Some((ht.map(|t| h + t), lt.map(|t| l + t), ht, lt))
        }
        CellObservable::Flight(theta) => {
            // Declared norms: one unit per spatial support cell, relative to
            // the flight-length bound.
            let s = theta.spatial_support();
            if s.is_empty() {
                return None;
            }
            let mut h = 0.0;
            let mut l = 0.0;
            for a in &s {
                let rho = ((a[0] * a[0] + a[1] * a[1]) as f64).sqrt();
                h += rho.powf(kappa);
                l += log_weight(rho, kappa);
            }
            Some((Some(h), Some(l), Some(0.0), Some(0.0)))
        }
        CellObservable::Combination(parts) => {
            let mut acc = (Some(0.0), Some(0.0), Some(0.0), Some(0.0));
            for (c, g) in parts {
                let (h, l, ht, lt) = decay_parts(g, kappa, sum_radius)?;
                let add = |a: Option<f64>, b: Option<f64>, w: f64| Some(a? + w * b?);
                acc = (
                    add(acc.0, h, c.abs()),
                    add(acc.1, l, c.abs()),
                    add(acc.2, ht, c.abs()),
                    add(acc.3, lt, c.abs()),
                );
            }
            Some(acc)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pieces_partition_the_segment() {
        let q = [0.3, 0.9];
        let v = [0.6, -0.8];
        let mut total = 0.0;
        let mut cells = Vec::new();
        cell_pieces(q, v, 2.0, |c, s0, s1| {
            total += s1 - s0;
            cells.push(c);
        });
        assert!((total - 2.0).abs() < 1e-15);
        assert_eq!(cells.first(), Some(&[0, 0]));
        assert_eq!(cells.last(), Some(&[1, -1]));
    }

    #[test]
    fn crossing_two_cells_matches_exact_split() {
        // From (0.5, 0.5) heading +x for length 1: half in cell 0, half in
        // cell (1, 0).
        let mut parts = Vec::new();
        cell_pieces([0.5, 0.5], [1.0, 0.0], 1.0, |c, s0, s1| parts.push((c, s1 - s0)));
        assert_eq!(parts, vec![([0, 0], 0.5), ([1, 0], 0.5)]);
    }

    #[test]
    fn quadrature_integrates_cosine() {
        let q = Quadrature::new(8);
        let v = q.integrate(&|t: f64| (3.0 * t).cos(), 0.0, 1.3).unwrap();
        assert!((v - (3.9f64).sin() / 3.0).abs() < 1e-13);
    }

    #[test]
    fn decay_check_flags_examples() {
        let compact = decay_check(&CellObservable::dipole(), 0.5, 50);
        assert!(compact.map_theorem_ok && compact.induced_ok);
        let power = CellObservable::Decaying {
            profile: BaseProfile::One,
            envelope: Envelope::Power { exponent: 3.0 },
            radius: 10,
        };
        let r = decay_check(&power, 0.5, 200);
        assert!(r.map_theorem_ok && r.induced_ok);
        assert!(r.holder_tail.unwrap() > 0.0);
        let slow = CellObservable::Decaying {
            profile: BaseProfile::One,
            envelope: Envelope::InverseLog,
            radius: 10,
        };
        let r = decay_check(&slow, 0.5, 200);
        assert!(!r.map_theorem_ok && !r.induced_ok);
    }

    #[test]
    fn power_tail_bound_dominates_partial_sums() {
        // Σ_{R < |a| ≤ 4R} is below the bound on Σ_{|a| > R}.
        let env = Envelope::Power { exponent: 3.0 };
        let r = 50i64;
        let mut s = 0.0;
        for x in -4 * r..=4 * r {
            for y in -4 * r..=4 * r {
                let rho = ((x * x + y * y) as f64).sqrt();
                if rho > r as f64 && rho <= 4.0 * r as f64 {
                    s += rho.powf(0.5) * env.eval(rho);
                }
            }
        }
        assert!(s < env.tail_bound(1.0, 0.5, r as f64).unwrap());
    }
}
