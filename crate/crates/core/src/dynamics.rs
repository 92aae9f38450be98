//! The billiard map T, its Z²-extension T̃(x, a) = (T x, a + F(x)), the
//! suspension flow, invariant sampling, Birkhoff sums and the return map to
//! cell 0.
//!
//! Internally a collision is kept as (obstacle, unit normal, outgoing
//! velocity) in the frame of its own cell, which avoids trigonometry in the
//! hot loop; [`BoundaryCoord`] is produced on demand.

use crate::error::{Error, Result};
use crate::geometry::{
    chart, coord_from, cross, dot, reflect_unchecked, validate_table, BoundaryCoord, FlightTable, Hit,
    HorizonCertificate, TableConfig, Vec2,
};
use crate::observables::{CellObservable, FlowObservable, Quadrature};
use crate::rng::{stream_rng, StreamRng};
use crate::stats::{chi_square_test, KahanSum};
use crate::system::{cell_add, Cell, Dynamics, Step, ORIGIN};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::TAU;

/// Post-collision state on ∂Q, in the frame of the obstacle's cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Collision {
    pub obstacle: usize,
    /// Unit normal at the collision point, pointing into the domain.
    pub normal: Vec2,
    /// Outgoing unit velocity.
    pub velocity: Vec2,
}

impl Collision {
    pub fn from_coord(cfg: &TableConfig, b: &BoundaryCoord) -> Self {
        let (q, v) = chart(cfg, b);
        let c = cfg.obstacles()[b.obstacle];
        let r = c.radius;
        Self {
            obstacle: b.obstacle,
            normal: [(q[0] - c.center[0]) / r, (q[1] - c.center[1]) / r],
            velocity: v,
        }
    }

    pub fn coord(&self, cfg: &TableConfig) -> BoundaryCoord {
        coord_from(cfg, self.obstacle, self.normal, self.velocity)
    }

    #[inline]
    pub fn sin_phi(&self) -> f64 {
        cross(self.normal, self.velocity)
    }

    #[inline]
    pub fn cos_phi(&self) -> f64 {
        dot(self.normal, self.velocity)
    }

    pub fn arclength(&self, cfg: &TableConfig) -> f64 {
        let mut theta = self.normal[1].atan2(self.normal[0]);
        if theta < 0.0 {
            theta += TAU;
        }
        theta * cfg.obstacles()[self.obstacle].radius
    }

    #[inline]
    pub fn position(&self, cfg: &TableConfig) -> Vec2 {
        let o = cfg.obstacles()[self.obstacle];
        [
            o.center[0] + o.radius * self.normal[0],
            o.center[1] + o.radius * self.normal[1],
        ]
    }

    /// The reversal ι(r, φ) = (r, −φ), with T⁻¹ = ι∘T∘ι.
    pub fn reversed(&self) -> Self {
        let vn = dot(self.velocity, self.normal);
        Self {
            obstacle: self.obstacle,
            normal: self.normal,
            velocity: [
                2.0 * vn * self.normal[0] - self.velocity[0],
                2.0 * vn * self.normal[1] - self.velocity[1],
            ],
        }
    }
}

/// A point (x, a) of the extended collision space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtendedState {
    pub base: BoundaryCoord,
    pub cell: Cell,
}

/// A point of the suspension flow: `elapsed_since` time units after the
/// collision `last_collision`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlowState {
    pub last_collision: ExtendedState,
    pub elapsed_since: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordStep {
    pub step: u64,
    pub coord: BoundaryCoord,
    pub cell: Cell,
    pub tau: f64,
    pub jump: Cell,
}

/// Recorded collision sequence of one trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub master_seed: u64,
    pub index: u64,
    pub stride: u64,
    pub steps: Vec<RecordStep>,
    pub total_time: f64,
}

/// Probe resolution used when building a billiard from a table.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeSettings {
    pub boundary_points: usize,
    pub directions: usize,
    pub flight_cap: f64,
}

impl Default for ProbeSettings {
    fn default() -> Self {
        Self {
            boundary_points: 10_000,
            directions: 10_000,
            flight_cap: 50.0,
        }
    }
}

/// A validated table with its flight accelerator.
#[derive(Debug, Clone)]
pub struct Billiard {
    cfg: TableConfig,
    certificate: HorizonCertificate,
    flights: FlightTable,
    quadrature: Quadrature,
    reach: i64,
    cumulative_radius: Vec<f64>,
    inv_radius: Vec<f64>,
}

/// One Newton step toward unit length for a nearly unit vector; removes
/// the first-order norm error without a square root.
#[inline]
fn unit_newton(v: Vec2) -> Vec2 {
    let k = 1.5 - 0.5 * dot(v, v);
    [v[0] * k, v[1] * k]
}

impl Billiard {
    /// Probe the table and build the billiard.
    pub fn new(cfg: TableConfig, probe: ProbeSettings) -> Result<Self> {
        let cert = validate_table(&cfg, probe.boundary_points, probe.directions, probe.flight_cap)?;
        Ok(Self::with_certificate(cfg, cert, 8))
    }

    /// Build from an existing certificate; `order` is the Gauss–Legendre
    /// order of flow quadratures.
    pub fn with_certificate(cfg: TableConfig, certificate: HorizonCertificate, order: usize) -> Self {
        let bound = match cfg.horizon_bound() {
            Some(t) => t.max(certificate.tau_max),
            None => certificate.working_bound(),
        };
        let flights = FlightTable::new(&cfg, bound, certificate.flight_cap);
        let reach = (cfg.max_radius() + bound).ceil() as i64 + 1;
        let total: f64 = cfg.obstacles().iter().map(|o| o.radius).sum();
        let mut acc = 0.0;
        let cumulative_radius = cfg
            .obstacles()
            .iter()
            .map(|o| {
                acc += o.radius / total;
                acc
            })
            .collect();
        let inv_radius = cfg.obstacles().iter().map(|o| 1.0 / o.radius).collect();
        Self {
            cfg,
            certificate,
            flights,
            quadrature: Quadrature::new(order),
            reach,
            cumulative_radius,
            inv_radius,
        }
    }

    pub fn table(&self) -> &TableConfig {
        &self.cfg
    }

    pub fn certificate(&self) -> &HorizonCertificate {
        &self.certificate
    }

    pub fn quadrature(&self) -> &Quadrature {
        &self.quadrature
    }

    /// Largest cell offset covered by one flight, measured from the cell of
    /// the departing obstacle.
    pub fn reach(&self) -> i64 {
        self.reach
    }

    #[inline]
    pub fn flight(&self, x: &Collision) -> Result<Hit> {
        self.flights
            .flight_from(x.obstacle, x.position(&self.cfg), x.velocity)
    }

    /// Start point, velocity and length of the flight leaving `x`.
    #[inline]
    pub fn flight_segment(&self, x: &Collision) -> Result<(Vec2, Vec2, f64)> {
        let q = x.position(&self.cfg);
        let hit = self.flights.flight_from(x.obstacle, q, x.velocity)?;
        Ok((q, x.velocity, hit.tau))
    }

    /// One collision: returns T x together with F(x) and τ(x).
    #[inline]
    pub fn map(&self, x: &Collision) -> Result<(Collision, Step)> {
        let hit = self.flight(x)?;
        let o = self.cfg.obstacles()[hit.obstacle];
        let c = [
            o.center[0] + hit.cell_jump[0] as f64,
            o.center[1] + hit.cell_jump[1] as f64,
        ];
        let inv = self.inv_radius[hit.obstacle];
        let n = unit_newton([(hit.point[0] - c[0]) * inv, (hit.point[1] - c[1]) * inv]);
        let v = unit_newton(reflect_unchecked(x.velocity, n));
        Ok((
            Collision {
                obstacle: hit.obstacle,
                normal: n,
                velocity: v,
            },
            Step {
                jump: hit.cell_jump,
                tau: hit.tau,
            },
        ))
    }

    /// T on boundary coordinates: (T x, F(x), τ(x)).
    pub fn billiard_map(&self, x: &BoundaryCoord) -> Result<(BoundaryCoord, Cell, f64)> {
        let (y, step) = self.map(&Collision::from_coord(&self.cfg, x))?;
        Ok((y.coord(&self.cfg), step.jump, step.tau))
    }

    pub fn step_extension(&self, s: &ExtendedState) -> Result<ExtendedState> {
        let (base, jump, _) = self.billiard_map(&s.base)?;
        Ok(ExtendedState {
            base,
            cell: cell_add(s.cell, jump),
        })
    }

    /// Draw from μ: obstacle ∝ perimeter, arclength uniform, sin φ uniform
    /// on (−1, 1).
    pub fn sample_collision(&self, rng: &mut StreamRng) -> Collision {
        let u: f64 = rng.random();
        let obstacle = self
            .cumulative_radius
            .iter()
            .position(|&c| u < c)
            .unwrap_or(self.cfg.len() - 1);
        let theta = TAU * rng.random::<f64>();
        let (sn, cn) = theta.sin_cos();
        let s = 2.0 * rng.random::<f64>() - 1.0;
        let c = (1.0 - s * s).sqrt();
        Collision {
            obstacle,
            normal: [cn, sn],
            velocity: [c * cn - s * sn, s * cn + c * sn],
        }
    }

    pub fn sample_invariant(&self, rng: &mut StreamRng) -> BoundaryCoord {
        self.sample_collision(rng).coord(&self.cfg)
    }

    /// Draw from μ ⊗ δ₀.
    pub fn sample_cell0(&self, rng: &mut StreamRng) -> ExtendedState {
        ExtendedState {
            base: self.sample_invariant(rng),
            cell: ORIGIN,
        }
    }

    /// Record `n` collisions of trajectory `index`, keeping every
    /// `stride`-th one.
    pub fn record_trajectory(&self, master_seed: u64, index: u64, n: u64, stride: u64) -> Result<TrajectoryRecord> {
        let stride = stride.max(1);
        let mut rng = stream_rng(master_seed, index);
        let mut x = self.sample_collision(&mut rng);
        let mut cell = ORIGIN;
        let mut time = KahanSum::new();
        let mut steps = Vec::new();
        for k in 0..n {
            let (y, step) = self.map(&x)?;
            if k % stride == 0 {
                steps.push(RecordStep {
                    step: k,
                    coord: x.coord(&self.cfg),
                    cell,
                    tau: step.tau,
                    jump: step.jump,
                });
            }
            time.add(step.tau);
            cell = cell_add(cell, step.jump);
            x = y;
        }
        Ok(TrajectoryRecord {
            master_seed,
            index,
            stride,
            steps,
            total_time: time.value(),
        })
    }
}

impl Dynamics for Billiard {
    type Base = Collision;
    type Observable = CellObservable;
    type FlowObservable = FlowObservable;

    fn sample_base(&self, rng: &mut StreamRng) -> Collision {
        self.sample_collision(rng)
    }

    #[inline]
    fn advance(&self, base: &mut Collision, _rng: &mut StreamRng) -> Result<Step> {
        let (y, step) = self.map(base)?;
        *base = y;
        Ok(step)
    }

    #[inline]
    fn observe(&self, obs: &CellObservable, base: &Collision, cell: Cell) -> Result<f64> {
        obs.evaluate(self, base, cell)
    }

    fn observe_many(&self, obs: &CellObservable, base: &Collision, cells: &[Cell], out: &mut [f64]) -> Result<()> {
        obs.evaluate_many(self, base, cells, out)
    }

    fn support(&self, obs: &CellObservable) -> Vec<Cell> {
        obs.support(self.reach)
    }

    #[inline]
    fn flow_segment(&self, obs: &FlowObservable, base: &Collision, cell: Cell, tau: f64, upto: f64) -> Result<f64> {
        let q = base.position(&self.cfg);
        obs.segment_integral(self, base, cell, q, base.velocity, tau, upto.min(tau))
    }

    fn flow_support(&self, obs: &FlowObservable) -> Vec<Cell> {
        CellObservable::Flight(obs.clone()).support(self.reach)
    }

    fn mean_roof(&self) -> f64 {
        self.cfg.mean_free_path()
    }
}

/// Chi-square tests of μ against its pushforward under one collision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InvarianceReport {
    pub samples: usize,
    /// (statistic, degrees of freedom, p-value) for the (obstacle, r, φ)
    /// joint bins and the two marginals.
    pub joint: (f64, usize, f64),
    pub arclength: (f64, usize, f64),
    pub angle: (f64, usize, f64),
    /// Samples redrawn after a numerical failure of the map.
    pub redrawn: usize,
}

/// Push `samples` draws from μ through T and bin the images by obstacle,
/// equal arclength bins and equal-mass bins of sin φ.
pub fn invariance_test(b: &Billiard, samples: usize, r_bins: usize, phi_bins: usize, seed: u64) -> Result<InvarianceReport> {
    let cfg = b.table();
    let total = cfg.boundary_total();
    let per = r_bins * phi_bins;
    let mut joint = vec![0u64; cfg.len() * per];
    let mut rng = stream_rng(seed, 0);
    let mut redrawn = 0;
    let mut done = 0;
    while done < samples {
        let x = b.sample_collision(&mut rng);
        let y = match b.map(&x) {
            Ok((y, _)) => y.coord(cfg),
            Err(e) if e.is_numerical() => {
                redrawn += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let len = cfg.obstacles()[y.obstacle].perimeter();
        let ri = ((y.r.rem_euclid(len) / len) * r_bins as f64) as usize;
        let pi = (((y.phi.sin() + 1.0) / 2.0) * phi_bins as f64) as usize;
        joint[y.obstacle * per + ri.min(r_bins - 1) * phi_bins + pi.min(phi_bins - 1)] += 1;
        done += 1;
    }
    let weight: Vec<f64> = cfg.obstacles().iter().map(|o| o.perimeter() / total).collect();
    let probs: Vec<f64> = (0..joint.len())
        .map(|i| weight[i / per] / per as f64)
        .collect();
    let mut r_counts = vec![0u64; cfg.len() * r_bins];
    let mut r_probs = vec![0.0; cfg.len() * r_bins];
    let mut phi_counts = vec![0u64; phi_bins];
    for (i, &c) in joint.iter().enumerate() {
        let (o, rest) = (i / per, i % per);
        r_counts[o * r_bins + rest / phi_bins] += c;
        r_probs[o * r_bins + rest / phi_bins] = weight[o] / r_bins as f64;
        phi_counts[rest % phi_bins] += c;
    }
    Ok(InvarianceReport {
        samples,
        joint: chi_square_test(&joint, &probs),
        arclength: chi_square_test(&r_counts, &r_probs),
        angle: chi_square_test(&phi_counts, &vec![1.0 / phi_bins as f64; phi_bins]),
        redrawn,
    })
}

/// S_k f(x, a) at every checkpoint k (sorted), with compensated sums.
pub fn birkhoff_discrete<D: Dynamics>(
    d: &D,
    base: &D::Base,
    cell: Cell,
    f: &D::Observable,
    checkpoints: &[u64],
    rng: &mut StreamRng,
) -> Result<Vec<f64>> {
    let mut x = base.clone();
    let mut a = cell;
    let mut sum = KahanSum::new();
    let mut out = Vec::with_capacity(checkpoints.len());
    let mut k = 0u64;
    for &target in checkpoints {
        if target < k {
            return Err(Error::InvalidArgument("checkpoints must be sorted".into()));
        }
        while k < target {
            sum.add(d.observe(f, &x, a)?);
            let step = d.advance(&mut x, rng)?;
            a = cell_add(a, step.jump);
            k += 1;
        }
        out.push(sum.value());
    }
    Ok(out)
}

/// S̃_t f = S_⌊t⌋ f + (t − ⌊t⌋)·f∘T̃^⌊t⌋.
pub fn birkhoff_interpolated<D: Dynamics>(
    d: &D,
    base: &D::Base,
    cell: Cell,
    f: &D::Observable,
    t: f64,
    rng: &mut StreamRng,
) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::InvalidArgument(format!("time must be nonnegative, got {t}")));
    }
    let n = t.floor() as u64;
    let mut x = base.clone();
    let mut a = cell;
    let mut sum = KahanSum::new();
    for _ in 0..n {
        sum.add(d.observe(f, &x, a)?);
        let step = d.advance(&mut x, rng)?;
        a = cell_add(a, step.jump);
    }
    let frac = t - n as f64;
    if frac > 0.0 {
        sum.add(frac * d.observe(f, &x, a)?);
    }
    Ok(sum.value())
}

/// ∫₀ᵗ θ∘Ỹ_s ds from the flow point `elapsed` time units after the
/// collision (base, cell).
pub fn birkhoff_flow<D: Dynamics>(
    d: &D,
    base: &D::Base,
    cell: Cell,
    elapsed: f64,
    theta: &D::FlowObservable,
    t: f64,
    rng: &mut StreamRng,
) -> Result<f64> {
    let mut x = base.clone();
    let mut a = cell;
    let mut sum = KahanSum::new();
    let mut start = elapsed;
    let mut remaining = t;
    loop {
        let mut next = x.clone();
        let step = d.advance(&mut next, rng)?;
        let done = d.flow_segment(theta, &x, a, step.tau, start)?;
        let avail = step.tau - start;
        if remaining <= avail {
            sum.add(d.flow_segment(theta, &x, a, step.tau, start + remaining)? - done);
            return Ok(sum.value());
        }
        sum.add(d.flow_segment(theta, &x, a, step.tau, step.tau)? - done);
        remaining -= avail;
        start = 0.0;
        x = next;
        a = cell_add(a, step.jump);
    }
}

/// One excursion of the induced map on cell 0.
#[derive(Debug, Clone)]
pub struct Excursion<B> {
    /// State at the return (or where the cap stopped the walk).
    pub end: B,
    /// Return time φ, or the cap if the walk did not come back.
    pub length: u64,
    /// Excursion sums G_φ(f) = Σ_{k<φ} f∘T̃ᵏ, one per observable.
    pub sums: Vec<f64>,
    pub returned: bool,
}

/// Iterate T̃ from (x, 0) until the cell returns to 0 or `cap` steps pass.
pub fn excursion<D: Dynamics>(
    d: &D,
    base: &D::Base,
    observables: &[&D::Observable],
    cap: u64,
    rng: &mut StreamRng,
) -> Result<Excursion<D::Base>> {
    let mut x = base.clone();
    let mut a = ORIGIN;
    let mut sums = vec![KahanSum::new(); observables.len()];
    let mut k = 0u64;
    while k < cap {
        for (s, f) in sums.iter_mut().zip(observables) {
            s.add(d.observe(f, &x, a)?);
        }
        let step = d.advance(&mut x, rng)?;
        a = cell_add(a, step.jump);
        k += 1;
        if a == ORIGIN {
            return Ok(Excursion {
                end: x,
                length: k,
                sums: sums.iter().map(KahanSum::value).collect(),
                returned: true,
            });
        }
    }
    Ok(Excursion {
        end: x,
        length: k,
        sums: sums.iter().map(KahanSum::value).collect(),
        returned: false,
    })
}

/// Return map to cell 0 with excursion sums; fails when the cap is hit.
pub fn induced_return<D: Dynamics>(
    d: &D,
    base: &D::Base,
    observables: &[&D::Observable],
    cap: u64,
    rng: &mut StreamRng,
) -> Result<Excursion<D::Base>> {
    let e = excursion(d, base, observables, cap, rng)?;
    if e.returned {
        Ok(e)
    } else {
        Err(Error::ReturnCapExceeded(cap))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::HorizonCertificate;

    pub(crate) fn quick_billiard() -> Billiard {
        let cfg = TableConfig::default_two_disk();
        let cert = validate_table(&cfg, 200, 200, 50.0).unwrap();
        Billiard::with_certificate(cfg, cert, 8)
    }

    #[test]
    fn coord_round_trip() {
        let b = quick_billiard();
        let mut rng = stream_rng(1, 0);
        for _ in 0..1000 {
            let x = b.sample_invariant(&mut rng);
            let y = Collision::from_coord(b.table(), &x).coord(b.table());
            assert_eq!(x.obstacle, y.obstacle);
            assert!((x.r - y.r).abs() < 1e-12 || (x.r - y.r).abs() > 1.0);
            assert!((x.phi - y.phi).abs() < 1e-12);
        }
    }

    #[test]
    fn normal_departure_hits_head_on() {
        // Normal departure from the big disk toward the small one in the
        // same cell: the ray passes through the small disk's center.
        let b = quick_billiard();
        let h = std::f64::consts::FRAC_PI_4;
        let x = BoundaryCoord {
            obstacle: 0,
            r: 0.4 * h,
            phi: 0.0,
        };
        let (y, jump, tau) = b.billiard_map(&x).unwrap();
        assert_eq!(jump, [0, 0]);
        assert_eq!(y.obstacle, 1);
        assert!(y.phi.abs() < 1e-12);
        assert!((tau - (0.5f64.sqrt() - 0.6)).abs() < 1e-12);
    }

    #[test]
    fn reversal_inverts_the_map() {
        let b = quick_billiard();
        let mut rng = stream_rng(2, 0);
        for _ in 0..1000 {
            let x = b.sample_collision(&mut rng);
            let (y, s1) = b.map(&x).unwrap();
            let (z, s2) = b.map(&y.reversed()).unwrap();
            let back = z.reversed();
            assert_eq!(back.obstacle, x.obstacle);
            assert_eq!(s2.jump, [-s1.jump[0], -s1.jump[1]]);
            assert!((s1.tau - s2.tau).abs() < 1e-9);
            for k in 0..2 {
                assert!((back.normal[k] - x.normal[k]).abs() < 1e-9);
                assert!((back.velocity[k] - x.velocity[k]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn immediate_return_excursion() {
        let b = quick_billiard();
        let g = CellObservable::cell0();
        let mut rng = stream_rng(3, 0);
        loop {
            let x = b.sample_collision(&mut rng);
            let (_, step) = b.map(&x).unwrap();
            if step.jump == ORIGIN {
                let e = induced_return(&b, &x, &[&g], 100, &mut rng).unwrap();
                assert_eq!(e.length, 1);
                assert_eq!(e.sums, vec![1.0]);
                break;
            }
        }
    }

    #[test]
    fn pushforward_keeps_the_invariant_density() {
        let b = quick_billiard();
        let r = invariance_test(&b, 50_000, 8, 8, 4).unwrap();
        assert!(r.joint.2 > 1e-3 && r.arclength.2 > 1e-3 && r.angle.2 > 1e-3, "{r:?}");
        assert_eq!(r.joint.1, 2 * 64 - 1);
    }

    #[test]
    fn certificate_is_heuristic() {
        let b = quick_billiard();
        let c: &HorizonCertificate = b.certificate();
        assert!(c.heuristic);
        assert!(c.tau_max >= c.tau_min);
    }
}
