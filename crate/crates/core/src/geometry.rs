//! Geometry of the Z²-periodic disk table: layout validation, exact
//! ray–disk flights across periodic copies, elastic reflection and the
//! boundary chart (obstacle, arclength, angle).
//!
//! Positions are always expressed in the frame of a reference cell: the
//! obstacle `i` of cell `m` has center `centers[i] + m`. Cell labels are
//! integers, so long trajectories never accumulate drift in the absolute
//! position.

use crate::error::{Error, Result};
use crate::system::Cell;
use serde::{Deserialize, Serialize};
use std::f64::consts::{FRAC_PI_2, PI, TAU};

pub type Vec2 = [f64; 2];

/// Discriminants inside (-ε², ε²) are treated as tangential misses.
pub const TANGENCY_EPS: f64 = 1e-12;

/// Tolerance for deciding that a point lies on an obstacle boundary.
pub const BOUNDARY_TOL: f64 = 1e-9;

#[inline]
pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

#[inline]
pub fn cross(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[1] - a[1] * b[0]
}

#[inline]
pub fn norm(a: Vec2) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

#[inline]
fn axpy(a: Vec2, s: f64, v: Vec2) -> Vec2 {
    [a[0] + s * v[0], a[1] + s * v[1]]
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObstacleDisk {
    /// Center in unit-cell coordinates, in [0,1)².
    pub center: Vec2,
    pub radius: f64,
}

impl ObstacleDisk {
    pub fn new(center: Vec2, radius: f64) -> Self {
        Self { center, radius }
    }

    pub fn perimeter(&self) -> f64 {
        TAU * self.radius
    }
}

/// A validated periodic table: at least two disjoint disks per unit cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableConfig {
    obstacles: Vec<ObstacleDisk>,
    horizon_bound: Option<f64>,
}

impl TableConfig {
    /// Validate the layout: `I ≥ 2`, positive radii, centers in the unit
    /// cell and pairwise disjoint closures over all translates.
    pub fn new(obstacles: Vec<ObstacleDisk>, horizon_bound: Option<f64>) -> Result<Self> {
        if obstacles.len() < 2 {
            return Err(Error::TooFewObstacles(obstacles.len()));
        }
        for (index, o) in obstacles.iter().enumerate() {
            if !(o.radius > 0.0) || !o.radius.is_finite() {
                return Err(Error::InvalidObstacle {
                    index,
                    reason: format!("radius must be positive, got {}", o.radius),
                });
            }
            if !o.center.iter().all(|c| (0.0..1.0).contains(c)) {
                return Err(Error::InvalidObstacle {
                    index,
                    reason: format!("center {:?} outside [0,1)^2", o.center),
                });
            }
        }
        if let Some(t) = horizon_bound {
            if !(t > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "declared horizon bound must be positive, got {t}"
                )));
            }
        }
        let cfg = Self {
            obstacles,
            horizon_bound,
        };
        cfg.check_disjoint()?;
        Ok(cfg)
    }

    /// Big disk of radius 0.4 at the cell corner and a small disk of radius
    /// 0.2 at the cell center. Has finite horizon.
    pub fn default_two_disk() -> Self {
        Self::new(
            vec![
                ObstacleDisk::new([0.0, 0.0], 0.4),
                ObstacleDisk::new([0.5, 0.5], 0.2),
            ],
            None,
        )
        .expect("default table is valid")
    }

    pub fn obstacles(&self) -> &[ObstacleDisk] {
        &self.obstacles
    }

    pub fn len(&self) -> usize {
        self.obstacles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obstacles.is_empty()
    }

    pub fn horizon_bound(&self) -> Option<f64> {
        self.horizon_bound
    }

    pub fn with_horizon_bound(mut self, bound: f64) -> Self {
        self.horizon_bound = Some(bound);
        self
    }

    /// Σᵢ |∂Oᵢ|.
    pub fn boundary_total(&self) -> f64 {
        self.obstacles.iter().map(|o| TAU * o.radius).sum()
    }

    /// Area of the billiard domain inside one unit cell.
    pub fn free_area(&self) -> f64 {
        1.0 - self.obstacles.iter().map(|o| PI * o.radius * o.radius).sum::<f64>()
    }

    /// Mean free path E_μ[τ] = π·Area(Q)/|∂Q| (Santaló's formula).
    pub fn mean_free_path(&self) -> f64 {
        PI * self.free_area() / self.boundary_total()
    }

    /// Flow-measure volume of one cell of the phase space with the
    /// normalization Leb([0,1)²×S¹) = π/Σ|∂Oᵢ|, restricted to the domain.
    pub fn flow_cell_volume(&self) -> f64 {
        PI * self.free_area() / self.boundary_total()
    }

    pub fn max_radius(&self) -> f64 {
        self.obstacles.iter().map(|o| o.radius).fold(0.0, f64::max)
    }

    /// Center of obstacle `i` of cell `m`.
    #[inline]
    pub fn center(&self, i: usize, m: Cell) -> Vec2 {
        let c = self.obstacles[i].center;
        [c[0] + m[0] as f64, c[1] + m[1] as f64]
    }

    /// Smallest gap between the closures of any two obstacle translates,
    /// a lower bound on every free flight.
    pub fn min_gap(&self) -> f64 {
        let mut best = f64::INFINITY;
        self.for_each_pair(|_, _, _, gap| best = best.min(gap));
        best
    }

    fn for_each_pair<F: FnMut(usize, usize, Cell, f64)>(&self, mut f: F) {
        for i in 0..self.len() {
            for j in i..self.len() {
                for mx in -2..=2i64 {
                    for my in -2..=2i64 {
                        if i == j && mx == 0 && my == 0 {
                            continue;
                        }
                        let d = norm(sub(self.center(j, [mx, my]), self.center(i, [0, 0])));
                        let gap = d - self.obstacles[i].radius - self.obstacles[j].radius;
                        f(i, j, [mx, my], gap);
                    }
                }
            }
        }
    }

    fn check_disjoint(&self) -> Result<()> {
        let mut err = None;
        self.for_each_pair(|i, j, shift, gap| {
            if gap <= 0.0 && err.is_none() {
                err = Some(Error::Overlap {
                    first: i,
                    second: j,
                    shift,
                    gap,
                });
            }
        });
        match err {
            Some(e) => Err(e),
            None => Ok(()),
        }
    }
}

/// Collision coordinate: obstacle, counterclockwise arclength from
/// `center + (radius, 0)`, and the signed angle φ ∈ [-π/2, π/2] of the
/// outgoing velocity measured from the normal pointing into the domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundaryCoord {
    pub obstacle: usize,
    pub r: f64,
    pub phi: f64,
}

/// Elastic reflection of `v` off a wall with unit normal `n` pointing into
/// the domain.
pub fn reflect(v: Vec2, n: Vec2) -> Result<Vec2> {
    let vn = dot(v, n);
    if vn > 1e-15 {
        return Err(Error::NotIncoming(vn));
    }
    Ok(reflect_unchecked(v, n))
}

#[inline]
pub(crate) fn reflect_unchecked(v: Vec2, n: Vec2) -> Vec2 {
    let vn = dot(v, n);
    [v[0] - 2.0 * vn * n[0], v[1] - 2.0 * vn * n[1]]
}

/// First intersection of a ray with one disk.
#[inline]
fn ray_disk(q: Vec2, v: Vec2, center: Vec2, radius: f64) -> RayDisk {
    let w = sub(center, q);
    let b = dot(w, v);
    if b <= 0.0 {
        return RayDisk::Miss;
    }
    let c = dot(w, w) - radius * radius;
    let disc = b * b - c;
    if disc <= -TANGENCY_EPS * TANGENCY_EPS {
        RayDisk::Miss
    } else if disc < TANGENCY_EPS * TANGENCY_EPS {
        RayDisk::Tangent(b, disc)
    } else {
        let s = c / (b + disc.sqrt());
        if s > 0.0 {
            RayDisk::Hit(s)
        } else {
            RayDisk::Miss
        }
    }
}

enum RayDisk {
    Miss,
    Tangent(f64, f64),
    Hit(f64),
}

/// Result of one free flight, expressed in the frame of the start.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub obstacle: usize,
    /// Cell of the hit obstacle relative to the reference cell of the start.
    pub cell_jump: Cell,
    pub tau: f64,
    pub point: Vec2,
}

impl Hit {
    /// Unit normal (into the domain) at the hit point.
    pub fn normal(&self, cfg: &TableConfig) -> Vec2 {
        let c = cfg.center(self.obstacle, self.cell_jump);
        let d = sub(self.point, c);
        let l = norm(d);
        [d[0] / l, d[1] / l]
    }

    /// Boundary coordinate of the post-collision state.
    pub fn coord(&self, cfg: &TableConfig, v_in: Vec2) -> BoundaryCoord {
        let n = self.normal(cfg);
        let v_out = reflect_unchecked(v_in, n);
        coord_from(cfg, self.obstacle, n, v_out)
    }
}

struct Nearest {
    best: Option<Hit>,
    tangent: Option<(f64, f64)>,
}

impl Nearest {
    fn new() -> Self {
        Self {
            best: None,
            tangent: None,
        }
    }

    fn best_tau(&self) -> f64 {
        self.best.map_or(f64::INFINITY, |h| h.tau)
    }

    #[inline]
    fn test(&mut self, cfg: &TableConfig, q: Vec2, v: Vec2, j: usize, m: Cell) {
        match ray_disk(q, v, cfg.center(j, m), cfg.obstacles[j].radius) {
            RayDisk::Hit(s) if s < self.best_tau() => {
                self.best = Some(Hit {
                    obstacle: j,
                    cell_jump: m,
                    tau: s,
                    point: axpy(q, s, v),
                })
            }
            RayDisk::Tangent(b, disc) => {
                if self.tangent.is_none_or(|(tb, _)| b < tb) {
                    self.tangent = Some((b, disc));
                }
            }
            _ => {}
        }
    }

    fn finish(self) -> Result<Option<Hit>> {
        if let Some((b, disc)) = self.tangent {
            if b < self.best_tau() {
                return Err(Error::NumericalTangency(disc));
            }
        }
        Ok(self.best)
    }
}

/// Exact free flight from `q` (on ∂Q or in its interior, reference-cell
/// frame) in direction `v`, found by scanning obstacle translates in
/// expanding square shells around the start cell. `exclude` removes the
/// start obstacle itself.
pub fn free_flight(
    cfg: &TableConfig,
    q: Vec2,
    v: Vec2,
    exclude: Option<(usize, Cell)>,
    cap: f64,
) -> Result<Hit> {
    let base = [q[0].floor() as i64, q[1].floor() as i64];
    let rmax = cfg.max_radius();
    let mut nearest = Nearest::new();
    let mut shell: i64 = 0;
    loop {
        // Obstacles in cells at Chebyshev distance ≥ shell from the start
        // cell are at least (shell - 1) - rmax away from q.
        let reach = (shell - 1) as f64 - rmax;
        if reach >= nearest.best_tau() || reach > cap {
            break;
        }
        for_shell_cells(shell, |d| {
            let m = [base[0] + d[0], base[1] + d[1]];
            for j in 0..cfg.len() {
                if exclude == Some((j, m)) {
                    continue;
                }
                nearest.test(cfg, q, v, j, m);
            }
        });
        shell += 1;
    }
    match nearest.finish()? {
        Some(h) if h.tau <= cap => Ok(h),
        _ => Err(Error::FlightCapExceeded(cap)),
    }
}

fn for_shell_cells<F: FnMut(Cell)>(r: i64, mut f: F) {
    if r == 0 {
        f([0, 0]);
        return;
    }
    for x in -r..=r {
        f([x, -r]);
        f([x, r]);
    }
    for y in (-r + 1)..r {
        f([-r, y]);
        f([r, y]);
    }
}

/// Precomputed candidate translates for fast flights on a table whose
/// flights are bounded by `tau_bound`. Candidates are bucketed by start
/// obstacle and direction sector. Flights that find nothing within the
/// bound fall back to the shell scan, so the result never depends on the
/// bound being correct.
#[derive(Debug, Clone)]
pub struct FlightTable {
    cfg: TableConfig,
    tau_bound: f64,
    /// Bucket `i * SECTORS + k` spans `offsets[b]..offsets[b + 1]`.
    offsets: Vec<usize>,
    candidates: Vec<Candidate>,
    fallback_cap: f64,
}

const SECTORS: usize = 256;

#[derive(Debug, Clone, Copy)]
struct Candidate {
    obstacle: usize,
    cell: Cell,
    center: Vec2,
    radius: f64,
    /// |c_j - c_i| - r_j - r_i: the ray cannot reach this disk sooner.
    key: f64,
}

/// Pseudo-angle in [0, 4), monotone in the polar angle of `v`.
#[inline]
fn diamond_angle(v: Vec2) -> f64 {
    let (x, y) = (v[0], v[1]);
    if y >= 0.0 {
        if x >= 0.0 {
            y / (x + y)
        } else {
            1.0 - x / (y - x)
        }
    } else if x < 0.0 {
        2.0 - y / (-x - y)
    } else {
        3.0 + x / (x - y)
    }
}

#[inline]
fn sector(v: Vec2) -> usize {
    ((diamond_angle(v) * (SECTORS as f64 / 4.0)) as usize).min(SECTORS - 1)
}

/// Polar angle of the direction with pseudo-angle `p`.
fn diamond_to_angle(p: f64) -> f64 {
    let q = p.floor().min(3.0);
    let f = p - q;
    q * FRAC_PI_2 + f.atan2(1.0 - f)
}

/// Whether the angular intervals [a0, a1] and [c - h, c + h] meet mod 2π.
fn arcs_meet(a0: f64, a1: f64, c: f64, h: f64) -> bool {
    (-1..=1).any(|k| {
        let cc = c + k as f64 * TAU;
        cc + h >= a0 && cc - h <= a1
    })
}

impl FlightTable {
    pub fn new(cfg: &TableConfig, tau_bound: f64, fallback_cap: f64) -> Self {
        let reach = tau_bound.ceil() as i64 + 2;
        let mut offsets = vec![0];
        let mut candidates = Vec::new();
        let pad = 1e-9;
        for i in 0..cfg.len() {
            let ci = cfg.center(i, [0, 0]);
            let ri = cfg.obstacles[i].radius;
            let mut list = Vec::new();
            for j in 0..cfg.len() {
                let rj = cfg.obstacles[j].radius;
                for mx in -reach..=reach {
                    for my in -reach..=reach {
                        if i == j && mx == 0 && my == 0 {
                            continue;
                        }
                        let cj = cfg.center(j, [mx, my]);
                        let dist = norm(sub(cj, ci));
                        let key = dist - ri - rj;
                        if key <= tau_bound {
                            list.push((
                                Candidate {
                                    obstacle: j,
                                    cell: [mx, my],
                                    center: cj,
                                    radius: rj,
                                    key,
                                },
                                dist,
                            ));
                        }
                    }
                }
            }
            list.sort_by(|a, b| a.0.key.total_cmp(&b.0.key));
            for k in 0..SECTORS {
                let a0 = diamond_to_angle(4.0 * k as f64 / SECTORS as f64) - pad;
                let a1 = diamond_to_angle(4.0 * (k + 1) as f64 / SECTORS as f64) + pad;
                for (cand, dist) in &list {
                    // A ray from a point of disk i meeting disk j has its
                    // direction within asin((ri + rj)/D) of the center line,
                    // or of its reverse when the disks are close.
                    let w = sub(cand.center, ci);
                    let c = w[1].atan2(w[0]);
                    let s = ((ri + cand.radius) / dist).min(1.0);
                    let h = s.asin() + pad;
                    let back = dist * dist * (1.0 - s * s) < ri * ri;
                    if arcs_meet(a0, a1, c, h) || (back && arcs_meet(a0, a1, c + PI, h)) {
                        candidates.push(*cand);
                    }
                }
                offsets.push(candidates.len());
            }
        }
        Self {
            cfg: cfg.clone(),
            tau_bound,
            offsets,
            candidates,
            fallback_cap,
        }
    }

    pub fn table(&self) -> &TableConfig {
        &self.cfg
    }

    pub fn tau_bound(&self) -> f64 {
        self.tau_bound
    }

    /// Largest candidate bucket of an obstacle.
    pub fn candidate_count(&self, obstacle: usize) -> usize {
        (0..SECTORS)
            .map(|k| {
                let b = obstacle * SECTORS + k;
                self.offsets[b + 1] - self.offsets[b]
            })
            .max()
            .unwrap_or(0)
    }

    /// Flight leaving obstacle `i` of the reference cell from boundary
    /// point `q` with velocity `v`.
    #[inline]
    pub fn flight_from(&self, i: usize, q: Vec2, v: Vec2) -> Result<Hit> {
        let mut best_s = f64::INFINITY;
        let mut best: Option<&Candidate> = None;
        let mut tangent: Option<(f64, f64)> = None;
        let tt = TANGENCY_EPS * TANGENCY_EPS;
        let bucket = i * SECTORS + sector(v);
        for cand in &self.candidates[self.offsets[bucket]..self.offsets[bucket + 1]] {
            if cand.key >= best_s {
                break;
            }
            let w = [cand.center[0] - q[0], cand.center[1] - q[1]];
            let b = w[0] * v[0] + w[1] * v[1];
            if b <= 0.0 || b - cand.radius >= best_s {
                continue;
            }
            let cc = w[0] * w[0] + w[1] * w[1] - cand.radius * cand.radius;
            let disc = b * b - cc;
            if disc <= -tt {
                continue;
            }
            if disc < tt {
                if tangent.is_none_or(|(tb, _)| b < tb) {
                    tangent = Some((b, disc));
                }
                continue;
            }
            // The entry root b - √disc beats best_s iff b - best_s < √disc.
            let lead = b - best_s;
            if lead >= 0.0 && lead * lead >= disc {
                continue;
            }
            let s = cc / (b + disc.sqrt());
            if s > 0.0 && s < best_s {
                best_s = s;
                best = Some(cand);
            }
        }
        if let Some((b, disc)) = tangent {
            if b < best_s {
                return Err(Error::NumericalTangency(disc));
            }
        }
        match best {
            Some(c) if best_s <= self.tau_bound => Ok(Hit {
                obstacle: c.obstacle,
                cell_jump: c.cell,
                tau: best_s,
                point: axpy(q, best_s, v),
            }),
            _ => free_flight(&self.cfg, q, v, Some((i, [0, 0])), self.fallback_cap),
        }
    }
}

/// Position and outgoing velocity of a boundary coordinate, with the
/// obstacle taken in the reference cell.
pub fn chart(cfg: &TableConfig, b: &BoundaryCoord) -> (Vec2, Vec2) {
    let o = cfg.obstacles[b.obstacle];
    let theta = b.r / o.radius;
    let n = [theta.cos(), theta.sin()];
    let q = [o.center[0] + o.radius * n[0], o.center[1] + o.radius * n[1]];
    (q, rotate(n, b.phi))
}

#[inline]
pub fn rotate(n: Vec2, phi: f64) -> Vec2 {
    let (s, c) = phi.sin_cos();
    [c * n[0] - s * n[1], s * n[0] + c * n[1]]
}

/// Inverse of [`chart`]: also returns the cell of the obstacle translate
/// carrying `q`.
pub fn unchart(cfg: &TableConfig, q: Vec2, v: Vec2) -> Result<(BoundaryCoord, Cell)> {
    let base = [q[0].floor() as i64, q[1].floor() as i64];
    let mut best: Option<(f64, usize, Cell)> = None;
    for dx in -1..=1 {
        for dy in -1..=1 {
            let m = [base[0] + dx, base[1] + dy];
            for j in 0..cfg.len() {
                let off = (norm(sub(q, cfg.center(j, m))) - cfg.obstacles[j].radius).abs();
                if best.is_none_or(|(b, _, _)| off < b) {
                    best = Some((off, j, m));
                }
            }
        }
    }
    let (off, j, m) = best.expect("table has obstacles");
    if off > BOUNDARY_TOL {
        return Err(Error::OffBoundary(off));
    }
    let d = sub(q, cfg.center(j, m));
    let l = norm(d);
    let n = [d[0] / l, d[1] / l];
    Ok((coord_from(cfg, j, n, v), m))
}

/// Boundary coordinate from obstacle index, unit normal and velocity.
pub fn coord_from(cfg: &TableConfig, obstacle: usize, n: Vec2, v: Vec2) -> BoundaryCoord {
    let radius = cfg.obstacles[obstacle].radius;
    let mut theta = n[1].atan2(n[0]);
    if theta < 0.0 {
        theta += TAU;
    }
    let mut r = radius * theta;
    let per = TAU * radius;
    if r >= per {
        r -= per;
    }
    let phi = cross(n, v).atan2(dot(n, v)).clamp(-FRAC_PI_2, FRAC_PI_2);
    BoundaryCoord { obstacle, r, phi }
}

/// Audit record of the finite-horizon probe. The probe is a heuristic over
/// a finite grid, not a proof.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonCertificate {
    pub tau_max: f64,
    pub tau_min: f64,
    pub boundary_points: usize,
    pub directions: usize,
    pub flights_probed: u64,
    pub flight_cap: f64,
    pub heuristic: bool,
}

impl HorizonCertificate {
    /// Bound used for candidate pruning; the grid estimate is inflated to
    /// cover flights between grid nodes.
    pub fn working_bound(&self) -> f64 {
        self.tau_max * 1.1 + 0.05
    }
}

/// Probe the table on `boundary_points` points (distributed over obstacles
/// in proportion to their perimeter) times `directions` outgoing angles.
pub fn validate_table(
    cfg: &TableConfig,
    boundary_points: usize,
    directions: usize,
    flight_cap: f64,
) -> Result<HorizonCertificate> {
    let total = cfg.boundary_total();
    let table = FlightTable::new(cfg, flight_cap.min(4.0), flight_cap);
    let mut tau_max: f64 = 0.0;
    let mut flights = 0u64;
    for (i, o) in cfg.obstacles.iter().enumerate() {
        let pts = ((boundary_points as f64) * o.perimeter() / total).ceil().max(1.0) as usize;
        for p in 0..pts {
            let theta = TAU * (p as f64 + 0.5) / pts as f64;
            let n = [theta.cos(), theta.sin()];
            let q = [o.center[0] + o.radius * n[0], o.center[1] + o.radius * n[1]];
            for k in 0..directions {
                let phi = -FRAC_PI_2 + PI * (k as f64 + 0.5) / directions as f64;
                let v = rotate(n, phi);
                let hit = match table.flight_from(i, q, v) {
                    Ok(h) => h,
                    Err(Error::FlightCapExceeded(_)) => {
                        return Err(Error::HorizonSuspect {
                            obstacle: i,
                            cap: flight_cap,
                        })
                    }
                    Err(Error::NumericalTangency(_)) => continue,
                    Err(e) => return Err(e),
                };
                flights += 1;
                tau_max = tau_max.max(hit.tau);
            }
        }
    }
    Ok(HorizonCertificate {
        tau_max,
        tau_min: cfg.min_gap(),
        boundary_points,
        directions,
        flights_probed: flights,
        flight_cap,
        heuristic: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn single_disk_rejected() {
        let err = TableConfig::new(vec![ObstacleDisk::new([0.0, 0.0], 0.4)], None).unwrap_err();
        assert_eq!(err, Error::TooFewObstacles(1));
    }

    #[test]
    fn overlapping_translates_rejected() {
        let err = TableConfig::new(
            vec![
                ObstacleDisk::new([0.0, 0.0], 0.45),
                ObstacleDisk::new([0.5, 0.5], 0.3),
            ],
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Overlap { .. }));
    }

    #[test]
    fn boundary_total_is_sum_of_perimeters() {
        let cfg = TableConfig::default_two_disk();
        assert_eq!(cfg.boundary_total(), TAU * 0.4 + TAU * 0.2);
        assert!(close(cfg.min_gap(), 0.5f64.sqrt() - 0.6, 1e-15));
    }

    #[test]
    fn reflect_examples() {
        assert_eq!(reflect([1.0, 0.0], [-1.0, 0.0]).unwrap(), [-1.0, 0.0]);
        let h = 0.5f64.sqrt();
        let r = reflect([1.0, 0.0], [-h, h]).unwrap();
        assert!(close(r[0], 0.0, 1e-15) && close(r[1], 1.0, 1e-15));
        assert_eq!(reflect([0.0, 1.0], [1.0, 0.0]).unwrap(), [0.0, 1.0]);
        assert!(matches!(
            reflect([1.0, 0.0], [1.0, 0.0]),
            Err(Error::NotIncoming(_))
        ));
    }

    #[test]
    fn chart_origin_examples() {
        let cfg = TableConfig::default_two_disk();
        let (q, v) = chart(&cfg, &BoundaryCoord { obstacle: 0, r: 0.0, phi: 0.0 });
        assert_eq!(q, [0.4, 0.0]);
        assert_eq!(v, [1.0, 0.0]);
        let (_, v) = chart(&cfg, &BoundaryCoord { obstacle: 0, r: 0.0, phi: FRAC_PI_2 });
        assert!(close(v[0], 0.0, 1e-15) && close(v[1], 1.0, 1e-15));
    }

    #[test]
    fn head_on_flight_to_disk() {
        // Start at (0.5, 0) heading left: hits the big disk at (0.4, 0).
        let cfg = TableConfig::default_two_disk();
        let hit = free_flight(&cfg, [0.5, 0.0], [-1.0, 0.0], None, 50.0).unwrap();
        assert_eq!(hit.obstacle, 0);
        assert_eq!(hit.cell_jump, [0, 0]);
        assert!(close(hit.tau, 0.1, 1e-15));
        assert!(close(hit.point[0], 0.4, 1e-15) && close(hit.point[1], 0.0, 1e-15));
    }

    #[test]
    fn tangent_departure_lands_in_neighbouring_cell() {
        // Leave the bottom of the small disk tangentially to the right; the
        // line y = 0.3 misses everything in the cell and meets the big disk
        // of cell (1, 0) at x = 1 - sqrt(0.07).
        let cfg = TableConfig::default_two_disk();
        let q = [0.5, 0.3];
        let hit = free_flight(&cfg, q, [1.0, 0.0], Some((1, [0, 0])), 50.0).unwrap();
        assert_eq!(hit.obstacle, 0);
        assert_eq!(hit.cell_jump, [1, 0]);
        assert!(close(hit.tau, 0.5 - 0.07f64.sqrt(), 1e-14));
    }

    #[test]
    fn corridor_table_is_suspect() {
        let cfg = TableConfig::new(
            vec![
                ObstacleDisk::new([0.0, 0.0], 0.1),
                ObstacleDisk::new([0.5, 0.5], 0.1),
            ],
            None,
        )
        .unwrap();
        let err = validate_table(&cfg, 400, 400, 50.0).unwrap_err();
        assert!(matches!(err, Error::HorizonSuspect { .. }));
    }

    #[test]
    fn default_table_has_finite_horizon() {
        let cfg = TableConfig::default_two_disk();
        let cert = validate_table(&cfg, 300, 300, 50.0).unwrap();
        assert!(cert.tau_max > cert.tau_min);
        assert!(cert.tau_max < 2.0, "tau_max = {}", cert.tau_max);
    }

    #[test]
    fn flight_table_agrees_with_shell_scan() {
        let cfg = TableConfig::default_two_disk();
        let ft = FlightTable::new(&cfg, 1.5, 50.0);
        for k in 0..200_000 {
            let i = k % 2;
            let theta = 0.37 * k as f64;
            let phi = -1.5 + 3.0 * ((k as f64 * 0.618) % 1.0);
            let o = cfg.obstacles()[i];
            let n = [theta.cos(), theta.sin()];
            let q = [o.center[0] + o.radius * n[0], o.center[1] + o.radius * n[1]];
            let v = rotate(n, phi);
            let a = ft.flight_from(i, q, v).unwrap();
            let b = free_flight(&cfg, q, v, Some((i, [0, 0])), 50.0).unwrap();
            assert_eq!((a.obstacle, a.cell_jump), (b.obstacle, b.cell_jump));
            assert!(close(a.tau, b.tau, 1e-14));
        }
    }

    #[test]
    fn diamond_angle_is_monotone() {
        let mut last = -1.0;
        for k in 0..10_000 {
            let t = TAU * k as f64 / 10_000.0;
            let p = diamond_angle([t.cos(), t.sin()]);
            assert!(p >= last && (0.0..4.0).contains(&p));
            assert!((diamond_to_angle(p) - t).abs() < 1e-9);
            last = p;
        }
    }

    #[test]
    fn unchart_rejects_interior_points() {
        let cfg = TableConfig::default_two_disk();
        assert!(matches!(
            unchart(&cfg, [0.7, 0.2], [1.0, 0.0]),
            Err(Error::OffBoundary(_))
        ));
    }
}
