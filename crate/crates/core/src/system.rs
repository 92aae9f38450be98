//! The abstraction shared by the billiard and the finite-chain oracle: a
//! probability-preserving base map carrying a Z²-valued jump, observed
//! through per-cell observables.

use crate::error::Result;
use crate::rng::StreamRng;

/// A Z² cell label.
pub type Cell = [i64; 2];

pub const ORIGIN: Cell = [0, 0];

#[inline]
pub fn cell_add(a: Cell, b: Cell) -> Cell {
    [a[0] + b[0], a[1] + b[1]]
}

#[inline]
pub fn cell_sub(a: Cell, b: Cell) -> Cell {
    [a[0] - b[0], a[1] - b[1]]
}

/// Outcome of one application of the base map: the cell jump `F(x)` and
/// the return time `τ(x)` of the suspension (1 for discrete chains).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Step {
    pub jump: Cell,
    pub tau: f64,
}

/// A Z²-extension T̃(x, a) = (T x, a + F(x)) over an invariant probability
/// space, together with the observables it knows how to evaluate.
pub trait Dynamics: Sync {
    /// Point of the base space.
    type Base: Clone + Send + Sync + std::fmt::Debug;
    /// Map observable f(x, a).
    type Observable: Sync;
    /// Observable of the suspension flow.
    type FlowObservable: Sync;

    /// Draw x from the invariant probability measure.
    fn sample_base(&self, rng: &mut StreamRng) -> Self::Base;

    /// Replace `base` by its image and return the jump and roof value.
    /// Random dynamics (Markov chains) draw from `rng`; deterministic maps
    /// ignore it.
    fn advance(&self, base: &mut Self::Base, rng: &mut StreamRng) -> Result<Step>;

    fn observe(&self, obs: &Self::Observable, base: &Self::Base, cell: Cell) -> Result<f64>;

    /// Evaluate at several cells of the same base point.
    fn observe_many(
        &self,
        obs: &Self::Observable,
        base: &Self::Base,
        cells: &[Cell],
        out: &mut [f64],
    ) -> Result<()> {
        for (o, &a) in out.iter_mut().zip(cells) {
            *o = self.observe(obs, base, a)?;
        }
        Ok(())
    }

    /// Cells outside which the observable vanishes.
    fn support(&self, obs: &Self::Observable) -> Vec<Cell>;

    /// Integral of a flow observable along the first `upto` time units of
    /// the free flight leaving `(base, cell)`, whose length `tau` the
    /// caller already knows from [`Dynamics::advance`].
    fn flow_segment(
        &self,
        obs: &Self::FlowObservable,
        base: &Self::Base,
        cell: Cell,
        tau: f64,
        upto: f64,
    ) -> Result<f64>;

    /// Cells outside which the observable's flight integral vanishes.
    fn flow_support(&self, obs: &Self::FlowObservable) -> Vec<Cell>;

    /// Mean roof value E_μ[τ].
    fn mean_roof(&self) -> f64;
}

/// Stream index used for retry `attempt` of trajectory `index`.
#[inline]
pub fn retry_index(index: u64, attempt: u32) -> u64 {
    index + ((attempt as u64) << 40)
}

/// Run `f` on stream indices for `index`, retrying numerical failures of
/// the dynamics (tangencies, flight caps) up to `budget` times. Returns the
/// value and the number of retries used.
pub fn with_retries<T, F>(index: u64, budget: u32, mut f: F) -> Result<(T, u32)>
where
    F: FnMut(u64) -> Result<T>,
{
    let mut attempt = 0;
    loop {
        match f(retry_index(index, attempt)) {
            Ok(v) => return Ok((v, attempt)),
            Err(e) if attempt < budget && e.is_numerical() => attempt += 1,
            Err(e) => return Err(e),
        }
    }
}
