//! Simulation and statistical verification toolkit for the Z²-periodic
//! Lorentz gas with finite horizon.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`]: periodic disk tables, exact flights and reflections;
//! * [`dynamics`]: the collision map, its Z²-extension, the suspension flow
//!   and the induced return map to cell 0;
//! * [`observables`]: per-cell observables and flight integrals;
//! * [`estimators`]: diffusion matrix, Green–Kubo and excursion variances;
//! * [`lab`]: ensemble experiments for the exponential and Laplace laws;
//! * [`oracle`]: exactly solvable finite Markov-chain extensions;
//! * [`moments`]: exact moment combinatorics of the limit law.
//!
//! Shared numerical helpers live in [`stats`] and [`rng`].

pub mod dynamics;
pub mod error;
pub mod estimators;
pub mod geometry;
pub mod lab;
pub mod moments;
pub mod observables;
pub mod oracle;
pub mod rng;
pub mod stats;
pub mod system;

pub use dynamics::{Billiard, Collision, ExtendedState, FlowState};
pub use error::{Error, Result};
pub use geometry::{BoundaryCoord, HorizonCertificate, ObstacleDisk, TableConfig};
pub use observables::{BaseProfile, CellObservable, FlowObservable};
pub use oracle::OracleChain;
pub use system::{Cell, Dynamics, Step};

/// Version of this crate, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
