//! Monte Carlo laboratory for diffusions in random environment.
//!
//! * [`env`]: lazily generated Poisson bump environments.
//! * [`sde`]: Euler–Maruyama paths, exit times and path functionals.
//! * [`regen`]: the Bernoulli coupling and regeneration times.
//! * [`ballistic`]: slab exit estimates, stretched-exponential fits and
//!   velocity / covariance statistics.
//! * [`kalikow`]: occupation-time Green functions, the auxiliary drift and
//!   its exit-law identity.
//! * [`experiment`]: configuration-driven runs with reproducible outputs.

pub mod ballistic;
pub mod config;
pub mod env;
pub mod error;
pub mod experiment;
pub mod kalikow;
pub mod regen;
pub mod rng;
pub mod sde;
pub mod stats;
pub mod vector;

pub use error::{Error, FieldError, Result};
pub use vector::Vector;
