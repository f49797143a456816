//! Robust adaptive model predictive control for partially known linear systems.
//!
//! The crate is organised as a pipeline:
//!
//! * [`estimation`] — online regularised least squares over a structured
//!   parametrisation `A(theta) = A + sum_i theta_i phi_i`, with a
//!   high-confidence ellipsoid for `theta` and polytopic conversions.
//! * [`prediction`] — interval predictors that enclose every trajectory of
//!   the uncertain system given the confidence polytope.
//! * [`planning`] — optimistic tree search over a pessimistic surrogate
//!   return, with a robust multi-model variant.
//! * [`env`] — reference environments (scalar decay, obstacle avoidance,
//!   a two-candidate model-selection setup).
//! * [`harness`] — the estimate/predict/plan/act loop, batch runners and
//!   CSV/JSON export.

pub mod env;
pub mod error;
pub mod estimation;
pub mod harness;
pub mod lp;
pub mod planning;
pub mod prediction;

pub use error::Error;

pub type Result<T> = std::result::Result<T, Error>;
