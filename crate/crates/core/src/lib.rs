//! Stochastic trajectory optimization for the centroidal momentum dynamics of
//! legged robots.
//!
//! The crate plans contact-force and CoM/momentum trajectories for a
//! point-footed quadruped by sequential convex programming (SCP) with an L1
//! trust-region penalty on the angular momentum. Under additive dynamics noise
//! and contact-position uncertainty, the friction-pyramid and reachability
//! constraints are handled as chance constraints: a linearization-based
//! covariance propagation turns each constraint row into a deterministic
//! back-off, so the stochastic plan keeps a margin to the cone that the
//! nominal plan does not. A Monte-Carlo harness replays both plans under the
//! same disturbance draws and reports empirical constraint satisfaction.
//!
//! Module map:
//! - [`model`] — centroidal state/control types, discrete dynamics, Jacobians.
//! - [`gait`] — trot/bound contact plans, references, static-equilibrium warm start.
//! - [`uncertainty`] — risk allocation, quantiles, LQR gains, covariance
//!   propagation, back-offs and their gradients.
//! - [`qp`] — dense convex QP backend (ADMM with equality elimination and polish).
//! - [`scp`] — the convexified QP of each SCP iteration and the outer loop.
//! - [`verify`] — deterministic Monte-Carlo rollouts and paired comparisons.
//! - [`rng`] — counter-based Gaussian substreams used by the rollouts.

pub mod gait;
pub mod model;
pub mod qp;
pub mod rng;
pub mod scp;
pub mod uncertainty;
pub mod verify;
