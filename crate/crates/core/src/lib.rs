//! Multi-agent quorum-coupled stochastic gradient dynamics: objectives, noise,
//! steppers, theoretical bounds, ensemble analysis and an experiment harness.

pub mod analysis;
pub mod bounds;
pub mod dynamics;
pub mod harness;
pub mod objectives;
pub mod stochastic;
