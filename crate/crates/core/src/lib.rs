//! Chlorine transport in water distribution networks as a sparse
//! linear time-varying system, with log-det observability metrics, greedy
//! sensor placement and Kalman-filter validation.

pub mod bundled;
pub mod dynamics;
pub mod estimation;
pub mod hydraulics;
pub mod network;
pub mod observability;
pub mod par;
pub mod placement;
pub mod sparse;

pub use par::Execution;
