//! Over-the-air federated edge learning with energy-aware device scheduling.

pub mod analysis;
pub mod channel;
pub mod config;
pub mod learner;
pub mod otaa;
pub mod rng;
pub mod scheduler;
pub mod vector;
