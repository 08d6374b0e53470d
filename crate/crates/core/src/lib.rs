//! Simulator of a stacked-intelligent-metasurface (SIM) aided cell-free
//! massive MIMO downlink, with an NVR-MAPPO trainer for joint AP power
//! allocation and SIM phase-shift design, and a random-codebook plus
//! water-filling baseline.

pub mod baselines;
pub mod channel;
pub mod emwave;
pub mod env;
pub mod error;
pub mod harness;
pub mod marl;
pub mod neural;
pub mod seed;
pub mod sysmodel;

pub use error::{Result, SimError};
