//! Desk-scale laboratory for KL-anchor-shaped RLVR.
//!
//! Everything here operates on finite token-tree environments that are small
//! enough to enumerate exactly, so every stationary distribution, divergence
//! and gradient has a closed-form oracle next to its stochastic counterpart.
//!
//! Modules:
//!
//! - [`env`] — token-tree environments with binary verifiable rewards
//! - [`policy`] — tabular softmax policies and their exact trajectory distributions
//! - [`schedule`] — cosine schedules with per-period amplitude decay
//! - [`guide`] — guide-function families (constant / random / token / branch)
//! - [`objectives`] — exact divergences, the pseudo-KL, and stationary solutions
//! - [`trainer`] — GRPO-style stochastic trainer with pluggable KL modes
//! - [`theory`] — executable verifiers for the support-expansion results
//! - [`metrics`] — unbiased pass@k and policy evaluation
//! - [`config`] — experiment configuration (fail-closed parsing)
//! - [`runner`] — experiment execution, output files, sweeps

pub mod config;
pub mod env;
pub mod error;
pub mod guide;
pub mod metrics;
pub mod objectives;
pub mod policy;
pub mod runner;
pub mod schedule;
pub mod theory;
pub mod trainer;

pub use env::{RareModeSpec, TokenTreeEnvironment};
pub use error::Error;
pub use policy::{TabularPolicy, TrajectoryDistribution};

/// Splitmix64 step, used to derive independent rng seeds from a master seed
/// and a run index without correlated streams.
pub fn derive_seed(master: u64, index: u64) -> u64 {
    let mut z = master
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
