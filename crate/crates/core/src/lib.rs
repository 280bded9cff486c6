//! Deterministic, seedable grid-world simulator and decentralized-coordination
//! library for multi-robot dynamic coalition formation.
//!
//! Robots move on a walled `W x W` grid and must form coalitions to complete
//! leveled tasks: a level-`l` task completes only when at least `l` robots
//! stand adjacent to it while assigned to it, paying a reward of `l^2`.
//! The crate provides:
//!
//! - [`world`]: the synchronous environment (movement, task completion,
//!   task spawning, reward accounting),
//! - [`observe`]: per-robot partial observations, intention maps, and
//!   legal-action masks,
//! - [`plan`]: 8-connected A* path planning and the per-step motion-control
//!   procedure with cached-path reuse,
//! - [`pcfa`]: a market-based coalition-formation baseline (per-step utility
//!   bidding, neighbor-restricted consensus, coalition commitment),
//! - [`policies`]: non-learned per-robot baselines (random, greedy,
//!   first-legal),
//! - [`bridge`]: a newline-delimited wire protocol that lets an external
//!   process act as the per-robot policy,
//! - [`harness`]: batch experiment execution, metrics, scalability sweeps,
//!   and result export.
//!
//! Everything is deterministic given a seed: identical `(config, seed)`
//! pairs produce bit-identical episodes regardless of worker count.

pub mod bridge;
pub mod config;
pub mod grid;
pub mod harness;
pub mod observe;
pub mod pcfa;
pub mod plan;
pub mod policies;
pub mod runner;
pub mod world;

pub use config::EnvConfig;
pub use grid::Position;
pub use world::WorldState;
