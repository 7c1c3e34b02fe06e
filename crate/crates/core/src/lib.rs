//! Tabular multi-intention inverse reinforcement learning.
//!
//! Demonstrations are explained by `K` reward functions, each driving a
//! Boltzmann-rational policy, and a recurrent gating network that maps the
//! observation history to a per-step distribution over which reward is
//! active. Parameters are fitted by expectation-maximization: the E-step
//! computes per-step responsibilities in `O(nK)`, the M-step trains the gate
//! on the responsibility-weighted likelihood and recovers every reward in
//! closed form with weighted inverse action-value iteration.
//!
//! Module map:
//!
//! * [`mdp`]: tabular MDPs, Bellman-optimal Q, Boltzmann policies, EVD.
//! * [`iavi`]: responsibility-weighted reward recovery.
//! * [`gate`]: the recurrent gating network with hand-written BPTT.
//! * [`em`]: E-step, M-step, the EM driver and exactness verifiers.
//! * [`env`]: the frustration gridworld and the trajectory dataset format.
//! * [`tokenizer`]: k-means tokenization of continuous embeddings.
//! * [`eval`]: run configuration, cross-validation, segmentation, exports.

pub mod em;
pub mod env;
mod error;
pub mod eval;
pub mod gate;
pub mod iavi;
pub mod linalg;
pub mod mdp;
pub mod tokenizer;

pub use em::{EmConfig, EmState, Responsibilities, RewardSet};
pub use env::{FrustrationGridworld, Trajectory, TrajectoryDataset};
pub use error::{Error, Result};
pub use eval::RunConfig;
pub use gate::{Architecture, GatingNetwork, ObservationSequence};
pub use mdp::{PolicyTable, QTable, RewardTable, TabularMdp};
