//! Shared fixtures for the criterion benchmarks.

use mirl_core::env::FrustrationGridworld;
use mirl_core::{TabularMdp, TrajectoryDataset};

/// Default gridworld MDP and `n` trajectories of `horizon` steps.
pub fn gridworld_fixture(n: usize, horizon: usize) -> (TabularMdp, TrajectoryDataset) {
    let g = FrustrationGridworld::default();
    let mdp = g.build_mdp().expect("default gridworld is valid");
    let data = g.generate(n, horizon, 7).expect("generation succeeds");
    (mdp, data)
}
