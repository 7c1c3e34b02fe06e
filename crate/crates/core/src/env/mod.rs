//! Synthetic environments and the trajectory dataset format.

mod dataset;
mod gridworld;

pub use dataset::{Trajectory, TrajectoryDataset};
pub use gridworld::{Action, Cell, ExpertIntention, FrustrationGridworld, SlipModel, SwitchLog};
