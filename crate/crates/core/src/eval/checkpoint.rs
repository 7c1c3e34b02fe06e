use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::em::{EmConfig, EmState, RewardSet};
use crate::gate::GatingNetwork;
use crate::mdp::{RewardTable, TabularMdp};
use crate::{Error, Result};

/// Trained model on disk: gate parameters, rewards and the EM config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub config: EmConfig,
    pub net: GatingNetwork,
    pub rewards: Vec<RewardTable>,
    pub iteration: usize,
    pub train_ll: Option<f64>,
}

impl Checkpoint {
    pub fn from_state(state: &EmState) -> Self {
        Self {
            config: state.config.clone(),
            net: state.net.clone(),
            rewards: state.rewards.rewards().to_vec(),
            iteration: state.iteration,
            train_ll: state.train_ll.is_finite().then_some(state.train_ll),
        }
    }

    /// Rebuilds the EM state, recomputing `Q` and policies under `mdp`.
    pub fn to_state(&self, mdp: &TabularMdp) -> Result<EmState> {
        let d = &self.net.dims;
        if d.num_states != mdp.num_states() || d.num_actions != mdp.num_actions() {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint is {}x{}, MDP is {}x{}",
                d.num_states,
                d.num_actions,
                mdp.num_states(),
                mdp.num_actions()
            )));
        }
        if self.rewards.len() != d.num_intentions {
            return Err(Error::DimensionMismatch(format!(
                "checkpoint has {} rewards for {} gate outputs",
                self.rewards.len(),
                d.num_intentions
            )));
        }
        let mut state = EmState::from_parts(
            self.config.clone(),
            self.net.clone(),
            RewardSet::new(mdp, self.rewards.clone())?,
        );
        state.iteration = self.iteration;
        state.train_ll = self.train_ll.unwrap_or(f64::NAN);
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        serde_json::to_writer(&mut w, self).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        serde_json::from_reader(BufReader::new(File::open(path)?)).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })
    }
}
