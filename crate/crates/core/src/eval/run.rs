//! Run directories: config snapshot, per-iteration diagnostics, checkpoint,
//! optional responsibilities dump and a summary.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Checkpoint, RunConfig};
use crate::em::{e_step, run_em_from, EmState};
use crate::env::TrajectoryDataset;
use crate::mdp::TabularMdp;
use crate::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub iterations: usize,
    pub converged: bool,
    pub train_ll: f64,
    pub num_params: usize,
    pub num_trajectories: usize,
    pub total_steps: usize,
}

/// Trains on `dataset` and writes `config.toml`, `diagnostics.jsonl`,
/// `checkpoint.json`, `summary.json` and, when asked, `responsibilities.json`
/// into `out_dir`.
pub fn train_run(
    config: &RunConfig,
    mdp: &TabularMdp,
    dataset: &TrajectoryDataset,
    out_dir: &Path,
    dump_responsibilities: bool,
) -> Result<(EmState, RunSummary)> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), config.to_toml_string()?)?;

    let mut state = EmState::new(mdp, config.em_config())?;
    log::info!(
        "gate has {} parameters ({:?}, d = {}, d' = {}, K = {})",
        state.net.num_params(),
        config.architecture,
        config.embed_dim,
        config.hidden_dim,
        config.num_intentions
    );
    let mut log = BufWriter::new(File::create(out_dir.join("diagnostics.jsonl"))?);
    let mut io_err = None;
    run_em_from(&mut state, mdp, dataset, |d| {
        let res = serde_json::to_writer(&mut log, d)
            .map_err(std::io::Error::from)
            .and_then(|_| log.write_all(b"\n"));
        if let Err(e) = res {
            io_err.get_or_insert(e);
        }
    })?;
    log.flush()?;
    if let Some(e) = io_err {
        return Err(e.into());
    }

    Checkpoint::from_state(&state).save(out_dir.join("checkpoint.json"))?;
    if dump_responsibilities {
        let e = e_step(&state, dataset)?;
        let f = BufWriter::new(File::create(out_dir.join("responsibilities.json"))?);
        serde_json::to_writer(f, &e.responsibilities).map_err(std::io::Error::from)?;
    }
    let summary = RunSummary {
        iterations: state.iteration,
        converged: state.converged,
        train_ll: state.train_ll,
        num_params: state.net.num_params(),
        num_trajectories: dataset.len(),
        total_steps: dataset.total_steps(),
    };
    let f = BufWriter::new(File::create(out_dir.join("summary.json"))?);
    serde_json::to_writer_pretty(f, &summary).map_err(std::io::Error::from)?;
    Ok((state, summary))
}
