use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{match_labels, RunConfig};
use crate::em::{e_step, log_likelihood, run_em_from, EmState};
use crate::env::TrajectoryDataset;
use crate::linalg::argmax;
use crate::mdp::{expected_value_difference, Evd, RewardTable, TabularMdp};
use crate::tokenizer::MeanStd;
use crate::{Error, Result};

/// True per-label rewards for EVD scoring.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub rewards: Vec<RewardTable>,
    pub start_state: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub test_indices: Vec<usize>,
    pub train_ll: f64,
    pub test_ll: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Recovered intention matched to each true label.
    pub label_map: Option<Vec<usize>>,
    /// EVD per true label.
    pub evd: Option<Vec<Evd>>,
    /// Argmax intention per step of every test trajectory.
    pub test_labels: Vec<Vec<usize>>,
    /// Greedy action per state under each recovered intention.
    pub greedy_actions: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub folds: Vec<FoldResult>,
    pub train_ll: MeanStd,
    pub test_ll: MeanStd,
}

/// Seeded trajectory-level partition into `folds` test sets.
pub fn fold_assignments(n: usize, folds: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (pos, idx) in order.into_iter().enumerate() {
        out[pos % folds].push(idx);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

fn run_fold(
    mdp: &TabularMdp,
    dataset: &TrajectoryDataset,
    config: &RunConfig,
    truth: Option<&GroundTruth>,
    fold: usize,
    test_idx: &[usize],
) -> Result<FoldResult> {
    let mut in_test = vec![false; dataset.len()];
    test_idx.iter().for_each(|&i| in_test[i] = true);
    let train_idx: Vec<usize> = (0..dataset.len()).filter(|&i| !in_test[i]).collect();
    let train = dataset.subset(&train_idx);
    let test = dataset.subset(test_idx);

    let mut em = config.em_config();
    em.seed = config.seed.wrapping_add(fold as u64);
    let mut state = EmState::new(mdp, em)?;
    run_em_from(&mut state, mdp, &train, |d| {
        log::info!(
            "fold {fold} iteration {} train ll {:.5}",
            d.iteration,
            d.train_ll
        )
    })?;
    let test_e = e_step(&state, &test)?;
    let test_labels = test_e
        .responsibilities
        .iter()
        .map(|w| w.iter_rows().map(argmax).collect())
        .collect();

    let (label_map, evd) = match truth {
        Some(gt) if train.has_labels() => {
            let map = match_intentions(&state, &train, gt.rewards.len())?;
            let evd = gt
                .rewards
                .iter()
                .zip(&map)
                .map(|(r, &k)| {
                    expected_value_difference(mdp, r, state.rewards.reward(k), gt.start_state)
                })
                .collect::<Result<Vec<_>>>()?;
            (Some(map), Some(evd))
        }
        _ => (None, None),
    };
    Ok(FoldResult {
        fold,
        test_indices: test_idx.to_vec(),
        train_ll: state.train_ll,
        test_ll: test_e.log_likelihood,
        iterations: state.iteration,
        converged: state.converged,
        label_map,
        evd,
        test_labels,
        greedy_actions: (0..state.num_intentions())
            .map(|k| state.rewards.q(k).greedy_actions())
            .collect(),
    })
}

/// Matches true labels to recovered intentions by responsibility mass on
/// labeled data.
pub fn match_intentions(
    state: &EmState,
    labeled: &TrajectoryDataset,
    num_labels: usize,
) -> Result<Vec<usize>> {
    let k = state.num_intentions();
    let mut agree = vec![vec![0.0; k]; num_labels];
    let e = e_step(state, labeled)?;
    for (t, w) in labeled.trajectories.iter().zip(e.responsibilities.iter()) {
        let labels = t
            .labels
            .as_ref()
            .ok_or_else(|| Error::DegenerateInput("trajectory without labels".into()))?;
        for (i, &l) in labels.iter().enumerate() {
            if l >= num_labels {
                return Err(Error::Bounds(format!("label {l} >= {num_labels}")));
            }
            for j in 0..k {
                agree[l][j] += w.get(i, j);
            }
        }
    }
    Ok(match_labels(&agree))
}

/// Trajectory-level k-fold cross-validation of the full EM pipeline.
pub fn cross_validate(
    mdp: &TabularMdp,
    dataset: &TrajectoryDataset,
    config: &RunConfig,
    truth: Option<&GroundTruth>,
) -> Result<FoldReport> {
    config.validate()?;
    if dataset.len() < config.folds {
        return Err(Error::InvalidConfig(format!(
            "{} trajectories cannot fill {} folds",
            dataset.len(),
            config.folds
        )));
    }
    let assignments = fold_assignments(dataset.len(), config.folds, config.seed);
    let folds: Vec<FoldResult> = if config.parallel_folds {
        std::thread::scope(|scope| {
            let handles: Vec<_> = assignments
                .iter()
                .enumerate()
                .map(|(f, idx)| scope.spawn(move || run_fold(mdp, dataset, config, truth, f, idx)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("fold thread panicked"))
                .collect::<Result<_>>()
        })?
    } else {
        assignments
            .iter()
            .enumerate()
            .map(|(f, idx)| run_fold(mdp, dataset, config, truth, f, idx))
            .collect::<Result<_>>()?
    };
    Ok(FoldReport {
        train_ll: MeanStd::of(folds.iter().map(|f| f.train_ll)),
        test_ll: MeanStd::of(folds.iter().map(|f| f.test_ll)),
        folds,
    })
}

/// Held-out per-step log-likelihood of `test` under a trained state.
pub fn held_out_ll(state: &EmState, test: &TrajectoryDataset) -> Result<f64> {
    log_likelihood(state, test)
}
