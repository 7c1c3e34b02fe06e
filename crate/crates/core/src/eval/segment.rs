use serde::{Deserialize, Serialize};

use super::permutations;
use crate::em::{e_step, EmState, Responsibilities};
use crate::env::TrajectoryDataset;
use crate::linalg::argmax;
use crate::Result;

/// Per-step posteriors with their argmax labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Segmentation {
    pub posteriors: Responsibilities,
    /// Most probable intention per step; ties go to the lowest index.
    pub labels: Vec<Vec<usize>>,
    pub switches: Vec<usize>,
    /// Best-permutation agreement with ground-truth labels, when present.
    pub accuracy: Option<f64>,
}

pub fn count_switches(labels: &[usize]) -> usize {
    labels.windows(2).filter(|w| w[0] != w[1]).count()
}

pub fn segment(state: &EmState, dataset: &TrajectoryDataset) -> Result<Segmentation> {
    let posteriors = e_step(state, dataset)?.responsibilities;
    let labels: Vec<Vec<usize>> = posteriors
        .iter()
        .map(|w| w.iter_rows().map(argmax).collect())
        .collect();
    let switches = labels.iter().map(|l| count_switches(l)).collect();
    let accuracy = if dataset.has_labels() {
        let truth: Vec<&[usize]> = dataset
            .trajectories
            .iter()
            .map(|t| t.labels.as_deref().unwrap_or(&[]))
            .collect();
        Some(segmentation_accuracy(&labels, &truth, state.num_intentions()))
    } else {
        None
    };
    Ok(Segmentation {
        posteriors,
        labels,
        switches,
        accuracy,
    })
}

/// Fraction of steps whose predicted label, after the best relabeling,
/// equals the true label. Exhaustive over permutations.
pub fn segmentation_accuracy(predicted: &[Vec<usize>], truth: &[&[usize]], k: usize) -> f64 {
    let labels = truth
        .iter()
        .flat_map(|t| t.iter())
        .map(|&l| l + 1)
        .max()
        .unwrap_or(0);
    let n = k.max(labels);
    let mut confusion = vec![vec![0usize; n]; n];
    let mut total = 0usize;
    for (p, t) in predicted.iter().zip(truth) {
        for (&a, &b) in p.iter().zip(t.iter()) {
            confusion[a][b] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return 0.0;
    }
    let best = permutations(n)
        .iter()
        .map(|perm| (0..n).map(|a| confusion[a][perm[a]]).sum::<usize>())
        .max()
        .unwrap_or(0);
    best as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::em::{EmConfig, RewardSet};
    use crate::env::Trajectory;
    use crate::gate::{Architecture, GatingNetwork};
    use crate::mdp::{RewardTable, TabularMdp};

    #[test]
    fn switch_counts() {
        assert_eq!(count_switches(&[]), 0);
        assert_eq!(count_switches(&[1, 1, 1]), 0);
        assert_eq!(count_switches(&[0, 1, 1, 0, 2]), 3);
    }

    #[test]
    fn accuracy_is_permutation_invariant() {
        let pred = vec![vec![1, 1, 0, 0]];
        let truth: Vec<&[usize]> = vec![&[0, 0, 1, 1]];
        assert_eq!(segmentation_accuracy(&pred, &truth, 2), 1.0);
        let truth: Vec<&[usize]> = vec![&[0, 1, 1, 1]];
        assert_eq!(segmentation_accuracy(&pred, &truth, 2), 0.75);
    }

    fn uniform_state(k: usize, mdp: &TabularMdp) -> EmState {
        let cfg = EmConfig {
            num_intentions: k,
            embed_dim: 2,
            hidden_dim: 2,
            ..EmConfig::default()
        };
        let net = GatingNetwork::zeros(Architecture::Rnn, cfg.gate_dims(2, 2));
        let rewards = vec![RewardTable::zeros(2, 2); k];
        EmState::from_parts(cfg, net, RewardSet::new(mdp, rewards).unwrap())
    }

    #[test]
    fn single_intention_never_switches_and_ties_pick_zero() {
        let mdp = TabularMdp::from_dense(2, 2, 0.5, &[0.5; 8]).unwrap();
        let data = TrajectoryDataset::new(
            2,
            2,
            vec![Trajectory::new(vec![0, 1, 0, 1], vec![1, 0, 0, 1])],
        );
        let one = segment(&uniform_state(1, &mdp), &data).unwrap();
        assert_eq!(one.switches, vec![0]);
        let three = segment(&uniform_state(3, &mdp), &data).unwrap();
        assert_eq!(three.labels, vec![vec![0, 0, 0, 0]]);
        assert_eq!(three.accuracy, None);
    }
}
