use crate::env::TrajectoryDataset;
use crate::mdp::TabularMdp;
use crate::{Error, Result};

/// Dirichlet-smoothed empirical transitions
/// `P(s'|s,a) = (n(s,a,s') + α) / (n(s,a) + α|S|)`; pairs never observed
/// are uniform.
///
/// The `α / (n(s,a) + α|S|)` floor is stored as per-row uniform mass, so the
/// result stays sparse.
pub fn estimate_transitions(
    dataset: &TrajectoryDataset,
    num_states: usize,
    num_actions: usize,
    prior_strength: f64,
    discount: f64,
) -> Result<TabularMdp> {
    if !(prior_strength >= 0.0 && prior_strength.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "prior_strength must be finite and non-negative, got {prior_strength}"
        )));
    }
    if dataset.num_states > num_states || dataset.num_actions > num_actions {
        return Err(Error::Bounds(format!(
            "dataset declares {}x{}, larger than {num_states}x{num_actions}",
            dataset.num_states, dataset.num_actions
        )));
    }
    dataset.validate()?;
    let mut counts: Vec<std::collections::BTreeMap<usize, f64>> =
        vec![Default::default(); num_states * num_actions];
    for t in &dataset.trajectories {
        for i in 1..t.len() {
            let row = t.states[i - 1] * num_actions + t.actions[i - 1];
            *counts[row].entry(t.states[i]).or_insert(0.0) += 1.0;
        }
    }
    let alpha_total = prior_strength * num_states as f64;
    let mut rows = Vec::with_capacity(counts.len());
    let mut uniform = Vec::with_capacity(counts.len());
    for c in counts {
        let n: f64 = c.values().sum();
        if n == 0.0 {
            rows.push(Vec::new());
            uniform.push(1.0);
            continue;
        }
        let denom = n + alpha_total;
        rows.push(c.into_iter().map(|(s2, k)| (s2, k / denom)).collect());
        uniform.push(alpha_total / denom);
    }
    TabularMdp::from_sparse(num_states, num_actions, discount, rows, uniform)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{FrustrationGridworld, Trajectory};

    #[test]
    fn single_transition_without_prior() {
        let d = TrajectoryDataset::new(3, 2, vec![Trajectory::new(vec![0, 1], vec![0, 1])]);
        let m = estimate_transitions(&d, 3, 2, 0.0, 0.9).unwrap();
        assert_eq!(m.prob(0, 0, 1), 1.0);
        // Unobserved pair is uniform.
        for s2 in 0..3 {
            assert!((m.prob(2, 1, s2) - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn smoothed_counts() {
        let d = TrajectoryDataset::new(
            3,
            1,
            vec![Trajectory::new(vec![0, 1, 0, 1, 0, 2], vec![0; 6])],
        );
        let m = estimate_transitions(&d, 3, 1, 0.5, 0.9).unwrap();
        // From state 0: two moves to 1, one to 2, total 3; denominator 3 + 1.5.
        assert!((m.prob(0, 0, 1) - 2.5 / 4.5).abs() < 1e-15);
        assert!((m.prob(0, 0, 2) - 1.5 / 4.5).abs() < 1e-15);
        assert!((m.prob(0, 0, 0) - 0.5 / 4.5).abs() < 1e-15);
        let dense = m.to_dense();
        for row in dense.chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    /// Max error over observed pairs, plus per-pair visit counts.
    fn gridworld_errors(num_trajectories: usize) -> (f64, Vec<(usize, f64, f64)>) {
        let g = FrustrationGridworld::default();
        let truth = g.build_mdp().unwrap();
        let d = g.generate(num_trajectories, 40, 17).unwrap();
        let est = estimate_transitions(&d, 25, 5, 0.05, g.discount).unwrap();
        let mut counts = vec![0usize; 125];
        for t in &d.trajectories {
            for i in 1..t.len() {
                counts[t.states[i - 1] * 5 + t.actions[i - 1]] += 1;
            }
        }
        let mut worst: f64 = 0.0;
        let mut per_entry = Vec::new();
        for s in 0..25 {
            for a in 0..5 {
                let n = counts[s * 5 + a];
                if n == 0 {
                    continue;
                }
                for s2 in 0..25 {
                    let (p, q) = (truth.prob(s, a, s2), est.prob(s, a, s2));
                    worst = worst.max((p - q).abs());
                    per_entry.push((n, p, q));
                }
            }
        }
        (worst, per_entry)
    }

    #[test]
    fn gridworld_estimate_is_within_sampling_error() {
        // About 10^5 observed transitions.
        let (_, entries) = gridworld_errors(2565);
        let steps: usize = 2565 * 39;
        assert!(steps >= 100_000);
        for (n, p, q) in entries {
            let n = n as f64;
            // Binomial standard error plus the deterministic prior bias.
            let se = (p * (1.0 - p) / n).sqrt();
            let bias = (0.05 + 1.25 * p) / (n + 1.25);
            assert!((q - p).abs() <= 4.0 * se + bias + 1e-12, "n={n} p={p} q={q}");
        }
    }

    #[test]
    fn gridworld_estimate_is_within_two_percent() {
        // About 10^6 observed transitions.
        let (worst, _) = gridworld_errors(25_650);
        assert!(worst <= 0.02, "max error {worst}");
    }

    #[test]
    fn out_of_range_dataset_is_rejected() {
        let d = TrajectoryDataset::new(3, 2, vec![Trajectory::new(vec![0], vec![1])]);
        assert!(matches!(
            estimate_transitions(&d, 2, 2, 0.05, 0.9),
            Err(Error::Bounds(_))
        ));
    }
}
