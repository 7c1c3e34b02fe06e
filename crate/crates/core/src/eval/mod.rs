//! Evaluation and experiment plumbing: configuration, transition estimation,
//! cross-validation, segmentation, reward-map export and run directories.

mod checkpoint;
mod config;
mod cv;
mod export;
mod run;
mod segment;
mod transitions;

pub use checkpoint::Checkpoint;
pub use config::{Paths, RunConfig, PROFILES};
pub use cv::{
    cross_validate, fold_assignments, held_out_ll, match_intentions, FoldReport, FoldResult,
    GroundTruth,
};
pub use export::{export_maps, load_reward_map, MapRow};
pub use run::{train_run, RunSummary};
pub use segment::{count_switches, segment, segmentation_accuracy, Segmentation};
pub use transitions::estimate_transitions;

/// All permutations of `0..n` in lexicographic order.
pub fn permutations(n: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur = Vec::with_capacity(n);
    let mut used = vec![false; n];
    fn rec(n: usize, cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == n {
            out.push(cur.clone());
            return;
        }
        for i in 0..n {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(n, cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    rec(n, &mut cur, &mut used, &mut out);
    out
}

/// Maps each ground-truth label to a recovered intention given the
/// agreement matrix `agree[label][intention]`.
///
/// With at least as many intentions as labels the map is injective and
/// maximizes total agreement (first maximizer in lexicographic order);
/// otherwise every label takes its highest-agreement intention.
pub fn match_labels(agree: &[Vec<f64>]) -> Vec<usize> {
    let labels = agree.len();
    let k = agree.first().map_or(0, Vec::len);
    if k < labels {
        return agree.iter().map(|row| crate::linalg::argmax(row)).collect();
    }
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for perm in permutations(k) {
        let score: f64 = (0..labels).map(|l| agree[l][perm[l]]).sum();
        if score > best.0 {
            best = (score, perm[..labels].to_vec());
        }
    }
    best.1
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutation_count() {
        assert_eq!(permutations(0), vec![Vec::<usize>::new()]);
        assert_eq!(permutations(3).len(), 6);
        assert_eq!(permutations(4).len(), 24);
        assert_eq!(permutations(2), vec![vec![0, 1], vec![1, 0]]);
    }

    #[test]
    fn label_matching() {
        let agree = vec![vec![1.0, 9.0], vec![8.0, 2.0]];
        assert_eq!(match_labels(&agree), vec![1, 0]);
        // Fewer intentions than labels: both labels map to the only one.
        assert_eq!(match_labels(&[vec![3.0], vec![4.0]]), vec![0, 0]);
        // More intentions than labels.
        assert_eq!(match_labels(&[vec![0.0, 1.0, 5.0]]), vec![2]);
    }
}
