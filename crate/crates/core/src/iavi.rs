//! Responsibility-weighted inverse action-value iteration.
//!
//! For one intention `k` the demonstrations are summarized as weighted
//! visit counts `c[s][a] = Σ_i w_{i,k} 1[(s_i, a_i) = (s, a)]`, turned into a
//! Laplace-smoothed empirical policy `π̂`, and a reward `r` whose Boltzmann
//! policy reproduces `π̂` at every visited state is recovered by a fixed
//! point: given the current state values `V`, each visited state solves the
//! `|A|`-dimensional linear system
//!
//! ```text
//! r(s,a) − mean_{b≠a} r(s,b) = η_a − mean_{b≠a} η_b + γ (mean_{b≠a} T_b V − T_a V),
//! η_a = log π̂(a|s),   T_a V = Σ_{s'} P(s'|s,a) V(s')
//! ```
//!
//! in the minimum-norm sense (the system matrix has the all-ones null
//! space, so the solution has zero mean over actions). `V` is refreshed by a
//! single Bellman backup under the new reward between solves. With that
//! schedule `V` follows `V ← max_a c(η)(s,·) + γ mean_a T_a V` at visited
//! states and the optimality backup at unvisited ones, a `γ`-contraction,
//! and its fixed point is exactly the Bellman-optimal value of the returned
//! reward.

use serde::{Deserialize, Serialize};

use crate::em::Responsibilities;
use crate::env::TrajectoryDataset;
use crate::linalg::Matrix;
use crate::mdp::{PolicyTable, RewardTable, TabularMdp};
use crate::{Error, Result};

pub const DEFAULT_SMOOTHING: f64 = 1e-3;

/// Responsibility mass per state-action pair for one intention.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedVisitCounts {
    counts: Matrix,
    state_totals: Vec<f64>,
}

impl WeightedVisitCounts {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        Self {
            counts: Matrix::zeros(num_states, num_actions),
            state_totals: vec![0.0; num_states],
        }
    }

    /// Panics on negative or non-finite counts.
    pub fn from_matrix(counts: Matrix) -> Self {
        assert!(
            counts.as_slice().iter().all(|&c| c >= 0.0 && c.is_finite()),
            "visit counts must be finite and non-negative"
        );
        let state_totals = counts.iter_rows().map(|r| r.iter().sum()).collect();
        Self {
            counts,
            state_totals,
        }
    }

    #[inline]
    pub fn add(&mut self, s: usize, a: usize, w: f64) {
        let c = self.counts.get(s, a);
        self.counts.set(s, a, c + w);
        self.state_totals[s] += w;
    }

    pub fn counts(&self) -> &Matrix {
        &self.counts
    }

    pub fn state_totals(&self) -> &[f64] {
        &self.state_totals
    }

    pub fn total(&self) -> f64 {
        self.state_totals.iter().sum()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut counts = self.counts.clone();
        counts.as_mut_slice().iter_mut().for_each(|c| *c *= factor);
        Self::from_matrix(counts)
    }
}

/// Sums the responsibilities of intention `k` over every demonstration step.
pub fn accumulate_counts(
    dataset: &TrajectoryDataset,
    responsibilities: &Responsibilities,
    k: usize,
) -> Result<WeightedVisitCounts> {
    let (ns, na) = (dataset.num_states, dataset.num_actions);
    if responsibilities.len() != dataset.trajectories.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} responsibility matrices for {} trajectories",
            responsibilities.len(),
            dataset.trajectories.len()
        )));
    }
    let mut out = WeightedVisitCounts::zeros(ns, na);
    for (ti, (traj, w)) in dataset
        .trajectories
        .iter()
        .zip(responsibilities.iter())
        .enumerate()
    {
        if w.rows() != traj.len() || k >= w.cols() {
            return Err(Error::DimensionMismatch(format!(
                "trajectory {ti}: responsibilities {:?} for {} steps, intention {k}",
                w.shape(),
                traj.len()
            )));
        }
        for (i, (&s, &a)) in traj.states.iter().zip(&traj.actions).enumerate() {
            if s >= ns || a >= na {
                return Err(Error::IndexOutOfRange(format!(
                    "trajectory {ti} step {i}: (s={s}, a={a}) outside {ns}x{na}"
                )));
            }
            out.add(s, a, w.get(i, k));
        }
    }
    Ok(out)
}

/// Smoothed maximum-likelihood policy estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalPolicy {
    pub probs: PolicyTable,
    pub visited: Vec<bool>,
}

/// `π̂(a|s) = (c[s][a] + ε) / (c[s] + |A| ε)`; unvisited states are uniform.
///
/// Panics unless `smoothing > 0`.
pub fn empirical_policy(counts: &WeightedVisitCounts, smoothing: f64) -> EmpiricalPolicy {
    assert!(smoothing > 0.0, "smoothing must be positive");
    let (ns, na) = counts.counts.shape();
    let mut probs = Matrix::zeros(ns, na);
    let mut visited = vec![false; ns];
    for s in 0..ns {
        let total = counts.state_totals[s];
        visited[s] = total > 0.0;
        let denom = total + na as f64 * smoothing;
        for (p, &c) in probs.row_mut(s).iter_mut().zip(counts.counts.row(s)) {
            *p = (c + smoothing) / denom;
        }
    }
    EmpiricalPolicy {
        probs: PolicyTable(probs),
        visited,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IaviOptions {
    /// Stop once both the reward and value updates are at most this (max-norm).
    pub tol: f64,
    pub max_iters: usize,
    /// `r ← (1 − α) r_old + α r_solved`.
    pub damping: f64,
    /// When set, run at most this many sweeps and return the current iterate
    /// without reporting non-convergence.
    #[serde(default)]
    pub sweep_budget: Option<usize>,
}

impl Default for IaviOptions {
    fn default() -> Self {
        Self {
            tol: 1e-8,
            max_iters: 5_000,
            damping: 1.0,
            sweep_budget: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct IaviSolution {
    pub reward: RewardTable,
    /// Optimal state values under `reward` (the solver's fixed-point variable).
    pub values: Vec<f64>,
    pub sweeps: usize,
    pub final_delta: f64,
}

/// Moore–Penrose pseudoinverse of `X = I − (11ᵀ − I)/(n − 1)`.
///
/// `X = n/(n−1) (I − 11ᵀ/n)` is a scaled centering projector, so its
/// pseudoinverse is `(n−1)/n (I − 11ᵀ/n)`.
pub fn system_pseudoinverse(n: usize) -> Matrix {
    assert!(n >= 2, "pseudoinverse needs at least two actions");
    let nf = n as f64;
    let scale = (nf - 1.0) / nf;
    let mut m = Matrix::filled(n, n, -scale / nf);
    for i in 0..n {
        m.set(i, i, scale * (1.0 - 1.0 / nf));
    }
    m
}

/// The (singular) per-state system matrix `X = I − (11ᵀ − I)/(n − 1)`.
pub fn system_matrix(n: usize) -> Matrix {
    assert!(n >= 2);
    let off = -1.0 / (n as f64 - 1.0);
    let mut m = Matrix::filled(n, n, off);
    for i in 0..n {
        m.set(i, i, 1.0);
    }
    m
}

/// Recovers a reward whose Boltzmann policy matches `pihat` at visited states.
pub fn iavi_solve(
    mdp: &TabularMdp,
    pihat: &EmpiricalPolicy,
    tol: f64,
    max_iters: usize,
) -> Result<RewardTable> {
    let opts = IaviOptions {
        tol,
        max_iters,
        ..IaviOptions::default()
    };
    iavi_solve_with(mdp, pihat, &opts, None).map(|s| s.reward)
}

/// Full-control variant; `warm_values` seeds the value iterate.
pub fn iavi_solve_with(
    mdp: &TabularMdp,
    pihat: &EmpiricalPolicy,
    opts: &IaviOptions,
    warm_values: Option<&[f64]>,
) -> Result<IaviSolution> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    if pihat.probs.0.shape() != (ns, na) || pihat.visited.len() != ns {
        return Err(Error::DimensionMismatch(format!(
            "empirical policy is {:?}, MDP is {ns}x{na}",
            pihat.probs.0.shape()
        )));
    }
    if !(opts.tol > 0.0) || opts.max_iters == 0 || !(opts.damping > 0.0 && opts.damping <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "IAVI needs tol > 0, max_iters >= 1 and damping in (0, 1]: {opts:?}"
        )));
    }
    if na == 1 {
        log::warn!("IAVI with a single action carries no preference information; returning r = 0");
        return Ok(IaviSolution {
            reward: RewardTable::zeros(ns, na),
            values: vec![0.0; ns],
            sweeps: 0,
            final_delta: 0.0,
        });
    }
    if pihat.probs.0.as_slice().iter().any(|&p| !(p > 0.0)) {
        return Err(Error::DegenerateInput(
            "empirical policy must be strictly positive".into(),
        ));
    }

    let gamma = mdp.discount();
    let pinv = system_pseudoinverse(na);
    let inv_rest = 1.0 / (na as f64 - 1.0);

    let log_pi: Vec<f64> = pihat.probs.0.as_slice().iter().map(|p| p.ln()).collect();
    let mut r = Matrix::zeros(ns, na);
    let mut v = match warm_values {
        Some(v0) if v0.len() == ns => v0.to_vec(),
        Some(v0) => {
            return Err(Error::DimensionMismatch(format!(
                "warm values have length {}, expected {ns}",
                v0.len()
            )))
        }
        None => vec![0.0; ns],
    };
    let mut next = vec![0.0; ns * na];
    let mut rhs = vec![0.0; na];
    let mut solved = vec![0.0; na];
    let budget = opts.sweep_budget.unwrap_or(opts.max_iters);
    let mut delta = f64::INFINITY;

    for sweep in 1..=budget {
        mdp.expected_next(&v, &mut next);
        let mut dr: f64 = 0.0;
        let mut dv: f64 = 0.0;
        for s in 0..ns {
            let tv = &next[s * na..(s + 1) * na];
            let row = r.row_mut(s);
            if pihat.visited[s] {
                let eta = &log_pi[s * na..(s + 1) * na];
                let eta_sum: f64 = eta.iter().sum();
                let tv_sum: f64 = tv.iter().sum();
                for a in 0..na {
                    let eta_rest = (eta_sum - eta[a]) * inv_rest;
                    let tv_rest = (tv_sum - tv[a]) * inv_rest;
                    rhs[a] = eta[a] - eta_rest + gamma * (tv_rest - tv[a]);
                }
                pinv.matvec_into(&rhs, &mut solved);
                for (old, &new) in row.iter_mut().zip(&solved) {
                    let damped = (1.0 - opts.damping) * *old + opts.damping * new;
                    dr = dr.max((damped - *old).abs());
                    *old = damped;
                }
            }
            // Unvisited states keep r = 0.
            let best = row
                .iter()
                .zip(tv)
                .map(|(rv, t)| rv + gamma * t)
                .fold(f64::NEG_INFINITY, f64::max);
            dv = dv.max((best - v[s]).abs());
            v[s] = best;
        }
        delta = dr.max(dv);
        if !delta.is_finite() {
            return Err(Error::NumericalFault {
                step: sweep,
                what: "IAVI iterate diverged".into(),
            });
        }
        if delta <= opts.tol {
            return Ok(IaviSolution {
                reward: RewardTable(r),
                values: v,
                sweeps: sweep,
                final_delta: delta,
            });
        }
    }
    if opts.sweep_budget.is_some() {
        return Ok(IaviSolution {
            reward: RewardTable(r),
            values: v,
            sweeps: budget,
            final_delta: delta,
        });
    }
    Err(Error::NonConvergence {
        residual: delta,
        iterations: opts.max_iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;
    use crate::mdp::{boltzmann_policy, solve_q};

    fn absorbing(num_actions: usize, gamma: f64) -> TabularMdp {
        TabularMdp::from_dense(1, num_actions, gamma, &vec![1.0; num_actions]).unwrap()
    }

    #[test]
    fn pseudoinverse_satisfies_penrose_conditions() {
        for n in 2..7 {
            let x = system_matrix(n);
            let p = system_pseudoinverse(n);
            let mul = |a: &Matrix, b: &Matrix| {
                let mut out = Matrix::zeros(a.rows(), b.cols());
                for i in 0..a.rows() {
                    for j in 0..b.cols() {
                        let v = (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum();
                        out.set(i, j, v);
                    }
                }
                out
            };
            assert!(mul(&mul(&x, &p), &x).max_abs_diff(&x) < 1e-12);
            assert!(mul(&mul(&p, &x), &p).max_abs_diff(&p) < 1e-12);
            // Both products are symmetric (X and X⁺ are symmetric and commute).
            let xp = mul(&x, &p);
            for i in 0..n {
                for j in 0..n {
                    assert!((xp.get(i, j) - xp.get(j, i)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_absorbing_state_recovers_half_log_ratio() {
        let mdp = absorbing(2, 0.0);
        let pihat = EmpiricalPolicy {
            probs: PolicyTable::from_rows(&[vec![0.8, 0.2]]),
            visited: vec![true],
        };
        let r = iavi_solve(&mdp, &pihat, 1e-12, 100).unwrap();
        let half = 0.5 * (0.8f64 / 0.2).ln();
        assert!((r.get(0, 0) - half).abs() < 1e-12);
        assert!((r.get(0, 1) + half).abs() < 1e-12);
        assert!((half - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn uniform_policy_gives_zero_reward() {
        let mdp = crate::env::FrustrationGridworld::default().build_mdp().unwrap();
        let pihat = EmpiricalPolicy {
            probs: PolicyTable::uniform(25, 5),
            visited: vec![true; 25],
        };
        let r = iavi_solve(&mdp, &pihat, 1e-10, 5_000).unwrap();
        assert!(r.0.as_slice().iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn unvisited_states_keep_zero_reward_and_visited_are_centered() {
        let mdp = crate::env::FrustrationGridworld::default().build_mdp().unwrap();
        let mut counts = WeightedVisitCounts::zeros(25, 5);
        counts.add(3, 1, 4.0);
        counts.add(3, 2, 1.0);
        counts.add(7, 4, 2.5);
        let pihat = empirical_policy(&counts, DEFAULT_SMOOTHING);
        let r = iavi_solve(&mdp, &pihat, 1e-9, 5_000).unwrap();
        for s in 0..25 {
            let row = r.row(s);
            if pihat.visited[s] {
                assert!(row.iter().sum::<f64>().abs() / 5.0 < 1e-9);
            } else {
                assert!(row.iter().all(|&x| x == 0.0));
            }
        }
        // The recovered reward reproduces π̂ at visited states.
        let q = solve_q(&mdp, &r, 1e-12, 100_000).unwrap();
        let pi = boltzmann_policy(&q);
        for s in [3, 7] {
            for a in 0..5 {
                assert!((pi.get(s, a) - pihat.probs.get(s, a)).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn single_action_returns_zero_reward() {
        let mdp = absorbing(1, 0.5);
        let pihat = EmpiricalPolicy {
            probs: PolicyTable::from_rows(&[vec![1.0]]),
            visited: vec![true],
        };
        let r = iavi_solve(&mdp, &pihat, 1e-8, 10).unwrap();
        assert_eq!(r.get(0, 0), 0.0);
    }

    #[test]
    fn empirical_policy_examples() {
        let counts = WeightedVisitCounts::from_matrix(Matrix::from_rows(&[
            vec![8.0, 2.0],
            vec![0.0, 0.0],
            vec![1.0, 0.0],
        ]));
        let tiny = empirical_policy(&counts, 1e-12);
        assert!((tiny.probs.get(0, 0) - 0.8).abs() < 1e-10);
        assert!((tiny.probs.get(0, 1) - 0.2).abs() < 1e-10);
        assert_eq!(tiny.probs.row(1), &[0.5, 0.5]);
        assert!(!tiny.visited[1]);
        let pi = empirical_policy(&counts, 0.01);
        assert!((pi.probs.get(2, 0) - 1.01 / 1.02).abs() < 1e-15);
        assert!((pi.probs.get(2, 1) - 0.01 / 1.02).abs() < 1e-15);
    }

    #[test]
    fn smoothing_perturbation_is_bounded() {
        // With ε fixed, scaling counts moves π̂ by at most ε|A|/c[s] per entry.
        let eps = 1e-3;
        let counts = WeightedVisitCounts::from_matrix(Matrix::from_rows(&[
            vec![3.0, 1.0, 0.0],
            vec![0.2, 0.1, 0.7],
        ]));
        let mle = empirical_policy(&counts, 1e-300);
        for factor in [0.5, 2.0, 10.0] {
            let scaled = counts.scaled(factor);
            let pi = empirical_policy(&scaled, eps);
            for s in 0..2 {
                let bound = eps * 3.0 / scaled.state_totals()[s];
                for a in 0..3 {
                    assert!((pi.probs.get(s, a) - mle.probs.get(s, a)).abs() <= bound + 1e-15);
                }
            }
        }
    }

    #[test]
    fn non_convergence_is_reported() {
        let mdp = crate::env::FrustrationGridworld::default().build_mdp().unwrap();
        let mut counts = WeightedVisitCounts::zeros(25, 5);
        counts.add(0, 3, 5.0);
        let pihat = empirical_policy(&counts, DEFAULT_SMOOTHING);
        let err = iavi_solve(&mdp, &pihat, 1e-12, 3).unwrap_err();
        assert!(err.is_non_convergence());
    }
}
