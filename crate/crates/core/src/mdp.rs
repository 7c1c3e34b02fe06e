//! Tabular MDPs: transition model, Bellman-optimal action values, Boltzmann
//! policies, policy evaluation and the expected-value-difference metric.
//!
//! Transitions are stored sparsely: every `(s, a)` row holds its explicit
//! successors plus an optional `uniform` mass spread evenly over all states.
//! The uniform component lets Dirichlet-smoothed empirical models over
//! thousands of token states stay small in memory.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::linalg::{argmax, softmax_into, Matrix};
use crate::{Error, Result};

/// Row-sum tolerance enforced by the in-memory constructors.
const ROW_SUM_TOL: f64 = 1e-9;
/// Row-sum tolerance accepted (then renormalized) when loading files.
const FILE_ROW_SUM_TOL: f64 = 1e-6;

pub const DEFAULT_Q_TOL: f64 = 1e-10;
pub const DEFAULT_Q_MAX_ITERS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TabularMdp {
    num_states: usize,
    num_actions: usize,
    discount: f64,
    // CSR over the num_states * num_actions rows.
    offsets: Vec<usize>,
    succ: Vec<usize>,
    probs: Vec<f64>,
    uniform: Vec<f64>,
}

impl TabularMdp {
    /// Builds an MDP from a dense tensor indexed `[s][a][s']` in row-major order.
    pub fn from_dense(
        num_states: usize,
        num_actions: usize,
        discount: f64,
        transitions: &[f64],
    ) -> Result<Self> {
        if transitions.len() != num_states * num_actions * num_states {
            return Err(Error::DimensionMismatch(format!(
                "dense transition tensor has {} entries, expected {}",
                transitions.len(),
                num_states * num_actions * num_states
            )));
        }
        let rows = transitions
            .chunks_exact(num_states.max(1))
            .map(|row| {
                row.iter()
                    .enumerate()
                    .filter(|(_, &p)| p != 0.0)
                    .map(|(s, &p)| (s, p))
                    .collect()
            })
            .collect();
        Self::from_sparse(
            num_states,
            num_actions,
            discount,
            rows,
            vec![0.0; num_states * num_actions],
        )
    }

    /// Builds an MDP from explicit successor lists (one per `(s, a)` row,
    /// indexed `s * num_actions + a`) plus a per-row uniform mass.
    pub fn from_sparse(
        num_states: usize,
        num_actions: usize,
        discount: f64,
        rows: Vec<Vec<(usize, f64)>>,
        uniform: Vec<f64>,
    ) -> Result<Self> {
        if num_states == 0 || num_actions == 0 {
            return Err(Error::InvalidConfig(
                "an MDP needs at least one state and one action".into(),
            ));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidConfig(format!(
                "discount must lie in [0, 1), got {discount}"
            )));
        }
        let n_rows = num_states * num_actions;
        if rows.len() != n_rows || uniform.len() != n_rows {
            return Err(Error::DimensionMismatch(format!(
                "expected {n_rows} transition rows, got {} (uniform: {})",
                rows.len(),
                uniform.len()
            )));
        }
        let mut offsets = Vec::with_capacity(n_rows + 1);
        let mut succ = Vec::new();
        let mut probs = Vec::new();
        offsets.push(0);
        for (idx, row) in rows.into_iter().enumerate() {
            let u = uniform[idx];
            let mut total = u;
            if !(0.0..=1.0).contains(&u) {
                return Err(Error::Bounds(format!("uniform mass {u} in row {idx}")));
            }
            for (s2, p) in row {
                if s2 >= num_states {
                    return Err(Error::IndexOutOfRange(format!(
                        "successor {s2} in row {idx} (num_states = {num_states})"
                    )));
                }
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::Bounds(format!(
                        "transition probability {p} in row {idx}"
                    )));
                }
                if p > 0.0 {
                    succ.push(s2);
                    probs.push(p);
                    total += p;
                }
            }
            if (total - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Bounds(format!(
                    "transition row (s={}, a={}) sums to {total}",
                    idx / num_actions,
                    idx % num_actions
                )));
            }
            offsets.push(succ.len());
        }
        Ok(Self {
            num_states,
            num_actions,
            discount,
            offsets,
            succ,
            probs,
            uniform,
        })
    }

    #[inline]
    pub fn num_states(&self) -> usize {
        self.num_states
    }

    #[inline]
    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    #[inline]
    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn with_discount(mut self, discount: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidConfig(format!(
                "discount must lie in [0, 1), got {discount}"
            )));
        }
        self.discount = discount;
        Ok(self)
    }

    /// Explicit successors of `(s, a)`, excluding the uniform component.
    pub fn successors(&self, s: usize, a: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let row = s * self.num_actions + a;
        let range = self.offsets[row]..self.offsets[row + 1];
        self.succ[range.clone()]
            .iter()
            .copied()
            .zip(self.probs[range].iter().copied())
    }

    /// Uniform mass of row `(s, a)`.
    pub fn uniform_mass(&self, s: usize, a: usize) -> f64 {
        self.uniform[s * self.num_actions + a]
    }

    /// `P(s' | s, a)`.
    pub fn prob(&self, s: usize, a: usize, s2: usize) -> f64 {
        let explicit: f64 = self
            .successors(s, a)
            .filter(|&(t, _)| t == s2)
            .map(|(_, p)| p)
            .sum();
        explicit + self.uniform_mass(s, a) / self.num_states as f64
    }

    /// Dense `[s][a][s']` tensor in row-major order.
    pub fn to_dense(&self) -> Vec<f64> {
        let n = self.num_states;
        let mut out = vec![0.0; n * self.num_actions * n];
        for s in 0..n {
            for a in 0..self.num_actions {
                let base = (s * self.num_actions + a) * n;
                let u = self.uniform_mass(s, a) / n as f64;
                if u != 0.0 {
                    out[base..base + n].iter_mut().for_each(|x| *x = u);
                }
                for (s2, p) in self.successors(s, a) {
                    out[base + s2] += p;
                }
            }
        }
        out
    }

    /// Expected next-state value `Σ_{s'} P(s'|s,a) v(s')` for every `(s, a)`,
    /// written row-major into `out` (length `num_states * num_actions`).
    pub fn expected_next(&self, v: &[f64], out: &mut [f64]) {
        debug_assert_eq!(v.len(), self.num_states);
        debug_assert_eq!(out.len(), self.num_states * self.num_actions);
        let mean = v.iter().sum::<f64>() / self.num_states as f64;
        for (row, o) in out.iter_mut().enumerate() {
            let range = self.offsets[row]..self.offsets[row + 1];
            let mut acc = 0.0;
            for (&s2, &p) in self.succ[range.clone()].iter().zip(&self.probs[range]) {
                acc += p * v[s2];
            }
            let u = self.uniform[row];
            if u != 0.0 {
                acc += u * mean;
            }
            *o = acc;
        }
    }

    fn check_table(&self, m: &Matrix, what: &str) -> Result<()> {
        if m.shape() != (self.num_states, self.num_actions) {
            return Err(Error::DimensionMismatch(format!(
                "{what} is {:?}, MDP is {}x{}",
                m.shape(),
                self.num_states,
                self.num_actions
            )));
        }
        Ok(())
    }

    /// Loads an MDP file, renormalizing rows that sum to 1 within `1e-6`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path)?;
        let file: MdpFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        file.into_mdp()
    }

    /// Writes the dense file representation.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = MdpFile {
            num_states: self.num_states,
            num_actions: self.num_actions,
            discount: self.discount,
            transitions: Some(self.to_dense()),
            sparse: None,
        };
        fs::write(path, serde_json::to_string(&file).expect("MDP serializes"))?;
        Ok(())
    }

    /// Writes the sparse file representation (explicit successors plus
    /// uniform mass per row).
    pub fn save_sparse(&self, path: impl AsRef<Path>) -> Result<()> {
        let rows = (0..self.num_states * self.num_actions)
            .map(|row| SparseRow {
                succ: self
                    .successors(row / self.num_actions, row % self.num_actions)
                    .collect(),
                uniform: self.uniform[row],
            })
            .collect();
        let file = MdpFile {
            num_states: self.num_states,
            num_actions: self.num_actions,
            discount: self.discount,
            transitions: None,
            sparse: Some(rows),
        };
        fs::write(path, serde_json::to_string(&file).expect("MDP serializes"))?;
        Ok(())
    }
}

/// On-disk MDP: either a dense `transitions` tensor (row-major `s, a, s'`)
/// or `sparse` rows, never both.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MdpFile {
    num_states: usize,
    num_actions: usize,
    discount: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transitions: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sparse: Option<Vec<SparseRow>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SparseRow {
    succ: Vec<(usize, f64)>,
    #[serde(default)]
    uniform: f64,
}

impl MdpFile {
    fn into_mdp(self) -> Result<TabularMdp> {
        let (ns, na) = (self.num_states, self.num_actions);
        let (mut rows, mut uniform): (Vec<Vec<(usize, f64)>>, Vec<f64>) =
            match (self.transitions, self.sparse) {
                (Some(dense), None) => {
                    if dense.len() != ns * na * ns {
                        return Err(Error::DimensionMismatch(format!(
                            "dense transition tensor has {} entries, expected {}",
                            dense.len(),
                            ns * na * ns
                        )));
                    }
                    let rows = dense
                        .chunks_exact(ns.max(1))
                        .map(|r| {
                            r.iter()
                                .enumerate()
                                .filter(|(_, &p)| p != 0.0)
                                .map(|(s, &p)| (s, p))
                                .collect()
                        })
                        .collect();
                    (rows, vec![0.0; ns * na])
                }
                (None, Some(sparse)) => sparse.into_iter().map(|r| (r.succ, r.uniform)).unzip(),
                _ => {
                    return Err(Error::InvalidConfig(
                        "MDP file needs exactly one of `transitions` or `sparse`".into(),
                    ))
                }
            };
        if rows.len() != ns * na {
            return Err(Error::DimensionMismatch(format!(
                "expected {} transition rows, got {}",
                ns * na,
                rows.len()
            )));
        }
        for (idx, (row, u)) in rows.iter_mut().zip(uniform.iter_mut()).enumerate() {
            if row.iter().any(|&(_, p)| !(0.0..=1.0).contains(&p)) || !(0.0..=1.0).contains(u) {
                return Err(Error::Bounds(format!(
                    "probability outside [0, 1] in row {idx}"
                )));
            }
            let total: f64 = row.iter().map(|&(_, p)| p).sum::<f64>() + *u;
            if (total - 1.0).abs() > FILE_ROW_SUM_TOL {
                return Err(Error::Bounds(format!(
                    "transition row (s={}, a={}) sums to {total}",
                    idx / na.max(1),
                    idx % na.max(1)
                )));
            }
            row.iter_mut().for_each(|(_, p)| *p /= total);
            *u /= total;
        }
        TabularMdp::from_sparse(ns, na, self.discount, rows, uniform)
    }
}

macro_rules! sa_table {
    ($(#[$doc:meta])* $name:ident) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub Matrix);

        impl $name {
            pub fn zeros(num_states: usize, num_actions: usize) -> Self {
                Self(Matrix::zeros(num_states, num_actions))
            }

            pub fn from_rows(rows: &[Vec<f64>]) -> Self {
                Self(Matrix::from_rows(rows))
            }

            #[inline]
            pub fn get(&self, s: usize, a: usize) -> f64 {
                self.0.get(s, a)
            }

            #[inline]
            pub fn row(&self, s: usize) -> &[f64] {
                self.0.row(s)
            }

            pub fn num_states(&self) -> usize {
                self.0.rows()
            }

            pub fn num_actions(&self) -> usize {
                self.0.cols()
            }

            pub fn max_abs_diff(&self, other: &Self) -> f64 {
                self.0.max_abs_diff(&other.0)
            }
        }
    };
}

sa_table!(
    /// Reward `r(s, a)` over state-action pairs.
    RewardTable
);
sa_table!(
    /// Action values `Q(s, a)`.
    QTable
);
sa_table!(
    /// Stochastic policy `π(a | s)`; each row is a distribution.
    PolicyTable
);

impl QTable {
    /// `V(s) = max_a Q(s, a)`.
    pub fn state_values(&self) -> Vec<f64> {
        max_per_row(&self.0)
    }

    /// Greedy action per state; ties go to the lowest action index.
    pub fn greedy_actions(&self) -> Vec<usize> {
        self.0.iter_rows().map(argmax).collect()
    }
}

impl PolicyTable {
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Self(Matrix::filled(
            num_states,
            num_actions,
            1.0 / num_actions as f64,
        ))
    }

    /// Gap between the largest and second-largest action probability per
    /// state (0 when there is a single action).
    pub fn action_confidence(&self) -> Vec<f64> {
        self.0
            .iter_rows()
            .map(|r| {
                let mut top = f64::NEG_INFINITY;
                let mut second = f64::NEG_INFINITY;
                for &p in r {
                    if p > top {
                        second = top;
                        top = p;
                    } else if p > second {
                        second = p;
                    }
                }
                if second.is_finite() {
                    top - second
                } else {
                    0.0
                }
            })
            .collect()
    }
}

/// Bellman-optimal `Q` for reward `r` by synchronous value iteration from
/// `Q = 0`, stopping once the max-norm Bellman residual is at most `tol`.
pub fn solve_q(mdp: &TabularMdp, r: &RewardTable, tol: f64, max_iters: usize) -> Result<QTable> {
    solve_q_from(mdp, r, None, tol, max_iters)
}

/// As [`solve_q`], warm-started from `init` when given.
pub fn solve_q_from(
    mdp: &TabularMdp,
    r: &RewardTable,
    init: Option<&QTable>,
    tol: f64,
    max_iters: usize,
) -> Result<QTable> {
    mdp.check_table(&r.0, "reward table")?;
    if !(tol > 0.0) || max_iters == 0 {
        return Err(Error::InvalidConfig(format!(
            "solve_q needs tol > 0 and max_iters >= 1 (tol = {tol}, max_iters = {max_iters})"
        )));
    }
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let gamma = mdp.discount;
    let mut q = match init {
        Some(q0) => {
            mdp.check_table(&q0.0, "initial Q")?;
            q0.0.clone()
        }
        None => Matrix::zeros(ns, na),
    };
    let mut next = vec![0.0; ns * na];
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let v = max_per_row(&q);
        mdp.expected_next(&v, &mut next);
        residual = 0.0;
        for ((qv, rv), tv) in q.as_mut_slice().iter_mut().zip(r.0.as_slice()).zip(&next) {
            let nq = rv + gamma * tv;
            residual = f64::max(residual, (nq - *qv).abs());
            *qv = nq;
        }
        // The residual of the returned iterate is at most γ times this step.
        if residual <= tol {
            return Ok(QTable(q));
        }
    }
    Err(Error::NonConvergence {
        residual,
        iterations: max_iters,
    })
}

fn max_per_row(q: &Matrix) -> Vec<f64> {
    q.iter_rows()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn bellman_residual_of(mdp: &TabularMdp, r: &RewardTable, q: &Matrix, scratch: &mut [f64]) -> f64 {
    let v = max_per_row(q);
    mdp.expected_next(&v, scratch);
    let gamma = mdp.discount;
    r.0.as_slice()
        .iter()
        .zip(scratch.iter())
        .zip(q.as_slice())
        .map(|((rv, tv), qv)| (rv + gamma * tv - qv).abs())
        .fold(0.0, f64::max)
}

/// Max-norm Bellman optimality residual `‖r + γ T max Q − Q‖∞`.
pub fn bellman_residual(mdp: &TabularMdp, r: &RewardTable, q: &QTable) -> f64 {
    let mut scratch = vec![0.0; mdp.num_states * mdp.num_actions];
    bellman_residual_of(mdp, r, &q.0, &mut scratch)
}

/// Row-wise softmax of `Q` (temperature 1).
pub fn boltzmann_policy(q: &QTable) -> PolicyTable {
    let (ns, na) = q.0.shape();
    let mut out = Matrix::zeros(ns, na);
    for s in 0..ns {
        softmax_into(q.0.row(s), out.row_mut(s));
    }
    PolicyTable(out)
}

/// Value of a stochastic `policy` under `r_eval`, by iterative policy
/// evaluation until the max-norm update is at most `tol`.
#[doc(alias = "greedy_value")]
pub fn policy_value(
    mdp: &TabularMdp,
    r_eval: &RewardTable,
    policy: &PolicyTable,
    tol: f64,
) -> Result<Vec<f64>> {
    policy_value_with(mdp, r_eval, policy, tol, DEFAULT_Q_MAX_ITERS)
}

pub fn policy_value_with(
    mdp: &TabularMdp,
    r_eval: &RewardTable,
    policy: &PolicyTable,
    tol: f64,
    max_iters: usize,
) -> Result<Vec<f64>> {
    mdp.check_table(&r_eval.0, "reward table")?;
    mdp.check_table(&policy.0, "policy table")?;
    if !(tol > 0.0) || max_iters == 0 {
        return Err(Error::InvalidConfig(format!(
            "policy evaluation needs tol > 0 and max_iters >= 1 (tol = {tol})"
        )));
    }
    let (ns, na) = (mdp.num_states, mdp.num_actions);
    let gamma = mdp.discount;
    // Expected one-step reward under the policy is fixed.
    let r_pi: Vec<f64> = (0..ns)
        .map(|s| {
            policy
                .row(s)
                .iter()
                .zip(r_eval.row(s))
                .map(|(p, r)| p * r)
                .sum()
        })
        .collect();
    let mut v = vec![0.0; ns];
    let mut next = vec![0.0; ns * na];
    let mut delta = f64::INFINITY;
    for _ in 0..max_iters {
        mdp.expected_next(&v, &mut next);
        delta = 0.0;
        for s in 0..ns {
            let cont: f64 = policy
                .row(s)
                .iter()
                .zip(&next[s * na..(s + 1) * na])
                .map(|(p, tv)| p * tv)
                .sum();
            let nv = r_pi[s] + gamma * cont;
            delta = delta.max((nv - v[s]).abs());
            v[s] = nv;
        }
        if delta <= tol {
            return Ok(v);
        }
    }
    Err(Error::NonConvergence {
        residual: delta,
        iterations: max_iters,
    })
}

/// Expected value difference between the Boltzmann policies of a true and a
/// recovered reward, both evaluated under the true reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evd {
    /// Mean over states of `|V*(s) − V̂(s)|`.
    pub mae: f64,
    /// `V̂(s₀) − V*(s₀)`; non-positive up to numerical noise.
    pub start: f64,
}

pub fn expected_value_difference(
    mdp: &TabularMdp,
    r_true: &RewardTable,
    r_recovered: &RewardTable,
    start_state: usize,
) -> Result<Evd> {
    mdp.check_table(&r_true.0, "true reward")?;
    mdp.check_table(&r_recovered.0, "recovered reward")?;
    if start_state >= mdp.num_states {
        return Err(Error::IndexOutOfRange(format!(
            "start state {start_state} (num_states = {})",
            mdp.num_states
        )));
    }
    let pi_star = boltzmann_policy(&solve_q(mdp, r_true, DEFAULT_Q_TOL, DEFAULT_Q_MAX_ITERS)?);
    let pi_hat = boltzmann_policy(&solve_q(
        mdp,
        r_recovered,
        DEFAULT_Q_TOL,
        DEFAULT_Q_MAX_ITERS,
    )?);
    let v_star = policy_value(mdp, r_true, &pi_star, DEFAULT_Q_TOL)?;
    let v_hat = policy_value(mdp, r_true, &pi_hat, DEFAULT_Q_TOL)?;
    let mae = v_star
        .iter()
        .zip(&v_hat)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / mdp.num_states as f64;
    Ok(Evd {
        mae,
        start: v_hat[start_state] - v_star[start_state],
    })
}
