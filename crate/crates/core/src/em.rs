//! Expectation-maximization over latent per-step intentions.
//!
//! The E-step computes responsibilities
//! `w_ik ∝ f_θ(φ_i)_k · π_k(a_i|s_i)` in log space, `K` gate reads and `K`
//! policy lookups per step. The M-step first trains the gate on the
//! responsibility-weighted likelihood, then recovers each reward
//! independently with weighted IAVI and refreshes the cached `Q` and
//! Boltzmann policies.
//!
//! The verifiers at the bottom enumerate all `K^n` intention sequences of a
//! tiny instance to check that the auxiliary objective decomposes into a gate
//! term and per-intention reward terms, and that the posterior factorizes
//! over steps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::{Trajectory, TrajectoryDataset};
use crate::gate::{
    Architecture, GateDims, GateTrainer, GatingNetwork, ObservationSequence, TrainConfig,
};
use crate::iavi::{
    accumulate_counts, empirical_policy, iavi_solve_with, IaviOptions, WeightedVisitCounts,
    DEFAULT_SMOOTHING,
};
use crate::linalg::{log_sum_exp, Matrix};
use crate::mdp::{
    boltzmann_policy, solve_q_from, PolicyTable, QTable, RewardTable, TabularMdp,
    DEFAULT_Q_MAX_ITERS, DEFAULT_Q_TOL,
};
use crate::{Error, Result};

/// Per-trajectory `n × K` posterior over intentions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Responsibilities(pub Vec<Matrix>);

impl Responsibilities {
    /// Every step fully assigned to intention `k`.
    pub fn concentrated(dataset: &TrajectoryDataset, num_intentions: usize, k: usize) -> Self {
        Self(
            dataset
                .trajectories
                .iter()
                .map(|t| {
                    let mut w = Matrix::zeros(t.len(), num_intentions);
                    for i in 0..t.len() {
                        w.set(i, k, 1.0);
                    }
                    w
                })
                .collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Matrix> {
        self.0.iter()
    }

    /// Largest `|Σ_k w_ik − 1|` over all steps.
    pub fn max_row_error(&self) -> f64 {
        self.0
            .iter()
            .flat_map(|w| w.iter_rows())
            .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// `K` reward tables with their Bellman-optimal `Q` and Boltzmann policies.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardSet {
    rewards: Vec<RewardTable>,
    q: Vec<QTable>,
    policies: Vec<PolicyTable>,
    log_policies: Vec<Matrix>,
    warm_values: Vec<Option<Vec<f64>>>,
}

fn log_softmax_rows(q: &QTable) -> Matrix {
    let mut out = q.0.clone();
    for s in 0..out.rows() {
        let row = out.row_mut(s);
        let lse = log_sum_exp(row);
        row.iter_mut().for_each(|x| *x -= lse);
    }
    out
}

impl RewardSet {
    pub fn new(mdp: &TabularMdp, rewards: Vec<RewardTable>) -> Result<Self> {
        let mut set = Self {
            rewards: Vec::new(),
            q: Vec::new(),
            policies: Vec::new(),
            log_policies: Vec::new(),
            warm_values: Vec::new(),
        };
        for r in rewards {
            let q = solve_q_from(mdp, &r, None, DEFAULT_Q_TOL, DEFAULT_Q_MAX_ITERS)?;
            set.push(r, q);
        }
        Ok(set)
    }

    /// Entries i.i.d. `U[−0.01, 0.01]`.
    pub fn random(mdp: &TabularMdp, num_intentions: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rewards = (0..num_intentions)
            .map(|_| {
                let mut r = RewardTable::zeros(mdp.num_states(), mdp.num_actions());
                for x in r.0.as_mut_slice() {
                    *x = rng.random_range(-0.01..=0.01);
                }
                r
            })
            .collect();
        Self::new(mdp, rewards)
    }

    fn push(&mut self, r: RewardTable, q: QTable) {
        self.policies.push(boltzmann_policy(&q));
        self.log_policies.push(log_softmax_rows(&q));
        self.q.push(q);
        self.rewards.push(r);
        self.warm_values.push(None);
    }

    /// Replaces reward `k`, warm-starting value iteration from `q_hint`.
    pub fn set(
        &mut self,
        mdp: &TabularMdp,
        k: usize,
        reward: RewardTable,
        q_hint: Option<&QTable>,
    ) -> Result<()> {
        let q = solve_q_from(
            mdp,
            &reward,
            Some(q_hint.unwrap_or(&self.q[k])),
            DEFAULT_Q_TOL,
            DEFAULT_Q_MAX_ITERS,
        )?;
        self.policies[k] = boltzmann_policy(&q);
        self.log_policies[k] = log_softmax_rows(&q);
        self.q[k] = q;
        self.rewards[k] = reward;
        Ok(())
    }

    pub fn num_intentions(&self) -> usize {
        self.rewards.len()
    }

    pub fn rewards(&self) -> &[RewardTable] {
        &self.rewards
    }

    pub fn reward(&self, k: usize) -> &RewardTable {
        &self.rewards[k]
    }

    pub fn q(&self, k: usize) -> &QTable {
        &self.q[k]
    }

    pub fn policy(&self, k: usize) -> &PolicyTable {
        &self.policies[k]
    }

    /// `log π_k(a|s)`, computed as a log-softmax of `Q`.
    pub fn log_policy(&self, k: usize) -> &Matrix {
        &self.log_policies[k]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmConfig {
    pub num_intentions: usize,
    pub architecture: Architecture,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub train: TrainConfig,
    /// Laplace smoothing of the empirical policies.
    pub smoothing: f64,
    pub iavi: IaviOptions,
    pub max_iters: usize,
    pub rel_tol: f64,
    pub patience: usize,
    /// When positive, the gate's smoothness penalties apply only during the
    /// first `penalty_iters` iterations. They pick a labeling that is
    /// consistent across states; dropping them afterwards removes their pull
    /// on the converged posteriors. Convergence is not declared before then.
    pub penalty_iters: usize,
    /// Feed `(s_i, a_{i−1})` to the gate instead of `(s_i, a_i)`.
    pub observation_lag: bool,
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        Self {
            num_intentions: 3,
            architecture: Architecture::Rnn,
            embed_dim: 128,
            hidden_dim: 128,
            train: TrainConfig {
                learning_rate: 1e-3,
                epochs: 1,
                batch_size: 0,
                lambda_l1: 2.22,
                lambda_kl: 1.48,
                ..TrainConfig::default()
            },
            smoothing: DEFAULT_SMOOTHING,
            iavi: IaviOptions::default(),
            max_iters: 180,
            rel_tol: 1e-5,
            patience: 5,
            penalty_iters: 0,
            observation_lag: false,
            seed: 42,
        }
    }
}

impl EmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.num_intentions == 0 {
            return bad("num_intentions must be at least 1");
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return bad("gate dimensions must be positive");
        }
        if !(self.smoothing > 0.0) {
            return bad("smoothing must be positive");
        }
        if !(self.rel_tol >= 0.0) {
            return bad("rel_tol must be non-negative");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        self.train.validate()
    }

    pub fn gate_dims(&self, num_states: usize, num_actions: usize) -> GateDims {
        GateDims {
            num_states,
            num_actions,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            num_intentions: self.num_intentions,
        }
    }
}

/// Per-iteration record, one line of the diagnostics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationDiagnostics {
    pub iteration: usize,
    /// Per-step train log-likelihood before this iteration's M-step.
    pub train_ll: f64,
    pub gate_loss: f64,
    pub max_reward_delta: f64,
    pub iavi_sweeps: usize,
    /// Smoothed reward objective before and after the reward updates.
    pub aux_before: f64,
    pub aux_after: f64,
}

#[derive(Debug, Clone)]
pub struct EmState {
    pub config: EmConfig,
    pub net: GatingNetwork,
    pub rewards: RewardSet,
    /// Completed M-steps.
    pub iteration: usize,
    pub train_ll: f64,
    pub history: Vec<IterationDiagnostics>,
    pub converged: bool,
    trainer: GateTrainer,
}

impl EmState {
    /// Seeded initialization: gate per its defaults, rewards `U[−0.01, 0.01]`.
    pub fn new(mdp: &TabularMdp, config: EmConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.gate_dims(mdp.num_states(), mdp.num_actions());
        let net = GatingNetwork::new(config.architecture, dims, config.seed);
        let rewards = RewardSet::random(mdp, config.num_intentions, config.seed.wrapping_add(1))?;
        Ok(Self::from_parts(config, net, rewards))
    }

    pub fn from_parts(config: EmConfig, net: GatingNetwork, rewards: RewardSet) -> Self {
        let trainer = GateTrainer::new(config.train.clone(), config.seed.wrapping_add(2));
        Self {
            config,
            net,
            rewards,
            iteration: 0,
            train_ll: f64::NAN,
            history: Vec::new(),
            converged: false,
            trainer,
        }
    }

    pub fn num_intentions(&self) -> usize {
        self.rewards.num_intentions()
    }

    pub fn observations(&self, dataset: &TrajectoryDataset) -> Vec<ObservationSequence> {
        observations(dataset, self.config.observation_lag)
    }

    /// Whether the smoothness penalties have been switched off.
    pub fn penalties_expired(&self) -> bool {
        self.config.penalty_iters > 0 && self.iteration >= self.config.penalty_iters
    }
}

pub fn observations(dataset: &TrajectoryDataset, lag: bool) -> Vec<ObservationSequence> {
    dataset
        .trajectories
        .iter()
        .map(|t| ObservationSequence::from_trajectory(t, lag))
        .collect()
}

/// E-step output.
#[derive(Debug, Clone)]
pub struct EStep {
    pub responsibilities: Responsibilities,
    /// Mean over steps of `log Σ_k f_θ(φ_i)_k π_k(a_i|s_i)`.
    pub log_likelihood: f64,
    pub total_steps: usize,
    /// Per-trajectory counts of policy-table reads and gate-output reads.
    pub policy_lookups: Vec<usize>,
    pub gate_reads: Vec<usize>,
}

fn check_dims(state: &EmState, dataset: &TrajectoryDataset) -> Result<()> {
    let d = &state.net.dims;
    if d.num_states != dataset.num_states || d.num_actions != dataset.num_actions {
        return Err(Error::DimensionMismatch(format!(
            "model is {}x{}, dataset is {}x{}",
            d.num_states, d.num_actions, dataset.num_states, dataset.num_actions
        )));
    }
    if d.num_intentions != state.rewards.num_intentions() {
        return Err(Error::DimensionMismatch(format!(
            "gate has {} outputs for {} rewards",
            d.num_intentions,
            state.rewards.num_intentions()
        )));
    }
    Ok(())
}

pub fn e_step(state: &EmState, dataset: &TrajectoryDataset) -> Result<EStep> {
    e_step_with(state, dataset, &state.observations(dataset))
}

/// E-step on precomputed gate observations.
pub fn e_step_with(
    state: &EmState,
    dataset: &TrajectoryDataset,
    obs: &[ObservationSequence],
) -> Result<EStep> {
    check_dims(state, dataset)?;
    let k = state.num_intentions();
    let mut resp = Vec::with_capacity(dataset.len());
    let mut policy_lookups = Vec::with_capacity(dataset.len());
    let mut gate_reads = Vec::with_capacity(dataset.len());
    let mut ll = 0.0;
    let mut steps = 0usize;
    let mut joint = vec![0.0; k];
    for (traj, seq) in dataset.trajectories.iter().zip(obs) {
        let log_gate = if k == 1 {
            Matrix::zeros(traj.len(), 1)
        } else {
            state.net.log_dists(seq)?
        };
        let mut w = Matrix::zeros(traj.len(), k);
        let (mut lookups, mut reads) = (0, 0);
        for (i, (s, a)) in traj.steps().enumerate() {
            for (j, slot) in joint.iter_mut().enumerate() {
                *slot = log_gate.get(i, j) + state.rewards.log_policy(j).get(s, a);
                lookups += 1;
                reads += 1;
            }
            let lse = log_sum_exp(&joint);
            assert!(lse.is_finite(), "E-step denominator underflow at step {i}");
            ll += lse;
            for (o, &l) in w.row_mut(i).iter_mut().zip(&joint) {
                *o = (l - lse).exp();
            }
        }
        steps += traj.len();
        policy_lookups.push(lookups);
        gate_reads.push(reads);
        resp.push(w);
    }
    Ok(EStep {
        responsibilities: Responsibilities(resp),
        log_likelihood: if steps > 0 { ll / steps as f64 } else { 0.0 },
        total_steps: steps,
        policy_lookups,
        gate_reads,
    })
}

/// Smoothed reward objective `Σ_{visited s} Σ_a (c[s][a] + ε) log π(a|s)`.
///
/// At visited states the IAVI output reproduces the smoothed empirical
/// policy, which maximizes this per state, so a reward M-step never
/// decreases it.
pub fn reward_objective(counts: &WeightedVisitCounts, log_policy: &Matrix, smoothing: f64) -> f64 {
    let mut total = 0.0;
    for (s, &cs) in counts.state_totals().iter().enumerate() {
        if cs > 0.0 {
            for (c, lp) in counts.counts().row(s).iter().zip(log_policy.row(s)) {
                total += (c + smoothing) * lp;
            }
        }
    }
    total
}

/// Summary of one M-step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MStep {
    pub gate_loss: f64,
    pub max_reward_delta: f64,
    pub iavi_sweeps: usize,
    pub aux_before: f64,
    pub aux_after: f64,
}

pub fn m_step(
    state: &mut EmState,
    mdp: &TabularMdp,
    dataset: &TrajectoryDataset,
    responsibilities: &Responsibilities,
) -> Result<MStep> {
    let obs = state.observations(dataset);
    m_step_with(state, mdp, dataset, &obs, responsibilities)
}

/// Gate update, then `K` independent reward solves.
pub fn m_step_with(
    state: &mut EmState,
    mdp: &TabularMdp,
    dataset: &TrajectoryDataset,
    obs: &[ObservationSequence],
    responsibilities: &Responsibilities,
) -> Result<MStep> {
    check_dims(state, dataset)?;
    let k_total = state.num_intentions();
    let mut report = MStep::default();

    // With one intention the gate output is identically 1 and every gradient vanishes.
    if k_total > 1 {
        let batch: Vec<_> = obs.iter().zip(responsibilities.iter()).collect();
        // Config edits between iterations take effect; optimizer state and
        // the shuffling stream carry over.
        let mut train = state.config.train.clone();
        if state.penalties_expired() {
            train.lambda_l1 = 0.0;
            train.lambda_kl = 0.0;
        }
        state.trainer.config = train;
        report.gate_loss = state.trainer.train_step(&mut state.net, &batch)?;
    }

    let smoothing = state.config.smoothing;
    let solved: Vec<Result<_>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..k_total)
            .map(|k| {
                let rewards = &state.rewards;
                let opts = &state.config.iavi;
                scope.spawn(move || -> Result<_> {
                    let counts = accumulate_counts(dataset, responsibilities, k)?;
                    let pihat = empirical_policy(&counts, smoothing);
                    let warm = rewards.warm_values[k].as_deref();
                    let sol = iavi_solve_with(mdp, &pihat, opts, warm)?;
                    Ok((counts, sol))
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("reward solver thread panicked"))
            .collect()
    });

    for (k, res) in solved.into_iter().enumerate() {
        let (counts, sol) = res.map_err(|e| e.for_intention(k))?;
        report.aux_before += reward_objective(&counts, state.rewards.log_policy(k), smoothing);
        report.max_reward_delta = report
            .max_reward_delta
            .max(sol.reward.max_abs_diff(state.rewards.reward(k)));
        report.iavi_sweeps = report.iavi_sweeps.max(sol.sweeps);
        // Q = r + γ T V from the solver's value iterate is already near the fixed point.
        let mut hint = vec![0.0; mdp.num_states() * mdp.num_actions()];
        mdp.expected_next(&sol.values, &mut hint);
        for (h, r) in hint.iter_mut().zip(sol.reward.0.as_slice()) {
            *h = r + mdp.discount() * *h;
        }
        let hint = QTable(Matrix::from_vec(mdp.num_states(), mdp.num_actions(), hint));
        state
            .rewards
            .set(mdp, k, sol.reward, Some(&hint))
            .map_err(|e| e.for_intention(k))?;
        state.rewards.warm_values[k] = Some(sol.values);
        report.aux_after += reward_objective(&counts, state.rewards.log_policy(k), smoothing);
    }
    state.iteration += 1;
    Ok(report)
}

/// Runs EM from a fresh seeded initialization.
pub fn run_em(mdp: &TabularMdp, dataset: &TrajectoryDataset, config: &EmConfig) -> Result<EmState> {
    let mut state = EmState::new(mdp, config.clone())?;
    run_em_from(&mut state, mdp, dataset, |_| {})?;
    Ok(state)
}

/// Continues EM from `state`, calling `observe` after every iteration.
///
/// Stops once the relative change of the train log-likelihood stays below
/// `rel_tol` for `patience` consecutive iterations, or after `max_iters`
/// M-steps. Ends with a final E-step so `train_ll` matches the returned
/// parameters.
pub fn run_em_from(
    state: &mut EmState,
    mdp: &TabularMdp,
    dataset: &TrajectoryDataset,
    mut observe: impl FnMut(&IterationDiagnostics),
) -> Result<()> {
    state.config.validate()?;
    if mdp.num_states() != dataset.num_states || mdp.num_actions() != dataset.num_actions {
        return Err(Error::DimensionMismatch(format!(
            "MDP is {}x{}, dataset is {}x{}",
            mdp.num_states(),
            mdp.num_actions(),
            dataset.num_states,
            dataset.num_actions
        )));
    }
    dataset.validate()?;
    let obs = state.observations(dataset);
    let mut prev_ll: Option<f64> = state.history.last().map(|h| h.train_ll);
    let mut calm = 0usize;
    state.converged = false;

    while state.iteration < state.config.max_iters {
        let e = e_step_with(state, dataset, &obs)?;
        let ll = e.log_likelihood;
        if let Some(p) = prev_ll {
            if ll < p - 1e-6 {
                log::warn!(
                    "train log-likelihood decreased at iteration {}: {p:.6} -> {ll:.6}",
                    state.iteration
                );
            }
            let rel = (ll - p).abs() / p.abs().max(f64::MIN_POSITIVE);
            let settled = state.config.penalty_iters == 0 || state.penalties_expired();
            calm = if settled && rel < state.config.rel_tol { calm + 1 } else { 0 };
            if calm >= state.config.patience {
                state.converged = true;
                state.train_ll = ll;
                return Ok(());
            }
        }
        prev_ll = Some(ll);
        let m = m_step_with(state, mdp, dataset, &obs, &e.responsibilities)?;
        let diag = IterationDiagnostics {
            iteration: state.iteration,
            train_ll: ll,
            gate_loss: m.gate_loss,
            max_reward_delta: m.max_reward_delta,
            iavi_sweeps: m.iavi_sweeps,
            aux_before: m.aux_before,
            aux_after: m.aux_after,
        };
        log::debug!(
            "iteration {} ll {:.6} gate {:.4} dr {:.3e}",
            diag.iteration,
            diag.train_ll,
            diag.gate_loss,
            diag.max_reward_delta
        );
        observe(&diag);
        state.history.push(diag);
    }
    state.train_ll = e_step_with(state, dataset, &obs)?.log_likelihood;
    Ok(())
}

/// Per-step mixture log-likelihood of `dataset` under the current parameters.
pub fn log_likelihood(state: &EmState, dataset: &TrajectoryDataset) -> Result<f64> {
    Ok(e_step(state, dataset)?.log_likelihood)
}

const MAX_ENUMERATION: usize = 1000;

fn enumeration_size(k: usize, n: usize) -> Result<usize> {
    let mut total: usize = 1;
    for _ in 0..n {
        total = total.saturating_mul(k);
        if total > MAX_ENUMERATION {
            return Err(Error::InstanceTooLarge(format!(
                "K^n = {k}^{n} exceeds {MAX_ENUMERATION}"
            )));
        }
    }
    Ok(total)
}

/// Calls `f` with every intention sequence in `{0..k}^n`.
fn for_each_sequence(k: usize, n: usize, mut f: impl FnMut(&[usize])) {
    let mut z = vec![0usize; n];
    loop {
        f(&z);
        let mut i = 0;
        loop {
            if i == n {
                return;
            }
            z[i] += 1;
            if z[i] < k {
                break;
            }
            z[i] = 0;
            i += 1;
        }
    }
}

/// `log f_θ(φ_i)_k` and `log π_k(a_i|s_i)` for one trajectory, both `n × K`.
fn step_log_terms(state: &EmState, traj: &Trajectory) -> Result<(Matrix, Matrix)> {
    let k = state.num_intentions();
    let seq = ObservationSequence::from_trajectory(traj, state.config.observation_lag);
    let log_gate = state.net.log_dists(&seq)?;
    let mut log_pi = Matrix::zeros(traj.len(), k);
    for (i, (s, a)) in traj.steps().enumerate() {
        for j in 0..k {
            log_pi.set(i, j, state.rewards.log_policy(j).get(s, a));
        }
    }
    Ok((log_gate, log_pi))
}

fn single_trajectory(state: &EmState, traj: &Trajectory) -> TrajectoryDataset {
    TrajectoryDataset::new(
        state.net.dims.num_states,
        state.net.dims.num_actions,
        vec![traj.clone()],
    )
}

/// Largest gap between the auxiliary objective computed by enumerating all
/// `K^n` intention sequences and its decomposition into the gate term plus
/// the per-intention reward terms, for old parameters `old` and new
/// parameters `new`.
pub fn decomposition_gap(old: &EmState, new: &EmState, traj: &Trajectory) -> Result<f64> {
    let k = old.num_intentions();
    let n = traj.len();
    enumeration_size(k, n)?;
    let w = e_step(old, &single_trajectory(old, traj))?.responsibilities.0.remove(0);
    let (log_gate, log_pi) = step_log_terms(new, traj)?;

    let mut brute = 0.0;
    for_each_sequence(k, n, |z| {
        let mut prob = 1.0;
        let mut log_joint = 0.0;
        for (i, &zi) in z.iter().enumerate() {
            prob *= w.get(i, zi);
            log_joint += log_gate.get(i, zi) + log_pi.get(i, zi);
        }
        brute += prob * log_joint;
    });

    let mut gate_term = 0.0;
    for i in 0..n {
        for j in 0..k {
            gate_term += w.get(i, j) * log_gate.get(i, j);
        }
    }
    let mut reward_term = 0.0;
    for j in 0..k {
        for i in 0..n {
            reward_term += w.get(i, j) * log_pi.get(i, j);
        }
    }
    Ok((brute - (gate_term + reward_term)).abs())
}

/// A random model on `mdp`: gate parameters `U[−1, 1]`, rewards `U[−1, 1]`.
pub fn random_state(
    mdp: &TabularMdp,
    num_intentions: usize,
    architecture: Architecture,
    seed: u64,
) -> Result<EmState> {
    let config = EmConfig {
        num_intentions,
        architecture,
        embed_dim: 4,
        hidden_dim: 4,
        seed,
        ..EmConfig::default()
    };
    let dims = config.gate_dims(mdp.num_states(), mdp.num_actions());
    let net = GatingNetwork::random(architecture, dims, seed, 1.0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let rewards = (0..num_intentions)
        .map(|_| {
            let mut r = RewardTable::zeros(mdp.num_states(), mdp.num_actions());
            for x in r.0.as_mut_slice() {
                *x = rng.random_range(-1.0..=1.0);
            }
            r
        })
        .collect();
    Ok(EmState::from_parts(
        config,
        net,
        RewardSet::new(mdp, rewards)?,
    ))
}

/// Max decomposition gap over `pairs` random `(Θ, Θ⁺)` pairs on `traj`.
pub fn verify_decomposition(
    mdp: &TabularMdp,
    traj: &Trajectory,
    num_intentions: usize,
    pairs: usize,
    seed: u64,
) -> Result<f64> {
    enumeration_size(num_intentions, traj.len())?;
    let mut worst: f64 = 0.0;
    for p in 0..pairs as u64 {
        let old = random_state(mdp, num_intentions, Architecture::Rnn, seed.wrapping_add(2 * p))?;
        let new = random_state(
            mdp,
            num_intentions,
            Architecture::Rnn,
            seed.wrapping_add(2 * p + 1),
        )?;
        worst = worst.max(decomposition_gap(&old, &new, traj)?);
    }
    Ok(worst)
}

/// Largest gap between posterior marginals obtained by enumerating the joint
/// over all intention sequences and the per-step responsibilities.
pub fn verify_posterior_factorization(state: &EmState, traj: &Trajectory) -> Result<f64> {
    let k = state.num_intentions();
    let n = traj.len();
    let total = enumeration_size(k, n)?;
    let (log_gate, log_pi) = step_log_terms(state, traj)?;

    let mut log_joint = Vec::with_capacity(total);
    let mut sequences = Vec::with_capacity(total);
    for_each_sequence(k, n, |z| {
        let l: f64 = z
            .iter()
            .enumerate()
            .map(|(i, &zi)| log_gate.get(i, zi) + log_pi.get(i, zi))
            .sum();
        log_joint.push(l);
        sequences.push(z.to_vec());
    });
    let norm = log_sum_exp(&log_joint);
    let mut marginals = Matrix::zeros(n, k);
    for (z, l) in sequences.iter().zip(&log_joint) {
        let p = (l - norm).exp();
        for (i, &zi) in z.iter().enumerate() {
            marginals.set(i, zi, marginals.get(i, zi) + p);
        }
    }
    let w = e_step(state, &single_trajectory(state, traj))?
        .responsibilities
        .0
        .remove(0);
    Ok(marginals.max_abs_diff(&w))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::iavi::iavi_solve;
    use proptest::prelude::*;
    use rand::Rng;

    fn chain_mdp(gamma: f64) -> TabularMdp {
        // 4 states on a ring, action 0 stays, action 1 advances, action 2 goes back.
        let (ns, na) = (4, 3);
        let mut t = vec![0.0; ns * na * ns];
        for s in 0..ns {
            let targets = [s, (s + 1) % ns, (s + ns - 1) % ns];
            for (a, &s2) in targets.iter().enumerate() {
                t[(s * na + a) * ns + s2] += 0.8;
                t[(s * na + a) * ns + s] += 0.2;
            }
        }
        TabularMdp::from_dense(ns, na, gamma, &t).unwrap()
    }

    fn random_dataset(mdp: &TabularMdp, n_traj: usize, len: usize, seed: u64) -> TrajectoryDataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let trajs = (0..n_traj)
            .map(|_| {
                let states = (0..len).map(|_| rng.random_range(0..mdp.num_states())).collect();
                let actions = (0..len).map(|_| rng.random_range(0..mdp.num_actions())).collect();
                Trajectory::new(states, actions)
            })
            .collect();
        TrajectoryDataset::new(mdp.num_states(), mdp.num_actions(), trajs)
    }

    fn small_config(k: usize) -> EmConfig {
        EmConfig {
            num_intentions: k,
            embed_dim: 6,
            hidden_dim: 6,
            max_iters: 8,
            train: TrainConfig {
                learning_rate: 0.05,
                epochs: 2,
                lambda_l1: 0.5,
                lambda_kl: 0.5,
                ..TrainConfig::default()
            },
            seed: 3,
            ..EmConfig::default()
        }
    }

    #[test]
    fn single_intention_has_unit_responsibilities() {
        let mdp = chain_mdp(0.9);
        let data = random_dataset(&mdp, 3, 5, 1);
        let state = EmState::new(&mdp, small_config(1)).unwrap();
        let e = e_step(&state, &data).unwrap();
        for w in e.responsibilities.iter() {
            assert!(w.as_slice().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn uniform_gate_with_identical_rewards_splits_evenly() {
        let mdp = chain_mdp(0.9);
        let data = random_dataset(&mdp, 2, 4, 2);
        let cfg = small_config(2);
        let net = GatingNetwork::zeros(Architecture::Rnn, cfg.gate_dims(4, 3));
        let r = RewardTable::from_rows(&vec![vec![0.3, -0.1, 0.0]; 4]);
        let rewards = RewardSet::new(&mdp, vec![r.clone(), r]).unwrap();
        let state = EmState::from_parts(cfg, net, rewards);
        let e = e_step(&state, &data).unwrap();
        for w in e.responsibilities.iter() {
            assert!(w.as_slice().iter().all(|&x| (x - 0.5).abs() < 1e-15));
        }
    }

    #[test]
    fn posterior_matches_hand_computation() {
        // Gate (0.9, 0.1) and policies 0.2 / 0.8 at the observed pair.
        let (g, p1, p2) = (0.9f64, 0.2f64, 0.8f64);
        let mut joint = [g.ln() + p1.ln(), (1.0 - g).ln() + p2.ln()];
        let lse = log_sum_exp(&joint);
        joint.iter_mut().for_each(|x| *x = (*x - lse).exp());
        let oracle = [0.18 / 0.26, 0.08 / 0.26];
        assert!((joint[0] - oracle[0]).abs() < 1e-12);
        assert!((joint[1] - oracle[1]).abs() < 1e-12);

        // Same numbers through the E-step: one state, two actions, γ = 0.
        let mdp = TabularMdp::from_dense(1, 2, 0.0, &[1.0, 1.0]).unwrap();
        let cfg = EmConfig {
            num_intentions: 2,
            embed_dim: 1,
            hidden_dim: 1,
            ..EmConfig::default()
        };
        let mut net = GatingNetwork::zeros(Architecture::Rnn, cfg.gate_dims(1, 2));
        net.params.b_out = vec![(0.9f64 / 0.1).ln(), 0.0];
        // Boltzmann at γ = 0 is softmax(r): choose r so that π(a=0) is 0.2 and 0.8.
        let r1 = RewardTable::from_rows(&[vec![(0.2f64 / 0.8).ln(), 0.0]]);
        let r2 = RewardTable::from_rows(&[vec![(0.8f64 / 0.2).ln(), 0.0]]);
        let state = EmState::from_parts(cfg, net, RewardSet::new(&mdp, vec![r1, r2]).unwrap());
        let data = TrajectoryDataset::new(1, 2, vec![Trajectory::new(vec![0], vec![0])]);
        let w = e_step(&state, &data).unwrap().responsibilities.0.remove(0);
        assert!((w.get(0, 0) - oracle[0]).abs() < 1e-12);
        assert!((w.get(0, 1) - oracle[1]).abs() < 1e-12);
    }

    #[test]
    fn lookups_scale_as_n_times_k() {
        let mdp = chain_mdp(0.9);
        let data = random_dataset(&mdp, 4, 7, 5);
        for k in 1..=3 {
            let state = EmState::new(&mdp, small_config(k)).unwrap();
            let e = e_step(&state, &data).unwrap();
            for (t, &l) in data.trajectories.iter().zip(&e.policy_lookups) {
                assert_eq!(l, t.len() * k);
            }
        }
    }

    #[test]
    fn single_intention_em_matches_one_shot_iavi() {
        let mdp = chain_mdp(0.9);
        let data = random_dataset(&mdp, 6, 10, 8);
        let state = run_em(&mdp, &data, &small_config(1)).unwrap();
        let resp = Responsibilities::concentrated(&data, 1, 0);
        let counts = accumulate_counts(&data, &resp, 0).unwrap();
        let direct = iavi_solve(&mdp, &empirical_policy(&counts, DEFAULT_SMOOTHING), 1e-8, 5000)
            .unwrap();
        assert!(state.rewards.reward(0).max_abs_diff(&direct) <= 1e-6);
    }

    #[test]
    fn concentrated_responsibilities_leave_other_rewards_at_zero() {
        let mdp = chain_mdp(0.9);
        let data = random_dataset(&mdp, 5, 8, 9);
        let mut state = EmState::new(&mdp, small_config(3)).unwrap();
        let resp = Responsibilities::concentrated(&data, 3, 0);
        m_step(&mut state, &mdp, &data, &resp).unwrap();
        let counts = accumulate_counts(&data, &resp, 0).unwrap();
        let direct = iavi_solve(&mdp, &empirical_policy(&counts, DEFAULT_SMOOTHING), 1e-8, 5000)
            .unwrap();
        assert!(state.rewards.reward(0).max_abs_diff(&direct) <= 1e-6);
        for k in 1..3 {
            assert!(state.rewards.reward(k).0.as_slice().iter().all(|&r| r == 0.0));
        }
    }

    #[test]
    fn zero_epochs_keep_the_gate_bitwise() {
        let mdp = chain_mdp(0.9);
        let data = random_dataset(&mdp, 3, 6, 4);
        let mut cfg = small_config(2);
        cfg.train.epochs = 0;
        let mut state = EmState::new(&mdp, cfg).unwrap();
        let before = state.net.clone();
        let e = e_step(&state, &data).unwrap();
        m_step(&mut state, &mdp, &data, &e.responsibilities).unwrap();
        assert_eq!(state.net, before);
    }

    #[test]
    fn deterministic_expert_is_reproduced() {
        let mdp = chain_mdp(0.0);
        // Always action (s mod 3).
        let trajs = (0..5)
            .map(|i| {
                let states: Vec<usize> = (0..8).map(|t| (i + t) % 4).collect();
                let actions = states.iter().map(|s| s % 3).collect();
                Trajectory::new(states, actions)
            })
            .collect();
        let data = TrajectoryDataset::new(4, 3, trajs);
        let mut cfg = small_config(1);
        cfg.max_iters = 2;
        let state = run_em(&mdp, &data, &cfg).unwrap();
        for s in 0..4 {
            assert!(state.rewards.policy(0).get(s, s % 3) >= 0.99);
        }
    }

    #[test]
    fn symmetric_setup_keeps_rewards_identical() {
        let mdp = chain_mdp(0.9);
        let data = random_dataset(&mdp, 4, 6, 12);
        let mut cfg = small_config(2);
        cfg.train.learning_rate = 0.0;
        let net = GatingNetwork::zeros(Architecture::Rnn, cfg.gate_dims(4, 3));
        let r = RewardTable::zeros(4, 3);
        let rewards = RewardSet::new(&mdp, vec![r.clone(), r]).unwrap();
        let mut state = EmState::from_parts(cfg, net, rewards);
        run_em_from(&mut state, &mdp, &data, |_| {}).unwrap();
        assert!(state.rewards.reward(0).max_abs_diff(state.rewards.reward(1)) <= 1e-9);
    }

    #[test]
    fn runs_are_deterministic_and_improve_the_reward_objective() {
        let mdp = chain_mdp(0.9);
        let data = random_dataset(&mdp, 6, 10, 21);
        let a = run_em(&mdp, &data, &small_config(2)).unwrap();
        let b = run_em(&mdp, &data, &small_config(2)).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.net, b.net);
        for h in &a.history {
            assert!(h.aux_after >= h.aux_before - 1e-8, "{h:?}");
        }
    }

    #[test]
    fn max_iterations_are_honored() {
        let mdp = chain_mdp(0.9);
        let data = random_dataset(&mdp, 3, 6, 2);
        let mut cfg = small_config(2);
        cfg.max_iters = 3;
        cfg.rel_tol = 0.0;
        let state = run_em(&mdp, &data, &cfg).unwrap();
        assert_eq!(state.iteration, 3);
        assert_eq!(state.history.len(), 3);
    }

    #[test]
    fn decomposition_is_exact_on_tiny_instances() {
        let mdp = chain_mdp(0.9);
        let one = Trajectory::new(vec![2], vec![1]);
        assert!(verify_decomposition(&mdp, &one, 2, 10, 0).unwrap() <= 1e-12);
        let four = Trajectory::new(vec![0, 1, 2, 3], vec![1, 1, 0, 2]);
        assert!(verify_decomposition(&mdp, &four, 2, 10, 1).unwrap() <= 1e-10);
        let six = Trajectory::new(vec![0, 1, 2, 3, 0, 1], vec![1, 1, 0, 2, 2, 1]);
        assert!(verify_decomposition(&mdp, &six, 3, 10, 2).unwrap() <= 1e-10);
    }

    #[test]
    fn posterior_factorizes_over_steps() {
        let mdp = chain_mdp(0.9);
        let s1 = random_state(&mdp, 1, Architecture::Rnn, 4).unwrap();
        let t3 = Trajectory::new(vec![0, 1, 2], vec![1, 1, 0]);
        assert_eq!(verify_posterior_factorization(&s1, &t3).unwrap(), 0.0);
        let s2 = random_state(&mdp, 2, Architecture::Rnn, 5).unwrap();
        assert!(verify_posterior_factorization(&s2, &t3).unwrap() <= 1e-12);
        let s3 = random_state(&mdp, 3, Architecture::Lstm, 6).unwrap();
        let t5 = Trajectory::new(vec![0, 1, 2, 3, 0], vec![1, 1, 0, 2, 0]);
        assert!(verify_posterior_factorization(&s3, &t5).unwrap() <= 1e-12);
    }

    #[test]
    fn oversized_enumeration_is_refused() {
        let mdp = chain_mdp(0.9);
        let long = Trajectory::new(vec![0; 11], vec![0; 11]);
        assert!(matches!(
            verify_decomposition(&mdp, &long, 2, 1, 0),
            Err(Error::InstanceTooLarge(_))
        ));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn responsibilities_are_row_normalized(seed in any::<u64>(), k in 1usize..4) {
            let mdp = chain_mdp(0.9);
            let data = random_dataset(&mdp, 3, 6, seed);
            let state = random_state(&mdp, k, Architecture::Rnn, seed).unwrap();
            let e = e_step(&state, &data).unwrap();
            prop_assert!(e.responsibilities.max_row_error() <= 1e-9);
            for w in e.responsibilities.iter() {
                prop_assert!(w.as_slice().iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }
}
