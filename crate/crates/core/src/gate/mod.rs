//! Recurrent intention-gating network.
//!
//! Each step's observation `(s_t, a_t)` is embedded as
//! `x_t = E_s[s_t] + E_a[a_t]`, passed through a single recurrent layer
//! (vanilla `tanh` RNN or LSTM) and projected to `K` logits whose softmax is
//! the prior over intentions at that step. Forward pass, the smoothness-
//! regularized training loss and backpropagation through time are all
//! implemented here directly on `f64` buffers.

mod loss;
mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::env::Trajectory;
use crate::linalg::{log_sum_exp, Matrix};
use crate::{Error, Result};

pub use loss::{
    batch_loss, gradient_check, loss, min_output_gap, sequence_loss, LossBreakdown, Penalties,
};
pub use train::{train_step, GateTrainer, OptimizerKind, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    #[default]
    Rnn,
    Lstm,
}

impl Architecture {
    /// Number of stacked gate blocks in the recurrent weight matrices.
    fn blocks(self) -> usize {
        match self {
            Architecture::Rnn => 1,
            Architecture::Lstm => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateDims {
    pub num_states: usize,
    pub num_actions: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_intentions: usize,
}

/// Trainable parameters. Also used as the gradient container.
///
/// For the LSTM the recurrent blocks are stacked in the order
/// input, forget, candidate, output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GateParams {
    pub state_embed: Matrix,
    pub action_embed: Matrix,
    pub w_in: Matrix,
    pub w_rec: Matrix,
    pub b_rec: Vec<f64>,
    pub w_out: Matrix,
    pub b_out: Vec<f64>,
}

impl GateParams {
    pub fn zeros(arch: Architecture, dims: &GateDims) -> Self {
        let g = arch.blocks() * dims.hidden_dim;
        Self {
            state_embed: Matrix::zeros(dims.num_states, dims.embed_dim),
            action_embed: Matrix::zeros(dims.num_actions, dims.embed_dim),
            w_in: Matrix::zeros(g, dims.embed_dim),
            w_rec: Matrix::zeros(g, dims.hidden_dim),
            b_rec: vec![0.0; g],
            w_out: Matrix::zeros(dims.num_intentions, dims.hidden_dim),
            b_out: vec![0.0; dims.num_intentions],
        }
    }

    pub fn tensors(&self) -> [&[f64]; 7] {
        [
            self.state_embed.as_slice(),
            self.action_embed.as_slice(),
            self.w_in.as_slice(),
            self.w_rec.as_slice(),
            &self.b_rec,
            self.w_out.as_slice(),
            &self.b_out,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 7] {
        [
            self.state_embed.as_mut_slice(),
            self.action_embed.as_mut_slice(),
            self.w_in.as_mut_slice(),
            self.w_rec.as_mut_slice(),
            &mut self.b_rec,
            self.w_out.as_mut_slice(),
            &mut self.b_out,
        ]
    }

    pub fn len(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Flat read access across all tensors, in [`tensors`](Self::tensors) order.
    pub fn get_flat(&self, mut i: usize) -> f64 {
        for t in self.tensors() {
            if i < t.len() {
                return t[i];
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set_flat(&mut self, mut i: usize, v: f64) {
        for t in self.tensors_mut() {
            if i < t.len() {
                t[i] = v;
                return;
            }
            i -= t.len();
        }
        panic!("parameter index out of range");
    }

    pub fn fill(&mut self, v: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x = v);
        }
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &GateParams) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            crate::linalg::axpy(alpha, src, dst);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for t in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|t| t.iter().all(|x| x.is_finite()))
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

/// One gate input: the state and, unless lagged past the first step, the action.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Observation {
    pub state: usize,
    pub action: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObservationSequence {
    steps: Vec<Observation>,
}

impl ObservationSequence {
    pub fn new(steps: Vec<Observation>) -> Self {
        Self { steps }
    }

    pub fn from_pairs(pairs: &[(usize, usize)]) -> Self {
        Self::new(
            pairs
                .iter()
                .map(|&(state, action)| Observation {
                    state,
                    action: Some(action),
                })
                .collect(),
        )
    }

    /// `φ_t = (s_t, a_t)`, or `(s_t, a_{t−1})` when `lag` is set.
    pub fn from_trajectory(t: &Trajectory, lag: bool) -> Self {
        let steps = t
            .states
            .iter()
            .enumerate()
            .map(|(i, &state)| Observation {
                state,
                action: if lag {
                    i.checked_sub(1).map(|j| t.actions[j])
                } else {
                    Some(t.actions[i])
                },
            })
            .collect();
        Self { steps }
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn steps(&self) -> &[Observation] {
        &self.steps
    }

    pub fn steps_mut(&mut self) -> &mut [Observation] {
        &mut self.steps
    }
}

/// Per-step intention distributions and the hidden states that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GateOutput {
    /// `n × K`, rows on the simplex.
    pub dists: Matrix,
    /// `n × d'`.
    pub hiddens: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GatingNetwork {
    pub arch: Architecture,
    pub dims: GateDims,
    pub params: GateParams,
    pub seed: u64,
}

/// Forward-pass intermediates kept for backpropagation.
pub(crate) struct Trace {
    pub x: Matrix,
    pub h: Matrix,
    /// LSTM only: activated gates (`n × 4d'`), cell states and `tanh(c)`.
    pub gates: Matrix,
    pub c: Matrix,
    pub tanh_c: Matrix,
    pub probs: Matrix,
    pub log_probs: Matrix,
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl GatingNetwork {
    /// Seeded initialization: embeddings `U[−0.1, 0.1]`, recurrent and output
    /// weights `U[−1/√d', 1/√d']`, biases zero (LSTM forget bias one).
    pub fn new(arch: Architecture, dims: GateDims, seed: u64) -> Self {
        let mut params = GateParams::zeros(arch, &dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dims.hidden_dim as f64).sqrt();
        let mut fill = |t: &mut [f64], b: f64| {
            for x in t.iter_mut() {
                *x = rng.random_range(-b..=b);
            }
        };
        fill(params.state_embed.as_mut_slice(), 0.1);
        fill(params.action_embed.as_mut_slice(), 0.1);
        fill(params.w_in.as_mut_slice(), bound);
        fill(params.w_rec.as_mut_slice(), bound);
        fill(params.w_out.as_mut_slice(), bound);
        if arch == Architecture::Lstm {
            let h = dims.hidden_dim;
            params.b_rec[h..2 * h].iter_mut().for_each(|b| *b = 1.0);
        }
        Self {
            arch,
            dims,
            params,
            seed,
        }
    }

    /// All parameters zero: every output row is uniform.
    pub fn zeros(arch: Architecture, dims: GateDims) -> Self {
        Self {
            arch,
            dims,
            params: GateParams::zeros(arch, &dims),
            seed: 0,
        }
    }

    /// Every parameter (biases included) drawn from `U[−scale, scale]`.
    pub fn random(arch: Architecture, dims: GateDims, seed: u64, scale: f64) -> Self {
        let mut net = Self::zeros(arch, dims);
        net.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in net.params.tensors_mut() {
            for x in t.iter_mut() {
                *x = rng.random_range(-scale..=scale);
            }
        }
        net
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    /// Closed-form parameter count:
    /// `(|S|+|A|)d + B(d'd + d'² + d') + Kd' + K` with `B` gate blocks.
    pub fn expected_param_count(arch: Architecture, dims: &GateDims) -> usize {
        let GateDims {
            num_states: s,
            num_actions: a,
            embed_dim: d,
            hidden_dim: h,
            num_intentions: k,
        } = *dims;
        (s + a) * d + arch.blocks() * (h * d + h * h + h) + k * h + k
    }

    fn check(&self, seq: &ObservationSequence) -> Result<()> {
        for (t, o) in seq.steps.iter().enumerate() {
            if o.state >= self.dims.num_states || o.action.is_some_and(|a| a >= self.dims.num_actions)
            {
                return Err(Error::IndexOutOfRange(format!(
                    "observation {t}: {o:?} outside {}x{}",
                    self.dims.num_states, self.dims.num_actions
                )));
            }
        }
        Ok(())
    }

    pub fn forward(&self, seq: &ObservationSequence) -> Result<GateOutput> {
        let trace = self.trace(seq)?;
        Ok(GateOutput {
            dists: trace.probs,
            hiddens: trace.h,
        })
    }

    /// Per-step log-probabilities `log f_θ(φ_t)` (`n × K`).
    pub fn log_dists(&self, seq: &ObservationSequence) -> Result<Matrix> {
        Ok(self.trace(seq)?.log_probs)
    }

    pub(crate) fn trace(&self, seq: &ObservationSequence) -> Result<Trace> {
        self.check(seq)?;
        let n = seq.len();
        let GateDims {
            embed_dim: d,
            hidden_dim: hd,
            num_intentions: k,
            ..
        } = self.dims;
        let p = &self.params;
        let lstm = self.arch == Architecture::Lstm;
        let g = self.arch.blocks() * hd;

        let mut x = Matrix::zeros(n, d);
        let mut h = Matrix::zeros(n, hd);
        let (mut gates, mut c, mut tanh_c) = if lstm {
            (Matrix::zeros(n, g), Matrix::zeros(n, hd), Matrix::zeros(n, hd))
        } else {
            (Matrix::zeros(0, 0), Matrix::zeros(0, 0), Matrix::zeros(0, 0))
        };
        let mut probs = Matrix::zeros(n, k);
        let mut log_probs = Matrix::zeros(n, k);
        let mut pre = vec![0.0; g];
        let mut logits = vec![0.0; k];
        let zero_h = vec![0.0; hd];

        for t in 0..n {
            let obs = seq.steps[t];
            {
                let xt = x.row_mut(t);
                xt.copy_from_slice(p.state_embed.row(obs.state));
                if let Some(a) = obs.action {
                    crate::linalg::axpy(1.0, p.action_embed.row(a), xt);
                }
            }
            pre.copy_from_slice(&p.b_rec);
            p.w_in.matvec_add(x.row(t), &mut pre);
            if t > 0 {
                let (prev, _) = h.as_slice().split_at(t * hd);
                p.w_rec.matvec_add(&prev[(t - 1) * hd..], &mut pre);
            }
            if lstm {
                let c_prev: Vec<f64> = if t > 0 {
                    c.row(t - 1).to_vec()
                } else {
                    zero_h.clone()
                };
                let gt = gates.row_mut(t);
                for j in 0..hd {
                    gt[j] = sigmoid(pre[j]);
                    gt[hd + j] = sigmoid(pre[hd + j]);
                    gt[2 * hd + j] = pre[2 * hd + j].tanh();
                    gt[3 * hd + j] = sigmoid(pre[3 * hd + j]);
                }
                let gt = gates.row(t).to_vec();
                let ct = c.row_mut(t);
                for j in 0..hd {
                    ct[j] = gt[hd + j] * c_prev[j] + gt[j] * gt[2 * hd + j];
                }
                let ct = c.row(t).to_vec();
                let tc = tanh_c.row_mut(t);
                for j in 0..hd {
                    tc[j] = ct[j].tanh();
                }
                let tc = tanh_c.row(t).to_vec();
                let ht = h.row_mut(t);
                for j in 0..hd {
                    ht[j] = gt[3 * hd + j] * tc[j];
                }
            } else {
                let ht = h.row_mut(t);
                for (o, &v) in ht.iter_mut().zip(&pre) {
                    *o = v.tanh();
                }
            }
            logits.copy_from_slice(&p.b_out);
            p.w_out.matvec_add(h.row(t), &mut logits);
            let lse = log_sum_exp(&logits);
            if !lse.is_finite() {
                return Err(Error::NumericalFault {
                    step: t,
                    what: "non-finite gate logits".into(),
                });
            }
            let lp = log_probs.row_mut(t);
            for (o, &z) in lp.iter_mut().zip(&logits) {
                *o = z - lse;
            }
            let lp = log_probs.row(t).to_vec();
            for (o, l) in probs.row_mut(t).iter_mut().zip(lp) {
                *o = l.exp();
            }
        }
        Ok(Trace {
            x,
            h,
            gates,
            c,
            tanh_c,
            probs,
            log_probs,
        })
    }

    /// Accumulates parameter gradients into `grads` given `∂L/∂logits` (`n × K`).
    pub(crate) fn backprop(
        &self,
        seq: &ObservationSequence,
        trace: &Trace,
        dlogits: &Matrix,
        grads: &mut GateParams,
    ) {
        let n = seq.len();
        let hd = self.dims.hidden_dim;
        let p = &self.params;
        let lstm = self.arch == Architecture::Lstm;
        let g = self.arch.blocks() * hd;

        let mut dh_next = vec![0.0; hd];
        let mut dc_next = vec![0.0; hd];
        let mut dh = vec![0.0; hd];
        let mut dpre = vec![0.0; g];
        let mut dx = vec![0.0; self.dims.embed_dim];

        for t in (0..n).rev() {
            let dz = dlogits.row(t);
            grads.w_out.add_outer(dz, trace.h.row(t));
            crate::linalg::axpy(1.0, dz, &mut grads.b_out);
            dh.copy_from_slice(&dh_next);
            p.w_out.matvec_t_add(dz, &mut dh);

            if lstm {
                let gt = trace.gates.row(t);
                let tc = trace.tanh_c.row(t);
                for j in 0..hd {
                    let (i, f, cand, o) = (gt[j], gt[hd + j], gt[2 * hd + j], gt[3 * hd + j]);
                    let c_prev = if t > 0 { trace.c.get(t - 1, j) } else { 0.0 };
                    let d_o = dh[j] * tc[j];
                    let dc = dh[j] * o * (1.0 - tc[j] * tc[j]) + dc_next[j];
                    dpre[j] = dc * cand * i * (1.0 - i);
                    dpre[hd + j] = dc * c_prev * f * (1.0 - f);
                    dpre[2 * hd + j] = dc * i * (1.0 - cand * cand);
                    dpre[3 * hd + j] = d_o * o * (1.0 - o);
                    dc_next[j] = dc * f;
                }
            } else {
                let ht = trace.h.row(t);
                for j in 0..hd {
                    dpre[j] = dh[j] * (1.0 - ht[j] * ht[j]);
                }
            }

            grads.w_in.add_outer(&dpre, trace.x.row(t));
            crate::linalg::axpy(1.0, &dpre, &mut grads.b_rec);
            dh_next.iter_mut().for_each(|v| *v = 0.0);
            if t > 0 {
                grads.w_rec.add_outer(&dpre, trace.h.row(t - 1));
                p.w_rec.matvec_t_add(&dpre, &mut dh_next);
            }
            dx.iter_mut().for_each(|v| *v = 0.0);
            p.w_in.matvec_t_add(&dpre, &mut dx);
            let obs = seq.steps[t];
            crate::linalg::axpy(1.0, &dx, grads.state_embed.row_mut(obs.state));
            if let Some(a) = obs.action {
                crate::linalg::axpy(1.0, &dx, grads.action_embed.row_mut(a));
            }
        }
    }
}
