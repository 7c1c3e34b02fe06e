//! Gradient-descent training of the gate for one M-step.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{batch_loss, Penalties};
use super::{GateParams, GatingNetwork, ObservationSequence};
use crate::linalg::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    /// Sequences per update; 0 means the whole batch.
    pub batch_size: usize,
    pub lambda_l1: f64,
    pub lambda_kl: f64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            epochs: 1,
            batch_size: 0,
            lambda_l1: 0.0,
            lambda_kl: 0.0,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "learning_rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if self.lambda_l1 < 0.0 || self.lambda_kl < 0.0 {
            return Err(Error::InvalidConfig("penalty weights must be non-negative".into()));
        }
        Ok(())
    }

    fn penalties(&self) -> Penalties {
        Penalties {
            l1: self.lambda_l1,
            kl: self.lambda_kl,
        }
    }
}

#[derive(Debug, Clone)]
struct Adam {
    m: GateParams,
    v: GateParams,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Stateful trainer: keeps the shuffling RNG and optimizer moments across
/// M-steps.
#[derive(Debug, Clone)]
pub struct GateTrainer {
    pub config: TrainConfig,
    rng: ChaCha8Rng,
    adam: Option<Adam>,
}

impl GateTrainer {
    pub fn new(config: TrainConfig, seed: u64) -> Self {
        Self {
            config,
            rng: ChaCha8Rng::seed_from_u64(seed),
            adam: None,
        }
    }

    /// Runs `epochs` passes over `batch` and returns the mean loss of the
    /// final epoch, measured before each update. With zero epochs the
    /// network is untouched and the current loss is returned.
    pub fn train_step(
        &mut self,
        net: &mut GatingNetwork,
        batch: &[(&ObservationSequence, &Matrix)],
    ) -> Result<f64> {
        self.config.validate()?;
        if batch.is_empty() {
            return Ok(0.0);
        }
        let pen = self.config.penalties();
        let chunk = match self.config.batch_size {
            0 => batch.len(),
            b => b.min(batch.len()),
        };
        if self.config.epochs == 0 {
            return Ok(batch_loss(net, batch, pen)?.0.total);
        }
        let mut order: Vec<usize> = (0..batch.len()).collect();
        let mut last = 0.0;
        for _ in 0..self.config.epochs {
            if chunk < batch.len() {
                order.shuffle(&mut self.rng);
            }
            let mut epoch_loss = 0.0;
            for idx in order.chunks(chunk) {
                let mb: Vec<_> = idx.iter().map(|&i| batch[i]).collect();
                let (l, grads) = batch_loss(net, &mb, pen)?;
                if !grads.is_finite() {
                    return Err(Error::NumericalFault {
                        step: 0,
                        what: "non-finite gate gradient".into(),
                    });
                }
                epoch_loss += l.total * mb.len() as f64;
                self.apply(net, &grads);
            }
            last = epoch_loss / batch.len() as f64;
        }
        if !net.params.is_finite() {
            return Err(Error::NumericalFault {
                step: 0,
                what: "gate parameters diverged".into(),
            });
        }
        Ok(last)
    }

    fn apply(&mut self, net: &mut GatingNetwork, grads: &GateParams) {
        let lr = self.config.learning_rate;
        if lr == 0.0 {
            return;
        }
        match self.config.optimizer {
            OptimizerKind::Sgd => net.params.add_scaled(-lr, grads),
            OptimizerKind::Adam => {
                let st = self.adam.get_or_insert_with(|| Adam {
                    m: GateParams::zeros(net.arch, &net.dims),
                    v: GateParams::zeros(net.arch, &net.dims),
                    t: 0,
                });
                st.t += 1;
                let c1 = 1.0 - BETA1.powi(st.t);
                let c2 = 1.0 - BETA2.powi(st.t);
                let params = net.params.tensors_mut();
                let ms = st.m.tensors_mut();
                let vs = st.v.tensors_mut();
                for (((p, m), v), g) in params.into_iter().zip(ms).zip(vs).zip(grads.tensors()) {
                    for i in 0..p.len() {
                        m[i] = BETA1 * m[i] + (1.0 - BETA1) * g[i];
                        v[i] = BETA2 * v[i] + (1.0 - BETA2) * g[i] * g[i];
                        p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + ADAM_EPS);
                    }
                }
            }
        }
    }
}

/// One-shot training call with a fresh trainer.
pub fn train_step(
    net: &mut GatingNetwork,
    batch: &[(&ObservationSequence, &Matrix)],
    config: &TrainConfig,
    seed: u64,
) -> Result<f64> {
    GateTrainer::new(config.clone(), seed).train_step(net, batch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gate::{Architecture, GateDims};

    fn setup() -> (GatingNetwork, Vec<ObservationSequence>, Vec<Matrix>) {
        let dims = GateDims {
            num_states: 4,
            num_actions: 2,
            embed_dim: 6,
            hidden_dim: 6,
            num_intentions: 2,
        };
        let net = GatingNetwork::new(Architecture::Rnn, dims, 5);
        let seqs = vec![
            ObservationSequence::from_pairs(&[(0, 0), (1, 0), (2, 1), (3, 1)]),
            ObservationSequence::from_pairs(&[(3, 1), (2, 1), (1, 0)]),
        ];
        let w = |rows: &[[f64; 2]]| {
            Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>())
        };
        let ws = vec![
            w(&[[0.9, 0.1], [0.8, 0.2], [0.2, 0.8], [0.1, 0.9]]),
            w(&[[0.1, 0.9], [0.3, 0.7], [0.9, 0.1]]),
        ];
        (net, seqs, ws)
    }

    #[test]
    fn zero_learning_rate_leaves_parameters_unchanged() {
        let (mut net, seqs, ws) = setup();
        let before = net.clone();
        let batch: Vec<_> = seqs.iter().zip(&ws).collect();
        for optimizer in [OptimizerKind::Sgd, OptimizerKind::Adam] {
            let cfg = TrainConfig {
                learning_rate: 0.0,
                epochs: 3,
                optimizer,
                ..Default::default()
            };
            train_step(&mut net, &batch, &cfg, 1).unwrap();
            assert_eq!(net, before);
        }
    }

    #[test]
    fn small_step_decreases_loss() {
        let (mut net, seqs, ws) = setup();
        let batch: Vec<_> = seqs.iter().zip(&ws).collect();
        let pen = Penalties { l1: 0.5, kl: 0.5 };
        let before = batch_loss(&net, &batch, pen).unwrap().0.total;
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            lambda_l1: 0.5,
            lambda_kl: 0.5,
            ..Default::default()
        };
        train_step(&mut net, &batch, &cfg, 1).unwrap();
        let after = batch_loss(&net, &batch, pen).unwrap().0.total;
        assert!(after < before, "{after} >= {before}");
    }

    #[test]
    fn training_fits_the_weights() {
        let (mut net, seqs, ws) = setup();
        let batch: Vec<_> = seqs.iter().zip(&ws).collect();
        let cfg = TrainConfig {
            learning_rate: 0.05,
            epochs: 300,
            optimizer: OptimizerKind::Adam,
            ..Default::default()
        };
        let first = train_step(&mut net.clone(), &batch, &TrainConfig { epochs: 1, ..cfg.clone() }, 0)
            .unwrap();
        let last = train_step(&mut net, &batch, &cfg, 0).unwrap();
        assert!(last < first);
        let p = net.forward(&seqs[0]).unwrap().dists;
        assert!(p.get(0, 0) > 0.5 && p.get(3, 1) > 0.5);
    }

    #[test]
    fn minibatch_training_is_seeded() {
        let (net, seqs, ws) = setup();
        let batch: Vec<_> = seqs.iter().zip(&ws).collect();
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 4,
            batch_size: 1,
            ..Default::default()
        };
        let mut a = net.clone();
        let mut b = net.clone();
        train_step(&mut a, &batch, &cfg, 7).unwrap();
        train_step(&mut b, &batch, &cfg, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_epochs_leave_parameters_unchanged() {
        let (mut net, seqs, ws) = setup();
        let before = net.clone();
        let batch: Vec<_> = seqs.iter().zip(&ws).collect();
        let cfg = TrainConfig {
            learning_rate: 0.5,
            epochs: 0,
            ..Default::default()
        };
        let l = train_step(&mut net, &batch, &cfg, 1).unwrap();
        assert!(l > 0.0);
        assert_eq!(net, before);
    }

    #[test]
    fn negative_learning_rate_is_rejected() {
        let (mut net, seqs, ws) = setup();
        let batch: Vec<_> = seqs.iter().zip(&ws).collect();
        let cfg = TrainConfig {
            learning_rate: -1.0,
            ..Default::default()
        };
        assert!(matches!(
            train_step(&mut net, &batch, &cfg, 0),
            Err(Error::InvalidConfig(_))
        ));
    }
}
