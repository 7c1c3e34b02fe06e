//! Responsibility-weighted NLL with L1 and KL temporal smoothness.
//!
//! For one sequence with responsibilities `w` (`n × K`) and gate outputs `p`:
//!
//! ```text
//! L = −Σ_t Σ_k w_tk log p_tk
//!     + λ_l1 Σ_{t≥1} Σ_k w_tk |p_tk − p_{t−1,k}|
//!     + λ_kl Σ_{t≥1} KL(p_{t−1} ‖ p_t)
//! ```
//!
//! Gradients are accumulated with respect to `log p`, then mapped to logits
//! through `dz = dlogp − p · Σ dlogp`.

use super::{GateParams, GatingNetwork, ObservationSequence};
use crate::linalg::Matrix;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Penalties {
    pub l1: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossBreakdown {
    pub total: f64,
    pub nll: f64,
    pub l1: f64,
    pub kl: f64,
}

impl LossBreakdown {
    fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.nll += o.nll;
        self.l1 += o.l1;
        self.kl += o.kl;
    }

    fn scale(&mut self, a: f64) {
        self.total *= a;
        self.nll *= a;
        self.l1 *= a;
        self.kl *= a;
    }
}

/// Loss of one sequence. When `grads` is given, parameter gradients are
/// added to it.
pub fn sequence_loss(
    net: &GatingNetwork,
    seq: &ObservationSequence,
    weights: &Matrix,
    pen: Penalties,
    grads: Option<&mut GateParams>,
) -> Result<LossBreakdown> {
    let n = seq.len();
    let k = net.dims.num_intentions;
    if weights.shape() != (n, k) {
        return Err(Error::DimensionMismatch(format!(
            "weights are {:?}, expected ({n}, {k})",
            weights.shape()
        )));
    }
    let trace = net.trace(seq)?;
    let p = &trace.probs;
    let lp = &trace.log_probs;

    let mut out = LossBreakdown::default();
    let want_grad = grads.is_some();
    let mut dlp = Matrix::zeros(if want_grad { n } else { 0 }, k);

    for t in 0..n {
        let (wt, pt, lpt) = (weights.row(t), p.row(t), lp.row(t));
        for j in 0..k {
            out.nll -= wt[j] * lpt[j];
        }
        if want_grad {
            let row = dlp.row_mut(t);
            for j in 0..k {
                row[j] -= wt[j];
            }
        }
        if t == 0 {
            continue;
        }
        let (pp, lpp) = (p.row(t - 1), lp.row(t - 1));
        for j in 0..k {
            let diff = pt[j] - pp[j];
            out.l1 += wt[j] * diff.abs();
            out.kl += pp[j] * (lpp[j] - lpt[j]);
        }
        if want_grad {
            for j in 0..k {
                let sgn = sign(pt[j] - pp[j]);
                let g = pen.l1 * wt[j] * sgn;
                // dp → dlogp through p = exp(logp)
                dlp.row_mut(t)[j] += g * pt[j] - pen.kl * pp[j];
                dlp.row_mut(t - 1)[j] += -g * pp[j] + pen.kl * pp[j] * (lpp[j] - lpt[j] + 1.0);
            }
        }
    }
    out.total = out.nll + pen.l1 * out.l1 + pen.kl * out.kl;
    if !out.total.is_finite() {
        return Err(Error::NumericalFault {
            step: 0,
            what: format!("non-finite gate loss {}", out.total),
        });
    }

    if let Some(grads) = grads {
        let mut dz = dlp;
        for t in 0..n {
            let pt = p.row(t);
            let row = dz.row_mut(t);
            let s: f64 = row.iter().sum();
            for j in 0..k {
                row[j] -= pt[j] * s;
            }
        }
        net.backprop(seq, &trace, &dz, grads);
    }
    Ok(out)
}

#[inline]
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Loss and gradient of one sequence with the given penalty weights.
pub fn loss(
    net: &GatingNetwork,
    seq: &ObservationSequence,
    weights: &Matrix,
    lambda_l1: f64,
    lambda_kl: f64,
) -> Result<(f64, GateParams)> {
    let mut grads = GateParams::zeros(net.arch, &net.dims);
    let pen = Penalties {
        l1: lambda_l1,
        kl: lambda_kl,
    };
    let l = sequence_loss(net, seq, weights, pen, Some(&mut grads))?;
    Ok((l.total, grads))
}

/// Mean loss and mean gradient over a batch of sequences.
pub fn batch_loss(
    net: &GatingNetwork,
    batch: &[(&ObservationSequence, &Matrix)],
    pen: Penalties,
) -> Result<(LossBreakdown, GateParams)> {
    let mut grads = GateParams::zeros(net.arch, &net.dims);
    let mut acc = LossBreakdown::default();
    for &(seq, w) in batch {
        acc.add(&sequence_loss(net, seq, w, pen, Some(&mut grads))?);
    }
    if !batch.is_empty() {
        let inv = 1.0 / batch.len() as f64;
        acc.scale(inv);
        grads.scale(inv);
    }
    Ok((acc, grads))
}

/// Largest relative error between the analytic gradient and the
/// fourth-order central difference with step `h`, over every parameter.
/// The L1 term has kinks where consecutive outputs tie, so the caller should
/// pick nets whose consecutive outputs differ by comfortably more than `2h`
/// times the output sensitivity; [`min_output_gap`] reports the margin.
pub fn gradient_check(
    net: &GatingNetwork,
    seq: &ObservationSequence,
    weights: &Matrix,
    pen: Penalties,
    h: f64,
) -> Result<f64> {
    let mut grads = GateParams::zeros(net.arch, &net.dims);
    sequence_loss(net, seq, weights, pen, Some(&mut grads))?;
    let mut probe = net.clone();
    let mut worst: f64 = 0.0;
    for i in 0..net.num_params() {
        let x = net.params.get_flat(i);
        let mut at = |dx: f64| -> Result<f64> {
            probe.params.set_flat(i, x + dx);
            Ok(sequence_loss(&probe, seq, weights, pen, None)?.total)
        };
        let fd = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
        probe.params.set_flat(i, x);
        let an = grads.get_flat(i);
        // The floor keeps exactly-zero gradients (unused embedding rows)
        // from dividing zero by zero.
        let rel = (fd - an).abs() / (fd.abs() + an.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

/// Smallest `|p_tk − p_{t−1,k}|` over the sequence.
pub fn min_output_gap(net: &GatingNetwork, seq: &ObservationSequence) -> Result<f64> {
    let p = net.forward(seq)?.dists;
    let mut m = f64::INFINITY;
    for t in 1..p.rows() {
        for j in 0..p.cols() {
            m = m.min((p.get(t, j) - p.get(t - 1, j)).abs());
        }
    }
    Ok(m)
}
