//! Loss combinators and the training loops.

mod train;

pub use train::{
    evaluate_encoder, prepare, pretrain_vqa_only, train, EpochRecord, Prepared, PretrainOutcome, PretrainRecord,
    TrainOutcome,
};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::numerics::DEFAULT_LR;

/// Floor applied to predicted probabilities inside [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Encoder frozen; only the LM learns.
    Fr,
    /// Encoder and LM trained jointly.
    Ra,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Combinator {
    Weighted { lambda: f64 },
    Uncertainty,
    Kldiv { beta: f64 },
}

impl Combinator {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Combinator::Weighted { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                contract(format!("lambda must be positive, got {lambda}"))
            }
            Combinator::Kldiv { beta } if !(beta >= 0.0 && beta.is_finite()) => {
                contract(format!("beta must be non-negative, got {beta}"))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in sweep output, e.g. `lambda=3`, `var`, `kldiv`.
    pub fn label(&self) -> String {
        match self {
            Combinator::Weighted { lambda } => format!("lambda={lambda}"),
            Combinator::Uncertainty => "var".into(),
            Combinator::Kldiv { .. } => "kldiv".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: Mode,
    pub combinator: Combinator,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm clip; non-positive disables clipping.
    pub clip_norm: f64,
    /// Blocks gradient flow from the answer loss, leaving only the rationale
    /// loss (and any KL term) to update the encoder.
    #[serde(default)]
    pub detach_answer_loss: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            mode: Mode::Ra,
            combinator: Combinator::Weighted { lambda: 1.0 },
            batch_size: 32,
            lr: DEFAULT_LR,
            epochs: 20,
            seed: 0,
            clip_norm: 1.0,
            detach_answer_loss: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.combinator.validate()?;
        if self.batch_size == 0 || self.epochs == 0 {
            return contract("batch_size and epochs must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return contract(format!("learning rate must be positive, got {}", self.lr));
        }
        Ok(())
    }
}

/// Loss parts for one batch or one epoch average.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    #[serde(rename = "L_A")]
    pub l_a: f64,
    #[serde(rename = "L_R")]
    pub l_r: f64,
    pub kl: Option<f64>,
    pub total: f64,
}

/// `λ·L_A + L_R`.
pub fn combine_weighted(l_a: f64, l_r: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return contract(format!("lambda must be positive, got {lambda}"));
    }
    Ok(lambda * l_a + l_r)
}

/// `exp(−s_A)·L_A + exp(−s_R)·L_R + s_A + s_R`.
pub fn combine_uncertainty(l_a: f64, l_r: f64, s_a: f64, s_r: f64) -> f64 {
    (-s_a).exp() * l_a + (-s_r).exp() * l_r + s_a + s_r
}

/// `KL(p_ref ‖ q_pred)` with `0·log(0/q) = 0` and `q` floored at [`KL_FLOOR`].
pub fn kl_divergence(p_ref: &[f64], q_pred: &[f64]) -> Result<f64> {
    if p_ref.len() != q_pred.len() || p_ref.is_empty() {
        return contract(format!("distributions of length {} and {}", p_ref.len(), q_pred.len()));
    }
    for (name, v) in [("reference", p_ref), ("prediction", q_pred)] {
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 || v.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return contract(format!("{name} is not a distribution (sum {s})"));
        }
    }
    let kl: f64 = p_ref
        .iter()
        .zip(q_pred)
        .filter(|(&p, _)| p > 0.0)
        .map(|(&p, &q)| p * (p / q.max(KL_FLOOR)).ln())
        .sum();
    Ok(kl.max(0.0))
}

/// `L_A + L_R + β·kl`.
pub fn combine_kldiv(l_a: f64, l_r: f64, kl: f64, beta: f64) -> Result<f64> {
    if !(beta >= 0.0) {
        return contract(format!("beta must be non-negative, got {beta}"));
    }
    Ok(l_a + l_r + beta * kl)
}

/// Applies `combinator` to scalar parts; uncertainty needs `(s_A, s_R)`.
pub fn combine(combinator: Combinator, l_a: f64, l_r: f64, kl: Option<f64>, s: Option<(f64, f64)>) -> Result<f64> {
    match combinator {
        Combinator::Weighted { lambda } => combine_weighted(l_a, l_r, lambda),
        Combinator::Uncertainty => {
            let (s_a, s_r) = s.unwrap_or((0.0, 0.0));
            Ok(combine_uncertainty(l_a, l_r, s_a, s_r))
        }
        Combinator::Kldiv { beta } => combine_kldiv(l_a, l_r, kl.unwrap_or(0.0), beta),
    }
}
