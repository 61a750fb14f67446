//! The expert pool and the task-specific merge
//! `theta_i = theta_pre + theta_delta * sum_m alpha_m z_m`.

use thiserror::Error;

use crate::backbone::BackboneSpec;
use crate::diffcore::{Tape, Var};
use crate::fewshot::{ce_loss_on_tape, kd_loss_on_tape, protonet_logits, query_logits_on_tape, Episode};
use crate::l0mask::{GateSample, HardConcreteMask, MaskError};
use crate::metaopt::{fit_mask, make_teacher, MaskFitConfig, MaskFitTrace, MetaOptError};
use crate::params::{ParamSet, ParamsError};

#[derive(Debug, Error)]
pub enum ExpertsError {
    #[error("expected {expected} experts, got {actual}")]
    CountMismatch { expected: usize, actual: usize },
    #[error("pool needs at least one expert")]
    NoExperts,
    #[error("tau {0} outside [0, 1]")]
    InvalidTau(f64),
    #[error("invalid merge weights: {0}")]
    InvalidWeights(String),
    #[error("negative Lagrange multiplier")]
    NegativeMultiplier,
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Frozen pre-trained parameters, one shared trainable modulation, and M masks.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertPool {
    pub theta_pre: ParamSet,
    pub theta_delta: ParamSet,
    pub masks: Vec<HardConcreteMask>,
    pub lambdas: Vec<f64>,
    pub tau: f64,
}

impl ExpertPool {
    pub fn new(
        theta_pre: ParamSet,
        theta_delta: ParamSet,
        masks: Vec<HardConcreteMask>,
        lambdas: Vec<f64>,
        tau: f64,
    ) -> Result<Self, ExpertsError> {
        let pool = Self {
            theta_pre,
            theta_delta,
            masks,
            lambdas,
            tau,
        };
        pool.validate()?;
        Ok(pool)
    }

    /// Zero modulation, zero multipliers.
    pub fn from_pretrained(theta_pre: ParamSet, masks: Vec<HardConcreteMask>, tau: f64) -> Result<Self, ExpertsError> {
        let m = masks.len();
        let delta = theta_pre.zeros_like();
        Self::new(theta_pre, delta, masks, vec![0.0; m], tau)
    }

    pub fn validate(&self) -> Result<(), ExpertsError> {
        if self.masks.is_empty() {
            return Err(ExpertsError::NoExperts);
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(ExpertsError::InvalidTau(self.tau));
        }
        if self.lambdas.len() != self.masks.len() {
            return Err(ExpertsError::CountMismatch {
                expected: self.masks.len(),
                actual: self.lambdas.len(),
            });
        }
        if self.lambdas.iter().any(|&l| l < 0.0) {
            return Err(ExpertsError::NegativeMultiplier);
        }
        if !self.theta_pre.same_specs(&self.theta_delta)
            || self.masks.iter().any(|m| !self.theta_pre.same_specs(&m.log_alpha))
        {
            return Err(ParamsError::SpecMismatch.into());
        }
        Ok(())
    }

    pub fn n_experts(&self) -> usize {
        self.masks.len()
    }

    pub fn deterministic_gates(&self) -> Vec<GateSample> {
        self.masks.iter().map(HardConcreteMask::deterministic_gate).collect()
    }
}

/// Normalized expert coefficients plus the activations they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct MergeWeights {
    pub alpha: Vec<f64>,
    pub raw: Vec<f64>,
}

impl MergeWeights {
    /// Divides by the sum; an all-zero activation vector stays all-zero.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self, ExpertsError> {
        if raw.iter().any(|&r| r < 0.0 || !r.is_finite()) {
            return Err(ExpertsError::InvalidWeights(format!("{raw:?}")));
        }
        let total: f64 = raw.iter().sum();
        let alpha = if total > 0.0 {
            raw.iter().map(|r| r / total).collect()
        } else {
            vec![0.0; raw.len()]
        };
        Ok(Self { alpha, raw })
    }

    pub fn is_zero(&self) -> bool {
        self.alpha.iter().all(|&a| a == 0.0)
    }
}

/// `theta_pre + theta_delta * sum_m alpha_m z_m`; all-zero weights return `theta_pre` unchanged.
pub fn merge(pool: &ExpertPool, weights: &MergeWeights, gates: &[GateSample]) -> Result<ParamSet, ExpertsError> {
    let m = pool.n_experts();
    if weights.alpha.len() != m || gates.len() != m {
        return Err(ExpertsError::CountMismatch {
            expected: m,
            actual: weights.alpha.len().min(gates.len()),
        });
    }
    if gates.iter().any(|g| !g.z.same_specs(&pool.theta_pre)) {
        return Err(ParamsError::SpecMismatch.into());
    }
    if weights.is_zero() {
        return Ok(pool.theta_pre.clone());
    }
    let mut combined = pool.theta_pre.zeros_like();
    for (a, g) in weights.alpha.iter().zip(gates) {
        combined = ParamSet::axpy(*a, &g.z, &combined)?;
    }
    let modulation = ParamSet::hadamard(&pool.theta_delta, &combined)?;
    Ok(ParamSet::axpy(1.0, &modulation, &pool.theta_pre)?)
}

/// Differentiable merge. `alpha` holds one scalar node per expert; `gates[m]`
/// holds one node per layer.
pub fn merge_on_tape<'t>(
    tape: &'t Tape,
    theta_pre: &ParamSet,
    theta_delta: &[Var<'t>],
    alpha: &[Var<'t>],
    gates: &[Vec<Var<'t>>],
) -> Vec<Var<'t>> {
    theta_pre
        .values()
        .iter()
        .enumerate()
        .map(|(l, pre)| {
            let mut combined = gates[0][l].mul_scalar(alpha[0]);
            for m in 1..alpha.len() {
                combined = combined.add(gates[m][l].mul_scalar(alpha[m]));
            }
            tape.constant(pre.clone()).add(theta_delta[l].mul(combined))
        })
        .collect()
}

/// Lower bound on the sparsity of a merged modulation when every one of `m`
/// masks has sparsity at least `tau`.
pub fn merged_sparsity_bound(m: usize, tau: f64) -> f64 {
    (1.0 - m as f64 * (1.0 - tau)).max(0.0)
}

/// Result of fitting a single domain mask on a fixed modulation.
#[derive(Clone, Debug)]
pub struct DomainMaskFit {
    pub mask: HardConcreteMask,
    pub trace: MaskFitTrace,
}

/// Fixes `theta_delta = theta_tuned - theta_pre` and trains one mask under the
/// sparsity constraint on the fitted domain's episodes.
pub fn fit_domain_mask(
    theta_pre: &ParamSet,
    theta_tuned: &ParamSet,
    backbone: &BackboneSpec,
    episodes: &(dyn Fn(usize) -> Episode + Sync),
    cfg: &MaskFitConfig,
) -> Result<DomainMaskFit, MetaOptError> {
    let delta = theta_tuned.sub(theta_pre)?;
    let (mask, trace) = fit_mask(theta_pre, &delta, cfg, |tape, step, merged| {
        let episode = episodes(step);
        let labels = episode.query_labels()?;
        let logits = query_logits_on_tape(tape, backbone, merged, &episode, cfg.metric)?;
        let ce = ce_loss_on_tape(logits, &labels);
        if cfg.beta_w >= 1.0 {
            return Ok(ce);
        }
        let current = ParamSet::from_vars(theta_pre.specs().clone(), merged)?;
        let teacher = make_teacher(&current, backbone, &episode, cfg.k_teacher, cfg.lr_teacher, cfg.metric)?;
        let teacher_logits = protonet_logits(&teacher, backbone, &episode, cfg.metric)?;
        let kd = kd_loss_on_tape(logits, &teacher_logits.0, cfg.kd_temp);
        Ok(ce.scale(cfg.beta_w).add(kd.scale(1.0 - cfg.beta_w)))
    })?;
    Ok(DomainMaskFit { mask, trace })
}
