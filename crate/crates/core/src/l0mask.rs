//! Stretched hard-concrete masks.
//!
//! A gate is `z = clamp(sigmoid((logit(u) + log_alpha) / beta) * (zeta_s - gamma) + gamma, 0, 1)`
//! with `u ~ Uniform(eps, 1 - eps)`. The probability of a nonzero gate has the
//! closed form `sigmoid(log_alpha - beta * ln(-gamma / zeta_s))`.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::uniform_open;
use crate::diffcore::{sigmoid, Tape, Tensor, Var};
use crate::params::{ParamSet, Specs};
use crate::rng::Rng;

fn logit(u: f64) -> f64 {
    (u / (1.0 - u)).ln()
}

/// Noise is drawn from `(U_EPS, 1 - U_EPS)` to keep the logit finite.
pub const U_EPS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("invalid hard-concrete constants: beta={beta}, gamma={gamma}, zeta_s={zeta_s}")]
    InvalidConstants { beta: f64, gamma: f64, zeta_s: f64 },
    #[error("non-finite log_alpha")]
    NonFinite,
    #[error("mask shapes differ")]
    ShapeMismatch,
}

/// Temperature and stretch interval of the distribution.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardConcrete {
    pub beta: f64,
    pub gamma: f64,
    pub zeta_s: f64,
}

impl Default for HardConcrete {
    fn default() -> Self {
        Self {
            beta: 2.0 / 3.0,
            gamma: -0.1,
            zeta_s: 1.1,
        }
    }
}

impl HardConcrete {
    pub fn validate(&self) -> Result<(), MaskError> {
        let ok = self.gamma < 0.0 && self.zeta_s > 1.0 && self.beta > 0.0 && self.beta <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(MaskError::InvalidConstants {
                beta: self.beta,
                gamma: self.gamma,
                zeta_s: self.zeta_s,
            })
        }
    }

    /// `beta * ln(-gamma / zeta_s)`, the log-alpha offset of the CDF at zero.
    pub fn cdf_shift(&self) -> f64 {
        self.beta * (-self.gamma / self.zeta_s).ln()
    }

    /// log_alpha at which `prob_nonzero` equals `density`.
    pub fn log_alpha_for_density(&self, density: f64) -> f64 {
        (density / (1.0 - density)).ln() + self.cdf_shift()
    }

    pub fn prob_nonzero(&self, log_alpha: f64) -> f64 {
        sigmoid(log_alpha - self.cdf_shift())
    }

    pub fn gate(&self, log_alpha: f64, u: f64) -> f64 {
        let s = sigmoid((log_alpha + logit(u)) * (1.0 / self.beta));
        (s * (self.zeta_s - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }

    pub fn deterministic_gate(&self, log_alpha: f64) -> f64 {
        (sigmoid(log_alpha) * (self.zeta_s - self.gamma) + self.gamma).clamp(0.0, 1.0)
    }

    /// Differentiable gate for one layer given fixed noise.
    pub fn gate_on_tape<'t>(&self, log_alpha: Var<'t>, u: &Tensor) -> Var<'t> {
        log_alpha.stretch_gate(&u.map(logit), 1.0 / self.beta, self.gamma, self.zeta_s)
    }

    pub fn prob_nonzero_on_tape<'t>(&self, log_alpha: Var<'t>) -> Var<'t> {
        log_alpha.add_scalar(-self.cdf_shift()).sigmoid()
    }

    /// Mean nonzero probability over all layers of a mask.
    pub fn expected_density_on_tape<'t>(&self, tape: &'t Tape, log_alphas: &[Var<'t>]) -> Var<'t> {
        let mut total = tape.scalar(0.0);
        let mut n = 0usize;
        for &la in log_alphas {
            n += la.value().numel();
            total = total.add(self.prob_nonzero_on_tape(la).sum());
        }
        total.scale(1.0 / n.max(1) as f64)
    }
}

/// Variational mask distribution over a parameter layout.
#[derive(Clone, Debug, PartialEq)]
pub struct HardConcreteMask {
    pub log_alpha: ParamSet,
    pub hc: HardConcrete,
}

/// A gate draw; `u` is `None` for the noise-free estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct GateSample {
    pub z: ParamSet,
    pub u: Option<ParamSet>,
}

impl HardConcreteMask {
    pub fn new(log_alpha: ParamSet, hc: HardConcrete) -> Result<Self, MaskError> {
        hc.validate()?;
        if !log_alpha.is_finite() {
            return Err(MaskError::NonFinite);
        }
        Ok(Self { log_alpha, hc })
    }

    /// Uniform log_alpha everywhere.
    pub fn constant(specs: Specs, log_alpha: f64, hc: HardConcrete) -> Result<Self, MaskError> {
        Self::new(ParamSet::filled(specs, log_alpha), hc)
    }

    /// log_alpha ~ Normal(mean giving `density`, std).
    pub fn init(specs: Specs, hc: HardConcrete, density: f64, std: f64, rng: &mut Rng) -> Result<Self, MaskError> {
        hc.validate()?;
        let mean = hc.log_alpha_for_density(density);
        let dist = Normal::new(mean, std).map_err(|_| MaskError::NonFinite)?;
        let flat: Vec<f64> = (0..specs.iter().map(|s| s.numel()).sum::<usize>())
            .map(|_| dist.sample(rng))
            .collect();
        let la = ParamSet::unflatten(specs, &flat).map_err(|_| MaskError::ShapeMismatch)?;
        Self::new(la, hc)
    }

    pub fn specs(&self) -> &Specs {
        self.log_alpha.specs()
    }

    pub fn dim(&self) -> usize {
        self.log_alpha.total_dim()
    }

    /// Draws fresh noise for every entry.
    pub fn sample_noise(&self, rng: &mut Rng) -> ParamSet {
        let flat: Vec<f64> = (0..self.dim()).map(|_| uniform_open(rng, U_EPS)).collect();
        ParamSet::unflatten(self.specs().clone(), &flat).expect("same specs")
    }

    pub fn sample_gate(&self, rng: &mut Rng) -> GateSample {
        let u = self.sample_noise(rng);
        self.gate_with_noise(u)
    }

    pub fn gate_with_noise(&self, u: ParamSet) -> GateSample {
        let la = self.log_alpha.flatten();
        let z: Vec<f64> = la
            .iter()
            .zip(u.flatten())
            .map(|(&a, uv)| self.hc.gate(a, uv))
            .collect();
        GateSample {
            z: ParamSet::unflatten(self.specs().clone(), &z).expect("same specs"),
            u: Some(u),
        }
    }

    pub fn prob_nonzero(&self) -> ParamSet {
        self.log_alpha.map(|a| self.hc.prob_nonzero(a))
    }

    pub fn expected_density(&self) -> f64 {
        let p = self.prob_nonzero();
        p.flatten().iter().sum::<f64>() / self.dim() as f64
    }

    pub fn sparsity(&self) -> f64 {
        1.0 - self.expected_density()
    }

    pub fn deterministic_gate(&self) -> GateSample {
        GateSample {
            z: self.log_alpha.map(|a| self.hc.deterministic_gate(a)),
            u: None,
        }
    }
}

/// Flat 0/1 mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask(pub Vec<bool>);

impl BinaryMask {
    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn density(&self) -> f64 {
        self.count() as f64 / self.0.len().max(1) as f64
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

pub fn binarize(gate: &GateSample, threshold: f64) -> BinaryMask {
    BinaryMask(gate.z.flatten().into_iter().map(|v| v > threshold).collect())
}

pub fn union(a: &BinaryMask, b: &BinaryMask) -> Result<BinaryMask, MaskError> {
    if a.len() != b.len() {
        return Err(MaskError::ShapeMismatch);
    }
    Ok(BinaryMask(a.0.iter().zip(&b.0).map(|(&x, &y)| x || y).collect()))
}

/// `|a ∩ b| / |a ∪ b|`, zero when the union is empty.
pub fn overlap_ratio(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    if a.len() != b.len() {
        return Err(MaskError::ShapeMismatch);
    }
    let (mut both, mut either) = (0usize, 0usize);
    for (&x, &y) in a.0.iter().zip(&b.0) {
        both += usize::from(x && y);
        either += usize::from(x || y);
    }
    Ok(if either == 0 { 0.0 } else { both as f64 / either as f64 })
}
