//! Prototype-conditioned expert router.
//!
//! Support embeddings from the frozen backbone are averaged into class
//! prototypes, passed as a token sequence through one attention + feedforward
//! block, mean-pooled, and mapped to one activation logit per expert.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{uniform_open, BackboneSpec};
use crate::diffcore::{sigmoid, Tape, Tensor, Var};
use crate::experts::{ExpertsError, MergeWeights};
use crate::fewshot::{class_mean_matrix, FewShotError};
use crate::l0mask::U_EPS;
use crate::params::{LayerKind, LayerSpec, ParamSet, Specs};
use crate::rng::Rng;

#[derive(Debug, Error)]
pub enum RouterError {
    #[error("embedding width {width} not divisible by {heads} heads")]
    HeadSplit { width: usize, heads: usize },
    #[error("gumbel temperature must be positive, got {0}")]
    Temperature(f64),
    #[error("empty prototype sequence")]
    NoPrototypes,
    #[error(transparent)]
    FewShot(#[from] FewShotError),
    #[error(transparent)]
    Experts(#[from] ExpertsError),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouterConfig {
    pub heads: usize,
    pub ff_mult: usize,
    pub gumbel_temp: f64,
}

impl Default for RouterConfig {
    fn default() -> Self {
        Self {
            heads: 2,
            ff_mult: 2,
            gumbel_temp: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouteMode {
    /// Gumbel-sigmoid relaxation with fresh noise.
    Train,
    /// Noise-free threshold at 0.5.
    Hard,
    /// Noise-free activation probability `sigmoid(logit)`.
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RouterParams {
    pub params: ParamSet,
    pub cfg: RouterConfig,
    pub embed_dim: usize,
    pub n_experts: usize,
}

/// Differentiable routing outputs.
pub struct RouteVars<'t> {
    pub logits: Var<'t>,
    pub raw: Var<'t>,
    /// One scalar per expert; `None` when every activation is exactly zero.
    pub alpha: Option<Vec<Var<'t>>>,
}

pub fn router_specs(embed_dim: usize, n_experts: usize, cfg: &RouterConfig) -> Result<Specs, RouterError> {
    if cfg.heads == 0 || embed_dim % cfg.heads != 0 {
        return Err(RouterError::HeadSplit {
            width: embed_dim,
            heads: cfg.heads,
        });
    }
    let d = embed_dim;
    let dh = d / cfg.heads;
    let ff = d * cfg.ff_mult.max(1);
    let mut s = Vec::new();
    for h in 0..cfg.heads {
        for proj in ["q", "k", "v"] {
            s.push(LayerSpec::new(format!("attn.{proj}{h}.weight"), LayerKind::LinearWeight, vec![d, dh], 0));
        }
    }
    s.push(LayerSpec::new("attn.out.weight", LayerKind::LinearWeight, vec![d, d], 0));
    s.push(LayerSpec::new("attn.out.bias", LayerKind::LinearBias, vec![d], 0));
    s.push(LayerSpec::new("ln1.scale", LayerKind::NormScale, vec![d], 0));
    s.push(LayerSpec::new("ln1.shift", LayerKind::NormShift, vec![d], 0));
    s.push(LayerSpec::new("ff1.weight", LayerKind::LinearWeight, vec![d, ff], 1));
    s.push(LayerSpec::new("ff1.bias", LayerKind::LinearBias, vec![ff], 1));
    s.push(LayerSpec::new("ff2.weight", LayerKind::LinearWeight, vec![ff, d], 1));
    s.push(LayerSpec::new("ff2.bias", LayerKind::LinearBias, vec![d], 1));
    s.push(LayerSpec::new("ln2.scale", LayerKind::NormScale, vec![d], 1));
    s.push(LayerSpec::new("ln2.shift", LayerKind::NormShift, vec![d], 1));
    s.push(LayerSpec::new("head.weight", LayerKind::LinearWeight, vec![d, n_experts], 2));
    s.push(LayerSpec::new("head.bias", LayerKind::LinearBias, vec![n_experts], 2));
    Ok(s.into())
}

/// Logistic noise `ln u - ln(1 - u)` for each expert.
pub fn gumbel_noise(n: usize, rng: &mut Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let u = uniform_open(rng, U_EPS);
            u.ln() - (1.0 - u).ln()
        })
        .collect()
}

impl RouterParams {
    pub fn init(embed_dim: usize, n_experts: usize, cfg: RouterConfig, rng: &mut Rng) -> Result<Self, RouterError> {
        if cfg.gumbel_temp <= 0.0 || !cfg.gumbel_temp.is_finite() {
            return Err(RouterError::Temperature(cfg.gumbel_temp));
        }
        let specs = router_specs(embed_dim, n_experts, &cfg)?;
        let values = specs
            .iter()
            .map(|s| match s.kind {
                LayerKind::LinearWeight | LayerKind::Embedding => {
                    let dist = Normal::new(0.0, (1.0 / s.shape[0] as f64).sqrt()).expect("std > 0");
                    let data = (0..s.numel()).map(|_| dist.sample(rng)).collect();
                    Tensor::new(s.shape.clone(), data).expect("spec shape")
                }
                LayerKind::NormScale => Tensor::ones(&s.shape),
                _ => Tensor::zeros(&s.shape),
            })
            .collect();
        Ok(Self {
            params: ParamSet::new(specs, values).expect("router specs are consistent"),
            cfg,
            embed_dim,
            n_experts,
        })
    }

    pub fn with_params(&self, params: ParamSet) -> Self {
        Self {
            params,
            ..self.clone()
        }
    }

    /// Expert logits `[1, M]` for prototype tokens `[n, d]`.
    pub fn logits_on_tape<'t>(&self, tape: &'t Tape, p: &[Var<'t>], prototypes: Var<'t>) -> Var<'t> {
        let heads = self.cfg.heads;
        let dh = self.embed_dim / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let n = prototypes.value().rows();
        let head_out: Vec<Var<'t>> = (0..heads)
            .map(|h| {
                let q = prototypes.matmul(p[3 * h]);
                let k = prototypes.matmul(p[3 * h + 1]);
                let v = prototypes.matmul(p[3 * h + 2]);
                q.matmul(k.t()).scale(scale).softmax_rows().matmul(v)
            })
            .collect();
        let b = 3 * heads;
        let attn = tape.concat_cols(&head_out).matmul(p[b]).add_row(p[b + 1]);
        let x1 = prototypes
            .add(attn)
            .layer_norm_rows()
            .mul_row(p[b + 2])
            .add_row(p[b + 3]);
        let ff = x1
            .matmul(p[b + 4])
            .add_row(p[b + 5])
            .relu()
            .matmul(p[b + 6])
            .add_row(p[b + 7]);
        let x2 = x1.add(ff).layer_norm_rows().mul_row(p[b + 8]).add_row(p[b + 9]);
        let pool = tape.constant(Tensor::filled(&[1, n], 1.0 / n as f64));
        pool.matmul(x2).matmul(p[b + 10]).add_row(p[b + 11])
    }

    /// Routing on the tape. `noise` (one value per expert) selects the
    /// Gumbel-sigmoid relaxation; without it the noise-free `mode` is used.
    pub fn route_on_tape<'t>(
        &self,
        tape: &'t Tape,
        p: &[Var<'t>],
        prototypes: Var<'t>,
        mode: RouteMode,
        noise: Option<&[f64]>,
        temp: f64,
    ) -> RouteVars<'t> {
        let logits = self.logits_on_tape(tape, p, prototypes);
        let raw = match (mode, noise) {
            (RouteMode::Train, Some(g)) => logits
                .add_const(&Tensor::raw_matrix(1, g.len(), g.to_vec()))
                .scale(1.0 / temp)
                .sigmoid(),
            (RouteMode::Train, None) | (RouteMode::Mean, _) => logits.sigmoid(),
            (RouteMode::Hard, _) => {
                let hard = logits.value().map(|l| if sigmoid(l) > 0.5 { 1.0 } else { 0.0 });
                tape.constant(hard)
            }
        };
        let total = raw.sum();
        let alpha = if total.item() > 0.0 {
            let inv = total.recip();
            Some((0..self.n_experts).map(|m| raw.select(m).mul(inv)).collect())
        } else {
            None
        };
        RouteVars { logits, raw, alpha }
    }

    /// Off-tape routing; `rng` supplies Gumbel noise in train mode.
    pub fn route(&self, prototypes: &Tensor, rng: &mut Rng, mode: RouteMode) -> Result<MergeWeights, RouterError> {
        let noise = (mode == RouteMode::Train).then(|| gumbel_noise(self.n_experts, rng));
        self.route_with_noise(prototypes, mode, noise.as_deref(), self.cfg.gumbel_temp)
    }

    pub fn route_with_noise(
        &self,
        prototypes: &Tensor,
        mode: RouteMode,
        noise: Option<&[f64]>,
        temp: f64,
    ) -> Result<MergeWeights, RouterError> {
        if prototypes.rows() == 0 {
            return Err(RouterError::NoPrototypes);
        }
        let tape = Tape::new();
        let p: Vec<Var<'_>> = self.params.values().iter().map(|v| tape.constant(v.clone())).collect();
        let out = self.route_on_tape(&tape, &p, tape.constant(prototypes.clone()), mode, noise, temp);
        Ok(MergeWeights::from_raw(out.raw.value().data().to_vec())?)
    }

    /// Raw expert logits, noise-free.
    pub fn logits(&self, prototypes: &Tensor) -> Vec<f64> {
        let tape = Tape::new();
        let p: Vec<Var<'_>> = self.params.values().iter().map(|v| tape.constant(v.clone())).collect();
        self.logits_on_tape(&tape, &p, tape.constant(prototypes.clone()))
            .value()
            .data()
            .to_vec()
    }
}

/// Class prototypes `[n_way, embed_dim]` from the frozen encoder, ordered by class id.
pub fn encode_prototypes(
    encoder: &ParamSet,
    backbone: &BackboneSpec,
    support: &[(Vec<f64>, usize)],
    n_way: usize,
) -> Result<Tensor, RouterError> {
    if support.is_empty() {
        return Err(RouterError::NoPrototypes);
    }
    let labels: Vec<usize> = support.iter().map(|&(_, y)| y).collect();
    let means = class_mean_matrix(&labels, n_way)?;
    let rows: Vec<Vec<f64>> = support.iter().map(|(x, _)| x.clone()).collect();
    let x = Tensor::from_rows(&rows).map_err(FewShotError::from)?;
    let emb = backbone.embed(encoder, &x);
    Ok(means.matmul(&emb).map_err(FewShotError::from)?)
}

/// Cosine similarity between rows; zero rows are similar to nothing.
pub fn selection_similarity(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    rows.iter()
        .enumerate()
        .map(|(i, a)| {
            rows.iter()
                .enumerate()
                .map(|(j, b)| {
                    if norms[i] == 0.0 || norms[j] == 0.0 {
                        0.0
                    } else if i == j {
                        1.0
                    } else {
                        a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (norms[i] * norms[j])
                    }
                })
                .collect()
        })
        .collect()
}
