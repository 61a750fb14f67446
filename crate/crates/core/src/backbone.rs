//! The fixed desk-scale backbone family.
//!
//! `x -> embed -> [h + relu(norm(h W + b) * scale + shift)] x depth -> proj`.
//! The projection output is the embedding used by the prototype head and the
//! router; a classification head, when needed, lives outside the backbone.

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::params::{LayerKind, LayerSpec, ParamSet, Specs};
use crate::rng::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub input_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub embed_dim: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        Self {
            input_dim: 16,
            width: 32,
            depth: 2,
            embed_dim: 16,
        }
    }
}

impl BackboneSpec {
    pub fn specs(&self) -> Specs {
        let mut specs = vec![
            LayerSpec::new("embed.weight", LayerKind::Embedding, vec![self.input_dim, self.width], 0),
            LayerSpec::new("embed.bias", LayerKind::LinearBias, vec![self.width], 0),
        ];
        for d in 0..self.depth {
            let depth = d + 1;
            specs.push(LayerSpec::new(
                format!("block{d}.weight"),
                LayerKind::LinearWeight,
                vec![self.width, self.width],
                depth,
            ));
            specs.push(LayerSpec::new(format!("block{d}.bias"), LayerKind::LinearBias, vec![self.width], depth));
            specs.push(LayerSpec::new(
                format!("block{d}.norm_scale"),
                LayerKind::NormScale,
                vec![self.width],
                depth,
            ));
            specs.push(LayerSpec::new(
                format!("block{d}.norm_shift"),
                LayerKind::NormShift,
                vec![self.width],
                depth,
            ));
        }
        let last = self.depth + 1;
        specs.push(LayerSpec::new(
            "proj.weight",
            LayerKind::LinearWeight,
            vec![self.width, self.embed_dim],
            last,
        ));
        specs.push(LayerSpec::new("proj.bias", LayerKind::LinearBias, vec![self.embed_dim], last));
        specs.into()
    }

    pub fn init(&self, rng: &mut Rng) -> ParamSet {
        let specs = self.specs();
        let values = specs
            .iter()
            .map(|s| match s.kind {
                LayerKind::Embedding | LayerKind::LinearWeight => normal_tensor(&s.shape, (1.0 / s.shape[0] as f64).sqrt(), rng),
                LayerKind::NormScale => Tensor::ones(&s.shape),
                LayerKind::LinearBias | LayerKind::NormShift => Tensor::zeros(&s.shape),
            })
            .collect();
        ParamSet::new(specs, values).expect("backbone specs are consistent")
    }

    /// Embeddings `[n, embed_dim]` of inputs `x: [n, input_dim]`; `params` in spec order.
    pub fn forward<'t>(&self, params: &[Var<'t>], x: Var<'t>) -> Var<'t> {
        let mut h = x.matmul(params[0]).add_row(params[1]);
        for d in 0..self.depth {
            let p = &params[2 + 4 * d..6 + 4 * d];
            let u = h
                .matmul(p[0])
                .add_row(p[1])
                .layer_norm_rows()
                .mul_row(p[2])
                .add_row(p[3]);
            h = h.add(u.relu());
        }
        let base = 2 + 4 * self.depth;
        h.matmul(params[base]).add_row(params[base + 1])
    }

    /// Off-tape embedding for evaluation paths.
    pub fn embed(&self, params: &ParamSet, x: &Tensor) -> Tensor {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.values().iter().map(|v| tape.constant(v.clone())).collect();
        let out = self.forward(&vars, tape.constant(x.clone()));
        (*out.value()).clone()
    }
}

pub(crate) fn normal_tensor(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| dist.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape from spec")
}

pub(crate) fn uniform_open(rng: &mut Rng, eps: f64) -> f64 {
    eps + (1.0 - 2.0 * eps) * rng.random::<f64>()
}
