//! Meta-test-time adaptation: gradient-free expert selection by bit flips and
//! full fine-tuning from the merged initialization.

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tape;
use crate::experts::MergeWeights;
use crate::fewshot::{ce_loss, protonet_logits, support_loss, support_loss_on_tape, Episode, Metric};
use crate::l0mask::GateSample;
use crate::metaopt::{MetaOptError, TrainState};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::rng::{stream, TAG_SEARCH};
use crate::router::RouteMode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSearchConfig {
    pub rounds: usize,
    pub accept_prob: f64,
    pub seed: u64,
    /// Leave-one-out centroids for the support loss when every class has two shots.
    pub leave_one_out: bool,
}

impl Default for SelectionSearchConfig {
    fn default() -> Self {
        Self {
            rounds: 5,
            accept_prob: 0.9,
            seed: 0,
            leave_one_out: true,
        }
    }
}

impl SelectionSearchConfig {
    pub fn validate(&self) -> Result<(), MetaOptError> {
        if self.rounds == 0 {
            return Err(MetaOptError::Config("rounds must be at least 1".into()));
        }
        if !(self.accept_prob > 0.0 && self.accept_prob <= 1.0) {
            return Err(MetaOptError::Config("accept_prob must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub bits: Vec<bool>,
    pub loss: f64,
    pub accepted: bool,
}

/// Every evaluated selection in order; the first entry is the hard-routing start.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTrace {
    pub candidates: Vec<Candidate>,
    pub best: Vec<bool>,
    pub best_loss: f64,
}

impl SelectionTrace {
    pub fn initial_loss(&self) -> f64 {
        self.candidates[0].loss
    }

    /// Best-so-far loss after each evaluation.
    pub fn running_min(&self) -> Vec<f64> {
        let mut best = f64::INFINITY;
        self.candidates
            .iter()
            .map(|c| {
                best = best.min(c.loss);
                best
            })
            .collect()
    }
}

pub fn bits_to_weights(bits: &[bool]) -> MergeWeights {
    MergeWeights::from_raw(bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()).expect("binary activations are valid")
}

/// Support loss of the merge selected by `bits`.
pub fn selection_loss(
    state: &TrainState,
    episode: &Episode,
    gates: &[GateSample],
    bits: &[bool],
    metric: Metric,
    leave_one_out: bool,
) -> Result<f64, MetaOptError> {
    let theta = state.merged(&bits_to_weights(bits), gates)?;
    Ok(support_loss(&theta, &state.backbone, episode, metric, leave_one_out)?)
}

/// Bit-flip search over binary expert activations starting from hard routing.
/// Only support losses are evaluated; nothing is differentiated.
pub fn select_experts(
    state: &TrainState,
    episode: &Episode,
    gates: &[GateSample],
    cfg: &SelectionSearchConfig,
    metric: Metric,
    task_id: u64,
) -> Result<(MergeWeights, SelectionTrace), MetaOptError> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, &[TAG_SEARCH, task_id]);
    let hard = state.route(episode, RouteMode::Hard, &mut rng)?;
    let mut current: Vec<bool> = hard.raw.iter().map(|&r| r > 0.0).collect();
    let mut current_loss = selection_loss(state, episode, gates, &current, metric, cfg.leave_one_out)?;
    let mut trace = SelectionTrace {
        candidates: vec![Candidate {
            bits: current.clone(),
            loss: current_loss,
            accepted: true,
        }],
        best: current.clone(),
        best_loss: current_loss,
    };
    for _ in 0..cfg.rounds {
        for m in 0..current.len() {
            let mut cand = current.clone();
            cand[m] = !cand[m];
            let loss = selection_loss(state, episode, gates, &cand, metric, cfg.leave_one_out)?;
            let u: f64 = rng.random();
            let accept = if loss < current_loss {
                u < cfg.accept_prob
            } else {
                u < 1.0 - cfg.accept_prob
            };
            if loss < trace.best_loss {
                trace.best_loss = loss;
                trace.best = cand.clone();
            }
            trace.candidates.push(Candidate {
                bits: cand.clone(),
                loss,
                accepted: accept,
            });
            if accept {
                current = cand;
                current_loss = loss;
            }
        }
    }
    Ok((bits_to_weights(&trace.best), trace))
}

/// Outcome of fine-tuning one task.
#[derive(Clone, Debug, PartialEq)]
pub struct FinetuneResult {
    pub params: ParamSet,
    pub predictions: Vec<usize>,
    /// Support loss before each step and after the last one.
    pub support_losses: Vec<f64>,
}

/// Adam on every entry of a detached copy of `theta_i` against the support loss.
pub fn finetune_full(
    theta_i: &ParamSet,
    state: &TrainState,
    episode: &Episode,
    steps: usize,
    lr: f64,
    metric: Metric,
    leave_one_out: bool,
) -> Result<FinetuneResult, MetaOptError> {
    let mut params = theta_i.clone();
    let mut losses = Vec::with_capacity(steps + 1);
    if steps > 0 && lr != 0.0 {
        let mut opt = Adam::for_tensors(lr, params.values());
        for step in 0..steps {
            let tape = Tape::new();
            let vars = params.leaves(&tape);
            let loss = support_loss_on_tape(&tape, &state.backbone, &vars, episode, metric, leave_one_out)?;
            let grads = tape.grad(loss, &vars)?;
            if !loss.item().is_finite() || !grads.iter().all(|g| g.is_finite()) {
                return Err(MetaOptError::Divergence {
                    step: step as u64,
                    detail: format!("fine-tuning on {} with lr {lr}", episode.domain),
                });
            }
            losses.push(loss.item());
            params = params.with_values(opt.step(params.values(), &grads))?;
        }
    }
    losses.push(support_loss(&params, &state.backbone, episode, metric, leave_one_out)?);
    let predictions = protonet_logits(&params, &state.backbone, episode, metric)?.predictions();
    Ok(FinetuneResult {
        params,
        predictions,
        support_losses: losses,
    })
}

/// Router weights and merged parameters without adaptation.
pub fn direct_merge(
    state: &TrainState,
    episode: &Episode,
    gates: &[GateSample],
    route: RouteMode,
    task_id: u64,
    seed: u64,
) -> Result<(MergeWeights, ParamSet), MetaOptError> {
    let mut rng = stream(seed, &[TAG_SEARCH, task_id, 1]);
    let w = state.route(episode, route, &mut rng)?;
    let theta = state.merged(&w, gates)?;
    Ok((w, theta))
}

/// Per-domain learning rate minimizing mean query loss after fine-tuning;
/// ties go to the smaller rate.
pub fn lr_search(
    state: &TrainState,
    episodes: &[Episode],
    gates: &[GateSample],
    grid: &[f64],
    steps: usize,
    route: RouteMode,
    metric: Metric,
    leave_one_out: bool,
) -> Result<BTreeMap<String, f64>, MetaOptError> {
    use rayon::prelude::*;
    if grid.is_empty() {
        return Err(MetaOptError::Config("empty learning-rate grid".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let inits: Vec<ParamSet> = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| direct_merge(state, ep, gates, route, i as u64, 0).map(|(_, t)| t))
        .collect::<Result<_, _>>()?;
    let mut losses: BTreeMap<String, Vec<(f64, usize)>> = BTreeMap::new();
    for &lr in &sorted {
        let per_episode: Vec<f64> = episodes
            .par_iter()
            .zip(&inits)
            .map(|(ep, init)| {
                let ft = finetune_full(init, state, ep, steps, lr, metric, leave_one_out)?;
                let logits = protonet_logits(&ft.params, &state.backbone, ep, metric)?;
                Ok(ce_loss(&logits, &ep.query_labels()?))
            })
            .collect::<Result<_, MetaOptError>>()?;
        for (ep, l) in episodes.iter().zip(per_episode) {
            let entry = losses.entry(ep.domain.clone()).or_insert_with(|| vec![(0.0, 0); sorted.len()]);
            let idx = sorted.iter().position(|&x| x == lr).expect("lr from grid");
            entry[idx].0 += l;
            entry[idx].1 += 1;
        }
    }
    Ok(losses
        .into_iter()
        .map(|(domain, sums)| {
            let mut best = (f64::INFINITY, sorted[0]);
            for (&lr, (total, n)) in sorted.iter().zip(sums) {
                let mean = total / n.max(1) as f64;
                if mean < best.0 {
                    best = (mean, lr);
                }
            }
            (domain, best.1)
        })
        .collect())
}
