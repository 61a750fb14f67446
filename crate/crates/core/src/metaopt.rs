//! Constrained meta-training of the expert pool.
//!
//! Each step routes every episode, samples all gates, merges, distills from a
//! detached dense teacher and descends on `(theta_delta, router, log_alphas)`
//! against `mean episode loss + sum_m lambda_m * v_m`. The multipliers then
//! take a projected ascent step, and are reset to zero as soon as their
//! constraint holds.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneSpec;
use crate::diffcore::{DiffError, Tape, Tensor, Var};
use crate::experts::{merge, merge_on_tape, ExpertPool, ExpertsError, MergeWeights};
use crate::fewshot::{
    ce_loss_on_tape, kd_loss_on_tape, protonet_logits, query_logits_on_tape, Episode, FewShotError, Metric,
};
use crate::l0mask::{GateSample, HardConcrete, HardConcreteMask, MaskError};
use crate::optim::{sgd_step, Adam};
use crate::params::{ParamSet, ParamsError};
use crate::rng::{stream, Rng, TAG_EVAL, TAG_INIT, TAG_MASK_FIT, TAG_TRAIN_STEP};
use crate::router::{encode_prototypes, gumbel_noise, RouteMode, RouterConfig, RouterError, RouterParams};

#[derive(Debug, Error)]
pub enum MetaOptError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("divergence at step {step}: {detail}")]
    Divergence { step: u64, detail: String },
    #[error("empty episode batch")]
    EmptyBatch,
    #[error(transparent)]
    FewShot(#[from] FewShotError),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Diff(#[from] DiffError),
    #[error(transparent)]
    Experts(#[from] ExpertsError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Router(#[from] RouterError),
}

/// How test-time gates are obtained.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateMode {
    #[default]
    Deterministic,
    /// One stochastic draw per mask at the start of each task.
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_experts: usize,
    pub tau: f64,
    pub beta_w: f64,
    pub kd_temp: f64,
    pub k_teacher: usize,
    pub lr_main: f64,
    pub lr_mask: f64,
    pub lr_lambda: f64,
    pub lr_teacher: f64,
    pub batch_tasks: usize,
    pub max_steps: u64,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_episodes: usize,
    pub lambda_alpha_weighting: bool,
    /// Linear anneal target for the Gumbel temperature; `None` keeps it fixed.
    pub gumbel_temp_final: Option<f64>,
    pub metric: Metric,
    pub hc: HardConcrete,
    pub init_density: f64,
    pub init_std: f64,
    pub router: RouterConfig,
    pub direct_route: RouteMode,
    pub gate_mode: GateMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_experts: 4,
            tau: 0.9,
            beta_w: 0.5,
            kd_temp: 2.0,
            k_teacher: 1,
            lr_main: 3e-3,
            lr_mask: 1e-2,
            lr_lambda: 1.0,
            lr_teacher: 0.1,
            batch_tasks: 4,
            max_steps: 10_000,
            seed: 0,
            eval_every: 1000,
            eval_episodes: 50,
            lambda_alpha_weighting: false,
            gumbel_temp_final: None,
            metric: Metric::Sqeuclid,
            hc: HardConcrete::default(),
            init_density: 0.5,
            init_std: 0.01,
            router: RouterConfig::default(),
            direct_route: RouteMode::Mean,
            gate_mode: GateMode::Deterministic,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), MetaOptError> {
        let bad = |msg: &str| Err(MetaOptError::Config(msg.to_string()));
        if self.n_experts == 0 {
            return bad("n_experts must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return bad("tau must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.beta_w) {
            return bad("beta_w must lie in [0, 1]");
        }
        for (name, v) in [
            ("lr_main", self.lr_main),
            ("lr_mask", self.lr_mask),
            ("lr_lambda", self.lr_lambda),
            ("lr_teacher", self.lr_teacher),
            ("kd_temp", self.kd_temp),
            ("router.gumbel_temp", self.router.gumbel_temp),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(MetaOptError::Config(format!("{name} must be positive")));
            }
        }
        if let Some(t) = self.gumbel_temp_final {
            if !(t > 0.0 && t.is_finite()) {
                return bad("gumbel_temp_final must be positive");
            }
        }
        if self.k_teacher == 0 {
            return bad("k_teacher must be at least 1");
        }
        if self.batch_tasks == 0 {
            return bad("batch_tasks must be at least 1");
        }
        if !(self.init_density > 0.0 && self.init_density < 1.0) {
            return bad("init_density must lie in (0, 1)");
        }
        self.hc.validate()?;
        Ok(())
    }

    /// Gumbel temperature used at `step`.
    pub fn gumbel_temp_at(&self, step: u64) -> f64 {
        let t0 = self.router.gumbel_temp;
        match self.gumbel_temp_final {
            Some(t1) if self.max_steps > 0 => {
                let frac = (step as f64 / self.max_steps as f64).min(1.0);
                t0 + (t1 - t0) * frac
            }
            _ => t0,
        }
    }
}

/// Everything that changes during meta-training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub backbone: BackboneSpec,
    pub pool: ExpertPool,
    pub router: RouterParams,
    pub step: u64,
    pub opt_delta: Adam,
    pub opt_router: Adam,
    pub opt_masks: Adam,
}

impl TrainState {
    /// Zero modulation, masks at the configured initial density, fresh router.
    pub fn init(cfg: &TrainConfig, backbone: BackboneSpec, theta_pre: ParamSet) -> Result<Self, MetaOptError> {
        cfg.validate()?;
        if !theta_pre.same_specs(&ParamSet::zeros(backbone.specs())) {
            return Err(ParamsError::SpecMismatch.into());
        }
        let specs = theta_pre.specs().clone();
        let masks = (0..cfg.n_experts)
            .map(|m| {
                HardConcreteMask::init(
                    specs.clone(),
                    cfg.hc,
                    cfg.init_density,
                    cfg.init_std,
                    &mut stream(cfg.seed, &[TAG_INIT, m as u64]),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let pool = ExpertPool::from_pretrained(theta_pre, masks, cfg.tau)?;
        let router = RouterParams::init(
            backbone.embed_dim,
            cfg.n_experts,
            cfg.router,
            &mut stream(cfg.seed, &[TAG_INIT, u64::MAX]),
        )?;
        let opt_delta = Adam::for_tensors(cfg.lr_main, pool.theta_delta.values());
        let opt_router = Adam::for_tensors(cfg.lr_main, router.params.values());
        let mask_tensors: Vec<Tensor> = pool.masks.iter().flat_map(|m| m.log_alpha.values().to_vec()).collect();
        let opt_masks = Adam::for_tensors(cfg.lr_mask, &mask_tensors);
        Ok(Self {
            backbone,
            pool,
            router,
            step: 0,
            opt_delta,
            opt_router,
            opt_masks,
        })
    }

    pub fn prototypes(&self, episode: &Episode) -> Result<Tensor, MetaOptError> {
        Ok(encode_prototypes(
            &self.pool.theta_pre,
            &self.backbone,
            &episode.support,
            episode.n_way,
        )?)
    }

    /// Gates used at meta-test time.
    pub fn test_gates(&self, mode: GateMode, rng: &mut Rng) -> Vec<GateSample> {
        match mode {
            GateMode::Deterministic => self.pool.deterministic_gates(),
            GateMode::Sampled => self.pool.masks.iter().map(|m| m.sample_gate(rng)).collect(),
        }
    }

    /// Noise-free router weights for an episode.
    pub fn route(&self, episode: &Episode, mode: RouteMode, rng: &mut Rng) -> Result<MergeWeights, MetaOptError> {
        Ok(self.router.route(&self.prototypes(episode)?, rng, mode)?)
    }

    pub fn merged(&self, weights: &MergeWeights, gates: &[GateSample]) -> Result<ParamSet, MetaOptError> {
        Ok(merge(&self.pool, weights, gates)?)
    }
}

/// Per-step sparsity constraint values `v_m = density_m - (1 - tau)`.
pub fn sparsity_violation(pool: &ExpertPool) -> Vec<f64> {
    pool.masks
        .iter()
        .map(|m| m.expected_density() - (1.0 - pool.tau))
        .collect()
}

/// Projected ascent with reset: zero when the constraint holds.
pub fn update_multiplier(lambda: f64, violation: f64, lr: f64, weight: f64) -> f64 {
    if violation > 0.0 {
        (lambda + lr * weight * violation).max(0.0)
    } else {
        0.0
    }
}

/// K plain gradient steps on the query cross-entropy from a detached copy of `theta_i`.
pub fn make_teacher(
    theta_i: &ParamSet,
    backbone: &BackboneSpec,
    episode: &Episode,
    k: usize,
    lr: f64,
    metric: Metric,
) -> Result<ParamSet, MetaOptError> {
    let labels = episode.query_labels()?;
    let mut current = theta_i.clone();
    for _ in 0..k {
        let tape = Tape::new();
        let vars = current.leaves(&tape);
        let logits = query_logits_on_tape(&tape, backbone, &vars, episode, metric)?;
        let loss = ce_loss_on_tape(logits, &labels);
        let grads = tape.grad(loss, &vars)?;
        if !loss.item().is_finite() {
            return Err(DiffError::NonFinite { op: "teacher loss" }.into());
        }
        current = current.with_values(sgd_step(current.values(), &grads, lr))?;
    }
    Ok(current)
}

/// Trainable leaves of one forward pass.
pub struct TrainVars<'t> {
    pub delta: Vec<Var<'t>>,
    pub router: Vec<Var<'t>>,
    pub masks: Vec<Vec<Var<'t>>>,
}

impl<'t> TrainVars<'t> {
    pub fn leaves(tape: &'t Tape, state: &TrainState) -> Self {
        Self {
            delta: state.pool.theta_delta.leaves(tape),
            router: state.router.params.leaves(tape),
            masks: state.pool.masks.iter().map(|m| m.log_alpha.leaves(tape)).collect(),
        }
    }

    pub fn all(&self) -> Vec<Var<'t>> {
        let mut v = self.delta.clone();
        v.extend_from_slice(&self.router);
        for m in &self.masks {
            v.extend_from_slice(m);
        }
        v
    }
}

/// Randomness and detached targets for one episode, fixed for a single step.
#[derive(Clone, Debug)]
pub struct EpisodeContext {
    pub episode: Episode,
    pub labels: Vec<usize>,
    pub prototypes: Tensor,
    pub route_noise: Vec<f64>,
    pub gumbel_temp: f64,
    pub gate_noise: Vec<ParamSet>,
    pub teacher_logits: Option<Tensor>,
}

impl EpisodeContext {
    /// Draws the episode's routing and gate noise from `rng`.
    pub fn prepare(
        state: &TrainState,
        episode: Episode,
        gumbel_temp: f64,
        rng: &mut Rng,
    ) -> Result<Self, MetaOptError> {
        episode.validate()?;
        let labels = episode.query_labels()?;
        let prototypes = state.prototypes(&episode)?;
        let route_noise = gumbel_noise(state.pool.n_experts(), rng);
        let gate_noise = state.pool.masks.iter().map(|m| m.sample_noise(rng)).collect();
        Ok(Self {
            episode,
            labels,
            prototypes,
            route_noise,
            gumbel_temp,
            gate_noise,
            teacher_logits: None,
        })
    }

    /// Fixes the distillation target at the current parameters. Without this the
    /// target is rebuilt inside each forward pass from the merged values.
    pub fn freeze_teacher(&mut self, state: &TrainState, cfg: &TrainConfig) -> Result<(), MetaOptError> {
        let weights =
            state
                .router
                .route_with_noise(&self.prototypes, RouteMode::Train, Some(&self.route_noise), self.gumbel_temp)?;
        let gates: Vec<GateSample> = state
            .pool
            .masks
            .iter()
            .zip(&self.gate_noise)
            .map(|(m, u)| m.gate_with_noise(u.clone()))
            .collect();
        let theta_i = state.merged(&weights, &gates)?;
        self.teacher_logits = Some(teacher_logits(&theta_i, state, &self.episode, cfg)?);
        Ok(())
    }
}

fn teacher_logits(theta_i: &ParamSet, state: &TrainState, ep: &Episode, cfg: &TrainConfig) -> Result<Tensor, MetaOptError> {
    let teacher = make_teacher(theta_i, &state.backbone, ep, cfg.k_teacher, cfg.lr_teacher, cfg.metric)?;
    Ok(protonet_logits(&teacher, &state.backbone, ep, cfg.metric)?.0)
}

/// Differentiable pieces of one episode's loss.
pub struct EpisodeTerms<'t> {
    pub loss: Var<'t>,
    pub ce: f64,
    pub kd: f64,
    pub alpha: Vec<f64>,
}

pub fn episode_loss_on_tape<'t>(
    tape: &'t Tape,
    state: &TrainState,
    vars: &TrainVars<'t>,
    ctx: &EpisodeContext,
    cfg: &TrainConfig,
) -> Result<EpisodeTerms<'t>, MetaOptError> {
    let m = state.pool.n_experts();
    let route = state.router.route_on_tape(
        tape,
        &vars.router,
        tape.constant(ctx.prototypes.clone()),
        RouteMode::Train,
        Some(&ctx.route_noise),
        ctx.gumbel_temp,
    );
    let (merged, alpha) = match &route.alpha {
        Some(alpha) => {
            let gates: Vec<Vec<Var<'t>>> = vars
                .masks
                .iter()
                .zip(&ctx.gate_noise)
                .map(|(la, u)| {
                    la.iter()
                        .zip(u.values())
                        .map(|(&l, ut)| state.pool.masks[0].hc.gate_on_tape(l, ut))
                        .collect()
                })
                .collect();
            let merged = merge_on_tape(tape, &state.pool.theta_pre, &vars.delta, alpha, &gates);
            (merged, alpha.iter().map(|a| a.item()).collect())
        }
        None => (
            state
                .pool
                .theta_pre
                .values()
                .iter()
                .map(|v| tape.constant(v.clone()))
                .collect(),
            vec![0.0; m],
        ),
    };
    let logits = query_logits_on_tape(tape, &state.backbone, &merged, &ctx.episode, cfg.metric)?;
    let ce = ce_loss_on_tape(logits, &ctx.labels);
    let (loss, kd) = if cfg.beta_w < 1.0 {
        let target = match &ctx.teacher_logits {
            Some(t) => t.clone(),
            None => {
                let theta_i = state
                    .pool
                    .theta_pre
                    .with_values(merged.iter().map(|v| (*v.value()).clone()).collect())?;
                teacher_logits(&theta_i, state, &ctx.episode, cfg)?
            }
        };
        let kd = kd_loss_on_tape(logits, &target, cfg.kd_temp);
        (ce.scale(cfg.beta_w).add(kd.scale(1.0 - cfg.beta_w)), kd.item())
    } else {
        (ce, 0.0)
    };
    Ok(EpisodeTerms {
        loss,
        ce: ce.item(),
        kd,
        alpha,
    })
}

/// `sum_m lambda_m * v_m` with the multipliers held constant.
pub fn penalty_on_tape<'t>(tape: &'t Tape, pool: &ExpertPool, masks: &[Vec<Var<'t>>]) -> Var<'t> {
    let mut total = tape.scalar(0.0);
    for ((mask, la), &lambda) in pool.masks.iter().zip(masks).zip(&pool.lambdas) {
        let v = mask.hc.expected_density_on_tape(tape, la).add_scalar(-(1.0 - pool.tau));
        total = total.add(v.mul(tape.scalar(lambda)));
    }
    total
}

/// Full objective over a batch on a single tape.
pub fn meta_objective_on_tape<'t>(
    tape: &'t Tape,
    state: &TrainState,
    vars: &TrainVars<'t>,
    contexts: &[EpisodeContext],
    cfg: &TrainConfig,
) -> Result<Var<'t>, MetaOptError> {
    if contexts.is_empty() {
        return Err(MetaOptError::EmptyBatch);
    }
    let mut total = tape.scalar(0.0);
    for ctx in contexts {
        total = total.add(episode_loss_on_tape(tape, state, vars, ctx, cfg)?.loss);
    }
    Ok(total
        .scale(1.0 / contexts.len() as f64)
        .add(penalty_on_tape(tape, &state.pool, &vars.masks)))
}

/// Per-step training record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub mean_ce: f64,
    pub mean_kd: f64,
    pub density: Vec<f64>,
    pub violation: Vec<f64>,
    pub lambda: Vec<f64>,
    pub mean_alpha: Vec<f64>,
    pub val_id_acc: Option<f64>,
    pub val_ood_acc: Option<f64>,
}

struct EpisodeOut {
    grads: Vec<Tensor>,
    ce: f64,
    kd: f64,
    alpha: Vec<f64>,
}

fn split_groups(state: &TrainState, mut flat: Vec<Tensor>) -> (Vec<Tensor>, Vec<Tensor>, Vec<Tensor>) {
    let nd = state.pool.theta_delta.len();
    let nr = state.router.params.len();
    let masks = flat.split_off(nd + nr);
    let router = flat.split_off(nd);
    (flat, router, masks)
}

/// One simultaneous descent/ascent step on a batch.
pub fn meta_step(state: &TrainState, batch: &[Episode], cfg: &TrainConfig) -> Result<(TrainState, StepMetrics), MetaOptError> {
    if batch.is_empty() {
        return Err(MetaOptError::EmptyBatch);
    }
    let step = state.step;
    let temp = cfg.gumbel_temp_at(step);
    let violation = sparsity_violation(&state.pool);
    let density: Vec<f64> = state.pool.masks.iter().map(HardConcreteMask::expected_density).collect();

    let outs: Vec<Result<EpisodeOut, MetaOptError>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut rng = stream(cfg.seed, &[TAG_TRAIN_STEP, step, i as u64]);
            let ctx = EpisodeContext::prepare(state, ep.clone(), temp, &mut rng)?;
            let tape = Tape::new();
            let vars = TrainVars::leaves(&tape, state);
            let terms = episode_loss_on_tape(&tape, state, &vars, &ctx, cfg)?;
            if !terms.loss.item().is_finite() {
                return Err(MetaOptError::Divergence {
                    step,
                    detail: format!(
                        "episode {i} ({}) loss {} ce {} kd {} alpha {:?}",
                        ep.domain,
                        terms.loss.item(),
                        terms.ce,
                        terms.kd,
                        terms.alpha
                    ),
                });
            }
            let grads = tape.grad(terms.loss, &vars.all())?;
            Ok(EpisodeOut {
                grads,
                ce: terms.ce,
                kd: terms.kd,
                alpha: terms.alpha,
            })
        })
        .collect();

    let b = batch.len() as f64;
    let m = state.pool.n_experts();
    let mut sum: Option<Vec<Tensor>> = None;
    let (mut ce, mut kd) = (0.0, 0.0);
    let mut mean_alpha = vec![0.0; m];
    for out in outs {
        let out = out?;
        ce += out.ce / b;
        kd += out.kd / b;
        for (acc, a) in mean_alpha.iter_mut().zip(&out.alpha) {
            *acc += a / b;
        }
        sum = Some(match sum {
            None => out.grads,
            Some(acc) => acc
                .iter()
                .zip(&out.grads)
                .map(|(x, y)| x.zip_map(y, |p, q| p + q).expect("same shape"))
                .collect(),
        });
    }
    let grads: Vec<Tensor> = sum.expect("nonempty batch").iter().map(|g| g.map(|v| v / b)).collect();
    let (g_delta, g_router, mut g_masks) = split_groups(state, grads);

    let tape = Tape::new();
    let mask_vars: Vec<Vec<Var<'_>>> = state.pool.masks.iter().map(|mk| mk.log_alpha.leaves(&tape)).collect();
    let penalty = penalty_on_tape(&tape, &state.pool, &mask_vars);
    let flat_mask_vars: Vec<Var<'_>> = mask_vars.iter().flatten().copied().collect();
    let g_pen = tape.grad(penalty, &flat_mask_vars)?;
    for (g, p) in g_masks.iter_mut().zip(&g_pen) {
        *g = g.zip_map(p, |a, c| a + c).expect("same shape");
    }

    if !g_delta.iter().chain(&g_router).chain(&g_masks).all(Tensor::is_finite) {
        return Err(MetaOptError::Divergence {
            step,
            detail: format!("non-finite gradient; density {density:?} lambda {:?}", state.pool.lambdas),
        });
    }

    let mut next = state.clone();
    next.pool.theta_delta = state
        .pool
        .theta_delta
        .with_values(next.opt_delta.step(state.pool.theta_delta.values(), &g_delta))?;
    next.router.params = state
        .router
        .params
        .with_values(next.opt_router.step(state.router.params.values(), &g_router))?;
    let mask_values: Vec<Tensor> = state.pool.masks.iter().flat_map(|mk| mk.log_alpha.values().to_vec()).collect();
    let mut updated = next.opt_masks.step(&mask_values, &g_masks).into_iter();
    for mask in next.pool.masks.iter_mut() {
        let layers: Vec<Tensor> = updated.by_ref().take(mask.log_alpha.len()).collect();
        mask.log_alpha = mask.log_alpha.with_values(layers)?;
    }
    next.pool.lambdas = state
        .pool
        .lambdas
        .iter()
        .zip(&violation)
        .zip(&mean_alpha)
        .map(|((&l, &v), &a)| {
            let w = if cfg.lambda_alpha_weighting { a } else { 1.0 };
            update_multiplier(l, v, cfg.lr_lambda, w)
        })
        .collect();
    next.step = step + 1;

    let metrics = StepMetrics {
        step: next.step,
        mean_ce: ce,
        mean_kd: kd,
        density,
        violation,
        lambda: next.pool.lambdas.clone(),
        mean_alpha,
        val_id_acc: None,
        val_ood_acc: None,
    };
    Ok((next, metrics))
}

/// Mean query accuracy of direct inference (router + merge, no adaptation).
pub fn direct_accuracy(state: &TrainState, episodes: &[Episode], cfg: &TrainConfig) -> Result<f64, MetaOptError> {
    if episodes.is_empty() {
        return Ok(f64::NAN);
    }
    let accs: Vec<Result<f64, MetaOptError>> = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut rng = stream(cfg.seed, &[TAG_EVAL, state.step, i as u64]);
            let gates = state.test_gates(cfg.gate_mode, &mut rng);
            let weights = state.route(ep, cfg.direct_route, &mut rng)?;
            let theta = state.merged(&weights, &gates)?;
            let logits = protonet_logits(&theta, &state.backbone, ep, cfg.metric)?;
            Ok(logits.accuracy(&ep.query_labels()?))
        })
        .collect();
    let mut total = 0.0;
    for a in accs {
        total += a?;
    }
    Ok(total / episodes.len() as f64)
}

/// Result of a full meta-training run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub last: TrainState,
    pub best: TrainState,
    pub best_val_id_acc: Option<f64>,
    pub metrics: Vec<StepMetrics>,
}

/// Runs `meta_step` until `max_steps`; `task(step, index)` supplies training
/// episodes. The best state by held-out ID accuracy is retained.
pub fn train(
    init: TrainState,
    cfg: &TrainConfig,
    task: &(dyn Fn(u64, usize) -> Episode + Sync),
    val_id: &[Episode],
    val_ood: &[Episode],
) -> Result<TrainOutcome, MetaOptError> {
    cfg.validate()?;
    let mut state = init;
    let mut best = state.clone();
    let mut best_acc: Option<f64> = None;
    let mut metrics = Vec::with_capacity(cfg.max_steps as usize);
    while state.step < cfg.max_steps {
        let step = state.step;
        let batch: Vec<Episode> = (0..cfg.batch_tasks).into_par_iter().map(|i| task(step, i)).collect();
        let (next, mut row) = meta_step(&state, &batch, cfg)?;
        state = next;
        let due = cfg.eval_every > 0 && (state.step % cfg.eval_every == 0 || state.step == cfg.max_steps);
        if due && !val_id.is_empty() {
            let id = direct_accuracy(&state, val_id, cfg)?;
            row.val_id_acc = Some(id);
            if !val_ood.is_empty() {
                row.val_ood_acc = Some(direct_accuracy(&state, val_ood, cfg)?);
            }
            if best_acc.is_none_or(|b| id > b) {
                best_acc = Some(id);
                best = state.clone();
            }
        }
        metrics.push(row);
    }
    if best_acc.is_none() {
        best = state.clone();
    }
    Ok(TrainOutcome {
        last: state,
        best,
        best_val_id_acc: best_acc,
        metrics,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Metrics CSV with header `step,mean_ce,mean_kd,density_1..M,lambda_1..M,mean_alpha_1..M,val_id_acc,val_ood_acc`.
pub fn metrics_csv(rows: &[StepMetrics], m: usize) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["step".to_string(), "mean_ce".into(), "mean_kd".into()];
    for prefix in ["density", "lambda", "mean_alpha"] {
        header.extend((1..=m).map(|i| format!("{prefix}_{i}")));
    }
    header.push("val_id_acc".into());
    header.push("val_ood_acc".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![r.step.to_string(), format!("{}", r.mean_ce), format!("{}", r.mean_kd)];
        for group in [&r.density, &r.lambda, &r.mean_alpha] {
            rec.extend(group.iter().map(|v| format!("{v}")));
        }
        rec.push(fmt_opt(r.val_id_acc));
        rec.push(fmt_opt(r.val_ood_acc));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// One step of plain dense ProtoNet meta-tuning of `theta_delta` on
/// `theta_pre + theta_delta`, mean query cross-entropy, Adam.
pub fn protonet_meta_step(
    theta_pre: &ParamSet,
    theta_delta: &ParamSet,
    opt: &mut Adam,
    backbone: &BackboneSpec,
    batch: &[Episode],
    metric: Metric,
) -> Result<(ParamSet, f64), MetaOptError> {
    if batch.is_empty() {
        return Err(MetaOptError::EmptyBatch);
    }
    let outs: Vec<Result<(Vec<Tensor>, f64), MetaOptError>> = batch
        .par_iter()
        .map(|ep| {
            let tape = Tape::new();
            let delta = theta_delta.leaves(&tape);
            let theta: Vec<Var<'_>> = theta_pre
                .values()
                .iter()
                .zip(&delta)
                .map(|(p, &d)| tape.constant(p.clone()).add(d))
                .collect();
            let logits = query_logits_on_tape(&tape, backbone, &theta, ep, metric)?;
            let loss = ce_loss_on_tape(logits, &ep.query_labels()?);
            let g = tape.grad(loss, &delta)?;
            Ok((g, loss.item()))
        })
        .collect();
    let b = batch.len() as f64;
    let mut sum: Option<Vec<Tensor>> = None;
    let mut loss = 0.0;
    for out in outs {
        let (g, l) = out?;
        loss += l / b;
        sum = Some(match sum {
            None => g,
            Some(acc) => acc
                .iter()
                .zip(&g)
                .map(|(x, y)| x.zip_map(y, |p, q| p + q).expect("same shape"))
                .collect(),
        });
    }
    if !loss.is_finite() {
        return Err(MetaOptError::Divergence {
            step: 0,
            detail: "dense meta-tuning loss".into(),
        });
    }
    let grads: Vec<Tensor> = sum.expect("nonempty").iter().map(|g| g.map(|v| v / b)).collect();
    let next = theta_delta.with_values(opt.step(theta_delta.values(), &grads))?;
    Ok((next, loss))
}

/// Dense meta-tuning baseline; returns `theta_pre + theta_delta`.
pub fn dense_meta_tune(
    theta_pre: &ParamSet,
    backbone: &BackboneSpec,
    steps: u64,
    batch_tasks: usize,
    lr: f64,
    metric: Metric,
    task: &(dyn Fn(u64, usize) -> Episode + Sync),
) -> Result<ParamSet, MetaOptError> {
    let mut delta = theta_pre.zeros_like();
    let mut opt = Adam::for_tensors(lr, delta.values());
    for step in 0..steps {
        let batch: Vec<Episode> = (0..batch_tasks).into_par_iter().map(|i| task(step, i)).collect();
        delta = protonet_meta_step(theta_pre, &delta, &mut opt, backbone, &batch, metric)
            .map_err(|e| match e {
                MetaOptError::Divergence { detail, .. } => MetaOptError::Divergence { step, detail },
                other => other,
            })?
            .0;
    }
    Ok(ParamSet::axpy(1.0, &delta, theta_pre)?)
}

/// Settings for training a single mask on a fixed modulation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskFitConfig {
    pub tau: f64,
    pub steps: usize,
    pub lr: f64,
    pub lr_lambda: f64,
    pub beta_w: f64,
    pub kd_temp: f64,
    pub k_teacher: usize,
    pub lr_teacher: f64,
    pub metric: Metric,
    pub hc: HardConcrete,
    pub init_density: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for MaskFitConfig {
    fn default() -> Self {
        Self {
            tau: 0.9,
            steps: 3000,
            lr: 1e-2,
            lr_lambda: 1.0,
            beta_w: 1.0,
            kd_temp: 2.0,
            k_teacher: 1,
            lr_teacher: 0.1,
            metric: Metric::Sqeuclid,
            hc: HardConcrete::default(),
            init_density: 0.5,
            init_std: 0.01,
            seed: 0,
        }
    }
}

/// Per-step history of a mask fit. `violations[t]` and `lambdas[t]` are the
/// constraint value seen at step `t` and the multiplier after its update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaskFitTrace {
    pub densities: Vec<f64>,
    pub violations: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub losses: Vec<f64>,
}

/// Trains one mask with `alpha = [1]` and the router bypassed:
/// `theta = theta_pre + delta * z`. `loss(tape, step, merged)` is the task loss.
pub fn fit_mask<F>(
    theta_pre: &ParamSet,
    delta: &ParamSet,
    cfg: &MaskFitConfig,
    loss: F,
) -> Result<(HardConcreteMask, MaskFitTrace), MetaOptError>
where
    F: for<'t> Fn(&'t Tape, usize, &[Var<'t>]) -> Result<Var<'t>, MetaOptError>,
{
    if !(0.0..=1.0).contains(&cfg.tau) {
        return Err(MetaOptError::Config("tau must lie in [0, 1]".into()));
    }
    if !theta_pre.same_specs(delta) {
        return Err(ParamsError::SpecMismatch.into());
    }
    let specs = theta_pre.specs().clone();
    let mut mask = HardConcreteMask::init(
        specs,
        cfg.hc,
        cfg.init_density,
        cfg.init_std,
        &mut stream(cfg.seed, &[TAG_MASK_FIT, u64::MAX]),
    )?;
    let mut opt = Adam::for_tensors(cfg.lr, mask.log_alpha.values());
    let mut lambda = 0.0;
    let mut trace = MaskFitTrace::default();
    for step in 0..cfg.steps {
        let mut rng = stream(cfg.seed, &[TAG_MASK_FIT, step as u64]);
        let u = mask.sample_noise(&mut rng);
        let density = mask.expected_density();
        let violation = density - (1.0 - cfg.tau);
        let tape = Tape::new();
        let la = mask.log_alpha.leaves(&tape);
        let merged: Vec<Var<'_>> = theta_pre
            .values()
            .iter()
            .zip(delta.values())
            .zip(&la)
            .zip(u.values())
            .map(|(((p, d), &l), ut)| {
                let z = mask.hc.gate_on_tape(l, ut);
                tape.constant(p.clone()).add(z.mul(tape.constant(d.clone())))
            })
            .collect();
        let task = loss(&tape, step, &merged)?;
        let v = mask.hc.expected_density_on_tape(&tape, &la).add_scalar(-(1.0 - cfg.tau));
        let total = task.add(v.mul(tape.scalar(lambda)));
        if !total.item().is_finite() {
            return Err(MetaOptError::Divergence {
                step: step as u64,
                detail: format!("mask fit loss {} density {density} lambda {lambda}", task.item()),
            });
        }
        let grads = tape.grad(total, &la)?;
        mask.log_alpha = mask.log_alpha.with_values(opt.step(mask.log_alpha.values(), &grads))?;
        lambda = update_multiplier(lambda, violation, cfg.lr_lambda, 1.0);
        trace.densities.push(density);
        trace.violations.push(violation);
        trace.lambdas.push(lambda);
        trace.losses.push(task.item());
    }
    Ok((mask, trace))
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{LayerKind, LayerSpec};

    fn toy_backbone() -> BackboneSpec {
        BackboneSpec {
            input_dim: 3,
            width: 4,
            depth: 1,
            embed_dim: 4,
        }
    }

    fn toy_episode(seed: u64) -> Episode {
        use rand::Rng as _;
        let mut rng = stream(seed, &[]);
        let centers = [[1.0, 0.0, 0.5], [-0.5, 1.0, 0.0], [0.0, -1.0, 1.0]];
        let mut point = |k: usize| -> Vec<f64> { centers[k].iter().map(|c| c + 0.3 * rng.random_range(-1.0..1.0)).collect() };
        let mut support = Vec::new();
        let mut query = Vec::new();
        for k in 0..3 {
            for _ in 0..2 {
                support.push((point(k), k));
            }
            for _ in 0..3 {
                query.push((point(k), Some(k)));
            }
        }
        Episode {
            support,
            query,
            n_way: 3,
            domain: "toy".into(),
            is_ood: false,
        }
    }

    fn toy_cfg(m: usize) -> TrainConfig {
        TrainConfig {
            n_experts: m,
            batch_tasks: 2,
            max_steps: 3,
            router: RouterConfig {
                heads: 2,
                ff_mult: 1,
                gumbel_temp: 1.0,
            },
            ..TrainConfig::default()
        }
    }

    fn toy_state(cfg: &TrainConfig) -> TrainState {
        let bb = toy_backbone();
        TrainState::init(cfg, bb, bb.init(&mut stream(1, &[]))).unwrap()
    }

    #[test]
    fn violation_examples() {
        let specs: crate::params::Specs = vec![LayerSpec::new("w", LayerKind::LinearBias, vec![4], 0)].into();
        let hc = HardConcrete::default();
        for (density, want) in [(0.15, 0.05), (0.10, 0.0), (0.05, -0.05)] {
            let mask = HardConcreteMask::constant(specs.clone(), hc.log_alpha_for_density(density), hc).unwrap();
            let pool = ExpertPool::from_pretrained(ParamSet::zeros(specs.clone()), vec![mask], 0.9).unwrap();
            assert!((sparsity_violation(&pool)[0] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn multiplier_rule() {
        assert_eq!(update_multiplier(0.7, -0.01, 1.0, 1.0), 0.0);
        assert_eq!(update_multiplier(0.7, 0.0, 1.0, 1.0), 0.0);
        assert!((update_multiplier(0.7, 0.1, 2.0, 1.0) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn teacher_with_zero_lr_is_identity() {
        let bb = toy_backbone();
        let theta = bb.init(&mut stream(2, &[]));
        let t = make_teacher(&theta, &bb, &toy_episode(0), 3, 0.0, Metric::Sqeuclid).unwrap();
        assert_eq!(t, theta);
    }

    #[test]
    fn teacher_single_step_is_gradient_step() {
        let bb = toy_backbone();
        let theta = bb.init(&mut stream(2, &[]));
        let ep = toy_episode(0);
        let tape = Tape::new();
        let vars = theta.leaves(&tape);
        let logits = query_logits_on_tape(&tape, &bb, &vars, &ep, Metric::Sqeuclid).unwrap();
        let g = tape.grad(ce_loss_on_tape(logits, &ep.query_labels().unwrap()), &vars).unwrap();
        let t = make_teacher(&theta, &bb, &ep, 1, 0.05, Metric::Sqeuclid).unwrap();
        for ((tv, pv), gv) in t.values().iter().zip(theta.values()).zip(&g) {
            let want = pv.zip_map(gv, |p, q| p - 0.05 * q).unwrap();
            assert!(tv.max_abs_diff(&want) < 1e-15);
        }
    }

    #[test]
    fn tau_zero_keeps_lambda_zero() {
        let cfg = TrainConfig {
            tau: 0.0,
            ..toy_cfg(2)
        };
        let mut s = toy_state(&cfg);
        for step in 0..3 {
            let batch = vec![toy_episode(step), toy_episode(step + 10)];
            let (next, row) = meta_step(&s, &batch, &cfg).unwrap();
            assert!(row.lambda.iter().all(|&l| l == 0.0));
            s = next;
        }
    }

    #[test]
    fn saturated_dense_masks_raise_every_lambda() {
        let cfg = toy_cfg(3);
        let mut s = toy_state(&cfg);
        for mask in s.pool.masks.iter_mut() {
            mask.log_alpha = mask.log_alpha.map(|_| 40.0);
        }
        let (next, _) = meta_step(&s, &[toy_episode(1)], &cfg).unwrap();
        assert!(next.pool.lambdas.iter().all(|&l| l > 0.0));
    }

    #[test]
    fn theta_pre_is_never_updated() {
        let cfg = toy_cfg(2);
        let s0 = toy_state(&cfg);
        let out = train(s0.clone(), &cfg, &|step, i| toy_episode(step * 7 + i as u64), &[], &[]).unwrap();
        assert_eq!(out.last.pool.theta_pre, s0.pool.theta_pre);
        assert_ne!(out.last.pool.theta_delta, s0.pool.theta_delta);
    }

    #[test]
    fn zero_steps_returns_initialization() {
        let cfg = TrainConfig {
            max_steps: 0,
            ..toy_cfg(2)
        };
        let s0 = toy_state(&cfg);
        let out = train(s0.clone(), &cfg, &|_, _| toy_episode(0), &[toy_episode(5)], &[]).unwrap();
        assert_eq!(out.best, s0);
        assert!(out.metrics.is_empty());
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = toy_cfg(2);
        let run = || {
            let out = train(toy_state(&cfg), &cfg, &|step, i| toy_episode(step * 7 + i as u64), &[toy_episode(99)], &[]).unwrap();
            metrics_csv(&out.metrics, 2).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn anneal_is_linear() {
        let cfg = TrainConfig {
            gumbel_temp_final: Some(0.5),
            max_steps: 10,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.gumbel_temp_at(0), 1.0);
        assert!((cfg.gumbel_temp_at(5) - 0.75).abs() < 1e-12);
        assert_eq!(cfg.gumbel_temp_at(20), 0.5);
    }

    #[test]
    fn config_rejects_bad_values() {
        for bad in [
            TrainConfig { tau: 1.5, ..TrainConfig::default() },
            TrainConfig { k_teacher: 0, ..TrainConfig::default() },
            TrainConfig { lr_main: 0.0, ..TrainConfig::default() },
            TrainConfig { n_experts: 0, ..TrainConfig::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
