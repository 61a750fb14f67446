//! Synthetic few-shot domains and the pre-training routine that produces the
//! frozen backbone.
//!
//! Every domain draws class centers in a latent space where a few "signal"
//! coordinates separate classes and the rest carry large nuisance noise. Points
//! are pushed through a domain-specific invertible affine map and an optional
//! pointwise nonlinearity. OOD domains use held-out transforms.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneSpec;
use crate::diffcore::{Tape, Tensor, Var};
use crate::fewshot::{ce_loss, ce_loss_on_tape, protonet_logits, Episode, Metric};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::rng::{key, stream, Rng, TAG_CATALOG, TAG_EPISODE, TAG_INIT, TAG_PRETRAIN};

#[derive(Debug, Error, PartialEq)]
pub enum TaskError {
    #[error("unknown suite {0:?}")]
    UnknownSuite(String),
    #[error("OOD episodes exist only for the val and test splits")]
    OodTrainSplit,
    #[error("domain {name}: {reason}")]
    InvalidDomain { name: String, reason: String },
    #[error("invalid suite: {0}")]
    InvalidSuite(String),
    #[error("pre-training diverged at step {0}")]
    Divergence(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    GaussianClusters,
    RingClusters,
    WarpedClusters,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    Tanh,
    Asinh,
}

impl Nonlinearity {
    fn apply(self, x: f64) -> f64 {
        match self {
            Self::Tanh => 3.0 * (x / 3.0).tanh(),
            Self::Asinh => x.asinh(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Transform {
    /// Row-major `input_dim x input_dim`; inputs are `matrix * latent + shift`.
    pub matrix: Vec<Vec<f64>>,
    pub shift: Vec<f64>,
    pub nonlinearity: Option<Nonlinearity>,
}

impl Transform {
    fn dmatrix(&self) -> DMatrix<f64> {
        let n = self.matrix.len();
        DMatrix::from_fn(n, n, |i, j| self.matrix[i][j])
    }

    /// Random rotation with per-axis scales drawn from `scale_range`.
    pub fn random(dim: usize, scale_range: (f64, f64), shift_std: f64, nonlinearity: Option<Nonlinearity>, rng: &mut Rng) -> Self {
        let g: DMatrix<f64> = DMatrix::from_fn(dim, dim, |_, _| rng.sample(StandardNormal));
        let q = g.qr().q();
        let scales: Vec<f64> = (0..dim).map(|_| rng.random_range(scale_range.0..=scale_range.1)).collect();
        let matrix = (0..dim)
            .map(|i| (0..dim).map(|j| q[(i, j)] * scales[j]).collect())
            .collect();
        let shift = (0..dim)
            .map(|_| shift_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            matrix,
            shift,
            nonlinearity,
        }
    }

    pub fn apply(&self, latent: &[f64]) -> Vec<f64> {
        self.matrix
            .iter()
            .zip(&self.shift)
            .map(|(row, b)| {
                let v = row.iter().zip(latent).map(|(a, x)| a * x).sum::<f64>() + b;
                self.nonlinearity.map_or(v, |f| f.apply(v))
            })
            .collect()
    }

    /// Frobenius distance of the affine parts plus the shift distance.
    pub fn distance(&self, other: &Transform) -> f64 {
        let dm = (self.dmatrix() - other.dmatrix()).norm();
        let ds: f64 = self
            .shift
            .iter()
            .zip(&other.shift)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        dm + ds
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub name: String,
    pub kind: GeneratorKind,
    pub transform: Transform,
    pub noise_scale: f64,
    pub input_dim: usize,
    pub class_pool_size: usize,
    /// Latent coordinates that carry class identity.
    pub signal_dims: Vec<usize>,
    pub center_scale: f64,
    /// Noise multiplier on non-signal coordinates.
    pub nuisance_scale: f64,
    #[serde(with = "signed_seed")]
    pub seed: u64,
}

/// Seeds are written as the `i64` with the same bits, since TOML integers are signed.
mod signed_seed {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(seed: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_i64(*seed as i64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        Ok(i64::deserialize(d)? as u64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn code(self) -> u64 {
        match self {
            Self::Train => 0,
            Self::Val => 1,
            Self::Test => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Which {
    Id,
    Ood,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |reason: &str| {
            Err(TaskError::InvalidDomain {
                name: self.name.clone(),
                reason: reason.to_string(),
            })
        };
        let d = self.input_dim;
        if d == 0 || self.transform.matrix.len() != d || self.transform.matrix.iter().any(|r| r.len() != d) {
            return bad("transform shape does not match input_dim");
        }
        if self.transform.shift.len() != d {
            return bad("shift length does not match input_dim");
        }
        if !(self.noise_scale > 0.0) {
            return bad("noise_scale must be positive");
        }
        if self.transform.dmatrix().determinant().abs() < 1e-9 {
            return bad("affine part is singular");
        }
        if self.class_pool_size < 10 {
            return bad("class pool needs at least 10 classes");
        }
        if self.signal_dims.is_empty() || self.signal_dims.iter().any(|&s| s >= d) {
            return bad("signal_dims out of range");
        }
        Ok(())
    }

    /// Class ids available to a split: 60% train, 20% val, 20% test.
    pub fn split_classes(&self, split: Split) -> std::ops::Range<usize> {
        let n = self.class_pool_size;
        let a = n * 6 / 10;
        let b = n * 8 / 10;
        match split {
            Split::Train => 0..a,
            Split::Val => a..b,
            Split::Test => b..n,
        }
    }

    /// Latent center of `class`, deterministic in the domain seed.
    pub fn class_center(&self, class: usize) -> Vec<f64> {
        let mut rng = stream(self.seed, &[TAG_CATALOG, class as u64]);
        let mut c = vec![0.0; self.input_dim];
        match self.kind {
            GeneratorKind::GaussianClusters | GeneratorKind::WarpedClusters => {
                for &s in &self.signal_dims {
                    c[s] = self.center_scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
            GeneratorKind::RingClusters => {
                let angle = rng.random_range(0.0..std::f64::consts::TAU);
                let (first, rest) = self.signal_dims.split_at(self.signal_dims.len().min(2));
                c[first[0]] = 1.5 * self.center_scale * angle.cos();
                if let Some(&s1) = first.get(1) {
                    c[s1] = 1.5 * self.center_scale * angle.sin();
                }
                for &s in rest {
                    c[s] = 0.5 * self.center_scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        c
    }

    /// One input from `class`.
    pub fn sample_point(&self, center: &[f64], rng: &mut Rng) -> Vec<f64> {
        let mut z: Vec<f64> = center.to_vec();
        for (i, zi) in z.iter_mut().enumerate() {
            let scale = if self.signal_dims.contains(&i) {
                self.noise_scale
            } else {
                self.noise_scale * self.nuisance_scale
            };
            *zi += scale * rng.sample::<f64, _>(StandardNormal);
        }
        if self.kind == GeneratorKind::WarpedClusters {
            let n = z.len();
            let warped: Vec<f64> = (0..n).map(|i| z[i] + 0.5 * z[(i + 1) % n].sin()).collect();
            z = warped;
        }
        self.transform.apply(&z)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteSpec {
    pub name: String,
    pub version: String,
    pub id_domains: Vec<DomainSpec>,
    pub ood_domains: Vec<DomainSpec>,
    /// Inclusive ranges.
    pub n_way: (usize, usize),
    pub k_shot: (usize, usize),
    pub q_query: usize,
    pub seed: u64,
    pub min_ood_distance: f64,
}

impl SuiteSpec {
    pub fn validate(&self) -> Result<(), TaskError> {
        let bad = |msg: String| Err(TaskError::InvalidSuite(msg));
        if self.id_domains.is_empty() {
            return bad("no ID domains".into());
        }
        if self.n_way.0 < 2 || self.n_way.0 > self.n_way.1 || self.k_shot.0 < 1 || self.k_shot.0 > self.k_shot.1 {
            return bad("empty or degenerate n_way/k_shot range".into());
        }
        if self.q_query == 0 {
            return bad("q_query must be positive".into());
        }
        let dim = self.input_dim();
        for d in self.id_domains.iter().chain(&self.ood_domains) {
            d.validate()?;
            if d.input_dim != dim {
                return bad(format!("domain {} has input_dim {}", d.name, d.input_dim));
            }
            let smallest = [Split::Val, Split::Test]
                .iter()
                .map(|&s| d.split_classes(s).len())
                .min()
                .unwrap_or(0);
            if smallest < self.n_way.1 {
                return bad(format!("domain {} has too few held-out classes", d.name));
            }
        }
        for o in &self.ood_domains {
            for i in &self.id_domains {
                if o.name == i.name {
                    return bad(format!("domain {} is both ID and OOD", o.name));
                }
                let dist = o.transform.distance(&i.transform);
                if dist < self.min_ood_distance {
                    return bad(format!("OOD {} within {dist:.3} of ID {}", o.name, i.name));
                }
            }
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.id_domains.first().map_or(0, |d| d.input_dim)
    }

    pub fn domains(&self, which: Which) -> &[DomainSpec] {
        match which {
            Which::Id => &self.id_domains,
            Which::Ood => &self.ood_domains,
        }
    }
}

fn which_code(w: Which) -> u64 {
    match w {
        Which::Id => 0,
        Which::Ood => 1,
    }
}

/// Episode `index` of `(split, which)`; labels are remapped to `0..n_way`.
pub fn sample_episode(spec: &SuiteSpec, split: Split, which: Which, index: u64) -> Result<Episode, TaskError> {
    if which == Which::Ood && split == Split::Train {
        return Err(TaskError::OodTrainSplit);
    }
    let domains = spec.domains(which);
    if domains.is_empty() {
        return Err(TaskError::InvalidSuite("no domains of the requested kind".into()));
    }
    let mut rng = stream(spec.seed, &[TAG_EPISODE, split.code(), which_code(which), index]);
    let domain = &domains[rng.random_range(0..domains.len())];
    let n_way = rng.random_range(spec.n_way.0..=spec.n_way.1);
    let k_shot = rng.random_range(spec.k_shot.0..=spec.k_shot.1);
    let mut pool: Vec<usize> = domain.split_classes(split).collect();
    pool.shuffle(&mut rng);
    let classes = &pool[..n_way.min(pool.len())];
    let mut support = Vec::with_capacity(n_way * k_shot);
    let mut query = Vec::with_capacity(n_way * spec.q_query);
    for (label, &class) in classes.iter().enumerate() {
        let center = domain.class_center(class);
        for _ in 0..k_shot {
            support.push((domain.sample_point(&center, &mut rng), label));
        }
        for _ in 0..spec.q_query {
            query.push((domain.sample_point(&center, &mut rng), Some(label)));
        }
    }
    Ok(Episode {
        support,
        query,
        n_way: classes.len(),
        domain: domain.name.clone(),
        is_ood: which == Which::Ood,
    })
}

fn make_domain(
    name: &str,
    kind: GeneratorKind,
    nonlinearity: Option<Nonlinearity>,
    signal_dims: Vec<usize>,
    base: u64,
) -> DomainSpec {
    let dim = 16;
    let seed = key(base, &[TAG_CATALOG, name.bytes().fold(0u64, |h, b| h.wrapping_mul(131).wrapping_add(b as u64))]);
    let mut rng = stream(seed, &[TAG_INIT]);
    DomainSpec {
        name: name.to_string(),
        kind,
        transform: Transform::random(dim, (0.6, 1.6), 0.5, nonlinearity, &mut rng),
        noise_scale: 0.55,
        input_dim: dim,
        class_pool_size: 60,
        signal_dims,
        center_scale: 1.0,
        nuisance_scale: 2.0,
        seed,
    }
}

pub const CATALOG_VERSION: &str = "1";

/// Built-in suites.
pub fn suite_catalog() -> Vec<SuiteSpec> {
    let base = key(0x5eed, &[TAG_CATALOG, CATALOG_VERSION.bytes().map(u64::from).sum()]);
    use GeneratorKind::*;
    let id_domains = vec![
        make_domain("gauss-a", GaussianClusters, None, vec![0, 1, 2, 3, 4, 5], base),
        make_domain("gauss-b", GaussianClusters, Some(Nonlinearity::Tanh), vec![4, 5, 6, 7, 8, 9], base),
        make_domain("ring-a", RingClusters, None, vec![8, 9, 10, 11, 12, 13], base),
        make_domain("warp-a", WarpedClusters, Some(Nonlinearity::Asinh), vec![10, 11, 12, 13, 14, 15], base),
    ];
    let ood_domains = vec![
        make_domain("gauss-ood", GaussianClusters, Some(Nonlinearity::Asinh), vec![1, 3, 5, 7, 9, 11], base),
        make_domain("ring-ood", RingClusters, Some(Nonlinearity::Tanh), vec![2, 6, 10, 14, 0, 4], base),
        make_domain("warp-ood", WarpedClusters, None, vec![3, 7, 11, 15, 1, 5], base),
    ];
    vec![SuiteSpec {
        name: "md-mini".into(),
        version: CATALOG_VERSION.into(),
        id_domains,
        ood_domains,
        n_way: (5, 5),
        k_shot: (2, 5),
        q_query: 10,
        seed: 7,
        min_ood_distance: 1.0,
    }]
}

pub fn find_suite(name: &str) -> Result<SuiteSpec, TaskError> {
    suite_catalog()
        .into_iter()
        .find(|s| s.name == name)
        .ok_or_else(|| TaskError::UnknownSuite(name.to_string()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Rescale the projection afterwards so episode cross-entropy is minimal.
    pub calibrate: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1500,
            batch: 64,
            lr: 3e-3,
            seed: 0,
            calibrate: true,
        }
    }
}

/// Supervised classification over the pooled train classes of the ID domains;
/// the throwaway linear head is discarded.
pub fn pretrain_backbone(spec: &SuiteSpec, backbone: &BackboneSpec, cfg: &PretrainConfig) -> Result<ParamSet, TaskError> {
    spec.validate()?;
    let mut params = backbone.init(&mut stream(cfg.seed, &[TAG_PRETRAIN, TAG_INIT]));
    let classes: Vec<(usize, usize)> = spec
        .id_domains
        .iter()
        .enumerate()
        .flat_map(|(d, dom)| dom.split_classes(Split::Train).map(move |c| (d, c)))
        .collect();
    let centers: Vec<Vec<f64>> = classes
        .iter()
        .map(|&(d, c)| spec.id_domains[d].class_center(c))
        .collect();
    let n_cls = classes.len();
    let head_std = (1.0 / backbone.embed_dim as f64).sqrt();
    let mut hrng = stream(cfg.seed, &[TAG_PRETRAIN, TAG_INIT, 1]);
    let normal = Normal::new(0.0, head_std).expect("positive std");
    let mut head = vec![
        Tensor::new(
            vec![backbone.embed_dim, n_cls],
            (0..backbone.embed_dim * n_cls).map(|_| normal.sample(&mut hrng)).collect(),
        )
        .expect("head shape"),
        Tensor::zeros(&[n_cls]),
    ];
    let mut opt_body = Adam::for_tensors(cfg.lr, params.values());
    let mut opt_head = Adam::for_tensors(cfg.lr, &head);
    for step in 0..cfg.steps {
        let mut rng = stream(cfg.seed, &[TAG_PRETRAIN, step as u64]);
        let mut xs = Vec::with_capacity(cfg.batch);
        let mut ys = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let k = rng.random_range(0..n_cls);
            let d = classes[k].0;
            xs.push(spec.id_domains[d].sample_point(&centers[k], &mut rng));
            ys.push(k);
        }
        let tape = Tape::new();
        let body = params.leaves(&tape);
        let hv: Vec<Var<'_>> = head.iter().map(|t| tape.leaf(t.clone())).collect();
        let x = tape.constant(Tensor::from_rows(&xs).expect("batch rows"));
        let logits = backbone.forward(&body, x).matmul(hv[0]).add_row(hv[1]);
        let loss = ce_loss_on_tape(logits, &ys);
        let mut all = body.clone();
        all.extend_from_slice(&hv);
        let grads = tape.grad(loss, &all).map_err(|_| TaskError::Divergence(step))?;
        if !loss.item().is_finite() {
            return Err(TaskError::Divergence(step));
        }
        let (gb, gh) = grads.split_at(body.len());
        params = params
            .with_values(opt_body.step(params.values(), gb))
            .expect("same specs");
        head = opt_head.step(&head, gh);
    }
    if cfg.calibrate && cfg.steps > 0 {
        let episodes = episode_set(spec, Split::Train, Which::Id, 64)?;
        let c = calibrate_scale(&params, backbone, &episodes);
        params = scale_projection(&params, c);
    }
    Ok(params)
}

/// Multiplies the projection layer by `c`, which scales squared distances by `c^2`.
pub fn scale_projection(params: &ParamSet, c: f64) -> ParamSet {
    let values = params
        .iter()
        .map(|(s, v)| if s.name.starts_with("proj.") { v.map(|x| c * x) } else { v.clone() })
        .collect();
    params.with_values(values).expect("same specs")
}

/// Projection scale from a log-spaced grid minimizing mean query cross-entropy.
pub fn calibrate_scale(params: &ParamSet, backbone: &BackboneSpec, episodes: &[Episode]) -> f64 {
    let mut best = (f64::INFINITY, 1.0);
    for k in -24..=4 {
        let c = 2f64.powf(k as f64 / 4.0);
        let scaled = scale_projection(params, c);
        let loss: f64 = episodes
            .par_iter()
            .map(|ep| {
                let logits = protonet_logits(&scaled, backbone, ep, Metric::Sqeuclid).expect("valid episode");
                ce_loss(&logits, &ep.query_labels().expect("labeled"))
            })
            .sum();
        if loss < best.0 {
            best = (loss, c);
        }
    }
    best.1
}

/// `count` episodes in parallel, indices `0..count`.
/// `count` ID episodes followed by `count` OOD episodes (none if the suite has no OOD domains).
pub fn id_ood_episodes(spec: &SuiteSpec, split: Split, count: usize) -> Result<Vec<Episode>, TaskError> {
    let mut eps = episode_set(spec, split, Which::Id, count)?;
    if !spec.ood_domains.is_empty() {
        eps.extend(episode_set(spec, split, Which::Ood, count)?);
    }
    Ok(eps)
}

pub fn episode_set(spec: &SuiteSpec, split: Split, which: Which, count: usize) -> Result<Vec<Episode>, TaskError> {
    (0..count as u64)
        .into_par_iter()
        .map(|i| sample_episode(spec, split, which, i))
        .collect()
}

/// Debug dump with header `episode,domain,is_ood,set,label,x_1..x_d`.
pub fn episodes_csv(episodes: &[Episode]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let dim = episodes.first().map_or(0, |e| e.support[0].0.len());
    let mut header = vec!["episode".to_string(), "domain".into(), "is_ood".into(), "set".into(), "label".into()];
    header.extend((1..=dim).map(|i| format!("x_{i}")));
    w.write_record(&header)?;
    for (i, ep) in episodes.iter().enumerate() {
        let rows = ep
            .support
            .iter()
            .map(|(x, y)| ("support", x, Some(*y)))
            .chain(ep.query.iter().map(|(x, y)| ("query", x, *y)));
        for (set, x, y) in rows {
            let mut rec = vec![
                i.to_string(),
                ep.domain.clone(),
                ep.is_ood.to_string(),
                set.to_string(),
                y.map(|v| v.to_string()).unwrap_or_default(),
            ];
            rec.extend(x.iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn episodes_json(episodes: &[Episode]) -> serde_json::Result<String> {
    serde_json::to_string_pretty(episodes)
}
