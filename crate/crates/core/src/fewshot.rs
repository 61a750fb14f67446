//! Episodes, the prototype classifier, and the episodic losses.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::BackboneSpec;
use crate::diffcore::{log_softmax_rows, softmax_rows, DiffError, Tape, Tensor, Var};
use crate::params::ParamSet;

#[derive(Debug, Error, PartialEq)]
pub enum FewShotError {
    #[error("query labels are missing")]
    MissingLabels,
    #[error("class {0} has no support example")]
    EmptyClass(usize),
    #[error("label {label} outside 0..{n_way}")]
    LabelOutOfRange { label: usize, n_way: usize },
    #[error("input has dimension {actual}, expected {expected}")]
    InputDim { expected: usize, actual: usize },
    #[error("episode has an empty support or query set")]
    Empty,
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    #[default]
    Sqeuclid,
    Cosine,
}

/// One few-shot task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub support: Vec<(Vec<f64>, usize)>,
    pub query: Vec<(Vec<f64>, Option<usize>)>,
    pub n_way: usize,
    pub domain: String,
    pub is_ood: bool,
}

impl Episode {
    pub fn validate(&self) -> Result<(), FewShotError> {
        if self.support.is_empty() || self.query.is_empty() {
            return Err(FewShotError::Empty);
        }
        let dim = self.support[0].0.len();
        let mut seen = vec![false; self.n_way];
        for (x, y) in &self.support {
            if x.len() != dim {
                return Err(FewShotError::InputDim {
                    expected: dim,
                    actual: x.len(),
                });
            }
            *seen.get_mut(*y).ok_or(FewShotError::LabelOutOfRange {
                label: *y,
                n_way: self.n_way,
            })? = true;
        }
        if let Some(k) = seen.iter().position(|s| !s) {
            return Err(FewShotError::EmptyClass(k));
        }
        for (x, y) in &self.query {
            if x.len() != dim {
                return Err(FewShotError::InputDim {
                    expected: dim,
                    actual: x.len(),
                });
            }
            if let Some(label) = *y {
                if label >= self.n_way {
                    return Err(FewShotError::LabelOutOfRange {
                        label,
                        n_way: self.n_way,
                    });
                }
            }
        }
        Ok(())
    }

    pub fn support_inputs(&self) -> Tensor {
        stack(self.support.iter().map(|(x, _)| x.as_slice()))
    }

    pub fn support_labels(&self) -> Vec<usize> {
        self.support.iter().map(|&(_, y)| y).collect()
    }

    pub fn query_inputs(&self) -> Tensor {
        stack(self.query.iter().map(|(x, _)| x.as_slice()))
    }

    pub fn query_labels(&self) -> Result<Vec<usize>, FewShotError> {
        self.query
            .iter()
            .map(|(_, y)| y.ok_or(FewShotError::MissingLabels))
            .collect()
    }

    /// Smallest number of support examples in any class.
    pub fn min_shots(&self) -> usize {
        let mut counts = vec![0usize; self.n_way];
        for &(_, y) in &self.support {
            counts[y] += 1;
        }
        counts.into_iter().min().unwrap_or(0)
    }

    /// Copy with query labels removed, as seen at meta-test time.
    pub fn without_query_labels(&self) -> Episode {
        Episode {
            query: self.query.iter().map(|(x, _)| (x.clone(), None)).collect(),
            ..self.clone()
        }
    }
}

fn stack<'a>(rows: impl Iterator<Item = &'a [f64]>) -> Tensor {
    let rows: Vec<Vec<f64>> = rows.map(<[f64]>::to_vec).collect();
    Tensor::from_rows(&rows).expect("episode rows validated")
}

/// Per-query class scores.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(pub Tensor);

impl Logits {
    pub fn probabilities(&self) -> Tensor {
        softmax_rows(&self.0)
    }

    pub fn predictions(&self) -> Vec<usize> {
        let c = self.0.cols();
        self.0
            .data()
            .chunks(c)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect()
    }

    pub fn accuracy(&self, labels: &[usize]) -> f64 {
        let preds = self.predictions();
        let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// `[n_way, n]` matrix whose product with embeddings gives class means.
pub fn class_mean_matrix(labels: &[usize], n_way: usize) -> Result<Tensor, FewShotError> {
    let n = labels.len();
    let mut counts = vec![0usize; n_way];
    for &y in labels {
        if y >= n_way {
            return Err(FewShotError::LabelOutOfRange { label: y, n_way });
        }
        counts[y] += 1;
    }
    if let Some(k) = counts.iter().position(|&c| c == 0) {
        return Err(FewShotError::EmptyClass(k));
    }
    let mut data = vec![0.0; n_way * n];
    for (i, &y) in labels.iter().enumerate() {
        data[y * n + i] = 1.0 / counts[y] as f64;
    }
    Ok(Tensor::matrix(n_way, n, data)?)
}

pub(crate) fn one_hot(labels: &[usize], n_way: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * n_way];
    for (i, &y) in labels.iter().enumerate() {
        data[i * n_way + y] = 1.0;
    }
    Tensor::raw_matrix(labels.len(), n_way, data)
}

fn distance_logits<'t>(query: Var<'t>, centroids: Var<'t>, metric: Metric) -> Var<'t> {
    match metric {
        Metric::Sqeuclid => query.sq_dist(centroids).scale(-1.0),
        Metric::Cosine => query
            .normalize_rows()
            .matmul(centroids.normalize_rows().t())
            .add_scalar(-1.0),
    }
}

/// `-d(query, c_k)` with centroids taken from labeled support embeddings.
pub fn protonet_logits_on_tape<'t>(
    support_emb: Var<'t>,
    support_labels: &[usize],
    n_way: usize,
    query_emb: Var<'t>,
    metric: Metric,
) -> Result<Var<'t>, FewShotError> {
    let tape = support_emb.tape();
    let means = tape.constant(class_mean_matrix(support_labels, n_way)?);
    let centroids = means.matmul(support_emb);
    Ok(distance_logits(query_emb, centroids, metric))
}

/// Support-set classification logits, optionally with leave-one-out centroids
/// for the true class of each point (classes with one shot keep the full centroid).
pub fn support_logits_on_tape<'t>(
    support_emb: Var<'t>,
    labels: &[usize],
    n_way: usize,
    metric: Metric,
    leave_one_out: bool,
) -> Result<Var<'t>, FewShotError> {
    if !leave_one_out {
        return protonet_logits_on_tape(support_emb, labels, n_way, support_emb, metric);
    }
    let tape = support_emb.tape();
    let n = labels.len();
    let full = class_mean_matrix(labels, n_way)?;
    let mut counts = vec![0usize; n_way];
    for &y in labels {
        counts[y] += 1;
    }
    let mut loo = vec![0.0; n * n];
    for (j, &yj) in labels.iter().enumerate() {
        for (i, &yi) in labels.iter().enumerate() {
            loo[j * n + i] = if counts[yj] >= 2 {
                if i != j && yi == yj {
                    1.0 / (counts[yj] - 1) as f64
                } else {
                    0.0
                }
            } else {
                full.data()[yj * n + i]
            };
        }
    }
    let centroids = tape.constant(full).matmul(support_emb);
    let all = distance_logits(support_emb, centroids, metric);
    let own_centroid = tape.constant(Tensor::raw_matrix(n, n, loo)).matmul(support_emb);
    let d = support_emb.value().cols();
    let ones_d = tape.constant(Tensor::ones(&[d, 1]));
    let own = match metric {
        Metric::Sqeuclid => {
            let diff = support_emb.sub(own_centroid);
            diff.mul(diff).matmul(ones_d).scale(-1.0)
        }
        Metric::Cosine => support_emb
            .normalize_rows()
            .mul(own_centroid.normalize_rows())
            .matmul(ones_d)
            .add_scalar(-1.0),
    };
    let oh = one_hot(labels, n_way);
    let not_oh = oh.map(|v| 1.0 - v);
    let own_b = own.matmul(tape.constant(Tensor::ones(&[1, n_way])));
    Ok(all
        .mul(tape.constant(not_oh))
        .add(own_b.mul(tape.constant(oh))))
}

/// Mean negative log-likelihood of `labels`.
pub fn ce_loss_on_tape<'t>(logits: Var<'t>, labels: &[usize]) -> Var<'t> {
    let tape = logits.tape();
    let k = logits.value().cols();
    let oh = tape.constant(one_hot(labels, k));
    logits
        .log_softmax_rows()
        .mul(oh)
        .sum()
        .scale(-1.0 / labels.len() as f64)
}

/// `temp^2 * mean_q KL(softmax(teacher/temp) || softmax(student/temp))`; the
/// teacher is a constant.
pub fn kd_loss_on_tape<'t>(student: Var<'t>, teacher: &Tensor, temp: f64) -> Var<'t> {
    let tape = student.tape();
    let p = softmax_rows(&teacher.map(|v| v / temp));
    let n = p.rows() as f64;
    let neg_entropy: f64 = p
        .data()
        .iter()
        .map(|&pv| if pv > 0.0 { pv * pv.ln() } else { 0.0 })
        .sum();
    let cross = student
        .scale(1.0 / temp)
        .log_softmax_rows()
        .mul(tape.constant(p))
        .sum();
    let t2 = temp * temp;
    cross.affine(-t2 / n, t2 * neg_entropy / n)
}

/// Support and query embeddings of `params` for `episode`.
pub fn embed_episode<'t>(
    tape: &'t Tape,
    backbone: &BackboneSpec,
    params: &[Var<'t>],
    episode: &Episode,
) -> (Var<'t>, Var<'t>) {
    let s = backbone.forward(params, tape.constant(episode.support_inputs()));
    let q = backbone.forward(params, tape.constant(episode.query_inputs()));
    (s, q)
}

pub fn query_logits_on_tape<'t>(
    tape: &'t Tape,
    backbone: &BackboneSpec,
    params: &[Var<'t>],
    episode: &Episode,
    metric: Metric,
) -> Result<Var<'t>, FewShotError> {
    let (s, q) = embed_episode(tape, backbone, params, episode);
    protonet_logits_on_tape(s, &episode.support_labels(), episode.n_way, q, metric)
}

/// Support cross-entropy of `params` (leave-one-out centroids when requested
/// and every class has at least two shots).
pub fn support_loss_on_tape<'t>(
    tape: &'t Tape,
    backbone: &BackboneSpec,
    params: &[Var<'t>],
    episode: &Episode,
    metric: Metric,
    leave_one_out: bool,
) -> Result<Var<'t>, FewShotError> {
    let s = backbone.forward(params, tape.constant(episode.support_inputs()));
    let labels = episode.support_labels();
    let loo = leave_one_out && episode.min_shots() >= 2;
    let logits = support_logits_on_tape(s, &labels, episode.n_way, metric, loo)?;
    Ok(ce_loss_on_tape(logits, &labels))
}

fn constants<'t>(tape: &'t Tape, params: &ParamSet) -> Vec<Var<'t>> {
    params.values().iter().map(|v| tape.constant(v.clone())).collect()
}

pub fn protonet_logits(
    net: &ParamSet,
    backbone: &BackboneSpec,
    episode: &Episode,
    metric: Metric,
) -> Result<Logits, FewShotError> {
    let tape = Tape::new();
    let vars = constants(&tape, net);
    let logits = query_logits_on_tape(&tape, backbone, &vars, episode, metric)?;
    tape.status()?;
    Ok(Logits((*logits.value()).clone()))
}

pub fn support_loss(
    net: &ParamSet,
    backbone: &BackboneSpec,
    episode: &Episode,
    metric: Metric,
    leave_one_out: bool,
) -> Result<f64, FewShotError> {
    let tape = Tape::new();
    let vars = constants(&tape, net);
    let loss = support_loss_on_tape(&tape, backbone, &vars, episode, metric, leave_one_out)?;
    tape.status()?;
    Ok(loss.item())
}

pub fn ce_loss(logits: &Logits, labels: &[usize]) -> f64 {
    let lsm = log_softmax_rows(&logits.0);
    let k = lsm.cols();
    -labels
        .iter()
        .enumerate()
        .map(|(i, &y)| lsm.data()[i * k + y])
        .sum::<f64>()
        / labels.len() as f64
}

pub fn kd_loss(student: &Logits, teacher: &Logits, temp: f64) -> f64 {
    let tape = Tape::new();
    let s = tape.constant(student.0.clone());
    kd_loss_on_tape(s, &teacher.0, temp).item()
}

/// `beta_w * CE(query) + (1 - beta_w) * KD(query)` of a merged model against its teacher.
pub fn episode_meta_loss(
    theta_i: &ParamSet,
    theta_tr: &ParamSet,
    backbone: &BackboneSpec,
    episode: &Episode,
    beta_w: f64,
    temp: f64,
    metric: Metric,
) -> Result<f64, FewShotError> {
    let labels = episode.query_labels()?;
    let student = protonet_logits(theta_i, backbone, episode, metric)?;
    let teacher = protonet_logits(theta_tr, backbone, episode, metric)?;
    Ok(beta_w * ce_loss(&student, &labels) + (1.0 - beta_w) * kd_loss(&student, &teacher, temp))
}
