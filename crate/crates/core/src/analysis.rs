//! Diagnostics over a trained pool: per-layer sparsity, mask overlap,
//! meta-gradient alignment and expert-selection statistics. Each report
//! renders to its own CSV; values are plain functions of the inputs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::diffcore::{Tape, Tensor};
use crate::eval::{parse_results_csv, EpisodeResult, ResultsCsvError};
use crate::experts::ExpertPool;
use crate::fewshot::Episode;
use crate::l0mask::{binarize, overlap_ratio};
use crate::metaopt::{episode_loss_on_tape, EpisodeContext, MetaOptError, TrainConfig, TrainState, TrainVars};
use crate::rng::{stream, TAG_ANALYSIS};
use crate::router::selection_similarity;
use crate::tasks::{episode_set, Split, TaskError, Which};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub layer: String,
    pub kind: String,
    pub depth_index: usize,
    pub expert: usize,
    pub sparsity: f64,
    pub density: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSparsity {
    pub group: String,
    pub mean_sparsity: f64,
    /// Spread of the per-expert sparsities.
    pub std_across_experts: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SparsityReport {
    pub rows: Vec<SparsityRow>,
    /// Expected density of each expert over all parameters.
    pub expert_density: Vec<f64>,
    pub by_layer: Vec<GroupSparsity>,
    pub by_kind: Vec<GroupSparsity>,
    pub by_depth: Vec<GroupSparsity>,
    /// Probability an entry is zero in every expert, averaged over entries.
    pub merged_sparsity: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-expert, parameter-weighted sparsity inside each group, then the
/// mean and spread across experts.
fn group_by(pool: &ExpertPool, key: impl Fn(usize) -> String) -> Vec<GroupSparsity> {
    let specs = pool.theta_pre.specs();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for i in 0..specs.len() {
        groups.entry(key(i)).or_default().push(i);
    }
    groups
        .into_iter()
        .map(|(group, layers)| {
            let per_expert: Vec<f64> = pool
                .masks
                .iter()
                .map(|mask| {
                    let p = mask.prob_nonzero();
                    let (mut dens, mut n) = (0.0, 0usize);
                    for &l in &layers {
                        dens += p.values()[l].data().iter().sum::<f64>();
                        n += specs[l].numel();
                    }
                    1.0 - dens / n.max(1) as f64
                })
                .collect();
            let (mean_sparsity, std_across_experts) = mean_std(&per_expert);
            GroupSparsity {
                group,
                mean_sparsity,
                std_across_experts,
            }
        })
        .collect()
}

pub fn sparsity_report(pool: &ExpertPool) -> SparsityReport {
    let specs = pool.theta_pre.specs();
    let mut rows = Vec::new();
    let probs: Vec<_> = pool.masks.iter().map(|m| m.prob_nonzero()).collect();
    for (li, spec) in specs.iter().enumerate() {
        for (m, p) in probs.iter().enumerate() {
            let t = &p.values()[li];
            let density = t.data().iter().sum::<f64>() / t.numel().max(1) as f64;
            rows.push(SparsityRow {
                layer: spec.name.clone(),
                kind: spec.kind.as_str().to_string(),
                depth_index: spec.depth_index,
                expert: m,
                sparsity: 1.0 - density,
                density,
            });
        }
    }
    let expert_density = pool.masks.iter().map(|m| m.expected_density()).collect();
    let flat: Vec<Vec<f64>> = probs.iter().map(|p| p.flatten()).collect();
    let dim = pool.theta_pre.total_dim();
    let merged_sparsity = (0..dim)
        .map(|i| flat.iter().map(|f| 1.0 - f[i]).product::<f64>())
        .sum::<f64>()
        / dim.max(1) as f64;
    SparsityReport {
        rows,
        expert_density,
        by_layer: group_by(pool, |i| specs[i].name.clone()),
        by_kind: group_by(pool, |i| specs[i].kind.as_str().to_string()),
        by_depth: group_by(pool, |i| specs[i].depth_index.to_string()),
        merged_sparsity,
    }
}

/// Columns: `scope,layer,kind,depth_index,expert,sparsity,density,std_across_experts`.
pub fn sparsity_csv(r: &SparsityReport) -> String {
    let mut s = String::from("scope,layer,kind,depth_index,expert,sparsity,density,std_across_experts\n");
    for row in &r.rows {
        let _ = writeln!(
            s,
            "layer,{},{},{},{},{},{},",
            row.layer, row.kind, row.depth_index, row.expert, row.sparsity, row.density
        );
    }
    for (m, d) in r.expert_density.iter().enumerate() {
        let _ = writeln!(s, "expert,,,,{m},{},{d},", 1.0 - d);
    }
    for (scope, groups) in [("layer_group", &r.by_layer), ("kind", &r.by_kind), ("depth", &r.by_depth)] {
        for g in groups {
            let (layer, kind, depth) = match scope {
                "layer_group" => (g.group.as_str(), "", ""),
                "kind" => ("", g.group.as_str(), ""),
                _ => ("", "", g.group.as_str()),
            };
            let _ = writeln!(
                s,
                "{scope},{layer},{kind},{depth},,{},{},{}",
                g.mean_sparsity,
                1.0 - g.mean_sparsity,
                g.std_across_experts
            );
        }
    }
    let _ = writeln!(s, "merged,,,,,{},{},", r.merged_sparsity, 1.0 - r.merged_sparsity);
    s
}

/// Pairwise intersection-over-union of the binarized deterministic gates.
pub fn mask_overlap_matrix(pool: &ExpertPool, threshold: f64) -> Vec<Vec<f64>> {
    let bins: Vec<_> = pool.deterministic_gates().iter().map(|g| binarize(g, threshold)).collect();
    bins.iter()
        .map(|a| bins.iter().map(|b| overlap_ratio(a, b).expect("masks share specs")).collect())
        .collect()
}

/// Square matrix with a leading label column; `labels` name rows and columns.
pub fn matrix_csv(labels: &[String], m: &[Vec<f64>]) -> String {
    let mut s = String::from("row");
    for l in labels {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for (l, row) in labels.iter().zip(m) {
        s.push_str(l);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    (na > 0.0 && nb > 0.0).then(|| dot / (na * nb))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairAlignment {
    pub pair: usize,
    pub delta: f64,
    pub experts: Vec<f64>,
    /// Set when some cosine had a zero-norm side and was reported as 0.
    pub zero_gradient: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub pairs: Vec<PairAlignment>,
    pub mean_delta: f64,
    pub mean_experts: Vec<f64>,
}

/// Flattened gradient of one episode's meta-loss with respect to the shared modulation.
pub fn delta_meta_gradient(
    state: &TrainState,
    episode: &Episode,
    cfg: &TrainConfig,
    noise_key: &[u64],
) -> Result<Vec<f64>, MetaOptError> {
    let mut rng = stream(cfg.seed, noise_key);
    let ctx = EpisodeContext::prepare(state, episode.clone(), cfg.gumbel_temp_at(state.step), &mut rng)?;
    let tape = Tape::new();
    let vars = TrainVars::leaves(&tape, state);
    let terms = episode_loss_on_tape(&tape, state, &vars, &ctx, cfg)?;
    let grads = tape.grad(terms.loss, &vars.delta)?;
    Ok(grads.iter().flat_map(|g: &Tensor| g.data().to_vec()).collect())
}

/// Cosine between the two episodes' meta-gradients, overall and restricted to
/// each expert's view `z_m * g`. Both sides of a pair share routing and gate noise.
pub fn gradient_alignment(
    state: &TrainState,
    pairs: &[(Episode, Episode)],
    cfg: &TrainConfig,
) -> Result<AlignmentReport, MetaOptError> {
    if pairs.is_empty() {
        return Err(MetaOptError::EmptyBatch);
    }
    let gates: Vec<Vec<f64>> = state.pool.deterministic_gates().iter().map(|g| g.z.flatten()).collect();
    let mut out = Vec::with_capacity(pairs.len());
    for (i, (a, b)) in pairs.iter().enumerate() {
        let key = [TAG_ANALYSIS, i as u64];
        let ga = delta_meta_gradient(state, a, cfg, &key)?;
        let gb = delta_meta_gradient(state, b, cfg, &key)?;
        let mut zero = false;
        let mut cos = |x: &[f64], y: &[f64]| {
            cosine(x, y).unwrap_or_else(|| {
                zero = true;
                0.0
            })
        };
        let delta = cos(&ga, &gb);
        let experts = gates
            .iter()
            .map(|z| {
                let va: Vec<f64> = ga.iter().zip(z).map(|(g, z)| g * z).collect();
                let vb: Vec<f64> = gb.iter().zip(z).map(|(g, z)| g * z).collect();
                cos(&va, &vb)
            })
            .collect();
        out.push(PairAlignment {
            pair: i,
            delta,
            experts,
            zero_gradient: zero,
        });
    }
    let n = out.len() as f64;
    let m = state.pool.n_experts();
    Ok(AlignmentReport {
        mean_delta: out.iter().map(|p| p.delta).sum::<f64>() / n,
        mean_experts: (0..m).map(|k| out.iter().map(|p| p.experts[k]).sum::<f64>() / n).collect(),
        pairs: out,
    })
}

/// Columns: `pair,delta,expert_1..M,zero_gradient`; a final `mean` line.
pub fn alignment_csv(r: &AlignmentReport) -> String {
    let m = r.mean_experts.len();
    let mut s = String::from("pair,delta");
    for k in 1..=m {
        let _ = write!(s, ",expert_{k}");
    }
    s.push_str(",zero_gradient\n");
    for p in &r.pairs {
        let _ = write!(s, "{},{}", p.pair, p.delta);
        for v in &p.experts {
            let _ = write!(s, ",{v}");
        }
        let _ = writeln!(s, ",{}", p.zero_gradient);
    }
    let _ = write!(s, "mean,{}", r.mean_delta);
    for v in &r.mean_experts {
        let _ = write!(s, ",{v}");
    }
    s.push_str(",\n");
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSelection {
    pub domain: String,
    pub is_ood: bool,
    pub n: usize,
    pub mean_alpha: Vec<f64>,
    pub discreteness: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionStats {
    pub domains: Vec<DomainSelection>,
    pub discreteness: f64,
    /// Cosine similarity between the domains' mean selections.
    pub similarity: Vec<Vec<f64>>,
}

/// Mean over entries of `min(a, 1 - a)` on pre-normalization activations.
pub fn discreteness(raw: &[f64]) -> f64 {
    if raw.is_empty() {
        return 0.0;
    }
    raw.iter().map(|&a| a.min(1.0 - a)).sum::<f64>() / raw.len() as f64
}

pub fn selection_stats(log: &[EpisodeResult]) -> Result<SelectionStats, MetaOptError> {
    if log.is_empty() {
        return Err(MetaOptError::EmptyBatch);
    }
    let mut groups: BTreeMap<&str, Vec<&EpisodeResult>> = BTreeMap::new();
    for r in log {
        groups.entry(&r.domain).or_default().push(r);
    }
    let domains: Vec<DomainSelection> = groups
        .into_iter()
        .map(|(domain, rs)| {
            let m = rs[0].alpha.len();
            let n = rs.len() as f64;
            let mean_alpha = (0..m).map(|k| rs.iter().map(|r| r.alpha[k]).sum::<f64>() / n).collect();
            let all_raw: Vec<f64> = rs.iter().flat_map(|r| r.raw.iter().copied()).collect();
            DomainSelection {
                domain: domain.to_string(),
                is_ood: rs[0].is_ood,
                n: rs.len(),
                mean_alpha,
                discreteness: discreteness(&all_raw),
            }
        })
        .collect();
    let all_raw: Vec<f64> = log.iter().flat_map(|r| r.raw.iter().copied()).collect();
    let rows: Vec<Vec<f64>> = domains.iter().map(|d| d.mean_alpha.clone()).collect();
    Ok(SelectionStats {
        similarity: selection_similarity(&rows),
        discreteness: discreteness(&all_raw),
        domains,
    })
}

/// Columns: `domain,is_ood,n,discreteness,mean_alpha_1..M,sim_<domain>...`;
/// a final `all` line carries the overall discreteness.
pub fn selection_csv(s: &SelectionStats) -> String {
    let m = s.domains.first().map_or(0, |d| d.mean_alpha.len());
    let mut out = String::from("domain,is_ood,n,discreteness");
    for k in 1..=m {
        let _ = write!(out, ",mean_alpha_{k}");
    }
    for d in &s.domains {
        let _ = write!(out, ",sim_{}", d.domain);
    }
    out.push('\n');
    for (d, sim) in s.domains.iter().zip(&s.similarity) {
        let _ = write!(out, "{},{},{},{}", d.domain, d.is_ood, d.n, d.discreteness);
        for v in d.mean_alpha.iter().chain(sim) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    let total: usize = s.domains.iter().map(|d| d.n).sum();
    let _ = write!(out, "all,,{total},{}", s.discreteness);
    out.push_str(&",".repeat(m + s.domains.len()));
    out.push('\n');
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Report {
    Sparsity,
    Overlap,
    Alignment,
    Selection,
}

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("{0}")]
    Missing(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("selection log: {0}")]
    Log(#[from] ResultsCsvError),
    #[error(transparent)]
    MetaOpt(#[from] MetaOptError),
}

/// Knobs of `render_report`; `log` is the text of an eval results CSV.
#[derive(Clone, Debug)]
pub struct ReportOptions<'a> {
    pub threshold: f64,
    pub pairs: usize,
    pub log: Option<&'a str>,
}

/// One report as CSV text. Alignment pairs are consecutive validation ID episodes.
pub fn render_report(
    state: &TrainState,
    cfg: &RunConfig,
    report: Report,
    opts: &ReportOptions<'_>,
) -> Result<String, AnalysisError> {
    Ok(match report {
        Report::Sparsity => sparsity_csv(&sparsity_report(&state.pool)),
        Report::Overlap => {
            let m = mask_overlap_matrix(&state.pool, opts.threshold);
            let labels: Vec<String> = (1..=m.len()).map(|i| format!("expert_{i}")).collect();
            matrix_csv(&labels, &m)
        }
        Report::Alignment => {
            if opts.pairs == 0 {
                return Err(AnalysisError::Missing("pairs must be positive".into()));
            }
            let eps = episode_set(&cfg.suite_spec()?, Split::Val, Which::Id, 2 * opts.pairs)?;
            let pairs: Vec<(Episode, Episode)> = eps.chunks_exact(2).map(|p| (p[0].clone(), p[1].clone())).collect();
            alignment_csv(&gradient_alignment(state, &pairs, &cfg.train)?)
        }
        Report::Selection => {
            let log = opts
                .log
                .ok_or_else(|| AnalysisError::Missing("the selection report needs an eval log".into()))?;
            selection_csv(&selection_stats(&parse_results_csv(log)?)?)
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::l0mask::{HardConcrete, HardConcreteMask};
    use crate::params::{LayerKind, LayerSpec, ParamSet};
    use std::sync::Arc;

    fn specs() -> crate::params::Specs {
        Arc::from(vec![
            LayerSpec::new("a.weight", LayerKind::LinearWeight, vec![2, 3], 0),
            LayerSpec::new("a.bias", LayerKind::LinearBias, vec![3], 0),
            LayerSpec::new("b.weight", LayerKind::LinearWeight, vec![3, 2], 1),
        ])
    }

    fn pool(log_alphas: &[Vec<f64>]) -> ExpertPool {
        let s = specs();
        let masks = log_alphas
            .iter()
            .map(|la| HardConcreteMask::new(ParamSet::unflatten(s.clone(), la).unwrap(), HardConcrete::default()).unwrap())
            .collect();
        ExpertPool::from_pretrained(ParamSet::zeros(s), masks, 0.5).unwrap()
    }

    #[test]
    fn very_negative_log_alpha_is_fully_sparse() {
        let p = pool(&[vec![-1e3; 15]]);
        let r = sparsity_report(&p);
        assert!(r.rows.iter().all(|row| row.sparsity == 1.0 && row.density == 0.0));
        assert_eq!(r.merged_sparsity, 1.0);
    }

    #[test]
    fn uniform_log_alpha_gives_equal_layers() {
        let p = pool(&[vec![0.3; 15], vec![0.3; 15]]);
        let r = sparsity_report(&p);
        let first = r.rows[0].sparsity;
        assert!(r.rows.iter().all(|row| (row.sparsity - first).abs() < 1e-15));
        assert!(r.rows.iter().all(|row| (row.sparsity + row.density - 1.0).abs() < 1e-15));
        assert!(r.by_kind.iter().all(|g| g.std_across_experts < 1e-15));
    }

    #[test]
    fn totals_match_expected_density() {
        let la: Vec<f64> = (0..15).map(|i| (i as f64 - 7.0) * 0.4).collect();
        let p = pool(&[la.clone()]);
        let r = sparsity_report(&p);
        // independent recomputation from raw log-alphas
        let hc = HardConcrete::default();
        let shift = hc.beta * (-hc.gamma / hc.zeta_s).ln();
        let dens: f64 = la.iter().map(|a| 1.0 / (1.0 + (-(a - shift)).exp())).sum::<f64>() / 15.0;
        assert!((r.expert_density[0] - dens).abs() < 1e-9);
        let weighted: f64 = r.rows.iter().map(|row| row.density * if row.layer == "a.bias" { 3.0 } else { 6.0 }).sum::<f64>() / 15.0;
        assert!((weighted - dens).abs() < 1e-9);
        assert!((r.merged_sparsity - (1.0 - dens)).abs() < 1e-9);
    }

    #[test]
    fn overlap_of_identical_and_disjoint_masks() {
        let on = 1e3;
        let a: Vec<f64> = (0..15).map(|i| if i < 7 { on } else { -on }).collect();
        let b: Vec<f64> = (0..15).map(|i| if i < 7 { -on } else { on }).collect();
        let m = mask_overlap_matrix(&pool(&[a.clone(), a.clone(), b]), 0.5);
        assert_eq!(m[0][1], 1.0);
        assert_eq!(m[0][2], 0.0);
        for (i, row) in m.iter().enumerate() {
            assert_eq!(row[i], 1.0);
            for (j, v) in row.iter().enumerate() {
                assert_eq!(*v, m[j][i]);
            }
        }
    }

    #[test]
    fn overlap_matches_set_computation() {
        use rand::Rng as _;
        let mut rng = stream(3, &[1]);
        let las: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..15).map(|_| if rng.random::<bool>() { 1e3 } else { -1e3 }).collect())
            .collect();
        let m = mask_overlap_matrix(&pool(&las), 0.5);
        let sets: Vec<std::collections::BTreeSet<usize>> =
            las.iter().map(|la| la.iter().enumerate().filter(|(_, &v)| v > 0.0).map(|(i, _)| i).collect()).collect();
        for i in 0..4 {
            for j in 0..4 {
                let inter = sets[i].intersection(&sets[j]).count();
                let uni = sets[i].union(&sets[j]).count();
                let want = if uni == 0 { 0.0 } else { inter as f64 / uni as f64 };
                assert_eq!(m[i][j], want);
            }
        }
    }

    #[test]
    fn cosine_signs() {
        let g = [1.0, -2.0, 0.5];
        let neg: Vec<f64> = g.iter().map(|v| -v).collect();
        assert!((cosine(&g, &g).unwrap() - 1.0).abs() < 1e-12);
        assert!((cosine(&g, &neg).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cosine(&g, &[0.0; 3]), None);
    }

    #[test]
    fn discreteness_extremes() {
        assert_eq!(discreteness(&[0.0, 1.0, 1.0, 0.0]), 0.0);
        assert_eq!(discreteness(&[0.5; 4]), 0.5);
    }

    fn logged(domain: &str, alpha: Vec<f64>, raw: Vec<f64>) -> EpisodeResult {
        EpisodeResult {
            index: 0,
            domain: domain.into(),
            is_ood: false,
            mode: crate::eval::EvalMode::Direct,
            accuracy: 1.0,
            support_loss: 0.0,
            lr: None,
            alpha,
            raw,
        }
    }

    #[test]
    fn selection_means_by_domain() {
        let log = vec![
            logged("x", vec![1.0, 0.0], vec![1.0, 0.0]),
            logged("x", vec![0.5, 0.5], vec![0.5, 0.5]),
            logged("y", vec![0.0, 1.0], vec![0.0, 1.0]),
        ];
        let s = selection_stats(&log).unwrap();
        assert_eq!(s.domains[0].mean_alpha, vec![0.75, 0.25]);
        assert_eq!(s.domains[0].discreteness, 0.25);
        assert_eq!(s.domains[1].discreteness, 0.0);
        assert_eq!(s.similarity[1][0], s.similarity[0][1]);
        assert!((s.similarity[0][0] - 1.0).abs() < 1e-12);
        let csv = selection_csv(&s);
        assert!(csv.starts_with("domain,is_ood,n,discreteness,mean_alpha_1,mean_alpha_2,sim_x,sim_y\n"));
        assert!(selection_stats(&[]).is_err());
    }
}
