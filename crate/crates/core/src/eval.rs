//! Episode-level evaluation in three modes and the results CSV.
//!
//! Results CSV columns, in order:
//! `row,index,domain,is_ood,mode,n,accuracy,ci95,support_loss,lr,alpha_1..M,raw_1..M`.
//! `row` is `episode` for per-episode lines and `summary` for aggregates
//! (`ID avg`, `OOD avg` and one line per domain, carried in `domain`).

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adapt::{direct_merge, finetune_full, lr_search, select_experts, SelectionSearchConfig};
use crate::fewshot::{protonet_logits, support_loss, Episode, Metric};
use crate::metaopt::{GateMode, MetaOptError, TrainState};
use crate::rng::{stream, TAG_EVAL};
use crate::router::RouteMode;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    #[default]
    Direct,
    Select,
    Finetune,
}

impl EvalMode {
    pub fn as_str(self) -> &'static str {
        match self {
            EvalMode::Direct => "direct",
            EvalMode::Select => "select",
            EvalMode::Finetune => "finetune",
        }
    }
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EvalMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "direct" => Ok(EvalMode::Direct),
            "select" => Ok(EvalMode::Select),
            "finetune" => Ok(EvalMode::Finetune),
            other => Err(format!("unknown eval mode {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub mode: EvalMode,
    pub route: RouteMode,
    pub gate_mode: GateMode,
    pub metric: Metric,
    pub selection: SelectionSearchConfig,
    pub ft_steps: usize,
    /// Fallback fine-tuning rate for domains missing from `ft_lr_by_domain`.
    pub ft_lr: f64,
    pub ft_lr_by_domain: BTreeMap<String, f64>,
    pub leave_one_out: bool,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            mode: EvalMode::Direct,
            route: RouteMode::Mean,
            gate_mode: GateMode::Deterministic,
            metric: Metric::Sqeuclid,
            selection: SelectionSearchConfig::default(),
            ft_steps: 50,
            ft_lr: 1e-3,
            ft_lr_by_domain: BTreeMap::new(),
            leave_one_out: true,
            seed: 0,
        }
    }
}

impl EvalSettings {
    pub fn lr_for(&self, domain: &str) -> f64 {
        self.ft_lr_by_domain.get(domain).copied().unwrap_or(self.ft_lr)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub index: usize,
    pub domain: String,
    pub is_ood: bool,
    pub mode: EvalMode,
    pub accuracy: f64,
    pub support_loss: f64,
    pub lr: Option<f64>,
    /// Normalized merge weights actually used.
    pub alpha: Vec<f64>,
    /// Pre-normalization activations behind `alpha`.
    pub raw: Vec<f64>,
}

/// Per-domain fine-tuning rates picked on `val` episodes. Gates come from a
/// stream disjoint from the one `evaluate` uses.
pub fn search_finetune_lrs(
    state: &TrainState,
    val: &[Episode],
    grid: &[f64],
    s: &EvalSettings,
) -> Result<BTreeMap<String, f64>, MetaOptError> {
    let gates = state.test_gates(s.gate_mode, &mut stream(s.seed, &[TAG_EVAL, u64::MAX - 1]));
    lr_search(state, val, &gates, grid, s.ft_steps, s.route, s.metric, s.leave_one_out)
}

fn evaluate_one(state: &TrainState, index: usize, ep: &Episode, s: &EvalSettings) -> Result<EpisodeResult, MetaOptError> {
    let labels = ep.query_labels()?;
    let mut rng = stream(s.seed, &[TAG_EVAL, u64::MAX, index as u64]);
    let gates = state.test_gates(s.gate_mode, &mut rng);
    let (weights, params, lr) = match s.mode {
        EvalMode::Direct => {
            let (w, theta) = direct_merge(state, ep, &gates, s.route, index as u64, s.seed)?;
            (w, theta, None)
        }
        EvalMode::Select => {
            let (w, _) = select_experts(state, ep, &gates, &s.selection, s.metric, index as u64)?;
            let theta = state.merged(&w, &gates)?;
            (w, theta, None)
        }
        EvalMode::Finetune => {
            let (w, theta) = direct_merge(state, ep, &gates, s.route, index as u64, s.seed)?;
            let lr = s.lr_for(&ep.domain);
            let ft = finetune_full(&theta, state, ep, s.ft_steps, lr, s.metric, s.leave_one_out)?;
            (w, ft.params, Some(lr))
        }
    };
    let accuracy = protonet_logits(&params, &state.backbone, ep, s.metric)?.accuracy(&labels);
    let support_loss = support_loss(&params, &state.backbone, ep, s.metric, s.leave_one_out)?;
    Ok(EpisodeResult {
        index,
        domain: ep.domain.clone(),
        is_ood: ep.is_ood,
        mode: s.mode,
        accuracy,
        support_loss,
        lr,
        alpha: weights.alpha,
        raw: weights.raw,
    })
}

/// Evaluates every episode; output order follows input order.
pub fn evaluate(state: &TrainState, episodes: &[Episode], s: &EvalSettings) -> Result<Vec<EpisodeResult>, MetaOptError> {
    s.selection.validate()?;
    episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| evaluate_one(state, i, ep, s))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub label: String,
    pub n: usize,
    pub mean: f64,
    /// Half-width of the normal-approximation 95% interval.
    pub ci95: f64,
}

pub fn summary_row(label: &str, accs: &[f64]) -> SummaryRow {
    let n = accs.len();
    if n == 0 {
        return SummaryRow {
            label: label.to_string(),
            n,
            mean: f64::NAN,
            ci95: f64::NAN,
        };
    }
    let mean = accs.iter().sum::<f64>() / n as f64;
    let ci95 = if n > 1 {
        let var = accs.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        1.96 * (var / n as f64).sqrt()
    } else {
        0.0
    };
    SummaryRow {
        label: label.to_string(),
        n,
        mean,
        ci95,
    }
}

/// `ID avg` and `OOD avg` first (when present), then each domain by name.
pub fn summarize(results: &[EpisodeResult]) -> Vec<SummaryRow> {
    let mut rows = Vec::new();
    for (label, ood) in [("ID avg", false), ("OOD avg", true)] {
        let accs: Vec<f64> = results.iter().filter(|r| r.is_ood == ood).map(|r| r.accuracy).collect();
        if !accs.is_empty() {
            rows.push(summary_row(label, &accs));
        }
    }
    let mut by_domain: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for r in results {
        by_domain.entry(&r.domain).or_default().push(r.accuracy);
    }
    rows.extend(by_domain.into_iter().map(|(d, accs)| summary_row(d, &accs)));
    rows
}

#[derive(Debug, thiserror::Error)]
pub enum ResultsCsvError {
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed results row {row}: {detail}")]
    Row { row: usize, detail: String },
}

fn header(m: usize) -> Vec<String> {
    let mut h: Vec<String> = [
        "row",
        "index",
        "domain",
        "is_ood",
        "mode",
        "n",
        "accuracy",
        "ci95",
        "support_loss",
        "lr",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    h.extend((1..=m).map(|i| format!("alpha_{i}")));
    h.extend((1..=m).map(|i| format!("raw_{i}")));
    h
}

/// Per-episode lines followed by summary lines.
pub fn results_csv(results: &[EpisodeResult], n_experts: usize) -> Result<String, ResultsCsvError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header(n_experts))?;
    for r in results {
        let mut rec = vec![
            "episode".to_string(),
            r.index.to_string(),
            r.domain.clone(),
            r.is_ood.to_string(),
            r.mode.to_string(),
            "1".to_string(),
            r.accuracy.to_string(),
            String::new(),
            r.support_loss.to_string(),
            r.lr.map(|v| v.to_string()).unwrap_or_default(),
        ];
        rec.extend(r.alpha.iter().map(f64::to_string));
        rec.extend(r.raw.iter().map(f64::to_string));
        w.write_record(rec)?;
    }
    let mode = results.first().map(|r| r.mode.to_string()).unwrap_or_default();
    for s in summarize(results) {
        let is_ood = match s.label.as_str() {
            "ID avg" => "false".to_string(),
            "OOD avg" => "true".to_string(),
            d => results
                .iter()
                .find(|r| r.domain == d)
                .map(|r| r.is_ood.to_string())
                .unwrap_or_default(),
        };
        let mut rec = vec![
            "summary".to_string(),
            String::new(),
            s.label.clone(),
            is_ood,
            mode.clone(),
            s.n.to_string(),
            s.mean.to_string(),
            s.ci95.to_string(),
            String::new(),
            String::new(),
        ];
        rec.extend(std::iter::repeat_n(String::new(), 2 * n_experts));
        w.write_record(rec)?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Reads back the per-episode lines of a results CSV; summary lines are skipped.
pub fn parse_results_csv(text: &str) -> Result<Vec<EpisodeResult>, ResultsCsvError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    let m = headers.iter().filter(|h| h.starts_with("alpha_")).count();
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |detail: String| ResultsCsvError::Row { row: i + 1, detail };
        if rec.get(0) != Some("episode") {
            continue;
        }
        if rec.len() != 10 + 2 * m {
            return Err(bad(format!("expected {} fields, got {}", 10 + 2 * m, rec.len())));
        }
        let num = |j: usize| -> Result<f64, ResultsCsvError> {
            rec[j].parse::<f64>().map_err(|e| bad(format!("column {}: {e}", &headers[j])))
        };
        out.push(EpisodeResult {
            index: rec[1].parse().map_err(|e| bad(format!("index: {e}")))?,
            domain: rec[2].to_string(),
            is_ood: rec[3].parse().map_err(|e| bad(format!("is_ood: {e}")))?,
            mode: rec[4].parse().map_err(bad)?,
            accuracy: num(6)?,
            support_loss: num(8)?,
            lr: if rec[9].is_empty() { None } else { Some(num(9)?) },
            alpha: (0..m).map(|k| num(10 + k)).collect::<Result<_, _>>()?,
            raw: (0..m).map(|k| num(10 + m + k)).collect::<Result<_, _>>()?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn res(domain: &str, ood: bool, acc: f64) -> EpisodeResult {
        EpisodeResult {
            index: 0,
            domain: domain.into(),
            is_ood: ood,
            mode: EvalMode::Direct,
            accuracy: acc,
            support_loss: 0.25,
            lr: None,
            alpha: vec![0.5, 0.5],
            raw: vec![0.1, 0.1],
        }
    }

    #[test]
    fn ci_matches_hand_computation() {
        let accs = [0.2, 0.4, 0.6, 0.8];
        let row = summary_row("x", &accs);
        assert!((row.mean - 0.5).abs() < 1e-15);
        // sample variance of {.2,.4,.6,.8} is 0.2/3
        let want = 1.96 * ((0.2 / 3.0) / 4.0f64).sqrt();
        assert!((row.ci95 - want).abs() < 1e-15);
        assert_eq!(summary_row("y", &[0.7]).ci95, 0.0);
    }

    #[test]
    fn summary_splits_id_and_ood() {
        let rs = vec![res("a", false, 1.0), res("b", false, 0.5), res("c", true, 0.25)];
        let s = summarize(&rs);
        assert_eq!(s[0].label, "ID avg");
        assert!((s[0].mean - 0.75).abs() < 1e-15);
        assert_eq!(s[1].label, "OOD avg");
        assert_eq!(s[1].n, 1);
        let labels: Vec<&str> = s.iter().map(|r| r.label.as_str()).collect();
        assert_eq!(labels, ["ID avg", "OOD avg", "a", "b", "c"]);
    }

    #[test]
    fn csv_round_trip() {
        let mut rs = vec![res("a", false, 0.8), res("c", true, 0.1 + 0.2)];
        rs[1].index = 1;
        rs[1].lr = Some(3e-3);
        rs[1].mode = EvalMode::Finetune;
        let text = results_csv(&rs, 2).unwrap();
        assert!(text.starts_with("row,index,domain,is_ood,mode,n,accuracy,ci95,support_loss,lr,alpha_1,alpha_2,raw_1,raw_2\n"));
        assert!(text.contains("summary,,OOD avg,true"));
        let back = parse_results_csv(&text).unwrap();
        assert_eq!(back, rs);
    }

    #[test]
    fn mode_parses() {
        for m in [EvalMode::Direct, EvalMode::Select, EvalMode::Finetune] {
            assert_eq!(m.as_str().parse::<EvalMode>().unwrap(), m);
        }
        assert!("bogus".parse::<EvalMode>().is_err());
    }
}
