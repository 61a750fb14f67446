use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use smat_core::analysis::{render_report, AnalysisError, Report, ReportOptions};
use smat_core::checkpoint::{Checkpoint, CheckpointError, Kind};
use smat_core::config::{train_episode, ConfigError, RunConfig, SuiteRef};
use smat_core::eval::{evaluate, results_csv, search_finetune_lrs, summarize, EvalMode};
use smat_core::experts::fit_domain_mask;
use smat_core::fewshot::{protonet_logits, Episode};
use smat_core::metaopt::{dense_meta_tune, metrics_csv, train, MaskFitConfig};
use smat_core::params::ParamSet;
use smat_core::tasks::{episode_set, id_ood_episodes, pretrain_backbone, Split, Which};

const EXIT_OTHER: u8 = 1;
const EXIT_SCHEMA: u8 = 2;
const EXIT_CHECKSUM: u8 = 3;
const EXIT_VERSION: u8 = 4;
const EXIT_IO: u8 = 5;

/// Sparse interpolated experts: pre-training, meta-training, evaluation and diagnostics.
#[derive(Parser)]
#[command(name = "smat", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Pre-train the backbone on pooled ID data and write a pretrained checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train from a pretrained checkpoint.
    Train {
        #[arg(long)]
        from_pretrained: PathBuf,
        /// Defaults to the config stored in the pretrained checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step metrics CSV (SMAT only).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Dense ProtoNet meta-tuning of the whole modulation instead.
        #[arg(long)]
        dense: bool,
    },
    /// Evaluate a checkpoint on ID and OOD episodes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Catalog suite overriding the checkpoint's own.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, value_enum, default_value_t = SplitArg::Test)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = ModeArg::Direct)]
        mode: ModeArg,
        /// Episodes per group (ID and OOD each).
        #[arg(long, default_value_t = 300)]
        episodes: usize,
        #[arg(long)]
        rounds: Option<usize>,
        #[arg(long)]
        accept_prob: Option<f64>,
        #[arg(long)]
        ft_steps: Option<usize>,
        /// Comma-separated fine-tuning rates searched per domain on validation episodes.
        #[arg(long, value_delimiter = ',')]
        lr_grid: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit one sparse mask on a fixed (tuned - pretrained) modulation for one domain.
    FitDomainMask {
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        tuned: PathBuf,
        #[arg(long)]
        domain: String,
        #[arg(long, default_value_t = 0.9)]
        tau: f64,
        #[arg(long, default_value_t = 3000)]
        steps: usize,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        /// Accuracy trade-off CSV.
        #[arg(long)]
        tradeoff: PathBuf,
        /// Per-step fitting trace CSV.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Diagnostics recomputed from a checkpoint and, for selection, an eval log.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        report: ReportArg,
        /// Results CSV from `eval` (selection report).
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 20)]
        pairs: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Val,
    Test,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Direct,
    Select,
    Finetune,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportArg {
    Sparsity,
    Overlap,
    Alignment,
    Selection,
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn save(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(ckpt.save(path)?)
}

fn accuracy(params: &ParamSet, cfg: &RunConfig, eps: &[Episode]) -> Result<f64> {
    let mut total = 0.0;
    for e in eps {
        total += protonet_logits(params, &cfg.backbone, e, cfg.train.metric)?.accuracy(&e.query_labels()?);
    }
    Ok(total / eps.len().max(1) as f64)
}

fn pretrain(config: &Path, out: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let spec = cfg.suite_spec()?;
    let theta_pre = pretrain_backbone(&spec, &cfg.backbone, &cfg.pretrain)?;
    save(out, &Checkpoint::pretrained(&cfg, &theta_pre))?;
    eprintln!("wrote {}", out.display());
    Ok(())
}

fn run_train(from: &Path, config: Option<&Path>, out: &Path, metrics: Option<&Path>, dense: bool) -> Result<()> {
    let pre = Checkpoint::load(from)?;
    if pre.kind != Kind::Pretrained {
        return Err(CheckpointError::Schema(format!("{} is not a pretrained checkpoint", from.display())).into());
    }
    let cfg = match config {
        Some(p) => RunConfig::load(p)?,
        None => pre.config()?,
    };
    let theta_pre = pre.theta_pre()?;
    if theta_pre.specs() != &cfg.backbone.specs() {
        return Err(CheckpointError::Schema("pretrained parameters do not match the configured backbone".into()).into());
    }
    let spec = cfg.suite_spec()?;
    let seed = cfg.train.seed;
    let task = |step: u64, i: usize| train_episode(&spec, seed, step, i);
    if dense {
        let tuned = dense_meta_tune(
            &theta_pre,
            &cfg.backbone,
            cfg.train.max_steps,
            cfg.train.batch_tasks,
            cfg.train.lr_main,
            cfg.train.metric,
            &task,
        )?;
        let delta = tuned.sub(&theta_pre)?;
        save(out, &Checkpoint::dense(&cfg, &theta_pre, &delta, cfg.train.max_steps))?;
        eprintln!("wrote {}", out.display());
        return Ok(());
    }
    let val_id = episode_set(&spec, Split::Val, Which::Id, cfg.train.eval_episodes)?;
    let val_ood = if spec.ood_domains.is_empty() {
        Vec::new()
    } else {
        episode_set(&spec, Split::Val, Which::Ood, cfg.train.eval_episodes)?
    };
    let init = smat_core::metaopt::TrainState::init(&cfg.train, cfg.backbone, theta_pre)?;
    let outcome = train(init, &cfg.train, &task, &val_id, &val_ood)?;
    save(out, &Checkpoint::smat(&cfg, &outcome.best))?;
    if let Some(p) = metrics {
        write(p, &metrics_csv(&outcome.metrics, cfg.train.n_experts)?)?;
    }
    eprintln!(
        "wrote {} (step {}, val ID acc {:?})",
        out.display(),
        outcome.best.step,
        outcome.best_val_id_acc
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_eval(
    checkpoint: &Path,
    suite: Option<&str>,
    split: SplitArg,
    mode: ModeArg,
    episodes: usize,
    rounds: Option<usize>,
    accept_prob: Option<f64>,
    ft_steps: Option<usize>,
    lr_grid: Option<Vec<f64>>,
    out: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let mut cfg = ckpt.config()?;
    if let Some(s) = suite {
        cfg.suite = SuiteRef::Name(s.to_string());
    }
    if let Some(r) = rounds {
        cfg.adapt.selection.rounds = r;
    }
    if let Some(p) = accept_prob {
        cfg.adapt.selection.accept_prob = p;
    }
    if let Some(k) = ft_steps {
        cfg.adapt.ft_steps = k;
    }
    if let Some(g) = lr_grid {
        cfg.adapt.lr_grid = g;
    }
    cfg.validate()?;
    let spec = cfg.suite_spec()?;
    let state = ckpt.train_state()?;
    let split = match split {
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let mode = match mode {
        ModeArg::Direct => EvalMode::Direct,
        ModeArg::Select => EvalMode::Select,
        ModeArg::Finetune => EvalMode::Finetune,
    };
    let mut settings = cfg.eval_settings(mode);
    if mode == EvalMode::Finetune && !cfg.adapt.lr_grid.is_empty() {
        let val = id_ood_episodes(&spec, Split::Val, cfg.adapt.lr_search_episodes)?;
        settings.ft_lr_by_domain = search_finetune_lrs(&state, &val, &cfg.adapt.lr_grid, &settings)?;
        for (d, lr) in &settings.ft_lr_by_domain {
            eprintln!("lr {d}: {lr}");
        }
    }
    let eps = id_ood_episodes(&spec, split, episodes)?;
    let results = evaluate(&state, &eps, &settings)?;
    write(out, &results_csv(&results, state.pool.n_experts())?)?;
    for s in summarize(&results) {
        println!("{}: {:.4} +- {:.4} (n={})", s.label, s.mean, s.ci95, s.n);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn run_fit_domain_mask(
    pretrained: &Path,
    tuned: &Path,
    domain: &str,
    tau: f64,
    steps: usize,
    n_eval: usize,
    out: &Path,
    tradeoff: &Path,
    trace: Option<&Path>,
) -> Result<()> {
    let pre_ckpt = Checkpoint::load(pretrained)?;
    let cfg = pre_ckpt.config()?;
    let theta_pre = pre_ckpt.theta_pre()?;
    let (tuned_pre, tuned_delta) = Checkpoint::load(tuned)?.modulation()?;
    if tuned_pre != theta_pre {
        bail!("tuned checkpoint was not derived from this pretrained checkpoint");
    }
    let theta_tuned = ParamSet::axpy(1.0, &tuned_delta, &theta_pre)?;
    let full = cfg.suite_spec()?;
    let target = full
        .id_domains
        .iter()
        .chain(&full.ood_domains)
        .find(|d| d.name == domain)
        .cloned()
        .ok_or_else(|| ConfigError::Schema(format!("suite {} has no domain {domain}", full.name)))?;
    // the fitted domain becomes the only ID domain of a sub-suite
    let mut sub = full.clone();
    sub.id_domains = vec![target];
    sub.ood_domains.retain(|d| d.name != domain);
    let others_id: Vec<_> = full.id_domains.iter().filter(|d| d.name != domain).cloned().collect();
    let fit_cfg = MaskFitConfig {
        tau,
        steps,
        metric: cfg.train.metric,
        seed: cfg.train.seed,
        ..MaskFitConfig::default()
    };
    let episodes = |step: usize| train_episode(&sub, cfg.train.seed, step as u64, 0);
    let fit = fit_domain_mask(&theta_pre, &theta_tuned, &cfg.backbone, &episodes, &fit_cfg)?;
    let delta = theta_tuned.sub(&theta_pre)?;
    save(out, &Checkpoint::domain_mask(&cfg, &theta_pre, &delta, &fit.mask))?;

    let gate = fit.mask.deterministic_gate();
    let masked = ParamSet::axpy(1.0, &ParamSet::hadamard(&gate.z, &delta)?, &theta_pre)?;
    let target_eps = episode_set(&sub, Split::Test, Which::Id, n_eval)?;
    let other_eps = if others_id.is_empty() {
        Vec::new()
    } else {
        let mut s = full.clone();
        s.id_domains = others_id;
        episode_set(&s, Split::Test, Which::Id, n_eval)?
    };
    let ood_eps = if sub.ood_domains.is_empty() {
        Vec::new()
    } else {
        episode_set(&sub, Split::Test, Which::Ood, n_eval)?
    };
    let mut text = String::from("model,density,target_acc,other_id_acc,ood_acc\n");
    for (name, params, density) in [
        ("pretrained", &theta_pre, 0.0),
        ("tuned", &theta_tuned, 1.0),
        ("masked", &masked, fit.mask.expected_density()),
    ] {
        text.push_str(&format!(
            "{name},{density},{},{},{}\n",
            accuracy(params, &cfg, &target_eps)?,
            accuracy(params, &cfg, &other_eps)?,
            accuracy(params, &cfg, &ood_eps)?
        ));
    }
    write(tradeoff, &text)?;
    if let Some(p) = trace {
        let t = &fit.trace;
        let mut s = String::from("step,density,violation,lambda,loss\n");
        for i in 0..t.densities.len() {
            s.push_str(&format!("{i},{},{},{},{}\n", t.densities[i], t.violations[i], t.lambdas[i], t.losses[i]));
        }
        write(p, &s)?;
    }
    print!("{text}");
    Ok(())
}

fn run_analyze(
    checkpoint: &Path,
    report: ReportArg,
    log: Option<&Path>,
    threshold: f64,
    pairs: usize,
    out: &Path,
) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let cfg = ckpt.config()?;
    let state = ckpt.train_state()?;
    let text = match log {
        Some(p) => Some(fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?),
        None => None,
    };
    let report = match report {
        ReportArg::Sparsity => Report::Sparsity,
        ReportArg::Overlap => Report::Overlap,
        ReportArg::Alignment => Report::Alignment,
        ReportArg::Selection => Report::Selection,
    };
    let opts = ReportOptions {
        threshold,
        pairs,
        log: text.as_deref(),
    };
    let csv = render_report(&state, &cfg, report, &opts)?;
    write(out, &csv)
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Pretrain { config, out } => pretrain(&config, &out),
        Cmd::Train {
            from_pretrained,
            config,
            out,
            metrics,
            dense,
        } => run_train(&from_pretrained, config.as_deref(), &out, metrics.as_deref(), dense),
        Cmd::Eval {
            checkpoint,
            suite,
            split,
            mode,
            episodes,
            rounds,
            accept_prob,
            ft_steps,
            lr_grid,
            out,
        } => run_eval(
            &checkpoint,
            suite.as_deref(),
            split,
            mode,
            episodes,
            rounds,
            accept_prob,
            ft_steps,
            lr_grid,
            &out,
        ),
        Cmd::FitDomainMask {
            pretrained,
            tuned,
            domain,
            tau,
            steps,
            episodes,
            out,
            tradeoff,
            trace,
        } => run_fit_domain_mask(
            &pretrained,
            &tuned,
            &domain,
            tau,
            steps,
            episodes,
            &out,
            &tradeoff,
            trace.as_deref(),
        ),
        Cmd::Analyze {
            checkpoint,
            report,
            log,
            threshold,
            pairs,
            out,
        } => run_analyze(&checkpoint, report, log.as_deref(), threshold, pairs, &out),
    }
}

fn config_code(e: &ConfigError) -> u8 {
    match e {
        ConfigError::Schema(_) => EXIT_SCHEMA,
        ConfigError::Version { .. } => EXIT_VERSION,
        ConfigError::Io { .. } => EXIT_IO,
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<AnalysisError>() {
            match e {
                AnalysisError::Missing(_) | AnalysisError::Log(_) | AnalysisError::Task(_) => return EXIT_SCHEMA,
                AnalysisError::Config(c) => return config_code(c),
                AnalysisError::MetaOpt(_) => {}
            }
        }
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            return match e {
                CheckpointError::Checksum => EXIT_CHECKSUM,
                CheckpointError::Version(_) => EXIT_VERSION,
                CheckpointError::Io { .. } => EXIT_IO,
                CheckpointError::Magic | CheckpointError::Truncated | CheckpointError::Schema(_) => EXIT_SCHEMA,
            };
        }
        if let Some(e) = cause.downcast_ref::<ConfigError>() {
            return config_code(e);
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return EXIT_IO;
        }
    }
    EXIT_OTHER
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("SMLT_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .parse()
        .map_err(|_| ConfigError::Schema(format!("SMLT_THREADS must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(ConfigError::Schema("SMLT_THREADS must be positive".into()).into());
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_are_distinct() {
        let codes = [
            exit_code(&anyhow::Error::from(CheckpointError::Checksum)),
            exit_code(&anyhow::Error::from(CheckpointError::Version(9))),
            exit_code(&anyhow::Error::from(ConfigError::Schema("x".into()))),
            exit_code(&anyhow::Error::from(std::io::Error::other("x"))),
            exit_code(&anyhow::anyhow!("other")),
        ];
        assert_eq!(codes, [EXIT_CHECKSUM, EXIT_VERSION, EXIT_SCHEMA, EXIT_IO, EXIT_OTHER]);
        let wrapped = anyhow::Error::from(ConfigError::Version { found: 3 }).context("loading");
        assert_eq!(exit_code(&wrapped), EXIT_VERSION);
    }

    #[test]
    fn cli_parses() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
        let c = Cli::try_parse_from([
            "smat", "eval", "--checkpoint", "a", "--mode", "finetune", "--lr-grid", "0.001,0.01", "--out", "r.csv",
        ])
        .unwrap();
        let Cmd::Eval { lr_grid, .. } = c.cmd else { panic!() };
        assert_eq!(lr_grid, Some(vec![0.001, 0.01]));
    }
}
