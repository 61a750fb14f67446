use smat_core::backbone::BackboneSpec;
use smat_core::checkpoint::{Checkpoint, CheckpointError, Kind};
use smat_core::config::{train_episode, RunConfig};
use smat_core::eval::{evaluate, parse_results_csv, results_csv, summarize, EvalMode};
use smat_core::fewshot::protonet_logits;
use smat_core::l0mask::{HardConcrete, HardConcreteMask};
use smat_core::metaopt::{train, TrainState};
use smat_core::params::ParamSet;
use smat_core::rng::stream;
use smat_core::tasks::{id_ood_episodes, Split};

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::new("md-mini");
    cfg.backbone = BackboneSpec {
        input_dim: 16,
        width: 8,
        depth: 1,
        embed_dim: 8,
    };
    cfg.train.batch_tasks = 2;
    cfg.train.max_steps = 8;
    cfg.train.eval_every = 0;
    cfg.train.router.ff_mult = 1;
    cfg.adapt.ft_steps = 3;
    cfg
}

fn trained(cfg: &RunConfig) -> TrainState {
    let spec = cfg.suite_spec().unwrap();
    let pre = cfg.backbone.init(&mut stream(9, &[]));
    let task = |step: u64, i: usize| train_episode(&spec, cfg.train.seed, step, i);
    let init = TrainState::init(&cfg.train, cfg.backbone, pre).unwrap();
    train(init, &cfg.train, &task, &[], &[]).unwrap().last
}

#[test]
fn smat_checkpoint_restores_state_exactly() {
    let cfg = small_config();
    let state = trained(&cfg);
    let ckpt = Checkpoint::smat(&cfg, &state);
    let bytes = ckpt.encode();
    let back = Checkpoint::decode(&bytes).unwrap();
    assert_eq!(back.kind, Kind::Smat);
    assert_eq!(back.config().unwrap(), cfg);
    assert_eq!(back.train_state().unwrap(), state);
    assert_eq!(Checkpoint::smat(&cfg, &back.train_state().unwrap()).encode(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.smlt");
    ckpt.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap().train_state().unwrap(), state);
}

#[test]
fn corruption_is_detected() {
    let cfg = small_config();
    let bytes = Checkpoint::pretrained(&cfg, &cfg.backbone.init(&mut stream(1, &[]))).encode();
    for i in [10, bytes.len() / 2, bytes.len() - 40] {
        let mut bad = bytes.clone();
        bad[i] ^= 0x20;
        assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::Checksum)), "byte {i}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::Magic)));
    let mut bad = bytes.clone();
    bad[4] = 2;
    assert!(matches!(Checkpoint::decode(&bad), Err(CheckpointError::Version(2))));
    assert!(matches!(Checkpoint::decode(&bytes[..20]), Err(CheckpointError::Truncated)));
}

#[test]
fn dense_and_domain_mask_checkpoints_merge_as_stored() {
    let cfg = small_config();
    let pre = cfg.backbone.init(&mut stream(2, &[]));
    let delta = cfg.backbone.init(&mut stream(3, &[])).map(|v| 0.1 * v);
    let tuned: Vec<f64> = pre.flatten().iter().zip(delta.flatten()).map(|(p, d)| p + d).collect();

    let dense = Checkpoint::decode(&Checkpoint::dense(&cfg, &pre, &delta, 5).encode()).unwrap();
    let state = dense.train_state().unwrap();
    let gates = state.pool.deterministic_gates();
    let w = smat_core::experts::MergeWeights::from_raw(vec![1.0]).unwrap();
    assert_eq!(state.merged(&w, &gates).unwrap().flatten(), tuned);

    let mask = HardConcreteMask::constant(pre.specs().clone(), -1e3, HardConcrete::default()).unwrap();
    let dm = Checkpoint::decode(&Checkpoint::domain_mask(&cfg, &pre, &delta, &mask).encode()).unwrap();
    assert_eq!(dm.domain_mask_fit().unwrap(), mask);
    let state = dm.train_state().unwrap();
    let merged = state.merged(&w, &state.pool.deterministic_gates()).unwrap();
    assert_eq!(merged.flatten(), pre.flatten());
}

#[test]
fn untrained_state_evaluates_like_the_pretrained_protonet() {
    let cfg = small_config();
    let spec = cfg.suite_spec().unwrap();
    let pre = cfg.backbone.init(&mut stream(4, &[]));
    let state = Checkpoint::pretrained(&cfg, &pre).train_state().unwrap();
    let eps = id_ood_episodes(&spec, Split::Test, 8).unwrap();
    let results = evaluate(&state, &eps, &cfg.eval_settings(EvalMode::Direct)).unwrap();
    for (r, ep) in results.iter().zip(&eps) {
        let base = protonet_logits(&pre, &cfg.backbone, ep, cfg.train.metric)
            .unwrap()
            .accuracy(&ep.query_labels().unwrap());
        assert_eq!(r.accuracy, base);
    }
}

#[test]
fn evaluation_is_deterministic_and_logs_round_trip() {
    let cfg = small_config();
    let state = trained(&cfg);
    let spec = cfg.suite_spec().unwrap();
    let eps = id_ood_episodes(&spec, Split::Val, 4).unwrap();
    for mode in [EvalMode::Direct, EvalMode::Select, EvalMode::Finetune] {
        let s = cfg.eval_settings(mode);
        let a = evaluate(&state, &eps, &s).unwrap();
        let b = evaluate(&state, &eps, &s).unwrap();
        assert_eq!(a, b);
        let text = results_csv(&a, cfg.train.n_experts).unwrap();
        assert_eq!(parse_results_csv(&text).unwrap(), a);
        let summary = summarize(&a);
        assert_eq!(summary[0].label, "ID avg");
        assert_eq!(summary[1].label, "OOD avg");
        assert!(a.iter().all(|r| (r.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12 || r.alpha.iter().all(|&x| x == 0.0)));
    }
    let ft = evaluate(&state, &eps, &cfg.eval_settings(EvalMode::Finetune)).unwrap();
    assert!(ft.iter().all(|r| r.lr == Some(cfg.adapt.ft_lr)));
}

#[test]
fn parameter_set_layout_survives_round_trip() {
    let cfg = small_config();
    let pre = cfg.backbone.init(&mut stream(5, &[]));
    let back = Checkpoint::decode(&Checkpoint::pretrained(&cfg, &pre).encode()).unwrap().theta_pre().unwrap();
    assert_eq!(back, pre);
    let zeros = ParamSet::zeros(cfg.backbone.specs());
    assert!(back.same_specs(&zeros));
}
