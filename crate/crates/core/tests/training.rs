use sreclip_core::io::Benchmark;
use sreclip_core::losses::Phase;
use sreclip_core::prototype::GraphContext;
use sreclip_core::{synth_generate, train, Error, ModelParams, RunConfig, SynthSpec, Tensor, TrainState, Trainer};

fn small_bench() -> Benchmark {
    synth_generate(&SynthSpec {
        c_seen: 6,
        c_unseen: 3,
        dim: 16,
        per_class: 10,
        ..SynthSpec::default()
    })
    .unwrap()
}

fn quick_config() -> RunConfig {
    RunConfig {
        warmup_epochs: 1,
        joint_epochs: 2,
        batch_size: 16,
        ..RunConfig::default()
    }
}

fn bits(params: &[&Tensor]) -> Vec<u64> {
    params
        .iter()
        .flat_map(|t| t.data().iter().map(|x| x.to_bits()))
        .collect()
}

fn prototype_bits(p: &ModelParams) -> Vec<u64> {
    bits(&p.prototype.tensors())
}

fn adapter_bits(p: &ModelParams) -> Vec<u64> {
    bits(&p.adapter.tensors())
}

#[test]
fn target_steps_never_touch_the_prototype_branch() {
    let bench = small_bench();
    let config = quick_config();
    let graph = GraphContext::new(&bench.graph).unwrap();
    let trainer = Trainer::new(&config, &graph, bench.bundle.training_view()).unwrap();
    let mut state = TrainState::new(ModelParams::init(16, &config).unwrap(), 0);
    let (proto0, adapter0) = (prototype_bits(&state.params), adapter_bits(&state.params));
    let batch = bench.bundle.target_features.gather_rows(&(0..16).collect::<Vec<_>>());
    for _ in 0..50 {
        trainer.step(&mut state, Phase::Target, &batch, None).unwrap();
    }
    assert_eq!(prototype_bits(&state.params), proto0);
    assert_ne!(adapter_bits(&state.params), adapter0);
    assert!(state.moments[3..].iter().all(|m| m.m.data().iter().all(|&x| x == 0.0)));

    let labels = &bench.bundle.source_labels[..16];
    let source = bench.bundle.source_features.gather_rows(&(0..16).collect::<Vec<_>>());
    trainer.step(&mut state, Phase::Source, &source, Some(labels)).unwrap();
    assert_ne!(prototype_bits(&state.params), proto0);
}

#[test]
fn training_is_bit_reproducible() {
    let bench = small_bench();
    let config = quick_config();
    let graph = GraphContext::new(&bench.graph).unwrap();
    let a = train(&config, &graph, bench.bundle.training_view()).unwrap();
    let b = train(&config, &graph, bench.bundle.training_view()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(bits(&a.params.tensors()), bits(&b.params.tensors()));
}

#[test]
fn target_labels_cannot_influence_training() {
    let bench = small_bench();
    let mut scrambled = bench.clone();
    let n = scrambled.bundle.class_count();
    for l in scrambled.bundle.target_eval_labels.iter_mut() {
        *l = (*l * 7 + 3) % n;
    }
    let config = quick_config();
    let graph = GraphContext::new(&bench.graph).unwrap();
    let a = train(&config, &graph, bench.bundle.training_view()).unwrap();
    let b = train(&config, &graph, scrambled.bundle.training_view()).unwrap();
    assert_eq!(a.log, b.log);
    assert_eq!(bits(&a.params.tensors()), bits(&b.params.tensors()));
}

#[test]
fn zero_epochs_leave_the_initial_parameters() {
    let bench = small_bench();
    let config = RunConfig {
        warmup_epochs: 0,
        joint_epochs: 0,
        ..quick_config()
    };
    let graph = GraphContext::new(&bench.graph).unwrap();
    let state = train(&config, &graph, bench.bundle.training_view()).unwrap();
    assert_eq!(state.params, ModelParams::init(16, &config).unwrap());
    assert!(state.log.is_empty());
    assert_eq!((state.epoch, state.step), (0, 0));
}

#[test]
fn zero_learning_rate_logs_but_does_not_move() {
    let bench = small_bench();
    let config = RunConfig {
        lr_adapter: 0.0,
        lr_prototype: 0.0,
        warmup_epochs: 1,
        joint_epochs: 0,
        ..quick_config()
    };
    let graph = GraphContext::new(&bench.graph).unwrap();
    let state = train(&config, &graph, bench.bundle.training_view()).unwrap();
    assert_eq!(state.params, ModelParams::init(16, &config).unwrap());
    assert_eq!(state.log.len(), 4);
    assert!(state.log[0].starts_with("step=1 phase=source ce="));
}

#[test]
fn empty_target_needs_the_flag() {
    let mut bench = small_bench();
    bench.bundle.target_features = Tensor::zeros(0, 16);
    bench.bundle.target_eval_labels.clear();
    let graph = GraphContext::new(&bench.graph).unwrap();
    let strict = quick_config();
    assert!(matches!(
        train(&strict, &graph, bench.bundle.training_view()),
        Err(Error::Data(_))
    ));
    let allowed = RunConfig {
        allow_empty_target: true,
        ..quick_config()
    };
    let state = train(&allowed, &graph, bench.bundle.training_view()).unwrap();
    assert!(state.log.iter().all(|l| l.contains("phase=source")));
    assert_eq!(state.epoch, 3);
}

#[test]
fn each_loss_toggle_row_gives_a_distinct_log() {
    let bench = small_bench();
    let graph = GraphContext::new(&bench.graph).unwrap();
    // (srs, align) on source, then on target
    let rows = [
        [false, false, false, false],
        [true, true, false, false],
        [false, false, true, true],
        [true, false, true, false],
        [false, true, false, true],
        [true, true, true, true],
    ];
    let mut logs = Vec::new();
    for [ss, as_, st, at] in rows {
        let config = RunConfig {
            srs_on_source: ss,
            align_on_source: as_,
            srs_on_target: st,
            align_on_target: at,
            ..quick_config()
        };
        logs.push(train(&config, &graph, bench.bundle.training_view()).unwrap().log);
    }
    for i in 0..logs.len() {
        for j in i + 1..logs.len() {
            assert_ne!(logs[i], logs[j], "rows {i} and {j} logged identically");
        }
    }
}

#[test]
fn zero_weights_leave_pure_information_loss_on_target() {
    let bench = small_bench();
    let graph = GraphContext::new(&bench.graph).unwrap();
    let config = RunConfig {
        beta: 0.0,
        gamma: 0.0,
        ..quick_config()
    };
    let state = train(&config, &graph, bench.bundle.training_view()).unwrap();
    for line in state.log.iter().filter(|l| l.contains("phase=target")) {
        let field = |k: &str| -> f64 {
            line.split(' ')
                .find_map(|kv| kv.strip_prefix(&format!("{k}=")))
                .unwrap()
                .parse()
                .unwrap()
        };
        assert_eq!(field("total"), field("info"));
    }
}

#[test]
fn mismatched_graph_is_rejected() {
    let bench = small_bench();
    let other = synth_generate(&SynthSpec {
        c_seen: 5,
        c_unseen: 3,
        dim: 16,
        per_class: 2,
        ..SynthSpec::default()
    })
    .unwrap();
    let graph = GraphContext::new(&other.graph).unwrap();
    assert!(train(&quick_config(), &graph, bench.bundle.training_view()).is_err());
}

#[test]
fn warmup_reduces_source_cross_entropy() {
    let bench = synth_generate(&SynthSpec::default()).unwrap();
    let config = RunConfig::default();
    let graph = GraphContext::new(&bench.graph).unwrap();
    let trainer = Trainer::new(&config, &graph, bench.bundle.training_view()).unwrap();
    let mut state = TrainState::new(ModelParams::init(graph.dim(), &config).unwrap(), config.seed);
    let mut ce = vec![trainer.source_ce(&state.params).unwrap()];
    for _ in 0..config.warmup_epochs {
        trainer.source_pass(&mut state).unwrap();
        ce.push(trainer.source_ce(&state.params).unwrap());
    }
    let decreasing = ce.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(decreasing >= 4, "source ce per epoch: {ce:?}");
}
