use flowmatch::model::{Activation, LrSchedule, TimeEmbedding};
use flowmatch::objectives::TimeSampling;
use flowmatch::paths::PathSchedule;
use flowmatch_cli::config::{DatasetSpec, ModelSpec, TrainingSpec};
use flowmatch_cli::RunConfig;
use proptest::prelude::*;

fn configs() -> impl Strategy<Value = RunConfig> {
    let dataset = prop_oneof![
        Just(DatasetSpec::Checkerboard),
        Just(DatasetSpec::TwoMoons),
        prop::collection::vec(prop::collection::vec(-5.0..5.0f64, 2), 1..4)
            .prop_map(|points| DatasetSpec::Points { points }),
    ];
    let schedule = prop_oneof![
        (1e-6..0.5f64).prop_map(PathSchedule::ot_with),
        Just(PathSchedule::vp()),
        Just(PathSchedule::ve()),
    ];
    let model = (
        prop::option::of(prop::collection::vec(1usize..128, 1..4)),
        prop::option::of(prop_oneof![Just(Activation::Silu), Just(Activation::Tanh)]),
        prop::option::of((1usize..9).prop_map(|frequencies| TimeEmbedding::Sinusoidal { frequencies })),
    )
        .prop_map(|(widths, activation, embedding)| ModelSpec {
            widths,
            activation,
            embedding,
            ..ModelSpec::default()
        });
    let training = (
        1usize..100_000,
        1usize..1024,
        prop::bool::ANY,
        prop::option::of(0usize..1000),
        prop::option::of(0.0..0.9999f64),
    )
        .prop_map(|(steps, batch, stratified, warmup, ema_decay)| TrainingSpec {
            steps,
            batch,
            time_sampling: if stratified { TimeSampling::Stratified } else { TimeSampling::Uniform },
            lr_schedule: warmup.map_or(LrSchedule::Constant, |warmup| LrSchedule::PolynomialDecay { warmup }),
            ema_decay,
            ..TrainingSpec::default()
        });
    (dataset, schedule, model, training, 1e-6..1e-1f64, any::<u64>()).prop_map(
        |(dataset, schedule, model, training, lr, seed)| {
            let mut cfg = RunConfig::from_json(r#"{"schema_version": 1, "dataset": {"kind": "checkerboard"}}"#)
                .unwrap();
            cfg.dataset = dataset;
            cfg.schedule = schedule;
            cfg.model = model;
            cfg.training = training;
            cfg.optimizer.lr = lr;
            cfg.seed = seed;
            cfg
        },
    )
}

proptest! {
    #[test]
    fn config_survives_save_and_load(cfg in configs()) {
        let text = cfg.to_json();
        let back = RunConfig::from_json(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_json(), text);
    }
}
