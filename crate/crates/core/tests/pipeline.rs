use sigmeta::episodes::{
    mark_forgery_availability, sample_episode, split_users, EpisodeConfig, SampleBatch, SplitSpec, UserTask,
};
use sigmeta::evaluation::{evaluate_protocol, score_user, ProtocolConfig};
use sigmeta::metalearn::{adapt, meta_train, MetaTrainConfig, ValidationMetrics};
use sigmeta::netmodel::{init_parameters, SignatureNet};
use sigmeta::preprocess::CropMode;
use sigmeta::synthdata::{generate_dataset_with, SynthUserSpec};
use sigmeta::ParameterSet;

fn users(n: usize, seed: u64) -> Vec<UserTask> {
    let template = SynthUserSpec {
        n_genuine: 12,
        n_skilled: 6,
        ..SynthUserSpec::new(0, 0)
    };
    generate_dataset_with(n, seed, &template).unwrap()
}

#[test]
fn adaptation_loss_does_not_increase() {
    let data = users(6, 21);
    let pool: Vec<&UserTask> = data[1..].iter().collect();
    let cfg = EpisodeConfig {
        n_rf_adapt: 5,
        n_genuine_meta: 5,
        ..EpisodeConfig::default()
    };
    let ep = sample_episode(&data[0], &pool, &cfg, 4).unwrap();
    let d_u = SampleBatch::from_samples(&ep.adapt_set, CropMode::Center).unwrap();
    let theta: ParameterSet = init_parameters(0);
    let run = adapt(&SignatureNet, &theta, &d_u, 5, 0.001).unwrap();
    assert_eq!(run.trajectory.len(), 5);
    let l = &run.per_step_inner_loss;
    for w in l.windows(2) {
        assert!(w[1] <= w[0] + 1e-6, "losses {l:?}");
    }
}

#[test]
fn scores_are_probabilities_per_image() {
    let data = users(2, 5);
    let theta: ParameterSet = init_parameters(1);
    let refs: Vec<_> = data[0].genuine.iter().take(3).collect();
    let batch =
        SampleBatch::<f32>::from_images(&refs, sigmeta::episodes::SampleClass::Genuine, CropMode::Center).unwrap();
    let s = score_user(&SignatureNet, &theta, &batch.images).unwrap();
    assert_eq!(s.len(), 3);
    assert!(s.iter().all(|p| (0.0..=1.0).contains(p)));
    let single =
        SampleBatch::<f32>::from_images(&refs[..1], sigmeta::episodes::SampleClass::Genuine, CropMode::Center).unwrap();
    let s1 = score_user(&SignatureNet, &theta, &single.images).unwrap();
    assert!((s1[0] - s[0]).abs() < 1e-6);
}

#[test]
fn untrained_protocol_is_near_chance_and_repeatable() {
    let data = users(6, 33);
    let theta: ParameterSet = init_parameters(0);
    let cfg = ProtocolConfig {
        n_rf_query: 4,
        ..ProtocolConfig::default()
    };
    let a = evaluate_protocol(&SignatureNet, &theta, &data, &cfg).unwrap();
    assert_eq!(a.report.splits.len(), 10);
    assert_eq!(a.scores.len(), 10);
    let mean = a.report.eer_global.mean.unwrap();
    assert!((0.35..=0.65).contains(&mean), "global EER {mean}");
    let b = evaluate_protocol(&SignatureNet, &theta, &data, &cfg).unwrap();
    assert_eq!(a.report.to_json(), b.report.to_json());
}

fn tiny_run() -> (ParameterSet, Vec<String>) {
    let split = split_users(
        users(10, 8),
        &SplitSpec::Ranges {
            train: 0..8,
            val: 8..10,
            test: 10..10,
        },
        0,
    )
    .unwrap();
    let split = mark_forgery_availability(split, 1.0, 0).unwrap();
    let cfg = MetaTrainConfig {
        inner_steps: 1,
        epochs: 1,
        msl_epochs: 1,
        first_order: true,
        ..MetaTrainConfig::default()
    };
    let ecfg = EpisodeConfig {
        n_rf_adapt: 2,
        n_genuine_meta: 3,
        n_rf_meta: 3,
        ..EpisodeConfig::default()
    };
    let mut calls = 0.0;
    let out = meta_train(
        &SignatureNet,
        init_parameters(0),
        &cfg,
        &split,
        &ecfg,
        |_, _| {
            calls += 1.0;
            Ok(ValidationMetrics {
                eer_global: 1.0 / calls,
                eer_user: 0.0,
            })
        },
        |_| {},
    )
    .unwrap();
    assert_eq!(out.curve.len(), 2);
    assert_eq!(out.best_epoch, 1);
    let rows = out.curve.iter().map(|r| format!("{r:?}")).collect();
    (out.best, rows)
}

#[test]
fn meta_training_is_deterministic() {
    let (a, ra) = tiny_run();
    let (b, rb) = tiny_run();
    assert_eq!(ra, rb);
    for (x, y) in a.tensors().zip(b.tensors()) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let init: ParameterSet = init_parameters(0);
    assert_ne!(init.entries()[0].1.data(), a.entries()[0].1.data());
}
