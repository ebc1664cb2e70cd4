mod common;

use common::{noise, tiny_config, toy_file};
use davad::autograd::SgdState;
use davad::frontend::Waveform;
use davad::model::{Partition, VadModel};
use davad::training::{
    sample_subsequences, train_step, trainable_names, TrainConfig, TrainMode, Trainer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn train_cfg(mode: TrainMode) -> TrainConfig {
    TrainConfig {
        chunk_duration: 0.05,
        batch_size: 4,
        max_epochs: 3,
        steps_per_epoch: Some(4),
        mode,
        seed: 9,
        ..TrainConfig::default()
    }
}

fn shared_params(m: &VadModel<f64>) -> Vec<(String, Vec<u64>)> {
    [Partition::Feature, Partition::Vad]
        .iter()
        .flat_map(|&p| m.parameter_names(p))
        .map(|n| {
            let bits = m
                .params()
                .by_name(&n)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            (n, bits)
        })
        .collect()
}

#[test]
fn zero_lambda_adversarial_trajectory_equals_plain_training() {
    let files = vec![toy_file("a", 2.0, 0, 1), toy_file("b", 2.0, 1, 2)];
    let bank = vec![Waveform::new(noise(4000, 3), 16000).unwrap()];

    let mut plain = VadModel::<f64>::new(tiny_config(0), 5).unwrap();
    let cfg = train_cfg(TrainMode::Vad);
    let r_plain = Trainer {
        files: &files,
        noise: &bank,
        config: &cfg,
        out_dir: None,
    }
    .run(&mut plain)
    .unwrap();

    let mut adv = VadModel::<f64>::new(tiny_config(2), 5).unwrap();
    adv.set_lambda(0.0).unwrap();
    let cfg = train_cfg(TrainMode::Adversarial);
    let r_adv = Trainer {
        files: &files,
        noise: &bank,
        config: &cfg,
        out_dir: None,
    }
    .run(&mut adv)
    .unwrap();

    for (a, b) in r_plain.iter().zip(&r_adv) {
        assert_eq!(a.vad_loss.unwrap().to_bits(), b.vad_loss.unwrap().to_bits());
        assert!(b.domain_loss.is_some());
    }
    assert_eq!(shared_params(&plain), shared_params(&adv));
}

#[test]
fn nonzero_lambda_changes_the_feature_extractor() {
    let files = vec![toy_file("a", 2.0, 0, 1), toy_file("b", 2.0, 1, 2)];
    let mut plain = VadModel::<f64>::new(tiny_config(2), 5).unwrap();
    let cfg = train_cfg(TrainMode::Vad);
    Trainer {
        files: &files,
        noise: &[],
        config: &cfg,
        out_dir: None,
    }
    .run(&mut plain)
    .unwrap();
    let mut adv = VadModel::<f64>::new(tiny_config(2), 5).unwrap();
    adv.set_lambda(1.0).unwrap();
    let cfg = train_cfg(TrainMode::Adversarial);
    Trainer {
        files: &files,
        noise: &[],
        config: &cfg,
        out_dir: None,
    }
    .run(&mut adv)
    .unwrap();
    assert_ne!(shared_params(&plain), shared_params(&adv));
}

#[test]
fn domain_mode_leaves_the_vad_branch_alone() {
    let files = vec![toy_file("a", 1.0, 0, 1), toy_file("b", 1.0, 1, 2)];
    let before = VadModel::<f64>::new(tiny_config(2), 5).unwrap();
    let mut m = VadModel::<f64>::new(tiny_config(2), 5).unwrap();
    let cfg = train_cfg(TrainMode::Domain);
    let records = Trainer {
        files: &files,
        noise: &[],
        config: &cfg,
        out_dir: None,
    }
    .run(&mut m)
    .unwrap();
    assert!(records
        .iter()
        .all(|r| r.vad_loss.is_none() && r.domain_loss.is_some()));
    for n in m.parameter_names(Partition::Vad) {
        assert_eq!(
            m.params().by_name(&n).unwrap().data(),
            before.params().by_name(&n).unwrap().data()
        );
    }
    let changed = m.parameter_names(Partition::Domain).iter().any(|n| {
        m.params().by_name(n).unwrap().data() != before.params().by_name(n).unwrap().data()
    });
    assert!(changed);
}

#[test]
fn training_is_deterministic_and_writes_checkpoints() {
    let files = vec![toy_file("a", 1.0, 0, 1)];
    let run = |dir: &std::path::Path| {
        let mut m = VadModel::<f32>::new(tiny_config(0), 1).unwrap();
        let cfg = TrainConfig {
            max_epochs: 2,
            ..train_cfg(TrainMode::Vad)
        };
        Trainer {
            files: &files,
            noise: &[],
            config: &cfg,
            out_dir: Some(dir),
        }
        .run(&mut m)
        .unwrap();
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run(a.path());
    run(b.path());
    for name in ["epoch_0000.ckpt", "epoch_0001.ckpt", "train.log"] {
        assert_eq!(
            std::fs::read(a.path().join(name)).unwrap(),
            std::fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
    let log = std::fs::read_to_string(a.path().join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log
        .lines()
        .all(|l| l.split('\t').count() == 5 && l.contains("\tNA\t")));
}

/// Frame-level detection error rate of a model on labeled chunks.
fn frame_error_rate(model: &VadModel<f32>, chunks: &[davad::training::TrainingChunk]) -> f64 {
    let refs: Vec<&[f32]> = chunks.iter().map(|c| c.waveform.samples()).collect();
    let scores = model.speech_scores(&refs).unwrap();
    let (mut errors, mut speech) = (0usize, 0usize);
    for (s, c) in scores.iter().zip(chunks) {
        for (&p, &y) in s.iter().zip(&c.labels) {
            speech += y as usize;
            errors += usize::from((p > 0.5) != (y == 1));
        }
    }
    errors as f64 / speech.max(1) as f64
}

#[test]
fn tiny_model_memorizes_one_batch() {
    let files = vec![toy_file("a", 3.0, 0, 21), toy_file("b", 3.0, 1, 22)];
    let mut model = VadModel::<f32>::new(tiny_config(0), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let batch = sample_subsequences(
        &files,
        &model.geometry(),
        model.chunk_samples(),
        8,
        &mut rng,
    )
    .unwrap();
    let opt = SgdState::new(0.01, trainable_names(&model, TrainMode::Vad)).unwrap();
    let mut epochs = None;
    for epoch in 0..200 {
        train_step(&mut model, &batch, TrainMode::Vad, &opt).unwrap();
        if frame_error_rate(&model, &batch) < 0.01 {
            epochs = Some(epoch + 1);
            break;
        }
    }
    println!("memorized after {epochs:?} epochs");
    assert!(
        epochs.is_some(),
        "final error {}",
        frame_error_rate(&model, &batch)
    );
}
