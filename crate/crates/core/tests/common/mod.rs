#![allow(dead_code)]

use davad::frontend::{SincNetConfig, Waveform};
use davad::model::ModelConfig;
use davad::timeline::Timeline;
use davad::training::TrainingFile;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 4 sinc filters, H = 8, 50 ms chunks at 16 kHz.
pub fn tiny_config(n_domains: usize) -> ModelConfig {
    ModelConfig {
        chunk_duration: 0.05,
        hidden_size: 8,
        n_domains,
        sinc: SincNetConfig {
            filters: 4,
            kernel_length: 31,
            stride: 5,
            conv_layers: 1,
            conv_channels: 4,
            conv_kernel: 3,
            pool: 2,
            ..SincNetConfig::default()
        },
        ..ModelConfig::default()
    }
}

pub fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-0.5f32..0.5)).collect()
}

/// A file with loud tone bursts (300 + 200·domain Hz) as speech over faint
/// noise.
pub fn toy_file(uri: &str, seconds: f64, domain: usize, seed: u64) -> TrainingFile {
    let sr = 16000;
    let n = (seconds * sr as f64) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut regions = Vec::new();
    let mut t = 0.0;
    while t < seconds {
        let pause = rng.random_range(0.05..0.15);
        let speech = rng.random_range(0.05..0.2);
        if t + pause + speech < seconds {
            regions.push((t + pause, t + pause + speech));
        }
        t += pause + speech;
    }
    let timeline = Timeline::new(regions).unwrap();
    let tone = 300.0 + 200.0 * domain as f64;
    let samples = (0..n)
        .map(|i| {
            let time = i as f64 / sr as f64;
            let s = if timeline.contains(time) {
                0.5 * (2.0 * std::f64::consts::PI * tone * time).sin()
            } else {
                0.0
            };
            (s + rng.random_range(-0.02..0.02)) as f32
        })
        .collect();
    TrainingFile {
        uri: uri.into(),
        audio: Waveform::new(samples, sr).unwrap(),
        speech: timeline,
        domain,
    }
}
