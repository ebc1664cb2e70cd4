//! One PASS/FAIL line per acceptance criterion. Criteria 8 to 10 train on
//! the desk-scale synthetic corpus and take most of the run time.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use davad::autograd::{
    finite_difference_check, relative_error, Checkpoint, SgdState, Tape, Tensor, Var,
};
use davad::data::segments::{format_segments, parse_segments_str};
use davad::data::wav::{decode_wav, encode_wav};
use davad::data::{CorpusManifest, ManifestEntry, SampleFormat, Split};
use davad::experiment::{sweep_against_baseline, Corpus, ExperimentConfig};
use davad::frontend::{sinc_kernels_on_tape, FrameGeometry, SincNetConfig, Waveform};
use davad::inference::{aggregate_scores, binarize, FrameScoreSequence};
use davad::metrics::{detection_counts, detection_error_rate, DetectionCounts, ReportRow};
use davad::model::{lstm_sequence, DomainPass, ModelConfig, Partition, VadModel};
use davad::timeline::Timeline;
use davad::training::{
    domain_loss, one_hot, sample_subsequences, train_step, trainable_names, vad_loss, TrainConfig,
    TrainMode, Trainer, TrainingChunk, TrainingFile,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// In-domain test DetER (%) of the desk pipeline with seed 0, recorded once.
const DESK_DETER_FIXTURE: f64 = 1.6;
const DESK_DETER_TOLERANCE: f64 = 2.0;
const DESK_DETER_LIMIT: f64 = 10.0;
const DOMAIN_ACCURACY_LIMIT: f64 = 0.90;
const LOO_FOLDS: [&str; 3] = ["dom00", "dom04", "dom08"];

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn tiny_model_config(n_domains: usize, chunk: f64) -> ModelConfig {
    ModelConfig {
        chunk_duration: chunk,
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

fn noise(n: usize, seed: u64) -> Vec<f32> {
    let mut r = rng(seed);
    (0..n).map(|_| r.random_range(-0.5f32..0.5)).collect()
}

/// Tone bursts as speech over faint noise, at 16 kHz.
fn toy_file(uri: &str, seconds: f64, domain: usize, seed: u64) -> TrainingFile {
    let sr = 16000;
    let mut r = rng(seed);
    let mut regions = Vec::new();
    let mut t = 0.0;
    while t < seconds {
        let (pause, speech) = (r.random_range(0.05..0.15), r.random_range(0.05..0.2));
        if t + pause + speech < seconds {
            regions.push((t + pause, t + pause + speech));
        }
        t += pause + speech;
    }
    let speech = Timeline::new(regions).unwrap();
    let tone = 300.0 + 200.0 * domain as f64;
    let samples = (0..(seconds * sr as f64) as usize)
        .map(|i| {
            let time = i as f64 / sr as f64;
            let s = if speech.contains(time) {
                0.5 * (std::f64::consts::TAU * tone * time).sin()
            } else {
                0.0
            };
            (s + r.random_range(-0.02..0.02)) as f32
        })
        .collect();
    TrainingFile {
        uri: uri.into(),
        audio: Waveform::new(samples, sr).unwrap(),
        speech,
        domain,
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = rng(seed);
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn weighted_sum(t: &mut Tape<f64>, x: Var) -> davad::Result<Var> {
    let shape = t.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = t.constant(
        shape,
        (0..n).map(|i| ((i * 7 % 13) as f64 - 6.5) / 5.0).collect(),
    )?;
    let p = t.mul(x, w)?;
    Ok(t.sum(p))
}

// 1

type OpCase = (
    &'static str,
    Vec<Tensor<f64>>,
    Box<dyn Fn(&mut Tape<f64>, &[Var]) -> davad::Result<Var>>,
);

fn operator_cases() -> Vec<OpCase> {
    let a = rand_tensor(&[3, 4], 1);
    let x3 = rand_tensor(&[2, 3, 17], 7);
    let positive = Tensor::new(vec![4], vec![0.3, 1.2, 2.0, 4.0]).unwrap();
    vec![
        (
            "matmul",
            vec![a.clone(), rand_tensor(&[4, 5], 2)],
            Box::new(|t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y)
            }),
        ),
        (
            "add_bias",
            vec![a.clone(), rand_tensor(&[4], 4)],
            Box::new(|t, v| {
                let y = t.add_bias(v[0], v[1])?;
                weighted_sum(t, y)
            }),
        ),
        (
            "add/sub/mul/scale",
            vec![a.clone(), rand_tensor(&[3, 4], 3)],
            Box::new(|t, v| {
                let s = t.add(v[0], v[1])?;
                let d = t.sub(v[0], v[1])?;
                let m = t.mul(s, d)?;
                let y = t.scale(m, -2.5);
                weighted_sum(t, y)
            }),
        ),
        (
            "tanh/sigmoid/leaky_relu",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.tanh(v[0]);
                let y = t.sigmoid(y);
                let z = t.leaky_relu(v[0], 0.2);
                let s = t.add(y, z)?;
                weighted_sum(t, s)
            }),
        ),
        (
            "log_clamp",
            vec![positive],
            Box::new(|t, v| {
                let y = t.log_clamp(v[0], 1e-12);
                weighted_sum(t, y)
            }),
        ),
        (
            "softmax/pick",
            vec![a.clone()],
            Box::new(|t, v| {
                let y = t.softmax(v[0], 1)?;
                let p = t.pick(y, &[0, 3, 1])?;
                weighted_sum(t, p)
            }),
        ),
        (
            "conv1d",
            vec![x3.clone(), rand_tensor(&[4, 3, 5], 8)],
            Box::new(|t, v| {
                let y = t.conv1d(v[0], v[1], 3)?;
                weighted_sum(t, y)
            }),
        ),
        (
            "max_pool1d",
            vec![x3.clone()],
            Box::new(|t, v| {
                let y = t.max_pool1d(v[0], 3)?;
                weighted_sum(t, y)
            }),
        ),
        (
            "channel_norm",
            vec![x3.clone(), rand_tensor(&[3], 9), rand_tensor(&[3], 10)],
            Box::new(|t, v| {
                let y = t.channel_norm(v[0], v[1], v[2], 1e-5)?;
                weighted_sum(t, y)
            }),
        ),
        (
            "reshape/permute/slice/concat",
            vec![x3],
            Box::new(|t, v| {
                let p = t.permute(v[0], &[2, 0, 1])?;
                let r = t.reshape(p, &[34, 3])?;
                let top = t.slice_rows(r, 2, 5)?;
                let rows = t.concat_rows(&[top, r])?;
                let left = t.slice_cols(rows, 1, 2)?;
                let cols = t.concat_cols(&[left, rows])?;
                let y = t.tanh(cols);
                weighted_sum(t, y)
            }),
        ),
        (
            "lstm_sequence",
            vec![
                rand_tensor(&[8, 3], 15),
                rand_tensor(&[3, 8], 16),
                rand_tensor(&[2, 8], 17),
                rand_tensor(&[8], 18),
            ],
            Box::new(|t, v| {
                let f = lstm_sequence(t, v[0], v[1], v[2], v[3], 2, false)?;
                let b = lstm_sequence(t, v[0], v[1], v[2], v[3], 2, true)?;
                let s = t.add(f, b)?;
                weighted_sum(t, s)
            }),
        ),
    ]
}

fn model_loss_values(
    model: &VadModel<f64>,
    chunks: &[Vec<f32>],
    labels: &[u8],
    domains: &[usize],
) -> (f64, f64) {
    let refs: Vec<&[f32]> = chunks.iter().map(Vec::as_slice).collect();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, false);
    let heads = model
        .forward(&mut tape, &bound, &refs, true, DomainPass::Plain)
        .unwrap();
    let lv = vad_loss(&mut tape, heads.vad.unwrap(), labels).unwrap();
    let targets = one_hot::<f64>(domains, model.config().n_domains).unwrap();
    let ld = domain_loss(&mut tape, heads.domain.unwrap(), &targets).unwrap();
    (tape.value(lv)[0], tape.value(ld)[0])
}

/// Worst relative error over every parameter of the tiny composite model,
/// with θ_f checked against `L_v − λ·L_d`.
fn full_model_error(h: f64) -> (f64, String) {
    let lambda = 0.7;
    let mut model = VadModel::<f64>::new(tiny_model_config(3, 0.02), 42).unwrap();
    model.set_lambda(lambda).unwrap();
    let id = model.params().index_of("f.sinc.u_low").unwrap();
    for v in model.params_mut().get_mut(id).data_mut() {
        *v += 5.0;
    }
    let frames = model.geometry().frames;
    let chunks: Vec<Vec<f32>> = (0..2)
        .map(|i| noise(model.chunk_samples(), 100 + i))
        .collect();
    let labels: Vec<u8> = (0..2 * frames).map(|i| ((i / 5) % 2) as u8).collect();
    let domains = [0, 1];

    let refs: Vec<&[f32]> = chunks.iter().map(Vec::as_slice).collect();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let heads = model
        .forward(&mut tape, &bound, &refs, true, DomainPass::Adversarial)
        .unwrap();
    let lv = vad_loss(&mut tape, heads.vad.unwrap(), &labels).unwrap();
    let ld = domain_loss(
        &mut tape,
        heads.domain.unwrap(),
        &one_hot::<f64>(&domains, 3).unwrap(),
    )
    .unwrap();
    let total = tape.add(lv, ld).unwrap();
    tape.backward(total).unwrap();
    model.params_mut().clear_grads();
    model.params_mut().collect_grads(&tape, &bound).unwrap();
    drop(tape);

    let names: Vec<String> = model.params().iter().map(|(n, _)| n.to_string()).collect();
    let mut worst = (0.0f64, String::new());
    for name in &names {
        let id = model.params().index_of(name).unwrap();
        let grads = model.params().get(id).grad().unwrap().to_vec();
        for (j, &g) in grads.iter().enumerate() {
            let x0 = model.params().get(id).data()[j];
            model.params_mut().get_mut(id).data_mut()[j] = x0 + h;
            let (vp, dp) = model_loss_values(&model, &chunks, &labels, &domains);
            model.params_mut().get_mut(id).data_mut()[j] = x0 - h;
            let (vm, dm) = model_loss_values(&model, &chunks, &labels, &domains);
            model.params_mut().get_mut(id).data_mut()[j] = x0;
            let (gv, gd) = ((vp - vm) / (2.0 * h), (dp - dm) / (2.0 * h));
            let numeric = match Partition::of(name).unwrap() {
                Partition::Feature => gv - lambda * gd,
                Partition::Vad => gv,
                Partition::Domain => gd,
            };
            let e = relative_error(g, numeric);
            if e > worst.0 {
                worst = (e, format!("{name}[{j}]"));
            }
        }
    }
    worst
}

fn c1_gradients() -> Check {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for (name, inputs, f) in operator_cases() {
        let r =
            finite_difference_check(|t, v| f(t, v), &inputs, 1e-5).map_err(|e| e.to_string())?;
        ensure(r.max_relative_error < 1e-4, || format!("{name}: {:?}", r))?;
        worst = worst.max(r.max_relative_error);
    }
    let sinc = finite_difference_check(
        |t, v| {
            let k = sinc_kernels_on_tape(t, v[0], v[1], 31, 16000)?;
            weighted_sum(t, k)
        },
        &[
            Tensor::new(vec![3], vec![30.0, 200.0, 900.0]).unwrap(),
            Tensor::new(vec![3], vec![100.0, 400.0, 1500.0]).unwrap(),
        ],
        1e-4,
    )
    .map_err(|e| e.to_string())?;
    ensure(sinc.max_relative_error < 1e-4, || {
        format!("sinc kernels: {:e}", sinc.max_relative_error)
    })?;
    let (model_err, at) = full_model_error(1e-4);
    ensure(model_err < 1e-4, || {
        format!("full model: {model_err:e} at {at}")
    })?;
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(60), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "operators {worst:.1e}, sinc {:.1e}, full model {model_err:.1e}; {:.1}s",
        sinc.max_relative_error,
        elapsed.as_secs_f64()
    ))
}

// 2

fn shared_param_bits(m: &VadModel<f64>) -> Vec<(String, Vec<u64>)> {
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

fn c2_gradient_reversal() -> Check {
    let x = rand_tensor(&[6], 14);
    let plain = {
        let mut tape = Tape::new();
        let v = tape.leaf(&x.clone().with_grad());
        let y = tape.tanh(v);
        let l = weighted_sum(&mut tape, y).unwrap();
        tape.backward(l).unwrap();
        tape.grad(v).unwrap().to_vec()
    };
    for lambda in [0.0, 0.5, 1.0, 10.0] {
        let mut tape = Tape::new();
        let v = tape.leaf(&x.clone().with_grad());
        let r = tape.gradient_reverse(v, lambda).unwrap();
        let same = tape
            .value(r)
            .iter()
            .zip(x.data())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("forward differs at λ={lambda}"))?;
        let y = tape.tanh(r);
        let l = weighted_sum(&mut tape, y).unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(v).unwrap();
        let exact = g.iter().zip(&plain).all(|(a, b)| *a == -lambda * b);
        ensure(exact, || {
            format!("backward differs from −λ·g at λ={lambda}")
        })?;
    }

    let files = vec![toy_file("a", 2.0, 0, 1), toy_file("b", 2.0, 1, 2)];
    let bank = vec![Waveform::new(noise(4000, 3), 16000).unwrap()];
    let cfg = |mode| TrainConfig {
        chunk_duration: 0.05,
        batch_size: 4,
        max_epochs: 3,
        steps_per_epoch: Some(4),
        mode,
        seed: 9,
        ..TrainConfig::default()
    };
    let mut vad = VadModel::<f64>::new(tiny_model_config(0, 0.05), 5).unwrap();
    let c = cfg(TrainMode::Vad);
    let r_vad = Trainer {
        files: &files,
        noise: &bank,
        config: &c,
        out_dir: None,
    }
    .run(&mut vad)
    .map_err(|e| e.to_string())?;
    let mut adv = VadModel::<f64>::new(tiny_model_config(2, 0.05), 5).unwrap();
    adv.set_lambda(0.0).unwrap();
    let c = cfg(TrainMode::Adversarial);
    let r_adv = Trainer {
        files: &files,
        noise: &bank,
        config: &c,
        out_dir: None,
    }
    .run(&mut adv)
    .map_err(|e| e.to_string())?;
    let losses_equal = r_vad
        .iter()
        .zip(&r_adv)
        .all(|(a, b)| a.vad_loss.map(f64::to_bits) == b.vad_loss.map(f64::to_bits));
    ensure(losses_equal, || "per-epoch VAD losses differ at λ=0".into())?;
    ensure(shared_param_bits(&vad) == shared_param_bits(&adv), || {
        "θ_f/θ_v differ at λ=0".into()
    })?;
    Ok(format!(
        "λ ∈ {{0, 0.5, 1, 10}} exact; λ=0 trajectory identical over {} epochs",
        r_vad.len()
    ))
}

// 3

fn c3_loss_oracles() -> Check {
    let mut r = rng(1);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (n, t) = (r.random_range(1..6), r.random_range(1..40));
        let scores: Vec<f64> = (0..n * t)
            .flat_map(|_| {
                let p = 1.0 / (1.0 + f64::exp(-r.random_range(-4.0..4.0)));
                [1.0 - p, p]
            })
            .collect();
        let labels: Vec<u8> = (0..n * t).map(|_| r.random_range(0..2)).collect();
        let mut brute = 0.0;
        for i in 0..n * t {
            brute -= scores[2 * i + labels[i] as usize].ln();
        }
        brute /= n as f64;
        let mut tape = Tape::new();
        let s = tape.leaf(&Tensor::new(vec![n, t, 2], scores).unwrap());
        let l = vad_loss(&mut tape, s, &labels).unwrap();
        worst = worst.max((tape.value(l)[0] - brute).abs());
    }
    for _ in 0..100 {
        let (n, k) = (r.random_range(1..8), r.random_range(2..12));
        let preds: Vec<f64> = (0..n * k).map(|_| r.random_range(-1.0..1.5)).collect();
        let domains: Vec<usize> = (0..n).map(|_| r.random_range(0..k)).collect();
        let mut brute = 0.0;
        for i in 0..n {
            for c in 0..k {
                let d = f64::from(u8::from(domains[i] == c));
                brute += (d - preds[i * k + c]).powi(2);
            }
        }
        brute /= n as f64;
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::new(vec![n, k], preds).unwrap());
        let l = domain_loss(&mut tape, p, &one_hot::<f64>(&domains, k).unwrap()).unwrap();
        worst = worst.max((tape.value(l)[0] - brute).abs());
    }
    ensure(worst <= 1e-6, || format!("max deviation {worst:e}"))?;

    let t = 115;
    let mut tape = Tape::new();
    let s = tape.leaf(&Tensor::new(vec![2, t, 2], vec![0.5; 4 * t]).unwrap());
    let l = vad_loss(&mut tape, s, &vec![1; 2 * t]).unwrap();
    let uniform_vad = tape.value(l)[0];
    ensure(
        (uniform_vad - t as f64 * std::f64::consts::LN_2).abs() < 1e-9,
        || format!("uniform VAD {uniform_vad}"),
    )?;
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::new(vec![3, 11], vec![1.0 / 11.0; 33]).unwrap());
    let l = domain_loss(&mut tape, p, &one_hot::<f64>(&[0, 4, 10], 11).unwrap()).unwrap();
    let uniform_dom = tape.value(l)[0];
    ensure((uniform_dom - 10.0 / 11.0).abs() < 1e-12, || {
        format!("uniform domain {uniform_dom}")
    })?;
    Ok(format!(
        "200 instances, max deviation {worst:.1e}; T·ln2 and 10/11 hold"
    ))
}

// 4

fn c4_metric_identity() -> Check {
    let rows = [
        (11.2, 6.5, 4.7),
        (10.5, 6.8, 3.7),
        (9.9, 5.7, 4.2),
        (11.3, 6.8, 4.5),
        (10.1, 6.1, 4.0),
        (13.4, 9.0, 4.4),
        (11.8, 7.6, 4.2),
    ];
    for (der, fa, miss) in rows {
        let c = DetectionCounts {
            false_alarm: fa,
            missed_detection: miss,
            total_speech: 100.0,
        };
        let line = ReportRow {
            scope: "x".into(),
            counts: c,
        }
        .to_tsv();
        let fields: Vec<&str> = line.split('\t').collect();
        let want = [
            format!("{der:.1}"),
            format!("{fa:.1}"),
            format!("{miss:.1}"),
        ];
        ensure(fields[1..4] == want, || format!("row {line:?} vs {want:?}"))?;
        let rate = detection_error_rate(&c).map_err(|e| e.to_string())?;
        ensure(format!("{rate:.1}") == want[0], || {
            format!("{rate} vs {der}")
        })?;
    }
    Ok(format!("{} rows reproduced", rows.len()))
}

// 5

fn random_timeline(r: &mut impl Rng, extent: f64) -> Timeline {
    let n = r.random_range(0..8);
    let regions = (0..n)
        .map(|_| {
            let s = r.random_range(0.0..extent - 0.01);
            (s, (s + r.random_range(0.001..2.0)).min(extent))
        })
        .collect();
    Timeline::new(regions).unwrap()
}

fn c5_metric_oracle() -> Check {
    let start = Instant::now();
    let mut r = rng(7);
    for i in 0..1000 {
        let extent = r.random_range(1.0..10.0);
        let (reference, hypothesis) = (
            random_timeline(&mut r, extent),
            random_timeline(&mut r, extent),
        );
        let exact = detection_counts(&reference, &hypothesis, extent).map_err(|e| e.to_string())?;
        let cells = (extent * 1000.0).round() as usize;
        let (mut fa, mut miss, mut total) = (0usize, 0usize, 0usize);
        for c in 0..cells {
            let t = (c as f64 + 0.5) / 1000.0;
            let (a, b) = (reference.contains(t), hypothesis.contains(t));
            total += usize::from(a);
            fa += usize::from(b && !a);
            miss += usize::from(a && !b);
        }
        let tol = 0.002 * 2.0 * (reference.len() + hypothesis.len()) as f64 + 1e-9;
        for (x, cells) in [
            (exact.false_alarm, fa),
            (exact.missed_detection, miss),
            (exact.total_speech, total),
        ] {
            let y = cells as f64 / 1000.0;
            ensure((x - y).abs() <= tol, || {
                format!("pair {i}: {x} vs {y} (tol {tol})")
            })?;
        }
    }
    let elapsed = start.elapsed();
    ensure(elapsed < Duration::from_secs(30), || {
        format!("took {elapsed:?}")
    })?;
    Ok(format!(
        "1000 pairs within 2 ms per boundary; {:.1}s",
        elapsed.as_secs_f64()
    ))
}

// 6

fn aggregation_oracle(windows: &[(f64, FrameScoreSequence)], duration: f64) -> Vec<f64> {
    let p = windows[0].1.frame_period;
    let frames = ((duration / p).ceil() as usize).max(1);
    let mut buckets: Vec<Vec<f64>> = vec![Vec::new(); frames];
    for (offset, w) in windows {
        for (i, &s) in w.scores.iter().enumerate() {
            let c = offset + w.origin + i as f64 * w.frame_period;
            let mut best: Option<(usize, f64)> = None;
            for g in 0..frames + 2 {
                let d = (c - g as f64 * p).abs();
                if best.is_none_or(|(_, bd)| d <= bd + 1e-12) {
                    best = Some((g, d));
                }
            }
            let (g, d) = best.unwrap();
            if g < frames && d <= p / 2.0 + 1e-9 {
                buckets[g].push(s);
            }
        }
    }
    let mean: Vec<Option<f64>> = buckets
        .iter()
        .map(|b| (!b.is_empty()).then(|| b.iter().sum::<f64>() / b.len() as f64))
        .collect();
    (0..frames)
        .map(|g| {
            mean[g].unwrap_or_else(|| {
                let mut best: Option<(usize, f64)> = None;
                for (h, m) in mean.iter().enumerate() {
                    if let Some(v) = m {
                        if best.is_none_or(|(bd, _)| g.abs_diff(h) < bd) {
                            best = Some((g.abs_diff(h), *v));
                        }
                    }
                }
                best.unwrap().1
            })
        })
        .collect()
}

fn c6_inference() -> Check {
    let mut r = rng(11);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let p = [0.01, 0.0169, 0.02][r.random_range(0..3)];
        let frames = r.random_range(5..40);
        let origin = r.random_range(0.0..p);
        let window = origin + frames as f64 * p;
        let duration = window * r.random_range(1.0..4.0);
        let step = r.random_range(1..=frames) as f64 * p;
        let mut offsets = Vec::new();
        let mut s = 0.0;
        while s + window <= duration {
            offsets.push(s);
            s += step;
        }
        if offsets.last().is_none_or(|o| o + window < duration) {
            offsets.push((duration - window).max(0.0));
        }
        let windows: Vec<(f64, FrameScoreSequence)> = offsets
            .iter()
            .map(|&o| {
                let scores = (0..frames).map(|_| r.random_range(0.0..1.0)).collect();
                (o, FrameScoreSequence::new(scores, p, origin).unwrap())
            })
            .collect();
        let got = aggregate_scores(&windows, duration).map_err(|e| e.to_string())?;
        let want = aggregation_oracle(&windows, duration);
        ensure(got.scores.len() == want.len(), || {
            "frame count differs".into()
        })?;
        for (a, b) in got.scores.iter().zip(&want) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-6, || {
        format!("aggregation deviates by {worst:e}")
    })?;

    for _ in 0..300 {
        let p = r.random_range(0.005..0.03);
        let frames = r.random_range(50..400);
        let extent = frames as f64 * p;
        let mut regions = Vec::new();
        let mut t = r.random_range(0.0..5.0 * p);
        loop {
            let s = t + r.random_range(2.0 * p..20.0 * p);
            let e = s + r.random_range(2.0 * p..30.0 * p);
            if e >= extent - p {
                break;
            }
            regions.push((s, e));
            t = e;
        }
        let truth = Timeline::new(regions).unwrap();
        let labels = truth.frame_labels(
            &FrameGeometry {
                frame_period: p,
                origin: 0.0,
                frames,
            },
            0.0,
        );
        let scores =
            FrameScoreSequence::new(labels.iter().map(|&l| f64::from(l)).collect(), p, 0.0)
                .unwrap();
        let back = binarize(&scores, 0.5).map_err(|e| e.to_string())?;
        ensure(back.len() == truth.len(), || {
            "region count differs after round trip".into()
        })?;
        for (a, b) in truth.regions().iter().zip(back.regions()) {
            let ok = (a.0 - b.0).abs() <= p + 1e-9 && (a.1 - b.1).abs() <= p + 1e-9;
            ensure(ok, || format!("{a:?} vs {b:?} (frame {p})"))?;
        }
    }
    Ok(format!(
        "aggregation max deviation {worst:.1e}; 300 round trips within one frame"
    ))
}

// 7

fn frame_error_rate(model: &VadModel<f32>, chunks: &[TrainingChunk]) -> f64 {
    let refs: Vec<&[f32]> = chunks.iter().map(|c| c.waveform.samples()).collect();
    let scores = model.speech_scores(&refs).unwrap();
    let (mut errors, mut speech) = (0usize, 0usize);
    for (s, c) in scores.iter().zip(chunks) {
        for (&p, &y) in s.iter().zip(&c.labels) {
            speech += usize::from(y);
            errors += usize::from((p > 0.5) != (y == 1));
        }
    }
    100.0 * errors as f64 / speech.max(1) as f64
}

fn c7_overfit() -> Check {
    let start = Instant::now();
    let files = vec![toy_file("a", 3.0, 0, 21), toy_file("b", 3.0, 1, 22)];
    let mut model = VadModel::<f32>::new(tiny_model_config(0, 0.05), 3).unwrap();
    let batch = sample_subsequences(
        &files,
        &model.geometry(),
        model.chunk_samples(),
        8,
        &mut rng(4),
    )
    .map_err(|e| e.to_string())?;
    let opt =
        SgdState::new(0.01, trainable_names(&model, TrainMode::Vad)).map_err(|e| e.to_string())?;
    for epoch in 1..=200 {
        train_step(&mut model, &batch, TrainMode::Vad, &opt).map_err(|e| e.to_string())?;
        let der = frame_error_rate(&model, &batch);
        if der < 1.0 {
            let elapsed = start.elapsed();
            ensure(elapsed < Duration::from_secs(600), || {
                format!("took {elapsed:?}")
            })?;
            return Ok(format!(
                "train DetER {der:.2}% after {epoch} epochs; {:.1}s",
                elapsed.as_secs_f64()
            ));
        }
    }
    Err(format!(
        "train DetER {:.2}% after 200 epochs",
        frame_error_rate(&model, &batch)
    ))
}

// 8 to 10

/// A scratch directory with the desk config; the corpus is generated once.
struct Desk {
    dir: tempfile::TempDir,
}

impl Desk {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
        std::fs::copy(&config, dir.path().join("desk.toml")).unwrap();
        Desk { dir }
    }

    fn path(&self) -> &Path {
        self.dir.path()
    }

    fn run(&self, args: &[&str]) -> Result<String, String> {
        let out = common::run_in(self.path(), "desk.toml", args);
        if out.status.success() {
            Ok(String::from_utf8_lossy(&out.stdout).into_owned())
        } else {
            Err(format!(
                "davad {args:?}: {}",
                String::from_utf8_lossy(&out.stderr).trim()
            ))
        }
    }

    fn ensure_corpus(&self) -> Result<(), String> {
        if !self.path().join("corpus/manifest.tsv").exists() {
            self.run(&["generate"])?;
        }
        Ok(())
    }

    fn config(&self, overrides: &[String]) -> ExperimentConfig {
        let mut cfg =
            ExperimentConfig::load(Some(&self.path().join("desk.toml")), overrides).unwrap();
        cfg.manifest = self.path().join(&cfg.manifest);
        cfg.out_dir = self.path().join(&cfg.out_dir);
        cfg
    }
}

fn all_row(report: &str) -> Result<f64, String> {
    report
        .lines()
        .find_map(|l| l.strip_prefix("ALL\t"))
        .and_then(|rest| rest.split('\t').next()?.parse().ok())
        .ok_or_else(|| format!("no ALL row in {report:?}"))
}

fn c8_pipeline(desk: &Desk) -> Check {
    let start = Instant::now();
    desk.ensure_corpus()?;
    let hours = {
        let m = CorpusManifest::load(&desk.path().join("corpus/manifest.tsv"))
            .map_err(|e| e.to_string())?;
        let mut seconds = 0.0;
        for e in &m.entries {
            let (n, sr) =
                davad::data::wav::probe_wav(&m.audio_path(e)).map_err(|e| e.to_string())?;
            seconds += n as f64 / f64::from(sr);
        }
        ensure(m.domains().len() == 11, || {
            format!("{} domains", m.domains().len())
        })?;
        seconds / 3600.0
    };
    desk.run(&["train"])?;
    let tune = desk.run(&["tune"])?;
    desk.run(&["apply"])?;
    let report = desk.run(&["evaluate"])?;
    let der = all_row(&report)?;
    println!("    {}", tune.trim());
    for line in report.lines() {
        println!("    {line}");
    }
    let detail = format!(
        "{hours:.2} h corpus, test DetER {der:.1}% (fixture {DESK_DETER_FIXTURE:.1} ± {DESK_DETER_TOLERANCE}); {:.0}s",
        start.elapsed().as_secs_f64()
    );
    ensure(der < DESK_DETER_LIMIT, || {
        format!("{detail}: not below {DESK_DETER_LIMIT}%")
    })?;
    ensure(
        (der - DESK_DETER_FIXTURE).abs() <= DESK_DETER_TOLERANCE,
        || format!("{detail}: off the fixture"),
    )?;
    Ok(detail)
}

/// Leave-one-out over three folds on 30 s recordings with shorter training.
fn loo_overrides() -> Vec<String> {
    let folds = LOO_FOLDS.map(|f| format!("{f:?}")).join(",");
    vec![
        "id=\"loo\"".into(),
        "manifest=\"loo_corpus/manifest.tsv\"".into(),
        "synth.file_duration=30.0".into(),
        "train.max_epochs=21".into(),
        "train.steps_per_epoch=20".into(),
        "tune_every=3".into(),
        format!("folds=[{folds}]"),
    ]
}

fn c9_adversarial_direction(desk: &Desk) -> Check {
    let start = Instant::now();
    let overrides = loo_overrides();
    let mut args: Vec<&str> = overrides
        .iter()
        .flat_map(|o| ["--set", o.as_str()])
        .collect();
    let mut generate = args.clone();
    generate.extend(["generate", "--out", "loo_corpus"]);
    desk.run(&generate)?;
    args.extend(["matrix", "--rows", "D,E"]);
    let matrix = desk.run(&args)?;
    for line in matrix.lines() {
        println!("    {line}");
    }
    let der = |row: &str| -> Result<f64, String> {
        matrix
            .lines()
            .find(|l| l.starts_with(&format!("{row}\t")))
            .and_then(|l| l.split('\t').nth(4)?.parse().ok())
            .ok_or_else(|| format!("row {row} missing"))
    };
    let (d, e) = (der("D")?, der("E")?);

    // the sweep reuses row D as its fixed baseline instead of retraining it
    let cfg = desk.config(&overrides);
    let corpus = Corpus::load(&cfg).map_err(|e| e.to_string())?;
    let run = cfg.run_dir().join("matrix").join("run.json");
    let rows: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&run).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
    let counts = rows
        .as_array()
        .and_then(|r| r.iter().find(|x| x["id"] == "D"))
        .map(|x| &x["counts"])
        .ok_or("row D missing from run.json")?;
    let baseline = DetectionCounts {
        false_alarm: counts["false_alarm"].as_f64().unwrap_or(f64::NAN),
        missed_detection: counts["missed_detection"].as_f64().unwrap_or(f64::NAN),
        total_speech: counts["total_speech"].as_f64().unwrap_or(f64::NAN),
    };
    let sweep = sweep_against_baseline(
        &cfg,
        &corpus,
        baseline,
        &[0.0],
        &cfg.run_dir().join("sweep"),
    )
    .map_err(|e| e.to_string())?;
    let table = sweep.to_tsv();
    for line in table.lines() {
        println!("    {line}");
    }
    let zero = sweep
        .points
        .iter()
        .find(|p| p.lambda == 0.0)
        .ok_or("no λ=0 point")?;
    ensure(table.lines().count() == 2 + sweep.points.len(), || {
        "incomplete sweep table".into()
    })?;
    ensure(zero.relative_improvement == 0.0, || {
        format!("λ=0 improvement {}%", zero.relative_improvement)
    })?;
    let detail = format!(
        "D {d:.1}% vs E {e:.1}% over {} folds; λ=0 improvement {:.1}%; {:.0}s",
        LOO_FOLDS.len(),
        zero.relative_improvement,
        start.elapsed().as_secs_f64()
    );
    ensure(e <= d, || format!("{detail}: E above D"))?;
    Ok(detail)
}

fn c10_domain_classification(desk: &Desk) -> Check {
    let start = Instant::now();
    desk.ensure_corpus()?;
    // L_d is a per-chunk MSE on a softmax, far smaller in scale than the
    // frame-summed L_v the desk learning rate is set for.
    let out = desk.run(&[
        "--set",
        "id=\"domains\"",
        "--set",
        "train.schedule.lr_max=1.0",
        "--set",
        "train.max_epochs=150",
        "confusion",
    ])?;
    let csv = std::fs::read_to_string(desk.path().join("runs/domains/confusion/confusion.csv"))
        .map_err(|e| e.to_string())?;
    let rows: Vec<Vec<&str>> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    ensure(rows.len() == 11, || format!("{} rows", rows.len()))?;
    let cfg = desk.config(&[]);
    let chunk = (cfg.model.chunk_duration * f64::from(cfg.model.sinc.sample_rate)).round() as usize;
    let manifest = CorpusManifest::load(&cfg.manifest).map_err(|e| e.to_string())?;
    let (mut correct, mut total) = (0u64, 0u64);
    for (i, row) in rows.iter().enumerate() {
        let domain = row[0];
        let counts: Vec<u64> = row[1..]
            .iter()
            .map(|c| c.parse().unwrap_or(u64::MAX))
            .collect();
        let mut expected = 0u64;
        for e in manifest
            .entries
            .iter()
            .filter(|e| e.split == Split::Test && e.domain == domain)
        {
            let (n, _) =
                davad::data::wav::probe_wav(&manifest.audio_path(e)).map_err(|e| e.to_string())?;
            expected += (n / chunk) as u64;
        }
        let sum: u64 = counts.iter().sum();
        ensure(sum == expected, || {
            format!("row {domain} sums to {sum}, {expected} chunks")
        })?;
        correct += counts[i];
        total += sum;
    }
    let accuracy = correct as f64 / total as f64;
    for line in out.lines() {
        println!("    {line}");
    }
    let detail = format!(
        "accuracy {:.1}% on {total} chunks; {:.0}s",
        100.0 * accuracy,
        start.elapsed().as_secs_f64()
    );
    ensure(accuracy > DOMAIN_ACCURACY_LIMIT, || {
        format!("{detail}: not above {}%", 100.0 * DOMAIN_ACCURACY_LIMIT)
    })?;
    Ok(detail)
}

// 11

fn mutate(bytes: &[u8], r: &mut impl Rng) -> Vec<u8> {
    let mut b = bytes.to_vec();
    for _ in 0..r.random_range(1..4) {
        match r.random_range(0..3) {
            0 if !b.is_empty() => {
                let i = r.random_range(0..b.len());
                b[i] = r.random();
            }
            1 => b.truncate(r.random_range(0..=b.len())),
            _ => {
                let i = r.random_range(0..=b.len());
                b.insert(i, r.random());
            }
        }
    }
    b
}

fn c11_formats() -> Check {
    let mut r = rng(5);
    let wav = Waveform::new(noise(300, 1), 16000).unwrap();
    let pcm = encode_wav(&wav, SampleFormat::Pcm16);
    let float = encode_wav(&wav, SampleFormat::Float32);
    ensure(decode_wav(&float).ok() == Some(wav.clone()), || {
        "float WAV round trip".into()
    })?;
    let requantized = decode_wav(&pcm).map_err(|e| e.to_string())?;
    ensure(encode_wav(&requantized, SampleFormat::Pcm16) == pcm, || {
        "PCM16 round trip".into()
    })?;

    let timeline = Timeline::new(vec![(0.25, 1.5), (2.0, 3.125), (7.5, 9.0)]).unwrap();
    let seg = format_segments("rec", &timeline);
    let back = parse_segments_str(&seg, Path::new("rec.tsv"), "rec").map_err(|e| e.to_string())?;
    ensure(back.regions == timeline, || "segment round trip".into())?;

    let entries = (0..6)
        .map(|i| ManifestEntry {
            uri: format!("rec{i}"),
            audio: PathBuf::from(format!("audio/rec{i}.wav")),
            annotation: PathBuf::from(format!("annotations/rec{i}.tsv")),
            domain: format!("dom{:02}", i % 3),
            split: Split::ALL[i % 3],
        })
        .collect();
    let manifest = CorpusManifest::new("/corpus", entries).unwrap().to_tsv();
    let parsed = CorpusManifest::parse_str(&manifest, Path::new("/corpus/manifest.tsv"))
        .map_err(|e| e.to_string())?;
    ensure(parsed.to_tsv() == manifest, || "manifest round trip".into())?;

    let mut model = VadModel::<f32>::new(tiny_model_config(3, 0.05), 8).unwrap();
    model.set_lambda(0.3).unwrap();
    let ckpt = model.to_checkpoint().to_bytes();
    let restored = VadModel::<f32>::from_checkpoint(
        &Checkpoint::from_bytes(&ckpt).map_err(|e| e.to_string())?,
    )
    .map_err(|e| e.to_string())?;
    ensure(restored.to_checkpoint().to_bytes() == ckpt, || {
        "checkpoint round trip".into()
    })?;
    let same = model
        .params()
        .iter()
        .zip(restored.params().iter())
        .all(|((_, a), (_, b))| {
            a.data()
                .iter()
                .zip(b.data())
                .all(|(x, y)| x.to_bits() == y.to_bits())
        });
    ensure(same, || "checkpoint parameters differ".into())?;

    let cases = 2000;
    let outcome = catch_unwind(AssertUnwindSafe(|| {
        for _ in 0..cases {
            let _ = decode_wav(&mutate(&pcm, &mut r));
            let _ = decode_wav(&mutate(&float, &mut r));
            let text = String::from_utf8_lossy(&mutate(seg.as_bytes(), &mut r)).into_owned();
            let _ = parse_segments_str(&text, Path::new("rec.tsv"), "rec");
            let text = String::from_utf8_lossy(&mutate(manifest.as_bytes(), &mut r)).into_owned();
            let _ = CorpusManifest::parse_str(&text, Path::new("/corpus/manifest.tsv"));
            let _ = Checkpoint::<f32>::from_bytes(&mutate(&ckpt, &mut r));
        }
    }));
    ensure(outcome.is_ok(), || {
        "a parser panicked on mutated input".into()
    })?;
    Ok(format!(
        "round trips exact; {cases} mutations per format without a panic"
    ))
}

// 12

fn c12_determinism() -> Check {
    let start = Instant::now();
    let (out_a, files_a) = common::full_run("3");
    let (out_b, files_b) = common::full_run("3");
    ensure(out_a == out_b, || "stdout differs".into())?;
    let differing: Vec<_> = files_a
        .iter()
        .filter(|(p, h)| files_b.get(*p) != Some(h))
        .map(|(p, _)| p)
        .collect();
    ensure(
        files_a.len() == files_b.len() && differing.is_empty(),
        || format!("files differ: {differing:?}"),
    )?;
    Ok(format!(
        "{} commands, {} output files identical; {:.1}s",
        common::COMMANDS.len(),
        files_a.len(),
        start.elapsed().as_secs_f64()
    ))
}

fn main() {
    let desk = Desk::new();
    let criteria: Vec<(&str, Box<dyn FnOnce() -> Check + '_>)> = vec![
        ("gradient correctness", Box::new(c1_gradients)),
        ("gradient reversal", Box::new(c2_gradient_reversal)),
        ("loss oracles", Box::new(c3_loss_oracles)),
        ("metric identity", Box::new(c4_metric_identity)),
        ("metric oracle", Box::new(c5_metric_oracle)),
        ("inference equivalence", Box::new(c6_inference)),
        ("overfit fixture", Box::new(c7_overfit)),
        ("desk-scale pipeline", Box::new(|| c8_pipeline(&desk))),
        (
            "adversarial direction",
            Box::new(|| c9_adversarial_direction(&desk)),
        ),
        (
            "domain classification",
            Box::new(|| c10_domain_classification(&desk)),
        ),
        ("format robustness", Box::new(c11_formats)),
        ("determinism", Box::new(c12_determinism)),
    ];
    // e.g. ACCEPTANCE_ONLY=1,2,12 runs a subset
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        if only.as_ref().is_some_and(|o| !o.contains(&(i + 1))) {
            println!("criterion {:>2} SKIP {name}", i + 1);
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        match result {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("no criterion failed");
}
