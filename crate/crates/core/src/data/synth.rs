//! Synthetic multi-domain corpus: source-filter "speech" bursts mixed with
//! domain-specific noise and passed through a domain-specific channel.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::manifest::{CorpusManifest, ManifestEntry, Split};
use super::segments::write_segments;
use super::wav::{write_wav, SampleFormat};
use crate::error::{Error, Result};
use crate::frontend::Waveform;
use crate::timeline::Timeline;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_domains: usize,
    pub train_files: usize,
    pub dev_files: usize,
    pub test_files: usize,
    /// Seconds per file.
    pub file_duration: f64,
    pub speech_fraction: f64,
    pub sample_rate: u32,
    pub noise_bank_files: usize,
    pub noise_bank_duration: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_domains: 11,
            train_files: 6,
            dev_files: 3,
            test_files: 3,
            file_duration: 60.0,
            speech_fraction: 0.5,
            sample_rate: 16000,
            noise_bank_files: 10,
            noise_bank_duration: 20.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synth: {m}")));
        if self.n_domains == 0 || self.n_domains > 100 {
            return bad("n_domains must be in 1..=100");
        }
        if !(self.file_duration.is_finite() && self.file_duration >= 1.0) {
            return bad("file_duration must be at least 1 s");
        }
        if !(self.speech_fraction > 0.05 && self.speech_fraction < 0.95) {
            return bad("speech_fraction must be in (0.05, 0.95)");
        }
        if self.sample_rate < 8000 {
            return bad("sample_rate must be at least 8000 Hz");
        }
        if self.noise_bank_files > 0
            && !(self.noise_bank_duration.is_finite() && self.noise_bank_duration >= 1.0)
        {
            return bad("noise_bank_duration must be at least 1 s");
        }
        Ok(())
    }

    pub fn files_in(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_files,
            Split::Dev => self.dev_files,
            Split::Test => self.test_files,
        }
    }
}

pub fn domain_name(k: usize) -> String {
    format!("dom{k:02}")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseTexture {
    White,
    Pink,
    Hum,
    Babble,
    Clicks,
}

impl NoiseTexture {
    pub const ALL: [NoiseTexture; 5] = [
        NoiseTexture::White,
        NoiseTexture::Pink,
        NoiseTexture::Hum,
        NoiseTexture::Babble,
        NoiseTexture::Clicks,
    ];
}

/// Acoustic signature of one domain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DomainSignature {
    /// Center of the channel pass band in Hz.
    pub channel_center: f64,
    pub channel_q: f64,
    pub texture: NoiseTexture,
    pub snr_db: f64,
}

const CHANNEL_DRY: f64 = 0.03;

pub fn domain_signature(k: usize, n_domains: usize, sample_rate: u32) -> DomainSignature {
    let lo: f64 = 250.0;
    let hi = (0.38 * sample_rate as f64).min(6000.0);
    let pos = if n_domains > 1 {
        k as f64 / (n_domains - 1) as f64
    } else {
        0.5
    };
    let steps = n_domains.max(2) as f64 - 1.0;
    DomainSignature {
        channel_center: lo * (hi / lo).powf(pos),
        channel_q: 2.5,
        texture: NoiseTexture::ALL[k % NoiseTexture::ALL.len()],
        snr_db: 8.0 + 10.0 * ((k * 7) % n_domains.max(1)) as f64 / steps,
    }
}

/// Direct form I biquad with RBJ band-pass (0 dB peak) coefficients.
#[derive(Clone, Debug)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
}

impl Biquad {
    fn band_pass(center: f64, q: f64, sample_rate: f64) -> Self {
        let center = center.clamp(20.0, 0.45 * sample_rate);
        let w0 = 2.0 * PI * center / sample_rate;
        let alpha = w0.sin() / (2.0 * q);
        let a0 = 1.0 + alpha;
        Biquad {
            b: [alpha / a0, 0.0, -alpha / a0],
            a: [-2.0 * w0.cos() / a0, (1.0 - alpha) / a0],
            x: [0.0; 2],
            y: [0.0; 2],
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.b[1] * self.x[0] + self.b[2] * self.x[1]
            - self.a[0] * self.y[0]
            - self.a[1] * self.y[1];
        self.x = [x, self.x[0]];
        self.y = [y, self.y[0]];
        y
    }
}

fn gaussian(rng: &mut impl Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

fn stream_rng(seed: u64, key: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ fnv1a(key))
}

/// Alternating pause/utterance layout with the exact requested speech
/// fraction, boundaries rounded to samples.
fn speech_layout(
    len: usize,
    sample_rate: u32,
    fraction: f64,
    rng: &mut impl Rng,
) -> Vec<(usize, usize)> {
    let duration = len as f64;
    let seconds = duration / sample_rate as f64;
    let mut pauses = Vec::new();
    let mut utts = Vec::new();
    let mut total = 0.0;
    while total < seconds {
        let p = rng.random_range(0.5..2.5);
        let u = rng.random_range(1.0..4.0);
        pauses.push(p);
        utts.push(u);
        total += p + u;
    }
    let (sp, su): (f64, f64) = (pauses.iter().sum(), utts.iter().sum());
    let (gp, gu) = ((1.0 - fraction) * duration / sp, fraction * duration / su);
    let mut t = 0.0;
    let mut regions = Vec::new();
    for (p, u) in pauses.iter().zip(&utts) {
        t += p * gp;
        let start = t.round() as usize;
        t += u * gu;
        let end = (t.round() as usize).min(len);
        if end > start {
            regions.push((start, end));
        }
    }
    regions
}

fn render_utterance(out: &mut [f64], sample_rate: f64, rng: &mut impl Rng) {
    let level = 10f64.powf(rng.random_range(-6.0..6.0) / 20.0);
    let f0_base = rng.random_range(90.0..300.0);
    let ramp = (0.01 * sample_rate) as usize;
    let mut pos = 0;
    while pos < out.len() {
        let syl = ((rng.random_range(0.08..0.30) * sample_rate) as usize).min(out.len() - pos);
        let unvoiced = rng.random_bool(0.15);
        let f0_a = f0_base * rng.random_range(0.85..1.15);
        let f0_b = f0_a * rng.random_range(0.9..1.1);
        let formants = [
            (rng.random_range(300.0..850.0), 1.0),
            (rng.random_range(850.0..2300.0), 0.6),
            (rng.random_range(2300.0..3200.0), 0.3),
        ];
        let mut filters: Vec<(Biquad, f64)> = if unvoiced {
            vec![(
                Biquad::band_pass(rng.random_range(3000.0..5500.0), 2.0, sample_rate),
                0.5,
            )]
        } else {
            formants
                .iter()
                .map(|&(f, g)| (Biquad::band_pass(f, 5.0, sample_rate), g))
                .collect()
        };
        let mut phase = rng.random_range(0.0..1.0);
        for i in 0..syl {
            let frac = i as f64 / syl as f64;
            let src = if unvoiced {
                gaussian(rng) * 0.3
            } else {
                phase += (f0_a + (f0_b - f0_a) * frac) / sample_rate;
                phase -= phase.floor();
                2.0 * phase - 1.0
            };
            let y: f64 = filters.iter_mut().map(|(f, g)| *g * f.step(src)).sum();
            let env = (i.min(syl - 1 - i) as f64 / ramp as f64).min(1.0).max(0.05);
            out[pos + i] = level * env * y;
        }
        pos += syl;
        // short intra-utterance gap, still labeled speech
        pos += ((rng.random_range(0.02..0.08) * sample_rate) as usize).min(out.len() - pos);
    }
}

/// Unit-power noise of the given texture.
pub fn render_noise(
    texture: NoiseTexture,
    len: usize,
    sample_rate: u32,
    rng: &mut impl Rng,
) -> Vec<f64> {
    let sr = sample_rate as f64;
    let mut out: Vec<f64> = match texture {
        NoiseTexture::White => (0..len).map(|_| gaussian(rng)).collect(),
        NoiseTexture::Pink => {
            let mut b = [0.0f64; 3];
            (0..len)
                .map(|_| {
                    let w = gaussian(rng);
                    b[0] = 0.99765 * b[0] + w * 0.0990460;
                    b[1] = 0.96300 * b[1] + w * 0.2965164;
                    b[2] = 0.57000 * b[2] + w * 1.0526913;
                    b[0] + b[1] + b[2] + w * 0.1848
                })
                .collect()
        }
        NoiseTexture::Hum => {
            let base = 50.0 * rng.random_range(0.98..1.02);
            let partials: Vec<(f64, f64, f64)> = (1..=8)
                .map(|h| {
                    (
                        base * h as f64,
                        1.0 / h as f64,
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    let hum: f64 = partials
                        .iter()
                        .map(|&(f, a, ph)| a * (2.0 * PI * f * t + ph).sin())
                        .sum();
                    hum + 0.03 * gaussian(rng)
                })
                .collect()
        }
        NoiseTexture::Babble => {
            let mut voices: Vec<(Biquad, f64, f64)> = (0..4)
                .map(|_| {
                    (
                        Biquad::band_pass(rng.random_range(400.0..1500.0), 1.0, sr),
                        rng.random_range(2.0..6.0),
                        rng.random_range(0.0..2.0 * PI),
                    )
                })
                .collect();
            (0..len)
                .map(|i| {
                    let t = i as f64 / sr;
                    voices
                        .iter_mut()
                        .map(|(f, rate, ph)| {
                            f.step(gaussian(rng)) * 0.5 * (1.0 + (2.0 * PI * *rate * t + *ph).sin())
                        })
                        .sum()
                })
                .collect()
        }
        NoiseTexture::Clicks => {
            let decay = (-1.0 / (0.002 * sr)).exp();
            let p = 15.0 / sr;
            let mut env = 0.0;
            (0..len)
                .map(|_| {
                    if rng.random_bool(p) {
                        env = rng.random_range(0.5..1.0)
                            * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    }
                    let v = env * gaussian(rng) + 0.02 * gaussian(rng);
                    env *= decay;
                    v
                })
                .collect()
        }
    };
    let p = out.iter().map(|v| v * v).sum::<f64>() / len.max(1) as f64;
    if p > 0.0 {
        let g = p.sqrt().recip();
        out.iter_mut().for_each(|v| *v *= g);
    }
    out
}

fn to_waveform(mut x: Vec<f64>, sample_rate: u32, target_rms: f64) -> Waveform {
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt();
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut g = if rms > 0.0 { target_rms / rms } else { 1.0 };
    if peak * g > 0.99 {
        g = 0.99 / peak;
    }
    x.iter_mut().for_each(|v| *v *= g);
    Waveform::new_unchecked(x.into_iter().map(|v| v as f32).collect(), sample_rate)
}

/// One recording of domain `k` and its exact speech timeline.
pub fn synthesize_file(spec: &SynthSpec, k: usize, uri: &str) -> (Waveform, Timeline) {
    let sr = spec.sample_rate;
    let len = (spec.file_duration * sr as f64).round() as usize;
    let sig = domain_signature(k, spec.n_domains, sr);
    let mut rng = stream_rng(spec.seed, uri);
    let layout = speech_layout(len, sr, spec.speech_fraction, &mut rng);
    let mut speech = vec![0.0; len];
    for &(s, e) in &layout {
        render_utterance(&mut speech[s..e], sr as f64, &mut rng);
    }
    let active: usize = layout.iter().map(|(s, e)| e - s).sum();
    let speech_power = speech.iter().map(|v| v * v).sum::<f64>() / active.max(1) as f64;
    let noise = render_noise(sig.texture, len, sr, &mut rng);
    let gain = (speech_power / 10f64.powf(sig.snr_db / 10.0)).sqrt();
    let mut channel = Biquad::band_pass(sig.channel_center, sig.channel_q, sr as f64);
    let mixed: Vec<f64> = speech
        .iter()
        .zip(&noise)
        .map(|(s, n)| {
            let x = s + gain * n;
            CHANNEL_DRY * x + channel.step(x)
        })
        .collect();
    let regions = layout
        .iter()
        .map(|&(s, e)| (s as f64 / sr as f64, e as f64 / sr as f64))
        .collect();
    let timeline = Timeline::new(regions).expect("generator regions are ordered and non-empty");
    (to_waveform(mixed, sr, 0.1), timeline)
}

fn noise_bank_file(spec: &SynthSpec, i: usize) -> Waveform {
    let len = (spec.noise_bank_duration * spec.sample_rate as f64).round() as usize;
    let mut rng = stream_rng(spec.seed, &format!("noise_{i:02}"));
    let texture = NoiseTexture::ALL[i % NoiseTexture::ALL.len()];
    to_waveform(
        render_noise(texture, len, spec.sample_rate, &mut rng),
        spec.sample_rate,
        0.1,
    )
}

pub const NOISE_DIR: &str = "noise";
pub const MANIFEST_NAME: &str = "manifest.tsv";

struct Job {
    k: usize,
    uri: String,
    split: Split,
}

fn parallel_map<T: Sync, R: Send>(items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let workers = std::thread::available_parallelism()
        .map_or(1, |n| n.get())
        .min(items.len().max(1));
    let chunk = items.len().div_ceil(workers).max(1);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<R>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("generator worker panicked"))
            .collect()
    })
}

/// Writes `audio/`, `annotations/`, `noise/` and `manifest.tsv` under
/// `out_dir`. Output bytes depend only on `spec`.
pub fn generate_synthetic_corpus(spec: &SynthSpec, out_dir: &Path) -> Result<CorpusManifest> {
    spec.validate()?;
    for sub in ["audio", "annotations", NOISE_DIR] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut jobs = Vec::new();
    for k in 0..spec.n_domains {
        for split in Split::ALL {
            for i in 0..spec.files_in(split) {
                jobs.push(Job {
                    k,
                    uri: format!("{}_{split}_{i:02}", domain_name(k)),
                    split,
                });
            }
        }
    }
    let results = parallel_map(&jobs, |job| -> Result<ManifestEntry> {
        let (audio, timeline) = synthesize_file(spec, job.k, &job.uri);
        let audio_rel = PathBuf::from("audio").join(format!("{}.wav", job.uri));
        let ann_rel = PathBuf::from("annotations").join(format!("{}.tsv", job.uri));
        write_wav(&out_dir.join(&audio_rel), &audio, SampleFormat::Pcm16)?;
        write_segments(&out_dir.join(&ann_rel), &job.uri, &timeline)?;
        Ok(ManifestEntry {
            uri: job.uri.clone(),
            audio: audio_rel,
            annotation: ann_rel,
            domain: domain_name(job.k),
            split: job.split,
        })
    });
    let entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    let bank: Vec<usize> = (0..spec.noise_bank_files).collect();
    parallel_map(&bank, |&i| {
        let p = out_dir.join(NOISE_DIR).join(format!("noise_{i:02}.wav"));
        write_wav(&p, &noise_bank_file(spec, i), SampleFormat::Pcm16)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let manifest = CorpusManifest::new(out_dir, entries)?;
    manifest.write(&out_dir.join(MANIFEST_NAME))?;
    Ok(manifest)
}
