use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;

use crate::error::{Error, Result};
use crate::frontend::{FrameGeometry, Waveform};
use crate::timeline::Timeline;

/// An annotated recording held in memory.
#[derive(Clone, Debug)]
pub struct TrainingFile {
    pub uri: String,
    pub audio: Waveform,
    pub speech: Timeline,
    pub domain: usize,
}

impl TrainingFile {
    pub fn duration(&self) -> f64 {
        self.audio.duration()
    }
}

/// Fixed-length excerpt with per-frame labels.
#[derive(Clone, Debug)]
pub struct TrainingChunk {
    pub waveform: Waveform,
    /// One label per frame: 1 for speech.
    pub labels: Vec<u8>,
    pub domain: usize,
    pub source_uri: String,
    pub source_offset: f64,
}

/// Draws `n` chunks of `chunk_samples` samples. Files are picked with
/// probability proportional to their duration and offsets uniformly among
/// all sample positions that keep the chunk inside the file.
pub fn sample_subsequences(
    files: &[TrainingFile],
    geometry: &FrameGeometry,
    chunk_samples: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<TrainingChunk>> {
    let eligible: Vec<&TrainingFile> = files
        .iter()
        .filter(|f| f.audio.len() >= chunk_samples)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Corpus(format!(
            "no training file holds a full chunk of {chunk_samples} samples"
        )));
    }
    let weights = WeightedIndex::new(eligible.iter().map(|f| f.audio.len() as f64))
        .map_err(|e| Error::Corpus(format!("file weights: {e}")))?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let file = eligible[weights.sample(rng)];
        let start = rng.random_range(0..=file.audio.len() - chunk_samples);
        let offset = start as f64 / file.audio.sample_rate() as f64;
        out.push(TrainingChunk {
            waveform: file.audio.segment(start, chunk_samples),
            labels: file.speech.frame_labels(geometry, offset),
            domain: file.domain,
            source_uri: file.uri.clone(),
            source_offset: offset,
        });
    }
    Ok(out)
}

fn power(x: &[f32]) -> f64 {
    x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len().max(1) as f64
}

/// Noise gain giving the requested signal-to-noise ratio.
pub fn snr_gain(signal_power: f64, noise_power: f64, snr_db: f64) -> f64 {
    (signal_power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt()
}

/// `signal + g·noise` at the requested SNR, clipped to `[−1, 1]`. `noise`
/// must be at least as long as `signal`; its leading part is used. Returns
/// `None` when either input has zero power.
pub fn mix_at_snr(signal: &[f32], noise: &[f32], snr_db: f64) -> Option<Vec<f32>> {
    let noise = &noise[..signal.len()];
    let (ps, pn) = (power(signal), power(noise));
    if ps == 0.0 || pn == 0.0 {
        return None;
    }
    let g = snr_gain(ps, pn, snr_db);
    Some(
        signal
            .iter()
            .zip(noise)
            .map(|(&s, &v)| (s as f64 + g * v as f64).clamp(-1.0, 1.0) as f32)
            .collect(),
    )
}

/// Adds a random crop of `noise` to `w` at `snr_db`. Silent inputs are
/// returned unchanged.
pub fn augment_additive_noise(
    w: &Waveform,
    noise: &Waveform,
    snr_db: f64,
    rng: &mut impl Rng,
) -> Result<Waveform> {
    if noise.len() < w.len() {
        return Err(Error::InvalidLength(format!(
            "noise of {} samples cannot cover {} samples",
            noise.len(),
            w.len()
        )));
    }
    if noise.sample_rate() != w.sample_rate() {
        return Err(Error::Validation(
            "noise and signal sample rates differ".into(),
        ));
    }
    let start = rng.random_range(0..=noise.len() - w.len());
    match mix_at_snr(w.samples(), &noise.samples()[start..], snr_db) {
        Some(mixed) => Ok(Waveform::new_unchecked(mixed, w.sample_rate())),
        None => {
            log::debug!("skipping augmentation of a zero-power chunk");
            Ok(w.clone())
        }
    }
}
