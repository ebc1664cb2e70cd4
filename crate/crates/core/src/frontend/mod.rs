//! Feature extractors turning a fixed-length waveform chunk into a frame
//! sequence: the trainable sinc filterbank stack and a fixed MFCC baseline.

mod mfcc;
mod sinc;
mod sincnet;

pub use mfcc::{hz_to_mel, mel_to_hz, mfcc, MfccConfig, MfccExtractor};
pub use sinc::{
    build_sinc_kernels, init_mel_cutoffs, realize_cutoffs, sinc_kernels_on_tape,
    windowed_sinc_bandpass, Cutoffs, SincFilterParams, MIN_BAND_HZ, MIN_LOW_HZ,
};
pub use sincnet::{SincNet, SincNetConfig};

use crate::autograd::{conv_out_len, Tensor};
use crate::error::{Error, Result};

/// Mono audio with normalized amplitude.
#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    samples: Vec<f32>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::Parameter("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Validation(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    /// Caller guarantees a positive rate and finite samples.
    pub(crate) fn new_unchecked(samples: Vec<f32>, sample_rate: u32) -> Self {
        Waveform {
            samples,
            sample_rate,
        }
    }

    pub fn silence(len: usize, sample_rate: u32) -> Self {
        Waveform {
            samples: vec![0.0; len],
            sample_rate,
        }
    }

    pub fn samples(&self) -> &[f32] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [f32] {
        &mut self.samples
    }

    pub fn into_samples(self) -> Vec<f32> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// `len` samples starting at `start`, zero-padded past the end.
    pub fn segment(&self, start: usize, len: usize) -> Waveform {
        let mut out = vec![0.0; len];
        if start < self.samples.len() {
            let n = len.min(self.samples.len() - start);
            out[..n].copy_from_slice(&self.samples[start..start + n]);
        }
        Waveform {
            samples: out,
            sample_rate: self.sample_rate,
        }
    }
}

/// Mapping between frame indices and time within a chunk.
///
/// Frame `t` is centered at `origin + t·frame_period` seconds and covers
/// half a period on either side.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FrameGeometry {
    pub frame_period: f64,
    pub origin: f64,
    pub frames: usize,
}

impl FrameGeometry {
    /// Derives frame count, hop and receptive-field center from a stack of
    /// `(kernel, stride)` layers applied to `samples` input samples.
    pub fn from_layers(
        samples: usize,
        sample_rate: u32,
        layers: &[(usize, usize)],
    ) -> Result<Self> {
        let mut len = samples;
        let mut receptive = 1usize;
        let mut jump = 1usize;
        for &(k, s) in layers {
            len = conv_out_len(len, k, s).ok_or_else(|| {
                Error::InvalidLength(format!(
                    "{samples} samples is shorter than the front-end receptive field"
                ))
            })?;
            receptive += (k - 1) * jump;
            jump *= s;
        }
        let fs = sample_rate as f64;
        Ok(FrameGeometry {
            frame_period: jump as f64 / fs,
            origin: (receptive - 1) as f64 / 2.0 / fs,
            frames: len,
        })
    }

    pub fn center(&self, t: usize) -> f64 {
        self.origin + t as f64 * self.frame_period
    }

    pub fn span(&self, t: usize) -> (f64, f64) {
        let c = self.center(t);
        (c - self.frame_period / 2.0, c + self.frame_period / 2.0)
    }

    /// Index of the frame whose center is nearest to `time` (clamped).
    pub fn nearest_frame(&self, time: f64) -> usize {
        let t = ((time - self.origin) / self.frame_period).round();
        t.clamp(0.0, (self.frames - 1) as f64) as usize
    }
}

/// Frame sequence `[T × D]` with its time mapping.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence<S> {
    pub frames: Tensor<S>,
    pub frame_period: f64,
    pub origin: f64,
}

impl<S: crate::autograd::Scalar> FeatureSequence<S> {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.frames.shape()[1]
    }
}
