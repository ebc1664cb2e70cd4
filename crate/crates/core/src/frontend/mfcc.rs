use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

pub use super::sinc::{hz_to_mel, mel_to_hz};
use super::{FeatureSequence, FrameGeometry, Waveform};
use crate::autograd::{Scalar, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MfccConfig {
    pub sample_rate: u32,
    /// Analysis window, seconds.
    pub window: f64,
    /// Hop, seconds.
    pub hop: f64,
    pub n_fft: usize,
    pub n_mels: usize,
    /// Cepstral coefficients kept after dropping c0.
    pub n_ceps: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate: 16000,
            window: 0.025,
            hop: 0.010,
            n_fft: 512,
            n_mels: 40,
            n_ceps: 19,
            log_floor: 1e-10,
        }
    }
}

impl MfccConfig {
    pub fn window_samples(&self) -> usize {
        (self.window * self.sample_rate as f64).round() as usize
    }

    pub fn hop_samples(&self) -> usize {
        (self.hop * self.sample_rate as f64).round() as usize
    }

    /// Coefficients per frame: cepstra plus log-energy.
    pub fn dim(&self) -> usize {
        self.n_ceps + 1
    }

    pub fn geometry(&self, chunk_samples: usize) -> Result<FrameGeometry> {
        FrameGeometry::from_layers(
            chunk_samples,
            self.sample_rate,
            &[(self.window_samples(), self.hop_samples())],
        )
    }
}

/// Precomputed window, mel filterbank and DCT matrix.
pub struct MfccExtractor {
    cfg: MfccConfig,
    window: Vec<f64>,
    /// `n_mels × (n_fft/2 + 1)` triangular weights with unit peaks.
    filterbank: Vec<Vec<f64>>,
    /// Band edges `(lower, center, upper)` in Hz.
    bands: Vec<(f64, f64, f64)>,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MfccExtractor {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        let win = cfg.window_samples();
        if win == 0 || cfg.hop_samples() == 0 || cfg.n_fft < win {
            return Err(Error::Parameter(format!("invalid MFCC framing: {cfg:?}")));
        }
        if cfg.n_ceps + 1 > cfg.n_mels {
            return Err(Error::Parameter(
                "more cepstra requested than mel bands".into(),
            ));
        }
        let window = (0..win)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (win - 1) as f64).cos())
            .collect();
        let fs = cfg.sample_rate as f64;
        let bins = cfg.n_fft / 2 + 1;
        let (lo, hi) = (hz_to_mel(0.0), hz_to_mel(fs / 2.0));
        let points: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let bands: Vec<(f64, f64, f64)> = points.windows(3).map(|w| (w[0], w[1], w[2])).collect();
        let filterbank = bands
            .iter()
            .map(|&(l, c, u)| {
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * fs / cfg.n_fft as f64;
                        if f <= l || f >= u {
                            0.0
                        } else if f <= c {
                            (f - l) / (c - l)
                        } else {
                            (u - f) / (u - c)
                        }
                    })
                    .collect()
            })
            .collect();
        let m = cfg.n_mels as f64;
        let dct = (0..cfg.n_mels)
            .map(|k| {
                let scale = if k == 0 {
                    (1.0 / m).sqrt()
                } else {
                    (2.0 / m).sqrt()
                };
                (0..cfg.n_mels)
                    .map(|n| scale * (PI * k as f64 * (n as f64 + 0.5) / m).cos())
                    .collect()
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft);
        Ok(MfccExtractor {
            cfg,
            window,
            filterbank,
            bands,
            dct,
            fft,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    pub fn bands(&self) -> &[(f64, f64, f64)] {
        &self.bands
    }

    fn frames(&self, w: &Waveform) -> Result<usize> {
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(Error::Validation(format!(
                "sample rate {} does not match MFCC rate {}",
                w.sample_rate(),
                self.cfg.sample_rate
            )));
        }
        Ok(self.cfg.geometry(w.len())?.frames)
    }

    /// Per frame: power spectrum of the windowed frame and its raw energy.
    fn power_frames(&self, w: &Waveform) -> Result<Vec<(Vec<f64>, f64)>> {
        let frames = self.frames(w)?;
        let (win, hop) = (self.cfg.window_samples(), self.cfg.hop_samples());
        let bins = self.cfg.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.n_fft];
        let mut out = Vec::with_capacity(frames);
        for t in 0..frames {
            let seg = &w.samples()[t * hop..t * hop + win];
            let energy = seg.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>();
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, (&s, &h)) in seg.iter().zip(&self.window).enumerate() {
                buf[i].re = s as f64 * h;
            }
            self.fft.process(&mut buf);
            out.push((buf[..bins].iter().map(|c| c.norm_sqr()).collect(), energy));
        }
        Ok(out)
    }

    /// Log mel-band energies per frame (`T × n_mels`).
    pub fn log_mel_energies(&self, w: &Waveform) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .power_frames(w)?
            .into_iter()
            .map(|(p, _)| self.log_mel(&p))
            .collect())
    }

    fn log_mel(&self, power: &[f64]) -> Vec<f64> {
        self.filterbank
            .iter()
            .map(|tri| {
                tri.iter()
                    .zip(power)
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
                    .max(self.cfg.log_floor)
                    .ln()
            })
            .collect()
    }

    /// `[T × (n_ceps + 1)]`: cepstra c1..c_n followed by frame log-energy.
    pub fn extract<S: Scalar>(&self, w: &Waveform) -> Result<FeatureSequence<S>> {
        let geom = self.cfg.geometry(w.len())?;
        let frames = self.power_frames(w)?;
        let dim = self.cfg.dim();
        let mut data = Vec::with_capacity(frames.len() * dim);
        for (power, energy) in &frames {
            let logmel = self.log_mel(power);
            for row in &self.dct[1..=self.cfg.n_ceps] {
                data.push(S::lit(
                    row.iter().zip(&logmel).map(|(a, b)| a * b).sum::<f64>(),
                ));
            }
            data.push(S::lit(energy.max(self.cfg.log_floor).ln()));
        }
        Ok(FeatureSequence {
            frames: Tensor::new(vec![frames.len(), dim], data)?,
            frame_period: geom.frame_period,
            origin: geom.origin,
        })
    }
}

/// MFCC features with the default recipe.
pub fn mfcc<S: Scalar>(w: &Waveform) -> Result<FeatureSequence<S>> {
    MfccExtractor::new(MfccConfig {
        sample_rate: w.sample_rate(),
        ..MfccConfig::default()
    })?
    .extract(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_second_chunk_has_198_frames() {
        let f = mfcc::<f64>(&Waveform::silence(32000, 16000)).unwrap();
        assert_eq!((f.len(), f.dim()), (198, 20));
        assert!((f.frame_period - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_signal_hits_the_floor() {
        let f = mfcc::<f64>(&Waveform::silence(16000, 16000)).unwrap();
        let floor = 1e-10f64.ln();
        for row in f.frames.data().chunks(20) {
            assert!(row[..19].iter().all(|c| c.abs() < 1e-9), "{row:?}");
            assert_eq!(row[19], floor);
        }
    }

    #[test]
    fn pure_tone_peaks_in_its_band() {
        let ex = MfccExtractor::new(MfccConfig::default()).unwrap();
        let tone: Vec<f32> = (0..16000)
            .map(|i| (2.0 * PI * 1000.0 * i as f64 / 16000.0).sin() as f32 * 0.5)
            .collect();
        let mel = ex
            .log_mel_energies(&Waveform::new(tone, 16000).unwrap())
            .unwrap();
        let row = &mel[10];
        let argmax = (0..row.len())
            .max_by(|&a, &b| row[a].total_cmp(&row[b]))
            .unwrap();
        let (l, _, u) = ex.bands()[argmax];
        assert!(l < 1000.0 && 1000.0 < u, "band {argmax}: {l}..{u}");
        let weight = |b: usize| {
            let (l, c, u) = ex.bands()[b];
            if 1000.0 <= c {
                (1000.0 - l) / (c - l)
            } else {
                (u - 1000.0) / (u - c)
            }
        };
        let containing: Vec<usize> = (0..ex.bands().len())
            .filter(|&b| ex.bands()[b].0 < 1000.0 && 1000.0 < ex.bands()[b].2)
            .collect();
        let expected = *containing
            .iter()
            .max_by(|&&a, &&b| weight(a).total_cmp(&weight(b)))
            .unwrap();
        assert_eq!(argmax, expected);
    }

    #[test]
    fn deterministic_bytes() {
        let x: Vec<f32> = (0..8000)
            .map(|i| ((i * 7919 % 1000) as f32 / 500.0 - 1.0) * 0.3)
            .collect();
        let w = Waveform::new(x, 16000).unwrap();
        let a = mfcc::<f32>(&w).unwrap();
        let b = mfcc::<f32>(&w).unwrap();
        let bits = |f: &FeatureSequence<f32>| {
            f.frames
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>()
        };
        assert_eq!(bits(&a), bits(&b));
    }
}
