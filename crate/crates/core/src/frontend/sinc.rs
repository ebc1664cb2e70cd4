use std::f64::consts::PI;

use crate::autograd::{CustomBackward, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Lowest realizable low cutoff.
pub const MIN_LOW_HZ: f64 = 30.0;
/// Narrowest realizable band.
pub const MIN_BAND_HZ: f64 = 50.0;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Band edges at mel-uniform points between 30 Hz and Nyquist.
pub fn init_mel_cutoffs(filter_count: usize, sample_rate: u32) -> Result<Vec<(f64, f64)>> {
    let nyquist = sample_rate as f64 / 2.0;
    if filter_count == 0 {
        return Err(Error::Parameter("filter_count must be at least 1".into()));
    }
    if nyquist <= MIN_LOW_HZ + MIN_BAND_HZ {
        return Err(Error::Parameter(format!(
            "sample rate {sample_rate} too low for sinc filters"
        )));
    }
    let resolvable = ((nyquist - MIN_LOW_HZ) / MIN_BAND_HZ).floor() as usize;
    if filter_count > resolvable {
        return Err(Error::Parameter(format!(
            "{filter_count} filters exceed the {resolvable} minimum-width bands that fit below Nyquist"
        )));
    }
    let lo = hz_to_mel(MIN_LOW_HZ);
    let hi = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..=filter_count)
        .map(|i| {
            if i == 0 {
                MIN_LOW_HZ
            } else if i == filter_count {
                nyquist
            } else {
                mel_to_hz(lo + (hi - lo) * i as f64 / filter_count as f64)
            }
        })
        .collect();
    Ok(edges.windows(2).map(|w| (w[0], w[1])).collect())
}

/// Realized cutoffs and their derivatives with respect to the raw parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cutoffs {
    pub f1: f64,
    pub f2: f64,
    pub df1_dlow: f64,
    pub df2_dlow: f64,
    pub df2_dband: f64,
}

/// `f1 = 30 + |u_low|`, `f2 = f1 + 50 + |u_band|`, clipped so that
/// `0 < f1 < f2 ≤ Nyquist` for any raw values.
pub fn realize_cutoffs(u_low: f64, u_band: f64, sample_rate: u32) -> Cutoffs {
    let nyquist = sample_rate as f64 / 2.0;
    let raw_f1 = MIN_LOW_HZ + u_low.abs();
    let (f1, df1) = if raw_f1 > nyquist - MIN_BAND_HZ {
        (nyquist - MIN_BAND_HZ, 0.0)
    } else {
        (raw_f1, u_low.signum())
    };
    let raw_f2 = f1 + MIN_BAND_HZ + u_band.abs();
    let (f2, df2_dlow, df2_dband) = if raw_f2 > nyquist {
        (nyquist, 0.0, 0.0)
    } else {
        (raw_f2, df1, u_band.signum())
    };
    Cutoffs {
        f1,
        f2,
        df1_dlow: df1,
        df2_dlow,
        df2_dband,
    }
}

/// Raw parameters of a bank of band-pass sinc filters.
#[derive(Clone, Debug, PartialEq)]
pub struct SincFilterParams {
    pub u_low: Vec<f64>,
    pub u_band: Vec<f64>,
    pub kernel_length: usize,
    pub sample_rate: u32,
}

impl SincFilterParams {
    /// Raw parameters reproducing the mel initialization (bands narrower
    /// than the floor are widened to it).
    pub fn mel_init(filter_count: usize, kernel_length: usize, sample_rate: u32) -> Result<Self> {
        let bands = init_mel_cutoffs(filter_count, sample_rate)?;
        Ok(SincFilterParams {
            u_low: bands.iter().map(|&(f1, _)| f1 - MIN_LOW_HZ).collect(),
            u_band: bands
                .iter()
                .map(|&(f1, f2)| (f2 - f1 - MIN_BAND_HZ).max(0.0))
                .collect(),
            kernel_length,
            sample_rate,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel_length % 2 == 0 || self.kernel_length < 3 {
            return Err(Error::Parameter(format!(
                "kernel length must be odd and ≥ 3, got {}",
                self.kernel_length
            )));
        }
        if self.u_low.len() != self.u_band.len() || self.u_low.is_empty() {
            return Err(Error::Parameter(
                "u_low and u_band must be non-empty and equal length".into(),
            ));
        }
        if (self.sample_rate as f64) / 2.0 <= MIN_LOW_HZ + MIN_BAND_HZ {
            return Err(Error::Parameter(format!(
                "sample rate {} too low for sinc filters",
                self.sample_rate
            )));
        }
        Ok(())
    }

    pub fn filter_count(&self) -> usize {
        self.u_low.len()
    }
}

/// Hamming window value at offset `n` from the center of a length-`2m+1` window.
fn hamming_centered(n: usize, m: usize) -> f64 {
    0.54 + 0.46 * (PI * n as f64 / m as f64).cos()
}

/// Hamming-windowed band-pass sinc kernel for cutoffs in Hz. Built from the
/// non-negative half and mirrored, so it is exactly symmetric.
pub fn windowed_sinc_bandpass(
    f1: f64,
    f2: f64,
    sample_rate: u32,
    kernel_length: usize,
) -> Vec<f64> {
    let (k, _, _) = kernel_and_jacobian(f1, f2, sample_rate, kernel_length);
    k
}

/// Kernel plus `∂g/∂f1` and `∂g/∂f2` (per Hz) at every tap.
fn kernel_and_jacobian(
    f1: f64,
    f2: f64,
    sample_rate: u32,
    kernel_length: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let fs = sample_rate as f64;
    let m = kernel_length / 2;
    let (a, b) = (f1 / fs, f2 / fs);
    let mut half = Vec::with_capacity(m + 1);
    for n in 0..=m {
        let w = hamming_centered(n, m);
        let (g, d1, d2) = if n == 0 {
            (2.0 * (b - a), -2.0, 2.0)
        } else {
            let x = n as f64;
            let g = ((2.0 * PI * b * x).sin() - (2.0 * PI * a * x).sin()) / (PI * x);
            (
                g,
                -2.0 * (2.0 * PI * a * x).cos(),
                2.0 * (2.0 * PI * b * x).cos(),
            )
        };
        half.push((g * w, d1 * w / fs, d2 * w / fs));
    }
    let mut k = Vec::with_capacity(kernel_length);
    let mut j1 = Vec::with_capacity(kernel_length);
    let mut j2 = Vec::with_capacity(kernel_length);
    for i in 0..kernel_length {
        let n = i.abs_diff(m);
        k.push(half[n].0);
        j1.push(half[n].1);
        j2.push(half[n].2);
    }
    (k, j1, j2)
}

/// Kernel bank `[F × 1 × K]` for the realized cutoffs of `params`.
pub fn build_sinc_kernels(params: &SincFilterParams) -> Result<Tensor<f64>> {
    params.validate()?;
    let mut data = Vec::with_capacity(params.filter_count() * params.kernel_length);
    for (&ul, &ub) in params.u_low.iter().zip(&params.u_band) {
        let c = realize_cutoffs(ul, ub, params.sample_rate);
        data.extend(windowed_sinc_bandpass(
            c.f1,
            c.f2,
            params.sample_rate,
            params.kernel_length,
        ));
    }
    Tensor::new(vec![params.filter_count(), 1, params.kernel_length], data)
}

struct SincKernelsBackward<S> {
    filters: usize,
    kernel_length: usize,
    d_low: Vec<S>,
    d_band: Vec<S>,
}

impl<S: Scalar> CustomBackward<S> for SincKernelsBackward<S> {
    fn backward(&self, grad_out: &[S], _inputs: &[&[S]], needs: &[bool]) -> Vec<Option<Vec<S>>> {
        let k = self.kernel_length;
        let reduce = |jac: &[S]| -> Vec<S> {
            (0..self.filters)
                .map(|f| {
                    grad_out[f * k..(f + 1) * k]
                        .iter()
                        .zip(&jac[f * k..(f + 1) * k])
                        .map(|(&g, &j)| g * j)
                        .sum()
                })
                .collect()
        };
        vec![
            needs[0].then(|| reduce(&self.d_low)),
            needs[1].then(|| reduce(&self.d_band)),
        ]
    }
}

/// Records the kernel construction on the tape, differentiable with
/// respect to the raw `u_low` and `u_band` vectors.
pub fn sinc_kernels_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    u_low: Var,
    u_band: Var,
    kernel_length: usize,
    sample_rate: u32,
) -> Result<Var> {
    let filters = tape.shape(u_low).iter().product::<usize>();
    if tape.shape(u_low) != [filters] || tape.shape(u_band) != [filters] {
        return Err(Error::Dimension {
            op: "sinc_kernels",
            lhs: tape.shape(u_low).to_vec(),
            rhs: tape.shape(u_band).to_vec(),
        });
    }
    let params = SincFilterParams {
        u_low: tape
            .value(u_low)
            .iter()
            .map(|v| v.to_f64_lossless())
            .collect(),
        u_band: tape
            .value(u_band)
            .iter()
            .map(|v| v.to_f64_lossless())
            .collect(),
        kernel_length,
        sample_rate,
    };
    params.validate()?;
    let mut value = Vec::with_capacity(filters * kernel_length);
    let mut d_low = Vec::with_capacity(filters * kernel_length);
    let mut d_band = Vec::with_capacity(filters * kernel_length);
    for f in 0..filters {
        let c = realize_cutoffs(params.u_low[f], params.u_band[f], sample_rate);
        let (k, j1, j2) = kernel_and_jacobian(c.f1, c.f2, sample_rate, kernel_length);
        for i in 0..kernel_length {
            value.push(S::lit(k[i]));
            d_low.push(S::lit(j1[i] * c.df1_dlow + j2[i] * c.df2_dlow));
            d_band.push(S::lit(j2[i] * c.df2_dband));
        }
    }
    let rule = SincKernelsBackward {
        filters,
        kernel_length,
        d_low,
        d_band,
    };
    tape.custom(
        &[u_low, u_band],
        vec![filters, 1, kernel_length],
        value,
        Box::new(rule),
    )
}
