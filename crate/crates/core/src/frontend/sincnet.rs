use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sinc::{sinc_kernels_on_tape, SincFilterParams};
use super::{FeatureSequence, FrameGeometry, Waveform};
use crate::autograd::{Bound, ParamId, ParamSet, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

const NORM_EPS: f64 = 1e-5;

/// Layer sizes of the sinc convolution stack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SincNetConfig {
    pub filters: usize,
    pub kernel_length: usize,
    pub stride: usize,
    pub conv_layers: usize,
    pub conv_channels: usize,
    pub conv_kernel: usize,
    pub pool: usize,
    pub leaky_slope: f64,
    pub sample_rate: u32,
}

impl Default for SincNetConfig {
    fn default() -> Self {
        SincNetConfig {
            filters: 80,
            kernel_length: 251,
            stride: 10,
            conv_layers: 2,
            conv_channels: 60,
            conv_kernel: 5,
            pool: 3,
            leaky_slope: 0.2,
            sample_rate: 16000,
        }
    }
}

impl SincNetConfig {
    pub fn output_dim(&self) -> usize {
        if self.conv_layers == 0 {
            self.filters
        } else {
            self.conv_channels
        }
    }

    /// `(kernel, stride)` of every length-changing layer, in order.
    pub fn layers(&self) -> Vec<(usize, usize)> {
        let mut l = vec![(self.kernel_length, self.stride), (self.pool, self.pool)];
        for _ in 0..self.conv_layers {
            l.push((self.conv_kernel, 1));
            l.push((self.pool, self.pool));
        }
        l
    }

    pub fn geometry(&self, chunk_samples: usize) -> Result<FrameGeometry> {
        FrameGeometry::from_layers(chunk_samples, self.sample_rate, &self.layers())
    }
}

/// Sinc convolution followed by standard convolutions, each block being
/// conv → max-pool → per-channel normalization over time → leaky ReLU.
#[derive(Clone, Debug)]
pub struct SincNet {
    cfg: SincNetConfig,
    u_low: ParamId,
    u_band: ParamId,
    convs: Vec<ParamId>,
    gains: Vec<ParamId>,
    offsets: Vec<ParamId>,
}

impl SincNet {
    /// Registers parameters under `prefix` and initializes them: mel-spaced
    /// cutoffs, `uniform(±1/√fan_in)` convolution weights, unit gains.
    pub fn new<S: Scalar>(
        cfg: SincNetConfig,
        prefix: &str,
        params: &mut ParamSet<S>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.stride == 0 || cfg.pool == 0 || cfg.conv_kernel == 0 {
            return Err(Error::Parameter(
                "strides, pool and kernel sizes must be positive".into(),
            ));
        }
        let init = SincFilterParams::mel_init(cfg.filters, cfg.kernel_length, cfg.sample_rate)?;
        init.validate()?;
        let u_low = params.add(
            format!("{prefix}sinc.u_low"),
            Tensor::from_f64(vec![cfg.filters], &init.u_low)?,
        );
        let u_band = params.add(
            format!("{prefix}sinc.u_band"),
            Tensor::from_f64(vec![cfg.filters], &init.u_band)?,
        );
        let mut convs = Vec::new();
        let mut gains = vec![params.add(
            format!("{prefix}norm0.gain"),
            Tensor::full(&[cfg.filters], S::one()),
        )];
        let mut offsets = vec![params.add(
            format!("{prefix}norm0.offset"),
            Tensor::zeros(&[cfg.filters]),
        )];
        let mut cin = cfg.filters;
        for i in 1..=cfg.conv_layers {
            let bound = 1.0 / ((cin * cfg.conv_kernel) as f64).sqrt();
            let w = Tensor::uniform(&[cfg.conv_channels, cin, cfg.conv_kernel], bound, rng);
            convs.push(params.add(format!("{prefix}conv{i}.weight"), w));
            gains.push(params.add(
                format!("{prefix}norm{i}.gain"),
                Tensor::full(&[cfg.conv_channels], S::one()),
            ));
            offsets.push(params.add(
                format!("{prefix}norm{i}.offset"),
                Tensor::zeros(&[cfg.conv_channels]),
            ));
            cin = cfg.conv_channels;
        }
        Ok(SincNet {
            cfg,
            u_low,
            u_band,
            convs,
            gains,
            offsets,
        })
    }

    pub fn config(&self) -> &SincNetConfig {
        &self.cfg
    }

    fn block<S: Scalar>(&self, tape: &mut Tape<S>, bound: &Bound, x: Var, i: usize) -> Result<Var> {
        let pooled = tape.max_pool1d(x, self.cfg.pool)?;
        let normed = tape.channel_norm(
            pooled,
            bound.var(self.gains[i]),
            bound.var(self.offsets[i]),
            S::lit(NORM_EPS),
        )?;
        Ok(tape.leaky_relu(normed, S::lit(self.cfg.leaky_slope)))
    }

    /// `[N, 1, L]` waveforms to `[N, D, T]` features.
    pub fn forward<S: Scalar>(&self, tape: &mut Tape<S>, bound: &Bound, x: Var) -> Result<Var> {
        let kernels = sinc_kernels_on_tape(
            tape,
            bound.var(self.u_low),
            bound.var(self.u_band),
            self.cfg.kernel_length,
            self.cfg.sample_rate,
        )?;
        let y = tape.conv1d(x, kernels, self.cfg.stride)?;
        let mut h = self.block(tape, bound, y, 0)?;
        for (i, &w) in self.convs.iter().enumerate() {
            let y = tape.conv1d(h, bound.var(w), 1)?;
            h = self.block(tape, bound, y, i + 1)?;
        }
        Ok(h)
    }

    /// Features of a single chunk as `[T × D]`, without gradient tracking.
    pub fn features<S: Scalar>(
        &self,
        params: &ParamSet<S>,
        w: &Waveform,
    ) -> Result<FeatureSequence<S>> {
        if w.sample_rate() != self.cfg.sample_rate {
            return Err(Error::Validation(format!(
                "sample rate {} does not match front-end rate {}",
                w.sample_rate(),
                self.cfg.sample_rate
            )));
        }
        let geom = self.cfg.geometry(w.len())?;
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let x = tape.constant(
            vec![1, 1, w.len()],
            w.samples().iter().map(|&s| S::lit(s as f64)).collect(),
        )?;
        let h = self.forward(&mut tape, &bound, x)?;
        let [_, d, t] = *tape.shape(h) else {
            unreachable!("rank-3 output")
        };
        let frames = tape.permute(h, &[0, 2, 1])?;
        let frames = Tensor::new(vec![t, d], tape.value(frames).to_vec())?;
        Ok(FeatureSequence {
            frames,
            frame_period: geom.frame_period,
            origin: geom.origin,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build() -> (SincNet, ParamSet<f32>) {
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let net = SincNet::new(SincNetConfig::default(), "f.", &mut params, &mut rng).unwrap();
        (net, params)
    }

    #[test]
    fn default_output_shape() {
        let (net, params) = build();
        let w = Waveform::new(
            (0..32000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect(),
            16000,
        )
        .unwrap();
        let f = net.features(&params, &w).unwrap();
        assert_eq!((f.len(), f.dim()), (115, 60));
        let loud = Waveform::new(w.samples().iter().map(|s| s * 2.0).collect(), 16000).unwrap();
        let g = net.features(&params, &loud).unwrap();
        assert_eq!(g.frames.shape(), f.frames.shape());
        assert_ne!(g.frames.data(), f.frames.data());
    }

    #[test]
    fn zero_waveform_gives_constant_frames() {
        let (net, params) = build();
        let f = net
            .features(&params, &Waveform::silence(32000, 16000))
            .unwrap();
        let d = f.dim();
        let first = f.frames.data()[..d].to_vec();
        for row in f.frames.data().chunks(d) {
            assert_eq!(row, first.as_slice());
        }
    }

    #[test]
    fn too_short_chunk_is_rejected() {
        let (net, params) = build();
        let err = net
            .features(&params, &Waveform::silence(300, 16000))
            .unwrap_err();
        assert!(matches!(err, Error::InvalidLength(_)), "{err}");
    }
}
