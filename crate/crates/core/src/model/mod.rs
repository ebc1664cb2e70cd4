//! The detector network: a shared front-end, a VAD branch (stacked
//! bidirectional LSTMs and feed-forward layers) and an optional domain
//! classification branch attached behind a gradient reversal.

mod linear;
mod lstm;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use linear::Linear;
pub use lstm::{lstm_sequence, Direction, LstmCell, LstmParams};

use crate::autograd::{Bound, Checkpoint, ParamSet, Precision, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::frontend::{FrameGeometry, MfccConfig, MfccExtractor, SincNet, SincNetConfig, Waveform};

const CMVN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrontendKind {
    Sinc,
    Mfcc,
}

/// Where the domain branch reads the shared representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTap {
    AfterFrontend,
    AfterLstm1,
    AfterLstm2,
}

/// Output of the domain classifier fed to the squared-error loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainHead {
    Softmax,
    Linear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub frontend: FrontendKind,
    pub chunk_duration: f64,
    pub hidden_size: usize,
    pub vad_bilstm_layers: usize,
    /// Feed-forward layers of the VAD branch, counting the 2-way output layer.
    pub vad_ff_layers: usize,
    /// Number of domains; 0 disables the domain branch.
    pub n_domains: usize,
    pub lambda: f64,
    pub domain_branch_tap: DomainTap,
    pub domain_head: DomainHead,
    pub sinc: SincNetConfig,
    pub mfcc: MfccConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frontend: FrontendKind::Sinc,
            chunk_duration: 2.0,
            hidden_size: 128,
            vad_bilstm_layers: 2,
            vad_ff_layers: 3,
            n_domains: 0,
            lambda: 1.0,
            domain_branch_tap: DomainTap::AfterFrontend,
            domain_head: DomainHead::Softmax,
            sinc: SincNetConfig::default(),
            mfcc: MfccConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn sample_rate(&self) -> u32 {
        match self.frontend {
            FrontendKind::Sinc => self.sinc.sample_rate,
            FrontendKind::Mfcc => self.mfcc.sample_rate,
        }
    }

    pub fn chunk_samples(&self) -> usize {
        (self.chunk_duration * self.sample_rate() as f64).round() as usize
    }

    pub fn has_domain_branch(&self) -> bool {
        self.n_domains > 0
    }

    pub fn geometry(&self) -> Result<FrameGeometry> {
        match self.frontend {
            FrontendKind::Sinc => self.sinc.geometry(self.chunk_samples()),
            FrontendKind::Mfcc => self.mfcc.geometry(self.chunk_samples()),
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self.frontend {
            FrontendKind::Sinc => self.sinc.output_dim(),
            FrontendKind::Mfcc => self.mfcc.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.chunk_duration > 0.0 && self.chunk_duration.is_finite()) {
            return bad(format!(
                "chunk_duration must be positive, got {}",
                self.chunk_duration
            ));
        }
        if self.hidden_size == 0 || self.vad_bilstm_layers == 0 || self.vad_ff_layers == 0 {
            return bad("hidden_size, vad_bilstm_layers and vad_ff_layers must be positive".into());
        }
        if self.n_domains == 1 {
            return bad("the domain branch needs at least 2 domains".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!(
                "lambda must be a non-negative number, got {}",
                self.lambda
            ));
        }
        let needed = match self.domain_branch_tap {
            DomainTap::AfterFrontend => 0,
            DomainTap::AfterLstm1 => 1,
            DomainTap::AfterLstm2 => 2,
        };
        if self.has_domain_branch() && needed > self.vad_bilstm_layers {
            return bad(format!(
                "tap {:?} needs {needed} BiLSTM layers",
                self.domain_branch_tap
            ));
        }
        self.geometry().map(|_| ())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config is serializable")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("model config: {e}")))
    }
}

/// Parameter partitions, identified by name prefix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Partition {
    Feature,
    Vad,
    Domain,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Feature, Partition::Vad, Partition::Domain];

    pub fn prefix(self) -> &'static str {
        match self {
            Partition::Feature => "f.",
            Partition::Vad => "v.",
            Partition::Domain => "d.",
        }
    }

    pub fn of(name: &str) -> Option<Partition> {
        Partition::ALL
            .into_iter()
            .find(|p| name.starts_with(p.prefix()))
    }

    fn stream(self) -> u64 {
        match self {
            Partition::Feature => 1,
            Partition::Vad => 2,
            Partition::Domain => 3,
        }
    }
}

/// Trainable scalar counts per partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParameterCounts {
    pub feature: usize,
    pub vad: usize,
    pub domain: usize,
    pub total: usize,
}

/// How the domain branch participates in a forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DomainPass {
    Skip,
    /// Through a gradient reversal scaled by the configured λ.
    Adversarial,
    /// Gradients reach the front-end unchanged.
    Plain,
}

/// Output nodes of a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Heads {
    /// `[N × T × 2]` class probabilities (non-speech, speech).
    pub vad: Option<Var>,
    /// `[N × n_domains]` domain outputs.
    pub domain: Option<Var>,
}

enum Frontend {
    Sinc(SincNet),
    Mfcc(MfccExtractor),
}

struct DomainBranch {
    lstm: LstmParams,
    out: Linear,
}

pub struct VadModel<S: Scalar> {
    config: ModelConfig,
    params: ParamSet<S>,
    frontend: Frontend,
    vad_lstm: Vec<LstmParams>,
    vad_ff: Vec<Linear>,
    domain: Option<DomainBranch>,
    geometry: FrameGeometry,
}

fn partition_rng(seed: u64, p: Partition) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(p.stream());
    rng
}

impl<S: Scalar> VadModel<S> {
    /// Builds and initializes a model. Each partition draws from its own
    /// random stream, so adding or removing the domain branch leaves the
    /// other partitions' initial values unchanged.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let geometry = config.geometry()?;
        let mut params = ParamSet::new();
        let mut rng = partition_rng(seed, Partition::Feature);
        let frontend = match config.frontend {
            FrontendKind::Sinc => Frontend::Sinc(SincNet::new(
                config.sinc.clone(),
                "f.",
                &mut params,
                &mut rng,
            )?),
            FrontendKind::Mfcc => Frontend::Mfcc(MfccExtractor::new(config.mfcc.clone())?),
        };
        let h = config.hidden_size;
        let mut rng = partition_rng(seed, Partition::Vad);
        let mut vad_lstm = Vec::new();
        let mut input = config.feature_dim();
        for i in 0..config.vad_bilstm_layers {
            let l = LstmParams::new(
                &format!("v.lstm{i}"),
                Direction::Bidirectional,
                input,
                h,
                &mut params,
                &mut rng,
            )?;
            input = l.output_size();
            vad_lstm.push(l);
        }
        let mut vad_ff = Vec::new();
        for i in 0..config.vad_ff_layers {
            let out = if i + 1 == config.vad_ff_layers { 2 } else { h };
            vad_ff.push(Linear::new(
                &format!("v.ff{i}"),
                input,
                out,
                &mut params,
                &mut rng,
            ));
            input = out;
        }
        let domain = if config.has_domain_branch() {
            let mut rng = partition_rng(seed, Partition::Domain);
            let tap_dim = match config.domain_branch_tap {
                DomainTap::AfterFrontend => config.feature_dim(),
                _ => 2 * h,
            };
            let lstm = LstmParams::new(
                "d.lstm",
                Direction::Forward,
                tap_dim,
                h,
                &mut params,
                &mut rng,
            )?;
            let out = Linear::new("d.out", h, config.n_domains, &mut params, &mut rng);
            Some(DomainBranch { lstm, out })
        } else {
            None
        };
        Ok(VadModel {
            config,
            params,
            frontend,
            vad_lstm,
            vad_ff,
            domain,
            geometry,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Frame layout of one chunk.
    pub fn geometry(&self) -> FrameGeometry {
        self.geometry
    }

    pub fn chunk_samples(&self) -> usize {
        self.config.chunk_samples()
    }

    pub fn has_domain_branch(&self) -> bool {
        self.domain.is_some()
    }

    /// Sets the reversal scale used by [`DomainPass::Adversarial`].
    pub fn set_lambda(&mut self, lambda: f64) -> Result<()> {
        if !(lambda >= 0.0 && lambda.is_finite()) {
            return Err(Error::Parameter(format!(
                "lambda must be a non-negative number, got {lambda}"
            )));
        }
        self.config.lambda = lambda;
        Ok(())
    }

    pub fn parameter_names(&self, partition: Partition) -> Vec<String> {
        self.params
            .iter()
            .filter(|(n, _)| Partition::of(n) == Some(partition))
            .map(|(n, _)| n.to_string())
            .collect()
    }

    pub fn count_parameters(&self) -> ParameterCounts {
        let count = |p: Partition| {
            self.params
                .iter()
                .filter(|(n, _)| Partition::of(n) == Some(p))
                .map(|(_, t)| t.numel())
                .sum::<usize>()
        };
        let (feature, vad, domain) = (
            count(Partition::Feature),
            count(Partition::Vad),
            count(Partition::Domain),
        );
        ParameterCounts {
            feature,
            vad,
            domain,
            total: self.params.iter().map(|(_, t)| t.numel()).sum(),
        }
    }

    fn check_chunks(&self, chunks: &[&[f32]]) -> Result<()> {
        if chunks.is_empty() {
            return Err(Error::InvalidLength("empty batch".into()));
        }
        let want = self.chunk_samples();
        if let Some(c) = chunks.iter().find(|c| c.len() != want) {
            return Err(Error::InvalidLength(format!(
                "chunk of {} samples, model expects {want}",
                c.len()
            )));
        }
        Ok(())
    }

    /// Time-major features `[T·N × D]`.
    fn frontend_forward(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        chunks: &[&[f32]],
    ) -> Result<Var> {
        let n = chunks.len();
        let nct = match &self.frontend {
            Frontend::Sinc(net) => {
                let len = self.chunk_samples();
                let data = chunks
                    .iter()
                    .flat_map(|c| c.iter().map(|&s| S::lit(s as f64)))
                    .collect();
                let x = tape.constant(vec![n, 1, len], data)?;
                net.forward(tape, bound, x)?
            }
            Frontend::Mfcc(ex) => {
                let (t, d) = (self.geometry.frames, self.config.mfcc.dim());
                let mut data = vec![S::zero(); n * d * t];
                for (i, c) in chunks.iter().enumerate() {
                    let w = Waveform::new_unchecked(c.to_vec(), self.config.mfcc.sample_rate);
                    let f = ex.extract::<S>(&w)?;
                    for (ti, row) in f.frames.data().chunks(d).enumerate() {
                        for (di, &v) in row.iter().enumerate() {
                            data[(i * d + di) * t + ti] = v;
                        }
                    }
                }
                let x = tape.constant(vec![n, d, t], data)?;
                let gain = tape.constant(vec![d], vec![S::one(); d])?;
                let offset = tape.constant(vec![d], vec![S::zero(); d])?;
                tape.channel_norm(x, gain, offset, S::lit(CMVN_EPS))?
            }
        };
        let (d, t) = (tape.shape(nct)[1], tape.shape(nct)[2]);
        let tnd = tape.permute(nct, &[2, 0, 1])?;
        tape.reshape(tnd, &[t * n, d])
    }

    /// Batched forward over chunks of exactly `chunk_samples` samples.
    pub fn forward(
        &self,
        tape: &mut Tape<S>,
        bound: &Bound,
        chunks: &[&[f32]],
        vad: bool,
        domain: DomainPass,
    ) -> Result<Heads> {
        self.check_chunks(chunks)?;
        if domain != DomainPass::Skip && self.domain.is_none() {
            return Err(Error::Capability("model has no domain branch".into()));
        }
        let n = chunks.len();
        let t = self.geometry.frames;
        let features = self.frontend_forward(tape, bound, chunks)?;
        let lstm_needed = match (vad, domain, self.config.domain_branch_tap) {
            (true, _, _) => self.vad_lstm.len(),
            (false, DomainPass::Skip, _) | (false, _, DomainTap::AfterFrontend) => 0,
            (false, _, DomainTap::AfterLstm1) => 1,
            (false, _, DomainTap::AfterLstm2) => 2,
        };
        let mut taps = vec![features];
        for l in &self.vad_lstm[..lstm_needed] {
            let prev = *taps.last().unwrap();
            taps.push(l.forward(tape, bound, prev, n)?);
        }
        let vad_out = if vad {
            let mut h = *taps.last().unwrap();
            for (i, ff) in self.vad_ff.iter().enumerate() {
                h = ff.forward(tape, bound, h)?;
                if i + 1 < self.vad_ff.len() {
                    h = tape.tanh(h);
                }
            }
            let p = tape.softmax(h, 1)?;
            let p = tape.reshape(p, &[t, n, 2])?;
            Some(tape.permute(p, &[1, 0, 2])?)
        } else {
            None
        };
        let domain_out = match (domain, &self.domain) {
            (DomainPass::Skip, _) | (_, None) => None,
            (pass, Some(branch)) => {
                let tap = match self.config.domain_branch_tap {
                    DomainTap::AfterFrontend => taps[0],
                    DomainTap::AfterLstm1 => taps[1],
                    DomainTap::AfterLstm2 => taps[2],
                };
                let x = if pass == DomainPass::Adversarial {
                    tape.gradient_reverse(tap, self.config.lambda)?
                } else {
                    tap
                };
                let h = branch.lstm.forward(tape, bound, x, n)?;
                let hd = branch.lstm.output_size();
                let h = tape.reshape(h, &[t, n, hd])?;
                let h = tape.permute(h, &[1, 2, 0])?;
                let pooled = tape.max_pool1d(h, t)?;
                let pooled = tape.reshape(pooled, &[n, hd])?;
                let logits = branch.out.forward(tape, bound, pooled)?;
                Some(match self.config.domain_head {
                    DomainHead::Softmax => tape.softmax(logits, 1)?,
                    DomainHead::Linear => logits,
                })
            }
        };
        Ok(Heads {
            vad: vad_out,
            domain: domain_out,
        })
    }

    fn check_waveform(&self, w: &Waveform) -> Result<()> {
        if w.sample_rate() != self.config.sample_rate() {
            return Err(Error::Validation(format!(
                "sample rate {} does not match model rate {}",
                w.sample_rate(),
                self.config.sample_rate()
            )));
        }
        Ok(())
    }

    /// Per-frame `[T × 2]` class probabilities of one chunk.
    pub fn forward_vad(&self, w: &Waveform) -> Result<Tensor<S>> {
        self.check_waveform(w)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let heads = self.forward(&mut tape, &bound, &[w.samples()], true, DomainPass::Skip)?;
        let t = self.geometry.frames;
        Tensor::new(vec![t, 2], tape.value(heads.vad.unwrap()).to_vec())
    }

    /// Domain distribution of one chunk (no reversal at inference).
    pub fn forward_domain(&self, w: &Waveform) -> Result<Tensor<S>> {
        self.check_waveform(w)?;
        Ok(Tensor::new(
            vec![self.config.n_domains],
            self.domain_outputs(&[w.samples()])?.remove(0),
        )?
        .cast())
    }

    /// Speech probability per frame for each chunk, without gradients.
    pub fn speech_scores(&self, chunks: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let heads = self.forward(&mut tape, &bound, chunks, true, DomainPass::Skip)?;
        let t = self.geometry.frames;
        let p = tape.value(heads.vad.unwrap());
        Ok((0..chunks.len())
            .map(|i| {
                (0..t)
                    .map(|j| p[(i * t + j) * 2 + 1].to_f64_lossless())
                    .collect()
            })
            .collect())
    }

    /// Domain-branch outputs for each chunk, without gradients.
    pub fn domain_outputs(&self, chunks: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let heads = self.forward(&mut tape, &bound, chunks, false, DomainPass::Plain)?;
        let n = self.config.n_domains;
        Ok(tape
            .value(heads.domain.unwrap())
            .chunks(n)
            .map(|r| r.iter().map(|v| v.to_f64_lossless()).collect())
            .collect())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        let mut ck = Checkpoint::new();
        for (name, t) in self.params.iter() {
            let mut t = t.clone();
            t.set_requires_grad(false);
            ck.push(name, t);
        }
        ck.set_metadata("config", &self.config.to_toml());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<S>) -> Result<Self> {
        let text = ck
            .metadata("config")
            .ok_or_else(|| Error::Checkpoint("missing model config".into()))?;
        let mut model = VadModel::new(ModelConfig::from_toml(&text)?, 0)?;
        let mut seen = 0;
        for (name, t) in ck.tensors() {
            if name.starts_with("meta/") {
                continue;
            }
            if model.params.index_of(name).is_none() {
                return Err(Error::Checkpoint(format!("unexpected tensor {name}")));
            }
            model
                .params
                .set_value(name, t)
                .map_err(|e| Error::Checkpoint(format!("{name}: {e}")))?;
            seen += 1;
        }
        if seen != model.params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {seen} of {} parameters",
                model.params.len()
            )));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Precision stored in a checkpoint file.
pub fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    crate::autograd::checkpoint::peek_precision(&bytes)
}
