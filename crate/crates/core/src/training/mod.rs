//! Losses, chunk sampling, noise augmentation and the training loop.

mod loss;
mod sampling;

use std::fs::File;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use loss::{domain_loss, one_hot, vad_loss, LOG_FLOOR};
pub use sampling::{
    augment_additive_noise, mix_at_snr, sample_subsequences, snr_gain, TrainingChunk, TrainingFile,
};

use crate::autograd::{CyclicalLrSchedule, Scalar, SgdState, Tape};
use crate::error::{Error, Result};
use crate::frontend::Waveform;
use crate::model::{DomainPass, Partition, VadModel};

/// Which losses drive the update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// VAD loss only; θ_f and θ_v are updated.
    Vad,
    /// VAD loss plus the domain loss behind gradient reversal.
    Adversarial,
    /// Domain loss only, without reversal; θ_f and θ_d are updated.
    Domain,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub chunk_duration: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Batches per epoch; derived from the corpus duration when absent.
    pub steps_per_epoch: Option<usize>,
    pub snr_range: [f64; 2],
    /// Probability that a chunk receives additive noise.
    pub augment_probability: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub schedule: CyclicalLrSchedule,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            chunk_duration: 2.0,
            batch_size: 64,
            max_epochs: 300,
            steps_per_epoch: None,
            snr_range: [10.0, 20.0],
            augment_probability: 1.0,
            seed: 0,
            mode: TrainMode::Vad,
            schedule: CyclicalLrSchedule::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(self.chunk_duration > 0.0 && self.chunk_duration.is_finite()) {
            return bad(format!(
                "chunk_duration must be positive, got {}",
                self.chunk_duration
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be at least 1".into());
        }
        let [lo, hi] = self.snr_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return bad(format!(
                "snr_range must satisfy low <= high, got [{lo}, {hi}]"
            ));
        }
        if !(0.0..=1.0).contains(&self.augment_probability) {
            return bad(format!(
                "augment_probability must lie in [0, 1], got {}",
                self.augment_probability
            ));
        }
        CyclicalLrSchedule::new(
            self.schedule.lr_min,
            self.schedule.lr_max,
            self.schedule.cycle_length_epochs,
        )?;
        Ok(())
    }

    /// One pass-equivalent of the corpus audio per epoch.
    pub fn resolve_steps(&self, total_seconds: f64) -> usize {
        self.steps_per_epoch.unwrap_or_else(|| {
            (total_seconds / (self.chunk_duration * self.batch_size as f64))
                .ceil()
                .max(1.0) as usize
        })
    }
}

/// Mean losses of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub vad_loss: Option<f64>,
    pub domain_loss: Option<f64>,
    pub learning_rate: f64,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub vad: Option<f64>,
    pub domain: Option<f64>,
}

/// Parameters updated in `mode`.
pub fn trainable_names<S: Scalar>(model: &VadModel<S>, mode: TrainMode) -> Vec<String> {
    let parts: &[Partition] = match mode {
        TrainMode::Vad => &[Partition::Feature, Partition::Vad],
        TrainMode::Adversarial => &[Partition::Feature, Partition::Vad, Partition::Domain],
        TrainMode::Domain => &[Partition::Feature, Partition::Domain],
    };
    parts
        .iter()
        .flat_map(|&p| model.parameter_names(p))
        .collect()
}

fn check_mode<S: Scalar>(model: &VadModel<S>, mode: TrainMode) -> Result<()> {
    if mode != TrainMode::Vad && !model.has_domain_branch() {
        return Err(Error::Capability(format!(
            "{mode:?} training needs a domain branch"
        )));
    }
    Ok(())
}

/// Forward and backward over `L_v + L_d` (as enabled by `mode`) followed
/// by one SGD update.
pub fn train_step<S: Scalar>(
    model: &mut VadModel<S>,
    batch: &[TrainingChunk],
    mode: TrainMode,
    opt: &SgdState,
) -> Result<StepLosses> {
    check_mode(model, mode)?;
    let chunks: Vec<&[f32]> = batch.iter().map(|c| c.waveform.samples()).collect();
    let mut tape = Tape::new();
    let bound = model.params().bind(&mut tape, true);
    let pass = match mode {
        TrainMode::Vad => DomainPass::Skip,
        TrainMode::Adversarial => DomainPass::Adversarial,
        TrainMode::Domain => DomainPass::Plain,
    };
    let heads = model.forward(&mut tape, &bound, &chunks, mode != TrainMode::Domain, pass)?;
    let lv = match heads.vad {
        Some(scores) => {
            let labels: Vec<u8> = batch
                .iter()
                .flat_map(|c| c.labels.iter().copied())
                .collect();
            Some(vad_loss(&mut tape, scores, &labels)?)
        }
        None => None,
    };
    let ld = match heads.domain {
        Some(preds) => {
            let domains: Vec<usize> = batch.iter().map(|c| c.domain).collect();
            let targets = one_hot::<S>(&domains, model.config().n_domains)?;
            Some(domain_loss(&mut tape, preds, &targets)?)
        }
        None => None,
    };
    let total = match (lv, ld) {
        (Some(a), Some(b)) => tape.add(a, b)?,
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => return Err(Error::State("no loss enabled".into())),
    };
    tape.backward(total)?;
    let value = |v: Option<_>| v.map(|v| tape.value(v)[0].to_f64_lossless());
    let losses = StepLosses {
        vad: value(lv),
        domain: value(ld),
    };
    let params = model.params_mut();
    params.collect_grads(&tape, &bound)?;
    opt.step(params)?;
    Ok(losses)
}

/// Runs the epoch loop, writing `epoch_NNNN.ckpt` files and `train.log`
/// into `out_dir` when given.
pub struct Trainer<'a> {
    pub files: &'a [TrainingFile],
    pub noise: &'a [Waveform],
    pub config: &'a TrainConfig,
    pub out_dir: Option<&'a Path>,
}

pub fn checkpoint_name(epoch: usize) -> String {
    format!("epoch_{epoch:04}.ckpt")
}

impl Trainer<'_> {
    fn draw_batch(
        &self,
        model_geometry: &crate::frontend::FrameGeometry,
        samples: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Vec<TrainingChunk>> {
        let cfg = self.config;
        let mut batch =
            sample_subsequences(self.files, model_geometry, samples, cfg.batch_size, rng)?;
        if self.noise.is_empty() || cfg.augment_probability == 0.0 {
            return Ok(batch);
        }
        for chunk in &mut batch {
            if rng.random::<f64>() >= cfg.augment_probability {
                continue;
            }
            let noise = &self.noise[rng.random_range(0..self.noise.len())];
            let snr = rng.random_range(cfg.snr_range[0]..=cfg.snr_range[1]);
            chunk.waveform = augment_additive_noise(&chunk.waveform, noise, snr, rng)?;
        }
        Ok(batch)
    }

    pub fn run<S: Scalar>(&self, model: &mut VadModel<S>) -> Result<Vec<EpochRecord>> {
        let cfg = self.config;
        cfg.validate()?;
        check_mode(model, cfg.mode)?;
        if (cfg.chunk_duration - model.config().chunk_duration).abs() > 1e-9 {
            return Err(Error::Parameter(format!(
                "training chunk {} s differs from the model chunk {} s",
                cfg.chunk_duration,
                model.config().chunk_duration
            )));
        }
        let rate = model.config().sample_rate();
        if let Some(f) = self.files.iter().find(|f| f.audio.sample_rate() != rate) {
            return Err(Error::Validation(format!(
                "{} is sampled at {} Hz, model expects {rate}",
                f.uri,
                f.audio.sample_rate()
            )));
        }
        if cfg.mode != TrainMode::Vad {
            if let Some(f) = self
                .files
                .iter()
                .find(|f| f.domain >= model.config().n_domains)
            {
                return Err(Error::Validation(format!(
                    "{} has domain index {} beyond the model's {}",
                    f.uri,
                    f.domain,
                    model.config().n_domains
                )));
            }
        }
        if self
            .noise
            .iter()
            .any(|n| n.len() < model.chunk_samples() || n.sample_rate() != rate)
        {
            return Err(Error::Validation(
                "noise recordings must match the model rate and span at least one chunk".into(),
            ));
        }
        let total: f64 = self.files.iter().map(TrainingFile::duration).sum();
        let steps = cfg.resolve_steps(total);
        let names = trainable_names(model, cfg.mode);
        let mut opt = SgdState::new(cfg.schedule.lr_min, names)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let geometry = model.geometry();
        let samples = model.chunk_samples();
        let mut log = match self.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join("train.log");
                Some((File::create(&p).map_err(|e| Error::io(&p, e))?, p))
            }
            None => None,
        };
        let mut records = Vec::with_capacity(cfg.max_epochs);
        for epoch in 0..cfg.max_epochs {
            let (mut sum_v, mut sum_d) = (0.0, 0.0);
            for step in 0..steps {
                opt.learning_rate = cfg.schedule.lr(epoch as f64 + step as f64 / steps as f64);
                let batch = self.draw_batch(&geometry, samples, &mut rng)?;
                let l = train_step(model, &batch, cfg.mode, &opt)?;
                let (v, d) = (l.vad.unwrap_or(0.0), l.domain.unwrap_or(0.0));
                if !v.is_finite() || !d.is_finite() {
                    return Err(Error::NonFinite {
                        epoch,
                        step,
                        vad_loss: v,
                        domain_loss: l.domain,
                    });
                }
                sum_v += v;
                sum_d += d;
            }
            let mean = |s: f64, on: bool| on.then_some(s / steps as f64);
            let checkpoint = match self.out_dir {
                Some(dir) => {
                    let p = dir.join(checkpoint_name(epoch));
                    model.save(&p)?;
                    Some(p)
                }
                None => None,
            };
            let record = EpochRecord {
                epoch,
                vad_loss: mean(sum_v, cfg.mode != TrainMode::Domain),
                domain_loss: mean(sum_d, cfg.mode != TrainMode::Vad),
                learning_rate: cfg.schedule.lr_at_epoch(epoch),
                checkpoint,
            };
            log::info!(
                "epoch {epoch}: L_v {:?} L_d {:?} lr {:.3e}",
                record.vad_loss,
                record.domain_loss,
                record.learning_rate
            );
            if let Some((f, p)) = log.as_mut() {
                let fmt = |v: Option<f64>| v.map_or("NA".to_string(), |v| format!("{v:.6}"));
                let name = record
                    .checkpoint
                    .as_ref()
                    .map_or("NA".to_string(), |_| checkpoint_name(epoch));
                writeln!(
                    f,
                    "{epoch}\t{:.6e}\t{}\t{}\t{name}",
                    record.learning_rate,
                    fmt(record.vad_loss),
                    fmt(record.domain_loss)
                )
                .map_err(|e| Error::io(p.as_path(), e))?;
            }
            records.push(record);
        }
        Ok(records)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn steps_cover_one_pass() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.resolve_steps(3960.0), 31);
        assert_eq!(cfg.resolve_steps(1.0), 1);
        assert_eq!(
            TrainConfig {
                steps_per_epoch: Some(5),
                ..cfg
            }
            .resolve_steps(1e6),
            5
        );
    }

    #[test]
    fn invalid_configs() {
        assert!(TrainConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            snr_range: [20.0, 10.0],
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            augment_probability: 1.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
