//! Experiment orchestration: train → tune → apply → evaluate, the
//! comparison matrix, the λ sweep and the domain confusion study.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::synth::NOISE_DIR;
use crate::data::{
    load_entry, load_noise_bank, load_training_files, make_splits, segments, CorpusManifest,
    ManifestEntry, SplitMode, Splits, SynthSpec,
};
use crate::error::{Error, Result};
use crate::frontend::Waveform;
use crate::inference::{
    binarize, score_file, write_scores, FrameScoreSequence, SlidingWindowConfig,
};
use crate::metrics::{
    aggregate_over_domains, detection_counts, detection_error_rate, domain_confusion, sigma_grid,
    ConfusionMatrix, DetectionCounts, ReportRow, ScoredFile, Tuner, TuningResult, REPORT_HEADER,
};
use crate::model::{ModelConfig, VadModel};
use crate::timeline::Timeline;
use crate::training::{checkpoint_name, EpochRecord, TrainConfig, TrainMode, Trainer};

/// Everything needed to reproduce a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub id: String,
    pub manifest: PathBuf,
    /// Augmentation noise; defaults to `noise/` beside the manifest.
    pub noise_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Number of σ grid intervals over [0, 1].
    pub sigma_steps: usize,
    /// Evaluate every k-th checkpoint during tuning (the last is always
    /// evaluated).
    pub tune_every: usize,
    pub lambda_grid: Vec<f64>,
    /// Left-out domains of the leave-one-out protocol; empty means all.
    pub folds: Vec<String>,
    pub synth: SynthSpec,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub window: SlidingWindowConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            id: "default".into(),
            manifest: "corpus/manifest.tsv".into(),
            noise_dir: None,
            out_dir: "runs".into(),
            sigma_steps: 100,
            tune_every: 1,
            lambda_grid: vec![0.01, 0.1, 1.0, 10.0, 100.0],
            folds: Vec::new(),
            synth: SynthSpec::default(),
            model: ModelConfig::default(),
            train: TrainConfig {
                max_epochs: 50,
                ..TrainConfig::default()
            },
            window: SlidingWindowConfig::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t
            .remove("v")
            .unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies a `section.key=value` override to a TOML table. Values parse
/// as TOML literals and fall back to plain strings.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {assignment:?} is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("bad override key {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut cur = table;
    for k in parents {
        let entry = cur
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{k} is not a section in override {path:?}")))?;
    }
    cur.insert(last.to_string(), parse_override_value(raw.trim()));
    Ok(())
}

impl ExperimentConfig {
    /// Reads `path` (or the defaults) and applies overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<toml::Table>()
                    .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config is serializable")
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() || self.id.contains(['/', '\\']) {
            return Err(Error::Config(format!(
                "id {:?} must be a plain name",
                self.id
            )));
        }
        if self.sigma_steps == 0 || self.tune_every == 0 {
            return Err(Error::Config(
                "sigma_steps and tune_every must be positive".into(),
            ));
        }
        if self
            .lambda_grid
            .iter()
            .any(|l| !(l.is_finite() && *l >= 0.0))
        {
            return Err(Error::Config(
                "lambda_grid values must be non-negative".into(),
            ));
        }
        if (self.train.chunk_duration - self.model.chunk_duration).abs() > 1e-9
            || (self.window.duration - self.model.chunk_duration).abs() > 1e-9
        {
            return Err(Error::Config(format!(
                "chunk durations differ: model {}, train {}, window {}",
                self.model.chunk_duration, self.train.chunk_duration, self.window.duration
            )));
        }
        self.model.validate()?;
        self.train.validate()?;
        self.window.validate()?;
        self.synth.validate()
    }

    /// Sets every seed from one value.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        self.synth.seed = seed;
    }

    pub fn run_dir(&self) -> PathBuf {
        self.out_dir.join(&self.id)
    }

    pub fn noise_dir(&self) -> Option<PathBuf> {
        match &self.noise_dir {
            Some(d) => Some(d.clone()),
            None => {
                let d = self
                    .manifest
                    .parent()
                    .unwrap_or(Path::new(""))
                    .join(NOISE_DIR);
                d.is_dir().then_some(d)
            }
        }
    }

    pub fn sigma_grid(&self) -> Vec<f64> {
        sigma_grid(self.sigma_steps)
    }
}

/// How a protocol partitions the corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Protocol(pub SplitMode);

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Parameter(format!("unknown protocol {s:?}"));
        Ok(Protocol(match s.split_once(':') {
            None if s == "in_domain" => SplitMode::InDomain,
            Some(("leave_one_out", k)) if !k.is_empty() => SplitMode::LeaveOneOut(k.into()),
            Some(("single_domain", k)) if !k.is_empty() => SplitMode::SingleDomain(k.into()),
            _ => return Err(bad()),
        }))
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            SplitMode::InDomain => write!(f, "in_domain"),
            SplitMode::LeaveOneOut(k) => write!(f, "leave_one_out:{k}"),
            SplitMode::SingleDomain(k) => write!(f, "single_domain:{k}"),
        }
    }
}

/// Model config for training `mode` over `domains`: the domain branch is
/// only built when a mode uses it.
pub fn model_config_for(
    cfg: &ExperimentConfig,
    mode: TrainMode,
    domains: usize,
    lambda: f64,
) -> ModelConfig {
    let mut m = cfg.model.clone();
    m.n_domains = if mode == TrainMode::Vad { 0 } else { domains };
    m.lambda = lambda;
    m
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::State(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub struct Corpus {
    pub manifest: CorpusManifest,
    pub noise: Vec<Waveform>,
}

impl Corpus {
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let manifest = CorpusManifest::load(&cfg.manifest)?;
        let noise = match cfg.noise_dir() {
            Some(d) => load_noise_bank(&d)?,
            None => {
                log::warn!("no noise directory; training without augmentation");
                Vec::new()
            }
        };
        Ok(Corpus { manifest, noise })
    }

    pub fn splits(&self, protocol: &Protocol) -> Result<Splits> {
        make_splits(&self.manifest, &protocol.0)
    }
}

/// Trains one model on `train`, writing checkpoints and `train.log` to `dir`.
pub fn train_model(
    cfg: &ExperimentConfig,
    train: &CorpusManifest,
    noise: &[Waveform],
    mode: TrainMode,
    lambda: f64,
    dir: &Path,
) -> Result<Vec<EpochRecord>> {
    let domains = train.domains();
    if train.entries.is_empty() {
        return Err(Error::Corpus("training split is empty".into()));
    }
    let files = load_training_files(train, &domains)?;
    let train_cfg = TrainConfig {
        mode,
        ..cfg.train.clone()
    };
    let mut model = VadModel::<f32>::new(
        model_config_for(cfg, mode, domains.len(), lambda),
        cfg.train.seed,
    )?;
    create_dir(dir)?;
    for epoch in checkpoint_epochs(dir)? {
        let p = dir.join(checkpoint_name(epoch));
        std::fs::remove_file(&p).map_err(|e| Error::io(&p, e))?;
    }
    write_text(&dir.join("domains.txt"), &(domains.join("\n") + "\n"))?;
    Trainer {
        files: &files,
        noise,
        config: &train_cfg,
        out_dir: Some(dir),
    }
    .run(&mut model)
}

/// A recording with its reference, kept in memory for repeated scoring.
pub struct LabeledAudio {
    pub entry: ManifestEntry,
    pub audio: Waveform,
    pub reference: Timeline,
}

pub fn load_labeled(manifest: &CorpusManifest) -> Result<Vec<LabeledAudio>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let (audio, ann) = load_entry(manifest, e)?;
            Ok(LabeledAudio {
                entry: e.clone(),
                audio,
                reference: ann.regions,
            })
        })
        .collect()
}

pub fn score_all(
    model: &VadModel<f32>,
    files: &[LabeledAudio],
    window: &SlidingWindowConfig,
) -> Result<Vec<ScoredFile>> {
    files
        .iter()
        .map(|f| {
            Ok(ScoredFile {
                scores: score_file(model, &f.audio, window)?,
                reference: f.reference.clone(),
                duration: f.audio.duration(),
            })
        })
        .collect()
}

/// Checkpoint epochs present in `dir`, ascending.
pub fn checkpoint_epochs(dir: &Path) -> Result<Vec<usize>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut epochs = Vec::new();
    for entry in rd {
        let name = entry.map_err(|e| Error::io(dir, e))?.file_name();
        let name = name.to_string_lossy();
        if let Some(n) = name
            .strip_prefix("epoch_")
            .and_then(|s| s.strip_suffix(".ckpt"))
        {
            if let Ok(e) = n.parse::<usize>() {
                epochs.push(e);
            }
        }
    }
    epochs.sort_unstable();
    Ok(epochs)
}

/// Picks the (epoch, σ) pair with the lowest dev detection error rate and
/// writes `tuning.tsv` (best σ per evaluated epoch) and `selection.toml`.
pub fn tune_run(cfg: &ExperimentConfig, dev: &[LabeledAudio], dir: &Path) -> Result<TuningResult> {
    let epochs = checkpoint_epochs(dir)?;
    let last = *epochs
        .last()
        .ok_or_else(|| Error::Validation(format!("no checkpoints in {}", dir.display())))?;
    if dev.is_empty() {
        return Err(Error::Corpus("development split is empty".into()));
    }
    let mut tuner = Tuner::new(cfg.sigma_grid())?;
    let mut log = String::from("epoch\tsigma\tDetER%\n");
    for &epoch in epochs
        .iter()
        .filter(|&&e| e % cfg.tune_every == 0 || e == last)
    {
        let model = VadModel::<f32>::load(&dir.join(checkpoint_name(epoch)))?;
        let scored = score_all(&model, dev, &cfg.window)?;
        let counts = tuner.offer(epoch, &scored)?;
        let (sigma, rate) = tuner
            .grid()
            .iter()
            .zip(&counts)
            .map(|(&s, c)| (s, detection_error_rate(c).unwrap_or(f64::INFINITY)))
            .fold(
                (f64::NAN, f64::INFINITY),
                |b, x| if x.1 < b.1 { x } else { b },
            );
        log.push_str(&format!("{epoch}\t{sigma:.2}\t{rate:.1}\n"));
    }
    let best = tuner.finish()?;
    write_text(&dir.join("tuning.tsv"), &log)?;
    write_text(
        &dir.join("selection.toml"),
        &toml::to_string(&Selection::from(&best)).expect("serializable"),
    )?;
    log::info!(
        "selected epoch {} with sigma {:.2}",
        best.best_epoch,
        best.best_sigma
    );
    Ok(best)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub epoch: usize,
    pub sigma: f64,
}

impl From<&TuningResult> for Selection {
    fn from(t: &TuningResult) -> Self {
        Selection {
            epoch: t.best_epoch,
            sigma: t.best_sigma,
        }
    }
}

impl Selection {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }
}

/// Hypothesis and scores of one recording.
pub struct Hypothesis {
    pub entry: ManifestEntry,
    pub scores: FrameScoreSequence,
    pub timeline: Timeline,
}

/// Runs the detector over `files`, writing `{uri}.tsv` segments and
/// `{uri}.scores` into `dir`.
pub fn apply_model(
    model: &VadModel<f32>,
    files: &[LabeledAudio],
    window: &SlidingWindowConfig,
    sigma: f64,
    dir: &Path,
) -> Result<Vec<Hypothesis>> {
    create_dir(dir)?;
    files
        .iter()
        .map(|f| {
            let scores = score_file(model, &f.audio, window)?;
            let timeline = binarize(&scores, sigma)?.clip(0.0, f.audio.duration());
            segments::write_segments(
                &dir.join(format!("{}.tsv", f.entry.uri)),
                &f.entry.uri,
                &timeline,
            )?;
            write_scores(&dir.join(format!("{}.scores", f.entry.uri)), &scores)?;
            Ok(Hypothesis {
                entry: f.entry.clone(),
                scores,
                timeline,
            })
        })
        .collect()
}

/// Detection counts per domain, sorted by domain name.
pub type DomainCounts = BTreeMap<String, DetectionCounts>;

pub fn count_by_domain<'a>(
    pairs: impl IntoIterator<Item = (&'a LabeledAudio, &'a Timeline)>,
) -> Result<DomainCounts> {
    let mut out = DomainCounts::new();
    for (f, hyp) in pairs {
        let c = detection_counts(&f.reference, hyp, f.audio.duration())?;
        let slot = out.entry(f.entry.domain.clone()).or_default();
        *slot = slot.add(&c);
    }
    Ok(out)
}

/// Per-domain rows followed by an `ALL` row.
pub fn report_rows(per_domain: &DomainCounts) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = per_domain
        .iter()
        .map(|(d, c)| ReportRow {
            scope: d.clone(),
            counts: *c,
        })
        .collect();
    let all: Vec<DetectionCounts> = per_domain.values().copied().collect();
    rows.push(ReportRow {
        scope: "ALL".into(),
        counts: aggregate_over_domains(&all),
    });
    rows
}

pub fn format_report(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    out
}

/// Outcome of train → tune → test under one protocol.
#[derive(Clone, Debug, Serialize)]
pub struct ProtocolResult {
    pub protocol: String,
    pub mode: TrainMode,
    pub lambda: f64,
    pub train_domains: Vec<String>,
    pub selection: Selection,
    pub dev_detection_error_rate: f64,
    pub per_domain: DomainCounts,
}

impl ProtocolResult {
    pub fn total(&self) -> DetectionCounts {
        aggregate_over_domains(&self.per_domain.values().copied().collect::<Vec<_>>())
    }
}

pub fn run_protocol(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    protocol: &Protocol,
    mode: TrainMode,
    lambda: f64,
    dir: &Path,
) -> Result<ProtocolResult> {
    let splits = corpus.splits(protocol)?;
    log::info!(
        "{protocol} {mode:?} lambda={lambda}: training in {}",
        dir.display()
    );
    train_model(cfg, &splits.train, &corpus.noise, mode, lambda, dir)?;
    let best = tune_run(cfg, &load_labeled(&splits.dev)?, dir)?;
    let model = VadModel::<f32>::load(&dir.join(checkpoint_name(best.best_epoch)))?;
    let test = load_labeled(&splits.test)?;
    let hyps = apply_model(
        &model,
        &test,
        &cfg.window,
        best.best_sigma,
        &dir.join("hyp"),
    )?;
    let per_domain = count_by_domain(test.iter().zip(hyps.iter().map(|h| &h.timeline)))?;
    write_text(
        &dir.join("report.tsv"),
        &format_report(&report_rows(&per_domain)),
    )?;
    let result = ProtocolResult {
        protocol: protocol.to_string(),
        mode,
        lambda,
        train_domains: splits.train.domains(),
        selection: Selection::from(&best),
        dev_detection_error_rate: best.detection_error_rate,
        per_domain,
    };
    write_json(&dir.join("run.json"), &result)?;
    Ok(result)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize)]
pub enum MatrixRowId {
    A,
    B,
    C,
    D,
    E,
}

impl FromStr for MatrixRowId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim() {
            "A" | "a" => MatrixRowId::A,
            "B" | "b" => MatrixRowId::B,
            "C" | "c" => MatrixRowId::C,
            "D" | "d" => MatrixRowId::D,
            "E" | "e" => MatrixRowId::E,
            other => return Err(Error::Parameter(format!("unknown matrix row {other:?}"))),
        })
    }
}

impl fmt::Display for MatrixRowId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

impl MatrixRowId {
    pub fn training_policy(self) -> &'static str {
        match self {
            MatrixRowId::A => "target domain only",
            MatrixRowId::B | MatrixRowId::C => "all domains",
            MatrixRowId::D | MatrixRowId::E => "all but target domain",
        }
    }

    pub fn adversarial(self) -> bool {
        matches!(self, MatrixRowId::C | MatrixRowId::E)
    }

    pub fn inference_policy(self) -> &'static str {
        match self {
            MatrixRowId::A => "per-domain model",
            MatrixRowId::B | MatrixRowId::C => "single model",
            MatrixRowId::D | MatrixRowId::E => "left-out domain",
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MatrixRow {
    pub id: MatrixRowId,
    pub training_policy: String,
    pub adversarial: bool,
    pub inference_policy: String,
    pub per_domain: DomainCounts,
    pub counts: DetectionCounts,
}

pub const MATRIX_HEADER: &str =
    "row\ttraining\tadversarial\tinference\tDetER%\tFA%\tMiss%\ttotal_s";

impl MatrixRow {
    pub fn to_tsv(&self) -> String {
        let r = ReportRow {
            scope: String::new(),
            counts: self.counts,
        }
        .to_tsv();
        format!(
            "{}\t{}\t{}\t{}{}",
            self.id,
            self.training_policy,
            if self.adversarial { "yes" } else { "no" },
            self.inference_policy,
            r
        )
    }
}

fn fold_domains(cfg: &ExperimentConfig, corpus: &Corpus) -> Result<Vec<String>> {
    let all = corpus.manifest.domains();
    if cfg.folds.is_empty() {
        return Ok(all);
    }
    for k in &cfg.folds {
        if !all.contains(k) {
            return Err(Error::Parameter(format!(
                "fold domain {k:?} is not in the corpus"
            )));
        }
    }
    Ok(cfg.folds.clone())
}

/// Leave-one-out over the configured folds; returns per-domain counts.
pub fn run_leave_one_out(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    mode: TrainMode,
    lambda: f64,
    dir: &Path,
) -> Result<DomainCounts> {
    let mut out = DomainCounts::new();
    for k in fold_domains(cfg, corpus)? {
        let p = Protocol(SplitMode::LeaveOneOut(k.clone()));
        let r = run_protocol(cfg, corpus, &p, mode, lambda, &dir.join(&k))?;
        out.extend(r.per_domain);
    }
    Ok(out)
}

pub fn run_matrix_row(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    id: MatrixRowId,
    dir: &Path,
) -> Result<MatrixRow> {
    let lambda = cfg.model.lambda;
    let mode = if id.adversarial() {
        TrainMode::Adversarial
    } else {
        TrainMode::Vad
    };
    let per_domain = match id {
        MatrixRowId::A => {
            let mut out = DomainCounts::new();
            for k in corpus.manifest.domains() {
                let p = Protocol(SplitMode::SingleDomain(k.clone()));
                out.extend(
                    run_protocol(cfg, corpus, &p, TrainMode::Vad, lambda, &dir.join(&k))?
                        .per_domain,
                );
            }
            out
        }
        MatrixRowId::B | MatrixRowId::C => {
            run_protocol(
                cfg,
                corpus,
                &Protocol(SplitMode::InDomain),
                mode,
                lambda,
                dir,
            )?
            .per_domain
        }
        MatrixRowId::D | MatrixRowId::E => run_leave_one_out(cfg, corpus, mode, lambda, dir)?,
    };
    let counts = total(&per_domain);
    Ok(MatrixRow {
        id,
        training_policy: id.training_policy().into(),
        adversarial: id.adversarial(),
        inference_policy: id.inference_policy().into(),
        per_domain,
        counts,
    })
}

/// Runs the requested rows in fixed A–E order and writes `matrix.tsv`
/// and `run.json` into `dir`.
pub fn run_matrix(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    rows: &[MatrixRowId],
    dir: &Path,
) -> Result<Vec<MatrixRow>> {
    if corpus.manifest.domains().len() < 2 {
        return Err(Error::Corpus("the matrix needs at least 2 domains".into()));
    }
    let mut ids = rows.to_vec();
    ids.sort_unstable();
    ids.dedup();
    create_dir(dir)?;
    let mut out = Vec::new();
    for id in ids {
        out.push(run_matrix_row(
            cfg,
            corpus,
            id,
            &dir.join(format!("row_{id}")),
        )?);
    }
    let mut text = format!("{MATRIX_HEADER}\n");
    for r in &out {
        text.push_str(&r.to_tsv());
        text.push('\n');
    }
    write_text(&dir.join("matrix.tsv"), &text)?;
    write_json(&dir.join("run.json"), &out)?;
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepPoint {
    pub lambda: f64,
    pub detection_error_rate: f64,
    pub relative_improvement: f64,
    pub counts: DetectionCounts,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    pub baseline_detection_error_rate: f64,
    pub baseline: DetectionCounts,
    pub points: Vec<SweepPoint>,
}

pub const SWEEP_HEADER: &str = "lambda\tDetER%\trelative_improvement_%";

impl SweepResult {
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{SWEEP_HEADER}\n");
        out.push_str(&format!(
            "baseline\t{:.1}\t{:.1}\n",
            self.baseline_detection_error_rate, 0.0
        ));
        for p in &self.points {
            out.push_str(&format!(
                "{}\t{:.1}\t{:.1}\n",
                p.lambda, p.detection_error_rate, p.relative_improvement
            ));
        }
        out
    }
}

/// `100·(baseline − x)/baseline`; zero when both are equal.
pub fn relative_improvement(baseline: f64, x: f64) -> f64 {
    if baseline == x {
        0.0
    } else {
        100.0 * (baseline - x) / baseline
    }
}

fn total(m: &DomainCounts) -> DetectionCounts {
    aggregate_over_domains(&m.values().copied().collect::<Vec<_>>())
}

/// Leave-one-out adversarial runs for every λ against one non-adversarial
/// baseline computed once.
pub fn run_lambda_sweep(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    grid: &[f64],
    dir: &Path,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Parameter("empty lambda grid".into()));
    }
    let baseline = total(&run_leave_one_out(
        cfg,
        corpus,
        TrainMode::Vad,
        cfg.model.lambda,
        &dir.join("baseline"),
    )?);
    sweep_against_baseline(cfg, corpus, baseline, grid, dir)
}

/// The sweep with a precomputed leave-one-out baseline (row D counts).
pub fn sweep_against_baseline(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    baseline: DetectionCounts,
    grid: &[f64],
    dir: &Path,
) -> Result<SweepResult> {
    if grid.is_empty() {
        return Err(Error::Parameter("empty lambda grid".into()));
    }
    create_dir(dir)?;
    let base_rate = detection_error_rate(&baseline)?;
    let mut points = Vec::new();
    for &lambda in grid {
        let counts = total(&run_leave_one_out(
            cfg,
            corpus,
            TrainMode::Adversarial,
            lambda,
            &dir.join(format!("lambda_{lambda}")),
        )?);
        let rate = detection_error_rate(&counts)?;
        points.push(SweepPoint {
            lambda,
            detection_error_rate: rate,
            relative_improvement: relative_improvement(base_rate, rate),
            counts,
        });
    }
    let result = SweepResult {
        baseline_detection_error_rate: base_rate,
        baseline,
        points,
    };
    write_text(&dir.join("sweep.tsv"), &result.to_tsv())?;
    write_json(&dir.join("run.json"), &result)?;
    Ok(result)
}

/// Consecutive non-overlapping chunks of every test file, labeled by
/// domain index.
pub fn domain_chunks(
    files: &[LabeledAudio],
    domains: &[String],
    chunk_samples: usize,
) -> Result<Vec<(Waveform, usize)>> {
    let mut out = Vec::new();
    for f in files {
        let d = domains
            .iter()
            .position(|x| x == &f.entry.domain)
            .ok_or_else(|| {
                Error::Parameter(format!("domain {:?} unknown to the model", f.entry.domain))
            })?;
        let mut start = 0;
        while start + chunk_samples <= f.audio.len() {
            out.push((f.audio.segment(start, chunk_samples), d));
            start += chunk_samples;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConfusionResult {
    pub epoch: usize,
    pub accuracy: f64,
    pub matrix: ConfusionMatrix,
}

/// Trains θ_f and θ_d on the domain loss alone over all in-domain training
/// files, then classifies test chunks with the final checkpoint.
pub fn run_confusion(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    dir: &Path,
) -> Result<ConfusionResult> {
    let splits = corpus.splits(&Protocol(SplitMode::InDomain))?;
    let records = train_model(
        cfg,
        &splits.train,
        &corpus.noise,
        TrainMode::Domain,
        cfg.model.lambda,
        dir,
    )?;
    let epoch = records
        .last()
        .map(|r| r.epoch)
        .ok_or_else(|| Error::Parameter("max_epochs is 0".into()))?;
    let model = VadModel::<f32>::load(&dir.join(checkpoint_name(epoch)))?;
    evaluate_confusion(
        &model,
        &splits.train.domains(),
        &load_labeled(&splits.test)?,
        epoch,
        dir,
    )
}

pub fn evaluate_confusion(
    model: &VadModel<f32>,
    domains: &[String],
    test: &[LabeledAudio],
    epoch: usize,
    dir: &Path,
) -> Result<ConfusionResult> {
    let chunks = domain_chunks(test, domains, model.chunk_samples())?;
    let refs: Vec<(&[f32], usize)> = chunks.iter().map(|(w, d)| (w.samples(), *d)).collect();
    let matrix = domain_confusion(model, &refs, domains.to_vec())?;
    let result = ConfusionResult {
        epoch,
        accuracy: matrix.accuracy(),
        matrix,
    };
    write_text(&dir.join("confusion.csv"), &result.matrix.to_csv())?;
    write_json(&dir.join("run.json"), &result)?;
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_literals_and_strings() {
        let mut t = toml::Table::new();
        apply_override(&mut t, "train.max_epochs=3").unwrap();
        apply_override(&mut t, "id=abc").unwrap();
        apply_override(&mut t, "lambda_grid=[0, 1.5]").unwrap();
        apply_override(&mut t, "model.sinc.filters=4").unwrap();
        let cfg: ExperimentConfig = toml::Value::Table(t).try_into().unwrap();
        assert_eq!(cfg.train.max_epochs, 3);
        assert_eq!(cfg.id, "abc");
        assert_eq!(cfg.lambda_grid, vec![0.0, 1.5]);
        assert_eq!(cfg.model.sinc.filters, 4);
        assert!(apply_override(&mut toml::Table::new(), "novalue").is_err());
        assert!(apply_override(&mut toml::Table::new(), "a..b=1").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(ExperimentConfig::load(None, &["bogus=1".into()]).is_err());
        assert!(ExperimentConfig::load(None, &["model.chunk_duration=1.0".into()]).is_err());
    }

    #[test]
    fn config_round_trip() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(cfg.train.max_epochs, 50);
    }

    #[test]
    fn protocol_names() {
        for s in ["in_domain", "leave_one_out:dom03", "single_domain:x"] {
            assert_eq!(s.parse::<Protocol>().unwrap().to_string(), s);
        }
        assert!("leave_one_out:".parse::<Protocol>().is_err());
        assert!("cross".parse::<Protocol>().is_err());
    }

    #[test]
    fn improvement_identity() {
        assert_eq!(relative_improvement(0.2, 0.2), 0.0);
        assert!((relative_improvement(0.134, 0.118) - 11.940298507462686).abs() < 1e-9);
    }

    #[test]
    fn matrix_rows_match_policies() {
        assert!(!MatrixRowId::B.adversarial() && MatrixRowId::C.adversarial());
        assert!(!MatrixRowId::D.adversarial() && MatrixRowId::E.adversarial());
        assert_eq!("e".parse::<MatrixRowId>().unwrap(), MatrixRowId::E);
        assert!("F".parse::<MatrixRowId>().is_err());
    }
}
