//! Detection error rate, dev-set selection of epoch and threshold, domain
//! aggregation and the domain confusion matrix.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::autograd::Scalar;
use crate::error::{Error, Result};
use crate::inference::{binarize, FrameScoreSequence};
use crate::model::VadModel;
use crate::timeline::Timeline;

const EXTENT_EPS: f64 = 1e-9;
const CONFUSION_BATCH: usize = 32;

/// Durations in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct DetectionCounts {
    pub false_alarm: f64,
    pub missed_detection: f64,
    pub total_speech: f64,
}

impl DetectionCounts {
    pub fn add(&self, other: &DetectionCounts) -> DetectionCounts {
        DetectionCounts {
            false_alarm: self.false_alarm + other.false_alarm,
            missed_detection: self.missed_detection + other.missed_detection,
            total_speech: self.total_speech + other.total_speech,
        }
    }

    fn percent(&self, v: f64) -> Result<f64> {
        if self.total_speech <= 0.0 {
            return Err(Error::UndefinedRate);
        }
        Ok(100.0 * v / self.total_speech)
    }

    pub fn false_alarm_rate(&self) -> Result<f64> {
        self.percent(self.false_alarm)
    }

    pub fn miss_rate(&self) -> Result<f64> {
        self.percent(self.missed_detection)
    }
}

/// `100·(FA + Miss) / total`.
pub fn detection_error_rate(c: &DetectionCounts) -> Result<f64> {
    c.percent(c.false_alarm + c.missed_detection)
}

/// False alarm, missed detection and reference speech over `[0, extent]`,
/// by a sweep over the merged region boundaries of both timelines.
pub fn detection_counts(
    reference: &Timeline,
    hypothesis: &Timeline,
    extent: f64,
) -> Result<DetectionCounts> {
    for (name, t) in [("reference", reference), ("hypothesis", hypothesis)] {
        if !t.within(extent + EXTENT_EPS) || t.regions().first().is_some_and(|r| r.0 < -EXTENT_EPS)
        {
            return Err(Error::Validation(format!(
                "{name} regions exceed the file extent [0, {extent}]"
            )));
        }
    }
    // (time, is_reference, is_start)
    let mut events: Vec<(f64, bool, bool)> =
        Vec::with_capacity(2 * (reference.len() + hypothesis.len()));
    for (t, is_ref) in [(reference, true), (hypothesis, false)] {
        for &(s, e) in t.regions() {
            events.push((s, is_ref, true));
            events.push((e, is_ref, false));
        }
    }
    events.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (mut in_ref, mut in_hyp) = (false, false);
    let mut last = 0.0;
    let mut c = DetectionCounts::default();
    for (time, is_ref, is_start) in events {
        let span = time - last;
        if span > 0.0 {
            match (in_ref, in_hyp) {
                (true, false) => c.missed_detection += span,
                (false, true) => c.false_alarm += span,
                _ => {}
            }
            if in_ref {
                c.total_speech += span;
            }
        }
        last = time;
        if is_ref {
            in_ref = is_start;
        } else {
            in_hyp = is_start;
        }
    }
    Ok(c)
}

/// Micro aggregate: componentwise sum of durations.
pub fn aggregate_over_domains(per_domain: &[DetectionCounts]) -> DetectionCounts {
    per_domain
        .iter()
        .fold(DetectionCounts::default(), |acc, c| acc.add(c))
}

/// Macro aggregate: unweighted mean of per-domain error rates.
pub fn macro_detection_error_rate(per_domain: &[DetectionCounts]) -> Result<f64> {
    if per_domain.is_empty() {
        return Err(Error::UndefinedRate);
    }
    let rates = per_domain
        .iter()
        .map(detection_error_rate)
        .collect::<Result<Vec<_>>>()?;
    Ok(rates.iter().sum::<f64>() / rates.len() as f64)
}

/// Thresholds `0, 1/steps, …, 1`.
pub fn sigma_grid(steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| i as f64 / steps as f64).collect()
}

/// Aggregated scores of one dev recording with its reference.
#[derive(Clone, Debug)]
pub struct ScoredFile {
    pub scores: FrameScoreSequence,
    pub reference: Timeline,
    pub duration: f64,
}

/// Summed counts over `files` for every threshold in `grid`.
pub fn evaluate_grid(files: &[ScoredFile], grid: &[f64]) -> Result<Vec<DetectionCounts>> {
    grid.iter()
        .map(|&sigma| {
            let mut total = DetectionCounts::default();
            for f in files {
                let hyp = binarize(&f.scores, sigma)?.clip(0.0, f.duration);
                total = total.add(&detection_counts(&f.reference, &hyp, f.duration)?);
            }
            Ok(total)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TuningResult {
    pub best_epoch: usize,
    pub best_sigma: f64,
    pub detection_error_rate: f64,
    pub counts: DetectionCounts,
}

/// Running argmin over (epoch, σ) pairs. Candidates must be offered in
/// increasing epoch order; ties keep the earlier epoch, then the smaller σ.
#[derive(Clone, Debug)]
pub struct Tuner {
    grid: Vec<f64>,
    best: Option<TuningResult>,
}

impl Tuner {
    pub fn new(grid: Vec<f64>) -> Result<Self> {
        if grid.is_empty() {
            return Err(Error::Parameter("threshold grid is empty".into()));
        }
        if let Some(s) = grid.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Parameter(format!("threshold {s} outside [0, 1]")));
        }
        let mut grid = grid;
        grid.sort_by(f64::total_cmp);
        grid.dedup();
        Ok(Tuner { grid, best: None })
    }

    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Scores one checkpoint's dev results; returns its per-σ counts.
    pub fn offer(&mut self, epoch: usize, files: &[ScoredFile]) -> Result<Vec<DetectionCounts>> {
        let counts = evaluate_grid(files, &self.grid)?;
        for (&sigma, c) in self.grid.iter().zip(&counts) {
            let rate = detection_error_rate(c)?;
            if self
                .best
                .as_ref()
                .is_none_or(|b| rate < b.detection_error_rate)
            {
                self.best = Some(TuningResult {
                    best_epoch: epoch,
                    best_sigma: sigma,
                    detection_error_rate: rate,
                    counts: *c,
                });
            }
        }
        Ok(counts)
    }

    pub fn finish(self) -> Result<TuningResult> {
        self.best
            .ok_or_else(|| Error::State("no checkpoint was evaluated".into()))
    }
}

/// Exhaustive selection over `(epoch, dev results)` candidates.
pub fn tune(candidates: &[(usize, Vec<ScoredFile>)], grid: &[f64]) -> Result<TuningResult> {
    if candidates.is_empty() {
        return Err(Error::Parameter("no checkpoints to tune".into()));
    }
    let mut order: Vec<&(usize, Vec<ScoredFile>)> = candidates.iter().collect();
    order.sort_by_key(|c| c.0);
    let mut tuner = Tuner::new(grid.to_vec())?;
    for (epoch, files) in order {
        tuner.offer(*epoch, files)?;
    }
    tuner.finish()
}

/// Rows are true domains, columns predicted domains.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn accuracy(&self) -> f64 {
        let diag: u64 = (0..self.counts.len()).map(|i| self.counts[i][i]).sum();
        diag as f64 / self.total().max(1) as f64
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            let _ = write!(out, ",{l}");
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(l);
            for c in row {
                let _ = write!(out, ",{c}");
            }
            out.push('\n');
        }
        out
    }
}

/// Index of the largest value; the first one on ties.
pub fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .fold(0, |best, (i, &x)| if x > v[best] { i } else { best })
}

/// Classifies labeled chunks with the domain branch.
pub fn domain_confusion<S: Scalar>(
    model: &VadModel<S>,
    chunks: &[(&[f32], usize)],
    labels: Vec<String>,
) -> Result<ConfusionMatrix> {
    let n = model.config().n_domains;
    if labels.len() != n {
        return Err(Error::Parameter(format!(
            "{} domain labels for a {n}-domain model",
            labels.len()
        )));
    }
    let mut m = ConfusionMatrix::new(labels);
    for group in chunks.chunks(CONFUSION_BATCH) {
        let refs: Vec<&[f32]> = group.iter().map(|c| c.0).collect();
        for (out, &(_, truth)) in model.domain_outputs(&refs)?.iter().zip(group) {
            if truth >= n {
                return Err(Error::Parameter(format!(
                    "domain index {truth} beyond {n} domains"
                )));
            }
            m.record(truth, argmax(out));
        }
    }
    Ok(m)
}

/// One line of an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub scope: String,
    pub counts: DetectionCounts,
}

fn fmt_rate(r: Result<f64>) -> String {
    r.map_or_else(|_| "N/A".to_string(), |v| format!("{v:.1}"))
}

impl ReportRow {
    /// `scope<TAB>DetER%<TAB>FA%<TAB>Miss%<TAB>total_s`.
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{:.3}",
            self.scope,
            fmt_rate(detection_error_rate(&self.counts)),
            fmt_rate(self.counts.false_alarm_rate()),
            fmt_rate(self.counts.miss_rate()),
            self.counts.total_speech
        )
    }
}

pub const REPORT_HEADER: &str = "scope\tDetER%\tFA%\tMiss%\ttotal_s";

pub fn write_report(path: &Path, rows: &[ReportRow]) -> Result<()> {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tl(r: &[(f64, f64)]) -> Timeline {
        Timeline::new(r.to_vec()).unwrap()
    }

    #[test]
    fn counting_examples() {
        let r = tl(&[(1.0, 3.0)]);
        let c = detection_counts(&r, &r, 5.0).unwrap();
        assert_eq!((c.false_alarm, c.missed_detection), (0.0, 0.0));
        let c = detection_counts(&r, &Timeline::empty(), 5.0).unwrap();
        assert_eq!(
            (c.false_alarm, c.missed_detection, c.total_speech),
            (0.0, 2.0, 2.0)
        );
        assert_eq!(detection_error_rate(&c).unwrap(), 100.0);
        let c = detection_counts(&r, &tl(&[(2.0, 4.0)]), 5.0).unwrap();
        assert_eq!(
            (c.false_alarm, c.missed_detection, c.total_speech),
            (1.0, 1.0, 2.0)
        );
        assert_eq!(detection_error_rate(&c).unwrap(), 100.0);
        assert!(detection_counts(&r, &tl(&[(4.0, 6.0)]), 5.0).is_err());
    }

    #[test]
    fn undefined_rate_is_an_error() {
        let c = detection_counts(&Timeline::empty(), &tl(&[(0.0, 1.0)]), 2.0).unwrap();
        assert!(matches!(
            detection_error_rate(&c),
            Err(Error::UndefinedRate)
        ));
        let row = ReportRow {
            scope: "x".into(),
            counts: c,
        };
        assert_eq!(row.to_tsv(), "x\tN/A\tN/A\tN/A\t0.000");
    }

    #[test]
    fn aggregation_examples() {
        let a = DetectionCounts {
            false_alarm: 1.0,
            missed_detection: 0.0,
            total_speech: 10.0,
        };
        let b = DetectionCounts {
            false_alarm: 1.0,
            missed_detection: 1.0,
            total_speech: 10.0,
        };
        assert!(
            (detection_error_rate(&aggregate_over_domains(&[a, b])).unwrap() - 15.0).abs() < 1e-12
        );
        let a = DetectionCounts {
            false_alarm: 0.5,
            missed_detection: 0.5,
            total_speech: 1.0,
        };
        let b = DetectionCounts {
            false_alarm: 0.0,
            missed_detection: 0.0,
            total_speech: 9.0,
        };
        assert!(
            (detection_error_rate(&aggregate_over_domains(&[a, b])).unwrap() - 10.0).abs() < 1e-12
        );
        assert!((macro_detection_error_rate(&[a, b]).unwrap() - 50.0).abs() < 1e-12);
        assert_eq!(aggregate_over_domains(&[a]), a);
    }

    #[test]
    fn grid_has_101_points() {
        let g = sigma_grid(100);
        assert_eq!(g.len(), 101);
        assert_eq!((g[0], g[50], g[100]), (0.0, 0.5, 1.0));
    }

    #[test]
    fn tuning_prefers_earlier_epoch_then_smaller_sigma() {
        let file = ScoredFile {
            scores: FrameScoreSequence::new(vec![0.0, 0.8, 0.8, 0.0], 1.0, 0.5).unwrap(),
            reference: tl(&[(1.0, 3.0)]),
            duration: 4.0,
        };
        let res = tune(
            &[(3, vec![file.clone()]), (1, vec![file.clone()])],
            &[0.7, 0.5, 0.9],
        )
        .unwrap();
        assert_eq!(
            (res.best_epoch, res.best_sigma, res.detection_error_rate),
            (1, 0.5, 0.0)
        );
        let one = tune(&[(7, vec![file])], &[0.5]).unwrap();
        assert_eq!((one.best_epoch, one.best_sigma), (7, 0.5));
    }

    #[test]
    fn confusion_csv() {
        let mut m = ConfusionMatrix::new(vec!["a".into(), "b".into()]);
        m.record(0, 0);
        m.record(0, 1);
        m.record(1, 1);
        assert_eq!(m.row_sums(), vec![2, 1]);
        assert!((m.accuracy() - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(m.to_csv(), "true\\predicted,a,b\na,1,1\nb,0,1\n");
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
    }
}
