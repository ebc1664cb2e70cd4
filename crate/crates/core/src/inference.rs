//! Whole-file scoring with overlapping windows, score averaging and
//! threshold binarization.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Scalar;
use crate::error::{Error, Result};
use crate::frontend::Waveform;
use crate::model::VadModel;
pub use crate::timeline::Timeline;

/// Windows scored together in one forward pass.
const WINDOW_BATCH: usize = 32;
const TIME_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlidingWindowConfig {
    /// Window length in seconds; must equal the training chunk duration.
    pub duration: f64,
    pub step: f64,
    pub threshold: f64,
}

impl Default for SlidingWindowConfig {
    fn default() -> Self {
        SlidingWindowConfig {
            duration: 2.0,
            step: 0.5,
            threshold: 0.5,
        }
    }
}

impl SlidingWindowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.step > 0.0 && self.step <= self.duration) {
            return Err(Error::Parameter(format!(
                "window step must satisfy 0 < step <= duration, got step {} and duration {}",
                self.step, self.duration
            )));
        }
        check_threshold(self.threshold)
    }
}

fn check_threshold(sigma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&sigma) {
        return Err(Error::Parameter(format!(
            "threshold must lie in [0, 1], got {sigma}"
        )));
    }
    Ok(())
}

/// Speech probability per frame; frame `i` is centered at
/// `origin + i·frame_period`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameScoreSequence {
    pub scores: Vec<f64>,
    pub frame_period: f64,
    pub origin: f64,
}

impl FrameScoreSequence {
    pub fn new(scores: Vec<f64>, frame_period: f64, origin: f64) -> Result<Self> {
        if !(frame_period > 0.0) {
            return Err(Error::Parameter(format!(
                "frame period must be positive, got {frame_period}"
            )));
        }
        if let Some(s) = scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(Error::Validation(format!("score {s} outside [0, 1]")));
        }
        Ok(FrameScoreSequence {
            scores,
            frame_period,
            origin,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn center(&self, i: usize) -> f64 {
        self.origin + i as f64 * self.frame_period
    }
}

/// Window start times: `0, step, 2·step, …` plus a final window ending at
/// `file_duration` when the regular grid stops short of it.
pub fn slide_windows(file_duration: f64, cfg: &SlidingWindowConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if file_duration + TIME_EPS < cfg.duration {
        return Err(Error::InvalidLength(format!(
            "file of {file_duration} s is shorter than one {} s window",
            cfg.duration
        )));
    }
    let mut out = Vec::new();
    let mut k = 0usize;
    loop {
        let start = k as f64 * cfg.step;
        if start + cfg.duration > file_duration + TIME_EPS {
            break;
        }
        out.push(start);
        k += 1;
    }
    let last_end = out.last().map_or(0.0, |s| s + cfg.duration);
    if last_end < file_duration - TIME_EPS {
        out.push(file_duration - cfg.duration);
    }
    Ok(out)
}

/// Window starts in samples; same rule as [`slide_windows`].
fn window_starts(len: usize, window: usize, step: usize) -> Vec<usize> {
    let mut out: Vec<usize> = (0..)
        .map(|k| k * step)
        .take_while(|s| s + window <= len)
        .collect();
    if out.last().is_none_or(|s| s + window < len) {
        out.push(len.saturating_sub(window));
    }
    out.dedup();
    out
}

/// Averages overlapping window scores on a global frame grid anchored at
/// time 0. Each window frame contributes to the grid frame nearest its
/// center. Grid frames inside `[0, file_duration)` that no window frame
/// maps to take the value of the nearest covered grid frame (the earlier
/// one on ties).
pub fn aggregate_scores(
    windows: &[(f64, FrameScoreSequence)],
    file_duration: f64,
) -> Result<FrameScoreSequence> {
    let Some((_, first)) = windows.first() else {
        return Err(Error::InvalidLength("no window scores to aggregate".into()));
    };
    let p = first.frame_period;
    if windows
        .iter()
        .any(|(_, w)| (w.frame_period - p).abs() > TIME_EPS * p)
    {
        return Err(Error::Parameter(
            "windows disagree on the frame period".into(),
        ));
    }
    let frames = ((file_duration / p).ceil() as usize).max(1);
    let mut sum = vec![0.0f64; frames];
    let mut count = vec![0usize; frames];
    for (offset, w) in windows {
        for (i, &s) in w.scores.iter().enumerate() {
            let g = ((offset + w.center(i)) / p).round();
            if g >= 0.0 && (g as usize) < frames {
                sum[g as usize] += s;
                count[g as usize] += 1;
            }
        }
    }
    let covered: Vec<usize> = (0..frames).filter(|&g| count[g] > 0).collect();
    if covered.is_empty() {
        return Err(Error::InvalidLength("windows do not cover the file".into()));
    }
    let mean: Vec<f64> = (0..frames)
        .map(|g| {
            if count[g] > 0 {
                sum[g] / count[g] as f64
            } else {
                0.0
            }
        })
        .collect();
    let mut scores = mean.clone();
    for g in 0..frames {
        if count[g] == 0 {
            let k = covered.partition_point(|&c| c < g);
            let nearest = match (k.checked_sub(1).map(|i| covered[i]), covered.get(k)) {
                (Some(a), Some(&b)) => {
                    if g - a <= b - g {
                        a
                    } else {
                        b
                    }
                }
                (Some(a), None) => a,
                (None, Some(&b)) => b,
                (None, None) => unreachable!("covered is non-empty"),
            };
            scores[g] = mean[nearest];
        }
    }
    Ok(FrameScoreSequence {
        scores,
        frame_period: p,
        origin: 0.0,
    })
}

/// Maximal runs of frames scoring strictly above `sigma`, each spanning
/// half a frame period around the first and last frame centers.
pub fn binarize(scores: &FrameScoreSequence, sigma: f64) -> Result<Timeline> {
    check_threshold(sigma)?;
    let half = scores.frame_period / 2.0;
    let mut regions = Vec::new();
    let mut run: Option<usize> = None;
    for i in 0..=scores.len() {
        let on = i < scores.len() && scores.scores[i] > sigma;
        match (on, run) {
            (true, None) => run = Some(i),
            (false, Some(start)) => {
                regions.push((scores.center(start) - half, scores.center(i - 1) + half));
                run = None;
            }
            _ => {}
        }
    }
    Timeline::new(regions)
}

/// Aggregated per-frame speech scores of a whole recording.
pub fn score_file<S: Scalar>(
    model: &VadModel<S>,
    w: &Waveform,
    cfg: &SlidingWindowConfig,
) -> Result<FrameScoreSequence> {
    cfg.validate()?;
    let rate = model.config().sample_rate();
    if w.sample_rate() != rate {
        return Err(Error::Validation(format!(
            "audio sampled at {} Hz, model expects {rate} Hz",
            w.sample_rate()
        )));
    }
    if (cfg.duration - model.config().chunk_duration).abs() > TIME_EPS {
        return Err(Error::Parameter(format!(
            "window duration {} s differs from the model chunk {} s",
            cfg.duration,
            model.config().chunk_duration
        )));
    }
    let window = model.chunk_samples();
    let step = ((cfg.step * rate as f64).round() as usize).max(1);
    if w.len() < window {
        log::info!(
            "zero-padding a {:.3} s recording to one window",
            w.duration()
        );
    }
    let starts = window_starts(w.len().max(window), window, step);
    let geometry = model.geometry();
    let mut windows = Vec::with_capacity(starts.len());
    for group in starts.chunks(WINDOW_BATCH) {
        let chunks: Vec<Waveform> = group.iter().map(|&s| w.segment(s, window)).collect();
        let refs: Vec<&[f32]> = chunks.iter().map(Waveform::samples).collect();
        for (&s, scores) in group.iter().zip(model.speech_scores(&refs)?) {
            let seq = FrameScoreSequence {
                scores,
                frame_period: geometry.frame_period,
                origin: geometry.origin,
            };
            windows.push((s as f64 / rate as f64, seq));
        }
    }
    aggregate_scores(&windows, w.duration())
}

/// Scores and binarized speech regions of a recording, clipped to its extent.
pub fn apply_file<S: Scalar>(
    model: &VadModel<S>,
    w: &Waveform,
    cfg: &SlidingWindowConfig,
) -> Result<(FrameScoreSequence, Timeline)> {
    let scores = score_file(model, w, cfg)?;
    let timeline = binarize(&scores, cfg.threshold)?.clip(0.0, w.duration());
    Ok((scores, timeline))
}

/// Writes `time_seconds<TAB>score` lines.
pub fn write_scores(path: &Path, scores: &FrameScoreSequence) -> Result<()> {
    let mut out = String::with_capacity(scores.len() * 16);
    for (i, s) in scores.scores.iter().enumerate() {
        out.push_str(&format!("{:.4}\t{s:.6}\n", scores.center(i)));
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn win(duration: f64, step: f64) -> SlidingWindowConfig {
        SlidingWindowConfig {
            duration,
            step,
            threshold: 0.5,
        }
    }

    #[test]
    fn window_enumeration() {
        assert_eq!(
            slide_windows(3.0, &win(2.0, 0.5)).unwrap(),
            vec![0.0, 0.5, 1.0]
        );
        assert_eq!(
            slide_windows(6.0, &win(2.0, 2.0)).unwrap(),
            vec![0.0, 2.0, 4.0]
        );
        assert_eq!(slide_windows(2.0, &win(2.0, 0.5)).unwrap(), vec![0.0]);
        assert_eq!(
            slide_windows(3.25, &win(2.0, 0.5)).unwrap(),
            vec![0.0, 0.5, 1.0, 1.25]
        );
        assert!(slide_windows(1.0, &win(2.0, 0.5)).is_err());
        assert!(slide_windows(3.0, &win(2.0, 2.5)).is_err());
        assert_eq!(window_starts(48000, 32000, 8000), vec![0, 8000, 16000]);
        assert_eq!(window_starts(20000, 32000, 8000), vec![0]);
        assert_eq!(
            window_starts(51200, 32000, 8000),
            vec![0, 8000, 16000, 19200]
        );
    }

    #[test]
    fn single_window_is_identity() {
        let s = FrameScoreSequence::new(vec![0.1, 0.7, 0.3, 0.9], 0.25, 0.0).unwrap();
        let out = aggregate_scores(&[(0.0, s.clone())], 1.0).unwrap();
        assert_eq!(out, s);
    }

    #[test]
    fn two_identical_windows_average() {
        let a = FrameScoreSequence::new(vec![0.2, 0.4], 0.5, 0.0).unwrap();
        let b = FrameScoreSequence::new(vec![0.6, 0.0], 0.5, 0.0).unwrap();
        let out = aggregate_scores(&[(0.0, a), (0.0, b)], 1.0).unwrap();
        assert_eq!(out.scores, vec![0.4, 0.2]);
    }

    #[test]
    fn binarize_runs() {
        let s = FrameScoreSequence::new(vec![0.9, 0.9, 0.1, 0.9], 0.1, 0.05).unwrap();
        let t = binarize(&s, 0.5).unwrap();
        let r = t.regions();
        assert_eq!(r.len(), 2);
        assert!((r[0].1 - r[0].0 - 0.2).abs() < 1e-12);
        assert!((r[1].1 - r[1].0 - 0.1).abs() < 1e-12);
        assert!((r[1].0 - r[0].1 - 0.1).abs() < 1e-12);
        assert!(binarize(
            &FrameScoreSequence::new(vec![0.0; 5], 0.1, 0.0).unwrap(),
            0.5
        )
        .unwrap()
        .is_empty());
        let ones = FrameScoreSequence::new(vec![1.0; 5], 0.1, 0.05).unwrap();
        assert_eq!(binarize(&ones, 0.5).unwrap().len(), 1);
        assert!(binarize(&ones, 1.0).unwrap().is_empty());
        let zeros = FrameScoreSequence::new(vec![0.0, 0.2], 0.1, 0.05).unwrap();
        assert_eq!(binarize(&zeros, 0.0).unwrap().len(), 1);
    }
}
