use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::timeline::Timeline;

pub const SPEECH_LABEL: &str = "speech";

/// Reference speech regions of one recording.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentAnnotation {
    pub uri: String,
    pub regions: Timeline,
}

/// Parses `uri<TAB>start<TAB>end<TAB>speech` lines. Blank lines and lines
/// starting with `#` are ignored. All lines must share one uri; an empty
/// file yields `fallback_uri` with no regions.
pub fn parse_segments_str(
    text: &str,
    path: &Path,
    fallback_uri: &str,
) -> Result<SegmentAnnotation> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut uri: Option<String> = None;
    let mut regions = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.trim_end_matches('\r');
        if trimmed.trim().is_empty() || trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        let [u, s, e, label] = fields[..] else {
            return Err(parse_err(
                line,
                format!("expected 4 tab-separated fields, found {}", fields.len()),
            ));
        };
        if label != SPEECH_LABEL {
            return Err(parse_err(line, format!("unknown label {label:?}")));
        }
        let num = |v: &str, what: &str| {
            v.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| parse_err(line, format!("bad {what} time {v:?}")))
        };
        let (start, end) = (num(s, "start")?, num(e, "end")?);
        if end <= start {
            return Err(Error::Validation(format!(
                "{}:{line}: end {end} is not after start {start}",
                path.display()
            )));
        }
        match &uri {
            Some(prev) if prev != u => {
                return Err(parse_err(line, format!("uri {u:?} differs from {prev:?}")));
            }
            None => uri = Some(u.to_string()),
            _ => {}
        }
        regions.push((start, end));
    }
    Ok(SegmentAnnotation {
        uri: uri.unwrap_or_else(|| fallback_uri.to_string()),
        regions: Timeline::new(regions)?,
    })
}

pub fn parse_segments(path: &Path) -> Result<SegmentAnnotation> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or_default();
    parse_segments_str(&text, path, stem)
}

pub fn format_segments(uri: &str, timeline: &Timeline) -> String {
    let mut out = String::new();
    for &(s, e) in timeline.regions() {
        let _ = writeln!(out, "{uri}\t{s}\t{e}\t{SPEECH_LABEL}");
    }
    out
}

pub fn write_segments(path: &Path, uri: &str, timeline: &Timeline) -> Result<()> {
    std::fs::write(path, format_segments(uri, timeline)).map_err(|e| Error::io(path, e))
}
