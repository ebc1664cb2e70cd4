pub mod manifest;
pub mod segments;
pub mod synth;
pub mod wav;

use std::path::Path;

pub use manifest::{make_splits, CorpusManifest, ManifestEntry, Split, SplitMode, Splits};
pub use segments::{parse_segments, write_segments, SegmentAnnotation};
pub use synth::{generate_synthetic_corpus, SynthSpec};
pub use wav::{read_wav, write_wav, SampleFormat};

use crate::error::{Error, Result};
use crate::frontend::Waveform;
use crate::training::TrainingFile;

/// Audio and reference regions of one manifest entry. Regions must lie
/// within the audio.
pub fn load_entry(
    manifest: &CorpusManifest,
    entry: &ManifestEntry,
) -> Result<(Waveform, SegmentAnnotation)> {
    let audio = read_wav(&manifest.audio_path(entry))?;
    let ann = parse_segments(&manifest.annotation_path(entry))?;
    if ann.uri != entry.uri && !ann.regions.is_empty() {
        return Err(Error::Validation(format!(
            "annotation uri {:?} does not match {:?}",
            ann.uri, entry.uri
        )));
    }
    if let Some(&(_, end)) = ann.regions.regions().last() {
        if end > audio.duration() + 1e-9 {
            return Err(Error::Validation(format!(
                "{}: region ends at {end} s after the audio ({} s)",
                entry.uri,
                audio.duration()
            )));
        }
    }
    Ok((
        audio,
        SegmentAnnotation {
            uri: entry.uri.clone(),
            regions: ann.regions,
        },
    ))
}

/// Loads every entry of `manifest`, indexing domains by position in
/// `domains`.
pub fn load_training_files(
    manifest: &CorpusManifest,
    domains: &[String],
) -> Result<Vec<TrainingFile>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let domain = domains.iter().position(|d| d == &e.domain).ok_or_else(|| {
                Error::Parameter(format!("domain {:?} is not in the domain list", e.domain))
            })?;
            let (audio, ann) = load_entry(manifest, e)?;
            Ok(TrainingFile {
                uri: e.uri.clone(),
                audio,
                speech: ann.regions,
                domain,
            })
        })
        .collect()
}

/// Every `.wav` file in `dir`, in file-name order.
pub fn load_noise_bank(dir: &Path) -> Result<Vec<Waveform>> {
    let rd = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")) {
            paths.push(p);
        }
    }
    paths.sort();
    paths.iter().map(|p| read_wav(p)).collect()
}
