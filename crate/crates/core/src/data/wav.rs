//! RIFF/WAVE reading and writing for mono PCM16 and IEEE float32 audio.

use std::path::Path;

use crate::error::{Error, Result};
use crate::frontend::Waveform;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum WavError {
    #[error("not a RIFF/WAVE file")]
    BadMagic,
    #[error("unsupported codec: format tag {format_tag:#06x}, {bits} bits per sample")]
    UnsupportedCodec { format_tag: u16, bits: u16 },
    #[error("expected mono audio, found {0} channels")]
    MultiChannel(u16),
    #[error("truncated {0} chunk")]
    Truncated(&'static str),
    #[error("missing {0} chunk")]
    MissingChunk(&'static str),
    #[error("invalid header: {0}")]
    InvalidHeader(&'static str),
    #[error("non-finite sample at index {0}")]
    NonFiniteSample(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    Pcm16,
    Float32,
}

const FORMAT_PCM: u16 = 1;
const FORMAT_FLOAT: u16 = 3;
const FORMAT_EXTENSIBLE: u16 = 0xFFFE;

fn u16_at(b: &[u8], i: usize) -> u16 {
    u16::from_le_bytes([b[i], b[i + 1]])
}

fn u32_at(b: &[u8], i: usize) -> u32 {
    u32::from_le_bytes(b[i..i + 4].try_into().unwrap())
}

struct Fmt {
    format: SampleFormat,
    sample_rate: u32,
}

fn parse_fmt(body: &[u8]) -> Result<Fmt, WavError> {
    if body.len() < 16 {
        return Err(WavError::Truncated("fmt"));
    }
    let mut tag = u16_at(body, 0);
    let channels = u16_at(body, 2);
    let sample_rate = u32_at(body, 4);
    let block_align = u16_at(body, 12);
    let bits = u16_at(body, 14);
    if tag == FORMAT_EXTENSIBLE {
        if body.len() < 26 {
            return Err(WavError::Truncated("fmt"));
        }
        tag = u16_at(body, 24);
    }
    if channels != 1 {
        return Err(WavError::MultiChannel(channels));
    }
    if sample_rate == 0 {
        return Err(WavError::InvalidHeader("zero sample rate"));
    }
    let format = match (tag, bits) {
        (FORMAT_PCM, 16) => SampleFormat::Pcm16,
        (FORMAT_FLOAT, 32) => SampleFormat::Float32,
        (format_tag, bits) => return Err(WavError::UnsupportedCodec { format_tag, bits }),
    };
    if block_align as usize != bits as usize / 8 {
        return Err(WavError::InvalidHeader(
            "block alignment does not match sample width",
        ));
    }
    Ok(Fmt {
        format,
        sample_rate,
    })
}

/// Decodes a mono PCM16 or float32 WAVE byte stream. Unknown chunks are skipped.
pub fn decode_wav(bytes: &[u8]) -> Result<Waveform, WavError> {
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(WavError::BadMagic);
    }
    let mut pos = 12;
    let mut fmt: Option<Fmt> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32_at(bytes, pos + 4) as usize;
        let body_start = pos + 8;
        let body_end = body_start
            .checked_add(size)
            .ok_or(WavError::Truncated("chunk"))?;
        match id {
            b"fmt " => {
                if body_end > bytes.len() {
                    return Err(WavError::Truncated("fmt"));
                }
                fmt = Some(parse_fmt(&bytes[body_start..body_end])?);
            }
            b"data" => {
                let fmt = fmt.ok_or(WavError::MissingChunk("fmt"))?;
                if body_end > bytes.len() {
                    return Err(WavError::Truncated("data"));
                }
                let body = &bytes[body_start..body_end];
                let samples: Vec<f32> = match fmt.format {
                    SampleFormat::Pcm16 => {
                        if body.len() % 2 != 0 {
                            return Err(WavError::Truncated("data"));
                        }
                        body.chunks_exact(2)
                            .map(|c| i16::from_le_bytes([c[0], c[1]]) as f32 / 32768.0)
                            .collect()
                    }
                    SampleFormat::Float32 => {
                        if body.len() % 4 != 0 {
                            return Err(WavError::Truncated("data"));
                        }
                        let mut out = Vec::with_capacity(body.len() / 4);
                        for (i, c) in body.chunks_exact(4).enumerate() {
                            let v = f32::from_le_bytes(c.try_into().unwrap());
                            if !v.is_finite() {
                                return Err(WavError::NonFiniteSample(i));
                            }
                            out.push(v.clamp(-1.0, 1.0));
                        }
                        out
                    }
                };
                return Ok(Waveform::new_unchecked(samples, fmt.sample_rate));
            }
            _ => {}
        }
        // Chunks are word-aligned.
        pos = body_end + (size & 1);
    }
    Err(if fmt.is_some() {
        WavError::MissingChunk("data")
    } else {
        WavError::MissingChunk("fmt")
    })
}

/// Encodes a waveform as a canonical 44-byte-header WAVE stream.
pub fn encode_wav(w: &Waveform, format: SampleFormat) -> Vec<u8> {
    let (tag, width) = match format {
        SampleFormat::Pcm16 => (FORMAT_PCM, 2u16),
        SampleFormat::Float32 => (FORMAT_FLOAT, 4u16),
    };
    let data_len = w.samples().len() * width as usize;
    let mut out = Vec::with_capacity(44 + data_len + 1);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len + (data_len & 1)) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVE");
    out.extend_from_slice(b"fmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&w.sample_rate().to_le_bytes());
    out.extend_from_slice(&(w.sample_rate() * width as u32).to_le_bytes());
    out.extend_from_slice(&width.to_le_bytes());
    out.extend_from_slice(&(width * 8).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for &s in w.samples() {
        match format {
            SampleFormat::Pcm16 => {
                let q = (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                out.extend_from_slice(&q.to_le_bytes());
            }
            SampleFormat::Float32 => out.extend_from_slice(&s.to_le_bytes()),
        }
    }
    out
}

pub fn read_wav(path: &Path) -> Result<Waveform> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_wav(&bytes).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))
}

pub fn write_wav(path: &Path, w: &Waveform, format: SampleFormat) -> Result<()> {
    std::fs::write(path, encode_wav(w, format)).map_err(|e| Error::io(path, e))
}

/// Sample count and sample rate of a WAV file.
pub fn probe_wav(path: &Path) -> Result<(usize, u32)> {
    let w = read_wav(path)?;
    Ok((w.samples().len(), w.sample_rate()))
}
