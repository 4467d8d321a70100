use std::fs::File;
use std::io::{BufReader, Read};
use std::path::Path;

use super::Waveform;
use crate::error::{Error, Result};

/// Writes 16-bit PCM mono. Samples are clipped to `[-1, 1]` first.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut out = hound::WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in w.samples() {
        out.write_sample(quantize_i16(s)).map_err(wav_err)?;
    }
    out.finalize().map_err(wav_err)
}

fn quantize_i16(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32767.0).round() as i16
}

/// Reads a 16-bit PCM mono WAV file.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let mut raw = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut raw)?;
    check_header(&raw)?;
    let reader = hound::WavReader::new(raw.as_slice()).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::format("channels", format!("expected mono, found {} channels", spec.channels)));
    }
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::format("audio_format", "expected integer PCM"));
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::format(
            "bits_per_sample",
            format!("expected 16, found {}", spec.bits_per_sample),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32767.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::format("data", format!("truncated sample data: {e}")))?;
    Waveform::new(samples, spec.sample_rate)
}

/// Validates the RIFF framing so truncation is reported against the field
/// it cut off rather than as a generic decoder failure.
fn check_header(raw: &[u8]) -> Result<()> {
    if raw.len() < 12 {
        return Err(Error::format("riff_header", format!("file is {} bytes", raw.len())));
    }
    if &raw[0..4] != b"RIFF" || &raw[8..12] != b"WAVE" {
        return Err(Error::format("riff_header", "missing RIFF/WAVE magic"));
    }
    let mut pos = 12;
    let mut seen_fmt = false;
    while pos + 8 <= raw.len() {
        let id = &raw[pos..pos + 4];
        let size = u32::from_le_bytes(raw[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if body + 16 > raw.len() {
                return Err(Error::format("fmt", "chunk truncated"));
            }
            seen_fmt = true;
        } else if id == b"data" {
            if !seen_fmt {
                return Err(Error::format("fmt", "data chunk before fmt chunk"));
            }
            if body + size > raw.len() {
                return Err(Error::format(
                    "data",
                    format!("declares {size} bytes, {} present", raw.len() - body),
                ));
            }
            return Ok(());
        }
        pos = body + size + (size & 1);
    }
    Err(Error::format(if seen_fmt { "data" } else { "fmt" }, "chunk missing"))
}

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::FormatError(m) => Error::format("header", m),
        hound::Error::Unsupported => Error::format("audio_format", "unsupported encoding"),
        other => Error::format("header", other.to_string()),
    }
}
