use std::path::Path;

use crate::dsp::{to_pcm16, AudioClip};
use crate::error::{Error, Result};

fn format_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

fn hound_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => format_err(path, other),
    }
}

/// Reads a mono 16-bit PCM WAV file, scaling samples by `1/32768`.
pub fn read_wav(path: &Path) -> Result<AudioClip> {
    let reader = hound::WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(format_err(
            path,
            format!(
                "unsupported encoding {:?} {}-bit; expected 16-bit PCM",
                spec.sample_format, spec.bits_per_sample
            ),
        ));
    }
    if spec.channels != 1 {
        return Err(format_err(
            path,
            format!("{} channels; expected mono", spec.channels),
        ));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| f64::from(v) / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| hound_err(path, e))?;
    if samples.is_empty() {
        return Err(format_err(path, "no samples"));
    }
    AudioClip::new(samples, spec.sample_rate)
}

/// Writes `clip` as mono 16-bit PCM with a canonical 44-byte header.
/// Samples outside `[-1, 1]` are clamped; their count is returned.
pub fn write_wav(path: &Path, clip: &AudioClip) -> Result<usize> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate(),
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| hound_err(path, e))?;
    let mut clamped = 0usize;
    for &s in clip.samples() {
        clamped += usize::from(!(-1.0..=1.0).contains(&s));
        writer
            .write_sample(to_pcm16(s))
            .map_err(|e| hound_err(path, e))?;
    }
    writer.finalize().map_err(|e| hound_err(path, e))?;
    if clamped > 0 {
        log::warn!("{}: clamped {clamped} samples to [-1, 1]", path.display());
    }
    Ok(clamped)
}
