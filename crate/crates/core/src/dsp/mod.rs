//! Audio containers, MDCT analysis/synthesis and differentiable MFCCs.

mod cmn;
mod mdct;
mod mfcc;
mod vad;

pub use cmn::{sliding_cmn, SlidingCmn};
pub use mdct::{ImdctOp, Mdct, MdctSpectrogram};
pub use mfcc::{
    dct_matrix, dft_power_matrices, mel_filterbank, mfcc, FeatureMatrix, FrontEnd, MfccConfig,
    MfccPipeline,
};
pub use vad::{energy_vad_mask, VadMask};

pub(crate) use mdct::mean_std;

use crate::error::{contract, Result};
use crate::tensor::Tensor;

/// Sampling rate every pipeline stage in this crate expects.
pub const SAMPLE_RATE: u32 = 8000;

/// Mono waveform with samples nominally in [-1, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        contract!(!samples.is_empty(), "audio clip has no samples");
        contract!(sample_rate > 0, "sample rate must be positive");
        contract!(
            samples.iter().all(|s| s.is_finite()),
            "audio clip contains non-finite samples"
        );
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<f64> {
        self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Clamps to [-1, 1] and rounds to the nearest 16-bit PCM level, which is
    /// exactly what survives a WAV round trip.
    pub fn quantize_pcm16(&self) -> AudioClip {
        AudioClip {
            samples: self
                .samples
                .iter()
                .map(|&s| f64::from(to_pcm16(s)) / 32768.0)
                .collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Symmetric PCM16 quantization of one sample, clamping to `[-1, 1]` and
/// rounding half away from zero.
pub fn to_pcm16(s: f64) -> i16 {
    (s.clamp(-1.0, 1.0) * 32768.0)
        .round()
        .clamp(-32768.0, 32767.0) as i16
}

/// Number of full frames of `win_len` at `hop` in `len` samples.
pub fn frame_count(len: usize, win_len: usize, hop: usize) -> usize {
    if len < win_len {
        0
    } else {
        1 + (len - win_len) / hop
    }
}

/// Flat gather indices that cut `len` samples into `frames x win_len`.
pub(crate) fn frame_indices(len: usize, win_len: usize, hop: usize) -> Vec<usize> {
    let frames = frame_count(len, win_len, hop);
    (0..frames)
        .flat_map(|t| t * hop..t * hop + win_len)
        .collect()
}

/// Splits `clip` into `frames x win_len` overlapping frames; a trailing
/// partial frame is dropped.
pub fn frame_signal(clip: &AudioClip, win_len: usize, hop: usize) -> Result<Tensor> {
    contract!(
        win_len > 0 && hop > 0,
        "frame length and hop must be positive"
    );
    let frames = frame_count(clip.len(), win_len, hop);
    contract!(
        frames > 0,
        "clip of {} samples is shorter than one {win_len}-sample frame",
        clip.len()
    );
    let data = frame_indices(clip.len(), win_len, hop)
        .into_iter()
        .map(|i| clip.samples[i])
        .collect();
    Tensor::new(&[frames, win_len], data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_rejects_empty_and_nan() {
        assert!(AudioClip::new(vec![], 8000).is_err());
        assert!(AudioClip::new(vec![0.0, f64::NAN], 8000).is_err());
    }

    #[test]
    fn framing_counts_and_content() {
        let clip = AudioClip::new((0..1000).map(f64::from).collect(), 8000).unwrap();
        let f = frame_signal(&clip, 200, 80).unwrap();
        assert_eq!(f.shape(), &[11, 200]);
        assert_eq!(f.at(&[3, 5]), 245.0);
        assert_eq!(frame_count(32000, 200, 80), 398);
        assert_eq!(frame_count(199, 200, 80), 0);
        assert!(frame_signal(&AudioClip::new(vec![0.0; 10], 8000).unwrap(), 200, 80).is_err());
    }

    #[test]
    fn pcm16_quantization_levels() {
        assert_eq!(to_pcm16(1.0), 32767);
        assert_eq!(to_pcm16(-1.5), -32768);
        assert_eq!(to_pcm16(0.5), 16384);
        let q = AudioClip::new(vec![0.123456], 8000)
            .unwrap()
            .quantize_pcm16();
        assert!((q.samples()[0] - 0.123456).abs() <= 0.5 / 32768.0);
    }
}
