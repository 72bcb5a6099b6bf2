use super::{frame_count, AudioClip, MfccConfig};
use crate::error::{contract, Result};

/// Per-frame speech decision of the energy detector.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VadMask {
    pub keep: Vec<bool>,
    /// Every frame sits at or below the log floor; `keep` is all false.
    pub all_silent: bool,
}

impl VadMask {
    /// Indices of kept frames in ascending order.
    pub fn kept(&self) -> Vec<usize> {
        self.keep
            .iter()
            .enumerate()
            .filter_map(|(i, &k)| k.then_some(i))
            .collect()
    }
}

/// Keeps a frame when its log-energy exceeds the clip's mean frame
/// log-energy plus `cfg.vad_offset`. Frames are cut with the MFCC framing
/// of `cfg`. Frames at or below `cfg.log_floor` energy are never kept.
pub fn energy_vad_mask(clip: &AudioClip, cfg: &MfccConfig) -> Result<VadMask> {
    let frames = frame_count(clip.len(), cfg.win_len, cfg.hop);
    contract!(
        frames > 0,
        "clip of {} samples is shorter than one {}-sample frame",
        clip.len(),
        cfg.win_len
    );
    let x = clip.samples();
    let energy: Vec<f64> = (0..frames)
        .map(|t| {
            x[t * cfg.hop..t * cfg.hop + cfg.win_len]
                .iter()
                .map(|v| v * v)
                .sum()
        })
        .collect();
    let log_e: Vec<f64> = energy.iter().map(|e| e.max(cfg.log_floor).ln()).collect();
    let threshold = log_e.iter().sum::<f64>() / frames as f64 + cfg.vad_offset;
    let keep: Vec<bool> = energy
        .iter()
        .zip(&log_e)
        .map(|(&e, &l)| e > cfg.log_floor && l > threshold)
        .collect();
    let all_silent = energy.iter().all(|&e| e <= cfg.log_floor);
    Ok(VadMask { keep, all_silent })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn tone(len: usize) -> Vec<f64> {
        (0..len)
            .map(|n| 0.5 * (2.0 * PI * 440.0 * n as f64 / 8000.0).sin())
            .collect()
    }

    #[test]
    fn steady_tone_keeps_every_frame() {
        let cfg = MfccConfig::classifier();
        let mask = energy_vad_mask(&AudioClip::new(tone(8000), 8000).unwrap(), &cfg).unwrap();
        assert!(cfg.vad_offset < 0.0);
        assert!(mask.keep.iter().all(|&k| k));
        assert!(!mask.all_silent);
    }

    #[test]
    fn half_tone_half_silence() {
        let cfg = MfccConfig {
            vad_offset: 0.0,
            ..MfccConfig::classifier()
        };
        let mut s = tone(4000);
        s.extend(vec![0.0; 4000]);
        let mask = energy_vad_mask(&AudioClip::new(s, 8000).unwrap(), &cfg).unwrap();
        for (t, &k) in mask.keep.iter().enumerate() {
            let (start, end) = (t * cfg.hop, t * cfg.hop + cfg.win_len);
            if end <= 4000 {
                assert!(k, "tone frame {t} dropped");
            } else if start >= 4000 {
                assert!(!k, "silent frame {t} kept");
            }
        }
    }

    #[test]
    fn silence_is_flagged() {
        let mask = energy_vad_mask(
            &AudioClip::new(vec![0.0; 1000], 8000).unwrap(),
            &MfccConfig::classifier(),
        )
        .unwrap();
        assert!(mask.all_silent);
        assert!(mask.kept().is_empty());
    }
}
