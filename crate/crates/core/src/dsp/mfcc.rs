use std::f64::consts::PI;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use super::cmn::SlidingCmn;
use super::vad::energy_vad_mask;
use super::{frame_count, frame_indices, AudioClip};
use crate::error::{contract, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Parameters of the MFCC front end. Lengths are in samples and frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MfccConfig {
    pub sample_rate: u32,
    pub win_len: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub include_log_energy: bool,
    pub log_floor: f64,
    /// Sliding mean normalization window in frames, or `None` for off.
    pub cmn_window: Option<usize>,
    pub vad: bool,
    /// Added to the clip's mean frame log-energy to form the VAD threshold.
    pub vad_offset: f64,
}

impl MfccConfig {
    /// Configuration compared inside the perceptual loss: plain cepstra over
    /// every frame.
    pub fn perceptual() -> Self {
        Self {
            sample_rate: super::SAMPLE_RATE,
            win_len: 200,
            hop: 80,
            n_fft: 256,
            n_mels: 30,
            n_ceps: 29,
            f_min: 20.0,
            f_max: 3700.0,
            include_log_energy: false,
            log_floor: 1e-8,
            cmn_window: None,
            vad: false,
            vad_offset: -2.0,
        }
    }

    /// Speaker classifier input: cepstra plus log-energy, sliding mean
    /// normalization and energy VAD.
    pub fn classifier() -> Self {
        Self {
            include_log_energy: true,
            cmn_window: Some(300),
            vad: true,
            ..Self::perceptual()
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.n_ceps + usize::from(self.include_log_energy)
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.sample_rate > 0, "sample rate must be positive");
        contract!(
            self.win_len > 0 && self.hop > 0,
            "MFCC frame length and hop must be positive"
        );
        contract!(
            self.n_fft >= self.win_len,
            "n_fft {} is shorter than the {}-sample frame",
            self.n_fft,
            self.win_len
        );
        contract!(
            self.n_ceps >= 1 && self.n_ceps <= self.n_mels,
            "need 1 <= n_ceps <= n_mels, got {} and {}",
            self.n_ceps,
            self.n_mels
        );
        contract!(
            self.log_floor > 0.0 && self.log_floor.is_finite(),
            "log floor must be positive"
        );
        contract!(self.cmn_window != Some(0), "CMN window must be positive");
        contract!(self.vad_offset.is_finite(), "VAD offset must be finite");
        Ok(())
    }

    /// Everything up to and including the cepstra (shared work between two
    /// pipelines that only differ in post-processing).
    fn same_front_end(&self, other: &Self) -> bool {
        self.sample_rate == other.sample_rate
            && self.win_len == other.win_len
            && self.hop == other.hop
            && self.n_fft == other.n_fft
            && self.n_mels == other.n_mels
            && self.n_ceps == other.n_ceps
            && self.f_min == other.f_min
            && self.f_max == other.f_max
            && self.log_floor == other.log_floor
    }
}

/// `frames x features` MFCC matrix with the start time of each kept frame.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub values: Tensor,
    pub frame_times: Vec<f64>,
}

impl FeatureMatrix {
    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values.shape()[1]
    }
}

/// DFT matrices `(C, S)`, each `(n_fft/2 + 1) x n_fft`, with
/// `power[k] = (C x)[k]^2 + (S x)[k]^2`.
pub fn dft_power_matrices(n_fft: usize) -> Result<(Tensor, Tensor)> {
    contract!(n_fft >= 2, "n_fft must be at least 2, got {n_fft}");
    let bins = n_fft / 2 + 1;
    let mut c = vec![0.0; bins * n_fft];
    let mut s = vec![0.0; bins * n_fft];
    for k in 0..bins {
        for n in 0..n_fft {
            // reduce k*n mod n_fft so the angle stays small and exact
            let ang = 2.0 * PI * ((k * n) % n_fft) as f64 / n_fft as f64;
            c[k * n_fft + n] = ang.cos();
            s[k * n_fft + n] = -ang.sin();
        }
    }
    Ok((
        Tensor::new(&[bins, n_fft], c)?,
        Tensor::new(&[bins, n_fft], s)?,
    ))
}

pub(crate) fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

/// Triangular filters evenly spaced on the mel scale, evaluated in the mel
/// domain at each FFT bin centre. `n_mels x (n_fft/2 + 1)`.
pub fn mel_filterbank(
    n_mels: usize,
    n_fft: usize,
    sample_rate: u32,
    f_min: f64,
    f_max: f64,
) -> Result<Tensor> {
    let nyquist = f64::from(sample_rate) / 2.0;
    contract!(
        0.0 <= f_min && f_min < f_max && f_max <= nyquist,
        "mel band edges must satisfy 0 <= f_min < f_max <= {nyquist}, got {f_min}, {f_max}"
    );
    contract!(
        n_mels >= 1 && n_fft >= 2,
        "mel filterbank needs n_mels >= 1 and n_fft >= 2"
    );
    let bins = n_fft / 2 + 1;
    let (lo, hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let step = (hi - lo) / (n_mels + 1) as f64;
    let mut w = vec![0.0; n_mels * bins];
    for j in 0..n_mels {
        let (left, centre, right) = (
            lo + j as f64 * step,
            lo + (j + 1) as f64 * step,
            lo + (j + 2) as f64 * step,
        );
        for k in 0..bins {
            let m = hz_to_mel(k as f64 * f64::from(sample_rate) / n_fft as f64);
            w[j * bins + k] = if m > left && m <= centre {
                (m - left) / (centre - left)
            } else if m > centre && m < right {
                (right - m) / (right - centre)
            } else {
                0.0
            };
        }
        let row_sum: f64 = w[j * bins..(j + 1) * bins].iter().sum();
        contract!(
            row_sum > 0.0,
            "mel filter {j} covers no FFT bin; lower n_mels or raise n_fft"
        );
    }
    Tensor::new(&[n_mels, bins], w)
}

/// Orthonormal DCT-II, keeping the first `n_out` of `n_in` basis rows.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Result<Tensor> {
    contract!(n_out >= 1 && n_out <= n_in, "DCT needs 1 <= n_out <= n_in");
    let mut d = vec![0.0; n_out * n_in];
    for k in 0..n_out {
        let norm = if k == 0 {
            (1.0 / n_in as f64).sqrt()
        } else {
            (2.0 / n_in as f64).sqrt()
        };
        for n in 0..n_in {
            d[k * n_in + n] = norm * (PI * k as f64 * (n as f64 + 0.5) / n_in as f64).cos();
        }
    }
    Tensor::new(&[n_out, n_in], d)
}

fn hamming(len: usize) -> Vec<f64> {
    if len == 1 {
        return vec![1.0];
    }
    (0..len)
        .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (len - 1) as f64).cos())
        .collect()
}

/// Intermediate values shared by every pipeline with the same front end.
#[derive(Clone, Copy)]
pub struct FrontEnd<'t> {
    /// Raw `frames x win_len` frames.
    pub frames: Var<'t>,
    /// `frames x n_ceps` cepstra before any post-processing.
    pub cepstra: Var<'t>,
}

/// Precomputed constant matrices for one [`MfccConfig`].
pub struct MfccPipeline {
    cfg: MfccConfig,
    /// Hamming window folded into stacked `[cos | sin]` DFT rows, `win x 2K`.
    dft: Tensor,
    mel_t: Tensor,
    dct_t: Tensor,
    bins: usize,
}

impl std::fmt::Debug for MfccPipeline {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccPipeline")
            .field("cfg", &self.cfg)
            .finish()
    }
}

impl MfccPipeline {
    pub fn new(cfg: MfccConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, s) = dft_power_matrices(cfg.n_fft)?;
        let bins = cfg.n_fft / 2 + 1;
        let window = hamming(cfg.win_len);
        let mut dft = vec![0.0; cfg.win_len * 2 * bins];
        for n in 0..cfg.win_len {
            for k in 0..bins {
                dft[n * 2 * bins + k] = window[n] * c.data()[k * cfg.n_fft + n];
                dft[n * 2 * bins + bins + k] = window[n] * s.data()[k * cfg.n_fft + n];
            }
        }
        let mel = mel_filterbank(cfg.n_mels, cfg.n_fft, cfg.sample_rate, cfg.f_min, cfg.f_max)?;
        let dct = dct_matrix(cfg.n_ceps, cfg.n_mels)?;
        Ok(Self {
            dft: Tensor::new(&[cfg.win_len, 2 * bins], dft)?,
            mel_t: mel.transpose2(),
            dct_t: dct.transpose2(),
            bins,
            cfg,
        })
    }

    pub fn config(&self) -> &MfccConfig {
        &self.cfg
    }

    /// Whether `front_end` output of this pipeline can be fed to
    /// `other.back_end`.
    pub fn shares_front_end(&self, other: &MfccPipeline) -> bool {
        self.cfg.same_front_end(&other.cfg)
    }

    pub fn frame_count(&self, samples: usize) -> usize {
        frame_count(samples, self.cfg.win_len, self.cfg.hop)
    }

    /// Framing, windowed power spectrum, log mel energies and DCT.
    pub fn front_end<'t>(&self, wave: Var<'t>) -> Result<FrontEnd<'t>> {
        let tape = wave.tape();
        let shape = wave.shape();
        contract!(
            shape.len() == 1,
            "MFCC expects a 1-D waveform, got {shape:?}"
        );
        let t = self.frame_count(shape[0]);
        contract!(
            t > 0,
            "clip of {} samples is shorter than one {}-sample frame",
            shape[0],
            self.cfg.win_len
        );
        let index: Rc<[usize]> = frame_indices(shape[0], self.cfg.win_len, self.cfg.hop).into();
        let frames = wave.gather(index, &[t, self.cfg.win_len])?;
        let spec = frames.matmul(tape.constant(self.dft.clone()))?;
        let power = spec.square().reshape(&[t, 2, self.bins])?.sum_axis(1)?;
        let log_mel = power
            .matmul(tape.constant(self.mel_t.clone()))?
            .clamp_min(self.cfg.log_floor)
            .log()?;
        let cepstra = log_mel.matmul(tape.constant(self.dct_t.clone()))?;
        Ok(FrontEnd { frames, cepstra })
    }

    /// Optional log-energy column, sliding mean normalization and row
    /// selection. `keep` lists the retained frame indices when VAD is on.
    pub fn back_end<'t>(&self, front: FrontEnd<'t>, keep: Option<&[usize]>) -> Result<Var<'t>> {
        let tape = front.cepstra.tape();
        let t = front.cepstra.shape()[0];
        let mut feats = front.cepstra;
        if self.cfg.include_log_energy {
            let energy = front
                .frames
                .square()
                .sum_axis(1)?
                .clamp_min(self.cfg.log_floor)
                .log()?
                .reshape(&[t, 1])?;
            feats = tape.concat(&[feats, energy], 1)?;
        }
        if let Some(w) = self.cfg.cmn_window {
            feats = feats.linear(Rc::new(SlidingCmn::new(w)?))?;
        }
        if self.cfg.vad {
            let keep = keep.ok_or_else(|| {
                Error::Contract("VAD is on but no frame mask was supplied".into())
            })?;
            contract!(!keep.is_empty(), "VAD kept no frames");
            contract!(
                keep.iter().all(|&r| r < t),
                "VAD mask refers to frames past {t}"
            );
            let f = self.cfg.feature_dim();
            let index: Rc<[usize]> = keep.iter().flat_map(|&r| r * f..(r + 1) * f).collect();
            feats = feats.gather(index, &[keep.len(), f])?;
        }
        Ok(feats)
    }

    /// Differentiable features of a waveform. `keep` is the frozen VAD
    /// selection (ignored when VAD is off).
    pub fn features<'t>(&self, wave: Var<'t>, keep: Option<&[usize]>) -> Result<Var<'t>> {
        let front = self.front_end(wave)?;
        self.back_end(front, keep)
    }

    /// Frame indices the configured VAD keeps for `clip`, or `None` when VAD
    /// is off.
    pub fn vad_frames(&self, clip: &AudioClip) -> Result<Option<Vec<usize>>> {
        if !self.cfg.vad {
            return Ok(None);
        }
        let mask = energy_vad_mask(clip, &self.cfg)?;
        contract!(!mask.all_silent, "clip is silent; VAD kept no frames");
        let kept = mask.kept();
        contract!(!kept.is_empty(), "VAD kept no frames");
        Ok(Some(kept))
    }

    /// Non-differentiable feature extraction with a fresh VAD decision.
    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        let keep = self.vad_frames(clip)?;
        let tape = Tape::no_grad();
        let wave = tape.constant(Tensor::from_vec(clip.samples().to_vec()));
        let values = (*self.features(wave, keep.as_deref())?.value()).clone();
        let hop_secs = self.cfg.hop as f64 / f64::from(self.cfg.sample_rate);
        let frame_times = match keep {
            Some(k) => k.iter().map(|&r| r as f64 * hop_secs).collect(),
            None => (0..values.shape()[0])
                .map(|r| r as f64 * hop_secs)
                .collect(),
        };
        Ok(FeatureMatrix {
            values,
            frame_times,
        })
    }
}

/// Computes MFCCs of `clip` under `cfg`.
pub fn mfcc(clip: &AudioClip, cfg: &MfccConfig) -> Result<FeatureMatrix> {
    MfccPipeline::new(cfg.clone())?.extract(clip)
}
