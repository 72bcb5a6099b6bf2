//! Sine-windowed MDCT with 50% overlap, computed through a DCT-IV on a
//! half-length complex FFT.
//!
//! Both directions carry the orthonormal `sqrt(2/M)` scale, which makes the
//! lapped transform orthogonal: the inverse is exactly the adjoint of the
//! forward transform, and the forward preserves signal energy.

use std::f64::consts::PI;
use std::rc::Rc;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::AudioClip;
use crate::error::{contract, Result};
use crate::tensor::{LinearOp, Tensor};

/// Frames x bins MDCT coefficients of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct MdctSpectrogram {
    /// `frames x bins` coefficient matrix.
    pub coeffs: Tensor,
    pub frame_len: usize,
    /// Sample count of the analysed clip (padding is stripped on inversion).
    pub signal_len: usize,
    pub sample_rate: u32,
}

impl MdctSpectrogram {
    pub fn frames(&self) -> usize {
        self.coeffs.shape()[0]
    }

    pub fn bins(&self) -> usize {
        self.coeffs.shape()[1]
    }

    /// Population mean and standard deviation of the coefficients.
    pub fn stats(&self) -> (f64, f64) {
        mean_std(self.coeffs.data())
    }
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Reusable MDCT/IMDCT plan for one frame length.
pub struct Mdct {
    frame_len: usize,
    bins: usize,
    window: Vec<f64>,
    scale: f64,
    fft: Option<Arc<dyn Fft<f64>>>,
    pre: Vec<Complex64>,
    post: Vec<Complex64>,
}

impl std::fmt::Debug for Mdct {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Mdct")
            .field("frame_len", &self.frame_len)
            .finish()
    }
}

impl Mdct {
    pub fn new(frame_len: usize) -> Result<Self> {
        contract!(
            frame_len >= 2 && frame_len % 2 == 0,
            "MDCT frame length must be positive and even, got {frame_len}"
        );
        let m = frame_len / 2;
        let window = (0..frame_len)
            .map(|n| (PI * (n as f64 + 0.5) / frame_len as f64).sin())
            .collect();
        let (fft, pre, post) = if m % 2 == 0 {
            let half = m / 2;
            let fft = FftPlanner::new().plan_fft_forward(half);
            let pre = (0..half)
                .map(|n| Complex64::from_polar(1.0, -PI * (n as f64 + 0.25) / m as f64))
                .collect();
            let post = (0..half)
                .map(|k| Complex64::from_polar(1.0, -PI * k as f64 / m as f64))
                .collect();
            (Some(fft), pre, post)
        } else {
            (None, Vec::new(), Vec::new())
        };
        Ok(Self {
            frame_len,
            bins: m,
            window,
            scale: (2.0 / m as f64).sqrt(),
            fft,
            pre,
            post,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    /// Number of frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        len.div_ceil(self.bins) + 1
    }

    /// Unscaled DCT-IV: `X_k = sum_n u_n cos(pi/M (n + 1/2)(k + 1/2))`.
    fn dct4(&self, u: &[f64], out: &mut [f64]) {
        let m = self.bins;
        match &self.fft {
            Some(fft) => {
                let half = m / 2;
                let mut buf: Vec<Complex64> = (0..half)
                    .map(|n| Complex64::new(u[2 * n], u[m - 1 - 2 * n]) * self.pre[n])
                    .collect();
                fft.process(&mut buf);
                for k in 0..half {
                    let w = buf[k] * self.post[k];
                    out[2 * k] = w.re;
                    out[m - 1 - 2 * k] = -w.im;
                }
            }
            None => {
                for (k, o) in out.iter_mut().enumerate().take(m) {
                    *o = u
                        .iter()
                        .enumerate()
                        .map(|(n, &v)| {
                            v * (PI / m as f64 * (n as f64 + 0.5) * (k as f64 + 0.5)).cos()
                        })
                        .sum();
                }
            }
        }
    }

    /// MDCT of one windowed `frame_len` block into `bins` coefficients.
    fn forward_block(&self, block: &[f64], out: &mut [f64], fold: &mut [f64]) {
        let m = self.bins;
        let q = m / 2;
        let w = |n: usize| block[n] * self.window[n];
        if m % 2 == 0 {
            // blocks (a, b, c, d) fold into (-c_r - d, a - b_r)
            for n in 0..q {
                fold[n] = -w(3 * q - 1 - n) - w(3 * q + n);
                fold[q + n] = w(n) - w(m - 1 - n);
            }
        } else {
            // odd M has no half-length FFT; sum the definition directly
            for (k, o) in out.iter_mut().enumerate().take(m) {
                let s: f64 = (0..self.frame_len)
                    .map(|n| {
                        w(n) * (PI / m as f64
                            * (n as f64 + 0.5 + m as f64 / 2.0)
                            * (k as f64 + 0.5))
                            .cos()
                    })
                    .sum();
                *o = s * self.scale;
            }
            return;
        }
        self.dct4(&fold[..m], out);
        out.iter_mut().for_each(|v| *v *= self.scale);
    }

    /// Windowed IMDCT of one coefficient block, accumulated into `acc`.
    fn inverse_block(&self, coeffs: &[f64], acc: &mut [f64], tmp: &mut [f64]) {
        let m = self.bins;
        if m % 2 == 0 {
            self.dct4(coeffs, &mut tmp[..m]);
            let q = m / 2;
            // y = (u2, -u2_r, -u1_r, -u1)
            for n in 0..q {
                let u1 = tmp[n];
                let u2 = tmp[q + n];
                acc[n] += self.scale * self.window[n] * u2;
                acc[m - 1 - n] -= self.scale * self.window[m - 1 - n] * u2;
                acc[m + q - 1 - n] -= self.scale * self.window[m + q - 1 - n] * u1;
                acc[m + q + n] -= self.scale * self.window[m + q + n] * u1;
            }
        } else {
            for n in 0..self.frame_len {
                let y: f64 = coeffs
                    .iter()
                    .enumerate()
                    .map(|(k, &c)| {
                        c * (PI / m as f64 * (n as f64 + 0.5 + m as f64 / 2.0) * (k as f64 + 0.5))
                            .cos()
                    })
                    .sum();
                acc[n] += self.scale * self.window[n] * y;
            }
        }
    }

    /// Coefficients (`frames * bins`, row-major) of `signal`, zero-padded by
    /// one hop in front and by one hop plus alignment at the back.
    pub fn forward(&self, signal: &[f64]) -> Vec<f64> {
        let m = self.bins;
        let frames = self.frame_count(signal.len());
        let mut padded = vec![0.0; (frames + 1) * m];
        padded[m..m + signal.len()].copy_from_slice(signal);
        let mut out = vec![0.0; frames * m];
        let mut fold = vec![0.0; m];
        for f in 0..frames {
            self.forward_block(
                &padded[f * m..f * m + self.frame_len],
                &mut out[f * m..(f + 1) * m],
                &mut fold,
            );
        }
        out
    }

    /// Overlap-add synthesis of `frames * bins` coefficients, returning the
    /// `len` interior samples.
    pub fn inverse(&self, coeffs: &[f64], len: usize) -> Vec<f64> {
        let m = self.bins;
        let frames = coeffs.len() / m;
        let mut acc = vec![0.0; (frames + 1) * m];
        let mut tmp = vec![0.0; m];
        for f in 0..frames {
            self.inverse_block(
                &coeffs[f * m..(f + 1) * m],
                &mut acc[f * m..f * m + self.frame_len],
                &mut tmp,
            );
        }
        acc[m..m + len].to_vec()
    }

    pub fn mdct(&self, clip: &AudioClip) -> MdctSpectrogram {
        let frames = self.frame_count(clip.len());
        let coeffs = Tensor::new(&[frames, self.bins], self.forward(clip.samples()))
            .expect("frame count matches coefficient count");
        MdctSpectrogram {
            coeffs,
            frame_len: self.frame_len,
            signal_len: clip.len(),
            sample_rate: clip.sample_rate(),
        }
    }

    pub fn imdct(&self, spec: &MdctSpectrogram) -> Result<AudioClip> {
        contract!(
            spec.frame_len == self.frame_len && spec.bins() == self.bins,
            "spectrogram frame length {} does not match plan {}",
            spec.frame_len,
            self.frame_len
        );
        contract!(
            spec.frames() == self.frame_count(spec.signal_len),
            "{} frames cannot describe {} samples",
            spec.frames(),
            spec.signal_len
        );
        AudioClip::new(
            self.inverse(spec.coeffs.data(), spec.signal_len),
            spec.sample_rate,
        )
    }
}

/// Differentiable IMDCT for the tape: `frames x bins` in, `signal_len`
/// samples out. Its adjoint is the forward MDCT.
pub struct ImdctOp {
    plan: Arc<Mdct>,
    signal_len: usize,
}

impl ImdctOp {
    pub fn new(plan: Arc<Mdct>, signal_len: usize) -> Rc<Self> {
        Rc::new(Self { plan, signal_len })
    }
}

impl LinearOp for ImdctOp {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let frames = self.plan.frame_count(self.signal_len);
        contract!(
            x.shape() == [frames, self.plan.bins()],
            "IMDCT expects [{frames}, {}] coefficients, got {:?}",
            self.plan.bins(),
            x.shape()
        );
        Ok(Tensor::from_vec(
            self.plan.inverse(x.data(), self.signal_len),
        ))
    }

    fn adjoint(&self, grad: &Tensor) -> Tensor {
        let frames = self.plan.frame_count(self.signal_len);
        Tensor::new(&[frames, self.plan.bins()], self.plan.forward(grad.data()))
            .expect("MDCT output matches frame layout")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct MDCT summation of one windowed, orthonormally scaled block.
    fn naive_mdct_block(block: &[f64]) -> Vec<f64> {
        let n2 = block.len();
        let m = n2 / 2;
        (0..m)
            .map(|k| {
                let s: f64 = (0..n2)
                    .map(|n| {
                        let w = (PI * (n as f64 + 0.5) / n2 as f64).sin();
                        block[n]
                            * w
                            * (PI / m as f64 * (n as f64 + 0.5 + m as f64 / 2.0) * (k as f64 + 0.5))
                                .cos()
                    })
                    .sum();
                s * (2.0 / m as f64).sqrt()
            })
            .collect()
    }

    fn random_clip(rng: &mut ChaCha8Rng, len: usize) -> AudioClip {
        AudioClip::new((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect(), 8000).unwrap()
    }

    #[test]
    fn rejects_bad_frame_lengths() {
        assert!(Mdct::new(0).is_err());
        assert!(Mdct::new(7).is_err());
    }

    #[test]
    fn zero_clip_gives_zero_coefficients() {
        let plan = Mdct::new(512).unwrap();
        let spec = plan.mdct(&AudioClip::new(vec![0.0; 1000], 8000).unwrap());
        assert!(spec.coeffs.data().iter().all(|&c| c == 0.0));
        let back = plan.imdct(&spec).unwrap();
        assert!(back.samples().iter().all(|&s| s == 0.0));
    }

    #[test]
    fn single_frame_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        for frame_len in [8usize, 16, 512, 6] {
            let plan = Mdct::new(frame_len).unwrap();
            let m = frame_len / 2;
            // a signal of exactly one hop produces two frames; check both
            let clip = random_clip(&mut rng, m);
            let spec = plan.mdct(&clip);
            let mut padded = vec![0.0; 3 * m];
            padded[m..2 * m].copy_from_slice(clip.samples());
            for f in 0..2 {
                let expect = naive_mdct_block(&padded[f * m..f * m + frame_len]);
                let got = spec.coeffs.row(f);
                let err = got
                    .iter()
                    .zip(&expect)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(err <= 1e-10, "frame_len {frame_len}: {err}");
            }
        }
    }

    #[test]
    fn round_trip_reconstructs_long_clip() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let plan = Mdct::new(512).unwrap();
        let clip = random_clip(&mut rng, 32000);
        let spec = plan.mdct(&clip);
        assert_eq!((spec.frames(), spec.bins()), (126, 256));
        let back = plan.imdct(&spec).unwrap();
        let err = clip
            .samples()
            .iter()
            .zip(back.samples())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err <= 1e-9, "{err}");
        // orthogonality: energy is preserved
        let e_sig: f64 = clip.samples().iter().map(|v| v * v).sum();
        let e_coef: f64 = spec.coeffs.data().iter().map(|v| v * v).sum();
        assert!((e_sig - e_coef).abs() <= 1e-9 * e_sig);
    }

    #[test]
    fn round_trip_unit_impulse_and_ragged_length() {
        let plan = Mdct::new(512).unwrap();
        for (len, pos) in [(2048usize, 700usize), (1001, 0), (1001, 1000), (3, 1)] {
            let mut s = vec![0.0; len];
            s[pos] = 1.0;
            let clip = AudioClip::new(s.clone(), 8000).unwrap();
            let back = plan.imdct(&plan.mdct(&clip)).unwrap();
            let err = s
                .iter()
                .zip(back.samples())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err <= 1e-9, "len {len} pos {pos}: {err}");
        }
    }

    #[test]
    fn imdct_op_adjoint_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let plan = Arc::new(Mdct::new(16).unwrap());
        let len = 45;
        let op = ImdctOp::new(plan.clone(), len);
        let frames = plan.frame_count(len);
        let c = Tensor::new(
            &[frames, 8],
            (0..frames * 8).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = Tensor::from_vec((0..len).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let lhs: f64 = op
            .forward(&c)
            .unwrap()
            .data()
            .iter()
            .zip(y.data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = c
            .data()
            .iter()
            .zip(op.adjoint(&y).data())
            .map(|(a, b)| a * b)
            .sum();
        assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
    }
}
