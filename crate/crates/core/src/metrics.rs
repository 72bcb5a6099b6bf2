//! Effectiveness rates and imperceptibility proxies.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{frame_count, AudioClip, MfccConfig, MfccPipeline};
use crate::error::{contract, Result};
use crate::losses::perceptual_loss_values;

/// Per-frame segmental SNR bounds in dB.
pub const SEG_SNR_FLOOR_DB: f64 = -10.0;
pub const SEG_SNR_CEIL_DB: f64 = 35.0;
/// Default framing for segmental SNR (20 ms / 10 ms at 8 kHz).
pub const SEG_SNR_FRAME: usize = 160;
pub const SEG_SNR_HOP: usize = 80;
/// Default framing for log-spectral distance.
pub const LSD_N_FFT: usize = 256;
pub const LSD_HOP: usize = 128;
/// Power floor for both proxies.
pub const POWER_FLOOR: f64 = 1e-12;

/// Fraction of exact matches.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    contract!(
        !labels.is_empty() && predictions.len() == labels.len(),
        "accuracy needs equal non-empty inputs, got {} predictions and {} labels",
        predictions.len(),
        labels.len()
    );
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// `counts[label][prediction]`.
pub fn confusion_matrix(
    predictions: &[usize],
    labels: &[usize],
    n_classes: usize,
) -> Result<Vec<Vec<usize>>> {
    contract!(
        predictions.len() == labels.len(),
        "confusion matrix needs equal lengths"
    );
    let mut m = vec![vec![0usize; n_classes]; n_classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        contract!(
            p < n_classes && l < n_classes,
            "class index out of range for {n_classes} classes"
        );
        m[l][p] += 1;
    }
    Ok(m)
}

/// Labels and predictions of one attacked clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Outcome {
    pub label: usize,
    pub prediction: usize,
    pub target: Option<usize>,
}

/// Share of adversarial clips predicted as anything but their label.
/// Clips that were already misclassified count when they stay so.
pub fn success_rate_untargeted(outcomes: &[Outcome]) -> Result<f64> {
    contract!(!outcomes.is_empty(), "success rate of an empty set");
    let fooled = outcomes.iter().filter(|o| o.prediction != o.label).count();
    Ok(fooled as f64 / outcomes.len() as f64)
}

/// Share of adversarial clips predicted as their target.
pub fn success_rate_targeted(outcomes: &[Outcome]) -> Result<f64> {
    contract!(!outcomes.is_empty(), "success rate of an empty set");
    let mut hits = 0usize;
    for o in outcomes {
        let Some(t) = o.target else {
            return Err(crate::Error::Contract(
                "targeted success rate needs a target for every clip".into(),
            ));
        };
        hits += usize::from(o.prediction == t);
    }
    Ok(hits as f64 / outcomes.len() as f64)
}

fn check_pair(x: &AudioClip, y: &AudioClip) -> Result<()> {
    contract!(
        x.len() == y.len(),
        "clips differ in length: {} vs {} samples",
        x.len(),
        y.len()
    );
    Ok(())
}

/// Mean over frames of the clamped per-frame signal-to-perturbation ratio.
pub fn segmental_snr(
    x: &AudioClip,
    x_adv: &AudioClip,
    frame_len: usize,
    hop: usize,
) -> Result<f64> {
    check_pair(x, x_adv)?;
    contract!(
        frame_len >= 1 && hop >= 1,
        "frame length and hop must be positive"
    );
    let frames = frame_count(x.len(), frame_len, hop);
    contract!(
        frames >= 1,
        "clip of {} samples is shorter than one frame",
        x.len()
    );
    let (a, b) = (x.samples(), x_adv.samples());
    let total: f64 = (0..frames)
        .map(|t| {
            let r = t * hop..t * hop + frame_len;
            let signal: f64 = a[r.clone()].iter().map(|v| v * v).sum();
            let noise: f64 = a[r.clone()]
                .iter()
                .zip(&b[r])
                .map(|(p, q)| (p - q).powi(2))
                .sum();
            (10.0 * (signal / noise.max(POWER_FLOOR)).log10())
                .clamp(SEG_SNR_FLOOR_DB, SEG_SNR_CEIL_DB)
        })
        .sum();
    Ok(total / frames as f64)
}

fn power_frames(x: &[f64], n_fft: usize, hop: usize, frames: usize) -> Vec<Vec<f64>> {
    let fft = FftPlanner::new().plan_fft_forward(n_fft);
    let window: Vec<f64> = (0..n_fft)
        .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / n_fft as f64).cos())
        .collect();
    (0..frames)
        .map(|t| {
            let mut buf: Vec<Complex<f64>> = (0..n_fft)
                .map(|n| Complex::new(x[t * hop + n] * window[n], 0.0))
                .collect();
            fft.process(&mut buf);
            buf[..n_fft / 2 + 1]
                .iter()
                .map(|c| c.norm_sqr().max(POWER_FLOOR))
                .collect()
        })
        .collect()
}

/// RMS over frames and bins of the dB difference between Hann-windowed
/// power spectra.
pub fn log_spectral_distance(
    x: &AudioClip,
    x_adv: &AudioClip,
    n_fft: usize,
    hop: usize,
) -> Result<f64> {
    check_pair(x, x_adv)?;
    contract!(n_fft >= 2 && hop >= 1, "invalid spectral framing");
    let frames = frame_count(x.len(), n_fft, hop);
    contract!(
        frames >= 1,
        "clip of {} samples is shorter than one {n_fft}-point frame",
        x.len()
    );
    let px = power_frames(x.samples(), n_fft, hop, frames);
    let py = power_frames(x_adv.samples(), n_fft, hop, frames);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (fx, fy) in px.iter().zip(&py) {
        for (a, b) in fx.iter().zip(fy) {
            sum += (10.0 * (a.log10() - b.log10())).powi(2);
            count += 1;
        }
    }
    Ok((sum / count as f64).sqrt())
}

/// Perceptual loss per frame, in `[0, 2]`.
pub fn mfcc_cosine_distance(x: &AudioClip, x_adv: &AudioClip) -> Result<f64> {
    check_pair(x, x_adv)?;
    let pipeline = MfccPipeline::new(MfccConfig::perceptual())?;
    let (f, g) = (pipeline.extract(x)?.values, pipeline.extract(x_adv)?.values);
    let (loss, cos) = perceptual_loss_values(&f, &g)?;
    Ok(loss / cos.len() as f64)
}

/// Mean, population standard deviation and median.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
    pub median: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        Some(Self {
            mean,
            std,
            median: median(values),
        })
    }
}

/// Median; the mean of the middle pair for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One row of the per-clip table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub speaker: usize,
    pub prediction_clean: usize,
    pub prediction_adv: usize,
    pub target: Option<usize>,
    pub success: bool,
    #[serde(rename = "L_P")]
    pub perceptual: f64,
    #[serde(rename = "L_A")]
    pub adversarial: f64,
    pub iterations: usize,
    #[serde(rename = "segSNR_dB")]
    pub seg_snr_db: f64,
    #[serde(rename = "LSD_dB")]
    pub lsd_db: f64,
    pub mfcc_cos_dist: f64,
    /// Reserved for externally computed scores.
    pub pesq: Option<f64>,
    pub jnd: Option<f64>,
}

impl ClipRecord {
    pub fn outcome(&self) -> Outcome {
        Outcome {
            label: self.speaker,
            prediction: self.prediction_adv,
            target: self.target,
        }
    }
}

/// Aggregates over a set of [`ClipRecord`]s.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregates {
    pub clips: usize,
    #[serde(rename = "Acc_clean")]
    pub acc_clean: f64,
    #[serde(rename = "Acc_adv")]
    pub acc_adv: f64,
    #[serde(rename = "S")]
    pub s: f64,
    /// `S` restricted to clips the classifier got right before the attack.
    #[serde(rename = "S_correct")]
    pub s_correct: Option<f64>,
    #[serde(rename = "S_t")]
    pub s_t: Option<f64>,
    #[serde(rename = "segSNR_dB")]
    pub seg_snr_db: Summary,
    #[serde(rename = "LSD_dB")]
    pub lsd_db: Summary,
    pub mfcc_cos_dist: Summary,
    #[serde(rename = "L_P")]
    pub perceptual: Summary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub records: Vec<ClipRecord>,
    pub aggregates: Aggregates,
}

impl EvaluationReport {
    pub fn from_records(records: Vec<ClipRecord>) -> Result<Self> {
        let aggregates = aggregate(&records)?;
        Ok(Self {
            records,
            aggregates,
        })
    }
}

/// Recomputes every aggregate from the rows.
pub fn aggregate(records: &[ClipRecord]) -> Result<Aggregates> {
    contract!(!records.is_empty(), "cannot aggregate an empty report");
    let labels: Vec<usize> = records.iter().map(|r| r.speaker).collect();
    let clean: Vec<usize> = records.iter().map(|r| r.prediction_clean).collect();
    let adv: Vec<usize> = records.iter().map(|r| r.prediction_adv).collect();
    let outcomes: Vec<Outcome> = records.iter().map(ClipRecord::outcome).collect();
    let correct: Vec<Outcome> = records
        .iter()
        .filter(|r| r.prediction_clean == r.speaker)
        .map(ClipRecord::outcome)
        .collect();
    let s_t = if records.iter().all(|r| r.target.is_some()) {
        Some(success_rate_targeted(&outcomes)?)
    } else {
        None
    };
    let summary = |f: fn(&ClipRecord) -> f64| {
        Summary::of(&records.iter().map(f).collect::<Vec<_>>()).expect("non-empty")
    };
    Ok(Aggregates {
        clips: records.len(),
        acc_clean: accuracy(&clean, &labels)?,
        acc_adv: accuracy(&adv, &labels)?,
        s: success_rate_untargeted(&outcomes)?,
        s_correct: if correct.is_empty() {
            None
        } else {
            Some(success_rate_untargeted(&correct)?)
        },
        s_t,
        seg_snr_db: summary(|r| r.seg_snr_db),
        lsd_db: summary(|r| r.lsd_db),
        mfcc_cos_dist: summary(|r| r.mfcc_cos_dist),
        perceptual: summary(|r| r.perceptual),
    })
}
