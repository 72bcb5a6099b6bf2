//! Adversarial attacks on a trained [`SpeakerClassifier`].
//!
//! [`foolhd_attack`] fits a freshly initialized gated convolutional
//! autoencoder to one clip's MDCT spectrogram so that its reconstruction
//! fools the classifier while staying close in MFCC space. [`fgsm_attack`]
//! and [`bim_attack`] are the sign-gradient baselines.

use std::sync::Arc;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::dsp::{AudioClip, FrontEnd, ImdctOp, Mdct, MfccConfig, MfccPipeline};
use crate::error::{contract, Result};
use crate::losses::{
    cross_entropy, mse_loss, perceptual_loss, perceptual_loss_values, targeted_margin,
    targeted_margin_values, total_loss, untargeted_margin, untargeted_margin_values, LossBreakdown,
};
use crate::nets::{
    denormalize_spectrogram, denormalize_var, normalize_spectrogram, Gca, GcaConfig,
    SpeakerClassifier,
};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

/// MDCT frame length used by the autoencoder attack.
pub const MDCT_FRAME_LEN: usize = 512;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    Untargeted,
    Targeted,
}

/// Distortion term of the autoencoder objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    /// MFCC cosine loss.
    Perceptual,
    /// Waveform mean squared error (ablation).
    Mse,
}

/// Settings shared by all attacks. Baselines read only `epsilon` and
/// `bim_iterations`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub mode: AttackMode,
    pub loss_variant: LossVariant,
    pub skip: bool,
    /// Optimization steps per clip.
    pub max_iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub dropout: f64,
    /// Autoencoder width. 64 is the reference size.
    pub gca_channels: usize,
    /// Optional factor on the distortion term; `None` is the plain sum.
    pub perceptual_weight: Option<f64>,
    pub epsilon: f64,
    pub bim_iterations: usize,
}

impl AttackConfig {
    pub fn untargeted() -> Self {
        Self {
            mode: AttackMode::Untargeted,
            loss_variant: LossVariant::Perceptual,
            skip: true,
            max_iterations: 500,
            lr: 1e-3,
            weight_decay: 1e-5,
            dropout: 1e-3,
            gca_channels: 64,
            perceptual_weight: None,
            epsilon: 0.004,
            bim_iterations: 10,
        }
    }

    pub fn targeted() -> Self {
        Self {
            mode: AttackMode::Targeted,
            max_iterations: 1000,
            ..Self::untargeted()
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(
            self.max_iterations >= 1,
            "attack needs at least one iteration"
        );
        contract!(
            self.lr > 0.0 && self.lr.is_finite(),
            "learning rate must be positive"
        );
        contract!(
            self.weight_decay >= 0.0,
            "weight decay must be non-negative"
        );
        contract!(
            (0.0..1.0).contains(&self.dropout),
            "dropout must lie in [0, 1)"
        );
        contract!(self.gca_channels >= 1, "autoencoder width must be positive");
        contract!(
            self.epsilon >= 0.0 && self.epsilon.is_finite(),
            "epsilon must be non-negative"
        );
        contract!(self.bim_iterations >= 1, "BIM needs at least one iteration");
        Ok(())
    }

    fn gca(&self) -> GcaConfig {
        GcaConfig {
            channels: self.gca_channels,
            dropout: self.dropout,
            skip: self.skip,
            ..GcaConfig::default()
        }
    }
}

/// Metadata of one iteration whose output met the attack goal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub iteration: usize,
    pub perceptual: f64,
    pub prediction: usize,
}

/// Successful iterations of one attack. Only the clip with the lowest
/// distortion is retained.
#[derive(Clone, Debug, Default)]
pub struct CandidatePool {
    entries: Vec<Candidate>,
    best: Option<(usize, AudioClip, f64)>,
}

impl CandidatePool {
    pub fn push(&mut self, candidate: Candidate, clip: AudioClip, adversarial: f64) {
        let better = self.best.as_ref().map_or(true, |(i, _, _)| {
            candidate.perceptual < self.entries[*i].perceptual
        });
        if better {
            self.best = Some((self.entries.len(), clip, adversarial));
        }
        self.entries.push(candidate);
    }

    pub fn entries(&self) -> &[Candidate] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Lowest-distortion entry, its clip and its adversarial loss. Ties go
    /// to the earliest iteration.
    pub fn best(&self) -> Option<(&Candidate, &AudioClip, f64)> {
        self.best
            .as_ref()
            .map(|(i, c, a)| (&self.entries[*i], c, *a))
    }
}

/// Losses of one optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
    /// Largest absolute sample change of the iterate (baselines only).
    pub linf: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct AttackResult {
    /// Adversarial clip on the PCM16 grid, exactly as it would be written.
    pub adversarial: AudioClip,
    pub label: usize,
    pub prediction: usize,
    pub target: Option<usize>,
    pub success: bool,
    /// Distortion of the returned clip (MFCC cosine loss, or MSE for that
    /// variant).
    pub perceptual: f64,
    /// Margin loss of the returned clip for the attack goal.
    pub adversarial_loss: f64,
    pub iterations: usize,
    pub trace: Vec<IterationRecord>,
    pub pool: Vec<Candidate>,
}

/// Goal check on logits: strict margin, so an exact tie never counts.
pub fn goal_met(logits: &[f64], label: usize, target: Option<usize>) -> Result<bool> {
    let loss = match target {
        None => untargeted_margin_values(logits, label)?,
        Some(t) => targeted_margin_values(logits, t)?,
    };
    Ok(loss < 0.0)
}

fn goal_loss(logits: &[f64], label: usize, target: Option<usize>) -> Result<f64> {
    match target {
        None => untargeted_margin_values(logits, label),
        Some(t) => targeted_margin_values(logits, t),
    }
}

/// Uniform draw from every class except `y`.
pub fn choose_random_target(y: usize, n_classes: usize, rng: &mut dyn RngCore) -> Result<usize> {
    contract!(
        n_classes >= 2,
        "targeted attack needs at least 2 classes, got {n_classes}"
    );
    contract!(
        y < n_classes,
        "label {y} out of range for {n_classes} classes"
    );
    let r = rng.gen_range(0..n_classes - 1);
    Ok(if r >= y { r + 1 } else { r })
}

fn check_inputs(x: &AudioClip, y: usize, classifier: &SpeakerClassifier) -> Result<()> {
    contract!(
        y < classifier.n_classes(),
        "label {y} out of range for {} classes",
        classifier.n_classes()
    );
    contract!(
        x.sample_rate() == classifier.pipeline().config().sample_rate,
        "clip is sampled at {} Hz, classifier expects {}",
        x.sample_rate(),
        classifier.pipeline().config().sample_rate
    );
    Ok(())
}

/// Full deployment check of a waveform: fresh VAD, features, logits.
fn evaluate(
    classifier: &SpeakerClassifier,
    clip: &AudioClip,
    label: usize,
    target: Option<usize>,
) -> Result<(usize, f64, bool)> {
    let pred = classifier.predict(clip)?;
    let loss = goal_loss(&pred.logits, label, target)?;
    Ok((pred.class, loss, goal_met(&pred.logits, label, target)?))
}

struct Distortion {
    variant: LossVariant,
    pipeline: MfccPipeline,
    reference: Tensor,
}

impl Distortion {
    fn new(variant: LossVariant, x: &AudioClip) -> Result<Self> {
        let pipeline = MfccPipeline::new(MfccConfig::perceptual())?;
        let reference = match variant {
            LossVariant::Perceptual => pipeline.extract(x)?.values,
            LossVariant::Mse => Tensor::from_vec(x.samples().to_vec()),
        };
        Ok(Self {
            variant,
            pipeline,
            reference,
        })
    }

    fn on_tape<'t>(&self, wave: Var<'t>, front: FrontEnd<'t>) -> Result<Var<'t>> {
        let r = wave.tape().constant(self.reference.clone());
        match self.variant {
            LossVariant::Perceptual => perceptual_loss(r, self.pipeline.back_end(front, None)?),
            LossVariant::Mse => mse_loss(r, wave),
        }
    }

    fn value(&self, clip: &AudioClip) -> Result<f64> {
        match self.variant {
            LossVariant::Perceptual => Ok(perceptual_loss_values(
                &self.reference,
                &self.pipeline.extract(clip)?.values,
            )?
            .0),
            LossVariant::Mse => {
                let d = clip
                    .samples()
                    .iter()
                    .zip(self.reference.data())
                    .map(|(a, b)| (a - b).powi(2));
                Ok(d.sum::<f64>() / clip.len() as f64)
            }
        }
    }
}

/// Autoencoder attack on one clip.
///
/// `target` is used in targeted mode; when absent one is drawn from `rng`.
/// Dropout is on for the optimization passes and off for the per-iteration
/// goal check, which runs the full pipeline (fresh VAD) on the quantized
/// output.
pub fn foolhd_attack(
    x: &AudioClip,
    y: usize,
    classifier: &SpeakerClassifier,
    cfg: &AttackConfig,
    target: Option<usize>,
    rng: &mut dyn RngCore,
) -> Result<AttackResult> {
    cfg.validate()?;
    check_inputs(x, y, classifier)?;
    let target = match cfg.mode {
        AttackMode::Untargeted => None,
        AttackMode::Targeted => Some(match target {
            Some(t) => {
                contract!(
                    t < classifier.n_classes() && t != y,
                    "target {t} must be another valid class"
                );
                t
            }
            None => choose_random_target(y, classifier.n_classes(), rng)?,
        }),
    };
    let pipeline = classifier.pipeline();
    let perceptual = MfccPipeline::new(MfccConfig::perceptual())?;
    contract!(
        pipeline.shares_front_end(&perceptual),
        "classifier front end differs from the perceptual front end"
    );
    let keep = pipeline.vad_frames(x)?;
    let distortion = Distortion::new(cfg.loss_variant, x)?;

    let plan = Arc::new(Mdct::new(MDCT_FRAME_LEN)?);
    let spec = plan.mdct(x);
    let (s_norm, stats) = normalize_spectrogram(&spec.coeffs);
    let imdct = ImdctOp::new(plan.clone(), x.len());

    let mut gca = Gca::new(cfg.gca(), rng)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..AdamConfig::default()
        },
        gca.params().tensors(),
    );
    let trainable = gca.params().trainable().to_vec();
    let mut pool = CandidatePool::default();
    let mut trace = Vec::with_capacity(cfg.max_iterations);
    let mut last = None;
    for m in 1..=cfg.max_iterations {
        let tape = Tape::new();
        let p = gca.params().bind(&tape);
        let out = gca.forward(&p, tape.constant(s_norm.clone()), Some(&mut *rng))?;
        let wave = denormalize_var(out, &stats)?.linear(imdct.clone())?;
        let front = pipeline.front_end(wave)?;
        let lp = distortion.on_tape(wave, front)?;
        let logits = classifier.logits_from_features(pipeline.back_end(front, keep.as_deref())?)?;
        let la = match target {
            None => untargeted_margin(logits, y)?,
            Some(t) => targeted_margin(logits, t)?,
        };
        let total = total_loss(lp, la, cfg.perceptual_weight)?;
        trace.push(IterationRecord {
            perceptual: lp.item(),
            adversarial: la.item(),
            total: total.item(),
            linf: None,
        });
        let mut grads = tape.backward(total)?;
        let grads = p.gradients(&mut grads);
        drop(p);
        opt.step(&mut gca.params_mut().tensors_mut(), &grads, &trainable)?;

        let clip = reconstruct(&gca, &s_norm, &stats, &plan, x)?;
        let (pred, loss_a, ok) = evaluate(classifier, &clip, y, target)?;
        if ok {
            let lp = distortion.value(&clip)?;
            pool.push(
                Candidate {
                    iteration: m,
                    perceptual: lp,
                    prediction: pred,
                },
                clip.clone(),
                loss_a,
            );
        }
        last = Some((clip, pred, loss_a));
    }
    let (adversarial, prediction, perceptual_value, adversarial_loss, success) = match pool.best() {
        Some((c, clip, la)) => (clip.clone(), c.prediction, c.perceptual, la, true),
        None => {
            let (clip, pred, la) = last.expect("at least one iteration ran");
            let lp = distortion.value(&clip)?;
            (clip, pred, lp, la, false)
        }
    };
    Ok(AttackResult {
        adversarial,
        label: y,
        prediction,
        target,
        success,
        perceptual: perceptual_value,
        adversarial_loss,
        iterations: cfg.max_iterations,
        trace,
        pool: pool.entries().to_vec(),
    })
}

/// Dropout-free reconstruction, quantized as it would be written to disk.
fn reconstruct(
    gca: &Gca,
    s_norm: &Tensor,
    stats: &crate::nets::NormStats,
    plan: &Mdct,
    x: &AudioClip,
) -> Result<AudioClip> {
    let tape = Tape::no_grad();
    let p = gca.params().bind_frozen(&tape);
    let out = gca
        .forward(&p, tape.constant(s_norm.clone()), None)?
        .value();
    let s_dot = denormalize_spectrogram(&out, stats);
    let samples = plan.inverse(s_dot.data(), x.len());
    let samples = samples
        .into_iter()
        .map(|v| if v.is_finite() { v } else { 0.0 })
        .collect();
    Ok(AudioClip::new(samples, x.sample_rate())?.quantize_pcm16())
}

/// Gradient of the true-class cross-entropy w.r.t. the waveform, with the
/// VAD selection of the original clip held fixed.
fn ce_gradient(
    classifier: &SpeakerClassifier,
    wave: &[f64],
    y: usize,
    keep: Option<&[usize]>,
) -> Result<(Vec<f64>, f64)> {
    let tape = Tape::new();
    let w = tape.param(Tensor::from_vec(wave.to_vec()));
    let logits = classifier.logits_var(w, keep)?;
    let loss = cross_entropy(logits, &[y])?;
    let mut grads = tape.backward(loss)?;
    let g = grads.take(w).expect("waveform is a leaf");
    Ok((g.into_data(), loss.item()))
}

fn linf(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

fn baseline_result(
    x: &AudioClip,
    y: usize,
    classifier: &SpeakerClassifier,
    adv: Vec<f64>,
    trace: Vec<IterationRecord>,
    iterations: usize,
) -> Result<AttackResult> {
    let clip = AudioClip::new(adv, x.sample_rate())?.quantize_pcm16();
    let (prediction, adversarial_loss, success) = evaluate(classifier, &clip, y, None)?;
    let perceptual = Distortion::new(LossVariant::Perceptual, x)?.value(&clip)?;
    Ok(AttackResult {
        adversarial: clip,
        label: y,
        prediction,
        target: None,
        success,
        perceptual,
        adversarial_loss,
        iterations,
        trace,
        pool: Vec::new(),
    })
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed-gradient ascent step of size `epsilon` on the cross-entropy.
pub fn fgsm_attack(
    x: &AudioClip,
    y: usize,
    classifier: &SpeakerClassifier,
    epsilon: f64,
) -> Result<AttackResult> {
    check_inputs(x, y, classifier)?;
    contract!(
        epsilon >= 0.0 && epsilon.is_finite(),
        "epsilon must be non-negative"
    );
    let keep = classifier.pipeline().vad_frames(x)?;
    let (g, ce) = ce_gradient(classifier, x.samples(), y, keep.as_deref())?;
    let adv: Vec<f64> = x
        .samples()
        .iter()
        .zip(&g)
        .map(|(&v, &d)| (v + epsilon * sign(d)).clamp(-1.0, 1.0))
        .collect();
    let trace = vec![IterationRecord {
        perceptual: 0.0,
        adversarial: -ce,
        total: -ce,
        linf: Some(linf(&adv, x.samples())),
    }];
    baseline_result(x, y, classifier, adv, trace, 1)
}

/// Iterative FGSM with step `2 epsilon / iterations`, projected onto the
/// `epsilon` ball around `x` and clamped to `[-1, 1]` after every step.
pub fn bim_attack(
    x: &AudioClip,
    y: usize,
    classifier: &SpeakerClassifier,
    epsilon: f64,
    iterations: usize,
) -> Result<AttackResult> {
    check_inputs(x, y, classifier)?;
    contract!(
        epsilon >= 0.0 && epsilon.is_finite(),
        "epsilon must be non-negative"
    );
    contract!(iterations >= 1, "BIM needs at least one iteration");
    let keep = classifier.pipeline().vad_frames(x)?;
    let alpha = 2.0 * epsilon / iterations as f64;
    let orig = x.samples();
    let mut adv = orig.to_vec();
    let mut trace = Vec::with_capacity(iterations);
    for _ in 0..iterations {
        let (g, ce) = ce_gradient(classifier, &adv, y, keep.as_deref())?;
        for ((a, &o), &d) in adv.iter_mut().zip(orig).zip(&g) {
            let stepped = *a + alpha * sign(d);
            *a = stepped.clamp(o - epsilon, o + epsilon).clamp(-1.0, 1.0);
        }
        trace.push(IterationRecord {
            perceptual: 0.0,
            adversarial: -ce,
            total: -ce,
            linf: Some(linf(&adv, orig)),
        });
    }
    baseline_result(x, y, classifier, adv, trace, iterations)
}

/// Scalar parts of the objective for an adversarial clip.
pub fn loss_breakdown(
    x: &AudioClip,
    x_adv: &AudioClip,
    classifier: &SpeakerClassifier,
    label: usize,
    target: Option<usize>,
) -> Result<LossBreakdown> {
    let pipeline = MfccPipeline::new(MfccConfig::perceptual())?;
    let (perceptual, frame_cosines) = perceptual_loss_values(
        &pipeline.extract(x)?.values,
        &pipeline.extract(x_adv)?.values,
    )?;
    let logits = classifier.predict(x_adv)?.logits;
    let adversarial = goal_loss(&logits, label, target)?;
    Ok(LossBreakdown {
        perceptual,
        adversarial,
        total: perceptual + adversarial,
        frame_cosines,
    })
}
