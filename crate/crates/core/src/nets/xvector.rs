use rand::seq::SliceRandom;
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::he_normal;
use crate::dsp::{AudioClip, FeatureMatrix, MfccConfig, MfccPipeline};
use crate::error::{contract, Result};
use crate::losses::cross_entropy;
use crate::tensor::{Adam, AdamConfig, BatchStats, Bound, ParamId, ParamStore, Tape, Tensor, Var};

/// Layer sizes of the x-vector style classifier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct XVectorConfig {
    pub feat_dim: usize,
    /// Width of every time-delay layer.
    pub channels: usize,
    /// `(kernel, dilation)` of each time-delay layer.
    pub tdnn: Vec<(usize, usize)>,
    /// Hidden units of the attention scoring head.
    pub attention_dim: usize,
    /// Hidden fully connected widths; a final linear layer maps to classes.
    pub fc: Vec<usize>,
    pub n_classes: usize,
    pub dropout: f64,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl XVectorConfig {
    pub fn new(feat_dim: usize, n_classes: usize) -> Self {
        Self {
            feat_dim,
            channels: 64,
            tdnn: vec![(5, 1), (3, 2), (3, 3), (1, 1), (1, 1)],
            attention_dim: 32,
            fc: vec![128, 64],
            n_classes,
            dropout: 1e-3,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }

    /// Fewest input frames the time-delay stack accepts.
    pub fn min_frames(&self) -> usize {
        1 + self.tdnn.iter().map(|&(k, d)| (k - 1) * d).sum::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        contract!(
            self.feat_dim >= 1 && self.channels >= 1,
            "classifier widths must be positive"
        );
        contract!(
            !self.tdnn.is_empty(),
            "classifier needs at least one time-delay layer"
        );
        contract!(
            self.tdnn.iter().all(|&(k, d)| k >= 1 && d >= 1),
            "time-delay kernels and dilations must be positive"
        );
        contract!(
            self.attention_dim >= 1,
            "attention head needs at least one unit"
        );
        contract!(
            self.fc.iter().all(|&w| w >= 1),
            "fully connected widths must be positive"
        );
        contract!(self.n_classes >= 2, "classifier needs at least 2 classes");
        contract!(
            (0.0..1.0).contains(&self.dropout),
            "dropout must lie in [0, 1)"
        );
        contract!(
            self.bn_eps > 0.0 && self.bn_momentum > 0.0 && self.bn_momentum <= 1.0,
            "invalid batch norm constants"
        );
        Ok(())
    }
}

/// Batch norm with running statistics for inference.
#[derive(Clone, Debug)]
struct Norm {
    gamma: ParamId,
    beta: ParamId,
    mean: ParamId,
    var: ParamId,
    eps: f64,
}

impl Norm {
    fn new(store: &mut ParamStore, name: &str, c: usize, eps: f64) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[c])),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c])),
            mean: store.add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c])),
            var: store.add_buffer(format!("{name}.running_var"), Tensor::ones(&[c])),
            eps,
        }
    }

    /// Normalizes over channel axis 1 of `B x C` or `B x C x T`.
    fn apply<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        training: bool,
    ) -> Result<(Var<'t>, Option<BatchStats>)> {
        if training {
            let (y, stats) = x.batch_norm(p[self.gamma], p[self.beta], 1, self.eps)?;
            return Ok((y, Some(stats)));
        }
        let c = x.shape()[1];
        let per_channel = |v: Var<'t>| -> Result<Var<'t>> {
            if x.shape().len() == 3 {
                v.reshape(&[c, 1])
            } else {
                Ok(v)
            }
        };
        let mean = p[self.mean];
        let inv_std = x
            .tape()
            .constant(p[self.var].value().map(|v| 1.0 / (v + self.eps).sqrt()));
        let scale = per_channel(inv_std.mul(p[self.gamma])?)?;
        let y = x
            .sub(per_channel(mean)?)?
            .mul(scale)?
            .add(per_channel(p[self.beta])?)?;
        Ok((y, None))
    }

    fn update(&self, store: &mut ParamStore, stats: &BatchStats, momentum: f64) {
        let n = stats.count as f64;
        let unbiased = if stats.count > 1 { n / (n - 1.0) } else { 1.0 };
        for (r, m) in store
            .get_mut(self.mean)
            .data_mut()
            .iter_mut()
            .zip(&stats.mean)
        {
            *r = (1.0 - momentum) * *r + momentum * m;
        }
        for (r, v) in store
            .get_mut(self.var)
            .data_mut()
            .iter_mut()
            .zip(&stats.var)
        {
            *r = (1.0 - momentum) * *r + momentum * v * unbiased;
        }
    }
}

/// Parameters of the attention head used by [`attentive_stat_pooling`].
#[derive(Clone, Copy, Debug)]
pub struct AttentionHead {
    /// `H x C x 1`.
    pub w: ParamId,
    /// `H x 1`.
    pub b: ParamId,
    /// `1 x H x 1`.
    pub v: ParamId,
}

/// Variance floor applied before the square root in pooling.
pub const POOL_VAR_FLOOR: f64 = 1e-8;

/// Attention-weighted mean and standard deviation over time.
///
/// `h` is `B x C x T`; the scores `v . tanh(W h_t + b)` are softmaxed over
/// `t`. Returns `B x 2C` as `[mean, std]`.
pub fn attentive_stat_pooling<'t>(
    h: Var<'t>,
    head: &AttentionHead,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    let shape = h.shape();
    contract!(shape.len() == 3, "pooling expects B x C x T, got {shape:?}");
    contract!(
        shape[2] >= 2,
        "pooling needs at least 2 frames, got {}",
        shape[2]
    );
    let hidden = h.conv1d(p[head.w], 1)?.add(p[head.b])?.tanh();
    let alpha = hidden.conv1d(p[head.v], 1)?.softmax(2)?;
    let mean = h.mul(alpha)?.sum_axis(2)?;
    let second = h.square().mul(alpha)?.sum_axis(2)?;
    let var = second.sub(mean.square())?.clamp_min(POOL_VAR_FLOOR);
    h.tape().concat(&[mean, var.sqrt()?], 1)
}

/// Forward pass outputs.
pub struct XVectorOutput<'t> {
    /// `B x N`.
    pub logits: Var<'t>,
    /// Batch statistics per normalization layer (training mode only).
    pub stats: Vec<BatchStats>,
}

/// Time-delay network with attentive statistics pooling.
#[derive(Clone, Debug)]
pub struct XVectorModel {
    cfg: XVectorConfig,
    params: ParamStore,
    tdnn: Vec<(ParamId, Norm)>,
    attention: AttentionHead,
    fc: Vec<(ParamId, Norm)>,
    out_w: ParamId,
    out_b: ParamId,
}

impl XVectorModel {
    pub fn new(cfg: XVectorConfig, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let c = cfg.channels;
        let mut tdnn = Vec::new();
        let mut c_in = cfg.feat_dim;
        for (i, &(k, _)) in cfg.tdnn.iter().enumerate() {
            let w = params.add(
                format!("tdnn{i}.w"),
                he_normal(rng, &[c, c_in, k], c_in * k),
            );
            tdnn.push((
                w,
                Norm::new(&mut params, &format!("tdnn{i}.bn"), c, cfg.bn_eps),
            ));
            c_in = c;
        }
        let h = cfg.attention_dim;
        let attention = AttentionHead {
            w: params.add("att.w", he_normal(rng, &[h, c, 1], c)),
            b: params.add("att.b", Tensor::zeros(&[h, 1])),
            v: params.add("att.v", he_normal(rng, &[1, h, 1], h)),
        };
        let mut fc = Vec::new();
        let mut d_in = 2 * c;
        for (i, &d) in cfg.fc.iter().enumerate() {
            let w = params.add(format!("fc{i}.w"), he_normal(rng, &[d_in, d], d_in));
            fc.push((
                w,
                Norm::new(&mut params, &format!("fc{i}.bn"), d, cfg.bn_eps),
            ));
            d_in = d;
        }
        let out_w = params.add("out.w", he_normal(rng, &[d_in, cfg.n_classes], d_in));
        let out_b = params.add("out.b", Tensor::zeros(&[cfg.n_classes]));
        Ok(Self {
            cfg,
            params,
            tdnn,
            attention,
            fc,
            out_w,
            out_b,
        })
    }

    pub fn config(&self) -> &XVectorConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn attention(&self) -> &AttentionHead {
        &self.attention
    }

    /// Output layer `(weights [D x N], bias [N])`.
    pub fn output_layer(&self) -> (ParamId, ParamId) {
        (self.out_w, self.out_b)
    }

    /// `x` is `B x feat_dim x T`. With `dropout_rng` the pass runs in
    /// training mode (batch statistics, dropout); without it, batch norm
    /// uses running statistics and dropout is off.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<XVectorOutput<'t>> {
        let shape = x.shape();
        contract!(
            shape.len() == 3 && shape[1] == self.cfg.feat_dim,
            "classifier expects B x {} x T features, got {shape:?}",
            self.cfg.feat_dim
        );
        let min = self.cfg.min_frames();
        contract!(
            shape[2] >= min + 1,
            "classifier needs at least {} frames, got {}",
            min + 1,
            shape[2]
        );
        let training = dropout_rng.is_some();
        let mut stats = Vec::new();
        let mut h = x;
        let block = |h: Var<'t>,
                     norm: &Norm,
                     rng: Option<&mut dyn RngCore>,
                     stats: &mut Vec<BatchStats>|
         -> Result<Var<'t>> {
            let (y, s) = norm.apply(p, h, training)?;
            stats.extend(s);
            let y = y.relu();
            match rng {
                Some(r) => y.dropout(self.cfg.dropout, true, r),
                None => Ok(y),
            }
        };
        for (&(_, d), (w, norm)) in self.cfg.tdnn.iter().zip(&self.tdnn) {
            h = h.conv1d(p[*w], d)?;
            h = block(h, norm, super::reborrow(&mut dropout_rng), &mut stats)?;
        }
        let mut e = attentive_stat_pooling(h, &self.attention, p)?;
        for (w, norm) in &self.fc {
            e = e.matmul(p[*w])?;
            e = block(e, norm, super::reborrow(&mut dropout_rng), &mut stats)?;
        }
        let logits = e.matmul(p[self.out_w])?.add(p[self.out_b])?;
        Ok(XVectorOutput { logits, stats })
    }

    /// Inference logits of one `T x F` feature matrix as a length-`N` var.
    pub fn logits<'t>(&self, p: &Bound<'t>, features: Var<'t>) -> Result<Var<'t>> {
        let shape = features.shape();
        contract!(shape.len() == 2, "expected T x F features, got {shape:?}");
        let x = features.transpose()?.reshape(&[1, shape[1], shape[0]])?;
        let out = self.forward(p, x, None)?;
        out.logits.reshape(&[self.cfg.n_classes])
    }

    /// Folds training-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let norms: Vec<Norm> = self
            .tdnn
            .iter()
            .chain(&self.fc)
            .map(|(_, n)| n.clone())
            .collect();
        contract!(
            stats.len() == norms.len(),
            "{} batch statistics for {} normalization layers",
            stats.len(),
            norms.len()
        );
        for (n, s) in norms.iter().zip(stats) {
            n.update(&mut self.params, s, self.cfg.bn_momentum);
        }
        Ok(())
    }
}

/// Classifier prediction for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub logits: Vec<f64>,
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// An x-vector model together with the MFCC front end it was trained on.
#[derive(Debug)]
pub struct SpeakerClassifier {
    model: XVectorModel,
    pipeline: MfccPipeline,
}

impl Clone for SpeakerClassifier {
    fn clone(&self) -> Self {
        Self::new(self.model.clone(), self.pipeline.config().clone())
            .expect("config already validated")
    }
}

impl SpeakerClassifier {
    pub fn new(model: XVectorModel, mfcc: MfccConfig) -> Result<Self> {
        contract!(
            mfcc.feature_dim() == model.config().feat_dim,
            "front end yields {} features, model expects {}",
            mfcc.feature_dim(),
            model.config().feat_dim
        );
        Ok(Self {
            model,
            pipeline: MfccPipeline::new(mfcc)?,
        })
    }

    pub fn model(&self) -> &XVectorModel {
        &self.model
    }

    pub fn pipeline(&self) -> &MfccPipeline {
        &self.pipeline
    }

    pub fn n_classes(&self) -> usize {
        self.model.config().n_classes
    }

    /// Frozen-parameter logits of a waveform var. `keep` is the VAD frame
    /// selection to apply (computed elsewhere and held fixed).
    pub fn logits_var<'t>(&self, wave: Var<'t>, keep: Option<&[usize]>) -> Result<Var<'t>> {
        let p = self.model.params().bind_frozen(wave.tape());
        let feats = self.pipeline.features(wave, keep)?;
        self.model.logits(&p, feats)
    }

    /// Logits from already computed (possibly differentiable) features.
    pub fn logits_from_features<'t>(&self, feats: Var<'t>) -> Result<Var<'t>> {
        let p = self.model.params().bind_frozen(feats.tape());
        self.model.logits(&p, feats)
    }

    /// Full deployment pipeline: fresh VAD, features, inference.
    pub fn predict(&self, clip: &AudioClip) -> Result<Prediction> {
        let feats = self.pipeline.extract(clip)?;
        self.predict_features(&feats)
    }

    pub fn predict_features(&self, feats: &FeatureMatrix) -> Result<Prediction> {
        let tape = Tape::no_grad();
        let logits = self.logits_from_features(tape.constant(feats.values.clone()))?;
        let logits = logits.value().data().to_vec();
        Ok(Prediction {
            class: argmax(&logits),
            logits,
        })
    }
}

/// Optimization schedule for [`train_classifier`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Length of the random crop taken from each clip per step.
    pub crop_frames: usize,
    pub lr: f64,
    /// Multiplies the learning rate every `lr_decay_period` epochs.
    pub lr_decay: f64,
    pub lr_decay_period: usize,
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 16,
            crop_frames: 200,
            lr: 1e-3,
            lr_decay: 0.05,
            lr_decay_period: 30,
            weight_decay: 0.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.epochs >= 1, "training needs at least one epoch");
        contract!(
            self.batch_size >= 2,
            "batch norm training needs batches of at least 2"
        );
        contract!(
            self.lr > 0.0 && self.lr.is_finite(),
            "learning rate must be positive"
        );
        contract!(
            self.lr_decay > 0.0 && self.lr_decay_period >= 1,
            "invalid learning-rate decay"
        );
        contract!(
            self.weight_decay >= 0.0,
            "weight decay must be non-negative"
        );
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi((epoch / self.lr_decay_period) as i32)
    }
}

/// Per-epoch record of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean minibatch cross-entropy per epoch.
    pub epoch_loss: Vec<f64>,
    /// Inference-mode accuracy on the full training clips after training.
    pub train_accuracy: f64,
    pub crop_frames: usize,
}

/// Trains a fresh classifier with Adam on random fixed-length crops.
pub fn train_classifier(
    clips: &[(AudioClip, usize)],
    mfcc: &MfccConfig,
    model_cfg: Option<XVectorConfig>,
    train: &TrainConfig,
    rng: &mut dyn RngCore,
) -> Result<(SpeakerClassifier, TrainingReport)> {
    train.validate()?;
    let n_classes = clips.iter().map(|c| c.1).max().map_or(0, |m| m + 1);
    contract!(n_classes >= 2, "training needs at least 2 classes");
    let mut counts = vec![0usize; n_classes];
    clips.iter().for_each(|c| counts[c.1] += 1);
    contract!(
        counts.iter().all(|&n| n >= 2),
        "every class needs at least 2 training clips, got {counts:?}"
    );
    let cfg = model_cfg.unwrap_or_else(|| XVectorConfig::new(mfcc.feature_dim(), n_classes));
    contract!(
        cfg.n_classes == n_classes && cfg.feat_dim == mfcc.feature_dim(),
        "model config does not match {n_classes} classes / {} features",
        mfcc.feature_dim()
    );
    let pipeline = MfccPipeline::new(mfcc.clone())?;
    let feats: Vec<FeatureMatrix> = clips
        .par_iter()
        .map(|(clip, _)| pipeline.extract(clip))
        .collect::<Result<_>>()?;
    let shortest = feats.iter().map(|f| f.frames()).min().unwrap_or(0);
    let crop = train.crop_frames.min(shortest);
    contract!(
        crop > cfg.min_frames(),
        "clips keep only {shortest} frames after VAD; the classifier needs more than {}",
        cfg.min_frames()
    );
    // F x T per clip, so crops are contiguous column ranges
    let columns: Vec<Tensor> = feats.iter().map(|f| f.values.transpose2()).collect();

    let mut model = XVectorModel::new(cfg, rng)?;
    let mut opt = Adam::new(
        AdamConfig {
            lr: train.lr,
            weight_decay: train.weight_decay,
            ..AdamConfig::default()
        },
        model.params().tensors(),
    );
    let f_dim = mfcc.feature_dim();
    let mut order: Vec<usize> = (0..clips.len()).collect();
    let mut epoch_loss = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        opt.set_lr(train.lr_at(epoch));
        order.shuffle(rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(train.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let mut data = Vec::with_capacity(batch.len() * f_dim * crop);
            let mut labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let t = columns[i].shape()[1];
                let start = rng.gen_range(0..=t - crop);
                for f in 0..f_dim {
                    data.extend_from_slice(&columns[i].row(f)[start..start + crop]);
                }
                labels.push(clips[i].1);
            }
            let x = Tensor::new(&[batch.len(), f_dim, crop], data)?;
            let tape = Tape::new();
            let p = model.params().bind(&tape);
            let out = model.forward(&p, tape.constant(x), Some(&mut *rng))?;
            let loss = cross_entropy(out.logits, &labels)?;
            total += loss.item();
            batches += 1;
            let mut grads = tape.backward(loss)?;
            let grads = p.gradients(&mut grads);
            let stats = out.stats;
            drop(p);
            let trainable = model.params().trainable().to_vec();
            opt.step(&mut model.params_mut().tensors_mut(), &grads, &trainable)?;
            model.update_running_stats(&stats)?;
        }
        epoch_loss.push(total / batches.max(1) as f64);
    }
    let classifier = SpeakerClassifier::new(model, mfcc.clone())?;
    let correct = feats
        .iter()
        .zip(clips)
        .map(|(f, (_, y))| {
            classifier
                .predict_features(f)
                .map(|p| usize::from(p.class == *y))
        })
        .sum::<Result<usize>>()?;
    let report = TrainingReport {
        epoch_loss,
        train_accuracy: correct as f64 / clips.len() as f64,
        crop_frames: crop,
    };
    Ok((classifier, report))
}
