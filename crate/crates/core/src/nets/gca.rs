use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::tensor::{Bound, ParamId, ParamStore, Tensor, Var};

/// Shape and regularization settings of the gated convolutional autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GcaConfig {
    /// Feature maps per gated layer.
    pub channels: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Square kernel extent (odd).
    pub kernel: usize,
    pub dropout: f64,
    /// Concatenate the input spectrogram to the encoder output.
    pub skip: bool,
    pub bn_eps: f64,
}

impl Default for GcaConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            encoder_layers: 3,
            decoder_layers: 4,
            kernel: 3,
            dropout: 1e-3,
            skip: true,
            bn_eps: 1e-5,
        }
    }
}

impl GcaConfig {
    pub fn validate(&self) -> Result<()> {
        contract!(self.channels >= 1, "GCA needs at least one channel");
        contract!(
            self.encoder_layers >= 1 && self.decoder_layers >= 1,
            "GCA needs at least one encoder and one decoder layer"
        );
        contract!(
            self.kernel % 2 == 1,
            "GCA kernel must be odd, got {}",
            self.kernel
        );
        contract!(
            (0.0..1.0).contains(&self.dropout),
            "GCA dropout must lie in [0, 1), got {}",
            self.dropout
        );
        contract!(self.bn_eps > 0.0, "batch norm epsilon must be positive");
        Ok(())
    }
}

/// Zero-mean unit-variance normalization constants of a spectrogram.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    /// Population standard deviation, floored at [`STD_FLOOR`].
    pub std: f64,
    /// The input was constant and `std` is the floor.
    pub degenerate: bool,
}

pub const STD_FLOOR: f64 = 1e-8;

pub fn normalize_spectrogram(s: &Tensor) -> (Tensor, NormStats) {
    let (mean, std) = crate::dsp::mean_std(s.data());
    let degenerate = std < STD_FLOOR;
    let std = std.max(STD_FLOOR);
    (
        s.map(|v| (v - mean) / std),
        NormStats {
            mean,
            std,
            degenerate,
        },
    )
}

/// Re-standardizes `y` to zero mean and unit variance, then restores the
/// saved statistics, so the result has exactly the input's mean and std.
pub fn denormalize_spectrogram(y: &Tensor, stats: &NormStats) -> Tensor {
    let (m, sd) = crate::dsp::mean_std(y.data());
    let sd = sd.max(STD_FLOOR);
    y.map(|v| (v - m) / sd * stats.std + stats.mean)
}

/// Differentiable [`denormalize_spectrogram`].
pub fn denormalize_var<'t>(y: Var<'t>, stats: &NormStats) -> Result<Var<'t>> {
    let centred = y.sub(y.mean())?;
    let sd = centred
        .square()
        .mean()
        .clamp_min(STD_FLOOR * STD_FLOOR)
        .sqrt()?;
    Ok(centred.div(sd)?.scale(stats.std).shift(stats.mean))
}

pub(crate) fn he_normal(rng: &mut dyn RngCore, shape: &[usize], fan_in: usize) -> Tensor {
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| normal.sample(rng)).collect()).expect("shape matches")
}

/// `conv_W(x) * sigmoid(conv_V(x))`, then batch norm and dropout.
#[derive(Clone, Debug)]
pub struct GatedConvLayer {
    pub w: ParamId,
    pub v: ParamId,
    pub gamma: ParamId,
    pub beta: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub dropout: f64,
    pub bn_eps: f64,
}

impl GatedConvLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dropout: f64,
        bn_eps: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        let shape = [c_out, c_in, kernel, kernel];
        let fan_in = c_in * kernel * kernel;
        Self {
            w: store.add(format!("{name}.w"), he_normal(rng, &shape, fan_in)),
            v: store.add(format!("{name}.v"), he_normal(rng, &shape, fan_in)),
            gamma: store.add(format!("{name}.bn.gamma"), Tensor::ones(&[c_out])),
            beta: store.add(format!("{name}.bn.beta"), Tensor::zeros(&[c_out])),
            c_in,
            c_out,
            dropout,
            bn_eps,
        }
    }

    /// Gated response before normalization. `x` is `C_in x H x W`.
    pub fn gated<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        contract!(
            shape.len() == 3 && shape[0] == self.c_in,
            "gated layer expects {} input channels, got shape {shape:?}",
            self.c_in
        );
        // one im2col pass serves both kernel banks
        let kernels = x.tape().concat(&[p[self.w], p[self.v]], 0)?;
        let both = x.conv2d(kernels)?;
        let feature = both.narrow(0, 0, self.c_out)?;
        let gate = both.narrow(0, self.c_out, self.c_out)?.sigmoid();
        feature.mul(gate)
    }

    /// Batch statistics are taken over the spatial extent of the single
    /// example in both modes; `dropout_rng` switches dropout on.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        x: Var<'t>,
        dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var<'t>> {
        let (y, _) = self
            .gated(p, x)?
            .batch_norm(p[self.gamma], p[self.beta], 0, self.bn_eps)?;
        match dropout_rng {
            Some(rng) => y.dropout(self.dropout, true, rng),
            None => Ok(y),
        }
    }
}

/// Gated convolutional autoencoder acting on a `frames x bins` spectrogram
/// viewed as a one-channel image.
#[derive(Clone, Debug)]
pub struct Gca {
    cfg: GcaConfig,
    params: ParamStore,
    encoder: Vec<GatedConvLayer>,
    decoder: Vec<GatedConvLayer>,
    head_w: ParamId,
    head_b: ParamId,
}

impl Gca {
    /// Fresh He-initialized network.
    pub fn new(cfg: GcaConfig, rng: &mut dyn RngCore) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let c = cfg.channels;
        let k = cfg.kernel;
        let mut encoder = Vec::with_capacity(cfg.encoder_layers);
        for i in 0..cfg.encoder_layers {
            let c_in = if i == 0 { 1 } else { c };
            encoder.push(GatedConvLayer::new(
                &mut params,
                &format!("enc{i}"),
                c_in,
                c,
                k,
                cfg.dropout,
                cfg.bn_eps,
                rng,
            ));
        }
        let mut decoder = Vec::with_capacity(cfg.decoder_layers);
        for i in 0..cfg.decoder_layers {
            let c_in = if i == 0 { c + usize::from(cfg.skip) } else { c };
            decoder.push(GatedConvLayer::new(
                &mut params,
                &format!("dec{i}"),
                c_in,
                c,
                k,
                cfg.dropout,
                cfg.bn_eps,
                rng,
            ));
        }
        let head_w = params.add("head.w", he_normal(rng, &[1, c, k, k], c * k * k));
        let head_b = params.add("head.b", Tensor::zeros(&[1, 1, 1]));
        Ok(Self {
            cfg,
            params,
            encoder,
            decoder,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &GcaConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn encoder(&self) -> &[GatedConvLayer] {
        &self.encoder
    }

    pub fn decoder(&self) -> &[GatedConvLayer] {
        &self.decoder
    }

    pub fn head(&self) -> (ParamId, ParamId) {
        (self.head_w, self.head_b)
    }

    /// Maps a normalized `frames x bins` spectrogram to a same-shaped
    /// output (still in the normalized domain). Dropout is active when an
    /// RNG is supplied.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        s: Var<'t>,
        mut dropout_rng: Option<&mut dyn RngCore>,
    ) -> Result<Var<'t>> {
        let shape = s.shape();
        contract!(
            shape.len() == 2,
            "GCA expects a frames x bins matrix, got {shape:?}"
        );
        let image = s.reshape(&[1, shape[0], shape[1]])?;
        let mut h = image;
        for layer in &self.encoder {
            h = layer.forward(p, h, super::reborrow(&mut dropout_rng))?;
        }
        if self.cfg.skip {
            h = s.tape().concat(&[h, image], 0)?;
        }
        for layer in &self.decoder {
            h = layer.forward(p, h, super::reborrow(&mut dropout_rng))?;
        }
        let out = h.conv2d(p[self.head_w])?.add(p[self.head_b])?;
        out.reshape(&shape)
    }
}
