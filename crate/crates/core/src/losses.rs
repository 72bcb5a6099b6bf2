//! Perceptual, adversarial-margin, waveform and cross-entropy losses.
//!
//! Every loss has a tape version built from differentiable primitives. The
//! cosine and perceptual losses also have plain-value versions that the
//! metrics reuse.

use std::rc::Rc;

use crate::error::{contract, Result};
use crate::tensor::{Tensor, Var};

/// Denominator floor for cosine similarity; keeps silent frames finite.
pub const COSINE_EPS: f64 = 1e-12;

/// Scalar components of one objective evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
    pub frame_cosines: Vec<f64>,
}

/// `a.b / sqrt(max(|a|^2, eps^2) max(|b|^2, eps^2))`, clamped to [-1, 1].
///
/// Taking one square root of the product (rather than a product of two
/// roots) makes `cos(a, a)` and `cos(a, -a)` exactly 1 and -1.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    contract!(
        !a.is_empty() && a.len() == b.len(),
        "cosine similarity needs equal non-empty vectors, got {} and {}",
        a.len(),
        b.len()
    );
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let floor = COSINE_EPS * COSINE_EPS;
    let na = a.iter().map(|x| x * x).sum::<f64>().max(floor);
    let nb = b.iter().map(|x| x * x).sum::<f64>().max(floor);
    Ok((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
}

/// Sum over frames of `1 - cos(f_t, g_t)` for two `T x F` matrices.
pub fn perceptual_loss_values(f: &Tensor, g: &Tensor) -> Result<(f64, Vec<f64>)> {
    contract!(
        f.rank() == 2 && f.shape() == g.shape(),
        "perceptual loss needs equal T x F matrices, got {:?} and {:?}",
        f.shape(),
        g.shape()
    );
    let cos = (0..f.shape()[0])
        .map(|t| cosine_similarity(f.row(t), g.row(t)))
        .collect::<Result<Vec<_>>>()?;
    Ok((cos.iter().map(|c| 1.0 - c).sum(), cos))
}

/// Row-wise cosine similarity of two `T x F` vars, as a length-`T` var.
pub fn row_cosines<'t>(f: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
    let (fs, gs) = (f.shape(), g.shape());
    contract!(
        fs.len() == 2 && fs == gs,
        "perceptual loss needs equal T x F matrices, got {fs:?} and {gs:?}"
    );
    let floor = COSINE_EPS * COSINE_EPS;
    let dot = f.mul(g)?.sum_axis(1)?;
    let nf = f.square().sum_axis(1)?.clamp_min(floor);
    let ng = g.square().sum_axis(1)?.clamp_min(floor);
    Ok(dot.div(nf.mul(ng)?.sqrt()?)?.clamp(-1.0, 1.0))
}

/// Differentiable perceptual loss `sum_t (1 - cos(f_t, g_t))`.
pub fn perceptual_loss<'t>(f: Var<'t>, g: Var<'t>) -> Result<Var<'t>> {
    let cos = row_cosines(f, g)?;
    let t = cos.shape()[0] as f64;
    Ok(cos.sum().neg().shift(t))
}

fn check_logits(z: &Var<'_>, class: usize) -> Result<usize> {
    let shape = z.shape();
    contract!(
        shape.len() == 1,
        "margin losses take a logit vector, got {shape:?}"
    );
    let n = shape[0];
    contract!(n >= 2, "margin losses need at least 2 classes, got {n}");
    contract!(class < n, "class {class} out of range for {n} logits");
    Ok(n)
}

/// `(z_class, max_{i != class} z_i)` as tape values.
fn class_and_runner_up<'t>(z: Var<'t>, class: usize) -> Result<(Var<'t>, Var<'t>)> {
    let n = check_logits(&z, class)?;
    let own = z.gather(Rc::from(vec![class]), &[1])?.reshape(&[])?;
    let others: Rc<[usize]> = (0..n).filter(|&i| i != class).collect();
    let m = others.len();
    let (best, _) = z.gather(others, &[m])?.max_with_index(None)?;
    Ok((own, best))
}

/// `z_y - max_{i != y} z_i`; negative exactly when the prediction differs
/// from `y`.
pub fn untargeted_margin<'t>(z: Var<'t>, y: usize) -> Result<Var<'t>> {
    let (own, best) = class_and_runner_up(z, y)?;
    own.sub(best)
}

/// `max_{i != t} z_i - z_t`; negative exactly when the prediction is `t`.
pub fn targeted_margin<'t>(z: Var<'t>, target: usize) -> Result<Var<'t>> {
    let (own, best) = class_and_runner_up(z, target)?;
    best.sub(own)
}

/// Plain-value untargeted margin.
pub fn untargeted_margin_values(z: &[f64], y: usize) -> Result<f64> {
    let (own, best) = margin_parts(z, y)?;
    Ok(own - best)
}

/// Plain-value targeted margin.
pub fn targeted_margin_values(z: &[f64], target: usize) -> Result<f64> {
    let (own, best) = margin_parts(z, target)?;
    Ok(best - own)
}

fn margin_parts(z: &[f64], class: usize) -> Result<(f64, f64)> {
    contract!(
        z.len() >= 2,
        "margin losses need at least 2 classes, got {}",
        z.len()
    );
    contract!(
        class < z.len(),
        "class {class} out of range for {} logits",
        z.len()
    );
    let best = z
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != class)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok((z[class], best))
}

/// `weight * perceptual + adversarial`. The weight defaults to 1, which is
/// the plain sum.
pub fn total_loss<'t>(
    perceptual: Var<'t>,
    adversarial: Var<'t>,
    weight: Option<f64>,
) -> Result<Var<'t>> {
    let w = weight.unwrap_or(1.0);
    contract!(
        w.is_finite() && w >= 0.0,
        "perceptual weight must be finite and non-negative"
    );
    let p = if w == 1.0 {
        perceptual
    } else {
        perceptual.scale(w)
    };
    p.add(adversarial)
}

/// Mean squared sample difference.
pub fn mse_loss<'t>(x: Var<'t>, x_adv: Var<'t>) -> Result<Var<'t>> {
    contract!(
        x.shape() == x_adv.shape(),
        "mse needs equal lengths, got {:?} and {:?}",
        x.shape(),
        x_adv.shape()
    );
    Ok(x_adv.sub(x)?.square().mean())
}

/// Mean cross-entropy of `B x N` logits (or one length-`N` vector) against
/// integer labels, via a max-shifted log-sum-exp.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let shape = logits.shape();
    let z = match shape.len() {
        1 => logits.reshape(&[1, shape[0]])?,
        2 => logits,
        _ => {
            return Err(crate::Error::Contract(format!(
                "cross entropy takes B x N logits, got {shape:?}"
            )))
        }
    };
    let (b, n) = (z.shape()[0], z.shape()[1]);
    contract!(
        labels.len() == b,
        "{} labels for {b} logit rows",
        labels.len()
    );
    contract!(
        labels.iter().all(|&y| y < n),
        "label out of range for {n} classes"
    );
    // shifting each row by its max is exact for log-sum-exp; the shift is
    // treated as a constant
    let zv = z.value();
    let shift: Vec<f64> = (0..b)
        .map(|r| zv.row(r).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    let shifted = z.sub(z.tape().constant(Tensor::new(&[b, 1], shift)?))?;
    let lse = shifted.exp().sum_axis(1)?.log()?;
    let index: Rc<[usize]> = labels.iter().enumerate().map(|(r, &y)| r * n + y).collect();
    let picked = shifted.gather(index, &[b])?;
    Ok(lse.sub(picked)?.mean())
}
