//! Dice, focal and mask-text similarity losses and their weighted sum.

use crate::error::{Error, Result};
use crate::tensor::{concat, Tensor, Var};

/// Additive smoothing of the dice ratio.
pub const DICE_SMOOTHING: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub dice: f64,
    pub focal: f64,
    pub sim: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            dice: 5.0,
            focal: 2.0,
            sim: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.dice, self.focal, self.sim].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be nonnegative: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        Self { alpha: 0.25, gamma: 2.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossComponents<T> {
    pub dice: T,
    pub focal: T,
    pub sim: T,
}

impl<'t> LossComponents<Var<'t>> {
    pub fn values(&self) -> Result<LossComponents<f64>> {
        Ok(LossComponents {
            dice: self.dice.value().item()?,
            focal: self.focal.value().item()?,
            sim: self.sim.value().item()?,
        })
    }
}

fn frames_and_pixels(shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [t, rest @ ..] if !rest.is_empty() => Ok((*t, rest.iter().product())),
        _ => Err(Error::Contract(format!("loss input {shape:?} has no frame axis"))),
    }
}

fn check_gt(pred: &Var<'_>, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "loss",
            lhs: pred.shape(),
            rhs: gt.shape().to_vec(),
        });
    }
    Ok(())
}

/// `1 - (2Σpg + 1) / (Σp + Σg + 1)` per frame, averaged over frames.
pub fn dice_loss<'t>(probs: Var<'t>, gt: &Tensor) -> Result<Var<'t>> {
    check_gt(&probs, gt)?;
    let (t, n) = frames_and_pixels(gt.shape())?;
    let tape = probs.tape();
    let p = probs.reshape(&[t, n])?;
    let g = gt.reshape(&[t, n])?;
    let g_sum = Tensor::new(&[t], g.data().chunks(n).map(|r| r.iter().sum()).collect())?;
    let inter = p.mul(tape.constant(g))?.sum_lastdim();
    let num = inter.scale(2.0).add_scalar(DICE_SMOOTHING);
    let den = p.sum_lastdim().add(tape.constant(g_sum))?.add_scalar(DICE_SMOOTHING);
    Ok(num.div(den)?.neg().add_scalar(1.0).mean())
}

/// Mean over pixels of `-α_t (1 - p_t)^γ ln p_t`.
pub fn focal_loss<'t>(logits: Var<'t>, gt: &Tensor, params: FocalParams) -> Result<Var<'t>> {
    check_gt(&logits, gt)?;
    let tape = logits.tape();
    let FocalParams { alpha, gamma } = params;
    let sign = gt.map(|g| 2.0 * g - 1.0);
    let alpha_t = gt.map(|g| g * alpha + (1.0 - g) * (1.0 - alpha));
    // z = s·x so that p_t = σ(z) and 1 - p_t = σ(-z)
    let z = logits.mul(tape.constant(sign))?;
    let log_pt = z.log_sigmoid();
    let modulator = if gamma == 0.0 {
        tape.constant(Tensor::ones(gt.shape()))
    } else if gamma == 2.0 {
        z.neg().sigmoid().square()
    } else {
        z.neg().log_sigmoid().scale(gamma).exp()
    };
    Ok(modulator
        .mul(log_pt)?
        .mul(tape.constant(alpha_t))?
        .neg()
        .mean())
}

/// Mask-weighted average of `features: [N, C]` under `weights: [N, 1]`;
/// all-zero weights fall back to the plain mean.
pub fn masked_pool<'t>(weights: Var<'t>, features: Var<'t>) -> Result<Var<'t>> {
    let n = features.shape()[0];
    let total = weights.value().sum();
    if total > 0.0 {
        let w = weights.sum().reshape(&[1, 1])?;
        weights.transpose()?.matmul(features)?.div(w)
    } else {
        let ones = weights.tape().constant(Tensor::full(&[1, n], 1.0 / n as f64));
        ones.matmul(features)
    }
}

/// `1 - cos(a, b)` for two `[1, C]` rows.
pub fn cosine_distance<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    const NORM_EPS: f64 = 1e-12;
    let dot = a.mul(b)?.sum();
    let na = a.square().sum().add_scalar(NORM_EPS).sqrt();
    let nb = b.square().sum().add_scalar(NORM_EPS).sqrt();
    Ok(dot.div(na.mul(nb)?)?.neg().add_scalar(1.0))
}

/// Mean over frames of `1 - cos(pool(p, F_gl), sentence)`.
///
/// This is a stand-in: the published method constrains mask-text
/// similarity without giving the exact form, so this uses the simplest
/// construction that fits the description.
///
/// `pooled[t]: [N_f, 1]`, `features[t]: [N_f, C]`, `sentence: [T, C]`.
pub fn mask_text_similarity_loss<'t>(
    pooled: &[Var<'t>],
    features: &[Var<'t>],
    sentence: Var<'t>,
) -> Result<Var<'t>> {
    if pooled.is_empty() || pooled.len() != features.len() || sentence.shape()[0] != pooled.len() {
        return Err(Error::Contract(format!(
            "similarity loss over {} masks, {} features, sentence {:?}",
            pooled.len(),
            features.len(),
            sentence.shape()
        )));
    }
    let per_frame = pooled
        .iter()
        .zip(features)
        .enumerate()
        .map(|(t, (&p, &f))| {
            let v = masked_pool(p, f)?;
            let s = sentence.slice(0, t, t + 1)?;
            cosine_distance(v, s)?.reshape(&[1])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(concat(&per_frame, 0)?.mean())
}

/// `λ_dice·L_dice + λ_focal·L_focal + λ_sim·L_sim`.
pub fn total_loss<'t>(c: &LossComponents<Var<'t>>, w: LossWeights) -> Result<Var<'t>> {
    c.dice
        .scale(w.dice)
        .add(c.focal.scale(w.focal))?
        .add(c.sim.scale(w.sim))
}

/// Plain-number counterpart of [`total_loss`].
pub fn total_loss_value(c: LossComponents<f64>, w: LossWeights) -> f64 {
    w.dice * c.dice + w.focal * c.focal + w.sim * c.sim
}
