//! Loss stack and per-clip optimisation.

mod loss;
mod optim;

pub use loss::{
    cosine_distance, dice_loss, focal_loss, mask_text_similarity_loss, masked_pool, total_loss,
    total_loss_value, FocalParams, LossComponents, LossWeights, DICE_SMOOTHING,
};
pub use optim::AdamW;

use crate::error::{Error, Result};
use crate::model::{ClipInput, ClipOutputs, MemorySource, Model};
use crate::nn::{Ctx, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub focal: FocalParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            weight_decay: 0.01,
            weights: LossWeights::default(),
            focal: FocalParams::default(),
        }
    }
}

/// Loss components and their weighted total for one forward pass.
pub fn clip_loss<'t>(
    out: &ClipOutputs<'t>,
    gt: &Tensor,
    cfg: &TrainConfig,
) -> Result<(Var<'t>, LossComponents<Var<'t>>)> {
    let probs = Model::stack_frames(&out.probabilities)?;
    let logits = Model::stack_frames(&out.logits)?;
    let components = LossComponents {
        dice: dice_loss(probs, gt)?,
        focal: focal_loss(logits, gt, cfg.focal)?,
        sim: mask_text_similarity_loss(&out.pooled, &out.f_gl, out.sentence)?,
    };
    Ok((total_loss(&components, cfg.weights)?, components))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: f64,
    pub components: LossComponents<f64>,
}

#[derive(Clone, Debug)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub optimizer: AdamW,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.weights.validate()?;
        if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", cfg.lr)));
        }
        Ok(Self {
            cfg,
            optimizer: AdamW::new(cfg.lr, cfg.weight_decay),
        })
    }

    /// Loss and parameter gradients without updating anything.
    pub fn gradients(
        &self,
        model: &Model,
        store: &ParamStore,
        clip: &ClipInput,
        gt: &Tensor,
    ) -> Result<(StepReport, Vec<Tensor>)> {
        let tape = Tape::new();
        let cx = Ctx::train(&tape, store);
        let out = model.forward_clip(&cx, clip, MemorySource::Live)?;
        let (total, components) = clip_loss(&out, gt, &self.cfg)?;
        let report = StepReport {
            loss: total.value().item()?,
            components: components.values()?,
        };
        if !report.loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {report:?}")));
        }
        let grads = cx.gradients(&tape.backward(total)?);
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient for {}",
                store.name(store.ids().nth(i).expect("aligned"))
            )));
        }
        Ok((report, grads))
    }

    /// One optimiser step on one clip. Returns the pre-update loss.
    pub fn step(
        &mut self,
        model: &Model,
        store: &mut ParamStore,
        clip: &ClipInput,
        gt: &Tensor,
    ) -> Result<StepReport> {
        let (report, grads) = self.gradients(model, store, clip, gt)?;
        self.optimizer.step(store.tensors_mut(), &grads)?;
        Ok(report)
    }
}
