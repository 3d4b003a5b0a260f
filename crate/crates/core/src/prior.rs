//! Mask prior generator: clip-wide spatiotemporal context over the video
//! embeddings, the object-aware global video feature `V_g`, and per-frame
//! pseudo-mask priors `M_p`.

use crate::error::{Error, Result};
use crate::nn::{AttnBlock, Ctx, FfnBlock, Mlp, ParamBuilder};
use crate::tensor::{Tensor, Var};

/// Which interactions of the context stage run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContextToggles {
    /// Self-attention over all `T·N_v` video tokens.
    pub self_interaction: bool,
    /// Cross-attention from the class tokens to the contextualised video.
    pub cross_interaction: bool,
}

impl Default for ContextToggles {
    fn default() -> Self {
        Self {
            self_interaction: true,
            cross_interaction: true,
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PriorOutputs<'t> {
    /// `[T·N_v, D]`
    pub v_prime: Var<'t>,
    /// `[T, D]`
    pub cls_prime: Var<'t>,
    /// `[T, N_v, D]`
    pub v_g: Var<'t>,
    /// Prior probabilities `[T, H_m/p, W_m/p]`.
    pub m_p: Var<'t>,
    /// `M_p` bilinearly resized to the decoder feature grid, `[T, h_f, w_f]`.
    pub dense: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct MaskPriorGenerator {
    dim: usize,
    grid: usize,
    self_attn: AttnBlock,
    self_ffn: FfnBlock,
    cross_attn: AttnBlock,
    pub global_mlp: Mlp,
    pub mask_mlp: Mlp,
}

impl MaskPriorGenerator {
    pub fn new(b: &mut ParamBuilder<'_>, dim: usize, grid: usize, heads: usize) -> Self {
        let mut s = b.scope("prior");
        Self {
            dim,
            grid,
            self_attn: AttnBlock::new(&mut s, "self", dim, heads),
            self_ffn: FfnBlock::new(&mut s, "self_ffn", dim),
            cross_attn: AttnBlock::new(&mut s, "cross", dim, heads),
            global_mlp: Mlp::new(&mut s, "global", (dim, dim, dim)),
            mask_mlp: Mlp::new(&mut s, "mask", (dim, dim / 2, 1)),
        }
    }

    /// Unfold `V: [T, N_v, D]` and `V_cls: [T, 1, D]` across time and mix
    /// them clip-wide. Disabled interactions pass the unfolded input through.
    pub fn spatiotemporal_context<'t>(
        &self,
        cx: &Ctx<'t>,
        video: Var<'t>,
        cls: Var<'t>,
        toggles: ContextToggles,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let vs = video.shape();
        let [t, nv, d] = vs[..] else {
            return Err(Error::Contract(format!("video embeddings {vs:?}, expected [T,N_v,D]")));
        };
        if t == 0 {
            return Err(Error::Input("clip has no frames".into()));
        }
        let mut v = video.reshape(&[t * nv, d])?;
        let mut c = cls.reshape(&[t, d])?;
        if toggles.self_interaction {
            v = self.self_attn.forward(cx, v, v, None, None)?;
            v = self.self_ffn.forward(cx, v)?;
        }
        if toggles.cross_interaction {
            c = self.cross_attn.forward(cx, c, v, None, None)?;
        }
        Ok((v, c))
    }

    /// `V_g = MLP(V' ⊙ broadcast(V'_cls))`, reshaped to `[T, N_v, D]`.
    pub fn global_video_feature<'t>(
        &self,
        cx: &Ctx<'t>,
        v_prime: Var<'t>,
        cls_prime: Var<'t>,
    ) -> Result<Var<'t>> {
        let t = cls_prime.shape()[0];
        let nv = v_prime.shape()[0] / t.max(1);
        let v = v_prime.reshape(&[t, nv, self.dim])?;
        let c = cls_prime.reshape(&[t, 1, self.dim])?;
        self.global_mlp.forward(cx, v.mul(c)?)
    }

    /// `M_p = σ(MLP(V_g))` on the patch grid, plus its resize to `feature_grid`.
    pub fn prior_masks<'t>(
        &self,
        cx: &Ctx<'t>,
        v_g: Var<'t>,
        feature_grid: usize,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let t = v_g.shape()[0];
        let logits = self.mask_mlp.forward(cx, v_g)?;
        let m_p = logits.reshape(&[t, self.grid, self.grid])?.sigmoid();
        let dense = m_p.resize_bilinear(feature_grid, feature_grid)?;
        Ok((m_p, dense))
    }

    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        video: Var<'t>,
        cls: Var<'t>,
        toggles: ContextToggles,
        feature_grid: usize,
    ) -> Result<PriorOutputs<'t>> {
        let (v_prime, cls_prime) = self.spatiotemporal_context(cx, video, cls, toggles)?;
        let v_g = self.global_video_feature(cx, v_prime, cls_prime)?;
        let (m_p, dense) = self.prior_masks(cx, v_g, feature_grid)?;
        Ok(PriorOutputs {
            v_prime,
            cls_prime,
            v_g,
            m_p,
            dense,
        })
    }
}

/// The uninformative dense prompt used when no prior is generated.
pub fn neutral_dense(frames: usize, grid: usize) -> Tensor {
    Tensor::full(&[frames, grid, grid], 0.5)
}
