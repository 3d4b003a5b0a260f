//! Segmentation scaffold: toy image encoder, prompt encoder accepting sparse
//! and dense prompts together, two-way mask decoder, and memory encoder.

use crate::encoder::patchify;
use crate::error::{Error, Result};
use crate::nn::{AttnBlock, Ctx, FfnBlock, Linear, Mlp, ParamBuilder, ParamId};
use crate::tensor::{concat, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HeadConfig {
    /// Side of the segmentation input `H_s = W_s`.
    pub image_size: usize,
    /// Channel size `C`.
    pub channels: usize,
    /// Channel size `D` of the class token.
    pub text_dim: usize,
    pub heads: usize,
    /// Width of the first image-encoder stage.
    pub stem_channels: usize,
    /// Number of two-way blocks in the decoder.
    pub decoder_depth: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            channels: 32,
            text_dim: 64,
            heads: 4,
            stem_channels: 16,
            decoder_depth: 2,
        }
    }
}

impl HeadConfig {
    /// Stride of the image encoder (two 2×2 patch stages).
    pub const STRIDE: usize = 4;

    pub fn validate(&self) -> Result<()> {
        if self.image_size == 0 || self.image_size % Self::STRIDE != 0 {
            return Err(Error::Config(format!(
                "segmentation input {} not divisible by stride {}",
                self.image_size,
                Self::STRIDE
            )));
        }
        if self.heads == 0 || self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} channels not divisible by {} heads",
                self.channels, self.heads
            )));
        }
        if self.channels < 4 {
            return Err(Error::Config(format!("{} channels, need at least 4", self.channels)));
        }
        Ok(())
    }

    /// Feature grid side `h_f = w_f = H_s / 4`.
    pub fn feature_grid(&self) -> usize {
        self.image_size / Self::STRIDE
    }

    /// `N_f = h_f · w_f`.
    pub fn feature_rows(&self) -> usize {
        self.feature_grid() * self.feature_grid()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PromptBundle<'t> {
    /// `[2, C]`: projected class token then a zero row.
    pub sparse: Var<'t>,
    /// `[N_f, 1]` prior probabilities at feature resolution.
    pub dense: Var<'t>,
}

#[derive(Clone, Copy, Debug)]
pub struct MaskPrediction<'t> {
    /// `[1, H_s, W_s]`
    pub logits: Var<'t>,
    pub probabilities: Var<'t>,
    /// `[1, C]`
    pub mask_token_out: Var<'t>,
}

#[derive(Clone, Debug)]
struct TwoWayBlock {
    self_attn: AttnBlock,
    token_to_image: AttnBlock,
    ffn: FfnBlock,
    image_to_token: AttnBlock,
}

#[derive(Clone, Debug)]
pub struct SegmentationHead {
    pub cfg: HeadConfig,
    stem: Linear,
    stem_out: Linear,
    pub sparse_mlp: Mlp,
    /// Per-pixel encoder of the dense prompt, `1 -> C/4 -> C`.
    dense_proj: Mlp,
    image_pe: ParamId,
    blocks: Vec<TwoWayBlock>,
    final_attn: AttnBlock,
    pub hyper: Mlp,
    pixel_proj: Linear,
    memory_proj: Linear,
}

impl SegmentationHead {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: HeadConfig) -> Self {
        let c = cfg.channels;
        let mut s = b.scope("head");
        let stem = Linear::new(&mut s, "stem", 4 * 3, cfg.stem_channels);
        let stem_out = Linear::new(&mut s, "stem_out", 4 * cfg.stem_channels, c);
        let sparse_mlp = Mlp::new(&mut s, "sparse", (cfg.text_dim, c, c));
        let dense_proj = Mlp::new(&mut s, "dense", (1, c / 4, c));
        let image_pe = s.uniform("image_pe", &[cfg.feature_rows(), c], c);
        let blocks = (0..cfg.decoder_depth)
            .map(|i| {
                let mut l = s.scope(&format!("twoway{i}"));
                TwoWayBlock {
                    self_attn: AttnBlock::new(&mut l, "self", c, cfg.heads),
                    token_to_image: AttnBlock::new(&mut l, "token_to_image", c, cfg.heads),
                    ffn: FfnBlock::new(&mut l, "ffn", c),
                    image_to_token: AttnBlock::new(&mut l, "image_to_token", c, cfg.heads),
                }
            })
            .collect();
        let final_attn = AttnBlock::new(&mut s, "final", c, cfg.heads);
        let hyper = Mlp::new(&mut s, "hyper", (c, c, c));
        let pixel_proj = Linear::new(&mut s, "pixel_proj", c, c);
        let memory_proj = Linear::new(&mut s, "memory_proj", c + 1, c);
        Self {
            cfg,
            stem,
            stem_out,
            sparse_mlp,
            dense_proj,
            image_pe,
            blocks,
            final_attn,
            hyper,
            pixel_proj,
            memory_proj,
        }
    }

    /// `[T, H_s, W_s, 3]` (or one `[H_s, W_s, 3]` frame) → `[T, N_f, C]`.
    /// Frames are encoded independently.
    pub fn encode_frames<'t>(&self, cx: &Ctx<'t>, images: Var<'t>) -> Result<Var<'t>> {
        self.cfg.validate()?;
        let s = images.shape();
        let x = match s[..] {
            [h, w, 3] => images.reshape(&[1, h, w, 3])?,
            [_, _, _, 3] => images,
            _ => return Err(Error::Input(format!("frames {s:?}, expected [T,H,W,3]"))),
        };
        let xs = x.shape();
        if xs[1] % HeadConfig::STRIDE != 0 || xs[2] % HeadConfig::STRIDE != 0 {
            return Err(Error::Config(format!(
                "frame {}x{} not divisible by stride {}",
                xs[1],
                xs[2],
                HeadConfig::STRIDE
            )));
        }
        let (t, h, w) = (xs[0], xs[1] / 2, xs[2] / 2);
        let y = self.stem.forward(cx, patchify(x, 2)?)?.gelu();
        let y = y.reshape(&[t, h, w, self.cfg.stem_channels])?;
        self.stem_out.forward(cx, patchify(y, 2)?)
    }

    /// Sparse prompt from the frame's class token `[1, D]`; dense prompt
    /// `[h_f, w_f]` (or `[N_f, 1]`) passed through as a column.
    pub fn encode_prompts<'t>(&self, cx: &Ctx<'t>, cls: Var<'t>, dense: Var<'t>) -> Result<PromptBundle<'t>> {
        let projected = self.sparse_mlp.forward(cx, cls.reshape(&[1, self.cfg.text_dim])?)?;
        let zero = cx.constant(Tensor::zeros(&[1, self.cfg.channels]));
        Ok(PromptBundle {
            sparse: concat(&[projected, zero], 0)?,
            dense: dense.reshape(&[self.cfg.feature_rows(), 1])?,
        })
    }

    /// Two-way decoding of `[T_mgl; sparse]` against `F_gl + enc(dense)`.
    pub fn decode_frame<'t>(
        &self,
        cx: &Ctx<'t>,
        f_gl: Var<'t>,
        prompts: &PromptBundle<'t>,
        t_mgl: Var<'t>,
    ) -> Result<MaskPrediction<'t>> {
        let g = self.cfg.feature_grid();
        let n = self.cfg.image_size;
        let mut keys = f_gl.add(self.dense_proj.forward(cx, prompts.dense)?)?;
        let key_pe = cx.p(self.image_pe);
        let query_pe = concat(&[t_mgl, prompts.sparse], 0)?;
        let mut queries = query_pe;
        for blk in &self.blocks {
            queries = blk.self_attn.forward(cx, queries, queries, Some(query_pe), Some(query_pe))?;
            queries = blk.token_to_image.forward(cx, queries, keys, Some(query_pe), Some(key_pe))?;
            queries = blk.ffn.forward(cx, queries)?;
            keys = blk.image_to_token.forward(cx, keys, queries, Some(key_pe), Some(query_pe))?;
        }
        queries = self.final_attn.forward(cx, queries, keys, Some(query_pe), Some(key_pe))?;
        let mask_token_out = queries.slice(0, 0, 1)?;
        let hyper = self.hyper.forward(cx, mask_token_out)?;
        let pixels = self.pixel_proj.forward(cx, keys)?;
        let low = pixels.matmul(hyper.transpose()?)?.reshape(&[1, g, g])?;
        let logits = low.resize_bilinear(n, n)?;
        Ok(MaskPrediction {
            logits,
            probabilities: logits.sigmoid(),
            mask_token_out,
        })
    }

    /// Memory feature `[N_f, C]` from `F_gl` and the pooled prediction.
    /// Returned on the tape; callers detach before storing.
    pub fn encode_memory_entry<'t>(
        &self,
        cx: &Ctx<'t>,
        f_gl: Var<'t>,
        probabilities: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let pooled = probabilities
            .avg_pool(HeadConfig::STRIDE)?
            .reshape(&[self.cfg.feature_rows(), 1])?;
        let feature = self.memory_proj.forward(cx, concat(&[f_gl, pooled], 1)?)?;
        Ok((feature, pooled))
    }
}
