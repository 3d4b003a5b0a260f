//! Joint image/text encoder: each frame's patches and the query tokens
//! share one sequence, shared self-attention, and modality-routed FFNs.

use crate::error::{Error, Result};
use crate::nn::{AttnBlock, Ctx, FfnBlock, Linear, ParamBuilder, ParamId};
use crate::tensor::{concat, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    /// Square input resolution in pixels.
    pub image_size: usize,
    pub patch: usize,
    pub dim: usize,
    pub depth: usize,
    pub vocab_size: usize,
    pub heads: usize,
    /// Query length `L` (tokens between the text class and end tokens).
    pub query_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch: 8,
            dim: 64,
            depth: 2,
            vocab_size: 64,
            heads: 4,
            query_len: 5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image_size % self.patch != 0 {
            return Err(Error::Config(format!(
                "image size {} not divisible by patch {}",
                self.image_size, self.patch
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Grid side `H_m / p`.
    pub fn grid(&self) -> usize {
        self.image_size / self.patch
    }

    /// `N_v = H_m·W_m / p²`.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// `N_l = L + 2`.
    pub fn text_len(&self) -> usize {
        self.query_len + 2
    }

    /// `N_v + N_l + 1`.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + self.text_len() + 1
    }
}

/// Encoder outputs stacked over frames.
#[derive(Clone, Copy, Debug)]
pub struct JointEmbeddings<'t> {
    /// `[T, 1, D]`
    pub cls: Var<'t>,
    /// `[T, N_v, D]`
    pub video: Var<'t>,
    /// `[T, N_l, D]`
    pub text: Var<'t>,
}

#[derive(Clone, Debug)]
struct JointBlock {
    attn: AttnBlock,
    vision_ffn: FfnBlock,
    text_ffn: FfnBlock,
}

#[derive(Clone, Debug)]
pub struct MultimodalEncoder {
    pub cfg: EncoderConfig,
    patch_proj: Linear,
    /// Learned visual class token placed before the patches.
    cls_seed: ParamId,
    vis_pos: ParamId,
    text_cls: ParamId,
    token_emb: ParamId,
    end_token: ParamId,
    text_pos: ParamId,
    blocks: Vec<JointBlock>,
}

/// `[T, H, W, c]` → `[T, (H/k)·(W/k), k·k·c]`, patches in row-major order.
pub fn patchify<'t>(x: Var<'t>, k: usize) -> Result<Var<'t>> {
    let s = x.shape();
    let [t, h, w, c] = s[..] else {
        return Err(Error::Contract(format!("patchify expects [T,H,W,C], got {s:?}")));
    };
    if k == 0 || h % k != 0 || w % k != 0 {
        return Err(Error::Config(format!("{h}x{w} not divisible into {k}x{k} patches")));
    }
    x.reshape(&[t, h / k, k, w / k, k, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[t, (h / k) * (w / k), k * k * c])
}

impl MultimodalEncoder {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: EncoderConfig) -> Self {
        let d = cfg.dim;
        let mut s = b.scope("encoder");
        let patch_in = cfg.patch * cfg.patch * 3;
        let patch_proj = Linear::new(&mut s, "patch_proj", patch_in, d);
        let cls_seed = s.uniform("cls_seed", &[1, d], d);
        let vis_pos = s.uniform("vis_pos", &[cfg.num_patches() + 1, d], d);
        let text_cls = s.uniform("text_cls", &[1, d], d);
        let token_emb = s.uniform("token_emb", &[cfg.vocab_size, d], d);
        let end_token = s.uniform("end_token", &[1, d], d);
        let text_pos = s.uniform("text_pos", &[cfg.text_len(), d], d);
        let blocks = (0..cfg.depth)
            .map(|i| {
                let mut bs = s.scope(&format!("block{i}"));
                JointBlock {
                    attn: AttnBlock::new(&mut bs, "self", d, cfg.heads),
                    vision_ffn: FfnBlock::new(&mut bs, "vision", d),
                    text_ffn: FfnBlock::new(&mut bs, "text", d),
                }
            })
            .collect();
        Self {
            cfg,
            patch_proj,
            cls_seed,
            vis_pos,
            text_cls,
            token_emb,
            end_token,
            text_pos,
            blocks,
        }
    }

    /// Joint sequences `[visual CLS; patches] + pos ‖ [text CLS; tokens; end] + pos`.
    ///
    /// `frames` is `[T, H_m, W_m, 3]` (result `[T, S, D]`) or a single
    /// `[H_m, W_m, 3]` frame (result `[S, D]`).
    pub fn build_joint_sequence<'t>(
        &self,
        cx: &Ctx<'t>,
        frames: Var<'t>,
        tokens: &[usize],
    ) -> Result<Var<'t>> {
        let cfg = &self.cfg;
        if let Some(&bad) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if tokens.len() != cfg.query_len {
            return Err(Error::Input(format!(
                "query has {} tokens, encoder expects {}",
                tokens.len(),
                cfg.query_len
            )));
        }
        let shape = frames.shape();
        let single = shape.len() == 3;
        let frames = if single {
            frames.reshape(&[1, shape[0], shape[1], shape[2]])?
        } else {
            frames
        };
        let fs = frames.shape();
        if fs.len() != 4 || fs[1] != cfg.image_size || fs[2] != cfg.image_size || fs[3] != 3 {
            return Err(Error::Shape {
                op: "build_joint_sequence",
                lhs: fs,
                rhs: vec![cfg.image_size, cfg.image_size, 3],
            });
        }
        let t = fs[0];
        let d = cfg.dim;
        let patches = self.patch_proj.forward(cx, patchify(frames, cfg.patch)?)?;
        let cls = cx.constant(Tensor::zeros(&[t, 1, d])).add(cx.p(self.cls_seed))?;
        let visual = concat(&[cls, patches], 1)?.add(cx.p(self.vis_pos))?;
        let words = cx.p(self.token_emb).index_select(tokens)?;
        let text = concat(&[cx.p(self.text_cls), words, cx.p(self.end_token)], 0)?
            .add(cx.p(self.text_pos))?;
        let text = cx
            .constant(Tensor::zeros(&[t, cfg.text_len(), d]))
            .add(text)?;
        let seq = concat(&[visual, text], 1)?;
        if single {
            seq.reshape(&[cfg.seq_len(), d])
        } else {
            Ok(seq)
        }
    }

    /// `depth` joint blocks; frames never attend to each other.
    pub fn encode_joint<'t>(&self, cx: &Ctx<'t>, seq: Var<'t>) -> Result<Var<'t>> {
        let split = self.cfg.num_patches() + 1;
        let rank = seq.shape().len();
        let axis = rank - 2;
        let len = seq.shape()[axis];
        let mut x = seq;
        for blk in &self.blocks {
            x = blk.attn.forward(cx, x, x, None, None)?;
            let vis = blk.vision_ffn.forward(cx, x.slice(axis, 0, split)?)?;
            let txt = blk.text_ffn.forward(cx, x.slice(axis, split, len)?)?;
            x = concat(&[vis, txt], axis)?;
        }
        Ok(x)
    }

    pub fn split_embeddings<'t>(&self, encoded: Var<'t>) -> Result<JointEmbeddings<'t>> {
        let nv = self.cfg.num_patches();
        let len = encoded.shape()[1];
        Ok(JointEmbeddings {
            cls: encoded.slice(1, 0, 1)?,
            video: encoded.slice(1, 1, nv + 1)?,
            text: encoded.slice(1, nv + 1, len)?,
        })
    }

    /// Build, encode and split in one call. `frames` is `[T, H_m, W_m, 3]`.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        frames: Var<'t>,
        tokens: &[usize],
    ) -> Result<JointEmbeddings<'t>> {
        let seq = self.build_joint_sequence(cx, frames, tokens)?;
        let enc = self.encode_joint(cx, seq)?;
        self.split_embeddings(enc)
    }

    pub fn visual_positions(&self) -> ParamId {
        self.vis_pos
    }

    pub fn patch_projection(&self) -> Linear {
        self.patch_proj
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(cfg: EncoderConfig) -> (ParamStore, MultimodalEncoder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let enc = MultimodalEncoder::new(&mut ParamBuilder::new(&mut store, &mut rng), cfg);
        (store, enc)
    }

    fn frames(t: usize, size: usize) -> Tensor {
        Tensor::from_fn(&[t, size, size, 3], |i| ((i * 37) % 101) as f64 / 100.0)
    }

    #[test]
    fn sequence_length_for_one_token() {
        let cfg = EncoderConfig {
            query_len: 1,
            ..Default::default()
        };
        let (store, enc) = build(cfg);
        let tape = Tape::new();
        let cx = Ctx::infer(&tape, &store);
        let img = cx.constant(Tensor::zeros(&[32, 32, 3]));
        let seq = enc.build_joint_sequence(&cx, img, &[7]).unwrap();
        assert_eq!(seq.shape(), vec![enc.cfg.num_patches() + 4, 64]);
        assert_eq!(enc.cfg.num_patches(), 16);
    }

    #[test]
    fn zero_image_rows_are_positional_embeddings() {
        let (store, enc) = build(EncoderConfig::default());
        let tape = Tape::new();
        let cx = Ctx::infer(&tape, &store);
        let img = cx.constant(Tensor::zeros(&[32, 32, 3]));
        let seq = enc.build_joint_sequence(&cx, img, &[1, 2, 3, 4, 5]).unwrap().value();
        let pos = store.get(enc.vis_pos);
        for r in 1..=16 {
            assert_eq!(seq.row(r), pos.row(r));
        }
    }

    #[test]
    fn out_of_vocabulary_token_is_rejected() {
        let (store, enc) = build(EncoderConfig::default());
        let tape = Tape::new();
        let cx = Ctx::infer(&tape, &store);
        let img = cx.constant(Tensor::zeros(&[32, 32, 3]));
        assert!(matches!(
            enc.build_joint_sequence(&cx, img, &[1, 2, 64, 4, 5]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn depth_zero_is_identity() {
        let cfg = EncoderConfig {
            depth: 0,
            ..Default::default()
        };
        let (store, enc) = build(cfg);
        let tape = Tape::new();
        let cx = Ctx::infer(&tape, &store);
        let img = cx.constant(frames(2, 32));
        let seq = enc.build_joint_sequence(&cx, img, &[1, 2, 3, 4, 5]).unwrap();
        let enc_out = enc.encode_joint(&cx, seq).unwrap();
        assert_eq!(enc_out.value(), seq.value());
    }

    #[test]
    fn split_is_a_partition() {
        let (store, enc) = build(EncoderConfig::default());
        let tape = Tape::new();
        let cx = Ctx::infer(&tape, &store);
        let img = cx.constant(frames(3, 32));
        let seq = enc.build_joint_sequence(&cx, img, &[1, 2, 3, 4, 5]).unwrap();
        let out = enc.encode_joint(&cx, seq).unwrap();
        let j = enc.split_embeddings(out).unwrap();
        assert_eq!(j.cls.shape(), vec![3, 1, 64]);
        assert_eq!(j.video.shape(), vec![3, 16, 64]);
        assert_eq!(j.text.shape(), vec![3, 7, 64]);
        let joined = concat(&[j.cls, j.video, j.text], 1).unwrap();
        assert_eq!(joined.value(), out.value());
    }

    #[test]
    fn frames_are_encoded_independently() {
        let (store, enc) = build(EncoderConfig::default());
        let tape = Tape::new();
        let cx = Ctx::infer(&tape, &store);
        let f = frames(3, 32);
        let toks = [1, 2, 3, 4, 5];
        let a = enc
            .forward(&cx, cx.constant(f.clone()), &toks)
            .unwrap()
            .video
            .value();
        // reverse frame order
        let rev: Vec<Tensor> = (0..3).rev().map(|i| f.slice(0, i, i + 1).unwrap()).collect();
        let refs: Vec<&Tensor> = rev.iter().collect();
        let fr = Tensor::concat(&refs, 0).unwrap();
        let b = enc.forward(&cx, cx.constant(fr), &toks).unwrap().video.value();
        for i in 0..3 {
            let x = a.slice(0, i, i + 1).unwrap();
            let y = b.slice(0, 2 - i, 3 - i).unwrap();
            assert!(x.max_abs_diff(&y).unwrap() < 1e-12);
        }
        assert!(a.is_finite());
    }
}
