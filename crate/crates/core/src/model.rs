//! The full referring segmentation model and its per-clip forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::aggregator::{Aggregator, AggregatorConfig, MemoryView};
use crate::encoder::{EncoderConfig, MultimodalEncoder};
use crate::error::{Error, Result};
use crate::head::{HeadConfig, SegmentationHead};
use crate::memory::{MemoryBank, MemorySnapshot, FEATURE_CAPACITY, TOKEN_CAPACITY};
use crate::nn::{Ctx, Linear, ParamBuilder, ParamId, ParamStore};
use crate::prior::{neutral_dense, ContextToggles, MaskPriorGenerator};
use crate::tensor::{concat, Tensor, Var};

/// Which video feature the aggregator treats as global context.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GlobalSource {
    /// Encoder output `V`.
    Vanilla,
    /// Object-aware `V_g` from the prior generator.
    #[default]
    Masked,
}

impl GlobalSource {
    pub fn as_str(self) -> &'static str {
        match self {
            GlobalSource::Vanilla => "vanilla",
            GlobalSource::Masked => "masked",
        }
    }
}

impl std::str::FromStr for GlobalSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "masked" => Ok(Self::Masked),
            _ => Err(Error::Config(format!("unknown global source {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    /// Mask prior generator on: its `M_p` becomes the dense prompt.
    pub mpg: bool,
    /// Hierarchical aggregation on (`N_p = N_o = 1`).
    pub hga: bool,
    pub toggles: ContextToggles,
    pub global_patch: usize,
    pub global_source: GlobalSource,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            mpg: true,
            hga: true,
            toggles: ContextToggles::default(),
            global_patch: 2,
            global_source: GlobalSource::Masked,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.head.validate()?;
        if self.head.text_dim != self.encoder.dim {
            return Err(Error::Config(format!(
                "head text dim {} differs from encoder dim {}",
                self.head.text_dim, self.encoder.dim
            )));
        }
        if self.head.image_size != 2 * self.encoder.image_size {
            return Err(Error::Config(format!(
                "segmentation input {} must be twice the encoder input {}",
                self.head.image_size, self.encoder.image_size
            )));
        }
        self.aggregator().validate()
    }

    pub fn aggregator(&self) -> AggregatorConfig {
        let layers = usize::from(self.hga);
        AggregatorConfig {
            global_dim: self.encoder.dim,
            channels: self.head.channels,
            heads: self.head.heads,
            grid: self.encoder.grid(),
            global_patch: self.global_patch,
            pixel_layers: layers,
            object_layers: layers,
            max_age: FEATURE_CAPACITY,
        }
    }

    /// The prior generator runs when its prior or its `V_g` is consumed.
    pub fn runs_prior(&self) -> bool {
        self.mpg || (self.hga && self.global_source == GlobalSource::Masked)
    }
}

/// One clip's model inputs.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipInput {
    /// `[T, H_m, W_m, 3]`
    pub frames_mm: Tensor,
    /// `[T, H_s, W_s, 3]`
    pub frames_seg: Tensor,
    /// Query token ids, length `L`.
    pub tokens: Vec<usize>,
}

impl ClipInput {
    pub fn frames(&self) -> usize {
        self.frames_mm.shape()[0]
    }
}

/// How the memory bank is populated during a forward pass.
#[derive(Clone, Copy, Debug)]
pub enum MemorySource<'a> {
    /// Entries come from this pass's own predictions.
    Live,
    /// Frame `t` reads snapshot `t` of a previous pass.
    Replay(&'a [MemorySnapshot]),
}

#[derive(Clone, Debug)]
pub struct ClipOutputs<'t> {
    /// Per frame `[1, H_s, W_s]`.
    pub logits: Vec<Var<'t>>,
    pub probabilities: Vec<Var<'t>>,
    /// Per frame `[N_f, C]`.
    pub f_gl: Vec<Var<'t>>,
    /// Per frame probabilities pooled to feature resolution `[N_f, 1]`.
    pub pooled: Vec<Var<'t>>,
    /// `[T, C]` projected sentence embedding per frame.
    pub sentence: Var<'t>,
    /// `[T, g, g]` when the prior generator ran.
    pub m_p: Option<Var<'t>>,
    /// Memory seen by each frame.
    pub snapshots: Vec<MemorySnapshot>,
}

impl ClipOutputs<'_> {
    /// `[T, H_s, W_s]` probabilities as a plain tensor.
    pub fn probability_tensor(&self) -> Result<Tensor> {
        let parts: Vec<Tensor> = self.probabilities.iter().map(|p| p.value()).collect();
        let refs: Vec<&Tensor> = parts.iter().collect();
        Tensor::concat(&refs, 0)
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub encoder: MultimodalEncoder,
    pub prior: MaskPriorGenerator,
    pub aggregator: Aggregator,
    pub head: SegmentationHead,
    /// Learned mask token `T_m`, `[1, C]`.
    pub mask_token: ParamId,
    pub sentence_proj: Linear,
}

impl Model {
    /// Build the model and its freshly initialised parameters.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut store, &mut rng);
        let enc = cfg.encoder;
        let encoder = MultimodalEncoder::new(&mut b, enc);
        let prior = MaskPriorGenerator::new(&mut b, enc.dim, enc.grid(), enc.heads);
        let aggregator = Aggregator::new(&mut b, cfg.aggregator());
        let head = SegmentationHead::new(&mut b, cfg.head);
        let mask_token = b.uniform("mask_token", &[1, cfg.head.channels], cfg.head.channels);
        let sentence_proj = Linear::new(&mut b, "sentence_proj", enc.dim, cfg.head.channels);
        let model = Self {
            cfg,
            encoder,
            prior,
            aggregator,
            head,
            mask_token,
            sentence_proj,
        };
        Ok((model, store))
    }

    fn check_input(&self, clip: &ClipInput) -> Result<usize> {
        let t = clip.frames();
        let (m, s) = (self.cfg.encoder.image_size, self.cfg.head.image_size);
        if t == 0 {
            return Err(Error::Input("clip has no frames".into()));
        }
        if clip.frames_mm.shape() != [t, m, m, 3] || clip.frames_seg.shape() != [t, s, s, 3] {
            return Err(Error::Input(format!(
                "clip frames {:?} / {:?}, expected [{t},{m},{m},3] / [{t},{s},{s},3]",
                clip.frames_mm.shape(),
                clip.frames_seg.shape()
            )));
        }
        Ok(t)
    }

    /// Run the whole clip, frame-sequentially through memory.
    pub fn forward_clip<'t>(
        &self,
        cx: &Ctx<'t>,
        clip: &ClipInput,
        memory: MemorySource<'_>,
    ) -> Result<ClipOutputs<'t>> {
        let t = self.check_input(clip)?;
        if let MemorySource::Replay(s) = memory {
            if s.len() != t {
                return Err(Error::Input(format!("{} replay snapshots for {t} frames", s.len())));
            }
        }
        let cfg = &self.cfg;
        let (c, g) = (cfg.head.channels, cfg.head.feature_grid());
        let emb = self.encoder.forward(cx, cx.constant(clip.frames_mm.clone()), &clip.tokens)?;

        let (m_p, dense, v_g) = if cfg.runs_prior() {
            let out = self.prior.forward(cx, emb.video, emb.cls, cfg.toggles, g)?;
            (Some(out.m_p), Some(out.dense), Some(out.v_g))
        } else {
            (None, None, None)
        };
        let dense = match (cfg.mpg, dense) {
            (true, Some(d)) => d,
            _ => cx.constant(neutral_dense(t, g)),
        };

        let (global_c, unified) = if cfg.hga {
            let source = match (cfg.global_source, v_g) {
                (GlobalSource::Masked, Some(v)) => v,
                _ => emb.video,
            };
            let global_c = self.aggregator.project_global(cx, source)?;
            let u = self.aggregator.unified_feature(cx, global_c, emb.text)?;
            (Some(global_c), Some(u.v_u))
        } else {
            (None, None)
        };

        let features = self.head.encode_frames(cx, cx.constant(clip.frames_seg.clone()))?;
        let nl = cfg.encoder.text_len();
        let text_mean = emb.text.permute(&[0, 2, 1])?.sum_lastdim().scale(1.0 / nl as f64);
        let sentence = self.sentence_proj.forward(cx, text_mean)?;

        let nf = cfg.head.feature_rows();
        let mut bank = MemoryBank::with_capacity(nf, c, FEATURE_CAPACITY, TOKEN_CAPACITY);
        let mut out = ClipOutputs {
            logits: Vec::with_capacity(t),
            probabilities: Vec::with_capacity(t),
            f_gl: Vec::with_capacity(t),
            pooled: Vec::with_capacity(t),
            sentence,
            m_p,
            snapshots: Vec::with_capacity(t),
        };
        let t_m = cx.p(self.mask_token);
        for i in 0..t {
            let snap = match memory {
                MemorySource::Live => bank.snapshot(),
                MemorySource::Replay(s) => s[i].clone(),
            };
            let view = MemoryView::new(cx, &snap);
            let f_i = features.slice(0, i, i + 1)?.reshape(&[nf, c])?;
            let (f_gl, t_mgl) = match (unified, global_c) {
                (Some(u), Some(gc)) => {
                    let nu = u.shape()[1];
                    let v_u = u.slice(0, i, i + 1)?.reshape(&[nu, c])?;
                    let nv = gc.shape()[1];
                    let gc_i = gc.slice(0, i, i + 1)?.reshape(&[nv, c])?;
                    (
                        self.aggregator.pixel_level_fuse(cx, f_i, &view, v_u)?,
                        self.aggregator.object_level_fuse(cx, t_m, gc_i, &view)?,
                    )
                }
                _ => (f_i, t_m),
            };
            let cls_i = emb.cls.slice(0, i, i + 1)?;
            let dense_i = dense.slice(0, i, i + 1)?;
            let prompts = self.head.encode_prompts(cx, cls_i, dense_i)?;
            let pred = self.head.decode_frame(cx, f_gl, &prompts, t_mgl)?;
            let (mem_feature, pooled) = self.head.encode_memory_entry(cx, f_gl, pred.probabilities)?;
            bank.push_frame(mem_feature.value(), pred.mask_token_out.value())?;
            out.logits.push(pred.logits);
            out.probabilities.push(pred.probabilities);
            out.f_gl.push(f_gl);
            out.pooled.push(pooled);
            out.snapshots.push(snap);
        }
        Ok(out)
    }

    /// Stack per-frame `[1, H, W]` outputs into `[T, H, W]`.
    pub fn stack_frames<'t>(frames: &[Var<'t>]) -> Result<Var<'t>> {
        concat(frames, 0)
    }
}
