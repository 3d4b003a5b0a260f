//! Hierarchical global-historical aggregation.
//!
//! Pixel level: the current frame feature attends to itself, to the memory
//! bank, and then to the global unified feature `V_u`. Object level: the
//! mask token attends to the projected global video feature and then to the
//! historical mask tokens. Every attention is followed by add + layer norm;
//! each stage ends in its own FFN block.

use crate::encoder::patchify;
use crate::error::{Error, Result};
use crate::memory::MemorySnapshot;
use crate::nn::{AttnBlock, Ctx, FfnBlock, Linear, Mlp, ParamBuilder, ParamId};
use crate::tensor::{concat, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AggregatorConfig {
    /// Channel size `D` of the global video feature.
    pub global_dim: usize,
    /// Channel size `C` of frame features and mask tokens.
    pub channels: usize,
    pub heads: usize,
    /// Side of the `V_g` patch grid (`sqrt(N_v)`).
    pub grid: usize,
    /// Patch size `p_g` used to compress `V_g`.
    pub global_patch: usize,
    /// `N_p`; 0 disables pixel-level fusion.
    pub pixel_layers: usize,
    /// `N_o`; 0 disables object-level fusion.
    pub object_layers: usize,
    /// Number of distinct memory ages with a learned embedding.
    pub max_age: usize,
}

impl AggregatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.global_patch == 0 || self.grid % self.global_patch != 0 {
            return Err(Error::Config(format!(
                "global grid {}x{} not divisible into {}x{} patches",
                self.grid, self.grid, self.global_patch, self.global_patch
            )));
        }
        Ok(())
    }

    /// `N_u = N_v / p_g²`.
    pub fn unified_patches(&self) -> usize {
        let g = self.grid / self.global_patch.max(1);
        g * g
    }
}

#[derive(Clone, Copy, Debug)]
pub struct UnifiedFeature<'t> {
    /// `[T, N_u + N_l, C]`
    pub v_u: Var<'t>,
}

/// Memory contents placed on the tape as constants.
#[derive(Clone, Copy, Debug)]
pub struct MemoryView<'t> {
    /// `[k, N_f, C]`, oldest first.
    pub features: Var<'t>,
    /// `[m, C]`, oldest first.
    pub tokens: Var<'t>,
    pub feature_count: usize,
    pub token_count: usize,
}

impl<'t> MemoryView<'t> {
    pub fn new(cx: &Ctx<'t>, snap: &MemorySnapshot) -> Self {
        Self {
            features: cx.constant(snap.features.clone()),
            tokens: cx.constant(snap.tokens.clone()),
            feature_count: snap.feature_count(),
            token_count: snap.token_count(),
        }
    }
}

#[derive(Clone, Debug)]
struct PixelLayer {
    self_attn: AttnBlock,
    memory_attn: AttnBlock,
    memory_ffn: FfnBlock,
    global_attn: AttnBlock,
    global_ffn: FfnBlock,
}

#[derive(Clone, Debug)]
struct ObjectLayer {
    global_attn: AttnBlock,
    global_ffn: FfnBlock,
    history_attn: AttnBlock,
    local_ffn: FfnBlock,
}

#[derive(Clone, Debug)]
pub struct Aggregator {
    pub cfg: AggregatorConfig,
    global_proj: Linear,
    unify: Mlp,
    text_proj: Linear,
    /// Learned memory age embedding `[max_age, C]`; row `a-1` for age `a`.
    age_emb: ParamId,
    pixel: Vec<PixelLayer>,
    object: Vec<ObjectLayer>,
}

impl Aggregator {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: AggregatorConfig) -> Self {
        let c = cfg.channels;
        let mut s = b.scope("aggregator");
        let pg2 = cfg.global_patch * cfg.global_patch;
        let global_proj = Linear::new(&mut s, "global_proj", cfg.global_dim, c);
        let unify = Mlp::new(&mut s, "unify", (pg2 * c, c, c));
        let text_proj = Linear::new(&mut s, "text_proj", cfg.global_dim, c);
        let age_emb = s.uniform("age_emb", &[cfg.max_age.max(1), c], c);
        let pixel = (0..cfg.pixel_layers)
            .map(|i| {
                let mut l = s.scope(&format!("pixel{i}"));
                PixelLayer {
                    self_attn: AttnBlock::new(&mut l, "self", c, cfg.heads),
                    memory_attn: AttnBlock::new(&mut l, "memory", c, cfg.heads),
                    memory_ffn: FfnBlock::new(&mut l, "memory_ffn", c),
                    global_attn: AttnBlock::new(&mut l, "global", c, cfg.heads),
                    global_ffn: FfnBlock::new(&mut l, "global_ffn", c),
                }
            })
            .collect();
        let object = (0..cfg.object_layers)
            .map(|i| {
                let mut l = s.scope(&format!("object{i}"));
                ObjectLayer {
                    global_attn: AttnBlock::new(&mut l, "global", c, cfg.heads),
                    global_ffn: FfnBlock::new(&mut l, "global_ffn", c),
                    history_attn: AttnBlock::new(&mut l, "history", c, cfg.heads),
                    local_ffn: FfnBlock::new(&mut l, "local_ffn", c),
                }
            })
            .collect();
        Self {
            cfg,
            global_proj,
            unify,
            text_proj,
            age_emb,
            pixel,
            object,
        }
    }

    /// Project the global source `[T, N_v, D]` to `[T, N_v, C]`.
    pub fn project_global<'t>(&self, cx: &Ctx<'t>, global: Var<'t>) -> Result<Var<'t>> {
        self.global_proj.forward(cx, global)
    }

    /// Compress `p_g×p_g` patches of the projected global feature and append
    /// each frame's projected text features.
    pub fn unified_feature<'t>(
        &self,
        cx: &Ctx<'t>,
        global_c: Var<'t>,
        text: Var<'t>,
    ) -> Result<UnifiedFeature<'t>> {
        self.cfg.validate()?;
        let gs = global_c.shape();
        let [t, nv, c] = gs[..] else {
            return Err(Error::Contract(format!("global feature {gs:?}, expected [T,N_v,C]")));
        };
        let g = self.cfg.grid;
        if g * g != nv {
            return Err(Error::Config(format!("{nv} global tokens do not form a {g}x{g} grid")));
        }
        let grid = global_c.reshape(&[t, g, g, c])?;
        let patches = patchify(grid, self.cfg.global_patch)?;
        let compressed = self.unify.forward(cx, patches)?;
        let text_c = self.text_proj.forward(cx, text)?;
        Ok(UnifiedFeature {
            v_u: concat(&[compressed, text_c], 1)?,
        })
    }

    pub fn pixel_enabled(&self) -> bool {
        !self.pixel.is_empty()
    }

    pub fn object_enabled(&self) -> bool {
        !self.object.is_empty()
    }

    /// Memory keys/values with age embeddings added to feature keys.
    fn memory_kv<'t>(&self, cx: &Ctx<'t>, mem: &MemoryView<'t>) -> Result<Option<(Var<'t>, Var<'t>)>> {
        let c = self.cfg.channels;
        let mut values = Vec::new();
        let mut pos = Vec::new();
        if mem.feature_count > 0 {
            let k = mem.feature_count;
            let rows = mem.features.shape()[1];
            if k > self.cfg.max_age {
                return Err(Error::Contract(format!(
                    "{k} memory features exceed {} learned ages",
                    self.cfg.max_age
                )));
            }
            // oldest entry has age k, newest age 1
            let ages: Vec<usize> = (0..k).map(|i| k - i - 1).collect();
            let age = cx.p(self.age_emb).index_select(&ages)?.reshape(&[k, 1, c])?;
            let age = cx.constant(Tensor::zeros(&[k, rows, c])).add(age)?;
            values.push(mem.features.reshape(&[k * rows, c])?);
            pos.push(age.reshape(&[k * rows, c])?);
        }
        if mem.token_count > 0 {
            values.push(mem.tokens);
            pos.push(cx.constant(Tensor::zeros(&[mem.token_count, c])));
        }
        if values.is_empty() {
            return Ok(None);
        }
        Ok(Some((concat(&values, 0)?, concat(&pos, 0)?)))
    }

    /// `F_gl` for one frame. `f_i: [N_f, C]`, `v_u: [N_u + N_l, C]`.
    pub fn pixel_level_fuse<'t>(
        &self,
        cx: &Ctx<'t>,
        f_i: Var<'t>,
        mem: &MemoryView<'t>,
        v_u: Var<'t>,
    ) -> Result<Var<'t>> {
        if self.pixel.is_empty() {
            return Ok(f_i);
        }
        let kv = self.memory_kv(cx, mem)?;
        let mut x = f_i;
        for layer in &self.pixel {
            // memory attention
            x = layer.self_attn.forward(cx, x, x, None, None)?;
            if let Some((vals, pos)) = kv {
                x = layer.memory_attn.forward(cx, x, vals, None, Some(pos))?;
            }
            x = layer.memory_ffn.forward(cx, x)?;
            // global enhancement
            x = layer.global_attn.forward(cx, x, v_u, None, None)?;
            x = layer.global_ffn.forward(cx, x)?;
        }
        Ok(x)
    }

    /// `T_mgl` for one frame. `t_m: [1, C]`, `global_c: [N_v, C]`.
    pub fn object_level_fuse<'t>(
        &self,
        cx: &Ctx<'t>,
        t_m: Var<'t>,
        global_c: Var<'t>,
        mem: &MemoryView<'t>,
    ) -> Result<Var<'t>> {
        let mut x = t_m;
        for layer in &self.object {
            x = layer.global_attn.forward(cx, x, global_c, None, None)?;
            x = layer.global_ffn.forward(cx, x)?;
            if mem.token_count > 0 {
                x = layer.history_attn.forward(cx, x, mem.tokens, None, None)?;
                x = layer.local_ffn.forward(cx, x)?;
            }
        }
        Ok(x)
    }
}
