//! Parameter storage and the attention / feed-forward blocks every model
//! component is assembled from.

use std::cell::RefCell;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{attention, Gradients, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered parameter tensors. Order is creation order, which is
/// deterministic for a given model configuration.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.contains(&name),
            "duplicate parameter name {name}"
        );
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Replace every tensor, keeping names; shapes must agree.
    pub fn load(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, got {}",
                self.tensors.len(),
                tensors.len()
            )));
        }
        for (i, (old, new)) in self.tensors.iter().zip(&tensors).enumerate() {
            if old.shape() != new.shape() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?}, checkpoint has {:?}",
                    self.names[i],
                    old.shape(),
                    new.shape()
                )));
            }
        }
        self.tensors = tensors;
        Ok(())
    }
}

/// Creates parameters under a dotted name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
        }
    }

    /// Builder for a nested scope; names become `prefix.name.…`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            prefix,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        let full = self.full_name(name);
        self.store.add(full, t)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, Tensor::zeros(shape))
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let full = self.full_name(name);
        self.store.add(full, Tensor::ones(shape))
    }
}

/// Binds a [`ParamStore`] onto a tape for one forward pass. Parameters are
/// placed on the tape the first time they are used.
pub struct Ctx<'t> {
    tape: &'t Tape,
    /// `None` when every parameter was bound up front.
    store: Option<&'t ParamStore>,
    bound: RefCell<Vec<Option<Var<'t>>>>,
    trainable: bool,
}

impl<'t> Ctx<'t> {
    /// Parameters receive gradients.
    pub fn train(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self::with_mode(tape, store, true)
    }

    /// Parameters are constants: no backward closures are recorded.
    pub fn infer(tape: &'t Tape, store: &'t ParamStore) -> Self {
        Self::with_mode(tape, store, false)
    }

    fn with_mode(tape: &'t Tape, store: &'t ParamStore, trainable: bool) -> Self {
        Self {
            tape,
            store: Some(store),
            bound: RefCell::new(vec![None; store.len()]),
            trainable,
        }
    }

    /// Use caller-placed variables, aligned with a store's parameter order.
    pub fn with_vars(tape: &'t Tape, vars: &[Var<'t>]) -> Self {
        Self {
            tape,
            store: None,
            bound: RefCell::new(vars.iter().copied().map(Some).collect()),
            trainable: true,
        }
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn p(&self, id: ParamId) -> Var<'t> {
        let mut bound = self.bound.borrow_mut();
        *bound[id.0].get_or_insert_with(|| {
            let store = self.store.expect("parameter missing from pre-bound context");
            self.tape.leaf(store.get(id).clone(), self.trainable)
        })
    }

    pub fn constant(&self, t: Tensor) -> Var<'t> {
        self.tape.constant(t)
    }

    /// Per-parameter gradients in store order; parameters that were never
    /// used get zeros.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        let bound = self.bound.borrow();
        bound
            .iter()
            .enumerate()
            .map(|(i, b)| match (b, self.store) {
                (Some(v), _) => grads.get_or_zeros(v),
                (None, Some(s)) => Tensor::zeros(s.tensors()[i].shape()),
                (None, None) => unreachable!("pre-bound contexts bind every parameter"),
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, in_dim: usize, out_dim: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            weight: s.uniform("weight", &[in_dim, out_dim], in_dim),
            bias: s.zeros("bias", &[out_dim]),
            in_dim,
            out_dim,
        }
    }

    /// `x · W + b` over the last axis.
    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.matmul(cx.p(self.weight))?.add(cx.p(self.bias))
    }
}

/// Two linear layers with GELU between.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dims: (usize, usize, usize)) -> Self {
        let mut s = b.scope(name);
        Self {
            fc1: Linear::new(&mut s, "fc1", dims.0, dims.1),
            fc2: Linear::new(&mut s, "fc2", dims.1, dims.2),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = self.fc1.forward(cx, x)?.gelu();
        self.fc2.forward(cx, h)
    }
}

/// Feed-forward block with hidden width `4 × model_dim`.
#[derive(Clone, Copy, Debug)]
pub struct FfnParams {
    pub mlp: Mlp,
}

impl FfnParams {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, model_dim: usize) -> Self {
        Self {
            mlp: Mlp::new(b, name, (model_dim, 4 * model_dim, model_dim)),
        }
    }
}

pub fn feed_forward<'t>(cx: &Ctx<'t>, x: Var<'t>, params: &FfnParams) -> Result<Var<'t>> {
    params.mlp.forward(cx, x)
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNormParams {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            gain: s.ones("gain", &[dim]),
            bias: s.zeros("bias", &[dim]),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.layer_norm(cx.p(self.gain), cx.p(self.bias))
    }
}

/// `layer_norm(x + sublayer)`, post-norm residual.
pub fn residual_block<'t>(
    cx: &Ctx<'t>,
    x: Var<'t>,
    sublayer: Var<'t>,
    norm: &LayerNormParams,
) -> Result<Var<'t>> {
    norm.forward(cx, x.add(sublayer)?)
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub heads: usize,
    pub model_dim: usize,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
}

impl AttentionParams {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, model_dim: usize, heads: usize) -> Self {
        assert!(
            heads > 0 && model_dim % heads == 0,
            "model_dim {model_dim} not divisible by {heads} heads"
        );
        let mut s = b.scope(name);
        Self {
            heads,
            model_dim,
            q: Linear::new(&mut s, "q", model_dim, model_dim),
            k: Linear::new(&mut s, "k", model_dim, model_dim),
            v: Linear::new(&mut s, "v", model_dim, model_dim),
            out: Linear::new(&mut s, "out", model_dim, model_dim),
        }
    }
}

/// Projected multi-head attention; output has the query's shape.
pub fn multi_head_attention<'t>(
    cx: &Ctx<'t>,
    q: Var<'t>,
    k: Var<'t>,
    v: Var<'t>,
    params: &AttentionParams,
) -> Result<Var<'t>> {
    let d = params.model_dim;
    for x in [&q, &k, &v] {
        if x.shape().last() != Some(&d) {
            return Err(Error::Shape {
                op: "multi_head_attention",
                lhs: x.shape(),
                rhs: vec![d],
            });
        }
    }
    let qp = params.q.forward(cx, q)?;
    let kp = params.k.forward(cx, k)?;
    let vp = params.v.forward(cx, v)?;
    let mixed = attention(qp, kp, vp, params.heads)?;
    params.out.forward(cx, mixed)
}

/// Attention sublayer followed by its residual norm.
#[derive(Clone, Copy, Debug)]
pub struct AttnBlock {
    pub attn: AttentionParams,
    pub norm: LayerNormParams,
}

impl AttnBlock {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            attn: AttentionParams::new(&mut s, "attn", dim, heads),
            norm: LayerNormParams::new(&mut s, "norm", dim),
        }
    }

    /// `norm(x + attn(x + q_pos, kv + k_pos, kv))`.
    pub fn forward<'t>(
        &self,
        cx: &Ctx<'t>,
        x: Var<'t>,
        kv: Var<'t>,
        q_pos: Option<Var<'t>>,
        k_pos: Option<Var<'t>>,
    ) -> Result<Var<'t>> {
        let q = match q_pos {
            Some(p) => x.add(p)?,
            None => x,
        };
        let k = match k_pos {
            Some(p) => kv.add(p)?,
            None => kv,
        };
        let a = multi_head_attention(cx, q, k, kv, &self.attn)?;
        residual_block(cx, x, a, &self.norm)
    }
}

/// Feed-forward sublayer followed by its residual norm.
#[derive(Clone, Copy, Debug)]
pub struct FfnBlock {
    pub ffn: FfnParams,
    pub norm: LayerNormParams,
}

impl FfnBlock {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            ffn: FfnParams::new(&mut s, "ffn", dim),
            norm: LayerNormParams::new(&mut s, "norm", dim),
        }
    }

    pub fn forward<'t>(&self, cx: &Ctx<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let f = feed_forward(cx, x, &self.ffn)?;
        residual_block(cx, x, f, &self.norm)
    }
}
