//! Causal spatio-temporal encoder.
//!
//! Frames are embedded per joint, then passed through pre-norm Transformer
//! blocks whose query/key/value projections are SA-GC layers and whose
//! temporal attention runs per joint under a causal mask.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Linear, Sagc};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Lower-triangular visibility: frame `t` may attend frame `s` iff `s <= t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalMask {
    pub len: usize,
}

impl CausalMask {
    pub fn new(len: usize) -> Self {
        CausalMask { len }
    }

    pub fn allows(&self, t: usize, s: usize) -> bool {
        s <= t
    }

    /// `[T, T]` additive form: 0 where visible, `-inf` elsewhere.
    pub fn additive<T: Real>(&self) -> Tensor<T> {
        let n = self.len;
        Tensor::from_fn([n, n], |i| {
            if self.allows(i / n, i % n) {
                T::zero()
            } else {
                T::neg_infinity()
            }
        })
    }
}

/// `H⁰ = X W + b + PE_spatial`
#[derive(Debug, Clone)]
pub struct Embedding {
    pub linear: Linear,
    pub spatial: ParamId,
    pub joints: usize,
}

impl Embedding {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, joints: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let linear = Linear::new(store, &format!("{name}.linear"), 3, dim, true, rng);
        let spatial = store.add_uniform(format!("{name}.pe_spatial"), &[joints, dim], 1.0 / (dim as f64).sqrt(), rng);
        Embedding { linear, spatial, joints }
    }

    /// `x`: `[..., V, 3]`.
    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let s = x.shape();
        if s.len() < 2 || s[s.len() - 2] != self.joints || s[s.len() - 1] != 3 {
            return Err(Error::dim("embed", &s, &[self.joints, 3]));
        }
        self.linear.forward(g, x)?.add(g.param(self.spatial))
    }
}

/// Per-joint multi-head attention of queries `[Tq, V, D]` over keys/values
/// `[S, V, D]`. Returns the mixed values `[Tq, V, D]` (before the output
/// projection) and the attention weights `[V, heads, Tq, S]`.
pub fn temporal_attention<'g, T: Real>(
    q: Var<'g, T>,
    k: Var<'g, T>,
    v: Var<'g, T>,
    heads: usize,
    mask: Option<Var<'g, T>>,
) -> Result<(Var<'g, T>, Var<'g, T>)> {
    let (qs, ks) = (q.shape(), k.shape());
    if qs.len() != 3 || ks.len() != 3 || qs[1..] != ks[1..] || k.shape() != v.shape() {
        return Err(Error::dim("temporal_attention", &qs, &ks));
    }
    let (tq, joints, dim) = (qs[0], qs[1], qs[2]);
    let s = ks[0];
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Config(format!("width {dim} not divisible by {heads} heads")));
    }
    let dh = dim / heads;
    let split = |x: Var<'g, T>, len: usize| x.reshape([len, joints, heads, dh])?.permute(&[1, 2, 0, 3]);
    let (qh, kh, vh) = (split(q, tq)?, split(k, s)?, split(v, s)?);
    let mut scores = qh.matmul(kh.transpose()?)?.scale(1.0 / (dh as f64).sqrt());
    if let Some(m) = mask {
        scores = scores.add(m)?;
    }
    let attn = scores.softmax(3)?;
    let mixed = attn.matmul(vh)?.permute(&[2, 0, 1, 3])?.reshape([tq, joints, dim])?;
    Ok((mixed, attn))
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::ones([dim])),
            bias: store.add(format!("{name}.bias"), Tensor::zeros([dim])),
        }
    }

    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let axis = x.shape().len() - 1;
        x.layer_norm(g.param(self.gain), g.param(self.bias), axis, LAYER_NORM_EPS)
    }
}

/// Pre-norm block:
/// `X₁ = X + W_o·Attn(SAGC_q, SAGC_k, SAGC_v of LN₁(X))`, `X₂ = X₁ + MLP(LN₂(X₁))`.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub ln1: LayerNorm,
    pub query: Sagc,
    pub key: Sagc,
    pub value: Sagc,
    pub out: Linear,
    pub ln2: LayerNorm,
    pub mlp_in: Linear,
    pub mlp_out: Linear,
    pub heads: usize,
}

/// Output of one block: new hidden state and the attention weights.
pub struct BlockOutput<'g, T: Real> {
    pub hidden: Var<'g, T>,
    pub attention: Var<'g, T>,
}

impl EncoderBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        sagc_heads: usize,
        temporal_heads: usize,
        topology: &Tensor<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if temporal_heads == 0 || dim % temporal_heads != 0 {
            return Err(Error::Config(format!(
                "hidden {dim} not divisible by {temporal_heads} temporal heads"
            )));
        }
        Ok(EncoderBlock {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            query: Sagc::new(store, &format!("{name}.q"), dim, dim, sagc_heads, topology, rng)?,
            key: Sagc::new(store, &format!("{name}.k"), dim, dim, sagc_heads, topology, rng)?,
            value: Sagc::new(store, &format!("{name}.v"), dim, dim, sagc_heads, topology, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, dim, false, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            mlp_in: Linear::new(store, &format!("{name}.mlp_in"), dim, 4 * dim, true, rng),
            mlp_out: Linear::new(store, &format!("{name}.mlp_out"), 4 * dim, dim, true, rng),
            heads: temporal_heads,
        })
    }

    /// Whole-sequence pass over `[T, V, D]` with the additive causal mask.
    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, x: Var<'g, T>, mask: Var<'g, T>) -> Result<BlockOutput<'g, T>> {
        let n = self.ln1.forward(g, x)?;
        let (q, k, v) = (
            self.query.forward(g, n)?,
            self.key.forward(g, n)?,
            self.value.forward(g, n)?,
        );
        let (mixed, attention) = temporal_attention(q, k, v, self.heads, Some(mask))?;
        let hidden = self.finish(g, x, mixed)?;
        Ok(BlockOutput { hidden, attention })
    }

    fn finish<'g, T: Real>(&self, g: &'g Graph<T>, x: Var<'g, T>, mixed: Var<'g, T>) -> Result<Var<'g, T>> {
        let x1 = x.add(self.out.forward(g, mixed)?)?;
        let h = self.mlp_in.forward(g, self.ln2.forward(g, x1)?)?.relu();
        x1.add(self.mlp_out.forward(g, h)?)
    }

    /// Single new frame `[1, V, D]`; appends its key/value to `cache` and
    /// attends over every cached frame.
    fn step<'g, T: Real>(&self, g: &'g Graph<T>, x: Var<'g, T>, cache: &mut KvCache<T>) -> Result<Var<'g, T>> {
        let n = self.ln1.forward(g, x)?;
        let q = self.query.forward(g, n)?;
        cache.keys.push(self.key.forward(g, n)?.value());
        cache.values.push(self.value.forward(g, n)?.value());
        let k = g.constant(Tensor::stack(&cache.keys)?.reshape(cache_shape(&cache.keys))?);
        let v = g.constant(Tensor::stack(&cache.values)?.reshape(cache_shape(&cache.values))?);
        let (mixed, _) = temporal_attention(q, k, v, self.heads, None)?;
        self.finish(g, x, mixed)
    }
}

fn cache_shape<T: Real>(frames: &[Tensor<T>]) -> Vec<usize> {
    let s = frames[0].shape();
    vec![frames.len(), s[1], s[2]]
}

#[derive(Debug, Clone, Default)]
struct KvCache<T: Real> {
    keys: Vec<Tensor<T>>,
    values: Vec<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub embedding: Embedding,
    pub blocks: Vec<EncoderBlock>,
    pub joints: usize,
    pub dim: usize,
    pub max_len: usize,
}

/// Latents `[T, V, D]` plus the attention weights `[V, heads, T, T]` of each block.
pub struct Encoded<'g, T: Real> {
    pub latents: Var<'g, T>,
    pub attention: Vec<Var<'g, T>>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        joints: usize,
        dim: usize,
        layers: usize,
        sagc_heads: usize,
        temporal_heads: usize,
        max_len: usize,
        topology: &Tensor<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let embedding = Embedding::new(store, &format!("{name}.embed"), joints, dim, rng);
        let blocks = (0..layers)
            .map(|l| {
                EncoderBlock::new(
                    store,
                    &format!("{name}.block{l}"),
                    dim,
                    sagc_heads,
                    temporal_heads,
                    topology,
                    rng,
                )
            })
            .collect::<Result<_>>()?;
        Ok(Encoder {
            embedding,
            blocks,
            joints,
            dim,
            max_len,
        })
    }

    /// `x`: `[T, V, 3]`.
    pub fn encode<'g, T: Real>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Encoded<'g, T>> {
        let len = x.shape()[0];
        if len > self.max_len {
            return Err(Error::Capacity { len, max: self.max_len });
        }
        let mask = g.constant(CausalMask::new(len).additive());
        let mut h = self.embedding.forward(g, x)?;
        let mut attention = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let out = block.forward(g, h, mask)?;
            h = out.hidden;
            attention.push(out.attention);
        }
        Ok(Encoded { latents: h, attention })
    }

    pub fn start<T: Real>(&self) -> EncoderState<T> {
        EncoderState {
            caches: vec![KvCache::default(); self.blocks.len()],
            frames: 0,
        }
    }

    /// Encodes one frame `[V, 3]` given the caches of earlier frames.
    /// Returns `Z_t` as `[V, D]`.
    pub fn step<T: Real>(&self, graph_params: &Graph<T>, state: &mut EncoderState<T>, frame: &Tensor<T>) -> Result<Tensor<T>> {
        if state.caches.len() != self.blocks.len() {
            return Err(Error::contract(format!(
                "state holds {} layer caches, encoder has {} blocks",
                state.caches.len(),
                self.blocks.len()
            )));
        }
        if state.frames >= self.max_len {
            return Err(Error::Capacity {
                len: state.frames + 1,
                max: self.max_len,
            });
        }
        if frame.shape() != [self.joints, 3] {
            return Err(Error::dim("encode_step", frame.shape(), &[self.joints, 3]));
        }
        let g = graph_params;
        let x = g.constant(frame.reshape([1, self.joints, 3])?);
        let mut h = self.embedding.forward(g, x)?;
        for (block, cache) in self.blocks.iter().zip(state.caches.iter_mut()) {
            h = block.step(g, h, cache)?;
        }
        state.frames += 1;
        h.value().reshape([self.joints, self.dim])
    }
}

/// Per-layer key/value caches of a single stream.
#[derive(Debug, Clone)]
pub struct EncoderState<T: Real> {
    caches: Vec<KvCache<T>>,
    frames: usize,
}

impl<T: Real> EncoderState<T> {
    /// Frames consumed so far.
    pub fn len(&self) -> usize {
        self.frames
    }

    pub fn is_empty(&self) -> bool {
        self.frames == 0
    }

    /// Cached key frames per layer.
    pub fn cache_lens(&self) -> Vec<usize> {
        self.caches.iter().map(|c| c.keys.len()).collect()
    }
}
