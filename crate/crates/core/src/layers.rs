//! Skeleton graph and the graph-convolution layers built on it.
//!
//! All layers act on the last two axes `[..., V, D]`; leading axes (frames,
//! extrapolation start points) are batched.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Undirected joint graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonGraph {
    pub joints: usize,
    pub edges: Vec<(usize, usize)>,
}

impl SkeletonGraph {
    pub fn new(joints: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        if joints == 0 {
            return Err(Error::Config("skeleton graph needs at least one joint".into()));
        }
        for &(a, b) in &edges {
            if a >= joints || b >= joints {
                return Err(Error::Config(format!("edge ({a}, {b}) outside {joints} joints")));
            }
            if a == b {
                return Err(Error::Config(format!("self-loop edge ({a}, {a})")));
            }
        }
        Ok(SkeletonGraph { joints, edges })
    }

    /// Joint 0 connected to every other joint.
    pub fn star(joints: usize) -> Self {
        SkeletonGraph {
            joints,
            edges: (1..joints).map(|j| (0, j)).collect(),
        }
    }

    /// Binary `V×V` adjacency without self-loops.
    pub fn adjacency(&self) -> Tensor<f64> {
        let v = self.joints;
        let mut a = vec![0.0; v * v];
        for &(i, j) in &self.edges {
            a[i * v + j] = 1.0;
            a[j * v + i] = 1.0;
        }
        Tensor::new([v, v], a).expect("square")
    }

    pub fn normalized(&self) -> Tensor<f64> {
        normalize_adjacency(&self.adjacency()).expect("adjacency built symmetric")
    }

    /// Relabels joints so that new joint `i` is old joint `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        SkeletonGraph {
            joints: self.joints,
            edges: self.edges.iter().map(|&(a, b)| (inv[a], inv[b])).collect(),
        }
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
pub fn normalize_adjacency(a: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = a.shape();
    if s.len() != 2 || s[0] != s[1] {
        return Err(Error::dim("normalize_adjacency", s, &[]));
    }
    let v = s[0];
    let d = a.data();
    for i in 0..v {
        for j in 0..v {
            if d[i * v + j] != d[j * v + i] {
                return Err(Error::contract(format!("adjacency is not symmetric at ({i}, {j})")));
            }
            if d[i * v + j] != 0.0 && d[i * v + j] != 1.0 {
                return Err(Error::contract(format!("adjacency is not binary at ({i}, {j})")));
            }
        }
    }
    let mut with_loops = d.to_vec();
    for i in 0..v {
        with_loops[i * v + i] = 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..v)
        .map(|i| 1.0 / with_loops[i * v..(i + 1) * v].iter().sum::<f64>().sqrt())
        .collect();
    let out = Tensor::from_fn([v, v], |k| {
        let (i, j) = (k / v, k % v);
        inv_sqrt[i] * with_loops[k] * inv_sqrt[j]
    });
    Ok(out)
}

pub(crate) fn uniform_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in as f64).sqrt()
}

/// He-uniform bound for weights followed by a relu.
fn relu_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

fn mean_row_sum(a: &Tensor<f64>) -> f64 {
    a.data().iter().sum::<f64>() / a.shape()[0] as f64
}

/// Weight bound of an SA-GC layer. At initialization the attention is close
/// to uniform (`1/V`), so each head propagates through roughly `Ã/V`; the
/// bound scales the He bound by `V / (sqrt(M) * mean row sum of Ã)` to keep
/// activations from shrinking layer after layer.
fn sagc_weight_bound(fan_in: usize, heads: usize, topology: &Tensor<f64>) -> f64 {
    let v = topology.shape()[0] as f64;
    relu_bound(fan_in) * v / ((heads as f64).sqrt() * mean_row_sum(topology))
}

/// `x W + b`
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(format!("{name}.weight"), &[d_in, d_out], uniform_bound(d_in), rng);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros([d_out])));
        Linear { weight, bias }
    }

    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, x: Var<'g, T>) -> Result<Var<'g, T>> {
        let y = x.matmul(g.param(self.weight))?;
        match self.bias {
            Some(b) => y.add(g.param(b)),
            None => Ok(y),
        }
    }
}

/// Multi-head graph convolution with a fixed topology:
/// `relu(Σ_m Ã H W_m)`.
#[derive(Debug, Clone)]
pub struct Gcn {
    pub topology: Tensor<f64>,
    pub weights: Vec<ParamId>,
}

impl Gcn {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        heads: usize,
        topology: &Tensor<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        let weights = (0..heads)
            .map(|m| store.add_uniform(format!("{name}.head{m}.w"), &[d_in, d_out], relu_bound(d_in), rng))
            .collect();
        Gcn {
            topology: topology.clone(),
            weights,
        }
    }

    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, h: Var<'g, T>) -> Result<Var<'g, T>> {
        let a = g.constant(self.topology.cast());
        let mut acc: Option<Var<'g, T>> = None;
        for &w in &self.weights {
            let term = a.matmul(h)?.matmul(g.param(w))?;
            acc = Some(match acc {
                Some(s) => s.add(term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least one head").relu())
    }
}

/// One head of a self-attention graph convolution.
#[derive(Debug, Clone)]
pub struct SagcHead {
    /// Learnable topology `Ã_m`, initialized to the normalized adjacency.
    pub topology: ParamId,
    pub weight: ParamId,
    pub query: ParamId,
    pub key: ParamId,
}

/// Self-attention graph convolution:
/// `relu(Σ_m (Ã_m ⊙ SA_m(H)) H W_m)` with
/// `SA_m(H) = softmax(H W_K (H W_Q)ᵀ / sqrt(D'))`.
#[derive(Debug, Clone)]
pub struct Sagc {
    pub heads: Vec<SagcHead>,
    pub head_dim: usize,
    pub d_in: usize,
    pub d_out: usize,
}

impl Sagc {
    /// `D' = d_out / heads`. Propagation weights use an initialization
    /// compensated for the near-uniform initial attention.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        heads: usize,
        topology: &Tensor<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let bound = sagc_weight_bound(d_in, heads.max(1), topology);
        Self::with_weight_bound(store, name, d_in, d_out, heads, topology, bound, rng)
    }

    /// As [`Sagc::new`] with propagation weights drawn from `[-bound, bound]`.
    #[allow(clippy::too_many_arguments)]
    pub fn with_weight_bound<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        d_in: usize,
        d_out: usize,
        heads: usize,
        topology: &Tensor<f64>,
        w_bound: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 || d_out % heads != 0 {
            return Err(Error::Config(format!(
                "SA-GC output width {d_out} not divisible by {heads} heads"
            )));
        }
        let head_dim = d_out / heads;
        let bound = uniform_bound(d_in);
        let heads = (0..heads)
            .map(|m| SagcHead {
                topology: store.add(format!("{name}.head{m}.topology"), topology.cast()),
                weight: store.add_uniform(format!("{name}.head{m}.w"), &[d_in, d_out], w_bound, rng),
                query: store.add_uniform(format!("{name}.head{m}.w_q"), &[d_in, head_dim], bound, rng),
                key: store.add_uniform(format!("{name}.head{m}.w_k"), &[d_in, head_dim], bound, rng),
            })
            .collect();
        Ok(Sagc {
            heads,
            head_dim,
            d_in,
            d_out,
        })
    }

    /// Row-stochastic `[..., V, V]` attention of head `m`.
    pub fn attention<'g, T: Real>(&self, g: &'g Graph<T>, h: Var<'g, T>, m: usize) -> Result<Var<'g, T>> {
        let head = &self.heads[m];
        let k = h.matmul(g.param(head.key))?;
        let q = h.matmul(g.param(head.query))?;
        let rank = h.shape().len();
        k.matmul(q.transpose()?)?
            .scale(1.0 / (self.head_dim as f64).sqrt())
            .softmax(rank - 1)
    }

    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, h: Var<'g, T>) -> Result<Var<'g, T>> {
        self.check_input(&h)?;
        let mut acc: Option<Var<'g, T>> = None;
        for (m, head) in self.heads.iter().enumerate() {
            let sa = self.attention(g, h, m)?;
            let term = self.propagate(g, head, sa, h)?;
            acc = Some(match acc {
                Some(s) => s.add(term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least one head").relu())
    }

    /// Forward pass with the self-attention of every head replaced by `sa`.
    /// With `sa` all ones this is a plain multi-head GCN over `Ã_m`.
    pub fn forward_fixed_attention<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        h: Var<'g, T>,
        sa: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        self.check_input(&h)?;
        let mut acc: Option<Var<'g, T>> = None;
        for head in &self.heads {
            let term = self.propagate(g, head, sa, h)?;
            acc = Some(match acc {
                Some(s) => s.add(term)?,
                None => term,
            });
        }
        Ok(acc.expect("at least one head").relu())
    }

    fn propagate<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        head: &SagcHead,
        sa: Var<'g, T>,
        h: Var<'g, T>,
    ) -> Result<Var<'g, T>> {
        g.param(head.topology)
            .mul(sa)?
            .matmul(h)?
            .matmul(g.param(head.weight))
    }

    fn check_input<T: Real>(&self, h: &Var<'_, T>) -> Result<()> {
        let s = h.shape();
        if s.len() < 2 || s[s.len() - 1] != self.d_in {
            return Err(Error::dim("sagc", &s, &[self.d_in]));
        }
        Ok(())
    }
}
