//! Task decoders on top of (extrapolated) latents.

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{Gcn, Linear, Sagc};
use crate::params::ParamStore;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Pose decoder: GCN → GCN → linear to 3D coordinates, no output activation.
#[derive(Debug, Clone)]
pub struct PredHead {
    pub first: Gcn,
    pub second: Gcn,
    pub out: Linear,
}

impl PredHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        topology: &Tensor<f64>,
        rng: &mut impl Rng,
    ) -> Self {
        PredHead {
            first: Gcn::new(store, &format!("{name}.gcn0"), dim, dim, 1, topology, rng),
            second: Gcn::new(store, &format!("{name}.gcn1"), dim, dim, 1, topology, rng),
            out: Linear::new(store, &format!("{name}.out"), dim, 3, true, rng),
        }
    }

    /// `[..., V, D]` → `[..., V, 3]`
    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, z: Var<'g, T>) -> Result<Var<'g, T>> {
        let h = self.first.forward(g, z)?;
        let h = self.second.forward(g, h)?;
        self.out.forward(g, h)
    }
}

/// Classifier over the channel concatenation of `N + 1` latent slices:
/// SA-GC → SA-GC → linear → mean over joints → softmax.
#[derive(Debug, Clone)]
pub struct ClassHead {
    pub first: Sagc,
    pub second: Sagc,
    pub out: Linear,
    pub slices: usize,
}

impl ClassHead {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        slices: usize,
        classes: usize,
        heads: usize,
        topology: &Tensor<f64>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(ClassHead {
            first: Sagc::new(store, &format!("{name}.sagc0"), slices * dim, dim, heads, topology, rng)?,
            second: Sagc::new(store, &format!("{name}.sagc1"), dim, dim, heads, topology, rng)?,
            out: Linear::new(store, &format!("{name}.out"), dim, classes, true, rng),
            slices,
        })
    }

    /// Pre-softmax scores `[B, C]` from slices of shape `[B, V, D]`.
    pub fn logits<'g, T: Real>(&self, g: &'g Graph<T>, slices: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        if slices.len() != self.slices {
            return Err(Error::contract(format!(
                "class head expects {} latent slices, got {}",
                self.slices,
                slices.len()
            )));
        }
        let x = Var::concat(slices, 2)?;
        let h = self.first.forward(g, x)?;
        let h = self.second.forward(g, h)?;
        self.out.forward(g, h)?.mean(1)
    }

    /// Class probabilities `[B, C]`.
    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, slices: &[Var<'g, T>]) -> Result<Var<'g, T>> {
        self.logits(g, slices)?.softmax(1)
    }
}
