//! Learned vector field and fixed-step initial value problem solvers.
//!
//! Solvers are written against graph variables, so gradients flow through
//! every stage (discretize-then-optimize).

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{uniform_bound, Sagc};
use crate::params::ParamStore;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Midpoint,
    Rk4,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Method::Euler),
            "midpoint" => Ok(Method::Midpoint),
            "rk4" => Ok(Method::Rk4),
            other => Err(Error::Config(format!("unknown solver method {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Euler => "euler",
            Method::Midpoint => "midpoint",
            Method::Rk4 => "rk4",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SolverSpec {
    pub method: Method,
    /// Equal steps per grid interval.
    pub substeps: usize,
}

impl SolverSpec {
    pub fn new(method: Method, substeps: usize) -> Result<Self> {
        if substeps == 0 {
            return Err(Error::Config("substeps must be at least 1".into()));
        }
        Ok(SolverSpec { method, substeps })
    }
}

/// Transformer sinusoidal embedding of a real time:
/// `[2i] = sin(t / base^(2i/D))`, `[2i+1] = cos(t / base^(2i/D))`.
pub fn sinusoidal_pe(time: f64, dim: usize, base: f64) -> Result<Vec<f64>> {
    if dim % 2 != 0 {
        return Err(Error::contract(format!("time embedding width {dim} must be even")));
    }
    let mut pe = vec![0.0; dim];
    for i in 0..dim / 2 {
        let freq = base.powf((2 * i) as f64 / dim as f64);
        let arg = time / freq;
        pe[2 * i] = arg.sin();
        pe[2 * i + 1] = arg.cos();
    }
    Ok(pe)
}

/// `f(Z, t) = SAGC₂(SAGC₁(Z + PE(t)))` over `[B, V, D]` states, one time per row.
#[derive(Debug, Clone)]
pub struct VectorField {
    pub first: Sagc,
    pub second: Sagc,
    pub dim: usize,
    pub pe_base: f64,
    pub temporal_pe: bool,
}

impl VectorField {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        heads: usize,
        topology: &Tensor<f64>,
        pe_base: f64,
        temporal_pe: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        // Plain fan-in bounds keep the initial field small, so early
        // extrapolations stay close to the starting latent.
        let bound = uniform_bound(dim);
        Ok(VectorField {
            first: Sagc::with_weight_bound(store, &format!("{name}.sagc0"), dim, dim, heads, topology, bound, rng)?,
            second: Sagc::with_weight_bound(store, &format!("{name}.sagc1"), dim, dim, heads, topology, bound, rng)?,
            dim,
            pe_base,
            temporal_pe,
        })
    }

    pub fn eval<'g, T: Real>(&self, g: &'g Graph<T>, z: Var<'g, T>, times: &[f64]) -> Result<Var<'g, T>> {
        let input = if self.temporal_pe {
            let shape = z.shape();
            if shape.len() != 3 || shape[0] != times.len() {
                return Err(Error::dim("vector_field", &shape, &[times.len()]));
            }
            let mut pe = Vec::with_capacity(times.len() * self.dim);
            for &t in times {
                pe.extend(sinusoidal_pe(t, self.dim, self.pe_base)?);
            }
            z.add(g.constant(Tensor::from_f64([times.len(), 1, self.dim], &pe)?))?
        } else {
            z
        };
        let h = self.first.forward(g, input)?;
        self.second.forward(g, h)
    }
}

fn shifted(times: &[f64], dt: f64) -> Vec<f64> {
    times.iter().map(|t| t + dt).collect()
}

/// One explicit step of size `h` from `z` at per-row `times`.
pub fn ode_step<'g, T, F>(f: &F, z: Var<'g, T>, times: &[f64], h: f64, method: Method) -> Result<Var<'g, T>>
where
    T: Real,
    F: Fn(Var<'g, T>, &[f64]) -> Result<Var<'g, T>>,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!("step size must be positive, got {h}")));
    }
    match method {
        Method::Euler => z.add(f(z, times)?.scale(h)),
        Method::Midpoint => {
            let k1 = f(z, times)?;
            let mid = z.add(k1.scale(h / 2.0))?;
            let k2 = f(mid, &shifted(times, h / 2.0))?;
            z.add(k2.scale(h))
        }
        Method::Rk4 => {
            let half = shifted(times, h / 2.0);
            let k1 = f(z, times)?;
            let k2 = f(z.add(k1.scale(h / 2.0))?, &half)?;
            let k3 = f(z.add(k2.scale(h / 2.0))?, &half)?;
            let k4 = f(z.add(k3.scale(h))?, &shifted(times, h))?;
            let sum = k1.add(k2.scale(2.0))?.add(k3.scale(2.0))?.add(k4)?;
            z.add(sum.scale(h / 6.0))
        }
    }
}

/// Integrates from `z0` across `grid`, returning one state per grid point.
///
/// Row `b` of the leading axis runs on `grid + shifts[b]`. The first returned
/// state is `z0` itself.
pub fn ode_solve<'g, T, F>(
    f: &F,
    z0: Var<'g, T>,
    grid: &[f64],
    shifts: &[f64],
    spec: SolverSpec,
) -> Result<Vec<Var<'g, T>>>
where
    T: Real,
    F: Fn(Var<'g, T>, &[f64]) -> Result<Var<'g, T>>,
{
    if grid.is_empty() {
        return Err(Error::contract("empty time grid"));
    }
    if grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(Error::contract(format!("time grid not strictly increasing: {grid:?}")));
    }
    let mut out = Vec::with_capacity(grid.len());
    out.push(z0);
    let mut z = z0;
    for w in grid.windows(2) {
        let h = (w[1] - w[0]) / spec.substeps as f64;
        for s in 0..spec.substeps {
            let t0 = w[0] + h * s as f64;
            z = ode_step(f, z, &shifted(shifts, t0), h, spec.method)?;
        }
        out.push(z);
    }
    Ok(out)
}

/// `(t, t + 1, …, t + n)`
pub fn unit_grid(start: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|i| start + i as f64).collect()
}
