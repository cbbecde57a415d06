//! Self-check suites run by `skode verify`.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{Config, ModelConfig};
use crate::encoder::{temporal_attention, CausalMask, LayerNorm};
use crate::error::{Error, Result};
use crate::eval::attention_map;
use crate::layers::{Gcn, Sagc, SkeletonGraph};
use crate::losses::{loss_cls, loss_feat, loss_pred, smooth_labels};
use crate::model::Model;
use crate::ode::{ode_solve, Method, SolverSpec};
use crate::params::ParamStore;
use crate::tensor::{grad_check, grad_check_inputs, grad_check_params, GradReport, Graph, Real, Tensor, Var};

pub const OP_TOLERANCE: f64 = 1e-5;
pub const MODEL_TOLERANCE: f64 = 1e-4;
/// Central-difference step. Rounding error dominates below this at double precision.
pub const FD_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Grad,
    Ode,
    Causal,
    Count,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Grad, Suite::Ode, Suite::Causal, Suite::Count];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "grad" => Ok(Suite::Grad),
            "ode" => Ok(Suite::Ode),
            "causal" => Ok(Suite::Causal),
            "count" => Ok(Suite::Count),
            _ => Err(Error::Config(format!("unknown verify suite {s:?} (grad, ode, causal, count)"))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Suite::Grad => "grad",
            Suite::Ode => "ode",
            Suite::Causal => "causal",
            Suite::Count => "count",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub suite: Suite,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "ok  " } else { "FAIL" };
        write!(f, "[{status}] {}/{}: {}", self.suite, self.name, self.detail)
    }
}

pub fn run(suite: Suite) -> Result<Vec<Check>> {
    match suite {
        Suite::Grad => grad_suite(),
        Suite::Ode => ode_suite(),
        Suite::Causal => causal_suite(),
        Suite::Count => count_suite(),
    }
}

fn check(suite: Suite, name: impl Into<String>, passed: bool, detail: String) -> Check {
    Check {
        suite,
        name: name.into(),
        passed,
        detail,
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(lo..hi))
}

/// `sum(out ⊙ w)` for a fixed random `w`, so that every output entry matters.
fn project<'g>(out: Var<'g, f64>, seed: u64) -> Result<Var<'g, f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = uniform(&mut rng, &out.shape(), -1.0, 1.0);
    Ok(out.mul(out.graph().constant(w))?.sum())
}

fn grad_entry(name: &str, report: GradReport, tol: f64) -> Check {
    let worst = report.worst().cloned().unwrap_or_default();
    check(
        Suite::Grad,
        name,
        report.passes(tol),
        format!("max rel err {:.2e} at {} (tol {tol:.0e})", worst.1, worst.0),
    )
}

type OpFn = for<'g> fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>;

struct OpCase {
    name: &'static str,
    /// Input shapes given a random shape `[a, b, c]`.
    shapes: fn([usize; 3]) -> Vec<Vec<usize>>,
    /// Inputs drawn from `(lo, hi)`.
    range: (f64, f64),
    f: OpFn,
}

fn op_cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "matmul",
            shapes: |[a, b, c]| vec![vec![a, b], vec![b, c]],
            range: (-1.0, 1.0),
            f: |_, x| x[0].matmul(x[1]),
        },
        OpCase {
            name: "matmul_batched",
            shapes: |[a, b, c]| vec![vec![2, a, b], vec![b, c]],
            range: (-1.0, 1.0),
            f: |_, x| x[0].matmul(x[1]),
        },
        OpCase {
            name: "add",
            shapes: |[a, b, c]| vec![vec![a, b, c], vec![a, b, c]],
            range: (-1.0, 1.0),
            f: |_, x| x[0].add(x[1]),
        },
        OpCase {
            name: "sub",
            shapes: |[a, b, _]| vec![vec![a, b], vec![a, b]],
            range: (-1.0, 1.0),
            f: |_, x| x[0].sub(x[1]),
        },
        OpCase {
            name: "mul",
            shapes: |[a, b, c]| vec![vec![a, b, c], vec![a, b, c]],
            range: (-1.0, 1.0),
            f: |_, x| x[0].mul(x[1]),
        },
        OpCase {
            name: "scale_add_scalar",
            shapes: |[a, b, _]| vec![vec![a, b]],
            range: (-1.0, 1.0),
            f: |_, x| Ok(x[0].scale(-1.7).add_scalar(0.3)),
        },
        OpCase {
            name: "relu",
            shapes: |[a, b, c]| vec![vec![a, b, c]],
            range: (-1.0, 1.0),
            f: |_, x| Ok(x[0].relu()),
        },
        OpCase {
            name: "log_clamped",
            shapes: |[a, b, _]| vec![vec![a, b]],
            range: (0.2, 2.0),
            f: |_, x| Ok(x[0].log_clamped(1e-12)),
        },
        OpCase {
            name: "softmax_last",
            shapes: |[a, b, c]| vec![vec![a, b, c]],
            range: (-2.0, 2.0),
            f: |_, x| x[0].softmax(2),
        },
        OpCase {
            name: "softmax_first",
            shapes: |[a, b, _]| vec![vec![a, b]],
            range: (-2.0, 2.0),
            f: |_, x| x[0].softmax(0),
        },
        OpCase {
            name: "softmax_matmul",
            shapes: |[a, b, _]| vec![vec![a, b], vec![b, a]],
            range: (-1.0, 1.0),
            f: |_, x| x[0].matmul(x[1])?.softmax(1),
        },
        OpCase {
            name: "layer_norm",
            shapes: |[a, b, c]| vec![vec![a, b, c + 2], vec![c + 2], vec![c + 2]],
            range: (-1.0, 1.0),
            f: |_, x| x[0].layer_norm(x[1], x[2], 2, 1e-5),
        },
        OpCase {
            name: "layer_norm_chain",
            shapes: |[a, b, _]| vec![vec![a, b + 2], vec![b + 2], vec![b + 2]],
            range: (-1.0, 1.0),
            f: |_, x| {
                let y = x[0].layer_norm(x[1], x[2], 1, 1e-5)?;
                y.mul(x[0])?.layer_norm(x[1], x[2], 1, 1e-5)
            },
        },
        OpCase {
            name: "sum_mean_all",
            shapes: |[a, b, _]| vec![vec![a, b]],
            range: (-1.0, 1.0),
            f: |_, x| x[0].mul(x[0])?.sum().add(x[0].mean_all()),
        },
        OpCase {
            name: "sum_axis",
            shapes: |[a, b, c]| vec![vec![a, b, c]],
            range: (-1.0, 1.0),
            f: |_, x| x[0].sum_axis(1),
        },
        OpCase {
            name: "mean_axis",
            shapes: |[a, b, c]| vec![vec![a, b, c]],
            range: (-1.0, 1.0),
            f: |_, x| x[0].mean(2),
        },
        OpCase {
            name: "concat",
            shapes: |[a, b, c]| vec![vec![a, b, c], vec![a, b, c + 1]],
            range: (-1.0, 1.0),
            f: |_, x| Var::concat(&[x[0], x[1], x[0]], 2),
        },
        OpCase {
            name: "narrow",
            shapes: |[a, b, c]| vec![vec![a + 1, b, c]],
            range: (-1.0, 1.0),
            f: |_, x| x[0].narrow(0, 1, x[0].shape()[0] - 1),
        },
        OpCase {
            name: "reshape",
            shapes: |[a, b, c]| vec![vec![a, b, c]],
            range: (-1.0, 1.0),
            f: |_, x| {
                let s = x[0].shape();
                x[0].reshape([s[0] * s[1], s[2]])
            },
        },
        OpCase {
            name: "permute",
            shapes: |[a, b, c]| vec![vec![a, b, c]],
            range: (-1.0, 1.0),
            f: |_, x| x[0].permute(&[2, 0, 1]),
        },
        OpCase {
            name: "transpose",
            shapes: |[a, b, _]| vec![vec![a, b]],
            range: (-1.0, 1.0),
            f: |_, x| x[0].transpose(),
        },
    ]
}

/// Number of random shapes each operation is checked on.
pub const SHAPES_PER_OP: usize = 5;

fn grad_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in op_cases() {
        let mut worst: Option<(GradReport, Vec<Vec<usize>>)> = None;
        for k in 0..SHAPES_PER_OP {
            let dims = [rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(1..5)];
            let shapes = (case.shapes)(dims);
            let inputs: Vec<_> = shapes
                .iter()
                .map(|s| uniform(&mut rng, s, case.range.0, case.range.1))
                .collect();
            let f = case.f;
            let seed = 100 + k as u64;
            let report = grad_check(|g, x| project(f(g, x)?, seed), &inputs, FD_EPSILON)?;
            if worst.as_ref().is_none_or(|(w, _)| report.max_rel_error() > w.max_rel_error()) {
                worst = Some((report, shapes));
            }
        }
        let (report, shapes) = worst.expect("at least one shape");
        let mut c = grad_entry(case.name, report, OP_TOLERANCE);
        c.detail = format!("{} over {SHAPES_PER_OP} shapes, worst {shapes:?}", c.detail);
        out.push(c);
    }
    out.extend(layer_checks()?);
    out.push(full_loss_check()?);
    Ok(out)
}

fn layer_checks() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let topo = SkeletonGraph::star(4).normalized();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = uniform(&mut rng, &[4, 6], -1.0, 1.0);

    let mut store = ParamStore::<f64>::new();
    let gcn = Gcn::new(&mut store, "gcn", 6, 4, 2, &topo, &mut rng);
    let report = grad_check_params(&store, |g| project(gcn.forward(g, g.constant(h.clone()))?, 1), FD_EPSILON)?;
    out.push(grad_entry("gcn_params", report, OP_TOLERANCE));
    let report = grad_check_inputs(&store, |g, x| project(gcn.forward(g, x[0])?, 1), std::slice::from_ref(&h), FD_EPSILON)?;
    out.push(grad_entry("gcn_input", report, OP_TOLERANCE));

    let mut store = ParamStore::<f64>::new();
    let sagc = Sagc::new(&mut store, "sagc", 6, 4, 2, &topo, &mut rng)?;
    let report = grad_check_params(&store, |g| project(sagc.forward(g, g.constant(h.clone()))?, 2), FD_EPSILON)?;
    out.push(grad_entry("sagc_params", report, OP_TOLERANCE));
    let report = grad_check_inputs(&store, |g, x| project(sagc.forward(g, x[0])?, 2), std::slice::from_ref(&h), FD_EPSILON)?;
    out.push(grad_entry("sagc_input", report, OP_TOLERANCE));

    let mut store = ParamStore::<f64>::new();
    let ln = LayerNorm::new(&mut store, "ln", 6);
    let x = uniform(&mut rng, &[3, 4, 6], -1.0, 1.0);
    let report = grad_check_inputs(&store, |g, v| project(ln.forward(g, v[0])?, 3), &[x], FD_EPSILON)?;
    out.push(grad_entry("layer_norm_module", report, OP_TOLERANCE));

    let (t, v, d) = (4, 3, 8);
    let qkv: Vec<_> = (0..3).map(|_| uniform(&mut rng, &[t, v, d], -1.0, 1.0)).collect();
    let mask = CausalMask::new(t).additive::<f64>();
    let report = grad_check(
        |g, x| project(temporal_attention(x[0], x[1], x[2], 2, Some(g.constant(mask.clone())))?.0, 4),
        &qkv,
        FD_EPSILON,
    )?;
    out.push(grad_entry("causal_temporal_attention", report, OP_TOLERANCE));
    Ok(out)
}

/// Configuration of the whole-model gradient check.
pub fn toy_config() -> Config {
    let mut c = Config::default();
    c.model = ModelConfig {
        joints: 3,
        hidden: 8,
        layers: 2,
        sagc_heads: 2,
        temporal_heads: 2,
        n_steps: 2,
        classes: 3,
        max_len: 8,
        ..ModelConfig::default()
    };
    c.train.seq_len = 3;
    c
}

fn full_loss_check() -> Result<Check> {
    let config = toy_config();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(config.model.clone(), &mut store, &mut rng)?;
    let x = uniform(&mut rng, &[3, 3, 3], -1.0, 1.0);
    let report = grad_check_params(
        &store,
        |g| {
            let fwd = model.forward(g, &x)?;
            Ok(model.losses(g, &fwd, &x, 1, &config.train)?.total)
        },
        FD_EPSILON,
    )?;
    let mut c = grad_entry("full_loss", report, MODEL_TOLERANCE);
    c.detail = format!("{} over {} parameter entries", c.detail, store.numel());
    Ok(c)
}

/// Error at `t = 1` of the solver on `dz/dt = sign·z`, `z(0) = 1`.
pub fn exp_error(method: Method, substeps: usize, sign: f64) -> Result<f64> {
    let g = Graph::<f64>::new();
    let z0 = g.constant(Tensor::from_f64([1, 1], &[1.0])?);
    fn field<'g>(z: Var<'g, f64>, sign: f64) -> Result<Var<'g, f64>> {
        Ok(z.scale(sign))
    }
    let f = |z, _: &[f64]| field(z, sign);
    let spec = SolverSpec::new(method, substeps)?;
    let traj = ode_solve(&f, z0, &[0.0, 1.0], &[0.0], spec)?;
    Ok((traj[1].value().data()[0] - sign.exp()).abs())
}

/// Accepted error ratio when the substep count doubles.
pub fn order_band(method: Method) -> (f64, f64) {
    match method {
        Method::Euler => (1.7, 2.3),
        Method::Midpoint => (3.3, 4.7),
        Method::Rk4 => (12.0, f64::INFINITY),
    }
}

fn ode_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for method in [Method::Euler, Method::Midpoint, Method::Rk4] {
        let (lo, hi) = order_band(method);
        for sign in [1.0, -1.0] {
            let mut ratios = Vec::new();
            for s in [4, 8, 16] {
                ratios.push(exp_error(method, s, sign)? / exp_error(method, 2 * s, sign)?);
            }
            let passed = ratios.iter().all(|r| (lo..=hi).contains(r));
            let shown: Vec<String> = ratios.iter().map(|r| format!("{r:.3}")).collect();
            out.push(check(
                Suite::Ode,
                format!("{method}_{}", if sign > 0.0 { "growth" } else { "decay" }),
                passed,
                format!("error ratios for substeps 4→8, 8→16, 16→32: [{}] (band {lo}..{hi})", shown.join(", ")),
            ));
        }
    }
    Ok(out)
}

pub const CAUSAL_SEQUENCES: usize = 20;
pub const CAUSAL_LEN: usize = 12;

/// Largest differences between the parallel pass and (prefix, streaming)
/// recomputation over latents and probabilities.
#[derive(Debug, Clone, Copy, Default)]
pub struct CausalGaps {
    pub prefix_latent: f64,
    pub prefix_probs: f64,
    pub stream_latent: f64,
    pub stream_probs: f64,
    /// Largest attention weight above the diagonal (should be exactly 0).
    pub upper_attention: f64,
}

impl CausalGaps {
    fn merge(&mut self, o: CausalGaps) {
        self.prefix_latent = self.prefix_latent.max(o.prefix_latent);
        self.prefix_probs = self.prefix_probs.max(o.prefix_probs);
        self.stream_latent = self.stream_latent.max(o.stream_latent);
        self.stream_probs = self.stream_probs.max(o.stream_probs);
        self.upper_attention = self.upper_attention.max(o.upper_attention);
    }

    pub fn max_gap(&self) -> f64 {
        [self.prefix_latent, self.prefix_probs, self.stream_latent, self.stream_probs]
            .into_iter()
            .fold(0.0, f64::max)
    }
}

/// Compares the three ways of computing per-frame outputs for one sequence.
pub fn causal_gaps<T: Real>(model: &Model, params: &ParamStore<T>, x: &Tensor<T>) -> Result<CausalGaps> {
    let len = x.shape()[0];
    let g = params.graph();
    let fwd = model.forward(&g, x)?;
    let latents = fwd.latents.value();
    let probs = fwd.probs.value();
    let mut gaps = CausalGaps::default();
    for att in &fwd.attention {
        let a = att.value();
        let s = a.shape().to_vec();
        let t = s[2];
        for (i, &w) in a.data().iter().enumerate() {
            let (row, col) = ((i / t) % t, i % t);
            if col > row {
                gaps.upper_attention = gaps.upper_attention.max(w.f64().abs());
            }
        }
    }
    for t in 1..=len {
        let prefix = x.rows(0, t);
        let g = params.graph();
        let p = model.forward(&g, &prefix)?;
        let last = t - 1;
        gaps.prefix_latent = gaps
            .prefix_latent
            .max(p.latents.value().index0(last).max_abs_diff(&latents.index0(last)));
        gaps.prefix_probs = gaps
            .prefix_probs
            .max(p.probs.value().index0(last).max_abs_diff(&probs.index0(last)));
    }
    let mut state = model.encoder.start::<T>();
    let mut stream = model.start_stream::<T>();
    for t in 0..len {
        let frame = x.index0(t);
        let z = model.encoder.step(&params.graph(), &mut state, &frame)?;
        gaps.stream_latent = gaps.stream_latent.max(z.max_abs_diff(&latents.index0(t)));
        let p = model.stream_step(params, &mut stream, &frame)?;
        gaps.stream_probs = gaps.stream_probs.max(p.max_abs_diff(&probs.index0(t)));
    }
    Ok(gaps)
}

/// Runs [`causal_gaps`] on random sequences with fresh random weights each.
pub fn causal_sweep<T: Real>(config: &ModelConfig, sequences: usize, len: usize, seed: u64) -> Result<CausalGaps> {
    let mut total = CausalGaps::default();
    for i in 0..sequences {
        let mut rng = ChaCha8Rng::seed_from_u64(seed + i as u64);
        let mut store = ParamStore::<f64>::new();
        let model = Model::new(config.clone(), &mut store, &mut rng)?;
        let x = uniform(&mut rng, &[len, config.joints, 3], -1.0, 1.0);
        total.merge(causal_gaps(&model, &store.cast::<T>(), &x.cast::<T>())?);
        let map = attention_map(&model, &store, &x, i % config.temporal_heads)?;
        for r in 0..len {
            for c in r + 1..len {
                total.upper_attention = total.upper_attention.max(map.data()[r * len + c].abs());
            }
        }
    }
    Ok(total)
}

fn causal_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let config = ModelConfig::default();
    for (label, gaps, tol) in [
        ("double", causal_sweep::<f64>(&config, CAUSAL_SEQUENCES, CAUSAL_LEN, 0)?, 1e-9),
        ("single", causal_sweep::<f32>(&config, CAUSAL_SEQUENCES, CAUSAL_LEN, 0)?, 1e-4),
    ] {
        out.push(check(
            Suite::Causal,
            format!("parallel_vs_prefix_vs_stream_{label}"),
            gaps.max_gap() <= tol,
            format!(
                "max |Δ| latent prefix {:.2e} stream {:.2e}, probs prefix {:.2e} stream {:.2e} (tol {tol:.0e})",
                gaps.prefix_latent, gaps.stream_latent, gaps.prefix_probs, gaps.stream_probs
            ),
        ));
        out.push(check(
            Suite::Causal,
            format!("attention_upper_triangle_{label}"),
            gaps.upper_attention == 0.0,
            format!("max weight above the diagonal {:e}", gaps.upper_attention),
        ));
    }
    Ok(out)
}

/// Pairs summed by the prediction and feature losses for `n` steps on a
/// `len`-frame sequence.
pub fn summed_term_counts(n: usize, len: usize) -> Result<(usize, usize)> {
    let g = Graph::<f64>::new();
    let (v, d) = (2, 2);
    let poses: Vec<_> = (0..n).map(|_| g.constant(Tensor::zeros([len, v, 3]))).collect();
    let latents: Vec<_> = (0..n).map(|_| g.constant(Tensor::zeros([len, v, d]))).collect();
    let (_, kp) = loss_pred(&g, &poses, g.constant(Tensor::zeros([len, v, 3])))?;
    let (_, kf) = loss_feat(&g, &latents, g.constant(Tensor::zeros([len, v, d])), false)?;
    Ok((kp, kf))
}

fn count_suite() -> Result<Vec<Check>> {
    let mut out = Vec::new();
    let mut rows = Vec::new();
    let mut all = true;
    for n in 1..=5 {
        for len in [8, 16, 64] {
            let expected = n * len - n * (n + 1) / 2;
            let (kp, kf) = summed_term_counts(n, len)?;
            all &= kp == expected && kf == expected;
            rows.push(format!("N={n} T={len} K={kp}/{kf} (expect {expected})"));
        }
    }
    out.push(check(Suite::Count, "pair_counts", all, rows.join("; ")));

    let mut worst: f64 = 0.0;
    for classes in [2, 4, 10] {
        for label in 0..classes {
            let y = smooth_labels(label, classes, 0.1)?;
            worst = worst.max((y.iter().sum::<f64>() - 1.0).abs());
        }
    }
    out.push(check(
        Suite::Count,
        "smoothed_labels_sum_to_one",
        worst < 1e-12,
        format!("max |Σy - 1| = {worst:.1e}"),
    ));

    let mut worst: f64 = 0.0;
    for (len, classes) in [(1, 2), (5, 4), (16, 10)] {
        let g = Graph::<f64>::new();
        let probs = g.constant(Tensor::full([len, classes], 1.0 / classes as f64));
        let y = smooth_labels(0, classes, 0.1)?;
        let l = loss_cls(&g, probs, &y)?.value().item();
        let closed = (classes as f64).ln() / classes as f64;
        worst = worst.max((l - closed).abs());
    }
    out.push(check(
        Suite::Count,
        "uniform_prediction_closed_form",
        worst < 1e-12,
        format!("max |L_cls - ln(C)/C| = {worst:.1e}"),
    ));
    Ok(out)
}
