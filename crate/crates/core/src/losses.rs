//! Classification, motion-prediction and feature-anticipation losses.
//!
//! Extrapolations are stored per step: `steps[n - 1]` holds, in row `r`, the
//! state extrapolated `n` frames ahead from frame `r` (0-based). The pair
//! `(t, n)` is valid when the target frame `t + n` exists.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Tensor, Var};

/// Probability floor inside the classification log.
pub const PROB_FLOOR: f64 = 1e-12;

/// `(1 - ε)·onehot(y) + ε/C`
pub fn smooth_labels(label: usize, classes: usize, eps: f64) -> Result<Vec<f64>> {
    if label >= classes {
        return Err(Error::contract(format!("label {label} outside 0..{classes}")));
    }
    let mut y = vec![eps / classes as f64; classes];
    y[label] += 1.0 - eps;
    Ok(y)
}

/// `-1/(T·C) Σ_t Σ_c y[c]·log(max(p_t[c], 1e-12))` for probabilities `[T, C]`.
pub fn loss_cls<'g, T: Real>(g: &'g Graph<T>, probs: Var<'g, T>, target: &[f64]) -> Result<Var<'g, T>> {
    let s = probs.shape();
    if s.len() != 2 || s[1] != target.len() {
        return Err(Error::dim("loss_cls", &s, &[target.len()]));
    }
    let y = g.constant(Tensor::from_f64([target.len()], target)?);
    let norm = (s[0] * s[1]) as f64;
    Ok(probs.log_clamped(PROB_FLOOR).mul(y)?.sum().scale(-1.0 / norm))
}

/// `N·T - N(N+1)/2`, the number of valid `(t, n)` pairs for `N <= T`.
pub fn pair_count(n_steps: usize, len: usize) -> usize {
    (1..=n_steps).map(|n| len.saturating_sub(n)).sum()
}

/// Mean over valid pairs of the per-pair MSE between `steps[n-1][t]` and
/// `truth[t + n]`. Returns the loss and the number of pairs summed.
pub fn pairwise_mse<'g, T: Real>(
    g: &'g Graph<T>,
    steps: &[Var<'g, T>],
    truth: Var<'g, T>,
) -> Result<(Var<'g, T>, usize)> {
    let ts = truth.shape();
    if ts.is_empty() {
        return Err(Error::dim("pairwise_mse", &ts, &[]));
    }
    let len = ts[0];
    let per_pair: usize = ts[1..].iter().product();
    let mut total: Option<Var<'g, T>> = None;
    let mut pairs = 0;
    for (i, pred) in steps.iter().enumerate() {
        let n = i + 1;
        if n >= len {
            continue;
        }
        let rows = len - n;
        let ps = pred.shape();
        if ps.is_empty() || ps[0] < rows {
            return Err(Error::contract(format!(
                "missing pair: step {n} needs {rows} start frames, got {}",
                ps.first().copied().unwrap_or(0)
            )));
        }
        if ps[1..] != ts[1..] {
            return Err(Error::dim("pairwise_mse", &ps, &ts));
        }
        let d = pred.narrow(0, 0, rows)?.sub(truth.narrow(0, n, rows)?)?;
        let sq = d.mul(d)?.sum();
        total = Some(match total {
            Some(acc) => acc.add(sq)?,
            None => sq,
        });
        pairs += rows;
    }
    Ok(match total {
        Some(sum) => (sum.scale(1.0 / (pairs * per_pair) as f64), pairs),
        None => (g.constant(Tensor::scalar(T::zero())), 0),
    })
}

/// Pose prediction loss against the observed frames `[T, V, 3]`.
pub fn loss_pred<'g, T: Real>(g: &'g Graph<T>, poses: &[Var<'g, T>], truth: Var<'g, T>) -> Result<(Var<'g, T>, usize)> {
    pairwise_mse(g, poses, truth)
}

/// Feature anticipation loss against the encoded latents `[T, V, D]`.
pub fn loss_feat<'g, T: Real>(
    g: &'g Graph<T>,
    latents: &[Var<'g, T>],
    encoded: Var<'g, T>,
    stop_grad_target: bool,
) -> Result<(Var<'g, T>, usize)> {
    let target = if stop_grad_target { encoded.detach() } else { encoded };
    pairwise_mse(g, latents, target)
}

/// Scalar summary of the three losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub l_cls: f64,
    pub l_pred: f64,
    pub l_feat: f64,
    pub total: f64,
    /// Number of `(t, n)` pairs in the prediction loss.
    pub term_count_pred: usize,
}

/// Differentiable losses of one sequence.
pub struct Losses<'g, T: Real> {
    pub cls: Var<'g, T>,
    pub pred: Var<'g, T>,
    pub feat: Var<'g, T>,
    pub total: Var<'g, T>,
    pub pairs: usize,
}

impl<'g, T: Real> Losses<'g, T> {
    /// `L = L_cls + λ₁·L_pred + λ₂·L_feat`
    pub fn combine(cls: Var<'g, T>, pred: Var<'g, T>, feat: Var<'g, T>, pairs: usize, lambda1: f64, lambda2: f64) -> Result<Self> {
        if lambda1 < 0.0 || lambda2 < 0.0 {
            return Err(Error::contract("loss weights must be nonnegative"));
        }
        let total = cls.add(pred.scale(lambda1))?.add(feat.scale(lambda2))?;
        Ok(Losses {
            cls,
            pred,
            feat,
            total,
            pairs,
        })
    }

    pub fn bundle(&self) -> LossBundle {
        LossBundle {
            l_cls: self.cls.value().item().f64(),
            l_pred: self.pred.value().item().f64(),
            l_feat: self.feat.value().item().f64(),
            total: self.total.value().item().f64(),
            term_count_pred: self.pairs,
        }
    }
}
