//! Observation-ratio evaluation, attention export and loss-setup ablations.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::params::ParamStore;
use crate::tensor::{Real, Tensor};
use crate::train::Trainer;

pub const DEFAULT_RATIO_STEP: f64 = 0.1;

/// `step, 2·step, …, 1.0`, rounded to 9 decimals.
pub fn ratio_grid(step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(Error::Config(format!("ratio step must lie in (0, 1], got {step}")));
    }
    let n = (1.0 / step - 1e-9).ceil() as usize;
    let mut grid: Vec<f64> = (1..n).map(|k| (k as f64 * step * 1e9).round() / 1e9).collect();
    grid.push(1.0);
    Ok(grid)
}

/// 1-based frame observed at ratio `r`: `ceil(r·T)`, at least 1.
pub fn frame_at_ratio(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64 - 1e-9).ceil() as usize).clamp(1, len)
}

/// Trapezoidal area normalized by the ratio span; a single point is its own value.
pub fn auc(ratios: &[f64], accuracies: &[f64]) -> f64 {
    match ratios.len() {
        0 => 0.0,
        1 => accuracies[0],
        _ => {
            let area: f64 = ratios
                .windows(2)
                .zip(accuracies.windows(2))
                .map(|(r, a)| (r[1] - r[0]) * (a[0] + a[1]) / 2.0)
                .sum();
            area / (ratios[ratios.len() - 1] - ratios[0])
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObservationCurve {
    pub ratios: Vec<f64>,
    pub accuracies: Vec<f64>,
    pub auc: f64,
}

impl ObservationCurve {
    /// From per-sequence probabilities `[T, C]` and labels.
    pub fn from_predictions<T: Real>(probs: &[Tensor<T>], labels: &[usize], ratios: &[f64]) -> Result<Self> {
        if probs.is_empty() || probs.len() != labels.len() {
            return Err(Error::contract("evaluation needs a nonempty set with one label per sequence"));
        }
        let accuracies: Vec<f64> = ratios
            .iter()
            .map(|&r| {
                let hits = probs
                    .iter()
                    .zip(labels)
                    .filter(|(p, &y)| {
                        let t = frame_at_ratio(r, p.shape()[0]);
                        argmax(p.index0(t - 1).data()) == y
                    })
                    .count();
                hits as f64 / probs.len() as f64
            })
            .collect();
        Ok(ObservationCurve {
            auc: auc(ratios, &accuracies),
            ratios: ratios.to_vec(),
            accuracies,
        })
    }

    /// Accuracy at the first grid ratio not below `ratio`.
    pub fn accuracy_at(&self, ratio: f64) -> Option<f64> {
        self.ratios
            .iter()
            .position(|&r| r >= ratio - 1e-12)
            .map(|i| self.accuracies[i])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("ratio,accuracy\n");
        for (r, a) in self.ratios.iter().zip(&self.accuracies) {
            out.push_str(&format!("{r},{a}\n"));
        }
        out
    }
}

/// Per-frame probabilities for every sequence.
pub fn predict_all<T: Real>(model: &Model, params: &ParamStore<T>, xs: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    xs.par_iter().map(|x| model.predict(params, x)).collect()
}

pub fn evaluate<T: Real>(
    model: &Model,
    params: &ParamStore<T>,
    xs: &[Tensor<T>],
    labels: &[usize],
    step: f64,
) -> Result<ObservationCurve> {
    let probs = predict_all(model, params, xs)?;
    ObservationCurve::from_predictions(&probs, labels, &ratio_grid(step)?)
}

/// `[T, T]` temporal attention of `head` in the last encoder block,
/// averaged over joints.
pub fn attention_map<T: Real>(model: &Model, params: &ParamStore<T>, x: &Tensor<T>, head: usize) -> Result<Tensor<f64>> {
    let heads = model.config.temporal_heads;
    if head >= heads {
        return Err(Error::contract(format!("head {head} out of range 0..{heads}")));
    }
    let g = params.graph();
    let fwd = model.forward(&g, x)?;
    let attn = fwd
        .attention
        .last()
        .ok_or_else(|| Error::contract("model has no encoder blocks"))?
        .value();
    let s = attn.shape().to_vec();
    let (v, h, t) = (s[0], s[1], s[2]);
    let data = attn.data();
    let mut out = vec![0.0f64; t * t];
    for j in 0..v {
        let base = (j * h + head) * t * t;
        for (o, &a) in out.iter_mut().zip(&data[base..base + t * t]) {
            *o += a.f64();
        }
    }
    out.iter_mut().for_each(|o| *o /= v as f64);
    Tensor::new([t, t], out)
}

pub fn matrix_csv(m: &Tensor<f64>) -> String {
    let cols = m.shape()[1];
    m.data()
        .chunks(cols)
        .map(|row| row.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",") + "\n")
        .collect()
}

/// Loss setup of one ablation arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSetup {
    ClsOnly,
    ClsPred,
    ClsPredFeat,
}

/// An arm such as `cls-only`, `cls+pred@2` or `cls+pred+feat@3:none`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Arm {
    pub name: String,
    pub setup: LossSetup,
    pub n_steps: usize,
    /// `false` for the `none` predictor: no extrapolation at all.
    pub ode: bool,
}

impl Arm {
    /// Parses `setup[@N][:ode|:none]`. `N` defaults to `default_n`.
    pub fn parse(text: &str, default_n: usize) -> Result<Self> {
        let bad = || Error::Config(format!("unrecognized ablation arm {text:?}"));
        let (rest, ode) = match text.split_once(':') {
            Some((r, "ode")) => (r, true),
            Some((r, "none")) => (r, false),
            Some(_) => return Err(bad()),
            None => (text, true),
        };
        let (setup, n) = match rest.split_once('@') {
            Some((s, n)) => (s, Some(n.parse::<usize>().map_err(|_| bad())?)),
            None => (rest, None),
        };
        let setup = match setup {
            "cls-only" => LossSetup::ClsOnly,
            "cls+pred" => LossSetup::ClsPred,
            "cls+pred+feat" => LossSetup::ClsPredFeat,
            _ => return Err(bad()),
        };
        let n = n.unwrap_or(default_n);
        if n > 5 {
            return Err(Error::Config(format!("arm {text:?}: N must lie in 0..=5")));
        }
        let n_steps = if setup == LossSetup::ClsOnly || !ode { 0 } else { n };
        Ok(Arm {
            name: text.to_string(),
            setup,
            n_steps,
            ode: ode && setup != LossSetup::ClsOnly,
        })
    }

    /// `base` with this arm's loss weights and prediction steps.
    pub fn apply(&self, base: &Config) -> Config {
        let mut c = base.clone();
        c.model.n_steps = self.n_steps;
        match self.setup {
            LossSetup::ClsOnly => {
                c.train.lambda1 = 0.0;
                c.train.lambda2 = 0.0;
            }
            LossSetup::ClsPred => c.train.lambda2 = 0.0,
            LossSetup::ClsPredFeat => {}
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub arm: Arm,
    pub seeds: Vec<u64>,
    pub aucs: Vec<f64>,
    /// Test accuracy at the low observation ratio, per seed.
    pub low_ratio_accs: Vec<f64>,
    pub full_accs: Vec<f64>,
    /// Train accuracy at full observation after training, per seed.
    pub train_accs: Vec<f64>,
    pub median_auc: f64,
    pub median_low_ratio_acc: f64,
    pub seconds: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub ratio_step: f64,
    pub low_ratio: f64,
    pub arms: Vec<ArmReport>,
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    match v.len() {
        0 => f64::NAN,
        n if n % 2 == 1 => v[n / 2],
        n => (v[n / 2 - 1] + v[n / 2]) / 2.0,
    }
}

/// Data shared by every arm of an ablation.
pub struct Split<'a, T: Real> {
    pub train_x: &'a [Tensor<T>],
    pub train_y: &'a [usize],
    pub test_x: &'a [Tensor<T>],
    pub test_y: &'a [usize],
}

/// Trains one model per (arm, seed) and evaluates it on the test split.
pub fn ablate<T: Real>(
    base: &Config,
    arms: &[Arm],
    seeds: &[u64],
    data: &Split<'_, T>,
    ratio_step: f64,
    low_ratio: f64,
    mut progress: impl FnMut(&str, u64, &ObservationCurve),
) -> Result<AblationReport> {
    let mut reports = Vec::with_capacity(arms.len());
    for arm in arms {
        let mut r = ArmReport {
            arm: arm.clone(),
            seeds: seeds.to_vec(),
            aucs: Vec::new(),
            low_ratio_accs: Vec::new(),
            full_accs: Vec::new(),
            train_accs: Vec::new(),
            median_auc: 0.0,
            median_low_ratio_acc: 0.0,
            seconds: Vec::new(),
        };
        for &seed in seeds {
            let start = std::time::Instant::now();
            let mut cfg = arm.apply(base);
            cfg.train.seed = seed;
            let mut trainer = Trainer::<T>::new(cfg)?;
            trainer.fit(data.train_x, data.train_y, |_| {})?;
            let curve = evaluate(&trainer.model, &trainer.params, data.test_x, data.test_y, ratio_step)?;
            let probs = predict_all(&trainer.model, &trainer.params, data.test_x)?;
            let low = ObservationCurve::from_predictions(&probs, data.test_y, &[low_ratio])?;
            r.aucs.push(curve.auc);
            r.low_ratio_accs.push(low.accuracies[0]);
            r.full_accs.push(*curve.accuracies.last().expect("grid ends at 1"));
            let train_probs = predict_all(&trainer.model, &trainer.params, data.train_x)?;
            r.train_accs
                .push(ObservationCurve::from_predictions(&train_probs, data.train_y, &[1.0])?.accuracies[0]);
            r.seconds.push(start.elapsed().as_secs_f64());
            progress(&arm.name, seed, &curve);
        }
        r.median_auc = median(&r.aucs);
        r.median_low_ratio_acc = median(&r.low_ratio_accs);
        reports.push(r);
    }
    Ok(AblationReport {
        ratio_step,
        low_ratio,
        arms: reports,
    })
}
