//! Full recognition model: encoder, latent extrapolator and both heads.

use rand::Rng;

use crate::config::{ModelConfig, TrainConfig};
use crate::encoder::{Encoder, EncoderState};
use crate::error::{Error, Result};
use crate::heads::{ClassHead, PredHead};
use crate::losses::{loss_cls, loss_feat, loss_pred, smooth_labels, Losses};
use crate::ode::{ode_solve, unit_grid, SolverSpec, VectorField};
use crate::params::ParamStore;
use crate::tensor::{Graph, Real, Tensor, Var};

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub encoder: Encoder,
    pub field: VectorField,
    pub pred_head: PredHead,
    pub class_head: ClassHead,
}

/// Everything produced by one parallel pass over a sequence.
pub struct Forward<'g, T: Real> {
    /// Encoded latents `Z_{1:T}`, `[T, V, D]`.
    pub latents: Var<'g, T>,
    /// `trajectory[n]` row `r` is the latent extrapolated `n` frames ahead
    /// from frame `r`; `trajectory[0]` is `latents`.
    pub trajectory: Vec<Var<'g, T>>,
    /// Per-frame class probabilities `[T, C]`.
    pub probs: Var<'g, T>,
    /// Temporal attention per encoder block, `[V, heads, T, T]`.
    pub attention: Vec<Var<'g, T>>,
}

impl Model {
    /// Registers every parameter in `store` (names prefixed by component).
    pub fn new<T: Real>(config: ModelConfig, store: &mut ParamStore<T>, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let topology = config.skeleton()?.normalized();
        let c = &config;
        let encoder = Encoder::new(
            store,
            "encoder",
            c.joints,
            c.hidden,
            c.layers,
            c.sagc_heads,
            c.temporal_heads,
            c.max_len,
            &topology,
            rng,
        )?;
        let field = VectorField::new(store, "field", c.hidden, c.sagc_heads, &topology, c.pe_base, c.temporal_pe, rng)?;
        let pred_head = PredHead::new(store, "pred_head", c.hidden, &topology, rng);
        let class_head = ClassHead::new(
            store,
            "class_head",
            c.hidden,
            c.n_steps + 1,
            c.classes,
            c.sagc_heads,
            &topology,
            rng,
        )?;
        Ok(Model {
            config,
            encoder,
            field,
            pred_head,
            class_head,
        })
    }

    pub fn solver(&self) -> SolverSpec {
        SolverSpec {
            method: self.config.solver,
            substeps: self.config.substeps,
        }
    }

    /// Time fed to the vector field at the start of an extrapolation from
    /// 1-based frame `t`.
    fn start_time(&self, t: usize) -> f64 {
        if self.config.pe_relative {
            0.0
        } else {
            t as f64
        }
    }

    fn extrapolate<'g, T: Real>(&self, g: &'g Graph<T>, z: Var<'g, T>, first_frame: usize) -> Result<Vec<Var<'g, T>>> {
        let rows = z.shape()[0];
        let shifts: Vec<f64> = (0..rows).map(|r| self.start_time(first_frame + r)).collect();
        let f = |z: Var<'g, T>, t: &[f64]| self.field.eval(g, z, t);
        ode_solve(&f, z, &unit_grid(0.0, self.config.n_steps), &shifts, self.solver())
    }

    fn check_sequence<T: Real>(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.len() != 3 || s[1] != self.config.joints || s[2] != 3 {
            return Err(Error::dim("model input", s, &[self.config.joints, 3]));
        }
        Ok(())
    }

    /// Parallel pass over every frame of `x` (`[T, V, 3]`).
    pub fn forward<'g, T: Real>(&self, g: &'g Graph<T>, x: &Tensor<T>) -> Result<Forward<'g, T>> {
        self.check_sequence(x)?;
        let encoded = self.encoder.encode(g, g.constant(x.clone()))?;
        let trajectory = self.extrapolate(g, encoded.latents, 1)?;
        let probs = self.class_head.forward(g, &trajectory)?;
        Ok(Forward {
            latents: encoded.latents,
            trajectory,
            probs,
            attention: encoded.attention,
        })
    }

    /// Losses of a single labelled sequence.
    pub fn losses<'g, T: Real>(
        &self,
        g: &'g Graph<T>,
        fwd: &Forward<'g, T>,
        x: &Tensor<T>,
        label: usize,
        train: &TrainConfig,
    ) -> Result<Losses<'g, T>> {
        let target = smooth_labels(label, self.config.classes, train.label_smoothing)?;
        let cls = loss_cls(g, fwd.probs, &target)?;
        let future = &fwd.trajectory[1..];
        let (pred, pairs) = if train.lambda1 > 0.0 {
            let poses = future
                .iter()
                .map(|z| self.pred_head.forward(g, *z))
                .collect::<Result<Vec<_>>>()?;
            loss_pred(g, &poses, g.constant(x.clone()))?
        } else {
            let len = x.shape()[0];
            (g.constant(Tensor::scalar(T::zero())), crate::losses::pair_count(self.config.n_steps, len))
        };
        let feat = if train.lambda2 > 0.0 {
            loss_feat(g, future, fwd.latents, self.config.stop_grad_feat_target)?.0
        } else {
            g.constant(Tensor::scalar(T::zero()))
        };
        Losses::combine(cls, pred, feat, pairs, train.lambda1, train.lambda2)
    }

    /// Per-frame class probabilities `[T, C]` of a whole sequence.
    pub fn predict<T: Real>(&self, params: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        let g = params.graph();
        Ok(self.forward(&g, x)?.probs.value())
    }

    pub fn start_stream<T: Real>(&self) -> Stream<T> {
        Stream {
            state: self.encoder.start(),
        }
    }

    /// Consumes one frame `[V, 3]` and returns its class probabilities `[C]`.
    /// The prediction head is not evaluated.
    pub fn stream_step<T: Real>(&self, params: &ParamStore<T>, stream: &mut Stream<T>, frame: &Tensor<T>) -> Result<Tensor<T>> {
        let g = params.graph();
        let t = stream.state.len() + 1;
        let z = self.encoder.step(&g, &mut stream.state, frame)?;
        let (v, d) = (self.config.joints, self.config.hidden);
        let z = g.constant(z.reshape([1, v, d])?);
        let trajectory = self.extrapolate(&g, z, t)?;
        let probs = self.class_head.forward(&g, &trajectory)?.value();
        probs.reshape([self.config.classes])
    }
}

/// Incremental inference state of one stream.
#[derive(Debug, Clone)]
pub struct Stream<T: Real> {
    pub state: EncoderState<T>,
}

impl<T: Real> Stream<T> {
    pub fn frames(&self) -> usize {
        self.state.len()
    }
}

/// Index of the largest entry (first on ties).
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk() -> (Model, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = Model::new(ModelConfig::default(), &mut store, &mut rng).unwrap();
        (model, store)
    }

    #[test]
    fn desk_parameter_count() {
        let (v, d, m, c, n) = (6, 32, 2, 4, 2);
        let sagc = |din: usize, dout: usize| m * (v * v + din * dout + 2 * din * (dout / m));
        let embed = 3 * d + d + v * d;
        let block = 2 * d + 3 * sagc(d, d) + d * d + 2 * d + (d * 4 * d + 4 * d) + (4 * d * d + d);
        let field = 2 * sagc(d, d);
        let pred = 2 * d * d + d * 3 + 3;
        let class = sagc((n + 1) * d, d) + sagc(d, d) + d * c + c;
        let expected = embed + 2 * block + field + pred + class;
        assert_eq!(expected, 71_479);
        let (_, store) = desk();
        assert_eq!(store.numel(), expected);
    }

    #[test]
    fn forward_shapes_and_simplex() {
        let (model, store) = desk();
        let g = store.graph();
        let x = Tensor::from_fn([5, 6, 3], |i| (i as f64 * 0.1).sin());
        let fwd = model.forward(&g, &x).unwrap();
        assert_eq!(fwd.trajectory.len(), 3);
        assert_eq!(fwd.probs.shape(), vec![5, 4]);
        for row in fwd.probs.value().data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let bad = Tensor::<f64>::zeros([5, 5, 3]);
        assert!(model.forward(&g, &bad).is_err());
    }

    #[test]
    fn stream_matches_parallel_pass() {
        let (model, store) = desk();
        let x = Tensor::from_fn([6, 6, 3], |i| (i as f64 * 0.37).cos());
        let full = model.predict(&store, &x).unwrap();
        let mut stream = model.start_stream();
        for t in 0..6 {
            let p = model.stream_step(&store, &mut stream, &x.index0(t)).unwrap();
            assert!(p.max_abs_diff(&full.index0(t)) < 1e-12);
        }
        assert_eq!(stream.frames(), 6);
    }

    #[test]
    fn argmax_takes_first_maximum() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[2.0f32]), 0);
    }
}
