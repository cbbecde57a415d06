//! Model and training configuration.
//!
//! The JSON config document is flat: model keys and training keys live side
//! by side (see [`Config`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::SkeletonGraph;
use crate::ode::Method;
use crate::tensor::Precision;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Joint count `V`.
    pub joints: usize,
    /// Undirected skeleton edges; empty means the star skeleton rooted at joint 0.
    pub edges: Vec<(usize, usize)>,
    /// Hidden width `D`.
    pub hidden: usize,
    /// Encoder blocks `L`.
    pub layers: usize,
    /// SA-GC heads `M`.
    pub sagc_heads: usize,
    /// Temporal attention heads.
    pub temporal_heads: usize,
    /// Extrapolation steps `N`.
    pub n_steps: usize,
    /// Action classes `C`.
    pub classes: usize,
    /// Longest sequence the encoder accepts.
    pub max_len: usize,
    pub solver: Method,
    /// Solver steps per unit frame interval.
    pub substeps: usize,
    /// Treat the encoded target of the feature loss as a constant.
    pub stop_grad_feat_target: bool,
    /// Feed the offset from the extrapolation start (instead of the absolute
    /// frame index) to the temporal embedding of the vector field.
    pub pe_relative: bool,
    /// Add the sinusoidal time embedding inside the vector field.
    pub temporal_pe: bool,
    pub pe_base: f64,
}

impl Default for ModelConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        ModelConfig {
            joints: 6,
            edges: Vec::new(),
            hidden: 32,
            layers: 2,
            sagc_heads: 2,
            temporal_heads: 4,
            n_steps: 2,
            classes: 4,
            max_len: 64,
            solver: Method::Rk4,
            substeps: 1,
            stop_grad_feat_target: false,
            pe_relative: false,
            temporal_pe: true,
            pe_base: 10000.0,
        }
    }
}

impl ModelConfig {
    /// Full-size settings (L=4, D=128, N=3, four SA-GC heads so that D divides evenly) for a skeleton with `joints` joints.
    pub fn full_scale(joints: usize, classes: usize) -> Self {
        ModelConfig {
            joints,
            hidden: 128,
            layers: 4,
            sagc_heads: 4,
            temporal_heads: 8,
            n_steps: 3,
            classes,
            max_len: 64,
            ..ModelConfig::default()
        }
    }

    pub fn skeleton(&self) -> Result<SkeletonGraph> {
        if self.edges.is_empty() {
            Ok(SkeletonGraph::star(self.joints))
        } else {
            SkeletonGraph::new(self.joints, self.edges.clone())
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.joints == 0 || self.hidden == 0 || self.layers == 0 || self.classes == 0 {
            return fail("joints, hidden, layers and classes must be positive".into());
        }
        if self.sagc_heads == 0 || self.hidden % self.sagc_heads != 0 {
            return fail(format!(
                "hidden {} not divisible by sagc_heads {}",
                self.hidden, self.sagc_heads
            ));
        }
        if self.temporal_heads == 0 || self.hidden % self.temporal_heads != 0 {
            return fail(format!(
                "hidden {} not divisible by temporal_heads {}",
                self.hidden, self.temporal_heads
            ));
        }
        if self.hidden % 2 != 0 {
            return fail(format!("hidden {} must be even for the time embedding", self.hidden));
        }
        if self.max_len < self.n_steps + 1 {
            return fail(format!(
                "max_len {} must be at least n_steps + 1 = {}",
                self.max_len,
                self.n_steps + 1
            ));
        }
        if self.substeps == 0 {
            return fail("substeps must be at least 1".into());
        }
        self.skeleton()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs (1-based) after which the learning rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Frames per sequence after preprocessing.
    pub seq_len: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    /// Desk-scale configuration.
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 3e-4,
            decay_epochs: vec![40, 50],
            decay_factor: 0.1,
            max_epochs: 60,
            batch_size: 16,
            lambda1: 1e-1,
            lambda2: 1e-3,
            label_smoothing: 0.1,
            seed: 0,
            seq_len: 16,
            precision: Precision::Single,
        }
    }
}

impl TrainConfig {
    /// Full-size schedule: lr 0.1 decayed by 0.1 after epochs 50 and 60, 70 epochs.
    pub fn full_scale() -> Self {
        TrainConfig {
            lr: 0.1,
            decay_epochs: vec![50, 60],
            max_epochs: 70,
            batch_size: 64,
            seq_len: 64,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) {
            return Err(Error::Config(format!("lr must be nonnegative, got {}", self.lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::Config(format!(
                "decay_factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 {
            return Err(Error::Config("loss weights must be nonnegative".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Learning rate in effect once `epoch` epochs have completed.
    pub fn lr_after(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&d| d <= epoch).count();
        self.lr * self.decay_factor.powi(decays as i32)
    }
}

/// Flat JSON document holding both configurations.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Config {
    #[serde(flatten)]
    pub model: ModelConfig,
    #[serde(flatten)]
    pub train: TrainConfig,
}

impl Config {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Config = serde_json::from_str(text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.train.seq_len > self.model.max_len {
            return Err(Error::Capacity {
                len: self.train.seq_len,
                max: self.model.max_len,
            });
        }
        if self.train.seq_len < self.model.n_steps + 1 {
            return Err(Error::Config(format!(
                "seq_len {} must exceed n_steps {}",
                self.train.seq_len, self.model.n_steps
            )));
        }
        Ok(())
    }
}
