//! Loss terms, training schedule, optimizer and the training loop.

mod losses;
mod optim;
mod run;

pub use losses::{
    build_sum_operator, instance_losses, loss_def, loss_match, loss_off, loss_rec, loss_reg,
    one_to_one_hard, total_loss, weighted_total, Ablation, InstanceLosses,
};
pub use optim::{AdamState, OptimizerKind};
pub use run::{
    evaluate, predict_matchings, train, write_metrics, CategoryEval, EvalOptions, EvalReport,
    MetricsRecord, TrainOptions, TrainState,
};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{DataError, DatasetManifest, Split};
use crate::geometry::normalize_keypoints;
use crate::network::NetworkConfig;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Autodiff(#[from] crate::autodiff::AutodiffError),
    #[error(transparent)]
    Geometry(#[from] crate::geometry::GeometryError),
    #[error(transparent)]
    Graph(#[from] crate::graphgen::GraphError),
    #[error(transparent)]
    Network(#[from] crate::network::NetworkError),
    #[error(transparent)]
    Match(#[from] crate::matching::MatchError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("instance '{id}' has no ground-truth universe labels")]
    MissingLabels { id: String },
    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("training split is empty")]
    EmptyTrainSplit,
    #[error("loss diverged to a non-finite value at iteration {iteration}")]
    Diverged { iteration: usize },
    #[error("parameters became non-finite after the step at iteration {iteration}")]
    NonFiniteParams { iteration: usize },
    #[error("checkpoint does not match the rebuilt model: {0}")]
    SetupMismatch(String),
}

/// Weights of the five loss terms.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    /// Matching loss weight.
    pub matching: f64,
    /// Deformed reconstruction loss weight.
    pub deformed_recon: f64,
    /// Static reconstruction loss weight.
    pub static_recon: f64,
    /// Offset magnitude regularizer weight.
    pub offset: f64,
    /// One-to-one matching regularizer weight.
    pub one_to_one: f64,
}

impl LossWeights {
    /// Warm start: reconstruction only.
    pub fn warm_start() -> Self {
        Self {
            matching: 0.0,
            deformed_recon: 0.0,
            static_recon: 1.0,
            offset: 0.0,
            one_to_one: 0.0,
        }
    }

    /// Main phase defaults.
    pub fn main_phase() -> Self {
        Self {
            matching: 1.0,
            deformed_recon: 0.5,
            static_recon: 0.0,
            offset: 0.05,
            one_to_one: 0.1,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let all = [
            self.matching,
            self.deformed_recon,
            self.static_recon,
            self.offset,
            self.one_to_one,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TrainError::InvalidWeights(format!(
                "weights must be finite and non-negative, got {all:?}"
            )));
        }
        Ok(())
    }
}

/// Iteration schedule. `total_iterations` includes the warm start.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub warm_start_iterations: usize,
    pub total_iterations: usize,
    pub batch_size: usize,
    pub initial_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
}

impl Schedule {
    /// Published schedule: warm start 4k, 150k iterations, batch 16,
    /// learning rate 0.008 decaying by 0.98 every 3k iterations.
    pub fn paper_defaults() -> Self {
        Self {
            warm_start_iterations: 4000,
            total_iterations: 150_000,
            batch_size: 16,
            initial_lr: 0.008,
            decay_factor: 0.98,
            decay_every: 3000,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        // total == 0 is the degenerate "initialize only" run.
        if self.total_iterations > 0 && self.warm_start_iterations >= self.total_iterations {
            return Err(TrainError::InvalidSchedule(format!(
                "warm start ({}) must be shorter than the total ({})",
                self.warm_start_iterations, self.total_iterations
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidSchedule("batch size must be positive".into()));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(TrainError::InvalidSchedule(format!(
                "learning rate must be positive, got {}",
                self.initial_lr
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(TrainError::InvalidSchedule(format!(
                "decay factor must be in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if self.decay_every == 0 {
            return Err(TrainError::InvalidSchedule("decay interval must be positive".into()));
        }
        Ok(())
    }

    /// `initial_lr * decay_factor^(t / decay_every)`, exactly.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        self.initial_lr
            * self
                .decay_factor
                .powi((iteration / self.decay_every) as i32)
    }
}

/// Everything that defines a run; stored verbatim in checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainSetup {
    pub categories: Vec<(String, usize)>,
    pub network: NetworkConfig,
    pub schedule: Schedule,
    /// Main-phase weights (the warm start always uses
    /// [`LossWeights::warm_start`]).
    pub weights: LossWeights,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub ablation: Ablation,
}

/// One instance after preprocessing: normalized keypoints, category index
/// and cached ground-truth structures.
#[derive(Debug, Clone)]
pub struct PreparedInstance {
    pub id: String,
    pub category: usize,
    pub split: Split,
    pub keypoints: Vec<[f64; 2]>,
    pub labels: Option<Vec<usize>>,
    pub d: usize,
}

impl PreparedInstance {
    pub fn m(&self) -> usize {
        self.keypoints.len()
    }

    pub fn labels(&self) -> Result<&[usize], TrainError> {
        self.labels
            .as_deref()
            .ok_or_else(|| TrainError::MissingLabels {
                id: self.id.clone(),
            })
    }

    /// Dense ground-truth matching matrix, row-major `m x d`.
    pub fn gt_dense(&self) -> Result<Vec<f64>, TrainError> {
        let labels = self.labels()?;
        let mut out = vec![0.0; labels.len() * self.d];
        for (r, &l) in labels.iter().enumerate() {
            out[r * self.d + l] = 1.0;
        }
        Ok(out)
    }

    /// Column-major vectorization of the ground-truth matching.
    pub fn gt_vec_cm(&self) -> Result<Vec<f64>, TrainError> {
        let labels = self.labels()?;
        let m = labels.len();
        let mut out = vec![0.0; m * self.d];
        for (r, &l) in labels.iter().enumerate() {
            out[l * m + r] = 1.0;
        }
        Ok(out)
    }

    pub fn gt_permutation(&self) -> Result<crate::matching::PartialPermutation, TrainError> {
        Ok(crate::matching::PartialPermutation::new(
            self.labels()?.to_vec(),
            self.d,
        )?)
    }
}

/// Normalizes keypoints into `[-1, 1]^2` and resolves category indices.
pub fn prepare_dataset(manifest: &DatasetManifest) -> Result<Vec<PreparedInstance>, TrainError> {
    manifest.validate()?;
    let mut out = Vec::with_capacity(manifest.instances.len());
    for inst in &manifest.instances {
        let category = manifest
            .category_index(&inst.category)
            .expect("validated categories");
        let (keypoints, _) = normalize_keypoints(&inst.keypoints)?;
        out.push(PreparedInstance {
            id: inst.id.clone(),
            category,
            split: inst.split,
            keypoints,
            labels: inst.universe_labels.clone(),
            d: manifest.categories[category].universe_size,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
