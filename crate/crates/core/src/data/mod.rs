//! Embedding streams: feature files, manifests, batching and a synthetic
//! generator for desk-scale runs.

mod batch;
pub mod features;
pub mod manifest;
pub mod synth;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{ensure, Result};

pub use batch::{BatchPlan, FeatureBatch};
pub use features::{read_features, write_features, FeatureFile};
pub use manifest::{StreamManifest, TaskEntry};
pub use synth::{synth_stream, SynthSpec, SynthStream};

/// Unit-norm feature rows with no labels attached.
///
/// This is the only view of the data the trainer receives.
#[derive(Debug, Clone, PartialEq)]
pub struct Unlabeled {
    z: Array2<f64>,
}

impl Unlabeled {
    pub fn from_f32(data: ArrayView2<f32>) -> Self {
        Self {
            z: data.mapv(f64::from),
        }
    }

    pub fn new(z: Array2<f64>) -> Self {
        Self { z }
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn rows(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }

    pub fn gather(&self, idx: &[usize]) -> Array2<f64> {
        self.z.select(Axis(0), idx)
    }
}

/// Held-out features with ground truth, for the evaluator only.
#[derive(Debug, Clone, PartialEq)]
pub struct Labeled {
    pub features: Unlabeled,
    pub labels: Vec<u32>,
}

impl Labeled {
    pub fn new(features: Unlabeled, labels: Vec<u32>) -> Result<Self> {
        ensure!(
            features.rows() == labels.len(),
            "{} labels for {} rows",
            labels.len(),
            features.rows()
        );
        Ok(Self { features, labels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    /// Declared number of novel classes in this task.
    pub classes: usize,
    pub train: Unlabeled,
    pub test: Labeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stream {
    pub dim: usize,
    pub tasks: Vec<TaskData>,
}

impl Stream {
    pub fn validate(&self) -> Result<()> {
        ensure!(!self.tasks.is_empty(), "stream has no tasks");
        for (t, task) in self.tasks.iter().enumerate() {
            ensure!(task.classes > 0, "task {t} declares zero classes");
            ensure!(task.train.rows() > 0, "task {t} has no training rows");
            ensure!(task.test.features.rows() > 0, "task {t} has no test rows");
            ensure!(
                task.train.dim() == self.dim && task.test.features.dim() == self.dim,
                "task {t} dimension differs from stream dimension {}",
                self.dim
            );
        }
        Ok(())
    }
}
