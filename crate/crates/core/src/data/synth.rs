//! Synthetic embedding streams.
//!
//! Each class gets a random direction on the unit sphere; samples are that
//! direction plus isotropic Gaussian noise, renormalized. Class directions are
//! rejected when too close (cosine above [`MAX_MEAN_COSINE`]) to an earlier one.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};

use super::features::{normalize_rows, write_features, FeatureFile};
use super::manifest::{StreamManifest, TaskEntry};
use super::{Labeled, Stream, TaskData, Unlabeled};
use crate::error::{ensure, Error, Result};
use crate::rng::{rng_for, Rng, Stream as RngStream};

pub const MAX_MEAN_COSINE: f64 = 0.95;
const MAX_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub tasks: usize,
    pub classes_per_task: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub spread: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.tasks > 0, "tasks must be positive");
        ensure!(self.classes_per_task > 0, "classes per task must be positive");
        ensure!(self.dim >= 2, "dim must be at least 2");
        ensure!(self.train_per_class > 0, "train samples per class must be positive");
        ensure!(self.test_per_class > 0, "test samples per class must be positive");
        ensure!(
            self.spread > 0.0 && self.spread.is_finite(),
            "spread must be positive and finite"
        );
        Ok(())
    }
}

/// Generated splits plus the generator's ground-truth class directions.
#[derive(Debug, Clone)]
pub struct SynthStream {
    pub spec: SynthSpec,
    /// `(train, test)` per task; labels are global class ids.
    pub splits: Vec<(FeatureFile, FeatureFile)>,
    /// Row `y` is the mean direction of global class `y`.
    pub means: Array2<f64>,
}

fn unit_gaussian(rng: &mut Rng, d: usize) -> Array1<f64> {
    loop {
        let v: Array1<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.dot(&v).sqrt();
        if n > 1e-12 {
            return v / n;
        }
    }
}

impl SynthStream {
    pub fn generate(spec: &SynthSpec) -> Result<Self> {
        spec.validate()?;
        let k_total = spec.tasks * spec.classes_per_task;
        let d = spec.dim;
        let mut rng = rng_for(spec.seed, RngStream::Synth, &[]);

        let mut means = Array2::<f64>::zeros((k_total, d));
        for y in 0..k_total {
            let mut attempts = 0;
            let m = loop {
                let cand = unit_gaussian(&mut rng, d);
                let ok = (0..y).all(|j| means.row(j).dot(&cand) <= MAX_MEAN_COSINE);
                if ok {
                    break cand;
                }
                attempts += 1;
                if attempts >= MAX_ATTEMPTS {
                    return Err(Error::Generation(format!(
                        "could not place class {y} of {k_total} with pairwise cosine <= {MAX_MEAN_COSINE} \
                         after {MAX_ATTEMPTS} attempts; use a larger dim than {d}"
                    )));
                }
            };
            means.row_mut(y).assign(&m);
        }

        let mut sample = |classes: std::ops::Range<usize>, per_class: usize| -> Result<FeatureFile> {
            let mut rows: Vec<(u32, Vec<f32>)> = Vec::with_capacity(classes.len() * per_class);
            for y in classes {
                for _ in 0..per_class {
                    let v: Vec<f32> = means
                        .row(y)
                        .iter()
                        .map(|&m| {
                            let e: f64 = StandardNormal.sample(&mut rng);
                            (m + spec.spread * e) as f32
                        })
                        .collect();
                    rows.push((y as u32, v));
                }
            }
            rows.shuffle(&mut rng);
            let n = rows.len();
            let mut data = Array2::<f32>::zeros((n, d));
            let mut labels = Vec::with_capacity(n);
            for (i, (y, v)) in rows.into_iter().enumerate() {
                data.row_mut(i).assign(&Array1::from(v));
                labels.push(y);
            }
            normalize_rows(&mut data)?;
            Ok(FeatureFile {
                data,
                labels: Some(labels),
                normalized: true,
            })
        };

        let mut splits = Vec::with_capacity(spec.tasks);
        for t in 0..spec.tasks {
            let range = t * spec.classes_per_task..(t + 1) * spec.classes_per_task;
            let train = sample(range.clone(), spec.train_per_class)?;
            let test = sample(range, spec.test_per_class)?;
            splits.push((train, test));
        }

        Ok(Self {
            spec: spec.clone(),
            splits,
            means,
        })
    }

    /// In-memory stream, as the trainer would see it after loading files.
    pub fn to_stream(&self) -> Stream {
        let tasks = self
            .splits
            .iter()
            .map(|(train, test)| TaskData {
                classes: self.spec.classes_per_task,
                train: Unlabeled::from_f32(train.data.view()),
                test: Labeled::new(
                    Unlabeled::from_f32(test.data.view()),
                    test.labels.clone().expect("synthetic splits carry labels"),
                )
                .expect("lengths match"),
            })
            .collect();
        Stream {
            dim: self.spec.dim,
            tasks,
        }
    }

    /// Writes `task{t}_{train,test}.ucfv` and `manifest.toml` under `out`.
    pub fn write(&self, out: &Path) -> Result<(StreamManifest, PathBuf)> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut tasks = Vec::with_capacity(self.splits.len());
        for (t, (train, test)) in self.splits.iter().enumerate() {
            let train_name = PathBuf::from(format!("task{t}_train.ucfv"));
            let test_name = PathBuf::from(format!("task{t}_test.ucfv"));
            write_features(train.data.view(), train.labels.as_deref(), &out.join(&train_name))?;
            write_features(test.data.view(), test.labels.as_deref(), &out.join(&test_name))?;
            tasks.push(TaskEntry {
                train: train_name,
                test: test_name,
                classes: self.spec.classes_per_task,
            });
        }
        let manifest = StreamManifest {
            dim: self.spec.dim,
            tasks,
            base: out.to_path_buf(),
        };
        let path = out.join("manifest.toml");
        manifest.save(&path)?;
        Ok((manifest, path))
    }
}

/// Generates a stream and writes it under `out`; returns the manifest path.
pub fn synth_stream(spec: &SynthSpec, out: &Path) -> Result<(StreamManifest, PathBuf)> {
    SynthStream::generate(spec)?.write(out)
}
