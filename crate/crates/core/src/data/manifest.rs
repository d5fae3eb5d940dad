//! Task-split manifests.
//!
//! ```toml
//! dim = 128
//!
//! [[tasks]]
//! train = "task0_train.ucfv"
//! test = "task0_test.ucfv"
//! classes = 5
//! ```
//!
//! Relative paths resolve against the manifest's own directory.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::features::{read_features, read_header, FeatureFile};
use super::{Labeled, Stream, TaskData, Unlabeled};
use crate::error::{ensure, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub train: PathBuf,
    pub test: PathBuf,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamManifest {
    pub dim: usize,
    pub tasks: Vec<TaskEntry>,
    /// Directory relative paths are resolved against. Not serialized.
    #[serde(skip)]
    pub base: PathBuf,
}

impl StreamManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: StreamManifest = toml::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: {}", path.display(), e.message())))?;
        m.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Validation(format!("manifest serialization: {e}")))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.dim > 0, "manifest dim must be positive");
        ensure!(!self.tasks.is_empty(), "manifest lists no tasks");
        for (t, task) in self.tasks.iter().enumerate() {
            ensure!(task.classes > 0, "task {t} declares zero classes");
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base.join(p)
        }
    }

    /// Checks every referenced file exists and has the declared dimension,
    /// reading headers only.
    pub fn check_files(&self) -> Result<()> {
        for task in &self.tasks {
            for p in [&task.train, &task.test] {
                let path = self.resolve(p);
                ensure!(path.exists(), "missing feature file {}", path.display());
                let (_, d, _, _) = read_header(&path)?;
                ensure!(
                    d == self.dim,
                    "{} has dimension {d}, manifest declares {}",
                    path.display(),
                    self.dim
                );
            }
        }
        Ok(())
    }

    fn load_file(&self, p: &Path) -> Result<FeatureFile> {
        let path = self.resolve(p);
        ensure!(path.exists(), "missing feature file {}", path.display());
        let f = read_features(&path)?;
        ensure!(
            f.dim() == self.dim,
            "{} has dimension {}, manifest declares {}",
            path.display(),
            f.dim(),
            self.dim
        );
        ensure!(
            f.normalized,
            "{} is not flagged as L2-normalized; features must be unit-norm",
            path.display()
        );
        Ok(f)
    }

    fn entry(&self, t: usize) -> Result<&TaskEntry> {
        self.tasks
            .get(t)
            .ok_or_else(|| Error::Validation(format!("task {t} not in manifest")))
    }

    /// Labeled test split of task `t`.
    pub fn load_test(&self, t: usize) -> Result<Labeled> {
        let entry = self.entry(t)?;
        let test = self.load_file(&entry.test)?;
        let labels = test.labels.ok_or_else(|| {
            Error::Validation(format!(
                "{} carries no labels; test splits need them for evaluation",
                self.resolve(&entry.test).display()
            ))
        })?;
        Labeled::new(Unlabeled::from_f32(test.data.view()), labels)
    }

    pub fn load_task(&self, t: usize) -> Result<TaskData> {
        let entry = self.entry(t)?;
        let train = self.load_file(&entry.train)?;
        Ok(TaskData {
            classes: entry.classes,
            // Training labels are dropped here: the trainer never sees them.
            train: Unlabeled::from_f32(train.data.view()),
            test: self.load_test(t)?,
        })
    }

    pub fn load_stream(&self) -> Result<Stream> {
        let tasks = (0..self.tasks.len())
            .map(|t| self.load_task(t))
            .collect::<Result<Vec<_>>>()?;
        Ok(Stream {
            dim: self.dim,
            tasks,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        fs::write(
            &p,
            "dim = 4\nbogus = 1\n[[tasks]]\ntrain='a'\ntest='b'\nclasses=2\n",
        )
        .unwrap();
        assert!(StreamManifest::load(&p).is_err());
    }

    #[test]
    fn zero_classes_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        fs::write(&p, "dim = 4\n[[tasks]]\ntrain='a'\ntest='b'\nclasses=0\n").unwrap();
        assert!(StreamManifest::load(&p).is_err());
    }

    #[test]
    fn relative_paths_resolve_against_manifest_dir() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.toml");
        fs::write(&p, "dim = 4\n[[tasks]]\ntrain='a'\ntest='/abs/b'\nclasses=2\n").unwrap();
        let m = StreamManifest::load(&p).unwrap();
        assert_eq!(m.resolve(&m.tasks[0].train), dir.path().join("a"));
        assert_eq!(m.resolve(&m.tasks[0].test), PathBuf::from("/abs/b"));
        let err = m.load_task(0).unwrap_err().to_string();
        assert!(err.contains("missing feature file"), "{err}");
    }
}
