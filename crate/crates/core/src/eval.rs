//! Clustering accuracy under the best one-to-one matching of clusters to
//! classes, and the forgetting score across sessions.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Minimum-cost perfect matching on a square cost matrix.
///
/// Returns `perm` with `perm[row] = column`. O(k³) shortest augmenting paths
/// with vertex potentials.
pub fn hungarian(cost: ArrayView2<f64>) -> Result<Vec<usize>> {
    let (n, m) = cost.dim();
    ensure!(n == m, "cost matrix must be square, got {n}x{m}");
    ensure!(cost.iter().all(|c| c.is_finite()), "cost matrix has non-finite entries");
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; column 0 is the virtual start.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[p[j] - 1] = j - 1;
    }
    Ok(perm)
}

/// Result of matching predicted clusters to true classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringResult {
    pub accuracy: f64,
    /// Predicted cluster → true label, for every matched cluster.
    pub mapping: BTreeMap<usize, u32>,
    /// `confusion[c][y]` counts samples of label index `y` predicted as `c`;
    /// label indices follow `labels` (sorted ascending).
    pub confusion: Vec<Vec<u64>>,
    pub labels: Vec<u32>,
}

impl ClusteringResult {
    /// Accuracy of the stored mapping on a subset of samples.
    pub fn accuracy_on(&self, pred: &[usize], labels: &[u32]) -> f64 {
        if pred.is_empty() {
            return 0.0;
        }
        let hits = pred
            .iter()
            .zip(labels)
            .filter(|(c, y)| self.mapping.get(c) == Some(y))
            .count();
        hits as f64 / pred.len() as f64
    }
}

/// Best-matching accuracy of `pred` (clusters in `0..k_total`) against `labels`.
pub fn clustering_accuracy(pred: &[usize], labels: &[u32], k_total: usize) -> Result<ClusteringResult> {
    ensure!(pred.len() == labels.len(), "{} predictions for {} labels", pred.len(), labels.len());
    ensure!(!pred.is_empty(), "nothing to evaluate");
    if let Some(&bad) = pred.iter().find(|&&c| c >= k_total) {
        return Err(Error::Validation(format!("prediction {bad} outside 0..{k_total}")));
    }
    let mut uniq: Vec<u32> = labels.to_vec();
    uniq.sort_unstable();
    uniq.dedup();
    let index: BTreeMap<u32, usize> = uniq.iter().enumerate().map(|(i, &y)| (y, i)).collect();
    // Pad to square when cluster and label counts differ.
    let size = k_total.max(uniq.len());
    let mut counts = Array2::<u64>::zeros((size, size));
    for (&c, y) in pred.iter().zip(labels) {
        counts[[c, index[y]]] += 1;
    }
    let cost = counts.mapv(|x| -(x as f64));
    let perm = hungarian(cost.view())?;
    let mut hits = 0u64;
    let mut mapping = BTreeMap::new();
    for (c, &yi) in perm.iter().enumerate() {
        if c < k_total && yi < uniq.len() {
            mapping.insert(c, uniq[yi]);
            hits += counts[[c, yi]];
        }
    }
    let confusion = (0..k_total)
        .map(|c| (0..uniq.len()).map(|y| counts[[c, y]]).collect())
        .collect();
    Ok(ClusteringResult {
        accuracy: hits as f64 / pred.len() as f64,
        mapping,
        confusion,
        labels: uniq,
    })
}

/// Per-session evaluation on the union of all test splits seen so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    /// 1-based.
    pub session: usize,
    pub pnum: usize,
    pub classes_seen: usize,
    pub acc_overall: f64,
    /// Accuracy on each task's test samples under the global mapping.
    pub acc_per_task: Vec<f64>,
    /// Same, with a mapping recomputed on each task's samples alone.
    pub acc_per_task_restricted: Vec<f64>,
    /// First-session accuracy on task-1 classes minus the current one.
    pub forgetting: Option<f64>,
    pub forgetting_restricted: Option<f64>,
    pub mapping: BTreeMap<usize, u32>,
    pub confusion: Vec<Vec<u64>>,
}

/// Mapping used for per-task accuracies and forgetting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MappingMode {
    #[default]
    Global,
    Restricted,
}

/// Builds a report from predictions over the concatenated test splits.
///
/// `task_sizes[t]` is the number of test rows belonging to task `t`, in order.
/// `first` is the session-1 report, used for the forgetting score.
pub fn session_report(
    session: usize,
    pnum: usize,
    pred: &[usize],
    labels: &[u32],
    k_total: usize,
    task_sizes: &[usize],
    first: Option<&SessionReport>,
) -> Result<SessionReport> {
    ensure!(
        task_sizes.iter().sum::<usize>() == pred.len(),
        "task sizes do not cover the predictions"
    );
    let global = clustering_accuracy(pred, labels, k_total)?;
    let mut per_task = Vec::with_capacity(task_sizes.len());
    let mut restricted = Vec::with_capacity(task_sizes.len());
    let mut start = 0;
    for &len in task_sizes {
        let (p, l) = (&pred[start..start + len], &labels[start..start + len]);
        per_task.push(global.accuracy_on(p, l));
        restricted.push(clustering_accuracy(p, l, k_total)?.accuracy);
        start += len;
    }
    let (forgetting, forgetting_restricted) = match (session, first) {
        (1, _) | (_, None) => (None, None),
        (_, Some(f)) => (
            Some(forgetting_score(f.acc_per_task[0], per_task[0])),
            Some(forgetting_score(f.acc_per_task_restricted[0], restricted[0])),
        ),
    };
    Ok(SessionReport {
        session,
        pnum,
        classes_seen: k_total,
        acc_overall: global.accuracy,
        acc_per_task: per_task,
        acc_per_task_restricted: restricted,
        forgetting,
        forgetting_restricted,
        mapping: global.mapping,
        confusion: global.confusion,
    })
}

/// Drop in first-task accuracy. May be negative; never clamped.
pub fn forgetting_score(first_session: f64, final_session: f64) -> f64 {
    first_session - final_session
}

/// Forgetting of the last report relative to the first, under `mode`.
pub fn forgetting_from_reports(reports: &[SessionReport], mode: MappingMode) -> Result<f64> {
    ensure!(reports.len() >= 2, "forgetting needs at least two sessions, got {}", reports.len());
    let (first, last) = (&reports[0], &reports[reports.len() - 1]);
    Ok(match mode {
        MappingMode::Global => forgetting_score(first.acc_per_task[0], last.acc_per_task[0]),
        MappingMode::Restricted => forgetting_score(first.acc_per_task_restricted[0], last.acc_per_task_restricted[0]),
    })
}
