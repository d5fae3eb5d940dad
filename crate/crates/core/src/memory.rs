//! Knowledge preservation: per-prototype statistics consolidated at the end of
//! each task, replay sampling from them, and the overlap-reduction losses.

use std::collections::BTreeMap;
use std::ops::Range;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::classifier::{head_forward, ClassCenters, Projector};
use crate::data::Unlabeled;
use crate::error::{ensure, Result};
use crate::math::{argmax, l2_norm, log_sum_exp, softmax_rows};
use crate::proto::PrototypeSet;

pub const VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    #[default]
    Diagonal,
    Scalar,
}

/// Statistics of one prototype's share of a task's training features.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoStat {
    pub task: usize,
    /// Global class id (index into the class centers).
    pub class: usize,
    pub count: u64,
    pub purity: f64,
    pub mean: Vec<f64>,
    /// `d` entries in diagonal mode, one shared entry in scalar mode.
    pub var: Vec<f64>,
}

impl ProtoStat {
    pub fn weight(&self) -> f64 {
        self.count as f64 * self.purity
    }

    pub fn var_at(&self, j: usize) -> f64 {
        if self.var.len() == 1 {
            self.var[0]
        } else {
            self.var[j]
        }
    }
}

/// Assigns each training row to its most probable prototype and its predicted
/// current-task class, then summarizes every non-empty prototype.
///
/// `classes` is the global center range of the task being consolidated.
pub fn consolidate_task(
    train: &Unlabeled,
    protos: &PrototypeSet,
    projector: &Projector,
    centers: &ClassCenters,
    classes: Range<usize>,
    task: usize,
    mode: VarianceMode,
) -> Result<Vec<ProtoStat>> {
    ensure!(train.rows() > 0, "task {task} has no training features");
    let z = train.view();
    let assign = protos.assign(z)?;
    let fwd = head_forward(z, projector, centers)?;
    let pred: Vec<usize> = fwd
        .logits
        .slice(s![.., classes.clone()])
        .rows()
        .into_iter()
        .map(argmax)
        .collect();
    summarize(z, &assign, &pred, protos.len(), classes, task, mode)
}

/// The statistics pass of [`consolidate_task`], on precomputed assignments.
pub fn summarize(
    z: ArrayView2<f64>,
    assign: &[usize],
    pred: &[usize],
    r: usize,
    classes: Range<usize>,
    task: usize,
    mode: VarianceMode,
) -> Result<Vec<ProtoStat>> {
    let k = classes.len();
    let d = z.ncols();
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); r];
    for (i, &w) in assign.iter().enumerate() {
        members[w].push(i);
    }
    let mut out = Vec::new();
    for rows in members.iter().filter(|m| !m.is_empty()) {
        let mut votes = vec![0usize; k];
        for &i in rows {
            votes[pred[i]] += 1;
        }
        // Lowest class id wins ties.
        let (major, &hits) = votes
            .iter()
            .enumerate()
            .fold((0, &votes[0]), |best, cur| if cur.1 > best.1 { cur } else { best });
        let n = rows.len() as f64;
        let sel = z.select(Axis(0), rows);
        let mean = sel.mean_axis(Axis(0)).expect("non-empty");
        let mut var = vec![0.0; d];
        for row in sel.rows() {
            for j in 0..d {
                let e = row[j] - mean[j];
                var[j] += e * e;
            }
        }
        var.iter_mut().for_each(|v| *v = (*v / n).max(VAR_FLOOR));
        let var = match mode {
            VarianceMode::Diagonal => var,
            VarianceMode::Scalar => vec![var.iter().sum::<f64>() / d as f64],
        };
        out.push(ProtoStat {
            task,
            class: classes.start + major,
            count: rows.len() as u64,
            purity: hits as f64 / n,
            mean: mean.to_vec(),
            var,
        });
    }
    Ok(out)
}

/// Frozen prototype statistics from all completed tasks.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrototypeMemory {
    pub stats: Vec<ProtoStat>,
}

impl PrototypeMemory {
    pub fn extend(&mut self, stats: Vec<ProtoStat>) {
        self.stats.extend(stats);
    }

    /// Class id → indices into `stats`.
    pub fn by_class(&self) -> BTreeMap<usize, Vec<usize>> {
        let mut m: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, st) in self.stats.iter().enumerate() {
            m.entry(st.class).or_default().push(i);
        }
        m
    }

    pub fn total_floats(&self) -> usize {
        // mean + variance + (count, purity) per prototype
        self.stats.iter().map(|s| s.mean.len() + s.var.len() + 2).sum()
    }
}

/// Raw-exemplar memory, kept as a baseline for memory-budget comparisons.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ExemplarMemory {
    pub per_class: usize,
    /// `(class, features)`, ascending by class.
    pub classes: BTreeMap<usize, Array2<f64>>,
}

impl ExemplarMemory {
    pub fn new(per_class: usize) -> Self {
        Self {
            per_class,
            classes: BTreeMap::new(),
        }
    }

    /// Keeps up to `per_class` random training rows for each predicted class.
    pub fn consolidate<R: Rng>(
        &mut self,
        train: &Unlabeled,
        projector: &Projector,
        centers: &ClassCenters,
        classes: Range<usize>,
        rng: &mut R,
    ) -> Result<()> {
        let z = train.view();
        let fwd = head_forward(z, projector, centers)?;
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, row) in fwd.logits.slice(s![.., classes.clone()]).rows().into_iter().enumerate() {
            groups.entry(classes.start + argmax(row)).or_default().push(i);
        }
        for (class, idx) in groups {
            let keep = rand::seq::index::sample(rng, idx.len(), self.per_class.min(idx.len()));
            let rows: Vec<usize> = keep.into_iter().map(|j| idx[j]).collect();
            self.classes.insert(class, z.select(Axis(0), &rows));
        }
        Ok(())
    }

    pub fn total_floats(&self) -> usize {
        self.classes.values().map(|a| a.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Memory {
    Prototypes(PrototypeMemory),
    Exemplars(ExemplarMemory),
}

/// Replayed old-class features with their class ids.
#[derive(Debug, Clone)]
pub struct ReplaySet {
    pub z: Array2<f64>,
    pub labels: Vec<usize>,
    /// Classes whose prototype weights were all zero and fell back to a
    /// uniform prototype choice.
    pub fallback: Vec<usize>,
}

impl ReplaySet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl Memory {
    pub fn is_empty(&self) -> bool {
        self.num_classes() == 0
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Memory::Prototypes(m) => m.by_class().len(),
            Memory::Exemplars(m) => m.classes.len(),
        }
    }

    pub fn classes(&self) -> Vec<usize> {
        match self {
            Memory::Prototypes(m) => m.by_class().into_keys().collect(),
            Memory::Exemplars(m) => m.classes.keys().copied().collect(),
        }
    }

    pub fn total_floats(&self) -> usize {
        match self {
            Memory::Prototypes(m) => m.total_floats(),
            Memory::Exemplars(m) => m.total_floats(),
        }
    }

    /// Draws `s` features for every stored class.
    pub fn sample<R: Rng>(&self, s: usize, dim: usize, rng: &mut R) -> Result<ReplaySet> {
        match self {
            Memory::Prototypes(m) => sample_old(m, s, dim, rng),
            Memory::Exemplars(m) => {
                ensure!(s >= 1, "per-class replay size must be positive");
                let mut z = Array2::zeros((s * m.classes.len(), dim));
                let mut labels = Vec::with_capacity(z.nrows());
                let mut row = 0;
                for (&class, ex) in &m.classes {
                    for _ in 0..s {
                        let pick = rng.random_range(0..ex.nrows());
                        z.row_mut(row).assign(&ex.row(pick));
                        labels.push(class);
                        row += 1;
                    }
                }
                Ok(ReplaySet {
                    z,
                    labels,
                    fallback: Vec::new(),
                })
            }
        }
    }
}

/// Class-balanced replay: for each stored class, `s` draws from the mixture of
/// its prototypes weighted by `count × purity`, each renormalized to unit norm.
pub fn sample_old<R: Rng>(memory: &PrototypeMemory, s: usize, dim: usize, rng: &mut R) -> Result<ReplaySet> {
    ensure!(s >= 1, "per-class replay size must be positive");
    let by_class = memory.by_class();
    ensure!(!by_class.is_empty(), "memory is empty");
    let mut z = Array2::zeros((s * by_class.len(), dim));
    let mut labels = Vec::with_capacity(z.nrows());
    let mut fallback = Vec::new();
    let mut row = 0;
    for (&class, idx) in &by_class {
        let weights: Vec<f64> = idx.iter().map(|&i| memory.stats[i].weight()).collect();
        let picker = match WeightedIndex::new(&weights) {
            Ok(w) => Some(w),
            Err(_) => {
                fallback.push(class);
                None
            }
        };
        for _ in 0..s {
            let which = match &picker {
                Some(w) => w.sample(rng),
                None => rng.random_range(0..idx.len()),
            };
            let st = &memory.stats[idx[which]];
            ensure!(st.mean.len() == dim, "stored mean has dimension {}, expected {dim}", st.mean.len());
            let mut out = z.row_mut(row);
            for j in 0..dim {
                let e: f64 = StandardNormal.sample(rng);
                out[j] = st.mean[j] + st.var_at(j).sqrt() * e;
            }
            let n = l2_norm(out.view());
            if n > 0.0 {
                out.mapv_inplace(|x| x / n);
            }
            labels.push(class);
            row += 1;
        }
    }
    Ok(ReplaySet { z, labels, fallback })
}

/// Negative log-likelihood of each row's label under the softmax over all
/// centers, averaged; returns the loss and `∂L/∂logits`.
pub fn old_loss_from_logits(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    ensure!(labels.len() == n, "{} labels for {n} rows", labels.len());
    if n == 0 {
        return Ok((0.0, Array2::zeros((0, k))));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(crate::error::Error::Validation(format!(
            "replay label {bad} has no center (only {k})"
        )));
    }
    let mut loss = 0.0;
    let mut d = softmax_rows(logits);
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        loss += log_sum_exp(row.iter().copied()) - row[y];
        d[[i, y]] -= 1.0;
    }
    let inv = 1.0 / n as f64;
    d.mapv_inplace(|x| x * inv);
    Ok((loss * inv, d))
}

/// `−mean log Σ_{c ∈ current} softmax(logits)_c`, the mass on current-task
/// centers; returns the loss and `∂L/∂logits`.
pub fn sep_loss_from_logits(logits: ArrayView2<f64>, current: Range<usize>) -> Result<(f64, Array2<f64>)> {
    let (n, k) = logits.dim();
    ensure!(!current.is_empty() && current.end <= k, "bad current range {current:?} for {k} centers");
    if n == 0 || current.len() == k {
        return Ok((0.0, Array2::zeros((n, k))));
    }
    let p_all = softmax_rows(logits);
    let p_cur = softmax_rows(logits.slice(s![.., current.clone()]));
    let mut loss = 0.0;
    let mut d = p_all;
    for i in 0..n {
        let row = logits.row(i);
        let lse_all = log_sum_exp(row.iter().copied());
        let lse_cur = log_sum_exp(row.slice(s![current.clone()]).iter().copied());
        loss += lse_all - lse_cur;
        for (c, col) in current.clone().enumerate() {
            d[[i, col]] -= p_cur[[i, c]];
        }
    }
    let inv = 1.0 / n as f64;
    d.mapv_inplace(|x| x * inv);
    Ok((loss * inv, d))
}

/// `L_old` for a replay set under the current head.
pub fn old_loss(replay: &ReplaySet, projector: &Projector, centers: &ClassCenters) -> Result<f64> {
    if replay.is_empty() {
        return Ok(0.0);
    }
    let fwd = head_forward(replay.z.view(), projector, centers)?;
    Ok(old_loss_from_logits(fwd.logits.view(), &replay.labels)?.0)
}

/// `L_sep` for a current-task batch; zero when there are no old centers.
pub fn sep_loss(z: ArrayView2<f64>, projector: &Projector, centers: &ClassCenters, current: Range<usize>) -> Result<f64> {
    if current.len() == centers.total() {
        return Ok(0.0);
    }
    let fwd = head_forward(z, projector, centers)?;
    Ok(sep_loss_from_logits(fwd.logits.view(), current)?.0)
}

pub fn reduct_loss(l_old: f64, l_sep: f64, lambda_old: f64) -> f64 {
    lambda_old * l_old + l_sep
}
