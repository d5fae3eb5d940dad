//! Class-discovery head.
//!
//! A two-layer projector `g` maps features into a small space where class
//! centers live. The class posterior is a temperature softmax over cosine
//! similarities between `g(z)` and the (normalized) centers. The head is
//! trained by aligning it with the prototype targets: the batch joint
//! `J = WᵀY/n` is scored by `H(Y|W) − λ·H(Y)`.

use std::ops::Range;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::error::{ensure, Result};
use crate::math::{dxlogx, random_unit_rows, softmax_rows, unit_rows, unit_rows_backward, xlogx};
use crate::rng::{rng_for, Stream};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

/// Two affine layers with a GELU between them.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `h × d`
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    /// `m × h`
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Projector {
    Mlp(Mlp),
    /// `g(z) = z`; used for the projector-free ablation.
    Identity { dim: usize },
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ProjectorCache {
    pre: Option<Array2<f64>>,
    act: Option<Array2<f64>>,
    /// Unit-normalized output rows.
    pub u: Array2<f64>,
    norms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

impl Projector {
    /// Uniform `±1/sqrt(fan_in)` initialization for weights and biases.
    pub fn new_mlp(d: usize, hidden: usize, out: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::ProjectorInit, &[]);
        let mut layer = |fan_out: usize, fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let w = Array2::from_shape_fn((fan_out, fan_in), |_| rng.random_range(-bound..bound));
            let b = Array1::from_shape_fn(fan_out, |_| rng.random_range(-bound..bound));
            (w, b)
        };
        let (w1, b1) = layer(hidden, d);
        let (w2, b2) = layer(out, hidden);
        Projector::Mlp(Mlp { w1, b1, w2, b2 })
    }

    pub fn input_dim(&self) -> usize {
        match self {
            Projector::Mlp(m) => m.w1.ncols(),
            Projector::Identity { dim } => *dim,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self {
            Projector::Mlp(m) => m.w2.nrows(),
            Projector::Identity { dim } => *dim,
        }
    }

    pub fn forward(&self, z: ArrayView2<f64>) -> Result<ProjectorCache> {
        ensure!(
            z.ncols() == self.input_dim(),
            "projector expects dimension {}, got {}",
            self.input_dim(),
            z.ncols()
        );
        match self {
            Projector::Mlp(m) => {
                let mut pre = z.dot(&m.w1.t());
                pre += &m.b1;
                let act = pre.mapv(gelu);
                let mut out = act.dot(&m.w2.t());
                out += &m.b2;
                let (u, norms) = unit_rows(out.view());
                Ok(ProjectorCache {
                    pre: Some(pre),
                    act: Some(act),
                    u,
                    norms,
                })
            }
            Projector::Identity { .. } => {
                let (u, norms) = unit_rows(z);
                Ok(ProjectorCache {
                    pre: None,
                    act: None,
                    u,
                    norms,
                })
            }
        }
    }

    /// Parameter gradients given `∂L/∂u` for the normalized outputs.
    pub fn backward(&self, z: ArrayView2<f64>, cache: &ProjectorCache, du: ArrayView2<f64>) -> Option<MlpGrads> {
        let Projector::Mlp(m) = self else {
            return None;
        };
        let dout = unit_rows_backward(cache.u.view(), &cache.norms, du);
        let act = cache.act.as_ref().expect("mlp cache");
        let pre = cache.pre.as_ref().expect("mlp cache");
        let dw2 = dout.t().dot(act);
        let db2 = dout.sum_axis(Axis(0));
        let mut dpre = dout.dot(&m.w2);
        dpre.zip_mut_with(pre, |g, &x| *g *= gelu_grad(x));
        let dw1 = dpre.t().dot(&z);
        let db1 = dpre.sum_axis(Axis(0));
        Some(MlpGrads {
            w1: dw1,
            b1: db1,
            w2: dw2,
            b2: db2,
        })
    }
}

/// Class centers for every class discovered so far, one block per session.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassCenters {
    /// `blocks[t]` is `cNum_t × m`.
    pub blocks: Vec<Array2<f64>>,
    pub tau: f64,
}

impl ClassCenters {
    pub fn new(tau: f64) -> Self {
        Self {
            blocks: Vec::new(),
            tau,
        }
    }

    /// Appends a block of `k` random unit centers for `task`.
    pub fn add_task(&mut self, k: usize, m: usize, seed: u64, task: usize) -> Range<usize> {
        let mut rng = rng_for(seed, Stream::CenterInit, &[task as u64]);
        let start = self.total();
        self.blocks.push(random_unit_rows(&mut rng, k, m));
        start..start + k
    }

    /// Appends a block initialized from the given rows (normalized).
    pub fn add_block(&mut self, mut rows: Array2<f64>) -> Range<usize> {
        crate::math::normalize_rows_inplace(&mut rows);
        let start = self.total();
        let k = rows.nrows();
        self.blocks.push(rows);
        start..start + k
    }

    pub fn total(&self) -> usize {
        self.blocks.iter().map(|b| b.nrows()).sum()
    }

    pub fn sessions(&self) -> usize {
        self.blocks.len()
    }

    /// Global index range of session `t`'s centers.
    pub fn range(&self, t: usize) -> Range<usize> {
        let start: usize = self.blocks[..t].iter().map(|b| b.nrows()).sum();
        start..start + self.blocks[t].nrows()
    }

    /// Task boundaries as cumulative offsets, `[0, k_1, k_1 + k_2, …]`.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut out = vec![0];
        for b in &self.blocks {
            out.push(out.last().unwrap() + b.nrows());
        }
        out
    }

    pub fn stacked(&self) -> Array2<f64> {
        let views: Vec<_> = self.blocks.iter().map(|b| b.view()).collect();
        ndarray::concatenate(Axis(0), &views).expect("blocks share width")
    }

    pub fn project(&mut self) {
        for b in &mut self.blocks {
            crate::math::normalize_rows_inplace(b);
        }
    }
}

/// Forward values of the head on one set of samples against all centers.
#[derive(Debug, Clone)]
pub struct HeadForward {
    pub proj: ProjectorCache,
    /// Normalized centers, `k_total × m`.
    pub centers_unit: Array2<f64>,
    center_norms: Vec<f64>,
    /// `cos/τ`, `n × k_total`.
    pub logits: Array2<f64>,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub projector: Option<MlpGrads>,
    /// One gradient block per center block.
    pub centers: Vec<Array2<f64>>,
}

pub fn head_forward(z: ArrayView2<f64>, projector: &Projector, centers: &ClassCenters) -> Result<HeadForward> {
    ensure!(centers.total() > 0, "no class centers");
    let proj = projector.forward(z)?;
    let stacked = centers.stacked();
    ensure!(
        stacked.ncols() == proj.u.ncols(),
        "centers have width {}, projector outputs {}",
        stacked.ncols(),
        proj.u.ncols()
    );
    let (centers_unit, center_norms) = unit_rows(stacked.view());
    let logits = proj.u.dot(&centers_unit.t()) / centers.tau;
    Ok(HeadForward {
        proj,
        centers_unit,
        center_norms,
        logits,
        tau: centers.tau,
    })
}

/// Backpropagates `∂L/∂logits` to projector parameters and center blocks.
pub fn head_backward(
    z: ArrayView2<f64>,
    projector: &Projector,
    centers: &ClassCenters,
    fwd: &HeadForward,
    dlogits: ArrayView2<f64>,
) -> HeadGrads {
    let dcos = dlogits.mapv(|g| g / fwd.tau);
    let du = dcos.dot(&fwd.centers_unit);
    let dcu = dcos.t().dot(&fwd.proj.u);
    let dc = unit_rows_backward(fwd.centers_unit.view(), &fwd.center_norms, dcu.view());
    let bounds = centers.boundaries();
    let blocks = bounds
        .windows(2)
        .map(|w| dc.slice(s![w[0]..w[1], ..]).to_owned())
        .collect();
    HeadGrads {
        projector: projector.backward(z, &fwd.proj, du.view()),
        centers: blocks,
    }
}

/// Class posterior over the centers in `subset`: `n × |subset|`.
pub fn class_posterior(
    z: ArrayView2<f64>,
    projector: &Projector,
    centers: &ClassCenters,
    subset: Range<usize>,
) -> Result<Array2<f64>> {
    ensure!(!subset.is_empty(), "empty center subset");
    ensure!(
        subset.end <= centers.total(),
        "center subset {subset:?} exceeds {} centers",
        centers.total()
    );
    let fwd = head_forward(z, projector, centers)?;
    Ok(softmax_rows(fwd.logits.slice(s![.., subset])))
}

/// Hard class predictions over all centers (task-id-free inference).
pub fn predict(z: ArrayView2<f64>, projector: &Projector, centers: &ClassCenters) -> Result<Vec<usize>> {
    let fwd = head_forward(z, projector, centers)?;
    Ok(fwd.logits.rows().into_iter().map(crate::math::argmax).collect())
}

/// Joint distribution of prototypes and classes over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct JointTable {
    /// `r × k`, grand sum 1.
    pub j: Array2<f64>,
    pub p_w: Array1<f64>,
    pub p_y: Array1<f64>,
}

/// `J = WᵀY / n`.
pub fn joint_table(w: ArrayView2<f64>, y: ArrayView2<f64>) -> Result<JointTable> {
    ensure!(
        w.nrows() == y.nrows(),
        "targets have {} rows, class posterior {}",
        w.nrows(),
        y.nrows()
    );
    ensure!(w.nrows() > 0, "empty batch");
    let j = w.t().dot(&y) / w.nrows() as f64;
    Ok(JointTable::from_joint(j))
}

impl JointTable {
    pub fn from_joint(j: Array2<f64>) -> Self {
        let p_w = j.sum_axis(Axis(1));
        let p_y = j.sum_axis(Axis(0));
        Self { j, p_w, p_y }
    }

    /// `H(Y|W)`.
    pub fn conditional_entropy(&self) -> f64 {
        -self.j.iter().map(|&x| xlogx(x)).sum::<f64>() + self.p_w.iter().map(|&x| xlogx(x)).sum::<f64>()
    }

    /// `H(Y)`.
    pub fn class_entropy(&self) -> f64 {
        -self.p_y.iter().map(|&x| xlogx(x)).sum::<f64>()
    }

    /// `I(W;Y) = H(Y) − H(Y|W)`.
    pub fn mutual_information(&self) -> f64 {
        self.class_entropy() - self.conditional_entropy()
    }
}

/// `L_align = H(Y|W) − λ·H(Y)`; with `λ = 1` this is `−I(W;Y)`.
pub fn align_loss(j: &JointTable, lambda_ga: f64) -> f64 {
    j.conditional_entropy() - lambda_ga * j.class_entropy()
}

/// `∂L_align/∂J`.
pub fn align_loss_grad(j: &JointTable, lambda_ga: f64) -> Array2<f64> {
    let mut g = j.j.mapv(|x| -dxlogx(x));
    for (w, mut row) in g.rows_mut().into_iter().enumerate() {
        let a = dxlogx(j.p_w[w]);
        for (y, v) in row.iter_mut().enumerate() {
            *v += a + lambda_ga * dxlogx(j.p_y[y]);
        }
    }
    g
}

/// `p(y|w) = J[w,·]/p(w)`. Rows with `p(w) < 1e-12` come back uniform and
/// flagged in the returned mask.
pub fn class_given_proto(j: &JointTable) -> (Array2<f64>, Vec<bool>) {
    let k = j.j.ncols();
    let mut out = j.j.clone();
    let mut empty = vec![false; j.j.nrows()];
    for (w, mut row) in out.rows_mut().into_iter().enumerate() {
        let pw = j.p_w[w];
        if pw < crate::math::LOG_FLOOR {
            row.fill(1.0 / k as f64);
            empty[w] = true;
        } else {
            row.mapv_inplace(|x| x / pw);
        }
    }
    (out, empty)
}

/// Alignment loss on the current-task slice of the logits and its gradient
/// with respect to the full logit matrix.
pub fn align_forward_backward(
    logits: ArrayView2<f64>,
    w_target: ArrayView2<f64>,
    current: Range<usize>,
    lambda_ga: f64,
) -> Result<(f64, Array2<f64>)> {
    let n = logits.nrows();
    let y = softmax_rows(logits.slice(s![.., current.clone()]));
    let jt = joint_table(w_target, y.view())?;
    let loss = align_loss(&jt, lambda_ga);
    let gj = align_loss_grad(&jt, lambda_ga);
    let dy = w_target.dot(&gj) / n as f64;
    let mut dlogits = Array2::zeros(logits.raw_dim());
    {
        let mut sub = dlogits.slice_mut(s![.., current]);
        for i in 0..n {
            let yi = y.row(i);
            let dyi = dy.row(i);
            let dot = yi.dot(&dyi);
            for c in 0..yi.len() {
                sub[[i, c]] = yi[c] * (dyi[c] - dot);
            }
        }
    }
    Ok((loss, dlogits))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_rows_stochastic(g: &mut rand_chacha::ChaCha8Rng, n: usize, k: usize) -> Array2<f64> {
        let mut m = Array2::from_shape_fn((n, k), |_| g.random::<f64>() + 1e-3);
        for mut r in m.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        m
    }

    fn identity_head(m: usize, centers: Array2<f64>) -> (Projector, ClassCenters) {
        (
            Projector::Identity { dim: m },
            ClassCenters {
                blocks: vec![centers],
                tau: 0.1,
            },
        )
    }

    #[test]
    fn single_class_posterior_is_one() {
        let (p, c) = identity_head(3, array![[1.0, 0.0, 0.0]]);
        let z = random_unit_rows(&mut rng(1), 4, 3);
        let y = class_posterior(z.view(), &p, &c, 0..1).unwrap();
        assert!(y.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn aligned_center_gets_softmax_ten_zero() {
        let (p, c) = identity_head(2, array![[1.0, 0.0], [0.0, 1.0]]);
        let y = class_posterior(array![[1.0, 0.0]].view(), &p, &c, 0..2).unwrap();
        let e = 10f64.exp();
        assert!((y[[0, 0]] - e / (e + 1.0)).abs() < 1e-12);
        assert!((y[[0, 0]] - 0.99995).abs() < 1e-5);
    }

    #[test]
    fn permuting_centers_permutes_columns() {
        let mut g = rng(4);
        let cs = random_unit_rows(&mut g, 3, 5);
        let z = random_unit_rows(&mut g, 6, 5);
        let (p, c) = identity_head(5, cs.clone());
        let perm = [2usize, 0, 1];
        let (_, c2) = identity_head(5, cs.select(Axis(0), &perm));
        let y = class_posterior(z.view(), &p, &c, 0..3).unwrap();
        let y2 = class_posterior(z.view(), &p, &c2, 0..3).unwrap();
        for i in 0..6 {
            for (a, &b) in perm.iter().enumerate() {
                assert!((y2[[i, a]] - y[[i, b]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empty_subset_rejected() {
        let (p, c) = identity_head(2, array![[1.0, 0.0]]);
        assert!(class_posterior(array![[1.0, 0.0]].view(), &p, &c, 0..0).is_err());
    }

    #[test]
    fn joint_of_matched_one_hots() {
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        let jt = joint_table(w.view(), w.view()).unwrap();
        assert_eq!(jt.j, array![[0.5, 0.0], [0.0, 0.5]]);
    }

    #[test]
    fn joint_of_uniforms_is_uniform() {
        let w = Array2::from_elem((6, 4), 0.25);
        let y = Array2::from_elem((6, 3), 1.0 / 3.0);
        let jt = joint_table(w.view(), y.view()).unwrap();
        for &v in &jt.j {
            assert!((v - 1.0 / 12.0).abs() < 1e-15);
        }
    }

    #[test]
    fn joint_matches_triple_loop() {
        let mut g = rng(8);
        let w = random_rows_stochastic(&mut g, 8, 5);
        let y = random_rows_stochastic(&mut g, 8, 3);
        let jt = joint_table(w.view(), y.view()).unwrap();
        for a in 0..5 {
            for b in 0..3 {
                let mut acc = 0.0;
                for i in 0..8 {
                    acc += w[[i, a]] * y[[i, b]];
                }
                assert!((jt.j[[a, b]] - acc / 8.0).abs() < 1e-7);
            }
        }
        assert!((jt.j.sum() - 1.0).abs() < 1e-12);
        assert_eq!(jt.p_w, jt.j.sum_axis(Axis(1)));
        assert_eq!(jt.p_y, jt.j.sum_axis(Axis(0)));
        assert!(joint_table(w.view(), y.slice(s![..7, ..])).is_err());
    }

    #[test]
    fn perfect_alignment_loss() {
        let j = array![[0.25, 0.0], [0.25, 0.0], [0.0, 0.25], [0.0, 0.25]];
        let jt = JointTable::from_joint(j);
        assert!(jt.conditional_entropy().abs() < 1e-15);
        assert!((align_loss(&jt, 4.0) + 4.0 * 2f64.ln()).abs() < 1e-12);
        let (p, empty) = class_given_proto(&jt);
        assert_eq!(p, array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]);
        assert!(empty.iter().all(|e| !e));
    }

    #[test]
    fn uniform_alignment_loss() {
        let jt = JointTable::from_joint(Array2::from_elem((4, 2), 0.125));
        assert!((align_loss(&jt, 4.0) - (1.0 - 4.0) * 2f64.ln()).abs() < 1e-12);
        let (p, _) = class_given_proto(&jt);
        assert!(p.iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn alignment_matches_entropy_loops() {
        let mut g = rng(12);
        let mut j = Array2::from_shape_fn((6, 3), |_| g.random::<f64>());
        let s = j.sum();
        j /= s;
        let jt = JointTable::from_joint(j.clone());
        let lambda = 4.0;
        let mut h_y_w = 0.0;
        for w in 0..6 {
            let pw: f64 = (0..3).map(|y| j[[w, y]]).sum();
            for y in 0..3 {
                h_y_w -= j[[w, y]] * (j[[w, y]] / pw).ln();
            }
        }
        let mut h_y = 0.0;
        for y in 0..3 {
            let py: f64 = (0..6).map(|w| j[[w, y]]).sum();
            h_y -= py * py.ln();
        }
        let reference = h_y_w - lambda * h_y;
        assert!((align_loss(&jt, lambda) - reference).abs() < 1e-6);
        let (p, _) = class_given_proto(&jt);
        for r in p.rows() {
            assert!((r.sum() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn empty_prototype_row_flagged() {
        let jt = JointTable::from_joint(array![[0.5, 0.5], [0.0, 0.0]]);
        let (p, empty) = class_given_proto(&jt);
        assert_eq!(empty, vec![false, true]);
        assert_eq!(p.row(1).to_vec(), vec![0.5, 0.5]);
    }

    #[test]
    fn mutual_information_is_bracketed() {
        let mut g = rng(3);
        for _ in 0..200 {
            let r = g.random_range(1..8);
            let k = g.random_range(1..6);
            let mut j = Array2::from_shape_fn((r, k), |_| {
                if g.random::<f64>() < 0.3 {
                    0.0
                } else {
                    g.random::<f64>()
                }
            });
            j[[0, 0]] += 1e-3;
            let s = j.sum();
            j /= s;
            let mi = JointTable::from_joint(j).mutual_information();
            let cap = (r as f64).ln().min((k as f64).ln());
            assert!(mi >= -1e-9 && mi <= cap + 1e-9, "{mi} vs {cap}");
        }
    }

    /// Exhaustive search over conditional tables p(y|w) on a grid, with
    /// uniform p(w): the minimizer is a deterministic map using every class.
    fn best_alignment_map(r: usize) -> Vec<Vec<f64>> {
        let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
        let total = grid.len().pow(r as u32);
        let mut best = (f64::INFINITY, vec![]);
        for code in 0..total {
            let mut c = code;
            let rows: Vec<f64> = (0..r)
                .map(|_| {
                    let v = grid[c % grid.len()];
                    c /= grid.len();
                    v
                })
                .collect();
            let j = Array2::from_shape_fn((r, 2), |(w, y)| {
                let p = if y == 0 { rows[w] } else { 1.0 - rows[w] };
                p / r as f64
            });
            let l = align_loss(&JointTable::from_joint(j), 1.0);
            if l < best.0 - 1e-12 {
                best = (l, rows.iter().map(|&p| vec![p, 1.0 - p]).collect());
            }
        }
        best.1
    }

    #[test]
    fn alignment_optimum_is_deterministic_and_uses_all_classes() {
        for r in [3, 4] {
            let map = best_alignment_map(r);
            let mut loads = [0usize; 2];
            for row in &map {
                assert!(row[0] == 0.0 || row[0] == 1.0, "{map:?}");
                loads[usize::from(row[1] == 1.0)] += 1;
            }
            assert!(loads[0] > 0 && loads[1] > 0);
            assert!(loads[0].abs_diff(loads[1]) <= r % 2);
        }
    }

    #[test]
    fn align_gradient_matches_differences() {
        let h = 1e-6;
        let mut g = rng(21);
        let w = random_rows_stochastic(&mut g, 7, 4);
        let logits = Array2::from_shape_fn((7, 5), |_| g.random_range(-3.0..3.0));
        let (_, d) = align_forward_backward(logits.view(), w.view(), 1..4, 4.0).unwrap();
        for i in 0..7 {
            for c in 0..5 {
                let mut lp = logits.clone();
                lp[[i, c]] += h;
                let mut lm = logits.clone();
                lm[[i, c]] -= h;
                let fp = align_forward_backward(lp.view(), w.view(), 1..4, 4.0).unwrap().0;
                let fm = align_forward_backward(lm.view(), w.view(), 1..4, 4.0).unwrap().0;
                let num = (fp - fm) / (2.0 * h);
                assert!((num - d[[i, c]]).abs() < 1e-7, "{i},{c}: {num} vs {}", d[[i, c]]);
            }
        }
    }

    #[test]
    fn center_bookkeeping() {
        let mut c = ClassCenters::new(0.1);
        assert_eq!(c.add_task(3, 4, 1, 0), 0..3);
        assert_eq!(c.add_task(2, 4, 1, 1), 3..5);
        assert_eq!(c.boundaries(), vec![0, 3, 5]);
        assert_eq!(c.range(1), 3..5);
        assert_eq!(c.stacked().nrows(), 5);
        for r in c.stacked().rows() {
            assert!((r.dot(&r) - 1.0).abs() < 1e-12);
        }
    }
}
