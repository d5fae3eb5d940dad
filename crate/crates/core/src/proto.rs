//! Fine-grained Gaussian prototypes.
//!
//! Each prototype `w` is an isotropic Gaussian with unit-norm mean `μ_w` and
//! scale `σ_w = exp(log σ_w)`. With unit-norm features the posterior of `w`
//! given `z` under uniform mixing weights is a softmax over
//! `s(w, z) = 2(zᵀμ_w − 1)/σ_w²  (= −‖z − μ_w‖²/σ_w²)`.
//! The M-step loss is the cross-entropy between balanced transport targets and
//! these posteriors.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::index::sample;

use crate::error::{ensure, Result};
use crate::math::{log_softmax_inplace, normalize_rows_inplace};
use crate::rng::{rng_for, Stream};

pub const SIGMA_INIT: f64 = 0.1;
pub const SIGMA_MIN: f64 = 1e-3;
pub const SIGMA_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeSet {
    /// `r × d`, unit rows after every projection.
    pub mu: Array2<f64>,
    /// Length `r`.
    pub log_sigma: Array1<f64>,
}

impl PrototypeSet {
    /// Builds `r` prototypes in `d` dimensions.
    ///
    /// With `init` holding at least `r` rows the means are `r` distinct rows
    /// drawn at random; otherwise they are uniform random unit vectors.
    pub fn init(r: usize, d: usize, seed: u64, task: usize, init: Option<ArrayView2<f64>>) -> Self {
        assert!(r >= 1 && d >= 2, "need r >= 1 and d >= 2");
        let mut rng = rng_for(seed, Stream::PrototypeInit, &[task as u64]);
        let mu = match init {
            Some(x) if x.nrows() >= r => {
                assert_eq!(x.ncols(), d, "init rows have wrong dimension");
                let idx = sample(&mut rng, x.nrows(), r).into_vec();
                let mut m = x.select(Axis(0), &idx);
                normalize_rows_inplace(&mut m);
                m
            }
            _ => crate::math::random_unit_rows(&mut rng, r, d),
        };
        Self {
            mu,
            log_sigma: Array1::from_elem(r, SIGMA_INIT.ln()),
        }
    }

    pub fn len(&self) -> usize {
        self.mu.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.mu.ncols()
    }

    pub fn sigma(&self) -> Array1<f64> {
        self.log_sigma.mapv(f64::exp)
    }

    /// `s(w, i) = 2(z_iᵀμ_w − 1)/σ_w²`, shape `r × n`.
    pub fn scores(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        ensure!(
            z.ncols() == self.dim(),
            "features have dimension {}, prototypes {}",
            z.ncols(),
            self.dim()
        );
        let mut s = self.mu.dot(&z.t());
        for (mut row, &ls) in s.rows_mut().into_iter().zip(&self.log_sigma) {
            let inv_var = (-2.0 * ls).exp();
            row.mapv_inplace(|c| 2.0 * (c - 1.0) * inv_var);
        }
        Ok(s)
    }

    /// Column-wise log-softmax of [`Self::scores`]: `log p(w | z_i)`, `r × n`.
    pub fn log_posterior(&self, z: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut s = self.scores(z)?;
        for col in s.columns_mut() {
            log_softmax_inplace(col);
        }
        Ok(s)
    }

    /// Index of the most probable prototype for every row of `z`.
    pub fn assign(&self, z: ArrayView2<f64>) -> Result<Vec<usize>> {
        let s = self.scores(z)?;
        Ok(s.columns().into_iter().map(crate::math::argmax).collect())
    }

    /// Back onto the constraint set: unit-norm means, clamped scales.
    pub fn project(&mut self) {
        normalize_rows_inplace(&mut self.mu);
        let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
        self.log_sigma.mapv_inplace(|x| x.clamp(lo, hi));
    }
}

/// `L = −(1/n) Σ_i Σ_w W[i,w]·logP[w,i]`.
pub fn proto_loss(w_target: ArrayView2<f64>, log_p: ArrayView2<f64>) -> Result<f64> {
    let (n, r) = w_target.dim();
    ensure!(
        log_p.dim() == (r, n),
        "targets are {n}x{r} but log-posterior is {:?}",
        log_p.dim()
    );
    ensure!(n > 0, "empty batch");
    let mut acc = 0.0;
    for i in 0..n {
        for w in 0..r {
            let t = w_target[[i, w]];
            if t != 0.0 {
                acc += t * log_p[[w, i]];
            }
        }
    }
    Ok(-acc / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProtoGrads {
    pub mu: Array2<f64>,
    pub log_sigma: Array1<f64>,
}

/// Loss and analytic gradients of the M-step cross-entropy.
///
/// `∂L/∂s[w,i] = (p[w,i] − W[i,w])/n`, chained through
/// `∂s/∂μ_w = 2z_i/σ_w²` and `∂s/∂log σ_w = −2s`.
pub fn proto_grads(
    z: ArrayView2<f64>,
    protos: &PrototypeSet,
    w_target: ArrayView2<f64>,
) -> Result<(f64, ProtoGrads)> {
    let n = z.nrows();
    let r = protos.len();
    ensure!(
        w_target.dim() == (n, r),
        "targets are {:?}, expected {n}x{r}",
        w_target.dim()
    );
    let s = protos.scores(z)?;
    let mut log_p = s.clone();
    for col in log_p.columns_mut() {
        log_softmax_inplace(col);
    }
    let loss = proto_loss(w_target, log_p.view())?;

    let inv_n = 1.0 / n as f64;
    let mut g = log_p.mapv(f64::exp);
    g -= &w_target.t();
    g.mapv_inplace(|x| x * inv_n);

    let mut dmu = g.dot(&z);
    let mut dls = Array1::zeros(r);
    for w in 0..r {
        let inv_var = (-2.0 * protos.log_sigma[w]).exp();
        dmu.row_mut(w).mapv_inplace(|x| 2.0 * inv_var * x);
        dls[w] = -2.0 * g.row(w).dot(&s.row(w));
    }
    Ok((
        loss,
        ProtoGrads {
            mu: dmu,
            log_sigma: dls,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::random_unit_rows;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn init_without_batch() {
        let p = PrototypeSet::init(3, 8, 4, 0, None);
        assert_eq!(p.mu.dim(), (3, 8));
        for r in p.mu.rows() {
            assert!((r.dot(&r) - 1.0).abs() < 1e-12);
        }
        for s in p.sigma() {
            assert!((s - 0.1).abs() < 1e-15);
        }
        assert_eq!(p, PrototypeSet::init(3, 8, 4, 0, None));
    }

    #[test]
    fn init_from_batch_picks_distinct_rows() {
        let x = random_unit_rows(&mut rng(1), 1000, 6);
        let p = PrototypeSet::init(1000, 6, 2, 0, Some(x.view()));
        let mut idx: Vec<usize> = p
            .mu
            .rows()
            .into_iter()
            .map(|m| {
                x.rows()
                    .into_iter()
                    .position(|r| r.iter().zip(m.iter()).all(|(a, b)| (a - b).abs() < 1e-12))
                    .expect("mean is a data row")
            })
            .collect();
        idx.sort_unstable();
        idx.dedup();
        assert_eq!(idx.len(), 1000);
    }

    #[test]
    fn single_prototype_posterior_is_certain() {
        let p = PrototypeSet::init(1, 4, 0, 0, None);
        let z = random_unit_rows(&mut rng(3), 5, 4);
        let lp = p.log_posterior(z.view()).unwrap();
        assert!(lp.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn equidistant_prototypes_split_evenly() {
        let p = PrototypeSet {
            mu: array![[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
            log_sigma: array![0.1f64.ln(), 0.1f64.ln()],
        };
        let s = 0.5f64.sqrt();
        let lp = p.log_posterior(array![[s, s, 0.0]].view()).unwrap();
        for &x in &lp {
            assert!((x.exp() - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_prototype_has_no_mass() {
        let p = PrototypeSet {
            mu: array![[1.0, 0.0], [0.0, 1.0]],
            log_sigma: array![0.1f64.ln(), 0.1f64.ln()],
        };
        let s = p.scores(array![[1.0, 0.0]].view()).unwrap();
        assert!(s[[0, 0]].abs() < 1e-12);
        assert!((s[[1, 0]] + 200.0).abs() < 1e-9);
        let lp = p.log_posterior(array![[1.0, 0.0]].view()).unwrap();
        assert_eq!(lp[[0, 0]].exp(), 1.0);
    }

    #[test]
    fn dimension_mismatch() {
        let p = PrototypeSet::init(2, 4, 0, 0, None);
        assert!(p.log_posterior(Array2::zeros((3, 5)).view()).is_err());
    }

    #[test]
    fn exponent_forms_agree() {
        let mut g = rng(9);
        let z = random_unit_rows(&mut g, 20, 16);
        let p = PrototypeSet {
            mu: random_unit_rows(&mut g, 7, 16),
            log_sigma: (0..7).map(|_| g.random_range(-3.0..0.0)).collect(),
        };
        let s = p.scores(z.view()).unwrap();
        for w in 0..7 {
            let inv_var = (-2.0 * p.log_sigma[w]).exp();
            for i in 0..20 {
                let d2 = (&z.row(i) - &p.mu.row(w)).mapv(|x| x * x).sum();
                let alt = -d2 * inv_var;
                assert!((s[[w, i]] - alt).abs() <= 1e-6 * alt.abs().max(1.0));
            }
        }
    }

    #[test]
    fn loss_of_uniform_is_log_r() {
        let w = Array2::from_elem((3, 4), 0.25);
        let lp = Array2::from_elem((4, 3), 0.25f64.ln());
        assert!((proto_loss(w.view(), lp.view()).unwrap() - 4f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn loss_of_matched_confident_is_zero() {
        let lp = array![[0.0, -1e3], [-1e3, 0.0]];
        let w = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(proto_loss(w.view(), lp.view()).unwrap().abs() < 1e-12);
        assert!(proto_loss(w.view(), array![[0.0, 0.0]].view()).is_err());
    }

    #[test]
    fn loss_matches_double_loop() {
        let mut g = rng(5);
        let mut w = Array2::from_shape_fn((8, 5), |_| g.random::<f64>());
        for mut r in w.rows_mut() {
            let s = r.sum();
            r /= s;
        }
        let mut lp = Array2::from_shape_fn((5, 8), |_| g.random_range(-4.0..0.0));
        for c in lp.columns_mut() {
            log_softmax_inplace(c);
        }
        let mut reference = 0.0;
        for i in 0..8 {
            for k in 0..5 {
                reference -= w[[i, k]] * lp[[k, i]];
            }
        }
        reference /= 8.0;
        assert!((proto_loss(w.view(), lp.view()).unwrap() - reference).abs() < 1e-6);
    }

    #[test]
    fn matched_targets_are_stationary() {
        let mut g = rng(2);
        let z = random_unit_rows(&mut g, 6, 8);
        let p = PrototypeSet {
            mu: random_unit_rows(&mut g, 3, 8),
            log_sigma: array![0.3f64.ln(), 0.5f64.ln(), 0.4f64.ln()],
        };
        let w = p.log_posterior(z.view()).unwrap().mapv(f64::exp).reversed_axes();
        let (_, grads) = proto_grads(z.view(), &p, w.view()).unwrap();
        assert!(grads.mu.iter().all(|x| x.abs() < 1e-14));
        assert!(grads.log_sigma.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn gradients_match_central_differences() {
        let h = 1e-4;
        for seed in 0..20 {
            let mut g = rng(100 + seed);
            let z = random_unit_rows(&mut g, 6, 8);
            let p = PrototypeSet {
                mu: random_unit_rows(&mut g, 3, 8),
                log_sigma: (0..3).map(|_| g.random_range(0.3f64.ln()..1.0f64.ln())).collect(),
            };
            let mut w = Array2::from_shape_fn((6, 3), |_| g.random::<f64>());
            for mut r in w.rows_mut() {
                let s = r.sum();
                r /= s;
            }
            let loss = |p: &PrototypeSet| {
                proto_loss(w.view(), p.log_posterior(z.view()).unwrap().view()).unwrap()
            };
            let (_, grads) = proto_grads(z.view(), &p, w.view()).unwrap();
            let mut worst = 0.0f64;
            for idx in 0..p.mu.len() {
                let (a, b) = (idx / 8, idx % 8);
                let mut pp = p.clone();
                pp.mu[[a, b]] += h;
                let mut pm = p.clone();
                pm.mu[[a, b]] -= h;
                let num = (loss(&pp) - loss(&pm)) / (2.0 * h);
                worst = worst.max(rel_err(grads.mu[[a, b]], num));
            }
            for k in 0..3 {
                let mut pp = p.clone();
                pp.log_sigma[k] += h;
                let mut pm = p.clone();
                pm.log_sigma[k] -= h;
                let num = (loss(&pp) - loss(&pm)) / (2.0 * h);
                worst = worst.max(rel_err(grads.log_sigma[k], num));
            }
            assert!(worst <= 1e-4, "seed {seed}: {worst}");
        }
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn widening_far_prototype_lowers_its_penalty() {
        // A far prototype with target mass: growing σ shrinks |s|, raising its
        // posterior and lowering the loss, so ∂L/∂log σ < 0.
        let z = array![[1.0, 0.0]];
        let p = PrototypeSet {
            mu: array![[1.0, 0.0], [0.0, 1.0]],
            log_sigma: array![0.5f64.ln(), 0.5f64.ln()],
        };
        let w = array![[0.5, 0.5]];
        let (_, grads) = proto_grads(z.view(), &p, w.view()).unwrap();
        assert!(grads.log_sigma[1] < 0.0);
        let mut wider = p.clone();
        wider.log_sigma[1] = 1.0f64.ln();
        let sp = p.scores(z.view()).unwrap();
        let sw = wider.scores(z.view()).unwrap();
        assert!(sw[[1, 0]].abs() < sp[[1, 0]].abs());
        let l0 = proto_loss(w.view(), p.log_posterior(z.view()).unwrap().view()).unwrap();
        let l1 = proto_loss(w.view(), wider.log_posterior(z.view()).unwrap().view()).unwrap();
        assert!(l1 < l0);
    }

    proptest! {
        #[test]
        fn projection_restores_constraints(seed in any::<u64>(), shift in -50.0f64..50.0) {
            let mut p = PrototypeSet::init(4, 6, seed, 0, None);
            p.mu.mapv_inplace(|x| x * 3.0 + 0.01);
            p.log_sigma.mapv_inplace(|x| x + shift);
            p.project();
            for r in p.mu.rows() {
                prop_assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-5);
            }
            for s in p.sigma() {
                prop_assert!((SIGMA_MIN * (1.0 - 1e-12)..=SIGMA_MAX * (1.0 + 1e-12)).contains(&s));
            }
        }

        #[test]
        fn posterior_columns_normalize(seed in any::<u64>()) {
            let mut g = rng(seed);
            let z = random_unit_rows(&mut g, 5, 6);
            let p = PrototypeSet::init(9, 6, seed, 1, None);
            let lp = p.log_posterior(z.view()).unwrap();
            for c in lp.columns() {
                prop_assert!((c.mapv(f64::exp).sum() - 1.0).abs() < 1e-6);
            }
        }
    }
}
