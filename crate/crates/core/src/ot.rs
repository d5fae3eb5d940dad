//! Balanced soft assignment of a batch to prototypes by entropic optimal
//! transport (Sinkhorn-Knopp scaling, log domain).
//!
//! Given log-posteriors `logP` (prototypes × samples), the plan is
//! `Q = Diag(u)·exp(logP/ε)·Diag(v)` with row marginals `1/r` and column
//! marginals `1/n`. Only a handful of iterations are run during training, so
//! the row balance is approximate; every iteration ends on a column
//! normalization, which makes each column an exact per-sample distribution
//! (up to the `1/n` factor).

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{ensure, Error, Result};
use crate::math::log_sum_exp;

/// A transport plan between `r` prototypes and `n` samples.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentPlan {
    /// `r × n`, non-negative, column sums `1/n`.
    pub q: Array2<f64>,
    pub epsilon: f64,
    pub iterations: usize,
}

impl AssignmentPlan {
    pub fn prototypes(&self) -> usize {
        self.q.nrows()
    }

    pub fn samples(&self) -> usize {
        self.q.ncols()
    }

    /// `Σ_w |Σ_i Q[w,i] − 1/r|`.
    pub fn row_deviation_l1(&self) -> f64 {
        let target = 1.0 / self.prototypes() as f64;
        self.q.sum_axis(Axis(1)).iter().map(|s| (s - target).abs()).sum()
    }

    /// `max_w |Σ_i Q[w,i] − 1/r|`.
    pub fn row_deviation_max(&self) -> f64 {
        let target = 1.0 / self.prototypes() as f64;
        self.q
            .sum_axis(Axis(1))
            .iter()
            .map(|s| (s - target).abs())
            .fold(0.0, f64::max)
    }

    /// `H(Q) = −Σ Q log Q`.
    pub fn entropy(&self) -> f64 {
        -self.q.iter().map(|&x| crate::math::xlogx(x)).sum::<f64>()
    }

    /// Per-sample targets `W = n·Qᵀ` (`n × r`, rows sum to 1).
    ///
    /// The result is a constant for the losses that consume it.
    pub fn to_per_sample_targets(&self) -> Array2<f64> {
        let n = self.samples() as f64;
        self.q.t().mapv(|x| x * n)
    }
}

/// Runs `iters` log-domain Sinkhorn sweeps (rows, then columns) on
/// `logP/epsilon`.
pub fn sinkhorn_balanced(log_p: ArrayView2<f64>, epsilon: f64, iters: usize) -> Result<AssignmentPlan> {
    let (r, n) = log_p.dim();
    ensure!(r >= 1 && n >= 1, "empty log-posterior matrix ({r}x{n})");
    ensure!(epsilon > 0.0 && epsilon.is_finite(), "epsilon must be positive, got {epsilon}");
    ensure!(iters >= 1, "sinkhorn needs at least one iteration");
    ensure!(
        log_p.iter().all(|x| x.is_finite()),
        "log-posterior contains non-finite entries"
    );

    let log_r = (r as f64).ln();
    let log_n = (n as f64).ln();
    let mut lq = log_p.mapv(|x| x / epsilon);
    let total = log_sum_exp(lq.iter().copied());
    lq.mapv_inplace(|x| x - total);

    for _ in 0..iters {
        for mut row in lq.rows_mut() {
            let s = log_sum_exp(row.iter().copied()) + log_r;
            row.mapv_inplace(|x| x - s);
        }
        for mut col in lq.columns_mut() {
            let s = log_sum_exp(col.iter().copied()) + log_n;
            col.mapv_inplace(|x| x - s);
        }
    }

    let mut q = lq.mapv(f64::exp);
    // Absorb exp rounding so every column sums to 1/n.
    for mut col in q.columns_mut() {
        let s = col.sum();
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Numerical(format!("sinkhorn column mass {s}")));
        }
        let scale = 1.0 / (n as f64 * s);
        col.mapv_inplace(|x| x * scale);
    }
    if q.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("sinkhorn plan has non-finite entries".into()));
    }
    Ok(AssignmentPlan {
        q,
        epsilon,
        iterations: iters,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;

    fn random_log_p(r: usize, n: usize, scale: f64, seed: u64) -> Array2<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut m = Array2::from_shape_fn((r, n), |_| rng.random_range(-scale..0.0));
        for mut col in m.columns_mut() {
            let lse = log_sum_exp(col.iter().copied());
            col.mapv_inplace(|x| x - lse);
        }
        m
    }

    #[test]
    fn uniform_input_gives_uniform_plan() {
        let plan = sinkhorn_balanced(Array2::zeros((4, 8)).view(), 0.05, 3).unwrap();
        for &x in &plan.q {
            assert!((x - 1.0 / 32.0).abs() < 1e-15);
        }
        for row in plan.to_per_sample_targets().rows() {
            for &w in row {
                assert!((w - 0.25).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn diagonal_two_by_two() {
        let lp = array![[0.0, -10.0], [-10.0, 0.0]];
        let plan = sinkhorn_balanced(lp.view(), 0.05, 50).unwrap();
        // Marginals 1/r and 1/n put all of each column's 1/2 on the diagonal.
        let want = array![[0.5, 0.0], [0.0, 0.5]];
        for (a, b) in plan.q.iter().zip(&want) {
            assert!((a - b).abs() < 1e-6);
        }
        let w = plan.to_per_sample_targets();
        for (a, b) in w.iter().zip(&array![[1.0, 0.0], [0.0, 1.0]]) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn columns_are_exact_and_targets_are_distributions() {
        let lp = random_log_p(7, 13, 5.0, 3);
        let plan = sinkhorn_balanced(lp.view(), 0.05, 3).unwrap();
        for c in plan.q.columns() {
            assert!((c.sum() - 1.0 / 13.0).abs() < 1e-15);
        }
        for row in plan.to_per_sample_targets().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        assert!(plan.q.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn log_domain_survives_wide_range() {
        for seed in 0..5 {
            let lp = random_log_p(20, 30, 500.0, seed);
            let plan = sinkhorn_balanced(lp.view(), 0.05, 3).unwrap();
            assert!(plan.q.iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        let lp = Array2::<f64>::zeros((2, 2));
        assert!(sinkhorn_balanced(lp.view(), 0.0, 3).is_err());
        assert!(sinkhorn_balanced(lp.view(), 0.05, 0).is_err());
        assert!(sinkhorn_balanced(Array2::<f64>::zeros((0, 2)).view(), 0.05, 3).is_err());
        assert!(sinkhorn_balanced(array![[f64::NAN]].view(), 0.05, 3).is_err());
    }

    #[test]
    fn larger_epsilon_never_lowers_entropy() {
        for seed in 0..10 {
            let lp = random_log_p(4, 6, 3.0, seed);
            let h: Vec<f64> = [0.1, 0.5, 2.0]
                .iter()
                .map(|&e| sinkhorn_balanced(lp.view(), e, 2000).unwrap().entropy())
                .collect();
            assert!(h[0] <= h[1] + 1e-9 && h[1] <= h[2] + 1e-9, "seed {seed}: {h:?}");
        }
    }

    #[test]
    fn row_error_shrinks_with_iterations() {
        let lp = random_log_p(10, 40, 4.0, 1);
        let mut prev = f64::INFINITY;
        for it in 1..30 {
            let dev = sinkhorn_balanced(lp.view(), 0.5, it).unwrap().row_deviation_l1();
            assert!(dev <= prev + 1e-15, "iter {it}: {dev} > {prev}");
            prev = dev;
        }
    }

    /// Plain-domain alternating projection run to a fixed point.
    fn reference_plan(log_p: &Array2<f64>, epsilon: f64) -> Array2<f64> {
        let (r, n) = log_p.dim();
        let mut q = log_p.mapv(|x| (x / epsilon).exp());
        let s = q.sum();
        q /= s;
        for _ in 0..1_000_000 {
            for mut row in q.rows_mut() {
                let s = row.sum() * r as f64;
                row /= s;
            }
            for mut col in q.columns_mut() {
                let s = col.sum() * n as f64;
                col /= s;
            }
            let err: f64 = q.rows().into_iter().map(|row| (row.sum() - 1.0 / r as f64).abs()).sum();
            if err < 1e-15 {
                break;
            }
        }
        q
    }

    #[test]
    fn converged_plan_matches_plain_reference() {
        let mut seed = 0;
        for r in 1..=4 {
            for n in 1..=4 {
                for eps in [0.05, 0.5] {
                    seed += 1;
                    // Kernel contrast up to e^10; sharper kernels converge
                    // far slower than 1000 sweeps.
                    let lp = random_log_p(r, n, 10.0 * eps, seed);
                    let got = sinkhorn_balanced(lp.view(), eps, 1000).unwrap();
                    let want = reference_plan(&lp, eps);
                    for (a, b) in got.q.iter().zip(&want) {
                        assert!((a - b).abs() < 1e-5, "r={r} n={n} eps={eps}: {a} vs {b}");
                    }
                }
            }
        }
    }

    #[test]
    fn three_sweeps_on_a_large_batch() {
        let lp = random_log_p(100, 512, 1.0, 9);
        let plan = sinkhorn_balanced(lp.view(), 0.05, 3).unwrap();
        assert!(plan.row_deviation_max() <= 0.15 / 100.0);
    }
}
