//! Small numeric helpers shared by the loss modules.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, Axis};

/// Floor applied inside logarithms of probabilities.
pub const LOG_FLOOR: f64 = 1e-12;

pub fn log_sum_exp<I: IntoIterator<Item = f64> + Clone>(xs: I) -> f64 {
    let m = xs.clone().into_iter().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.into_iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// In-place log-softmax of one vector.
pub fn log_softmax_inplace(mut v: ArrayViewMut1<f64>) {
    let lse = log_sum_exp(v.iter().copied());
    v.mapv_inplace(|x| x - lse);
}

/// Row-wise softmax.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        log_softmax_inplace(row.view_mut());
        row.mapv_inplace(f64::exp);
    }
    out
}

/// `x·log(max(x, floor))`, with `0·log 0 = 0`.
pub fn xlogx(x: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * x.max(LOG_FLOOR).ln()
    }
}

/// Derivative of [`xlogx`].
pub fn dxlogx(x: f64) -> f64 {
    if x >= LOG_FLOOR {
        x.ln() + 1.0
    } else {
        LOG_FLOOR.ln()
    }
}

pub fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Rescales every row to unit norm; rows with zero norm are left untouched.
pub fn normalize_rows_inplace(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let n = l2_norm(row.view());
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
}

/// Row norms and unit rows.
pub fn unit_rows(m: ArrayView2<f64>) -> (Array2<f64>, Vec<f64>) {
    let norms: Vec<f64> = m.rows().into_iter().map(l2_norm).collect();
    let mut u = m.to_owned();
    for (mut row, &n) in u.rows_mut().into_iter().zip(&norms) {
        row.mapv_inplace(|x| x / n);
    }
    (u, norms)
}

/// Backward pass of `u = x/‖x‖` row-wise: given unit rows `u`, norms and
/// upstream `du`, returns `dx = (du − u·(uᵀdu)) / ‖x‖`.
pub fn unit_rows_backward(u: ArrayView2<f64>, norms: &[f64], du: ArrayView2<f64>) -> Array2<f64> {
    let mut dx = du.to_owned();
    for (i, mut row) in dx.axis_iter_mut(Axis(0)).enumerate() {
        let ui = u.row(i);
        let proj = ui.dot(&du.row(i));
        row.zip_mut_with(&ui, |g, &uv| *g -= proj * uv);
        row.mapv_inplace(|g| g / norms[i]);
    }
    dx
}

/// `r` independent uniform directions on the unit sphere in `d` dimensions.
pub fn random_unit_rows<R: rand::Rng + ?Sized>(rng: &mut R, r: usize, d: usize) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut m = Array2::zeros((r, d));
    for mut row in m.rows_mut() {
        loop {
            row.mapv_inplace(|_| StandardNormal.sample(rng));
            let n = l2_norm(row.view());
            if n > 1e-12 {
                row.mapv_inplace(|x| x / n);
                break;
            }
        }
    }
    m
}

/// Greedy k-means++ seeding: indices of `k` rows of `x`.
///
/// Each step draws `2 + ln k` candidates with probability proportional to the
/// squared distance to the nearest chosen row and keeps the one that lowers
/// the total potential most.
pub fn kmeans_pp_seeds<R: rand::Rng + ?Sized>(rng: &mut R, x: ArrayView2<f64>, k: usize) -> Vec<usize> {
    let n = x.nrows();
    assert!(k >= 1 && k <= n, "cannot pick {k} seeds from {n} rows");
    let sq = |a: usize, b: usize| {
        x.row(a)
            .iter()
            .zip(x.row(b))
            .map(|(p, q)| (p - q) * (p - q))
            .sum::<f64>()
    };
    let trials = 2 + (k as f64).ln() as usize;
    let first = rng.random_range(0..n);
    let mut chosen = vec![first];
    let mut dist: Vec<f64> = (0..n).map(|i| sq(i, first)).collect();
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for _ in 0..trials {
            let cand = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &d) in dist.iter().enumerate() {
                    if target < d {
                        pick = i;
                        break;
                    }
                    target -= d;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            let next: Vec<f64> = (0..n).map(|i| dist[i].min(sq(i, cand))).collect();
            let pot: f64 = next.iter().sum();
            if best.as_ref().is_none_or(|b| pot < b.0) {
                best = Some((pot, cand, next));
            }
        }
        let (_, cand, next) = best.expect("at least one trial");
        chosen.push(cand);
        dist = next;
    }
    chosen
}

pub fn argmax(v: ArrayView1<f64>) -> usize {
    // First maximal index, so ties resolve toward the lower id.
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}
