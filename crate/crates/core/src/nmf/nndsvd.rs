use nalgebra::DMatrix;
use ndarray::{Array2, ArrayView2};

use super::{DenseFactorPair, NmfError};

/// Non-negative double SVD initialization (basic variant: zeros stay zero).
///
/// The leading singular pair gives the first factor directly (its singular
/// vectors can be taken non-negative). For every other pair the positive and
/// negative parts of the vectors are compared and the dominant one is kept,
/// scaled by the singular value.
pub fn nndsvd_init(x: ArrayView2<f64>, k: usize) -> Result<DenseFactorPair, NmfError> {
    let (n, m) = x.dim();
    if k == 0 || k > n.min(m) {
        return Err(NmfError::InvalidConfig(format!(
            "NNDSVD rank {k} must be in 1..={}",
            n.min(m)
        )));
    }
    if x.iter().any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(NmfError::InvalidInput("X must be finite and non-negative".into()));
    }

    let mat = DMatrix::from_fn(n, m, |i, j| x[[i, j]]);
    let svd = mat
        .try_svd(true, true, f64::EPSILON, 10_000)
        .ok_or_else(|| NmfError::Svd("did not converge".into()))?;
    let u = svd.u.ok_or_else(|| NmfError::Svd("missing left vectors".into()))?;
    let vt = svd.v_t.ok_or_else(|| NmfError::Svd("missing right vectors".into()))?;
    let sigma = svd.singular_values;

    let mut order: Vec<usize> = (0..sigma.len()).collect();
    order.sort_by(|&a, &b| sigma[b].total_cmp(&sigma[a]));

    let mut w = Array2::<f64>::zeros((n, k));
    let mut h = Array2::<f64>::zeros((k, m));

    let first = order[0];
    let s0 = sigma[first].sqrt();
    for i in 0..n {
        w[[i, 0]] = s0 * u[(i, first)].abs();
    }
    for j in 0..m {
        h[[0, j]] = s0 * vt[(first, j)].abs();
    }

    for (c, &idx) in order.iter().enumerate().take(k).skip(1) {
        let left: Vec<f64> = (0..n).map(|i| u[(i, idx)]).collect();
        let right: Vec<f64> = (0..m).map(|j| vt[(idx, j)]).collect();
        let pos = |v: &[f64]| v.iter().map(|&a| a.max(0.0)).collect::<Vec<_>>();
        let neg = |v: &[f64]| v.iter().map(|&a| (-a).max(0.0)).collect::<Vec<_>>();
        let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();

        let (lp, ln, rp, rn) = (pos(&left), neg(&left), pos(&right), neg(&right));
        let (lp_n, ln_n, rp_n, rn_n) = (norm(&lp), norm(&ln), norm(&rp), norm(&rn));
        let (mp, mn) = (lp_n * rp_n, ln_n * rn_n);

        let (lvec, rvec, lnorm, rnorm, weight) = if mp > mn {
            (lp, rp, lp_n, rp_n, mp)
        } else {
            (ln, rn, ln_n, rn_n, mn)
        };
        if weight == 0.0 {
            continue;
        }
        let scale = (sigma[idx] * weight).sqrt();
        for i in 0..n {
            w[[i, c]] = scale * lvec[i] / lnorm;
        }
        for j in 0..m {
            h[[c, j]] = scale * rvec[j] / rnorm;
        }
    }

    // SVD round-off leaves ~1e-17 where exact zeros belong.
    for (i, row) in x.rows().into_iter().enumerate() {
        if row.iter().all(|&v| v == 0.0) {
            w.row_mut(i).fill(0.0);
        }
    }
    for (j, col) in x.columns().into_iter().enumerate() {
        if col.iter().all(|&v| v == 0.0) {
            h.column_mut(j).fill(0.0);
        }
    }

    Ok(DenseFactorPair { w, h })
}
