//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Singular values above `tol * sigma_max` count towards the rank.
pub const DEFAULT_RANK_TOL: f64 = 1e-8;

/// Numerical rank using a threshold relative to the largest singular value.
pub fn rank(m: &DMatrix<f64>, tol: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let sv = m.singular_values();
    let smax = sv.max();
    if smax <= 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > tol * smax).count()
}

/// Rank with an absolute singular-value threshold.
pub fn rank_abs(m: &DMatrix<f64>, threshold: f64) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    m.singular_values().iter().filter(|&&s| s > threshold).count()
}

/// Moore-Penrose pseudoinverse; singular values below `tol * sigma_max` are treated as zero.
/// Returns the pseudoinverse together with the retained rank.
pub fn pseudo_inverse(m: &DMatrix<f64>, tol: f64) -> (DMatrix<f64>, usize) {
    let (r, c) = m.shape();
    if r == 0 || c == 0 {
        return (DMatrix::zeros(c, r), 0);
    }
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let smax = svd.singular_values.max();
    let mut pinv = DMatrix::zeros(c, r);
    let mut kept = 0;
    if smax > 0.0 {
        for (k, &s) in svd.singular_values.iter().enumerate() {
            if s > tol * smax {
                kept += 1;
                let vk = vt.row(k).transpose();
                let uk = u.column(k);
                pinv += (vk * uk.transpose()) / s;
            }
        }
    }
    (pinv, kept)
}

/// Orthonormal basis (as rows of the returned matrix's columns) of the orthogonal
/// complement of the column space of `m`, i.e. of `Null(m')`.
pub fn left_null_space(m: &DMatrix<f64>, tol: f64) -> DMatrix<f64> {
    let q = m.nrows();
    if m.ncols() == 0 {
        return DMatrix::identity(q, q);
    }
    // rank from singular values directly; squared eigenvalues lose half the digits
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0_f64, f64::max);
    let rank = sv.iter().filter(|&&s| s > tol * smax).count();
    let (_, vecs) = sorted_eigen(&(m * m.transpose()));
    let cols: Vec<DVector<f64>> = (rank..q).map(|k| vecs.column(k).into_owned()).collect();
    if cols.is_empty() {
        return DMatrix::zeros(q, 0);
    }
    DMatrix::from_columns(&cols)
}

/// Symmetric eigendecomposition with eigenvalues sorted in decreasing order.
pub fn sorted_eigen(m: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m.clone());
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let vals = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let cols: Vec<DVector<f64>> = order
        .iter()
        .map(|&k| eig.eigenvectors.column(k).into_owned())
        .collect();
    let vecs = if cols.is_empty() {
        DMatrix::zeros(m.nrows(), 0)
    } else {
        DMatrix::from_columns(&cols)
    };
    (vals, vecs)
}

/// Lower-triangular Cholesky factor of a symmetric positive semidefinite matrix.
///
/// Pivots that fall below `1e-10 * max diagonal` are set to zero together with
/// the rest of their column, so rank-deficient inputs are accepted.
pub fn psd_cholesky(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return None;
    }
    let scale = (0..n).map(|i| a[(i, i)]).fold(0.0_f64, f64::max);
    let eps = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -1e3 * eps {
            return None;
        }
        if d <= eps {
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Some(l)
}

/// Column means of a data matrix.
pub fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.nrows().max(1) as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / n))
}

/// Centered sample covariance with denominator `n - 1`.
pub fn sample_covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.nrows();
    let means = column_means(x);
    let mut centered = x.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    let denom = (n.saturating_sub(1)).max(1) as f64;
    (centered.transpose() * &centered) / denom
}

/// Random orthogonal matrix built from the QR factorisation of a Gaussian matrix.
pub fn random_orthogonal<R: rand::Rng + ?Sized>(m: usize, rng: &mut R) -> DMatrix<f64> {
    use rand_distr::StandardNormal;
    let g = DMatrix::from_fn(m, m, |_, _| rng.sample::<f64, _>(StandardNormal));
    let qr = g.qr();
    let mut q = qr.q();
    let r = qr.r();
    for k in 0..m {
        if r[(k, k)] < 0.0 {
            let mut col = q.column_mut(k);
            col *= -1.0;
        }
    }
    q
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_rank_one_row() {
        let m = DMatrix::from_row_slice(1, 2, &[3.0, 4.0]);
        let (p, r) = pseudo_inverse(&m, 1e-8);
        assert_eq!(r, 1);
        assert!((p[(0, 0)] - 3.0 / 25.0).abs() < 1e-14);
        assert!((p[(1, 0)] - 4.0 / 25.0).abs() < 1e-14);
    }

    #[test]
    fn pinv_satisfies_penrose_identities() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 2.0, 4.0, 0.5, 1.0]);
        let (p, r) = pseudo_inverse(&m, 1e-8);
        assert_eq!(r, 1);
        assert!((&m * &p * &m - &m).norm() < 1e-12);
        assert!((&p * &m * &p - &p).norm() < 1e-12);
    }

    #[test]
    fn psd_cholesky_handles_rank_deficient() {
        let g = DMatrix::from_row_slice(3, 1, &[1.0, 2.0, -1.0]);
        let a = &g * g.transpose();
        let l = psd_cholesky(&a).unwrap();
        assert!((&l * l.transpose() - &a).norm() < 1e-12);
        for i in 0..3 {
            for j in (i + 1)..3 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn left_null_space_of_column() {
        let g = DMatrix::from_row_slice(3, 1, &[1.0, 1.0, 0.0]);
        let n = left_null_space(&g, 1e-8);
        assert_eq!(n.ncols(), 2);
        assert!((g.transpose() * &n).norm() < 1e-12);
        assert!((n.transpose() * &n - DMatrix::identity(2, 2)).norm() < 1e-12);
    }
}
