//! Small dense linear-algebra helpers shared across modules.

use crate::error::{Error, Result};
use crate::Scalar;
use nalgebra::{DMatrix, DVector};

/// Solve `A x = b` by LU with partial pivoting.
pub fn lu_solve<T: Scalar>(a: DMatrix<T>, b: DVector<T>) -> Result<DVector<T>> {
    let lu = a.lu();
    lu.solve(&b).ok_or_else(|| Error::LinearSolveFailed { reason: "singular matrix in LU solve".into() })
}

/// Singular values of a (possibly rectangular) matrix, descending.
pub fn singular_values<T: Scalar>(a: &DMatrix<T>) -> Result<Vec<T>> {
    let svd = a
        .clone()
        .try_svd(false, false, T::default_epsilon() * crate::lit::<T>(16.0), 2000)
        .ok_or_else(|| Error::EigsolverFailure { reason: "SVD did not converge".into() })?;
    let mut sv: Vec<T> = svd.singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(sv)
}

/// Full SVD with singular vectors.
pub struct Svd<T: Scalar> {
    /// Descending singular values.
    pub sigma: Vec<T>,
    /// Left singular vectors as columns, ordered like `sigma`.
    pub u: DMatrix<T>,
    /// Right singular vectors as columns, ordered like `sigma`.
    pub v: DMatrix<T>,
}

pub fn svd<T: Scalar>(a: &DMatrix<T>) -> Result<Svd<T>> {
    let svd = a
        .clone()
        .try_svd(true, true, T::default_epsilon() * crate::lit::<T>(16.0), 2000)
        .ok_or_else(|| Error::EigsolverFailure { reason: "SVD did not converge".into() })?;
    let u = svd.u.ok_or_else(|| Error::EigsolverFailure { reason: "SVD u missing".into() })?;
    let vt = svd.v_t.ok_or_else(|| Error::EigsolverFailure { reason: "SVD v_t missing".into() })?;
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    let sv = svd.singular_values;
    order.sort_by(|&i, &j| sv[j].partial_cmp(&sv[i]).unwrap());
    let sigma: Vec<T> = order.iter().map(|&k| sv[k]).collect();
    let u_sorted = DMatrix::from_fn(u.nrows(), order.len(), |r, c| u[(r, order[c])]);
    let v_sorted = DMatrix::from_fn(vt.ncols(), order.len(), |r, c| vt[(order[c], r)]);
    Ok(Svd { sigma, u: u_sorted, v: v_sorted })
}

/// Orthonormal basis of the numerical null space of `a` (right singular
/// vectors whose singular value is `< tol`).
pub fn nullspace_basis<T: Scalar>(a: &DMatrix<T>, tol: T) -> Result<DMatrix<T>> {
    let decomposition = svd(a)?;
    let n = a.ncols();
    let rank_cols: Vec<usize> = (0..decomposition.sigma.len())
        .filter(|&k| decomposition.sigma[k] < tol)
        .collect();
    // right singular vectors beyond min(m, n) (implicit zero singular values)
    let extra = n.saturating_sub(decomposition.sigma.len());
    let dim = rank_cols.len() + extra;
    let mut basis = DMatrix::zeros(n, dim);
    for (c, &k) in rank_cols.iter().enumerate() {
        basis.set_column(c, &decomposition.v.column(k));
    }
    if extra > 0 {
        // complete v to a full orthonormal basis by Gram-Schmidt against it
        let mut cols = rank_cols.len();
        let mut candidate = 0usize;
        while cols < dim && candidate < n {
            let mut e = DVector::<T>::zeros(n);
            e[candidate] = T::one();
            for k in 0..decomposition.v.ncols() {
                let proj = decomposition.v.column(k).dot(&e);
                e -= decomposition.v.column(k) * proj;
            }
            for k in 0..cols {
                let proj = basis.column(k).dot(&e);
                let col = basis.column(k).into_owned();
                e -= col * proj;
            }
            let norm = e.norm();
            if norm > crate::lit::<T>(1e-8) {
                basis.set_column(cols, &(e / norm));
                cols += 1;
            }
            candidate += 1;
        }
    }
    Ok(basis)
}
