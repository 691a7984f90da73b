//! Factor matrices `A` with `AAᵀ = M`.
//!
//! Two routes are provided: a pivot-skipping Cholesky factorization and the
//! spectral (PCA) factor `A = Q√Λ`. [`permute_decreasing`] reorders the
//! columns of any factor so that the column square norms `(AᵀA)_ii` are
//! nonincreasing, which is what the RDR schedule needs.

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};

use crate::covmodel::{CovarianceSpec, TOL_PSD};
use crate::error::{Error, Result};
use crate::fingerprint::{Fingerprint, FingerprintBuilder};

#[derive(Debug, Clone, PartialEq)]
pub enum Construction {
    Cholesky,
    Pca,
    Permuted { base: Box<Construction>, perm: Vec<usize> },
}

impl Construction {
    pub fn label(&self) -> String {
        match self {
            Construction::Cholesky => "cholesky".into(),
            Construction::Pca => "pca".into(),
            Construction::Permuted { base, .. } => format!("{}+permuted", base.label()),
        }
    }
}

/// Spectral data kept alongside PCA factors.
#[derive(Debug, Clone)]
pub struct Eigen {
    /// Eigenvalues in decreasing order, after clamping.
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors as columns, in the same order.
    pub vectors: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct FactorMatrix {
    entries: DMatrix<f64>,
    construction: Construction,
    col_sq_norms: Vec<f64>,
    eigen: Option<Eigen>,
    covariance_id: Fingerprint,
}

impl FactorMatrix {
    /// Wraps an arbitrary square matrix; column square norms are computed.
    pub fn from_matrix(entries: DMatrix<f64>, construction: Construction) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::DimensionMismatch { expected: entries.nrows(), got: entries.ncols() });
        }
        let col_sq_norms = column_sq_norms(&entries);
        let covariance_id = FingerprintBuilder::new().str("factor").floats(entries.iter()).finish();
        Ok(FactorMatrix { entries, construction, col_sq_norms, eigen: None, covariance_id })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn construction(&self) -> &Construction {
        &self.construction
    }

    /// `(AᵀA)_ii` for each column `i`.
    pub fn col_sq_norms(&self) -> &[f64] {
        &self.col_sq_norms
    }

    pub fn eigen(&self) -> Option<&Eigen> {
        self.eigen.as_ref()
    }

    /// Fingerprint of the covariance this factor was built from.
    pub fn covariance_id(&self) -> Fingerprint {
        self.covariance_id
    }

    /// `‖AAᵀ − M‖_F`.
    pub fn residual(&self, spec: &CovarianceSpec) -> f64 {
        (&self.entries * self.entries.transpose() - spec.matrix()).norm()
    }

    /// Residual check used throughout the test suites.
    pub fn reproduces(&self, spec: &CovarianceSpec) -> bool {
        self.residual(spec) <= 1e-8 * spec.frobenius().max(1.0)
    }
}

fn column_sq_norms(a: &DMatrix<f64>) -> Vec<f64> {
    a.column_iter().map(|c| c.iter().map(|v| v * v).sum()).collect()
}

/// Lower-triangular `A` with `AAᵀ = M`. Pivots within `TOL_PSD·‖M‖_F` of
/// zero produce a zero column, so rank-deficient matrices factor cleanly.
pub fn cholesky_factor(spec: &CovarianceSpec) -> Result<FactorMatrix> {
    let m = spec.matrix();
    let d = spec.dim();
    let tol = TOL_PSD * spec.frobenius();
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let row_j = l.row(j).columns(0, j).into_owned();
        let pivot = m[(j, j)] - row_j.norm_squared();
        if pivot > tol {
            let ljj = pivot.sqrt();
            l[(j, j)] = ljj;
            for i in (j + 1)..d {
                let dot: f64 = (0..j).map(|k| l[(i, k)] * row_j[k]).sum();
                l[(i, j)] = (m[(i, j)] - dot) / ljj;
            }
        } else if pivot >= -tol {
            if pivot < 0.0 {
                warn!("cholesky: clamped pivot {pivot:e} at index {j} to zero");
            }
        } else {
            return Err(Error::NotPsd {
                detail: format!("cholesky pivot {pivot:e} at index {j} is below -{tol:e}"),
            });
        }
    }
    let mut fac = FactorMatrix::from_matrix(l, Construction::Cholesky)?;
    fac.covariance_id = spec.fingerprint();
    Ok(fac)
}

/// `A = Q√Λ` from the spectral decomposition `M = QΛQᵀ`, eigenvalues in
/// decreasing order. Each eigenvector is signed so that its largest-magnitude
/// entry is positive.
pub fn pca_factor(spec: &CovarianceSpec) -> Result<FactorMatrix> {
    let d = spec.dim();
    let tol = TOL_PSD * spec.frobenius();
    let eig = SymmetricEigen::new(spec.matrix().clone());

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut values = Vec::with_capacity(d);
    let mut vectors = DMatrix::<f64>::zeros(d, d);
    for (dst, &src) in order.iter().enumerate() {
        let mut lam = eig.eigenvalues[src];
        if lam < -tol {
            return Err(Error::NotPsd {
                detail: format!("eigenvalue {lam:e} is below -{tol:e}"),
            });
        }
        if lam < 0.0 {
            warn!("pca: clamped eigenvalue {lam:e} to zero");
            lam = 0.0;
        }
        values.push(lam);

        let v = eig.eigenvectors.column(src);
        let pivot = (0..d).fold(0, |best, k| if v[k].abs() > v[best].abs() { k } else { best });
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(dst, &(v * sign));
    }

    let entries = DMatrix::from_fn(d, d, |i, j| vectors[(i, j)] * values[j].sqrt());
    Ok(FactorMatrix {
        entries,
        construction: Construction::Pca,
        // AᵀA = Λ for this construction.
        col_sq_norms: values.clone(),
        eigen: Some(Eigen { values, vectors }),
        covariance_id: spec.fingerprint(),
    })
}

/// Column permutation `B_ij = A_iπ(j)` sorting the column square norms into
/// nonincreasing order. Ties keep their original order.
pub fn permute_decreasing(fac: &FactorMatrix) -> FactorMatrix {
    let d = fac.dim();
    let norms = &fac.col_sq_norms;
    let mut perm: Vec<usize> = (0..d).collect();
    perm.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]));

    let entries = DMatrix::from_fn(d, d, |i, j| fac.entries[(i, perm[j])]);
    let col_sq_norms = perm.iter().map(|&p| norms[p]).collect();
    let eigen = fac.eigen.as_ref().map(|e| Eigen {
        values: perm.iter().map(|&p| e.values[p]).collect(),
        vectors: DMatrix::from_fn(d, d, |i, j| e.vectors[(i, perm[j])]),
    });
    FactorMatrix {
        entries,
        construction: Construction::Permuted { base: Box::new(fac.construction.clone()), perm },
        col_sq_norms,
        eigen,
        covariance_id: fac.covariance_id,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodel::{make_eigen_decay, make_equicorrelation, Orientation};

    fn spec(rows: usize, data: &[f64]) -> CovarianceSpec {
        CovarianceSpec::from_matrix(DMatrix::from_row_slice(rows, rows, data)).unwrap()
    }

    #[test]
    fn cholesky_examples() {
        let a = cholesky_factor(&spec(2, &[1.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(a.matrix(), &DMatrix::identity(2, 2));

        let a = cholesky_factor(&spec(2, &[4.0, 2.0, 2.0, 5.0])).unwrap();
        assert_eq!(a.matrix(), &DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 1.0, 2.0]));

        let s = spec(2, &[1.0, 1.0, 1.0, 1.0]);
        let a = cholesky_factor(&s).unwrap();
        assert_eq!(a.matrix(), &DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 1.0, 0.0]));
        assert!(a.reproduces(&s));
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let err = cholesky_factor(&spec(2, &[1.0, 2.0, 2.0, 1.0])).unwrap_err();
        match err {
            Error::NotPsd { detail } => assert!(detail.contains("index 1"), "{detail}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn pca_examples() {
        let s = spec(3, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        let a = pca_factor(&s).unwrap();
        assert!(a.reproduces(&s));
        for lam in &a.eigen().unwrap().values {
            assert!((lam - 1.0).abs() < 1e-14);
        }

        let a = pca_factor(&spec(2, &[4.0, 0.0, 0.0, 1.0])).unwrap();
        assert_eq!(a.eigen().unwrap().values, vec![4.0, 1.0]);
        assert!((a.matrix().abs() - DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 1.0])).abs().max() < 1e-14);

        let s = spec(2, &[2.0, 1.0, 1.0, 2.0]);
        let a = pca_factor(&s).unwrap();
        assert!((a.col_sq_norms()[0] - 3.0).abs() < 1e-12);
        assert!((a.col_sq_norms()[1] - 1.0).abs() < 1e-12);
        assert!(a.reproduces(&s));
    }

    #[test]
    fn pca_col_norms_match_eigenvalues() {
        let s = make_eigen_decay(20, -2.0, 1.5, Orientation::RandomRotation(5)).unwrap();
        let a = pca_factor(&s).unwrap();
        let computed = column_sq_norms(a.matrix());
        for (i, (c, lam)) in computed.iter().zip(a.col_sq_norms()).enumerate() {
            assert!((c - lam).abs() <= 1e-12 * 1.5, "column {i}");
        }
        assert!(a.col_sq_norms().windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn pca_signs_are_fixed() {
        let s = make_equicorrelation(6, 0.3).unwrap();
        let a = pca_factor(&s).unwrap();
        let vecs = &a.eigen().unwrap().vectors;
        for col in vecs.column_iter() {
            let max = col.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            assert!(max > 0.0);
        }
    }

    #[test]
    fn pca_clamps_rank_deficient_and_rejects_indefinite() {
        let s = make_equicorrelation(4, 1.0).unwrap();
        let a = pca_factor(&s).unwrap();
        assert!(a.eigen().unwrap().values.iter().all(|&v| v >= 0.0));
        assert!(a.reproduces(&s));
        assert!(matches!(pca_factor(&spec(2, &[1.0, 2.0, 2.0, 1.0])), Err(Error::NotPsd { .. })));
    }

    #[test]
    fn permute_examples() {
        let s = make_eigen_decay(5, -1.0, 1.0, Orientation::RandomRotation(1)).unwrap();
        let a = pca_factor(&s).unwrap();
        let b = permute_decreasing(&a);
        assert_eq!(b.matrix(), a.matrix());
        match b.construction() {
            Construction::Permuted { perm, .. } => assert_eq!(perm, &vec![0, 1, 2, 3, 4]),
            c => panic!("{c:?}"),
        }

        let a = FactorMatrix::from_matrix(
            DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]),
            Construction::Cholesky,
        )
        .unwrap();
        let b = permute_decreasing(&a);
        assert_eq!(b.matrix(), &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 2.0, 0.0]));
        assert_eq!(b.col_sq_norms(), &[4.0, 1.0]);

        let a = FactorMatrix::from_matrix(DMatrix::identity(3, 3), Construction::Cholesky).unwrap();
        let b = permute_decreasing(&a);
        assert_eq!(b.matrix(), a.matrix());
    }

    #[test]
    fn permute_preserves_gram_product() {
        let s = make_eigen_decay(8, -1.0, 2.0, Orientation::RandomRotation(9)).unwrap();
        let a = cholesky_factor(&s).unwrap();
        let b = permute_decreasing(&a);
        let aat = a.matrix() * a.matrix().transpose();
        let bbt = b.matrix() * b.matrix().transpose();
        assert!((aat - bbt).abs().max() < 1e-14);
        assert!(b.col_sq_norms().windows(2).all(|w| w[0] >= w[1]));
        let mut x = a.col_sq_norms().to_vec();
        let mut y = b.col_sq_norms().to_vec();
        x.sort_by(f64::total_cmp);
        y.sort_by(f64::total_cmp);
        assert_eq!(x, y);
    }

    #[test]
    fn trace_identity_holds_for_both_routes() {
        let s = make_eigen_decay(30, -3.0, 1.0, Orientation::RandomRotation(2)).unwrap();
        for a in [cholesky_factor(&s).unwrap(), pca_factor(&s).unwrap()] {
            let tr: f64 = a.col_sq_norms().iter().sum();
            assert!((tr - s.trace()).abs() <= 1e-10 * s.trace());
            assert!(a.reproduces(&s));
        }
    }
}
