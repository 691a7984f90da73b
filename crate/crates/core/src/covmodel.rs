//! Covariance matrices used as simulation inputs.
//!
//! Three families are supported: a synthetic eigen-decay family with
//! `λ_i = λ₁ · i^γ`, the equicorrelation matrix, and explicit user matrices
//! (typically read from the plain-text matrix format in [`crate::matrix_io`]).

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::fingerprint::{Fingerprint, FingerprintBuilder};

/// Relative tolerance (w.r.t. the Frobenius norm) below which negative
/// eigenvalues or pivots are treated as rounding noise.
pub const TOL_PSD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Orientation {
    Diagonal,
    RandomRotation(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Family {
    EigenDecay { gamma: f64, lambda1: f64, orientation: Orientation },
    Equicorrelation { rho: f64 },
    Explicit,
}

impl Family {
    pub fn label(&self) -> String {
        match self {
            Family::EigenDecay { gamma, lambda1, orientation } => {
                let orient = match orientation {
                    Orientation::Diagonal => "diag".to_string(),
                    Orientation::RandomRotation(seed) => format!("rot{seed}"),
                };
                format!("eigen-decay(gamma={gamma},lambda1={lambda1},{orient})")
            }
            Family::Equicorrelation { rho } => format!("equicorrelation(rho={rho})"),
            Family::Explicit => "explicit".to_string(),
        }
    }
}

/// A symmetric positive semi-definite covariance matrix. Immutable once built.
#[derive(Debug, Clone)]
pub struct CovarianceSpec {
    entries: DMatrix<f64>,
    family: Family,
    ingest_asymmetry: f64,
}

impl CovarianceSpec {
    /// Ingests an explicit matrix. The matrix is symmetrized as `(M + Mᵀ)/2`;
    /// the asymmetry removed is kept and reported by [`validate`].
    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() == 0 {
            return Err(Error::invalid("d", "dimension must be at least 1"));
        }
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), got: m.ncols() });
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("M", "entries must be finite"));
        }
        let asym = max_abs_diff(&m, &m.transpose());
        let sym = (&m + m.transpose()) * 0.5;
        Ok(CovarianceSpec { entries: sym, family: Family::Explicit, ingest_asymmetry: asym })
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn family(&self) -> &Family {
        &self.family
    }

    /// Hash of the family label and the stored entries.
    pub fn fingerprint(&self) -> Fingerprint {
        FingerprintBuilder::new()
            .str(&self.family.label())
            .u64(self.dim() as u64)
            .floats(self.entries.iter())
            .finish()
    }

    pub fn trace(&self) -> f64 {
        self.entries.trace()
    }

    pub fn frobenius(&self) -> f64 {
        self.entries.norm()
    }

    /// Eigenvalues sorted in decreasing order.
    pub fn eigenvalues_desc(&self) -> Vec<f64> {
        let mut ev: Vec<f64> =
            SymmetricEigen::new(self.entries.clone()).eigenvalues.iter().copied().collect();
        ev.sort_by(|a, b| b.total_cmp(a));
        ev
    }
}

/// Builds `M = Q diag(λ) Qᵀ` with `λ_i = lambda1 · i^gamma`, `i = 1..d`.
pub fn make_eigen_decay(
    d: usize,
    gamma: f64,
    lambda1: f64,
    orientation: Orientation,
) -> Result<CovarianceSpec> {
    if d == 0 {
        return Err(Error::invalid("d", "dimension must be at least 1"));
    }
    if !(lambda1 > 0.0) || !lambda1.is_finite() {
        return Err(Error::invalid("lambda1", format!("must be positive, got {lambda1}")));
    }
    if !gamma.is_finite() {
        return Err(Error::invalid("gamma", "must be finite"));
    }
    let lambdas = DVector::from_iterator(d, (1..=d).map(|i| lambda1 * (i as f64).powf(gamma)));
    let entries = match orientation {
        Orientation::Diagonal => DMatrix::from_diagonal(&lambdas),
        Orientation::RandomRotation(seed) => {
            let q = haar_orthogonal(d, seed);
            let scaled = DMatrix::from_fn(d, d, |i, j| q[(i, j)] * lambdas[j]);
            let m = scaled * q.transpose();
            (&m + m.transpose()) * 0.5
        }
    };
    Ok(CovarianceSpec {
        entries,
        family: Family::EigenDecay { gamma, lambda1, orientation },
        ingest_asymmetry: 0.0,
    })
}

/// Unit diagonal, constant off-diagonal `rho`.
pub fn make_equicorrelation(d: usize, rho: f64) -> Result<CovarianceSpec> {
    if d == 0 {
        return Err(Error::invalid("d", "dimension must be at least 1"));
    }
    let lower = if d > 1 { -1.0 / (d as f64 - 1.0) } else { f64::NEG_INFINITY };
    if !(rho >= lower && rho <= 1.0) {
        return Err(Error::invalid(
            "rho",
            format!("{rho} outside the PSD range [{lower}, 1] for d = {d}"),
        ));
    }
    let entries = DMatrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { rho });
    Ok(CovarianceSpec { entries, family: Family::Equicorrelation { rho }, ingest_asymmetry: 0.0 })
}

/// Haar-distributed orthogonal matrix: QR of a seeded Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
pub fn haar_orthogonal(d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(&mut rng));
    let qr = g.qr();
    let r = qr.r();
    let mut q = qr.q();
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    /// `max |M_ij − M_ji|` of the stored matrix.
    pub symmetry_residual: f64,
    /// Asymmetry removed when an explicit matrix was ingested.
    pub ingest_asymmetry: f64,
    pub min_eigenvalue: f64,
    pub trace: f64,
    pub frobenius: f64,
    pub is_symmetric: bool,
    pub is_psd: bool,
}

impl Diagnostics {
    pub fn is_valid(&self) -> bool {
        self.is_symmetric && self.is_psd
    }
}

pub fn validate(spec: &CovarianceSpec) -> Diagnostics {
    let m = &spec.entries;
    let symmetry_residual = max_abs_diff(m, &m.transpose());
    let min_eigenvalue = spec.eigenvalues_desc().last().copied().unwrap_or(0.0);
    let frobenius = m.norm();
    Diagnostics {
        symmetry_residual,
        ingest_asymmetry: spec.ingest_asymmetry,
        min_eigenvalue,
        trace: m.trace(),
        frobenius,
        is_symmetric: symmetry_residual == 0.0,
        is_psd: min_eigenvalue >= -TOL_PSD * frobenius,
    }
}

fn max_abs_diff(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).fold(0.0, |acc, (x, y)| acc.max((x - y).abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_decay_examples() {
        let m = make_eigen_decay(1, -3.0, 2.0, Orientation::Diagonal).unwrap();
        assert_eq!(m.matrix()[(0, 0)], 2.0);

        let m = make_eigen_decay(3, 0.0, 1.0, Orientation::Diagonal).unwrap();
        assert_eq!(m.matrix(), &DMatrix::identity(3, 3));

        let m = make_eigen_decay(4, -2.0, 1.0, Orientation::Diagonal).unwrap();
        let want = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 0.25, 1.0 / 9.0, 1.0 / 16.0]));
        assert!((m.matrix() - want).abs().max() < 1e-15);
    }

    #[test]
    fn eigen_decay_rotation_preserves_spectrum_and_trace() {
        let d = 12;
        let m = make_eigen_decay(d, -1.5, 3.0, Orientation::RandomRotation(7)).unwrap();
        let ev = m.eigenvalues_desc();
        for (i, lam) in ev.iter().enumerate() {
            let want = 3.0 * ((i + 1) as f64).powf(-1.5);
            assert!((lam - want).abs() <= 1e-10 * want, "λ_{i}: {lam} vs {want}");
        }
        let want_tr: f64 = (1..=d).map(|i| 3.0 * (i as f64).powf(-1.5)).sum();
        assert!((m.trace() - want_tr).abs() <= 1e-10 * want_tr);
        assert_eq!(validate(&m).symmetry_residual, 0.0);
    }

    #[test]
    fn haar_is_orthogonal_and_seeded() {
        let q = haar_orthogonal(9, 3);
        let err = (&q.transpose() * &q - DMatrix::<f64>::identity(9, 9)).abs().max();
        assert!(err < 1e-12);
        assert_eq!(q, haar_orthogonal(9, 3));
        assert_ne!(q, haar_orthogonal(9, 4));
    }

    #[test]
    fn eigen_decay_rejects_bad_input() {
        assert!(make_eigen_decay(0, -2.0, 1.0, Orientation::Diagonal).is_err());
        assert!(make_eigen_decay(3, -2.0, 0.0, Orientation::Diagonal).is_err());
        assert!(make_eigen_decay(3, -2.0, -1.0, Orientation::Diagonal).is_err());
    }

    #[test]
    fn equicorrelation_examples() {
        let m = make_equicorrelation(2, 0.0).unwrap();
        assert_eq!(m.matrix(), &DMatrix::identity(2, 2));

        let m = make_equicorrelation(3, 1.0).unwrap();
        assert_eq!(m.matrix(), &DMatrix::from_element(3, 3, 1.0));
        let ev = m.eigenvalues_desc();
        assert!((ev[0] - 3.0).abs() < 1e-12 && ev[1].abs() < 1e-12 && ev[2].abs() < 1e-12);

        let ev = make_equicorrelation(4, 0.5).unwrap().eigenvalues_desc();
        for (got, want) in ev.iter().zip([2.5, 0.5, 0.5, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn equicorrelation_range() {
        assert!(make_equicorrelation(4, -1.0 / 3.0).is_ok());
        assert!(make_equicorrelation(4, -0.34).is_err());
        assert!(make_equicorrelation(4, 1.01).is_err());
        assert!(make_equicorrelation(1, -5.0).is_ok());
    }

    #[test]
    fn validate_examples() {
        let i3 = CovarianceSpec::from_matrix(DMatrix::identity(3, 3)).unwrap();
        let diag = validate(&i3);
        assert_eq!(diag.symmetry_residual, 0.0);
        assert!((diag.min_eigenvalue - 1.0).abs() < 1e-14);
        assert_eq!(diag.trace, 3.0);
        assert!(diag.is_valid());

        let m = make_eigen_decay(4, -2.0, 1.0, Orientation::Diagonal).unwrap();
        assert!((validate(&m).trace - (1.0 + 0.25 + 1.0 / 9.0 + 0.0625)).abs() < 1e-15);

        let bad = CovarianceSpec::from_matrix(DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]))
            .unwrap();
        let diag = validate(&bad);
        assert!((diag.min_eigenvalue + 1.0).abs() < 1e-12);
        assert!(!diag.is_psd);
    }

    #[test]
    fn explicit_matrices_are_symmetrized() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 1.0 + 1e-12, 1.0, 2.0]);
        let spec = CovarianceSpec::from_matrix(m).unwrap();
        let diag = validate(&spec);
        assert_eq!(diag.symmetry_residual, 0.0);
        assert!((diag.ingest_asymmetry - 1e-12).abs() < 1e-15);
    }

    #[test]
    fn gram_matrices_pass_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for d in [1, 3, 10] {
            let b = DMatrix::<f64>::from_fn(d, d + 2, |_, _| StandardNormal.sample(&mut rng));
            let spec = CovarianceSpec::from_matrix(&b * b.transpose()).unwrap();
            assert!(validate(&spec).is_psd);
        }
    }
}
