//! Payoff functions `g` and their closed-form oracles.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::covmodel::CovarianceSpec;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum PayoffKind {
    Constant(f64),
    Linear(Vec<f64>),
    /// Call on the equally weighted average of `d` lognormal stocks started
    /// at 1: `g(x) = (1/d Σ exp(−σ_i²t/2 + σ_i√t x_i) − K e^{−rt})⁺`.
    BasketCall { sigmas: Vec<f64>, rate: f64, maturity: f64, strike: f64 },
}

#[derive(Debug, Clone)]
pub struct Payoff {
    dim: usize,
    kind: PayoffKind,
    // Precomputed basket terms: (−σ_i²t/2, σ_i√t) and K e^{−rt}.
    basket: Option<(Vec<(f64, f64)>, f64)>,
}

impl Payoff {
    pub fn constant(dim: usize, c: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("d", "dimension must be at least 1"));
        }
        Ok(Payoff { dim, kind: PayoffKind::Constant(c), basket: None })
    }

    pub fn linear(a: Vec<f64>) -> Result<Self> {
        if a.is_empty() {
            return Err(Error::invalid("a", "coefficient vector must be nonempty"));
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("a", "coefficients must be finite"));
        }
        Ok(Payoff { dim: a.len(), kind: PayoffKind::Linear(a), basket: None })
    }

    pub fn basket_call(sigmas: Vec<f64>, rate: f64, maturity: f64, strike: f64) -> Result<Self> {
        if sigmas.is_empty() {
            return Err(Error::invalid("sigmas", "need at least one volatility"));
        }
        if sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::invalid("sigmas", "volatilities must be finite and nonnegative"));
        }
        if !(maturity >= 0.0 && maturity.is_finite()) {
            return Err(Error::invalid("maturity", format!("must be nonnegative, got {maturity}")));
        }
        if !rate.is_finite() {
            return Err(Error::invalid("rate", "must be finite"));
        }
        if !(strike >= 0.0 && strike.is_finite()) {
            return Err(Error::invalid("strike", format!("must be nonnegative, got {strike}")));
        }
        let sqrt_t = maturity.sqrt();
        let terms = sigmas.iter().map(|s| (-0.5 * s * s * maturity, s * sqrt_t)).collect();
        let discounted = strike * (-rate * maturity).exp();
        Ok(Payoff {
            dim: sigmas.len(),
            kind: PayoffKind::BasketCall { sigmas, rate, maturity, strike },
            basket: Some((terms, discounted)),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn kind(&self) -> &PayoffKind {
        &self.kind
    }

    pub fn label(&self) -> &'static str {
        match self.kind {
            PayoffKind::Constant(_) => "constant",
            PayoffKind::Linear(_) => "linear",
            PayoffKind::BasketCall { .. } => "basket",
        }
    }

    /// Arithmetic operations charged per evaluation (linear in `d`).
    pub fn eval_cost(&self) -> u64 {
        self.dim as u64
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match &self.kind {
            PayoffKind::Constant(c) => *c,
            PayoffKind::Linear(a) => a.iter().zip(x).map(|(ai, xi)| ai * xi).sum(),
            PayoffKind::BasketCall { .. } => {
                let (terms, discounted) = self.basket.as_ref().expect("basket terms");
                let avg = terms
                    .iter()
                    .zip(x)
                    .map(|(&(drift, vol), &xi)| (drift + vol * xi).exp())
                    .sum::<f64>()
                    / self.dim as f64;
                (avg - discounted).max(0.0)
            }
        }
    }

    /// `E g(X)` for `X ~ N(0, M)` when a closed form is available: constant,
    /// linear, and the one-dimensional basket (Black–Scholes without
    /// discounting the payoff).
    pub fn analytic_mean(&self, spec: &CovarianceSpec) -> Option<f64> {
        match &self.kind {
            PayoffKind::Constant(c) => Some(*c),
            PayoffKind::Linear(_) => Some(0.0),
            PayoffKind::BasketCall { .. } if self.dim == 1 => {
                let (terms, k) = self.basket.as_ref()?;
                let (drift, vol) = terms[0];
                // exp(drift + vol·X) = scale · exp(−v²/2 + vZ) with v = vol·√M₁₁.
                let v = vol * spec.matrix()[(0, 0)].max(0.0).sqrt();
                let scale = (drift + 0.5 * v * v).exp();
                Some(scale * black_scholes_undiscounted(v, k / scale))
            }
            PayoffKind::BasketCall { .. } => None,
        }
    }
}

/// `E (S − k)⁺` with `S = exp(−v²/2 + vZ)`, `Z ~ N(0, 1)`.
fn black_scholes_undiscounted(vol: f64, k: f64) -> f64 {
    if k <= 0.0 {
        return 1.0 - k;
    }
    if vol <= 0.0 {
        return (1.0 - k).max(0.0);
    }
    let phi = Normal::new(0.0, 1.0).expect("standard normal");
    let d_plus = (-k.ln() + 0.5 * vol * vol) / vol;
    let d_minus = d_plus - vol;
    phi.cdf(d_plus) - k * phi.cdf(d_minus)
}

/// `aᵀMa`, the variance of `aᵀX`.
pub fn analytic_variance_linear(a: &[f64], spec: &CovarianceSpec) -> Result<f64> {
    if a.len() != spec.dim() {
        return Err(Error::DimensionMismatch { expected: spec.dim(), got: a.len() });
    }
    let m = spec.matrix();
    let mut total = 0.0;
    for i in 0..a.len() {
        let row: f64 = (0..a.len()).map(|j| m[(i, j)] * a[j]).sum();
        total += a[i] * row;
    }
    Ok(total)
}
