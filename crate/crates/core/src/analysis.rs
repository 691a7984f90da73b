//! Coupling covariances `C(i)`, the variance bounds built on them, Lipschitz
//! probing, and cost/variance comparisons between GRDR and standard MC.
//!
//! `C(i) = Cov(f(U), f(U′))` where `U′` redraws the first `i` coordinates of
//! `U` and keeps the rest, and `f(z) = g(Az)`. `C(0)` is the variance of
//! `f(U)` and `C(d) = 0`. Every bound below is monotone in the `C(i)`, so an
//! upper bound on the curve gives an upper bound on `Var(f_n)`.

use rayon::prelude::*;
use serde::Serialize;
use std::fmt::Write as _;

use crate::covmodel::CovarianceSpec;
use crate::error::{Error, Result};
use crate::estimator::EstimatorResult;
use crate::factor::{cholesky_factor, FactorMatrix};
use crate::payoffs::Payoff;
use crate::rng::RngStream;
use crate::schedule::QSchedule;

#[derive(Debug, Clone, PartialEq)]
pub enum CurveSource {
    Empirical { pairs: usize },
    AnalyticLinear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CouplingCurve {
    pub dim: usize,
    /// Indices `i` at which `C(i)` was evaluated, increasing.
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
    pub stderrs: Option<Vec<f64>>,
    pub source: CurveSource,
}

impl CouplingCurve {
    /// True when every `i` in `0..=d` is present.
    pub fn is_complete(&self) -> bool {
        self.indices.len() == self.dim + 1 && self.indices.iter().enumerate().all(|(k, &i)| k == i)
    }

    pub fn value_at(&self, i: usize) -> Option<f64> {
        self.indices.iter().position(|&j| j == i).map(|k| self.values[k])
    }

    /// Projection onto nonincreasing sequences (pool-adjacent-violators),
    /// weighted by inverse squared standard errors when available.
    pub fn isotonic(&self) -> CouplingCurve {
        let weights: Vec<f64> = match &self.stderrs {
            Some(se) => se
                .iter()
                .map(|s| if s.is_finite() && *s > 0.0 { 1.0 / (s * s) } else { 1.0 })
                .collect(),
            None => vec![1.0; self.values.len()],
        };
        CouplingCurve { values: pava_nonincreasing(&self.values, &weights), ..self.clone() }
    }

    /// Largest `|raw − isotonic| / stderr` over the curve; 0 without stderrs
    /// and monotone values.
    pub fn monotonicity_violation(&self) -> f64 {
        let iso = self.isotonic();
        self.values
            .iter()
            .zip(&iso.values)
            .enumerate()
            .map(|(k, (raw, fit))| {
                let gap = (raw - fit).abs();
                match &self.stderrs {
                    Some(se) if se[k] > 0.0 => gap / se[k],
                    _ if gap == 0.0 => 0.0,
                    _ => f64::INFINITY,
                }
            })
            .fold(0.0, f64::max)
    }

    /// Dense `C(0..=d)`. Missing indices take the value at the nearest
    /// evaluated index to their left, which is an upper bound for a
    /// nonincreasing curve. Empirical curves are made monotone first.
    pub fn dense_upper(&self) -> Result<Vec<f64>> {
        if self.indices.first() != Some(&0) {
            return Err(Error::invalid("curve", "C(0) must be evaluated"));
        }
        let curve = match self.source {
            CurveSource::Empirical { .. } => self.isotonic(),
            CurveSource::AnalyticLinear => self.clone(),
        };
        let mut dense = vec![0.0; self.dim + 1];
        let mut k = 0;
        for (i, slot) in dense.iter_mut().enumerate() {
            while k + 1 < curve.indices.len() && curve.indices[k + 1] <= i {
                k += 1;
            }
            *slot = curve.values[k];
        }
        // C(d) = 0 by definition.
        dense[self.dim] = 0.0;
        Ok(dense)
    }

    /// CSV with columns `i,C_hat,stderr,lemma41_bound`.
    pub fn to_csv(&self, lemma41: Option<&[f64]>) -> String {
        let mut out = String::from("i,C_hat,stderr,lemma41_bound\n");
        for (k, (&i, v)) in self.indices.iter().zip(&self.values).enumerate() {
            let se = self.stderrs.as_ref().map(|s| s[k].to_string()).unwrap_or_default();
            let lb = lemma41
                .map(|b| b.get(i).copied().unwrap_or(0.0).to_string())
                .unwrap_or_default();
            let _ = writeln!(out, "{i},{v},{se},{lb}");
        }
        out
    }
}

fn pava_nonincreasing(values: &[f64], weights: &[f64]) -> Vec<f64> {
    // Blocks of (weighted mean, total weight, length).
    let mut blocks: Vec<(f64, f64, usize)> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        let mut cur = (v, w, 1usize);
        while let Some(&(pm, pw, pl)) = blocks.last() {
            if pm >= cur.0 {
                break;
            }
            blocks.pop();
            let tw = pw + cur.1;
            cur = ((pm * pw + cur.0 * cur.1) / tw, tw, pl + cur.2);
        }
        blocks.push(cur);
    }
    blocks.into_iter().flat_map(|(m, _, l)| std::iter::repeat(m).take(l)).collect()
}

/// All indices for `d ≤ 64`; otherwise `0`, powers of two and their 1.5
/// multiples, and `d`.
pub fn default_index_grid(d: usize) -> Vec<usize> {
    if d <= 64 {
        return (0..=d).collect();
    }
    let mut grid = vec![0, 1];
    let mut p = 2;
    while p < d {
        grid.push(p);
        if p + p / 2 < d {
            grid.push(p + p / 2);
        }
        p *= 2;
    }
    grid.push(d);
    grid.dedup();
    grid
}

/// Unbiased sample covariance and its jackknife standard error.
fn covariance_with_jackknife(x: &[f64], y: &[f64]) -> (f64, f64) {
    let n = x.len();
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let prods: Vec<f64> = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).collect();
    let sxy: f64 = prods.iter().sum();
    let cov = sxy / (nf - 1.0);
    if n < 3 {
        return (cov, f64::INFINITY);
    }
    // Leave-one-out covariances are affine in the centred products, which
    // gives the jackknife variance in closed form.
    let pbar = sxy / nf;
    let ss: f64 = prods.iter().map(|p| (p - pbar).powi(2)).sum();
    let var = nf / ((nf - 1.0) * (nf - 2.0).powi(2)) * ss;
    (cov, var.sqrt())
}

/// Monte Carlo estimate of `C(i)` at each requested index from `pairs`
/// coupled draws. Index `i` uses stream `(seed, i)`.
pub fn coupling_curve_empirical(
    payoff: &Payoff,
    fac: &FactorMatrix,
    indices: &[usize],
    pairs: usize,
    seed: u64,
) -> Result<CouplingCurve> {
    let d = fac.dim();
    if payoff.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: payoff.dim() });
    }
    if pairs < 2 {
        return Err(Error::invalid("pairs", "need at least two pairs"));
    }
    let mut idx = indices.to_vec();
    idx.sort_unstable();
    idx.dedup();
    if let Some(&bad) = idx.iter().find(|&&i| i > d) {
        return Err(Error::invalid("indices", format!("index {bad} exceeds d = {d}")));
    }
    let cols = fac.matrix().as_slice();
    let estimates: Vec<(f64, f64)> = idx
        .par_iter()
        .map(|&i| {
            let mut stream = RngStream::new(seed, i as u64);
            let mut u = vec![0.0; d];
            let mut y = vec![0.0; d];
            let mut fresh = vec![0.0; i];
            let mut fx = Vec::with_capacity(pairs);
            let mut fy = Vec::with_capacity(pairs);
            for _ in 0..pairs {
                stream.fill_normal(&mut u);
                y.iter_mut().for_each(|v| *v = 0.0);
                for (j, &uj) in u.iter().enumerate() {
                    for (yk, ak) in y.iter_mut().zip(&cols[j * d..(j + 1) * d]) {
                        *yk += uj * ak;
                    }
                }
                fx.push(payoff.evaluate(&y));
                stream.fill_normal(&mut fresh);
                for (j, &new) in fresh.iter().enumerate() {
                    let delta = new - u[j];
                    for (yk, ak) in y.iter_mut().zip(&cols[j * d..(j + 1) * d]) {
                        *yk += delta * ak;
                    }
                }
                fy.push(payoff.evaluate(&y));
            }
            covariance_with_jackknife(&fx, &fy)
        })
        .collect();
    Ok(CouplingCurve {
        dim: d,
        indices: idx,
        values: estimates.iter().map(|e| e.0).collect(),
        stderrs: Some(estimates.iter().map(|e| e.1).collect()),
        source: CurveSource::Empirical { pairs },
    })
}

/// Exact curve for `g(x) = aᵀx`: with `w = Aᵀa`, `C(i) = Σ_{j>i} w_j²`.
pub fn coupling_curve_linear(a: &[f64], fac: &FactorMatrix) -> Result<CouplingCurve> {
    let w = weights_linear(a, fac)?;
    let d = w.len();
    let mut values = vec![0.0; d + 1];
    for i in (0..d).rev() {
        values[i] = values[i + 1] + w[i] * w[i];
    }
    Ok(CouplingCurve {
        dim: d,
        indices: (0..=d).collect(),
        values,
        stderrs: None,
        source: CurveSource::AnalyticLinear,
    })
}

/// `w = Aᵀa`, the coefficients of `f(z) = aᵀAz`.
pub fn weights_linear(a: &[f64], fac: &FactorMatrix) -> Result<Vec<f64>> {
    let d = fac.dim();
    if a.len() != d {
        return Err(Error::DimensionMismatch { expected: d, got: a.len() });
    }
    Ok(fac
        .matrix()
        .column_iter()
        .map(|col| col.iter().zip(a).map(|(x, y)| x * y).sum())
        .collect())
}

/// Exact `Var(f_n)` for a linear payoff. Coordinate `j` survives an
/// iteration with probability `1 − q_{j−1}`, so its contribution to the
/// covariance of two states `m` iterations apart is `w_j² (1 − q_{j−1})^m`.
pub fn exact_varfn_linear(a: &[f64], fac: &FactorMatrix, sched: &QSchedule) -> Result<f64> {
    let w = weights_linear(a, fac)?;
    if sched.dim() != w.len() {
        return Err(Error::DimensionMismatch { expected: w.len(), got: sched.dim() });
    }
    let n = sched.n_iterations();
    let nf = n as f64;
    let total: f64 = w
        .iter()
        .zip(sched.q())
        .map(|(wj, qj)| {
            let rho = 1.0 - qj;
            let mut pow = 1.0;
            let mut s = nf;
            for m in 1..n {
                pow *= rho;
                if pow == 0.0 {
                    break;
                }
                s += 2.0 * (n - m) as f64 * pow;
            }
            wj * wj * s
        })
        .sum();
    Ok(total / (nf * nf))
}

/// `κ² Σ_{j>i} (AᵀA)_jj` for `i = 0..d−1`.
pub fn bound_lemma41(fac: &FactorMatrix, kappa: f64) -> Vec<f64> {
    let norms = fac.col_sq_norms();
    let mut out = vec![0.0; norms.len()];
    let mut acc = 0.0;
    for i in (0..norms.len()).rev() {
        acc += norms[i];
        out[i] = kappa * kappa * acc;
    }
    out
}

/// `Σ_{i<d} (C(i) − C(i+1)) / q_i`.
pub fn rdr_weighted_sum(curve: &CouplingCurve, sched: &QSchedule) -> Result<f64> {
    if curve.dim != sched.dim() {
        return Err(Error::DimensionMismatch { expected: curve.dim, got: sched.dim() });
    }
    let c = curve.dense_upper()?;
    Ok(sched.q().iter().enumerate().map(|(i, q)| (c[i] - c[i + 1]) / q).sum())
}

/// Bound on `n·Var(f_n)`: `2 Σ (C(i) − C(i+1)) / q_i`.
pub fn bound_n_var(curve: &CouplingCurve, sched: &QSchedule) -> Result<f64> {
    Ok(2.0 * rdr_weighted_sum(curve, sched)?)
}

/// Bound on `Var(f_n)`: `(2/d)(Σ q_i)(Σ (C(i) − C(i+1)) / q_i)`.
pub fn bound_eq6(curve: &CouplingCurve, sched: &QSchedule) -> Result<f64> {
    let d = sched.dim() as f64;
    Ok(2.0 / d * sched.expected_depth() * rdr_weighted_sum(curve, sched)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HarmonicBound {
    /// `(2(1 + ln d)/d) Σ_{i<d} C(i)`.
    pub bound: f64,
    /// `2(1 + ln d) C(0)`.
    pub cap: f64,
}

pub fn bound_harmonic(curve: &CouplingCurve) -> Result<HarmonicBound> {
    let c = curve.dense_upper()?;
    let d = curve.dim as f64;
    let factor = 2.0 * (1.0 + d.ln());
    Ok(HarmonicBound { bound: factor / d * c[..curve.dim].iter().sum::<f64>(), cap: factor * c[0] })
}

/// `(2κ²/d)(Σ √(AᵀA)_ii)²`; for a PCA factor the square roots are `√λ_i`.
pub fn bound_factor_q(fac: &FactorMatrix, kappa: f64) -> f64 {
    let d = fac.dim() as f64;
    let s: f64 = fac.col_sq_norms().iter().map(|c| c.max(0.0).sqrt()).sum();
    2.0 * kappa * kappa / d * s * s
}

/// `κ² tr(M)`, the bound on `Var g(X)`.
pub fn bound_sigma(fac: &FactorMatrix, kappa: f64) -> f64 {
    kappa * kappa * fac.col_sq_norms().iter().sum::<f64>()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum KappaProvenance {
    Supplied,
    Probed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Kappa {
    pub value: f64,
    pub provenance: KappaProvenance,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub d: usize,
    pub sigma_bound: f64,
    pub varfn_bound_factor: f64,
    /// Same expression evaluated on eigenvalues; present for PCA factors.
    pub varfn_bound_pca: Option<f64>,
    pub varfn_bound_harmonic: Option<HarmonicBound>,
    pub generic_curve_bound: Option<f64>,
    pub n_varfn_bound: Option<f64>,
    pub kappa: Kappa,
}

pub fn bound_report(
    fac: &FactorMatrix,
    sched: &QSchedule,
    curve: Option<&CouplingCurve>,
    kappa: Kappa,
) -> Result<BoundReport> {
    let k = kappa.value;
    let varfn_bound_pca = fac.eigen().map(|e| {
        let s: f64 = e.values.iter().map(|l| l.sqrt()).sum();
        2.0 * k * k / e.values.len() as f64 * s * s
    });
    let (harm, generic, n_var) = match curve {
        Some(c) => (
            Some(bound_harmonic(c)?),
            Some(bound_eq6(c, sched)?),
            Some(bound_n_var(c, sched)?),
        ),
        None => (None, None, None),
    };
    Ok(BoundReport {
        d: fac.dim(),
        sigma_bound: bound_sigma(fac, k),
        varfn_bound_factor: bound_factor_q(fac, k),
        varfn_bound_pca,
        varfn_bound_harmonic: harm,
        generic_curve_bound: generic,
        n_varfn_bound: n_var,
        kappa,
    })
}

/// Empirical lower estimate of the `(κ, M)`-Lipschitz constant: the largest
/// `√(Σ(g(Y) − g(Y′))² / Σ‖Y − Y′‖²)` over a family of admissible Gaussian
/// couplings (prefix-redraw pairs and `Y′ = cY` for `c ∈ {0, 0.5, 0.9}`).
/// Any admissible coupling gives a lower bound on the true constant.
pub fn probe_kappa(payoff: &Payoff, spec: &CovarianceSpec, probes: usize, seed: u64) -> Result<f64> {
    if probes == 0 {
        return Err(Error::invalid("probes", "need at least one probe"));
    }
    let d = spec.dim();
    if payoff.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: payoff.dim() });
    }
    let fac = cholesky_factor(spec)?;
    let a = fac.matrix();

    enum Coupling {
        Prefix(usize),
        Scaled(f64),
    }
    let mut couplings: Vec<Coupling> =
        default_index_grid(d).into_iter().filter(|&i| i > 0).map(Coupling::Prefix).collect();
    couplings.extend([0.0, 0.5, 0.9].map(Coupling::Scaled));

    let ratios: Vec<f64> = couplings
        .par_iter()
        .enumerate()
        .map(|(k, coupling)| {
            let mut stream = RngStream::new(seed, k as u64);
            let (mut num, mut den) = (0.0, 0.0);
            for _ in 0..probes {
                let u = nalgebra::DVector::from_vec(stream.standard_normal_vec(d));
                let y = a * &u;
                let y2 = match coupling {
                    Coupling::Prefix(i) => {
                        let mut u2 = u.clone();
                        for j in 0..*i {
                            u2[j] = stream.normal();
                        }
                        a * u2
                    }
                    Coupling::Scaled(c) => &y * *c,
                };
                let diff = payoff.evaluate(y.as_slice()) - payoff.evaluate(y2.as_slice());
                num += diff * diff;
                den += (&y - &y2).norm_squared();
            }
            if den > 0.0 {
                (num / den).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostPoint {
    pub epsilon: f64,
    pub tau_mc: f64,
    pub tau_grdr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EfficiencyReport {
    pub d: usize,
    pub problem: String,
    /// `Σ̂ / Var̂(f_n)` per unit (one MC sample vs one chain).
    pub variance_ratio: f64,
    pub mc_variance: f64,
    pub grdr_variance: f64,
    pub mc_ops_per_unit: f64,
    pub grdr_ops_per_unit: f64,
    /// `(Σ̂ · cost_mc) / (Var̂(f_n) · cost_grdr)`: the variance ratio at equal
    /// arithmetic cost.
    pub efficiency_ratio: f64,
    /// `d³ + var/ε² · ops` for a few target precisions.
    pub cost_model: Vec<CostPoint>,
}

impl EfficiencyReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

pub fn efficiency_report(mc: &EstimatorResult, grdr: &EstimatorResult) -> Result<EfficiencyReport> {
    if mc.problem != grdr.problem {
        return Err(Error::FingerprintMismatch(mc.problem.to_string(), grdr.problem.to_string()));
    }
    let d = mc.dim;
    let setup = (d as f64).powi(3);
    let cost_model = [1e-2, 1e-3, 1e-4]
        .iter()
        .map(|&eps| CostPoint {
            epsilon: eps,
            tau_mc: setup + mc.var_hat / (eps * eps) * mc.mean_ops,
            tau_grdr: setup + grdr.var_hat / (eps * eps) * grdr.mean_ops,
        })
        .collect();
    Ok(EfficiencyReport {
        d,
        problem: mc.problem.to_string(),
        variance_ratio: mc.var_hat / grdr.var_hat,
        mc_variance: mc.var_hat,
        grdr_variance: grdr.var_hat,
        mc_ops_per_unit: mc.mean_ops,
        grdr_ops_per_unit: grdr.mean_ops,
        efficiency_ratio: (mc.var_hat * mc.mean_ops) / (grdr.var_hat * grdr.mean_ops),
        cost_model,
    })
}
