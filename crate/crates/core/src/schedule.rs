//! Resampling schedules `q` and the random depth `N` with `P(N > i) = q_i`.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::factor::FactorMatrix;

/// Monotonicity violations in a factor-derived schedule smaller than this
/// are treated as eigensolver noise and clamped away.
const MONOTONE_SLACK: f64 = 1e-14;

#[derive(Debug, Clone, PartialEq)]
pub enum QSource {
    Harmonic,
    Factor,
    Explicit,
}

impl QSource {
    pub fn label(&self) -> &'static str {
        match self {
            QSource::Harmonic => "harmonic",
            QSource::Factor => "factor",
            QSource::Explicit => "explicit",
        }
    }
}

/// A validated q-vector with `1 = q₀ ≥ q₁ ≥ … ≥ q_{d−1} > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct QSchedule {
    q: Vec<f64>,
    cum_mass: Vec<f64>,
    n_iterations: usize,
    expected_depth: f64,
    source: QSource,
}

impl QSchedule {
    fn build(q: Vec<f64>, source: QSource) -> Result<Self> {
        check_q(&q)?;
        let expected_depth: f64 = q.iter().sum();
        let d = q.len();
        let n_iterations = iterations_for(d, expected_depth);
        let cum_mass = q.iter().map(|qi| 1.0 - qi).collect();
        Ok(QSchedule { q, cum_mass, n_iterations, expected_depth, source })
    }

    pub fn dim(&self) -> usize {
        self.q.len()
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// `P(N ≤ i)` for `i = 0..d−1` (so entry 0 is always zero).
    pub fn cum_mass(&self) -> &[f64] {
        &self.cum_mass
    }

    /// Chain length `n`; `⌈d / Σq_i⌉` unless overridden.
    pub fn n_iterations(&self) -> usize {
        self.n_iterations
    }

    /// `E(N) = Σ q_i`.
    pub fn expected_depth(&self) -> f64 {
        self.expected_depth
    }

    /// `E(N²) = Σ (2i+1) q_i`, handy for standard errors on depth averages.
    pub fn depth_second_moment(&self) -> f64 {
        self.q.iter().enumerate().map(|(i, q)| (2 * i + 1) as f64 * q).sum()
    }

    pub fn source(&self) -> &QSource {
        &self.source
    }

    /// Replaces the chain length. Experiments only; the default keeps the
    /// expected cost per chain within a constant of `d²`.
    pub fn with_iterations(mut self, n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("n", "chain length must be at least 1"));
        }
        self.n_iterations = n;
        Ok(self)
    }

    /// Maps a uniform variate in `(0, 1)` to a depth in `1..=d`: `N = i` iff
    /// `q_i < u ≤ q_{i−1}` (with `q_d = 0`), so `P(N > i) = q_i`.
    pub fn sample_depth(&self, u: f64) -> usize {
        debug_assert!(u > 0.0 && u < 1.0);
        self.q.partition_point(|&qi| qi >= u).max(1)
    }

    /// Single-column plain text, 17 significant digits.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for v in &self.q {
            let _ = writeln!(out, "{v:.16e}");
        }
        out
    }
}

fn iterations_for(d: usize, sum_q: f64) -> usize {
    let n = (d as f64 / sum_q).ceil() as usize;
    // Guard the ceiling against rounding in sum_q.
    let mut n = n.max(1);
    while (n as f64) * sum_q < d as f64 {
        n += 1;
    }
    while n > 1 && ((n - 1) as f64) * sum_q >= d as f64 {
        n -= 1;
    }
    n
}

fn check_q(q: &[f64]) -> Result<()> {
    let Some(&first) = q.first() else {
        return Err(Error::Schedule("q must be nonempty".into()));
    };
    if first != 1.0 {
        return Err(Error::Schedule(format!("q[0] must equal 1, got {first}")));
    }
    if let Some(i) = q.windows(2).position(|w| !(w[1] <= w[0])) {
        return Err(Error::Schedule(format!(
            "q is not nonincreasing at index {}: {} > {}",
            i + 1,
            q[i + 1],
            q[i]
        )));
    }
    let last = q[q.len() - 1];
    if !(last > 0.0) {
        return Err(Error::Schedule(format!("q[{}] must be positive, got {last}", q.len() - 1)));
    }
    Ok(())
}

/// `q_i = 1/(i+1)`.
pub fn harmonic(d: usize) -> Result<QSchedule> {
    if d == 0 {
        return Err(Error::invalid("d", "dimension must be at least 1"));
    }
    QSchedule::build((0..d).map(|i| 1.0 / (i + 1) as f64).collect(), QSource::Harmonic)
}

/// `q_{i−1} = √((AᵀA)_ii / (AᵀA)_11)`, which for a PCA factor is
/// `q_i = √(λ_{i+1}/λ₁)`.
pub fn from_factor(fac: &FactorMatrix) -> Result<QSchedule> {
    let norms = fac.col_sq_norms();
    if let Some(i) = norms.iter().position(|&c| !(c > 0.0)) {
        return Err(Error::Schedule(format!(
            "column {i} of the factor has zero norm; a singular covariance has no factor schedule"
        )));
    }
    let top = norms[0];
    let mut q: Vec<f64> = norms.iter().map(|&c| (c / top).sqrt()).collect();
    for i in 1..q.len() {
        if q[i] > q[i - 1] {
            if q[i] - q[i - 1] > MONOTONE_SLACK {
                return Err(Error::Schedule(format!(
                    "column square norms increase at index {i}; apply permute_decreasing first"
                )));
            }
            q[i] = q[i - 1];
        }
    }
    QSchedule::build(q, QSource::Factor)
}

/// Accepts `q` only if it already satisfies `1 = q₀ ≥ … ≥ q_{d−1} > 0`.
pub fn explicit(q: Vec<f64>) -> Result<QSchedule> {
    QSchedule::build(q, QSource::Explicit)
}

/// Parses the single-column q file format. Blank lines and `#` comments are
/// ignored.
pub fn parse_q_text(text: &str, source_name: &str) -> Result<QSchedule> {
    let mut q = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let v: f64 = line.parse().map_err(|e| Error::Parse {
            source_name: source_name.to_string(),
            reason: format!("line {}: {e}", lineno + 1),
        })?;
        q.push(v);
    }
    explicit(q)
}
