//! The GRDR chain, the standard Monte Carlo baseline, and the replication
//! harness.
//!
//! A GRDR chain draws `U ~ N(0, I_d)`, sets `X = AU`, and then for `n − 1`
//! iterations re-simulates a random prefix `U_1..U_N` of `U`, updating `X`
//! through the first `N` columns of `A` only. The chain output is the average
//! of `g(X)` over the `n` visited states. Each iteration costs `O(dN)`, and
//! with `n = ⌈d/Σq_i⌉` the whole chain costs `O(d²)` in expectation.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::factor::FactorMatrix;
use crate::fingerprint::{Fingerprint, FingerprintBuilder};
use crate::payoffs::Payoff;
use crate::rng::RngStream;
use crate::schedule::QSchedule;

/// Relative drift allowed between the incremental `X` and a full `AU`
/// recomputation in verify mode.
pub const DRIFT_TOLERANCE: f64 = 1e-6;

/// Count, mean and sum of squared deviations (Welford / Chan et al.).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RunningStats {
    count: u64,
    mean: f64,
    m2: f64,
}

impl RunningStats {
    pub fn push(&mut self, x: f64) {
        self.count += 1;
        let delta = x - self.mean;
        self.mean += delta / self.count as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&self, other: &RunningStats) -> RunningStats {
        if self.count == 0 {
            return *other;
        }
        if other.count == 0 {
            return *self;
        }
        let count = self.count + other.count;
        let delta = other.mean - self.mean;
        let mean = self.mean + delta * other.count as f64 / count as f64;
        let m2 = self.m2 + other.m2 + delta * delta * (self.count as f64 * other.count as f64) / count as f64;
        RunningStats { count, mean, m2 }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    /// Unbiased sample variance; zero with fewer than two observations.
    pub fn variance(&self) -> f64 {
        if self.count < 2 {
            0.0
        } else {
            (self.m2 / (self.count - 1) as f64).max(0.0)
        }
    }
}

impl FromIterator<f64> for RunningStats {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = RunningStats::default();
        for x in iter {
            s.push(x);
        }
        s
    }
}

/// Mutable state of one GRDR chain.
#[derive(Debug, Clone)]
pub struct ChainState {
    /// Current Gaussian input.
    pub u: Vec<f64>,
    /// Current `AU`, maintained incrementally.
    pub x: Vec<f64>,
    /// Running sum of `g(X)`.
    pub sum: f64,
    /// Number of states visited so far (the first draw counts as one).
    pub k: usize,
    pub ops: u64,
    pub depth_sum: u64,
    pub max_drift: f64,
}

/// A GRDR chain in progress. Use [`grdr_chain`] unless the intermediate
/// states are needed.
pub struct GrdrChain<'a> {
    payoff: &'a Payoff,
    fac: &'a FactorMatrix,
    sched: &'a QSchedule,
    stream: RngStream,
    state: ChainState,
    fresh: Vec<f64>,
    verify: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChainOutput {
    pub f_n: f64,
    pub ops: u64,
    /// Average depth over the `n − 1` resampling iterations (0 when `n = 1`).
    pub mean_depth: f64,
    pub depth_sum: u64,
    pub iterations: usize,
}

fn check_dims(payoff: &Payoff, fac: &FactorMatrix, sched: Option<&QSchedule>) -> Result<()> {
    let d = fac.dim();
    if payoff.dim() != d {
        return Err(Error::DimensionMismatch { expected: d, got: payoff.dim() });
    }
    if let Some(s) = sched {
        if s.dim() != d {
            return Err(Error::DimensionMismatch { expected: d, got: s.dim() });
        }
    }
    Ok(())
}

/// `x += delta · column`
#[inline]
fn axpy(x: &mut [f64], delta: f64, column: &[f64]) {
    for (xi, ai) in x.iter_mut().zip(column) {
        *xi += delta * ai;
    }
}

fn dense_mul(a: &FactorMatrix, u: &[f64], out: &mut [f64]) {
    let d = a.dim();
    let cols = a.matrix().as_slice();
    out.iter_mut().for_each(|v| *v = 0.0);
    for (j, &uj) in u.iter().enumerate() {
        axpy(out, uj, &cols[j * d..(j + 1) * d]);
    }
}

impl<'a> GrdrChain<'a> {
    /// Draws the initial `U`, computes `X = AU` and the first `g(X)`.
    pub fn start(
        payoff: &'a Payoff,
        fac: &'a FactorMatrix,
        sched: &'a QSchedule,
        mut stream: RngStream,
        verify: bool,
    ) -> Result<Self> {
        check_dims(payoff, fac, Some(sched))?;
        let d = fac.dim();
        let u = stream.standard_normal_vec(d);
        let mut x = vec![0.0; d];
        dense_mul(fac, &u, &mut x);
        let sum = payoff.evaluate(&x);
        let ops = d as u64 + (d * d) as u64 + payoff.eval_cost();
        Ok(GrdrChain {
            payoff,
            fac,
            sched,
            stream,
            state: ChainState { u, x, sum, k: 1, ops, depth_sum: 0, max_drift: 0.0 },
            fresh: vec![0.0; d],
            verify,
        })
    }

    pub fn state(&self) -> &ChainState {
        &self.state
    }

    /// One resampling iteration. Returns the depth `N` used.
    pub fn step(&mut self) -> Result<usize> {
        let d = self.fac.dim();
        let depth = self.sched.sample_depth(self.stream.uniform());
        let fresh = &mut self.fresh[..depth];
        self.stream.fill_normal(fresh);

        let cols = self.fac.matrix().as_slice();
        let st = &mut self.state;
        for (j, &new) in fresh.iter().enumerate() {
            let delta = new - st.u[j];
            axpy(&mut st.x, delta, &cols[j * d..(j + 1) * d]);
            st.u[j] = new;
        }
        st.sum += self.payoff.evaluate(&st.x);
        st.k += 1;
        st.depth_sum += depth as u64;
        st.ops += 1 + depth as u64 + (d * depth) as u64 + self.payoff.eval_cost();

        if self.verify {
            let mut full = vec![0.0; d];
            dense_mul(self.fac, &st.u, &mut full);
            let err = full.iter().zip(&st.x).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let u_norm = st.u.iter().map(|v| v * v).sum::<f64>().sqrt();
            let scale = self.fac.matrix().norm() * u_norm;
            let rel = if scale > 0.0 { err / scale } else { err };
            st.max_drift = st.max_drift.max(rel);
            if rel > DRIFT_TOLERANCE {
                return Err(Error::Drift { iteration: st.k, relative: rel });
            }
        }
        Ok(depth)
    }

    pub fn finish(self) -> ChainOutput {
        let st = self.state;
        let iterations = st.k - 1;
        ChainOutput {
            f_n: st.sum / st.k as f64,
            ops: st.ops,
            mean_depth: if iterations > 0 { st.depth_sum as f64 / iterations as f64 } else { 0.0 },
            depth_sum: st.depth_sum,
            iterations,
        }
    }
}

/// Runs one full chain of `sched.n_iterations()` states and returns `f_n`.
pub fn grdr_chain(
    payoff: &Payoff,
    fac: &FactorMatrix,
    sched: &QSchedule,
    stream: RngStream,
    verify: bool,
) -> Result<ChainOutput> {
    let mut chain = GrdrChain::start(payoff, fac, sched, stream, verify)?;
    for _ in 1..sched.n_iterations() {
        chain.step()?;
    }
    Ok(chain.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Grdr,
    StandardMc,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Grdr => "grdr",
            Method::StandardMc => "mc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorResult {
    pub method: Method,
    pub dim: usize,
    pub estimate: f64,
    /// Number of independent units averaged: chains for GRDR, samples for MC.
    pub count: u64,
    /// Sample variance of one unit (`f_n` for GRDR, `g(X)` for MC).
    pub var_hat: f64,
    pub stderr: f64,
    pub mean_ops: f64,
    pub total_ops: u64,
    /// Average resampling depth (`d` for MC, which redraws everything).
    pub mean_depth: f64,
    pub seed: u64,
    pub factor: String,
    pub qkind: String,
    /// Identifies payoff and covariance only.
    pub problem: Fingerprint,
    /// Identifies everything needed for a bit-exact rerun.
    pub config: Fingerprint,
}

fn problem_fingerprint(payoff: &Payoff, fac: &FactorMatrix) -> Fingerprint {
    FingerprintBuilder::new()
        .str(&format!("{:?}", payoff.kind()))
        .u64(fac.covariance_id().0)
        .finish()
}

fn config_fingerprint(problem: Fingerprint, parts: &[&str], q: &[f64], seed: u64) -> Fingerprint {
    let mut b = FingerprintBuilder::new().u64(problem.0);
    for p in parts {
        b = b.str(p);
    }
    b.floats(q).u64(seed).finish()
}

/// Averages `g(AU)` over `n_samples` iid draws from one stream.
pub fn standard_mc(
    payoff: &Payoff,
    fac: &FactorMatrix,
    n_samples: u64,
    mut stream: RngStream,
) -> Result<EstimatorResult> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "need at least one sample"));
    }
    check_dims(payoff, fac, None)?;
    let d = fac.dim();
    let mut u = vec![0.0; d];
    let mut x = vec![0.0; d];
    let mut stats = RunningStats::default();
    for _ in 0..n_samples {
        stream.fill_normal(&mut u);
        dense_mul(fac, &u, &mut x);
        stats.push(payoff.evaluate(&x));
    }
    let per_sample = d as u64 + (d * d) as u64 + payoff.eval_cost();
    let problem = problem_fingerprint(payoff, fac);
    let factor = fac.construction().label();
    Ok(EstimatorResult {
        method: Method::StandardMc,
        dim: d,
        estimate: stats.mean(),
        count: n_samples,
        var_hat: stats.variance(),
        stderr: (stats.variance() / n_samples as f64).sqrt(),
        mean_ops: per_sample as f64,
        total_ops: per_sample * n_samples,
        mean_depth: d as f64,
        seed: stream.seed(),
        config: config_fingerprint(problem, &["mc", &factor], &[], stream.seed()),
        factor,
        qkind: "-".into(),
        problem,
    })
}

/// Operations charged to one standard Monte Carlo sample.
pub fn mc_ops_per_sample(payoff: &Payoff, d: usize) -> u64 {
    d as u64 + (d * d) as u64 + payoff.eval_cost()
}

/// Runs `replications` chains on streams `(seed, 0..replications)`.
/// Output order follows the stream index regardless of scheduling.
pub fn replicate_grdr_outputs(
    payoff: &Payoff,
    fac: &FactorMatrix,
    sched: &QSchedule,
    replications: usize,
    seed: u64,
    verify: bool,
) -> Result<Vec<ChainOutput>> {
    check_dims(payoff, fac, Some(sched))?;
    (0..replications as u64)
        .into_par_iter()
        .map(|r| grdr_chain(payoff, fac, sched, RngStream::new(seed, r), verify))
        .collect()
}

pub fn summarize_grdr(
    outputs: &[ChainOutput],
    payoff: &Payoff,
    fac: &FactorMatrix,
    sched: &QSchedule,
    seed: u64,
) -> EstimatorResult {
    let stats: RunningStats = outputs.iter().map(|o| o.f_n).collect();
    let r = outputs.len() as u64;
    let total_ops: u64 = outputs.iter().map(|o| o.ops).sum();
    let depth_total: u64 = outputs.iter().map(|o| o.depth_sum).sum();
    let iter_total: usize = outputs.iter().map(|o| o.iterations).sum();
    let problem = problem_fingerprint(payoff, fac);
    let factor = fac.construction().label();
    let qkind = sched.source().label().to_string();
    EstimatorResult {
        method: Method::Grdr,
        dim: fac.dim(),
        estimate: stats.mean(),
        count: r,
        var_hat: stats.variance(),
        stderr: (stats.variance() / r.max(1) as f64).sqrt(),
        mean_ops: total_ops as f64 / r.max(1) as f64,
        total_ops,
        mean_depth: if iter_total > 0 { depth_total as f64 / iter_total as f64 } else { 0.0 },
        seed,
        config: config_fingerprint(
            problem,
            &["grdr", &factor, &qkind, &sched.n_iterations().to_string()],
            sched.q(),
            seed,
        ),
        factor,
        qkind,
        problem,
    }
}

/// Averages `replications` independent GRDR chains.
pub fn replicate_grdr(
    payoff: &Payoff,
    fac: &FactorMatrix,
    sched: &QSchedule,
    replications: usize,
    seed: u64,
) -> Result<EstimatorResult> {
    replicate_grdr_verified(payoff, fac, sched, replications, seed, false)
}

pub fn replicate_grdr_verified(
    payoff: &Payoff,
    fac: &FactorMatrix,
    sched: &QSchedule,
    replications: usize,
    seed: u64,
    verify: bool,
) -> Result<EstimatorResult> {
    if replications < 2 {
        return Err(Error::invalid("replications", "need at least two chains"));
    }
    let outputs = replicate_grdr_outputs(payoff, fac, sched, replications, seed, verify)?;
    Ok(summarize_grdr(&outputs, payoff, fac, sched, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covmodel::{make_eigen_decay, CovarianceSpec, Orientation};
    use crate::factor::{cholesky_factor, pca_factor};
    use crate::schedule::{explicit, from_factor, harmonic};
    use nalgebra::DMatrix;

    fn spec(rows: usize, data: &[f64]) -> CovarianceSpec {
        CovarianceSpec::from_matrix(DMatrix::from_row_slice(rows, rows, data)).unwrap()
    }

    #[test]
    fn running_stats_merge_matches_sequential() {
        let xs: Vec<f64> = (0..101).map(|i| ((i * 37) % 17) as f64 * 0.3 - 1.0).collect();
        let all: RunningStats = xs.iter().copied().collect();
        let left: RunningStats = xs[..40].iter().copied().collect();
        let right: RunningStats = xs[40..].iter().copied().collect();
        let merged = left.merge(&right);
        assert_eq!(merged.count(), all.count());
        assert!((merged.mean() - all.mean()).abs() < 1e-13);
        assert!((merged.variance() - all.variance()).abs() < 1e-12);
        assert_eq!(RunningStats::default().merge(&all), all);
    }

    #[test]
    fn single_iteration_chain_is_one_mc_draw() {
        let s = spec(2, &[2.0, 1.0, 1.0, 2.0]);
        let fac = cholesky_factor(&s).unwrap();
        let g = Payoff::linear(vec![0.7, -1.3]).unwrap();
        let q = explicit(vec![1.0, 1.0]).unwrap();
        assert_eq!(q.n_iterations(), 1);
        let out = grdr_chain(&g, &fac, &q, RngStream::new(3, 8), false).unwrap();
        let mc = standard_mc(&g, &fac, 1, RngStream::new(3, 8)).unwrap();
        assert_eq!(out.f_n, mc.estimate);
        assert_eq!(out.iterations, 0);
        assert_eq!(out.mean_depth, 0.0);
    }

    #[test]
    fn incremental_update_tracks_full_product() {
        let s = make_eigen_decay(40, -2.0, 1.0, Orientation::RandomRotation(4)).unwrap();
        let fac = pca_factor(&s).unwrap();
        let q = from_factor(&fac).unwrap().with_iterations(500).unwrap();
        let g = Payoff::basket_call(vec![0.2; 40], 0.0, 1.0, 1.0).unwrap();
        let mut chain = GrdrChain::start(&g, &fac, &q, RngStream::new(1, 0), true).unwrap();
        for _ in 1..q.n_iterations() {
            chain.step().unwrap();
        }
        assert!(chain.state().max_drift <= DRIFT_TOLERANCE);
    }

    #[test]
    fn untouched_tail_is_preserved() {
        let s = make_eigen_decay(6, -2.0, 1.0, Orientation::Diagonal).unwrap();
        let fac = pca_factor(&s).unwrap();
        let q = harmonic(6).unwrap().with_iterations(50).unwrap();
        let g = Payoff::constant(6, 0.0).unwrap();
        let mut chain = GrdrChain::start(&g, &fac, &q, RngStream::new(5, 5), false).unwrap();
        for _ in 0..40 {
            let before = chain.state().u.clone();
            let depth = chain.step().unwrap();
            assert_eq!(&chain.state().u[depth..], &before[depth..]);
        }
    }

    #[test]
    fn op_count_matches_contract() {
        let d = 5;
        let s = make_eigen_decay(d, -1.0, 1.0, Orientation::Diagonal).unwrap();
        let fac = pca_factor(&s).unwrap();
        let q = harmonic(d).unwrap();
        let g = Payoff::linear(vec![1.0; d]).unwrap();
        let out = grdr_chain(&g, &fac, &q, RngStream::new(2, 2), false).unwrap();
        let d64 = d as u64;
        let expected = d64 + d64 * d64 + d64
            + out.iterations as u64 * (1 + d64)
            + out.depth_sum * (1 + d64);
        assert_eq!(out.ops, expected);
    }

    #[test]
    fn constant_payoff_has_zero_variance() {
        let s = spec(2, &[1.0, 0.0, 0.0, 1.0]);
        let fac = cholesky_factor(&s).unwrap();
        let g = Payoff::constant(2, 4.5).unwrap();
        let mc = standard_mc(&g, &fac, 100, RngStream::new(1, 0)).unwrap();
        assert_eq!(mc.estimate, 4.5);
        assert_eq!(mc.var_hat, 0.0);
        let q = harmonic(2).unwrap();
        let gr = replicate_grdr(&g, &fac, &q, 10, 1).unwrap();
        assert_eq!(gr.estimate, 4.5);
        assert_eq!(gr.var_hat, 0.0);
    }

    #[test]
    fn mc_linear_variance() {
        let s = spec(2, &[2.0, 1.0, 1.0, 2.0]);
        let fac = cholesky_factor(&s).unwrap();
        let g = Payoff::linear(vec![1.0, 1.0]).unwrap();
        let n = 100_000;
        let mc = standard_mc(&g, &fac, n, RngStream::new(10, 0)).unwrap();
        // Var of the sample variance for a Gaussian: 2σ⁴/(n−1).
        let se = (2.0 * 36.0 / (n as f64 - 1.0)).sqrt();
        assert!((mc.var_hat - 6.0).abs() < 4.0 * se, "{}", mc.var_hat);
        assert!(mc.estimate.abs() < 4.0 * mc.stderr);
    }

    #[test]
    fn mc_basket_matches_black_scholes() {
        let s = spec(1, &[1.0]);
        let fac = cholesky_factor(&s).unwrap();
        let g = Payoff::basket_call(vec![0.2], 0.0, 1.0, 1.0).unwrap();
        let mc = standard_mc(&g, &fac, 1_000_000, RngStream::new(11, 0)).unwrap();
        let oracle = g.analytic_mean(&s).unwrap();
        assert!((mc.estimate - oracle).abs() < 4.0 * mc.stderr, "{} vs {oracle}", mc.estimate);
    }

    #[test]
    fn replication_is_reproducible() {
        let s = make_eigen_decay(8, -2.0, 1.0, Orientation::RandomRotation(2)).unwrap();
        let fac = pca_factor(&s).unwrap();
        let q = from_factor(&fac).unwrap();
        let g = Payoff::basket_call(vec![0.3; 8], 0.01, 1.0, 1.0).unwrap();
        let a = replicate_grdr_outputs(&g, &fac, &q, 2, 99, false).unwrap();
        let b = replicate_grdr_outputs(&g, &fac, &q, 2, 99, false).unwrap();
        assert_eq!(a[0].f_n.to_bits(), b[0].f_n.to_bits());
        assert_eq!(a[1].f_n.to_bits(), b[1].f_n.to_bits());
        assert_ne!(a[0].f_n, a[1].f_n);
        let ra = replicate_grdr(&g, &fac, &q, 2, 99).unwrap();
        let rb = replicate_grdr(&g, &fac, &q, 2, 99).unwrap();
        assert_eq!(ra, rb);
        assert!((ra.stderr - (ra.var_hat / 2.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn grdr_unbiased_for_linear_two_dim() {
        let s = spec(2, &[1.0, 0.0, 0.0, 1.0]);
        let fac = pca_factor(&s).unwrap();
        let q = harmonic(2).unwrap();
        let g = Payoff::linear(vec![1.0, 1.0]).unwrap();
        let r = replicate_grdr(&g, &fac, &q, 10_000, 17).unwrap();
        assert!(r.estimate.abs() < 4.0 * r.stderr, "{} ± {}", r.estimate, r.stderr);
    }

    #[test]
    fn grdr_matches_mc_in_one_dimension() {
        let s = spec(1, &[1.0]);
        let fac = cholesky_factor(&s).unwrap();
        let q = harmonic(1).unwrap();
        let g = Payoff::basket_call(vec![0.25], 0.0, 1.0, 1.0).unwrap();
        let gr = replicate_grdr(&g, &fac, &q, 10_000, 21).unwrap();
        let mc = standard_mc(&g, &fac, 10_000, RngStream::new(22, 0)).unwrap();
        let joint = (gr.stderr.powi(2) + mc.stderr.powi(2)).sqrt();
        assert!((gr.estimate - mc.estimate).abs() < 4.0 * joint);
    }

    #[test]
    fn mean_depth_matches_expected_depth() {
        let d = 16;
        let s = make_eigen_decay(d, -2.0, 1.0, Orientation::Diagonal).unwrap();
        let fac = pca_factor(&s).unwrap();
        let q = harmonic(d).unwrap();
        let g = Payoff::constant(d, 0.0).unwrap();
        let r = replicate_grdr(&g, &fac, &q, 5_000, 4).unwrap();
        let draws = r.count as f64 * (q.n_iterations() - 1) as f64;
        let var_n = q.depth_second_moment() - q.expected_depth().powi(2);
        let se = (var_n / draws).sqrt();
        assert!((r.mean_depth - q.expected_depth()).abs() < 4.0 * se);
    }

    #[test]
    fn chain_marginals_stay_standard_normal() {
        let d = 6;
        let s = make_eigen_decay(d, -2.0, 1.0, Orientation::Diagonal).unwrap();
        let fac = pca_factor(&s).unwrap();
        let q = harmonic(d).unwrap().with_iterations(8).unwrap();
        let g = Payoff::constant(d, 0.0).unwrap();
        let reps = 20_000;
        let steps = q.n_iterations();
        let mut stats = vec![vec![RunningStats::default(); d]; steps];
        for r in 0..reps {
            let mut chain = GrdrChain::start(&g, &fac, &q, RngStream::new(8, r), false).unwrap();
            for (k, row) in stats.iter_mut().enumerate() {
                if k > 0 {
                    chain.step().unwrap();
                }
                for (j, st) in row.iter_mut().enumerate() {
                    st.push(chain.state().u[j]);
                }
            }
        }
        let n = reps as f64;
        for row in &stats {
            for st in row {
                assert!(st.mean().abs() < 4.0 / n.sqrt());
                assert!((st.variance() - 1.0).abs() < 4.0 * (2.0 / n).sqrt());
            }
        }
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let s = spec(2, &[1.0, 0.0, 0.0, 1.0]);
        let fac = cholesky_factor(&s).unwrap();
        let g = Payoff::linear(vec![1.0; 3]).unwrap();
        assert!(matches!(
            grdr_chain(&g, &fac, &harmonic(2).unwrap(), RngStream::new(0, 0), false),
            Err(Error::DimensionMismatch { .. })
        ));
        let g = Payoff::linear(vec![1.0; 2]).unwrap();
        assert!(grdr_chain(&g, &fac, &harmonic(3).unwrap(), RngStream::new(0, 0), false).is_err());
        assert!(replicate_grdr(&g, &fac, &harmonic(2).unwrap(), 1, 0).is_err());
    }
}
