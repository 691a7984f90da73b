//! Experiment configuration and the runners behind the CLI subcommands.
//!
//! A config is a TOML key/value file. Every key can be overridden from the
//! command line with a flag of the same name. Files referenced by the config
//! (matrix, q-vector, linear coefficients) are read and validated before any
//! simulation starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{error, info};
use serde::{Deserialize, Serialize};

use crate::analysis::{
    self, bound_lemma41, bound_report, coupling_curve_empirical, coupling_curve_linear,
    default_index_grid, efficiency_report, probe_kappa, CouplingCurve, CurveSource, Kappa,
    KappaProvenance,
};
use crate::covmodel::{make_eigen_decay, make_equicorrelation, CovarianceSpec, Orientation};
use crate::error::{Error, Result};
use crate::estimator::{
    mc_ops_per_sample, replicate_grdr_verified, standard_mc, EstimatorResult,
};
use crate::factor::{cholesky_factor, pca_factor, permute_decreasing, Construction, FactorMatrix};
use crate::matrix_io;
use crate::payoffs::{Payoff, PayoffKind};
use crate::rng::RngStream;
use crate::schedule::{self, QSchedule};

/// Stream id reserved for the standard MC baseline; GRDR chains use
/// `0..replications`.
const MC_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyKind {
    EigenDecay,
    Equicorrelation,
    File,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrientationKind {
    Diagonal,
    Rotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PayoffName {
    Constant,
    Linear,
    Basket,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FactorKind {
    #[serde(rename = "cholesky")]
    Cholesky,
    #[serde(rename = "cholesky+permute")]
    CholeskyPermute,
    #[serde(rename = "pca")]
    Pca,
    #[serde(rename = "pca+permute-check")]
    PcaPermuteCheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matching {
    /// Standard MC gets the same total arithmetic operations as GRDR.
    Ops,
    /// Standard MC gets as many payoff evaluations as GRDR.
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Sigma {
    Scalar(f64),
    List(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "d_family")]
    pub family: FamilyKind,
    #[serde(default = "d_gamma")]
    pub gamma: f64,
    #[serde(default = "one")]
    pub lambda1: f64,
    #[serde(default = "d_orientation")]
    pub orientation: OrientationKind,
    #[serde(default)]
    pub rotation_seed: u64,
    #[serde(default)]
    pub rho: f64,
    #[serde(default)]
    pub matrix_file: Option<PathBuf>,

    #[serde(default = "d_payoff")]
    pub payoff: PayoffName,
    #[serde(default)]
    pub constant: f64,
    /// `normalized-ones`, `ones`, `e1`, or a path to a single-column file.
    #[serde(default = "d_linear_a")]
    pub linear_a: String,
    #[serde(default = "d_sigma")]
    pub sigma: Sigma,
    #[serde(default)]
    pub rate: f64,
    #[serde(default = "one")]
    pub maturity: f64,
    #[serde(default = "one")]
    pub strike: f64,

    #[serde(default = "d_factor")]
    pub factor: FactorKind,
    /// `harmonic`, `factor`, or a path to a q file.
    #[serde(default = "d_q")]
    pub q: String,
    #[serde(default = "d_replications")]
    pub replications: usize,
    #[serde(default = "one_u64")]
    pub seed: u64,
    #[serde(default = "d_dims", deserialize_with = "one_or_many")]
    pub dims: Vec<usize>,
    #[serde(default = "d_matching", rename = "match")]
    pub matching: Matching,
    #[serde(default)]
    pub debug_verify: bool,

    #[serde(default)]
    pub kappa: Option<f64>,
    #[serde(default)]
    pub probe_kappa: bool,
    #[serde(default = "d_probes")]
    pub probes: usize,
    #[serde(default = "d_pairs")]
    pub pairs: usize,

    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub curves_output: Option<PathBuf>,
    #[serde(default)]
    pub report_output: Option<PathBuf>,
}

fn one_or_many<'de, D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Vec<usize>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum OneOrMany {
        One(usize),
        Many(Vec<usize>),
    }
    Ok(match OneOrMany::deserialize(de)? {
        OneOrMany::One(d) => vec![d],
        OneOrMany::Many(v) => v,
    })
}

fn d_family() -> FamilyKind {
    FamilyKind::EigenDecay
}
fn d_gamma() -> f64 {
    -2.0
}
fn one() -> f64 {
    1.0
}
fn one_u64() -> u64 {
    1
}
fn d_orientation() -> OrientationKind {
    OrientationKind::Diagonal
}
fn d_payoff() -> PayoffName {
    PayoffName::Linear
}
fn d_linear_a() -> String {
    "normalized-ones".into()
}
fn d_sigma() -> Sigma {
    Sigma::Scalar(0.2)
}
fn d_factor() -> FactorKind {
    FactorKind::Pca
}
fn d_q() -> String {
    "factor".into()
}
fn d_replications() -> usize {
    1000
}
fn d_dims() -> Vec<usize> {
    vec![16]
}
fn d_matching() -> Matching {
    Matching::Ops
}
fn d_probes() -> usize {
    2000
}
fn d_pairs() -> usize {
    20_000
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        parse_config("", &BTreeMap::new()).expect("defaults are valid")
    }
}

fn config_err(field: impl Into<String>, reason: impl Into<String>) -> Error {
    Error::Config { field: field.into(), reason: reason.into() }
}

/// Interprets a command-line override as a TOML value; bare words become
/// strings and comma lists become arrays.
fn override_value(raw: &str) -> toml::Value {
    let parse = |s: &str| {
        toml::from_str::<toml::Table>(&format!("v = {s}")).ok().and_then(|mut t| t.remove("v"))
    };
    if let Some(v) = parse(raw) {
        return v;
    }
    if raw.contains(',') {
        if let Some(v) = parse(&format!("[{raw}]")) {
            return v;
        }
    }
    toml::Value::String(raw.to_string())
}

/// Parses config text and applies `key → raw value` overrides.
pub fn parse_config(text: &str, overrides: &BTreeMap<String, String>) -> Result<ExperimentConfig> {
    let mut table: toml::Table = toml::from_str(text).map_err(|e| {
        let field = e.span().map(|s| format!("byte {}..{}", s.start, s.end)).unwrap_or_default();
        config_err(field, e.message().to_string())
    })?;
    for (k, v) in overrides {
        table.insert(k.clone(), override_value(v));
    }
    // Round-trip through text so errors carry a span naming the key.
    let merged = toml::to_string(&table).expect("table serializes");
    let cfg: ExperimentConfig = toml::from_str(&merged).map_err(|e| {
        let msg = e.message().to_string();
        let from_span = e.span().and_then(|span| {
            let line_start = merged[..span.start].rfind('\n').map_or(0, |i| i + 1);
            let line = &merged[line_start..];
            line.split_once('=').map(|(k, _)| k.trim().trim_matches('"').to_string())
        });
        let from_msg = msg.split('`').nth(1).filter(|_| msg.contains("field")).map(str::to_string);
        config_err(from_msg.or(from_span).unwrap_or_else(|| "config".into()), msg)
    })?;
    cfg.check_fields()?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &BTreeMap<String, String>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

impl ExperimentConfig {
    fn check_fields(&self) -> Result<()> {
        if self.dims.is_empty() {
            return Err(config_err("dims", "at least one dimension is required"));
        }
        if self.dims.contains(&0) {
            return Err(config_err("dims", "dimensions must be positive"));
        }
        if !self.dims.windows(2).all(|w| w[0] < w[1]) {
            return Err(config_err("dims", "entries must be strictly increasing"));
        }
        if self.replications < 2 {
            return Err(config_err("replications", "need at least 2"));
        }
        if self.pairs < 2 {
            return Err(config_err("pairs", "need at least 2"));
        }
        if self.probes < 1 {
            return Err(config_err("probes", "need at least 1"));
        }
        if let Some(k) = self.kappa {
            if !(k > 0.0 && k.is_finite()) {
                return Err(config_err("kappa", "must be positive"));
            }
        }
        if self.family == FamilyKind::File && self.matrix_file.is_none() {
            return Err(config_err("matrix_file", "required when family = \"file\""));
        }
        Ok(())
    }

    /// Reads and validates every referenced file.
    pub fn resolve(&self) -> Result<ResolvedConfig> {
        let matrix = match (&self.family, &self.matrix_file) {
            (FamilyKind::File, Some(path)) => {
                let spec = matrix_io::read_covariance(path)
                    .map_err(|e| config_err("matrix_file", e.to_string()))?;
                if self.dims != [spec.dim()] {
                    return Err(config_err(
                        "dims",
                        format!("must be [{}] to match {}", spec.dim(), path.display()),
                    ));
                }
                Some(spec)
            }
            _ => None,
        };
        let q_file = match self.q.as_str() {
            "harmonic" | "factor" => None,
            path => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| config_err("q", format!("{path}: {e}")))?;
                let sched =
                    schedule::parse_q_text(&text, path).map_err(|e| config_err("q", format!("{path}: {e}")))?;
                if self.dims != [sched.dim()] {
                    return Err(config_err(
                        "dims",
                        format!("must be [{}] to match q file {path}", sched.dim()),
                    ));
                }
                Some(sched)
            }
        };
        let linear_a = match (self.payoff, self.linear_a.as_str()) {
            (PayoffName::Linear, "normalized-ones" | "ones" | "e1") => None,
            (PayoffName::Linear, path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| config_err("linear_a", format!("{path}: {e}")))?;
                let a = parse_column(&text).map_err(|e| config_err("linear_a", format!("{path}: {e}")))?;
                if self.dims != [a.len()] {
                    return Err(config_err("dims", format!("must be [{}] to match linear_a", a.len())));
                }
                Some(a)
            }
            _ => None,
        };
        if let Sigma::List(s) = &self.sigma {
            if self.payoff == PayoffName::Basket && self.dims != [s.len()] {
                return Err(config_err("sigma", "a volatility list needs dims = [its length]"));
            }
        }
        if self.payoff == PayoffName::Basket {
            let probe = match &self.sigma {
                Sigma::Scalar(s) => vec![*s],
                Sigma::List(s) => s.clone(),
            };
            Payoff::basket_call(probe, self.rate, self.maturity, self.strike)
                .map_err(|e| config_err("sigma", e.to_string()))?;
        }
        Ok(ResolvedConfig { cfg: self.clone(), matrix, q_file, linear_a })
    }
}

fn parse_column(text: &str) -> std::result::Result<Vec<f64>, String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| l.parse::<f64>().map_err(|e| format!("{l:?}: {e}")))
        .collect()
}

/// A config whose referenced files have been read and validated.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub cfg: ExperimentConfig,
    matrix: Option<CovarianceSpec>,
    q_file: Option<QSchedule>,
    linear_a: Option<Vec<f64>>,
}

/// Everything needed to simulate at one dimension.
pub struct Problem {
    pub spec: CovarianceSpec,
    pub payoff: Payoff,
    pub factor: FactorMatrix,
    pub schedule: QSchedule,
}

impl ResolvedConfig {
    pub fn covariance(&self, d: usize) -> Result<CovarianceSpec> {
        let c = &self.cfg;
        match c.family {
            FamilyKind::EigenDecay => {
                let orient = match c.orientation {
                    OrientationKind::Diagonal => Orientation::Diagonal,
                    OrientationKind::Rotation => Orientation::RandomRotation(c.rotation_seed),
                };
                make_eigen_decay(d, c.gamma, c.lambda1, orient)
            }
            FamilyKind::Equicorrelation => make_equicorrelation(d, c.rho),
            FamilyKind::File => Ok(self.matrix.clone().expect("resolved matrix")),
        }
    }

    pub fn payoff(&self, d: usize) -> Result<Payoff> {
        let c = &self.cfg;
        match c.payoff {
            PayoffName::Constant => Payoff::constant(d, c.constant),
            PayoffName::Linear => Payoff::linear(match (&self.linear_a, c.linear_a.as_str()) {
                (Some(a), _) => a.clone(),
                (None, "ones") => vec![1.0; d],
                (None, "e1") => (0..d).map(|i| if i == 0 { 1.0 } else { 0.0 }).collect(),
                _ => vec![1.0 / (d as f64).sqrt(); d],
            }),
            PayoffName::Basket => {
                let sigmas = match &c.sigma {
                    Sigma::Scalar(s) => vec![*s; d],
                    Sigma::List(s) => s.clone(),
                };
                Payoff::basket_call(sigmas, c.rate, c.maturity, c.strike)
            }
        }
    }

    pub fn factor(&self, spec: &CovarianceSpec) -> Result<FactorMatrix> {
        match self.cfg.factor {
            FactorKind::Cholesky => cholesky_factor(spec),
            FactorKind::CholeskyPermute => Ok(permute_decreasing(&cholesky_factor(spec)?)),
            FactorKind::Pca => pca_factor(spec),
            FactorKind::PcaPermuteCheck => {
                let fac = pca_factor(spec)?;
                let permuted = permute_decreasing(&fac);
                if let Construction::Permuted { perm, .. } = permuted.construction() {
                    if perm.iter().enumerate().any(|(i, &p)| i != p) {
                        return Err(Error::NotPsd {
                            detail: "PCA columns were not in decreasing order".into(),
                        });
                    }
                }
                Ok(fac)
            }
        }
    }

    pub fn schedule(&self, fac: &FactorMatrix) -> Result<QSchedule> {
        match self.cfg.q.as_str() {
            "harmonic" => schedule::harmonic(fac.dim()),
            "factor" => schedule::from_factor(fac),
            _ => Ok(self.q_file.clone().expect("resolved q file")),
        }
    }

    pub fn problem(&self, d: usize) -> Result<Problem> {
        let spec = self.covariance(d)?;
        let payoff = self.payoff(d)?;
        let factor = self.factor(&spec)?;
        let schedule = self.schedule(&factor)?;
        Ok(Problem { spec, payoff, factor, schedule })
    }

    fn family_label(&self, spec: &CovarianceSpec) -> String {
        spec.family().label()
    }
}

/// Output of a sweep: CSV text plus the dimensions whose row failed.
#[derive(Debug, Default)]
pub struct SweepOutput {
    pub csv: String,
    pub reports: Vec<String>,
    pub failures: Vec<(usize, Error)>,
}

pub const ESTIMATE_HEADER: &str = "method,d,family,factor,qkind,R,estimate,stderr,var_fn_hat,mean_ops,mean_depth,seed,total_ops,setup_ops,variance_ratio,fingerprint";

/// Labels like `eigen-decay(gamma=-2,lambda1=1,diag)` carry commas; swap
/// them so rows split cleanly.
fn csv_field(s: &str) -> String {
    s.replace(',', ";")
}

fn estimate_row(out: &mut String, r: &EstimatorResult, family: &str, ratio: f64) {
    let d = r.dim as u64;
    let _ = writeln!(
        out,
        "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
        r.method.label(),
        r.dim,
        csv_field(family),
        csv_field(&r.factor),
        r.qkind,
        r.count,
        r.estimate,
        r.stderr,
        r.var_hat,
        r.mean_ops,
        r.mean_depth,
        r.seed,
        r.total_ops,
        d * d * d,
        ratio,
        r.config,
    );
}

/// Both estimators at one dimension, standard MC matched to GRDR's cost.
pub struct Comparison {
    pub grdr: EstimatorResult,
    pub mc: EstimatorResult,
    /// `Var(MC estimator) / Var(GRDR estimator)` at the matched budget.
    pub variance_ratio: f64,
}

pub fn compare_at(resolved: &ResolvedConfig, d: usize) -> Result<Comparison> {
    let cfg = &resolved.cfg;
    let p = resolved.problem(d)?;
    let grdr = replicate_grdr_verified(
        &p.payoff,
        &p.factor,
        &p.schedule,
        cfg.replications,
        cfg.seed,
        cfg.debug_verify,
    )?;
    let n_mc = match cfg.matching {
        Matching::Ops => {
            let per = mc_ops_per_sample(&p.payoff, d) as f64;
            ((grdr.total_ops as f64 / per).round() as u64).max(1)
        }
        Matching::Samples => (cfg.replications * p.schedule.n_iterations()) as u64,
    };
    let mc = standard_mc(&p.payoff, &p.factor, n_mc, RngStream::new(cfg.seed, MC_STREAM))?;
    let grdr_var = grdr.var_hat / grdr.count as f64;
    let mc_var = mc.var_hat / mc.count as f64;
    let variance_ratio = mc_var / grdr_var;
    Ok(Comparison { grdr, mc, variance_ratio })
}

/// One `grdr` and one `mc` row per dimension.
pub fn run_estimate(resolved: &ResolvedConfig) -> SweepOutput {
    let mut out = SweepOutput { csv: format!("{ESTIMATE_HEADER}\n"), ..Default::default() };
    for &d in &resolved.cfg.dims {
        let row = compare_at(resolved, d).and_then(|cmp| {
            let family = resolved.family_label(&resolved.covariance(d)?);
            let report = efficiency_report(&cmp.mc, &cmp.grdr)?;
            Ok((cmp, family, report))
        });
        match row {
            Ok((cmp, family, report)) => {
                info!("d = {d}: variance ratio {:.3}", cmp.variance_ratio);
                estimate_row(&mut out.csv, &cmp.grdr, &family, cmp.variance_ratio);
                estimate_row(&mut out.csv, &cmp.mc, &family, cmp.variance_ratio);
                out.reports.push(report.to_json());
            }
            Err(e) => {
                error!("d = {d}: {e}");
                out.failures.push((d, e));
            }
        }
    }
    out
}

pub const BOUNDS_HEADER: &str = "d,kappa,kappa_provenance,sigma_bound,varfn_bound_factor,varfn_bound_pca,varfn_bound_harmonic,harmonic_cap,generic_curve_bound,n_varfn_bound,curve_source,grdr_var_fn_hat,n_iterations,check,seed,fingerprint";
pub const CURVE_HEADER: &str = "d,source,i,C_hat,stderr,lemma41_bound";

fn resolve_kappa(resolved: &ResolvedConfig, p: &Problem) -> Result<Kappa> {
    let cfg = &resolved.cfg;
    if let Some(v) = cfg.kappa {
        return Ok(Kappa { value: v, provenance: KappaProvenance::Supplied });
    }
    if cfg.probe_kappa {
        let v = probe_kappa(&p.payoff, &p.spec, cfg.probes, cfg.seed)?;
        return Ok(Kappa { value: v, provenance: KappaProvenance::Probed });
    }
    if let PayoffKind::Linear(a) = p.payoff.kind() {
        // ‖a‖ is the exact Lipschitz constant of x ↦ aᵀx.
        let v = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        return Ok(Kappa { value: v, provenance: KappaProvenance::Supplied });
    }
    Err(config_err("kappa", "supply kappa or set probe_kappa = true for non-linear payoffs"))
}

fn curve_for(resolved: &ResolvedConfig, p: &Problem) -> Result<CouplingCurve> {
    match p.payoff.kind() {
        PayoffKind::Linear(a) => coupling_curve_linear(a, &p.factor),
        _ => coupling_curve_empirical(
            &p.payoff,
            &p.factor,
            &default_index_grid(p.factor.dim()),
            resolved.cfg.pairs,
            resolved.cfg.seed,
        ),
    }
}

fn append_curve(out: &mut String, d: usize, curve: &CouplingCurve, lemma: &[f64]) {
    let source = match curve.source {
        CurveSource::AnalyticLinear => "analytic",
        CurveSource::Empirical { .. } => "empirical",
    };
    for line in curve.to_csv(Some(lemma)).lines().skip(1) {
        let _ = writeln!(out, "{d},{source},{line}");
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Bound reports per dimension, plus the coupling curves they were built on.
pub fn run_bounds(resolved: &ResolvedConfig) -> (SweepOutput, String) {
    let cfg = &resolved.cfg;
    let mut out = SweepOutput { csv: format!("{BOUNDS_HEADER}\n"), ..Default::default() };
    let mut curves = format!("{CURVE_HEADER}\n");
    for &d in &cfg.dims {
        let row = (|| -> Result<_> {
            let p = resolved.problem(d)?;
            let kappa = resolve_kappa(resolved, &p)?;
            let curve = curve_for(resolved, &p)?;
            let report = bound_report(&p.factor, &p.schedule, Some(&curve), kappa)?;
            let grdr = replicate_grdr_verified(
                &p.payoff,
                &p.factor,
                &p.schedule,
                cfg.replications,
                cfg.seed,
                cfg.debug_verify,
            )?;
            Ok((p, kappa, curve, report, grdr))
        })();
        match row {
            Ok((p, kappa, curve, report, grdr)) => {
                let lemma = bound_lemma41(&p.factor, kappa.value);
                append_curve(&mut curves, d, &curve, &lemma);
                // Only the κ-based bound is checked; the curve-based ones are
                // exact for linear payoffs and shown for comparison.
                let allowance = 5.0 * grdr.var_hat * (2.0 / (grdr.count as f64 - 1.0)).sqrt();
                let holds = grdr.var_hat <= report.varfn_bound_factor + allowance;
                let check = match (holds, kappa.provenance) {
                    (true, _) => "pass",
                    (false, KappaProvenance::Probed) => "inconclusive",
                    (false, KappaProvenance::Supplied) => "fail",
                };
                let h = report.varfn_bound_harmonic;
                let _ = writeln!(
                    out.csv,
                    "{},{},{:?},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                    d,
                    kappa.value,
                    kappa.provenance,
                    report.sigma_bound,
                    report.varfn_bound_factor,
                    opt(report.varfn_bound_pca),
                    opt(h.map(|h| h.bound)),
                    opt(h.map(|h| h.cap)),
                    opt(report.generic_curve_bound),
                    opt(report.n_varfn_bound),
                    match curve.source {
                        CurveSource::AnalyticLinear => "analytic",
                        CurveSource::Empirical { .. } => "empirical",
                    },
                    grdr.var_hat,
                    p.schedule.n_iterations(),
                    check,
                    cfg.seed,
                    grdr.config,
                );
                out.reports.push(serde_json::to_string_pretty(&report).expect("report serializes"));
            }
            Err(e) => {
                error!("d = {d}: {e}");
                out.failures.push((d, e));
            }
        }
    }
    (out, curves)
}

/// Coupling curves only: the exact oracle for linear payoffs and an
/// empirical estimate for every payoff.
pub fn run_curves(resolved: &ResolvedConfig) -> SweepOutput {
    let cfg = &resolved.cfg;
    let mut out = SweepOutput { csv: format!("{CURVE_HEADER}\n"), ..Default::default() };
    for &d in &cfg.dims {
        let row = (|| -> Result<_> {
            let p = resolved.problem(d)?;
            let kappa = resolve_kappa(resolved, &p).ok();
            let lemma = kappa.map(|k| bound_lemma41(&p.factor, k.value)).unwrap_or_default();
            let mut curves = Vec::new();
            if let PayoffKind::Linear(a) = p.payoff.kind() {
                curves.push(coupling_curve_linear(a, &p.factor)?);
            }
            curves.push(coupling_curve_empirical(
                &p.payoff,
                &p.factor,
                &default_index_grid(d),
                cfg.pairs,
                cfg.seed,
            )?);
            Ok((curves, lemma))
        })();
        match row {
            Ok((curves, lemma)) => {
                for c in &curves {
                    if lemma.is_empty() {
                        let source = match c.source {
                            CurveSource::AnalyticLinear => "analytic",
                            CurveSource::Empirical { .. } => "empirical",
                        };
                        for line in c.to_csv(None).lines().skip(1) {
                            let _ = writeln!(out.csv, "{d},{source},{line}");
                        }
                    } else {
                        append_curve(&mut out.csv, d, c, &lemma);
                    }
                }
            }
            Err(e) => {
                error!("d = {d}: {e}");
                out.failures.push((d, e));
            }
        }
    }
    out
}

/// Result of one self-test check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Fixed-seed invariant checks at small scale.
pub fn run_selftest() -> Vec<CheckOutcome> {
    let mut checks = Vec::new();
    let mut record = |name: &'static str, r: Result<(bool, String)>| {
        let (passed, detail) = r.unwrap_or_else(|e| (false, e.to_string()));
        checks.push(CheckOutcome { name, passed, detail });
    };

    record("factor residuals", (|| {
        let mut worst = 0.0f64;
        for (k, d) in [2usize, 8, 32].into_iter().enumerate() {
            for spec in [
                make_eigen_decay(d, -2.0, 1.0, Orientation::RandomRotation(k as u64))?,
                make_equicorrelation(d, 0.4)?,
            ] {
                for fac in [cholesky_factor(&spec)?, pca_factor(&spec)?] {
                    worst = worst.max(fac.residual(&spec) / spec.frobenius().max(1.0));
                }
            }
        }
        Ok((worst <= 1e-8, format!("max relative residual {worst:e}")))
    })());

    record("schedule laws", (|| {
        let spec = make_eigen_decay(32, -2.0, 1.0, Orientation::Diagonal)?;
        let from_pca = schedule::from_factor(&pca_factor(&spec)?)?;
        let harm = schedule::harmonic(32)?;
        let same = from_pca
            .q()
            .iter()
            .zip(harm.q())
            .all(|(a, b)| (a - b).abs() <= 4.0 * f64::EPSILON * b);
        let mut stream = RngStream::new(5, 0);
        let draws = 200_000;
        let total: u64 = (0..draws).map(|_| harm.sample_depth(stream.uniform()) as u64).sum();
        let mean = total as f64 / draws as f64;
        let sd = (harm.depth_second_moment() - harm.expected_depth().powi(2)).sqrt();
        let ok_mean = (mean - harm.expected_depth()).abs() <= 4.0 * sd / (draws as f64).sqrt();
        let n = harm.n_iterations() as f64;
        let ok_n = n * harm.expected_depth() >= 32.0 && (n - 1.0) * harm.expected_depth() < 32.0;
        Ok((same && ok_mean && ok_n, format!("E(N) {mean:.4} vs {:.4}", harm.expected_depth())))
    })());

    record("unbiasedness", (|| {
        let spec = make_eigen_decay(8, -2.0, 1.0, Orientation::RandomRotation(3))?;
        let fac = pca_factor(&spec)?;
        let q = schedule::from_factor(&fac)?;
        let g = Payoff::linear(vec![1.0; 8])?;
        let r = replicate_grdr_verified(&g, &fac, &q, 4000, 7, true)?;
        let one = CovarianceSpec::from_matrix(nalgebra::DMatrix::identity(1, 1))?;
        let basket = Payoff::basket_call(vec![0.2], 0.0, 1.0, 1.0)?;
        let f1 = cholesky_factor(&one)?;
        let rb = replicate_grdr_verified(&basket, &f1, &schedule::harmonic(1)?, 4000, 8, false)?;
        let oracle = basket.analytic_mean(&one).unwrap_or(f64::NAN);
        let ok = r.estimate.abs() <= 4.0 * r.stderr && (rb.estimate - oracle).abs() <= 4.0 * rb.stderr;
        Ok((ok, format!("linear {:.4}±{:.4}, basket {:.5} vs {oracle:.5}", r.estimate, r.stderr, rb.estimate)))
    })());

    record("variance bounds", (|| {
        let mut detail = String::new();
        let mut ok = true;
        for (k, d) in [4usize, 16].into_iter().enumerate() {
            let spec = make_eigen_decay(d, -2.0, 1.0, Orientation::RandomRotation(10 + k as u64))?;
            let fac = pca_factor(&spec)?;
            let q = schedule::from_factor(&fac)?;
            let a: Vec<f64> = (0..d).map(|i| 1.0 - 0.1 * i as f64).collect();
            let g = Payoff::linear(a.clone())?;
            let curve = coupling_curve_linear(&a, &fac)?;
            let r = replicate_grdr_verified(&g, &fac, &q, 4000, 20 + k as u64, false)?;
            let slack = 1.0 + 5.0 * (2.0 / (r.count as f64 - 1.0)).sqrt();
            let n = q.n_iterations() as f64;
            let n_var_bound = analysis::bound_n_var(&curve, &q)?;
            let curve_bound = analysis::bound_eq6(&curve, &q)?;
            ok &= n * r.var_hat <= n_var_bound * slack && r.var_hat <= curve_bound * slack;
            let _ = write!(detail, "d={d}: nVar {:.4} ≤ {n_var_bound:.4}; ", n * r.var_hat);
        }
        Ok((ok, detail))
    })());

    record("determinism", (|| {
        let mut cfg = ExperimentConfig::default();
        cfg.dims = vec![4, 8];
        cfg.replications = 200;
        let resolved = cfg.resolve()?;
        let a = run_estimate(&resolved);
        let b = run_estimate(&resolved);
        Ok((a.csv == b.csv && a.failures.is_empty(), format!("{} bytes", a.csv.len())))
    })());

    checks
}

#[cfg(test)]
mod tests {
    use super::*;

    fn overrides(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn parses_defaults_and_overrides() {
        let cfg = parse_config(
            "family = \"equicorrelation\"\nrho = 0.3\ndims = [4, 8]\nmatch = \"samples\"\n",
            &overrides(&[("dims", "2,3"), ("factor", "cholesky+permute"), ("seed", "9")]),
        )
        .unwrap();
        assert_eq!(cfg.family, FamilyKind::Equicorrelation);
        assert_eq!(cfg.dims, vec![2, 3]);
        assert_eq!(cfg.factor, FactorKind::CholeskyPermute);
        assert_eq!(cfg.matching, Matching::Samples);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.q, "factor");
    }

    #[test]
    fn reports_field_paths() {
        let err = parse_config("dims = [8, 4]", &BTreeMap::new()).unwrap_err();
        assert!(matches!(&err, Error::Config { field, .. } if field == "dims"), "{err}");
        let err = parse_config("bogus = 1", &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        let err = parse_config("family = \"circulant\"", &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("circulant"), "{err}");
        let err = parse_config("family = \"file\"", &BTreeMap::new()).unwrap_err();
        assert!(err.to_string().contains("matrix_file"), "{err}");
    }

    #[test]
    fn missing_and_corrupt_files_fail_before_running() {
        let dir = tempfile::tempdir().unwrap();
        let qpath = dir.path().join("q.txt");
        std::fs::write(&qpath, "1\n0.5\n0.7\n").unwrap();
        let cfg = parse_config(
            &format!("q = {:?}\ndims = [3]", qpath.display().to_string()),
            &BTreeMap::new(),
        )
        .unwrap();
        let err = cfg.resolve().unwrap_err();
        assert!(matches!(&err, Error::Config { field, reason } if field == "q" && reason.contains("nonincreasing")), "{err}");

        let cfg = parse_config(
            "family = \"file\"\nmatrix_file = \"/nonexistent/m.txt\"\ndims = [2]",
            &BTreeMap::new(),
        )
        .unwrap();
        assert!(matches!(cfg.resolve().unwrap_err(), Error::Config { field, .. } if field == "matrix_file"));
    }

    #[test]
    fn constant_payoff_rows_are_exact() {
        let cfg = parse_config(
            "payoff = \"constant\"\nconstant = 2.5\ndims = [3, 5]\nreplications = 50",
            &BTreeMap::new(),
        )
        .unwrap();
        let out = run_estimate(&cfg.resolve().unwrap());
        assert!(out.failures.is_empty());
        let rows: Vec<&str> = out.csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 4);
        for row in rows {
            let cols: Vec<&str> = row.split(',').collect();
            assert_eq!(cols[6], "2.5", "{row}");
            assert_eq!(cols[8], "0", "{row}");
        }
    }

    #[test]
    fn estimate_rows_are_cost_matched() {
        let cfg = parse_config(
            "gamma = -3\norientation = \"rotation\"\ndims = [4, 16]\nreplications = 300",
            &BTreeMap::new(),
        )
        .unwrap();
        let resolved = cfg.resolve().unwrap();
        for d in [4, 16] {
            let cmp = compare_at(&resolved, d).unwrap();
            let diff = (cmp.mc.total_ops as f64 - cmp.grdr.total_ops as f64).abs();
            assert!(diff <= 0.05 * cmp.grdr.total_ops as f64);
        }
    }

    #[test]
    fn file_inputs_drive_the_sweep() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.txt");
        let spec = make_eigen_decay(3, -1.0, 2.0, Orientation::RandomRotation(4)).unwrap();
        matrix_io::write_covariance(&spec, &m).unwrap();
        let a = dir.path().join("a.txt");
        std::fs::write(&a, "1\n-1\n0.5\n").unwrap();
        let q = dir.path().join("q.txt");
        std::fs::write(&q, "1\n1\n1\n").unwrap();
        let text = format!(
            "family = \"file\"\nmatrix_file = {:?}\nlinear_a = {:?}\nq = {:?}\ndims = [3]\nreplications = 100",
            m.display().to_string(),
            a.display().to_string(),
            q.display().to_string()
        );
        let resolved = parse_config(&text, &BTreeMap::new()).unwrap().resolve().unwrap();
        let (bounds, curves) = run_bounds(&resolved);
        assert!(bounds.failures.is_empty(), "{:?}", bounds.failures);
        // q ≡ 1: the curve bound telescopes to 2·C(0).
        let row: Vec<&str> = bounds.csv.lines().nth(1).unwrap().split(',').collect();
        let curve_bound: f64 = row[8].parse().unwrap();
        let c0: f64 = curves.lines().nth(1).unwrap().split(',').nth(3).unwrap().parse().unwrap();
        assert!((curve_bound - 2.0 * c0).abs() <= 1e-12 * curve_bound);
    }

    #[test]
    fn bounds_for_linear_diag_spectrum() {
        let cfg = parse_config(
            "gamma = -2\ndims = [4]\nlinear_a = \"ones\"\nkappa = 1.0\nreplications = 100",
            &BTreeMap::new(),
        )
        .unwrap();
        let (bounds, _) = run_bounds(&cfg.resolve().unwrap());
        let row: Vec<&str> = bounds.csv.lines().nth(1).unwrap().split(',').collect();
        let v: f64 = row[4].parse().unwrap();
        assert!((v - 0.5 * (25.0f64 / 12.0).powi(2)).abs() < 1e-12);
    }

    #[test]
    fn bounds_need_kappa_for_nonlinear() {
        let cfg = parse_config("payoff = \"basket\"\ndims = [2]\nreplications = 10", &BTreeMap::new())
            .unwrap();
        let (out, _) = run_bounds(&cfg.resolve().unwrap());
        assert_eq!(out.failures.len(), 1);
    }

    #[test]
    fn numerical_failure_skips_only_that_row() {
        // Rank-one equicorrelation: the factor schedule is undefined.
        let cfg = parse_config(
            "family = \"equicorrelation\"\nrho = 1.0\ndims = [1, 3]\nreplications = 10",
            &BTreeMap::new(),
        )
        .unwrap();
        let out = run_estimate(&cfg.resolve().unwrap());
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].0, 3);
        assert!(out.failures[0].1.is_numerical());
        assert_eq!(out.csv.lines().count(), 3);
    }

    #[test]
    fn curves_include_oracle_for_linear() {
        let cfg = parse_config("dims = [3]\npairs = 500", &BTreeMap::new()).unwrap();
        let out = run_curves(&cfg.resolve().unwrap());
        assert!(out.csv.contains("3,analytic,3,0,"));
        assert!(out.csv.lines().any(|l| l.starts_with("3,empirical,0,")));
    }
}
