use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use grdr::experiment::{self, ExperimentConfig, ResolvedConfig, SweepOutput};
use grdr::Error;

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_SELFTEST: u8 = 3;

#[derive(Parser)]
#[command(name = "grdr", version, about = "GRDR vs standard Monte Carlo for Gaussian expectations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run GRDR and cost-matched standard MC over the dimension sweep.
    Estimate(RunArgs),
    /// Evaluate the variance bounds and write the coupling curves.
    Bounds(RunArgs),
    /// Write coupling curves C(i) only.
    Curves(RunArgs),
    /// Run the fixed-seed invariant suite.
    Selftest,
}

#[derive(Args)]
struct RunArgs {
    /// TOML config file; omitted keys take their defaults.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[command(flatten)]
    overrides: Overrides,
}

/// Per-key overrides of the config file.
#[derive(Args, Default)]
#[command(rename_all = "snake_case")]
struct Overrides {
    #[arg(long)]
    family: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    gamma: Option<String>,
    #[arg(long)]
    lambda1: Option<String>,
    #[arg(long)]
    orientation: Option<String>,
    #[arg(long)]
    rotation_seed: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    rho: Option<String>,
    #[arg(long)]
    matrix_file: Option<String>,
    #[arg(long)]
    payoff: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    constant: Option<String>,
    #[arg(long)]
    linear_a: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long, allow_hyphen_values = true)]
    rate: Option<String>,
    #[arg(long)]
    maturity: Option<String>,
    #[arg(long)]
    strike: Option<String>,
    #[arg(long)]
    factor: Option<String>,
    #[arg(long)]
    q: Option<String>,
    #[arg(long)]
    replications: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    dims: Option<String>,
    #[arg(long = "match")]
    matching: Option<String>,
    #[arg(long)]
    debug_verify: Option<String>,
    #[arg(long)]
    kappa: Option<String>,
    #[arg(long)]
    probe_kappa: Option<String>,
    #[arg(long)]
    probes: Option<String>,
    #[arg(long)]
    pairs: Option<String>,
    #[arg(long)]
    output: Option<String>,
    #[arg(long)]
    curves_output: Option<String>,
    #[arg(long)]
    report_output: Option<String>,
}

impl Overrides {
    fn to_map(&self) -> BTreeMap<String, String> {
        let quote = |s: &str| format!("{s:?}");
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: &Option<String>, as_string: bool| {
            if let Some(v) = v {
                m.insert(k.to_string(), if as_string { quote(v) } else { v.clone() });
            }
        };
        put("family", &self.family, true);
        put("gamma", &self.gamma, false);
        put("lambda1", &self.lambda1, false);
        put("orientation", &self.orientation, true);
        put("rotation_seed", &self.rotation_seed, false);
        put("rho", &self.rho, false);
        put("matrix_file", &self.matrix_file, true);
        put("payoff", &self.payoff, true);
        put("constant", &self.constant, false);
        put("linear_a", &self.linear_a, true);
        put("sigma", &self.sigma, false);
        put("rate", &self.rate, false);
        put("maturity", &self.maturity, false);
        put("strike", &self.strike, false);
        put("factor", &self.factor, true);
        put("q", &self.q, true);
        put("replications", &self.replications, false);
        put("seed", &self.seed, false);
        put("dims", &self.dims, false);
        put("match", &self.matching, true);
        put("debug_verify", &self.debug_verify, false);
        put("kappa", &self.kappa, false);
        put("probe_kappa", &self.probe_kappa, false);
        put("probes", &self.probes, false);
        put("pairs", &self.pairs, false);
        put("output", &self.output, true);
        put("curves_output", &self.curves_output, true);
        put("report_output", &self.report_output, true);
        m
    }
}

fn load(args: &RunArgs) -> Result<ResolvedConfig, Error> {
    let overrides = args.overrides.to_map();
    let cfg = match &args.config {
        Some(path) => experiment::load_config(path, &overrides)?,
        None => experiment::parse_config("", &overrides)?,
    };
    cfg.resolve()
}

fn emit(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(Error::from),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn finish(out: &SweepOutput, cfg: &ExperimentConfig) -> Result<ExitCode, Error> {
    if let Some(p) = &cfg.report_output {
        std::fs::write(p, format!("[{}]\n", out.reports.join(",\n")))?;
    }
    if out.failures.is_empty() {
        return Ok(ExitCode::SUCCESS);
    }
    for (d, e) in &out.failures {
        eprintln!("d = {d}: {e}");
    }
    let numerical = out.failures.iter().all(|(_, e)| e.is_numerical());
    Ok(ExitCode::from(if numerical { EXIT_NUMERICAL } else { EXIT_VALIDATION }))
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Estimate(args) => {
            let resolved = load(&args)?;
            let out = experiment::run_estimate(&resolved);
            emit(resolved.cfg.output.as_deref(), &out.csv)?;
            finish(&out, &resolved.cfg)
        }
        Command::Bounds(args) => {
            let resolved = load(&args)?;
            let (out, curves) = experiment::run_bounds(&resolved);
            emit(resolved.cfg.output.as_deref(), &out.csv)?;
            if let Some(p) = &resolved.cfg.curves_output {
                std::fs::write(p, &curves)?;
            }
            finish(&out, &resolved.cfg)
        }
        Command::Curves(args) => {
            let resolved = load(&args)?;
            let out = experiment::run_curves(&resolved);
            let path = resolved.cfg.curves_output.as_deref().or(resolved.cfg.output.as_deref());
            emit(path, &out.csv)?;
            finish(&out, &resolved.cfg)
        }
        Command::Selftest => {
            let checks = experiment::run_selftest();
            let mut failed = false;
            for c in &checks {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
                failed |= !c.passed;
            }
            Ok(if failed { ExitCode::from(EXIT_SELFTEST) } else { ExitCode::SUCCESS })
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_VALIDATION })
        }
    }
}
