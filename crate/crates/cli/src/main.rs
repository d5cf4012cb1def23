use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use aoj_core::harness::{self, PolicyContext, PolicyKind};
use aoj_core::mdp::{write_values_csv, RviOptions, SolvedArm, TruncatedSpace};
use aoj_core::ngm::{DualOptions, NgmArtifact};
use aoj_core::sim::run_traced;
use aoj_core::whittle::{whittle_index, WimwfIndexCache, WimwfOptions};
use aoj_core::{Error, ServiceDistribution, SystemConfig};

#[derive(Parser)]
#[command(name = "aoj", version, about = "Age-of-job scheduling simulator and policy solvers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum IndexPolicy {
    Wi,
    Wimwf,
}

#[derive(Subcommand)]
enum Command {
    /// Run one policy on one (possibly replicated) system and print metrics as JSON.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        policy: PolicyKind,
        #[arg(long, default_value_t = 1)]
        r: usize,
        #[arg(long, default_value_t = 200_000)]
        horizon: u64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Truncation bound for wimwf.
        #[arg(long, default_value_t = 50)]
        ymax: u64,
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Solved tables from `solve-ngm`; required for ngm.
        #[arg(long)]
        artifact: Option<PathBuf>,
    },
    /// Run every (policy, r, seed) cell and write a CSV.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        policies: Vec<PolicyKind>,
        #[arg(long = "r-values", value_delimiter = ',', default_value = "1,2,3,4")]
        r_values: Vec<usize>,
        /// Comma list; `a-b` expands to an inclusive range.
        #[arg(long, default_value = "1-10")]
        seeds: String,
        #[arg(long, default_value_t = 200_000)]
        horizon: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        ymax: Option<u64>,
        #[arg(long = "ngm-artifact")]
        ngm_artifact: Option<PathBuf>,
    },
    /// Solve the relaxed dual and the net-gain tables, and save them.
    SolveNgm {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 10_000)]
        ymax: u64,
        #[arg(long, default_value_t = 200)]
        iters: usize,
        #[arg(long, default_value_t = aoj_core::ngm::DEFAULT_STEP)]
        h: f64,
        /// Per-network step scales; default to the server step scale.
        #[arg(long = "h-bar", value_delimiter = ',')]
        h_bar: Option<Vec<f64>>,
        #[arg(long)]
        out: PathBuf,
        /// Directory for per-user `delta,progress,value,action` dumps.
        #[arg(long = "dump-values")]
        dump_values: Option<PathBuf>,
    },
    /// Tabulate wi or wimwf indices.
    Index {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        policy: IndexPolicy,
        #[arg(long = "dump-index")]
        dump_index: PathBuf,
        #[arg(long, default_value_t = 50)]
        ymax: u64,
        /// Largest age to tabulate; defaults to the truncation bound.
        #[arg(long = "max-delta")]
        max_delta: Option<u64>,
    },
    /// Check a config file and report advisories.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

/// An error with the exit code it maps to.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::InvalidConfig(_) | Error::NotGeometric { .. } | Error::Precondition(_) => 2,
            Error::MissingArtifact(_) => 3,
            Error::NoConvergence { .. } => 4,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn fail(code: u8, message: impl Into<String>) -> Failure {
    Failure {
        code,
        message: message.into(),
    }
}

fn load_config(path: &Path) -> Result<SystemConfig, Failure> {
    SystemConfig::load(path).map_err(|e| fail(2, e.to_string()))
}

fn load_artifact(path: &Path) -> Result<NgmArtifact, Failure> {
    NgmArtifact::load(path).map_err(|e| fail(3, e.to_string()))
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| fail(1, format!("{}: {e}", path.display())))
}

fn io_fail(path: &Path) -> impl Fn(std::io::Error) -> Failure + '_ {
    move |e| fail(1, format!("{}: {e}", path.display()))
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, Failure> {
    let bad = || fail(2, format!("bad seed list {text:?}"));
    let mut seeds = Vec::new();
    for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let (a, b): (u64, u64) = (a.parse().map_err(|_| bad())?, b.parse().map_err(|_| bad())?);
                if a > b {
                    return Err(bad());
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| bad())?),
        }
    }
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

fn context(base: &SystemConfig, ymax: u64, artifact: Option<&Path>) -> Result<PolicyContext, Failure> {
    let wimwf = WimwfOptions {
        y_max: ymax,
        ..WimwfOptions::default()
    };
    let ctx = PolicyContext::new(base.clone(), wimwf)?;
    Ok(match artifact {
        Some(path) => ctx.with_ngm(load_artifact(path)?, RviOptions::default())?,
        None => ctx,
    })
}

#[allow(clippy::too_many_arguments)]
fn simulate(
    config: &Path,
    policy: PolicyKind,
    r: usize,
    horizon: u64,
    seed: u64,
    ymax: u64,
    trace: Option<&Path>,
    artifact: Option<&Path>,
) -> Result<(), Failure> {
    let base = load_config(config)?;
    if policy == PolicyKind::Ngm && artifact.is_none() {
        return Err(fail(3, "ngm needs --artifact (see `solve-ngm`)"));
    }
    let ctx = context(&base, ymax, artifact)?;
    let scaled = harness::scale(&base, r)?;
    let policy_impl = ctx.policy(policy)?;
    let metrics = match trace {
        Some(path) => {
            let mut out = create(path)?;
            let m = run_traced(&scaled, policy_impl.as_ref(), horizon, seed, Some(&mut out as &mut dyn Write))?;
            out.flush().map_err(io_fail(path))?;
            m
        }
        None => run_traced(&scaled, policy_impl.as_ref(), horizon, seed, None)?,
    };
    let report = json!({
        "policy": policy.name(),
        "r": r,
        "seed": seed,
        "normalized_age": metrics.avg_weighted_age / r as f64,
        "metrics": metrics,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("metrics serialize"));
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn sweep(
    config: &Path,
    policies: &[PolicyKind],
    r_values: &[usize],
    seeds: &str,
    horizon: u64,
    out: &Path,
    ymax: Option<u64>,
    artifact: Option<&Path>,
) -> Result<(), Failure> {
    let base = load_config(config)?;
    let seeds = parse_seeds(seeds)?;
    if policies.contains(&PolicyKind::Ngm) && artifact.is_none() {
        return Err(fail(3, "ngm needs --ngm-artifact (see `solve-ngm`)"));
    }
    let ctx = context(&base, ymax.unwrap_or(50), artifact)?;
    let results = harness::sweep(&ctx, policies, r_values, &seeds, horizon)?;
    harness::emit_csv(&results, out)?;
    println!("policy,r,mean_normalized_age");
    for ((policy, r), mean) in harness::mean_normalized(&results) {
        println!("{policy},{r},{}", harness::sig10(mean));
    }
    Ok(())
}

fn solve_ngm(
    config: &Path,
    ymax: u64,
    iters: usize,
    h: f64,
    h_bar: Option<Vec<f64>>,
    out: &Path,
    dump_values: Option<&Path>,
) -> Result<(), Failure> {
    let base = load_config(config)?;
    let mut opts = DualOptions::new(&base, ymax);
    opts.iters = iters;
    opts.h = h;
    opts.h_bar = h_bar.unwrap_or_else(|| vec![h; base.networks.len()]);
    let artifact = NgmArtifact::solve(&base, &opts)?;
    artifact.save(out)?;

    if let Some(dir) = dump_values {
        std::fs::create_dir_all(dir).map_err(io_fail(dir))?;
        for (i, j) in base.user_indices() {
            let net = &base.networks[i];
            let lb = artifact.dual.multipliers.lambda_bar(i);
            let space = TruncatedSpace::compact(ymax, &net.service);
            let arm = SolvedArm::solve(&net.users[j], &net.service, lb, space, &opts.rvi)?;
            let path = dir.join(format!("values_{i}_{j}.csv"));
            let mut w = create(&path)?;
            write_values_csv(&arm.kernel, &arm.values, &mut w).map_err(io_fail(&path))?;
            w.flush().map_err(io_fail(&path))?;
        }
    }

    let last = artifact.dual.trace.last().expect("at least one iteration");
    let report = json!({
        "lambda": artifact.dual.multipliers.lambda,
        "mu": artifact.dual.multipliers.mu,
        "best_dual_value": artifact.dual.best_dual_value(),
        "last_total_activation": last.total_activation,
        "last_network_activation": last.network_activation,
        "key": artifact.key,
    });
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    Ok(())
}

fn index(
    config: &Path,
    policy: IndexPolicy,
    dump: &Path,
    ymax: u64,
    max_delta: Option<u64>,
) -> Result<(), Failure> {
    let base = load_config(config)?;
    let max_delta = max_delta.unwrap_or(ymax);
    let mut out = create(dump)?;
    match policy {
        IndexPolicy::Wi => {
            base.all_geometric()?;
            writeln!(out, "i,j,delta,progress,index,tag").map_err(io_fail(dump))?;
            for (i, j) in base.user_indices() {
                let ServiceDistribution::Geometric { q } = base.networks[i].service else {
                    unreachable!("checked geometric");
                };
                let u = base.user(i, j);
                for d in 0..=max_delta {
                    writeln!(out, "{i},{j},{d},0,{},closed-form", whittle_index(u.w, u.p, q, d))
                        .map_err(io_fail(dump))?;
                }
            }
        }
        IndexPolicy::Wimwf => {
            let cache = Arc::new(WimwfIndexCache::new(
                base,
                WimwfOptions {
                    y_max: ymax,
                    ..WimwfOptions::default()
                },
            )?);
            cache.fill(max_delta.min(ymax))?;
            cache.write_csv(&mut out).map_err(io_fail(dump))?;
        }
    }
    out.flush().map_err(io_fail(dump))?;
    Ok(())
}

fn validate(config: &Path) -> Result<(), Failure> {
    let text = std::fs::read_to_string(config).map_err(|e| fail(2, format!("{}: {e}", config.display())))?;
    let cfg: SystemConfig =
        serde_json::from_str(&text).map_err(|e| fail(2, format!("{}: {e}", config.display())))?;
    let warnings = cfg.validate().map_err(|e| fail(2, e.to_string()))?;
    println!(
        "ok: {} networks, {} users, server capacity {}",
        cfg.networks.len(),
        cfg.num_users(),
        cfg.server_capacity
    );
    for w in warnings {
        println!("warning: {w}");
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            policy,
            r,
            horizon,
            seed,
            ymax,
            trace,
            artifact,
        } => simulate(&config, policy, r, horizon, seed, ymax, trace.as_deref(), artifact.as_deref()),
        Command::Sweep {
            config,
            policies,
            r_values,
            seeds,
            horizon,
            out,
            ymax,
            ngm_artifact,
        } => sweep(&config, &policies, &r_values, &seeds, horizon, &out, ymax, ngm_artifact.as_deref()),
        Command::SolveNgm {
            config,
            ymax,
            iters,
            h,
            h_bar,
            out,
            dump_values,
        } => solve_ngm(&config, ymax, iters, h, h_bar, &out, dump_values.as_deref()),
        Command::Index {
            config,
            policy,
            dump_index,
            ymax,
            max_delta,
        } => index(&config, policy, &dump_index, ymax, max_delta),
        Command::Validate { config } => validate(&config),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
