//! Replicated systems and multi-seed policy sweeps.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maxweight::MaxWeight;
use crate::ngm::{NgmArtifact, NgmPolicy};
use crate::sim::{run, Policy};
use crate::whittle::{WhittlePolicy, WimwfIndexCache, WimwfOptions, WimwfPolicy};
use crate::model::SystemConfig;
use crate::mdp::RviOptions;

/// `r` copies of every network; copy `c` of base network `i` sits at `c N + i`.
pub fn scale(base: &SystemConfig, r: usize) -> Result<SystemConfig> {
    if r == 0 {
        return Err(Error::Precondition("scaling factor must be at least 1".into()));
    }
    Ok(SystemConfig {
        server_capacity: r * base.server_capacity,
        networks: (0..r).flat_map(|_| base.networks.iter().cloned()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScaledConfig {
    pub base: SystemConfig,
    pub r: usize,
    pub config: SystemConfig,
}

impl ScaledConfig {
    pub fn new(base: SystemConfig, r: usize) -> Result<Self> {
        let config = scale(&base, r)?;
        Ok(ScaledConfig { base, r, config })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    Mwl,
    Mwh,
    Ngm,
    Wi,
    Wimwf,
}

impl PolicyKind {
    pub const ALL: [PolicyKind; 5] = [
        PolicyKind::Mwl,
        PolicyKind::Mwh,
        PolicyKind::Ngm,
        PolicyKind::Wi,
        PolicyKind::Wimwf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyKind::Mwl => "mwl",
            PolicyKind::Mwh => "mwh",
            PolicyKind::Ngm => "ngm",
            PolicyKind::Wi => "wi",
            PolicyKind::Wimwf => "wimwf",
        }
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PolicyKind::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown policy {s:?}")))
    }
}

/// Read-only state shared by every cell of a sweep.
pub struct PolicyContext {
    base: SystemConfig,
    ngm: Option<Arc<NgmPolicy>>,
    wimwf: Arc<WimwfIndexCache>,
}

impl PolicyContext {
    pub fn new(base: SystemConfig, wimwf: WimwfOptions) -> Result<Self> {
        let cache = WimwfIndexCache::new(base.clone(), wimwf)?;
        Ok(PolicyContext {
            base,
            ngm: None,
            wimwf: Arc::new(cache),
        })
    }

    pub fn with_ngm(mut self, artifact: NgmArtifact, rvi: RviOptions) -> Result<Self> {
        self.ngm = Some(Arc::new(artifact.into_policy(&self.base, rvi)?));
        Ok(self)
    }

    pub fn base(&self) -> &SystemConfig {
        &self.base
    }

    pub fn wimwf_cache(&self) -> &WimwfIndexCache {
        &self.wimwf
    }

    pub fn policy(&self, kind: PolicyKind) -> Result<Arc<dyn Policy>> {
        Ok(match kind {
            PolicyKind::Mwl => Arc::new(MaxWeight::lyapunov()),
            PolicyKind::Mwh => Arc::new(MaxWeight::heuristic()),
            PolicyKind::Ngm => self
                .ngm
                .clone()
                .ok_or_else(|| Error::MissingArtifact("ngm requires a solved artifact".into()))?,
            PolicyKind::Wi => Arc::new(WhittlePolicy::new(&self.base)?),
            PolicyKind::Wimwf => Arc::new(WimwfPolicy::new(self.wimwf.clone())),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub policy: String,
    pub r: usize,
    pub seed: u64,
    #[serde(rename = "T")]
    pub horizon: u64,
    pub avg_weighted_age: f64,
    pub normalized_age: f64,
    pub wall_time_s: f64,
}

/// Every `(policy, r, seed)` cell for `horizon` slots, sorted by that key.
/// Policies share draw streams for a fixed `(r, seed)`.
pub fn sweep(
    ctx: &PolicyContext,
    kinds: &[PolicyKind],
    r_values: &[usize],
    seeds: &[u64],
    horizon: u64,
) -> Result<Vec<ExperimentResult>> {
    let policies = kinds
        .iter()
        .map(|&k| Ok((k, ctx.policy(k)?)))
        .collect::<Result<Vec<_>>>()?;
    let configs = r_values
        .iter()
        .map(|&r| Ok((r, scale(&ctx.base, r)?)))
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    for (kind, policy) in &policies {
        for (r, config) in &configs {
            for &seed in seeds {
                cells.push((*kind, policy.clone(), *r, config, seed));
            }
        }
    }
    let mut results = cells
        .into_par_iter()
        .map(|(kind, policy, r, config, seed)| {
            let start = Instant::now();
            let metrics = run(config, policy.as_ref(), horizon, seed)?;
            log::debug!("{kind} r={r} seed={seed}: {}", metrics.avg_weighted_age);
            Ok(ExperimentResult {
                policy: kind.name().to_string(),
                r,
                seed,
                horizon,
                avg_weighted_age: metrics.avg_weighted_age,
                normalized_age: metrics.avg_weighted_age / r as f64,
                wall_time_s: start.elapsed().as_secs_f64(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    results.sort_by(|a, b| (&a.policy, a.r, a.seed).cmp(&(&b.policy, b.r, b.seed)));
    Ok(results)
}

/// Rounds to 10 significant digits and prints the shortest exact form.
pub fn sig10(x: f64) -> String {
    let rounded: f64 = format!("{x:.9e}").parse().expect("float formats");
    format!("{rounded}")
}

pub const CSV_HEADER: &str = "policy,r,seed,T,avg_weighted_age,normalized_age,wall_time_s";

pub fn write_csv(results: &[ExperimentResult], out: &mut dyn std::io::Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in results {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.policy,
            r.r,
            r.seed,
            r.horizon,
            sig10(r.avg_weighted_age),
            sig10(r.normalized_age),
            sig10(r.wall_time_s)
        )?;
    }
    Ok(())
}

pub fn emit_csv(results: &[ExperimentResult], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if results.is_empty() {
        return Err(Error::Precondition("no results to write".into()));
    }
    let mut buf = Vec::new();
    write_csv(results, &mut buf).expect("in-memory write");
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> Result<Vec<ExperimentResult>> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::Reader::from_reader(file);
    let rows = reader.deserialize().collect::<std::result::Result<Vec<ExperimentResult>, _>>()?;
    Ok(rows)
}

/// Mean normalized age per `(policy, r)`.
pub fn mean_normalized(results: &[ExperimentResult]) -> BTreeMap<(String, usize), f64> {
    let mut acc: BTreeMap<(String, usize), (f64, usize)> = BTreeMap::new();
    for r in results {
        let e = acc.entry((r.policy.clone(), r.r)).or_default();
        e.0 += r.normalized_age;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}
