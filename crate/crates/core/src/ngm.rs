//! Net-gain maximization.
//!
//! The per-slot caps are relaxed to time-average caps and priced with
//! multipliers `λ` (server) and `μ_i` (network `i`). For fixed prices the
//! relaxed problem splits into one MDP per user with activation price
//! `λ̄_i = λ + μ_i`; projected subgradient ascent on the dual moves the prices
//! toward the caps. The net gain `β(s) = Q(s, passive) - Q(s, active)` at the
//! final prices is then the scheduling priority.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::maxweight::{candidates_with, select_jobs};
use crate::mdp::{
    activation_frequency_from, build_kernel, greedy_policy, q_gap, rvi_solve_from, Kernel, RviOptions,
    TruncatedSpace,
};
use crate::model::{ServiceDistribution, SystemConfig, SystemState, UserSpec, UserState};
use crate::sim::{Policy, ScheduleDecision};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub lambda: f64,
    pub mu: Vec<f64>,
}

impl Multipliers {
    pub fn zero(networks: usize) -> Self {
        Multipliers {
            lambda: 0.0,
            mu: vec![0.0; networks],
        }
    }

    /// Activation price of a user in network `i`.
    pub fn lambda_bar(&self, i: usize) -> f64 {
        self.lambda + self.mu[i]
    }
}

/// Step scale for `h` and every `h̄_i`. Unit steps leave the server price
/// at about two thirds of its optimum after 200 iterations on the base
/// instances; at 10 the iterates reach it.
pub const DEFAULT_STEP: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct DualOptions {
    pub y_max: u64,
    pub iters: usize,
    /// Server step scale: `τ(k) = h / √k`.
    pub h: f64,
    /// Per-network step scales: `τ̄_i(k) = h̄_i / √k`.
    pub h_bar: Vec<f64>,
    pub rvi: RviOptions,
}

impl DualOptions {
    pub fn new(config: &SystemConfig, y_max: u64) -> Self {
        DualOptions {
            y_max,
            iters: 200,
            h: DEFAULT_STEP,
            h_bar: vec![DEFAULT_STEP; config.networks.len()],
            rvi: RviOptions::default(),
        }
    }
}

/// Diagnostics of one subgradient step, at the prices it was evaluated at.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualIterate {
    pub k: usize,
    pub lambda: f64,
    pub mu: Vec<f64>,
    /// `Σ gains - λ M̄ - Σ μ_i M̄_i`.
    pub dual_value: f64,
    pub total_activation: f64,
    pub network_activation: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualResult {
    pub multipliers: Multipliers,
    pub trace: Vec<DualIterate>,
}

impl DualResult {
    pub fn best_dual_value(&self) -> f64 {
        self.trace.iter().map(|d| d.dual_value).fold(f64::NEG_INFINITY, f64::max)
    }
}

struct ArmWork {
    kernel: Kernel,
    values: Option<Vec<f64>>,
    eval: Option<Vec<f64>>,
}

/// Solves every arm at the current prices; returns `(gain, activation)` per arm.
fn evaluate_arms(work: &mut [ArmWork], prices: &[f64], opts: &RviOptions) -> Result<Vec<(f64, f64)>> {
    work.par_iter_mut()
        .zip(prices.par_iter())
        .map(|(arm, &price)| {
            let kernel = arm.kernel.with_lambda_bar(price);
            let vf = rvi_solve_from(&kernel, opts, arm.values.as_deref())?;
            let policy = greedy_policy(&kernel, &vf);
            let eval = activation_frequency_from(&kernel, &policy, opts, arm.eval.as_deref())?;
            let out = (vf.gain, eval.gain);
            arm.values = Some(vf.values);
            arm.eval = Some(eval.values);
            Ok(out)
        })
        .collect()
}

/// Projected subgradient ascent on the dual from `λ = μ = 0`.
pub fn dual_ascent(config: &SystemConfig, opts: &DualOptions) -> Result<DualResult> {
    if opts.iters == 0 {
        return Err(Error::Precondition("at least one dual iteration is required".into()));
    }
    if opts.h_bar.len() != config.networks.len() {
        return Err(Error::Precondition("one step scale per network is required".into()));
    }
    if !(opts.h > 0.0) || opts.h_bar.iter().any(|&h| !(h > 0.0)) {
        return Err(Error::Precondition("step scales must be positive".into()));
    }

    let arms: Vec<(usize, usize)> = config.user_indices().collect();
    let mut work = arms
        .iter()
        .map(|&(i, j)| {
            let net = &config.networks[i];
            let space = TruncatedSpace::compact(opts.y_max, &net.service);
            Ok(ArmWork {
                kernel: build_kernel(&net.users[j], &net.service, 0.0, space)?,
                values: None,
                eval: None,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = config.networks.len();
    let mut m = Multipliers::zero(n);
    let mut trace = Vec::with_capacity(opts.iters);
    for k in 1..=opts.iters {
        let prices: Vec<f64> = arms.iter().map(|&(i, _)| m.lambda_bar(i)).collect();
        let solved = match evaluate_arms(&mut work, &prices, &opts.rvi) {
            Ok(s) => s,
            Err(e) => {
                log::error!("dual iteration {k} failed at λ = {}, μ = {:?}: {e}", m.lambda, m.mu);
                if let Some(last) = trace.last() {
                    log::error!("last completed iterate: {last:?}");
                }
                return Err(e);
            }
        };

        let mut per_net = vec![0.0; n];
        let mut gains = 0.0;
        for (&(i, _), &(gain, freq)) in arms.iter().zip(&solved) {
            per_net[i] += freq;
            gains += gain;
        }
        let total: f64 = per_net.iter().sum();
        let dual_value = gains
            - m.lambda * config.server_capacity as f64
            - m.mu
                .iter()
                .zip(&config.networks)
                .map(|(mu, net)| mu * net.capacity as f64)
                .sum::<f64>();
        trace.push(DualIterate {
            k,
            lambda: m.lambda,
            mu: m.mu.clone(),
            dual_value,
            total_activation: total,
            network_activation: per_net.clone(),
        });

        let root = (k as f64).sqrt();
        let next = Multipliers {
            lambda: (m.lambda + opts.h / root * (total - config.server_capacity as f64)).max(0.0),
            mu: (0..n)
                .map(|i| {
                    let step = opts.h_bar[i] / root;
                    (m.mu[i] + step * (per_net[i] - config.networks[i].capacity as f64)).max(0.0)
                })
                .collect(),
        };
        m = next;
    }
    Ok(DualResult { multipliers: m, trace })
}

/// Net gains of one arm over its truncated space, empty state excluded.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmTable {
    pub lambda_bar: f64,
    pub y_max: u64,
    pub progress_cap: u64,
    pub beta: Vec<f64>,
}

impl ArmTable {
    pub fn solve(
        user: &UserSpec,
        dist: &ServiceDistribution,
        lambda_bar: f64,
        y_max: u64,
        opts: &RviOptions,
    ) -> Result<Self> {
        let space = TruncatedSpace::compact(y_max, dist);
        let kernel = build_kernel(user, dist, lambda_bar, space)?;
        let vf = rvi_solve_from(&kernel, opts, None)?;
        let beta = (0..space.empty_index()).map(|s| q_gap(&kernel, &vf, s)).collect();
        Ok(ArmTable {
            lambda_bar,
            y_max,
            progress_cap: space.progress_cap(),
            beta,
        })
    }

    fn space(&self, dist: &ServiceDistribution) -> TruncatedSpace {
        TruncatedSpace::compact(self.y_max, dist)
    }

    pub fn beta(&self, dist: &ServiceDistribution, state: &UserState) -> Option<f64> {
        if state.is_empty() {
            return None;
        }
        self.space(dist).index_of(state).map(|s| self.beta[s])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetGainTable {
    pub y_max: u64,
    pub multipliers: Multipliers,
    /// `arms[i][j]`.
    pub arms: Vec<Vec<ArmTable>>,
}

pub fn build_net_gain_table(
    config: &SystemConfig,
    multipliers: &Multipliers,
    y_max: u64,
    opts: &RviOptions,
) -> Result<NetGainTable> {
    let flat: Vec<(usize, usize)> = config.user_indices().collect();
    let solved = flat
        .par_iter()
        .map(|&(i, j)| {
            let net = &config.networks[i];
            ArmTable::solve(&net.users[j], &net.service, multipliers.lambda_bar(i), y_max, opts)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut solved = solved.into_iter();
    let arms = config
        .networks
        .iter()
        .map(|net| solved.by_ref().take(net.users.len()).collect())
        .collect();
    Ok(NetGainTable {
        y_max,
        multipliers: multipliers.clone(),
        arms,
    })
}

/// Re-solves an arm at unchanged prices on a space large enough for `state`.
pub fn escape_resolve(
    user: &UserSpec,
    dist: &ServiceDistribution,
    lambda_bar: f64,
    state: &UserState,
    y_max_prime: u64,
    opts: &RviOptions,
) -> Result<(f64, ArmTable)> {
    let UserState::Job { age, progress } = *state else {
        return Err(Error::Precondition("escape on an empty buffer".into()));
    };
    let needed = 2 * age.max(progress);
    if y_max_prime < needed {
        return Err(Error::Precondition(format!(
            "enlarged bound {y_max_prime} is below twice the state's largest coordinate ({needed})"
        )));
    }
    let table = ArmTable::solve(user, dist, lambda_bar, y_max_prime, opts)?;
    let beta = table
        .beta(dist, state)
        .ok_or_else(|| Error::Precondition(format!("{state:?} not representable")))?;
    Ok((beta, table))
}

/// Escape level for an age outside the base table: the smallest `k >= 1`
/// with `y_max 2^k >= 2 age`. Each state maps to one level regardless of the
/// order in which escapes happen.
fn escape_level(y_max: u64, age: u64) -> u32 {
    let mut k = 1;
    while y_max << k < 2 * age {
        k += 1;
    }
    k
}

struct ArmSlot {
    base: ArmTable,
    escapes: RwLock<BTreeMap<u32, Arc<ArmTable>>>,
}

/// NGM scheduling on a (possibly replicated) copy of the solved system.
/// Network `i` of the running config uses the tables of base network `i % N`.
pub struct NgmPolicy {
    base: SystemConfig,
    multipliers: Multipliers,
    arms: Vec<Vec<ArmSlot>>,
    rvi: RviOptions,
}

impl NgmPolicy {
    pub fn new(base: SystemConfig, table: NetGainTable, rvi: RviOptions) -> Result<Self> {
        let shape_ok = table.arms.len() == base.networks.len()
            && table.arms.iter().zip(&base.networks).all(|(a, n)| a.len() == n.users.len());
        if !shape_ok {
            return Err(Error::Precondition("net-gain table does not match config".into()));
        }
        let arms = table
            .arms
            .into_iter()
            .map(|row| {
                row.into_iter()
                    .map(|base| ArmSlot {
                        base,
                        escapes: RwLock::new(BTreeMap::new()),
                    })
                    .collect()
            })
            .collect();
        Ok(NgmPolicy {
            base,
            multipliers: table.multipliers,
            arms,
            rvi,
        })
    }

    pub fn multipliers(&self) -> &Multipliers {
        &self.multipliers
    }

    pub fn base_networks(&self) -> usize {
        self.base.networks.len()
    }

    /// `β` of a user state; escapes to an enlarged space when needed.
    pub fn net_gain(&self, i: usize, j: usize, state: &UserState) -> Result<f64> {
        let net = &self.base.networks[i];
        let slot = &self.arms[i][j];
        if let Some(b) = slot.base.beta(&net.service, state) {
            return Ok(b);
        }
        let level = escape_level(slot.base.y_max, state.age());
        if let Some(t) = slot.escapes.read().expect("escape cache").get(&level) {
            if let Some(b) = t.beta(&net.service, state) {
                return Ok(b);
            }
        }
        let y_prime = slot.base.y_max << level;
        log::info!("ngm escape: user ({i}, {j}) at {state:?}, re-solving with y_max {y_prime}");
        let (beta, table) = escape_resolve(
            &net.users[j],
            &net.service,
            slot.base.lambda_bar,
            state,
            y_prime,
            &self.rvi,
        )?;
        slot.escapes
            .write()
            .expect("escape cache")
            .entry(level)
            .or_insert_with(|| Arc::new(table));
        Ok(beta)
    }

    pub fn escape_count(&self) -> usize {
        self.arms
            .iter()
            .flatten()
            .map(|a| a.escapes.read().expect("escape cache").len())
            .sum()
    }
}

pub fn ngm_decide(policy: &NgmPolicy, state: &SystemState, config: &SystemConfig) -> Result<ScheduleDecision> {
    let n = policy.base_networks();
    let candidates = candidates_with(state, |i, j, s| policy.net_gain(i % n, j, &s))?;
    Ok(select_jobs(&candidates, config))
}

impl Policy for NgmPolicy {
    fn name(&self) -> &str {
        "ngm"
    }

    fn decide(&self, config: &SystemConfig, state: &SystemState) -> Result<ScheduleDecision> {
        ngm_decide(self, state, config)
    }
}

pub const ARTIFACT_VERSION: u32 = 1;

/// Solved multipliers and net-gain tables, persisted between runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NgmArtifact {
    pub version: u32,
    pub key: String,
    pub y_max: u64,
    pub iters: usize,
    pub h: f64,
    pub h_bar: Vec<f64>,
    pub dual: DualResult,
    pub table: NetGainTable,
}

pub fn artifact_key(config: &SystemConfig, y_max: u64, iters: usize, h: f64, h_bar: &[f64]) -> String {
    let canonical = serde_json::to_string(&(ARTIFACT_VERSION, config, y_max, iters, h, h_bar))
        .expect("key serializes");
    hex::encode(Sha256::digest(canonical.as_bytes()))
}

impl NgmArtifact {
    pub fn solve(config: &SystemConfig, opts: &DualOptions) -> Result<Self> {
        let dual = dual_ascent(config, opts)?;
        let table = build_net_gain_table(config, &dual.multipliers, opts.y_max, &opts.rvi)?;
        Ok(NgmArtifact {
            version: ARTIFACT_VERSION,
            key: artifact_key(config, opts.y_max, opts.iters, opts.h, &opts.h_bar),
            y_max: opts.y_max,
            iters: opts.iters,
            h: opts.h,
            h_bar: opts.h_bar.clone(),
            dual,
            table,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::MissingArtifact(format!("{}: {e}", path.display())))?;
        let artifact: NgmArtifact = serde_json::from_str(&text).map_err(|e| Error::Json {
            path: path.into(),
            source: e,
        })?;
        if artifact.version != ARTIFACT_VERSION {
            return Err(Error::MissingArtifact(format!(
                "{}: artifact version {} (expected {ARTIFACT_VERSION})",
                path.display(),
                artifact.version
            )));
        }
        Ok(artifact)
    }

    /// Errors unless the artifact was solved for exactly this config.
    pub fn check(&self, config: &SystemConfig) -> Result<()> {
        let expected = artifact_key(config, self.y_max, self.iters, self.h, &self.h_bar);
        if expected != self.key {
            return Err(Error::MissingArtifact(
                "artifact was solved for a different configuration or parameters".into(),
            ));
        }
        Ok(())
    }

    pub fn into_policy(self, config: &SystemConfig, rvi: RviOptions) -> Result<NgmPolicy> {
        self.check(config)?;
        NgmPolicy::new(config.clone(), self.table, rvi)
    }
}
