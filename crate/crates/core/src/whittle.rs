//! Whittle-type indices.
//!
//! For geometric service the index has a closed form. For general service
//! the index of a state is the activation price at which serving and idling
//! tie, found by a bracket-and-bisect search on
//! `φ(λ̄) = Q(s, passive; λ̄) - Q(s, active; λ̄)`.

use std::collections::HashMap;
use std::io::Write;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maxweight::{candidates_with, select_jobs};
use crate::mdp::{build_kernel, greedy_action, q_gap, rvi_solve_from, Action, Kernel, RviOptions, TruncatedSpace};
use crate::model::{ServiceDistribution, SystemConfig, SystemState, UserSpec, UserState};
use crate::sim::{Policy, ScheduleDecision};

/// `w (q Δ²/2 + (1 - q/2 + q/p) Δ + 1/p)`.
pub fn whittle_index(w: f64, p: f64, q: f64, age: u64) -> f64 {
    let d = age as f64;
    w * (q * d * d / 2.0 + (1.0 - q / 2.0 + q / p) * d + 1.0 / p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct IndexabilityReport {
    pub pass: bool,
    /// Passive-set size per grid point, EMPTY included.
    pub passive_sizes: Vec<usize>,
    /// First `(λ̄₁, λ̄₂, state)` with the state passive at λ̄₁ but active at λ̄₂.
    pub violation: Option<(f64, f64, UserState)>,
}

/// Checks that the passive set grows along an ascending price grid.
pub fn verify_indexability(
    user: &UserSpec,
    q: f64,
    grid: &[f64],
    y_max: u64,
    opts: &RviOptions,
) -> Result<IndexabilityReport> {
    if grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::Precondition("price grid must be strictly ascending".into()));
    }
    let dist = ServiceDistribution::geometric(q)?;
    let space = TruncatedSpace::compact(y_max, &dist);
    let base = build_kernel(user, &dist, 0.0, space)?;

    let mut warm: Option<Vec<f64>> = None;
    let mut prev: Option<(f64, Vec<bool>)> = None;
    let mut report = IndexabilityReport {
        pass: true,
        passive_sizes: Vec::with_capacity(grid.len()),
        violation: None,
    };
    for &lb in grid {
        let kernel = base.with_lambda_bar(lb);
        let vf = rvi_solve_from(&kernel, opts, warm.as_deref())?;
        let passive: Vec<bool> = (0..kernel.len())
            .map(|s| greedy_action(&kernel, &vf, s) == Action::Passive)
            .collect();
        report.passive_sizes.push(passive.iter().filter(|&&b| b).count());
        if let Some((lo, before)) = &prev {
            if report.violation.is_none() {
                if let Some(s) = (0..passive.len()).find(|&s| before[s] && !passive[s]) {
                    report.pass = false;
                    report.violation = Some((*lo, lb, space.state(s)));
                }
            }
        }
        warm = Some(vf.values);
        prev = Some((lb, passive));
    }
    Ok(report)
}

/// `φ(λ̄)` at a non-empty state of the truncated space.
pub fn phi(
    user: &UserSpec,
    dist: &ServiceDistribution,
    state: &UserState,
    lambda_bar: f64,
    space: TruncatedSpace,
    opts: &RviOptions,
) -> Result<f64> {
    let s = job_index(&space, state)?;
    let kernel = build_kernel(user, dist, lambda_bar, space)?;
    let vf = rvi_solve_from(&kernel, opts, None)?;
    Ok(q_gap(&kernel, &vf, s))
}

fn job_index(space: &TruncatedSpace, state: &UserState) -> Result<usize> {
    if state.is_empty() {
        return Err(Error::Precondition("index of an empty buffer".into()));
    }
    space
        .index_of(state)
        .ok_or_else(|| Error::Precondition(format!("{state:?} outside the truncated space")))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum IndexTag {
    BisectionRoot,
    Fallback,
}

impl IndexTag {
    pub fn as_str(self) -> &'static str {
        match self {
            IndexTag::BisectionRoot => "bisection-root",
            IndexTag::Fallback => "fallback",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WimwfOptions {
    pub y_max: u64,
    pub bisect_tol: f64,
    pub doubling_cap: u32,
    pub rvi: RviOptions,
}

impl Default for WimwfOptions {
    fn default() -> Self {
        WimwfOptions {
            y_max: 50,
            bisect_tol: 1e-6,
            doubling_cap: 60,
            rvi: RviOptions::default(),
        }
    }
}

/// `w (Δ + 1) h(Δ̄)`: the index used when no root is available.
pub fn fallback_index(w: f64, dist: &ServiceDistribution, state: &UserState) -> Result<f64> {
    let UserState::Job { age, progress } = *state else {
        return Err(Error::Precondition("index of an empty buffer".into()));
    };
    Ok(w * (age as f64 + 1.0) * dist.hazard(progress)?)
}

/// Memoized `φ` probes for one state, warm-starting each solve.
struct PhiProbe<'a> {
    kernel: &'a Kernel,
    state: usize,
    rvi: &'a RviOptions,
    memo: HashMap<String, f64>,
    warm: Option<Vec<f64>>,
}

impl PhiProbe<'_> {
    fn eval(&mut self, lambda_bar: f64) -> Result<f64> {
        let key = format!("{lambda_bar:.11e}");
        if let Some(&v) = self.memo.get(&key) {
            return Ok(v);
        }
        let kernel = self.kernel.with_lambda_bar(lambda_bar);
        let vf = rvi_solve_from(&kernel, self.rvi, self.warm.as_deref())?;
        let v = q_gap(&kernel, &vf, self.state);
        self.warm = Some(vf.values);
        self.memo.insert(key, v);
        Ok(v)
    }
}

/// Bracket-and-bisect root of `φ` on a prebuilt kernel.
fn wimwf_on_kernel(
    kernel: &Kernel,
    user: &UserSpec,
    dist: &ServiceDistribution,
    state: &UserState,
    opts: &WimwfOptions,
) -> Result<(f64, IndexTag)> {
    let s = job_index(kernel.space(), state)?;
    let mut probe = PhiProbe {
        kernel,
        state: s,
        rvi: &opts.rvi,
        memo: HashMap::new(),
        warm: None,
    };
    let search = |probe: &mut PhiProbe| -> Result<Option<f64>> {
        if probe.eval(0.0)? <= 0.0 {
            return Ok(Some(0.0));
        }
        let mut lo = 0.0;
        let mut hi = f64::max(1.0, user.w * (state.age() as f64 - 1.0));
        let mut doublings = 0;
        while probe.eval(hi)? > 0.0 {
            if doublings == opts.doubling_cap {
                return Ok(None);
            }
            lo = hi;
            hi *= 2.0;
            doublings += 1;
        }
        while hi - lo >= opts.bisect_tol {
            let mid = 0.5 * (lo + hi);
            if probe.eval(mid)? > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(Some(0.5 * (lo + hi)))
    };
    match search(&mut probe) {
        Ok(Some(root)) => Ok((root, IndexTag::BisectionRoot)),
        Ok(None) => Ok((fallback_index(user.w, dist, state)?, IndexTag::Fallback)),
        Err(Error::NoConvergence { iterations, span }) => {
            log::warn!(
                "index search at {state:?} did not converge ({iterations} iterations, span {span:e}); using fallback"
            );
            Ok((fallback_index(user.w, dist, state)?, IndexTag::Fallback))
        }
        Err(e) => Err(e),
    }
}

pub fn wimwf_index(
    user: &UserSpec,
    dist: &ServiceDistribution,
    state: &UserState,
    opts: &WimwfOptions,
) -> Result<(f64, IndexTag)> {
    let space = TruncatedSpace::compact(opts.y_max, dist);
    let kernel = build_kernel(user, dist, 0.0, space)?;
    wimwf_on_kernel(&kernel, user, dist, state, opts)
}

struct ArmCache {
    kernel: Kernel,
    entries: RwLock<HashMap<usize, (f64, IndexTag)>>,
}

/// Lazily filled WIMWF indices for every user of a base config.
pub struct WimwfIndexCache {
    base: SystemConfig,
    opts: WimwfOptions,
    arms: Vec<Vec<ArmCache>>,
}

impl WimwfIndexCache {
    pub fn new(base: SystemConfig, opts: WimwfOptions) -> Result<Self> {
        let arms = base
            .networks
            .iter()
            .map(|net| {
                let space = TruncatedSpace::compact(opts.y_max, &net.service);
                net.users
                    .iter()
                    .map(|u| {
                        Ok(ArmCache {
                            kernel: build_kernel(u, &net.service, 0.0, space)?,
                            entries: RwLock::new(HashMap::new()),
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(WimwfIndexCache { base, opts, arms })
    }

    pub fn options(&self) -> &WimwfOptions {
        &self.opts
    }

    pub fn base_networks(&self) -> usize {
        self.base.networks.len()
    }

    /// Index of user `(i, j)` of the base config; fallback outside the space.
    pub fn index(&self, i: usize, j: usize, state: &UserState) -> Result<(f64, IndexTag)> {
        let net = &self.base.networks[i];
        let user = &net.users[j];
        let arm = &self.arms[i][j];
        let Some(s) = arm.kernel.space().index_of(state) else {
            return Ok((fallback_index(user.w, &net.service, state)?, IndexTag::Fallback));
        };
        if let Some(&hit) = arm.entries.read().expect("index cache").get(&s) {
            return Ok(hit);
        }
        let value = wimwf_on_kernel(&arm.kernel, user, &net.service, state, &self.opts)?;
        arm.entries.write().expect("index cache").insert(s, value);
        Ok(value)
    }

    pub fn cached_len(&self) -> usize {
        self.arms
            .iter()
            .flatten()
            .map(|a| a.entries.read().expect("index cache").len())
            .sum()
    }

    /// Computes every reachable state with age at most `max_age`.
    pub fn fill(&self, max_age: u64) -> Result<()> {
        use rayon::prelude::*;
        let jobs: Vec<(usize, usize, UserState)> = self
            .base
            .user_indices()
            .flat_map(|(i, j)| {
                let space = *self.arms[i][j].kernel.space();
                (0..space.empty_index())
                    .map(move |s| (i, j, space.state(s)))
                    .filter(move |(_, _, st)| st.age() <= max_age && st.progress().unwrap() <= st.age())
            })
            .collect();
        jobs.par_iter().try_for_each(|(i, j, st)| self.index(*i, *j, st).map(|_| ()))
    }

    /// CSV `i,j,delta,progress,index,tag` of cached entries, sorted.
    pub fn write_csv(&self, out: &mut dyn Write) -> std::io::Result<()> {
        writeln!(out, "i,j,delta,progress,index,tag")?;
        for (i, row) in self.arms.iter().enumerate() {
            for (j, arm) in row.iter().enumerate() {
                let entries = arm.entries.read().expect("index cache");
                let mut keys: Vec<usize> = entries.keys().copied().collect();
                keys.sort_unstable();
                for s in keys {
                    let st = arm.kernel.space().state(s);
                    let (v, tag) = entries[&s];
                    writeln!(
                        out,
                        "{i},{j},{},{},{v},{}",
                        st.age(),
                        st.progress().unwrap(),
                        tag.as_str()
                    )?;
                }
            }
        }
        Ok(())
    }
}

pub fn wimwf_decide(
    cache: &WimwfIndexCache,
    state: &SystemState,
    config: &SystemConfig,
) -> Result<ScheduleDecision> {
    let n = cache.base_networks();
    let candidates = candidates_with(state, |i, j, s| cache.index(i % n, j, &s).map(|v| v.0))?;
    Ok(select_jobs(&candidates, config))
}

pub struct WimwfPolicy {
    cache: Arc<WimwfIndexCache>,
}

impl WimwfPolicy {
    pub fn new(cache: Arc<WimwfIndexCache>) -> Self {
        WimwfPolicy { cache }
    }

    pub fn cache(&self) -> &WimwfIndexCache {
        &self.cache
    }
}

impl Policy for WimwfPolicy {
    fn name(&self) -> &str {
        "wimwf"
    }

    fn decide(&self, config: &SystemConfig, state: &SystemState) -> Result<ScheduleDecision> {
        wimwf_decide(&self.cache, state, config)
    }
}

pub fn wi_decide(config: &SystemConfig, state: &SystemState) -> Result<ScheduleDecision> {
    config.all_geometric()?;
    let candidates = candidates_with(state, |i, j, s| {
        let net = &config.networks[i];
        let ServiceDistribution::Geometric { q } = net.service else {
            unreachable!("checked geometric");
        };
        let u = &net.users[j];
        Ok(whittle_index(u.w, u.p, q, s.age()))
    })?;
    Ok(select_jobs(&candidates, config))
}

/// Closed-form Whittle index policy; geometric service only.
pub struct WhittlePolicy;

impl WhittlePolicy {
    pub fn new(config: &SystemConfig) -> Result<Self> {
        config.all_geometric()?;
        Ok(WhittlePolicy)
    }
}

impl Policy for WhittlePolicy {
    fn name(&self) -> &str {
        "wi"
    }

    fn decide(&self, config: &SystemConfig, state: &SystemState) -> Result<ScheduleDecision> {
        wi_decide(config, state)
    }
}
