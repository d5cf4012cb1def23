//! Slot-by-slot simulation engine.
//!
//! Within slot `t`: the buffer state already reflects arrivals that landed at
//! the start of the slot; cost `w * age` accrues; the policy picks jobs; served
//! jobs complete at the end of the slot with the hazard of their progress; the
//! slot's arrival bits then land in buffers that are empty after completions.
//! Arrivals into an occupied buffer are dropped.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::maxweight::{select_jobs, Candidate};
use crate::model::{SystemConfig, SystemState, UserState};

/// Random primitives for one slot, in network-major user order.
#[derive(Clone, Debug, PartialEq)]
pub struct SlotDraws {
    pub arrivals: Vec<Vec<bool>>,
    /// Uniform(0, 1) draws; consumed only for served users.
    pub completion: Vec<Vec<f64>>,
}

impl SlotDraws {
    pub fn zeroed(config: &SystemConfig) -> Self {
        SlotDraws {
            arrivals: config.networks.iter().map(|n| vec![false; n.users.len()]).collect(),
            completion: config.networks.iter().map(|n| vec![0.0; n.users.len()]).collect(),
        }
    }
}

/// Seeded, random-access source of [`SlotDraws`].
///
/// Every slot consumes exactly two `f64` draws per user, so the draws of slot
/// `t` depend only on `(seed, t)` and the config shape, never on decisions.
pub struct DrawSource {
    rng: ChaCha8Rng,
    words_per_slot: u128,
}

impl DrawSource {
    pub fn new(config: &SystemConfig, seed: u64) -> Self {
        DrawSource {
            rng: ChaCha8Rng::seed_from_u64(seed),
            // two f64 per user, two 32-bit words per f64
            words_per_slot: 4 * config.num_users() as u128,
        }
    }

    pub fn fill(&mut self, config: &SystemConfig, t: u64, out: &mut SlotDraws) {
        assert!(t >= 1, "slots are numbered from 1");
        self.rng.set_word_pos((t as u128 - 1) * self.words_per_slot);
        for (i, net) in config.networks.iter().enumerate() {
            for (j, user) in net.users.iter().enumerate() {
                let a: f64 = self.rng.gen();
                out.arrivals[i][j] = a < user.p;
                out.completion[i][j] = self.rng.gen();
            }
        }
    }

    pub fn draw(&mut self, config: &SystemConfig, t: u64) -> SlotDraws {
        let mut out = SlotDraws::zeroed(config);
        self.fill(config, t, &mut out);
        out
    }
}

pub fn draw_slot(config: &SystemConfig, seed: u64, t: u64) -> SlotDraws {
    DrawSource::new(config, seed).draw(config, t)
}

/// Jobs served in one slot, as sorted `(network, user)` pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScheduleDecision {
    served: Vec<(usize, usize)>,
}

impl ScheduleDecision {
    pub fn new(mut served: Vec<(usize, usize)>) -> Self {
        served.sort_unstable();
        ScheduleDecision { served }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn served(&self) -> &[(usize, usize)] {
        &self.served
    }

    pub fn len(&self) -> usize {
        self.served.len()
    }

    pub fn is_empty(&self) -> bool {
        self.served.is_empty()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.served.binary_search(&(i, j)).is_ok()
    }

    /// Per-network and server capacity, no duplicates, no empty buffers.
    pub fn check(&self, config: &SystemConfig, state: &SystemState) -> Result<()> {
        if self.served.len() > config.server_capacity {
            return Err(Error::InfeasibleDecision(format!(
                "{} jobs served, server capacity {}",
                self.served.len(),
                config.server_capacity
            )));
        }
        let mut per_net = vec![0usize; config.networks.len()];
        for (k, &(i, j)) in self.served.iter().enumerate() {
            if k > 0 && self.served[k - 1] == (i, j) {
                return Err(Error::InfeasibleDecision(format!("user ({i}, {j}) served twice")));
            }
            let Some(net) = config.networks.get(i) else {
                return Err(Error::InfeasibleDecision(format!("no network {i}")));
            };
            if j >= net.users.len() {
                return Err(Error::InfeasibleDecision(format!("no user ({i}, {j})")));
            }
            if state.get(i, j).is_empty() {
                return Err(Error::InfeasibleDecision(format!(
                    "user ({i}, {j}) has an empty buffer"
                )));
            }
            per_net[i] += 1;
            if per_net[i] > net.capacity {
                return Err(Error::InfeasibleDecision(format!(
                    "network {i} serves more than {} jobs",
                    net.capacity
                )));
            }
        }
        Ok(())
    }
}

/// A causal scheduling rule. Implementations may keep internal caches.
pub trait Policy: Send + Sync {
    fn name(&self) -> &str;
    fn decide(&self, config: &SystemConfig, state: &SystemState) -> Result<ScheduleDecision>;
}

/// Serves every buffered job the capacities allow, lowest indices first.
pub struct ServeAll;

impl Policy for ServeAll {
    fn name(&self) -> &str {
        "serve-all"
    }

    fn decide(&self, config: &SystemConfig, state: &SystemState) -> Result<ScheduleDecision> {
        let candidates: Vec<Candidate> = buffered(state)
            .map(|(i, j, _)| Candidate::new(i, j, 1.0))
            .collect();
        Ok(select_jobs(&candidates, config))
    }
}

/// Never serves anything.
pub struct Idle;

impl Policy for Idle {
    fn name(&self) -> &str {
        "idle"
    }

    fn decide(&self, _: &SystemConfig, _: &SystemState) -> Result<ScheduleDecision> {
        Ok(ScheduleDecision::empty())
    }
}

/// Users with a job in their buffer: `(i, j, state)`.
pub fn buffered(state: &SystemState) -> impl Iterator<Item = (usize, usize, UserState)> + '_ {
    state.users.iter().enumerate().flat_map(|(i, row)| {
        row.iter()
            .enumerate()
            .filter(|(_, s)| !s.is_empty())
            .map(move |(j, s)| (i, j, *s))
    })
}

/// What happened to each user during one slot.
#[derive(Clone, Debug)]
struct SlotEvents {
    served: Vec<Vec<bool>>,
    completed: Vec<Vec<bool>>,
}

impl SlotEvents {
    fn new(config: &SystemConfig) -> Self {
        let shape = || config.networks.iter().map(|n| vec![false; n.users.len()]).collect();
        SlotEvents {
            served: shape(),
            completed: shape(),
        }
    }
}

fn advance(
    config: &SystemConfig,
    state: &mut SystemState,
    decision: &ScheduleDecision,
    draws: &SlotDraws,
    events: &mut SlotEvents,
) -> Result<f64> {
    decision.check(config, state)?;
    for row in events.served.iter_mut() {
        row.fill(false);
    }
    for &(i, j) in decision.served() {
        events.served[i][j] = true;
    }

    let mut cost = 0.0;
    for (i, net) in config.networks.iter().enumerate() {
        for (j, user) in net.users.iter().enumerate() {
            let s = state.users[i][j];
            cost += user.w * s.age() as f64;
            let arrival = draws.arrivals[i][j];
            let served = events.served[i][j];
            let mut completed = false;
            let next = match s {
                UserState::Empty if arrival => UserState::job(0, 0),
                UserState::Empty => UserState::Empty,
                UserState::Job { age, progress } if served => {
                    let h = net.service.hazard(progress)?;
                    if draws.completion[i][j] < h {
                        completed = true;
                        if arrival {
                            UserState::job(0, 0)
                        } else {
                            UserState::Empty
                        }
                    } else {
                        UserState::job(age + 1, progress + 1)
                    }
                }
                UserState::Job { age, progress } => UserState::job(age + 1, progress),
            };
            events.completed[i][j] = completed;
            state.users[i][j] = next;
        }
    }
    state.t += 1;
    Ok(cost)
}

/// One slot transition; returns the successor state and the slot's weighted age.
pub fn step(
    config: &SystemConfig,
    state: &SystemState,
    decision: &ScheduleDecision,
    draws: &SlotDraws,
) -> Result<(SystemState, f64)> {
    if !state.matches(config) {
        return Err(Error::Precondition("state shape does not match config".into()));
    }
    let mut next = state.clone();
    let mut events = SlotEvents::new(config);
    let cost = advance(config, &mut next, decision, draws, &mut events)?;
    Ok((next, cost))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunMetrics {
    pub horizon: u64,
    pub total_weighted_age: f64,
    pub avg_weighted_age: f64,
    pub per_user_avg_age: Vec<Vec<f64>>,
    pub per_user_activation_frequency: Vec<Vec<f64>>,
    pub per_user_completions_per_slot: Vec<Vec<f64>>,
}

pub const TRACE_HEADER: &str = "t,i,j,a,c,d,delta,progress";

pub fn run(config: &SystemConfig, policy: &dyn Policy, horizon: u64, seed: u64) -> Result<RunMetrics> {
    run_traced(config, policy, horizon, seed, None)
}

/// Simulates `horizon` slots from all-empty buffers. With a trace sink, writes
/// one CSV row per (slot, user) with the pre-transition state.
pub fn run_traced(
    config: &SystemConfig,
    policy: &dyn Policy,
    horizon: u64,
    seed: u64,
    mut trace: Option<&mut dyn Write>,
) -> Result<RunMetrics> {
    if horizon == 0 {
        return Err(Error::Precondition("horizon must be >= 1".into()));
    }
    let trace_err = |e| Error::io("<trace>", e);
    if let Some(out) = trace.as_mut() {
        writeln!(out, "{TRACE_HEADER}").map_err(trace_err)?;
    }

    let shape = |v: f64| -> Vec<Vec<f64>> {
        config.networks.iter().map(|n| vec![v; n.users.len()]).collect()
    };
    let mut age_sum = shape(0.0);
    let mut served_count = shape(0.0);
    let mut completions = shape(0.0);
    let mut total = 0.0;

    let mut source = DrawSource::new(config, seed);
    let mut draws = SlotDraws::zeroed(config);
    let mut events = SlotEvents::new(config);
    let mut state = SystemState::empty(config);

    for t in 1..=horizon {
        source.fill(config, t, &mut draws);
        let decision = policy.decide(config, &state)?;
        let pre = trace.is_some().then(|| state.clone());
        for (i, row) in state.users.iter().enumerate() {
            for (j, s) in row.iter().enumerate() {
                age_sum[i][j] += s.age() as f64;
            }
        }
        total += advance(config, &mut state, &decision, &draws, &mut events)?;
        for (i, row) in events.served.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                if c {
                    served_count[i][j] += 1.0;
                }
                if events.completed[i][j] {
                    completions[i][j] += 1.0;
                }
            }
        }
        if let (Some(out), Some(pre)) = (trace.as_mut(), pre) {
            for (i, row) in pre.users.iter().enumerate() {
                for (j, s) in row.iter().enumerate() {
                    let progress = match s.progress() {
                        Some(x) => x.to_string(),
                        None => "inf".to_string(),
                    };
                    writeln!(
                        out,
                        "{t},{i},{j},{},{},{},{},{progress}",
                        draws.arrivals[i][j] as u8,
                        events.served[i][j] as u8,
                        events.completed[i][j] as u8,
                        s.age(),
                    )
                    .map_err(trace_err)?;
                }
            }
        }
    }

    let scale = |m: Vec<Vec<f64>>| -> Vec<Vec<f64>> {
        m.into_iter()
            .map(|row| row.into_iter().map(|x| x / horizon as f64).collect())
            .collect()
    };
    Ok(RunMetrics {
        horizon,
        total_weighted_age: total,
        avg_weighted_age: total / horizon as f64,
        per_user_avg_age: scale(age_sum),
        per_user_activation_frequency: scale(served_count),
        per_user_completions_per_slot: scale(completions),
    })
}

/// Stationary weighted age of a lone user that is served whenever it has a job.
///
/// Under always-serve the age of a buffered job equals its progress, so the
/// chain lives on `{empty} ∪ {0..=cap}`. Solved by lazy power iteration, which
/// has the same stationary law and is aperiodic even when the chain is not.
pub fn exact_single_user_average_age(
    p: f64,
    w: f64,
    dist: &crate::model::ServiceDistribution,
    cap: u64,
) -> Result<f64> {
    const TOL: f64 = 1e-15;
    const MAX_ITERS: usize = 2_000_000;

    let cap = match dist.max_progress() {
        Some(max) => cap.min(max),
        None => cap,
    } as usize;
    let n = cap + 2;
    let empty = cap + 1;
    let hazard: Vec<f64> = (0..=cap)
        .map(|k| dist.hazard(k as u64))
        .collect::<Result<_>>()?;

    let mut pi = vec![1.0 / n as f64; n];
    let mut next = vec![0.0; n];
    for _ in 0..MAX_ITERS {
        next.fill(0.0);
        next[empty] += pi[empty] * (1.0 - p);
        next[0] += pi[empty] * p;
        for k in 0..=cap {
            let h = hazard[k];
            next[0] += pi[k] * p * h;
            next[empty] += pi[k] * (1.0 - p) * h;
            next[(k + 1).min(cap)] += pi[k] * (1.0 - h);
        }
        let mut diff = 0.0;
        for s in 0..n {
            let lazy = 0.5 * (pi[s] + next[s]);
            diff += (lazy - pi[s]).abs();
            pi[s] = lazy;
        }
        if diff < TOL {
            let mean_age: f64 = (0..=cap).map(|k| pi[k] * k as f64).sum();
            return Ok(w * mean_age);
        }
    }
    Err(Error::NoConvergence {
        iterations: MAX_ITERS,
        span: f64::NAN,
    })
}
