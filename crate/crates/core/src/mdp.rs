//! Average-cost MDP of a single user under an activation price.
//!
//! State `(Δ, Δ̄)` is the age and served slots of the buffered job, plus one
//! empty-buffer state. Serving costs `λ̄` on top of the age cost `w Δ`. The
//! space is truncated at `y_max` in both coordinates; increments saturate at
//! the bound so every row stays stochastic.

use std::io::Write;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{ServiceDistribution, UserSpec, UserState, PROB_TOL};

/// Truncated state space `{(Δ, Δ̄) : Δ <= y_max, Δ̄ <= progress_cap} ∪ {empty}`.
///
/// [`TruncatedSpace::full`] is the square `[0, y_max]²`. [`TruncatedSpace::compact`]
/// drops progress values the service law makes irrelevant: a pmf job never
/// carries more than `K_max - 1` served slots, and geometric service is
/// memoryless so one progress value represents them all. Values at shared
/// states agree between the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct TruncatedSpace {
    y_max: u64,
    progress_cap: u64,
    memoryless: bool,
}

impl TruncatedSpace {
    pub fn full(y_max: u64, dist: &ServiceDistribution) -> Self {
        TruncatedSpace {
            y_max,
            progress_cap: y_max,
            memoryless: dist.is_geometric(),
        }
    }

    pub fn compact(y_max: u64, dist: &ServiceDistribution) -> Self {
        let progress_cap = match dist.max_progress() {
            Some(max) => max.min(y_max),
            None => 0,
        };
        TruncatedSpace {
            y_max,
            progress_cap,
            memoryless: dist.is_geometric(),
        }
    }

    pub fn y_max(&self) -> u64 {
        self.y_max
    }

    pub fn progress_cap(&self) -> u64 {
        self.progress_cap
    }

    fn width(&self) -> usize {
        self.progress_cap as usize + 1
    }

    pub fn len(&self) -> usize {
        (self.y_max as usize + 1) * self.width() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn empty_index(&self) -> usize {
        self.len() - 1
    }

    /// Index of `(0, 0)`, the reference state of the iteration.
    pub fn reference_index(&self) -> usize {
        0
    }

    pub fn index(&self, age: u64, progress: u64) -> Option<usize> {
        if age > self.y_max {
            return None;
        }
        let progress = if progress > self.progress_cap {
            if !self.memoryless {
                return None;
            }
            self.progress_cap
        } else {
            progress
        };
        Some(age as usize * self.width() + progress as usize)
    }

    pub fn index_of(&self, state: &UserState) -> Option<usize> {
        match *state {
            UserState::Empty => Some(self.empty_index()),
            UserState::Job { age, progress } => self.index(age, progress),
        }
    }

    pub fn contains(&self, state: &UserState) -> bool {
        self.index_of(state).is_some()
    }

    pub fn state(&self, index: usize) -> UserState {
        if index == self.empty_index() {
            UserState::Empty
        } else {
            let w = self.width();
            UserState::job((index / w) as u64, (index % w) as u64)
        }
    }

    pub fn states(&self) -> impl Iterator<Item = UserState> + '_ {
        (0..self.len()).map(|k| self.state(k))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Passive,
    Active,
}

impl Action {
    pub fn is_active(self) -> bool {
        self == Action::Active
    }
}

#[derive(Debug)]
struct KernelRows {
    space: TruncatedSpace,
    /// `w Δ` per state.
    age_cost: Vec<f64>,
    /// CSR over rows `2 s + a`.
    offsets: Vec<usize>,
    succ: Vec<usize>,
    prob: Vec<f64>,
}

/// Transition law and stage cost of one user at activation price `λ̄`.
#[derive(Clone, Debug)]
pub struct Kernel {
    rows: Arc<KernelRows>,
    lambda_bar: f64,
}

impl Kernel {
    pub fn space(&self) -> &TruncatedSpace {
        &self.rows.space
    }

    pub fn lambda_bar(&self) -> f64 {
        self.lambda_bar
    }

    /// Same transitions at a different activation price.
    pub fn with_lambda_bar(&self, lambda_bar: f64) -> Kernel {
        Kernel {
            rows: Arc::clone(&self.rows),
            lambda_bar,
        }
    }

    pub fn len(&self) -> usize {
        self.rows.age_cost.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn is_valid(&self, s: usize, a: Action) -> bool {
        !(a.is_active() && s == self.rows.space.empty_index())
    }

    pub fn cost(&self, s: usize, a: Action) -> f64 {
        self.rows.age_cost[s] + if a.is_active() { self.lambda_bar } else { 0.0 }
    }

    fn row(&self, s: usize, a: Action) -> (&[usize], &[f64]) {
        let r = 2 * s + a.is_active() as usize;
        let (lo, hi) = (self.rows.offsets[r], self.rows.offsets[r + 1]);
        (&self.rows.succ[lo..hi], &self.rows.prob[lo..hi])
    }

    /// Non-zero transitions of `(s, a)`.
    pub fn transitions(&self, s: usize, a: Action) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (succ, prob) = self.row(s, a);
        succ.iter().copied().zip(prob.iter().copied())
    }

    #[inline]
    fn expect(&self, s: usize, a: Action, v: &[f64]) -> f64 {
        let (succ, prob) = self.row(s, a);
        succ.iter().zip(prob).map(|(&t, &p)| p * v[t]).sum()
    }

    /// `C(s, a) + Σ P(s, s'; a) v(s')`.
    pub fn q_value(&self, s: usize, a: Action, v: &[f64]) -> f64 {
        self.cost(s, a) + self.expect(s, a, v)
    }
}

pub fn build_kernel(
    user: &UserSpec,
    dist: &ServiceDistribution,
    lambda_bar: f64,
    space: TruncatedSpace,
) -> Result<Kernel> {
    if space.y_max() < 1 {
        return Err(Error::Precondition("y_max must be >= 1".into()));
    }
    if let Some(k) = dist.support_max() {
        if space.y_max() < k {
            log::warn!("y_max = {} is below the service support end {k}", space.y_max());
        }
    }

    let n = space.len();
    let empty = space.empty_index();
    let origin = space.reference_index();
    let p = user.p;
    let mut age_cost = Vec::with_capacity(n);
    let mut offsets = Vec::with_capacity(2 * n + 1);
    let mut succ = Vec::with_capacity(5 * n);
    let mut prob = Vec::with_capacity(5 * n);
    let mut zero_tail = 0usize;

    offsets.push(0);
    let push = |to: usize, pr: f64, succ: &mut Vec<usize>, prob: &mut Vec<f64>| {
        if pr > 0.0 {
            succ.push(to);
            prob.push(pr);
        }
    };
    for s in 0..n {
        match space.state(s) {
            UserState::Empty => {
                age_cost.push(0.0);
                push(empty, 1.0 - p, &mut succ, &mut prob);
                push(origin, p, &mut succ, &mut prob);
                offsets.push(succ.len());
                // no active action from the empty state
                offsets.push(succ.len());
            }
            UserState::Job { age, progress } => {
                age_cost.push(user.w * age as f64);
                let older = (age + 1).min(space.y_max());
                let passive = space.index(older, progress).expect("in space");
                push(passive, 1.0, &mut succ, &mut prob);
                offsets.push(succ.len());

                let h = match dist.hazard(progress) {
                    Ok(h) => h,
                    Err(_) => {
                        zero_tail += 1;
                        1.0
                    }
                };
                let advanced = space
                    .index(older, (progress + 1).min(space.progress_cap()))
                    .expect("in space");
                push(origin, p * h, &mut succ, &mut prob);
                push(empty, (1.0 - p) * h, &mut succ, &mut prob);
                push(advanced, 1.0 - h, &mut succ, &mut prob);
                offsets.push(succ.len());
            }
        }
    }
    if zero_tail > 0 {
        log::warn!("{zero_tail} states have zero service tail; hazard forced to 1 there");
    }
    let kernel = Kernel {
        rows: Arc::new(KernelRows {
            space,
            age_cost,
            offsets,
            succ,
            prob,
        }),
        lambda_bar,
    };
    debug_assert!(row_sums_ok(&kernel));
    Ok(kernel)
}

fn row_sums_ok(kernel: &Kernel) -> bool {
    (0..kernel.len()).all(|s| {
        [Action::Passive, Action::Active]
            .into_iter()
            .filter(|&a| kernel.is_valid(s, a))
            .all(|a| (kernel.transitions(s, a).map(|(_, p)| p).sum::<f64>() - 1.0).abs() <= PROB_TOL)
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RviOptions {
    /// Stop when the span of successive differences drops below this.
    pub tol: f64,
    pub max_iters: usize,
    /// Aperiodicity weight `τ ∈ (0, 1]`: iterate on `τ P + (1 - τ) I`. The
    /// gain, the optimal actions and the returned relative values (rescaled by
    /// `τ`) are those of the original chain. `1.0` is the plain iteration.
    pub aperiodicity: f64,
    /// State whose value is subtracted each sweep; defaults to `(0, 0)`.
    pub reference: Option<usize>,
}

impl Default for RviOptions {
    fn default() -> Self {
        RviOptions {
            tol: 1e-9,
            max_iters: 100_000,
            aperiodicity: 1.0,
            reference: None,
        }
    }
}

/// Converged relative values (zero at `(0, 0)`) and the average cost.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueFunction {
    pub values: Vec<f64>,
    pub gain: f64,
    pub iterations: usize,
    pub span: f64,
}

pub fn rvi_solve(kernel: &Kernel, opts: &RviOptions) -> Result<ValueFunction> {
    rvi_solve_from(kernel, opts, None)
}

/// Relative value iteration started from `init` (zeros if `None`).
pub fn rvi_solve_from(kernel: &Kernel, opts: &RviOptions, init: Option<&[f64]>) -> Result<ValueFunction> {
    let empty = kernel.space().empty_index();
    iterate(kernel, opts, init, |s, v, tau| {
        let passive = kernel.cost(s, Action::Passive) + tau * kernel.expect(s, Action::Passive, v);
        if s == empty {
            passive
        } else {
            let active = kernel.cost(s, Action::Active) + tau * kernel.expect(s, Action::Active, v);
            passive.min(active)
        }
    })
}

/// Relative values of a fixed policy under an arbitrary stage cost.
pub fn evaluate_policy(
    kernel: &Kernel,
    policy: &[Action],
    cost: impl Fn(usize, Action) -> f64,
    opts: &RviOptions,
    init: Option<&[f64]>,
) -> Result<ValueFunction> {
    check_policy(kernel, policy)?;
    iterate(kernel, opts, init, |s, v, tau| {
        let a = policy[s];
        cost(s, a) + tau * kernel.expect(s, a, v)
    })
}

fn check_policy(kernel: &Kernel, policy: &[Action]) -> Result<()> {
    if policy.len() != kernel.len() {
        return Err(Error::Precondition(format!(
            "policy covers {} states, kernel has {}",
            policy.len(),
            kernel.len()
        )));
    }
    if let Some(s) = (0..policy.len()).find(|&s| !kernel.is_valid(s, policy[s])) {
        return Err(Error::Precondition(format!(
            "policy activates state {:?}",
            kernel.space().state(s)
        )));
    }
    Ok(())
}

fn iterate(
    kernel: &Kernel,
    opts: &RviOptions,
    init: Option<&[f64]>,
    backup: impl Fn(usize, &[f64], f64) -> f64,
) -> Result<ValueFunction> {
    let tau = opts.aperiodicity;
    if !(tau > 0.0 && tau <= 1.0) {
        return Err(Error::Precondition(format!("aperiodicity {tau} outside (0, 1]")));
    }
    if !(opts.tol > 0.0) {
        return Err(Error::Precondition("tolerance must be positive".into()));
    }
    let n = kernel.len();
    let reference = opts.reference.unwrap_or(kernel.space().reference_index());
    let mut v = match init {
        Some(init) if init.len() == n => init.to_vec(),
        Some(_) => return Err(Error::Precondition("warm start has the wrong length".into())),
        None => vec![0.0; n],
    };
    let mut next = vec![0.0; n];
    let mut span = f64::INFINITY;

    for it in 1..=opts.max_iters {
        let offset = v[reference];
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for s in 0..n {
            let x = backup(s, &v, tau) + (1.0 - tau) * v[s] - offset;
            let d = x - v[s];
            lo = lo.min(d);
            hi = hi.max(d);
            next[s] = x;
        }
        std::mem::swap(&mut v, &mut next);
        span = hi - lo;
        if !span.is_finite() {
            break;
        }
        if span < opts.tol {
            let gain = offset + 0.5 * (hi + lo);
            let origin = v[kernel.space().reference_index()];
            let values = v.iter().map(|x| tau * (x - origin)).collect();
            return Ok(ValueFunction {
                values,
                gain,
                iterations: it,
                span,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iters,
        span,
    })
}

/// Minimizing action for `s` under `vf`; ties go to the passive action.
pub fn greedy_action(kernel: &Kernel, vf: &ValueFunction, s: usize) -> Action {
    if !kernel.is_valid(s, Action::Active) {
        return Action::Passive;
    }
    let passive = kernel.q_value(s, Action::Passive, &vf.values);
    let active = kernel.q_value(s, Action::Active, &vf.values);
    if active < passive {
        Action::Active
    } else {
        Action::Passive
    }
}

pub fn greedy_policy(kernel: &Kernel, vf: &ValueFunction) -> Vec<Action> {
    (0..kernel.len()).map(|s| greedy_action(kernel, vf, s)).collect()
}

/// `Q(s, passive) - Q(s, active)`; positive means serving is preferred.
pub fn q_gap(kernel: &Kernel, vf: &ValueFunction, s: usize) -> f64 {
    assert!(
        kernel.is_valid(s, Action::Active),
        "q_gap is undefined at the empty state"
    );
    kernel.q_value(s, Action::Passive, &vf.values) - kernel.q_value(s, Action::Active, &vf.values)
}

/// Long-run fraction of slots in which `policy` serves.
pub fn activation_frequency(kernel: &Kernel, policy: &[Action], opts: &RviOptions) -> Result<f64> {
    activation_frequency_from(kernel, policy, opts, None).map(|vf| vf.gain)
}

pub fn activation_frequency_from(
    kernel: &Kernel,
    policy: &[Action],
    opts: &RviOptions,
    init: Option<&[f64]>,
) -> Result<ValueFunction> {
    evaluate_policy(
        kernel,
        policy,
        |_, a| if a.is_active() { 1.0 } else { 0.0 },
        opts,
        init,
    )
}

/// One user's MDP solved at a fixed activation price.
#[derive(Clone, Debug)]
pub struct SolvedArm {
    pub kernel: Kernel,
    pub values: ValueFunction,
}

impl SolvedArm {
    pub fn solve(
        user: &UserSpec,
        dist: &ServiceDistribution,
        lambda_bar: f64,
        space: TruncatedSpace,
        opts: &RviOptions,
    ) -> Result<Self> {
        let kernel = build_kernel(user, dist, lambda_bar, space)?;
        let values = rvi_solve(&kernel, opts)?;
        Ok(SolvedArm { kernel, values })
    }

    pub fn q_gap(&self, s: usize) -> f64 {
        q_gap(&self.kernel, &self.values, s)
    }

    pub fn policy(&self) -> Vec<Action> {
        greedy_policy(&self.kernel, &self.values)
    }
}

/// CSV dump `delta,progress,value,action` of a solved arm.
pub fn write_values_csv(kernel: &Kernel, vf: &ValueFunction, out: &mut dyn Write) -> std::io::Result<()> {
    writeln!(out, "delta,progress,value,action")?;
    for (s, state) in kernel.space().states().enumerate() {
        let progress = state.progress().map_or("inf".to_string(), |x| x.to_string());
        let action = greedy_action(kernel, vf, s).is_active() as u8;
        writeln!(out, "{},{progress},{},{action}", state.age(), vf.values[s])?;
    }
    Ok(())
}
