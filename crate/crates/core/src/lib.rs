//! Scheduling jobs from many users onto task-specific machine networks so as
//! to keep the weighted *age of job* low.
//!
//! A central server holds one unit buffer per user. Each slot it may run at
//! most `M̄` jobs overall and at most `M̄_i` on network `i`; served jobs are
//! preempted and resumed freely, keeping their progress. The crate provides
//! the slot simulator, several index policies (Lyapunov and heuristic
//! max-weight, net-gain maximization, the closed-form Whittle index for
//! geometric service and a bisection-based Whittle-like index for general
//! service), the per-user MDP machinery they rest on, and a sweep harness.

// `!(x > 0.0)` style checks are deliberate: they reject NaN alongside bad values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod harness;
pub mod maxweight;
pub mod mdp;
pub mod model;
pub mod ngm;
pub mod sim;
pub mod whittle;

pub use error::{Error, Result};
pub use model::{
    base_config, BaseVariant, NetworkSpec, ServiceDistribution, SystemConfig, SystemState, UserSpec,
    UserState,
};
pub use sim::{run, Policy, RunMetrics, ScheduleDecision};
