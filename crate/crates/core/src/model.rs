//! System description: users, networks, service laws and per-slot state.
//!
//! Service-time pmfs are one-based: `probs[k - 1]` is the probability that a
//! job needs exactly `k` slots of service. Every job needs at least one slot.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute tolerance for probability bookkeeping.
pub const PROB_TOL: f64 = 1e-12;

/// Per-network job-completion-time law.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ServiceDistribution {
    /// Finite support, `probs[k - 1] = f(k)` for `k = 1..=K_max`.
    Pmf { probs: Vec<f64> },
    /// Completes at the end of each served slot with probability `q`.
    Geometric { q: f64 },
}

impl ServiceDistribution {
    pub fn pmf(probs: Vec<f64>) -> Result<Self> {
        let dist = ServiceDistribution::Pmf { probs };
        dist.validate()?;
        Ok(dist.normalized())
    }

    pub fn geometric(q: f64) -> Result<Self> {
        let dist = ServiceDistribution::Geometric { q };
        dist.validate()?;
        Ok(dist)
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ServiceDistribution::Pmf { probs } => {
                if probs.is_empty() {
                    return Err(Error::InvalidConfig("service pmf is empty".into()));
                }
                if let Some(bad) = probs.iter().find(|&&f| !(f >= 0.0) || !f.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "service pmf entry {bad} is not a probability"
                    )));
                }
                let total: f64 = probs.iter().sum();
                if (total - 1.0).abs() > PROB_TOL {
                    return Err(Error::InvalidConfig(format!(
                        "service pmf sums to {total}, expected 1"
                    )));
                }
                Ok(())
            }
            ServiceDistribution::Geometric { q } => {
                if *q > 0.0 && *q <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::InvalidConfig(format!(
                        "geometric success probability {q} outside (0, 1]"
                    )))
                }
            }
        }
    }

    /// Drops trailing zero entries so the support ends at the last positive mass.
    pub fn normalized(self) -> Self {
        match self {
            ServiceDistribution::Pmf { mut probs } => {
                while probs.len() > 1 && probs.last() == Some(&0.0) {
                    probs.pop();
                }
                ServiceDistribution::Pmf { probs }
            }
            geo => geo,
        }
    }

    pub fn is_geometric(&self) -> bool {
        matches!(self, ServiceDistribution::Geometric { .. })
    }

    /// Largest service requirement with positive mass, `None` if unbounded.
    pub fn support_max(&self) -> Option<u64> {
        match self {
            ServiceDistribution::Pmf { probs } => {
                let last = probs.iter().rposition(|&f| f > 0.0).unwrap_or(0);
                Some(last as u64 + 1)
            }
            ServiceDistribution::Geometric { .. } => None,
        }
    }

    /// Largest progress value an unfinished job can carry.
    pub fn max_progress(&self) -> Option<u64> {
        self.support_max().map(|k| k - 1)
    }

    /// `f(k)`, the probability that a job needs exactly `k` slots.
    pub fn mass(&self, k: u64) -> f64 {
        if k == 0 {
            return 0.0;
        }
        match self {
            ServiceDistribution::Pmf { probs } => {
                probs.get((k - 1) as usize).copied().unwrap_or(0.0)
            }
            ServiceDistribution::Geometric { q } => q * (1.0 - q).powf((k - 1) as f64),
        }
    }

    /// `sum_{k > x} f(k)`: probability the job survives `x` served slots.
    pub fn tail_sum(&self, x: u64) -> f64 {
        match self {
            ServiceDistribution::Pmf { probs } => {
                let start = x.min(probs.len() as u64) as usize;
                probs[start..].iter().sum()
            }
            ServiceDistribution::Geometric { q } => (1.0 - q).powf(x as f64),
        }
    }

    /// Completion probability of the next served slot after `x` served slots.
    pub fn hazard(&self, x: u64) -> Result<f64> {
        match self {
            ServiceDistribution::Pmf { .. } => {
                let tail = self.tail_sum(x);
                if tail <= 0.0 {
                    return Err(Error::ZeroTail { progress: x });
                }
                Ok(self.mass(x + 1) / tail)
            }
            ServiceDistribution::Geometric { q } => Ok(*q),
        }
    }

    /// Probability the job survives the next served slot, `1 - hazard`.
    pub fn alpha(&self, x: u64) -> Result<f64> {
        match self {
            ServiceDistribution::Pmf { .. } => {
                let tail = self.tail_sum(x);
                if tail <= 0.0 {
                    return Err(Error::ZeroTail { progress: x });
                }
                Ok(self.tail_sum(x + 1) / tail)
            }
            ServiceDistribution::Geometric { q } => Ok(1.0 - q),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserSpec {
    /// Per-slot arrival probability.
    pub p: f64,
    /// Age weight.
    pub w: f64,
}

impl UserSpec {
    pub fn new(p: f64, w: f64) -> Self {
        UserSpec { p, w }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    /// Maximum number of this network's jobs in service per slot.
    pub capacity: usize,
    pub service: ServiceDistribution,
    pub users: Vec<UserSpec>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    /// Maximum number of jobs the central server runs per slot.
    pub server_capacity: usize,
    pub networks: Vec<NetworkSpec>,
}

impl SystemConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: SystemConfig = serde_json::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("malformed config: {e}")))?;
        config.into_validated()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::InvalidConfig(msg) => Error::InvalidConfig(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    fn into_validated(mut self) -> Result<Self> {
        for net in &mut self.networks {
            net.service = net.service.clone().normalized();
        }
        for warning in self.validate()? {
            log::warn!("{warning}");
        }
        Ok(self)
    }

    /// Checks hard invariants; returns advisory warnings for soft ones.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.server_capacity == 0 {
            return Err(Error::InvalidConfig("server_capacity must be >= 1".into()));
        }
        if self.networks.is_empty() {
            return Err(Error::InvalidConfig("at least one network is required".into()));
        }
        for (i, net) in self.networks.iter().enumerate() {
            if net.capacity == 0 {
                return Err(Error::InvalidConfig(format!("network {i}: capacity must be >= 1")));
            }
            if net.users.is_empty() {
                return Err(Error::InvalidConfig(format!("network {i}: no users")));
            }
            net.service
                .validate()
                .map_err(|e| Error::InvalidConfig(format!("network {i}: {e}")))?;
            for (j, u) in net.users.iter().enumerate() {
                if !(u.p > 0.0 && u.p <= 1.0) {
                    return Err(Error::InvalidConfig(format!(
                        "user ({i}, {j}): arrival probability {} outside (0, 1]",
                        u.p
                    )));
                }
                if !(u.w > 0.0 && u.w.is_finite()) {
                    return Err(Error::InvalidConfig(format!(
                        "user ({i}, {j}): weight {} must be positive",
                        u.w
                    )));
                }
            }
        }

        let mut warnings = Vec::new();
        let cap_sum: usize = self.networks.iter().map(|n| n.capacity).sum();
        if cap_sum <= self.server_capacity {
            warnings.push(format!(
                "sum of network capacities ({cap_sum}) does not exceed server capacity ({}); \
                 the server constraint never binds",
                self.server_capacity
            ));
        }
        for (i, net) in self.networks.iter().enumerate() {
            if net.capacity >= self.server_capacity {
                warnings.push(format!(
                    "network {i} capacity ({}) is not below server capacity ({})",
                    net.capacity, self.server_capacity
                ));
            }
        }
        Ok(warnings)
    }

    pub fn num_users(&self) -> usize {
        self.networks.iter().map(|n| n.users.len()).sum()
    }

    /// `(i, j)` for every user, network-major.
    pub fn user_indices(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.networks
            .iter()
            .enumerate()
            .flat_map(|(i, n)| (0..n.users.len()).map(move |j| (i, j)))
    }

    pub fn user(&self, i: usize, j: usize) -> &UserSpec {
        &self.networks[i].users[j]
    }

    pub fn all_geometric(&self) -> Result<()> {
        match self.networks.iter().position(|n| !n.service.is_geometric()) {
            Some(network) => Err(Error::NotGeometric { network }),
            None => Ok(()),
        }
    }
}

/// Which base service variant to build.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaseVariant {
    General,
    Geometric,
}

const BASE_P: [[f64; 3]; 3] = [[0.3, 0.4, 0.5], [0.4, 0.2, 0.6], [0.1, 0.3, 0.2]];
const BASE_W: [[f64; 3]; 3] = [[2.0, 3.0, 1.0], [1.0, 2.0, 3.0], [4.0, 1.0, 2.0]];
const BASE_Q: [f64; 3] = [0.3, 0.5, 0.7];

/// Three networks of three users, server capacity 2, per-network capacity 2.
pub fn base_config(variant: BaseVariant) -> SystemConfig {
    let general: [&[f64]; 3] = [
        &[0.1, 0.2, 0.1, 0.1, 0.4, 0.1],
        &[0.2, 0.3, 0.5],
        &[0.1, 0.5, 0.3, 0.1],
    ];
    let networks = (0..3)
        .map(|i| NetworkSpec {
            capacity: 2,
            service: match variant {
                BaseVariant::General => ServiceDistribution::Pmf {
                    probs: general[i].to_vec(),
                },
                BaseVariant::Geometric => ServiceDistribution::Geometric { q: BASE_Q[i] },
            },
            users: (0..3).map(|j| UserSpec::new(BASE_P[i][j], BASE_W[i][j])).collect(),
        })
        .collect();
    SystemConfig {
        server_capacity: 2,
        networks,
    }
}

pub const BASE_GENERAL_JSON: &str = include_str!("../configs/base_general.json");
pub const BASE_GEOMETRIC_JSON: &str = include_str!("../configs/base_geometric.json");

/// Buffer state of one user: empty, or a job with its age and served slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UserState {
    Empty,
    Job { age: u64, progress: u64 },
}

impl UserState {
    pub fn job(age: u64, progress: u64) -> Self {
        UserState::Job { age, progress }
    }

    /// Age of job; zero for an empty buffer.
    pub fn age(&self) -> u64 {
        match *self {
            UserState::Empty => 0,
            UserState::Job { age, .. } => age,
        }
    }

    pub fn progress(&self) -> Option<u64> {
        match *self {
            UserState::Empty => None,
            UserState::Job { progress, .. } => Some(progress),
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, UserState::Empty)
    }

    pub fn check(&self, dist: &ServiceDistribution) -> Result<()> {
        if let UserState::Job { age, progress } = *self {
            if progress > age {
                return Err(Error::Precondition(format!(
                    "progress {progress} exceeds age {age}"
                )));
            }
            if let Some(max) = dist.max_progress() {
                if progress > max {
                    return Err(Error::Precondition(format!(
                        "progress {progress} beyond service support (max {max})"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SystemState {
    pub users: Vec<Vec<UserState>>,
    pub t: u64,
}

impl SystemState {
    /// All buffers empty at slot 1.
    pub fn empty(config: &SystemConfig) -> Self {
        SystemState {
            users: config
                .networks
                .iter()
                .map(|n| vec![UserState::Empty; n.users.len()])
                .collect(),
            t: 1,
        }
    }

    pub fn get(&self, i: usize, j: usize) -> UserState {
        self.users[i][j]
    }

    pub fn matches(&self, config: &SystemConfig) -> bool {
        self.users.len() == config.networks.len()
            && self
                .users
                .iter()
                .zip(&config.networks)
                .all(|(row, net)| row.len() == net.users.len())
    }
}
