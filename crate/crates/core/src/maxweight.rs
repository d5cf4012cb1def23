//! Capacity-constrained job selection and the two max-weight index rules.
//!
//! Every index policy reduces a slot to: score each buffered job, then pick a
//! maximum-score subset under the per-network and server caps. Those caps form
//! a laminar matroid, so greedy in descending score is exact.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::model::{SystemConfig, SystemState, UserState};
use crate::sim::{buffered, Policy, ScheduleDecision};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub network: usize,
    pub user: usize,
    pub priority: f64,
}

impl Candidate {
    pub fn new(network: usize, user: usize, priority: f64) -> Self {
        Candidate {
            network,
            user,
            priority,
        }
    }
}

/// Priority descending, then smaller network, then smaller user.
fn rank(a: &Candidate, b: &Candidate) -> Ordering {
    b.priority
        .total_cmp(&a.priority)
        .then(a.network.cmp(&b.network))
        .then(a.user.cmp(&b.user))
}

/// `w (Δ + 1) (1 - α)`: expected one-slot drift reduction from serving.
pub fn mwl_index(w: f64, age: u64, alpha: f64) -> f64 {
    w * (age as f64 + 1.0) * (1.0 - alpha)
}

pub fn mwh_index(w: f64, age: u64) -> f64 {
    w * age as f64
}

/// Greedy maximum-priority feasible selection. Non-positive priorities are
/// never selected.
pub fn select_jobs(candidates: &[Candidate], config: &SystemConfig) -> ScheduleDecision {
    let mut order: Vec<&Candidate> = candidates.iter().filter(|c| c.priority > 0.0).collect();
    order.sort_by(|a, b| rank(a, b));

    let mut per_net = vec![0usize; config.networks.len()];
    let mut served = Vec::with_capacity(config.server_capacity);
    for c in order {
        if served.len() == config.server_capacity {
            break;
        }
        if per_net[c.network] < config.networks[c.network].capacity {
            per_net[c.network] += 1;
            served.push((c.network, c.user));
        }
    }
    ScheduleDecision::new(served)
}

pub const BRUTE_FORCE_MAX: usize = 20;

/// Exhaustive reference for [`select_jobs`].
///
/// Among maximum-total feasible subsets, returns the one whose members, listed
/// in rank order, have the lexicographically smallest rank positions.
pub fn brute_force_select(candidates: &[Candidate], config: &SystemConfig) -> Result<ScheduleDecision> {
    if candidates.len() > BRUTE_FORCE_MAX {
        return Err(Error::TooLarge {
            count: candidates.len(),
            max: BRUTE_FORCE_MAX,
        });
    }
    let mut ranked: Vec<Candidate> = candidates.iter().copied().filter(|c| c.priority > 0.0).collect();
    ranked.sort_by(rank);
    let n = ranked.len();

    let mut best: Option<(f64, Vec<usize>)> = None;
    for mask in 0u32..(1u32 << n) {
        if mask.count_ones() as usize > config.server_capacity {
            continue;
        }
        let members: Vec<usize> = (0..n).filter(|k| mask & (1 << k) != 0).collect();
        let mut per_net = vec![0usize; config.networks.len()];
        let feasible = members.iter().all(|&k| {
            let i = ranked[k].network;
            per_net[i] += 1;
            per_net[i] <= config.networks[i].capacity
        });
        if !feasible {
            continue;
        }
        let total: f64 = members.iter().map(|&k| ranked[k].priority).sum();
        let better = match &best {
            None => true,
            Some((bt, bm)) => total > *bt || (total == *bt && members < *bm),
        };
        if better {
            best = Some((total, members));
        }
    }
    let members = best.map(|(_, m)| m).unwrap_or_default();
    Ok(ScheduleDecision::new(
        members
            .into_iter()
            .map(|k| (ranked[k].network, ranked[k].user))
            .collect(),
    ))
}

/// Sum of candidate priorities over the selected users.
pub fn objective(decision: &ScheduleDecision, candidates: &[Candidate]) -> f64 {
    let mut chosen: Vec<f64> = candidates
        .iter()
        .filter(|c| decision.contains(c.network, c.user))
        .map(|c| c.priority)
        .collect();
    chosen.sort_by(|a, b| b.total_cmp(a));
    chosen.iter().sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaxWeightRule {
    /// One-slot Lyapunov drift minimizer.
    Lyapunov,
    /// Plain `w Δ`.
    Heuristic,
}

pub struct MaxWeight {
    rule: MaxWeightRule,
}

impl MaxWeight {
    pub fn new(rule: MaxWeightRule) -> Self {
        MaxWeight { rule }
    }

    pub fn lyapunov() -> Self {
        Self::new(MaxWeightRule::Lyapunov)
    }

    pub fn heuristic() -> Self {
        Self::new(MaxWeightRule::Heuristic)
    }
}

pub(crate) fn candidates_with(
    state: &SystemState,
    mut priority: impl FnMut(usize, usize, UserState) -> Result<f64>,
) -> Result<Vec<Candidate>> {
    buffered(state)
        .map(|(i, j, s)| Ok(Candidate::new(i, j, priority(i, j, s)?)))
        .collect()
}

impl Policy for MaxWeight {
    fn name(&self) -> &str {
        match self.rule {
            MaxWeightRule::Lyapunov => "mwl",
            MaxWeightRule::Heuristic => "mwh",
        }
    }

    fn decide(&self, config: &SystemConfig, state: &SystemState) -> Result<ScheduleDecision> {
        let candidates = candidates_with(state, |i, j, s| {
            let net = &config.networks[i];
            let w = net.users[j].w;
            Ok(match self.rule {
                MaxWeightRule::Lyapunov => {
                    let progress = s.progress().expect("buffered job");
                    mwl_index(w, s.age(), net.service.alpha(progress)?)
                }
                MaxWeightRule::Heuristic => mwh_index(w, s.age()),
            })
        })?;
        Ok(select_jobs(&candidates, config))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NetworkSpec, ServiceDistribution, UserSpec};
    use proptest::prelude::*;

    fn caps(server: usize, nets: &[usize]) -> SystemConfig {
        SystemConfig {
            server_capacity: server,
            networks: nets
                .iter()
                .map(|&c| NetworkSpec {
                    capacity: c,
                    service: ServiceDistribution::Geometric { q: 0.5 },
                    users: vec![UserSpec::new(0.5, 1.0); 20],
                })
                .collect(),
        }
    }

    #[test]
    fn mwl_examples() {
        assert_eq!(mwl_index(3.0, 2, 0.5), 4.5);
        let pmf = ServiceDistribution::pmf(vec![0.2, 0.3, 0.5]).unwrap();
        assert_eq!(mwl_index(1.0, 0, pmf.alpha(2).unwrap()), 1.0);
        assert_eq!(mwl_index(7.5, 9, 1.0), 0.0);
    }

    #[test]
    fn mwh_examples() {
        assert_eq!(mwh_index(4.0, 7), 28.0);
        assert_eq!(mwh_index(2.0, 0), 0.0);
        assert_eq!(mwh_index(1.0, 1), 1.0);
    }

    #[test]
    fn select_examples() {
        let cfg = caps(2, &[2, 2]);
        let cands = [
            Candidate::new(0, 0, 5.0),
            Candidate::new(0, 1, 3.0),
            Candidate::new(1, 0, 4.0),
        ];
        let d = select_jobs(&cands, &cfg);
        assert_eq!(d.served(), &[(0, 0), (1, 0)]);
        assert_eq!(objective(&d, &cands), 9.0);
        assert_eq!(d, brute_force_select(&cands, &cfg).unwrap());

        let neg = [Candidate::new(0, 0, -1.0)];
        assert!(select_jobs(&neg, &cfg).is_empty());
        assert!(brute_force_select(&neg, &cfg).unwrap().is_empty());

        let cfg = caps(5, &[2]);
        let one_net = [
            Candidate::new(0, 0, 9.0),
            Candidate::new(0, 1, 8.0),
            Candidate::new(0, 2, 7.0),
        ];
        let d = select_jobs(&one_net, &cfg);
        assert_eq!(d.served(), &[(0, 0), (0, 1)]);
        assert_eq!(d, brute_force_select(&one_net, &cfg).unwrap());
    }

    #[test]
    fn brute_force_edges() {
        let cfg = caps(3, &[1, 1]);
        assert!(brute_force_select(&[], &cfg).unwrap().is_empty());
        let one = [Candidate::new(1, 4, 0.3)];
        assert_eq!(brute_force_select(&one, &cfg).unwrap().served(), &[(1, 4)]);
        let many: Vec<_> = (0..21).map(|j| Candidate::new(0, j, 1.0)).collect();
        assert!(matches!(
            brute_force_select(&many, &cfg),
            Err(Error::TooLarge { count: 21, .. })
        ));
    }

    #[test]
    fn ties_break_toward_smaller_indices() {
        let cfg = caps(2, &[2, 2, 2]);
        let cands = [
            Candidate::new(2, 0, 1.0),
            Candidate::new(1, 1, 1.0),
            Candidate::new(1, 0, 1.0),
        ];
        assert_eq!(select_jobs(&cands, &cfg).served(), &[(1, 0), (1, 1)]);
    }

    fn instance() -> impl Strategy<Value = (SystemConfig, Vec<Candidate>)> {
        (1usize..5, prop::collection::vec(1usize..4, 1..5)).prop_flat_map(|(server, nets)| {
            let n = nets.len();
            let cands = prop::collection::vec((0..n, -3i32..10), 0..=12);
            (Just(caps(server, &nets)), cands)
        })
        .prop_map(|(cfg, raw)| {
            let mut next_user = vec![0usize; cfg.networks.len()];
            let cands = raw
                .into_iter()
                .map(|(i, p)| {
                    let j = next_user[i];
                    next_user[i] += 1;
                    Candidate::new(i, j, p as f64)
                })
                .collect();
            (cfg, cands)
        })
    }

    proptest! {
        #[test]
        fn greedy_matches_brute_force((cfg, cands) in instance()) {
            let greedy = select_jobs(&cands, &cfg);
            let brute = brute_force_select(&cands, &cfg).unwrap();
            prop_assert_eq!(objective(&greedy, &cands), objective(&brute, &cands));
            prop_assert_eq!(greedy, brute);
        }

        #[test]
        fn mwl_scale_covariant(w in 0.1f64..10.0, gamma in 0.1f64..10.0, age in 0u64..100, alpha in 0.0f64..1.0) {
            let base = mwl_index(w, age, alpha);
            let scaled = mwl_index(gamma * w, age, alpha);
            prop_assert!((scaled - gamma * base).abs() <= 1e-12 * scaled.abs().max(1.0));
        }

        #[test]
        fn mwl_geometric_ignores_progress(q in 0.01f64..1.0, age in 0u64..50, x in 0u64..50, y in 0u64..50) {
            let d = ServiceDistribution::Geometric { q };
            let a = mwl_index(2.0, age, d.alpha(x).unwrap());
            let b = mwl_index(2.0, age, d.alpha(y).unwrap());
            prop_assert_eq!(a, b);
            prop_assert!((a - 2.0 * (age as f64 + 1.0) * q).abs() < 1e-12 * a.max(1.0));
        }
    }
}
