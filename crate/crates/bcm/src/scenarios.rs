//! Seeded random scenarios that keep every group within the t-condition.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adversary::{AdversaryStrategy, Injection};
use crate::config::{ScenarioConfig, WorkloadEvent};
use crate::types::NodeId;

/// Gap between two handoffs of the same host, long enough for the first to
/// finish under the slowest generated latencies.
const HANDOFF_GAP: u64 = 16;
const WORKLOAD_SPAN: u64 = 60;

fn strategy(rng: &mut ChaCha8Rng, h: NodeId) -> AdversaryStrategy {
    match rng.random_range(0..7) {
        0 => AdversaryStrategy::Conforming,
        1 => AdversaryStrategy::Crash { at_tick: rng.random_range(0..WORKLOAD_SPAN) },
        2 => AdversaryStrategy::Silent,
        3 => AdversaryStrategy::RefuseEcho,
        4 => AdversaryStrategy::DuplicateBroadcast {
            payload: format!("dup-{h}").as_str().into(),
            times: rng.random_range(2..=3),
        },
        5 => AdversaryStrategy::CausalViolator,
        _ => AdversaryStrategy::ArbitraryInject {
            schedule: (0..rng.random_range(1..=2))
                .map(|k| Injection {
                    tick: rng.random_range(0..WORKLOAD_SPAN),
                    seq: 1000 + k,
                    payload: format!("junk-{h}-{k}").as_str().into(),
                })
                .collect(),
        },
    }
}

/// A scenario with 2-4 stations, 6-20 hosts, fewer than a third Byzantine,
/// 1-10 broadcasts and 0-5 handoffs of honest hosts. Byzantine hosts never
/// move and each group keeps three times its Byzantine count below the
/// number of members that never leave it.
pub fn random_compliant(seed: u64) -> ScenarioConfig {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_mss = rng.random_range(2..=4u32);
    let n_mh = rng.random_range(6..=20u32);
    let mut c = ScenarioConfig::single_group(n_mss, n_mh, 1);
    for i in 1..=n_mh {
        c.initial_assignment.insert(NodeId::mh(i), NodeId::mss(rng.random_range(1..=n_mss)));
    }
    c.seed = seed;
    c.channel_latency = rng.random_range(1..=2);
    c.causal_latency = Some(rng.random_range(1..=6));
    c.handoff_latency = Some(rng.random_range(1..=4));
    c.transit_delay = rng.random_range(1..=3);

    let hosts: Vec<NodeId> = (1..=n_mh).map(NodeId::mh).collect();
    let n_handoffs = rng.random_range(0..=5);
    let mut movers: BTreeSet<NodeId> = BTreeSet::new();
    let mut at: BTreeMap<NodeId, NodeId> = c.initial_assignment.clone();
    let mut free_at: BTreeMap<NodeId, u64> = BTreeMap::new();
    let mut handoffs = Vec::new();
    for _ in 0..n_handoffs {
        let h = *hosts.choose(&mut rng).expect("hosts");
        let earliest = free_at.get(&h).copied().unwrap_or(0);
        let tick = earliest + rng.random_range(0..WORKLOAD_SPAN / 2);
        let dests: Vec<NodeId> = (1..=n_mss).map(NodeId::mss).filter(|s| *s != at[&h]).collect();
        let dest = *dests.choose(&mut rng).expect("two stations");
        at.insert(h, dest);
        free_at.insert(h, tick + HANDOFF_GAP);
        movers.insert(h);
        handoffs.push(WorkloadEvent::Handoff { tick, mh: h, dest });
    }

    let max_byz = n_mh.div_ceil(3) - 1;
    let mut want = rng.random_range(0..=max_byz) as usize;
    let stayers: Vec<NodeId> = hosts.iter().copied().filter(|h| !movers.contains(h)).collect();
    let stable = |s: NodeId| stayers.iter().filter(|h| c.initial_assignment[*h] == s).count();
    let byz = loop {
        let mut picked: Vec<NodeId> = Vec::new();
        let mut pool = stayers.clone();
        let mut t_of: BTreeMap<NodeId, usize> = BTreeMap::new();
        while picked.len() < want && !pool.is_empty() {
            let k = rng.random_range(0..pool.len());
            let h = pool.swap_remove(k);
            let s = c.initial_assignment[&h];
            let t = t_of.get(&s).copied().unwrap_or(0) + 1;
            if 3 * t < stable(s) {
                t_of.insert(s, t);
                picked.push(h);
            }
        }
        if picked.len() == want {
            break picked;
        }
        want -= 1;
    };
    for &h in &byz {
        c.byzantine_set.insert(h.index);
        let s = strategy(&mut rng, h);
        c.adversary_strategy.insert(h, s);
    }

    let n_bcast = rng.random_range(1..=10);
    let mut workload = Vec::new();
    for k in 0..n_bcast {
        let tick = rng.random_range(0..WORKLOAD_SPAN);
        let payload = format!("p{k}").as_str().into();
        if rng.random_bool(0.15) {
            workload.push(WorkloadEvent::MssBroadcast { tick, mss: NodeId::mss(rng.random_range(1..=n_mss)), payload });
        } else {
            workload.push(WorkloadEvent::Broadcast { tick, mh: *hosts.choose(&mut rng).expect("hosts"), payload });
        }
    }
    workload.extend(handoffs);
    workload.sort_by_key(|w| w.tick());
    c.workload = workload;
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::checker::t_compliant;

    #[test]
    fn generated_scenarios_stay_in_bounds() {
        for seed in 0..300 {
            let c = random_compliant(seed);
            c.validate().unwrap();
            assert!((2..=4).contains(&c.n_mss));
            assert!((6..=20).contains(&c.n_mh));
            assert!((c.byzantine_set.len() as u32) < c.n_mh.div_ceil(3).max(1));
            let handoffs = c.workload.iter().filter(|w| matches!(w, WorkloadEvent::Handoff { .. })).count();
            assert!(handoffs <= 5);
            let bcasts = c.workload.len() - handoffs;
            assert!((1..=10).contains(&bcasts));
            for j in 1..=c.n_mss {
                let members = c.members_of(NodeId::mss(j));
                let t = members.iter().filter(|h| c.is_byzantine(**h)).count() as u32;
                assert!(t_compliant(members.len() as u32, t));
            }
        }
    }

    #[test]
    fn same_seed_same_scenario() {
        assert_eq!(random_compliant(42), random_compliant(42));
        assert_ne!(random_compliant(1), random_compliant(2));
    }
}
