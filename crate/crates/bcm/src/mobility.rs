//! Poisson join/leave traffic turned into concrete handoffs.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};

use crate::config::{ScenarioConfig, WorkloadEvent};
use crate::types::NodeId;

/// Event classes, in the order of `MobilityModel::poisson_rates`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MobilityClass {
    ByzantineLeave,
    HonestLeave,
    ByzantineJoin,
    HonestJoin,
}

impl MobilityClass {
    pub const ALL: [MobilityClass; 4] = [
        MobilityClass::ByzantineLeave,
        MobilityClass::HonestLeave,
        MobilityClass::ByzantineJoin,
        MobilityClass::HonestJoin,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct MobilityPlan {
    /// Poisson arrivals per class within the horizon.
    pub arrivals: [u64; 4],
    /// Arrivals that found a host to move.
    pub realized: [u64; 4],
    pub handoffs: Vec<(MobilityClass, WorkloadEvent)>,
}

impl MobilityPlan {
    pub fn empty() -> Self {
        MobilityPlan { arrivals: [0; 4], realized: [0; 4], handoffs: Vec::new() }
    }

    pub fn count(&self, class: MobilityClass) -> u64 {
        self.arrivals[class as usize]
    }
}

/// Ticks a host is left alone after a scheduled move so that its handoff
/// finishes before the next one.
const SETTLE_TICKS: u64 = 6;

pub fn schedule_mobility(config: &ScenarioConfig) -> MobilityPlan {
    let Some(model) = &config.mobility_model else {
        return MobilityPlan::empty();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let horizon = model.horizon_ticks as f64;
    let mut times: Vec<(f64, MobilityClass)> = Vec::new();
    let mut plan = MobilityPlan::empty();
    for class in MobilityClass::ALL {
        let rate = model.poisson_rates[class as usize];
        if rate <= 0.0 || horizon <= 0.0 {
            continue;
        }
        let exp = Exp::new(rate / horizon).expect("positive rate");
        let mut t = 0.0;
        loop {
            t += exp.sample(&mut rng);
            if t >= horizon {
                break;
            }
            times.push((t, class));
            plan.arrivals[class as usize] += 1;
        }
    }
    times.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let target = model.target_mss;
    let others: Vec<NodeId> = (1..=config.n_mss).map(NodeId::mss).filter(|s| *s != target).collect();
    let mut at: BTreeMap<NodeId, NodeId> = config.initial_assignment.clone();
    let mut busy_until: BTreeMap<NodeId, u64> = BTreeMap::new();
    for (t, class) in times {
        let tick = t as u64;
        let joining = matches!(class, MobilityClass::ByzantineJoin | MobilityClass::HonestJoin);
        let byz = matches!(class, MobilityClass::ByzantineLeave | MobilityClass::ByzantineJoin);
        let candidates: Vec<NodeId> = at
            .iter()
            .filter(|(_, s)| (**s == target) != joining)
            .filter(|(h, _)| config.is_byzantine(**h) == byz)
            .filter(|(h, _)| busy_until.get(*h).is_none_or(|&b| b <= tick))
            .map(|(h, _)| *h)
            .collect();
        if candidates.is_empty() || others.is_empty() {
            continue;
        }
        let mh = candidates[rng.random_range(0..candidates.len())];
        let dest = if joining { target } else { others[rng.random_range(0..others.len())] };
        at.insert(mh, dest);
        busy_until.insert(mh, tick + SETTLE_TICKS);
        plan.realized[class as usize] += 1;
        plan.handoffs.push((class, WorkloadEvent::Handoff { tick, mh, dest }));
    }
    plan
}
