use std::collections::{BTreeMap, BTreeSet};

use bcm::adversary::AdversaryStrategy;
use bcm::checker::{
    all_hold, check_all, growing_join_threshold, out_of_order_nodes, t_condition_timeline, CausalOracle,
};
use bcm::config::{MobilityModel, ScenarioConfig, WorkloadEvent};
use bcm::mh::{MhInput, MhState};
use bcm::mobility::{schedule_mobility, MobilityClass};
use bcm::mss::MssState;
use bcm::scenarios::random_compliant;
use bcm::sim::{channel_class, parse_trace, render_trace, run, SimOutcome};
use bcm::{
    message_id, Action, AppMessage, CausalBarrier, MessageId, MssVector, NodeId, Payload, ProtocolMessage, TraceEvent,
};
use bcm_analysis::poisson_tail;
use proptest::prelude::*;

fn h(i: u32) -> NodeId {
    NodeId::mh(i)
}

fn s(j: u32) -> NodeId {
    NodeId::mss(j)
}

fn arb_mh() -> impl Strategy<Value = NodeId> {
    (1u32..40).prop_map(NodeId::mh)
}

fn arb_mss() -> impl Strategy<Value = NodeId> {
    (1u32..6).prop_map(NodeId::mss)
}

fn arb_node() -> impl Strategy<Value = NodeId> {
    prop_oneof![arb_mh(), arb_mss()]
}

fn arb_app() -> impl Strategy<Value = AppMessage> {
    (arb_node(), 0u64..1000, prop::collection::vec(any::<u8>(), 0..12)).prop_map(|(origin, seq, bytes)| AppMessage {
        origin,
        seq,
        payload: Payload(bytes),
    })
}

fn arb_vector() -> impl Strategy<Value = MssVector> {
    prop::collection::vec(0u64..100, 1..5).prop_map(MssVector)
}

fn arb_barrier() -> impl Strategy<Value = CausalBarrier> {
    prop::collection::btree_map(arb_mss(), 0u64..50, 0..5).prop_map(CausalBarrier)
}

fn arb_view() -> impl Strategy<Value = BTreeSet<NodeId>> {
    prop::collection::btree_set(arb_mh(), 0..6)
}

fn arb_message() -> impl Strategy<Value = ProtocolMessage> {
    prop_oneof![
        arb_app().prop_map(|app| ProtocolMessage::Init { app }),
        (1u32..40, 0u64..1000, arb_app()).prop_map(|(origin_index, seq, app)| ProtocolMessage::Echo {
            origin_index,
            seq,
            app
        }),
        (arb_app(), arb_node()).prop_map(|(app, origin)| ProtocolMessage::Ready { app, origin }),
        (arb_app(), arb_mss(), 0u64..100, arb_barrier(), arb_vector()).prop_map(
            |(app, sender_mss, sn, cb, forwarded)| ProtocolMessage::GlobalBcast { app, sender_mss, sn, cb, forwarded }
        ),
        (arb_app(), arb_mss()).prop_map(|(app, origin_mss)| ProtocolMessage::ForwardGlobal { app, origin_mss }),
        (arb_app(), arb_mss(), arb_view()).prop_map(|(app, origin_mss, group_view)| {
            ProtocolMessage::ForwardCatchup { app, origin_mss, group_view }
        }),
        (arb_mss(), arb_vector()).prop_map(|(dest_mss, h_deliv)| ProtocolMessage::Disconnect { dest_mss, h_deliv }),
        (arb_mss(), arb_vector()).prop_map(|(src_mss, h_deliv)| ProtocolMessage::RequestMsg { src_mss, h_deliv }),
        (arb_mss(), arb_mh(), arb_vector(), 0u64..100).prop_map(|(src_mss, mh, h_deliv, know_bcast_entry)| {
            ProtocolMessage::Removed { src_mss, mh, h_deliv, know_bcast_entry }
        }),
        arb_mh().prop_map(|mh| ProtocolMessage::Accept { mh }),
    ]
}

proptest! {
    #[test]
    fn protocol_message_round_trips(msg in arb_message()) {
        let text = serde_json::to_string(&msg).unwrap();
        prop_assert!(!text.contains('\n'));
        let back: ProtocolMessage = serde_json::from_str(&text).unwrap();
        prop_assert_eq!(back, msg);
    }

    #[test]
    fn message_id_ignores_payload(app in arb_app(), other in prop::collection::vec(any::<u8>(), 0..12)) {
        let mut twin = app.clone();
        twin.payload = Payload(other);
        prop_assert_eq!(message_id(&app), message_id(&twin));
        prop_assert_eq!(message_id(&app), MessageId { origin: app.origin, seq: app.seq });
    }

    #[test]
    fn barrier_merge_is_a_semilattice(a in arb_barrier(), b in arb_barrier(), c in arb_barrier()) {
        prop_assert_eq!(a.merge(&b).merge(&c), a.merge(&b.merge(&c)));
        prop_assert_eq!(a.merge(&b), b.merge(&a));
        prop_assert_eq!(a.merge(&a), a.clone());
    }
}

fn host_inputs() -> impl Strategy<Value = Vec<MhInput>> {
    let receive = (arb_node(), arb_message()).prop_map(|(from, msg)| MhInput::Receive { from, msg });
    let bcast = prop::collection::vec(any::<u8>(), 0..4).prop_map(|b| MhInput::Broadcast(Payload(b)));
    prop::collection::vec(prop_oneof![4 => receive, 1 => bcast], 0..30)
}

fn group(ids: impl IntoIterator<Item = u32>) -> BTreeSet<NodeId> {
    ids.into_iter().map(h).collect()
}

fn is_init_or_echo(m: &ProtocolMessage) -> bool {
    matches!(m, ProtocolMessage::Init { .. } | ProtocolMessage::Echo { .. })
}

proptest! {
    #[test]
    fn host_in_transit_is_silent(before in host_inputs(), during in host_inputs()) {
        let mut host = MhState::new(h(1), 2, s(1), &group(1..=4));
        let mut seq = host.seq;
        for input in before {
            let _ = host.apply(input);
            prop_assert!(host.seq >= seq);
            seq = host.seq;
        }
        host.apply(MhInput::StartHandoff(s(2))).unwrap();
        let check = |host: &mut MhState, input: MhInput| -> Result<(), TestCaseError> {
            if let Ok(fx) = host.apply(input) {
                prop_assert!(fx.sends().all(|(_, m)| !is_init_or_echo(m)), "{:?}", fx);
                prop_assert!(!fx.has_action(Action::BcmHDeliver), "{:?}", fx);
            }
            Ok(())
        };
        let half = during.len() / 2;
        for (k, input) in during.into_iter().enumerate() {
            if k == half {
                check(&mut host, MhInput::RadioRange(s(2)))?;
            }
            check(&mut host, input)?;
            prop_assert!(host.seq >= seq);
        }
    }

    #[test]
    fn station_survives_arbitrary_host_traffic(
        inputs in prop::collection::vec((arb_mh(), arb_message()), 0..40),
    ) {
        let mut st = MssState::new(s(1), 3, group(1..=4), 1);
        let mut sn = st.sn;
        for (now, (from, msg)) in inputs.into_iter().enumerate() {
            let _ = st.on_receive(now as u64, from, msg);
            prop_assert!(st.sn >= sn);
            sn = st.sn;
        }
    }

    #[test]
    fn host_echoes_each_id_once(inits in prop::collection::vec((2u32..5, 1u64..4, any::<u8>()), 1..40)) {
        let mut host = MhState::new(h(1), 2, s(1), &group(1..=4));
        let mut echoes: BTreeMap<MessageId, usize> = BTreeMap::new();
        for (o, seq, b) in inits {
            let app = AppMessage { origin: h(o), seq, payload: Payload(vec![b]) };
            let fx = host.apply(MhInput::Receive { from: h(o), msg: ProtocolMessage::Init { app } }).unwrap();
            for (_, m) in fx.sends() {
                if let ProtocolMessage::Echo { app, .. } = m {
                    *echoes.entry(app.id()).or_default() += 1;
                }
            }
        }
        prop_assert!(echoes.values().all(|&n| n == 1), "{:?}", echoes);
    }
}

fn simulate(seed: u64, mobile: bool) -> (ScenarioConfig, SimOutcome) {
    let mut c = random_compliant(seed);
    if mobile {
        c.mobility_model =
            Some(MobilityModel { poisson_rates: [0.5, 1.0, 0.5, 1.0], horizon_ticks: 60, target_mss: s(1) });
    }
    let out = run(&c).unwrap();
    (c, out)
}

fn honest_hosts(c: &ScenarioConfig) -> impl Iterator<Item = NodeId> + '_ {
    (1..=c.n_mh).map(h).filter(|x| !c.is_byzantine(*x))
}

fn sn_of(e: &TraceEvent) -> Option<u64> {
    e.detail.strip_prefix("sn=").and_then(|v| v.parse().ok())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn channels_are_fifo(seed in any::<u64>(), mobile in any::<bool>()) {
        let (_, out) = simulate(seed, mobile);
        let mut last: BTreeMap<_, u64> = BTreeMap::new();
        for e in out.trace.iter().filter(|e| e.action == Action::Receive) {
            let (src, msg) = (e.peer.unwrap(), e.proto().unwrap());
            let key = (src, e.actor, channel_class(src, e.actor, msg));
            let n = e.chan_seq.unwrap();
            if let Some(prev) = last.insert(key, n) {
                prop_assert!(prev < n, "{:?}: {} then {}", key, prev, n);
            }
        }
    }

    #[test]
    fn traces_are_deterministic(seed in any::<u64>(), mobile in any::<bool>()) {
        let (c, a) = simulate(seed, mobile);
        let b = run(&c.clone()).unwrap();
        prop_assert_eq!(render_trace(&c, &a.trace), render_trace(&c, &b.trace));
    }

    #[test]
    fn trace_file_round_trips(seed in any::<u64>()) {
        let (c, out) = simulate(seed, false);
        let (hash, parsed_seed, events) = parse_trace(&render_trace(&c, &out.trace)).unwrap();
        prop_assert_eq!(hash, c.hash());
        prop_assert_eq!(parsed_seed, c.seed);
        prop_assert_eq!(events, out.trace);
    }

    #[test]
    fn hosts_in_transit_receive_and_emit_nothing(seed in any::<u64>(), mobile in any::<bool>()) {
        let (_, out) = simulate(seed, mobile);
        let mut away: BTreeSet<NodeId> = BTreeSet::new();
        for e in out.trace.iter().filter(|e| e.actor.is_mh()) {
            match e.action {
                Action::HandoffStart => { away.insert(e.actor); }
                Action::GroupJoin if e.detail == "telepoint set" => { away.remove(&e.actor); }
                _ if away.contains(&e.actor) => {
                    prop_assert_ne!(e.action, Action::Receive, "{}", e.to_line());
                    prop_assert_ne!(e.action, Action::BcmHDeliver, "{}", e.to_line());
                    prop_assert_ne!(e.action, Action::BcmHBroadcast, "{}", e.to_line());
                    let init_or_echo = e.action == Action::Send && e.proto().is_some_and(is_init_or_echo);
                    prop_assert!(!init_or_echo, "{}", e.to_line());
                }
                _ => {}
            }
        }
    }

    #[test]
    fn honest_hosts_deliver_at_most_once(seed in any::<u64>(), mobile in any::<bool>()) {
        let (c, out) = simulate(seed, mobile);
        for x in honest_hosts(&c) {
            let log = &out.host(x).delivered_log;
            let distinct: BTreeSet<_> = log.iter().collect();
            prop_assert_eq!(distinct.len(), log.len(), "{} delivered {:?}", x, log);
        }
    }

    #[test]
    fn honest_hosts_echo_once_per_attachment(seed in any::<u64>(), mobile in any::<bool>()) {
        let (c, out) = simulate(seed, mobile);
        let mut epoch: BTreeMap<NodeId, u32> = BTreeMap::new();
        let mut seen = BTreeSet::new();
        for e in out.trace.iter().filter(|e| e.actor.is_mh() && !c.is_byzantine(e.actor)) {
            if e.action == Action::HandoffStart {
                *epoch.entry(e.actor).or_default() += 1;
            }
            if let (Action::Send, Some(ProtocolMessage::Echo { app, .. })) = (e.action, e.proto()) {
                let key = (e.actor, e.peer, app.id(), epoch.get(&e.actor).copied().unwrap_or(0));
                prop_assert!(seen.insert(key), "second echo {}", e.to_line());
            }
        }
    }

    #[test]
    fn own_sequence_numbers_increase(seed in any::<u64>(), mobile in any::<bool>()) {
        let (c, out) = simulate(seed, mobile);
        let mut last: BTreeMap<NodeId, u64> = BTreeMap::new();
        for e in out.trace.iter().filter(|e| e.action == Action::BcmHBroadcast && !c.is_byzantine(e.actor)) {
            let seq = e.app().unwrap().seq;
            let prev = last.insert(e.actor, seq).unwrap_or(0);
            prop_assert_eq!(seq, prev + 1, "{}", e.to_line());
        }
        for x in honest_hosts(&c) {
            prop_assert_eq!(out.host(x).seq, last.get(&x).copied().unwrap_or(0));
        }
    }

    #[test]
    fn causal_deliveries_follow_sequence_and_barrier(seed in any::<u64>(), mobile in any::<bool>()) {
        let (_, out) = simulate(seed, mobile);
        let mut barriers: BTreeMap<(NodeId, u64), CausalBarrier> = BTreeMap::new();
        for e in out.trace.iter().filter(|e| e.action == Action::Send) {
            if let Some(ProtocolMessage::GlobalBcast { sender_mss, sn, cb, .. }) = e.proto() {
                barriers.insert((*sender_mss, *sn), cb.clone());
            }
        }
        let mut delivered: BTreeMap<NodeId, BTreeMap<NodeId, u64>> = BTreeMap::new();
        for e in out.trace.iter().filter(|e| e.action == Action::CDeliver) {
            let Some(sn) = sn_of(e) else { continue };
            let sender = e.peer.unwrap();
            let seen = delivered.entry(e.actor).or_default();
            let have = seen.get(&sender).copied().unwrap_or(0);
            prop_assert_eq!(sn, have + 1, "{}", e.to_line());
            if let Some(cb) = barriers.get(&(sender, sn)) {
                for (l, need) in &cb.0 {
                    let got = seen.get(l).copied().unwrap_or(0);
                    prop_assert!(got >= *need, "{} before {}:{}", e.to_line(), l, need);
                }
            } else {
                let n = out.station(sender).n_mss;
                prop_assert!(n == 1 || sender == e.actor, "no GlobalBcast send for {}", e.to_line());
            }
            seen.insert(sender, sn);
        }
    }

    #[test]
    fn station_counts_match_deliveries(seed in any::<u64>(), mobile in any::<bool>()) {
        let (c, out) = simulate(seed, mobile);
        for j in 1..=c.n_mss {
            let mut count: BTreeMap<u32, u64> = BTreeMap::new();
            for e in out.trace.iter().filter(|e| e.actor == s(j) && e.action == Action::BcmSDeliver) {
                let origin = e.app().unwrap().origin;
                if origin.is_mh() {
                    *count.entry(origin.index).or_default() += 1;
                }
            }
            let st = out.station(s(j));
            let recorded: BTreeMap<u32, u64> = st.deliv_from_h.iter().filter(|(_, n)| **n > 0).map(|(i, n)| (*i, *n)).collect();
            prop_assert_eq!(&recorded, &count, "{}", s(j));
            for (i, n) in &count {
                prop_assert!(st.know_bcast.get(i).copied().unwrap_or(0) >= *n);
            }
        }
    }

    #[test]
    fn compliant_runs_agree_at_quiescence(seed in any::<u64>()) {
        let (c, out) = simulate(seed, false);
        prop_assert!(out.quiescent);
        let sets: Vec<(NodeId, BTreeSet<MessageId>)> = honest_hosts(&c)
            .filter(|x| out.host(*x).is_attached())
            .map(|x| (x, out.host(x).delivered_log.iter().copied().collect()))
            .collect();
        for pair in sets.windows(2) {
            prop_assert_eq!(&pair[0].1, &pair[1].1, "{} and {} differ", pair[0].0, pair[1].0);
        }
    }

    #[test]
    fn causal_oracle_is_a_strict_partial_order(seed in any::<u64>(), mobile in any::<bool>()) {
        let (c, out) = simulate(seed, mobile);
        let oracle = CausalOracle::build(&out.trace, &c).unwrap();
        prop_assert_eq!(oracle.cycle, None);
        for (m, past) in &oracle.causal_past {
            prop_assert!(!past.contains(m), "{} precedes itself", m);
            for p in past {
                for q in oracle.past(*p) {
                    prop_assert!(oracle.precedes(*q, *m), "{} < {} < {} but not {} < {}", q, p, m, q, m);
                }
            }
        }
    }

    #[test]
    fn only_byzantine_hosts_deliver_out_of_order(seed in any::<u64>()) {
        let (c, out) = simulate(seed, false);
        let bad = out_of_order_nodes(&out.trace, &c).unwrap();
        for n in bad {
            prop_assert!(c.is_byzantine(n), "{} delivered out of causal order", n);
        }
    }
}

/// h1 broadcasts m1, h2 broadcasts m2 after delivering it, h5 in the other
/// group broadcasts m3 after delivering m2. h3 reorders its own deliveries.
#[test]
fn chain_reordering_is_confined_to_byzantine_nodes() {
    let mut c = ScenarioConfig::single_group(2, 8, 1);
    for i in 5..=8 {
        c.initial_assignment.insert(h(i), s(2));
    }
    c.byzantine_set.insert(3);
    c.adversary_strategy.insert(h(3), AdversaryStrategy::CausalViolator);
    c.workload = vec![
        WorkloadEvent::Broadcast { tick: 0, mh: h(1), payload: "m1".into() },
        WorkloadEvent::Broadcast { tick: 20, mh: h(2), payload: "m2".into() },
        WorkloadEvent::Broadcast { tick: 40, mh: h(5), payload: "m3".into() },
        WorkloadEvent::Broadcast { tick: 60, mh: h(4), payload: "m4".into() },
    ];
    let out = run(&c).unwrap();
    let oracle = CausalOracle::build(&out.trace, &c).unwrap();
    let m = |o: u32| MessageId { origin: h(o), seq: 1 };
    assert!(oracle.precedes(m(1), m(2)));
    assert!(oracle.precedes(m(2), m(5)));
    assert!(oracle.precedes(m(1), m(5)));

    let position = |n: NodeId, id: MessageId| {
        out.trace.iter().position(|e| {
            e.actor == n
                && matches!(e.action, Action::BcmHDeliver | Action::BcmSDeliver)
                && e.app().is_some_and(|a| a.id() == id)
        })
    };
    let nodes: Vec<NodeId> = (1..=8).map(h).chain([s(1), s(2)]).collect();
    for &n in &nodes {
        let (p2, p3) = (position(n, m(2)), position(n, m(5)));
        if let (Some(p3), p2) = (p3, p2) {
            if p2.is_none_or(|p2| p2 > p3) {
                assert!(c.is_byzantine(n), "{n} delivered m3 before m2");
            }
        }
    }
    assert!(all_hold(&check_all(&out.trace, &c).unwrap()));
    assert_eq!(out_of_order_nodes(&out.trace, &c).unwrap(), BTreeSet::from([h(3)]));
}

#[test]
fn poisson_generator_matches_the_tail() {
    let trials = 10_000u64;
    let rates = [3.0, 5.0, 2.0, 6.0];
    let k_min = [2u64, 6, 1, 7];
    let mut c = ScenarioConfig::single_group(2, 60, 1);
    for i in 31..=60 {
        c.initial_assignment.insert(h(i), s(2));
    }
    c.byzantine_set = (1..=10).chain(31..=45).collect();
    c.mobility_model = Some(MobilityModel { poisson_rates: rates, horizon_ticks: 500, target_mss: s(1) });
    let mut hits = [0u64; 4];
    for seed in 0..trials {
        c.seed = seed;
        let plan = schedule_mobility(&c);
        for class in MobilityClass::ALL {
            if plan.count(class) >= k_min[class as usize] {
                hits[class as usize] += 1;
            }
        }
    }
    for class in MobilityClass::ALL {
        let k = class as usize;
        let p = poisson_tail(k_min[k], rates[k]);
        let freq = hits[k] as f64 / trials as f64;
        let se = (p * (1.0 - p) / trials as f64).sqrt();
        assert!((freq - p).abs() <= 3.0 * se, "{class:?}: {freq} vs {p}");
    }
}

/// 30 members with 7 Byzantine under s1 and Byzantine joins arriving at rate
/// 8 per horizon. Each join also grows the group, so the group breaks at the
/// fifth join.
#[test]
fn simulated_violation_frequency_matches_the_model() {
    let trials = 3_000u64;
    let mut c = ScenarioConfig::single_group(2, 70, 1);
    for i in 31..=70 {
        c.initial_assignment.insert(h(i), s(2));
    }
    c.byzantine_set = (1..=7).chain(31..=70).collect();
    c.mobility_model =
        Some(MobilityModel { poisson_rates: [0.0, 0.0, 8.0, 0.0], horizon_ticks: 1000, target_mss: s(1) });
    let k_min = growing_join_threshold(30, 7).unwrap();
    assert_eq!(k_min, 5);
    let mut violated = 0u64;
    for seed in 0..trials {
        c.seed = seed;
        let out = run(&c).unwrap();
        if t_condition_timeline(&out.trace, &c).first_violation[&s(1)].is_some() {
            violated += 1;
        }
    }
    let p = poisson_tail(k_min as u64, 8.0);
    let freq = violated as f64 / trials as f64;
    let se = (p * (1.0 - p) / trials as f64).sqrt();
    assert!((freq - p).abs() <= 3.0 * se, "{freq} vs {p}, {:.2} standard errors", (freq - p).abs() / se);
}

/// h4 broadcasts and leaves in the same tick, then broadcasts again at its
/// new station before the first is re-sent.
#[test]
fn resend_after_handoff_echoes_newer_broadcasts_once() {
    let mut c = ScenarioConfig::single_group(3, 6, 1);
    c.initial_assignment.insert(h(1), s(3));
    c.initial_assignment.insert(h(6), s(2));
    c.causal_latency = Some(2);
    c.handoff_latency = Some(4);
    c.workload = vec![
        WorkloadEvent::Handoff { tick: 5, mh: h(3), dest: s(2) },
        WorkloadEvent::Broadcast { tick: 20, mh: h(4), payload: "first".into() },
        WorkloadEvent::Handoff { tick: 20, mh: h(4), dest: s(2) },
        WorkloadEvent::Broadcast { tick: 23, mh: h(4), payload: "second".into() },
    ];
    let out = run(&c).unwrap();
    let echoes = |seq: u64| {
        out.trace
            .iter()
            .filter(|e| e.actor == h(4) && e.action == Action::Send)
            .filter(|e| matches!(e.proto(), Some(ProtocolMessage::Echo { app, .. }) if app.seq == seq))
            .count()
    };
    assert_eq!(echoes(1), 1);
    assert_eq!(echoes(2), 1);
    assert!(all_hold(&check_all(&out.trace, &c).unwrap()));
}
