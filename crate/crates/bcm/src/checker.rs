//! Offline verification of a finished trace.
//!
//! Every verdict is computed from the trace alone plus the scenario's node
//! counts and Byzantine set; no protocol state is consulted.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::config::ScenarioConfig;
use crate::sim::{channel_class, ChannelClass};
use crate::types::{Action, AppMessage, MessageId, NodeId, Payload, ProtocolMessage, TraceEvent};

pub const PROPERTIES: [&str; 13] = [
    "BCM-Validity 1",
    "BCM-Validity 2",
    "BCM-Validity 3",
    "BCM-Integrity 1",
    "BCM-Integrity 2",
    "BCM-Termination 1",
    "BCM-Termination 2",
    "BCM-Termination 3",
    "BCM-Termination 4",
    "BCM-Causality 1",
    "BCM-Causality 2",
    "BCM-Causality 3",
    "BCM-Safety",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub property: &'static str,
    pub holds: bool,
    /// The offending events, present exactly when the property fails.
    pub counterexample: Option<Vec<TraceEvent>>,
    pub detail: String,
}

impl Verdict {
    fn pass(property: &'static str, detail: impl Into<String>) -> Self {
        Verdict { property, holds: true, counterexample: None, detail: detail.into() }
    }

    fn fail(property: &'static str, events: Vec<TraceEvent>, detail: impl Into<String>) -> Self {
        Verdict { property, holds: false, counterexample: Some(events), detail: detail.into() }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.holds { "holds" } else { "FAILS" };
        write!(f, "{:<18} {status}", self.property)?;
        if !self.detail.is_empty() {
            write!(f, "  {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CheckError {
    #[error("malformed trace at event {index}: {reason}")]
    MalformedTrace { index: usize, reason: String },
}

fn malformed(index: usize, reason: impl Into<String>) -> CheckError {
    CheckError::MalformedTrace { index, reason: reason.into() }
}

/// A bcm-level delivery.
#[derive(Debug, Clone)]
struct Delivery {
    idx: usize,
    node: NodeId,
    app: AppMessage,
}

/// Lookup tables over one trace.
struct Index<'a> {
    trace: &'a [TraceEvent],
    config: &'a ScenarioConfig,
    deliveries: Vec<Delivery>,
    /// Per node, delivery positions in trace order.
    by_node: BTreeMap<NodeId, Vec<usize>>,
    /// First delivery position of an id per node.
    first: BTreeMap<(NodeId, MessageId), usize>,
    /// Per id, every (node, trace index) that delivered it.
    deliverers: BTreeMap<MessageId, Vec<(NodeId, usize)>>,
    /// First broadcast event per (node, id), for hosts and stations alike.
    broadcasts: BTreeMap<(NodeId, MessageId), usize>,
    handoff_starts: BTreeMap<NodeId, Vec<usize>>,
    /// Station GroupJoin events per joining host.
    station_joins: BTreeMap<NodeId, Vec<usize>>,
}

impl<'a> Index<'a> {
    fn build(trace: &'a [TraceEvent], config: &'a ScenarioConfig) -> Result<Self, CheckError> {
        validate(trace, config)?;
        let mut ix = Index {
            trace,
            config,
            deliveries: Vec::new(),
            by_node: BTreeMap::new(),
            first: BTreeMap::new(),
            deliverers: BTreeMap::new(),
            broadcasts: BTreeMap::new(),
            handoff_starts: BTreeMap::new(),
            station_joins: BTreeMap::new(),
        };
        for (i, e) in trace.iter().enumerate() {
            match e.action {
                Action::BcmHDeliver | Action::BcmSDeliver => {
                    let app = e.app().expect("validated").clone();
                    let id = app.id();
                    ix.by_node.entry(e.actor).or_default().push(ix.deliveries.len());
                    ix.first.entry((e.actor, id)).or_insert(i);
                    ix.deliverers.entry(id).or_default().push((e.actor, i));
                    ix.deliveries.push(Delivery { idx: i, node: e.actor, app });
                }
                Action::BcmHBroadcast | Action::BcmSBroadcast => {
                    let id = e.app().expect("validated").id();
                    ix.broadcasts.entry((e.actor, id)).or_insert(i);
                }
                Action::HandoffStart => ix.handoff_starts.entry(e.actor).or_default().push(i),
                Action::GroupJoin if e.actor.is_mss() => {
                    if let Some(h) = e.peer {
                        ix.station_joins.entry(h).or_default().push(i);
                    }
                }
                _ => {}
            }
        }
        Ok(ix)
    }

    fn faulty(&self, n: NodeId) -> bool {
        self.config.is_byzantine(n)
    }

    fn correct_nodes(&self) -> Vec<NodeId> {
        let hosts = (1..=self.config.n_mh).map(NodeId::mh).filter(|h| !self.faulty(*h));
        hosts.chain((1..=self.config.n_mss).map(NodeId::mss)).collect()
    }

    fn delivered_at(&self, n: NodeId, id: MessageId) -> Option<usize> {
        self.first.get(&(n, id)).copied()
    }

    /// Delivered by at least one non-faulty node.
    fn delivered_somewhere(&self, id: MessageId) -> bool {
        self.deliverers.get(&id).is_some_and(|v| v.iter().any(|(n, _)| !self.faulty(*n)))
    }

    fn events(&self, idx: &[usize]) -> Vec<TraceEvent> {
        idx.iter().map(|&i| self.trace[i].clone()).collect()
    }
}

fn validate(trace: &[TraceEvent], config: &ScenarioConfig) -> Result<(), CheckError> {
    let known = |n: NodeId| {
        if n.is_mh() {
            n.index >= 1 && n.index <= config.n_mh
        } else {
            n.index >= 1 && n.index <= config.n_mss
        }
    };
    let mut sent: BTreeSet<(NodeId, NodeId, ChannelClass, u64)> = BTreeSet::new();
    let mut last_tick = 0;
    for (i, e) in trace.iter().enumerate() {
        if e.tick < last_tick {
            return Err(malformed(i, "tick goes backwards"));
        }
        last_tick = e.tick;
        if !known(e.actor) {
            return Err(malformed(i, format!("unknown actor {}", e.actor)));
        }
        if let Some(p) = e.peer {
            if !known(p) {
                return Err(malformed(i, format!("unknown peer {p}")));
            }
        }
        let needs_app = matches!(
            e.action,
            Action::BcmHDeliver | Action::BcmSDeliver | Action::BcmHBroadcast | Action::BcmSBroadcast
        );
        if needs_app && e.app().is_none() {
            return Err(malformed(i, format!("{:?} without a message", e.action)));
        }
        let host_only = matches!(e.action, Action::BcmHDeliver | Action::BcmHBroadcast);
        let station_only = matches!(e.action, Action::BcmSDeliver | Action::BcmSBroadcast);
        if (host_only && !e.actor.is_mh()) || (station_only && !e.actor.is_mss()) {
            return Err(malformed(i, format!("{:?} by {}", e.action, e.actor)));
        }
        if matches!(e.action, Action::Send | Action::Receive) {
            let (Some(peer), Some(seq), Some(msg)) = (e.peer, e.chan_seq, e.proto()) else {
                return Err(malformed(i, "send/receive without peer, sequence or message"));
            };
            if e.action == Action::Send {
                sent.insert((e.actor, peer, channel_class(e.actor, peer, msg), seq));
            } else if !sent.contains(&(peer, e.actor, channel_class(peer, e.actor, msg), seq)) {
                return Err(malformed(i, "receive without a matching send"));
            }
        }
    }
    Ok(())
}

pub fn check_all(trace: &[TraceEvent], config: &ScenarioConfig) -> Result<Vec<Verdict>, CheckError> {
    let ix = Index::build(trace, config)?;
    let oracle = CausalOracle::from_index(&ix);
    Ok(vec![
        validity_1(&ix),
        validity_2(&ix),
        validity_3(&ix),
        integrity_1(&ix),
        integrity_2(&ix),
        termination_1(&ix),
        termination_2(&ix),
        termination_3(&ix),
        termination_4(&ix),
        causality_1(&ix),
        causality_2(&ix),
        causality_3(&ix, &oracle),
        safety(&ix),
    ])
}

pub fn all_hold(verdicts: &[Verdict]) -> bool {
    verdicts.iter().all(|v| v.holds)
}

fn same_app(e: &TraceEvent, app: &AppMessage) -> bool {
    e.app() == Some(app)
}

fn validity_1(ix: &Index) -> Verdict {
    const P: &str = PROPERTIES[0];
    let mut checked = 0;
    for d in ix.deliveries.iter().filter(|d| d.node.is_mss()) {
        let e = &ix.trace[d.idx];
        let Some(sender) = e.peer else { continue };
        if sender == d.node && d.app.origin.is_mh() {
            continue;
        }
        checked += 1;
        let ok = ix.trace[..d.idx]
            .iter()
            .any(|b| b.actor == sender && b.action == Action::BcmSBroadcast && same_app(b, &d.app));
        if !ok {
            return Verdict::fail(P, ix.events(&[d.idx]), format!("{} never bcm-broadcast {}", sender, d.app.id()));
        }
    }
    Verdict::pass(P, format!("{checked} station deliveries from stations"))
}

fn validity_2(ix: &Index) -> Verdict {
    const P: &str = PROPERTIES[1];
    let mut checked = 0;
    for d in ix.deliveries.iter().filter(|d| d.node.is_mh() && !ix.faulty(d.node)) {
        let e = &ix.trace[d.idx];
        let Some(station) = e.peer else {
            return Verdict::fail(P, ix.events(&[d.idx]), "delivery names no station");
        };
        checked += 1;
        let ok = ix.trace[..d.idx].iter().any(|s| {
            s.action == Action::Send
                && s.actor == station
                && s.peer == Some(d.node)
                && matches!(
                    s.proto(),
                    Some(
                        ProtocolMessage::Ready { .. }
                            | ProtocolMessage::ForwardGlobal { .. }
                            | ProtocolMessage::ForwardCatchup { .. }
                    )
                )
                && same_app(s, &d.app)
        });
        if !ok {
            return Verdict::fail(
                P,
                ix.events(&[d.idx]),
                format!("{station} never forwarded {} to {}", d.app.id(), d.node),
            );
        }
    }
    Verdict::pass(P, format!("{checked} host deliveries"))
}

fn validity_3(ix: &Index) -> Verdict {
    const P: &str = PROPERTIES[2];
    let mut checked = 0;
    for d in ix.deliveries.iter().filter(|d| d.app.origin.is_mh() && !ix.faulty(d.node)) {
        checked += 1;
        let o = d.app.origin;
        let ok = ix.trace[..d.idx].iter().any(|s| {
            s.actor == o
                && s.action == Action::Send
                && matches!(s.proto(), Some(ProtocolMessage::Init { .. }))
                && same_app(s, &d.app)
        });
        if !ok {
            return Verdict::fail(P, ix.events(&[d.idx]), format!("{o} never broadcast {}", d.app.id()));
        }
    }
    Verdict::pass(P, format!("{checked} deliveries of host messages"))
}

fn duplicate_delivery(ix: &Index, nodes: impl Iterator<Item = NodeId>) -> Option<(NodeId, usize, usize)> {
    for n in nodes {
        let mut seen: BTreeMap<MessageId, usize> = BTreeMap::new();
        for &k in ix.by_node.get(&n).into_iter().flatten() {
            let d = &ix.deliveries[k];
            if let Some(&prev) = seen.get(&d.app.id()) {
                return Some((n, prev, d.idx));
            }
            seen.insert(d.app.id(), d.idx);
        }
    }
    None
}

fn integrity_1(ix: &Index) -> Verdict {
    const P: &str = PROPERTIES[3];
    match duplicate_delivery(ix, ix.correct_nodes().into_iter()) {
        Some((n, a, b)) => Verdict::fail(P, ix.events(&[a, b]), format!("{n} delivered twice")),
        None => Verdict::pass(P, ""),
    }
}

fn integrity_2(ix: &Index) -> Verdict {
    const P: &str = PROPERTIES[4];
    let movers: Vec<NodeId> = ix.handoff_starts.keys().copied().filter(|h| !ix.faulty(*h)).collect();
    let n = movers.len();
    match duplicate_delivery(ix, movers.into_iter()) {
        Some((h, a, b)) => Verdict::fail(P, ix.events(&[a, b]), format!("{h} delivered twice across a handoff")),
        None => Verdict::pass(P, format!("{n} hosts moved")),
    }
}

fn termination_1(ix: &Index) -> Verdict {
    const P: &str = PROPERTIES[5];
    let mut checked = 0;
    for (&(n, id), &b) in &ix.broadcasts {
        let own = id.origin == n && !ix.faulty(n);
        if !own {
            continue;
        }
        checked += 1;
        if ix.delivered_at(n, id).is_none() {
            return Verdict::fail(P, ix.events(&[b]), format!("{n} never delivered its own {id}"));
        }
    }
    Verdict::pass(P, format!("{checked} broadcasts"))
}

fn termination_2(ix: &Index) -> Verdict {
    const P: &str = PROPERTIES[6];
    let stations: Vec<NodeId> = (1..=ix.config.n_mss).map(NodeId::mss).collect();
    for (id, who) in &ix.deliverers {
        let Some(&(_, idx)) = who.iter().find(|(n, _)| n.is_mss()) else { continue };
        if let Some(s) = stations.iter().find(|s| ix.delivered_at(**s, *id).is_none()) {
            return Verdict::fail(P, ix.events(&[idx]), format!("{s} never delivered {id}"));
        }
    }
    Verdict::pass(P, "")
}

fn termination_3(ix: &Index) -> Verdict {
    const P: &str = PROPERTIES[7];
    let hosts: Vec<NodeId> = ix.correct_nodes().into_iter().filter(|n| n.is_mh()).collect();
    for (id, who) in ix.deliverers.iter().filter(|(id, _)| id.origin.is_mh()) {
        let Some(&(_, idx)) = who.iter().find(|(n, _)| n.is_mh() && !ix.faulty(*n)) else { continue };
        if let Some(h) = hosts.iter().find(|h| ix.delivered_at(**h, *id).is_none()) {
            return Verdict::fail(P, ix.events(&[idx]), format!("{h} never delivered {id}"));
        }
    }
    Verdict::pass(P, "")
}

fn termination_4(ix: &Index) -> Verdict {
    const P: &str = PROPERTIES[8];
    let mut checked = 0;
    for (&h, joins) in ix.station_joins.iter().filter(|(h, _)| !ix.faulty(**h)) {
        for &j in joins {
            let station = ix.trace[j].actor;
            checked += 1;
            for &k in ix.by_node.get(&station).into_iter().flatten() {
                let d = &ix.deliveries[k];
                if d.idx > j {
                    break;
                }
                if ix.delivered_at(h, d.app.id()).is_none() {
                    return Verdict::fail(
                        P,
                        ix.events(&[d.idx, j]),
                        format!("{h} joined {station} but never delivered {}", d.app.id()),
                    );
                }
            }
        }
    }
    Verdict::pass(P, format!("{checked} joins"))
}

/// First violation of "whoever delivers `m2` delivered `m1` earlier" among
/// correct nodes, skipping `m1` if no correct node ever delivered it.
fn order_violation(ix: &Index, m1: MessageId, m2: MessageId, nodes: &[NodeId]) -> Option<Vec<usize>> {
    if !ix.delivered_somewhere(m1) {
        return None;
    }
    for &n in nodes {
        let Some(d2) = ix.delivered_at(n, m2) else { continue };
        match ix.delivered_at(n, m1) {
            Some(d1) if d1 < d2 => {}
            Some(d1) => return Some(vec![d2, d1]),
            None => return Some(vec![d2]),
        }
    }
    None
}

fn causality_1(ix: &Index) -> Verdict {
    const P: &str = PROPERTIES[9];
    let nodes = ix.correct_nodes();
    let mut pairs = 0;
    for (&h, starts) in &ix.handoff_starts {
        let own: Vec<(MessageId, usize)> = ix
            .broadcasts
            .iter()
            .filter(|((n, id), _)| *n == h && id.origin == h)
            .map(|((_, id), &i)| (*id, i))
            .collect();
        for &(m1, b1) in &own {
            for &(m2, b2) in &own {
                if !starts.iter().any(|&s| b1 < s && s < b2) {
                    continue;
                }
                pairs += 1;
                if let Some(ev) = order_violation(ix, m1, m2, &nodes) {
                    return Verdict::fail(P, ix.events(&ev), format!("{m2} delivered without {m1} first"));
                }
            }
        }
    }
    Verdict::pass(P, format!("{pairs} pairs across handoffs"))
}

fn causality_2(ix: &Index) -> Verdict {
    const P: &str = PROPERTIES[10];
    let mut pairs = 0;
    for (&h, joins) in ix.station_joins.iter().filter(|(h, _)| !ix.faulty(**h)) {
        let starts = ix.handoff_starts.get(&h).cloned().unwrap_or_default();
        for &j in joins {
            let station = ix.trace[j].actor;
            let Some(&left) = starts.iter().rev().find(|&&s| s < j) else { continue };
            let next_leave = starts.iter().copied().find(|&s| s > j).unwrap_or(usize::MAX);
            let before: Vec<MessageId> = ix
                .by_node
                .get(&station)
                .into_iter()
                .flatten()
                .map(|&k| &ix.deliveries[k])
                .filter(|d| d.idx < j)
                .map(|d| d.app.id())
                .filter(|id| ix.broadcasts.iter().any(|((n, b), &i)| b == id && n.is_mss() && i > left))
                .collect();
            let after: Vec<MessageId> = ix
                .broadcasts
                .iter()
                .filter(|((n, _), &i)| *n == station && i > j && i < next_leave)
                .map(|((_, id), _)| *id)
                .collect();
            for &m1 in &before {
                for &m2 in &after {
                    pairs += 1;
                    if let Some(ev) = order_violation(ix, m1, m2, &[h]) {
                        return Verdict::fail(
                            P,
                            ix.events(&ev),
                            format!("{h} got {m2} before {m1} after joining {station}"),
                        );
                    }
                }
            }
        }
    }
    Verdict::pass(P, format!("{pairs} pairs"))
}

fn causality_3(ix: &Index, oracle: &CausalOracle) -> Verdict {
    const P: &str = PROPERTIES[11];
    if let Some(m) = oracle.cycle {
        return Verdict::fail(P, Vec::new(), format!("causal precedence is cyclic at {m}"));
    }
    let nodes = ix.correct_nodes();
    let mut pairs = 0;
    for n in &nodes {
        for &k in ix.by_node.get(n).into_iter().flatten() {
            let m2 = ix.deliveries[k].app.id();
            for &m1 in oracle.past(m2) {
                pairs += 1;
                if let Some(ev) = order_violation(ix, m1, m2, std::slice::from_ref(n)) {
                    return Verdict::fail(P, ix.events(&ev), format!("{n} delivered {m2} before {m1}"));
                }
            }
        }
    }
    Verdict::pass(P, format!("{pairs} ordered pairs"))
}

/// Ids for which correct processes received two or more payloads from the
/// origin before any correct process delivered the id. A version that only
/// arrives after delivery is a late duplicate, covered by agreement.
fn misbehaving_ids(ix: &Index) -> BTreeMap<MessageId, Vec<usize>> {
    let mut payloads: BTreeMap<MessageId, BTreeMap<Payload, usize>> = BTreeMap::new();
    for (i, e) in ix.trace.iter().enumerate() {
        let (Action::Receive, Some(ProtocolMessage::Init { app }), Some(from)) = (e.action, e.proto(), e.peer) else {
            continue;
        };
        if from != app.origin || ix.faulty(e.actor) {
            continue;
        }
        let first = ix
            .deliverers
            .get(&app.id())
            .and_then(|v| v.iter().filter(|(n, _)| !ix.faulty(*n)).map(|(_, i)| *i).min())
            .unwrap_or(usize::MAX);
        if i < first {
            payloads.entry(app.id()).or_default().entry(app.payload.clone()).or_insert(i);
        }
    }
    payloads.into_iter().filter(|(_, p)| p.len() >= 2).map(|(id, p)| (id, p.into_values().collect())).collect()
}

fn safety(ix: &Index) -> Verdict {
    const P: &str = PROPERTIES[12];
    let bad = misbehaving_ids(ix);
    for d in ix.deliveries.iter().filter(|d| !ix.faulty(d.node)) {
        if let Some(sends) = bad.get(&d.app.id()) {
            let mut ev = sends.clone();
            ev.push(d.idx);
            return Verdict::fail(P, ix.events(&ev), format!("{} delivered equivocated {}", d.node, d.app.id()));
        }
    }
    let mut agreed: BTreeMap<MessageId, &Delivery> = BTreeMap::new();
    for d in ix.deliveries.iter().filter(|d| !ix.faulty(d.node)) {
        match agreed.get(&d.app.id()) {
            Some(first) if first.app.payload != d.app.payload => {
                return Verdict::fail(
                    P,
                    ix.events(&[first.idx, d.idx]),
                    format!("payloads of {} disagree", d.app.id()),
                );
            }
            Some(_) => {}
            None => {
                agreed.insert(d.app.id(), d);
            }
        }
    }
    if let Some((n, a, b)) = duplicate_delivery(ix, ix.correct_nodes().into_iter()) {
        return Verdict::fail(P, ix.events(&[a, b]), format!("{n} delivered a duplicate"));
    }
    let byz_delivered = agreed.keys().filter(|id| ix.faulty(id.origin)).count();
    let mut detail = format!("{} misbehaving ids, none delivered", bad.len());
    if byz_delivered > 0 {
        detail.push_str(&format!(
            "; {byz_delivered} well-formed messages from Byzantine hosts were delivered (unconditional reading not enforced)"
        ));
    }
    Verdict::pass(P, detail)
}

/// Ground-truth precedence between application messages: everything the
/// broadcaster delivered or broadcast before broadcasting, transitively.
#[derive(Debug, Clone, Default)]
pub struct CausalOracle {
    pub causal_past: BTreeMap<MessageId, BTreeSet<MessageId>>,
    /// Some id found in its own past.
    pub cycle: Option<MessageId>,
}

impl CausalOracle {
    pub fn build(trace: &[TraceEvent], config: &ScenarioConfig) -> Result<Self, CheckError> {
        Ok(Self::from_index(&Index::build(trace, config)?))
    }

    fn from_index(ix: &Index) -> Self {
        let mut direct: BTreeMap<MessageId, BTreeSet<MessageId>> = BTreeMap::new();
        let mut history: BTreeMap<NodeId, Vec<(usize, MessageId)>> = BTreeMap::new();
        for (i, e) in ix.trace.iter().enumerate() {
            if matches!(
                e.action,
                Action::BcmHDeliver | Action::BcmSDeliver | Action::BcmHBroadcast | Action::BcmSBroadcast
            ) {
                history.entry(e.actor).or_default().push((i, e.app().expect("validated").id()));
            }
        }
        for (&(n, m), &b) in &ix.broadcasts {
            let past = direct.entry(m).or_default();
            for &(i, x) in history.get(&n).into_iter().flatten() {
                if i >= b {
                    break;
                }
                if x != m {
                    past.insert(x);
                }
            }
        }
        let mut oracle = CausalOracle::default();
        let ids: Vec<MessageId> = direct.keys().copied().collect();
        for m in ids {
            oracle.close(m, &direct, &mut BTreeSet::new());
        }
        oracle
    }

    fn close(
        &mut self,
        m: MessageId,
        direct: &BTreeMap<MessageId, BTreeSet<MessageId>>,
        stack: &mut BTreeSet<MessageId>,
    ) -> BTreeSet<MessageId> {
        if let Some(p) = self.causal_past.get(&m) {
            return p.clone();
        }
        if !stack.insert(m) {
            self.cycle.get_or_insert(m);
            return BTreeSet::new();
        }
        let mut past = BTreeSet::new();
        for &x in direct.get(&m).into_iter().flatten() {
            past.insert(x);
            past.extend(self.close(x, direct, stack));
        }
        stack.remove(&m);
        if past.contains(&m) {
            self.cycle.get_or_insert(m);
            past.remove(&m);
        }
        self.causal_past.insert(m, past.clone());
        past
    }

    pub fn past(&self, m: MessageId) -> impl Iterator<Item = &MessageId> {
        self.causal_past.get(&m).into_iter().flatten()
    }

    pub fn precedes(&self, a: MessageId, b: MessageId) -> bool {
        self.causal_past.get(&b).is_some_and(|p| p.contains(&a))
    }
}

/// Nodes that delivered some message before one of its causal predecessors
/// that was delivered somewhere. With correct stations this set may only
/// contain Byzantine hosts.
pub fn out_of_order_nodes(trace: &[TraceEvent], config: &ScenarioConfig) -> Result<BTreeSet<NodeId>, CheckError> {
    let ix = Index::build(trace, config)?;
    let oracle = CausalOracle::from_index(&ix);
    let mut out = BTreeSet::new();
    for (&n, ks) in &ix.by_node {
        for &k in ks {
            let m2 = ix.deliveries[k].app.id();
            for &m1 in oracle.past(m2) {
                if !ix.delivered_somewhere(m1) {
                    continue;
                }
                if ix.delivered_at(n, m1).is_none_or(|d1| d1 > ix.deliveries[k].idx) {
                    out.insert(n);
                }
            }
        }
    }
    Ok(out)
}

/// Lamport happened-before over trace events: process order plus send to
/// matching receive.
#[derive(Debug, Clone)]
pub struct HappenedBefore {
    clocks: Vec<Vec<u32>>,
}

impl HappenedBefore {
    pub fn build(trace: &[TraceEvent], config: &ScenarioConfig) -> Result<Self, CheckError> {
        validate(trace, config)?;
        let n_mh = config.n_mh as usize;
        let width = n_mh + config.n_mss as usize;
        let slot = |n: NodeId| if n.is_mh() { n.index as usize - 1 } else { n_mh + n.index as usize - 1 };
        let mut current = vec![vec![0u32; width]; width];
        let mut at_send: BTreeMap<(NodeId, NodeId, ChannelClass, u64), usize> = BTreeMap::new();
        let mut clocks: Vec<Vec<u32>> = Vec::with_capacity(trace.len());
        for (i, e) in trace.iter().enumerate() {
            let a = slot(e.actor);
            let key = |from: NodeId, to: NodeId| {
                (from, to, channel_class(from, to, e.proto().expect("validated")), e.chan_seq.expect("validated"))
            };
            if e.action == Action::Receive {
                let s = at_send[&key(e.peer.expect("validated"), e.actor)];
                let sender = clocks[s].clone();
                for (c, v) in current[a].iter_mut().zip(sender) {
                    *c = (*c).max(v);
                }
            }
            current[a][a] += 1;
            if e.action == Action::Send {
                at_send.insert(key(e.actor, e.peer.expect("validated")), i);
            }
            clocks.push(current[a].clone());
        }
        Ok(HappenedBefore { clocks })
    }

    pub fn precedes(&self, a: usize, b: usize) -> bool {
        let (x, y) = (&self.clocks[a], &self.clocks[b]);
        x != y && x.iter().zip(y).all(|(p, q)| p <= q)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct GroupSample {
    pub tick: u64,
    pub nmh: u32,
    pub t: u32,
    pub compliant: bool,
}

/// Per-group membership counts at every change, starting from the initial
/// assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TConditionTimeline {
    pub groups: BTreeMap<NodeId, Vec<GroupSample>>,
    pub first_violation: BTreeMap<NodeId, Option<u64>>,
}

pub fn t_compliant(nmh: u32, t: u32) -> bool {
    nmh == 0 || 3 * t < nmh
}

pub fn t_condition_timeline(trace: &[TraceEvent], config: &ScenarioConfig) -> TConditionTimeline {
    let mut members: BTreeMap<NodeId, BTreeSet<NodeId>> =
        (1..=config.n_mss).map(|j| (NodeId::mss(j), config.members_of(NodeId::mss(j)))).collect();
    let sample = |tick: u64, set: &BTreeSet<NodeId>| {
        let nmh = set.len() as u32;
        let t = set.iter().filter(|h| config.is_byzantine(**h)).count() as u32;
        GroupSample { tick, nmh, t, compliant: t_compliant(nmh, t) }
    };
    let mut groups: BTreeMap<NodeId, Vec<GroupSample>> =
        members.iter().map(|(s, set)| (*s, vec![sample(0, set)])).collect();
    for e in trace.iter().filter(|e| e.actor.is_mss()) {
        let Some(h) = e.peer else { continue };
        let Some(set) = members.get_mut(&e.actor) else { continue };
        let changed = match e.action {
            Action::GroupJoin => set.insert(h),
            Action::GroupLeave => set.remove(&h),
            _ => false,
        };
        if changed {
            let s = sample(e.tick, set);
            groups.entry(e.actor).or_default().push(s);
        }
    }
    let first_violation = groups.iter().map(|(g, v)| (*g, v.iter().find(|s| !s.compliant).map(|s| s.tick))).collect();
    TConditionTimeline { groups, first_violation }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Thresholds {
    pub leave_k2: u32,
    pub join_k3: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("group of {nmh} with {t} Byzantine members already violates the t-condition")]
pub struct AlreadyViolated {
    pub nmh: u32,
    pub t: u32,
}

/// Smallest number of honest leaves, and of Byzantine joins counted against
/// the current group size, that break the t-condition.
pub fn violation_thresholds(nmh: u32, t: u32) -> Result<Thresholds, AlreadyViolated> {
    if 3 * t >= nmh {
        return Err(AlreadyViolated { nmh, t });
    }
    Ok(Thresholds { leave_k2: nmh - 3 * t, join_k3: nmh.div_ceil(3) - t })
}

/// Byzantine joins that break the t-condition when every join also grows the
/// group.
pub fn growing_join_threshold(nmh: u32, t: u32) -> Result<u32, AlreadyViolated> {
    if 3 * t >= nmh {
        return Err(AlreadyViolated { nmh, t });
    }
    Ok((nmh - 3 * t).div_ceil(2))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thresholds_examples() {
        assert_eq!(violation_thresholds(30, 7), Ok(Thresholds { leave_k2: 9, join_k3: 3 }));
        assert_eq!(violation_thresholds(30, 9).unwrap().join_k3, 1);
        assert_eq!(violation_thresholds(3, 0), Ok(Thresholds { leave_k2: 3, join_k3: 1 }));
        assert_eq!(violation_thresholds(30, 10), Err(AlreadyViolated { nmh: 30, t: 10 }));
        assert_eq!(growing_join_threshold(30, 7), Ok(5));
    }

    /// Direct evaluation of the condition over every count.
    #[test]
    fn thresholds_match_brute_force() {
        for nmh in 1..=40u32 {
            for t in 0..=nmh {
                let Ok(th) = violation_thresholds(nmh, t) else {
                    assert!(!t_compliant(nmh, t) || nmh == 0);
                    continue;
                };
                let leave = (0..=nmh).find(|k| 3 * t >= nmh - k).unwrap();
                assert_eq!(th.leave_k2, leave, "leave {nmh} {t}");
                let join = (0..=nmh).find(|k| 3 * (t + k) >= nmh).unwrap();
                assert_eq!(th.join_k3, join, "join {nmh} {t}");
                let grow = (0..=3 * nmh).find(|k| 3 * (t + k) >= nmh + k).unwrap();
                assert_eq!(growing_join_threshold(nmh, t).unwrap(), grow, "grow {nmh} {t}");
            }
        }
    }

    #[test]
    fn compliance_boundaries() {
        assert!(t_compliant(30, 7));
        assert!(t_compliant(30, 9));
        assert!(!t_compliant(30, 10));
        assert!(t_compliant(0, 0));
    }
}
