//! Deterministic discrete-event simulator with FIFO channels.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::Serialize;

use crate::adversary::{wrap, Adversary, AdversaryStrategy};
use crate::config::{ConfigError, ScenarioConfig, WorkloadEvent};
use crate::mh::{MhInput, MhState};
use crate::mobility::{schedule_mobility, MobilityPlan};
use crate::mss::MssState;
use crate::types::{
    Action, Effect, Effects, MessageId, MessageKind, NodeId, Payload, ProtocolMessage, TraceEvent, TraceMessage,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum ChannelClass {
    /// Host to host and host to station links.
    Group,
    /// Station to station causal traffic.
    Causal,
    /// Station to station handoff traffic.
    Handoff,
}

pub fn channel_class(src: NodeId, dst: NodeId, msg: &ProtocolMessage) -> ChannelClass {
    if src.is_mss() && dst.is_mss() {
        match msg {
            ProtocolMessage::GlobalBcast { .. } => ChannelClass::Causal,
            _ => ChannelClass::Handoff,
        }
    } else {
        ChannelClass::Group
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    Deliver {
        src: NodeId,
        dst: NodeId,
        chan_seq: u64,
        msg: ProtocolMessage,
        depth: u64,
        /// Station of a sending host at send time.
        sender_station: Option<NodeId>,
    },
    RadioRangeDetected {
        mh: NodeId,
        mss: NodeId,
    },
    Connect {
        mh: NodeId,
        mss: NodeId,
    },
    AppBroadcast {
        mh: NodeId,
        payload: Payload,
    },
    MssAppBroadcast {
        mss: NodeId,
        payload: Payload,
    },
    StartHandoff {
        mh: NodeId,
        dest: NodeId,
    },
    Wake {
        mh: NodeId,
        index: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub tick: u64,
    pub tiebreak: u64,
    pub kind: EventKind,
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq, Serialize)]
struct ChannelState {
    sent: u64,
    last_arrival: u64,
}

/// Sends attributed to one application message.
#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct Counts {
    pub init: u64,
    pub echo: u64,
    pub ready: u64,
    pub global: u64,
    pub forward: u64,
    pub catchup: u64,
    /// Deepest causal step per message kind, counting the triggering
    /// broadcast as step 0.
    pub depth: BTreeMap<MessageKind, u64>,
}

impl Counts {
    fn record(&mut self, kind: MessageKind, depth: u64) {
        match kind {
            MessageKind::Init => self.init += 1,
            MessageKind::Echo => self.echo += 1,
            MessageKind::Ready => self.ready += 1,
            MessageKind::GlobalBcast => self.global += 1,
            MessageKind::ForwardGlobal => self.forward += 1,
            MessageKind::ForwardCatchup => self.catchup += 1,
            _ => return,
        }
        let d = self.depth.entry(kind).or_insert(0);
        *d = (*d).max(depth);
    }

    fn steps_over(&self, kinds: &[MessageKind]) -> u64 {
        kinds.iter().filter_map(|k| self.depth.get(k)).copied().max().unwrap_or(0)
    }

    pub fn steps(&self) -> u64 {
        use MessageKind::*;
        self.steps_over(&[Init, Echo, Ready, GlobalBcast, ForwardGlobal])
    }
}

#[derive(Debug, Default, Clone, PartialEq, Eq, Serialize)]
pub struct MessageAccounting {
    pub per_id: BTreeMap<MessageId, Counts>,
    /// Handoff traffic, which belongs to no application message.
    pub handoff: BTreeMap<MessageKind, u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AccountingError {
    #[error("no messages recorded for {0}")]
    Unknown(MessageId),
    #[error("broadcast {0} never completed its quorum")]
    IncompleteBroadcast(MessageId),
    #[error("broadcast {0} never left its station")]
    NotGlobal(MessageId),
}

/// Protocol messages and communication steps of an intra-group broadcast:
/// INIT, ECHO and READY.
pub fn count_local_broadcast(acc: &MessageAccounting, id: MessageId) -> Result<(u64, u64), AccountingError> {
    use MessageKind::*;
    let c = acc.per_id.get(&id).ok_or(AccountingError::Unknown(id))?;
    if c.ready == 0 {
        return Err(AccountingError::IncompleteBroadcast(id));
    }
    Ok((c.init + c.echo + c.ready, c.steps_over(&[Init, Echo, Ready])))
}

/// Protocol messages and communication steps of a system-wide broadcast:
/// INIT, ECHO, one GlobalBcast per station and the relays to other groups.
pub fn count_global_broadcast(acc: &MessageAccounting, id: MessageId) -> Result<(u64, u64), AccountingError> {
    use MessageKind::*;
    let c = acc.per_id.get(&id).ok_or(AccountingError::Unknown(id))?;
    if c.global == 0 {
        return Err(AccountingError::NotGlobal(id));
    }
    Ok((c.init + c.echo + c.global + c.forward, c.steps_over(&[Init, Echo, GlobalBcast, ForwardGlobal])))
}

impl MessageAccounting {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("broadcast_id,init,echo,ready,global,forward,catchup,steps\n");
        for (id, c) in &self.per_id {
            let _ = writeln!(
                out,
                "{}:{},{},{},{},{},{},{},{}",
                id.origin,
                id.seq,
                c.init,
                c.echo,
                c.ready,
                c.global,
                c.forward,
                c.catchup,
                c.steps()
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{actor} sent a message under identity {claimed}")]
    Impersonation { actor: NodeId, claimed: NodeId },
    #[error("event budget exhausted at tick {0}")]
    Runaway(u64),
}

struct HostNode {
    state: MhState,
    adversary: Option<Adversary>,
}

impl HostNode {
    fn step(&mut self, now: u64, input: MhInput) -> Result<Effects, crate::mh::MhError> {
        match &mut self.adversary {
            Some(a) => a.step(&mut self.state, now, input),
            None => self.state.apply(input),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub trace: Vec<TraceEvent>,
    pub accounting: MessageAccounting,
    pub hosts: Vec<MhState>,
    pub stations: Vec<MssState>,
    /// The queue drained before the horizon.
    pub quiescent: bool,
    pub mobility: MobilityPlan,
}

impl SimOutcome {
    pub fn host(&self, h: NodeId) -> &MhState {
        &self.hosts[h.index as usize - 1]
    }

    pub fn station(&self, s: NodeId) -> &MssState {
        &self.stations[s.index as usize - 1]
    }
}

const EVENT_BUDGET: u64 = 50_000_000;

pub struct Simulator<'a> {
    config: &'a ScenarioConfig,
    now: u64,
    next_tiebreak: u64,
    queue: BTreeMap<(u64, u64), EventKind>,
    channels: BTreeMap<(NodeId, NodeId, ChannelClass), ChannelState>,
    hosts: Vec<HostNode>,
    stations: Vec<MssState>,
    trace: Vec<TraceEvent>,
    accounting: MessageAccounting,
}

pub fn run(config: &ScenarioConfig) -> Result<SimOutcome, SimError> {
    config.validate()?;
    let plan = schedule_mobility(config);
    let mut sim = Simulator::new(config);
    for w in &config.workload {
        sim.schedule_workload(w);
    }
    for (_, w) in &plan.handoffs {
        sim.schedule_workload(w);
    }
    let quiescent = sim.run_to_end()?;
    Ok(SimOutcome {
        trace: sim.trace,
        accounting: sim.accounting,
        hosts: sim.hosts.into_iter().map(|h| h.state).collect(),
        stations: sim.stations,
        quiescent,
        mobility: plan,
    })
}

impl<'a> Simulator<'a> {
    fn new(config: &'a ScenarioConfig) -> Self {
        let n_mss = config.n_mss as usize;
        let stations: Vec<MssState> = (1..=config.n_mss)
            .map(|j| {
                let s = NodeId::mss(j);
                let mut st = MssState::new(s, n_mss, config.members_of(s), config.channel_latency);
                st.retention = config.transit_delay
                    + 2 * (config.channel_latency + config.handoff_latency() + config.causal_latency())
                    + 2;
                st
            })
            .collect();
        let hosts: Vec<HostNode> = (1..=config.n_mh)
            .map(|i| {
                let h = NodeId::mh(i);
                let s = config.initial_assignment[&h];
                let state = MhState::new(h, n_mss, s, &stations[s.index as usize - 1].mh_set);
                let adversary = config
                    .is_byzantine(h)
                    .then(|| wrap(config.adversary_strategy.get(&h).cloned().unwrap_or(AdversaryStrategy::Conforming)));
                HostNode { state, adversary }
            })
            .collect();
        let mut sim = Simulator {
            config,
            now: 0,
            next_tiebreak: 0,
            queue: BTreeMap::new(),
            channels: BTreeMap::new(),
            hosts,
            stations,
            trace: Vec::new(),
            accounting: MessageAccounting::default(),
        };
        let wakes: Vec<(u64, NodeId, usize)> = sim
            .hosts
            .iter()
            .filter_map(|h| h.adversary.as_ref().map(|a| (h.state.id, a.wake_ticks())))
            .flat_map(|(id, w)| w.into_iter().map(move |(t, i)| (t, id, i)))
            .collect();
        for (t, mh, index) in wakes {
            sim.push(t, EventKind::Wake { mh, index });
        }
        sim
    }

    fn push(&mut self, tick: u64, kind: EventKind) {
        self.queue.insert((tick, self.next_tiebreak), kind);
        self.next_tiebreak += 1;
    }

    fn schedule_workload(&mut self, w: &WorkloadEvent) {
        match w.clone() {
            WorkloadEvent::Broadcast { tick, mh, payload } => self.push(tick, EventKind::AppBroadcast { mh, payload }),
            WorkloadEvent::MssBroadcast { tick, mss, payload } => {
                self.push(tick, EventKind::MssAppBroadcast { mss, payload })
            }
            WorkloadEvent::Handoff { tick, mh, dest } => self.push(tick, EventKind::StartHandoff { mh, dest }),
        }
    }

    fn run_to_end(&mut self) -> Result<bool, SimError> {
        let mut processed = 0u64;
        while let Some(((tick, _), _)) = self.queue.first_key_value() {
            if self.config.horizon_ticks.is_some_and(|h| *tick > h) {
                return Ok(false);
            }
            let ((tick, _), kind) = self.queue.pop_first().expect("non-empty");
            self.now = tick;
            self.process(kind)?;
            processed += 1;
            if processed > EVENT_BUDGET {
                return Err(SimError::Runaway(self.now));
            }
        }
        Ok(true)
    }

    fn host_mut(&mut self, h: NodeId) -> &mut HostNode {
        &mut self.hosts[h.index as usize - 1]
    }

    fn station_mut(&mut self, s: NodeId) -> &mut MssState {
        &mut self.stations[s.index as usize - 1]
    }

    fn event(
        &mut self,
        actor: NodeId,
        action: Action,
        peer: Option<NodeId>,
        message: Option<TraceMessage>,
        detail: &str,
    ) {
        self.trace.push(TraceEvent {
            tick: self.now,
            actor,
            action,
            peer,
            chan_seq: None,
            message,
            detail: detail.to_string(),
        });
    }

    fn process(&mut self, kind: EventKind) -> Result<(), SimError> {
        let now = self.now;
        match kind {
            EventKind::Deliver { src, dst, chan_seq, msg, depth, sender_station } => {
                if dst.is_mh() {
                    let st = &self.hosts[dst.index as usize - 1].state;
                    let reachable = match st.telepoint {
                        None => false,
                        Some(t) if src.is_mss() => t == src,
                        Some(t) => sender_station == Some(t),
                    };
                    if !reachable {
                        let why = if st.telepoint.is_none() {
                            "dropped: in transit"
                        } else {
                            "dropped: not in sender's group"
                        };
                        self.event(dst, Action::Disregard, Some(src), Some(TraceMessage::Proto(msg)), why);
                        return Ok(());
                    }
                    self.trace.push(TraceEvent {
                        tick: now,
                        actor: dst,
                        action: Action::Receive,
                        peer: Some(src),
                        chan_seq: Some(chan_seq),
                        message: Some(TraceMessage::Proto(msg.clone())),
                        detail: String::new(),
                    });
                    let fx = self.host_mut(dst).step(now, MhInput::Receive { from: src, msg }).unwrap_or_default();
                    self.apply(dst, fx, depth)?;
                } else {
                    self.trace.push(TraceEvent {
                        tick: now,
                        actor: dst,
                        action: Action::Receive,
                        peer: Some(src),
                        chan_seq: Some(chan_seq),
                        message: Some(TraceMessage::Proto(msg.clone())),
                        detail: String::new(),
                    });
                    self.station_step(dst, depth, |s| s.on_receive(now, src, msg))?;
                }
            }
            EventKind::AppBroadcast { mh, payload } => match self.host_mut(mh).step(now, MhInput::Broadcast(payload)) {
                Ok(fx) => self.apply(mh, fx, 0)?,
                Err(e) => self.event(mh, Action::Disregard, None, None, &format!("broadcast rejected: {e}")),
            },
            EventKind::MssAppBroadcast { mss, payload } => {
                self.station_step(mss, 0, |s| s.bcm_sbroadcast(payload))?;
            }
            EventKind::StartHandoff { mh, dest } => match self.host_mut(mh).step(now, MhInput::StartHandoff(dest)) {
                Ok(fx) => {
                    if fx.has_action(Action::HandoffStart) {
                        self.push(now + self.config.transit_delay, EventKind::RadioRangeDetected { mh, mss: dest });
                    }
                    self.apply(mh, fx, 0)?;
                }
                Err(e) => self.event(mh, Action::Disregard, Some(dest), None, &format!("handoff rejected: {e}")),
            },
            EventKind::RadioRangeDetected { mh, mss } => {
                let fx = self.host_mut(mh).step(now, MhInput::RadioRange(mss)).unwrap_or_default();
                if fx.has_action(Action::GroupJoin) {
                    self.push(now + 1, EventKind::Connect { mh, mss });
                }
                self.apply(mh, fx, 0)?;
            }
            EventKind::Connect { mh, mss } => {
                let members = self.stations[mss.index as usize - 1].mh_set.clone();
                let fx = self.host_mut(mh).step(now, MhInput::Connect { mss, members }).unwrap_or_default();
                self.apply(mh, fx, 0)?;
            }
            EventKind::Wake { mh, index } => {
                let fx = self.host_mut(mh).step(now, MhInput::Wake(index)).unwrap_or_default();
                self.apply(mh, fx, 0)?;
            }
        }
        Ok(())
    }

    fn station_step(
        &mut self,
        s: NodeId,
        depth: u64,
        f: impl FnOnce(&mut MssState) -> Effects,
    ) -> Result<(), SimError> {
        let now = self.now;
        self.station_mut(s).now = now;
        let before = self.station_mut(s).mh_set.clone();
        let fx = f(self.station_mut(s));
        let after = self.station_mut(s).mh_set.clone();
        let hosts_fx = if before != after { self.range_update(s, &after) } else { Vec::new() };
        self.apply(s, fx, depth)?;
        for (h, fx) in hosts_fx {
            self.apply(h, fx, 0)?;
        }
        Ok(())
    }

    /// Radio-layer view refresh for every host attached to `s`.
    fn range_update(&mut self, s: NodeId, members: &BTreeSet<NodeId>) -> Vec<(NodeId, Effects)> {
        let now = self.now;
        let mut out = Vec::new();
        for host in &mut self.hosts {
            if host.state.telepoint == Some(s) {
                let fx = host.step(now, MhInput::RangeUpdate(members.clone())).unwrap_or_default();
                if !fx.0.is_empty() {
                    out.push((host.state.id, fx));
                }
            }
        }
        out
    }

    fn count(&mut self, msg: &ProtocolMessage, depth: u64) {
        match msg.app() {
            Some(app) => self.accounting.per_id.entry(app.id()).or_default().record(msg.kind(), depth),
            None => *self.accounting.handoff.entry(msg.kind()).or_insert(0) += 1,
        }
    }

    fn apply(&mut self, actor: NodeId, fx: Effects, depth: u64) -> Result<(), SimError> {
        for e in fx.0 {
            match e {
                Effect::Note(n) => self.event(actor, n.action, n.peer, n.message, &n.detail),
                Effect::Send { to, msg } => self.send(actor, to, msg, depth + 1)?,
                Effect::Loopback(msg) => {
                    let class = channel_class(actor, actor, &msg);
                    let ch = self.channels.entry((actor, actor, class)).or_default();
                    ch.sent += 1;
                    let seq = ch.sent;
                    self.count(&msg, depth + 1);
                    for action in [Action::Send, Action::Receive] {
                        self.trace.push(TraceEvent {
                            tick: self.now,
                            actor,
                            action,
                            peer: Some(actor),
                            chan_seq: Some(seq),
                            message: Some(TraceMessage::Proto(msg.clone())),
                            detail: String::new(),
                        });
                    }
                }
            }
        }
        Ok(())
    }

    fn send(&mut self, src: NodeId, dst: NodeId, msg: ProtocolMessage, depth: u64) -> Result<(), SimError> {
        if let ProtocolMessage::Init { app } = &msg {
            if src.is_mh() && app.origin != src {
                return Err(SimError::Impersonation { actor: src, claimed: app.origin });
            }
        }
        let class = channel_class(src, dst, &msg);
        let latency = match class {
            ChannelClass::Group => self.config.channel_latency,
            ChannelClass::Causal => self.config.causal_latency(),
            ChannelClass::Handoff => self.config.handoff_latency(),
        };
        let now = self.now;
        let ch = self.channels.entry((src, dst, class)).or_default();
        ch.sent += 1;
        let chan_seq = ch.sent;
        let arrival = (now + latency).max(ch.last_arrival);
        ch.last_arrival = arrival;
        self.count(&msg, depth);
        self.trace.push(TraceEvent {
            tick: now,
            actor: src,
            action: Action::Send,
            peer: Some(dst),
            chan_seq: Some(chan_seq),
            message: Some(TraceMessage::Proto(msg.clone())),
            detail: String::new(),
        });
        let sender_station = if src.is_mh() { self.hosts[src.index as usize - 1].state.telepoint } else { None };
        self.push(arrival, EventKind::Deliver { src, dst, chan_seq, msg, depth, sender_station });
        Ok(())
    }
}

#[derive(Serialize)]
struct TraceHeader<'a> {
    config_hash: &'a str,
    seed: u64,
}

/// Trace file contents: a header line, then one event per line.
pub fn render_trace(config: &ScenarioConfig, trace: &[TraceEvent]) -> String {
    let hash = config.hash();
    let mut out = serde_json::to_string(&TraceHeader { config_hash: &hash, seed: config.seed }).expect("header");
    out.push('\n');
    for e in trace {
        out.push_str(&e.to_line());
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TraceParseError {
    #[error("line {line}: {reason}")]
    Malformed { line: usize, reason: String },
}

/// Parses a trace file, returning the header's seed and config hash.
pub fn parse_trace(text: &str) -> Result<(String, u64, Vec<TraceEvent>), TraceParseError> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, head) = lines.next().ok_or(TraceParseError::Malformed { line: 1, reason: "empty trace".into() })?;
    let header: serde_json::Value =
        serde_json::from_str(head).map_err(|e| TraceParseError::Malformed { line: 1, reason: e.to_string() })?;
    let hash = header.get("config_hash").and_then(|v| v.as_str()).unwrap_or_default().to_string();
    let seed = header.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
    let mut events = Vec::new();
    for (i, l) in lines {
        let e: TraceEvent =
            serde_json::from_str(l).map_err(|e| TraceParseError::Malformed { line: i + 1, reason: e.to_string() })?;
        events.push(e);
    }
    Ok((hash, seed, events))
}
