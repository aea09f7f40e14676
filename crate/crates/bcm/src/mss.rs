//! Support station: echo quorum filtering, causal delivery with barriers and
//! buffers, the station side of handoff and the application relay.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::types::{
    Action, AppMessage, CausalBarrier, Effect, Effects, MessageId, MssVector, NodeId, Payload, ProtocolMessage,
};

/// Distinct matching echoes needed to br-deliver in a group of `nmh`.
pub fn quorum_threshold(nmh: usize) -> usize {
    2 * nmh / 3 + 1
}

/// Echo collection for one message id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vote {
    pub opened_at: u64,
    pub init: Option<Payload>,
    pub echoes: BTreeMap<NodeId, AppMessage>,
    /// A sender contradicted itself (two INITs or two echoes that differ).
    pub conflict: bool,
}

impl Vote {
    fn open(now: u64) -> Self {
        Vote { opened_at: now, init: None, echoes: BTreeMap::new(), conflict: false }
    }

    fn conflicting(&self) -> bool {
        if self.conflict {
            return true;
        }
        let mut payloads = self.echoes.values().map(|a| &a.payload).chain(self.init.iter());
        match payloads.next() {
            Some(first) => payloads.any(|p| p != first),
            None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingGlobal {
    pub app: AppMessage,
    pub sender: NodeId,
    pub sn: u64,
    pub cb: CausalBarrier,
    pub forwarded: MssVector,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelivEntry {
    pub app: AppMessage,
    pub origin_mss: NodeId,
    pub sn: u64,
    /// Tick at which every station reported forwarding the entry.
    pub covered_at: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MssState {
    pub id: NodeId,
    pub n_mss: usize,
    /// Latency of the host-to-station channel, used to decide which members
    /// could have seen an INIT.
    pub mh_latency: u64,
    pub mh_set: BTreeSet<NodeId>,
    /// Join tick of members that arrived by handoff.
    pub joined_at: BTreeMap<NodeId, u64>,
    pub sn: u64,
    pub cb: CausalBarrier,
    pub moving: BTreeMap<NodeId, MssVector>,
    pub connecting: BTreeMap<NodeId, MssVector>,
    /// Joined via Removed, RequestMsg not seen yet: catch-up waits for it.
    pub awaiting: BTreeMap<NodeId, MssVector>,
    /// Disconnect from a host whose Removed has not arrived yet.
    pub deferred_leave: BTreeMap<NodeId, (NodeId, MssVector)>,
    pub recv_from_s: Vec<PendingGlobal>,
    pub recv_from_h: Vec<AppMessage>,
    pub s_deliv: MssVector,
    pub know_bcast: BTreeMap<u32, u64>,
    pub deliv_from_h: BTreeMap<u32, u64>,
    pub join_barrier: BTreeMap<NodeId, MssVector>,
    pub deliv_mes: VecDeque<DelivEntry>,
    pub forwarded: MssVector,
    pub recv_forward: Vec<MssVector>,
    pub pending_echo: BTreeMap<MessageId, Vote>,
    pub decided: BTreeSet<MessageId>,
    pub app_seq: u64,
    /// Ticks a covered entry is kept, long enough for a host that missed its
    /// forward while in transit to register here.
    pub retention: u64,
    pub now: u64,
}

impl MssState {
    pub fn new(id: NodeId, n_mss: usize, members: BTreeSet<NodeId>, mh_latency: u64) -> Self {
        MssState {
            id,
            n_mss,
            mh_latency,
            mh_set: members,
            joined_at: BTreeMap::new(),
            sn: 0,
            cb: CausalBarrier::new(),
            moving: BTreeMap::new(),
            connecting: BTreeMap::new(),
            awaiting: BTreeMap::new(),
            deferred_leave: BTreeMap::new(),
            recv_from_s: Vec::new(),
            recv_from_h: Vec::new(),
            s_deliv: MssVector::zeros(n_mss),
            know_bcast: BTreeMap::new(),
            deliv_from_h: BTreeMap::new(),
            join_barrier: BTreeMap::new(),
            deliv_mes: VecDeque::new(),
            forwarded: MssVector::zeros(n_mss),
            recv_forward: vec![MssVector::zeros(n_mss); n_mss],
            pending_echo: BTreeMap::new(),
            decided: BTreeSet::new(),
            app_seq: 0,
            retention: 0,
            now: 0,
        }
    }

    fn know(&self, h: NodeId) -> u64 {
        self.know_bcast.get(&h.index).copied().unwrap_or(0)
    }

    fn delivered_from(&self, h: NodeId) -> u64 {
        self.deliv_from_h.get(&h.index).copied().unwrap_or(0)
    }

    /// Members already caught up; the rest get everything through catch-up.
    fn live_members(&self) -> Vec<NodeId> {
        self.mh_set.iter().copied().filter(|h| !self.awaiting.contains_key(h)).collect()
    }

    fn in_group(&self, h: NodeId) -> bool {
        self.mh_set.contains(&h) || self.connecting.contains_key(&h)
    }

    fn is_station(&self, s: NodeId) -> bool {
        s.is_mss() && (1..=self.n_mss).contains(&(s.index as usize))
    }

    /// Why `msg` cannot have come from `from`, if it cannot.
    fn misaddressed(&self, from: NodeId, msg: &ProtocolMessage) -> Option<&'static str> {
        use ProtocolMessage::*;
        match msg {
            Init { .. } | Echo { .. } | RequestMsg { .. } if !from.is_mh() => Some("host message from a station"),
            Disconnect { .. } if !from.is_mh() => Some("host message from a station"),
            Disconnect { dest_mss, .. } if !self.is_station(*dest_mss) => Some("unknown station"),
            GlobalBcast { sender_mss, .. } | Removed { src_mss: sender_mss, .. } if *sender_mss != from => {
                Some("sender mismatch")
            }
            GlobalBcast { .. } | Removed { .. } | Accept { .. } if !self.is_station(from) => {
                Some("station message from a host")
            }
            Removed { mh, .. } | Accept { mh } if !mh.is_mh() => Some("not a host"),
            _ => None,
        }
    }

    pub fn on_receive(&mut self, now: u64, from: NodeId, msg: ProtocolMessage) -> Effects {
        use ProtocolMessage::*;
        self.now = self.now.max(now);
        if let Some(why) = self.misaddressed(from, &msg) {
            let mut fx = Effects::new();
            fx.disregard(Some(from), &msg, why);
            return fx;
        }
        match msg {
            Init { ref app } => {
                let app = app.clone();
                self.on_init(now, from, &msg, app)
            }
            Echo { origin_index, seq, ref app } => {
                let app = app.clone();
                if app.origin.index != origin_index || app.seq != seq || !app.origin.is_mh() {
                    let mut fx = Effects::new();
                    fx.disregard(Some(from), &msg, "malformed echo");
                    return fx;
                }
                self.on_echo(now, from, &msg, app)
            }
            GlobalBcast { app, sender_mss, sn, cb, forwarded } => {
                self.on_global(PendingGlobal { app, sender: sender_mss, sn, cb, forwarded })
            }
            Disconnect { dest_mss, h_deliv } => self.on_disconnect(now, from, dest_mss, h_deliv),
            RequestMsg { ref h_deliv, .. } => {
                let v = h_deliv.clone();
                self.on_request_msg(now, from, &msg, v)
            }
            Removed { src_mss, mh, h_deliv, know_bcast_entry } => {
                self.on_removed(now, src_mss, mh, h_deliv, know_bcast_entry)
            }
            Accept { mh } => self.on_accept(&ProtocolMessage::Accept { mh }, mh),
            Ready { .. } | ForwardGlobal { .. } | ForwardCatchup { .. } => {
                let mut fx = Effects::new();
                fx.disregard(Some(from), &msg, "unexpected at station");
                fx
            }
        }
    }

    fn on_init(&mut self, now: u64, from: NodeId, msg: &ProtocolMessage, app: AppMessage) -> Effects {
        let mut fx = Effects::new();
        let id = app.id();
        if app.origin != from || !from.is_mh() {
            fx.disregard(Some(from), msg, "origin mismatch");
        } else if !self.in_group(from) {
            fx.disregard(Some(from), msg, "not in group");
        } else if self.decided.contains(&id) || app.seq <= self.know(app.origin) {
            fx.disregard(Some(from), msg, "duplicate");
        } else {
            let vote = self.pending_echo.entry(id).or_insert_with(|| Vote::open(now));
            if vote.init.as_ref() == Some(&app.payload) {
                fx.disregard(Some(from), msg, "duplicate");
                return fx;
            }
            if vote.init.is_none() {
                vote.init = Some(app.payload.clone());
            } else {
                vote.conflict = true;
            }
            fx.extend(self.evaluate(id));
        }
        fx
    }

    fn on_echo(&mut self, now: u64, from: NodeId, msg: &ProtocolMessage, app: AppMessage) -> Effects {
        let mut fx = Effects::new();
        let id = app.id();
        if !self.in_group(from) {
            fx.disregard(Some(from), msg, "not in group");
        } else if self.decided.contains(&id) {
            fx.disregard(Some(from), msg, "decided");
        } else if app.seq <= self.know(app.origin) {
            fx.disregard(Some(from), msg, "duplicate");
        } else {
            let vote = self.pending_echo.entry(id).or_insert_with(|| Vote::open(now));
            match vote.echoes.get(&from) {
                Some(prev) if prev.payload == app.payload => {
                    fx.disregard(Some(from), msg, "duplicate echo");
                    return fx;
                }
                Some(_) => vote.conflict = true,
                None => {
                    vote.echoes.insert(from, app);
                }
            }
            fx.extend(self.evaluate(id));
        }
        fx
    }

    fn eligible(&self, vote: &Vote, origin: NodeId) -> Vec<NodeId> {
        let mut out: Vec<NodeId> = self
            .mh_set
            .iter()
            .copied()
            .filter(|m| {
                *m == origin
                    || !self.awaiting.contains_key(m)
                        && self.joined_at.get(m).is_none_or(|&j| j + self.mh_latency < vote.opened_at)
            })
            .collect();
        if vote.echoes.contains_key(&origin) && !out.contains(&origin) {
            out.push(origin);
        }
        out
    }

    fn evaluate(&mut self, id: MessageId) -> Effects {
        let mut fx = Effects::new();
        let Some(vote) = self.pending_echo.get(&id) else {
            return fx;
        };
        if vote.conflicting() {
            let app = vote.echoes.values().next().cloned().unwrap_or_else(|| AppMessage {
                origin: id.origin,
                seq: id.seq,
                payload: vote.init.clone().unwrap_or_default(),
            });
            self.pending_echo.remove(&id);
            self.decided.insert(id);
            fx.app_note(Action::Disregard, Some(id.origin), &app, "equivocation");
            return fx;
        }
        let eligible = self.eligible(vote, id.origin);
        if eligible.is_empty() {
            return fx;
        }
        let count = eligible.iter().filter(|m| vote.echoes.contains_key(m)).count();
        if count < quorum_threshold(eligible.len()) {
            return fx;
        }
        let app = vote.echoes.values().next().expect("quorum has echoes").clone();
        self.pending_echo.remove(&id);
        self.decided.insert(id);
        if self.local_ready(&app) {
            fx.app_note(Action::BrDeliver, Some(app.origin), &app, "");
            fx.extend(self.c_deliver_local(app));
            fx.extend(self.drain());
        } else {
            fx.app_note(Action::BrDeliver, Some(app.origin), &app, "buffered");
            self.recv_from_h.push(app);
        }
        fx
    }

    fn reevaluate_votes(&mut self) -> Effects {
        let mut fx = Effects::new();
        let ids: Vec<MessageId> = self.pending_echo.keys().copied().collect();
        for id in ids {
            fx.extend(self.evaluate(id));
        }
        fx
    }

    fn local_ready(&self, app: &AppMessage) -> bool {
        app.seq == self.delivered_from(app.origin) + 1
            && self.join_barrier.get(&app.origin).is_none_or(|b| self.s_deliv.dominates(b))
    }

    fn c_deliver_local(&mut self, app: AppMessage) -> Effects {
        let mut fx = Effects::new();
        fx.app_note(Action::CDeliver, Some(app.origin), &app, "local");
        fx.app_note(Action::BcmSDeliver, Some(self.id), &app, "local");
        let o = app.origin.index;
        let n = self.delivered_from(app.origin) + 1;
        self.deliv_from_h.insert(o, n);
        let k = self.know_bcast.entry(o).or_insert(0);
        *k = (*k).max(n);
        let ready = ProtocolMessage::Ready { app: app.clone(), origin: app.origin };
        for m in self.live_members() {
            fx.send(m, ready.clone());
        }
        self.forwarded.incr(self.id);
        fx.app_note(Action::BcmSBroadcast, None, &app, "relay");
        fx.extend(self.c_broadcast(app));
        fx
    }

    /// Station-originated application broadcast.
    pub fn bcm_sbroadcast(&mut self, payload: Payload) -> Effects {
        self.app_seq += 1;
        let app = AppMessage { origin: self.id, seq: self.app_seq, payload };
        let mut fx = Effects::new();
        fx.app_note(Action::BcmSBroadcast, None, &app, "");
        fx.extend(self.c_broadcast(app));
        fx.extend(self.drain());
        fx
    }

    /// Global causal broadcast to every station, itself included.
    pub fn c_broadcast(&mut self, app: AppMessage) -> Effects {
        let mut fx = Effects::new();
        self.sn += 1;
        fx.app_note(Action::CBroadcast, None, &app, format!("sn={}", self.sn));
        let msg = ProtocolMessage::GlobalBcast {
            app: app.clone(),
            sender_mss: self.id,
            sn: self.sn,
            cb: std::mem::take(&mut self.cb),
            forwarded: self.forwarded.clone(),
        };
        for j in 1..=self.n_mss as u32 {
            let to = NodeId::mss(j);
            if to != self.id {
                fx.send(to, msg.clone());
            }
        }
        fx.0.push(Effect::Loopback(msg.clone()));
        let ProtocolMessage::GlobalBcast { app, sender_mss, sn, cb, forwarded } = msg else { unreachable!() };
        let g = PendingGlobal { app, sender: sender_mss, sn, cb, forwarded };
        debug_assert!(self.global_ready(&g));
        fx.extend(self.deliver_global(g));
        fx
    }

    fn global_ready(&self, g: &PendingGlobal) -> bool {
        g.sn == self.s_deliv.get(g.sender) + 1 && g.cb.satisfied_by(&self.s_deliv)
    }

    fn on_global(&mut self, g: PendingGlobal) -> Effects {
        if self.global_ready(&g) {
            let mut fx = self.deliver_global(g);
            fx.extend(self.drain());
            self.collect_garbage();
            fx
        } else {
            self.recv_from_s.push(g);
            Effects::new()
        }
    }

    fn deliver_global(&mut self, g: PendingGlobal) -> Effects {
        let mut fx = Effects::new();
        let PendingGlobal { app, sender, sn, cb, forwarded } = g;
        fx.app_note(Action::CDeliver, Some(sender), &app, format!("sn={sn}"));
        self.s_deliv.incr(sender);
        self.cb.subtract(&cb);
        if sender != self.id {
            self.cb.insert(sender, sn);
        }
        self.deliv_mes.push_back(DelivEntry { app: app.clone(), origin_mss: sender, sn, covered_at: None });
        self.recv_forward[sender.slot()].max_with(&forwarded);
        if sender == self.id && app.origin.is_mh() {
            return fx;
        }
        if sender != self.id && app.origin.is_mh() {
            let o = app.origin.index;
            let n = self.delivered_from(app.origin) + 1;
            self.deliv_from_h.insert(o, n);
            let k = self.know_bcast.entry(o).or_insert(0);
            *k = (*k).max(n);
        }
        fx.app_note(Action::BcmSDeliver, Some(sender), &app, "");
        let fwd = ProtocolMessage::ForwardGlobal { app, origin_mss: sender };
        for m in self.live_members() {
            fx.send(m, fwd.clone());
        }
        self.forwarded.incr(sender);
        fx
    }

    /// Releases buffered messages until nothing more is deliverable.
    fn drain(&mut self) -> Effects {
        let mut fx = Effects::new();
        loop {
            if let Some(i) = self.recv_from_s.iter().position(|g| self.global_ready(g)) {
                let g = self.recv_from_s.remove(i);
                fx.extend(self.deliver_global(g));
                continue;
            }
            if let Some(i) = self.recv_from_h.iter().position(|a| self.local_ready(a)) {
                let app = self.recv_from_h.remove(i);
                fx.extend(self.c_deliver_local(app));
                continue;
            }
            break;
        }
        fx
    }

    fn collect_garbage(&mut self) {
        let min_f: Vec<u64> =
            (0..self.n_mss).map(|s| self.recv_forward.iter().map(|row| row.0[s]).min().unwrap_or(0)).collect();
        let waiting: Vec<&MssVector> = self.connecting.values().chain(self.awaiting.values()).collect();
        let (now, retention) = (self.now, self.retention);
        self.deliv_mes.retain_mut(|e| {
            let s = e.origin_mss;
            if min_f[s.slot()] < e.sn {
                return true;
            }
            let covered = *e.covered_at.get_or_insert(now);
            now < covered + retention || waiting.iter().any(|v| v.get(s) < e.sn)
        });
    }

    fn send_to_station(&mut self, now: u64, fx: &mut Effects, to: NodeId, msg: ProtocolMessage) {
        if to == self.id {
            fx.0.push(Effect::Loopback(msg.clone()));
            let id = self.id;
            fx.extend(self.on_receive(now, id, msg));
        } else {
            fx.send(to, msg);
        }
    }

    fn on_disconnect(&mut self, now: u64, from: NodeId, dest: NodeId, h_deliv: MssVector) -> Effects {
        let mut fx = Effects::new();
        if !self.mh_set.contains(&from) {
            if self.connecting.contains_key(&from) {
                self.deferred_leave.insert(from, (dest, h_deliv));
                fx.note(Action::Disregard, Some(from), None, "disconnect deferred until removed");
            } else {
                let msg = ProtocolMessage::Disconnect { dest_mss: dest, h_deliv };
                fx.disregard(Some(from), &msg, "not a member");
            }
            return fx;
        }
        self.mh_set.remove(&from);
        self.joined_at.remove(&from);
        self.awaiting.remove(&from);
        let abandoned: Vec<MessageId> = self.pending_echo.keys().copied().filter(|id| id.origin == from).collect();
        for id in abandoned {
            self.pending_echo.remove(&id);
            self.decided.insert(id);
            fx.note(Action::Disregard, Some(from), None, format!("{id} abandoned: origin left"));
        }
        self.moving.insert(from, h_deliv.clone());
        fx.note(Action::GroupLeave, Some(from), None, format!("to {dest}"));
        let buffered = self.recv_from_h.iter().filter(|a| a.origin == from).map(|a| a.seq).max().unwrap_or(0);
        let know_bcast_entry = self.know(from).max(buffered);
        let removed = ProtocolMessage::Removed { src_mss: self.id, mh: from, h_deliv, know_bcast_entry };
        self.send_to_station(now, &mut fx, dest, removed);
        fx.extend(self.reevaluate_votes());
        fx
    }

    fn on_request_msg(&mut self, now: u64, from: NodeId, msg: &ProtocolMessage, h_deliv: MssVector) -> Effects {
        let mut fx = Effects::new();
        if let Some(v) = self.awaiting.remove(&from) {
            self.joined_at.insert(from, now);
            fx.extend(self.catch_up(from, &v));
            return fx;
        }
        if self.mh_set.contains(&from) || self.connecting.contains_key(&from) {
            fx.disregard(Some(from), msg, "already known");
            return fx;
        }
        self.join_barrier.entry(from).or_insert_with(|| MssVector::zeros(self.n_mss)).max_with(&h_deliv);
        self.connecting.insert(from, h_deliv);
        fx
    }

    fn on_removed(&mut self, now: u64, src: NodeId, mh: NodeId, h_deliv: MssVector, know: u64) -> Effects {
        let mut fx = Effects::new();
        if self.mh_set.contains(&mh) {
            let msg = ProtocolMessage::Removed { src_mss: src, mh, h_deliv, know_bcast_entry: know };
            fx.disregard(Some(src), &msg, "already a member");
            return fx;
        }
        self.mh_set.insert(mh);
        self.joined_at.insert(mh, now);
        let k = self.know_bcast.entry(mh.index).or_insert(0);
        *k = (*k).max(know);
        self.join_barrier.entry(mh).or_insert_with(|| MssVector::zeros(self.n_mss)).max_with(&h_deliv);
        let connected = self.connecting.remove(&mh).is_some();
        fx.note(Action::GroupJoin, Some(mh), None, format!("from {src}"));
        self.send_to_station(now, &mut fx, src, ProtocolMessage::Accept { mh });
        if connected {
            fx.extend(self.catch_up(mh, &h_deliv));
        } else {
            self.awaiting.insert(mh, h_deliv);
        }
        fx.extend(self.reevaluate_votes());
        if let Some((dest, v)) = self.deferred_leave.remove(&mh) {
            fx.extend(self.on_disconnect(now, mh, dest, v));
        }
        fx
    }

    fn catch_up(&mut self, mh: NodeId, h_deliv: &MssVector) -> Effects {
        let mut fx = Effects::new();
        for e in &self.deliv_mes {
            if h_deliv.get(e.origin_mss) < e.sn {
                let msg = ProtocolMessage::ForwardCatchup {
                    app: e.app.clone(),
                    origin_mss: e.origin_mss,
                    group_view: self.mh_set.clone(),
                };
                fx.send(mh, msg);
            }
        }
        fx
    }

    fn on_accept(&mut self, msg: &ProtocolMessage, mh: NodeId) -> Effects {
        let mut fx = Effects::new();
        if self.moving.remove(&mh).is_some() {
            fx.note(Action::HandoffComplete, Some(mh), None, "");
        } else {
            fx.disregard(None, msg, "unknown host");
        }
        fx
    }
}
