//! Mobile host: application broadcast and delivery, echo participation and
//! the host side of handoff.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::types::{Action, AppMessage, Effects, MessageId, MssVector, NodeId, Payload, ProtocolMessage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum MhError {
    #[error("host is in transit")]
    InTransit,
}

/// Inputs that drive a host.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MhInput {
    Broadcast(Payload),
    Receive {
        from: NodeId,
        msg: ProtocolMessage,
    },
    StartHandoff(NodeId),
    RadioRange(NodeId),
    Connect {
        mss: NodeId,
        members: BTreeSet<NodeId>,
    },
    /// Membership of the current station changed.
    RangeUpdate(BTreeSet<NodeId>),
    /// Timer for adversary schedules; honest hosts ignore it.
    Wake(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MhState {
    pub id: NodeId,
    pub telepoint: Option<NodeId>,
    pub seq: u64,
    pub h_deliv: MssVector,
    pub view: Option<BTreeSet<NodeId>>,
    pub h_deliv_from_h: BTreeMap<u32, u64>,
    pub last_bcast: Option<AppMessage>,
    pub delivered_log: Vec<MessageId>,
    pub echoed: BTreeSet<MessageId>,
    /// Station left by the last disconnect, reported in RequestMsg.
    pub prev_station: Option<NodeId>,
    /// Station being moved to.
    pub heading: Option<NodeId>,
    /// Own broadcasts not delivered back yet.
    pub unconfirmed: Vec<AppMessage>,
    /// Last own seq when a group was left with unconfirmed broadcasts; those
    /// up to it are sent again once the new station lists this host.
    pub resend_upto: Option<u64>,
}

impl MhState {
    pub fn new(id: NodeId, n_mss: usize, station: NodeId, members: &BTreeSet<NodeId>) -> Self {
        let mut view = members.clone();
        view.insert(id);
        MhState {
            id,
            telepoint: Some(station),
            seq: 0,
            h_deliv: MssVector::zeros(n_mss),
            view: Some(view),
            h_deliv_from_h: BTreeMap::new(),
            last_bcast: None,
            delivered_log: Vec::new(),
            echoed: BTreeSet::new(),
            prev_station: None,
            heading: None,
            unconfirmed: Vec::new(),
            resend_upto: None,
        }
    }

    pub fn is_attached(&self) -> bool {
        self.telepoint.is_some()
    }

    fn knows_station(&self, s: NodeId) -> bool {
        s.is_mss() && (1..=self.h_deliv.0.len()).contains(&(s.index as usize))
    }

    pub fn has_delivered(&self, id: MessageId) -> bool {
        self.delivered_log.contains(&id)
    }

    pub fn apply(&mut self, input: MhInput) -> Result<Effects, MhError> {
        match input {
            MhInput::Broadcast(p) => self.bcm_hbroadcast(p),
            MhInput::Receive { from, msg } => Ok(self.on_receive(from, msg)),
            MhInput::StartHandoff(dest) => self.start_disconnect(dest),
            MhInput::RadioRange(mss) => Ok(self.on_radio_range(mss)),
            MhInput::Connect { mss, members } => Ok(self.complete_connect(mss, &members)),
            MhInput::RangeUpdate(members) => Ok(self.on_range_update(&members)),
            MhInput::Wake(_) => Ok(Effects::new()),
        }
    }

    /// Sends INIT to the view (self included) and to the telepoint. Repeating
    /// the last payload re-sends it under the same seq.
    pub fn bcm_hbroadcast(&mut self, payload: Payload) -> Result<Effects, MhError> {
        let station = self.telepoint.ok_or(MhError::InTransit)?;
        let duplicate = self.last_bcast.as_ref().is_some_and(|m| m.payload == payload);
        if !duplicate {
            self.seq += 1;
        }
        let app = AppMessage { origin: self.id, seq: self.seq, payload };
        self.last_bcast = Some(app.clone());
        if !duplicate {
            self.unconfirmed.push(app.clone());
        }
        let mut fx = Effects::new();
        let detail = if duplicate { "duplicate" } else { "" };
        fx.app_note(Action::BcmHBroadcast, None, &app, detail);
        fx.app_note(Action::BrBroadcast, None, &app, "");
        let msg = ProtocolMessage::Init { app };
        for &h in self.view.iter().flatten() {
            fx.send(h, msg.clone());
        }
        fx.send(station, msg);
        Ok(fx)
    }

    pub fn on_receive(&mut self, from: NodeId, msg: ProtocolMessage) -> Effects {
        if let ProtocolMessage::ForwardGlobal { origin_mss, .. } | ProtocolMessage::ForwardCatchup { origin_mss, .. } =
            &msg
        {
            if !self.knows_station(*origin_mss) {
                let mut fx = Effects::new();
                fx.disregard(Some(from), &msg, "unknown station");
                return fx;
            }
        }
        match msg {
            ProtocolMessage::Init { ref app } => {
                let app = app.clone();
                self.on_init(from, &msg, app)
            }
            ProtocolMessage::Ready { ref app, .. } => {
                let app = app.clone();
                self.on_ready(from, &msg, app)
            }
            ProtocolMessage::ForwardGlobal { ref app, origin_mss } => {
                let app = app.clone();
                self.on_forward_global(from, &msg, app, origin_mss)
            }
            ProtocolMessage::ForwardCatchup { ref app, origin_mss, ref group_view } => {
                let (app, view) = (app.clone(), group_view.clone());
                self.on_forward_catchup(from, &msg, app, origin_mss, view)
            }
            other => {
                let mut fx = Effects::new();
                fx.disregard(Some(from), &other, "unexpected at host");
                fx
            }
        }
    }

    fn on_init(&mut self, from: NodeId, msg: &ProtocolMessage, app: AppMessage) -> Effects {
        let mut fx = Effects::new();
        let Some(station) = self.telepoint else {
            fx.disregard(Some(from), msg, "in transit");
            return fx;
        };
        let id = app.id();
        let known = self.h_deliv_from_h.get(&app.origin.index).copied().unwrap_or(0);
        if app.seq == known {
            fx.disregard(Some(from), msg, "duplicate");
        } else if self.echoed.contains(&id) || self.has_delivered(id) {
            fx.disregard(Some(from), msg, "already echoed");
        } else {
            self.echoed.insert(id);
            fx.send(station, ProtocolMessage::Echo { origin_index: app.origin.index, seq: app.seq, app });
        }
        fx
    }

    fn on_ready(&mut self, from: NodeId, msg: &ProtocolMessage, app: AppMessage) -> Effects {
        let mut fx = Effects::new();
        if self.telepoint != Some(from) {
            fx.disregard(Some(from), msg, "not my station");
        } else if self.has_delivered(app.id()) {
            fx.disregard(Some(from), msg, "duplicate");
        } else {
            self.deliver(&mut fx, from, from, app, "ready");
        }
        fx
    }

    fn on_forward_global(
        &mut self,
        from: NodeId,
        msg: &ProtocolMessage,
        app: AppMessage,
        origin_mss: NodeId,
    ) -> Effects {
        let mut fx = Effects::new();
        if self.telepoint != Some(from) {
            fx.disregard(Some(from), msg, "not my station");
        } else if self.has_delivered(app.id()) {
            fx.disregard(Some(from), msg, "duplicate");
        } else {
            self.deliver(&mut fx, from, origin_mss, app, "forward");
        }
        fx
    }

    fn on_forward_catchup(
        &mut self,
        from: NodeId,
        msg: &ProtocolMessage,
        app: AppMessage,
        origin_mss: NodeId,
        group_view: BTreeSet<NodeId>,
    ) -> Effects {
        let mut fx = Effects::new();
        if self.telepoint != Some(from) {
            fx.disregard(Some(from), msg, "not my station");
            return fx;
        }
        if self.view.is_none() {
            let mut view = group_view;
            view.insert(self.id);
            self.view = Some(view);
        }
        if self.has_delivered(app.id()) {
            fx.disregard(Some(from), msg, "duplicate");
        } else {
            self.deliver(&mut fx, from, origin_mss, app, "catchup");
        }
        fx
    }

    fn deliver(&mut self, fx: &mut Effects, from: NodeId, count_at: NodeId, app: AppMessage, how: &str) {
        self.h_deliv.incr(count_at);
        if app.origin.is_mh() {
            *self.h_deliv_from_h.entry(app.origin.index).or_insert(0) += 1;
        }
        self.delivered_log.push(app.id());
        self.unconfirmed.retain(|m| m.id() != app.id());
        fx.app_note(Action::BcmHDeliver, Some(from), &app, how);
    }

    /// Leaves the current group: Disconnect goes to the old station and the
    /// host is in transit until it connects to `dest`.
    pub fn start_disconnect(&mut self, dest: NodeId) -> Result<Effects, MhError> {
        let station = self.telepoint.ok_or(MhError::InTransit)?;
        let mut fx = Effects::new();
        fx.send(station, ProtocolMessage::Disconnect { dest_mss: dest, h_deliv: self.h_deliv.clone() });
        fx.note(Action::HandoffStart, Some(dest), None, format!("leaving {station}"));
        self.prev_station = Some(station);
        self.resend_upto = (!self.unconfirmed.is_empty()).then_some(self.seq);
        self.heading = Some(dest);
        self.telepoint = None;
        self.view = None;
        Ok(fx)
    }

    pub fn on_radio_range(&mut self, mss: NodeId) -> Effects {
        let mut fx = Effects::new();
        fx.note(Action::GroupJoin, Some(mss), None, "radio range detected");
        fx
    }

    pub fn complete_connect(&mut self, mss: NodeId, members: &BTreeSet<NodeId>) -> Effects {
        let mut fx = Effects::new();
        if self.telepoint.is_some() {
            fx.note(Action::Disregard, Some(mss), None, "connect while attached");
            return fx;
        }
        let mut view = members.clone();
        view.insert(self.id);
        self.telepoint = Some(mss);
        self.view = Some(view);
        self.heading = None;
        fx.note(Action::GroupJoin, Some(mss), None, "telepoint set");
        let src = self.prev_station.unwrap_or(mss);
        fx.send(mss, ProtocolMessage::RequestMsg { src_mss: src, h_deliv: self.h_deliv.clone() });
        fx.extend(self.resend(members));
        fx
    }

    pub fn on_range_update(&mut self, members: &BTreeSet<NodeId>) -> Effects {
        if self.telepoint.is_none() {
            return Effects::new();
        }
        let mut view = members.clone();
        view.insert(self.id);
        self.view = Some(view);
        self.resend(members)
    }

    fn resend(&mut self, members: &BTreeSet<NodeId>) -> Effects {
        let mut fx = Effects::new();
        let Some(station) = self.telepoint else {
            return fx;
        };
        let Some(upto) = self.resend_upto else {
            return fx;
        };
        if !members.contains(&self.id) {
            return fx;
        }
        self.resend_upto = None;
        for app in self.unconfirmed.clone().into_iter().filter(|m| m.seq <= upto) {
            self.echoed.remove(&app.id());
            let msg = ProtocolMessage::Init { app };
            for &h in self.view.iter().flatten() {
                fx.send(h, msg.clone());
            }
            fx.send(station, msg);
        }
        fx
    }
}
