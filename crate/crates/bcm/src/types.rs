//! Identifiers, wire messages and trace records shared by every module.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    Mh,
    Mss,
}

/// A mobile host `h<i>` or a support station `s<j>`, 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId {
    pub kind: NodeKind,
    pub index: u32,
}

impl NodeId {
    pub const fn mh(index: u32) -> Self {
        NodeId { kind: NodeKind::Mh, index }
    }

    pub const fn mss(index: u32) -> Self {
        NodeId { kind: NodeKind::Mss, index }
    }

    pub fn is_mh(self) -> bool {
        self.kind == NodeKind::Mh
    }

    pub fn is_mss(self) -> bool {
        self.kind == NodeKind::Mss
    }

    /// Zero-based slot in an MSS-indexed vector.
    pub fn slot(self) -> usize {
        self.index as usize - 1
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.kind {
            NodeKind::Mh => 'h',
            NodeKind::Mss => 's',
        };
        write!(f, "{p}{}", self.index)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid node id `{0}` (expected h<n> or s<n> with n >= 1)")]
pub struct ParseNodeIdError(pub String);

impl FromStr for NodeId {
    type Err = ParseNodeIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || ParseNodeIdError(s.to_string());
        let kind = match s.chars().next() {
            Some('h') => NodeKind::Mh,
            Some('s') => NodeKind::Mss,
            _ => return Err(err()),
        };
        let index: u32 = s[1..].parse().map_err(|_| err())?;
        if index == 0 {
            return Err(err());
        }
        Ok(NodeId { kind, index })
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Opaque application payload.
///
/// Serialized as plain text when it is printable ASCII not starting with
/// `0x`, otherwise as `0x` followed by lowercase hex.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Payload(pub Vec<u8>);

impl Payload {
    fn is_plain(&self) -> bool {
        self.0.iter().all(|b| (0x20..0x7f).contains(b)) && !self.0.starts_with(b"0x")
    }
}

impl From<&str> for Payload {
    fn from(s: &str) -> Self {
        Payload(s.as_bytes().to_vec())
    }
}

impl fmt::Display for Payload {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_plain() {
            f.write_str(std::str::from_utf8(&self.0).expect("ascii"))
        } else {
            write!(f, "0x{}", hex::encode(&self.0))
        }
    }
}

impl Serialize for Payload {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Payload {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        match s.strip_prefix("0x") {
            Some(h) => hex::decode(h).map(Payload).map_err(serde::de::Error::custom),
            None => Ok(Payload(s.into_bytes())),
        }
    }
}

/// Identity of a broadcast attempt. Payload is not part of it, which is what
/// makes equivocation (same id, different payload) observable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MessageId {
    pub origin: NodeId,
    pub seq: u64,
}

impl fmt::Display for MessageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{},{}>", self.origin, self.seq)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AppMessage {
    pub origin: NodeId,
    pub seq: u64,
    pub payload: Payload,
}

impl AppMessage {
    pub fn new(origin: NodeId, seq: u64, payload: impl Into<Payload>) -> Self {
        AppMessage { origin, seq, payload: payload.into() }
    }

    pub fn id(&self) -> MessageId {
        message_id(self)
    }
}

pub fn message_id(app: &AppMessage) -> MessageId {
    MessageId { origin: app.origin, seq: app.seq }
}

/// Highest global sequence number per MSS that a message causally depends on.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CausalBarrier(pub BTreeMap<NodeId, u64>);

impl CausalBarrier {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (NodeId, u64)>) -> Self {
        let mut cb = Self::new();
        for (s, sn) in pairs {
            cb.insert(s, sn);
        }
        cb
    }

    /// Adds `(mss, sn)`, keeping the larger sn for an existing entry.
    pub fn insert(&mut self, mss: NodeId, sn: u64) {
        let e = self.0.entry(mss).or_insert(0);
        *e = (*e).max(sn);
    }

    pub fn merge(&self, other: &CausalBarrier) -> CausalBarrier {
        let mut out = self.clone();
        for (&s, &sn) in &other.0 {
            out.insert(s, sn);
        }
        out
    }

    /// Drops entries implied by `other` (same MSS, sn not above other's).
    pub fn subtract(&mut self, other: &CausalBarrier) {
        self.0.retain(|s, sn| other.0.get(s).is_none_or(|o| *sn > *o));
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn satisfied_by(&self, s_deliv: &MssVector) -> bool {
        self.0.iter().all(|(s, &sn)| s_deliv.get(*s) >= sn)
    }
}

/// Fixed-length vector indexed by MSS.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MssVector(pub Vec<u64>);

impl MssVector {
    pub fn zeros(n_mss: usize) -> Self {
        MssVector(vec![0; n_mss])
    }

    pub fn get(&self, mss: NodeId) -> u64 {
        self.0.get(mss.slot()).copied().unwrap_or(0)
    }

    pub fn incr(&mut self, mss: NodeId) {
        self.0[mss.slot()] += 1;
    }

    pub fn set(&mut self, mss: NodeId, v: u64) {
        self.0[mss.slot()] = v;
    }

    pub fn max_with(&mut self, other: &MssVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a = (*a).max(*b);
        }
    }

    pub fn dominates(&self, other: &MssVector) -> bool {
        self.0.iter().zip(&other.0).all(|(a, b)| a >= b)
    }
}

/// Every message exchanged between nodes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type")]
pub enum ProtocolMessage {
    Init { app: AppMessage },
    Echo { origin_index: u32, seq: u64, app: AppMessage },
    Ready { app: AppMessage, origin: NodeId },
    GlobalBcast { app: AppMessage, sender_mss: NodeId, sn: u64, cb: CausalBarrier, forwarded: MssVector },
    ForwardGlobal { app: AppMessage, origin_mss: NodeId },
    ForwardCatchup { app: AppMessage, origin_mss: NodeId, group_view: BTreeSet<NodeId> },
    Disconnect { dest_mss: NodeId, h_deliv: MssVector },
    RequestMsg { src_mss: NodeId, h_deliv: MssVector },
    Removed { src_mss: NodeId, mh: NodeId, h_deliv: MssVector, know_bcast_entry: u64 },
    Accept { mh: NodeId },
}

impl ProtocolMessage {
    pub fn app(&self) -> Option<&AppMessage> {
        use ProtocolMessage::*;
        match self {
            Init { app }
            | Echo { app, .. }
            | Ready { app, .. }
            | GlobalBcast { app, .. }
            | ForwardGlobal { app, .. }
            | ForwardCatchup { app, .. } => Some(app),
            _ => None,
        }
    }

    pub fn kind(&self) -> MessageKind {
        use ProtocolMessage::*;
        match self {
            Init { .. } => MessageKind::Init,
            Echo { .. } => MessageKind::Echo,
            Ready { .. } => MessageKind::Ready,
            GlobalBcast { .. } => MessageKind::GlobalBcast,
            ForwardGlobal { .. } => MessageKind::ForwardGlobal,
            ForwardCatchup { .. } => MessageKind::ForwardCatchup,
            Disconnect { .. } => MessageKind::Disconnect,
            RequestMsg { .. } => MessageKind::RequestMsg,
            Removed { .. } => MessageKind::Removed,
            Accept { .. } => MessageKind::Accept,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MessageKind {
    Init,
    Echo,
    Ready,
    GlobalBcast,
    ForwardGlobal,
    ForwardCatchup,
    Disconnect,
    RequestMsg,
    Removed,
    Accept,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Action {
    Send,
    Receive,
    BrBroadcast,
    BrDeliver,
    CDeliver,
    CBroadcast,
    BcmHBroadcast,
    BcmHDeliver,
    BcmSBroadcast,
    BcmSDeliver,
    Disregard,
    HandoffStart,
    HandoffComplete,
    GroupJoin,
    GroupLeave,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceMessage {
    Proto(ProtocolMessage),
    App(AppMessage),
}

impl TraceMessage {
    pub fn app(&self) -> Option<&AppMessage> {
        match self {
            TraceMessage::Proto(p) => p.app(),
            TraceMessage::App(a) => Some(a),
        }
    }
}

/// One line of a trace.
///
/// `peer` is the other end of a send or receive, the station a delivery came
/// from, or the host a membership change concerns. `chan_seq` numbers sends on
/// a channel so that each Receive can be matched with its Send.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub tick: u64,
    pub actor: NodeId,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<NodeId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub chan_seq: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub message: Option<TraceMessage>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl TraceEvent {
    pub fn app(&self) -> Option<&AppMessage> {
        self.message.as_ref().and_then(TraceMessage::app)
    }

    pub fn proto(&self) -> Option<&ProtocolMessage> {
        match &self.message {
            Some(TraceMessage::Proto(p)) => Some(p),
            _ => None,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("trace events serialize")
    }
}

/// A trace record produced by a state machine, before the simulator stamps it
/// with a tick and actor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Note {
    pub action: Action,
    pub peer: Option<NodeId>,
    pub message: Option<TraceMessage>,
    pub detail: String,
}

/// Output of a transition, in the order it happened.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Effect {
    Send {
        to: NodeId,
        msg: ProtocolMessage,
    },
    /// A station message to itself, already processed inside the transition.
    Loopback(ProtocolMessage),
    Note(Note),
}

#[derive(Debug, Default, Clone, PartialEq, Eq)]
pub struct Effects(pub Vec<Effect>);

impl Effects {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn send(&mut self, to: NodeId, msg: ProtocolMessage) {
        self.0.push(Effect::Send { to, msg });
    }

    pub fn note(
        &mut self,
        action: Action,
        peer: Option<NodeId>,
        message: Option<TraceMessage>,
        detail: impl Into<String>,
    ) {
        self.0.push(Effect::Note(Note { action, peer, message, detail: detail.into() }));
    }

    pub fn app_note(&mut self, action: Action, peer: Option<NodeId>, app: &AppMessage, detail: impl Into<String>) {
        self.note(action, peer, Some(TraceMessage::App(app.clone())), detail);
    }

    pub fn disregard(&mut self, peer: Option<NodeId>, msg: &ProtocolMessage, why: impl Into<String>) {
        self.note(Action::Disregard, peer, Some(TraceMessage::Proto(msg.clone())), why);
    }

    pub fn extend(&mut self, other: Effects) {
        self.0.extend(other.0);
    }

    pub fn sends(&self) -> impl Iterator<Item = (NodeId, &ProtocolMessage)> {
        self.0.iter().filter_map(|e| match e {
            Effect::Send { to, msg } => Some((*to, msg)),
            _ => None,
        })
    }

    pub fn notes(&self) -> impl Iterator<Item = &Note> {
        self.0.iter().filter_map(|e| match e {
            Effect::Note(n) => Some(n),
            _ => None,
        })
    }

    pub fn has_action(&self, action: Action) -> bool {
        self.notes().any(|n| n.action == action)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn message_id_projects_origin_and_seq() {
        let a = AppMessage::new(NodeId::mh(3), 5, "x");
        let b = AppMessage::new(NodeId::mh(3), 5, "y");
        assert_eq!(message_id(&a), MessageId { origin: NodeId::mh(3), seq: 5 });
        assert_eq!(message_id(&a), message_id(&b));
        let c = AppMessage::new(NodeId::mh(1), 1, "");
        assert_eq!((c.id().origin.index, c.id().seq), (1, 1));
    }

    #[test]
    fn barrier_merge() {
        let s = NodeId::mss;
        assert_eq!(CausalBarrier::new().merge(&CausalBarrier::new()), CausalBarrier::new());
        let a = CausalBarrier::from_pairs([(s(1), 3)]);
        let b = CausalBarrier::from_pairs([(s(1), 5)]);
        assert_eq!(a.merge(&b), b);
        let a = CausalBarrier::from_pairs([(s(1), 3), (s(2), 1)]);
        let b = CausalBarrier::from_pairs([(s(2), 4), (s(3), 2)]);
        assert_eq!(a.merge(&b), CausalBarrier::from_pairs([(s(1), 3), (s(2), 4), (s(3), 2)]));
    }

    #[test]
    fn node_id_text() {
        assert_eq!(NodeId::mh(12).to_string(), "h12");
        assert_eq!("s3".parse::<NodeId>().unwrap(), NodeId::mss(3));
        assert!("h0".parse::<NodeId>().is_err());
        assert!("x1".parse::<NodeId>().is_err());
        assert_ne!(NodeId::mh(1), NodeId::mss(1));
    }

    #[test]
    fn payload_text_forms() {
        let p = Payload::from("m1");
        assert_eq!(serde_json::to_string(&p).unwrap(), "\"m1\"");
        let q = Payload(vec![0, 255]);
        assert_eq!(serde_json::to_string(&q).unwrap(), "\"0x00ff\"");
        let r = Payload::from("0xab");
        let back: Payload = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn canonical_form_is_one_line() {
        let m = ProtocolMessage::Ready { app: AppMessage::new(NodeId::mh(2), 1, "a\nb"), origin: NodeId::mh(2) };
        let s = serde_json::to_string(&m).unwrap();
        assert!(!s.contains('\n'));
        assert!(s.starts_with("{\"type\":\"Ready\",\"app\":"));
    }
}
