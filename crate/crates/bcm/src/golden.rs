//! The worked handoff example: `h1` broadcasts `m1` under `s1`, moves to
//! `s2`, then broadcasts `m2`, which `s2` must hold back until `m1` arrives.
//!
//! `h5` broadcasts a background message `m0` in `s2`'s group first so that
//! the catch-up list handed to `h1` on arrival is not empty. Station links
//! are slow for causal traffic so that `m1`'s GlobalBcast reaches `s2` only
//! after `m2` has passed its quorum there.

use crate::checker::{CheckError, HappenedBefore};
use crate::config::{ScenarioConfig, WorkloadEvent};
use crate::types::{Action, MessageId, NodeId, ProtocolMessage, TraceEvent};

pub const H_I: NodeId = NodeId::mh(1);
pub const S_J: NodeId = NodeId::mss(1);
pub const S_K: NodeId = NodeId::mss(2);

pub const M0: MessageId = MessageId { origin: NodeId::mh(5), seq: 1 };
pub const M1: MessageId = MessageId { origin: H_I, seq: 1 };
pub const M2: MessageId = MessageId { origin: H_I, seq: 2 };

pub fn config() -> ScenarioConfig {
    let mut c = ScenarioConfig::single_group(2, 7, 1);
    for i in 5..=7 {
        c.initial_assignment.insert(NodeId::mh(i), S_K);
    }
    c.causal_latency = Some(12);
    c.handoff_latency = Some(3);
    c.workload = vec![
        WorkloadEvent::Broadcast { tick: 0, mh: NodeId::mh(5), payload: "m0".into() },
        WorkloadEvent::Broadcast { tick: 1, mh: H_I, payload: "m1".into() },
        WorkloadEvent::Handoff { tick: 5, mh: H_I, dest: S_K },
        WorkloadEvent::Broadcast { tick: 11, mh: H_I, payload: "m2".into() },
    ];
    c
}

pub struct Milestone {
    pub step: usize,
    pub what: &'static str,
    matches: fn(&TraceEvent) -> bool,
}

fn is(e: &TraceEvent, actor: NodeId, action: Action) -> bool {
    e.actor == actor && e.action == action
}

fn about(e: &TraceEvent, id: MessageId) -> bool {
    e.app().is_some_and(|a| a.id() == id)
}

fn sends(e: &TraceEvent, actor: NodeId, pred: fn(&ProtocolMessage) -> bool) -> bool {
    is(e, actor, Action::Send) && e.proto().is_some_and(pred)
}

macro_rules! milestone {
    ($step:expr, $what:expr, |$e:ident| $body:expr) => {
        Milestone { step: $step, what: $what, matches: |$e: &TraceEvent| $body }
    };
}

pub const MILESTONES: [Milestone; 37] = [
    milestone!(1, "h_i bcm-Hbroadcasts m1", |e| is(e, H_I, Action::BcmHBroadcast) && about(e, M1)),
    milestone!(2, "h_i br-broadcasts m1", |e| is(e, H_I, Action::BrBroadcast) && about(e, M1)),
    milestone!(3, "s_j br-delivers m1 after an echo quorum", |e| is(e, S_J, Action::BrDeliver) && about(e, M1)),
    milestone!(4, "s_j c-delivers m1", |e| is(e, S_J, Action::CDeliver) && about(e, M1)),
    milestone!(5, "s_j bcm-Sdelivers m1", |e| is(e, S_J, Action::BcmSDeliver) && about(e, M1)),
    milestone!(6, "s_j sends READY(m1) to its group", |e| sends(e, S_J, |m| matches!(
        m,
        ProtocolMessage::Ready { .. }
    )) && about(e, M1)),
    milestone!(7, "h_i receives READY(m1)", |e| is(e, H_I, Action::Receive)
        && matches!(e.proto(), Some(ProtocolMessage::Ready { .. }))
        && about(e, M1)),
    milestone!(8, "h_i bcm-Hdelivers m1", |e| is(e, H_I, Action::BcmHDeliver) && about(e, M1)),
    milestone!(9, "h_i sends disconnect to s_j", |e| sends(e, H_I, |m| matches!(
        m,
        ProtocolMessage::Disconnect { .. }
    ))),
    milestone!(10, "h_i clears its telepoint", |e| is(e, H_I, Action::HandoffStart)),
    milestone!(11, "h_i clears its view", |e| is(e, H_I, Action::HandoffStart)),
    milestone!(12, "h_i leaves s_j and reaches s_k", |e| is(e, H_I, Action::GroupJoin)
        && e.detail == "radio range detected"),
    milestone!(13, "s_j removes h_i from its group", |e| is(e, S_J, Action::GroupLeave) && e.peer == Some(H_I)),
    milestone!(14, "s_j sends removed to s_k", |e| sends(e, S_J, |m| matches!(m, ProtocolMessage::Removed { .. }))),
    milestone!(15, "h_i sets its telepoint to s_k", |e| is(e, H_I, Action::GroupJoin) && e.detail == "telepoint set"),
    milestone!(16, "h_i sets its view to s_k's group", |e| is(e, H_I, Action::GroupJoin)
        && e.detail == "telepoint set"),
    milestone!(17, "h_i sends requestMsg to s_k", |e| sends(e, H_I, |m| matches!(
        m,
        ProtocolMessage::RequestMsg { .. }
    ))),
    milestone!(18, "s_k adds h_i to its group", |e| is(e, S_K, Action::GroupJoin) && e.peer == Some(H_I)),
    milestone!(19, "s_k sends accept to s_j", |e| sends(e, S_K, |m| matches!(m, ProtocolMessage::Accept { .. }))),
    milestone!(20, "s_k forwards its delivered list to h_i", |e| sends(e, S_K, |m| matches!(
        m,
        ProtocolMessage::ForwardCatchup { .. }
    )) && e.peer == Some(H_I)),
    milestone!(21, "h_i bcm-Hdelivers the forwarded list", |e| is(e, H_I, Action::BcmHDeliver)
        && e.detail == "catchup"),
    milestone!(22, "h_i bcm-Hbroadcasts m2", |e| is(e, H_I, Action::BcmHBroadcast) && about(e, M2)),
    milestone!(23, "h_i br-broadcasts m2", |e| is(e, H_I, Action::BrBroadcast) && about(e, M2)),
    milestone!(24, "s_k br-delivers m2 and buffers it", |e| is(e, S_K, Action::BrDeliver)
        && about(e, M2)
        && e.detail == "buffered"),
    milestone!(25, "s_j's broadcast of m1 reaches s_k", |e| is(e, S_K, Action::Receive)
        && e.peer == Some(S_J)
        && matches!(e.proto(), Some(ProtocolMessage::GlobalBcast { .. }))
        && about(e, M1)),
    milestone!(26, "s_k c-delivers m1", |e| is(e, S_K, Action::CDeliver) && about(e, M1)),
    milestone!(27, "s_k bcm-Sdelivers m1", |e| is(e, S_K, Action::BcmSDeliver) && about(e, M1)),
    milestone!(28, "s_k forwards m1 to its group", |e| sends(e, S_K, |m| matches!(
        m,
        ProtocolMessage::ForwardGlobal { .. }
    )) && about(e, M1)),
    milestone!(29, "h_i does not deliver m1 again", |e| is(e, H_I, Action::Disregard)
        && about(e, M1)
        && e.detail == "duplicate"),
    milestone!(30, "s_k c-delivers m2 from its buffer", |e| is(e, S_K, Action::CDeliver) && about(e, M2)),
    milestone!(31, "s_k bcm-Sdelivers m2", |e| is(e, S_K, Action::BcmSDeliver) && about(e, M2)),
    milestone!(32, "s_k sends m2 to its group", |e| sends(e, S_K, |m| matches!(m, ProtocolMessage::Ready { .. }))
        && about(e, M2)),
    milestone!(33, "h_i bcm-Hdelivers m2", |e| is(e, H_I, Action::BcmHDeliver) && about(e, M2)),
    milestone!(34, "s_k bcm-Sbroadcasts m2", |e| is(e, S_K, Action::BcmSBroadcast) && about(e, M2)),
    milestone!(35, "s_k c-broadcasts m2", |e| is(e, S_K, Action::CBroadcast) && about(e, M2)),
    milestone!(36, "s_j c-delivers m2", |e| is(e, S_J, Action::CDeliver) && about(e, M2)),
    milestone!(37, "s_j bcm-Sdelivers m2", |e| is(e, S_J, Action::BcmSDeliver) && about(e, M2)),
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MilestoneError {
    #[error("step {step} ({what}) never happens")]
    Missing { step: usize, what: &'static str },
    #[error("step {later} happens before step {earlier}")]
    OutOfOrder { earlier: usize, later: usize },
    #[error(transparent)]
    Trace(#[from] CheckError),
}

/// Locates every milestone and checks that no milestone happens before one
/// listed earlier. Returns the trace index of each milestone.
pub fn check_milestones(trace: &[TraceEvent], config: &ScenarioConfig) -> Result<Vec<usize>, MilestoneError> {
    let hb = HappenedBefore::build(trace, config)?;
    let mut at = Vec::with_capacity(MILESTONES.len());
    for m in &MILESTONES {
        let i =
            trace.iter().position(|e| (m.matches)(e)).ok_or(MilestoneError::Missing { step: m.step, what: m.what })?;
        at.push(i);
    }
    for (a, &ia) in at.iter().enumerate() {
        for (b, &ib) in at.iter().enumerate().skip(a + 1) {
            if hb.precedes(ib, ia) {
                return Err(MilestoneError::OutOfOrder { earlier: MILESTONES[a].step, later: MILESTONES[b].step });
            }
        }
    }
    Ok(at)
}
