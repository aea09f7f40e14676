//! Byzantine behaviors layered over an honest host.
//!
//! Every strategy drives the host's own [`MhState`] and only ever emits
//! messages under the host's identity; relayed content is never altered.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::mh::{MhError, MhInput, MhState};
use crate::types::{Action, AppMessage, Effect, Effects, NodeId, Payload, ProtocolMessage};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Injection {
    pub tick: u64,
    pub seq: u64,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum AdversaryStrategy {
    /// Follows the protocol.
    Conforming,
    Crash {
        at_tick: u64,
    },
    /// Never echoes and never delivers; still performs handoffs.
    Silent,
    /// Each broadcast sends `payload` `times` times under one seq.
    DuplicateBroadcast {
        payload: Payload,
        times: u32,
    },
    /// Each broadcast sends `payload_a` to `side_a` and `payload_b` to the
    /// rest of the view; the station gets `payload_b` if `mss_gets_b`.
    Equivocate {
        payload_a: Payload,
        payload_b: Payload,
        side_a: BTreeSet<NodeId>,
        mss_gets_b: bool,
    },
    RefuseEcho,
    /// Well-formed INITs with chosen seq and payload at chosen ticks.
    ArbitraryInject {
        schedule: Vec<Injection>,
    },
    /// Reorders its own deliveries pairwise.
    CausalViolator,
}

impl AdversaryStrategy {
    pub fn name(&self) -> &'static str {
        match self {
            AdversaryStrategy::Conforming => "conforming",
            AdversaryStrategy::Crash { .. } => "crash",
            AdversaryStrategy::Silent => "silent",
            AdversaryStrategy::DuplicateBroadcast { .. } => "duplicate_broadcast",
            AdversaryStrategy::Equivocate { .. } => "equivocate",
            AdversaryStrategy::RefuseEcho => "refuse_echo",
            AdversaryStrategy::ArbitraryInject { .. } => "arbitrary_inject",
            AdversaryStrategy::CausalViolator => "causal_violator",
        }
    }
}

/// A strategy bound to one host, with whatever private state it needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adversary {
    pub strategy: AdversaryStrategy,
    held: Option<Effect>,
}

pub fn wrap(strategy: AdversaryStrategy) -> Adversary {
    Adversary { strategy, held: None }
}

impl Adversary {
    /// Ticks at which the host must be woken, with the schedule index.
    pub fn wake_ticks(&self) -> Vec<(u64, usize)> {
        match &self.strategy {
            AdversaryStrategy::ArbitraryInject { schedule } => {
                schedule.iter().enumerate().map(|(i, inj)| (inj.tick, i)).collect()
            }
            _ => Vec::new(),
        }
    }

    pub fn step(&mut self, host: &mut MhState, now: u64, input: MhInput) -> Result<Effects, MhError> {
        use AdversaryStrategy::*;
        match &self.strategy {
            Conforming => host.apply(input),
            Crash { at_tick } => {
                if now >= *at_tick {
                    Ok(Effects::new())
                } else {
                    host.apply(input)
                }
            }
            Silent => match input {
                MhInput::Broadcast(_) | MhInput::Receive { .. } | MhInput::Wake(_) => Ok(Effects::new()),
                other => host.apply(other),
            },
            DuplicateBroadcast { payload, times } => match input {
                MhInput::Broadcast(_) => {
                    let mut fx = Effects::new();
                    for _ in 0..(*times).max(1) {
                        fx.extend(host.bcm_hbroadcast(payload.clone())?);
                    }
                    Ok(fx)
                }
                other => host.apply(other),
            },
            Equivocate { payload_a, payload_b, side_a, mss_gets_b } => match input {
                MhInput::Broadcast(_) => {
                    let station = host.telepoint.ok_or(MhError::InTransit)?;
                    host.seq += 1;
                    let a = AppMessage { origin: host.id, seq: host.seq, payload: payload_a.clone() };
                    let b = AppMessage { origin: host.id, seq: host.seq, payload: payload_b.clone() };
                    host.last_bcast = Some(a.clone());
                    let mut fx = Effects::new();
                    fx.app_note(Action::BcmHBroadcast, None, &a, "equivocate");
                    for &h in host.view.iter().flatten() {
                        if h == host.id {
                            continue;
                        }
                        let app = if side_a.contains(&h) { a.clone() } else { b.clone() };
                        fx.send(h, ProtocolMessage::Init { app });
                    }
                    let app = if *mss_gets_b { b } else { a };
                    fx.send(station, ProtocolMessage::Init { app });
                    Ok(fx)
                }
                other => host.apply(other),
            },
            RefuseEcho => {
                let mut fx = host.apply(input)?;
                fx.0.retain(|e| !matches!(e, Effect::Send { msg: ProtocolMessage::Echo { .. }, .. }));
                Ok(fx)
            }
            ArbitraryInject { schedule } => match input {
                MhInput::Wake(i) => {
                    let mut fx = Effects::new();
                    let (Some(inj), Some(station)) = (schedule.get(i), host.telepoint) else {
                        return Ok(fx);
                    };
                    let app = AppMessage { origin: host.id, seq: inj.seq, payload: inj.payload.clone() };
                    fx.app_note(Action::BcmHBroadcast, None, &app, "inject");
                    let msg = ProtocolMessage::Init { app };
                    for &h in host.view.iter().flatten() {
                        fx.send(h, msg.clone());
                    }
                    fx.send(station, msg);
                    Ok(fx)
                }
                other => host.apply(other),
            },
            CausalViolator => {
                let fx = host.apply(input)?;
                let mut out = Effects::new();
                for e in fx.0 {
                    let is_delivery = matches!(&e, Effect::Note(n) if n.action == Action::BcmHDeliver);
                    if !is_delivery {
                        out.0.push(e);
                    } else if let Some(prev) = self.held.take() {
                        out.0.push(e);
                        out.0.push(prev);
                    } else {
                        self.held = Some(e);
                    }
                }
                Ok(out)
            }
        }
    }
}
