//! Per-node probing state: round fan-out, the pending table that matches
//! echoes to probes, and the counters behind the conservation identity
//!
//! `probes_sent = observations + losses + late_echoes + pending`.

use std::collections::{HashMap, HashSet};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use thiserror::Error;

use crate::node::recorder::{LossRecord, Observation};
use crate::topology::NodeId;
use crate::wire::{make_echo, EchoMessage, ProbeMessage};

/// Microseconds since the Unix epoch.
pub fn wall_now_us() -> i64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_micros() as i64)
        .unwrap_or(0)
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ProbeError {
    #[error("echo for node {origin} arrived at node {me}")]
    ForeignEcho { origin: NodeId, me: NodeId },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingEntry {
    pub receiver: NodeId,
    pub round: u64,
    pub send_mono: Instant,
    pub send_wall_ts_us: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EchoOutcome {
    Matched(Observation),
    /// The probe had already expired; counted, not recorded.
    Late,
    /// Duplicate or unknown round.
    NoMatch,
}

#[derive(Debug, Default)]
pub struct Counters {
    pub rounds_sent: AtomicU64,
    pub probes_sent: AtomicU64,
    pub observations: AtomicU64,
    pub expired: AtomicU64,
    pub late_echoes: AtomicU64,
    pub unmatched_echoes: AtomicU64,
    pub echoes_sent: AtomicU64,
    pub write_failures: AtomicU64,
}

#[derive(Default)]
struct PendingState {
    entries: HashMap<(NodeId, u64), PendingEntry>,
    expired: HashSet<(NodeId, u64)>,
}

pub struct ProbeCore {
    self_id: NodeId,
    peers: Vec<NodeId>,
    payload: Vec<u8>,
    pending: Mutex<PendingState>,
    last_round: Mutex<Option<u64>>,
    pub counters: Counters,
}

impl ProbeCore {
    /// `peers` is every node in the cluster, this one included.
    pub fn new(self_id: NodeId, peers: Vec<NodeId>, payload_bytes: usize) -> Self {
        // Non-constant filler so payload corruption would be visible.
        let payload = (0..payload_bytes).map(|i| (i % 251) as u8).collect();
        Self {
            self_id,
            peers,
            payload,
            pending: Mutex::new(PendingState::default()),
            last_round: Mutex::new(None),
            counters: Counters::default(),
        }
    }

    pub fn self_id(&self) -> NodeId {
        self.self_id
    }

    pub fn peers(&self) -> &[NodeId] {
        &self.peers
    }

    pub fn payload(&self) -> &[u8] {
        &self.payload
    }

    /// Builds one probe per node for `round` and registers the pending
    /// entries. Rounds must strictly increase.
    pub fn sender_tick(&self, round: u64, now_mono: Instant, now_wall: i64) -> Vec<(ProbeMessage, PendingEntry)> {
        {
            let mut last = self.last_round.lock().unwrap();
            assert!(
                last.is_none_or(|l| round > l),
                "round {round} does not advance past {last:?}"
            );
            *last = Some(round);
        }
        let out: Vec<_> = self
            .peers
            .iter()
            .map(|&receiver| {
                (
                    ProbeMessage {
                        sender: self.self_id,
                        round,
                        payload: self.payload.clone(),
                    },
                    PendingEntry {
                        receiver,
                        round,
                        send_mono: now_mono,
                        send_wall_ts_us: now_wall,
                    },
                )
            })
            .collect();
        self.register(out.iter().map(|(_, e)| *e));
        self.counters.rounds_sent.fetch_add(1, Ordering::AcqRel);
        out
    }

    /// Registers pending entries without building messages; the runtime uses
    /// this with a single pre-encoded frame per round.
    pub fn register(&self, entries: impl IntoIterator<Item = PendingEntry>) {
        let mut p = self.pending.lock().unwrap();
        let mut n = 0;
        for e in entries {
            p.entries.insert((e.receiver, e.round), e);
            n += 1;
        }
        self.counters.probes_sent.fetch_add(n, Ordering::AcqRel);
    }

    pub fn begin_round(&self, round: u64) {
        let mut last = self.last_round.lock().unwrap();
        assert!(last.is_none_or(|l| round > l), "round {round} does not advance");
        *last = Some(round);
        self.counters.rounds_sent.fetch_add(1, Ordering::AcqRel);
    }

    pub fn handle_probe(&self, probe: &ProbeMessage) -> EchoMessage {
        self.counters.echoes_sent.fetch_add(1, Ordering::Relaxed);
        make_echo(probe, self.self_id)
    }

    pub fn handle_echo(&self, echo: &EchoMessage, now_mono: Instant) -> Result<EchoOutcome, ProbeError> {
        self.match_echo(echo.origin_sender, echo.responder, echo.round, now_mono)
    }

    /// `handle_echo` on header fields alone, so the receive path can skip
    /// copying the payload.
    pub fn match_echo(
        &self,
        origin: NodeId,
        responder: NodeId,
        round: u64,
        now_mono: Instant,
    ) -> Result<EchoOutcome, ProbeError> {
        if origin != self.self_id {
            return Err(ProbeError::ForeignEcho { origin, me: self.self_id });
        }
        let key = (responder, round);
        let mut p = self.pending.lock().unwrap();
        if let Some(entry) = p.entries.remove(&key) {
            drop(p);
            let rtt = now_mono.saturating_duration_since(entry.send_mono);
            self.counters.observations.fetch_add(1, Ordering::AcqRel);
            return Ok(EchoOutcome::Matched(Observation {
                sender: self.self_id,
                receiver: responder,
                round,
                send_wall_ts_us: entry.send_wall_ts_us,
                rtt_us: rtt.as_micros() as i64,
            }));
        }
        if p.expired.remove(&key) {
            self.counters.late_echoes.fetch_add(1, Ordering::AcqRel);
            Ok(EchoOutcome::Late)
        } else {
            self.counters.unmatched_echoes.fetch_add(1, Ordering::AcqRel);
            Ok(EchoOutcome::NoMatch)
        }
    }

    /// Removes every entry at least `expiry` old.
    pub fn expire_pending(&self, now_mono: Instant, expiry: Duration) -> Vec<LossRecord> {
        self.expire_where(|e| now_mono.saturating_duration_since(e.send_mono) >= expiry)
    }

    /// Expires everything still pending; used at shutdown.
    pub fn expire_all(&self) -> Vec<LossRecord> {
        self.expire_where(|_| true)
    }

    fn expire_where(&self, pred: impl Fn(&PendingEntry) -> bool) -> Vec<LossRecord> {
        let wall = wall_now_us();
        let mut p = self.pending.lock().unwrap();
        let keys: Vec<_> = p
            .entries
            .iter()
            .filter(|(_, e)| pred(e))
            .map(|(k, _)| *k)
            .collect();
        let mut out = Vec::with_capacity(keys.len());
        for k in keys {
            p.entries.remove(&k);
            p.expired.insert(k);
            out.push(LossRecord {
                receiver: k.0,
                round: k.1,
                expired_at_wall_us: wall,
            });
        }
        drop(p);
        out.sort_by_key(|l| (l.round, l.receiver));
        self.counters.expired.fetch_add(out.len() as u64, Ordering::AcqRel);
        out
    }

    pub fn pending_len(&self) -> usize {
        self.pending.lock().unwrap().entries.len()
    }

    /// Expired probes whose echo never showed up.
    pub fn losses(&self) -> u64 {
        self.counters.expired.load(Ordering::Acquire) - self.counters.late_echoes.load(Ordering::Acquire)
    }

    /// Left side minus right side of the conservation identity. Zero when
    /// every probe is accounted for.
    pub fn conservation_gap(&self) -> i64 {
        let c = &self.counters;
        let sent = c.probes_sent.load(Ordering::Acquire) as i64;
        sent - c.observations.load(Ordering::Acquire) as i64
            - self.losses() as i64
            - c.late_echoes.load(Ordering::Acquire) as i64
            - self.pending_len() as i64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn core(n: u32) -> ProbeCore {
        ProbeCore::new(NodeId(1), (1..=n).map(NodeId).collect(), 16)
    }

    fn echo_for(round: u64, responder: u32) -> EchoMessage {
        EchoMessage {
            responder: NodeId(responder),
            origin_sender: NodeId(1),
            round,
            payload: vec![],
        }
    }

    #[test]
    fn tick_fans_out_to_every_node() {
        let c = core(8);
        let t = Instant::now();
        let out = c.sender_tick(42, t, 1000);
        assert_eq!(out.len(), 8);
        assert!(out.iter().all(|(p, _)| p.round == 42 && p.sender == NodeId(1)));
        let receivers: HashSet<_> = out.iter().map(|(_, e)| e.receiver).collect();
        assert_eq!(receivers.len(), 8);
        assert_eq!(c.pending_len(), 8);
    }

    #[test]
    #[should_panic]
    fn rounds_cannot_repeat() {
        let c = core(2);
        let t = Instant::now();
        c.sender_tick(5, t, 0);
        c.sender_tick(5, t, 0);
    }

    #[test]
    fn echo_yields_clock_difference() {
        let c = core(2);
        let t0 = Instant::now();
        c.sender_tick(0, t0, 77);
        match c.handle_echo(&echo_for(0, 2), t0 + Duration::from_micros(500)).unwrap() {
            EchoOutcome::Matched(o) => {
                assert_eq!(o.rtt_us, 500);
                assert_eq!(o.receiver, NodeId(2));
                assert_eq!(o.send_wall_ts_us, 77);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn late_and_duplicate_echoes() {
        let c = core(2);
        let t0 = Instant::now();
        c.sender_tick(0, t0, 0);
        let later = t0 + Duration::from_secs(10);
        assert!(matches!(c.handle_echo(&echo_for(0, 1), t0).unwrap(), EchoOutcome::Matched(_)));
        assert_eq!(c.handle_echo(&echo_for(0, 1), t0).unwrap(), EchoOutcome::NoMatch);
        let lost = c.expire_pending(later, Duration::from_secs(5));
        assert_eq!(lost.len(), 1);
        assert_eq!(c.losses(), 1);
        assert_eq!(c.handle_echo(&echo_for(0, 2), later).unwrap(), EchoOutcome::Late);
        assert_eq!(c.counters.late_echoes.load(Ordering::Relaxed), 1);
        assert_eq!(c.losses(), 0);
        assert_eq!(c.conservation_gap(), 0);
    }

    #[test]
    fn foreign_echo_is_an_error() {
        let c = core(2);
        let mut e = echo_for(0, 2);
        e.origin_sender = NodeId(9);
        assert!(matches!(c.handle_echo(&e, Instant::now()), Err(ProbeError::ForeignEcho { .. })));
    }

    #[test]
    fn expiry_boundaries() {
        let c = core(1);
        let t0 = Instant::now();
        let exp = Duration::from_secs(120);
        assert!(c.expire_pending(t0, exp).is_empty());
        c.sender_tick(0, t0, 0);
        assert!(c.expire_pending(t0 + exp - Duration::from_micros(1), exp).is_empty());
        assert_eq!(c.pending_len(), 1);
        let lost = c.expire_pending(t0 + exp * 2, exp);
        assert_eq!(lost.len(), 1);
        assert_eq!(lost[0].receiver, NodeId(1));
        assert_eq!(c.pending_len(), 0);
    }

    #[test]
    fn handle_probe_echoes_payload() {
        let c = core(3);
        let p = ProbeMessage { sender: NodeId(3), round: 7, payload: b"xyz".to_vec() };
        let e = c.handle_probe(&p);
        assert_eq!((e.responder, e.origin_sender, e.round), (NodeId(1), NodeId(3), 7));
        assert_eq!(e.payload, p.payload);
    }
}
