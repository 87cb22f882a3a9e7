//! Per-round grouping and quorum latency.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use super::Dataset;
use crate::topology::NodeId;

/// Every received reply of one sender's round.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RoundRecord {
    pub sender: NodeId,
    pub round: u64,
    pub replies: BTreeMap<NodeId, i64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InsufficientReplies {
    pub have: usize,
    pub need: usize,
}

/// Rounds sent by `sender`, restricted to replies from `node_set`. Rounds
/// with no reply from the set leave no trace in the observations and are
/// therefore absent.
pub fn rounds(ds: &Dataset, sender: NodeId, node_set: &[NodeId]) -> Vec<RoundRecord> {
    let members: BTreeSet<NodeId> = node_set.iter().copied().collect();
    let mut by_round: BTreeMap<u64, BTreeMap<NodeId, i64>> = BTreeMap::new();
    for o in &ds.observations {
        if o.sender == sender && members.contains(&o.receiver) {
            by_round.entry(o.round).or_default().insert(o.receiver, o.rtt_us);
        }
    }
    by_round
        .into_iter()
        .map(|(round, replies)| RoundRecord { sender, round, replies })
        .collect()
}

/// The k-th smallest reply latency: how long the sender waits for a quorum
/// of `k` replies. The sender's own self-loop reply counts like any other.
pub fn quorum_latency(rr: &RoundRecord, k: usize) -> Result<i64, InsufficientReplies> {
    assert!(k >= 1, "quorum size must be at least 1");
    if rr.replies.len() < k {
        return Err(InsufficientReplies { have: rr.replies.len(), need: k });
    }
    let mut v: Vec<i64> = rr.replies.values().copied().collect();
    let (_, kth, _) = v.select_nth_unstable(k - 1);
    Ok(*kth)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct QuorumSeries {
    pub k: usize,
    /// Quorum latency per qualifying round, aligned with `rounds`.
    pub samples: Vec<i64>,
    pub rounds: Vec<u64>,
    /// Rounds that had fewer than `k` replies.
    pub insufficient: usize,
}

impl QuorumSeries {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,quorum_rtt_us\n");
        for (r, v) in self.rounds.iter().zip(&self.samples) {
            out.push_str(&format!("{r},{v}\n"));
        }
        out
    }
}

pub fn quorum_series_from(rounds: &[RoundRecord], k: usize) -> QuorumSeries {
    let mut out = QuorumSeries {
        k,
        samples: Vec::with_capacity(rounds.len()),
        rounds: Vec::with_capacity(rounds.len()),
        insufficient: 0,
    };
    for rr in rounds {
        match quorum_latency(rr, k) {
            Ok(v) => {
                out.samples.push(v);
                out.rounds.push(rr.round);
            }
            Err(_) => out.insufficient += 1,
        }
    }
    out
}

pub fn quorum_series(ds: &Dataset, sender: NodeId, node_set: &[NodeId], k: usize) -> QuorumSeries {
    quorum_series_from(&rounds(ds, sender, node_set), k)
}
