//! Experiment definition: nodes, topology labels, pair classes and workload
//! arithmetic.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Default seconds between buffer flushes when a config omits the key.
pub const DEFAULT_FLUSH_INTERVAL_S: f64 = 30.0;
/// Default seconds before an unanswered probe is counted as lost.
pub const DEFAULT_PENDING_EXPIRY_S: f64 = 120.0;

/// Largest payload the wire framing can carry.
pub const MAX_PAYLOAD_BYTES: u64 = u32::MAX as u64 - crate::wire::HEADER_LEN as u64;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("malformed config: {0}")]
    Malformed(String),
    #[error("invalid config field `{field}`: {reason}")]
    Invalid { field: String, reason: String },
}

impl ConfigError {
    fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        ConfigError::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub u32);

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.fmt(f)
    }
}

impl FromStr for NodeId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.trim().parse().map(NodeId)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TopologyLabel {
    pub cloud: String,
    pub region: String,
    pub az: String,
    pub subnet: String,
}

impl TopologyLabel {
    pub fn new(cloud: &str, region: &str, az: &str, subnet: &str) -> Self {
        Self {
            cloud: cloud.to_string(),
            region: region.to_string(),
            az: az.to_string(),
            subnet: subnet.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeSpec {
    pub id: NodeId,
    /// Display name such as "1.3".
    pub alias: String,
    pub data_address: String,
    pub control_address: String,
    pub label: TopologyLabel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterConfig {
    pub nodes: Vec<NodeSpec>,
    pub round_rate_hz: f64,
    pub payload_bytes: u32,
    /// 0 keeps every observation in memory until shutdown.
    pub flush_interval_s: f64,
    pub pending_expiry_s: f64,
    pub duration_s: f64,
}

/// Topological relationship of the two ends of an observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairClass {
    SameSubnet,
    CrossSubnet,
    #[serde(rename = "cross-az")]
    CrossAZ,
    CrossRegion,
    #[serde(rename = "self")]
    SelfLoop,
}

impl PairClass {
    /// Report order: the four network groups, then talking to self.
    pub const ALL: [PairClass; 5] = [
        PairClass::SameSubnet,
        PairClass::CrossSubnet,
        PairClass::CrossAZ,
        PairClass::CrossRegion,
        PairClass::SelfLoop,
    ];

    pub fn slug(self) -> &'static str {
        match self {
            PairClass::SameSubnet => "same-subnet",
            PairClass::CrossSubnet => "cross-subnet",
            PairClass::CrossAZ => "cross-az",
            PairClass::CrossRegion => "cross-region",
            PairClass::SelfLoop => "self",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            PairClass::SameSubnet => "Same Subnet",
            PairClass::CrossSubnet => "Cross Subnet",
            PairClass::CrossAZ => "Cross AZ",
            PairClass::CrossRegion => "Cross Region",
            PairClass::SelfLoop => "Self",
        }
    }
}

impl fmt::Display for PairClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for PairClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace([' ', '_'], "-");
        match norm.as_str() {
            "same-subnet" => Ok(PairClass::SameSubnet),
            "cross-subnet" => Ok(PairClass::CrossSubnet),
            "cross-az" => Ok(PairClass::CrossAZ),
            "cross-region" => Ok(PairClass::CrossRegion),
            "self" | "self-loop" | "selfloop" => Ok(PairClass::SelfLoop),
            _ => Err(format!("unknown pair class `{s}`")),
        }
    }
}

// On-disk representation. Kept separate so that validation happens in one
// place and the in-memory types never hold unchecked values.

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawNode {
    id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alias: Option<String>,
    data_address: String,
    control_address: String,
    cloud: String,
    region: String,
    az: String,
    subnet: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    nodes: Vec<RawNode>,
    round_rate_hz: f64,
    payload_bytes: u64,
    #[serde(default = "default_flush")]
    flush_interval_s: f64,
    #[serde(default = "default_expiry")]
    pending_expiry_s: f64,
    duration_s: f64,
}

fn default_flush() -> f64 {
    DEFAULT_FLUSH_INTERVAL_S
}

fn default_expiry() -> f64 {
    DEFAULT_PENDING_EXPIRY_S
}

fn check_address(field: &str, addr: &str) -> Result<(), ConfigError> {
    let (host, port) = addr
        .rsplit_once(':')
        .ok_or_else(|| ConfigError::invalid(field, format!("`{addr}` is not host:port")))?;
    if host.is_empty() {
        return Err(ConfigError::invalid(field, format!("`{addr}` has no host")));
    }
    port.parse::<u16>()
        .map_err(|_| ConfigError::invalid(field, format!("`{addr}` has no valid port")))?;
    Ok(())
}

/// Parses and validates a JSON config document.
pub fn parse_config(text: &str) -> Result<ClusterConfig, ConfigError> {
    let raw: RawConfig =
        serde_json::from_str(text).map_err(|e| ConfigError::Malformed(e.to_string()))?;
    ClusterConfig::from_raw(raw)
}

impl ClusterConfig {
    fn from_raw(raw: RawConfig) -> Result<Self, ConfigError> {
        if raw.nodes.is_empty() {
            return Err(ConfigError::invalid("nodes", "at least one node is required"));
        }
        let mut seen = HashSet::new();
        let mut nodes = Vec::with_capacity(raw.nodes.len());
        for (i, n) in raw.nodes.into_iter().enumerate() {
            if !seen.insert(n.id) {
                return Err(ConfigError::invalid(
                    format!("nodes[{i}].id"),
                    format!("duplicate node id {}", n.id),
                ));
            }
            for (name, value) in [
                ("cloud", &n.cloud),
                ("region", &n.region),
                ("az", &n.az),
                ("subnet", &n.subnet),
            ] {
                if value.trim().is_empty() {
                    return Err(ConfigError::invalid(
                        format!("nodes[{i}].{name}"),
                        "must be non-empty",
                    ));
                }
            }
            check_address(&format!("nodes[{i}].data_address"), &n.data_address)?;
            check_address(&format!("nodes[{i}].control_address"), &n.control_address)?;
            if n.data_address == n.control_address {
                return Err(ConfigError::invalid(
                    format!("nodes[{i}].control_address"),
                    "must differ from data_address",
                ));
            }
            nodes.push(NodeSpec {
                id: NodeId(n.id),
                alias: n.alias.unwrap_or_else(|| n.id.to_string()),
                data_address: n.data_address,
                control_address: n.control_address,
                label: TopologyLabel {
                    cloud: n.cloud,
                    region: n.region,
                    az: n.az,
                    subnet: n.subnet,
                },
            });
        }
        let cfg = ClusterConfig {
            nodes,
            round_rate_hz: raw.round_rate_hz,
            payload_bytes: u32::try_from(raw.payload_bytes)
                .ok()
                .filter(|&p| (p as u64) <= MAX_PAYLOAD_BYTES)
                .ok_or_else(|| ConfigError::invalid("payload_bytes", "exceeds frame limit"))?,
            flush_interval_s: raw.flush_interval_s,
            pending_expiry_s: raw.pending_expiry_s,
            duration_s: raw.duration_s,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the numeric invariants. Node-level checks happen at parse time.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.round_rate_hz.is_finite() && self.round_rate_hz > 0.0) {
            return Err(ConfigError::invalid("round_rate_hz", "must be positive"));
        }
        if !(self.flush_interval_s.is_finite() && self.flush_interval_s >= 0.0) {
            return Err(ConfigError::invalid("flush_interval_s", "must be >= 0"));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            return Err(ConfigError::invalid("duration_s", "must be positive"));
        }
        let min_expiry = 10.0 / self.round_rate_hz;
        if !(self.pending_expiry_s.is_finite() && self.pending_expiry_s > min_expiry) {
            return Err(ConfigError::invalid(
                "pending_expiry_s",
                format!("must exceed 10 round intervals ({min_expiry} s)"),
            ));
        }
        Ok(())
    }

    fn to_raw(&self) -> RawConfig {
        RawConfig {
            nodes: self
                .nodes
                .iter()
                .map(|n| RawNode {
                    id: n.id.0,
                    alias: Some(n.alias.clone()),
                    data_address: n.data_address.clone(),
                    control_address: n.control_address.clone(),
                    cloud: n.label.cloud.clone(),
                    region: n.label.region.clone(),
                    az: n.label.az.clone(),
                    subnet: n.label.subnet.clone(),
                })
                .collect(),
            round_rate_hz: self.round_rate_hz,
            payload_bytes: self.payload_bytes as u64,
            flush_interval_s: self.flush_interval_s,
            pending_expiry_s: self.pending_expiry_s,
            duration_s: self.duration_s,
        }
    }

    /// Compact single-line JSON, the form sent over the control channel.
    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_raw()).expect("config serializes")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_raw()).expect("config serializes")
    }

    /// SHA-256 over the canonical compact JSON, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.id == id)
    }

    pub fn node_ids(&self) -> Vec<NodeId> {
        self.nodes.iter().map(|n| n.id).collect()
    }

    pub fn node_by_alias(&self, alias: &str) -> Option<&NodeSpec> {
        self.nodes.iter().find(|n| n.alias == alias)
    }

    /// Resolves either a numeric id or an alias.
    pub fn resolve(&self, name: &str) -> Option<NodeId> {
        self.node_by_alias(name)
            .map(|n| n.id)
            .or_else(|| name.parse().ok().filter(|id| self.node(*id).is_some()))
    }

    pub fn classify(&self, a: NodeId, b: NodeId) -> Option<PairClass> {
        let la = &self.node(a)?.label;
        let lb = &self.node(b)?.label;
        Some(classify_pair(la, lb, a == b))
    }

    pub fn round_interval(&self) -> std::time::Duration {
        std::time::Duration::from_secs_f64(1.0 / self.round_rate_hz)
    }
}

pub fn classify_pair(a: &TopologyLabel, b: &TopologyLabel, same_node: bool) -> PairClass {
    if same_node {
        PairClass::SelfLoop
    } else if a == b {
        PairClass::SameSubnet
    } else if a.cloud == b.cloud && a.region == b.region && a.az == b.az {
        PairClass::CrossSubnet
    } else if a.cloud == b.cloud && a.region == b.region {
        PairClass::CrossAZ
    } else {
        PairClass::CrossRegion
    }
}

/// Payload bytes per second leaving (and, symmetrically, entering) one node.
///
/// Each node sends its own probe to every node including itself and echoes
/// every node's probe back, hence the factor of two. Framing is excluded.
pub fn estimate_traffic(cfg: &ClusterConfig) -> f64 {
    cfg.round_rate_hz * cfg.payload_bytes as f64 * cfg.nodes.len() as f64 * 2.0
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuorumGroup {
    pub label: String,
    pub nodes: Vec<NodeId>,
}

/// Candidate three-node quorums: every 3-subset of each subnet, plus one
/// cross-AZ triple per region spanning at least three AZs.
pub fn quorum_groups(cfg: &ClusterConfig) -> Vec<QuorumGroup> {
    let mut groups = Vec::new();

    // Keyed by first appearance so output follows config order.
    let mut subnets: Vec<(&TopologyLabel, Vec<NodeId>)> = Vec::new();
    for n in &cfg.nodes {
        match subnets.iter_mut().find(|(l, _)| *l == &n.label) {
            Some((_, ids)) => ids.push(n.id),
            None => subnets.push((&n.label, vec![n.id])),
        }
    }
    for (label, ids) in &subnets {
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                for k in j + 1..ids.len() {
                    groups.push(QuorumGroup {
                        label: format!(
                            "same-subnet:{}/{}/{}/{}",
                            label.cloud, label.region, label.az, label.subnet
                        ),
                        nodes: vec![ids[i], ids[j], ids[k]],
                    });
                }
            }
        }
    }

    let mut regions: Vec<((&str, &str), Vec<(&str, NodeId)>)> = Vec::new();
    for n in &cfg.nodes {
        let key = (n.label.cloud.as_str(), n.label.region.as_str());
        let idx = match regions.iter().position(|(k, _)| *k == key) {
            Some(i) => i,
            None => {
                regions.push((key, Vec::new()));
                regions.len() - 1
            }
        };
        let azs = &mut regions[idx].1;
        if !azs.iter().any(|(az, _)| *az == n.label.az) {
            azs.push((n.label.az.as_str(), n.id));
        }
    }
    for ((cloud, region), azs) in &regions {
        if azs.len() >= 3 {
            groups.push(QuorumGroup {
                label: format!("cross-az:{cloud}/{region}"),
                nodes: azs.iter().take(3).map(|(_, id)| *id).collect(),
            });
        }
    }
    groups
}

/// Nodes per label, useful for printing a topology overview.
pub fn nodes_by_subnet(cfg: &ClusterConfig) -> BTreeMap<String, Vec<String>> {
    let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for n in &cfg.nodes {
        let l = &n.label;
        out.entry(format!("{}/{}/{}/{}", l.cloud, l.region, l.az, l.subnet))
            .or_default()
            .push(n.alias.clone());
    }
    out
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Eight nodes: four in AZ1 of East1 over two subnets, one each in AZ2
    /// and AZ3, one in East2 and one in West.
    pub(crate) const EIGHT_NODE_LAYOUT: &str = r#"{
        "nodes": [
            {"id": 11, "alias": "1.1", "data_address": "10.0.1.11:7000", "control_address": "10.0.1.11:7001", "cloud": "aws", "region": "east1", "az": "az1", "subnet": "s1"},
            {"id": 12, "alias": "1.2", "data_address": "10.0.1.12:7000", "control_address": "10.0.1.12:7001", "cloud": "aws", "region": "east1", "az": "az1", "subnet": "s1"},
            {"id": 13, "alias": "1.3", "data_address": "10.0.1.13:7000", "control_address": "10.0.1.13:7001", "cloud": "aws", "region": "east1", "az": "az1", "subnet": "s1"},
            {"id": 14, "alias": "1.4", "data_address": "10.0.2.14:7000", "control_address": "10.0.2.14:7001", "cloud": "aws", "region": "east1", "az": "az1", "subnet": "s2"},
            {"id": 15, "alias": "1.5", "data_address": "10.0.3.15:7000", "control_address": "10.0.3.15:7001", "cloud": "aws", "region": "east1", "az": "az2", "subnet": "s3"},
            {"id": 16, "alias": "1.6", "data_address": "10.0.4.16:7000", "control_address": "10.0.4.16:7001", "cloud": "aws", "region": "east1", "az": "az3", "subnet": "s4"},
            {"id": 21, "alias": "2.1", "data_address": "10.1.1.21:7000", "control_address": "10.1.1.21:7001", "cloud": "aws", "region": "east2", "az": "az1", "subnet": "s1"},
            {"id": 31, "alias": "3.1", "data_address": "10.2.1.31:7000", "control_address": "10.2.1.31:7001", "cloud": "aws", "region": "west", "az": "az1", "subnet": "s1"}
        ],
        "round_rate_hz": 100,
        "payload_bytes": 1024,
        "flush_interval_s": 30,
        "pending_expiry_s": 120,
        "duration_s": 21600
    }"#;

    pub(crate) fn eight_node_config() -> ClusterConfig {
        parse_config(EIGHT_NODE_LAYOUT).unwrap()
    }

    fn single_node(rate: f64, payload: u64) -> String {
        format!(
            r#"{{"nodes": [{{"id": 1, "data_address": "127.0.0.1:9000", "control_address": "127.0.0.1:9001",
                "cloud": "c", "region": "r", "az": "a", "subnet": "s"}}],
                "round_rate_hz": {rate}, "payload_bytes": {payload}, "flush_interval_s": 0,
                "pending_expiry_s": 20, "duration_s": 3}}"#
        )
    }

    #[test]
    fn parses_single_node() {
        let cfg = parse_config(&single_node(1.0, 0)).unwrap();
        assert_eq!(cfg.nodes.len(), 1);
        assert_eq!(cfg.nodes[0].alias, "1");
        assert_eq!(cfg.classify(NodeId(1), NodeId(1)), Some(PairClass::SelfLoop));
        assert!(quorum_groups(&cfg).is_empty());
    }

    #[test]
    fn parses_eight_node_layout() {
        let cfg = eight_node_config();
        assert_eq!(cfg.nodes.len(), 8);
        let east1: Vec<_> = cfg.nodes.iter().filter(|n| n.label.region == "east1").collect();
        assert_eq!(east1.len(), 6);
        let azs: HashSet<_> = east1.iter().map(|n| n.label.az.as_str()).collect();
        assert_eq!(azs.len(), 3);
        let az1_subnets: HashSet<_> = east1
            .iter()
            .filter(|n| n.label.az == "az1")
            .map(|n| n.label.subnet.as_str())
            .collect();
        assert_eq!(az1_subnets.len(), 2);
        assert_eq!(cfg.resolve("1.4"), Some(NodeId(14)));
        assert_eq!(cfg.classify(NodeId(11), NodeId(14)), Some(PairClass::CrossSubnet));
        assert_eq!(cfg.classify(NodeId(11), NodeId(21)), Some(PairClass::CrossRegion));
    }

    #[test]
    fn rejects_duplicate_ids() {
        let text = EIGHT_NODE_LAYOUT.replace(r#""id": 12"#, r#""id": 11"#);
        match parse_config(&text) {
            Err(ConfigError::Invalid { field, .. }) => assert_eq!(field, "nodes[1].id"),
            other => panic!("expected InvalidConfig, got {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_documents() {
        assert!(matches!(parse_config("{"), Err(ConfigError::Malformed(_))));
        let missing = single_node(1.0, 0).replace(r#""duration_s": 3"#, r#""extra": 3"#);
        assert!(matches!(parse_config(&missing), Err(ConfigError::Malformed(_))));
        let zero_rate = single_node(0.0, 0);
        assert!(matches!(
            parse_config(&zero_rate),
            Err(ConfigError::Invalid { field, .. }) if field == "round_rate_hz"
        ));
        // 10 round intervals at 1 Hz is 10 s, so 5 s is too short.
        let short = single_node(1.0, 0).replace(r#""pending_expiry_s": 20"#, r#""pending_expiry_s": 5"#);
        assert!(matches!(
            parse_config(&short),
            Err(ConfigError::Invalid { field, .. }) if field == "pending_expiry_s"
        ));
        let same_addr = single_node(1.0, 0).replace("127.0.0.1:9001", "127.0.0.1:9000");
        assert!(matches!(parse_config(&same_addr), Err(ConfigError::Invalid { .. })));
        let empty_az = single_node(1.0, 0).replace(r#""az": "a""#, r#""az": """#);
        assert!(matches!(parse_config(&empty_az), Err(ConfigError::Invalid { .. })));
    }

    #[test]
    fn defaults_for_optional_timing_keys() {
        let text = single_node(1.0, 0)
            .replace(r#""flush_interval_s": 0,"#, "")
            .replace(r#""pending_expiry_s": 20,"#, "");
        let cfg = parse_config(&text).unwrap();
        assert_eq!(cfg.flush_interval_s, DEFAULT_FLUSH_INTERVAL_S);
        assert_eq!(cfg.pending_expiry_s, DEFAULT_PENDING_EXPIRY_S);
    }

    #[test]
    fn classify_examples() {
        let a = TopologyLabel::new("c", "r", "az", "s");
        assert_eq!(classify_pair(&a, &a, true), PairClass::SelfLoop);
        assert_eq!(classify_pair(&a, &a, false), PairClass::SameSubnet);
        let other_region = TopologyLabel::new("c", "r2", "az", "s");
        assert_eq!(classify_pair(&a, &other_region, false), PairClass::CrossRegion);
        let other_subnet = TopologyLabel::new("c", "r", "az", "s2");
        assert_eq!(classify_pair(&a, &other_subnet, false), PairClass::CrossSubnet);
        let other_az = TopologyLabel::new("c", "r", "az2", "s2");
        assert_eq!(classify_pair(&a, &other_az, false), PairClass::CrossAZ);
    }

    #[test]
    fn traffic_examples() {
        assert_eq!(estimate_traffic(&eight_node_config()), 1_638_400.0);
        let one = parse_config(&single_node(37.0, 0)).unwrap();
        assert_eq!(estimate_traffic(&one), 0.0);
        let mut three = eight_node_config();
        three.nodes.truncate(3);
        three.round_rate_hz = 10.0;
        three.payload_bytes = 100;
        assert_eq!(estimate_traffic(&three), 6_000.0);
    }

    #[test]
    fn quorum_groups_on_eight_node_layout() {
        let groups = quorum_groups(&eight_node_config());
        let same: Vec<_> = groups.iter().filter(|g| g.label.starts_with("same-subnet")).collect();
        assert_eq!(same.len(), 1);
        assert_eq!(same[0].nodes, vec![NodeId(11), NodeId(12), NodeId(13)]);
        let cross: Vec<_> = groups.iter().filter(|g| g.label.starts_with("cross-az")).collect();
        assert_eq!(cross.len(), 1);
        assert_eq!(cross[0].nodes, vec![NodeId(11), NodeId(15), NodeId(16)]);
    }

    #[test]
    fn quorum_groups_empty_cases() {
        let mut two = eight_node_config();
        two.nodes.truncate(2);
        assert!(quorum_groups(&two).is_empty());
        let mut spread = eight_node_config();
        spread.nodes = vec![
            spread.nodes[0].clone(),
            spread.nodes[6].clone(),
            spread.nodes[7].clone(),
        ];
        assert!(quorum_groups(&spread).is_empty());
    }

    #[test]
    fn digest_is_stable_across_reparse() {
        let cfg = eight_node_config();
        let again = parse_config(&cfg.to_json()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.digest(), again.digest());
        assert_eq!(quorum_groups(&cfg), quorum_groups(&again));
    }

    fn label_strategy() -> impl Strategy<Value = TopologyLabel> {
        let part = prop::sample::select(vec!["a", "b"]);
        (part.clone(), part.clone(), part.clone(), part).prop_map(|(c, r, z, s)| {
            TopologyLabel::new(c, r, z, s)
        })
    }

    proptest! {
        #[test]
        fn classify_is_symmetric(a in label_strategy(), b in label_strategy(), same in any::<bool>()) {
            let ab = classify_pair(&a, &b, same);
            prop_assert_eq!(ab, classify_pair(&b, &a, same));
            prop_assert_eq!(ab == PairClass::SelfLoop, same);
        }

        #[test]
        fn traffic_is_linear(rate in 1u32..1000, payload in 0u32..8192, k in 1u32..5) {
            let mut cfg = eight_node_config();
            cfg.round_rate_hz = rate as f64;
            cfg.payload_bytes = payload;
            let base = estimate_traffic(&cfg);
            let mut scaled = cfg.clone();
            scaled.round_rate_hz *= k as f64;
            prop_assert_eq!(estimate_traffic(&scaled), base * k as f64);
            let mut scaled = cfg.clone();
            scaled.payload_bytes *= k;
            prop_assert_eq!(estimate_traffic(&scaled), base * k as f64);
            let mut doubled = cfg.clone();
            doubled.nodes.extend(cfg.nodes.clone());
            prop_assert_eq!(estimate_traffic(&doubled), base * 2.0);
        }
    }
}
