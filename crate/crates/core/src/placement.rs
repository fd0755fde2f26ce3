//! Object ownership and Designated Target selection.
//!
//! Placement uses rendezvous (highest random weight) hashing: every target
//! scores a key with `hash(node_id ‖ key)` and the highest score wins. Removing
//! a node only moves the keys that node owned.
//!
//! The archive path never takes part in the ownership key, so all members of
//! one shard live on the node that stores the shard.

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ExecutionId, ObjectRef};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(pub String);

impl NodeId {
    pub fn new(s: impl Into<String>) -> Self {
        NodeId(s.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for NodeId {
    fn from(s: &str) -> Self {
        NodeId(s.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Proxy,
    Target,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeInfo {
    pub id: NodeId,
    /// HTTP endpoint, `host:port`.
    pub endpoint: String,
    /// Peer transport endpoint, `host:port`.
    pub peer: String,
    pub role: Role,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MapError {
    #[error("duplicate node id {0:?}")]
    DuplicateId(String),
    #[error("node id must be non-empty")]
    EmptyId,
    #[error("cluster map needs at least one target")]
    NoTargets,
    #[error("cluster map needs at least one proxy")]
    NoProxies,
}

/// Immutable snapshot of cluster membership.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterMap {
    pub version: u64,
    pub targets: Vec<NodeInfo>,
    pub proxies: Vec<NodeInfo>,
}

impl ClusterMap {
    /// Builds a validated map; targets and proxies are kept sorted by id.
    pub fn new(
        version: u64,
        mut targets: Vec<NodeInfo>,
        mut proxies: Vec<NodeInfo>,
    ) -> Result<Self, MapError> {
        let mut seen = HashSet::new();
        for n in targets.iter().chain(proxies.iter()) {
            if n.id.0.is_empty() {
                return Err(MapError::EmptyId);
            }
            if !seen.insert(n.id.clone()) {
                return Err(MapError::DuplicateId(n.id.0.clone()));
            }
        }
        if targets.is_empty() {
            return Err(MapError::NoTargets);
        }
        if proxies.is_empty() {
            return Err(MapError::NoProxies);
        }
        targets.sort_by(|a, b| a.id.cmp(&b.id));
        proxies.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(ClusterMap {
            version,
            targets,
            proxies,
        })
    }

    pub fn target(&self, id: &NodeId) -> Option<&NodeInfo> {
        self.targets.iter().find(|n| &n.id == id)
    }

    pub fn node(&self, id: &NodeId) -> Option<&NodeInfo> {
        self.targets
            .iter()
            .chain(self.proxies.iter())
            .find(|n| &n.id == id)
    }

    pub fn is_target(&self, id: &NodeId) -> bool {
        self.target(id).is_some()
    }

    /// Next snapshot with different membership; the version always moves forward.
    pub fn successor(
        &self,
        targets: Vec<NodeInfo>,
        proxies: Vec<NodeInfo>,
    ) -> Result<Self, MapError> {
        ClusterMap::new(self.version + 1, targets, proxies)
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// 64-bit FNV-1a over `parts` joined with NUL separators, followed by the
/// splitmix64 finalizer to spread the low-entropy FNV output.
pub fn hash_parts(parts: &[&[u8]]) -> u64 {
    let mut h = FNV_OFFSET;
    let mut feed = |b: u8| {
        h ^= u64::from(b);
        h = h.wrapping_mul(FNV_PRIME);
    };
    for (i, part) in parts.iter().enumerate() {
        if i > 0 {
            feed(0);
        }
        part.iter().for_each(|&b| feed(b));
    }
    mix64(h)
}

fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn object_score(node: &NodeId, r: &ObjectRef) -> u64 {
    hash_parts(&[node.0.as_bytes(), r.bucket.as_bytes(), r.objname.as_bytes()])
}

/// Highest score wins; equal scores fall back to the smaller node id.
fn hrw_winner<'a>(targets: &'a [NodeInfo], score: impl Fn(&NodeId) -> u64) -> &'a NodeId {
    let mut best: Option<(u64, &NodeId)> = None;
    for t in targets {
        let s = score(&t.id);
        match best {
            Some((bs, _)) if s <= bs => {}
            _ => best = Some((s, &t.id)),
        }
    }
    best.expect("cluster map has at least one target").1
}

/// Target that owns `r`.
pub fn owner_of<'a>(map: &'a ClusterMap, r: &ObjectRef) -> &'a NodeId {
    hrw_winner(&map.targets, |n| object_score(n, r))
}

/// DT selection on the opaque fast path: the body is never looked at, only a
/// proxy-generated request id.
pub fn select_dt_default(map: &ClusterMap, request_id: ExecutionId) -> &NodeId {
    let seed = request_id.to_bytes();
    hrw_winner(&map.targets, |n| hash_parts(&[n.0.as_bytes(), &seed]))
}

/// Target owning the most entries; ties go to the lexicographically smallest id.
pub fn select_dt_colocated<'a>(map: &'a ClusterMap, entries: &[ObjectRef]) -> &'a NodeId {
    let counts = ownership_counts(map, entries);
    let mut best: Option<(&NodeId, usize)> = None;
    // targets are sorted by id, so a strict comparison keeps the smallest id on ties
    for t in &map.targets {
        let c = counts.get(&t.id).copied().unwrap_or(0);
        if best.map_or(true, |(_, bc)| c > bc) {
            best = Some((&t.id, c));
        }
    }
    best.expect("cluster map has at least one target").0
}

pub fn ownership_counts<'a>(
    map: &'a ClusterMap,
    entries: &[ObjectRef],
) -> BTreeMap<&'a NodeId, usize> {
    let mut counts = BTreeMap::new();
    for e in entries {
        *counts.entry(owner_of(map, e)).or_insert(0) += 1;
    }
    counts
}

/// Owner of every entry, by position.
pub fn owners<'a>(map: &'a ClusterMap, entries: &[ObjectRef]) -> Vec<&'a NodeId> {
    entries.iter().map(|e| owner_of(map, e)).collect()
}

/// Splits entries by owner. Indices ascend within each node's list.
pub fn partition_entries(
    map: &ClusterMap,
    entries: &[ObjectRef],
) -> BTreeMap<NodeId, Vec<(usize, ObjectRef)>> {
    let mut out: BTreeMap<NodeId, Vec<(usize, ObjectRef)>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        out.entry(owner_of(map, e).clone())
            .or_default()
            .push((i, e.clone()));
    }
    out
}

/// Slice of `entries` owned by `node`.
pub fn local_slice(map: &ClusterMap, node: &NodeId, entries: &[ObjectRef]) -> Vec<usize> {
    entries
        .iter()
        .enumerate()
        .filter(|(_, e)| owner_of(map, e) == node)
        .map(|(i, _)| i)
        .collect()
}
