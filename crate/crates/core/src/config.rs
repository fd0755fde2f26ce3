//! Cluster configuration file.
//!
//! ```toml
//! [cluster]
//! name = "desk"
//!
//! [[proxy]]
//! id = "p1"
//! listen = "127.0.0.1:8080"
//!
//! [[target]]
//! id = "t1"
//! listen = "127.0.0.1:9080"
//! store_root = "data/t1"
//!
//! [tuning]
//! rxwait_timeout_ms = 10000
//! ```
//!
//! Each node also listens on a peer port (`peer`), defaulting to the HTTP
//! port plus one. Relative `store_root` paths resolve against the directory
//! holding the config file.

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::admission::AdmissionConfig;
use crate::placement::{ClusterMap, MapError, NodeId, NodeInfo, Role};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Syntax(String),
    #[error("line {line}: duplicate node id {id:?}")]
    DuplicateId { id: String, line: usize },
    #[error("missing section {0}")]
    MissingSection(&'static str),
    #[error("node {id:?}: {msg}")]
    Node { id: String, msg: String },
    #[error("invalid tuning: {0}")]
    Tuning(String),
    #[error(transparent)]
    Map(#[from] MapError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClusterSection {
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    pub listen: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub peer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_root: Option<PathBuf>,
}

impl NodeSpec {
    pub fn listen_addr(&self) -> Result<SocketAddr, ConfigError> {
        self.listen.parse().map_err(|_| ConfigError::Node {
            id: self.id.clone(),
            msg: format!("bad listen address {:?}", self.listen),
        })
    }

    pub fn peer_addr(&self) -> Result<SocketAddr, ConfigError> {
        match &self.peer {
            Some(p) => p.parse().map_err(|_| ConfigError::Node {
                id: self.id.clone(),
                msg: format!("bad peer address {p:?}"),
            }),
            None => {
                let mut a = self.listen_addr()?;
                let port = a.port().checked_add(1).ok_or_else(|| ConfigError::Node {
                    id: self.id.clone(),
                    msg: "listen port leaves no room for the default peer port".into(),
                })?;
                a.set_port(port);
                Ok(a)
            }
        }
    }

    fn info(&self, role: Role) -> Result<NodeInfo, ConfigError> {
        Ok(NodeInfo {
            id: NodeId::new(self.id.clone()),
            endpoint: self.listen_addr()?.to_string(),
            peer: self.peer_addr()?.to_string(),
            role,
        })
    }
}

/// Execution knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tuning {
    pub rxwait_timeout_ms: u64,
    pub gfn_attempts: u32,
    pub max_soft_errors: u32,
    pub readahead_workers: usize,
    pub idle_timeout_s: u64,
    pub mem_critical: f64,
    pub busy_threshold: f64,
    pub throttle_step_ms: u64,
    pub max_conns_per_peer: usize,
    pub connect_timeout_ms: u64,
    pub activation_timeout_ms: u64,
    /// A DT drops an execution whose client never connects within this window.
    pub client_wait_timeout_ms: u64,
    /// Memory budget the measured RSS fraction is computed against.
    pub mem_budget_mb: u64,
    pub max_body_bytes: usize,
    /// fsync object data before the rename that publishes it.
    pub fsync: bool,
}

impl Default for Tuning {
    fn default() -> Self {
        Tuning {
            rxwait_timeout_ms: 10_000,
            gfn_attempts: 2,
            max_soft_errors: 8,
            readahead_workers: 4,
            idle_timeout_s: 60,
            mem_critical: 0.90,
            busy_threshold: 0.85,
            throttle_step_ms: 10,
            max_conns_per_peer: 8,
            connect_timeout_ms: 2_000,
            activation_timeout_ms: 2_000,
            client_wait_timeout_ms: 30_000,
            mem_budget_mb: 4_096,
            max_body_bytes: crate::model::MAX_BODY_BYTES,
            fsync: true,
        }
    }
}

impl Tuning {
    pub fn rxwait_timeout(&self) -> Duration {
        Duration::from_millis(self.rxwait_timeout_ms)
    }

    pub fn idle_timeout(&self) -> Duration {
        Duration::from_secs(self.idle_timeout_s)
    }

    pub fn connect_timeout(&self) -> Duration {
        Duration::from_millis(self.connect_timeout_ms)
    }

    pub fn activation_timeout(&self) -> Duration {
        Duration::from_millis(self.activation_timeout_ms)
    }

    pub fn client_wait_timeout(&self) -> Duration {
        Duration::from_millis(self.client_wait_timeout_ms)
    }

    pub fn admission(&self) -> AdmissionConfig {
        AdmissionConfig {
            mem_critical: self.mem_critical,
            busy_threshold: self.busy_threshold,
            throttle_step: Duration::from_millis(self.throttle_step_ms),
        }
    }

    fn validate(&self) -> Result<(), ConfigError> {
        let frac = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(ConfigError::Tuning(format!("{name} must be within [0, 1], got {v}")))
            }
        };
        frac("mem_critical", self.mem_critical)?;
        frac("busy_threshold", self.busy_threshold)?;
        if self.readahead_workers == 0 {
            return Err(ConfigError::Tuning("readahead_workers must be >= 1".into()));
        }
        if self.max_conns_per_peer == 0 {
            return Err(ConfigError::Tuning("max_conns_per_peer must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebugSection {
    /// Enables `/v1/debug/*` fault-injection endpoints.
    pub enabled: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterConfig {
    pub cluster: ClusterSection,
    #[serde(rename = "proxy")]
    pub proxies: Vec<NodeSpec>,
    #[serde(rename = "target")]
    pub targets: Vec<NodeSpec>,
    #[serde(default)]
    pub tuning: Tuning,
    #[serde(default)]
    pub debug: DebugSection,
}

#[derive(Deserialize)]
struct RawConfig {
    cluster: Option<ClusterSection>,
    #[serde(default, rename = "proxy")]
    proxies: Vec<NodeSpec>,
    #[serde(default, rename = "target")]
    targets: Vec<NodeSpec>,
    #[serde(default)]
    tuning: Tuning,
    #[serde(default)]
    debug: DebugSection,
}

/// Line (1-based) of the `nth` occurrence of `id = "<id>"` in the source.
fn line_of_id(src: &str, id: &str, nth: usize) -> usize {
    let quoted = format!("\"{id}\"");
    src.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim_start();
            t.starts_with("id") && t.contains('=') && t.contains(&quoted)
        })
        .nth(nth)
        .map(|(i, _)| i + 1)
        .unwrap_or(0)
}

impl ClusterConfig {
    pub fn parse(src: &str) -> Result<Self, ConfigError> {
        let raw: RawConfig = toml::from_str(src).map_err(|e| ConfigError::Syntax(e.to_string()))?;
        let cluster = raw.cluster.ok_or(ConfigError::MissingSection("[cluster]"))?;
        if raw.proxies.is_empty() {
            return Err(ConfigError::MissingSection("[[proxy]]"));
        }
        if raw.targets.is_empty() {
            return Err(ConfigError::MissingSection("[[target]]"));
        }
        let mut seen: HashMap<&str, usize> = HashMap::new();
        for n in raw.proxies.iter().chain(raw.targets.iter()) {
            if n.id.is_empty() {
                return Err(ConfigError::Node {
                    id: String::new(),
                    msg: "empty node id".into(),
                });
            }
            let count = seen.entry(n.id.as_str()).or_insert(0);
            *count += 1;
            if *count > 1 {
                return Err(ConfigError::DuplicateId {
                    id: n.id.clone(),
                    line: line_of_id(src, &n.id, *count - 1),
                });
            }
            n.listen_addr()?;
            n.peer_addr()?;
        }
        for t in &raw.targets {
            if t.store_root.is_none() {
                return Err(ConfigError::Node {
                    id: t.id.clone(),
                    msg: "target needs store_root".into(),
                });
            }
        }
        raw.tuning.validate()?;
        Ok(ClusterConfig {
            cluster,
            proxies: raw.proxies,
            targets: raw.targets,
            tuning: raw.tuning,
            debug: raw.debug,
        })
    }

    /// Reads and parses `path`; relative store roots are resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let src = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut cfg = Self::parse(&src)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for t in &mut cfg.targets {
            if let Some(root) = &t.store_root {
                if root.is_relative() {
                    t.store_root = Some(base.join(root));
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn node_count(&self) -> usize {
        self.proxies.len() + self.targets.len()
    }

    pub fn node(&self, id: &str) -> Option<(&NodeSpec, Role)> {
        self.proxies
            .iter()
            .find(|n| n.id == id)
            .map(|n| (n, Role::Proxy))
            .or_else(|| {
                self.targets
                    .iter()
                    .find(|n| n.id == id)
                    .map(|n| (n, Role::Target))
            })
    }

    pub fn node_ids(&self) -> Vec<String> {
        self.proxies
            .iter()
            .chain(self.targets.iter())
            .map(|n| n.id.clone())
            .collect()
    }

    pub fn cluster_map(&self, version: u64) -> Result<ClusterMap, ConfigError> {
        let targets = self
            .targets
            .iter()
            .map(|n| n.info(Role::Target))
            .collect::<Result<Vec<_>, _>>()?;
        let proxies = self
            .proxies
            .iter()
            .map(|n| n.info(Role::Proxy))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(ClusterMap::new(version, targets, proxies)?)
    }
}
