//! Local clusters for tests and benchmarks.
//!
//! [`ProcessCluster`] runs every node as its own OS process, so killing a node
//! is a real process kill. [`LocalCluster`] runs the same nodes in-process on
//! private runtimes; it starts in milliseconds and gives tests direct access
//! to node internals.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::thread::sleep;
use std::time::{Duration, Instant};

use batchstore_core::config::{ClusterConfig, ClusterSection, ConfigError, DebugSection, NodeSpec, Tuning};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::node::{NodeError, NodeHandle, NodeOptions};

pub const DEFAULT_STARTUP_TIMEOUT: Duration = Duration::from_secs(15);
const NODE_BIN: &str = "batchstore-node";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Node(#[from] NodeError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("node binary {0:?} not found")]
    NodeBinary(PathBuf),
    #[error("node {id} did not become healthy within {timeout:?}\n--- log ---\n{log}")]
    Startup { id: String, timeout: Duration, log: String },
    #[error("node {id} exited during startup ({status})\n--- log ---\n{log}")]
    Exited { id: String, status: String, log: String },
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("state file: {0}")]
    State(String),
}

/// One plain `GET /health` over a raw socket; true on a 200.
pub fn probe_health(addr: SocketAddr, timeout: Duration) -> bool {
    let Ok(mut s) = TcpStream::connect_timeout(&addr, timeout) else {
        return false;
    };
    let _ = s.set_read_timeout(Some(timeout));
    let _ = s.set_write_timeout(Some(timeout));
    if s
        .write_all(format!("GET /health HTTP/1.1\r\nHost: {addr}\r\nConnection: close\r\n\r\n").as_bytes())
        .is_err()
    {
        return false;
    }
    let mut buf = [0u8; 64];
    let mut got = Vec::new();
    while got.len() < 12 {
        match s.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => got.extend_from_slice(&buf[..n]),
        }
    }
    got.starts_with(b"HTTP/1.1 200") || got.starts_with(b"HTTP/1.0 200")
}

fn free_loopback_port() -> std::io::Result<u16> {
    Ok(TcpListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

/// Builds a config with `targets` targets and one proxy on free loopback
/// ports, stores under `dir`. Ports are released before returning, so a
/// concurrent process could grab one; callers launching processes retry.
pub fn loopback_config(name: &str, targets: usize, dir: &Path, tuning: Tuning, debug: bool) -> std::io::Result<ClusterConfig> {
    let node = |id: String, store: Option<PathBuf>| -> std::io::Result<NodeSpec> {
        Ok(NodeSpec {
            id,
            listen: format!("127.0.0.1:{}", free_loopback_port()?),
            peer: Some(format!("127.0.0.1:{}", free_loopback_port()?)),
            store_root: store,
        })
    };
    Ok(ClusterConfig {
        cluster: ClusterSection { name: name.to_string() },
        proxies: vec![node("proxy".into(), None)?],
        targets: (1..=targets)
            .map(|i| node(format!("t{i}"), Some(dir.join(format!("t{i}")))))
            .collect::<std::io::Result<_>>()?,
        tuning,
        debug: DebugSection { enabled: debug },
    })
}

fn tail(path: &Path, max: usize) -> String {
    let s = fs::read_to_string(path).unwrap_or_default();
    let start = s.len().saturating_sub(max);
    let start = (start..s.len()).find(|&i| s.is_char_boundary(i)).unwrap_or(s.len());
    s[start..].to_string()
}

/// Finds the node binary: explicit path, then `CARGO_BIN_EXE_*`, then next
/// to the running executable (or its parent, for test binaries in `deps/`).
pub fn find_node_binary(explicit: Option<&Path>) -> Result<PathBuf, HarnessError> {
    if let Some(p) = explicit {
        return if p.exists() {
            Ok(p.to_path_buf())
        } else {
            Err(HarnessError::NodeBinary(p.to_path_buf()))
        };
    }
    if let Some(p) = std::env::var_os("CARGO_BIN_EXE_batchstore-node") {
        return Ok(PathBuf::from(p));
    }
    let exe = std::env::current_exe()?;
    let mut dir = exe.parent().map(Path::to_path_buf);
    for _ in 0..2 {
        let Some(d) = dir else { break };
        let cand = d.join(NODE_BIN);
        if cand.exists() {
            return Ok(cand);
        }
        dir = d.parent().map(Path::to_path_buf);
    }
    Err(HarnessError::NodeBinary(PathBuf::from(NODE_BIN)))
}

pub struct LaunchOptions {
    pub node_bin: Option<PathBuf>,
    /// Defaults to `<config dir>/logs`.
    pub log_dir: Option<PathBuf>,
    pub startup_timeout: Duration,
    /// Leave store directories behind on shutdown.
    pub keep: bool,
}

impl Default for LaunchOptions {
    fn default() -> Self {
        LaunchOptions {
            node_bin: None,
            log_dir: None,
            startup_timeout: DEFAULT_STARTUP_TIMEOUT,
            keep: false,
        }
    }
}

/// A cluster of node processes. Dropping it kills every node.
pub struct ProcessCluster {
    config_path: PathBuf,
    config: ClusterConfig,
    node_bin: PathBuf,
    log_dir: PathBuf,
    procs: BTreeMap<String, Child>,
    startup_timeout: Duration,
    keep: bool,
}

fn spawn_node(bin: &Path, config: &Path, id: &str, log_dir: &Path) -> Result<Child, HarnessError> {
    fs::create_dir_all(log_dir)?;
    let log = File::options()
        .create(true)
        .append(true)
        .open(log_dir.join(format!("{id}.log")))?;
    let child = Command::new(bin)
        .arg("--config")
        .arg(config)
        .arg("--id")
        .arg(id)
        .stdin(Stdio::null())
        .stdout(log.try_clone()?)
        .stderr(log)
        .spawn()?;
    Ok(child)
}

impl ProcessCluster {
    pub fn launch(config_path: &Path, opts: LaunchOptions) -> Result<Self, HarnessError> {
        let config_path = config_path.canonicalize()?;
        let config = ClusterConfig::load(&config_path)?;
        let node_bin = find_node_binary(opts.node_bin.as_deref())?;
        let log_dir = opts
            .log_dir
            .unwrap_or_else(|| config_path.parent().unwrap_or(Path::new(".")).join("logs"));
        let mut c = ProcessCluster {
            config_path,
            config,
            node_bin,
            log_dir,
            procs: BTreeMap::new(),
            startup_timeout: opts.startup_timeout,
            keep: opts.keep,
        };
        for id in c.config.node_ids() {
            let child = spawn_node(&c.node_bin, &c.config_path, &id, &c.log_dir)?;
            c.procs.insert(id, child);
        }
        for id in c.config.node_ids() {
            c.wait_healthy(&id)?;
        }
        Ok(c)
    }

    fn wait_healthy(&mut self, id: &str) -> Result<(), HarnessError> {
        let (spec, _) = self.config.node(id).ok_or_else(|| HarnessError::UnknownNode(id.into()))?;
        let addr = spec.listen_addr()?;
        let deadline = Instant::now() + self.startup_timeout;
        let log = self.log_dir.join(format!("{id}.log"));
        loop {
            if probe_health(addr, Duration::from_millis(500)) {
                return Ok(());
            }
            if let Some(child) = self.procs.get_mut(id) {
                if let Ok(Some(status)) = child.try_wait() {
                    return Err(HarnessError::Exited {
                        id: id.into(),
                        status: status.to_string(),
                        log: tail(&log, 4096),
                    });
                }
            }
            if Instant::now() >= deadline {
                return Err(HarnessError::Startup {
                    id: id.into(),
                    timeout: self.startup_timeout,
                    log: tail(&log, 4096),
                });
            }
            sleep(Duration::from_millis(25));
        }
    }

    pub fn config(&self) -> &ClusterConfig {
        &self.config
    }

    pub fn config_path(&self) -> &Path {
        &self.config_path
    }

    pub fn log_dir(&self) -> &Path {
        &self.log_dir
    }

    pub fn gateway_url(&self) -> String {
        format!("http://{}", self.config.proxies[0].listen)
    }

    pub fn node_url(&self, id: &str) -> Option<String> {
        self.config.node(id).map(|(s, _)| format!("http://{}", s.listen))
    }

    pub fn pids(&self) -> BTreeMap<String, u32> {
        self.procs.iter().map(|(id, c)| (id.clone(), c.id())).collect()
    }

    /// SIGKILLs one node and reaps it.
    pub fn kill(&mut self, id: &str) -> Result<(), HarnessError> {
        let mut child = self.procs.remove(id).ok_or_else(|| HarnessError::UnknownNode(id.into()))?;
        let _ = child.kill();
        child.wait()?;
        Ok(())
    }

    /// Starts a node again (killing it first if it is still running) and
    /// waits for it to become healthy.
    pub fn restart(&mut self, id: &str) -> Result<(), HarnessError> {
        if self.config.node(id).is_none() {
            return Err(HarnessError::UnknownNode(id.into()));
        }
        if self.procs.contains_key(id) {
            self.kill(id)?;
        }
        let child = spawn_node(&self.node_bin, &self.config_path, id, &self.log_dir)?;
        self.procs.insert(id.to_string(), child);
        self.wait_healthy(id)
    }

    /// Gives up ownership of the processes, returning their pids.
    pub fn detach(mut self) -> BTreeMap<String, u32> {
        let pids = self.pids();
        self.procs.clear();
        self.keep = true;
        pids
    }

    fn teardown(&mut self) {
        for (_, mut c) in std::mem::take(&mut self.procs) {
            let _ = c.kill();
            let _ = c.wait();
        }
        if !self.keep {
            remove_store_dirs(&self.config);
        }
    }

    pub fn shutdown(mut self) {
        self.teardown();
    }
}

impl Drop for ProcessCluster {
    fn drop(&mut self) {
        self.teardown();
    }
}

pub fn remove_store_dirs(config: &ClusterConfig) {
    for t in &config.targets {
        if let Some(root) = &t.store_root {
            let _ = fs::remove_dir_all(root);
        }
    }
}

/// What `clusterctl up` leaves behind for later subcommands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub config: PathBuf,
    pub log_dir: PathBuf,
    pub node_bin: PathBuf,
    pub pids: BTreeMap<String, u32>,
}

impl ClusterState {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let s = fs::read_to_string(path).map_err(|e| HarnessError::State(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&s).map_err(|e| HarnessError::State(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let s = serde_json::to_string_pretty(self).expect("state serializes");
        fs::write(path, s)?;
        Ok(())
    }

    pub fn from_cluster(c: ProcessCluster) -> Self {
        let config = c.config_path.clone();
        let log_dir = c.log_dir.clone();
        let node_bin = c.node_bin.clone();
        ClusterState {
            config,
            log_dir,
            node_bin,
            pids: c.detach(),
        }
    }

    /// Starts node `id` detached and records its pid.
    pub fn respawn(&mut self, id: &str, startup_timeout: Duration) -> Result<(), HarnessError> {
        let config = ClusterConfig::load(&self.config)?;
        let (spec, _) = config.node(id).ok_or_else(|| HarnessError::UnknownNode(id.into()))?;
        let addr = spec.listen_addr()?;
        let mut child = spawn_node(&self.node_bin, &self.config, id, &self.log_dir)?;
        let deadline = Instant::now() + startup_timeout;
        while !probe_health(addr, Duration::from_millis(500)) {
            if let Ok(Some(status)) = child.try_wait() {
                return Err(HarnessError::Exited {
                    id: id.into(),
                    status: status.to_string(),
                    log: tail(&self.log_dir.join(format!("{id}.log")), 4096),
                });
            }
            if Instant::now() >= deadline {
                let _ = child.kill();
                return Err(HarnessError::Startup {
                    id: id.into(),
                    timeout: startup_timeout,
                    log: tail(&self.log_dir.join(format!("{id}.log")), 4096),
                });
            }
            sleep(Duration::from_millis(25));
        }
        self.pids.insert(id.to_string(), child.id());
        Ok(())
    }
}

/// Sends `sig` to `pid`; false if the process does not exist.
pub fn signal(pid: u32, sig: i32) -> bool {
    // SAFETY: kill(2) has no memory-safety preconditions.
    unsafe { libc::kill(pid as libc::pid_t, sig) == 0 }
}

pub fn process_alive(pid: u32) -> bool {
    // reap it first if it is our zombie child
    // SAFETY: waitpid with WNOHANG on a specific pid is always sound.
    unsafe {
        let mut status = 0;
        libc::waitpid(pid as libc::pid_t, &mut status, libc::WNOHANG);
    }
    signal(pid, 0) && !is_zombie(pid)
}

// an orphaned zombie stays visible to kill(2) when nothing reaps it
fn is_zombie(pid: u32) -> bool {
    fs::read_to_string(format!("/proc/{pid}/stat"))
        .ok()
        .and_then(|s| s.rsplit_once(')').map(|(_, rest)| rest.trim_start().starts_with('Z')))
        .unwrap_or(false)
}

/// SIGTERM, then SIGKILL after `grace`; returns once the process is gone.
pub fn terminate(pid: u32, grace: Duration) {
    if !signal(pid, libc::SIGTERM) {
        return;
    }
    let deadline = Instant::now() + grace;
    while process_alive(pid) {
        if Instant::now() >= deadline {
            signal(pid, libc::SIGKILL);
            let until = Instant::now() + Duration::from_secs(5);
            while process_alive(pid) && Instant::now() < until {
                sleep(Duration::from_millis(10));
            }
            return;
        }
        sleep(Duration::from_millis(10));
    }
}

/// An in-process cluster: one proxy and N targets on loopback, each node on
/// its own runtime. Store directories live in a temp dir removed on drop.
pub struct LocalCluster {
    pub config: ClusterConfig,
    config_path: PathBuf,
    nodes: BTreeMap<String, NodeHandle>,
    addrs: BTreeMap<String, (SocketAddr, Option<SocketAddr>)>,
    _dir: tempfile::TempDir,
}

impl LocalCluster {
    pub fn start(targets: usize, tuning: Tuning) -> Result<Self, HarnessError> {
        let dir = tempfile::Builder::new().prefix("batchstore-").tempdir()?;
        let mut listeners = BTreeMap::new();
        let mut node = |id: String, store: Option<PathBuf>| -> std::io::Result<NodeSpec> {
            let http = TcpListener::bind("127.0.0.1:0")?;
            let peer = TcpListener::bind("127.0.0.1:0")?;
            let spec = NodeSpec {
                id: id.clone(),
                listen: http.local_addr()?.to_string(),
                peer: Some(peer.local_addr()?.to_string()),
                store_root: store,
            };
            listeners.insert(id, (http, peer));
            Ok(spec)
        };
        let config = ClusterConfig {
            cluster: ClusterSection { name: "local".into() },
            proxies: vec![node("proxy".into(), None)?],
            targets: (1..=targets)
                .map(|i| node(format!("t{i}"), Some(dir.path().join(format!("t{i}")))))
                .collect::<std::io::Result<_>>()?,
            tuning,
            debug: DebugSection { enabled: true },
        };
        let config_path = dir.path().join("cluster.toml");
        fs::write(&config_path, config.to_toml())?;
        let mut c = LocalCluster {
            config,
            config_path,
            nodes: BTreeMap::new(),
            addrs: BTreeMap::new(),
            _dir: dir,
        };
        for (id, (http, peer)) in listeners {
            let is_target = id != "proxy";
            http.set_nonblocking(true)?;
            peer.set_nonblocking(true)?;
            let addrs = (http.local_addr()?, is_target.then(|| peer.local_addr()).transpose()?);
            let h = NodeHandle::start_with(
                &c.config,
                &id,
                NodeOptions {
                    config_path: Some(c.config_path.clone()),
                    worker_threads: 2,
                },
                http,
                is_target.then_some(peer),
            )?;
            c.addrs.insert(id.clone(), addrs);
            c.nodes.insert(id, h);
        }
        Ok(c)
    }

    pub fn gateway_url(&self) -> String {
        self.url("proxy")
    }

    pub fn url(&self, id: &str) -> String {
        format!("http://{}", self.addrs[id].0)
    }

    pub fn target_ids(&self) -> Vec<String> {
        self.config.targets.iter().map(|t| t.id.clone()).collect()
    }

    pub fn node(&self, id: &str) -> &NodeHandle {
        &self.nodes[id]
    }

    pub fn config_path(&self) -> &Path {
        &self.config_path
    }

    pub fn is_running(&self, id: &str) -> bool {
        self.nodes.contains_key(id)
    }

    pub fn kill(&mut self, id: &str) -> Result<(), HarnessError> {
        let h = self.nodes.remove(id).ok_or_else(|| HarnessError::UnknownNode(id.into()))?;
        h.kill();
        Ok(())
    }

    /// Starts a killed node again on its original ports.
    pub fn restart(&mut self, id: &str) -> Result<(), HarnessError> {
        if let Some(h) = self.nodes.remove(id) {
            h.kill();
        }
        let (http_addr, peer_addr) = *self.addrs.get(id).ok_or_else(|| HarnessError::UnknownNode(id.into()))?;
        let deadline = Instant::now() + Duration::from_secs(5);
        let bind = |a: SocketAddr| -> Result<TcpListener, HarnessError> {
            loop {
                match TcpListener::bind(a) {
                    Ok(l) => {
                        l.set_nonblocking(true)?;
                        return Ok(l);
                    }
                    Err(e) if Instant::now() >= deadline => return Err(e.into()),
                    Err(_) => sleep(Duration::from_millis(20)),
                }
            }
        };
        let http = bind(http_addr)?;
        let peer = peer_addr.map(bind).transpose()?;
        let h = NodeHandle::start_with(
            &self.config,
            id,
            NodeOptions {
                config_path: Some(self.config_path.clone()),
                worker_threads: 2,
            },
            http,
            peer,
        )?;
        self.nodes.insert(id.to_string(), h);
        Ok(())
    }
}
