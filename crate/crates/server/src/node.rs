//! Node assembly: builds the context for one configured node, binds its
//! listeners and runs everything on a private runtime.
//!
//! Dropping the runtime stops every task and closes every socket at once,
//! which is what a killed process looks like to its peers.

use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use batchstore_core::config::ClusterConfig;
use batchstore_core::frame::{Frame, FrameError};
use batchstore_core::metrics::Event;
use batchstore_core::placement::{NodeId, Role};
use thiserror::Error;
use tokio::runtime::Runtime;
use tokio::sync::watch;

use crate::context::NodeContext;
use crate::dt::DtEngine;
use crate::http::{proxy_router, target_router, TargetState};
use crate::sender::SenderEngine;
use crate::store::TargetStore;
use crate::transport::{serve_peers, FrameHandler};

#[derive(Debug, Error)]
pub enum NodeError {
    #[error("node {0:?} is not in the config")]
    UnknownNode(String),
    #[error(transparent)]
    Config(#[from] batchstore_core::config::ConfigError),
    #[error("bind {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        source: std::io::Error,
    },
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

struct TargetFrames {
    ctx: Arc<NodeContext>,
    dt: Arc<DtEngine>,
    sender: Arc<SenderEngine>,
}

impl FrameHandler for TargetFrames {
    fn on_frame(&self, frame: Frame, _from: SocketAddr) {
        match frame {
            Frame::Delivery(d) => self.dt.on_delivery(d),
            Frame::Activation(a) => self.sender.on_activation(a),
        }
    }

    fn on_bad_frame(&self, err: &FrameError, from: SocketAddr) {
        self.ctx.metrics.record(Event::DroppedFrame);
        tracing::warn!(%from, error = %err, "dropping peer connection after bad frame");
    }
}

pub struct NodeOptions {
    pub config_path: Option<PathBuf>,
    /// Runtime worker threads; 0 picks the tokio default.
    pub worker_threads: usize,
}

impl Default for NodeOptions {
    fn default() -> Self {
        NodeOptions {
            config_path: None,
            worker_threads: 0,
        }
    }
}

pub struct NodeHandle {
    runtime: Option<Runtime>,
    shutdown: watch::Sender<bool>,
    pub ctx: Arc<NodeContext>,
    pub dt: Option<Arc<DtEngine>>,
    pub sender: Option<Arc<SenderEngine>>,
    pub http_addr: SocketAddr,
    pub peer_addr: Option<SocketAddr>,
}

fn bind(addr: SocketAddr) -> Result<TcpListener, NodeError> {
    let l = TcpListener::bind(addr).map_err(|source| NodeError::Bind { addr, source })?;
    l.set_nonblocking(true)?;
    Ok(l)
}

impl NodeHandle {
    /// Binds the configured addresses and starts node `id`.
    pub fn start(cfg: &ClusterConfig, id: &str, opts: NodeOptions) -> Result<Self, NodeError> {
        let (spec, role) = cfg.node(id).ok_or_else(|| NodeError::UnknownNode(id.to_string()))?;
        let http = bind(spec.listen_addr()?)?;
        let peer = match role {
            Role::Target => Some(bind(spec.peer_addr()?)?),
            Role::Proxy => None,
        };
        Self::start_with(cfg, id, opts, http, peer)
    }

    /// Starts node `id` on listeners the caller already bound.
    pub fn start_with(
        cfg: &ClusterConfig,
        id: &str,
        opts: NodeOptions,
        http: TcpListener,
        peer: Option<TcpListener>,
    ) -> Result<Self, NodeError> {
        let (spec, role) = cfg.node(id).ok_or_else(|| NodeError::UnknownNode(id.to_string()))?;
        let map = cfg.cluster_map(1)?;
        let tuning = cfg.tuning.clone();
        let mut rt = tokio::runtime::Builder::new_multi_thread();
        rt.enable_all().thread_name(format!("node-{id}"));
        if opts.worker_threads > 0 {
            rt.worker_threads(opts.worker_threads);
        }
        let runtime = rt.build()?;
        let _guard = runtime.enter();

        let store = match (role, &spec.store_root) {
            (Role::Target, Some(root)) => Some(Arc::new(TargetStore::open(
                root,
                tuning.readahead_workers,
                tuning.fsync,
            )?)),
            _ => None,
        };
        let ctx = Arc::new(NodeContext::new(
            NodeId::new(id),
            role,
            map,
            tuning,
            store.clone(),
            cfg.debug.enabled,
            opts.config_path,
        ));
        let http_addr = http.local_addr()?;
        let peer_addr = peer.as_ref().map(|p| p.local_addr()).transpose()?;
        let (shutdown, stop_rx) = watch::channel(false);

        let (router, dt, sender) = match role {
            Role::Target => {
                let dt = DtEngine::new(ctx.clone());
                let sender = SenderEngine::new(ctx.clone());
                let router = target_router(TargetState {
                    ctx: ctx.clone(),
                    dt: dt.clone(),
                    sender: sender.clone(),
                });
                if let Some(peer) = peer {
                    let handler = Arc::new(TargetFrames {
                        ctx: ctx.clone(),
                        dt: dt.clone(),
                        sender: sender.clone(),
                    });
                    let l = tokio::net::TcpListener::from_std(peer)?;
                    runtime.spawn(serve_peers(l, handler, stop_rx.clone()));
                }
                (router, Some(dt), Some(sender))
            }
            Role::Proxy => (proxy_router(ctx.clone()), None, None),
        };

        let l = tokio::net::TcpListener::from_std(http)?;
        let mut stop = stop_rx.clone();
        runtime.spawn(async move {
            let serve = axum::serve(l, router).with_graceful_shutdown(async move {
                let _ = stop.wait_for(|s| *s).await;
            });
            if let Err(e) = serve.await {
                tracing::error!(error = %e, "http server failed");
            }
        });
        ctx.pressure.spawn_sampler(store);
        let reclaim_ctx = ctx.clone();
        runtime.spawn(async move {
            let every = (reclaim_ctx.tuning.idle_timeout() / 4).max(Duration::from_millis(100));
            loop {
                tokio::time::sleep(every).await;
                reclaim_ctx.pool.reclaim_idle(Instant::now());
            }
        });
        drop(_guard);
        tracing::info!(node = id, %http_addr, ?peer_addr, ?role, "node started");
        Ok(NodeHandle {
            runtime: Some(runtime),
            shutdown,
            ctx,
            dt,
            sender,
            http_addr,
            peer_addr,
        })
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.http_addr)
    }

    pub fn id(&self) -> &str {
        self.ctx.id.as_str()
    }

    /// Stops the node abruptly, dropping in-flight requests and connections.
    pub fn kill(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        let _ = self.shutdown.send(true);
        if let Some(rt) = self.runtime.take() {
            rt.shutdown_background();
        }
    }

    /// Blocks the calling thread until `signal` resolves, then stops.
    pub fn run_until<F: std::future::Future<Output = ()>>(mut self, signal: F) {
        if let Some(rt) = &self.runtime {
            rt.block_on(signal);
        }
        self.stop();
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        if let Some(rt) = self.runtime.take() {
            let _ = self.shutdown.send(true);
            rt.shutdown_background();
        }
    }
}
