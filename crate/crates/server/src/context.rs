//! State shared by every subsystem of one node.

use std::path::PathBuf;
use std::sync::atomic::AtomicU64;
use std::sync::Arc;

use batchstore_core::admission::throttle_delay;
use batchstore_core::config::Tuning;
use batchstore_core::metrics::{Event, MetricsRegistry};
use batchstore_core::placement::{ClusterMap, NodeId, NodeInfo, Role};
use parking_lot::RwLock;

use crate::pressure::{Faults, PressureMonitor};
use crate::store::TargetStore;
use crate::transport::PeerPool;

pub struct NodeContext {
    pub id: NodeId,
    pub role: Role,
    map: RwLock<Arc<ClusterMap>>,
    pub tuning: Tuning,
    pub metrics: MetricsRegistry,
    pub pool: PeerPool,
    pub http: reqwest::Client,
    pub faults: Arc<Faults>,
    pub pressure: Arc<PressureMonitor>,
    pub store: Option<Arc<TargetStore>>,
    pub debug_enabled: bool,
    pub config_path: Option<PathBuf>,
    /// Request bodies the gateway had to unmarshal; exposed for tests.
    pub bodies_parsed: AtomicU64,
}

impl NodeContext {
    pub fn new(
        id: NodeId,
        role: Role,
        map: ClusterMap,
        tuning: Tuning,
        store: Option<Arc<TargetStore>>,
        debug_enabled: bool,
        config_path: Option<PathBuf>,
    ) -> Self {
        let faults = Arc::new(Faults::default());
        let pressure = Arc::new(PressureMonitor::new(faults.clone(), tuning.mem_budget_mb));
        let http = reqwest::Client::builder()
            .redirect(reqwest::redirect::Policy::none())
            .connect_timeout(tuning.connect_timeout())
            .pool_idle_timeout(tuning.idle_timeout())
            .build()
            .expect("http client builds");
        NodeContext {
            id,
            role,
            map: RwLock::new(Arc::new(map)),
            pool: PeerPool::new(
                tuning.max_conns_per_peer,
                tuning.connect_timeout(),
                tuning.idle_timeout(),
            ),
            tuning,
            metrics: MetricsRegistry::new(),
            http,
            faults,
            pressure,
            store,
            debug_enabled,
            config_path,
            bodies_parsed: AtomicU64::new(0),
        }
    }

    pub fn map(&self) -> Arc<ClusterMap> {
        self.map.read().clone()
    }

    pub fn set_map(&self, map: ClusterMap) {
        *self.map.write() = Arc::new(map);
    }

    pub fn target_info(&self, id: &NodeId) -> Option<NodeInfo> {
        self.map.read().target(id).cloned()
    }

    /// Sleeps before one work item when CPU or disk is over threshold.
    pub async fn throttle(&self) {
        if let Some(d) = throttle_delay(&self.tuning.admission(), self.pressure.current()) {
            tokio::time::sleep(d).await;
            self.metrics.record(Event::Throttle(d));
        }
    }
}
