//! Sender side of GetBatch: react to activations by reading the locally owned
//! slice and delivering one frame per entry to the DT.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use batchstore_core::frame::{ActivationMessage, DeliveryFrame, Frame};
use batchstore_core::model::{ExecutionId, ObjectRef};
use batchstore_core::placement::local_slice;
use futures::StreamExt;

use crate::context::NodeContext;
use crate::dt::Delivered;
use crate::store::{StoreError, TargetStore};

const MAX_READ_CONCURRENCY: usize = 8;

/// Reads one entry, folding store failures into soft-error reasons.
pub fn read_entry(store: &TargetStore, r: &ObjectRef) -> Delivered {
    match store.read_local(r) {
        Ok(b) => Delivered::Ok(b),
        Err(StoreError::Soft(reason)) => Delivered::Soft(reason.as_str().into()),
        Err(StoreError::Hard(e)) => {
            tracing::warn!(bucket = %r.bucket, objname = %r.objname, error = %e, "local read failed");
            Delivered::Soft("io_error".into())
        }
    }
}

fn to_frame(exec_id: ExecutionId, index: usize, d: Delivered) -> DeliveryFrame {
    match d {
        Delivered::Ok(p) => DeliveryFrame::ok(exec_id, index as u32, p),
        Delivered::Soft(reason) => DeliveryFrame::soft_error(exec_id, index as u32, reason),
    }
}

pub struct SenderEngine {
    ctx: Arc<NodeContext>,
    active: AtomicUsize,
}

impl SenderEngine {
    pub fn new(ctx: Arc<NodeContext>) -> Arc<Self> {
        Arc::new(SenderEngine {
            ctx,
            active: AtomicUsize::new(0),
        })
    }

    /// Activations still dispatching frames.
    pub fn active(&self) -> usize {
        self.active.load(Ordering::Relaxed)
    }

    pub fn on_activation(self: &Arc<Self>, msg: ActivationMessage) {
        if msg.dt_node == self.ctx.id || self.ctx.faults.sender_muted() {
            return;
        }
        let map = self.ctx.map();
        let slice = local_slice(&map, &self.ctx.id, &msg.request.entries);
        if slice.is_empty() {
            return;
        }
        let Some(dt) = map.target(&msg.dt_node) else {
            tracing::warn!(dt = %msg.dt_node.as_str(), "activation names an unknown DT");
            return;
        };
        let dt_addr = dt.peer.clone();
        self.active.fetch_add(1, Ordering::Relaxed);
        tokio::spawn(self.clone().run(msg, slice, dt_addr));
    }

    async fn run(self: Arc<Self>, msg: ActivationMessage, slice: Vec<usize>, dt_addr: String) {
        let Some(store) = self.ctx.store.clone() else {
            self.active.fetch_sub(1, Ordering::Relaxed);
            return;
        };
        let entries = &msg.request.entries;
        store.readahead(slice.iter().map(|&i| &entries[i]));
        let workers = slice.len().min(MAX_READ_CONCURRENCY);
        futures::stream::iter(slice)
            .for_each_concurrent(workers, |i| {
                let store = store.clone();
                let r = entries[i].clone();
                let dt_addr = &dt_addr;
                let me = &self;
                async move {
                    me.ctx.throttle().await;
                    if let Some(d) = me.ctx.faults.sender_delay() {
                        tokio::time::sleep(d).await;
                    }
                    let d = tokio::task::spawn_blocking(move || read_entry(&store, &r))
                        .await
                        .unwrap_or_else(|_| Delivered::Soft("io_error".into()));
                    me.deliver(dt_addr, to_frame(msg.exec_id, i, d)).await;
                }
            })
            .await;
        self.active.fetch_sub(1, Ordering::Relaxed);
    }

    /// One retry on the pool, then a soft-error frame on a fresh connection.
    /// If that fails too the DT's timeout path takes over.
    async fn deliver(&self, dt_addr: &str, f: DeliveryFrame) {
        let (exec_id, index) = (f.exec_id, f.index);
        let frame = Frame::Delivery(f);
        for _ in 0..2 {
            if self.ctx.pool.send_frame(dt_addr, &frame).await.is_ok() {
                return;
            }
        }
        let soft = Frame::Delivery(DeliveryFrame::soft_error(exec_id, index, "transport"));
        if let Err(e) = self.ctx.pool.send_frame_fresh(dt_addr, &soft).await {
            tracing::warn!(dt = dt_addr, exec = %exec_id, index, error = %e, "delivery failed");
        }
    }

    /// Synchronous read for a recovery pull, regardless of ownership.
    pub async fn serve_pull(&self, exec_id: ExecutionId, index: u32, r: ObjectRef) -> DeliveryFrame {
        let Some(store) = self.ctx.store.clone() else {
            return DeliveryFrame::soft_error(exec_id, index, "not_found");
        };
        let d = tokio::task::spawn_blocking(move || read_entry(&store, &r))
            .await
            .unwrap_or_else(|_| Delivered::Soft("io_error".into()));
        to_frame(exec_id, index as usize, d)
    }
}
