//! Designated Target: per-request state, ordered reassembly and emission.
//!
//! Every delivery for a request, whether a remote frame, a local read or a
//! recovery pull, goes through [`DtEngine::accept`]. The emitter drains the
//! reorder buffer strictly by index. A driver task per request watches the
//! deadlines of remote entries and runs recovery rounds when they expire.

use std::collections::{HashMap, VecDeque};
use std::io;
use std::sync::Arc;
use std::time::{Duration, Instant};

use batchstore_core::admission::{admit, Decision};
use batchstore_core::frame::{DeliveryFrame, Frame};
use batchstore_core::metrics::Event;
use batchstore_core::model::{
    canonical_entry_name, BatchItemResult, BatchRequest, ExecutionId, ItemStatus, ObjectRef,
};
use batchstore_core::placement::{owner_of, NodeId, NodeInfo};
use batchstore_core::tar::TarEncoder;
use bytes::Bytes;
use futures::StreamExt;
use parking_lot::Mutex;
use serde::Serialize;
use thiserror::Error;
use tokio::sync::{mpsc, Notify};

use crate::context::NodeContext;
use crate::sender::read_entry;

const TOMBSTONES: usize = 4096;
const STREAM_QUEUE: usize = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum RegisterError {
    #[error("admission rejected: memory pressure")]
    Rejected,
    #[error("this node is not a target in the current map")]
    NotTarget,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EmitError {
    #[error("unknown execution")]
    Unknown,
    #[error("execution aborted: {0}")]
    Aborted(String),
    #[error("a client is already attached")]
    AlreadyAttached,
}

/// What the HTTP layer sends back for `GET /v1/batch/{exec_id}`.
pub enum Emission {
    /// First chunk is ready; the rest arrives on the channel. An `Err` item
    /// means the request aborted mid-stream and the body must end without the
    /// TAR terminator.
    Stream {
        first: Vec<Bytes>,
        rest: mpsc::Receiver<Result<Bytes, io::Error>>,
    },
    Buffered(Bytes),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Outcome {
    Live,
    Aborted(String),
    Done,
}

struct ExecState {
    slots: Vec<Option<BatchItemResult>>,
    resolved: usize,
    next_emit: usize,
    soft_errors: u32,
    recovery_rounds: u32,
    deadlines: Vec<Option<Instant>>,
    pending_remote: usize,
    outcome: Outcome,
    client_attached: bool,
}

pub struct Execution {
    pub id: ExecutionId,
    pub request: BatchRequest,
    names: Vec<String>,
    owners: Vec<NodeId>,
    created: Instant,
    state: Mutex<ExecState>,
    emit_notify: Notify,
    driver_notify: Notify,
}

/// One delivery, already classified.
#[derive(Debug, Clone)]
pub enum Delivered {
    Ok(Bytes),
    Soft(String),
}

impl From<DeliveryFrame> for Delivered {
    fn from(f: DeliveryFrame) -> Self {
        match f.status {
            ItemStatus::Ok => Delivered::Ok(f.payload),
            ItemStatus::SoftError => Delivered::Soft(f.reason.unwrap_or_else(|| "soft_error".into())),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct DtStats {
    pub registry: usize,
    pub tombstones: usize,
}

pub struct DtEngine {
    ctx: Arc<NodeContext>,
    registry: Mutex<HashMap<ExecutionId, Arc<Execution>>>,
    tombstones: Mutex<VecDeque<(ExecutionId, String)>>,
}

enum Step {
    Entry(BatchItemResult),
    Finished,
    Aborted(String),
}

/// Aborts a buffered request whose HTTP handler is dropped before finishing.
struct DisconnectGuard<'a> {
    dt: &'a DtEngine,
    exec: &'a Arc<Execution>,
    armed: bool,
}

impl Drop for DisconnectGuard<'_> {
    fn drop(&mut self) {
        if self.armed {
            self.dt.abort(self.exec, "client disconnected".into());
        }
    }
}

impl DtEngine {
    pub fn new(ctx: Arc<NodeContext>) -> Arc<Self> {
        Arc::new(DtEngine {
            ctx,
            registry: Mutex::new(HashMap::new()),
            tombstones: Mutex::new(VecDeque::new()),
        })
    }

    pub fn stats(&self) -> DtStats {
        DtStats {
            registry: self.registry.lock().len(),
            tombstones: self.tombstones.lock().len(),
        }
    }

    pub fn registry_len(&self) -> usize {
        self.registry.lock().len()
    }

    /// Admits and allocates state for a request, arms remote deadlines and
    /// starts local reads.
    pub fn register(self: &Arc<Self>, request: BatchRequest) -> Result<ExecutionId, RegisterError> {
        let map = self.ctx.map();
        if !map.is_target(&self.ctx.id) {
            return Err(RegisterError::NotTarget);
        }
        if admit(&self.ctx.tuning.admission(), self.ctx.pressure.current(), request.len() as u64)
            == Decision::Reject429
        {
            self.ctx.metrics.record(Event::AdmissionReject);
            return Err(RegisterError::Rejected);
        }
        let created = Instant::now();
        let deadline = created + self.ctx.tuning.rxwait_timeout();
        let n = request.len();
        let owners: Vec<NodeId> = request.entries.iter().map(|e| owner_of(&map, e).clone()).collect();
        let deadlines: Vec<Option<Instant>> = owners
            .iter()
            .map(|o| (*o != self.ctx.id).then_some(deadline))
            .collect();
        let pending_remote = deadlines.iter().filter(|d| d.is_some()).count();
        let mut id = ExecutionId::random();
        let exec = {
            let mut reg = self.registry.lock();
            while reg.contains_key(&id) {
                id = ExecutionId::random();
            }
            let exec = Arc::new(Execution {
                id,
                names: request.entries.iter().map(canonical_entry_name).collect(),
                request,
                owners,
                created,
                state: Mutex::new(ExecState {
                    slots: vec![None; n],
                    resolved: 0,
                    next_emit: 0,
                    soft_errors: 0,
                    recovery_rounds: 0,
                    deadlines,
                    pending_remote,
                    outcome: Outcome::Live,
                    client_attached: false,
                }),
                emit_notify: Notify::new(),
                driver_notify: Notify::new(),
            });
            reg.insert(id, exec.clone());
            exec
        };
        tokio::spawn(self.clone().drive(exec.clone()));
        let local: Vec<usize> = (0..n).filter(|&i| exec.owners[i] == self.ctx.id).collect();
        if !local.is_empty() {
            tokio::spawn(self.clone().read_local_entries(exec, local));
        }
        Ok(id)
    }

    async fn read_local_entries(self: Arc<Self>, exec: Arc<Execution>, local: Vec<usize>) {
        let Some(store) = self.ctx.store.clone() else { return };
        store.readahead(local.iter().map(|&i| &exec.request.entries[i]));
        let workers = self.ctx.tuning.readahead_workers.max(1);
        futures::stream::iter(local)
            .for_each_concurrent(workers, |i| {
                let exec = exec.clone();
                let store = store.clone();
                let me = self.clone();
                async move {
                    if !exec.is_live() {
                        return;
                    }
                    me.ctx.throttle().await;
                    let r = exec.request.entries[i].clone();
                    let d = tokio::task::spawn_blocking(move || read_entry(&store, &r))
                        .await
                        .unwrap_or_else(|_| Delivered::Soft("io_error".into()));
                    me.accept(&exec, i, d);
                }
            })
            .await;
    }

    /// Entry point for frames arriving from peers.
    pub fn on_delivery(&self, frame: DeliveryFrame) {
        let exec = self.registry.lock().get(&frame.exec_id).cloned();
        match exec {
            Some(exec) => {
                let idx = frame.index as usize;
                self.accept(&exec, idx, frame.into());
            }
            None => self.ctx.metrics.record(Event::DroppedFrame),
        }
    }

    /// Records one result. Duplicates are ignored; a soft error either
    /// becomes a placeholder or aborts the request.
    pub fn accept(&self, exec: &Arc<Execution>, index: usize, d: Delivered) {
        let max_soft = self.ctx.tuning.max_soft_errors;
        let abort_reason = {
            let mut st = exec.state.lock();
            if st.outcome != Outcome::Live {
                return;
            }
            if index >= st.slots.len() {
                Some(format!("delivery index {index} out of range"))
            } else if index < st.next_emit || st.slots[index].is_some() {
                drop(st);
                self.ctx.metrics.record(Event::DuplicateDelivery);
                return;
            } else {
                let name = exec.names[index].clone();
                let (result, abort) = match d {
                    Delivered::Ok(p) => (Some(BatchItemResult::ok(index, name, p)), None),
                    Delivered::Soft(reason) if !exec.request.coer => {
                        (None, Some(format!("entry {index} ({name}): {reason}")))
                    }
                    Delivered::Soft(_) if st.soft_errors >= max_soft => (
                        None,
                        Some(format!("soft error budget of {max_soft} exceeded at entry {index}")),
                    ),
                    Delivered::Soft(reason) => {
                        st.soft_errors += 1;
                        (Some(BatchItemResult::soft_error(index, name, reason)), None)
                    }
                };
                if let Some(r) = result {
                    st.slots[index] = Some(r);
                    st.resolved += 1;
                    if st.deadlines[index].take().is_some() {
                        st.pending_remote -= 1;
                        if st.pending_remote == 0 {
                            self.ctx.metrics.record(Event::RxWait(exec.created.elapsed()));
                        }
                    }
                }
                abort
            }
        };
        match abort_reason {
            Some(reason) => self.abort(exec, reason),
            None => exec.emit_notify.notify_one(),
        }
    }

    /// Terminal failure: state is released and late frames are dropped.
    pub fn abort(&self, exec: &Arc<Execution>, reason: String) {
        {
            let mut st = exec.state.lock();
            if st.outcome != Outcome::Live {
                return;
            }
            st.outcome = Outcome::Aborted(reason.clone());
            if st.pending_remote > 0 {
                st.pending_remote = 0;
                self.ctx.metrics.record(Event::RxWait(exec.created.elapsed()));
            }
            st.deadlines.iter_mut().for_each(|d| *d = None);
            st.slots.iter_mut().for_each(|s| *s = None);
        }
        self.ctx.metrics.record(Event::HardError);
        tracing::debug!(exec = %exec.id, %reason, "execution aborted");
        self.registry.lock().remove(&exec.id);
        {
            let mut t = self.tombstones.lock();
            t.push_back((exec.id, reason));
            while t.len() > TOMBSTONES {
                t.pop_front();
            }
        }
        exec.emit_notify.notify_one();
        exec.driver_notify.notify_one();
    }

    fn finish(&self, exec: &Arc<Execution>) {
        exec.state.lock().outcome = Outcome::Done;
        self.registry.lock().remove(&exec.id);
        exec.driver_notify.notify_one();
    }

    fn record_emitted(&self, exec: &Execution, r: &BatchItemResult) {
        let m = &self.ctx.metrics;
        m.record(Event::WorkItems(1));
        match r.status {
            ItemStatus::SoftError => m.record(Event::SoftError),
            ItemStatus::Ok => {
                let bytes = r.payload.len() as u64;
                if exec.request.entries[r.index].is_member() {
                    m.record(Event::DeliveredShardMember { bytes });
                } else {
                    m.record(Event::DeliveredObject { bytes });
                }
            }
        }
    }

    /// Claims the execution for the connecting client.
    pub fn attach(&self, id: ExecutionId) -> Result<Arc<Execution>, EmitError> {
        let exec = self.registry.lock().get(&id).cloned();
        let Some(exec) = exec else {
            let t = self.tombstones.lock();
            return Err(match t.iter().rev().find(|(i, _)| *i == id) {
                Some((_, reason)) => EmitError::Aborted(reason.clone()),
                None => EmitError::Unknown,
            });
        };
        let mut st = exec.state.lock();
        if st.client_attached {
            return Err(EmitError::AlreadyAttached);
        }
        st.client_attached = true;
        drop(st);
        Ok(exec)
    }

    async fn next_step(&self, exec: &Execution) -> Step {
        loop {
            {
                let mut st = exec.state.lock();
                if let Outcome::Aborted(r) = &st.outcome {
                    return Step::Aborted(r.clone());
                }
                if st.next_emit == st.slots.len() {
                    return Step::Finished;
                }
                let i = st.next_emit;
                if let Some(r) = st.slots[i].take() {
                    st.next_emit += 1;
                    return Step::Entry(r);
                }
            }
            exec.emit_notify.notified().await;
        }
    }

    fn encode(&self, exec: &Execution, enc: &mut TarEncoder, r: BatchItemResult) -> Result<Vec<Bytes>, String> {
        self.record_emitted(exec, &r);
        let e = match r.status {
            ItemStatus::Ok => enc.entry(&r.name, r.payload),
            ItemStatus::SoftError => enc.placeholder(&r.name, r.error_reason.as_deref().unwrap_or("soft_error")),
        }
        .map_err(|e| format!("encoding entry {}: {e}", r.index))?;
        Ok(e.into_chunks().filter(|b| !b.is_empty()).collect())
    }

    /// Produces the response for an attached execution, honoring `strm`.
    pub async fn emit(self: &Arc<Self>, exec: Arc<Execution>) -> Result<Emission, EmitError> {
        if exec.request.strm {
            self.emit_streaming(exec).await
        } else {
            self.emit_buffered(&exec).await.map(Emission::Buffered)
        }
    }

    async fn emit_streaming(self: &Arc<Self>, exec: Arc<Execution>) -> Result<Emission, EmitError> {
        let mut enc = TarEncoder::new();
        let mut guard = DisconnectGuard {
            dt: self,
            exec: &exec,
            armed: true,
        };
        let first = match self.next_step(&exec).await {
            Step::Aborted(r) => {
                guard.armed = false;
                return Err(EmitError::Aborted(r));
            }
            Step::Entry(r) => match self.encode(&exec, &mut enc, r) {
                Ok(c) => c,
                Err(reason) => {
                    guard.armed = false;
                    self.abort(&exec, reason.clone());
                    return Err(EmitError::Aborted(reason));
                }
            },
            Step::Finished => unreachable!("requests have at least one entry"),
        };
        guard.armed = false;
        drop(guard);
        let (tx, rx) = mpsc::channel(STREAM_QUEUE);
        let me = self.clone();
        tokio::spawn(async move {
            loop {
                let step = tokio::select! {
                    s = me.next_step(&exec) => s,
                    _ = tx.closed() => {
                        me.abort(&exec, "client disconnected".into());
                        return;
                    }
                };
                let chunks = match step {
                    Step::Entry(r) => match me.encode(&exec, &mut enc, r) {
                        Ok(c) => c,
                        Err(reason) => {
                            me.abort(&exec, reason.clone());
                            let _ = tx.send(Err(io::Error::other(reason))).await;
                            return;
                        }
                    },
                    Step::Finished => {
                        let tail = enc.finalize().expect("finalize once");
                        let _ = tx.send(Ok(tail)).await;
                        me.finish(&exec);
                        return;
                    }
                    Step::Aborted(reason) => {
                        let _ = tx.send(Err(io::Error::other(reason))).await;
                        return;
                    }
                };
                for c in chunks {
                    if tx.send(Ok(c)).await.is_err() {
                        me.abort(&exec, "client disconnected".into());
                        return;
                    }
                }
            }
        });
        Ok(Emission::Stream { first, rest: rx })
    }

    async fn emit_buffered(&self, exec: &Arc<Execution>) -> Result<Bytes, EmitError> {
        let mut guard = DisconnectGuard {
            dt: self,
            exec,
            armed: true,
        };
        let results = loop {
            {
                let mut st = exec.state.lock();
                if let Outcome::Aborted(r) = &st.outcome {
                    guard.armed = false;
                    return Err(EmitError::Aborted(r.clone()));
                }
                if st.resolved == st.slots.len() {
                    st.next_emit = st.slots.len();
                    st.outcome = Outcome::Done;
                    break std::mem::take(&mut st.slots);
                }
            }
            exec.emit_notify.notified().await;
        };
        guard.armed = false;
        let mut enc = TarEncoder::new();
        let mut out = Vec::new();
        for r in results.into_iter().flatten() {
            match self.encode(exec, &mut enc, r) {
                Ok(chunks) => chunks.iter().for_each(|c| out.extend_from_slice(c)),
                Err(reason) => {
                    self.abort(exec, reason.clone());
                    return Err(EmitError::Aborted(reason));
                }
            }
        }
        out.extend_from_slice(&enc.finalize().expect("finalize once"));
        self.finish(exec);
        Ok(Bytes::from(out))
    }

    /// Watches remote deadlines and the client-connect window until the
    /// request leaves the live state.
    async fn drive(self: Arc<Self>, exec: Arc<Execution>) {
        let client_deadline = exec.created + self.ctx.tuning.client_wait_timeout();
        loop {
            let wake = {
                let st = exec.state.lock();
                if st.outcome != Outcome::Live {
                    return;
                }
                let remote = st.deadlines.iter().flatten().min().copied();
                let client = (!st.client_attached).then_some(client_deadline);
                match (remote, client) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                }
            };
            match wake {
                Some(at) => {
                    tokio::select! {
                        _ = tokio::time::sleep_until(at.into()) => self.on_tick(&exec),
                        _ = exec.driver_notify.notified() => {}
                    }
                }
                None => exec.driver_notify.notified().await,
            }
        }
    }

    fn on_tick(self: &Arc<Self>, exec: &Arc<Execution>) {
        let now = Instant::now();
        let client_deadline = exec.created + self.ctx.tuning.client_wait_timeout();
        let mut pulls = Vec::new();
        let mut expired_final = Vec::new();
        let mut last_round = false;
        {
            let mut st = exec.state.lock();
            if st.outcome != Outcome::Live {
                return;
            }
            if !st.client_attached && now >= client_deadline {
                drop(st);
                self.abort(exec, "client did not connect".into());
                return;
            }
            let expired: Vec<usize> = st
                .deadlines
                .iter()
                .enumerate()
                .filter(|(_, d)| d.is_some_and(|d| d <= now))
                .map(|(i, _)| i)
                .collect();
            if expired.is_empty() {
                return;
            }
            if st.recovery_rounds < self.ctx.tuning.gfn_attempts {
                st.recovery_rounds += 1;
                last_round = st.recovery_rounds == self.ctx.tuning.gfn_attempts;
                let rearm = now + self.ctx.tuning.rxwait_timeout();
                for &i in &expired {
                    st.deadlines[i] = Some(rearm);
                }
                pulls = expired;
            } else {
                expired_final = expired;
            }
        }
        if !pulls.is_empty() {
            self.ctx.metrics.record(Event::RecoveryAttempt);
            for i in pulls {
                tokio::spawn(self.clone().recover(exec.clone(), i, last_round));
            }
        }
        for i in expired_final {
            if !exec.is_live() {
                break;
            }
            self.ctx.metrics.record(Event::RecoveryFailure);
            self.accept(exec, i, Delivered::Soft("timeout".into()));
        }
    }

    /// Pulls one entry from its owner; a final round also asks every other
    /// target and prefers any ok answer.
    async fn recover(self: Arc<Self>, exec: Arc<Execution>, index: usize, broadcast: bool) {
        let map = self.ctx.map();
        let owner = exec.owners[index].clone();
        let mut targets: Vec<NodeInfo> = map.target(&owner).cloned().into_iter().collect();
        if broadcast {
            targets.extend(map.targets.iter().filter(|t| t.id != owner).cloned());
        }
        let r = &exec.request.entries[index];
        let answers = futures::future::join_all(
            targets.iter().map(|t| self.pull(t, exec.id, index, r)),
        )
        .await;
        let mut owner_answer = None;
        for (t, a) in targets.iter().zip(answers) {
            match a {
                Some(f) if f.status == ItemStatus::Ok => {
                    self.accept(&exec, index, f.into());
                    return;
                }
                Some(f) if t.id == owner => owner_answer = Some(f),
                _ => {}
            }
        }
        if let Some(f) = owner_answer {
            self.accept(&exec, index, f.into());
        }
    }

    async fn pull(&self, target: &NodeInfo, exec: ExecutionId, index: usize, r: &ObjectRef) -> Option<DeliveryFrame> {
        let mut url = reqwest::Url::parse(&format!("http://{}/v1/pull", target.endpoint)).ok()?;
        {
            let mut q = url.query_pairs_mut();
            q.append_pair("exec", &exec.to_string())
                .append_pair("idx", &index.to_string())
                .append_pair("bucket", &r.bucket)
                .append_pair("objname", &r.objname);
            if let Some(a) = &r.archpath {
                q.append_pair("archpath", a);
            }
        }
        let resp = self
            .ctx
            .http
            .get(url)
            .timeout(self.ctx.tuning.rxwait_timeout())
            .send()
            .await
            .ok()?;
        if !resp.status().is_success() {
            return None;
        }
        let body = resp.bytes().await.ok()?;
        match Frame::decode(&body) {
            Ok(Frame::Delivery(f)) if f.exec_id == exec && f.index as usize == index => Some(f),
            _ => None,
        }
    }

    /// Counts in-flight remote indices; used by tests and debug output.
    pub fn pending_remote(&self, id: ExecutionId) -> Option<usize> {
        let exec = self.registry.lock().get(&id).cloned()?;
        let n = exec.state.lock().pending_remote;
        Some(n)
    }
}

impl Execution {
    fn is_live(&self) -> bool {
        self.state.lock().outcome == Outcome::Live
    }

    pub fn age(&self) -> Duration {
        self.created.elapsed()
    }
}
