//! Persistent peer connections carrying framed messages.
//!
//! The client side is a pool keyed by destination address holding up to
//! `max_conns_per_peer` long-lived TCP streams. Writes on one stream are
//! serialized by its mutex, so frames on a connection arrive in send order.
//! The server side reads frames off each accepted stream and hands them to a
//! [`FrameHandler`] in arrival order.

use std::collections::HashMap;
use std::io;
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::{Duration, Instant};

use batchstore_core::frame::{Frame, FrameError, FrameHeader, HEADER_LEN};
use bytes::{BufMut, Bytes, BytesMut};
use parking_lot::Mutex;
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{watch, Mutex as AsyncMutex, OwnedMutexGuard};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connect to {addr}: {source}")]
    Connect { addr: String, source: io::Error },
    #[error("connect to {0} timed out")]
    ConnectTimeout(String),
    #[error("send to {addr}: {source}")]
    Send { addr: String, source: io::Error },
}

struct Conn {
    stream: Arc<AsyncMutex<TcpStream>>,
    last_used: Mutex<Instant>,
}

#[derive(Default)]
struct Slot {
    conns: Vec<Arc<Conn>>,
    /// Connections being established, counted against the cap.
    connecting: usize,
    max_seen: usize,
}

pub struct PeerPool {
    slots: Mutex<HashMap<String, Slot>>,
    max_per_peer: usize,
    connect_timeout: Duration,
    idle_timeout: Duration,
}

struct Reserved<'a> {
    pool: &'a PeerPool,
    addr: &'a str,
}

impl Drop for Reserved<'_> {
    fn drop(&mut self) {
        if let Some(slot) = self.pool.slots.lock().get_mut(self.addr) {
            slot.connecting -= 1;
        }
    }
}

/// Drops a connection from the pool unless the write it guards completed, so
/// a cancelled send never leaves a half-written frame on a pooled stream.
struct InFlight<'a> {
    pool: &'a PeerPool,
    addr: &'a str,
    conn: Arc<Conn>,
    done: bool,
}

impl Drop for InFlight<'_> {
    fn drop(&mut self) {
        if self.done {
            *self.conn.last_used.lock() = Instant::now();
        } else {
            self.pool.discard(self.addr, &self.conn);
        }
    }
}

enum Pick {
    Idle(Arc<Conn>, OwnedMutexGuard<TcpStream>),
    Wait(Arc<Conn>),
    Dial,
}

/// A stream whose peer has closed reads as EOF (or errors) without blocking.
fn peer_closed(s: &TcpStream) -> bool {
    let mut b = [0u8; 1];
    match s.try_read(&mut b) {
        Ok(_) => true,
        Err(e) => e.kind() != io::ErrorKind::WouldBlock,
    }
}

impl PeerPool {
    pub fn new(max_per_peer: usize, connect_timeout: Duration, idle_timeout: Duration) -> Self {
        PeerPool {
            slots: Mutex::new(HashMap::new()),
            max_per_peer: max_per_peer.max(1),
            connect_timeout,
            idle_timeout,
        }
    }

    pub fn connection_count(&self, addr: &str) -> usize {
        self.slots.lock().get(addr).map_or(0, |s| s.conns.len())
    }

    /// Highest number of simultaneous connections ever held to `addr`.
    pub fn max_connections_seen(&self, addr: &str) -> usize {
        self.slots.lock().get(addr).map_or(0, |s| s.max_seen)
    }

    pub fn total_connections(&self) -> usize {
        self.slots.lock().values().map(|s| s.conns.len()).sum()
    }

    fn pick(&self, addr: &str) -> Pick {
        let mut slots = self.slots.lock();
        let slot = slots.entry(addr.to_string()).or_default();
        let mut dead = Vec::new();
        let mut found = None;
        for (i, c) in slot.conns.iter().enumerate() {
            if let Ok(g) = c.stream.clone().try_lock_owned() {
                if peer_closed(&g) {
                    dead.push(i);
                    continue;
                }
                found = Some(Pick::Idle(c.clone(), g));
                break;
            }
        }
        for i in dead.into_iter().rev() {
            slot.conns.remove(i);
        }
        if let Some(p) = found {
            return p;
        }
        if slot.conns.len() + slot.connecting < self.max_per_peer {
            slot.connecting += 1;
            return Pick::Dial;
        }
        match slot.conns.first() {
            Some(c) => Pick::Wait(c.clone()),
            // every slot is mid-dial; dial one more only after those resolve
            None => {
                slot.connecting += 1;
                Pick::Dial
            }
        }
    }

    async fn dial(&self, addr: &str) -> Result<(Arc<Conn>, OwnedMutexGuard<TcpStream>), TransportError> {
        // the caller reserved a `connecting` slot; release it however this ends
        let _reserved = Reserved { pool: self, addr };
        let stream = match tokio::time::timeout(self.connect_timeout, TcpStream::connect(addr)).await {
            Err(_) => return Err(TransportError::ConnectTimeout(addr.to_string())),
            Ok(Err(source)) => {
                return Err(TransportError::Connect {
                    addr: addr.to_string(),
                    source,
                })
            }
            Ok(Ok(s)) => s,
        };
        let _ = stream.set_nodelay(true);
        let conn = Arc::new(Conn {
            stream: Arc::new(AsyncMutex::new(stream)),
            last_used: Mutex::new(Instant::now()),
        });
        let guard = conn.stream.clone().try_lock_owned().expect("fresh connection is unlocked");
        let mut slots = self.slots.lock();
        let slot = slots.entry(addr.to_string()).or_default();
        slot.conns.push(conn.clone());
        slot.max_seen = slot.max_seen.max(slot.conns.len());
        Ok((conn, guard))
    }

    fn discard(&self, addr: &str, conn: &Arc<Conn>) {
        if let Some(slot) = self.slots.lock().get_mut(addr) {
            slot.conns.retain(|c| !Arc::ptr_eq(c, conn));
        }
    }

    async fn checkout(&self, addr: &str) -> Result<(Arc<Conn>, OwnedMutexGuard<TcpStream>), TransportError> {
        match self.pick(addr) {
            Pick::Idle(c, g) => Ok((c, g)),
            Pick::Dial => self.dial(addr).await,
            Pick::Wait(c) => {
                let g = c.stream.clone().lock_owned().await;
                Ok((c, g))
            }
        }
    }

    /// Writes one frame to `addr` on a pooled connection.
    pub async fn send_frame(&self, addr: &str, frame: &Frame) -> Result<(), TransportError> {
        let (head, payload) = frame.encode_parts();
        self.send_parts(addr, head, payload).await
    }

    pub async fn send_parts(&self, addr: &str, head: Bytes, payload: Bytes) -> Result<(), TransportError> {
        let (conn, mut stream) = self.checkout(addr).await?;
        let mut flight = InFlight {
            pool: self,
            addr,
            conn,
            done: false,
        };
        let res = write_frame(&mut stream, &head, &payload).await;
        flight.done = res.is_ok();
        drop(stream);
        drop(flight);
        res.map_err(|source| TransportError::Send {
            addr: addr.to_string(),
            source,
        })
    }

    /// Writes one frame on a brand-new connection that is then kept in the
    /// pool if there is room.
    pub async fn send_frame_fresh(&self, addr: &str, frame: &Frame) -> Result<(), TransportError> {
        self.slots.lock().entry(addr.to_string()).or_default().connecting += 1;
        let (conn, mut stream) = self.dial(addr).await?;
        let (head, payload) = frame.encode_parts();
        let mut flight = InFlight {
            pool: self,
            addr,
            conn: conn.clone(),
            done: false,
        };
        let res = write_frame(&mut stream, &head, &payload).await;
        flight.done = res.is_ok();
        drop(stream);
        drop(flight);
        let over_cap = self
            .slots
            .lock()
            .get(addr)
            .is_some_and(|s| s.conns.len() > self.max_per_peer);
        if over_cap {
            self.discard(addr, &conn);
        }
        res.map_err(|source| TransportError::Send {
            addr: addr.to_string(),
            source,
        })
    }

    /// Closes connections idle longer than the idle timeout as of `now`.
    pub fn reclaim_idle(&self, now: Instant) -> usize {
        let mut closed = 0;
        let mut slots = self.slots.lock();
        for slot in slots.values_mut() {
            slot.conns.retain(|c| {
                let idle = now.saturating_duration_since(*c.last_used.lock());
                let busy = c.stream.try_lock().is_err();
                let keep = busy || idle <= self.idle_timeout;
                if !keep {
                    closed += 1;
                }
                keep
            });
        }
        slots.retain(|_, s| !s.conns.is_empty() || s.connecting > 0);
        closed
    }
}

async fn write_frame(s: &mut TcpStream, head: &[u8], payload: &[u8]) -> io::Result<()> {
    s.write_all(head).await?;
    if !payload.is_empty() {
        s.write_all(payload).await?;
    }
    s.flush().await
}

/// Receiver-side dispatch. Called from the connection's read loop, so it must
/// not block for long.
pub trait FrameHandler: Send + Sync + 'static {
    fn on_frame(&self, frame: Frame, from: SocketAddr);
    fn on_bad_frame(&self, _err: &FrameError, _from: SocketAddr) {}
}

async fn read_frame(s: &mut TcpStream) -> io::Result<Option<Result<Frame, FrameError>>> {
    let mut hb = [0u8; HEADER_LEN];
    match s.read_exact(&mut hb).await {
        Ok(_) => {}
        Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let h = match FrameHeader::parse(&hb) {
        Ok(h) => h,
        Err(e) => return Ok(Some(Err(e))),
    };
    let mut reason = vec![0u8; h.reason_len as usize];
    s.read_exact(&mut reason).await?;
    let len = h.payload_len as usize;
    let mut payload = BytesMut::with_capacity(len);
    // read_buf fills spare capacity directly, skipping a zeroing pass
    while payload.len() < len {
        let want = len - payload.len();
        if s.read_buf(&mut (&mut payload).limit(want)).await? == 0 {
            return Err(io::ErrorKind::UnexpectedEof.into());
        }
    }
    Ok(Some(Frame::from_parts(h, &reason, payload.freeze())))
}

/// Accepts peer connections until `shutdown` flips to true; open connections
/// are dropped at that point too.
pub async fn serve_peers(
    listener: TcpListener,
    handler: Arc<dyn FrameHandler>,
    mut shutdown: watch::Receiver<bool>,
) {
    let stopper = shutdown.clone();
    loop {
        tokio::select! {
            _ = shutdown.wait_for(|s| *s) => return,
            accepted = listener.accept() => {
                let Ok((mut stream, from)) = accepted else { continue };
                let _ = stream.set_nodelay(true);
                let handler = handler.clone();
                let mut stop = stopper.clone();
                tokio::spawn(async move {
                    loop {
                        let next = tokio::select! {
                            _ = stop.wait_for(|s| *s) => return,
                            f = read_frame(&mut stream) => f,
                        };
                        match next {
                            Ok(Some(Ok(frame))) => handler.on_frame(frame, from),
                            Ok(Some(Err(e))) => {
                                // framing is lost; drop the connection
                                handler.on_bad_frame(&e, from);
                                return;
                            }
                            Ok(None) | Err(_) => return,
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use batchstore_core::frame::DeliveryFrame;
    use batchstore_core::model::ExecutionId;

    struct Collect(Mutex<Vec<Frame>>, tokio::sync::Notify);

    impl FrameHandler for Collect {
        fn on_frame(&self, frame: Frame, _from: SocketAddr) {
            self.0.lock().push(frame);
            self.1.notify_waiters();
        }
    }

    async fn server() -> (String, Arc<Collect>, watch::Sender<bool>) {
        let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = l.local_addr().unwrap().to_string();
        let c = Arc::new(Collect(Mutex::new(Vec::new()), tokio::sync::Notify::new()));
        let (tx, rx) = watch::channel(false);
        tokio::spawn(serve_peers(l, c.clone(), rx));
        (addr, c, tx)
    }

    async fn wait_for(c: &Collect, n: usize) {
        tokio::time::timeout(Duration::from_secs(10), async {
            while c.0.lock().len() < n {
                tokio::time::sleep(Duration::from_millis(2)).await;
            }
        })
        .await
        .expect("frames arrive");
    }

    fn frame(i: u32, len: usize) -> Frame {
        Frame::Delivery(DeliveryFrame::ok(ExecutionId(9), i, Bytes::from(vec![i as u8; len])))
    }

    #[tokio::test]
    async fn sequential_frames_arrive_in_order() {
        let (addr, c, _stop) = server().await;
        let pool = PeerPool::new(8, Duration::from_secs(2), Duration::from_secs(60));
        for i in 0..50 {
            pool.send_frame(&addr, &frame(i, (i as usize) * 37)).await.unwrap();
        }
        wait_for(&c, 50).await;
        let got = c.0.lock().clone();
        for (i, f) in got.iter().enumerate() {
            assert_eq!(f, &frame(i as u32, i * 37));
        }
        assert_eq!(pool.connection_count(&addr), 1);
    }

    #[tokio::test]
    async fn reclaim_idle_threshold() {
        let (addr, c, _stop) = server().await;
        let pool = PeerPool::new(8, Duration::from_secs(2), Duration::from_secs(60));
        pool.send_frame(&addr, &frame(0, 1)).await.unwrap();
        wait_for(&c, 1).await;
        let now = Instant::now();
        assert_eq!(pool.reclaim_idle(now), 0);
        assert_eq!(pool.reclaim_idle(now + Duration::from_secs(61)), 1);
        assert_eq!(pool.connection_count(&addr), 0);
        // destination reused after reclaim: a new connection is dialed
        pool.send_frame(&addr, &frame(1, 3)).await.unwrap();
        wait_for(&c, 2).await;
        assert_eq!(pool.connection_count(&addr), 1);
    }

    #[tokio::test]
    async fn send_to_closed_destination_fails_fast() {
        let l = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = l.local_addr().unwrap().to_string();
        drop(l);
        let pool = PeerPool::new(8, Duration::from_secs(2), Duration::from_secs(60));
        let started = Instant::now();
        assert!(pool.send_frame(&addr, &frame(0, 1)).await.is_err());
        assert!(started.elapsed() < Duration::from_secs(2));
    }

    #[tokio::test]
    async fn stale_connection_after_shutdown_is_replaced() {
        let (addr, c, stop) = server().await;
        let pool = PeerPool::new(8, Duration::from_secs(2), Duration::from_secs(60));
        pool.send_frame(&addr, &frame(0, 1)).await.unwrap();
        wait_for(&c, 1).await;
        stop.send(true).unwrap();
        tokio::time::sleep(Duration::from_millis(50)).await;
        // listener gone too: the dead pooled stream is detected and dialing fails
        let res = pool.send_frame(&addr, &frame(1, 1)).await;
        assert!(res.is_err());
        assert_eq!(pool.connection_count(&addr), 0);
    }
}
