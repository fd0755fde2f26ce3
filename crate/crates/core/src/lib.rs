//! Core building blocks of the batchstore object store.
//!
//! Everything in this crate is pure logic with no networking: the GetBatch
//! request model, rendezvous placement, the ordered TAR encoder, the peer wire
//! format, admission decisions, counters, cluster configuration and latency
//! statistics. The `batchstore` server crate wires these into running nodes.

pub mod admission;
pub mod config;
pub mod frame;
pub mod metrics;
pub mod model;
pub mod placement;
pub mod stats;
pub mod tar;

pub use model::{BatchItemResult, BatchRequest, ExecutionId, ItemStatus, Mime, ObjectRef};
pub use placement::{ClusterMap, NodeId, NodeInfo, Role};
