//! Storage nodes for the batchstore object store: targets that hold objects
//! and serve GetBatch, and the stateless gateway in front of them.

pub mod client;
pub mod context;
pub mod dt;
pub mod harness;
pub mod http;
pub mod loadgen;
pub mod node;
pub mod pressure;
pub mod proxy;
pub mod sender;
pub mod store;
pub mod transport;
