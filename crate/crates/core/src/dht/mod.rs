//! BitTorrent DHT wire format and the leakage crawler.

pub mod bencode;
mod crawl;
mod krpc;
mod node;
pub mod simnet;
pub mod transport;

use thiserror::Error;

pub use crawl::{crawl, CrawlConfig, CrawlStats};
pub use krpc::{Body, KrpcMessage, Method};
pub use node::{xor_distance, CompactNodeInfo, Distance, NodeId, PeerIdentity, COMPACT_NODE_LEN, NODE_ID_LEN};

#[derive(Debug, Error)]
pub enum DhtError {
    #[error(transparent)]
    Decode(#[from] bencode::DecodeError),
    #[error("malformed KRPC message: {0}")]
    Malformed(String),
    #[error("compact node list length {0} is not a multiple of 26")]
    NodeListLength(usize),
    #[error("bad node id `{0}`")]
    BadNodeId(String),
    #[error("transport: {0}")]
    Io(#[from] std::io::Error),
    #[error("simulation: {0}")]
    Sim(#[from] crate::sim::SimError),
    #[error("simulated network: {0}")]
    Setup(String),
}
