//! Deterministic virtual network of hosts, routers and NAT devices.
//!
//! Hops form a tree: every hop has an optional parent toward the core, and
//! hosts attach either below a hop or directly to the core. Each NAT opens a
//! new address realm, so the same internal address may exist behind many
//! NATs. Time is virtual and only moves forward; mapping expiry is applied
//! before any packet sent at or after the expiry instant.

mod config;
pub mod file;
mod nat;
mod topology;

use std::fmt;
use std::net::SocketAddrV4;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use config::{Hairpin, MappingType, NatConfig, Pooling, PortAlloc};
pub use nat::{paired_index, AllocationFailure, InboundDrop, MappingEntry, MappingKey, NatDevice, PORT_MAX, PORT_MIN};
pub use topology::{DeliveryResult, HopId, HopKind, HostId, Topology, TopologyBuilder, TraceRecord, Verdict};

/// Virtual time in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SimTime(pub u64);

impl SimTime {
    pub const fn from_secs(s: u64) -> Self {
        SimTime(s * 1000)
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1000.0
    }

    pub fn plus_secs(self, s: u64) -> Self {
        SimTime(self.0 + s * 1000)
    }
}

impl fmt::Display for SimTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{:03}", self.0 / 1000, self.0 % 1000)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Proto {
    Udp,
    Tcp,
}

impl fmt::Display for Proto {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Proto::Udp => "udp",
            Proto::Tcp => "tcp",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Packet {
    pub proto: Proto,
    pub src: SocketAddrV4,
    pub dst: SocketAddrV4,
    pub ttl: u8,
    pub payload: Vec<u8>,
}

impl Packet {
    pub fn udp(src: SocketAddrV4, dst: SocketAddrV4, ttl: u8) -> Self {
        Packet { proto: Proto::Udp, src, dst, ttl, payload: Vec::new() }
    }

    pub fn tcp(src: SocketAddrV4, dst: SocketAddrV4, ttl: u8) -> Self {
        Packet { proto: Proto::Tcp, src, dst, ttl, payload: Vec::new() }
    }

    pub fn with_payload(mut self, payload: impl Into<Vec<u8>>) -> Self {
        self.payload = payload.into();
        self
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown host {0}")]
    UnknownHost(String),
    #[error("unknown hop {0}")]
    UnknownHop(u32),
    #[error("time went backwards: {at} < {clock}")]
    TimeWentBackwards { at: SimTime, clock: SimTime },
    #[error("packet ttl must be at least 1")]
    ZeroTtl,
    #[error("source {src} is not an address of host {host}")]
    ForeignSource { host: String, src: SocketAddrV4 },
    #[error("allocation failed at hop {hop}: {source}")]
    Allocation {
        hop: HopId,
        #[source]
        source: AllocationFailure,
    },
    #[error("invalid NAT config: {0}")]
    Config(String),
    #[error("invalid topology: {0}")]
    Topology(String),
}
