//! Record types exchanged between the crawler, detectors and the report, with
//! their JSON Lines encoding.

use std::io::{BufRead, Write};
use std::net::{Ipv4Addr, SocketAddrV4};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::addr::{AddrCategory, Asn, ReservedRange};
use crate::dht::{NodeId, PeerIdentity};
use crate::probe::{StunOutcome, TtlResult};

#[derive(Debug, Error)]
pub enum RecordError {
    #[error("line {line}: {source}")]
    Json {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reads one JSON value per non-blank line.
pub fn read_jsonl<T: DeserializeOwned, R: BufRead>(r: R) -> Result<Vec<T>, RecordError> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|source| RecordError::Json { line: i + 1, source })?);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize, W: Write>(mut w: W, items: &[T]) -> Result<(), RecordError> {
    for item in items {
        let line = serde_json::to_string(item).map_err(|source| RecordError::Json { line: 0, source })?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// One leakage observation: `reporter` told the crawler about `reported`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PeerRecord {
    pub ts: f64,
    pub reporter_ip: Ipv4Addr,
    pub reporter_port: u16,
    pub reporter_nodeid_hex: NodeId,
    pub reported_ip: Ipv4Addr,
    pub reported_port: u16,
    pub reported_nodeid_hex: NodeId,
    pub responded_ping: bool,
}

impl PeerRecord {
    pub fn new(ts: f64, reporter: PeerIdentity, reported: PeerIdentity, responded_ping: bool) -> Self {
        PeerRecord {
            ts,
            reporter_ip: *reporter.endpoint.ip(),
            reporter_port: reporter.endpoint.port(),
            reporter_nodeid_hex: reporter.nodeid,
            reported_ip: *reported.endpoint.ip(),
            reported_port: reported.endpoint.port(),
            reported_nodeid_hex: reported.nodeid,
            responded_ping,
        }
    }

    pub fn reporter(&self) -> PeerIdentity {
        PeerIdentity {
            endpoint: SocketAddrV4::new(self.reporter_ip, self.reporter_port),
            nodeid: self.reporter_nodeid_hex,
        }
    }

    pub fn reported(&self) -> PeerIdentity {
        PeerIdentity {
            endpoint: SocketAddrV4::new(self.reported_ip, self.reported_port),
            nodeid: self.reported_nodeid_hex,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    CgnPositive,
    Negative,
    Insufficient,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Access {
    Cellular,
    NonCellular,
}

/// AS-level address assignment class of a cellular network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CellularClass {
    ExclusivelyInternal,
    ExclusivelyPublic,
    Mixed,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryCounts {
    pub private: usize,
    pub unrouted: usize,
    pub routed_match: usize,
    pub routed_mismatch: usize,
}

impl CategoryCounts {
    pub fn add(&mut self, c: AddrCategory) {
        match c {
            AddrCategory::Private(_) => self.private += 1,
            AddrCategory::Unrouted => self.unrouted += 1,
            AddrCategory::RoutedMatch => self.routed_match += 1,
            AddrCategory::RoutedMismatch => self.routed_mismatch += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.private + self.unrouted + self.routed_match + self.routed_mismatch
    }

    pub fn translated(&self) -> usize {
        self.total() - self.routed_match
    }
}

/// Per-method evidence, tagged by `method` in the JSON form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "lowercase")]
pub enum Evidence {
    Dht {
        pub_ips: usize,
        int_ips: usize,
        range: Option<ReservedRange>,
        /// Every range with a qualifying cluster.
        ranges: Vec<ReservedRange>,
        queried_peers: usize,
    },
    Session {
        access: Access,
        class: Option<CellularClass>,
        /// Cellular: sessions considered; non-cellular: CGN candidates.
        n: usize,
        distinct24: usize,
        sessions: usize,
        categories: CategoryCounts,
        /// Ranges of translated addresses: reserved tags or routable /8
        /// blocks.
        internal_ranges: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsVerdict {
    pub asn: Asn,
    pub verdict: Verdict,
    #[serde(flatten)]
    pub evidence: Evidence,
}

impl AsVerdict {
    pub fn method(&self) -> &'static str {
        match &self.evidence {
            Evidence::Dht { .. } => "dht",
            Evidence::Session { access: Access::Cellular, .. } => "session-cellular",
            Evidence::Session { access: Access::NonCellular, .. } => "session-noncellular",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowObservation {
    pub index: u32,
    pub local_port: u16,
    pub observed_ext_ip: Ipv4Addr,
    pub observed_ext_port: u16,
}

/// One measurement session from a client device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub asn: Asn,
    pub access: Access,
    pub ip_dev: Ipv4Addr,
    #[serde(default)]
    pub ip_cpe: Option<Ipv4Addr>,
    pub ip_pub: Ipv4Addr,
    #[serde(default)]
    pub flows: Vec<FlowObservation>,
    #[serde(default)]
    pub stun: Option<StunOutcome>,
    #[serde(default)]
    pub ttl_result: Option<TtlResult>,
    pub ts: f64,
    /// Set at ingest for sessions to ignore (VPN, femtocell).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub exclude: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cpe_model: Option<String>,
}

impl SessionRecord {
    pub fn new(session_id: impl Into<String>, asn: Asn, access: Access, ip_dev: Ipv4Addr, ip_pub: Ipv4Addr) -> Self {
        SessionRecord {
            session_id: session_id.into(),
            asn,
            access,
            ip_dev,
            ip_cpe: None,
            ip_pub,
            flows: Vec::new(),
            stun: None,
            ttl_result: None,
            ts: 0.0,
            exclude: false,
            cpe_model: None,
        }
    }

    /// The flows as a (local, observed) port trace.
    pub fn port_trace(&self) -> Vec<(u16, u16)> {
        let mut f = self.flows.clone();
        f.sort_by_key(|x| x.index);
        f.iter().map(|x| (x.local_port, x.observed_ext_port)).collect()
    }
}
