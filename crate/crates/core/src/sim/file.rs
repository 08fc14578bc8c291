//! TOML topology descriptions with an optional packet script.
//!
//! ```toml
//! seed = 7
//!
//! [[hop]]            # hop 1, nearest the client
//! kind = "nat"
//! [hop.nat]
//! mapping_type = "port_restricted"
//! port_alloc = "preserve"
//! pooling = "paired"
//! external_pool = ["100.64.0.2"]
//! udp_timeout = 60
//! tcp_timeout = 7200
//! hairpin = "off"
//! internal_range = "192.168.1.0/24"
//!
//! [[hop]]            # hop 2, parent of hop 1 by default
//! kind = "router"
//!
//! [[host]]
//! name = "client"
//! addresses = ["192.168.1.10"]
//! attach = 1         # omitted or 0 means the core
//!
//! [[send]]
//! at = 0.5
//! from = "client"
//! proto = "udp"
//! src = "192.168.1.10:5000"
//! dst = "198.51.100.1:3478"
//! ttl = 64
//! ```

use std::net::{Ipv4Addr, SocketAddrV4};

use serde::Deserialize;

use super::config::NatConfig;
use super::topology::{DeliveryResult, HopId, Topology, TopologyBuilder};
use super::{Packet, Proto, SimError, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HopKindSpec {
    Router,
    Nat,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HopSpec {
    pub id: Option<u32>,
    pub kind: HopKindSpec,
    /// Hop id toward the core; 0 is the core. Defaults to the next hop in
    /// the file, or the core for the last one.
    pub parent: Option<u32>,
    pub nat: Option<NatConfig>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HostSpec {
    pub name: String,
    pub addresses: Vec<Ipv4Addr>,
    #[serde(default)]
    pub attach: u32,
    pub role: Option<String>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SendSpec {
    /// Seconds; fractional values are rounded to milliseconds.
    pub at: f64,
    pub from: String,
    pub proto: Proto,
    pub src: SocketAddrV4,
    pub dst: SocketAddrV4,
    #[serde(default = "default_ttl")]
    pub ttl: u8,
    #[serde(default)]
    pub payload: String,
}

fn default_ttl() -> u8 {
    64
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopologyFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub hop: Vec<HopSpec>,
    #[serde(default)]
    pub host: Vec<HostSpec>,
    #[serde(default)]
    pub send: Vec<SendSpec>,
}

impl TopologyFile {
    pub fn parse(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Topology(e.to_string()))
    }

    /// Builds the network; `seed` overrides the seed in the file.
    pub fn build(&self, seed: Option<u64>) -> Result<Topology, SimError> {
        let mut b = TopologyBuilder::new(seed.unwrap_or(self.seed));
        let ids: Vec<u32> = self.hop.iter().enumerate().map(|(i, h)| h.id.unwrap_or(i as u32 + 1)).collect();
        for (i, h) in self.hop.iter().enumerate() {
            if ids[i] == 0 {
                return Err(SimError::Topology("hop id 0 is reserved for the core".into()));
            }
            let parent = match h.parent {
                Some(0) => None,
                Some(p) => Some(HopId(p)),
                None => ids.get(i + 1).map(|&p| HopId(p)),
            };
            let nat = match (h.kind, &h.nat) {
                (HopKindSpec::Nat, Some(cfg)) => Some(cfg.clone()),
                (HopKindSpec::Nat, None) => {
                    return Err(SimError::Topology(format!("hop {} is a nat without [hop.nat]", ids[i])))
                }
                (HopKindSpec::Router, Some(_)) => {
                    return Err(SimError::Topology(format!("router hop {} has a nat table", ids[i])))
                }
                (HopKindSpec::Router, None) => None,
            };
            b.hop_with_id(HopId(ids[i]), nat, parent);
        }
        for h in &self.host {
            let attach = (h.attach != 0).then_some(HopId(h.attach));
            b.host(&h.name, h.addresses.clone(), attach);
        }
        b.build()
    }

    /// Replays the packet script in order.
    pub fn run(&self, topo: &mut Topology) -> Result<Vec<DeliveryResult>, SimError> {
        self.send
            .iter()
            .map(|s| {
                let host = topo.host_id(&s.from).ok_or_else(|| SimError::UnknownHost(s.from.clone()))?;
                if !(s.at.is_finite() && s.at >= 0.0) {
                    return Err(SimError::Topology(format!("bad send time {}", s.at)));
                }
                let at = SimTime((s.at * 1000.0).round() as u64);
                let pkt = Packet {
                    proto: s.proto,
                    src: s.src,
                    dst: s.dst,
                    ttl: s.ttl,
                    payload: s.payload.as_bytes().to_vec(),
                };
                topo.send(host, pkt, at)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const NET: &str = r#"
seed = 7

[[hop]]
kind = "nat"
[hop.nat]
mapping_type = "port_restricted"
port_alloc = "random_chunk:4096"
pooling = "paired"
external_pool = ["100.64.0.2"]
udp_timeout = 60
tcp_timeout = 7200
hairpin = "off"
internal_range = "192.168.1.0/24"

[[hop]]
kind = "router"

[[host]]
name = "client"
addresses = ["192.168.1.10"]
attach = 1

[[host]]
name = "server"
addresses = ["198.51.100.1"]

[[send]]
at = 0.5
from = "client"
proto = "udp"
src = "192.168.1.10:5000"
dst = "198.51.100.1:3478"
ttl = 2

[[send]]
at = 1
from = "client"
proto = "udp"
src = "192.168.1.10:5000"
dst = "198.51.100.1:3478"
ttl = 3
"#;

    #[test]
    fn parse_build_and_replay() {
        let f = TopologyFile::parse(NET).unwrap();
        let mut t = f.build(None).unwrap();
        t.enable_trace();
        let out = f.run(&mut t).unwrap();
        assert_eq!(out[0], DeliveryResult::DroppedTtl(HopId(2)));
        assert!(out[1].delivered().is_some());
        let text = t.trace_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "0.500 udp 192.168.1.10:5000 198.51.100.1:3478 2 dropped_ttl 2");
        assert!(lines[1].ends_with(" 3 delivered -"));
    }

    #[test]
    fn rejects_nat_without_table() {
        let f = TopologyFile::parse("[[hop]]\nkind = \"nat\"\n").unwrap();
        assert!(f.build(None).is_err());
        assert!(TopologyFile::parse("[[hop]]\nkind = \"switch\"\n").is_err());
    }
}
