use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};

use super::SimError;

/// Reuse and filtering policy of a NAT, from most restrictive to most
/// permissive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MappingType {
    Symmetric,
    PortRestricted,
    AddressRestricted,
    FullCone,
}

impl MappingType {
    pub const ALL: [MappingType; 4] =
        [MappingType::Symmetric, MappingType::PortRestricted, MappingType::AddressRestricted, MappingType::FullCone];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PortAlloc {
    Preserve,
    Sequential,
    Random,
    /// Random ports inside a fixed per-subscriber block of `chunk_size` ports.
    RandomChunk(u16),
}

impl PortAlloc {
    pub const MIN_CHUNK: u32 = 64;
    pub const MAX_CHUNK: u32 = 16384;
}

impl fmt::Display for PortAlloc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PortAlloc::Preserve => f.write_str("preserve"),
            PortAlloc::Sequential => f.write_str("sequential"),
            PortAlloc::Random => f.write_str("random"),
            PortAlloc::RandomChunk(c) => write!(f, "random_chunk:{c}"),
        }
    }
}

impl FromStr for PortAlloc {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "preserve" => Ok(PortAlloc::Preserve),
            "sequential" => Ok(PortAlloc::Sequential),
            "random" => Ok(PortAlloc::Random),
            other => {
                let size =
                    other.strip_prefix("random_chunk:").ok_or_else(|| format!("unknown port allocation `{other}`"))?;
                size.parse::<u16>().map(PortAlloc::RandomChunk).map_err(|_| format!("bad chunk size `{size}`"))
            }
        }
    }
}

impl TryFrom<String> for PortAlloc {
    type Error = String;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<PortAlloc> for String {
    fn from(p: PortAlloc) -> String {
        p.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    Paired,
    Arbitrary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Hairpin {
    Off,
    /// Loop back with the sender's external endpoint as source.
    Translate,
    /// Loop back keeping the sender's internal source endpoint.
    PreserveSource,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NatConfig {
    pub mapping_type: MappingType,
    pub port_alloc: PortAlloc,
    pub pooling: Pooling,
    pub external_pool: Vec<Ipv4Addr>,
    /// Seconds.
    pub udp_timeout: u64,
    /// Seconds.
    pub tcp_timeout: u64,
    pub hairpin: Hairpin,
    pub internal_range: Ipv4Net,
}

impl NatConfig {
    /// A single-address, port-preserving home router.
    pub fn home(external: Ipv4Addr, internal_range: Ipv4Net) -> Self {
        NatConfig {
            mapping_type: MappingType::PortRestricted,
            port_alloc: PortAlloc::Preserve,
            pooling: Pooling::Paired,
            external_pool: vec![external],
            udp_timeout: 60,
            tcp_timeout: 7200,
            hairpin: Hairpin::Off,
            internal_range,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |msg: String| Err(SimError::Config(msg));
        if self.external_pool.is_empty() {
            return bad("external_pool must not be empty".into());
        }
        if self.udp_timeout == 0 || self.tcp_timeout == 0 {
            return bad("timeouts must be positive".into());
        }
        if let PortAlloc::RandomChunk(c) = self.port_alloc {
            let c = u32::from(c);
            if !c.is_power_of_two() || !(PortAlloc::MIN_CHUNK..=PortAlloc::MAX_CHUNK).contains(&c) {
                return bad(format!(
                    "chunk size {c} must be a power of two in [{}, {}]",
                    PortAlloc::MIN_CHUNK,
                    PortAlloc::MAX_CHUNK
                ));
            }
        }
        let mut pool = self.external_pool.clone();
        pool.sort();
        pool.dedup();
        if pool.len() != self.external_pool.len() {
            return bad("external_pool has duplicates".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn port_alloc_text_form() {
        for p in [PortAlloc::Preserve, PortAlloc::Sequential, PortAlloc::Random, PortAlloc::RandomChunk(4096)] {
            assert_eq!(p.to_string().parse::<PortAlloc>().unwrap(), p);
        }
        assert!("random_chunk:x".parse::<PortAlloc>().is_err());
        assert!("lottery".parse::<PortAlloc>().is_err());
    }

    #[test]
    fn chunk_bounds() {
        let mut c = NatConfig::home("5.5.5.5".parse().unwrap(), "192.168.1.0/24".parse().unwrap());
        for ok in [64u16, 512, 1024, 4096, 16384] {
            c.port_alloc = PortAlloc::RandomChunk(ok);
            assert!(c.validate().is_ok(), "{ok}");
        }
        for bad in [32u16, 100, 32768, 3000] {
            c.port_alloc = PortAlloc::RandomChunk(bad);
            assert!(c.validate().is_err(), "{bad}");
        }
        c.port_alloc = PortAlloc::Preserve;
        c.udp_timeout = 0;
        assert!(c.validate().is_err());
        c.udp_timeout = 1;
        c.external_pool.clear();
        assert!(c.validate().is_err());
    }
}
