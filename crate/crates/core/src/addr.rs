//! Address classification: reserved ranges, routed/unrouted status, AS and
//! RIR attribution from ingested tables.

use std::collections::HashMap;
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use ipnet::Ipv4Net;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum AddrError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("line {line}: {prefix} lies in space that cannot hold subscriber addresses")]
    RejectedPrefix { line: usize, prefix: Ipv4Net },
    #[error("invalid ASN `{0}`")]
    Asn(String),
    #[error("unknown region `{0}`")]
    Region(String),
}

/// Autonomous system number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Asn(pub u32);

impl fmt::Display for Asn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "AS{}", self.0)
    }
}

impl FromStr for Asn {
    type Err = AddrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let digits = t.strip_prefix("AS").or_else(|| t.strip_prefix("as")).unwrap_or(t);
        digits.parse::<u32>().map(Asn).map_err(|_| AddrError::Asn(s.to_string()))
    }
}

/// The four blocks set aside for internal use.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ReservedRange {
    #[serde(rename = "192X")]
    R192X,
    #[serde(rename = "172X")]
    R172X,
    #[serde(rename = "10X")]
    R10X,
    #[serde(rename = "100X")]
    R100X,
}

impl ReservedRange {
    pub const ALL: [ReservedRange; 4] =
        [ReservedRange::R192X, ReservedRange::R172X, ReservedRange::R10X, ReservedRange::R100X];

    pub fn prefix(self) -> Ipv4Net {
        let (addr, len) = match self {
            ReservedRange::R192X => (Ipv4Addr::new(192, 168, 0, 0), 16),
            ReservedRange::R172X => (Ipv4Addr::new(172, 16, 0, 0), 12),
            ReservedRange::R10X => (Ipv4Addr::new(10, 0, 0, 0), 8),
            ReservedRange::R100X => (Ipv4Addr::new(100, 64, 0, 0), 10),
        };
        Ipv4Net::new(addr, len).expect("static prefix")
    }

    pub fn tag(self) -> &'static str {
        match self {
            ReservedRange::R192X => "192X",
            ReservedRange::R172X => "172X",
            ReservedRange::R10X => "10X",
            ReservedRange::R100X => "100X",
        }
    }
}

impl fmt::Display for ReservedRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ReservedRange {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ReservedRange::ALL.into_iter().find(|r| r.tag() == s).ok_or_else(|| format!("unknown reserved range `{s}`"))
    }
}

/// Returns the reserved range containing `addr`, if any.
pub fn classify_reserved(addr: Ipv4Addr) -> Option<ReservedRange> {
    ReservedRange::ALL.into_iter().find(|r| r.prefix().contains(&addr))
}

pub fn is_reserved(addr: Ipv4Addr) -> bool {
    classify_reserved(addr).is_some()
}

/// Loopback, link-local and multicast space. Such addresses cannot belong to
/// a subscriber and are refused at ingestion.
pub fn is_rejected(addr: Ipv4Addr) -> bool {
    addr.is_loopback() || addr.is_link_local() || addr.is_multicast()
}

fn rejected_blocks() -> [Ipv4Net; 3] {
    ["127.0.0.0/8".parse().unwrap(), "169.254.0.0/16".parse().unwrap(), "224.0.0.0/4".parse().unwrap()]
}

/// The /24 block holding `addr`.
pub fn slash24(addr: Ipv4Addr) -> Ipv4Net {
    Ipv4Net::new(addr, 24).expect("24 is a valid length").trunc()
}

/// The /8 block holding `addr`.
pub fn slash8(addr: Ipv4Addr) -> Ipv4Net {
    Ipv4Net::new(addr, 8).expect("8 is a valid length").trunc()
}

/// Origin-AS table with longest-prefix-match lookup.
#[derive(Debug, Clone, Default)]
pub struct RoutingTable {
    entries: Vec<(Ipv4Net, Asn)>,
    by_len: Vec<HashMap<u32, usize>>,
}

impl RoutingTable {
    pub fn new() -> Self {
        RoutingTable { entries: Vec::new(), by_len: vec![HashMap::new(); 33] }
    }

    pub fn from_entries<I: IntoIterator<Item = (Ipv4Net, Asn)>>(entries: I) -> Self {
        let mut t = RoutingTable::new();
        for (p, a) in entries {
            t.insert(p, a);
        }
        t
    }

    /// Inserts or replaces the origin of `prefix`.
    pub fn insert(&mut self, prefix: Ipv4Net, asn: Asn) {
        if self.by_len.is_empty() {
            self.by_len = vec![HashMap::new(); 33];
        }
        let prefix = prefix.trunc();
        let key = u32::from(prefix.network());
        let slot = &mut self.by_len[prefix.prefix_len() as usize];
        match slot.get(&key) {
            Some(&i) => self.entries[i].1 = asn,
            None => {
                slot.insert(key, self.entries.len());
                self.entries.push((prefix, asn));
            }
        }
    }

    /// Parses the `prefix,asn` text format. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self, AddrError> {
        let rejected = rejected_blocks();
        let mut t = RoutingTable::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (p, a) = body
                .split_once(',')
                .ok_or_else(|| AddrError::Parse { line, msg: format!("expected `prefix,asn`, got `{body}`") })?;
            let prefix: Ipv4Net =
                p.trim().parse().map_err(|_| AddrError::Parse { line, msg: format!("bad prefix `{}`", p.trim()) })?;
            if rejected.iter().any(|b| b.contains(&prefix.network()) || prefix.contains(&b.network())) {
                return Err(AddrError::RejectedPrefix { line, prefix });
            }
            let asn: Asn = a.parse().map_err(|_| AddrError::Parse { line, msg: format!("bad asn `{}`", a.trim()) })?;
            t.insert(prefix, asn);
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[(Ipv4Net, Asn)] {
        &self.entries
    }

    /// Longest matching prefix and its origin.
    pub fn lookup(&self, addr: Ipv4Addr) -> Option<(Ipv4Net, Asn)> {
        let bits = u32::from(addr);
        for len in (0..=32u8).rev() {
            let slot = match self.by_len.get(len as usize) {
                Some(s) if !s.is_empty() => s,
                _ => continue,
            };
            let mask = if len == 0 { 0 } else { u32::MAX << (32 - len) };
            if let Some(&i) = slot.get(&(bits & mask)) {
                return Some(self.entries[i]);
            }
        }
        None
    }

    pub fn is_routed(&self, addr: Ipv4Addr) -> bool {
        self.lookup(addr).is_some()
    }

    /// True if any entry overlaps `block`.
    pub fn overlaps(&self, block: Ipv4Net) -> bool {
        self.entries.iter().any(|(p, _)| p.contains(&block.network()) || block.contains(&p.network()))
    }

    /// Stable content digest, used to identify the snapshot in reports.
    pub fn fingerprint(&self) -> String {
        let mut sorted = self.entries.clone();
        sorted.sort();
        let mut h = Sha256::new();
        for (p, a) in sorted {
            h.update(format!("{p},{}\n", a.0).as_bytes());
        }
        hex::encode(&h.finalize()[..8])
    }
}

/// Origin AS by longest-prefix match.
pub fn lookup_asn(addr: Ipv4Addr, table: &RoutingTable) -> Option<Asn> {
    table.lookup(addr).map(|(_, a)| a)
}

/// Category of an address observed at a vantage point, relative to the
/// public address seen by our servers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AddrCategory {
    Private(ReservedRange),
    Unrouted,
    RoutedMatch,
    RoutedMismatch,
}

impl AddrCategory {
    /// Anything other than a routed match implies translation on the path.
    pub fn is_translated(self) -> bool {
        self != AddrCategory::RoutedMatch
    }

    pub fn label(self) -> String {
        match self {
            AddrCategory::Private(r) => r.tag().to_string(),
            AddrCategory::Unrouted => "unrouted".into(),
            AddrCategory::RoutedMatch => "routed_match".into(),
            AddrCategory::RoutedMismatch => "routed_mismatch".into(),
        }
    }
}

pub fn classify_observed(addr: Ipv4Addr, ip_pub: Ipv4Addr, table: &RoutingTable) -> AddrCategory {
    if let Some(r) = classify_reserved(addr) {
        AddrCategory::Private(r)
    } else if !table.is_routed(addr) {
        AddrCategory::Unrouted
    } else if addr == ip_pub {
        AddrCategory::RoutedMatch
    } else {
        AddrCategory::RoutedMismatch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Region {
    #[serde(rename = "ARIN")]
    Arin,
    #[serde(rename = "LACNIC")]
    Lacnic,
    #[serde(rename = "RIPE")]
    Ripe,
    #[serde(rename = "AFRINIC")]
    Afrinic,
    #[serde(rename = "APNIC")]
    Apnic,
    Unknown,
}

impl Region {
    pub const ALL: [Region; 6] =
        [Region::Afrinic, Region::Apnic, Region::Arin, Region::Lacnic, Region::Ripe, Region::Unknown];

    pub fn name(self) -> &'static str {
        match self {
            Region::Arin => "ARIN",
            Region::Lacnic => "LACNIC",
            Region::Ripe => "RIPE",
            Region::Afrinic => "AFRINIC",
            Region::Apnic => "APNIC",
            Region::Unknown => "Unknown",
        }
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Region {
    type Err = AddrError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "ARIN" => Ok(Region::Arin),
            "LACNIC" => Ok(Region::Lacnic),
            "RIPE" | "RIPENCC" | "RIPE NCC" => Ok(Region::Ripe),
            "AFRINIC" => Ok(Region::Afrinic),
            "APNIC" => Ok(Region::Apnic),
            _ => Err(AddrError::Region(s.to_string())),
        }
    }
}

/// ASN to RIR mapping. Entries are single ASNs or inclusive ranges.
#[derive(Debug, Clone, Default)]
pub struct RirMap {
    exact: HashMap<Asn, Region>,
    ranges: Vec<(u32, u32, Region)>,
}

impl RirMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, asn: Asn, region: Region) {
        self.exact.insert(asn, region);
    }

    pub fn insert_range(&mut self, lo: u32, hi: u32, region: Region) {
        self.ranges.push((lo.min(hi), lo.max(hi), region));
    }

    /// Parses `asn,region` lines; `asn` may be a range `lo-hi`.
    pub fn parse(text: &str) -> Result<Self, AddrError> {
        let mut m = RirMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (a, r) = body
                .split_once(',')
                .ok_or_else(|| AddrError::Parse { line, msg: format!("expected `asn,region`, got `{body}`") })?;
            let region: Region = r.parse()?;
            match a.trim().split_once('-') {
                Some((lo, hi)) => {
                    let lo: Asn = lo.parse()?;
                    let hi: Asn = hi.parse()?;
                    m.insert_range(lo.0, hi.0, region);
                }
                None => m.insert(a.parse()?, region),
            }
        }
        Ok(m)
    }
}

pub fn region_of(asn: Asn, rir: &RirMap) -> Region {
    if let Some(&r) = rir.exact.get(&asn) {
        return r;
    }
    rir.ranges.iter().find(|(lo, hi, _)| (*lo..=*hi).contains(&asn.0)).map(|&(_, _, r)| r).unwrap_or(Region::Unknown)
}
