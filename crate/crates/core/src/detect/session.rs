//! Per-AS CGN classification from client session addresses.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use serde::Serialize;

use super::DetectError;
use crate::addr::{classify_observed, slash24, slash8, AddrCategory, Asn, RoutingTable};
use crate::record::{Access, AsVerdict, CategoryCounts, CellularClass, Evidence, SessionRecord, Verdict};

pub const MIN_CELLULAR_SESSIONS: usize = 5;
pub const MIN_NONCELLULAR_SESSIONS: usize = 10;
pub const MIN_CANDIDATES: usize = 10;
pub const TOP_BLOCKS: usize = 10;
/// Distinct CPE /24 blocks needed per candidate session.
pub const DIVERSITY_SHARE: f64 = 0.4;

fn usable(sessions: &[SessionRecord], access: Access) -> Result<(Option<Asn>, Vec<&SessionRecord>), DetectError> {
    let used: Vec<&SessionRecord> = sessions.iter().filter(|s| !s.exclude).collect();
    if used.iter().any(|s| s.access != access) {
        return Err(DetectError::MixedAccess);
    }
    let asn = used.first().map(|s| s.asn);
    if used.iter().any(|s| Some(s.asn) != asn) {
        return Err(DetectError::MixedAsn);
    }
    Ok((asn, used))
}

fn range_label(addr: Ipv4Addr, c: AddrCategory) -> String {
    match c {
        AddrCategory::Private(r) => r.tag().to_string(),
        _ => slash8(addr).to_string(),
    }
}

/// Cellular rule: with at least five sessions, any device address other
/// than the public address marks the AS positive.
pub fn classify_cellular(asn: Asn, sessions: &[SessionRecord], table: &RoutingTable) -> Result<AsVerdict, DetectError> {
    let (_, used) = usable(sessions, Access::Cellular)?;
    let mut categories = CategoryCounts::default();
    let mut ranges = BTreeSet::new();
    let mut blocks = BTreeSet::new();
    for s in &used {
        let c = classify_observed(s.ip_dev, s.ip_pub, table);
        categories.add(c);
        if c.is_translated() {
            ranges.insert(range_label(s.ip_dev, c));
            blocks.insert(slash24(s.ip_dev));
        }
    }
    let n = used.len();
    let class = (n > 0).then(|| match categories.translated() {
        0 => CellularClass::ExclusivelyPublic,
        t if t == n => CellularClass::ExclusivelyInternal,
        _ => CellularClass::Mixed,
    });
    let verdict = if n < MIN_CELLULAR_SESSIONS {
        Verdict::Insufficient
    } else if categories.translated() > 0 {
        Verdict::CgnPositive
    } else {
        Verdict::Negative
    };
    Ok(AsVerdict {
        asn,
        verdict,
        evidence: Evidence::Session {
            access: Access::Cellular,
            class,
            n,
            distinct24: blocks.len(),
            sessions: n,
            categories,
            internal_ranges: ranges.into_iter().collect(),
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CpeBlocks {
    pub blocks: Vec<Ipv4Net>,
    /// Share of device addresses inside the returned blocks.
    pub coverage: f64,
}

impl CpeBlocks {
    pub fn contains(&self, addr: Ipv4Addr) -> bool {
        self.blocks.contains(&slash24(addr))
    }
}

/// The ten most common /24 blocks of device addresses, ties going to the
/// lower prefix.
pub fn compute_cpe_top_blocks(sessions: &[SessionRecord]) -> Result<CpeBlocks, DetectError> {
    let mut counts: BTreeMap<Ipv4Net, usize> = BTreeMap::new();
    let mut total = 0;
    for s in sessions.iter().filter(|s| !s.exclude && s.access == Access::NonCellular) {
        *counts.entry(slash24(s.ip_dev)).or_default() += 1;
        total += 1;
    }
    if total == 0 {
        return Err(DetectError::Empty);
    }
    let mut ranked: Vec<(Ipv4Net, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    ranked.truncate(TOP_BLOCKS);
    let covered: usize = ranked.iter().map(|(_, c)| c).sum();
    Ok(CpeBlocks { blocks: ranked.into_iter().map(|(b, _)| b).collect(), coverage: covered as f64 / total as f64 })
}

/// Non-cellular rule: CPE WAN addresses that are translated and outside
/// the common CPE blocks are CGN candidates; with N candidates the AS is
/// positive when N >= 10 and they span at least 0.4 * N distinct /24s.
pub fn classify_noncellular(
    asn: Asn,
    sessions: &[SessionRecord],
    top: &CpeBlocks,
    table: &RoutingTable,
) -> Result<AsVerdict, DetectError> {
    let (_, used) = usable(sessions, Access::NonCellular)?;
    let mut categories = CategoryCounts::default();
    let mut ranges = BTreeSet::new();
    let mut blocks = BTreeSet::new();
    let mut n = 0;
    for s in &used {
        let Some(cpe) = s.ip_cpe else { continue };
        let c = classify_observed(cpe, s.ip_pub, table);
        categories.add(c);
        if c.is_translated() && !top.contains(cpe) {
            n += 1;
            ranges.insert(range_label(cpe, c));
            blocks.insert(slash24(cpe));
        }
    }
    let verdict = if used.len() < MIN_NONCELLULAR_SESSIONS {
        Verdict::Insufficient
    } else if n >= MIN_CANDIDATES && blocks.len() as f64 >= DIVERSITY_SHARE * n as f64 {
        Verdict::CgnPositive
    } else {
        Verdict::Negative
    };
    Ok(AsVerdict {
        asn,
        verdict,
        evidence: Evidence::Session {
            access: Access::NonCellular,
            class: None,
            n,
            distinct24: blocks.len(),
            sessions: used.len(),
            categories,
            internal_ranges: ranges.into_iter().collect(),
        },
    })
}

/// Groups sessions by (AS, access) and classifies each group. The CPE
/// blocks are computed over all non-cellular sessions; without any, every
/// non-cellular group is classified against an empty block list.
pub fn detect_sessions(sessions: &[SessionRecord], table: &RoutingTable) -> Result<Vec<AsVerdict>, DetectError> {
    let top = match compute_cpe_top_blocks(sessions) {
        Ok(t) => t,
        Err(DetectError::Empty) => CpeBlocks { blocks: Vec::new(), coverage: 0.0 },
        Err(e) => return Err(e),
    };
    let mut groups: BTreeMap<(Asn, Access), Vec<SessionRecord>> = BTreeMap::new();
    for s in sessions.iter().filter(|s| !s.exclude) {
        groups.entry((s.asn, s.access)).or_default().push(s.clone());
    }
    groups
        .iter()
        .map(|((asn, access), g)| match access {
            Access::Cellular => classify_cellular(*asn, g, table),
            Access::NonCellular => classify_noncellular(*asn, g, &top, table),
        })
        .collect()
}
