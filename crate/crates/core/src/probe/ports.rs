//! Port-allocation, chunk and pooling inference from observed flows.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use super::ProbeError;
use crate::record::FlowObservation;

pub const TRACE_LEN: usize = 10;
/// Share of preserved ports that marks a trace as preserving.
pub const PRESERVE_SHARE: f64 = 0.2;
/// Consecutive ports closer than this count as sequential.
pub const SEQUENTIAL_GAP: i32 = 50;
pub const CHUNK_MIN_SESSIONS: usize = 20;
pub const CHUNK_SPAN_LIMIT: u32 = 16384;
pub const ARBITRARY_SHARE: f64 = 0.6;
pub const POOLING_MIN_SESSIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PortStrategy {
    Preserved,
    Sequential,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolingGuess {
    Paired,
    Arbitrary,
}

/// Classifies a trace of (local port, observed port) pairs in flow order.
/// Tests run in a fixed order: preserved, then sequential, then random.
pub fn infer_port_allocation(trace: &[(u16, u16)]) -> Result<PortStrategy, ProbeError> {
    if trace.len() < TRACE_LEN {
        return Err(ProbeError::TraceTooShort(trace.len()));
    }
    let preserved = trace.iter().filter(|(l, o)| l == o).count();
    if preserved as f64 >= PRESERVE_SHARE * trace.len() as f64 {
        return Ok(PortStrategy::Preserved);
    }
    let sequential = trace.windows(2).all(|w| {
        let d = i32::from(w[1].1) - i32::from(w[0].1);
        d > 0 && d < SEQUENTIAL_GAP
    });
    Ok(if sequential { PortStrategy::Sequential } else { PortStrategy::Random })
}

/// Like [`infer_port_allocation`], but the sequential test looks at the
/// ports of each observed external address separately, so that a NAT with
/// arbitrary pooling and per-address counters still reads as sequential.
pub fn infer_flows(flows: &[FlowObservation]) -> Result<PortStrategy, ProbeError> {
    if flows.len() < TRACE_LEN {
        return Err(ProbeError::TraceTooShort(flows.len()));
    }
    let mut f = flows.to_vec();
    f.sort_by_key(|x| x.index);
    let trace: Vec<(u16, u16)> = f.iter().map(|x| (x.local_port, x.observed_ext_port)).collect();
    let s = infer_port_allocation(&trace)?;
    if s != PortStrategy::Random {
        return Ok(s);
    }
    let groups = group_by_ip(&f);
    let mut diffs = 0;
    for ports in groups.values() {
        for w in ports.windows(2) {
            let d = i32::from(w[1]) - i32::from(w[0]);
            if d <= 0 || d >= SEQUENTIAL_GAP {
                return Ok(PortStrategy::Random);
            }
            diffs += 1;
        }
    }
    Ok(if diffs > 0 { PortStrategy::Sequential } else { PortStrategy::Random })
}

fn group_by_ip(flows: &[FlowObservation]) -> BTreeMap<Ipv4Addr, Vec<u16>> {
    let mut g: BTreeMap<Ipv4Addr, Vec<u16>> = BTreeMap::new();
    for f in flows {
        g.entry(f.observed_ext_ip).or_default().push(f.observed_ext_port);
    }
    g
}

/// Span (max - min) of observed ports per session and external address.
pub fn session_spans(flows: &[FlowObservation]) -> Vec<u32> {
    group_by_ip(flows)
        .values()
        .map(|p| {
            let lo = *p.iter().min().expect("non-empty group");
            let hi = *p.iter().max().expect("non-empty group");
            u32::from(hi - lo)
        })
        .collect()
}

/// Chunk size shared by sessions already classified random: the smallest
/// power of two covering the widest per-address span, provided every span
/// stays under 16K ports and there are at least 20 sessions.
pub fn detect_chunks(sessions: &[Vec<FlowObservation>]) -> Option<u32> {
    if sessions.len() < CHUNK_MIN_SESSIONS {
        return None;
    }
    let mut widest = 0;
    for s in sessions {
        for span in session_spans(s) {
            if span >= CHUNK_SPAN_LIMIT {
                return None;
            }
            widest = widest.max(span);
        }
    }
    Some(widest.max(1).next_power_of_two())
}

/// Arbitrary iff more than 60% of sessions saw more than one external
/// address. Sessions with fewer than two flows are ignored; `None` when
/// fewer than five sessions remain.
pub fn infer_pooling(sessions: &[Vec<FlowObservation>]) -> Option<PoolingGuess> {
    let usable: Vec<&Vec<FlowObservation>> = sessions.iter().filter(|s| s.len() >= 2).collect();
    if usable.len() < POOLING_MIN_SESSIONS {
        return None;
    }
    let multi =
        usable.iter().filter(|s| s.iter().map(|f| f.observed_ext_ip).collect::<BTreeSet<_>>().len() > 1).count();
    Some(if multi as f64 > ARBITRARY_SHARE * usable.len() as f64 {
        PoolingGuess::Arbitrary
    } else {
        PoolingGuess::Paired
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(local: &[u16], observed: &[u16]) -> Vec<(u16, u16)> {
        local.iter().copied().zip(observed.iter().copied()).collect()
    }

    fn flows(ip_ports: &[(&str, u16)]) -> Vec<FlowObservation> {
        ip_ports
            .iter()
            .enumerate()
            .map(|(i, (ip, p))| FlowObservation {
                index: i as u32,
                local_port: 40000 + i as u16,
                observed_ext_ip: ip.parse().unwrap(),
                observed_ext_port: *p,
            })
            .collect()
    }

    #[test]
    fn identity_is_preserved() {
        let l: Vec<u16> = (5000..5010).collect();
        assert_eq!(infer_port_allocation(&trace(&l, &l)).unwrap(), PortStrategy::Preserved);
    }

    #[test]
    fn small_gaps_are_sequential() {
        let l: Vec<u16> = (30000..30010).collect();
        let o = [10001, 10003, 10010, 10055, 10060, 10061, 10100, 10120, 10150, 10199];
        assert_eq!(infer_port_allocation(&trace(&l, &o)).unwrap(), PortStrategy::Sequential);
        let mut wrap = o;
        wrap[5] = 10000;
        assert_eq!(infer_port_allocation(&trace(&l, &wrap)).unwrap(), PortStrategy::Random);
        let mut gap = o;
        gap[9] = 10200; // a gap of exactly 50
        assert_eq!(infer_port_allocation(&trace(&l, &gap)).unwrap(), PortStrategy::Random);
    }

    #[test]
    fn twenty_percent_preserved_wins() {
        let l: Vec<u16> = (30000..30010).collect();
        let mut o = vec![30000, 30001, 900, 61000, 2000, 45000, 3333, 17000, 52000, 1234];
        assert_eq!(infer_port_allocation(&trace(&l, &o)).unwrap(), PortStrategy::Preserved);
        o[1] = 7;
        assert_eq!(infer_port_allocation(&trace(&l, &o)).unwrap(), PortStrategy::Random);
    }

    #[test]
    fn short_trace_is_an_error() {
        assert!(matches!(infer_port_allocation(&[(1, 1); 9]), Err(ProbeError::TraceTooShort(9))));
    }

    #[test]
    fn per_address_sequential() {
        let f = flows(&[
            ("5.5.5.1", 1024),
            ("5.5.5.2", 1024),
            ("5.5.5.1", 1025),
            ("5.5.5.2", 1025),
            ("5.5.5.1", 1026),
            ("5.5.5.3", 1024),
            ("5.5.5.2", 1026),
            ("5.5.5.1", 1027),
            ("5.5.5.3", 1025),
            ("5.5.5.2", 1027),
        ]);
        assert_eq!(infer_flows(&f).unwrap(), PortStrategy::Sequential);
    }

    fn session(lo: u16, width: u16) -> Vec<FlowObservation> {
        let ports: Vec<(&str, u16)> = (0..10).map(|i| ("5.5.5.5", lo + (i * (width / 9)))).collect();
        flows(&ports)
    }

    #[test]
    fn chunk_examples() {
        let s: Vec<_> = (0..20).map(|_| session(40960, 4095)).collect();
        assert_eq!(detect_chunks(&s), Some(4096));
        let wide: Vec<_> = (0..20).map(|_| session(2000, 62000)).collect();
        assert_eq!(detect_chunks(&wide), None);
        assert_eq!(detect_chunks(&s[..19]), None);
    }

    #[test]
    fn pooling_examples() {
        let single = flows(&[("5.5.5.1", 1); 10]);
        let double = flows(&[("5.5.5.1", 1), ("5.5.5.2", 2)]);
        let mut ten: Vec<_> = (0..7).map(|_| double.clone()).collect();
        ten.extend((0..3).map(|_| single.clone()));
        assert_eq!(infer_pooling(&ten), Some(PoolingGuess::Arbitrary));
        let all_single: Vec<_> = (0..10).map(|_| single.clone()).collect();
        assert_eq!(infer_pooling(&all_single), Some(PoolingGuess::Paired));
        // Exactly 60% is not more than 60%.
        let mut six: Vec<_> = (0..6).map(|_| double.clone()).collect();
        six.extend((0..4).map(|_| single.clone()));
        assert_eq!(infer_pooling(&six), Some(PoolingGuess::Paired));
        assert_eq!(infer_pooling(&ten[..4]), None);
    }
}
