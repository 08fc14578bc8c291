//! Per-AS aggregation of probe sessions.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ports::{detect_chunks, infer_flows, infer_pooling, PoolingGuess, PortStrategy};
use super::stun::StunMapping;
use super::ProbeError;
use crate::addr::Asn;
use crate::record::{Access, FlowObservation, SessionRecord};

pub const MIN_PROFILE_SESSIONS: usize = 3;
/// Minimum distance of the deepest NAT for a non-cellular session's timeout
/// to be attributed to a carrier NAT rather than the home router.
pub const CGN_MIN_HOP: u8 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsProfile {
    pub asn: Asn,
    pub access: Access,
    pub sessions: usize,
    /// Share of classifiable sessions per strategy.
    pub strategy_shares: BTreeMap<PortStrategy, f64>,
    pub dominant_strategy: Option<PortStrategy>,
    pub chunk_size: Option<u32>,
    pub pooling: Option<PoolingGuess>,
    /// Most frequent timeout estimate (s); ties go to the shorter timeout.
    pub timeout_mode: Option<f64>,
    pub max_nat_hop: Option<u8>,
    pub most_permissive_stun: Option<StunMapping>,
}

/// Aggregates the sessions of one AS and access type. Excluded sessions
/// are skipped before the session floor is checked.
pub fn as_profile(sessions: &[SessionRecord]) -> Result<AsProfile, ProbeError> {
    let used: Vec<&SessionRecord> = sessions.iter().filter(|s| !s.exclude).collect();
    if used.len() < MIN_PROFILE_SESSIONS {
        return Err(ProbeError::Insufficient { need: MIN_PROFILE_SESSIONS, have: used.len() });
    }
    let (asn, access) = (used[0].asn, used[0].access);
    if used.iter().any(|s| s.asn != asn || s.access != access) {
        return Err(ProbeError::MixedInput);
    }

    let mut counts: BTreeMap<PortStrategy, usize> = BTreeMap::new();
    let mut random: Vec<Vec<FlowObservation>> = Vec::new();
    for s in &used {
        if let Ok(st) = infer_flows(&s.flows) {
            *counts.entry(st).or_default() += 1;
            if st == PortStrategy::Random {
                random.push(s.flows.clone());
            }
        }
    }
    let classified: usize = counts.values().sum();
    let strategy_shares = counts.iter().map(|(k, v)| (*k, *v as f64 / classified as f64)).collect::<BTreeMap<_, _>>();
    let dominant_strategy = counts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(k, _)| *k);
    let flows: Vec<Vec<FlowObservation>> = used.iter().map(|s| s.flows.clone()).collect();

    let mut timeouts: BTreeMap<u32, usize> = BTreeMap::new();
    for s in &used {
        let Some(t) = &s.ttl_result else { continue };
        if t.unstable_path {
            continue;
        }
        let Some(deepest) = t.nats.iter().max_by_key(|n| n.hop) else { continue };
        if access == Access::NonCellular && deepest.hop < CGN_MIN_HOP {
            continue;
        }
        // Estimates are half-integers, so doubling makes them exact keys.
        *timeouts.entry(deepest.timeout_low + deepest.timeout_high).or_default() += 1;
    }
    let timeout_mode = timeouts.iter().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(a.0))).map(|(k, _)| f64::from(*k) / 2.0);

    Ok(AsProfile {
        asn,
        access,
        sessions: used.len(),
        strategy_shares,
        dominant_strategy,
        chunk_size: detect_chunks(&random),
        pooling: infer_pooling(&flows),
        timeout_mode,
        max_nat_hop: used.iter().filter_map(|s| s.ttl_result.as_ref()?.deepest_hop()).max(),
        most_permissive_stun: used.iter().filter_map(|s| s.stun.as_ref().map(|o| o.mapping)).max(),
    })
}

/// Per home router model: (sessions classified preserved, sessions
/// classified at all). Sessions without a model are skipped.
pub fn preservation_by_model(sessions: &[SessionRecord]) -> BTreeMap<String, (usize, usize)> {
    let mut out: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in sessions.iter().filter(|s| !s.exclude) {
        let (Some(model), Ok(st)) = (&s.cpe_model, infer_flows(&s.flows)) else { continue };
        let e = out.entry(model.clone()).or_default();
        e.0 += usize::from(st == PortStrategy::Preserved);
        e.1 += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::stun::StunOutcome;
    use crate::probe::ttl::{DetectedNat, TtlResult};

    fn sess(i: usize, access: Access) -> SessionRecord {
        SessionRecord::new(format!("s{i}"), Asn(64500), access, "10.0.0.2".parse().unwrap(), "5.5.5.5".parse().unwrap())
    }

    fn ttl(hop: u8, low: u32) -> TtlResult {
        TtlResult {
            nats: vec![DetectedNat { hop, timeout_low: low, timeout_high: low + 10 }],
            address_mismatch: true,
            hop_count: Some(10),
            ..TtlResult::default()
        }
    }

    fn stun(mapping: StunMapping) -> StunOutcome {
        StunOutcome {
            mapping,
            local: "10.0.0.2:4000".parse().unwrap(),
            test1: "5.5.5.5:4000".parse().unwrap(),
            test2: false,
            test1_alt: None,
            test3: None,
        }
    }

    #[test]
    fn floor_of_three_sessions() {
        let s: Vec<_> = (0..2).map(|i| sess(i, Access::Cellular)).collect();
        assert!(matches!(as_profile(&s), Err(ProbeError::Insufficient { need: 3, have: 2 })));
    }

    #[test]
    fn mode_max_hop_and_permissive_stun() {
        let mut s: Vec<_> = (0..3).map(|i| sess(i, Access::Cellular)).collect();
        for (x, (hop, low)) in s.iter_mut().zip([(1, 60), (3, 60), (5, 30)]) {
            x.ttl_result = Some(ttl(hop, low));
        }
        for (x, m) in s.iter_mut().zip([StunMapping::Symmetric, StunMapping::PortRestricted, StunMapping::FullCone]) {
            x.stun = Some(stun(m));
        }
        let p = as_profile(&s).unwrap();
        assert_eq!(p.timeout_mode, Some(65.0));
        assert_eq!(p.max_nat_hop, Some(5));
        assert_eq!(p.most_permissive_stun, Some(StunMapping::FullCone));
    }

    #[test]
    fn noncellular_timeouts_need_distant_nat() {
        let mut s: Vec<_> = (0..3).map(|i| sess(i, Access::NonCellular)).collect();
        s[0].ttl_result = Some(ttl(1, 120));
        s[1].ttl_result = Some(ttl(1, 120));
        s[2].ttl_result = Some(ttl(4, 30));
        assert_eq!(as_profile(&s).unwrap().timeout_mode, Some(35.0));
    }

    #[test]
    fn mixed_input_is_rejected() {
        let mut s: Vec<_> = (0..3).map(|i| sess(i, Access::Cellular)).collect();
        s[2].access = Access::NonCellular;
        assert!(matches!(as_profile(&s), Err(ProbeError::MixedInput)));
    }
}
