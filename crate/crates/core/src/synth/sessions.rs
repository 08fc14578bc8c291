//! Client sessions measured through simulated access networks.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::probe::{SERVER, SERVER_IPS};
use crate::addr::{Asn, RoutingTable};
use crate::probe::{ProbeError, SimProbe};
use crate::record::{Access, SessionRecord};
use crate::sim::{Hairpin, MappingType, NatConfig, Pooling, PortAlloc, Proto, TopologyBuilder};

pub const FIRST_ASN: u32 = 64800;
/// Share of non-cellular sessions whose home router reports its WAN
/// address.
pub const UPNP_SHARE: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionAsKind {
    /// Home routers behind a carrier NAT that hands out addresses across
    /// many 100.64/10 /24 blocks.
    Nat444,
    /// Home routers with public WAN addresses.
    HomeOnly,
    /// Handsets directly behind a carrier NAT with 10/8 addresses.
    CellularCgn,
    /// Handsets with public addresses.
    CellularPublic,
}

impl SessionAsKind {
    pub fn access(self) -> Access {
        match self {
            SessionAsKind::Nat444 | SessionAsKind::HomeOnly => Access::NonCellular,
            SessionAsKind::CellularCgn | SessionAsKind::CellularPublic => Access::Cellular,
        }
    }

    pub fn has_cgn(self) -> bool {
        matches!(self, SessionAsKind::Nat444 | SessionAsKind::CellularCgn)
    }
}

#[derive(Debug, Clone)]
pub struct SessionFixture {
    pub sessions: Vec<SessionRecord>,
    pub table: RoutingTable,
    pub truth: BTreeMap<Asn, SessionAsKind>,
}

fn carrier(k: u8, internal: &str, pool: usize) -> NatConfig {
    NatConfig {
        mapping_type: MappingType::PortRestricted,
        port_alloc: PortAlloc::Random,
        pooling: Pooling::Paired,
        external_pool: (0..pool).map(|i| Ipv4Addr::new(60, k, 0, 1 + i as u8)).collect(),
        udp_timeout: 60,
        tcp_timeout: 7200,
        hairpin: Hairpin::Off,
        internal_range: internal.parse().expect("valid"),
    }
}

fn home_router(wan: Ipv4Addr, lan: Ipv4Net, alloc: PortAlloc) -> NatConfig {
    let mut c = NatConfig::home(wan, lan);
    c.port_alloc = alloc;
    c
}

/// Per AS, `subscribers` subscribers each run one session of ten echo
/// flows against the measurement server.
pub fn synth_sessions(kinds: &[SessionAsKind], subscribers: usize, seed: u64) -> Result<SessionFixture, ProbeError> {
    assert!(kinds.len() <= 150 && subscribers <= 250, "fixture too large");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sessions = Vec::new();
    let mut truth = BTreeMap::new();
    let mut table_text = String::new();
    for (a, kind) in kinds.iter().enumerate() {
        let k = (a + 1) as u8;
        let asn = Asn(FIRST_ASN + a as u32);
        table_text.push_str(&format!("60.{k}.0.0/16,{}\n", asn.0));
        truth.insert(asn, *kind);
        let mut b = TopologyBuilder::new(seed.wrapping_add(a as u64));
        // (client name, device address, WAN address reported by UPnP)
        let mut clients: Vec<(String, Ipv4Addr, Option<Ipv4Addr>)> = Vec::new();
        match kind {
            SessionAsKind::Nat444 => {
                let cgn = b.nat(carrier(k, "100.64.0.0/10", 8), None);
                for s in 0..subscribers {
                    let wan = Ipv4Addr::new(100, 64, rng.gen_range(0..=255), (s % 250 + 2) as u8);
                    let lan = rng.gen_range(0..=1u8);
                    let cpe = b.nat(
                        home_router(wan, format!("192.168.{lan}.0/24").parse().expect("valid"), PortAlloc::Preserve),
                        Some(cgn),
                    );
                    let dev = Ipv4Addr::new(192, 168, lan, rng.gen_range(2..=30));
                    let name = format!("as{k}-s{s}");
                    b.host(&name, vec![dev], Some(cpe));
                    clients.push((name, dev, rng.gen_bool(UPNP_SHARE).then_some(wan)));
                }
            }
            SessionAsKind::HomeOnly => {
                for s in 0..subscribers {
                    let wan = Ipv4Addr::new(60, k, 1 + (s / 250) as u8, (s % 250 + 1) as u8);
                    let lan = rng.gen_range(0..=1u8);
                    let cpe = b.nat(
                        home_router(wan, format!("192.168.{lan}.0/24").parse().expect("valid"), PortAlloc::Preserve),
                        None,
                    );
                    let dev = Ipv4Addr::new(192, 168, lan, rng.gen_range(2..=30));
                    let name = format!("as{k}-s{s}");
                    b.host(&name, vec![dev], Some(cpe));
                    clients.push((name, dev, rng.gen_bool(UPNP_SHARE).then_some(wan)));
                }
            }
            SessionAsKind::CellularCgn => {
                let cgn = b.nat(carrier(k, "10.0.0.0/8", 4), None);
                for s in 0..subscribers {
                    let dev = Ipv4Addr::new(10, rng.gen_range(0..=255), (s / 250) as u8, (s % 250 + 1) as u8);
                    let name = format!("as{k}-s{s}");
                    b.host(&name, vec![dev], Some(cgn));
                    clients.push((name, dev, None));
                }
            }
            SessionAsKind::CellularPublic => {
                let r = b.router(None);
                for s in 0..subscribers {
                    let dev = Ipv4Addr::new(60, k, 1 + (s / 250) as u8, (s % 250 + 1) as u8);
                    let name = format!("as{k}-s{s}");
                    b.host(&name, vec![dev], Some(r));
                    clients.push((name, dev, None));
                }
            }
        }
        b.host(SERVER, SERVER_IPS.to_vec(), None);
        let mut probe = SimProbe::new(b.build()?, &clients[0].0, SERVER)?;
        for (i, (name, dev, cpe)) in clients.iter().enumerate() {
            probe.set_client(name)?;
            probe.set_port_start(rng.gen_range(32768..60000));
            let flows = probe.port_session(Proto::Tcp, 10, 1)?;
            let Some(first) = flows.first() else { continue };
            let mut rec = SessionRecord::new(format!("as{k}-{i}"), asn, kind.access(), *dev, first.observed_ext_ip);
            rec.ip_cpe = *cpe;
            rec.ts = probe.now().as_secs_f64();
            rec.flows = flows;
            sessions.push(rec);
        }
    }
    Ok(SessionFixture { sessions, table: RoutingTable::parse(&table_text).expect("generated table is valid"), truth })
}

/// Home router models and the probability that each preserves ports.
pub const CPE_MODELS: [(&str, f64); 5] =
    [("alpha", 1.0), ("bravo", 0.97), ("charlie", 0.9), ("delta", 0.75), ("echo", 0.0)];

#[derive(Debug, Clone)]
pub struct CpeCorpus {
    pub sessions: Vec<SessionRecord>,
    /// Per model: (sessions whose router preserved ports, sessions).
    pub generated: BTreeMap<String, (usize, usize)>,
}

/// Single-NAT home sessions whose router model decides between port
/// preservation and random ports. Model weights favour preserving models.
pub fn synth_cpe_corpus(sessions: usize, seed: u64) -> Result<CpeCorpus, ProbeError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = [0.5, 0.25, 0.15, 0.07, 0.03];
    let mut b = TopologyBuilder::new(seed);
    let mut plan = Vec::new();
    let mut generated: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for s in 0..sessions {
        let mut x: f64 = rng.gen();
        let mut m = 0;
        while m + 1 < weights.len() && x >= weights[m] {
            x -= weights[m];
            m += 1;
        }
        let (model, p) = CPE_MODELS[m];
        let preserve = rng.gen_bool(p);
        let wan = Ipv4Addr::new(60, 1, 1 + (s / 250) as u8, (s % 250 + 1) as u8);
        let alloc = if preserve { PortAlloc::Preserve } else { PortAlloc::Random };
        let cpe = b.nat(home_router(wan, "192.168.1.0/24".parse().expect("valid"), alloc), None);
        let name = format!("h{s}");
        b.host(&name, vec![Ipv4Addr::new(192, 168, 1, 2)], Some(cpe));
        let e = generated.entry(model.to_string()).or_default();
        e.0 += usize::from(preserve);
        e.1 += 1;
        plan.push((name, model, wan));
    }
    b.host(SERVER, SERVER_IPS.to_vec(), None);
    let mut probe = SimProbe::new(b.build()?, &plan[0].0, SERVER)?;
    let mut out = Vec::new();
    for (i, (name, model, wan)) in plan.into_iter().enumerate() {
        probe.set_client(&name)?;
        probe.set_port_start(rng.gen_range(32768..60000));
        let flows = probe.port_session(Proto::Tcp, 10, 1)?;
        let mut rec = SessionRecord::new(
            format!("cpe-{i}"),
            Asn(64512),
            Access::NonCellular,
            "192.168.1.2".parse().expect("valid"),
            wan,
        );
        rec.ip_cpe = Some(wan);
        rec.cpe_model = Some(model.to_string());
        rec.flows = flows;
        out.push(rec);
    }
    Ok(CpeCorpus { sessions: out, generated })
}
