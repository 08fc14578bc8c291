//! Probe fixtures: single-NAT behavior matrix and CPE/CGN chains for TTL
//! enumeration.

use std::net::Ipv4Addr;

use ipnet::Ipv4Net;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::probe::{
    detect_chunks, infer_flows, infer_pooling, stun_classify, PoolingGuess, PortStrategy, ProbeError, SimProbe,
    StunOutcome,
};
use crate::record::FlowObservation;
use crate::sim::{Hairpin, MappingType, NatConfig, Pooling, PortAlloc, Proto, SimError, Topology, TopologyBuilder};

pub const CHUNK_SIZES: [u16; 4] = [512, 1024, 4096, 16384];
pub const MATRIX_SUBSCRIBERS: usize = 3;
pub const MATRIX_POOL: usize = 4;
pub const MATRIX_SESSIONS: usize = 20;
pub const MATRIX_FLOWS: u32 = 10;
/// Virtual milliseconds between flows of a session.
pub const FLOW_SPACING_MS: u64 = 1;

pub const SERVER: &str = "server";
pub const SERVER_IPS: [Ipv4Addr; 2] = [Ipv4Addr::new(198, 51, 100, 1), Ipv4Addr::new(198, 51, 100, 2)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct MatrixCase {
    pub mapping: MappingType,
    pub alloc: PortAlloc,
    pub pooling: Pooling,
}

impl MatrixCase {
    /// The port strategy a probe should report for this configuration.
    pub fn expected_strategy(&self) -> PortStrategy {
        match self.alloc {
            PortAlloc::Preserve => PortStrategy::Preserved,
            PortAlloc::Sequential => PortStrategy::Sequential,
            PortAlloc::Random | PortAlloc::RandomChunk(_) => PortStrategy::Random,
        }
    }

    pub fn expected_chunk(&self) -> Option<u32> {
        match self.alloc {
            PortAlloc::RandomChunk(c) => Some(u32::from(c)),
            _ => None,
        }
    }
}

/// All mapping types, four port strategies and both pooling modes. The
/// chunked configurations cycle through [`CHUNK_SIZES`].
pub fn matrix_cases() -> Vec<MatrixCase> {
    let mut out = Vec::new();
    let mut chunk = 0;
    for pooling in [Pooling::Paired, Pooling::Arbitrary] {
        for mapping in MappingType::ALL {
            for alloc in [PortAlloc::Preserve, PortAlloc::Sequential, PortAlloc::Random, PortAlloc::RandomChunk(0)] {
                let alloc = match alloc {
                    PortAlloc::RandomChunk(_) => {
                        chunk += 1;
                        PortAlloc::RandomChunk(CHUNK_SIZES[(chunk - 1) % CHUNK_SIZES.len()])
                    }
                    a => a,
                };
                out.push(MatrixCase { mapping, alloc, pooling });
            }
        }
    }
    out
}

pub fn subscriber_name(i: usize) -> String {
    format!("sub{i}")
}

/// One NAT with `subscribers` hosts at 10.0.0.2.. behind it and a
/// dual-address server in the global realm.
pub fn single_nat_topology(cfg: NatConfig, subscribers: usize, seed: u64) -> Result<Topology, SimError> {
    let mut b = TopologyBuilder::new(seed);
    let nat = b.nat(cfg, None);
    for i in 0..subscribers {
        b.host(&subscriber_name(i), vec![Ipv4Addr::new(10, 0, 0, 2 + i as u8)], Some(nat));
    }
    b.host(SERVER, SERVER_IPS.to_vec(), None);
    b.build()
}

pub fn matrix_config(case: &MatrixCase) -> NatConfig {
    NatConfig {
        mapping_type: case.mapping,
        port_alloc: case.alloc,
        pooling: case.pooling,
        external_pool: (1..=MATRIX_POOL as u8).map(|i| Ipv4Addr::new(203, 0, 113, i)).collect(),
        udp_timeout: 120,
        tcp_timeout: 7200,
        hairpin: Hairpin::Off,
        internal_range: "10.0.0.0/24".parse::<Ipv4Net>().expect("valid"),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MatrixOutcome {
    pub case: MatrixCase,
    pub stun: StunOutcome,
    /// Per-session strategy.
    pub strategies: Vec<PortStrategy>,
    pub chunk_size: Option<u32>,
    pub pooling: Option<PoolingGuess>,
    pub sessions: Vec<Vec<FlowObservation>>,
    pub virtual_ms: u64,
}

impl MatrixOutcome {
    pub fn recovered(&self) -> bool {
        let want = self.case.expected_strategy();
        let pooling = match self.case.pooling {
            Pooling::Paired => PoolingGuess::Paired,
            Pooling::Arbitrary => PoolingGuess::Arbitrary,
        };
        self.stun.mapping.as_mapping_type() == Some(self.case.mapping)
            && self.strategies.len() == MATRIX_SESSIONS
            && self.strategies.iter().all(|s| *s == want)
            && self.chunk_size == self.case.expected_chunk()
            && self.pooling == Some(pooling)
    }
}

/// Runs a STUN test and 20 port-trace sessions, rotating over the
/// subscribers, against one configuration.
pub fn run_matrix_case(case: &MatrixCase, seed: u64) -> Result<MatrixOutcome, ProbeError> {
    let topo = single_nat_topology(matrix_config(case), MATRIX_SUBSCRIBERS, seed)?;
    let start = topo.clock().0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut probe = SimProbe::new(topo, &subscriber_name(0), SERVER)?;
    let stun = stun_classify(&mut probe)?;
    let mut sessions = Vec::new();
    let mut strategies = Vec::new();
    for s in 0..MATRIX_SESSIONS {
        probe.set_client(&subscriber_name(s % MATRIX_SUBSCRIBERS))?;
        probe.set_port_start(rng.gen_range(32768..60000));
        let flows = probe.port_session(Proto::Tcp, MATRIX_FLOWS, FLOW_SPACING_MS)?;
        if let Ok(st) = infer_flows(&flows) {
            strategies.push(st);
        }
        sessions.push(flows);
    }
    let random: Vec<Vec<FlowObservation>> =
        sessions.iter().zip(&strategies).filter(|(_, s)| **s == PortStrategy::Random).map(|(f, _)| f.clone()).collect();
    Ok(MatrixOutcome {
        case: *case,
        stun,
        chunk_size: detect_chunks(&random),
        pooling: infer_pooling(&sessions),
        strategies,
        sessions,
        virtual_ms: probe.now().0 - start,
    })
}

/// Chain of `hops` hops: a home NAT at hop 1, a carrier NAT at `cgn_hop`
/// with the given UDP timeout, routers elsewhere. The client sits behind
/// hop 1 and the server beyond the last hop.
pub fn ttl_chain(cgn_hop: u8, cgn_timeout: u64, hops: u8, cpe_timeout: u64, seed: u64) -> Result<Topology, SimError> {
    assert!(cgn_hop >= 2 && hops >= cgn_hop, "carrier NAT must sit between hop 2 and the last hop");
    let mut cpe = NatConfig::home(Ipv4Addr::new(100, 64, 0, 2), "192.168.1.0/24".parse().expect("valid"));
    cpe.udp_timeout = cpe_timeout;
    let cgn = NatConfig {
        mapping_type: MappingType::PortRestricted,
        port_alloc: PortAlloc::Random,
        pooling: Pooling::Paired,
        external_pool: vec![Ipv4Addr::new(203, 0, 113, 1)],
        udp_timeout: cgn_timeout,
        tcp_timeout: 7200,
        hairpin: Hairpin::Off,
        internal_range: "100.64.0.0/10".parse().expect("valid"),
    };
    let spec: Vec<Option<NatConfig>> = (1..=hops)
        .map(|h| match h {
            1 => Some(cpe.clone()),
            h if h == cgn_hop => Some(cgn.clone()),
            _ => None,
        })
        .collect();
    let mut b = TopologyBuilder::new(seed);
    let chain = b.chain(spec);
    b.host("client", vec![Ipv4Addr::new(192, 168, 1, 10)], Some(chain[0]));
    b.host(SERVER, SERVER_IPS.to_vec(), None);
    b.build()
}
