//! DHT populations spread over many ASes, crawled through the simulator,
//! with per-AS ground truth.

use std::collections::BTreeMap;
use std::net::{Ipv4Addr, SocketAddrV4};

use ipnet::Ipv4Net;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::addr::{Asn, RoutingTable};
use crate::dht::simnet::SimDht;
use crate::dht::{crawl, CrawlConfig, CrawlStats, DhtError, NodeId};
use crate::record::PeerRecord;
use crate::sim::{Hairpin, HopId, MappingType, NatConfig, Pooling, PortAlloc, TopologyBuilder};

pub const FIRST_ASN: u32 = 64600;
pub const CGN_POOL: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AsKind {
    /// Peers share a carrier NAT with a pool of at least eight addresses
    /// that hairpins with the internal source preserved.
    CgnPooled,
    /// Every subscriber has a home NAT; some hairpin internally.
    HomeNat,
    /// A carrier NAT with at most four pool addresses: it leaks, but no
    /// cluster can reach five public addresses.
    SubThreshold,
}

#[derive(Debug, Clone)]
pub struct DhtSynthConfig {
    pub seed: u64,
    pub kinds: Vec<AsKind>,
    pub peers_per_as: usize,
    /// Same-AS peers each peer greets during warm-up.
    pub local_fanout: usize,
    /// Random peers anywhere each peer greets during warm-up.
    pub global_fanout: usize,
}

impl DhtSynthConfig {
    /// `n` ASes cycling through the three kinds in a 2:2:1 mix.
    pub fn mixed(n: usize, seed: u64) -> Self {
        let cycle = [AsKind::CgnPooled, AsKind::HomeNat, AsKind::CgnPooled, AsKind::HomeNat, AsKind::SubThreshold];
        DhtSynthConfig {
            seed,
            kinds: (0..n).map(|i| cycle[i % cycle.len()]).collect(),
            peers_per_as: 230,
            local_fanout: 3,
            global_fanout: 4,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AsTruth {
    pub asn: Asn,
    pub kind: AsKind,
    pub prefix: Ipv4Net,
    pub peers: usize,
    pub pool: usize,
    /// True when a correct detector should call the AS CGN-positive.
    pub detectable: bool,
}

#[derive(Debug, Clone)]
pub struct DhtFixture {
    pub records: Vec<PeerRecord>,
    pub table: RoutingTable,
    pub truth: BTreeMap<Asn, AsTruth>,
    pub stats: CrawlStats,
}

pub const BOOTSTRAP: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(198, 51, 100, 1), 6881);
pub const CRAWLER: SocketAddrV4 = SocketAddrV4::new(Ipv4Addr::new(198, 51, 100, 200), 6881);

fn cgn_config(k: u8, pool: usize) -> NatConfig {
    NatConfig {
        mapping_type: MappingType::FullCone,
        port_alloc: PortAlloc::Random,
        pooling: Pooling::Paired,
        external_pool: (0..pool).map(|i| Ipv4Addr::new(60, k, 0, 1 + i as u8)).collect(),
        udp_timeout: 7200,
        tcp_timeout: 7200,
        hairpin: Hairpin::PreserveSource,
        internal_range: "100.64.0.0/10".parse().expect("valid"),
    }
}

/// Builds the population, warms it up and crawls it.
pub fn synth_peer_records(cfg: &DhtSynthConfig) -> Result<DhtFixture, DhtError> {
    assert!(cfg.kinds.len() <= 200, "at most 200 synthetic ASes");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut b = TopologyBuilder::new(cfg.seed);
    let mut truth = BTreeMap::new();
    let mut table_text = String::new();
    // (host name, address, AS index, home index within the AS)
    let mut peers: Vec<(String, Ipv4Addr, usize, usize)> = Vec::new();

    for (a, kind) in cfg.kinds.iter().enumerate() {
        let k = (a + 1) as u8;
        let asn = Asn(FIRST_ASN + a as u32);
        let prefix: Ipv4Net = format!("60.{k}.0.0/16").parse().expect("valid");
        table_text.push_str(&format!("{prefix},{}\n", asn.0));
        let pool = match kind {
            AsKind::CgnPooled => CGN_POOL + rng.gen_range(0..=8),
            AsKind::SubThreshold => rng.gen_range(1..=4),
            AsKind::HomeNat => 1,
        };
        match kind {
            AsKind::CgnPooled | AsKind::SubThreshold => {
                let nat = b.nat(cgn_config(k, pool), None);
                for i in 0..cfg.peers_per_as {
                    let addr = Ipv4Addr::new(100, 64, (i / 200) as u8, (i % 200 + 2) as u8);
                    let name = format!("as{k}-p{i}");
                    b.host(&name, vec![addr], Some(nat));
                    peers.push((name, addr, a, i));
                }
            }
            AsKind::HomeNat => {
                let mut placed = 0;
                let mut home = 0usize;
                while placed < cfg.peers_per_as {
                    let n = rng.gen_range(1..=3).min(cfg.peers_per_as - placed);
                    let primary = Ipv4Addr::new(60, k, (home / 250) as u8, (home % 250 + 1) as u8);
                    let mut cpe = NatConfig::home(primary, "192.168.1.0/24".parse().expect("valid"));
                    cpe.mapping_type = MappingType::FullCone;
                    cpe.port_alloc = PortAlloc::Random;
                    cpe.udp_timeout = 7200;
                    cpe.hairpin = if rng.gen_bool(0.5) { Hairpin::PreserveSource } else { Hairpin::Translate };
                    if rng.gen_bool(0.2) {
                        cpe.pooling = Pooling::Arbitrary;
                        cpe.external_pool.push(Ipv4Addr::new(60, k, 128 + (home / 250) as u8, (home % 250 + 1) as u8));
                    }
                    let nat: HopId = b.nat(cpe, None);
                    for j in 0..n {
                        let addr = Ipv4Addr::new(192, 168, 1, 2 + j as u8);
                        let name = format!("as{k}-h{home}-p{j}");
                        b.host(&name, vec![addr], Some(nat));
                        peers.push((name, addr, a, home));
                    }
                    placed += n;
                    home += 1;
                }
            }
        }
        truth.insert(
            asn,
            AsTruth { asn, kind: *kind, prefix, peers: cfg.peers_per_as, pool, detectable: *kind == AsKind::CgnPooled },
        );
    }
    let boot_host = b.host("bootstrap", vec![*BOOTSTRAP.ip()], None);
    let crawler_host = b.host("crawler", vec![*CRAWLER.ip()], None);
    let topo = b.build()?;

    let mut net = SimDht::new(topo, crawler_host, CRAWLER);
    let boot = net.add_peer(boot_host, BOOTSTRAP, NodeId::random(&mut rng), true);
    let mut idx = Vec::with_capacity(peers.len());
    for (name, addr, _, _) in &peers {
        let host = net.topology().host_id(name).expect("built above");
        let ep = SocketAddrV4::new(*addr, rng.gen_range(1024..=65535));
        idx.push(net.add_peer(host, ep, NodeId::random(&mut rng), true));
    }
    let _ = boot;

    // Everyone registers with the bootstrap, which learns public endpoints.
    let mut seen: Vec<Option<SocketAddrV4>> = Vec::with_capacity(idx.len());
    for &p in &idx {
        seen.push(net.introduce(p, BOOTSTRAP)?);
    }
    let mut by_as: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    let mut by_home: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for (i, (_, _, a, h)) in peers.iter().enumerate() {
        by_as.entry(*a).or_default().push(i);
        if cfg.kinds[*a] == AsKind::HomeNat {
            by_home.entry((*a, *h)).or_default().push(i);
        }
    }
    let all: Vec<usize> = (0..peers.len()).collect();
    for i in 0..peers.len() {
        let (_, _, a, h) = peers[i];
        let mut targets: Vec<usize> = Vec::new();
        if let Some(home) = by_home.get(&(a, h)) {
            targets.extend(home.iter().copied().filter(|&j| j != i));
        }
        targets.extend(by_as[&a].choose_multiple(&mut rng, cfg.local_fanout).copied());
        targets.extend(all.choose_multiple(&mut rng, cfg.global_fanout).copied());
        for j in targets {
            if j != i {
                if let Some(ep) = seen[j] {
                    net.introduce(idx[i], ep)?;
                }
            }
        }
    }

    let crawl_cfg = CrawlConfig { budget: peers.len() + 1, ..CrawlConfig::default() };
    let (records, stats) = crawl(&mut net, &[BOOTSTRAP], &crawl_cfg, cfg.seed)?;
    Ok(DhtFixture { records, table: RoutingTable::parse(&table_text).expect("generated table is valid"), truth, stats })
}
