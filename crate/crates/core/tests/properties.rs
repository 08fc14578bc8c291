use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::{Ipv4Addr, SocketAddrV4};

use cgnscope_core::addr::{Asn, ReservedRange, RoutingTable};
use cgnscope_core::detect::dht::{classify_as, components, largest_cluster, Cluster, LeakageGraph};
use cgnscope_core::detect::session::{classify_noncellular, CpeBlocks};
use cgnscope_core::probe::{infer_port_allocation, ttl_enumerate, PortStrategy, ProbePlan, SimProbe};
use cgnscope_core::record::{Access, AsVerdict, Evidence, SessionRecord, Verdict};
use cgnscope_core::report::{aggregate, Population};
use cgnscope_core::sim::{Hairpin, MappingType, NatConfig, NatDevice, Pooling, PortAlloc, Proto, SimTime};
use cgnscope_core::synth::probe::{ttl_chain, SERVER};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn edge(p: u8, i: u8, port: u16) -> (Ipv4Addr, SocketAddrV4) {
    (Ipv4Addr::new(60, 1, 0, p), SocketAddrV4::new(Ipv4Addr::new(100, 64, 0, i), port))
}

fn graph(edges: &[(u8, u8, u16)]) -> LeakageGraph {
    LeakageGraph {
        asn: Asn(1),
        range: ReservedRange::R100X,
        edges: edges.iter().map(|&(p, i, port)| edge(p, i, port)).collect(),
    }
}

fn edges() -> impl Strategy<Value = Vec<(u8, u8, u16)>> {
    prop::collection::vec((1u8..=12, 1u8..=12, 6881u16..=6883), 0..60)
}

/// Components by breadth-first search over an adjacency map.
fn bfs_components(g: &LeakageGraph) -> Vec<Cluster> {
    #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
    enum V {
        P(Ipv4Addr),
        I(SocketAddrV4),
    }
    let mut adj: BTreeMap<V, Vec<V>> = BTreeMap::new();
    for (p, i) in &g.edges {
        adj.entry(V::P(*p)).or_default().push(V::I(*i));
        adj.entry(V::I(*i)).or_default().push(V::P(*p));
    }
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for &start in adj.keys() {
        if !seen.insert(start) {
            continue;
        }
        let mut c = Cluster { public: BTreeSet::new(), internal: BTreeSet::new() };
        let mut q = VecDeque::from([start]);
        while let Some(v) = q.pop_front() {
            match v {
                V::P(p) => c.public.insert(p),
                V::I(i) => c.internal.insert(i),
            };
            for &w in &adj[&v] {
                if seen.insert(w) {
                    q.push_back(w);
                }
            }
        }
        out.push(c);
    }
    out
}

fn brute_largest(g: &LeakageGraph) -> Option<Cluster> {
    let mut best: Option<Cluster> = None;
    for c in bfs_components(g) {
        let better = match &best {
            None => true,
            Some(b) => {
                let key = |c: &Cluster| (c.public_ips(), c.internal_ips());
                key(&c) > key(b) || (key(&c) == key(b) && c.public.first() < b.public.first())
            }
        };
        if better {
            best = Some(c);
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 256, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn largest_cluster_matches_search(e in edges()) {
        let g = graph(&e);
        let mut a = components(&g);
        let mut b = bfs_components(&g);
        a.sort_by(|x, y| x.public.cmp(&y.public).then(x.internal.cmp(&y.internal)));
        b.sort_by(|x, y| x.public.cmp(&y.public).then(x.internal.cmp(&y.internal)));
        prop_assert_eq!(a, b);
        prop_assert_eq!(largest_cluster(&g), brute_largest(&g));
    }

    #[test]
    fn more_edges_never_undo_a_positive(base in edges(), extra in edges(), queried in 0usize..400) {
        let small = graph(&base);
        let mut all = base.clone();
        all.extend(extra);
        let big = graph(&all);
        let before = classify_as(Asn(1), &[small], queried).verdict;
        let after = classify_as(Asn(1), &[big], queried).verdict;
        if before == Verdict::CgnPositive {
            prop_assert_eq!(after, Verdict::CgnPositive);
        }
    }

    #[test]
    fn identity_traces_are_preserved(start in 1024u16..60000, len in 10usize..40) {
        let trace: Vec<(u16, u16)> = (0..len as u16).map(|i| (start + i, start + i)).collect();
        prop_assert_eq!(infer_port_allocation(&trace).unwrap(), PortStrategy::Preserved);
    }

    #[test]
    fn noncellular_verdict_ignores_order(
        cpes in prop::collection::vec((prop_oneof![Just(10u8), Just(100), Just(192)], 0u8..8, 1u8..250), 0..40),
        seed in any::<u64>(),
    ) {
        let table = RoutingTable::parse("60.1.0.0/16,1\n").unwrap();
        let top = CpeBlocks { blocks: vec!["192.168.1.0/24".parse().unwrap()], coverage: 1.0 };
        let sessions: Vec<SessionRecord> = cpes
            .iter()
            .enumerate()
            .map(|(n, &(a, b, c))| {
                let mut s = SessionRecord::new(format!("s{n}"), Asn(1), Access::NonCellular, Ipv4Addr::new(192, 168, 1, 2), Ipv4Addr::new(60, 1, 0, 1));
                let second = if a == 100 { 64 + b } else { 168 };
                s.ip_cpe = Some(Ipv4Addr::new(a, second, b, c));
                s
            })
            .collect();
        let mut shuffled = sessions.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        match (classify_noncellular(Asn(1), &sessions, &top, &table), classify_noncellular(Asn(1), &shuffled, &top, &table)) {
            (Ok(a), Ok(b)) => prop_assert_eq!(a, b),
            (a, b) => prop_assert_eq!(a.is_err(), b.is_err()),
        }
    }

    #[test]
    fn aggregate_ignores_order(
        v in prop::collection::vec((1u32..30, 0usize..3, 0usize..3), 0..60),
        seed in any::<u64>(),
    ) {
        let verdicts = verdict_set(&v);
        let mut shuffled = verdicts.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let pops = [Population::new("all", (1..30).map(Asn)), Population::new("low", (1..10).map(Asn))];
        let a = aggregate(&verdicts, &pops).unwrap();
        let b = aggregate(&shuffled, &pops).unwrap();
        prop_assert_eq!(a.rows, b.rows);
    }
}

/// One verdict per (asn, method); later duplicates are dropped.
fn verdict_set(v: &[(u32, usize, usize)]) -> Vec<AsVerdict> {
    let mut seen = BTreeSet::new();
    let verdicts = [Verdict::CgnPositive, Verdict::Negative, Verdict::Insufficient];
    v.iter()
        .filter(|(asn, m, _)| seen.insert((*asn, *m)))
        .map(|&(asn, m, k)| {
            let evidence = match m {
                0 => Evidence::Dht { pub_ips: 0, int_ips: 0, range: None, ranges: vec![], queried_peers: 0 },
                1 => Evidence::Session {
                    access: Access::NonCellular,
                    class: None,
                    n: 0,
                    distinct24: 0,
                    sessions: 0,
                    categories: Default::default(),
                    internal_ranges: vec![],
                },
                _ => Evidence::Session {
                    access: Access::Cellular,
                    class: None,
                    n: 0,
                    distinct24: 0,
                    sessions: 0,
                    categories: Default::default(),
                    internal_ranges: vec![],
                },
            };
            AsVerdict { asn: Asn(asn), verdict: verdicts[k], evidence }
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn random_allocation_spans_the_port_range(seed in any::<u64>(), tcp in any::<bool>()) {
        let cfg = NatConfig {
            mapping_type: MappingType::PortRestricted,
            port_alloc: PortAlloc::Random,
            pooling: Pooling::Paired,
            external_pool: vec![Ipv4Addr::new(203, 0, 113, 1)],
            udp_timeout: 60,
            tcp_timeout: 600,
            hairpin: Hairpin::Off,
            internal_range: "10.0.0.0/8".parse().unwrap(),
        };
        let mut nat = NatDevice::new(cfg, ChaCha8Rng::seed_from_u64(seed));
        let proto = if tcp { Proto::Tcp } else { Proto::Udp };
        let dst: SocketAddrV4 = "198.51.100.1:80".parse().unwrap();
        let (mut lo, mut hi) = (u16::MAX, 0);
        for f in 0..10_000u32 {
            let int = SocketAddrV4::new(Ipv4Addr::new(10, 0, (f / 250) as u8, (f % 250) as u8 + 2), 40000);
            let ext = nat.allocate_mapping(proto, int, dst, SimTime(0)).unwrap();
            lo = lo.min(ext.port());
            hi = hi.max(ext.port());
        }
        prop_assert!(f64::from(hi - lo) >= 0.9 * f64::from(65535u16 - 1024));
    }

    #[test]
    fn ttl_enumeration_locates_the_carrier_nat(
        cgn_hop in 2u8..=10,
        extra in 0u8..=3,
        timeout in 10u64..=200,
        cpe_timeout in prop_oneof![Just(300u64), 10u64..=200],
        seed in any::<u64>(),
    ) {
        let topo = ttl_chain(cgn_hop, timeout, cgn_hop + extra, cpe_timeout, seed).unwrap();
        let mut p = SimProbe::new(topo, "client", SERVER).unwrap();
        let r = ttl_enumerate(&mut p, 30, &ProbePlan::default()).unwrap();
        let hops: Vec<u8> = r.nats.iter().map(|n| n.hop).collect();
        let want: Vec<u8> = if cpe_timeout <= 200 { vec![1, cgn_hop] } else { vec![cgn_hop] };
        prop_assert_eq!(hops, want);
        let cgn = r.nats.last().unwrap();
        prop_assert!(cgn.contains(timeout as u32), "{:?} vs {}", cgn, timeout);
        prop_assert!(cgn.timeout_high - cgn.timeout_low <= 10);
        prop_assert!(r.address_mismatch && !r.unstable_path);
    }
}
