//! Per-AS CGN classification from leaked internal DHT contacts.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::{Ipv4Addr, SocketAddrV4};

use serde::Serialize;

use crate::addr::{classify_reserved, lookup_asn, Asn, ReservedRange, RoutingTable};
use crate::dht::PeerIdentity;
use crate::record::{AsVerdict, Evidence, PeerRecord, Verdict};

pub const MIN_PUBLIC: usize = 5;
pub const MIN_INTERNAL: usize = 5;
pub const MIN_QUERIED: usize = 200;

/// Drops every internal peer identity that was reported from more than one
/// AS, along with internal reports from reporters outside the routing
/// table. Reports of routable peers are kept as they are.
pub fn filter_exclusive(records: &[PeerRecord], table: &RoutingTable) -> Vec<PeerRecord> {
    let mut reporter_as: HashMap<PeerIdentity, BTreeSet<Asn>> = HashMap::new();
    for r in records {
        if classify_reserved(r.reported_ip).is_some() {
            if let Some(asn) = lookup_asn(r.reporter_ip, table) {
                reporter_as.entry(r.reported()).or_default().insert(asn);
            }
        }
    }
    records
        .iter()
        .filter(|r| {
            classify_reserved(r.reported_ip).is_none()
                || (lookup_asn(r.reporter_ip, table).is_some() && reporter_as[&r.reported()].len() == 1)
        })
        .cloned()
        .collect()
}

/// Bipartite graph of public leaker addresses and the internal endpoints
/// they leaked, for one AS and one reserved range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LeakageGraph {
    pub asn: Asn,
    pub range: ReservedRange,
    pub edges: BTreeSet<(Ipv4Addr, SocketAddrV4)>,
}

/// One graph per (AS, reserved range), ordered by AS then range. Reporters
/// that are themselves internal or unattributable contribute no edges.
pub fn build_graphs(records: &[PeerRecord], table: &RoutingTable) -> Vec<LeakageGraph> {
    let mut graphs: BTreeMap<(Asn, ReservedRange), BTreeSet<(Ipv4Addr, SocketAddrV4)>> = BTreeMap::new();
    for r in records {
        let Some(range) = classify_reserved(r.reported_ip) else { continue };
        if classify_reserved(r.reporter_ip).is_some() {
            continue;
        }
        let Some(asn) = lookup_asn(r.reporter_ip, table) else { continue };
        graphs
            .entry((asn, range))
            .or_default()
            .insert((r.reporter_ip, SocketAddrV4::new(r.reported_ip, r.reported_port)));
    }
    graphs.into_iter().map(|((asn, range), edges)| LeakageGraph { asn, range, edges }).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Cluster {
    pub public: BTreeSet<Ipv4Addr>,
    pub internal: BTreeSet<SocketAddrV4>,
}

impl Cluster {
    pub fn public_ips(&self) -> usize {
        self.public.len()
    }

    /// Distinct internal addresses; ports are ignored.
    pub fn internal_ips(&self) -> usize {
        self.internal.iter().map(|e| *e.ip()).collect::<BTreeSet<_>>().len()
    }

    pub fn qualifies(&self) -> bool {
        self.public_ips() >= MIN_PUBLIC && self.internal_ips() >= MIN_INTERNAL
    }

    /// Larger public count first, then larger internal count, then the
    /// smaller first public address.
    fn rank_key(&self) -> (usize, usize, std::cmp::Reverse<Option<Ipv4Addr>>) {
        (self.public_ips(), self.internal_ips(), std::cmp::Reverse(self.public.first().copied()))
    }
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (a, b) = (self.find(a), self.find(b));
        if a == b {
            return;
        }
        match self.rank[a].cmp(&self.rank[b]) {
            std::cmp::Ordering::Less => self.parent[a] = b,
            std::cmp::Ordering::Greater => self.parent[b] = a,
            std::cmp::Ordering::Equal => {
                self.parent[b] = a;
                self.rank[a] += 1;
            }
        }
    }
}

/// Connected components of the graph.
pub fn components(g: &LeakageGraph) -> Vec<Cluster> {
    let mut left: BTreeMap<Ipv4Addr, usize> = BTreeMap::new();
    let mut right: BTreeMap<SocketAddrV4, usize> = BTreeMap::new();
    for (p, i) in &g.edges {
        let n = left.len() + right.len();
        left.entry(*p).or_insert(n);
        let n = left.len() + right.len();
        right.entry(*i).or_insert(n);
    }
    let mut uf = UnionFind::new(left.len() + right.len());
    for (p, i) in &g.edges {
        uf.union(left[p], right[i]);
    }
    let mut out: BTreeMap<usize, Cluster> = BTreeMap::new();
    for (p, &v) in &left {
        let root = uf.find(v);
        out.entry(root)
            .or_insert_with(|| Cluster { public: BTreeSet::new(), internal: BTreeSet::new() })
            .public
            .insert(*p);
    }
    for (i, &v) in &right {
        let root = uf.find(v);
        out.entry(root)
            .or_insert_with(|| Cluster { public: BTreeSet::new(), internal: BTreeSet::new() })
            .internal
            .insert(*i);
    }
    out.into_values().collect()
}

pub fn largest_cluster(g: &LeakageGraph) -> Option<Cluster> {
    components(g).into_iter().max_by_key(Cluster::rank_key)
}

/// Verdict for one AS from its graphs. Any component reaching both
/// thresholds makes the AS positive, so more evidence never turns a
/// positive verdict negative.
pub fn classify_as(asn: Asn, graphs: &[LeakageGraph], queried_peers: usize) -> AsVerdict {
    let mut best: Option<(Cluster, ReservedRange)> = None;
    let mut best_qualifying: Option<(Cluster, ReservedRange)> = None;
    let mut ranges = Vec::new();
    for g in graphs.iter().filter(|g| g.asn == asn) {
        let comps = components(g);
        if let Some(c) = comps.iter().filter(|c| c.qualifies()).max_by_key(|c| c.rank_key()) {
            ranges.push(g.range);
            if best_qualifying.as_ref().is_none_or(|(b, _)| c.rank_key() > b.rank_key()) {
                best_qualifying = Some((c.clone(), g.range));
            }
        }
        if let Some(c) = comps.into_iter().max_by_key(Cluster::rank_key) {
            if best.as_ref().is_none_or(|(b, _)| c.rank_key() > b.rank_key()) {
                best = Some((c, g.range));
            }
        }
    }
    let positive = best_qualifying.is_some();
    let shown = best_qualifying.or(best);
    let verdict = if positive {
        Verdict::CgnPositive
    } else if queried_peers < MIN_QUERIED {
        Verdict::Insufficient
    } else {
        Verdict::Negative
    };
    AsVerdict {
        asn,
        verdict,
        evidence: Evidence::Dht {
            pub_ips: shown.as_ref().map_or(0, |(c, _)| c.public_ips()),
            int_ips: shown.as_ref().map_or(0, |(c, _)| c.internal_ips()),
            range: shown.map(|(_, r)| r),
            ranges,
            queried_peers,
        },
    }
}

/// Distinct reporting peer identities per reporter AS.
pub fn queried_peers(records: &[PeerRecord], table: &RoutingTable) -> BTreeMap<Asn, usize> {
    let mut seen: BTreeMap<Asn, BTreeSet<PeerIdentity>> = BTreeMap::new();
    for r in records {
        if let Some(asn) = lookup_asn(r.reporter_ip, table) {
            seen.entry(asn).or_default().insert(r.reporter());
        }
    }
    seen.into_iter().map(|(a, s)| (a, s.len())).collect()
}

/// Full pipeline: one verdict per AS that has any attributable reporter.
pub fn detect_dht(records: &[PeerRecord], table: &RoutingTable) -> Vec<AsVerdict> {
    let queried = queried_peers(records, table);
    let graphs = build_graphs(&filter_exclusive(records, table), table);
    queried.iter().map(|(asn, q)| classify_as(*asn, &graphs, *q)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dht::NodeId;

    fn table() -> RoutingTable {
        RoutingTable::parse("60.1.0.0/16,1\n60.2.0.0/16,2\n").unwrap()
    }

    fn rec(reporter: &str, reported: &str, id: u8) -> PeerRecord {
        let ep = |s: &str| s.parse::<SocketAddrV4>().unwrap();
        PeerRecord::new(
            0.0,
            PeerIdentity { endpoint: ep(reporter), nodeid: NodeId([1; 20]) },
            PeerIdentity { endpoint: ep(reported), nodeid: NodeId([id; 20]) },
            false,
        )
    }

    fn graph(edges: &[(&str, &str)]) -> LeakageGraph {
        LeakageGraph {
            asn: Asn(1),
            range: ReservedRange::R100X,
            edges: edges.iter().map(|(p, i)| (p.parse().unwrap(), i.parse().unwrap())).collect(),
        }
    }

    #[test]
    fn vpn_leaks_are_removed() {
        let t = table();
        let rs = vec![
            rec("60.1.0.1:1", "10.0.0.5:6881", 7),
            rec("60.2.0.1:1", "10.0.0.5:6881", 7),
            rec("60.1.0.2:1", "10.0.0.6:6881", 8),
            rec("60.1.0.3:1", "10.0.0.6:6881", 8),
            rec("60.1.0.4:1", "10.0.0.6:6881", 8),
            rec("60.1.0.5:1", "60.2.0.9:6881", 9),
            rec("60.2.0.5:1", "60.2.0.9:6881", 9),
        ];
        let kept = filter_exclusive(&rs, &t);
        assert_eq!(kept.len(), 5);
        assert!(kept.iter().all(|r| r.reported_ip != "10.0.0.5".parse::<Ipv4Addr>().unwrap()));
        assert!(filter_exclusive(&[], &t).is_empty());
    }

    #[test]
    fn graphs_split_by_range() {
        let t = table();
        let rs = vec![
            rec("60.1.0.1:1", "10.0.0.5:6881", 7),
            rec("60.1.0.1:1", "100.64.0.5:6881", 8),
            rec("60.1.0.1:1", "60.1.0.9:6881", 9),
            rec("10.0.0.3:1", "10.0.0.7:6881", 10),
        ];
        let g = build_graphs(&rs, &t);
        assert_eq!(
            g.iter().map(|g| (g.asn, g.range)).collect::<Vec<_>>(),
            vec![(Asn(1), ReservedRange::R10X), (Asn(1), ReservedRange::R100X)]
        );
        assert_eq!(g[0].edges.len(), 1);
    }

    #[test]
    fn star_and_max_by_public() {
        let star: Vec<(String, String)> =
            (0..1000).map(|i| ("60.1.0.1".to_string(), format!("100.64.{}.{}:1", i / 250, i % 250 + 1))).collect();
        let refs: Vec<(&str, &str)> = star.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect();
        let c = largest_cluster(&graph(&refs)).unwrap();
        assert_eq!((c.public_ips(), c.internal_ips()), (1, 1000));

        let mut e = Vec::new();
        let names: Vec<(String, String)> = (0..3)
            .flat_map(|p| (0..4).map(move |i| (format!("60.1.0.{}", p + 1), format!("100.64.0.{}:1", i + 1))))
            .chain(
                (0..5)
                    .flat_map(|p| (0..2).map(move |i| (format!("60.1.1.{}", p + 1), format!("100.64.1.{}:1", i + 1)))),
            )
            .collect();
        e.extend(names.iter().map(|(a, b)| (a.as_str(), b.as_str())));
        let c = largest_cluster(&graph(&e)).unwrap();
        assert_eq!((c.public_ips(), c.internal_ips()), (5, 2));
    }

    fn grid(p: usize, i: usize) -> LeakageGraph {
        let e: Vec<(String, String)> = (0..p)
            .flat_map(|a| (0..i).map(move |b| (format!("60.1.0.{}", a + 1), format!("100.64.0.{}:6881", b + 1))))
            .collect();
        graph(&e.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect::<Vec<_>>())
    }

    #[test]
    fn thresholds() {
        assert_eq!(classify_as(Asn(1), &[grid(5, 5)], 0).verdict, Verdict::CgnPositive);
        assert_eq!(classify_as(Asn(1), &[grid(4, 5)], 500).verdict, Verdict::Negative);
        assert_eq!(classify_as(Asn(1), &[grid(5, 4)], 500).verdict, Verdict::Negative);
        assert_eq!(classify_as(Asn(1), &[grid(4, 5)], 199).verdict, Verdict::Insufficient);
        assert_eq!(classify_as(Asn(1), &[], 50).verdict, Verdict::Insufficient);
    }

    #[test]
    fn isolated_leaks_are_negative() {
        let e: Vec<(String, String)> = (0..1000)
            .map(|i| (format!("60.1.{}.{}", i / 250, i % 250 + 1), format!("192.168.{}.{}:1", i / 250, i % 250 + 1)))
            .collect();
        let g = LeakageGraph {
            range: ReservedRange::R192X,
            ..graph(&e.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect::<Vec<_>>())
        };
        let v = classify_as(Asn(1), &[g], 1000);
        assert_eq!(v.verdict, Verdict::Negative);
        assert!(matches!(v.evidence, Evidence::Dht { pub_ips: 1, int_ips: 1, .. }));
    }

    #[test]
    fn a_wide_star_does_not_hide_a_cluster() {
        let mut e: Vec<(String, String)> =
            (0..7).map(|a| (format!("60.1.2.{}", a + 1), "100.64.9.9:1".to_string())).collect();
        e.extend(
            (0..5).flat_map(|a| (0..5).map(move |b| (format!("60.1.0.{}", a + 1), format!("100.64.0.{}:6881", b + 1)))),
        );
        let g = graph(&e.iter().map(|(a, b)| (a.as_str(), b.as_str())).collect::<Vec<_>>());
        assert_eq!(largest_cluster(&g).unwrap().public_ips(), 7);
        let v = classify_as(Asn(1), &[g], 300);
        assert_eq!(v.verdict, Verdict::CgnPositive);
        assert!(matches!(v.evidence, Evidence::Dht { pub_ips: 5, int_ips: 5, .. }));
    }
}
