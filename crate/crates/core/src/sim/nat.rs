//! One NAT device: mapping table, port and address allocation, filtering.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::net::{Ipv4Addr, SocketAddrV4};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::config::{MappingType, NatConfig, Pooling, PortAlloc};
use super::{Proto, SimTime};

pub const PORT_MIN: u16 = 1024;
pub const PORT_MAX: u16 = 65535;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AllocationFailure {
    #[error("no free {proto} port on {ip}")]
    PortsExhausted { proto: Proto, ip: Ipv4Addr },
    #[error("no free port chunk on {ip}")]
    ChunksExhausted { ip: Ipv4Addr },
    #[error("port chunk of {subscriber} on {ip} is full")]
    ChunkFull { ip: Ipv4Addr, subscriber: Ipv4Addr },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MappingKey {
    pub proto: Proto,
    pub int_ep: SocketAddrV4,
    /// Present only on symmetric NATs.
    pub dst: Option<SocketAddrV4>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingEntry {
    pub proto: Proto,
    pub int_ep: SocketAddrV4,
    pub ext_ep: SocketAddrV4,
    pub dst_key: Option<SocketAddrV4>,
    /// Remote endpoints this mapping has sent to; drives filtering.
    pub contacted: BTreeSet<SocketAddrV4>,
    pub last_active: SimTime,
}

impl MappingEntry {
    fn permits(&self, mapping_type: MappingType, src: SocketAddrV4) -> bool {
        match mapping_type {
            MappingType::FullCone => true,
            MappingType::AddressRestricted => self.contacted.iter().any(|c| c.ip() == src.ip()),
            MappingType::PortRestricted => self.contacted.contains(&src),
            MappingType::Symmetric => self.dst_key == Some(src),
        }
    }
}

/// Why an inbound packet was not admitted.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InboundDrop {
    NoMapping,
    Filtered,
}

#[derive(Debug, Clone)]
pub struct NatDevice {
    config: NatConfig,
    rng: ChaCha8Rng,
    entries: BTreeMap<MappingKey, MappingEntry>,
    by_ext: HashMap<(Proto, SocketAddrV4), MappingKey>,
    live_ports: HashMap<(Proto, Ipv4Addr), BTreeSet<u16>>,
    seq_cursor: HashMap<(Proto, Ipv4Addr), u16>,
    /// (external ip, subscriber ip) -> chunk base.
    chunks: HashMap<(Ipv4Addr, Ipv4Addr), u16>,
    used_chunks: HashMap<Ipv4Addr, BTreeSet<u16>>,
    /// No mapping can expire at or before this instant (ms).
    horizon: u64,
}

/// Stable mixing of the subscriber address onto the pool.
pub fn paired_index(int_ip: Ipv4Addr, pool_len: usize) -> usize {
    let mut z = u64::from(u32::from(int_ip)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z % pool_len as u64) as usize
}

impl NatDevice {
    pub fn new(config: NatConfig, rng: ChaCha8Rng) -> Self {
        NatDevice {
            config,
            rng,
            entries: BTreeMap::new(),
            by_ext: HashMap::new(),
            live_ports: HashMap::new(),
            seq_cursor: HashMap::new(),
            chunks: HashMap::new(),
            used_chunks: HashMap::new(),
            horizon: u64::MAX,
        }
    }

    pub fn config(&self) -> &NatConfig {
        &self.config
    }

    pub fn mappings(&self) -> impl Iterator<Item = &MappingEntry> {
        self.entries.values()
    }

    pub fn mapping_count(&self) -> usize {
        self.entries.len()
    }

    pub fn owns(&self, ip: Ipv4Addr) -> bool {
        self.config.external_pool.contains(&ip)
    }

    /// Chunk base assigned to `subscriber` on `ext_ip`, if any.
    pub fn chunk_of(&self, ext_ip: Ipv4Addr, subscriber: Ipv4Addr) -> Option<u16> {
        self.chunks.get(&(ext_ip, subscriber)).copied()
    }

    fn key(&self, proto: Proto, int_ep: SocketAddrV4, dst: SocketAddrV4) -> MappingKey {
        let dst = (self.config.mapping_type == MappingType::Symmetric).then_some(dst);
        MappingKey { proto, int_ep, dst }
    }

    fn timeout_ms(&self, proto: Proto) -> u64 {
        let secs = match proto {
            Proto::Udp => self.config.udp_timeout,
            Proto::Tcp => self.config.tcp_timeout,
        };
        secs * 1000
    }

    /// Drops every entry idle for strictly longer than its timeout.
    pub fn expire(&mut self, now: SimTime) -> usize {
        if now.0 <= self.horizon {
            return 0;
        }
        let dead: Vec<MappingKey> = self
            .entries
            .iter()
            .filter(|(k, e)| now.0.saturating_sub(e.last_active.0) > self.timeout_ms(k.proto))
            .map(|(k, _)| *k)
            .collect();
        for k in &dead {
            let e = self.entries.remove(k).expect("listed above");
            self.by_ext.remove(&(e.proto, e.ext_ep));
            if let Some(ports) = self.live_ports.get_mut(&(e.proto, *e.ext_ep.ip())) {
                ports.remove(&e.ext_ep.port());
            }
        }
        self.horizon = self
            .entries
            .iter()
            .map(|(k, e)| e.last_active.0.saturating_add(self.timeout_ms(k.proto)))
            .min()
            .unwrap_or(u64::MAX);
        dead.len()
    }

    /// Looks up the mapping for an outbound packet, creating it when needed,
    /// and records the destination for filtering. Returns the external
    /// endpoint.
    pub fn allocate_mapping(
        &mut self,
        proto: Proto,
        int_ep: SocketAddrV4,
        dst: SocketAddrV4,
        now: SimTime,
    ) -> Result<SocketAddrV4, AllocationFailure> {
        let key = self.key(proto, int_ep, dst);
        self.horizon = self.horizon.min(now.0.saturating_add(self.timeout_ms(proto)));
        if let Some(e) = self.entries.get_mut(&key) {
            e.last_active = now;
            e.contacted.insert(dst);
            return Ok(e.ext_ep);
        }
        let ext_ip = self.pick_ip(*int_ep.ip());
        let port = self.pick_port(proto, ext_ip, int_ep)?;
        let ext_ep = SocketAddrV4::new(ext_ip, port);
        self.live_ports.entry((proto, ext_ip)).or_default().insert(port);
        self.by_ext.insert((proto, ext_ep), key);
        self.entries.insert(
            key,
            MappingEntry {
                proto,
                int_ep,
                ext_ep,
                dst_key: key.dst,
                contacted: BTreeSet::from([dst]),
                last_active: now,
            },
        );
        Ok(ext_ep)
    }

    /// Admits an inbound packet addressed to `ext_ep`. Hairpinned packets
    /// skip filtering.
    pub fn inbound(
        &mut self,
        proto: Proto,
        src: SocketAddrV4,
        ext_ep: SocketAddrV4,
        now: SimTime,
        hairpinned: bool,
    ) -> Result<SocketAddrV4, InboundDrop> {
        let key = *self.by_ext.get(&(proto, ext_ep)).ok_or(InboundDrop::NoMapping)?;
        let mapping_type = self.config.mapping_type;
        let e = self.entries.get_mut(&key).expect("by_ext is kept in sync");
        if !hairpinned && !e.permits(mapping_type, src) {
            return Err(InboundDrop::Filtered);
        }
        e.last_active = now;
        let int_ep = e.int_ep;
        self.horizon = self.horizon.min(now.0.saturating_add(self.timeout_ms(proto)));
        Ok(int_ep)
    }

    fn pick_ip(&mut self, int_ip: Ipv4Addr) -> Ipv4Addr {
        let pool = &self.config.external_pool;
        let i = match self.config.pooling {
            Pooling::Paired => paired_index(int_ip, pool.len()),
            Pooling::Arbitrary => self.rng.gen_range(0..pool.len()),
        };
        pool[i]
    }

    fn pick_port(&mut self, proto: Proto, ext_ip: Ipv4Addr, int_ep: SocketAddrV4) -> Result<u16, AllocationFailure> {
        let exhausted = AllocationFailure::PortsExhausted { proto, ip: ext_ip };
        let live = self.live_ports.entry((proto, ext_ip)).or_default();
        match self.config.port_alloc {
            PortAlloc::Preserve => {
                let want = int_ep.port();
                if want != 0 && !live.contains(&want) {
                    return Ok(want);
                }
                let above = (want.saturating_add(1).max(PORT_MIN)..=PORT_MAX).find(|p| !live.contains(p));
                above.or_else(|| (PORT_MIN..=PORT_MAX).find(|p| !live.contains(p))).ok_or(exhausted)
            }
            PortAlloc::Sequential => {
                let cursor = self.seq_cursor.entry((proto, ext_ip)).or_insert(PORT_MIN);
                let start = *cursor;
                let found = (start..=PORT_MAX).chain(PORT_MIN..start).find(|p| !live.contains(p)).ok_or(exhausted)?;
                *cursor = if found == PORT_MAX { PORT_MIN } else { found + 1 };
                Ok(found)
            }
            PortAlloc::Random => {
                let free = usize::from(PORT_MAX - PORT_MIN) + 1 - live.len();
                if free == 0 {
                    return Err(exhausted);
                }
                Ok(random_free(&mut self.rng, live, PORT_MIN, PORT_MAX, free))
            }
            PortAlloc::RandomChunk(size) => {
                let subscriber = *int_ep.ip();
                let base = match self.chunks.get(&(ext_ip, subscriber)) {
                    Some(&b) => b,
                    None => {
                        let b = assign_chunk(&mut self.rng, self.used_chunks.entry(ext_ip).or_default(), size)
                            .ok_or(AllocationFailure::ChunksExhausted { ip: ext_ip })?;
                        self.chunks.insert((ext_ip, subscriber), b);
                        b
                    }
                };
                let hi = (u32::from(base) + u32::from(size) - 1) as u16;
                let free = usize::from(size) - live.range(base..=hi).count();
                if free == 0 {
                    return Err(AllocationFailure::ChunkFull { ip: ext_ip, subscriber });
                }
                Ok(random_free(&mut self.rng, live, base, hi, free))
            }
        }
    }
}

/// Uniform draw from the ports in `[lo, hi]` not in `live`.
fn random_free(rng: &mut ChaCha8Rng, live: &BTreeSet<u16>, lo: u16, hi: u16, free: usize) -> u16 {
    let span = usize::from(hi - lo) + 1;
    // Rejection sampling while the range is mostly free.
    if free * 4 >= span {
        loop {
            let p = rng.gen_range(lo..=hi);
            if !live.contains(&p) {
                return p;
            }
        }
    }
    let nth = rng.gen_range(0..free);
    (lo..=hi).filter(|p| !live.contains(p)).nth(nth).expect("free > nth")
}

/// Picks an unused, size-aligned block inside `[1024, 65536)`.
fn assign_chunk(rng: &mut ChaCha8Rng, used: &mut BTreeSet<u16>, size: u16) -> Option<u16> {
    let size = u32::from(size);
    let first = u32::from(PORT_MIN).div_ceil(size);
    let last = 65536 / size; // exclusive
    let free: Vec<u16> = (first..last).map(|k| (k * size) as u16).filter(|b| !used.contains(b)).collect();
    if free.is_empty() {
        return None;
    }
    let b = free[rng.gen_range(0..free.len())];
    used.insert(b);
    Some(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::config::Hairpin;
    use rand::SeedableRng;

    fn ep(s: &str) -> SocketAddrV4 {
        s.parse().unwrap()
    }

    fn cfg(mapping_type: MappingType, port_alloc: PortAlloc, pooling: Pooling, pool: &[&str]) -> NatConfig {
        NatConfig {
            mapping_type,
            port_alloc,
            pooling,
            external_pool: pool.iter().map(|s| s.parse().unwrap()).collect(),
            udp_timeout: 60,
            tcp_timeout: 600,
            hairpin: Hairpin::Off,
            internal_range: "10.0.0.0/8".parse().unwrap(),
        }
    }

    fn nat(c: NatConfig) -> NatDevice {
        NatDevice::new(c, ChaCha8Rng::seed_from_u64(3))
    }

    #[test]
    fn preserve_keeps_free_port() {
        let mut n = nat(cfg(MappingType::FullCone, PortAlloc::Preserve, Pooling::Paired, &["5.5.5.5"]));
        let ext = n.allocate_mapping(Proto::Udp, ep("10.0.0.1:50000"), ep("9.9.9.9:53"), SimTime(0)).unwrap();
        assert_eq!(ext, ep("5.5.5.5:50000"));
    }

    #[test]
    fn preserve_collision_takes_lowest_free_above() {
        let mut n = nat(cfg(MappingType::FullCone, PortAlloc::Preserve, Pooling::Paired, &["5.5.5.5"]));
        let d = ep("9.9.9.9:53");
        n.allocate_mapping(Proto::Udp, ep("10.0.0.1:50000"), d, SimTime(0)).unwrap();
        n.allocate_mapping(Proto::Udp, ep("10.0.0.2:50001"), d, SimTime(0)).unwrap();
        let ext = n.allocate_mapping(Proto::Udp, ep("10.0.0.3:50000"), d, SimTime(0)).unwrap();
        assert_eq!(ext.port(), 50002);
        // TCP has its own port space.
        let ext = n.allocate_mapping(Proto::Tcp, ep("10.0.0.3:50000"), d, SimTime(0)).unwrap();
        assert_eq!(ext.port(), 50000);
    }

    #[test]
    fn sequential_counts_up_from_1024() {
        let mut n = nat(cfg(MappingType::FullCone, PortAlloc::Sequential, Pooling::Paired, &["5.5.5.5"]));
        let d = ep("9.9.9.9:53");
        let ports: Vec<u16> = (0..5)
            .map(|i| {
                n.allocate_mapping(Proto::Udp, SocketAddrV4::new("10.0.0.1".parse().unwrap(), 40000 + i), d, SimTime(0))
                    .unwrap()
                    .port()
            })
            .collect();
        assert_eq!(ports, vec![1024, 1025, 1026, 1027, 1028]);
    }

    #[test]
    fn chunk_confinement_example() {
        let mut n = nat(cfg(MappingType::FullCone, PortAlloc::RandomChunk(4096), Pooling::Paired, &["5.5.5.5"]));
        let sub: Ipv4Addr = "10.0.0.7".parse().unwrap();
        let d = ep("9.9.9.9:53");
        let mut ports = Vec::new();
        for i in 0..200 {
            ports
                .push(n.allocate_mapping(Proto::Tcp, SocketAddrV4::new(sub, 30000 + i), d, SimTime(0)).unwrap().port());
        }
        let base = n.chunk_of("5.5.5.5".parse().unwrap(), sub).unwrap();
        assert_eq!(base % 4096, 0);
        assert!(ports.iter().all(|&p| (base..base + 4096).contains(&p)));
    }

    #[test]
    fn symmetric_makes_one_mapping_per_destination() {
        let mut n = nat(cfg(MappingType::Symmetric, PortAlloc::Preserve, Pooling::Paired, &["5.5.5.5"]));
        let src = ep("10.0.0.1:4000");
        let a = n.allocate_mapping(Proto::Udp, src, ep("1.1.1.1:80"), SimTime(0)).unwrap();
        let b = n.allocate_mapping(Proto::Udp, src, ep("2.2.2.2:80"), SimTime(0)).unwrap();
        assert_ne!(a, b);
        assert_eq!(n.mapping_count(), 2);

        let mut cone = nat(cfg(MappingType::PortRestricted, PortAlloc::Preserve, Pooling::Paired, &["5.5.5.5"]));
        let a = cone.allocate_mapping(Proto::Udp, src, ep("1.1.1.1:80"), SimTime(0)).unwrap();
        let b = cone.allocate_mapping(Proto::Udp, src, ep("2.2.2.2:80"), SimTime(0)).unwrap();
        assert_eq!(a, b);
        assert_eq!(cone.mapping_count(), 1);
    }

    #[test]
    fn expiry_is_strict() {
        let mut n = nat(cfg(MappingType::FullCone, PortAlloc::Preserve, Pooling::Paired, &["5.5.5.5"]));
        n.allocate_mapping(Proto::Udp, ep("10.0.0.1:4000"), ep("1.1.1.1:80"), SimTime(0)).unwrap();
        assert_eq!(n.expire(SimTime::from_secs(60)), 0);
        assert_eq!(n.expire(SimTime::from_secs(61)), 1);
        assert_eq!(n.mapping_count(), 0);
    }

    #[test]
    fn sequential_exhaustion_is_an_error() {
        let mut c = cfg(MappingType::FullCone, PortAlloc::Sequential, Pooling::Paired, &["5.5.5.5"]);
        c.internal_range = "10.0.0.0/8".parse().unwrap();
        let mut n = nat(c);
        let d = ep("9.9.9.9:53");
        let total = u32::from(PORT_MAX - PORT_MIN) + 1;
        for i in 0..total {
            let ip = Ipv4Addr::from(0x0a00_0000 + i / 60000);
            let src = SocketAddrV4::new(ip, 1 + (i % 60000) as u16);
            n.allocate_mapping(Proto::Udp, src, d, SimTime(0)).unwrap();
        }
        let err = n.allocate_mapping(Proto::Udp, ep("10.9.9.9:1"), d, SimTime(0)).unwrap_err();
        assert!(matches!(err, AllocationFailure::PortsExhausted { .. }));
    }

    #[test]
    fn chunk_pool_exhaustion() {
        let mut n = nat(cfg(MappingType::FullCone, PortAlloc::RandomChunk(16384), Pooling::Paired, &["5.5.5.5"]));
        let d = ep("9.9.9.9:53");
        // 16K chunks aligned inside [1024, 65536): bases 16384, 32768, 49152.
        for i in 0..3u32 {
            let src = SocketAddrV4::new(Ipv4Addr::from(0x0a00_0001 + i), 5000);
            n.allocate_mapping(Proto::Udp, src, d, SimTime(0)).unwrap();
        }
        let err = n.allocate_mapping(Proto::Udp, ep("10.0.0.99:5000"), d, SimTime(0)).unwrap_err();
        assert!(matches!(err, AllocationFailure::ChunksExhausted { .. }));
    }

    #[test]
    fn filtering_rules() {
        let remote = ep("1.1.1.1:80");
        for (mt, from_other_port, from_other_ip) in [
            (MappingType::FullCone, true, true),
            (MappingType::AddressRestricted, true, false),
            (MappingType::PortRestricted, false, false),
            (MappingType::Symmetric, false, false),
        ] {
            let mut n = nat(cfg(mt, PortAlloc::Preserve, Pooling::Paired, &["5.5.5.5"]));
            let ext = n.allocate_mapping(Proto::Udp, ep("10.0.0.1:4000"), remote, SimTime(0)).unwrap();
            assert!(n.inbound(Proto::Udp, remote, ext, SimTime(1), false).is_ok(), "{mt:?}");
            assert_eq!(
                n.inbound(Proto::Udp, ep("1.1.1.1:81"), ext, SimTime(1), false).is_ok(),
                from_other_port,
                "{mt:?}"
            );
            assert_eq!(
                n.inbound(Proto::Udp, ep("7.7.7.7:80"), ext, SimTime(1), false).is_ok(),
                from_other_ip,
                "{mt:?}"
            );
            assert_eq!(n.inbound(Proto::Udp, remote, ep("5.5.5.5:9"), SimTime(1), false), Err(InboundDrop::NoMapping));
        }
    }
}
