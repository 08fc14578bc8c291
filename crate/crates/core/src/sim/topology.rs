use std::collections::HashMap;
use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{Hairpin, NatConfig};
use super::nat::NatDevice;
use super::{Packet, Proto, SimError, SimTime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HopId(pub u32);

impl fmt::Display for HopId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HostId(pub usize);

#[derive(Debug, Clone)]
pub enum HopKind {
    Router,
    Nat(Box<NatDevice>),
}

#[derive(Debug, Clone)]
struct Hop {
    id: HopId,
    parent: Option<usize>,
    kind: HopKind,
    /// Self first, then each ancestor up to the core.
    ancestors: Vec<usize>,
    /// Realm of addresses sitting directly below this hop.
    realm: Realm,
}

#[derive(Debug, Clone)]
pub struct Host {
    pub name: String,
    pub addrs: Vec<Ipv4Addr>,
    pub attach: Option<HopId>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
enum Realm {
    Global,
    Nat(usize),
}

#[derive(Debug, Clone, Copy)]
enum Target {
    Host(usize),
    NatExternal(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DeliveryResult {
    Delivered { to: HostId, packet: Packet },
    DroppedTtl(HopId),
    DroppedFilter(HopId),
    DroppedNoRoute,
}

impl DeliveryResult {
    pub fn delivered(&self) -> Option<&Packet> {
        match self {
            DeliveryResult::Delivered { packet, .. } => Some(packet),
            _ => None,
        }
    }

    pub fn verdict(&self) -> Verdict {
        match self {
            DeliveryResult::Delivered { .. } => Verdict::Delivered,
            DeliveryResult::DroppedTtl(_) => Verdict::DroppedTtl,
            DeliveryResult::DroppedFilter(_) => Verdict::DroppedFilter,
            DeliveryResult::DroppedNoRoute => Verdict::DroppedNoRoute,
        }
    }

    pub fn hop(&self) -> Option<HopId> {
        match self {
            DeliveryResult::DroppedTtl(h) | DeliveryResult::DroppedFilter(h) => Some(*h),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Delivered,
    DroppedTtl,
    DroppedFilter,
    DroppedNoRoute,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Delivered => "delivered",
            Verdict::DroppedTtl => "dropped_ttl",
            Verdict::DroppedFilter => "dropped_filter",
            Verdict::DroppedNoRoute => "dropped_noroute",
        })
    }
}

/// One line of the packet trace: `time proto src dst ttl verdict hop`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceRecord {
    pub time: SimTime,
    pub proto: Proto,
    pub src: SocketAddrV4,
    pub dst: SocketAddrV4,
    pub ttl: u8,
    pub verdict: Verdict,
    pub hop: Option<HopId>,
}

impl fmt::Display for TraceRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {} {} {} {} ", self.time, self.proto, self.src, self.dst, self.ttl, self.verdict)?;
        match self.hop {
            Some(h) => write!(f, "{h}"),
            None => f.write_str("-"),
        }
    }
}

#[derive(Debug, Clone)]
enum PendingKind {
    Router,
    Nat(NatConfig),
}

/// Assembles a [`Topology`]. Hop ids are handed out from 1 upward in
/// creation order, so a chain built first on a fresh builder numbers its
/// hops exactly by distance from the client.
#[derive(Debug, Clone)]
pub struct TopologyBuilder {
    seed: u64,
    next_id: u32,
    hops: Vec<(HopId, Option<HopId>, PendingKind)>,
    hosts: Vec<Host>,
}

impl TopologyBuilder {
    pub fn new(seed: u64) -> Self {
        TopologyBuilder { seed, next_id: 1, hops: Vec::new(), hosts: Vec::new() }
    }

    fn fresh_id(&mut self) -> HopId {
        while self.hops.iter().any(|(id, _, _)| id.0 == self.next_id) {
            self.next_id += 1;
        }
        let id = HopId(self.next_id);
        self.next_id += 1;
        id
    }

    pub fn router(&mut self, parent: Option<HopId>) -> HopId {
        let id = self.fresh_id();
        self.hops.push((id, parent, PendingKind::Router));
        id
    }

    pub fn nat(&mut self, config: NatConfig, parent: Option<HopId>) -> HopId {
        let id = self.fresh_id();
        self.hops.push((id, parent, PendingKind::Nat(config)));
        id
    }

    /// Adds a hop under an explicit id, e.g. when loading a file.
    pub fn hop_with_id(&mut self, id: HopId, nat: Option<NatConfig>, parent: Option<HopId>) {
        let kind = nat.map_or(PendingKind::Router, PendingKind::Nat);
        self.hops.push((id, parent, kind));
    }

    /// Adds a linear chain listed from the client outward (`None` is a
    /// plain router). The last hop attaches to `parent`.
    pub fn chain_under(&mut self, hops: Vec<Option<NatConfig>>, parent: Option<HopId>) -> Vec<HopId> {
        let ids: Vec<HopId> = hops.iter().map(|_| self.fresh_id()).collect();
        for (i, nat) in hops.into_iter().enumerate() {
            let up = ids.get(i + 1).copied().or(parent);
            self.hop_with_id(ids[i], nat, up);
        }
        ids
    }

    pub fn chain(&mut self, hops: Vec<Option<NatConfig>>) -> Vec<HopId> {
        self.chain_under(hops, None)
    }

    pub fn host(&mut self, name: &str, addrs: Vec<Ipv4Addr>, attach: Option<HopId>) -> HostId {
        self.hosts.push(Host { name: name.to_string(), addrs, attach });
        HostId(self.hosts.len() - 1)
    }

    pub fn build(self) -> Result<Topology, SimError> {
        let mut hop_ids = HashMap::new();
        for (i, (id, _, _)) in self.hops.iter().enumerate() {
            if hop_ids.insert(*id, i).is_some() {
                return Err(SimError::Topology(format!("duplicate hop id {id}")));
            }
        }
        let resolve = |h: HopId| hop_ids.get(&h).copied().ok_or(SimError::UnknownHop(h.0));

        let mut parents = Vec::with_capacity(self.hops.len());
        for (_, parent, _) in &self.hops {
            parents.push(match parent {
                Some(p) => Some(resolve(*p)?),
                None => None,
            });
        }
        let mut hops = Vec::with_capacity(self.hops.len());
        for (i, (id, _, kind)) in self.hops.into_iter().enumerate() {
            let mut ancestors = vec![i];
            let mut cur = parents[i];
            while let Some(p) = cur {
                if ancestors.contains(&p) {
                    return Err(SimError::Topology(format!("cycle through hop {id}")));
                }
                ancestors.push(p);
                cur = parents[p];
            }
            let kind = match kind {
                PendingKind::Router => HopKind::Router,
                PendingKind::Nat(cfg) => {
                    cfg.validate()?;
                    let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                    rng.set_stream(u64::from(id.0));
                    HopKind::Nat(Box::new(NatDevice::new(cfg, rng)))
                }
            };
            hops.push(Hop { id, parent: parents[i], kind, ancestors, realm: Realm::Global });
        }
        for i in 0..hops.len() {
            let realm = hops[i]
                .ancestors
                .iter()
                .find(|&&a| matches!(hops[a].kind, HopKind::Nat(_)))
                .map_or(Realm::Global, |&a| Realm::Nat(a));
            hops[i].realm = realm;
        }

        let mut topo = Topology {
            hops,
            hop_ids,
            hosts: Vec::new(),
            host_names: HashMap::new(),
            realms: HashMap::new(),
            clock: SimTime(0),
            trace: None,
        };
        for i in 0..topo.hops.len() {
            if let HopKind::Nat(n) = &topo.hops[i].kind {
                let realm = topo.realm_inside(topo.hops[i].parent);
                for ip in n.config().external_pool.clone() {
                    topo.register(realm, ip, Target::NatExternal(i))?;
                }
            }
        }
        for (i, host) in self.hosts.into_iter().enumerate() {
            if topo.host_names.insert(host.name.clone(), i).is_some() {
                return Err(SimError::Topology(format!("duplicate host `{}`", host.name)));
            }
            if host.addrs.is_empty() {
                return Err(SimError::Topology(format!("host `{}` has no address", host.name)));
            }
            let pos = host.attach.map(|h| topo.index_of(h)).transpose()?;
            let realm = topo.realm_inside(pos);
            for &ip in &host.addrs {
                topo.register(realm, ip, Target::Host(i))?;
            }
            topo.hosts.push(host);
        }
        Ok(topo)
    }
}

/// A network instance with its virtual clock. Single owner; clone to fork.
#[derive(Debug, Clone)]
pub struct Topology {
    hops: Vec<Hop>,
    hop_ids: HashMap<HopId, usize>,
    hosts: Vec<Host>,
    host_names: HashMap<String, usize>,
    realms: HashMap<Realm, HashMap<Ipv4Addr, Target>>,
    clock: SimTime,
    trace: Option<Vec<TraceRecord>>,
}

impl Topology {
    fn index_of(&self, id: HopId) -> Result<usize, SimError> {
        self.hop_ids.get(&id).copied().ok_or(SimError::UnknownHop(id.0))
    }

    fn realm_inside(&self, pos: Option<usize>) -> Realm {
        pos.map_or(Realm::Global, |p| self.hops[p].realm)
    }

    fn register(&mut self, realm: Realm, ip: Ipv4Addr, target: Target) -> Result<(), SimError> {
        if let Realm::Nat(n) = realm {
            if let HopKind::Nat(dev) = &self.hops[n].kind {
                if !dev.config().internal_range.contains(&ip) {
                    return Err(SimError::Topology(format!(
                        "{ip} is behind hop {} but outside its internal range {}",
                        self.hops[n].id,
                        dev.config().internal_range
                    )));
                }
            }
        }
        if self.realms.entry(realm).or_default().insert(ip, target).is_some() {
            return Err(SimError::Topology(format!("address {ip} used twice in one realm")));
        }
        Ok(())
    }

    pub fn clock(&self) -> SimTime {
        self.clock
    }

    pub fn host(&self, id: HostId) -> Option<&Host> {
        self.hosts.get(id.0)
    }

    pub fn host_id(&self, name: &str) -> Option<HostId> {
        self.host_names.get(name).copied().map(HostId)
    }

    pub fn hosts(&self) -> impl Iterator<Item = (HostId, &Host)> {
        self.hosts.iter().enumerate().map(|(i, h)| (HostId(i), h))
    }

    pub fn nat(&self, hop: HopId) -> Option<&NatDevice> {
        let i = *self.hop_ids.get(&hop)?;
        match &self.hops[i].kind {
            HopKind::Nat(n) => Some(n),
            HopKind::Router => None,
        }
    }

    pub fn hop_kind(&self, hop: HopId) -> Option<&HopKind> {
        self.hop_ids.get(&hop).map(|&i| &self.hops[i].kind)
    }

    /// Hops between a host and the core, nearest first.
    pub fn path_of(&self, host: HostId) -> Result<Vec<HopId>, SimError> {
        let h = self.hosts.get(host.0).ok_or_else(|| SimError::UnknownHost(format!("#{}", host.0)))?;
        Ok(match h.attach {
            Some(a) => self.hops[self.index_of(a)?].ancestors.iter().map(|&i| self.hops[i].id).collect(),
            None => Vec::new(),
        })
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn trace_text(&self) -> String {
        self.trace().iter().map(|r| format!("{r}\n")).collect()
    }

    /// Advances the clock to `now`, removing every mapping idle for longer
    /// than its timeout. Earlier instants are ignored.
    pub fn expire(&mut self, now: SimTime) -> usize {
        if now < self.clock {
            return 0;
        }
        self.clock = now;
        self.hops
            .iter_mut()
            .map(|h| match &mut h.kind {
                HopKind::Nat(n) => n.expire(now),
                HopKind::Router => 0,
            })
            .sum()
    }

    pub fn send(&mut self, from: HostId, pkt: Packet, at: SimTime) -> Result<DeliveryResult, SimError> {
        let host = self.hosts.get(from.0).ok_or_else(|| SimError::UnknownHost(format!("#{}", from.0)))?;
        if at < self.clock {
            return Err(SimError::TimeWentBackwards { at, clock: self.clock });
        }
        if pkt.ttl == 0 {
            return Err(SimError::ZeroTtl);
        }
        if !host.addrs.contains(pkt.src.ip()) {
            return Err(SimError::ForeignSource { host: host.name.clone(), src: pkt.src });
        }
        let start = host.attach.map(|h| self.index_of(h)).transpose()?;
        self.expire(at);
        let (proto, src, dst, ttl) = (pkt.proto, pkt.src, pkt.dst, pkt.ttl);
        let result = self.route(start, pkt)?;
        if let Some(trace) = &mut self.trace {
            trace.push(TraceRecord { time: at, proto, src, dst, ttl, verdict: result.verdict(), hop: result.hop() });
        }
        Ok(result)
    }

    fn resolve(&self, realm: Realm, ip: Ipv4Addr) -> Option<Target> {
        self.realms.get(&realm)?.get(&ip).copied()
    }

    fn ancestors(&self, pos: Option<usize>) -> &[usize] {
        pos.map_or(&[][..], |p| &self.hops[p].ancestors)
    }

    /// Hops crossed going from below `from` to below `to`: the upward leg,
    /// then the downward leg in traversal order.
    fn legs(&self, from: Option<usize>, to: Option<usize>) -> Vec<usize> {
        let a = self.ancestors(from);
        let b = self.ancestors(to);
        let mut legs: Vec<usize> = a.iter().copied().take_while(|x| !b.contains(x)).collect();
        let down: Vec<usize> = b.iter().copied().take_while(|x| !a.contains(x)).collect();
        legs.extend(down.into_iter().rev());
        legs
    }

    /// Decrements TTL after a hop has handled the packet.
    fn tick(&self, pkt: &mut Packet, hop: usize) -> Option<DeliveryResult> {
        pkt.ttl -= 1;
        (pkt.ttl == 0).then(|| DeliveryResult::DroppedTtl(self.hops[hop].id))
    }

    fn route(&mut self, start: Option<usize>, mut pkt: Packet) -> Result<DeliveryResult, SimError> {
        let now = self.clock;
        let mut pos = start;
        let mut descending = false;
        loop {
            if let Some(target) = self.resolve(self.realm_inside(pos), *pkt.dst.ip()) {
                let (dest, nat_in) = match target {
                    Target::Host(h) => {
                        let attach = self.hosts[h].attach.map(|a| self.hop_ids[&a]);
                        (attach, None)
                    }
                    Target::NatExternal(m) => (self.hops[m].parent, Some(m)),
                };
                for hop in self.legs(pos, dest) {
                    debug_assert!(matches!(self.hops[hop].kind, HopKind::Router));
                    if let Some(r) = self.tick(&mut pkt, hop) {
                        return Ok(r);
                    }
                }
                let Some(m) = nat_in else {
                    let Target::Host(h) = target else { unreachable!() };
                    return Ok(DeliveryResult::Delivered { to: HostId(h), packet: pkt });
                };
                let id = self.hops[m].id;
                let HopKind::Nat(nat) = &mut self.hops[m].kind else { unreachable!() };
                match nat.inbound(pkt.proto, pkt.src, pkt.dst, now, false) {
                    Ok(int_ep) => pkt.dst = int_ep,
                    Err(_) => return Ok(DeliveryResult::DroppedFilter(id)),
                }
                if let Some(r) = self.tick(&mut pkt, m) {
                    return Ok(r);
                }
                pos = Some(m);
                descending = true;
                continue;
            }
            if descending {
                return Ok(DeliveryResult::DroppedNoRoute);
            }
            let Some(p) = pos else {
                return Ok(DeliveryResult::DroppedNoRoute);
            };
            let id = self.hops[p].id;
            if let HopKind::Nat(nat) = &mut self.hops[p].kind {
                if nat.owns(*pkt.dst.ip()) {
                    match nat.config().hairpin {
                        Hairpin::Off => return Ok(DeliveryResult::DroppedNoRoute),
                        Hairpin::Translate => {
                            pkt.src = nat
                                .allocate_mapping(pkt.proto, pkt.src, pkt.dst, now)
                                .map_err(|source| SimError::Allocation { hop: id, source })?;
                        }
                        Hairpin::PreserveSource => {}
                    }
                    match nat.inbound(pkt.proto, pkt.src, pkt.dst, now, true) {
                        Ok(int_ep) => pkt.dst = int_ep,
                        Err(_) => return Ok(DeliveryResult::DroppedFilter(id)),
                    }
                    if let Some(r) = self.tick(&mut pkt, p) {
                        return Ok(r);
                    }
                    descending = true;
                    continue;
                }
                pkt.src = nat
                    .allocate_mapping(pkt.proto, pkt.src, pkt.dst, now)
                    .map_err(|source| SimError::Allocation { hop: id, source })?;
            }
            if let Some(r) = self.tick(&mut pkt, p) {
                return Ok(r);
            }
            pos = self.hops[p].parent;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{MappingType, Pooling, PortAlloc};

    fn ep(s: &str) -> SocketAddrV4 {
        s.parse().unwrap()
    }

    fn nat(mt: MappingType, ext: &str, range: &str) -> NatConfig {
        let mut c = NatConfig::home(ext.parse().unwrap(), range.parse().unwrap());
        c.mapping_type = mt;
        c
    }

    /// client - NAT(hop 1) - core - server, plus a second remote.
    fn single(mt: MappingType) -> (Topology, HostId, HostId, HostId) {
        let mut b = TopologyBuilder::new(1);
        let h = b.nat(nat(mt, "5.5.5.5", "192.168.1.0/24"), None);
        let c = b.host("client", vec!["192.168.1.10".parse().unwrap()], Some(h));
        let s = b.host("server", vec!["9.9.9.9".parse().unwrap()], None);
        let o = b.host("other", vec!["8.8.8.8".parse().unwrap()], None);
        (b.build().unwrap(), c, s, o)
    }

    #[test]
    fn full_cone_admits_any_remote() {
        let (mut t, c, s, o) = single(MappingType::FullCone);
        let r = t.send(c, Packet::udp(ep("192.168.1.10:4000"), ep("9.9.9.9:53"), 64), SimTime(0)).unwrap();
        let out = r.delivered().unwrap().clone();
        assert_eq!(out.src, ep("5.5.5.5:4000"));
        let back = t.send(o, Packet::udp(ep("8.8.8.8:7"), out.src, 64), SimTime(10)).unwrap();
        assert_eq!(
            back,
            DeliveryResult::Delivered { to: c, packet: Packet::udp(ep("8.8.8.8:7"), ep("192.168.1.10:4000"), 63) }
        );
        let _ = s;
    }

    #[test]
    fn port_restricted_drops_other_port() {
        let (mut t, c, s, _) = single(MappingType::PortRestricted);
        t.send(c, Packet::udp(ep("192.168.1.10:4000"), ep("9.9.9.9:53"), 64), SimTime(0)).unwrap();
        let r = t.send(s, Packet::udp(ep("9.9.9.9:54"), ep("5.5.5.5:4000"), 64), SimTime(1)).unwrap();
        assert_eq!(r, DeliveryResult::DroppedFilter(HopId(1)));
        let r = t.send(s, Packet::udp(ep("9.9.9.9:53"), ep("5.5.5.5:4000"), 64), SimTime(2)).unwrap();
        assert!(r.delivered().is_some());
    }

    #[test]
    fn ttl_dies_before_later_nat() {
        let mut b = TopologyBuilder::new(1);
        let ids = b.chain(vec![None, None, Some(nat(MappingType::FullCone, "5.5.5.5", "10.0.0.0/8"))]);
        let c = b.host("client", vec!["10.0.0.1".parse().unwrap()], Some(ids[0]));
        b.host("server", vec!["9.9.9.9".parse().unwrap()], None);
        let mut t = b.build().unwrap();
        let r = t.send(c, Packet::udp(ep("10.0.0.1:1"), ep("9.9.9.9:1"), 2), SimTime(0)).unwrap();
        assert_eq!(r, DeliveryResult::DroppedTtl(HopId(2)));
        assert_eq!(t.nat(HopId(3)).unwrap().mapping_count(), 0);
        let r = t.send(c, Packet::udp(ep("10.0.0.1:1"), ep("9.9.9.9:1"), 3), SimTime(0)).unwrap();
        assert_eq!(r, DeliveryResult::DroppedTtl(HopId(3)));
        assert_eq!(t.nat(HopId(3)).unwrap().mapping_count(), 1);
        let r = t.send(c, Packet::udp(ep("10.0.0.1:1"), ep("9.9.9.9:1"), 4), SimTime(0)).unwrap();
        assert_eq!(r.delivered().unwrap().ttl, 1);
    }

    fn hairpin_net(mode: Hairpin) -> (Topology, HostId, HostId, HostId) {
        let mut b = TopologyBuilder::new(3);
        let mut cfg = nat(MappingType::FullCone, "5.5.5.5", "100.64.0.0/10");
        cfg.hairpin = mode;
        let cgn = b.nat(cfg, None);
        let a = b.host("a", vec!["100.64.0.1".parse().unwrap()], Some(cgn));
        let bb = b.host("b", vec!["100.64.0.2".parse().unwrap()], Some(cgn));
        let s = b.host("s", vec!["9.9.9.9".parse().unwrap()], None);
        (b.build().unwrap(), a, bb, s)
    }

    fn hairpin_src(mode: Hairpin) -> DeliveryResult {
        let (mut t, a, bb, _) = hairpin_net(mode);
        let b_ext = t
            .send(bb, Packet::udp(ep("100.64.0.2:6881"), ep("9.9.9.9:1"), 64), SimTime(0))
            .unwrap()
            .delivered()
            .unwrap()
            .src;
        t.send(a, Packet::udp(ep("100.64.0.1:6881"), b_ext, 64), SimTime(1)).unwrap()
    }

    #[test]
    fn hairpin_modes() {
        let r = hairpin_src(Hairpin::PreserveSource);
        assert_eq!(r.delivered().unwrap().src, ep("100.64.0.1:6881"));
        assert_eq!(r.delivered().unwrap().dst, ep("100.64.0.2:6881"));
        let r = hairpin_src(Hairpin::Translate);
        assert_eq!(*r.delivered().unwrap().src.ip(), "5.5.5.5".parse::<Ipv4Addr>().unwrap());
        assert_eq!(hairpin_src(Hairpin::Off), DeliveryResult::DroppedNoRoute);
    }

    #[test]
    fn expiry_precedes_send() {
        let (mut t, c, s, _) = single(MappingType::FullCone);
        t.send(c, Packet::udp(ep("192.168.1.10:4000"), ep("9.9.9.9:53"), 64), SimTime(0)).unwrap();
        let r = t.send(s, Packet::udp(ep("9.9.9.9:53"), ep("5.5.5.5:4000"), 64), SimTime(60_000)).unwrap();
        assert!(r.delivered().is_some());
        let r = t.send(s, Packet::udp(ep("9.9.9.9:53"), ep("5.5.5.5:4000"), 64), SimTime(120_001)).unwrap();
        assert_eq!(r, DeliveryResult::DroppedFilter(HopId(1)));
    }

    #[test]
    fn send_errors() {
        let (mut t, c, _, _) = single(MappingType::FullCone);
        assert!(matches!(
            t.send(HostId(99), Packet::udp(ep("1.1.1.1:1"), ep("9.9.9.9:1"), 1), SimTime(0)),
            Err(SimError::UnknownHost(_))
        ));
        assert!(matches!(
            t.send(c, Packet::udp(ep("192.168.1.10:1"), ep("9.9.9.9:1"), 0), SimTime(0)),
            Err(SimError::ZeroTtl)
        ));
        assert!(matches!(
            t.send(c, Packet::udp(ep("192.168.1.11:1"), ep("9.9.9.9:1"), 1), SimTime(0)),
            Err(SimError::ForeignSource { .. })
        ));
        t.send(c, Packet::udp(ep("192.168.1.10:1"), ep("9.9.9.9:1"), 9), SimTime(50)).unwrap();
        assert!(matches!(
            t.send(c, Packet::udp(ep("192.168.1.10:1"), ep("9.9.9.9:1"), 9), SimTime(49)),
            Err(SimError::TimeWentBackwards { .. })
        ));
    }

    #[test]
    fn nat444_double_translation() {
        let mut b = TopologyBuilder::new(5);
        let mut cgn = nat(MappingType::PortRestricted, "5.5.5.5", "100.64.0.0/10");
        cgn.port_alloc = PortAlloc::Random;
        cgn.pooling = Pooling::Paired;
        let ids = b.chain(vec![Some(nat(MappingType::FullCone, "100.64.3.3", "192.168.0.0/24")), None, Some(cgn)]);
        let c = b.host("c", vec!["192.168.0.5".parse().unwrap()], Some(ids[0]));
        b.host("s", vec!["9.9.9.9".parse().unwrap()], None);
        let mut t = b.build().unwrap();
        assert_eq!(t.path_of(c).unwrap(), vec![HopId(1), HopId(2), HopId(3)]);
        let r = t.send(c, Packet::udp(ep("192.168.0.5:5000"), ep("9.9.9.9:1"), 64), SimTime(0)).unwrap();
        let p = r.delivered().unwrap();
        assert_eq!(*p.src.ip(), "5.5.5.5".parse::<Ipv4Addr>().unwrap());
        assert_eq!(p.ttl, 61);
        let cpe = t.nat(HopId(1)).unwrap().mappings().next().unwrap().ext_ep;
        assert_eq!(cpe, ep("100.64.3.3:5000"));
    }

    #[test]
    fn builder_rejects_bad_layouts() {
        let mut b = TopologyBuilder::new(0);
        let h = b.nat(nat(MappingType::FullCone, "5.5.5.5", "192.168.1.0/24"), None);
        b.host("x", vec!["10.0.0.1".parse().unwrap()], Some(h));
        assert!(matches!(b.build(), Err(SimError::Topology(_))));

        let mut b = TopologyBuilder::new(0);
        b.host("x", vec!["9.9.9.9".parse().unwrap()], None);
        b.host("y", vec!["9.9.9.9".parse().unwrap()], None);
        assert!(b.build().is_err());

        let mut b = TopologyBuilder::new(0);
        b.router(Some(HopId(7)));
        assert!(matches!(b.build(), Err(SimError::UnknownHop(7))));
    }
}
