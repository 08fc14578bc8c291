//! A DHT peer population living on a simulated network. Peers answer ping
//! and find_node from their routing tables; every datagram, including the
//! crawler's, is routed through the NAT topology.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::net::SocketAddrV4;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::krpc::{Body, KrpcMessage, Method};
use super::node::{xor_distance, CompactNodeInfo, NodeId, PeerIdentity};
use super::transport::Transport;
use super::DhtError;
use crate::sim::file::TopologyFile;
use crate::sim::{DeliveryResult, HostId, Packet, SimTime, Topology};

/// Nodes returned per find_node answer.
pub const K: usize = 8;
pub const DHT_PORT: u16 = 6881;

/// (delivery time, sequence, source, payload) of a datagram for the crawler.
type Queued = (u64, u64, SocketAddrV4, Vec<u8>);

#[derive(Debug, Clone)]
pub struct SimPeer {
    pub host: HostId,
    pub endpoint: SocketAddrV4,
    pub id: NodeId,
    pub responsive: bool,
    table: Vec<CompactNodeInfo>,
    known: HashSet<PeerIdentity>,
}

impl SimPeer {
    pub fn table(&self) -> &[CompactNodeInfo] {
        &self.table
    }

    fn learn(&mut self, n: CompactNodeInfo) {
        if n.id != self.id && self.known.insert(n.identity()) {
            self.table.push(n);
        }
    }

    fn closest(&self, target: &NodeId) -> Vec<CompactNodeInfo> {
        let mut t = self.table.clone();
        t.sort_by_key(|n| (xor_distance(&n.id, target), n.addr));
        t.truncate(K);
        t
    }
}

pub struct SimDht {
    topo: Topology,
    crawler: HostId,
    crawler_ep: SocketAddrV4,
    peers: Vec<SimPeer>,
    by_local: HashMap<(HostId, SocketAddrV4), usize>,
    inbox: BinaryHeap<Reverse<Queued>>,
    now: u64,
    seq: u64,
    pub latency_ms: u64,
}

impl SimDht {
    pub fn new(topo: Topology, crawler: HostId, crawler_ep: SocketAddrV4) -> Self {
        let now = topo.clock().0;
        SimDht {
            topo,
            crawler,
            crawler_ep,
            peers: Vec::new(),
            by_local: HashMap::new(),
            inbox: BinaryHeap::new(),
            now,
            seq: 0,
            latency_ms: 10,
        }
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn peers(&self) -> &[SimPeer] {
        &self.peers
    }

    pub fn add_peer(&mut self, host: HostId, endpoint: SocketAddrV4, id: NodeId, responsive: bool) -> usize {
        let i = self.peers.len();
        self.peers.push(SimPeer { host, endpoint, id, responsive, table: Vec::new(), known: HashSet::new() });
        self.by_local.insert((host, endpoint), i);
        i
    }

    /// Inserts a contact directly into a peer's table.
    pub fn add_contact(&mut self, peer: usize, contact: CompactNodeInfo) {
        self.peers[peer].learn(contact);
    }

    fn transmit(&mut self, from: HostId, pkt: Packet) -> Result<DeliveryResult, DhtError> {
        let at = SimTime(self.now);
        Ok(self.topo.send(from, pkt, at)?)
    }

    /// Peer `a` pings `dst`. The receiving peer learns `a` under the source
    /// endpoint it observes, and `a` learns the responder under the source
    /// of the reply. Returns the endpoint the responder saw, if any.
    pub fn introduce(&mut self, a: usize, dst: SocketAddrV4) -> Result<Option<SocketAddrV4>, DhtError> {
        self.now += 1;
        let (host, src, a_id) = (self.peers[a].host, self.peers[a].endpoint, self.peers[a].id);
        let DeliveryResult::Delivered { to, packet } = self.transmit(host, Packet::udp(src, dst, 64))? else {
            return Ok(None);
        };
        let Some(&b) = self.by_local.get(&(to, packet.dst)) else {
            return Ok(None);
        };
        if !self.peers[b].responsive {
            return Ok(None);
        }
        let seen = packet.src;
        self.peers[b].learn(CompactNodeInfo { id: a_id, addr: seen });
        let (b_host, b_ep, b_id) = (self.peers[b].host, self.peers[b].endpoint, self.peers[b].id);
        if let DeliveryResult::Delivered { to, packet } = self.transmit(b_host, Packet::udp(b_ep, seen, 64))? {
            if to == host && packet.dst == src {
                self.peers[a].learn(CompactNodeInfo { id: b_id, addr: packet.src });
            }
        }
        Ok(Some(seen))
    }

    /// Generic warm-up: every peer registers with `bootstrap`, then pings
    /// `fanout` random others at the endpoints the bootstrap observed.
    pub fn warm_up<R: Rng>(&mut self, bootstrap: usize, fanout: usize, rng: &mut R) -> Result<(), DhtError> {
        let boot_ep = self.peers[bootstrap].endpoint;
        let boot_pub = self.public_endpoint(bootstrap)?;
        let mut seen = Vec::with_capacity(self.peers.len());
        for i in 0..self.peers.len() {
            seen.push(if i == bootstrap { None } else { self.introduce(i, boot_pub.unwrap_or(boot_ep))? });
        }
        let known: Vec<(usize, SocketAddrV4)> =
            seen.iter().enumerate().filter_map(|(i, s)| s.map(|s| (i, s))).collect();
        for i in 0..self.peers.len() {
            if i == bootstrap {
                continue;
            }
            for &(j, ep) in known.choose_multiple(rng, fanout.min(known.len())) {
                if j != i {
                    self.introduce(i, ep)?;
                }
            }
        }
        Ok(())
    }

    /// A peer's address as reachable from the core: its own endpoint if it
    /// sits in the global realm, otherwise none.
    fn public_endpoint(&self, peer: usize) -> Result<Option<SocketAddrV4>, DhtError> {
        let path = self.topo.path_of(self.peers[peer].host)?;
        Ok(path.iter().all(|h| self.topo.nat(*h).is_none()).then_some(self.peers[peer].endpoint))
    }

    fn answer(&self, peer: usize, query: &[u8]) -> Option<Vec<u8>> {
        let p = &self.peers[peer];
        let msg = KrpcMessage::decode(query).ok()?;
        let Body::Query { method, .. } = &msg.body else {
            return None;
        };
        let reply = match method {
            Method::Ping => KrpcMessage::ping_response(&msg.tid, &p.id),
            Method::FindNode => match msg.target() {
                Some(t) => KrpcMessage::find_node_response(&msg.tid, &p.id, &p.closest(&t)),
                None => KrpcMessage::error(&msg.tid, 203, "Protocol Error"),
            },
            Method::Other(_) => KrpcMessage::error(&msg.tid, 204, "Method Unknown"),
        };
        Some(reply.encode())
    }
}

impl Transport for SimDht {
    fn send_to(&mut self, to: SocketAddrV4, bytes: &[u8]) -> Result<(), DhtError> {
        let pkt = Packet::udp(self.crawler_ep, to, 64).with_payload(bytes);
        let DeliveryResult::Delivered { to: host, packet } = self.transmit(self.crawler, pkt)? else {
            return Ok(());
        };
        let Some(&peer) = self.by_local.get(&(host, packet.dst)) else {
            return Ok(());
        };
        if !self.peers[peer].responsive {
            return Ok(());
        }
        let Some(reply) = self.answer(peer, &packet.payload) else {
            return Ok(());
        };
        let p = &self.peers[peer];
        let back = Packet::udp(p.endpoint, packet.src, 64).with_payload(reply);
        if let DeliveryResult::Delivered { to, packet } = self.transmit(p.host, back)? {
            if to == self.crawler && packet.dst == self.crawler_ep {
                self.seq += 1;
                self.inbox.push(Reverse((self.now + self.latency_ms, self.seq, packet.src, packet.payload)));
            }
        }
        Ok(())
    }

    fn recv_until(&mut self, deadline: u64) -> Result<Option<(SocketAddrV4, Vec<u8>)>, DhtError> {
        match self.inbox.peek() {
            Some(Reverse((t, ..))) if *t <= deadline => {
                let Reverse((t, _, from, bytes)) = self.inbox.pop().expect("peeked");
                self.now = self.now.max(t);
                Ok(Some((from, bytes)))
            }
            _ => {
                self.now = self.now.max(deadline);
                Ok(None)
            }
        }
    }

    fn now_ms(&self) -> u64 {
        self.now
    }
}

/// Populates a topology file with DHT peers. The host with role `crawler`
/// runs the crawler and the one with role `bootstrap` seeds the network;
/// every other host runs one peer on its first address, port 6881. Each
/// peer registers with the bootstrap and greets `fanout` others. Returns
/// the network and the bootstrap endpoint.
pub fn from_topology_file(file: &TopologyFile, seed: u64, fanout: usize) -> Result<(SimDht, SocketAddrV4), DhtError> {
    let topo = file.build(Some(seed))?;
    let by_role = |role: &str| {
        let spec = file
            .host
            .iter()
            .find(|h| h.role.as_deref() == Some(role))
            .ok_or_else(|| DhtError::Setup(format!("no host with role `{role}`")))?;
        let ip =
            *spec.addresses.first().ok_or_else(|| DhtError::Setup(format!("host `{}` has no address", spec.name)))?;
        let id = topo.host_id(&spec.name).expect("built from this file");
        Ok::<_, DhtError>((spec.name.clone(), id, SocketAddrV4::new(ip, DHT_PORT)))
    };
    let (crawler_name, crawler, crawler_ep) = by_role("crawler")?;
    let (boot_name, boot_host, boot_ep) = by_role("bootstrap")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = SimDht::new(topo, crawler, crawler_ep);
    let boot = net.add_peer(boot_host, boot_ep, NodeId::random(&mut rng), true);
    for spec in &file.host {
        if spec.name == crawler_name || spec.name == boot_name {
            continue;
        }
        let Some(&ip) = spec.addresses.first() else { continue };
        let host = net.topology().host_id(&spec.name).expect("built from this file");
        net.add_peer(host, SocketAddrV4::new(ip, DHT_PORT), NodeId::random(&mut rng), true);
    }
    net.warm_up(boot, fanout, &mut rng)?;
    Ok((net, boot_ep))
}
