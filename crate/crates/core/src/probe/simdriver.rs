//! Probe client and measurement server running on a natsim topology.

use std::net::{Ipv4Addr, SocketAddrV4};

use super::echo;
use super::stun::{BindingRequest, BindingResponse, StunDriver};
use super::ttl::TtlDriver;
use super::ProbeError;
use crate::record::FlowObservation;
use crate::sim::{DeliveryResult, HostId, Packet, Proto, SimError, SimTime, Topology};

pub const STUN_PORTS: [u16; 2] = [3478, 3479];
pub const ECHO_PORT: u16 = 7;
pub const TTL_PORT: u16 = 5300;
const EPHEMERAL: (u16, u16) = (32768, 60999);

/// A client host and a server host with two addresses. Packets take no
/// virtual time; only waits and flow spacing advance the clock.
pub struct SimProbe {
    topo: Topology,
    client: HostId,
    server: HostId,
    local_ip: Ipv4Addr,
    server_ips: [Ipv4Addr; 2],
    now: SimTime,
    next_port: u16,
    stun_local: SocketAddrV4,
    txid: u64,
    nonce: u64,
    /// Current TTL flow: client endpoint and the endpoint the server saw.
    flow: Option<(SocketAddrV4, SocketAddrV4)>,
}

impl SimProbe {
    pub fn new(topo: Topology, client: &str, server: &str) -> Result<Self, ProbeError> {
        let find = |name: &str| topo.host_id(name).ok_or_else(|| SimError::UnknownHost(name.to_string()));
        let (c, s) = (find(client)?, find(server)?);
        let local_ip = *topo
            .host(c)
            .and_then(|h| h.addrs.first())
            .ok_or_else(|| ProbeError::Protocol(format!("client {client} has no address")))?;
        let saddrs = &topo.host(s).expect("found above").addrs;
        if saddrs.len() < 2 {
            return Err(ProbeError::Protocol(format!("server {server} needs two addresses")));
        }
        let server_ips = [saddrs[0], saddrs[1]];
        let now = topo.clock();
        Ok(SimProbe {
            topo,
            client: c,
            server: s,
            local_ip,
            server_ips,
            now,
            next_port: EPHEMERAL.0,
            stun_local: SocketAddrV4::new(local_ip, 3478),
            txid: 0,
            nonce: 0,
            flow: None,
        })
    }

    /// Sets the first local port handed out to new flows.
    pub fn with_port_start(mut self, port: u16) -> Self {
        self.set_port_start(port);
        self
    }

    /// Moves the probe client to another host; open flows are dropped.
    pub fn set_client(&mut self, name: &str) -> Result<(), ProbeError> {
        let c = self.topo.host_id(name).ok_or_else(|| SimError::UnknownHost(name.to_string()))?;
        self.local_ip = *self
            .topo
            .host(c)
            .and_then(|h| h.addrs.first())
            .ok_or_else(|| ProbeError::Protocol(format!("client {name} has no address")))?;
        self.client = c;
        self.stun_local = SocketAddrV4::new(self.local_ip, self.stun_local.port());
        self.flow = None;
        Ok(())
    }

    pub fn set_port_start(&mut self, port: u16) {
        self.next_port = port.clamp(EPHEMERAL.0, EPHEMERAL.1);
    }

    pub fn topology(&self) -> &Topology {
        &self.topo
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    /// Lets virtual time pass without traffic.
    pub fn advance_ms(&mut self, ms: u64) {
        self.now = SimTime(self.now.0 + ms);
    }

    pub fn echo_server(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.server_ips[0], ECHO_PORT)
    }

    fn local_port(&mut self) -> u16 {
        let p = self.next_port;
        self.next_port = if p >= EPHEMERAL.1 { EPHEMERAL.0 } else { p + 1 };
        p
    }

    fn send(&mut self, from: HostId, pkt: Packet) -> Result<DeliveryResult, ProbeError> {
        self.now = self.now.max(self.topo.clock());
        Ok(self.topo.send(from, pkt, self.now)?)
    }

    /// Packet arrived at `host` on `dst`.
    fn reached(r: &DeliveryResult, host: HostId, dst: SocketAddrV4) -> Option<Packet> {
        match r {
            DeliveryResult::Delivered { to, packet } if *to == host && packet.dst == dst => Some(packet.clone()),
            _ => None,
        }
    }

    /// One echo exchange from a fresh local port; returns the local port
    /// and the source endpoint the server reported.
    pub fn echo_once(&mut self, proto: Proto) -> Result<Option<(u16, SocketAddrV4)>, ProbeError> {
        let port = self.local_port();
        let local = SocketAddrV4::new(self.local_ip, port);
        self.nonce += 1;
        let nonce = format!("{:x}", self.nonce);
        let mut pkt = Packet::udp(local, self.echo_server(), 64).with_payload(echo::request(&nonce));
        pkt.proto = proto;
        let r = self.send(self.client, pkt)?;
        let Some(at_server) = Self::reached(&r, self.server, self.echo_server()) else {
            return Ok(None);
        };
        let text = String::from_utf8_lossy(&at_server.payload).into_owned();
        let Some(n) = echo::parse_request(&text) else {
            return Ok(None);
        };
        let mut back = Packet::udp(at_server.dst, at_server.src, 64).with_payload(echo::reply(n, at_server.src));
        back.proto = proto;
        let r = self.send(self.server, back)?;
        let Some(at_client) = Self::reached(&r, self.client, local) else {
            return Ok(None);
        };
        let text = String::from_utf8_lossy(&at_client.payload).into_owned();
        Ok(echo::parse_reply(&text).filter(|(got, _)| *got == nonce).map(|(_, ep)| (port, ep)))
    }

    /// A port-trace session of `flows` connections opened `spacing_ms`
    /// apart. Flows with no answer are left out.
    pub fn port_session(
        &mut self,
        proto: Proto,
        flows: u32,
        spacing_ms: u64,
    ) -> Result<Vec<FlowObservation>, ProbeError> {
        let mut out = Vec::new();
        for index in 0..flows {
            if let Some((local_port, ep)) = self.echo_once(proto)? {
                out.push(FlowObservation {
                    index,
                    local_port,
                    observed_ext_ip: *ep.ip(),
                    observed_ext_port: ep.port(),
                });
            }
            self.advance_ms(spacing_ms);
        }
        Ok(out)
    }

    fn server_answer(&mut self, at: &Packet) -> Result<Option<(SocketAddrV4, Vec<u8>)>, ProbeError> {
        let Ok(req) = BindingRequest::decode(&at.payload) else {
            return Ok(None);
        };
        let ip_idx = usize::from(self.server_ips[1] == *at.dst.ip());
        let port_idx = usize::from(STUN_PORTS[1] == at.dst.port());
        let ip = self.server_ips[ip_idx ^ usize::from(req.change_ip)];
        let port = STUN_PORTS[port_idx ^ usize::from(req.change_port)];
        let from = SocketAddrV4::new(ip, port);
        let resp = BindingResponse {
            txid: req.txid,
            mapped: at.src,
            other: Some(SocketAddrV4::new(self.server_ips[1], STUN_PORTS[1])),
        };
        let r = self.send(self.server, Packet::udp(from, at.src, 64).with_payload(resp.encode()))?;
        Ok(Self::reached(&r, self.client, self.stun_local).map(|p| (p.src, p.payload)))
    }
}

impl StunDriver for SimProbe {
    fn local_endpoint(&self) -> SocketAddrV4 {
        self.stun_local
    }

    fn server(&self) -> SocketAddrV4 {
        SocketAddrV4::new(self.server_ips[0], STUN_PORTS[0])
    }

    fn transact(&mut self, to: SocketAddrV4, request: &[u8]) -> Result<Option<(SocketAddrV4, Vec<u8>)>, ProbeError> {
        let r = self.send(self.client, Packet::udp(self.stun_local, to, 64).with_payload(request))?;
        match Self::reached(&r, self.server, to) {
            Some(at) => self.server_answer(&at),
            None => Ok(None),
        }
    }

    fn next_txid(&mut self) -> [u8; 12] {
        self.txid += 1;
        let mut t = [0u8; 12];
        t[4..].copy_from_slice(&self.txid.to_be_bytes());
        t
    }
}

impl TtlDriver for SimProbe {
    fn local_ip(&self) -> Ipv4Addr {
        self.local_ip
    }

    fn open_flow(&mut self) -> Result<Option<SocketAddrV4>, ProbeError> {
        let local = SocketAddrV4::new(self.local_ip, self.local_port());
        let server = SocketAddrV4::new(self.server_ips[0], TTL_PORT);
        let r = self.send(self.client, Packet::udp(local, server, 64))?;
        let seen = Self::reached(&r, self.server, server).map(|p| p.src);
        self.flow = seen.map(|s| (local, s));
        Ok(seen)
    }

    fn client_send(&mut self, ttl: u8) -> Result<bool, ProbeError> {
        let Some((local, _)) = self.flow else { return Ok(false) };
        let server = SocketAddrV4::new(self.server_ips[0], TTL_PORT);
        let r = self.send(self.client, Packet::udp(local, server, ttl))?;
        Ok(Self::reached(&r, self.server, server).is_some())
    }

    fn server_send(&mut self, ttl: u8) -> Result<bool, ProbeError> {
        let Some((local, seen)) = self.flow else { return Ok(false) };
        let server = SocketAddrV4::new(self.server_ips[0], TTL_PORT);
        let r = self.send(self.server, Packet::udp(server, seen, ttl))?;
        Ok(Self::reached(&r, self.client, local).is_some())
    }

    fn wait(&mut self, secs: u32) -> Result<(), ProbeError> {
        self.advance_ms(u64::from(secs) * 1000);
        Ok(())
    }
}
