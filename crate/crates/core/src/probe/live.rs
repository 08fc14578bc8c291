//! Probe drivers and servers on real sockets.
//!
//! The measurement server listens on an echo port (UDP and TCP), a TTL data
//! port and a TTL control port, plus up to two addresses by two ports for
//! STUN. TTL control is one UDP datagram per command:
//!
//! - `SEEN <nonce>` answers `YES <ip> <port>` if a `KA <nonce>` datagram
//!   reached the data port, else `NO`.
//! - `PROBE <ip> <port> <ttl> <nonce>` makes the data port send `PR <nonce>`
//!   to the given endpoint with the given TTL and answers `OK`.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::{Ipv4Addr, SocketAddr, SocketAddrV4, TcpListener, TcpStream, UdpSocket};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::echo;
use super::stun::{BindingRequest, BindingResponse, StunDriver};
use super::ttl::TtlDriver;
use super::ProbeError;
use crate::record::FlowObservation;

const POLL: Duration = Duration::from_millis(100);

fn v4(a: SocketAddr) -> Result<SocketAddrV4, ProbeError> {
    match a {
        SocketAddr::V4(a) => Ok(a),
        SocketAddr::V6(a) => Err(ProbeError::Protocol(format!("IPv6 endpoint {a} not supported"))),
    }
}

/// Handle to background server threads; dropping it stops them.
pub struct ServerHandle {
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
    pub bound: Vec<(String, SocketAddrV4)>,
}

impl ServerHandle {
    pub fn addr(&self, role: &str) -> Option<SocketAddrV4> {
        self.bound.iter().find(|(r, _)| r == role).map(|(_, a)| *a)
    }

    pub fn stop(mut self) {
        self.shutdown();
    }

    /// Blocks until the threads exit.
    pub fn join(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub echo: SocketAddrV4,
    pub ttl_data: SocketAddrV4,
    pub ttl_control: SocketAddrV4,
    /// STUN addresses and ports; the first of each is primary.
    pub stun_ips: Vec<Ipv4Addr>,
    pub stun_ports: Vec<u16>,
}

/// Starts all server roles. Port 0 picks a free port; the chosen ports
/// are listed in [`ServerHandle::bound`].
pub fn serve(cfg: &ServerConfig) -> Result<ServerHandle, ProbeError> {
    let stop = Arc::new(AtomicBool::new(false));
    let mut threads = Vec::new();
    let mut bound = Vec::new();

    let udp = UdpSocket::bind(cfg.echo)?;
    let echo_addr = v4(udp.local_addr()?)?;
    let tcp = TcpListener::bind(echo_addr)?;
    bound.push(("echo".to_string(), echo_addr));
    threads.push(spawn_udp_echo(udp, stop.clone())?);
    threads.push(spawn_tcp_echo(tcp, stop.clone())?);

    let data = UdpSocket::bind(cfg.ttl_data)?;
    let control = UdpSocket::bind(cfg.ttl_control)?;
    bound.push(("ttl_data".to_string(), v4(data.local_addr()?)?));
    bound.push(("ttl_control".to_string(), v4(control.local_addr()?)?));
    threads.push(spawn_ttl(data, control, stop.clone())?);

    if !cfg.stun_ips.is_empty() && !cfg.stun_ports.is_empty() {
        let mut socks = Vec::new();
        for ip in &cfg.stun_ips {
            let mut row = Vec::new();
            for port in &cfg.stun_ports {
                let s = UdpSocket::bind(SocketAddrV4::new(*ip, *port))?;
                s.set_read_timeout(Some(POLL))?;
                bound.push(("stun".to_string(), v4(s.local_addr()?)?));
                row.push(s);
            }
            socks.push(row);
        }
        threads.extend(spawn_stun(socks, stop.clone())?);
    }
    Ok(ServerHandle { stop, threads, bound })
}

fn spawn_udp_echo(sock: UdpSocket, stop: Arc<AtomicBool>) -> Result<JoinHandle<()>, ProbeError> {
    sock.set_read_timeout(Some(POLL))?;
    Ok(thread::spawn(move || {
        let mut buf = [0u8; 512];
        while !stop.load(Ordering::Relaxed) {
            let Ok((n, SocketAddr::V4(from))) = sock.recv_from(&mut buf) else { continue };
            if let Some(nonce) = std::str::from_utf8(&buf[..n]).ok().and_then(echo::parse_request) {
                let _ = sock.send_to(echo::reply(nonce, from).as_bytes(), from);
            }
        }
    }))
}

fn spawn_tcp_echo(listener: TcpListener, stop: Arc<AtomicBool>) -> Result<JoinHandle<()>, ProbeError> {
    listener.set_nonblocking(true)?;
    Ok(thread::spawn(move || {
        while !stop.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((stream, SocketAddr::V4(from))) => {
                    thread::spawn(move || {
                        let _ = answer_tcp(stream, from);
                    });
                }
                Ok(_) => {}
                Err(_) => thread::sleep(Duration::from_millis(10)),
            }
        }
    }))
}

fn answer_tcp(mut stream: TcpStream, from: SocketAddrV4) -> std::io::Result<()> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let mut line = String::new();
    BufReader::new(&stream).read_line(&mut line)?;
    if let Some(nonce) = echo::parse_request(&line) {
        stream.write_all(echo::reply(nonce, from).as_bytes())?;
    }
    Ok(())
}

fn spawn_ttl(data: UdpSocket, control: UdpSocket, stop: Arc<AtomicBool>) -> Result<JoinHandle<()>, ProbeError> {
    data.set_read_timeout(Some(Duration::from_millis(20)))?;
    control.set_read_timeout(Some(Duration::from_millis(20)))?;
    Ok(thread::spawn(move || {
        let mut seen: HashMap<String, SocketAddrV4> = HashMap::new();
        let mut buf = [0u8; 512];
        while !stop.load(Ordering::Relaxed) {
            while let Ok((n, SocketAddr::V4(from))) = data.recv_from(&mut buf) {
                if let Some(nonce) = std::str::from_utf8(&buf[..n]).ok().and_then(|s| s.strip_prefix("KA ")) {
                    if seen.len() > 100_000 {
                        seen.clear();
                    }
                    seen.insert(nonce.trim().to_string(), from);
                }
            }
            let Ok((n, from)) = control.recv_from(&mut buf) else { continue };
            let text = String::from_utf8_lossy(&buf[..n]).into_owned();
            let words: Vec<&str> = text.split_whitespace().collect();
            let answer = match words.as_slice() {
                ["SEEN", nonce] => {
                    // Give datagrams still in flight a moment.
                    if !seen.contains_key(*nonce) {
                        if let Ok((n, SocketAddr::V4(src))) = data.recv_from(&mut buf) {
                            if let Some(k) = std::str::from_utf8(&buf[..n]).ok().and_then(|s| s.strip_prefix("KA ")) {
                                seen.insert(k.trim().to_string(), src);
                            }
                        }
                    }
                    match seen.get(*nonce) {
                        Some(ep) => format!("YES {} {}", ep.ip(), ep.port()),
                        None => "NO".to_string(),
                    }
                }
                ["PROBE", ip, port, ttl, nonce] => {
                    match (ip.parse::<Ipv4Addr>(), port.parse::<u16>(), ttl.parse::<u32>()) {
                        (Ok(ip), Ok(port), Ok(ttl)) => {
                            let sent = data
                                .set_ttl(ttl)
                                .and_then(|_| data.send_to(format!("PR {nonce}").as_bytes(), (ip, port)));
                            let _ = data.set_ttl(64);
                            if sent.is_ok() {
                                "OK".to_string()
                            } else {
                                "ERR".to_string()
                            }
                        }
                        _ => "ERR".to_string(),
                    }
                }
                _ => "ERR".to_string(),
            };
            let _ = control.send_to(answer.as_bytes(), from);
        }
    }))
}

fn spawn_stun(socks: Vec<Vec<UdpSocket>>, stop: Arc<AtomicBool>) -> Result<Vec<JoinHandle<()>>, ProbeError> {
    let socks: Arc<Vec<Vec<UdpSocket>>> = Arc::new(socks);
    let mut out = Vec::new();
    for i in 0..socks.len() {
        for j in 0..socks[i].len() {
            let (socks, stop) = (socks.clone(), stop.clone());
            out.push(thread::spawn(move || {
                let mut buf = [0u8; 576];
                let rows = socks.len();
                let cols = socks[0].len();
                let other = socks[rows - 1][cols - 1].local_addr().ok().and_then(|a| v4(a).ok());
                while !stop.load(Ordering::Relaxed) {
                    let Ok((n, SocketAddr::V4(from))) = socks[i][j].recv_from(&mut buf) else { continue };
                    let Ok(req) = BindingRequest::decode(&buf[..n]) else { continue };
                    let ri = if req.change_ip { (i + 1) % rows } else { i };
                    let rj = if req.change_port { (j + 1) % cols } else { j };
                    let resp =
                        BindingResponse { txid: req.txid, mapped: from, other: other.filter(|_| rows > 1 && cols > 1) };
                    let _ = socks[ri][rj].send_to(&resp.encode(), from);
                }
            }));
        }
    }
    Ok(out)
}

/// Live STUN client on one UDP socket.
pub struct LiveStun {
    sock: UdpSocket,
    local: SocketAddrV4,
    server: SocketAddrV4,
    timeout: Duration,
    retries: u32,
}

impl LiveStun {
    pub fn new(bind: SocketAddrV4, server: SocketAddrV4, timeout: Duration) -> Result<Self, ProbeError> {
        let sock = UdpSocket::bind(bind)?;
        let local = local_toward(&sock, server)?;
        Ok(LiveStun { sock, local, server, timeout, retries: 2 })
    }
}

/// The local address used toward `server`, resolving a wildcard bind.
fn local_toward(sock: &UdpSocket, server: SocketAddrV4) -> Result<SocketAddrV4, ProbeError> {
    let bound = v4(sock.local_addr()?)?;
    if !bound.ip().is_unspecified() {
        return Ok(bound);
    }
    let probe = UdpSocket::bind("0.0.0.0:0")?;
    probe.connect(server)?;
    Ok(SocketAddrV4::new(*v4(probe.local_addr()?)?.ip(), bound.port()))
}

impl StunDriver for LiveStun {
    fn local_endpoint(&self) -> SocketAddrV4 {
        self.local
    }

    fn server(&self) -> SocketAddrV4 {
        self.server
    }

    fn transact(&mut self, to: SocketAddrV4, request: &[u8]) -> Result<Option<(SocketAddrV4, Vec<u8>)>, ProbeError> {
        let txid = request.get(8..20).map(<[u8]>::to_vec).unwrap_or_default();
        let mut buf = [0u8; 576];
        for _ in 0..=self.retries {
            self.sock.send_to(request, to)?;
            let deadline = Instant::now() + self.timeout;
            while let Some(left) = deadline.checked_duration_since(Instant::now()).filter(|d| !d.is_zero()) {
                self.sock.set_read_timeout(Some(left))?;
                match self.sock.recv_from(&mut buf) {
                    Ok((n, SocketAddr::V4(from))) if n >= 20 && buf[8..20] == txid[..] => {
                        return Ok(Some((from, buf[..n].to_vec())));
                    }
                    Ok(_) => {}
                    Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {
                        break
                    }
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Ok(None)
    }

    fn next_txid(&mut self) -> [u8; 12] {
        rand::random()
    }
}

/// Opens `flows` TCP connections to a live echo server, one after another.
pub fn live_port_session(
    server: SocketAddrV4,
    flows: u32,
    timeout: Duration,
) -> Result<Vec<FlowObservation>, ProbeError> {
    let mut out = Vec::new();
    for index in 0..flows {
        let Ok(mut s) = TcpStream::connect_timeout(&server.into(), timeout) else { continue };
        s.set_read_timeout(Some(timeout))?;
        let local = v4(s.local_addr()?)?;
        let nonce = format!("{}-{index}", std::process::id());
        s.write_all(echo::request(&nonce).as_bytes())?;
        let mut line = String::new();
        if BufReader::new(&s).read_line(&mut line).is_err() {
            continue;
        }
        if let Some((got, ep)) = echo::parse_reply(&line) {
            if got == nonce {
                out.push(FlowObservation {
                    index,
                    local_port: local.port(),
                    observed_ext_ip: *ep.ip(),
                    observed_ext_port: ep.port(),
                });
            }
        }
    }
    Ok(out)
}

/// Live TTL experiment client talking to the data and control ports.
pub struct LiveTtl {
    data: SocketAddrV4,
    control: UdpSocket,
    local_ip: Ipv4Addr,
    flow: Option<(UdpSocket, SocketAddrV4)>,
    seq: u64,
    timeout: Duration,
}

impl LiveTtl {
    pub fn new(data: SocketAddrV4, control: SocketAddrV4, timeout: Duration) -> Result<Self, ProbeError> {
        let sock = UdpSocket::bind("0.0.0.0:0")?;
        sock.connect(control)?;
        sock.set_read_timeout(Some(timeout))?;
        let local_ip = *v4(sock.local_addr()?)?.ip();
        Ok(LiveTtl { data, control: sock, local_ip, flow: None, seq: 0, timeout })
    }

    fn nonce(&mut self) -> String {
        self.seq += 1;
        format!("{}-{}", std::process::id(), self.seq)
    }

    fn command(&self, cmd: &str) -> Result<Option<String>, ProbeError> {
        let mut buf = [0u8; 256];
        for _ in 0..3 {
            self.control.send(cmd.as_bytes())?;
            match self.control.recv(&mut buf) {
                Ok(n) => return Ok(Some(String::from_utf8_lossy(&buf[..n]).into_owned())),
                Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
                Err(e) => return Err(e.into()),
            }
        }
        Ok(None)
    }

    fn keepalive(&mut self, sock: &UdpSocket, ttl: u8) -> Result<Option<SocketAddrV4>, ProbeError> {
        let nonce = self.nonce();
        sock.set_ttl(u32::from(ttl))?;
        sock.send_to(format!("KA {nonce}").as_bytes(), self.data)?;
        let answer = self.command(&format!("SEEN {nonce}"))?;
        Ok(answer.and_then(|a| {
            let rest = a.strip_prefix("YES ")?;
            let (ip, port) = rest.split_once(' ')?;
            Some(SocketAddrV4::new(ip.parse().ok()?, port.trim().parse().ok()?))
        }))
    }
}

impl TtlDriver for LiveTtl {
    fn local_ip(&self) -> Ipv4Addr {
        self.local_ip
    }

    fn open_flow(&mut self) -> Result<Option<SocketAddrV4>, ProbeError> {
        let sock = UdpSocket::bind("0.0.0.0:0")?;
        sock.set_read_timeout(Some(self.timeout))?;
        let seen = self.keepalive(&sock, 64)?;
        self.flow = seen.map(|s| (sock, s));
        Ok(seen)
    }

    fn client_send(&mut self, ttl: u8) -> Result<bool, ProbeError> {
        let Some((sock, seen)) = self.flow.take() else { return Ok(false) };
        let r = self.keepalive(&sock, ttl);
        self.flow = Some((sock, seen));
        Ok(r?.is_some())
    }

    fn server_send(&mut self, ttl: u8) -> Result<bool, ProbeError> {
        let Some((_, seen)) = &self.flow else { return Ok(false) };
        let seen = *seen;
        let nonce = self.nonce();
        if self.command(&format!("PROBE {} {} {ttl} {nonce}", seen.ip(), seen.port()))?.as_deref() != Some("OK") {
            return Ok(false);
        }
        let (sock, _) = self.flow.as_ref().expect("checked");
        let want = format!("PR {nonce}");
        let mut buf = [0u8; 256];
        let deadline = Instant::now() + self.timeout;
        while let Some(left) = deadline.checked_duration_since(Instant::now()).filter(|d| !d.is_zero()) {
            sock.set_read_timeout(Some(left))?;
            match sock.recv_from(&mut buf) {
                Ok((n, _)) if buf[..n] == *want.as_bytes() => return Ok(true),
                Ok(_) => {}
                Err(_) => break,
            }
        }
        Ok(false)
    }

    fn wait(&mut self, secs: u32) -> Result<(), ProbeError> {
        thread::sleep(Duration::from_secs(u64::from(secs)));
        Ok(())
    }
}
