//! Datagram transports the crawler runs over.

use std::io::ErrorKind;
use std::net::{SocketAddr, SocketAddrV4, ToSocketAddrs, UdpSocket};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use super::DhtError;

/// A message-oriented transport with its own millisecond clock.
pub trait Transport {
    fn send_to(&mut self, to: SocketAddrV4, bytes: &[u8]) -> Result<(), DhtError>;

    /// Waits for the next datagram, giving up once the clock reaches
    /// `deadline`.
    fn recv_until(&mut self, deadline: u64) -> Result<Option<(SocketAddrV4, Vec<u8>)>, DhtError>;

    fn now_ms(&self) -> u64;
}

/// A real UDP socket. The clock is wall time in Unix milliseconds.
pub struct UdpTransport {
    sock: UdpSocket,
    start: Instant,
    epoch_ms: u64,
    buf: Vec<u8>,
}

impl UdpTransport {
    pub fn bind(addr: impl ToSocketAddrs) -> Result<Self, DhtError> {
        let sock = UdpSocket::bind(addr)?;
        let epoch_ms = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis() as u64).unwrap_or(0);
        Ok(UdpTransport { sock, start: Instant::now(), epoch_ms, buf: vec![0; 65536] })
    }

    pub fn local_addr(&self) -> Result<SocketAddr, DhtError> {
        Ok(self.sock.local_addr()?)
    }
}

impl Transport for UdpTransport {
    fn send_to(&mut self, to: SocketAddrV4, bytes: &[u8]) -> Result<(), DhtError> {
        self.sock.send_to(bytes, to)?;
        Ok(())
    }

    fn recv_until(&mut self, deadline: u64) -> Result<Option<(SocketAddrV4, Vec<u8>)>, DhtError> {
        loop {
            let now = self.now_ms();
            if now >= deadline {
                return Ok(None);
            }
            self.sock.set_read_timeout(Some(Duration::from_millis(deadline - now)))?;
            match self.sock.recv_from(&mut self.buf) {
                Ok((n, SocketAddr::V4(from))) => return Ok(Some((from, self.buf[..n].to_vec()))),
                Ok((_, SocketAddr::V6(_))) => continue,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => return Ok(None),
                // ICMP port-unreachable surfaces as a reset on some systems.
                Err(e) if e.kind() == ErrorKind::ConnectionReset => continue,
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn now_ms(&self) -> u64 {
        self.epoch_ms + self.start.elapsed().as_millis() as u64
    }
}
