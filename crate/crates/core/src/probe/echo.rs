//! Line-based echo protocol: the client sends `ECHO <nonce>` and the server
//! answers `<nonce> <observed_ip> <observed_port>`.

use std::net::{Ipv4Addr, SocketAddrV4};

pub fn request(nonce: &str) -> String {
    format!("ECHO {nonce}\n")
}

pub fn parse_request(line: &str) -> Option<&str> {
    let nonce = line.trim_end_matches(['\r', '\n']).strip_prefix("ECHO ")?;
    (!nonce.is_empty() && !nonce.contains(char::is_whitespace)).then_some(nonce)
}

pub fn reply(nonce: &str, observed: SocketAddrV4) -> String {
    format!("{nonce} {} {}\n", observed.ip(), observed.port())
}

pub fn parse_reply(line: &str) -> Option<(&str, SocketAddrV4)> {
    let mut it = line.trim_end_matches(['\r', '\n']).split(' ');
    let nonce = it.next().filter(|n| !n.is_empty())?;
    let ip: Ipv4Addr = it.next()?.parse().ok()?;
    let port: u16 = it.next()?.parse().ok()?;
    it.next().is_none().then_some((nonce, SocketAddrV4::new(ip, port)))
}
