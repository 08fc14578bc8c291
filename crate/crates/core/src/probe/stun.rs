//! STUN binding subset and the classic mapping-type discovery procedure.

use std::net::{Ipv4Addr, SocketAddrV4};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::ProbeError;
use crate::sim::MappingType;

pub const MAGIC_COOKIE: u32 = 0x2112_A442;
pub const BINDING_REQUEST: u16 = 0x0001;
pub const BINDING_SUCCESS: u16 = 0x0101;
pub const ATTR_MAPPED_ADDRESS: u16 = 0x0001;
pub const ATTR_CHANGE_REQUEST: u16 = 0x0003;
pub const ATTR_XOR_MAPPED_ADDRESS: u16 = 0x0020;
pub const ATTR_OTHER_ADDRESS: u16 = 0x802C;
pub const CHANGE_IP: u32 = 0x04;
pub const CHANGE_PORT: u32 = 0x02;
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StunWireError {
    #[error("message shorter than its header or declared length")]
    Truncated,
    #[error("bad magic cookie")]
    BadCookie,
    #[error("attribute 0x{0:04x} is malformed")]
    BadAttribute(u16),
    #[error("unexpected message type 0x{0:04x}")]
    UnexpectedType(u16),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindingRequest {
    pub txid: [u8; 12],
    pub change_ip: bool,
    pub change_port: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BindingResponse {
    pub txid: [u8; 12],
    pub mapped: SocketAddrV4,
    pub other: Option<SocketAddrV4>,
}

fn header(msg_type: u16, body_len: usize, txid: &[u8; 12]) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + body_len);
    out.extend_from_slice(&msg_type.to_be_bytes());
    out.extend_from_slice(&(body_len as u16).to_be_bytes());
    out.extend_from_slice(&MAGIC_COOKIE.to_be_bytes());
    out.extend_from_slice(txid);
    out
}

fn attr(out: &mut Vec<u8>, t: u16, value: &[u8]) {
    out.extend_from_slice(&t.to_be_bytes());
    out.extend_from_slice(&(value.len() as u16).to_be_bytes());
    out.extend_from_slice(value);
    while !out.len().is_multiple_of(4) {
        out.push(0);
    }
}

fn address_value(ep: SocketAddrV4, xor: bool) -> [u8; 8] {
    let (mut port, mut ip) = (ep.port(), u32::from(*ep.ip()));
    if xor {
        port ^= (MAGIC_COOKIE >> 16) as u16;
        ip ^= MAGIC_COOKIE;
    }
    let mut v = [0u8; 8];
    v[1] = 0x01;
    v[2..4].copy_from_slice(&port.to_be_bytes());
    v[4..].copy_from_slice(&ip.to_be_bytes());
    v
}

fn parse_address(t: u16, v: &[u8], xor: bool) -> Result<SocketAddrV4, StunWireError> {
    if v.len() != 8 || v[1] != 0x01 {
        return Err(StunWireError::BadAttribute(t));
    }
    let mut port = u16::from_be_bytes([v[2], v[3]]);
    let mut ip = u32::from_be_bytes([v[4], v[5], v[6], v[7]]);
    if xor {
        port ^= (MAGIC_COOKIE >> 16) as u16;
        ip ^= MAGIC_COOKIE;
    }
    Ok(SocketAddrV4::new(Ipv4Addr::from(ip), port))
}

type Parsed<'a> = (u16, [u8; 12], Vec<(u16, &'a [u8])>);

/// Splits a message into (type, txid, attributes).
fn parse(bytes: &[u8]) -> Result<Parsed<'_>, StunWireError> {
    if bytes.len() < HEADER_LEN {
        return Err(StunWireError::Truncated);
    }
    let t = u16::from_be_bytes([bytes[0], bytes[1]]);
    let len = usize::from(u16::from_be_bytes([bytes[2], bytes[3]]));
    if u32::from_be_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) != MAGIC_COOKIE {
        return Err(StunWireError::BadCookie);
    }
    if bytes.len() < HEADER_LEN + len {
        return Err(StunWireError::Truncated);
    }
    let txid: [u8; 12] = bytes[8..20].try_into().expect("12 bytes");
    let mut attrs = Vec::new();
    let mut rest = &bytes[HEADER_LEN..HEADER_LEN + len];
    while !rest.is_empty() {
        if rest.len() < 4 {
            return Err(StunWireError::Truncated);
        }
        let at = u16::from_be_bytes([rest[0], rest[1]]);
        let alen = usize::from(u16::from_be_bytes([rest[2], rest[3]]));
        let padded = 4 + alen.div_ceil(4) * 4;
        if rest.len() < 4 + alen {
            return Err(StunWireError::Truncated);
        }
        attrs.push((at, &rest[4..4 + alen]));
        rest = &rest[padded.min(rest.len())..];
    }
    Ok((t, txid, attrs))
}

impl BindingRequest {
    pub fn encode(&self) -> Vec<u8> {
        let flags = if self.change_ip { CHANGE_IP } else { 0 } | if self.change_port { CHANGE_PORT } else { 0 };
        let mut body = Vec::new();
        if flags != 0 {
            attr(&mut body, ATTR_CHANGE_REQUEST, &flags.to_be_bytes());
        }
        let mut out = header(BINDING_REQUEST, body.len(), &self.txid);
        out.extend_from_slice(&body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, StunWireError> {
        let (t, txid, attrs) = parse(bytes)?;
        if t != BINDING_REQUEST {
            return Err(StunWireError::UnexpectedType(t));
        }
        let mut flags = 0;
        for (at, v) in attrs {
            if at == ATTR_CHANGE_REQUEST {
                let v: [u8; 4] = v.try_into().map_err(|_| StunWireError::BadAttribute(at))?;
                flags = u32::from_be_bytes(v);
            }
        }
        Ok(BindingRequest { txid, change_ip: flags & CHANGE_IP != 0, change_port: flags & CHANGE_PORT != 0 })
    }
}

impl BindingResponse {
    pub fn encode(&self) -> Vec<u8> {
        let mut body = Vec::new();
        attr(&mut body, ATTR_XOR_MAPPED_ADDRESS, &address_value(self.mapped, true));
        if let Some(o) = self.other {
            attr(&mut body, ATTR_OTHER_ADDRESS, &address_value(o, false));
        }
        let mut out = header(BINDING_SUCCESS, body.len(), &self.txid);
        out.extend_from_slice(&body);
        out
    }

    /// Accepts XOR-MAPPED-ADDRESS, falling back to MAPPED-ADDRESS.
    pub fn decode(bytes: &[u8]) -> Result<Self, StunWireError> {
        let (t, txid, attrs) = parse(bytes)?;
        if t != BINDING_SUCCESS {
            return Err(StunWireError::UnexpectedType(t));
        }
        let (mut xor, mut plain, mut other) = (None, None, None);
        for (at, v) in attrs {
            match at {
                ATTR_XOR_MAPPED_ADDRESS => xor = Some(parse_address(at, v, true)?),
                ATTR_MAPPED_ADDRESS => plain = Some(parse_address(at, v, false)?),
                ATTR_OTHER_ADDRESS => other = Some(parse_address(at, v, false)?),
                _ => {}
            }
        }
        let mapped = xor.or(plain).ok_or(StunWireError::BadAttribute(ATTR_XOR_MAPPED_ADDRESS))?;
        Ok(BindingResponse { txid, mapped, other })
    }
}

/// Outcome of the discovery procedure, ordered from most restrictive to
/// most permissive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StunMapping {
    Symmetric,
    PortRestricted,
    AddressRestricted,
    FullCone,
    /// No translation on the path.
    Open,
}

impl StunMapping {
    pub fn as_mapping_type(self) -> Option<MappingType> {
        match self {
            StunMapping::Symmetric => Some(MappingType::Symmetric),
            StunMapping::PortRestricted => Some(MappingType::PortRestricted),
            StunMapping::AddressRestricted => Some(MappingType::AddressRestricted),
            StunMapping::FullCone => Some(MappingType::FullCone),
            StunMapping::Open => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StunOutcome {
    pub mapping: StunMapping,
    pub local: SocketAddrV4,
    /// Test I: mapped address seen by the primary server address.
    pub test1: SocketAddrV4,
    /// Test II: a reply arrived from the alternate address and port.
    pub test2: bool,
    /// Test I against the alternate address: mapped address seen there.
    pub test1_alt: Option<SocketAddrV4>,
    /// Test III: a reply arrived from the primary address, alternate port.
    pub test3: Option<bool>,
}

impl StunOutcome {
    /// Recomputes the mapping from the raw results.
    pub fn derive_mapping(&self) -> StunMapping {
        if self.test1 == self.local {
            StunMapping::Open
        } else if self.test2 {
            StunMapping::FullCone
        } else if self.test1_alt.is_some_and(|m| m != self.test1) {
            StunMapping::Symmetric
        } else if self.test3 == Some(true) {
            StunMapping::AddressRestricted
        } else {
            StunMapping::PortRestricted
        }
    }
}

/// A client socket that can exchange binding messages with a test server
/// having two addresses and two ports.
pub trait StunDriver {
    fn local_endpoint(&self) -> SocketAddrV4;
    fn server(&self) -> SocketAddrV4;
    /// Sends `request` from the fixed local socket and returns the first
    /// reply together with the endpoint it came from.
    fn transact(&mut self, to: SocketAddrV4, request: &[u8]) -> Result<Option<(SocketAddrV4, Vec<u8>)>, ProbeError>;
    fn next_txid(&mut self) -> [u8; 12];
}

fn binding<D: StunDriver + ?Sized>(
    d: &mut D,
    to: SocketAddrV4,
    change_ip: bool,
    change_port: bool,
) -> Result<Option<(SocketAddrV4, BindingResponse)>, ProbeError> {
    let req = BindingRequest { txid: d.next_txid(), change_ip, change_port };
    let Some((from, bytes)) = d.transact(to, &req.encode())? else {
        return Ok(None);
    };
    let resp = BindingResponse::decode(&bytes).map_err(|e| ProbeError::Protocol(e.to_string()))?;
    if resp.txid != req.txid {
        return Ok(None);
    }
    Ok(Some((from, resp)))
}

/// Runs tests I, II, I-alternate and III in that order, stopping as soon as
/// the mapping type is determined.
pub fn stun_classify<D: StunDriver + ?Sized>(d: &mut D) -> Result<StunOutcome, ProbeError> {
    let local = d.local_endpoint();
    let primary = d.server();
    let (_, r1) = binding(d, primary, false, false)?.ok_or(ProbeError::Unreachable)?;
    let mut out =
        StunOutcome { mapping: StunMapping::Open, local, test1: r1.mapped, test2: false, test1_alt: None, test3: None };
    if r1.mapped == local {
        return Ok(out);
    }
    let other = r1.other.ok_or_else(|| ProbeError::Protocol("server did not announce an alternate address".into()))?;
    out.test2 = binding(d, primary, true, true)?.is_some_and(|(from, _)| from.ip() == other.ip());
    if !out.test2 {
        let alt = binding(d, other, false, false)?;
        out.test1_alt = alt.map(|(_, r)| r.mapped);
        if out.test1_alt.is_none_or(|m| m == out.test1) {
            out.test3 = Some(
                binding(d, primary, false, true)?
                    .is_some_and(|(from, _)| from.ip() == primary.ip() && from.port() != primary.port()),
            );
        }
    }
    out.mapping = out.derive_mapping();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_wire_form() {
        let r = BindingRequest { txid: [7; 12], change_ip: true, change_port: true };
        let b = r.encode();
        assert_eq!(&b[..4], &[0x00, 0x01, 0x00, 0x08]);
        assert_eq!(&b[4..8], &[0x21, 0x12, 0xA4, 0x42]);
        assert_eq!(&b[20..], &[0x00, 0x03, 0x00, 0x04, 0, 0, 0, 0x06]);
        assert_eq!(BindingRequest::decode(&b).unwrap(), r);
        let plain = BindingRequest { txid: [1; 12], change_ip: false, change_port: false };
        assert_eq!(plain.encode().len(), 20);
    }

    #[test]
    fn xor_mapped_address_vector() {
        // Address 192.0.2.1:32853 from the published test vectors.
        let r = BindingResponse { txid: [0; 12], mapped: "192.0.2.1:32853".parse().unwrap(), other: None };
        let b = r.encode();
        assert_eq!(&b[20..32], &[0x00, 0x20, 0x00, 0x08, 0x00, 0x01, 0xa1, 0x47, 0xe1, 0x12, 0xa6, 0x43]);
        assert_eq!(BindingResponse::decode(&b).unwrap(), r);
    }

    #[test]
    fn rejects_garbage() {
        assert_eq!(BindingRequest::decode(&[0; 5]), Err(StunWireError::Truncated));
        let mut b = BindingRequest { txid: [0; 12], change_ip: false, change_port: false }.encode();
        b[4] = 0;
        assert_eq!(BindingRequest::decode(&b), Err(StunWireError::BadCookie));
    }

    #[test]
    fn derive_matches_procedure_order() {
        let local: SocketAddrV4 = "10.0.0.1:5000".parse().unwrap();
        let m: SocketAddrV4 = "5.5.5.5:6000".parse().unwrap();
        let base = StunOutcome {
            mapping: StunMapping::Open,
            local,
            test1: m,
            test2: false,
            test1_alt: Some(m),
            test3: Some(false),
        };
        assert_eq!(base.derive_mapping(), StunMapping::PortRestricted);
        assert_eq!(StunOutcome { test3: Some(true), ..base.clone() }.derive_mapping(), StunMapping::AddressRestricted);
        assert_eq!(StunOutcome { test2: true, ..base.clone() }.derive_mapping(), StunMapping::FullCone);
        let other: SocketAddrV4 = "5.5.5.5:6001".parse().unwrap();
        assert_eq!(StunOutcome { test1_alt: Some(other), ..base.clone() }.derive_mapping(), StunMapping::Symmetric);
        assert_eq!(StunOutcome { test1: local, ..base }.derive_mapping(), StunMapping::Open);
    }
}
