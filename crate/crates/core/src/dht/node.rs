use std::fmt;
use std::net::{Ipv4Addr, SocketAddrV4};
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::DhtError;

pub const NODE_ID_LEN: usize = 20;
pub const COMPACT_NODE_LEN: usize = 26;

/// 160-bit DHT node identifier.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct NodeId(pub [u8; NODE_ID_LEN]);

/// XOR distance between two ids, ordered as a big-endian integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Distance(pub [u8; NODE_ID_LEN]);

impl NodeId {
    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut b = [0u8; NODE_ID_LEN];
        rng.fill(&mut b[..]);
        NodeId(b)
    }

    pub fn from_slice(b: &[u8]) -> Option<Self> {
        b.try_into().ok().map(NodeId)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

pub fn xor_distance(a: &NodeId, b: &NodeId) -> Distance {
    let mut d = [0u8; NODE_ID_LEN];
    for (i, out) in d.iter_mut().enumerate() {
        *out = a.0[i] ^ b.0[i];
    }
    Distance(d)
}

impl fmt::Debug for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "NodeId({})", self.to_hex())
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl FromStr for NodeId {
    type Err = DhtError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bytes = hex::decode(s).map_err(|_| DhtError::BadNodeId(s.to_string()))?;
        NodeId::from_slice(&bytes).ok_or_else(|| DhtError::BadNodeId(s.to_string()))
    }
}

impl Serialize for NodeId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A peer is the full (endpoint, nodeid) pair; neither half alone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PeerIdentity {
    pub endpoint: SocketAddrV4,
    pub nodeid: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CompactNodeInfo {
    pub id: NodeId,
    pub addr: SocketAddrV4,
}

impl CompactNodeInfo {
    pub fn identity(&self) -> PeerIdentity {
        PeerIdentity { endpoint: self.addr, nodeid: self.id }
    }

    pub fn encode(&self) -> [u8; COMPACT_NODE_LEN] {
        let mut out = [0u8; COMPACT_NODE_LEN];
        out[..20].copy_from_slice(&self.id.0);
        out[20..24].copy_from_slice(&self.addr.ip().octets());
        out[24..].copy_from_slice(&self.addr.port().to_be_bytes());
        out
    }

    pub fn decode(b: &[u8; COMPACT_NODE_LEN]) -> Self {
        let id = NodeId::from_slice(&b[..20]).expect("20 bytes");
        let ip = Ipv4Addr::new(b[20], b[21], b[22], b[23]);
        let port = u16::from_be_bytes([b[24], b[25]]);
        CompactNodeInfo { id, addr: SocketAddrV4::new(ip, port) }
    }

    pub fn encode_list(nodes: &[CompactNodeInfo]) -> Vec<u8> {
        nodes.iter().flat_map(|n| n.encode()).collect()
    }

    pub fn decode_list(b: &[u8]) -> Result<Vec<CompactNodeInfo>, DhtError> {
        if !b.len().is_multiple_of(COMPACT_NODE_LEN) {
            return Err(DhtError::NodeListLength(b.len()));
        }
        Ok(b.chunks_exact(COMPACT_NODE_LEN)
            .map(|c| CompactNodeInfo::decode(c.try_into().expect("exact chunk")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn distance_basics() {
        let zero = NodeId::default();
        let mut one = NodeId::default();
        one.0[19] = 1;
        assert_eq!(xor_distance(&one, &one), Distance::default());
        assert_eq!(xor_distance(&zero, &one).0[19], 1);
        assert!(xor_distance(&zero, &one).0[..19].iter().all(|&b| b == 0));
        assert_eq!(xor_distance(&zero, &one), xor_distance(&one, &zero));
    }

    #[test]
    fn compact_layout_byte_by_byte() {
        let mut id = [0u8; 20];
        for (i, b) in id.iter_mut().enumerate() {
            *b = i as u8 + 1;
        }
        let n = CompactNodeInfo { id: NodeId(id), addr: "192.0.2.7:6881".parse().unwrap() };
        let enc = n.encode();
        assert_eq!(&enc[..20], &id);
        assert_eq!(&enc[20..24], &[192, 0, 2, 7]);
        assert_eq!(&enc[24..], &[0x1a, 0xe1]);
        assert_eq!(CompactNodeInfo::decode(&enc), n);
        assert!(matches!(CompactNodeInfo::decode_list(&[0u8; 38]), Err(DhtError::NodeListLength(38))));
    }

    #[test]
    fn hex_round_trip() {
        let id: NodeId = "00112233445566778899aabbccddeeff00112233".parse().unwrap();
        assert_eq!(id.to_hex(), "00112233445566778899aabbccddeeff00112233");
        assert!("0011".parse::<NodeId>().is_err());
        assert!("zz".parse::<NodeId>().is_err());
    }
}
