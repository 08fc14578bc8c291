//! KRPC messages (ping and find_node) over bencode.

use std::collections::BTreeMap;

use super::bencode::{self, Value};
use super::node::{CompactNodeInfo, NodeId};
use super::DhtError;

type Dict = BTreeMap<Vec<u8>, Value>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Method {
    Ping,
    FindNode,
    /// Any other query name, kept so the message still round-trips.
    Other(Vec<u8>),
}

impl Method {
    fn name(&self) -> &[u8] {
        match self {
            Method::Ping => b"ping",
            Method::FindNode => b"find_node",
            Method::Other(n) => n,
        }
    }

    fn from_name(n: &[u8]) -> Method {
        match n {
            b"ping" => Method::Ping,
            b"find_node" => Method::FindNode,
            other => Method::Other(other.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    Query { method: Method, args: Dict },
    Response { values: Dict },
    Error { code: i64, message: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KrpcMessage {
    pub tid: Vec<u8>,
    pub body: Body,
    /// Top-level keys other than `t`, `y`, `q`, `a`, `r`, `e` (e.g. `v`).
    pub extra: Dict,
}

fn id_dict(id: &NodeId) -> Dict {
    Dict::from([(b"id".to_vec(), Value::bytes(id.0.to_vec()))])
}

impl KrpcMessage {
    pub fn ping(tid: &[u8], id: &NodeId) -> Self {
        KrpcMessage {
            tid: tid.to_vec(),
            body: Body::Query { method: Method::Ping, args: id_dict(id) },
            extra: Dict::new(),
        }
    }

    pub fn find_node(tid: &[u8], id: &NodeId, target: &NodeId) -> Self {
        let mut args = id_dict(id);
        args.insert(b"target".to_vec(), Value::bytes(target.0.to_vec()));
        KrpcMessage { tid: tid.to_vec(), body: Body::Query { method: Method::FindNode, args }, extra: Dict::new() }
    }

    pub fn ping_response(tid: &[u8], id: &NodeId) -> Self {
        KrpcMessage { tid: tid.to_vec(), body: Body::Response { values: id_dict(id) }, extra: Dict::new() }
    }

    pub fn find_node_response(tid: &[u8], id: &NodeId, nodes: &[CompactNodeInfo]) -> Self {
        let mut values = id_dict(id);
        values.insert(b"nodes".to_vec(), Value::bytes(CompactNodeInfo::encode_list(nodes)));
        KrpcMessage { tid: tid.to_vec(), body: Body::Response { values }, extra: Dict::new() }
    }

    pub fn error(tid: &[u8], code: i64, message: &str) -> Self {
        KrpcMessage {
            tid: tid.to_vec(),
            body: Body::Error { code, message: message.as_bytes().to_vec() },
            extra: Dict::new(),
        }
    }

    /// The sender's node id from `a.id` or `r.id`.
    pub fn sender_id(&self) -> Option<NodeId> {
        let d = match &self.body {
            Body::Query { args, .. } => args,
            Body::Response { values } => values,
            Body::Error { .. } => return None,
        };
        NodeId::from_slice(d.get(&b"id"[..])?.as_bytes()?)
    }

    pub fn target(&self) -> Option<NodeId> {
        match &self.body {
            Body::Query { args, .. } => NodeId::from_slice(args.get(&b"target"[..])?.as_bytes()?),
            _ => None,
        }
    }

    /// IPv4 compact node list of a response; empty when absent. The
    /// 38-byte IPv6 form (`nodes6`) is never consulted.
    pub fn nodes(&self) -> Result<Vec<CompactNodeInfo>, DhtError> {
        let Body::Response { values } = &self.body else {
            return Ok(Vec::new());
        };
        match values.get(&b"nodes"[..]) {
            None => Ok(Vec::new()),
            Some(Value::Bytes(b)) => CompactNodeInfo::decode_list(b),
            Some(_) => Err(DhtError::Malformed("nodes is not a byte string".into())),
        }
    }

    pub fn to_value(&self) -> Value {
        let mut d = self.extra.clone();
        d.insert(b"t".to_vec(), Value::bytes(self.tid.clone()));
        match &self.body {
            Body::Query { method, args } => {
                d.insert(b"y".to_vec(), Value::bytes("q"));
                d.insert(b"q".to_vec(), Value::bytes(method.name().to_vec()));
                d.insert(b"a".to_vec(), Value::Dict(args.clone()));
            }
            Body::Response { values } => {
                d.insert(b"y".to_vec(), Value::bytes("r"));
                d.insert(b"r".to_vec(), Value::Dict(values.clone()));
            }
            Body::Error { code, message } => {
                d.insert(b"y".to_vec(), Value::bytes("e"));
                d.insert(b"e".to_vec(), Value::List(vec![Value::Int(*code), Value::bytes(message.clone())]));
            }
        }
        Value::Dict(d)
    }

    pub fn from_value(v: Value) -> Result<Self, DhtError> {
        let bad = |m: &str| DhtError::Malformed(m.to_string());
        let Value::Dict(mut d) = v else {
            return Err(bad("message is not a dictionary"));
        };
        let tid = match d.remove(&b"t"[..]) {
            Some(Value::Bytes(t)) => t,
            _ => return Err(bad("missing transaction id")),
        };
        let y = match d.remove(&b"y"[..]) {
            Some(Value::Bytes(y)) => y,
            _ => return Err(bad("missing message type")),
        };
        let mut take_dict = |key: &[u8], what: &str| match d.remove(key) {
            Some(Value::Dict(x)) => Ok(x),
            _ => Err(bad(what)),
        };
        let body = match y.as_slice() {
            b"q" => {
                let args = take_dict(b"a", "query without arguments")?;
                let method = match d.remove(&b"q"[..]) {
                    Some(Value::Bytes(q)) => Method::from_name(&q),
                    _ => return Err(bad("query without method")),
                };
                Body::Query { method, args }
            }
            b"r" => Body::Response { values: take_dict(b"r", "response without values")? },
            b"e" => match d.remove(&b"e"[..]) {
                Some(Value::List(l)) => match l.as_slice() {
                    [Value::Int(code), Value::Bytes(msg)] => Body::Error { code: *code, message: msg.clone() },
                    _ => return Err(bad("error body is not [code, message]")),
                },
                _ => return Err(bad("error without body")),
            },
            _ => return Err(bad("unknown message type")),
        };
        // Keys belonging to other message types would not survive a
        // round trip through the typed form.
        for k in [&b"q"[..], b"a", b"r", b"e"] {
            if d.contains_key(k) {
                return Err(bad("conflicting message sections"));
            }
        }
        Ok(KrpcMessage { tid, body, extra: d })
    }

    pub fn encode(&self) -> Vec<u8> {
        bencode::encode(&self.to_value())
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, DhtError> {
        Self::from_value(bencode::decode(bytes)?)
    }
}
