//! Canonical bencode. Decoding is strict: it rejects anything that would
//! not re-encode to the same bytes (unsorted or duplicate keys, leading
//! zeros, `-0`, trailing data).

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

const MAX_DEPTH: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Value {
    Bytes(Vec<u8>),
    Int(i64),
    List(Vec<Value>),
    Dict(BTreeMap<Vec<u8>, Value>),
}

impl Value {
    pub fn bytes(b: impl Into<Vec<u8>>) -> Value {
        Value::Bytes(b.into())
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Value::Int(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Value]> {
        match self {
            Value::List(l) => Some(l),
            _ => None,
        }
    }

    pub fn as_dict(&self) -> Option<&BTreeMap<Vec<u8>, Value>> {
        match self {
            Value::Dict(d) => Some(d),
            _ => None,
        }
    }

    pub fn get(&self, key: &[u8]) -> Option<&Value> {
        self.as_dict()?.get(key)
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Bytes(b) => match std::str::from_utf8(b) {
                Ok(s) if s.chars().all(|c| !c.is_control()) => write!(f, "{s:?}"),
                _ => write!(f, "0x{}", hex::encode(b)),
            },
            Value::Int(i) => write!(f, "{i}"),
            Value::List(l) => {
                f.write_str("[")?;
                for (i, v) in l.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{v}")?;
                }
                f.write_str("]")
            }
            Value::Dict(d) => {
                f.write_str("{")?;
                for (i, (k, v)) in d.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{}: {v}", Value::Bytes(k.clone()))?;
                }
                f.write_str("}")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeErrorKind {
    UnexpectedEof,
    UnexpectedByte(u8),
    BadInteger,
    IntegerOverflow,
    BadLength,
    KeyNotBytes,
    UnsortedKey,
    DuplicateKey,
    TrailingData,
    TooDeep,
}

impl fmt::Display for DecodeErrorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeErrorKind::UnexpectedEof => f.write_str("unexpected end of input"),
            DecodeErrorKind::UnexpectedByte(b) => write!(f, "unexpected byte 0x{b:02x}"),
            DecodeErrorKind::BadInteger => f.write_str("non-canonical integer"),
            DecodeErrorKind::IntegerOverflow => f.write_str("integer out of range"),
            DecodeErrorKind::BadLength => f.write_str("bad string length"),
            DecodeErrorKind::KeyNotBytes => f.write_str("dictionary key is not a byte string"),
            DecodeErrorKind::UnsortedKey => f.write_str("dictionary keys out of order"),
            DecodeErrorKind::DuplicateKey => f.write_str("duplicate dictionary key"),
            DecodeErrorKind::TrailingData => f.write_str("trailing data"),
            DecodeErrorKind::TooDeep => f.write_str("nesting too deep"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("bencode error at byte {offset}: {kind}")]
pub struct DecodeError {
    pub offset: usize,
    pub kind: DecodeErrorKind,
}

pub fn encode(v: &Value) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(v, &mut out);
    out
}

pub fn encode_into(v: &Value, out: &mut Vec<u8>) {
    match v {
        Value::Bytes(b) => {
            out.extend_from_slice(b.len().to_string().as_bytes());
            out.push(b':');
            out.extend_from_slice(b);
        }
        Value::Int(i) => {
            out.push(b'i');
            out.extend_from_slice(i.to_string().as_bytes());
            out.push(b'e');
        }
        Value::List(l) => {
            out.push(b'l');
            for item in l {
                encode_into(item, out);
            }
            out.push(b'e');
        }
        Value::Dict(d) => {
            out.push(b'd');
            for (k, item) in d {
                out.extend_from_slice(k.len().to_string().as_bytes());
                out.push(b':');
                out.extend_from_slice(k);
                encode_into(item, out);
            }
            out.push(b'e');
        }
    }
}

pub fn decode(input: &[u8]) -> Result<Value, DecodeError> {
    let mut d = Decoder { buf: input, pos: 0 };
    let v = d.value(0)?;
    if d.pos != input.len() {
        return Err(d.err(DecodeErrorKind::TrailingData));
    }
    Ok(v)
}

struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Decoder<'_> {
    fn err(&self, kind: DecodeErrorKind) -> DecodeError {
        DecodeError { offset: self.pos, kind }
    }

    fn peek(&self) -> Result<u8, DecodeError> {
        self.buf.get(self.pos).copied().ok_or(self.err(DecodeErrorKind::UnexpectedEof))
    }

    fn value(&mut self, depth: usize) -> Result<Value, DecodeError> {
        if depth > MAX_DEPTH {
            return Err(self.err(DecodeErrorKind::TooDeep));
        }
        match self.peek()? {
            b'i' => {
                self.pos += 1;
                let i = self.integer(b'e')?;
                Ok(Value::Int(i))
            }
            b'0'..=b'9' => self.byte_string().map(Value::Bytes),
            b'l' => {
                self.pos += 1;
                let mut items = Vec::new();
                while self.peek()? != b'e' {
                    items.push(self.value(depth + 1)?);
                }
                self.pos += 1;
                Ok(Value::List(items))
            }
            b'd' => {
                self.pos += 1;
                let mut map = BTreeMap::new();
                let mut last: Option<Vec<u8>> = None;
                while self.peek()? != b'e' {
                    let at = self.pos;
                    if !self.peek()?.is_ascii_digit() {
                        return Err(self.err(DecodeErrorKind::KeyNotBytes));
                    }
                    let key = self.byte_string()?;
                    if let Some(prev) = &last {
                        let kind = match key.cmp(prev) {
                            std::cmp::Ordering::Less => Some(DecodeErrorKind::UnsortedKey),
                            std::cmp::Ordering::Equal => Some(DecodeErrorKind::DuplicateKey),
                            std::cmp::Ordering::Greater => None,
                        };
                        if let Some(kind) = kind {
                            return Err(DecodeError { offset: at, kind });
                        }
                    }
                    let v = self.value(depth + 1)?;
                    last = Some(key.clone());
                    map.insert(key, v);
                }
                self.pos += 1;
                Ok(Value::Dict(map))
            }
            other => Err(self.err(DecodeErrorKind::UnexpectedByte(other))),
        }
    }

    /// Parses a canonical decimal integer up to `end`, consuming `end`.
    fn integer(&mut self, end: u8) -> Result<i64, DecodeError> {
        let start = self.pos;
        let rest = &self.buf[start..];
        let len = rest
            .iter()
            .position(|&b| b == end)
            .ok_or(DecodeError { offset: self.buf.len(), kind: DecodeErrorKind::UnexpectedEof })?;
        let digits = &rest[..len];
        let (neg, body) = match digits.split_first() {
            Some((b'-', body)) => (true, body),
            _ => (false, digits),
        };
        let canonical = !body.is_empty()
            && body.iter().all(u8::is_ascii_digit)
            && !(body.len() > 1 && body[0] == b'0')
            && !(neg && body == b"0");
        if !canonical {
            return Err(DecodeError { offset: start, kind: DecodeErrorKind::BadInteger });
        }
        let text = std::str::from_utf8(digits).expect("ascii digits");
        let v =
            text.parse::<i64>().map_err(|_| DecodeError { offset: start, kind: DecodeErrorKind::IntegerOverflow })?;
        self.pos = start + len + 1;
        Ok(v)
    }

    fn byte_string(&mut self) -> Result<Vec<u8>, DecodeError> {
        let at = self.pos;
        let n = self.integer(b':').map_err(|e| match e.kind {
            DecodeErrorKind::UnexpectedEof => e,
            _ => DecodeError { offset: at, kind: DecodeErrorKind::BadLength },
        })?;
        let n = usize::try_from(n).map_err(|_| DecodeError { offset: at, kind: DecodeErrorKind::BadLength })?;
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or(DecodeError { offset: self.buf.len(), kind: DecodeErrorKind::UnexpectedEof })?;
        let s = self.buf[self.pos..end].to_vec();
        self.pos = end;
        Ok(s)
    }
}
