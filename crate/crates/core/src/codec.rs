//! Wire value model and its canonical binary encoding.
//!
//! Every RPC payload is a [`Msg`] tree. The encoding is deliberately
//! fixed-width (u32 lengths and counts, i64 integers, no varints) so that
//! the encoded size of a message is an exact linear function of its
//! contents. Benchmarks assert byte-exact linearity of payload sizes, which
//! varint encodings would break at length boundaries.
//!
//! Maps are ordered (`BTreeMap`), so encoding is canonical: equal values
//! encode to identical bytes.

use std::collections::BTreeMap;

use thiserror::Error;

/// Encoding version carried in every frame header.
pub const WIRE_VERSION: u8 = 1;

const TAG_NULL: u8 = 0;
const TAG_BOOL: u8 = 1;
const TAG_INT: u8 = 2;
const TAG_STR: u8 = 3;
const TAG_BYTES: u8 = 4;
const TAG_LIST: u8 = 5;
const TAG_MAP: u8 = 6;

/// A self-describing wire value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Msg {
    Null,
    Bool(bool),
    Int(i64),
    Str(String),
    Bytes(Vec<u8>),
    List(Vec<Msg>),
    Map(BTreeMap<String, Msg>),
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated message")]
    Truncated,
    #[error("unknown tag {0}")]
    UnknownTag(u8),
    #[error("invalid utf-8 in string")]
    InvalidUtf8,
    #[error("unsupported wire version {0}")]
    BadVersion(u8),
    #[error("trailing {0} bytes after value")]
    TrailingBytes(usize),
}

impl Msg {
    pub fn str(s: impl Into<String>) -> Msg {
        Msg::Str(s.into())
    }

    pub fn map() -> MapBuilder {
        MapBuilder(BTreeMap::new())
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            Msg::Str(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_int(&self) -> Option<i64> {
        match self {
            Msg::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            Msg::Bool(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Msg::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[Msg]> {
        match self {
            Msg::List(items) => Some(items),
            _ => None,
        }
    }

    pub fn as_map(&self) -> Option<&BTreeMap<String, Msg>> {
        match self {
            Msg::Map(m) => Some(m),
            _ => None,
        }
    }

    /// Map field access; `Null` for anything that is not there.
    pub fn get(&self, key: &str) -> &Msg {
        static NULL: Msg = Msg::Null;
        match self {
            Msg::Map(m) => m.get(key).unwrap_or(&NULL),
            _ => &NULL,
        }
    }

    pub fn get_str(&self, key: &str) -> Option<&str> {
        self.get(key).as_str()
    }

    pub fn get_int(&self, key: &str) -> Option<i64> {
        self.get(key).as_int()
    }

    /// Exact size of `encode(self)` in bytes.
    pub fn encoded_len(&self) -> usize {
        match self {
            Msg::Null => 1,
            Msg::Bool(_) => 2,
            Msg::Int(_) => 9,
            Msg::Str(s) => 5 + s.len(),
            Msg::Bytes(b) => 5 + b.len(),
            Msg::List(items) => 5 + items.iter().map(Msg::encoded_len).sum::<usize>(),
            Msg::Map(m) => {
                5 + m
                    .iter()
                    .map(|(k, v)| 4 + k.len() + v.encoded_len())
                    .sum::<usize>()
            }
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write(&mut out);
        out
    }

    fn write(&self, out: &mut Vec<u8>) {
        match self {
            Msg::Null => out.push(TAG_NULL),
            Msg::Bool(v) => {
                out.push(TAG_BOOL);
                out.push(*v as u8);
            }
            Msg::Int(v) => {
                out.push(TAG_INT);
                out.extend_from_slice(&v.to_le_bytes());
            }
            Msg::Str(s) => {
                out.push(TAG_STR);
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
            Msg::Bytes(b) => {
                out.push(TAG_BYTES);
                out.extend_from_slice(&(b.len() as u32).to_le_bytes());
                out.extend_from_slice(b);
            }
            Msg::List(items) => {
                out.push(TAG_LIST);
                out.extend_from_slice(&(items.len() as u32).to_le_bytes());
                for item in items {
                    item.write(out);
                }
            }
            Msg::Map(m) => {
                out.push(TAG_MAP);
                out.extend_from_slice(&(m.len() as u32).to_le_bytes());
                for (k, v) in m {
                    out.extend_from_slice(&(k.len() as u32).to_le_bytes());
                    out.extend_from_slice(k.as_bytes());
                    v.write(out);
                }
            }
        }
    }

    pub fn decode(buf: &[u8]) -> Result<Msg, CodecError> {
        let mut cur = Cursor { buf, pos: 0 };
        let msg = cur.read_value()?;
        if cur.pos != buf.len() {
            return Err(CodecError::TrailingBytes(buf.len() - cur.pos));
        }
        Ok(msg)
    }
}

/// Fluent builder for `Msg::Map` literals.
pub struct MapBuilder(BTreeMap<String, Msg>);

impl MapBuilder {
    pub fn field(mut self, key: &str, value: Msg) -> Self {
        self.0.insert(key.to_string(), value);
        self
    }

    pub fn str_field(self, key: &str, value: impl Into<String>) -> Self {
        self.field(key, Msg::Str(value.into()))
    }

    pub fn int_field(self, key: &str, value: i64) -> Self {
        self.field(key, Msg::Int(value))
    }

    pub fn build(self) -> Msg {
        Msg::Map(self.0)
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CodecError> {
        if self.pos + n > self.buf.len() {
            return Err(CodecError::Truncated);
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn read_u32(&mut self) -> Result<u32, CodecError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn read_value(&mut self) -> Result<Msg, CodecError> {
        let tag = self.take(1)?[0];
        match tag {
            TAG_NULL => Ok(Msg::Null),
            TAG_BOOL => Ok(Msg::Bool(self.take(1)?[0] != 0)),
            TAG_INT => {
                let b = self.take(8)?;
                let mut arr = [0u8; 8];
                arr.copy_from_slice(b);
                Ok(Msg::Int(i64::from_le_bytes(arr)))
            }
            TAG_STR => {
                let len = self.read_u32()? as usize;
                let bytes = self.take(len)?;
                String::from_utf8(bytes.to_vec())
                    .map(Msg::Str)
                    .map_err(|_| CodecError::InvalidUtf8)
            }
            TAG_BYTES => {
                let len = self.read_u32()? as usize;
                Ok(Msg::Bytes(self.take(len)?.to_vec()))
            }
            TAG_LIST => {
                let count = self.read_u32()? as usize;
                let mut items = Vec::new();
                for _ in 0..count {
                    items.push(self.read_value()?);
                }
                Ok(Msg::List(items))
            }
            TAG_MAP => {
                let count = self.read_u32()? as usize;
                let mut map = BTreeMap::new();
                for _ in 0..count {
                    let klen = self.read_u32()? as usize;
                    let key = String::from_utf8(self.take(klen)?.to_vec())
                        .map_err(|_| CodecError::InvalidUtf8)?;
                    let value = self.read_value()?;
                    map.insert(key, value);
                }
                Ok(Msg::Map(map))
            }
            other => Err(CodecError::UnknownTag(other)),
        }
    }
}

/// Frame a message for the socket transport: version byte + body, preceded
/// by a u32 length. `encode_frame` returns the length-prefixed bytes.
pub fn encode_frame(msg: &Msg) -> Vec<u8> {
    let body = msg.encode();
    let mut out = Vec::with_capacity(5 + body.len());
    out.extend_from_slice(&((body.len() + 1) as u32).to_le_bytes());
    out.push(WIRE_VERSION);
    out.extend_from_slice(&body);
    out
}

/// Decode a frame body (after the u32 length prefix has been consumed).
pub fn decode_frame_body(body: &[u8]) -> Result<Msg, CodecError> {
    if body.is_empty() {
        return Err(CodecError::Truncated);
    }
    if body[0] != WIRE_VERSION {
        return Err(CodecError::BadVersion(body[0]));
    }
    Msg::decode(&body[1..])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn arb_msg() -> impl Strategy<Value = Msg> {
        let leaf = prop_oneof![
            Just(Msg::Null),
            any::<bool>().prop_map(Msg::Bool),
            any::<i64>().prop_map(Msg::Int),
            "[a-z0-9/_.-]{0,24}".prop_map(Msg::Str),
            proptest::collection::vec(any::<u8>(), 0..32).prop_map(Msg::Bytes),
        ];
        leaf.prop_recursive(3, 64, 8, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..6).prop_map(Msg::List),
                proptest::collection::btree_map("[a-z]{1,8}", inner, 0..6).prop_map(Msg::Map),
            ]
        })
    }

    proptest! {
        #[test]
        fn roundtrip(msg in arb_msg()) {
            let bytes = msg.encode();
            prop_assert_eq!(bytes.len(), msg.encoded_len());
            let back = Msg::decode(&bytes).unwrap();
            prop_assert_eq!(back, msg);
        }
    }

    #[test]
    fn map_encoding_is_size_linear_in_entries() {
        // Each fixed-width entry must add a constant byte count, no matter
        // how many entries the map already has.
        let entry_cost = |n: usize| {
            let mut m = BTreeMap::new();
            for i in 0..n {
                m.insert(format!("e{:05}", i), Msg::Str("x".repeat(32)));
            }
            Msg::Map(m).encoded_len()
        };
        let base = entry_cost(0);
        let step = entry_cost(1) - base;
        for n in [2usize, 127, 128, 255, 256, 1000] {
            assert_eq!(entry_cost(n), base + step * n, "n={}", n);
        }
    }

    #[test]
    fn frame_roundtrip() {
        let msg = Msg::map().str_field("op", "echo").int_field("n", 7).build();
        let frame = encode_frame(&msg);
        let len = u32::from_le_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
        assert_eq!(len, frame.len() - 4);
        let back = decode_frame_body(&frame[4..]).unwrap();
        assert_eq!(back, msg);
    }

    #[test]
    fn rejects_bad_version() {
        assert_eq!(decode_frame_body(&[9, 0]), Err(CodecError::BadVersion(9)));
    }
}
