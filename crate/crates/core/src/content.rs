//! Replica content.
//!
//! Real byte buffers are used for everything a client actually uploads or
//! downloads. Scenario files are size-declared: a `Synthetic` body carries a
//! generator seed and a declared size instead of materialized bytes, so a
//! simulated 114 MB replica costs nothing to store, transfer or scrub while
//! still having a digest that changes whenever the (virtual) bytes change.

use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::codec::Msg;

pub const CHECKSUM_SHA256: &str = "sha256";
pub const CHECKSUM_SYNTHETIC: &str = "synthetic-sha256";

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Content {
    Bytes(Vec<u8>),
    /// Size-declared pseudorandom content: byte `i` is `gen(seed, i)` xored
    /// with any patch at offset `i`.
    Synthetic {
        seed: u64,
        size: u64,
        patches: BTreeMap<u64, u8>,
    },
}

impl Content {
    pub fn synthetic(seed: u64, size: u64) -> Content {
        Content::Synthetic {
            seed,
            size,
            patches: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> u64 {
        match self {
            Content::Bytes(b) => b.len() as u64,
            Content::Synthetic { size, .. } => *size,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn checksum_type(&self) -> &'static str {
        match self {
            Content::Bytes(_) => CHECKSUM_SHA256,
            Content::Synthetic { .. } => CHECKSUM_SYNTHETIC,
        }
    }

    /// Digest of the content. For real bytes this is sha256 over the bytes.
    /// For synthetic content it is sha256 over the canonical descriptor,
    /// which is equivalent for integrity purposes: two synthetic bodies have
    /// equal digests iff their generated byte streams are equal.
    pub fn checksum(&self) -> String {
        match self {
            Content::Bytes(b) => sha256_hex(b),
            Content::Synthetic {
                seed,
                size,
                patches,
            } => {
                let mut hasher = Sha256::new();
                hasher.update(b"synthetic-v1");
                hasher.update(seed.to_le_bytes());
                hasher.update(size.to_le_bytes());
                for (off, x) in patches {
                    if *x != 0 {
                        hasher.update(off.to_le_bytes());
                        hasher.update([*x]);
                    }
                }
                hex::encode(hasher.finalize())
            }
        }
    }

    /// Flip one byte in place. Used by fault injection and by tests.
    pub fn corrupt(&mut self, offset: u64, xor: u8) {
        match self {
            Content::Bytes(b) => {
                if let Some(byte) = b.get_mut(offset as usize) {
                    *byte ^= xor;
                }
            }
            Content::Synthetic { patches, size, .. } => {
                if offset < *size {
                    let entry = patches.entry(offset).or_insert(0);
                    *entry ^= xor;
                    if *entry == 0 {
                        patches.remove(&offset);
                    }
                }
            }
        }
    }

    pub fn to_msg(&self) -> Msg {
        match self {
            Content::Bytes(b) => Msg::map()
                .str_field("kind", "bytes")
                .field("data", Msg::Bytes(b.clone()))
                .build(),
            Content::Synthetic {
                seed,
                size,
                patches,
            } => {
                let patch_list = patches
                    .iter()
                    .map(|(o, x)| Msg::List(vec![Msg::Int(*o as i64), Msg::Int(*x as i64)]))
                    .collect();
                Msg::map()
                    .str_field("kind", "synthetic")
                    .int_field("seed", *seed as i64)
                    .int_field("size", *size as i64)
                    .field("patches", Msg::List(patch_list))
                    .build()
            }
        }
    }

    pub fn from_msg(msg: &Msg) -> Option<Content> {
        match msg.get_str("kind")? {
            "bytes" => Some(Content::Bytes(msg.get("data").as_bytes()?.to_vec())),
            "synthetic" => {
                let mut patches = BTreeMap::new();
                for item in msg.get("patches").as_list()? {
                    let pair = item.as_list()?;
                    patches.insert(pair[0].as_int()? as u64, pair[1].as_int()? as u8);
                }
                Some(Content::Synthetic {
                    seed: msg.get_int("seed")? as u64,
                    size: msg.get_int("size")? as u64,
                    patches,
                })
            }
            _ => None,
        }
    }

    /// Materialize actual bytes. Intended for real buffers and small
    /// synthetic bodies (tests); scenario-scale synthetic content is never
    /// expanded.
    pub fn materialize(&self) -> Vec<u8> {
        match self {
            Content::Bytes(b) => b.clone(),
            Content::Synthetic {
                seed,
                size,
                patches,
            } => {
                let mut out = synthetic_bytes(*seed, *size);
                for (off, x) in patches {
                    if (*off as usize) < out.len() {
                        out[*off as usize] ^= x;
                    }
                }
                out
            }
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn synthetic_bytes(seed: u64, size: u64) -> Vec<u8> {
    let mut state = seed | 1;
    let mut out = Vec::with_capacity(size as usize);
    while (out.len() as u64) < size {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        for byte in state.to_le_bytes() {
            if (out.len() as u64) == size {
                break;
            }
            out.push(byte);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corruption_changes_checksum_and_is_reversible() {
        let mut c = Content::synthetic(7, 1 << 20);
        let clean = c.checksum();
        c.corrupt(12345, 0x40);
        assert_ne!(c.checksum(), clean);
        c.corrupt(12345, 0x40);
        assert_eq!(c.checksum(), clean);
    }

    #[test]
    fn real_bytes_checksum_matches_sha256() {
        let c = Content::Bytes(b"orange".to_vec());
        assert_eq!(c.checksum(), sha256_hex(b"orange"));
        assert_eq!(c.checksum_type(), CHECKSUM_SHA256);
    }

    #[test]
    fn synthetic_digest_tracks_generated_bytes() {
        // Equality of digests must agree with equality of materialized bytes.
        let a = Content::synthetic(1, 4096);
        let mut b = Content::synthetic(1, 4096);
        assert_eq!(a.materialize(), b.materialize());
        assert_eq!(a.checksum(), b.checksum());
        b.corrupt(100, 1);
        assert_ne!(a.materialize(), b.materialize());
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn msg_roundtrip() {
        let mut c = Content::synthetic(9, 114 * 1_000_000);
        c.corrupt(3, 0xff);
        assert_eq!(Content::from_msg(&c.to_msg()).unwrap(), c);
        let b = Content::Bytes(vec![1, 2, 3]);
        assert_eq!(Content::from_msg(&b.to_msg()).unwrap(), b);
    }
}
