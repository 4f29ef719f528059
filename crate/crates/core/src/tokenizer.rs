//! Byte-level vocabulary with four reserved control ids.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;

/// First byte id; byte `b` maps to `BYTE_OFFSET + b`.
pub const BYTE_OFFSET: usize = 4;
pub const BYTE_VOCAB: usize = BYTE_OFFSET + 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    size: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        Self { size: BYTE_VOCAB }
    }
}

impl Vocab {
    /// Ids above the byte range are reserved and never produced by `encode`.
    pub fn new(size: usize) -> Result<Self> {
        if size < BYTE_VOCAB {
            return Err(Error::config(
                "model.vocab_size",
                format!("must be at least {BYTE_VOCAB} for a byte-level vocabulary"),
            ));
        }
        Ok(Self { size })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_special(id: usize) -> bool {
        id < BYTE_OFFSET
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(|b| BYTE_OFFSET + b as usize).collect()
    }

    /// Drops control ids and maps byte ids back to text.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let mut bytes = Vec::with_capacity(ids.len());
        for &id in ids {
            if id >= self.size || id >= BYTE_VOCAB {
                return Err(Error::InvalidId {
                    id,
                    size: self.size,
                });
            }
            if !Self::is_special(id) {
                bytes.push((id - BYTE_OFFSET) as u8);
            }
        }
        String::from_utf8(bytes).map_err(|_| Error::InvalidUtf8)
    }

    /// Like [`Vocab::decode`], but skips reserved ids and replaces invalid
    /// UTF-8 with U+FFFD.
    pub fn decode_lossy(&self, ids: &[usize]) -> String {
        let bytes: Vec<u8> = ids
            .iter()
            .filter(|&&id| (BYTE_OFFSET..BYTE_VOCAB).contains(&id))
            .map(|&id| (id - BYTE_OFFSET) as u8)
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encode_examples() {
        let v = Vocab::default();
        assert_eq!(v.encode("ab"), vec![101, 102]);
        assert!(v.encode("").is_empty());
    }

    #[test]
    fn decode_examples() {
        let v = Vocab::default();
        assert_eq!(v.decode(&[101, 102]).unwrap(), "ab");
        assert_eq!(v.decode(&[BOS, 101, EOS]).unwrap(), "a");
        assert!(matches!(
            v.decode(&[9999]),
            Err(Error::InvalidId { id: 9999, size: 260 })
        ));
    }

    #[test]
    fn invalid_utf8_is_reported() {
        let v = Vocab::default();
        assert!(matches!(v.decode(&[BYTE_OFFSET + 0xff]), Err(Error::InvalidUtf8)));
    }

    #[test]
    fn reserved_ids_are_invalid() {
        let v = Vocab::new(300).unwrap();
        assert!(matches!(v.decode(&[270]), Err(Error::InvalidId { .. })));
        assert!(Vocab::new(100).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(s in any::<String>()) {
            let v = Vocab::default();
            let ids = v.encode(&s);
            prop_assert_eq!(ids.len(), s.len());
            prop_assert!(ids.iter().all(|&i| (BYTE_OFFSET..BYTE_VOCAB).contains(&i)));
            prop_assert_eq!(v.decode(&ids).unwrap(), s);
        }
    }
}
