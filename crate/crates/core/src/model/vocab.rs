use alloc::vec::Vec;

use crate::TokenId;

/// Byte-level base vocabulary: 256 byte values, begin-of-text and pad.
pub const BYTE_VOCAB: usize = 258;
pub const BOS_ID: TokenId = 256;
pub const PAD_ID: TokenId = 257;

/// Base vocabulary extended with `<MARK_L>` and `<MARK_R>`, which take the
/// two ids directly after the base range.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    base_size: usize,
}

impl Vocabulary {
    pub fn new(base_size: usize) -> Self {
        Self { base_size }
    }

    pub fn base_size(&self) -> usize {
        self.base_size
    }

    pub fn size(&self) -> usize {
        self.base_size + 2
    }

    pub fn mark_l(&self) -> TokenId {
        self.base_size as TokenId
    }

    pub fn mark_r(&self) -> TokenId {
        self.base_size as TokenId + 1
    }

    pub fn is_mark(&self, id: TokenId) -> bool {
        id == self.mark_l() || id == self.mark_r()
    }
}

/// Text to byte ids and back. Ids at or above 256 decode to nothing.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.bytes().map(TokenId::from).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<u8> {
        ids.iter().filter(|&&id| id < 256).map(|&id| id as u8).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn marks_extend_base_range() {
        let v = Vocabulary::new(BYTE_VOCAB);
        assert_eq!(v.mark_l(), 258);
        assert_eq!(v.mark_r(), 259);
        assert_ne!(v.mark_l(), v.mark_r());
        assert_eq!(v.size(), 260);
        assert!(v.is_mark(259) && !v.is_mark(257));
    }

    #[test]
    fn bytes_roundtrip() {
        let t = ByteTokenizer;
        let ids = t.encode("héllo");
        assert_eq!(t.decode(&ids), "héllo".as_bytes());
        assert_eq!(t.decode(&[104, BOS_ID, 105, 258]), b"hi");
    }
}
