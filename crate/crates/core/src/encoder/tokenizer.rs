use crate::error::{Error, Result};

pub const CLS_ID: usize = 0;
pub const PAD_ID: usize = 1;
pub const UNK_ID: usize = 2;
const BYTE_BASE: usize = 3;
/// CLS/PAD/UNK plus one id per byte value.
pub const BYTE_VOCAB_SIZE: usize = 259;

pub fn byte_id(b: u8) -> usize {
    BYTE_BASE + b as usize
}

/// Token ids plus an attention mask that is 1 on a prefix and 0 on any
/// padded suffix. Position 0 is always CLS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub mask: Vec<u8>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, mask: Vec<u8>) -> Result<Self> {
        if ids.is_empty() || ids.len() != mask.len() {
            return Err(Error::data(format!(
                "token sequence needs matching non-empty ids/mask, got {}/{}",
                ids.len(),
                mask.len()
            )));
        }
        if ids[0] != CLS_ID || mask[0] != 1 {
            return Err(Error::data("token sequence must start with an unmasked CLS"));
        }
        let mut seen_zero = false;
        for &m in &mask {
            match m {
                1 if seen_zero => return Err(Error::data("mask must be a 1-prefix followed by 0s")),
                0 => seen_zero = true,
                1 => {}
                _ => return Err(Error::data("mask entries must be 0 or 1")),
            }
        }
        Ok(TokenSequence { ids, mask })
    }

    /// All-unmasked sequence (the common unpadded case).
    pub fn unpadded(ids: Vec<usize>) -> Result<Self> {
        let mask = vec![1; ids.len()];
        Self::new(ids, mask)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Number of unmasked positions.
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }

    /// Copy extended with `extra` masked PAD positions.
    pub fn padded_by(&self, extra: usize) -> TokenSequence {
        let mut ids = self.ids.clone();
        let mut mask = self.mask.clone();
        ids.extend(std::iter::repeat_n(PAD_ID, extra));
        mask.extend(std::iter::repeat_n(0, extra));
        TokenSequence { ids, mask }
    }
}

/// CLS plus one id per byte, truncated to `max_len` (CLS survives
/// truncation). Any byte sequence tokenizes; there is no failure path.
pub fn tokenize(text: &str, max_len: usize) -> TokenSequence {
    let cap = max_len.max(1);
    let mut ids = Vec::with_capacity((text.len() + 1).min(cap));
    ids.push(CLS_ID);
    for &b in text.as_bytes() {
        if ids.len() == cap {
            break;
        }
        ids.push(byte_id(b));
    }
    let mask = vec![1; ids.len()];
    TokenSequence { ids, mask }
}

/// Inverse of `tokenize` on byte tokens; CLS/PAD/UNK are dropped. Bytes
/// that no longer form valid UTF-8 (e.g. a truncation splitting a
/// multi-byte char) are replaced, deterministically.
pub fn detokenize(ids: &[usize]) -> String {
    let bytes: Vec<u8> = ids.iter().filter(|&&id| id >= BYTE_BASE).map(|&id| (id - BYTE_BASE) as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_is_cls_only() {
        let s = tokenize("", 512);
        assert_eq!(s.ids, vec![CLS_ID]);
        assert_eq!(s.mask, vec![1]);
    }

    #[test]
    fn single_ascii_char() {
        let s = tokenize("A", 512);
        assert_eq!(s.ids, vec![CLS_ID, byte_id(b'A')]);
        assert_eq!(s.len(), 2);
    }

    #[test]
    fn truncates_to_max_len_keeping_cls() {
        let long = "x".repeat(10_000);
        let s = tokenize(&long, 8192);
        assert_eq!(s.len(), 8192);
        assert_eq!(s.ids[0], CLS_ID);
        assert!(s.ids[1..].iter().all(|&id| id == byte_id(b'x')));
    }

    #[test]
    fn round_trips_utf8() {
        for text in ["hello world", "byte-level ¥ tokens 安全", "tabs\tand\nnewlines", ""] {
            let s = tokenize(text, 512);
            assert_eq!(detokenize(&s.ids), text);
        }
    }

    #[test]
    fn detokenize_skips_specials() {
        let ids = vec![CLS_ID, byte_id(b'h'), byte_id(b'i'), PAD_ID, PAD_ID];
        assert_eq!(detokenize(&ids), "hi");
    }

    #[test]
    fn sequence_invariants_enforced() {
        assert!(TokenSequence::new(vec![], vec![]).is_err());
        assert!(TokenSequence::new(vec![CLS_ID, 5], vec![1]).is_err(), "length mismatch");
        assert!(TokenSequence::new(vec![5, 5], vec![1, 1]).is_err(), "missing CLS");
        assert!(TokenSequence::new(vec![CLS_ID, 5, 6], vec![1, 0, 1]).is_err(), "mask not prefix");
        let ok = TokenSequence::new(vec![CLS_ID, 5, PAD_ID], vec![1, 1, 0]).unwrap();
        assert_eq!(ok.real_len(), 2);
    }

    #[test]
    fn padding_extends_mask_with_zeros() {
        let s = tokenize("ab", 512).padded_by(3);
        assert_eq!(s.len(), 6);
        assert_eq!(s.real_len(), 3);
        assert_eq!(&s.ids[3..], &[PAD_ID, PAD_ID, PAD_ID]);
    }
}
