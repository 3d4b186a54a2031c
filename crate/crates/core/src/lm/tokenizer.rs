//! Byte-level tokenizer: ids 0..256 are raw bytes, followed by BOS and PAD.

use std::fmt;

pub const BOS: u32 = 256;
pub const PAD: u32 = 257;
/// Bytes plus specials; presets round the embedding table up from here.
pub const MIN_VOCAB: usize = 258;

/// Token ids of one sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash)]
pub struct TokenSeq(pub Vec<u32>);

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    pub fn extend_bytes(&mut self, text: &str) {
        self.0.extend(text.bytes().map(u32::from));
    }
}

impl fmt::Display for TokenSeq {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&detokenize(self))
    }
}

/// `[BOS, bytes...]`.
pub fn tokenize(text: &str) -> TokenSeq {
    let mut seq = TokenSeq(Vec::with_capacity(text.len() + 1));
    seq.0.push(BOS);
    seq.extend_bytes(text);
    seq
}

/// Bytes without a BOS, for spans appended to an existing sequence.
pub fn tokenize_raw(text: &str) -> TokenSeq {
    TokenSeq(text.bytes().map(u32::from).collect())
}

/// Drops special tokens and decodes the remaining bytes (lossy on invalid UTF-8).
pub fn detokenize(seq: &TokenSeq) -> String {
    let bytes: Vec<u8> = seq
        .0
        .iter()
        .filter(|&&t| t < 256)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

/// Printable form of one token; bytes outside visible ASCII are shown as `<0xNN>`.
pub fn token_text(token: u32) -> String {
    match token {
        BOS => "<bos>".into(),
        PAD => "<pad>".into(),
        t if t < 256 && (t as u8).is_ascii_graphic() => (t as u8 as char).to_string(),
        t if t < 256 => format!("<0x{t:02X}>"),
        t => format!("<unk{t}>"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn basic_cases() {
        assert_eq!(tokenize("").0, vec![BOS]);
        assert_eq!(tokenize("ab").0, vec![BOS, 97, 98]);
        assert_eq!(token_text(b'"' as u32), "\"");
        assert_eq!(token_text(b' ' as u32), "<0x20>");
        assert_eq!(token_text(0xC3), "<0xC3>");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn roundtrip(s in any::<String>()) {
            prop_assert_eq!(detokenize(&tokenize(&s)), s);
        }
    }
}
