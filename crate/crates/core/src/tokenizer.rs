// SPDX-License-Identifier: MIT OR Apache-2.0

//! Byte-level tokenizer: one token per UTF-8 byte plus two specials.

/// Beginning-of-document token.
pub const BOS: u32 = 256;
/// End-of-document token.
pub const EOS: u32 = 257;
/// Vocabulary size: 256 byte values and the two specials.
pub const VOCAB_SIZE: usize = 258;

/// Encode text as raw bytes (no specials).
pub fn encode(text: &str) -> Vec<u32> {
    text.bytes().map(u32::from).collect()
}

/// Encode a prompt: `BOS` followed by the bytes of `text`.
pub fn encode_prompt(text: &str) -> Vec<u32> {
    let mut out = Vec::with_capacity(text.len() + 1);
    out.push(BOS);
    out.extend(text.bytes().map(u32::from));
    out
}

pub fn is_special(token: u32) -> bool {
    token >= 256
}

/// Text of a single token. Specials and lone non-UTF-8 bytes render as
/// the empty string and U+FFFD respectively.
pub fn token_text(token: u32) -> String {
    if is_special(token) {
        return String::new();
    }
    detokenize(&[token]).text
}

/// Detokenized text with a token→character map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Detokenized {
    pub text: String,
    /// `token_chars[i]` is the character index at which token `i` starts.
    /// Tokens that contribute no character (specials, continuation bytes)
    /// map to the index of the character they belong to or precede.
    pub token_chars: Vec<usize>,
}

/// Lossy byte-to-text decoding that keeps track of which character each
/// token starts in. Invalid byte sequences become one U+FFFD each, as in
/// `String::from_utf8_lossy`.
pub fn detokenize(tokens: &[u32]) -> Detokenized {
    let mut text = String::new();
    let mut token_chars = Vec::with_capacity(tokens.len());
    let mut n_chars = 0usize;
    // Byte runs between specials are decoded together.
    let mut i = 0;
    while i < tokens.len() {
        if is_special(tokens[i]) {
            token_chars.push(n_chars);
            i += 1;
            continue;
        }
        let start = i;
        while i < tokens.len() && !is_special(tokens[i]) {
            i += 1;
        }
        let bytes: Vec<u8> = tokens[start..i].iter().map(|&t| t as u8).collect();
        for chunk in bytes.utf8_chunks() {
            for ch in chunk.valid().chars() {
                token_chars.push(n_chars);
                for _ in 1..ch.len_utf8() {
                    token_chars.push(n_chars);
                }
                text.push(ch);
                n_chars += 1;
            }
            if !chunk.invalid().is_empty() {
                for _ in chunk.invalid() {
                    token_chars.push(n_chars);
                }
                text.push(char::REPLACEMENT_CHARACTER);
                n_chars += 1;
            }
        }
    }
    Detokenized { text, token_chars }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_maps_one_to_one() {
        let d = detokenize(&encode("ab\nc"));
        assert_eq!(d.text, "ab\nc");
        assert_eq!(d.token_chars, vec![0, 1, 2, 3]);
    }

    #[test]
    fn multibyte_and_specials() {
        let mut toks = vec![BOS];
        toks.extend(encode("é!"));
        toks.push(EOS);
        let d = detokenize(&toks);
        assert_eq!(d.text, "é!");
        assert_eq!(d.token_chars, vec![0, 0, 0, 1, 2]);
    }

    #[test]
    fn invalid_bytes_become_replacement() {
        let d = detokenize(&[0xff, b'a' as u32]);
        assert_eq!(d.text, "\u{fffd}a");
        assert_eq!(d.token_chars, vec![0, 1]);
    }
}
