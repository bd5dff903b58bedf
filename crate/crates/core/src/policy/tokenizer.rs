//! Byte-level tokenizer: ids 0..=255 are raw bytes, then BOS and EOS.

pub type TokenId = usize;

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const VOCAB_SIZE: usize = 258;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Tokenizer;

impl Tokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn tokenize(&self, bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|&b| b as TokenId).collect()
    }

    /// Drops BOS/EOS; every other id maps back to its byte.
    pub fn detokenize(&self, tokens: &[TokenId]) -> Vec<u8> {
        tokens
            .iter()
            .filter(|&&t| t < 256)
            .map(|&t| t as u8)
            .collect()
    }

    /// BOS followed by the UTF-8 bytes of `text`.
    pub fn encode_prompt(&self, text: &str) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(text.len() + 1);
        out.push(BOS);
        out.extend(self.tokenize(text.as_bytes()));
        out
    }

    pub fn decode(&self, tokens: &[TokenId]) -> String {
        String::from_utf8_lossy(&self.detokenize(tokens)).into_owned()
    }

    /// Number of tokens `text` occupies, excluding BOS.
    pub fn count(&self, text: &str) -> usize {
        text.len()
    }
}
