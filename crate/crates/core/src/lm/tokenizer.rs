//! Byte-level tokenizer: token `b` is byte `b`, plus three special ids.

use super::LmError;

pub type TokenId = u32;

pub const BOS: TokenId = 256;
pub const EOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const BYTE_VOCAB: usize = 259;

pub fn tokenize(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Inverse of [`tokenize`]. Special ids and invalid UTF-8 are errors.
pub fn detokenize(tokens: &[TokenId]) -> Result<String, LmError> {
    let bytes = tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| LmError::Tokenizer(format!("id {t} is not a byte")))
        })
        .collect::<Result<Vec<u8>, _>>()?;
    String::from_utf8(bytes).map_err(|e| LmError::Tokenizer(e.to_string()))
}
