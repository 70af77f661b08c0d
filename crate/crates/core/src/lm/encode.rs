use super::model::{BOS, SEP};

/// Token stream for one scored document plus which positions are scored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedSegments {
    pub tokens: Vec<u16>,
    /// `mask[t]` scores `log P(tokens[t] | tokens[..t])`.
    pub mask: Vec<bool>,
    pub prefix_len: usize,
    pub continuation_len: usize,
}

/// `BOS prefix [SEP context SEP] continuation` as byte tokens.
///
/// Prefix and continuation bytes are scored; BOS, separators and context
/// bytes are not. Without a context the continuation follows the prefix
/// directly.
pub fn encode_segments(prefix: &str, context: Option<&str>, continuation: &str) -> EncodedSegments {
    let mut tokens = Vec::with_capacity(
        3 + prefix.len() + context.map_or(0, str::len) + continuation.len(),
    );
    let mut mask = Vec::with_capacity(tokens.capacity());
    tokens.push(BOS);
    mask.push(false);
    for b in prefix.bytes() {
        tokens.push(u16::from(b));
        mask.push(true);
    }
    if let Some(ctx) = context {
        tokens.push(SEP);
        mask.push(false);
        for b in ctx.bytes() {
            tokens.push(u16::from(b));
            mask.push(false);
        }
        tokens.push(SEP);
        mask.push(false);
    }
    for b in continuation.bytes() {
        tokens.push(u16::from(b));
        mask.push(true);
    }
    EncodedSegments {
        tokens,
        mask,
        prefix_len: prefix.len(),
        continuation_len: continuation.len(),
    }
}
