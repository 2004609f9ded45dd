//! Byte-level vocabulary: ids 0..256 are raw bytes, 256..512 are reserved,
//! and the eight special tokens sit at 512..520.

pub type TokenId = u32;

pub const BYTE_VOCAB: usize = 512;
pub const VOCAB_SIZE: usize = BYTE_VOCAB + 8;

pub const BOT: TokenId = 512;
pub const EOT: TokenId = 513;
pub const BOV: TokenId = 514;
pub const EOV: TokenId = 515;
pub const IM_START: TokenId = 516;
pub const IM_END: TokenId = 517;
pub const VISION_START: TokenId = 518;
pub const VISION_END: TokenId = 519;

const SPECIAL_NAMES: [&str; 8] = [
    "<|bot|>",
    "<|eot|>",
    "<|bov|>",
    "<|eov|>",
    "<|im_start|>",
    "<|im_end|>",
    "<|vision_start|>",
    "<|vision_end|>",
];

pub fn is_special(id: TokenId) -> bool {
    (BYTE_VOCAB as TokenId..VOCAB_SIZE as TokenId).contains(&id)
}

pub fn encode(text: &str) -> Vec<TokenId> {
    text.bytes().map(TokenId::from).collect()
}

/// Lossy inverse of [`encode`]; special tokens render by name.
pub fn decode(ids: &[TokenId]) -> String {
    let mut bytes = Vec::with_capacity(ids.len());
    for &id in ids {
        if id < 256 {
            bytes.push(id as u8);
        } else if is_special(id) {
            bytes.extend_from_slice(SPECIAL_NAMES[(id - BYTE_VOCAB as TokenId) as usize].as_bytes());
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_utf8() {
        let s = "a red square’s motion";
        assert_eq!(decode(&encode(s)), s);
        assert_eq!(decode(&[IM_START]), "<|im_start|>");
        assert!(is_special(VISION_END));
        assert!(!is_special(255));
    }
}
