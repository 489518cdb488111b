//! Quantization slot names and classes.
//!
//! Every place a quantizer can sit in the encoder graph has a stable string
//! name, e.g. `input_embedding`, `block2.gelu`, `block0.wq.weight`. Activation
//! slots come in nine classes (one before the first block, eight inside each
//! block); parameter slots cover the matmul weights and the embedding tables.
//! Names double as JSON keys, so they must round-trip exactly.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// The nine activation-slot classes. A shared activation (a LayerNorm output
/// feeding both the residual branch and the next matmuls) is quantized once,
/// by the single slot of its class in that block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SlotClass {
    InputEmbedding,
    Query,
    Key,
    Value,
    AttnProbs,
    Context,
    MhaLn,
    Gelu,
    FfnLn,
}

impl SlotClass {
    pub const ALL: [SlotClass; 9] = [
        SlotClass::InputEmbedding,
        SlotClass::Query,
        SlotClass::Key,
        SlotClass::Value,
        SlotClass::AttnProbs,
        SlotClass::Context,
        SlotClass::MhaLn,
        SlotClass::Gelu,
        SlotClass::FfnLn,
    ];

    pub fn suffix(&self) -> &'static str {
        match self {
            SlotClass::InputEmbedding => "input_embedding",
            SlotClass::Query => "query",
            SlotClass::Key => "key",
            SlotClass::Value => "value",
            SlotClass::AttnProbs => "attn_probs",
            SlotClass::Context => "context",
            SlotClass::MhaLn => "mha_ln",
            SlotClass::Gelu => "gelu",
            SlotClass::FfnLn => "ffn_ln",
        }
    }

    pub fn from_suffix(s: &str) -> Option<SlotClass> {
        SlotClass::ALL.iter().copied().find(|c| c.suffix() == s)
    }
}

pub fn input_embedding() -> String {
    "input_embedding".to_string()
}

pub fn activation(class: SlotClass, block: usize) -> String {
    match class {
        SlotClass::InputEmbedding => input_embedding(),
        _ => format!("block{block}.{}", class.suffix()),
    }
}

/// Weight slot for one of a block's six linear layers (`wq`, `wk`, `wv`,
/// `wo`, `w1`, `w2`).
pub fn block_weight(block: usize, which: &str) -> String {
    format!("block{block}.{which}.weight")
}

pub fn head_weight() -> String {
    "head.weight".to_string()
}

pub fn token_embedding() -> String {
    "embedding.token".to_string()
}

pub fn position_embedding() -> String {
    "embedding.position".to_string()
}

/// Whether a slot name refers to an activation rather than a parameter.
pub fn is_activation(name: &str) -> bool {
    parse_activation(name).is_some()
}

/// Whether a slot name refers to an embedding table (the `E` of a W-E-A
/// bit-width triple; all other parameters take `W`).
pub fn is_embedding(name: &str) -> bool {
    name == token_embedding() || name == position_embedding()
}

/// Parse an activation slot name into (class, block). `input_embedding` maps
/// to block 0 by convention (it feeds block 0).
pub fn parse_activation(name: &str) -> Option<(SlotClass, usize)> {
    if name == "input_embedding" {
        return Some((SlotClass::InputEmbedding, 0));
    }
    let rest = name.strip_prefix("block")?;
    let dot = rest.find('.')?;
    let block: usize = rest[..dot].parse().ok()?;
    let class = SlotClass::from_suffix(&rest[dot + 1..])?;
    if class == SlotClass::InputEmbedding {
        return None;
    }
    Some((class, block))
}

/// All activation slot names for a model with `blocks` encoder blocks, in
/// graph order: `input_embedding`, then per block the eight in-block slots.
pub fn activation_slots(blocks: usize) -> Vec<String> {
    let mut out = vec![input_embedding()];
    for b in 0..blocks {
        for class in SlotClass::ALL.iter().skip(1) {
            out.push(activation(*class, b));
        }
    }
    out
}

/// All parameter slot names: per-block linear weights, the head weight, and
/// the two embedding tables.
pub fn parameter_slots(blocks: usize) -> Vec<String> {
    let mut out = Vec::new();
    for b in 0..blocks {
        for which in ["wq", "wk", "wv", "wo", "w1", "w2"] {
            out.push(block_weight(b, which));
        }
    }
    out.push(head_weight());
    out.push(token_embedding());
    out.push(position_embedding());
    out
}

/// Validate that a user-supplied slot name exists for the given block count.
pub fn validate(name: &str, blocks: usize) -> Result<()> {
    if let Some((_, b)) = parse_activation(name) {
        if b < blocks {
            return Ok(());
        }
        return Err(Error::UnknownSlot(name.to_string()));
    }
    if parameter_slots(blocks).iter().any(|s| s == name) {
        return Ok(());
    }
    Err(Error::UnknownSlot(name.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn activation_count_is_one_plus_eight_per_block() {
        assert_eq!(activation_slots(2).len(), 1 + 2 * 8);
        assert_eq!(activation_slots(4).len(), 33);
    }

    #[test]
    fn names_round_trip_through_parse() {
        for name in activation_slots(3) {
            let (class, block) = parse_activation(&name).expect("parses");
            assert_eq!(activation(class, block), name);
        }
    }

    #[test]
    fn parameter_slots_cover_weights_head_and_embeddings() {
        let slots = parameter_slots(2);
        assert_eq!(slots.len(), 2 * 6 + 3);
        assert!(slots.contains(&"block1.w2.weight".to_string()));
        assert!(slots.contains(&"embedding.position".to_string()));
        assert!(is_embedding("embedding.token"));
        assert!(!is_embedding("head.weight"));
    }

    #[test]
    fn validate_rejects_unknown_and_out_of_range() {
        assert!(validate("block1.gelu", 2).is_ok());
        assert!(validate("block2.gelu", 2).is_err());
        assert!(validate("block0.nonsense", 2).is_err());
        assert!(validate("head.weight", 2).is_ok());
    }
}
