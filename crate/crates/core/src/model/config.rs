use serde::{Deserialize, Serialize};

use crate::attention::ProjectionMode;
use crate::error::{Error, Result};

/// Reserved token ids. Real vocabulary items start at [`FIRST_WORD`].
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const FIRST_WORD: u32 = 3;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub heads: usize,
    pub d_model: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub d_ff: usize,
    pub vocab: usize,
    /// Longest source or target sequence (positions), including the start token.
    pub max_len: usize,
}

impl ModelConfig {
    /// 6+6 layers, 8 heads, `d_model` 512, 2048 FFN units, 32k shared vocabulary.
    pub fn base() -> Self {
        Self {
            enc_layers: 6,
            dec_layers: 6,
            heads: 8,
            d_model: 512,
            d_k: 64,
            d_v: 64,
            d_ff: 2048,
            vocab: 32_000,
            max_len: 256,
        }
    }

    /// A small model of the given depth and width; `d_ff = 2·d_model`.
    pub fn small(
        enc_layers: usize,
        dec_layers: usize,
        d_model: usize,
        heads: usize,
        vocab: usize,
    ) -> Self {
        Self {
            enc_layers,
            dec_layers,
            heads,
            d_model,
            d_k: d_model / heads,
            d_v: d_model / heads,
            d_ff: 2 * d_model,
            vocab,
            max_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.heads == 0 || self.d_model == 0 || self.d_ff == 0 {
            return fail("heads, d_model and d_ff must be positive".into());
        }
        if self.heads * self.d_k != self.d_model || self.heads * self.d_v != self.d_model {
            return fail(format!(
                "d_model ({}) must equal heads·d_k ({}·{}) and heads·d_v ({}·{})",
                self.d_model, self.heads, self.d_k, self.heads, self.d_v
            ));
        }
        if self.dec_layers == 0 || self.enc_layers == 0 {
            return fail("encoder and decoder need at least one layer".into());
        }
        if self.vocab <= FIRST_WORD as usize {
            return fail(format!(
                "vocabulary of {} leaves no room past the reserved ids",
                self.vocab
            ));
        }
        if self.max_len == 0 {
            return fail("max_len must be positive".into());
        }
        Ok(())
    }
}

/// Role of a layer inside its sharing block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockRole {
    Bottom,
    /// Reuses attention computed at layer `bottom`.
    Shared {
        bottom: usize,
    },
}

impl BlockRole {
    pub fn is_bottom(self) -> bool {
        matches!(self, BlockRole::Bottom)
    }
}

/// Expands block sizes into one role per layer.
pub fn block_roles(blocks: &[usize]) -> Vec<BlockRole> {
    let mut roles = Vec::with_capacity(blocks.iter().sum());
    for &size in blocks {
        let bottom = roles.len();
        roles.push(BlockRole::Bottom);
        roles.extend((1..size).map(|_| BlockRole::Shared { bottom }));
    }
    roles
}

pub(crate) fn self_mode(role: BlockRole) -> ProjectionMode {
    if role.is_bottom() {
        ProjectionMode::Full
    } else {
        ProjectionMode::SharedSelf
    }
}

pub(crate) fn encdec_mode(role: BlockRole) -> ProjectionMode {
    if role.is_bottom() {
        ProjectionMode::Full
    } else {
        ProjectionMode::SharedEncDec
    }
}

/// Contiguous partition of each attention stack into sharing blocks,
/// listed bottom-up.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SharingPolicy {
    #[serde(rename = "self")]
    pub self_blocks: Vec<usize>,
    #[serde(rename = "encdec")]
    pub encdec_blocks: Vec<usize>,
    #[serde(rename = "enc")]
    pub enc_blocks: Vec<usize>,
}

impl SharingPolicy {
    /// Every layer in its own block (no sharing).
    pub fn unshared(config: &ModelConfig) -> Self {
        Self {
            self_blocks: vec![1; config.dec_layers],
            encdec_blocks: vec![1; config.dec_layers],
            enc_blocks: vec![1; config.enc_layers],
        }
    }

    /// Decoder-side sharing; encoder unshared.
    pub fn decoder(self_blocks: Vec<usize>, encdec_blocks: Vec<usize>, enc_layers: usize) -> Self {
        Self {
            self_blocks,
            encdec_blocks,
            enc_blocks: vec![1; enc_layers],
        }
    }

    pub fn validate(&self, config: &ModelConfig) -> Result<()> {
        check_partition("self", &self.self_blocks, config.dec_layers)?;
        check_partition("encdec", &self.encdec_blocks, config.dec_layers)?;
        check_partition("enc", &self.enc_blocks, config.enc_layers)
    }

    pub fn is_unshared(&self) -> bool {
        [&self.self_blocks, &self.encdec_blocks, &self.enc_blocks]
            .iter()
            .all(|b| b.iter().all(|&p| p == 1))
    }
}

pub(crate) fn check_partition(kind: &str, blocks: &[usize], layers: usize) -> Result<()> {
    if blocks.iter().any(|&p| p == 0) {
        return Err(Error::Config(format!(
            "{kind} policy has an empty block: {blocks:?}"
        )));
    }
    let total: usize = blocks.iter().sum();
    if total != layers {
        return Err(Error::Config(format!(
            "{kind} policy {blocks:?} covers {total} layers, the stack has {layers}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_follow_blocks() {
        let roles = block_roles(&[1, 3, 2]);
        assert_eq!(
            roles,
            vec![
                BlockRole::Bottom,
                BlockRole::Bottom,
                BlockRole::Shared { bottom: 1 },
                BlockRole::Shared { bottom: 1 },
                BlockRole::Bottom,
                BlockRole::Shared { bottom: 4 },
            ]
        );
    }

    #[test]
    fn base_config_is_consistent() {
        ModelConfig::base().validate().unwrap();
        let mut bad = ModelConfig::base();
        bad.d_k = 512;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn partition_must_cover_stack() {
        let cfg = ModelConfig::base();
        let mut p = SharingPolicy::unshared(&cfg);
        p.validate(&cfg).unwrap();
        p.self_blocks = vec![3, 2];
        assert!(matches!(p.validate(&cfg), Err(Error::Config(_))));
        p.self_blocks = vec![3, 0, 3];
        assert!(matches!(p.validate(&cfg), Err(Error::Config(_))));
    }

    #[test]
    fn policy_json_uses_short_keys() {
        let p = SharingPolicy::decoder(vec![6], vec![3, 3], 6);
        let text = serde_json::to_string(&p).unwrap();
        assert_eq!(text, r#"{"self":[6],"encdec":[3,3],"enc":[1,1,1,1,1,1]}"#);
    }
}
