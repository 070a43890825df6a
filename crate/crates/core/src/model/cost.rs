//! Closed-form parameter and multiply-accumulate accounting.

use crate::error::{Error, Result};
use crate::model::config::{block_roles, ModelConfig, SharingPolicy};
use crate::model::params::{TensorSpec, Weights};

/// Exact number of stored weights (embeddings, projections, FFN, norms, output layer).
pub fn count_params(config: &ModelConfig, policy: &SharingPolicy) -> Result<u64> {
    Ok(Weights::<TensorSpec>::template(config, policy)?.total_len() as u64)
}

/// Multiply-accumulates of decode step `t` (1-based) with a key/value cache,
/// attending over `src_len` encoder positions.
///
/// Per decoder layer:
/// * self-attention bottom: q, k, v, o projections (`4d²`), `q·Kᵀ` and `S·V` over `t` keys (`2td`);
/// * self-attention shared: v, o projections (`2d²`) and `S·V` (`td`);
/// * enc-dec bottom: q, o projections (`2d²`) and attention over the source (`2·src_len·d`);
///   the source keys/values are projected once per sentence (see [`estimate_source_flops`]);
/// * enc-dec shared: nothing;
/// * feed-forward: `2·d·d_ff`.
///
/// Plus the output projection `d·vocab`.
pub fn estimate_step_flops(
    config: &ModelConfig,
    policy: &SharingPolicy,
    t: usize,
    src_len: usize,
) -> Result<u64> {
    if t == 0 {
        return Err(Error::Range("decode steps are numbered from 1".into()));
    }
    config.validate()?;
    policy.validate(config)?;
    let d = config.d_model as u64;
    let (t, src) = (t as u64, src_len as u64);
    let mut total = d * config.vocab as u64;
    for role in block_roles(&policy.self_blocks) {
        total += if role.is_bottom() {
            4 * d * d + 2 * t * d
        } else {
            2 * d * d + t * d
        };
    }
    for role in block_roles(&policy.encdec_blocks) {
        if role.is_bottom() {
            total += 2 * d * d + 2 * src * d;
        }
    }
    total += config.dec_layers as u64 * 2 * d * config.d_ff as u64;
    Ok(total)
}

/// Multiply-accumulates spent once per sentence before decoding: the encoder
/// stack over `src_len` positions and the key/value projections of the encoder
/// output at every enc-dec block bottom.
pub fn estimate_source_flops(
    config: &ModelConfig,
    policy: &SharingPolicy,
    src_len: usize,
) -> Result<u64> {
    config.validate()?;
    policy.validate(config)?;
    let d = config.d_model as u64;
    let l = src_len as u64;
    let mut total = 0;
    for role in block_roles(&policy.enc_blocks) {
        total += if role.is_bottom() {
            4 * l * d * d + 2 * l * l * d
        } else {
            2 * l * d * d + l * l * d
        };
        total += 2 * l * d * config.d_ff as u64;
    }
    let bottoms = block_roles(&policy.encdec_blocks)
        .iter()
        .filter(|r| r.is_bottom())
        .count() as u64;
    total += bottoms * 2 * l * d * d;
    Ok(total)
}

/// Mean of [`estimate_step_flops`] over steps `1..=steps`.
pub fn mean_step_flops(
    config: &ModelConfig,
    policy: &SharingPolicy,
    steps: usize,
    src_len: usize,
) -> Result<f64> {
    if steps == 0 {
        return Err(Error::Range("need at least one step".into()));
    }
    let mut sum = 0u64;
    for t in 1..=steps {
        sum += estimate_step_flops(config, policy, t, src_len)?;
    }
    Ok(sum as f64 / steps as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_layer_first_step_hand_count() {
        let mut cfg = ModelConfig::small(1, 1, 8, 2, 10);
        cfg.d_ff = 16;
        let p = SharingPolicy::unshared(&cfg);
        // self: 4·64 + 2·1·8, enc-dec: 2·64 + 2·3·8, ffn: 2·8·16, output: 8·10
        let want = 256 + 16 + 128 + 48 + 256 + 80;
        assert_eq!(estimate_step_flops(&cfg, &p, 1, 3).unwrap(), want);
    }

    #[test]
    fn step_zero_is_rejected() {
        let cfg = ModelConfig::base();
        let p = SharingPolicy::unshared(&cfg);
        assert!(matches!(
            estimate_step_flops(&cfg, &p, 0, 8),
            Err(Error::Range(_))
        ));
    }
}
