use serde::{Deserialize, Serialize};

use crate::divergence::{block_sim, MuMatrix};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SharingPolicy};

/// Slack on the threshold comparison, absorbing rounding in the block mean.
const THETA_SLACK: f64 = 1e-12;

/// Greedy partition of the layer stack into sharing blocks.
///
/// Starting at the lowest unassigned layer `m`, the block grows upward while
/// `sim(m, n) ≥ θ` and stops at the first layer that would break the
/// criterion. A single layer is always a valid block.
pub fn find_policy(mu: &MuMatrix, theta: f64) -> Vec<usize> {
    let layers = mu.layers();
    let mut blocks = Vec::new();
    let mut m = 0;
    while m < layers {
        let mut n = m;
        while n + 1 < layers && block_sim(mu, m, n + 1).is_ok_and(|s| s >= theta - THETA_SLACK) {
            n += 1;
        }
        blocks.push(n - m + 1);
        m = n + 1;
    }
    blocks
}

/// Thresholds must lie in `(0, ln 2]`.
pub fn check_theta(name: &str, theta: f64) -> Result<()> {
    if theta > 0.0 && theta <= std::f64::consts::LN_2 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {theta} outside (0, ln 2]")))
    }
}

/// On-disk policy: `{"self": [...], "encdec": [...], "enc": [...], "theta_self": x, "theta_encdec": y}`.
/// Absent block lists mean "no sharing" for that stack.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyFile {
    #[serde(rename = "self", default, skip_serializing_if = "Option::is_none")]
    pub self_blocks: Option<Vec<usize>>,
    #[serde(rename = "encdec", default, skip_serializing_if = "Option::is_none")]
    pub encdec_blocks: Option<Vec<usize>>,
    #[serde(rename = "enc", default, skip_serializing_if = "Option::is_none")]
    pub enc_blocks: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_self: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub theta_encdec: Option<f64>,
}

impl PolicyFile {
    pub fn from_policy(
        policy: &SharingPolicy,
        theta_self: Option<f64>,
        theta_encdec: Option<f64>,
    ) -> Self {
        Self {
            self_blocks: Some(policy.self_blocks.clone()),
            encdec_blocks: Some(policy.encdec_blocks.clone()),
            enc_blocks: Some(policy.enc_blocks.clone()),
            theta_self,
            theta_encdec,
        }
    }

    /// Resolves the policy for `config`, filling absent stacks with unit blocks.
    pub fn to_policy(&self, config: &ModelConfig) -> Result<SharingPolicy> {
        let pick =
            |b: &Option<Vec<usize>>, layers: usize| b.clone().unwrap_or_else(|| vec![1; layers]);
        let policy = SharingPolicy {
            self_blocks: pick(&self.self_blocks, config.dec_layers),
            encdec_blocks: pick(&self.encdec_blocks, config.dec_layers),
            enc_blocks: pick(&self.enc_blocks, config.enc_layers),
        };
        policy.validate(config)?;
        Ok(policy)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: Self =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("policy file: {e}")))?;
        for blocks in [&file.self_blocks, &file.encdec_blocks, &file.enc_blocks]
            .into_iter()
            .flatten()
        {
            if blocks.is_empty() || blocks.contains(&0) {
                return Err(Error::Format(format!(
                    "policy file: invalid block list {blocks:?}"
                )));
            }
        }
        Ok(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::divergence::{mu_matrix, AttnKind, JsMatrix};
    use crate::tensor::Mat;

    fn mu_from(values: &[&[f64]]) -> MuMatrix {
        let rows: Vec<Vec<f64>> = values.iter().map(|r| r.to_vec()).collect();
        mu_matrix(&JsMatrix::new(AttnKind::SelfAttn, Mat::from_rows(&rows).unwrap()).unwrap())
    }

    #[test]
    fn stops_at_first_failure() {
        // 0-1 and 1-2 similar, 0-2 dissimilar: the block from layer 0 stops at 1
        let mu = mu_from(&[&[0.0, 0.01, 0.6], &[0.01, 0.0, 0.01], &[0.6, 0.01, 0.0]]);
        assert_eq!(find_policy(&mu, 0.5), vec![2, 1]);
        assert_eq!(find_policy(&mu, 0.05), vec![3]);
        assert_eq!(find_policy(&mu, 0.69), vec![1, 1, 1]);
    }

    #[test]
    fn theta_bounds() {
        assert!(check_theta("theta", 0.35).is_ok());
        assert!(check_theta("theta", std::f64::consts::LN_2).is_ok());
        assert!(check_theta("theta", 0.0).is_err());
        assert!(check_theta("theta", 0.7).is_err());
    }
}
