//! Alternating training and policy re-derivation until the policy repeats.

use serde::{Deserialize, Serialize};

use crate::attention::AttnWeights;
use crate::data::Example;
use crate::divergence::{js_matrix, mu_matrix, AttnKind, JsMatrix};
use crate::error::{Error, Result};
use crate::model::{forward_teacher, ModelConfig, ModelParams, SharingPolicy, BOS};
use crate::policy::search::{check_theta, find_policy};
use crate::policy::train::{toy_train, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolicyConfig {
    pub theta_self: f64,
    pub theta_encdec: f64,
    /// Encoder self-attention threshold; `None` keeps the encoder unshared.
    pub theta_enc: Option<f64>,
    /// Held-out sentences used to measure attention.
    pub sample_sentences: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            theta_self: 0.35,
            theta_encdec: 0.45,
            theta_enc: None,
            sample_sentences: 32,
        }
    }
}

impl PolicyConfig {
    pub fn validate(&self) -> Result<()> {
        check_theta("theta_self", self.theta_self)?;
        check_theta("theta_encdec", self.theta_encdec)?;
        if let Some(t) = self.theta_enc {
            check_theta("theta_enc", t)?;
        }
        if self.sample_sentences == 0 {
            return Err(Error::Config("sample_sentences must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sentence, per-layer attention weights of one kind, measured with the
/// decoder fed `[BOS] + tgt`.
pub fn attention_corpus(
    params: &ModelParams,
    sentences: &[Example],
    kind: AttnKind,
) -> Result<Vec<Vec<AttnWeights>>> {
    sentences
        .iter()
        .map(|ex| {
            let mut input = vec![BOS];
            input.extend(&ex.tgt);
            let f = forward_teacher(params, &ex.src, &input)?;
            Ok(match kind {
                AttnKind::SelfAttn => f.self_weights,
                AttnKind::EncDec => f.encdec_weights,
                AttnKind::Enc => f.enc_weights,
            })
        })
        .collect()
}

pub fn measure_js(params: &ModelParams, sentences: &[Example], kind: AttnKind) -> Result<JsMatrix> {
    js_matrix(&attention_corpus(params, sentences, kind)?, kind)
}

/// JS between each pair of adjacent decoder self-attention layers.
pub fn adjacent_js(params: &ModelParams, sentences: &[Example]) -> Result<Vec<f64>> {
    let m = measure_js(params, sentences, AttnKind::SelfAttn)?;
    Ok((1..m.layers()).map(|i| m.get(i - 1, i)).collect())
}

#[derive(Clone, Debug)]
pub struct Derived {
    pub policy: SharingPolicy,
    pub js_self: JsMatrix,
    pub js_encdec: JsMatrix,
    pub js_enc: Option<JsMatrix>,
}

/// Measures attention on `sample` and searches each stack's policy.
pub fn derive_policy(
    params: &ModelParams,
    sample: &[Example],
    cfg: &PolicyConfig,
) -> Result<Derived> {
    cfg.validate()?;
    let js_self = measure_js(params, sample, AttnKind::SelfAttn)?;
    let js_encdec = measure_js(params, sample, AttnKind::EncDec)?;
    let js_enc = cfg
        .theta_enc
        .map(|_| measure_js(params, sample, AttnKind::Enc))
        .transpose()?;
    let enc_blocks = match (&js_enc, cfg.theta_enc) {
        (Some(js), Some(theta)) => find_policy(&mu_matrix(js), theta),
        _ => vec![1; params.config().enc_layers],
    };
    let policy = SharingPolicy {
        self_blocks: find_policy(&mu_matrix(&js_self), cfg.theta_self),
        encdec_blocks: find_policy(&mu_matrix(&js_encdec), cfg.theta_encdec),
        enc_blocks,
    };
    policy.validate(params.config())?;
    Ok(Derived {
        policy,
        js_self,
        js_encdec,
        js_enc,
    })
}

#[derive(Clone, Debug)]
pub struct IterationLog {
    pub iteration: usize,
    pub trained_under: SharingPolicy,
    pub derived: Derived,
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct ShareOutcome {
    pub policy: SharingPolicy,
    pub params: ModelParams,
    pub log: Vec<IterationLog>,
    /// True when two consecutive iterations derived the same policy.
    pub converged: bool,
}

/// Observer receiving `(iteration, step, params)` at every training checkpoint.
pub type ShareCheckpoint<'o> = &'o mut dyn FnMut(usize, usize, &ModelParams) -> Result<()>;

/// The joint loop.
///
/// The last `policy_cfg.sample_sentences` examples are held out for attention
/// measurement; the rest are training data. Iteration `k` trains a fresh model
/// under the policy derived at iteration `k − 1` (no sharing for the first
/// iteration) and derives a new policy from it. The loop ends when a derived
/// policy repeats the previous iteration's, or after `max_outer` iterations,
/// in which case the model is retrained once more under the last policy.
pub fn learn_to_share(
    dataset: &[Example],
    model_cfg: &ModelConfig,
    policy_cfg: &PolicyConfig,
    train_cfg: &TrainConfig,
    max_outer: usize,
    mut observer: Option<ShareCheckpoint<'_>>,
) -> Result<ShareOutcome> {
    if max_outer == 0 {
        return Err(Error::Config("max_outer must be at least 1".into()));
    }
    model_cfg.validate()?;
    policy_cfg.validate()?;
    train_cfg.validate()?;
    let held = policy_cfg.sample_sentences;
    if dataset.len() <= held {
        return Err(Error::Input(format!(
            "dataset of {} sentences leaves nothing to train on after holding out {held}",
            dataset.len()
        )));
    }
    let (train, sample) = dataset.split_at(dataset.len() - held);

    let mut train_under =
        |iteration: usize, policy: &SharingPolicy| -> Result<(ModelParams, Vec<f64>)> {
            let mut params = ModelParams::build(model_cfg, policy, train_cfg.seed)?;
            let losses = match &mut observer {
                Some(f) => {
                    let mut inner = |step: usize, p: &ModelParams| f(iteration, step, p);
                    toy_train(&mut params, train, train_cfg, Some(&mut inner))?
                }
                None => toy_train(&mut params, train, train_cfg, None)?,
            };
            Ok((params, losses))
        };

    let mut current = SharingPolicy::unshared(model_cfg);
    let mut log: Vec<IterationLog> = Vec::new();
    for iteration in 1..=max_outer {
        let (params, losses) = train_under(iteration, &current)?;
        let derived = derive_policy(&params, sample, policy_cfg)?;
        let repeated = log
            .last()
            .is_some_and(|prev| prev.derived.policy == derived.policy);
        let next = derived.policy.clone();
        log.push(IterationLog {
            iteration,
            trained_under: current.clone(),
            derived,
            losses,
        });
        if repeated {
            return Ok(ShareOutcome {
                policy: next,
                params,
                log,
                converged: true,
            });
        }
        current = next;
    }
    let (params, _) = train_under(max_outer + 1, &current)?;
    Ok(ShareOutcome {
        policy: current,
        params,
        log,
        converged: false,
    })
}
