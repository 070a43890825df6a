//! Cached incremental decoding: sessions, greedy search and beam search.
//!
//! A batch step stacks the newest position of several sessions into one matrix
//! so the projections run as a single GEMM; attention itself is evaluated per
//! session against that session's own cache.

use std::cmp::Ordering;
use std::sync::Arc;

use crate::attention::{row_context, row_weights, EncDecMemory, KvCache};
use crate::error::{Error, Result};
use crate::model::config::{self_mode, BlockRole, BOS, EOS};
use crate::model::forward::{
    check_tokens, embed, encode_batch, feed_forward, norm, project_logits,
};
use crate::model::params::ModelParams;
use crate::tensor::{matmul, Mat};

/// Incremental decoding state for one sentence (or one beam hypothesis).
#[derive(Clone, Debug)]
pub struct DecodeSession<'m> {
    model: &'m ModelParams,
    cache: KvCache,
    prefix: Vec<u32>,
}

impl<'m> DecodeSession<'m> {
    /// Encodes `src` and projects the encoder memory at every enc-dec block bottom.
    pub fn new(model: &'m ModelParams, src: &[u32]) -> Result<Self> {
        let mut sessions = Self::new_batch(model, &[src])?;
        Ok(sessions.remove(0))
    }

    /// One session per source; encoding and memory projection run batched.
    pub fn new_batch<S: AsRef<[u32]>>(model: &'m ModelParams, srcs: &[S]) -> Result<Vec<Self>> {
        let enc_outs = encode_batch(model, srcs)?;
        // per layer, one memory per sentence at enc-dec block bottoms
        let mut memories: Vec<Option<std::vec::IntoIter<EncDecMemory>>> = model
            .weights()
            .decoder
            .iter()
            .zip(model.encdec_roles())
            .map(|(layer, role)| match role {
                BlockRole::Bottom => EncDecMemory::project_batch(&enc_outs, &layer.cross_attn)
                    .map(|m| Some(m.into_iter())),
                BlockRole::Shared { .. } => Ok(None),
            })
            .collect::<Result<Vec<_>>>()?;
        let modes: Vec<_> = model.self_roles().iter().map(|&r| self_mode(r)).collect();
        (0..enc_outs.len())
            .map(|_| {
                let mems = memories
                    .iter_mut()
                    .map(|m| m.as_mut().and_then(Iterator::next).map(Arc::new))
                    .collect();
                let cache = KvCache::new(&modes, model.config().d_model, mems)?;
                Ok(Self {
                    model,
                    cache,
                    prefix: Vec::new(),
                })
            })
            .collect()
    }

    /// Number of completed steps; equals `prefix().len()` and the cache depth.
    pub fn step(&self) -> usize {
        self.cache.steps()
    }

    /// Tokens fed so far (starting with the start token).
    pub fn prefix(&self) -> &[u32] {
        &self.prefix
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn model(&self) -> &'m ModelParams {
        self.model
    }
}

/// Feeds `token` at the next position and returns the vocabulary logits.
pub fn decode_step(session: &mut DecodeSession<'_>, token: u32) -> Result<Vec<f64>> {
    let logits = decode_step_batch(std::slice::from_mut(session), &[token])?;
    Ok(logits.into_vec())
}

/// One step for several sessions of the same model; row `i` of the result
/// holds the logits of `sessions[i]`.
pub fn decode_step_batch(sessions: &mut [DecodeSession<'_>], tokens: &[u32]) -> Result<Mat> {
    let Some(first) = sessions.first() else {
        return Err(Error::Input("empty decode batch".into()));
    };
    if tokens.len() != sessions.len() {
        return Err(Error::Input(format!(
            "{} tokens for {} sessions",
            tokens.len(),
            sessions.len()
        )));
    }
    let model = first.model;
    let cfg = model.config();
    for (s, &tok) in sessions.iter().zip(tokens) {
        if !std::ptr::eq(s.model, model) {
            return Err(Error::Input("decode batch mixes models".into()));
        }
        if s.step() >= cfg.max_len {
            return Err(Error::Capacity(format!(
                "session already holds max_len = {} positions",
                cfg.max_len
            )));
        }
        if tok as usize >= cfg.vocab {
            return Err(Error::Input(format!(
                "token {tok} is outside the vocabulary of {}",
                cfg.vocab
            )));
        }
    }

    let (d, heads) = (cfg.d_model, cfg.heads);
    let b = sessions.len();
    let w = model.weights();

    let mut x = Mat::zeros(b, d);
    for (i, s) in sessions.iter().enumerate() {
        x.row_mut(i)
            .copy_from_slice(embed(model, &tokens[i..=i], s.step()).row(0));
    }

    // attention rows of the current self-attention block bottom, per session
    let mut block_s: Vec<Vec<f64>> = vec![Vec::new(); b];
    // post-projection output of the current enc-dec block bottom
    let mut block_a = Mat::zeros(b, d);
    let mut ctx = Mat::zeros(b, d);

    for (l, layer) in w.decoder.iter().enumerate() {
        let h = norm(&x, &layer.self_norm)?;
        let attn = &layer.self_attn;
        let (w_v, w_o) = match (&attn.w_v, &attn.w_o) {
            (Some(v), Some(o)) => (v, o),
            _ => {
                return Err(Error::Config(format!(
                    "decoder layer {l} self-attention lacks w_v/w_o"
                )))
            }
        };
        let v = matmul(&h, w_v)?;
        match (model.self_roles()[l], &attn.w_q, &attn.w_k) {
            (BlockRole::Bottom, Some(w_q), Some(w_k)) => {
                let q = matmul(&h, w_q)?;
                let k = matmul(&h, w_k)?;
                for (i, s) in sessions.iter_mut().enumerate() {
                    s.cache.append(l, Some(k.row(i)), v.row(i))?;
                    let t = s.cache.steps() + 1;
                    let weights = &mut block_s[i];
                    weights.clear();
                    weights.resize(heads * t, 0.0);
                    row_weights(
                        q.row(i),
                        s.cache.keys(l).unwrap_or_default(),
                        d,
                        heads,
                        weights,
                    );
                    row_context(weights, s.cache.values(l), d, heads, ctx.row_mut(i));
                }
            }
            (BlockRole::Shared { .. }, None, None) => {
                for (i, s) in sessions.iter_mut().enumerate() {
                    s.cache.append(l, None, v.row(i))?;
                    row_context(&block_s[i], s.cache.values(l), d, heads, ctx.row_mut(i));
                }
            }
            _ => {
                return Err(Error::Config(format!(
                    "decoder layer {l} self-attention does not match its policy role"
                )))
            }
        }
        x.add_assign(&matmul(&ctx, w_o)?)?;

        if model.encdec_roles()[l].is_bottom() {
            let cross = &layer.cross_attn;
            let (w_q, w_o) = match (&cross.w_q, &cross.w_o) {
                (Some(q), Some(o)) => (q, o),
                _ => {
                    return Err(Error::Config(format!(
                        "decoder layer {l} enc-dec bottom lacks projections"
                    )))
                }
            };
            let q = matmul(&norm(&x, &layer.cross_norm)?, w_q)?;
            let mut weights = Vec::new();
            for (i, s) in sessions.iter().enumerate() {
                let mem = s
                    .cache
                    .encdec_memory(l)
                    .ok_or_else(|| Error::State(format!("no encoder memory at layer {l}")))?;
                weights.clear();
                weights.resize(heads * mem.len(), 0.0);
                row_weights(q.row(i), mem.keys().as_slice(), d, heads, &mut weights);
                row_context(&weights, mem.values().as_slice(), d, heads, ctx.row_mut(i));
            }
            block_a = matmul(&ctx, w_o)?;
        }
        x.add_assign(&block_a)?;

        x.add_assign(&feed_forward(&norm(&x, &layer.ffn_norm)?, &layer.ffn)?)?;
    }

    let logits = project_logits(model, &x)?;
    for (s, &tok) in sessions.iter_mut().zip(tokens) {
        s.cache.commit_step()?;
        s.prefix.push(tok);
    }
    Ok(logits)
}

fn check_decode_len(model: &ModelParams, max_len: usize) -> Result<()> {
    if max_len > model.config().max_len {
        return Err(Error::Capacity(format!(
            "cannot generate {max_len} tokens with max_len = {}",
            model.config().max_len
        )));
    }
    Ok(())
}

/// Index of the first maximum.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Greedy decoding; the output ends with EOS unless `max_len` tokens were produced first.
pub fn greedy_decode(params: &ModelParams, src: &[u32], max_len: usize) -> Result<Vec<u32>> {
    Ok(greedy_decode_batch(params, std::slice::from_ref(&src.to_vec()), max_len)?.remove(0))
}

/// Greedy decoding of several sentences stepped together; finished sentences leave the batch.
pub fn greedy_decode_batch(
    params: &ModelParams,
    srcs: &[Vec<u32>],
    max_len: usize,
) -> Result<Vec<Vec<u32>>> {
    check_decode_len(params, max_len)?;
    let mut outputs = vec![Vec::new(); srcs.len()];
    if max_len == 0 || srcs.is_empty() {
        return Ok(outputs);
    }
    let mut sessions = DecodeSession::new_batch(params, srcs)?;
    let mut ids: Vec<usize> = (0..srcs.len()).collect();
    let mut next = vec![BOS; srcs.len()];

    while !sessions.is_empty() {
        let logits = decode_step_batch(&mut sessions, &next)?;
        let mut keep = Vec::with_capacity(ids.len());
        for (row, &id) in ids.iter().enumerate() {
            let tok = argmax(logits.row(row)) as u32;
            outputs[id].push(tok);
            next[row] = tok;
            keep.push(tok != EOS && outputs[id].len() < max_len);
        }
        let mut flags = keep.iter();
        sessions.retain(|_| *flags.next().unwrap_or(&false));
        let mut flags = keep.iter();
        ids.retain(|_| *flags.next().unwrap_or(&false));
        let mut flags = keep.iter();
        next.retain(|_| *flags.next().unwrap_or(&false));
    }
    Ok(outputs)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Generated tokens (no start token; EOS included when emitted).
    pub tokens: Vec<u32>,
    pub log_prob: f64,
}

impl Hypothesis {
    /// Length-normalised log-probability.
    pub fn score(&self) -> f64 {
        if self.tokens.is_empty() {
            0.0
        } else {
            self.log_prob / self.tokens.len() as f64
        }
    }
}

/// Sum of per-token log-probabilities of `tokens` under the model (teacher-forced,
/// decoded incrementally).
pub fn sequence_log_prob(params: &ModelParams, src: &[u32], tokens: &[u32]) -> Result<f64> {
    check_decode_len(params, tokens.len())?;
    let mut session = DecodeSession::new(params, src)?;
    let mut feed = BOS;
    let mut total = 0.0;
    for &tok in tokens {
        let logits = decode_step(&mut session, feed)?;
        total += log_softmax(&logits)[tok as usize];
        feed = tok;
    }
    Ok(total)
}

/// Best hypothesis of a length-normalised beam search.
pub fn beam_decode(
    params: &ModelParams,
    src: &[u32],
    beam: usize,
    max_len: usize,
) -> Result<Vec<u32>> {
    Ok(
        beam_search_batch(params, std::slice::from_ref(&src.to_vec()), beam, max_len)?
            .remove(0)
            .tokens,
    )
}

struct Alive {
    sentence: usize,
    tokens: Vec<u32>,
    log_prob: f64,
}

/// Beam search over several sentences at once. Every hypothesis carries its own
/// cache; all live hypotheses are stepped as one batch.
///
/// Each step expands every live hypothesis by its `beam` best tokens and keeps
/// the `beam` best continuations per sentence by cumulative log-probability.
/// Continuations ending in EOS are set aside as finished; a sentence stops once
/// it has `beam` finished hypotheses, has none alive, or reaches `max_len`.
/// The result is the finished hypothesis with the highest length-normalised
/// score.
pub fn beam_search_batch(
    params: &ModelParams,
    srcs: &[Vec<u32>],
    beam: usize,
    max_len: usize,
) -> Result<Vec<Hypothesis>> {
    if beam == 0 {
        return Err(Error::Config("beam size must be at least 1".into()));
    }
    check_decode_len(params, max_len)?;
    for src in srcs {
        check_tokens(params, src, "source")?;
    }
    let mut finished: Vec<Vec<Hypothesis>> = vec![Vec::new(); srcs.len()];
    if max_len == 0 {
        return Ok(srcs
            .iter()
            .map(|_| Hypothesis {
                tokens: Vec::new(),
                log_prob: 0.0,
            })
            .collect());
    }

    let mut sessions = DecodeSession::new_batch(params, srcs)?;
    let mut alive: Vec<Alive> = (0..srcs.len())
        .map(|sentence| Alive {
            sentence,
            tokens: Vec::new(),
            log_prob: 0.0,
        })
        .collect();

    while !alive.is_empty() {
        let feed: Vec<u32> = alive
            .iter()
            .map(|a| a.tokens.last().copied().unwrap_or(BOS))
            .collect();
        let logits = decode_step_batch(&mut sessions, &feed)?;

        // (cumulative log-prob, parent row, token), grouped by sentence
        let mut selected: Vec<(usize, u32, f64)> = Vec::new();
        let mut row = 0;
        while row < alive.len() {
            let sentence = alive[row].sentence;
            let end = (row..alive.len())
                .find(|&r| alive[r].sentence != sentence)
                .unwrap_or(alive.len());
            let mut candidates: Vec<(f64, usize, u32)> = Vec::new();
            for r in row..end {
                let logp = log_softmax(logits.row(r));
                for tok in top_k(&logp, beam) {
                    candidates.push((alive[r].log_prob + logp[tok], r, tok as u32));
                }
            }
            candidates.sort_by(|a, b| {
                b.0.partial_cmp(&a.0)
                    .unwrap_or(Ordering::Equal)
                    .then(a.1.cmp(&b.1))
                    .then(a.2.cmp(&b.2))
            });
            let mut kept = 0;
            for (log_prob, parent, tok) in candidates {
                if kept == beam {
                    break;
                }
                let mut tokens = alive[parent].tokens.clone();
                tokens.push(tok);
                if tok == EOS {
                    finished[sentence].push(Hypothesis { tokens, log_prob });
                } else if tokens.len() == max_len {
                    finished[sentence].push(Hypothesis { tokens, log_prob });
                    kept += 1;
                } else {
                    selected.push((parent, tok, log_prob));
                    kept += 1;
                }
            }
            if finished[sentence].len() >= beam {
                selected.retain(|&(p, _, _)| alive[p].sentence != sentence);
            }
            row = end;
        }

        // fork caches: the last child of a parent takes its session, earlier ones clone it
        let mut remaining = vec![0usize; alive.len()];
        for &(p, _, _) in &selected {
            remaining[p] += 1;
        }
        let mut parents: Vec<Option<DecodeSession<'_>>> = sessions.into_iter().map(Some).collect();
        let mut next_sessions = Vec::with_capacity(selected.len());
        let mut next_alive = Vec::with_capacity(selected.len());
        for (p, tok, log_prob) in selected {
            remaining[p] -= 1;
            let session = if remaining[p] == 0 {
                parents[p].take().expect("parent session taken once")
            } else {
                parents[p].clone().expect("parent session still present")
            };
            let mut tokens = alive[p].tokens.clone();
            tokens.push(tok);
            next_sessions.push(session);
            next_alive.push(Alive {
                sentence: alive[p].sentence,
                tokens,
                log_prob,
            });
        }
        sessions = next_sessions;
        alive = next_alive;
    }

    Ok(finished
        .into_iter()
        .map(|hyps| {
            let mut best: Option<Hypothesis> = None;
            for h in hyps {
                if best.as_ref().map_or(true, |b| h.score() > b.score()) {
                    best = Some(h);
                }
            }
            best.unwrap_or(Hypothesis {
                tokens: Vec::new(),
                log_prob: 0.0,
            })
        })
        .collect())
}

/// Indices of the `k` largest entries, best first; ties go to the lower index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let k = k.min(values.len());
    let cmp = |a: &usize, b: &usize| {
        values[*b]
            .partial_cmp(&values[*a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(b))
    };
    let mut idx: Vec<usize> = (0..values.len()).collect();
    if k < idx.len() {
        idx.select_nth_unstable_by(k, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_and_breaks_ties() {
        let v = [0.1, 0.5, 0.5, -1.0, 0.3];
        assert_eq!(top_k(&v, 3), vec![1, 2, 4]);
        assert_eq!(top_k(&v, 10), vec![1, 2, 4, 0, 3]);
    }

    #[test]
    fn log_softmax_normalises() {
        let lp = log_softmax(&[1.0, 2.0, 3.0]);
        let total: f64 = lp.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-15);
    }

    #[test]
    fn argmax_takes_first_max() {
        assert_eq!(argmax(&[0.0, 2.0, 2.0]), 1);
    }
}
