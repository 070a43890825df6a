//! Full-sequence (teacher-forced) forward pass with attention capture.

use crate::attention::{encdec_block_bottom, multi_head, multi_head_segments, AttnWeights};
use crate::error::{Error, Result};
use crate::model::config::BlockRole;
use crate::model::params::{FeedForward, ModelParams, Norm};
use crate::tensor::{layer_norm, matmul, Mat, LAYER_NORM_EPS};

/// Logits plus every layer's attention weights. Layers inside a shared block
/// report their block bottom's weights.
#[derive(Clone, Debug)]
pub struct TeacherForward {
    /// `tgt_len x vocab`; row `i` predicts the token after input position `i`.
    pub logits: Mat,
    pub self_weights: Vec<AttnWeights>,
    pub encdec_weights: Vec<AttnWeights>,
    pub enc_weights: Vec<AttnWeights>,
    pub enc_out: Mat,
}

pub(crate) fn check_tokens(params: &ModelParams, tokens: &[u32], what: &str) -> Result<()> {
    let cfg = params.config();
    if tokens.is_empty() {
        return Err(Error::Input(format!("{what} sequence is empty")));
    }
    if tokens.len() > cfg.max_len {
        return Err(Error::Input(format!(
            "{what} length {} exceeds max_len {}",
            tokens.len(),
            cfg.max_len
        )));
    }
    if let Some((i, t)) = tokens
        .iter()
        .enumerate()
        .find(|(_, &t)| t as usize >= cfg.vocab)
    {
        return Err(Error::Input(format!(
            "{what} token {t} at position {i} is outside the vocabulary of {}",
            cfg.vocab
        )));
    }
    Ok(())
}

/// Scaled token embeddings plus position encodings.
pub(crate) fn embed(params: &ModelParams, tokens: &[u32], first_pos: usize) -> Mat {
    let d = params.config().d_model;
    let scale = (d as f64).sqrt();
    let table = &params.weights().embed;
    let mut x = Mat::zeros(tokens.len(), d);
    for (i, &tok) in tokens.iter().enumerate() {
        let pos = params.pos_enc().row(first_pos + i);
        for ((o, e), p) in x
            .row_mut(i)
            .iter_mut()
            .zip(table.row(tok as usize))
            .zip(pos)
        {
            *o = e * scale + p;
        }
    }
    x
}

pub(crate) fn norm(x: &Mat, n: &Norm<Mat>) -> Result<Mat> {
    layer_norm(x, n.gain.as_slice(), n.bias.as_slice(), LAYER_NORM_EPS)
}

pub(crate) fn feed_forward(x: &Mat, f: &FeedForward<Mat>) -> Result<Mat> {
    let mut hidden = matmul(x, &f.w1)?;
    hidden.add_row_assign(&f.b1)?;
    for v in hidden.as_mut_slice() {
        *v = v.max(0.0);
    }
    let mut out = matmul(&hidden, &f.w2)?;
    out.add_row_assign(&f.b2)?;
    Ok(out)
}

pub(crate) fn project_logits(params: &ModelParams, x: &Mat) -> Result<Mat> {
    let w = params.weights();
    let mut logits = matmul(&norm(x, &w.dec_norm)?, &w.out_w)?;
    logits.add_row_assign(&w.out_b)?;
    Ok(logits)
}

/// Encoder output (`src_len x d_model`).
pub fn encode(params: &ModelParams, src: &[u32]) -> Result<Mat> {
    Ok(encode_with_weights(params, src)?.0)
}

pub fn encode_with_weights(params: &ModelParams, src: &[u32]) -> Result<(Mat, Vec<AttnWeights>)> {
    check_tokens(params, src, "source")?;
    let heads = params.config().heads;
    let w = params.weights();
    let mut x = embed(params, src, 0);
    let mut captured: Vec<AttnWeights> = Vec::with_capacity(w.encoder.len());
    for (layer, role) in w.encoder.iter().zip(params.enc_roles()) {
        let h = norm(&x, &layer.attn_norm)?;
        let shared = match *role {
            BlockRole::Bottom => None,
            BlockRole::Shared { bottom } => Some(&captured[bottom]),
        };
        let (a, s) = multi_head(&h, &h, &layer.attn, heads, false, shared)?;
        x.add_assign(&a)?;
        captured.push(s);
        x.add_assign(&feed_forward(&norm(&x, &layer.ffn_norm)?, &layer.ffn)?)?;
    }
    Ok((norm(&x, &w.enc_norm)?, captured))
}

/// Encodes several sources together. Same result as [`encode`] per sentence,
/// but every projection is one GEMM over all source rows.
pub fn encode_batch<S: AsRef<[u32]>>(params: &ModelParams, srcs: &[S]) -> Result<Vec<Mat>> {
    let mut parts = Vec::with_capacity(srcs.len());
    for src in srcs {
        check_tokens(params, src.as_ref(), "source")?;
        parts.push(embed(params, src.as_ref(), 0));
    }
    if parts.is_empty() {
        return Ok(parts);
    }
    let lens: Vec<usize> = parts.iter().map(Mat::rows).collect();
    let heads = params.config().heads;
    let w = params.weights();
    let mut x = Mat::vstack(&parts)?;
    let mut captured: Vec<Vec<AttnWeights>> = Vec::with_capacity(w.encoder.len());
    for (layer, role) in w.encoder.iter().zip(params.enc_roles()) {
        let h = norm(&x, &layer.attn_norm)?;
        let shared = match *role {
            BlockRole::Bottom => None,
            BlockRole::Shared { bottom } => Some(captured[bottom].as_slice()),
        };
        let (a, s) = multi_head_segments(&h, &lens, &layer.attn, heads, shared)?;
        x.add_assign(&a)?;
        captured.push(s);
        x.add_assign(&feed_forward(&norm(&x, &layer.ffn_norm)?, &layer.ffn)?)?;
    }
    let out = norm(&x, &w.enc_norm)?;
    let mut start = 0;
    Ok(lens
        .iter()
        .map(|&n| {
            let m = out.row_block(start, n);
            start += n;
            m
        })
        .collect())
}

/// Batched forward over a full target prefix with a causal mask.
///
/// `tgt_in` is the decoder input, normally starting with [`BOS`](crate::model::BOS).
pub fn forward_teacher(
    params: &ModelParams,
    src: &[u32],
    tgt_in: &[u32],
) -> Result<TeacherForward> {
    check_tokens(params, tgt_in, "target")?;
    let (enc_out, enc_weights) = encode_with_weights(params, src)?;
    let heads = params.config().heads;
    let w = params.weights();
    let mut x = embed(params, tgt_in, 0);
    let mut self_weights: Vec<AttnWeights> = Vec::with_capacity(w.decoder.len());
    let mut encdec_weights: Vec<AttnWeights> = Vec::with_capacity(w.decoder.len());
    let mut encdec_out: Vec<Option<Mat>> = Vec::with_capacity(w.decoder.len());

    for (l, layer) in w.decoder.iter().enumerate() {
        let h = norm(&x, &layer.self_norm)?;
        let shared = match params.self_roles()[l] {
            BlockRole::Bottom => None,
            BlockRole::Shared { bottom } => Some(&self_weights[bottom]),
        };
        let (a, s) = multi_head(&h, &h, &layer.self_attn, heads, true, shared)?;
        x.add_assign(&a)?;
        self_weights.push(s);

        match params.encdec_roles()[l] {
            BlockRole::Bottom => {
                let h = norm(&x, &layer.cross_norm)?;
                let (a, s) = encdec_block_bottom(&h, &enc_out, &layer.cross_attn, heads)?;
                x.add_assign(&a)?;
                encdec_out.push(Some(a));
                encdec_weights.push(s);
            }
            BlockRole::Shared { bottom } => {
                let a = encdec_out[bottom]
                    .as_ref()
                    .expect("block bottom precedes its shared layers");
                x.add_assign(a)?;
                encdec_out.push(None);
                encdec_weights.push(encdec_weights[bottom].clone());
            }
        }

        x.add_assign(&feed_forward(&norm(&x, &layer.ffn_norm)?, &layer.ffn)?)?;
    }

    Ok(TeacherForward {
        logits: project_logits(params, &x)?,
        self_weights,
        encdec_weights,
        enc_weights,
        enc_out,
    })
}
