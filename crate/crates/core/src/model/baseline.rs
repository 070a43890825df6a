//! Plain unshared Transformer forward pass, written with scalar loops only.
//!
//! It shares no code with the main forward path beyond the parameter
//! container and serves as the reference for an all-unshared model.

use crate::error::{Error, Result};
use crate::model::params::{FeedForward, ModelParams, Norm};
use crate::tensor::{Mat, LAYER_NORM_EPS};

fn mm(a: &[Vec<f64>], b: &Mat) -> Vec<Vec<f64>> {
    a.iter()
        .map(|row| {
            (0..b.cols())
                .map(|j| row.iter().enumerate().map(|(k, x)| x * b.get(k, j)).sum())
                .collect()
        })
        .collect()
}

fn layer_norm(x: &[Vec<f64>], n: &Norm<Mat>) -> Vec<Vec<f64>> {
    x.iter()
        .map(|row| {
            let d = row.len() as f64;
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            row.iter()
                .enumerate()
                .map(|(j, v)| (v - mean) * inv * n.gain.get(0, j) + n.bias.get(0, j))
                .collect()
        })
        .collect()
}

fn add(x: &mut [Vec<f64>], y: &[Vec<f64>]) {
    for (a, b) in x.iter_mut().zip(y) {
        for (u, v) in a.iter_mut().zip(b) {
            *u += v;
        }
    }
}

fn ffn(x: &[Vec<f64>], f: &FeedForward<Mat>) -> Vec<Vec<f64>> {
    let mut h = mm(x, &f.w1);
    for row in &mut h {
        for (j, v) in row.iter_mut().enumerate() {
            *v = (*v + f.b1.get(0, j)).max(0.0);
        }
    }
    let mut out = mm(&h, &f.w2);
    for row in &mut out {
        for (j, v) in row.iter_mut().enumerate() {
            *v += f.b2.get(0, j);
        }
    }
    out
}

fn need(m: &Option<Mat>, what: &str) -> Result<Mat> {
    m.clone().ok_or_else(|| {
        Error::Config(format!(
            "baseline requires every projection; {what} is absent"
        ))
    })
}

fn attention(
    xq: &[Vec<f64>],
    xkv: &[Vec<f64>],
    w: [&Mat; 4],
    heads: usize,
    causal: bool,
) -> Vec<Vec<f64>> {
    let [wq, wk, wv, wo] = w;
    let (q, k, v) = (mm(xq, wq), mm(xkv, wk), mm(xkv, wv));
    let d = wq.cols();
    let dk = d / heads;
    let offset = xkv.len() as isize - xq.len() as isize;
    let mut ctx = vec![vec![0.0; d]; xq.len()];
    for h in 0..heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..xq.len() {
            let visible = if causal {
                ((i as isize + offset + 1).max(0) as usize).min(xkv.len())
            } else {
                xkv.len()
            };
            let scores: Vec<f64> = (0..visible)
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (j, e) in exps.iter().enumerate() {
                for c in cols.clone() {
                    ctx[i][c] += e / z * v[j][c];
                }
            }
        }
    }
    mm(&ctx, wo)
}

fn embed(params: &ModelParams, tokens: &[u32]) -> Vec<Vec<f64>> {
    let d = params.config().d_model;
    let scale = (d as f64).sqrt();
    tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| {
            (0..d)
                .map(|j| {
                    params.weights().embed.get(t as usize, j) * scale + params.pos_enc().get(pos, j)
                })
                .collect()
        })
        .collect()
}

/// Logits (`tgt_in.len() x vocab`) of an unshared model, computed naively.
pub fn baseline_forward(params: &ModelParams, src: &[u32], tgt_in: &[u32]) -> Result<Mat> {
    if !params.policy().is_unshared() {
        return Err(Error::Config(
            "baseline forward needs an unshared policy".into(),
        ));
    }
    let cfg = params.config();
    for &t in src.iter().chain(tgt_in) {
        if t as usize >= cfg.vocab {
            return Err(Error::Input(format!("token {t} is outside the vocabulary")));
        }
    }
    if src.is_empty() || tgt_in.is_empty() || src.len() > cfg.max_len || tgt_in.len() > cfg.max_len
    {
        return Err(Error::Input("sequence length outside 1..=max_len".into()));
    }
    let heads = cfg.heads;
    let w = params.weights();

    let mut x = embed(params, src);
    for layer in &w.encoder {
        let p = &layer.attn;
        let h = layer_norm(&x, &layer.attn_norm);
        let a = attention(
            &h,
            &h,
            [
                &need(&p.w_q, "w_q")?,
                &need(&p.w_k, "w_k")?,
                &need(&p.w_v, "w_v")?,
                &need(&p.w_o, "w_o")?,
            ],
            heads,
            false,
        );
        add(&mut x, &a);
        let f = ffn(&layer_norm(&x, &layer.ffn_norm), &layer.ffn);
        add(&mut x, &f);
    }
    let memory = layer_norm(&x, &w.enc_norm);

    let mut y = embed(params, tgt_in);
    for layer in &w.decoder {
        let p = &layer.self_attn;
        let h = layer_norm(&y, &layer.self_norm);
        let a = attention(
            &h,
            &h,
            [
                &need(&p.w_q, "w_q")?,
                &need(&p.w_k, "w_k")?,
                &need(&p.w_v, "w_v")?,
                &need(&p.w_o, "w_o")?,
            ],
            heads,
            true,
        );
        add(&mut y, &a);
        let p = &layer.cross_attn;
        let h = layer_norm(&y, &layer.cross_norm);
        let a = attention(
            &h,
            &memory,
            [
                &need(&p.w_q, "w_q")?,
                &need(&p.w_k, "w_k")?,
                &need(&p.w_v, "w_v")?,
                &need(&p.w_o, "w_o")?,
            ],
            heads,
            false,
        );
        add(&mut y, &a);
        let f = ffn(&layer_norm(&y, &layer.ffn_norm), &layer.ffn);
        add(&mut y, &f);
    }
    let mut logits = mm(&layer_norm(&y, &w.dec_norm), &w.out_w);
    for row in &mut logits {
        for (j, v) in row.iter_mut().enumerate() {
            *v += w.out_b.get(0, j);
        }
    }
    Mat::from_rows(&logits)
}
