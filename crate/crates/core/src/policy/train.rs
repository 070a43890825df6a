//! Toy-scale training: analytic gradients, Adam with the inverse-square-root
//! schedule, and a finite-difference gradient check.

use serde::{Deserialize, Serialize};

use crate::attention::ProjectionSet;
use crate::data::Example;
use crate::error::{Error, Result};
use crate::model::{
    forward_teacher, log_softmax, BlockRole, FeedForward, ModelConfig, ModelParams, Norm,
    SharingPolicy, Weights, BOS, EOS,
};
use crate::policy::autodiff::{BackwardFault, Tape, Var};
use crate::tensor::{Mat, Rng, LAYER_NORM_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sentences are drawn until the batch holds at least this many target tokens.
    pub batch_tokens: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup: usize,
    /// Multiplies the scheduled learning rate.
    pub lr_scale: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    /// Observer interval in steps (0 disables checkpoints).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_tokens: 64,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup: 4000,
            lr_scale: 1.0,
            label_smoothing: 0.0,
            seed: 1,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        if !open_unit(self.beta1) || !open_unit(self.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in (0, 1), got {} and {}",
                self.beta1, self.beta2
            )));
        }
        if self.warmup == 0 {
            return Err(Error::Config("warmup must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label smoothing {} outside [0, 1)",
                self.label_smoothing
            )));
        }
        if self.batch_tokens == 0 || !(self.eps > 0.0) || !(self.lr_scale > 0.0) {
            return Err(Error::Config(
                "batch_tokens, eps and lr_scale must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// `d^-0.5 · min(t^-0.5, t · warmup^-1.5)`.
pub fn lr_at(t: usize, d_model: usize, warmup: usize) -> Result<f64> {
    if t == 0 {
        return Err(Error::Range(
            "learning-rate steps are numbered from 1".into(),
        ));
    }
    let t = t as f64;
    Ok((d_model as f64).powf(-0.5) * t.powf(-0.5).min(t * (warmup as f64).powf(-1.5)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradOptions {
    pub label_smoothing: f64,
    /// Multiplies the loss before differentiation.
    pub loss_weight: f64,
    pub fault: Option<BackwardFault>,
}

impl Default for GradOptions {
    fn default() -> Self {
        Self {
            label_smoothing: 0.0,
            loss_weight: 1.0,
            fault: None,
        }
    }
}

fn check_example(cfg: &ModelConfig, ex: &Example, i: usize) -> Result<()> {
    let ok_len = |n: usize| n >= 1 && n < cfg.max_len;
    if !ok_len(ex.src.len()) || !ok_len(ex.tgt.len() + 1) {
        return Err(Error::Input(format!(
            "example {i}: lengths {} / {} outside what max_len {} allows",
            ex.src.len(),
            ex.tgt.len(),
            cfg.max_len
        )));
    }
    if let Some(t) = ex
        .src
        .iter()
        .chain(&ex.tgt)
        .find(|&&t| t as usize >= cfg.vocab)
    {
        return Err(Error::Input(format!(
            "example {i}: token {t} outside the vocabulary"
        )));
    }
    Ok(())
}

fn target_tokens(batch: &[Example]) -> usize {
    batch.iter().map(|e| e.tgt.len() + 1).sum()
}

fn decoder_io(ex: &Example) -> (Vec<u32>, Vec<u32>) {
    let mut input = Vec::with_capacity(ex.tgt.len() + 1);
    input.push(BOS);
    input.extend(&ex.tgt);
    let mut labels = ex.tgt.clone();
    labels.push(EOS);
    (input, labels)
}

struct TapeModel<'a> {
    params: &'a ModelParams,
    vars: Weights<Var>,
}

impl<'a> TapeModel<'a> {
    fn new(tape: &mut Tape, params: &'a ModelParams) -> Self {
        let vars = params.weights().map(|_, m| tape.leaf(m.clone()));
        Self { params, vars }
    }

    fn norm(&self, tape: &mut Tape, x: Var, n: &Norm<Var>) -> Var {
        tape.layer_norm(x, n.gain, n.bias, LAYER_NORM_EPS)
    }

    fn ffn(&self, tape: &mut Tape, x: Var, f: &FeedForward<Var>) -> Result<Var> {
        let h = tape.matmul(x, f.w1)?;
        let h = tape.add_row(h, f.b1)?;
        let h = tape.relu(h);
        let o = tape.matmul(h, f.w2)?;
        tape.add_row(o, f.b2)
    }

    fn embed(&self, tape: &mut Tape, tokens: &[u32]) -> Result<Var> {
        let d = self.params.config().d_model;
        let e = tape.gather(self.vars.embed, tokens);
        let e = tape.scale(e, (d as f64).sqrt());
        let pos = tape.leaf(self.params.pos_enc().row_block(0, tokens.len()));
        tape.add(e, pos)
    }

    /// Multi-head attention; `shared` supplies the per-head weights of a block bottom.
    fn attention(
        &self,
        tape: &mut Tape,
        xq: Var,
        xkv: Var,
        proj: &ProjectionSet<Var>,
        causal: bool,
        shared: Option<&[Var]>,
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = self.params.config();
        let (h, dk) = (cfg.heads, cfg.d_k);
        let missing = || Error::Config("projection absent where the policy requires it".into());
        let v = tape.matmul(xkv, proj.w_v.ok_or_else(missing)?)?;
        let weights = match shared {
            Some(s) => s.to_vec(),
            None => {
                let q = tape.matmul(xq, proj.w_q.ok_or_else(missing)?)?;
                let k = tape.matmul(xkv, proj.w_k.ok_or_else(missing)?)?;
                let mut out = Vec::with_capacity(h);
                for head in 0..h {
                    let qh = tape.slice_cols(q, head * dk, dk);
                    let kh = tape.slice_cols(k, head * dk, dk);
                    let scores = tape.matmul_t(qh, kh)?;
                    let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
                    out.push(tape.softmax(scores, causal));
                }
                out
            }
        };
        let dv = cfg.d_v;
        let mut ctx = Vec::with_capacity(h);
        for (head, &s) in weights.iter().enumerate() {
            let vh = tape.slice_cols(v, head * dv, dv);
            ctx.push(tape.matmul(s, vh)?);
        }
        let ctx = tape.concat_cols(ctx)?;
        Ok((tape.matmul(ctx, proj.w_o.ok_or_else(missing)?)?, weights))
    }

    fn logits(&self, tape: &mut Tape, src: &[u32], tgt_in: &[u32]) -> Result<Var> {
        let p = self.params;
        let w = &self.vars;

        let mut x = self.embed(tape, src)?;
        let mut enc_s: Vec<Vec<Var>> = Vec::new();
        for (layer, role) in w.encoder.iter().zip(p.enc_roles()) {
            let h = self.norm(tape, x, &layer.attn_norm);
            let shared = match *role {
                BlockRole::Bottom => None,
                BlockRole::Shared { bottom } => Some(enc_s[bottom].as_slice()),
            };
            let (a, s) = self.attention(tape, h, h, &layer.attn, false, shared)?;
            enc_s.push(s);
            x = tape.add(x, a)?;
            let n = self.norm(tape, x, &layer.ffn_norm);
            let f = self.ffn(tape, n, &layer.ffn)?;
            x = tape.add(x, f)?;
        }
        let memory = self.norm(tape, x, &w.enc_norm);

        let mut y = self.embed(tape, tgt_in)?;
        let mut self_s: Vec<Vec<Var>> = Vec::new();
        let mut cross_a: Vec<Option<Var>> = Vec::new();
        for (l, layer) in w.decoder.iter().enumerate() {
            let h = self.norm(tape, y, &layer.self_norm);
            let shared = match p.self_roles()[l] {
                BlockRole::Bottom => None,
                BlockRole::Shared { bottom } => Some(self_s[bottom].as_slice()),
            };
            let (a, s) = self.attention(tape, h, h, &layer.self_attn, true, shared)?;
            self_s.push(s);
            y = tape.add(y, a)?;

            let a = match p.encdec_roles()[l] {
                BlockRole::Bottom => {
                    let h = self.norm(tape, y, &layer.cross_norm);
                    self.attention(tape, h, memory, &layer.cross_attn, false, None)?
                        .0
                }
                BlockRole::Shared { bottom } => {
                    cross_a[bottom].expect("block bottom precedes shared layers")
                }
            };
            cross_a.push(Some(a));
            y = tape.add(y, a)?;

            let n = self.norm(tape, y, &layer.ffn_norm);
            let f = self.ffn(tape, n, &layer.ffn)?;
            y = tape.add(y, f)?;
        }
        let out = self.norm(tape, y, &w.dec_norm);
        let logits = tape.matmul(out, w.out_w)?;
        tape.add_row(logits, w.out_b)
    }
}

/// Mean per-token cross-entropy over the batch and its gradient for every
/// stored tensor. Gradients mirror the parameter tree, so discarded
/// projections have no entry at all.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &[Example],
    opts: &GradOptions,
) -> Result<(f64, Weights<Mat>)> {
    if batch.is_empty() {
        return Err(Error::Input("empty training batch".into()));
    }
    for (i, ex) in batch.iter().enumerate() {
        check_example(params.config(), ex, i)?;
    }
    let weight = opts.loss_weight / target_tokens(batch) as f64;
    let mut grads = params.weights().map(|_, m| Mat::zeros(m.rows(), m.cols()));
    let mut total = 0.0;
    for ex in batch {
        let (input, labels) = decoder_io(ex);
        let mut tape = Tape::new(opts.fault);
        let model = TapeModel::new(&mut tape, params);
        let logits = model.logits(&mut tape, &ex.src, &input)?;
        let (loss, sum) = tape.cross_entropy(logits, &labels, opts.label_smoothing, weight);
        total += sum;
        let node_grads = tape.backward(loss)?;
        for (g, var) in grads.leaves_mut().into_iter().zip(model.vars.leaves()) {
            if let Some(d) = &node_grads[var.index()] {
                g.add_assign(d)?;
            }
        }
    }
    Ok((total / target_tokens(batch) as f64, grads))
}

/// The same loss evaluated through the inference forward pass (no tape).
pub fn batch_loss(params: &ModelParams, batch: &[Example], label_smoothing: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut total = 0.0;
    for (i, ex) in batch.iter().enumerate() {
        check_example(params.config(), ex, i)?;
        let (input, labels) = decoder_io(ex);
        let logits = forward_teacher(params, &ex.src, &input)?.logits;
        for (r, &t) in labels.iter().enumerate() {
            let lp = log_softmax(logits.row(r));
            let mean = lp.iter().sum::<f64>() / lp.len() as f64;
            total -= (1.0 - label_smoothing) * lp[t as usize] + label_smoothing * mean;
        }
    }
    Ok(total / target_tokens(batch) as f64)
}

/// Adam moments over the parameter tree.
pub struct Adam {
    m: Weights<Mat>,
    v: Weights<Mat>,
    t: usize,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    pub fn new(params: &ModelParams, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = params.weights().map(|_, m| Mat::zeros(m.rows(), m.cols()));
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
            beta1,
            beta2,
            eps,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Weights<Mat>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        let tensors = params.weights_mut().leaves_mut();
        let moments = self.m.leaves_mut().into_iter().zip(self.v.leaves_mut());
        for ((p, g), (m, v)) in tensors.into_iter().zip(grads.leaves()).zip(moments) {
            let iter = p
                .as_mut_slice()
                .iter_mut()
                .zip(g.as_slice())
                .zip(m.as_mut_slice())
                .zip(v.as_mut_slice());
            for (((p, &g), m), v) in iter {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

fn sample_batch<'d>(data: &'d [Example], batch_tokens: usize, rng: &mut Rng) -> Vec<Example> {
    let mut batch = Vec::new();
    let mut tokens = 0;
    while tokens < batch_tokens {
        let ex: &'d Example = &data[rng.below(0, data.len() as u64) as usize];
        tokens += ex.tgt.len() + 1;
        batch.push(ex.clone());
    }
    batch
}

/// Observer called with `(step, params)` at step 0, every `checkpoint_every` steps and after the last step.
pub type Checkpoint<'o> = &'o mut dyn FnMut(usize, &ModelParams) -> Result<()>;

/// Trains in place and returns the per-step loss curve.
pub fn toy_train(
    params: &mut ModelParams,
    data: &[Example],
    cfg: &TrainConfig,
    mut observer: Option<Checkpoint<'_>>,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if cfg.steps > 0 && data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    for (i, ex) in data.iter().enumerate() {
        check_example(params.config(), ex, i)?;
    }
    let mut rng = Rng::new(cfg.seed);
    let mut adam = Adam::new(params, cfg.beta1, cfg.beta2, cfg.eps);
    let opts = GradOptions {
        label_smoothing: cfg.label_smoothing,
        ..GradOptions::default()
    };
    let d = params.config().d_model;
    let mut curve = Vec::with_capacity(cfg.steps);
    if cfg.checkpoint_every > 0 {
        if let Some(f) = &mut observer {
            f(0, params)?;
        }
    }
    for step in 1..=cfg.steps {
        let batch = sample_batch(data, cfg.batch_tokens, &mut rng);
        let (loss, grads) = loss_and_grads(params, &batch, &opts)?;
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        curve.push(loss);
        adam.step(params, &grads, cfg.lr_scale * lr_at(step, d, cfg.warmup)?);
        if !params.weights().leaves().iter().all(|m| m.is_finite()) {
            return Err(Error::Training {
                step,
                loss: f64::NAN,
            });
        }
        if cfg.checkpoint_every > 0 && (step % cfg.checkpoint_every == 0 || step == cfg.steps) {
            if let Some(f) = &mut observer {
                f(step, params)?;
            }
        }
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradcheckConfig {
    pub model: ModelConfig,
    pub policy: SharingPolicy,
    pub seed: u64,
    pub sentences: usize,
    pub max_sentence_len: usize,
    pub fd_eps: f64,
    pub label_smoothing: f64,
    /// Entries whose analytic and numeric magnitudes are both below this are
    /// compared in absolute terms.
    pub abs_floor: f64,
    pub tolerance: f64,
    #[serde(skip)]
    pub fault: Option<BackwardFault>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        let mut model = ModelConfig::small(2, 2, 16, 2, 11);
        model.max_len = 16;
        Self {
            policy: SharingPolicy::decoder(vec![1, 1], vec![2], 2),
            model,
            seed: 3,
            sentences: 3,
            max_sentence_len: 6,
            fd_eps: 1e-5,
            label_smoothing: 0.1,
            abs_floor: 1e-6,
            tolerance: 1e-4,
            fault: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub passed: bool,
    /// Names of every tensor that received a gradient.
    pub tensors: Vec<String>,
}

/// Compares every analytic gradient entry with a central difference of the
/// loss computed by the inference forward pass.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut params = ModelParams::build(&cfg.model, &cfg.policy, cfg.seed)?;
    let mut rng = Rng::new(cfg.seed ^ 0x9e37_79b9);
    // break the symmetry of unit gains and zero biases
    for m in params.weights_mut().leaves_mut() {
        if m.rows() == 1 {
            for v in m.as_mut_slice() {
                *v += 0.1 * rng.normal();
            }
        }
    }
    let batch = crate::data::random_pairs(
        &mut rng,
        cfg.sentences,
        cfg.model.vocab,
        cfg.max_sentence_len,
    );
    let opts = GradOptions {
        label_smoothing: cfg.label_smoothing,
        loss_weight: 1.0,
        fault: cfg.fault,
    };
    let (_, grads) = loss_and_grads(&params, &batch, &opts)?;

    let names = grads.names();
    let mut report = GradcheckReport {
        checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        passed: false,
        tensors: names.clone(),
    };
    for (k, name) in names.iter().enumerate() {
        let len = grads.leaves()[k].as_slice().len();
        for i in 0..len {
            let original = params.weights().leaves()[k].as_slice()[i];
            let mut at = |delta: f64| -> Result<f64> {
                params.weights_mut().leaves_mut()[k].as_mut_slice()[i] = original + delta;
                batch_loss(&params, &batch, cfg.label_smoothing)
            };
            let numeric = (at(cfg.fd_eps)? - at(-cfg.fd_eps)?) / (2.0 * cfg.fd_eps);
            params.weights_mut().leaves_mut()[k].as_mut_slice()[i] = original;
            let analytic = grads.leaves()[k].as_slice()[i];
            let rel =
                (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(cfg.abs_floor);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = rel;
                report.worst_param = name.clone();
                report.worst_index = i;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.tolerance;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_closed_form() {
        assert!((lr_at(4000, 512, 4000).unwrap() - 6.9877e-4).abs() < 1e-8);
        assert!((lr_at(1, 512, 4000).unwrap() - 1.7469e-7).abs() < 1e-11);
        assert!(matches!(lr_at(0, 512, 4000), Err(Error::Range(_))));
    }
}
