//! Parameter tree of the encoder-decoder model.
//!
//! [`Weights`] is generic over its leaf so the same layout carries the live
//! matrices, their shapes (for initialisation, counting and file checks),
//! gradients, optimiser moments and autodiff handles. Leaves are always
//! visited in one fixed order, which is also the on-disk order.

use std::convert::Infallible;

use crate::attention::{ProjectionMode, ProjectionSet};
use crate::error::{Error, Result};
use crate::model::config::{
    block_roles, encdec_mode, self_mode, BlockRole, ModelConfig, SharingPolicy,
};
use crate::tensor::{seeded_gaussian, Mat, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeedForward<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer<T> {
    pub attn_norm: Norm<T>,
    pub attn: ProjectionSet<T>,
    pub ffn_norm: Norm<T>,
    pub ffn: FeedForward<T>,
}

/// Pre-norm decoder layer. `cross_norm` is kept even when `cross_attn` is
/// SHARED_ENCDEC (its input is then unused).
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_norm: Norm<T>,
    pub self_attn: ProjectionSet<T>,
    pub cross_norm: Norm<T>,
    pub cross_attn: ProjectionSet<T>,
    pub ffn_norm: Norm<T>,
    pub ffn: FeedForward<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    /// Shared source/target embedding, `vocab x d_model`.
    pub embed: T,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
    pub enc_norm: Norm<T>,
    pub dec_norm: Norm<T>,
    /// Untied output projection, `d_model x vocab`, plus bias.
    pub out_w: T,
    pub out_b: T,
}

type Visit<'f, 'a, T, U, E> = &'f mut dyn FnMut(&str, &'a T) -> Result<U, E>;

impl<T> Norm<T> {
    fn map_named<'a, U, E>(&'a self, p: &str, f: Visit<'_, 'a, T, U, E>) -> Result<Norm<U>, E> {
        Ok(Norm {
            gain: f(&format!("{p}.gain"), &self.gain)?,
            bias: f(&format!("{p}.bias"), &self.bias)?,
        })
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.push(&mut self.gain);
        out.push(&mut self.bias);
    }
}

impl<T> FeedForward<T> {
    fn map_named<'a, U, E>(
        &'a self,
        p: &str,
        f: Visit<'_, 'a, T, U, E>,
    ) -> Result<FeedForward<U>, E> {
        Ok(FeedForward {
            w1: f(&format!("{p}.w1"), &self.w1)?,
            b1: f(&format!("{p}.b1"), &self.b1)?,
            w2: f(&format!("{p}.w2"), &self.w2)?,
            b2: f(&format!("{p}.b2"), &self.b2)?,
        })
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend([&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]);
    }
}

impl<T> ProjectionSet<T> {
    fn map_named<'a, U, E>(
        &'a self,
        p: &str,
        f: Visit<'_, 'a, T, U, E>,
    ) -> Result<ProjectionSet<U>, E> {
        let mut one = |suffix: &str, w: &'a Option<T>| {
            w.as_ref()
                .map(|w| f(&format!("{p}.{suffix}"), w))
                .transpose()
        };
        Ok(ProjectionSet {
            w_q: one("w_q", &self.w_q)?,
            w_k: one("w_k", &self.w_k)?,
            w_v: one("w_v", &self.w_v)?,
            w_o: one("w_o", &self.w_o)?,
        })
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        out.extend(
            [&mut self.w_q, &mut self.w_k, &mut self.w_v, &mut self.w_o]
                .into_iter()
                .filter_map(Option::as_mut),
        );
    }
}

impl<T> EncoderLayer<T> {
    fn map_named<'a, U, E>(
        &'a self,
        p: &str,
        f: Visit<'_, 'a, T, U, E>,
    ) -> Result<EncoderLayer<U>, E> {
        Ok(EncoderLayer {
            attn_norm: self.attn_norm.map_named(&format!("{p}.attn_norm"), f)?,
            attn: self.attn.map_named(&format!("{p}.attn"), f)?,
            ffn_norm: self.ffn_norm.map_named(&format!("{p}.ffn_norm"), f)?,
            ffn: self.ffn.map_named(&format!("{p}.ffn"), f)?,
        })
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.attn_norm.collect_mut(out);
        self.attn.collect_mut(out);
        self.ffn_norm.collect_mut(out);
        self.ffn.collect_mut(out);
    }
}

impl<T> DecoderLayer<T> {
    fn map_named<'a, U, E>(
        &'a self,
        p: &str,
        f: Visit<'_, 'a, T, U, E>,
    ) -> Result<DecoderLayer<U>, E> {
        Ok(DecoderLayer {
            self_norm: self.self_norm.map_named(&format!("{p}.self_norm"), f)?,
            self_attn: self.self_attn.map_named(&format!("{p}.self_attn"), f)?,
            cross_norm: self.cross_norm.map_named(&format!("{p}.cross_norm"), f)?,
            cross_attn: self.cross_attn.map_named(&format!("{p}.cross_attn"), f)?,
            ffn_norm: self.ffn_norm.map_named(&format!("{p}.ffn_norm"), f)?,
            ffn: self.ffn.map_named(&format!("{p}.ffn"), f)?,
        })
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut T>) {
        self.self_norm.collect_mut(out);
        self.self_attn.collect_mut(out);
        self.cross_norm.collect_mut(out);
        self.cross_attn.collect_mut(out);
        self.ffn_norm.collect_mut(out);
        self.ffn.collect_mut(out);
    }
}

impl<T> Weights<T> {
    /// Maps every leaf, passing its canonical name (`decoder.3.self_attn.w_q`, ...).
    pub fn try_map<'a, U, E>(
        &'a self,
        mut f: impl FnMut(&str, &'a T) -> Result<U, E>,
    ) -> Result<Weights<U>, E> {
        let f: Visit<'_, 'a, T, U, E> = &mut f;
        Ok(Weights {
            embed: f("embed", &self.embed)?,
            encoder: self
                .encoder
                .iter()
                .enumerate()
                .map(|(i, l)| l.map_named(&format!("encoder.{i}"), f))
                .collect::<Result<_, E>>()?,
            decoder: self
                .decoder
                .iter()
                .enumerate()
                .map(|(i, l)| l.map_named(&format!("decoder.{i}"), f))
                .collect::<Result<_, E>>()?,
            enc_norm: self.enc_norm.map_named("encoder.norm", f)?,
            dec_norm: self.dec_norm.map_named("decoder.norm", f)?,
            out_w: f("output.w", &self.out_w)?,
            out_b: f("output.b", &self.out_b)?,
        })
    }

    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> Weights<U> {
        match self.try_map(|n, t| Ok::<_, Infallible>(f(n, t))) {
            Ok(w) => w,
            Err(never) => match never {},
        }
    }

    /// `(name, leaf)` pairs in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.map(|n, t| out.push((n.to_string(), t)));
        out
    }

    pub fn names(&self) -> Vec<String> {
        self.named().into_iter().map(|(n, _)| n).collect()
    }

    pub fn leaves(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    /// Mutable leaves in the same order as [`Weights::named`].
    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        out.push(&mut self.embed);
        for l in &mut self.encoder {
            l.collect_mut(&mut out);
        }
        for l in &mut self.decoder {
            l.collect_mut(&mut out);
        }
        self.enc_norm.collect_mut(&mut out);
        self.dec_norm.collect_mut(&mut out);
        out.push(&mut self.out_w);
        out.push(&mut self.out_b);
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    Gaussian,
    Ones,
    Zeros,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TensorSpec {
    pub rows: usize,
    pub cols: usize,
    pub init: Init,
}

impl TensorSpec {
    fn new(rows: usize, cols: usize, init: Init) -> Self {
        Self { rows, cols, init }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn norm_spec(d: usize) -> Norm<TensorSpec> {
    Norm {
        gain: TensorSpec::new(1, d, Init::Ones),
        bias: TensorSpec::new(1, d, Init::Zeros),
    }
}

fn ffn_spec(d: usize, d_ff: usize) -> FeedForward<TensorSpec> {
    FeedForward {
        w1: TensorSpec::new(d, d_ff, Init::Gaussian),
        b1: TensorSpec::new(1, d_ff, Init::Zeros),
        w2: TensorSpec::new(d_ff, d, Init::Gaussian),
        b2: TensorSpec::new(1, d, Init::Zeros),
    }
}

fn proj_spec(c: &ModelConfig, mode: ProjectionMode) -> ProjectionSet<TensorSpec> {
    let qk = TensorSpec::new(c.d_model, c.heads * c.d_k, Init::Gaussian);
    let v = TensorSpec::new(c.d_model, c.heads * c.d_v, Init::Gaussian);
    let o = TensorSpec::new(c.heads * c.d_v, c.d_model, Init::Gaussian);
    match mode {
        ProjectionMode::Full => ProjectionSet {
            w_q: Some(qk),
            w_k: Some(qk),
            w_v: Some(v),
            w_o: Some(o),
        },
        ProjectionMode::SharedSelf => ProjectionSet {
            w_q: None,
            w_k: None,
            w_v: Some(v),
            w_o: Some(o),
        },
        ProjectionMode::SharedEncDec => ProjectionSet {
            w_q: None,
            w_k: None,
            w_v: None,
            w_o: None,
        },
    }
}

impl Weights<TensorSpec> {
    /// Shapes and presence of every tensor for `config` under `policy`.
    pub fn template(config: &ModelConfig, policy: &SharingPolicy) -> Result<Self> {
        config.validate()?;
        policy.validate(config)?;
        let d = config.d_model;
        let encoder = block_roles(&policy.enc_blocks)
            .into_iter()
            .map(|role| EncoderLayer {
                attn_norm: norm_spec(d),
                attn: proj_spec(config, self_mode(role)),
                ffn_norm: norm_spec(d),
                ffn: ffn_spec(d, config.d_ff),
            })
            .collect();
        let decoder = block_roles(&policy.self_blocks)
            .into_iter()
            .zip(block_roles(&policy.encdec_blocks))
            .map(|(self_role, cross_role)| DecoderLayer {
                self_norm: norm_spec(d),
                self_attn: proj_spec(config, self_mode(self_role)),
                cross_norm: norm_spec(d),
                cross_attn: proj_spec(config, encdec_mode(cross_role)),
                ffn_norm: norm_spec(d),
                ffn: ffn_spec(d, config.d_ff),
            })
            .collect();
        Ok(Weights {
            embed: TensorSpec::new(config.vocab, d, Init::Gaussian),
            encoder,
            decoder,
            enc_norm: norm_spec(d),
            dec_norm: norm_spec(d),
            out_w: TensorSpec::new(d, config.vocab, Init::Gaussian),
            out_b: TensorSpec::new(1, config.vocab, Init::Zeros),
        })
    }

    pub fn total_len(&self) -> usize {
        self.leaves().into_iter().map(TensorSpec::len).sum()
    }
}

/// Sinusoidal position encodings, `max_len x d_model`.
pub fn sinusoid_table(max_len: usize, d_model: usize) -> Mat {
    let mut m = Mat::zeros(max_len, d_model);
    for pos in 0..max_len {
        for i in 0..d_model {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / d_model as f64);
            let angle = pos as f64 / rate;
            m.set(pos, i, if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    m
}

/// A concrete model: configuration, policy and parameters in the layout the
/// policy dictates (discarded projections are absent, not zero).
#[derive(Clone, Debug)]
pub struct ModelParams {
    config: ModelConfig,
    policy: SharingPolicy,
    weights: Weights<Mat>,
    pos_enc: Mat,
    self_roles: Vec<BlockRole>,
    encdec_roles: Vec<BlockRole>,
    enc_roles: Vec<BlockRole>,
}

impl ModelParams {
    /// Gaussian initialisation with std `d_model^-1/2`; norm gains 1, biases 0.
    pub fn build(config: &ModelConfig, policy: &SharingPolicy, seed: u64) -> Result<Self> {
        let template = Weights::template(config, policy)?;
        let std = (config.d_model as f64).powf(-0.5);
        let mut rng = Rng::new(seed);
        let weights = template.map(|_, spec| match spec.init {
            Init::Gaussian => seeded_gaussian(spec.rows, spec.cols, std, &mut rng),
            Init::Ones => Mat::filled(spec.rows, spec.cols, 1.0),
            Init::Zeros => Mat::zeros(spec.rows, spec.cols),
        });
        Self::from_weights(config.clone(), policy.clone(), weights)
    }

    /// Wraps existing tensors after checking names, presence and shapes.
    pub fn from_weights(
        config: ModelConfig,
        policy: SharingPolicy,
        weights: Weights<Mat>,
    ) -> Result<Self> {
        let template = Weights::template(&config, &policy)?;
        check_against(&template, &weights)?;
        Ok(Self {
            pos_enc: sinusoid_table(config.max_len, config.d_model),
            self_roles: block_roles(&policy.self_blocks),
            encdec_roles: block_roles(&policy.encdec_blocks),
            enc_roles: block_roles(&policy.enc_blocks),
            config,
            policy,
            weights,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn policy(&self) -> &SharingPolicy {
        &self.policy
    }

    pub fn weights(&self) -> &Weights<Mat> {
        &self.weights
    }

    /// Direct access for training and test rigs; shapes must be preserved.
    pub fn weights_mut(&mut self) -> &mut Weights<Mat> {
        &mut self.weights
    }

    pub fn into_weights(self) -> Weights<Mat> {
        self.weights
    }

    pub fn pos_enc(&self) -> &Mat {
        &self.pos_enc
    }

    pub fn self_roles(&self) -> &[BlockRole] {
        &self.self_roles
    }

    pub fn encdec_roles(&self) -> &[BlockRole] {
        &self.encdec_roles
    }

    pub fn enc_roles(&self) -> &[BlockRole] {
        &self.enc_roles
    }

    pub fn num_params(&self) -> usize {
        self.weights
            .leaves()
            .into_iter()
            .map(|m| m.as_slice().len())
            .sum()
    }
}

pub(crate) fn check_against(template: &Weights<TensorSpec>, weights: &Weights<Mat>) -> Result<()> {
    let want = template.named();
    let have = weights.named();
    if want.len() != have.len() {
        return Err(Error::Config(format!(
            "expected {} tensors for this policy, found {}",
            want.len(),
            have.len()
        )));
    }
    for ((wn, spec), (hn, m)) in want.iter().zip(&have) {
        if wn != hn {
            return Err(Error::Config(format!("expected tensor {wn}, found {hn}")));
        }
        if m.shape() != (spec.rows, spec.cols) {
            return Err(Error::Config(format!(
                "tensor {wn} has shape {:?}, expected {:?}",
                m.shape(),
                (spec.rows, spec.cols)
            )));
        }
    }
    Ok(())
}
