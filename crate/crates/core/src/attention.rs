//! Scaled dot-product attention, multi-head wiring, the incremental decode
//! cache and the cross-layer sharing variants.
//!
//! A layer's projections come in three presence patterns (see
//! [`ProjectionMode`]). A block-bottom layer owns all four matrices. A layer
//! that borrows self-attention weights from below keeps only `w_v`/`w_o`, and a
//! layer that borrows an encoder-decoder attention output keeps nothing.

use std::sync::Arc;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{matmul, matmul_t, softmax_in_place, softmax_rows, Mask, Mat};

/// Per-head query-to-key distributions; every head is `queries x keys`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnWeights {
    heads: Vec<Mat>,
}

impl AttnWeights {
    pub fn new(heads: Vec<Mat>) -> Result<Self> {
        let Some(first) = heads.first() else {
            return Err(Error::Shape(
                "attention weights need at least one head".into(),
            ));
        };
        let shape = first.shape();
        if heads.iter().any(|h| h.shape() != shape) {
            return shape_err("attention heads differ in shape");
        }
        Ok(Self { heads })
    }

    /// `heads` copies of the `len x len` identity.
    pub fn identity(heads: usize, len: usize) -> Self {
        Self {
            heads: vec![Mat::identity(len); heads],
        }
    }

    pub fn num_heads(&self) -> usize {
        self.heads.len()
    }

    pub fn queries(&self) -> usize {
        self.heads[0].rows()
    }

    pub fn keys(&self) -> usize {
        self.heads[0].cols()
    }

    pub fn head(&self, i: usize) -> &Mat {
        &self.heads[i]
    }

    pub fn heads(&self) -> &[Mat] {
        &self.heads
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProjectionMode {
    /// `w_q`, `w_k`, `w_v`, `w_o` all present.
    Full,
    /// Only `w_v` and `w_o`; attention weights come from the block bottom.
    SharedSelf,
    /// Nothing; the whole attention output comes from the block bottom.
    SharedEncDec,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSet<T = Mat> {
    pub w_q: Option<T>,
    pub w_k: Option<T>,
    pub w_v: Option<T>,
    pub w_o: Option<T>,
}

impl<T> ProjectionSet<T> {
    pub fn mode(&self) -> Result<ProjectionMode> {
        match (&self.w_q, &self.w_k, &self.w_v, &self.w_o) {
            (Some(_), Some(_), Some(_), Some(_)) => Ok(ProjectionMode::Full),
            (None, None, Some(_), Some(_)) => Ok(ProjectionMode::SharedSelf),
            (None, None, None, None) => Ok(ProjectionMode::SharedEncDec),
            _ => Err(Error::Config(
                "projection presence pattern is not FULL, SHARED_SELF or SHARED_ENCDEC".into(),
            )),
        }
    }
}

impl ProjectionSet<Mat> {
    pub fn full(w_q: Mat, w_k: Mat, w_v: Mat, w_o: Mat) -> Self {
        Self {
            w_q: Some(w_q),
            w_k: Some(w_k),
            w_v: Some(w_v),
            w_o: Some(w_o),
        }
    }

    pub fn shared_self(w_v: Mat, w_o: Mat) -> Self {
        Self {
            w_q: None,
            w_k: None,
            w_v: Some(w_v),
            w_o: Some(w_o),
        }
    }

    pub fn shared_encdec() -> Self {
        Self {
            w_q: None,
            w_k: None,
            w_v: None,
            w_o: None,
        }
    }

    fn expect_full(&self) -> Result<(&Mat, &Mat, &Mat, &Mat)> {
        match (&self.w_q, &self.w_k, &self.w_v, &self.w_o) {
            (Some(q), Some(k), Some(v), Some(o)) => Ok((q, k, v, o)),
            _ => Err(Error::Config("expected a FULL projection set".into())),
        }
    }

    fn expect_value_output(&self) -> Result<(&Mat, &Mat)> {
        match (&self.w_v, &self.w_o) {
            (Some(v), Some(o)) => Ok((v, o)),
            _ => Err(Error::Config(
                "projection set has no value/output matrices".into(),
            )),
        }
    }
}

fn head_width(width: usize, heads: usize) -> Result<usize> {
    if heads == 0 || width % heads != 0 {
        return Err(Error::Config(format!(
            "width {width} is not divisible by {heads} heads"
        )));
    }
    Ok(width / heads)
}

/// `softmax(q·kᵀ / √d_k)`, optionally with a causal mask.
pub fn attn_weights(q: &Mat, k: &Mat, d_k: usize, causal: bool) -> Result<Mat> {
    if q.cols() != d_k || k.cols() != d_k {
        return shape_err(format!(
            "attn_weights: q {:?}, k {:?}, d_k {d_k}",
            q.shape(),
            k.shape()
        ));
    }
    let logits = matmul_t(q, k)?.scale(1.0 / (d_k as f64).sqrt());
    let mask = causal.then(|| Mask::causal(q.rows(), k.rows()));
    softmax_rows(&logits, mask.as_ref())
}

/// `A = S·V`.
pub fn attn_apply(s: &Mat, v: &Mat) -> Result<Mat> {
    if s.cols() != v.rows() {
        return shape_err(format!("attn_apply: S {:?}, V {:?}", s.shape(), v.shape()));
    }
    matmul(s, v)
}

fn apply_heads(s: &AttnWeights, v: &Mat) -> Result<Mat> {
    let dv = head_width(v.cols(), s.num_heads())?;
    let parts = s
        .heads()
        .iter()
        .enumerate()
        .map(|(i, sh)| attn_apply(sh, &v.col_block(i * dv, dv)))
        .collect::<Result<Vec<_>>>()?;
    Mat::hconcat(&parts)
}

/// Multi-head attention from `x_q` onto `x_kv`.
///
/// Without `shared_s` the layer must be FULL: it projects, splits into `h`
/// heads, attends per head, concatenates and applies `w_o`, returning the
/// weights it computed. With `shared_s` the layer must be SHARED_SELF: the
/// given weights are applied to this layer's own projected values and
/// returned unchanged.
pub fn multi_head(
    x_q: &Mat,
    x_kv: &Mat,
    proj: &ProjectionSet,
    h: usize,
    causal: bool,
    shared_s: Option<&AttnWeights>,
) -> Result<(Mat, AttnWeights)> {
    head_width(x_q.cols(), h)?;
    match (proj.mode()?, shared_s) {
        (ProjectionMode::Full, None) => {
            let (w_q, w_k, w_v, w_o) = proj.expect_full()?;
            let q = matmul(x_q, w_q)?;
            let k = matmul(x_kv, w_k)?;
            let v = matmul(x_kv, w_v)?;
            let dk = head_width(q.cols(), h)?;
            let heads = (0..h)
                .map(|i| {
                    attn_weights(
                        &q.col_block(i * dk, dk),
                        &k.col_block(i * dk, dk),
                        dk,
                        causal,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let s = AttnWeights::new(heads)?;
            let out = matmul(&apply_heads(&s, &v)?, w_o)?;
            Ok((out, s))
        }
        (ProjectionMode::SharedSelf, Some(s)) => {
            if s.num_heads() != h || s.queries() != x_q.rows() || s.keys() != x_kv.rows() {
                return shape_err(format!(
                    "shared weights {}x{}x{} do not fit {h} heads over {}x{}",
                    s.num_heads(),
                    s.queries(),
                    s.keys(),
                    x_q.rows(),
                    x_kv.rows()
                ));
            }
            let (w_v, w_o) = proj.expect_value_output()?;
            let v = matmul(x_kv, w_v)?;
            let out = matmul(&apply_heads(s, &v)?, w_o)?;
            Ok((out, s.clone()))
        }
        (mode, shared) => Err(Error::Config(format!(
            "{mode:?} projections cannot be used {} shared attention weights",
            if shared.is_some() { "with" } else { "without" }
        ))),
    }
}

/// Unmasked self-attention over several sentences stacked row-wise in `x`
/// (`lens` gives their row counts). Projections run over all rows at once;
/// attention stays within each sentence. `shared` plays the role of
/// `shared_s` in [`multi_head`], one entry per sentence.
pub fn multi_head_segments(
    x: &Mat,
    lens: &[usize],
    proj: &ProjectionSet,
    h: usize,
    shared: Option<&[AttnWeights]>,
) -> Result<(Mat, Vec<AttnWeights>)> {
    if lens.iter().sum::<usize>() != x.rows() {
        return shape_err(format!(
            "segment lengths {lens:?} do not cover {} rows",
            x.rows()
        ));
    }
    let dk = head_width(x.cols(), h)?;
    let offsets: Vec<usize> = lens
        .iter()
        .scan(0, |acc, &n| {
            let o = *acc;
            *acc += n;
            Some(o)
        })
        .collect();
    let (weights, v, w_o) = match (proj.mode()?, shared) {
        (ProjectionMode::Full, None) => {
            let (w_q, w_k, w_v, w_o) = proj.expect_full()?;
            let q = matmul(x, w_q)?;
            let k = matmul(x, w_k)?;
            let weights = offsets
                .iter()
                .zip(lens)
                .map(|(&o, &n)| {
                    let (q, k) = (q.row_block(o, n), k.row_block(o, n));
                    let heads = (0..h)
                        .map(|i| {
                            attn_weights(
                                &q.col_block(i * dk, dk),
                                &k.col_block(i * dk, dk),
                                dk,
                                false,
                            )
                        })
                        .collect::<Result<Vec<_>>>()?;
                    AttnWeights::new(heads)
                })
                .collect::<Result<Vec<_>>>()?;
            (weights, matmul(x, w_v)?, w_o)
        }
        (ProjectionMode::SharedSelf, Some(s)) => {
            if s.len() != lens.len()
                || s.iter()
                    .zip(lens)
                    .any(|(s, &n)| s.num_heads() != h || s.queries() != n || s.keys() != n)
            {
                return shape_err("shared weights do not fit the segments");
            }
            let (w_v, w_o) = proj.expect_value_output()?;
            (s.to_vec(), matmul(x, w_v)?, w_o)
        }
        (mode, shared) => {
            return Err(Error::Config(format!(
                "{mode:?} projections cannot be used {} shared attention weights",
                if shared.is_some() { "with" } else { "without" }
            )))
        }
    };
    let ctx = offsets
        .iter()
        .zip(lens)
        .zip(&weights)
        .map(|((&o, &n), s)| apply_heads(s, &v.row_block(o, n)))
        .collect::<Result<Vec<_>>>()?;
    Ok((matmul(&Mat::vstack(&ctx)?, w_o)?, weights))
}

/// Encoder keys and values projected once per sentence at an enc-dec block bottom.
#[derive(Clone, Debug, PartialEq)]
pub struct EncDecMemory {
    keys: Mat,
    values: Mat,
}

impl EncDecMemory {
    pub fn project(enc_out: &Mat, proj: &ProjectionSet) -> Result<Self> {
        let (_, w_k, w_v, _) = proj.expect_full()?;
        Ok(Self {
            keys: matmul(enc_out, w_k)?,
            values: matmul(enc_out, w_v)?,
        })
    }

    /// [`EncDecMemory::project`] for several sentences with one GEMM per matrix.
    pub fn project_batch(enc_outs: &[Mat], proj: &ProjectionSet) -> Result<Vec<Self>> {
        let (_, w_k, w_v, _) = proj.expect_full()?;
        if enc_outs.is_empty() {
            return Ok(Vec::new());
        }
        let stacked = Mat::vstack(enc_outs)?;
        let (keys, values) = (matmul(&stacked, w_k)?, matmul(&stacked, w_v)?);
        let mut start = 0;
        Ok(enc_outs
            .iter()
            .map(|m| {
                let n = m.rows();
                let mem = Self {
                    keys: keys.row_block(start, n),
                    values: values.row_block(start, n),
                };
                start += n;
                mem
            })
            .collect())
    }

    pub fn keys(&self) -> &Mat {
        &self.keys
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.rows() == 0
    }
}

/// Encoder-decoder attention at a block bottom: returns the post-`w_o` output
/// `A` (the tensor reused verbatim by the SHARED_ENCDEC layers above) and `S`.
pub fn encdec_block_bottom(
    x_q: &Mat,
    enc_out: &Mat,
    proj: &ProjectionSet,
    h: usize,
) -> Result<(Mat, AttnWeights)> {
    let memory = EncDecMemory::project(enc_out, proj)?;
    encdec_attend(x_q, &memory, proj, h)
}

/// Same as [`encdec_block_bottom`] but against pre-projected encoder memory.
pub fn encdec_attend(
    x_q: &Mat,
    memory: &EncDecMemory,
    proj: &ProjectionSet,
    h: usize,
) -> Result<(Mat, AttnWeights)> {
    let (w_q, _, _, w_o) = proj.expect_full()?;
    let q = matmul(x_q, w_q)?;
    let dk = head_width(q.cols(), h)?;
    let heads = (0..h)
        .map(|i| {
            attn_weights(
                &q.col_block(i * dk, dk),
                &memory.keys.col_block(i * dk, dk),
                dk,
                false,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    let s = AttnWeights::new(heads)?;
    let a = matmul(&apply_heads(&s, &memory.values)?, w_o)?;
    Ok((a, s))
}

#[derive(Clone, Debug)]
struct LayerCache {
    keys: Option<Vec<f64>>,
    values: Vec<f64>,
}

/// Per-session incremental decoding state.
///
/// Self-attention layers append one value row per step; only block bottoms
/// (FULL layers) also append key rows. Enc-dec block bottoms hold the
/// sentence's projected encoder memory, shared between beam hypotheses.
#[derive(Clone, Debug)]
pub struct KvCache {
    width: usize,
    layers: Vec<LayerCache>,
    encdec: Vec<Option<Arc<EncDecMemory>>>,
    steps: usize,
}

impl KvCache {
    /// `self_modes` gives the self-attention presence pattern of every layer;
    /// `encdec` holds projected memory at enc-dec block bottoms and `None` elsewhere.
    pub fn new(
        self_modes: &[ProjectionMode],
        width: usize,
        encdec: Vec<Option<Arc<EncDecMemory>>>,
    ) -> Result<Self> {
        let layers = self_modes
            .iter()
            .map(|mode| match mode {
                ProjectionMode::Full => Ok(LayerCache {
                    keys: Some(Vec::new()),
                    values: Vec::new(),
                }),
                ProjectionMode::SharedSelf => Ok(LayerCache {
                    keys: None,
                    values: Vec::new(),
                }),
                ProjectionMode::SharedEncDec => Err(Error::Config(
                    "SHARED_ENCDEC is not a self-attention mode".into(),
                )),
            })
            .collect::<Result<Vec<_>>>()?;
        if !encdec.is_empty() && encdec.len() != layers.len() {
            return Err(Error::Config(
                "enc-dec memory list does not match the layer count".into(),
            ));
        }
        Ok(Self {
            width,
            layers,
            encdec,
            steps: 0,
        })
    }

    /// Completed decode steps.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Rows currently cached for `layer` (values; keys match when present).
    pub fn layer_len(&self, layer: usize) -> usize {
        self.layers[layer].values.len() / self.width
    }

    pub fn keys(&self, layer: usize) -> Option<&[f64]> {
        self.layers[layer].keys.as_deref()
    }

    pub fn values(&self, layer: usize) -> &[f64] {
        &self.layers[layer].values
    }

    pub fn encdec_memory(&self, layer: usize) -> Option<&EncDecMemory> {
        self.encdec.get(layer).and_then(|m| m.as_deref())
    }

    pub(crate) fn append(
        &mut self,
        layer: usize,
        key: Option<&[f64]>,
        value: &[f64],
    ) -> Result<()> {
        if layer >= self.layers.len() {
            return Err(Error::State(format!("layer {layer} is not cached")));
        }
        let held = self.layer_len(layer);
        if held != self.steps {
            return Err(Error::State(format!(
                "layer {layer} holds {held} rows but {} steps are complete",
                self.steps
            )));
        }
        if value.len() != self.width || key.is_some_and(|k| k.len() != self.width) {
            return shape_err("cache row width mismatch");
        }
        let entry = &mut self.layers[layer];
        match (&mut entry.keys, key) {
            (Some(keys), Some(k)) => keys.extend_from_slice(k),
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::State(format!("layer {layer} expects a key row")))
            }
            (None, Some(_)) => return Err(Error::State(format!("layer {layer} holds no keys"))),
        }
        entry.values.extend_from_slice(value);
        Ok(())
    }

    /// Closes a decode step once every layer has received its row.
    pub fn commit_step(&mut self) -> Result<()> {
        let want = self.steps + 1;
        if let Some(layer) = (0..self.layers.len()).find(|&l| self.layer_len(l) != want) {
            return Err(Error::State(format!(
                "layer {layer} holds {} rows, expected {want}",
                self.layer_len(layer)
            )));
        }
        self.steps = want;
        Ok(())
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Attention of one query row over row-major `keys` (`n x width`); writes the
/// per-head distributions into `weights` (`heads x n`, head-major).
pub(crate) fn row_weights(
    q: &[f64],
    keys: &[f64],
    width: usize,
    heads: usize,
    weights: &mut [f64],
) {
    let n = keys.len() / width;
    let dk = width / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    for h in 0..heads {
        let qh = &q[h * dk..(h + 1) * dk];
        let w = &mut weights[h * n..(h + 1) * n];
        for (j, wj) in w.iter_mut().enumerate() {
            *wj = dot(qh, &keys[j * width + h * dk..j * width + (h + 1) * dk]) * scale;
        }
        softmax_in_place(w);
    }
}

/// `ctx[h] = Σ_j weights[h, j] · values[j, h]` for one query row.
pub(crate) fn row_context(
    weights: &[f64],
    values: &[f64],
    width: usize,
    heads: usize,
    ctx: &mut [f64],
) {
    let n = values.len() / width;
    let dv = width / heads;
    ctx.fill(0.0);
    for h in 0..heads {
        let out = &mut ctx[h * dv..(h + 1) * dv];
        for j in 0..n {
            let w = weights[h * n + j];
            let v = &values[j * width + h * dv..j * width + (h + 1) * dv];
            for (o, x) in out.iter_mut().zip(v) {
                *o += w * x;
            }
        }
    }
}

pub(crate) fn weights_from_rows(flat: Vec<f64>, heads: usize) -> AttnWeights {
    let n = flat.len() / heads;
    let heads = flat
        .chunks_exact(n)
        .map(|c| Mat::row_vector(c.to_vec()))
        .collect();
    AttnWeights { heads }
}

pub(crate) fn flatten_row_weights(s: &AttnWeights) -> Vec<f64> {
    s.heads()
        .iter()
        .flat_map(|h| h.as_slice().iter().copied())
        .collect()
}

/// One incremental self-attention step for `layer`.
///
/// `x_new` is the (already normalised) `1 x d_model` input of the newest
/// position. The projected value (and key, for FULL layers) is appended to the
/// cache, then the newest query attends over positions `1..=t`. SHARED_SELF
/// layers take their distribution from `shared_s_row` (one `1 x t` row per
/// head) and combine it with their own cached values. The caller closes the
/// step with [`KvCache::commit_step`] after all layers ran.
pub fn self_attn_step(
    cache: &mut KvCache,
    layer: usize,
    x_new: &Mat,
    proj: &ProjectionSet,
    h: usize,
    shared_s_row: Option<&AttnWeights>,
) -> Result<(Mat, AttnWeights)> {
    if x_new.rows() != 1 {
        return shape_err("self_attn_step takes a single position");
    }
    let width = cache.width();
    head_width(width, h)?;
    let mode = proj.mode()?;
    let t = cache.steps() + 1;
    match (mode, shared_s_row) {
        (ProjectionMode::Full, None) => {
            let (w_q, w_k, w_v, w_o) = proj.expect_full()?;
            let k = matmul(x_new, w_k)?;
            let v = matmul(x_new, w_v)?;
            cache.append(layer, Some(k.as_slice()), v.as_slice())?;
            let q = matmul(x_new, w_q)?;
            let mut weights = vec![0.0; h * t];
            row_weights(
                q.as_slice(),
                cache.keys(layer).unwrap_or_default(),
                width,
                h,
                &mut weights,
            );
            let mut ctx = vec![0.0; width];
            row_context(&weights, cache.values(layer), width, h, &mut ctx);
            let out = matmul(&Mat::row_vector(ctx), w_o)?;
            Ok((out, weights_from_rows(weights, h)))
        }
        (ProjectionMode::SharedSelf, Some(s)) => {
            if s.num_heads() != h || s.queries() != 1 || s.keys() != t {
                return Err(Error::State(format!(
                    "shared row covers {} keys at step {t}",
                    s.keys()
                )));
            }
            let (w_v, w_o) = proj.expect_value_output()?;
            let v = matmul(x_new, w_v)?;
            cache.append(layer, None, v.as_slice())?;
            let mut ctx = vec![0.0; width];
            row_context(
                &flatten_row_weights(s),
                cache.values(layer),
                width,
                h,
                &mut ctx,
            );
            let out = matmul(&Mat::row_vector(ctx), w_o)?;
            Ok((out, s.clone()))
        }
        (mode, shared) => Err(Error::Config(format!(
            "{mode:?} self-attention step {} shared weights",
            if shared.is_some() { "given" } else { "missing" }
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_gaussian, Rng};

    fn rand_proj(d: usize, rng: &mut Rng) -> ProjectionSet {
        let s = (d as f64).powf(-0.5);
        ProjectionSet::full(
            seeded_gaussian(d, d, s, rng),
            seeded_gaussian(d, d, s, rng),
            seeded_gaussian(d, d, s, rng),
            seeded_gaussian(d, d, s, rng),
        )
    }

    /// Element-by-element softmax(q kᵀ/√d) with explicit loops.
    fn naive_weights(q: &Mat, k: &Mat, causal: bool) -> Mat {
        let d = q.cols() as f64;
        let mut out = Mat::zeros(q.rows(), k.rows());
        for i in 0..q.rows() {
            let visible: Vec<usize> = (0..k.rows()).filter(|&j| !causal || j <= i).collect();
            let logits: Vec<f64> = visible
                .iter()
                .map(|&j| {
                    (0..q.cols())
                        .map(|c| q.get(i, c) * k.get(j, c))
                        .sum::<f64>()
                        / d.sqrt()
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for (&j, l) in visible.iter().zip(&logits) {
                out.set(i, j, l.exp() / z);
            }
        }
        out
    }

    fn naive_mm(a: &Mat, b: &Mat) -> Mat {
        let mut c = Mat::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                c.set(i, j, (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum());
            }
        }
        c
    }

    #[test]
    fn single_position_weight_is_one() {
        let q = Mat::row_vector(vec![0.3, -0.2]);
        let s = attn_weights(&q, &q, 2, true).unwrap();
        assert_eq!(s.as_slice(), &[1.0]);
    }

    #[test]
    fn zero_query_is_uniform() {
        let mut rng = Rng::new(1);
        let q = Mat::zeros(2, 3);
        let k = seeded_gaussian(4, 3, 1.0, &mut rng);
        let s = attn_weights(&q, &k, 3, false).unwrap();
        assert!(s.as_slice().iter().all(|&x| (x - 0.25).abs() <= 1e-15));
    }

    #[test]
    fn causal_weights_match_naive() {
        let mut rng = Rng::new(2);
        let q = seeded_gaussian(3, 8, 1.0, &mut rng);
        let k = seeded_gaussian(3, 8, 1.0, &mut rng);
        let s = attn_weights(&q, &k, 8, true).unwrap();
        assert!(s.max_abs_diff(&naive_weights(&q, &k, true)) <= 1e-12);
        for i in 0..3 {
            for j in i + 1..3 {
                assert_eq!(s.get(i, j), 0.0);
            }
        }
        assert!(matches!(
            attn_weights(&q, &k, 4, true),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn apply_identity_and_mean() {
        let mut rng = Rng::new(3);
        let v = seeded_gaussian(2, 5, 1.0, &mut rng);
        assert_eq!(attn_apply(&Mat::identity(2), &v).unwrap(), v);
        let s = Mat::row_vector(vec![0.5, 0.5]);
        let a = attn_apply(&s, &v).unwrap();
        for j in 0..5 {
            assert!((a.get(0, j) - 0.5 * (v.get(0, j) + v.get(1, j))).abs() <= 1e-15);
        }
        assert!(matches!(
            attn_apply(&Mat::identity(3), &v),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn apply_stays_inside_value_envelope() {
        let mut rng = Rng::new(4);
        let q = seeded_gaussian(5, 4, 2.0, &mut rng);
        let k = seeded_gaussian(6, 4, 2.0, &mut rng);
        let v = seeded_gaussian(6, 3, 1.0, &mut rng);
        let a = attn_apply(&attn_weights(&q, &k, 4, false).unwrap(), &v).unwrap();
        for c in 0..3 {
            let col: Vec<f64> = (0..6).map(|j| v.get(j, c)).collect();
            let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for i in 0..5 {
                assert!(a.get(i, c) >= lo - 1e-12 && a.get(i, c) <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn identity_projections_single_position() {
        let x = Mat::row_vector(vec![0.5, -1.5, 2.0]);
        let i = Mat::identity(3);
        let proj = ProjectionSet::full(i.clone(), i.clone(), i.clone(), i);
        let (out, s) = multi_head(&x, &x, &proj, 1, true, None).unwrap();
        assert_eq!(out, x);
        assert_eq!(s.head(0).as_slice(), &[1.0]);
    }

    #[test]
    fn shared_identity_weights_pass_values_through() {
        let mut rng = Rng::new(5);
        let x = seeded_gaussian(3, 4, 1.0, &mut rng);
        let proj = ProjectionSet::shared_self(Mat::identity(4), Mat::identity(4));
        let s = AttnWeights::identity(2, 3);
        let (out, back) = multi_head(&x, &x, &proj, 2, true, Some(&s)).unwrap();
        assert!(out.max_abs_diff(&x) <= 1e-15);
        assert_eq!(back, s);
    }

    #[test]
    fn two_heads_match_per_head_decomposition() {
        let mut rng = Rng::new(6);
        let d = 6;
        let x = seeded_gaussian(4, d, 1.0, &mut rng);
        let proj = rand_proj(d, &mut rng);
        let (out, s) = multi_head(&x, &x, &proj, 2, true, None).unwrap();

        let (wq, wk, wv, wo) = proj.expect_full().unwrap();
        let mut ctx_parts = Vec::new();
        for h in 0..2 {
            let cols = |w: &Mat| w.col_block(h * 3, 3);
            let q = naive_mm(&x, &cols(wq));
            let k = naive_mm(&x, &cols(wk));
            let v = naive_mm(&x, &cols(wv));
            let sh = naive_weights(&q, &k, true);
            assert!(sh.max_abs_diff(s.head(h)) <= 1e-12);
            ctx_parts.push(naive_mm(&sh, &v));
        }
        let want = naive_mm(&Mat::hconcat(&ctx_parts).unwrap(), wo);
        assert!(out.max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn inconsistent_presence_is_rejected() {
        let mut rng = Rng::new(7);
        let x = seeded_gaussian(2, 4, 1.0, &mut rng);
        let full = rand_proj(4, &mut rng);
        let s = AttnWeights::identity(2, 2);
        assert!(matches!(
            multi_head(&x, &x, &full, 2, true, Some(&s)),
            Err(Error::Config(_))
        ));
        let shared = ProjectionSet::shared_self(Mat::identity(4), Mat::identity(4));
        assert!(matches!(
            multi_head(&x, &x, &shared, 2, true, None),
            Err(Error::Config(_))
        ));
        let broken = ProjectionSet {
            w_q: Some(Mat::identity(4)),
            w_k: None,
            w_v: None,
            w_o: None,
        };
        assert!(matches!(broken.mode(), Err(Error::Config(_))));
    }

    #[test]
    fn first_step_weights_are_one() {
        let mut rng = Rng::new(8);
        let d = 4;
        let proj = rand_proj(d, &mut rng);
        let mut cache = KvCache::new(&[ProjectionMode::Full], d, Vec::new()).unwrap();
        let x = seeded_gaussian(1, d, 1.0, &mut rng);
        let (out, s) = self_attn_step(&mut cache, 0, &x, &proj, 2, None).unwrap();
        for h in 0..2 {
            assert_eq!(s.head(h).as_slice(), &[1.0]);
        }
        let (_, _, wv, wo) = proj.expect_full().unwrap();
        let want = matmul(&matmul(&x, wv).unwrap(), wo).unwrap();
        assert!(out.max_abs_diff(&want) <= 1e-14);
    }

    #[test]
    fn incremental_steps_match_full_forward() {
        let mut rng = Rng::new(9);
        let d = 8;
        let bottom = rand_proj(d, &mut rng);
        let upper = ProjectionSet::shared_self(
            seeded_gaussian(d, d, 0.3, &mut rng),
            seeded_gaussian(d, d, 0.3, &mut rng),
        );
        let x = seeded_gaussian(6, d, 1.0, &mut rng);
        let (full_out, full_s) = multi_head(&x, &x, &bottom, 2, true, None).unwrap();
        let (shared_out, _) = multi_head(&x, &x, &upper, 2, true, Some(&full_s)).unwrap();

        let mut cache = KvCache::new(
            &[ProjectionMode::Full, ProjectionMode::SharedSelf],
            d,
            Vec::new(),
        )
        .unwrap();
        for t in 0..6 {
            let row = x.row_block(t, 1);
            let (out, s) = self_attn_step(&mut cache, 0, &row, &bottom, 2, None).unwrap();
            assert!(out.max_abs_diff(&full_out.row_block(t, 1)) <= 1e-9);
            let (out2, s2) = self_attn_step(&mut cache, 1, &row, &upper, 2, Some(&s)).unwrap();
            assert_eq!(s2, s);
            assert!(out2.max_abs_diff(&shared_out.row_block(t, 1)) <= 1e-9);
            cache.commit_step().unwrap();
        }
        assert!(cache.keys(1).is_none());
        assert_eq!(cache.layer_len(1), 6);
    }

    #[test]
    fn cache_length_mismatch_is_a_state_error() {
        let mut rng = Rng::new(10);
        let proj = rand_proj(4, &mut rng);
        let mut cache =
            KvCache::new(&[ProjectionMode::Full, ProjectionMode::Full], 4, Vec::new()).unwrap();
        let x = seeded_gaussian(1, 4, 1.0, &mut rng);
        self_attn_step(&mut cache, 0, &x, &proj, 2, None).unwrap();
        // layer 1 never ran this step
        assert!(matches!(cache.commit_step(), Err(Error::State(_))));
        assert!(matches!(
            self_attn_step(&mut cache, 0, &x, &proj, 2, None),
            Err(Error::State(_))
        ));
    }

    #[test]
    fn single_source_position_encdec() {
        let mut rng = Rng::new(11);
        let d = 4;
        let proj = rand_proj(d, &mut rng);
        let enc = seeded_gaussian(1, d, 1.0, &mut rng);
        let xq = seeded_gaussian(3, d, 1.0, &mut rng);
        let (a, s) = encdec_block_bottom(&xq, &enc, &proj, 2).unwrap();
        for h in 0..2 {
            assert!(s.head(h).as_slice().iter().all(|&w| w == 1.0));
        }
        let (_, _, wv, wo) = proj.expect_full().unwrap();
        let row = matmul(&matmul(&enc, wv).unwrap(), wo).unwrap();
        for i in 0..3 {
            assert!(a.row_block(i, 1).max_abs_diff(&row) <= 1e-14);
        }
    }

    #[test]
    fn encdec_matches_naive() {
        let mut rng = Rng::new(12);
        let d = 4;
        let proj = rand_proj(d, &mut rng);
        let enc = seeded_gaussian(3, d, 1.0, &mut rng);
        let xq = seeded_gaussian(2, d, 1.0, &mut rng);
        let (a, _) = encdec_block_bottom(&xq, &enc, &proj, 2).unwrap();
        let (wq, wk, wv, wo) = proj.expect_full().unwrap();
        let mut parts = Vec::new();
        for h in 0..2 {
            let q = naive_mm(&xq, &wq.col_block(h * 2, 2));
            let k = naive_mm(&enc, &wk.col_block(h * 2, 2));
            let v = naive_mm(&enc, &wv.col_block(h * 2, 2));
            parts.push(naive_mm(&naive_weights(&q, &k, false), &v));
        }
        let want = naive_mm(&Mat::hconcat(&parts).unwrap(), wo);
        assert!(a.max_abs_diff(&want) <= 1e-12);
    }
}
