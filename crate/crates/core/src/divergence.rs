//! Jensen-Shannon comparison of attention distributions across layers.

use std::f64::consts::LN_2;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::AttnWeights;
use crate::error::{shape_err, Error, Result};
use crate::tensor::Mat;

const RANGE_SLACK: f64 = 1e-12;

fn check_pair(p: &[f64], q: &[f64]) -> Result<()> {
    if p.len() != q.len() {
        return shape_err(format!(
            "distributions of length {} and {}",
            p.len(),
            q.len()
        ));
    }
    Ok(())
}

/// `KL(p‖q)` in nats, with `0·ln(0/x) = 0`.
pub fn kl(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    let mut sum = 0.0;
    for (i, (&pi, &qi)) in p.iter().zip(q).enumerate() {
        if pi > 0.0 {
            if qi <= 0.0 {
                return Err(Error::Support { index: i });
            }
            sum += pi * (pi / qi).ln();
        }
    }
    Ok(sum.max(0.0))
}

/// Jensen-Shannon divergence in nats, within `[0, ln 2]`.
pub fn js(p: &[f64], q: &[f64]) -> Result<f64> {
    check_pair(p, q)?;
    Ok(js_unchecked(p, q))
}

/// Symmetric by construction: every term is evaluated on the unordered pair.
fn js_unchecked(p: &[f64], q: &[f64]) -> f64 {
    let term = |a: f64, m: f64| if a > 0.0 { a * (a / m).ln() } else { 0.0 };
    let mut sum = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let m = 0.5 * (lo + hi);
        sum += term(lo, m) + term(hi, m);
    }
    (0.5 * sum).clamp(0.0, LN_2)
}

fn check_weights(a: &AttnWeights, b: &AttnWeights) -> Result<()> {
    if a.num_heads() != b.num_heads() || a.queries() != b.queries() || a.keys() != b.keys() {
        return shape_err(format!(
            "attention weights {}x{}x{} vs {}x{}x{}",
            a.num_heads(),
            a.queries(),
            a.keys(),
            b.num_heads(),
            b.queries(),
            b.keys()
        ));
    }
    Ok(())
}

/// Sum over heads and query rows of the row-wise JS divergence.
fn js_row_sum(a: &AttnWeights, b: &AttnWeights) -> f64 {
    let mut acc = Sum::default();
    for (ha, hb) in a.heads().iter().zip(b.heads()) {
        for i in 0..ha.rows() {
            acc.add(js_unchecked(ha.row(i), hb.row(i)));
        }
    }
    acc.value()
}

/// JS between matching query rows, averaged over rows and then over heads.
///
/// Masked keys are zero in both inputs and contribute nothing, so the
/// comparison runs over the unmasked support.
pub fn head_avg_js(a: &AttnWeights, b: &AttnWeights) -> Result<f64> {
    check_weights(a, b)?;
    Ok(js_row_sum(a, b) / (a.num_heads() * a.queries()) as f64)
}

/// Neumaier-compensated running sum.
#[derive(Default)]
struct Sum {
    sum: f64,
    comp: f64,
}

impl Sum {
    fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnKind {
    #[serde(rename = "self")]
    SelfAttn,
    EncDec,
    Enc,
}

impl AttnKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttnKind::SelfAttn => "self",
            AttnKind::EncDec => "encdec",
            AttnKind::Enc => "enc",
        }
    }
}

impl FromStr for AttnKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self" => Ok(AttnKind::SelfAttn),
            "encdec" => Ok(AttnKind::EncDec),
            "enc" => Ok(AttnKind::Enc),
            other => Err(Error::Input(format!(
                "unknown attention kind {other:?} (self, encdec or enc)"
            ))),
        }
    }
}

/// Symmetric layer-by-layer JS matrix with a zero diagonal.
#[derive(Clone, Debug, PartialEq)]
pub struct JsMatrix {
    kind: AttnKind,
    values: Mat,
}

#[derive(Serialize, Deserialize)]
struct JsMatrixJson {
    layers: usize,
    kind: AttnKind,
    values: Vec<Vec<f64>>,
}

impl JsMatrix {
    /// Validates symmetry, the zero diagonal and the `[0, ln 2]` range.
    pub fn new(kind: AttnKind, values: Mat) -> Result<Self> {
        let (r, c) = values.shape();
        if r != c || r == 0 {
            return shape_err(format!(
                "JS matrix must be square and non-empty, got {r}x{c}"
            ));
        }
        for i in 0..r {
            if values.get(i, i) != 0.0 {
                return Err(Error::Range(format!(
                    "JS diagonal entry {i} is {}",
                    values.get(i, i)
                )));
            }
            for j in 0..r {
                let v = values.get(i, j);
                if !(0.0..=LN_2 + RANGE_SLACK).contains(&v) {
                    return Err(Error::Range(format!(
                        "JS entry ({i}, {j}) = {v} outside [0, ln 2]"
                    )));
                }
                if v != values.get(j, i) {
                    return Err(Error::Range(format!(
                        "JS matrix is not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { kind, values })
    }

    pub fn layers(&self) -> usize {
        self.values.rows()
    }

    pub fn kind(&self) -> AttnKind {
        self.kind
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    /// One row per layer, comma-separated, six decimals, no header.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.layers() {
            let row: Vec<String> = self
                .values
                .row(i)
                .iter()
                .map(|v| format!("{v:.6}"))
                .collect();
            let _ = writeln!(out, "{}", row.join(","));
        }
        out
    }

    pub fn from_csv(text: &str, kind: AttnKind) -> Result<Self> {
        let rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(n, line)| {
                line.split(',')
                    .map(|f| {
                        f.trim().parse::<f64>().map_err(|_| {
                            Error::Format(format!("line {}: {:?} is not a number", n + 1, f.trim()))
                        })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let values =
            Mat::from_rows(&rows).map_err(|e| Error::Format(format!("ragged JS matrix: {e}")))?;
        Self::new(kind, values).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = JsMatrixJson {
            layers: self.layers(),
            kind: self.kind,
            values: (0..self.layers())
                .map(|i| self.values.row(i).to_vec())
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: JsMatrixJson = serde_json::from_str(text)
            .map_err(|e| Error::Format(format!("JS matrix JSON: {e}")))?;
        if doc.values.len() != doc.layers {
            return Err(Error::Format(format!(
                "\"layers\" is {} but {} rows given",
                doc.layers,
                doc.values.len()
            )));
        }
        let values = Mat::from_rows(&doc.values)
            .map_err(|e| Error::Format(format!("ragged JS matrix: {e}")))?;
        Self::new(doc.kind, values).map_err(|e| Error::Format(e.to_string()))
    }
}

/// Token-weighted JS matrix over a corpus.
///
/// `corpus[s][l]` holds layer `l`'s attention weights for sentence `s`. Entry
/// `(i, j)` pools every head and query row of every sentence, so longer
/// sentences weigh more. The result does not depend on sentence order.
pub fn js_matrix(corpus: &[Vec<AttnWeights>], kind: AttnKind) -> Result<JsMatrix> {
    let layers = match corpus.first() {
        Some(first) if !first.is_empty() => first.len(),
        _ => {
            return Err(Error::Input(
                "JS matrix needs at least one sentence with one layer".into(),
            ))
        }
    };
    let mut rows = 0usize;
    for (s, sentence) in corpus.iter().enumerate() {
        if sentence.len() != layers {
            return Err(Error::Input(format!(
                "sentence {s} supplies {} layers, expected {layers}",
                sentence.len()
            )));
        }
        for w in &sentence[1..] {
            check_weights(&sentence[0], w)?;
        }
        rows += sentence[0].num_heads() * sentence[0].queries();
    }
    if rows == 0 {
        return Err(Error::Input("corpus holds no query positions".into()));
    }

    let mut values = Mat::zeros(layers, layers);
    let mut terms = Vec::with_capacity(corpus.len());
    for i in 0..layers {
        for j in i + 1..layers {
            terms.clear();
            terms.extend(corpus.iter().map(|s| js_row_sum(&s[i], &s[j])));
            terms.sort_by(f64::total_cmp);
            let mut acc = Sum::default();
            for &t in &terms {
                acc.add(t);
            }
            let v = (acc.value() / rows as f64).clamp(0.0, LN_2);
            values.set(i, j, v);
            values.set(j, i, v);
        }
    }
    JsMatrix::new(kind, values)
}

/// Layer similarity `μ = ln 2 − JS`.
#[derive(Clone, Debug, PartialEq)]
pub struct MuMatrix {
    values: Mat,
}

impl MuMatrix {
    pub fn layers(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values.get(i, j)
    }

    pub fn values(&self) -> &Mat {
        &self.values
    }
}

pub fn mu_matrix(js: &JsMatrix) -> MuMatrix {
    MuMatrix {
        values: js.values().map(|v| LN_2 - v),
    }
}

/// Mean off-diagonal similarity of the block of layers `m..=n` (0-based).
pub fn block_sim(mu: &MuMatrix, m: usize, n: usize) -> Result<f64> {
    if m >= n || n >= mu.layers() {
        return Err(Error::Range(format!(
            "block {m}..={n} needs m < n < {} layers",
            mu.layers()
        )));
    }
    let mut acc = Sum::default();
    for i in m..=n {
        for j in m..=n {
            if i != j {
                acc.add(mu.get(i, j));
            }
        }
    }
    let size = (n - m + 1) as f64;
    Ok(acc.value() / (size * (size - 1.0)))
}
