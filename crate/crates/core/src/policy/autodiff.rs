//! Reverse-mode differentiation over a linear tape of matrix operations.

use crate::error::Result;
use crate::tensor::{matmul, matmul_t, t_matmul, Mat};

/// Deliberately wrong backward rules, used to show that the gradient check
/// catches real mistakes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    /// Layer-norm gain gradient scaled by 1.001.
    LayerNormGain,
    /// Softmax backward drops the row-sum correction term.
    Softmax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    /// Adds a `1 x n` row to every row.
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    /// Row softmax; with `causal`, entry `(i, j)` for `j > i` is excluded.
    Softmax(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<u32>),
    /// `weight · Σ_t loss_t`; `probs` are the softmax outputs.
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        smoothing: f64,
        weight: f64,
        probs: Mat,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

pub(crate) struct Tape {
    nodes: Vec<Node>,
    fault: Option<BackwardFault>,
}

impl Tape {
    pub fn new(fault: Option<BackwardFault>) -> Self {
        Self {
            nodes: Vec::new(),
            fault,
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_t(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMulT(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let mut v = self.value(x).clone();
        v.add_row_assign(self.value(row))?;
        Ok(self.push(v, Op::AddRow(x, row)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let v = self.value(x).scale(c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z.max(0.0));
        self.push(v, Op::Relu(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Mat::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let r = xv.row(i);
            let mean = r.iter().sum::<f64>() / cols as f64;
            let var = r.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, z) in xhat.row_mut(i).iter_mut().zip(r) {
                *o = (z - mean) * inv;
            }
            inv_std.push(inv);
        }
        let (g, b) = (self.value(gain).as_slice(), self.value(bias).as_slice());
        let mut out = xhat.clone();
        for i in 0..rows {
            for ((o, gj), bj) in out.row_mut(i).iter_mut().zip(g).zip(b) {
                *o = *o * gj + bj;
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        )
    }

    /// Row softmax; `causal` masks keys after the query position.
    pub fn softmax(&mut self, x: Var, causal: bool) -> Var {
        let mut v = self.value(x).clone();
        for i in 0..v.rows() {
            let row = v.row_mut(i);
            let visible = if causal {
                (i + 1).min(row.len())
            } else {
                row.len()
            };
            let max = row[..visible]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for e in &mut row[..visible] {
                *e = (*e - max).exp();
                z += *e;
            }
            for e in &mut row[..visible] {
                *e /= z;
            }
            row[visible..].fill(0.0);
        }
        self.push(v, Op::Softmax(x))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Var {
        let v = self.value(x).col_block(start, width);
        self.push(v, Op::SliceCols(x, start))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Result<Var> {
        let mats: Vec<Mat> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let v = Mat::hconcat(&mats)?;
        Ok(self.push(v, Op::ConcatCols(parts)))
    }

    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Var {
        let t = self.value(table);
        let mut v = Mat::zeros(ids.len(), t.cols());
        for (i, &id) in ids.iter().enumerate() {
            v.row_mut(i).copy_from_slice(t.row(id as usize));
        }
        self.push(v, Op::Gather(table, ids.to_vec()))
    }

    /// Label-smoothed cross-entropy summed over rows and multiplied by `weight`.
    /// Returns the node and the unweighted sum.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        smoothing: f64,
        weight: f64,
    ) -> (Var, f64) {
        let l = self.value(logits);
        let vocab = l.cols();
        let mut probs = Mat::zeros(l.rows(), vocab);
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            let row = l.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            let nll = lse - row[t as usize];
            let mean_nll = lse - row.iter().sum::<f64>() / vocab as f64;
            total += (1.0 - smoothing) * nll + smoothing * mean_nll;
            for (p, z) in probs.row_mut(i).iter_mut().zip(row) {
                *p = (z - lse).exp();
            }
        }
        let node = self.push(
            Mat::filled(1, 1, weight * total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                weight,
                probs,
            },
        );
        (node, total)
    }

    /// Gradients of the `1 x 1` node `root` with respect to every node;
    /// `None` where the root does not depend on the node.
    pub fn backward(&self, root: Var) -> Result<Vec<Option<Mat>>> {
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::filled(1, 1, 1.0));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, matmul_t(&g, self.value(*b))?)?;
                    accumulate(&mut grads, *b, t_matmul(self.value(*a), &g)?)?;
                }
                Op::MatMulT(a, b) => {
                    accumulate(&mut grads, *a, matmul(&g, self.value(*b))?)?;
                    accumulate(&mut grads, *b, t_matmul(&g, self.value(*a))?)?;
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone())?;
                    accumulate(&mut grads, *b, g.clone())?;
                }
                Op::AddRow(x, row) => {
                    accumulate(&mut grads, *row, column_sums(&g))?;
                    accumulate(&mut grads, *x, g.clone())?;
                }
                Op::Scale(x, c) => accumulate(&mut grads, *x, g.scale(*c))?,
                Op::Relu(x) => {
                    let mut dx = g.clone();
                    for (d, y) in dx.as_mut_slice().iter_mut().zip(node.value.as_slice()) {
                        if *y <= 0.0 {
                            *d = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let gv = self.value(*gain).as_slice();
                    let (rows, cols) = g.shape();
                    let mut dgain = column_sums(&mul(&g, xhat));
                    if self.fault == Some(BackwardFault::LayerNormGain) {
                        dgain = dgain.scale(1.001);
                    }
                    accumulate(&mut grads, *bias, column_sums(&g))?;
                    accumulate(&mut grads, *gain, dgain)?;
                    let mut dx = Mat::zeros(rows, cols);
                    for i in 0..rows {
                        let dxhat: Vec<f64> = g.row(i).iter().zip(gv).map(|(a, b)| a * b).collect();
                        let xh = xhat.row(i);
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dx =
                            dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for (j, o) in dx.row_mut(i).iter_mut().enumerate() {
                            *o = inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::Softmax(x) => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.rows(), y.cols());
                    let drop_correction = self.fault == Some(BackwardFault::Softmax);
                    for i in 0..y.rows() {
                        let (yr, gr) = (y.row(i), g.row(i));
                        let dot = if drop_correction {
                            0.0
                        } else {
                            yr.iter().zip(gr).map(|(a, b)| a * b).sum()
                        };
                        for ((o, yj), gj) in dx.row_mut(i).iter_mut().zip(yr).zip(gr) {
                            *o = yj * (gj - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::SliceCols(x, start) => {
                    let src = self.value(*x);
                    let mut dx = Mat::zeros(src.rows(), src.cols());
                    let w = g.cols();
                    for i in 0..g.rows() {
                        dx.row_mut(i)[*start..*start + w].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut grads, *x, dx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        accumulate(&mut grads, p, g.col_block(start, w))?;
                        start += w;
                    }
                }
                Op::Gather(table, ids) => {
                    let t = self.value(*table);
                    let mut dt = Mat::zeros(t.rows(), t.cols());
                    for (i, &id) in ids.iter().enumerate() {
                        for (o, d) in dt.row_mut(id as usize).iter_mut().zip(g.row(i)) {
                            *o += d;
                        }
                    }
                    accumulate(&mut grads, *table, dt)?;
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    smoothing,
                    weight,
                    probs,
                } => {
                    let scale = g.get(0, 0) * weight;
                    let vocab = probs.cols() as f64;
                    let mut dl = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let row = dl.row_mut(i);
                        for p in row.iter_mut() {
                            *p = scale * (*p - smoothing / vocab);
                        }
                        row[t as usize] -= scale * (1.0 - smoothing);
                    }
                    accumulate(&mut grads, *logits, dl)?;
                }
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = vec![0.0; g.cols()];
    for i in 0..g.rows() {
        for (o, v) in out.iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    Mat::row_vector(out)
}

fn mul(a: &Mat, b: &Mat) -> Mat {
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| x * y)
        .collect();
    Mat::from_vec(a.rows(), a.cols(), data).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{seeded_gaussian, Rng};

    /// Central differences of `f` at every entry of `x`.
    fn numeric(x: &Mat, f: impl Fn(&Mat) -> f64) -> Mat {
        let mut g = Mat::zeros(x.rows(), x.cols());
        for i in 0..x.as_slice().len() {
            let mut plus = x.clone();
            plus.as_mut_slice()[i] += 1e-6;
            let mut minus = x.clone();
            minus.as_mut_slice()[i] -= 1e-6;
            g.as_mut_slice()[i] = (f(&plus) - f(&minus)) / 2e-6;
        }
        g
    }

    #[test]
    fn composite_graph_gradients_match_central_differences() {
        let mut rng = Rng::new(7);
        let x0 = seeded_gaussian(3, 4, 1.0, &mut rng);
        let w0 = seeded_gaussian(4, 4, 1.0, &mut rng);
        let gain0 = seeded_gaussian(1, 4, 1.0, &mut rng);
        let targets = [1u32, 3, 0];
        let build = |x: &Mat, w: &Mat, gain: &Mat| {
            let mut t = Tape::new(None);
            let (xv, wv, gv) = (t.leaf(x.clone()), t.leaf(w.clone()), t.leaf(gain.clone()));
            let bv = t.leaf(Mat::filled(1, 4, 0.1));
            let n = t.layer_norm(xv, gv, bv, 1e-6);
            let h = t.matmul(n, wv).unwrap();
            let s = t.matmul_t(h, n).unwrap();
            let p = t.softmax(s, true);
            let c = t.matmul(p, h).unwrap();
            let a = t.slice_cols(c, 1, 2);
            let b = t.slice_cols(h, 0, 2);
            let joined = t.concat_cols(vec![a, b]).unwrap();
            let r = t.relu(joined);
            let sc = t.scale(r, 0.5);
            let out = t.add(sc, joined).unwrap();
            let (loss, _) = t.cross_entropy(out, &targets, 0.1, 1.0);
            (t, loss, [xv, wv, gv])
        };
        let (tape, loss, vars) = build(&x0, &w0, &gain0);
        let grads = tape.backward(loss).unwrap();
        let value = |x: &Mat, w: &Mat, g: &Mat| {
            let (t, l, _) = build(x, w, g);
            t.value(l).get(0, 0)
        };
        let checks = [
            (numeric(&x0, |x| value(x, &w0, &gain0)), vars[0]),
            (numeric(&w0, |w| value(&x0, w, &gain0)), vars[1]),
            (numeric(&gain0, |g| value(&x0, &w0, g)), vars[2]),
        ];
        for (num, var) in checks {
            let ana = grads[var.0].as_ref().unwrap();
            assert!(ana.max_abs_diff(&num) < 1e-7, "{}", ana.max_abs_diff(&num));
        }
    }

    #[test]
    fn gather_scatters_into_repeated_rows() {
        let mut t = Tape::new(None);
        let table = t.leaf(Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 5.0]]).unwrap());
        let logits = t.gather(table, &[1, 1, 0]);
        let (loss, _) = t.cross_entropy(logits, &[0, 0, 1], 0.0, 1.0);
        let grads = t.backward(loss).unwrap();
        let g = grads[table.0].as_ref().unwrap();
        let p1 = 1.0 / (1.0 + (2.0f64).exp());
        let p0 = 1.0 / (1.0 + 1.0f64.exp());
        // row 1 appears twice with target 0, row 0 once with target 1
        assert!((g.get(1, 0) - 2.0 * (p1 - 1.0)).abs() < 1e-12);
        assert!((g.get(0, 1) - (1.0 - p0 - 1.0)).abs() < 1e-12);
    }
}
