//! A small reverse-mode autodiff tape over dense `f64` matrices.
//!
//! Every model in the crate processes one example at a time, so all values
//! are 2-D (`positions x features`). Parameters are borrowed from a
//! [`ParamSet`] and their gradients come back as one flat vector in the
//! parameter layout, which is exactly what per-example clipping consumes.

use std::borrow::Cow;
use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

use crate::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Gather {
        src: Var,
        ids: Vec<usize>,
    },
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ColSlice {
        src: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Softmax(Var),
    Normalize {
        src: Var,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Array2<f64>,
    },
    SumSquares(Var),
    Sum(Var),
    MeanRows(Var),
    NegSqDist(Var, Var),
    PartialNoise {
        src: Var,
        scales: Vec<Option<f64>>,
    },
}

struct Node<'a> {
    value: Cow<'a, Array2<f64>>,
    op: Op,
}

/// Recording tape. Values are computed eagerly on construction.
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    param_vars: HashMap<usize, Var>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

const NORM_EPS: f64 = 1e-5;

fn gelu_parts(x: f64) -> (f64, f64) {
    // tanh approximation
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            param_vars: HashMap::new(),
        }
    }

    fn push(&mut self, value: Cow<'a, Array2<f64>>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.push(Cow::Owned(value), op)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.owned(value, Op::Leaf)
    }

    /// Borrowed parameter leaf; repeated calls return the same node.
    pub fn param(&mut self, params: &'a ParamSet, idx: usize) -> Var {
        if let Some(v) = self.param_vars.get(&idx) {
            return *v;
        }
        let v = self.push(Cow::Borrowed(params.value(idx)), Op::Param);
        self.param_vars.insert(idx, v);
        v
    }

    /// Rows of `src` selected by `ids` (embedding lookup).
    pub fn gather(&mut self, src: Var, ids: &[usize]) -> Var {
        let table = self.value(src);
        let mut out = Array2::zeros((ids.len(), table.ncols()));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&table.row(id));
        }
        self.owned(
            out,
            Op::Gather {
                src,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.owned(out, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(&self.value(b).t());
        self.owned(out, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.owned(out, Op::Add(a, b))
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) + self.value(row);
        self.owned(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let out = self.value(a) * self.value(row);
        self.owned(out, Op::MulRow(a, row))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.owned(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.owned(out, Op::Scale(a, c))
    }

    pub fn col_slice(&mut self, src: Var, start: usize, len: usize) -> Var {
        let out = self.value(src).slice(s![.., start..start + len]).to_owned();
        self.owned(out, Op::ColSlice { src, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut out = Array2::zeros((rows, cols));
        let mut c = 0;
        for p in parts {
            let v = self.value(*p);
            out.slice_mut(s![.., c..c + v.ncols()]).assign(v);
            c += v.ncols();
        }
        self.owned(out, Op::ConcatCols(parts.to_vec()))
    }

    /// Row-wise softmax. With `causal`, entry `(i, j)` for `j > i` is masked.
    pub fn softmax(&mut self, src: Var, causal: bool) -> Var {
        let x = self.value(src);
        let mut out = Array2::zeros(x.raw_dim());
        for (i, (row, mut orow)) in x.outer_iter().zip(out.outer_iter_mut()).enumerate() {
            let limit = if causal {
                (i + 1).min(row.len())
            } else {
                row.len()
            };
            let m = row
                .iter()
                .take(limit)
                .fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0;
            for j in 0..limit {
                let e = (row[j] - m).exp();
                orow[j] = e;
                z += e;
            }
            for j in 0..limit {
                orow[j] /= z;
            }
        }
        self.owned(out, Op::Softmax(src))
    }

    /// Row-wise standardization (layer norm without affine terms).
    pub fn normalize(&mut self, src: Var) -> Var {
        let x = self.value(src);
        let n = x.ncols() as f64;
        let mut out = Array2::zeros(x.raw_dim());
        let mut inv_std = Vec::with_capacity(x.nrows());
        for (row, mut orow) in x.outer_iter().zip(out.outer_iter_mut()) {
            let mean = row.sum() / n;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            for (o, v) in orow.iter_mut().zip(row.iter()) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        self.owned(out, Op::Normalize { src, inv_std })
    }

    pub fn gelu(&mut self, src: Var) -> Var {
        let out = self.value(src).mapv(|x| gelu_parts(x).0);
        self.owned(out, Op::Gelu(src))
    }

    /// Summed negative log-likelihood of `targets` under row-wise softmax of
    /// `logits`. Rows with `None` are skipped. Returns a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Var {
        let x = self.value(logits);
        let mut probs = Array2::zeros(x.raw_dim());
        let mut total = 0.0;
        for ((row, mut prow), target) in x.outer_iter().zip(probs.outer_iter_mut()).zip(targets) {
            let Some(t) = *target else { continue };
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let log_z = m + z.ln();
            for (p, v) in prow.iter_mut().zip(row.iter()) {
                *p = (v - log_z).exp();
            }
            total += log_z - row[t];
        }
        self.owned(
            Array2::from_elem((1, 1), total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        )
    }

    pub fn sum_squares(&mut self, src: Var) -> Var {
        let total = self.value(src).iter().map(|v| v * v).sum();
        self.owned(Array2::from_elem((1, 1), total), Op::SumSquares(src))
    }

    pub fn sum(&mut self, src: Var) -> Var {
        let total = self.value(src).sum();
        self.owned(Array2::from_elem((1, 1), total), Op::Sum(src))
    }

    pub fn mean_rows(&mut self, src: Var) -> Var {
        let out = self
            .value(src)
            .mean_axis(Axis(0))
            .expect("mean over empty rows")
            .insert_axis(Axis(0));
        self.owned(out, Op::MeanRows(src))
    }

    /// `out[i, w] = -‖z_i − e_w‖²`.
    pub fn neg_sq_dist(&mut self, z: Var, e: Var) -> Var {
        let zv = self.value(z);
        let ev = self.value(e);
        let mut out = zv.dot(&ev.t()) * 2.0;
        let zn: Vec<f64> = zv.outer_iter().map(|r| r.dot(&r)).collect();
        let en: Vec<f64> = ev.outer_iter().map(|r| r.dot(&r)).collect();
        for ((i, w), o) in out.indexed_iter_mut() {
            *o -= zn[i] + en[w];
        }
        self.owned(out, Op::NegSqDist(z, e))
    }

    /// Row-wise affine noising: rows with `Some(a)` become `a * src_i + noise_i`,
    /// rows with `None` are copied bit-for-bit.
    pub fn partial_noise(&mut self, src: Var, scales: &[Option<f64>], noise: &Array2<f64>) -> Var {
        let mut out = self.value(src).clone();
        for (i, scale) in scales.iter().enumerate() {
            if let Some(a) = scale {
                let mut row = out.row_mut(i);
                for (o, n) in row.iter_mut().zip(noise.row(i).iter()) {
                    *o = *a * *o + *n;
                }
            }
        }
        self.owned(
            out,
            Op::PartialNoise {
                src,
                scales: scales.to_vec(),
            },
        )
    }

    /// Back-propagates from a scalar `root`, returning gradients per node.
    pub fn backward(&self, root: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones(self.value(root).raw_dim()));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf | Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Gather { src, ids } => {
                    let mut gs = Array2::zeros(self.value(*src).raw_dim());
                    for (r, &id) in ids.iter().enumerate() {
                        let mut row = gs.row_mut(id);
                        row += &g.row(r);
                    }
                    acc(&mut grads, *src, gs);
                }
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let gr = (&g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let ga = &g * self.value(*row);
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, ga);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::ColSlice { src, start } => {
                    let mut gs = Array2::zeros(self.value(*src).raw_dim());
                    gs.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *src, gs);
                }
                Op::ConcatCols(parts) => {
                    let mut c = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., c..c + w]).to_owned());
                        c += w;
                    }
                }
                Op::Softmax(src) => {
                    let y = &node.value;
                    let mut gx = Array2::zeros(y.raw_dim());
                    for ((yr, gr), mut xr) in
                        y.outer_iter().zip(g.outer_iter()).zip(gx.outer_iter_mut())
                    {
                        let dot = yr.dot(&gr);
                        for ((x, yv), gv) in xr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *x = yv * (gv - dot);
                        }
                    }
                    acc(&mut grads, *src, gx);
                }
                Op::Normalize { src, inv_std } => {
                    let y = &node.value;
                    let n = y.ncols() as f64;
                    let mut gx = Array2::zeros(y.raw_dim());
                    for (((yr, gr), mut xr), inv) in y
                        .outer_iter()
                        .zip(g.outer_iter())
                        .zip(gx.outer_iter_mut())
                        .zip(inv_std)
                    {
                        let mean_g = gr.sum() / n;
                        let mean_gy = gr.dot(&yr) / n;
                        for ((x, yv), gv) in xr.iter_mut().zip(yr.iter()).zip(gr.iter()) {
                            *x = inv * (gv - mean_g - yv * mean_gy);
                        }
                    }
                    acc(&mut grads, *src, gx);
                }
                Op::Gelu(src) => {
                    let x = self.value(*src);
                    let mut gx = g;
                    gx.zip_mut_with(x, |gv, &xv| *gv *= gelu_parts(xv).1);
                    acc(&mut grads, *src, gx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    let scale = g[[0, 0]];
                    let mut gx = Array2::zeros(probs.raw_dim());
                    for (r, target) in targets.iter().enumerate() {
                        let Some(t) = *target else { continue };
                        let mut row = gx.row_mut(r);
                        row.assign(&probs.row(r));
                        row[t] -= 1.0;
                        row *= scale;
                    }
                    acc(&mut grads, *logits, gx);
                }
                Op::SumSquares(src) => {
                    let gx = self.value(*src) * (2.0 * g[[0, 0]]);
                    acc(&mut grads, *src, gx);
                }
                Op::Sum(src) => {
                    let gx = Array2::from_elem(self.value(*src).raw_dim(), g[[0, 0]]);
                    acc(&mut grads, *src, gx);
                }
                Op::MeanRows(src) => {
                    let x = self.value(*src);
                    let n = x.nrows() as f64;
                    let mut gx = Array2::zeros(x.raw_dim());
                    for mut row in gx.outer_iter_mut() {
                        row.assign(&(&g.row(0) / n));
                    }
                    acc(&mut grads, *src, gx);
                }
                Op::NegSqDist(z, e) => {
                    let zv = self.value(*z);
                    let ev = self.value(*e);
                    // d/dz_i = -2 (rowsum(G)_i z_i - (G E)_i)
                    let row_sums = g.sum_axis(Axis(1));
                    let mut gz = g.dot(ev);
                    for (i, mut row) in gz.outer_iter_mut().enumerate() {
                        row.zip_mut_with(&zv.row(i), |o, &zi| *o = 2.0 * (*o - row_sums[i] * zi));
                    }
                    // d/de_w = 2 ((Gᵀ Z)_w - colsum(G)_w e_w)
                    let col_sums = g.sum_axis(Axis(0));
                    let mut ge = g.t().dot(zv);
                    for (w, mut row) in ge.outer_iter_mut().enumerate() {
                        row.zip_mut_with(&ev.row(w), |o, &ew| *o = 2.0 * (*o - col_sums[w] * ew));
                    }
                    acc(&mut grads, *z, gz);
                    acc(&mut grads, *e, ge);
                }
                Op::PartialNoise { src, scales } => {
                    let mut gx = g;
                    for (i, scale) in scales.iter().enumerate() {
                        if let Some(a) = scale {
                            let mut row = gx.row_mut(i);
                            row *= *a;
                        }
                    }
                    acc(&mut grads, *src, gx);
                }
            }
        }
        Gradients { grads }
    }

    /// Flat gradient over `params`, zero for parameters not on the tape.
    pub fn param_gradient(&self, grads: &Gradients, params: &ParamSet) -> Vec<f64> {
        let offsets = params.offsets();
        let mut flat = vec![0.0; params.num_scalars()];
        for (&pidx, var) in &self.param_vars {
            if let Some(g) = &grads.grads[var.0] {
                let off = offsets[pidx];
                for (dst, src) in flat[off..off + g.len()].iter_mut().zip(g.iter()) {
                    *dst = *src;
                }
            }
        }
        flat
    }
}

pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads[v.0].as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Builds a scalar from a single parameter matrix through `f` and compares
    /// the tape gradient with central differences.
    fn check<F>(shape: (usize, usize), seed: u64, f: F)
    where
        F: for<'g> Fn(&mut Graph<'g>, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.push_normal("w", shape, 1.0, true, &mut rng);
        let analytic = {
            let mut g = Graph::new();
            let w = g.param(&params, 0);
            let out = f(&mut g, w);
            let grads = g.backward(out);
            g.param_gradient(&grads, &params)
        };
        let base = params.to_flat();
        let h = 1e-6;
        for i in 0..base.len() {
            let eval = |delta: f64| {
                let mut p = params.clone();
                let mut flat = base.clone();
                flat[i] += delta;
                p.load_flat(&flat).unwrap();
                let mut g = Graph::new();
                let w = g.param(&p, 0);
                let out = f(&mut g, w);
                g.scalar(out)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-6);
            assert!(
                (numeric - analytic[i]).abs() / denom < 1e-5,
                "coord {i}: analytic {} numeric {}",
                analytic[i],
                numeric
            );
        }
    }

    #[test]
    fn matmul_and_transpose_gradients() {
        check((3, 4), 1, |g, w| {
            let c = g.constant(array![[0.5, -1.0, 2.0], [1.5, 0.3, -0.7]]);
            let p = g.matmul(c, w);
            let q = g.matmul_t(p, w);
            g.sum_squares(q)
        });
    }

    #[test]
    fn softmax_normalize_gelu_gradients() {
        check((4, 4), 2, |g, w| {
            let n = g.normalize(w);
            let a = g.gelu(n);
            let s = g.softmax(a, true);
            let c = g.constant(Array2::from_shape_fn((4, 4), |(i, j)| {
                (i * 4 + j) as f64 * 0.1
            }));
            let m = g.mul(s, c);
            g.sum(m)
        });
    }

    #[test]
    fn cross_entropy_and_gather_gradients() {
        check((5, 3), 3, |g, w| {
            let x = g.gather(w, &[0, 2, 2, 4]);
            let logits = g.matmul_t(x, w);
            g.cross_entropy(logits, &[Some(1), None, Some(2), Some(0)])
        });
    }

    #[test]
    fn row_broadcast_slice_concat_gradients() {
        check((3, 6), 4, |g, w| {
            let r = g.col_slice(w, 0, 3);
            let first = g.gather(w, &[0]);
            let a = g.add_row(w, first);
            let b = g.mul_row(a, first);
            let left = g.col_slice(b, 1, 2);
            let cat = g.concat_cols(&[left, r]);
            let mean = g.mean_rows(cat);
            let sc = g.scale(mean, 0.7);
            let both = g.add(sc, sc);
            g.sum_squares(both)
        });
    }

    #[test]
    fn neg_sq_dist_and_partial_noise_gradients() {
        check((4, 3), 5, |g, w| {
            let noise = Array2::from_elem((4, 3), 0.25);
            let z = g.partial_noise(w, &[Some(0.8), None, Some(0.3), None], &noise);
            let e = g.gather(w, &[1, 3]);
            let d = g.neg_sq_dist(z, e);
            g.cross_entropy(d, &[Some(0), Some(1), None, Some(1)])
        });
    }

    #[test]
    fn partial_noise_copies_unmasked_rows_exactly() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, -0.0], [3.5, 2.25]]);
        let noise = array![[9.0, 9.0], [9.0, 9.0]];
        let y = g.partial_noise(x, &[None, Some(0.5)], &noise);
        let v = g.value(y);
        assert_eq!(v[[0, 0]].to_bits(), 1.0f64.to_bits());
        assert_eq!(v[[0, 1]].to_bits(), (-0.0f64).to_bits());
        assert_eq!(v[[1, 0]], 0.5 * 3.5 + 9.0);
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut g = Graph::new();
        let x = g.constant(array![[1.0, 2.0, 3.0], [0.0, 0.0, 9.0]]);
        let y = g.softmax(x, true);
        let v = g.value(y);
        assert_eq!(v[[0, 0]], 1.0);
        assert_eq!(v[[0, 1]], 0.0);
        assert!((v[[1, 0]] - 0.5).abs() < 1e-15);
        assert_eq!(v[[1, 2]], 0.0);
    }
}
