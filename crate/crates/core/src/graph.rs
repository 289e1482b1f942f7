//! Tape-based reverse-mode automatic differentiation over 2-D arrays.
//!
//! Every forward operation appends a node holding its value and a backward
//! closure; [`Graph::backward`] walks the tape in reverse and accumulates
//! gradients. The element type is generic so the same model code runs in
//! f32 for training and f64 for finite-difference checks.

use ndarray::{s, Array2, ScalarOperand};
use num_traits::Float;
use rand::Rng;
use std::fmt::{Debug, Display};
use std::sync::Arc;

/// Scalar element type usable throughout the model.
pub trait Real:
    Float
    + ndarray::LinalgScalar
    + ScalarOperand
    + std::ops::AddAssign
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample::<f32, _>(rand_distr::StandardNormal)
    }
    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f32>()
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.sample::<f64, _>(rand_distr::StandardNormal)
    }
    fn uniform01<R: Rng + ?Sized>(rng: &mut R) -> Self {
        rng.gen::<f64>()
    }
}

/// Handle to a node on the tape.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn<T> = Box<dyn Fn(&Graph<T>, &Array2<T>, &mut [Option<Array2<T>>])>;

struct Node<T: Real> {
    value: Array2<T>,
    back: Option<BackFn<T>>,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    // (node id, flat offset, rows, cols) for every registered parameter
    pub(crate) param_nodes: Vec<(usize, usize, usize, usize)>,
}

fn accum<T: Real>(slot: &mut Option<Array2<T>>, g: Array2<T>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            param_nodes: Vec::new(),
        }
    }

    fn push(&mut self, value: Array2<T>, back: Option<BackFn<T>>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> T {
        debug_assert_eq!(self.nodes[v.0].value.dim(), (1, 1));
        self.nodes[v.0].value[(0, 0)]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Source node with no gradient consumers of its own.
    pub fn constant(&mut self, value: Array2<T>) -> Var {
        self.push(value, None)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            value,
            Some(Box::new(move |_g, up, grads| {
                accum(&mut grads[a.0], up.clone());
                accum(&mut grads[b.0], up.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            value,
            Some(Box::new(move |_g, up, grads| {
                accum(&mut grads[a.0], up.clone());
                accum(&mut grads[b.0], up.mapv(|x| -x));
            })),
        )
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value * &self.nodes[b.0].value;
        self.push(
            value,
            Some(Box::new(move |g, up, grads| {
                accum(&mut grads[a.0], up * &g.nodes[b.0].value);
                accum(&mut grads[b.0], up * &g.nodes[a.0].value);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x * c);
        self.push(
            value,
            Some(Box::new(move |_g, up, grads| {
                accum(&mut grads[a.0], up.mapv(|x| x * c));
            })),
        )
    }

    /// Elementwise product with a fixed weight matrix (no gradient to the weights).
    pub fn mul_const(&mut self, a: Var, w: Arc<Array2<T>>) -> Var {
        let value = &self.nodes[a.0].value * w.as_ref();
        let wb = Arc::clone(&w);
        self.push(
            value,
            Some(Box::new(move |_g, up, grads| {
                accum(&mut grads[a.0], up * wb.as_ref());
            })),
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(
            value,
            Some(Box::new(move |g, up, grads| {
                accum(&mut grads[a.0], up.dot(&g.nodes[b.0].value.t()));
                accum(&mut grads[b.0], g.nodes[a.0].value.t().dot(up));
            })),
        )
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(
            value,
            Some(Box::new(move |g, up, grads| {
                accum(&mut grads[a.0], up.dot(&g.nodes[b.0].value));
                accum(&mut grads[b.0], up.t().dot(&g.nodes[a.0].value));
            })),
        )
    }

    /// Adds a 1×n row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[bias.0].value;
        self.push(
            value,
            Some(Box::new(move |_g, up, grads| {
                accum(&mut grads[a.0], up.clone());
                let summed = up.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
                accum(&mut grads[bias.0], summed);
            })),
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(ndarray::Axis(0), &views).expect("concat_rows");
        let parts: Vec<Var> = parts.to_vec();
        let sizes: Vec<usize> = parts
            .iter()
            .map(|v| self.nodes[v.0].value.nrows())
            .collect();
        self.push(
            value,
            Some(Box::new(move |_g, up, grads| {
                let mut start = 0;
                for (v, n) in parts.iter().zip(&sizes) {
                    accum(&mut grads[v.0], up.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            })),
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.nodes[a.0].value.dim();
        assert!(start + len <= rows);
        let value = self.nodes[a.0].value.slice(s![start..start + len, ..]).to_owned();
        self.push(
            value,
            Some(Box::new(move |_g, up, grads| {
                let mut full = Array2::zeros((rows, cols));
                full.slice_mut(s![start..start + len, ..]).assign(up);
                accum(&mut grads[a.0], full);
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|v| self.nodes[v.0].value.view()).collect();
        let value = ndarray::concatenate(ndarray::Axis(1), &views).expect("concat_cols");
        let parts: Vec<Var> = parts.to_vec();
        let sizes: Vec<usize> = parts
            .iter()
            .map(|v| self.nodes[v.0].value.ncols())
            .collect();
        self.push(
            value,
            Some(Box::new(move |_g, up, grads| {
                let mut start = 0;
                for (v, n) in parts.iter().zip(&sizes) {
                    accum(&mut grads[v.0], up.slice(s![.., start..start + n]).to_owned());
                    start += n;
                }
            })),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (rows, cols) = self.nodes[a.0].value.dim();
        assert!(start + len <= cols);
        let value = self.nodes[a.0].value.slice(s![.., start..start + len]).to_owned();
        self.push(
            value,
            Some(Box::new(move |_g, up, grads| {
                let mut full = Array2::zeros((rows, cols));
                full.slice_mut(s![.., start..start + len]).assign(up);
                accum(&mut grads[a.0], full);
            })),
        )
    }

    /// Row-wise softmax over positions where `mask` is true; disallowed
    /// positions get probability exactly zero. Every row must have at least
    /// one allowed position.
    pub fn softmax_masked(&mut self, a: Var, mask: Arc<Array2<bool>>) -> Var {
        let x = &self.nodes[a.0].value;
        assert_eq!(x.dim(), mask.dim(), "softmax mask shape");
        let mut value = Array2::zeros(x.dim());
        for (i, row) in x.outer_iter().enumerate() {
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if mask[(i, j)] && v > max {
                    max = v;
                }
            }
            debug_assert!(max > T::neg_infinity(), "softmax row with no allowed keys");
            let mut sum = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if mask[(i, j)] {
                    let e = (v - max).exp();
                    value[(i, j)] = e;
                    sum = sum + e;
                }
            }
            let inv = T::one() / sum;
            for j in 0..row.len() {
                value[(i, j)] = value[(i, j)] * inv;
            }
        }
        // the backward pass needs the output probabilities, so the closure is
        // installed after push once the node id is known
        let out = self.push(value, None);
        let out_id = out.0;
        self.nodes[out_id].back = Some(Box::new(move |g, up, grads| {
            let p = &g.nodes[out_id].value;
            let mut dx = Array2::zeros(p.dim());
            for i in 0..p.nrows() {
                let mut s = T::zero();
                for j in 0..p.ncols() {
                    s = s + up[(i, j)] * p[(i, j)];
                }
                for j in 0..p.ncols() {
                    dx[(i, j)] = p[(i, j)] * (up[(i, j)] - s);
                }
            }
            accum(&mut grads[a.0], dx);
        }));
        out
    }

    /// RMS normalization per row with a learned 1×w gain.
    pub fn rms_norm(&mut self, a: Var, gain: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let g = &self.nodes[gain.0].value;
        let w = x.ncols();
        assert_eq!(g.dim(), (1, w), "rms_norm gain shape");
        let eps = T::from_f64(1e-6);
        let wf = T::from_f64(w as f64);
        let mut value = Array2::zeros(x.dim());
        let mut inv_rms = Vec::with_capacity(x.nrows());
        for (i, row) in x.outer_iter().enumerate() {
            let mut ss = T::zero();
            for &v in row {
                ss = ss + v * v;
            }
            let r = (ss / wf + eps).sqrt();
            let inv = T::one() / r;
            inv_rms.push(inv);
            for j in 0..w {
                value[(i, j)] = row[j] * inv * g[(0, j)];
            }
        }
        self.push(
            value,
            Some(Box::new(move |gr, up, grads| {
                let x = &gr.nodes[a.0].value;
                let g = &gr.nodes[gain.0].value;
                let mut dx = Array2::zeros(x.dim());
                let mut dg = Array2::zeros(g.dim());
                for i in 0..x.nrows() {
                    let inv = inv_rms[i];
                    // s = sum_k up_k g_k x_k
                    let mut s = T::zero();
                    for k in 0..x.ncols() {
                        s = s + up[(i, k)] * g[(0, k)] * x[(i, k)];
                    }
                    let c = s * inv * inv * inv / wf;
                    for j in 0..x.ncols() {
                        dx[(i, j)] = up[(i, j)] * g[(0, j)] * inv - x[(i, j)] * c;
                        dg[(0, j)] = dg[(0, j)] + up[(i, j)] * x[(i, j)] * inv;
                    }
                }
                accum(&mut grads[a.0], dx);
                accum(&mut grads[gain.0], dg);
            })),
        )
    }

    /// SiLU activation, x·σ(x).
    pub fn silu(&mut self, a: Var) -> Var {
        let sig = |x: T| T::one() / (T::one() + (-x).exp());
        let value = self.nodes[a.0].value.mapv(|x| x * sig(x));
        self.push(
            value,
            Some(Box::new(move |g, up, grads| {
                let x = &g.nodes[a.0].value;
                let d = x.mapv(|x| {
                    let s = T::one() / (T::one() + (-x).exp());
                    s * (T::one() + x * (T::one() - s))
                });
                accum(&mut grads[a.0], up * &d);
            })),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.nodes[a.0].value.sum();
        let dim = self.nodes[a.0].value.dim();
        let value = Array2::from_elem((1, 1), total);
        self.push(
            value,
            Some(Box::new(move |_g, up, grads| {
                accum(&mut grads[a.0], Array2::from_elem(dim, up[(0, 0)]));
            })),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Elementwise square root; inputs must be positive wherever gradients
    /// are needed.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x.sqrt());
        let out = self.push(value, None);
        let out_id = out.0;
        self.nodes[out_id].back = Some(Box::new(move |g, up, grads| {
            let y = &g.nodes[out_id].value;
            let half = T::from_f64(0.5);
            let d = y.mapv(|y| half / y);
            accum(&mut grads[a.0], up * &d);
        }));
        out
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| x + c);
        self.push(
            value,
            Some(Box::new(move |_g, up, grads| {
                accum(&mut grads[a.0], up.clone());
            })),
        )
    }

    /// Selects rows of an embedding table by index; gradients scatter-add
    /// back into the table rows.
    pub fn gather_rows(&mut self, table: Var, ids: Vec<usize>) -> Var {
        let t = &self.nodes[table.0].value;
        let (rows, cols) = t.dim();
        let mut value = Array2::zeros((ids.len(), cols));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < t.nrows(), "gather id {id} out of range");
            value.row_mut(i).assign(&t.row(id));
        }
        self.push(
            value,
            Some(Box::new(move |_g, up, grads| {
                let mut dt = Array2::zeros((rows, cols));
                for (i, &id) in ids.iter().enumerate() {
                    let mut r = dt.row_mut(id);
                    r += &up.row(i);
                }
                accum(&mut grads[table.0], dt);
            })),
        )
    }

    /// Runs the backward pass from a 1×1 loss node and returns one gradient
    /// slot per node (None where the node does not influence the loss).
    pub fn backward(&self, loss: Var) -> Vec<Option<Array2<T>>> {
        assert_eq!(self.nodes[loss.0].value.dim(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Array2<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem((1, 1), T::one()));
        for id in (0..=loss.0).rev() {
            if grads[id].is_none() {
                continue;
            }
            if let Some(back) = &self.nodes[id].back {
                let up = grads[id].take().unwrap();
                back(self, &up, &mut grads);
                grads[id] = Some(up);
            }
        }
        grads
    }
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}
