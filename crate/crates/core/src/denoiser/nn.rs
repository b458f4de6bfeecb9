//! Layers with hand-written reverse passes over `Array2<f64>`.
//!
//! Weights live in a [`Tensors`] store addressed by [`Id`]; gradients use a
//! second store of identical layout. Each `forward` returns the output and a
//! cache consumed by the matching `backward`, which accumulates weight
//! gradients and returns the gradient with respect to the input.

use std::ops::{Index, IndexMut};

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Id(pub usize);

/// Named weight tensors in registration order. Vectors are stored as `1 x n`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Tensors {
    names: Vec<String>,
    data: Vec<Array2<f64>>,
}

impl Tensors {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> Id {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate tensor {name}");
        self.names.push(name);
        self.data.push(value);
        Id(self.data.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn name(&self, id: Id) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<Id> {
        self.names.iter().position(|n| n == name).map(Id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(&self.data)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.names.iter().map(String::as_str).zip(self.data.iter_mut())
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.data.iter().map(|a| a.len()).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            data: self.data.iter().map(|a| Array2::zeros(a.raw_dim())).collect(),
        }
    }

    pub fn fill(&mut self, v: f64) {
        for a in &mut self.data {
            a.fill(v);
        }
    }

    pub fn add_assign(&mut self, other: &Tensors) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, f: f64) {
        for a in &mut self.data {
            a.mapv_inplace(|v| v * f);
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|a| a.iter().all(|v| v.is_finite()))
    }

    /// Same names and shapes, in the same order.
    pub fn same_layout(&self, other: &Tensors) -> bool {
        self.names == other.names
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.dim() == b.dim())
    }
}

impl Index<Id> for Tensors {
    type Output = Array2<f64>;
    fn index(&self, id: Id) -> &Array2<f64> {
        &self.data[id.0]
    }
}

impl IndexMut<Id> for Tensors {
    fn index_mut(&mut self, id: Id) -> &mut Array2<f64> {
        &mut self.data[id.0]
    }
}

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

impl Serialize for Tensors {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeSeq;
        let mut seq = ser.serialize_seq(Some(self.len()))?;
        for (name, a) in self.iter() {
            seq.serialize_element(&TensorRecord {
                name: name.to_string(),
                shape: [a.nrows(), a.ncols()],
                data: a.iter().copied().collect(),
            })?;
        }
        seq.end()
    }
}

impl<'de> Deserialize<'de> for Tensors {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> Result<Self, D::Error> {
        let records = Vec::<TensorRecord>::deserialize(de)?;
        let mut out = Tensors::new();
        for r in records {
            let a = Array2::from_shape_vec((r.shape[0], r.shape[1]), r.data)
                .map_err(|e| serde::de::Error::custom(format!("tensor {}: {e}", r.name)))?;
            out.add(r.name, a);
        }
        Ok(out)
    }
}

/// Registers tensors under a hierarchical name prefix.
pub struct Builder<'a, R: Rng> {
    pub tensors: &'a mut Tensors,
    pub rng: &'a mut R,
    pub init_std: f64,
    prefix: Vec<String>,
}

impl<'a, R: Rng> Builder<'a, R> {
    pub fn new(tensors: &'a mut Tensors, rng: &'a mut R, init_std: f64) -> Self {
        Self {
            tensors,
            rng,
            init_std,
            prefix: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>) {
        self.prefix.push(name.into());
    }

    pub fn pop(&mut self) {
        self.prefix.pop();
    }

    fn full(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize) -> Id {
        let dist = Normal::new(0.0, self.init_std).expect("finite std");
        let a = Array2::from_shape_simple_fn((rows, cols), || dist.sample(self.rng));
        let full = self.full(name);
        self.tensors.add(full, a)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> Id {
        let full = self.full(name);
        self.tensors.add(full, Array2::from_elem((rows, cols), v))
    }
}

/// `y = x W + b` with `W: in x out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: Id,
    pub b: Id,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        b.push(name);
        let w = b.normal("w", fan_in, fan_out);
        let bias = b.constant("b", 1, fan_out, 0.0);
        b.pop();
        Self { w, b: bias }
    }

    /// Weight and bias both start at zero.
    pub fn zeros<R: Rng>(b: &mut Builder<R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        b.push(name);
        let w = b.constant("w", fan_in, fan_out, 0.0);
        let bias = b.constant("b", 1, fan_out, 0.0);
        b.pop();
        Self { w, b: bias }
    }

    pub fn forward(&self, p: &Tensors, x: ArrayView2<f64>) -> Array2<f64> {
        let mut y = x.dot(&p[self.w]);
        y += &p[self.b].row(0);
        y
    }

    pub fn backward(
        &self,
        p: &Tensors,
        g: &mut Tensors,
        x: ArrayView2<f64>,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        general_mat_mul(1.0, &x.t(), &dy, 1.0, &mut g[self.w]);
        g[self.b].row_mut(0).zip_mut_with(&dy.sum_axis(Axis(0)), |a, &v| *a += v);
        dy.dot(&p[self.w].t())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: Id,
    pub bias: Id,
}

pub struct LayerNormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, dim: usize) -> Self {
        b.push(name);
        let gain = b.constant("gain", 1, dim, 1.0);
        let bias = b.constant("bias", 1, dim, 0.0);
        b.pop();
        Self { gain, bias }
    }

    pub fn forward(&self, p: &Tensors, x: ArrayView2<f64>) -> (Array2<f64>, LayerNormCache) {
        let (xhat, inv_std) = normalize_rows(x);
        let mut y = &xhat * &p[self.gain].row(0);
        y += &p[self.bias].row(0);
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        p: &Tensors,
        g: &mut Tensors,
        cache: &LayerNormCache,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        let dgain = (&dy * &cache.xhat).sum_axis(Axis(0));
        g[self.gain].row_mut(0).zip_mut_with(&dgain, |a, &v| *a += v);
        g[self.bias].row_mut(0).zip_mut_with(&dy.sum_axis(Axis(0)), |a, &v| *a += v);
        let dxhat = &dy * &p[self.gain].row(0);
        normalize_backward(&cache.xhat, &cache.inv_std, dxhat)
    }
}

/// Row-wise `(x - mean) / sqrt(var + eps)`.
pub fn normalize_rows(x: ArrayView2<f64>) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    (xhat, inv_std)
}

pub fn normalize_backward(
    xhat: &Array2<f64>,
    inv_std: &Array1<f64>,
    mut dxhat: Array2<f64>,
) -> Array2<f64> {
    let d = xhat.ncols() as f64;
    for ((mut dr, xr), &inv) in dxhat.rows_mut().into_iter().zip(xhat.rows()).zip(inv_std) {
        let mean_d = dr.sum() / d;
        let mean_dx = dr.dot(&xr) / d;
        Zip::from(&mut dr)
            .and(&xr)
            .for_each(|v, &xh| *v = inv * (*v - mean_d - xh * mean_dx));
    }
    dxhat
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let th = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Lookup table; rows listed in `frozen` never receive gradient.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: Id,
    pub frozen: Option<usize>,
}

impl Embedding {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, rows: usize, dim: usize) -> Self {
        let table = b.normal(name, rows, dim);
        Self {
            table,
            frozen: None,
        }
    }

    /// Same as [`Embedding::new`] with row `row` fixed at zero.
    pub fn with_zero_row<R: Rng>(
        b: &mut Builder<R>,
        name: &str,
        rows: usize,
        dim: usize,
        row: usize,
    ) -> Self {
        let table = b.normal(name, rows, dim);
        b.tensors[table].row_mut(row).fill(0.0);
        Self {
            table,
            frozen: Some(row),
        }
    }

    pub fn forward(&self, p: &Tensors, ids: &[usize]) -> Array2<f64> {
        let t = &p[self.table];
        let mut out = Array2::zeros((ids.len(), t.ncols()));
        for (mut row, &id) in out.rows_mut().into_iter().zip(ids) {
            row.assign(&t.row(id));
        }
        out
    }

    pub fn backward(&self, g: &mut Tensors, ids: &[usize], dy: ArrayView2<f64>) {
        let t = &mut g[self.table];
        for (row, &id) in dy.rows().into_iter().zip(ids) {
            if Some(id) != self.frozen {
                t.row_mut(id).zip_mut_with(&row, |a, &v| *a += v);
            }
        }
    }
}

/// Additive attention mask: `0` keeps a key, `-inf` drops it.
pub type Mask = Array2<f64>;

#[derive(Debug, Clone)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub struct AttentionCache {
    xq: Array2<f64>,
    xkv: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax weights per head, `Lq x Lk`.
    probs: Vec<Array2<f64>>,
    concat: Array2<f64>,
}

impl AttentionCache {
    pub fn probs(&self) -> &[Array2<f64>] {
        &self.probs
    }
}

impl Attention {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, dim: usize, heads: usize) -> Self {
        assert!(dim.is_multiple_of(heads), "d_model must be divisible by the head count");
        b.push(name);
        let a = Self {
            q: Linear::new(b, "q", dim, dim),
            k: Linear::new(b, "k", dim, dim),
            v: Linear::new(b, "v", dim, dim),
            o: Linear::new(b, "o", dim, dim),
            heads,
        };
        b.pop();
        a
    }

    /// `softmax(Q K^T / sqrt(d_k) + mask) V` per head, then the output projection.
    pub fn forward(
        &self,
        p: &Tensors,
        xq: ArrayView2<f64>,
        xkv: ArrayView2<f64>,
        mask: Option<&Mask>,
    ) -> (Array2<f64>, AttentionCache) {
        let q = self.q.forward(p, xq);
        let k = self.k.forward(p, xkv);
        let v = self.v.forward(p, xkv);
        let dk = q.ncols() / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut concat = Array2::zeros((q.nrows(), q.ncols()));
        let mut probs = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = s![.., h * dk..(h + 1) * dk];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t());
            scores.mapv_inplace(|v| v * scale);
            if let Some(m) = mask {
                scores += m;
            }
            softmax_rows(&mut scores);
            concat.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            probs.push(scores);
        }
        let out = self.o.forward(p, concat.view());
        let cache = AttentionCache {
            xq: xq.to_owned(),
            xkv: xkv.to_owned(),
            q,
            k,
            v,
            probs,
            concat,
        };
        (out, cache)
    }

    /// Returns `(d xq, d xkv)`.
    pub fn backward(
        &self,
        p: &Tensors,
        g: &mut Tensors,
        c: &AttentionCache,
        dy: ArrayView2<f64>,
    ) -> (Array2<f64>, Array2<f64>) {
        let dconcat = self.o.backward(p, g, c.concat.view(), dy);
        let dk = c.q.ncols() / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut dq = Array2::zeros(c.q.raw_dim());
        let mut dkm = Array2::zeros(c.k.raw_dim());
        let mut dv = Array2::zeros(c.v.raw_dim());
        for (h, a) in c.probs.iter().enumerate() {
            let cols = s![.., h * dk..(h + 1) * dk];
            let dout = dconcat.slice(cols);
            let da = dout.dot(&c.v.slice(cols).t());
            dv.slice_mut(cols).assign(&a.t().dot(&dout));
            let mut ds = softmax_backward(a, &da);
            ds.mapv_inplace(|v| v * scale);
            dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
            dkm.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
        }
        let dxq = self.q.backward(p, g, c.xq.view(), dq.view());
        let mut dxkv = self.k.backward(p, g, c.xkv.view(), dkm.view());
        dxkv += &self.v.backward(p, g, c.xkv.view(), dv.view());
        (dxq, dxkv)
    }
}

/// In-place row softmax; `-inf` entries become exact zeros.
pub fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        debug_assert!(m.is_finite(), "attention row with every key masked");
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

fn softmax_backward(a: &Array2<f64>, da: &Array2<f64>) -> Array2<f64> {
    let mut ds = a * da;
    for (mut row, ar) in ds.rows_mut().into_iter().zip(a.rows()) {
        let s = row.sum();
        Zip::from(&mut row).and(&ar).for_each(|v, &p| *v -= p * s);
    }
    ds
}

/// Position-wise `Linear -> GELU -> Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

pub struct FeedForwardCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl FeedForward {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, dim: usize, hidden: usize) -> Self {
        b.push(name);
        let f = Self {
            up: Linear::new(b, "up", dim, hidden),
            down: Linear::new(b, "down", hidden, dim),
        };
        b.pop();
        f
    }

    pub fn forward(&self, p: &Tensors, x: ArrayView2<f64>) -> (Array2<f64>, FeedForwardCache) {
        let pre = self.up.forward(p, x);
        let act = pre.mapv(gelu);
        let y = self.down.forward(p, act.view());
        (
            y,
            FeedForwardCache {
                x: x.to_owned(),
                pre,
                act,
            },
        )
    }

    pub fn backward(
        &self,
        p: &Tensors,
        g: &mut Tensors,
        c: &FeedForwardCache,
        dy: ArrayView2<f64>,
    ) -> Array2<f64> {
        let mut dact = self.down.backward(p, g, c.act.view(), dy);
        Zip::from(&mut dact)
            .and(&c.pre)
            .for_each(|d, &x| *d *= gelu_grad(x));
        self.up.backward(p, g, c.x.view(), dact.view())
    }
}

/// Sinusoidal embedding of a scalar step.
pub fn sinusoidal(t: f64, dim: usize) -> Array1<f64> {
    let half = dim / 2;
    let mut e = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        e[2 * i] = (t * freq).sin();
        e[2 * i + 1] = (t * freq).cos();
    }
    e
}

/// Step embedding `t -> (f1, f2)`: sinusoidal features, a GELU hidden layer
/// and a zero-initialized output layer so modulation starts at identity.
#[derive(Debug, Clone)]
pub struct TimeMlp {
    pub hidden: Linear,
    pub out: Linear,
    dim: usize,
}

pub struct TimeMlpCache {
    x: Array2<f64>,
    pre: Array2<f64>,
    act: Array2<f64>,
}

impl TimeMlp {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, dim: usize) -> Self {
        b.push(name);
        let m = Self {
            hidden: Linear::new(b, "hidden", dim, dim),
            out: Linear::zeros(b, "out", dim, 2 * dim),
            dim,
        };
        b.pop();
        m
    }

    /// Returns `1 x 2d`: `f1` in the first half, `f2` in the second.
    pub fn forward(&self, p: &Tensors, t: usize) -> (Array2<f64>, TimeMlpCache) {
        let x = sinusoidal(t as f64, self.dim).insert_axis(Axis(0));
        let pre = self.hidden.forward(p, x.view());
        let act = pre.mapv(gelu);
        let y = self.out.forward(p, act.view());
        (y, TimeMlpCache { x, pre, act })
    }

    pub fn backward(&self, p: &Tensors, g: &mut Tensors, c: &TimeMlpCache, dy: ArrayView2<f64>) {
        let mut dact = self.out.backward(p, g, c.act.view(), dy);
        Zip::from(&mut dact)
            .and(&c.pre)
            .for_each(|d, &x| *d *= gelu_grad(x));
        self.hidden.backward(p, g, c.x.view(), dact.view());
    }
}

/// `LN(x) * (1 + f1) + f2` with the modulation broadcast over positions.
#[derive(Debug, Clone)]
pub struct Stylize {
    pub norm: LayerNorm,
}

pub struct StylizeCache {
    norm: LayerNormCache,
    normed: Array2<f64>,
}

impl Stylize {
    pub fn new<R: Rng>(b: &mut Builder<R>, name: &str, dim: usize) -> Self {
        Self {
            norm: LayerNorm::new(b, name, dim),
        }
    }

    pub fn forward(
        &self,
        p: &Tensors,
        x: ArrayView2<f64>,
        film: ArrayView2<f64>,
    ) -> (Array2<f64>, StylizeCache) {
        let d = x.ncols();
        let (normed, norm) = self.norm.forward(p, x);
        let scale = film.slice(s![0, ..d]).mapv(|v| 1.0 + v);
        let mut y = &normed * &scale;
        y += &film.slice(s![0, d..]);
        (y, StylizeCache { norm, normed })
    }

    /// Returns `d x` and accumulates `d film` (`1 x 2d`) into `dfilm`.
    pub fn backward(
        &self,
        p: &Tensors,
        g: &mut Tensors,
        c: &StylizeCache,
        film: ArrayView2<f64>,
        dy: ArrayView2<f64>,
        dfilm: &mut Array2<f64>,
    ) -> Array2<f64> {
        let d = dy.ncols();
        let df1 = (&dy * &c.normed).sum_axis(Axis(0));
        let df2 = dy.sum_axis(Axis(0));
        dfilm.slice_mut(s![0, ..d]).zip_mut_with(&df1, |a, &v| *a += v);
        dfilm.slice_mut(s![0, d..]).zip_mut_with(&df2, |a, &v| *a += v);
        let scale = film.slice(s![0, ..d]).mapv(|v| 1.0 + v);
        let dnormed = &dy * &scale;
        self.norm.backward(p, g, &c.norm, dnormed.view())
    }
}
