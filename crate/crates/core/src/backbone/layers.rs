//! Minimal CNN building blocks with hand-written backward passes.
//!
//! Tensors are single-sample, channel-major (`C×H×W`) `f64` buffers. Every
//! parameter lives in a flat [`ParamStore`]; layers refer to it by [`ParamId`], and
//! gradients are accumulated into a flat buffer with the same layout.

use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(c: usize, h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor buffer does not match {c}x{h}x{w}");
        Self { c, h, w, data }
    }

    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self::new(c, h, w, vec![0.0; c * h * w])
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let c = data.len();
        Self::new(c, 1, 1, data)
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.c, self.h, self.w]
    }

    fn plane(&self) -> usize {
        self.h * self.w
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Metadata of one named parameter tensor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamInfo {
    pub name: String,
    pub shape: Vec<usize>,
    /// Index into the owning network's layer groups.
    pub group: usize,
    /// Buffers such as batch-norm running statistics are never optimized.
    pub trainable: bool,
    pub offset: usize,
}

impl ParamInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Flat storage for every parameter of a network.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    infos: Vec<ParamInfo>,
    values: Vec<f64>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        group: usize,
        trainable: bool,
        init: Vec<f64>,
    ) -> ParamId {
        let info = ParamInfo {
            name: name.into(),
            shape: shape.to_vec(),
            group,
            trainable,
            offset: self.values.len(),
        };
        assert_eq!(init.len(), info.len(), "initial values for {}", info.name);
        self.values.extend(init);
        self.infos.push(info);
        ParamId(self.infos.len() - 1)
    }

    /// Replaces a parameter's shape and values, shifting the offsets of later ones.
    pub fn replace(&mut self, id: ParamId, shape: &[usize], values: Vec<f64>) {
        let old = self.infos[id.0].range();
        let len: usize = shape.iter().product();
        assert_eq!(values.len(), len);
        self.values.splice(old.clone(), values);
        self.infos[id.0].shape = shape.to_vec();
        let delta = len as isize - old.len() as isize;
        for info in &mut self.infos[id.0 + 1..] {
            info.offset = (info.offset as isize + delta) as usize;
        }
    }

    pub fn infos(&self) -> &[ParamInfo] {
        &self.infos
    }

    pub fn info(&self, id: ParamId) -> &ParamInfo {
        &self.infos[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.infos.iter().position(|i| i.name == name).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[self.infos[id.0].range()]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        let r = self.infos[id.0].range();
        &mut self.values[r]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// A zeroed gradient buffer matching this store's layout.
    pub fn zeros_like(&self) -> Vec<f64> {
        vec![0.0; self.values.len()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    fn out_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Unfolds the input into a `(in_c·k·k) × (ho·wo)` patch matrix.
    fn im2col(&self, x: &Tensor3, ho: usize, wo: usize) -> Vec<f64> {
        if self.is_pointwise() {
            return x.data.clone();
        }
        let k = self.k;
        let mut cols = vec![0.0; self.in_c * k * k * ho * wo];
        for c in 0..self.in_c {
            let src = &x.data[c * x.plane()..(c + 1) * x.plane()];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * x.w..(iy as usize + 1) * x.w];
                        let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < x.w as isize {
                                *d = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], h: usize, w: usize, ho: usize, wo: usize) -> Tensor3 {
        if self.is_pointwise() {
            return Tensor3::new(self.in_c, h, w, cols.to_vec());
        }
        let k = self.k;
        let mut out = Tensor3::zeros(self.in_c, h, w);
        for c in 0..self.in_c {
            let dst = &mut out.data[c * h * w..(c + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < w as isize {
                                dst[iy as usize * w + ix as usize] += src[oy * wo + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn forward(&self, store: &ParamStore, x: &Tensor3) -> (Tensor3, Vec<f64>) {
        assert_eq!(x.c, self.in_c, "conv input channels");
        let (ho, wo) = (self.out_size(x.h), self.out_size(x.w));
        let kk = self.in_c * self.k * self.k;
        let cols = self.im2col(x, ho, wo);
        let mut out = vec![0.0; self.out_c * ho * wo];
        if let Some(b) = self.bias {
            for (chunk, &bias) in out.chunks_exact_mut(ho * wo).zip(store.get(b)) {
                chunk.fill(bias);
            }
        }
        let w = ArrayView2::from_shape((self.out_c, kk), store.get(self.weight)).unwrap();
        let c = ArrayView2::from_shape((kk, ho * wo), &cols).unwrap();
        let mut o = ArrayViewMut2::from_shape((self.out_c, ho * wo), &mut out).unwrap();
        let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
        general_mat_mul(1.0, &w, &c, beta, &mut o);
        (Tensor3::new(self.out_c, ho, wo, out), cols)
    }

    fn backward(
        &self,
        store: &ParamStore,
        cols: &[f64],
        in_shape: [usize; 3],
        dy: &Tensor3,
        grads: &mut [f64],
        need_dx: bool,
    ) -> Option<Tensor3> {
        let (ho, wo) = (dy.h, dy.w);
        let kk = self.in_c * self.k * self.k;
        let dyv = ArrayView2::from_shape((self.out_c, ho * wo), &dy.data).unwrap();
        let colv = ArrayView2::from_shape((kk, ho * wo), cols).unwrap();
        {
            let range = store.info(self.weight).range();
            let mut dw = ArrayViewMut2::from_shape((self.out_c, kk), &mut grads[range]).unwrap();
            general_mat_mul(1.0, &dyv, &colv.t(), 1.0, &mut dw);
        }
        if let Some(b) = self.bias {
            let range = store.info(b).range();
            for (g, row) in grads[range].iter_mut().zip(dy.data.chunks_exact(ho * wo)) {
                *g += row.iter().sum::<f64>();
            }
        }
        if !need_dx {
            return None;
        }
        let w = ArrayView2::from_shape((self.out_c, kk), store.get(self.weight)).unwrap();
        let mut dcols = vec![0.0; kk * ho * wo];
        {
            let mut dc = ArrayViewMut2::from_shape((kk, ho * wo), &mut dcols).unwrap();
            general_mat_mul(1.0, &w.t(), &dyv, 0.0, &mut dc);
        }
        Some(self.col2im(&dcols, in_shape[1], in_shape[2], ho, wo))
    }
}

/// Batch normalization with frozen running statistics and a trainable affine part.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub channels: usize,
}

impl BatchNorm {
    fn inv_std(&self, store: &ParamStore) -> Vec<f64> {
        store
            .get(self.running_var)
            .iter()
            .map(|v| 1.0 / (v + BN_EPS).sqrt())
            .collect()
    }

    fn forward(&self, store: &ParamStore, x: &Tensor3, keep: bool) -> (Tensor3, Option<Vec<f64>>) {
        let inv = self.inv_std(store);
        let (gamma, beta, mean) = (
            store.get(self.gamma),
            store.get(self.beta),
            store.get(self.running_mean),
        );
        let plane = x.plane();
        let mut xhat = if keep { Some(vec![0.0; x.data.len()]) } else { None };
        let mut out = vec![0.0; x.data.len()];
        for c in 0..self.channels {
            let r = c * plane..(c + 1) * plane;
            for (i, (&v, o)) in x.data[r.clone()].iter().zip(&mut out[r.clone()]).enumerate() {
                let n = (v - mean[c]) * inv[c];
                if let Some(xh) = xhat.as_mut() {
                    xh[c * plane + i] = n;
                }
                *o = n * gamma[c] + beta[c];
            }
        }
        (Tensor3::new(x.c, x.h, x.w, out), xhat)
    }

    fn backward(&self, store: &ParamStore, xhat: &[f64], dy: &Tensor3, grads: &mut [f64]) -> Tensor3 {
        let inv = self.inv_std(store);
        let gamma = store.get(self.gamma);
        let plane = dy.plane();
        let (gr, br) = (store.info(self.gamma).range(), store.info(self.beta).range());
        let mut dx = vec![0.0; dy.data.len()];
        for c in 0..self.channels {
            let r = c * plane..(c + 1) * plane;
            let mut dg = 0.0;
            let mut db = 0.0;
            let scale = gamma[c] * inv[c];
            for ((&g, &n), d) in dy.data[r.clone()].iter().zip(&xhat[r.clone()]).zip(&mut dx[r.clone()]) {
                dg += g * n;
                db += g;
                *d = g * scale;
            }
            grads[gr.start + c] += dg;
            grads[br.start + c] += db;
        }
        Tensor3::new(dy.c, dy.h, dy.w, dx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxPool {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl MaxPool {
    fn forward(&self, x: &Tensor3) -> (Tensor3, Vec<u32>) {
        let ho = (x.h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (x.w + 2 * self.pad - self.k) / self.stride + 1;
        let mut out = Vec::with_capacity(x.c * ho * wo);
        let mut argmax = Vec::with_capacity(x.c * ho * wo);
        for c in 0..x.c {
            let base = c * x.plane();
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = u32::MAX;
                    for ky in 0..self.k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        for kx in 0..self.k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= x.w as isize {
                                continue;
                            }
                            let i = base + iy as usize * x.w + ix as usize;
                            if x.data[i] > best || best_i == u32::MAX {
                                best = x.data[i];
                                best_i = i as u32;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_i);
                }
            }
        }
        (Tensor3::new(x.c, ho, wo, out), argmax)
    }

    fn backward(argmax: &[u32], in_shape: [usize; 3], dy: &Tensor3) -> Tensor3 {
        let mut dx = Tensor3::zeros(in_shape[0], in_shape[1], in_shape[2]);
        for (&i, &g) in argmax.iter().zip(&dy.data) {
            dx.data[i as usize] += g;
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    fn forward(&self, store: &ParamStore, x: &Tensor3) -> Tensor3 {
        assert_eq!(x.data.len(), self.in_features, "linear input width");
        let w = store.get(self.weight);
        let b = store.get(self.bias);
        let out = (0..self.out_features)
            .map(|o| {
                let row = &w[o * self.in_features..(o + 1) * self.in_features];
                b[o] + row.iter().zip(&x.data).map(|(a, v)| a * v).sum::<f64>()
            })
            .collect();
        Tensor3::vector(out)
    }

    fn backward(
        &self,
        store: &ParamStore,
        x: &[f64],
        dy: &Tensor3,
        grads: &mut [f64],
        need_dx: bool,
    ) -> Option<Tensor3> {
        let wr = store.info(self.weight).range();
        let br = store.info(self.bias).range();
        for (o, &g) in dy.data.iter().enumerate() {
            grads[br.start + o] += g;
            let row = &mut grads[wr.start + o * self.in_features..wr.start + (o + 1) * self.in_features];
            for (r, &v) in row.iter_mut().zip(x) {
                *r += g * v;
            }
        }
        if !need_dx {
            return None;
        }
        let w = store.get(self.weight);
        let mut dx = vec![0.0; self.in_features];
        for (o, &g) in dy.data.iter().enumerate() {
            for (d, &a) in dx.iter_mut().zip(&w[o * self.in_features..(o + 1) * self.in_features]) {
                *d += g * a;
            }
        }
        Some(Tensor3::vector(dx))
    }
}

/// `relu(main(x) + shortcut(x))`; an empty shortcut is the identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Residual {
    pub main: Vec<Op>,
    pub shortcut: Vec<Op>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Conv(Conv2d),
    BatchNorm(BatchNorm),
    Relu,
    MaxPool(MaxPool),
    Residual(Box<Residual>),
    GlobalAvgPool,
    Linear(Linear),
}

/// Values saved by a forward pass for the matching backward pass.
#[derive(Debug, Clone)]
pub enum Cache {
    Conv {
        cols: Vec<f64>,
        in_shape: [usize; 3],
    },
    BatchNorm {
        xhat: Vec<f64>,
    },
    Relu {
        out: Vec<f64>,
    },
    MaxPool {
        argmax: Vec<u32>,
        in_shape: [usize; 3],
    },
    Residual {
        main: Vec<Cache>,
        shortcut: Vec<Cache>,
        out: Vec<f64>,
    },
    GlobalAvgPool {
        in_shape: [usize; 3],
    },
    Linear {
        input: Vec<f64>,
    },
}

impl Op {
    pub fn forward(&self, store: &ParamStore, x: Tensor3) -> Tensor3 {
        match self {
            Op::Conv(conv) => conv.forward(store, &x).0,
            Op::BatchNorm(bn) => bn.forward(store, &x, false).0,
            Op::Relu => relu(x),
            Op::MaxPool(mp) => mp.forward(&x).0,
            Op::Residual(res) => {
                let main = forward_seq(&res.main, store, x.clone());
                let short = forward_seq(&res.shortcut, store, x);
                relu(add(main, &short))
            }
            Op::GlobalAvgPool => global_avg_pool(&x),
            Op::Linear(lin) => lin.forward(store, &x),
        }
    }

    pub fn forward_cached(&self, store: &ParamStore, x: Tensor3) -> (Tensor3, Cache) {
        match self {
            Op::Conv(conv) => {
                let in_shape = x.shape();
                let (y, cols) = conv.forward(store, &x);
                (y, Cache::Conv { cols, in_shape })
            }
            Op::BatchNorm(bn) => {
                let (y, xhat) = bn.forward(store, &x, true);
                (
                    y,
                    Cache::BatchNorm {
                        xhat: xhat.expect("kept"),
                    },
                )
            }
            Op::Relu => {
                let y = relu(x);
                let out = y.data.clone();
                (y, Cache::Relu { out })
            }
            Op::MaxPool(mp) => {
                let (y, argmax) = mp.forward(&x);
                (
                    y,
                    Cache::MaxPool {
                        argmax,
                        in_shape: x.shape(),
                    },
                )
            }
            Op::Residual(res) => {
                let (main_y, main) = forward_seq_cached(&res.main, store, x.clone());
                let (short_y, shortcut) = forward_seq_cached(&res.shortcut, store, x);
                let y = relu(add(main_y, &short_y));
                let out = y.data.clone();
                (y, Cache::Residual { main, shortcut, out })
            }
            Op::GlobalAvgPool => {
                let in_shape = x.shape();
                (global_avg_pool(&x), Cache::GlobalAvgPool { in_shape })
            }
            Op::Linear(lin) => {
                let y = lin.forward(store, &x);
                (y, Cache::Linear { input: x.data })
            }
        }
    }

    /// Accumulates parameter gradients into `grads` and returns the input
    /// gradient when `need_dx` is set.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &Cache,
        dy: Tensor3,
        grads: &mut [f64],
        need_dx: bool,
    ) -> Option<Tensor3> {
        match (self, cache) {
            (Op::Conv(conv), Cache::Conv { cols, in_shape }) => {
                conv.backward(store, cols, *in_shape, &dy, grads, need_dx)
            }
            (Op::BatchNorm(bn), Cache::BatchNorm { xhat }) => {
                let dx = bn.backward(store, xhat, &dy, grads);
                need_dx.then_some(dx)
            }
            (Op::Relu, Cache::Relu { out }) => need_dx.then(|| relu_backward(out, dy)),
            (Op::MaxPool(_), Cache::MaxPool { argmax, in_shape }) => {
                need_dx.then(|| MaxPool::backward(argmax, *in_shape, &dy))
            }
            (Op::Residual(res), Cache::Residual { main, shortcut, out }) => {
                let d = relu_backward(out, dy);
                let d_main = backward_seq(&res.main, store, main, d.clone(), grads, need_dx);
                let d_short = if res.shortcut.is_empty() {
                    need_dx.then_some(d)
                } else {
                    backward_seq(&res.shortcut, store, shortcut, d, grads, need_dx)
                };
                match (d_main, d_short) {
                    (Some(a), Some(b)) => Some(add(a, &b)),
                    _ => None,
                }
            }
            (Op::GlobalAvgPool, Cache::GlobalAvgPool { in_shape }) => need_dx.then(|| {
                let [c, h, w] = *in_shape;
                let scale = 1.0 / (h * w) as f64;
                let mut dx = Tensor3::zeros(c, h, w);
                for (ch, &g) in dx.data.chunks_exact_mut(h * w).zip(&dy.data) {
                    ch.fill(g * scale);
                }
                dx
            }),
            (Op::Linear(lin), Cache::Linear { input }) => lin.backward(store, input, &dy, grads, need_dx),
            _ => panic!("cache does not belong to this op"),
        }
    }

    /// Output shape for an input of shape `[c, h, w]`, without running the op.
    pub fn output_shape(&self, [c, h, w]: [usize; 3]) -> [usize; 3] {
        match self {
            Op::Conv(conv) => [conv.out_c, conv.out_size(h), conv.out_size(w)],
            Op::BatchNorm(_) | Op::Relu => [c, h, w],
            Op::MaxPool(mp) => [
                c,
                (h + 2 * mp.pad - mp.k) / mp.stride + 1,
                (w + 2 * mp.pad - mp.k) / mp.stride + 1,
            ],
            Op::Residual(res) => res.main.iter().fold([c, h, w], |s, op| op.output_shape(s)),
            Op::GlobalAvgPool => [c, 1, 1],
            Op::Linear(l) => [l.out_features, 1, 1],
        }
    }

    /// Parameters referenced by this op, in registration order.
    pub fn params(&self, out: &mut Vec<ParamId>) {
        match self {
            Op::Conv(c) => {
                out.push(c.weight);
                out.extend(c.bias);
            }
            Op::BatchNorm(bn) => out.extend([bn.gamma, bn.beta, bn.running_mean, bn.running_var]),
            Op::Residual(res) => res.main.iter().chain(&res.shortcut).for_each(|op| op.params(out)),
            Op::Linear(l) => out.extend([l.weight, l.bias]),
            Op::Relu | Op::MaxPool(_) | Op::GlobalAvgPool => {}
        }
    }
}

pub fn forward_seq(ops: &[Op], store: &ParamStore, x: Tensor3) -> Tensor3 {
    ops.iter().fold(x, |x, op| op.forward(store, x))
}

pub fn forward_seq_cached(ops: &[Op], store: &ParamStore, mut x: Tensor3) -> (Tensor3, Vec<Cache>) {
    let mut caches = Vec::with_capacity(ops.len());
    for op in ops {
        let (y, cache) = op.forward_cached(store, x);
        caches.push(cache);
        x = y;
    }
    (x, caches)
}

/// Runs the ops backwards. The input gradient of the first op is only formed when
/// `need_dx` is set.
pub fn backward_seq(
    ops: &[Op],
    store: &ParamStore,
    caches: &[Cache],
    mut dy: Tensor3,
    grads: &mut [f64],
    need_dx: bool,
) -> Option<Tensor3> {
    for (i, (op, cache)) in ops.iter().zip(caches).enumerate().rev() {
        let want = need_dx || i > 0;
        dy = op.backward(store, cache, dy, grads, want)?;
    }
    Some(dy)
}

fn relu(mut x: Tensor3) -> Tensor3 {
    x.data.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

fn relu_backward(out: &[f64], mut dy: Tensor3) -> Tensor3 {
    for (g, &o) in dy.data.iter_mut().zip(out) {
        if o <= 0.0 {
            *g = 0.0;
        }
    }
    dy
}

fn add(mut a: Tensor3, b: &Tensor3) -> Tensor3 {
    assert_eq!(a.shape(), b.shape(), "residual shapes");
    a.data.iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
    a
}

fn global_avg_pool(x: &Tensor3) -> Tensor3 {
    let plane = x.plane() as f64;
    Tensor3::vector(
        x.data
            .chunks_exact(x.plane())
            .map(|ch| ch.iter().sum::<f64>() / plane)
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Scalar objective `sum(y * r)` for a fixed random projection `r`.
    fn check_op(op: &Op, store: &mut ParamStore, x: Tensor3, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = op.forward(store, x.clone());
        let r = random(&mut rng, y.data.len());
        let objective = |store: &ParamStore, x: Tensor3| -> f64 {
            op.forward(store, x).data.iter().zip(&r).map(|(a, b)| a * b).sum()
        };
        let (y2, cache) = op.forward_cached(store, x.clone());
        assert_eq!(y, y2);
        let mut grads = store.zeros_like();
        let dx = op
            .backward(store, &cache, Tensor3::new(y.c, y.h, y.w, r.clone()), &mut grads, true)
            .unwrap();
        let h = 1e-6;
        for i in (0..x.data.len()).step_by(7.max(x.data.len() / 40)) {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp.data[i] += h;
            xm.data[i] -= h;
            let fd = (objective(store, xp) - objective(store, xm)) / (2.0 * h);
            assert!((fd - dx.data[i]).abs() < 1e-6, "dx[{i}]: fd {fd} vs {}", dx.data[i]);
        }
        let trainable: Vec<_> = store
            .infos()
            .iter()
            .filter(|i| i.trainable)
            .map(|i| i.range())
            .collect();
        for range in trainable {
            for i in range.clone().step_by(1.max(range.len() / 10)) {
                let orig = store.values()[i];
                store.values_mut()[i] = orig + h;
                let fp = objective(store, x.clone());
                store.values_mut()[i] = orig - h;
                let fm = objective(store, x.clone());
                store.values_mut()[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                assert!((fd - grads[i]).abs() < 1e-6, "grad[{i}]: fd {fd} vs {}", grads[i]);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Conv2d {
        let weight = store.register(
            format!("{name}.weight"),
            &[out_c, in_c, k, k],
            0,
            true,
            random(rng, out_c * in_c * k * k),
        );
        let bias = bias.then(|| store.register(format!("{name}.bias"), &[out_c], 0, true, random(rng, out_c)));
        Conv2d {
            weight,
            bias,
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    fn bn(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c: usize) -> BatchNorm {
        BatchNorm {
            gamma: store.register(format!("{name}.weight"), &[c], 0, true, random(rng, c)),
            beta: store.register(format!("{name}.bias"), &[c], 0, true, random(rng, c)),
            running_mean: store.register(format!("{name}.running_mean"), &[c], 0, false, random(rng, c)),
            running_var: store.register(
                format!("{name}.running_var"),
                &[c],
                0,
                false,
                (0..c).map(|_| rng.random_range(0.5..2.0)).collect(),
            ),
            channels: c,
        }
    }

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let c = conv(&mut store, &mut rng, "c", 2, 3, 3, 2, 1, true);
        let x = Tensor3::new(2, 5, 6, random(&mut rng, 60));
        let (y, _) = c.forward(&store, &x);
        assert_eq!(y.shape(), [3, 3, 3]);
        let w = store.get(c.weight);
        let b = store.get(c.bias.unwrap());
        for o in 0..3 {
            for oy in 0..3 {
                for ox in 0..3 {
                    let mut acc = b[o];
                    for i in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky) as isize - 1;
                                let ix = (ox * 2 + kx) as isize - 1;
                                if (0..5).contains(&iy) && (0..6).contains(&ix) {
                                    acc += w[((o * 2 + i) * 3 + ky) * 3 + kx]
                                        * x.data[(i * 5 + iy as usize) * 6 + ix as usize];
                                }
                            }
                        }
                    }
                    assert!((acc - y.data[(o * 3 + oy) * 3 + ox]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let op = Op::Conv(conv(&mut store, &mut rng, "c", 3, 4, 3, 2, 1, true));
        let x = Tensor3::new(3, 7, 9, random(&mut rng, 189));
        check_op(&op, &mut store, x, 3);

        let mut store = ParamStore::new();
        let op = Op::Conv(conv(&mut store, &mut rng, "p", 3, 2, 1, 1, 0, false));
        let x = Tensor3::new(3, 4, 4, random(&mut rng, 48));
        check_op(&op, &mut store, x, 4);
    }

    #[test]
    fn batchnorm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let op = Op::BatchNorm(bn(&mut store, &mut rng, "bn", 3));
        let x = Tensor3::new(3, 4, 5, random(&mut rng, 60));
        check_op(&op, &mut store, x, 6);
    }

    #[test]
    fn pooling_and_linear_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let x = Tensor3::new(2, 6, 6, random(&mut rng, 72));
        check_op(
            &Op::MaxPool(MaxPool {
                k: 3,
                stride: 2,
                pad: 1,
            }),
            &mut store,
            x.clone(),
            8,
        );
        check_op(&Op::GlobalAvgPool, &mut store, x, 9);
        let lin = Linear {
            weight: store.register("fc.weight", &[2, 5], 0, true, random(&mut rng, 10)),
            bias: store.register("fc.bias", &[2], 0, true, random(&mut rng, 2)),
            in_features: 5,
            out_features: 2,
        };
        check_op(&Op::Linear(lin), &mut store, Tensor3::vector(random(&mut rng, 5)), 10);
    }

    #[test]
    fn residual_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let c1 = conv(&mut store, &mut rng, "a", 2, 3, 1, 1, 0, false);
        let b1 = bn(&mut store, &mut rng, "abn", 3);
        let c2 = conv(&mut store, &mut rng, "b", 3, 4, 3, 2, 1, false);
        let ds = conv(&mut store, &mut rng, "ds", 2, 4, 1, 2, 0, false);
        let res = Residual {
            main: vec![Op::Conv(c1), Op::BatchNorm(b1), Op::Relu, Op::Conv(c2)],
            shortcut: vec![Op::Conv(ds)],
        };
        let x = Tensor3::new(2, 6, 6, random(&mut rng, 72));
        check_op(&Op::Residual(Box::new(res)), &mut store, x, 12);

        let c3 = conv(&mut store, &mut rng, "id", 2, 2, 3, 1, 1, true);
        let identity = Residual {
            main: vec![Op::Conv(c3)],
            shortcut: vec![],
        };
        let x = Tensor3::new(2, 5, 5, random(&mut rng, 50));
        check_op(&Op::Residual(Box::new(identity)), &mut store, x, 13);
    }

    #[test]
    fn replace_shifts_offsets() {
        let mut store = ParamStore::new();
        let a = store.register("a", &[2], 0, true, vec![1.0, 2.0]);
        let b = store.register("b", &[3], 1, true, vec![3.0, 4.0, 5.0]);
        let c = store.register("c", &[1], 1, true, vec![6.0]);
        store.replace(b, &[2], vec![7.0, 8.0]);
        assert_eq!(store.get(a), [1.0, 2.0]);
        assert_eq!(store.get(b), [7.0, 8.0]);
        assert_eq!(store.get(c), [6.0]);
        assert_eq!(store.len(), 5);
    }
}
