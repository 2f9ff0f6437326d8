//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during a forward pass and records one
//! [`Op`] per node. Creation order is topological order, so [`Tape::backward`]
//! is a single reverse sweep. Gradients are accumulated (summed) into each
//! reachable tensor that has `requires_grad` set; tensors without it never
//! receive a grad buffer.

pub mod gradcheck;

use crate::error::{Error, Result};


/// Handle to a tensor stored on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(pub(crate) usize);

/// A dense row-major f64 tensor, optionally attached to a tape node.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
    pub tape_id: Option<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(
                "tensor",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
            tape_id: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
            tape_id: None,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, k: f64 },
    AddScalar { a: usize },
    Neg { a: usize },
    Relu { a: usize },
    Sigmoid { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Sqrt { a: usize },
    PowScalar { a: usize, p: f64 },
    Clamp { a: usize, lo: f64, hi: f64 },
    BinaryEntropy { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    SumAxis { a: usize, axis: usize },
    MeanAxis { a: usize, axis: usize },
    Softmax { a: usize, axis: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Reshape { a: usize },
    PermuteAxes { a: usize, axes: Vec<usize> },
    PermuteTokens { a: usize, perm: Vec<usize> },
    Concat { a: usize, b: usize, axis: usize },
    Narrow { a: usize, axis: usize, start: usize },
    Grl { a: usize, lambda: f64 },
    PoolPairsMax { a: usize },
}

/// Keep freed buffers in the malloc arena instead of returning pages to the
/// kernel: every training step reallocates the same tensor sizes, and the
/// default thresholds make each step page-fault bound.
#[cfg(target_env = "gnu")]
fn tune_allocator() {
    static ONCE: std::sync::Once = std::sync::Once::new();
    ONCE.call_once(|| unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, 1 << 30);
    });
}

#[cfg(not(target_env = "gnu"))]
fn tune_allocator() {}

/// Reverse-mode tape; nodes are stored in creation (= topological) order.
pub struct Tape {
    tensors: Vec<Tensor>,
    ops: Vec<Op>,
    consumed: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// 8x8 register-tiled micro-kernel: accumulates `a[i..i+8, :] * b[:, jb..jb+8]`
/// into a local tile, then adds the tile into `out`.
#[inline]
fn matmul_tile_8x8(a: &[f64], i: usize, k: usize, b: &[f64], n: usize, jb: usize, out: &mut [f64]) {
    let mut acc = [[0.0f64; 8]; 8];
    let a0 = &a[i * k..(i + 1) * k];
    let a1 = &a[(i + 1) * k..(i + 2) * k];
    let a2 = &a[(i + 2) * k..(i + 3) * k];
    let a3 = &a[(i + 3) * k..(i + 4) * k];
    let a4 = &a[(i + 4) * k..(i + 5) * k];
    let a5 = &a[(i + 5) * k..(i + 6) * k];
    let a6 = &a[(i + 6) * k..(i + 7) * k];
    let a7 = &a[(i + 7) * k..(i + 8) * k];
    for p in 0..k {
        let brow: &[f64; 8] = b[p * n + jb..p * n + jb + 8].try_into().unwrap();
        let av = [a0[p], a1[p], a2[p], a3[p], a4[p], a5[p], a6[p], a7[p]];
        for r in 0..8 {
            let v = av[r];
            for j in 0..8 {
                acc[r][j] += v * brow[j];
            }
        }
    }
    for (r, acc_row) in acc.iter().enumerate() {
        let o = &mut out[(i + r) * n + jb..(i + r) * n + jb + 8];
        for j in 0..8 {
            o[j] += acc_row[j];
        }
    }
}

/// Row-major 2-D matmul, accumulating into `out` (must hold m*n elements).
/// The bulk runs through the 8x8 register tile; row and column remainders
/// fall back to a contiguous ikj loop.
fn matmul_2d_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    let m_blocks = m / 8 * 8;
    let n_blocks = n / 8 * 8;
    let mut i = 0;
    while i < m_blocks {
        let mut jb = 0;
        while jb < n_blocks {
            matmul_tile_8x8(a, i, k, b, n, jb, out);
            jb += 8;
        }
        if n_blocks < n {
            // column tail for this row block
            for r in i..i + 8 {
                let a_row = &a[r * k..(r + 1) * k];
                for (p, &av) in a_row.iter().enumerate() {
                    let b_row = &b[p * n + n_blocks..(p + 1) * n];
                    let o = &mut out[r * n + n_blocks..(r + 1) * n];
                    for (ov, &bv) in o.iter_mut().zip(b_row) {
                        *ov += av * bv;
                    }
                }
            }
        }
        i += 8;
    }
    for r in m_blocks..m {
        let out_row = &mut out[r * n..(r + 1) * n];
        let a_row = &a[r * k..(r + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += av * bv;
            }
        }
    }
}

fn transpose_2d_into(a: &[f64], rows: usize, cols: usize, out: &mut [f64]) {
    for i in 0..rows {
        let row = &a[i * cols..(i + 1) * cols];
        for (j, &v) in row.iter().enumerate() {
            out[j * rows + i] = v;
        }
    }
}

fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Decomposition of a broadcast pair into `(outer, mid, inner)` where the
/// shapes agree on the outer and inner runs and exactly one side is all-1
/// across the middle run. Covers every broadcast shape the model uses
/// (bias rows, per-token columns, per-key weight vectors), keeping the hot
/// loops contiguous.
#[derive(Debug, Clone, Copy, PartialEq)]
enum BroadcastPlan {
    Equal,
    /// `small_is_a`: which operand collapses over the middle run.
    OneSided {
        outer: usize,
        mid: usize,
        inner: usize,
        small_is_a: bool,
    },
    General,
}

fn plan_broadcast(a: &[usize], b: &[usize]) -> BroadcastPlan {
    if a == b {
        return BroadcastPlan::Equal;
    }
    let rank = a.len();
    let mut lo = 0;
    while lo < rank && a[lo] == b[lo] {
        lo += 1;
    }
    let mut hi = rank;
    while hi > lo && a[hi - 1] == b[hi - 1] {
        hi -= 1;
    }
    let a_ones = a[lo..hi].iter().all(|&e| e == 1);
    let b_ones = b[lo..hi].iter().all(|&e| e == 1);
    if !a_ones && !b_ones {
        return BroadcastPlan::General;
    }
    let outer: usize = a[..lo].iter().product();
    let inner: usize = a[hi..].iter().product();
    let mid: usize = if a_ones { &b[lo..hi] } else { &a[lo..hi] }.iter().product();
    BroadcastPlan::OneSided {
        outer,
        mid,
        inner,
        small_is_a: a_ones,
    }
}

/// Iterate an output shape while tracking flat offsets into two broadcast
/// operands (stride 0 on extent-1 axes). Calls `f(out_idx, a_idx, b_idx)`.
fn for_each_broadcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let numel: usize = out_shape.iter().product();
    if numel == 0 {
        return;
    }
    let rank = out_shape.len();
    let a_strides: Vec<usize> = row_major_strides(a_shape)
        .iter()
        .zip(a_shape)
        .map(|(&s, &e)| if e == 1 { 0 } else { s })
        .collect();
    let b_strides: Vec<usize> = row_major_strides(b_shape)
        .iter()
        .zip(b_shape)
        .map(|(&s, &e)| if e == 1 { 0 } else { s })
        .collect();
    let mut coords = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for out_idx in 0..numel {
        f(out_idx, ai, bi);
        // odometer increment
        for d in (0..rank).rev() {
            coords[d] += 1;
            ai += a_strides[d];
            bi += b_strides[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            ai -= a_strides[d] * out_shape[d];
            bi -= b_strides[d] * out_shape[d];
        }
    }
}

/// Split a shape at `axis` into (outer, extent, inner) products.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary entropy with the 0·log 0 = 0 convention.
fn binary_entropy(p: f64) -> f64 {
    let mut h = 0.0;
    if p > 0.0 {
        h -= p * p.ln();
    }
    let q = 1.0 - p;
    if q > 0.0 {
        h -= q * q.ln();
    }
    h
}

impl Tape {
    pub fn new() -> Self {
        tune_allocator();
        Tape {
            tensors: Vec::new(),
            ops: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.tensors[t.0].shape
    }

    pub fn value(&self, t: TensorRef) -> &[f64] {
        &self.tensors[t.0].data
    }

    /// Gradient of a tensor after `backward`; `None` if unreachable or not tracked.
    pub fn grad(&self, t: TensorRef) -> Option<&[f64]> {
        self.tensors[t.0].grad.as_deref()
    }

    pub fn requires_grad(&self, t: TensorRef) -> bool {
        self.tensors[t.0].requires_grad
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<TensorRef> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::contract(
                "leaf",
                format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            ));
        }
        Ok(self.push(data, shape.to_vec(), requires_grad, Op::Leaf))
    }

    pub fn scalar(&mut self, v: f64) -> TensorRef {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: &[usize]) -> Result<TensorRef> {
        self.leaf(data, shape, false)
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorRef {
        let id = self.tensors.len();
        self.tensors.push(Tensor {
            shape,
            data,
            requires_grad,
            grad: None,
            tape_id: Some(id),
        });
        self.ops.push(op);
        TensorRef(id)
    }

    fn rg(&self, t: TensorRef) -> bool {
        self.tensors[t.0].requires_grad
    }

    // ── forward ops ──────────────────────────────────────────────────────

    /// Batched matrix product `(..,m,k) x (..,k,n) -> (..,m,n)`. Leading
    /// batch extents broadcast where equal or 1; a missing leading extent
    /// counts as 1.
    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (a_shape, b_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(Error::dimension("matmul", &a_shape, &b_shape));
        }
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let (k2, n) = (b_shape[b_shape.len() - 2], b_shape[b_shape.len() - 1]);
        if k != k2 {
            return Err(Error::dimension("matmul", &a_shape, &b_shape));
        }
        let batch_rank = (a_shape.len() - 2).max(b_shape.len() - 2);
        let mut batch_shape = vec![1usize; batch_rank];
        for d in 0..batch_rank {
            let da = leading_extent(&a_shape, batch_rank, d);
            let db = leading_extent(&b_shape, batch_rank, d);
            if da != db && da != 1 && db != 1 {
                return Err(Error::dimension("matmul", &a_shape, &b_shape));
            }
            batch_shape[d] = da.max(db);
        }
        let batches: usize = batch_shape.iter().product();
        let mut out = vec![0.0; batches * m * n];
        let a_data = &self.tensors[a.0].data;
        let b_data = &self.tensors[b.0].data;
        for bi in 0..batches {
            let ai = map_batch(bi, &batch_shape, &a_shape, batch_rank);
            let bbi = map_batch(bi, &batch_shape, &b_shape, batch_rank);
            matmul_2d_acc(
                &a_data[ai * m * k..(ai + 1) * m * k],
                &b_data[bbi * k * n..(bbi + 1) * k * n],
                m,
                k,
                n,
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
        let mut out_shape = batch_shape;
        out_shape.push(m);
        out_shape.push(n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, out_shape, rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    fn binary_shape(&self, op: &'static str, a: TensorRef, b: TensorRef) -> Result<Vec<usize>> {
        let (a_shape, b_shape) = (self.shape(a), self.shape(b));
        if a_shape.len() != b_shape.len() {
            return Err(Error::dimension(op, a_shape, b_shape));
        }
        let mut out = Vec::with_capacity(a_shape.len());
        for (&da, &db) in a_shape.iter().zip(b_shape) {
            if da != db && da != 1 && db != 1 {
                return Err(Error::dimension(op, a_shape, b_shape));
            }
            out.push(da.max(db));
        }
        Ok(out)
    }

    fn binary(
        &mut self,
        op_name: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<TensorRef> {
        let out_shape = self.binary_shape(op_name, a, b)?;
        let numel: usize = out_shape.iter().product();
        let mut out;
        {
            let a_t = &self.tensors[a.0];
            let b_t = &self.tensors[b.0];
            match plan_broadcast(&a_t.shape, &b_t.shape) {
                BroadcastPlan::Equal => {
                    out = a_t.data.iter().zip(&b_t.data).map(|(&x, &y)| f(x, y)).collect();
                }
                BroadcastPlan::OneSided { outer, mid, inner, small_is_a } => {
                    out = vec![0.0; numel];
                    let (big, small) = if small_is_a {
                        (&b_t.data, &a_t.data)
                    } else {
                        (&a_t.data, &b_t.data)
                    };
                    if inner == 1 {
                        for o in 0..outer {
                            let sv = small[o];
                            let big_row = &big[o * mid..(o + 1) * mid];
                            let out_row = &mut out[o * mid..(o + 1) * mid];
                            for (ov, &bv) in out_row.iter_mut().zip(big_row) {
                                *ov = if small_is_a { f(sv, bv) } else { f(bv, sv) };
                            }
                        }
                    } else {
                        for o in 0..outer {
                            let small_row = &small[o * inner..(o + 1) * inner];
                            for m in 0..mid {
                                let off = (o * mid + m) * inner;
                                let big_row = &big[off..off + inner];
                                let out_row = &mut out[off..off + inner];
                                for ((ov, &bv), &sv) in out_row.iter_mut().zip(big_row).zip(small_row) {
                                    *ov = if small_is_a { f(sv, bv) } else { f(bv, sv) };
                                }
                            }
                        }
                    }
                }
                BroadcastPlan::General => {
                    out = vec![0.0; numel];
                    for_each_broadcast(&out_shape, &a_t.shape, &b_t.shape, |oi, ai, bi| {
                        out[oi] = f(a_t.data[ai], b_t.data[bi]);
                    });
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, out_shape, rg, op))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    fn unary(&mut self, a: TensorRef, f: impl Fn(f64) -> f64, op: Op) -> TensorRef {
        let t = &self.tensors[a.0];
        let data: Vec<f64> = t.data.iter().map(|&x| f(x)).collect();
        let shape = t.shape.clone();
        let rg = t.requires_grad;
        self.push(data, shape, rg, op)
    }

    pub fn scale(&mut self, a: TensorRef, k: f64) -> TensorRef {
        self.unary(a, |x| k * x, Op::Scale { a: a.0, k })
    }

    pub fn add_scalar(&mut self, a: TensorRef, k: f64) -> TensorRef {
        self.unary(a, |x| x + k, Op::AddScalar { a: a.0 })
    }

    pub fn neg(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, |x| -x, Op::Neg { a: a.0 })
    }

    pub fn relu(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, |x| x.max(0.0), Op::Relu { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, stable_sigmoid, Op::Sigmoid { a: a.0 })
    }

    pub fn exp(&mut self, a: TensorRef) -> TensorRef {
        self.unary(a, f64::exp, Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: TensorRef) -> Result<TensorRef> {
        if let Some(&bad) = self.tensors[a.0].data.iter().find(|&&x| x <= 0.0) {
            return Err(Error::numeric("log", format!("nonpositive input {}", bad)));
        }
        Ok(self.unary(a, f64::ln, Op::Log { a: a.0 }))
    }

    pub fn sqrt(&mut self, a: TensorRef) -> Result<TensorRef> {
        if let Some(&bad) = self.tensors[a.0].data.iter().find(|&&x| x < 0.0) {
            return Err(Error::numeric("sqrt", format!("negative input {}", bad)));
        }
        Ok(self.unary(a, f64::sqrt, Op::Sqrt { a: a.0 }))
    }

    /// Elementwise `x^p`. Gradient at x=0 with p<1 is defined as 0.
    pub fn pow_scalar(&mut self, a: TensorRef, p: f64) -> TensorRef {
        self.unary(a, |x| x.powf(p), Op::PowScalar { a: a.0, p })
    }

    /// Clamp to `[lo, hi]`; gradient passes through the interior (inclusive).
    pub fn clamp(&mut self, a: TensorRef, lo: f64, hi: f64) -> TensorRef {
        self.unary(a, |x| x.clamp(lo, hi), Op::Clamp { a: a.0, lo, hi })
    }

    /// Binary entropy `-p ln p - (1-p) ln(1-p)` with 0·log 0 = 0.
    /// Inputs must lie in [0, 1].
    pub fn binary_entropy(&mut self, a: TensorRef) -> Result<TensorRef> {
        if let Some(&bad) = self.tensors[a.0].data.iter().find(|&&p| !(0.0..=1.0).contains(&p)) {
            return Err(Error::contract(
                "binary_entropy",
                format!("probability {} outside [0, 1]", bad),
            ));
        }
        Ok(self.unary(a, binary_entropy, Op::BinaryEntropy { a: a.0 }))
    }

    pub fn sum(&mut self, a: TensorRef) -> TensorRef {
        let s: f64 = self.tensors[a.0].data.iter().sum();
        let rg = self.rg(a);
        self.push(vec![s], vec![1], rg, Op::Sum { a: a.0 })
    }

    pub fn mean(&mut self, a: TensorRef) -> TensorRef {
        let t = &self.tensors[a.0];
        let s: f64 = t.data.iter().sum();
        let n = t.data.len() as f64;
        let rg = t.requires_grad;
        self.push(vec![s / n], vec![1], rg, Op::Mean { a: a.0 })
    }

    fn reduce_axis(&mut self, a: TensorRef, axis: usize, mean: bool) -> Result<TensorRef> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(
                "reduce_axis",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let mut out = vec![0.0; outer * inner];
        {
            let data = &self.tensors[a.0].data;
            if inner == 1 {
                for (o, dst) in out.iter_mut().enumerate() {
                    let mut acc = 0.0;
                    for &s in &data[o * ext..(o + 1) * ext] {
                        acc += s;
                    }
                    *dst = acc;
                }
            } else {
                for o in 0..outer {
                    for e in 0..ext {
                        let src = &data[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                        let dst = &mut out[o * inner..(o + 1) * inner];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
        if mean {
            let inv = 1.0 / ext as f64;
            for v in &mut out {
                *v *= inv;
            }
        }
        let rg = self.rg(a);
        let op = if mean {
            Op::MeanAxis { a: a.0, axis }
        } else {
            Op::SumAxis { a: a.0, axis }
        };
        Ok(self.push(out, out_shape, rg, op))
    }

    pub fn sum_axis(&mut self, a: TensorRef, axis: usize) -> Result<TensorRef> {
        self.reduce_axis(a, axis, false)
    }

    pub fn mean_axis(&mut self, a: TensorRef, axis: usize) -> Result<TensorRef> {
        self.reduce_axis(a, axis, true)
    }

    /// Max-shifted softmax along `axis`; slices sum to 1.
    pub fn softmax(&mut self, a: TensorRef, axis: usize) -> Result<TensorRef> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(
                "softmax",
                format!("axis {} out of range for shape {:?}", axis, shape),
            ));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let data = &self.tensors[a.0].data;
        let mut out = vec![0.0; data.len()];
        if inner == 1 {
            for o in 0..outer {
                let row = &data[o * ext..(o + 1) * ext];
                let dst = &mut out[o * ext..(o + 1) * ext];
                let mut max_val = f64::NEG_INFINITY;
                for &v in row {
                    if !v.is_finite() {
                        return Err(Error::numeric("softmax", format!("non-finite input {}", v)));
                    }
                    max_val = max_val.max(v);
                }
                let mut denom = 0.0;
                for (d, &v) in dst.iter_mut().zip(row) {
                    let ex = (v - max_val).exp();
                    *d = ex;
                    denom += ex;
                }
                let inv = 1.0 / denom;
                for d in dst.iter_mut() {
                    *d *= inv;
                }
            }
        } else {
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * ext * inner + i;
                    let mut max_val = f64::NEG_INFINITY;
                    for e in 0..ext {
                        let v = data[base + e * inner];
                        if !v.is_finite() {
                            return Err(Error::numeric("softmax", format!("non-finite input {}", v)));
                        }
                        max_val = max_val.max(v);
                    }
                    let mut denom = 0.0;
                    for e in 0..ext {
                        let ex = (data[base + e * inner] - max_val).exp();
                        out[base + e * inner] = ex;
                        denom += ex;
                    }
                    let inv = 1.0 / denom;
                    for e in 0..ext {
                        out[base + e * inner] *= inv;
                    }
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, shape, rg, Op::Softmax { a: a.0, axis }))
    }

    /// Layer normalization over the last axis followed by affine gain/bias.
    pub fn layer_norm(
        &mut self,
        x: TensorRef,
        gain: TensorRef,
        bias: TensorRef,
        eps: f64,
    ) -> Result<TensorRef> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().ok_or_else(|| Error::contract("layer_norm", "rank-0 input"))?;
        if self.shape(gain) != [c] {
            return Err(Error::dimension("layer_norm", &shape, self.shape(gain)));
        }
        if self.shape(bias) != [c] {
            return Err(Error::dimension("layer_norm", &shape, self.shape(bias)));
        }
        if eps <= 0.0 {
            return Err(Error::contract("layer_norm", format!("eps {} must be positive", eps)));
        }
        let rows = self.tensors[x.0].data.len() / c;
        let mut out = vec![0.0; rows * c];
        {
            let data = &self.tensors[x.0].data;
            let g = &self.tensors[gain.0].data;
            let b = &self.tensors[bias.0].data;
            for r in 0..rows {
                let row = &data[r * c..(r + 1) * c];
                let mean: f64 = row.iter().sum::<f64>() / c as f64;
                let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv_std = 1.0 / (var + eps).sqrt();
                let dst = &mut out[r * c..(r + 1) * c];
                for j in 0..c {
                    dst[j] = (row[j] - mean) * inv_std * g[j] + b[j];
                }
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, eps },
        ))
    }

    pub fn reshape(&mut self, a: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        let numel: usize = shape.iter().product();
        if numel != self.tensors[a.0].data.len() {
            return Err(Error::dimension("reshape", self.shape(a), shape));
        }
        let data = self.tensors[a.0].data.clone();
        let rg = self.rg(a);
        Ok(self.push(data, shape.to_vec(), rg, Op::Reshape { a: a.0 }))
    }

    /// Reorder axes: `out[coords] = in[coords[axes[d]] at axis axes[d]]`,
    /// i.e. output axis `d` takes input axis `axes[d]`.
    pub fn permute_axes(&mut self, a: TensorRef, axes: &[usize]) -> Result<TensorRef> {
        let in_shape = self.shape(a).to_vec();
        let rank = in_shape.len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(Error::contract(
                "permute_axes",
                format!("axes {:?} is not a permutation of 0..{}", axes, rank),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&ax| in_shape[ax]).collect();
        let out = permute_copy(&self.tensors[a.0].data, &in_shape, axes, &out_shape);
        let rg = self.rg(a);
        Ok(self.push(out, out_shape, rg, Op::PermuteAxes { a: a.0, axes: axes.to_vec() }))
    }

    /// Transpose the trailing two axes of a batched matrix.
    pub fn transpose_last2(&mut self, a: TensorRef) -> Result<TensorRef> {
        let rank = self.shape(a).len();
        if rank < 2 {
            return Err(Error::contract("transpose_last2", "rank must be >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute_axes(a, &axes)
    }

    /// Permute the token axis of a `(batch, tokens, channels)` tensor:
    /// `out[:, i, :] = in[:, perm[i], :]`. `perm` must be a bijection.
    pub fn permute_tokens(&mut self, a: TensorRef, perm: &[usize]) -> Result<TensorRef> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 3 {
            return Err(Error::contract(
                "permute_tokens",
                format!("expected rank 3, got {:?}", shape),
            ));
        }
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        let mut seen = vec![false; n];
        if perm.len() != n || perm.iter().any(|&p| p >= n || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::contract(
                "permute_tokens",
                format!("perm of length {} is not a bijection over {} tokens", perm.len(), n),
            ));
        }
        let data = &self.tensors[a.0].data;
        let mut out = vec![0.0; data.len()];
        for bi in 0..b {
            for (i, &src) in perm.iter().enumerate() {
                let dst_off = (bi * n + i) * c;
                let src_off = (bi * n + src) * c;
                out[dst_off..dst_off + c].copy_from_slice(&data[src_off..src_off + c]);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, shape, rg, Op::PermuteTokens { a: a.0, perm: perm.to_vec() }))
    }

    pub fn concat(&mut self, a: TensorRef, b: TensorRef, axis: usize) -> Result<TensorRef> {
        let (a_shape, b_shape) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if a_shape.len() != b_shape.len() || axis >= a_shape.len() {
            return Err(Error::dimension("concat", &a_shape, &b_shape));
        }
        for d in 0..a_shape.len() {
            if d != axis && a_shape[d] != b_shape[d] {
                return Err(Error::dimension("concat", &a_shape, &b_shape));
            }
        }
        let (outer, ae, inner) = axis_split(&a_shape, axis);
        let be = b_shape[axis];
        let mut out_shape = a_shape.clone();
        out_shape[axis] = ae + be;
        let mut out = vec![0.0; outer * (ae + be) * inner];
        {
            let a_data = &self.tensors[a.0].data;
            let b_data = &self.tensors[b.0].data;
            let a_blk = ae * inner;
            let b_blk = be * inner;
            for o in 0..outer {
                let dst = &mut out[o * (a_blk + b_blk)..(o + 1) * (a_blk + b_blk)];
                dst[..a_blk].copy_from_slice(&a_data[o * a_blk..(o + 1) * a_blk]);
                dst[a_blk..].copy_from_slice(&b_data[o * b_blk..(o + 1) * b_blk]);
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, out_shape, rg, Op::Concat { a: a.0, b: b.0, axis }))
    }

    /// Slice `len` extents starting at `start` along `axis`.
    pub fn narrow(&mut self, a: TensorRef, axis: usize, start: usize, len: usize) -> Result<TensorRef> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::contract(
                "narrow",
                format!("[{}, {}) on axis {} of {:?}", start, start + len, axis, shape),
            ));
        }
        let (outer, ext, inner) = axis_split(&shape, axis);
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let mut out = vec![0.0; outer * len * inner];
        {
            let data = &self.tensors[a.0].data;
            for o in 0..outer {
                let src = &data[(o * ext + start) * inner..(o * ext + start + len) * inner];
                out[o * len * inner..(o + 1) * len * inner].copy_from_slice(src);
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, out_shape, rg, Op::Narrow { a: a.0, axis, start }))
    }

    /// Gradient reversal: identity forward, gradient scaled by `-lambda`.
    pub fn grl(&mut self, a: TensorRef, lambda: f64) -> Result<TensorRef> {
        if lambda < 0.0 {
            return Err(Error::contract("grl", format!("lambda {} must be >= 0", lambda)));
        }
        let data = self.tensors[a.0].data.clone();
        let shape = self.tensors[a.0].shape.clone();
        let rg = self.rg(a);
        Ok(self.push(data, shape, rg, Op::Grl { a: a.0, lambda }))
    }

    /// Non-overlapping width-2 max pooling over the last axis; ties route the
    /// gradient to the first element of the pair.
    pub fn pool_pairs_max(&mut self, a: TensorRef) -> Result<TensorRef> {
        let shape = self.shape(a).to_vec();
        let c = *shape.last().ok_or_else(|| Error::contract("pool_pairs_max", "rank-0 input"))?;
        if c % 2 != 0 {
            return Err(Error::contract(
                "pool_pairs_max",
                format!("last extent {} must be even", c),
            ));
        }
        let mut out_shape = shape.clone();
        *out_shape.last_mut().unwrap() = c / 2;
        let data = &self.tensors[a.0].data;
        let mut out = vec![0.0; data.len() / 2];
        for (o, pair) in out.iter_mut().zip(data.chunks_exact(2)) {
            *o = if pair[0] >= pair[1] { pair[0] } else { pair[1] };
        }
        let rg = self.rg(a);
        Ok(self.push(out, out_shape, rg, Op::PoolPairsMax { a: a.0 }))
    }

    // ── backward ─────────────────────────────────────────────────────────

    /// Reverse sweep accumulating gradients into every reachable
    /// `requires_grad` tensor. The tape is consumed: a second call fails.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.consumed {
            return Err(Error::contract("backward", "tape already consumed"));
        }
        self.consumed = true;
        if self.tensors[loss.0].data.len() != 1 {
            return Err(Error::contract(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        if !self.tensors[loss.0].requires_grad {
            return Ok(());
        }
        self.tensors[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.tensors[i].requires_grad || self.tensors[i].grad.is_none() {
                continue;
            }
            let g = std::mem::take(&mut self.tensors[i].grad).unwrap();
            self.propagate(i, &g);
            self.tensors[i].grad = Some(g);
        }
        Ok(())
    }

    fn grad_buf(&mut self, idx: usize) -> &mut Vec<f64> {
        let numel = self.tensors[idx].data.len();
        self.tensors[idx].grad.get_or_insert_with(|| vec![0.0; numel])
    }

    fn accumulate(&mut self, idx: usize, src: &[f64]) {
        if !self.tensors[idx].requires_grad {
            return;
        }
        let buf = self.grad_buf(idx);
        for (d, &s) in buf.iter_mut().zip(src) {
            *d += s;
        }
    }

    /// Accumulate an owned gradient; the first contribution moves the buffer
    /// instead of zero-filling and adding.
    fn accumulate_owned(&mut self, idx: usize, src: Vec<f64>) {
        if !self.tensors[idx].requires_grad {
            return;
        }
        match &mut self.tensors[idx].grad {
            slot @ None => *slot = Some(src),
            Some(buf) => {
                for (d, s) in buf.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
    }

    fn propagate(&mut self, node: usize, g: &[f64]) {
        match self.ops[node].clone() {
            Op::Leaf => {}
            Op::MatMul { a, b } => self.backward_matmul(node, a, b, g),
            Op::Add { a, b } => {
                let out_shape = self.tensors[node].shape.clone();
                if self.tensors[a].requires_grad {
                    self.accumulate_broadcast(a, &out_shape, g, 1.0);
                }
                if self.tensors[b].requires_grad {
                    self.accumulate_broadcast(b, &out_shape, g, 1.0);
                }
            }
            Op::Sub { a, b } => {
                let out_shape = self.tensors[node].shape.clone();
                if self.tensors[a].requires_grad {
                    self.accumulate_broadcast(a, &out_shape, g, 1.0);
                }
                if self.tensors[b].requires_grad {
                    self.accumulate_broadcast(b, &out_shape, g, -1.0);
                }
            }
            Op::Mul { a, b } => {
                let out_shape = self.tensors[node].shape.clone();
                if self.tensors[a].requires_grad {
                    self.accumulate_broadcast_scaled_by(a, b, &out_shape, g);
                }
                if self.tensors[b].requires_grad {
                    self.accumulate_broadcast_scaled_by(b, a, &out_shape, g);
                }
            }
            Op::Scale { a, k } => {
                if self.tensors[a].requires_grad {
                    let dg: Vec<f64> = g.iter().map(|&v| k * v).collect();
                    self.accumulate_owned(a, dg);
                }
            }
            Op::AddScalar { a } | Op::Reshape { a } => self.accumulate(a, g),
            Op::Neg { a } => {
                let dg: Vec<f64> = g.iter().map(|&v| -v).collect();
                self.accumulate_owned(a, dg);
            }
            Op::Relu { a } => {
                let dg: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[a].data)
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                self.accumulate_owned(a, dg);
            }
            Op::Sigmoid { a } => {
                let dg: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[node].data)
                    .map(|(&gv, &s)| gv * s * (1.0 - s))
                    .collect();
                self.accumulate_owned(a, dg);
            }
            Op::Exp { a } => {
                let dg: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[node].data)
                    .map(|(&gv, &e)| gv * e)
                    .collect();
                self.accumulate_owned(a, dg);
            }
            Op::Log { a } => {
                let dg: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[a].data)
                    .map(|(&gv, &x)| gv / x)
                    .collect();
                self.accumulate_owned(a, dg);
            }
            Op::Sqrt { a } => {
                let dg: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[node].data)
                    .map(|(&gv, &s)| if s == 0.0 { 0.0 } else { gv / (2.0 * s) })
                    .collect();
                self.accumulate_owned(a, dg);
            }
            Op::PowScalar { a, p } => {
                let dg: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[a].data)
                    .map(|(&gv, &x)| {
                        if p == 0.0 || (x == 0.0 && p < 1.0) {
                            0.0
                        } else {
                            gv * p * x.powf(p - 1.0)
                        }
                    })
                    .collect();
                self.accumulate_owned(a, dg);
            }
            Op::Clamp { a, lo, hi } => {
                let dg: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[a].data)
                    .map(|(&gv, &x)| if (lo..=hi).contains(&x) { gv } else { 0.0 })
                    .collect();
                self.accumulate_owned(a, dg);
            }
            Op::BinaryEntropy { a } => {
                // dh/dp = ln((1-p)/p); 0 at the endpoints by convention.
                let dg: Vec<f64> = g
                    .iter()
                    .zip(&self.tensors[a].data)
                    .map(|(&gv, &p)| {
                        if p <= 0.0 || p >= 1.0 {
                            0.0
                        } else {
                            gv * ((1.0 - p) / p).ln()
                        }
                    })
                    .collect();
                self.accumulate_owned(a, dg);
            }
            Op::Sum { a } => {
                let n = self.tensors[a].data.len();
                self.accumulate_owned(a, vec![g[0]; n]);
            }
            Op::Mean { a } => {
                let n = self.tensors[a].data.len();
                self.accumulate_owned(a, vec![g[0] / n as f64; n]);
            }
            Op::SumAxis { a, axis } | Op::MeanAxis { a, axis } => {
                let in_shape = self.tensors[a].shape.clone();
                let (outer, ext, inner) = axis_split(&in_shape, axis);
                let scale = match self.ops[node] {
                    Op::MeanAxis { .. } => 1.0 / ext as f64,
                    _ => 1.0,
                };
                let mut dg = vec![0.0; self.tensors[a].data.len()];
                if inner == 1 {
                    for o in 0..outer {
                        let gv = g[o] * scale;
                        for d in &mut dg[o * ext..(o + 1) * ext] {
                            *d = gv;
                        }
                    }
                } else {
                    for o in 0..outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for e in 0..ext {
                            let dst = &mut dg[(o * ext + e) * inner..(o * ext + e + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += s * scale;
                            }
                        }
                    }
                }
                self.accumulate_owned(a, dg);
            }
            Op::Softmax { a, axis } => {
                let s = &self.tensors[node].data;
                let shape = self.tensors[node].shape.clone();
                let (outer, ext, inner) = axis_split(&shape, axis);
                let mut dg = vec![0.0; s.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * ext * inner + i;
                        let mut dot = 0.0;
                        for e in 0..ext {
                            let idx = base + e * inner;
                            dot += g[idx] * s[idx];
                        }
                        for e in 0..ext {
                            let idx = base + e * inner;
                            dg[idx] = s[idx] * (g[idx] - dot);
                        }
                    }
                }
                self.accumulate_owned(a, dg);
            }
            Op::LayerNorm { x, gain, bias, eps } => self.backward_layer_norm(x, gain, bias, eps, g),
            Op::PermuteAxes { a, axes } => {
                // invert the permutation, then push the gradient back
                let mut inv = vec![0usize; axes.len()];
                for (d, &ax) in axes.iter().enumerate() {
                    inv[ax] = d;
                }
                let out_shape = self.tensors[node].shape.clone();
                let in_shape = self.tensors[a].shape.clone();
                let dg = permute_copy(g, &out_shape, &inv, &in_shape);
                self.accumulate_owned(a, dg);
            }
            Op::PermuteTokens { a, perm } => {
                let shape = self.tensors[a].shape.clone();
                let (b, n, c) = (shape[0], shape[1], shape[2]);
                let mut dg = vec![0.0; b * n * c];
                for bi in 0..b {
                    for (i, &src) in perm.iter().enumerate() {
                        let src_off = (bi * n + src) * c;
                        let g_off = (bi * n + i) * c;
                        for j in 0..c {
                            dg[src_off + j] += g[g_off + j];
                        }
                    }
                }
                self.accumulate_owned(a, dg);
            }
            Op::Concat { a, b, axis } => {
                let a_shape = self.tensors[a].shape.clone();
                let b_shape = self.tensors[b].shape.clone();
                let (outer, ae, inner) = axis_split(&a_shape, axis);
                let be = b_shape[axis];
                let (a_blk, b_blk) = (ae * inner, be * inner);
                if self.tensors[a].requires_grad {
                    let mut dga = vec![0.0; outer * a_blk];
                    for o in 0..outer {
                        dga[o * a_blk..(o + 1) * a_blk]
                            .copy_from_slice(&g[o * (a_blk + b_blk)..o * (a_blk + b_blk) + a_blk]);
                    }
                    self.accumulate_owned(a, dga);
                }
                if self.tensors[b].requires_grad {
                    let mut dgb = vec![0.0; outer * b_blk];
                    for o in 0..outer {
                        dgb[o * b_blk..(o + 1) * b_blk].copy_from_slice(
                            &g[o * (a_blk + b_blk) + a_blk..(o + 1) * (a_blk + b_blk)],
                        );
                    }
                    self.accumulate_owned(b, dgb);
                }
            }
            Op::Narrow { a, axis, start } => {
                let in_shape = self.tensors[a].shape.clone();
                let (outer, ext, inner) = axis_split(&in_shape, axis);
                let len = self.tensors[node].shape[axis];
                let mut dg = vec![0.0; self.tensors[a].data.len()];
                for o in 0..outer {
                    let dst = &mut dg[(o * ext + start) * inner..(o * ext + start + len) * inner];
                    dst.copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accumulate_owned(a, dg);
            }
            Op::Grl { a, lambda } => {
                let dg: Vec<f64> = g.iter().map(|&v| -lambda * v).collect();
                self.accumulate_owned(a, dg);
            }
            Op::PoolPairsMax { a } => {
                let data = &self.tensors[a].data;
                let mut dg = vec![0.0; data.len()];
                for (i, pair) in data.chunks_exact(2).enumerate() {
                    if pair[0] >= pair[1] {
                        dg[2 * i] = g[i];
                    } else {
                        dg[2 * i + 1] = g[i];
                    }
                }
                self.accumulate_owned(a, dg);
            }
        }
    }

    /// Accumulate `sign * g` into input `idx`, summing over broadcast axes.
    fn accumulate_broadcast(&mut self, idx: usize, out_shape: &[usize], g: &[f64], sign: f64) {
        let in_shape = self.tensors[idx].shape.clone();
        if in_shape == out_shape {
            if sign == 1.0 {
                self.accumulate(idx, g);
            } else {
                let dg: Vec<f64> = g.iter().map(|&v| sign * v).collect();
                self.accumulate_owned(idx, dg);
            }
            return;
        }
        let mut dg = vec![0.0; self.tensors[idx].data.len()];
        match plan_broadcast(&in_shape, out_shape) {
            BroadcastPlan::OneSided { outer, mid, inner, small_is_a: true } => {
                if inner == 1 {
                    for o in 0..outer {
                        let mut acc = 0.0;
                        for &gv in &g[o * mid..(o + 1) * mid] {
                            acc += gv;
                        }
                        dg[o] = sign * acc;
                    }
                } else {
                    for o in 0..outer {
                        let dst = &mut dg[o * inner..(o + 1) * inner];
                        for m in 0..mid {
                            let src = &g[(o * mid + m) * inner..(o * mid + m + 1) * inner];
                            for (d, &s) in dst.iter_mut().zip(src) {
                                *d += sign * s;
                            }
                        }
                    }
                }
            }
            _ => {
                for_each_broadcast(out_shape, &in_shape, &in_shape, |oi, ai, _| {
                    dg[ai] += sign * g[oi];
                });
            }
        }
        self.accumulate_owned(idx, dg);
    }

    /// Product-rule gradient for `Mul`: d(target) += g * other, reduced over
    /// broadcast axes of the target operand.
    fn accumulate_broadcast_scaled_by(
        &mut self,
        target: usize,
        other: usize,
        out_shape: &[usize],
        g: &[f64],
    ) {
        let t_shape = self.tensors[target].shape.clone();
        let o_shape = self.tensors[other].shape.clone();
        let mut dg = vec![0.0; self.tensors[target].data.len()];
        {
            let o_data = &self.tensors[other].data;
            let t_data_len = dg.len();
            match plan_broadcast(&t_shape, &o_shape) {
                BroadcastPlan::Equal => {
                    for ((d, &gv), &ov) in dg.iter_mut().zip(g).zip(o_data) {
                        *d = gv * ov;
                    }
                }
                BroadcastPlan::OneSided { outer, mid, inner, small_is_a } => {
                    if small_is_a {
                        // target collapses over the middle run
                        if inner == 1 {
                            for o in 0..outer {
                                let mut acc = 0.0;
                                let base = o * mid;
                                for m in 0..mid {
                                    acc += g[base + m] * o_data[base + m];
                                }
                                dg[o] = acc;
                            }
                        } else {
                            for o in 0..outer {
                                let dst = &mut dg[o * inner..(o + 1) * inner];
                                for m in 0..mid {
                                    let off = (o * mid + m) * inner;
                                    let gs = &g[off..off + inner];
                                    let os = &o_data[off..off + inner];
                                    for ((d, &gv), &ov) in dst.iter_mut().zip(gs).zip(os) {
                                        *d += gv * ov;
                                    }
                                }
                            }
                        }
                    } else {
                        // other is the small side
                        debug_assert_eq!(t_data_len, g.len());
                        if inner == 1 {
                            for o in 0..outer {
                                let ov = o_data[o];
                                let base = o * mid;
                                for m in 0..mid {
                                    dg[base + m] = g[base + m] * ov;
                                }
                            }
                        } else {
                            for o in 0..outer {
                                let os = &o_data[o * inner..(o + 1) * inner];
                                for m in 0..mid {
                                    let off = (o * mid + m) * inner;
                                    let gs = &g[off..off + inner];
                                    let dst = &mut dg[off..off + inner];
                                    for ((d, &gv), &ov) in dst.iter_mut().zip(gs).zip(os) {
                                        *d = gv * ov;
                                    }
                                }
                            }
                        }
                    }
                }
                BroadcastPlan::General => {
                    for_each_broadcast(out_shape, &t_shape, &o_shape, |oi, ti, oi2| {
                        dg[ti] += g[oi] * o_data[oi2];
                    });
                }
            }
        }
        self.accumulate_owned(target, dg);
    }

    fn backward_matmul(&mut self, node: usize, a: usize, b: usize, g: &[f64]) {
        let a_shape = self.tensors[a].shape.clone();
        let b_shape = self.tensors[b].shape.clone();
        let out_shape = self.tensors[node].shape.clone();
        let (m, k) = (a_shape[a_shape.len() - 2], a_shape[a_shape.len() - 1]);
        let n = b_shape[b_shape.len() - 1];
        let batch_rank = out_shape.len() - 2;
        let batch_shape = &out_shape[..batch_rank];
        let batches: usize = batch_shape.iter().product();

        if self.tensors[a].requires_grad {
            let mut dga = vec![0.0; self.tensors[a].data.len()];
            {
                let b_data = &self.tensors[b].data;
                let mut bt = vec![0.0; k * n];
                let mut last_bbi = usize::MAX;
                for bi in 0..batches {
                    let ai = map_batch(bi, batch_shape, &a_shape, batch_rank);
                    let bbi = map_batch(bi, batch_shape, &b_shape, batch_rank);
                    // dA = dC · B^T, transposing each distinct B block once
                    if bbi != last_bbi {
                        transpose_2d_into(&b_data[bbi * k * n..(bbi + 1) * k * n], k, n, &mut bt);
                        last_bbi = bbi;
                    }
                    matmul_2d_acc(
                        &g[bi * m * n..(bi + 1) * m * n],
                        &bt,
                        m,
                        n,
                        k,
                        &mut dga[ai * m * k..(ai + 1) * m * k],
                    );
                }
            }
            self.accumulate_owned(a, dga);
        }
        if self.tensors[b].requires_grad {
            let mut dgb = vec![0.0; self.tensors[b].data.len()];
            {
                let a_data = &self.tensors[a].data;
                let mut at = vec![0.0; m * k];
                let mut last_ai = usize::MAX;
                for bi in 0..batches {
                    let ai = map_batch(bi, batch_shape, &a_shape, batch_rank);
                    let bbi = map_batch(bi, batch_shape, &b_shape, batch_rank);
                    // dB = A^T · dC
                    if ai != last_ai {
                        transpose_2d_into(&a_data[ai * m * k..(ai + 1) * m * k], m, k, &mut at);
                        last_ai = ai;
                    }
                    matmul_2d_acc(
                        &at,
                        &g[bi * m * n..(bi + 1) * m * n],
                        k,
                        m,
                        n,
                        &mut dgb[bbi * k * n..(bbi + 1) * k * n],
                    );
                }
            }
            self.accumulate_owned(b, dgb);
        }
    }

    fn backward_layer_norm(&mut self, x: usize, gain: usize, bias: usize, eps: f64, g: &[f64]) {
        let c = *self.tensors[x].shape.last().unwrap();
        let rows = self.tensors[x].data.len() / c;
        let mut dx = vec![0.0; rows * c];
        let mut dgain = vec![0.0; c];
        let mut dbias = vec![0.0; c];
        {
            let data = &self.tensors[x].data;
            let gain_data = &self.tensors[gain].data;
            for r in 0..rows {
                let row = &data[r * c..(r + 1) * c];
                let g_row = &g[r * c..(r + 1) * c];
                let mean: f64 = row.iter().sum::<f64>() / c as f64;
                let var: f64 = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
                let inv_std = 1.0 / (var + eps).sqrt();

                let mut dxhat_sum = 0.0;
                let mut dxhat_xhat_sum = 0.0;
                for j in 0..c {
                    let xhat = (row[j] - mean) * inv_std;
                    dgain[j] += g_row[j] * xhat;
                    dbias[j] += g_row[j];
                    let dxhat = g_row[j] * gain_data[j];
                    dxhat_sum += dxhat;
                    dxhat_xhat_sum += dxhat * xhat;
                }
                let cf = c as f64;
                for j in 0..c {
                    let xhat = (row[j] - mean) * inv_std;
                    let dxhat = g_row[j] * gain_data[j];
                    dx[r * c + j] = inv_std / cf * (cf * dxhat - dxhat_sum - xhat * dxhat_xhat_sum);
                }
            }
        }
        self.accumulate_owned(x, dx);
        self.accumulate_owned(gain, dgain);
        self.accumulate_owned(bias, dbias);
    }
}

fn leading_extent(shape: &[usize], batch_rank: usize, d: usize) -> usize {
    let own = shape.len() - 2;
    if d + own < batch_rank {
        1
    } else {
        shape[d + own - batch_rank]
    }
}

/// Map a flat output-batch index to the flat batch index of an operand with
/// possibly broadcast (extent-1 or missing) leading dims.
fn map_batch(mut flat: usize, batch_shape: &[usize], operand_shape: &[usize], batch_rank: usize) -> usize {
    if batch_rank == 0 {
        return 0;
    }
    debug_assert!(batch_rank <= 8);
    let mut coords = [0usize; 8];
    for d in (0..batch_rank).rev() {
        coords[d] = flat % batch_shape[d];
        flat /= batch_shape[d];
    }
    let mut idx = 0usize;
    for d in 0..batch_rank {
        let ext = leading_extent(operand_shape, batch_rank, d);
        let coord = if ext == 1 { 0 } else { coords[d] };
        idx = idx * ext + coord;
    }
    idx
}

fn permute_copy(data: &[f64], in_shape: &[usize], axes: &[usize], out_shape: &[usize]) -> Vec<f64> {
    let numel: usize = out_shape.iter().product();
    let mut out = vec![0.0; numel];
    if numel == 0 {
        return out;
    }
    // common case: swap of the trailing two axes (batched transpose)
    let rank = in_shape.len();
    if rank >= 2
        && axes[..rank - 2].iter().enumerate().all(|(i, &a)| a == i)
        && axes[rank - 2] == rank - 1
        && axes[rank - 1] == rank - 2
    {
        let m = in_shape[rank - 2];
        let n = in_shape[rank - 1];
        let batch = numel / (m * n);
        for bi in 0..batch {
            let src = &data[bi * m * n..(bi + 1) * m * n];
            let dst = &mut out[bi * m * n..(bi + 1) * m * n];
            for i in 0..m {
                let row = &src[i * n..(i + 1) * n];
                for (j, &v) in row.iter().enumerate() {
                    dst[j * m + i] = v;
                }
            }
        }
        return out;
    }
    let in_strides = row_major_strides(in_shape);
    let step: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
    // the innermost axis staying innermost lets whole rows be memcpied
    if axes[rank - 1] == rank - 1 {
        let inner = in_shape[rank - 1];
        let rows = numel / inner;
        let mut coords = vec![0usize; rank - 1];
        let mut src = 0usize;
        for r in 0..rows {
            out[r * inner..(r + 1) * inner].copy_from_slice(&data[src..src + inner]);
            for d in (0..rank - 1).rev() {
                coords[d] += 1;
                src += step[d];
                if coords[d] < out_shape[d] {
                    break;
                }
                coords[d] = 0;
                src -= step[d] * out_shape[d];
            }
        }
        return out;
    }
    let mut coords = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = data[src];
        for d in (0..rank).rev() {
            coords[d] += 1;
            src += step[d];
            if coords[d] < out_shape[d] {
                break;
            }
            coords[d] = 0;
            src -= step[d] * out_shape[d];
        }
    }
    out
}
