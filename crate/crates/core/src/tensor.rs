//! Reverse-mode autodiff on a flat tape.
//!
//! Everything is f64. Parameters are registered first and survive
//! [`Tape::clear`]; every forward pass records ops after the frozen boundary
//! and [`Tape::backward`] replays them in exact reverse order, accumulating
//! into parameter gradients, then truncates the tape. With a fixed seed the
//! accumulation order never changes, so training is bit-reproducible.
//!
//! Broadcasting is trailing-dimension only: shapes are right-aligned and a
//! dimension of 1 stretches. Nothing here is clever about memory or speed
//! beyond cache-friendly loop order in `matmul`; at desk scale that is enough.

use crate::error::{Error, Result};

/// Handle into the tape arena. Cheap to copy, invalidated by `clear`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
    Max,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinKind,
        a: TensorRef,
        b: TensorRef,
    },
    AddScalar(TensorRef),
    Scale(TensorRef, f64),
    LeakyRelu(TensorRef, f64),
    Sigmoid(TensorRef),
    Exp(TensorRef),
    Abs(TensorRef),
    Softmax {
        x: TensorRef,
        axis: usize,
    },
    Matmul(TensorRef, TensorRef),
    MeanAll(TensorRef),
    SegmentSum {
        x: TensorRef,
        group: usize,
    },
    SegmentMin {
        x: TensorRef,
        group: usize,
    },
    SegmentMax {
        x: TensorRef,
        group: usize,
    },
    SegmentSumRows {
        x: TensorRef,
        group: usize,
    },
    Reshape(TensorRef),
    ConcatCols(Vec<TensorRef>),
    TileRows {
        x: TensorRef,
        times: usize,
    },
    RepeatRowsEach {
        x: TensorRef,
        each: usize,
    },
    RepeatElems {
        x: TensorRef,
        each: usize,
    },
    GatherRows {
        x: TensorRef,
        rows: Vec<usize>,
    },
    GatherElems {
        x: TensorRef,
        idx: Vec<usize>,
    },
    Conv1dRows {
        x: TensorRef,
        kernel: TensorRef,
        dilation: usize,
    },
    Triangle {
        b: TensorRef,
        d: TensorRef,
        t: TensorRef,
    },
    GaussianPt {
        b: TensorRef,
        d: TensorRef,
        centers: TensorRef,
        sigma: TensorRef,
    },
    LinePt {
        b: TensorRef,
        d: TensorRef,
        dirs: TensorRef,
        offsets: TensorRef,
    },
    RationalHat {
        b: TensorRef,
        d: TensorRef,
        centers: TensorRef,
        radius: TensorRef,
    },
    Detach,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    values: Vec<f64>,
    /// Empty when requires_grad is false.
    grad: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    nodes: Vec<Node>,
    /// Nodes below this index survive `clear` (registered parameters).
    frozen: usize,
    sealed: bool,
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() || shape.iter().any(|&d| d == 0) {
        return Err(Error::Dim(format!(
            "shapes need at least one positive dimension, got {shape:?}"
        )));
    }
    Ok(())
}

/// Right-aligned broadcast result shape, or None if incompatible.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Element strides of `shape` right-aligned into `out_rank` dims, with 0 on
/// broadcast (size-1) dimensions.
fn bcast_strides(shape: &[usize], out_rank: usize) -> Vec<usize> {
    let mut strides = vec![0; out_rank];
    let offset = out_rank - shape.len();
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[offset + d] = if shape[d] == 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Visits every element of the broadcast output, yielding flat indices into
/// the output and both inputs.
fn for_each_bcast(
    out_shape: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    if a_shape == b_shape {
        for i in 0..shape_len(out_shape) {
            f(i, i, i);
        }
        return;
    }
    let rank = out_shape.len();
    let sa = bcast_strides(a_shape, rank);
    let sb = bcast_strides(b_shape, rank);
    let total = shape_len(out_shape);
    let mut idx = vec![0usize; rank];
    let (mut ai, mut bi) = (0usize, 0usize);
    for oi in 0..total {
        f(oi, ai, bi);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ai += sa[d];
            bi += sb[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            ai -= sa[d] * out_shape[d];
            bi -= sb[d] * out_shape[d];
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), frozen: 0, sealed: false }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool, op: Op) -> TensorRef {
        debug_assert_eq!(shape_len(&shape), values.len());
        let grad = if requires_grad { vec![0.0; values.len()] } else { Vec::new() };
        self.nodes.push(Node { shape, values, grad, requires_grad, op });
        TensorRef(self.nodes.len() - 1)
    }

    /// Registers a learnable leaf. Only valid before `freeze_params`.
    pub fn param(&mut self, shape: &[usize], values: Vec<f64>) -> Result<TensorRef> {
        if self.sealed {
            return Err(Error::Contract("parameters must be registered before freeze_params".into()));
        }
        check_shape(shape)?;
        if shape_len(shape) != values.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} holds {} values, got {}",
                shape_len(shape),
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values, true, Op::Leaf))
    }

    /// Non-learnable leaf; recorded after the frozen boundary once sealed.
    pub fn constant(&mut self, shape: &[usize], values: Vec<f64>) -> Result<TensorRef> {
        check_shape(shape)?;
        if shape_len(shape) != values.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} holds {} values, got {}",
                shape_len(shape),
                values.len()
            )));
        }
        Ok(self.push(shape.to_vec(), values, false, Op::Leaf))
    }

    /// Marks the end of parameter registration; `clear` truncates to here.
    pub fn freeze_params(&mut self) {
        self.frozen = self.nodes.len();
        self.sealed = true;
    }

    /// Drops every node recorded since `freeze_params`.
    pub fn clear(&mut self) {
        self.nodes.truncate(self.frozen);
    }

    pub fn shape(&self, r: TensorRef) -> &[usize] {
        &self.nodes[r.0].shape
    }

    pub fn values(&self, r: TensorRef) -> &[f64] {
        &self.nodes[r.0].values
    }

    /// Direct write access; meant for optimizers and finite-difference probes
    /// on parameter leaves.
    pub fn values_mut(&mut self, r: TensorRef) -> &mut [f64] {
        &mut self.nodes[r.0].values
    }

    pub fn grad(&self, r: TensorRef) -> &[f64] {
        &self.nodes[r.0].grad
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            for g in &mut node.grad {
                *g = 0.0;
            }
        }
    }

    fn binary(&mut self, kind: BinKind, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (asp, bsp) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        let out_shape = broadcast_shape(&asp, &bsp).ok_or_else(|| {
            Error::Dim(format!("shapes {asp:?} and {bsp:?} do not broadcast"))
        })?;
        let mut out = vec![0.0; shape_len(&out_shape)];
        {
            let av = &self.nodes[a.0].values;
            let bv = &self.nodes[b.0].values;
            for_each_bcast(&out_shape, &asp, &bsp, |oi, ai, bi| {
                let (x, y) = (av[ai], bv[bi]);
                out[oi] = match kind {
                    BinKind::Add => x + y,
                    BinKind::Sub => x - y,
                    BinKind::Mul => x * y,
                    BinKind::Div => x / y,
                    BinKind::Max => {
                        if x >= y {
                            x
                        } else {
                            y
                        }
                    }
                };
            });
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(out_shape, out, rg, Op::Binary { kind, a, b }))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(BinKind::Div, a, b)
    }

    /// Elementwise max; ties take the left input (and its gradient).
    pub fn max_elem(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.binary(BinKind::Max, a, b)
    }

    pub fn add_scalar(&mut self, x: TensorRef, c: f64) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        let values = n.values.iter().map(|v| v + c).collect();
        Ok(self.push(shape, values, rg, Op::AddScalar(x)))
    }

    pub fn scale(&mut self, x: TensorRef, c: f64) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        let values = n.values.iter().map(|v| v * c).collect();
        Ok(self.push(shape, values, rg, Op::Scale(x, c)))
    }

    pub fn leaky_relu(&mut self, x: TensorRef, slope: f64) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        let values = n
            .values
            .iter()
            .map(|&v| if v >= 0.0 { v } else { slope * v })
            .collect();
        Ok(self.push(shape, values, rg, Op::LeakyRelu(x, slope)))
    }

    pub fn sigmoid(&mut self, x: TensorRef) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        let values = n.values.iter().map(|&v| 1.0 / (1.0 + (-v).exp())).collect();
        Ok(self.push(shape, values, rg, Op::Sigmoid(x)))
    }

    pub fn exp(&mut self, x: TensorRef) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        let values = n.values.iter().map(|v| v.exp()).collect();
        Ok(self.push(shape, values, rg, Op::Exp(x)))
    }

    pub fn abs(&mut self, x: TensorRef) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        let (shape, rg) = (n.shape.clone(), n.requires_grad);
        let values = n.values.iter().map(|v| v.abs()).collect();
        Ok(self.push(shape, values, rg, Op::Abs(x)))
    }

    /// Max-subtraction stabilized softmax along `axis`.
    pub fn softmax(&mut self, x: TensorRef, axis: usize) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        let shape = n.shape.clone();
        if axis >= shape.len() {
            return Err(Error::Dim(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let len = shape[axis];
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut values = n.values.clone();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = f64::NEG_INFINITY;
                for t in 0..len {
                    m = m.max(values[base + t * inner]);
                }
                let mut sum = 0.0;
                for t in 0..len {
                    let e = (values[base + t * inner] - m).exp();
                    values[base + t * inner] = e;
                    sum += e;
                }
                for t in 0..len {
                    values[base + t * inner] /= sum;
                }
            }
        }
        let rg = n.requires_grad;
        Ok(self.push(shape, values, rg, Op::Softmax { x, axis }))
    }

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (asp, bsp) = (self.nodes[a.0].shape.clone(), self.nodes[b.0].shape.clone());
        if asp.len() != 2 || bsp.len() != 2 || asp[1] != bsp[0] {
            return Err(Error::Dim(format!("matmul shapes {asp:?} x {bsp:?}")));
        }
        let (m, k, n) = (asp[0], asp[1], bsp[1]);
        let mut out = vec![0.0; m * n];
        {
            let av = &self.nodes[a.0].values;
            let bv = &self.nodes[b.0].values;
            for i in 0..m {
                let arow = &av[i * k..(i + 1) * k];
                let crow = &mut out[i * n..(i + 1) * n];
                for (l, &x) in arow.iter().enumerate() {
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[l * n..(l + 1) * n];
                    for (c, &y) in crow.iter_mut().zip(brow) {
                        *c += x * y;
                    }
                }
            }
        }
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        Ok(self.push(vec![m, n], out, rg, Op::Matmul(a, b)))
    }

    /// Scalar mean over all elements.
    pub fn mean_all(&mut self, x: TensorRef) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        let mean = n.values.iter().sum::<f64>() / n.values.len() as f64;
        let rg = n.requires_grad;
        Ok(self.push(vec![1], vec![mean], rg, Op::MeanAll(x)))
    }

    fn segment_checked(&self, x: TensorRef, group: usize, rank: usize) -> Result<usize> {
        let n = &self.nodes[x.0];
        if n.shape.len() != rank {
            return Err(Error::Dim(format!(
                "segment op wants rank {rank}, got {:?}",
                n.shape
            )));
        }
        if group == 0 || n.shape[0] % group != 0 {
            return Err(Error::Dim(format!(
                "segment group {group} does not divide leading dim {}",
                n.shape[0]
            )));
        }
        Ok(n.shape[0] / group)
    }

    /// 1-D blockwise sum: consecutive runs of `group` elements collapse to one.
    pub fn segment_sum(&mut self, x: TensorRef, group: usize) -> Result<TensorRef> {
        let segs = self.segment_checked(x, group, 1)?;
        let n = &self.nodes[x.0];
        let mut out = vec![0.0; segs];
        for (i, v) in n.values.iter().enumerate() {
            out[i / group] += v;
        }
        let rg = n.requires_grad;
        Ok(self.push(vec![segs], out, rg, Op::SegmentSum { x, group }))
    }

    /// 1-D blockwise min; the first minimal element carries the gradient.
    pub fn segment_min(&mut self, x: TensorRef, group: usize) -> Result<TensorRef> {
        let segs = self.segment_checked(x, group, 1)?;
        let n = &self.nodes[x.0];
        let mut out = vec![f64::INFINITY; segs];
        for (i, &v) in n.values.iter().enumerate() {
            if v < out[i / group] {
                out[i / group] = v;
            }
        }
        let rg = n.requires_grad;
        Ok(self.push(vec![segs], out, rg, Op::SegmentMin { x, group }))
    }

    /// 1-D blockwise max; the first maximal element carries the gradient.
    pub fn segment_max(&mut self, x: TensorRef, group: usize) -> Result<TensorRef> {
        let segs = self.segment_checked(x, group, 1)?;
        let n = &self.nodes[x.0];
        let mut out = vec![f64::NEG_INFINITY; segs];
        for (i, &v) in n.values.iter().enumerate() {
            if v > out[i / group] {
                out[i / group] = v;
            }
        }
        let rg = n.requires_grad;
        Ok(self.push(vec![segs], out, rg, Op::SegmentMax { x, group }))
    }

    /// Rowwise blockwise sum: (g*s, c) -> (s, c).
    pub fn segment_sum_rows(&mut self, x: TensorRef, group: usize) -> Result<TensorRef> {
        let segs = self.segment_checked(x, group, 2)?;
        let n = &self.nodes[x.0];
        let cols = n.shape[1];
        let mut out = vec![0.0; segs * cols];
        for r in 0..n.shape[0] {
            let dst = (r / group) * cols;
            let src = &n.values[r * cols..(r + 1) * cols];
            for (o, v) in out[dst..dst + cols].iter_mut().zip(src) {
                *o += v;
            }
        }
        let rg = n.requires_grad;
        Ok(self.push(vec![segs, cols], out, rg, Op::SegmentSumRows { x, group }))
    }

    pub fn reshape(&mut self, x: TensorRef, shape: &[usize]) -> Result<TensorRef> {
        check_shape(shape)?;
        let n = &self.nodes[x.0];
        if shape_len(shape) != n.values.len() {
            return Err(Error::Dim(format!(
                "cannot reshape {:?} into {shape:?}",
                n.shape
            )));
        }
        let (values, rg) = (n.values.clone(), n.requires_grad);
        Ok(self.push(shape.to_vec(), values, rg, Op::Reshape(x)))
    }

    /// Horizontal concatenation of rank-2 tensors with equal row counts.
    pub fn concat_cols(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols needs at least one input".into()));
        }
        let rows = self.nodes[parts[0].0].shape[0];
        let mut total_cols = 0;
        for &p in parts {
            let sp = &self.nodes[p.0].shape;
            if sp.len() != 2 || sp[0] != rows {
                return Err(Error::Dim(format!(
                    "concat_cols needs rank-2 inputs with {rows} rows, got {sp:?}"
                )));
            }
            total_cols += sp[1];
        }
        let mut out = vec![0.0; rows * total_cols];
        let mut col_base = 0;
        for &p in parts {
            let n = &self.nodes[p.0];
            let cols = n.shape[1];
            for r in 0..rows {
                out[r * total_cols + col_base..r * total_cols + col_base + cols]
                    .copy_from_slice(&n.values[r * cols..(r + 1) * cols]);
            }
            col_base += cols;
        }
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(vec![rows, total_cols], out, rg, Op::ConcatCols(parts.to_vec())))
    }

    /// Stacks `times` whole copies of a rank-2 tensor: (r, c) -> (times*r, c).
    pub fn tile_rows(&mut self, x: TensorRef, times: usize) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        if n.shape.len() != 2 || times == 0 {
            return Err(Error::Dim(format!("tile_rows({times}) on {:?}", n.shape)));
        }
        let (rows, cols) = (n.shape[0], n.shape[1]);
        let mut out = Vec::with_capacity(times * n.values.len());
        for _ in 0..times {
            out.extend_from_slice(&n.values);
        }
        let rg = n.requires_grad;
        Ok(self.push(vec![times * rows, cols], out, rg, Op::TileRows { x, times }))
    }

    /// Repeats each row `each` times in place: (r, c) -> (r*each, c).
    pub fn repeat_rows_each(&mut self, x: TensorRef, each: usize) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        if n.shape.len() != 2 || each == 0 {
            return Err(Error::Dim(format!("repeat_rows_each({each}) on {:?}", n.shape)));
        }
        let (rows, cols) = (n.shape[0], n.shape[1]);
        let mut out = Vec::with_capacity(rows * each * cols);
        for r in 0..rows {
            for _ in 0..each {
                out.extend_from_slice(&n.values[r * cols..(r + 1) * cols]);
            }
        }
        let rg = n.requires_grad;
        Ok(self.push(vec![rows * each, cols], out, rg, Op::RepeatRowsEach { x, each }))
    }

    /// Repeats each element of a 1-D tensor `each` times.
    pub fn repeat_elems(&mut self, x: TensorRef, each: usize) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        if n.shape.len() != 1 || each == 0 {
            return Err(Error::Dim(format!("repeat_elems({each}) on {:?}", n.shape)));
        }
        let mut out = Vec::with_capacity(n.values.len() * each);
        for &v in &n.values {
            for _ in 0..each {
                out.push(v);
            }
        }
        let len = out.len();
        let rg = n.requires_grad;
        Ok(self.push(vec![len], out, rg, Op::RepeatElems { x, each }))
    }

    /// Row selection with repetition allowed: out row r = x row rows[r].
    pub fn gather_rows(&mut self, x: TensorRef, rows: &[usize]) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        if n.shape.len() != 2 || rows.is_empty() {
            return Err(Error::Dim(format!("gather_rows on {:?}", n.shape)));
        }
        let cols = n.shape[1];
        for &r in rows {
            if r >= n.shape[0] {
                return Err(Error::Dim(format!("gather_rows index {r} >= {}", n.shape[0])));
            }
        }
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            out.extend_from_slice(&n.values[r * cols..(r + 1) * cols]);
        }
        let rg = n.requires_grad;
        Ok(self.push(vec![rows.len(), cols], out, rg, Op::GatherRows { x, rows: rows.to_vec() }))
    }

    /// Flat-index selection into a 1-D output.
    pub fn gather_elems(&mut self, x: TensorRef, idx: &[usize]) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        if idx.is_empty() {
            return Err(Error::Dim("gather_elems with empty index list".into()));
        }
        for &i in idx {
            if i >= n.values.len() {
                return Err(Error::Dim(format!("gather_elems index {i} >= {}", n.values.len())));
            }
        }
        let out: Vec<f64> = idx.iter().map(|&i| n.values[i]).collect();
        let rg = n.requires_grad;
        Ok(self.push(vec![idx.len()], out, rg, Op::GatherElems { x, idx: idx.to_vec() }))
    }

    /// Per-row 1-D convolution with right replication padding, shared kernel:
    /// y[t] = sum_j x[t + j*dilation] * f[j], reading past the end as the
    /// final element, so output length equals input length.
    pub fn conv1d_rows(&mut self, x: TensorRef, kernel: TensorRef, dilation: usize) -> Result<TensorRef> {
        let (xs, ks) = (self.nodes[x.0].shape.clone(), self.nodes[kernel.0].shape.clone());
        if xs.len() != 2 || ks.len() != 1 || dilation == 0 {
            return Err(Error::Dim(format!("conv1d_rows shapes {xs:?}, kernel {ks:?}")));
        }
        let (rows, w, kw) = (xs[0], xs[1], ks[0]);
        if w < (kw - 1) * dilation + 1 {
            return Err(Error::Config(format!(
                "window {w} shorter than effective kernel width {}",
                (kw - 1) * dilation + 1
            )));
        }
        let mut out = vec![0.0; rows * w];
        {
            let xv = &self.nodes[x.0].values;
            let kv = &self.nodes[kernel.0].values;
            for r in 0..rows {
                let row = &xv[r * w..(r + 1) * w];
                let orow = &mut out[r * w..(r + 1) * w];
                for t in 0..w {
                    let mut s = 0.0;
                    for (j, &f) in kv.iter().enumerate() {
                        let p = t + j * dilation;
                        let v = if p < w { row[p] } else { row[w - 1] };
                        s += v * f;
                    }
                    orow[t] = s;
                }
            }
        }
        let rg = self.nodes[x.0].requires_grad || self.nodes[kernel.0].requires_grad;
        Ok(self.push(vec![rows, w], out, rg, Op::Conv1dRows { x, kernel, dilation }))
    }

    fn pair_inputs_checked(&self, b: TensorRef, d: TensorRef) -> Result<usize> {
        let (bs, ds) = (&self.nodes[b.0].shape, &self.nodes[d.0].shape);
        if bs.len() != 1 || ds.len() != 1 || bs[0] != ds[0] {
            return Err(Error::Dim(format!(
                "pair coordinates need equal 1-D shapes, got {bs:?} and {ds:?}"
            )));
        }
        Ok(bs[0])
    }

    /// Tent over [b, d] sampled at grid t: max(0, min(t - b, d - t)).
    pub fn triangle_pt(&mut self, b: TensorRef, d: TensorRef, t: TensorRef) -> Result<TensorRef> {
        let p = self.pair_inputs_checked(b, d)?;
        let ts = &self.nodes[t.0].shape;
        if ts.len() != 1 {
            return Err(Error::Dim(format!("triangle samples must be 1-D, got {ts:?}")));
        }
        let q = ts[0];
        let mut out = vec![0.0; p * q];
        {
            let bv = &self.nodes[b.0].values;
            let dv = &self.nodes[d.0].values;
            let tv = &self.nodes[t.0].values;
            for i in 0..p {
                for (j, &tj) in tv.iter().enumerate() {
                    let left = tj - bv[i];
                    let right = dv[i] - tj;
                    out[i * q + j] = left.min(right).max(0.0);
                }
            }
        }
        let rg = self.nodes[b.0].requires_grad
            || self.nodes[d.0].requires_grad
            || self.nodes[t.0].requires_grad;
        Ok(self.push(vec![p, q], out, rg, Op::Triangle { b, d, t }))
    }

    /// Gaussian bumps at 2-D centers: exp(-((b-cx)^2 + (d-cy)^2) / (2 sigma^2)).
    pub fn gaussian_pt(
        &mut self,
        b: TensorRef,
        d: TensorRef,
        centers: TensorRef,
        sigma: TensorRef,
    ) -> Result<TensorRef> {
        let p = self.pair_inputs_checked(b, d)?;
        let cs = &self.nodes[centers.0].shape;
        if cs.len() != 2 || cs[1] != 2 {
            return Err(Error::Dim(format!("gaussian centers must be (q, 2), got {cs:?}")));
        }
        if self.nodes[sigma.0].values.len() != 1 {
            return Err(Error::Dim("gaussian sigma must be a single value".into()));
        }
        let q = cs[0];
        let mut out = vec![0.0; p * q];
        {
            let bv = &self.nodes[b.0].values;
            let dv = &self.nodes[d.0].values;
            let cv = &self.nodes[centers.0].values;
            let s = self.nodes[sigma.0].values[0];
            let inv = 1.0 / (2.0 * s * s);
            for i in 0..p {
                for j in 0..q {
                    let dx = bv[i] - cv[2 * j];
                    let dy = dv[i] - cv[2 * j + 1];
                    out[i * q + j] = (-(dx * dx + dy * dy) * inv).exp();
                }
            }
        }
        let rg = self.nodes[b.0].requires_grad
            || self.nodes[d.0].requires_grad
            || self.nodes[centers.0].requires_grad
            || self.nodes[sigma.0].requires_grad;
        Ok(self.push(vec![p, q], out, rg, Op::GaussianPt { b, d, centers, sigma }))
    }

    /// Affine functionals of the pair: <w_j, (b, d)> + o_j.
    pub fn line_pt(
        &mut self,
        b: TensorRef,
        d: TensorRef,
        dirs: TensorRef,
        offsets: TensorRef,
    ) -> Result<TensorRef> {
        let p = self.pair_inputs_checked(b, d)?;
        let ws = &self.nodes[dirs.0].shape;
        let os = &self.nodes[offsets.0].shape;
        if ws.len() != 2 || ws[1] != 2 || os.len() != 1 || os[0] != ws[0] {
            return Err(Error::Dim(format!(
                "line params must be (q, 2) and (q), got {ws:?} and {os:?}"
            )));
        }
        let q = ws[0];
        let mut out = vec![0.0; p * q];
        {
            let bv = &self.nodes[b.0].values;
            let dv = &self.nodes[d.0].values;
            let wv = &self.nodes[dirs.0].values;
            let ov = &self.nodes[offsets.0].values;
            for i in 0..p {
                for j in 0..q {
                    out[i * q + j] = wv[2 * j] * bv[i] + wv[2 * j + 1] * dv[i] + ov[j];
                }
            }
        }
        let rg = self.nodes[b.0].requires_grad
            || self.nodes[d.0].requires_grad
            || self.nodes[dirs.0].requires_grad
            || self.nodes[offsets.0].requires_grad;
        Ok(self.push(vec![p, q], out, rg, Op::LinePt { b, d, dirs, offsets }))
    }

    /// 1/(1 + ||t - p||_1) - 1/(1 + |r - ||t - p||_1|) at 2-D centers t.
    pub fn rational_hat_pt(
        &mut self,
        b: TensorRef,
        d: TensorRef,
        centers: TensorRef,
        radius: TensorRef,
    ) -> Result<TensorRef> {
        let p = self.pair_inputs_checked(b, d)?;
        let cs = &self.nodes[centers.0].shape;
        if cs.len() != 2 || cs[1] != 2 {
            return Err(Error::Dim(format!("rational-hat centers must be (q, 2), got {cs:?}")));
        }
        if self.nodes[radius.0].values.len() != 1 {
            return Err(Error::Dim("rational-hat radius must be a single value".into()));
        }
        let q = cs[0];
        let mut out = vec![0.0; p * q];
        {
            let bv = &self.nodes[b.0].values;
            let dv = &self.nodes[d.0].values;
            let cv = &self.nodes[centers.0].values;
            let r = self.nodes[radius.0].values[0];
            for i in 0..p {
                for j in 0..q {
                    let m = (bv[i] - cv[2 * j]).abs() + (dv[i] - cv[2 * j + 1]).abs();
                    out[i * q + j] = 1.0 / (1.0 + m) - 1.0 / (1.0 + (r - m).abs());
                }
            }
        }
        let rg = self.nodes[b.0].requires_grad
            || self.nodes[d.0].requires_grad
            || self.nodes[centers.0].requires_grad
            || self.nodes[radius.0].requires_grad;
        Ok(self.push(vec![p, q], out, rg, Op::RationalHat { b, d, centers, radius }))
    }

    /// Copies values and blocks gradient flow.
    pub fn detach(&mut self, x: TensorRef) -> Result<TensorRef> {
        let n = &self.nodes[x.0];
        let (shape, values) = (n.shape.clone(), n.values.clone());
        Ok(self.push(shape, values, false, Op::Detach))
    }

    /// Accumulates d(loss)/d(param) into every reachable parameter's grad
    /// buffer, then truncates the tape back to the frozen boundary. Gradients
    /// add across calls until `zero_grad`.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.nodes[loss.0].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        if self.nodes[loss.0].requires_grad {
            self.nodes[loss.0].grad[0] += 1.0;
            let start = self.frozen.max(loss.0 + 1);
            for id in (self.frozen..start).rev() {
                if !self.nodes[id].requires_grad {
                    continue;
                }
                let (head, tail) = self.nodes.split_at_mut(id);
                let node = &mut tail[0];
                let dout = std::mem::take(&mut node.grad);
                if dout.iter().all(|&g| g == 0.0) {
                    continue;
                }
                propagate(head, node, &dout);
            }
        }
        self.clear();
        Ok(())
    }
}

fn add_into(head: &mut [Node], p: TensorRef, idx: usize, v: f64) {
    let g = &mut head[p.0].grad;
    if !g.is_empty() {
        g[idx] += v;
    }
}

/// Reverse rule for one recorded op. `node` is the op's output (grad already
/// taken out into `dout`), `head` holds every earlier node.
fn propagate(head: &mut [Node], node: &Node, dout: &[f64]) {
    match &node.op {
        Op::Leaf => {}
        Op::Detach => {}
        Op::Binary { kind, a, b } => {
            let out_shape = node.shape.clone();
            let (asp, bsp) = (head[a.0].shape.clone(), head[b.0].shape.clone());
            // Accumulate locally first: safe when a == b and keeps the
            // values borrows disjoint from the grad writes.
            let mut da = vec![0.0; head[a.0].values.len()];
            let mut db = vec![0.0; head[b.0].values.len()];
            {
                let av = &head[a.0].values;
                let bv = &head[b.0].values;
                match kind {
                    BinKind::Add => {
                        for_each_bcast(&out_shape, &asp, &bsp, |oi, ai, bi| {
                            da[ai] += dout[oi];
                            db[bi] += dout[oi];
                        });
                    }
                    BinKind::Sub => {
                        for_each_bcast(&out_shape, &asp, &bsp, |oi, ai, bi| {
                            da[ai] += dout[oi];
                            db[bi] -= dout[oi];
                        });
                    }
                    BinKind::Mul => {
                        for_each_bcast(&out_shape, &asp, &bsp, |oi, ai, bi| {
                            da[ai] += dout[oi] * bv[bi];
                            db[bi] += dout[oi] * av[ai];
                        });
                    }
                    BinKind::Div => {
                        for_each_bcast(&out_shape, &asp, &bsp, |oi, ai, bi| {
                            let inv = 1.0 / bv[bi];
                            da[ai] += dout[oi] * inv;
                            db[bi] -= dout[oi] * av[ai] * inv * inv;
                        });
                    }
                    BinKind::Max => {
                        for_each_bcast(&out_shape, &asp, &bsp, |oi, ai, bi| {
                            if av[ai] >= bv[bi] {
                                da[ai] += dout[oi];
                            } else {
                                db[bi] += dout[oi];
                            }
                        });
                    }
                }
            }
            for (i, v) in da.into_iter().enumerate() {
                if v != 0.0 {
                    add_into(head, *a, i, v);
                }
            }
            for (i, v) in db.into_iter().enumerate() {
                if v != 0.0 {
                    add_into(head, *b, i, v);
                }
            }
        }
        Op::AddScalar(x) => {
            for (i, &g) in dout.iter().enumerate() {
                add_into(head, *x, i, g);
            }
        }
        Op::Scale(x, c) => {
            for (i, &g) in dout.iter().enumerate() {
                add_into(head, *x, i, c * g);
            }
        }
        Op::LeakyRelu(x, slope) => {
            let factors: Vec<f64> = head[x.0]
                .values
                .iter()
                .map(|&v| if v > 0.0 { 1.0 } else { *slope })
                .collect();
            for (i, &g) in dout.iter().enumerate() {
                add_into(head, *x, i, factors[i] * g);
            }
        }
        Op::Sigmoid(x) => {
            for (i, &g) in dout.iter().enumerate() {
                let y = node.values[i];
                add_into(head, *x, i, g * y * (1.0 - y));
            }
        }
        Op::Exp(x) => {
            for (i, &g) in dout.iter().enumerate() {
                add_into(head, *x, i, g * node.values[i]);
            }
        }
        Op::Abs(x) => {
            let signs: Vec<f64> = head[x.0].values.iter().map(|&v| v.signum() * f64::from(v != 0.0)).collect();
            for (i, &g) in dout.iter().enumerate() {
                add_into(head, *x, i, signs[i] * g);
            }
        }
        Op::Softmax { x, axis } => {
            let shape = &node.shape;
            let len = shape[*axis];
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let y = &node.values;
            for o in 0..outer {
                for i in 0..inner {
                    let base = o * len * inner + i;
                    let mut dot = 0.0;
                    for t in 0..len {
                        let k = base + t * inner;
                        dot += dout[k] * y[k];
                    }
                    for t in 0..len {
                        let k = base + t * inner;
                        add_into(head, *x, k, y[k] * (dout[k] - dot));
                    }
                }
            }
        }
        Op::Matmul(a, b) => {
            let m = head[a.0].shape[0];
            let k = head[a.0].shape[1];
            let n = head[b.0].shape[1];
            // dA = dC . B^T
            if !head[a.0].grad.is_empty() {
                let mut da = vec![0.0; m * k];
                {
                    let bv = &head[b.0].values;
                    for i in 0..m {
                        let drow = &dout[i * n..(i + 1) * n];
                        let arow = &mut da[i * k..(i + 1) * k];
                        for (l, slot) in arow.iter_mut().enumerate() {
                            let brow = &bv[l * n..(l + 1) * n];
                            let mut s = 0.0;
                            for (x, y) in drow.iter().zip(brow) {
                                s += x * y;
                            }
                            *slot = s;
                        }
                    }
                }
                for (g, v) in head[a.0].grad.iter_mut().zip(&da) {
                    *g += v;
                }
            }
            // dB = A^T . dC
            if !head[b.0].grad.is_empty() {
                let mut db = vec![0.0; k * n];
                {
                    let av = &head[a.0].values;
                    for i in 0..m {
                        let drow = &dout[i * n..(i + 1) * n];
                        for l in 0..k {
                            let x = av[i * k + l];
                            if x == 0.0 {
                                continue;
                            }
                            let brow = &mut db[l * n..(l + 1) * n];
                            for (slot, &g) in brow.iter_mut().zip(drow) {
                                *slot += x * g;
                            }
                        }
                    }
                }
                for (g, v) in head[b.0].grad.iter_mut().zip(&db) {
                    *g += v;
                }
            }
        }
        Op::MeanAll(x) => {
            let n = head[x.0].values.len();
            let g = dout[0] / n as f64;
            for i in 0..n {
                add_into(head, *x, i, g);
            }
        }
        Op::SegmentSum { x, group } => {
            let n = head[x.0].values.len();
            for i in 0..n {
                add_into(head, *x, i, dout[i / group]);
            }
        }
        Op::SegmentMin { x, group } => {
            let winners: Vec<usize> = segment_extremes(&head[x.0].values, *group, false);
            for (s, &w) in winners.iter().enumerate() {
                add_into(head, *x, w, dout[s]);
            }
        }
        Op::SegmentMax { x, group } => {
            let winners: Vec<usize> = segment_extremes(&head[x.0].values, *group, true);
            for (s, &w) in winners.iter().enumerate() {
                add_into(head, *x, w, dout[s]);
            }
        }
        Op::SegmentSumRows { x, group } => {
            let cols = head[x.0].shape[1];
            let rows = head[x.0].shape[0];
            for r in 0..rows {
                let src = (r / group) * cols;
                for c in 0..cols {
                    add_into(head, *x, r * cols + c, dout[src + c]);
                }
            }
        }
        Op::Reshape(x) => {
            for (i, &g) in dout.iter().enumerate() {
                add_into(head, *x, i, g);
            }
        }
        Op::ConcatCols(parts) => {
            let total_cols = node.shape[1];
            let rows = node.shape[0];
            let mut col_base = 0;
            for &p in parts {
                let cols = head[p.0].shape[1];
                for r in 0..rows {
                    for c in 0..cols {
                        add_into(head, p, r * cols + c, dout[r * total_cols + col_base + c]);
                    }
                }
                col_base += cols;
            }
        }
        Op::TileRows { x, times } => {
            let len = head[x.0].values.len();
            for copy in 0..*times {
                for i in 0..len {
                    add_into(head, *x, i, dout[copy * len + i]);
                }
            }
        }
        Op::RepeatRowsEach { x, each } => {
            let cols = head[x.0].shape[1];
            let out_rows = node.shape[0];
            for r in 0..out_rows {
                let src = (r / each) * cols;
                for c in 0..cols {
                    add_into(head, *x, src + c, dout[r * cols + c]);
                }
            }
        }
        Op::RepeatElems { x, each } => {
            for (i, &g) in dout.iter().enumerate() {
                add_into(head, *x, i / each, g);
            }
        }
        Op::GatherRows { x, rows } => {
            let cols = head[x.0].shape[1];
            for (r, &src) in rows.iter().enumerate() {
                for c in 0..cols {
                    add_into(head, *x, src * cols + c, dout[r * cols + c]);
                }
            }
        }
        Op::GatherElems { x, idx } => {
            for (i, &src) in idx.iter().enumerate() {
                add_into(head, *x, src, dout[i]);
            }
        }
        Op::Conv1dRows { x, kernel, dilation } => {
            let w = head[x.0].shape[1];
            let rows = head[x.0].shape[0];
            let kv = head[kernel.0].values.clone();
            let xv = head[x.0].values.clone();
            for r in 0..rows {
                for t in 0..w {
                    let g = dout[r * w + t];
                    if g == 0.0 {
                        continue;
                    }
                    for (j, &f) in kv.iter().enumerate() {
                        let p = t + j * dilation;
                        let src = if p < w { p } else { w - 1 };
                        add_into(head, *x, r * w + src, g * f);
                        add_into(head, *kernel, j, g * xv[r * w + src]);
                    }
                }
            }
        }
        Op::Triangle { b, d, t } => {
            let q = head[t.0].values.len();
            let p = head[b.0].values.len();
            let bv = head[b.0].values.clone();
            let dv = head[d.0].values.clone();
            let tv = head[t.0].values.clone();
            for i in 0..p {
                for j in 0..q {
                    let g = dout[i * q + j];
                    if g == 0.0 {
                        continue;
                    }
                    let left = tv[j] - bv[i];
                    let right = dv[i] - tv[j];
                    if left.min(right) > 0.0 {
                        if left <= right {
                            add_into(head, *b, i, -g);
                            add_into(head, *t, j, g);
                        } else {
                            add_into(head, *d, i, g);
                            add_into(head, *t, j, -g);
                        }
                    }
                }
            }
        }
        Op::GaussianPt { b, d, centers, sigma } => {
            let q = head[centers.0].shape[0];
            let p = head[b.0].values.len();
            let bv = head[b.0].values.clone();
            let dv = head[d.0].values.clone();
            let cv = head[centers.0].values.clone();
            let s = head[sigma.0].values[0];
            let inv2 = 1.0 / (s * s);
            for i in 0..p {
                for j in 0..q {
                    let g = dout[i * q + j];
                    if g == 0.0 {
                        continue;
                    }
                    let y = node.values[i * q + j];
                    let dx = bv[i] - cv[2 * j];
                    let dy = dv[i] - cv[2 * j + 1];
                    add_into(head, *b, i, -g * y * dx * inv2);
                    add_into(head, *d, i, -g * y * dy * inv2);
                    add_into(head, *centers, 2 * j, g * y * dx * inv2);
                    add_into(head, *centers, 2 * j + 1, g * y * dy * inv2);
                    add_into(head, *sigma, 0, g * y * (dx * dx + dy * dy) / (s * s * s));
                }
            }
        }
        Op::LinePt { b, d, dirs, offsets } => {
            let q = head[dirs.0].shape[0];
            let p = head[b.0].values.len();
            let bv = head[b.0].values.clone();
            let dv = head[d.0].values.clone();
            let wv = head[dirs.0].values.clone();
            for i in 0..p {
                for j in 0..q {
                    let g = dout[i * q + j];
                    if g == 0.0 {
                        continue;
                    }
                    add_into(head, *b, i, g * wv[2 * j]);
                    add_into(head, *d, i, g * wv[2 * j + 1]);
                    add_into(head, *dirs, 2 * j, g * bv[i]);
                    add_into(head, *dirs, 2 * j + 1, g * dv[i]);
                    add_into(head, *offsets, j, g);
                }
            }
        }
        Op::RationalHat { b, d, centers, radius } => {
            let q = head[centers.0].shape[0];
            let p = head[b.0].values.len();
            let bv = head[b.0].values.clone();
            let dv = head[d.0].values.clone();
            let cv = head[centers.0].values.clone();
            let r = head[radius.0].values[0];
            for i in 0..p {
                for j in 0..q {
                    let g = dout[i * q + j];
                    if g == 0.0 {
                        continue;
                    }
                    let dx = bv[i] - cv[2 * j];
                    let dy = dv[i] - cv[2 * j + 1];
                    let m = dx.abs() + dy.abs();
                    let u = (r - m).abs();
                    let sgn_rm = (r - m).signum() * f64::from(r != m);
                    let inv_m = 1.0 / ((1.0 + m) * (1.0 + m));
                    let inv_u = 1.0 / ((1.0 + u) * (1.0 + u));
                    let dm = -inv_m - sgn_rm * inv_u;
                    let sx = dx.signum() * f64::from(dx != 0.0);
                    let sy = dy.signum() * f64::from(dy != 0.0);
                    add_into(head, *b, i, g * dm * sx);
                    add_into(head, *d, i, g * dm * sy);
                    add_into(head, *centers, 2 * j, -g * dm * sx);
                    add_into(head, *centers, 2 * j + 1, -g * dm * sy);
                    add_into(head, *radius, 0, g * sgn_rm * inv_u);
                }
            }
        }
    }
}

/// First extremal index per block, matching the strict-compare forward rule.
fn segment_extremes(values: &[f64], group: usize, want_max: bool) -> Vec<usize> {
    let segs = values.len() / group;
    let mut out = Vec::with_capacity(segs);
    for s in 0..segs {
        let base = s * group;
        let mut best = base;
        for i in base + 1..base + group {
            let better = if want_max {
                values[i] > values[best]
            } else {
                values[i] < values[best]
            };
            if better {
                best = i;
            }
        }
        out.push(best);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_identity_passes_through() {
        let mut t = Tape::new();
        t.freeze_params();
        let i = t.constant(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = t.constant(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = t.matmul(i, b).unwrap();
        assert_eq!(t.values(c), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn matmul_dot_product() {
        let mut t = Tape::new();
        t.freeze_params();
        let a = t.constant(&[1, 2], vec![1.0, 2.0]).unwrap();
        let b = t.constant(&[2, 1], vec![3.0, 4.0]).unwrap();
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.values(c), &[11.0]);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = Rng::new(31);
        let av: Vec<f64> = (0..9).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let bv: Vec<f64> = (0..9).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
        let mut expect = vec![0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                for l in 0..3 {
                    expect[i * 3 + j] += av[i * 3 + l] * bv[l * 3 + j];
                }
            }
        }
        let mut t = Tape::new();
        t.freeze_params();
        let a = t.constant(&[3, 3], av).unwrap();
        let b = t.constant(&[3, 3], bv).unwrap();
        let c = t.matmul(a, b).unwrap();
        for (got, want) in t.values(c).iter().zip(&expect) {
            assert!(close(*got, *want, 1e-12));
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_an_error() {
        let mut t = Tape::new();
        t.freeze_params();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let err = t.matmul(a, b).unwrap_err();
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn leaky_relu_slope() {
        let mut t = Tape::new();
        t.freeze_params();
        let x = t.constant(&[3], vec![-1.0, 0.0, 2.0]).unwrap();
        let y = t.leaky_relu(x, 0.2).unwrap();
        assert_eq!(t.values(y), &[-0.2, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut t = Tape::new();
        t.freeze_params();
        let x = t.constant(&[1], vec![0.0]).unwrap();
        let y = t.sigmoid(x).unwrap();
        assert_eq!(t.values(y), &[0.5]);
    }

    #[test]
    fn abs_of_symmetric_pair() {
        let mut t = Tape::new();
        t.freeze_params();
        let x = t.constant(&[2], vec![-3.0, 3.0]).unwrap();
        let y = t.abs(x).unwrap();
        assert_eq!(t.values(y), &[3.0, 3.0]);
    }

    #[test]
    fn softmax_equal_logits() {
        let mut t = Tape::new();
        t.freeze_params();
        let x = t.constant(&[2], vec![0.0, 0.0]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.values(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_exact_ratio() {
        let mut t = Tape::new();
        t.freeze_params();
        let x = t.constant(&[2], vec![1.0f64.ln(), 3.0f64.ln()]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert!(close(t.values(y)[0], 0.25, 1e-12));
        assert!(close(t.values(y)[1], 0.75, 1e-12));
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let mut t = Tape::new();
        t.freeze_params();
        let x = t.constant(&[2], vec![1000.0, 1000.0]).unwrap();
        let y = t.softmax(x, 0).unwrap();
        assert_eq!(t.values(y), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_shift_invariant() {
        let mut rng = Rng::new(99);
        for _ in 0..100 {
            let logits: Vec<f64> = (0..12).map(|_| rng.uniform_in(-8.0, 8.0)).collect();
            let shifted: Vec<f64> = logits.iter().map(|v| v + 3.7).collect();
            let mut t = Tape::new();
            t.freeze_params();
            let a = t.constant(&[3, 4], logits).unwrap();
            let b = t.constant(&[3, 4], shifted).unwrap();
            let ya = t.softmax(a, 1).unwrap();
            let yb = t.softmax(b, 1).unwrap();
            for row in 0..3 {
                let sum: f64 = t.values(ya)[row * 4..(row + 1) * 4].iter().sum();
                assert!(close(sum, 1.0, 1e-9));
            }
            for (x, y) in t.values(ya).iter().zip(t.values(yb)) {
                assert!(close(*x, *y, 1e-9));
            }
        }
    }

    #[test]
    fn broadcast_add_row_vector() {
        let mut t = Tape::new();
        t.freeze_params();
        let a = t.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = t.constant(&[3], vec![10.0, 20.0, 30.0]).unwrap();
        let c = t.add(a, b).unwrap();
        assert_eq!(t.values(c), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
    }

    #[test]
    fn broadcast_mul_column() {
        let mut t = Tape::new();
        t.freeze_params();
        let a = t.constant(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = t.constant(&[2, 1], vec![2.0, 10.0]).unwrap();
        let c = t.mul(a, b).unwrap();
        assert_eq!(t.values(c), &[2.0, 4.0, 6.0, 40.0, 50.0, 60.0]);
    }

    #[test]
    fn incompatible_broadcast_is_an_error() {
        let mut t = Tape::new();
        t.freeze_params();
        let a = t.constant(&[2, 3], vec![0.0; 6]).unwrap();
        let b = t.constant(&[2, 2], vec![0.0; 4]).unwrap();
        assert!(t.add(a, b).is_err());
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.param(&[1], vec![3.0]).unwrap();
        t.freeze_params();
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x), &[6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut t = Tape::new();
        let x = t.param(&[1], vec![0.0]).unwrap();
        t.freeze_params();
        let y = t.sigmoid(x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x), &[0.25]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let x = t.param(&[2], vec![1.0, 2.0]).unwrap();
        t.freeze_params();
        let y = t.mul(x, x).unwrap();
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn gradient_linearity_is_exact() {
        // The second branch is recorded first so the combined reverse sweep
        // hits the branches in the same order as the two separate passes.
        let build = |t: &mut Tape, x: TensorRef| {
            let s = t.sigmoid(x).unwrap();
            let l2 = t.mean_all(s).unwrap();
            let a = t.mul(x, x).unwrap();
            let l1 = t.mean_all(a).unwrap();
            (l1, l2)
        };
        // Sum of losses in one pass.
        let mut t = Tape::new();
        let x = t.param(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        t.freeze_params();
        let (l1, l2) = build(&mut t, x);
        let sum = t.add(l1, l2).unwrap();
        t.backward(sum).unwrap();
        let combined = t.grad(x).to_vec();
        // Two separate passes accumulating into the same grad buffer.
        let mut t = Tape::new();
        let x = t.param(&[3], vec![0.3, -1.2, 2.0]).unwrap();
        t.freeze_params();
        let (l1, _) = build(&mut t, x);
        t.backward(l1).unwrap();
        let (_, l2) = build(&mut t, x);
        t.backward(l2).unwrap();
        assert_eq!(t.grad(x), combined.as_slice());
    }

    #[test]
    fn clear_preserves_parameters_only() {
        let mut t = Tape::new();
        let x = t.param(&[2], vec![1.0, 2.0]).unwrap();
        t.freeze_params();
        let c = t.constant(&[2], vec![5.0, 5.0]).unwrap();
        let _ = t.add(x, c).unwrap();
        t.clear();
        assert_eq!(t.values(x), &[1.0, 2.0]);
        assert_eq!(t.nodes.len(), 1);
    }

    #[test]
    fn params_after_freeze_are_rejected() {
        let mut t = Tape::new();
        t.freeze_params();
        assert!(t.param(&[1], vec![0.0]).is_err());
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut t = Tape::new();
        t.freeze_params();
        let x = t.constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let k = t.constant(&[2], vec![1.0, 0.0]).unwrap();
        let y = t.conv1d_rows(x, k, 1).unwrap();
        assert_eq!(t.values(y), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn conv_box_kernel_with_replication_padding() {
        let mut t = Tape::new();
        t.freeze_params();
        let x = t.constant(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let k = t.constant(&[2], vec![1.0, 1.0]).unwrap();
        let y = t.conv1d_rows(x, k, 1).unwrap();
        assert_eq!(t.values(y), &[3.0, 5.0, 6.0]);
    }

    #[test]
    fn conv_averaging_kernel_keeps_constants() {
        let mut t = Tape::new();
        t.freeze_params();
        let x = t.constant(&[1, 5], vec![4.0; 5]).unwrap();
        let k = t.constant(&[2], vec![0.5, 0.5]).unwrap();
        let y = t.conv1d_rows(x, k, 1).unwrap();
        assert_eq!(t.values(y), &[4.0; 5]);
    }

    #[test]
    fn conv_window_too_short_is_config_error() {
        let mut t = Tape::new();
        t.freeze_params();
        let x = t.constant(&[1, 3], vec![0.0; 3]).unwrap();
        let k = t.constant(&[5], vec![0.0; 5]).unwrap();
        assert!(matches!(t.conv1d_rows(x, k, 1), Err(Error::Config(_))));
    }

    #[test]
    fn triangle_anchors() {
        let mut t = Tape::new();
        t.freeze_params();
        let b = t.constant(&[2], vec![0.0, 0.2]).unwrap();
        let d = t.constant(&[2], vec![1.0, 0.4]).unwrap();
        let grid = t.constant(&[2], vec![0.5, 0.1]).unwrap();
        let y = t.triangle_pt(b, d, grid).unwrap();
        // pair (0,1): peak value at t=0.5; pair (0.2,0.4): t=0.1 outside support.
        assert_eq!(t.values(y)[0], 0.5);
        assert_eq!(t.values(y)[3], 0.0);
    }

    #[test]
    fn gaussian_peak_at_center() {
        let mut t = Tape::new();
        t.freeze_params();
        let b = t.constant(&[1], vec![0.3]).unwrap();
        let d = t.constant(&[1], vec![0.7]).unwrap();
        let c = t.constant(&[1, 2], vec![0.3, 0.7]).unwrap();
        let s = t.constant(&[1], vec![0.1]).unwrap();
        let y = t.gaussian_pt(b, d, c, s).unwrap();
        assert_eq!(t.values(y), &[1.0]);
    }

    #[test]
    fn rational_hat_at_center_with_unit_radius() {
        let mut t = Tape::new();
        t.freeze_params();
        let b = t.constant(&[1], vec![0.4]).unwrap();
        let d = t.constant(&[1], vec![0.6]).unwrap();
        let c = t.constant(&[1, 2], vec![0.4, 0.6]).unwrap();
        let r = t.constant(&[1], vec![1.0]).unwrap();
        let y = t.rational_hat_pt(b, d, c, r).unwrap();
        assert_eq!(t.values(y), &[0.5]);
    }

    #[test]
    fn segment_ops_basic() {
        let mut t = Tape::new();
        t.freeze_params();
        let x = t.constant(&[6], vec![3.0, 1.0, 2.0, -1.0, 5.0, 0.0]).unwrap();
        let s = t.segment_sum(x, 3).unwrap();
        let lo = t.segment_min(x, 3).unwrap();
        let hi = t.segment_max(x, 3).unwrap();
        assert_eq!(t.values(s), &[6.0, 4.0]);
        assert_eq!(t.values(lo), &[1.0, -1.0]);
        assert_eq!(t.values(hi), &[3.0, 5.0]);
    }

    #[test]
    fn movement_ops_round_trip() {
        let mut t = Tape::new();
        t.freeze_params();
        let x = t.constant(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let tiled = t.tile_rows(x, 2).unwrap();
        assert_eq!(t.values(tiled), &[1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let rep = t.repeat_rows_each(x, 2).unwrap();
        assert_eq!(t.values(rep), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
        let g = t.gather_rows(x, &[1, 0, 1]).unwrap();
        assert_eq!(t.values(g), &[3.0, 4.0, 1.0, 2.0, 3.0, 4.0]);
        let e = t.gather_elems(x, &[3, 0]).unwrap();
        assert_eq!(t.values(e), &[4.0, 1.0]);
        let cat = t.concat_cols(&[x, x]).unwrap();
        assert_eq!(t.values(cat), &[1.0, 2.0, 1.0, 2.0, 3.0, 4.0, 3.0, 4.0]);
    }

    /// Central finite differences over every parameter coordinate of a
    /// composite graph touching most op kinds.
    #[test]
    fn composite_gradients_match_finite_differences() {
        let mut rng = Rng::new(4242);
        let n_x = 12;
        let x0: Vec<f64> = (0..n_x).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        let w0: Vec<f64> = (0..12).map(|_| rng.uniform_in(-0.7, 0.7)).collect();
        let k0: Vec<f64> = (0..3).map(|_| rng.uniform_in(-0.5, 0.5)).collect();

        let run = |xv: &[f64], wv: &[f64], kv: &[f64], want_grad: bool| -> (f64, Vec<Vec<f64>>) {
            let mut t = Tape::new();
            let x = t.param(&[3, 4], xv.to_vec()).unwrap();
            let w = t.param(&[4, 3], wv.to_vec()).unwrap();
            let k = t.param(&[3], kv.to_vec()).unwrap();
            t.freeze_params();
            let c = t.conv1d_rows(x, k, 1).unwrap();
            let c = t.leaky_relu(c, 0.2).unwrap();
            let h = t.matmul(c, w).unwrap();
            let sm = t.softmax(h, 1).unwrap();
            let sg = t.sigmoid(h).unwrap();
            let mix = t.mul(sm, sg).unwrap();
            let flat = t.reshape(mix, &[9]).unwrap();
            let agg = t.segment_sum(flat, 3).unwrap();
            let hi = t.segment_max(flat, 3).unwrap();
            let both = t.add(agg, hi).unwrap();
            let loss = t.mean_all(both).unwrap();
            let value = t.values(loss)[0];
            if want_grad {
                t.backward(loss).unwrap();
                (value, vec![t.grad(x).to_vec(), t.grad(w).to_vec(), t.grad(k).to_vec()])
            } else {
                (value, Vec::new())
            }
        };

        let (_, grads) = run(&x0, &w0, &k0, true);
        let step = 1e-5;
        let groups: [&[f64]; 3] = [&x0, &w0, &k0];
        for (gi, base) in groups.iter().enumerate() {
            for ci in 0..base.len() {
                let mut up = [x0.clone(), w0.clone(), k0.clone()];
                up[gi][ci] += step;
                let (lu, _) = run(&up[0], &up[1], &up[2], false);
                let mut dn = [x0.clone(), w0.clone(), k0.clone()];
                dn[gi][ci] -= step;
                let (ld, _) = run(&dn[0], &dn[1], &dn[2], false);
                let fd = (lu - ld) / (2.0 * step);
                let an = grads[gi][ci];
                let denom = an.abs().max(fd.abs()).max(1e-6);
                assert!(
                    (an - fd).abs() / denom < 1e-4,
                    "group {gi} coord {ci}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn transform_gradients_match_finite_differences() {
        let mut rng = Rng::new(77);
        let p = 3;
        let b0: Vec<f64> = (0..p).map(|_| rng.uniform_in(0.05, 0.45)).collect();
        let d0: Vec<f64> = b0.iter().map(|v| v + rng.uniform_in(0.1, 0.5)).collect();
        let c0: Vec<f64> = (0..8).map(|_| rng.uniform_in(0.0, 1.0)).collect();
        let run = |bv: &[f64], dv: &[f64], cv: &[f64], grad: bool| -> (f64, Vec<Vec<f64>>) {
            let mut t = Tape::new();
            let b = t.param(&[p], bv.to_vec()).unwrap();
            let d = t.param(&[p], dv.to_vec()).unwrap();
            let c = t.param(&[4, 2], cv.to_vec()).unwrap();
            t.freeze_params();
            let s = t.constant(&[1], vec![0.25]).unwrap();
            let r = t.constant(&[1], vec![0.5]).unwrap();
            let g = t.gaussian_pt(b, d, c, s).unwrap();
            let hsamp = t.rational_hat_pt(b, d, c, r).unwrap();
            let grid = t.constant(&[4], vec![0.1, 0.35, 0.6, 0.9]).unwrap();
            let tri = t.triangle_pt(b, d, grid).unwrap();
            let off = t.constant(&[4], vec![0.0; 4]).unwrap();
            let lin = t.line_pt(b, d, c, off).unwrap();
            let a1 = t.add(g, hsamp).unwrap();
            let a2 = t.add(tri, lin).unwrap();
            let all = t.add(a1, a2).unwrap();
            let loss = t.mean_all(all).unwrap();
            let v = t.values(loss)[0];
            if grad {
                t.backward(loss).unwrap();
                (v, vec![t.grad(b).to_vec(), t.grad(d).to_vec(), t.grad(c).to_vec()])
            } else {
                (v, Vec::new())
            }
        };
        let (_, grads) = run(&b0, &d0, &c0, true);
        let step = 1e-6;
        let groups: [&[f64]; 3] = [&b0, &d0, &c0];
        for (gi, base) in groups.iter().enumerate() {
            for ci in 0..base.len() {
                let mut up = [b0.clone(), d0.clone(), c0.clone()];
                up[gi][ci] += step;
                let (lu, _) = run(&up[0], &up[1], &up[2], false);
                let mut dn = [b0.clone(), d0.clone(), c0.clone()];
                dn[gi][ci] -= step;
                let (ld, _) = run(&dn[0], &dn[1], &dn[2], false);
                let fd = (lu - ld) / (2.0 * step);
                let an = grads[gi][ci];
                let denom = an.abs().max(fd.abs()).max(1e-5);
                assert!(
                    (an - fd).abs() / denom < 1e-3,
                    "group {gi} coord {ci}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.param(&[1], vec![2.0]).unwrap();
        t.freeze_params();
        let d = t.detach(x).unwrap();
        let y = t.mul(d, d).unwrap();
        let loss = t.mean_all(y).unwrap();
        t.backward(loss).unwrap();
        assert_eq!(t.grad(x), &[0.0]);
    }
}
