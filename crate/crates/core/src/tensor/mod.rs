//! Dense tensors with reverse-mode differentiation.
//!
//! The engine is an eager, append-only tape: every operation computes its
//! output immediately and records how it was produced. Because a node's
//! inputs always precede it on the tape, the backward pass is a single
//! reverse sweep. Gradients are zeroed at the start of every backward call,
//! so repeated backward passes over one graph give identical results.
//!
//! Precision is a type parameter: `Graph<f64>` for finite-difference
//! verification, `Graph<f32>` for training. Internal parallelism (rayon in
//! the convolution kernels) assigns each output element to exactly one task
//! with a fixed inner summation order, so results are bitwise reproducible
//! for any worker count.

mod conv;
mod gradcheck;
mod suite;

pub use conv::{conv2d_out_dims, Conv2dCfg, PaddingMode};
pub use gradcheck::{grad_check, grad_check_subset};
pub use suite::{op_gradcheck_suite, CheckReport};

use std::fmt;
use std::rc::Rc;

use num_traits::Float;

use crate::{Error, Result};

/// Element type of a [`Graph`]: f32 for speed, f64 for verification.
pub trait Scalar:
    Float + Send + Sync + fmt::Debug + fmt::Display + std::iter::Sum + 'static
{
    /// Checkpoint dtype tag (number of bytes per element).
    const DTYPE: u8;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Scalar for f32 {
    const DTYPE: u8 = 4;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Scalar for f64 {
    const DTYPE: u8 = 8;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Handle to a node on a [`Graph`]'s tape. Only valid for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor {
    id: usize,
}

/// How a node was produced; stores whatever the backward pass needs.
enum Op<T: Scalar> {
    Leaf {
        trainable: bool,
    },
    Add {
        a: usize,
        b: usize,
    },
    Mul {
        a: usize,
        b: usize,
    },
    Scale {
        x: usize,
        c: T,
    },
    /// Bias broadcast over the trailing spatial dims of `[C, H, W]`.
    AddBiasChw {
        x: usize,
        bias: usize,
    },
    /// Bias broadcast over the rows of `[N, M]`.
    AddBiasRows {
        x: usize,
        bias: usize,
    },
    MatMul {
        a: usize,
        b: usize,
    },
    Conv2d {
        input: usize,
        kernel: usize,
        cfg: Conv2dCfg,
    },
    CircularPad {
        x: usize,
        pad_w: usize,
    },
    LeakyRelu {
        x: usize,
        slope: T,
    },
    Log {
        x: usize,
    },
    /// Softmax over axis 0 of a `[C, H, W]` tensor.
    SoftmaxChw {
        x: usize,
    },
    Sum {
        x: usize,
    },
    /// Concatenation along axis 0 of rank-3 tensors (channel axis).
    ConcatChannels {
        parts: Vec<usize>,
    },
    /// Concatenation along axis 1 of rank-2 tensors (feature axis).
    ConcatCols {
        parts: Vec<usize>,
    },
    UpsampleNearest2 {
        x: usize,
    },
    /// Per-group max over rows of `[N, C]`; `argmax` holds the winning row
    /// per `(group, col)`, `usize::MAX` for empty groups.
    MaxPoolGroups {
        x: usize,
        argmax: Vec<usize>,
    },
    /// Per-group mean over rows of `[N, C]`.
    MeanPoolGroups {
        x: usize,
        group_of_row: Rc<Vec<Option<usize>>>,
        counts: Vec<usize>,
    },
    /// Place row `g` of `[G, C]` at flat cell `cell_of_row[g]` of a
    /// `[C, gx, gy]` grid.
    ScatterRowsToGrid {
        x: usize,
        cell_of_row: Rc<Vec<usize>>,
    },
    /// Row `n` of the output is the feature column at `index_of_row[n]` of a
    /// `[C, ...]` map (zeros when `None`).
    GatherRows {
        map: usize,
        index_of_row: Rc<Vec<Option<usize>>>,
    },
    /// Build a `[C, H, W]` image whose pixel `s` holds row `winner_of_cell[s]`
    /// of an `[N, C]` matrix (zeros when `None`).
    ScatterWinners {
        x: usize,
        winner_of_cell: Rc<Vec<Option<usize>>>,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    /// Scalar-valued function with gradients supplied at forward time.
    ScalarFn {
        inputs: Vec<usize>,
        input_grads: Vec<Vec<T>>,
    },
}

impl<T: Scalar> Op<T> {
    fn parents(&self, out: &mut Vec<usize>) {
        out.clear();
        match self {
            Op::Leaf { .. } => {}
            Op::Add { a, b } | Op::Mul { a, b } | Op::MatMul { a, b } => {
                out.extend([*a, *b]);
            }
            Op::Scale { x, .. }
            | Op::CircularPad { x, .. }
            | Op::LeakyRelu { x, .. }
            | Op::Log { x }
            | Op::SoftmaxChw { x }
            | Op::Sum { x }
            | Op::UpsampleNearest2 { x }
            | Op::MaxPoolGroups { x, .. }
            | Op::MeanPoolGroups { x, .. }
            | Op::ScatterRowsToGrid { x, .. }
            | Op::ScatterWinners { x, .. } => out.push(*x),
            Op::AddBiasChw { x, bias } | Op::AddBiasRows { x, bias } => {
                out.extend([*x, *bias]);
            }
            Op::Conv2d { input, kernel, .. } => out.extend([*input, *kernel]),
            Op::ConcatChannels { parts } | Op::ConcatCols { parts } => {
                out.extend_from_slice(parts);
            }
            Op::GatherRows { map, .. } => out.push(*map),
            Op::BatchNorm { x, gamma, beta, .. } => out.extend([*x, *gamma, *beta]),
            Op::ScalarFn { inputs, .. } => out.extend_from_slice(inputs),
        }
    }
}

/// Batch statistics emitted by a training-mode batch norm, for running-stat
/// updates by the caller.
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Append-only computation tape with eagerly materialized values.
pub struct Graph<T: Scalar> {
    shapes: Vec<Vec<usize>>,
    datas: Vec<Vec<T>>,
    grads: Vec<Vec<T>>,
    ops: Vec<Op<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn axpy<T: Scalar>(dst: &mut [T], src: &[T], scale: T) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + scale * s;
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            shapes: Vec::new(),
            datas: Vec::new(),
            grads: Vec::new(),
            ops: Vec::new(),
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        self.shapes.push(shape);
        self.datas.push(data);
        self.grads.push(Vec::new());
        self.ops.push(op);
        Tensor {
            id: self.ops.len() - 1,
        }
    }

    fn check_shape(&self, shape: &[usize], data: &[T]) -> Result<()> {
        if numel(shape) != data.len() {
            return Err(Error::contract(format!(
                "shape {:?} implies {} elements, data has {}",
                shape,
                numel(shape),
                data.len()
            )));
        }
        Ok(())
    }

    /// Non-trainable leaf.
    pub fn input(&mut self, shape: &[usize], data: Vec<T>) -> Result<Tensor> {
        self.check_shape(shape, &data)?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf { trainable: false }))
    }

    /// Trainable leaf; its gradient is read back after [`Graph::backward`].
    pub fn param(&mut self, shape: &[usize], data: Vec<T>) -> Result<Tensor> {
        self.check_shape(shape, &data)?;
        Ok(self.push(shape.to_vec(), data, Op::Leaf { trainable: true }))
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.shapes[t.id]
    }

    pub fn data(&self, t: Tensor) -> &[T] {
        &self.datas[t.id]
    }

    /// Gradient buffer of `t`; empty before the first backward pass.
    pub fn grad(&self, t: Tensor) -> &[T] {
        &self.grads[t.id]
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, t: Tensor) -> T {
        debug_assert_eq!(self.datas[t.id].len(), 1);
        self.datas[t.id][0]
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn same_shape(&self, a: Tensor, b: Tensor, what: &str) -> Result<()> {
        if self.shapes[a.id] != self.shapes[b.id] {
            return Err(Error::contract(format!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shapes[a.id], self.shapes[b.id]
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "add")?;
        let data = self.datas[a.id]
            .iter()
            .zip(&self.datas[b.id])
            .map(|(&x, &y)| x + y)
            .collect();
        Ok(self.push(self.shapes[a.id].clone(), data, Op::Add { a: a.id, b: b.id }))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        self.same_shape(a, b, "mul")?;
        let data = self.datas[a.id]
            .iter()
            .zip(&self.datas[b.id])
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.shapes[a.id].clone(), data, Op::Mul { a: a.id, b: b.id }))
    }

    pub fn scale(&mut self, x: Tensor, c: f64) -> Tensor {
        let c = T::from_f64(c);
        let data = self.datas[x.id].iter().map(|&v| c * v).collect();
        self.push(self.shapes[x.id].clone(), data, Op::Scale { x: x.id, c })
    }

    pub fn add_bias_chw(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let xs = self.shapes[x.id].clone();
        if xs.len() != 3 || self.shapes[bias.id] != [xs[0]] {
            return Err(Error::contract(format!(
                "add_bias_chw: input {:?} with bias {:?}",
                xs, self.shapes[bias.id]
            )));
        }
        let hw = xs[1] * xs[2];
        let mut data = self.datas[x.id].clone();
        for c in 0..xs[0] {
            let b = self.datas[bias.id][c];
            for v in &mut data[c * hw..(c + 1) * hw] {
                *v = *v + b;
            }
        }
        Ok(self.push(
            xs,
            data,
            Op::AddBiasChw {
                x: x.id,
                bias: bias.id,
            },
        ))
    }

    pub fn add_bias_rows(&mut self, x: Tensor, bias: Tensor) -> Result<Tensor> {
        let xs = self.shapes[x.id].clone();
        if xs.len() != 2 || self.shapes[bias.id] != [xs[1]] {
            return Err(Error::contract(format!(
                "add_bias_rows: input {:?} with bias {:?}",
                xs, self.shapes[bias.id]
            )));
        }
        let m = xs[1];
        let mut data = self.datas[x.id].clone();
        for row in data.chunks_exact_mut(m) {
            for (v, &b) in row.iter_mut().zip(&self.datas[bias.id]) {
                *v = *v + b;
            }
        }
        Ok(self.push(
            xs,
            data,
            Op::AddBiasRows {
                x: x.id,
                bias: bias.id,
            },
        ))
    }

    /// `[N, K] x [K, M] -> [N, M]`.
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (sa, sb) = (&self.shapes[a.id], &self.shapes[b.id]);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::contract(format!(
                "matmul: incompatible shapes {sa:?} x {sb:?}"
            )));
        }
        let (n, k, m) = (sa[0], sa[1], sb[1]);
        let mut data = vec![T::zero(); n * m];
        let (da, db) = (&self.datas[a.id], &self.datas[b.id]);
        for i in 0..n {
            for l in 0..k {
                let a_il = da[i * k + l];
                let brow = &db[l * m..(l + 1) * m];
                let orow = &mut data[i * m..(i + 1) * m];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + a_il * bv;
                }
            }
        }
        Ok(self.push(vec![n, m], data, Op::MatMul { a: a.id, b: b.id }))
    }

    pub fn conv2d(&mut self, input: Tensor, kernel: Tensor, cfg: Conv2dCfg) -> Result<Tensor> {
        let (out, shape) = conv::forward(
            &self.datas[input.id],
            &self.shapes[input.id],
            &self.datas[kernel.id],
            &self.shapes[kernel.id],
            &cfg,
        )?;
        Ok(self.push(
            shape,
            out,
            Op::Conv2d {
                input: input.id,
                kernel: kernel.id,
                cfg,
            },
        ))
    }

    /// Wrap-pad the width axis of a `[C, H, W]` tensor by `pad_w` on both
    /// sides.
    pub fn circular_pad(&mut self, x: Tensor, pad_w: usize) -> Result<Tensor> {
        let xs = self.shapes[x.id].clone();
        if xs.len() != 3 {
            return Err(Error::contract(format!(
                "circular_pad: expected rank-3 input, got {xs:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if pad_w >= w {
            return Err(Error::contract(format!(
                "circular_pad: pad_w {pad_w} must be < width {w}"
            )));
        }
        let wo = w + 2 * pad_w;
        let mut data = vec![T::zero(); c * h * wo];
        let src = &self.datas[x.id];
        for ci in 0..c {
            for i in 0..h {
                let srow = &src[(ci * h + i) * w..(ci * h + i + 1) * w];
                let drow = &mut data[(ci * h + i) * wo..(ci * h + i + 1) * wo];
                drow[..pad_w].copy_from_slice(&srow[w - pad_w..]);
                drow[pad_w..pad_w + w].copy_from_slice(srow);
                drow[pad_w + w..].copy_from_slice(&srow[..pad_w]);
            }
        }
        Ok(self.push(
            vec![c, h, wo],
            data,
            Op::CircularPad { x: x.id, pad_w },
        ))
    }

    pub fn leaky_relu(&mut self, x: Tensor, slope: f64) -> Tensor {
        let slope = T::from_f64(slope);
        let data = self.datas[x.id]
            .iter()
            .map(|&v| if v > T::zero() { v } else { slope * v })
            .collect();
        self.push(
            self.shapes[x.id].clone(),
            data,
            Op::LeakyRelu { x: x.id, slope },
        )
    }

    pub fn log(&mut self, x: Tensor) -> Tensor {
        let data = self.datas[x.id].iter().map(|&v| v.ln()).collect();
        self.push(self.shapes[x.id].clone(), data, Op::Log { x: x.id })
    }

    /// Softmax over the channel axis of a `[C, H, W]` tensor, with the usual
    /// max-shift for stability.
    pub fn softmax_chw(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.shapes[x.id].clone();
        if xs.len() != 3 {
            return Err(Error::contract(format!(
                "softmax_chw: expected rank-3 input, got {xs:?}"
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let src = &self.datas[x.id];
        let mut data = vec![T::zero(); c * hw];
        for p in 0..hw {
            let mut mx = src[p];
            for ci in 1..c {
                mx = mx.max(src[ci * hw + p]);
            }
            let mut denom = T::zero();
            for ci in 0..c {
                let e = (src[ci * hw + p] - mx).exp();
                data[ci * hw + p] = e;
                denom = denom + e;
            }
            for ci in 0..c {
                data[ci * hw + p] = data[ci * hw + p] / denom;
            }
        }
        Ok(self.push(xs, data, Op::SoftmaxChw { x: x.id }))
    }

    /// Full reduction to a `[1]` scalar.
    pub fn sum(&mut self, x: Tensor) -> Tensor {
        let total = self.datas[x.id].iter().copied().sum();
        self.push(vec![1], vec![total], Op::Sum { x: x.id })
    }

    /// Concatenate rank-3 tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_channels: no inputs"));
        }
        let hw_shape = self.shapes[parts[0].id][1..].to_vec();
        let mut c_total = 0;
        for &p in parts {
            let s = &self.shapes[p.id];
            if s.len() != 3 || s[1..] != hw_shape[..] {
                return Err(Error::contract(format!(
                    "concat_channels: incompatible shape {s:?}"
                )));
            }
            c_total += s[0];
        }
        let mut data = Vec::with_capacity(c_total * hw_shape[0] * hw_shape[1]);
        for &p in parts {
            data.extend_from_slice(&self.datas[p.id]);
        }
        Ok(self.push(
            vec![c_total, hw_shape[0], hw_shape[1]],
            data,
            Op::ConcatChannels {
                parts: parts.iter().map(|t| t.id).collect(),
            },
        ))
    }

    /// Concatenate rank-2 tensors along the column axis.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: no inputs"));
        }
        let n = self.shapes[parts[0].id][0];
        let mut m_total = 0;
        for &p in parts {
            let s = &self.shapes[p.id];
            if s.len() != 2 || s[0] != n {
                return Err(Error::contract(format!(
                    "concat_cols: incompatible shape {s:?}"
                )));
            }
            m_total += s[1];
        }
        let mut data = vec![T::zero(); n * m_total];
        let mut col = 0;
        for &p in parts {
            let m = self.shapes[p.id][1];
            for i in 0..n {
                data[i * m_total + col..i * m_total + col + m]
                    .copy_from_slice(&self.datas[p.id][i * m..(i + 1) * m]);
            }
            col += m;
        }
        Ok(self.push(
            vec![n, m_total],
            data,
            Op::ConcatCols {
                parts: parts.iter().map(|t| t.id).collect(),
            },
        ))
    }

    /// Nearest-neighbor 2x upsampling of a `[C, H, W]` tensor.
    pub fn upsample_nearest2(&mut self, x: Tensor) -> Result<Tensor> {
        let xs = self.shapes[x.id].clone();
        if xs.len() != 3 {
            return Err(Error::contract(format!(
                "upsample_nearest2: expected rank-3 input, got {xs:?}"
            )));
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let (ho, wo) = (2 * h, 2 * w);
        let src = &self.datas[x.id];
        let mut data = vec![T::zero(); c * ho * wo];
        for ci in 0..c {
            for i in 0..ho {
                for j in 0..wo {
                    data[(ci * ho + i) * wo + j] = src[(ci * h + i / 2) * w + j / 2];
                }
            }
        }
        Ok(self.push(vec![c, ho, wo], data, Op::UpsampleNearest2 { x: x.id }))
    }

    /// Per-group max over the rows of an `[N, C]` matrix. Rows with no group
    /// are ignored; empty groups yield zero rows. Ties keep the lowest row
    /// index.
    pub fn max_pool_groups(
        &mut self,
        x: Tensor,
        group_of_row: &Rc<Vec<Option<usize>>>,
        num_groups: usize,
    ) -> Result<Tensor> {
        let xs = self.shapes[x.id].clone();
        if xs.len() != 2 || group_of_row.len() != xs[0] {
            return Err(Error::contract(format!(
                "max_pool_groups: input {:?} with {} group entries",
                xs,
                group_of_row.len()
            )));
        }
        let c = xs[1];
        let src = &self.datas[x.id];
        let mut data = vec![T::zero(); num_groups * c];
        let mut argmax = vec![usize::MAX; num_groups * c];
        for (row, g) in group_of_row.iter().enumerate() {
            let Some(g) = *g else { continue };
            if g >= num_groups {
                return Err(Error::contract(format!(
                    "max_pool_groups: group {g} out of range {num_groups}"
                )));
            }
            for j in 0..c {
                let v = src[row * c + j];
                let slot = g * c + j;
                if argmax[slot] == usize::MAX || v > data[slot] {
                    data[slot] = v;
                    argmax[slot] = row;
                }
            }
        }
        Ok(self.push(
            vec![num_groups, c],
            data,
            Op::MaxPoolGroups { x: x.id, argmax },
        ))
    }

    /// Per-group mean over the rows of an `[N, C]` matrix.
    pub fn mean_pool_groups(
        &mut self,
        x: Tensor,
        group_of_row: &Rc<Vec<Option<usize>>>,
        num_groups: usize,
    ) -> Result<Tensor> {
        let xs = self.shapes[x.id].clone();
        if xs.len() != 2 || group_of_row.len() != xs[0] {
            return Err(Error::contract(format!(
                "mean_pool_groups: input {:?} with {} group entries",
                xs,
                group_of_row.len()
            )));
        }
        let c = xs[1];
        let src = &self.datas[x.id];
        let mut data = vec![T::zero(); num_groups * c];
        let mut counts = vec![0usize; num_groups];
        for (row, g) in group_of_row.iter().enumerate() {
            let Some(g) = *g else { continue };
            if g >= num_groups {
                return Err(Error::contract(format!(
                    "mean_pool_groups: group {g} out of range {num_groups}"
                )));
            }
            counts[g] += 1;
            for j in 0..c {
                data[g * c + j] = data[g * c + j] + src[row * c + j];
            }
        }
        for (g, &count) in counts.iter().enumerate() {
            if count > 0 {
                let inv = T::one() / T::from_f64(count as f64);
                for v in &mut data[g * c..(g + 1) * c] {
                    *v = *v * inv;
                }
            }
        }
        Ok(self.push(
            vec![num_groups, c],
            data,
            Op::MeanPoolGroups {
                x: x.id,
                group_of_row: Rc::clone(group_of_row),
                counts,
            },
        ))
    }

    /// Place the rows of a `[G, C]` matrix into a `[C, gx, gy]` grid at the
    /// flat cells `cell_of_row` (cell = ix * gy + iy). Unfilled cells are 0.
    pub fn scatter_rows_to_grid(
        &mut self,
        x: Tensor,
        cell_of_row: &Rc<Vec<usize>>,
        dims: (usize, usize),
    ) -> Result<Tensor> {
        let xs = self.shapes[x.id].clone();
        let cells = dims.0 * dims.1;
        if xs.len() != 2 || cell_of_row.len() != xs[0] {
            return Err(Error::contract(format!(
                "scatter_rows_to_grid: input {:?} with {} cells",
                xs,
                cell_of_row.len()
            )));
        }
        if let Some(&bad) = cell_of_row.iter().find(|&&cl| cl >= cells) {
            return Err(Error::contract(format!(
                "scatter_rows_to_grid: cell {bad} out of {cells}"
            )));
        }
        let c = xs[1];
        let src = &self.datas[x.id];
        let mut data = vec![T::zero(); c * cells];
        for (g, &cell) in cell_of_row.iter().enumerate() {
            for j in 0..c {
                data[j * cells + cell] = src[g * c + j];
            }
        }
        Ok(self.push(
            vec![c, dims.0, dims.1],
            data,
            Op::ScatterRowsToGrid {
                x: x.id,
                cell_of_row: Rc::clone(cell_of_row),
            },
        ))
    }

    /// Gather per-row feature columns from a `[C, ...]` map: output row `n`
    /// is the map's feature vector at flat spatial index `index_of_row[n]`,
    /// or zeros for `None`.
    pub fn gather_rows(
        &mut self,
        map: Tensor,
        index_of_row: &Rc<Vec<Option<usize>>>,
    ) -> Result<Tensor> {
        let ms = self.shapes[map.id].clone();
        if ms.len() < 2 {
            return Err(Error::contract(format!(
                "gather_rows: map must have rank >= 2, got {ms:?}"
            )));
        }
        let c = ms[0];
        let cells = numel(&ms[1..]);
        let src = &self.datas[map.id];
        let n = index_of_row.len();
        let mut data = vec![T::zero(); n * c];
        for (row, idx) in index_of_row.iter().enumerate() {
            let Some(idx) = *idx else { continue };
            if idx >= cells {
                return Err(Error::contract(format!(
                    "gather_rows: index {idx} out of {cells}"
                )));
            }
            for j in 0..c {
                data[row * c + j] = src[j * cells + idx];
            }
        }
        Ok(self.push(
            vec![n, c],
            data,
            Op::GatherRows {
                map: map.id,
                index_of_row: Rc::clone(index_of_row),
            },
        ))
    }

    /// Build a `[C, H, W]` image from an `[N, C]` matrix: pixel `s` takes row
    /// `winner_of_cell[s]`, masked pixels (`None`) stay zero.
    pub fn scatter_winners(
        &mut self,
        x: Tensor,
        winner_of_cell: &Rc<Vec<Option<usize>>>,
        dims: (usize, usize),
    ) -> Result<Tensor> {
        let xs = self.shapes[x.id].clone();
        if xs.len() != 2 || winner_of_cell.len() != dims.0 * dims.1 {
            return Err(Error::contract(format!(
                "scatter_winners: input {:?}, {} cells for dims {:?}",
                xs,
                winner_of_cell.len(),
                dims
            )));
        }
        let (n, c) = (xs[0], xs[1]);
        let cells = dims.0 * dims.1;
        let src = &self.datas[x.id];
        let mut data = vec![T::zero(); c * cells];
        for (s, w) in winner_of_cell.iter().enumerate() {
            let Some(row) = *w else { continue };
            if row >= n {
                return Err(Error::contract(format!(
                    "scatter_winners: row {row} out of {n}"
                )));
            }
            for j in 0..c {
                data[j * cells + s] = src[row * c + j];
            }
        }
        Ok(self.push(
            vec![c, dims.0, dims.1],
            data,
            Op::ScatterWinners {
                x: x.id,
                winner_of_cell: Rc::clone(winner_of_cell),
            },
        ))
    }

    fn batch_norm_impl(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        mean: &[T],
        var: &[T],
        eps: f64,
        train: bool,
    ) -> Result<Tensor> {
        let xs = self.shapes[x.id].clone();
        if xs.len() != 3 {
            return Err(Error::contract(format!(
                "batch_norm: expected rank-3 input, got {xs:?}"
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        if self.shapes[gamma.id] != [c] || self.shapes[beta.id] != [c] || mean.len() != c {
            return Err(Error::contract("batch_norm: parameter shape mismatch"));
        }
        let eps = T::from_f64(eps);
        let src = &self.datas[x.id];
        let mut xhat = vec![T::zero(); c * hw];
        let mut inv_std = vec![T::zero(); c];
        let mut data = vec![T::zero(); c * hw];
        for ci in 0..c {
            let istd = T::one() / (var[ci] + eps).sqrt();
            inv_std[ci] = istd;
            let (g, b) = (self.datas[gamma.id][ci], self.datas[beta.id][ci]);
            for p in 0..hw {
                let xh = (src[ci * hw + p] - mean[ci]) * istd;
                xhat[ci * hw + p] = xh;
                data[ci * hw + p] = g * xh + b;
            }
        }
        Ok(self.push(
            xs,
            data,
            Op::BatchNorm {
                x: x.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                inv_std,
                train,
            },
        ))
    }

    /// Batch norm over the spatial dims using the batch's own statistics.
    /// Returns the per-channel mean and biased variance so the caller can
    /// update running buffers.
    pub fn batch_norm_train(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        eps: f64,
    ) -> Result<(Tensor, BatchStats<T>)> {
        let xs = &self.shapes[x.id];
        if xs.len() != 3 {
            return Err(Error::contract(format!(
                "batch_norm: expected rank-3 input, got {xs:?}"
            )));
        }
        let (c, hw) = (xs[0], xs[1] * xs[2]);
        let src = &self.datas[x.id];
        let inv_n = T::one() / T::from_f64(hw as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for ci in 0..c {
            let mut m = T::zero();
            for p in 0..hw {
                m = m + src[ci * hw + p];
            }
            m = m * inv_n;
            let mut v = T::zero();
            for p in 0..hw {
                let d = src[ci * hw + p] - m;
                v = v + d * d;
            }
            mean[ci] = m;
            var[ci] = v * inv_n;
        }
        let out = self.batch_norm_impl(x, gamma, beta, &mean, &var, eps, true)?;
        Ok((out, BatchStats { mean, var }))
    }

    /// Batch norm with frozen statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Tensor,
        gamma: Tensor,
        beta: Tensor,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Tensor> {
        self.batch_norm_impl(x, gamma, beta, running_mean, running_var, eps, false)
    }

    /// Scalar node whose gradients with respect to each input were computed
    /// by the caller at forward time.
    pub fn scalar_fn(&mut self, value: T, inputs: Vec<(Tensor, Vec<T>)>) -> Result<Tensor> {
        let mut ids = Vec::with_capacity(inputs.len());
        let mut grads = Vec::with_capacity(inputs.len());
        for (t, g) in inputs {
            if g.len() != self.datas[t.id].len() {
                return Err(Error::contract(
                    "scalar_fn: gradient length does not match input",
                ));
            }
            ids.push(t.id);
            grads.push(g);
        }
        Ok(self.push(
            vec![1],
            vec![value],
            Op::ScalarFn {
                inputs: ids,
                input_grads: grads,
            },
        ))
    }

    /// Reverse sweep from a scalar `root`, accumulating gradients into every
    /// contributing node's buffer. All gradient buffers are reset first.
    pub fn backward(&mut self, root: Tensor) -> Result<()> {
        if self.datas[root.id].len() != 1 {
            return Err(Error::contract(format!(
                "backward: root must be scalar, has shape {:?}",
                self.shapes[root.id]
            )));
        }
        for (i, g) in self.grads.iter_mut().enumerate() {
            g.clear();
            g.resize(self.datas[i].len(), T::zero());
        }
        // Mark the subgraph that feeds the root; everything else is skipped.
        let mut needed = vec![false; self.ops.len()];
        needed[root.id] = true;
        let mut parents = Vec::new();
        for i in (0..=root.id).rev() {
            if !needed[i] {
                continue;
            }
            self.ops[i].parents(&mut parents);
            for &p in &parents {
                needed[p] = true;
            }
        }
        self.grads[root.id][0] = T::one();
        for i in (0..=root.id).rev() {
            if needed[i] {
                self.backprop(i);
            }
        }
        Ok(())
    }

    fn backprop(&mut self, i: usize) {
        let gout = std::mem::take(&mut self.grads[i]);
        match &self.ops[i] {
            Op::Leaf { .. } => {}
            Op::Add { a, b } => {
                axpy(&mut self.grads[*a], &gout, T::one());
                axpy(&mut self.grads[*b], &gout, T::one());
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                for k in 0..gout.len() {
                    self.grads[a][k] = self.grads[a][k] + gout[k] * self.datas[b][k];
                }
                for k in 0..gout.len() {
                    self.grads[b][k] = self.grads[b][k] + gout[k] * self.datas[a][k];
                }
            }
            Op::Scale { x, c } => {
                axpy(&mut self.grads[*x], &gout, *c);
            }
            Op::AddBiasChw { x, bias } => {
                let (x, bias) = (*x, *bias);
                axpy(&mut self.grads[x], &gout, T::one());
                let c = self.shapes[bias][0];
                let hw = gout.len() / c;
                for ci in 0..c {
                    let mut acc = T::zero();
                    for p in 0..hw {
                        acc = acc + gout[ci * hw + p];
                    }
                    self.grads[bias][ci] = self.grads[bias][ci] + acc;
                }
            }
            Op::AddBiasRows { x, bias } => {
                let (x, bias) = (*x, *bias);
                axpy(&mut self.grads[x], &gout, T::one());
                let m = self.shapes[bias][0];
                for row in gout.chunks_exact(m) {
                    for (gb, &g) in self.grads[bias].iter_mut().zip(row) {
                        *gb = *gb + g;
                    }
                }
            }
            Op::MatMul { a, b } => {
                let (a, b) = (*a, *b);
                let (n, k) = (self.shapes[a][0], self.shapes[a][1]);
                let m = self.shapes[b][1];
                for il in 0..n {
                    for l in 0..k {
                        let mut acc = T::zero();
                        for j in 0..m {
                            acc = acc + gout[il * m + j] * self.datas[b][l * m + j];
                        }
                        self.grads[a][il * k + l] = self.grads[a][il * k + l] + acc;
                    }
                }
                for l in 0..k {
                    for il in 0..n {
                        let a_il = self.datas[a][il * k + l];
                        for j in 0..m {
                            self.grads[b][l * m + j] =
                                self.grads[b][l * m + j] + a_il * gout[il * m + j];
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, cfg } => {
                let (input, kernel) = (*input, *kernel);
                let cfg = cfg.clone();
                let (din, dker) = conv::backward(
                    &self.datas[input],
                    &self.shapes[input],
                    &self.datas[kernel],
                    &self.shapes[kernel],
                    &gout,
                    &self.shapes[i],
                    &cfg,
                );
                axpy(&mut self.grads[input], &din, T::one());
                axpy(&mut self.grads[kernel], &dker, T::one());
            }
            Op::CircularPad { x, pad_w } => {
                let (x, pad_w) = (*x, *pad_w);
                let s = &self.shapes[x];
                let (c, h, w) = (s[0], s[1], s[2]);
                let wo = w + 2 * pad_w;
                let gx = &mut self.grads[x];
                for ci in 0..c {
                    for row in 0..h {
                        let grow = &gout[(ci * h + row) * wo..(ci * h + row + 1) * wo];
                        let xrow = &mut gx[(ci * h + row) * w..(ci * h + row + 1) * w];
                        for (j, &g) in grow.iter().enumerate() {
                            let src = (j + w - pad_w) % w;
                            xrow[src] = xrow[src] + g;
                        }
                    }
                }
            }
            Op::LeakyRelu { x, slope } => {
                let (x, slope) = (*x, *slope);
                for k in 0..gout.len() {
                    let factor = if self.datas[x][k] > T::zero() {
                        T::one()
                    } else {
                        slope
                    };
                    self.grads[x][k] = self.grads[x][k] + gout[k] * factor;
                }
            }
            Op::Log { x } => {
                let x = *x;
                for k in 0..gout.len() {
                    self.grads[x][k] = self.grads[x][k] + gout[k] / self.datas[x][k];
                }
            }
            Op::SoftmaxChw { x } => {
                let x = *x;
                let s = &self.shapes[i];
                let (c, hw) = (s[0], s[1] * s[2]);
                let y = &self.datas[i];
                for p in 0..hw {
                    let mut dot = T::zero();
                    for ci in 0..c {
                        dot = dot + gout[ci * hw + p] * y[ci * hw + p];
                    }
                    for ci in 0..c {
                        let k = ci * hw + p;
                        self.grads[x][k] = self.grads[x][k] + y[k] * (gout[k] - dot);
                    }
                }
            }
            Op::Sum { x } => {
                let x = *x;
                let g = gout[0];
                for v in self.grads[x].iter_mut() {
                    *v = *v + g;
                }
            }
            Op::ConcatChannels { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.datas[p].len();
                    axpy(&mut self.grads[p], &gout[offset..offset + len], T::one());
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let parts = parts.clone();
                let m_total = self.shapes[i][1];
                let n = self.shapes[i][0];
                let mut col = 0;
                for p in parts {
                    let m = self.shapes[p][1];
                    for row in 0..n {
                        for j in 0..m {
                            self.grads[p][row * m + j] =
                                self.grads[p][row * m + j] + gout[row * m_total + col + j];
                        }
                    }
                    col += m;
                }
            }
            Op::UpsampleNearest2 { x } => {
                let x = *x;
                let s = &self.shapes[x];
                let (c, h, w) = (s[0], s[1], s[2]);
                let (ho, wo) = (2 * h, 2 * w);
                for ci in 0..c {
                    for i2 in 0..ho {
                        for j2 in 0..wo {
                            let k = (ci * h + i2 / 2) * w + j2 / 2;
                            self.grads[x][k] = self.grads[x][k] + gout[(ci * ho + i2) * wo + j2];
                        }
                    }
                }
            }
            Op::MaxPoolGroups { x, argmax } => {
                let x = *x;
                let c = self.shapes[i][1];
                let argmax = argmax.clone();
                for (slot, &row) in argmax.iter().enumerate() {
                    if row != usize::MAX {
                        let j = slot % c;
                        self.grads[x][row * c + j] = self.grads[x][row * c + j] + gout[slot];
                    }
                }
            }
            Op::MeanPoolGroups {
                x,
                group_of_row,
                counts,
            } => {
                let x = *x;
                let c = self.shapes[i][1];
                let group_of_row = Rc::clone(group_of_row);
                let counts = counts.clone();
                for (row, g) in group_of_row.iter().enumerate() {
                    let Some(g) = *g else { continue };
                    let inv = T::one() / T::from_f64(counts[g] as f64);
                    for j in 0..c {
                        self.grads[x][row * c + j] =
                            self.grads[x][row * c + j] + gout[g * c + j] * inv;
                    }
                }
            }
            Op::ScatterRowsToGrid { x, cell_of_row } => {
                let x = *x;
                let cells = self.shapes[i][1] * self.shapes[i][2];
                let c = self.shapes[i][0];
                let cell_of_row = Rc::clone(cell_of_row);
                for (g, &cell) in cell_of_row.iter().enumerate() {
                    for j in 0..c {
                        self.grads[x][g * c + j] =
                            self.grads[x][g * c + j] + gout[j * cells + cell];
                    }
                }
            }
            Op::GatherRows { map, index_of_row } => {
                let map = *map;
                let c = self.shapes[map][0];
                let cells = self.datas[map].len() / c;
                let index_of_row = Rc::clone(index_of_row);
                for (row, idx) in index_of_row.iter().enumerate() {
                    let Some(idx) = *idx else { continue };
                    for j in 0..c {
                        self.grads[map][j * cells + idx] =
                            self.grads[map][j * cells + idx] + gout[row * c + j];
                    }
                }
            }
            Op::ScatterWinners { x, winner_of_cell } => {
                let x = *x;
                let c = self.shapes[i][0];
                let cells = self.shapes[i][1] * self.shapes[i][2];
                let winner_of_cell = Rc::clone(winner_of_cell);
                for (s, w) in winner_of_cell.iter().enumerate() {
                    let Some(row) = *w else { continue };
                    for j in 0..c {
                        self.grads[x][row * c + j] =
                            self.grads[x][row * c + j] + gout[j * cells + s];
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (x, gamma, beta, train) = (*x, *gamma, *beta, *train);
                let c = self.shapes[gamma][0];
                let hw = gout.len() / c;
                let inv_n = T::one() / T::from_f64(hw as f64);
                // Split off the saved buffers so grads can be written while
                // they are read.
                let (xhat, inv_std) = (xhat.clone(), inv_std.clone());
                for ci in 0..c {
                    let mut sum_g = T::zero();
                    let mut sum_gx = T::zero();
                    for p in 0..hw {
                        let k = ci * hw + p;
                        sum_g = sum_g + gout[k];
                        sum_gx = sum_gx + gout[k] * xhat[k];
                    }
                    self.grads[beta][ci] = self.grads[beta][ci] + sum_g;
                    self.grads[gamma][ci] = self.grads[gamma][ci] + sum_gx;
                    let gscale = self.datas[gamma][ci] * inv_std[ci];
                    if train {
                        let mean_g = sum_g * inv_n;
                        let mean_gx = sum_gx * inv_n;
                        for p in 0..hw {
                            let k = ci * hw + p;
                            self.grads[x][k] = self.grads[x][k]
                                + gscale * (gout[k] - mean_g - xhat[k] * mean_gx);
                        }
                    } else {
                        for p in 0..hw {
                            let k = ci * hw + p;
                            self.grads[x][k] = self.grads[x][k] + gscale * gout[k];
                        }
                    }
                }
            }
            Op::ScalarFn {
                inputs,
                input_grads,
            } => {
                let g = gout[0];
                let inputs = inputs.clone();
                // Cloned to release the borrow on ops; loss gradients are
                // small relative to the graph.
                let input_grads = input_grads.clone();
                for (idx, grad) in inputs.iter().zip(&input_grads) {
                    axpy(&mut self.grads[*idx], grad, g);
                }
            }
        }
        self.grads[i] = gout;
    }
}
