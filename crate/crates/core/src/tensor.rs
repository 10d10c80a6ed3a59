//! Dense row-major arrays of `f64`.

use crate::error::{Error, Result};
use crate::kernels;

/// A dense multi-axis array. Row-major, last axis fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes (right-aligned).
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {:?} holds {} values, got {}", shape, numel(&shape), data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("Tensor::from_rows", "ragged rows"));
        }
        Self::new(vec![r, c], rows.concat())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The value of a one-element array.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        let st = strides(&self.shape);
        let off: usize = index.iter().zip(&st).map(|(i, s)| i * s).sum();
        self.data[off]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn into_reshape(self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.len() {
            return Err(Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape, shape),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::shape(
                "zip_map",
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, c: f64) -> Self {
        self.map(|v| v * c)
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Axes reordered so that output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let n = self.ndim();
        if axes.len() != n || {
            let mut seen = vec![false; n];
            axes.iter().any(|&a| a >= n || std::mem::replace(&mut seen[a], true))
        } {
            return Err(Error::shape(
                "permute",
                format!("{:?} is not a permutation of {} axes", axes, n),
            ));
        }
        let in_strides = strides(&self.shape);
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = vec![0.0; self.len()];
        if !out.is_empty() {
            kernels::strided_copy(&self.data, &out_shape, &src_strides, &mut out);
        }
        Ok(Self {
            shape: out_shape,
            data: out,
        })
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        let n = self.ndim();
        if n < 2 {
            return Err(Error::shape("transpose", "need at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 1, n - 2);
        self.permute(&axes)
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || start + len > self.shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("range {}..{} on axis {} of {:?}", start, start + len, axis, self.shape),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let full = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(Self { shape, data })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let nd = first.ndim();
        if axis >= nd {
            return Err(Error::shape("concat", format!("axis {} out of range", axis)));
        }
        for p in parts {
            if p.ndim() != nd
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} incompatible with {:?} on axis {}", p.shape, first.shape, axis),
                ));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(Self { shape, data })
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        match broadcast_shape(&self.shape, shape) {
            Some(s) if s == shape => {}
            _ => {
                return Err(Error::shape(
                    "broadcast",
                    format!("{:?} does not broadcast to {:?}", self.shape, shape),
                ))
            }
        }
        let src_strides = broadcast_strides(&self.shape, shape);
        let mut out = vec![0.0; numel(shape)];
        if !out.is_empty() {
            kernels::strided_copy(&self.data, shape, &src_strides, &mut out);
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: out,
        })
    }

    /// Sum over broadcast axes so the result has `shape` (inverse of `broadcast_to`).
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let src_strides = broadcast_strides(shape, &self.shape);
        let mut out = vec![0.0; numel(shape)];
        kernels::strided_accumulate(&self.data, &self.shape, &src_strides, &mut out);
        Ok(Self {
            shape: shape.to_vec(),
            data: out,
        })
    }

    /// Sum along `axis`, dropping it.
    pub fn sum_axis(&self, axis: usize) -> Result<Self> {
        if axis >= self.ndim() {
            return Err(Error::shape("sum_axis", format!("axis {} of {:?}", axis, self.shape)));
        }
        let (outer, len, inner) = self.split_at_axis(axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let src = &self.data[(o * len + l) * inner..(o * len + l + 1) * inner];
                let dst = &mut out[o * inner..(o + 1) * inner];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.remove(axis);
        Ok(Self { shape, data: out })
    }

    /// `(outer, axis_len, inner)` factorisation around `axis`.
    pub fn split_at_axis(&self, axis: usize) -> (usize, usize, usize) {
        let outer = self.shape[..axis].iter().product();
        let inner = self.shape[axis + 1..].iter().product();
        (outer, self.shape[axis], inner)
    }

    /// Matrix product over the last two axes. Leading (batch) axes must agree,
    /// or `other` may be a plain matrix shared across the batch.
    pub fn matmul(&self, other: &Tensor) -> Result<Self> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![0.0; plan.out_len()];
        plan.run(&self.data, &other.data, &mut out, false);
        Ok(Self {
            shape: plan.out_shape.clone(),
            data: out,
        })
    }

    /// Row-wise L2 norms over the last axis.
    pub fn row_norms(&self) -> Vec<f64> {
        let d = *self.shape.last().unwrap_or(&1);
        if d == 0 {
            return vec![];
        }
        self.data
            .chunks_exact(d)
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }
}

/// Strides that read `src` (shape `src_shape`) as if broadcast to `dst_shape`.
pub fn broadcast_strides(src_shape: &[usize], dst_shape: &[usize]) -> Vec<usize> {
    let st = strides(src_shape);
    let off = dst_shape.len() - src_shape.len();
    (0..dst_shape.len())
        .map(|i| {
            if i < off || src_shape[i - off] == 1 {
                0
            } else {
                st[i - off]
            }
        })
        .collect()
}

/// Shape bookkeeping for (batched) matrix products.
#[derive(Clone, Debug)]
pub struct MatmulPlan {
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    /// `true` when the right operand is a single matrix shared across the batch.
    pub rhs_shared: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(Error::shape(
                "matmul",
                format!("operands need >= 2 axes, got {:?} and {:?}", a, b),
            ));
        }
        if a.len() > 5 || b.len() > 5 {
            return Err(Error::shape("matmul", "at most 3 leading batch axes are supported"));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("inner dimensions differ: {:?} x {:?} ({} vs {})", a, b, k, k2),
            ));
        }
        let a_batch = &a[..a.len() - 2];
        let b_batch = &b[..b.len() - 2];
        let rhs_shared = b_batch.is_empty();
        if !rhs_shared && a_batch != b_batch {
            return Err(Error::shape(
                "matmul",
                format!("batch axes differ: {:?} vs {:?}", a_batch, b_batch),
            ));
        }
        let mut out_shape = a_batch.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: a_batch.iter().product(),
            m,
            k,
            n,
            rhs_shared,
            out_shape,
        })
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.m * self.n
    }

    /// `out (+)= a @ b` per batch entry.
    pub fn run(&self, a: &[f64], b: &[f64], out: &mut [f64], accumulate: bool) {
        let (m, k, n) = (self.m, self.k, self.n);
        if self.rhs_shared {
            // One big (batch*m) x k product.
            kernels::gemm_nn(self.batch * m, k, n, a, b, out, accumulate);
        } else {
            for bi in 0..self.batch {
                kernels::gemm_nn(
                    m,
                    k,
                    n,
                    &a[bi * m * k..(bi + 1) * m * k],
                    &b[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    accumulate,
                );
            }
        }
    }
}
