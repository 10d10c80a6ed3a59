//! Differentiable primitives.

use std::rc::Rc;

use super::Var;
use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{broadcast_shape, numel, MatmulPlan, Tensor};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// GELU with the exact Gaussian CDF.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

pub fn gelu_grad(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / SQRT_2)) + x * INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// `x ln x` with the `0 ln 0 = 0` convention.
pub fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

fn unary_grad(g: &Tensor, x: &Tensor, y: &Tensor, df: fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(x.data().iter().zip(y.data()))
        .map(|(&gi, (&xi, &yi))| gi * df(xi, yi))
        .collect();
    Tensor::new(g.shape().to_vec(), data).expect("same shape")
}

/// Gradient reduced back onto an operand that was broadcast.
fn unbroadcast(g: Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        g
    } else {
        g.sum_to_shape(shape).expect("broadcast-compatible")
    }
}

impl<'t> Var<'t> {
    fn unary(&self, f: fn(f64) -> f64, df: fn(f64, f64) -> f64) -> Var<'t> {
        let y = self.value.map(f);
        let x = self.value_rc();
        let out = Rc::new(y);
        let out_c = Rc::clone(&out);
        self.tape.record(&[self], (*out).clone(), move |g, _| {
            vec![Some(unary_grad(g, &x, &out_c, df))]
        })
    }

    pub fn neg(&self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.tape
            .record(&[self], self.value.scale(c), move |g, _| vec![Some(g.scale(c))])
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.tape
            .record(&[self], self.value.map(|v| v + c), |g, _| vec![Some(g.clone())])
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn sigmoid(&self) -> Var<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn tanh(&self) -> Var<'t> {
        self.unary(f64::tanh, |_, y| 1.0 - y * y)
    }

    pub fn gelu(&self) -> Var<'t> {
        self.unary(gelu, |x, _| gelu_grad(x))
    }

    pub fn softplus(&self) -> Var<'t> {
        self.unary(softplus, |x, _| sigmoid(x))
    }

    /// Elementwise `x ln x` (entropy integrand); derivative `ln x + 1`, taken as 0 at x = 0.
    pub fn xlogx(&self) -> Var<'t> {
        self.unary(xlogx, |x, _| if x > 0.0 { x.ln() + 1.0 } else { 0.0 })
    }

    fn binary(
        &self,
        other: &Var<'t>,
        name: &'static str,
        f: fn(f64, f64) -> f64,
        da: fn(f64, f64) -> f64,
        db: fn(f64, f64) -> f64,
    ) -> Result<Var<'t>> {
        let sa = self.shape().to_vec();
        let sb = other.shape().to_vec();
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape(name, format!("{:?} and {:?} do not broadcast", sa, sb)))?;
        let a = if sa == out_shape {
            self.value_rc()
        } else {
            Rc::new(self.value.broadcast_to(&out_shape)?)
        };
        let b = if sb == out_shape {
            other.value_rc()
        } else {
            Rc::new(other.value.broadcast_to(&out_shape)?)
        };
        let y = a.zip_map(&b, f)?;
        Ok(self.tape.record(&[self, other], y, move |g, needs| {
            let ga = needs[0].then(|| {
                let t = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(&gi, (&x, &y))| gi * da(x, y))
                        .collect(),
                )
                .expect("same shape");
                unbroadcast(t, &sa)
            });
            let gb = needs[1].then(|| {
                let t = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(a.data().iter().zip(b.data()))
                        .map(|(&gi, (&x, &y))| gi * db(x, y))
                        .collect(),
                )
                .expect("same shape");
                unbroadcast(t, &sb)
            });
            vec![ga, gb]
        }))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if self.shape() == other.shape() {
            let y = self.value.zip_map(&other.value, |a, b| a + b)?;
            return Ok(self
                .tape
                .record(&[self, other], y, |g, n| vec![n[0].then(|| g.clone()), n[1].then(|| g.clone())]));
        }
        self.binary(other, "add", |a, b| a + b, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        if self.shape() == other.shape() {
            let y = self.value.zip_map(&other.value, |a, b| a - b)?;
            return Ok(self.tape.record(&[self, other], y, |g, n| {
                vec![n[0].then(|| g.clone()), n[1].then(|| g.scale(-1.0))]
            }));
        }
        self.binary(other, "sub", |a, b| a - b, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, |_, b| 1.0 / b, |a, b| -a / (b * b))
    }

    pub fn sum(&self) -> Var<'t> {
        let shape = self.shape().to_vec();
        self.tape.record(&[self], Tensor::scalar(self.value.sum()), move |g, _| {
            vec![Some(Tensor::full(&shape, g.item()))]
        })
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.len().max(1) as f64;
        self.sum().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let y = self.value.sum_axis(axis)?;
        let shape = self.shape().to_vec();
        let mut kept = shape.clone();
        kept[axis] = 1;
        Ok(self.tape.record(&[self], y, move |g, _| {
            let g = g.reshape(&kept).expect("kept dims");
            vec![Some(g.broadcast_to(&shape).expect("broadcast back"))]
        }))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let n = self.shape().get(axis).copied().unwrap_or(1).max(1) as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    /// Maximum along `axis` (dropped); the gradient goes to the first maximiser.
    pub fn max_axis(&self, axis: usize) -> Result<Var<'t>> {
        if axis >= self.value.ndim() {
            return Err(Error::shape("max_axis", format!("axis {} of {:?}", axis, self.shape())));
        }
        let (outer, len, inner) = self.value.split_at_axis(axis);
        let x = self.value.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = x[(o * len + l) * inner + i];
                    if v > out[o * inner + i] {
                        out[o * inner + i] = v;
                        arg[o * inner + i] = l;
                    }
                }
            }
        }
        let mut shape = self.shape().to_vec();
        shape.remove(axis);
        let in_shape = self.shape().to_vec();
        let y = Tensor::new(shape, out)?;
        Ok(self.tape.record(&[self], y, move |g, _| {
            let mut gx = vec![0.0; numel(&in_shape)];
            for o in 0..outer {
                for i in 0..inner {
                    let l = arg[o * inner + i];
                    gx[(o * len + l) * inner + i] = g.data()[o * inner + i];
                }
            }
            vec![Some(Tensor::new(in_shape.clone(), gx).expect("shape"))]
        }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let y = self.value.reshape(shape)?;
        let orig = self.shape().to_vec();
        Ok(self
            .tape
            .record(&[self], y, move |g, _| vec![Some(g.reshape(&orig).expect("reshape back"))]))
    }

    pub fn permute(&self, axes: &[usize]) -> Result<Var<'t>> {
        let y = self.value.permute(axes)?;
        let mut inverse = vec![0; axes.len()];
        for (i, &a) in axes.iter().enumerate() {
            inverse[a] = i;
        }
        Ok(self
            .tape
            .record(&[self], y, move |g, _| vec![Some(g.permute(&inverse).expect("inverse"))]))
    }

    /// Swap the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let n = self.value.ndim();
        if n < 2 {
            return Err(Error::shape("transpose", "need at least 2 axes"));
        }
        let mut axes: Vec<usize> = (0..n).collect();
        axes.swap(n - 1, n - 2);
        self.permute(&axes)
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let y = self.value.narrow(axis, start, len)?;
        let shape = self.shape().to_vec();
        Ok(self.tape.record(&[self], y, move |g, _| {
            let outer: usize = shape[..axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let full = shape[axis];
            let mut gx = vec![0.0; numel(&shape)];
            for o in 0..outer {
                let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                let base = (o * full + start) * inner;
                gx[base..base + len * inner].copy_from_slice(src);
            }
            vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))]
        }))
    }

    pub fn concat(parts: &[&Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let values: Vec<&Tensor> = parts.iter().map(|p| p.value()).collect();
        let y = Tensor::concat(&values, axis)?;
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(first.tape.record(parts, y, move |g, needs| {
            let mut start = 0;
            sizes
                .iter()
                .zip(needs)
                .map(|(&len, &need)| {
                    let part = need.then(|| g.narrow(axis, start, len).expect("concat slice"));
                    start += len;
                    part
                })
                .collect()
        }))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Var<'t>> {
        let y = self.value.broadcast_to(shape)?;
        let orig = self.shape().to_vec();
        Ok(self
            .tape
            .record(&[self], y, move |g, _| vec![Some(unbroadcast(g.clone(), &orig))]))
    }

    /// Rows `indices` of the array viewed as `(rows, rest...)`.
    pub fn gather_rows(&self, indices: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        let rows = *shape.first().ok_or_else(|| Error::shape("gather_rows", "scalar input"))?;
        let width: usize = shape[1..].iter().product();
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("index {} >= {} rows", bad, rows)));
        }
        let x = self.value.data();
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices.iter() {
            out.extend_from_slice(&x[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = indices.len();
        let y = Tensor::new(out_shape, out)?;
        Ok(self.tape.record(&[self], y, move |g, _| {
            let mut gx = vec![0.0; rows * width];
            for (r, &i) in indices.iter().enumerate() {
                kernels::axpy(1.0, &g.data()[r * width..(r + 1) * width], &mut gx[i * width..(i + 1) * width]);
            }
            vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))]
        }))
    }

    /// Adds row `r` of the input into row `indices[r]` of a zero array with `rows` rows.
    pub fn scatter_add_rows(&self, indices: Rc<Vec<usize>>, rows: usize) -> Result<Var<'t>> {
        let shape = self.shape().to_vec();
        if shape.first() != Some(&indices.len()) {
            return Err(Error::shape(
                "scatter_add_rows",
                format!("{} indices for {:?}", indices.len(), shape),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("scatter_add_rows", format!("index {} >= {} rows", bad, rows)));
        }
        let width: usize = shape[1..].iter().product();
        let x = self.value.data();
        let mut out = vec![0.0; rows * width];
        for (r, &i) in indices.iter().enumerate() {
            kernels::axpy(1.0, &x[r * width..(r + 1) * width], &mut out[i * width..(i + 1) * width]);
        }
        let mut out_shape = shape.clone();
        out_shape[0] = rows;
        let y = Tensor::new(out_shape, out)?;
        Ok(self.tape.record(&[self], y, move |g, _| {
            let mut gx = Vec::with_capacity(indices.len() * width);
            for &i in indices.iter() {
                gx.extend_from_slice(&g.data()[i * width..(i + 1) * width]);
            }
            vec![Some(Tensor::new(shape.clone(), gx).expect("shape"))]
        }))
    }

    /// Matrix product over the last two axes (see [`MatmulPlan`] for batching).
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        let plan = MatmulPlan::new(self.shape(), other.shape())?;
        let mut out = vec![0.0; plan.out_len()];
        plan.run(self.value.data(), other.value.data(), &mut out, false);
        let y = Tensor::new(plan.out_shape.clone(), out)?;
        let a = self.value_rc();
        let b = other.value_rc();
        Ok(self.tape.record(&[self, other], y, move |g, needs| {
            let (m, k, n) = (plan.m, plan.k, plan.n);
            let ga = needs[0].then(|| {
                let mut ga = vec![0.0; a.len()];
                if plan.rhs_shared {
                    kernels::gemm_nt(plan.batch * m, n, k, g.data(), b.data(), &mut ga, false);
                } else {
                    for bi in 0..plan.batch {
                        kernels::gemm_nt(
                            m,
                            n,
                            k,
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &b.data()[bi * k * n..(bi + 1) * k * n],
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            false,
                        );
                    }
                }
                Tensor::new(a.shape().to_vec(), ga).expect("shape")
            });
            let gb = needs[1].then(|| {
                let mut gb = vec![0.0; b.len()];
                if plan.rhs_shared {
                    kernels::gemm_tn_acc(plan.batch * m, k, n, a.data(), g.data(), &mut gb);
                } else {
                    for bi in 0..plan.batch {
                        kernels::gemm_tn_acc(
                            m,
                            k,
                            n,
                            &a.data()[bi * m * k..(bi + 1) * m * k],
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bi * k * n..(bi + 1) * k * n],
                        );
                    }
                }
                Tensor::new(b.shape().to_vec(), gb).expect("shape")
            });
            vec![ga, gb]
        }))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        if axis >= self.value.ndim() {
            return Err(Error::shape("softmax", format!("axis {} of {:?}", axis, self.shape())));
        }
        if self.value.data().iter().any(|v| v.is_nan()) {
            return Err(Error::numeric("softmax", "NaN input"));
        }
        let y = Rc::new(softmax_tensor(&self.value, axis));
        let yc = Rc::clone(&y);
        Ok(self.tape.record(&[self], (*y).clone(), move |g, _| {
            let (outer, len, inner) = yc.split_at_axis(axis);
            let yd = yc.data();
            let gd = g.data();
            let mut gx = vec![0.0; yd.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let mut dotp = 0.0;
                    for l in 0..len {
                        let idx = (o * len + l) * inner + i;
                        dotp += gd[idx] * yd[idx];
                    }
                    for l in 0..len {
                        let idx = (o * len + l) * inner + i;
                        gx[idx] = yd[idx] * (gd[idx] - dotp);
                    }
                }
            }
            vec![Some(Tensor::new(yc.shape().to_vec(), gx).expect("shape"))]
        }))
    }

    /// Each last-axis vector divided by `max(||v||, eps)`.
    pub fn l2_normalize(&self, eps: f64) -> Var<'t> {
        let d = *self.shape().last().unwrap_or(&1);
        let x = self.value.data();
        let mut norms = Vec::with_capacity(x.len() / d.max(1));
        let mut out = vec![0.0; x.len()];
        if d > 0 {
            for (row, orow) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                let n = kernels::dot(row, row).sqrt();
                let denom = n.max(eps);
                for (o, v) in orow.iter_mut().zip(row) {
                    *o = v / denom;
                }
                norms.push(n);
            }
        }
        let y = Rc::new(Tensor::new(self.shape().to_vec(), out).expect("shape"));
        let yc = Rc::clone(&y);
        self.tape.record(&[self], (*y).clone(), move |g, _| {
            let mut gx = vec![0.0; g.len()];
            if d > 0 {
                for (r, ((grow, yrow), gxrow)) in g
                    .data()
                    .chunks_exact(d)
                    .zip(yc.data().chunks_exact(d))
                    .zip(gx.chunks_exact_mut(d))
                    .enumerate()
                {
                    let n = norms[r];
                    if n > eps {
                        let proj = kernels::dot(grow, yrow);
                        for ((o, gv), yv) in gxrow.iter_mut().zip(grow).zip(yrow) {
                            *o = (gv - yv * proj) / n;
                        }
                    } else {
                        for (o, gv) in gxrow.iter_mut().zip(grow) {
                            *o = gv / eps;
                        }
                    }
                }
            }
            vec![Some(Tensor::new(yc.shape().to_vec(), gx).expect("shape"))]
        })
    }

    /// Keeps the `k` largest entries of each last-axis vector (ties: lower index
    /// wins) and zeroes the rest. Gradient flows only through kept entries.
    pub fn topk_mask(&self, k: usize) -> Var<'t> {
        let d = *self.shape().last().unwrap_or(&1);
        let x = self.value.data();
        let mut mask = vec![false; x.len()];
        if d > 0 {
            for (row, mrow) in x.chunks_exact(d).zip(mask.chunks_exact_mut(d)) {
                for j in top_k_indices(row, k) {
                    mrow[j] = true;
                }
            }
        }
        let y: Vec<f64> = x.iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
        let y = Tensor::new(self.shape().to_vec(), y).expect("shape");
        self.tape.record(&[self], y, move |g, _| {
            let gx: Vec<f64> = g.data().iter().zip(&mask).map(|(&v, &m)| if m { v } else { 0.0 }).collect();
            vec![Some(Tensor::new(g.shape().to_vec(), gx).expect("shape"))]
        })
    }
}

/// Indices of the `k` largest values, ordered by descending value; ties go to the lower index.
pub fn top_k_indices(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

pub fn softmax_tensor(x: &Tensor, axis: usize) -> Tensor {
    let (outer, len, inner) = x.split_at_axis(axis);
    let xd = x.data();
    let mut y = vec![0.0; xd.len()];
    if inner == 1 {
        for (row, out) in xd.chunks_exact(len.max(1)).zip(y.chunks_exact_mut(len.max(1))) {
            softmax_slice(row, out);
        }
    } else {
        let mut buf = vec![0.0; len];
        let mut obuf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                for l in 0..len {
                    buf[l] = xd[(o * len + l) * inner + i];
                }
                softmax_slice(&buf, &mut obuf);
                for l in 0..len {
                    y[(o * len + l) * inner + i] = obuf[l];
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), y).expect("shape")
}

pub fn softmax_slice(x: &[f64], out: &mut [f64]) {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (v - m).exp();
        s += *o;
    }
    for o in out.iter_mut() {
        *o /= s;
    }
}
