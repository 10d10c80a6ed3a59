//! Slow, obviously-correct reference implementations used by tests and the
//! `gradcheck` command. Nothing on a production path calls into this module.

use std::collections::VecDeque;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nsa::NsaLayer;
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct FdConfig {
    pub step: f64,
    pub rel_tol: f64,
    pub abs_floor: f64,
    /// Coordinates beyond this count are subsampled.
    pub max_coords: usize,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self {
            step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-8,
            max_coords: 256,
        }
    }
}

/// Central differences of `f` at `at` for the listed coordinates.
pub fn finite_diff<F>(mut f: F, at: &[f64], coords: &[usize], step: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if step <= 0.0 {
        return Err(Error::Contract("finite-difference step must be positive".into()));
    }
    let mut x = at.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = x[i];
            x[i] = orig + step;
            let fp = f(&x)?;
            x[i] = orig - step;
            let fm = f(&x)?;
            x[i] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(Error::numeric("finite_diff", format!("non-finite value at coordinate {}", i)));
            }
            Ok((fp - fm) / (2.0 * step))
        })
        .collect()
}

/// Up to `max` distinct coordinates of `0..n`, all of them when `n <= max`.
pub fn sample_coords(n: usize, max: usize, seed: u64) -> Vec<usize> {
    let mut all: Vec<usize> = (0..n).collect();
    if n > max {
        Rng::new(seed ^ 0xC0_0D).shuffle(&mut all);
        all.truncate(max);
        all.sort_unstable();
    }
    all
}

#[derive(Clone, Debug)]
pub struct GradReport {
    pub coords_checked: usize,
    pub max_abs_err: f64,
    /// `|a - b| / max(|a|, |b|)` over coordinates that exceed the absolute floor.
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Compares analytic and numeric gradients: each coordinate must satisfy
/// `|a - b| <= rel_tol * max(|a|, |b|) + abs_floor`.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64], cfg: &FdConfig) -> GradReport {
    let mut report = GradReport {
        coords_checked: analytic.len(),
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        passed: true,
    };
    for (&a, &b) in analytic.iter().zip(numeric) {
        let diff = (a - b).abs();
        let mag = a.abs().max(b.abs());
        report.max_abs_err = report.max_abs_err.max(diff);
        if diff > cfg.abs_floor {
            report.max_rel_err = report.max_rel_err.max(diff / mag);
        }
        if !(diff <= cfg.rel_tol * mag + cfg.abs_floor) {
            report.passed = false;
        }
    }
    report
}

/// Gradient check of a tape function of several tensors. A non-scalar output
/// is reduced to `sum(out * R)` with a fixed random `R`.
pub fn check_gradients<F>(inputs: &[Tensor], f: &F, cfg: &FdConfig, seed: u64) -> Result<GradReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let weights = {
        let tape = Tape::no_grad();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let mut rng = Rng::new(seed.wrapping_add(77));
        Tensor::new(out.shape().to_vec(), rng.normal_vec(out.value().len(), 1.0))?
    };
    let scalar = |tape: &Tape, vars: &[Var]| -> Result<f64> {
        let out = f(tape, vars)?;
        Ok(out.value().data().iter().zip(weights.data()).map(|(a, b)| a * b).sum())
    };

    let tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let out = f(&tape, &vars)?;
    let loss = out.mul(&tape.constant(weights.clone()))?.sum();
    let grads = tape.backward(&loss)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match grads.wrt(v) {
            Some(g) => analytic.extend_from_slice(g.data()),
            None => analytic.extend(std::iter::repeat_n(0.0, t.len())),
        }
    }

    let sizes: Vec<usize> = inputs.iter().map(Tensor::len).collect();
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let coords = sample_coords(flat.len(), cfg.max_coords, seed);
    let numeric = finite_diff(
        |x| {
            let tape = Tape::no_grad();
            let mut off = 0;
            let vars: Vec<Var> = inputs
                .iter()
                .zip(&sizes)
                .map(|(t, &n)| {
                    let v = Tensor::new(t.shape().to_vec(), x[off..off + n].to_vec()).expect("shape");
                    off += n;
                    tape.constant(v)
                })
                .collect();
            scalar(&tape, &vars)
        },
        &flat,
        &coords,
        cfg.step,
    )?;
    let picked: Vec<f64> = coords.iter().map(|&i| analytic[i]).collect();
    Ok(compare_gradients(&picked, &numeric, cfg))
}

/// Full non-causal multi-head attention with the projections of `layer`.
///
/// `x` is `(N, dim)` for a single batch item. Logits are `s_h * cos(q, k)` with
/// the layer's per-head scale, so the oracle agrees with the sparse layer
/// whenever a route covers every key.
pub fn dense_attention(layer: &NsaLayer, store: &ParamStore, x: &Tensor) -> Result<Tensor> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let (h, kv, dh) = (layer.cfg.heads, layer.cfg.kv_heads, layer.cfg.d_head);
    let hg = h / kv;
    let proj = |w: &Tensor, cols: usize| -> Vec<Vec<f64>> {
        (0..n)
            .map(|t| {
                (0..cols)
                    .map(|c| (0..d).map(|i| x.data()[t * d + i] * w.data()[i * cols + c]).sum())
                    .collect()
            })
            .collect()
    };
    let unit = |v: &[f64]| -> Vec<f64> {
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(crate::hypersphere::EPS);
        v.iter().map(|a| a / norm).collect()
    };
    let q = proj(&store.value(layer.w_q), h * dh);
    let k = proj(&store.value(layer.w_k), kv * dh);
    let v = proj(&store.value(layer.w_v), kv * dh);
    let scale = store.value(layer.qk_scale);
    let mut heads = vec![0.0; n * h * dh];
    for head in 0..h {
        let g = head / hg;
        let keys: Vec<Vec<f64>> = k.iter().map(|r| unit(&r[g * dh..(g + 1) * dh])).collect();
        let vals: Vec<Vec<f64>> = v.iter().map(|r| unit(&r[g * dh..(g + 1) * dh])).collect();
        for t in 0..n {
            let qt = unit(&q[t][head * dh..(head + 1) * dh]);
            let logits: Vec<f64> = keys
                .iter()
                .map(|kj| scale.data()[head] * qt.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>())
                .collect();
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for (j, vj) in vals.iter().enumerate() {
                for c in 0..dh {
                    heads[(t * h + head) * dh + c] += e[j] / z * vj[c];
                }
            }
        }
    }
    let wo = store.value(layer.w_o);
    let mut out = vec![0.0; n * d];
    for t in 0..n {
        let row: Vec<f64> = (0..d)
            .map(|c| (0..h * dh).map(|i| heads[t * h * dh + i] * wo.data()[i * d + c]).sum())
            .collect();
        out[t * d..(t + 1) * d].copy_from_slice(&unit(&row));
    }
    Tensor::new(vec![n, d], out)
}

/// Directed surface-to-surface distances by exhaustive search.
pub fn directed_distances_brute(from: &[[f64; 3]], to: &[[f64; 3]]) -> Vec<f64> {
    from.iter()
        .map(|a| {
            to.iter()
                .map(|b| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        })
        .collect()
}

/// Connected components by breadth-first flood fill with 26-connectivity.
pub fn flood_fill_components(mask: &[bool], shape: [usize; 3]) -> usize {
    let [d, h, w] = shape;
    let mut seen = vec![false; mask.len()];
    let mut count = 0;
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            let (z, y, x) = ((i / (h * w)) as i64, ((i / w) % h) as i64, (i % w) as i64);
            for dz in -1..=1i64 {
                for dy in -1..=1i64 {
                    for dx in -1..=1i64 {
                        let (nz, ny, nx) = (z + dz, y + dy, x + dx);
                        if nz < 0 || ny < 0 || nx < 0 || nz >= d as i64 || ny >= h as i64 || nx >= w as i64 {
                            continue;
                        }
                        let j = (nz as usize * h + ny as usize) * w + nx as usize;
                        if mask[j] && !seen[j] {
                            seen[j] = true;
                            queue.push_back(j);
                        }
                    }
                }
            }
        }
    }
    count
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fd_of_square() {
        let g = finite_diff(|x| Ok(x[0] * x[0]), &[3.0], &[0], 1e-5).unwrap();
        assert!((g[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fd_of_sigmoid_sum() {
        let at = [-1.0, 0.0, 2.0];
        let f = |x: &[f64]| Ok(x.iter().map(|&v| crate::autodiff::sigmoid(v)).sum());
        let g = finite_diff(f, &at, &[0, 1, 2], 1e-5).unwrap();
        for (gi, &x) in g.iter().zip(&at) {
            let s = crate::autodiff::sigmoid(x);
            assert!((gi - s * (1.0 - s)).abs() < 1e-6);
        }
    }

    #[test]
    fn fd_rejects_non_finite() {
        let err = finite_diff(|x| Ok(x[0].ln()), &[0.5], &[0], 1.0).unwrap_err();
        assert!(matches!(err, Error::Numeric { .. }));
    }

    #[test]
    fn flood_fill_counts_diagonal_touch_as_one() {
        let mut m = vec![false; 27];
        m[0] = true;
        m[13] = true;
        m[26] = true;
        assert_eq!(flood_fill_components(&m, [3, 3, 3]), 1);
        m[13] = false;
        assert_eq!(flood_fill_components(&m, [3, 3, 3]), 2);
    }
}
