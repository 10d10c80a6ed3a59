//! Unit-norm geometry for hidden states.

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::kernels::dot;
use crate::tensor::Tensor;

/// Guard for normalising near-zero vectors (f64).
pub const EPS: f64 = 1e-12;

/// Divides each last-axis vector by `max(||v||, eps)`.
pub fn normalize(x: &Tensor, eps: f64) -> Tensor {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    if d > 0 {
        for row in out.data_mut().chunks_exact_mut(d) {
            let n = dot(row, row).sqrt().max(eps);
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    out
}

/// `normalize(x + alpha * (u - x))`: linear interpolation followed by
/// projection back to the sphere. `alpha` broadcasts against `x` and must lie
/// in `[0, 1]`.
pub fn slerp_gate<'t>(x: &Var<'t>, u: &Var<'t>, alpha: &Var<'t>) -> Result<Var<'t>> {
    if let Some(a) = alpha.value().data().iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(Error::Contract(format!("gate value {} outside [0, 1]", a)));
    }
    let step = alpha.mul(&u.sub(x)?)?;
    Ok(x.add(&step)?.l2_normalize(EPS))
}

/// Angle between two vectors, robust for nearly parallel inputs.
pub fn angle(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    let diff = a.iter().zip(b).map(|(x, y)| (x / na - y / nb).powi(2)).sum::<f64>().sqrt();
    let sum = a.iter().zip(b).map(|(x, y)| (x / na + y / nb).powi(2)).sum::<f64>().sqrt();
    2.0 * diff.atan2(sum)
}

/// Great-circle interpolation between unit vectors.
pub fn slerp_exact(x: &[f64], u: &[f64], t: f64) -> Result<Vec<f64>> {
    if x.len() != u.len() {
        return Err(Error::shape("slerp_exact", "vectors differ in length"));
    }
    let theta = angle(x, u);
    if (std::f64::consts::PI - theta) < 1e-9 {
        return Err(Error::Geometry("slerp between antipodal vectors is undefined".into()));
    }
    if theta < 1e-15 {
        return Ok(x.to_vec());
    }
    let s = theta.sin();
    let (a, b) = (((1.0 - t) * theta).sin() / s, (t * theta).sin() / s);
    Ok(x.iter().zip(u).map(|(xi, ui)| a * xi + b * ui).collect())
}
