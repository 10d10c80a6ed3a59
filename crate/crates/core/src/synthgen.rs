//! Synthetic brightfield-like volumes with paired masks.
//!
//! Structures render darker than the background with a bright halo just
//! outside them, the scene is blurred by an anisotropic Gaussian and then
//! multiplied by log-normal speckle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{BinaryMask, DEFAULT_SPACING};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Structure {
    /// Capsules: segments with a fixed radius.
    Tubes,
    /// Axis-aligned ellipsoids.
    Blobs,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub shape: [usize; 3],
    pub structure: Structure,
    pub count: usize,
    /// Radius range in voxels.
    pub radius: [f64; 2],
    /// Tube length range in voxels.
    pub length: [f64; 2],
    pub psf_sigma_z: f64,
    pub psf_sigma_xy: f64,
    pub halo_strength: f64,
    pub speckle_sigma: f64,
    /// Darkening of structures relative to the unit background.
    pub contrast: f64,
    pub seed: u64,
}

impl SceneSpec {
    pub fn blobs(shape: [usize; 3], seed: u64) -> Self {
        Self {
            shape,
            structure: Structure::Blobs,
            count: 5,
            radius: [3.0, 6.0],
            length: [8.0, 24.0],
            psf_sigma_z: 1.5,
            psf_sigma_xy: 0.7,
            halo_strength: 0.3,
            speckle_sigma: 0.05,
            contrast: 0.5,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.contains(&0) {
            return Err(Error::Scene(format!("empty shape {:?}", self.shape)));
        }
        if !(self.radius[0] > 0.0 && self.radius[0] <= self.radius[1]) {
            return Err(Error::Scene(format!("bad radius range {:?}", self.radius)));
        }
        if !(self.length[0] >= 0.0 && self.length[0] <= self.length[1]) {
            return Err(Error::Scene(format!("bad length range {:?}", self.length)));
        }
        if self.psf_sigma_z < 0.0 || self.psf_sigma_xy < 0.0 || self.speckle_sigma < 0.0 {
            return Err(Error::Scene("blur and speckle sigmas must be >= 0".into()));
        }
        Ok(())
    }
}

fn centre_range(dim: usize, r: f64) -> Result<(f64, f64)> {
    let (lo, hi) = (r, dim as f64 - 1.0 - r);
    if lo > hi {
        return Err(Error::Scene(format!("primitive of radius {r} does not fit an axis of {dim} voxels")));
    }
    Ok((lo, hi))
}

fn rasterise(spec: &SceneSpec, rng: &mut Rng) -> Result<Vec<bool>> {
    let [d, h, w] = spec.shape;
    let mut mask = vec![false; d * h * w];
    let dims = [d, h, w];
    for _ in 0..spec.count {
        match spec.structure {
            Structure::Blobs => {
                let r: [f64; 3] = std::array::from_fn(|_| rng.uniform_range(spec.radius[0], spec.radius[1]));
                let mut c = [0.0; 3];
                for a in 0..3 {
                    let (lo, hi) = centre_range(dims[a], r[a])?;
                    c[a] = rng.uniform_range(lo, hi).round();
                }
                for_box(dims, c, r, |i, p| {
                    let s: f64 = (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum();
                    if s <= 1.0 + 1e-9 {
                        mask[i] = true;
                    }
                });
            }
            Structure::Tubes => {
                let r = rng.uniform_range(spec.radius[0], spec.radius[1]);
                let mut a = [0.0; 3];
                let mut ranges = [(0.0, 0.0); 3];
                for ax in 0..3 {
                    ranges[ax] = centre_range(dims[ax], r)?;
                    a[ax] = rng.uniform_range(ranges[ax].0, ranges[ax].1);
                }
                let len = rng.uniform_range(spec.length[0], spec.length[1]);
                let dir = {
                    let v = [rng.normal(), rng.normal(), rng.normal()];
                    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                    v.map(|x| x / n)
                };
                let b: [f64; 3] = std::array::from_fn(|ax| (a[ax] + len * dir[ax]).clamp(ranges[ax].0, ranges[ax].1));
                let lo: [f64; 3] = std::array::from_fn(|ax| a[ax].min(b[ax]));
                let hi: [f64; 3] = std::array::from_fn(|ax| a[ax].max(b[ax]));
                let c: [f64; 3] = std::array::from_fn(|ax| 0.5 * (lo[ax] + hi[ax]));
                let half: [f64; 3] = std::array::from_fn(|ax| 0.5 * (hi[ax] - lo[ax]) + r);
                for_box(dims, c, half, |i, p| {
                    if segment_dist2(p, a, b) <= r * r + 1e-9 {
                        mask[i] = true;
                    }
                });
            }
        }
    }
    Ok(mask)
}

fn for_box(dims: [usize; 3], c: [f64; 3], half: [f64; 3], mut f: impl FnMut(usize, [f64; 3])) {
    let lo = |a: usize| (c[a] - half[a]).floor().max(0.0) as usize;
    let hi = |a: usize| ((c[a] + half[a]).ceil() as usize).min(dims[a] - 1);
    for z in lo(0)..=hi(0) {
        for y in lo(1)..=hi(1) {
            for x in lo(2)..=hi(2) {
                f((z * dims[1] + y) * dims[2] + x, [z as f64, y as f64, x as f64]);
            }
        }
    }
}

fn segment_dist2(p: [f64; 3], a: [f64; 3], b: [f64; 3]) -> f64 {
    let ab: [f64; 3] = std::array::from_fn(|i| b[i] - a[i]);
    let ap: [f64; 3] = std::array::from_fn(|i| p[i] - a[i]);
    let l2: f64 = ab.iter().map(|v| v * v).sum();
    let t = if l2 > 0.0 {
        (ap.iter().zip(&ab).map(|(x, y)| x * y).sum::<f64>() / l2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (0..3).map(|i| (ap[i] - t * ab[i]).powi(2)).sum()
}

/// One 6-neighbour dilation step.
fn dilate(m: &[bool], [d, h, w]: [usize; 3]) -> Vec<bool> {
    let mut out = m.to_vec();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let i = (z * h + y) * w + x;
                if m[i] {
                    continue;
                }
                let hit = (z > 0 && m[i - h * w])
                    || (z + 1 < d && m[i + h * w])
                    || (y > 0 && m[i - w])
                    || (y + 1 < h && m[i + w])
                    || (x > 0 && m[i - 1])
                    || (x + 1 < w && m[i + 1]);
                out[i] = hit;
            }
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable blur along `axis` with clamped borders.
fn blur_axis(v: &mut [f64], [d, h, w]: [usize; 3], axis: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return;
    }
    let r = (k.len() / 2) as i64;
    let (len, stride) = match axis {
        0 => (d, h * w),
        1 => (h, w),
        _ => (w, 1),
    };
    let src = v.to_vec();
    for start in 0..v.len() {
        let pos = (start / stride) % len;
        let base = start - pos * stride;
        let mut acc = 0.0;
        for (j, kv) in k.iter().enumerate() {
            let q = (pos as i64 + j as i64 - r).clamp(0, len as i64 - 1) as usize;
            acc += kv * src[base + q * stride];
        }
        v[start] = acc;
    }
}

/// Rendered volume `(1, D, H, W)` and its mask.
pub fn generate(spec: &SceneSpec) -> Result<(Tensor, BinaryMask)> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let mask = rasterise(spec, &mut rng)?;
    let ring = dilate(&dilate(&mask, spec.shape), spec.shape);
    let mut vol: Vec<f64> = mask
        .iter()
        .zip(&ring)
        .map(|(&m, &r)| {
            if m {
                1.0 - spec.contrast
            } else if r {
                1.0 + spec.halo_strength
            } else {
                1.0
            }
        })
        .collect();
    blur_axis(&mut vol, spec.shape, 0, spec.psf_sigma_z);
    blur_axis(&mut vol, spec.shape, 1, spec.psf_sigma_xy);
    blur_axis(&mut vol, spec.shape, 2, spec.psf_sigma_xy);
    if spec.speckle_sigma > 0.0 {
        let mut noise = Rng::with_stream(spec.seed, 1);
        vol.iter_mut().for_each(|v| *v *= (spec.speckle_sigma * noise.normal()).exp());
    }
    let [d, h, w] = spec.shape;
    Ok((Tensor::new(vec![1, d, h, w], vol)?, BinaryMask::new(spec.shape, mask, DEFAULT_SPACING)?))
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub seed: u64,
    pub volume: Tensor,
    pub mask: BinaryMask,
}

pub struct Dataset {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

/// Per-volume seeds and their deterministic train/val split.
pub fn split_seeds(master: u64, n: usize, ratio: f64) -> Result<(Vec<u64>, Vec<u64>)> {
    if n < 2 {
        return Err(Error::Scene(format!("a dataset needs at least 2 volumes, got {n}")));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Scene(format!("split ratio {ratio} outside [0, 1]")));
    }
    let mut seeds: Vec<u64> = (0..n as u64).map(|i| derive_seed(master, i)).collect();
    Rng::with_stream(master, 7).shuffle(&mut seeds);
    let n_train = ((n as f64 * ratio).round() as usize).min(n);
    let val = seeds.split_off(n_train);
    Ok((seeds, val))
}

pub fn dataset(spec: &SceneSpec, n: usize, ratio: f64) -> Result<Dataset> {
    let (tr, va) = split_seeds(spec.seed, n, ratio)?;
    let make = |seeds: Vec<u64>| -> Result<Vec<Sample>> {
        seeds
            .into_iter()
            .map(|seed| {
                let (volume, mask) = generate(&SceneSpec { seed, ..spec.clone() })?;
                Ok(Sample { seed, volume, mask })
            })
            .collect()
    };
    Ok(Dataset {
        train: make(tr)?,
        val: make(va)?,
    })
}
