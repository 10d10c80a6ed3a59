//! Anisotropic patch embedding: axial anti-alias filter with stride `p_z`,
//! in-plane tiling, bias-free projection and a factorised positional table.
//!
//! Tokens are flattened in `(z, y, x)` order with `x` fastest:
//! `t = (z * H' + y) * W' + x`. Within a tile the folded feature index is
//! `(ty * p_x + tx) * C + c`, channel fastest.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::hypersphere::EPS;
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchSpec {
    pub p_z: usize,
    pub p_y: usize,
    pub p_x: usize,
    pub hidden: usize,
    pub channels: usize,
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.p_z == 0 || self.p_y == 0 || self.p_x == 0 || self.hidden == 0 || self.channels == 0 {
            return Err(Error::Config("patch sizes, hidden width and channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Folded tile length `p_y * p_x * C`; independent of `p_z`.
    pub fn tile_len(&self) -> usize {
        self.p_y * self.p_x * self.channels
    }

    pub fn grid(&self, dhw: [usize; 3]) -> Result<[usize; 3]> {
        let p = [self.p_z, self.p_y, self.p_x];
        for (i, name) in ["D", "H", "W"].iter().enumerate() {
            if dhw[i] % p[i] != 0 {
                return Err(Error::shape(
                    "patch_embed",
                    format!("axis {} = {} is not divisible by patch size {}", name, dhw[i], p[i]),
                ));
            }
        }
        Ok([dhw[0] / p[0], dhw[1] / p[1], dhw[2] / p[2]])
    }
}

/// Largest `(D, H, W)` not exceeding `dhw` that is divisible by the patch.
pub fn cropped_shape(dhw: [usize; 3], spec: &PatchSpec) -> Result<[usize; 3]> {
    let p = [spec.p_z, spec.p_y, spec.p_x];
    let mut out = [0; 3];
    for (i, name) in ["D", "H", "W"].iter().enumerate() {
        if dhw[i] < p[i] {
            return Err(Error::shape(
                "crop_to_divisible",
                format!("axis {} = {} is smaller than its patch size {}", name, dhw[i], p[i]),
            ));
        }
        out[i] = dhw[i] / p[i] * p[i];
    }
    Ok(out)
}

/// Removes trailing voxels of a `(B,C,D,H,W)` volume so every axis divides
/// its patch size. Returns the cropped volume and its `(D,H,W)`.
pub fn crop_to_divisible(x: &Tensor, spec: &PatchSpec) -> Result<(Tensor, [usize; 3])> {
    let s = x.shape();
    if s.len() != 5 {
        return Err(Error::shape("crop_to_divisible", format!("expected (B,C,D,H,W), got {:?}", s)));
    }
    let target = cropped_shape([s[2], s[3], s[4]], spec)?;
    let mut out = x.clone();
    for (axis, &len) in target.iter().enumerate() {
        if out.shape()[axis + 2] != len {
            out = out.narrow(axis + 2, 0, len)?;
        }
    }
    Ok((out, target))
}

/// Depthwise `(p_z,1,1)` filter with stride `p_z`; weight shape `(C, p_z)`.
pub fn axial_antialias<'t>(x: &Var<'t>, weight: &Var<'t>) -> Result<Var<'t>> {
    x.axial_depthwise(weight)
}

/// Folds `p_y x p_x` tiles of `(B,C,D',H,W)` into vectors and projects them
/// with `w_proj: (p_y*p_x*C, h)`, giving tokens `(B, N, h)`.
pub fn tile_and_project<'t>(x: &Var<'t>, spec: &PatchSpec, w_proj: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::shape("tile_and_project", format!("expected (B,C,D,H,W), got {:?}", s)));
    }
    let (b, c, d) = (s[0], s[1], s[2]);
    let [_, hp, wp] = spec.grid([spec.p_z, s[3], s[4]])?;
    if w_proj.shape() != [spec.p_y * spec.p_x * c, spec.hidden] {
        return Err(Error::shape(
            "tile_and_project",
            format!("projection {:?} does not match tile length {}", w_proj.shape(), spec.p_y * spec.p_x * c),
        ));
    }
    let tiles = x
        .reshape(&[b, c, d, hp, spec.p_y, wp, spec.p_x])?
        .permute(&[0, 2, 3, 5, 4, 6, 1])?
        .reshape(&[b, d * hp * wp, spec.p_y * spec.p_x * c])?;
    tiles.matmul(w_proj)
}

/// `(B, N, d)` token features back onto the `(B, d, D', H', W')` grid.
pub fn tokens_to_grid<'t>(tokens: &Var<'t>, grid: [usize; 3]) -> Result<Var<'t>> {
    let s = tokens.shape().to_vec();
    if s.len() != 3 || s[1] != grid.iter().product::<usize>() {
        return Err(Error::shape(
            "tokens_to_grid",
            format!("tokens {:?} do not fill grid {:?}", s, grid),
        ));
    }
    tokens.reshape(&[s[0], grid[0], grid[1], grid[2], s[2]])?.permute(&[0, 4, 1, 2, 3])
}

/// Inverse of [`tokens_to_grid`].
pub fn grid_to_tokens<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let s = x.shape().to_vec();
    if s.len() != 5 {
        return Err(Error::shape("grid_to_tokens", format!("expected (B,d,D,H,W), got {:?}", s)));
    }
    x.permute(&[0, 2, 3, 4, 1])?.reshape(&[s[0], s[2] * s[3] * s[4], s[1]])
}

pub struct TokenLattice<'t> {
    /// `(B, N, h)`, unit-norm rows.
    pub tokens: Var<'t>,
    pub grid: [usize; 3],
}

#[derive(Clone, Debug)]
pub struct PatchEmbed {
    pub spec: PatchSpec,
    /// Largest grid the positional tables cover.
    pub max_grid: [usize; 3],
    pub w_aa: ParamId,
    pub w_proj: ParamId,
    pub pos: [ParamId; 3],
}

impl PatchEmbed {
    pub fn new(store: &mut ParamStore, spec: &PatchSpec, input_dhw: [usize; 3]) -> Result<Self> {
        spec.validate()?;
        let max_grid = spec.grid(cropped_shape(input_dhw, spec)?)?;
        let h = spec.hidden;
        let pos_std = 0.5 / (h as f64).sqrt();
        store.scoped("embed", |s| {
            let w_aa = s.add("antialias", &[spec.channels, spec.p_z], Init::Const(1.0 / spec.p_z as f64));
            let k = spec.tile_len();
            let w_proj = s.add("proj", &[k, h], Init::Normal { std: 1.0 / (k as f64).sqrt() });
            let pos = [
                s.add("pos_z", &[max_grid[0], h], Init::Normal { std: pos_std }),
                s.add("pos_y", &[max_grid[1], h], Init::Normal { std: pos_std }),
                s.add("pos_x", &[max_grid[2], h], Init::Normal { std: pos_std }),
            ];
            Ok(Self {
                spec: spec.clone(),
                max_grid,
                w_aa,
                w_proj,
                pos,
            })
        })
    }

    /// `x: (B,C,D,H,W)` with every axis divisible by its patch size.
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<TokenLattice<'t>> {
        let s = x.shape().to_vec();
        if s.len() != 5 || s[1] != self.spec.channels {
            return Err(Error::shape(
                "patch_embed",
                format!("expected (B,{},D,H,W), got {:?}", self.spec.channels, s),
            ));
        }
        let grid = self.spec.grid([s[2], s[3], s[4]])?;
        if (0..3).any(|i| grid[i] > self.max_grid[i]) {
            return Err(Error::shape(
                "patch_embed",
                format!("token grid {:?} exceeds the configured grid {:?}", grid, self.max_grid),
            ));
        }
        let filtered = axial_antialias(x, &bind.get(self.w_aa))?;
        let tokens = tile_and_project(&filtered, &self.spec, &bind.get(self.w_proj))?.l2_normalize(EPS);
        let h = self.spec.hidden;
        let table = |i: usize, shape: [usize; 4]| -> Result<Var<'t>> {
            bind.get(self.pos[i]).narrow(0, 0, grid[i])?.reshape(&shape)
        };
        let pos = table(0, [grid[0], 1, 1, h])?
            .add(&table(1, [1, grid[1], 1, h])?)?
            .add(&table(2, [1, 1, grid[2], h])?)?
            .reshape(&[1, grid.iter().product(), h])?;
        let tokens = tokens.add(&pos)?.l2_normalize(EPS);
        Ok(TokenLattice { tokens, grid })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::params::StoreMode;
    use crate::rng::Rng;

    fn spec(p: [usize; 3], h: usize, c: usize) -> PatchSpec {
        PatchSpec { p_z: p[0], p_y: p[1], p_x: p[2], hidden: h, channels: c }
    }

    fn box_weight(c: usize, p: usize) -> Tensor {
        Tensor::full(&[c, p], 1.0 / p as f64)
    }

    #[test]
    fn crop_examples() {
        let s = spec([2, 16, 16], 8, 1);
        assert_eq!(cropped_shape([65, 624, 924], &s).unwrap(), [64, 624, 912]);
        assert_eq!(cropped_shape([32, 128, 128], &s).unwrap(), [32, 128, 128]);
        assert_eq!(cropped_shape([2, 16, 16], &s).unwrap(), [2, 16, 16]);
        let err = cropped_shape([1, 16, 16], &s).unwrap_err().to_string();
        assert!(err.contains("axis D"), "{err}");
        let x = Tensor::zeros(&[1, 1, 3, 17, 16]);
        let (c, dhw) = crop_to_divisible(&x, &s).unwrap();
        assert_eq!(dhw, [2, 16, 16]);
        assert_eq!(c.shape(), &[1, 1, 2, 16, 16]);
    }

    #[test]
    fn antialias_examples() {
        let tape = Tape::no_grad();
        let mut rng = Rng::new(1);
        let x = tape.constant(Tensor::new(vec![1, 2, 3, 2, 2], rng.normal_vec(24, 1.0)).unwrap());
        let y = axial_antialias(&x, &tape.constant(box_weight(2, 1))).unwrap();
        assert_eq!(y.value(), x.value());

        let c = tape.constant(Tensor::full(&[1, 1, 4, 2, 2], 3.5));
        let y = axial_antialias(&c, &tape.constant(box_weight(1, 2))).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2, 2]);
        assert!(y.value().data().iter().all(|&v| (v - 3.5).abs() < 1e-15));

        let seq = tape.constant(Tensor::new(vec![1, 1, 4, 1, 1], vec![1.0, 3.0, 5.0, 7.0]).unwrap());
        let y = axial_antialias(&seq, &tape.constant(box_weight(1, 2))).unwrap();
        assert_eq!(y.value().data(), &[2.0, 6.0]);

        let odd = tape.constant(Tensor::zeros(&[1, 1, 3, 1, 1]));
        let err = axial_antialias(&odd, &tape.constant(box_weight(1, 2))).unwrap_err().to_string();
        assert!(err.contains("depth axis"), "{err}");
    }

    #[test]
    fn nyquist_signal_is_suppressed() {
        let tape = Tape::no_grad();
        let data: Vec<f64> = (0..8 * 4).map(|i| if (i / 4) % 2 == 0 { 2.0 } else { -2.0 }).collect();
        let x = tape.constant(Tensor::new(vec![1, 1, 8, 2, 2], data).unwrap());
        let y = axial_antialias(&x, &tape.constant(box_weight(1, 2))).unwrap();
        assert!(y.value().data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn tile_examples() {
        let tape = Tape::no_grad();
        let mut rng = Rng::new(2);
        let s = spec([1, 1, 1], 1, 1);
        let x = tape.constant(Tensor::new(vec![1, 1, 2, 3, 4], rng.normal_vec(24, 1.0)).unwrap());
        let t = tile_and_project(&x, &s, &tape.constant(Tensor::eye(1))).unwrap();
        assert_eq!(t.shape(), &[1, 24, 1]);
        assert_eq!(t.value().data(), x.value().data());

        let s = spec([1, 2, 3], 5, 2);
        let w = tape.constant(Tensor::new(vec![12, 5], rng.normal_vec(60, 1.0)).unwrap());
        let mut vol = Tensor::zeros(&[1, 2, 1, 4, 6]);
        // tile (y=1, x=0), in-tile (ty=1, tx=2), channel 1
        let (ty, tx, c) = (1usize, 2usize, 1usize);
        let (yy, xx) = (2 + ty, tx);
        vol.data_mut()[((c * 1) * 4 + yy) * 6 + xx] = 1.0;
        let t = tile_and_project(&tape.constant(vol), &s, &w).unwrap();
        let row = (ty * 3 + tx) * 2 + c;
        let token = 2; // (z=0, y=1, x=0) on a 2x2 grid
        for j in 0..5 {
            assert_eq!(t.value().at(&[0, token, j]), w.value().at(&[row, j]));
        }
    }

    #[test]
    fn reference_field_of_view_gives_1024_tokens() {
        let s = spec([2, 16, 16], 8, 1);
        assert_eq!(s.grid([32, 128, 128]).unwrap().iter().product::<usize>(), 1024);
    }

    #[test]
    fn grid_roundtrip_and_index_law() {
        let tape = Tape::no_grad();
        let mut rng = Rng::new(3);
        let grid = [2, 3, 4];
        let tokens = tape.constant(Tensor::new(vec![2, 24, 5], rng.normal_vec(240, 1.0)).unwrap());
        let g = tokens_to_grid(&tokens, grid).unwrap();
        assert_eq!(grid_to_tokens(&g).unwrap().value(), tokens.value());
        for _ in 0..10 {
            let (z, y, x) = (rng.int_range(0, 1) as usize, rng.int_range(0, 2) as usize, rng.int_range(0, 3) as usize);
            let t = (z * 3 + y) * 4 + x;
            assert_eq!(g.value().at(&[1, 3, z, y, x]), tokens.value().at(&[1, t, 3]));
        }
        assert!(tokens_to_grid(&tokens, [1, 1, 1]).is_err());
    }

    #[test]
    fn embed_output_is_unit_norm_and_pz_free() {
        for p_z in [1, 2, 4] {
            let s = spec([p_z, 4, 4], 16, 2);
            let mut store = ParamStore::new(1, StoreMode::Eager);
            let pe = PatchEmbed::new(&mut store, &s, [8, 8, 8]).unwrap();
            let tape = Tape::no_grad();
            let bind = Binding::new(&tape, &store, false);
            let mut rng = Rng::new(4);
            let x = tape.constant(Tensor::new(vec![1, 2, 8, 8, 8], rng.normal_vec(1024, 1.0)).unwrap());
            let lat = pe.forward(&bind, &x).unwrap();
            assert_eq!(lat.tokens.shape(), &[1, (8 / p_z) * 4, 16]);
            assert_eq!(store.shape(pe.w_proj), &[32, 16]);
            for row in lat.tokens.value().data().chunks(16) {
                let n: f64 = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!((n - 1.0).abs() < 1e-12);
            }
        }
    }
}
