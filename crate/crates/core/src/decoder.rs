//! Pyramid decoder from token features back to a full-resolution logit volume,
//! plus the segmentation loss.
//!
//! The deepest tap is upsampled stage by stage. In-plane axes double at each
//! of the first `log2(p)` stages and the axial factor `p_z` is applied at the
//! last stage. Shallower taps are projected straight to the resolution of the
//! stage they join (kernel = stride transposed convolution), and the last
//! stage also sees the input volume.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::patch_embed::PatchSpec;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub base_features: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Stage {
    /// Upsampling factor `(z, y, x)` applied by this stage.
    pub factor: [usize; 3],
    /// Output channels.
    pub channels: usize,
}

/// Per-stage factors and widths for a patch shape and hidden width.
pub fn plan(spec: &PatchSpec, hidden: usize, base: usize) -> Result<Vec<Stage>> {
    let log = |p: usize, axis: &str| -> Result<usize> {
        if !p.is_power_of_two() {
            return Err(Error::Config(format!("decoder needs a power-of-two patch along {axis}, got {p}")));
        }
        Ok(p.trailing_zeros() as usize)
    };
    let (ly, lx) = (log(spec.p_y, "y")?, log(spec.p_x, "x")?);
    let n = ly.max(lx).max(1);
    Ok((0..n)
        .map(|j| Stage {
            factor: [
                if j + 1 == n { spec.p_z } else { 1 },
                if j < ly { 2 } else { 1 },
                if j < lx { 2 } else { 1 },
            ],
            channels: base.max(hidden >> (j + 1)).max(1),
        })
        .collect())
}

#[derive(Clone, Debug)]
struct StageParams {
    up_w: ParamId,
    up_b: ParamId,
    skip: Option<(ParamId, ParamId)>,
    conv1_w: ParamId,
    conv1_b: ParamId,
    conv2_w: ParamId,
    conv2_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub stages: Vec<Stage>,
    params: Vec<StageParams>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    hidden: usize,
    channels_in: usize,
}

fn he(fan_in: usize) -> Init {
    Init::Normal { std: (2.0 / fan_in as f64).sqrt() }
}

/// `(B, D, H, W, C*fz*fy*fx)` -> `(B, C, D*fz, H*fy, W*fx)`.
fn pixel_shuffle<'t>(x: &Var<'t>, c: usize, f: [usize; 3]) -> Result<Var<'t>> {
    let s = x.shape().to_vec();
    let (b, d, h, w) = (s[0], s[1], s[2], s[3]);
    x.reshape(&[b, d, h, w, c, f[0], f[1], f[2]])?
        .permute(&[0, 4, 1, 5, 2, 6, 3, 7])?
        .reshape(&[b, c, d * f[0], h * f[1], w * f[2]])
}

/// Kernel = stride transposed convolution on a channels-last grid.
fn up<'t>(x_last: &Var<'t>, w: &Var<'t>, b: &Var<'t>, c: usize, f: [usize; 3]) -> Result<Var<'t>> {
    let k = f[0] * f[1] * f[2];
    let bias = b.reshape(&[c, 1])?.broadcast_to(&[c, k])?.reshape(&[c * k])?;
    pixel_shuffle(&x_last.matmul(w)?.add(&bias)?, c, f)
}

impl Decoder {
    /// `n_taps` counts every tap including the deepest one.
    pub fn new(store: &mut ParamStore, cfg: &DecoderConfig, spec: &PatchSpec, n_taps: usize) -> Result<Self> {
        if n_taps == 0 {
            return Err(Error::Config("decoder needs at least one tap".into()));
        }
        let stages = plan(spec, spec.hidden, cfg.base_features)?;
        let h = spec.hidden;
        let cin_img = spec.channels;
        let mut cum = [1usize; 3];
        let mut prev = h;
        let mut params = Vec::new();
        store.scoped("decoder", |s| {
            for (j, st) in stages.iter().enumerate() {
                let k: usize = st.factor.iter().product();
                for a in 0..3 {
                    cum[a] *= st.factor[a];
                }
                let has_skip = j + 1 < n_taps;
                let last = j + 1 == stages.len();
                let p = s.scoped(&format!("stage{j}"), |s| {
                    let up_w = s.add("up_w", &[prev, st.channels * k], he(prev));
                    let up_b = s.add("up_b", &[st.channels], Init::Zeros);
                    let skip = has_skip.then(|| {
                        let kk: usize = cum.iter().product();
                        (
                            s.add("skip_w", &[h, st.channels * kk], he(h)),
                            s.add("skip_b", &[st.channels], Init::Zeros),
                        )
                    });
                    let cin = st.channels * (1 + has_skip as usize) + if last { cin_img } else { 0 };
                    StageParams {
                        up_w,
                        up_b,
                        skip,
                        conv1_w: s.add("conv1_w", &[st.channels, cin, 3, 3, 3], he(cin * 27)),
                        conv1_b: s.add("conv1_b", &[st.channels], Init::Zeros),
                        conv2_w: s.add("conv2_w", &[st.channels, st.channels, 3, 3, 3], he(st.channels * 27)),
                        conv2_b: s.add("conv2_b", &[st.channels], Init::Zeros),
                    }
                });
                params.push(p);
                prev = st.channels;
            }
            let c = stages.last().map_or(h, |st| st.channels);
            Ok(Self {
                head_w: s.add("head_w", &[1, c, 1, 1, 1], Init::Zeros),
                head_b: s.add("head_b", &[1], Init::Zeros),
                stages,
                params,
                hidden: h,
                channels_in: cin_img,
            })
        })
    }

    /// `taps`: `(B, N, h)` ordered shallow to deep; `image`: `(B, C, D, H, W)`.
    pub fn forward<'t>(
        &self,
        bind: &Binding<'t, '_>,
        taps: &[Var<'t>],
        grid: [usize; 3],
        image: &Var<'t>,
    ) -> Result<Var<'t>> {
        let deep = taps.last().ok_or_else(|| Error::shape("decoder", "no taps"))?;
        let b = deep.shape()[0];
        for t in taps {
            if t.shape() != [b, grid.iter().product(), self.hidden] {
                return Err(Error::shape("decoder", format!("tap {:?} does not match grid {:?}", t.shape(), grid)));
            }
        }
        let tokens_last = |t: &Var<'t>| t.reshape(&[b, grid[0], grid[1], grid[2], self.hidden]);
        let mut x = tokens_last(deep)?;
        let mut dims = grid;
        let mut cum = [1usize; 3];
        for (j, (st, p)) in self.stages.iter().zip(&self.params).enumerate() {
            for a in 0..3 {
                dims[a] *= st.factor[a];
                cum[a] *= st.factor[a];
            }
            let mut y = up(&x, &bind.get(p.up_w), &bind.get(p.up_b), st.channels, st.factor)?;
            let mut parts = vec![y.clone()];
            if let Some((sw, sb)) = p.skip {
                let src = &taps[taps.len() - 2 - j];
                parts.push(up(&tokens_last(src)?, &bind.get(sw), &bind.get(sb), st.channels, cum)?);
            }
            if j + 1 == self.stages.len() {
                if image.shape()[1] != self.channels_in || image.shape()[2..] != dims {
                    return Err(Error::shape(
                        "decoder",
                        format!("stage {j}: image {:?} does not match output grid {:?}", image.shape(), dims),
                    ));
                }
                parts.push(image.clone());
            }
            if parts.len() > 1 {
                let refs: Vec<&Var<'t>> = parts.iter().collect();
                y = Var::concat(&refs, 1)?;
            }
            y = y.conv3d(&bind.get(p.conv1_w), Some(&bind.get(p.conv1_b)))?.gelu();
            y = y.conv3d(&bind.get(p.conv2_w), Some(&bind.get(p.conv2_b)))?.gelu();
            let want = [b, st.channels, dims[0], dims[1], dims[2]];
            if y.shape() != want {
                return Err(Error::shape("decoder", format!("stage {j}: got {:?}, expected {:?}", y.shape(), want)));
            }
            x = if j + 1 < self.stages.len() { y.permute(&[0, 2, 3, 4, 1])? } else { y };
        }
        x.conv3d(&bind.get(self.head_w), Some(&bind.get(self.head_b)))
    }
}

/// Smoothing constant of the soft Dice term.
pub const DICE_EPS: f64 = 1e-6;

/// `0.5 * (1 - softDice) + 0.5 * BCE`, Dice per batch item then averaged.
pub fn seg_loss<'t>(logits: &Var<'t>, target: &Var<'t>) -> Result<Var<'t>> {
    if logits.shape() != target.shape() {
        return Err(Error::shape(
            "seg_loss",
            format!("logits {:?} vs target {:?}", logits.shape(), target.shape()),
        ));
    }
    let b = logits.shape()[0];
    let per = logits.value().len() / b.max(1);
    let p = logits.sigmoid().reshape(&[b, per])?;
    let t = target.reshape(&[b, per])?;
    let inter = p.mul(&t)?.sum_axis(1)?.scale(2.0).add_scalar(DICE_EPS);
    let denom = p.sum_axis(1)?.add(&t.sum_axis(1)?)?.add_scalar(DICE_EPS);
    let dice = inter.div(&denom)?.mean();
    let bce = logits.softplus().sub(&logits.mul(target)?)?.mean();
    Ok(dice.neg().add_scalar(1.0).add(&bce)?.scale(0.5))
}
