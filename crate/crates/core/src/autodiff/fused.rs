//! Fused primitives whose unfused form would be too slow or too large:
//! 3D convolution, strided axial depthwise filtering, and attention over
//! per-query key subsets.

use std::cell::Cell;
use std::rc::Rc;

use super::ops::softmax_slice;
use super::Var;
use crate::error::{Error, Result};
use crate::kernels::{self, Conv3dGeom};
use crate::tensor::Tensor;

/// Which keys each query row attends to.
///
/// Index tables hold `P` rows (or `G * P` with `per_group`); query row `r`
/// reads table row `r % P`, so query heads stacked along the row axis share
/// one table.
#[derive(Clone, Debug)]
pub enum KeySets {
    /// Every key.
    All,
    /// Exactly `width` key indices per table row.
    Rows {
        width: usize,
        per_group: bool,
        idx: Rc<Vec<u32>>,
    },
    /// Row `p` uses `idx[offsets[p]..offsets[p + 1]]`; shared by all groups.
    Ragged {
        offsets: Rc<Vec<usize>>,
        idx: Rc<Vec<u32>>,
    },
}

/// Instrumentation for attention calls: score evaluations and the largest
/// probability buffer materialised by a single call.
#[derive(Debug, Default)]
pub struct AttnCounter {
    pairs: Cell<u64>,
    peak_bytes: Cell<u64>,
}

impl AttnCounter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pairs(&self) -> u64 {
        self.pairs.get()
    }

    pub fn peak_transient_bytes(&self) -> u64 {
        self.peak_bytes.get()
    }

    pub fn reset(&self) {
        self.pairs.set(0);
        self.peak_bytes.set(0);
    }

    fn record(&self, pairs: u64, bytes: u64) {
        self.pairs.set(self.pairs.get() + pairs);
        self.peak_bytes.set(self.peak_bytes.get().max(bytes));
    }
}

fn dims5(op: &'static str, shape: &[usize]) -> Result<[usize; 5]> {
    shape
        .try_into()
        .map_err(|_| Error::shape(op, format!("expected 5 axes (B,C,D,H,W), got {:?}", shape)))
}

impl<'t> Var<'t> {
    /// Stride-1 convolution with zero "same" padding. Input `(B,Cin,D,H,W)`,
    /// weight `(Cout,Cin,kz,ky,kx)` with odd kernel sides, optional bias `(Cout)`.
    pub fn conv3d(&self, weight: &Var<'t>, bias: Option<&Var<'t>>) -> Result<Var<'t>> {
        let [b, cin, d, h, w] = dims5("conv3d", self.shape())?;
        let [cout, cin2, kz, ky, kx] = dims5("conv3d", weight.shape())?;
        if cin != cin2 {
            return Err(Error::shape(
                "conv3d",
                format!("input has {} channels, weight expects {}", cin, cin2),
            ));
        }
        if kz % 2 == 0 || ky % 2 == 0 || kx % 2 == 0 {
            return Err(Error::shape("conv3d", "kernel sides must be odd"));
        }
        if let Some(bv) = bias {
            if bv.shape() != [cout] {
                return Err(Error::shape("conv3d", format!("bias shape {:?}", bv.shape())));
            }
        }
        let g = Conv3dGeom { cin, cout, d, h, w, kz, ky, kx };
        let vox = d * h * w;
        let mut out = vec![0.0; b * cout * vox];
        let bias_data = bias.map(|bv| bv.value().data().to_vec());
        for bi in 0..b {
            kernels::conv3d_forward(
                &g,
                &self.value.data()[bi * cin * vox..(bi + 1) * cin * vox],
                weight.value().data(),
                bias_data.as_deref(),
                &mut out[bi * cout * vox..(bi + 1) * cout * vox],
            );
        }
        let y = Tensor::new(vec![b, cout, d, h, w], out)?;
        let x = self.value_rc();
        let wt = weight.value_rc();
        let mut inputs = vec![self, weight];
        if let Some(bv) = bias {
            inputs.push(bv);
        }
        Ok(self.tape.record(&inputs, y, move |gout, needs| {
            let god = gout.data();
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; x.len()];
                for bi in 0..b {
                    kernels::conv3d_backward_input(
                        &g,
                        &god[bi * cout * vox..(bi + 1) * cout * vox],
                        wt.data(),
                        &mut gx[bi * cin * vox..(bi + 1) * cin * vox],
                    );
                }
                Tensor::new(x.shape().to_vec(), gx).expect("shape")
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; wt.len()];
                for bi in 0..b {
                    kernels::conv3d_backward_weight(
                        &g,
                        &god[bi * cout * vox..(bi + 1) * cout * vox],
                        &x.data()[bi * cin * vox..(bi + 1) * cin * vox],
                        &mut gw,
                    );
                }
                Tensor::new(wt.shape().to_vec(), gw).expect("shape")
            });
            let mut grads = vec![gx, gw];
            if needs.len() == 3 {
                grads.push(needs[2].then(|| {
                    let mut gb = vec![0.0; cout];
                    for bi in 0..b {
                        for (co, acc) in gb.iter_mut().enumerate() {
                            let o = (bi * cout + co) * vox;
                            *acc += god[o..o + vox].iter().sum::<f64>();
                        }
                    }
                    Tensor::new(vec![cout], gb).expect("shape")
                }));
            }
            grads
        }))
    }

    /// Per-channel filter along depth with kernel `(p,1,1)` and stride `p`.
    /// Input `(B,C,D,H,W)` with `D % p == 0`, weight `(C,p)`; output `(B,C,D/p,H,W)`.
    pub fn axial_depthwise(&self, weight: &Var<'t>) -> Result<Var<'t>> {
        let [b, c, d, h, w] = dims5("axial_depthwise", self.shape())?;
        let ws = weight.shape();
        if ws.len() != 2 || ws[0] != c || ws[1] == 0 {
            return Err(Error::shape(
                "axial_depthwise",
                format!("weight {:?} does not match {} channels", ws, c),
            ));
        }
        let p = ws[1];
        if d % p != 0 {
            return Err(Error::shape(
                "axial_depthwise",
                format!("depth axis D={} is not divisible by p_z={}", d, p),
            ));
        }
        let dp = d / p;
        let plane = h * w;
        let xd = self.value.data();
        let wd = weight.value().data();
        let mut out = vec![0.0; b * c * dp * plane];
        for bc in 0..b * c {
            let ch = bc % c;
            for z in 0..dp {
                let dst = &mut out[(bc * dp + z) * plane..(bc * dp + z + 1) * plane];
                for k in 0..p {
                    let src = &xd[(bc * d + z * p + k) * plane..(bc * d + z * p + k + 1) * plane];
                    kernels::axpy(wd[ch * p + k], src, dst);
                }
            }
        }
        let y = Tensor::new(vec![b, c, dp, h, w], out)?;
        let x = self.value_rc();
        let wt = weight.value_rc();
        Ok(self.tape.record(&[self, weight], y, move |g, needs| {
            let gd = g.data();
            let gx = needs[0].then(|| {
                let mut gx = vec![0.0; x.len()];
                for bc in 0..b * c {
                    let ch = bc % c;
                    for z in 0..dp {
                        let src = &gd[(bc * dp + z) * plane..(bc * dp + z + 1) * plane];
                        for k in 0..p {
                            let o = (bc * d + z * p + k) * plane;
                            kernels::axpy(wt.data()[ch * p + k], src, &mut gx[o..o + plane]);
                        }
                    }
                }
                Tensor::new(x.shape().to_vec(), gx).expect("shape")
            });
            let gw = needs[1].then(|| {
                let mut gw = vec![0.0; c * p];
                for bc in 0..b * c {
                    let ch = bc % c;
                    for z in 0..dp {
                        let gs = &gd[(bc * dp + z) * plane..(bc * dp + z + 1) * plane];
                        for k in 0..p {
                            let o = (bc * d + z * p + k) * plane;
                            gw[ch * p + k] += kernels::dot(gs, &x.data()[o..o + plane]);
                        }
                    }
                }
                Tensor::new(vec![c, p], gw).expect("shape")
            });
            vec![gx, gw]
        }))
    }
}

/// Resolved key layout of one attention call.
struct Layout {
    keys: KeySets,
    nq: usize,
    nk: usize,
    period: usize,
    /// Probability entries per group.
    per_group_len: usize,
}

impl Layout {
    fn new(keys: &KeySets, g_n: usize, nq: usize, nk: usize) -> Result<Self> {
        let bad = |d: String| Error::shape("attention", d);
        let (period, per_group_len) = match keys {
            KeySets::All => (1, nq * nk),
            KeySets::Rows { width, per_group, idx } => {
                let groups = if *per_group { g_n } else { 1 };
                if *width == 0 || idx.is_empty() || idx.len() % (width * groups) != 0 {
                    return Err(bad("key table size is not a multiple of width".into()));
                }
                (idx.len() / (width * groups), nq * width)
            }
            KeySets::Ragged { offsets, idx } => {
                if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().expect("nonempty") != idx.len() {
                    return Err(bad("ragged offsets must start at 0 and end at the table length".into()));
                }
                if offsets.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(bad("every ragged row needs at least one key".into()));
                }
                let p = offsets.len() - 1;
                (p, if nq % p == 0 { nq / p * idx.len() } else { 0 })
            }
        };
        if nq % period != 0 {
            return Err(bad(format!("{} query rows not a multiple of key-table period {}", nq, period)));
        }
        let idx = match keys {
            KeySets::All => None,
            KeySets::Rows { idx, .. } | KeySets::Ragged { idx, .. } => Some(idx),
        };
        if let Some(&bad_idx) = idx.and_then(|i| i.iter().find(|&&j| j as usize >= nk)) {
            return Err(bad(format!("key index {} >= {}", bad_idx, nk)));
        }
        if nk == 0 {
            return Err(bad("empty key set".into()));
        }
        Ok(Self {
            keys: keys.clone(),
            nq,
            nk,
            period,
            per_group_len,
        })
    }

    /// `(key indices or None for all keys, key count, offset into probabilities)`.
    fn row(&self, g: usize, r: usize) -> (Option<&[u32]>, usize, usize) {
        let base = g * self.per_group_len;
        match &self.keys {
            KeySets::All => (None, self.nk, base + r * self.nk),
            KeySets::Rows { width, per_group, idx } => {
                let t = if *per_group { g * self.period } else { 0 } + r % self.period;
                (Some(&idx[t * width..(t + 1) * width]), *width, base + r * width)
            }
            KeySets::Ragged { offsets, idx } => {
                let p = r % self.period;
                let (a, b) = (offsets[p], offsets[p + 1]);
                let off = base + (r / self.period) * idx.len() + a;
                (Some(&idx[a..b]), b - a, off)
            }
        }
    }

    fn total(&self, g_n: usize) -> usize {
        g_n * self.per_group_len
    }
}

/// Softmax attention where each query row sees its own key subset.
///
/// `q: (G, Nq, dk)`, `k: (G, Nk, dk)`, `v: (G, Nk, dv)`. Row `r` of group `g`
/// computes `softmax(scale * q[g,r] . k[g,j])` over the keys `j` chosen by
/// `keys` and returns the weighted sum of the matching `v` rows. Repeated key
/// indices are allowed and each occurrence is scored.
pub fn indexed_attention<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    keys: &KeySets,
    scale: f64,
    counter: Option<&AttnCounter>,
) -> Result<Var<'t>> {
    indexed_attention_probs(q, k, v, keys, scale, counter).map(|(out, _)| out)
}

/// [`indexed_attention`] that also returns the attention probabilities,
/// laid out row by row in the order keys were given.
pub fn indexed_attention_probs<'t>(
    q: &Var<'t>,
    k: &Var<'t>,
    v: &Var<'t>,
    keys: &KeySets,
    scale: f64,
    counter: Option<&AttnCounter>,
) -> Result<(Var<'t>, Rc<Vec<f64>>)> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 {
        return Err(Error::shape("attention", "q, k, v must be (G, N, d)"));
    }
    let (g_n, nq, dk) = (qs[0], qs[1], qs[2]);
    let nk = ks[1];
    let dv = vs[2];
    if ks[0] != g_n || vs[0] != g_n || ks[2] != dk || vs[1] != nk {
        return Err(Error::shape(
            "attention",
            format!("incompatible q {:?}, k {:?}, v {:?}", qs, ks, vs),
        ));
    }
    let layout = Layout::new(keys, g_n, nq, nk)?;

    let qd = q.value().data();
    let kd = k.value().data();
    let vd = v.value().data();
    let mut probs = vec![0.0; layout.total(g_n)];
    let mut out = vec![0.0; g_n * nq * dv];
    let mut scores = Vec::new();
    for g in 0..g_n {
        let kg = &kd[g * nk * dk..(g + 1) * nk * dk];
        let vg = &vd[g * nk * dv..(g + 1) * nk * dv];
        for r in 0..nq {
            let row = g * nq + r;
            let qr = &qd[row * dk..(row + 1) * dk];
            let (sel, width, off) = layout.row(g, r);
            scores.clear();
            scores.extend((0..width).map(|j| {
                let kj = sel.map_or(j, |s| s[j] as usize);
                scale * kernels::dot(qr, &kg[kj * dk..(kj + 1) * dk])
            }));
            let p = &mut probs[off..off + width];
            softmax_slice(&scores, p);
            let o = &mut out[row * dv..(row + 1) * dv];
            for (j, &pj) in p.iter().enumerate() {
                let kj = sel.map_or(j, |s| s[j] as usize);
                kernels::axpy(pj, &vg[kj * dv..(kj + 1) * dv], o);
            }
        }
    }
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("attention", "non-finite output"));
    }
    if let Some(c) = counter {
        c.record(probs.len() as u64, (probs.len() * std::mem::size_of::<f64>()) as u64);
    }
    let probs = Rc::new(probs);
    let y = Tensor::new(vec![g_n, nq, dv], out)?;
    let (qv, kv, vv) = (q.value_rc(), k.value_rc(), v.value_rc());
    let saved = Rc::clone(&probs);
    let out = q.tape().record(&[q, k, v], y, move |gout, needs| {
        let (qd, kd, vd, god) = (qv.data(), kv.data(), vv.data(), gout.data());
        let mut gq = vec![0.0; if needs[0] { qd.len() } else { 0 }];
        let mut gk = vec![0.0; if needs[1] { kd.len() } else { 0 }];
        let mut gv = vec![0.0; if needs[2] { vd.len() } else { 0 }];
        let mut ds = Vec::new();
        for g in 0..g_n {
            for r in 0..layout.nq {
                let row = g * layout.nq + r;
                let (sel, width, off) = layout.row(g, r);
                let p = &saved[off..off + width];
                let go = &god[row * dv..(row + 1) * dv];
                ds.clear();
                let mut pdp = 0.0;
                for (j, &pj) in p.iter().enumerate() {
                    let kj = g * nk + sel.map_or(j, |s| s[j] as usize);
                    let dp = kernels::dot(go, &vd[kj * dv..(kj + 1) * dv]);
                    ds.push(dp);
                    pdp += pj * dp;
                    if needs[2] {
                        kernels::axpy(pj, go, &mut gv[kj * dv..(kj + 1) * dv]);
                    }
                }
                for (dsj, &pj) in ds.iter_mut().zip(p) {
                    *dsj = scale * pj * (*dsj - pdp);
                }
                let qr = &qd[row * dk..(row + 1) * dk];
                for (j, &dsj) in ds.iter().enumerate() {
                    let kj = g * nk + sel.map_or(j, |s| s[j] as usize);
                    if needs[0] {
                        kernels::axpy(dsj, &kd[kj * dk..(kj + 1) * dk], &mut gq[row * dk..(row + 1) * dk]);
                    }
                    if needs[1] {
                        kernels::axpy(dsj, qr, &mut gk[kj * dk..(kj + 1) * dk]);
                    }
                }
            }
        }
        vec![
            needs[0].then(|| Tensor::new(qv.shape().to_vec(), gq).expect("shape")),
            needs[1].then(|| Tensor::new(kv.shape().to_vec(), gk).expect("shape")),
            needs[2].then(|| Tensor::new(vv.shape().to_vec(), gv).expect("shape")),
        ]
    });
    Ok((out, probs))
}
