//! Native sparse attention over a flattened token lattice.
//!
//! Every query attends through three routes and mixes them with a per-token
//! sigmoid gate:
//!
//! * **cmp**: keys/values of each length-`B` window (stride `S`) are compressed
//!   to one key and one value by a learned compressor;
//! * **slc**: the `kappa` windows with the highest cmp attention mass (summed
//!   over the query heads of a key/value group) are expanded back to tokens,
//!   `L` tokens starting at each selected window start;
//! * **win**: a symmetric neighbourhood of radius `W`.
//!
//! Attention is non-causal. Query and key vectors are unit-normalised per
//! head and the logits are `s_h * cos(q, k)` with a learnable per-head scale
//! `s_h` (initialised to `sqrt(d_head)`).
//!
//! Spans that would cross the sequence end are shifted back inside it, so every
//! query scores the same number of keys: `n_cmp + min(kappa, n_cmp) * min(L, N)
//! + min(2W + 1, N)`. [`Boundary::Clipped`] instead truncates the window at the
//! sequence ends.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{indexed_attention, indexed_attention_probs, top_k_indices, AttnCounter, KeySets, Var};
use crate::error::{Error, Result};
use crate::hypersphere::EPS;
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NsaRouting {
    /// Compression block length `B`.
    pub block: usize,
    /// Compression stride `S`.
    pub stride: usize,
    /// Selection block length `L`.
    pub select_len: usize,
    /// Selected block count `kappa`.
    pub select_count: usize,
    /// Window radius `W` in tokens.
    pub window: usize,
}

impl NsaRouting {
    pub const DEFAULT: NsaRouting = NsaRouting {
        block: 32,
        stride: 32,
        select_len: 64,
        select_count: 4,
        window: 128,
    };

    pub const ALT: NsaRouting = NsaRouting {
        block: 32,
        stride: 32,
        select_len: 32,
        select_count: 8,
        window: 256,
    };

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(Self::DEFAULT),
            "nsa-alt" => Ok(Self::ALT),
            other => Err(Error::Config(format!(
                "unknown NSA preset {:?} (expected \"default\" or \"nsa-alt\")",
                other
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompressorKind {
    /// Small pre-norm transformer over the block, then mean pooling.
    Transformer,
    /// Mean pooling only (no parameters).
    MeanPool,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressorConfig {
    pub kind: CompressorKind,
    pub width: usize,
    pub depth: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Boundary {
    /// Fixed-size spans shifted inward at the sequence ends.
    #[default]
    Shifted,
    /// Window truncated at the sequence ends.
    Clipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NsaConfig {
    pub routing: NsaRouting,
    pub heads: usize,
    pub kv_heads: usize,
    pub d_head: usize,
    pub compressor: CompressorConfig,
    #[serde(default)]
    pub boundary: Boundary,
}

impl NsaConfig {
    pub fn validate(&self) -> Result<()> {
        let r = &self.routing;
        if self.kv_heads == 0 || self.heads == 0 || self.heads % self.kv_heads != 0 {
            return Err(Error::Config(format!(
                "kv_heads ({}) must divide heads ({})",
                self.kv_heads, self.heads
            )));
        }
        if r.block == 0 || r.stride == 0 || r.select_len == 0 || r.select_count == 0 || self.d_head == 0 {
            return Err(Error::Config("NSA block, stride, select_len, select_count and d_head must be >= 1".into()));
        }
        if self.compressor.kind == CompressorKind::Transformer
            && (self.compressor.width == 0 || self.compressor.width % self.kv_heads != 0)
        {
            return Err(Error::Config(format!(
                "compressor width {} must be a positive multiple of kv_heads {}",
                self.compressor.width, self.kv_heads
            )));
        }
        Ok(())
    }

    pub fn group_size(&self) -> usize {
        self.heads / self.kv_heads
    }

    /// Number of compression windows; the ragged tail window is kept.
    pub fn n_cmp(&self, n: usize) -> usize {
        let (b, s) = (self.routing.block, self.routing.stride);
        if n <= b {
            1
        } else {
            (n - b).div_ceil(s) + 1
        }
    }

    /// Start and length of compression window `i`.
    pub fn cmp_window(&self, i: usize, n: usize) -> (usize, usize) {
        let start = i * self.routing.stride;
        (start, self.routing.block.min(n - start))
    }

    pub fn selected_blocks(&self, n: usize) -> usize {
        self.routing.select_count.min(self.n_cmp(n))
    }

    pub fn select_span(&self, n: usize) -> usize {
        self.routing.select_len.min(n)
    }

    /// First token of the selection block anchored at compression window `j`.
    pub fn select_start(&self, j: usize, n: usize) -> usize {
        (j * self.routing.stride).min(n - self.select_span(n))
    }

    /// Key positions of the window around `t`.
    pub fn window_range(&self, t: usize, n: usize) -> std::ops::Range<usize> {
        window_range(t, self.routing.window, n, self.boundary)
    }

    /// `(query, key)` score evaluations per head for a sequence of length `n`.
    pub fn attended_pairs(&self, n: usize) -> u64 {
        let per_query = (self.n_cmp(n) + self.selected_blocks(n) * self.select_span(n)) as u64;
        let win: u64 = (0..n).map(|t| self.window_range(t, n).len() as u64).sum();
        n as u64 * per_query + win
    }
}

pub fn window_range(t: usize, w: usize, n: usize, boundary: Boundary) -> std::ops::Range<usize> {
    match boundary {
        Boundary::Clipped => t.saturating_sub(w)..(t + w + 1).min(n),
        Boundary::Shifted => {
            let span = (2 * w + 1).min(n);
            let start = t.saturating_sub(w).min(n - span);
            start..start + span
        }
    }
}

/// Compressed keys/values per group: `(G, n_cmp, d_head)` each.
pub struct CmpRoute<'t> {
    pub keys: Var<'t>,
    pub values: Var<'t>,
}

#[derive(Clone, Debug)]
struct CtBlock {
    norm1: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
    wo: ParamId,
    norm2: ParamId,
    w1: ParamId,
    w2: ParamId,
}

/// Transformer compressor: projects a block of joint key (or value) vectors
/// to `width`, adds a learned intra-block position table, applies pre-norm
/// blocks, mean-pools over the block and projects back.
#[derive(Clone, Debug)]
pub struct CompressionTransformer {
    width: usize,
    heads: usize,
    w_in: ParamId,
    pos: ParamId,
    blocks: Vec<CtBlock>,
    w_out: ParamId,
}

impl CompressionTransformer {
    fn new(store: &mut ParamStore, cfg: &NsaConfig) -> Self {
        let w = cfg.kv_heads * cfg.d_head;
        let c = &cfg.compressor;
        let std_in = 1.0 / (w as f64).sqrt();
        let std_c = 1.0 / (c.width as f64).sqrt();
        let w_in = store.add("in", &[w, c.width], Init::Normal { std: std_in });
        let pos = store.add("pos", &[cfg.routing.block, c.width], Init::Normal { std: 0.02 });
        let blocks = (0..c.depth)
            .map(|i| {
                store.scoped(&format!("block{i}"), |s| CtBlock {
                    norm1: s.add("norm1", &[c.width], Init::Const(1.0)),
                    wq: s.add("wq", &[c.width, c.width], Init::Normal { std: std_c }),
                    wk: s.add("wk", &[c.width, c.width], Init::Normal { std: std_c }),
                    wv: s.add("wv", &[c.width, c.width], Init::Normal { std: std_c }),
                    wo: s.add("wo", &[c.width, c.width], Init::Normal { std: std_c / (2.0 * c.depth as f64).sqrt() }),
                    norm2: s.add("norm2", &[c.width], Init::Const(1.0)),
                    w1: s.add("w1", &[c.width, 2 * c.width], Init::Normal { std: std_c }),
                    w2: s.add(
                        "w2",
                        &[2 * c.width, c.width],
                        Init::Normal { std: 1.0 / ((2 * c.width) as f64).sqrt() / (2.0 * c.depth as f64).sqrt() },
                    ),
                })
            })
            .collect();
        let w_out = store.add("out", &[c.width, w], Init::Normal { std: std_c });
        Self {
            width: c.width,
            heads: cfg.kv_heads,
            w_in,
            pos,
            blocks,
            w_out,
        }
    }

    fn rms_norm<'t>(x: &Var<'t>, gain: &Var<'t>, width: usize) -> Result<Var<'t>> {
        x.l2_normalize(EPS).scale((width as f64).sqrt()).mul(gain)
    }

    /// `x: (M, len, w)` -> `(M, w)`.
    fn forward<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let (m, len) = (x.shape()[0], x.shape()[1]);
        let (wd, nh) = (self.width, self.heads);
        let hd = wd / nh;
        let pos = bind.get(self.pos).narrow(0, 0, len)?;
        let mut h = x.matmul(&bind.get(self.w_in))?.add(&pos)?;
        for blk in &self.blocks {
            let a = Self::rms_norm(&h, &bind.get(blk.norm1), wd)?;
            let split = |w: ParamId| -> Result<Var<'t>> {
                a.matmul(&bind.get(w))?
                    .reshape(&[m, len, nh, hd])?
                    .permute(&[0, 2, 1, 3])?
                    .reshape(&[m * nh, len, hd])
            };
            let (q, k, v) = (split(blk.wq)?, split(blk.wk)?, split(blk.wv)?);
            let att = indexed_attention(&q, &k, &v, &KeySets::All, 1.0 / (hd as f64).sqrt(), None)?
                .reshape(&[m, nh, len, hd])?
                .permute(&[0, 2, 1, 3])?
                .reshape(&[m, len, wd])?;
            h = h.add(&att.matmul(&bind.get(blk.wo))?)?;
            let f = Self::rms_norm(&h, &bind.get(blk.norm2), wd)?
                .matmul(&bind.get(blk.w1))?
                .gelu()
                .matmul(&bind.get(blk.w2))?;
            h = h.add(&f)?;
        }
        h.mean_axis(1)?.matmul(&bind.get(self.w_out))
    }
}

#[derive(Clone, Debug)]
pub enum Compressor {
    MeanPool,
    Transformer(CompressionTransformer),
}

impl Compressor {
    fn forward<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        match self {
            Compressor::MeanPool => x.mean_axis(1),
            Compressor::Transformer(t) => t.forward(bind, x),
        }
    }
}

#[derive(Clone, Debug)]
pub struct NsaLayer {
    pub cfg: NsaConfig,
    pub dim: usize,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    /// Per-head logit scale.
    pub qk_scale: ParamId,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    pub cmp_k: Compressor,
    pub cmp_v: Compressor,
    /// Replaces the learned gate with fixed route weights (cmp, slc, win).
    pub gate_override: Option<[f64; 3]>,
}

impl NsaLayer {
    pub fn new(store: &mut ParamStore, cfg: &NsaConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        let (h, kv, dh) = (cfg.heads, cfg.kv_heads, cfg.d_head);
        let std_in = 1.0 / (dim as f64).sqrt();
        store.scoped("nsa", |s| {
            let w_q = s.add("wq", &[dim, h * dh], Init::Normal { std: std_in });
            let w_k = s.add("wk", &[dim, kv * dh], Init::Normal { std: std_in });
            let w_v = s.add("wv", &[dim, kv * dh], Init::Normal { std: std_in });
            let w_o = s.add("wo", &[h * dh, dim], Init::Normal { std: 1.0 / ((h * dh) as f64).sqrt() });
            let qk_scale = s.add("qk_scale", &[h], Init::Const((dh as f64).sqrt()));
            let w_gate = s.add("gate_w", &[dim, 3], Init::Zeros);
            let b_gate = s.add("gate_b", &[3], Init::Zeros);
            let mut compressor = |name: &str| match cfg.compressor.kind {
                CompressorKind::MeanPool => Compressor::MeanPool,
                CompressorKind::Transformer => {
                    s.scoped(name, |s| Compressor::Transformer(CompressionTransformer::new(s, cfg)))
                }
            };
            let cmp_k = compressor("cmp_k");
            let cmp_v = compressor("cmp_v");
            Ok(Self {
                cfg: cfg.clone(),
                dim,
                w_q,
                w_k,
                w_v,
                w_o,
                qk_scale,
                w_gate,
                b_gate,
                cmp_k,
                cmp_v,
                gate_override: None,
            })
        })
    }

    /// Route gates `(Bt, N, 3)`.
    pub fn gates<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Var<'t>> {
        let (bt, n) = (x.shape()[0], x.shape()[1]);
        if let Some(g) = self.gate_override {
            let data = (0..bt * n).flat_map(|_| g).collect();
            return Ok(bind.tape().constant(Tensor::new(vec![bt, n, 3], data)?));
        }
        Ok(x.matmul(&bind.get(self.w_gate))?.add(&bind.get(self.b_gate))?.sigmoid())
    }

    /// Per-head unit queries scaled by `s_h`, as `(Bt*kv, group*N, d_head)`,
    /// and unit keys/values as `(Bt, N, kv*d_head)`.
    pub fn project<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let (bt, n) = (x.shape()[0], x.shape()[1]);
        let (h, kv, dh) = (self.cfg.heads, self.cfg.kv_heads, self.cfg.d_head);
        let hg = h / kv;
        let q = x
            .matmul(&bind.get(self.w_q))?
            .reshape(&[bt, n, h, dh])?
            .l2_normalize(EPS)
            .mul(&bind.get(self.qk_scale).reshape(&[1, 1, h, 1])?)?
            .reshape(&[bt, n, kv, hg, dh])?
            .permute(&[0, 2, 3, 1, 4])?
            .reshape(&[bt * kv, hg * n, dh])?;
        let unit = |w: ParamId| -> Result<Var<'t>> {
            x.matmul(&bind.get(w))?.reshape(&[bt, n, kv, dh])?.l2_normalize(EPS).reshape(&[bt, n, kv * dh])
        };
        Ok((q, unit(self.w_k)?, unit(self.w_v)?))
    }

    /// `(Bt, N, kv*d_head)` -> `(Bt*kv, N, d_head)`.
    fn per_group<'t>(&self, x: &Var<'t>) -> Result<Var<'t>> {
        let (bt, n) = (x.shape()[0], x.shape()[1]);
        let (kv, dh) = (self.cfg.kv_heads, self.cfg.d_head);
        x.reshape(&[bt, n, kv, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[bt * kv, n, dh])
    }

    /// Compressed keys and values for every window.
    pub fn compress<'t>(&self, bind: &Binding<'t, '_>, k: &Var<'t>, v: &Var<'t>) -> Result<CmpRoute<'t>> {
        let (bt, n, w) = (k.shape()[0], k.shape()[1], k.shape()[2]);
        let (kv, dh) = (self.cfg.kv_heads, self.cfg.d_head);
        let n_cmp = self.cfg.n_cmp(n);
        let full = (0..n_cmp).filter(|&i| self.cfg.cmp_window(i, n).1 == self.cfg.routing.block.min(n)).count();
        let run = |phi: &Compressor, x: &Var<'t>| -> Result<Var<'t>> {
            let flat = x.reshape(&[bt * n, w])?;
            let mut parts = Vec::new();
            for range in [0..full, full..n_cmp] {
                if range.is_empty() {
                    continue;
                }
                let len = self.cfg.cmp_window(range.start, n).1;
                let mut idx = Vec::with_capacity(bt * range.len() * len);
                for b in 0..bt {
                    for i in range.clone() {
                        let start = self.cfg.cmp_window(i, n).0;
                        idx.extend((start..start + len).map(|t| b * n + t));
                    }
                }
                let blocks = flat.gather_rows(Rc::new(idx))?.reshape(&[bt * range.len(), len, w])?;
                parts.push(phi.forward(bind, &blocks)?.reshape(&[bt, range.len(), w])?);
            }
            let refs: Vec<&Var<'t>> = parts.iter().collect();
            Var::concat(&refs, 1)?
                .reshape(&[bt, n_cmp, kv, dh])?
                .l2_normalize(EPS)
                .permute(&[0, 2, 1, 3])?
                .reshape(&[bt * kv, n_cmp, dh])
        };
        Ok(CmpRoute {
            keys: run(&self.cmp_k, k)?,
            values: run(&self.cmp_v, v)?,
        })
    }

    /// Top-`kappa` windows per (group, token) from cmp probabilities
    /// `(G, group*N, n_cmp)` summed over the group's query heads.
    pub fn select_blocks(&self, probs: &[f64], groups: usize, n: usize) -> Vec<Vec<usize>> {
        let n_cmp = self.cfg.n_cmp(n);
        let hg = self.cfg.group_size();
        let kappa = self.cfg.selected_blocks(n);
        let mut out = Vec::with_capacity(groups * n);
        let mut scores = vec![0.0; n_cmp];
        for g in 0..groups {
            for t in 0..n {
                scores.fill(0.0);
                for hh in 0..hg {
                    let row = (g * hg * n) + hh * n + t;
                    for (s, p) in scores.iter_mut().zip(&probs[row * n_cmp..(row + 1) * n_cmp]) {
                        *s += p;
                    }
                }
                out.push(top_k_indices(&scores, kappa));
            }
        }
        out
    }

    fn window_keys(&self, n: usize) -> KeySets {
        match self.cfg.boundary {
            Boundary::Shifted => {
                let span = (2 * self.cfg.routing.window + 1).min(n);
                let idx = (0..n).flat_map(|t| self.cfg.window_range(t, n).map(|j| j as u32)).collect();
                KeySets::Rows {
                    width: span,
                    per_group: false,
                    idx: Rc::new(idx),
                }
            }
            Boundary::Clipped => {
                let mut offsets = vec![0];
                let mut idx = Vec::new();
                for t in 0..n {
                    idx.extend(self.cfg.window_range(t, n).map(|j| j as u32));
                    offsets.push(idx.len());
                }
                KeySets::Ragged {
                    offsets: Rc::new(offsets),
                    idx: Rc::new(idx),
                }
            }
        }
    }

    /// `(G, group*N, d_head)` -> `(Bt, N, heads*d_head)`.
    fn merge_heads<'t>(&self, o: &Var<'t>, bt: usize, n: usize) -> Result<Var<'t>> {
        let (h, kv, dh) = (self.cfg.heads, self.cfg.kv_heads, self.cfg.d_head);
        o.reshape(&[bt, kv, h / kv, n, dh])?
            .permute(&[0, 3, 1, 2, 4])?
            .reshape(&[bt, n, h * dh])
    }

    /// `x: (Bt, N, dim)` unit-norm tokens -> `(Bt, N, dim)` unit-norm outputs.
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>, counter: Option<&AttnCounter>) -> Result<Var<'t>> {
        let s = x.shape().to_vec();
        if s.len() != 3 || s[2] != self.dim || s[1] == 0 {
            return Err(Error::shape(
                "nsa",
                format!("expected (B, N>=1, {}), got {:?}", self.dim, s),
            ));
        }
        let (bt, n) = (s[0], s[1]);
        let kv = self.cfg.kv_heads;
        let groups = bt * kv;
        let (q, k_tok, v_tok) = self.project(bind, x)?;
        let (k, v) = (self.per_group(&k_tok)?, self.per_group(&v_tok)?);

        let cmp = self.compress(bind, &k_tok, &v_tok)?;
        let (o_cmp, probs) = indexed_attention_probs(&q, &cmp.keys, &cmp.values, &KeySets::All, 1.0, counter)
            .map_err(|e| e.in_context("nsa route cmp"))?;

        let span = self.cfg.select_span(n);
        let chosen = self.select_blocks(&probs, groups, n);
        let idx: Vec<u32> = chosen
            .iter()
            .flat_map(|blocks| {
                blocks.iter().flat_map(move |&j| {
                    let start = self.cfg.select_start(j, n);
                    (start..start + span).map(|t| t as u32)
                })
            })
            .collect();
        let slc_keys = KeySets::Rows {
            width: self.cfg.selected_blocks(n) * span,
            per_group: true,
            idx: Rc::new(idx),
        };
        let o_slc = indexed_attention(&q, &k, &v, &slc_keys, 1.0, counter).map_err(|e| e.in_context("nsa route slc"))?;
        let o_win = indexed_attention(&q, &k, &v, &self.window_keys(n), 1.0, counter)
            .map_err(|e| e.in_context("nsa route win"))?;

        let gates = self.gates(bind, x)?;
        let mut mixed: Option<Var<'t>> = None;
        for (i, o) in [o_cmp, o_slc, o_win].iter().enumerate() {
            let term = self.merge_heads(o, bt, n)?.mul(&gates.narrow(2, i, 1)?)?;
            mixed = Some(match mixed {
                None => term,
                Some(acc) => acc.add(&term)?,
            });
        }
        let out = mixed.expect("three routes").matmul(&bind.get(self.w_o))?.l2_normalize(EPS);
        if !out.value().is_finite() {
            return Err(Error::numeric("nsa output", "non-finite value"));
        }
        Ok(out)
    }
}
