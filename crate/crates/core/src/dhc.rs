//! Backbone of dynamic hyper-connection blocks over `E` residual streams.
//!
//! Each block mixes the streams with `M = A_w + s_alpha * tanh(mean_t(H) W_w)`,
//! computes a proposal `normalize(NSA(mixed) + SoftMoE(mixed))` per stream and
//! moves every mixed stream toward its proposal with the per-channel gate
//! `alpha = s_beta * sigmoid(mean_{e,t}(H) W_beta)`, renormalising after the
//! step.

use serde::{Deserialize, Serialize};

use crate::autodiff::{AttnCounter, Var};
use crate::error::{Error, Result};
use crate::hypersphere::{slerp_gate, EPS};
use crate::nsa::{NsaConfig, NsaLayer};
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::rng::Rng;
use crate::softmoe::{MoeConfig, RoutingStats, SoftMoe};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Reduce {
    #[default]
    Mean,
    Sum,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DhcConfig {
    pub streams: usize,
    pub s_alpha: f64,
    pub s_beta: f64,
    pub dropout: f64,
    #[serde(default)]
    pub reduce: Reduce,
    /// Replaces the gated step with `normalize(mixed + proposal)`.
    #[serde(default)]
    pub prenorm_compat: bool,
}

impl DhcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.streams == 0 {
            return Err(Error::Config("streams must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must be in [0, 1), got {}", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.s_beta) || !(self.s_alpha >= 0.0) {
            return Err(Error::Config("s_alpha must be >= 0 and s_beta in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Per-call state: training flag, dropout stream and optional pair counter.
pub struct Pass<'c> {
    pub train: bool,
    pub rng: Rng,
    pub counter: Option<&'c AttnCounter>,
    /// Largest `| ||v|| - 1 |` seen over block outputs and reductions.
    pub norm_error: f64,
}

impl<'c> Pass<'c> {
    pub fn eval() -> Self {
        Self::new(false, 0)
    }

    pub fn new(train: bool, seed: u64) -> Self {
        Self {
            train,
            rng: Rng::new(seed),
            counter: None,
            norm_error: 0.0,
        }
    }

    pub fn observe(&mut self, x: &Tensor) {
        let d = *x.shape().last().unwrap_or(&1);
        for row in x.data().chunks(d) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            self.norm_error = self.norm_error.max((n - 1.0).abs());
        }
    }
}

#[derive(Clone, Debug)]
pub struct DhcBlock {
    pub nsa: NsaLayer,
    pub moe: SoftMoe,
    pub a_w: ParamId,
    pub w_w: ParamId,
    pub w_beta: ParamId,
}

pub struct BlockOutput<'t> {
    pub streams: Var<'t>,
    pub balance: Var<'t>,
    pub stats: RoutingStats,
}

impl DhcBlock {
    pub fn new(store: &mut ParamStore, nsa: &NsaConfig, moe: &MoeConfig, dhc: &DhcConfig, dim: usize) -> Result<Self> {
        let e = dhc.streams;
        Ok(Self {
            nsa: NsaLayer::new(store, nsa, dim)?,
            moe: SoftMoe::new(store, moe, dim)?,
            a_w: store.add("a_w", &[e, e], Init::Identity),
            w_w: store.add("w_w", &[e * dim, e * e], Init::Normal { std: 1.0 / ((e * dim) as f64).sqrt() }),
            w_beta: store.add("w_beta", &[dim, dim], Init::Normal { std: 1.0 / (dim as f64).sqrt() }),
        })
    }

    /// Stream mixer `(B, E, E)`.
    pub fn mixer<'t>(&self, bind: &Binding<'t, '_>, h: &Var<'t>, s_alpha: f64) -> Result<Var<'t>> {
        let (b, e, d) = (h.shape()[0], h.shape()[1], h.shape()[3]);
        let stat = h.mean_axis(2)?.reshape(&[b, e * d])?;
        let dynamic = stat.matmul(&bind.get(self.w_w))?.tanh().scale(s_alpha).reshape(&[b, e, e])?;
        bind.get(self.a_w).add(&dynamic)
    }

    /// Depth gate `(B, d)` with entries in `[0, s_beta]`.
    pub fn depth_gate<'t>(&self, bind: &Binding<'t, '_>, h: &Var<'t>, s_beta: f64) -> Result<Var<'t>> {
        let stat = h.mean_axis(2)?.mean_axis(1)?;
        Ok(stat.matmul(&bind.get(self.w_beta))?.sigmoid().scale(s_beta))
    }

    /// `(B, E, N, d)` mixed and renormalised streams.
    pub fn width_mix<'t>(&self, bind: &Binding<'t, '_>, h: &Var<'t>, s_alpha: f64) -> Result<Var<'t>> {
        let s = h.shape().to_vec();
        let m = self.mixer(bind, h, s_alpha)?;
        Ok(m.matmul(&h.reshape(&[s[0], s[1], s[2] * s[3]])?)?.reshape(&s)?.l2_normalize(EPS))
    }

    pub fn forward<'t>(
        &self,
        bind: &Binding<'t, '_>,
        h: &Var<'t>,
        cfg: &DhcConfig,
        pass: &mut Pass<'_>,
    ) -> Result<BlockOutput<'t>> {
        let s = h.shape().to_vec();
        let (b, e, n, d) = (s[0], s[1], s[2], s[3]);
        let mixed = self.width_mix(bind, h, cfg.s_alpha)?;
        let flat = mixed.reshape(&[b * e, n, d])?;
        let attn = self.nsa.forward(bind, &flat, pass.counter)?;
        let moe = self.moe.forward(bind, &flat)?;
        let mut proposal = attn.add(&moe.tokens)?;
        if pass.train && cfg.dropout > 0.0 {
            let keep = 1.0 - cfg.dropout;
            let mask: Vec<f64> = (0..b * e * n * d)
                .map(|_| if pass.rng.uniform() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            proposal = proposal.mul(&bind.tape().constant(Tensor::new(vec![b * e, n, d], mask)?))?;
        }
        let proposal = proposal.l2_normalize(EPS).reshape(&s)?;
        let streams = if cfg.prenorm_compat {
            mixed.add(&proposal)?.l2_normalize(EPS)
        } else {
            let alpha = self.depth_gate(bind, h, cfg.s_beta)?.reshape(&[b, 1, 1, d])?;
            slerp_gate(&mixed, &proposal, &alpha)?
        };
        Ok(BlockOutput {
            stats: self.moe.stats(&moe.routing),
            streams,
            balance: moe.balance,
        })
    }
}

/// `(B, E, N, d)` -> `(B, N, d)`: sum or mean over streams, then normalise.
pub fn reduce_streams<'t>(h: &Var<'t>, mode: Reduce) -> Result<Var<'t>> {
    let r = match mode {
        Reduce::Sum => h.sum_axis(1)?,
        Reduce::Mean => h.mean_axis(1)?,
    };
    Ok(r.l2_normalize(EPS))
}

/// Copies `(B, N, d)` tokens into every stream.
pub fn expand_streams<'t>(x: &Var<'t>, e: usize) -> Result<Var<'t>> {
    let s = x.shape();
    x.reshape(&[s[0], 1, s[1], s[2]])?.broadcast_to(&[s[0], e, s[1], s[2]])
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub cfg: DhcConfig,
    pub blocks: Vec<DhcBlock>,
    /// 1-based layer indices whose reduced output feeds the decoder.
    pub taps: Vec<usize>,
}

pub struct BackboneOutput<'t> {
    pub taps: Vec<Var<'t>>,
    pub features: Var<'t>,
    pub balance: Option<Var<'t>>,
    pub stats: Vec<RoutingStats>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        layers: usize,
        taps: &[usize],
        nsa: &NsaConfig,
        moe: &MoeConfig,
        dhc: &DhcConfig,
        dim: usize,
    ) -> Result<Self> {
        dhc.validate()?;
        if let Some(&t) = taps.iter().find(|&&t| t == 0 || t > layers) {
            return Err(Error::Config(format!("tap layer {t} outside 1..={layers}")));
        }
        let blocks = (0..layers)
            .map(|i| store.scoped(&format!("layer{i}"), |s| DhcBlock::new(s, nsa, moe, dhc, dim)))
            .collect::<Result<_>>()?;
        Ok(Self {
            cfg: dhc.clone(),
            blocks,
            taps: taps.to_vec(),
        })
    }

    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, tokens: &Var<'t>, pass: &mut Pass<'_>) -> Result<BackboneOutput<'t>> {
        let mut h = expand_streams(tokens, self.cfg.streams)?;
        let mut taps = Vec::new();
        let mut balance: Option<Var<'t>> = None;
        let mut stats = Vec::new();
        for (i, block) in self.blocks.iter().enumerate() {
            let out = block
                .forward(bind, &h, &self.cfg, pass)
                .map_err(|e| e.in_context(&format!("layer {}", i + 1)))?;
            pass.observe(out.streams.value());
            h = out.streams;
            balance = Some(match balance {
                None => out.balance,
                Some(acc) => acc.add(&out.balance)?,
            });
            stats.push(out.stats);
            if self.taps.contains(&(i + 1)) {
                let tap = reduce_streams(&h, self.cfg.reduce)?;
                pass.observe(tap.value());
                taps.push(tap);
            }
        }
        let features = reduce_streams(&h, self.cfg.reduce)?;
        pass.observe(features.value());
        Ok(BackboneOutput {
            taps,
            features,
            balance,
            stats,
        })
    }
}
