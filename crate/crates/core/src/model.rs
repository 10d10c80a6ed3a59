//! Full segmentation network: patch embedding, DHC backbone, decoder.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::decoder::{seg_loss, Decoder, DecoderConfig};
use crate::dhc::{Backbone, DhcConfig, Pass, Reduce};
use crate::error::{Error, Result};
use crate::nsa::{Boundary, CompressorConfig, CompressorKind, NsaConfig, NsaRouting};
use crate::params::{Binding, ParamStore, StoreMode};
use crate::patch_embed::{PatchEmbed, PatchSpec};
use crate::softmoe::{MoeConfig, RoutingStats};

/// A named routing preset or explicit values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RoutingChoice {
    Preset(String),
    Explicit(NsaRouting),
}

impl RoutingChoice {
    pub fn resolve(&self) -> Result<NsaRouting> {
        match self {
            RoutingChoice::Preset(name) => NsaRouting::preset(name),
            RoutingChoice::Explicit(r) => Ok(r.clone()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub routing: RoutingChoice,
    pub heads: usize,
    pub kv_heads: usize,
    pub compressor: CompressorConfig,
    #[serde(default)]
    pub boundary: Boundary,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Volume shape `(D, H, W)` after cropping.
    pub input_dhw: [usize; 3],
    pub patch: PatchSpec,
    pub layers: usize,
    /// 1-based backbone layers feeding the decoder; the last one is the deepest.
    pub taps: Vec<usize>,
    pub attention: AttentionConfig,
    pub moe: MoeConfig,
    pub dhc: DhcConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// 12 layers, width 512, 72 experts, input `(32, 128, 128)`.
    pub fn paper() -> Self {
        Self {
            input_dhw: [32, 128, 128],
            patch: PatchSpec { p_z: 2, p_y: 16, p_x: 16, hidden: 512, channels: 1 },
            layers: 12,
            taps: vec![3, 6, 9, 12],
            attention: AttentionConfig {
                routing: RoutingChoice::Preset("default".into()),
                heads: 8,
                kv_heads: 2,
                compressor: CompressorConfig { kind: CompressorKind::Transformer, width: 256, depth: 3 },
                boundary: Boundary::Shifted,
            },
            moe: MoeConfig { n_experts: 72, p_slots: 14, expansion: 8, lambda_lb: 0.01, expert_skip: false },
            dhc: DhcConfig { streams: 2, s_alpha: 0.01, s_beta: 0.01, dropout: 0.1, reduce: Reduce::Mean, prenorm_compat: false },
            decoder: DecoderConfig { base_features: 64 },
        }
    }

    /// 2 layers, width 64, 4 experts, input `(16, 64, 64)`.
    pub fn toy() -> Self {
        Self {
            input_dhw: [16, 64, 64],
            patch: PatchSpec { p_z: 2, p_y: 16, p_x: 16, hidden: 64, channels: 1 },
            layers: 2,
            taps: vec![1, 2],
            attention: AttentionConfig {
                routing: RoutingChoice::Preset("default".into()),
                heads: 4,
                kv_heads: 2,
                compressor: CompressorConfig { kind: CompressorKind::Transformer, width: 32, depth: 1 },
                boundary: Boundary::Shifted,
            },
            moe: MoeConfig { n_experts: 4, p_slots: 32, expansion: 8, lambda_lb: 0.01, expert_skip: false },
            dhc: DhcConfig { streams: 2, s_alpha: 0.01, s_beta: 0.01, dropout: 0.1, reduce: Reduce::Mean, prenorm_compat: false },
            decoder: DecoderConfig { base_features: 8 },
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "paper" => Ok(Self::paper()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!("unknown model preset {other:?} (expected \"paper\" or \"toy\")"))),
        }
    }

    pub fn nsa(&self) -> Result<NsaConfig> {
        let a = &self.attention;
        if a.heads == 0 || self.patch.hidden % a.heads != 0 {
            return Err(Error::Config(format!(
                "hidden width {} is not divisible by {} heads",
                self.patch.hidden, a.heads
            )));
        }
        let cfg = NsaConfig {
            routing: a.routing.resolve()?,
            heads: a.heads,
            kv_heads: a.kv_heads,
            d_head: self.patch.hidden / a.heads,
            compressor: a.compressor.clone(),
            boundary: a.boundary,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn grid(&self) -> Result<[usize; 3]> {
        self.patch.grid(self.input_dhw)
    }

    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.grid()?;
        self.nsa()?;
        self.moe.validate()?;
        self.dhc.validate()?;
        if self.taps.is_empty() && self.layers > 0 {
            return Err(Error::Config("at least one tap layer is required".into()));
        }
        if self.taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("tap layers must be strictly increasing".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub embed: PatchEmbed,
    pub backbone: Backbone,
    pub decoder: Decoder,
}

pub struct ModelOutput<'t> {
    /// `(B, 1, D, H, W)`.
    pub logits: Var<'t>,
    /// Summed load-balance term over layers.
    pub balance: Option<Var<'t>>,
    pub stats: Vec<RoutingStats>,
}

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64, mode: StoreMode) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, mode);
        let embed = PatchEmbed::new(&mut store, &cfg.patch, cfg.input_dhw)?;
        let backbone = store.scoped("backbone", |s| {
            Backbone::new(s, cfg.layers, &cfg.taps, &cfg.nsa()?, &cfg.moe, &cfg.dhc, cfg.patch.hidden)
        })?;
        let n_taps = cfg.taps.len().max(1);
        let decoder = Decoder::new(&mut store, &cfg.decoder, &cfg.patch, n_taps)?;
        Ok((
            Self {
                cfg: cfg.clone(),
                embed,
                backbone,
                decoder,
            },
            store,
        ))
    }

    /// `x: (B, C, D, H, W)` with `(D, H, W) == input_dhw`.
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>, pass: &mut Pass<'_>) -> Result<ModelOutput<'t>> {
        if x.shape().len() != 5 || x.shape()[2..] != self.cfg.input_dhw {
            return Err(Error::shape(
                "model",
                format!("expected (B, C, {:?}), got {:?}", self.cfg.input_dhw, x.shape()),
            ));
        }
        let lattice = self.embed.forward(bind, x)?;
        pass.observe(lattice.tokens.value());
        let out = self.backbone.forward(bind, &lattice.tokens, pass)?;
        let taps = if out.taps.is_empty() { vec![out.features] } else { out.taps };
        let logits = self.decoder.forward(bind, &taps, lattice.grid, x)?;
        Ok(ModelOutput {
            logits,
            balance: out.balance,
            stats: out.stats,
        })
    }

    /// Segmentation loss minus the load-balance term.
    pub fn loss<'t>(
        &self,
        bind: &Binding<'t, '_>,
        x: &Var<'t>,
        target: &Var<'t>,
        pass: &mut Pass<'_>,
    ) -> Result<(Var<'t>, ModelOutput<'t>)> {
        let out = self.forward(bind, x, pass)?;
        let mut loss = seg_loss(&out.logits, target)?;
        if let Some(b) = &out.balance {
            loss = loss.sub(b)?;
        }
        Ok((loss, out))
    }
}
