//! Finite-difference checks of the tape gradients at three scopes: every
//! primitive op, one backbone block and the full toy model loss.

use std::rc::Rc;

use serde::Serialize;

use crate::autodiff::{indexed_attention, KeySets, Tape, Var};
use crate::dhc::{DhcBlock, DhcConfig, Pass, Reduce};
use crate::error::{Error, Result};
use crate::hypersphere::{normalize, slerp_gate, EPS};
use crate::model::{Model, ModelConfig};
use crate::nsa::{Boundary, CompressorConfig, CompressorKind, NsaConfig, NsaRouting};
use crate::oracle::{check_gradients, FdConfig, GradReport};
use crate::params::{Binding, ParamId, ParamStore, StoreMode};
use crate::rng::Rng;
use crate::softmoe::MoeConfig;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub coords_checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl CheckResult {
    fn new(name: &str, r: GradReport) -> Self {
        Self {
            name: name.into(),
            coords_checked: r.coords_checked,
            max_abs_err: r.max_abs_err,
            max_rel_err: r.max_rel_err,
            passed: r.passed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scope {
    Primitive,
    Block,
    Model,
}

impl std::str::FromStr for Scope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitive" => Ok(Scope::Primitive),
            "block" => Ok(Scope::Block),
            "model" => Ok(Scope::Model),
            other => Err(Error::Config(format!("unknown gradcheck scope {other:?} (primitive, block or model)"))),
        }
    }
}

pub fn run(scope: Scope, seed: u64) -> Result<Vec<CheckResult>> {
    match scope {
        Scope::Primitive => primitives(seed),
        Scope::Block => Ok(vec![block(seed)?]),
        Scope::Model => Ok(vec![model(seed)?]),
    }
}

fn randn(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), rng.normal_vec(shape.iter().product(), 1.0)).expect("shape")
}

fn positive(rng: &mut Rng, shape: &[usize]) -> Tensor {
    Tensor::new(shape.to_vec(), rng.uniform_vec(shape.iter().product(), 0.5, 2.0)).expect("shape")
}

fn unit(rng: &mut Rng, shape: &[usize]) -> Tensor {
    normalize(&randn(rng, shape), EPS)
}

struct Runner {
    cfg: FdConfig,
    seed: u64,
    out: Vec<CheckResult>,
}

impl Runner {
    fn check<F>(&mut self, name: &str, inputs: Vec<Tensor>, f: F) -> Result<()>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
    {
        let r = check_gradients(&inputs, &f, &self.cfg, self.seed)?;
        self.out.push(CheckResult::new(name, r));
        Ok(())
    }
}

/// One check per differentiable op with random inputs drawn from `seed`.
pub fn primitives(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = Rng::new(seed);
    let r = &mut rng;
    let mut k = Runner { cfg: FdConfig::default(), seed, out: Vec::new() };
    k.check("add", vec![randn(r, &[3, 4]), randn(r, &[4])], |_, v| v[0].add(&v[1]))?;
    k.check("sub", vec![randn(r, &[3, 1]), randn(r, &[3, 4])], |_, v| v[0].sub(&v[1]))?;
    k.check("mul", vec![randn(r, &[2, 3, 4]), randn(r, &[3, 1])], |_, v| v[0].mul(&v[1]))?;
    k.check("div", vec![randn(r, &[3, 4]), positive(r, &[3, 4])], |_, v| v[0].div(&v[1]))?;
    k.check("matmul", vec![randn(r, &[2, 3, 5]), randn(r, &[5, 4])], |_, v| v[0].matmul(&v[1]))?;
    k.check("batched_matmul", vec![randn(r, &[2, 3, 5]), randn(r, &[2, 5, 2])], |_, v| v[0].matmul(&v[1]))?;
    k.check("neg_scale_shift", vec![randn(r, &[5])], |_, v| Ok(v[0].neg().scale(1.5).add_scalar(0.3)))?;
    k.check("exp", vec![randn(r, &[6])], |_, v| Ok(v[0].exp()))?;
    k.check("ln", vec![positive(r, &[6])], |_, v| Ok(v[0].ln()))?;
    k.check("sqrt", vec![positive(r, &[6])], |_, v| Ok(v[0].sqrt()))?;
    k.check("square", vec![randn(r, &[6])], |_, v| Ok(v[0].square()))?;
    k.check("sigmoid", vec![randn(r, &[6])], |_, v| Ok(v[0].sigmoid()))?;
    k.check("tanh", vec![randn(r, &[6])], |_, v| Ok(v[0].tanh()))?;
    k.check("gelu", vec![randn(r, &[6])], |_, v| Ok(v[0].gelu()))?;
    k.check("softplus", vec![randn(r, &[6])], |_, v| Ok(v[0].softplus()))?;
    k.check("xlogx", vec![positive(r, &[6])], |_, v| Ok(v[0].xlogx()))?;
    k.check("sum_mean", vec![randn(r, &[3, 4])], |_, v| v[0].sum().add(&v[0].mean()))?;
    k.check("sum_axis", vec![randn(r, &[3, 4, 2])], |_, v| v[0].sum_axis(1))?;
    k.check("mean_axis", vec![randn(r, &[3, 4, 2])], |_, v| v[0].mean_axis(2))?;
    k.check("max_axis", vec![randn(r, &[3, 5])], |_, v| v[0].max_axis(1))?;
    k.check("reshape_permute", vec![randn(r, &[2, 3, 4])], |_, v| {
        v[0].reshape(&[6, 4])?.transpose()?.reshape(&[2, 2, 6])?.permute(&[2, 0, 1])
    })?;
    k.check("narrow_concat", vec![randn(r, &[3, 5]), randn(r, &[3, 2])], |_, v| {
        Var::concat(&[&v[0].narrow(1, 1, 3)?, &v[1]], 1)
    })?;
    k.check("broadcast_to", vec![randn(r, &[3, 1])], |_, v| v[0].broadcast_to(&[2, 3, 4]))?;
    let gi = Rc::new(vec![2usize, 0, 2, 1]);
    k.check("gather_rows", vec![randn(r, &[3, 4])], move |_, v| v[0].gather_rows(gi.clone()))?;
    let si = Rc::new(vec![1usize, 1, 0, 3]);
    k.check("scatter_add_rows", vec![randn(r, &[4, 3])], move |_, v| v[0].scatter_add_rows(si.clone(), 5))?;
    k.check("softmax", vec![randn(r, &[3, 5])], |_, v| v[0].softmax(1))?;
    k.check("softmax_axis0", vec![randn(r, &[3, 5])], |_, v| v[0].softmax(0))?;
    k.check("l2_normalize", vec![randn(r, &[4, 6])], |_, v| Ok(v[0].l2_normalize(EPS)))?;
    k.check("topk_mask", vec![randn(r, &[3, 6])], |_, v| Ok(v[0].topk_mask(2).square()))?;
    k.check("conv3d", vec![randn(r, &[1, 2, 3, 4, 5]), randn(r, &[3, 2, 3, 3, 3]), randn(r, &[3])], |_, v| {
        v[0].conv3d(&v[1], Some(&v[2]))
    })?;
    k.check("axial_depthwise", vec![randn(r, &[1, 2, 4, 3, 3]), randn(r, &[2, 2])], |_, v| {
        v[0].axial_depthwise(&v[1])
    })?;
    k.check("attention_all", vec![randn(r, &[2, 5, 3]), randn(r, &[2, 4, 3]), randn(r, &[2, 4, 3])], |_, v| {
        indexed_attention(&v[0], &v[1], &v[2], &KeySets::All, 0.7, None)
    })?;
    let rows = KeySets::Rows { width: 2, per_group: true, idx: Rc::new(vec![0u32, 1, 3, 3, 2, 0, 1, 2, 0, 0, 3, 1]) };
    k.check("attention_rows", vec![randn(r, &[2, 3, 3]), randn(r, &[2, 4, 3]), randn(r, &[2, 4, 3])], move |_, v| {
        indexed_attention(&v[0], &v[1], &v[2], &rows, 1.0, None)
    })?;
    let ragged = KeySets::Ragged { offsets: Rc::new(vec![0, 1, 4, 6]), idx: Rc::new(vec![2u32, 0, 1, 3, 3, 1]) };
    k.check("attention_ragged", vec![randn(r, &[1, 3, 3]), randn(r, &[1, 4, 3]), randn(r, &[1, 4, 3])], move |_, v| {
        indexed_attention(&v[0], &v[1], &v[2], &ragged, 1.0, None)
    })?;
    k.check("slerp_gate", vec![unit(r, &[3, 4]), unit(r, &[3, 4]), Tensor::new(vec![4], r.uniform_vec(4, 0.1, 0.9))?], |_, v| {
        slerp_gate(&v[0], &v[1], &v[2])
    })?;
    Ok(k.out)
}

/// Configurations of the single-block check: `N = 16`, `d = 8`, `E = 2`.
pub fn block_configs() -> (NsaConfig, MoeConfig, DhcConfig) {
    (
        NsaConfig {
            routing: NsaRouting { block: 4, stride: 4, select_len: 4, select_count: 2, window: 2 },
            heads: 2,
            kv_heads: 1,
            d_head: 4,
            compressor: CompressorConfig { kind: CompressorKind::Transformer, width: 4, depth: 1 },
            boundary: Boundary::Shifted,
        },
        MoeConfig { n_experts: 2, p_slots: 4, expansion: 2, lambda_lb: 0.01, expert_skip: false },
        DhcConfig { streams: 2, s_alpha: 0.1, s_beta: 0.5, dropout: 0.0, reduce: Reduce::Mean, prenorm_compat: false },
    )
}

fn params_as_inputs(store: &ParamStore) -> (Vec<ParamId>, Vec<Tensor>) {
    let ids: Vec<ParamId> = store.ids().collect();
    let values = ids.iter().map(|&id| (*store.value(id)).clone()).collect();
    (ids, values)
}

/// One full block, gradients w.r.t. the input streams and every parameter.
pub fn block(seed: u64) -> Result<CheckResult> {
    let (nsa, moe, dhc) = block_configs();
    let mut store = ParamStore::new(seed, StoreMode::Eager);
    let blk = DhcBlock::new(&mut store, &nsa, &moe, &dhc, 8)?;
    // open the route gate so every route carries gradient
    let mut rng = Rng::new(seed ^ 0xb10c);
    store.set(blk.nsa.w_gate, randn(&mut rng, &[8, 3]).scale(0.5))?;
    let (ids, params) = params_as_inputs(&store);
    let mut inputs = vec![unit(&mut rng, &[1, 2, 16, 8])];
    inputs.extend(params);
    let r = check_gradients(
        &inputs,
        &|tape, v| {
            let bind = Binding::with_overrides(tape, &store, ids.iter().copied().zip(v[1..].iter().cloned()));
            let out = blk.forward(&bind, &v[0], &dhc, &mut Pass::eval())?;
            out.streams.add(&out.balance)
        },
        &FdConfig::default(),
        seed,
    )?;
    Ok(CheckResult::new("dhc_block", r))
}

/// Toy model loss against a random mask, 256 sampled parameter coordinates,
/// relative tolerance `1e-3`. The zero-initialised head is randomised first
/// so gradients reach the whole network. Most parameter gradients of the
/// voxel-mean loss are below `1e-6`, hence the larger step and lower floor.
pub fn model(seed: u64) -> Result<CheckResult> {
    model_with(seed, &FdConfig { step: 1e-4, rel_tol: 1e-3, abs_floor: 1e-10, max_coords: 256 })
}

pub fn model_with(seed: u64, fd: &FdConfig) -> Result<CheckResult> {
    let cfg = ModelConfig::toy();
    let (m, mut store) = Model::new(&cfg, seed, StoreMode::Eager)?;
    let mut rng = Rng::new(seed ^ 0x30de1);
    let head = store.shape(m.decoder.head_w).to_vec();
    store.set(m.decoder.head_w, randn(&mut rng, &head).scale(0.1))?;
    let [d, h, w] = cfg.input_dhw;
    let x = randn(&mut rng, &[1, 1, d, h, w]);
    let y = Tensor::new(vec![1, 1, d, h, w], (0..d * h * w).map(|_| (rng.uniform() < 0.2) as u8 as f64).collect())?;
    let (ids, params) = params_as_inputs(&store);
    let r = check_gradients(
        &params,
        &|tape, v| {
            let bind = Binding::with_overrides(tape, &store, ids.iter().copied().zip(v.iter().cloned()));
            let (loss, _) = m.loss(&bind, &tape.constant(x.clone()), &tape.constant(y.clone()), &mut Pass::eval())?;
            Ok(loss)
        },
        fd,
        seed,
    )?;
    Ok(CheckResult::new("toy_model_loss", r))
}
