//! Soft mixture of experts with static slot keys.
//!
//! Tokens are averaged into `s = n_experts * p_slots` slots with weights that
//! are softmax-normalised over tokens (dispatch), each expert processes its
//! own `p_slots` rows, and slot outputs are averaged back per token with
//! weights softmax-normalised over slots (combine). Expert outputs and
//! combined tokens are projected to the unit sphere.

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::hypersphere::EPS;
use crate::params::{Binding, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeConfig {
    pub n_experts: usize,
    pub p_slots: usize,
    pub expansion: usize,
    pub lambda_lb: f64,
    /// Adds the slot to its expert output before normalising.
    #[serde(default)]
    pub expert_skip: bool,
}

impl MoeConfig {
    pub fn slots(&self) -> usize {
        self.n_experts * self.p_slots
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots() == 0 || self.expansion == 0 {
            return Err(Error::Config("softmoe needs n_experts, p_slots and expansion >= 1".into()));
        }
        if !(self.lambda_lb >= 0.0) {
            return Err(Error::Config(format!("lambda_lb must be >= 0, got {}", self.lambda_lb)));
        }
        Ok(())
    }

    /// Multiplies per token for `m` tokens of width `d`: `(routing, experts)`.
    ///
    /// Routing covers the logits, dispatch and combine products; experts
    /// cover both expert layers. A dense MLP of the same expansion costs
    /// `2 * expansion * d^2` per token, which the expert term equals when
    /// `s == m`.
    pub fn flops_per_token(&self, m: usize, d: usize) -> (f64, f64) {
        let s = self.slots() as f64;
        let d = d as f64;
        let routing = 3.0 * s * d;
        let experts = s * 2.0 * d * (self.expansion as f64 * d) / m as f64;
        (routing, experts)
    }
}

#[derive(Clone, Debug)]
pub struct Expert {
    pub w1: ParamId,
    pub w2: ParamId,
}

#[derive(Clone, Debug)]
pub struct SoftMoe {
    pub cfg: MoeConfig,
    pub dim: usize,
    pub phi: ParamId,
    pub experts: Vec<Expert>,
}

/// Dispatch and combine weights, `(B, m, s)` each.
pub struct Routing<'t> {
    pub dispatch: Var<'t>,
    pub combine: Var<'t>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingStats {
    /// Mean entropy of combine rows (nats).
    pub combine_row_entropy: f64,
    /// Mean entropy of dispatch columns (nats).
    pub dispatch_col_entropy: f64,
    /// Upper bound `ln(s)` for the combine entropy.
    pub max_entropy: f64,
    /// Share of combine mass received by each expert.
    pub expert_usage: Vec<f64>,
}

pub struct MoeOutput<'t> {
    pub tokens: Var<'t>,
    /// `lambda * (H_row(C) + H_col(D))`.
    pub balance: Var<'t>,
    pub routing: Routing<'t>,
}

impl SoftMoe {
    pub fn new(store: &mut ParamStore, cfg: &MoeConfig, dim: usize) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.expansion * dim;
        store.scoped("moe", |s| {
            let phi = s.add("phi", &[dim, cfg.slots()], Init::Normal { std: 1.0 });
            let experts = (0..cfg.n_experts)
                .map(|k| {
                    s.scoped(&format!("expert{k}"), |s| Expert {
                        w1: s.add("w1", &[dim, hidden], Init::Normal { std: 1.0 / (dim as f64).sqrt() }),
                        w2: s.add("w2", &[hidden, dim], Init::Normal { std: 1.0 / (hidden as f64).sqrt() }),
                    })
                })
                .collect();
            Ok(Self {
                cfg: cfg.clone(),
                dim,
                phi,
                experts,
            })
        })
    }

    pub fn route<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<Routing<'t>> {
        let logits = x.matmul(&bind.get(self.phi))?;
        Ok(Routing {
            dispatch: logits.softmax(1)?,
            combine: logits.softmax(2)?,
        })
    }

    /// `slots: (B, s, d)` -> `(B, s, d)`, expert `k` owning rows `k*p..(k+1)*p`.
    pub fn apply_experts<'t>(&self, bind: &Binding<'t, '_>, slots: &Var<'t>) -> Result<Var<'t>> {
        let p = self.cfg.p_slots;
        let mut outs = Vec::with_capacity(self.experts.len());
        for (k, e) in self.experts.iter().enumerate() {
            let rows = slots.narrow(1, k * p, p)?;
            let mut y = rows.matmul(&bind.get(e.w1))?.gelu().matmul(&bind.get(e.w2))?;
            if self.cfg.expert_skip {
                y = y.add(&rows)?;
            }
            outs.push(y.l2_normalize(EPS));
        }
        let refs: Vec<&Var<'t>> = outs.iter().collect();
        Var::concat(&refs, 1)
    }

    /// `x: (B, m, d)` unit tokens.
    pub fn forward<'t>(&self, bind: &Binding<'t, '_>, x: &Var<'t>) -> Result<MoeOutput<'t>> {
        let s = x.shape();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape("softmoe", format!("expected (B, m, {}), got {:?}", self.dim, s)));
        }
        let routing = self.route(bind, x)?;
        let slots = routing.dispatch.transpose()?.matmul(x)?;
        let y = self.apply_experts(bind, &slots)?;
        let tokens = routing.combine.matmul(&y)?.l2_normalize(EPS);
        let balance = load_balance(&routing.dispatch, &routing.combine, self.cfg.lambda_lb)?;
        Ok(MoeOutput {
            tokens,
            balance,
            routing,
        })
    }

    pub fn stats(&self, routing: &Routing<'_>) -> RoutingStats {
        routing_stats(routing.dispatch.value(), routing.combine.value(), self.cfg.n_experts)
    }
}

/// `lambda * (mean row entropy of C + mean column entropy of D)` for
/// `(B, m, s)` routing matrices, with `0 ln 0 = 0`.
pub fn load_balance<'t>(dispatch: &Var<'t>, combine: &Var<'t>, lambda: f64) -> Result<Var<'t>> {
    let sh = combine.shape();
    let (b, m, s) = (sh[0], sh[1], sh[2]);
    let h_row = combine.xlogx().sum().scale(-1.0 / (b * m) as f64);
    let h_col = dispatch.xlogx().sum().scale(-1.0 / (b * s) as f64);
    Ok(h_row.add(&h_col)?.scale(lambda))
}

fn entropy(p: impl Iterator<Item = f64>) -> f64 {
    -p.map(|v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>()
}

pub fn routing_stats(dispatch: &Tensor, combine: &Tensor, n_experts: usize) -> RoutingStats {
    let sh = combine.shape();
    let (b, m, s) = (sh[0], sh[1], sh[2]);
    let (c, d) = (combine.data(), dispatch.data());
    let row: f64 = c.chunks(s).map(|r| entropy(r.iter().copied())).sum::<f64>() / (b * m) as f64;
    let mut col = 0.0;
    for bi in 0..b {
        for j in 0..s {
            col += entropy((0..m).map(|i| d[(bi * m + i) * s + j]));
        }
    }
    let p = s / n_experts.max(1);
    let mut usage = vec![0.0; n_experts];
    for r in c.chunks(s) {
        for (j, v) in r.iter().enumerate() {
            usage[(j / p).min(n_experts - 1)] += v;
        }
    }
    let total: f64 = usage.iter().sum();
    usage.iter_mut().for_each(|u| *u /= total.max(f64::MIN_POSITIVE));
    RoutingStats {
        combine_row_entropy: row,
        dispatch_col_entropy: col / (b * s) as f64,
        max_entropy: (s as f64).ln(),
        expert_usage: usage,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::hypersphere::normalize;
    use crate::params::StoreMode;
    use crate::rng::Rng;

    fn cfg(n: usize, p: usize) -> MoeConfig {
        MoeConfig {
            n_experts: n,
            p_slots: p,
            expansion: 2,
            lambda_lb: 0.01,
            expert_skip: false,
        }
    }

    fn tokens(rng: &mut Rng, b: usize, m: usize, d: usize) -> Tensor {
        normalize(&Tensor::new(vec![b, m, d], rng.normal_vec(b * m * d, 1.0)).unwrap(), EPS)
    }

    #[test]
    fn single_token_fills_every_slot() {
        let mut store = ParamStore::new(1, StoreMode::Eager);
        let moe = SoftMoe::new(&mut store, &cfg(2, 3), 4).unwrap();
        let tape = Tape::no_grad();
        let bind = Binding::new(&tape, &store, false);
        let x = tape.constant(tokens(&mut Rng::new(1), 1, 1, 4));
        let r = moe.route(&bind, &x).unwrap();
        assert!(r.dispatch.value().data().iter().all(|&v| v == 1.0));
        let slots = r.dispatch.transpose().unwrap().matmul(&x).unwrap();
        for row in slots.value().data().chunks(4) {
            assert_eq!(row, x.value().data());
        }
    }

    #[test]
    fn dispatch_and_combine_match_direct_sums() {
        let mut store = ParamStore::new(2, StoreMode::Eager);
        let moe = SoftMoe::new(&mut store, &cfg(3, 1), 6).unwrap();
        let tape = Tape::no_grad();
        let bind = Binding::new(&tape, &store, false);
        let xt = tokens(&mut Rng::new(2), 1, 5, 6);
        let x = tape.constant(xt.clone());
        let r = moe.route(&bind, &x).unwrap();
        let slots = r.dispatch.transpose().unwrap().matmul(&x).unwrap();
        let d = r.dispatch.value();
        for j in 0..3 {
            for c in 0..6 {
                let direct: f64 = (0..5).map(|i| d.at(&[0, i, j]) * xt.at(&[0, i, c])).sum();
                assert!((slots.value().at(&[0, j, c]) - direct).abs() < 1e-12);
            }
        }
        let y = moe.apply_experts(&bind, &slots).unwrap();
        let mixed = r.combine.matmul(&y).unwrap();
        let cm = r.combine.value();
        for i in 0..5 {
            for c in 0..6 {
                let direct: f64 = (0..3).map(|j| cm.at(&[0, i, j]) * y.value().at(&[0, j, c])).sum();
                assert!((mixed.value().at(&[0, i, c]) - direct).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_experts_stay_finite() {
        let mut store = ParamStore::new(3, StoreMode::Eager);
        let moe = SoftMoe::new(&mut store, &cfg(2, 2), 4).unwrap();
        for e in &moe.experts {
            store.set(e.w2, Tensor::zeros(&[8, 4])).unwrap();
        }
        let tape = Tape::no_grad();
        let bind = Binding::new(&tape, &store, false);
        let out = moe.forward(&bind, &tape.constant(tokens(&mut Rng::new(3), 2, 7, 4))).unwrap();
        assert!(out.tokens.value().is_finite());
    }

    #[test]
    fn permuting_experts_permutes_slot_blocks() {
        let mut store = ParamStore::new(4, StoreMode::Eager);
        let moe = SoftMoe::new(&mut store, &cfg(3, 2), 4).unwrap();
        let tape = Tape::no_grad();
        let slots = tape.constant(tokens(&mut Rng::new(4), 1, 6, 4));
        let y = moe.apply_experts(&Binding::new(&tape, &store, false), &slots).unwrap().value().clone();
        let mut swapped = moe.clone();
        swapped.experts.swap(0, 2);
        let perm_slots = Tensor::concat(
            &[&slots.value().narrow(1, 4, 2).unwrap(), &slots.value().narrow(1, 2, 2).unwrap(), &slots.value().narrow(1, 0, 2).unwrap()],
            1,
        )
        .unwrap();
        let y2 = swapped
            .apply_experts(&Binding::new(&tape, &store, false), &tape.constant(perm_slots))
            .unwrap()
            .value()
            .clone();
        assert_eq!(y2.narrow(1, 0, 2).unwrap().data(), y.narrow(1, 4, 2).unwrap().data());
        assert_eq!(y2.narrow(1, 4, 2).unwrap().data(), y.narrow(1, 0, 2).unwrap().data());
    }

    #[test]
    fn entropy_examples() {
        let tape = Tape::no_grad();
        let uniform = tape.constant(Tensor::full(&[1, 4, 5], 0.2));
        let d = tape.constant(Tensor::full(&[1, 4, 5], 0.25));
        let st = routing_stats(d.value(), uniform.value(), 5);
        assert!((st.combine_row_entropy - 5f64.ln()).abs() < 1e-12);
        assert!((st.dispatch_col_entropy - 4f64.ln()).abs() < 1e-12);
        let lb = load_balance(&d, &uniform, 1.0).unwrap();
        assert!((lb.value().item() - (5f64.ln() + 4f64.ln())).abs() < 1e-12);
        let mut onehot = Tensor::zeros(&[1, 4, 5]);
        for i in 0..4 {
            onehot.data_mut()[i * 5 + i] = 1.0;
        }
        assert_eq!(routing_stats(&onehot, &onehot, 5).combine_row_entropy, 0.0);

        let mut rng = Rng::new(5);
        let raw: Vec<f64> = rng.uniform_vec(12, 0.0, 1.0);
        let c = crate::autodiff::softmax_tensor(&Tensor::new(vec![1, 4, 3], raw).unwrap(), 2);
        let direct: f64 = c.data().chunks(3).map(|r| -r.iter().map(|p| p * p.ln()).sum::<f64>()).sum::<f64>() / 4.0;
        assert!((routing_stats(&c, &c, 3).combine_row_entropy - direct).abs() < 1e-12);
    }

    #[test]
    fn flops_match_dense_mlp_when_slots_equal_tokens() {
        let c = cfg(4, 32);
        let (_, experts) = c.flops_per_token(128, 64);
        assert_eq!(experts, 2.0 * 2.0 * 64.0 * 64.0);
    }

    #[test]
    fn phi_receives_gradient() {
        let mut store = ParamStore::new(6, StoreMode::Eager);
        let moe = SoftMoe::new(&mut store, &cfg(2, 2), 4).unwrap();
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, true);
        let x = tape.constant(tokens(&mut Rng::new(6), 1, 5, 4));
        let w = tape.constant(Tensor::new(vec![1, 5, 4], Rng::new(7).normal_vec(20, 1.0)).unwrap());
        let out = moe.forward(&bind, &x).unwrap();
        let loss = out.tokens.mul(&w).unwrap().sum().add(&out.balance).unwrap();
        let g = tape.backward(&loss).unwrap();
        let grads = bind.gradients(&g);
        assert!(grads[moe.phi.0].norm() > 1e-8);
    }
}
