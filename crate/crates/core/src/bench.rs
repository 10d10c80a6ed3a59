//! Attention cost measurements: sparse routing against dense attention.

use std::time::Instant;

use serde::Serialize;

use crate::autodiff::{indexed_attention, AttnCounter, KeySets, Tape, Var};
use crate::error::Result;
use crate::hypersphere::{normalize, EPS};
use crate::nsa::{NsaConfig, NsaLayer};
use crate::params::{Binding, ParamStore, StoreMode};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Nsa,
    Dense,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchRow {
    pub n: usize,
    pub mode: Mode,
    pub pairs_formula: u64,
    pub pairs_instrumented: u64,
    pub dense_pairs: u64,
    /// `pairs_instrumented / dense_pairs`.
    pub ratio: f64,
    pub peak_transient_bytes: u64,
    pub wall_ms: f64,
}

pub const CSV_HEADER: &str = "n,mode,pairs_formula,pairs_instrumented,dense_pairs,ratio,peak_transient_bytes,wall_ms";

impl BenchRow {
    pub fn csv(&self) -> String {
        let mode = match self.mode {
            Mode::Nsa => "nsa",
            Mode::Dense => "dense",
        };
        format!(
            "{},{},{},{},{},{:.6},{},{:.3}",
            self.n,
            mode,
            self.pairs_formula,
            self.pairs_instrumented,
            self.dense_pairs,
            self.ratio,
            self.peak_transient_bytes,
            self.wall_ms
        )
    }
}

pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&r.csv());
        s.push('\n');
    }
    s
}

/// One NSA row and one dense row per sequence length, single batch item,
/// forward only.
pub fn bench_attention(cfg: &NsaConfig, dim: usize, ns: &[usize], seed: u64) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut store = ParamStore::new(seed, StoreMode::Eager);
    let layer = NsaLayer::new(&mut store, cfg, dim)?;
    let mut rng = Rng::new(seed ^ 0xbe4c);
    let (h, kv, dh) = (cfg.heads, cfg.kv_heads, cfg.d_head);
    let mut rows = Vec::new();
    for &n in ns {
        let x = normalize(&Tensor::new(vec![1, n, dim], rng.normal_vec(n * dim, 1.0))?, EPS);
        let dense_pairs = (h * n * n) as u64;

        let tape = Tape::no_grad();
        let bind = Binding::new(&tape, &store, false);
        let counter = AttnCounter::new();
        let t0 = Instant::now();
        layer.forward(&bind, &tape.constant(x.clone()), Some(&counter))?;
        let wall = t0.elapsed().as_secs_f64() * 1e3;
        let formula = h as u64 * cfg.attended_pairs(n);
        rows.push(BenchRow {
            n,
            mode: Mode::Nsa,
            pairs_formula: formula,
            pairs_instrumented: counter.pairs(),
            dense_pairs,
            ratio: counter.pairs() as f64 / dense_pairs as f64,
            peak_transient_bytes: counter.peak_transient_bytes(),
            wall_ms: wall,
        });

        let counter = AttnCounter::new();
        let t0 = Instant::now();
        let (q, k, v) = layer.project(&bind, &tape.constant(x))?;
        let (k, v) = (per_group(&k, kv, dh)?, per_group(&v, kv, dh)?);
        indexed_attention(&q, &k, &v, &KeySets::All, 1.0, Some(&counter))?;
        let wall = t0.elapsed().as_secs_f64() * 1e3;
        rows.push(BenchRow {
            n,
            mode: Mode::Dense,
            pairs_formula: dense_pairs,
            pairs_instrumented: counter.pairs(),
            dense_pairs,
            ratio: counter.pairs() as f64 / dense_pairs as f64,
            peak_transient_bytes: counter.peak_transient_bytes(),
            wall_ms: wall,
        });
    }
    Ok(rows)
}

fn per_group<'t>(t: &Var<'t>, kv: usize, dh: usize) -> Result<Var<'t>> {
    let n = t.shape()[1];
    t.reshape(&[1, n, kv, dh])?.permute(&[0, 2, 1, 3])?.reshape(&[kv, n, dh])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nsa::{Boundary, CompressorConfig, CompressorKind, NsaRouting};

    #[test]
    fn counts_match_formula_and_dense_is_quadratic() {
        let cfg = NsaConfig {
            routing: NsaRouting::DEFAULT,
            heads: 2,
            kv_heads: 1,
            d_head: 4,
            compressor: CompressorConfig { kind: CompressorKind::MeanPool, width: 4, depth: 1 },
            boundary: Boundary::Shifted,
        };
        let rows = bench_attention(&cfg, 8, &[256, 512], 0).unwrap();
        for r in &rows {
            assert_eq!(r.pairs_formula, r.pairs_instrumented, "{r:?}");
        }
        assert_eq!(rows[3].dense_pairs, 4 * rows[1].dense_pairs);
        assert!(rows[2].pairs_instrumented < 4 * rows[0].pairs_instrumented);
        let csv = to_csv(&rows);
        assert_eq!(csv.lines().count(), 5);
        assert!(csv.lines().nth(1).unwrap().starts_with("256,nsa,"));
    }
}
