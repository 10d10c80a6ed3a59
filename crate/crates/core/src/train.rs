//! Training loop, inference and evaluation.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::config::{RunConfig, VolumeFile, VolumeKind};
use crate::dhc::Pass;
use crate::error::{Error, Result};
use crate::metrics::{evaluate as mask_metrics, mean_report, BinaryMask, MetricReport, DEFAULT_SPACING};
use crate::model::Model;
use crate::params::{Binding, ParamStore, StoreMode};
use crate::rng::{derive_seed, Rng};
use crate::synthgen::{dataset, Dataset, Sample};
use crate::tensor::Tensor;

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros = || store.ids().map(|id| vec![0.0; store.shape(id).iter().product()]).collect();
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        self.t += 1;
        let (c1, c2) = (1.0 - self.beta1.powi(self.t), 1.0 - self.beta2.powi(self.t));
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.value_mut(id)?;
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for (((w, &g), mi), vi) in p.data_mut().iter_mut().zip(grads[k].data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// Zero mean, unit variance per volume.
pub fn standardise(v: &Tensor) -> Tensor {
    let n = v.len() as f64;
    let mean = v.sum() / n;
    let var = v.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    v.map(|x| (x - mean) / sd)
}

fn mask_tensor(m: &BinaryMask) -> Tensor {
    let [d, h, w] = m.shape;
    Tensor::new(vec![1, d, h, w], m.voxels.iter().map(|&b| b as u8 as f64).collect()).expect("mask shape")
}

fn stack(parts: &[Tensor]) -> Result<Tensor> {
    let shape = parts[0].shape().to_vec();
    let data: Vec<f64> = parts.iter().flat_map(|p| p.data().iter().copied()).collect();
    Tensor::new([vec![parts.len()], shape].concat(), data)
}

pub fn sample_stem(dir: &Path, split: &str, i: usize, kind: &str) -> PathBuf {
    dir.join(split).join(format!("{kind}_{i:04}"))
}

/// Writes every sample as image and mask volume files under `dir/{train,val}`.
pub fn write_dataset(dir: &Path, data: &Dataset) -> Result<()> {
    for (split, samples) in [("train", &data.train), ("val", &data.val)] {
        let d = dir.join(split);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        for (i, s) in samples.iter().enumerate() {
            VolumeFile::write(&sample_stem(dir, split, i, "image"), &s.volume, VolumeKind::Image, None)?;
            VolumeFile::write(&sample_stem(dir, split, i, "mask"), &mask_tensor(&s.mask), VolumeKind::Mask, None)?;
        }
    }
    Ok(())
}

pub fn read_split(dir: &Path, split: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for i in 0.. {
        let stem = sample_stem(dir, split, i, "image");
        if !VolumeFile::paths(&stem).1.exists() {
            break;
        }
        let (volume, _) = VolumeFile::read(&stem)?;
        let (m, meta) = VolumeFile::read(&sample_stem(dir, split, i, "mask"))?;
        let s = m.shape();
        let mask = BinaryMask::from_values([s[1], s[2], s[3]], m.data(), meta.spacing_um)?;
        out.push(Sample { seed: i as u64, volume, mask });
    }
    Ok(out)
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data.dir {
        Some(dir) => Ok(Dataset { train: read_split(dir, "train")?, val: read_split(dir, "val")? }),
        None => dataset(&cfg.data.scene, cfg.data.n_volumes, cfg.data.train_fraction),
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub seg: f64,
    pub balance: f64,
    /// Mean combine-row entropy over layers.
    pub routing_entropy: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub hash: String,
    pub losses: Vec<f64>,
}

/// Trains from scratch and writes `checkpoint.bin` to `out`. The JSON-lines
/// step log goes to `log`.
pub fn train(cfg: &RunConfig, data: &Dataset, out: &Path, log: &mut dyn Write) -> Result<(Model, ParamStore, TrainOutcome)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Config("no training volumes".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let ckpt = out.join("checkpoint.bin");
    let seed = cfg.train.seed;
    let (model, mut store) = Model::new(&cfg.model, seed, StoreMode::Eager)?;
    let mut adam = Adam::new(&store, cfg.train.lr);
    let inputs: Vec<Tensor> = data.train.iter().map(|s| standardise(&s.volume)).collect();
    let targets: Vec<Tensor> = data.train.iter().map(|s| mask_tensor(&s.mask)).collect();
    let mut order: Vec<usize> = Vec::new();
    let mut shuffler = Rng::with_stream(seed, 3);
    let mut losses = Vec::with_capacity(cfg.train.steps);
    for step in 0..cfg.train.steps {
        let mut batch = Vec::with_capacity(cfg.train.batch_size);
        while batch.len() < cfg.train.batch_size {
            if order.is_empty() {
                order = (0..inputs.len()).collect();
                shuffler.shuffle(&mut order);
            }
            batch.push(order.pop().expect("refilled"));
        }
        let x = stack(&batch.iter().map(|&i| inputs[i].clone()).collect::<Vec<_>>())?;
        let y = stack(&batch.iter().map(|&i| targets[i].clone()).collect::<Vec<_>>())?;
        let tape = Tape::new();
        let bind = Binding::new(&tape, &store, true);
        let mut pass = Pass::new(true, derive_seed(seed, step as u64 + 1));
        let (loss, outv) = model.loss(&bind, &tape.constant(x), &tape.constant(y), &mut pass)?;
        let value = loss.value().item();
        let balance = outv.balance.as_ref().map_or(0.0, |b| b.value().item());
        if !value.is_finite() {
            store.save(&ckpt)?;
            return Err(Error::numeric(format!("training step {step}"), "loss is not finite; last good checkpoint saved"));
        }
        let entropy = if outv.stats.is_empty() {
            0.0
        } else {
            outv.stats.iter().map(|s| s.combine_row_entropy).sum::<f64>() / outv.stats.len() as f64
        };
        let grads = bind.gradients(&tape.backward(&loss)?);
        drop(bind);
        adam.step(&mut store, &grads)?;
        losses.push(value);
        let rec = StepLog { step, loss: value, seg: value + balance, balance, routing_entropy: entropy };
        writeln!(log, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(out, e))?;
    }
    store.save(&ckpt)?;
    let hash = store.content_hash();
    Ok((model, store, TrainOutcome { checkpoint: ckpt, hash, losses }))
}

/// Logits `(1, D, H, W)` for one raw volume `(1, D, H, W)`.
pub fn predict_logits(model: &Model, store: &ParamStore, volume: &Tensor) -> Result<Tensor> {
    let s = volume.shape().to_vec();
    let x = standardise(volume).reshape(&[1, s[0], s[1], s[2], s[3]])?;
    let tape = Tape::no_grad();
    let bind = Binding::new(&tape, store, false);
    let out = model.forward(&bind, &tape.constant(x), &mut Pass::eval())?;
    out.logits.value().reshape(&s)
}

/// `sigmoid(logit) >= 0.5`, i.e. `logit >= 0`.
pub fn threshold(logits: &Tensor, spacing: [f64; 3]) -> Result<BinaryMask> {
    let s = logits.shape();
    let n = s.len();
    BinaryMask::new([s[n - 3], s[n - 2], s[n - 1]], logits.data().iter().map(|&v| v >= 0.0).collect(), spacing)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct VolumeReport {
    pub name: String,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub volumes: Vec<VolumeReport>,
    pub mean: Option<MetricReport>,
}

pub fn evaluate_masks(pairs: &[(String, BinaryMask, BinaryMask)]) -> Result<EvalReport> {
    let volumes = pairs
        .iter()
        .map(|(name, p, r)| Ok(VolumeReport { name: name.clone(), metrics: mask_metrics(p, r)? }))
        .collect::<Result<Vec<_>>>()?;
    let mean = mean_report(&volumes.iter().map(|v| v.metrics.clone()).collect::<Vec<_>>());
    Ok(EvalReport { volumes, mean })
}

pub fn evaluate_model(model: &Model, store: &ParamStore, samples: &[Sample]) -> Result<EvalReport> {
    let pairs = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let pred = threshold(&predict_logits(model, store, &s.volume)?, DEFAULT_SPACING)?;
            Ok((format!("val_{i:04}"), pred, s.mask.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_masks(&pairs)
}
