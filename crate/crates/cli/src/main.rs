use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use brightstack::bench::{bench_attention, to_csv};
use brightstack::config::{RunConfig, VolumeFile, VolumeKind};
use brightstack::gradcheck::{self, Scope};
use brightstack::metrics::BinaryMask;
use brightstack::model::Model;
use brightstack::params::StoreMode;
use brightstack::synthgen::dataset;
use brightstack::train::{evaluate_masks, predict_logits, read_split, sample_stem, threshold, train, write_dataset};
use brightstack::Tensor;

#[derive(Parser)]
#[command(name = "brightstack", version, about = "Sparse-attention volumetric segmentation at desk scale")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset as image/mask volume files.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train from scratch; writes checkpoint.bin and train_log.jsonl.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Metrics on the validation split, from a checkpoint or from mask files.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, required_unless_present = "pred")]
        ckpt: Option<PathBuf>,
        /// Directory of predicted masks `mask_NNNN` instead of running the model.
        #[arg(long, conflicts_with = "ckpt")]
        pred: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Logits and thresholded mask for one volume.
    Predict {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Volume stem, with or without extension.
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Attended score pairs, buffer size and time per sequence length.
    BenchAttention {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
        n: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Tape gradients against central differences.
    Gradcheck {
        #[arg(long)]
        scope: Scope,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_model(cfg: &RunConfig, ckpt: &Path) -> Result<(Model, brightstack::params::ParamStore)> {
    let (model, mut store) = Model::new(&cfg.model, cfg.train.seed, StoreMode::Eager)?;
    store.load(ckpt)?;
    Ok((model, store))
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Directory holding `image_NNNN`/`mask_NNNN`: `dir/val` when present, else `dir`.
fn split_of(dir: &Path) -> (PathBuf, &'static str) {
    if dir.join("val").is_dir() {
        (dir.to_path_buf(), "val")
    } else {
        (dir.to_path_buf(), "")
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Generate { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let data = dataset(&cfg.data.scene, cfg.data.n_volumes, cfg.data.train_fraction)?;
            write_dataset(&out, &data)?;
            println!("wrote {} train and {} val volumes to {}", data.train.len(), data.val.len(), out.display());
        }
        Cmd::Train { config, out } => {
            let cfg = RunConfig::load(&config)?;
            let data = brightstack::train::load_data(&cfg)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let log_path = out.join("train_log.jsonl");
            let mut log = BufWriter::new(File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?);
            let (_, _, outcome) = train(&cfg, &data, &out, &mut log)?;
            log.flush()?;
            println!("checkpoint {} sha256 {}", outcome.checkpoint.display(), outcome.hash);
        }
        Cmd::Eval { config, ckpt, pred, data, out } => {
            let cfg = RunConfig::load(&config)?;
            let (dir, split) = split_of(&data);
            let samples = read_split(&dir, split)?;
            if samples.is_empty() {
                bail!("no volumes found under {}", data.display());
            }
            let report = match (ckpt, pred) {
                (Some(ckpt), _) => {
                    let (model, store) = load_model(&cfg, &ckpt)?;
                    brightstack::train::evaluate_model(&model, &store, &samples)?
                }
                (None, Some(pred)) => {
                    let pairs = samples
                        .iter()
                        .enumerate()
                        .map(|(i, s)| {
                            let (m, meta) = VolumeFile::read(&sample_stem(&pred, "", i, "mask"))?;
                            let sh = m.shape();
                            let p = BinaryMask::from_values([sh[1], sh[2], sh[3]], m.data(), meta.spacing_um)?;
                            Ok((format!("{split}_{i:04}"), p, s.mask.clone()))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    evaluate_masks(&pairs)?
                }
                (None, None) => bail!("eval needs --ckpt or --pred"),
            };
            write_json(&out, &report)?;
            if let Some(m) = &report.mean {
                println!("mean dice {:.4} over {} volumes", m.dice, report.volumes.len());
            }
        }
        Cmd::Predict { config, ckpt, input, out } => {
            let cfg = RunConfig::load(&config)?;
            let (model, store) = load_model(&cfg, &ckpt)?;
            let (vol, _) = VolumeFile::read(&input.with_extension(""))?;
            let (cropped, crop) = crop_to(&vol, cfg.model.input_dhw)?;
            let logits = predict_logits(&model, &store, &cropped)?;
            let mask = threshold(&logits, brightstack::metrics::DEFAULT_SPACING)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            VolumeFile::write(&out.join("logits"), &logits, VolumeKind::Logits, Some(crop))?;
            let s = logits.shape().to_vec();
            let mt = Tensor::new(s, mask.voxels.iter().map(|&b| b as u8 as f64).collect())?;
            VolumeFile::write(&out.join("mask"), &mt, VolumeKind::Mask, Some(crop))?;
            println!("{} foreground voxels, crop {:?}", mask.count(), crop);
        }
        Cmd::BenchAttention { config, n, out } => {
            let cfg = RunConfig::load(&config)?;
            if n.is_empty() || n.contains(&0) {
                bail!("--n must list positive sequence lengths");
            }
            let rows = bench_attention(&cfg.model.nsa()?, cfg.model.patch.hidden, &n, cfg.train.seed)?;
            std::fs::write(&out, to_csv(&rows)).with_context(|| format!("writing {}", out.display()))?;
            print!("{}", to_csv(&rows));
        }
        Cmd::Gradcheck { scope, seed } => {
            let results = gradcheck::run(scope, seed)?;
            let mut ok = true;
            for r in &results {
                println!("{}", serde_json::to_string(r)?);
                ok &= r.passed;
            }
            if !ok {
                eprintln!("error: gradient check failed");
                return Ok(ExitCode::FAILURE);
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Removes voxels from the end of each spatial axis so `(C, D, H, W)` matches
/// the model input.
fn crop_to(vol: &Tensor, dhw: [usize; 3]) -> Result<(Tensor, [usize; 3])> {
    let s = vol.shape();
    if s.len() != 4 || s[0] != 1 {
        bail!("expected a single-channel (1, D, H, W) volume, got {s:?}");
    }
    if (0..3).any(|a| s[a + 1] < dhw[a]) {
        bail!("volume {:?} is smaller than the model input {:?}; cannot crop", &s[1..], dhw);
    }
    let crop = [s[1] - dhw[0], s[2] - dhw[1], s[3] - dhw[2]];
    let (h, w) = (s[2], s[3]);
    let mut data = Vec::with_capacity(dhw.iter().product());
    for z in 0..dhw[0] {
        for y in 0..dhw[1] {
            let row = (z * h + y) * w;
            data.extend_from_slice(&vol.data()[row..row + dhw[2]]);
        }
    }
    Ok((Tensor::new(vec![1, dhw[0], dhw[1], dhw[2]], data)?, crop))
}
