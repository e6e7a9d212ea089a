use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use teocc::blob::{write_blob, Blob, BlobData};
use teocc::dataset::{load_dataset, load_episode, save_dataset};
use teocc::export::export_voxels;
use teocc::harness::{generate_episodes, Dataset, Variant};
use teocc::{Checkpoint, TrainConfig};
use teocc_core::{GridSpec, OccupancyLabelGrid};

#[derive(Parser)]
#[command(name = "teocc", version, about = "Radar-camera semantic occupancy with temporal enhancement")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate episodes and write them as a dataset directory.
    GenData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train on the dataset named in the config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on every episode of a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Train each variant over several seeds and print the mIoU table.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma separated; defaults to every variant.
        #[arg(long, value_delimiter = ',')]
        variants: Vec<Variant>,
        #[arg(long, default_value_t = 3)]
        seeds: usize,
        /// Optional JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict one frame and write logits, labels and the grid.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        episode: PathBuf,
        #[arg(long)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a label grid as a voxel list. Reads either an `infer` output
    /// directory or the ground truth of an episode frame.
    ExportViz {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        frame: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> anyhow::Result<TrainConfig> {
    Ok(match path {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    })
}

fn read_label_dir(dir: &Path) -> anyhow::Result<OccupancyLabelGrid> {
    let grid_path = dir.join("grid.json");
    let text = std::fs::read_to_string(&grid_path).with_context(|| format!("reading {}", grid_path.display()))?;
    let spec: GridSpec = serde_json::from_str(&text).with_context(|| format!("parsing {}", grid_path.display()))?;
    let labels_path = dir.join("labels.teoc");
    let (dims, data) = teocc::blob::read_blob(&labels_path)?.into_i32(&labels_path)?;
    if dims[..] != spec.dims()[..] {
        bail!("{}: dims {:?} do not match grid {:?}", labels_path.display(), dims, spec.dims());
    }
    let labels = data.into_iter().map(|v| u8::try_from(v).context("label out of range")).collect::<anyhow::Result<Vec<u8>>>()?;
    Ok(OccupancyLabelGrid::new(spec, labels)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData { config, out, episodes, seed } => {
            let cfg = load_config(config.as_deref())?;
            let eps = generate_episodes(&cfg, episodes, seed)?;
            save_dataset(&eps, &out)?;
            println!("wrote {} episodes to {}", eps.len(), out.display());
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let (_, report) = teocc::run_training(&cfg, &out)?;
            let last = report.loss_curve.last().map(|l| l.total).unwrap_or(f64::NAN);
            println!("final loss {:.4}, val mIoU {:.4}; outputs in {}", last, report.miou, out.display());
        }
        Command::Eval { checkpoint, data } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let episodes = load_dataset(&data)?;
            let report = teocc::evaluate_checkpoint(&ckpt, &episodes)?;
            let names = episodes[0].config.labels();
            for (c, iou) in report.per_class_iou.iter().enumerate() {
                let iou = iou.map_or("n/a".to_string(), |v| format!("{:.4}", v));
                println!("{:<12} {}", names.names().get(c).map_or("?", String::as_str), iou);
            }
            println!("{:<12} {:.4}", "mIoU", report.miou);
        }
        Command::Ablate { config, variants, seeds, out } => {
            let cfg = TrainConfig::load(&config)?;
            let variants = if variants.is_empty() { Variant::ALL.to_vec() } else { variants };
            let data = Dataset::load(&cfg)?;
            let report = teocc::run_ablation(&cfg, &data, &variants, seeds, &mut |v, r| {
                eprintln!("{:<20} seed {:>3}  mIoU {:.4}  {:.1}s", v.name(), r.seed, r.miou, r.train.wall_ms / 1e3);
            })?;
            print!("{}", report.table());
            for c in report.checks() {
                println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if let Some(o) = report.overhead() {
                println!("train overhead: memory x{:.3}, time x{:.3}", o.memory_ratio, o.time_ratio);
            }
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Infer { checkpoint, episode, frame, out } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let ep = load_episode(&episode)?;
            let pred = teocc::infer(&ckpt, &ep, frame)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let logits = Blob::new(pred.logits.shape().to_vec(), BlobData::F64(pred.logits.data().to_vec())).map_err(anyhow::Error::msg)?;
            write_blob(&out.join("logits.teoc"), &logits)?;
            let grid = pred.labels();
            let labels = Blob::new(grid.spec.dims().to_vec(), BlobData::I32(grid.labels.iter().map(|&l| l as i32).collect())).map_err(anyhow::Error::msg)?;
            write_blob(&out.join("labels.teoc"), &labels)?;
            std::fs::write(out.join("grid.json"), serde_json::to_string_pretty(&pred.spec)?)?;
            println!("wrote prediction for frame {} to {}", frame, out.display());
        }
        Command::ExportViz { input, frame, out } => {
            let grid = match frame {
                Some(f) => {
                    let ep = load_episode(&input)?;
                    let Some(fr) = ep.frames.get(f) else { bail!("episode has {} frames, asked for {}", ep.frames.len(), f) };
                    fr.gt_occupancy.clone()
                }
                None => read_label_dir(&input)?,
            };
            export_voxels(&grid, &out)?;
            println!("wrote {} voxels to {}", grid.labels.iter().filter(|&&l| l != 0).count(), out.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {:#}", e);
        std::process::exit(1);
    }
}
