use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use haloae::config::{Config, DataSource};
use haloae::data::load_image;
use haloae::losses::LossMode;
use haloae::train::{evaluate, infer, load_checkpoint, load_dataset, train};

#[derive(Parser)]
#[command(name = "haloae", version, about = "Train and run a local self-attention auto-encoder for image anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the normal images of one category and write a checkpoint.
    Train(TrainArgs),
    /// Score a test split with a trained checkpoint.
    Eval(EvalArgs),
    /// Score a single image and write its heatmap.
    Infer(InferArgs),
    /// Print the resolved configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Base preset: "full" or "desk".
    #[arg(long, default_value = "full")]
    preset: String,
    /// TOML file laid over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset root holding one directory per category.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    category: Option<String>,
    /// Use generated textures instead of a dataset on disk.
    #[arg(long, conflicts_with_all = ["data_root", "category"])]
    synthetic: bool,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// adaptive, constant, uncertainty, cls-fm, cls-im, fm-im, cls-only or fm-only.
    #[arg(long)]
    loss_mode: Option<LossMode>,
    /// Extractor weights container; random seeded weights otherwise.
    #[arg(long)]
    vgg_weights: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Evaluate on another dataset root than the one used for training.
    #[arg(long)]
    data_root: Option<PathBuf>,
    #[arg(long)]
    category: Option<String>,
    /// Where metrics.json (and heatmaps) go; defaults to the checkpoint's directory.
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    dump_heatmaps: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
}

fn resolve(a: &ConfigArgs) -> Result<Config> {
    let mut cfg = Config::preset(&a.preset)?;
    if let Some(p) = &a.config {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        cfg = cfg.overlay(&text).with_context(|| format!("in {}", p.display()))?;
    }
    if a.synthetic {
        cfg.data.source = DataSource::Synthetic;
    }
    if a.data_root.is_some() || a.category.is_some() {
        cfg.data.source = DataSource::Mvtec;
    }
    if let Some(v) = &a.data_root {
        cfg.data.root = Some(v.clone());
    }
    if let Some(v) = &a.category {
        cfg.data.category = Some(v.clone());
    }
    if let Some(v) = a.seed {
        cfg.train.seed = v;
        cfg.data.synthetic.seed = v;
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.lr {
        cfg.train.lr = v;
    }
    if let Some(v) = a.weight_decay {
        cfg.train.weight_decay = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.loss_mode {
        cfg.train.loss_mode = v;
    }
    if let Some(v) = &a.vgg_weights {
        cfg.features.weights = Some(v.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Config(a) => print!("{}", resolve(&a)?.echo()?),
        Command::Train(a) => {
            let cfg = resolve(&a.config)?;
            create_dir(&a.out_dir)?;
            std::fs::write(a.out_dir.join("config.toml"), cfg.echo()?)?;
            let ds = load_dataset::<f32>(&cfg)?;
            log::info!("{} training images, {} test images", ds.train.len(), ds.test.len());
            let out = train(&cfg, &ds, Some(&a.out_dir))?;
            let last = out.log.last().expect("epochs > 0");
            println!(
                "trained {} epochs: L_T {:.5}, L_rec_fm {:.5} (initial {:.5}), L_rec_im {:.5}",
                out.log.len(),
                last.losses.total,
                last.losses.rec_fm,
                out.initial.rec_fm,
                last.losses.rec_im
            );
            println!("checkpoint: {}", out.checkpoint.expect("out_dir given").display());
        }
        Command::Eval(a) => {
            let mut ck = load_checkpoint::<f32>(&a.checkpoint)?;
            let mut cfg = ck.config.clone();
            if a.data_root.is_some() || a.category.is_some() {
                cfg.data.source = DataSource::Mvtec;
            }
            if let Some(v) = a.data_root {
                cfg.data.root = Some(v);
            }
            if let Some(v) = a.category {
                cfg.data.category = Some(v);
            }
            cfg.eval.dump_heatmaps |= a.dump_heatmaps;
            cfg.validate()?;
            let out_dir = match a.out_dir {
                Some(d) => d,
                None => a.checkpoint.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(".")),
            };
            create_dir(&out_dir)?;
            let heatmaps = out_dir.join("heatmaps");
            if cfg.eval.dump_heatmaps {
                create_dir(&heatmaps)?;
            }
            let ds = load_dataset::<f32>(&cfg)?;
            let report = evaluate(&mut ck.model, &cfg, &ds, cfg.eval.dump_heatmaps.then_some(heatmaps.as_path()))?;
            let p = out_dir.join("metrics.json");
            std::fs::write(&p, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", p.display()))?;
            print!("{}", report.table());
        }
        Command::Infer(a) => {
            let mut ck = load_checkpoint::<f32>(&a.checkpoint)?;
            let im = load_image::<f32>(&a.image, ck.config.data.image_size)?;
            create_dir(&a.out_dir)?;
            let Some(stem) = a.image.file_stem().and_then(|s| s.to_str()) else {
                bail!("cannot derive a file stem from {}", a.image.display());
            };
            let r = infer(&mut ck.model, &ck.config, &im, &a.out_dir, stem)?;
            println!("image_score {:.6}\nclassifier_score {:.6}", r.image_score, r.classifier_score);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
