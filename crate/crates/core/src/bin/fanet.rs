use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{info, warn};

use fanet::checkpoint::Checkpoint;
use fanet::config::RunConfig;
use fanet::data::synth::{generate_split, generate_synthetic};
use fanet::data::{load_tiles, png_io, Manifest, Split};
use fanet::error::{Error, Result};
use fanet::gradcheck::{run_selector, CheckOptions, Selector, DEFAULT_TOLERANCE};
use fanet::metrics::check_threshold;
use fanet::predict::{predict_image, write_prediction};
use fanet::train::{evaluate, Trainer};

#[derive(Parser)]
#[command(name = "fanet", version, about = "Building footprint segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; without --manifest, trains on the configured synthetic set.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Resume from this checkpoint instead of initializing.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Report metrics of a checkpoint on the held-out entries of a manifest.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Must describe the same model as the checkpoint when given.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment one image, writing mask.png and probabilities.ftns.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "prediction")]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        image: PathBuf,
    },
    /// Compare autodiff gradients with finite differences.
    Gradcheck {
        /// all, encoder, fam, dem, rfb, dam or decoder.
        #[arg(default_value = "all")]
        module: String,
        /// Check a single seed instead of 0, 1 and 2.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "synth")]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn threads_from_env() -> Result<()> {
    if let Ok(v) = std::env::var("FANET_THREADS") {
        let n: usize = v
            .trim()
            .parse()
            .map_err(|_| Error::Config {
                field: "FANET_THREADS".into(),
                reason: format!("expected a positive integer, got {v:?}"),
            })?;
        if n == 0 {
            return Err(Error::Config {
                field: "FANET_THREADS".into(),
                reason: "must be >= 1".into(),
            });
        }
        info!("worker cap {n}; computation runs on one thread");
    }
    Ok(())
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|source| Error::Io {
        path: p.to_path_buf(),
        source,
    })
}

fn train(
    config: Option<PathBuf>,
    manifest: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    seed: Option<u64>,
    out: PathBuf,
) -> Result<()> {
    let mut trainer = match &checkpoint {
        Some(p) => {
            let t = Trainer::from_checkpoint(Checkpoint::load(p)?)?;
            info!("resuming {} after epoch {}", p.display(), t.epoch);
            t
        }
        None => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            Trainer::new(cfg)?
        }
    };
    let tile = trainer.config.model.tile_size;
    let (train_set, val_set) = match &manifest {
        Some(p) => {
            let m = Manifest::load(p)?;
            (load_tiles(&m, Split::Train, tile)?, load_tiles(&m, Split::Val, tile)?)
        }
        None => {
            info!("no manifest given; using the configured synthetic set");
            let mut spec = trainer.config.synth.clone();
            spec.canvas = tile;
            let (tr, _) = generate_split(&spec)?;
            (tr, Vec::new())
        }
    };
    if train_set.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    info!(
        "{} training tiles, {} validation tiles, {} parameters",
        train_set.len(),
        val_set.len(),
        trainer.store.num_scalars()
    );
    create_dir(&out)?;
    trainer.fit(&train_set, &val_set, Some(&out), |log| {
        let m = log.metrics.as_ref();
        info!(
            "epoch {} lr {:e} loss {:.5} iou {}",
            log.stats.epoch,
            log.stats.lr,
            log.stats.mean_loss(),
            m.map_or("-".to_string(), |m| format!("{:.4}", m.iou))
        );
    })?;
    println!("checkpoints written to {}", out.display());
    Ok(())
}

fn eval(
    checkpoint: PathBuf,
    manifest: PathBuf,
    config: Option<PathBuf>,
    threshold: Option<f64>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut trainer = Trainer::from_checkpoint(Checkpoint::load(&checkpoint)?)?;
    if let Some(p) = config {
        let cfg = RunConfig::load(&p)?;
        if cfg.model != trainer.config.model {
            return Err(Error::Validation(format!(
                "{} describes a different model than checkpoint {}",
                p.display(),
                checkpoint.display()
            )));
        }
    }
    if let Some(t) = threshold {
        check_threshold(t)?;
        trainer.net.config.threshold = t;
    }
    let m = Manifest::load(&manifest)?;
    let tile = trainer.config.model.tile_size;
    let mut data = load_tiles(&m, Split::Test, tile)?;
    data.extend(load_tiles(&m, Split::Val, tile)?);
    if data.is_empty() {
        warn!("manifest has no val/test entries; evaluating the training split");
        data = load_tiles(&m, Split::Train, tile)?;
    }
    if data.is_empty() {
        return Err(Error::Validation(format!(
            "no {tile}x{tile} tiles found in {}",
            manifest.display()
        )));
    }
    let report = evaluate(&trainer.net, &trainer.store, &data, trainer.config.train.batch_size)?;
    print!("{}", report.to_text());
    if let Some(dir) = out {
        create_dir(&dir)?;
        for (name, body) in [("report.txt", report.to_text()), ("report.json", report.to_json())] {
            let p = dir.join(name);
            std::fs::write(&p, body).map_err(|source| Error::Io { path: p, source })?;
        }
    }
    Ok(())
}

fn predict(checkpoint: PathBuf, out: PathBuf, threshold: Option<f64>, image: PathBuf) -> Result<()> {
    let trainer = Trainer::from_checkpoint(Checkpoint::load(&checkpoint)?)?;
    let threshold = threshold.unwrap_or(trainer.config.model.threshold);
    check_threshold(threshold)?;
    let img = png_io::read_rgb(&image)?;
    let probs = predict_image(&trainer.net, &trainer.store, &img)?;
    write_prediction(&out, &probs, threshold)?;
    println!("wrote {}", out.display());
    Ok(())
}

fn gradcheck(module: &str, seed: Option<u64>) -> Result<()> {
    let selector: Selector = module.parse()?;
    let seeds = seed.map_or(vec![0, 1, 2], |s| vec![s]);
    let rows = run_selector(selector, &seeds, &CheckOptions::default())?;
    for r in &rows {
        println!("{r}");
    }
    let failed: Vec<_> = rows.iter().filter(|r| !r.passed).collect();
    if failed.is_empty() {
        println!("gradcheck {selector}: {} groups within {DEFAULT_TOLERANCE:e}", rows.len());
        Ok(())
    } else {
        let names: Vec<String> = failed
            .iter()
            .map(|r| format!("{}/{} (seed {})", r.module, r.report.name, r.seed))
            .collect();
        Err(Error::Numerical(format!("gradient mismatch in {}", names.join(", "))))
    }
}

fn synth(config: Option<PathBuf>, seed: Option<u64>, out: PathBuf) -> Result<()> {
    let mut spec = load_config(config.as_deref())?.synth;
    if let Some(s) = seed {
        spec.seed = s;
    }
    let m = generate_synthetic(&spec, &out)?;
    println!("wrote {} pairs and {}", m.entries.len(), out.join("manifest.tsv").display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    threads_from_env()?;
    match cli.command {
        Command::Train {
            config,
            manifest,
            checkpoint,
            seed,
            out,
        } => train(config, manifest, checkpoint, seed, out),
        Command::Eval {
            checkpoint,
            manifest,
            config,
            threshold,
            out,
        } => eval(checkpoint, manifest, config, threshold, out),
        Command::Predict {
            checkpoint,
            out,
            threshold,
            image,
        } => predict(checkpoint, out, threshold, image),
        Command::Gradcheck { module, seed } => gradcheck(&module, seed),
        Command::Synth { config, seed, out } => synth(config, seed, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
