use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sambd::experiment::{
    ablate, eval_predictions, generate_dataset, infer_file, predict_manifest, train, Ablation, DatasetConfig,
    ExperimentConfig,
};
use sambd::model::{Model, ModelConfig};
use sambd::volume::{Manifest, Split};
use sambd::{Error, Result};

#[derive(Parser)]
#[command(name = "sambd", version, about = "Slice-aware multi-branch 2.5D segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a manifest.
    Phantom {
        /// Dataset config (TOML); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model per seed and evaluate it on the validation split.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed list of the config.
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Segment a volume, or every case of a manifest split.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// SVOL intensity volume.
        #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
        input: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long, default_value = "val")]
        split: Split,
        /// Output SVOL file, or directory with a manifest.
        #[arg(long)]
        out: PathBuf,
        /// Experiment config supplying inference options.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Score `<id>.svol` predictions against a manifest.
    Eval {
        #[arg(long)]
        pred_dir: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Restrict to one split; all cases when omitted.
        #[arg(long)]
        split: Option<Split>,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and compare the decoder/attention/loss variants.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Only the full model and the width-matched baseline.
        #[arg(long)]
        pair_only: bool,
    },
    /// Parameter and FLOP counts of the standard variants.
    Params {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 64)]
        size: usize,
    },
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("SAMBD_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("SAMBD_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    Ok(())
}

fn experiment(config: &Path, seeds: Vec<u64>, out: Option<PathBuf>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(config)?;
    if !seeds.is_empty() {
        cfg.seeds = seeds;
    }
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    Ok(cfg)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })
}

fn run(cli: Cli) -> Result<ExitCode> {
    init_threads()?;
    match cli.command {
        Command::Phantom { config, seed, out } => {
            let mut cfg = match config {
                Some(p) => DatasetConfig::load(p)?,
                None => DatasetConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let m = generate_dataset(&cfg, &out)?;
            println!(
                "wrote {} train and {} val cases to {}",
                m.split(Split::Train).count(),
                m.split(Split::Val).count(),
                out.join("manifest.toml").display()
            );
        }
        Command::Train { config, seed, out } => {
            let cfg = experiment(&config, seed, out)?;
            for &s in &cfg.seeds {
                let r = train(&cfg, s)?;
                let last = r.epochs.last().map_or(f64::NAN, |e| e.total);
                print!("{} seed {s}: final loss {last:.5}", r.label);
                if let Some(l) = &r.lesion {
                    print!(", lesion Dice per case {:.4}", l.dice_per_case);
                }
                if let Some(c) = &r.checkpoint {
                    print!(", checkpoint {}", c.display());
                }
                println!();
            }
        }
        Command::Infer {
            checkpoint,
            input,
            manifest,
            split,
            out,
            config,
        } => {
            let options = match config {
                Some(p) => ExperimentConfig::load(p)?.inference,
                None => Default::default(),
            };
            match (input, manifest) {
                (Some(input), _) => {
                    let stats = infer_file(&checkpoint, &input, &out, &options)?;
                    println!(
                        "wrote {} ({:?}, {} windows, labels {:?})",
                        out.display(),
                        stats.dims,
                        stats.windows,
                        stats.voxels_per_label
                    );
                }
                (None, Some(manifest)) => {
                    let model = Model::<f32>::load(&checkpoint)?;
                    let m = Manifest::load(manifest)?;
                    let n = predict_manifest(&model, &m, split, &out, &options)?;
                    println!("wrote {n} predictions to {}", out.display());
                }
                (None, None) => unreachable!("clap requires --input or --manifest"),
            }
        }
        Command::Eval {
            pred_dir,
            manifest,
            split,
            out,
        } => {
            let m = Manifest::load(manifest)?;
            let report = eval_predictions(&pred_dir, &m, split)?;
            let text = report.to_text();
            match out {
                Some(p) => write_text(&p, &text)?,
                None => print!("{text}"),
            }
            if !report.is_complete() {
                eprintln!("missing predictions: {}", report.missing.join(", "));
                return Ok(ExitCode::from(2));
            }
        }
        Command::Ablate {
            config,
            seed,
            out,
            pair_only,
        } => {
            let cfg = experiment(&config, seed, out)?;
            let m = Manifest::load(&cfg.manifest)?;
            let c_out = cfg.model.c_out;
            let reference = Ablation::multi_branch(true, true);
            let baseline = Ablation::baseline(c_out);
            let variants = if pair_only {
                vec![baseline, reference]
            } else {
                Ablation::standard_variants(c_out)
            };
            let table = ablate(&cfg, &m, &variants, reference, baseline)?;
            print!("{}", table.to_text());
        }
        Command::Params { config, size } => {
            let base = match config {
                Some(p) => ExperimentConfig::load(p)?.model,
                None => ModelConfig::default(),
            };
            let mut rows = Vec::new();
            for v in Ablation::standard_variants(base.c_out) {
                let cfg = v.apply(&base);
                if rows.iter().any(|(c, _): &(ModelConfig, String)| c == &cfg) {
                    continue;
                }
                rows.push((cfg, v.label().replace("+DCD", "")));
            }
            let single = Model::<f32>::build(Ablation::baseline(1).apply(&base), 0)?.count_params();
            println!("| Model | Params | vs single-branch 1x | MACs at {size}x{size} |");
            println!("|---|---|---|---|");
            for (cfg, label) in rows {
                let m = Model::<f32>::build(cfg, 0)?;
                let p = m.count_params();
                println!(
                    "| {label} | {p} | {:+.2}% | {} |",
                    (p as f64 / single as f64 - 1.0) * 100.0,
                    m.count_flops(size, size)?
                );
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
