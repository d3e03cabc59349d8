//! Batch experiment driver for the masked graph autoencoder: dataset
//! ingestion, pretraining, fine-tuning, embedding export, linear
//! evaluation, sweep experiments, and memory profiling.
//!
//! Every run writes a `manifest.json` with all defaults materialized;
//! `gmae rerun manifest.json --out DIR` reproduces the run bit for bit
//! (timestamps aside). Exit codes: 0 success, 2 argument/config error,
//! 3 data error, 4 runtime/numeric error.

mod commands;
mod error;
mod spec;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use gmae_core::model::GmaeConfig;
use gmae_core::train::{FinetuneConfig, TrainConfig};

use error::CliError;
use spec::{DataFormat, EvalSpec, RunSpec};

#[derive(Parser)]
#[command(name = "gmae", version, about = "Masked graph-autoencoder experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Tu,
    Jsonl,
}

impl From<FormatArg> for DataFormat {
    fn from(f: FormatArg) -> DataFormat {
        match f {
            FormatArg::Tu => DataFormat::Tu,
            FormatArg::Jsonl => DataFormat::Jsonl,
        }
    }
}

#[derive(Args)]
struct DataArgs {
    /// Dataset format
    #[arg(long, value_enum)]
    format: FormatArg,
    /// Dataset directory (tu) or file (jsonl)
    #[arg(long)]
    data: PathBuf,
    /// Dataset name prefix (tu format)
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, default_value_t = 0.5)]
    mask_ratio: f64,
    #[arg(long, default_value_t = 12)]
    enc_layers: usize,
    #[arg(long, default_value_t = 2)]
    dec_layers: usize,
    #[arg(long, default_value_t = 80)]
    hidden: usize,
    #[arg(long, default_value_t = 8)]
    heads: usize,
    #[arg(long, default_value_t = 20)]
    max_spd: u32,
    #[arg(long, default_value_t = 64)]
    max_degree: usize,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
}

impl ModelArgs {
    fn to_config(&self) -> GmaeConfig {
        GmaeConfig {
            enc_layers: self.enc_layers,
            dec_layers: self.dec_layers,
            hidden: self.hidden,
            heads: self.heads,
            mask_ratio: self.mask_ratio,
            max_spd: self.max_spd,
            max_degree: self.max_degree,
            ff_multiplier: 4,
            dropout: self.dropout,
        }
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value_t = 1e-4)]
    peak_lr: f64,
    #[arg(long, default_value_t = 1e-9)]
    end_lr: f64,
    /// Warmup steps of the learning-rate ramp
    #[arg(long, default_value_t = 40_000)]
    warmup: u64,
    /// Total schedule length; 0 derives it from epochs and batches
    #[arg(long, default_value_t = 0)]
    total_steps: u64,
    #[arg(long, default_value_t = 1000)]
    epochs: u64,
    /// Early-stopping patience in epochs
    #[arg(long, default_value_t = 50)]
    patience: u64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

impl TrainArgs {
    fn to_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            peak_lr: self.peak_lr,
            end_lr: self.end_lr,
            warmup_steps: self.warmup,
            total_steps: self.total_steps,
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            early_stop_patience: self.patience,
            seed,
        }
    }
}

#[derive(Args)]
struct OutArgs {
    /// Output directory for manifest and artifacts
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parallel worker bound for sweep points (also capped by GMAE_THREADS)
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining; writes history.csv and gmae.ckpt
    Pretrain {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Supervised fine-tuning from a pretrained checkpoint
    Finetune {
        #[command(flatten)]
        data: DataArgs,
        /// Pretrained checkpoint to start from
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value_t = 300)]
        epochs: u64,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        /// Held-out fraction for per-epoch validation metrics
        #[arg(long, default_value_t = 0.1)]
        val_fraction: f64,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Export pooled graph embeddings to CSV
    Embed {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        ckpt: PathBuf,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Linear-probe evaluation of an embeddings CSV
    Eval {
        /// Embeddings CSV produced by `embed`
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Pretrain + evaluate across mask ratios
    SweepMask {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated mask ratios
        #[arg(long, value_delimiter = ',', default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])]
        ratios: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Pretrain + evaluate across decoder depths
    SweepDecoder {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Comma-separated decoder depths
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 2, 3, 4, 6, 8])]
        depths: Vec<usize>,
        #[arg(long, default_value_t = 10)]
        folds: usize,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Estimated vs measured peak memory on synthetic graphs
    Memprofile {
        #[command(flatten)]
        model: ModelArgs,
        /// Comma-separated graph sizes
        #[arg(long, value_delimiter = ',', default_values_t = [32usize, 64, 128, 256])]
        sizes: Vec<usize>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Re-execute a written manifest
    Rerun {
        manifest: PathBuf,
        /// Redirect outputs (defaults to the manifest's own out directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn base_spec(command: &str, out: &OutArgs) -> RunSpec {
    RunSpec {
        command: command.into(),
        format: None,
        data: None,
        name: None,
        gmae: GmaeConfig::default(),
        train: TrainConfig {
            seed: out.seed,
            ..TrainConfig::default()
        },
        finetune: FinetuneConfig {
            seed: out.seed,
            ..FinetuneConfig::default()
        },
        eval: EvalSpec::default(),
        ckpt: None,
        embeddings: None,
        ratios: Vec::new(),
        depths: Vec::new(),
        sizes: Vec::new(),
        out: out.out.clone(),
        seed: out.seed,
        jobs: out.jobs,
    }
}

/// A rerun request: manifest path plus optional output override.
type RerunRequest = (PathBuf, Option<PathBuf>);

fn spec_of(cli: Command) -> Result<(RunSpec, Option<RerunRequest>), CliError> {
    let spec = match cli {
        Command::Pretrain {
            data,
            model,
            train,
            out,
        } => {
            let mut s = base_spec("pretrain", &out);
            s.format = Some(data.format.into());
            s.data = Some(data.data);
            s.name = data.name;
            s.gmae = model.to_config();
            s.train = train.to_config(out.seed);
            s
        }
        Command::Finetune {
            data,
            ckpt,
            epochs,
            lr,
            batch_size,
            val_fraction,
            out,
        } => {
            let mut s = base_spec("finetune", &out);
            s.format = Some(data.format.into());
            s.data = Some(data.data);
            s.name = data.name;
            s.ckpt = Some(ckpt);
            s.finetune = FinetuneConfig {
                epochs,
                lr,
                batch_size,
                seed: out.seed,
                val_fraction,
            };
            s
        }
        Command::Embed { data, ckpt, out } => {
            let mut s = base_spec("embed", &out);
            s.format = Some(data.format.into());
            s.data = Some(data.data);
            s.name = data.name;
            s.ckpt = Some(ckpt);
            s
        }
        Command::Eval {
            embeddings,
            folds,
            repeats,
            out,
        } => {
            let mut s = base_spec("eval", &out);
            s.embeddings = Some(embeddings);
            s.eval = EvalSpec { folds, repeats };
            s
        }
        Command::SweepMask {
            data,
            model,
            train,
            ratios,
            folds,
            repeats,
            out,
        } => {
            let mut s = base_spec("sweep-mask", &out);
            s.format = Some(data.format.into());
            s.data = Some(data.data);
            s.name = data.name;
            s.gmae = model.to_config();
            s.train = train.to_config(out.seed);
            s.eval = EvalSpec { folds, repeats };
            s.ratios = ratios;
            s
        }
        Command::SweepDecoder {
            data,
            model,
            train,
            depths,
            folds,
            repeats,
            out,
        } => {
            let mut s = base_spec("sweep-decoder", &out);
            s.format = Some(data.format.into());
            s.data = Some(data.data);
            s.name = data.name;
            s.gmae = model.to_config();
            s.train = train.to_config(out.seed);
            s.eval = EvalSpec { folds, repeats };
            s.depths = depths;
            s
        }
        Command::Memprofile { model, sizes, out } => {
            let mut s = base_spec("memprofile", &out);
            s.gmae = model.to_config();
            s.sizes = sizes;
            s
        }
        Command::Rerun { manifest, out } => {
            return Ok((RunSpec::read_manifest(&manifest)?, Some((manifest, out))))
        }
    };
    Ok((spec, None))
}

fn main() {
    let cli = Cli::parse();
    let result = (|| -> Result<(), CliError> {
        match spec_of(cli.command)? {
            (_, Some((manifest, out))) => commands::cmd_rerun(&manifest, out),
            (spec, None) => commands::run_spec(&spec),
        }
    })();
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(e.code);
    }
}
