use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hjscc::config::{RunConfig, OUTPUT_ROOT_ENV};
use hjscc::harness::checkpoint::Checkpoint;
use hjscc::harness::dataset::Dataset;
use hjscc::harness::evaluate::{evaluate, read_metrics_csv, write_metrics_csv, write_metrics_json, EvalSettings};
use hjscc::harness::report::sweep_report;
use hjscc::harness::synth::write_synth_dataset;
use hjscc::harness::train::train;

#[derive(Parser)]
#[command(name = "hjscc", version, about = "Hierarchical JSCC image transmission over AWGN channels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ChannelArgs {
    /// Feedback link SNR in dB; omitted means noiseless.
    #[arg(long)]
    feedback_snr_db: Option<f64>,
    /// Transmit power per real dimension.
    #[arg(long)]
    power: Option<f64>,
}

impl ChannelArgs {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.feedback_snr_db {
            cfg.channel.feedback_snr_db = Some(s);
        }
        if let Some(p) = self.power {
            cfg.channel.power = p;
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a model.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Channel SNR in dB during training.
        #[arg(long)]
        snr_db: Option<f64>,
        #[command(flatten)]
        channel: ChannelArgs,
    },
    /// Evaluate a checkpoint over SNR and alpha grids.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated SNR values in dB.
        #[arg(long, value_delimiter = ',', default_value = "10")]
        snr_db: Vec<f64>,
        /// Comma-separated rate scales.
        #[arg(long, value_delimiter = ',')]
        alpha: Vec<f64>,
        #[arg(long)]
        feedback: bool,
        /// Send every level at full length.
        #[arg(long)]
        full_length: bool,
        /// Center crop size applied before padding.
        #[arg(long)]
        crop: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory (default: `<output root>/eval`).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        channel: ChannelArgs,
    },
    /// Plot metric tables and summarise monotonicity.
    Report {
        #[arg(long = "in", num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a folder of procedural PNG images.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Train {
            config,
            resume,
            snr_db,
            channel,
        } => {
            let mut cfg = RunConfig::load(&config)
                .with_context(|| format!("loading config {}", config.display()))?;
            channel.apply(&mut cfg);
            if let Some(s) = snr_db {
                cfg.channel.snr_db = s;
            }
            cfg.validate()?;
            let ckpt = train(&cfg, resume.as_deref())?;
            println!("{}", ckpt.display());
        }
        Command::Eval {
            ckpt,
            data,
            snr_db,
            alpha,
            feedback,
            full_length,
            crop,
            seed,
            out,
            channel,
        } => {
            let ck = Checkpoint::load(&ckpt)
                .with_context(|| format!("loading checkpoint {}", ckpt.display()))?;
            let mut model = ck.model()?;
            channel.apply(&mut model.config);
            model.config.channel.validate()?;
            let alpha = if alpha.is_empty() { vec![model.config.loss.alpha] } else { alpha };
            if snr_db.is_empty() {
                bail!("no SNR values given");
            }
            let ds = Dataset::load(&data)?;
            let images = ds.eval_images(model.config.model.divisibility(), crop)?;
            let settings = EvalSettings {
                snr_db,
                alpha,
                feedback,
                seed,
                full_length,
            };
            let (rows, sidecars) = evaluate(&model, &images, &settings)?;
            let out = out.unwrap_or_else(|| {
                std::env::var(OUTPUT_ROOT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|_| model.config.output_dir.clone())
                    .join("eval")
            });
            std::fs::create_dir_all(&out)?;
            write_metrics_csv(&out.join("metrics.csv"), &rows)?;
            write_metrics_json(&out.join("metrics.json"), &rows)?;
            let plans: Vec<_> = sidecars.iter().map(|s| s.to_json()).collect::<hjscc::Result<_>>()?;
            std::fs::write(out.join("rate_plans.json"), format!("[{}]", plans.join(",")))?;
            println!("{}", out.join("metrics.csv").display());
        }
        Command::Report { inputs, out } => {
            let mut rows = Vec::new();
            for p in &inputs {
                rows.extend(read_metrics_csv(p).with_context(|| format!("reading {}", p.display()))?);
            }
            let summary = sweep_report(&rows, &out)?;
            for w in &summary.warnings {
                eprintln!("warning: {w}");
            }
            println!(
                "{} curve(s), graceful degradation: {}",
                summary.curves.len(),
                summary.graceful_degradation()
            );
        }
        Command::Synth {
            out,
            count,
            size,
            seed,
        } => {
            let files = write_synth_dataset(&out, count, size, size, seed)?;
            println!("{} images in {}", files.len(), out.display());
        }
    }
    Ok(())
}
