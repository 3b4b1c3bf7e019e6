//! Training: Adam on sampled-velocity passes, one structured record per
//! iteration on stdout, checkpoints at the end and every --save-every steps.

use std::io::Write;
use std::path::PathBuf;

use clap::Args;

use coreg::losses::LossWeights;
use coreg::regnet::NetworkConfig;
use coreg::train::{samples_from_cases, TrainSettings, Trainer};
use coreg::{Error, Result};

use crate::common::{load_dataset, parse_channel_list};

#[derive(Args)]
pub struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,

    /// Checkpoint stem; writes <stem>.json and <stem>.bin.
    #[arg(long)]
    pub out: PathBuf,

    /// Total iterations, counted across resumes.
    #[arg(long, default_value_t = 500)]
    pub iters: u64,

    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,

    #[arg(long, default_value_t = 2)]
    pub batch: usize,

    #[arg(long, default_value_t = 20.0)]
    pub lambda_sim: f64,

    #[arg(long, default_value_t = 0.1)]
    pub lambda_kl: f64,

    #[arg(long, default_value_t = 10.0)]
    pub prior_lambda: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Resume from this checkpoint stem; its seed, iteration counter, and
    /// network architecture override the corresponding flags.
    #[arg(long)]
    pub resume: Option<PathBuf>,

    /// Also write the checkpoint every N iterations (0 = only at the end).
    #[arg(long, default_value_t = 0)]
    pub save_every: u64,

    /// Batch members evaluated concurrently; the result is identical for
    /// any value.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,

    /// Stem channel pair, e.g. 8,16.
    #[arg(long, default_value = "8,16")]
    pub stem_channels: String,

    #[arg(long, default_value_t = 16)]
    pub att_channels: usize,

    #[arg(long, default_value_t = 2)]
    pub unet_depth: usize,

    /// U-Net channels per level, e.g. 16,16.
    #[arg(long, default_value = "16,16")]
    pub unet_channels: String,

    /// Scaling-and-squaring steps for the velocity integral.
    #[arg(long, default_value_t = 7)]
    pub int_steps: u32,
}

pub fn run(args: TrainArgs) -> Result<()> {
    if args.iters < 1 {
        return Err(Error::usage("--iters must be at least 1"));
    }
    let stem_list = parse_channel_list(&args.stem_channels).map_err(Error::usage)?;
    let stem: [usize; 2] = match stem_list.as_slice() {
        [a, b] => [*a, *b],
        other => {
            return Err(Error::usage(format!(
                "--stem-channels needs exactly two values, got {other:?}"
            )))
        }
    };
    let unet_channels = parse_channel_list(&args.unet_channels).map_err(Error::usage)?;

    let (_, cases) = load_dataset(&args.data)?;
    if cases.len() < args.batch {
        return Err(Error::usage(format!(
            "dataset holds {} cases, fewer than the batch size {}",
            cases.len(),
            args.batch
        )));
    }
    let samples = samples_from_cases(&cases);

    let settings = TrainSettings {
        lr: args.lr,
        batch: args.batch,
        weights: LossWeights {
            lambda_sim: args.lambda_sim,
            lambda_kl: args.lambda_kl,
            prior_lambda: args.prior_lambda,
        },
        seed: args.seed,
        threads: args.threads,
    };

    let mut trainer = match &args.resume {
        Some(stem_path) => Trainer::resume(stem_path, settings)?,
        None => {
            let config = NetworkConfig {
                in_shape: cases[0].moving.extents(),
                stem_channels: stem,
                att_channels: args.att_channels,
                unet_depth: args.unet_depth,
                unet_channels,
                integration_steps: args.int_steps,
                seed: args.seed,
            };
            Trainer::new(&config, settings)?
        }
    };

    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    while trainer.iteration() < args.iters {
        match trainer.step(&samples) {
            Ok(record) => {
                let line = serde_json::to_string(&record)
                    .map_err(|e| Error::data(format!("record encoding: {e}")))?;
                writeln!(out, "{line}")?;
                if args.save_every > 0 && record.iter % args.save_every == 0 {
                    trainer.save(&args.out)?;
                }
            }
            Err(e @ Error::Numeric(_)) => {
                // Parameters only change after a fully finite step, so this
                // snapshot is the last good state.
                trainer.save(&args.out)?;
                return Err(e);
            }
            Err(e) => return Err(e),
        }
    }
    trainer.save(&args.out)
}
