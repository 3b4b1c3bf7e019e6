//! Single-pair registration: warped volume plus full-resolution flow.

use std::path::PathBuf;

use clap::Args;

use coreg::regnet::SampleMode;
use coreg::train::load_params;
use coreg::volio::{read_volume, write_volume};
use coreg::Result;

use crate::common::{precision_from_env, run_network, Precision};

#[derive(Args)]
pub struct RegisterArgs {
    /// Checkpoint stem (expects <stem>.json and <stem>.bin).
    #[arg(long)]
    pub ckpt: PathBuf,

    /// Moving volume stem.
    #[arg(long)]
    pub moving: PathBuf,

    /// Fixed volume stem.
    #[arg(long)]
    pub fixed: PathBuf,

    /// Output stem for the warped moving volume.
    #[arg(long)]
    pub out_warped: PathBuf,

    /// Output stem for the displacement field (3 channels, voxel units).
    #[arg(long)]
    pub out_flow: PathBuf,

    /// Use the posterior mean velocity (deterministic, the default).
    #[arg(long, conflicts_with = "sample")]
    pub mean: bool,

    /// Draw one posterior velocity sample instead of the mean.
    #[arg(long)]
    pub sample: bool,

    /// Seed for --sample; ignored under --mean.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn run(args: RegisterArgs) -> Result<()> {
    let mode = if args.sample { SampleMode::Sample } else { SampleMode::Mean };
    let (_, params) = load_params(&args.ckpt)?;
    let moving = read_volume(&args.moving)?;
    let fixed = read_volume(&args.fixed)?;
    let out = match precision_from_env()? {
        Precision::F32 => run_network(&params, &moving, &fixed, mode, args.seed, false)?,
        Precision::F64 => {
            run_network(&params.widen()?, &moving, &fixed, mode, args.seed, false)?
        }
    };
    write_volume(&out.warped, &args.out_warped)?;
    write_volume(&out.flow, &args.out_flow)
}
