//! Attention introspection: sigmoid gate maps, exchanged projections, and
//! the learned blend factors, at the attention grid's native resolution.

use std::path::PathBuf;

use clap::Args;

use coreg::regnet::SampleMode;
use coreg::train::load_params;
use coreg::volio::{read_volume, write_volume};
use coreg::{Error, Result};

use crate::common::{precision_from_env, run_network, Precision};

#[derive(Args)]
pub struct DumpAttentionArgs {
    /// Checkpoint stem.
    #[arg(long)]
    pub ckpt: PathBuf,

    /// Moving volume stem.
    #[arg(long)]
    pub moving: PathBuf,

    /// Fixed volume stem.
    #[arg(long)]
    pub fixed: PathBuf,

    /// Output directory for gate_mov, gate_fix, o_mov, o_fix, alphas.txt.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: DumpAttentionArgs) -> Result<()> {
    let (_, params) = load_params(&args.ckpt)?;
    let moving = read_volume(&args.moving)?;
    let fixed = read_volume(&args.fixed)?;
    let out = match precision_from_env()? {
        Precision::F32 => run_network(&params, &moving, &fixed, SampleMode::Mean, 0, true)?,
        Precision::F64 => {
            run_network(&params.widen()?, &moving, &fixed, SampleMode::Mean, 0, true)?
        }
    };
    let att = out.attention.ok_or_else(|| Error::usage("attention pass produced no maps"))?;
    std::fs::create_dir_all(&args.out)?;
    write_volume(&att.gate_mov, &args.out.join("gate_mov"))?;
    write_volume(&att.gate_fix, &args.out.join("gate_fix"))?;
    write_volume(&att.o_mov, &args.out.join("o_mov"))?;
    write_volume(&att.o_fix, &args.out.join("o_fix"))?;
    let manifest =
        format!("alpha_mov = {:?}\nalpha_fix = {:?}\n", att.alpha_mov, att.alpha_fix);
    std::fs::write(args.out.join("alphas.txt"), manifest)?;
    Ok(())
}
