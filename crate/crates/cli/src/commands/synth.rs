//! Dataset synthesis: phantom pairs with known deformations, one directory
//! per case plus a manifest the other subcommands can discover cases from.

use std::path::PathBuf;

use clap::Args;

use coreg::volio::{generate_gt_pair, save_case};
use coreg::Result;

use crate::common::{
    parse_dims, parse_spacing, write_manifest, CaseEntry, DatasetManifest,
};

#[derive(Args)]
pub struct SynthArgs {
    /// Base seed; case k uses seed + k.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Number of cases to generate.
    #[arg(long, default_value_t = 1)]
    pub count: usize,

    /// Volume extents as WxHxD.
    #[arg(long, value_parser = parse_dims, default_value = "32x32x16")]
    pub dims: [usize; 3],

    /// Voxel spacing in mm as sx,sy,sz.
    #[arg(long, value_parser = parse_spacing, default_value = "1,1,1")]
    pub spacing: [f64; 3],

    /// Peak ground-truth velocity magnitude in half-resolution voxels; the
    /// stored full-resolution flow peaks near twice this.
    #[arg(long, default_value_t = 2.0)]
    pub max_disp: f64,

    /// Output directory; case_<k> subdirectories are created inside.
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(args: SynthArgs) -> Result<()> {
    std::fs::create_dir_all(&args.out)?;
    let mut entries = Vec::with_capacity(args.count);
    for k in 0..args.count {
        let name = format!("case_{k}");
        let case_seed = args.seed.wrapping_add(k as u64);
        let case = generate_gt_pair(case_seed, args.dims, args.spacing, args.max_disp)?;
        save_case(&args.out.join(&name), &case)?;
        println!("{{\"case\":\"{name}\",\"seed\":{case_seed}}}");
        entries.push(CaseEntry { name, seed: case_seed });
    }
    let manifest = DatasetManifest {
        seed: args.seed,
        dims: args.dims,
        spacing_mm: args.spacing,
        max_disp: args.max_disp,
        cases: entries,
    };
    write_manifest(&args.out, &manifest)
}
