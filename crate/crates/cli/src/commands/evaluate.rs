//! Dataset evaluation: mean-mode registration per case, label overlap and
//! deformation-quality metrics, aggregated as mean and standard deviation.

use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use coreg::metrics::{evaluate_pair, warp_labels};
use coreg::regnet::SampleMode;
use coreg::tensor::Value;
use coreg::train::load_params;
use coreg::volio::SynthCase;
use coreg::{Error, Result};

use crate::common::{load_dataset, precision_from_env, run_network, Precision};

#[derive(Args)]
pub struct EvaluateArgs {
    /// Checkpoint stem.
    #[arg(long)]
    pub ckpt: PathBuf,

    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,

    /// Report output path (JSON).
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Serialize)]
struct CaseRow {
    name: String,
    lvbp_dice: f64,
    lvm_dice: f64,
    rv_dice: f64,
    avg_dice: f64,
    hd_mm: f64,
    foldings: usize,
    jacobian_min: f64,
}

#[derive(Serialize)]
struct Moments {
    mean: f64,
    sd: f64,
}

#[derive(Serialize)]
struct Aggregate {
    lvbp_dice: Moments,
    lvm_dice: Moments,
    rv_dice: Moments,
    avg_dice: Moments,
    hd_mm: Moments,
    foldings: Moments,
    jacobian_min: Moments,
}

#[derive(Serialize)]
struct Report {
    cases: Vec<CaseRow>,
    aggregate: Aggregate,
}

/// Mean and sample standard deviation (0 for a single case).
fn moments(xs: &[f64]) -> Moments {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Moments { mean, sd }
}

fn eval_case(
    params: &coreg::regnet::RegNetParams<f32>,
    precision: Precision,
    case: &SynthCase,
    name: &str,
) -> Result<CaseRow> {
    let out = match precision {
        Precision::F32 => run_network(params, &case.moving, &case.fixed, SampleMode::Mean, 0, false)?,
        Precision::F64 => {
            run_network(&params.widen()?, &case.moving, &case.fixed, SampleMode::Mean, 0, false)?
        }
    };
    let disp: Value<f64> = out.flow.to_value();
    let warped_labels = warp_labels(&case.moving_labels, &disp)?;
    let report = evaluate_pair(&warped_labels, &case.fixed_labels, &disp)?;
    Ok(CaseRow {
        name: name.to_string(),
        lvbp_dice: report.lvbp_dice,
        lvm_dice: report.lvm_dice,
        rv_dice: report.rv_dice,
        avg_dice: report.avg_dice,
        hd_mm: report.hd_mm,
        foldings: report.foldings,
        jacobian_min: report.jacobian_min,
    })
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let precision = precision_from_env()?;
    let (_, params) = load_params(&args.ckpt)?;
    let (manifest, cases) = load_dataset(&args.data)?;
    if cases.is_empty() {
        return Err(Error::usage("dataset holds no cases"));
    }

    let mut rows = Vec::with_capacity(cases.len());
    for (entry, case) in manifest.cases.iter().zip(&cases) {
        let row = eval_case(&params, precision, case, &entry.name).map_err(|e| {
            let msg = format!("case {}: {e}", entry.name);
            match e {
                Error::Numeric(_) => Error::numeric(msg),
                Error::Usage(_) => Error::usage(msg),
                _ => Error::data(msg),
            }
        })?;
        rows.push(row);
    }

    let col = |f: &dyn Fn(&CaseRow) -> f64| -> Vec<f64> { rows.iter().map(f).collect() };
    let aggregate = Aggregate {
        lvbp_dice: moments(&col(&|r| r.lvbp_dice)),
        lvm_dice: moments(&col(&|r| r.lvm_dice)),
        rv_dice: moments(&col(&|r| r.rv_dice)),
        avg_dice: moments(&col(&|r| r.avg_dice)),
        hd_mm: moments(&col(&|r| r.hd_mm)),
        foldings: moments(&col(&|r| r.foldings as f64)),
        jacobian_min: moments(&col(&|r| r.jacobian_min)),
    };

    let aggregate_line = serde_json::to_string(&aggregate)
        .map_err(|e| Error::data(format!("report encoding: {e}")))?;
    println!("{aggregate_line}");

    let report = Report { cases: rows, aggregate };
    let bytes = serde_json::to_vec_pretty(&report)
        .map_err(|e| Error::data(format!("report encoding: {e}")))?;
    std::fs::write(&args.report, bytes)?;
    Ok(())
}
