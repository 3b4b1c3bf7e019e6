//! Finite-difference verification of the autodiff backward passes.

use clap::Args;

use coreg::gradcheck::run_gradcheck;
use coreg::tensor::OpKind;
use coreg::{Error, Result};

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Worst tolerated relative error per check.
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,

    /// Test hook: scale the named op kind's backward pass so the suite must
    /// fail. Accepts snake_case kinds like conv3d or grid_sample.
    #[arg(long, hide = true, value_parser = parse_op_kind)]
    pub perturb: Option<OpKind>,
}

fn snake_name(kind: OpKind) -> String {
    let camel = format!("{kind:?}");
    let mut out = String::with_capacity(camel.len() + 4);
    for (i, ch) in camel.chars().enumerate() {
        if ch.is_ascii_uppercase() {
            if i > 0 {
                out.push('_');
            }
            out.push(ch.to_ascii_lowercase());
        } else {
            out.push(ch);
        }
    }
    out
}

fn parse_op_kind(s: &str) -> std::result::Result<OpKind, String> {
    OpKind::ALL
        .iter()
        .copied()
        .find(|&k| snake_name(k) == s)
        .ok_or_else(|| format!("unknown op kind {s:?}"))
}

pub fn run(args: GradcheckArgs) -> Result<()> {
    let report = run_gradcheck(args.seed, args.tol, args.perturb)?;
    for c in &report.checks {
        let verdict = if c.pass { "pass" } else { "FAIL" };
        println!("{:<24} {:>12.3e}  {verdict}", c.name, c.worst_rel_err);
    }
    if report.all_pass() {
        Ok(())
    } else {
        Err(Error::numeric(format!(
            "gradient check failed for: {}",
            report.failures().join(", ")
        )))
    }
}
