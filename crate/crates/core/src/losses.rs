//! Training objective: global normalized cross-correlation similarity,
//! closed-form KL between the velocity posterior and a graph-Laplacian
//! smoothness prior, and their weighted total.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::regnet::FlowDistribution;
use crate::tensor::{Axis, GridDims, Real, Tape, TensorId, Value};

/// Variance floor guarding the correlation denominator.
const VAR_FLOOR: f64 = 1e-8;

/// Objective weights. `lambda_sim` and `lambda_kl` scale the similarity
/// and regularization terms; `prior_lambda` is the precision scale of the
/// smoothness prior.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_sim: f64,
    pub lambda_kl: f64,
    pub prior_lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_sim: 20.0, lambda_kl: 0.1, prior_lambda: 10.0 }
    }
}

impl LossWeights {
    /// Strict positivity check used by the training entry points. The term
    /// weights may still be zeroed individually when calling `total_loss`
    /// directly, so ablations stay expressible.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_sim", self.lambda_sim),
            ("lambda_kl", self.lambda_kl),
            ("prior_lambda", self.prior_lambda),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return Err(Error::usage(format!(
                    "loss weight {name} must be finite and positive, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Similarity loss plus the zero-variance diagnostic. When either image is
/// constant the correlation is undefined, so the loss is pinned to the
/// uncorrelated value 1 with no gradient instead of dividing by the floor.
#[derive(Debug, Clone, Copy)]
pub struct NccOutcome {
    pub loss: TensorId,
    pub degenerate: bool,
}

/// One minus the global Pearson correlation between the two volumes.
pub fn ncc_loss<T: Real>(
    tape: &mut Tape<T>,
    warped: TensorId,
    fixed: TensorId,
) -> Result<NccOutcome> {
    if tape.dims(warped) != tape.dims(fixed) {
        return Err(Error::shape(format!(
            "similarity inputs differ: {:?} vs {:?}",
            tape.dims(warped),
            tape.dims(fixed)
        )));
    }
    let wm = tape.mean_all(warped)?;
    let fm = tape.mean_all(fixed)?;
    let wc = tape.sub(warped, wm)?;
    let fc = tape.sub(fixed, fm)?;
    let wsq = tape.mul(wc, wc)?;
    let fsq = tape.mul(fc, fc)?;
    let ssw = tape.sum_all(wsq)?;
    let ssf = tape.sum_all(fsq)?;
    if tape.scalar(ssw).to_f64() <= VAR_FLOOR || tape.scalar(ssf).to_f64() <= VAR_FLOOR {
        let loss = tape.constant(Value::scalar(T::of(1.0)))?;
        return Ok(NccOutcome { loss, degenerate: true });
    }
    let cross = tape.mul(wc, fc)?;
    let num = tape.sum_all(cross)?;
    let sw = tape.sqrt(ssw)?;
    let sf = tape.sqrt(ssf)?;
    let prod = tape.mul(sw, sf)?;
    let den = tape.affine(prod, 1.0, VAR_FLOOR)?;
    let corr = tape.div(num, den)?;
    let loss = tape.affine(corr, -1.0, 1.0)?;
    Ok(NccOutcome { loss, degenerate: false })
}

/// Per-voxel count of in-bounds 6-neighbours, tiled across channels.
fn degree_map<T: Real>(gd: GridDims) -> Value<T> {
    let mut v = Value::grid(gd);
    for z in 0..gd.d {
        for y in 0..gd.h {
            for x in 0..gd.w {
                let deg = usize::from(x > 0)
                    + usize::from(x + 1 < gd.w)
                    + usize::from(y > 0)
                    + usize::from(y + 1 < gd.h)
                    + usize::from(z > 0)
                    + usize::from(z + 1 < gd.d);
                for c in 0..gd.c {
                    v.data_mut()[gd.at(c, x, y, z)] = T::of(deg as f64);
                }
            }
        }
    }
    v
}

/// Truncated KL between the diagonal posterior and the smoothness prior
/// with precision `prior_lambda * L`, L the 6-neighbour graph Laplacian
/// applied per channel:
/// 0.5 * (lambda * (sum_j d_j sigma_j^2 + sum_edges (mu_i - mu_j)^2)
///        - sum_j log sigma_j^2),
/// parameter-free additive constants dropped.
pub fn kl_loss<T: Real>(
    tape: &mut Tape<T>,
    dist: &FlowDistribution,
    prior_lambda: f64,
) -> Result<TensorId> {
    if !prior_lambda.is_finite() || prior_lambda <= 0.0 {
        return Err(Error::usage(format!(
            "prior_lambda must be finite and positive, got {prior_lambda}"
        )));
    }
    let gd = dist.dims();
    let sigma2 = tape.exp(dist.log_var)?;
    let degrees = tape.constant(degree_map::<T>(gd))?;
    let weighted = tape.mul(degrees, sigma2)?;
    let mut penalty = tape.sum_all(weighted)?;
    for axis in Axis::ALL {
        let extent = match axis {
            Axis::X => gd.w,
            Axis::Y => gd.h,
            Axis::Z => gd.d,
        };
        if extent < 2 {
            continue;
        }
        let diff = tape.shift_diff(dist.mu, axis)?;
        let sq = tape.mul(diff, diff)?;
        let edges = tape.sum_all(sq)?;
        penalty = tape.add(penalty, edges)?;
    }
    let scaled = tape.affine(penalty, prior_lambda, 0.0)?;
    let logs = tape.sum_all(dist.log_var)?;
    let inner = tape.sub(scaled, logs)?;
    tape.affine(inner, 0.5, 0.0)
}

/// Weighted objective with the per-term breakdown kept addressable for
/// the training log.
#[derive(Debug, Clone, Copy)]
pub struct TotalLoss {
    pub total: TensorId,
    pub ncc: TensorId,
    pub kl: TensorId,
    pub degenerate: bool,
}

/// lambda_sim * ncc_loss + lambda_kl * kl_loss. Term weights may be zero
/// here (ablations); the prior precision may not.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    warped: TensorId,
    fixed: TensorId,
    dist: &FlowDistribution,
    weights: &LossWeights,
) -> Result<TotalLoss> {
    for (name, v) in [("lambda_sim", weights.lambda_sim), ("lambda_kl", weights.lambda_kl)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::usage(format!(
                "loss weight {name} must be finite and non-negative, got {v}"
            )));
        }
    }
    let sim = ncc_loss(tape, warped, fixed)?;
    let kl = kl_loss(tape, dist, weights.prior_lambda)?;
    let ws = tape.affine(sim.loss, weights.lambda_sim, 0.0)?;
    let wk = tape.affine(kl, weights.lambda_kl, 0.0)?;
    let total = tape.add(ws, wk)?;
    Ok(TotalLoss { total, ncc: sim.loss, kl, degenerate: sim.degenerate })
}
