//! The training loop. Weights live on the host; each batch member gets a
//! fresh tape, a forward pass with a sampled velocity, and a backward pass.
//! Member gradients are averaged in member order, so a run is reproducible
//! from (seed, iteration) alone and a resumed run continues bit for bit.
//! Everything trains in f32: checkpoints store the exact working precision.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::losses::{ncc_loss, total_loss, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::regnet::{register_pair, AttentionPath, NetworkConfig, RegNetParams, SampleMode};
use crate::rng::{derive, derive1, derive2, Stream};
use crate::tensor::{Tape, Value};
use crate::volio::{checkpoint_load, checkpoint_save, CheckpointMeta, SynthCase, Volume};
use crate::{Error, Result};

use rand::Rng;

#[derive(Debug, Clone)]
pub struct TrainSettings {
    pub lr: f64,
    pub batch: usize,
    pub weights: LossWeights,
    pub seed: u64,
    /// Upper bound on concurrently evaluated batch members; 1 = sequential.
    /// The gradient reduction is order-fixed either way.
    pub threads: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            lr: 1e-4,
            batch: 2,
            weights: LossWeights::default(),
            seed: 0,
            threads: 1,
        }
    }
}

impl TrainSettings {
    fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::usage(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.batch < 1 {
            return Err(Error::usage("batch size must be at least 1"));
        }
        if self.threads < 1 {
            return Err(Error::usage("thread count must be at least 1"));
        }
        self.weights.validate()
    }
}

/// One line of training telemetry; serialized as-is into the iteration log.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainRecord {
    pub iter: u64,
    pub loss: f64,
    pub ncc: f64,
    pub kl: f64,
}

/// A single registration direction in working precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub moving: Value<f32>,
    pub fixed: Value<f32>,
}

fn working_value(v: &Volume) -> Value<f32> {
    v.to_value_f32()
}

/// Both directions of every case become independent samples, in case order.
pub fn samples_from_cases(cases: &[SynthCase]) -> Vec<TrainSample> {
    let mut samples = Vec::with_capacity(2 * cases.len());
    for case in cases {
        let moving = working_value(&case.moving);
        let fixed = working_value(&case.fixed);
        samples.push(TrainSample { moving: moving.clone(), fixed: fixed.clone() });
        samples.push(TrainSample { moving: fixed, fixed: moving });
    }
    samples
}

struct MemberOutcome {
    grads: Vec<Value<f32>>,
    total: f64,
    ncc: f64,
    kl: f64,
}

/// Forward + backward for one batch member on its own tape.
fn member_pass(
    params: &RegNetParams<f32>,
    sample: &TrainSample,
    weights: &LossWeights,
    seed: u64,
    iteration: u64,
    member: u64,
) -> Result<MemberOutcome> {
    let mut tape = Tape::<f32>::new();
    let net = params.push(&mut tape, true)?;
    let moving = tape.constant(sample.moving.clone())?;
    let fixed = tape.constant(sample.fixed.clone())?;
    let mut noise = derive2(seed, Stream::VelocityNoise, iteration, member);
    let reg = register_pair(
        &mut tape,
        &net,
        moving,
        fixed,
        SampleMode::Sample,
        AttentionPath::Full,
        &mut noise,
    )?;
    let loss = total_loss(&mut tape, reg.warped, fixed, &reg.dist, weights)?;
    tape.backward(loss.total)?;

    let mut grads = Vec::new();
    for id in net.leaf_ids() {
        grads.push(Value::new(tape.dims(id).to_vec(), tape.grad(id)?.to_vec())?);
    }
    Ok(MemberOutcome {
        grads,
        total: tape.scalar(loss.total) as f64,
        ncc: tape.scalar(loss.ncc) as f64,
        kl: tape.scalar(loss.kl) as f64,
    })
}

pub struct Trainer {
    params: RegNetParams<f32>,
    opt: Adam<f32>,
    settings: TrainSettings,
    iteration: u64,
}

impl Trainer {
    pub fn new(config: &NetworkConfig, settings: TrainSettings) -> Result<Self> {
        settings.validate()?;
        let params = RegNetParams::init(config)?;
        let opt = Adam::new(AdamConfig { lr: settings.lr, ..AdamConfig::default() })?;
        Ok(Trainer { params, opt, settings, iteration: 0 })
    }

    pub fn params(&self) -> &RegNetParams<f32> {
        &self.params
    }

    /// Completed iterations; also the record number of the next step.
    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn seed(&self) -> u64 {
        self.settings.seed
    }

    /// One optimization step: draw a batch, average member gradients in
    /// member order, apply Adam. Any member failure leaves the weights
    /// untouched.
    pub fn step(&mut self, samples: &[TrainSample]) -> Result<TrainRecord> {
        if samples.is_empty() {
            return Err(Error::usage("training needs at least one sample"));
        }
        let k = self.iteration;
        let mut picker = derive1(self.settings.seed, Stream::CaseSampling, k);
        let picks: Vec<usize> =
            (0..self.settings.batch).map(|_| picker.random_range(0..samples.len())).collect();

        let outcomes = self.run_members(samples, &picks, k)?;

        let batch = self.settings.batch as f64;
        let mut mean_grads = outcomes[0].grads.clone();
        for o in &outcomes[1..] {
            for (acc, g) in mean_grads.iter_mut().zip(&o.grads) {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
        }
        let inv = (1.0 / batch) as f32;
        for g in &mut mean_grads {
            for a in g.data_mut() {
                *a *= inv;
            }
        }

        let mut flat: Vec<Value<f32>> = Vec::new();
        self.params.visit(&mut |_, v| flat.push(v.clone()));
        {
            let mut refs: Vec<&mut Value<f32>> = flat.iter_mut().collect();
            self.opt.step(&mut refs, &mean_grads)?;
        }
        let mut updated = flat.into_iter();
        self.params.visit_mut(&mut |_, v| *v = updated.next().expect("visit order is stable"));

        self.iteration = k + 1;
        Ok(TrainRecord {
            iter: self.iteration,
            loss: outcomes.iter().map(|o| o.total).sum::<f64>() / batch,
            ncc: outcomes.iter().map(|o| o.ncc).sum::<f64>() / batch,
            kl: outcomes.iter().map(|o| o.kl).sum::<f64>() / batch,
        })
    }

    fn run_members(
        &self,
        samples: &[TrainSample],
        picks: &[usize],
        iteration: u64,
    ) -> Result<Vec<MemberOutcome>> {
        let weights = &self.settings.weights;
        let seed = self.settings.seed;
        if self.settings.threads == 1 || picks.len() == 1 {
            return picks
                .iter()
                .enumerate()
                .map(|(m, &idx)| {
                    member_pass(&self.params, &samples[idx], weights, seed, iteration, m as u64)
                })
                .collect();
        }
        let mut outcomes = Vec::with_capacity(picks.len());
        for (chunk_start, chunk) in
            picks.chunks(self.settings.threads).enumerate().map(|(c, ch)| (c * self.settings.threads, ch))
        {
            let chunk_results: Vec<Result<MemberOutcome>> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .enumerate()
                    .map(|(off, &idx)| {
                        let m = (chunk_start + off) as u64;
                        let params = &self.params;
                        let sample = &samples[idx];
                        scope.spawn(move || {
                            member_pass(params, sample, weights, seed, iteration, m)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("member thread panicked")).collect()
            });
            for r in chunk_results {
                outcomes.push(r?);
            }
        }
        Ok(outcomes)
    }

    /// Checkpoint weights plus optimizer moments (`opt.m.*`, `opt.v.*`).
    pub fn save(&self, stem: &Path) -> Result<()> {
        let meta =
            CheckpointMeta::new(self.iteration, self.settings.seed, self.params.config.clone());
        let mut tensors: Vec<(String, Value<f32>)> = Vec::new();
        self.params.visit(&mut |name, v| tensors.push((name.to_string(), v.clone())));
        let n = tensors.len();
        let (m, v) = (self.opt.first_moments(), self.opt.second_moments());
        for which in 0..2 {
            let (tag, moments) = if which == 0 { ("m", m) } else { ("v", v) };
            for i in 0..n {
                let (name, param) = &tensors[i];
                let moment = if moments.is_empty() {
                    Value::zeros(param.dims().to_vec())
                } else {
                    moments[i].clone()
                };
                tensors.push((format!("opt.{tag}.{name}"), moment));
            }
        }
        checkpoint_save(stem, &meta, &tensors)
    }

    /// Rebuild a trainer from a checkpoint. The stored seed and iteration
    /// take over so the continued run equals the uninterrupted one.
    pub fn resume(stem: &Path, mut settings: TrainSettings) -> Result<Trainer> {
        settings.validate()?;
        let (meta, tensors) = checkpoint_load(stem)?;
        let mut by_name: HashMap<String, Value<f32>> = tensors.into_iter().collect();

        let mut params = RegNetParams::<f32>::init(&meta.config)?;
        let mut missing: Vec<String> = Vec::new();
        let mut mismatched: Vec<String> = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        params.visit_mut(&mut |name, value| {
            for (prefix, slot) in
                [("", None), ("opt.m.", Some(&mut m)), ("opt.v.", Some(&mut v))]
            {
                let key = format!("{prefix}{name}");
                match by_name.remove(&key) {
                    Some(t) if t.dims() == value.dims() => match slot {
                        None => *value = t,
                        Some(list) => list.push(t),
                    },
                    Some(_) => mismatched.push(key),
                    None => missing.push(key),
                }
            }
        });
        if !missing.is_empty() {
            return Err(Error::data(format!("checkpoint is missing tensors {missing:?}")));
        }
        if !mismatched.is_empty() {
            return Err(Error::data(format!(
                "checkpoint tensors {mismatched:?} have shapes inconsistent with the config"
            )));
        }
        if !by_name.is_empty() {
            let mut extra: Vec<&String> = by_name.keys().collect();
            extra.sort();
            return Err(Error::data(format!("checkpoint has unexpected tensors {extra:?}")));
        }

        let mut opt = Adam::new(AdamConfig { lr: settings.lr, ..AdamConfig::default() })?;
        opt.restore(meta.iteration, m, v)?;
        settings.seed = meta.seed;
        Ok(Trainer { params, opt, settings, iteration: meta.iteration })
    }
}

/// Network weights from a checkpoint, ignoring optimizer state. For
/// inference paths that never step the optimizer.
pub fn load_params(stem: &Path) -> Result<(CheckpointMeta, RegNetParams<f32>)> {
    let (meta, tensors) = checkpoint_load(stem)?;
    let mut by_name: HashMap<String, Value<f32>> = tensors.into_iter().collect();
    let mut params = RegNetParams::<f32>::init(&meta.config)?;
    let mut missing: Vec<String> = Vec::new();
    let mut mismatched: Vec<String> = Vec::new();
    params.visit_mut(&mut |name, value| match by_name.remove(name) {
        Some(t) if t.dims() == value.dims() => *value = t,
        Some(_) => mismatched.push(name.to_string()),
        None => missing.push(name.to_string()),
    });
    if !missing.is_empty() {
        return Err(Error::data(format!("checkpoint is missing tensors {missing:?}")));
    }
    if !mismatched.is_empty() {
        return Err(Error::data(format!(
            "checkpoint tensors {mismatched:?} have shapes inconsistent with the config"
        )));
    }
    let mut extra: Vec<&String> =
        by_name.keys().filter(|k| !k.starts_with("opt.")).collect();
    if !extra.is_empty() {
        extra.sort();
        return Err(Error::data(format!("checkpoint has unexpected tensors {extra:?}")));
    }
    Ok((meta, params))
}

/// Mean-mode registration NCC averaged over samples: the deterministic
/// held-out quality signal.
pub fn eval_mean_ncc(params: &RegNetParams<f32>, samples: &[TrainSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::usage("evaluation needs at least one sample"));
    }
    let mut sum = 0.0;
    for sample in samples {
        let mut tape = Tape::<f32>::new();
        let net = params.push(&mut tape, false)?;
        let moving = tape.constant(sample.moving.clone())?;
        let fixed = tape.constant(sample.fixed.clone())?;
        let mut unused = derive(0, Stream::VelocityNoise);
        let reg = register_pair(
            &mut tape,
            &net,
            moving,
            fixed,
            SampleMode::Mean,
            AttentionPath::Full,
            &mut unused,
        )?;
        let out = ncc_loss(&mut tape, reg.warped, fixed)?;
        sum += tape.scalar(out.loss) as f64;
    }
    Ok(sum / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_settings_follow_the_recipe() {
        let s = TrainSettings::default();
        assert_eq!(s.lr, 1e-4);
        assert_eq!(s.batch, 2);
        assert_eq!(s.threads, 1);
        assert_eq!(s.weights.lambda_sim, 20.0);
        assert_eq!(s.weights.lambda_kl, 0.1);
    }
}
