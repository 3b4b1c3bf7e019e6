//! Frozen oracles for the training loop: identity NCC at the start, descent
//! over a real run, bit-exact resume and rerun determinism, sequential ==
//! parallel batches, moment checkpointing, and numeric failure reporting.

use std::collections::HashSet;
use std::fs;

use coreg::losses::ncc_loss;
use coreg::regnet::NetworkConfig;
use coreg::tensor::{Tape, Value};
use coreg::train::{eval_mean_ncc, samples_from_cases, TrainSettings, Trainer};
use coreg::volio::{checkpoint_load, generate_gt_pair, SynthCase};
use coreg::Error;

const SPACING: [f64; 3] = [1.5, 1.5, 3.15];

fn small_config(seed: u64) -> NetworkConfig {
    NetworkConfig {
        in_shape: [16, 16, 8],
        stem_channels: [4, 8],
        att_channels: 8,
        unet_depth: 2,
        unet_channels: vec![8, 8],
        integration_steps: 7,
        seed,
    }
}

fn small_cases(n: u64) -> Vec<SynthCase> {
    (0..n).map(|s| generate_gt_pair(s, [16, 16, 8], SPACING, 2.0).unwrap()).collect()
}

fn settings(seed: u64) -> TrainSettings {
    TrainSettings { seed, ..TrainSettings::default() }
}

fn direct_ncc(a: &Value<f32>, b: &Value<f32>) -> f64 {
    let mut t = Tape::<f32>::new();
    let wa = t.leaf(a.clone(), false).unwrap();
    let wb = t.leaf(b.clone(), false).unwrap();
    let out = ncc_loss(&mut t, wa, wb).unwrap();
    t.scalar(out.loss) as f64
}

#[test]
fn settings_validation_rejects_bad_values() {
    for s in [
        TrainSettings { batch: 0, ..TrainSettings::default() },
        TrainSettings { lr: 0.0, ..TrainSettings::default() },
        TrainSettings { lr: f64::NAN, ..TrainSettings::default() },
        TrainSettings { threads: 0, ..TrainSettings::default() },
    ] {
        assert!(matches!(Trainer::new(&small_config(0), s), Err(Error::Usage(_))));
    }
}

#[test]
fn both_directions_become_samples() {
    let cases = small_cases(3);
    let samples = samples_from_cases(&cases);
    assert_eq!(samples.len(), 6);
    assert_eq!(samples[0].moving, samples[1].fixed);
    assert_eq!(samples[0].fixed, samples[1].moving);
}

#[test]
fn first_record_reports_the_identity_ncc() {
    // Fresh heads predict mu = 0 with variance e^-10, so the first forward
    // pass warps by at most a hair of sampling noise: the recorded NCC sits
    // on top of the plain moving-vs-fixed NCC.
    let cases = small_cases(1);
    let samples = samples_from_cases(&cases);
    let mut trainer = Trainer::new(&small_config(7), settings(7)).unwrap();
    let record = trainer.step(&samples).unwrap();

    let expected = direct_ncc(&samples[0].moving, &samples[0].fixed);
    let swapped = direct_ncc(&samples[0].fixed, &samples[0].moving);
    assert_eq!(expected, swapped, "NCC is symmetric, either draw works");
    assert_eq!(record.iter, 1);
    assert!(
        (record.ncc - expected).abs() < 5e-3,
        "recorded {} vs identity {expected}",
        record.ncc
    );
    assert!(record.loss.is_finite() && record.kl.is_finite());
}

#[test]
fn records_serialize_with_the_pinned_fields() {
    let cases = small_cases(1);
    let samples = samples_from_cases(&cases);
    let mut trainer = Trainer::new(&small_config(3), settings(3)).unwrap();
    let record = trainer.step(&samples).unwrap();
    let json = serde_json::to_value(&record).unwrap();
    let mut keys: Vec<&str> = json.as_object().unwrap().keys().map(|s| s.as_str()).collect();
    keys.sort_unstable();
    assert_eq!(keys, vec!["iter", "kl", "loss", "ncc"]);
}

#[test]
fn eval_on_fresh_weights_equals_the_direct_ncc() {
    // Mean-mode inference on zero heads is the exact identity warp, so the
    // evaluation NCC must equal the direct computation bit for bit.
    let cases = small_cases(2);
    let samples = samples_from_cases(&cases);
    let trainer = Trainer::new(&small_config(1), settings(1)).unwrap();
    let eval = eval_mean_ncc(trainer.params(), &samples).unwrap();
    let direct: f64 =
        samples.iter().map(|s| direct_ncc(&s.moving, &s.fixed)).sum::<f64>() / samples.len() as f64;
    assert_eq!(eval, direct);
}

#[test]
fn training_descends_on_a_small_problem() {
    let cases: Vec<SynthCase> =
        (0..8).map(|s| generate_gt_pair(s, [32, 32, 16], SPACING, 3.0).unwrap()).collect();
    let samples = samples_from_cases(&cases);
    let mut trainer = Trainer::new(&NetworkConfig::default(), settings(11)).unwrap();
    let mut losses = Vec::new();
    for _ in 0..200 {
        losses.push(trainer.step(&samples).unwrap().loss);
    }
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail < head, "smoothed loss went from {head} to {tail}");
}

#[test]
fn resume_is_bit_exact_and_reruns_are_deterministic() {
    let cases = small_cases(4);
    let samples = samples_from_cases(&cases);
    let dir = tempfile::tempdir().unwrap();

    let run = |n: u64| {
        let mut t = Trainer::new(&small_config(5), settings(5)).unwrap();
        for _ in 0..n {
            t.step(&samples).unwrap();
        }
        t
    };

    let straight = dir.path().join("straight");
    run(6).save(&straight).unwrap();
    let again = dir.path().join("again");
    run(6).save(&again).unwrap();
    for ext in ["json", "bin"] {
        assert_eq!(
            fs::read(straight.with_extension(ext)).unwrap(),
            fs::read(again.with_extension(ext)).unwrap(),
            "rerun produced different {ext}"
        );
    }

    let part = dir.path().join("part");
    run(4).save(&part).unwrap();
    let mut resumed = Trainer::resume(&part, settings(5)).unwrap();
    assert_eq!(resumed.iteration(), 4);
    resumed.step(&samples).unwrap();
    resumed.step(&samples).unwrap();
    let rejoined = dir.path().join("rejoined");
    resumed.save(&rejoined).unwrap();
    for ext in ["json", "bin"] {
        assert_eq!(
            fs::read(straight.with_extension(ext)).unwrap(),
            fs::read(rejoined.with_extension(ext)).unwrap(),
            "resumed run diverged in {ext}"
        );
    }
}

#[test]
fn parallel_batches_match_sequential_bitwise() {
    let cases = small_cases(3);
    let samples = samples_from_cases(&cases);
    let finish = |threads: usize| {
        let mut s = settings(9);
        s.threads = threads;
        s.batch = 4;
        let mut t = Trainer::new(&small_config(9), s).unwrap();
        for _ in 0..3 {
            t.step(&samples).unwrap();
        }
        let mut flat = Vec::new();
        t.params().visit(&mut |_, v| flat.extend(v.data().iter().map(|x| x.to_bits())));
        flat
    };
    assert_eq!(finish(1), finish(4));
}

#[test]
fn numeric_blowup_is_an_error_not_a_panic() {
    let cases = small_cases(1);
    let mut samples = samples_from_cases(&cases);
    let huge = Value::new(
        samples[0].moving.dims().to_vec(),
        vec![1.0e20; samples[0].moving.data().len()],
    )
    .unwrap();
    for s in &mut samples {
        s.moving = huge.clone();
        s.fixed = huge.clone();
    }
    let mut trainer = Trainer::new(&small_config(2), settings(2)).unwrap();
    assert!(matches!(trainer.step(&samples), Err(Error::Numeric(_))));
}

#[test]
fn checkpoints_carry_optimizer_moments_for_every_parameter() {
    let cases = small_cases(1);
    let samples = samples_from_cases(&cases);
    let mut trainer = Trainer::new(&small_config(4), settings(4)).unwrap();
    trainer.step(&samples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("ck");
    trainer.save(&stem).unwrap();

    let (meta, tensors) = checkpoint_load(&stem).unwrap();
    assert_eq!(meta.iteration, 1);
    assert_eq!(meta.seed, 4);
    assert_eq!(meta.config, small_config(4));

    let names: HashSet<&str> = tensors.iter().map(|(n, _)| n.as_str()).collect();
    let mut param_names = Vec::new();
    trainer.params().visit(&mut |n, _| param_names.push(n.to_string()));
    assert_eq!(tensors.len(), 3 * param_names.len());
    for p in &param_names {
        for full in [p.clone(), format!("opt.m.{p}"), format!("opt.v.{p}")] {
            assert!(names.contains(full.as_str()), "checkpoint lacks {full}");
        }
    }
}

#[test]
fn resume_rejects_a_checkpoint_missing_tensors() {
    let cases = small_cases(1);
    let samples = samples_from_cases(&cases);
    let mut trainer = Trainer::new(&small_config(6), settings(6)).unwrap();
    trainer.step(&samples).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let stem = dir.path().join("ck");
    trainer.save(&stem).unwrap();

    let json = fs::read_to_string(stem.with_extension("json")).unwrap();
    let tampered = json.replace("\"name\":\"opt.m.stem.0.weight\"", "\"name\":\"opt.m.stem.0.w8\"");
    assert_ne!(json, tampered);
    fs::write(stem.with_extension("json"), tampered).unwrap();
    match Trainer::resume(&stem, settings(6)) {
        Err(Error::Data(msg)) => {
            assert!(msg.contains("opt.m.stem.0.w"), "got {msg:?}")
        }
        Err(other) => panic!("wrong error kind: {other:?}"),
        Ok(_) => panic!("tampered checkpoint accepted"),
    }
}

#[test]
fn training_uses_batch_member_count_not_case_count() {
    // A batch larger than the sample list must still work: sampling is with
    // replacement.
    let cases = small_cases(1);
    let samples = samples_from_cases(&cases);
    let mut s = settings(8);
    s.batch = 5;
    let mut trainer = Trainer::new(&small_config(8), s).unwrap();
    let record = trainer.step(&samples).unwrap();
    assert!(record.loss.is_finite());
    assert!(matches!(trainer.step(&[]), Err(Error::Usage(_))));
}
