use mdcdet_core::checkpoint::{checkpoint_path, Checkpoint};
use mdcdet_core::detector::{BACKBONE_PREFIX, CLASS_BIAS, CLASS_WEIGHT};
use mdcdet_core::synth::{generate_stream, StreamSpec, TaskStream};
use mdcdet_core::trainer::*;
use mdcdet_core::{Error, Tape, Tensor};

fn tiny_stream(seed: u64) -> TaskStream {
    let spec = StreamSpec { train_per_task: 16, eval_per_task: 8, ..StreamSpec::preset(2, 2, seed) };
    generate_stream(&spec).unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        pretrain_epochs: 2,
        epochs: 1,
        batch_size: 4,
        n_units: 4,
        // Low enough that an untrained head produces pseudo-labels.
        delta_bt: 0.3,
        ..TrainConfig::default()
    }
}

fn strict() -> RunOptions {
    RunOptions { test_mode: true, fixed_clock: true }
}

fn rows(t: &Tensor, rows: &[usize]) -> Vec<f64> {
    let d = t.shape()[1..].iter().product::<usize>();
    rows.iter().flat_map(|&r| t.data()[r * d..(r + 1) * d].to_vec()).collect()
}

#[test]
fn second_task_epoch_leaves_frozen_state_bit_identical() {
    let stream = tiny_stream(1);
    let config = tiny_config();
    let pre = pretrain_stream(&stream, &config, strict()).unwrap();
    let first = run_from_pretrained(&pre, &stream, &config, 1, strict(), |_, _, _| Ok(())).unwrap();
    let mut model = first.model;

    let backbone: Vec<(String, Tensor)> = model
        .detector
        .store()
        .iter()
        .filter(|(n, _)| n.starts_with(BACKBONE_PREFIX))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let past = stream.tasks[0].classes.clone();
    let class_w = model.detector.store().by_name(CLASS_WEIGHT).unwrap().clone();
    let class_b = model.detector.store().by_name(CLASS_BIAS).unwrap().clone();
    let pool_before = model.pool.clone().unwrap();

    let logs = train_task(&mut model, &pre.cache, 1, &config, strict()).unwrap();
    assert_eq!(logs.len(), 1);

    for (name, before) in &backbone {
        let after = model.detector.store().by_name(name).unwrap();
        assert_eq!(after.data(), before.data(), "{name} moved");
    }
    let w_after = model.detector.store().by_name(CLASS_WEIGHT).unwrap();
    let b_after = model.detector.store().by_name(CLASS_BIAS).unwrap();
    assert_eq!(rows(w_after, &past), rows(&class_w, &past));
    assert_eq!(rows(b_after, &past), rows(&class_b, &past));
    let current = &stream.tasks[1].classes;
    assert_ne!(rows(w_after, current), rows(&class_w, current), "current rows should train");

    let pool = model.pool.as_ref().unwrap();
    let chunk0 = pool.chunk_bounds(0).unwrap();
    let (u0, u1) = (pool_before.units(), pool.units());
    let n = pool.shape().n_units;
    for (j, (a, b)) in u0.data().iter().zip(u1.data()).enumerate() {
        if chunk0.contains(&(j % n)) {
            assert_eq!(a, b, "frozen unit entry {j} moved");
        }
    }
    assert_eq!(
        rows(pool_before.keys(), &chunk0.clone().collect::<Vec<_>>()),
        rows(pool.keys(), &chunk0.collect::<Vec<_>>())
    );
}

#[test]
fn future_classes_have_exactly_zero_probability() {
    let stream = tiny_stream(2);
    let config = tiny_config();
    let pre = pretrain_stream(&stream, &config, strict()).unwrap();
    let model = Model::assemble(pre.detector.clone(), &config, stream.task_classes()).unwrap();
    let visible = visible_logit_set(0, &stream.task_classes()).unwrap();
    for s in &pre.cache.train[0] {
        for p in model.predict_cached(&s.cached, &visible).unwrap() {
            for &c in &stream.tasks[1].classes {
                assert_eq!(p.scores[c], 0.0);
            }
        }
    }
}

#[test]
fn box_head_steps_at_the_reduced_rate() {
    let stream = tiny_stream(3);
    let config = tiny_config();
    let model = Model::new(&config, stream.task_classes()).unwrap();
    let mut detector = model.detector;
    detector.freeze_backbone();
    let mut adam = optimizer(&detector, config.lr, &config);
    let ids: Vec<_> = detector.box_param_ids().into_iter().chain([detector.class_weight_id()]).collect();
    let before: Vec<Tensor> = ids.iter().map(|&id| detector.store().get(id).clone()).collect();

    // L = Σ (θ - 1)², one step from fresh moments.
    let mut tape = Tape::new();
    let mut terms = Vec::new();
    for &id in &ids {
        let v = tape.param(detector.store(), id);
        let shifted = tape.add_scalar(v, -1.0).unwrap();
        let sq = tape.mul(shifted, shifted).unwrap();
        terms.push(tape.sum(sq).unwrap());
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t).unwrap();
    }
    tape.backward(loss, &mut [detector.store_mut()]).unwrap();
    adam.step(&mut [detector.store_mut()], &[]).unwrap();

    for (k, &id) in ids.iter().enumerate() {
        let factor = if k < ids.len() - 1 { config.bbox_lr_factor } else { 1.0 };
        let after = detector.store().get(id);
        for (&a, &b) in after.data().iter().zip(before[k].data()) {
            let g = 2.0 * (b - 1.0) + config.weight_decay * b;
            // First Adam step: bias-corrected moments are g and g².
            let expected = config.lr * factor * g / (g.abs() + adam.eps);
            assert!(
                ((b - a) - expected).abs() <= 1e-15,
                "{} step {} expected {}",
                detector.store().name(id),
                b - a,
                expected
            );
        }
    }
}

#[test]
fn no_bt_records_no_pseudo_labels_and_lower_threshold_admits_more() {
    let stream = tiny_stream(4);
    let config = tiny_config();
    let pre = pretrain_stream(&stream, &config, strict()).unwrap();
    let count = |c: &TrainConfig| -> usize {
        let out = run_from_pretrained(&pre, &stream, c, 2, strict(), |_, _, _| Ok(())).unwrap();
        out.logs.iter().map(|l| l.n_pseudo_labels).sum()
    };
    let off = TrainConfig { use_bt: false, ..config.clone() };
    assert_eq!(count(&off), 0);
    let high = TrainConfig { delta_bt: 0.65, ..config.clone() };
    let low = TrainConfig { delta_bt: 0.25, ..config.clone() };
    let (h, l) = (count(&high), count(&low));
    assert!(l > h, "0.25 gave {l}, 0.65 gave {h}");
}

#[test]
fn runs_are_deterministic_and_resume_matches_a_straight_run() {
    let stream = tiny_stream(5);
    let config = tiny_config();
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| -> (Vec<u8>, Vec<EpochLog>) {
        let pre = pretrain_stream(&stream, &config, strict()).unwrap();
        let path = dir.path().join(sub);
        let out = run_from_pretrained(&pre, &stream, &config, 2, strict(), |t, m, _| {
            Checkpoint::capture(m, &config, t + 1).save(&checkpoint_path(&path, t + 1))
        })
        .unwrap();
        (std::fs::read(checkpoint_path(&path, 2)).unwrap(), out.logs)
    };
    let (a, logs_a) = run("a");
    let (b, logs_b) = run("b");
    assert_eq!(a, b);
    assert_eq!(logs_a, logs_b);

    let first = Checkpoint::load_previous(&dir.path().join("a"), 2).unwrap().unwrap();
    let model = first.to_model().unwrap();
    let cache = StreamCache::build(&model.detector, &stream).unwrap();
    let out = run_tasks(model, &cache, &config, 1..2, strict(), |_, _, _| Ok(())).unwrap();
    let resumed = Checkpoint::capture(&out.model, &config, 2).to_bytes().unwrap();
    assert_eq!(resumed, a);
}

#[test]
fn resuming_without_the_previous_checkpoint_fails() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Checkpoint::load_previous(dir.path(), 3), Err(Error::MissingCheckpoint { task: 2, .. })));
}
