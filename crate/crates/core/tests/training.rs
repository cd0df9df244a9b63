use mmunet::data::{gen_phantom, PhantomSpec};
use mmunet::models::{Model, ModelSpec, Variant};
use mmunet::rng;
use mmunet::training::{evaluate, loss_and_grads, lr_at, make_batch, sgd_step, train, Confusion, TrainConfig};
use rand::Rng;

/// Per-class IoU straight from the definition, one pixel at a time.
fn brute_force(pred: &[u8], truth: &[u8], k: usize) -> (f64, Vec<Option<f64>>) {
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    let ious = (0..k as u8)
        .map(|c| {
            let inter = pred.iter().zip(truth).filter(|&(&p, &t)| p == c && t == c).count();
            let union = pred.iter().zip(truth).filter(|&(&p, &t)| p == c || t == c).count();
            (union > 0).then(|| inter as f64 / union as f64)
        })
        .collect();
    (correct as f64 / pred.len() as f64, ious)
}

#[test]
fn confusion_matches_brute_force() {
    let mut r = rng::stream(42, "metric-oracle");
    for _ in 0..200 {
        let side = r.random_range(1..=8);
        let k = r.random_range(1..=5);
        let pred: Vec<u8> = (0..side * side).map(|_| r.random_range(0..k) as u8).collect();
        let truth: Vec<u8> = (0..side * side).map(|_| r.random_range(0..k) as u8).collect();
        let mut c = Confusion::new(k);
        c.add(&pred, &truth).unwrap();
        let m = c.metrics();
        let (acc, ious) = brute_force(&pred, &truth, k);
        assert_eq!(m.accuracy, acc);
        assert_eq!(m.per_class_iou, ious);
        let included: Vec<f64> = ious.iter().flatten().copied().collect();
        assert_eq!(m.miou, included.iter().sum::<f64>() / included.len() as f64);
        assert!((0.0..=1.0).contains(&m.miou));
    }
}

#[test]
fn schedule_is_stepwise_non_increasing() {
    let cfg = TrainConfig::default();
    let mut prev = f64::INFINITY;
    for e in 1..=cfg.epochs {
        let lr = lr_at(e, &cfg).unwrap();
        assert!(lr <= prev);
        if lr < prev && e > 1 {
            assert_eq!((e - cfg.lr_drop_start - 1) % cfg.lr_drop_every, 0, "breakpoint at {e}");
        }
        prev = lr;
    }
    for e in 101..=110 {
        assert!((lr_at(e, &cfg).unwrap() - 0.0015).abs() < 1e-15);
    }
    for e in 111..=120 {
        assert!((lr_at(e, &cfg).unwrap() - 0.00015).abs() < 1e-16);
    }
}

fn tiny_setup() -> (Model<f32>, Vec<mmunet::data::Sample>, Vec<mmunet::data::Sample>) {
    let spec = ModelSpec::new(Variant::MmUnet, 8, 32, 4).unwrap();
    let model = Model::build(spec, 2).unwrap();
    let samples = gen_phantom(&PhantomSpec::new(10, 32, 6));
    let (a, b) = samples.split_at(8);
    (model, a.to_vec(), b.to_vec())
}

#[test]
fn one_step_descends() {
    let (mut model, train_set, _) = tiny_setup();
    let refs: Vec<_> = train_set.iter().take(4).collect();
    let (x, labels) = make_batch::<f32>(&refs).unwrap();
    let (before, grads) = loss_and_grads(&model, x.clone(), &labels).unwrap();
    let mut v = model.params.zeros_like();
    sgd_step(&mut model.params, &grads, &mut v, 1e-3, 0.9, 0.0).unwrap();
    let (after, _) = loss_and_grads(&model, x, &labels).unwrap();
    assert!(after < before, "{after} >= {before}");
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let (mut model, train_set, _) = tiny_setup();
    let start = model.params.clone();
    let refs: Vec<_> = train_set.iter().take(2).collect();
    let (x, labels) = make_batch::<f32>(&refs).unwrap();
    let mut v = model.params.zeros_like();
    for _ in 0..3 {
        let (_, grads) = loss_and_grads(&model, x.clone(), &labels).unwrap();
        sgd_step(&mut model.params, &grads, &mut v, 0.0, 0.9, 0.0).unwrap();
    }
    for (name, t) in start.iter() {
        assert!(t.bit_eq(model.params.get(name).unwrap()), "{name}");
    }
}

#[test]
fn training_is_deterministic_and_keeps_best() {
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 3,
        input_size: 32,
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let (mut model, train_set, val_set) = tiny_setup();
        let mut lines = Vec::new();
        let out = train(&mut model, &train_set, &val_set, &cfg, |r| lines.push(r.to_string())).unwrap();
        (lines, out, val_set)
    };
    let (a, out, val_set) = run();
    let (b, _, _) = run();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    let best = out.log.iter().map(|r| r.val.miou).fold(f64::MIN, f64::max);
    assert_eq!(out.best_metrics.miou, best);
    let spec = ModelSpec::new(Variant::MmUnet, 8, 32, 4).unwrap();
    let reloaded = Model::from_params(spec, out.best).unwrap();
    assert_eq!(evaluate(&reloaded, &val_set, 4).unwrap(), out.best_metrics);
}

#[test]
fn train_rejects_bad_inputs() {
    let (mut model, train_set, val_set) = tiny_setup();
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 9,
        input_size: 32,
        ..TrainConfig::default()
    };
    let err = train(&mut model, &train_set, &val_set, &cfg, |_| {}).unwrap_err();
    assert!(matches!(err, mmunet::Error::Usage(_)));
    let err = train(&mut model, &[], &val_set, &cfg, |_| {}).unwrap_err();
    assert!(matches!(err, mmunet::Error::Usage(_)));
}
