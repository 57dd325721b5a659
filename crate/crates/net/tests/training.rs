use gridpoint_core::patches::{AugmentPolicy, PatchOrigin, PatchPair};
use gridpoint_core::Gray;
use gridpoint_net::arch::ArchSpec;
use gridpoint_net::model::{batch_input, build_model, forward, forward_logits, Mode, ParamSet};
use gridpoint_net::train::{auto_pos_weight, evaluate, history_csv, predict_full, train_on, HyperParams};
use gridpoint_net::{ModelCheckpoint, NetError};
use ndarray::Array2;
use rand::Rng;

fn tiny() -> ArchSpec {
    ArchSpec::with_widths([4, 4, 8], 8)
}

/// A 64×64 patch with a bright stripe grid and its one-pixel centerline label.
fn grid_patch(shift: usize, id: &str) -> PatchPair {
    let on_line = |v: usize| (v + shift) % 16 == 7;
    let near_line = |v: usize| ((v + shift) % 16).abs_diff(7) <= 1;
    let input = Gray::from_shape_fn((64, 64), |(y, x)| if near_line(x) || near_line(y) { 220.0 } else { 30.0 });
    let label = Array2::from_shape_fn((64, 64), |(y, x)| u8::from(on_line(x) || on_line(y)));
    PatchPair {
        input,
        label,
        origin: PatchOrigin {
            image: id.into(),
            row: 0,
            col: shift,
        },
    }
}

fn smoke_hp(seed: u64) -> HyperParams {
    HyperParams {
        learning_rate: 1e-3,
        batch_size: 4,
        epochs: 2,
        steps_per_epoch: 5,
        pos_weight: None,
        seed,
    }
}

fn checkpoint(spec: &ArchSpec, seed: u64) -> ModelCheckpoint {
    ModelCheckpoint {
        arch: spec.clone(),
        hyper: smoke_hp(seed),
        pos_weight: 3.0,
        history: Vec::new(),
        complete: true,
        params: build_model(spec, seed).unwrap(),
    }
}

#[test]
fn smoke_run_records_every_epoch() {
    let train: Vec<_> = (0..6).map(|s| grid_patch(s, "a")).collect();
    let val = vec![grid_patch(9, "b")];
    let mut seen = Vec::new();
    let cp = train_on(&tiny(), &train, &val, &AugmentPolicy::full(), &smoke_hp(1), |r| seen.push(r.epoch)).unwrap();
    assert_eq!(cp.history.len(), 2);
    assert_eq!(seen, vec![0, 1]);
    assert!(cp.complete);
    assert!(cp.history.iter().all(|r| r.val_loss.is_some() && r.train_loss.is_finite()));
    let csv = history_csv(&cp.history);
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("epoch,train_loss,train_acc,val_loss,val_acc\n"));
}

#[test]
fn same_seed_same_run() {
    let train: Vec<_> = (0..6).map(|s| grid_patch(s, "a")).collect();
    let val = vec![grid_patch(9, "b"), grid_patch(3, "b")];
    let run = |seed| train_on(&tiny(), &train, &val, &AugmentPolicy::full(), &smoke_hp(seed), |_| {}).unwrap();
    let (a, b) = (run(4), run(4));
    let (la, lb) = (a.history[1].val_loss.unwrap(), b.history[1].val_loss.unwrap());
    assert!((la - lb).abs() <= 1e-6);
    assert_eq!(a.params, b.params);
    assert_ne!(run(5).params, a.params);
}

#[test]
fn single_patch_is_memorized() {
    let pair = grid_patch(0, "one");
    let hp = HyperParams {
        learning_rate: 1e-3,
        batch_size: 1,
        epochs: 1,
        steps_per_epoch: 500,
        pos_weight: None,
        seed: 2,
    };
    let cp = train_on(&tiny(), std::slice::from_ref(&pair), &[], &AugmentPolicy::identity(), &hp, |_| {}).unwrap();
    let (_, acc) = evaluate(&cp, std::slice::from_ref(&pair)).unwrap();
    assert!(acc >= 0.99, "pixel accuracy {acc}");
}

#[test]
fn rejects_bad_inputs() {
    let hp = smoke_hp(1);
    let err = train_on(&tiny(), &[], &[], &AugmentPolicy::identity(), &hp, |_| {}).unwrap_err();
    assert!(matches!(err, NetError::Empty(_)));
    let mut odd = grid_patch(0, "x");
    odd.input = Gray::zeros((60, 60));
    odd.label = Array2::zeros((60, 60));
    assert!(matches!(
        train_on(&tiny(), &[odd], &[], &AugmentPolicy::identity(), &hp, |_| {}),
        Err(NetError::Shape(_))
    ));
    let bad = HyperParams { batch_size: 0, ..hp };
    assert!(matches!(
        train_on(&tiny(), &[grid_patch(0, "x")], &[], &AugmentPolicy::identity(), &bad, |_| {}),
        Err(NetError::Hyper(_))
    ));
    assert!(matches!(evaluate(&checkpoint(&tiny(), 1), &[]), Err(NetError::Empty(_))));
}

#[test]
fn diverging_run_returns_partial_checkpoint() {
    let train: Vec<_> = (0..4).map(|s| grid_patch(s, "a")).collect();
    let hp = HyperParams {
        learning_rate: 1e30,
        epochs: 50,
        ..smoke_hp(3)
    };
    match train_on(&tiny(), &train, &[], &AugmentPolicy::identity(), &hp, |_| {}) {
        Err(NetError::NonFinite { epoch, partial, .. }) => {
            assert!(!partial.complete);
            assert_eq!(partial.history.len(), epoch);
        }
        other => panic!("expected a non-finite abort, got {:?}", other.map(|c| c.history.len())),
    }
}

/// Accuracy recomputed from confusion counts of the thresholded probabilities.
#[test]
fn accuracy_matches_confusion_counts() {
    let mut rng = gridpoint_core::seed::rng(8);
    let spec = tiny();
    let cp = checkpoint(&spec, 6);
    let patches: Vec<PatchPair> = (0..3)
        .map(|i| PatchPair {
            input: Gray::from_shape_fn((64, 64), |_| rng.random_range(0.0..255.0)),
            label: Array2::from_shape_fn((64, 64), |_| u8::from(rng.random_bool(0.3))),
            origin: PatchOrigin {
                image: "r".into(),
                row: i,
                col: 0,
            },
        })
        .collect();
    let (_, acc) = evaluate(&cp, &patches).unwrap();
    let (mut tp, mut tn, mut fp, mut fneg) = (0usize, 0usize, 0usize, 0usize);
    for p in &patches {
        let prob = predict_full(&cp, &p.input).unwrap();
        for (&q, &l) in prob.iter().zip(p.label.iter()) {
            match (q > 0.5, l == 1) {
                (true, true) => tp += 1,
                (false, false) => tn += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
            }
        }
    }
    let want = (tp + tn) as f64 / (tp + tn + fp + fneg) as f64;
    assert!((acc - want).abs() < 1e-12, "{acc} vs {want}");
}

#[test]
fn constant_half_output_scores_background_fraction() {
    let mut cp = checkpoint(&tiny(), 1);
    let out = cp.params.layers.last_mut().unwrap();
    out.w.fill(0.0);
    out.b.fill(0.0);
    let pair = grid_patch(0, "c");
    let p = pair.label.iter().filter(|&&v| v == 1).count() as f64 / pair.label.len() as f64;
    let (_, acc) = evaluate(&cp, &[pair]).unwrap();
    assert!((acc - (1.0 - p)).abs() < 1e-12);
}

#[test]
fn predict_full_is_plain_inference() {
    let cp = checkpoint(&tiny(), 3);
    let pair = grid_patch(2, "p");
    let a = predict_full(&cp, &pair.input).unwrap();
    let b = forward(&cp.params, batch_input(&[&pair.input]).unwrap()).unwrap();
    assert_eq!(a.as_slice().unwrap(), b.data.as_slice().unwrap());
    assert_eq!(a, predict_full(&cp, &pair.input).unwrap());
    let zero = predict_full(&cp, &Gray::zeros((128, 64))).unwrap();
    assert_eq!(zero.dim(), (128, 64));
    assert!(zero.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
    assert!(matches!(predict_full(&cp, &Gray::zeros((100, 64))), Err(NetError::Shape(_))));
}

#[test]
fn train_mode_dropout_is_seeded() {
    let p: ParamSet<f32> = build_model(&tiny(), 5).unwrap();
    let pair = grid_patch(1, "d");
    let run = |s| {
        let mut rng = gridpoint_core::seed::rng(s);
        forward_logits(&p, batch_input(&[&pair.input]).unwrap(), Mode::Train(&mut rng), false).unwrap().0
    };
    assert_eq!(run(1), run(1));
    assert_ne!(run(1), run(2));
}

#[test]
fn positive_weight_is_class_ratio_capped() {
    let a = Array2::from_shape_fn((4, 5), |(y, _)| u8::from(y == 0));
    assert_eq!(auto_pos_weight([&a]), 3.0);
    let sparse = Array2::from_shape_fn((100, 100), |(y, x)| u8::from(x == 0 && y == 0));
    assert_eq!(auto_pos_weight([&sparse]), 50.0);
}
