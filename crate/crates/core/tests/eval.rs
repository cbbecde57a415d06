use proptest::prelude::*;
use skeleton_ode::config::Config;
use skeleton_ode::data::{generate_synthetic, preprocess, to_tensors, SyntheticSpec};
use skeleton_ode::eval::{
    ablate, auc, evaluate, frame_at_ratio, matrix_csv, ratio_grid, Arm, LossSetup, ObservationCurve, Split,
};
use skeleton_ode::tensor::Tensor;
use skeleton_ode::train::Trainer;
use skeleton_ode::Error;

/// `[T, C]` probabilities that favour `label` from 1-based frame `from` on
/// and class `(label + 1) % C` before it.
fn switching(len: usize, classes: usize, label: usize, from: usize) -> Tensor<f64> {
    Tensor::from_fn([len, classes], |i| {
        let (t, c) = (i / classes, i % classes);
        let best = if t + 1 >= from { label } else { (label + 1) % classes };
        if c == best {
            0.7
        } else {
            0.3 / (classes - 1) as f64
        }
    })
}

fn tiny_config() -> Config {
    let mut c = Config::default();
    c.model.hidden = 8;
    c.model.layers = 1;
    c.model.temporal_heads = 2;
    c.train.seq_len = 8;
    c.train.max_epochs = 1;
    c.train.batch_size = 8;
    c
}

fn synthetic(per_class: usize, seed: u64, len: usize) -> (Vec<Tensor<f64>>, Vec<usize>) {
    let raw = generate_synthetic(&SyntheticSpec {
        per_class,
        seed,
        ..SyntheticSpec::default()
    })
    .unwrap();
    to_tensors(&raw.iter().map(|s| preprocess(s, len).unwrap()).collect::<Vec<_>>())
}

#[test]
fn perfect_predictions_have_unit_auc() {
    let probs: Vec<_> = (0..8).map(|i| switching(16, 4, i % 4, 1)).collect();
    let labels: Vec<_> = (0..8).map(|i| i % 4).collect();
    let curve = ObservationCurve::from_predictions(&probs, &labels, &ratio_grid(0.1).unwrap()).unwrap();
    assert!(curve.accuracies.iter().all(|&a| a == 1.0));
    assert_eq!(curve.auc, 1.0);
}

#[test]
fn late_switch_gives_a_step_curve() {
    // correct from frame 9 of 16, so from ratio 0.6 (frame 10) on, but not at 0.5 (frame 8)
    let probs = vec![switching(16, 3, 2, 9)];
    let ratios = ratio_grid(0.1).unwrap();
    let curve = ObservationCurve::from_predictions(&probs, &[2], &ratios).unwrap();
    let expect: Vec<f64> = ratios.iter().map(|&r| if frame_at_ratio(r, 16) >= 9 { 1.0 } else { 0.0 }).collect();
    assert_eq!(curve.accuracies, expect);
    assert_eq!(&curve.accuracies[4..6], &[0.0, 1.0]);
    assert!((curve.auc - auc(&ratios, &expect)).abs() < 1e-15);
    assert!((curve.auc - (4.5 * 0.1) / 0.9).abs() < 1e-12);
    assert_eq!(curve.accuracy_at(0.25), Some(0.0));
    assert_eq!(curve.accuracy_at(0.55), Some(1.0));
    assert!(curve.to_csv().starts_with("ratio,accuracy\n0.1,0\n"));
}

#[test]
fn coarse_grid_has_five_points() {
    let (xs, ys) = synthetic(2, 3, 8);
    let tr = Trainer::<f64>::new(tiny_config()).unwrap();
    let curve = evaluate(&tr.model, &tr.params, &xs, &ys, 0.2).unwrap();
    assert_eq!(curve.ratios.len(), 5);
    assert_eq!(*curve.ratios.last().unwrap(), 1.0);
    assert!(matches!(evaluate(&tr.model, &tr.params, &xs, &ys, 1.5), Err(Error::Config(_))));
    assert!(matches!(evaluate(&tr.model, &tr.params, &[], &[], 0.1), Err(Error::Contract(_))));
}

#[test]
fn untrained_model_is_near_chance() {
    let (xs, ys) = synthetic(50, 11, 8);
    let tr = Trainer::<f64>::new(tiny_config()).unwrap();
    let curve = evaluate(&tr.model, &tr.params, &xs, &ys, 0.1).unwrap();
    // four binomial standard deviations of 200 draws at p = 1/4
    let band = 4.0 * (0.25f64 * 0.75 / 200.0).sqrt();
    for &a in &curve.accuracies {
        assert!((a - 0.25).abs() < band, "{:?}", curve.accuracies);
    }
}

#[test]
fn matrix_csv_writes_rows() {
    let m = Tensor::from_f64([2, 2], &[1.0, 0.0, 0.25, 0.75]).unwrap();
    assert_eq!(matrix_csv(&m), "1,0\n0.25,0.75\n");
}

#[test]
fn arms_set_loss_weights_and_steps() {
    let base = Config::default();
    let a = Arm::parse("cls+pred@3", 2).unwrap();
    assert_eq!((a.setup, a.n_steps, a.ode), (LossSetup::ClsPred, 3, true));
    let c = a.apply(&base);
    assert_eq!((c.model.n_steps, c.train.lambda1, c.train.lambda2), (3, base.train.lambda1, 0.0));
    let none = Arm::parse("cls+pred+feat:none", 2).unwrap();
    assert_eq!((none.n_steps, none.ode), (0, false));
    for bad in ["cls", "cls+pred@6", "cls+pred@x", "cls-only:euler"] {
        assert!(matches!(Arm::parse(bad, 2), Err(Error::Config(_))), "{bad}");
    }
}

#[test]
fn ablation_reports_each_arm_and_seed() {
    let (train_x, train_y) = synthetic(2, 100, 8);
    let (test_x, test_y) = synthetic(2, 999, 8);
    let arms = [Arm::parse("cls-only", 2).unwrap(), Arm::parse("cls+pred+feat@1", 2).unwrap()];
    let split = Split {
        train_x: &train_x,
        train_y: &train_y,
        test_x: &test_x,
        test_y: &test_y,
    };
    let mut seen = Vec::new();
    let report = ablate(&tiny_config(), &arms, &[0, 1], &split, 0.2, 0.25, |name, seed, _| {
        seen.push((name.to_string(), seed))
    })
    .unwrap();
    assert_eq!(seen.len(), 4);
    assert_eq!(report.arms.len(), 2);
    for r in &report.arms {
        assert_eq!(r.aucs.len(), 2);
        assert_eq!(r.train_accs.len(), 2);
        assert!(r.aucs.iter().all(|a| (0.0..=1.0).contains(a)));
    }
}

proptest! {
    #[test]
    fn auc_lies_between_curve_extremes(accs in prop::collection::vec(0.0f64..1.0, 10)) {
        let ratios = ratio_grid(0.1).unwrap();
        let a = auc(&ratios, &accs);
        let lo = accs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
    }

    #[test]
    fn observed_frame_grows_with_ratio(len in 1usize..100, r in 0.0f64..1.0, s in 0.0f64..1.0) {
        let (lo, hi) = if r < s { (r, s) } else { (s, r) };
        prop_assert!(frame_at_ratio(lo, len) <= frame_at_ratio(hi, len));
        prop_assert!((1..=len).contains(&frame_at_ratio(r, len)));
    }
}
