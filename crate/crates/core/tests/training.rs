use skeleton_ode::checkpoint;
use skeleton_ode::config::Config;
use skeleton_ode::data::{generate_synthetic, preprocess, to_tensors, SyntheticSpec};
use skeleton_ode::model::argmax;
use skeleton_ode::tensor::{Precision, Real, Tensor};
use skeleton_ode::train::Trainer;

fn config(seq_len: usize) -> Config {
    let mut c = Config::default();
    c.model.hidden = 8;
    c.model.layers = 1;
    c.model.temporal_heads = 2;
    c.model.classes = 4;
    c.train.seq_len = seq_len;
    c.train.batch_size = 4;
    c
}

fn dataset<T: Real>(per_class: usize, len: usize) -> (Vec<Tensor<T>>, Vec<usize>) {
    let raw = generate_synthetic(&SyntheticSpec {
        per_class,
        frames: 20,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let prepped: Vec<_> = raw.iter().map(|s| preprocess(s, len).unwrap()).collect();
    to_tensors(&prepped)
}

fn same_params<T: Real>(a: &Trainer<T>, b: &Trainer<T>) -> bool {
    a.params.tensors().zip(b.params.tensors()).all(|(x, y)| x == y) && a.velocity == b.velocity
}

#[test]
fn equal_seeds_train_identically() {
    let (xs, ys) = dataset::<f64>(3, 6);
    let mut c = config(6);
    c.train.max_epochs = 3;
    let train = |c: Config| {
        let mut tr = Trainer::<f64>::new(c).unwrap();
        tr.fit(&xs, &ys, |_| {}).unwrap();
        tr
    };
    let (a, b) = (train(c.clone()), train(c.clone()));
    assert!(same_params(&a, &b));
    assert_eq!(a.log, b.log);
    c.train.seed = 1;
    assert!(!same_params(&a, &train(c)));
}

#[test]
fn resumed_training_matches_uninterrupted() {
    let (xs, ys) = dataset::<f64>(3, 6);
    let mut c = config(6);
    c.train.max_epochs = 4;
    c.train.decay_epochs = vec![2];

    let mut full = Trainer::<f64>::new(c.clone()).unwrap();
    full.fit(&xs, &ys, |_| {}).unwrap();

    let mut first = Trainer::<f64>::new(c).unwrap();
    for _ in 0..2 {
        first.train_epoch(&xs, &ys).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&first, &path).unwrap();
    let header = checkpoint::read_header(&path).unwrap();
    assert_eq!(header.epoch, 2);
    assert_eq!(header.precision, Precision::Double);
    let mut resumed: Trainer<f64> = checkpoint::load(&path).unwrap();
    resumed.fit(&xs, &ys, |_| {}).unwrap();

    assert!(same_params(&full, &resumed));
    assert_eq!(full.log, resumed.log);
}

#[test]
fn thread_count_does_not_change_results() {
    let (xs, ys) = dataset::<f64>(3, 6);
    let mut c = config(6);
    c.train.max_epochs = 2;
    let train = |threads| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let mut tr = Trainer::<f64>::new(c.clone()).unwrap();
            tr.fit(&xs, &ys, |_| {}).unwrap();
            tr
        })
    };
    let (one, four) = (train(1), train(4));
    assert!(same_params(&one, &four));
    assert_eq!(one.log, four.log);
}

#[test]
fn parallel_pass_matches_each_prefix_run_alone() {
    let (xs, _) = dataset::<f64>(1, 7);
    let tr = Trainer::<f64>::new(config(7)).unwrap();
    let g = tr.params.graph();
    let x = &xs[2];
    let full = tr.model.forward(&g, x).unwrap();
    for t in 1..=7 {
        let prefix = tr.model.forward(&g, &x.rows(0, t)).unwrap();
        for (a, b) in full.trajectory.iter().zip(&prefix.trajectory) {
            let gap = a.value().rows(t - 1, 1).max_abs_diff(&b.value().rows(t - 1, 1));
            assert!(gap < 1e-9, "frame {t}: {gap}");
        }
        let gap = full.probs.value().rows(t - 1, 1).max_abs_diff(&prefix.probs.value().rows(t - 1, 1));
        assert!(gap < 1e-9, "frame {t}: {gap}");
    }
}

#[test]
fn overfits_a_single_sequence() {
    let (xs, ys) = dataset::<f64>(1, 8);
    let (xs, ys) = (vec![xs[1].clone()], vec![ys[1]]);
    let mut c = config(8);
    c.train.max_epochs = 200;
    c.train.batch_size = 1;
    c.train.decay_epochs = vec![];
    c.train.lr = 0.01;
    let mut tr = Trainer::<f64>::new(c).unwrap();
    tr.fit(&xs, &ys, |_| {}).unwrap();
    let first = tr.log[0];
    let last = *tr.log.last().unwrap();
    assert!(last.l_cls < 0.25 * first.l_cls, "{first:?} -> {last:?}");
    assert!(last.l_pred < first.l_pred, "{first:?} -> {last:?}");
    let probs = tr.predict(&xs[0]).unwrap();
    assert_eq!(argmax(probs.index0(7).data()), ys[0]);
}

#[test]
fn single_precision_training_runs() {
    let (xs, ys) = dataset::<f32>(3, 6);
    let mut c = config(6);
    c.train.max_epochs = 3;
    c.train.precision = Precision::Single;
    let mut tr = Trainer::<f32>::new(c).unwrap();
    tr.fit(&xs, &ys, |_| {}).unwrap();
    assert_eq!(tr.log.len(), 3);
    assert!(tr.log.iter().all(|e| e.total.is_finite()));
    assert!(tr.log[2].total < tr.log[0].total, "{:?}", tr.log);

    let bytes = checkpoint::to_bytes(&tr).unwrap();
    let back: Trainer<f32> = checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back.predict(&xs[0]).unwrap(), tr.predict(&xs[0]).unwrap());
}

#[test]
fn checkpointed_model_predicts_identically() {
    let (xs, ys) = dataset::<f64>(2, 6);
    let mut c = config(6);
    c.train.max_epochs = 1;
    let mut tr = Trainer::<f64>::new(c).unwrap();
    tr.fit(&xs, &ys, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    checkpoint::save(&tr, &path).unwrap();
    let back: Trainer<f64> = checkpoint::load(&path).unwrap();
    for x in &xs {
        assert_eq!(back.predict(x).unwrap().data(), tr.predict(x).unwrap().data());
    }
    assert!(checkpoint::load::<f64>(dir.path().join("absent")).is_err());
}
