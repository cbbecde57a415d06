use proptest::prelude::*;
use skeleton_ode::data::{
    check_uniform, generate_synthetic, load_sequences, parse_record, preprocess, save_sequences, to_tensors,
    Normalizer, Sequence, SyntheticSpec,
};
use skeleton_ode::Error;

fn seq(frames: Vec<Vec<[f64; 3]>>) -> Sequence {
    Sequence {
        id: "s".into(),
        label: 0,
        frames,
    }
}

fn distance(a: &Sequence, b: &Sequence) -> f64 {
    a.frames
        .iter()
        .flatten()
        .zip(b.frames.iter().flatten())
        .map(|(p, q)| (0..3).map(|k| (p[k] - q[k]).powi(2)).sum::<f64>())
        .sum()
}

#[test]
fn save_and_load_round_trip() {
    let data = generate_synthetic(&SyntheticSpec {
        per_class: 2,
        frames: 5,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    save_sequences(&data, &path).unwrap();
    assert_eq!(load_sequences(&path).unwrap(), data);
}

#[test]
fn blank_lines_are_skipped_and_bad_lines_reported() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.jsonl");
    let good = r#"{"id":"a","label":1,"frames":[[[0,0,0],[1,0,0]]]}"#;
    std::fs::write(&path, format!("{good}\n\n{good}\n")).unwrap();
    assert_eq!(load_sequences(&path).unwrap().len(), 2);
    std::fs::write(&path, format!("{good}\n\n{{\"id\":\n")).unwrap();
    assert!(matches!(load_sequences(&path), Err(Error::Parse { line: 3, .. })));
    assert!(matches!(load_sequences(dir.path().join("missing")), Err(Error::Io(_))));
}

#[test]
fn schema_errors_name_the_sequence() {
    let two_coords = r#"{"id":"x","label":0,"frames":[[[0,0]]]}"#;
    assert!(matches!(parse_record(two_coords, 1), Err(Error::Schema { id, .. }) if id == "x"));
    let ragged = r#"{"id":"y","label":0,"frames":[[[0,0,0],[1,1,1]],[[0,0,0]]]}"#;
    assert!(matches!(parse_record(ragged, 1), Err(Error::Schema { id, .. }) if id == "y"));
    let missing = r#"{"id":"z","frames":[]}"#;
    assert!(matches!(parse_record(missing, 4), Err(Error::Parse { line: 4, .. })));

    let a = parse_record(r#"{"id":"a","label":0,"frames":[[[0,0,0],[1,0,0]]]}"#, 1).unwrap();
    let b = parse_record(r#"{"id":"b","label":0,"frames":[[[0,0,0]]]}"#, 1).unwrap();
    assert!(check_uniform(&[a.clone()], 2, Some(1)).is_ok());
    assert!(matches!(check_uniform(&[a.clone(), b], 2, None), Err(Error::Schema { id, .. }) if id == "b"));
    assert!(matches!(check_uniform(&[a], 2, Some(3)), Err(Error::Schema { .. })));
}

#[test]
fn preprocess_rejects_degenerate_input() {
    let one = seq(vec![vec![[0.0; 3], [1.0, 0.0, 0.0]]]);
    assert!(matches!(preprocess(&one, 4), Err(Error::Preprocess(_))));
    let flat = seq(vec![vec![[1.0; 3], [1.0; 3]]; 3]);
    assert!(matches!(preprocess(&flat, 4), Err(Error::Preprocess(_))));
    let ok = seq(vec![vec![[0.0; 3], [2.0, 0.0, 0.0]]; 3]);
    assert!(matches!(preprocess(&ok, 0), Err(Error::Preprocess(_))));
}

#[test]
fn preprocess_example() {
    let s = seq(vec![
        vec![[1.0, 1.0, 1.0], [3.0, 1.0, 1.0]],
        vec![[1.0, 1.0, 1.0], [3.0, 3.0, 1.0]],
    ]);
    let p = preprocess(&s, 3).unwrap();
    assert_eq!(p.frames[0], vec![[0.0; 3], [1.0, 0.0, 0.0]]);
    assert_eq!(p.frames[1], vec![[0.0; 3], [1.0, 0.5, 0.0]]);
    assert_eq!(p.frames[2], vec![[0.0; 3], [1.0, 1.0, 0.0]]);
}

fn arbitrary_sequence() -> impl Strategy<Value = Sequence> {
    (2usize..10, 2usize..6).prop_flat_map(|(len, joints)| {
        prop::collection::vec(prop::collection::vec(prop::array::uniform3(-5.0f64..5.0), joints), len).prop_map(seq)
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn preprocess_normalizes_the_first_frame(s in arbitrary_sequence(), target in 1usize..20) {
        prop_assume!(Normalizer::from_first_frame(&s).is_ok());
        let p = preprocess(&s, target).unwrap();
        prop_assert_eq!(p.len(), target);
        prop_assert_eq!(p.joints(), s.joints());
        prop_assert_eq!(p.frames[0][0], [0.0; 3]);
        let reach = p.frames[0].iter().map(|q| (q[0] * q[0] + q[1] * q[1] + q[2] * q[2]).sqrt()).fold(0.0, f64::max);
        prop_assert!((reach - 1.0).abs() < 1e-12);
    }

    #[test]
    fn resampling_to_the_same_length_only_normalizes(s in arbitrary_sequence()) {
        prop_assume!(Normalizer::from_first_frame(&s).is_ok());
        let norm = Normalizer::from_first_frame(&s).unwrap();
        let p = preprocess(&s, s.len()).unwrap();
        for (a, b) in p.frames.iter().zip(&s.frames) {
            prop_assert_eq!(a, &norm.apply_frame(b));
        }
    }

    #[test]
    fn preprocess_is_invariant_to_translation_and_scale(
        s in arbitrary_sequence(),
        offset in prop::array::uniform3(-10.0f64..10.0),
        scale in 0.1f64..10.0,
    ) {
        prop_assume!(Normalizer::from_first_frame(&s).is_ok());
        let moved = seq(s.frames.iter().map(|f| f.iter().map(|p| {
            [p[0] * scale + offset[0], p[1] * scale + offset[1], p[2] * scale + offset[2]]
        }).collect()).collect());
        let (a, b) = (preprocess(&s, 7).unwrap(), preprocess(&moved, 7).unwrap());
        prop_assert!(distance(&a, &b) < 1e-18);
    }
}

#[test]
fn synthetic_data_is_deterministic_and_seeded() {
    let spec = SyntheticSpec { per_class: 3, ..SyntheticSpec::default() };
    let a = generate_synthetic(&spec).unwrap();
    assert_eq!(a, generate_synthetic(&spec).unwrap());
    assert_ne!(a, generate_synthetic(&SyntheticSpec { seed: 1, ..spec.clone() }).unwrap());
    assert_eq!(a.len(), 12);
    assert!(a.windows(2).all(|w| w[0].label <= w[1].label));
    check_uniform(&a, 6, Some(16)).unwrap();
    let (xs, ys) = to_tensors::<f64>(&a);
    assert_eq!(xs[0].shape(), &[16, 6, 3]);
    assert_eq!(ys, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
    assert!(matches!(generate_synthetic(&SyntheticSpec { classes: 9, ..spec }), Err(Error::Config(_))));
}

#[test]
fn synthetic_classes_are_separable_by_nearest_neighbour() {
    let prep = |seed| {
        generate_synthetic(&SyntheticSpec { seed, per_class: 20, ..SyntheticSpec::default() })
            .unwrap()
            .iter()
            .map(|s| preprocess(s, 16).unwrap())
            .collect::<Vec<_>>()
    };
    let (train, test) = (prep(100), prep(999));
    let hits = test
        .iter()
        .filter(|q| {
            let nearest = train
                .iter()
                .min_by(|a, b| distance(a, q).total_cmp(&distance(b, q)))
                .unwrap();
            nearest.label == q.label
        })
        .count();
    assert!(hits as f64 / test.len() as f64 >= 0.9, "{hits}/{}", test.len());
}
