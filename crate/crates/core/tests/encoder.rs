use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skeleton_ode::config::ModelConfig;
use skeleton_ode::encoder::{temporal_attention, CausalMask};
use skeleton_ode::eval::attention_map;
use skeleton_ode::model::Model;
use skeleton_ode::params::ParamStore;
use skeleton_ode::tensor::{Graph, Tensor};
use skeleton_ode::verify::causal_gaps;
use skeleton_ode::Error;

fn small() -> ModelConfig {
    ModelConfig {
        hidden: 16,
        max_len: 16,
        ..ModelConfig::default()
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.gen_range(-1.0..1.0))
}

fn build(config: ModelConfig, seed: u64) -> (Model, ParamStore<f64>, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let model = Model::new(config, &mut store, &mut rng).unwrap();
    (model, store, rng)
}

#[test]
fn causal_mask_examples() {
    let m = CausalMask::new(3);
    assert!(m.allows(2, 0) && m.allows(1, 1) && !m.allows(0, 1));
    let a = m.additive::<f64>();
    assert_eq!(a.data()[1], f64::NEG_INFINITY);
    assert_eq!(a.data()[3], 0.0);
    assert_eq!(a.data()[4], 0.0);
}

#[test]
fn prefix_and_stream_match_full_pass() {
    for (layers, heads) in [(1, 1), (2, 4), (3, 2)] {
        let config = ModelConfig { layers, temporal_heads: heads, ..small() };
        let (model, store, mut rng) = build(config, layers as u64);
        let x = random(&mut rng, &[9, 6, 3]);
        let gaps = causal_gaps(&model, &store, &x).unwrap();
        assert!(gaps.max_gap() < 1e-9, "{gaps:?}");
        assert_eq!(gaps.upper_attention, 0.0);
    }
}

#[test]
fn stream_cache_grows_one_frame_per_step() {
    let (model, store, mut rng) = build(small(), 3);
    let mut stream = model.start_stream::<f64>();
    for t in 1..=4 {
        let p = model.stream_step(&store, &mut stream, &random(&mut rng, &[6, 3])).unwrap();
        assert_eq!(stream.frames(), t);
        assert!(stream.state.cache_lens().iter().all(|&n| n == t));
        assert!((p.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn single_frame_attends_to_itself() {
    let (model, store, mut rng) = build(small(), 4);
    let x = random(&mut rng, &[1, 6, 3]);
    for head in 0..model.config.temporal_heads {
        let map = attention_map(&model, &store, &x, head).unwrap();
        assert_eq!(map.shape(), &[1, 1]);
        assert!((map.data()[0] - 1.0).abs() < 1e-15);
    }
}

#[test]
fn attention_rows_sum_to_one() {
    let (model, store, mut rng) = build(small(), 5);
    let x = random(&mut rng, &[7, 6, 3]);
    let g = store.graph();
    let fwd = model.forward(&g, &x).unwrap();
    for att in &fwd.attention {
        let a = att.value();
        assert_eq!(a.shape(), &[6, model.config.temporal_heads, 7, 7]);
        for row in a.data().chunks(7) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_head_out_of_range_is_rejected() {
    let (model, store, mut rng) = build(small(), 6);
    let x = random(&mut rng, &[3, 6, 3]);
    let heads = model.config.temporal_heads;
    assert!(matches!(attention_map(&model, &store, &x, heads), Err(Error::Contract(_))));
}

#[test]
fn sequences_longer_than_capacity_are_rejected() {
    let config = ModelConfig { max_len: 4, ..small() };
    let (model, store, mut rng) = build(config, 7);
    let g = store.graph();
    let x = random(&mut rng, &[5, 6, 3]);
    assert!(matches!(model.forward(&g, &x), Err(Error::Capacity { len: 5, max: 4 })));

    let mut stream = model.start_stream::<f64>();
    for _ in 0..4 {
        model.stream_step(&store, &mut stream, &random(&mut rng, &[6, 3])).unwrap();
    }
    let err = model.stream_step(&store, &mut stream, &random(&mut rng, &[6, 3]));
    assert!(matches!(err, Err(Error::Capacity { len: 5, max: 4 })));
}

#[test]
fn wrong_joint_count_is_a_dimension_error() {
    let (model, store, mut rng) = build(small(), 8);
    let g = store.graph();
    assert!(matches!(model.forward(&g, &random(&mut rng, &[3, 5, 3])), Err(Error::Dimension { .. })));
}

#[test]
fn temporal_attention_rejects_uneven_heads() {
    let g = Graph::<f64>::new();
    let q = g.constant(Tensor::zeros([2, 3, 6]));
    assert!(matches!(temporal_attention(q, q, q, 4, None), Err(Error::Config(_))));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn outputs_up_to_t_ignore_later_frames(
        seed in 0u64..500,
        len in 2usize..9,
        cut in 0usize..8,
        noise in 0.5f64..5.0,
    ) {
        let cut = cut % (len - 1);
        let (model, store, mut rng) = build(small(), seed);
        let x = random(&mut rng, &[len, 6, 3]);
        let mut y = x.clone();
        for v in &mut y.data_mut()[(cut + 1) * 18..] {
            *v += noise * rng.gen_range(-1.0..1.0);
        }
        let g = store.graph();
        let a = model.forward(&g, &x).unwrap();
        let b = model.forward(&g, &y).unwrap();
        let keep = cut + 1;
        let la = a.latents.value().rows(0, keep);
        let lb = b.latents.value().rows(0, keep);
        prop_assert_eq!(la.data(), lb.data());
        let pa = a.probs.value().rows(0, keep);
        let pb = b.probs.value().rows(0, keep);
        prop_assert_eq!(pa.data(), pb.data());
    }
}
