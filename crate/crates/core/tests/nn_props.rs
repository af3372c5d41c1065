mod common;

use fsl_core::data;
use fsl_core::nn::{self, Architecture, Batch, ParameterSet};
use ndarray::Array2;
use proptest::prelude::*;
use rand::Rng;

fn random_batch(rng: &mut rand_chacha::ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Batch {
    let inputs = Array2::from_shape_fn((n, dim), |_| rng.random_range(0.0..1.0));
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Batch::new(inputs, labels).unwrap()
}

#[test]
fn gradients_match_central_differences() {
    let mut r = common::rng(11);
    for trial in 0..20 {
        let arch = if trial % 4 == 3 {
            Architecture {
                input_dim: 64,
                conv_filters: Some(2),
                hidden: vec![6],
                classes: 4,
            }
        } else {
            let input = r.random_range(3..30);
            let hidden: Vec<usize> = (0..r.random_range(0..3)).map(|_| r.random_range(2..20)).collect();
            Architecture::mlp(input, &hidden, r.random_range(2..10))
        };
        let model = ParameterSet::init(&arch, &mut r).unwrap();
        assert!(model.num_params() <= 5000);
        let batch = random_batch(&mut r, 5, arch.input_dim, arch.classes);
        let err = common::finite_difference_error(&model, &batch, 1e-5, 1e-7);
        assert!(err < 1e-4, "trial {trial}: relative error {err:e}");
    }
}

#[test]
fn mnist_training_lowers_the_loss() {
    let (ti, tl) = data::mnist_paths(&common::mnist_dir(), true);
    let d = data::load_idx(ti, tl).unwrap().subsample(512, 3);
    let arch = Architecture::mlp(784, &[32], 10);
    let mut model = ParameterSet::init(&arch, &mut common::rng(5)).unwrap();
    let batch = d.to_batch();
    let loss = |m: &ParameterSet| nn::batch_loss(&nn::forward(m, &batch).unwrap(), &batch.labels);
    let before = loss(&model);
    let mut v = model.zeros_like();
    for _ in 0..30 {
        let cache = nn::forward(&model, &batch).unwrap();
        let g = nn::backward(&model, &cache, &batch.labels).unwrap();
        nn::sgd_step(&mut model, &g, 0.1, 0.9, &mut v).unwrap();
    }
    let after = loss(&model);
    assert!(after < 0.8 * before, "{before} -> {after}");
}

fn distribution(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0f64..1.0, len).prop_filter_map("non-zero mass", |raw| {
        let s: f64 = raw.iter().sum();
        (s > 0.0).then(|| raw.iter().map(|x| x / s).collect())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn output_error_bounds(
        (p, y) in (2usize..12).prop_flat_map(|c| (distribution(c), 0..c))
    ) {
        let target = nn::one_hot(y, p.len());
        let delta = nn::output_delta(&p, &target).unwrap();
        for (i, &d) in delta.iter().enumerate() {
            if i == y {
                prop_assert!((-1.0..=0.0).contains(&d), "δ_y = {d}");
            } else {
                prop_assert!((0.0..=1.0).contains(&d), "δ_{i} = {d}");
            }
        }
    }
}

proptest! {
    #[test]
    fn softmax_is_a_shift_invariant_distribution(
        logits in prop::collection::vec(-50.0f64..50.0, 1..20),
        shift in -100.0f64..100.0,
    ) {
        let p = nn::softmax(&logits).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
        let shifted: Vec<f64> = logits.iter().map(|l| l + shift).collect();
        let q = nn::softmax(&shifted).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn flatten_round_trips(
        input in 1usize..20,
        hidden in prop::collection::vec(1usize..10, 0..3),
        classes in 2usize..6,
        seed in any::<u64>(),
    ) {
        let arch = Architecture::mlp(input, &hidden, classes);
        let model = ParameterSet::init(&arch, &mut common::rng(seed)).unwrap();
        let flat = model.flatten();
        prop_assert_eq!(flat.len(), model.num_params());
        let back = model.unflatten_like(&flat).unwrap();
        prop_assert_eq!(&back, &model);
        prop_assert_eq!(back.flatten(), flat);
        let mut wrong = model.flatten();
        wrong.push(0.0);
        prop_assert!(model.unflatten_like(&wrong).is_err());
    }

    #[test]
    fn cross_entropy_is_nonnegative_and_minimal_at_the_label(
        (p, y) in (2usize..10).prop_flat_map(|c| (distribution(c), 0..c))
    ) {
        let ce = nn::cross_entropy(&p, &nn::one_hot(y, p.len())).unwrap();
        prop_assert!(ce >= 0.0);
        prop_assert!(ce <= -(nn::LOG_CLAMP.ln()) + 1e-9);
    }

    #[test]
    fn pseudo_gradient_is_a_difference(seed in any::<u64>(), alpha in -2.0f64..2.0) {
        let arch = Architecture::mlp(6, &[4], 3);
        let global = ParameterSet::init(&arch, &mut common::rng(seed)).unwrap();
        let mut local = global.clone();
        let noise = ParameterSet::init(&arch, &mut common::rng(seed ^ 7)).unwrap();
        local.add_scaled(alpha, &noise);
        let pg = nn::pseudo_gradient(&global, &local).unwrap();
        let expect: Vec<f64> = global.flatten().iter().zip(local.flatten()).map(|(g, l)| g - l).collect();
        prop_assert_eq!(pg, expect);
        let last = nn::last_layer_pseudo_gradient(&global, &local).unwrap();
        prop_assert_eq!(last.len(), 4 * 3 + 3);
    }
}
