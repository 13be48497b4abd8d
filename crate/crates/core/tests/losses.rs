use fopro_autograd::Graph;
use fopro_core::losses::*;
use ndarray::{array, Array1, Array2, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn var<'g>(g: &'g Graph, a: Array2<f64>) -> fopro_autograd::Var<'g> {
    g.constant(a.into_dyn())
}

#[test]
fn ekd_reference_values() {
    let g = Graph::new();
    let y = array![[1.0, 2.0, 0.0]];
    let cases = [
        (array![[3.0, 6.0, 0.0]], 0.0),
        (array![[-2.0, 1.0, 5.0]], 2.0),
        (array![[-0.5, -1.0, 0.0]], 4.0),
    ];
    for (t, expected) in cases {
        let l = ekd_loss(var(&g, y.clone()), var(&g, t)).unwrap().scalar();
        assert!((l - expected).abs() < 1e-7, "{l} vs {expected}");
    }
}

#[test]
fn ekd_rejects_zero_rows_and_shape_mismatch() {
    let g = Graph::new();
    let err = ekd_loss(var(&g, array![[0.0, 0.0]]), var(&g, array![[1.0, 0.0]]));
    assert!(matches!(err, Err(LossError::Degenerate(_))));
    let err = ekd_loss(
        var(&g, array![[1.0, 0.0]]),
        var(&g, array![[1.0, 0.0, 0.0]]),
    );
    assert!(matches!(err, Err(LossError::InvalidArgument(_))));
}

#[test]
fn balance_loss_uniform_and_peaked() {
    let g = Graph::new();
    for c in [2usize, 5, 64] {
        let l = balance_loss(var(&g, Array2::from_elem((3, c), 0.7)))
            .unwrap()
            .scalar();
        assert!((l + (c as f64).ln()).abs() < 1e-7);
    }
    let mut peaked = Array2::zeros((1, 4));
    peaked[[0, 2]] = 60.0;
    assert!(balance_loss(var(&g, peaked)).unwrap().scalar().abs() < 1e-7);
    assert!(balance_loss(var(&g, Array2::zeros((2, 1)))).is_err());
}

#[test]
fn bn_regularization_zero_when_statistics_match() {
    let stats = BnStatistics {
        layers: vec![LayerStatistics {
            mean: array![0.1, -0.3],
            var: array![1.2, 0.4],
        }],
    };
    assert_eq!(bn_regularization_value(&stats, &stats).unwrap(), 0.0);
    let mut shifted = stats.clone();
    shifted.layers[0].mean[0] += 2.0;
    shifted.layers[0].var[1] += 1.0;
    assert!((bn_regularization_value(&shifted, &stats).unwrap() - 5.0).abs() < 1e-12);
    let short = BnStatistics { layers: vec![] };
    assert!(bn_regularization_value(&short, &stats).is_err());
    let wrong = BnStatistics {
        layers: vec![LayerStatistics {
            mean: Array1::zeros(3),
            var: Array1::zeros(3),
        }],
    };
    assert!(bn_regularization_value(&wrong, &stats).is_err());
}

#[test]
fn balanced_softmax_with_uniform_counts_is_bit_identical_to_ce() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for _ in 0..100 {
        let (b, k) = (rng.gen_range(1..9), rng.gen_range(2..9));
        let logits = ArrayD::from_shape_fn(IxDyn(&[b, k]), |_| rng.gen_range(-20.0..20.0));
        let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..k)).collect();
        let n = rng.gen_range(1..1000);
        let g = Graph::new();
        let bsm = balanced_softmax_loss(g.constant(logits.clone()), &labels, &vec![n; k]).unwrap();
        let ce = cross_entropy(g.constant(logits), &labels).unwrap();
        assert_eq!(bsm.scalar().to_bits(), ce.scalar().to_bits());
    }
}

#[test]
fn balanced_softmax_favours_rare_class_gradients() {
    // With equal logits the loss on a rare-class sample exceeds plain CE.
    let g = Graph::new();
    let logits = var(&g, Array2::zeros((1, 3)));
    let bsm = balanced_softmax_loss(logits, &[2], &[100, 10, 1])
        .unwrap()
        .scalar();
    let ce = cross_entropy(logits, &[2]).unwrap().scalar();
    let expected = -(1.0f64 / 111.0).ln();
    assert!((bsm - expected).abs() < 1e-12 && bsm > ce);
}

#[test]
fn weighted_ce_with_equal_weights_is_ce() {
    let g = Graph::new();
    let logits = var(&g, array![[1.0, -2.0, 0.5], [0.3, 0.3, 4.0]]);
    let a = weighted_cross_entropy(logits, &[0, 2], &[2.0, 2.0, 2.0])
        .unwrap()
        .scalar();
    let b = cross_entropy(logits, &[0, 2]).unwrap().scalar();
    assert!((a - b).abs() < 1e-14);
}

#[test]
fn composites_combine_with_default_weights() {
    let w = LossWeights::default();
    assert_eq!(inversion_loss(2.0, -0.5, &w), 2.0 - 5.0);
    assert_eq!(exploitation_loss(1.0, 0.5, &w), 2.5);
    assert!((exploration_loss(0.5, 3.0, &w) - (3.0 - 0.45)).abs() < 1e-15);
    let no_adv = LossWeights { gamma: 0.0, ..w };
    assert_eq!(exploration_loss(0.5, 3.0, &no_adv), 3.0);
    assert!(LossWeights { mu: -1.0, ..w }.validate().is_err());
}

proptest! {
    #[test]
    fn ekd_in_range_and_scale_invariant(
        y in proptest::collection::vec(-5.0f64..5.0, 8),
        t in proptest::collection::vec(-5.0f64..5.0, 8),
        s in 0.01f64..100.0,
    ) {
        prop_assume!(y.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        prop_assume!(t.iter().map(|v| v * v).sum::<f64>() > 1e-6);
        let g = Graph::new();
        let yv = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, 4]), y.clone()).unwrap());
        let tv = g.constant(ArrayD::from_shape_vec(IxDyn(&[2, 4]), t.clone()).unwrap());
        prop_assume!(yv.value().rows().into_iter().all(|r| r.dot(&r) > 1e-6));
        prop_assume!(tv.value().rows().into_iter().all(|r| r.dot(&r) > 1e-6));
        let l = ekd_loss(yv, tv).unwrap().scalar();
        prop_assert!((-1e-12..=4.0 + 1e-12).contains(&l));
        let scaled = ekd_loss(yv * s, tv).unwrap().scalar();
        prop_assert!((l - scaled).abs() < 1e-10);
    }

    #[test]
    fn balance_loss_bounded(x in proptest::collection::vec(-10.0f64..10.0, 12)) {
        let g = Graph::new();
        let l = balance_loss(g.constant(ArrayD::from_shape_vec(IxDyn(&[3, 4]), x).unwrap())).unwrap().scalar();
        prop_assert!(l >= -(4.0f64).ln() - 1e-12 && l <= 1e-12);
    }
}
