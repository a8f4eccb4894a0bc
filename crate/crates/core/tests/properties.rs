//! Randomized invariants of the block algebra and the rank metric.

use proptest::prelude::*;

use mgt_core::linalg::{
    apply_delta_block, delta_matrix, determinant, orthogonality_check, singular_values,
    symmetric_eigenvalues, DeltaSpec,
};
use mgt_core::metrics::effective_rank;
use mgt_core::{ExperimentConfig, Tensor};

fn direction(max_dim: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-3.0..3.0f64, 2..=max_dim)
        .prop_filter("nonzero", |k| k.iter().map(|x| x * x).sum::<f64>() > 1e-3)
}

fn matrix(max: usize) -> impl Strategy<Value = Tensor> {
    (1..=max, 1..=max).prop_flat_map(|(r, c)| {
        prop::collection::vec(-2.0..2.0f64, r * c)
            .prop_map(move |d| Tensor::new(vec![r, c], d).unwrap())
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn delta_spectrum_is_ones_and_one_minus_beta(beta in -1.0..2.5f64, k in direction(24)) {
        let spec = DeltaSpec::new(beta, &k).unwrap();
        let a = delta_matrix(&spec);
        let mut eig = symmetric_eigenvalues(&a).unwrap();
        let mut expected = vec![1.0; k.len() - 1];
        expected.push(1.0 - beta);
        eig.sort_by(f64::total_cmp);
        expected.sort_by(f64::total_cmp);
        for (x, y) in eig.iter().zip(&expected) {
            prop_assert!((x - y).abs() < 1e-8, "{x} vs {y}");
        }
        prop_assert!((determinant(&a).unwrap() - (1.0 - beta)).abs() < 1e-8);
    }

    #[test]
    fn additive_form_equals_matrix_form(
        beta in -1.0..2.5f64,
        k in direction(12),
        cols in 1usize..5,
        seed in any::<u64>(),
    ) {
        let d = k.len();
        let spec = DeltaSpec::new(beta, &k).unwrap();
        let mut rng = mgt_core::data::stream_rng("prop-additive", &[seed]);
        let x = Tensor::randn(&[d, cols], 1.0, &mut rng);
        let v = Tensor::randn(&[cols], 1.0, &mut rng);
        let out = apply_delta_block(&x, &spec, &v).unwrap();
        let kk = spec.direction();
        let mut outer = Tensor::zeros(&[d, cols]);
        for i in 0..d {
            for j in 0..cols {
                outer.set(i, j, beta * kk[i] * v.data()[j]);
            }
        }
        let expected = delta_matrix(&spec).matmul(&x).unwrap()
            .zip_map(&outer, "add", |a, b| a + b).unwrap();
        prop_assert!(out.max_abs_diff(&expected).unwrap() < 1e-12);
    }

    #[test]
    fn orthogonality_iff_beta_zero_or_two(beta in prop_oneof![Just(0.0), Just(2.0), -1.0..2.5f64], k in direction(8)) {
        let spec = DeltaSpec::new(beta, &k).unwrap();
        let a = delta_matrix(&spec);
        let ata = a.transpose().unwrap().matmul(&a).unwrap();
        let orthogonal = ata.max_abs_diff(&Tensor::eye(k.len())).unwrap() < 1e-10;
        prop_assert_eq!(orthogonal, orthogonality_check(beta));
    }

    #[test]
    fn singular_values_match_gram_eigenvalues(x in matrix(9)) {
        let sv = singular_values(&x).unwrap().values;
        let (s, d) = x.dims2().unwrap();
        let gram = if s <= d {
            x.matmul(&x.transpose().unwrap()).unwrap()
        } else {
            x.transpose().unwrap().matmul(&x).unwrap()
        };
        let mut eig = symmetric_eigenvalues(&gram).unwrap();
        eig.sort_by(|a, b| b.total_cmp(a));
        prop_assert_eq!(sv.len(), s.min(d));
        let scale = eig[0].max(1.0);
        for (sigma, lambda) in sv.iter().zip(&eig) {
            prop_assert!((sigma * sigma - lambda.max(0.0)).abs() < 1e-9 * scale);
        }
        let frob2: f64 = x.data().iter().map(|v| v * v).sum();
        let sum2: f64 = sv.iter().map(|v| v * v).sum();
        prop_assert!((frob2 - sum2).abs() < 1e-10 * frob2.max(1.0));
    }

    #[test]
    fn effective_rank_bounds_and_scale_invariance(x in matrix(8), c in prop_oneof![1e-3..1e3f64, -1e3..-1e-3f64]) {
        prop_assume!(x.max_abs() > 1e-3);
        let (s, d) = x.dims2().unwrap();
        let r = effective_rank(&x).unwrap();
        let floor = 1.0 / s.min(d) as f64;
        prop_assert!(r >= floor - 1e-12 && r <= 1.0 + 1e-12, "{r}");
        let scaled = effective_rank(&x.map(|v| c * v)).unwrap();
        prop_assert!((r - scaled).abs() < 1e-10);
    }

    #[test]
    fn config_echo_round_trips(depth in 0usize..40, width_mult in 1usize..16, lr in 1e-5..1e-1f64, seeds in prop::collection::vec(0u64..1000, 1..4)) {
        let mut c = ExperimentConfig::default();
        c.model.depth = depth;
        c.model.width = 4 * width_mult;
        c.optim.learning_rate = lr;
        c.seeds = seeds;
        let mut back = ExperimentConfig::default();
        for line in c.echo().lines() {
            let (k, v) = line.split_once('=').unwrap();
            back.set(k, v).unwrap();
        }
        prop_assert_eq!(back, c);
    }
}
