use proptest::prelude::*;

use residcert::canonical::{canonical_encode, decode};
use residcert::compose::{global_bound, hybrid_block_bound, sum_epsilons, BoundInputs};
use residcert::edit::PatchSpec;
use residcert::metrics::BlockMetrics;
use residcert::pipeline::parse_layers;
use residcert::tensor::{self, Tensor};

fn eps_lip() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1usize..=8).prop_flat_map(|n| (prop::collection::vec(0.0f64..10.0, n), prop::collection::vec(0.0f64..5.0, n)))
}

proptest! {
    #[test]
    fn global_bound_is_monotone((eps, lip) in eps_lip(), i in 0usize..8, bump in 0.0f64..3.0) {
        let i = i % eps.len();
        let g = global_bound(&BoundInputs::new(eps.clone(), lip.clone()).unwrap());
        let mut e2 = eps.clone();
        e2[i] += bump;
        prop_assert!(global_bound(&BoundInputs::new(e2, lip.clone()).unwrap()) >= g);
        let mut l2 = lip.clone();
        l2[i] += bump;
        prop_assert!(global_bound(&BoundInputs::new(eps, l2).unwrap()) >= g);
    }

    #[test]
    fn global_bound_matches_expanded_sum((eps, lip) in eps_lip()) {
        let n = eps.len();
        let expanded: f64 = (0..n).map(|i| eps[i] * lip[i + 1..].iter().product::<f64>()).sum();
        let g = global_bound(&BoundInputs::new(eps, lip).unwrap());
        prop_assert!((g - expanded).abs() <= 1e-12 * expanded.max(1.0));
    }

    #[test]
    fn contractive_stacks_are_bounded_by_sum((eps, lip) in eps_lip()) {
        let lip: Vec<f64> = lip.iter().map(|l| l / 5.0).collect();
        let inputs = BoundInputs::new(eps, lip).unwrap();
        prop_assert!(global_bound(&inputs) <= sum_epsilons(&inputs) * (1.0 + 1e-12));
    }

    #[test]
    fn hybrid_bound_is_product(k_attn in 0.0f64..1e4, k_mlp in 0.0f64..1e4) {
        prop_assert_eq!(hybrid_block_bound(k_attn, k_mlp).unwrap(), (1.0 + k_attn) * k_mlp);
    }

    #[test]
    fn softmax_rows_are_distributions(t in 1usize..10, seed in any::<u64>()) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let s = Tensor::random_uniform(vec![t, t], 30.0, &mut rng);
        let p = tensor::softmax_rows(&s, &Tensor::causal_mask(t)).unwrap();
        for (i, row) in p.rows().enumerate() {
            let sum: f64 = row.iter().map(|&v| v as f64).sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
            prop_assert!(row[i + 1..].iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn rope_preserves_pair_norms(t in 1usize..8, half in 1usize..8, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * half;
        let x = Tensor::random_uniform(vec![t, d], 5.0, &mut rng);
        let (c, s) = tensor::rope_tables(64, d, 10000.0);
        let pos: Vec<usize> = (0..t).map(|_| rng.gen_range(0..64)).collect();
        let y = tensor::rope_apply(&x, &c, &s, &pos).unwrap();
        for (a, b) in x.rows().zip(y.rows()) {
            for k in 0..half {
                let na = (a[2 * k] as f64).hypot(a[2 * k + 1] as f64);
                let nb = (b[2 * k] as f64).hypot(b[2 * k + 1] as f64);
                prop_assert!((na - nb).abs() <= 1e-6 * na.max(1.0));
            }
        }
    }

    #[test]
    fn metrics_round_trip_canonically(
        eps in 0.0f64..1.0, mae in 0.0f64..1.0, cov in 0.0f64..=1.0, n in 1usize..10_000,
    ) {
        let m = BlockMetrics {
            epsilon_max: eps,
            mae,
            cov_act: cov,
            cov_path: 1.0,
            cov_loss: cov,
            tau_act: 1e-2,
            tau_loss: 1e-3,
            act_covered: n / 2,
            path_covered: n,
            token_count: n,
            best_prompt_by_cov_act: 0,
            worst_prompt_by_cov_act: 3,
        };
        let bytes = canonical_encode(&m).unwrap();
        let back: BlockMetrics = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &m);
        prop_assert_eq!(canonical_encode(&back).unwrap(), bytes);
    }

    #[test]
    fn patch_specs_round_trip(block in 0usize..64, alpha in 0.0f64..=1.0) {
        let p = PatchSpec::mlp(block, alpha).unwrap();
        let back: PatchSpec = p.to_string().parse().unwrap();
        prop_assert_eq!(back, p);
    }

    #[test]
    fn layer_ranges_expand(lo in 0usize..6, len in 0usize..6) {
        let hi = lo + len;
        let layers = parse_layers(&format!("{lo}-{hi}"), 12).unwrap();
        prop_assert_eq!(layers, (lo..=hi).collect::<Vec<_>>());
    }
}

#[test]
fn non_finite_values_are_not_encoded() {
    let mut m: BlockMetrics = decode(
        &canonical_encode(&serde_json::json!({
            "epsilon_max": 0.0, "mae": 0.0, "cov_act": 1.0, "cov_path": 1.0, "cov_loss": 1.0,
            "tau_act": 0.01, "tau_loss": 0.001, "act_covered": 1, "path_covered": 1, "token_count": 1,
            "best_prompt_by_cov_act": 0, "worst_prompt_by_cov_act": 0
        }))
        .unwrap(),
    )
    .unwrap();
    m.mae = f64::NAN;
    assert!(canonical_encode(&m).is_err());
    m.mae = f64::INFINITY;
    assert!(canonical_encode(&m).is_err());
}

#[test]
fn bound_inputs_are_validated() {
    assert!(BoundInputs::new(vec![0.1], vec![1.0, 2.0]).is_err());
    assert!(BoundInputs::new(vec![-0.1], vec![1.0]).is_err());
    assert!(BoundInputs::new(vec![0.1], vec![f64::NAN]).is_err());
    assert!(hybrid_block_bound(-1.0, 1.0).is_err());
}
