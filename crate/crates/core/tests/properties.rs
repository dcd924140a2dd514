use std::collections::BTreeSet;

use adaloc::adaptation::{finetune, TrainConfig, TrainStrategy};
use adaloc::bounds::{spectral_norm, SPECTRAL_ITERATIONS};
use adaloc::data::{gen_blobs, BlobsConfig, Split};
use adaloc::keying::{
    localize_key, select_units, selection_count, unit_l1_norms, Key, KeySpec,
    Strategy as KeyStrategy,
};
use adaloc::locking::{lock, refresh_key, unlock};
use adaloc::model_io::{decode_model, encode_model};
use adaloc::network::{coord_of, forward, index_of, init_network, ModelTag};
use adaloc::stats::spearman;
use adaloc::tensor::relu;
use adaloc::{NetworkSpec, Tensor};
use proptest::prelude::*;

fn widths() -> impl Strategy<Value = Vec<usize>> {
    prop::collection::vec(1usize..12, 3..5)
}

fn strategy() -> impl Strategy<Value = KeyStrategy> {
    prop_oneof![
        Just(KeyStrategy::Top),
        Just(KeyStrategy::PoolSample),
        Just(KeyStrategy::Random),
        Just(KeyStrategy::Bottom)
    ]
}

/// Largest singular value from the eigenvalues of `AᵀA` by cyclic Jacobi
/// rotations.
fn jacobi_sigma_max(rows: usize, cols: usize, a: &[f64]) -> f64 {
    let mut m = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            m[i * cols + j] = (0..rows).map(|r| a[r * cols + i] * a[r * cols + j]).sum();
        }
    }
    for _ in 0..100 {
        let off: f64 = (0..cols)
            .flat_map(|i| (0..cols).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * cols + j].powi(2))
            .sum();
        if off < 1e-24 {
            break;
        }
        for p in 0..cols {
            for q in p + 1..cols {
                let apq = m[p * cols + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (m[q * cols + q] - m[p * cols + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..cols {
                    let mkp = m[k * cols + p];
                    let mkq = m[k * cols + q];
                    m[k * cols + p] = c * mkp - s * mkq;
                    m[k * cols + q] = s * mkp + c * mkq;
                }
                for k in 0..cols {
                    let mpk = m[p * cols + k];
                    let mqk = m[q * cols + k];
                    m[p * cols + k] = c * mpk - s * mqk;
                    m[q * cols + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    (0..cols)
        .map(|i| m[i * cols + i])
        .fold(0.0, f64::max)
        .sqrt()
}

proptest! {
    #[test]
    fn flat_index_is_a_bijection(w in widths(), seed in 0u64..1000) {
        let store = init_network(&NetworkSpec::mlp(&w).unwrap(), seed).unwrap();
        for i in 0..store.len() {
            let c = coord_of(store.layout(), i).unwrap();
            prop_assert_eq!(index_of(store.layout(), c).unwrap(), i);
        }
        prop_assert!(coord_of(store.layout(), store.len()).is_err());
    }

    #[test]
    fn lock_unlock_restores_bits(
        w in widths(),
        seed in 0u64..1000,
        rho in 0.01f64..1.0,
        strat in strategy(),
    ) {
        let theta = init_network(&NetworkSpec::mlp(&w).unwrap(), seed).unwrap();
        let spec = KeySpec { rho, pool_fraction: 1.0, strategy: strat, seed };
        let key = localize_key(&theta, &spec).unwrap();
        let locked = lock(&theta, &key).unwrap();
        for i in key.indices() {
            prop_assert_eq!(locked.params().values()[i].to_bits(), 0);
        }
        prop_assert_eq!(unlock(&locked, &key).unwrap(), theta);
    }

    #[test]
    fn arbitrary_index_keys_round_trip(
        w in widths(),
        seed in 0u64..1000,
        picks in prop::collection::btree_set(0usize..10_000, 1..40),
    ) {
        let theta = init_network(&NetworkSpec::mlp(&w).unwrap(), seed).unwrap();
        let idx: BTreeSet<usize> = picks.into_iter().map(|i| i % theta.len()).collect();
        let key = Key::from_indices(&theta, idx, KeySpec::default()).unwrap();
        let back = Key::from_json(&key.to_json().unwrap()).unwrap();
        prop_assert_eq!(&back, &key);
        prop_assert_eq!(unlock(&lock(&theta, &back).unwrap(), &back).unwrap(), theta);
    }

    #[test]
    fn selection_count_is_the_ceiling(units in 1usize..500, pct in 1u32..=100) {
        let rho = pct as f64 / 100.0;
        let k = selection_count(rho, units);
        // exact integer ceiling of pct·units / 100
        let expected = ((pct as usize * units).div_ceil(100)).max(1);
        prop_assert_eq!(k, expected);
    }

    #[test]
    fn top_selection_dominates_the_rest(w in widths(), seed in 0u64..1000, rho in 0.05f64..1.0) {
        let theta = init_network(&NetworkSpec::mlp(&w).unwrap(), seed).unwrap();
        let units = select_units(&theta, &KeySpec::top(rho)).unwrap();
        for layer in 0..w.len() - 2 {
            let norms = unit_l1_norms(&theta, layer).unwrap();
            let chosen: BTreeSet<usize> =
                units.iter().filter(|u| u.layer == layer).map(|u| u.unit).collect();
            prop_assert_eq!(chosen.len(), selection_count(rho, norms.len()));
            let min_in = chosen.iter().map(|&u| norms[u]).fold(f64::INFINITY, f64::min);
            for (u, &n) in norms.iter().enumerate() {
                if !chosen.contains(&u) {
                    prop_assert!(n <= min_in);
                }
            }
        }
    }

    #[test]
    fn pool_sample_stays_in_pool(w in widths(), seed in 0u64..1000) {
        let theta = init_network(&NetworkSpec::mlp(&w).unwrap(), seed).unwrap();
        let spec = KeySpec { rho: 0.2, pool_fraction: 0.6, strategy: KeyStrategy::PoolSample, seed };
        let units = select_units(&theta, &spec).unwrap();
        let pool = select_units(&theta, &KeySpec::top(0.6)).unwrap();
        for u in &units {
            prop_assert!(pool.contains(u));
        }
    }

    #[test]
    fn relu_is_one_lipschitz(
        a in prop::collection::vec(-10.0f64..10.0, 1..30),
        shift in prop::collection::vec(-10.0f64..10.0, 30),
    ) {
        let b: Vec<f64> = a.iter().zip(&shift).map(|(x, s)| x + s).collect();
        let ra = relu(&Tensor::vector(a.clone()));
        let rb = relu(&Tensor::vector(b.clone()));
        let d_out: f64 = ra.data().iter().zip(rb.data()).map(|(x, y)| (x - y).powi(2)).sum();
        let d_in: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
        prop_assert!(d_out <= d_in + 1e-12);
    }

    #[test]
    fn power_iteration_matches_jacobi(
        rows in 1usize..8,
        cols in 1usize..8,
        data in prop::collection::vec(-3.0f64..3.0, 64),
    ) {
        let a: Vec<f64> = data[..rows * cols].to_vec();
        let m = Tensor::matrix(rows, cols, a.clone()).unwrap();
        let got = spectral_norm(&m, SPECTRAL_ITERATIONS).unwrap();
        let want = jacobi_sigma_max(rows, cols, &a);
        prop_assert!((got - want).abs() <= 1e-6 * want.max(1.0), "{got} vs {want}");
    }

    #[test]
    fn model_bytes_round_trip(w in widths(), seed in 0u64..1000) {
        let s = init_network(&NetworkSpec::mlp(&w).unwrap(), seed).unwrap();
        let bytes = encode_model(&s);
        prop_assert_eq!(decode_model(&bytes).unwrap(), s);
    }

    #[test]
    fn spearman_is_invariant_to_monotone_maps(v in prop::collection::vec(-5.0f64..5.0, 3..40)) {
        let u: Vec<f64> = v.iter().map(|x| x.exp()).collect();
        if let Some(r) = spearman(&v, &u) {
            prop_assert!((r - 1.0).abs() < 1e-12);
        }
        let neg: Vec<f64> = v.iter().map(|x| -x * x * x).collect();
        if let Some(r) = spearman(&v, &neg) {
            prop_assert!((r + 1.0).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn key_only_training_freezes_the_rest(seed in 0u64..1000, strat in strategy()) {
        let blobs = BlobsConfig { per_class: 8, ..BlobsConfig::new(3, 6, 8, 0.2, seed) };
        let train = gen_blobs(&blobs, Split::Train).unwrap();
        let theta = init_network(&NetworkSpec::mlp(&[6, 10, 8, 3]).unwrap(), seed)
            .unwrap()
            .with_tag(ModelTag::Pretrained);
        let spec = KeySpec { rho: 0.3, pool_fraction: 0.6, strategy: strat, seed };
        let key = localize_key(&theta, &spec).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed,
            strategy: TrainStrategy::KeyTop,
            ..TrainConfig::default()
        };
        let adapted = finetune(&theta, &train, None, &cfg, Some(&key)).unwrap().params;
        let in_key = key.index_set();
        for (i, (a, b)) in theta.values().iter().zip(adapted.values()).enumerate() {
            if !in_key.contains(&i) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
        let locked = lock(&theta, &key).unwrap();
        let fresh = refresh_key(&adapted, &key, &locked).unwrap();
        let restored = unlock(&locked, &fresh).unwrap();
        prop_assert_eq!(restored.values(), adapted.values());
        // Locking the adapted model gives back the same locked model.
        prop_assert_eq!(lock(&adapted, &fresh).unwrap().fingerprint(), locked.fingerprint());
    }

    #[test]
    fn zeroed_key_matches_forward_of_locked(seed in 0u64..1000) {
        let theta = init_network(&NetworkSpec::mlp(&[5, 7, 6, 3]).unwrap(), seed).unwrap();
        let key = localize_key(&theta, &KeySpec::top(0.3)).unwrap();
        let locked = lock(&theta, &key).unwrap();
        let mut manual = theta.clone().with_tag(ModelTag::Locked);
        for i in key.indices() {
            manual.values_mut()[i] = 0.0;
        }
        let x = Tensor::vector(vec![0.3, -0.1, 0.7, 0.2, -0.5]);
        let a = forward(locked.params(), &x).unwrap();
        let b = forward(&manual, &x).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }
}
