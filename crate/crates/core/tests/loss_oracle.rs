//! Loss checked against the definition-level oracle and finite differences.

mod common;

use std::collections::BTreeMap;

use common::{finite_difference, max_relative_error, naive_infonce, naive_infonce_parts, naive_term, random_matrix};
use csf::encoder::{stack_batch, Encoder, EncoderConfig};
use csf::loss::{layer_infonce_grad, layer_infonce_loss, layer_infonce_parts, total_loss, LossWeights};
use csf::scenes::{fuse_and_upsample, generate_scene, make_default_suite};
use csf::views::{make_view, ViewConfig};
use ndarray::array;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn identity_case_forward_term_by_hand() {
    let z = array![[1.0, 0.0], [0.0, 1.0]];
    let hand = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    assert!((hand - 0.31326).abs() < 1e-5);
    let (f, b) = naive_infonce_parts(&z, &z);
    assert!((f - hand).abs() < 1e-12 && (b - hand).abs() < 1e-12);
    let parts = layer_infonce_parts(z.view(), z.view()).unwrap();
    assert!((parts.forward - hand).abs() < 1e-12);
}

#[test]
fn single_element_batch_has_zero_loss() {
    let z = array![[3.0, -1.0]];
    assert_eq!(naive_term(&z, &z, 0, &[]), 0.0);
    assert!(layer_infonce_loss(z.view(), z.view()).unwrap().abs() < 1e-15);
}

#[test]
fn weighted_total_matches_oracle_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a1 = random_matrix(&mut rng, 5, 4, 1.0);
    let a2 = random_matrix(&mut rng, 5, 4, 1.0);
    let b1 = random_matrix(&mut rng, 5, 7, 1.0);
    let b2 = random_matrix(&mut rng, 5, 7, 1.0);
    let r1 = csf::loss::LayerRepresentation {
        layers: BTreeMap::from([(2, a1.clone()), (3, b1.clone())]),
    };
    let r2 = csf::loss::LayerRepresentation {
        layers: BTreeMap::from([(2, a2.clone()), (3, b2.clone())]),
    };
    let w = LossWeights::new(BTreeMap::from([(2, 1.0), (3, 2.0)])).unwrap();
    let expect = naive_infonce(&a1, &a2) + 2.0 * naive_infonce(&b1, &b2);
    assert!((total_loss(&r1, &r2, &w).unwrap() - expect).abs() < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn oracle_equivalence_property(b in 1usize..=8, d in 1usize..=16, seed in any::<u64>(), scale in 0.1f64..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z1 = random_matrix(&mut rng, b, d, scale);
        let z2 = random_matrix(&mut rng, b, d, scale);
        let lib = layer_infonce_loss(z1.view(), z2.view()).unwrap();
        prop_assert!((lib - naive_infonce(&z1, &z2)).abs() < 1e-6);
    }

    #[test]
    fn gradient_matches_finite_differences(b in 2usize..=6, d in 1usize..=8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z1 = random_matrix(&mut rng, b, d, 1.0);
        let z2 = random_matrix(&mut rng, b, d, 1.0);
        let (_, g1, g2) = layer_infonce_grad(z1.view(), z2.view()).unwrap();
        let n1 = finite_difference(|z| naive_infonce(z, &z2), &z1, 1e-4);
        let n2 = finite_difference(|z| naive_infonce(&z1, z), &z2, 1e-4);
        prop_assert!(max_relative_error(&g1, &n1, 1e-6) < 1e-3);
        prop_assert!(max_relative_error(&g2, &n2, 1e-6) < 1e-3);
    }
}

/// With B copies of one scene every candidate is a view of the same
/// location, so at initialisation the loss sits near the confusion bound
/// 2 log B per unit weight. Over 10 initialisation seeds the measured mean is
/// about 14% above the bound, because augmented views are not exactly equal.
#[test]
fn identical_scene_batch_sits_near_confusion_bound() {
    let suite = make_default_suite();
    let scene = fuse_and_upsample(&generate_scene(&suite, 4, 21, (48, 48)).unwrap(), &suite).unwrap();
    let b = 8;
    let weights = LossWeights::default_for(&[2, 3]).unwrap();
    let bound = 2.0 * (b as f64).ln() * weights.sum();
    let mut losses = Vec::new();
    for seed in 0..10 {
        let enc = Encoder::build(&EncoderConfig {
            rng_seed: seed,
            ..EncoderConfig::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let cfg = ViewConfig::default();
        let views = |rng: &mut ChaCha8Rng| {
            let v: Vec<_> = (0..b).map(|_| make_view(&scene, &cfg, rng).unwrap().data).collect();
            stack_batch(v.iter().map(|a| a.view())).unwrap()
        };
        let x1 = views(&mut rng);
        let x2 = views(&mut rng);
        let r1 = enc.encode_multi_layer(x1.view()).unwrap();
        let r2 = enc.encode_multi_layer(x2.view()).unwrap();
        losses.push(total_loss(&r1, &r2, &weights).unwrap());
    }
    let mean = losses.iter().sum::<f64>() / losses.len() as f64;
    assert!((mean - bound).abs() / bound < 0.2, "mean {mean} bound {bound} all {losses:?}");

    // Exactly identical inputs give exactly the bound.
    let enc = Encoder::build(&EncoderConfig::default()).unwrap();
    let x = stack_batch((0..b).map(|_| scene.data.view().slice_move(ndarray::s![.., 6..42, 6..42]))).unwrap();
    let r = enc.encode_multi_layer(x.view()).unwrap();
    let exact = total_loss(&r, &r, &weights).unwrap();
    assert!((exact - bound).abs() < 1e-6, "{exact} vs {bound}");
}
