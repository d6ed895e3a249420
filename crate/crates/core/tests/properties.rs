use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest, ProptestConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rde_core::encoders::{KeyMap, ObjectMask, ValueMap};
use rde_core::losses::{morph_mask, unbiased_guidance_loss, Morph};
use rde_core::memory::{
    assemble_bank, ema_blend, MemoryBank, MemorySlot, Origin, Pattern, RdeState, Strategy,
};
use rde_core::readout::{affinity, readout, similarity, topk_filter};
use rde_core::{ops, Tape, Tensor};

fn tensor(shape: &[usize], seed: u64) -> Tensor {
    Tensor::uniform(shape, -2.0, 2.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn slot(seed: u64, origin: Origin, frame: usize) -> MemorySlot {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    MemorySlot::new(
        KeyMap(Tensor::randn(&[4, 2, 2], 1.0, &mut rng)),
        ValueMap(vec![Tensor::randn(&[5, 2, 2], 1.0, &mut rng)]),
        origin,
        frame,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_sums_to_one_and_ignores_shifts(seed in 0u64..10_000, rows in 1usize..6, cols in 1usize..6, shift in -50.0f64..50.0) {
        let x = tensor(&[rows, cols], seed);
        let y = ops::softmax(&x, 0).unwrap();
        for j in 0..cols {
            let s: f64 = (0..rows).map(|i| y.at(&[i, j])).sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
        }
        let shifted = ops::softmax(&x.map(|v| v + shift), 0).unwrap();
        prop_assert!(shifted.max_abs_diff(&y) < 1e-10);
    }

    #[test]
    fn kl_is_non_negative_and_zero_on_equal(seed in 0u64..10_000, n in 2usize..8) {
        let p = ops::softmax(&tensor(&[n, 3], seed), 0).unwrap();
        let q = ops::softmax(&tensor(&[n, 3], seed + 1), 0).unwrap();
        prop_assert!(ops::kl_divergence(&p, &q, 0).unwrap() >= -1e-12);
        prop_assert!(ops::kl_divergence(&p, &p, 0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn affinity_columns_sum_to_one(seed in 0u64..10_000, nm in 1usize..40, nq in 1usize..20, k in 1usize..40) {
        let s = similarity(&tensor(&[8, nm], seed), &tensor(&[8, nq], seed + 7)).unwrap();
        prop_assert!(s.data().iter().all(|&v| v <= 0.0));
        let w = affinity(&topk_filter(&s, k.min(nm)).unwrap()).unwrap();
        for j in 0..nq {
            let total: f64 = (0..nm).map(|i| w.0.at(&[i, j])).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn full_topk_is_the_dense_pipeline(seed in 0u64..10_000, nm in 1usize..30, nq in 1usize..10) {
        let s = similarity(&tensor(&[6, nm], seed), &tensor(&[6, nq], seed + 3)).unwrap();
        let v = tensor(&[4, nm], seed + 5);
        let dense = readout(&affinity(&s).unwrap(), &v).unwrap();
        let full = readout(&affinity(&topk_filter(&s, nm).unwrap()).unwrap(), &v).unwrap();
        prop_assert_eq!(dense, full);
    }

    #[test]
    fn readout_is_linear_and_keeps_constants(seed in 0u64..10_000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0, c in -5.0f64..5.0) {
        let w = affinity(&similarity(&tensor(&[6, 12], seed), &tensor(&[6, 5], seed + 1)).unwrap()).unwrap();
        let v1 = tensor(&[4, 12], seed + 2);
        let v2 = tensor(&[4, 12], seed + 3);
        let mix = Tensor::from_fn(&[4, 12], |i| alpha * v1.data()[i] + beta * v2.data()[i]);
        let lhs = readout(&w, &mix).unwrap();
        let r1 = readout(&w, &v1).unwrap();
        let r2 = readout(&w, &v2).unwrap();
        let rhs = Tensor::from_fn(lhs.shape(), |i| alpha * r1.data()[i] + beta * r2.data()[i]);
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
        let constant = readout(&w, &Tensor::full(&[4, 12], c)).unwrap();
        prop_assert!(constant.data().iter().all(|&x| (x - c).abs() < 1e-12));
    }

    #[test]
    fn stm_growth_is_affine(theta in 1usize..7, frames in 1usize..40) {
        let mut bank = MemoryBank::new(Pattern::Stm, theta).unwrap();
        let per_slot = slot(0, Origin::Gt, 0).float_count();
        for f in 0..frames {
            bank.stm_append(slot(f as u64, Origin::Historical, f)).unwrap();
        }
        let expected = (frames - 1) / theta + 1;
        prop_assert_eq!(bank.len(), expected);
        prop_assert_eq!(bank.float_count(), expected * per_slot);
    }

    #[test]
    fn strategy_banks_have_fixed_size(seed in 0u64..10_000, index in 0usize..10, frame in 1usize..500) {
        let strategy = Strategy::ALL[index];
        let gt = slot(seed, Origin::Gt, 0);
        let latest = slot(seed + 1, Origin::Latest, frame);
        let rde = RdeState::from_slot(&slot(seed + 2, Origin::Rde, frame));
        let bank = assemble_bank(&gt, &latest, &rde, strategy, 3).unwrap();
        prop_assert_eq!(bank.len(), strategy.slot_count());
        prop_assert_eq!(bank.float_count(), strategy.slot_count() * gt.float_count());
    }

    #[test]
    fn ema_degenerate_weights(seed in 0u64..10_000) {
        let old = tensor(&[3, 4], seed);
        let query = tensor(&[3, 4], seed + 1);
        prop_assert_eq!(ema_blend(&old, &query, 1.0).unwrap(), old.clone());
        prop_assert_eq!(ema_blend(&old, &query, 0.0).unwrap(), query);
    }

    #[test]
    fn dilation_grows_and_erosion_shrinks(
        labels in prop::collection::vec(0u8..3, 64),
        radius in 0usize..4,
    ) {
        let mask = ObjectMask::new(8, 8, 2, labels).unwrap();
        let grown = morph_mask(&mask, &[(Morph::Dilate, radius), (Morph::Dilate, radius)]).unwrap();
        let shrunk = morph_mask(&mask, &[(Morph::Erode, radius), (Morph::Erode, radius)]).unwrap();
        prop_assert!(grown.pixel_count(1) >= mask.pixel_count(1));
        for id in 1..=2 {
            prop_assert!(shrunk.pixel_count(id) <= mask.pixel_count(id));
            let iou = grown.iou(&mask, id);
            prop_assert!((0.0..=1.0).contains(&iou));
        }
    }

    #[test]
    fn guidance_is_non_negative(seed in 0u64..10_000) {
        let tape = Tape::inference();
        let a = tape.constant(tensor(&[5, 2, 2], seed));
        let b = tape.constant(tensor(&[5, 2, 2], seed + 1));
        let ab = unbiased_guidance_loss(&[a.clone()], &[b.clone()]).unwrap().value().item().unwrap();
        prop_assert!(ab >= -1e-12);
        let aa = unbiased_guidance_loss(&[a.clone()], &[a]).unwrap().value().item().unwrap();
        prop_assert!(aa.abs() < 1e-12);
    }
}
