//! Property tests for the invariants the model relies on.

mod common;

use common::oracles;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use refvos::memory::MemoryBank;
use refvos::metrics::{boundary_accuracy_f, region_similarity_j, BinaryMask};
use refvos::nn::{Ctx, ParamBuilder, ParamStore};
use refvos::prior::{ContextToggles, MaskPriorGenerator};
use refvos::training::{dice_loss, focal_loss, mask_text_similarity_loss, FocalParams};
use refvos::{Tape, Tensor};

fn tensor(shape: &[usize], vals: Vec<f64>) -> Tensor {
    Tensor::new(shape, vals).unwrap()
}

fn mask_strategy() -> impl Strategy<Value = (usize, usize, Vec<bool>, Vec<bool>)> {
    (1usize..=12, 1usize..=12).prop_flat_map(|(h, w)| {
        (
            Just(h),
            Just(w),
            prop::collection::vec(any::<bool>(), h * w),
            prop::collection::vec(any::<bool>(), h * w),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn fifo_law(len in 0usize..=40, fcap in 1usize..=9, tcap in 1usize..=18) {
        let mut bank = MemoryBank::with_capacity(2, 1, fcap, tcap);
        let mut pushed = Vec::new();
        for i in 0..len {
            let v = i as f64;
            bank.push_frame(Tensor::full(&[2, 1], v), Tensor::full(&[1, 1], v)).unwrap();
            pushed.push(v);
            let s = bank.snapshot();
            let feats: Vec<f64> = s.features.data().chunks(2).map(|c| c[0]).collect();
            prop_assert_eq!(&feats[..], &pushed[pushed.len().saturating_sub(fcap)..]);
            prop_assert_eq!(s.tokens.data(), &pushed[pushed.len().saturating_sub(tcap)..]);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one(rows in 1usize..6, cols in 1usize..9, scale in 0.1f64..50.0, seed in any::<u64>()) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        use rand::Rng;
        let x = Tensor::from_fn(&[rows, cols], |_| r.gen_range(-scale..scale));
        let s = x.softmax_lastdim();
        for row in s.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn metric_symmetry_and_identity((h, w, a, b) in mask_strategy(), tol in 0usize..3) {
        let ma = BinaryMask::new(h, w, a.clone()).unwrap();
        let mb = BinaryMask::new(h, w, b.clone()).unwrap();
        prop_assert_eq!(region_similarity_j(&ma, &mb).unwrap(), region_similarity_j(&mb, &ma).unwrap());
        prop_assert_eq!(boundary_accuracy_f(&ma, &mb, tol).unwrap(), boundary_accuracy_f(&mb, &ma, tol).unwrap());
        prop_assert_eq!(region_similarity_j(&ma, &ma).unwrap(), 1.0);
        prop_assert_eq!(boundary_accuracy_f(&ma, &ma, tol).unwrap(), 1.0);
        prop_assert_eq!(boundary_accuracy_f(&ma, &mb, tol).unwrap(), oracles::boundary_f_all_pairs(&a, &b, h, w, tol));
    }

    #[test]
    fn j_nonincreasing_under_disjoint_noise((h, w, a, b) in mask_strategy(), noise in prop::collection::vec(any::<bool>(), 144)) {
        let gt = BinaryMask::new(h, w, a.clone()).unwrap();
        let mut pred = b;
        let before = region_similarity_j(&BinaryMask::new(h, w, pred.clone()).unwrap(), &gt).unwrap();
        for i in 0..h * w {
            if noise[i] && !a[i] {
                pred[i] = true;
            }
        }
        let after = region_similarity_j(&BinaryMask::new(h, w, pred).unwrap(), &gt).unwrap();
        prop_assert!(after <= before);
    }

    #[test]
    fn loss_ranges(vals in prop::collection::vec((0.001f64..0.999, any::<bool>(), -6.0f64..6.0), 2 * 16)) {
        let tape = Tape::new();
        let p = tensor(&[2, 4, 4], vals.iter().map(|v| v.0).collect());
        let g = tensor(&[2, 4, 4], vals.iter().map(|v| f64::from(v.1)).collect());
        let x = tensor(&[2, 4, 4], vals.iter().map(|v| v.2).collect());
        let d = dice_loss(tape.constant(p.clone()), &g).unwrap().value().item().unwrap();
        prop_assert!((0.0..=1.0).contains(&d));
        let f = focal_loss(tape.constant(x), &g, FocalParams::default()).unwrap().value().item().unwrap();
        prop_assert!(f >= 0.0);
        let w = tape.constant(p.reshape(&[32, 1]).unwrap());
        let feats = tape.constant(Tensor::from_fn(&[32, 3], |i| (i as f64 * 0.37).sin()));
        let s = tape.constant(Tensor::from_fn(&[1, 3], |i| vals[i].2));
        let l = mask_text_similarity_loss(&[w], &[feats], s).unwrap().value().item().unwrap();
        prop_assert!((-1e-12..=2.0 + 1e-12).contains(&l));
    }

    #[test]
    fn losses_equivariant_to_frame_order(vals in prop::collection::vec((0.001f64..0.999, any::<bool>()), 3 * 9)) {
        let tape = Tape::new();
        let p = tensor(&[3, 3, 3], vals.iter().map(|v| v.0).collect());
        let g = tensor(&[3, 3, 3], vals.iter().map(|v| f64::from(v.1)).collect());
        let perm = |t: &Tensor| {
            let parts = [t.slice(0, 2, 3).unwrap(), t.slice(0, 0, 1).unwrap(), t.slice(0, 1, 2).unwrap()];
            Tensor::concat(&[&parts[0], &parts[1], &parts[2]], 0).unwrap()
        };
        let a = dice_loss(tape.constant(p.clone()), &g).unwrap().value().item().unwrap();
        let b = dice_loss(tape.constant(perm(&p)), &perm(&g)).unwrap().value().item().unwrap();
        prop_assert!((a - b).abs() < 1e-12);
        let a = focal_loss(tape.constant(p.clone()), &g, FocalParams::default()).unwrap().value().item().unwrap();
        let b = focal_loss(tape.constant(perm(&p)), &perm(&g), FocalParams::default()).unwrap().value().item().unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn priors_in_open_unit_interval(seed in any::<u64>(), t in 1usize..3, scale in 0.1f64..20.0) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = MaskPriorGenerator::new(&mut ParamBuilder::new(&mut store, &mut rng), 8, 2, 2);
        let v = Tensor::from_fn(&[t, 4, 8], |i| ((i * 31 + seed as usize % 97) as f64).sin() * scale);
        let c = Tensor::from_fn(&[t, 1, 8], |i| ((i * 17) as f64).cos() * scale);
        let tape = Tape::new();
        let cx = Ctx::infer(&tape, &store);
        let out = g.forward(&cx, cx.constant(v), cx.constant(c), ContextToggles::default(), 16).unwrap();
        let (mp, dense) = (out.m_p.value(), out.dense.value());
        prop_assert!(mp.data().iter().chain(dense.data()).all(|&x| x > 0.0 && x < 1.0));
    }
}
