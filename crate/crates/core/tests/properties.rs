use std::path::Path;

use mslora::autodiff::Tape;
use mslora::checkpoint::{decode_matrix, encode_matrix};
use mslora::lora::{BranchStack, LoraBranch};
use mslora::optim::lr_at;
use mslora::regularizers::{ortho_value, similarity_value, SimilarityOpts};
use mslora::rng::SplitMix64;
use mslora::Matrix;
use proptest::prelude::*;

fn random(seed: u64, r: usize, c: usize) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    Matrix::from_fn(r, c, |_, _| rng.normal())
}

proptest! {
    #[test]
    fn lr_bounded_and_continuous(total in 2usize..500, ratio in 0.0f64..=0.5, step_frac in 0.0f64..1.0) {
        let step = ((total as f64) * step_frac) as usize;
        let lr = lr_at(step.min(total - 1), total, 1.0, ratio);
        prop_assert!((0.0..=1.0).contains(&lr));
        let w = (ratio * total as f64).ceil() as usize;
        if w >= 1 && w < total {
            prop_assert_eq!(lr_at(w - 1, total, 1.0, ratio), 1.0);
            prop_assert_eq!(lr_at(w, total, 1.0, ratio), 1.0);
        }
    }

    #[test]
    fn similarity_symmetric_and_bounded(seed in any::<u64>(), rank in 1usize..6, normalize in any::<bool>()) {
        let (a1, b1) = (random(seed, 6, rank), random(seed ^ 1, rank, 6));
        let (a2, b2) = (random(seed ^ 2, 6, rank), random(seed ^ 3, rank, 6));
        let opts = SimilarityOpts { normalize };
        let s12 = similarity_value((&a1, &b1), (&a2, &b2), opts).unwrap();
        let s21 = similarity_value((&a2, &b2), (&a1, &b1), opts).unwrap();
        prop_assert_eq!(s12, s21);
        prop_assert!(s12 > 0.0 && s12 <= 1.0);
    }

    #[test]
    fn ortho_nonnegative(seed in any::<u64>(), rank in 1usize..8) {
        prop_assert!(ortho_value(&random(seed, 8, rank), &random(!seed, rank, 8)) >= 0.0);
    }

    #[test]
    fn masked_forward_matches_merged_delta(seed in any::<u64>(), n in 1usize..5, mask_bits in any::<u8>()) {
        let mut rng = SplitMix64::new(seed);
        let (dout, din, rank) = (5, 4, 2);
        let branches: Vec<LoraBranch> = (0..n)
            .map(|k| {
                LoraBranch::new(
                    Matrix::from_fn(dout, rank, |_, _| rng.normal()),
                    Matrix::from_fn(rank, din, |_, _| rng.normal()),
                    format!("t{k}").as_str().into(),
                    "m".into(),
                    rng.uniform_range(0.5, 2.0),
                )
                .unwrap()
            })
            .collect();
        let mask: Vec<u8> = (0..n).map(|k| (mask_bits >> k) & 1).collect();
        let w = Matrix::from_fn(dout, din, |_, _| rng.normal());
        let b = Matrix::from_fn(dout, 1, |_, _| rng.normal());
        let stack = BranchStack::from_parts(w.clone(), b.clone(), branches, mask).unwrap();
        let h = Matrix::from_fn(din, 3, |_, _| rng.normal());
        let mut tape = Tape::new();
        let binding = stack.bind(&mut tape);
        let hv = tape.constant(h.clone());
        let out = stack.forward_masked(&mut tape, &binding, hv).unwrap();
        let merged = w.add(&stack.merged_delta()).unwrap();
        let oracle = merged.matmul(&h).unwrap();
        let oracle = Matrix::from_fn(dout, 3, |i, j| oracle.get(i, j) + b.get(i, 0));
        prop_assert!(tape.value(out).max_abs_diff(&oracle).unwrap() < 1e-12);
    }

    #[test]
    fn matrix_bytes_round_trip(seed in any::<u64>(), r in 0usize..6, c in 0usize..6) {
        let m = random(seed, r, c);
        let back = decode_matrix(&encode_matrix(&m).unwrap(), Path::new("m")).unwrap();
        prop_assert!(back.bitwise_eq(&m));
    }

    #[test]
    fn transpose_is_involution(seed in any::<u64>(), r in 1usize..7, c in 1usize..7) {
        let m = random(seed, r, c);
        prop_assert!(m.transpose().transpose().bitwise_eq(&m));
    }
}
