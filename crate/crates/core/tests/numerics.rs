mod common;

use flute_core::numerics::{f16_to_f32, f32_to_f16, mma_fragment, FragmentShape, Half};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn reference_narrow(x: f32) -> u16 {
    half::f16::from_f32(x).to_bits()
}

#[test]
fn widening_matches_reference_for_every_pattern() {
    for bits in 0..=u16::MAX {
        let got = f16_to_f32(Half::from_bits(bits));
        let want = half::f16::from_bits(bits).to_f32();
        if want.is_nan() {
            assert!(got.is_nan(), "{bits:#06x}");
        } else {
            assert_eq!(got.to_bits(), want.to_bits(), "{bits:#06x}");
        }
    }
}

#[test]
fn narrowing_roundtrips_every_non_nan_pattern() {
    for bits in 0..=u16::MAX {
        let h = Half::from_bits(bits);
        if h.is_nan() {
            assert!(f32_to_f16(f16_to_f32(h)).is_nan());
        } else {
            assert_eq!(f32_to_f16(f16_to_f32(h)).to_bits(), bits);
        }
    }
}

#[test]
fn narrowing_matches_reference_on_random_binary32() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1_000_000 {
        let x = f32::from_bits(rng.gen());
        let got = f32_to_f16(x);
        if x.is_nan() {
            assert!(got.is_nan());
        } else {
            assert_eq!(
                got.to_bits(),
                reference_narrow(x),
                "{x:e} ({:#010x})",
                x.to_bits()
            );
        }
    }
}

#[test]
fn narrowing_matches_reference_near_half_range() {
    // Dense sweep over the binary32 values whose magnitude lands in or near
    // the binary16 subnormal/normal/overflow boundaries.
    for exp in 100u32..=145 {
        for mant in (0..1u32 << 23).step_by(997) {
            for sign in [0u32, 1] {
                let x = f32::from_bits(sign << 31 | exp << 23 | mant);
                assert_eq!(f32_to_f16(x).to_bits(), reference_narrow(x), "{x:e}");
            }
        }
    }
}

#[test]
fn fragment_product_within_rounding_bound_of_binary64() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shape = FragmentShape::default();
    for _ in 0..200 {
        let a: Vec<Half> = (0..shape.m * shape.k)
            .map(|_| f32_to_f16(rng.gen_range(-4.0..4.0)))
            .collect();
        let b: Vec<Half> = (0..shape.k * shape.n)
            .map(|_| f32_to_f16(rng.gen_range(-4.0..4.0)))
            .collect();
        let mut c = vec![0.0f32; shape.m * shape.n];
        mma_fragment(shape, &a, &b, &mut c).unwrap();
        let amax = a
            .iter()
            .map(|&h| common::half_to_f64(h).abs())
            .fold(0.0, f64::max);
        let bmax = b
            .iter()
            .map(|&h| common::half_to_f64(h).abs())
            .fold(0.0, f64::max);
        let bound = shape.k as f64 * 2f64.powi(-24) * amax * bmax;
        for i in 0..shape.m {
            for j in 0..shape.n {
                let exact: f64 = (0..shape.k)
                    .map(|p| {
                        common::half_to_f64(a[i * shape.k + p])
                            * common::half_to_f64(b[p * shape.n + j])
                    })
                    .sum();
                let err = (c[i * shape.n + j] as f64 - exact).abs();
                assert!(err <= bound, "({i},{j}) err {err:e} > {bound:e}");
            }
        }
    }
}

proptest! {
    #[test]
    fn narrowing_is_monotone(a in -70000.0f32..70000.0, b in -70000.0f32..70000.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(f16_to_f32(f32_to_f16(lo)) <= f16_to_f32(f32_to_f16(hi)));
    }

    #[test]
    fn narrowing_picks_a_nearest_neighbour(x in -65504.0f32..65504.0) {
        let h = f16_to_f32(f32_to_f16(x));
        let step = f16_to_f32(Half::from_bits(f32_to_f16(x.abs()).to_bits() + 1)) - f16_to_f32(f32_to_f16(x.abs()));
        prop_assert!((h - x).abs() <= step.abs());
    }

    #[test]
    fn product_of_halves_is_exact_in_binary32(a in any::<u16>(), b in any::<u16>()) {
        let (ha, hb) = (Half::from_bits(a), Half::from_bits(b));
        prop_assume!(ha.is_finite() && hb.is_finite());
        let p = f16_to_f32(ha) as f64 * f16_to_f32(hb) as f64;
        prop_assert_eq!((f16_to_f32(ha) * f16_to_f32(hb)) as f64, p);
    }
}
