use super::{Precision, Tensor};

/// Rounds an f32 to the nearest bfloat16 value, ties to even, returned as f32.
///
/// NaN and infinities pass through unchanged.
#[inline]
pub fn round_bf16_scalar(x: f32) -> f32 {
    if x.is_nan() {
        return x;
    }
    let bits = x.to_bits();
    let lsb = (bits >> 16) & 1;
    f32::from_bits(bits.wrapping_add(0x7FFF + lsb) & 0xFFFF_0000)
}

pub fn round_bf16_slice(xs: &mut [f32]) {
    for x in xs {
        *x = round_bf16_scalar(*x);
    }
}

pub fn round_bf16(x: &Tensor) -> Tensor {
    x.clone().with_precision(Precision::Bf16E)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Independent oracle: pick the nearer of the two bf16 neighbours in f64,
    /// breaking ties on the even mantissa.
    fn oracle(x: f32) -> f32 {
        let lo_bits = x.to_bits() & 0xFFFF_0000;
        let lo = f32::from_bits(lo_bits);
        let hi = f32::from_bits(lo_bits + 0x1_0000);
        let dlo = (x as f64 - lo as f64).abs();
        let dhi = (hi as f64 - x as f64).abs();
        if dlo < dhi {
            lo
        } else if dhi < dlo {
            hi
        } else if (lo_bits >> 16) & 1 == 0 {
            lo
        } else {
            hi
        }
    }

    #[test]
    fn exact_values_survive() {
        for x in [1.0f32, -2.0, 0.5, 0.0, -0.0, 256.0, 1.0078125] {
            assert_eq!(round_bf16_scalar(x).to_bits(), x.to_bits());
        }
    }

    #[test]
    fn one_plus_half_ulp_ties_to_even() {
        // 1 + 2^-8 sits exactly between 1.0 and 1.0078125; 1.0 has the even mantissa.
        let x = 1.0f32 + 2f32.powi(-8);
        assert_eq!(round_bf16_scalar(x), 1.0);
        assert_eq!(round_bf16_scalar(x), oracle(x));
        // 1 + 3*2^-8 ties between 1.0078125 (odd) and 1.015625 (even).
        let y = 1.0f32 + 3.0 * 2f32.powi(-8);
        assert_eq!(round_bf16_scalar(y), 1.015625);
        assert_eq!(round_bf16_scalar(y), oracle(y));
    }

    #[test]
    fn specials_pass_through() {
        assert!(round_bf16_scalar(f32::NAN).is_nan());
        assert_eq!(round_bf16_scalar(f32::INFINITY), f32::INFINITY);
        assert_eq!(round_bf16_scalar(f32::NEG_INFINITY), f32::NEG_INFINITY);
    }

    #[test]
    fn idempotent_on_many_random_values() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand::rngs::StdRng::seed_from_u64(11);
        for _ in 0..100_000 {
            let x = f32::from_bits(rng.gen::<u32>());
            let once = round_bf16_scalar(x);
            let twice = round_bf16_scalar(once);
            assert!(once.to_bits() == twice.to_bits() || once.is_nan());
        }
    }

    proptest! {
        #[test]
        fn matches_neighbour_oracle(x in -1e30f32..1e30f32) {
            prop_assert_eq!(round_bf16_scalar(x).to_bits(), oracle(x).to_bits());
        }

        #[test]
        fn relative_error_bounded_for_normals(x in prop::num::f32::NORMAL) {
            let r = round_bf16_scalar(x);
            if r.is_finite() {
                let rel = ((r as f64 - x as f64) / x as f64).abs();
                prop_assert!(rel <= 2f64.powi(-8));
            }
        }
    }
}
