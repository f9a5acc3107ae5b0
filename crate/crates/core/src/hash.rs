//! Integer hashing used wherever a value must be reproducible bit-for-bit
//! across platforms (scene texture, oracle noise).

/// One round of the splitmix64 finalizer.
#[inline]
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a seed with a sequence of integer coordinates.
#[inline]
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts
        .iter()
        .fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ p))
}

/// Uniform value in `[0, 1)` with 53 bits of resolution.
#[inline]
pub fn unit(h: u64) -> f64 {
    (h >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Uniform value in `[-1, 1]`.
#[inline]
pub fn signed_unit(h: u64) -> f64 {
    2.0 * unit(h) - 1.0
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unit_range() {
        for i in 0..10_000u64 {
            let u = unit(mix(7, &[i]));
            assert!((0.0..1.0).contains(&u));
            let s = signed_unit(mix(7, &[i]));
            assert!((-1.0..=1.0).contains(&s));
        }
    }

    #[test]
    fn mix_depends_on_every_part() {
        assert_ne!(mix(1, &[2, 3]), mix(1, &[3, 2]));
        assert_ne!(mix(1, &[2, 3]), mix(2, &[2, 3]));
    }
}
