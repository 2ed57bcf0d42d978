//! Hash functions for [`DHash`](crate::DHash). The table reduces the result
//! modulo its bucket count.

use std::sync::Arc;

pub type HashFn = Arc<dyn Fn(u64) -> u64 + Send + Sync>;

/// `k`, so bucket `k mod n`.
pub fn identity() -> HashFn {
    Arc::new(|k| k)
}

/// Multiplicative hashing with an odd multiplier, high bits folded down so
/// the modulo sees them.
pub fn multiplicative(multiplier: u64) -> HashFn {
    let m = multiplier | 1;
    Arc::new(move |k| {
        let x = k.wrapping_mul(m);
        x ^ (x >> 29) ^ (x >> 47)
    })
}

/// A multiplicative hash with a fixed odd constant chosen by `seed`.
pub fn seeded(seed: u64) -> HashFn {
    multiplicative(0x9e37_79b9_7f4a_7c15 ^ seed.rotate_left(17).wrapping_mul(0xbf58_476d_1ce4_e5b9))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_is_modulo() {
        let h = identity();
        assert_eq!(h(7) % 2, 1);
        assert_eq!(h(8) % 3, 2);
    }

    #[test]
    fn multiplicative_spreads_sequential_keys() {
        let h = seeded(1);
        let mut counts = [0u32; 16];
        for k in 0..16_000u64 {
            counts[(h(k) % 16) as usize] += 1;
        }
        assert!(
            counts.iter().all(|&c| (800..1200).contains(&c)),
            "{counts:?}"
        );
    }

    #[test]
    fn seeds_differ() {
        let (a, b) = (seeded(1), seeded(2));
        assert!((0..100u64).any(|k| a(k) % 64 != b(k) % 64));
    }
}
