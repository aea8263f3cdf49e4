//! Seed derivation for independent, reproducible jobs.

/// SplitMix64 finaliser.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash2(a: u64, b: u64) -> u64 {
    mix64(mix64(a) ^ b.rotate_left(32))
}

/// Seed of trial `replica` on instance `instance`. Depends only on its own
/// indices, so growing either count leaves existing trials unchanged.
pub fn trial_seed(base: u64, instance: u64, replica: u64) -> u64 {
    base ^ hash2(instance, replica)
}

/// Seed of the `index`-th generated instance of size `n_vars`.
pub fn instance_seed(base: u64, n_vars: u64, index: u64) -> u64 {
    base ^ hash2(0x494E_5354 ^ n_vars.rotate_left(17), index)
}

/// Seed for a named auxiliary stream (bootstrap, noise, ...).
pub fn stream_seed(base: u64, tag: &str) -> u64 {
    tag.bytes()
        .fold(mix64(base), |h, b| mix64(h ^ b as u64))
}
