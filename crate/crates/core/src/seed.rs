//! Seed derivation for independent, reproducible random streams.

/// SplitMix64 finalizer.
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(seed, tag)`; distinct tags give unrelated streams.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    mix64(mix64(seed ^ 0x9e37_79b9_7f4a_7c15).wrapping_add(tag.wrapping_mul(0x9e37_79b9_7f4a_7c15)))
}

// Stream tags, so call sites cannot collide by accident.
pub const TAG_INIT: u64 = 1;
pub const TAG_SAMPLING: u64 = 2;
pub const TAG_TARGET_INIT: u64 = 3;
pub const TAG_PROBE: u64 = 4;
pub const TAG_EVAL: u64 = 5;
pub const TAG_SHUFFLE: u64 = 0x5348_5546;
pub const TAG_AUGMENT: u64 = 0x4155_474d;
