//! Deterministic seed derivation so every subsystem draws from one root
//! seed without stream collisions.

/// SplitMix64 finalizer.
fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive a child seed from a root seed and a stream tag.
pub fn derive(root: u64, tag: u64) -> u64 {
    splitmix(splitmix(root) ^ tag.wrapping_mul(0xa076_1d64_78bd_642f))
}

/// Derive a child seed from a root seed and two stream tags.
pub fn derive2(root: u64, tag_a: u64, tag_b: u64) -> u64 {
    derive(derive(root, tag_a), tag_b)
}
