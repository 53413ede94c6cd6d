//! 64-bit FNV-1a.
//!
//! Used for seed splitting and for hashed bag-of-words buckets, so the exact
//! byte-level definition matters: start from the offset basis
//! `0xcbf29ce484222325`, and for every input byte XOR it into the state and
//! multiply (wrapping) by the prime `0x100000001b3`.

pub const OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
pub const PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    bytes.iter().fold(OFFSET_BASIS, |hash, &b| {
        (hash ^ u64::from(b)).wrapping_mul(PRIME)
    })
}
