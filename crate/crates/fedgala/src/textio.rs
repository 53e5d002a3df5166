//! Shared text/byte formatting primitives for the on-disk artifacts.

/// Fixed 17-significant-digit scientific formatting.
///
/// 17 digits round-trip any f64, so two runs that agree bitwise agree
/// bytewise in every CSV.
pub fn fmt_g17(x: f64) -> String {
    format!("{:.16e}", x)
}

/// FNV-1a over raw bytes; used to fingerprint broadcast augmentations.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// FNV-1a over the bit patterns of a float slice.
pub fn fnv1a64_f64(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for v in values {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}
