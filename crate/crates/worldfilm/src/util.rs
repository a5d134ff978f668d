use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use sha2::{Digest, Sha256};

/// Hex sha256 of a byte slice.
pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let out = h.finalize();
    let mut s = String::with_capacity(64);
    for b in out {
        s.push_str(&format!("{b:02x}"));
    }
    s
}

/// Deterministic RNG derived from a seed and a purpose label, so independent
/// consumers of the same global seed never share a stream.
pub fn derive_rng(seed: u64, stream: &str) -> ChaCha12Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(stream.as_bytes());
    let out = h.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&out);
    ChaCha12Rng::from_seed(key)
}

/// Deterministic sub-seed derived from a seed and a purpose label.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(b"sub-seed:");
    h.update(stream.as_bytes());
    let out = h.finalize();
    let mut b = [0u8; 8];
    b.copy_from_slice(&out[..8]);
    u64::from_le_bytes(b)
}

/// Row-major little-endian f64 bytes of a matrix.
pub fn mat_to_bytes(m: &Array2<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(m.len() * 8);
    for v in m.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn mat_from_bytes(rows: usize, cols: usize, bytes: &[u8]) -> Option<Array2<f64>> {
    if bytes.len() != rows * cols * 8 {
        return None;
    }
    let mut data = Vec::with_capacity(rows * cols);
    for chunk in bytes.chunks_exact(8) {
        let mut b = [0u8; 8];
        b.copy_from_slice(chunk);
        data.push(f64::from_le_bytes(b));
    }
    Array2::from_shape_vec((rows, cols), data).ok()
}

/// Digest of a matrix's contents.
pub fn mat_digest(m: &Array2<f64>) -> String {
    sha256_hex(&mat_to_bytes(m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn rng_streams_are_independent_and_stable() {
        let mut a = derive_rng(7, "a");
        let mut b = derive_rng(7, "b");
        let mut a2 = derive_rng(7, "a");
        assert_ne!(a.next_u64(), b.next_u64());
        let mut a3 = derive_rng(7, "a");
        assert_eq!(a3.next_u64(), a2.next_u64());
    }

    #[test]
    fn mat_bytes_round_trip() {
        let m = Array2::from_shape_fn((3, 4), |(i, j)| i as f64 * 0.25 - j as f64);
        let b = mat_to_bytes(&m);
        let m2 = mat_from_bytes(3, 4, &b).unwrap();
        assert_eq!(m, m2);
    }
}
