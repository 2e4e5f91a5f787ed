//! Decode-accuracy metrics: error module rate and text recovery accuracy.

use ndarray::Array2;

/// Percentage of modules that differ between two grids of equal shape.
pub fn emr(decoded: &Array2<u8>, truth: &Array2<u8>) -> f64 {
    assert_eq!(decoded.dim(), truth.dim(), "emr: shape mismatch");
    let total = decoded.len() as f64;
    let wrong = decoded
        .iter()
        .zip(truth.iter())
        .filter(|(a, b)| a != b)
        .count() as f64;
    100.0 * wrong / total
}

/// Mean of per-code success flags: a flag is true only when decoding
/// succeeded and the recovered message equals the ground truth.
pub fn tra(decode_results: &[bool]) -> f64 {
    if decode_results.is_empty() {
        return 0.0;
    }
    decode_results.iter().filter(|&&b| b).count() as f64 / decode_results.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn emr_identity_symmetry_range() {
        let a = Array2::from_shape_fn((37, 37), |(i, j)| ((i + j) % 2) as u8);
        let mut b = a.clone();
        assert_eq!(emr(&a, &a), 0.0);
        for k in 0..10 {
            b[[k, k]] ^= 1;
        }
        let e1 = emr(&a, &b);
        let e2 = emr(&b, &a);
        assert_eq!(e1, e2);
        assert!((e1 - 100.0 * 10.0 / 1369.0).abs() < 1e-12);
        let inv = a.mapv(|v| v ^ 1);
        assert_eq!(emr(&a, &inv), 100.0);
    }

    #[test]
    fn tra_is_mean_of_flags() {
        assert_eq!(tra(&[true; 8]), 1.0);
        let mut flags = vec![true; 100];
        for f in flags.iter_mut().take(4) {
            *f = false;
        }
        assert!((tra(&flags) - 0.96).abs() < 1e-12);
        assert_eq!(tra(&[]), 0.0);
    }
}
