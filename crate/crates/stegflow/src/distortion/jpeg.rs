//! Differentiable JPEG simulation: RGB -> YCbCr, 8x8 block DCT, quality-scaled
//! quantization with straight-through rounding, and the inverse path. No
//! chroma subsampling; quality 100 takes a quantization-free path whose only
//! deviation from the input is float roundoff.

use crate::autodiff::{stack_channels, Scalar, Tensor};
use ndarray::Array2;

#[rustfmt::skip]
const LUMA_TABLE: [f64; 64] = [
    16.0, 11.0, 10.0, 16.0, 24.0, 40.0, 51.0, 61.0,
    12.0, 12.0, 14.0, 19.0, 26.0, 58.0, 60.0, 55.0,
    14.0, 13.0, 16.0, 24.0, 40.0, 57.0, 69.0, 56.0,
    14.0, 17.0, 22.0, 29.0, 51.0, 87.0, 80.0, 62.0,
    18.0, 22.0, 37.0, 56.0, 68.0, 109.0, 103.0, 77.0,
    24.0, 35.0, 55.0, 64.0, 81.0, 104.0, 113.0, 92.0,
    49.0, 64.0, 78.0, 87.0, 103.0, 121.0, 120.0, 101.0,
    72.0, 92.0, 95.0, 98.0, 112.0, 100.0, 103.0, 99.0,
];

#[rustfmt::skip]
const CHROMA_TABLE: [f64; 64] = [
    17.0, 18.0, 24.0, 47.0, 99.0, 99.0, 99.0, 99.0,
    18.0, 21.0, 26.0, 66.0, 99.0, 99.0, 99.0, 99.0,
    24.0, 26.0, 56.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    47.0, 66.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
    99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0, 99.0,
];

/// libjpeg-style quality scaling of a base table.
fn scaled_table(base: &[f64; 64], quality: u8) -> [f64; 64] {
    let q = quality.clamp(1, 100) as f64;
    let s = if q < 50.0 { 5000.0 / q } else { 200.0 - 2.0 * q };
    let mut out = [0.0; 64];
    for (o, &b) in out.iter_mut().zip(base.iter()) {
        *o = ((b * s + 50.0) / 100.0).floor().clamp(1.0, 255.0);
    }
    out
}

/// Orthonormal 8x8 DCT-II matrix.
fn dct_matrix() -> Array2<f64> {
    let n = 8usize;
    let mut c = Array2::<f64>::zeros((n, n));
    for k in 0..n {
        for i in 0..n {
            let a = if k == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            c[[k, i]] =
                a * ((std::f64::consts::PI * (2.0 * i as f64 + 1.0) * k as f64) / (2.0 * n as f64))
                    .cos();
        }
    }
    c
}

/// 64x64 separable 2-D DCT operator (Kronecker square of the 1-D matrix),
/// laid out to match row-major 8x8 patch flattening.
fn dct2_kron<T: Scalar>() -> Array2<T> {
    let c = dct_matrix();
    let mut k = Array2::<f64>::zeros((64, 64));
    for a in 0..8 {
        for b in 0..8 {
            for i in 0..8 {
                for j in 0..8 {
                    k[[a * 8 + b, i * 8 + j]] = c[[a, i]] * c[[b, j]];
                }
            }
        }
    }
    k.mapv(T::from_f)
}

fn quantize_plane<'t, T: Scalar>(
    plane: Tensor<'t, T>, // (H, W) in [0,1]
    table: &[f64; 64],
    quality: u8,
    h: usize,
    w: usize,
) -> Tensor<'t, T> {
    let tape = plane.tape();
    let kron = tape.leaf(dct2_kron::<T>().into_dyn());
    let kron_t = kron.transpose2();
    // To the [0,255] domain, centered, then per-block DCT.
    let blocks = plane
        .reshape(&[1, h, w])
        .mul_scalar(T::from_f(255.0))
        .add_scalar(T::from_f(-128.0))
        .patchify(8); // (nblocks, 64)
    let coeffs = blocks.matmul(kron_t);
    let coeffs = if quality >= 100 {
        coeffs // quantization-free path
    } else {
        let tq = scaled_table(table, quality);
        let inv = ndarray::Array1::from_iter(tq.iter().map(|&v| T::from_f(1.0 / v))).into_dyn();
        let fwd = ndarray::Array1::from_iter(tq.iter().map(|&v| T::from_f(v))).into_dyn();
        coeffs
            .mul_row(tape.leaf(inv))
            .round_ste()
            .mul_row(tape.leaf(fwd))
    };
    coeffs
        .matmul(kron)
        .unpatchify(1, h, w, 8)
        .add_scalar(T::from_f(128.0))
        .mul_scalar(T::from_f(1.0 / 255.0))
        .reshape(&[h, w])
}

/// Apply the JPEG simulation to a `(3, H, W)` tensor in [0,1].
pub fn jpeg_tensor<'t, T: Scalar>(img: Tensor<'t, T>, quality: u8) -> Tensor<'t, T> {
    let shape = img.shape();
    let (h, w) = (shape[1], shape[2]);
    let (ph, pw) = (h.div_ceil(8) * 8, w.div_ceil(8) * 8);
    let padded = if (ph, pw) != (h, w) {
        img.pad_bottom_right(ph - h, pw - w)
    } else {
        img
    };

    let r = padded.channel(0);
    let g = padded.channel(1);
    let b = padded.channel(2);
    // BT.601 full-range, offsets folded into the [0,1] domain.
    let y = r.mul_scalar(T::from_f(0.299))
        .add(g.mul_scalar(T::from_f(0.587)))
        .add(b.mul_scalar(T::from_f(0.114)));
    let cb = r.mul_scalar(T::from_f(-0.168736))
        .add(g.mul_scalar(T::from_f(-0.331264)))
        .add(b.mul_scalar(T::from_f(0.5)))
        .add_scalar(T::from_f(0.5));
    let cr = r.mul_scalar(T::from_f(0.5))
        .add(g.mul_scalar(T::from_f(-0.418688)))
        .add(b.mul_scalar(T::from_f(-0.081312)))
        .add_scalar(T::from_f(0.5));

    let y = quantize_plane(y, &LUMA_TABLE, quality, ph, pw);
    let cb = quantize_plane(cb, &CHROMA_TABLE, quality, ph, pw);
    let cr = quantize_plane(cr, &CHROMA_TABLE, quality, ph, pw);

    let cb0 = cb.add_scalar(T::from_f(-0.5));
    let cr0 = cr.add_scalar(T::from_f(-0.5));
    let r = y.add(cr0.mul_scalar(T::from_f(1.402)));
    let g = y
        .add(cb0.mul_scalar(T::from_f(-0.344136)))
        .add(cr0.mul_scalar(T::from_f(-0.714136)));
    let b = y.add(cb0.mul_scalar(T::from_f(1.772)));
    let out = stack_channels(&[r, g, b]);
    if (ph, pw) != (h, w) {
        out.crop_top_left(h, w)
    } else {
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(seed: u64, h: usize, w: usize) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(&[3, h, w]), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn quality_100_is_within_one_255th() {
        let tape = Tape::<f64>::new();
        let x0 = rand_img(1, 16, 16);
        let x = tape.leaf_grad(x0.clone());
        let y = jpeg_tensor(x, 100);
        let worst = y
            .value()
            .iter()
            .zip(x0.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(worst <= 1.0 / 255.0, "quality-100 deviation {worst}");
    }

    #[test]
    fn low_quality_changes_pixels_but_stays_reasonable() {
        let tape = Tape::<f64>::new();
        let x0 = rand_img(2, 24, 24);
        let x = tape.leaf_grad(x0.clone());
        let y = jpeg_tensor(x, 20);
        let v = y.value();
        let mean_abs: f64 =
            v.iter().zip(x0.iter()).map(|(a, b)| (a - b).abs()).sum::<f64>() / v.len() as f64;
        assert!(mean_abs > 1e-3, "quality 20 should visibly quantize noise");
        assert!(mean_abs < 0.5, "output should stay near the input range");
    }

    #[test]
    fn non_multiple_of_eight_sides_roundtrip_shape() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(rand_img(3, 13, 21));
        let y = jpeg_tensor(x, 60);
        assert_eq!(y.shape(), vec![3, 13, 21]);
    }

    #[test]
    fn gradient_is_finite_and_nonzero() {
        let tape = Tape::<f64>::new();
        let x = tape.leaf_grad(rand_img(4, 16, 16));
        let loss = jpeg_tensor(x, 60).mean_all();
        let grads = tape.backward(loss);
        let g = grads.of(x).unwrap();
        assert!(g.iter().all(|v| v.is_finite()));
        assert!(g.iter().any(|&v| v != 0.0));
    }
}
