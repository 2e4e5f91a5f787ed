//! Scan simulation: a reader samples each module center-weighted, modeled as
//! a normalized Gaussian convolution per module over the luminance channel,
//! followed by thresholding.

use super::ModuleMatrix;
use crate::autodiff::{gaussian_kernel_2d, Scalar, Tensor};
use crate::error::{Error, Result};
use crate::img::Image;
use ndarray::Array2;

/// Per-module sample grid in [0, 1].
#[derive(Clone, Debug)]
pub struct ScanMap<T> {
    pub samples: Array2<T>,
    pub kernel_size: usize,
    pub threshold: T,
}

/// 1 marks a module that reads differently from the reference.
pub type ErrorMap = Array2<u8>;

/// The kernel spread is tied to the module size; the sampling emphasis on the
/// module center is what matters, not the exact width.
pub fn kernel_sigma(kernel_size: usize) -> f64 {
    kernel_size as f64 / 4.0
}

/// Gaussian-weighted per-module sampling of a native-resolution image
/// (side = n * kernel_size). Luminance is the channel mean.
pub fn scan_simulate<T: Scalar>(image: &Image<T>, kernel_size: usize) -> Result<ScanMap<T>> {
    let (c, h, w) = image.dim();
    if c != 3 || h != w || h % kernel_size != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("3 x s x s with s divisible by {kernel_size}"),
            got: format!("{c} x {h} x {w}"),
        });
    }
    let n = h / kernel_size;
    let kernel: Array2<T> = gaussian_kernel_2d(kernel_size, kernel_sigma(kernel_size));
    let third = T::from_f(1.0 / 3.0);
    let mut samples = Array2::<T>::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let mut acc = T::zero();
            for ky in 0..kernel_size {
                for kx in 0..kernel_size {
                    let y = i * kernel_size + ky;
                    let x = j * kernel_size + kx;
                    let lum = (image[[0, y, x]] + image[[1, y, x]] + image[[2, y, x]]) * third;
                    acc = acc + kernel[[ky, kx]] * lum;
                }
            }
            samples[[i, j]] = acc;
        }
    }
    Ok(ScanMap {
        samples,
        kernel_size,
        threshold: T::from_f(super::BIN_THRESHOLD),
    })
}

/// Tape version of the module sampling, for losses that need gradients
/// through the scan. Input is a `(3, s, s)` tensor at native resolution.
pub fn scan_tensor<'t, T: Scalar>(image: Tensor<'t, T>, kernel_size: usize) -> Tensor<'t, T> {
    let shape = image.shape();
    let side = shape[1];
    assert!(side % kernel_size == 0, "side not divisible by kernel");
    let n = side / kernel_size;
    let kernel: Array2<T> = gaussian_kernel_2d(kernel_size, kernel_sigma(kernel_size));
    let kflat = image.tape().leaf(
        kernel
            .into_shape_with_order((kernel_size * kernel_size, 1))
            .unwrap()
            .into_dyn(),
    );
    image
        .luminance()
        .reshape(&[1, side, side])
        .patchify(kernel_size)
        .matmul(kflat)
        .reshape(&[n, n])
}

/// Strictly-greater thresholding: entries above `k` read white (1), entries
/// at or below `k` read black (0).
pub fn binarize<T: Scalar>(sm: &ScanMap<T>, k: T) -> Array2<u8> {
    sm.samples.mapv(|v| u8::from(v > k))
}

/// Modules of `transformed` (native resolution) that read differently from
/// the reference matrix under scan + binarize.
pub fn error_map<T: Scalar>(
    transformed: &Image<T>,
    original: &ModuleMatrix,
    kernel_size: usize,
    threshold: T,
) -> Result<ErrorMap> {
    let sm = scan_simulate(transformed, kernel_size)?;
    let n = original.side();
    if sm.samples.dim() != (n, n) {
        return Err(Error::ShapeMismatch {
            expected: format!("{n}x{n} scan"),
            got: format!("{:?}", sm.samples.dim()),
        });
    }
    let bin = binarize(&sm, threshold);
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        u8::from(bin[[i, j]] != original.grid()[[i, j]])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::img;
    use crate::qr::{encode_message, render, MODULE_PX};

    #[test]
    fn constant_image_yields_constant_map() {
        let image: Image<f64> = img::constant(0.37, 35, 35);
        let sm = scan_simulate(&image, 5).unwrap();
        assert_eq!(sm.samples.dim(), (7, 7));
        for &v in sm.samples.iter() {
            assert!((v - 0.37).abs() < 1e-12, "kernel must be normalized");
        }
    }

    #[test]
    fn matches_bruteforce_weighted_sum() {
        // Direct double loop with an explicitly normalized kernel.
        let mut rng = {
            use rand::SeedableRng;
            rand_chacha::ChaCha8Rng::seed_from_u64(5)
        };
        use rand::Rng;
        let image: Image<f64> =
            Image::from_shape_fn((3, 15, 15), |_| rng.gen_range(0.0..1.0));
        let sm = scan_simulate(&image, 5).unwrap();
        let sigma = 1.25;
        for mi in 0..3 {
            for mj in 0..3 {
                let mut wsum = 0.0;
                let mut acc = 0.0;
                for ky in 0..5 {
                    for kx in 0..5 {
                        let dy = ky as f64 - 2.0;
                        let dx = kx as f64 - 2.0;
                        let w = (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp();
                        let y = mi * 5 + ky;
                        let x = mj * 5 + kx;
                        let lum =
                            (image[[0, y, x]] + image[[1, y, x]] + image[[2, y, x]]) / 3.0;
                        acc += w * lum;
                        wsum += w;
                    }
                }
                let expect = acc / wsum;
                assert!((sm.samples[[mi, mj]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn scan_of_clean_render_is_exact() {
        let mm = encode_message(b"clean scan", 5).unwrap();
        let image: Image<f64> = render(&mm, MODULE_PX, 37 * MODULE_PX).unwrap();
        let sm = scan_simulate(&image, MODULE_PX).unwrap();
        for i in 0..37 {
            for j in 0..37 {
                let expect = mm.grid()[[i, j]] as f64;
                assert!((sm.samples[[i, j]] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn tensor_scan_matches_plain() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let image: Image<f64> =
            Image::from_shape_fn((3, 20, 20), |_| rng.gen_range(0.0..1.0));
        let plain = scan_simulate(&image, 5).unwrap();
        let tape = Tape::<f64>::new();
        let t = tape.leaf(image.into_dyn());
        let sm = scan_tensor(t, 5);
        let v = sm.value();
        for i in 0..4 {
            for j in 0..4 {
                assert!((v[[i, j]] - plain.samples[[i, j]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn binarize_rules() {
        let sm = ScanMap {
            samples: ndarray::arr2(&[[0.5f64, 0.02], [0.019, 1.0]]),
            kernel_size: 5,
            threshold: 0.02,
        };
        let b = binarize(&sm, 0.02);
        // Strictly greater than k reads white; exactly k reads black.
        assert_eq!(b, ndarray::arr2(&[[1u8, 0], [0, 1]]));
    }

    #[test]
    fn error_map_zero_for_exact_render_and_local_for_edit() {
        let mm = encode_message(b"error map", 5).unwrap();
        let mut image: Image<f64> = render(&mm, MODULE_PX, 37 * MODULE_PX).unwrap();
        let xi = error_map(&image, &mm, MODULE_PX, 0.02).unwrap();
        assert_eq!(xi.sum(), 0);

        // Darken one white module fully below the threshold.
        let (mut wr, mut wc) = (0, 0);
        'outer: for r in 0..37 {
            for c in 0..37 {
                if mm.grid()[[r, c]] == 1 {
                    wr = r;
                    wc = c;
                    break 'outer;
                }
            }
        }
        for ch in 0..3 {
            for y in 0..MODULE_PX {
                for x in 0..MODULE_PX {
                    image[[ch, wr * MODULE_PX + y, wc * MODULE_PX + x]] = 0.0;
                }
            }
        }
        let xi = error_map(&image, &mm, MODULE_PX, 0.02).unwrap();
        assert_eq!(xi.sum(), 1);
        assert_eq!(xi[[wr, wc]], 1);
    }
}
