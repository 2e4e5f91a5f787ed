//! Training losses and evaluation metrics: L1, SSIM (11x11 Gaussian window),
//! a perceptual distance over a fixed convolutional feature stack, PSNR, and
//! the weighted total. Mean reduction everywhere so weights are independent
//! of resolution.

use crate::autodiff::{gaussian_kernel_2d, Scalar, Tape, Tensor};
use crate::img::Image;
use crate::nn::normal_init;
use ndarray::ArrayD;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// Weights of the total objective.
#[derive(Clone, Copy, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct LossWeights {
    pub stego_l1: f64,
    pub stego_ssim: f64,
    pub stego_perceptual: f64,
    pub code_l1: f64,
    pub transition: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            stego_l1: 5.0,
            stego_ssim: 0.2,
            stego_perceptual: 3.5,
            code_l1: 16.0,
            transition: 3.0,
        }
    }
}

/// Mean absolute difference.
pub fn l1_loss<'t, T: Scalar>(a: Tensor<'t, T>, b: Tensor<'t, T>) -> Tensor<'t, T> {
    a.sub(b).abs().mean_all()
}

/// Mean absolute difference in the code-image domain.
pub fn qr_loss<'t, T: Scalar>(restored: Tensor<'t, T>, original: Tensor<'t, T>) -> Tensor<'t, T> {
    l1_loss(restored, original)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Mean structural similarity of two `(3, H, W)` tensors with dynamic range
/// 1.0, Gaussian-weighted 11x11 windows, valid placement.
pub fn ssim_tensor<'t, T: Scalar>(a: Tensor<'t, T>, b: Tensor<'t, T>) -> Tensor<'t, T> {
    assert_eq!(a.shape(), b.shape(), "ssim: shape mismatch");
    let kernel = gaussian_kernel_2d::<T>(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = T::from_f(SSIM_K1 * SSIM_K1);
    let c2 = T::from_f(SSIM_K2 * SSIM_K2);
    let two = T::from_f(2.0);

    let mu_a = a.depthwise_conv(&kernel, 0);
    let mu_b = b.depthwise_conv(&kernel, 0);
    let mu_aa = mu_a.mul(mu_a);
    let mu_bb = mu_b.mul(mu_b);
    let mu_ab = mu_a.mul(mu_b);
    let sig_aa = a.mul(a).depthwise_conv(&kernel, 0).sub(mu_aa);
    let sig_bb = b.mul(b).depthwise_conv(&kernel, 0).sub(mu_bb);
    let sig_ab = a.mul(b).depthwise_conv(&kernel, 0).sub(mu_ab);

    let num = mu_ab.mul_scalar(two).add_scalar(c1).mul(sig_ab.mul_scalar(two).add_scalar(c2));
    let den = mu_aa.add(mu_bb).add_scalar(c1).mul(sig_aa.add(sig_bb).add_scalar(c2));
    num.div(den).mean_all()
}

/// `1 - SSIM`: zero on identical inputs, suitable for minimization.
pub fn ssim_loss<'t, T: Scalar>(a: Tensor<'t, T>, b: Tensor<'t, T>) -> Tensor<'t, T> {
    ssim_tensor(a, b).neg().add_scalar(T::one())
}

/// Fixed convolutional feature stack for the perceptual distance. The default
/// profile draws weights once from a pinned seed and never trains them;
/// weights can be replaced wholesale to use an externally trained backbone.
pub struct FeatureStack<T: Scalar> {
    // (weight, stride) per stage; features are tapped after each GELU.
    stages: Vec<(ArrayD<T>, usize)>,
}

const FEATURE_SEED: u64 = 0xFEA7_0001;

impl<T: Scalar> Default for FeatureStack<T> {
    fn default() -> Self {
        Self::fixed_random()
    }
}

impl<T: Scalar> FeatureStack<T> {
    pub fn fixed_random() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(FEATURE_SEED);
        let plan = [(3usize, 16usize, 1usize), (16, 32, 2), (32, 64, 2)];
        let stages = plan
            .iter()
            .map(|&(c_in, c_out, stride)| {
                let std = (2.0 / (c_in * 9) as f64).sqrt();
                (normal_init::<T>(&[c_out, c_in, 3, 3], std, &mut rng), stride)
            })
            .collect();
        FeatureStack { stages }
    }

    /// Replace stage weights (external backbone profile). Shapes must match
    /// the stage plan.
    pub fn with_weights(weights: Vec<ArrayD<T>>) -> crate::Result<Self> {
        let default = Self::fixed_random();
        if weights.len() != default.stages.len()
            || weights
                .iter()
                .zip(default.stages.iter())
                .any(|(w, (d, _))| w.shape() != d.shape())
        {
            return Err(crate::Error::Config(
                "feature stack weights do not match the stage plan".into(),
            ));
        }
        Ok(FeatureStack {
            stages: weights
                .into_iter()
                .zip(default.stages.iter().map(|(_, s)| *s))
                .collect(),
        })
    }

    fn features<'t>(&self, tape: &'t Tape<T>, img: Tensor<'t, T>) -> Vec<Tensor<'t, T>> {
        let mut x = img;
        let mut out = Vec::with_capacity(self.stages.len());
        for (w, stride) in &self.stages {
            let wt = tape.leaf(w.clone());
            x = x.conv2d(wt, *stride, 1).gelu();
            out.push(x);
        }
        out
    }
}

/// Perceptual distance: mean squared difference of channel-normalized
/// features, averaged per stage and summed over stages. Zero on identical
/// inputs, symmetric, non-negative.
pub fn lpips_tensor<'t, T: Scalar>(
    stack: &FeatureStack<T>,
    a: Tensor<'t, T>,
    b: Tensor<'t, T>,
) -> Tensor<'t, T> {
    assert_eq!(a.shape(), b.shape(), "lpips: shape mismatch");
    let tape = a.tape();
    let fa = stack.features(tape, a);
    let fb = stack.features(tape, b);
    let mut total: Option<Tensor<'t, T>> = None;
    for (xa, xb) in fa.into_iter().zip(fb) {
        let na = xa.channel_l2norm(1e-10);
        let nb = xb.channel_l2norm(1e-10);
        let d = na.sub(nb).square().mean_all();
        total = Some(match total {
            Some(t) => t.add(d),
            None => d,
        });
    }
    total.expect("at least one stage")
}

/// Individually weighted loss terms of one training step.
#[derive(Clone, Copy)]
pub struct LossTerms<'t, T: Scalar> {
    pub stego_l1: Tensor<'t, T>,
    pub stego_ssim: Tensor<'t, T>,
    pub stego_perceptual: Tensor<'t, T>,
    pub code_l1: Tensor<'t, T>,
    pub transition: Tensor<'t, T>,
}

/// `w1*L1 + w2*(1-SSIM) + w3*perceptual + w4*code-L1 + w5*transition`.
pub fn total_loss<'t, T: Scalar>(terms: &LossTerms<'t, T>, w: &LossWeights) -> Tensor<'t, T> {
    terms
        .stego_l1
        .mul_scalar(T::from_f(w.stego_l1))
        .add(terms.stego_ssim.mul_scalar(T::from_f(w.stego_ssim)))
        .add(terms.stego_perceptual.mul_scalar(T::from_f(w.stego_perceptual)))
        .add(terms.code_l1.mul_scalar(T::from_f(w.code_l1)))
        .add(terms.transition.mul_scalar(T::from_f(w.transition)))
}

// ---- plain (reporting) forms ----

fn on_tape<T: Scalar>(a: &Image<T>, b: &Image<T>, f: impl for<'t> Fn(Tensor<'t, T>, Tensor<'t, T>) -> Tensor<'t, T>) -> f64 {
    let tape = Tape::<T>::new();
    let ta = tape.leaf(a.clone().into_dyn());
    let tb = tape.leaf(b.clone().into_dyn());
    f(ta, tb).scalar().to_f()
}

pub fn l1<T: Scalar>(a: &Image<T>, b: &Image<T>) -> f64 {
    on_tape(a, b, |x, y| l1_loss(x, y))
}

pub fn ssim_metric<T: Scalar>(a: &Image<T>, b: &Image<T>) -> f64 {
    on_tape(a, b, |x, y| ssim_tensor(x, y))
}

pub fn lpips_metric<T: Scalar>(stack: &FeatureStack<T>, a: &Image<T>, b: &Image<T>) -> f64 {
    on_tape(a, b, |x, y| lpips_tensor(stack, x, y))
}

pub fn mse<T: Scalar>(a: &Image<T>, b: &Image<T>) -> f64 {
    assert_eq!(a.dim(), b.dim(), "mse: shape mismatch");
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| {
            let d = (x - y).to_f();
            d * d
        })
        .sum::<f64>()
        / a.len() as f64
}

/// `10 log10(1 / MSE)` for range-1 images; identical inputs return the
/// `f64::INFINITY` sentinel.
pub fn psnr<T: Scalar>(a: &Image<T>, b: &Image<T>) -> f64 {
    let m = mse(a, b);
    if m == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (1.0 / m).log10()
    }
}

/// One evaluation record; serialized as a CSV row.
#[derive(Clone, Debug)]
pub struct MetricsRow {
    pub image_id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lpips: f64,
    pub emr: f64,
    pub tra_flag: bool,
    pub distortion_spec_id: String,
}

pub const CSV_HEADER: &str = "image_id,psnr,ssim,lpips,emr,tra_flag,distortion_spec_id";

pub fn write_csv(rows: &[MetricsRow], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{},{}",
            r.image_id,
            r.psnr,
            r.ssim,
            r.lpips,
            r.emr,
            if r.tra_flag { 1 } else { 0 },
            r.distortion_spec_id
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_image(seed: u64, side: usize) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_shape_fn((3, side, side), |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn l1_matches_double_loop_oracle() {
        let a = rand_image(1, 16);
        let b = rand_image(2, 16);
        let mut acc = 0.0;
        for c in 0..3 {
            for y in 0..16 {
                for x in 0..16 {
                    acc += (a[[c, y, x]] - b[[c, y, x]]).abs();
                }
            }
        }
        let oracle = acc / (3.0 * 16.0 * 16.0);
        assert!((l1(&a, &b) - oracle).abs() < 1e-12);
        assert_eq!(l1(&a, &a), 0.0);
        let lo: Image<f64> = crate::img::constant(0.0, 8, 8);
        let hi: Image<f64> = crate::img::constant(0.5, 8, 8);
        assert!((l1(&lo, &hi) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ssim_axioms_and_single_window_oracle() {
        let a = rand_image(3, 16);
        let b = rand_image(4, 16);
        assert!((ssim_metric(&a, &a) - 1.0).abs() < 1e-9);
        assert!((ssim_metric(&a, &b) - ssim_metric(&b, &a)).abs() < 1e-9);

        // One exact 11x11 window (single output position), direct formula.
        let a1 = rand_image(5, 11);
        let b1 = rand_image(6, 11);
        let w = gaussian_kernel_2d::<f64>(11, 1.5);
        let mut oracle = 0.0;
        for c in 0..3 {
            let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for y in 0..11 {
                for x in 0..11 {
                    ma += w[[y, x]] * a1[[c, y, x]];
                    mb += w[[y, x]] * b1[[c, y, x]];
                }
            }
            for y in 0..11 {
                for x in 0..11 {
                    saa += w[[y, x]] * a1[[c, y, x]] * a1[[c, y, x]];
                    sbb += w[[y, x]] * b1[[c, y, x]] * b1[[c, y, x]];
                    sab += w[[y, x]] * a1[[c, y, x]] * b1[[c, y, x]];
                }
            }
            let (va, vb, cab) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
            let c1 = 0.01f64.powi(2);
            let c2 = 0.03f64.powi(2);
            oracle += ((2.0 * ma * mb + c1) * (2.0 * cab + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        oracle /= 3.0;
        assert!((ssim_metric(&a1, &b1) - oracle).abs() < 1e-9);
    }

    #[test]
    fn ssim_loss_is_one_minus_metric() {
        let a = rand_image(7, 16);
        let b = rand_image(8, 16);
        let loss = on_tape(&a, &b, |x, y| ssim_loss(x, y));
        assert!((loss - (1.0 - ssim_metric(&a, &b))).abs() < 1e-9);
    }

    #[test]
    fn perceptual_distance_axioms() {
        let stack = FeatureStack::<f64>::fixed_random();
        let a = rand_image(9, 16);
        let b = rand_image(10, 16);
        assert_eq!(lpips_metric(&stack, &a, &a), 0.0);
        let d_ab = lpips_metric(&stack, &a, &b);
        let d_ba = lpips_metric(&stack, &b, &a);
        assert!(d_ab > 0.0);
        assert!((d_ab - d_ba).abs() < 1e-9);
    }

    #[test]
    fn psnr_closed_form_and_sentinel() {
        let a: Image<f64> = crate::img::constant(0.0, 8, 8);
        let b: Image<f64> = crate::img::constant(0.1, 8, 8);
        assert!((psnr(&a, &b) - 20.0).abs() < 1e-12); // MSE 0.01 -> 20 dB
        assert_eq!(psnr(&a, &a), f64::INFINITY);
    }

    #[test]
    fn total_loss_weighted_sum() {
        let tape = Tape::<f64>::new();
        let scalar = |v: f64| tape.leaf(ArrayD::from_elem(ndarray::IxDyn(&[1]), v));
        let terms = LossTerms {
            stego_l1: scalar(0.1),
            stego_ssim: scalar(0.2),
            stego_perceptual: scalar(0.3),
            code_l1: scalar(0.05),
            transition: scalar(0.02),
        };
        let w = LossWeights::default();
        let total = total_loss(&terms, &w).scalar();
        let expect = 5.0 * 0.1 + 0.2 * 0.2 + 3.5 * 0.3 + 16.0 * 0.05 + 3.0 * 0.02;
        assert!((total - expect).abs() < 1e-12);
        assert!((expect - 2.45).abs() < 1e-12);

        let zero = LossTerms {
            stego_l1: scalar(0.0),
            stego_ssim: scalar(0.0),
            stego_perceptual: scalar(0.0),
            code_l1: scalar(0.0),
            transition: scalar(0.0),
        };
        assert_eq!(total_loss(&zero, &w).scalar(), 0.0);
    }

    #[test]
    fn csv_shape() {
        let rows = vec![MetricsRow {
            image_id: "img0".into(),
            psnr: 30.0,
            ssim: 0.9,
            lpips: 0.1,
            emr: 0.5,
            tra_flag: true,
            distortion_spec_id: "noise:0.1".into(),
        }];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(CSV_HEADER));
        assert!(lines.next().unwrap().starts_with("img0,30.000000,"));
    }
}
