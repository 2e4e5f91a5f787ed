//! Invertible token fusion: a learnable N x N matrix mixes code tokens
//! patch-wise before embedding and un-mixes them exactly at decode.
//!
//! The inverse is always a fresh linear solve against the current matrix, so
//! it stays exact while the matrix drifts during training.

use crate::autodiff::{Scalar, Tape, Tensor};
use crate::error::{Error, Result};
use crate::linalg;
use crate::nn::{ParamId, ParamStore};
use ndarray::Ix2;
use rand_chacha::ChaCha8Rng;

/// Condition-number limit; training aborts beyond this.
pub const COND_LIMIT: f64 = 1e6;

pub struct FusionMatrix {
    m: ParamId,
    n: usize,
}

impl FusionMatrix {
    /// Initialized orthogonal (determinant +1), so mixing starts as a pure
    /// rotation of token space.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        n: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let m = linalg::random_orthogonal::<T>(n, rng);
        FusionMatrix {
            m: store.add(format!("{prefix}.M"), m.into_dyn()),
            n,
        }
    }

    pub fn token_count(&self) -> usize {
        self.n
    }

    pub fn param(&self) -> ParamId {
        self.m
    }

    fn check_tokens<T: Scalar>(&self, tokens: &Tensor<'_, T>) -> Result<()> {
        let shape = tokens.shape();
        if shape.len() != 2 || shape[0] != self.n {
            return Err(Error::ShapeMismatch {
                expected: format!("{} x D tokens", self.n),
                got: format!("{shape:?}"),
            });
        }
        Ok(())
    }

    /// `M . tokens`
    pub fn fuse<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        tokens: Tensor<'t, T>,
    ) -> Result<Tensor<'t, T>> {
        self.check_tokens(&tokens)?;
        let m = store.watch(tape, self.m);
        Ok(m.matmul(tokens))
    }

    /// `M^-1 . tokens` by linear solve (never a stored inverse).
    pub fn unfuse<'t, T: Scalar>(
        &self,
        tape: &'t Tape<T>,
        store: &ParamStore<T>,
        tokens: Tensor<'t, T>,
    ) -> Result<Tensor<'t, T>> {
        self.check_tokens(&tokens)?;
        let m = store.watch(tape, self.m);
        m.solve_sq(tokens)
    }

    /// 1-norm condition estimate of the current matrix.
    pub fn condition<T: Scalar>(&self, store: &ParamStore<T>) -> f64 {
        let m = store.value(self.m).view().into_dimensionality::<Ix2>().unwrap();
        linalg::cond_1norm(&m)
    }

    /// Training guard: error once the matrix degenerates.
    pub fn check_condition<T: Scalar>(&self, store: &ParamStore<T>) -> Result<()> {
        let cond = self.condition(store);
        if !cond.is_finite() {
            return Err(Error::SingularMatrix);
        }
        if cond > COND_LIMIT {
            return Err(Error::IllConditioned(cond));
        }
        Ok(())
    }
}

/// Max-abs deviation of `M . M^T` from the identity (orthogonality probe).
pub fn orthogonality_error<T: Scalar>(store: &ParamStore<T>, fm: &FusionMatrix) -> f64 {
    let m = store.value(fm.m).view().into_dimensionality::<Ix2>().unwrap();
    let mmt = m.dot(&m.t());
    let mut worst = 0.0f64;
    for i in 0..fm.n {
        for j in 0..fm.n {
            let target = if i == j { 1.0 } else { 0.0 };
            worst = worst.max((mmt[[i, j]].to_f() - target).abs());
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::normal_init;
    use ndarray::ArrayD;
    use rand::SeedableRng;

    fn setup(n: usize, seed: u64) -> (ParamStore<f32>, FusionMatrix, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let fm = FusionMatrix::new(&mut store, "itf", n, &mut rng);
        (store, fm, rng)
    }

    #[test]
    fn orthogonal_at_init() {
        for n in [16usize, 64] {
            let (store, fm, _) = setup(n, 3);
            assert!(orthogonality_error(&store, &fm) <= 1e-4);
            // The 1-norm estimate of an orthogonal matrix grows like n, far
            // below the 1e6 abort limit.
            assert!(fm.condition(&store) < 4.0 * n as f64);
        }
    }

    #[test]
    fn identity_matrix_is_a_no_op() {
        let mut store = ParamStore::<f32>::new();
        let n = 12;
        let eye = ArrayD::from_shape_fn(ndarray::IxDyn(&[n, n]), |ix| {
            if ix[0] == ix[1] {
                1.0f32
            } else {
                0.0
            }
        });
        let id = store.add("itf.M", eye);
        let fm = FusionMatrix { m: id, n };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tokens = normal_init::<f32>(&[n, 5], 1.0, &mut rng);
        let tape = Tape::new();
        let t = tape.leaf(tokens.clone());
        let fused = fm.fuse(&tape, &store, t).unwrap();
        assert_eq!(fused.value().as_ref(), &tokens);
    }

    #[test]
    fn fuse_unfuse_roundtrip_even_when_scaled() {
        let (mut store, fm, mut rng) = setup(24, 5);
        // Scale by 10: the inverse must still be exact (solve, not transpose).
        store.update(fm.m, |m| *m *= 10.0f32);
        let tokens = normal_init::<f32>(&[24, 7], 1.0, &mut rng);
        let tape = Tape::new();
        let t = tape.leaf(tokens.clone());
        let rt = fm
            .unfuse(&tape, &store, fm.fuse(&tape, &store, t).unwrap())
            .unwrap();
        let max_err = rt
            .value()
            .iter()
            .zip(tokens.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 1e-4, "roundtrip error {max_err}");
    }

    #[test]
    fn rank_deficient_matrix_reports_singular() {
        let (mut store, fm, _) = setup(8, 6);
        store.update(fm.m, |m| {
            // Make row 1 a copy of row 0.
            for j in 0..8 {
                let v = m[[0, j]];
                m[[1, j]] = v;
            }
        });
        let tape = Tape::<f32>::new();
        let t = tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[8, 3])));
        assert!(matches!(
            fm.unfuse(&tape, &store, t),
            Err(Error::SingularMatrix)
        ));
        assert!(fm.check_condition(&store).is_err());
    }

    #[test]
    fn shape_mismatch_detected() {
        let (store, fm, _) = setup(8, 7);
        let tape = Tape::<f32>::new();
        let t = tape.leaf(ArrayD::zeros(ndarray::IxDyn(&[9, 3])));
        assert!(matches!(
            fm.fuse(&tape, &store, t),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
