//! Small dense linear-algebra routines: LU with partial pivoting, explicit
//! inverse, orthogonal initialization, and a 4-point homography solve.

use crate::autodiff::Scalar;
use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// LU factorization with partial pivoting of a square matrix.
pub struct LuFactors<T> {
    lu: Array2<T>,
    piv: Vec<usize>,
    swaps: usize,
}

impl<T: Scalar> LuFactors<T> {
    /// Returns `None` when a pivot is numerically zero.
    pub fn factor(a: &ArrayView2<'_, T>) -> Option<Self> {
        let n = a.nrows();
        assert_eq!(n, a.ncols(), "LU needs a square matrix");
        let mut lu = a.to_owned();
        let mut piv: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        let scale = a.iter().fold(T::zero(), |m, &v| m.max(v.abs()));
        let tiny = scale * T::from_f(1e-13) + T::min_positive_value();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[[k, k]].abs();
            for i in (k + 1)..n {
                let v = lu[[i, k]].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= tiny {
                return None;
            }
            if p != k {
                for j in 0..n {
                    let tmp = lu[[k, j]];
                    lu[[k, j]] = lu[[p, j]];
                    lu[[p, j]] = tmp;
                }
                piv.swap(k, p);
                swaps += 1;
            }
            let pivot = lu[[k, k]];
            for i in (k + 1)..n {
                let f = lu[[i, k]] / pivot;
                lu[[i, k]] = f;
                for j in (k + 1)..n {
                    let sub = f * lu[[k, j]];
                    lu[[i, j]] = lu[[i, j]] - sub;
                }
            }
        }
        Some(LuFactors { lu, piv, swaps })
    }

    /// Solve `A X = B` for all columns of `B`.
    pub fn solve(&self, b: &ArrayView2<'_, T>) -> Array2<T> {
        let n = self.lu.nrows();
        assert_eq!(b.nrows(), n, "solve: row mismatch");
        let m = b.ncols();
        let mut x = Array2::<T>::zeros((n, m));
        for col in 0..m {
            // Apply the row permutation, then forward/backward substitution.
            let mut y = Array1::<T>::zeros(n);
            for i in 0..n {
                y[i] = b[[self.piv[i], col]];
            }
            for i in 0..n {
                let mut acc = y[i];
                for j in 0..i {
                    acc = acc - self.lu[[i, j]] * y[j];
                }
                y[i] = acc;
            }
            for i in (0..n).rev() {
                let mut acc = y[i];
                for j in (i + 1)..n {
                    acc = acc - self.lu[[i, j]] * y[j];
                }
                y[i] = acc / self.lu[[i, i]];
            }
            for i in 0..n {
                x[[i, col]] = y[i];
            }
        }
        x
    }

    pub fn determinant(&self) -> T {
        let mut det = if self.swaps % 2 == 0 {
            T::one()
        } else {
            -T::one()
        };
        for i in 0..self.lu.nrows() {
            det = det * self.lu[[i, i]];
        }
        det
    }
}

/// Explicit inverse via LU; `None` when singular.
pub fn inverse<T: Scalar>(a: &ArrayView2<'_, T>) -> Option<Array2<T>> {
    let n = a.nrows();
    let lu = LuFactors::factor(a)?;
    let eye = Array2::<T>::from_shape_fn((n, n), |(i, j)| {
        if i == j {
            T::one()
        } else {
            T::zero()
        }
    });
    Some(lu.solve(&eye.view()))
}

/// 1-norm condition number estimate `|A|_1 * |A^-1|_1`; infinite when singular.
pub fn cond_1norm<T: Scalar>(a: &ArrayView2<'_, T>) -> f64 {
    let norm1 = |m: &ArrayView2<'_, T>| -> f64 {
        let mut best = 0.0f64;
        for col in m.columns() {
            let s: f64 = col.iter().map(|v| v.abs().to_f()).sum();
            best = best.max(s);
        }
        best
    };
    match inverse(a) {
        Some(inv) => norm1(a) * norm1(&inv.view()),
        None => f64::INFINITY,
    }
}

/// Random orthogonal matrix with determinant +1, from modified Gram-Schmidt
/// with re-orthogonalization on a Gaussian sample.
pub fn random_orthogonal<T: Scalar>(n: usize, rng: &mut ChaCha8Rng) -> Array2<T> {
    let mut q = Array2::<f64>::from_shape_fn((n, n), |_| normal(rng));
    for i in 0..n {
        for _pass in 0..2 {
            for j in 0..i {
                let dot: f64 = (0..n).map(|k| q[[i, k]] * q[[j, k]]).sum();
                for k in 0..n {
                    q[[i, k]] -= dot * q[[j, k]];
                }
            }
        }
        let norm: f64 = (0..n).map(|k| q[[i, k]] * q[[i, k]]).sum::<f64>().sqrt();
        for k in 0..n {
            q[[i, k]] /= norm;
        }
    }
    // Fix the determinant sign by flipping one row.
    if let Some(lu) = LuFactors::factor(&q.view()) {
        if lu.determinant() < 0.0 {
            for k in 0..n {
                q[[0, k]] = -q[[0, k]];
            }
        }
    }
    q.mapv(T::from_f)
}

/// Standard normal draw (Box-Muller, fully determined by the generator).
pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Homography mapping the unit square corners `(0,0) (1,0) (1,1) (0,1)` to the
/// four given points; returned as a row-major 3x3 matrix.
pub fn homography_from_unit_square(dst: &[[f64; 2]; 4]) -> Array2<f64> {
    // Direct linear transform with h33 = 1: 8 equations, 8 unknowns.
    let src = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]];
    let mut a = Array2::<f64>::zeros((8, 8));
    let mut b = Array2::<f64>::zeros((8, 1));
    for i in 0..4 {
        let (x, y) = (src[i][0], src[i][1]);
        let (u, v) = (dst[i][0], dst[i][1]);
        a[[2 * i, 0]] = x;
        a[[2 * i, 1]] = y;
        a[[2 * i, 2]] = 1.0;
        a[[2 * i, 6]] = -u * x;
        a[[2 * i, 7]] = -u * y;
        b[[2 * i, 0]] = u;
        a[[2 * i + 1, 3]] = x;
        a[[2 * i + 1, 4]] = y;
        a[[2 * i + 1, 5]] = 1.0;
        a[[2 * i + 1, 6]] = -v * x;
        a[[2 * i + 1, 7]] = -v * y;
        b[[2 * i + 1, 0]] = v;
    }
    let lu = LuFactors::factor(&a.view()).expect("degenerate warp corners");
    let h = lu.solve(&b.view());
    let mut out = Array2::<f64>::zeros((3, 3));
    for i in 0..8 {
        out[[i / 3, i % 3]] = h[[i, 0]];
    }
    out[[2, 2]] = 1.0;
    out
}

/// Apply a 3x3 homography to a point.
pub fn apply_homography(h: &Array2<f64>, x: f64, y: f64) -> (f64, f64) {
    let u = h[[0, 0]] * x + h[[0, 1]] * y + h[[0, 2]];
    let v = h[[1, 0]] * x + h[[1, 1]] * y + h[[1, 2]];
    let w = h[[2, 0]] * x + h[[2, 1]] * y + h[[2, 2]];
    (u / w, v / w)
}
