//! Dense numeric primitives shared by the model, the losses and the composer.
//!
//! Everything here is a pure function of its inputs. Matrices are row-major
//! `ndarray` values held at 64-bit precision; the on-disk representation is
//! 32-bit (see [`crate::dataio`]).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ArrayViewD, IxDyn};

use crate::error::{Error, Result};

/// An n-dimensional row-major array of finite 64-bit floats.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::shape("Tensor::new", expected, data.len()));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { dims, data })
    }

    pub fn from_matrix(m: &Array2<f64>) -> Result<Self> {
        Self::new(m.shape().to_vec(), m.iter().copied().collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn view(&self) -> ArrayViewD<'_, f64> {
        ArrayViewD::from_shape(IxDyn(&self.dims), &self.data).expect("dims validated at construction")
    }

    /// Reinterprets a 2-d tensor as a matrix.
    pub fn into_matrix(self) -> Result<Array2<f64>> {
        if self.dims.len() != 2 {
            return Err(Error::shape("Tensor::into_matrix", "2 dims", self.dims.len()));
        }
        let (rows, cols) = (self.dims[0], self.dims[1]);
        Ok(Array2::from_shape_vec((rows, cols), self.data).expect("dims validated at construction"))
    }
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    let mut out = v.mapv(|x| (x - max).exp());
    let total = out.sum();
    out /= total;
    Ok(out)
}

/// `log Σ exp(v_i)` without overflow.
pub fn log_sum_exp(v: ArrayView1<f64>) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput);
    }
    let max = v.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    Ok(max + v.iter().map(|&x| (x - max).exp()).sum::<f64>().ln())
}

pub fn l2_norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn l2_normalize(v: ArrayView1<f64>) -> Result<Array1<f64>> {
    let norm = l2_norm(v);
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::ZeroNorm);
    }
    Ok(v.mapv(|x| x / norm))
}

/// `uᵀ W w`.
pub fn bilinear(u: ArrayView1<f64>, w_mat: ArrayView2<f64>, w: ArrayView1<f64>) -> Result<f64> {
    let (p, q) = w_mat.dim();
    if u.len() != p || w.len() != q {
        return Err(Error::shape(
            "bilinear",
            format!("u[{p}], W[{p},{q}], w[{q}]"),
            format!("u[{}], W[{p},{q}], w[{}]", u.len(), w.len()),
        ));
    }
    Ok(u.dot(&w_mat.dot(&w)))
}

pub fn dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape("dot", a.len(), b.len()));
    }
    Ok(a.dot(&b))
}

/// Solves `G x = r` for a small symmetric positive definite `G` by Cholesky.
/// Returns `None` when `G` is numerically singular.
pub fn solve_spd(g: ArrayView2<f64>, r: ArrayView1<f64>) -> Option<Array1<f64>> {
    let n = r.len();
    debug_assert_eq!(g.dim(), (n, n));
    let scale = (0..n).map(|i| g[[i, i]].abs()).fold(0.0, f64::max);
    let mut l = Array2::<f64>::zeros((n, n));
    for i in 0..n {
        for j in 0..=i {
            let mut acc = g[[i, j]];
            for p in 0..j {
                acc -= l[[i, p]] * l[[j, p]];
            }
            if i == j {
                if acc <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
                    return None;
                }
                l[[i, i]] = acc.sqrt();
            } else {
                l[[i, j]] = acc / l[[j, j]];
            }
        }
    }
    let mut y = Array1::<f64>::zeros(n);
    for i in 0..n {
        let mut acc = r[i];
        for p in 0..i {
            acc -= l[[i, p]] * y[p];
        }
        y[i] = acc / l[[i, i]];
    }
    let mut x = Array1::<f64>::zeros(n);
    for i in (0..n).rev() {
        let mut acc = y[i];
        for p in i + 1..n {
            acc -= l[[p, i]] * x[p];
        }
        x[i] = acc / l[[i, i]];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_examples() {
        let s = softmax(array![0.0, 0.0].view()).unwrap();
        assert_abs_diff_eq!(s, array![0.5, 0.5], epsilon = 1e-15);
        let s = softmax(array![3f64.ln(), 0.0].view()).unwrap();
        assert_abs_diff_eq!(s, array![0.75, 0.25], epsilon = 1e-15);
        let s = softmax(array![1000.0, 1000.0].view()).unwrap();
        assert_abs_diff_eq!(s, array![0.5, 0.5], epsilon = 1e-15);
    }

    #[test]
    fn softmax_rejects_empty() {
        let err = softmax(Array1::<f64>::zeros(0).view()).unwrap_err();
        assert_eq!(err.to_string(), "empty input");
    }

    #[test]
    fn normalize_examples() {
        let n = l2_normalize(array![3.0, 4.0].view()).unwrap();
        assert_abs_diff_eq!(n, array![0.6, 0.8], epsilon = 1e-15);
        assert_eq!(l2_normalize(array![1.0, 0.0].view()).unwrap(), array![1.0, 0.0]);
        let err = l2_normalize(array![0.0, 0.0].view()).unwrap_err();
        assert_eq!(err.to_string(), "zero-norm vector");
    }

    #[test]
    fn normalize_matches_scalar_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let v: Vec<f64> = (0..10).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut sq = 0.0;
        for x in &v {
            sq += x * x;
        }
        let norm = sq.sqrt();
        let out = l2_normalize(Array::from(v.clone()).view()).unwrap();
        for (o, x) in out.iter().zip(&v) {
            assert_abs_diff_eq!(*o, x / norm, epsilon = 1e-15);
        }
        assert_abs_diff_eq!(l2_norm(out.view()), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn bilinear_examples() {
        let eye = Array2::<f64>::eye(2);
        assert_eq!(
            bilinear(array![1.0, 0.0].view(), eye.view(), array![0.0, 1.0].view()).unwrap(),
            0.0
        );
        assert_eq!(
            bilinear(array![1.0, 1.0].view(), eye.view(), array![2.0, 3.0].view()).unwrap(),
            5.0
        );
        assert!(bilinear(array![1.0].view(), eye.view(), array![0.0, 1.0].view()).is_err());
    }

    #[test]
    fn bilinear_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let m: Vec<f64> = (0..20).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut expected = 0.0;
        for p in 0..4 {
            for q in 0..5 {
                expected += u[p] * m[p * 5 + q] * w[q];
            }
        }
        let mat = Array2::from_shape_vec((4, 5), m).unwrap();
        let got = bilinear(Array::from(u).view(), mat.view(), Array::from(w).view()).unwrap();
        assert_abs_diff_eq!(got, expected, epsilon = 1e-12);
    }

    #[test]
    fn tensor_rejects_non_finite_and_bad_dims() {
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_ok());
    }

    #[test]
    fn spd_solve_recovers_solution() {
        let g = array![[4.0, 1.0], [1.0, 3.0]];
        let x = solve_spd(g.view(), array![1.0, 2.0].view()).unwrap();
        assert_abs_diff_eq!(g.dot(&x), array![1.0, 2.0], epsilon = 1e-12);
        assert!(solve_spd(array![[1.0, 1.0], [1.0, 1.0]].view(), array![1.0, 1.0].view()).is_none());
    }

    proptest! {
        #[test]
        fn softmax_is_shift_invariant(v in prop::collection::vec(-50.0f64..50.0, 1..12), c in -500.0f64..500.0) {
            let a = Array::from(v.clone());
            let b = a.mapv(|x| x + c);
            let sa = softmax(a.view()).unwrap();
            let sb = softmax(b.view()).unwrap();
            prop_assert!((sa.sum() - 1.0).abs() < 1e-12);
            for (x, y) in sa.iter().zip(sb.iter()) {
                prop_assert!((x - y).abs() < 1e-12);
                prop_assert!(*x >= 0.0);
            }
        }

        #[test]
        fn bilinear_is_linear_in_first_argument(
            u in prop::collection::vec(-1.0f64..1.0, 3),
            m in prop::collection::vec(-1.0f64..1.0, 12),
            w in prop::collection::vec(-1.0f64..1.0, 4),
            alpha in -10.0f64..10.0,
        ) {
            let u = Array::from(u);
            let m = Array2::from_shape_vec((3, 4), m).unwrap();
            let w = Array::from(w);
            let base = bilinear(u.view(), m.view(), w.view()).unwrap();
            let scaled = bilinear(u.mapv(|x| alpha * x).view(), m.view(), w.view()).unwrap();
            prop_assert!((scaled - alpha * base).abs() < 1e-12);
        }
    }
}
