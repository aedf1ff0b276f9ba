//! Dense 64-bit kernels with paired forward/backward implementations.
//!
//! Every differentiable function here ships its analytic gradient next to the
//! forward pass, and [`finite_difference_gradient`] is the independent oracle
//! used to verify them. All arithmetic is f64 with fixed reduction order so
//! results are reproducible across runs and platforms.

use crate::error::{Error, Result};

/// Variance below this is treated as degenerate (constant input up to
/// rounding). Well above the ~1e-32 junk left by centering a constant
/// vector, well below any real signal.
const VAR_FLOOR: f64 = 1e-24;

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix data length {} != {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self * other`, shapes (m,k) x (k,n) -> (m,n).
    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let out_row = out.row_mut(i);
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = other.row(k);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self^T * other`, shapes (k,m) x (k,n) -> (m,n).
    pub fn matmul_tn(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.rows, other.rows, "matmul_tn shape mismatch");
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = out.row_mut(i);
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// Mean of a stack of same-shaped matrices.
    pub fn mean_of(stack: &[Matrix]) -> Matrix {
        assert!(!stack.is_empty());
        let mut out = Matrix::zeros(stack[0].rows, stack[0].cols);
        for m in stack {
            assert_eq!((m.rows, m.cols), (out.rows, out.cols));
            for (o, v) in out.data.iter_mut().zip(&m.data) {
                *o += v;
            }
        }
        let inv = 1.0 / stack.len() as f64;
        for o in out.data.iter_mut() {
            *o *= inv;
        }
        out
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Cosine similarity. Zero-norm inputs are defined as similarity 0.
pub fn cosine(u: &[f64], v: &[f64]) -> f64 {
    cosine_with_grad(u, v).0
}

/// Cosine similarity plus gradients w.r.t. both inputs.
///
/// At a zero-norm input the value and both gradients are 0.
pub fn cosine_with_grad(u: &[f64], v: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    assert_eq!(u.len(), v.len(), "cosine dimension mismatch");
    let nu = dot(u, u).sqrt();
    let nv = dot(v, v).sqrt();
    if nu == 0.0 || nv == 0.0 {
        return (0.0, vec![0.0; u.len()], vec![0.0; v.len()]);
    }
    let d = dot(u, v);
    let cos = d / (nu * nv);
    let gu: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(&x, &y)| y / (nu * nv) - cos * x / (nu * nu))
        .collect();
    let gv: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(&x, &y)| x / (nu * nv) - cos * y / (nv * nv))
        .collect();
    (cos, gu, gv)
}

/// Sample Pearson correlation. Zero-variance inputs are defined as 0.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    pearson_with_grad(x, y).0
}

/// Pearson correlation plus gradients w.r.t. both inputs.
///
/// The gradient accounts for the dependence of the sample means on the
/// inputs. Zero-variance inputs yield value 0 and zero gradients.
pub fn pearson_with_grad(x: &[f64], y: &[f64]) -> (f64, Vec<f64>, Vec<f64>) {
    let n = x.len();
    assert_eq!(n, y.len(), "pearson dimension mismatch");
    assert!(n >= 2, "pearson needs at least two points");
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let xc: Vec<f64> = x.iter().map(|&v| v - mx).collect();
    let yc: Vec<f64> = y.iter().map(|&v| v - my).collect();
    let sxx = dot(&xc, &xc);
    let syy = dot(&yc, &yc);
    if sxx < VAR_FLOOR || syy < VAR_FLOOR {
        return (0.0, vec![0.0; n], vec![0.0; n]);
    }
    let sxy = dot(&xc, &yc);
    let denom = (sxx * syy).sqrt();
    let p = sxy / denom;
    // d p / d x_k = yc_k / denom - p * xc_k / sxx  (mean terms vanish since
    // the centered vectors sum to zero)
    let gx: Vec<f64> = xc
        .iter()
        .zip(&yc)
        .map(|(&a, &b)| b / denom - p * a / sxx)
        .collect();
    let gy: Vec<f64> = xc
        .iter()
        .zip(&yc)
        .map(|(&a, &b)| a / denom - p * b / syy)
        .collect();
    (p, gx, gy)
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    assert!(!logits.is_empty(), "softmax of empty input");
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Backward pass of softmax: maps dL/d(weights) to dL/d(logits).
pub fn softmax_backward(weights: &[f64], grad_weights: &[f64]) -> Vec<f64> {
    debug_assert_eq!(weights.len(), grad_weights.len());
    let inner = dot(weights, grad_weights);
    weights
        .iter()
        .zip(grad_weights)
        .map(|(&w, &g)| w * (g - inner))
        .collect()
}

/// Entropy of the bin-frequency distribution of `values`, natural log.
///
/// Values must lie in [0, 1]; each is assigned to one of `bins` equal-width
/// bins (1.0 falls in the last bin). Result is clamped to be nonnegative:
/// a single occupied bin yields -ln(1 + eps) which is ~-1e-10 for the
/// default eps.
pub fn histogram_entropy(values: &[f64], bins: usize, eps: f64) -> f64 {
    assert!(bins >= 1, "histogram needs at least one bin");
    assert!(!values.is_empty(), "histogram of empty input");
    let mut counts = vec![0usize; bins];
    for &v in values {
        debug_assert!((0.0..=1.0).contains(&v), "value {v} outside [0,1]");
        let idx = ((v * bins as f64) as usize).min(bins - 1);
        counts[idx] += 1;
    }
    let n = values.len() as f64;
    let mut h = 0.0;
    for &c in &counts {
        if c > 0 {
            let p = c as f64 / n;
            h -= p * (p + eps).ln();
        }
    }
    h.max(0.0)
}

/// Central finite differences of `f` over `params`.
///
/// Each slot holds (f(p+h) - f(p-h)) / 2h; a non-finite evaluation is
/// reported as NaN in that slot. `f` must be deterministic.
pub fn finite_difference_gradient<F>(mut f: F, params: &mut [f64], step: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut grad = vec![0.0; params.len()];
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + step;
        let plus = f(params);
        params[i] = orig - step;
        let minus = f(params);
        params[i] = orig;
        grad[i] = if plus.is_finite() && minus.is_finite() {
            (plus - minus) / (2.0 * step)
        } else {
            f64::NAN
        };
    }
    grad
}

/// Relative error used by all gradient checks.
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1.0f64.max(analytic.abs()).max(numeric.abs())
}

/// One row of a gradient-check report: the worst element of one tensor.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub parameter: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() <= tol, "{a} vs {b} (tol {tol})");
    }

    #[test]
    fn cosine_unit_values() {
        assert_close(cosine(&[1.0, 0.0], &[1.0, 0.0]), 1.0, 1e-12);
        assert_close(cosine(&[1.0, 0.0], &[0.0, 1.0]), 0.0, 1e-12);
        // 4 / (sqrt(5) * sqrt(5))
        assert_close(cosine(&[1.0, 2.0], &[2.0, 1.0]), 0.8, 1e-12);
    }

    #[test]
    fn cosine_zero_norm() {
        let (c, gu, gv) = cosine_with_grad(&[0.0, 0.0], &[1.0, 2.0]);
        assert_eq!(c, 0.0);
        assert!(gu.iter().chain(&gv).all(|&g| g == 0.0));
    }

    #[test]
    fn cosine_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let d = rng.gen_range(2..8);
            let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, gu, gv) = cosine_with_grad(&u, &v);
            let mut params = u.clone();
            let fd_u = finite_difference_gradient(|p| cosine(p, &v), &mut params, 1e-5);
            let mut params = v.clone();
            let fd_v = finite_difference_gradient(|p| cosine(&u, p), &mut params, 1e-5);
            for (a, n) in gu.iter().zip(&fd_u).chain(gv.iter().zip(&fd_v)) {
                assert!(rel_error(*a, *n) < 1e-4, "cosine grad {a} vs fd {n}");
            }
        }
    }

    #[test]
    fn pearson_exact_linear() {
        assert_close(pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]), 1.0, 1e-12);
        assert_close(pearson(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]), -1.0, 1e-12);
    }

    #[test]
    fn pearson_hand_computed() {
        assert_close(pearson(&[1.0, 2.0, 4.0], &[1.0, 3.0, 5.0]), 0.9820, 1e-4);
    }

    #[test]
    fn pearson_zero_variance() {
        let (p, gx, gy) = pearson_with_grad(&[2.0, 2.0, 2.0], &[1.0, 2.0, 3.0]);
        assert_eq!(p, 0.0);
        assert!(gx.iter().chain(&gy).all(|&g| g == 0.0));
    }

    #[test]
    fn pearson_affine_invariance_and_symmetry() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let n = rng.gen_range(3..10);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = if rng.gen_bool(0.5) { 1.7 } else { -0.3 };
            let b = rng.gen_range(-1.0..1.0);
            let y: Vec<f64> = x.iter().map(|&v| a * v + b).collect();
            assert!((pearson(&x, &y).abs() - 1.0).abs() < 1e-12);

            let z: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            assert_close(pearson(&x, &z), pearson(&z, &x), 1e-14);
        }
    }

    #[test]
    fn pearson_gradient_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let n = rng.gen_range(3..9);
            let x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (_, gx, gy) = pearson_with_grad(&x, &y);
            let mut params = x.clone();
            let fd_x = finite_difference_gradient(|p| pearson(p, &y), &mut params, 1e-5);
            let mut params = y.clone();
            let fd_y = finite_difference_gradient(|p| pearson(&x, p), &mut params, 1e-5);
            for (a, n) in gx.iter().zip(&fd_x).chain(gy.iter().zip(&fd_y)) {
                assert!(rel_error(*a, *n) < 1e-4, "pearson grad {a} vs fd {n}");
            }
        }
    }

    #[test]
    fn softmax_values() {
        let w = softmax(&[0.0, 0.0]);
        assert_close(w[0], 0.5, 1e-12);
        assert_close(w[1], 0.5, 1e-12);
        assert_eq!(softmax(&[42.0]), vec![1.0]);
        let w = softmax(&[0.99989, 0.0]);
        assert_close(w[0], 0.7310, 1e-3);
        assert_close(w[1], 0.2690, 1e-3);
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let k = rng.gen_range(1..9);
            let x: Vec<f64> = (0..k).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let w = softmax(&x);
            assert_close(w.iter().sum::<f64>(), 1.0, 1e-12);
            let shifted: Vec<f64> = x.iter().map(|&v| v + 17.25).collect();
            let ws = softmax(&shifted);
            for (a, b) in w.iter().zip(&ws) {
                assert_close(*a, *b, 1e-12);
            }
        }
    }

    #[test]
    fn softmax_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let k = rng.gen_range(2..6);
            let logits: Vec<f64> = (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let gw: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = softmax(&logits);
            let gl = softmax_backward(&w, &gw);
            let mut params = logits.clone();
            let fd = finite_difference_gradient(|p| dot(&softmax(p), &gw), &mut params, 1e-5);
            for (a, n) in gl.iter().zip(&fd) {
                assert!(rel_error(*a, *n) < 1e-4);
            }
        }
    }

    #[test]
    fn entropy_closed_forms() {
        // one value per bin: uniform over 100 bins
        let uniform: Vec<f64> = (0..100).map(|i| (i as f64 + 0.5) / 100.0).collect();
        assert_close(histogram_entropy(&uniform, 100, 1e-10), 100f64.ln(), 1e-3);

        let one_bin = vec![0.42; 50];
        assert!(histogram_entropy(&one_bin, 100, 1e-10) <= 1e-9);

        let two_bins: Vec<f64> = (0..40).map(|i| if i % 2 == 0 { 0.1 } else { 0.9 }).collect();
        assert_close(histogram_entropy(&two_bins, 100, 1e-10), 2f64.ln(), 1e-3);
    }

    #[test]
    fn entropy_bounded_by_log_bins() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..50 {
            let n = rng.gen_range(1..300);
            let values: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..=1.0)).collect();
            let h = histogram_entropy(&values, 100, 1e-10);
            assert!(h <= 100f64.ln() + 1e-9);
            assert!(h >= 0.0);
        }
    }

    #[test]
    fn entropy_boundary_value_goes_to_last_bin() {
        // exactly 1.0 must not index out of range
        let h = histogram_entropy(&[1.0, 0.0], 100, 1e-10);
        assert!(h.is_finite());
    }

    #[test]
    fn fd_quadratic_and_constant() {
        let mut params = vec![3.0];
        let g = finite_difference_gradient(|p| p[0] * p[0], &mut params, 1e-4);
        assert_close(g[0], 6.0, 1e-6);

        let g = finite_difference_gradient(|_| 2.5, &mut params, 1e-4);
        assert_eq!(g[0], 0.0);
    }

    #[test]
    fn fd_reports_non_finite() {
        let mut params = vec![1.0];
        let g = finite_difference_gradient(|p| (p[0] - 1.0).ln(), &mut params, 1e-4);
        assert!(g[0].is_nan());
    }

    #[test]
    fn matrix_matmul_small() {
        let a = Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b);
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
        // (A^T)^T * B via matmul_tn on transposed layout
        let at = Matrix::from_vec(3, 2, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]).unwrap();
        let c2 = at.matmul_tn(&b);
        assert_eq!(c2.data(), c.data());
    }

    #[test]
    fn matrix_mean_of_stack() {
        let a = Matrix::from_vec(1, 2, vec![1.0, 3.0]).unwrap();
        let b = Matrix::from_vec(1, 2, vec![3.0, 5.0]).unwrap();
        let m = Matrix::mean_of(&[a, b]);
        assert_eq!(m.data(), &[2.0, 4.0]);
    }
}
