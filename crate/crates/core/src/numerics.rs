//! Scalar, vector and matrix primitives shared by every other module.
//!
//! Everything here is generic over [`Real`], which is implemented for `f32`
//! (training) and `f64` (gradient checks and analysis).

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{dim_err, LngramError, Result};

/// Default RMSNorm epsilon for the codec, gate and convolution paths.
pub const DEFAULT_EPS: f64 = 1e-6;

/// Floor applied to the reference distribution inside [`kl_divergence`].
pub const KL_FLOOR: f64 = 1e-12;

pub trait Real:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal.
    fn lit(x: f64) -> Self;

    fn as_f64(self) -> f64;

    /// Tolerance used when validating probability vectors of this precision.
    fn prob_tolerance() -> f64;
}

impl Real for f32 {
    #[inline]
    fn lit(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
    fn prob_tolerance() -> f64 {
        1e-5
    }
}

impl Real for f64 {
    #[inline]
    fn lit(x: f64) -> Self {
        x
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
    fn prob_tolerance() -> f64 {
        1e-9
    }
}

/// Row-major dense matrix. Rows index positions, columns index channels.
pub type RealMatrix<F> = Array2<F>;

/// A validated probability vector: non-negative entries summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector<F: Real = f64>(Vec<F>);

impl<F: Real> ProbVector<F> {
    pub fn new(entries: Vec<F>) -> Result<Self> {
        if entries.is_empty() {
            return Err(dim_err!("probability vector must be non-empty"));
        }
        if entries.iter().any(|&p| !(p >= F::zero()) || !p.is_finite()) {
            return Err(LngramError::Input("probabilities must be finite and non-negative".into()));
        }
        let total: f64 = entries.iter().map(|p| p.as_f64()).sum();
        if (total - 1.0).abs() > F::prob_tolerance() * (entries.len() as f64).max(1.0) {
            return Err(LngramError::Input(format!("probabilities sum to {total}, expected 1")));
        }
        Ok(Self(entries))
    }

    pub fn uniform(len: usize) -> Self {
        let p = F::one() / F::lit(len as f64);
        Self(vec![p; len])
    }

    pub fn as_slice(&self) -> &[F] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn argmax(&self) -> usize {
        argmax(&self.0)
    }

    pub fn into_inner(self) -> Vec<F> {
        self.0
    }
}

#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub fn silu<F: Real>(x: F) -> F {
    x * sigmoid(x)
}

/// Derivative of `x * sigmoid(x)`.
#[inline]
pub fn silu_grad<F: Real>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<F: Real>(x: F) -> F {
    let c = F::lit(0.797_884_560_802_865_4);
    let inner = c * (x + F::lit(0.044715) * x * x * x);
    F::lit(0.5) * x * (F::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<F: Real>(x: F) -> F {
    let c = F::lit(0.797_884_560_802_865_4);
    let x3 = x * x * x;
    let inner = c * (x + F::lit(0.044715) * x3);
    let th = inner.tanh();
    let sech2 = F::one() - th * th;
    F::lit(0.5) * (F::one() + th) + F::lit(0.5) * x * sech2 * c * (F::one() + F::lit(3.0 * 0.044715) * x * x)
}

pub fn argmax<F: Real>(xs: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Reciprocal root-mean-square `1 / sqrt(mean(x^2) + eps)`.
#[inline]
pub fn inv_rms<F: Real>(x: &[F], eps: F) -> F {
    let ms = x.iter().fold(F::zero(), |acc, &v| acc + v * v) / F::lit(x.len() as f64);
    F::one() / (ms + eps).sqrt()
}

/// Gain-free RMSNorm of a single vector.
pub fn rmsnorm<F: Real>(x: &[F], eps: F) -> Result<Vec<F>> {
    if x.is_empty() {
        return Err(dim_err!("rmsnorm of an empty vector"));
    }
    let r = inv_rms(x, eps);
    Ok(x.iter().map(|&v| v * r).collect())
}

/// Row-wise gain-free RMSNorm; returns the normalized rows and each row's
/// reciprocal RMS for the backward pass.
pub fn rmsnorm_rows<F: Real>(x: ArrayView2<'_, F>, eps: F) -> (Array2<F>, Vec<F>) {
    let mut out = x.to_owned();
    let mut inv = Vec::with_capacity(x.nrows());
    for mut row in out.rows_mut() {
        let r = inv_rms(row.as_slice().expect("contiguous row"), eps);
        row.mapv_inplace(|v| v * r);
        inv.push(r);
    }
    (out, inv)
}

/// Backward of `y = x * inv_rms(x)` given the normalized output `y`, the
/// stored reciprocal RMS and the upstream gradient. Accumulates into `dx`.
pub fn rmsnorm_backward_row<F: Real>(y: &[F], inv: F, dy: &[F], dx: &mut [F]) {
    let d = F::lit(y.len() as f64);
    let proj = dot(y, dy) / d;
    for ((dxi, &yi), &dyi) in dx.iter_mut().zip(y).zip(dy) {
        *dxi += inv * (dyi - yi * proj);
    }
}

/// Temperature softmax with max-subtraction.
pub fn softmax_temp<F: Real>(scores: &[F], tau: F) -> Result<ProbVector<F>> {
    if !(tau > F::zero()) {
        return Err(LngramError::Parameter(format!("softmax temperature must be positive, got {tau}")));
    }
    if scores.is_empty() {
        return Err(dim_err!("softmax of an empty vector"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(LngramError::Input("softmax scores must be finite".into()));
    }
    let mut out = vec![F::zero(); scores.len()];
    softmax_into(scores, tau, &mut out);
    Ok(ProbVector(out))
}

/// Unchecked temperature softmax into a caller buffer.
pub(crate) fn softmax_into<F: Real>(scores: &[F], tau: F, out: &mut [F]) {
    let m = scores.iter().fold(F::neg_infinity(), |m, &s| m.max(s / tau));
    let mut total = F::zero();
    for (o, &s) in out.iter_mut().zip(scores) {
        *o = (s / tau - m).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Depthwise causal convolution over time with left zero padding:
/// `out[t, c] = sum_i kernels[c, i] * v[t - i * dilation, c]`.
pub fn depthwise_causal_conv<F: Real>(
    v: ArrayView2<'_, F>,
    kernels: ArrayView2<'_, F>,
    dilation: usize,
) -> Result<Array2<F>> {
    check_conv_shapes(v, kernels, dilation)?;
    let (t_len, d) = v.dim();
    let width = kernels.ncols();
    let mut out = Array2::zeros((t_len, d));
    for t in 0..t_len {
        for i in 0..width {
            let lag = i * dilation;
            if lag > t {
                break;
            }
            let src = v.row(t - lag);
            let mut dst = out.row_mut(t);
            for c in 0..d {
                dst[c] += kernels[[c, i]] * src[c];
            }
        }
    }
    Ok(out)
}

/// Gradients of [`depthwise_causal_conv`] with respect to its input and its
/// kernels; the kernel gradient is accumulated into `d_kernels`.
pub fn depthwise_causal_conv_backward<F: Real>(
    v: ArrayView2<'_, F>,
    kernels: ArrayView2<'_, F>,
    dilation: usize,
    d_out: ArrayView2<'_, F>,
    mut d_kernels: ndarray::ArrayViewMut2<'_, F>,
) -> Result<Array2<F>> {
    check_conv_shapes(v, kernels, dilation)?;
    if d_out.dim() != v.dim() || d_kernels.dim() != kernels.dim() {
        return Err(dim_err!("convolution gradient shapes do not match the forward shapes"));
    }
    let (t_len, d) = v.dim();
    let width = kernels.ncols();
    let mut d_v = Array2::zeros((t_len, d));
    for t in 0..t_len {
        let g = d_out.row(t);
        for i in 0..width {
            let lag = i * dilation;
            if lag > t {
                break;
            }
            let src = v.row(t - lag);
            let mut dst = d_v.row_mut(t - lag);
            for c in 0..d {
                dst[c] += kernels[[c, i]] * g[c];
                d_kernels[[c, i]] += g[c] * src[c];
            }
        }
    }
    Ok(d_v)
}

fn check_conv_shapes<F: Real>(v: ArrayView2<'_, F>, kernels: ArrayView2<'_, F>, dilation: usize) -> Result<()> {
    if kernels.ncols() == 0 {
        return Err(LngramError::Parameter("convolution width must be at least 1".into()));
    }
    if dilation == 0 {
        return Err(LngramError::Parameter("convolution dilation must be at least 1".into()));
    }
    if kernels.nrows() != v.ncols() {
        return Err(dim_err!("kernels have {} channels but input has {}", kernels.nrows(), v.ncols()));
    }
    Ok(())
}

/// `KL(p || q)` with `0 ln 0 = 0` and `q` floored at [`KL_FLOOR`].
pub fn kl_divergence<F: Real>(p: &ProbVector<F>, q: &ProbVector<F>) -> Result<F> {
    if p.len() != q.len() {
        return Err(dim_err!("KL divergence of vectors with lengths {} and {}", p.len(), q.len()));
    }
    Ok(kl_unchecked(p.as_slice(), q.as_slice()))
}

pub(crate) fn kl_unchecked<F: Real>(p: &[F], q: &[F]) -> F {
    let floor = F::lit(KL_FLOOR);
    let total = p.iter().zip(q).fold(F::zero(), |acc, (&pi, &qi)| {
        if pi > F::zero() {
            acc + pi * (pi / qi.max(floor)).ln()
        } else {
            acc
        }
    });
    total.max(F::zero())
}

/// Central finite-difference gradient `(f(z + h e_j) - f(z - h e_j)) / 2h`.
pub fn finite_difference_grad<Fun>(mut f: Fun, z: &[f64], h: f64) -> Result<Vec<f64>>
where
    Fun: FnMut(&[f64]) -> f64,
{
    if !(h > 0.0) {
        return Err(LngramError::Parameter(format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = z.to_vec();
    let mut grad = Vec::with_capacity(z.len());
    for j in 0..z.len() {
        probe[j] = z[j] + h;
        let plus = f(&probe);
        probe[j] = z[j] - h;
        let minus = f(&probe);
        probe[j] = z[j];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(LngramError::Oracle(format!("non-finite function value probing coordinate {j}")));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// Maximum elementwise relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// `y[j] += sum_i x[i] * w[i, j]` for a row vector `x` and matrix `w`.
pub fn vec_mat_acc<F: Real>(x: ArrayView1<'_, F>, w: ArrayView2<'_, F>, mut y: ArrayViewMut1<'_, F>) {
    for (i, &xi) in x.iter().enumerate() {
        if xi == F::zero() {
            continue;
        }
        y.scaled_add(xi, &w.row(i));
    }
}

/// Converts a matrix between precisions.
pub fn cast_matrix<A: Real, B: Real>(m: &Array2<A>) -> Array2<B> {
    m.mapv(|v| B::lit(v.as_f64()))
}
