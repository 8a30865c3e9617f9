//! Dense tensors and a define-by-run tape for reverse-mode differentiation.
//!
//! Everything is row-major. Precision is a type parameter: `f32` is the
//! working precision, `f64` exists so finite-difference checks are reliable.

mod tape;

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Scalar element type of a tensor.
pub trait Float:
    num_traits::Float
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    /// Precision tag used in checkpoint headers.
    const NAME: &'static str;

    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `c = alpha * a * b + beta * c` over strided views.
    ///
    /// # Safety
    /// Pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// regions; `c` must not alias `a` or `b`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Float for f32 {
    const NAME: &'static str = "f32";

    fn of(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: *const f32,
        rsa: isize,
        csa: isize,
        b: *const f32,
        rsb: isize,
        csb: isize,
        beta: f32,
        c: *mut f32,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

impl Float for f64 {
    const NAME: &'static str = "f64";

    fn of(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: *const f64,
        rsa: isize,
        csa: isize,
        b: *const f64,
        rsb: isize,
        csb: isize,
        beta: f64,
        c: *mut f64,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }
}

/// Logical `rows×cols` view of a row-major buffer, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'s, F> {
    pub data: &'s [F],
    pub rows: usize,
    pub cols: usize,
    pub trans: bool,
}

impl<'s, F: Float> MatView<'s, F> {
    pub fn new(data: &'s [F], rows: usize, cols: usize, trans: bool) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatView {
            data,
            rows,
            cols,
            trans,
        }
    }

    pub fn t(self) -> Self {
        MatView {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            trans: !self.trans,
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.trans {
            // stored as cols×rows
            (1, self.rows as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `c = a·b + beta·c` with `c` a row-major `a.rows × b.cols` buffer.
pub(crate) fn gemm<F: Float>(a: MatView<'_, F>, b: MatView<'_, F>, beta: F, c: &mut [F]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert_eq!(c.len(), a.rows * b.cols, "gemm output size");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    // SAFETY: views were size-checked above and `c` is a distinct &mut.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            F::one(),
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Dense row-major tensor with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
    requires_grad: bool,
    grad: Option<Vec<F>>,
}

impl<F: Float> Tensor<F> {
    pub fn new(shape: Vec<usize>, data: Vec<F>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, F::zero())
    }

    pub fn full(shape: &[usize], value: F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> F) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds from nested f64 rows, converting to `F`.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Self::new(
            vec![rows.len(), cols],
            rows.iter()
                .flat_map(|r| r.iter().map(|&v| F::of(v)))
                .collect(),
        )
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[F]> {
        self.grad.as_deref()
    }

    pub fn set_grad(&mut self, grad: Vec<F>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::shape("set_grad", &self.shape, &[grad.len()]));
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn take_grad(&mut self) -> Option<Vec<F>> {
        self.grad.take()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Element-precision conversion; gradients are dropped.
    pub fn cast<G: Float>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::of(v.as_f64())).collect(),
            requires_grad: self.requires_grad,
            grad: None,
        }
    }
}

/// Numerically stable softmax along `axis`, outside any tape.
pub fn softmax<F: Float>(x: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    if axis >= x.rank() {
        return Err(Error::InvalidArgument(format!(
            "softmax axis {axis} out of range for rank {}",
            x.rank()
        )));
    }
    let mut out = vec![F::zero(); x.numel()];
    tape::softmax_forward(x.data(), x.shape(), axis, None, &mut out);
    Tensor::new(x.shape().to_vec(), out)
}

/// Sinusoidal position table, `[positions × d_model]`.
pub fn sinusoidal_positions<F: Float>(positions: usize, d_model: usize) -> Tensor<F> {
    let half = d_model / 2;
    Tensor::from_fn(&[positions.max(1), d_model], |idx| {
        let (pos, col) = (idx / d_model, idx % d_model);
        let (i, is_cos) = if col < half {
            (col, false)
        } else {
            (col - half, true)
        };
        let denom = (half.max(1) as f64 - 1.0).max(1.0);
        let inv_timescale = (-(10_000f64.ln()) * i as f64 / denom).exp();
        let angle = pos as f64 * inv_timescale;
        F::of(if col >= 2 * half {
            0.0
        } else if is_cos {
            angle.cos()
        } else {
            angle.sin()
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
        assert_eq!(
            Tensor::<f32>::new(vec![2, 3], vec![0.0; 6])
                .unwrap()
                .numel(),
            6
        );
    }

    #[test]
    fn grad_shape_is_checked() {
        let mut t = Tensor::<f64>::zeros(&[2, 2]);
        assert!(t.set_grad(vec![0.0; 3]).is_err());
        t.set_grad(vec![1.0; 4]).unwrap();
        assert_eq!(t.grad().unwrap(), &[1.0; 4]);
    }

    #[test]
    fn softmax_examples() {
        let x = Tensor::<f64>::from_rows(&[&[0.0, 0.0]]).unwrap();
        assert_eq!(softmax(&x, 1).unwrap().data(), &[0.5, 0.5]);

        let x = Tensor::<f32>::from_rows(&[&[1000.0, 0.0]]).unwrap();
        let y = softmax(&x, 1).unwrap();
        assert!(y.data().iter().all(|v| v.is_finite()));
        assert!((y.data()[0] - 1.0).abs() < 1e-6 && y.data()[1] < 1e-6);

        // direct evaluation: e^i / (e + e^2 + e^3)
        let z: f64 = (1..=3).map(|i| (i as f64).exp()).sum();
        let expect: Vec<f64> = (1..=3).map(|i| (i as f64).exp() / z).collect();
        let x = Tensor::<f64>::from_rows(&[&[1.0, 2.0, 3.0]]).unwrap();
        let y = softmax(&x, 1).unwrap();
        for (a, b) in y.data().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in y.data().iter().zip([0.0900, 0.2447, 0.6652]) {
            assert!((a - b).abs() < 1e-4);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let x = Tensor::<f64>::from_rows(&[&[1.0, 5.0], &[1.0, -5.0]]).unwrap();
        let y = softmax(&x, 0).unwrap();
        assert_eq!(y.data()[0], 0.5);
        assert_eq!(y.data()[2], 0.5);
        assert!((y.data()[1] + y.data()[3] - 1.0).abs() < 1e-12);
        assert!(softmax(&x, 2).is_err());
    }

    #[test]
    fn positions_start_with_sin_zero_cos_one() {
        let p = sinusoidal_positions::<f64>(3, 4);
        assert_eq!(&p.data()[..4], &[0.0, 0.0, 1.0, 1.0]);
        assert!((p.data()[4] - 1f64.sin()).abs() < 1e-12);
    }
}
