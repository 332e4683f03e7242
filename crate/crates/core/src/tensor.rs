//! Dense NHWC tensors and the scalar abstraction shared by the 32-bit
//! training path and the 64-bit gradient verification path.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

use crate::error::{Error, Result};

/// Element type of a [`Tensor`].
///
/// Implemented for `f32` (training and inference) and `f64` (gradient
/// checks). The matrix product is dispatched to the matching `matrixmultiply`
/// kernel.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    ///
    /// # Safety
    /// Pointers and strides must describe valid, non-overlapping (for `c`)
    /// matrices of the given sizes.
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

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable")
    }
}

impl Scalar for f32 {
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
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
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
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// Row-major matrix view used by [`gemm`].
#[derive(Clone, Copy, Debug)]
pub enum MatRef<'a, T> {
    /// `rows x cols`, row-major.
    N(&'a [T], usize, usize),
    /// Stored row-major as `cols x rows`, used transposed.
    T(&'a [T], usize, usize),
}

impl<T> MatRef<'_, T> {
    fn dims(&self) -> (usize, usize) {
        match *self {
            MatRef::N(_, r, c) | MatRef::T(_, r, c) => (r, c),
        }
    }

    fn raw(&self) -> (*const T, isize, isize) {
        match *self {
            MatRef::N(s, _, c) => (s.as_ptr(), c as isize, 1),
            MatRef::T(s, r, _) => (s.as_ptr(), 1, r as isize),
        }
    }

    fn storage_len(&self) -> usize {
        match *self {
            MatRef::N(s, _, _) | MatRef::T(s, _, _) => s.len(),
        }
    }
}

/// Dot product with eight independent partial sums, in a fixed order.
#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for l in 0..8 {
            lanes[l] += x[l] * y[l];
        }
    }
    for (l, (&x, &y)) in ca.remainder().iter().zip(cb.remainder()).enumerate() {
        lanes[l] += x * y;
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
}

/// `y += alpha * x`.
#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (d, &v) in y.iter_mut().zip(x) {
        *d += alpha * v;
    }
}

/// `a + x * y`, fused where the target has hardware FMA.
#[inline(always)]
pub(crate) fn madd<T: Scalar>(a: T, x: T, y: T) -> T {
    if cfg!(target_feature = "fma") {
        x.mul_add(y, a)
    } else {
        a + x * y
    }
}

/// Products narrower than this on the output or inner axis skip the packed
/// kernel, whose panel packing dominates at such sizes.
const NARROW: usize = 8;

impl<T: Scalar> MatRef<'_, T> {
    #[inline]
    fn at(&self, i: usize, j: usize) -> T {
        match *self {
            MatRef::N(s, _, c) => s[i * c + j],
            MatRef::T(s, r, _) => s[j * r + i],
        }
    }

    /// Contiguous row-major copy of the transpose.
    fn transposed(&self) -> Vec<T> {
        let (r, c) = self.dims();
        let mut out = Vec::with_capacity(r * c);
        for j in 0..c {
            out.extend((0..r).map(|i| self.at(i, j)));
        }
        out
    }

    /// Contiguous row-major copy.
    fn dense(&self) -> Vec<T> {
        let (r, c) = self.dims();
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend((0..c).map(|j| self.at(i, j)));
        }
        out
    }
}

fn gemm_narrow_output<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.dims();
    let n = b.dims().1;
    let bt = b.transposed();
    match a {
        MatRef::N(s, _, _) => {
            for (i, row) in out.chunks_exact_mut(n).enumerate() {
                let ai = &s[i * k..(i + 1) * k];
                for (j, o) in row.iter_mut().enumerate() {
                    *o = beta * *o + dot(ai, &bt[j * k..(j + 1) * k]);
                }
            }
        }
        MatRef::T(s, _, _) => {
            let mut acc = vec![T::zero(); n * m];
            for kk in 0..k {
                let src = &s[kk * m..(kk + 1) * m];
                for j in 0..n {
                    axpy(bt[j * k + kk], src, &mut acc[j * m..(j + 1) * m]);
                }
            }
            for (i, row) in out.chunks_exact_mut(n).enumerate() {
                for (j, o) in row.iter_mut().enumerate() {
                    *o = beta * *o + acc[j * m + i];
                }
            }
        }
    }
}

fn gemm_narrow_inner<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    let k = a.dims().1;
    let n = b.dims().1;
    let bd = b.dense();
    for (i, row) in out.chunks_exact_mut(n).enumerate() {
        for o in row.iter_mut() {
            *o = beta * *o;
        }
        for kk in 0..k {
            axpy(a.at(i, kk), &bd[kk * n..(kk + 1) * n], row);
        }
    }
}

/// `out = a * b + beta * out`, `out` row-major `m x n`.
pub fn gemm<T: Scalar>(a: MatRef<'_, T>, b: MatRef<'_, T>, beta: T, out: &mut [T]) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimension");
    assert!(a.storage_len() >= m * k && b.storage_len() >= k * n);
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in out.iter_mut() {
            *v = *v * beta;
        }
        return;
    }
    if n <= NARROW {
        return gemm_narrow_output(a, b, beta, out);
    }
    if k <= NARROW {
        return gemm_narrow_inner(a, b, beta, out);
    }
    let (pa, rsa, csa) = a.raw();
    let (pb, rsb, csb) = b.raw();
    // SAFETY: sizes checked above; `out` is an exclusive borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            pa,
            rsa,
            csa,
            pb,
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Extents of a 4-axis tensor in batch, height, width, channel order.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Shape {
    pub const fn new(n: usize, h: usize, w: usize, c: usize) -> Self {
        Shape { n, h, w, c }
    }

    pub const fn scalar() -> Self {
        Shape::new(1, 1, 1, 1)
    }

    pub const fn numel(&self) -> usize {
        self.n * self.h * self.w * self.c
    }

    /// Number of spatial positions across the batch.
    pub const fn pixels(&self) -> usize {
        self.n * self.h * self.w
    }

    pub const fn with_c(&self, c: usize) -> Self {
        Shape::new(self.n, self.h, self.w, c)
    }

    pub const fn dims(&self) -> [usize; 4] {
        [self.n, self.h, self.w, self.c]
    }
}

impl fmt::Debug for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}x{}", self.n, self.h, self.w, self.c)
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Dense tensor stored contiguously in NHWC order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor({:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, ", {:?}", self.data)?;
        }
        write!(f, ")")
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    pub fn scalar(value: T) -> Self {
        Self::full(Shape::scalar(), value)
    }

    pub fn from_vec(shape: Shape, data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::shape(
                "tensor",
                format!("{} elements for shape {shape}", data.len()),
            ));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize, usize, usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            for y in 0..shape.h {
                for x in 0..shape.w {
                    for c in 0..shape.c {
                        data.push(f(n, y, x, c));
                    }
                }
            }
        }
        Tensor { shape, data }
    }

    #[inline]
    pub fn shape(&self) -> Shape {
        self.shape
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, n: usize, y: usize, x: usize, c: usize) -> usize {
        let s = self.shape;
        ((n * s.h + y) * s.w + x) * s.c + c
    }

    #[inline]
    pub fn at(&self, n: usize, y: usize, x: usize, c: usize) -> T {
        self.data[self.index(n, y, x, c)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, y: usize, x: usize, c: usize, v: T) {
        let i = self.index(n, y, x, c);
        self.data[i] = v;
    }

    /// Reinterprets the element buffer under a new shape of equal size.
    pub fn reshape(mut self, shape: Shape) -> Result<Self> {
        if shape.numel() != self.shape.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{} -> {}", self.shape, shape),
            ));
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean(&self) -> T {
        self.sum() / T::from_usize(self.data.len().max(1)).unwrap()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Adds `other` elementwise in place.
    pub fn add_assign(&mut self, other: &Tensor<T>) -> Result<()> {
        self.expect_shape("add_assign", other.shape)?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Copies batch item `n` into a new single-item tensor.
    pub fn batch_item(&self, n: usize) -> Tensor<T> {
        let per = self.shape.h * self.shape.w * self.shape.c;
        Tensor {
            shape: Shape::new(1, self.shape.h, self.shape.w, self.shape.c),
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Stacks single-item tensors along the batch axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?
            .shape;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        let mut n = 0;
        for t in items {
            if (t.shape.h, t.shape.w, t.shape.c) != (first.h, first.w, first.c) {
                return Err(Error::shape("stack", format!("{} vs {}", first, t.shape)));
            }
            n += t.shape.n;
            data.extend_from_slice(&t.data);
        }
        Tensor::from_vec(Shape::new(n, first.h, first.w, first.c), data)
    }

    pub(crate) fn expect_shape(&self, op: &'static str, other: Shape) -> Result<()> {
        if self.shape != other {
            return Err(Error::shape(op, format!("{} vs {}", self.shape, other)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 3x4
        let mut out = vec![0.0; 8];
        gemm(MatRef::N(&a, 2, 3), MatRef::N(&b, 3, 4), 0.0, &mut out);
        for i in 0..2 {
            for j in 0..4 {
                let e: f64 = (0..3).map(|k| a[i * 3 + k] * b[k * 4 + j]).sum();
                assert_eq!(out[i * 4 + j], e);
            }
        }
        // a^T (3x2) stored as 2x3
        let mut out_t = vec![1.0; 6];
        let c: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0]; // 2x2
        gemm(MatRef::T(&a, 3, 2), MatRef::N(&c, 2, 2), 1.0, &mut out_t);
        for i in 0..3 {
            for j in 0..2 {
                let e: f64 = 1.0 + (0..2).map(|k| a[k * 3 + i] * c[k * 2 + j]).sum::<f64>();
                assert_eq!(out_t[i * 2 + j], e);
            }
        }
    }

    #[test]
    fn every_gemm_path_matches_naive_product() {
        let val = |i: usize| ((i * 37 % 101) as f64 - 50.0) / 25.0;
        for (m, k, n) in [(5, 3, 2), (9, 40, 4), (7, 2, 30), (12, 20, 17)] {
            let a: Vec<f64> = (0..m * k).map(val).collect();
            let b: Vec<f64> = (0..k * n).map(|i| val(i + 7)).collect();
            let at: Vec<f64> = (0..k * m).map(|i| a[(i % m) * k + i / m]).collect();
            let bt: Vec<f64> = (0..n * k).map(|i| b[(i % k) * n + i / k]).collect();
            for (ar, br) in [
                (MatRef::N(&a, m, k), MatRef::N(&b, k, n)),
                (MatRef::T(&at, m, k), MatRef::N(&b, k, n)),
                (MatRef::N(&a, m, k), MatRef::T(&bt, k, n)),
                (MatRef::T(&at, m, k), MatRef::T(&bt, k, n)),
            ] {
                let mut out: Vec<f64> = (0..m * n).map(|i| val(i + 3)).collect();
                let before = out.clone();
                gemm(ar, br, 0.5, &mut out);
                for i in 0..m {
                    for j in 0..n {
                        let e: f64 = 0.5 * before[i * n + j] + (0..k).map(|q| a[i * k + q] * b[q * n + j]).sum::<f64>();
                        assert!((out[i * n + j] - e).abs() < 1e-12, "{m}x{k}x{n}");
                    }
                }
            }
        }
    }

    #[test]
    fn from_vec_rejects_wrong_length() {
        assert!(Tensor::<f32>::from_vec(Shape::new(1, 2, 2, 1), vec![0.0; 3]).is_err());
        let t = Tensor::<f32>::from_vec(Shape::new(1, 2, 2, 1), vec![0.0; 4]).unwrap();
        assert_eq!(t.len(), t.shape().numel());
    }

    #[test]
    fn stack_and_split_batch() {
        let a = Tensor::<f32>::full(Shape::new(1, 2, 2, 3), 1.0);
        let b = Tensor::<f32>::full(Shape::new(1, 2, 2, 3), 2.0);
        let s = Tensor::stack(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(s.shape(), Shape::new(2, 2, 2, 3));
        assert_eq!(s.batch_item(1), b);
        assert_eq!(s.batch_item(0), a);
    }
}
