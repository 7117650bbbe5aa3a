//! Dense row-major 2-D tensors over f32/f64 with a GEMM hook.
//!
//! Training math runs in f32; the same stacks instantiate at f64 for
//! finite-difference gradient verification.

use num_traits::Float;

/// Scalar usable by the network substrate. The GEMM hook dispatches to the
/// matching matrixmultiply kernel.
pub trait Real: Float + Send + Sync + std::fmt::Debug + std::fmt::Display + 'static {
    /// c = alpha * a(m,k) . b(k,n) + beta * c, arbitrary strides.
    ///
    /// # Safety
    /// Pointers must cover the strided extents, as in `matrixmultiply`.
    unsafe fn gemm(
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

    fn from_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    unsafe fn gemm(
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
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(x: f64) -> Self {
        x as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    unsafe fn gemm(
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
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
    }

    fn from_f64(x: f64) -> Self {
        x
    }

    fn as_f64(self) -> f64 {
        self
    }
}

/// (rows, cols) row-major matrix; rows are batch items.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Tensor2<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor2 { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), rows * cols);
        Tensor2 { rows, cols, data }
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    pub fn first_nonfinite(&self) -> Option<usize> {
        self.data.iter().position(|v| !v.is_finite())
    }

    /// y(m,n) = x(m,k) . W^T where W is (n,k) row-major: the fc forward map.
    pub fn matmul_wt(&self, w: &Tensor2<T>) -> Tensor2<T> {
        assert_eq!(self.cols, w.cols, "input width must match fc fan-in");
        let (m, k, n) = (self.rows, self.cols, w.rows);
        let mut out = Tensor2::zeros(m, n);
        unsafe {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                self.data.as_ptr(),
                k as isize,
                1,
                w.data.as_ptr(),
                1,
                k as isize,
                T::zero(),
                out.data.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        out
    }

    /// y(m,k) = g(m,n) . W where W is (n,k) row-major: the fc input-gradient map.
    pub fn matmul_w(&self, w: &Tensor2<T>) -> Tensor2<T> {
        assert_eq!(self.cols, w.rows);
        let (m, n, k) = (self.rows, self.cols, w.cols);
        let mut out = Tensor2::zeros(m, k);
        unsafe {
            T::gemm(
                m,
                n,
                k,
                T::one(),
                self.data.as_ptr(),
                n as isize,
                1,
                w.data.as_ptr(),
                k as isize,
                1,
                T::zero(),
                out.data.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        out
    }

    /// dW(n,k) = g^T(n,m) . x(m,k) for g (m,n): the fc weight-gradient map.
    pub fn grad_wt(g: &Tensor2<T>, x: &Tensor2<T>) -> Tensor2<T> {
        assert_eq!(g.rows, x.rows);
        let (m, n, k) = (g.rows, g.cols, x.cols);
        let mut out = Tensor2::zeros(n, k);
        unsafe {
            T::gemm(
                n,
                m,
                k,
                T::one(),
                g.data.as_ptr(),
                1,
                n as isize,
                x.data.as_ptr(),
                k as isize,
                1,
                T::zero(),
                out.data.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        out
    }
}
