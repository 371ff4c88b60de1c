//! Scalar types the tape can run over.
//!
//! `f64` is the training precision. [`Dual`] carries a forward-mode tangent
//! alongside every value, so running a reverse pass over `Dual` scalars
//! yields the directional derivative of the gradient (a Hessian-vector
//! product) in the tangent parts.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

pub trait Scalar:
    Copy
    + Debug
    + Default
    + PartialEq
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    fn from_f64(x: f64) -> Self;
    /// Primal value.
    fn re(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn one() -> Self {
        Self::from_f64(1.0)
    }

    fn is_finite(self) -> bool {
        self.re().is_finite()
    }

    /// Row-major strided product `c = a·b` (or `c += a·b` when `accumulate`).
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n`; strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows as isize - 1) * strides.0 + (cols as isize - 1) * strides.1;
    assert!(
        strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len,
        "gemm operand out of bounds"
    );
}

#[allow(clippy::too_many_arguments)]
fn dgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
    accumulate: bool,
) {
    check_extent(a.len(), m, k, a_strides);
    check_extent(b.len(), k, n, b_strides);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|x| *x = 0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: extents of a and b were checked above; c holds m*n contiguous elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn re(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    ) {
        dgemm(m, k, n, a, a_strides, b, b_strides, c, accumulate);
    }
}

/// First-order dual number `re + eps·ε` with `ε² = 0`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dual {
    pub re: f64,
    pub eps: f64,
}

impl Dual {
    pub fn new(re: f64, eps: f64) -> Self {
        Self { re, eps }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, o: Dual) -> Dual {
        Dual::new(self.re + o.re, self.eps + o.eps)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, o: Dual) -> Dual {
        Dual::new(self.re - o.re, self.eps - o.eps)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, o: Dual) -> Dual {
        Dual::new(self.re * o.re, self.re * o.eps + self.eps * o.re)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, o: Dual) -> Dual {
        let q = self.re / o.re;
        Dual::new(q, (self.eps - q * o.eps) / o.re)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.re, -self.eps)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, o: Dual) {
        *self = *self + o;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, o: Dual) {
        *self = *self - o;
    }
}

impl MulAssign for Dual {
    #[inline]
    fn mul_assign(&mut self, o: Dual) {
        *self = *self * o;
    }
}

impl Scalar for Dual {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::new(x, 0.0)
    }
    #[inline]
    fn re(self) -> f64 {
        self.re
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.re.exp();
        Dual::new(e, e * self.eps)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.re.ln(), self.eps / self.re)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.re.sqrt();
        Dual::new(s, self.eps / (2.0 * s))
    }
    #[inline]
    fn tanh(self) -> Self {
        let t = self.re.tanh();
        Dual::new(t, (1.0 - t * t) * self.eps)
    }
    fn is_finite(self) -> bool {
        self.re.is_finite() && self.eps.is_finite()
    }

    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        c: &mut [Self],
        accumulate: bool,
    ) {
        // (A + εA')(B + εB') = AB + ε(A'B + AB'), each term a plain f64 product
        // over operands that keep their original strided layout.
        let a_re: Vec<f64> = a.iter().map(|x| x.re).collect();
        let a_eps: Vec<f64> = a.iter().map(|x| x.eps).collect();
        let b_re: Vec<f64> = b.iter().map(|x| x.re).collect();
        let b_eps: Vec<f64> = b.iter().map(|x| x.eps).collect();
        let mn = m * n;
        let (mut c_re, mut c_eps) = if accumulate {
            (
                c[..mn].iter().map(|x| x.re).collect::<Vec<_>>(),
                c[..mn].iter().map(|x| x.eps).collect::<Vec<_>>(),
            )
        } else {
            (vec![0.0; mn], vec![0.0; mn])
        };
        dgemm(m, k, n, &a_re, a_strides, &b_re, b_strides, &mut c_re, accumulate);
        dgemm(m, k, n, &a_eps, a_strides, &b_re, b_strides, &mut c_eps, accumulate);
        dgemm(m, k, n, &a_re, a_strides, &b_eps, b_strides, &mut c_eps, true);
        for (dst, (r, e)) in c[..mn].iter_mut().zip(c_re.into_iter().zip(c_eps)) {
            *dst = Dual::new(r, e);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dual_chain_rule() {
        // d/dx exp(x²) at x = 0.5 is 2x·exp(x²)
        let x = Dual::new(0.5, 1.0);
        let y = (x * x).exp();
        assert!((y.eps - 2.0 * 0.5 * 0.25f64.exp()).abs() < 1e-15);
        let z = Dual::new(2.0, 1.0).sqrt().ln();
        assert!((z.eps - 0.25).abs() < 1e-15);
    }

    #[test]
    fn dual_gemm_matches_scalar_loop() {
        let a: Vec<Dual> = (0..6).map(|i| Dual::new(i as f64, 0.5 * i as f64)).collect();
        let b: Vec<Dual> = (0..6).map(|i| Dual::new(1.0 - i as f64, 1.0)).collect();
        let mut c = vec![Dual::default(); 4];
        Dual::gemm(2, 3, 2, &a, (3, 1), &b, (2, 1), &mut c, false);
        for i in 0..2 {
            for j in 0..2 {
                let mut acc = Dual::default();
                for p in 0..3 {
                    acc += a[i * 3 + p] * b[p * 2 + j];
                }
                assert!((c[i * 2 + j].re - acc.re).abs() < 1e-12);
                assert!((c[i * 2 + j].eps - acc.eps).abs() < 1e-12);
            }
        }
    }
}
