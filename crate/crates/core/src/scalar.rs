//! Floating point abstraction shared by every numeric module.
//!
//! Tests run in `f64`; training runs in `f32`. Matrix products are routed to
//! the `matrixmultiply` kernels for the concrete type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Byte width, also used as the checkpoint type tag.
    const BYTES: usize;

    /// `c = alpha * a * b + beta * c` with arbitrary row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:ident, $bytes:expr) => {
        impl Scalar for $t {
            const BYTES: usize = $bytes;

            #[inline]
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                // matrixmultiply reads beta * c even when k == 0, which is what we want.
                unsafe {
                    matrixmultiply::$gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn write_le(self, out: &mut Vec<u8>) {
                out.extend_from_slice(&self.to_le_bytes());
            }

            fn read_le(bytes: &[u8]) -> Self {
                let mut buf = [0u8; $bytes];
                buf.copy_from_slice(&bytes[..$bytes]);
                <$t>::from_le_bytes(buf)
            }
        }
    };
}

impl_scalar!(f32, sgemm, 4);
impl_scalar!(f64, dgemm, 8);

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_loop() {
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, 3, 1, &b, 2, 1, 0.0, &mut c, 2, 1);
        for i in 0..2 {
            for j in 0..2 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 2 + j]).sum();
                assert_eq!(c[i * 2 + j], want);
            }
        }
    }

    #[test]
    fn le_roundtrip() {
        let mut v = Vec::new();
        1.25f32.write_le(&mut v);
        (-3.5f64).write_le(&mut v);
        assert_eq!(f32::read_le(&v[0..4]), 1.25);
        assert_eq!(f64::read_le(&v[4..12]), -3.5);
    }
}
