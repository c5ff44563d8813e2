use super::Float;

// Row/column strides of a row-major operand, optionally transposed.
fn strides(rows: usize, cols: usize, trans: bool) -> (isize, isize) {
    if trans {
        // stored as [cols, rows]
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

fn check(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert!(a >= m * k, "gemm: lhs buffer too small");
    assert!(b >= k * n, "gemm: rhs buffer too small");
    assert!(c >= m * n, "gemm: output buffer too small");
}

macro_rules! impl_float {
    ($ty:ty, $name:literal, $kernel:path) => {
        impl Float for $ty {
            const DTYPE: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_trans: bool,
                b: &[Self],
                b_trans: bool,
                c: &mut [Self],
                accumulate: bool,
            ) {
                check(m, k, n, a.len(), b.len(), c.len());
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    if !accumulate {
                        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
                    }
                    return;
                }
                let (rsa, csa) = strides(m, k, a_trans);
                let (rsb, csb) = strides(k, n, b_trans);
                let beta = if accumulate { 1.0 } else { 0.0 };
                // SAFETY: buffer extents were checked above against the
                // requested dimensions and strides describe in-bounds layouts.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_float!(f32, "f32", matrixmultiply::sgemm);
impl_float!(f64, "f64", matrixmultiply::dgemm);
