/// Strides of a matrix operand as (row stride, column stride).
pub(crate) type Strides = (usize, usize);

/// `C (+)= A · B` for an `m×k` A and `k×n` B with arbitrary strides, written to
/// a row-major `m×n` C. Products accumulate in `f64`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    sa: Strides,
    b: &[f32],
    sb: Strides,
    c: &mut [f32],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!((m - 1) * sa.0 + (k - 1) * sa.1 < a.len(), "gemm: A out of bounds");
        assert!((k - 1) * sb.0 + (n - 1) * sb.1 < b.len(), "gemm: B out of bounds");
    }
    let c = &mut c[..m * n];
    let a64: Vec<f64> = a.iter().map(|&v| v as f64).collect();
    let b64: Vec<f64> = b.iter().map(|&v| v as f64).collect();
    let mut c64: Vec<f64> = if accumulate {
        c.iter().map(|&v| v as f64).collect()
    } else {
        vec![0.0; m * n]
    };
    // SAFETY: the asserts above bound every strided read of A and B, and C is a
    // dense row-major m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a64.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b64.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            1.0,
            c64.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    for (dst, v) in c.iter_mut().zip(&c64) {
        *dst = *v as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transposed_strides() {
        // A = [[1,2],[3,4]] read as its transpose.
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), &mut c, false);
        assert_eq!(c, [1.0, 3.0, 2.0, 4.0]);
        gemm(2, 2, 2, &a, (1, 2), &b, (2, 1), &mut c, true);
        assert_eq!(c, [2.0, 6.0, 4.0, 8.0]);
    }
}
