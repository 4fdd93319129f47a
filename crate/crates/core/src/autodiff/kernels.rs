//! Raw numeric kernels behind the graph primitives.

/// `C (+)= op(A) · op(B)` for row-major operands, where `op` optionally
/// transposes. `A` is `m×k` after `op`, `B` is `k×n` after `op`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // (row stride, column stride) of op(A) and op(B)
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    if m * k * n < 2048 {
        if !accumulate {
            c.fill(0.0);
        }
        for i in 0..m {
            for p in 0..k {
                let av = a[(i as isize * rsa + p as isize * csa) as usize];
                if av == 0.0 {
                    continue;
                }
                let row = &mut c[i * n..(i + 1) * n];
                for (j, cv) in row.iter_mut().enumerate() {
                    *cv += av * b[(p as isize * rsb + j as isize * csb) as usize];
                }
            }
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every element addressed by the given
    // dimensions and strides (checked by the debug assertions above).
    unsafe {
        matrixmultiply::dgemm(
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

/// Unfolds `x` (`[batch, cin, len]`) into `[cin·k, batch·len]` columns for a
/// same-padded stride-1 convolution with odd kernel width `k`.
pub fn im2col(x: &[f64], batch: usize, cin: usize, len: usize, k: usize) -> Vec<f64> {
    let pad = k / 2;
    let cols = batch * len;
    let mut out = vec![0.0; cin * k * cols];
    for c in 0..cin {
        for kk in 0..k {
            let row = &mut out[(c * k + kk) * cols..(c * k + kk + 1) * cols];
            for b in 0..batch {
                let src = &x[(b * cin + c) * len..(b * cin + c + 1) * len];
                let dst = &mut row[b * len..(b + 1) * len];
                for (l, d) in dst.iter_mut().enumerate() {
                    let pos = l as isize + kk as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < len {
                        *d = src[pos as usize];
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub fn col2im(cols: &[f64], batch: usize, cin: usize, len: usize, k: usize, dx: &mut [f64]) {
    let pad = k / 2;
    let width = batch * len;
    for c in 0..cin {
        for kk in 0..k {
            let row = &cols[(c * k + kk) * width..(c * k + kk + 1) * width];
            for b in 0..batch {
                let dst = &mut dx[(b * cin + c) * len..(b * cin + c + 1) * len];
                let src = &row[b * len..(b + 1) * len];
                for (l, &g) in src.iter().enumerate() {
                    let pos = l as isize + kk as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < len {
                        dst[pos as usize] += g;
                    }
                }
            }
        }
    }
}
