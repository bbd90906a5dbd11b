//! Dense kernels: matrix products, transposes, and the im2col/col2im pair
//! that lowers valid convolution onto matrix multiplication.
//!
//! All kernels are single-threaded loops whose innermost dimension runs over
//! independent output lanes (axpy form), so the compiler can vectorize them
//! without reordering any floating-point reduction — results are therefore
//! bit-identical across SIMD widths. Loop nests are chosen so the hot operand
//! of each product stays cache-resident:
//!
//! * [`matmul`] streams `B` row-by-row while each output row accumulates in
//!   registers/L1 (`ikj` order).
//! * [`matmul_tn`] computes `Aᵀ·B` in one pass over the shared `r` axis as a
//!   sum of outer products, so both inputs are read exactly once and only the
//!   (small) output has to sit in cache — this is the `dW = xᵀ·dy` shape.

use crate::tensor::Element;

/// Rows per register tile of [`matmul`].
const MM_IB: usize = 4;
/// Columns per register tile of [`matmul`].
const MM_JB: usize = 16;

/// `C[r×c] = A[r×k] · B[k×c]`.
///
/// The bulk of the output is produced in `MM_IB × MM_JB` register tiles that
/// accumulate across the whole `k` axis before touching memory, so each `B`
/// row is loaded once per `MM_IB` output rows instead of once per row. Edge
/// rows and columns fall back to a plain axpy sweep. Every output element
/// still sums its products in ascending-`p` order, so tiling does not change
/// any result bit.
pub fn matmul<E: Element>(a: &[E], r: usize, k: usize, b: &[E], c: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), r * k);
    debug_assert_eq!(b.len(), k * c);
    let mut out = vec![E::ZERO; r * c];
    let i_main = r - r % MM_IB;
    let j_main = c - c % MM_JB;
    for i0 in (0..i_main).step_by(MM_IB) {
        for j0 in (0..j_main).step_by(MM_JB) {
            let mut acc = [[E::ZERO; MM_JB]; MM_IB];
            for p in 0..k {
                let b_tile = &b[p * c + j0..p * c + j0 + MM_JB];
                for (rr, acc_row) in acc.iter_mut().enumerate() {
                    let av = a[(i0 + rr) * k + p];
                    for (cv, &bv) in acc_row.iter_mut().zip(b_tile) {
                        *cv = *cv + av * bv;
                    }
                }
            }
            for (rr, acc_row) in acc.iter().enumerate() {
                out[(i0 + rr) * c + j0..][..MM_JB].copy_from_slice(acc_row);
            }
        }
        if j_main < c {
            matmul_axpy(&a[i0 * k..(i0 + MM_IB) * k], MM_IB, k, b, c, j_main, &mut out[i0 * c..]);
        }
    }
    if i_main < r {
        matmul_axpy(&a[i_main * k..], r - i_main, k, b, c, 0, &mut out[i_main * c..]);
    }
    out
}

/// Axpy fallback for [`matmul`] edges: accumulate columns `j0..c` of
/// `A[rows×k]·B[k×c]` into `out` (already zeroed), one `B` row at a time.
fn matmul_axpy<E: Element>(
    a: &[E],
    rows: usize,
    k: usize,
    b: &[E],
    c: usize,
    j0: usize,
    out: &mut [E],
) {
    for i in 0..rows {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut out[i * c + j0..i * c + c];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * c + j0..(p + 1) * c];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// `C[m×n] = Aᵀ · B` for `A[r×m]`, `B[r×n]`, accumulated as rank-1 updates
/// along the shared `r` axis (single pass over both inputs).
pub fn matmul_tn<E: Element>(a: &[E], r: usize, m: usize, b: &[E], n: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), r * m);
    debug_assert_eq!(b.len(), r * n);
    let mut out = vec![E::ZERO; m * n];
    for row in 0..r {
        let a_row = &a[row * m..(row + 1) * m];
        let b_row = &b[row * n..(row + 1) * n];
        for (i, &av) in a_row.iter().enumerate() {
            let c_row = &mut out[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
    out
}

/// `B[c×r] = Aᵀ` for `A[r×c]`, tiled for locality.
pub fn transpose<E: Element>(a: &[E], r: usize, c: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), r * c);
    const TILE: usize = 32;
    let mut out = vec![E::ZERO; r * c];
    for i0 in (0..r).step_by(TILE) {
        for j0 in (0..c).step_by(TILE) {
            for i in i0..(i0 + TILE).min(r) {
                for j in j0..(j0 + TILE).min(c) {
                    out[j * r + i] = a[i * c + j];
                }
            }
        }
    }
    out
}

/// `out[r×c] += 1·biasᵀ` — add `bias[c]` to every row.
pub fn add_bias_rows<E: Element>(out: &mut [E], bias: &[E], r: usize, c: usize) {
    debug_assert_eq!(out.len(), r * c);
    debug_assert_eq!(bias.len(), c);
    for row in out.chunks_exact_mut(c) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
    let _ = r;
}

/// Column sums: `out[c] = Σ_rows a[row, ·]`.
pub fn sum_rows<E: Element>(a: &[E], r: usize, c: usize) -> Vec<E> {
    debug_assert_eq!(a.len(), r * c);
    let mut out = vec![E::ZERO; c];
    for row in a.chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    let _ = r;
    out
}

/// Output spatial extent of a valid (unpadded) convolution/pool window.
pub fn conv_out_extent(in_extent: usize, kernel: usize, stride: usize) -> usize {
    debug_assert!(in_extent >= kernel && stride >= 1);
    (in_extent - kernel) / stride + 1
}

/// Lower `input[N,C,H,W]` into patch rows for a valid convolution: the result
/// has one row per output position `(n, y, x)` (row-major over those), and
/// each row holds the receptive field flattened as `(c, ky, kx)` — matching a
/// weight tensor `[F, C, kh, kw]` flattened row-major to `[F, C·kh·kw]`.
pub fn im2col<E: Element>(
    input: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<E> {
    debug_assert_eq!(input.len(), n * c * h * w);
    let h_out = conv_out_extent(h, kh, stride);
    let w_out = conv_out_extent(w, kw, stride);
    let patch = c * kh * kw;
    let mut cols = vec![E::ZERO; n * h_out * w_out * patch];
    for img in 0..n {
        for y in 0..h_out {
            let row0 = (img * h_out + y) * w_out; // first output row index for this scanline
            for ch in 0..c {
                for ky in 0..kh {
                    let src_line = &input[((img * c + ch) * h + y * stride + ky) * w..][..w];
                    let off = (ch * kh + ky) * kw;
                    for x in 0..w_out {
                        let dst = &mut cols[(row0 + x) * patch + off..][..kw];
                        dst.copy_from_slice(&src_line[x * stride..x * stride + kw]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add patch-row gradients back onto the
/// `[N,C,H,W]` input layout.
pub fn col2im_acc<E: Element>(
    dcols: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
) -> Vec<E> {
    let h_out = conv_out_extent(h, kh, stride);
    let w_out = conv_out_extent(w, kw, stride);
    let patch = c * kh * kw;
    debug_assert_eq!(dcols.len(), n * h_out * w_out * patch);
    let mut dx = vec![E::ZERO; n * c * h * w];
    for img in 0..n {
        for y in 0..h_out {
            let row0 = (img * h_out + y) * w_out;
            for ch in 0..c {
                for ky in 0..kh {
                    let dst_line = &mut dx[((img * c + ch) * h + y * stride + ky) * w..][..w];
                    let off = (ch * kh + ky) * kw;
                    for x in 0..w_out {
                        let src = &dcols[(row0 + x) * patch + off..][..kw];
                        for (d, &s) in dst_line[x * stride..x * stride + kw].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Permute convolution output rows `[N·H'·W', F]` into `[N, F, H', W']`.
pub fn rows_to_nchw<E: Element>(rows: &[E], n: usize, f: usize, hw: usize) -> Vec<E> {
    debug_assert_eq!(rows.len(), n * hw * f);
    let mut out = vec![E::ZERO; n * f * hw];
    for img in 0..n {
        let src = &rows[img * hw * f..(img + 1) * hw * f];
        let dst = &mut out[img * f * hw..(img + 1) * f * hw];
        dst.copy_from_slice(&transpose(src, hw, f));
    }
    out
}

/// Inverse of [`rows_to_nchw`].
pub fn nchw_to_rows<E: Element>(nchw: &[E], n: usize, f: usize, hw: usize) -> Vec<E> {
    debug_assert_eq!(nchw.len(), n * f * hw);
    let mut out = vec![E::ZERO; n * hw * f];
    for img in 0..n {
        let src = &nchw[img * f * hw..(img + 1) * f * hw];
        let dst = &mut out[img * hw * f..(img + 1) * hw * f];
        dst.copy_from_slice(&transpose(src, f, hw));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &[f64], r: usize, k: usize, b: &[f64], c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                let mut acc = 0.0;
                for p in 0..k {
                    acc += a[i * k + p] * b[p * c + j];
                }
                out[i * c + j] = acc;
            }
        }
        out
    }

    fn arange(n: usize) -> Vec<f64> {
        (0..n).map(|i| (i as f64) * 0.37 - 3.0).collect()
    }

    #[test]
    fn matmul_matches_naive() {
        let (r, k, c) = (5, 7, 4);
        let a = arange(r * k);
        let b = arange(k * c);
        assert_eq!(matmul(&a, r, k, &b, c), naive_matmul(&a, r, k, &b, c));
    }

    #[test]
    fn matmul_tiled_and_edge_paths_match_naive_exactly() {
        // Dimensions straddling the register-tile extents hit the tiled bulk,
        // the column remainder, and the row remainder in one product each.
        for (r, k, c) in [
            (MM_IB, 3, MM_JB),              // pure tile
            (MM_IB + 3, 5, MM_JB + 7),      // both remainders
            (2 * MM_IB + 1, 9, 2 * MM_JB),  // row remainder only
            (MM_IB, 4, MM_JB + 1),          // column remainder only
            (1, 1, 1),
            (3, 8, 2),                      // below one tile entirely
        ] {
            let a = arange(r * k);
            let b = arange(k * c);
            assert_eq!(
                matmul(&a, r, k, &b, c),
                naive_matmul(&a, r, k, &b, c),
                "shape ({r},{k},{c})"
            );
        }
    }

    #[test]
    fn matmul_tn_matches_transposed_naive() {
        let (r, m, n) = (6, 3, 5);
        let a = arange(r * m);
        let b = arange(r * n);
        let at = transpose(&a, r, m);
        assert_eq!(matmul_tn(&a, r, m, &b, n), naive_matmul(&at, m, r, &b, n));
    }

    #[test]
    fn transpose_round_trips() {
        let a = arange(37 * 53);
        assert_eq!(transpose(&transpose(&a, 37, 53), 53, 37), a);
    }

    #[test]
    fn im2col_identity_kernel_recovers_input() {
        // 1×1 kernel, stride 1: each patch row is exactly one input pixel.
        let x = arange(2 * 3 * 4 * 4);
        let cols = im2col(&x, 2, 3, 4, 4, 1, 1, 1);
        // cols rows are (n,y,x) with a 3-wide (c) patch; regrouping must give x back.
        let back = rows_to_nchw(&cols, 2, 3, 16);
        assert_eq!(back, x);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish x, y.
        let (n, c, h, w, kh, kw, s) = (2, 2, 5, 6, 3, 2, 1);
        let x = arange(n * c * h * w);
        let cols = im2col(&x, n, c, h, w, kh, kw, s);
        let y: Vec<f64> = (0..cols.len()).map(|i| ((i * 31 + 7) % 13) as f64 - 6.0).collect();
        let back = col2im_acc(&y, n, c, h, w, kh, kw, s);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
    }

    #[test]
    fn conv_extent_formula() {
        assert_eq!(conv_out_extent(36, 3, 1), 34);
        assert_eq!(conv_out_extent(17, 3, 1), 15);
        assert_eq!(conv_out_extent(150, 5, 2), 73);
        assert_eq!(conv_out_extent(36, 5, 2), 16);
    }

    #[test]
    fn nchw_row_permutes_invert() {
        let x = arange(3 * 4 * 10);
        assert_eq!(rows_to_nchw(&nchw_to_rows(&x, 3, 4, 10), 3, 4, 10), x);
    }
}
