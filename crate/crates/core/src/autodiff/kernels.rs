use super::Real;

/// `C (m×n) = op(A) · op(B)`, optionally accumulating into `C`.
///
/// All buffers are contiguous row-major. With `trans_a` the buffer holds
/// `A` as k×m; with `trans_b` it holds `B` as n×k.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
    accumulate: bool,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    // SAFETY: lengths asserted above match the m×k, k×n and m×n layouts
    // described by the strides; `c` is a unique borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
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

/// Geometry of a 2-D sliding-window operation over an `[N, C, H, W]` input.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Window {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    /// A 1×1 unpadded window, whose unfolding is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad == 0 && self.stride == 1
    }

    /// Input coordinate hit by output `o` and kernel offset `k`, if in bounds.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }
}

/// Output columns `[lo, hi)` whose source `o + k - pad` lies in `0..limit`
/// (stride 1).
#[inline]
fn valid_span(out: usize, k: usize, pad: usize, limit: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k).min(out);
    let hi = (limit + pad).saturating_sub(k).min(out).max(lo);
    (lo, hi)
}

/// Unfolds one `[C, H, W]` sample into `[C·kh·kw, out_h·out_w]` columns.
/// Stride 1 only, which is all convolution uses.
pub(crate) fn im2col<T: Real>(input: &[T], g: &Window, cols: &mut [T]) {
    debug_assert_eq!(g.stride, 1);
    let op = g.out_pixels();
    debug_assert_eq!(cols.len(), g.c * g.kh * g.kw * op);
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_span(g.out_h, ki, g.pad, g.h);
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_span(g.out_w, kj, g.pad, g.w);
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * op..(row + 1) * op];
                dst[..y_lo * g.out_w].fill(T::zero());
                dst[y_hi * g.out_w..].fill(T::zero());
                for oy in y_lo..y_hi {
                    let iy = oy + ki - g.pad;
                    let out_row = &mut dst[oy * g.out_w..][..g.out_w];
                    out_row[..x_lo].fill(T::zero());
                    out_row[x_hi..].fill(T::zero());
                    let src = &plane[iy * g.w + x_lo + kj - g.pad..][..x_hi - x_lo];
                    out_row[x_lo..x_hi].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto one sample.
pub(crate) fn col2im_add<T: Real>(cols: &[T], g: &Window, input_grad: &mut [T]) {
    debug_assert_eq!(g.stride, 1);
    let op = g.out_pixels();
    for c in 0..g.c {
        let plane = &mut input_grad[c * g.h * g.w..][..g.h * g.w];
        for ki in 0..g.kh {
            let (y_lo, y_hi) = valid_span(g.out_h, ki, g.pad, g.h);
            for kj in 0..g.kw {
                let (x_lo, x_hi) = valid_span(g.out_w, kj, g.pad, g.w);
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * op..(row + 1) * op];
                for oy in y_lo..y_hi {
                    let iy = oy + ki - g.pad;
                    let col_row = &src[oy * g.out_w + x_lo..][..x_hi - x_lo];
                    let dst = &mut plane[iy * g.w + x_lo + kj - g.pad..][..x_hi - x_lo];
                    for (d, &v) in dst.iter_mut().zip(col_row) {
                        *d = *d + v;
                    }
                }
            }
        }
    }
}

/// Max pooling; returns the flat input index of each window's maximum.
///
/// Out-of-bounds positions (padding) never win. Ties keep the first index
/// in row-major window order.
pub(crate) fn max_pool<T: Real>(input: &[T], g: &Window, out: &mut [T], argmax: &mut [u32]) {
    for nc in 0..g.n * g.c {
        let base = nc * g.h * g.w;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best = T::neg_infinity();
                let mut best_idx = usize::MAX;
                for ki in 0..g.kh {
                    let Some(iy) = Window::source(oy, ki, g.stride, g.pad, g.h) else {
                        continue;
                    };
                    for kj in 0..g.kw {
                        let Some(ix) = Window::source(ox, kj, g.stride, g.pad, g.w) else {
                            continue;
                        };
                        let idx = base + iy * g.w + ix;
                        let v = input[idx];
                        if best_idx == usize::MAX || v > best {
                            best = v;
                            best_idx = idx;
                        }
                    }
                }
                let o = nc * g.out_pixels() + oy * g.out_w + ox;
                out[o] = best;
                argmax[o] = best_idx as u32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_im2col(input: &[f64], g: &Window) -> Vec<f64> {
        let op = g.out_pixels();
        let mut cols = vec![0.0; g.c * g.kh * g.kw * op];
        for c in 0..g.c {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    for oy in 0..g.out_h {
                        for ox in 0..g.out_w {
                            let y = Window::source(oy, ki, 1, g.pad, g.h);
                            let x = Window::source(ox, kj, 1, g.pad, g.w);
                            if let (Some(y), Some(x)) = (y, x) {
                                cols[row * op + oy * g.out_w + ox] = input[(c * g.h + y) * g.w + x];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    #[test]
    fn row_copies_match_elementwise_unfolding() {
        for (c, h, w, k, pad) in [
            (2, 5, 7, 3, 1),
            (1, 6, 6, 5, 2),
            (3, 4, 5, 3, 0),
            (1, 3, 3, 5, 2),
            (2, 1, 4, 1, 0),
        ] {
            let g = Window {
                n: 1,
                c,
                h,
                w,
                kh: k,
                kw: k,
                stride: 1,
                pad,
                out_h: h + 2 * pad - k + 1,
                out_w: w + 2 * pad - k + 1,
            };
            let input: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.7).sin()).collect();
            let mut cols = vec![f64::NAN; c * k * k * g.out_pixels()];
            im2col(&input, &g, &mut cols);
            let want = reference_im2col(&input, &g);
            assert_eq!(cols, want, "{c}x{h}x{w} k{k} p{pad}");

            // col2im is the transpose: <im2col(x), y> == <x, col2im(y)>.
            let y: Vec<f64> = (0..cols.len()).map(|i| (i as f64 * 0.3).cos()).collect();
            let mut back = vec![0.0; input.len()];
            col2im_add(&y, &g, &mut back);
            let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
            let rhs: f64 = input.iter().zip(&back).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }
}
