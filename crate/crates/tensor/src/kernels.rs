//! Plain loops behind the graph ops. All reductions run in a fixed order so
//! results are bit-reproducible.

use crate::real::Real;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    let s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    s + tail
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m×n] += op(a) · op(b)` where `op` optionally transposes.
///
/// Stored layouts: `a` is `m×k` (or `k×m` when `ta`), `b` is `k×n` (or `n×k`
/// when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // Narrow outputs go through a register-blocked kernel; the operands are
    // brought into plain layout first when that is cheap.
    if narrow(n) && (!tb || k <= 256) {
        let at;
        let a = if ta {
            at = transpose(a, k, m);
            &at[..]
        } else {
            a
        };
        let bt;
        let b = if tb {
            bt = transpose(b, n, k);
            &bt[..]
        } else {
            b
        };
        match n {
            4 => gemm_nn_fixed::<T, 4>(m, k, a, b, c),
            8 => gemm_nn_fixed::<T, 8>(m, k, a, b, c),
            16 => gemm_nn_fixed::<T, 16>(m, k, a, b, c),
            32 => gemm_nn_fixed::<T, 32>(m, k, a, b, c),
            _ => unreachable!(),
        }
        return;
    }
    match (ta, tb) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                let arow = &a[i * k..(i + 1) * k];
                for (p, &aip) in arow.iter().enumerate() {
                    axpy(aip, &b[p * n..(p + 1) * n], crow);
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    c[i * n + j] += dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    axpy(a[p * m + i], brow, &mut c[i * n..(i + 1) * n]);
                }
            }
        }
        (true, true) => {
            let at = transpose(a, k, m);
            gemm(false, true, m, n, k, &at, b, c);
        }
    }
}

fn narrow(n: usize) -> bool {
    matches!(n, 4 | 8 | 16 | 32)
}

/// Plain-layout product with the output row held in registers.
fn gemm_nn_fixed<T: Real, const N: usize>(m: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(N)).take(m) {
        let mut acc = [T::zero(); N];
        acc.copy_from_slice(crow);
        for (&aip, brow) in arow.iter().zip(b.chunks_exact(N)) {
            for j in 0..N {
                acc[j] += aip * brow[j];
            }
        }
        crow.copy_from_slice(&acc);
    }
}

pub fn transpose<T: Real>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride + kx − pad`
/// falls inside `[0, w)`.
fn valid_span(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let lo = if g.pad > kx {
        (g.pad - kx).div_ceil(g.stride)
    } else {
        0
    };
    let hi = if g.w + g.pad > kx {
        (g.w + g.pad - kx).div_ceil(g.stride)
    } else {
        0
    };
    (lo.min(g.wo), hi.min(g.wo).max(lo.min(g.wo)))
}

/// Unfolds one image `[cin, h, w]` into `[cin·k·k, ho·wo]`.
pub fn im2col<T: Real>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_span(g, kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize || lo == hi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    let first = lo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        drow[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, s) in drow[lo..hi]
                            .iter_mut()
                            .zip(src[first..].iter().step_by(g.stride))
                        {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `[cin·k·k, ho·wo]` back into `[cin, h, w]`.
pub fn col2im<T: Real>(col: &[T], g: &ConvGeom, x: &mut [T]) {
    let cols = g.col_cols();
    for c in 0..g.cin {
        let plane = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                let (lo, hi) = valid_span(g, kx);
                if lo == hi {
                    continue;
                }
                let first = lo * g.stride + kx - g.pad;
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if g.stride == 1 {
                        for (d, s) in dst[first..first + hi - lo].iter_mut().zip(srow) {
                            *d += *s;
                        }
                    } else {
                        for (d, s) in dst[first..].iter_mut().step_by(g.stride).zip(srow) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Source taps for 2× bilinear upsampling with half-pixel centers.
pub fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}
