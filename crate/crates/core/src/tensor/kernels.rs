//! Raw numeric kernels behind the tape operations.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    beta: f64,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the slices hold exactly the m*k, k*n and m*n elements the
    // strides above address.
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

/// Geometry of a stride-1 "same" 2-D convolution with an odd kernel.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv2dGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Conv2dGeom {
    pub fn rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.h * self.w
    }
}

/// Unfolds `x` (`c_in x h x w`) into a `(c_in*kh*kw) x (h*w)` patch matrix.
pub(crate) fn im2col_2d(x: &[f64], g: Conv2dGeom, cols: &mut [f64]) {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let hw = h * w;
    for c in 0..g.c_in {
        let plane = &x[c * hw..(c + 1) * hw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dj = kj as isize - pw as isize;
                let lo = (-dj).max(0) as usize;
                let hi = (w as isize - dj).min(w as isize).max(0) as usize;
                for i in 0..h {
                    let si = i as isize + ki as isize - ph as isize;
                    let out_row = &mut dst[i * w..(i + 1) * w];
                    if si < 0 || si >= h as isize || lo >= hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[si as usize * w..(si as usize + 1) * w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    let s0 = (lo as isize + dj) as usize;
                    out_row[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col_2d`]: accumulates patch gradients back onto `dx`.
pub(crate) fn col2im_2d(cols: &[f64], g: Conv2dGeom, dx: &mut [f64]) {
    let (h, w) = (g.h, g.w);
    let (ph, pw) = (g.kh / 2, g.kw / 2);
    let hw = h * w;
    for c in 0..g.c_in {
        let plane = &mut dx[c * hw..(c + 1) * hw];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * hw..(row + 1) * hw];
                let dj = kj as isize - pw as isize;
                let lo = (-dj).max(0) as usize;
                let hi = (w as isize - dj).min(w as isize).max(0) as usize;
                if lo >= hi {
                    continue;
                }
                for i in 0..h {
                    let si = i as isize + ki as isize - ph as isize;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let d0 = si as usize * w;
                    let s0 = (lo as isize + dj) as usize;
                    let dst = &mut plane[d0 + s0..d0 + s0 + (hi - lo)];
                    for (d, s) in dst.iter_mut().zip(&src[i * w + lo..i * w + hi]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Geometry of a valid (unpadded) dilated 1-D convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Conv1dGeom {
    pub c_in: usize,
    pub t_in: usize,
    pub k: usize,
    pub dilation: usize,
}

impl Conv1dGeom {
    pub fn t_out(&self) -> usize {
        self.t_in - (self.k - 1) * self.dilation
    }

    pub fn rows(&self) -> usize {
        self.c_in * self.k
    }
}

pub(crate) fn im2col_1d(x: &[f64], g: Conv1dGeom, cols: &mut [f64]) {
    let t_out = g.t_out();
    for c in 0..g.c_in {
        let src = &x[c * g.t_in..(c + 1) * g.t_in];
        for j in 0..g.k {
            let row = c * g.k + j;
            let off = j * g.dilation;
            cols[row * t_out..(row + 1) * t_out].copy_from_slice(&src[off..off + t_out]);
        }
    }
}

pub(crate) fn col2im_1d(cols: &[f64], g: Conv1dGeom, dx: &mut [f64]) {
    let t_out = g.t_out();
    for c in 0..g.c_in {
        let dst = &mut dx[c * g.t_in..(c + 1) * g.t_in];
        for j in 0..g.k {
            let row = c * g.k + j;
            let off = j * g.dilation;
            for (d, s) in dst[off..off + t_out]
                .iter_mut()
                .zip(&cols[row * t_out..(row + 1) * t_out])
            {
                *d += s;
            }
        }
    }
}
