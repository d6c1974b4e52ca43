//! Raw forward/backward kernels on flat buffers. Shape validation happens in
//! the graph layer; everything here assumes consistent sizes.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    pub fn positions(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// Input coordinate hit by output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Unfolds `x` into a `[C_in·kh·kw, H'·W']` patch matrix.
pub(crate) fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let mut cols = vec![T::zero(); g.patch() * p];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        if let Some((y, xx)) = g.src(oy, ox, ky, kx) {
                            dst[oy * g.w_out + ox] = plane[y * g.w + xx];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto `x`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        if let Some((y, xx)) = g.src(oy, ox, ky, kx) {
                            plane[y * g.w + xx] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    w: &[T],
    b: Option<&[T]>,
    c_out: usize,
    g: &ConvGeom,
) -> Vec<T> {
    let p = g.positions();
    let mut out = vec![T::zero(); c_out * p];
    if let Some(b) = b {
        for (co, row) in out.chunks_mut(p).enumerate() {
            row.fill(b[co]);
        }
    }
    let accumulate = b.is_some();
    if g.is_pointwise() {
        T::gemm(c_out, g.c_in, p, w, false, x, false, &mut out, accumulate);
    } else {
        let cols = im2col(x, g);
        T::gemm(c_out, g.patch(), p, w, false, &cols, false, &mut out, accumulate);
    }
    out
}

/// Returns `(dx, dw, db)` for a convolution given the output gradient.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    c_out: usize,
    g: &ConvGeom,
    need_x: bool,
    need_w: bool,
    need_b: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let p = g.positions();
    let k = g.patch();
    let db = need_b.then(|| gout.chunks(p).map(|r| r.iter().copied().sum()).collect());
    if g.is_pointwise() {
        let dw = need_w.then(|| {
            let mut dw = vec![T::zero(); c_out * k];
            T::gemm(c_out, p, k, gout, false, x, true, &mut dw, false);
            dw
        });
        let dx = need_x.then(|| {
            let mut dx = vec![T::zero(); k * p];
            T::gemm(k, c_out, p, w, true, gout, false, &mut dx, false);
            dx
        });
        return (dx, dw, db);
    }
    let dw = need_w.then(|| {
        let cols = im2col(x, g);
        let mut dw = vec![T::zero(); c_out * k];
        T::gemm(c_out, p, k, gout, false, &cols, true, &mut dw, false);
        dw
    });
    let dx = need_x.then(|| {
        let mut dcols = vec![T::zero(); k * p];
        T::gemm(k, c_out, p, w, true, gout, false, &mut dcols, false);
        let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
        col2im(&dcols, g, &mut dx);
        dx
    });
    (dx, dw, db)
}

/// One `kh × kw` filter per channel; `w` is `[C, 1, kh, kw]`.
pub(crate) fn depthwise_forward<T: Scalar>(x: &[T], w: &[T], g: &ConvGeom) -> Vec<T> {
    let p = g.positions();
    let taps = g.kh * g.kw;
    let mut out = vec![T::zero(); g.c_in * p];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let filt = &w[c * taps..(c + 1) * taps];
        let dst = &mut out[c * p..(c + 1) * p];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut s = T::zero();
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((y, xx)) = g.src(oy, ox, ky, kx) {
                            s += filt[ky * g.kw + kx] * plane[y * g.w + xx];
                        }
                    }
                }
                dst[oy * g.w_out + ox] = s;
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>) {
    let p = g.positions();
    let taps = g.kh * g.kw;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    for c in 0..g.c_in {
        let hw = g.h * g.w;
        let plane = &x[c * hw..(c + 1) * hw];
        let dplane = &mut dx[c * hw..(c + 1) * hw];
        let filt = &w[c * taps..(c + 1) * taps];
        let dfilt = &mut dw[c * taps..(c + 1) * taps];
        let go = &gout[c * p..(c + 1) * p];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let gv = go[oy * g.w_out + ox];
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        if let Some((y, xx)) = g.src(oy, ox, ky, kx) {
                            dfilt[ky * g.kw + kx] += gv * plane[y * g.w + xx];
                            dplane[y * g.w + xx] += gv * filt[ky * g.kw + kx];
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// `(outer, axis, inner)` factorisation of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut m = T::neg_infinity();
            for j in 0..n {
                m = m.max(x[at(j)]);
            }
            let mut z = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - m).exp();
                y[at(j)] = e;
                z += e;
            }
            for j in 0..n {
                y[at(j)] /= z;
            }
        }
    }
    y
}

pub(crate) fn softmax_backward<T: Scalar>(
    y: &[T],
    gout: &[T],
    shape: &[usize],
    axis: usize,
) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut dx = vec![T::zero(); y.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| (o * n + j) * inner + i;
            let mut dot = T::zero();
            for j in 0..n {
                dot += gout[at(j)] * y[at(j)];
            }
            for j in 0..n {
                dx[at(j)] = y[at(j)] * (gout[at(j)] - dot);
            }
        }
    }
    dx
}

pub(crate) fn upsample2x<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); c * h2 * w2];
    for ch in 0..c {
        for y in 0..h2 {
            let src = &x[(ch * h + y / 2) * w..(ch * h + y / 2 + 1) * w];
            let dst = &mut out[(ch * h2 + y) * w2..(ch * h2 + y + 1) * w2];
            for (xx, d) in dst.iter_mut().enumerate() {
                *d = src[xx / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2x_backward<T: Scalar>(g: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h2 {
            for xx in 0..w2 {
                dx[(ch * h + y / 2) * w + xx / 2] += g[(ch * h2 + y) * w2 + xx];
            }
        }
    }
    dx
}

pub(crate) fn transpose<T: Scalar>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}
