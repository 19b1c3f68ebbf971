//! Direct loops for the heavy operations. Row-major throughout.

use crate::scalar::Element;

/// `C[m×n] = A[m×k] · B[k×n]`, accumulated in i-k-j order.
pub(crate) fn gemm<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
    c
}

pub(crate) fn transpose<T: Element>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut t = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    /// Returns `None` when an output extent would be non-integral or empty.
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Option<Self> {
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (f, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c || stride == 0 {
            return None;
        }
        let extent = |size: usize, k: usize| -> Option<usize> {
            let span = (size + 2 * pad).checked_sub(k)?;
            (span % stride == 0).then_some(span / stride + 1)
        };
        let oh = extent(h, kh)?;
        let ow = extent(w, kw)?;
        Some(Self {
            n,
            c,
            h,
            w,
            f,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        })
    }

    /// Input coordinate for an output position and kernel tap, if inside the image.
    #[inline]
    fn source(&self, o: usize, k: usize, size: usize) -> Option<usize> {
        let pos = o * self.stride + k;
        (pos >= self.pad && pos - self.pad < size).then(|| pos - self.pad)
    }
}

/// Cross-correlation, no kernel flip.
pub(crate) fn conv2d<T: Element>(input: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.f * g.oh * g.ow];
    for n in 0..g.n {
        for f in 0..g.f {
            let obase = (n * g.f + f) * g.oh * g.ow;
            for c in 0..g.c {
                let ibase = (n * g.c + c) * g.h * g.w;
                let kbase = (f * g.c + c) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let kv = kernel[kbase + ky * g.kw + kx];
                        for oy in 0..g.oh {
                            let Some(iy) = g.source(oy, ky, g.h) else { continue };
                            for ox in 0..g.ow {
                                let Some(ix) = g.source(ox, kx, g.w) else { continue };
                                let o = &mut out[obase + oy * g.ow + ox];
                                *o = *o + input[ibase + iy * g.w + ix] * kv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] w.r.t. input and kernel (transposed convolution).
pub(crate) fn conv2d_backward<T: Element>(
    input: &[T],
    kernel: &[T],
    upstream: &[T],
    g: &ConvGeometry,
) -> (Vec<T>, Vec<T>) {
    let mut d_input = vec![T::zero(); input.len()];
    let mut d_kernel = vec![T::zero(); kernel.len()];
    for n in 0..g.n {
        for f in 0..g.f {
            let obase = (n * g.f + f) * g.oh * g.ow;
            for c in 0..g.c {
                let ibase = (n * g.c + c) * g.h * g.w;
                let kbase = (f * g.c + c) * g.kh * g.kw;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let kv = kernel[kbase + ky * g.kw + kx];
                        let mut acc = T::zero();
                        for oy in 0..g.oh {
                            let Some(iy) = g.source(oy, ky, g.h) else { continue };
                            for ox in 0..g.ow {
                                let Some(ix) = g.source(ox, kx, g.w) else { continue };
                                let up = upstream[obase + oy * g.ow + ox];
                                let idx = ibase + iy * g.w + ix;
                                acc = acc + up * input[idx];
                                d_input[idx] = d_input[idx] + up * kv;
                            }
                        }
                        let dk = &mut d_kernel[kbase + ky * g.kw + kx];
                        *dk = *dk + acc;
                    }
                }
            }
        }
    }
    (d_input, d_kernel)
}
