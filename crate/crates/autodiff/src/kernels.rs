//! Raw per-sample kernels shared by the convolution ops.

use crate::scalar::Real;

pub(crate) const KERNEL: usize = 3;

/// Output side length of a valid 3×3 convolution.
pub fn conv_out_len(input: usize, stride: usize) -> Option<usize> {
    if input < KERNEL || stride == 0 {
        None
    } else {
        Some((input - KERNEL) / stride + 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Geometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub stride: usize,
}

impl Geometry {
    pub fn patch_len(&self) -> usize {
        self.channels * KERNEL * KERNEL
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// Unfolds one `[C, H, W]` image into rows of a `[C*9, ld]` column matrix,
/// writing `out_h*out_w` entries per row starting at column `off`.
pub(crate) fn im2col<T: Real>(x: &[T], g: Geometry, cols: &mut [T], ld: usize, off: usize) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let dst = &mut cols[row * ld + off..row * ld + off + p];
                for oy in 0..g.out_h {
                    let src_row = (oy * g.stride + ky) * g.width + kx;
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        dst_row.copy_from_slice(&plane[src_row..src_row + g.out_w]);
                    } else {
                        let src = plane[src_row..].iter().step_by(g.stride);
                        for (d, &v) in dst_row.iter_mut().zip(src) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back into an image, accumulating.
pub(crate) fn col2im_add<T: Real>(cols: &[T], g: Geometry, x: &mut [T], ld: usize, off: usize) {
    let p = g.out_len();
    for c in 0..g.channels {
        let plane = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..KERNEL {
            for kx in 0..KERNEL {
                let row = (c * KERNEL + ky) * KERNEL + kx;
                let src = &cols[row * ld + off..row * ld + off + p];
                for oy in 0..g.out_h {
                    let dst_row = (oy * g.stride + ky) * g.width + kx;
                    let s = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    if g.stride == 1 {
                        let d = &mut plane[dst_row..dst_row + g.out_w];
                        for (d, &v) in d.iter_mut().zip(s) {
                            *d = *d + v;
                        }
                    } else {
                        let d = plane[dst_row..].iter_mut().step_by(g.stride);
                        for (d, &v) in d.zip(s) {
                            *d = *d + v;
                        }
                    }
                }
            }
        }
    }
}

/// `[N, F, P]` to `[F, N*P]`.
pub(crate) fn to_channel_major<T: Real>(x: &[T], n: usize, f: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for c in 0..f {
            out[c * n * p + s * p..c * n * p + (s + 1) * p]
                .copy_from_slice(&x[(s * f + c) * p..(s * f + c + 1) * p]);
        }
    }
    out
}

/// `[F, N*P]` to `[N, F, P]`.
pub(crate) fn to_sample_major<T: Real>(x: &[T], n: usize, f: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for s in 0..n {
        for c in 0..f {
            out[(s * f + c) * p..(s * f + c + 1) * p]
                .copy_from_slice(&x[c * n * p + s * p..c * n * p + (s + 1) * p]);
        }
    }
    out
}
