//! Raw numeric kernels shared by the differentiable ops.
//!
//! All kernels are single-threaded with a fixed reduction order, so repeated
//! calls on identical inputs give bit-identical results.

/// Matrix operand layout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Layout {
    /// Stored as `rows x cols`, row-major.
    Normal,
    /// Stored as `cols x rows`, row-major; used as its transpose.
    Transposed,
}

/// `c = a * b + beta * c` where `a` is `m x k` and `b` is `k x n` after
/// applying the given layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    la: Layout,
    b: &[f32],
    lb: Layout,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = match la {
        Layout::Normal => (k as isize, 1),
        Layout::Transposed => (1, m as isize),
    };
    let (rsb, csb) = match lb {
        Layout::Normal => (n as isize, 1),
        Layout::Transposed => (1, k as isize),
    };
    // SAFETY: bounds are asserted above and the strides address exactly the
    // m*k, k*n and m*n element blocks of the three slices.
    unsafe {
        matrixmultiply::sgemm(
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

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        Some(ConvGeom {
            c,
            h,
            w,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.ho * self.wo
    }

    /// True when the input itself is already the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Unfolds `input` (`c x h x w`) into `(c*k*k) x (ho*wo)` columns.
pub(crate) fn im2col(input: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let n = g.col_cols();
    for c in 0..g.c {
        let plane = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let out = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into `grad_input`.
pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, grad_input: &mut [f32]) {
    let n = g.col_cols();
    for c in 0..g.c {
        let plane = &mut grad_input[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear interpolation weights for one sample point.
///
/// Corners outside the `h x w` grid get weight zero. The point uses index
/// coordinates: integer values sit exactly on pixel centers.
#[derive(Clone, Copy, Debug, Default)]
pub(crate) struct BilinearTap {
    /// Flat `y*w + x` index of each corner (top-left, top-right,
    /// bottom-left, bottom-right); only meaningful where the weight is used.
    pub idx: [usize; 4],
    pub valid: [bool; 4],
    pub ly: f32,
    pub lx: f32,
}

impl BilinearTap {
    pub fn new(y: f32, x: f32, h: usize, w: usize) -> Self {
        let y0f = y.floor();
        let x0f = x.floor();
        let ly = y - y0f;
        let lx = x - x0f;
        let y0 = y0f as i64;
        let x0 = x0f as i64;
        let mut tap = BilinearTap {
            ly,
            lx,
            ..Default::default()
        };
        let corners = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)];
        for (n, &(cy, cx)) in corners.iter().enumerate() {
            if cy >= 0 && cy < h as i64 && cx >= 0 && cx < w as i64 {
                tap.valid[n] = true;
                tap.idx[n] = cy as usize * w + cx as usize;
            }
        }
        tap
    }

    pub fn weights(&self) -> [f32; 4] {
        let (ly, lx) = (self.ly, self.lx);
        [
            (1.0 - ly) * (1.0 - lx),
            (1.0 - ly) * lx,
            ly * (1.0 - lx),
            ly * lx,
        ]
    }

    #[inline]
    fn corners(&self, plane: &[f32]) -> [f32; 4] {
        let mut v = [0.0; 4];
        for n in 0..4 {
            if self.valid[n] {
                v[n] = plane[self.idx[n]];
            }
        }
        v
    }

    #[inline]
    pub fn sample(&self, plane: &[f32]) -> f32 {
        let v = self.corners(plane);
        let w = self.weights();
        w[0] * v[0] + w[1] * v[1] + w[2] * v[2] + w[3] * v[3]
    }

    /// Partial derivatives of the sampled value w.r.t. the `(y, x)` point.
    #[inline]
    pub fn coord_grad(&self, plane: &[f32]) -> (f32, f32) {
        let v = self.corners(plane);
        let (ly, lx) = (self.ly, self.lx);
        let dy = (1.0 - lx) * (v[2] - v[0]) + lx * (v[3] - v[1]);
        let dx = (1.0 - ly) * (v[1] - v[0]) + ly * (v[3] - v[2]);
        (dy, dx)
    }

    #[inline]
    pub fn scatter(&self, plane: &mut [f32], grad: f32) {
        let w = self.weights();
        for n in 0..4 {
            if self.valid[n] {
                plane[self.idx[n]] += w[n] * grad;
            }
        }
    }
}

pub(crate) fn avg_pool2(input: &[f32], c: usize, h: usize, w: usize, out: &mut [f32]) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for y in 0..ho {
            for x in 0..wo {
                let i = 2 * y * w + 2 * x;
                dst[y * wo + x] = 0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
}

pub(crate) fn avg_pool2_backward(grad: &[f32], c: usize, h: usize, w: usize, gin: &mut [f32]) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        let src = &grad[ch * ho * wo..(ch + 1) * ho * wo];
        let dst = &mut gin[ch * h * w..(ch + 1) * h * w];
        for y in 0..ho {
            for x in 0..wo {
                let g = 0.25 * src[y * wo + x];
                let i = 2 * y * w + 2 * x;
                dst[i] += g;
                dst[i + 1] += g;
                dst[i + w] += g;
                dst[i + w + 1] += g;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_for_all_layouts() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|v| v as f32 * 0.5 - 2.0).collect();
        let b: Vec<f32> = (0..k * n).map(|v| (v as f32).sin()).collect();
        let mut naive = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    naive[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut bt = vec![0.0; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        for (aa, la) in [(&a, Layout::Normal), (&at, Layout::Transposed)] {
            for (bb, lb) in [(&b, Layout::Normal), (&bt, Layout::Transposed)] {
                let mut c = vec![0.0; m * n];
                gemm(m, k, n, aa, la, bb, lb, 0.0, &mut c);
                for (x, y) in c.iter().zip(&naive) {
                    assert!((x - y).abs() < 1e-4);
                }
            }
        }
    }

    #[test]
    fn bilinear_tap_collapses_on_integer_points() {
        let plane: Vec<f32> = (0..12).map(|v| v as f32).collect();
        let tap = BilinearTap::new(1.0, 2.0, 3, 4);
        assert_eq!(tap.sample(&plane), plane[6]);
        let out = BilinearTap::new(-1.0, -1.0, 3, 4);
        assert_eq!(out.sample(&plane), 0.0);
    }
}
