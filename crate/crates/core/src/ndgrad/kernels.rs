//! Numeric kernels shared by graph operations: matrix multiply, im2col
//! convolution lowering, and bilinear affine warping.

use super::Real;

/// `c = a * b + beta * c` where `a` is logically `m x k` and `b` is `k x n`.
/// `a_t` / `b_t` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    beta: T,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; the three slices are distinct borrows.
    unsafe {
        T::gemm_raw(
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

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.ho * self.wo
    }

    #[inline]
    fn source_x(&self, ox: usize, kj: usize) -> Option<usize> {
        let ix = (ox * self.stride + kj) as isize - self.pad as isize;
        (ix >= 0 && (ix as usize) < self.w).then_some(ix as usize)
    }

    #[inline]
    fn source_y(&self, oy: usize, ki: usize) -> Option<usize> {
        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
        (iy >= 0 && (iy as usize) < self.h).then_some(iy as usize)
    }

    /// Output columns `ox` whose source column is inside the image, for stride 1.
    fn valid_x_range(&self, kj: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kj);
        let hi = (self.w + self.pad).saturating_sub(kj).min(self.wo);
        (lo.min(hi), hi)
    }
}

/// Lowers one `[C, H, W]` sample into a `[C*kh*kw, Ho*Wo]` matrix.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let plane = g.h * g.w;
    let ncols = g.cols();
    for ci in 0..g.c {
        let src_plane = &x[ci * plane..(ci + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let Some(iy) = g.source_y(oy, ki) else {
                        drow.fill(T::zero());
                        continue;
                    };
                    let srow = &src_plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_x_range(kj);
                        drow[..lo].fill(T::zero());
                        drow[hi..].fill(T::zero());
                        let off = lo + kj - g.pad;
                        drow[lo..hi].copy_from_slice(&srow[off..off + (hi - lo)]);
                    } else {
                        for (ox, d) in drow.iter_mut().enumerate() {
                            *d = g.source_x(ox, kj).map_or(T::zero(), |ix| srow[ix]);
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds the column matrix into `dx`.
pub(crate) fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let plane = g.h * g.w;
    let ncols = g.cols();
    for ci in 0..g.c {
        let dst_plane = &mut dx[ci * plane..(ci + 1) * plane];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.ho {
                    let Some(iy) = g.source_y(oy, ki) else {
                        continue;
                    };
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    let drow = &mut dst_plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let (lo, hi) = g.valid_x_range(kj);
                        let off = lo + kj - g.pad;
                        for (d, &s) in drow[off..off + (hi - lo)].iter_mut().zip(&srow[lo..hi]) {
                            *d += s;
                        }
                    } else {
                        for (ox, &s) in srow.iter().enumerate() {
                            if let Some(ix) = g.source_x(ox, kj) {
                                drow[ix] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Source planes `[C, H, W]` read by an affine warp.
#[derive(Clone, Copy)]
pub(crate) struct Planes<'a, T> {
    pub data: &'a [T],
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

/// Rectangle of output pixels `[y0, y1) x [x0, x1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Region {
    pub y0: usize,
    pub y1: usize,
    pub x0: usize,
    pub x1: usize,
}

impl Region {
    pub fn full(h: usize, w: usize) -> Self {
        Self {
            y0: 0,
            y1: h,
            x0: 0,
            x1: w,
        }
    }
}

/// Normalized coordinate of the center of pixel `i` on an axis of `n` pixels.
#[inline]
pub(crate) fn pixel_to_norm(i: f64, n: usize) -> f64 {
    (2.0 * i + 1.0) / n as f64 - 1.0
}

/// Output pixels whose affine sample can touch the source support.
///
/// `theta` maps output-normalized to source-normalized coordinates. Falls
/// back to the whole output when the linear part is singular.
pub(crate) fn warp_region<T: Real>(
    theta: &[T],
    src_h: usize,
    src_w: usize,
    out_h: usize,
    out_w: usize,
) -> Region {
    let t: Vec<f64> = theta.iter().map(|v| v.f64()).collect();
    let det = t[0] * t[4] - t[1] * t[3];
    if !det.is_finite() || det.abs() < 1e-12 {
        return Region::full(out_h, out_w);
    }
    // Support of bilinear reads: u in (-1, W) <=> xs in (-1 - 1/W, 1 + 1/W).
    let ex = 1.0 + 1.0 / src_w as f64;
    let ey = 1.0 + 1.0 / src_h as f64;
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (sx, sy) in [(-ex, -ey), (ex, -ey), (-ex, ey), (ex, ey)] {
        let dx = sx - t[2];
        let dy = sy - t[5];
        let xo = (t[4] * dx - t[1] * dy) / det;
        let yo = (-t[3] * dx + t[0] * dy) / det;
        xmin = xmin.min(xo);
        xmax = xmax.max(xo);
        ymin = ymin.min(yo);
        ymax = ymax.max(yo);
    }
    let to_px = |v: f64, n: usize| ((v + 1.0) * n as f64 - 1.0) / 2.0;
    let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64) as usize;
    Region {
        y0: clamp(to_px(ymin, out_h).floor() - 1.0, out_h),
        y1: clamp(to_px(ymax, out_h).ceil() + 2.0, out_h),
        x0: clamp(to_px(xmin, out_w).floor() - 1.0, out_w),
        x1: clamp(to_px(xmax, out_w).ceil() + 2.0, out_w),
    }
}

struct Tap<T> {
    x0: isize,
    y0: isize,
    fx: T,
    fy: T,
}

#[inline]
fn tap<T: Real>(theta: &[T], xo: T, yo: T, h: usize, w: usize) -> Tap<T> {
    let two = T::lit(2.0);
    let xs = theta[0] * xo + theta[1] * yo + theta[2];
    let ys = theta[3] * xo + theta[4] * yo + theta[5];
    let u = ((xs + T::one()) * T::lit(w as f64) - T::one()) / two;
    let v = ((ys + T::one()) * T::lit(h as f64) - T::one()) / two;
    let uf = u.floor();
    let vf = v.floor();
    Tap {
        x0: uf.to_isize().unwrap_or(isize::MIN / 2),
        y0: vf.to_isize().unwrap_or(isize::MIN / 2),
        fx: u - uf,
        fy: v - vf,
    }
}

#[inline]
fn read<T: Real>(plane: &[T], h: usize, w: usize, y: isize, x: isize) -> T {
    if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
        T::zero()
    } else {
        plane[y as usize * w + x as usize]
    }
}

/// Adds `weight * warp(src, theta)` into `out` (`[C, out_h, out_w]`) over `region`.
pub(crate) fn warp_forward<T: Real>(
    src: Planes<'_, T>,
    theta: &[T],
    out: &mut [T],
    out_h: usize,
    out_w: usize,
    weight: T,
    region: Region,
) {
    let (h, w) = (src.h, src.w);
    let plane = h * w;
    let oplane = out_h * out_w;
    for i in region.y0..region.y1 {
        let yo = T::lit(pixel_to_norm(i as f64, out_h));
        for j in region.x0..region.x1 {
            let xo = T::lit(pixel_to_norm(j as f64, out_w));
            let t = tap(theta, xo, yo, h, w);
            if t.x0 < -1 || t.y0 < -1 || t.x0 >= w as isize || t.y0 >= h as isize {
                continue;
            }
            let one = T::one();
            let (w00, w01) = ((one - t.fx) * (one - t.fy), t.fx * (one - t.fy));
            let (w10, w11) = ((one - t.fx) * t.fy, t.fx * t.fy);
            for ch in 0..src.c {
                let p = &src.data[ch * plane..(ch + 1) * plane];
                let v = w00 * read(p, h, w, t.y0, t.x0)
                    + w01 * read(p, h, w, t.y0, t.x0 + 1)
                    + w10 * read(p, h, w, t.y0 + 1, t.x0)
                    + w11 * read(p, h, w, t.y0 + 1, t.x0 + 1);
                out[ch * oplane + i * out_w + j] += weight * v;
            }
        }
    }
}

/// Backward of [`warp_forward`]. Accumulates into `dsrc` and `dtheta` when
/// given and returns `sum(dout * warp(src))`, the gradient of the weight.
#[allow(clippy::too_many_arguments)]
pub(crate) fn warp_backward<T: Real>(
    src: Planes<'_, T>,
    theta: &[T],
    dout: &[T],
    out_h: usize,
    out_w: usize,
    weight: T,
    region: Region,
    mut dsrc: Option<&mut [T]>,
    mut dtheta: Option<&mut [T]>,
) -> T {
    let (h, w) = (src.h, src.w);
    let plane = h * w;
    let oplane = out_h * out_w;
    let half_w = T::lit(w as f64 / 2.0);
    let half_h = T::lit(h as f64 / 2.0);
    let mut dweight = T::zero();
    for i in region.y0..region.y1 {
        let yo = T::lit(pixel_to_norm(i as f64, out_h));
        for j in region.x0..region.x1 {
            let xo = T::lit(pixel_to_norm(j as f64, out_w));
            let t = tap(theta, xo, yo, h, w);
            if t.x0 < -1 || t.y0 < -1 || t.x0 >= w as isize || t.y0 >= h as isize {
                continue;
            }
            let one = T::one();
            let (w00, w01) = ((one - t.fx) * (one - t.fy), t.fx * (one - t.fy));
            let (w10, w11) = ((one - t.fx) * t.fy, t.fx * t.fy);
            let mut du = T::zero();
            let mut dv = T::zero();
            for ch in 0..src.c {
                let g = dout[ch * oplane + i * out_w + j];
                if g == T::zero() {
                    continue;
                }
                let p = &src.data[ch * plane..(ch + 1) * plane];
                let s00 = read(p, h, w, t.y0, t.x0);
                let s01 = read(p, h, w, t.y0, t.x0 + 1);
                let s10 = read(p, h, w, t.y0 + 1, t.x0);
                let s11 = read(p, h, w, t.y0 + 1, t.x0 + 1);
                dweight += g * (w00 * s00 + w01 * s01 + w10 * s10 + w11 * s11);
                let gw = g * weight;
                du += gw * ((one - t.fy) * (s01 - s00) + t.fy * (s11 - s10));
                dv += gw * ((one - t.fx) * (s10 - s00) + t.fx * (s11 - s01));
                if let Some(ds) = dsrc.as_deref_mut() {
                    let dp = &mut ds[ch * plane..(ch + 1) * plane];
                    for (dy, dx, wt) in [(0, 0, w00), (0, 1, w01), (1, 0, w10), (1, 1, w11)] {
                        let (y, x) = (t.y0 + dy, t.x0 + dx);
                        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                            dp[y as usize * w + x as usize] += gw * wt;
                        }
                    }
                }
            }
            if let Some(dt) = dtheta.as_deref_mut() {
                let gx = du * half_w;
                let gy = dv * half_h;
                dt[0] += gx * xo;
                dt[1] += gx * yo;
                dt[2] += gx;
                dt[3] += gy * xo;
                dt[4] += gy * yo;
                dt[5] += gy;
            }
        }
    }
    dweight
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_transposes_agree() {
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f64, 0.0, 0.0, 1.0, 1.0, 1.0]; // 3x2
        let mut c = [0.0; 4];
        matmul(2, 3, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [4.0, 5.0, 10.0, 11.0]);
        // a^T stored as 3x2
        let at = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let mut c2 = [0.0; 4];
        matmul(2, 3, 2, &at, true, &b, false, &mut c2, 0.0);
        assert_eq!(c, c2);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let g = ConvGeom {
            c: 2,
            h: 5,
            w: 4,
            kh: 3,
            kw: 3,
            stride: 2,
            pad: 1,
            ho: 3,
            wo: 2,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.rows() * g.cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn warp_region_covers_nonzero_output() {
        let src = vec![1.0f64; 16];
        let theta = [4.0, 0.0, -1.5, 0.0, 2.0, 0.3];
        let (oh, ow) = (40, 40);
        let mut full = vec![0.0; oh * ow];
        let planes = Planes {
            data: &src,
            c: 1,
            h: 4,
            w: 4,
        };
        warp_forward(planes, &theta, &mut full, oh, ow, 1.0, Region::full(oh, ow));
        let r = warp_region(&theta, 4, 4, oh, ow);
        for i in 0..oh {
            for j in 0..ow {
                let inside = i >= r.y0 && i < r.y1 && j >= r.x0 && j < r.x1;
                if !inside {
                    assert_eq!(full[i * ow + j], 0.0, "pixel {i},{j} outside {r:?}");
                }
            }
        }
        assert!(r.x1 - r.x0 < ow);
    }
}
