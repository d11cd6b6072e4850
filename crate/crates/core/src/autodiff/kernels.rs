//! Raw array kernels behind the graph ops. No allocation policy beyond the
//! returned buffers; all loops run in a fixed order so results are
//! reproducible bit for bit.

use crate::scalar::Scalar;

/// Output extent of a convolution along one axis.
#[inline]
pub(crate) fn conv_out_len(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = n + 2 * pad;
    if padded < k || stride == 0 {
        return None;
    }
    Some((padded - k) / stride + 1)
}

pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    /// Range of output columns whose input column `ox*stride + kx - pad` is in bounds.
    #[inline]
    fn ox_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo_num = self.pad.saturating_sub(kx);
        let lo = lo_num.div_ceil(s);
        // ix = ox*s + kx - pad <= w - 1  =>  ox <= (w - 1 + pad - kx) / s
        let hi = if self.w + self.pad < kx + 1 {
            0
        } else {
            ((self.w - 1 + self.pad - kx) / s + 1).min(self.wo)
        };
        (lo.min(hi), hi)
    }
}

/// Unfolds `x` into `cols[(ci*kh*kw + ky*kw + kx) * ho*wo + oy*wo + ox]`,
/// zero outside the input.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let plane_out = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.cin * g.kh * g.kw * plane_out];
    for ci in 0..g.cin {
        let src = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[r * plane_out..(r + 1) * plane_out];
                let (lo, hi) = g.ox_range(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if g.stride == 1 {
                        let ix0 = lo + kx - g.pad;
                        drow[lo..hi].copy_from_slice(&row[ix0..ix0 + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            drow[ox] = row[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let plane_out = g.ho * g.wo;
    let mut x = vec![T::zero(); g.cin * g.h * g.w];
    for ci in 0..g.cin {
        let dst = &mut x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (ci * g.kh + ky) * g.kw + kx;
                let src = &cols[r * plane_out..(r + 1) * plane_out];
                let (lo, hi) = g.ox_range(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    let row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    for ox in lo..hi {
                        row[ox * g.stride + kx - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
    x
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let plane_out = g.ho * g.wo;
    let rows = g.cin * g.kh * g.kw;
    let cols = im2col(x, g);
    let mut out = vec![T::zero(); g.cout * plane_out];
    for co in 0..g.cout {
        let dst = &mut out[co * plane_out..(co + 1) * plane_out];
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[co]);
        }
        for r in 0..rows {
            let wv = weight[co * rows + r];
            for (d, &s) in dst.iter_mut().zip(&cols[r * plane_out..(r + 1) * plane_out]) {
                *d += wv * s;
            }
        }
    }
    out
}

/// Returns (grad_input, grad_weight, grad_bias).
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    weight: &[T],
    gout: &[T],
    g: &ConvGeom,
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let plane_out = g.ho * g.wo;
    let rows = g.cin * g.kh * g.kw;
    let cols = im2col(x, g);
    let mut gcols = need_input.then(|| vec![T::zero(); cols.len()]);
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); g.cout];
    for co in 0..g.cout {
        let go = &gout[co * plane_out..(co + 1) * plane_out];
        gb[co] = go.iter().copied().sum();
        for r in 0..rows {
            let c = &cols[r * plane_out..(r + 1) * plane_out];
            let mut acc = T::zero();
            for (&gv, &cv) in go.iter().zip(c) {
                acc += gv * cv;
            }
            gw[co * rows + r] = acc;
            if let Some(gc) = gcols.as_mut() {
                let wv = weight[co * rows + r];
                for (d, &gv) in gc[r * plane_out..(r + 1) * plane_out].iter_mut().zip(go) {
                    *d += wv * gv;
                }
            }
        }
    }
    (gcols.map(|gc| col2im(&gc, g)), gw, gb)
}

/// Bilinear interpolation of one plane at continuous (y, x) in pixel units.
/// Neighbours outside the plane contribute zero.
#[inline]
pub(crate) fn bilinear_at<T: Scalar>(plane: &[T], h: usize, w: usize, y: T, x: T) -> T {
    let y0f = y.floor();
    let x0f = x.floor();
    let fy = y - y0f;
    let fx = x - x0f;
    let (Some(y0), Some(x0)) = (y0f.to_isize(), x0f.to_isize()) else {
        return T::zero();
    };
    let one = T::one();
    let at = |yy: isize, xx: isize| -> T {
        if yy < 0 || xx < 0 || yy as usize >= h || xx as usize >= w {
            T::zero()
        } else {
            plane[yy as usize * w + xx as usize]
        }
    };
    at(y0, x0) * ((one - fy) * (one - fx))
        + at(y0, x0 + 1) * ((one - fy) * fx)
        + at(y0 + 1, x0) * (fy * (one - fx))
        + at(y0 + 1, x0 + 1) * (fy * fx)
}

/// Scatters `g` into `gplane` with the bilinear weights at (y, x) and returns
/// `g * (d value / dy, d value / dx)`.
#[inline]
pub(crate) fn bilinear_backward<T: Scalar>(
    plane: &[T],
    gplane: Option<&mut [T]>,
    h: usize,
    w: usize,
    y: T,
    x: T,
    g: T,
) -> (T, T) {
    let y0f = y.floor();
    let x0f = x.floor();
    let fy = y - y0f;
    let fx = x - x0f;
    let (Some(y0), Some(x0)) = (y0f.to_isize(), x0f.to_isize()) else {
        return (T::zero(), T::zero());
    };
    let one = T::one();
    let inb = |yy: isize, xx: isize| yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < w;
    let at = |yy: isize, xx: isize| if inb(yy, xx) { plane[yy as usize * w + xx as usize] } else { T::zero() };
    let v00 = at(y0, x0);
    let v01 = at(y0, x0 + 1);
    let v10 = at(y0 + 1, x0);
    let v11 = at(y0 + 1, x0 + 1);
    if let Some(gp) = gplane {
        let mut put = |yy: isize, xx: isize, wt: T| {
            if inb(yy, xx) {
                gp[yy as usize * w + xx as usize] += g * wt;
            }
        };
        put(y0, x0, (one - fy) * (one - fx));
        put(y0, x0 + 1, (one - fy) * fx);
        put(y0 + 1, x0, fy * (one - fx));
        put(y0 + 1, x0 + 1, fy * fx);
    }
    let dy = (one - fx) * (v10 - v00) + fx * (v11 - v01);
    let dx = (one - fy) * (v01 - v00) + fy * (v11 - v10);
    (g * dy, g * dx)
}

pub(crate) struct DeformGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
}

impl DeformGeom {
    #[inline]
    pub fn taps(&self) -> usize {
        self.k * self.k
    }
    #[inline]
    pub fn pad(&self) -> usize {
        (self.k - 1) / 2
    }
}

/// Samples the deformable columns: `cols[(ci*taps + tap)*hw + pos]`.
pub(crate) fn deform_columns<T: Scalar>(x: &[T], offsets: &[T], g: &DeformGeom) -> Vec<T> {
    let hw = g.h * g.w;
    let taps = g.taps();
    let pad = g.pad() as isize;
    let mut cols = vec![T::zero(); g.cin * taps * hw];
    for tap in 0..taps {
        let ky = (tap / g.k) as isize;
        let kx = (tap % g.k) as isize;
        let off_y = &offsets[(2 * tap) * hw..(2 * tap + 1) * hw];
        let off_x = &offsets[(2 * tap + 1) * hw..(2 * tap + 2) * hw];
        for pos in 0..hw {
            let oy = (pos / g.w) as isize;
            let ox = (pos % g.w) as isize;
            let py = T::lit((oy - pad + ky) as f64) + off_y[pos];
            let px = T::lit((ox - pad + kx) as f64) + off_x[pos];
            for ci in 0..g.cin {
                let plane = &x[ci * hw..(ci + 1) * hw];
                cols[(ci * taps + tap) * hw + pos] = bilinear_at(plane, g.h, g.w, py, px);
            }
        }
    }
    cols
}

/// Same accumulation order as `conv2d_forward`: bias, then ci, ky, kx.
pub(crate) fn deform_forward<T: Scalar>(cols: &[T], weight: &[T], bias: Option<&[T]>, g: &DeformGeom) -> Vec<T> {
    let hw = g.h * g.w;
    let taps = g.taps();
    let mut out = vec![T::zero(); g.cout * hw];
    for co in 0..g.cout {
        let dst = &mut out[co * hw..(co + 1) * hw];
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.cin {
            for tap in 0..taps {
                let wv = weight[(co * g.cin + ci) * taps + tap];
                let src = &cols[(ci * taps + tap) * hw..(ci * taps + tap + 1) * hw];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
    out
}

pub(crate) struct DeformGrads<T> {
    pub input: Option<Vec<T>>,
    pub offsets: Option<Vec<T>>,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

pub(crate) fn deform_backward<T: Scalar>(
    x: &[T],
    offsets: &[T],
    cols: &[T],
    weight: &[T],
    gout: &[T],
    g: &DeformGeom,
    need_input: bool,
    need_offsets: bool,
) -> DeformGrads<T> {
    let hw = g.h * g.w;
    let taps = g.taps();
    let pad = g.pad() as isize;
    let mut gw = vec![T::zero(); weight.len()];
    let mut gb = vec![T::zero(); g.cout];
    let mut gcols = vec![T::zero(); cols.len()];
    for co in 0..g.cout {
        let go = &gout[co * hw..(co + 1) * hw];
        gb[co] = go.iter().copied().sum();
        for ci in 0..g.cin {
            for tap in 0..taps {
                let widx = (co * g.cin + ci) * taps + tap;
                let wv = weight[widx];
                let c0 = (ci * taps + tap) * hw;
                let src = &cols[c0..c0 + hw];
                let mut acc = T::zero();
                for (&gv, &cv) in go.iter().zip(src) {
                    acc += gv * cv;
                }
                gw[widx] += acc;
                for (d, &gv) in gcols[c0..c0 + hw].iter_mut().zip(go) {
                    *d += wv * gv;
                }
            }
        }
    }
    let mut gx = need_input.then(|| vec![T::zero(); x.len()]);
    let mut goff = need_offsets.then(|| vec![T::zero(); offsets.len()]);
    if need_input || need_offsets {
        for tap in 0..taps {
            let ky = (tap / g.k) as isize;
            let kx = (tap % g.k) as isize;
            for pos in 0..hw {
                let oy = (pos / g.w) as isize;
                let ox = (pos % g.w) as isize;
                let py = T::lit((oy - pad + ky) as f64) + offsets[(2 * tap) * hw + pos];
                let px = T::lit((ox - pad + kx) as f64) + offsets[(2 * tap + 1) * hw + pos];
                let mut dy = T::zero();
                let mut dx = T::zero();
                for ci in 0..g.cin {
                    let gc = gcols[(ci * taps + tap) * hw + pos];
                    if gc == T::zero() {
                        continue;
                    }
                    let plane = &x[ci * hw..(ci + 1) * hw];
                    let gp = gx.as_mut().map(|v| &mut v[ci * hw..(ci + 1) * hw]);
                    let (a, b) = bilinear_backward(plane, gp, g.h, g.w, py, px, gc);
                    dy += a;
                    dx += b;
                }
                if let Some(go) = goff.as_mut() {
                    go[(2 * tap) * hw + pos] += dy;
                    go[(2 * tap + 1) * hw + pos] += dx;
                }
            }
        }
    }
    DeformGrads { input: gx, offsets: goff, weight: gw, bias: gb }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Numerically stable `ln(1 + e^z)`.
#[inline]
pub(crate) fn softplus<T: Scalar>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}
