//! Grouped stride-1 cross-correlation with `same` zero padding.
//!
//! One-dimensional convolutions are handled as the `h == 1, kh == 1` case.
//! Pointwise kernels go through the matrix product; everything else is a
//! direct row-by-row accumulation.

use crate::real::{axpy, dot, gemm, MatRef, Real};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub groups: usize,
}

impl ConvGeom {
    /// Leading (top, left) padding for `same` output extents. An even kernel
    /// puts the extra zero on the trailing side.
    pub fn pad(&self) -> (usize, usize) {
        ((self.kh - 1) / 2, (self.kw - 1) / 2)
    }

    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    fn kvol(&self) -> usize {
        self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.cout * self.h * self.w
    }
}

/// Output index range `[lo, hi)` along one axis for which `o + k - pad` is a
/// valid input index.
#[inline]
fn valid(extent: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (extent + pad).saturating_sub(k).min(extent);
    (lo, hi.max(lo))
}

pub(crate) fn forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
    let hw = g.h * g.w;
    let (cin_g, cout_g, kvol) = (g.cin_g(), g.cout_g(), g.kvol());
    let (ph, pw) = g.pad();
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let xg = &x[(b * g.cin + grp * cin_g) * hw..][..cin_g * hw];
            let og = &mut out[(b * g.cout + grp * cout_g) * hw..][..cout_g * hw];
            match bias {
                Some(bias) => {
                    for co in 0..cout_g {
                        og[co * hw..(co + 1) * hw].fill(bias[grp * cout_g + co]);
                    }
                }
                None => og.fill(T::zero()),
            }
            let wg = &w[grp * cout_g * cin_g * kvol..][..cout_g * cin_g * kvol];
            if kvol == 1 {
                gemm(MatRef::rm(wg, cout_g, cin_g), MatRef::rm(xg, cin_g, hw), T::one(), og);
                continue;
            }
            for co in 0..cout_g {
                let plane = &mut og[co * hw..(co + 1) * hw];
                for ci in 0..cin_g {
                    let xp = &xg[ci * hw..(ci + 1) * hw];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = valid(g.h, ky, ph);
                        for kx in 0..g.kw {
                            let (ox0, ox1) = valid(g.w, kx, pw);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let wv = wg[((co * cin_g + ci) * g.kh + ky) * g.kw + kx];
                            let ix0 = ox0 + kx - pw;
                            for oy in oy0..oy1 {
                                let iy = oy + ky - ph;
                                axpy(
                                    &mut plane[oy * g.w + ox0..oy * g.w + ox1],
                                    wv,
                                    &xp[iy * g.w + ix0..iy * g.w + ix0 + (ox1 - ox0)],
                                );
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates input, weight and bias gradients for the given output
/// gradient `dy`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward<T: Real>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let hw = g.h * g.w;
    let (cin_g, cout_g, kvol) = (g.cin_g(), g.cout_g(), g.kvol());
    let (ph, pw) = g.pad();
    if let Some(db) = db {
        for b in 0..g.batch {
            for co in 0..g.cout {
                let plane = &dy[(b * g.cout + co) * hw..][..hw];
                db[co] += plane.iter().copied().sum::<T>();
            }
        }
    }
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let xg = &x[(b * g.cin + grp * cin_g) * hw..][..cin_g * hw];
            let dyg = &dy[(b * g.cout + grp * cout_g) * hw..][..cout_g * hw];
            let woff = grp * cout_g * cin_g * kvol;
            let wg = &w[woff..][..cout_g * cin_g * kvol];
            if kvol == 1 {
                if let Some(dx) = dx.as_deref_mut() {
                    let dxg = &mut dx[(b * g.cin + grp * cin_g) * hw..][..cin_g * hw];
                    // dX (cin_g x hw) += W^T (cin_g x cout_g) * dY (cout_g x hw)
                    gemm(MatRef::rm_t(wg, cin_g, cout_g), MatRef::rm(dyg, cout_g, hw), T::one(), dxg);
                }
                if let Some(dw) = dw.as_deref_mut() {
                    let dwg = &mut dw[woff..][..cout_g * cin_g];
                    // dW (cout_g x cin_g) += dY (cout_g x hw) * X^T (hw x cin_g)
                    gemm(MatRef::rm(dyg, cout_g, hw), MatRef::rm_t(xg, hw, cin_g), T::one(), dwg);
                }
                continue;
            }
            for co in 0..cout_g {
                let dplane = &dyg[co * hw..(co + 1) * hw];
                for ci in 0..cin_g {
                    let xp = &xg[ci * hw..(ci + 1) * hw];
                    for ky in 0..g.kh {
                        let (oy0, oy1) = valid(g.h, ky, ph);
                        for kx in 0..g.kw {
                            let (ox0, ox1) = valid(g.w, kx, pw);
                            if ox0 >= ox1 {
                                continue;
                            }
                            let widx = ((co * cin_g + ci) * g.kh + ky) * g.kw + kx;
                            let ix0 = ox0 + kx - pw;
                            let n = ox1 - ox0;
                            if let Some(dx) = dx.as_deref_mut() {
                                let wv = wg[widx];
                                let dxp = &mut dx[(b * g.cin + grp * cin_g + ci) * hw..][..hw];
                                for oy in oy0..oy1 {
                                    let iy = oy + ky - ph;
                                    axpy(
                                        &mut dxp[iy * g.w + ix0..iy * g.w + ix0 + n],
                                        wv,
                                        &dplane[oy * g.w + ox0..oy * g.w + ox1],
                                    );
                                }
                            }
                            if let Some(dw) = dw.as_deref_mut() {
                                let mut acc = T::zero();
                                for oy in oy0..oy1 {
                                    let iy = oy + ky - ph;
                                    acc += dot(
                                        &dplane[oy * g.w + ox0..oy * g.w + ox1],
                                        &xp[iy * g.w + ix0..iy * g.w + ix0 + n],
                                    );
                                }
                                dw[woff + widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}
