//! Raw CPU kernels for strided 3D convolution and its adjoints.
//!
//! Layout is `[B, C, D, H, W]` row-major with cubic kernels. Every kernel
//! parallelizes over disjoint output slabs (one task owns one `(batch,
//! channel)` volume) and accumulates sequentially inside, so results are
//! bit-identical for any thread count. Inner loops run over contiguous
//! width rows to keep the FMA pipelines fed.

use rayon::prelude::*;

use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ind: usize,
    pub inh: usize,
    pub inw: usize,
    pub outd: usize,
    pub outh: usize,
    pub outw: usize,
}

impl ConvGeom {
    /// Output extent of a strided convolution along one axis.
    pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
        (input + 2 * pad).checked_sub(k).map(|v| v / stride + 1)
    }

    pub fn in_vox(&self) -> usize {
        self.ind * self.inh * self.inw
    }

    pub fn out_vox(&self) -> usize {
        self.outd * self.outh * self.outw
    }
}

/// Eight-lane unrolled dot product: independent accumulators break the FMA
/// latency chain a plain reduction would serialize on, letting the SLP
/// vectorizer emit wide fused multiply-adds.
#[inline]
pub(crate) fn dot_lanes<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [T::ZERO; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let i = c * 8;
        for l in 0..8 {
            acc[l] = a[i + l].mul_add(b[i + l], acc[l]);
        }
    }
    let mut tail = T::ZERO;
    for i in chunks * 8..n {
        tail = a[i].mul_add(b[i], tail);
    }
    (((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))) + tail
}

/// Valid output-coordinate range along one axis for kernel offset `kof`:
/// all `o` with `0 <= o*stride + kof - pad < in_ext`.
#[inline]
fn out_range(pad: usize, kof: usize, stride: usize, in_ext: usize, out_ext: usize) -> (usize, usize) {
    let lo = if kof >= pad {
        0
    } else {
        (pad - kof).div_ceil(stride)
    };
    if in_ext + pad <= kof {
        return (0, 0);
    }
    let hi = ((in_ext + pad - kof - 1) / stride + 1).min(out_ext);
    (lo, hi.max(lo))
}

/// Stride-1 row update fusing all `k` taps into one pass:
/// `out[o] += sum_kx w[kx] * x[o + kx - pad]` wherever the tap is in range.
/// The interior runs `k` fused multiply-adds per element; the at-most
/// `2*pad` boundary columns fall back to per-tap scalar handling.
#[inline]
fn fused_row_taps<T: Scalar>(out_row: &mut [T], x_row: &[T], w: &[T], pad: usize) {
    let outw = out_row.len();
    let inw = x_row.len();
    let k = w.len();
    let full_lo = pad.min(outw);
    let full_hi = (inw + pad + 1).saturating_sub(k).min(outw).max(full_lo);
    let edge = |out_row: &mut [T], range: std::ops::Range<usize>| {
        for o in range {
            let mut acc = out_row[o];
            for (kx, &wv) in w.iter().enumerate() {
                let i = o + kx;
                if i >= pad && i - pad < inw {
                    acc = wv.mul_add(x_row[i - pad], acc);
                }
            }
            out_row[o] = acc;
        }
    };
    edge(out_row, 0..full_lo);
    edge(out_row, full_hi..outw);
    if full_hi <= full_lo {
        return;
    }
    let n = full_hi - full_lo;
    let x = &x_row[full_lo - pad..full_lo - pad + n + k - 1];
    let o = &mut out_row[full_lo..full_hi];
    match k {
        1 => {
            let w0 = w[0];
            for (ov, &xv) in o.iter_mut().zip(x) {
                *ov = w0.mul_add(xv, *ov);
            }
        }
        3 => {
            let (w0, w1, w2) = (w[0], w[1], w[2]);
            for (i, ov) in o.iter_mut().enumerate() {
                *ov = w0.mul_add(
                    x[i],
                    w1.mul_add(x[i + 1], w2.mul_add(x[i + 2], *ov)),
                );
            }
        }
        _ => {
            for (kx, &wv) in w.iter().enumerate() {
                for (ov, &xv) in o.iter_mut().zip(&x[kx..kx + n]) {
                    *ov = wv.mul_add(xv, *ov);
                }
            }
        }
    }
}

/// x[b,ci,...] ⋆ w[co,ci,kz,ky,kx] + bias[co] -> out[b,co,...]
pub(crate) fn conv3d_fwd<T: Scalar>(
    x: &[T],
    w: &[T],
    bias: Option<&[T]>,
    g: ConvGeom,
    out: &mut [T],
) {
    let (iv, ov, kk) = (g.in_vox(), g.out_vox(), g.k * g.k * g.k);
    debug_assert_eq!(x.len(), g.b * g.cin * iv);
    debug_assert_eq!(w.len(), g.cout * g.cin * kk);
    debug_assert_eq!(out.len(), g.b * g.cout * ov);

    out.par_chunks_mut(ov).enumerate().for_each(|(bc, ovol)| {
        let (b, co) = (bc / g.cout, bc % g.cout);
        let init = bias.map_or(T::ZERO, |bv| bv[co]);
        for v in ovol.iter_mut() {
            *v = init;
        }
        for ci in 0..g.cin {
            let xvol = &x[(b * g.cin + ci) * iv..][..iv];
            let wbase = (co * g.cin + ci) * kk;
            for kz in 0..g.k {
                let (ozlo, ozhi) = out_range(g.pad, kz, g.stride, g.ind, g.outd);
                for ky in 0..g.k {
                    let (oylo, oyhi) = out_range(g.pad, ky, g.stride, g.inh, g.outh);
                    if g.stride == 1 {
                        let wrow = &w[wbase + (kz * g.k + ky) * g.k..][..g.k];
                        for oz in ozlo..ozhi {
                            let iz = oz + kz - g.pad;
                            for oy in oylo..oyhi {
                                let iy = oy + ky - g.pad;
                                let orow = &mut ovol[(oz * g.outh + oy) * g.outw..][..g.outw];
                                let xrow = &xvol[(iz * g.inh + iy) * g.inw..][..g.inw];
                                fused_row_taps(orow, xrow, wrow, g.pad);
                            }
                        }
                        continue;
                    }
                    for kx in 0..g.k {
                        let wv = w[wbase + (kz * g.k + ky) * g.k + kx];
                        let (oxlo, oxhi) = out_range(g.pad, kx, g.stride, g.inw, g.outw);
                        if oxhi <= oxlo {
                            continue;
                        }
                        for oz in ozlo..ozhi {
                            let iz = oz * g.stride + kz - g.pad;
                            for oy in oylo..oyhi {
                                let iy = oy * g.stride + ky - g.pad;
                                let orow = &mut ovol[(oz * g.outh + oy) * g.outw..][..g.outw];
                                let xrow = &xvol[(iz * g.inh + iy) * g.inw..][..g.inw];
                                for ox in oxlo..oxhi {
                                    let ix = ox * g.stride + kx - g.pad;
                                    orow[ox] = wv.mul_add(xrow[ix], orow[ox]);
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// dL/dx of [`conv3d_fwd`]: scatter `gout` back through the kernel taps.
pub(crate) fn conv3d_bwd_input<T: Scalar>(
    gout: &[T],
    w: &[T],
    g: ConvGeom,
    gx: &mut [T],
) {
    let (iv, ov, kk) = (g.in_vox(), g.out_vox(), g.k * g.k * g.k);
    debug_assert_eq!(gout.len(), g.b * g.cout * ov);
    debug_assert_eq!(gx.len(), g.b * g.cin * iv);

    gx.par_chunks_mut(iv).enumerate().for_each(|(bc, gxvol)| {
        let (b, ci) = (bc / g.cin, bc % g.cin);
        for v in gxvol.iter_mut() {
            *v = T::ZERO;
        }
        for co in 0..g.cout {
            let gvol = &gout[(b * g.cout + co) * ov..][..ov];
            let wbase = (co * g.cin + ci) * kk;
            for kz in 0..g.k {
                let (ozlo, ozhi) = out_range(g.pad, kz, g.stride, g.ind, g.outd);
                for ky in 0..g.k {
                    let (oylo, oyhi) = out_range(g.pad, ky, g.stride, g.inh, g.outh);
                    if g.stride == 1 {
                        // Gather form: gx[i] += sum_kx w[kx] * gout[i + pad - kx],
                        // which is a fused tap pass with the weights reversed
                        // and the complementary padding.
                        debug_assert!(g.k <= 8);
                        let mut wrev = [T::ZERO; 8];
                        for j in 0..g.k {
                            wrev[j] =
                                w[wbase + (kz * g.k + ky) * g.k + (g.k - 1 - j)];
                        }
                        let rpad = g.k - 1 - g.pad;
                        for oz in ozlo..ozhi {
                            let iz = oz + kz - g.pad;
                            for oy in oylo..oyhi {
                                let iy = oy + ky - g.pad;
                                let grow = &gvol[(oz * g.outh + oy) * g.outw..][..g.outw];
                                let xrow =
                                    &mut gxvol[(iz * g.inh + iy) * g.inw..][..g.inw];
                                fused_row_taps(xrow, grow, &wrev[..g.k], rpad);
                            }
                        }
                        continue;
                    }
                    for kx in 0..g.k {
                        let wv = w[wbase + (kz * g.k + ky) * g.k + kx];
                        let (oxlo, oxhi) = out_range(g.pad, kx, g.stride, g.inw, g.outw);
                        if oxhi <= oxlo {
                            continue;
                        }
                        for oz in ozlo..ozhi {
                            let iz = oz * g.stride + kz - g.pad;
                            for oy in oylo..oyhi {
                                let iy = oy * g.stride + ky - g.pad;
                                let grow = &gvol[(oz * g.outh + oy) * g.outw..][..g.outw];
                                let xrow =
                                    &mut gxvol[(iz * g.inh + iy) * g.inw..][..g.inw];
                                for ox in oxlo..oxhi {
                                    let ix = ox * g.stride + kx - g.pad;
                                    xrow[ix] = wv.mul_add(grow[ox], xrow[ix]);
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// dL/dw of [`conv3d_fwd`]: correlation of the input with `gout`.
pub(crate) fn conv3d_bwd_weight<T: Scalar>(
    x: &[T],
    gout: &[T],
    g: ConvGeom,
    gw: &mut [T],
) {
    let (iv, ov, kk) = (g.in_vox(), g.out_vox(), g.k * g.k * g.k);
    debug_assert_eq!(gw.len(), g.cout * g.cin * kk);

    gw.par_chunks_mut(g.cin * kk).enumerate().for_each(|(co, gwslab)| {
        for v in gwslab.iter_mut() {
            *v = T::ZERO;
        }
        for b in 0..g.b {
            let gvol = &gout[(b * g.cout + co) * ov..][..ov];
            for ci in 0..g.cin {
                let xvol = &x[(b * g.cin + ci) * iv..][..iv];
                for kz in 0..g.k {
                    let (ozlo, ozhi) = out_range(g.pad, kz, g.stride, g.ind, g.outd);
                    for ky in 0..g.k {
                        let (oylo, oyhi) = out_range(g.pad, ky, g.stride, g.inh, g.outh);
                        for kx in 0..g.k {
                            let (oxlo, oxhi) = out_range(g.pad, kx, g.stride, g.inw, g.outw);
                            if oxhi <= oxlo {
                                continue;
                            }
                            let mut acc = T::ZERO;
                            for oz in ozlo..ozhi {
                                let iz = oz * g.stride + kz - g.pad;
                                for oy in oylo..oyhi {
                                    let iy = oy * g.stride + ky - g.pad;
                                    let grow =
                                        &gvol[(oz * g.outh + oy) * g.outw..][..g.outw];
                                    let xrow =
                                        &xvol[(iz * g.inh + iy) * g.inw..][..g.inw];
                                    if g.stride == 1 {
                                        let xoff = oxlo + kx - g.pad;
                                        let n = oxhi - oxlo;
                                        acc += dot_lanes(
                                            &grow[oxlo..oxhi],
                                            &xrow[xoff..xoff + n],
                                        );
                                    } else {
                                        for ox in oxlo..oxhi {
                                            let ix = ox * g.stride + kx - g.pad;
                                            acc = grow[ox].mul_add(xrow[ix], acc);
                                        }
                                    }
                                }
                            }
                            gwslab[ci * kk + (kz * g.k + ky) * g.k + kx] += acc;
                        }
                    }
                }
            }
        }
    });
}

/// Per-output-channel sum of `gout` (bias gradient).
pub(crate) fn conv3d_bwd_bias<T: Scalar>(gout: &[T], b: usize, cout: usize, ov: usize) -> Vec<T> {
    let mut gb = vec![T::ZERO; cout];
    for bi in 0..b {
        for (co, gbv) in gb.iter_mut().enumerate() {
            let gvol = &gout[(bi * cout + co) * ov..][..ov];
            let mut acc = T::ZERO;
            for &v in gvol {
                acc += v;
            }
            *gbv += acc;
        }
    }
    gb
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct DeconvGeom {
    pub b: usize,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub ind: usize,
    pub inh: usize,
    pub inw: usize,
}

impl DeconvGeom {
    /// `(in - 1) * stride + k`
    pub fn out_extent(input: usize, k: usize, stride: usize) -> usize {
        (input - 1) * stride + k
    }

    pub fn outd(&self) -> usize {
        Self::out_extent(self.ind, self.k, self.stride)
    }
    pub fn outh(&self) -> usize {
        Self::out_extent(self.inh, self.k, self.stride)
    }
    pub fn outw(&self) -> usize {
        Self::out_extent(self.inw, self.k, self.stride)
    }
    pub fn in_vox(&self) -> usize {
        self.ind * self.inh * self.inw
    }
    pub fn out_vox(&self) -> usize {
        self.outd() * self.outh() * self.outw()
    }
}

/// Transposed convolution: the exact adjoint of a stride-`s`, pad-0
/// convolution. Weight layout `[cin, cout, k, k, k]`.
pub(crate) fn deconv3d_fwd<T: Scalar>(x: &[T], w: &[T], g: DeconvGeom, out: &mut [T]) {
    let (iv, ov, kk) = (g.in_vox(), g.out_vox(), g.k * g.k * g.k);
    let (outh, outw) = (g.outh(), g.outw());
    debug_assert_eq!(out.len(), g.b * g.cout * ov);

    out.par_chunks_mut(ov).enumerate().for_each(|(bc, ovol)| {
        let (b, co) = (bc / g.cout, bc % g.cout);
        for v in ovol.iter_mut() {
            *v = T::ZERO;
        }
        for ci in 0..g.cin {
            let xvol = &x[(b * g.cin + ci) * iv..][..iv];
            let wbase = (ci * g.cout + co) * kk;
            for kz in 0..g.k {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = w[wbase + (kz * g.k + ky) * g.k + kx];
                        for iz in 0..g.ind {
                            let oz = iz * g.stride + kz;
                            for iy in 0..g.inh {
                                let oy = iy * g.stride + ky;
                                let orow = &mut ovol[(oz * outh + oy) * outw..][..outw];
                                let xrow = &xvol[(iz * g.inh + iy) * g.inw..][..g.inw];
                                if g.stride == 1 {
                                    for (o, &xv) in
                                        orow[kx..kx + g.inw].iter_mut().zip(xrow)
                                    {
                                        *o = wv.mul_add(xv, *o);
                                    }
                                } else {
                                    for (ix, &xv) in xrow.iter().enumerate() {
                                        let ox = ix * g.stride + kx;
                                        orow[ox] = wv.mul_add(xv, orow[ox]);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// dL/dx of [`deconv3d_fwd`]: a plain strided gather of `gout`.
pub(crate) fn deconv3d_bwd_input<T: Scalar>(gout: &[T], w: &[T], g: DeconvGeom, gx: &mut [T]) {
    let (iv, ov, kk) = (g.in_vox(), g.out_vox(), g.k * g.k * g.k);
    let (outh, outw) = (g.outh(), g.outw());
    debug_assert_eq!(gout.len(), g.b * g.cout * ov);

    gx.par_chunks_mut(iv).enumerate().for_each(|(bc, gxvol)| {
        let (b, ci) = (bc / g.cin, bc % g.cin);
        for v in gxvol.iter_mut() {
            *v = T::ZERO;
        }
        for co in 0..g.cout {
            let gvol = &gout[(b * g.cout + co) * ov..][..ov];
            let wbase = (ci * g.cout + co) * kk;
            for kz in 0..g.k {
                for ky in 0..g.k {
                    for kx in 0..g.k {
                        let wv = w[wbase + (kz * g.k + ky) * g.k + kx];
                        for iz in 0..g.ind {
                            let oz = iz * g.stride + kz;
                            for iy in 0..g.inh {
                                let oy = iy * g.stride + ky;
                                let grow = &gvol[(oz * outh + oy) * outw..][..outw];
                                let xrow = &mut gxvol[(iz * g.inh + iy) * g.inw..][..g.inw];
                                if g.stride == 1 {
                                    for (xv, &gv) in
                                        xrow.iter_mut().zip(&grow[kx..kx + g.inw])
                                    {
                                        *xv = wv.mul_add(gv, *xv);
                                    }
                                } else {
                                    for (ix, xv) in xrow.iter_mut().enumerate() {
                                        let ox = ix * g.stride + kx;
                                        *xv = wv.mul_add(grow[ox], *xv);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// dL/dw of [`deconv3d_fwd`].
pub(crate) fn deconv3d_bwd_weight<T: Scalar>(x: &[T], gout: &[T], g: DeconvGeom, gw: &mut [T]) {
    let (iv, ov, kk) = (g.in_vox(), g.out_vox(), g.k * g.k * g.k);
    let (outh, outw) = (g.outh(), g.outw());
    debug_assert_eq!(gw.len(), g.cin * g.cout * kk);

    gw.par_chunks_mut(g.cout * kk).enumerate().for_each(|(ci, gwslab)| {
        for v in gwslab.iter_mut() {
            *v = T::ZERO;
        }
        for b in 0..g.b {
            let xvol = &x[(b * g.cin + ci) * iv..][..iv];
            for co in 0..g.cout {
                let gvol = &gout[(b * g.cout + co) * ov..][..ov];
                for kz in 0..g.k {
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            let mut acc = T::ZERO;
                            for iz in 0..g.ind {
                                let oz = iz * g.stride + kz;
                                for iy in 0..g.inh {
                                    let oy = iy * g.stride + ky;
                                    let grow = &gvol[(oz * outh + oy) * outw..][..outw];
                                    let xrow = &xvol[(iz * g.inh + iy) * g.inw..][..g.inw];
                                    if g.stride == 1 {
                                        acc += dot_lanes(xrow, &grow[kx..kx + g.inw]);
                                    } else {
                                        for (ix, &xv) in xrow.iter().enumerate() {
                                            acc = xv.mul_add(grow[ix * g.stride + kx], acc);
                                        }
                                    }
                                }
                            }
                            gwslab[co * kk + (kz * g.k + ky) * g.k + kx] += acc;
                        }
                    }
                }
            }
        }
    });
}
