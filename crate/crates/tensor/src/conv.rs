//! Volumetric convolution and upsampling tape ops.
//!
//! Volumes are channel-first `(C, H, W, D)`, row-major. Convolution is the
//! direct algorithm; at the grid sizes this crate targets (≤ 64³) it beats
//! any im2col detour on memory and is easy to keep deterministic.

use crate::tape::Var;
use crate::{NdArray, Scalar};

#[derive(Clone, Copy, Debug)]
pub struct ConvSpec {
    pub stride: usize,
    pub pad: usize,
}

fn conv_out_extent(n: usize, k: usize, spec: ConvSpec) -> usize {
    (n + 2 * spec.pad - k) / spec.stride + 1
}

/// Valid output range along one axis for a kernel offset: all `o` with
/// `0 <= o*s - p + kk < n`.
fn axis_range(n_in: usize, n_out: usize, kk: usize, stride: usize, pad: usize) -> (usize, usize) {
    let s = stride as isize;
    let shift = kk as isize - pad as isize;
    let lo = (-shift).div_euclid(s).max(0);
    let lo = if lo as isize * s + shift < 0 { lo + 1 } else { lo };
    let hi_excl = ((n_in as isize - shift - 1).div_euclid(s) + 1).clamp(0, n_out as isize);
    ((lo as usize).min(n_out), hi_excl as usize)
}

/// Direct convolution as a sum of scaled shifted rows: for each
/// `(oc, ic, kz, ky, kx)` the inner loop walks one contiguous output row.
fn conv3d_forward<T: Scalar>(x: &NdArray<T>, w: &NdArray<T>, b: &NdArray<T>, spec: ConvSpec) -> NdArray<T> {
    let (ci, h, wd, d) = dims4(x);
    let ws = w.shape();
    assert_eq!(ws.len(), 5, "conv weight must be (Cout, Cin, k, k, k)");
    let (co, wci, k) = (ws[0], ws[1], ws[2]);
    assert_eq!(wci, ci, "conv input channels: weight {wci} vs input {ci}");
    assert_eq!(ws[3], k);
    assert_eq!(ws[4], k);
    assert_eq!(b.numel(), co, "conv bias length");
    let (oh, ow, od) = (conv_out_extent(h, k, spec), conv_out_extent(wd, k, spec), conv_out_extent(d, k, spec));
    let mut out = NdArray::zeros(&[co, oh, ow, od]);
    let (s, p) = (spec.stride, spec.pad);
    for oc in 0..co {
        let bias = b.data()[oc];
        for v in &mut out.data_mut()[oc * oh * ow * od..(oc + 1) * oh * ow * od] {
            *v = bias;
        }
    }
    for oc in 0..co {
        for icn in 0..ci {
            for kz in 0..k {
                let (z_lo, z_hi) = axis_range(h, oh, kz, s, p);
                for ky in 0..k {
                    let (y_lo, y_hi) = axis_range(wd, ow, ky, s, p);
                    for kx in 0..k {
                        let (x_lo, x_hi) = axis_range(d, od, kx, s, p);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let wv = w.data()[(((oc * ci + icn) * k + kz) * k + ky) * k + kx];
                        if wv == T::zero() {
                            continue;
                        }
                        for oz in z_lo..z_hi {
                            let iz = oz * s + kz - p;
                            for oy in y_lo..y_hi {
                                let iy = oy * s + ky - p;
                                let inb = (icn * h + iz) * wd * d + iy * d + x_lo * s + kx - p;
                                let onb = (oc * oh + oz) * ow * od + oy * od;
                                let orow = &mut out.data_mut()[onb + x_lo..onb + x_hi];
                                if s == 1 {
                                    let xrow = &x.data()[inb..inb + (x_hi - x_lo)];
                                    for (o, &xv) in orow.iter_mut().zip(xrow) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for (j, o) in orow.iter_mut().enumerate() {
                                        *o += wv * x.data()[inb + j * s];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv3d_backward<T: Scalar>(
    g: &NdArray<T>,
    x: &NdArray<T>,
    w: &NdArray<T>,
    spec: ConvSpec,
) -> (NdArray<T>, NdArray<T>, NdArray<T>) {
    let (ci, h, wd, d) = dims4(x);
    let ws = w.shape();
    let (co, k) = (ws[0], ws[2]);
    let (_, oh, ow, od) = dims4(g);
    let mut dx = NdArray::zeros(x.shape());
    let mut dw = NdArray::zeros(w.shape());
    let mut db = NdArray::zeros(&[co]);
    let (s, p) = (spec.stride, spec.pad);
    for oc in 0..co {
        db.data_mut()[oc] = g.data()[oc * oh * ow * od..(oc + 1) * oh * ow * od].iter().copied().sum();
    }
    for oc in 0..co {
        for icn in 0..ci {
            for kz in 0..k {
                let (z_lo, z_hi) = axis_range(h, oh, kz, s, p);
                for ky in 0..k {
                    let (y_lo, y_hi) = axis_range(wd, ow, ky, s, p);
                    for kx in 0..k {
                        let (x_lo, x_hi) = axis_range(d, od, kx, s, p);
                        if x_lo >= x_hi {
                            continue;
                        }
                        let wi = (((oc * ci + icn) * k + kz) * k + ky) * k + kx;
                        let wv = w.data()[wi];
                        let mut wacc = T::zero();
                        for oz in z_lo..z_hi {
                            let iz = oz * s + kz - p;
                            for oy in y_lo..y_hi {
                                let iy = oy * s + ky - p;
                                let inb = (icn * h + iz) * wd * d + iy * d + x_lo * s + kx - p;
                                let onb = (oc * oh + oz) * ow * od + oy * od;
                                let grow = &g.data()[onb + x_lo..onb + x_hi];
                                if s == 1 {
                                    let xrow = &x.data()[inb..inb + grow.len()];
                                    let dxrow = &mut dx.data_mut()[inb..inb + grow.len()];
                                    for ((&gv, &xv), dv) in grow.iter().zip(xrow).zip(dxrow.iter_mut()) {
                                        wacc += gv * xv;
                                        *dv += gv * wv;
                                    }
                                } else {
                                    for (j, &gv) in grow.iter().enumerate() {
                                        let xi = inb + j * s;
                                        wacc += gv * x.data()[xi];
                                        dx.data_mut()[xi] += gv * wv;
                                    }
                                }
                            }
                        }
                        dw.data_mut()[wi] += wacc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

fn dims4<T: Scalar>(a: &NdArray<T>) -> (usize, usize, usize, usize) {
    let s = a.shape();
    assert_eq!(s.len(), 4, "expected (C, H, W, D), got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

/// Per-axis source indices and interpolation weights for a 2× trilinear
/// upsample with the half-pixel convention and clamped borders.
fn up2_axis<T: Scalar>(n: usize) -> Vec<(usize, usize, T, T)> {
    (0..2 * n)
        .map(|u| {
            let f = u as f64 / 2.0 - 0.25;
            let i0 = f.floor();
            let frac = f - i0;
            let lo = (i0.max(0.0) as usize).min(n - 1);
            let hi = ((i0 as isize + 1).clamp(0, n as isize - 1)) as usize;
            (lo, hi, T::from_f64_c(1.0 - frac), T::from_f64_c(frac))
        })
        .collect()
}

/// Trainable-volume convolution.
pub fn conv3d<'t, T: Scalar>(x: Var<'t, T>, w: Var<'t, T>, b: Var<'t, T>, spec: ConvSpec) -> Var<'t, T> {
    let (xv, wv) = (x.value(), w.value());
    let out = conv3d_forward(&xv, &wv, &b.value(), spec);
    x.tape().push_node(
        out,
        Some(Box::new({
            let (ix, iw, ib) = (x.id(), w.id(), b.id());
            move |g: &NdArray<T>, send: &mut dyn FnMut(usize, NdArray<T>)| {
                let (dx, dw, db) = conv3d_backward(g, &xv, &wv, spec);
                send(ix, dx);
                send(iw, dw);
                send(ib, db);
            }
        })),
    )
}

/// 2× trilinear upsample of a `(C, h, w, d)` volume.
pub fn upsample2x<'t, T: Scalar>(x: Var<'t, T>) -> Var<'t, T> {
    let xv = x.value();
    let (c, h, w, d) = dims4(&xv);
    let (az, ay, ax) = (up2_axis::<T>(h), up2_axis::<T>(w), up2_axis::<T>(d));
    let mut out = NdArray::zeros(&[c, 2 * h, 2 * w, 2 * d]);
    for ch in 0..c {
        for (uz, &(z0, z1, wz0, wz1)) in az.iter().enumerate() {
            for (uy, &(y0, y1, wy0, wy1)) in ay.iter().enumerate() {
                let r00 = &xv.data()[((ch * h + z0) * w + y0) * d..((ch * h + z0) * w + y0) * d + d];
                let r01 = &xv.data()[((ch * h + z0) * w + y1) * d..((ch * h + z0) * w + y1) * d + d];
                let r10 = &xv.data()[((ch * h + z1) * w + y0) * d..((ch * h + z1) * w + y0) * d + d];
                let r11 = &xv.data()[((ch * h + z1) * w + y1) * d..((ch * h + z1) * w + y1) * d + d];
                let (w00, w01, w10, w11) = (wz0 * wy0, wz0 * wy1, wz1 * wy0, wz1 * wy1);
                let ob = ((ch * 2 * h + uz) * 2 * w + uy) * 2 * d;
                let orow = &mut out.data_mut()[ob..ob + 2 * d];
                for (ux, &(x0, x1, wx0, wx1)) in ax.iter().enumerate() {
                    let lo = w00 * r00[x0] + w01 * r01[x0] + w10 * r10[x0] + w11 * r11[x0];
                    let hi = w00 * r00[x1] + w01 * r01[x1] + w10 * r10[x1] + w11 * r11[x1];
                    orow[ux] = wx0 * lo + wx1 * hi;
                }
            }
        }
    }
    let ixd = x.id();
    x.tape().push_node(
        out,
        Some(Box::new(move |g: &NdArray<T>, send: &mut dyn FnMut(usize, NdArray<T>)| {
            let mut dx = NdArray::zeros(&[c, h, w, d]);
            let (az, ay, ax) = (up2_axis::<T>(h), up2_axis::<T>(w), up2_axis::<T>(d));
            for ch in 0..c {
                for (uz, &(z0, z1, wz0, wz1)) in az.iter().enumerate() {
                    for (uy, &(y0, y1, wy0, wy1)) in ay.iter().enumerate() {
                        let (w00, w01, w10, w11) = (wz0 * wy0, wz0 * wy1, wz1 * wy0, wz1 * wy1);
                        let gb = ((ch * 2 * h + uz) * 2 * w + uy) * 2 * d;
                        let grow = &g.data()[gb..gb + 2 * d];
                        let b00 = ((ch * h + z0) * w + y0) * d;
                        let b01 = ((ch * h + z0) * w + y1) * d;
                        let b10 = ((ch * h + z1) * w + y0) * d;
                        let b11 = ((ch * h + z1) * w + y1) * d;
                        for (ux, &(x0, x1, wx0, wx1)) in ax.iter().enumerate() {
                            let gv = grow[ux];
                            if gv == T::zero() {
                                continue;
                            }
                            let (glo, ghi) = (gv * wx0, gv * wx1);
                            let dxs = dx.data_mut();
                            dxs[b00 + x0] += w00 * glo;
                            dxs[b01 + x0] += w01 * glo;
                            dxs[b10 + x0] += w10 * glo;
                            dxs[b11 + x0] += w11 * glo;
                            dxs[b00 + x1] += w00 * ghi;
                            dxs[b01 + x1] += w01 * ghi;
                            dxs[b10 + x1] += w10 * ghi;
                            dxs[b11 + x1] += w11 * ghi;
                        }
                    }
                }
            }
            send(ixd, dx);
        })),
    )
}

/// Raw (non-tape) forward convolution, for frozen encoders.
pub fn conv3d_raw<T: Scalar>(x: &NdArray<T>, w: &NdArray<T>, b: &NdArray<T>, spec: ConvSpec) -> NdArray<T> {
    conv3d_forward(x, w, b, spec)
}

/// Non-overlapping average pooling of a `(C, H, W, D)` volume by `factor`.
pub fn avg_pool3d_raw<T: Scalar>(x: &NdArray<T>, factor: usize) -> NdArray<T> {
    let (c, h, w, d) = dims4(x);
    assert!(factor > 0 && h % factor == 0 && w % factor == 0 && d % factor == 0, "pool factor {factor} must divide {:?}", x.shape());
    let (oh, ow, od) = (h / factor, w / factor, d / factor);
    let inv = T::from_f64_c(1.0 / (factor * factor * factor) as f64);
    let mut out = NdArray::zeros(&[c, oh, ow, od]);
    for ch in 0..c {
        for oz in 0..oh {
            for oy in 0..ow {
                for ox in 0..od {
                    let mut acc = T::zero();
                    for dz in 0..factor {
                        for dy in 0..factor {
                            for dx in 0..factor {
                                acc += x.data()[((ch * h + oz * factor + dz) * w + oy * factor + dy) * d + ox * factor + dx];
                            }
                        }
                    }
                    out.data_mut()[((ch * oh + oz) * ow + oy) * od + ox] = acc * inv;
                }
            }
        }
    }
    out
}
