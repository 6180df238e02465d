//! Dense scalar volumes and binary masks on a spaced voxel grid.
//!
//! Axis order is `(H, W, D)` throughout, row-major, so flattening and the
//! on-disk raw format agree with every other module.

use crate::error::{Error, Result};
use dpseg_tensor::{NdArray, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GridShape(pub [usize; 3]);

impl GridShape {
    pub fn numel(&self) -> usize {
        self.0[0] * self.0[1] * self.0[2]
    }

    pub fn idx(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.0[1] + y) * self.0[2] + x
    }

    pub fn cube(n: usize) -> Self {
        GridShape([n, n, n])
    }

    pub fn min_extent(&self) -> usize {
        *self.0.iter().min().unwrap()
    }
}

/// A 3-d scalar grid with physical voxel spacing in millimetres.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume<T> {
    pub shape: GridShape,
    pub spacing: [f64; 3],
    pub data: Vec<T>,
}

impl<T: Scalar> Volume<T> {
    pub fn zeros(shape: GridShape, spacing: [f64; 3]) -> Self {
        Self { shape, spacing, data: vec![T::zero(); shape.numel()] }
    }

    pub fn new(shape: GridShape, spacing: [f64; 3], data: Vec<T>) -> Result<Self> {
        if data.len() != shape.numel() {
            return Err(Error::Shape(format!("volume data length {} vs shape {:?}", data.len(), shape.0)));
        }
        if spacing.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::Shape(format!("non-positive spacing {spacing:?}")));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric { component: "volume intensities".into() });
        }
        Ok(Self { shape, spacing, data })
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> T {
        self.data[self.shape.idx(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: T) {
        let i = self.shape.idx(z, y, x);
        self.data[i] = v;
    }

    /// Trilinear sample at a continuous index-space point, borders clamped.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> T {
        let [h, w, d] = self.shape.0;
        let clamp = |v: f64, n: usize| v.max(0.0).min(n as f64 - 1.0);
        let pz = clamp(p[0], h);
        let py = clamp(p[1], w);
        let px = clamp(p[2], d);
        let (z0, y0, x0) = (pz.floor() as usize, py.floor() as usize, px.floor() as usize);
        let (z1, y1, x1) = ((z0 + 1).min(h - 1), (y0 + 1).min(w - 1), (x0 + 1).min(d - 1));
        let (fz, fy, fx) = (pz - z0 as f64, py - y0 as f64, px - x0 as f64);
        let mut acc = 0.0;
        for (zi, wz) in [(z0, 1.0 - fz), (z1, fz)] {
            for (yi, wy) in [(y0, 1.0 - fy), (y1, fy)] {
                for (xi, wx) in [(x0, 1.0 - fx), (x1, fx)] {
                    acc += wz * wy * wx * self.at(zi, yi, xi).as_f64();
                }
            }
        }
        T::from_f64_c(acc)
    }

    /// Channel-first `(1, H, W, D)` array view for the network stack.
    pub fn to_array(&self) -> NdArray<T> {
        let [h, w, d] = self.shape.0;
        NdArray::from_vec(&[1, h, w, d], self.data.clone())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A binary mask on the same grid family as [`Volume`]. Binary by
/// construction: the field stores booleans, never fuzzy values.
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub shape: GridShape,
    pub spacing: [f64; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn empty(shape: GridShape, spacing: [f64; 3]) -> Self {
        Self { shape, spacing, data: vec![false; shape.numel()] }
    }

    pub fn at(&self, z: usize, y: usize, x: usize) -> bool {
        self.data[self.shape.idx(z, y, x)]
    }

    pub fn set(&mut self, z: usize, y: usize, x: usize, v: bool) {
        let i = self.shape.idx(z, y, x);
        self.data[i] = v;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Tight inclusive bounding box `(lo, hi)` of the set voxels.
    pub fn bbox(&self) -> Option<([usize; 3], [usize; 3])> {
        let [h, w, d] = self.shape.0;
        let mut lo = [usize::MAX; 3];
        let mut hi = [0usize; 3];
        let mut any = false;
        for z in 0..h {
            for y in 0..w {
                for x in 0..d {
                    if self.at(z, y, x) {
                        any = true;
                        let p = [z, y, x];
                        for a in 0..3 {
                            lo[a] = lo[a].min(p[a]);
                            hi[a] = hi[a].max(p[a]);
                        }
                    }
                }
            }
        }
        any.then_some((lo, hi))
    }

    /// Mask as a flat 0/1 scalar row (used as a loss target).
    pub fn to_scalar_row<T: Scalar>(&self) -> Vec<T> {
        self.data.iter().map(|&b| if b { T::one() } else { T::zero() }).collect()
    }
}

/// Crop `vol` to the inclusive box and resample to `out_shape` with
/// corner-aligned trilinear interpolation. A box whose extent equals the
/// output shape is copied through exactly.
pub fn crop_resample_trilinear<T: Scalar>(
    vol: &Volume<T>,
    lo: [usize; 3],
    hi: [usize; 3],
    out_shape: GridShape,
) -> Volume<T> {
    let ext = [hi[0] - lo[0] + 1, hi[1] - lo[1] + 1, hi[2] - lo[2] + 1];
    let mut out = Volume::zeros(out_shape, vol.spacing);
    let [oh, ow, od] = out_shape.0;
    // Corner-aligned: output index u in [0, n-1] maps to lo + u*(ext-1)/(n-1).
    let axis_map = |u: usize, n: usize, e: usize, l: usize| -> f64 {
        if n <= 1 || e <= 1 {
            l as f64
        } else {
            l as f64 + u as f64 * (e as f64 - 1.0) / (n as f64 - 1.0)
        }
    };
    for z in 0..oh {
        for y in 0..ow {
            for x in 0..od {
                let p = [
                    axis_map(z, oh, ext[0], lo[0]),
                    axis_map(y, ow, ext[1], lo[1]),
                    axis_map(x, od, ext[2], lo[2]),
                ];
                out.set(z, y, x, vol.sample_trilinear(p));
            }
        }
    }
    out
}
