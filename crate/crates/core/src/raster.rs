//! BEV voxelization and the point/grid interpolation operators.
//!
//! Grid nodes sit at cell centers: node `(i, j, k)` is at
//! `origin + ((i + 0.5) cell, (j + 0.5) cell, (k + 0.5) z_cell)`. A query is
//! mapped to continuous node coordinates and clamped to `[0, n - 1]` on every
//! axis, so anything within half a cell of the ROI edge lands on the edge
//! nodes. Scatter (voxelize) and gather (sample) share the same weights,
//! which makes gather the exact transpose of scatter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::Point;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridGeometry {
    pub origin: [f64; 3],
    /// Meters per cell on the ground plane.
    pub cell: f64,
    /// Meters per vertical bin.
    pub z_cell: f64,
    /// Cells along y.
    pub h: usize,
    /// Cells along x.
    pub w: usize,
    /// Bins along z.
    pub z: usize,
}

impl GridGeometry {
    /// 64 x 64 x 8 over a 16 m x 16 m x 4 m ROI centered on the ego car.
    pub fn desk() -> Self {
        Self {
            origin: [-8.0, -8.0, -0.5],
            cell: 0.25,
            z_cell: 0.5,
            h: 64,
            w: 64,
            z: 8,
        }
    }

    /// 128 x 128 x 8 over the same ROI at 0.125 m, close to the full-scale
    /// cell size so that radii counted in output cells keep their physical
    /// extent.
    pub fn desk_fine() -> Self {
        Self {
            cell: 0.125,
            h: 128,
            w: 128,
            ..Self::desk()
        }
    }

    /// 1024 x 1024 x 32 bins at 0.15625 m over 160 m x 160 m x 5 m.
    pub fn full_scale() -> Self {
        Self {
            origin: [-80.0, -80.0, -2.0],
            cell: 0.15625,
            z_cell: 0.15625,
            h: 1024,
            w: 1024,
            z: 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0 && self.z_cell > 0.0) || !self.cell.is_finite() || !self.z_cell.is_finite() {
            return Err(Error::Config("grid resolution must be positive".into()));
        }
        if self.h == 0 || self.w == 0 || self.z == 0 {
            return Err(Error::Config("grid dimensions must be >= 1".into()));
        }
        if self.origin.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("grid origin must be finite".into()));
        }
        Ok(())
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.w as f64 * self.cell, self.h as f64 * self.cell, self.z as f64 * self.z_cell]
    }

    pub fn contains(&self, p: &Point) -> bool {
        let e = self.extent();
        let o = self.origin;
        p.x >= o[0] && p.x < o[0] + e[0] && p.y >= o[1] && p.y < o[1] + e[1] && p.z >= o[2] && p.z < o[2] + e[2]
    }

    /// Same ROI seen through a BEV grid `stride` times coarser. Vertical bins
    /// are unchanged.
    pub fn downsample(&self, stride: usize) -> Self {
        Self {
            cell: self.cell * stride as f64,
            h: self.h.div_ceil(stride),
            w: self.w.div_ceil(stride),
            ..*self
        }
    }

    /// Center of BEV cell `(row, col)` in meters.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            self.origin[0] + (col as f64 + 0.5) * self.cell,
            self.origin[1] + (row as f64 + 0.5) * self.cell,
        )
    }

    /// Interpolation stencil along x, y, and z.
    pub fn stencil3(&self, x: f64, y: f64, z: f64) -> [Axis; 3] {
        [
            Axis::locate(x, self.origin[0], self.cell, self.w),
            Axis::locate(y, self.origin[1], self.cell, self.h),
            Axis::locate(z, self.origin[2], self.z_cell, self.z),
        ]
    }

    pub fn stencil2(&self, x: f64, y: f64) -> [Axis; 2] {
        [
            Axis::locate(x, self.origin[0], self.cell, self.w),
            Axis::locate(y, self.origin[1], self.cell, self.h),
        ]
    }
}

/// Two neighboring nodes on one axis and the fractional position between.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Axis {
    pub lo: usize,
    pub hi: usize,
    pub t: f64,
}

impl Axis {
    pub fn locate(v: f64, origin: f64, cell: f64, n: usize) -> Self {
        if n == 1 {
            return Axis { lo: 0, hi: 0, t: 0.0 };
        }
        let g = ((v - origin) / cell - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = (g.floor() as usize).min(n - 2);
        Axis { lo, hi: lo + 1, t: g - lo as f64 }
    }

    /// `(node, weight)` pairs. Both weights are always present so stencils
    /// have a fixed size, even when one weight is zero.
    pub fn taps(&self) -> [(usize, f64); 2] {
        [(self.lo, 1.0 - self.t), (self.hi, self.t)]
    }
}

/// The eight `(z, row, col, weight)` taps of a trilinear stencil.
pub fn trilinear_taps(geom: &GridGeometry, x: f64, y: f64, z: f64) -> [(usize, usize, usize, f64); 8] {
    let [ax, ay, az] = geom.stencil3(x, y, z);
    let mut out = [(0, 0, 0, 0.0); 8];
    let mut n = 0;
    for (k, wz) in az.taps() {
        for (r, wy) in ay.taps() {
            for (c, wx) in ax.taps() {
                out[n] = (k, r, c, wz * wy * wx);
                n += 1;
            }
        }
    }
    out
}

/// The four `(row, col, weight)` taps of a bilinear stencil.
pub fn bilinear_taps(geom: &GridGeometry, x: f64, y: f64) -> [(usize, usize, f64); 4] {
    let [ax, ay] = geom.stencil2(x, y);
    let mut out = [(0, 0, 0.0); 4];
    let mut n = 0;
    for (r, wy) in ay.taps() {
        for (c, wx) in ax.taps() {
            out[n] = (r, c, wy * wx);
            n += 1;
        }
    }
    out
}

/// Channel-major `C x H x W` grid over the BEV plane.
#[derive(Clone, Debug, PartialEq)]
pub struct BevTensor {
    pub channels: usize,
    pub data: Vec<f64>,
    pub geom: GridGeometry,
}

impl BevTensor {
    pub fn zeros(channels: usize, geom: GridGeometry) -> Self {
        Self {
            channels,
            data: vec![0.0; channels * geom.h * geom.w],
            geom,
        }
    }

    #[inline]
    pub fn index(&self, c: usize, row: usize, col: usize) -> usize {
        (c * self.geom.h + row) * self.geom.w + col
    }

    pub fn get(&self, c: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(c, row, col)]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Voxelized {
    pub tensor: BevTensor,
    pub dropped: usize,
}

/// Reversed trilinear interpolation: each in-ROI point spreads unit mass over
/// its eight surrounding nodes. The vertical axis becomes the channel axis.
/// Points outside the ROI are dropped and counted. Points are processed in
/// input order, so the floating-point sums are reproducible.
pub fn voxelize(points: &[Point], geom: &GridGeometry) -> Voxelized {
    let mut tensor = BevTensor::zeros(geom.z, *geom);
    let mut dropped = 0;
    for p in points {
        if !p.is_finite() || !geom.contains(p) {
            dropped += 1;
            continue;
        }
        for (k, r, c, w) in trilinear_taps(geom, p.x, p.y, p.z) {
            let i = tensor.index(k, r, c);
            tensor.data[i] += w;
        }
    }
    Voxelized { tensor, dropped }
}

/// Samples an `F x Z x H x W` volume (stored as `(F * Z) x H x W`, index
/// `f * Z + z`) at a 3D point.
pub fn trilinear_sample(volume: &[f64], features: usize, geom: &GridGeometry, p: &Point) -> Vec<f64> {
    let mut out = vec![0.0; features];
    trilinear_sample_into(volume, features, geom, p.x, p.y, p.z, &mut out);
    out
}

pub fn trilinear_sample_into(
    volume: &[f64],
    features: usize,
    geom: &GridGeometry,
    x: f64,
    y: f64,
    z: f64,
    out: &mut [f64],
) {
    debug_assert_eq!(volume.len(), features * geom.z * geom.h * geom.w);
    let taps = trilinear_taps(geom, x, y, z);
    let plane = geom.h * geom.w;
    for (f, o) in out.iter_mut().enumerate().take(features) {
        let mut acc = 0.0;
        for &(k, r, c, w) in &taps {
            acc += w * volume[(f * geom.z + k) * plane + r * geom.w + c];
        }
        *o = acc;
    }
}

/// Transpose of [`trilinear_sample_into`]: adds `grad[f] * weight` into the
/// volume gradient.
pub fn trilinear_scatter(
    volume_grad: &mut [f64],
    features: usize,
    geom: &GridGeometry,
    x: f64,
    y: f64,
    z: f64,
    grad: &[f64],
) {
    let taps = trilinear_taps(geom, x, y, z);
    let plane = geom.h * geom.w;
    for (f, &g) in grad.iter().enumerate().take(features) {
        if g == 0.0 {
            continue;
        }
        for &(k, r, c, w) in &taps {
            volume_grad[(f * geom.z + k) * plane + r * geom.w + c] += w * g;
        }
    }
}

/// Samples a `K x H x W` map at a BEV position.
pub fn bilinear_sample(map: &[f64], channels: usize, geom: &GridGeometry, x: f64, y: f64) -> Vec<f64> {
    debug_assert_eq!(map.len(), channels * geom.h * geom.w);
    let taps = bilinear_taps(geom, x, y);
    let plane = geom.h * geom.w;
    (0..channels)
        .map(|ch| taps.iter().map(|&(r, c, w)| w * map[ch * plane + r * geom.w + c]).sum())
        .collect()
}

/// Transpose of [`bilinear_sample`].
pub fn bilinear_scatter(map_grad: &mut [f64], channels: usize, geom: &GridGeometry, x: f64, y: f64, grad: &[f64]) {
    let taps = bilinear_taps(geom, x, y);
    let plane = geom.h * geom.w;
    for (ch, &g) in grad.iter().enumerate().take(channels) {
        for &(r, c, w) in &taps {
            map_grad[ch * plane + r * geom.w + c] += w * g;
        }
    }
}
