//! Axis-aligned 3-D boxes in voxel units.

use crate::error::{Error, Result};

/// Corners are stored min/max per axis in (x, y, z) order; constructors
/// accept the top-right-front / bottom-left-rear convention.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Box3D {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Box3D {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Result<Self> {
        for a in 0..3 {
            if !(max[a] > min[a]) {
                return Err(Error::Argument(format!(
                    "box has non-positive extent on axis {a}: [{}, {}]",
                    min[a], max[a]
                )));
            }
        }
        Ok(Box3D { min, max })
    }

    /// From top-right-front (max) and bottom-left-rear (min) corners.
    pub fn from_corners(trf: [f64; 3], blr: [f64; 3]) -> Result<Self> {
        Box3D::new(blr, trf)
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn extent(&self) -> [f64; 3] {
        [
            self.max[0] - self.min[0],
            self.max[1] - self.min[1],
            self.max[2] - self.min[2],
        ]
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0] * e[1] * e[2]
    }

    pub fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }

    /// The eight corner points.
    pub fn corners(&self) -> [[f64; 3]; 8] {
        let mut out = [[0.0; 3]; 8];
        for (i, corner) in out.iter_mut().enumerate() {
            for a in 0..3 {
                corner[a] = if (i >> a) & 1 == 0 { self.min[a] } else { self.max[a] };
            }
        }
        out
    }

    /// Largest in-plane (x or y) extent scaled by voxel spacing, in mm.
    pub fn inplane_diameter_mm(&self, spacing_xyz: [f64; 3]) -> f64 {
        let e = self.extent();
        (e[0] * spacing_xyz[0]).max(e[1] * spacing_xyz[1])
    }
}

/// Ground-truth annotation: a box plus the hard-negative flag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBox {
    pub bounds: Box3D,
    pub hard_negative: bool,
}

impl GroundTruthBox {
    pub fn positive(bounds: Box3D) -> Self {
        GroundTruthBox { bounds, hard_negative: false }
    }

    pub fn hard_negative(bounds: Box3D) -> Self {
        GroundTruthBox { bounds, hard_negative: true }
    }
}

/// Mapping between voxel coordinates and the detector's feature grid.
/// Grid cell `g` sits at voxel `g*s + (s-1)/2` (cell center); strides are
/// stored per point axis in (x, y, z) order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridMap {
    pub stride_xyz: [usize; 3],
}

impl GridMap {
    pub fn new(axial: usize, in_plane: usize) -> Self {
        GridMap { stride_xyz: [in_plane, in_plane, axial] }
    }

    pub fn voxel_to_grid(&self, v: [f64; 3]) -> [f64; 3] {
        let mut g = [0.0; 3];
        for a in 0..3 {
            let s = self.stride_xyz[a] as f64;
            g[a] = (v[a] - (s - 1.0) / 2.0) / s;
        }
        g
    }

    pub fn grid_to_voxel(&self, g: [f64; 3]) -> [f64; 3] {
        let mut v = [0.0; 3];
        for a in 0..3 {
            let s = self.stride_xyz[a] as f64;
            v[a] = g[a] * s + (s - 1.0) / 2.0;
        }
        v
    }

    /// Grid dims (d', h', w') for a volume of (d, h, w) voxels.
    pub fn grid_dims(&self, vol_dhw: [usize; 3]) -> [usize; 3] {
        [
            vol_dhw[0] / self.stride_xyz[2],
            vol_dhw[1] / self.stride_xyz[1],
            vol_dhw[2] / self.stride_xyz[0],
        ]
    }
}

/// Intersection over union of two positive-extent boxes; 0 when disjoint.
pub fn iou3d(a: &Box3D, b: &Box3D) -> f64 {
    let mut inter = 1.0;
    for axis in 0..3 {
        let lo = a.min[axis].max(b.min[axis]);
        let hi = a.max[axis].min(b.max[axis]);
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    inter / (a.volume() + b.volume() - inter)
}
