//! Ground-truth heatmap construction.
//!
//! Each positive lesion paints an anisotropic Gaussian on the feature grid
//! with per-axis radius equal to half the lesion extent (in grid units),
//! peak exactly 1 at the center cell; positives combine by elementwise max.
//! Hard negatives paint the same shape negated (peak -1) and combine by
//! elementwise min into cells no positive touched.

use crate::boxes::{GridMap, GroundTruthBox};
use crate::error::{Error, Result};
use crate::tensor::{Elem, Tensor};

/// Sigma is radius/3 and the Gaussian is truncated at 3 sigma (= the radius).
const SIGMA_PER_RADIUS: f64 = 1.0 / 3.0;

/// One positive lesion's center, kept in both coordinate frames.
#[derive(Debug, Clone)]
pub struct LesionCenter {
    pub index: usize,
    pub voxel: [f64; 3],
    pub grid: [f64; 3],
    /// The grid cell (z, y, x) where the target is exactly 1.
    pub cell: [usize; 3],
}

/// Target heatmap `Y` in [-1, 1] plus the positive lesion centers.
pub struct HeatmapTarget<T: Elem> {
    pub y: Tensor<T>,
    pub centers: Vec<LesionCenter>,
    /// Number of positive lesions (the `m` in the focal loss).
    pub m: usize,
}

/// Paint one truncated Gaussian into `buf`, combining with max (positives)
/// or min (negatives, `sign = -1`).
#[allow(clippy::too_many_arguments)]
fn paint(
    buf: &mut [f64],
    dims: [usize; 3],
    cell: [usize; 3],
    radius_zyx: [f64; 3],
    sign: f64,
    positives_only: Option<&[bool]>,
) {
    let [gd, gh, gw] = dims;
    let lo = |c: usize, r: f64| c.saturating_sub(r.ceil() as usize);
    let hi = |c: usize, r: f64, d: usize| (c + r.ceil() as usize + 1).min(d);
    for z in lo(cell[0], radius_zyx[0])..hi(cell[0], radius_zyx[0], gd) {
        for y in lo(cell[1], radius_zyx[1])..hi(cell[1], radius_zyx[1], gh) {
            for x in lo(cell[2], radius_zyx[2])..hi(cell[2], radius_zyx[2], gw) {
                let dz = z as f64 - cell[0] as f64;
                let dy = y as f64 - cell[1] as f64;
                let dx = x as f64 - cell[2] as f64;
                // Truncate at 3 sigma per axis, i.e. at the radius.
                let nz = if radius_zyx[0] > 0.0 { dz / radius_zyx[0] } else { dz.abs() * 2.0 };
                let ny = if radius_zyx[1] > 0.0 { dy / radius_zyx[1] } else { dy.abs() * 2.0 };
                let nx = if radius_zyx[2] > 0.0 { dx / radius_zyx[2] } else { dx.abs() * 2.0 };
                if nz.abs() > 1.0 || ny.abs() > 1.0 || nx.abs() > 1.0 {
                    continue;
                }
                let sig = |r: f64| (r * SIGMA_PER_RADIUS).max(1e-9);
                let e = dz * dz / (2.0 * sig(radius_zyx[0]).powi(2))
                    + dy * dy / (2.0 * sig(radius_zyx[1]).powi(2))
                    + dx * dx / (2.0 * sig(radius_zyx[2]).powi(2));
                let v = sign * (-e).exp();
                let idx = (z * gh + y) * gw + x;
                match positives_only {
                    None => {
                        // Positive pass: elementwise max.
                        if v > buf[idx] {
                            buf[idx] = v;
                        }
                    }
                    Some(mask) => {
                        // Negative pass: min into cells untouched by positives.
                        if !mask[idx] && v < buf[idx] {
                            buf[idx] = v;
                        }
                    }
                }
            }
        }
    }
}

/// Build the target heatmap for a `[1,1,gd,gh,gw]` grid.
pub fn make_heatmap<T: Elem>(
    boxes: &[GroundTruthBox],
    grid_dims: [usize; 3],
    grid: &GridMap,
) -> Result<HeatmapTarget<T>> {
    let [gd, gh, gw] = grid_dims;
    let cells = gd * gh * gw;
    let mut buf = vec![0.0f64; cells];
    let mut touched = vec![false; cells];
    let mut centers = Vec::new();

    let radius_grid = |b: &GroundTruthBox| -> [f64; 3] {
        let e = b.bounds.extent(); // (x, y, z) voxels
        [
            e[2] / 2.0 / grid.stride_xyz[2] as f64,
            e[1] / 2.0 / grid.stride_xyz[1] as f64,
            e[0] / 2.0 / grid.stride_xyz[0] as f64,
        ]
    };
    let center_cell = |b: &GroundTruthBox| -> Result<([f64; 3], [f64; 3], [usize; 3])> {
        let c = b.bounds.center();
        let g = grid.voxel_to_grid(c);
        let cell = [
            g[2].round().clamp(0.0, (gd - 1) as f64) as usize,
            g[1].round().clamp(0.0, (gh - 1) as f64) as usize,
            g[0].round().clamp(0.0, (gw - 1) as f64) as usize,
        ];
        Ok((c, g, cell))
    };

    for b in boxes {
        let e = b.bounds.extent();
        if e.iter().any(|&v| v <= 0.0) {
            return Err(Error::Argument(format!("degenerate ground-truth box {:?}", b.bounds)));
        }
    }

    // Positives first; record which cells they touch.
    for (i, b) in boxes.iter().enumerate().filter(|(_, b)| !b.hard_negative) {
        let (voxel, g, cell) = center_cell(b)?;
        let r = radius_grid(b);
        paint(&mut buf, grid_dims, cell, r, 1.0, None);
        buf[(cell[0] * gh + cell[1]) * gw + cell[2]] = 1.0;
        centers.push(LesionCenter { index: i, voxel, grid: g, cell });
    }
    for (i, v) in buf.iter().enumerate() {
        touched[i] = *v > 0.0;
    }
    // Hard negatives fill untouched cells with negated Gaussians.
    for (_, b) in boxes.iter().enumerate().filter(|(_, b)| b.hard_negative) {
        let (_, _, cell) = center_cell(b)?;
        let r = radius_grid(b);
        paint(&mut buf, grid_dims, cell, r, -1.0, Some(&touched));
    }

    let m = centers.len();
    let data: Vec<T> = buf.into_iter().map(T::from_f64).collect();
    Ok(HeatmapTarget { y: Tensor::from_vec(&[1, 1, gd, gh, gw], data)?, centers, m })
}
