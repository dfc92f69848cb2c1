//! Trilinear feature sampling and nearest-neighbor upsampling.


use super::tape::Tape;
use super::{Elem, Tensor};
use crate::error::{Error, Result};

/// One axis of interpolation: clamped base index and fraction, plus whether
/// the raw coordinate was inside the grid (coordinate gradient gate).
#[derive(Clone, Copy)]
struct AxisInterp<T> {
    i0: usize,
    i1: usize,
    t: T,
    inside: bool,
}

fn axis_interp<T: Elem>(x: T, dim: usize) -> AxisInterp<T> {
    let max = T::from_f64((dim - 1) as f64);
    let inside = x >= T::zero() && x <= max;
    let xc = if x < T::zero() {
        T::zero()
    } else if x > max {
        max
    } else {
        x
    };
    if dim == 1 {
        return AxisInterp { i0: 0, i1: 0, t: T::zero(), inside };
    }
    let mut i0 = xc.floor().as_f64() as usize;
    if i0 > dim - 2 {
        i0 = dim - 2;
    }
    let t = xc - T::from_f64(i0 as f64);
    AxisInterp { i0, i1: i0 + 1, t, inside }
}

#[allow(clippy::too_many_arguments)]
fn sample_one<T: Elem>(
    feat: &[T],
    c: usize,
    d: usize,
    h: usize,
    w: usize,
    x: T,
    y: T,
    z: T,
    out: &mut [T],
) -> (AxisInterp<T>, AxisInterp<T>, AxisInterp<T>) {
    let ax = axis_interp(x, w);
    let ay = axis_interp(y, h);
    let az = axis_interp(z, d);
    let one = T::one();
    let vol = d * h * w;
    for ch in 0..c {
        let base = ch * vol;
        let mut acc = T::zero();
        for (zi, wz) in [(az.i0, one - az.t), (az.i1, az.t)] {
            for (yi, wy) in [(ay.i0, one - ay.t), (ay.i1, ay.t)] {
                for (xi, wx) in [(ax.i0, one - ax.t), (ax.i1, ax.t)] {
                    acc = acc + wz * wy * wx * feat[base + (zi * h + yi) * w + xi];
                }
            }
        }
        out[ch] = acc;
    }
    (ax, ay, az)
}

impl<T: Elem> Tape<T> {
    /// Trilinear sampling of `feature [C,D,H,W]` at continuous `(x,y,z)`
    /// coordinates given as a `[K,3]` tensor in feature-grid units
    /// (x indexes W, y indexes H, z indexes D). Coordinates outside the grid
    /// clamp to the border. Returns `[K,C]`; differentiable with respect to
    /// both the feature values and the coordinates.
    pub fn trilinear_sample(
        &mut self,
        feature: &Tensor<T>,
        coords: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let [c, d, h, w]: [usize; 4] = feature
            .shape()
            .try_into()
            .map_err(|_| Error::Dimension(format!("feature must be [C,D,H,W], got {:?}", feature.shape())))?;
        let k = match coords.shape() {
            [k, 3] => *k,
            other => {
                return Err(Error::Dimension(format!("coords must be [K,3], got {other:?}")))
            }
        };
        if k == 0 {
            return Err(Error::Argument("trilinear_sample of empty point list".into()));
        }

        let mut out = vec![T::zero(); k * c];
        for p in 0..k {
            let (x, y, z) =
                (coords.data()[p * 3], coords.data()[p * 3 + 1], coords.data()[p * 3 + 2]);
            sample_one(feature.data(), c, d, h, w, x, y, z, &mut out[p * c..(p + 1) * c]);
        }

        let nodes = self.input_nodes(&[feature, coords])?;
        let need_f = nodes[0].is_some();
        let need_c = nodes[1].is_some();
        let fdata = feature.data_arc();
        let cdata = coords.data_arc();
        let out_len = out.len();
        let node = self.record_checked(
            nodes,
            out_len,
            Box::new(move |gout| {
                let vol = d * h * w;
                let one = T::one();
                let mut gf = if need_f { vec![T::zero(); c * vol] } else { Vec::new() };
                let mut gc = if need_c { vec![T::zero(); 3 * k] } else { Vec::new() };
                for p in 0..k {
                    let (x, y, z) = (cdata[p * 3], cdata[p * 3 + 1], cdata[p * 3 + 2]);
                    let ax = axis_interp(x, w);
                    let ay = axis_interp(y, h);
                    let az = axis_interp(z, d);
                    let g = &gout[p * c..(p + 1) * c];
                    let (mut dx, mut dy, mut dz) = (T::zero(), T::zero(), T::zero());
                    for ch in 0..c {
                        let base = ch * vol;
                        let gch = g[ch];
                        let f = |zi: usize, yi: usize, xi: usize| fdata[base + (zi * h + yi) * w + xi];
                        if need_f {
                            for (zi, wz) in [(az.i0, one - az.t), (az.i1, az.t)] {
                                for (yi, wy) in [(ay.i0, one - ay.t), (ay.i1, ay.t)] {
                                    for (xi, wx) in [(ax.i0, one - ax.t), (ax.i1, ax.t)] {
                                        let idx = base + (zi * h + yi) * w + xi;
                                        gf[idx] = gf[idx] + gch * wz * wy * wx;
                                    }
                                }
                            }
                        }
                        if need_c {
                            // d/dt of the linear blend along each axis.
                            for (zi, wz) in [(az.i0, one - az.t), (az.i1, az.t)] {
                                for (yi, wy) in [(ay.i0, one - ay.t), (ay.i1, ay.t)] {
                                    dx = dx + gch * wz * wy * (f(zi, yi, ax.i1) - f(zi, yi, ax.i0));
                                }
                            }
                            for (zi, wz) in [(az.i0, one - az.t), (az.i1, az.t)] {
                                for (xi, wx) in [(ax.i0, one - ax.t), (ax.i1, ax.t)] {
                                    dy = dy + gch * wz * wx * (f(zi, ay.i1, xi) - f(zi, ay.i0, xi));
                                }
                            }
                            for (yi, wy) in [(ay.i0, one - ay.t), (ay.i1, ay.t)] {
                                for (xi, wx) in [(ax.i0, one - ax.t), (ax.i1, ax.t)] {
                                    dz = dz + gch * wy * wx * (f(az.i1, yi, xi) - f(az.i0, yi, xi));
                                }
                            }
                        }
                    }
                    if need_c {
                        gc[p * 3] = if ax.inside { dx } else { T::zero() };
                        gc[p * 3 + 1] = if ay.inside { dy } else { T::zero() };
                        gc[p * 3 + 2] = if az.inside { dz } else { T::zero() };
                    }
                }
                vec![gf, gc]
            }),
        );
        Ok(Tensor::from_parts(vec![k, c], out, node))
    }

    /// Nearest-neighbor upsampling of `[N,C,D,H,W]` by integer factors.
    pub fn upsample_nearest(
        &mut self,
        x: &Tensor<T>,
        factors: [usize; 3],
    ) -> Result<Tensor<T>> {
        let [n, c, d, h, w]: [usize; 5] = x
            .shape()
            .try_into()
            .map_err(|_| Error::Dimension(format!("upsample input must be 5-D, got {:?}", x.shape())))?;
        let [fd, fh, fw] = factors;
        if fd == 0 || fh == 0 || fw == 0 {
            return Err(Error::Argument("upsample factors must be >= 1".into()));
        }
        let (od, oh, ow) = (d * fd, h * fh, w * fw);
        let mut out = vec![T::zero(); n * c * od * oh * ow];
        let in_vol = d * h * w;
        let out_vol = od * oh * ow;
        for nc in 0..n * c {
            let src = &x.data()[nc * in_vol..(nc + 1) * in_vol];
            let dst = &mut out[nc * out_vol..(nc + 1) * out_vol];
            for oz in 0..od {
                let iz = oz / fd;
                for oy in 0..oh {
                    let iy = oy / fh;
                    let in_row = (iz * h + iy) * w;
                    let out_row = (oz * oh + oy) * ow;
                    for ox in 0..ow {
                        dst[out_row + ox] = src[in_row + ox / fw];
                    }
                }
            }
        }
        let nodes = self.input_nodes(&[x])?;
        let out_len = out.len();
        let node = self.record_checked(
            nodes,
            out_len,
            Box::new(move |gout| {
                let mut g = vec![T::zero(); n * c * in_vol];
                for nc in 0..n * c {
                    let gsrc = &gout[nc * out_vol..(nc + 1) * out_vol];
                    let gdst = &mut g[nc * in_vol..(nc + 1) * in_vol];
                    for oz in 0..od {
                        let iz = oz / fd;
                        for oy in 0..oh {
                            let iy = oy / fh;
                            let in_row = (iz * h + iy) * w;
                            let out_row = (oz * oh + oy) * ow;
                            for ox in 0..ow {
                                let i = in_row + ox / fw;
                                gdst[i] = gdst[i] + gsrc[out_row + ox];
                            }
                        }
                    }
                }
                vec![g]
            }),
        );
        Ok(Tensor::from_parts(vec![n, c, od, oh, ow], out, node))
    }
}

/// Untracked helper: sample at a list of `(x,y,z)` points.
pub fn sample_points<T: Elem>(
    feature: &Tensor<T>,
    points: &[(f64, f64, f64)],
) -> Result<Tensor<T>> {
    if points.is_empty() {
        return Err(Error::Argument("trilinear_sample of empty point list".into()));
    }
    let mut data = Vec::with_capacity(points.len() * 3);
    for &(x, y, z) in points {
        data.push(T::from_f64(x));
        data.push(T::from_f64(y));
        data.push(T::from_f64(z));
    }
    let coords = Tensor::from_vec(&[points.len(), 3], data)?;
    Tape::inference().trilinear_sample(feature, &coords)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn rand_feat(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn lattice_point_returns_exact_feature_value() {
        let feat = rand_feat(&[3, 4, 5, 6], 3);
        let out = sample_points(&feat, &[(2.0, 1.0, 0.0)]).unwrap();
        for ch in 0..3 {
            assert_eq!(out.at(&[0, ch]), feat.at(&[ch, 0, 1, 2]));
        }
    }

    #[test]
    fn midpoint_on_ramp_is_mean_of_neighbors() {
        // Linear ramp along x: f = x.
        let mut vals = vec![0.0; 1 * 2 * 2 * 4];
        for z in 0..2 {
            for y in 0..2 {
                for x in 0..4 {
                    vals[(z * 2 + y) * 4 + x] = x as f64;
                }
            }
        }
        let feat = Tensor::from_vec(&[1, 2, 2, 4], vals).unwrap();
        let out = sample_points(&feat, &[(1.5, 0.0, 0.0)]).unwrap();
        assert!((out.at(&[0, 0]) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn out_of_grid_clamps_to_border() {
        let feat = rand_feat(&[2, 3, 3, 3], 5);
        let out = sample_points(&feat, &[(-4.0, 1.0, 99.0)]).unwrap();
        for ch in 0..2 {
            assert_eq!(out.at(&[0, ch]), feat.at(&[ch, 2, 1, 0]));
        }
    }

    #[test]
    fn empty_point_list_is_an_error() {
        let feat = rand_feat(&[1, 2, 2, 2], 6);
        assert!(sample_points(&feat, &[]).is_err());
    }

    #[test]
    fn matches_dense_upsample_then_nearest_oracle() {
        // Oracle: trilinearly densify the grid 64x per axis by sequential 1-D
        // interpolation, then look values up at exact 1/64 lattice points.
        let f = 64usize;
        let (c, d, h, w) = (2usize, 2usize, 3usize, 3usize);
        let feat = rand_feat(&[c, d, h, w], 11);
        let dd = (d - 1) * f + 1;
        let dh = (h - 1) * f + 1;
        let dw = (w - 1) * f + 1;
        let mut dense = vec![0.0f64; c * dd * dh * dw];
        for ch in 0..c {
            // Interpolate x, then y, then z.
            let mut gx = vec![0.0; d * h * dw];
            for z in 0..d {
                for y in 0..h {
                    for x in 0..dw {
                        let t = x % f;
                        let x0 = x / f;
                        let x1 = (x0 + 1).min(w - 1);
                        let a = feat.at(&[ch, z, y, x0]);
                        let b = feat.at(&[ch, z, y, x1]);
                        gx[(z * h + y) * dw + x] = a + (b - a) * (t as f64 / f as f64);
                    }
                }
            }
            let mut gy = vec![0.0; d * dh * dw];
            for z in 0..d {
                for y in 0..dh {
                    let t = y % f;
                    let y0 = y / f;
                    let y1 = (y0 + 1).min(h - 1);
                    for x in 0..dw {
                        let a = gx[(z * h + y0) * dw + x];
                        let b = gx[(z * h + y1) * dw + x];
                        gy[(z * dh + y) * dw + x] = a + (b - a) * (t as f64 / f as f64);
                    }
                }
            }
            for z in 0..dd {
                let t = z % f;
                let z0 = z / f;
                let z1 = (z0 + 1).min(d - 1);
                for y in 0..dh {
                    for x in 0..dw {
                        let a = gy[(z0 * dh + y) * dw + x];
                        let b = gy[(z1 * dh + y) * dw + x];
                        dense[((ch * dd + z) * dh + y) * dw + x] =
                            a + (b - a) * (t as f64 / f as f64);
                    }
                }
            }
        }

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let points: Vec<(f64, f64, f64)> = (0..40)
            .map(|_| {
                (
                    rng.random_range(0..dw) as f64 / f as f64,
                    rng.random_range(0..dh) as f64 / f as f64,
                    rng.random_range(0..dd) as f64 / f as f64,
                )
            })
            .collect();
        let got = sample_points(&feat, &points).unwrap();
        for (p, &(x, y, z)) in points.iter().enumerate() {
            for ch in 0..c {
                let xi = (x * f as f64).round() as usize;
                let yi = (y * f as f64).round() as usize;
                let zi = (z * f as f64).round() as usize;
                let want = dense[((ch * dd + zi) * dh + yi) * dw + xi];
                let have = got.at(&[p, ch]);
                assert!(
                    (have - want).abs() <= 1e-4 * want.abs().max(1.0),
                    "point {p} ch {ch}: {have} vs {want}"
                );
            }
        }
    }

    #[test]
    fn upsample_nearest_repeats_blocks() {
        let x = Tensor::from_vec(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::<f64>::inference();
        let y = tape.upsample_nearest(&x, [2, 2, 2]).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4, 4]);
        assert_eq!(y.at(&[0, 0, 1, 0, 1]), 1.0);
        assert_eq!(y.at(&[0, 0, 0, 3, 3]), 4.0);
    }
}
