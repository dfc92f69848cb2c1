//! Max pooling over the spatial dims of a `[N,C,D,H,W]` tensor.
//!
//! Used for peak extraction at decode time; carries no gradient.

use rayon::prelude::*;

use super::{Elem, Tensor};
use crate::error::{Error, Result};

/// Local max with the given window/stride/pad (depth, height, width order).
/// Out-of-bounds positions are ignored rather than padded with a value.
pub fn maxpool3d<T: Elem>(
    x: &Tensor<T>,
    window: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
) -> Result<Tensor<T>> {
    let [n, c, d, h, w]: [usize; 5] = x
        .shape()
        .try_into()
        .map_err(|_| Error::Dimension(format!("maxpool3d input must be 5-D, got {:?}", x.shape())))?;
    if window.iter().any(|&k| k == 0) || stride.iter().any(|&s| s == 0) {
        return Err(Error::Argument("maxpool3d window and stride must be >= 1".into()));
    }
    let odim = |dim: usize, k: usize, s: usize, p: usize| -> Result<usize> {
        let padded = dim + 2 * p;
        if k > padded {
            return Err(Error::Geometry(format!("pool window {k} exceeds padded dim {padded}")));
        }
        Ok((padded - k) / s + 1)
    };
    let od = odim(d, window[0], stride[0], pad[0])?;
    let oh = odim(h, window[1], stride[1], pad[1])?;
    let ow = odim(w, window[2], stride[2], pad[2])?;

    let in_vol = d * h * w;
    let out_vol = od * oh * ow;
    let mut out = vec![T::zero(); n * c * out_vol];
    out.par_chunks_mut(out_vol).enumerate().for_each(|(nc, dst)| {
        let src = &x.data()[nc * in_vol..(nc + 1) * in_vol];
        for oz in 0..od {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best: Option<T> = None;
                    for kz in 0..window[0] {
                        let iz = (oz * stride[0] + kz) as i64 - pad[0] as i64;
                        if iz < 0 || iz >= d as i64 {
                            continue;
                        }
                        for ky in 0..window[1] {
                            let iy = (oy * stride[1] + ky) as i64 - pad[1] as i64;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            for kx in 0..window[2] {
                                let ix = (ox * stride[2] + kx) as i64 - pad[2] as i64;
                                if ix < 0 || ix >= w as i64 {
                                    continue;
                                }
                                let v = src[((iz as usize) * h + iy as usize) * w + ix as usize];
                                best = Some(match best {
                                    Some(b) if b >= v => b,
                                    _ => v,
                                });
                            }
                        }
                    }
                    dst[(oz * oh + oy) * ow + ox] = best.expect("window covers >= 1 element");
                }
            }
        }
    });
    Tensor::from_vec(&[n, c, od, oh, ow], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn single_peak_spreads_over_neighborhood() {
        let mut vals = vec![0.0f64; 5 * 5 * 5];
        vals[(2 * 5 + 2) * 5 + 2] = 7.0;
        let x = Tensor::from_vec(&[1, 1, 5, 5, 5], vals).unwrap();
        let y = maxpool3d(&x, [3, 3, 3], [1, 1, 1], [1, 1, 1]).unwrap();
        assert_eq!(y.shape(), x.shape());
        for z in 0..5 {
            for yy in 0..5 {
                for xx in 0..5 {
                    let near = (z as i64 - 2).abs() <= 1
                        && (yy as i64 - 2).abs() <= 1
                        && (xx as i64 - 2).abs() <= 1;
                    assert_eq!(y.at(&[0, 0, z, yy, xx]), if near { 7.0 } else { 0.0 });
                }
            }
        }
    }

    #[test]
    fn constant_field_is_unchanged() {
        let x = Tensor::<f64>::full(&[1, 1, 4, 4, 4], 3.5);
        let y = maxpool3d(&x, [3, 3, 3], [1, 1, 1], [1, 1, 1]).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn random_field_matches_naive_loop() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (d, h, w) = (4usize, 5usize, 6usize);
        let vals: Vec<f64> = (0..d * h * w).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::from_vec(&[1, 1, d, h, w], vals.clone()).unwrap();
        let y = maxpool3d(&x, [3, 3, 3], [1, 1, 1], [1, 1, 1]).unwrap();
        for z in 0..d {
            for yy in 0..h {
                for xx in 0..w {
                    let mut want = f64::NEG_INFINITY;
                    for dz in -1i64..=1 {
                        for dy in -1i64..=1 {
                            for dx in -1i64..=1 {
                                let (az, ay, ax) = (z as i64 + dz, yy as i64 + dy, xx as i64 + dx);
                                if az < 0 || ay < 0 || ax < 0 {
                                    continue;
                                }
                                let (az, ay, ax) = (az as usize, ay as usize, ax as usize);
                                if az >= d || ay >= h || ax >= w {
                                    continue;
                                }
                                want = want.max(vals[(az * h + ay) * w + ax]);
                            }
                        }
                    }
                    assert_eq!(y.at(&[0, 0, z, yy, xx]), want);
                }
            }
        }
    }
}
