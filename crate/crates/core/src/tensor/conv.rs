//! 3-D cross-correlation with stride and zero padding.
//!
//! Handles the asymmetric kernels the pseudo-3D conversions produce
//! ((1,N,N), (N,1,N), (N,N,1), (N,1,1)) as ordinary 5-D kernels.
//! Parallelism splits disjoint output regions; each output element is
//! accumulated sequentially so results are bit-stable.

use rayon::prelude::*;

use super::tape::Tape;
use super::{Elem, Tensor};
use crate::error::{Error, Result};

/// Stride and padding in (depth, height, width) order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    pub fn new(stride: [usize; 3], pad: [usize; 3]) -> Self {
        ConvGeom { stride, pad }
    }

    pub fn unit() -> Self {
        ConvGeom { stride: [1, 1, 1], pad: [0, 0, 0] }
    }

    /// Symmetric "same" padding for an odd kernel at stride 1.
    pub fn same(kshape: [usize; 3]) -> Self {
        ConvGeom {
            stride: [1, 1, 1],
            pad: [(kshape[0] - 1) / 2, (kshape[1] - 1) / 2, (kshape[2] - 1) / 2],
        }
    }
}

/// Output spatial size of one axis: floor((dim + 2p - k)/s) + 1.
fn out_dim(dim: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s == 0 {
        return Err(Error::Argument("stride must be >= 1".into()));
    }
    let padded = dim + 2 * p;
    if k == 0 || k > padded {
        return Err(Error::Geometry(format!(
            "kernel size {k} exceeds padded input {padded}"
        )));
    }
    Ok((padded - k) / s + 1)
}

/// Full output shape for input `[N,C,D,H,W]` and kernel `[Co,Ci,Kd,Kh,Kw]`.
pub fn conv3d_output_shape(
    ishape: &[usize],
    kshape: &[usize],
    geom: &ConvGeom,
) -> Result<[usize; 5]> {
    let [n, c, d, h, w]: [usize; 5] = ishape
        .try_into()
        .map_err(|_| Error::Dimension(format!("conv3d input must be 5-D, got {ishape:?}")))?;
    let [co, ci, kd, kh, kw]: [usize; 5] = kshape
        .try_into()
        .map_err(|_| Error::Dimension(format!("conv3d kernel must be 5-D, got {kshape:?}")))?;
    if ci != c {
        return Err(Error::Dimension(format!(
            "kernel expects {ci} input channels, input has {c}"
        )));
    }
    let od = out_dim(d, kd, geom.stride[0], geom.pad[0])?;
    let oh = out_dim(h, kh, geom.stride[1], geom.pad[1])?;
    let ow = out_dim(w, kw, geom.stride[2], geom.pad[2])?;
    Ok([n, co, od, oh, ow])
}

/// Valid output index range along one axis for a fixed kernel offset:
/// all `o` with `o*s + k - p` inside `[0, dim)`.
#[inline]
fn out_range(k: usize, p: usize, s: usize, dim: usize, odim: usize) -> (usize, usize) {
    let k = k as i64;
    let p = p as i64;
    let s = s as i64;
    let lo = if p > k { (p - k + s - 1) / s } else { 0 };
    let top = dim as i64 - 1 + p - k;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top / s + 1).min(odim as i64);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

pub(crate) fn conv3d_forward<T: Elem>(
    input: &[T],
    ishape: [usize; 5],
    kernel: &[T],
    kshape: [usize; 5],
    bias: Option<&[T]>,
    geom: &ConvGeom,
    oshape: [usize; 5],
) -> Vec<T> {
    let [n, ci, d, h, w] = ishape;
    let [co, _, kd, kh, kw] = kshape;
    let [_, _, od, oh, ow] = oshape;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;

    let mut out = vec![T::zero(); n * co * out_vol];
    out.par_chunks_mut(out_vol).enumerate().for_each(|(chunk, out_c)| {
        let b = chunk / co;
        let c_out = chunk % co;
        if let Some(bias) = bias {
            out_c.fill(bias[c_out]);
        }
        for c_in in 0..ci {
            let in_c = &input[(b * ci + c_in) * in_vol..(b * ci + c_in + 1) * in_vol];
            for zk in 0..kd {
                let (od_lo, od_hi) = out_range(zk, pd, sd, d, od);
                for yk in 0..kh {
                    let (oh_lo, oh_hi) = out_range(yk, ph, sh, h, oh);
                    for xk in 0..kw {
                        let (ow_lo, ow_hi) = out_range(xk, pw, sw, w, ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let kv = kernel[(((c_out * ci + c_in) * kd + zk) * kh + yk) * kw + xk];
                        for oz in od_lo..od_hi {
                            let iz = oz * sd + zk - pd;
                            for oy in oh_lo..oh_hi {
                                let iy = oy * sh + yk - ph;
                                let row_in = iz * h * w + iy * w;
                                let row_out = oz * oh * ow + oy * ow;
                                if sw == 1 {
                                    let iw0 = row_in + ow_lo + xk - pw;
                                    let cnt = ow_hi - ow_lo;
                                    for (o, &x) in out_c[row_out + ow_lo..row_out + ow_hi]
                                        .iter_mut()
                                        .zip(&in_c[iw0..iw0 + cnt])
                                    {
                                        *o = *o + kv * x;
                                    }
                                } else {
                                    for ox in ow_lo..ow_hi {
                                        let ix = ox * sw + xk - pw;
                                        out_c[row_out + ox] =
                                            out_c[row_out + ox] + kv * in_c[row_in + ix];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

pub(crate) fn conv3d_backward_input<T: Elem>(
    gout: &[T],
    kernel: &[T],
    ishape: [usize; 5],
    kshape: [usize; 5],
    geom: &ConvGeom,
    oshape: [usize; 5],
) -> Vec<T> {
    let [n, ci, d, h, w] = ishape;
    let [co, _, kd, kh, kw] = kshape;
    let [_, _, od, oh, ow] = oshape;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;

    let mut gin = vec![T::zero(); n * ci * in_vol];
    gin.par_chunks_mut(in_vol).enumerate().for_each(|(chunk, gin_c)| {
        let b = chunk / ci;
        let c_in = chunk % ci;
        for c_out in 0..co {
            let g_c = &gout[(b * co + c_out) * out_vol..(b * co + c_out + 1) * out_vol];
            for zk in 0..kd {
                let (od_lo, od_hi) = out_range(zk, pd, sd, d, od);
                for yk in 0..kh {
                    let (oh_lo, oh_hi) = out_range(yk, ph, sh, h, oh);
                    for xk in 0..kw {
                        let (ow_lo, ow_hi) = out_range(xk, pw, sw, w, ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let kv = kernel[(((c_out * ci + c_in) * kd + zk) * kh + yk) * kw + xk];
                        for oz in od_lo..od_hi {
                            let iz = oz * sd + zk - pd;
                            for oy in oh_lo..oh_hi {
                                let iy = oy * sh + yk - ph;
                                let row_in = iz * h * w + iy * w;
                                let row_out = oz * oh * ow + oy * ow;
                                if sw == 1 {
                                    let iw0 = row_in + ow_lo + xk - pw;
                                    let cnt = ow_hi - ow_lo;
                                    for (gi, &g) in gin_c[iw0..iw0 + cnt]
                                        .iter_mut()
                                        .zip(&g_c[row_out + ow_lo..row_out + ow_hi])
                                    {
                                        *gi = *gi + kv * g;
                                    }
                                } else {
                                    for ox in ow_lo..ow_hi {
                                        let ix = ox * sw + xk - pw;
                                        gin_c[row_in + ix] =
                                            gin_c[row_in + ix] + kv * g_c[row_out + ox];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    gin
}

pub(crate) fn conv3d_backward_kernel<T: Elem>(
    gout: &[T],
    input: &[T],
    ishape: [usize; 5],
    kshape: [usize; 5],
    geom: &ConvGeom,
    oshape: [usize; 5],
) -> Vec<T> {
    let [n, ci, d, h, w] = ishape;
    let [co, _, kd, kh, kw] = kshape;
    let [_, _, od, oh, ow] = oshape;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.pad;
    let in_vol = d * h * w;
    let out_vol = od * oh * ow;
    let k_per_co = ci * kd * kh * kw;

    let mut gk = vec![T::zero(); co * k_per_co];
    gk.par_chunks_mut(k_per_co).enumerate().for_each(|(c_out, gk_c)| {
        for c_in in 0..ci {
            for zk in 0..kd {
                let (od_lo, od_hi) = out_range(zk, pd, sd, d, od);
                for yk in 0..kh {
                    let (oh_lo, oh_hi) = out_range(yk, ph, sh, h, oh);
                    for xk in 0..kw {
                        let (ow_lo, ow_hi) = out_range(xk, pw, sw, w, ow);
                        if ow_lo >= ow_hi {
                            continue;
                        }
                        let mut acc = T::zero();
                        for b in 0..n {
                            let g_c = &gout[(b * co + c_out) * out_vol..];
                            let in_c = &input[(b * ci + c_in) * in_vol..];
                            for oz in od_lo..od_hi {
                                let iz = oz * sd + zk - pd;
                                for oy in oh_lo..oh_hi {
                                    let iy = oy * sh + yk - ph;
                                    let row_in = iz * h * w + iy * w;
                                    let row_out = oz * oh * ow + oy * ow;
                                    if sw == 1 {
                                        let iw0 = row_in + ow_lo + xk - pw;
                                        let cnt = ow_hi - ow_lo;
                                        for (&g, &x) in g_c[row_out + ow_lo..row_out + ow_hi]
                                            .iter()
                                            .zip(&in_c[iw0..iw0 + cnt])
                                        {
                                            acc = acc + g * x;
                                        }
                                    } else {
                                        for ox in ow_lo..ow_hi {
                                            let ix = ox * sw + xk - pw;
                                            acc = acc + g_c[row_out + ox] * in_c[row_in + ix];
                                        }
                                    }
                                }
                            }
                        }
                        gk_c[((c_in * kd + zk) * kh + yk) * kw + xk] = acc;
                    }
                }
            }
        }
    });
    gk
}

impl<T: Elem> Tape<T> {
    /// Cross-correlation of `input [N,C,D,H,W]` with `kernel [Co,C,Kd,Kh,Kw]`
    /// plus optional per-channel bias. Differentiable w.r.t. all three.
    pub fn conv3d(
        &mut self,
        input: &Tensor<T>,
        kernel: &Tensor<T>,
        bias: Option<&Tensor<T>>,
        geom: ConvGeom,
    ) -> Result<Tensor<T>> {
        let oshape5 = conv3d_output_shape(input.shape(), kernel.shape(), &geom)?;
        let ishape: [usize; 5] = input.shape().try_into().unwrap();
        let kshape: [usize; 5] = kernel.shape().try_into().unwrap();
        if let Some(b) = bias {
            if b.shape() != [kshape[0]] {
                return Err(Error::Dimension(format!(
                    "bias shape {:?} must be [{}]",
                    b.shape(),
                    kshape[0]
                )));
            }
        }
        let out = conv3d_forward(
            input.data(),
            ishape,
            kernel.data(),
            kshape,
            bias.map(|b| b.data()),
            &geom,
            oshape5,
        );

        let mut ins: Vec<&Tensor<T>> = vec![input, kernel];
        if let Some(b) = bias {
            ins.push(b);
        }
        let nodes = self.input_nodes(&ins)?;
        let need_in = nodes[0].is_some();
        let need_k = nodes[1].is_some();
        let need_b = nodes.get(2).map(|n| n.is_some()).unwrap_or(false);
        let has_bias = bias.is_some();
        let in_data = input.data_arc();
        let k_data = kernel.data_arc();
        let out_len = out.len();
        let node = self.record_checked(
            nodes,
            out_len,
            Box::new(move |gout| {
                let gin = if need_in {
                    conv3d_backward_input(gout, &k_data, ishape, kshape, &geom, oshape5)
                } else {
                    Vec::new()
                };
                let gk = if need_k {
                    conv3d_backward_kernel(gout, &in_data, ishape, kshape, &geom, oshape5)
                } else {
                    Vec::new()
                };
                let mut grads = vec![gin, gk];
                if has_bias {
                    let gb = if need_b {
                        let [n, co, od, oh, ow] = oshape5;
                        let vol = od * oh * ow;
                        let mut gb = vec![T::zero(); co];
                        for b in 0..n {
                            for c in 0..co {
                                let s = &gout[(b * co + c) * vol..(b * co + c + 1) * vol];
                                let mut acc = T::zero();
                                for &v in s {
                                    acc = acc + v;
                                }
                                gb[c] = gb[c] + acc;
                            }
                        }
                        gb
                    } else {
                        Vec::new()
                    };
                    grads.push(gb);
                }
                grads
            }),
        );
        Ok(Tensor::from_parts(oshape5.to_vec(), out, node))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Naive 7-nested-loop oracle, kept deliberately independent of the
    /// production kernels.
    pub(crate) fn conv3d_naive(
        input: &Tensor<f64>,
        kernel: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        geom: &ConvGeom,
    ) -> Tensor<f64> {
        let [n, ci, d, h, w]: [usize; 5] = input.shape().try_into().unwrap();
        let [co, _, kd, kh, kw]: [usize; 5] = kernel.shape().try_into().unwrap();
        let oshape = conv3d_output_shape(input.shape(), kernel.shape(), geom).unwrap();
        let [_, _, od, oh, ow] = oshape;
        let mut out = vec![0.0; n * co * od * oh * ow];
        for b in 0..n {
            for c_out in 0..co {
                for oz in 0..od {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = bias.map(|bb| bb.data()[c_out]).unwrap_or(0.0);
                            for c_in in 0..ci {
                                for zk in 0..kd {
                                    for yk in 0..kh {
                                        for xk in 0..kw {
                                            let iz = (oz * geom.stride[0] + zk) as i64
                                                - geom.pad[0] as i64;
                                            let iy = (oy * geom.stride[1] + yk) as i64
                                                - geom.pad[1] as i64;
                                            let ix = (ox * geom.stride[2] + xk) as i64
                                                - geom.pad[2] as i64;
                                            if iz < 0
                                                || iy < 0
                                                || ix < 0
                                                || iz >= d as i64
                                                || iy >= h as i64
                                                || ix >= w as i64
                                            {
                                                continue;
                                            }
                                            let iv = input.data()[(((b * ci + c_in) * d
                                                + iz as usize)
                                                * h
                                                + iy as usize)
                                                * w
                                                + ix as usize];
                                            let kv = kernel.data()[(((c_out * ci + c_in) * kd
                                                + zk)
                                                * kh
                                                + yk)
                                                * kw
                                                + xk];
                                            acc += iv * kv;
                                        }
                                    }
                                }
                            }
                            out[(((b * co + c_out) * od + oz) * oh + oy) * ow + ox] = acc;
                        }
                    }
                }
            }
        }
        Tensor::from_vec(&oshape, out).unwrap()
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(&shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut tape = Tape::<f64>::inference();
        let x = rand_tensor(&[1, 1, 3, 3, 3], 1);
        let k = Tensor::from_vec(&[1, 1, 1, 1, 1], vec![1.0]).unwrap();
        let y = tape.conv3d(&x, &k, None, ConvGeom::unit()).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn all_ones_planar_kernel_counts_neighbors() {
        let mut tape = Tape::<f64>::inference();
        let x = Tensor::full(&[1, 1, 3, 5, 5], 1.0);
        let k = Tensor::full(&[1, 1, 1, 3, 3], 1.0);
        let y = tape.conv3d(&x, &k, None, ConvGeom::unit()).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    #[test]
    fn matches_naive_oracle_on_random_case() {
        let x = rand_tensor(&[1, 2, 4, 6, 6], 7);
        let k = rand_tensor(&[3, 2, 3, 3, 3], 8);
        let b = rand_tensor(&[3], 9);
        let geom = ConvGeom::new([1, 1, 1], [1, 0, 1]);
        let mut tape = Tape::<f64>::inference();
        let y = tape.conv3d(&x, &k, Some(&b), geom).unwrap();
        let want = conv3d_naive(&x, &k, Some(&b), &geom);
        assert_eq!(y.shape(), want.shape());
        for (a, e) in y.data().iter().zip(want.data()) {
            assert!((a - e).abs() <= 1e-6 * e.abs().max(1.0), "{a} vs {e}");
        }
    }

    #[test]
    fn matches_naive_oracle_across_strides_and_pads() {
        let mut case = 0u64;
        for &stride in &[[1, 1, 1], [1, 2, 2], [2, 2, 2], [2, 1, 1]] {
            for &pad in &[[0, 0, 0], [1, 1, 1], [0, 1, 1]] {
                for &kshape in &[[2usize, 3, 1, 3, 3], [2, 3, 3, 1, 1], [2, 3, 3, 3, 3]] {
                    case += 1;
                    let x = rand_tensor(&[2, 3, 5, 7, 7], 100 + case);
                    let k = rand_tensor(&kshape, 200 + case);
                    let geom = ConvGeom::new(stride, pad);
                    let mut tape = Tape::<f64>::inference();
                    let y = tape.conv3d(&x, &k, None, geom).unwrap();
                    let want = conv3d_naive(&x, &k, None, &geom);
                    for (a, e) in y.data().iter().zip(want.data()) {
                        assert!((a - e).abs() <= 1e-9 * e.abs().max(1.0));
                    }
                }
            }
        }
    }

    #[test]
    fn zero_size_output_is_geometry_error() {
        let mut tape = Tape::<f64>::inference();
        let x = Tensor::full(&[1, 1, 2, 2, 2], 1.0);
        let k = Tensor::full(&[1, 1, 3, 3, 3], 1.0);
        assert!(matches!(
            tape.conv3d(&x, &k, None, ConvGeom::unit()),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut tape = Tape::<f64>::inference();
        let x = Tensor::full(&[1, 2, 3, 3, 3], 1.0);
        let k = Tensor::full(&[1, 3, 1, 1, 1], 1.0);
        assert!(matches!(
            tape.conv3d(&x, &k, None, ConvGeom::unit()),
            Err(Error::Dimension(_))
        ));
    }
}
