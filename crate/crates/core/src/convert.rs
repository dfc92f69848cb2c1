//! Pseudo-3D conversions of 2-D convolution weights.
//!
//! Four ways to reuse a `(c_o, c_i, N, N)` kernel on volumetric data:
//!
//! - **slicewise**: reshape to `(c_o, c_i, 1, N, N)` and process each axial
//!   slice independently;
//! - **I3D**: duplicate the kernel `K_d` times along depth, downscaling the
//!   values by `K_d`;
//! - **ST3D**: keep the reshaped kernel as a spatial branch and add a fresh
//!   `(c_o, c_i, N, 1, 1)` temporal branch, fused by channel concatenation;
//! - **ACS3D**: partition the output channels into axial `(c_oa, c_i, 1, N, N)`,
//!   coronal `(c_oc, c_i, N, 1, N)` and sagittal `(c_os, c_i, N, N, 1)` groups
//!   with `c_oa + c_oc + c_os = c_o`, adding no parameters.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv3d_output_shape, ConvGeom, Elem, Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum P3dcVariant {
    Slicewise,
    I3d,
    St3d,
    Acs3d,
}

impl P3dcVariant {
    pub fn name(self) -> &'static str {
        match self {
            P3dcVariant::Slicewise => "slicewise",
            P3dcVariant::I3d => "i3d",
            P3dcVariant::St3d => "st3d",
            P3dcVariant::Acs3d => "acs3d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "slicewise" => Ok(P3dcVariant::Slicewise),
            "i3d" => Ok(P3dcVariant::I3d),
            "st3d" => Ok(P3dcVariant::St3d),
            "acs3d" => Ok(P3dcVariant::Acs3d),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected slicewise|i3d|st3d|acs3d)"
            ))),
        }
    }

    pub const ALL: [P3dcVariant; 4] =
        [P3dcVariant::Slicewise, P3dcVariant::I3d, P3dcVariant::St3d, P3dcVariant::Acs3d];
}

impl std::fmt::Display for P3dcVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// How branch outputs combine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fusion {
    None,
    ChannelConcat,
}

/// Pre-trained-style 2-D convolution weights.
#[derive(Debug, Clone)]
pub struct Conv2dWeights<T: Elem> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
}

impl<T: Elem> Conv2dWeights<T> {
    pub fn new(kernel: Tensor<T>, bias: Option<Tensor<T>>) -> Result<Self> {
        let [co, _ci, kh, kw]: [usize; 4] = kernel.shape().try_into().map_err(|_| {
            Error::Dimension(format!("2-D kernel must be [co,ci,N,N], got {:?}", kernel.shape()))
        })?;
        if kh != kw || kh == 0 {
            return Err(Error::Argument(format!("in-plane kernel must be square, got {kh}x{kw}")));
        }
        if let Some(b) = &bias {
            if b.shape() != [co] {
                return Err(Error::Dimension(format!(
                    "bias shape {:?} must be [{co}]",
                    b.shape()
                )));
            }
        }
        Ok(Conv2dWeights { kernel, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }

    pub fn param_count(&self) -> usize {
        self.kernel.len() + self.bias.as_ref().map(|b| b.len()).unwrap_or(0)
    }
}

/// One parallel branch of a converted layer.
#[derive(Debug, Clone)]
pub struct BranchKernel<T: Elem> {
    pub kernel: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub pad: [usize; 3],
}

/// A converted layer: one or more 5-D kernels applied in parallel at
/// stride 1 with branch-specific padding, fused per [`Fusion`].
#[derive(Debug, Clone)]
pub struct P3dcLayer<T: Elem> {
    pub variant: P3dcVariant,
    pub branches: Vec<BranchKernel<T>>,
    pub fusion: Fusion,
}

impl<T: Elem> P3dcLayer<T> {
    /// Total output channels after fusion.
    pub fn out_channels(&self) -> usize {
        self.branches.iter().map(|b| b.kernel.shape()[0]).sum()
    }

    pub fn in_channels(&self) -> usize {
        self.branches[0].kernel.shape()[1]
    }

    pub fn param_count(&self) -> usize {
        self.branches
            .iter()
            .map(|b| b.kernel.len() + b.bias.as_ref().map(|t| t.len()).unwrap_or(0))
            .sum()
    }

    /// Apply to `[N,C,D,H,W]` at stride 1; branch outputs concatenate on the
    /// channel axis (a single branch passes through).
    pub fn apply(&self, tape: &mut Tape<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            outs.push(tape.conv3d(
                input,
                &b.kernel,
                b.bias.as_ref(),
                ConvGeom::new([1, 1, 1], b.pad),
            )?);
        }
        if outs.len() == 1 {
            return Ok(outs.pop().unwrap());
        }
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        tape.concat(&refs, 1)
    }
}

fn same_pad(n: usize) -> Result<usize> {
    if n % 2 == 0 {
        return Err(Error::Argument(format!(
            "kernel size {n} must be odd for symmetric padding"
        )));
    }
    Ok((n - 1) / 2)
}

/// Reshape `(c_o,c_i,N,N)` to `(c_o,c_i,1,N,N)`: slice-by-slice processing.
/// Values are bit-identical to the input; depth stride 1, depth pad 0.
pub fn slicewise_lift<T: Elem>(w: &Conv2dWeights<T>) -> Result<P3dcLayer<T>> {
    let [co, ci, n, _]: [usize; 4] = w.kernel.shape().try_into().unwrap();
    let p = same_pad(n)?;
    Ok(P3dcLayer {
        variant: P3dcVariant::Slicewise,
        branches: vec![BranchKernel {
            kernel: w.kernel.reshape(&[co, ci, 1, n, n])?,
            bias: w.bias.clone(),
            pad: [0, p, p],
        }],
        fusion: Fusion::None,
    })
}

/// Duplicate the 2-D kernel `k_d` times along depth, downscaling by `k_d`
/// so a depth-constant input produces the original 2-D response.
pub fn i3d_inflate<T: Elem>(w: &Conv2dWeights<T>, k_d: usize) -> Result<P3dcLayer<T>> {
    if k_d == 0 || k_d % 2 == 0 {
        return Err(Error::Argument(format!("I3D depth {k_d} must be odd and >= 1")));
    }
    let [co, ci, n, _]: [usize; 4] = w.kernel.shape().try_into().unwrap();
    let p = same_pad(n)?;
    let scale = T::from_f64(1.0 / k_d as f64);
    let plane = n * n;
    let mut data = Vec::with_capacity(co * ci * k_d * plane);
    for cc in 0..co * ci {
        let src = &w.kernel.data()[cc * plane..(cc + 1) * plane];
        for _ in 0..k_d {
            data.extend(src.iter().map(|&v| v * scale));
        }
    }
    Ok(P3dcLayer {
        variant: P3dcVariant::I3d,
        branches: vec![BranchKernel {
            kernel: Tensor::from_vec(&[co, ci, k_d, n, n], data)?,
            bias: w.bias.clone(),
            pad: [(k_d - 1) / 2, p, p],
        }],
        fusion: Fusion::None,
    })
}

/// Spatial branch (bit-identical reshape) plus a freshly initialized
/// `(c_o,c_i,N,1,1)` temporal branch; outputs concatenate to `2*c_o`
/// channels. The temporal kernel starts as a centered depth delta scaled by
/// 0.1 with uniform noise of +-0.01, so initial behavior is near-2D.
pub fn st3d_convert<T: Elem>(w: &Conv2dWeights<T>, rng: &mut impl Rng) -> Result<P3dcLayer<T>> {
    let [co, ci, n, _]: [usize; 4] = w.kernel.shape().try_into().unwrap();
    let p = same_pad(n)?;
    let mut temporal = Vec::with_capacity(co * ci * n);
    let center = (n - 1) / 2;
    for _ in 0..co * ci {
        for d in 0..n {
            let delta = if d == center { 0.1 } else { 0.0 };
            temporal.push(T::from_f64(delta + rng.random_range(-0.01..0.01)));
        }
    }
    Ok(P3dcLayer {
        variant: P3dcVariant::St3d,
        branches: vec![
            BranchKernel {
                kernel: w.kernel.reshape(&[co, ci, 1, n, n])?,
                bias: w.bias.clone(),
                pad: [0, p, p],
            },
            BranchKernel {
                kernel: Tensor::from_vec(&[co, ci, n, 1, 1], temporal)?,
                bias: None,
                pad: [p, 0, 0],
            },
        ],
        fusion: Fusion::ChannelConcat,
    })
}

/// Output-channel split for an ACS3D conversion under an `(r_a, r_c, r_s)`
/// ratio: the coronal and sagittal groups take `max(1, floor(c_o * r / sum))`
/// channels each and the axial group the remainder.
pub fn acs_split(c_o: usize, ratio: (usize, usize, usize)) -> Result<(usize, usize, usize)> {
    if c_o < 3 {
        return Err(Error::Argument(format!(
            "ACS3D needs c_o >= 3 to form three groups, got {c_o}"
        )));
    }
    let total = ratio.0 + ratio.1 + ratio.2;
    if total == 0 {
        return Err(Error::Argument("ACS ratio must not be all zero".into()));
    }
    let c_oc = (c_o * ratio.1 / total).max(1);
    let c_os = (c_o * ratio.2 / total).max(1);
    if c_oc + c_os >= c_o {
        return Err(Error::Argument(format!(
            "ACS split infeasible for c_o={c_o}, ratio {ratio:?}"
        )));
    }
    Ok((c_o - c_oc - c_os, c_oc, c_os))
}

/// Partition output channels into axial/coronal/sagittal groups and reshape
/// each group onto its plane. The weight values are an unpermuted partition
/// of the originals; no parameters are added.
pub fn acs3d_convert<T: Elem>(
    w: &Conv2dWeights<T>,
    ratio: (usize, usize, usize),
) -> Result<P3dcLayer<T>> {
    let [co, ci, n, _]: [usize; 4] = w.kernel.shape().try_into().unwrap();
    let p = same_pad(n)?;
    let (c_oa, c_oc, c_os) = acs_split(co, ratio)?;
    let block = ci * n * n;
    let slice = |from: usize, count: usize| -> Vec<T> {
        w.kernel.data()[from * block..(from + count) * block].to_vec()
    };
    let bias_slice = |from: usize, count: usize| -> Result<Option<Tensor<T>>> {
        Ok(match &w.bias {
            Some(b) => Some(Tensor::from_vec(&[count], b.data()[from..from + count].to_vec())?),
            None => None,
        })
    };
    Ok(P3dcLayer {
        variant: P3dcVariant::Acs3d,
        branches: vec![
            BranchKernel {
                kernel: Tensor::from_vec(&[c_oa, ci, 1, n, n], slice(0, c_oa))?,
                bias: bias_slice(0, c_oa)?,
                pad: [0, p, p],
            },
            BranchKernel {
                kernel: Tensor::from_vec(&[c_oc, ci, n, 1, n], slice(c_oa, c_oc))?,
                bias: bias_slice(c_oa, c_oc)?,
                pad: [p, 0, p],
            },
            BranchKernel {
                kernel: Tensor::from_vec(&[c_os, ci, n, n, 1], slice(c_oa + c_oc, c_os))?,
                bias: bias_slice(c_oa + c_oc, c_os)?,
                pad: [p, p, 0],
            },
        ],
        fusion: Fusion::ChannelConcat,
    })
}

/// Convert per the variant with shared knobs.
pub fn convert<T: Elem>(
    w: &Conv2dWeights<T>,
    variant: P3dcVariant,
    acs_ratio: (usize, usize, usize),
    i3d_depth: usize,
    rng: &mut impl Rng,
) -> Result<P3dcLayer<T>> {
    match variant {
        P3dcVariant::Slicewise => slicewise_lift(w),
        P3dcVariant::I3d => i3d_inflate(w, i3d_depth),
        P3dcVariant::St3d => st3d_convert(w, rng),
        P3dcVariant::Acs3d => acs3d_convert(w, acs_ratio),
    }
}

/// Duplicate input channels for phase-stacked volumes, scaling by
/// `1/phases` so a phase-replicated input reproduces the original
/// activation. Duplication is phase-major: new channel `p*c_i + c` holds
/// the weights of original channel `c`.
pub fn inflate_input_channels<T: Elem>(
    w: &Conv2dWeights<T>,
    phases: usize,
) -> Result<Conv2dWeights<T>> {
    if phases < 1 {
        return Err(Error::Argument("phases must be >= 1".into()));
    }
    if phases == 1 {
        return Ok(w.clone());
    }
    let [co, ci, n, _]: [usize; 4] = w.kernel.shape().try_into().unwrap();
    let scale = T::from_f64(1.0 / phases as f64);
    let row = ci * n * n;
    let mut data = Vec::with_capacity(co * row * phases);
    for c in 0..co {
        let src = &w.kernel.data()[c * row..(c + 1) * row];
        for _ in 0..phases {
            data.extend(src.iter().map(|&v| v * scale));
        }
    }
    Conv2dWeights::new(Tensor::from_vec(&[co, ci * phases, n, n], data)?, w.bias.clone())
}

/// Exact parameter count and analytic FLOPs (multiply-add counted as 2)
/// of a converted layer on a given `[N,C,D,H,W]` input.
pub fn count_params_flops<T: Elem>(
    layer: &P3dcLayer<T>,
    input_shape: &[usize],
) -> Result<(usize, u128)> {
    let mut flops: u128 = 0;
    for b in &layer.branches {
        let oshape = conv3d_output_shape(
            input_shape,
            b.kernel.shape(),
            &ConvGeom::new([1, 1, 1], b.pad),
        )?;
        let out_volume: u128 = oshape.iter().map(|&d| d as u128).product();
        let k = b.kernel.shape();
        let per_output =
            (k[1] * k[2] * k[3] * k[4]) as u128 + if b.bias.is_some() { 1 } else { 0 };
        flops += 2 * per_output * out_volume;
    }
    Ok((layer.param_count(), flops))
}

/// One line of a conversion report.
#[derive(Debug, Clone)]
pub struct LayerReport {
    pub name: String,
    pub variant: P3dcVariant,
    pub params_2d: usize,
    pub params_3d: usize,
    pub flops: u128,
}

/// Structured-text report for the `bench` subcommand: one line per layer.
#[derive(Debug, Clone, Default)]
pub struct ConversionReport {
    pub layers: Vec<LayerReport>,
}

impl ConversionReport {
    pub fn total_params(&self) -> usize {
        self.layers.iter().map(|l| l.params_3d).sum()
    }

    pub fn total_flops(&self) -> u128 {
        self.layers.iter().map(|l| l.flops).sum()
    }
}

impl std::fmt::Display for ConversionReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(
            f,
            "{:<34} {:>9} {:>12} {:>12} {:>16}",
            "layer", "variant", "params_2d", "params_3d", "flops"
        )?;
        for l in &self.layers {
            writeln!(
                f,
                "{:<34} {:>9} {:>12} {:>12} {:>16}",
                l.name, l.variant, l.params_2d, l.params_3d, l.flops
            )?;
        }
        writeln!(
            f,
            "{:<34} {:>9} {:>12} {:>12} {:>16}",
            "total",
            "",
            self.layers.iter().map(|l| l.params_2d).sum::<usize>(),
            self.total_params(),
            self.total_flops()
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_weights(co: usize, ci: usize, n: usize, bias: bool, seed: u64) -> Conv2dWeights<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernel = Tensor::from_vec(
            &[co, ci, n, n],
            (0..co * ci * n * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let bias = bias.then(|| {
            Tensor::from_vec(&[co], (0..co).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
        });
        Conv2dWeights::new(kernel, bias).unwrap()
    }

    fn rand_volume(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Plain 2-D convolution of one axial slice, same padding.
    fn conv2d_slice(
        input: &Tensor<f64>,
        z: usize,
        kernel: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
    ) -> Vec<f64> {
        let [_, ci, _, h, w]: [usize; 5] = input.shape().try_into().unwrap();
        let [co, _, n, _]: [usize; 4] = kernel.shape().try_into().unwrap();
        let p = (n - 1) / 2;
        let mut out = vec![0.0; co * h * w];
        for c_out in 0..co {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias.map(|b| b.data()[c_out]).unwrap_or(0.0);
                    for c_in in 0..ci {
                        for ky in 0..n {
                            for kx in 0..n {
                                let iy = y as i64 + ky as i64 - p as i64;
                                let ix = x as i64 + kx as i64 - p as i64;
                                if iy < 0 || ix < 0 || iy >= h as i64 || ix >= w as i64 {
                                    continue;
                                }
                                acc += input.at(&[0, c_in, z, iy as usize, ix as usize])
                                    * kernel.at(&[c_out, c_in, ky, kx]);
                            }
                        }
                    }
                    out[(c_out * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn slicewise_lift_is_a_pure_reshape() {
        let w = rand_weights(4, 3, 3, true, 1);
        let layer = slicewise_lift(&w).unwrap();
        assert_eq!(layer.branches.len(), 1);
        assert_eq!(layer.fusion, Fusion::None);
        assert_eq!(layer.branches[0].kernel.shape(), &[4, 3, 1, 3, 3]);
        assert_eq!(layer.branches[0].kernel.data(), w.kernel.data());
        assert_eq!(layer.param_count(), w.param_count());
    }

    #[test]
    fn slicewise_apply_equals_per_slice_2d_convolution() {
        let w = rand_weights(2, 3, 3, true, 2);
        let layer = slicewise_lift(&w).unwrap();
        let vol = rand_volume(&[1, 3, 4, 6, 6], 3);
        let mut tape = Tape::inference();
        let out = layer.apply(&mut tape, &vol).unwrap();
        assert_eq!(out.shape(), &[1, 2, 4, 6, 6]);
        for z in 0..4 {
            let want = conv2d_slice(&vol, z, &w.kernel, w.bias.as_ref());
            for c in 0..2 {
                for y in 0..6 {
                    for x in 0..6 {
                        let have = out.at(&[0, c, z, y, x]);
                        let exp = want[(c * 6 + y) * 6 + x];
                        assert!((have - exp).abs() < 1e-12, "{have} vs {exp}");
                    }
                }
            }
        }
    }

    #[test]
    fn i3d_uniform_value_for_all_ones_kernel() {
        let w = Conv2dWeights::new(Tensor::full(&[1, 1, 3, 3], 1.0f64), None).unwrap();
        let layer = i3d_inflate(&w, 3).unwrap();
        assert_eq!(layer.branches[0].kernel.shape(), &[1, 1, 3, 3, 3]);
        for &v in layer.branches[0].kernel.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(layer.branches[0].pad, [1, 1, 1]);
    }

    #[test]
    fn i3d_depth_one_equals_slicewise() {
        let w = rand_weights(3, 2, 3, false, 4);
        let i3d = i3d_inflate(&w, 1).unwrap();
        let sw = slicewise_lift(&w).unwrap();
        assert_eq!(i3d.branches[0].kernel.data(), sw.branches[0].kernel.data());
        assert_eq!(i3d.branches[0].kernel.shape(), sw.branches[0].kernel.shape());
    }

    #[test]
    fn i3d_rejects_even_depth() {
        let w = rand_weights(1, 1, 3, false, 5);
        assert!(i3d_inflate(&w, 2).is_err());
    }

    #[test]
    fn i3d_depth_sum_reconstructs_original_kernel() {
        let w = rand_weights(3, 2, 3, false, 6);
        let layer = i3d_inflate(&w, 3).unwrap();
        let k = &layer.branches[0].kernel;
        for co in 0..3 {
            for ci in 0..2 {
                for y in 0..3 {
                    for x in 0..3 {
                        let sum: f64 = (0..3).map(|d| k.at(&[co, ci, d, y, x])).sum();
                        let orig = w.kernel.at(&[co, ci, y, x]);
                        assert!((sum - orig).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn i3d_on_depth_constant_input_matches_2d_response_in_interior() {
        let w = rand_weights(2, 1, 3, false, 7);
        let layer = i3d_inflate(&w, 3).unwrap();
        // Depth-constant volume: every axial slice identical.
        let slice = rand_volume(&[1, 1, 1, 6, 6], 8);
        let mut vol = Vec::new();
        for _ in 0..5 {
            vol.extend_from_slice(slice.data());
        }
        let vol = Tensor::from_vec(&[1, 1, 5, 6, 6], vol).unwrap();
        let mut tape = Tape::inference();
        let out = layer.apply(&mut tape, &vol).unwrap();
        let want = conv2d_slice(&vol, 2, &w.kernel, None);
        // Interior slices see a full depth window.
        for z in 1..4 {
            for c in 0..2 {
                for y in 0..6 {
                    for x in 0..6 {
                        let have = out.at(&[0, c, z, y, x]);
                        let exp = want[(c * 6 + y) * 6 + x];
                        assert!((have - exp).abs() <= 1e-5, "z={z}: {have} vs {exp}");
                    }
                }
            }
        }
    }

    #[test]
    fn st3d_parameter_count_and_output_channels() {
        let w = rand_weights(4, 3, 3, false, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = st3d_convert(&w, &mut rng).unwrap();
        assert_eq!(layer.branches.len(), 2);
        assert_eq!(layer.fusion, Fusion::ChannelConcat);
        assert_eq!(layer.param_count(), 4 * 3 * 9 + 4 * 3 * 3);
        assert_eq!(layer.out_channels(), 8);
    }

    #[test]
    fn st3d_with_zeroed_temporal_matches_slicewise_on_first_channels() {
        let w = rand_weights(2, 2, 3, true, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut layer = st3d_convert(&w, &mut rng).unwrap();
        layer.branches[1].kernel = Tensor::zeros(layer.branches[1].kernel.shape());
        let vol = rand_volume(&[1, 2, 3, 5, 5], 11);
        let mut tape = Tape::inference();
        let st = layer.apply(&mut tape, &vol).unwrap();
        let sw = slicewise_lift(&w).unwrap().apply(&mut tape, &vol).unwrap();
        assert_eq!(st.shape(), &[1, 4, 3, 5, 5]);
        let vol_elems = 3 * 5 * 5;
        assert_eq!(&st.data()[..2 * vol_elems], sw.data());
        assert!(st.data()[2 * vol_elems..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn acs_split_follows_paper_ratio() {
        assert_eq!(acs_split(80, (8, 1, 1)).unwrap(), (64, 8, 8));
        assert_eq!(acs_split(10, (8, 1, 1)).unwrap(), (8, 1, 1));
        assert_eq!(acs_split(3, (8, 1, 1)).unwrap(), (1, 1, 1));
        assert_eq!(acs_split(256, (8, 1, 1)).unwrap(), (206, 25, 25));
        assert!(acs_split(2, (8, 1, 1)).is_err());
    }

    #[test]
    fn acs3d_preserves_parameters_and_partitions_values() {
        let w = rand_weights(10, 4, 3, true, 12);
        let layer = acs3d_convert(&w, (8, 1, 1)).unwrap();
        assert_eq!(layer.branches.len(), 3);
        assert_eq!(layer.param_count(), w.param_count());
        assert_eq!(layer.out_channels(), 10);
        assert_eq!(layer.branches[0].kernel.shape(), &[8, 4, 1, 3, 3]);
        assert_eq!(layer.branches[1].kernel.shape(), &[1, 4, 3, 1, 3]);
        assert_eq!(layer.branches[2].kernel.shape(), &[1, 4, 3, 3, 1]);
        // Bit-identical partition of the flat weight values.
        let block = 4 * 9;
        assert_eq!(layer.branches[0].kernel.data(), &w.kernel.data()[..8 * block]);
        assert_eq!(layer.branches[1].kernel.data(), &w.kernel.data()[8 * block..9 * block]);
        assert_eq!(layer.branches[2].kernel.data(), &w.kernel.data()[9 * block..]);
    }

    #[test]
    fn acs3d_branches_share_output_geometry() {
        let w = rand_weights(6, 2, 3, false, 13);
        let layer = acs3d_convert(&w, (8, 1, 1)).unwrap();
        let vol = rand_volume(&[1, 2, 4, 5, 5], 14);
        let mut tape = Tape::inference();
        let out = layer.apply(&mut tape, &vol).unwrap();
        assert_eq!(out.shape(), &[1, 6, 4, 5, 5]);
    }

    #[test]
    fn inflate_input_channels_scales_and_duplicates() {
        let w = rand_weights(2, 3, 3, true, 15);
        assert_eq!(inflate_input_channels(&w, 1).unwrap().kernel.data(), w.kernel.data());
        let w3 = inflate_input_channels(&w, 3).unwrap();
        assert_eq!(w3.kernel.shape(), &[2, 9, 3, 3]);
        assert_eq!(w3.param_count(), w.kernel.len() * 3 + 2);

        // Phase-replicated input reproduces the original activation.
        let vol = rand_volume(&[1, 3, 2, 5, 5], 16);
        let mut stacked = Vec::new();
        for _ in 0..3 {
            stacked.extend_from_slice(vol.data());
        }
        let vol3 = Tensor::from_vec(&[1, 9, 2, 5, 5], stacked).unwrap();
        let mut tape = Tape::inference();
        let base = slicewise_lift(&w).unwrap().apply(&mut tape, &vol).unwrap();
        let inflated = slicewise_lift(&w3).unwrap().apply(&mut tape, &vol3).unwrap();
        for (a, b) in base.data().iter().zip(inflated.data()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        assert!(inflate_input_channels(&w, 0).is_err());
    }

    #[test]
    fn param_and_flop_accounting() {
        // 1x1x1 conv, ci=512, co=256, no bias.
        let w = rand_weights(256, 512, 1, false, 17);
        let layer = slicewise_lift(&w).unwrap();
        let (params, flops) = count_params_flops(&layer, &[1, 512, 4, 8, 8]).unwrap();
        assert_eq!(params, 131072);
        assert_eq!(flops, 2 * 512 * (256u128 * 4 * 8 * 8));

        // ACS3D conversion keeps the 2-D parameter count.
        let w = rand_weights(32, 16, 3, true, 18);
        let acs = acs3d_convert(&w, (8, 1, 1)).unwrap();
        let (params, _) = count_params_flops(&acs, &[1, 16, 4, 8, 8]).unwrap();
        assert_eq!(params, w.param_count());
    }
}
