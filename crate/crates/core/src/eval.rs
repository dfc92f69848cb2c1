//! Decoding head outputs into scored boxes and FROC evaluation.
//!
//! Decode: sigmoid heatmap -> 3x3x3 local-maximum peaks -> top-k above a
//! score floor -> surface point set (or direct extents) -> voxel box.
//! Matching: greedy one-to-one against ground truth at IoU > 0.3.
//! FROC: sensitivity against false positives per volume, read as a step
//! function at the eight operating points.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::boxes::{iou3d, Box3D, GridMap};
use crate::error::{Error, Result};
use crate::net::{gather_point_set, DetectorOutputs};
use crate::tensor::{maxpool3d, Elem, Tape, Tensor};

/// The paper's FROC operating points (false positives per volume).
pub const FP_POINTS: [f64; 8] = [0.25, 0.50, 0.75, 1.00, 1.25, 1.50, 1.75, 2.00];
/// Match threshold on 3D-IoU.
pub const IOU_THRESHOLD: f64 = 0.3;

/// Smallest decoded box extent, in voxels, so boxes stay valid even when a
/// point set collapses.
const MIN_EXTENT_VOXELS: f64 = 0.5;

#[derive(Debug, Clone)]
pub struct Detection {
    pub volume: String,
    pub score: f64,
    pub bounds: Box3D,
    /// Box in mm when the volume spacing is known.
    pub bounds_mm: Option<Box3D>,
}

/// A second detection overlapping an already-matched ground truth either
/// counts as a false positive (stricter, default) or is ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DoubleMatchPolicy {
    CountFp,
    Ignore,
}

impl DoubleMatchPolicy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fp" => Ok(DoubleMatchPolicy::CountFp),
            "ignore" => Ok(DoubleMatchPolicy::Ignore),
            other => Err(Error::Config(format!(
                "unknown double-match policy '{other}' (expected fp|ignore)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DecodeParams {
    pub top_k: usize,
    pub score_min: f64,
}

impl Default for DecodeParams {
    fn default() -> Self {
        DecodeParams { top_k: 50, score_min: 0.05 }
    }
}

/// Scored peaks of a heatmap: 3x3x3 local maxima above the floor, sorted by
/// descending score (ties by scan order), truncated to `top_k`.
/// Returned cells are (z, y, x) grid indices.
pub fn heatmap_peaks<T: Elem>(
    scores: &Tensor<T>,
    params: &DecodeParams,
) -> Result<Vec<(f64, [usize; 3])>> {
    let [_, _, gd, gh, gw]: [usize; 5] = scores
        .shape()
        .try_into()
        .map_err(|_| Error::Dimension(format!("heatmap must be 5-D, got {:?}", scores.shape())))?;
    let pooled = maxpool3d(scores, [3, 3, 3], [1, 1, 1], [1, 1, 1])?;
    let mut peaks = Vec::new();
    for z in 0..gd {
        for y in 0..gh {
            for x in 0..gw {
                let v = scores.at(&[0, 0, z, y, x]).as_f64();
                if v >= params.score_min && v == pooled.at(&[0, 0, z, y, x]).as_f64() {
                    peaks.push((v, [z, y, x]));
                }
            }
        }
    }
    peaks.sort_by(|a, b| b.0.total_cmp(&a.0));
    peaks.truncate(params.top_k);
    Ok(peaks)
}

/// Decode one volume's outputs into scored voxel boxes.
pub fn decode<T: Elem>(
    tape: &mut Tape<T>,
    outputs: &DetectorOutputs<T>,
    grid: &GridMap,
    params: &DecodeParams,
) -> Result<Vec<(f64, Box3D)>> {
    let scores = tape.sigmoid(&outputs.heatmap);
    let peaks = heatmap_peaks(&scores, params)?;
    let mut dets = Vec::with_capacity(peaks.len());
    for (score, [z, y, x]) in peaks {
        let center = [x as f64, y as f64, z as f64];
        let bounds = if outputs.point_offsets.is_some() {
            let ps = gather_point_set(tape, outputs, center)?;
            let min_g = [
                ps.min_xyz[0].item()?.as_f64(),
                ps.min_xyz[1].item()?.as_f64(),
                ps.min_xyz[2].item()?.as_f64(),
            ];
            let max_g = [
                ps.max_xyz[0].item()?.as_f64(),
                ps.max_xyz[1].item()?.as_f64(),
                ps.max_xyz[2].item()?.as_f64(),
            ];
            box_from_voxel_corners(grid.grid_to_voxel(min_g), grid.grid_to_voxel(max_g))
        } else {
            let sizes = outputs.sizes.as_ref().expect("direct head carries sizes");
            let [_, _, gd, gh, gw]: [usize; 5] = sizes.shape().try_into().unwrap();
            let map = sizes.reshape(&[3, gd, gh, gw])?;
            let coords = Tensor::from_vec(
                &[1, 3],
                center.iter().map(|&c| T::from_f64(c)).collect(),
            )?;
            let ext = tape.trilinear_sample(&map, &coords)?;
            let center_vox = grid.grid_to_voxel(center);
            let mut min_v = [0.0; 3];
            let mut max_v = [0.0; 3];
            for a in 0..3 {
                let half = ext.data()[a].as_f64().max(0.0) * grid.stride_xyz[a] as f64 / 2.0;
                min_v[a] = center_vox[a] - half;
                max_v[a] = center_vox[a] + half;
            }
            box_from_voxel_corners(min_v, max_v)
        };
        dets.push((score, bounds));
    }
    Ok(dets)
}

/// Valid box from possibly-degenerate corners: pads each axis to the
/// minimum extent around its midpoint.
fn box_from_voxel_corners(min_v: [f64; 3], max_v: [f64; 3]) -> Box3D {
    let mut min_out = [0.0; 3];
    let mut max_out = [0.0; 3];
    for a in 0..3 {
        let (lo, hi) = (min_v[a].min(max_v[a]), min_v[a].max(max_v[a]));
        if hi - lo < MIN_EXTENT_VOXELS {
            let mid = 0.5 * (lo + hi);
            min_out[a] = mid - MIN_EXTENT_VOXELS / 2.0;
            max_out[a] = mid + MIN_EXTENT_VOXELS / 2.0;
        } else {
            min_out[a] = lo;
            max_out[a] = hi;
        }
    }
    Box3D { min: min_out, max: max_out }
}

#[derive(Debug, Clone, Default)]
pub struct MatchOutcome {
    /// Per detection, in input order: matched a previously unmatched gt.
    pub tp: Vec<bool>,
    pub fp_count: usize,
    /// Per gt: index of the detection that matched it.
    pub matched_gt: Vec<Option<usize>>,
}

/// Greedy one-to-one matching. Detections must arrive sorted by descending
/// score (ties already resolved by insertion order); each matches the
/// highest-IoU unmatched gt exceeding the threshold.
pub fn match_volume(
    dets: &[(f64, Box3D)],
    gts: &[Box3D],
    iou_thr: f64,
    policy: DoubleMatchPolicy,
) -> MatchOutcome {
    let mut out = MatchOutcome {
        tp: Vec::with_capacity(dets.len()),
        fp_count: 0,
        matched_gt: vec![None; gts.len()],
    };
    for (di, (_, dbox)) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        let mut best_any: f64 = 0.0;
        for (gi, gbox) in gts.iter().enumerate() {
            let v = iou3d(dbox, gbox);
            best_any = best_any.max(v);
            if v > iou_thr && out.matched_gt[gi].is_none() {
                if best.map(|(_, b)| v > b).unwrap_or(true) {
                    best = Some((gi, v));
                }
            }
        }
        match best {
            Some((gi, _)) => {
                out.matched_gt[gi] = Some(di);
                out.tp.push(true);
            }
            None => {
                out.tp.push(false);
                let double = best_any > iou_thr; // overlapped an already-matched gt
                if !(double && policy == DoubleMatchPolicy::Ignore) {
                    out.fp_count += 1;
                }
            }
        }
    }
    out
}

/// Ground truth for one volume, with physical size for stratification.
#[derive(Debug, Clone)]
pub struct GtBox {
    pub bounds: Box3D,
    pub size_mm: f64,
}

/// Per-volume inputs to FROC evaluation.
#[derive(Debug, Clone, Default)]
pub struct VolumeEval {
    pub id: String,
    /// Scored detections, any order.
    pub detections: Vec<(f64, Box3D)>,
    pub gts: Vec<GtBox>,
}

#[derive(Debug, Clone)]
pub struct FrocCurve {
    /// (fp per volume operating point, sensitivity).
    pub points: Vec<(f64, f64)>,
    pub average: f64,
}

/// One step of the global score sweep.
struct SweepPoint {
    fp_per_volume: f64,
    sensitivity: f64,
    /// Matched flags per (volume, gt) at this prefix.
    prefix_len: usize,
}

struct Sweep {
    points: Vec<SweepPoint>,
    /// Global detection order: (volume index, detection index).
    order: Vec<(usize, usize)>,
    total_gts: usize,
}

/// Process all detections in descending score order, maintaining greedy
/// per-volume matching, and record (FP/volume, sensitivity) after each.
fn sweep(volumes: &[VolumeEval], iou_thr: f64, policy: DoubleMatchPolicy) -> Result<Sweep> {
    let total_gts: usize = volumes.iter().map(|v| v.gts.len()).sum();
    if volumes.is_empty() {
        return Err(Error::Eval("no volumes to evaluate".into()));
    }
    if total_gts == 0 {
        return Err(Error::Eval("no ground-truth lesions in the evaluation set".into()));
    }
    let mut order: Vec<(usize, usize)> = volumes
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| (0..v.detections.len()).map(move |di| (vi, di)))
        .collect();
    order.sort_by(|a, b| {
        volumes[b.0].detections[b.1].0.total_cmp(&volumes[a.0].detections[a.1].0)
    });

    let mut matched: Vec<Vec<bool>> = volumes.iter().map(|v| vec![false; v.gts.len()]).collect();
    let mut tp_total = 0usize;
    let mut fp_total = 0usize;
    let n_vol = volumes.len() as f64;
    let mut points = Vec::with_capacity(order.len() + 1);
    points.push(SweepPoint { fp_per_volume: 0.0, sensitivity: 0.0, prefix_len: 0 });
    for (k, &(vi, di)) in order.iter().enumerate() {
        let v = &volumes[vi];
        let dbox = &v.detections[di].1;
        let mut best: Option<(usize, f64)> = None;
        let mut best_any = 0.0f64;
        for (gi, g) in v.gts.iter().enumerate() {
            let ov = iou3d(dbox, &g.bounds);
            best_any = best_any.max(ov);
            if ov > iou_thr && !matched[vi][gi] && best.map(|(_, b)| ov > b).unwrap_or(true) {
                best = Some((gi, ov));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[vi][gi] = true;
                tp_total += 1;
            }
            None => {
                let double = best_any > iou_thr;
                if !(double && policy == DoubleMatchPolicy::Ignore) {
                    fp_total += 1;
                }
            }
        }
        points.push(SweepPoint {
            fp_per_volume: fp_total as f64 / n_vol,
            sensitivity: tp_total as f64 / total_gts as f64,
            prefix_len: k + 1,
        });
    }
    Ok(Sweep { points, order, total_gts })
}

/// FROC curve at the given operating points: the sensitivity at allowance
/// `f` is the maximum sensitivity over sweep prefixes with FP/volume <= f.
pub fn froc(
    volumes: &[VolumeEval],
    fp_points: &[f64],
    iou_thr: f64,
    policy: DoubleMatchPolicy,
) -> Result<FrocCurve> {
    let sw = sweep(volumes, iou_thr, policy)?;
    let mut points = Vec::with_capacity(fp_points.len());
    for &f in fp_points {
        let sens = sw
            .points
            .iter()
            .filter(|p| p.fp_per_volume <= f)
            .map(|p| p.sensitivity)
            .fold(0.0, f64::max);
        points.push((f, sens));
    }
    let average = points.iter().map(|p| p.1).sum::<f64>() / points.len().max(1) as f64;
    Ok(FrocCurve { points, average })
}

#[derive(Debug, Clone)]
pub struct SizeBucket {
    pub label: String,
    pub gt_count: usize,
    /// None when the bucket holds no lesions (undefined, not zero).
    pub sensitivity: Option<f64>,
}

/// Sensitivity per size bucket at the operating threshold that keeps global
/// FP/volume at or under `fp_point`. Detections keep their global FP status;
/// only the ground truths are bucketed.
pub fn size_stratified(
    volumes: &[VolumeEval],
    cutoffs_mm: &[f64],
    fp_point: f64,
    iou_thr: f64,
    policy: DoubleMatchPolicy,
) -> Result<Vec<SizeBucket>> {
    let sw = sweep(volumes, iou_thr, policy)?;
    let best = sw
        .points
        .iter()
        .filter(|p| p.fp_per_volume <= fp_point)
        .max_by(|a, b| {
            a.sensitivity
                .total_cmp(&b.sensitivity)
                .then(a.prefix_len.cmp(&b.prefix_len))
        })
        .expect("the empty prefix always qualifies");

    // Re-run matching over the chosen prefix to recover per-gt flags.
    let mut matched: Vec<Vec<bool>> = volumes.iter().map(|v| vec![false; v.gts.len()]).collect();
    for &(vi, di) in &sw.order[..best.prefix_len] {
        let v = &volumes[vi];
        let dbox = &v.detections[di].1;
        let mut bm: Option<(usize, f64)> = None;
        for (gi, g) in v.gts.iter().enumerate() {
            let ov = iou3d(dbox, &g.bounds);
            if ov > iou_thr && !matched[vi][gi] && bm.map(|(_, b)| ov > b).unwrap_or(true) {
                bm = Some((gi, ov));
            }
        }
        if let Some((gi, _)) = bm {
            matched[vi][gi] = true;
        }
    }

    let n_buckets = cutoffs_mm.len() + 1;
    let bucket_of = |size: f64| cutoffs_mm.iter().filter(|&&c| size >= c).count();
    let label_of = |i: usize| -> String {
        if i == 0 {
            format!("<{}mm", cutoffs_mm[0])
        } else if i == cutoffs_mm.len() {
            format!(">={}mm", cutoffs_mm[i - 1])
        } else {
            format!("{}-{}mm", cutoffs_mm[i - 1], cutoffs_mm[i])
        }
    };
    let mut counts = vec![0usize; n_buckets];
    let mut hits = vec![0usize; n_buckets];
    for (vi, v) in volumes.iter().enumerate() {
        for (gi, g) in v.gts.iter().enumerate() {
            let b = bucket_of(g.size_mm);
            counts[b] += 1;
            if matched[vi][gi] {
                hits[b] += 1;
            }
        }
    }
    debug_assert_eq!(counts.iter().sum::<usize>(), sw.total_gts);
    Ok((0..n_buckets)
        .map(|i| SizeBucket {
            label: label_of(i),
            gt_count: counts[i],
            sensitivity: (counts[i] > 0).then(|| hits[i] as f64 / counts[i] as f64),
        })
        .collect())
}

/// Mean 3D-IoU of the true-positive matches at the operating threshold that
/// keeps FP/volume at or under `fp_point`. `None` when nothing matched.
pub fn mean_tp_iou(
    volumes: &[VolumeEval],
    fp_point: f64,
    iou_thr: f64,
    policy: DoubleMatchPolicy,
) -> Result<Option<f64>> {
    let sw = sweep(volumes, iou_thr, policy)?;
    let best = sw
        .points
        .iter()
        .filter(|p| p.fp_per_volume <= fp_point)
        .max_by(|a, b| {
            a.sensitivity.total_cmp(&b.sensitivity).then(a.prefix_len.cmp(&b.prefix_len))
        })
        .expect("the empty prefix always qualifies");
    let mut matched: Vec<Vec<bool>> = volumes.iter().map(|v| vec![false; v.gts.len()]).collect();
    let mut ious = Vec::new();
    for &(vi, di) in &sw.order[..best.prefix_len] {
        let v = &volumes[vi];
        let dbox = &v.detections[di].1;
        let mut bm: Option<(usize, f64)> = None;
        for (gi, g) in v.gts.iter().enumerate() {
            let ov = iou3d(dbox, &g.bounds);
            if ov > iou_thr && !matched[vi][gi] && bm.map(|(_, b)| ov > b).unwrap_or(true) {
                bm = Some((gi, ov));
            }
        }
        if let Some((gi, ov)) = bm {
            matched[vi][gi] = true;
            ious.push(ov);
        }
    }
    Ok((!ious.is_empty()).then(|| ious.iter().sum::<f64>() / ious.len() as f64))
}

// ── File formats ─────────────────────────────────────────────────────

/// One record per line: volume id, score, six voxel coordinates
/// (x0 y0 z0 x1 y1 z1), and optionally six physical coordinates in mm.
pub fn format_detections(dets: &[Detection]) -> String {
    let mut out = String::new();
    for d in dets {
        let b = &d.bounds;
        write!(
            out,
            "{} {:.6} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4}",
            d.volume, d.score, b.min[0], b.min[1], b.min[2], b.max[0], b.max[1], b.max[2]
        )
        .unwrap();
        if let Some(mm) = &d.bounds_mm {
            write!(
                out,
                " {:.4} {:.4} {:.4} {:.4} {:.4} {:.4}",
                mm.min[0], mm.min[1], mm.min[2], mm.max[0], mm.max[1], mm.max[2]
            )
            .unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn parse_detections(text: &str) -> Result<Vec<Detection>> {
    let mut dets = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 && fields.len() != 14 {
            return Err(Error::Eval(format!(
                "detection line {} has {} fields, expected 8 or 14",
                lineno + 1,
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i].parse::<f64>().map_err(|e| {
                Error::Eval(format!("detection line {}: field {}: {e}", lineno + 1, i + 1))
            })
        };
        let bounds = Box3D::new([num(2)?, num(3)?, num(4)?], [num(5)?, num(6)?, num(7)?])?;
        let bounds_mm = if fields.len() == 14 {
            Some(Box3D::new([num(8)?, num(9)?, num(10)?], [num(11)?, num(12)?, num(13)?])?)
        } else {
            None
        };
        dets.push(Detection { volume: fields[0].to_string(), score: num(1)?, bounds, bounds_mm });
    }
    Ok(dets)
}

/// CSV with a `fp_per_volume,sensitivity` header, one row per operating
/// point, and a final `average,<value>` summary line.
pub fn format_froc_csv(curve: &FrocCurve) -> String {
    let mut out = String::from("fp_per_volume,sensitivity\n");
    for (fp, sens) in &curve.points {
        writeln!(out, "{fp:.6},{sens:.6}").unwrap();
    }
    writeln!(out, "average,{:.6}", curve.average).unwrap();
    out
}

pub fn format_size_table(buckets: &[SizeBucket]) -> String {
    let mut out = String::from("bucket gt_count sensitivity\n");
    for b in buckets {
        match b.sensitivity {
            Some(s) => writeln!(out, "{} {} {:.6}", b.label, b.gt_count, s).unwrap(),
            None => writeln!(out, "{} {} undefined", b.label, b.gt_count).unwrap(),
        }
    }
    out
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
