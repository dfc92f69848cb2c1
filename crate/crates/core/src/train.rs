//! Training with Adam plus dataset loading and whole-split evaluation.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::boxes::{Box3D, GroundTruthBox};
use crate::checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::eval::{decode, Detection, FrocCurve, GtBox, SizeBucket, VolumeEval};
use crate::losses;
use crate::net::{gather_point_set, points_to_voxels, BoxHeadKind, DetectorNet, DetectorOutputs, TrackedParams};
use crate::synth::{self, Manifest, Split, SynthVolume};
use crate::targets::{make_heatmap, HeatmapTarget};
use crate::tensor::{Elem, Tape, Tensor};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Adam optimizer state over a parameter store.
pub struct Adam<T: Elem> {
    pub lr: f64,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Elem> Adam<T> {
    pub fn new(net: &DetectorNet<T>, lr: f64) -> Self {
        let m = net.store.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        let v = net.store.iter().map(|(_, t)| vec![T::zero(); t.len()]).collect();
        Adam { lr, t: 0, m, v }
    }

    /// One update; `grads` aligned with the store's registration order.
    pub fn step(&mut self, net: &mut DetectorNet<T>, grads: &[Option<Vec<T>>]) -> Result<()> {
        self.t += 1;
        let b1 = T::from_f64(ADAM_BETA1);
        let b2 = T::from_f64(ADAM_BETA2);
        let eps = T::from_f64(ADAM_EPS);
        let bc1 = T::from_f64(1.0 - ADAM_BETA1.powi(self.t as i32));
        let bc2 = T::from_f64(1.0 - ADAM_BETA2.powi(self.t as i32));
        let lr = T::from_f64(self.lr);
        for (idx, id) in net.store.ids().enumerate().collect::<Vec<_>>() {
            let Some(g) = grads.get(idx).and_then(|g| g.as_ref()) else { continue };
            let old = net.store.get(id).clone();
            let mut new = old.data().to_vec();
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..new.len() {
                m[i] = b1 * m[i] + (T::one() - b1) * g[i];
                v[i] = b2 * v[i] + (T::one() - b2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                new[i] = new[i] - lr * mhat / (vhat.sqrt() + eps);
            }
            net.store.set(id, Tensor::from_vec(old.shape(), new)?)?;
        }
        Ok(())
    }
}

// ── Dataset access ───────────────────────────────────────────────────

pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: Manifest,
    boxes: HashMap<String, Vec<GroundTruthBox>>,
    cache: HashMap<usize, SynthVolume>,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest = synth::read_manifest(dir)?;
        let mut boxes: HashMap<String, Vec<GroundTruthBox>> = HashMap::new();
        for (id, b) in synth::read_annotations(dir)? {
            boxes.entry(id).or_default().push(b);
        }
        Ok(Dataset { dir: dir.to_path_buf(), manifest, boxes, cache: HashMap::new() })
    }

    pub fn boxes_of(&self, index: usize) -> &[GroundTruthBox] {
        self.boxes.get(&synth::volume_id(index)).map(|v| v.as_slice()).unwrap_or(&[])
    }

    /// Volume with annotations attached; cached in memory after first read.
    pub fn volume(&mut self, index: usize) -> Result<&SynthVolume> {
        if !self.cache.contains_key(&index) {
            let mut v = synth::read_volume(&synth::volume_path(&self.dir, index))?;
            v.boxes = self.boxes_of(index).to_vec();
            self.cache.insert(index, v);
        }
        Ok(&self.cache[&index])
    }

    /// Uncached read for parallel evaluation.
    pub fn volume_uncached(&self, index: usize) -> Result<SynthVolume> {
        let mut v = synth::read_volume(&synth::volume_path(&self.dir, index))?;
        v.boxes = self.boxes_of(index).to_vec();
        Ok(v)
    }
}

/// A training crop: voxels plus the boxes shifted into crop coordinates.
struct Crop {
    volume: Tensor<f32>,
    boxes: Vec<GroundTruthBox>,
}

/// Extract a (D,H,W) crop. Boxes keep membership by center: a box whose
/// center falls outside the crop is dropped, the rest are clamped to it.
fn crop_volume(vol: &SynthVolume, origin: [usize; 3], size: [usize; 3]) -> Result<Crop> {
    let [c, d, h, w]: [usize; 4] = vol.volume.shape().try_into().unwrap();
    let [cd, ch, cw] = size;
    let [oz, oy, ox] = origin;
    debug_assert!(oz + cd <= d && oy + ch <= h && ox + cw <= w);
    let mut data = Vec::with_capacity(c * cd * ch * cw);
    for ch_i in 0..c {
        for z in oz..oz + cd {
            for y in oy..oy + ch {
                let base = ((ch_i * d + z) * h + y) * w + ox;
                data.extend_from_slice(&vol.volume.data()[base..base + cw]);
            }
        }
    }
    let mut boxes = Vec::new();
    for b in &vol.boxes {
        let center = b.bounds.center();
        let shifted = [center[0] - ox as f64, center[1] - oy as f64, center[2] - oz as f64];
        let inside = shifted[0] >= 0.0
            && shifted[0] < cw as f64
            && shifted[1] >= 0.0
            && shifted[1] < ch as f64
            && shifted[2] >= 0.0
            && shifted[2] < cd as f64;
        if !inside {
            continue;
        }
        let min = [
            (b.bounds.min[0] - ox as f64).max(0.0),
            (b.bounds.min[1] - oy as f64).max(0.0),
            (b.bounds.min[2] - oz as f64).max(0.0),
        ];
        let max = [
            (b.bounds.max[0] - ox as f64).min(cw as f64),
            (b.bounds.max[1] - oy as f64).min(ch as f64),
            (b.bounds.max[2] - oz as f64).min(cd as f64),
        ];
        if (0..3).all(|a| max[a] > min[a]) {
            boxes.push(GroundTruthBox { bounds: Box3D { min, max }, hard_negative: b.hard_negative });
        }
    }
    Ok(Crop { volume: Tensor::from_vec(&[1, c, cd, ch, cw], data)?, boxes })
}

fn sample_crop(
    vol: &SynthVolume,
    size: [usize; 3],
    lesion_prob: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Crop> {
    let [_, d, h, w]: [usize; 4] = vol.volume.shape().try_into().unwrap();
    let [cd, ch, cw] = size;
    if cd > d || ch > h || cw > w {
        return Err(Error::Config(format!(
            "crop {size:?} exceeds volume dims [{d},{h},{w}]"
        )));
    }
    let max_origin = [d - cd, h - ch, w - cw];
    let positives: Vec<&GroundTruthBox> =
        vol.boxes.iter().filter(|b| !b.hard_negative).collect();
    let origin = if !positives.is_empty() && rng.random_range(0.0..1.0) < lesion_prob {
        let lesion = positives[rng.random_range(0..positives.len())];
        let c = lesion.bounds.center();
        // Center the crop on the lesion, clamped to the volume.
        [
            ((c[2] as isize - cd as isize / 2).max(0) as usize).min(max_origin[0]),
            ((c[1] as isize - ch as isize / 2).max(0) as usize).min(max_origin[1]),
            ((c[0] as isize - cw as isize / 2).max(0) as usize).min(max_origin[2]),
        ]
    } else {
        [
            rng.random_range(0..=max_origin[0]),
            rng.random_range(0..=max_origin[1]),
            rng.random_range(0..=max_origin[2]),
        ]
    };
    crop_volume(vol, origin, size)
}

// ── Loss assembly ────────────────────────────────────────────────────

pub struct StepLosses {
    pub ctr: f64,
    pub pts: f64,
    pub tri: f64,
    pub total: f64,
}

/// Joint loss over one crop with SPR (or direct-size) supervision anchored
/// at the ground-truth centers.
fn crop_loss(
    net: &DetectorNet<f32>,
    tape: &mut Tape<f32>,
    tracked: &TrackedParams<f32>,
    crop: &Crop,
    cfg: &RunConfig,
) -> Result<(Tensor<f32>, StepLosses)> {
    let outputs = net.forward(tape, tracked, &crop.volume)?;
    let grid = net.grid();
    let target: HeatmapTarget<f32> = make_heatmap(&crop.boxes, outputs.grid_dims(), &grid)?;
    let yhat = tape.sigmoid(&outputs.heatmap);
    let l_ctr = losses::focal_center_loss(tape, &yhat, &target, cfg.loss.eps)?;

    let m = target.m;
    let mut l_pts = Tensor::scalar(0f32);
    let mut l_tri = Tensor::scalar(0f32);
    for center in &target.centers {
        let gt = crop.boxes[center.index].bounds;
        match net.config.box_head {
            BoxHeadKind::Spr => {
                let ps = gather_point_set(tape, &outputs, center.grid)?;
                let p_vox = points_to_voxels(tape, &ps.points, &grid)?;
                let r_vox = points_to_voxels(tape, &ps.refined, &grid)?;
                let lp = losses::point_box_loss(tape, &p_vox, &r_vox, &gt)?;
                l_pts = tape.add(&l_pts, &lp)?;
                let lt = losses::surface_triplet_loss(
                    tape,
                    &ps.center_embed,
                    &ps.corner_embeds,
                    &ps.point_embeds,
                    m,
                    cfg.loss.tri_normalization,
                )?;
                l_tri = tape.add(&l_tri, &lt)?;
            }
            BoxHeadKind::Direct => {
                let sizes = outputs.sizes.as_ref().expect("direct head");
                let [gd, gh, gw] = outputs.grid_dims();
                let map = sizes.reshape(&[3, gd, gh, gw])?;
                let coords = Tensor::from_vec(
                    &[1, 3],
                    center.grid.iter().map(|&c| c as f32).collect(),
                )?;
                let pred = tape.trilinear_sample(&map, &coords)?;
                let e = gt.extent();
                let gt_grid = [
                    e[0] / grid.stride_xyz[0] as f64,
                    e[1] / grid.stride_xyz[1] as f64,
                    e[2] / grid.stride_xyz[2] as f64,
                ];
                let lp = losses::size_l1_loss(tape, &pred, gt_grid)?;
                l_pts = tape.add(&l_pts, &lp)?;
            }
        }
    }
    if m > 1 {
        // Mean over lesions (the triplet term already carries its 1/m).
        l_pts = tape.affine(&l_pts, 1.0 / m as f64, 0.0);
    }
    let total = losses::joint_loss(tape, &l_ctr, &l_pts, &l_tri, cfg.loss.aux_weight)?;
    let losses = StepLosses {
        ctr: l_ctr.item()?.as_f64(),
        pts: l_pts.item()?.as_f64(),
        tri: l_tri.item()?.as_f64(),
        total: total.item()?.as_f64(),
    };
    Ok((total, losses))
}

// ── Training loop ────────────────────────────────────────────────────

pub struct TrainReport {
    pub steps_run: usize,
    pub first_loss: f64,
    pub final_loss: f64,
    pub best_val: f64,
    pub checkpoint: PathBuf,
    pub log_path: PathBuf,
}

/// Validation loss: mean joint loss over (up to) `val_volumes` volumes of
/// the val split, center-cropped to the training crop size.
fn validation_loss(
    net: &DetectorNet<f32>,
    data: &mut Dataset,
    cfg: &RunConfig,
) -> Result<f64> {
    let range = data.manifest.range(Split::Val);
    let count = range.len().min(cfg.train.val_volumes);
    if count == 0 {
        return Ok(f64::INFINITY);
    }
    let mut total = 0.0;
    for index in range.clone().take(count) {
        let vol = data.volume(index)?;
        let [_, d, h, w]: [usize; 4] = vol.volume.shape().try_into().unwrap();
        let [cd, ch, cw] = cfg.train.crop;
        let origin = [(d - cd.min(d)) / 2, (h - ch.min(h)) / 2, (w - cw.min(w)) / 2];
        let crop = crop_volume(vol, origin, [cd.min(d), ch.min(h), cw.min(w)])?;
        let mut tape = Tape::inference();
        let tracked = net.store.track(&mut tape);
        let (_, losses) = crop_loss(net, &mut tape, &tracked, &crop, cfg)?;
        total += losses.total;
    }
    Ok(total / count as f64)
}

/// Run the training loop, writing the best-validation checkpoint and a
/// per-step log under `out_dir`.
pub fn train(
    cfg: &RunConfig,
    data_dir: &Path,
    out_dir: &Path,
    mut progress: impl FnMut(&str),
) -> Result<TrainReport> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut data = Dataset::open(data_dir)?;
    let train_range = data.manifest.range(Split::Train);
    if train_range.is_empty() {
        return Err(Error::Train("training split is empty".into()));
    }
    let mut net = DetectorNet::<f32>::build(cfg.model, cfg.seed)?;
    let mut adam = Adam::new(&net, cfg.train.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7EA1_0002);

    let ckpt_path = out_dir.join("checkpoint.p3dw");
    let log_path = out_dir.join("train_log.txt");
    let mut log = String::new();
    let mut best_val = f64::INFINITY;
    let mut evals_since_improvement = 0usize;
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;
    let mut saved_best = false;

    for step in 1..=cfg.train.steps {
        let mut grad_acc: Vec<Option<Vec<f32>>> = vec![None; net.store.len()];
        let mut losses_acc = StepLosses { ctr: 0.0, pts: 0.0, tri: 0.0, total: 0.0 };
        for _ in 0..cfg.train.batch_size.max(1) {
            let index = train_range.start + rng.random_range(0..train_range.len());
            let vol = data.volume(index)?;
            let crop =
                sample_crop(vol, cfg.train.crop, cfg.train.lesion_crop_prob, &mut rng)?;
            let mut tape = Tape::new();
            let tracked = net.store.track(&mut tape);
            let (total, losses) =
                crop_loss(&net, &mut tape, &tracked, &crop, cfg).map_err(|e| match e {
                    Error::Train(msg) => Error::Train(format!(
                        "step {step}, volume {}: {msg}",
                        synth::volume_id(index)
                    )),
                    other => other,
                })?;
            tape.backward(&total)?;
            for (slot, tracked_t) in grad_acc.iter_mut().zip(tracked.iter()) {
                if let Some(g) = tape.grad(tracked_t) {
                    match slot {
                        Some(acc) => {
                            for (a, &v) in acc.iter_mut().zip(g) {
                                *a += v;
                            }
                        }
                        None => *slot = Some(g.to_vec()),
                    }
                }
            }
            losses_acc.ctr += losses.ctr;
            losses_acc.pts += losses.pts;
            losses_acc.tri += losses.tri;
            losses_acc.total += losses.total;
        }
        let bs = cfg.train.batch_size.max(1) as f64;
        for g in grad_acc.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v /= bs as f32;
            }
        }
        adam.step(&mut net, &grad_acc)?;

        let line = format!(
            "step={step} loss={:.6} ctr={:.6} pts={:.6} tri={:.6} lr={:.2e}",
            losses_acc.total / bs,
            losses_acc.ctr / bs,
            losses_acc.pts / bs,
            losses_acc.tri / bs,
            adam.lr
        );
        if step == 1 {
            first_loss = losses_acc.total / bs;
        }
        final_loss = losses_acc.total / bs;
        progress(&line);
        log.push_str(&line);
        log.push('\n');

        if step % cfg.train.eval_every == 0 || step == cfg.train.steps {
            let val = validation_loss(&net, &mut data, cfg)?;
            let improved = val < best_val - cfg.train.min_delta;
            let vline = format!(
                "step={step} val_loss={val:.6} best={:.6}{}",
                best_val.min(val),
                if improved { " *" } else { "" }
            );
            progress(&vline);
            log.push_str(&vline);
            log.push('\n');
            if improved {
                best_val = val;
                evals_since_improvement = 0;
                checkpoint::write_file(&ckpt_path, &net.to_entries(&cfg.to_text()))?;
                saved_best = true;
            } else {
                evals_since_improvement += 1;
                if evals_since_improvement >= cfg.train.patience {
                    adam.lr *= cfg.train.lr_drop;
                    evals_since_improvement = 0;
                    let lline = format!("step={step} lr_drop -> {:.2e}", adam.lr);
                    progress(&lline);
                    log.push_str(&lline);
                    log.push('\n');
                }
            }
        }
    }
    if !saved_best {
        checkpoint::write_file(&ckpt_path, &net.to_entries(&cfg.to_text()))?;
    }
    fs::write(&log_path, &log).map_err(|e| Error::io(&log_path, e))?;
    Ok(TrainReport {
        steps_run: cfg.train.steps,
        first_loss,
        final_loss,
        best_val,
        checkpoint: ckpt_path,
        log_path,
    })
}

/// Rebuild a detector from a checkpoint's embedded config.
pub fn load_checkpoint(path: &Path) -> Result<(DetectorNet<f32>, RunConfig)> {
    let entries = checkpoint::read_file(path)?;
    let cfg_text = entries
        .iter()
        .find(|e| e.name == checkpoint::CONFIG_ENTRY)
        .ok_or_else(|| Error::Checkpoint("checkpoint has no embedded config".into()))?
        .to_text()?;
    let cfg = RunConfig::parse(&cfg_text)?;
    let mut net = DetectorNet::<f32>::build(cfg.model, cfg.seed)?;
    net.load_entries(&entries)?;
    Ok((net, cfg))
}

// ── Checkpoint variant conversion ────────────────────────────────────

/// Rewrite a checkpoint's block-3 layers between the parameter-preserving
/// variants (slicewise <-> acs3d). The weight values are repartitioned
/// bit-exactly; the embedded config's `model.variant` is updated.
pub fn convert_checkpoint(
    entries: &[checkpoint::Entry],
    to: crate::convert::P3dcVariant,
) -> Result<Vec<checkpoint::Entry>> {
    use crate::convert::P3dcVariant as V;
    let cfg_text = entries
        .iter()
        .find(|e| e.name == checkpoint::CONFIG_ENTRY)
        .ok_or_else(|| Error::Checkpoint("checkpoint has no embedded config".into()))?
        .to_text()?;
    let cfg = RunConfig::parse(&cfg_text)?;
    let from = cfg.model.variant;
    if from == to {
        return Ok(entries.to_vec());
    }
    if !matches!((from, to), (V::Slicewise, V::Acs3d) | (V::Acs3d, V::Slicewise)) {
        return Err(Error::Argument(format!(
            "conversion {from} -> {to} is not parameter-preserving; only slicewise <-> acs3d"
        )));
    }

    let mut by_name: HashMap<String, checkpoint::Entry> =
        entries.iter().map(|e| (e.name.clone(), e.clone())).collect();
    let take = |m: &mut HashMap<String, checkpoint::Entry>, n: &str| -> Result<checkpoint::Entry> {
        m.remove(n).ok_or_else(|| Error::Checkpoint(format!("checkpoint is missing '{n}'")))
    };

    let g = cfg.model.growth;
    let (c_oa, c_oc, c_os) = crate::convert::acs_split(g, cfg.model.acs_ratio)?;
    for i in 0..cfg.model.blocks[2] {
        let base = format!("block3.l{i}");
        match to {
            V::Acs3d => {
                let k = take(&mut by_name, &format!("{base}.kernel"))?;
                let b = take(&mut by_name, &format!("{base}.bias"))?;
                let [_, ci, _, n, _]: [u32; 5] = k.dims.clone().try_into().map_err(|_| {
                    Error::Checkpoint(format!("{base}.kernel is not a 5-D tensor"))
                })?;
                let block = (ci * n * n) as usize;
                let groups =
                    [("axial", 0usize, c_oa, vec![c_oa as u32, ci, 1, n, n]),
                     ("coronal", c_oa, c_oc, vec![c_oc as u32, ci, n, 1, n]),
                     ("sagittal", c_oa + c_oc, c_os, vec![c_os as u32, ci, n, n, 1])];
                for (label, from_ch, count, dims) in groups {
                    by_name.insert(
                        format!("{base}.{label}.kernel"),
                        checkpoint::Entry::new(
                            format!("{base}.{label}.kernel"),
                            dims,
                            k.values[from_ch * block..(from_ch + count) * block].to_vec(),
                        )?,
                    );
                    by_name.insert(
                        format!("{base}.{label}.bias"),
                        checkpoint::Entry::new(
                            format!("{base}.{label}.bias"),
                            vec![count as u32],
                            b.values[from_ch..from_ch + count].to_vec(),
                        )?,
                    );
                }
            }
            V::Slicewise => {
                let mut kernel = Vec::new();
                let mut bias = Vec::new();
                let mut ci_n = (0u32, 0u32);
                for label in ["axial", "coronal", "sagittal"] {
                    let k = take(&mut by_name, &format!("{base}.{label}.kernel"))?;
                    let bb = take(&mut by_name, &format!("{base}.{label}.bias"))?;
                    // All three reshapes share the same flat layout per
                    // output channel, so concatenation restores the original.
                    let ci = k.dims[1];
                    let n = k.dims[2].max(k.dims[3]).max(k.dims[4]);
                    ci_n = (ci, n);
                    kernel.extend_from_slice(&k.values);
                    bias.extend_from_slice(&bb.values);
                }
                by_name.insert(
                    format!("{base}.kernel"),
                    checkpoint::Entry::new(
                        format!("{base}.kernel"),
                        vec![g as u32, ci_n.0, 1, ci_n.1, ci_n.1],
                        kernel,
                    )?,
                );
                by_name.insert(
                    format!("{base}.bias"),
                    checkpoint::Entry::new(format!("{base}.bias"), vec![g as u32], bias)?,
                );
            }
            _ => unreachable!(),
        }
    }

    let mut new_cfg = cfg.clone();
    new_cfg.model.variant = to;
    by_name.insert(
        checkpoint::CONFIG_ENTRY.into(),
        checkpoint::Entry::from_text(checkpoint::CONFIG_ENTRY, &new_cfg.to_text()),
    );

    // Order entries as a freshly built target-variant net would.
    let template = DetectorNet::<f32>::build(new_cfg.model, 0)?;
    let mut out = Vec::with_capacity(entries.len());
    out.push(by_name.remove(checkpoint::CONFIG_ENTRY).unwrap());
    for (name, _) in template.store.iter() {
        let e = by_name
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("conversion left no tensor for '{name}'")))?;
        out.push(e);
    }
    if let Some(stray) = by_name.keys().next() {
        return Err(Error::Checkpoint(format!("unconverted tensor '{stray}' remains")));
    }
    Ok(out)
}

// ── Whole-split evaluation ───────────────────────────────────────────

pub struct EvalArtifacts {
    pub volumes: Vec<VolumeEval>,
    pub detections: Vec<Detection>,
    pub curve: FrocCurve,
    pub buckets: Vec<SizeBucket>,
    pub mean_tp_iou: Option<f64>,
}

/// Decode every volume of a split and run the FROC protocol.
pub fn evaluate(
    net: &DetectorNet<f32>,
    cfg: &RunConfig,
    data_dir: &Path,
    split: Split,
) -> Result<EvalArtifacts> {
    let data = Dataset::open(data_dir)?;
    let indices: Vec<usize> = data.manifest.range(split).collect();
    if indices.is_empty() {
        return Err(Error::Eval(format!("split {split:?} is empty")));
    }
    let params = crate::eval::DecodeParams { top_k: cfg.eval.top_k, score_min: cfg.eval.score_min };
    let grid = net.grid();

    let per_volume: Vec<(VolumeEval, Vec<Detection>)> = indices
        .par_iter()
        .map(|&index| -> Result<(VolumeEval, Vec<Detection>)> {
            let vol = data.volume_uncached(index)?;
            let [c, d, h, w]: [usize; 4] = vol.volume.shape().try_into().unwrap();
            let input = vol.volume.reshape(&[1, c, d, h, w])?;
            let mut tape = Tape::inference();
            let tracked = net.store.track(&mut tape);
            let outputs: DetectorOutputs<f32> = net.forward(&mut tape, &tracked, &input)?;
            let dets = decode(&mut tape, &outputs, &grid, &params)?;
            let id = synth::volume_id(index);
            let spacing_xyz = [vol.spacing[2], vol.spacing[1], vol.spacing[0]];
            let detections: Vec<Detection> = dets
                .iter()
                .map(|(score, b)| Detection {
                    volume: id.clone(),
                    score: *score,
                    bounds: *b,
                    bounds_mm: Some(Box3D {
                        min: [
                            b.min[0] * spacing_xyz[0],
                            b.min[1] * spacing_xyz[1],
                            b.min[2] * spacing_xyz[2],
                        ],
                        max: [
                            b.max[0] * spacing_xyz[0],
                            b.max[1] * spacing_xyz[1],
                            b.max[2] * spacing_xyz[2],
                        ],
                    }),
                })
                .collect();
            let gts: Vec<GtBox> = vol
                .boxes
                .iter()
                .filter(|b| !b.hard_negative)
                .map(|b| GtBox {
                    bounds: b.bounds,
                    size_mm: b.bounds.inplane_diameter_mm(spacing_xyz),
                })
                .collect();
            Ok((VolumeEval { id, detections: dets, gts }, detections))
        })
        .collect::<Result<_>>()?;

    let mut volumes = Vec::with_capacity(per_volume.len());
    let mut detections = Vec::new();
    for (ve, dets) in per_volume {
        volumes.push(ve);
        detections.extend(dets);
    }
    let curve = crate::eval::froc(&volumes, &cfg.eval.fp_points, cfg.eval.iou, cfg.eval.double_match)?;
    let buckets = crate::eval::size_stratified(
        &volumes,
        &cfg.eval.size_cutoffs_mm,
        cfg.eval.strata_fp,
        cfg.eval.iou,
        cfg.eval.double_match,
    )?;
    let mean_tp_iou =
        crate::eval::mean_tp_iou(&volumes, cfg.eval.strata_fp, cfg.eval.iou, cfg.eval.double_match)?;
    Ok(EvalArtifacts { volumes, detections, curve, buckets, mean_tp_iou })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SynthConfig;

    fn tiny_cfg() -> RunConfig {
        let mut cfg = RunConfig::default();
        cfg.model.fpn_channels = 16;
        cfg.model.head_channels = 8;
        cfg.model.embed_channels = 4;
        cfg.model.n_points = 4;
        cfg.model.growth = 4;
        cfg.model.stem_channels = 8;
        cfg.synth = SynthConfig {
            dims: [16, 32, 32],
            lesions: (1, 1),
            confusers: (0, 1),
            radius_z: (2.0, 4.0),
            radius_y: (4.0, 7.0),
            radius_x: (4.0, 7.0),
            split: [3, 1, 1],
            ..Default::default()
        };
        cfg.train.crop = [16, 32, 32];
        cfg.train.steps = 2;
        cfg.train.eval_every = 2;
        cfg.train.val_volumes = 1;
        cfg.train.lr = 0.001;
        cfg
    }

    #[test]
    fn smoke_train_writes_checkpoint_and_log() {
        let dir = tempfile::tempdir().unwrap();
        let data_dir = dir.path().join("data");
        let out_dir = dir.path().join("run");
        let cfg = tiny_cfg();
        synth::write_dataset(&cfg.synth, 5, &data_dir).unwrap();
        let report = train(&cfg, &data_dir, &out_dir, |_| {}).unwrap();
        assert!(report.checkpoint.exists());
        assert!(report.log_path.exists());
        assert!(report.final_loss.is_finite());
        let log = fs::read_to_string(&report.log_path).unwrap();
        assert!(log.contains("step=1 "));
        assert!(log.contains("val_loss="));

        // Checkpoint reloads into a working detector.
        let (net, loaded_cfg) = load_checkpoint(&report.checkpoint).unwrap();
        assert_eq!(loaded_cfg.model, cfg.model);
        let art = evaluate(&net, &loaded_cfg, &data_dir, Split::Test).unwrap();
        assert_eq!(art.volumes.len(), 1);
    }

    #[test]
    fn adam_moves_parameters_against_gradient() {
        let cfg = tiny_cfg();
        let mut net = DetectorNet::<f32>::build(cfg.model, 5).unwrap();
        let before = net.store.get(net.store.ids().next().unwrap()).clone();
        let mut adam = Adam::new(&net, 0.01);
        let grads: Vec<Option<Vec<f32>>> = net
            .store
            .iter()
            .map(|(_, t)| Some(vec![1.0f32; t.len()]))
            .collect();
        adam.step(&mut net, &grads).unwrap();
        let after = net.store.get(net.store.ids().next().unwrap()).clone();
        for (b, a) in before.data().iter().zip(after.data()) {
            // First Adam step moves each coordinate by ~lr against the sign.
            assert!((b - a - 0.01).abs() < 1e-3, "{b} -> {a}");
        }
    }

    #[test]
    fn crop_shifts_and_filters_boxes() {
        let cfg = tiny_cfg().synth;
        let vol = synth::generate_volume(&cfg, 1).unwrap();
        let full: [usize; 4] = vol.volume.shape().try_into().unwrap();
        let crop = crop_volume(&vol, [0, 0, 0], [full[1], full[2], full[3]]).unwrap();
        assert_eq!(crop.boxes.len(), vol.boxes.len());
        // A crop away from everything keeps no boxes.
        let c2 = crop_volume(&vol, [0, 0, 0], [2, 2, 2]).unwrap();
        for b in &c2.boxes {
            let c = b.bounds.center();
            assert!(c.iter().all(|&v| v >= 0.0 && v <= 2.0));
        }
    }
}
