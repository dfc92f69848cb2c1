//! Deterministic synthetic volume generator.
//!
//! Each volume is a smooth low-frequency background field plus Gaussian
//! noise, with ellipsoid lesions at a contrasting intensity and confuser
//! blobs at an intermediate intensity emitted as hard-negative boxes.
//! Generation is a pure function of (config, seed, index).
//!
//! Volume format "P3DV": magic `P3DV`, u32 version=1, u8 channels,
//! u32 D,H,W, three f32 mm spacings (z,y,x), then C*D*H*W little-endian
//! float32 voxels.

use std::fs;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::boxes::{Box3D, GroundTruthBox};
use crate::error::{Error, Result};
use crate::tensor::{sample_points, Tensor};

pub const MAGIC: &[u8; 4] = b"P3DV";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    /// Volume dims (D, H, W) in voxels.
    pub dims: [usize; 3],
    /// Voxel spacing in mm, (z, y, x).
    pub spacing: [f64; 3],
    /// Lesions per volume, inclusive range.
    pub lesions: (usize, usize),
    /// Per-axis radius ranges in voxels, (z, y, x).
    pub radius_z: (f64, f64),
    pub radius_y: (f64, f64),
    pub radius_x: (f64, f64),
    /// Confuser blobs per volume, inclusive range.
    pub confusers: (usize, usize),
    pub background: f64,
    pub lesion_intensity: f64,
    pub confuser_intensity: f64,
    pub noise_sigma: f64,
    /// Contrast-phase channels; per-phase multiplier on the lesion/confuser
    /// contrast relative to background.
    pub phases: usize,
    pub phase_contrast: Vec<f64>,
    /// Train/val/test ratio.
    pub split: [usize; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dims: [64, 64, 64],
            spacing: [2.0, 1.0, 1.0],
            lesions: (1, 3),
            radius_z: (3.0, 6.0),
            radius_y: (4.0, 10.0),
            radius_x: (4.0, 10.0),
            confusers: (0, 2),
            background: 0.20,
            lesion_intensity: 0.65,
            confuser_intensity: 0.45,
            noise_sigma: 0.05,
            phases: 1,
            phase_contrast: vec![1.0],
            split: [384, 92, 98],
            seed: 17,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (axis, (name, r)) in
            [("radius_z", self.radius_z), ("radius_y", self.radius_y), ("radius_x", self.radius_x)]
                .into_iter()
                .enumerate()
        {
            if r.0 < 2.0 || r.1 < r.0 {
                return Err(Error::Config(format!("{name} range {r:?} must be >= 2 voxels")));
            }
            if 2.0 * (r.1 + 1.0) >= self.dims[axis] as f64 {
                return Err(Error::Config(format!(
                    "{name} range {r:?} cannot fit inside dim {}",
                    self.dims[axis]
                )));
            }
        }
        let contrast =
            (self.lesion_intensity - self.background).abs() / self.noise_sigma.max(1e-12);
        if contrast < 1.0 {
            return Err(Error::Config(format!(
                "lesion/background contrast over noise must be >= 1, got {contrast:.3}"
            )));
        }
        if self.phases == 0 || self.phase_contrast.len() != self.phases {
            return Err(Error::Config(format!(
                "phase_contrast needs exactly {} entries",
                self.phases
            )));
        }
        if self.split.iter().sum::<usize>() == 0 {
            return Err(Error::Config("split ratio must not be all zero".into()));
        }
        Ok(())
    }
}

/// One generated volume: phase-stacked voxels plus annotations.
pub struct SynthVolume {
    /// `[C, D, H, W]` voxel tensor.
    pub volume: Tensor<f32>,
    pub boxes: Vec<GroundTruthBox>,
    pub spacing: [f64; 3],
}

struct Ellipsoid {
    center: [f64; 3], // (x, y, z) voxels
    radii: [f64; 3],  // (x, y, z) voxels
}

impl Ellipsoid {
    fn bounds(&self) -> Box3D {
        Box3D {
            min: [
                self.center[0] - self.radii[0],
                self.center[1] - self.radii[1],
                self.center[2] - self.radii[2],
            ],
            max: [
                self.center[0] + self.radii[0],
                self.center[1] + self.radii[1],
                self.center[2] + self.radii[2],
            ],
        }
    }
}

fn sample_ellipsoid(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Ellipsoid {
    let rz = rng.random_range(cfg.radius_z.0..=cfg.radius_z.1);
    let ry = rng.random_range(cfg.radius_y.0..=cfg.radius_y.1);
    let rx = rng.random_range(cfg.radius_x.0..=cfg.radius_x.1);
    let [d, h, w] = cfg.dims;
    let cz = rng.random_range(rz + 1.0..d as f64 - rz - 1.0);
    let cy = rng.random_range(ry + 1.0..h as f64 - ry - 1.0);
    let cx = rng.random_range(rx + 1.0..w as f64 - rx - 1.0);
    Ellipsoid { center: [cx, cy, cz], radii: [rx, ry, rz] }
}

fn boxes_overlap(a: &Box3D, b: &Box3D) -> bool {
    (0..3).all(|ax| a.min[ax] < b.max[ax] && a.max[ax] > b.min[ax])
}

/// Place `count` non-overlapping ellipsoids, rejecting collisions with the
/// already-placed set. Errors after 100 straight rejections.
fn place(
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
    count: usize,
    taken: &mut Vec<Box3D>,
) -> Result<Vec<Ellipsoid>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let mut tries = 0;
        loop {
            let e = sample_ellipsoid(cfg, rng);
            let b = e.bounds();
            if !taken.iter().any(|t| boxes_overlap(t, &b)) {
                taken.push(b);
                out.push(e);
                break;
            }
            tries += 1;
            if tries >= 100 {
                return Err(Error::Generation(format!(
                    "could not place ellipsoid after {tries} tries; volume too crowded"
                )));
            }
        }
    }
    Ok(out)
}

/// Smooth low-frequency field: trilinear upsampling of a coarse random grid.
fn background_field(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let [d, h, w] = cfg.dims;
    let coarse = [3usize, 4, 4];
    let n: usize = coarse.iter().product();
    let amp = cfg.noise_sigma as f32 * 2.0;
    let vals: Vec<f32> = (0..n).map(|_| rng.random_range(-amp..amp)).collect();
    let grid = Tensor::from_vec(&[1, coarse[0], coarse[1], coarse[2]], vals).unwrap();
    let points: Vec<(f64, f64, f64)> = (0..d * h * w)
        .map(|i| {
            let z = i / (h * w);
            let y = (i / w) % h;
            let x = i % w;
            (
                x as f64 / (w - 1).max(1) as f64 * (coarse[2] - 1) as f64,
                y as f64 / (h - 1).max(1) as f64 * (coarse[1] - 1) as f64,
                z as f64 / (d - 1).max(1) as f64 * (coarse[0] - 1) as f64,
            )
        })
        .collect();
    let sampled = sample_points(&grid, &points).expect("non-empty grid");
    sampled.data().iter().map(|&v| cfg.background as f32 + v).collect()
}

/// Normalized ellipsoid distance and the soft boundary weight (1-voxel
/// falloff shell around rho = 1).
fn ellipsoid_weight(e: &Ellipsoid, x: f64, y: f64, z: f64) -> f64 {
    let dx = (x - e.center[0]) / e.radii[0];
    let dy = (y - e.center[1]) / e.radii[1];
    let dz = (z - e.center[2]) / e.radii[2];
    let rho = (dx * dx + dy * dy + dz * dz).sqrt();
    let shell = 1.0 / e.radii.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if rho <= 1.0 - shell {
        1.0
    } else if rho >= 1.0 {
        0.0
    } else {
        (1.0 - rho) / shell
    }
}

fn paint_blob(
    voxels: &mut [f32],
    dims: [usize; 3],
    e: &Ellipsoid,
    intensity: f64,
    background: f64,
) {
    let [_, h, w] = dims;
    let b = e.bounds();
    let lo = |v: f64| (v.floor().max(0.0)) as usize;
    let hi = |v: f64, d: usize| (v.ceil().min(d as f64 - 1.0)) as usize;
    for z in lo(b.min[2])..=hi(b.max[2], dims[0]) {
        for y in lo(b.min[1])..=hi(b.max[1], dims[1]) {
            for x in lo(b.min[0])..=hi(b.max[0], dims[2]) {
                let wgt = ellipsoid_weight(e, x as f64, y as f64, z as f64);
                if wgt > 0.0 {
                    let idx = (z * h + y) * w + x;
                    let delta = (intensity - background) * wgt;
                    voxels[idx] += delta as f32;
                }
            }
        }
    }
}

/// Generate volume `index` of a dataset. Reproducible from (config.seed,
/// index) alone.
pub fn generate_volume(cfg: &SynthConfig, index: u64) -> Result<SynthVolume> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(
        cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index),
    );
    let [d, h, w] = cfg.dims;
    let n_lesions = rng.random_range(cfg.lesions.0..=cfg.lesions.1);
    let n_confusers = rng.random_range(cfg.confusers.0..=cfg.confusers.1);

    let mut taken = Vec::new();
    let lesions = place(cfg, &mut rng, n_lesions, &mut taken)?;
    let confusers = place(cfg, &mut rng, n_confusers, &mut taken)?;

    let base = background_field(cfg, &mut rng);
    let noise = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
    let vol = d * h * w;
    let mut voxels = vec![0f32; cfg.phases * vol];
    for phase in 0..cfg.phases {
        let contrast = cfg.phase_contrast[phase];
        let slice = &mut voxels[phase * vol..(phase + 1) * vol];
        slice.copy_from_slice(&base);
        for e in &lesions {
            let intensity =
                cfg.background + (cfg.lesion_intensity - cfg.background) * contrast;
            paint_blob(slice, cfg.dims, e, intensity, cfg.background);
        }
        for e in &confusers {
            let intensity =
                cfg.background + (cfg.confuser_intensity - cfg.background) * contrast;
            paint_blob(slice, cfg.dims, e, intensity, cfg.background);
        }
        for v in slice.iter_mut() {
            *v += noise.sample(&mut rng) as f32;
        }
    }

    let mut boxes: Vec<GroundTruthBox> =
        lesions.iter().map(|e| GroundTruthBox::positive(e.bounds())).collect();
    boxes.extend(confusers.iter().map(|e| GroundTruthBox::hard_negative(e.bounds())));

    Ok(SynthVolume {
        volume: Tensor::from_vec(&[cfg.phases, d, h, w], voxels)?,
        boxes,
        spacing: cfg.spacing,
    })
}

// ── P3DV io ──────────────────────────────────────────────────────────

pub fn write_volume(path: &Path, vol: &SynthVolume) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut wtr = BufWriter::new(f);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let [c, d, h, w]: [usize; 4] = vol.volume.shape().try_into().map_err(|_| {
        Error::Dimension(format!("volume tensor must be [C,D,H,W], got {:?}", vol.volume.shape()))
    })?;
    wtr.write_all(MAGIC).map_err(io_err)?;
    wtr.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    wtr.write_u8(c as u8).map_err(io_err)?;
    for dim in [d, h, w] {
        wtr.write_u32::<LittleEndian>(dim as u32).map_err(io_err)?;
    }
    for s in vol.spacing {
        wtr.write_f32::<LittleEndian>(s as f32).map_err(io_err)?;
    }
    for &v in vol.volume.data() {
        wtr.write_f32::<LittleEndian>(v).map_err(io_err)?;
    }
    wtr.flush().map_err(io_err)
}

/// Read a P3DV file; boxes are not stored in the volume file.
pub fn read_volume(path: &Path) -> Result<SynthVolume> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = BufReader::new(f);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 4];
    rdr.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::Generation(format!("{}: bad P3DV magic", path.display())));
    }
    let version = rdr.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != VERSION {
        return Err(Error::Generation(format!("{}: unsupported version {version}", path.display())));
    }
    let c = rdr.read_u8().map_err(io_err)? as usize;
    let d = rdr.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let h = rdr.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let w = rdr.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut spacing = [0.0f64; 3];
    for s in spacing.iter_mut() {
        *s = rdr.read_f32::<LittleEndian>().map_err(io_err)? as f64;
    }
    let mut data = vec![0f32; c * d * h * w];
    for v in data.iter_mut() {
        *v = rdr.read_f32::<LittleEndian>().map_err(io_err)?;
    }
    Ok(SynthVolume {
        volume: Tensor::from_vec(&[c, d, h, w], data)?,
        boxes: Vec::new(),
        spacing,
    })
}

// ── Dataset on disk ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split '{other}'"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub count: usize,
    /// Half-open index ranges.
    pub train: (usize, usize),
    pub val: (usize, usize),
    pub test: (usize, usize),
    pub seed: u64,
}

impl Manifest {
    pub fn range(&self, split: Split) -> std::ops::Range<usize> {
        let (a, b) = match split {
            Split::Train => self.train,
            Split::Val => self.val,
            Split::Test => self.test,
        };
        a..b
    }

    fn to_text(&self) -> String {
        format!(
            "# synthetic dataset manifest\ncount = {}\nseed = {}\ntrain = {}..{}\nval = {}..{}\ntest = {}..{}\n",
            self.count, self.seed, self.train.0, self.train.1, self.val.0, self.val.1,
            self.test.0, self.test.1
        )
    }

    fn from_text(text: &str) -> Result<Manifest> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("manifest line '{line}' is not key = value")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| -> Result<String> {
            kv.get(k).cloned().ok_or_else(|| Error::Config(format!("manifest missing '{k}'")))
        };
        let range = |s: String| -> Result<(usize, usize)> {
            let (a, b) = s
                .split_once("..")
                .ok_or_else(|| Error::Config(format!("bad range '{s}'")))?;
            Ok((
                a.trim().parse().map_err(|e| Error::Config(format!("bad range '{s}': {e}")))?,
                b.trim().parse().map_err(|e| Error::Config(format!("bad range '{s}': {e}")))?,
            ))
        };
        Ok(Manifest {
            count: get("count")?.parse().map_err(|e| Error::Config(format!("bad count: {e}")))?,
            seed: get("seed")?.parse().map_err(|e| Error::Config(format!("bad seed: {e}")))?,
            train: range(get("train")?)?,
            val: range(get("val")?)?,
            test: range(get("test")?)?,
        })
    }
}

pub fn volume_id(index: usize) -> String {
    format!("vol_{index:05}")
}

pub fn volume_path(dir: &Path, index: usize) -> PathBuf {
    dir.join(format!("{}.p3dv", volume_id(index)))
}

/// Write `count` volumes plus the annotation file and the manifest with the
/// configured split ratio. Returns the manifest.
pub fn write_dataset(cfg: &SynthConfig, count: usize, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let volumes: Vec<(usize, SynthVolume)> = (0..count)
        .into_par_iter()
        .map(|i| generate_volume(cfg, i as u64).map(|v| (i, v)))
        .collect::<Result<_>>()?;

    let mut annotations = String::new();
    for (i, vol) in &volumes {
        write_volume(&volume_path(out_dir, *i), vol)?;
        for b in &vol.boxes {
            let flag = if b.hard_negative { "hneg" } else { "pos" };
            let bb = &b.bounds;
            annotations.push_str(&format!(
                "{} {} {:.4} {:.4} {:.4} {:.4} {:.4} {:.4}\n",
                volume_id(*i),
                flag,
                bb.min[0],
                bb.min[1],
                bb.min[2],
                bb.max[0],
                bb.max[1],
                bb.max[2]
            ));
        }
    }
    let ann_path = out_dir.join("annotations.txt");
    fs::write(&ann_path, annotations).map_err(|e| Error::io(&ann_path, e))?;

    let total_ratio: usize = cfg.split.iter().sum();
    let n_train = count * cfg.split[0] / total_ratio;
    let n_val = count * cfg.split[1] / total_ratio;
    let manifest = Manifest {
        count,
        seed: cfg.seed,
        train: (0, n_train),
        val: (n_train, n_train + n_val),
        test: (n_train + n_val, count),
    };
    let man_path = out_dir.join("manifest.txt");
    fs::write(&man_path, manifest.to_text()).map_err(|e| Error::io(&man_path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Manifest::from_text(&text)
}

/// Annotations per volume id, in file order.
pub fn read_annotations(dir: &Path) -> Result<Vec<(String, GroundTruthBox)>> {
    let path = dir.join("annotations.txt");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(Error::Config(format!(
                "annotation line {} has {} fields, expected 8",
                lineno + 1,
                fields.len()
            )));
        }
        let num = |i: usize| -> Result<f64> {
            fields[i]
                .parse()
                .map_err(|e| Error::Config(format!("annotation line {}: {e}", lineno + 1)))
        };
        let bounds = Box3D::new([num(2)?, num(3)?, num(4)?], [num(5)?, num(6)?, num(7)?])?;
        let gt = match fields[1] {
            "pos" => GroundTruthBox::positive(bounds),
            "hneg" => GroundTruthBox::hard_negative(bounds),
            other => {
                return Err(Error::Config(format!(
                    "annotation line {}: unknown flag '{other}'",
                    lineno + 1
                )))
            }
        };
        out.push((fields[0].to_string(), gt));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            dims: [32, 32, 32],
            lesions: (1, 2),
            confusers: (0, 1),
            radius_z: (3.0, 5.0),
            radius_y: (4.0, 7.0),
            radius_x: (4.0, 7.0),
            ..Default::default()
        }
    }

    #[test]
    fn empty_config_gives_pure_background() {
        let cfg = SynthConfig { lesions: (0, 0), confusers: (0, 0), ..small_cfg() };
        let v = generate_volume(&cfg, 0).unwrap();
        assert!(v.boxes.is_empty());
        assert_eq!(v.volume.shape(), &[1, 32, 32, 32]);
        // Background stays near the configured mean.
        let mean: f32 = v.volume.data().iter().sum::<f32>() / v.volume.len() as f32;
        assert!((mean - cfg.background as f32).abs() < 0.05, "mean {mean}");
    }

    #[test]
    fn ellipsoid_box_is_center_plus_minus_radii() {
        let e = Ellipsoid { center: [32.0, 32.0, 16.0], radii: [6.0, 6.0, 4.0] };
        let b = e.bounds();
        assert_eq!(b.min, [26.0, 26.0, 12.0]);
        assert_eq!(b.max, [38.0, 38.0, 20.0]);
    }

    #[test]
    fn regeneration_is_bit_identical() {
        let cfg = small_cfg();
        let a = generate_volume(&cfg, 3).unwrap();
        let b = generate_volume(&cfg, 3).unwrap();
        assert_eq!(a.volume.data(), b.volume.data());
        assert_eq!(a.boxes.len(), b.boxes.len());
        // A different index differs.
        let c = generate_volume(&cfg, 4).unwrap();
        assert_ne!(a.volume.data(), c.volume.data());
    }

    #[test]
    fn boxes_stay_inside_bounds_with_positive_extent() {
        let cfg = small_cfg();
        for i in 0..20 {
            let v = generate_volume(&cfg, i).unwrap();
            for b in &v.boxes {
                let e = b.bounds.extent();
                assert!(e.iter().all(|&x| x > 0.0));
                for a in 0..3 {
                    assert!(b.bounds.min[a] >= 0.0);
                }
                assert!(b.bounds.max[0] <= 32.0 && b.bounds.max[1] <= 32.0);
                assert!(b.bounds.max[2] <= 32.0);
            }
        }
    }

    #[test]
    fn lesion_interior_contrasts_with_background() {
        let cfg = SynthConfig { lesions: (1, 1), confusers: (0, 0), ..small_cfg() };
        let v = generate_volume(&cfg, 7).unwrap();
        let b = &v.boxes[0].bounds;
        let c = b.center();
        let (x, y, z) = (c[0] as usize, c[1] as usize, c[2] as usize);
        let center_val = v.volume.at(&[0, z, y, x]);
        let corner_val = v.volume.at(&[0, 1, 1, 1]);
        assert!(
            (center_val - corner_val).abs() as f64
                >= (cfg.lesion_intensity - cfg.background) - 4.0 * cfg.noise_sigma,
            "contrast too low: {center_val} vs {corner_val}"
        );
    }

    #[test]
    fn multi_phase_volumes_scale_contrast() {
        let cfg = SynthConfig {
            phases: 2,
            phase_contrast: vec![1.0, 0.5],
            lesions: (1, 1),
            confusers: (0, 0),
            ..small_cfg()
        };
        let v = generate_volume(&cfg, 1).unwrap();
        assert_eq!(v.volume.shape()[0], 2);
        let b = &v.boxes[0].bounds;
        let c = b.center();
        let (x, y, z) = (c[0] as usize, c[1] as usize, c[2] as usize);
        let p0 = v.volume.at(&[0, z, y, x]) as f64;
        let p1 = v.volume.at(&[1, z, y, x]) as f64;
        assert!(p0 - cfg.background > 0.5 * (cfg.lesion_intensity - cfg.background));
        assert!(p1 < p0, "second phase has weaker contrast");
    }

    #[test]
    fn volume_file_roundtrip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small_cfg();
        let v = generate_volume(&cfg, 5).unwrap();
        let path = dir.path().join("v.p3dv");
        write_volume(&path, &v).unwrap();
        let back = read_volume(&path).unwrap();
        assert_eq!(back.volume.shape(), v.volume.shape());
        assert_eq!(back.volume.data(), v.volume.data());
        assert_eq!(back.spacing, v.spacing);
        // Byte-exact rewrite.
        let path2 = dir.path().join("v2.p3dv");
        write_volume(&path2, &back).unwrap();
        assert_eq!(fs::read(&path).unwrap(), fs::read(&path2).unwrap());
    }

    #[test]
    fn dataset_writes_manifest_with_split_ratio() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { dims: [16, 16, 16], radius_z: (2.0, 3.0), radius_y: (2.0, 3.0), radius_x: (2.0, 3.0), lesions: (0, 1), confusers: (0, 0), ..Default::default() };
        let man = write_dataset(&cfg, 10, dir.path()).unwrap();
        // 384/92/98 of 10 -> 6 train / 1 val / 3 test.
        assert_eq!(man.train, (0, 6));
        assert_eq!(man.val, (6, 7));
        assert_eq!(man.test, (7, 10));
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.count, 10);
        assert_eq!(back.range(Split::Test), 7..10);
        let anns = read_annotations(dir.path()).unwrap();
        for (id, _) in &anns {
            assert!(id.starts_with("vol_"));
        }
        // Every volume file exists.
        for i in 0..10 {
            assert!(volume_path(dir.path(), i).exists());
        }
    }

    #[test]
    fn empty_dataset_writes_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let man = write_dataset(&SynthConfig::default(), 0, dir.path()).unwrap();
        assert_eq!(man.count, 0);
        assert_eq!(read_annotations(dir.path()).unwrap().len(), 0);
    }

    #[test]
    fn rejection_limit_is_an_error() {
        // A volume too small for two large lesions.
        let cfg = SynthConfig {
            dims: [24, 24, 24],
            lesions: (4, 4),
            radius_z: (8.0, 9.0),
            radius_y: (8.0, 9.0),
            radius_x: (8.0, 9.0),
            confusers: (0, 0),
            ..Default::default()
        };
        let mut failed = false;
        for i in 0..5 {
            if matches!(generate_volume(&cfg, i), Err(Error::Generation(_))) {
                failed = true;
            }
        }
        assert!(failed, "expected a placement failure");
    }
}
