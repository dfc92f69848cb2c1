//! Flat `key = value` run configuration.
//!
//! UTF-8 text, one pair per line, `#` starts a comment. Every key has a
//! default (see [`RunConfig::default`]); unknown keys are errors so typos
//! surface immediately. `to_text` emits the canonical full listing, which
//! is what gets embedded into checkpoints.

use crate::convert::P3dcVariant;
use crate::error::{Error, Result};
use crate::eval::DoubleMatchPolicy;
use crate::losses::TriNormalization;
use crate::net::{BackboneConfig, BoxHeadKind};
use crate::synth::SynthConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// Base Adam learning rate; reduced by `lr_drop` on validation plateau.
    pub lr: f64,
    pub lr_drop: f64,
    /// Evaluations without >min_delta improvement before an LR drop.
    pub patience: usize,
    pub min_delta: f64,
    /// Validation cadence in steps.
    pub eval_every: usize,
    /// Validation volumes per evaluation.
    pub val_volumes: usize,
    /// Crop size (D,H,W); crops are lesion-centered with probability
    /// `lesion_crop_prob`, otherwise uniform.
    pub crop: [usize; 3],
    pub lesion_crop_prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    /// Weight on (L_pts + L_tri) in the joint loss.
    pub aux_weight: f64,
    /// Heatmap clamp epsilon before logs.
    pub eps: f64,
    pub tri_normalization: TriNormalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub top_k: usize,
    pub score_min: f64,
    pub iou: f64,
    pub fp_points: Vec<f64>,
    pub size_cutoffs_mm: Vec<f64>,
    /// FP/volume operating point for the size-stratified table.
    pub strata_fp: f64,
    pub double_match: DoubleMatchPolicy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    /// Input size (D,H,W) for analytic FLOP accounting.
    pub flops_input: [usize; 3],
    /// Input size (D,H,W) for wall-time measurement.
    pub time_input: [usize; 3],
    pub time_runs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: BackboneConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 17,
            model: BackboneConfig::default(),
            synth: SynthConfig::default(),
            train: TrainConfig {
                steps: 1500,
                batch_size: 1,
                lr: 0.0001,
                lr_drop: 0.1,
                patience: 5,
                min_delta: 1e-4,
                eval_every: 100,
                val_volumes: 8,
                crop: [64, 64, 64],
                lesion_crop_prob: 0.5,
            },
            loss: LossConfig {
                aux_weight: 0.1,
                eps: 1e-4,
                tri_normalization: TriNormalization::Lesions,
            },
            eval: EvalConfig {
                top_k: 50,
                score_min: 0.05,
                iou: 0.3,
                fp_points: crate::eval::FP_POINTS.to_vec(),
                size_cutoffs_mm: vec![20.0, 50.0],
                strata_fp: 1.0,
                double_match: DoubleMatchPolicy::CountFp,
            },
            bench: BenchConfig {
                flops_input: [32, 256, 256],
                time_input: [16, 64, 64],
                time_runs: 10,
            },
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Config(format!("{key}: cannot parse '{v}': {e}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    v.split(',').map(|p| parse_num::<T>(key, p.trim())).collect()
}

fn parse_triple(key: &str, v: &str) -> Result<[usize; 3]> {
    let parts = parse_list::<usize>(key, v)?;
    parts
        .try_into()
        .map_err(|_| Error::Config(format!("{key}: expected three comma-separated values")))
}

fn parse_pair_f(key: &str, v: &str) -> Result<(f64, f64)> {
    match parse_list::<f64>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("{key}: expected two comma-separated values"))),
    }
}

fn parse_pair_u(key: &str, v: &str) -> Result<(usize, usize)> {
    match parse_list::<usize>(key, v)?.as_slice() {
        [a, b] => Ok((*a, *b)),
        _ => Err(Error::Config(format!("{key}: expected two comma-separated values"))),
    }
}

impl RunConfig {
    /// Parse a config text over the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(i) => &raw[..i],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: '{line}' is not key = value", lineno + 1))
            })?;
            cfg.apply(key.trim(), value.trim())?;
        }
        // The detector's input channel count follows the synthetic phases.
        cfg.model.phases = cfg.synth.phases;
        cfg.model.validate()?;
        cfg.synth.validate()?;
        Ok(cfg)
    }

    pub fn parse_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => {
                self.seed = parse_num(key, v)?;
                self.synth.seed = self.seed;
            }
            "model.variant" => self.model.variant = P3dcVariant::parse(v)?,
            "model.growth" => self.model.growth = parse_num(key, v)?,
            "model.blocks" => self.model.blocks = parse_triple(key, v)?,
            "model.stem_channels" => self.model.stem_channels = parse_num(key, v)?,
            "model.fpn_channels" => self.model.fpn_channels = parse_num(key, v)?,
            "model.head_channels" => self.model.head_channels = parse_num(key, v)?,
            "model.n_points" => self.model.n_points = parse_num(key, v)?,
            "model.embed_channels" => self.model.embed_channels = parse_num(key, v)?,
            "model.acs_ratio" => {
                let t = parse_triple(key, v)?;
                self.model.acs_ratio = (t[0], t[1], t[2]);
            }
            "model.i3d_depth" => self.model.i3d_depth = parse_num(key, v)?,
            "model.box_head" => self.model.box_head = BoxHeadKind::parse(v)?,
            "synth.dims" => self.synth.dims = parse_triple(key, v)?,
            "synth.spacing" => {
                let s = parse_list::<f64>(key, v)?;
                self.synth.spacing = s.try_into().map_err(|_| {
                    Error::Config(format!("{key}: expected three comma-separated values"))
                })?;
            }
            "synth.lesions" => self.synth.lesions = parse_pair_u(key, v)?,
            "synth.radius_z" => self.synth.radius_z = parse_pair_f(key, v)?,
            "synth.radius_y" => self.synth.radius_y = parse_pair_f(key, v)?,
            "synth.radius_x" => self.synth.radius_x = parse_pair_f(key, v)?,
            "synth.confusers" => self.synth.confusers = parse_pair_u(key, v)?,
            "synth.background" => self.synth.background = parse_num(key, v)?,
            "synth.lesion_intensity" => self.synth.lesion_intensity = parse_num(key, v)?,
            "synth.confuser_intensity" => self.synth.confuser_intensity = parse_num(key, v)?,
            "synth.noise_sigma" => self.synth.noise_sigma = parse_num(key, v)?,
            "synth.phases" => self.synth.phases = parse_num(key, v)?,
            "synth.phase_contrast" => self.synth.phase_contrast = parse_list(key, v)?,
            "synth.split" => self.synth.split = parse_triple(key, v)?,
            "train.steps" => self.train.steps = parse_num(key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, v)?,
            "train.lr" => self.train.lr = parse_num(key, v)?,
            "train.lr_drop" => self.train.lr_drop = parse_num(key, v)?,
            "train.patience" => self.train.patience = parse_num(key, v)?,
            "train.min_delta" => self.train.min_delta = parse_num(key, v)?,
            "train.eval_every" => self.train.eval_every = parse_num(key, v)?,
            "train.val_volumes" => self.train.val_volumes = parse_num(key, v)?,
            "train.crop" => self.train.crop = parse_triple(key, v)?,
            "train.lesion_crop_prob" => self.train.lesion_crop_prob = parse_num(key, v)?,
            "loss.aux_weight" => self.loss.aux_weight = parse_num(key, v)?,
            "loss.eps" => self.loss.eps = parse_num(key, v)?,
            "loss.tri_normalization" => {
                self.loss.tri_normalization = TriNormalization::parse(v)?
            }
            "eval.top_k" => self.eval.top_k = parse_num(key, v)?,
            "eval.score_min" => self.eval.score_min = parse_num(key, v)?,
            "eval.iou" => self.eval.iou = parse_num(key, v)?,
            "eval.fp_points" => self.eval.fp_points = parse_list(key, v)?,
            "eval.size_cutoffs_mm" => self.eval.size_cutoffs_mm = parse_list(key, v)?,
            "eval.strata_fp" => self.eval.strata_fp = parse_num(key, v)?,
            "eval.double_match" => self.eval.double_match = DoubleMatchPolicy::parse(v)?,
            "bench.flops_input" => self.bench.flops_input = parse_triple(key, v)?,
            "bench.time_input" => self.bench.time_input = parse_triple(key, v)?,
            "bench.time_runs" => self.bench.time_runs = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Canonical full listing of every key.
    pub fn to_text(&self) -> String {
        let join_f = |v: &[f64]| -> String {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        let m = &self.model;
        let s = &self.synth;
        let t = &self.train;
        let l = &self.loss;
        let e = &self.eval;
        let b = &self.bench;
        format!(
            "seed = {}\n\
             model.variant = {}\n\
             model.growth = {}\n\
             model.blocks = {},{},{}\n\
             model.stem_channels = {}\n\
             model.fpn_channels = {}\n\
             model.head_channels = {}\n\
             model.n_points = {}\n\
             model.embed_channels = {}\n\
             model.acs_ratio = {},{},{}\n\
             model.i3d_depth = {}\n\
             model.box_head = {}\n\
             synth.dims = {},{},{}\n\
             synth.spacing = {}\n\
             synth.lesions = {},{}\n\
             synth.radius_z = {},{}\n\
             synth.radius_y = {},{}\n\
             synth.radius_x = {},{}\n\
             synth.confusers = {},{}\n\
             synth.background = {}\n\
             synth.lesion_intensity = {}\n\
             synth.confuser_intensity = {}\n\
             synth.noise_sigma = {}\n\
             synth.phases = {}\n\
             synth.phase_contrast = {}\n\
             synth.split = {},{},{}\n\
             train.steps = {}\n\
             train.batch_size = {}\n\
             train.lr = {}\n\
             train.lr_drop = {}\n\
             train.patience = {}\n\
             train.min_delta = {}\n\
             train.eval_every = {}\n\
             train.val_volumes = {}\n\
             train.crop = {},{},{}\n\
             train.lesion_crop_prob = {}\n\
             loss.aux_weight = {}\n\
             loss.eps = {}\n\
             loss.tri_normalization = {}\n\
             eval.top_k = {}\n\
             eval.score_min = {}\n\
             eval.iou = {}\n\
             eval.fp_points = {}\n\
             eval.size_cutoffs_mm = {}\n\
             eval.strata_fp = {}\n\
             eval.double_match = {}\n\
             bench.flops_input = {},{},{}\n\
             bench.time_input = {},{},{}\n\
             bench.time_runs = {}\n",
            self.seed,
            m.variant,
            m.growth,
            m.blocks[0],
            m.blocks[1],
            m.blocks[2],
            m.stem_channels,
            m.fpn_channels,
            m.head_channels,
            m.n_points,
            m.embed_channels,
            m.acs_ratio.0,
            m.acs_ratio.1,
            m.acs_ratio.2,
            m.i3d_depth,
            m.box_head.name(),
            s.dims[0],
            s.dims[1],
            s.dims[2],
            join_f(&s.spacing),
            s.lesions.0,
            s.lesions.1,
            s.radius_z.0,
            s.radius_z.1,
            s.radius_y.0,
            s.radius_y.1,
            s.radius_x.0,
            s.radius_x.1,
            s.confusers.0,
            s.confusers.1,
            s.background,
            s.lesion_intensity,
            s.confuser_intensity,
            s.noise_sigma,
            s.phases,
            join_f(&s.phase_contrast),
            s.split[0],
            s.split[1],
            s.split[2],
            t.steps,
            t.batch_size,
            t.lr,
            t.lr_drop,
            t.patience,
            t.min_delta,
            t.eval_every,
            t.val_volumes,
            t.crop[0],
            t.crop[1],
            t.crop[2],
            t.lesion_crop_prob,
            l.aux_weight,
            l.eps,
            match l.tri_normalization {
                TriNormalization::Lesions => "lesions",
                TriNormalization::LesionsPoints => "lesions_points",
            },
            e.top_k,
            e.score_min,
            e.iou,
            join_f(&e.fp_points),
            join_f(&e.size_cutoffs_mm),
            e.strata_fp,
            match e.double_match {
                DoubleMatchPolicy::CountFp => "fp",
                DoubleMatchPolicy::Ignore => "ignore",
            },
            b.flops_input[0],
            b.flops_input[1],
            b.flops_input[2],
            b.time_input[0],
            b.time_input[1],
            b.time_input[2],
            b.time_runs,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reference_values() {
        let c = RunConfig::default();
        assert_eq!(c.train.lr, 0.0001);
        assert_eq!(c.loss.aux_weight, 0.1);
        assert_eq!(c.eval.iou, 0.3);
        assert_eq!(c.eval.fp_points.len(), 8);
        assert_eq!(c.model.fpn_channels, 512);
        assert_eq!(c.model.head_channels, 256);
        assert_eq!(c.model.n_points, 16);
        assert_eq!(c.model.embed_channels, 128);
        assert_eq!(c.synth.split, [384, 92, 98]);
        assert_eq!(c.bench.flops_input, [32, 256, 256]);
    }

    #[test]
    fn unknown_key_is_an_error_naming_the_key() {
        let err = RunConfig::parse("model.growht = 8\n").unwrap_err();
        assert!(err.to_string().contains("model.growht"), "{err}");
    }

    #[test]
    fn parse_applies_values_and_comments() {
        let text = "# comment line\nmodel.variant = st3d  # trailing\ntrain.lr = 0.001\nsynth.phases = 2\nsynth.phase_contrast = 1.0,0.5\n";
        let c = RunConfig::parse(text).unwrap();
        assert_eq!(c.model.variant, P3dcVariant::St3d);
        assert_eq!(c.train.lr, 0.001);
        assert_eq!(c.model.phases, 2, "model phases follow synth.phases");
    }

    #[test]
    fn roundtrip_through_text_is_identity() {
        let mut c = RunConfig::default();
        c.model.variant = P3dcVariant::I3d;
        c.train.steps = 321;
        c.eval.double_match = DoubleMatchPolicy::Ignore;
        c.loss.tri_normalization = TriNormalization::LesionsPoints;
        let text = c.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn malformed_line_is_an_error() {
        assert!(RunConfig::parse("model.growth 8\n").is_err());
        assert!(RunConfig::parse("train.lr = fast\n").is_err());
    }
}
