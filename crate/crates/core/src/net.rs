//! Detector network: slice-wise 2-D front-end, pseudo-3D third dense block,
//! FPN fusion, a center-heatmap head and a surface-point regression head.
//!
//! Geometry: the stem applies stride (2,2,2) then (1,2,2) with depth-1
//! kernels, so block 1 (and the head grid) sits at output stride 2 axial /
//! 4 in-plane. Transitions downsample in-plane by 2; the transition into
//! block 3 also halves the axial dim. FPN projections are upsampled
//! (nearest) to block 1's grid and summed.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::boxes::GridMap;
use crate::checkpoint::{self, Entry};
use crate::convert::{self, Conv2dWeights, P3dcVariant};
use crate::error::{Error, Result};
use crate::tensor::{ConvGeom, Elem, Tape, Tensor};

/// Initial bias of the heatmap projection: sigmoid(-2.19) ~ 0.1, a stable
/// starting prior for the focal loss.
pub const CENTER_BIAS_INIT: f64 = -2.19;

/// Axial / in-plane output stride of the head grid, fixed by the stem.
pub const STRIDE_AXIAL: usize = 2;
pub const STRIDE_INPLANE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxHeadKind {
    /// Surface point regression: offsets + refinement field + embeddings.
    Spr,
    /// Direct per-axis extent regression from center features.
    Direct,
}

impl BoxHeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "spr" => Ok(BoxHeadKind::Spr),
            "direct" => Ok(BoxHeadKind::Direct),
            other => Err(Error::Config(format!("unknown box head '{other}' (expected spr|direct)"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BoxHeadKind::Spr => "spr",
            BoxHeadKind::Direct => "direct",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneConfig {
    pub variant: P3dcVariant,
    pub growth: usize,
    pub blocks: [usize; 3],
    pub stem_channels: usize,
    pub fpn_channels: usize,
    pub head_channels: usize,
    pub n_points: usize,
    pub embed_channels: usize,
    pub acs_ratio: (usize, usize, usize),
    pub i3d_depth: usize,
    /// Input channels; >1 for phase-stacked volumes.
    pub phases: usize,
    pub box_head: BoxHeadKind,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            variant: P3dcVariant::Acs3d,
            growth: 8,
            blocks: [2, 2, 4],
            stem_channels: 16,
            fpn_channels: 512,
            head_channels: 256,
            n_points: 16,
            embed_channels: 128,
            acs_ratio: (8, 1, 1),
            i3d_depth: 3,
            phases: 1,
            box_head: BoxHeadKind::Spr,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks[2] < 1 {
            return Err(Error::Config("block 3 needs at least one layer".into()));
        }
        if self.n_points < 4 {
            return Err(Error::Config("n_points must be >= 4".into()));
        }
        if self.fpn_channels == 0 || self.head_channels < 3 || self.growth == 0 {
            return Err(Error::Config("channel counts must be positive (head >= 3)".into()));
        }
        if self.embed_channels == 0 || self.stem_channels == 0 || self.phases == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> GridMap {
        GridMap::new(STRIDE_AXIAL, STRIDE_INPLANE)
    }
}

// ── Parameter store ──────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors. The registration order is the
/// checkpoint entry order.
pub struct ParamStore<T: Elem> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Elem> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), index: HashMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Argument(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.entries.len());
        self.index.insert(name.clone(), id.0);
        self.entries.push((name, value));
        Ok(id)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].1
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        if value.shape() != self.entries[id.0].1.shape() {
            return Err(Error::Dimension(format!(
                "parameter {} shape {:?} cannot take value of shape {:?}",
                self.entries[id.0].0,
                self.entries[id.0].1.shape(),
                value.shape()
            )));
        }
        self.entries[id.0].1 = value;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    /// Register every parameter as a leaf on `tape` for one forward pass.
    pub fn track(&self, tape: &mut Tape<T>) -> TrackedParams<T> {
        TrackedParams { tensors: self.entries.iter().map(|(_, t)| tape.leaf(t)).collect() }
    }
}

impl<T: Elem> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-tape tracked views of every parameter.
pub struct TrackedParams<T: Elem> {
    tensors: Vec<Tensor<T>>,
}

impl<T: Elem> TrackedParams<T> {
    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.tensors.iter()
    }
}

// ── Layer references ─────────────────────────────────────────────────

#[derive(Debug, Clone)]
struct ConvRef {
    kernel: ParamId,
    bias: Option<ParamId>,
    geom: ConvGeom,
}

impl ConvRef {
    fn apply<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        params: &TrackedParams<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        tape.conv3d(x, params.get(self.kernel), self.bias.map(|b| params.get(b)), self.geom)
    }
}

#[derive(Debug, Clone)]
struct BranchRef {
    kernel: ParamId,
    bias: Option<ParamId>,
    pad: [usize; 3],
}

/// A converted pseudo-3D layer by parameter reference, with the optional
/// 1x1x1 projection that maps ST3D's doubled channels back to c_o.
#[derive(Debug, Clone)]
struct P3dcRef {
    branches: Vec<BranchRef>,
    projection: Option<ConvRef>,
}

impl P3dcRef {
    fn apply<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        params: &TrackedParams<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut outs = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            outs.push(tape.conv3d(
                x,
                params.get(b.kernel),
                b.bias.map(|id| params.get(id)),
                ConvGeom::new([1, 1, 1], b.pad),
            )?);
        }
        let fused = if outs.len() == 1 {
            outs.pop().unwrap()
        } else {
            let refs: Vec<&Tensor<T>> = outs.iter().collect();
            tape.concat(&refs, 1)?
        };
        match &self.projection {
            Some(proj) => proj.apply(tape, params, &fused),
            None => Ok(fused),
        }
    }
}

#[derive(Debug, Clone)]
enum DenseLayer {
    Plain(ConvRef),
    P3dc(P3dcRef),
}

impl DenseLayer {
    fn apply<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        params: &TrackedParams<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        match self {
            DenseLayer::Plain(c) => c.apply(tape, params, x),
            DenseLayer::P3dc(p) => p.apply(tape, params, x),
        }
    }
}

#[derive(Debug, Clone)]
struct DenseBlock {
    layers: Vec<DenseLayer>,
}

impl DenseBlock {
    /// features_{i+1} = concat(features_i, relu(conv_i(features_i)))
    fn apply<T: Elem>(
        &self,
        tape: &mut Tape<T>,
        params: &TrackedParams<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let mut features = x.clone();
        for layer in &self.layers {
            let h = layer.apply(tape, params, &features)?;
            let h = tape.relu(&h);
            features = tape.concat(&[&features, &h], 1)?;
        }
        Ok(features)
    }
}

// ── Detector ─────────────────────────────────────────────────────────

enum BoxHeadRef {
    Spr { points: ConvRef, refine: ConvRef, embed: ConvRef },
    Direct { sizes: ConvRef },
}

/// Head outputs for one volume; heatmap is pre-sigmoid.
pub struct DetectorOutputs<T: Elem> {
    pub heatmap: Tensor<T>,
    pub point_offsets: Option<Tensor<T>>,
    pub refine_field: Option<Tensor<T>>,
    pub embeddings: Option<Tensor<T>>,
    pub sizes: Option<Tensor<T>>,
}

impl<T: Elem> DetectorOutputs<T> {
    /// Head grid dims (d', h', w').
    pub fn grid_dims(&self) -> [usize; 3] {
        let s = self.heatmap.shape();
        [s[2], s[3], s[4]]
    }
}

/// The regressed surface point set gathered at one center, all tensors on
/// the gathering tape.
pub struct PointSet<T: Elem> {
    /// Absolute points P in feature-grid coords, `[n,3]` rows (x,y,z).
    pub points: Tensor<T>,
    /// Refinement offsets sampled at P.
    pub deltas: Tensor<T>,
    /// Refined points P_r = P + deltas.
    pub refined: Tensor<T>,
    /// Embeddings sampled at P_r, `[n,E]`.
    pub point_embeds: Tensor<T>,
    /// Embedding at the center, `[1,E]`.
    pub center_embed: Tensor<T>,
    /// Embeddings at the 8 current-box corners, `[8,E]`.
    pub corner_embeds: Tensor<T>,
    /// Per-axis extremes of the refined set (x, y, z), scalar tensors.
    pub min_xyz: [Tensor<T>; 3],
    pub max_xyz: [Tensor<T>; 3],
}

pub struct DetectorNet<T: Elem> {
    pub config: BackboneConfig,
    pub store: ParamStore<T>,
    stem1: ConvRef,
    stem2: ConvRef,
    block1: DenseBlock,
    trans1: ConvRef,
    block2: DenseBlock,
    trans2: ConvRef,
    block3: DenseBlock,
    fpn: [ConvRef; 3],
    center_trunk: P3dcRef,
    center_out: ConvRef,
    box_trunk: P3dcRef,
    box_head: BoxHeadRef,
}

struct Builder<T: Elem> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Elem> Builder<T> {
    /// He-normal 2-D weights: std = sqrt(2 / fan_in).
    fn weights_2d(&mut self, co: usize, ci: usize, n: usize, bias: bool) -> Conv2dWeights<T> {
        let std = (2.0 / (ci * n * n) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("valid normal");
        let data: Vec<T> =
            (0..co * ci * n * n).map(|_| T::from_f64(dist.sample(&mut self.rng))).collect();
        let kernel = Tensor::from_vec(&[co, ci, n, n], data).expect("shape consistent");
        let bias = bias.then(|| Tensor::zeros(&[co]));
        Conv2dWeights::new(kernel, bias).expect("valid weights")
    }

    /// Small-scale 2-D weights for projections that should start near zero.
    fn weights_2d_small(&mut self, co: usize, ci: usize, std: f64) -> Conv2dWeights<T> {
        let dist = Normal::new(0.0, std).expect("valid normal");
        let data: Vec<T> = (0..co * ci).map(|_| T::from_f64(dist.sample(&mut self.rng))).collect();
        let kernel = Tensor::from_vec(&[co, ci, 1, 1], data).expect("shape consistent");
        Conv2dWeights::new(kernel, Some(Tensor::zeros(&[co]))).expect("valid weights")
    }

    /// Register a slicewise-lifted conv with explicit stride.
    fn slicewise(
        &mut self,
        name: &str,
        w: &Conv2dWeights<T>,
        stride: [usize; 3],
    ) -> Result<ConvRef> {
        let layer = convert::slicewise_lift(w)?;
        let b = &layer.branches[0];
        let kernel = self.store.register(format!("{name}.kernel"), b.kernel.clone())?;
        let bias = match &b.bias {
            Some(t) => Some(self.store.register(format!("{name}.bias"), t.clone())?),
            None => None,
        };
        Ok(ConvRef { kernel, bias, geom: ConvGeom::new(stride, b.pad) })
    }

    fn register_p3dc(
        &mut self,
        name: &str,
        layer: &convert::P3dcLayer<T>,
        projection: Option<Conv2dWeights<T>>,
    ) -> Result<P3dcRef> {
        let labels: &[&str] = match layer.variant {
            P3dcVariant::Slicewise | P3dcVariant::I3d => &["k"],
            P3dcVariant::St3d => &["spatial", "temporal"],
            P3dcVariant::Acs3d => &["axial", "coronal", "sagittal"],
        };
        let mut branches = Vec::with_capacity(layer.branches.len());
        for (b, label) in layer.branches.iter().zip(labels) {
            let kernel =
                self.store.register(format!("{name}.{label}.kernel"), b.kernel.clone())?;
            let bias = match &b.bias {
                Some(t) => Some(self.store.register(format!("{name}.{label}.bias"), t.clone())?),
                None => None,
            };
            branches.push(BranchRef { kernel, bias, pad: b.pad });
        }
        let projection = match projection {
            Some(w) => {
                let lifted = convert::slicewise_lift(&w)?;
                let pb = &lifted.branches[0];
                let kernel =
                    self.store.register(format!("{name}.proj.kernel"), pb.kernel.clone())?;
                let bias = match &pb.bias {
                    Some(t) => Some(self.store.register(format!("{name}.proj.bias"), t.clone())?),
                    None => None,
                };
                Some(ConvRef { kernel, bias, geom: ConvGeom::new([1, 1, 1], pb.pad) })
            }
            None => None,
        };
        Ok(P3dcRef { branches, projection })
    }

    /// One dense layer: 2-D weights converted per the block's variant.
    fn dense_layer(
        &mut self,
        name: &str,
        c_in: usize,
        growth: usize,
        variant: P3dcVariant,
        cfg: &BackboneConfig,
    ) -> Result<DenseLayer> {
        let w = self.weights_2d(growth, c_in, 3, true);
        match variant {
            P3dcVariant::Slicewise => {
                Ok(DenseLayer::Plain(self.slicewise(name, &w, [1, 1, 1])?))
            }
            _ => {
                let layer =
                    convert::convert(&w, variant, cfg.acs_ratio, cfg.i3d_depth, &mut self.rng)?;
                let projection = (variant == P3dcVariant::St3d)
                    .then(|| self.weights_2d(growth, 2 * growth, 1, true));
                Ok(DenseLayer::P3dc(self.register_p3dc(name, &layer, projection)?))
            }
        }
    }

    fn dense_block(
        &mut self,
        name: &str,
        c_in: usize,
        layers: usize,
        growth: usize,
        variant: P3dcVariant,
        cfg: &BackboneConfig,
    ) -> Result<(DenseBlock, usize)> {
        let mut out = Vec::with_capacity(layers);
        let mut channels = c_in;
        for i in 0..layers {
            out.push(self.dense_layer(&format!("{name}.l{i}"), channels, growth, variant, cfg)?);
            channels += growth;
        }
        Ok((DenseBlock { layers: out }, channels))
    }
}

impl<T: Elem> DetectorNet<T> {
    /// Deterministic construction from a config and seed.
    pub fn build(config: BackboneConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::<T> {
            store: ParamStore::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5EED_0001),
        };
        let g = config.growth;

        // Stem: depth-1 kernels; the first conv carries the axial stride.
        let stem_w = b.weights_2d(config.stem_channels, 1, 3, true);
        let stem_w = convert::inflate_input_channels(&stem_w, config.phases)?;
        let stem1 = b.slicewise("stem.c1", &stem_w, [2, 2, 2])?;
        let w = b.weights_2d(config.stem_channels, config.stem_channels, 3, true);
        let stem2 = b.slicewise("stem.c2", &w, [1, 2, 2])?;

        let (block1, c1) = b.dense_block(
            "block1",
            config.stem_channels,
            config.blocks[0],
            g,
            P3dcVariant::Slicewise,
            &config,
        )?;
        let w = b.weights_2d(c1, c1, 3, true);
        let trans1 = b.slicewise("trans1", &w, [1, 2, 2])?;

        let (block2, c2) =
            b.dense_block("block2", c1, config.blocks[1], g, P3dcVariant::Slicewise, &config)?;
        // Axial downsampling happens only here, entering block 3.
        let w = b.weights_2d(c2, c2, 3, true);
        let trans2 = b.slicewise("trans2", &w, [2, 2, 2])?;

        let (block3, c3) =
            b.dense_block("block3", c2, config.blocks[2], g, config.variant, &config)?;

        let w1 = b.weights_2d(config.fpn_channels, c1, 1, true);
        let w2 = b.weights_2d(config.fpn_channels, c2, 1, true);
        let w3 = b.weights_2d(config.fpn_channels, c3, 1, true);
        let fpn = [
            b.slicewise("fpn.p1", &w1, [1, 1, 1])?,
            b.slicewise("fpn.p2", &w2, [1, 1, 1])?,
            b.slicewise("fpn.p3", &w3, [1, 1, 1])?,
        ];

        // Heads: an ACS3D 3x3x3 trunk + 1x1x1 projections, randomly
        // initialized.
        let w = b.weights_2d(config.head_channels, config.fpn_channels, 3, true);
        let trunk = convert::acs3d_convert(&w, config.acs_ratio)?;
        let center_trunk = b.register_p3dc("head.center.trunk", &trunk, None)?;
        let mut out_w = b.weights_2d(1, config.head_channels, 1, false);
        out_w.bias = Some(Tensor::from_vec(&[1], vec![T::from_f64(CENTER_BIAS_INIT)])?);
        let center_out = b.slicewise("head.center.out", &out_w, [1, 1, 1])?;

        let w = b.weights_2d(config.head_channels, config.fpn_channels, 3, true);
        let trunk = convert::acs3d_convert(&w, config.acs_ratio)?;
        let box_trunk = b.register_p3dc("head.box.trunk", &trunk, None)?;
        let box_head = match config.box_head {
            BoxHeadKind::Spr => {
                let points_w =
                    b.weights_2d_small(3 * config.n_points, config.head_channels, 0.01);
                let points = b.slicewise("head.box.points", &points_w, [1, 1, 1])?;
                let refine_w = b.weights_2d_small(3, config.head_channels, 0.01);
                let refine = b.slicewise("head.box.refine", &refine_w, [1, 1, 1])?;
                let embed_w = b.weights_2d(config.embed_channels, config.head_channels, 1, true);
                let embed = b.slicewise("head.box.embed", &embed_w, [1, 1, 1])?;
                BoxHeadRef::Spr { points, refine, embed }
            }
            BoxHeadKind::Direct => {
                let mut sizes_w = b.weights_2d_small(3, config.head_channels, 0.01);
                // Start extents around 3 grid cells rather than zero.
                sizes_w.bias = Some(Tensor::from_vec(&[3], vec![T::from_f64(3.0); 3])?);
                let sizes = b.slicewise("head.box.sizes", &sizes_w, [1, 1, 1])?;
                BoxHeadRef::Direct { sizes }
            }
        };

        Ok(DetectorNet {
            config,
            store: b.store,
            stem1,
            stem2,
            block1,
            trans1,
            block2,
            trans2,
            block3,
            fpn,
            center_trunk,
            center_out,
            box_trunk,
            box_head,
        })
    }

    pub fn grid(&self) -> GridMap {
        self.config.grid()
    }

    pub fn param_count(&self) -> usize {
        self.store.total_values()
    }

    /// Full forward pass over `[1,C,D,H,W]`. D must be divisible by 4 and
    /// H, W by 16 so the three feature grids align for FPN fusion.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        params: &TrackedParams<T>,
        volume: &Tensor<T>,
    ) -> Result<DetectorOutputs<T>> {
        let x = self.stem1.apply(tape, params, volume)?;
        let x = tape.relu(&x);
        let x = self.stem2.apply(tape, params, &x)?;
        let x = tape.relu(&x);

        let b1 = self.block1.apply(tape, params, &x)?;
        let t = self.trans1.apply(tape, params, &b1)?;
        let t = tape.relu(&t);
        let b2 = self.block2.apply(tape, params, &t)?;
        let t = self.trans2.apply(tape, params, &b2)?;
        let t = tape.relu(&t);
        let b3 = self.block3.apply(tape, params, &t)?;

        let p1 = self.fpn[0].apply(tape, params, &b1)?;
        let p2 = self.fpn[1].apply(tape, params, &b2)?;
        let p3 = self.fpn[2].apply(tape, params, &b3)?;
        let deep = fuse_maps(tape, &[p1, p2, p3])?;
        let deep = tape.relu(&deep);

        let ct = self.center_trunk.apply(tape, params, &deep)?;
        let ct = tape.relu(&ct);
        let heatmap = self.center_out.apply(tape, params, &ct)?;

        let bt = self.box_trunk.apply(tape, params, &deep)?;
        let bt = tape.relu(&bt);
        let mut outputs = DetectorOutputs {
            heatmap,
            point_offsets: None,
            refine_field: None,
            embeddings: None,
            sizes: None,
        };
        match &self.box_head {
            BoxHeadRef::Spr { points, refine, embed } => {
                outputs.point_offsets = Some(points.apply(tape, params, &bt)?);
                outputs.refine_field = Some(refine.apply(tape, params, &bt)?);
                outputs.embeddings = Some(embed.apply(tape, params, &bt)?);
            }
            BoxHeadRef::Direct { sizes } => {
                outputs.sizes = Some(sizes.apply(tape, params, &bt)?);
            }
        }
        Ok(outputs)
    }

    // ── Checkpointing ────────────────────────────────────────────────

    /// Serialize parameters plus the run-config text block.
    pub fn to_entries(&self, config_text: &str) -> Vec<Entry> {
        let mut entries = Vec::with_capacity(self.store.len() + 1);
        entries.push(Entry::from_text(checkpoint::CONFIG_ENTRY, config_text));
        for (name, t) in self.store.iter() {
            let dims: Vec<u32> = t.shape().iter().map(|&d| d as u32).collect();
            let values: Vec<f32> = t.data().iter().map(|v| v.as_f32()).collect();
            entries.push(Entry::new(name, dims, values).expect("consistent shape"));
        }
        entries
    }

    /// Load parameter values by name; every entry must match an existing
    /// tensor in name and shape.
    pub fn load_entries(&mut self, entries: &[Entry]) -> Result<()> {
        let mut by_name: HashMap<&str, &Entry> = HashMap::new();
        for e in entries {
            if e.name != checkpoint::CONFIG_ENTRY {
                by_name.insert(e.name.as_str(), e);
            }
        }
        for id in self.store.ids().collect::<Vec<_>>() {
            let name = self.store.name(id).to_string();
            let e = by_name.remove(name.as_str()).ok_or_else(|| {
                Error::Checkpoint(format!("checkpoint is missing tensor '{name}'"))
            })?;
            let dims: Vec<usize> = e.dims.iter().map(|&d| d as usize).collect();
            if dims != self.store.get(id).shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor '{name}' has shape {:?} in checkpoint, expected {:?}",
                    dims,
                    self.store.get(id).shape()
                )));
            }
            let data: Vec<T> = e.values.iter().map(|&v| T::from_f32(v)).collect();
            self.store.set(id, Tensor::from_vec(&dims, data)?)?;
        }
        if let Some(extra) = by_name.keys().next() {
            return Err(Error::Checkpoint(format!("checkpoint has unknown tensor '{extra}'")));
        }
        Ok(())
    }
}

/// Conversion report for the pseudo-3D third dense block of a config, with
/// FLOPs accounted at the given input volume size (D,H,W).
pub fn block3_report(config: &BackboneConfig, input_dhw: [usize; 3]) -> Result<crate::convert::ConversionReport> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let c2 = config.stem_channels + (config.blocks[0] + config.blocks[1]) * config.growth;
    // Block 3 runs at stride 4 axial, 16 in-plane.
    let grid = [
        (input_dhw[0] / (2 * STRIDE_AXIAL)).max(1),
        (input_dhw[1] / (4 * STRIDE_INPLANE)).max(1),
        (input_dhw[2] / (4 * STRIDE_INPLANE)).max(1),
    ];
    let mut report = crate::convert::ConversionReport::default();
    for i in 0..config.blocks[2] {
        let c_in = c2 + i * config.growth;
        let dist = Normal::new(0.0, 0.01).expect("valid normal");
        let kernel: Vec<f32> = (0..config.growth * c_in * 9)
            .map(|_| dist.sample(&mut rng) as f32)
            .collect();
        let w = Conv2dWeights::new(
            Tensor::from_vec(&[config.growth, c_in, 3, 3], kernel)?,
            Some(Tensor::zeros(&[config.growth])),
        )?;
        let layer = convert::convert(&w, config.variant, config.acs_ratio, config.i3d_depth, &mut rng)?;
        let (mut params_3d, mut flops) = convert::count_params_flops(
            &layer,
            &[1, c_in, grid[0], grid[1], grid[2]],
        )?;
        if config.variant == P3dcVariant::St3d {
            // The 1x1x1 projection back to c_o channels.
            let proj_params = config.growth * 2 * config.growth + config.growth;
            params_3d += proj_params;
            flops += 2 * (2 * config.growth as u128 + 1)
                * (config.growth as u128 * grid.iter().map(|&d| d as u128).product::<u128>());
        }
        report.layers.push(convert::LayerReport {
            name: format!("block3.l{i}"),
            variant: config.variant,
            params_2d: w.param_count(),
            params_3d,
            flops,
        });
    }
    Ok(report)
}

/// Upsample every map (nearest) to the first map's grid and sum. The first
/// map must be the finest; mismatched strides are a geometry error.
pub fn fuse_maps<T: Elem>(tape: &mut Tape<T>, maps: &[Tensor<T>]) -> Result<Tensor<T>> {
    let first = maps
        .first()
        .ok_or_else(|| Error::Argument("fuse_maps needs at least one map".into()))?;
    let target = first.shape().to_vec();
    let mut acc = first.clone();
    for m in &maps[1..] {
        let s = m.shape();
        if s[1] != target[1] {
            return Err(Error::Dimension(format!(
                "fused maps must share channels: {:?} vs {:?}",
                s, target
            )));
        }
        let mut factors = [0usize; 3];
        for a in 0..3 {
            let (t, c) = (target[2 + a], s[2 + a]);
            if c == 0 || t % c != 0 {
                return Err(Error::Geometry(format!(
                    "feature grid {:?} does not upsample to {:?}",
                    s, target
                )));
            }
            factors[a] = t / c;
        }
        let up = tape.upsample_nearest(m, factors)?;
        acc = tape.add(&acc, &up)?;
    }
    Ok(acc)
}

/// Gather the surface point set at a lesion center given in feature-grid
/// coordinates (x, y, z): read 3n offsets at the center, refine each point
/// by the offset field sampled at it, then sample embeddings at the refined
/// points, the center, and the 8 corners of the current box.
pub fn gather_point_set<T: Elem>(
    tape: &mut Tape<T>,
    outputs: &DetectorOutputs<T>,
    center: [f64; 3],
) -> Result<PointSet<T>> {
    let [gd, gh, gw] = outputs.grid_dims();
    if center[0] < 0.0
        || center[0] > (gw - 1) as f64
        || center[1] < 0.0
        || center[1] > (gh - 1) as f64
        || center[2] < 0.0
        || center[2] > (gd - 1) as f64
    {
        return Err(Error::Argument(format!(
            "center {center:?} outside feature grid {gw}x{gh}x{gd}"
        )));
    }
    let offsets_map = outputs
        .point_offsets
        .as_ref()
        .ok_or_else(|| Error::Argument("outputs carry no point offsets (direct head?)".into()))?;
    let refine_map = outputs.refine_field.as_ref().expect("refine field present with offsets");
    let embed_map = outputs.embeddings.as_ref().expect("embeddings present with offsets");

    let n = offsets_map.shape()[1] / 3;
    let offsets_map = offsets_map.reshape(&[3 * n, gd, gh, gw])?;
    let refine_map = refine_map.reshape(&[3, gd, gh, gw])?;
    let e = embed_map.shape()[1];
    let embed_map = embed_map.reshape(&[e, gd, gh, gw])?;

    let center_t = Tensor::from_vec(
        &[1, 3],
        vec![T::from_f64(center[0]), T::from_f64(center[1]), T::from_f64(center[2])],
    )?;
    let offsets = tape.trilinear_sample(&offsets_map, &center_t)?.reshape(&[n, 3])?;
    let center_rep = Tensor::from_vec(
        &[n, 3],
        (0..n)
            .flat_map(|_| center.iter().map(|&c| T::from_f64(c)).collect::<Vec<_>>())
            .collect(),
    )?;
    let points = tape.add(&offsets, &center_rep)?;
    let deltas = tape.trilinear_sample(&refine_map, &points)?;
    let refined = tape.add(&points, &deltas)?;

    let point_embeds = tape.trilinear_sample(&embed_map, &refined)?;
    let center_embed = tape.trilinear_sample(&embed_map, &center_t)?;

    let mut mins = Vec::with_capacity(3);
    let mut maxs = Vec::with_capacity(3);
    for axis in 0..3 {
        let col = tape.column(&refined, axis)?;
        let mm = tape.reduce_min_max(&col)?;
        mins.push(mm.min);
        maxs.push(mm.max);
    }
    // Corner c picks min or max per axis by bit: bit 0 -> x, 1 -> y, 2 -> z.
    let mut corner_parts: Vec<&Tensor<T>> = Vec::with_capacity(24);
    for corner in 0..8 {
        for axis in 0..3 {
            if (corner >> axis) & 1 == 0 {
                corner_parts.push(&mins[axis]);
            } else {
                corner_parts.push(&maxs[axis]);
            }
        }
    }
    let corners = tape.concat(&corner_parts, 0)?.reshape(&[8, 3])?;
    let corner_embeds = tape.trilinear_sample(&embed_map, &corners)?;

    Ok(PointSet {
        points,
        deltas,
        refined,
        point_embeds,
        center_embed,
        corner_embeds,
        min_xyz: [mins.remove(0), mins.remove(0), mins.remove(0)],
        max_xyz: [maxs.remove(0), maxs.remove(0), maxs.remove(0)],
    })
}

/// Convert grid-coordinate point rows `[n,3]` to voxel units.
pub fn points_to_voxels<T: Elem>(
    tape: &mut Tape<T>,
    points: &Tensor<T>,
    grid: &GridMap,
) -> Result<Tensor<T>> {
    let mut cols = Vec::with_capacity(3);
    for axis in 0..3 {
        let s = grid.stride_xyz[axis] as f64;
        let c = tape.column(points, axis)?;
        cols.push(tape.affine(&c, s, (s - 1.0) / 2.0));
    }
    let refs: Vec<&Tensor<T>> = cols.iter().collect();
    tape.stack_columns(&refs)
}
