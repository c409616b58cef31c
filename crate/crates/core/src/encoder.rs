//! Residual representation extractor `h` followed by a two-layer projection
//! head `g` (linear, normalization, activation, linear), so `f = g ∘ h`.
//!
//! All trainable values live in one flat parameter vector with named views.
//! In dual mode each normalization layer has two independent copies (affine
//! parameters and running statistics), one per [`BranchTag`]; convolution and
//! linear weights are stored once and shared by both branches.

use air_tensor::{BatchStats, ConvGeometry, Gradients, Graph, Tensor, Var};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{precondition, AirError, Result};
use crate::rng::{rng_for, stream};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchTag {
    Standard,
    Adversarial,
}

impl BranchTag {
    fn slot(self, mode: BnMode) -> usize {
        match (mode, self) {
            (BnMode::Single, _) | (BnMode::Dual, BranchTag::Standard) => 0,
            (BnMode::Dual, BranchTag::Adversarial) => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BnMode {
    Single,
    Dual,
}

impl BnMode {
    pub fn branches(self) -> usize {
        match self {
            BnMode::Single => 1,
            BnMode::Dual => 2,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Softplus,
}

/// How normalization layers behave during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormUsage {
    /// Statistics of the current batch; the observed statistics are reported
    /// so the caller can fold them into the running averages.
    Batch,
    /// Stored running statistics.
    Running,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub width: usize,
    pub blocks: usize,
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub stem_width: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    pub projector_hidden: usize,
    pub projector_out: usize,
    pub bn_mode: BnMode,
    pub activation: Activation,
}

impl EncoderSpec {
    /// CIFAR-style ResNet-18 (3x3 stem, no max-pool) with a 512-512-128 head.
    pub fn resnet18(in_channels: usize, height: usize, width: usize) -> Self {
        Self {
            in_channels,
            height,
            width,
            stem_width: 64,
            stem_stride: 1,
            stages: [(64, 1), (128, 2), (256, 2), (512, 2)]
                .into_iter()
                .map(|(width, stride)| StageSpec {
                    width,
                    blocks: 2,
                    stride,
                })
                .collect(),
            projector_hidden: 512,
            projector_out: 128,
            bn_mode: BnMode::Dual,
            activation: Activation::Relu,
        }
    }

    /// Four residual blocks, one per stage, used for desk-scale runs.
    pub fn micro(in_channels: usize, height: usize, width: usize) -> Self {
        Self {
            in_channels,
            height,
            width,
            stem_width: 8,
            stem_stride: 2,
            stages: [(8, 1), (16, 2), (32, 2), (32, 1)]
                .into_iter()
                .map(|(width, stride)| StageSpec {
                    width,
                    blocks: 1,
                    stride,
                })
                .collect(),
            projector_hidden: 64,
            projector_out: 32,
            bn_mode: BnMode::Dual,
            activation: Activation::Relu,
        }
    }

    /// A few hundred parameters; small enough for exhaustive finite differences.
    pub fn tiny(in_channels: usize, height: usize, width: usize) -> Self {
        Self {
            in_channels,
            height,
            width,
            stem_width: 4,
            stem_stride: 1,
            stages: vec![StageSpec {
                width: 4,
                blocks: 1,
                stride: 2,
            }],
            projector_hidden: 8,
            projector_out: 4,
            bn_mode: BnMode::Dual,
            activation: Activation::Relu,
        }
    }

    pub fn with_bn_mode(mut self, mode: BnMode) -> Self {
        self.bn_mode = mode;
        self
    }

    pub fn with_activation(mut self, activation: Activation) -> Self {
        self.activation = activation;
        self
    }

    pub fn representation_dim(&self) -> usize {
        self.stages.last().map_or(self.stem_width, |s| s.width)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.height, self.width]
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.in_channels,
            self.height,
            self.width,
            self.stem_width,
            self.stem_stride,
            self.projector_hidden,
            self.projector_out,
        ];
        if positive.contains(&0)
            || self
                .stages
                .iter()
                .any(|s| s.width == 0 || s.blocks == 0 || s.stride == 0)
        {
            return Err(precondition("encoder spec has a zero dimension"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("spec serializes");
        hex::encode(Sha256::digest(&json))
    }
}

/// Named slice of the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamView {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    /// Part of the representation extractor `h` (as opposed to the head `g`).
    pub extractor: bool,
}

impl ParamView {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    KaimingConv,
    Ones,
    Zeros,
    UniformFanIn(usize),
}

#[derive(Clone, Debug)]
struct Conv {
    param: usize,
    geom: ConvGeometry,
}

#[derive(Clone, Debug)]
struct Norm {
    /// Index into the running-statistics table.
    layer: usize,
    /// (gamma, beta) parameter indices per branch slot.
    affine: Vec<(usize, usize)>,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: Conv,
    bn1: Norm,
    conv2: Conv,
    bn2: Norm,
    shortcut: Option<(Conv, Norm)>,
}

#[derive(Clone, Debug)]
struct Architecture {
    stem: (Conv, Norm),
    blocks: Vec<Block>,
    fc1: (usize, usize),
    fc1_bn: Norm,
    fc2: (usize, usize),
}

struct LayoutBuilder {
    mode: BnMode,
    views: Vec<ParamView>,
    inits: Vec<Init>,
    norm_layers: Vec<String>,
    offset: usize,
}

impl LayoutBuilder {
    fn param(&mut self, name: String, shape: Vec<usize>, init: Init, extractor: bool) -> usize {
        let view = ParamView {
            name,
            offset: self.offset,
            shape,
            extractor,
        };
        self.offset += view.len();
        self.views.push(view);
        self.inits.push(init);
        self.views.len() - 1
    }

    fn conv(&mut self, name: &str, out: usize, inp: usize, k: usize, stride: usize) -> Conv {
        let param = self.param(
            format!("{name}.weight"),
            vec![out, inp, k, k],
            Init::KaimingConv,
            true,
        );
        Conv {
            param,
            geom: ConvGeometry {
                stride,
                padding: k / 2,
            },
        }
    }

    fn norm(&mut self, name: &str, channels: usize) -> Norm {
        self.norm_with(name, channels, true)
    }

    fn norm_with(&mut self, name: &str, channels: usize, extractor: bool) -> Norm {
        let layer = self.norm_layers.len();
        self.norm_layers.push(name.to_string());
        let tags: &[&str] = match self.mode {
            BnMode::Single => &[""],
            BnMode::Dual => &[".standard", ".adversarial"],
        };
        let affine = tags
            .iter()
            .map(|t| {
                let g = self.param(
                    format!("{name}{t}.gamma"),
                    vec![channels],
                    Init::Ones,
                    extractor,
                );
                let b = self.param(
                    format!("{name}{t}.beta"),
                    vec![channels],
                    Init::Zeros,
                    extractor,
                );
                (g, b)
            })
            .collect();
        Norm { layer, affine }
    }
}

fn build_layout(
    spec: &EncoderSpec,
) -> (
    Architecture,
    Vec<ParamView>,
    Vec<Init>,
    Vec<(String, usize)>,
) {
    let mut b = LayoutBuilder {
        mode: spec.bn_mode,
        views: Vec::new(),
        inits: Vec::new(),
        norm_layers: Vec::new(),
        offset: 0,
    };
    let mut channels_of_norm = Vec::new();
    let stem = (
        b.conv(
            "stem.conv",
            spec.stem_width,
            spec.in_channels,
            3,
            spec.stem_stride,
        ),
        b.norm("stem.bn", spec.stem_width),
    );
    channels_of_norm.push(spec.stem_width);
    let mut blocks = Vec::new();
    let mut in_ch = spec.stem_width;
    for (s, stage) in spec.stages.iter().enumerate() {
        for k in 0..stage.blocks {
            let stride = if k == 0 { stage.stride } else { 1 };
            let p = format!("stage{s}.block{k}");
            let conv1 = b.conv(&format!("{p}.conv1"), stage.width, in_ch, 3, stride);
            let bn1 = b.norm(&format!("{p}.bn1"), stage.width);
            let conv2 = b.conv(&format!("{p}.conv2"), stage.width, stage.width, 3, 1);
            let bn2 = b.norm(&format!("{p}.bn2"), stage.width);
            channels_of_norm.extend([stage.width, stage.width]);
            let shortcut = (stride != 1 || in_ch != stage.width).then(|| {
                channels_of_norm.push(stage.width);
                (
                    b.conv(&format!("{p}.shortcut.conv"), stage.width, in_ch, 1, stride),
                    b.norm(&format!("{p}.shortcut.bn"), stage.width),
                )
            });
            blocks.push(Block {
                conv1,
                bn1,
                conv2,
                bn2,
                shortcut,
            });
            in_ch = stage.width;
        }
    }
    let z = spec.representation_dim();
    let fc1 = (
        b.param(
            "projector.fc1.weight".into(),
            vec![z, spec.projector_hidden],
            Init::UniformFanIn(z),
            false,
        ),
        b.param(
            "projector.fc1.bias".into(),
            vec![spec.projector_hidden],
            Init::UniformFanIn(z),
            false,
        ),
    );
    let fc1_bn = b.norm_with("projector.bn1", spec.projector_hidden, false);
    channels_of_norm.push(spec.projector_hidden);
    let fc2 = (
        b.param(
            "projector.fc2.weight".into(),
            vec![spec.projector_hidden, spec.projector_out],
            Init::UniformFanIn(spec.projector_hidden),
            false,
        ),
        b.param(
            "projector.fc2.bias".into(),
            vec![spec.projector_out],
            Init::UniformFanIn(spec.projector_hidden),
            false,
        ),
    );
    let norms = b.norm_layers.into_iter().zip(channels_of_norm).collect();
    (
        Architecture {
            stem,
            blocks,
            fc1,
            fc1_bn,
            fc2,
        },
        b.views,
        b.inits,
        norms,
    )
}

/// Running mean and variance of one normalization layer on one branch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Statistics observed during a batch-statistics forward pass.
#[derive(Clone, Debug)]
pub struct StatUpdate {
    layer: usize,
    slot: usize,
    stats: BatchStats,
}

/// Parameters bound to graph leaves, one per [`ParamView`].
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Output of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    /// `h(x)`, shape `(N, z)`.
    pub representation: Var,
    /// `g(h(x))`, shape `(N, d)`.
    pub embedding: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    spec: EncoderSpec,
    arch: Architecture,
    layout: Vec<ParamView>,
    norm_layers: Vec<(String, usize)>,
    params: Vec<f64>,
    /// Indexed `[layer * branches + slot]`.
    running: Vec<RunningStats>,
}

impl Encoder {
    pub fn new(spec: EncoderSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let (arch, layout, inits, norm_layers) = build_layout(&spec);
        let total = layout.last().map_or(0, |v| v.offset + v.len());
        let mut params = vec![0.0; total];
        let mut rng = rng_for(seed, &[stream::INIT]);
        for (view, init) in layout.iter().zip(&inits) {
            let slot = &mut params[view.range()];
            match *init {
                Init::Ones => slot.fill(1.0),
                Init::Zeros => slot.fill(0.0),
                Init::KaimingConv => {
                    // fan-out mode, gain sqrt(2)
                    let fan_out = view.shape[0] * view.shape[2] * view.shape[3];
                    let normal =
                        Normal::new(0.0, (2.0 / fan_out as f64).sqrt()).expect("kaiming std");
                    slot.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
                }
                Init::UniformFanIn(fan_in) => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    slot.iter_mut()
                        .for_each(|v| *v = rng.random_range(-bound..bound));
                }
            }
        }
        let branches = spec.bn_mode.branches();
        let running = norm_layers
            .iter()
            .flat_map(|(_, c)| {
                (0..branches).map(move |_| RunningStats {
                    mean: vec![0.0; *c],
                    var: vec![1.0; *c],
                })
            })
            .collect();
        Ok(Self {
            spec,
            arch,
            layout,
            norm_layers,
            params,
            running,
        })
    }

    /// Rebuilds an encoder from stored parameters and statistics.
    pub fn from_parts(
        spec: EncoderSpec,
        params: Vec<f64>,
        running: Vec<RunningStats>,
    ) -> Result<Self> {
        let mut enc = Self::new(spec, 0)?;
        if params.len() != enc.params.len() {
            return Err(AirError::Shape {
                expected: vec![enc.params.len()],
                actual: vec![params.len()],
            });
        }
        if running.len() != enc.running.len()
            || running
                .iter()
                .zip(&enc.running)
                .any(|(a, b)| a.mean.len() != b.mean.len() || a.var.len() != b.var.len())
        {
            return Err(precondition(
                "running statistics do not match the encoder layout",
            ));
        }
        enc.params = params;
        enc.running = running;
        Ok(enc)
    }

    pub fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    pub fn layout(&self) -> &[ParamView] {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    pub fn norm_layer_names(&self) -> impl Iterator<Item = &str> {
        self.norm_layers.iter().map(|(n, _)| n.as_str())
    }

    pub fn view(&self, name: &str) -> Option<&ParamView> {
        self.layout.iter().find(|v| v.name == name)
    }

    pub fn param_slice(&self, name: &str) -> Option<&[f64]> {
        self.view(name).map(|v| &self.params[v.range()])
    }

    /// Concatenated extractor (`h`) parameters.
    pub fn extractor_params(&self) -> Vec<f64> {
        self.layout
            .iter()
            .filter(|v| v.extractor)
            .flat_map(|v| self.params[v.range()].iter().copied())
            .collect()
    }

    /// Adds every parameter to the graph, as variables when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .layout
            .iter()
            .map(|v| {
                let t = Tensor::new(v.shape.clone(), self.params[v.range()].to_vec())
                    .expect("view shape");
                if trainable {
                    g.variable(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        BoundParams { vars }
    }

    /// Flattens parameter gradients into the layout order; absent gradients are zero.
    pub fn collect_grads(&self, grads: &Gradients, bound: &BoundParams) -> Vec<f64> {
        let mut flat = vec![0.0; self.params.len()];
        for (view, var) in self.layout.iter().zip(&bound.vars) {
            if let Some(gt) = grads.get(*var) {
                flat[view.range()].copy_from_slice(gt.data());
            }
        }
        flat
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [c, h, w] = self.spec.input_shape();
        match shape {
            &[n, ic, ih, iw] if n > 0 && (ic, ih, iw) == (c, h, w) => Ok(()),
            other => Err(AirError::Shape {
                expected: vec![other.first().copied().unwrap_or(0), c, h, w],
                actual: other.to_vec(),
            }),
        }
    }

    fn activate(&self, g: &mut Graph, x: Var) -> Var {
        match self.spec.activation {
            Activation::Relu => g.relu(x),
            Activation::Softplus => g.softplus(x),
        }
    }

    fn normalize(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        norm: &Norm,
        x: Var,
        tag: BranchTag,
        usage: NormUsage,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let slot = tag.slot(self.spec.bn_mode);
        let (gi, bi) = norm.affine[slot];
        let (gamma, beta) = (p.vars[gi], p.vars[bi]);
        match usage {
            NormUsage::Batch => {
                let (y, stats) = g.batch_norm(x, gamma, beta, BN_EPS)?;
                updates.push(StatUpdate {
                    layer: norm.layer,
                    slot,
                    stats,
                });
                Ok(y)
            }
            NormUsage::Running => {
                let rs = &self.running[norm.layer * self.spec.bn_mode.branches() + slot];
                Ok(g.batch_norm_fixed(x, gamma, beta, &rs.mean, &rs.var, BN_EPS)?)
            }
        }
    }

    /// Records `f(x)` and `h(x)` for `x` of shape `(N, C, H, W)` on the graph.
    /// Batch-statistics passes append their observations to `updates`.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        x: Var,
        tag: BranchTag,
        usage: NormUsage,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Forward> {
        self.check_input(g.shape(x))?;
        let a = &self.arch;
        let y = g.conv2d(x, p.vars[a.stem.0.param], a.stem.0.geom)?;
        let y = self.normalize(g, p, &a.stem.1, y, tag, usage, updates)?;
        let mut y = self.activate(g, y);
        for blk in &a.blocks {
            let h = g.conv2d(y, p.vars[blk.conv1.param], blk.conv1.geom)?;
            let h = self.normalize(g, p, &blk.bn1, h, tag, usage, updates)?;
            let h = self.activate(g, h);
            let h = g.conv2d(h, p.vars[blk.conv2.param], blk.conv2.geom)?;
            let h = self.normalize(g, p, &blk.bn2, h, tag, usage, updates)?;
            let skip = match &blk.shortcut {
                Some((conv, norm)) => {
                    let s = g.conv2d(y, p.vars[conv.param], conv.geom)?;
                    self.normalize(g, p, norm, s, tag, usage, updates)?
                }
                None => y,
            };
            let sum = g.add(h, skip)?;
            y = self.activate(g, sum);
        }
        let representation = g.global_avg_pool(y)?;
        let embedding = self.head(g, p, representation, tag, usage, updates)?;
        Ok(Forward {
            representation,
            embedding,
        })
    }

    fn head(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        z: Var,
        tag: BranchTag,
        usage: NormUsage,
        updates: &mut Vec<StatUpdate>,
    ) -> Result<Var> {
        let a = &self.arch;
        let h1 = g.matmul(z, p.vars[a.fc1.0])?;
        let h1 = g.add_row_bias(h1, p.vars[a.fc1.1])?;
        let h1 = self.normalize(g, p, &a.fc1_bn, h1, tag, usage, updates)?;
        let h1 = self.activate(g, h1);
        let out = g.matmul(h1, p.vars[a.fc2.0])?;
        Ok(g.add_row_bias(out, p.vars[a.fc2.1])?)
    }

    /// Folds observed batch statistics into the running averages.
    pub fn apply_stat_updates(&mut self, updates: &[StatUpdate]) {
        let branches = self.spec.bn_mode.branches();
        for u in updates {
            let rs = &mut self.running[u.layer * branches + u.slot];
            for (r, b) in rs.mean.iter_mut().zip(&u.stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
            for (r, b) in rs.var.iter_mut().zip(&u.stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }

    fn eval_pass(&self, batch: &Tensor, tag: BranchTag) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let x = g.constant(batch.clone());
        let f = self.forward_graph(&mut g, &p, x, tag, NormUsage::Running, &mut Vec::new())?;
        Ok((
            g.value(f.representation).clone(),
            g.value(f.embedding).clone(),
        ))
    }

    /// `f(x)` in evaluation mode, one row per input.
    pub fn forward(&self, batch: &Tensor, tag: BranchTag) -> Result<Tensor> {
        Ok(self.eval_pass(batch, tag)?.1)
    }

    /// `h(x)` in evaluation mode, one row per input.
    pub fn representation(&self, batch: &Tensor, tag: BranchTag) -> Result<Tensor> {
        Ok(self.eval_pass(batch, tag)?.0)
    }

    /// Applies only the projection head (evaluation mode) to given representations.
    pub fn project(&self, representation: &Tensor, tag: BranchTag) -> Result<Tensor> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let z = g.constant(representation.clone());
        let out = self.head(&mut g, &p, z, tag, NormUsage::Running, &mut Vec::new())?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(n: usize, spec: &EncoderSpec, seed: u64) -> Tensor {
        let mut rng = rng_for(seed, &[]);
        let [c, h, w] = spec.input_shape();
        let data = (0..n * c * h * w).map(|_| rng.random::<f64>()).collect();
        Tensor::new(vec![n, c, h, w], data).unwrap()
    }

    #[test]
    fn layout_is_contiguous_and_named_uniquely() {
        let enc = Encoder::new(EncoderSpec::micro(3, 32, 32), 0).unwrap();
        let mut offset = 0;
        let mut names = std::collections::HashSet::new();
        for v in enc.layout() {
            assert_eq!(v.offset, offset);
            offset += v.len();
            assert!(names.insert(v.name.clone()), "duplicate {}", v.name);
        }
        assert_eq!(offset, enc.num_params());
    }

    #[test]
    fn tiny_model_stays_under_a_thousand_parameters() {
        let enc = Encoder::new(EncoderSpec::tiny(3, 6, 6), 0).unwrap();
        assert!(enc.num_params() <= 1000, "{}", enc.num_params());
    }

    #[test]
    fn resnet18_extractor_has_expected_size() {
        // 11.17M conv/bn weights in a single-BN CIFAR ResNet-18 without the fc layer.
        let spec = EncoderSpec::resnet18(3, 32, 32).with_bn_mode(BnMode::Single);
        let (_, layout, _, _) = build_layout(&spec);
        let extractor: usize = layout
            .iter()
            .filter(|v| v.extractor)
            .map(ParamView::len)
            .sum();
        assert_eq!(extractor, 11_168_832);
    }

    #[test]
    fn zero_projector_gives_zero_embeddings() {
        let mut enc = Encoder::new(EncoderSpec::tiny(3, 6, 6), 1).unwrap();
        for name in ["projector.fc2.weight", "projector.fc2.bias"] {
            let r = enc.view(name).unwrap().range();
            enc.params_mut()[r].fill(0.0);
        }
        let out = enc
            .forward(&batch(3, enc.spec(), 2), BranchTag::Standard)
            .unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn eval_forward_is_deterministic_and_row_wise() {
        let enc = Encoder::new(EncoderSpec::tiny(3, 6, 6), 3).unwrap();
        let x = batch(4, enc.spec(), 4);
        let a = enc.forward(&x, BranchTag::Adversarial).unwrap();
        assert_eq!(a, enc.forward(&x, BranchTag::Adversarial).unwrap());
        // permute rows
        let perm = [2, 0, 3, 1];
        let rows: Vec<Tensor> = perm.iter().map(|&i| x.slice_rows(i, 1).unwrap()).collect();
        let refs: Vec<&Tensor> = rows.iter().collect();
        let xp = Tensor::concat_rows(&refs).unwrap();
        let b = enc.forward(&xp, BranchTag::Adversarial).unwrap();
        for (k, &i) in perm.iter().enumerate() {
            assert_eq!(b.row(k), a.row(i));
        }
    }

    #[test]
    fn single_sample_eval_and_projection_composition() {
        let enc = Encoder::new(EncoderSpec::tiny(3, 6, 6), 5).unwrap();
        let x = batch(1, enc.spec(), 6);
        let z = enc.representation(&x, BranchTag::Standard).unwrap();
        let f = enc.forward(&x, BranchTag::Standard).unwrap();
        assert_eq!(z.shape(), &[1, 4]);
        assert!(
            enc.project(&z, BranchTag::Standard)
                .unwrap()
                .max_abs_diff(&f)
                < 1e-15
        );
    }

    #[test]
    fn rejects_wrong_input_shape() {
        let enc = Encoder::new(EncoderSpec::tiny(3, 6, 6), 0).unwrap();
        assert!(enc
            .forward(&Tensor::zeros(&[2, 3, 5, 6]), BranchTag::Standard)
            .is_err());
        assert!(enc
            .forward(&Tensor::zeros(&[0, 3, 6, 6]), BranchTag::Standard)
            .is_err());
    }

    #[test]
    fn dual_branches_share_weights_but_not_statistics() {
        let mut enc = Encoder::new(EncoderSpec::tiny(3, 6, 6), 7).unwrap();
        let x = batch(4, enc.spec(), 8);
        // Same statistics and affine values: both branches agree exactly.
        let std_out = enc.forward(&x, BranchTag::Standard).unwrap();
        assert_eq!(std_out, enc.forward(&x, BranchTag::Adversarial).unwrap());
        // A batch-statistics pass on the adversarial branch only moves its own buffers.
        let mut g = Graph::new();
        let p = enc.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let mut updates = Vec::new();
        enc.forward_graph(
            &mut g,
            &p,
            xv,
            BranchTag::Adversarial,
            NormUsage::Batch,
            &mut updates,
        )
        .unwrap();
        let before = enc.params().to_vec();
        enc.apply_stat_updates(&updates);
        assert_eq!(enc.params(), &before[..]);
        for pair in enc.running_stats().chunks(2) {
            assert_eq!(pair[0].mean, vec![0.0; pair[0].mean.len()]);
            assert_ne!(pair[1].mean, pair[0].mean);
        }
        assert_eq!(std_out, enc.forward(&x, BranchTag::Standard).unwrap());
        assert_ne!(std_out, enc.forward(&x, BranchTag::Adversarial).unwrap());
    }

    #[test]
    fn spec_hash_tracks_content() {
        let a = EncoderSpec::micro(3, 32, 32);
        let b = a.clone().with_bn_mode(BnMode::Single);
        assert_eq!(a.hash(), EncoderSpec::micro(3, 32, 32).hash());
        assert_ne!(a.hash(), b.hash());
    }
}
