//! Tiny multi-level dense detectors with explicit head layer sequences.
//!
//! A head branch (classification or regression) is a tower of `n` conv
//! layers `C_1 … C_n`. `f_0` is the tower input (the neck output for the
//! level) and `f_k` is the post-activation output of `C_k`; the prediction is
//! the output of `C_n`. Every forward pass records `f_0 … f_{n-1}` so that
//! features can be replayed through any suffix of any compatible tower.

mod checkpoint;

pub use checkpoint::{read_checkpoint, write_checkpoint, CheckpointHeader};

use std::collections::BTreeSet;

use ndarray::{s, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::nn::{relu_backward_inplace, relu_inplace, Conv2d, ConvGrad};
use crate::scalar::{softmax, softplus, Scalar};

/// Spatial activation grid `(channels, height, width)` tied to a pyramid level.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap<T> {
    pub values: Array3<T>,
    pub stride: usize,
    pub level_id: usize,
}

impl<T: Scalar> FeatureMap<T> {
    pub fn new(values: Array3<T>, stride: usize, level_id: usize) -> Result<Self> {
        let (_, h, w) = values.dim();
        if h == 0 || w == 0 || stride == 0 {
            return Err(Error::contract("feature map needs non-empty grid and stride >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("feature map contains non-finite values"));
        }
        Ok(Self { values, stride, level_id })
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Box regression parameterization of the regression branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum RegMode {
    /// Four softplus-activated edge distances in units of the stride.
    BoxOffsets,
    /// Per edge a categorical distribution over `bins + 1` integer distances.
    Distribution { bins: usize },
}

impl RegMode {
    pub fn channels(&self) -> usize {
        match self {
            RegMode::BoxOffsets => 4,
            RegMode::Distribution { bins } => 4 * (bins + 1),
        }
    }

    pub fn is_distribution(&self) -> bool {
        matches!(self, RegMode::Distribution { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    /// Conv layers per branch including the predictor.
    pub n_layers: usize,
    pub hidden_channels: usize,
    pub num_classes: usize,
    pub reg_mode: RegMode,
    pub shared_across_levels: bool,
}

impl Default for HeadSpec {
    fn default() -> Self {
        Self {
            n_layers: 4,
            hidden_channels: 32,
            num_classes: 3,
            reg_mode: RegMode::Distribution { bins: 8 },
            shared_across_levels: true,
        }
    }
}

impl HeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::config("head.n_layers must be >= 2"));
        }
        if self.hidden_channels == 0 || self.num_classes == 0 {
            return Err(Error::config("head widths and num_classes must be >= 1"));
        }
        if let RegMode::Distribution { bins } = self.reg_mode {
            if bins == 0 {
                return Err(Error::config("distribution bin count must be >= 1"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorSpec {
    pub in_channels: usize,
    /// Output widths of the stride-2 backbone blocks.
    pub backbone_channels: Vec<usize>,
    /// Pyramid strides; each must be `2^k` for a backbone block `k`.
    pub strides: Vec<usize>,
    pub head: HeadSpec,
}

impl Default for DetectorSpec {
    fn default() -> Self {
        Self {
            in_channels: 1,
            backbone_channels: vec![8, 16, 32, 32],
            strides: vec![8, 16],
            head: HeadSpec::default(),
        }
    }
}

impl DetectorSpec {
    pub fn validate(&self) -> Result<()> {
        self.head.validate()?;
        if self.in_channels == 0 || self.backbone_channels.iter().any(|&c| c == 0) {
            return Err(Error::config("channel counts must be >= 1"));
        }
        if self.strides.is_empty() {
            return Err(Error::config("at least one pyramid stride required"));
        }
        for &s in &self.strides {
            self.block_for_stride(s)?;
        }
        if self.strides.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("strides must be strictly increasing"));
        }
        Ok(())
    }

    fn block_for_stride(&self, stride: usize) -> Result<usize> {
        if !stride.is_power_of_two() || stride < 2 {
            return Err(Error::config(format!("stride {stride} is not a power of two >= 2")));
        }
        let block = stride.trailing_zeros() as usize - 1;
        if block >= self.backbone_channels.len() {
            return Err(Error::config(format!(
                "stride {stride} needs {} backbone blocks, have {}",
                block + 1,
                self.backbone_channels.len()
            )));
        }
        Ok(block)
    }

    pub fn max_stride(&self) -> usize {
        self.strides.iter().copied().max().unwrap_or(1)
    }

    pub fn num_levels(&self) -> usize {
        self.strides.len()
    }

    pub fn grid(&self, height: usize, width: usize) -> PointGrid {
        PointGrid::new(
            self.strides
                .iter()
                .map(|&s| LevelGrid { height: height / s, width: width / s, stride: s })
                .collect(),
        )
    }
}

/// Per-location classification logits and regression outputs for one level.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionMap<T> {
    pub cls_logits: Array3<T>,
    pub reg_output: Array3<T>,
    pub stride: usize,
    pub level_id: usize,
}

impl<T: Scalar> PredictionMap<T> {
    pub fn height(&self) -> usize {
        self.cls_logits.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.cls_logits.shape()[2]
    }

    pub fn num_classes(&self) -> usize {
        self.cls_logits.shape()[0]
    }

    pub fn branch(&self, branch: Branch) -> &Array3<T> {
        match branch {
            Branch::Cls => &self.cls_logits,
            Branch::Reg => &self.reg_output,
        }
    }

    pub fn branch_mut(&mut self, branch: Branch) -> &mut Array3<T> {
        match branch {
            Branch::Cls => &mut self.cls_logits,
            Branch::Reg => &mut self.reg_output,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelGrid {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
}

/// Location centers of every pyramid level, flattened level-major then
/// row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PointGrid {
    pub levels: Vec<LevelGrid>,
    offsets: Vec<usize>,
}

impl PointGrid {
    pub fn new(levels: Vec<LevelGrid>) -> Self {
        let mut offsets = Vec::with_capacity(levels.len() + 1);
        let mut acc = 0;
        for l in &levels {
            offsets.push(acc);
            acc += l.height * l.width;
        }
        offsets.push(acc);
        Self { levels, offsets }
    }

    pub fn single_level(height: usize, width: usize, stride: usize) -> Self {
        Self::new(vec![LevelGrid { height, width, stride }])
    }

    pub fn len(&self) -> usize {
        *self.offsets.last().unwrap_or(&0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn level_offset(&self, level: usize) -> usize {
        self.offsets[level]
    }

    pub fn index(&self, level: usize, row: usize, col: usize) -> usize {
        self.offsets[level] + row * self.levels[level].width + col
    }

    /// `(level, row, col)` of a flat location index.
    pub fn position(&self, index: usize) -> (usize, usize, usize) {
        let level = self.offsets.partition_point(|&o| o <= index) - 1;
        let local = index - self.offsets[level];
        let w = self.levels[level].width;
        (level, local / w, local % w)
    }

    pub fn stride_of(&self, index: usize) -> usize {
        self.levels[self.position(index).0].stride
    }

    pub fn center<T: Scalar>(&self, index: usize) -> (T, T) {
        let (level, r, c) = self.position(index);
        let s = T::from_usize_lossy(self.levels[level].stride);
        let half = T::lit(0.5);
        ((T::from_usize_lossy(c) + half) * s, (T::from_usize_lossy(r) + half) * s)
    }

    pub fn centers<T: Scalar>(&self) -> Vec<(T, T)> {
        (0..self.len()).map(|i| self.center(i)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Cls,
    Reg,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Cls, Branch::Reg];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Cls => "cls",
            Branch::Reg => "reg",
        }
    }

    pub fn index(self) -> usize {
        match self {
            Branch::Cls => 0,
            Branch::Reg => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Backbone,
    Neck,
    ClsHead,
    RegHead,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] =
        [ParamGroup::Backbone, ParamGroup::Neck, ParamGroup::ClsHead, ParamGroup::RegHead];

    pub fn of_branch(branch: Branch) -> Self {
        match branch {
            Branch::Cls => ParamGroup::ClsHead,
            Branch::Reg => ParamGroup::RegHead,
        }
    }
}

/// Ordered conv stack of one head branch.
#[derive(Clone, Debug, PartialEq)]
pub struct Tower<T> {
    pub layers: Vec<Conv2d<T>>,
}

impl<T: Scalar> Tower<T> {
    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Input width of layer `C_j` (1-based).
    pub fn input_channels(&self, j: usize) -> usize {
        self.layers[j - 1].in_channels
    }

    /// Runs `C_j … C_n` on `features` (which plays the role of `f_{j-1}`).
    /// Returns the inputs seen by each executed layer and the prediction.
    pub fn run_from(&self, j: usize, features: &Array3<T>) -> Result<(Vec<Array3<T>>, Array3<T>)> {
        let n = self.layers.len();
        if j == 0 || j > n {
            return Err(Error::contract(format!("start layer {j} outside 1..={n}")));
        }
        let mut inputs = Vec::with_capacity(n - j + 1);
        let mut x = features.clone();
        for k in j..=n {
            let mut y = self.layers[k - 1].forward(x.view())?;
            if k < n {
                relu_inplace(&mut y);
            }
            inputs.push(x);
            x = y;
        }
        Ok((inputs, x))
    }

    /// Backpropagates through `C_j … C_n`.
    ///
    /// `inputs[idx]` is the input of layer `j + idx`. `injected[idx]`, when
    /// present, is an extra gradient on that input arriving from outside the
    /// tower. Returns the gradient with respect to every input. Layers above
    /// the highest nonzero signal are skipped, so they receive exactly zero
    /// parameter gradient.
    pub fn backward_from(
        &self,
        j: usize,
        inputs: &[Array3<T>],
        grad_pred: Option<&Array3<T>>,
        injected: &[Option<&Array3<T>>],
        mut param_grads: Option<&mut [ConvGrad<T>]>,
    ) -> Vec<Option<Array3<T>>> {
        let count = inputs.len();
        let mut grads: Vec<Option<Array3<T>>> = vec![None; count];
        let mut g: Option<Array3<T>> = grad_pred.cloned();
        for idx in (0..count).rev() {
            let layer = j + idx;
            let mut gin = g.take().map(|go| {
                let pg = param_grads.as_deref_mut().map(|pgs| &mut pgs[layer - 1]);
                self.layers[layer - 1].backward(inputs[idx].view(), go.view(), pg)
            });
            if let Some(Some(extra)) = injected.get(idx) {
                gin = Some(match gin {
                    Some(mut acc) => {
                        acc += *extra;
                        acc
                    }
                    None => (*extra).clone(),
                });
            }
            if let Some(gi) = &gin {
                if layer > 1 {
                    // input is a post-ReLU hidden activation
                    let mut masked = gi.clone();
                    relu_backward_inplace(&mut masked, &inputs[idx]);
                    g = Some(masked);
                }
            }
            grads[idx] = gin;
        }
        grads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Head<T> {
    pub cls: Tower<T>,
    pub reg: Tower<T>,
}

impl<T: Scalar> Head<T> {
    pub fn tower(&self, branch: Branch) -> &Tower<T> {
        match branch {
            Branch::Cls => &self.cls,
            Branch::Reg => &self.reg,
        }
    }

    pub fn tower_mut(&mut self, branch: Branch) -> &mut Tower<T> {
        match branch {
            Branch::Cls => &mut self.cls,
            Branch::Reg => &mut self.reg,
        }
    }
}

/// Everything a forward pass records for later backpropagation.
#[derive(Clone, Debug)]
pub struct ForwardOutput<T> {
    pub predictions: Vec<PredictionMap<T>>,
    /// `[branch][level][k]` holds `f_k`, `k = 0 … n-1`.
    pub intermediates: [Vec<Vec<FeatureMap<T>>>; 2],
    image: Array3<T>,
    backbone: Vec<Array3<T>>,
}

impl<T: Scalar> ForwardOutput<T> {
    pub fn intermediates(&self, branch: Branch, level: usize) -> &[FeatureMap<T>] {
        &self.intermediates[branch.index()][level]
    }

    pub fn feature(&self, branch: Branch, level: usize, k: usize) -> &FeatureMap<T> {
        &self.intermediates[branch.index()][level][k]
    }

    /// Neck output for a level; identical for both branches.
    pub fn neck(&self, level: usize) -> &FeatureMap<T> {
        self.feature(Branch::Cls, level, 0)
    }
}

/// Parameter gradients laid out like the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients<T> {
    pub backbone: Vec<ConvGrad<T>>,
    pub neck: Vec<ConvGrad<T>>,
    /// `[head][branch][layer]`
    pub heads: Vec<[Vec<ConvGrad<T>>; 2]>,
}

impl<T: Scalar> Gradients<T> {
    pub fn iter(&self) -> impl Iterator<Item = &ConvGrad<T>> {
        self.backbone
            .iter()
            .chain(self.neck.iter())
            .chain(self.heads.iter().flat_map(|h| h[0].iter().chain(h[1].iter())))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut ConvGrad<T>> {
        self.backbone
            .iter_mut()
            .chain(self.neck.iter_mut())
            .chain(self.heads.iter_mut().flat_map(|h| {
                let [a, b] = h;
                a.iter_mut().chain(b.iter_mut())
            }))
    }

    pub fn add_assign(&mut self, other: &Gradients<T>) {
        for (a, b) in self.iter_mut().zip(other.iter()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, factor: T) {
        for g in self.iter_mut() {
            g.scale(factor);
        }
    }

    pub fn sq_norm(&self) -> T {
        self.iter().map(|g| g.sq_norm()).sum()
    }

    pub fn tower(&self, head: usize, branch: Branch) -> &[ConvGrad<T>] {
        &self.heads[head][branch.index()]
    }
}

/// Gradient signals entering a student backward pass.
#[derive(Clone, Debug, Default)]
pub struct BackwardSeeds<T> {
    /// `[level]` gradient on the predictions, per branch.
    pub pred: Vec<[Option<Array3<T>>; 2]>,
    /// `[level][branch][k]` extra gradient on `f_k`.
    pub features: Vec<[Vec<Option<Array3<T>>>; 2]>,
}

impl<T: Scalar> BackwardSeeds<T> {
    pub fn new(levels: usize, n_layers: usize) -> Self {
        Self {
            pred: vec![[None, None]; levels],
            features: vec![[vec![None; n_layers], vec![None; n_layers]]; levels],
        }
    }

    fn accumulate(slot: &mut Option<Array3<T>>, g: Array3<T>) {
        match slot {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    pub fn add_pred(&mut self, level: usize, branch: Branch, g: Array3<T>) {
        Self::accumulate(&mut self.pred[level][branch.index()], g);
    }

    pub fn add_feature(&mut self, level: usize, branch: Branch, k: usize, g: Array3<T>) {
        Self::accumulate(&mut self.features[level][branch.index()][k], g);
    }
}

/// Result of a student backward pass.
#[derive(Clone, Debug)]
pub struct BackwardOutput<T> {
    pub grads: Gradients<T>,
    /// `[branch][level][k]` total gradient on `f_k`, where any reached it.
    pub feature_grads: [Vec<Vec<Option<Array3<T>>>>; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorModel<T> {
    pub spec: DetectorSpec,
    pub backbone: Vec<Conv2d<T>>,
    pub neck: Vec<Conv2d<T>>,
    /// One head when shared across levels, otherwise one per level.
    pub heads: Vec<Head<T>>,
    frozen: BTreeSet<ParamGroup>,
}

impl<T: Scalar> DetectorModel<T> {
    /// Deterministically initialized model.
    pub fn new(spec: DetectorSpec, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in &mut model.backbone {
            let std = (2.0 / conv.fan_in() as f64).sqrt();
            conv.init_normal(&mut rng, std, 0.0);
        }
        for conv in &mut model.neck {
            let std = (1.0 / conv.fan_in() as f64).sqrt();
            conv.init_normal(&mut rng, std, 0.0);
        }
        let prior_bias = -((1.0 - 0.01) / 0.01f64).ln();
        for head in &mut model.heads {
            for branch in Branch::ALL {
                let tower = head.tower_mut(branch);
                let n = tower.layers.len();
                for (k, conv) in tower.layers.iter_mut().enumerate() {
                    if k + 1 < n {
                        let std = (2.0 / conv.fan_in() as f64).sqrt();
                        conv.init_normal(&mut rng, std, 0.0);
                    } else {
                        let bias = if branch == Branch::Cls { prior_bias } else { 0.0 };
                        conv.init_normal(&mut rng, 0.01, bias);
                    }
                }
            }
        }
        Ok(model)
    }

    /// Model with every parameter zero.
    pub fn zeros(spec: DetectorSpec) -> Result<Self> {
        spec.validate()?;
        let mut backbone = Vec::new();
        let mut prev = spec.in_channels;
        for &c in &spec.backbone_channels {
            backbone.push(Conv2d::zeros(prev, c, 3, 2, 1));
            prev = c;
        }
        let hidden = spec.head.hidden_channels;
        let neck = spec
            .strides
            .iter()
            .map(|&s| {
                let block = spec.block_for_stride(s).expect("validated");
                Conv2d::zeros(spec.backbone_channels[block], hidden, 1, 1, 0)
            })
            .collect();
        let tower = |out: usize| Tower {
            layers: (1..=spec.head.n_layers)
                .map(|k| {
                    let o = if k == spec.head.n_layers { out } else { hidden };
                    Conv2d::zeros(hidden, o, 3, 1, 1)
                })
                .collect(),
        };
        let head_count = if spec.head.shared_across_levels { 1 } else { spec.num_levels() };
        let heads = (0..head_count)
            .map(|_| Head {
                cls: tower(spec.head.num_classes),
                reg: tower(spec.head.reg_mode.channels()),
            })
            .collect();
        Ok(Self { spec, backbone, neck, heads, frozen: BTreeSet::new() })
    }

    pub fn n_layers(&self) -> usize {
        self.spec.head.n_layers
    }

    pub fn num_levels(&self) -> usize {
        self.spec.num_levels()
    }

    pub fn head_index(&self, level: usize) -> usize {
        if self.spec.head.shared_across_levels {
            0
        } else {
            level
        }
    }

    pub fn head(&self, level: usize) -> &Head<T> {
        &self.heads[self.head_index(level)]
    }

    pub fn head_mut(&mut self, level: usize) -> &mut Head<T> {
        let idx = self.head_index(level);
        &mut self.heads[idx]
    }

    pub fn tower(&self, level: usize, branch: Branch) -> &Tower<T> {
        self.head(level).tower(branch)
    }

    pub fn freeze(&mut self, group: ParamGroup) {
        self.frozen.insert(group);
    }

    pub fn freeze_all(&mut self) {
        self.frozen.extend(ParamGroup::ALL);
    }

    pub fn unfreeze_all(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, group: ParamGroup) -> bool {
        self.frozen.contains(&group)
    }

    pub fn is_fully_frozen(&self) -> bool {
        ParamGroup::ALL.iter().all(|g| self.frozen.contains(g))
    }

    fn head_key(&self, head: usize, branch: Branch) -> String {
        if self.spec.head.shared_across_levels {
            branch.name().to_string()
        } else {
            format!("{}.l{head}", branch.name())
        }
    }

    /// Every conv layer with its checkpoint key prefix (`branch/layer_index`)
    /// and parameter group, in a fixed order shared with [`Gradients::iter`].
    pub fn layers(&self) -> Vec<(String, ParamGroup, &Conv2d<T>)> {
        let mut out = Vec::new();
        for (k, c) in self.backbone.iter().enumerate() {
            out.push((format!("backbone/{k}"), ParamGroup::Backbone, c));
        }
        for (k, c) in self.neck.iter().enumerate() {
            out.push((format!("neck/{k}"), ParamGroup::Neck, c));
        }
        for (h, head) in self.heads.iter().enumerate() {
            for branch in Branch::ALL {
                for (k, c) in head.tower(branch).layers.iter().enumerate() {
                    out.push((
                        format!("{}/{}", self.head_key(h, branch), k + 1),
                        ParamGroup::of_branch(branch),
                        c,
                    ));
                }
            }
        }
        out
    }

    pub fn layers_mut(&mut self) -> Vec<(ParamGroup, &mut Conv2d<T>)> {
        let mut out: Vec<(ParamGroup, &mut Conv2d<T>)> = Vec::new();
        out.extend(self.backbone.iter_mut().map(|c| (ParamGroup::Backbone, c)));
        out.extend(self.neck.iter_mut().map(|c| (ParamGroup::Neck, c)));
        for head in &mut self.heads {
            out.extend(head.cls.layers.iter_mut().map(|c| (ParamGroup::ClsHead, c)));
            out.extend(head.reg.layers.iter_mut().map(|c| (ParamGroup::RegHead, c)));
        }
        out
    }

    pub fn zero_grads(&self) -> Gradients<T> {
        Gradients {
            backbone: self.backbone.iter().map(ConvGrad::zeros_like).collect(),
            neck: self.neck.iter().map(ConvGrad::zeros_like).collect(),
            heads: self
                .heads
                .iter()
                .map(|h| {
                    [
                        h.cls.layers.iter().map(ConvGrad::zeros_like).collect(),
                        h.reg.layers.iter().map(ConvGrad::zeros_like).collect(),
                    ]
                })
                .collect(),
        }
    }

    pub fn grid_for(&self, height: usize, width: usize) -> PointGrid {
        self.spec.grid(height, width)
    }

    fn check_image(&self, image: &Array3<T>) -> Result<()> {
        let (c, h, w) = image.dim();
        if c != self.spec.in_channels {
            return Err(Error::config(format!(
                "image has {c} channels, model expects {}",
                self.spec.in_channels
            )));
        }
        let s = self.spec.max_stride();
        if h == 0 || w == 0 || h % s != 0 || w % s != 0 {
            return Err(Error::config(format!(
                "image size {h}x{w} not divisible by largest stride {s}"
            )));
        }
        if image.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("image contains non-finite values"));
        }
        Ok(())
    }

    pub fn forward(&self, image: &Array3<T>) -> Result<ForwardOutput<T>> {
        self.check_image(image)?;
        let mut backbone = Vec::with_capacity(self.backbone.len());
        let mut x = image.clone();
        for conv in &self.backbone {
            let mut y = conv.forward(x.view())?;
            relu_inplace(&mut y);
            backbone.push(y.clone());
            x = y;
        }
        let mut predictions = Vec::with_capacity(self.num_levels());
        let mut intermediates: [Vec<Vec<FeatureMap<T>>>; 2] = [Vec::new(), Vec::new()];
        for (level, &stride) in self.spec.strides.iter().enumerate() {
            let block = self.spec.block_for_stride(stride)?;
            let f0 = self.neck[level].forward(backbone[block].view())?;
            let head = self.head(level);
            let mut outs: [Option<Array3<T>>; 2] = [None, None];
            for branch in Branch::ALL {
                let (inputs, pred) = head.tower(branch).run_from(1, &f0)?;
                intermediates[branch.index()].push(
                    inputs
                        .into_iter()
                        .map(|values| FeatureMap { values, stride, level_id: level })
                        .collect(),
                );
                outs[branch.index()] = Some(pred);
            }
            let [cls, reg] = outs;
            predictions.push(PredictionMap {
                cls_logits: cls.expect("cls branch ran"),
                reg_output: reg.expect("reg branch ran"),
                stride,
                level_id: level,
            });
        }
        Ok(ForwardOutput { predictions, intermediates, image: image.clone(), backbone })
    }

    /// Runs layers `C_j … C_n` of both branches of the level's head on
    /// delivered features (`f_{j-1}` per branch).
    pub fn forward_head_from(
        &self,
        level: usize,
        cls_features: &FeatureMap<T>,
        reg_features: &FeatureMap<T>,
        j: usize,
    ) -> Result<PredictionMap<T>> {
        let cls = self.branch_from(level, Branch::Cls, cls_features, j)?;
        let reg = self.branch_from(level, Branch::Reg, reg_features, j)?;
        Ok(PredictionMap {
            cls_logits: cls,
            reg_output: reg,
            stride: cls_features.stride,
            level_id: level,
        })
    }

    /// Single-branch version of [`DetectorModel::forward_head_from`].
    pub fn branch_from(
        &self,
        level: usize,
        branch: Branch,
        features: &FeatureMap<T>,
        j: usize,
    ) -> Result<Array3<T>> {
        self.check_junction(level, branch, features.channels(), j)?;
        Ok(self.tower(level, branch).run_from(j, &features.values)?.1)
    }

    /// Verifies that `channels`-wide features may enter `C_j`.
    pub fn check_junction(&self, level: usize, branch: Branch, channels: usize, j: usize) -> Result<()> {
        let n = self.n_layers();
        if j == 0 || j > n {
            return Err(Error::contract(format!("start layer {j} outside 1..={n}")));
        }
        if level >= self.num_levels() {
            return Err(Error::contract(format!("level {level} out of range")));
        }
        let expected = self.tower(level, branch).input_channels(j);
        if expected != channels {
            return Err(Error::Wiring {
                junction: format!("{} layer {j} (level {level})", branch.name()),
                expected,
                got: channels,
            });
        }
        Ok(())
    }

    /// Backpropagates seeded gradients through heads, neck and backbone.
    pub fn backward(&self, cache: &ForwardOutput<T>, seeds: &BackwardSeeds<T>) -> BackwardOutput<T> {
        let mut grads = self.zero_grads();
        let n = self.n_layers();
        let levels = self.num_levels();
        let mut feature_grads: [Vec<Vec<Option<Array3<T>>>>; 2] =
            [vec![vec![None; n]; levels], vec![vec![None; n]; levels]];
        let mut backbone_grads: Vec<Option<Array3<T>>> = vec![None; self.backbone.len()];

        for level in 0..levels {
            let head_idx = self.head_index(level);
            let mut neck_grad: Option<Array3<T>> = None;
            for branch in Branch::ALL {
                let inputs: Vec<Array3<T>> = cache
                    .intermediates(branch, level)
                    .iter()
                    .map(|f| f.values.clone())
                    .collect();
                let injected: Vec<Option<&Array3<T>>> =
                    seeds.features[level][branch.index()].iter().map(|g| g.as_ref()).collect();
                let pred_grad = seeds.pred[level][branch.index()].as_ref();
                let tower_grads = &mut grads.heads[head_idx][branch.index()];
                let per_input = self.tower(level, branch).backward_from(
                    1,
                    &inputs,
                    pred_grad,
                    &injected,
                    Some(tower_grads.as_mut_slice()),
                );
                if let Some(g0) = &per_input[0] {
                    match &mut neck_grad {
                        Some(acc) => *acc += g0,
                        None => neck_grad = Some(g0.clone()),
                    }
                }
                feature_grads[branch.index()][level] = per_input;
            }
            if let Some(g) = neck_grad {
                let block = self.spec.block_for_stride(self.spec.strides[level]).expect("validated");
                let gin = self.neck[level].backward(
                    cache.backbone[block].view(),
                    g.view(),
                    Some(&mut grads.neck[level]),
                );
                match &mut backbone_grads[block] {
                    Some(acc) => *acc += &gin,
                    None => backbone_grads[block] = Some(gin),
                }
            }
        }

        for block in (0..self.backbone.len()).rev() {
            let Some(mut g) = backbone_grads[block].take() else { continue };
            relu_backward_inplace(&mut g, &cache.backbone[block]);
            let input = if block == 0 { &cache.image } else { &cache.backbone[block - 1] };
            let gin = self.backbone[block].backward(input.view(), g.view(), Some(&mut grads.backbone[block]));
            if block > 0 {
                match &mut backbone_grads[block - 1] {
                    Some(acc) => *acc += &gin,
                    None => backbone_grads[block - 1] = Some(gin),
                }
            }
        }
        BackwardOutput { grads, feature_grads }
    }
}

/// Edge distances `(l, t, r, b)` in pixels at one location.
pub fn decode_distances<T: Scalar>(
    reg_output: &Array3<T>,
    reg_mode: RegMode,
    stride: usize,
    row: usize,
    col: usize,
) -> [T; 4] {
    let s = T::from_usize_lossy(stride);
    let mut d = [T::zero(); 4];
    match reg_mode {
        RegMode::BoxOffsets => {
            for (e, de) in d.iter_mut().enumerate() {
                *de = softplus(reg_output[[e, row, col]]) * s;
            }
        }
        RegMode::Distribution { bins } => {
            let m1 = bins + 1;
            for (e, de) in d.iter_mut().enumerate() {
                let logits: Vec<T> = reg_output.slice(s![e * m1..(e + 1) * m1, row, col]).to_vec();
                let p = softmax(&logits);
                let mean: T = p
                    .iter()
                    .enumerate()
                    .map(|(k, &pk)| T::from_usize_lossy(k) * pk)
                    .sum();
                *de = mean * s;
            }
        }
    }
    d
}

/// Decodes every location of a prediction map into an image-space box,
/// row-major.
pub fn decode_boxes<T: Scalar>(pred: &PredictionMap<T>, reg_mode: RegMode) -> Result<Vec<BBox<T>>> {
    let expected = reg_mode.channels();
    if pred.reg_output.shape()[0] != expected {
        return Err(Error::contract(format!(
            "regression output has {} channels, mode needs {expected}",
            pred.reg_output.shape()[0]
        )));
    }
    let grid = PointGrid::single_level(pred.height(), pred.width(), pred.stride);
    Ok((0..grid.len())
        .map(|idx| {
            let (_, r, c) = grid.position(idx);
            let (cx, cy) = grid.center::<T>(idx);
            BBox::from_distances(cx, cy, decode_distances(&pred.reg_output, reg_mode, pred.stride, r, c))
        })
        .collect())
}

/// Decodes all levels into one flat list aligned with the model's [`PointGrid`].
pub fn decode_all<T: Scalar>(preds: &[PredictionMap<T>], reg_mode: RegMode) -> Result<Vec<BBox<T>>> {
    let mut out = Vec::new();
    for p in preds {
        out.extend(decode_boxes(p, reg_mode)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
