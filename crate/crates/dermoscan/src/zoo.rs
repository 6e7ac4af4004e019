//! The four supported classifier architectures.
//!
//! Parameter names follow torchvision, so an ImageNet state dict exported to
//! safetensors loads straight into the backbone. The classification head
//! lives under `head.*` and is always freshly initialized.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use tch::nn;
use tch::{Device, Kind, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureId {
    Densenet121,
    Vgg16Bn,
    Resnet18,
    Resnet50,
}

impl ArchitectureId {
    pub const ALL: [ArchitectureId; 4] = [Self::Densenet121, Self::Vgg16Bn, Self::Resnet18, Self::Resnet50];

    pub fn name(self) -> &'static str {
        match self {
            Self::Densenet121 => "densenet121",
            Self::Vgg16Bn => "vgg16_bn",
            Self::Resnet18 => "resnet18",
            Self::Resnet50 => "resnet50",
        }
    }

    /// Width of the vector the classification head consumes.
    pub fn feature_width(self) -> i64 {
        match self {
            Self::Densenet121 => 1024,
            Self::Vgg16Bn => 4096,
            Self::Resnet18 => 512,
            Self::Resnet50 => 2048,
        }
    }

    /// Published approximate trainable-parameter count with the 1000-class
    /// ImageNet head.
    pub fn published_parameter_count(self) -> f64 {
        match self {
            Self::Densenet121 => 8.0e6,
            Self::Vgg16Bn => 138.0e6,
            Self::Resnet18 => 11.0e6,
            Self::Resnet50 => 25.6e6,
        }
    }
}

impl fmt::Display for ArchitectureId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchitectureId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownArchitecture(s.to_string()))
    }
}

fn default_num_classes() -> usize {
    dermoscan_core::NUM_CLASSES
}

fn default_head_dropout() -> f64 {
    0.25
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: ArchitectureId,
    #[serde(default = "default_num_classes")]
    pub num_classes: usize,
    #[serde(default)]
    pub pretrained: bool,
    #[serde(default = "default_head_dropout")]
    pub head_dropout: f64,
    /// Where `<arch>.safetensors` backbone weights are cached. Falls back to
    /// `$DERMOSCAN_WEIGHTS_DIR`, then `./weights`.
    #[serde(default)]
    pub weights_dir: Option<PathBuf>,
}

impl ModelSpec {
    pub fn new(arch: ArchitectureId, num_classes: usize, pretrained: bool) -> Self {
        Self {
            arch,
            num_classes,
            pretrained,
            head_dropout: default_head_dropout(),
            weights_dir: None,
        }
    }

    pub fn weights_path(&self) -> PathBuf {
        let dir = self
            .weights_dir
            .clone()
            .or_else(|| std::env::var_os("DERMOSCAN_WEIGHTS_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("weights"));
        dir.join(format!("{}.safetensors", self.arch))
    }
}

struct ConvBn {
    conv: nn::Conv2D,
    bn: nn::BatchNorm,
}

impl ConvBn {
    fn new(conv_path: nn::Path, bn_path: nn::Path, c_in: i64, c_out: i64, k: i64, stride: i64, padding: i64) -> Self {
        let cfg = nn::ConvConfig {
            stride,
            padding,
            bias: false,
            ..Default::default()
        };
        Self {
            conv: nn::conv2d(conv_path, c_in, c_out, k, cfg),
            bn: nn::batch_norm2d(bn_path, c_out, Default::default()),
        }
    }

    fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        xs.apply(&self.conv).apply_t(&self.bn, train)
    }
}

struct ResidualBlock {
    convs: Vec<ConvBn>,
    downsample: Option<ConvBn>,
}

impl ResidualBlock {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let mut out = xs.shallow_clone();
        let last = self.convs.len() - 1;
        for (i, c) in self.convs.iter().enumerate() {
            out = c.forward_t(&out, train);
            if i != last {
                out = out.relu();
            }
        }
        let shortcut = match &self.downsample {
            Some(d) => d.forward_t(xs, train),
            None => xs.shallow_clone(),
        };
        (out + shortcut).relu()
    }
}

struct ResNet {
    stem: ConvBn,
    blocks: Vec<ResidualBlock>,
}

impl ResNet {
    fn new(p: &nn::Path, layers: [usize; 4], bottleneck: bool) -> Self {
        let stem = ConvBn::new(p / "conv1", p / "bn1", 3, 64, 7, 2, 3);
        let expansion = if bottleneck { 4 } else { 1 };
        let mut blocks = Vec::new();
        let mut c_in = 64;
        for (stage, (&n, width)) in layers.iter().zip([64i64, 128, 256, 512]).enumerate() {
            let lp = p / format!("layer{}", stage + 1);
            for b in 0..n {
                let bp = &lp / b;
                let stride = if b == 0 && stage > 0 { 2 } else { 1 };
                let c_out = width * expansion;
                let convs = if bottleneck {
                    vec![
                        ConvBn::new(&bp / "conv1", &bp / "bn1", c_in, width, 1, 1, 0),
                        ConvBn::new(&bp / "conv2", &bp / "bn2", width, width, 3, stride, 1),
                        ConvBn::new(&bp / "conv3", &bp / "bn3", width, c_out, 1, 1, 0),
                    ]
                } else {
                    vec![
                        ConvBn::new(&bp / "conv1", &bp / "bn1", c_in, width, 3, stride, 1),
                        ConvBn::new(&bp / "conv2", &bp / "bn2", width, width, 3, 1, 1),
                    ]
                };
                let downsample = (stride != 1 || c_in != c_out).then(|| {
                    let dp = &bp / "downsample";
                    ConvBn::new(&dp / 0, &dp / 1, c_in, c_out, 1, stride, 0)
                });
                blocks.push(ResidualBlock { convs, downsample });
                c_in = c_out;
            }
        }
        Self { stem, blocks }
    }

    fn features(&self, xs: &Tensor, train: bool) -> Tensor {
        let mut x = self.stem.forward_t(xs, train).relu().max_pool2d([3, 3], [2, 2], [1, 1], [1, 1], false);
        for b in &self.blocks {
            x = b.forward_t(&x, train);
        }
        x.adaptive_avg_pool2d([1, 1]).flatten(1, -1)
    }
}

struct DenseLayer {
    norm1: nn::BatchNorm,
    conv1: nn::Conv2D,
    norm2: nn::BatchNorm,
    conv2: nn::Conv2D,
}

struct Transition {
    norm: nn::BatchNorm,
    conv: nn::Conv2D,
}

struct DenseNet {
    stem: ConvBn,
    blocks: Vec<Vec<DenseLayer>>,
    transitions: Vec<Transition>,
    norm5: nn::BatchNorm,
}

fn plain_conv(p: nn::Path, c_in: i64, c_out: i64, k: i64, padding: i64) -> nn::Conv2D {
    nn::conv2d(p, c_in, c_out, k, nn::ConvConfig { padding, bias: false, ..Default::default() })
}

impl DenseNet {
    fn new(p: &nn::Path, growth: i64, block_config: [usize; 4], init_features: i64, bn_size: i64) -> Self {
        let f = p / "features";
        let stem = ConvBn::new(&f / "conv0", &f / "norm0", 3, init_features, 7, 2, 3);
        let mut c = init_features;
        let mut blocks = Vec::new();
        let mut transitions = Vec::new();
        for (i, &n) in block_config.iter().enumerate() {
            let bp = &f / format!("denseblock{}", i + 1);
            let mut layers = Vec::new();
            for l in 0..n {
                let lp = &bp / format!("denselayer{}", l + 1);
                let c_in = c + l as i64 * growth;
                layers.push(DenseLayer {
                    norm1: nn::batch_norm2d(&lp / "norm1", c_in, Default::default()),
                    conv1: plain_conv(&lp / "conv1", c_in, bn_size * growth, 1, 0),
                    norm2: nn::batch_norm2d(&lp / "norm2", bn_size * growth, Default::default()),
                    conv2: plain_conv(&lp / "conv2", bn_size * growth, growth, 3, 1),
                });
            }
            blocks.push(layers);
            c += n as i64 * growth;
            if i + 1 != block_config.len() {
                let tp = &f / format!("transition{}", i + 1);
                transitions.push(Transition {
                    norm: nn::batch_norm2d(&tp / "norm", c, Default::default()),
                    conv: plain_conv(&tp / "conv", c, c / 2, 1, 0),
                });
                c /= 2;
            }
        }
        let norm5 = nn::batch_norm2d(&f / "norm5", c, Default::default());
        Self { stem, blocks, transitions, norm5 }
    }

    fn features(&self, xs: &Tensor, train: bool) -> Tensor {
        let mut x = self.stem.forward_t(xs, train).relu().max_pool2d([3, 3], [2, 2], [1, 1], [1, 1], false);
        for (i, block) in self.blocks.iter().enumerate() {
            let mut features = vec![x];
            for layer in block {
                let input = Tensor::cat(&features, 1);
                let y = input
                    .apply_t(&layer.norm1, train)
                    .relu()
                    .apply(&layer.conv1)
                    .apply_t(&layer.norm2, train)
                    .relu()
                    .apply(&layer.conv2);
                features.push(y);
            }
            x = Tensor::cat(&features, 1);
            if let Some(t) = self.transitions.get(i) {
                x = x.apply_t(&t.norm, train).relu().apply(&t.conv).avg_pool2d([2, 2], [2, 2], [0, 0], false, true, None);
            }
        }
        x.apply_t(&self.norm5, train).relu().adaptive_avg_pool2d([1, 1]).flatten(1, -1)
    }
}

enum VggLayer {
    Conv(nn::Conv2D, nn::BatchNorm),
    Pool,
}

struct Vgg {
    layers: Vec<VggLayer>,
    fc1: nn::Linear,
    fc2: nn::Linear,
}

impl Vgg {
    fn new_16_bn(p: &nn::Path) -> Self {
        const CFG: [i64; 18] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];
        let f = p / "features";
        let mut layers = Vec::new();
        let mut idx = 0;
        let mut c_in = 3;
        for &c in &CFG {
            if c == 0 {
                layers.push(VggLayer::Pool);
                idx += 1;
            } else {
                let conv = nn::conv2d(&f / idx, c_in, c, 3, nn::ConvConfig { padding: 1, ..Default::default() });
                let bn = nn::batch_norm2d(&f / (idx + 1), c, Default::default());
                layers.push(VggLayer::Conv(conv, bn));
                idx += 3;
                c_in = c;
            }
        }
        let cls = p / "classifier";
        Self {
            layers,
            fc1: nn::linear(&cls / 0, 512 * 7 * 7, 4096, Default::default()),
            fc2: nn::linear(&cls / 3, 4096, 4096, Default::default()),
        }
    }

    fn features(&self, xs: &Tensor, train: bool) -> Tensor {
        let mut x = xs.shallow_clone();
        for l in &self.layers {
            x = match l {
                VggLayer::Conv(c, bn) => x.apply(c).apply_t(bn, train).relu(),
                VggLayer::Pool => x.max_pool2d([2, 2], [2, 2], [0, 0], [1, 1], false),
            };
        }
        x.adaptive_avg_pool2d([7, 7])
            .flatten(1, -1)
            .apply(&self.fc1)
            .relu()
            .dropout(0.5, train)
            .apply(&self.fc2)
            .relu()
            .dropout(0.5, train)
    }
}

enum Body {
    ResNet(ResNet),
    DenseNet(DenseNet),
    Vgg(Vgg),
}

/// A built classifier: backbone, dropout and a linear head.
///
/// Backbone variables belong to optimizer group 0 and head variables to
/// group 1, so learning rates can be set per group.
pub struct Network {
    spec: ModelSpec,
    vs: nn::VarStore,
    body: Body,
    head: nn::Linear,
    trainable: BTreeSet<String>,
}

pub const BACKBONE_GROUP: usize = 0;
pub const HEAD_GROUP: usize = 1;
const HEAD_PREFIX: &str = "head.";

/// Build a network; with `pretrained` the backbone is loaded from
/// [`ModelSpec::weights_path`].
pub fn build_model(spec: &ModelSpec) -> Result<Network> {
    if spec.num_classes < 2 {
        return Err(Error::InvalidConfig(format!("num_classes must be at least 2, got {}", spec.num_classes)));
    }
    if !(0.0..1.0).contains(&spec.head_dropout) {
        return Err(Error::InvalidConfig(format!("head_dropout must lie in [0, 1), got {}", spec.head_dropout)));
    }
    let mut vs = nn::VarStore::new(Device::Cpu);
    let root = vs.root();
    let body = match spec.arch {
        ArchitectureId::Resnet18 => Body::ResNet(ResNet::new(&root, [2, 2, 2, 2], false)),
        ArchitectureId::Resnet50 => Body::ResNet(ResNet::new(&root, [3, 4, 6, 3], true)),
        ArchitectureId::Densenet121 => Body::DenseNet(DenseNet::new(&root, 32, [6, 12, 24, 16], 64, 4)),
        ArchitectureId::Vgg16Bn => Body::Vgg(Vgg::new_16_bn(&root)),
    };
    let head = nn::linear(
        root.set_group(HEAD_GROUP) / "head",
        spec.arch.feature_width(),
        spec.num_classes as i64,
        Default::default(),
    );
    let trainable = trainable_names(&vs);
    if spec.pretrained {
        load_backbone(&mut vs, &spec.weights_path())?;
    }
    Ok(Network {
        spec: spec.clone(),
        vs,
        body,
        head,
        trainable,
    })
}

fn trainable_names(vs: &nn::VarStore) -> BTreeSet<String> {
    vs.variables().into_iter().filter(|(_, t)| t.requires_grad()).map(|(n, _)| n).collect()
}

fn load_backbone(vs: &mut nn::VarStore, path: &Path) -> Result<()> {
    if !path.is_file() {
        return Err(Error::WeightsUnavailable(format!("{} not found", path.display())));
    }
    let missing = vs
        .load_partial(path)
        .map_err(|e| Error::WeightsUnavailable(format!("{}: {e}", path.display())))?;
    let missing: Vec<_> = missing.into_iter().filter(|n| !n.starts_with(HEAD_PREFIX)).collect();
    if let Some(first) = missing.first() {
        return Err(Error::WeightsUnavailable(format!(
            "{} lacks {} backbone tensors (e.g. `{first}`)",
            path.display(),
            missing.len()
        )));
    }
    Ok(())
}

/// Disjoint backbone/head partition of the trainable parameters.
pub struct ParamGroups {
    pub backbone: Vec<(String, Tensor)>,
    pub head: Vec<(String, Tensor)>,
}

fn numel(t: &Tensor) -> usize {
    t.size().iter().product::<i64>() as usize
}

impl ParamGroups {
    pub fn backbone_count(&self) -> usize {
        self.backbone.iter().map(|(_, t)| numel(t)).sum()
    }

    pub fn head_count(&self) -> usize {
        self.head.iter().map(|(_, t)| numel(t)).sum()
    }
}

impl Network {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    /// `[batch, 3, h, w]` images to `[batch, num_classes]` logits.
    pub fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        let features = match &self.body {
            Body::ResNet(m) => m.features(xs, train),
            Body::DenseNet(m) => m.features(xs, train),
            Body::Vgg(m) => m.features(xs, train),
        };
        features.dropout(self.spec.head_dropout, train).apply(&self.head)
    }

    /// Exact number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        let vars = self.vs.variables();
        self.trainable.iter().map(|n| numel(&vars[n])).sum()
    }

    pub fn split_param_groups(&self) -> ParamGroups {
        let vars = self.vs.variables();
        let mut groups = ParamGroups { backbone: Vec::new(), head: Vec::new() };
        for name in &self.trainable {
            let entry = (name.clone(), vars[name].shallow_clone());
            if name.starts_with(HEAD_PREFIX) {
                groups.head.push(entry);
            } else {
                groups.backbone.push(entry);
            }
        }
        groups
    }

    /// Freeze or unfreeze every backbone parameter.
    pub fn set_backbone_trainable(&self, trainable: bool) {
        for (_, t) in self.split_param_groups().backbone {
            let _ = t.set_requires_grad(trainable);
        }
    }

    /// Load every variable (parameters and normalization statistics) from a
    /// safetensors file written by [`Network::save`].
    pub fn load(&mut self, path: &Path) -> Result<()> {
        self.vs.load(path).map_err(|e| Error::CheckpointCorrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.vs.save(path)?)
    }

    /// Deep copy of all variables, for restoring the best epoch's weights.
    pub fn snapshot(&self) -> Vec<(String, Tensor)> {
        let mut vars: Vec<_> = self.vs.variables().into_iter().map(|(n, t)| (n, t.detach().copy())).collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        vars
    }

    pub fn restore(&self, snapshot: &[(String, Tensor)]) {
        let vars = self.vs.variables();
        tch::no_grad(|| {
            for (name, src) in snapshot {
                vars[name].shallow_clone().copy_(src);
            }
        });
    }
}

/// Random input batch at the network resolution, for smoke tests.
pub fn random_batch(batch: i64, side: i64) -> Tensor {
    Tensor::randn([batch, 3, side, side], (Kind::Float, Device::Cpu))
}
