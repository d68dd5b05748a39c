//! Branch classifier networks.
//!
//! Two interchangeable backbones share one interface: a pretrained ResNet-50
//! adapter whose 1000-way classifier is replaced by a 2-output head, and a tiny
//! three-group CNN for desk-scale experiments and tests. Parameters are organized
//! in named groups, ordered input to output with `head` last, which is what the
//! fine-tuning schedule unfreezes.

mod init;
pub mod layers;
mod schedule;
mod weights;

use std::ops::Range;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use init::{xavier_bound, xavier_init, xavier_init_with, XavierVariant};
pub use schedule::{freeze_schedule, freeze_schedule_for, FineTuneStage};
pub use weights::{file_sha256, load_safetensors, save_safetensors};

use layers::{BatchNorm, Cache, Conv2d, Linear, MaxPool, Op, ParamId, ParamInfo, ParamStore, Residual, Tensor3};

/// Output width of every branch head.
pub const HEAD_OUTPUTS: usize = 2;

/// Parameter groups of the ResNet-50 adapter, input to output.
pub const RESNET50_GROUPS: [&str; 6] = ["stem", "block1", "block2", "block3", "block4", "head"];

/// Parameter groups of the tiny test backbone, input to output.
pub const TINY_GROUPS: [&str; 4] = ["stem", "block1", "block2", "head"];

/// Width of the ResNet-50 pooled feature vector.
pub const RESNET50_FEATURE_DIM: usize = 2048;

/// Width of the tiny backbone's pooled feature vector.
pub const TINY_FEATURE_DIM: usize = 16;

/// Bottleneck blocks per ResNet-50 stage.
const RESNET50_DEPTHS: [usize; 4] = [3, 4, 6, 3];
const RESNET50_PLANES: [usize; 4] = [64, 128, 256, 512];
const BOTTLENECK_EXPANSION: usize = 4;

/// Classifier width of the ImageNet-pretrained checkpoint.
pub const IMAGENET_CLASSES: usize = 1000;

#[derive(Debug, thiserror::Error)]
pub enum BackboneError {
    #[error("pretrained weight file is required for {0:?}")]
    MissingWeights(BackboneKind),
    #[error("reading weights {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt weight file: {0}")]
    Corrupt(String),
    #[error("weight checksum mismatch: expected {expected}, found {found}")]
    ChecksumMismatch { expected: String, found: String },
    #[error("weight file lacks tensor {0:?}")]
    MissingTensor(String),
    #[error("tensor {name:?} has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor {name:?} has unsupported dtype {dtype}")]
    UnsupportedDtype { name: String, dtype: String },
    #[error("parameter layout does not match the {kind:?} architecture: {detail}")]
    LayoutMismatch { kind: BackboneKind, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Resnet50Pretrained,
    TinyTest,
}

impl BackboneKind {
    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::Resnet50Pretrained => "resnet50_pretrained",
            BackboneKind::TinyTest => "tiny_test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "resnet50_pretrained" => Some(BackboneKind::Resnet50Pretrained),
            "tiny_test" => Some(BackboneKind::TinyTest),
            _ => None,
        }
    }
}

/// Structural description of a branch network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub kind: BackboneKind,
    pub feature_dim: usize,
    pub head_outputs: usize,
    pub layer_groups: Vec<String>,
}

impl BackboneSpec {
    pub fn for_kind(kind: BackboneKind) -> Self {
        let (feature_dim, groups): (usize, &[&str]) = match kind {
            BackboneKind::Resnet50Pretrained => (RESNET50_FEATURE_DIM, &RESNET50_GROUPS),
            BackboneKind::TinyTest => (TINY_FEATURE_DIM, &TINY_GROUPS),
        };
        Self {
            kind,
            feature_dim,
            head_outputs: HEAD_OUTPUTS,
            layer_groups: groups.iter().map(|g| g.to_string()).collect(),
        }
    }

    pub fn group_index(&self, name: &str) -> Option<usize> {
        self.layer_groups.iter().position(|g| g == name)
    }

    /// Fine-tuning schedule over this network's groups.
    pub fn schedule(&self, total_stages: usize) -> Vec<FineTuneStage> {
        freeze_schedule_for(&self.layer_groups, total_stages)
    }
}

/// How to construct a branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    /// Local pretrained weights in safetensors format (ResNet-50 only).
    pub weights: Option<PathBuf>,
    /// Hex SHA-256 of the weight file.
    pub weights_sha256: Option<String>,
    pub xavier: XavierVariant,
}

impl BackboneConfig {
    pub fn tiny() -> Self {
        Self {
            kind: BackboneKind::TinyTest,
            weights: None,
            weights_sha256: None,
            xavier: XavierVariant::Uniform,
        }
    }
}

/// A branch network: layer groups over a flat parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    spec: BackboneSpec,
    store: ParamStore,
    groups: Vec<Vec<Op>>,
    head: Linear,
}

/// Forward-pass record needed by [`Backbone::backward`].
#[derive(Debug)]
pub struct Tape {
    first_group: usize,
    caches: Vec<Vec<Cache>>,
}

/// Builds a branch. ResNet-50 pre-head parameters come from the configured weight
/// file; the tiny backbone is drawn from `rng_seed`. The head is always a fresh
/// Xavier-initialized 2-output layer with zero bias.
pub fn build_backbone(config: &BackboneConfig, rng_seed: u64) -> Result<Backbone, BackboneError> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut net = match config.kind {
        BackboneKind::TinyTest => {
            let mut net = Backbone::tiny_skeleton();
            net.randomize(config.xavier, &mut rng);
            net
        }
        BackboneKind::Resnet50Pretrained => {
            let path = config
                .weights
                .as_ref()
                .ok_or(BackboneError::MissingWeights(config.kind))?;
            let bytes = std::fs::read(path).map_err(|source| BackboneError::Io {
                path: path.clone(),
                source,
            })?;
            if let Some(expected) = &config.weights_sha256 {
                let found = hex::encode(Sha256::digest(&bytes));
                if !found.eq_ignore_ascii_case(expected.trim()) {
                    return Err(BackboneError::ChecksumMismatch {
                        expected: expected.clone(),
                        found,
                    });
                }
            } else {
                log::warn!("no checksum recorded for {}", path.display());
            }
            let mut net = Backbone::resnet50_skeleton(IMAGENET_CLASSES);
            load_safetensors(&mut net.store, &bytes)?;
            net
        }
    };
    net.replace_head(config.xavier, &mut rng);
    Ok(net)
}

impl Backbone {
    /// Tiny backbone with zeroed parameters and a 2-output head.
    pub fn tiny_skeleton() -> Self {
        let mut b = Builder::default();
        let stem = vec![
            b.conv("stem.conv", 0, 3, 4, 3, 4, 1, true),
            Op::Relu,
            Op::MaxPool(MaxPool {
                k: 2,
                stride: 2,
                pad: 0,
            }),
        ];
        let block1 = vec![
            b.conv("block1.conv", 1, 4, 8, 3, 1, 1, true),
            Op::Relu,
            Op::MaxPool(MaxPool {
                k: 2,
                stride: 2,
                pad: 0,
            }),
        ];
        let block2 = vec![
            b.conv("block2.conv", 2, 8, TINY_FEATURE_DIM, 3, 1, 1, true),
            Op::Relu,
            Op::MaxPool(MaxPool {
                k: 2,
                stride: 2,
                pad: 0,
            }),
        ];
        let head = b.linear("head", 3, TINY_FEATURE_DIM, HEAD_OUTPUTS);
        Self::assemble(BackboneKind::TinyTest, b.store, vec![stem, block1, block2], head)
    }

    /// ResNet-50 (torchvision layout and parameter names) with zeroed parameters.
    pub fn resnet50_skeleton(classes: usize) -> Self {
        let mut b = Builder::default();
        let stem = vec![
            b.conv("conv1", 0, 3, 64, 7, 2, 3, false),
            b.bn("bn1", 0, 64),
            Op::Relu,
            Op::MaxPool(MaxPool {
                k: 3,
                stride: 2,
                pad: 1,
            }),
        ];
        let mut groups = vec![stem];
        let mut in_c = 64;
        for (stage, (&depth, &planes)) in RESNET50_DEPTHS.iter().zip(&RESNET50_PLANES).enumerate() {
            let group = stage + 1;
            let out_c = planes * BOTTLENECK_EXPANSION;
            let mut ops = Vec::with_capacity(depth);
            for block in 0..depth {
                let stride = if block == 0 && stage > 0 { 2 } else { 1 };
                let p = format!("layer{}.{block}", stage + 1);
                let main = vec![
                    b.conv(&format!("{p}.conv1"), group, in_c, planes, 1, 1, 0, false),
                    b.bn(&format!("{p}.bn1"), group, planes),
                    Op::Relu,
                    b.conv(&format!("{p}.conv2"), group, planes, planes, 3, stride, 1, false),
                    b.bn(&format!("{p}.bn2"), group, planes),
                    Op::Relu,
                    b.conv(&format!("{p}.conv3"), group, planes, out_c, 1, 1, 0, false),
                    b.bn(&format!("{p}.bn3"), group, out_c),
                ];
                let shortcut = if block == 0 {
                    vec![
                        b.conv(&format!("{p}.downsample.0"), group, in_c, out_c, 1, stride, 0, false),
                        b.bn(&format!("{p}.downsample.1"), group, out_c),
                    ]
                } else {
                    Vec::new()
                };
                ops.push(Op::Residual(Box::new(Residual { main, shortcut })));
                in_c = out_c;
            }
            groups.push(ops);
        }
        let head = b.linear("fc", 5, RESNET50_FEATURE_DIM, classes);
        Self::assemble(BackboneKind::Resnet50Pretrained, b.store, groups, head)
    }

    fn assemble(kind: BackboneKind, store: ParamStore, mut groups: Vec<Vec<Op>>, head: Linear) -> Self {
        groups.push(vec![Op::GlobalAvgPool, Op::Linear(head.clone())]);
        let mut spec = BackboneSpec::for_kind(kind);
        spec.head_outputs = head.out_features;
        Self {
            spec,
            store,
            groups,
            head,
        }
    }

    /// Rebuilds a network from stored parameters, checking names, shapes and groups
    /// against the architecture.
    pub fn restore(kind: BackboneKind, infos: &[ParamInfo], values: Vec<f64>) -> Result<Self, BackboneError> {
        let mut net = match kind {
            BackboneKind::TinyTest => Self::tiny_skeleton(),
            BackboneKind::Resnet50Pretrained => Self::resnet50_skeleton(HEAD_OUTPUTS),
        };
        let mismatch = |detail: String| BackboneError::LayoutMismatch { kind, detail };
        if infos != net.store.infos() {
            let first = infos
                .iter()
                .zip(net.store.infos())
                .find(|(a, b)| a != b)
                .map(|(a, b)| format!("found {} {:?}, expected {} {:?}", a.name, a.shape, b.name, b.shape))
                .unwrap_or_else(|| format!("{} parameters, expected {}", infos.len(), net.store.infos().len()));
            return Err(mismatch(first));
        }
        if values.len() != net.store.len() {
            return Err(mismatch(format!(
                "{} values, expected {}",
                values.len(),
                net.store.len()
            )));
        }
        net.store.values_mut().copy_from_slice(&values);
        Ok(net)
    }

    /// Draws every parameter afresh: Xavier weights, zero biases, identity batch norm.
    fn randomize(&mut self, variant: XavierVariant, rng: &mut ChaCha8Rng) {
        let infos = self.store.infos().to_vec();
        for (i, info) in infos.iter().enumerate() {
            let n = info.len();
            let values = if info.name.ends_with("running_var") {
                vec![1.0; n]
            } else if info.name.ends_with("weight") && info.shape.len() == 4 {
                let area = info.shape[2] * info.shape[3];
                init::xavier_values(variant, info.shape[1] * area, info.shape[0] * area, n, rng)
            } else if info.name.ends_with("weight") && info.shape.len() == 2 {
                init::xavier_values(variant, info.shape[1], info.shape[0], n, rng)
            } else if info.name.ends_with("weight") {
                // batch-norm scale
                vec![1.0; n]
            } else {
                vec![0.0; n]
            };
            self.store.get_mut(ParamId(i)).copy_from_slice(&values);
        }
    }

    /// Test helper: a ResNet-50 with seeded random parameters in place of
    /// pretrained ones.
    pub fn resnet50_random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut net = Self::resnet50_skeleton(IMAGENET_CLASSES);
        net.randomize(XavierVariant::Uniform, &mut rng);
        net.replace_head(XavierVariant::Uniform, &mut rng);
        net
    }

    /// Swaps in a fresh `feature_dim × 2` head (Xavier weights, zero bias); every
    /// other parameter is left untouched.
    pub fn replace_head(&mut self, variant: XavierVariant, rng: &mut ChaCha8Rng) {
        let fan_in = self.spec.feature_dim;
        let weights = init::xavier_values(variant, fan_in, HEAD_OUTPUTS, fan_in * HEAD_OUTPUTS, rng);
        self.store.replace(self.head.weight, &[HEAD_OUTPUTS, fan_in], weights);
        self.store
            .replace(self.head.bias, &[HEAD_OUTPUTS], vec![0.0; HEAD_OUTPUTS]);
        self.head.out_features = HEAD_OUTPUTS;
        self.spec.head_outputs = HEAD_OUTPUTS;
        let last = self.groups.last_mut().expect("head group");
        *last = vec![Op::GlobalAvgPool, Op::Linear(self.head.clone())];
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn kind(&self) -> BackboneKind {
        self.spec.kind
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn head_weight(&self) -> ParamId {
        self.head.weight
    }

    pub fn head_bias(&self) -> ParamId {
        self.head.bias
    }

    fn head_group(&self) -> usize {
        self.groups.len() - 1
    }

    /// Value ranges of parameters that belong to `group` and are trainable.
    pub fn trainable_ranges(&self, stage: &FineTuneStage) -> Vec<Range<usize>> {
        self.store
            .infos()
            .iter()
            .filter(|i| i.trainable && stage.is_trainable(&self.spec.layer_groups[i.group]))
            .map(ParamInfo::range)
            .collect()
    }

    /// Earliest group unfrozen by `stage`; backpropagation stops there.
    pub fn first_trainable_group(&self, stage: &FineTuneStage) -> usize {
        self.spec
            .layer_groups
            .iter()
            .position(|g| stage.is_trainable(g))
            .unwrap_or(self.head_group())
    }

    /// Per-group output shapes for an input shape, computed without running the net.
    pub fn group_output_shapes(&self, input: [usize; 3]) -> Vec<[usize; 3]> {
        let mut shape = input;
        self.groups
            .iter()
            .map(|ops| {
                shape = ops.iter().fold(shape, |s, op| op.output_shape(s));
                shape
            })
            .collect()
    }

    /// Logits for one channel-major input.
    pub fn forward(&self, input: Tensor3) -> [f64; HEAD_OUTPUTS] {
        let out = self
            .groups
            .iter()
            .fold(input, |x, ops| layers::forward_seq(ops, &self.store, x));
        [out.data[0], out.data[1]]
    }

    /// Pooled penultimate features.
    pub fn features(&self, input: Tensor3) -> Vec<f64> {
        let body = &self.groups[..self.head_group()];
        let x = body
            .iter()
            .fold(input, |x, ops| layers::forward_seq(ops, &self.store, x));
        Op::GlobalAvgPool.forward(&self.store, x).data
    }

    /// Forward pass that records what backpropagation from `first_group` onward needs.
    pub fn forward_train(&self, input: Tensor3, first_group: usize) -> ([f64; HEAD_OUTPUTS], Tape) {
        let mut x = input;
        let mut caches = Vec::with_capacity(self.groups.len() - first_group);
        for (g, ops) in self.groups.iter().enumerate() {
            if g < first_group {
                x = layers::forward_seq(ops, &self.store, x);
            } else {
                let (y, c) = layers::forward_seq_cached(ops, &self.store, x);
                caches.push(c);
                x = y;
            }
        }
        ([x.data[0], x.data[1]], Tape { first_group, caches })
    }

    /// Accumulates `d loss / d params` into `grads` for the groups recorded on `tape`.
    pub fn backward(&self, tape: &Tape, dlogits: [f64; HEAD_OUTPUTS], grads: &mut [f64]) {
        let mut dy = Tensor3::vector(dlogits.to_vec());
        for (g, caches) in tape.caches.iter().enumerate().rev() {
            let group = tape.first_group + g;
            let need_dx = group > tape.first_group;
            match layers::backward_seq(&self.groups[group], &self.store, caches, dy, grads, need_dx) {
                Some(d) => dy = d,
                None => break,
            }
        }
    }

    /// SHA-256 over the parameters outside the head group.
    pub fn body_checksum(&self) -> String {
        self.checksum_where(|info| info.group != self.head_group())
    }

    /// SHA-256 over the head parameters.
    pub fn head_checksum(&self) -> String {
        self.checksum_where(|info| info.group == self.head_group())
    }

    pub fn checksum(&self) -> String {
        self.checksum_where(|_| true)
    }

    fn checksum_where(&self, keep: impl Fn(&ParamInfo) -> bool) -> String {
        let mut h = Sha256::new();
        for info in self.store.infos().iter().filter(|i| keep(i)) {
            h.update(info.name.as_bytes());
            for v in &self.store.values()[info.range()] {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }
}

#[derive(Default)]
struct Builder {
    store: ParamStore,
}

impl Builder {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        group: usize,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        bias: bool,
    ) -> Op {
        let shape = [out_c, in_c, k, k];
        let weight = self.store.register(
            format!("{name}.weight"),
            &shape,
            group,
            true,
            vec![0.0; out_c * in_c * k * k],
        );
        let bias = bias.then(|| {
            self.store
                .register(format!("{name}.bias"), &[out_c], group, true, vec![0.0; out_c])
        });
        Op::Conv(Conv2d {
            weight,
            bias,
            in_c,
            out_c,
            k,
            stride,
            pad,
        })
    }

    fn bn(&mut self, name: &str, group: usize, c: usize) -> Op {
        Op::BatchNorm(BatchNorm {
            gamma: self
                .store
                .register(format!("{name}.weight"), &[c], group, true, vec![1.0; c]),
            beta: self
                .store
                .register(format!("{name}.bias"), &[c], group, true, vec![0.0; c]),
            running_mean: self
                .store
                .register(format!("{name}.running_mean"), &[c], group, false, vec![0.0; c]),
            running_var: self
                .store
                .register(format!("{name}.running_var"), &[c], group, false, vec![1.0; c]),
            channels: c,
        })
    }

    fn linear(&mut self, name: &str, group: usize, in_f: usize, out_f: usize) -> Linear {
        Linear {
            weight: self.store.register(
                format!("{name}.weight"),
                &[out_f, in_f],
                group,
                true,
                vec![0.0; out_f * in_f],
            ),
            bias: self
                .store
                .register(format!("{name}.bias"), &[out_f], group, true, vec![0.0; out_f]),
            in_features: in_f,
            out_features: out_f,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::INPUT_SIDE;

    fn input(seed: u64) -> Tensor3 {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3 * INPUT_SIDE * INPUT_SIDE;
        Tensor3::new(
            3,
            INPUT_SIDE,
            INPUT_SIDE,
            (0..n).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
    }

    #[test]
    fn tiny_output_shape() {
        let net = build_backbone(&BackboneConfig::tiny(), 7).unwrap();
        let logits = net.forward(input(1));
        assert_eq!(logits.len(), 2);
        assert!(logits.iter().all(|v| v.is_finite()));
        assert_eq!(net.features(input(1)).len(), TINY_FEATURE_DIM);
        assert_eq!(net.spec().head_outputs, 2);
        assert_eq!(net.spec().layer_groups.last().unwrap(), "head");
    }

    #[test]
    fn tiny_is_seed_deterministic() {
        let a = build_backbone(&BackboneConfig::tiny(), 5).unwrap();
        let b = build_backbone(&BackboneConfig::tiny(), 5).unwrap();
        let c = build_backbone(&BackboneConfig::tiny(), 6).unwrap();
        assert_eq!(a.store().values(), b.store().values());
        assert_ne!(a.store().values(), c.store().values());
    }

    #[test]
    fn replace_head_keeps_body() {
        let mut net = build_backbone(&BackboneConfig::tiny(), 1).unwrap();
        let body = net.body_checksum();
        let head = net.head_checksum();
        net.replace_head(XavierVariant::Uniform, &mut ChaCha8Rng::seed_from_u64(99));
        assert_eq!(net.body_checksum(), body);
        assert_ne!(net.head_checksum(), head);
        let hb = net.store().get(net.head_bias());
        assert_eq!(hb, [0.0, 0.0]);
        let bound = xavier_bound(TINY_FEATURE_DIM, 2);
        assert!(net.store().get(net.head_weight()).iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn two_head_replacements_differ() {
        let base = build_backbone(&BackboneConfig::tiny(), 1).unwrap();
        let (mut a, mut b) = (base.clone(), base);
        a.replace_head(XavierVariant::Uniform, &mut ChaCha8Rng::seed_from_u64(1));
        b.replace_head(XavierVariant::Uniform, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(a.body_checksum(), b.body_checksum());
        assert_ne!(a.head_checksum(), b.head_checksum());
    }

    #[test]
    fn resnet50_structure() {
        let net = Backbone::resnet50_skeleton(IMAGENET_CLASSES);
        let fc = net.store().find("fc.weight").unwrap();
        assert_eq!(net.store().info(fc).shape, [1000, 2048]);
        let shapes = net.group_output_shapes([3, 224, 224]);
        assert_eq!(shapes[0], [64, 56, 56]);
        let blocks = &shapes[1..5];
        assert_eq!(blocks, [[256, 56, 56], [512, 28, 28], [1024, 14, 14], [2048, 7, 7]]);
        for w in blocks.windows(2) {
            assert!(w[1][0] > w[0][0]);
            assert!(w[1][1] < w[0][1]);
        }
        assert_eq!(shapes[5], [1000, 1, 1]);
        // torchvision's parameter count; running statistics are buffers
        let trainable: usize = net
            .store()
            .infos()
            .iter()
            .filter(|i| i.trainable)
            .map(ParamInfo::len)
            .sum();
        assert_eq!(trainable, 25_557_032);
        let conv_like = net
            .store()
            .infos()
            .iter()
            .filter(|i| i.name.ends_with("weight") && (i.shape.len() == 4 || i.shape.len() == 2))
            .filter(|i| !i.name.contains("downsample"))
            .count();
        assert_eq!(conv_like, 50);
    }

    #[test]
    fn resnet50_head_replacement() {
        let net = Backbone::resnet50_skeleton(IMAGENET_CLASSES);
        let body = net.body_checksum();
        let mut replaced = net.clone();
        replaced.replace_head(XavierVariant::Uniform, &mut ChaCha8Rng::seed_from_u64(0));
        let fc = replaced.head_weight();
        assert_eq!(replaced.store().info(fc).shape, [2, 2048]);
        assert_eq!(replaced.body_checksum(), body);
        assert_eq!(replaced.group_output_shapes([3, 224, 224])[5], [2, 1, 1]);
    }

    #[test]
    fn restore_round_trip_and_mismatch() {
        let net = build_backbone(&BackboneConfig::tiny(), 3).unwrap();
        let restored = Backbone::restore(
            BackboneKind::TinyTest,
            net.store().infos(),
            net.store().values().to_vec(),
        )
        .unwrap();
        assert_eq!(restored, net);
        let mut infos = net.store().infos().to_vec();
        infos[0].shape = vec![1, 2, 3, 4];
        assert!(matches!(
            Backbone::restore(BackboneKind::TinyTest, &infos, net.store().values().to_vec()),
            Err(BackboneError::LayoutMismatch { .. })
        ));
    }

    #[test]
    fn resnet_requires_weights() {
        let config = BackboneConfig {
            kind: BackboneKind::Resnet50Pretrained,
            weights: None,
            weights_sha256: None,
            xavier: XavierVariant::Uniform,
        };
        assert!(matches!(
            build_backbone(&config, 0),
            Err(BackboneError::MissingWeights(_))
        ));
    }

    #[test]
    fn tiny_gradients_match_finite_differences() {
        let net = build_backbone(&BackboneConfig::tiny(), 11).unwrap();
        let x = input(3);
        let objective = |net: &Backbone| {
            let l = net.forward(x.clone());
            0.7 * l[0] - 1.3 * l[1]
        };
        let stage = net.spec().schedule(4).pop().unwrap();
        let (_, tape) = net.forward_train(x.clone(), net.first_trainable_group(&stage));
        let mut grads = net.store().zeros_like();
        net.backward(&tape, [0.7, -1.3], &mut grads);
        let h = 1e-6;
        let mut probe = net.clone();
        for info in net.store().infos() {
            for i in info.range().step_by(1.max(info.len() / 5)) {
                let orig = probe.store().values()[i];
                probe.store_mut().values_mut()[i] = orig + h;
                let fp = objective(&probe);
                probe.store_mut().values_mut()[i] = orig - h;
                let fm = objective(&probe);
                probe.store_mut().values_mut()[i] = orig;
                let fd = (fp - fm) / (2.0 * h);
                let tol = 1e-6 * (1.0 + fd.abs());
                assert!((fd - grads[i]).abs() < tol, "{}[{i}]: {fd} vs {}", info.name, grads[i]);
            }
        }
    }

    #[test]
    fn head_only_stage_skips_body_gradients() {
        let net = build_backbone(&BackboneConfig::tiny(), 2).unwrap();
        let stage = &net.spec().schedule(1)[0];
        let first = net.first_trainable_group(stage);
        assert_eq!(first, 3);
        let (_, tape) = net.forward_train(input(4), first);
        let mut grads = net.store().zeros_like();
        net.backward(&tape, [1.0, -1.0], &mut grads);
        let head: Vec<_> = net.trainable_ranges(stage);
        assert_eq!(head.len(), 2);
        for info in net.store().infos() {
            let nonzero = grads[info.range()].iter().any(|g| *g != 0.0);
            assert_eq!(nonzero, info.group == 3, "{}", info.name);
        }
    }
}
