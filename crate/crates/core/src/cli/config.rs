//! Flat key-value run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneConfig, BackboneKind, XavierVariant};
use crate::fusion::BRANCHES;
use crate::training::TrainConfig;

/// One documented configuration key.
pub struct SchemaEntry {
    pub key: &'static str,
    pub kind: &'static str,
    pub default: &'static str,
    pub help: &'static str,
}

#[rustfmt::skip]
pub const SCHEMA: &[SchemaEntry] = &[
    SchemaEntry { key: "train_manifest", kind: "path", default: "-", help: "labeled training manifest (image_id,path,label)" },
    SchemaEntry { key: "validation_manifest", kind: "path", default: "-", help: "optional manifest scored after every epoch when labeled" },
    SchemaEntry { key: "eval_manifest", kind: "path", default: "-", help: "manifest scored by predict, evaluate and report" },
    SchemaEntry { key: "out_dir", kind: "path", default: "mlde_out", help: "directory for every output" },
    SchemaEntry { key: "checkpoint_dir", kind: "path", default: "<out_dir>/checkpoints", help: "where the seven checkpoints are written and read" },
    SchemaEntry { key: "predictions", kind: "path", default: "<out_dir>/predictions.csv", help: "prediction file" },
    SchemaEntry { key: "roc_svg", kind: "path", default: "-", help: "evaluate also writes ROC curves to this SVG file" },
    SchemaEntry { key: "learning_rate", kind: "float", default: "0.01", help: "SGD step size for branch parameters" },
    SchemaEntry { key: "fusion_learning_rate", kind: "float", default: "learning_rate", help: "SGD step size for the fusion logits" },
    SchemaEntry { key: "momentum", kind: "float", default: "0.9", help: "SGD momentum in [0, 1)" },
    SchemaEntry { key: "batch_size", kind: "int", default: "16", help: "images per optimization step" },
    SchemaEntry { key: "fine_tune_stages", kind: "int", default: "4", help: "number of unfreezing stages" },
    SchemaEntry { key: "epochs_per_stage", kind: "[int]", default: "[2, 2, 2, 4]", help: "epochs for each stage; length must equal fine_tune_stages" },
    SchemaEntry { key: "seed", kind: "int", default: "0", help: "base seed; task i uses seed + i" },
    SchemaEntry { key: "backbone", kind: "string", default: "tiny_test", help: "tiny_test or resnet50_pretrained" },
    SchemaEntry { key: "pretrained_weights", kind: "path", default: "-", help: "ResNet-50 weights in safetensors format" },
    SchemaEntry { key: "pretrained_sha256", kind: "string", default: "-", help: "expected SHA-256 of the weight file" },
    SchemaEntry { key: "xavier", kind: "string", default: "uniform", help: "head initialization: uniform or normal" },
    SchemaEntry { key: "scales", kind: "[float; 4]", default: "[1.0, 0.8, 0.6, 0.4]", help: "crop scales, first 1.0, strictly decreasing" },
    SchemaEntry { key: "norm_mean", kind: "[float; 3]", default: "ImageNet", help: "per-channel normalization mean" },
    SchemaEntry { key: "norm_std", kind: "[float; 3]", default: "ImageNet", help: "per-channel normalization std" },
    SchemaEntry { key: "hflip", kind: "bool", default: "false", help: "random horizontal flips during training" },
    SchemaEntry { key: "branch_pretrain_epochs", kind: "int", default: "0", help: "epochs of per-branch training before joint training" },
    SchemaEntry { key: "deterministic", kind: "bool", default: "false", help: "single worker, bitwise reproducible" },
    SchemaEntry { key: "workers", kind: "int", default: "logical cores", help: "worker threads" },
];

/// Every configuration key; unset keys take the defaults listed in [`SCHEMA`].
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub train_manifest: Option<PathBuf>,
    pub validation_manifest: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint_dir: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
    pub roc_svg: Option<PathBuf>,
    pub learning_rate: Option<f64>,
    pub fusion_learning_rate: Option<f64>,
    pub momentum: Option<f64>,
    pub batch_size: Option<usize>,
    pub fine_tune_stages: Option<usize>,
    pub epochs_per_stage: Option<Vec<usize>>,
    pub seed: Option<u64>,
    pub backbone: Option<String>,
    pub pretrained_weights: Option<PathBuf>,
    pub pretrained_sha256: Option<String>,
    pub xavier: Option<String>,
    pub scales: Option<Vec<f64>>,
    pub norm_mean: Option<Vec<f32>>,
    pub norm_std: Option<Vec<f32>>,
    pub hflip: Option<bool>,
    pub branch_pretrain_epochs: Option<usize>,
    pub deterministic: Option<bool>,
    pub workers: Option<usize>,
}

/// Parses `key=value`. Values that are not valid TOML are taken as strings.
fn override_entry(spec: &str) -> Result<(String, toml::Value), String> {
    let (key, value) = spec
        .split_once('=')
        .ok_or_else(|| format!("override {spec:?} is not of the form key=value"))?;
    let key = key.trim().to_string();
    let value = value.trim();
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    Ok((key, parsed))
}

impl RunConfig {
    /// Reads the optional config file, then applies `overrides` in order.
    pub fn load(file: Option<&Path>, overrides: &[String]) -> Result<Self, Vec<String>> {
        let mut table = match file {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| vec![format!("{}: {e}", path.display())])?;
                text.parse::<toml::Table>()
                    .map_err(|e| vec![format!("{}: {e}", path.display())])?
            }
            None => toml::Table::new(),
        };
        let mut errors = Vec::new();
        for o in overrides {
            match override_entry(o) {
                Ok((k, v)) => {
                    table.insert(k, v);
                }
                Err(e) => errors.push(e),
            }
        }
        let known: Vec<&str> = SCHEMA.iter().map(|e| e.key).collect();
        for k in table.keys() {
            if !known.contains(&k.as_str()) {
                errors.push(format!("unknown key {k:?}"));
            }
        }
        if !errors.is_empty() {
            return Err(errors);
        }
        toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| vec![e.message().to_string()])
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("mlde_out"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.checkpoint_dir
            .clone()
            .unwrap_or_else(|| self.out_dir().join("checkpoints"))
    }

    pub fn predictions_path(&self) -> PathBuf {
        self.predictions
            .clone()
            .unwrap_or_else(|| self.out_dir().join("predictions.csv"))
    }

    pub fn deterministic(&self) -> bool {
        self.deterministic.unwrap_or(false)
    }

    /// Worker count; 1 in deterministic mode.
    pub fn workers(&self) -> usize {
        if self.deterministic() {
            1
        } else {
            self.workers
                .filter(|&w| w > 0)
                .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
        }
    }

    /// Training configuration, or every problem found while building it.
    pub fn train_config(&self) -> Result<TrainConfig, Vec<String>> {
        let d = TrainConfig::default();
        let mut errors = Vec::new();
        let kind = match self.backbone.as_deref() {
            None => BackboneKind::TinyTest,
            Some(s) => BackboneKind::parse(s).unwrap_or_else(|| {
                errors.push(format!("backbone must be tiny_test or resnet50_pretrained, got {s:?}"));
                BackboneKind::TinyTest
            }),
        };
        let xavier = match self.xavier.as_deref() {
            None | Some("uniform") => XavierVariant::Uniform,
            Some("normal") => XavierVariant::Normal,
            Some(s) => {
                errors.push(format!("xavier must be uniform or normal, got {s:?}"));
                XavierVariant::Uniform
            }
        };
        let scales = match &self.scales {
            None => d.scales,
            Some(v) if v.len() == BRANCHES => [v[0], v[1], v[2], v[3]],
            Some(v) => {
                errors.push(format!("scales needs exactly {BRANCHES} values, got {}", v.len()));
                d.scales
            }
        };
        let triple = |name: &str, v: &Option<Vec<f32>>, default: [f32; 3], errors: &mut Vec<String>| match v {
            None => default,
            Some(v) if v.len() == 3 => [v[0], v[1], v[2]],
            Some(v) => {
                errors.push(format!("{name} needs exactly 3 values, got {}", v.len()));
                default
            }
        };
        let norm_mean = triple("norm_mean", &self.norm_mean, d.norm_mean, &mut errors);
        let norm_std = triple("norm_std", &self.norm_std, d.norm_std, &mut errors);
        let config = TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            fusion_learning_rate: self.fusion_learning_rate,
            momentum: self.momentum.unwrap_or(d.momentum),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            fine_tune_stages: self.fine_tune_stages.unwrap_or(d.fine_tune_stages),
            epochs_per_stage: self.epochs_per_stage.clone().unwrap_or(d.epochs_per_stage),
            seed: self.seed.unwrap_or(d.seed),
            backbone: BackboneConfig {
                kind,
                weights: self.pretrained_weights.clone(),
                weights_sha256: self.pretrained_sha256.clone(),
                xavier,
            },
            scales,
            norm_mean,
            norm_std,
            hflip: self.hflip.unwrap_or(d.hflip),
            branch_pretrain_epochs: self.branch_pretrain_epochs.unwrap_or(d.branch_pretrain_epochs),
        };
        errors.extend(config.violations());
        if errors.is_empty() {
            Ok(config)
        } else {
            Err(errors)
        }
    }

    /// Hex SHA-256 of the resolved configuration.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(serde_json::to_vec(self).expect("config serializes")))
    }
}

/// The schema as an aligned text table.
pub fn render_schema() -> String {
    let kw = SCHEMA.iter().map(|e| e.key.len()).max().unwrap_or(0);
    let tw = SCHEMA.iter().map(|e| e.kind.len()).max().unwrap_or(0);
    let dw = SCHEMA.iter().map(|e| e.default.len()).max().unwrap_or(0);
    let mut out = format!("{:<kw$}  {:<tw$}  {:<dw$}  description\n", "key", "type", "default");
    for e in SCHEMA {
        out.push_str(&format!(
            "{:<kw$}  {:<tw$}  {:<dw$}  {}\n",
            e.key, e.kind, e.default, e.help
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_take_precedence_and_parse_types() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "seed = 3\nlearning_rate = 0.5\nout_dir = \"a\"\n").unwrap();
        let c = RunConfig::load(
            Some(&path),
            &[
                "seed=9".into(),
                "out_dir=/tmp/b".into(),
                "epochs_per_stage=[1,1,1,1]".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.seed, Some(9));
        assert_eq!(c.learning_rate, Some(0.5));
        assert_eq!(c.out_dir(), PathBuf::from("/tmp/b"));
        assert_eq!(c.epochs_per_stage, Some(vec![1, 1, 1, 1]));
    }

    #[test]
    fn unknown_keys_and_bad_overrides_are_all_reported() {
        let e = RunConfig::load(None, &["bogus=1".into(), "noequals".into(), "other=2".into()]).unwrap_err();
        assert_eq!(e.len(), 3, "{e:?}");
    }

    #[test]
    fn train_config_collects_every_violation() {
        let c = RunConfig {
            backbone: Some("vgg".into()),
            scales: Some(vec![1.0, 0.5]),
            batch_size: Some(0),
            epochs_per_stage: Some(vec![1]),
            ..RunConfig::default()
        };
        let e = c.train_config().unwrap_err();
        assert_eq!(e.len(), 4, "{e:#?}");
    }

    #[test]
    fn schema_covers_every_field() {
        let json = serde_json::to_value(RunConfig::default()).unwrap();
        let fields: Vec<&String> = json.as_object().unwrap().keys().collect();
        assert_eq!(fields.len(), SCHEMA.len());
        for e in SCHEMA {
            assert!(fields.iter().any(|f| f.as_str() == e.key), "{}", e.key);
        }
        assert!(render_schema().lines().count() == SCHEMA.len() + 1);
    }

    #[test]
    fn deterministic_forces_one_worker() {
        let c = RunConfig {
            deterministic: Some(true),
            workers: Some(8),
            ..RunConfig::default()
        };
        assert_eq!(c.workers(), 1);
    }
}
