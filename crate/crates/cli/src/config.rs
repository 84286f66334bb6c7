//! Experiment configuration documents.
//!
//! Grammar: one `key = value` per line; `#` starts a comment that runs to
//! the end of the line; blank lines are ignored. Every key is optional and
//! falls back to the default listed by [`ExperimentConfig::default`].
//! Unknown and repeated keys are errors. Lists are comma separated.

use std::fmt;
use std::path::PathBuf;

use dimcl::data::augment::AugmentPolicy;
use dimcl::frameworks::{DimclInput, FrameworkKind};
use dimcl::losses::NegativeLogit;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub line: Option<usize>,
    pub key: Option<String>,
    pub message: String,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(line) = self.line {
            write!(f, "line {line}: ")?;
        }
        f.write_str(&self.message)
    }
}

impl std::error::Error for ConfigError {}

fn key_error(key: &str, message: impl Into<String>) -> ConfigError {
    ConfigError { line: None, key: Some(key.to_string()), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetKind {
    /// Gaussian clusters generated from the synth_* keys.
    Synth,
    /// A `DCLSYN1` file at `data_path`; every fifth example is held out.
    SynthFile,
    /// Extracted CIFAR-10 binary directory at `data_path`.
    Cifar10,
    /// Extracted CIFAR-100 binary directory at `data_path`.
    Cifar100,
}

impl DatasetKind {
    fn name(self) -> &'static str {
        match self {
            DatasetKind::Synth => "synth",
            DatasetKind::SynthFile => "synth-file",
            DatasetKind::Cifar10 => "cifar10",
            DatasetKind::Cifar100 => "cifar100",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    /// MLP for vector data, convolutional net for images.
    Auto,
    Mlp,
    Conv,
}

impl BackboneKind {
    fn name(self) -> &'static str {
        match self {
            BackboneKind::Auto => "auto",
            BackboneKind::Mlp => "mlp",
            BackboneKind::Conv => "conv",
        }
    }
}

/// Full specification of one training run.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetKind,
    pub data_path: Option<PathBuf>,
    pub synth_classes: usize,
    pub synth_dim: usize,
    pub synth_sigma: f64,
    pub synth_train_per_class: usize,
    pub synth_test_per_class: usize,
    /// Use only the first `n` training / test examples (0 = all).
    pub train_subset: usize,
    pub test_subset: usize,

    pub framework: FrameworkKind,
    pub backbone: BackboneKind,
    pub mlp_hidden: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub proj_hidden: usize,
    /// Embedding dimension `D`.
    pub dim: usize,
    pub pred_hidden: usize,

    pub lambda: f64,
    pub tau: f64,
    pub base_tau: f64,
    pub negatives: NegativeLogit,
    pub center: bool,
    pub dimcl_input: DimclInput,
    pub ema_momentum: f64,

    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate at batch size 256; scaled linearly with `batch_size`.
    pub lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,

    /// Augmentation noise for vector data.
    pub noise_sigma: f64,
    pub augment: AugmentPolicy,

    pub seed: u64,
    pub probe_epochs: usize,
    pub probe_lr: f64,
    pub knn_k: usize,
    pub eval_every: usize,
    /// Training examples whose two views feed the diversity measurement.
    pub eval_samples: usize,
    /// Rows per encoder pass when extracting evaluation features.
    pub eval_chunk: usize,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetKind::Synth,
            data_path: None,
            synth_classes: 3,
            synth_dim: 32,
            synth_sigma: 0.1,
            synth_train_per_class: 300,
            synth_test_per_class: 100,
            train_subset: 0,
            test_subset: 0,
            framework: FrameworkKind::SimSiam,
            backbone: BackboneKind::Auto,
            mlp_hidden: vec![128, 128, 128],
            conv_channels: vec![32, 64, 128, 256],
            proj_hidden: 512,
            dim: 256,
            pred_hidden: 128,
            lambda: 0.1,
            tau: 0.1,
            base_tau: 0.1,
            negatives: NegativeLogit::Dot,
            center: false,
            dimcl_input: DimclInput::Projector,
            ema_momentum: 0.99,
            epochs: 30,
            batch_size: 256,
            lr: 0.1,
            warmup_epochs: 10,
            momentum: 0.9,
            weight_decay: 1e-5,
            noise_sigma: 0.1,
            augment: AugmentPolicy::default(),
            seed: 0,
            probe_epochs: 100,
            probe_lr: 0.3,
            knn_k: 20,
            eval_every: 5,
            eval_samples: 512,
            eval_chunk: 1024,
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

/// Every recognised key, in serialization order.
pub const KEYS: &[&str] = &[
    "dataset",
    "data_path",
    "synth_classes",
    "synth_dim",
    "synth_sigma",
    "synth_train_per_class",
    "synth_test_per_class",
    "train_subset",
    "test_subset",
    "framework",
    "backbone",
    "mlp_hidden",
    "conv_channels",
    "proj_hidden",
    "dim",
    "pred_hidden",
    "lambda",
    "tau",
    "base_tau",
    "negatives",
    "center",
    "dimcl_input",
    "ema_momentum",
    "epochs",
    "batch_size",
    "lr",
    "warmup_epochs",
    "momentum",
    "weight_decay",
    "noise_sigma",
    "crop_min",
    "crop_max",
    "flip_prob",
    "jitter_prob",
    "brightness",
    "contrast",
    "saturation",
    "hue",
    "grayscale_prob",
    "blur_prob",
    "solarize_prob",
    "solarize_threshold",
    "seed",
    "probe_epochs",
    "probe_lr",
    "knn_k",
    "eval_every",
    "eval_samples",
    "eval_chunk",
    "output_dir",
];

fn parse_usize(key: &str, v: &str) -> Result<usize, ConfigError> {
    v.parse().map_err(|_| key_error(key, format!("{key}: expected a non-negative integer, got `{v}`")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x: f64 = v.parse().map_err(|_| key_error(key, format!("{key}: expected a number, got `{v}`")))?;
    if !x.is_finite() {
        return Err(key_error(key, format!("{key}: value must be finite")));
    }
    Ok(x)
}

fn parse_bool(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(key_error(key, format!("{key}: expected true or false, got `{v}`"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>, ConfigError> {
    v.split(',').map(|s| parse_usize(key, s.trim())).collect()
}

fn list(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn prob(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x = parse_f64(key, v)?;
    if !(0.0..=1.0).contains(&x) {
        return Err(key_error(key, format!("{key} out of [0,1]")));
    }
    Ok(x)
}

fn positive(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x = parse_f64(key, v)?;
    if x <= 0.0 {
        return Err(key_error(key, format!("{key} must be positive")));
    }
    Ok(x)
}

fn nonnegative(key: &str, v: &str) -> Result<f64, ConfigError> {
    let x = parse_f64(key, v)?;
    if x < 0.0 {
        return Err(key_error(key, format!("{key} must be non-negative")));
    }
    Ok(x)
}

fn at_least(key: &str, v: &str, min: usize) -> Result<usize, ConfigError> {
    let x = parse_usize(key, v)?;
    if x < min {
        return Err(key_error(key, format!("{key} must be at least {min}")));
    }
    Ok(x)
}

impl ExperimentConfig {
    /// Assigns one key from its textual value, checking its range.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let a = &mut self.augment;
        match key {
            "dataset" => {
                self.dataset = match v {
                    "synth" => DatasetKind::Synth,
                    "synth-file" => DatasetKind::SynthFile,
                    "cifar10" => DatasetKind::Cifar10,
                    "cifar100" => DatasetKind::Cifar100,
                    _ => return Err(key_error(key, format!("dataset: unknown kind `{v}`"))),
                }
            }
            "data_path" => self.data_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "synth_classes" => self.synth_classes = at_least(key, v, 2)?,
            "synth_dim" => self.synth_dim = at_least(key, v, 1)?,
            "synth_sigma" => self.synth_sigma = positive(key, v)?,
            "synth_train_per_class" => self.synth_train_per_class = at_least(key, v, 1)?,
            "synth_test_per_class" => self.synth_test_per_class = at_least(key, v, 1)?,
            "train_subset" => self.train_subset = parse_usize(key, v)?,
            "test_subset" => self.test_subset = parse_usize(key, v)?,
            "framework" => self.framework = v.parse().map_err(|_| key_error(key, format!("framework: unknown kind `{v}`")))?,
            "backbone" => {
                self.backbone = match v {
                    "auto" => BackboneKind::Auto,
                    "mlp" => BackboneKind::Mlp,
                    "conv" => BackboneKind::Conv,
                    _ => return Err(key_error(key, format!("backbone: unknown kind `{v}`"))),
                }
            }
            "mlp_hidden" | "conv_channels" => {
                let l = parse_list(key, v)?;
                if l.is_empty() || l.contains(&0) {
                    return Err(key_error(key, format!("{key} needs positive widths")));
                }
                if key == "mlp_hidden" {
                    self.mlp_hidden = l
                } else {
                    self.conv_channels = l
                }
            }
            "proj_hidden" => self.proj_hidden = at_least(key, v, 1)?,
            "dim" => self.dim = at_least(key, v, 2)?,
            "pred_hidden" => self.pred_hidden = at_least(key, v, 1)?,
            "lambda" => {
                let x = parse_f64(key, v)?;
                if !(0.0..=1.0).contains(&x) {
                    return Err(key_error(key, "lambda out of [0,1]"));
                }
                self.lambda = x
            }
            "tau" => self.tau = positive(key, v)?,
            "base_tau" => self.base_tau = positive(key, v)?,
            "negatives" => {
                self.negatives = match v {
                    "dot" => NegativeLogit::Dot,
                    "abs" => NegativeLogit::AbsDot,
                    _ => return Err(key_error(key, format!("negatives: expected dot or abs, got `{v}`"))),
                }
            }
            "center" => self.center = parse_bool(key, v)?,
            "dimcl_input" => {
                self.dimcl_input = match v {
                    "projector" => DimclInput::Projector,
                    "predictor" => DimclInput::Predictor,
                    _ => return Err(key_error(key, format!("dimcl_input: expected projector or predictor, got `{v}`"))),
                }
            }
            "ema_momentum" => self.ema_momentum = prob(key, v)?,
            "epochs" => self.epochs = parse_usize(key, v)?,
            "batch_size" => self.batch_size = at_least(key, v, 2)?,
            "lr" => self.lr = nonnegative(key, v)?,
            "warmup_epochs" => self.warmup_epochs = parse_usize(key, v)?,
            "momentum" => {
                let x = parse_f64(key, v)?;
                if !(0.0..1.0).contains(&x) {
                    return Err(key_error(key, "momentum out of [0,1)"));
                }
                self.momentum = x
            }
            "weight_decay" => self.weight_decay = nonnegative(key, v)?,
            "noise_sigma" => self.noise_sigma = nonnegative(key, v)?,
            "crop_min" => a.crop_scale.0 = positive(key, v)?,
            "crop_max" => a.crop_scale.1 = positive(key, v)?,
            "flip_prob" => a.flip_prob = prob(key, v)?,
            "jitter_prob" => a.jitter_prob = prob(key, v)?,
            "brightness" => a.brightness = nonnegative(key, v)?,
            "contrast" => a.contrast = nonnegative(key, v)?,
            "saturation" => a.saturation = nonnegative(key, v)?,
            "hue" => {
                let x = parse_f64(key, v)?;
                if !(0.0..=0.5).contains(&x) {
                    return Err(key_error(key, "hue out of [0,0.5]"));
                }
                a.hue = x
            }
            "grayscale_prob" => a.grayscale_prob = prob(key, v)?,
            "blur_prob" => a.blur_prob = prob(key, v)?,
            "solarize_prob" => a.solarize_prob = prob(key, v)?,
            "solarize_threshold" => a.solarize_threshold = prob(key, v)?,
            "seed" => self.seed = v.parse().map_err(|_| key_error(key, format!("seed: expected an integer, got `{v}`")))?,
            "probe_epochs" => self.probe_epochs = at_least(key, v, 1)?,
            "probe_lr" => self.probe_lr = positive(key, v)?,
            "knn_k" => self.knn_k = at_least(key, v, 1)?,
            "eval_every" => self.eval_every = at_least(key, v, 1)?,
            "eval_samples" => self.eval_samples = at_least(key, v, 2)?,
            "eval_chunk" => self.eval_chunk = at_least(key, v, 1)?,
            "output_dir" => {
                if v.is_empty() {
                    return Err(key_error(key, "output_dir must not be empty"));
                }
                self.output_dir = PathBuf::from(v)
            }
            _ => return Err(key_error(key, format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Textual value of `key`, in the form [`ExperimentConfig::set`] accepts.
    pub fn get(&self, key: &str) -> Option<String> {
        let a = &self.augment;
        let s = match key {
            "dataset" => self.dataset.name().to_string(),
            "data_path" => self.data_path.as_ref().map_or(String::new(), |p| p.display().to_string()),
            "synth_classes" => self.synth_classes.to_string(),
            "synth_dim" => self.synth_dim.to_string(),
            "synth_sigma" => self.synth_sigma.to_string(),
            "synth_train_per_class" => self.synth_train_per_class.to_string(),
            "synth_test_per_class" => self.synth_test_per_class.to_string(),
            "train_subset" => self.train_subset.to_string(),
            "test_subset" => self.test_subset.to_string(),
            "framework" => self.framework.name().to_string(),
            "backbone" => self.backbone.name().to_string(),
            "mlp_hidden" => list(&self.mlp_hidden),
            "conv_channels" => list(&self.conv_channels),
            "proj_hidden" => self.proj_hidden.to_string(),
            "dim" => self.dim.to_string(),
            "pred_hidden" => self.pred_hidden.to_string(),
            "lambda" => self.lambda.to_string(),
            "tau" => self.tau.to_string(),
            "base_tau" => self.base_tau.to_string(),
            "negatives" => match self.negatives {
                NegativeLogit::Dot => "dot",
                NegativeLogit::AbsDot => "abs",
            }
            .to_string(),
            "center" => self.center.to_string(),
            "dimcl_input" => match self.dimcl_input {
                DimclInput::Projector => "projector",
                DimclInput::Predictor => "predictor",
            }
            .to_string(),
            "ema_momentum" => self.ema_momentum.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "warmup_epochs" => self.warmup_epochs.to_string(),
            "momentum" => self.momentum.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "noise_sigma" => self.noise_sigma.to_string(),
            "crop_min" => a.crop_scale.0.to_string(),
            "crop_max" => a.crop_scale.1.to_string(),
            "flip_prob" => a.flip_prob.to_string(),
            "jitter_prob" => a.jitter_prob.to_string(),
            "brightness" => a.brightness.to_string(),
            "contrast" => a.contrast.to_string(),
            "saturation" => a.saturation.to_string(),
            "hue" => a.hue.to_string(),
            "grayscale_prob" => a.grayscale_prob.to_string(),
            "blur_prob" => a.blur_prob.to_string(),
            "solarize_prob" => a.solarize_prob.to_string(),
            "solarize_threshold" => a.solarize_threshold.to_string(),
            "seed" => self.seed.to_string(),
            "probe_epochs" => self.probe_epochs.to_string(),
            "probe_lr" => self.probe_lr.to_string(),
            "knn_k" => self.knn_k.to_string(),
            "eval_every" => self.eval_every.to_string(),
            "eval_samples" => self.eval_samples.to_string(),
            "eval_chunk" => self.eval_chunk.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            _ => return None,
        };
        Some(s)
    }

    /// Cross-key checks that single assignments cannot make.
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.augment.crop_scale.0 > self.augment.crop_scale.1 || self.augment.crop_scale.1 > 1.0 {
            return Err(key_error("crop_min", "crop scale must satisfy 0 < crop_min ≤ crop_max ≤ 1"));
        }
        if matches!(self.dataset, DatasetKind::SynthFile | DatasetKind::Cifar10 | DatasetKind::Cifar100)
            && self.data_path.is_none()
        {
            return Err(key_error("data_path", format!("data_path is required for dataset {}", self.dataset.name())));
        }
        let image = matches!(self.dataset, DatasetKind::Cifar10 | DatasetKind::Cifar100);
        if image && self.backbone == BackboneKind::Mlp || !image && self.backbone == BackboneKind::Conv {
            return Err(key_error("backbone", "backbone does not match the dataset layout"));
        }
        Ok(())
    }

    /// Serializes every key, so the document pins the run completely.
    pub fn to_document(&self) -> String {
        let mut out = String::from("# dimcl experiment configuration\n");
        for key in KEYS {
            out.push_str(&format!("{key} = {}\n", self.get(key).expect("listed key")));
        }
        out
    }
}

/// Parses a configuration document; see the module docs for the grammar.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut cfg = ExperimentConfig::default();
    let mut seen = std::collections::HashSet::new();
    for (k, raw) in text.lines().enumerate() {
        let line = k + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let Some((key, value)) = content.split_once('=') else {
            return Err(ConfigError { line: Some(line), key: None, message: format!("expected `key = value`, got `{content}`") });
        };
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() {
            return Err(ConfigError { line: Some(line), key: None, message: "missing key before `=`".into() });
        }
        if !KEYS.contains(&key) {
            return Err(ConfigError { line: Some(line), key: Some(key.into()), message: format!("unknown key `{key}`") });
        }
        if !seen.insert(key.to_string()) {
            return Err(ConfigError { line: Some(line), key: Some(key.into()), message: format!("duplicate key `{key}`") });
        }
        cfg.set(key, value).map_err(|e| ConfigError { line: Some(line), ..e })?;
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = parse_config("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.lambda, 0.1);
        assert_eq!(cfg.tau, 0.1);
    }

    #[test]
    fn lambda_range_is_checked() {
        let e = parse_config("lambda = 1.5").unwrap_err();
        assert_eq!(e.line, Some(1));
        assert_eq!(e.key.as_deref(), Some("lambda"));
        assert!(e.to_string().contains("lambda out of [0,1]"));
    }

    #[test]
    fn malformed_and_unknown_lines() {
        let e = parse_config("# header\n\nepochs = 3\nthis is wrong\n").unwrap_err();
        assert_eq!(e.line, Some(4));
        let e = parse_config("epochs = 3\nlearning_rate = 0.1").unwrap_err();
        assert_eq!((e.line, e.key.as_deref()), (Some(2), Some("learning_rate")));
        let e = parse_config("epochs = 3\nepochs = 4").unwrap_err();
        assert!(e.message.contains("duplicate"));
        assert!(parse_config("dim = 1").unwrap_err().message.contains("dim"));
        assert!(parse_config("tau = 0").unwrap_err().message.contains("tau"));
        assert!(parse_config("dataset = cifar10").unwrap_err().message.contains("data_path"));
    }

    #[test]
    fn comments_and_whitespace() {
        let cfg = parse_config("  framework=byol   # the online/target pair\nmlp_hidden = 16, 8\n").unwrap();
        assert_eq!(cfg.framework, FrameworkKind::Byol);
        assert_eq!(cfg.mlp_hidden, vec![16, 8]);
    }

    #[test]
    fn round_trip() {
        let text = "lambda = 0.3\ntau = 0.07\nnegatives = abs\ncenter = true\ndim = 64\nseed = 12\n\
                    data_path = /tmp/x\noutput_dir = out/a b\nhue = 0.05\nmlp_hidden = 7,9";
        let cfg = parse_config(text).unwrap();
        let doc = cfg.to_document();
        let back = parse_config(&doc).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_document(), doc);
    }
}
