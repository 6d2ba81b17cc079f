//! Experiment configuration. One TOML file plus one seed fully determines a
//! run: dataset, architecture, quantization placement, and the bit-width
//! schedule. Unknown keys are rejected, and every section is validated
//! before anything is built or trained.
//!
//! ```toml
//! seed = 7
//! out_dir = "runs/demo"
//!
//! [dataset]
//! kind = "digits"        # idx | digits | spiral | gaussian
//! dir = "data/digits"
//! train = 4000
//! test = 800
//!
//! [model]
//! input = [1, 28, 28]
//! classes = 10
//!
//! [[model.layer]]
//! kind = "conv"
//! out = 8
//! k = 3
//! stride = 2
//! pad = 1
//! quant = "off"
//!
//! [[model.layer]]
//! kind = "linear"
//! out = 10
//! quant = "input_only"
//!
//! [train]
//! batch_size = 64
//! momentum = 0.9
//! weight_decay = 5e-4
//!
//! [[train.stage]]
//! bits = 3
//! grad_scale = 1.0
//! epochs = 10
//! lr = 0.05
//! ```

use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::data::{self, DataError, Dataset};
use crate::layers::{LayerPlan, Network, QuantizedLayer};
use crate::ops::ConvGeom;
use crate::optim::OptimizerCfg;
use crate::quant::{QuantMode, QuantizerState};
use crate::rng::Rng;
use crate::train::{StageCfg, TrainPlan};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("dataset error: {0}")]
    Data(#[from] DataError),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    /// Root of all randomness in the run: weight init, batch shuffling,
    /// and synthetic data all fork from this.
    pub seed: u64,
    /// Where metrics, checkpoints, and exported models are written.
    pub out_dir: PathBuf,
    pub dataset: DatasetCfg,
    pub model: ModelCfg,
    pub train: TrainCfg,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Standard IDX image/label files in a directory.
    Idx,
    /// Rendered digit-glyph corpus, cached in `dir` as IDX files.
    Digits,
    /// Seeded 2-D spiral points.
    Spiral,
    /// Seeded Gaussian blobs.
    Gaussian,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetCfg {
    pub kind: DatasetKind,
    /// idx/digits: directory holding the four IDX files.
    pub dir: Option<PathBuf>,
    /// digits: corpus sizes.
    pub train: Option<usize>,
    pub test: Option<usize>,
    /// spiral/gaussian: samples per class (test set is generated at the
    /// same size from an independent stream).
    pub per_class: Option<usize>,
    pub classes: Option<usize>,
    /// spiral: radial jitter.
    pub noise: Option<f64>,
    /// gaussian: cluster standard deviation.
    pub spread: Option<f64>,
    /// Fraction of the training set split off (from the tail) as
    /// validation data.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
}

fn default_val_fraction() -> f64 {
    0.1
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelCfg {
    /// Per-sample input shape, e.g. `[1, 28, 28]` or `[2]`.
    pub input: Vec<usize>,
    pub classes: usize,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerCfg>,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv,
    Linear,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum QuantCfg {
    /// Float weights, float input (first layer: raw input, later: relu).
    Off,
    /// Quantized weights and quantized input.
    Full,
    /// Float weights behind a quantized input.
    InputOnly,
}

#[derive(Clone, Copy, Debug, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ModeCfg {
    Uniform,
    Log2,
}

impl From<ModeCfg> for QuantMode {
    fn from(m: ModeCfg) -> QuantMode {
        match m {
            ModeCfg::Uniform => QuantMode::Uniform,
            ModeCfg::Log2 => QuantMode::Log2,
        }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerCfg {
    pub kind: LayerKind,
    /// Output channels (conv) or output features (linear).
    pub out: usize,
    /// Kernel size; conv only.
    pub k: Option<usize>,
    pub stride: Option<usize>,
    pub pad: Option<usize>,
    /// Batchnorm after the kernel. Defaults on for conv, off for linear.
    pub bn: Option<bool>,
    /// Additive bias; linear only (conv layers fold bias into batchnorm).
    pub bias: Option<bool>,
    pub quant: QuantCfg,
    /// Weight quantizer family; only meaningful with `quant = "full"`.
    pub mode: Option<ModeCfg>,
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainCfg {
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    /// Re-scale clipping thresholds when moving to a lower bit width so
    /// quantizer steps carry over. On by default.
    #[serde(default = "default_true")]
    pub rescale_on_transfer: bool,
    #[serde(default)]
    pub two_phase: bool,
    /// Frozen-quantizer retraining length; required when `two_phase` is on.
    pub phase2_epochs: Option<usize>,
    pub phase2_lr: Option<f64>,
    #[serde(rename = "stage")]
    pub stages: Vec<StageTomlCfg>,
}

fn default_momentum() -> f64 {
    0.9
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageTomlCfg {
    pub bits: u8,
    /// Gradient scale `s` for the threshold multipliers; 0 freezes them.
    #[serde(default = "default_grad_scale")]
    pub grad_scale: f64,
    pub epochs: usize,
    pub lr: f64,
}

fn default_grad_scale() -> f64 {
    1.0
}

/// Train/validation/test datasets produced from one dataset section.
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Config, ConfigError> {
        let cfg: Config = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Config, ConfigError> {
        Config::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.out_dir.as_os_str().is_empty() {
            return invalid("out_dir must not be empty");
        }
        self.dataset.validate()?;
        self.model.validate()?;
        self.validate_train()?;
        Ok(())
    }

    fn validate_train(&self) -> Result<(), ConfigError> {
        let t = &self.train;
        if t.stages.is_empty() {
            return invalid("at least one [[train.stage]] required");
        }
        if t.two_phase && t.phase2_epochs.is_none() {
            return invalid("two_phase = true requires phase2_epochs");
        }
        if t.two_phase && t.phase2_epochs.unwrap_or(0) > 0 && t.phase2_lr.is_none() {
            return invalid("two_phase = true requires phase2_lr");
        }
        self.plan().validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        // Every stage's width must be constructible for the quantizers the
        // model actually declares.
        let quantized = self.model.layers.iter().any(|l| l.quant != QuantCfg::Off);
        if quantized {
            for stage in &t.stages {
                QuantizerState::unsigned(stage.bits)
                    .map_err(|e| ConfigError::Invalid(e.to_string()))?;
            }
        }
        for layer in &self.model.layers {
            if layer.quant == QuantCfg::Full {
                let mode = layer.mode.unwrap_or(ModeCfg::Uniform);
                for stage in &t.stages {
                    QuantizerState::signed(stage.bits, mode.into())
                        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
                }
            }
        }
        Ok(())
    }

    /// The training schedule as the training loop consumes it.
    pub fn plan(&self) -> TrainPlan {
        let t = &self.train;
        let stages: Vec<StageCfg> = t
            .stages
            .iter()
            .map(|s| StageCfg { bits: s.bits, grad_scale: s.grad_scale, epochs: s.epochs, lr: s.lr })
            .collect();
        let lr0 = stages.first().map(|s| s.lr).unwrap_or(0.1);
        TrainPlan {
            stages,
            batch_size: t.batch_size,
            optim: OptimizerCfg { lr: lr0, momentum: t.momentum, weight_decay: t.weight_decay },
            rescale_on_transfer: t.rescale_on_transfer,
            two_phase: t.two_phase,
            phase2_epochs: t.phase2_epochs.unwrap_or(0),
            phase2_lr: t.phase2_lr.unwrap_or(lr0),
        }
    }

    /// Builds the network at the first stage's bit width.
    pub fn network(&self, rng: &mut Rng) -> Result<Network, ConfigError> {
        self.validate()?;
        let bits = self.train.stages[0].bits;
        let mut shape = self.model.input.clone();
        let mut layers = Vec::with_capacity(self.model.layers.len());
        for (i, lc) in self.model.layers.iter().enumerate() {
            let first = i == 0;
            let mode = lc.mode.unwrap_or(ModeCfg::Uniform);
            let plan = match lc.quant {
                QuantCfg::Off => LayerPlan::off(),
                QuantCfg::Full => LayerPlan::full(bits, mode.into()),
                QuantCfg::InputOnly => LayerPlan::input_only(bits),
            };
            let layer = match lc.kind {
                LayerKind::Conv => {
                    let geom =
                        ConvGeom { stride: lc.stride.unwrap_or(1), pad: lc.pad.unwrap_or(0) };
                    QuantizedLayer::conv2d(
                        shape[0],
                        lc.out,
                        lc.k.expect("validated"),
                        geom,
                        &plan,
                        first,
                        lc.bn.unwrap_or(true),
                        rng,
                    )
                }
                LayerKind::Linear => QuantizedLayer::linear(
                    shape.iter().product(),
                    lc.out,
                    &plan,
                    first,
                    lc.bias.unwrap_or(true),
                    lc.bn.unwrap_or(false),
                    rng,
                ),
            }
            .map_err(|e| ConfigError::Invalid(format!("layer {i}: {e}")))?;
            shape = layer.op.out_shape(&shape);
            layers.push(layer);
        }
        Ok(Network::new(layers, self.model.input.clone(), self.model.classes))
    }

    /// Loads (or generates) the configured dataset and carves out the
    /// validation split. `dir_override` replaces the configured directory
    /// for file-backed kinds.
    pub fn load_dataset(&self, dir_override: Option<&Path>) -> Result<Splits, ConfigError> {
        let d = &self.dataset;
        let dir = |cfg_dir: &Option<PathBuf>| -> PathBuf {
            dir_override.map(Path::to_path_buf).unwrap_or_else(|| cfg_dir.clone().expect("validated"))
        };
        let (train_full, test) = match d.kind {
            DatasetKind::Idx => data::load_idx_dir(&dir(&d.dir))?,
            DatasetKind::Digits => {
                let dir = dir(&d.dir);
                let n_train = d.train.expect("validated");
                let n_test = d.test.expect("validated");
                let loaded = match data::load_idx_dir(&dir) {
                    Ok(pair) => Some(pair),
                    Err(DataError::Io(e)) if e.kind() == std::io::ErrorKind::NotFound => None,
                    Err(e) => return Err(e.into()),
                };
                match loaded {
                    // A cached corpus only counts if it has the configured sizes.
                    Some((tr, te)) if tr.len() == n_train && te.len() == n_test => (tr, te),
                    _ => {
                        data::write_digit_corpus(&dir, n_train, n_test, self.seed)?;
                        data::load_idx_dir(&dir)?
                    }
                }
            }
            DatasetKind::Spiral => {
                let mut rng = Rng::new(self.seed).fork(DATA_FORK);
                let per_class = d.per_class.expect("validated");
                let classes = d.classes.unwrap_or(3);
                let noise = d.noise.unwrap_or(0.08);
                (
                    data::spiral(per_class, classes, noise, &mut rng),
                    data::spiral(per_class, classes, noise, &mut rng),
                )
            }
            DatasetKind::Gaussian => {
                let mut rng = Rng::new(self.seed).fork(DATA_FORK);
                let per_class = d.per_class.expect("validated");
                let classes = d.classes.unwrap_or(3);
                let spread = d.spread.unwrap_or(0.25);
                (
                    data::gaussian_mixture(per_class, classes, spread, &mut rng),
                    data::gaussian_mixture(per_class, classes, spread, &mut rng),
                )
            }
        };
        let n_val = ((train_full.len() as f64 * d.val_fraction).round() as usize)
            .clamp(1, train_full.len() - 1);
        let (train, val) = train_full.split_tail(n_val);
        Ok(Splits { train, val, test })
    }
}

/// Stream label for dataset randomness, so data generation and weight
/// initialization draw from independent sequences of the same seed.
const DATA_FORK: u64 = 0x6461_7461; // "data"

impl DatasetCfg {
    fn validate(&self) -> Result<(), ConfigError> {
        let kind = self.kind;
        let requires = |name: &str, present: bool| {
            if present {
                Ok(())
            } else {
                invalid(format!("dataset kind {kind:?} requires `{name}`"))
            }
        };
        let forbids = |name: &str, present: bool| {
            if present {
                invalid(format!("dataset key `{name}` does not apply to kind {kind:?}"))
            } else {
                Ok(())
            }
        };
        match kind {
            DatasetKind::Idx => {
                requires("dir", self.dir.is_some())?;
                forbids("train", self.train.is_some())?;
                forbids("test", self.test.is_some())?;
                forbids("per_class", self.per_class.is_some())?;
                forbids("classes", self.classes.is_some())?;
                forbids("noise", self.noise.is_some())?;
                forbids("spread", self.spread.is_some())?;
            }
            DatasetKind::Digits => {
                requires("dir", self.dir.is_some())?;
                requires("train", self.train.is_some())?;
                requires("test", self.test.is_some())?;
                forbids("per_class", self.per_class.is_some())?;
                forbids("classes", self.classes.is_some())?;
                forbids("noise", self.noise.is_some())?;
                forbids("spread", self.spread.is_some())?;
                if self.train == Some(0) || self.test == Some(0) {
                    return invalid("digit corpus sizes must be >= 1");
                }
            }
            DatasetKind::Spiral | DatasetKind::Gaussian => {
                requires("per_class", self.per_class.is_some())?;
                forbids("dir", self.dir.is_some())?;
                forbids("train", self.train.is_some())?;
                forbids("test", self.test.is_some())?;
                if kind == DatasetKind::Spiral {
                    forbids("spread", self.spread.is_some())?;
                } else {
                    forbids("noise", self.noise.is_some())?;
                }
                if self.per_class == Some(0) {
                    return invalid("per_class must be >= 1");
                }
                if self.classes == Some(0) || self.classes == Some(1) {
                    return invalid("classes must be >= 2");
                }
            }
        }
        if !(self.val_fraction > 0.0 && self.val_fraction <= 0.5) {
            return invalid(format!(
                "val_fraction must be in (0, 0.5], got {}",
                self.val_fraction
            ));
        }
        Ok(())
    }
}

impl ModelCfg {
    fn validate(&self) -> Result<(), ConfigError> {
        if self.input.is_empty() || self.input.contains(&0) {
            return invalid(format!("model input shape {:?} is invalid", self.input));
        }
        if self.classes < 2 {
            return invalid("model needs at least 2 classes");
        }
        if self.layers.is_empty() {
            return invalid("model needs at least one layer");
        }
        let mut shape = self.input.clone();
        for (i, lc) in self.layers.iter().enumerate() {
            let at = |msg: String| invalid(format!("layer {i}: {msg}"));
            if lc.out == 0 {
                return at("out must be >= 1".into());
            }
            if lc.quant != QuantCfg::Full && lc.mode.is_some() {
                return at("`mode` only applies to quant = \"full\"".into());
            }
            match lc.kind {
                LayerKind::Conv => {
                    if lc.bias.is_some() {
                        return at("conv layers have no bias; batchnorm provides the shift".into());
                    }
                    if shape.len() != 3 {
                        return at(format!("conv needs a [c, h, w] input, found {shape:?}"));
                    }
                    let k = match lc.k {
                        Some(k) if k >= 1 => k,
                        Some(_) => return at("k must be >= 1".into()),
                        None => return at("conv requires `k`".into()),
                    };
                    let stride = lc.stride.unwrap_or(1);
                    if stride == 0 {
                        return at("stride must be >= 1".into());
                    }
                    let pad = lc.pad.unwrap_or(0);
                    let (h, w) = (shape[1], shape[2]);
                    if h + 2 * pad < k || w + 2 * pad < k {
                        return at(format!(
                            "kernel {k} does not fit the {h}x{w} input with pad {pad}"
                        ));
                    }
                    let geom = ConvGeom { stride, pad };
                    shape =
                        vec![lc.out, crate::ops::conv_out_dim(h, k, geom), crate::ops::conv_out_dim(w, k, geom)];
                }
                LayerKind::Linear => {
                    for (name, set) in
                        [("k", lc.k.is_some()), ("stride", lc.stride.is_some()), ("pad", lc.pad.is_some())]
                    {
                        if set {
                            return at(format!("`{name}` does not apply to linear layers"));
                        }
                    }
                    shape = vec![lc.out];
                }
            }
        }
        if shape != [self.classes] {
            return invalid(format!(
                "final layer produces shape {:?}, expected [{}] for the class count",
                shape, self.classes
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const GOOD: &str = r#"
        seed = 7
        out_dir = "runs/t"

        [dataset]
        kind = "gaussian"
        per_class = 40

        [model]
        input = [2]
        classes = 3

        [[model.layer]]
        kind = "linear"
        out = 16
        quant = "full"
        mode = "log2"

        [[model.layer]]
        kind = "linear"
        out = 3
        quant = "input_only"

        [train]
        batch_size = 16

        [[train.stage]]
        bits = 3
        epochs = 2
        lr = 0.05
    "#;

    #[test]
    fn parses_and_builds_a_runnable_setup() {
        let cfg = Config::from_toml(GOOD).unwrap();
        assert_eq!(cfg.seed, 7);
        let plan = cfg.plan();
        assert_eq!(plan.stages.len(), 1);
        assert_eq!(plan.stages[0].grad_scale, 1.0); // default
        assert!(plan.rescale_on_transfer); // default

        let mut rng = Rng::new(cfg.seed);
        let net = cfg.network(&mut rng).unwrap();
        assert_eq!(net.layers.len(), 2);
        assert_eq!(net.layers[0].weight_quant.as_ref().unwrap().mode, QuantMode::Log2);
        assert_eq!(net.layers[0].weight_quant.as_ref().unwrap().bits, 3);
        assert!(net.layers[1].weight_quant.is_none());

        let splits = cfg.load_dataset(None).unwrap();
        assert_eq!(splits.train.len() + splits.val.len(), 120);
        assert_eq!(splits.val.len(), 12);
        assert_eq!(splits.test.len(), 120);
    }

    #[test]
    fn rejects_unknown_keys_anywhere() {
        let top = GOOD.replace("seed = 7", "seed = 7\nbogus = 1");
        assert!(matches!(Config::from_toml(&top), Err(ConfigError::Parse(_))));
        let nested = GOOD.replace("batch_size = 16", "batch_size = 16\nwarmup = 3");
        assert!(matches!(Config::from_toml(&nested), Err(ConfigError::Parse(_))));
        let layer = GOOD.replace("out = 16", "out = 16\ndropout = 0.5");
        assert!(matches!(Config::from_toml(&layer), Err(ConfigError::Parse(_))));
    }

    #[test]
    fn rejects_inapplicable_and_missing_fields() {
        // noise makes no sense for gaussian data
        let bad = GOOD.replace("per_class = 40", "per_class = 40\nnoise = 0.1");
        assert!(matches!(Config::from_toml(&bad), Err(ConfigError::Invalid(_))));
        // conv option on a linear layer
        let bad = GOOD.replace("out = 16", "out = 16\nstride = 2");
        assert!(matches!(Config::from_toml(&bad), Err(ConfigError::Invalid(_))));
        // mode without full quantization
        let bad = GOOD.replace("quant = \"input_only\"", "quant = \"input_only\"\nmode = \"log2\"");
        assert!(matches!(Config::from_toml(&bad), Err(ConfigError::Invalid(_))));
        // digits without sizes
        let bad = GOOD.replace("kind = \"gaussian\"\n        per_class = 40", "kind = \"digits\"\n        dir = \"d\"");
        assert!(matches!(Config::from_toml(&bad), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn rejects_shape_and_schedule_errors() {
        // final layer width != classes
        let bad = GOOD.replace("out = 3\n        quant", "out = 4\n        quant");
        assert!(matches!(Config::from_toml(&bad), Err(ConfigError::Invalid(_))));
        // non-decreasing bit schedule
        let bad = GOOD.replace(
            "[[train.stage]]\n        bits = 3",
            "[[train.stage]]\n        bits = 3\n        epochs = 1\n        lr = 0.1\n\n        [[train.stage]]\n        bits = 3",
        );
        assert!(matches!(Config::from_toml(&bad), Err(ConfigError::Invalid(_))));
        // two_phase without its parameters
        let bad = GOOD.replace("batch_size = 16", "batch_size = 16\ntwo_phase = true");
        assert!(matches!(Config::from_toml(&bad), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn conv_shapes_are_walked_and_checked() {
        let toml = r#"
            seed = 1
            out_dir = "runs/t"

            [dataset]
            kind = "digits"
            dir = "d"
            train = 100
            test = 20

            [model]
            input = [1, 28, 28]
            classes = 10

            [[model.layer]]
            kind = "conv"
            out = 4
            k = 3
            stride = 2
            pad = 1
            quant = "off"

            [[model.layer]]
            kind = "linear"
            out = 10
            quant = "input_only"

            [train]
            batch_size = 8

            [[train.stage]]
            bits = 4
            epochs = 1
            lr = 0.1
        "#;
        let cfg = Config::from_toml(toml).unwrap();
        let mut rng = Rng::new(1);
        let net = cfg.network(&mut rng).unwrap();
        // 28 -> 14 spatial, then 4*14*14 features into the classifier.
        assert_eq!(net.layers[1].op, crate::layers::LayerOp::Linear { in_f: 4 * 14 * 14, out_f: 10 });

        // Kernel bigger than the padded input.
        let bad = toml.replace("k = 3", "k = 31");
        assert!(matches!(Config::from_toml(&bad), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn synthetic_splits_are_seed_deterministic() {
        let cfg = Config::from_toml(GOOD).unwrap();
        let a = cfg.load_dataset(None).unwrap();
        let b = cfg.load_dataset(None).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.val, b.val);
        assert_eq!(a.test, b.test);
        // Train and test come from different draws.
        assert_ne!(a.train.features[..10], a.test.features[..10]);
    }
}
