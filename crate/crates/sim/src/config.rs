//! Experiment configuration, read from TOML.
//!
//! Every field has a default so a config file only needs to state what it
//! changes. Unknown keys are rejected.

use std::path::{Path, PathBuf};

use gradamp::aggregators::{AggregatorConfig, Family};
use gradamp::amplifier::{AmplifierConfig, AmplifierKind};
use gradamp::attacks::{AttackKind, ScaleFactor};
use gradamp::data::{PartitionScheme, ValidationMode, ValidationSpec};
use gradamp::nn::{ClassScore, TrainParams};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, HarnessResult};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub run: RunSection,
    pub dataset: DatasetSection,
    pub partition: PartitionSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub attack: AttackSection,
    pub defense: DefenseSection,
    pub seeds: SeedSection,
    pub output: OutputSection,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub name: String,
    pub clients: usize,
    pub rounds: usize,
    pub checkpoint_every: usize,
    /// Fraction of clients sampled each round.
    pub participation: f64,
    /// Server learning rate applied to the aggregated update.
    pub global_lr: f64,
    pub precision: Precision,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            clients: 10,
            rounds: 60,
            checkpoint_every: 5,
            participation: 1.0,
            global_lr: 1.0,
            precision: Precision::F64,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Source {
    Blobs,
    Images,
    Idx,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub source: Source,
    pub classes: usize,
    pub per_class: usize,
    /// Feature count for blobs.
    pub dim: usize,
    /// `[channels, height, width]` for synthetic images.
    pub shape: [usize; 3],
    pub spread: f64,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub csv: Option<PathBuf>,
    /// Held out for test accuracy and ASR.
    pub test_fraction: f64,
    /// Held out for the server (validation, trust and probe set).
    pub server_pool: usize,
    /// Count self pairs in the heterogeneity score.
    pub heterogeneity_self_pairs: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: Source::Images,
            classes: 10,
            per_class: 120,
            dim: 20,
            shape: [1, 8, 8],
            spread: 0.35,
            images: None,
            labels: None,
            csv: None,
            test_fraction: 0.2,
            server_pool: 150,
            heterogeneity_self_pairs: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Iid,
    LabelSkew,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PartitionSection {
    pub scheme: Scheme,
    pub q: f64,
}

impl Default for PartitionSection {
    fn default() -> Self {
        Self {
            scheme: Scheme::LabelSkew,
            q: 0.5,
        }
    }
}

impl PartitionSection {
    pub fn scheme(&self) -> PartitionScheme {
        match self.scheme {
            Scheme::Iid => PartitionScheme::Iid,
            Scheme::LabelSkew => PartitionScheme::LabelSkew { q: self.q },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Convolutional for image-shaped data, dense otherwise.
    Auto,
    Mlp,
    Cnn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hidden: Vec<usize>,
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            kind: ModelKind::Auto,
            hidden: vec![32],
            filters: 8,
            kernel: 3,
            pool: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 16,
            lr: 0.05,
        }
    }
}

impl TrainSection {
    pub fn params(&self) -> TrainParams {
        TrainParams {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AttackSection {
    /// none, l-flip, g-asc, l-flip+g-asc, scale, dba or sh-optimized.
    pub kind: String,
    pub malicious_fraction: f64,
    /// First 0-based training round with malicious updates.
    pub start_round: usize,
    /// `"auto-n"` or a positive number.
    pub scale: String,
    pub gamma: f64,
    pub sh_gamma_max: f64,
    pub duplication: f64,
    pub target_label: usize,
    /// Side of the square image trigger.
    pub trigger_size: usize,
    pub trigger_value: f64,
    /// Feature indices of the tabular trigger.
    pub trigger_features: Vec<usize>,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            kind: "none".into(),
            malicious_fraction: 0.3,
            start_round: 20,
            scale: "auto-n".into(),
            gamma: 1.0,
            sh_gamma_max: 10.0,
            duplication: 0.5,
            target_label: 0,
            trigger_size: 3,
            trigger_value: 1.0,
            trigger_features: vec![0, 1, 2, 3],
        }
    }
}

impl AttackSection {
    pub fn kind(&self) -> HarnessResult<AttackKind> {
        AttackKind::parse(&self.kind)
            .ok_or_else(|| HarnessError::Config(format!("unknown attack kind '{}'", self.kind)))
    }

    pub fn scale_factor(&self) -> HarnessResult<ScaleFactor> {
        if self.scale == "auto-n" {
            return Ok(ScaleFactor::AutoN);
        }
        match self.scale.parse::<f64>() {
            Ok(v) if v > 0.0 => Ok(ScaleFactor::Fixed(v)),
            _ => Err(HarnessError::Config(format!(
                "attack.scale must be \"auto-n\" or a positive number, got '{}'",
                self.scale
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationKind {
    Uniform,
    Biased,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreKind {
    TrueLabel,
    TopLogit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseSection {
    /// fedavg, dist-cos, dist-euc, dist-merged, fang or fltrust.
    pub family: String,
    /// none, mp or xai.
    pub amplifier: String,
    pub kernel: usize,
    pub top_p: f64,
    pub restore_size: bool,
    pub include_bias: bool,
    pub class_score: ScoreKind,
    /// Neighbour count; defaults to `⌊N/2⌋ + 1`.
    pub neighbors: Option<usize>,
    pub assumed_malicious: f64,
    pub validation_size: usize,
    pub validation_mode: ValidationKind,
    pub validation_theta: f64,
    pub validation_class: usize,
    /// Sample the server set from client data instead of the held-out pool.
    pub validation_overlap: bool,
}

impl Default for DefenseSection {
    fn default() -> Self {
        Self {
            family: "dist-cos".into(),
            amplifier: "mp".into(),
            kernel: 3,
            top_p: 0.5,
            restore_size: false,
            include_bias: true,
            class_score: ScoreKind::TrueLabel,
            neighbors: None,
            assumed_malicious: 0.3,
            validation_size: 100,
            validation_mode: ValidationKind::Uniform,
            validation_theta: 0.5,
            validation_class: 0,
            validation_overlap: false,
        }
    }
}

impl DefenseSection {
    pub fn aggregator(&self) -> HarnessResult<AggregatorConfig> {
        let family = Family::parse(&self.family)
            .ok_or_else(|| HarnessError::Config(format!("unknown defense family '{}'", self.family)))?;
        let kind = match self.amplifier.as_str() {
            "none" => AmplifierKind::None,
            "mp" => AmplifierKind::Mp,
            "xai" => AmplifierKind::Xai,
            other => return Err(HarnessError::Config(format!("unknown amplifier '{other}'"))),
        };
        let amplifier = AmplifierConfig {
            kind,
            kernel: self.kernel,
            top_p: self.top_p,
            restore_size: self.restore_size,
            include_bias: self.include_bias,
            class_score: match self.class_score {
                ScoreKind::TrueLabel => ClassScore::TrueLabel,
                ScoreKind::TopLogit => ClassScore::TopLogit,
            },
        };
        amplifier.validate().map_err(HarnessError::setup)?;
        let mut cfg = AggregatorConfig::new(family, amplifier, self.assumed_malicious);
        cfg.neighbors = self.neighbors;
        Ok(cfg)
    }

    pub fn validation(&self) -> ValidationSpec {
        ValidationSpec {
            size: self.validation_size,
            mode: match self.validation_mode {
                ValidationKind::Uniform => ValidationMode::Uniform,
                ValidationKind::Biased => ValidationMode::Biased {
                    theta: self.validation_theta,
                    class: self.validation_class,
                },
            },
        }
    }

    /// Short label such as `dist-cos+mp`.
    pub fn label(&self) -> String {
        if self.amplifier == "none" || self.family == "fedavg" {
            self.family.clone()
        } else {
            format!("{}+{}", self.family, self.amplifier)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub data: u64,
    pub clients: u64,
    pub attack: u64,
}

impl Default for SeedSection {
    fn default() -> Self {
        Self {
            data: 1,
            clients: 2,
            attack: 3,
        }
    }
}

impl SeedSection {
    /// All three seeds shifted by one offset.
    pub fn offset(&self, by: u64) -> Self {
        Self {
            data: self.data.wrapping_add(by),
            clients: self.clients.wrapping_add(by),
            attack: self.attack.wrapping_add(by),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: PathBuf,
    /// Completed-round count after which amplified vectors are dumped.
    pub dump_round: Option<usize>,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs"),
            dump_round: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> HarnessResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`; relative data paths are resolved against its directory.
    pub fn load(path: &Path) -> HarnessResult<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.dataset.images, &mut cfg.dataset.labels, &mut cfg.dataset.csv]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the canonical config with the output directory blanked.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output.dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn validate(&self) -> HarnessResult<()> {
        let bad = |m: String| Err(HarnessError::Config(m));
        if self.run.clients < 2 {
            return bad(format!("run.clients = {} but at least 2 are needed", self.run.clients));
        }
        if self.run.checkpoint_every == 0 {
            return bad("run.checkpoint_every must be at least 1".into());
        }
        if !(self.run.participation > 0.0 && self.run.participation <= 1.0) {
            return bad(format!("run.participation {} outside (0, 1]", self.run.participation));
        }
        if !(self.run.global_lr.is_finite() && self.run.global_lr > 0.0) {
            return bad(format!("run.global_lr {} must be positive", self.run.global_lr));
        }
        if !(0.0..1.0).contains(&self.dataset.test_fraction) {
            return bad(format!(
                "dataset.test_fraction {} outside [0, 1)",
                self.dataset.test_fraction
            ));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return bad("train.batch_size and train.epochs must be at least 1".into());
        }
        if !(self.train.lr.is_finite() && self.train.lr >= 0.0) {
            return bad(format!("train.lr {} must be non-negative", self.train.lr));
        }
        self.attack.kind()?;
        self.attack.scale_factor()?;
        let agg = self.defense.aggregator()?;
        if !(0.0..1.0).contains(&agg.assumed_malicious) {
            return bad(format!(
                "defense.assumed_malicious {} outside [0, 1)",
                agg.assumed_malicious
            ));
        }
        if !(0.0..0.5).contains(&self.attack.malicious_fraction) {
            return bad(format!(
                "attack.malicious_fraction {} outside [0, 0.5)",
                self.attack.malicious_fraction
            ));
        }
        if self.partition.scheme == Scheme::LabelSkew && !(0.0..=1.0).contains(&self.partition.q) {
            return bad(format!("partition.q {} outside [0, 1]", self.partition.q));
        }
        Ok(())
    }

    /// Applies `key=value` with a dotted key such as `defense.kernel`.
    /// The value is read as an integer, float or boolean when it parses as
    /// one, otherwise as a string.
    pub fn with_override(&self, key: &str, value: &str) -> HarnessResult<Self> {
        let mut doc: toml::Value = toml::Value::try_from(self).map_err(|e| HarnessError::Config(e.to_string()))?;
        let (section, field) = key.split_once('.').ok_or_else(|| {
            HarnessError::Config(format!("override key '{key}' needs a section, e.g. defense.kernel"))
        })?;
        let table = doc
            .get_mut(section)
            .and_then(|t| t.as_table_mut())
            .ok_or_else(|| HarnessError::Config(format!("unknown config section '{section}'")))?;
        let parsed = if let Ok(i) = value.parse::<i64>() {
            match table.get(field) {
                Some(toml::Value::Float(_)) => toml::Value::Float(i as f64),
                Some(toml::Value::String(_)) => toml::Value::String(value.into()),
                _ => toml::Value::Integer(i),
            }
        } else if let Ok(f) = value.parse::<f64>() {
            match table.get(field) {
                Some(toml::Value::String(_)) => toml::Value::String(value.into()),
                _ => toml::Value::Float(f),
            }
        } else if let Ok(b) = value.parse::<bool>() {
            toml::Value::Boolean(b)
        } else {
            toml::Value::String(value.into())
        };
        table.insert(field.to_string(), parsed);
        let cfg: Self = doc
            .try_into()
            .map_err(|e: toml::de::Error| HarnessError::Config(format!("{key}={value}: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
