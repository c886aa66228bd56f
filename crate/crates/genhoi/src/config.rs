//! Run configuration shared by every command, and its content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::DatasetSpec;
use crate::error::{read_json, write_json, Error, Result};
use crate::loss::LossWeights;
use crate::model::{ClassifierMode, ModelConfig};
use crate::optim::OptimizerConfig;
use crate::vlkt::MimicNorm;

/// VLKT switches. Model-structure switches (`classifier_mode`, `use_pge`,
/// `use_ige`) live in [`ModelConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Initialize the triplet classifier from HOI prompt embeddings.
    pub use_interaction_text: bool,
    /// Initialize the object classifier from object prompt embeddings.
    pub use_object_text: bool,
    /// Keep text-initialized classifiers fixed; forced on in zero-shot runs.
    pub freeze_text_classifiers: bool,
    pub use_mimic: bool,
    pub mimic_norm: MimicNorm,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_interaction_text: true,
            use_object_text: true,
            freeze_text_classifiers: false,
            use_mimic: true,
            mimic_norm: MimicNorm::L1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Random horizontal flip and scale jitter.
    pub augment: bool,
    pub scale_jitter: f64,
    /// Metrics record cadence in steps.
    pub log_every: usize,
    /// Checkpoint cadence in epochs; `0` writes only the final checkpoint.
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            epochs: 60,
            batch_size: 8,
            augment: true,
            scale_jitter: 0.1,
            log_every: 10,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

/// Where text and teacher embeddings come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TextConfig {
    /// Seed of the synthetic text encoder used when no files are given.
    pub provider_seed: u64,
    /// EMB1 matrix with one row per HOI prompt, in triplet-id order.
    pub interaction_embeddings: Option<PathBuf>,
    /// EMB1 matrix with one row per object prompt.
    pub object_embeddings: Option<PathBuf>,
    /// EMB1 matrix whose row `r` is the image embedding of image_id `r`.
    pub teacher_embeddings: Option<PathBuf>,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { provider_seed: 7, interaction_embeddings: None, object_embeddings: None, teacher_embeddings: None }
    }
}

/// Zero-shot split generation and use.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Split file; when set, training drops every image that carries an
    /// unseen triplet and scores only seen classifier rows.
    pub path: Option<PathBuf>,
    /// `RF-UC`, `NF-UC`, `UO` or `UV`, used by `make-split`.
    pub setting: Option<String>,
    /// Unseen triplet count for the UC settings.
    pub n_unseen: Option<usize>,
    /// Unseen object ids for UO.
    pub unseen_objects: Vec<usize>,
    /// Unseen verb count for UV (drawn with the run seed).
    pub unseen_verbs: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceConfig {
    pub top_k: usize,
    pub nms_threshold: f64,
    pub batch_size: usize,
    /// Replace unseen classifier rows with random unit vectors (seeded)
    /// before inference; the zero-shot control.
    pub random_unseen_rows: Option<u64>,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig { top_k: 100, nms_threshold: 0.7, batch_size: 16, random_unseen_rows: None }
    }
}

/// Dataset location. Relative paths resolve against the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dir: PathBuf,
    pub spec: DatasetSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig { dir: PathBuf::from("data"), spec: DatasetSpec::default() }
    }
}

impl DataConfig {
    pub fn label_space(&self) -> PathBuf {
        self.dir.join("label_space.json")
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.dir.join("manifest_train.json")
    }

    pub fn test_manifest(&self) -> PathBuf {
        self.dir.join("manifest_test.json")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory for checkpoints, metrics, detections and reports.
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    pub training: TrainingConfig,
    pub ablation: Ablation,
    pub text: TextConfig,
    pub split: SplitConfig,
    pub inference: InferenceConfig,
}

impl RunConfig {
    /// Preset for the synthetic toy dataset trained from scratch on a CPU:
    /// fewer queries and a higher rate than the pretrained-backbone defaults.
    pub fn toy() -> Self {
        let mut c = RunConfig::default();
        c.model.num_queries = 8;
        c.optimizer.lr = 5e-4;
        c
    }

    /// Reads a config file and resolves its relative paths against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut c: RunConfig = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        c.resolve_paths(base);
        c.validate()?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.out_dir);
        fix(&mut self.data.dir);
        for p in [
            &mut self.text.interaction_embeddings,
            &mut self.text.object_embeddings,
            &mut self.text.teacher_embeddings,
            &mut self.split.path,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.training.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.training.scale_jitter) {
            return Err(Error::Config(format!("scale_jitter {} outside [0, 0.5)", self.training.scale_jitter)));
        }
        if self.inference.top_k == 0 || !(self.inference.nms_threshold > 0.0 && self.inference.nms_threshold <= 1.0) {
            return Err(Error::Config("top_k must be positive and nms_threshold in (0, 1]".into()));
        }
        if self.model.image_size != self.data.spec.image_size {
            return Err(Error::Config(format!(
                "model image_size {} != dataset image_size {}",
                self.model.image_size, self.data.spec.image_size
            )));
        }
        if self.model.classifier_mode == ClassifierMode::Verb && self.split.path.is_some() {
            return Err(Error::Config("zero-shot splits need the triplet classifier".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
