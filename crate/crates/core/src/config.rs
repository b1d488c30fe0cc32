//! Declarative experiment description, read from TOML.
//!
//! Parsing rejects unknown keys, fills documented defaults and reports every
//! violation in one error.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::clustering::{SomNeighborhood, SomSelection};
use crate::data::{
    gen_interpolated_dataset, load_mnist_dir, preset_proportions, MnistSplit, PopulationSpec,
    StyledSample, SyntheticSpec,
};
use crate::error::{FedError, Result};
use crate::federation::Method;
use crate::model::{ArchConfig, EmbeddingGradSource, EncoderOptions, EncoderPreset};
use crate::privacy::DpConfig;

/// Environment variable naming the directory with the MNIST IDX files.
pub const DATA_DIR_ENV: &str = "FEDEMBED_DATA_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// MNIST directory; falls back to `FEDEMBED_DATA_DIR`.
    #[serde(default)]
    pub dir: Option<PathBuf>,
    /// Keep only the first `n` images of every digit (in file order).
    #[serde(default)]
    pub limit_per_style: Option<usize>,
    #[serde(default)]
    pub synthetic: SyntheticSpec,
}

impl DatasetConfig {
    pub fn mnist() -> Self {
        DatasetConfig {
            kind: DatasetKind::Mnist,
            dir: None,
            limit_per_style: None,
            synthetic: SyntheticSpec::default(),
        }
    }

    pub fn synthetic(spec: SyntheticSpec) -> Self {
        DatasetConfig {
            kind: DatasetKind::Synthetic,
            dir: None,
            limit_per_style: None,
            synthetic: spec,
        }
    }

    pub fn styles(&self) -> usize {
        match self.kind {
            DatasetKind::Mnist => 10,
            DatasetKind::Synthetic => self.synthetic.styles,
        }
    }

    pub fn image_side(&self) -> usize {
        match self.kind {
            DatasetKind::Mnist => 28,
            DatasetKind::Synthetic => self.synthetic.side,
        }
    }

    /// Resolved MNIST directory.
    pub fn mnist_dir(&self) -> Result<PathBuf> {
        if let Some(d) = &self.dir {
            return Ok(d.clone());
        }
        std::env::var_os(DATA_DIR_ENV)
            .map(PathBuf::from)
            .ok_or_else(|| {
                FedError::Config(format!(
                    "dataset.dir is not set and {DATA_DIR_ENV} is empty"
                ))
            })
    }

    /// Loads (or generates) the sample pool.
    pub fn load(&self) -> Result<Arc<Vec<StyledSample>>> {
        let mut pool = match self.kind {
            DatasetKind::Mnist => load_mnist_dir(&self.mnist_dir()?, MnistSplit::Train)?,
            DatasetKind::Synthetic => gen_interpolated_dataset(&self.synthetic)?,
        };
        if let Some(limit) = self.limit_per_style {
            let mut seen = vec![0usize; self.styles()];
            pool.retain(|s| {
                let keep = s.style < seen.len() && seen[s.style] < limit;
                if keep {
                    seen[s.style] += 1;
                }
                keep
            });
        }
        Ok(Arc::new(pool))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PopulationConfig {
    /// Named proportions (`mnist-balanced`, ...); overrides `proportions`.
    pub preset: Option<String>,
    /// One entry per sub-population; empty means balanced over all styles.
    pub proportions: Vec<f64>,
    pub users: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        PopulationConfig {
            preset: None,
            proportions: Vec::new(),
            users: 300,
            train_per_class: 10,
            test_per_class: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: EncoderPreset,
    pub feature_dim: usize,
    /// Defaults to the image side (required by diagonal conditioning).
    pub embed_dim: Option<usize>,
    pub relu_after_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: EncoderPreset::SmallMlp,
            feature_dim: 64,
            embed_dim: None,
            relu_after_norm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub central_lr: f64,
    /// Learning rate of the local embedding optimizer (also moves prototypes).
    pub local_lr: f64,
    /// Learning rate of on-device heads.
    pub head_lr: f64,
    pub kway_weight: f64,
    pub embedding_source: EmbeddingGradSource,
    pub triplet_lr: f64,
    pub triplet_margin: f64,
    pub pfedme_lambda: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            central_lr: 1e-3,
            local_lr: 1e-3,
            head_lr: 1e-3,
            kway_weight: 1.0,
            embedding_source: EmbeddingGradSource::Global,
            triplet_lr: 0.01,
            triplet_margin: 1.0,
            pfedme_lambda: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClusteringConfig {
    /// SOM nodes; defaults to the number of sub-populations.
    pub som_nodes: Option<usize>,
    pub som_lr0: f64,
    pub som_radius0: Option<f64>,
    /// Schedule decay constant; defaults to half the rounds.
    pub som_tau: Option<f64>,
    pub som_selection: SomSelection,
    pub som_neighborhood: SomNeighborhood,
    /// Head remapping cadence in rounds.
    pub remap_every: usize,
    /// Half-width of the uniform init of the gradient SOM nodes.
    pub gradient_som_init: f64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            som_nodes: None,
            som_lr0: 0.5,
            som_radius0: None,
            som_tau: None,
            som_selection: SomSelection::default(),
            som_neighborhood: SomNeighborhood::default(),
            remap_every: 25,
            gradient_som_init: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seed: u64,
    pub dataset: DatasetConfig,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
    /// Fraction of users taking part in each round.
    #[serde(default = "default_participation")]
    pub participation: f64,
    /// Write a checkpoint every this many rounds (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub population: PopulationConfig,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub privacy: DpConfig,
    #[serde(default)]
    pub clustering: ClusteringConfig,
}

fn default_rounds() -> usize {
    300
}

fn default_eval_every() -> usize {
    10
}

fn default_participation() -> f64 {
    1.0
}

const TOP_KEYS: &[&str] = &[
    "method",
    "seed",
    "dataset",
    "rounds",
    "eval_every",
    "participation",
    "checkpoint_every",
    "out_dir",
    "population",
    "model",
    "training",
    "privacy",
    "clustering",
];
const REQUIRED: &[&str] = &["method", "seed", "dataset"];
const SECTIONS: &[(&str, &[&str])] = &[
    ("dataset", &["kind", "dir", "limit_per_style", "synthetic"]),
    (
        "population",
        &[
            "preset",
            "proportions",
            "users",
            "train_per_class",
            "test_per_class",
        ],
    ),
    (
        "model",
        &["preset", "feature_dim", "embed_dim", "relu_after_norm"],
    ),
    (
        "training",
        &[
            "central_lr",
            "local_lr",
            "head_lr",
            "kway_weight",
            "embedding_source",
            "triplet_lr",
            "triplet_margin",
            "pfedme_lambda",
        ],
    ),
    (
        "privacy",
        &[
            "enabled",
            "clip_norm",
            "noise_multiplier",
            "server_side",
            "local_heads",
        ],
    ),
    (
        "clustering",
        &[
            "som_nodes",
            "som_lr0",
            "som_radius0",
            "som_tau",
            "som_selection",
            "som_neighborhood",
            "remap_every",
            "gradient_som_init",
        ],
    ),
];
const SYNTHETIC_KEYS: &[&str] = &[
    "n_base_styles",
    "styles",
    "samples_per_style",
    "noise_scale",
    "side",
    "seed",
];

/// Unknown and missing keys, all of them.
fn key_problems(table: &toml::Table) -> Vec<String> {
    let mut out = Vec::new();
    for k in table.keys() {
        if !TOP_KEYS.contains(&k.as_str()) {
            out.push(format!("unknown key '{k}'"));
        }
    }
    for k in REQUIRED {
        if !table.contains_key(*k) {
            out.push(format!("missing required key '{k}'"));
        }
    }
    for (section, known) in SECTIONS {
        if let Some(toml::Value::Table(t)) = table.get(*section) {
            for k in t.keys() {
                if !known.contains(&k.as_str()) {
                    out.push(format!("unknown key '{section}.{k}'"));
                }
            }
            if *section == "dataset" {
                if let Some(toml::Value::Table(s)) = t.get("synthetic") {
                    for k in s.keys() {
                        if !SYNTHETIC_KEYS.contains(&k.as_str()) {
                            out.push(format!("unknown key 'dataset.synthetic.{k}'"));
                        }
                    }
                }
            }
        }
    }
    out
}

impl ExperimentConfig {
    /// A config with every default filled in.
    pub fn new(method: Method, dataset: DatasetConfig, seed: u64) -> Self {
        ExperimentConfig {
            method,
            seed,
            dataset,
            rounds: default_rounds(),
            eval_every: default_eval_every(),
            participation: default_participation(),
            checkpoint_every: 0,
            out_dir: None,
            population: PopulationConfig::default(),
            model: ModelConfig::default(),
            training: TrainingConfig::default(),
            privacy: DpConfig::default(),
            clustering: ClusteringConfig::default(),
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| FedError::Config(format!("malformed config: {e}")))?;
        let problems = key_problems(&table);
        if !problems.is_empty() {
            return Err(FedError::Config(problems.join("; ")));
        }
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| FedError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FedError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            FedError::Config(msg) => FedError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| FedError::Serde(e.to_string()))
    }

    pub fn subpops(&self) -> usize {
        self.proportions()
            .map_or(self.dataset.styles(), |p| p.len())
    }

    fn proportions(&self) -> Result<Vec<f64>> {
        if let Some(p) = &self.population.preset {
            return preset_proportions(p);
        }
        if self.population.proportions.is_empty() {
            let k = self.dataset.styles();
            return Ok(vec![1.0 / k as f64; k]);
        }
        Ok(self.population.proportions.clone())
    }

    pub fn population_spec(&self) -> Result<PopulationSpec> {
        let proportions = self.proportions()?;
        Ok(PopulationSpec {
            subpops: proportions.len(),
            proportions,
            users: self.population.users,
            train_per_class: self.population.train_per_class,
            test_per_class: self.population.test_per_class,
            seed: self.seed,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.model.embed_dim.unwrap_or(self.dataset.image_side())
    }

    pub fn som_nodes(&self) -> usize {
        self.clustering.som_nodes.unwrap_or(self.subpops())
    }

    pub fn arch(&self) -> ArchConfig {
        ArchConfig {
            preset: self.model.preset,
            encoder: EncoderOptions {
                image_side: self.dataset.image_side(),
                feature_dim: self.model.feature_dim,
                relu_after_norm: self.model.relu_after_norm,
            },
            embed_dim: self.embed_dim(),
            num_heads: self.method.num_heads(self.subpops(), self.som_nodes()),
            num_styles: self.dataset.styles(),
            seed: self.seed,
        }
    }

    /// Every violated invariant, in one list.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        match self.population_spec() {
            Ok(spec) => out.extend(spec.problems()),
            Err(e) => out.push(e.to_string()),
        }
        if self.subpops() > self.dataset.styles() {
            out.push(format!(
                "population has {} sub-populations but the dataset has {} styles",
                self.subpops(),
                self.dataset.styles()
            ));
        }
        if self.eval_every == 0 {
            out.push("eval_every must be positive".into());
        }
        if !(self.participation > 0.0 && self.participation <= 1.0) {
            out.push(format!(
                "participation must be in (0, 1], got {}",
                self.participation
            ));
        }
        if self.embed_dim() != self.dataset.image_side() {
            out.push(format!(
                "model.embed_dim ({}) must equal the image side ({})",
                self.embed_dim(),
                self.dataset.image_side()
            ));
        }
        if self.model.feature_dim == 0 {
            out.push("model.feature_dim must be positive".into());
        }
        if self.model.preset == EncoderPreset::MnistConv
            && (self.dataset.image_side() != 28 || self.model.feature_dim != 64)
        {
            out.push("model.preset mnist-conv needs 28x28 images and feature_dim 64".into());
        }
        let t = &self.training;
        for (name, v) in [
            ("training.central_lr", t.central_lr),
            ("training.local_lr", t.local_lr),
            ("training.head_lr", t.head_lr),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                out.push(format!("{name} must be positive, got {v}"));
            }
        }
        for (name, v) in [
            ("training.kway_weight", t.kway_weight),
            ("training.triplet_lr", t.triplet_lr),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                out.push(format!("{name} must be finite and >= 0, got {v}"));
            }
        }
        if !(t.triplet_margin > 0.0) {
            out.push(format!(
                "training.triplet_margin must be positive, got {}",
                t.triplet_margin
            ));
        }
        if self.method == Method::PFedMe && !(t.pfedme_lambda > 0.0) {
            out.push(format!(
                "training.pfedme_lambda must be positive, got {}",
                t.pfedme_lambda
            ));
        }
        out.extend(self.privacy.problems());
        let c = &self.clustering;
        if self.som_nodes() < self.subpops() {
            out.push(format!(
                "clustering.som_nodes ({}) must be at least the number of sub-populations ({})",
                self.som_nodes(),
                self.subpops()
            ));
        }
        if !(c.som_lr0 >= 0.0) {
            out.push("clustering.som_lr0 must be >= 0".into());
        }
        if c.som_tau.is_some_and(|t| !(t > 0.0)) {
            out.push("clustering.som_tau must be positive".into());
        }
        if c.remap_every == 0 {
            out.push("clustering.remap_every must be positive".into());
        }
        if !(c.gradient_som_init >= 0.0) {
            out.push("clustering.gradient_som_init must be >= 0".into());
        }
        if self.dataset.kind == DatasetKind::Synthetic {
            let s = &self.dataset.synthetic;
            if s.styles < s.n_base_styles || s.n_base_styles < 2 {
                out.push("dataset.synthetic needs 2 <= n_base_styles <= styles".into());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(FedError::Config(p.join("; ")))
        }
    }
}
