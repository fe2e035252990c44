//! Run configuration: one JSON file, dotted-path overrides, and path
//! resolution relative to the config file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use pushforge_core::{
    BackendConfig, DistillConfig, HashedNgramSpec, PairConfig, SamplingParams, StyleTaxonomy, TrainConfig,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub corpus: Option<PathBuf>,
    pub ab_log: Option<PathBuf>,
    /// Reward model state; defaults to `reward_model.json` in the output dir.
    pub model_state: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { corpus: None, ab_log: None, model_state: None, out_dir: PathBuf::from("out") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendChoice {
    /// Deterministic offline backend; the seed is derived per stage when absent.
    Mock {
        #[serde(default)]
        seed: Option<u64>,
    },
    Http(BackendConfig),
}

impl Default for BackendChoice {
    fn default() -> Self {
        BackendChoice::Mock { seed: None }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Hidden width of the reward head; 0 selects the affine head.
    pub hidden: usize,
    pub encoder: HashedNgramSpec,
    /// Score pairs with a remote service instead of a local model.
    pub remote: Option<BackendConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SelectorConfig {
    pub tau: f64,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self { tau: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyticsConfig {
    pub format: String,
    pub normalize_exposure: bool,
    /// Fixed threshold grid; the default grid is `{0} ∪ {x_v}`.
    pub thresholds: Option<Vec<f64>>,
    pub base_arm_id: String,
}

impl Default for AnalyticsConfig {
    fn default() -> Self {
        Self { format: "csv".into(), normalize_exposure: false, thresholds: None, base_arm_id: "base".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub distill: DistillConfig,
    pub taxonomy: StyleTaxonomy,
    pub task_prompt: String,
    /// Classifier queries per push (odd).
    pub classify_k: usize,
    pub sampling: SamplingParams,
    pub backend: BackendChoice,
    pub pairs: PairConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub selector: SelectorConfig,
    pub analytics: AnalyticsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            distill: DistillConfig::default(),
            taxonomy: StyleTaxonomy::default(),
            task_prompt: "Write one short push notification for the video described below.".into(),
            classify_k: 3,
            sampling: SamplingParams::default(),
            backend: BackendChoice::default(),
            pairs: PairConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            selector: SelectorConfig::default(),
            analytics: AnalyticsConfig::default(),
        }
    }
}

/// Parses `key=value`; the value is read as JSON and falls back to a plain
/// string.
pub fn parse_override(spec: &str) -> Result<(String, Value)> {
    let Some((key, raw)) = spec.split_once('=') else {
        bail!("override {spec:?} is not of the form key=value");
    };
    if key.is_empty() || key.split('.').any(str::is_empty) {
        bail!("override {spec:?} has an empty key segment");
    }
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

/// Sets `root[a][b]... = value`, creating intermediate objects.
pub fn apply_override(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut node = root;
    let segments: Vec<&str> = key.split('.').collect();
    for (i, seg) in segments.iter().enumerate() {
        if node.is_null() {
            *node = Value::Object(Default::default());
        }
        let Value::Object(map) = node else {
            bail!("cannot set {key:?}: {:?} is not an object", segments[..i].join("."));
        };
        if i + 1 == segments.len() {
            map.insert(seg.to_string(), value);
            return Ok(());
        }
        node = map.entry(seg.to_string()).or_insert(Value::Null);
    }
    unreachable!("key has at least one segment")
}

/// Loads the config (or defaults), applies overrides, and makes every
/// relative path absolute against the config file's directory.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let (mut tree, base_dir) = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            let tree: Value = serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
            let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
            (tree, dir)
        }
        None => (Value::Object(Default::default()), PathBuf::new()),
    };
    for spec in overrides {
        let (key, value) = parse_override(spec)?;
        apply_override(&mut tree, &key, value)?;
    }
    let mut cfg: RunConfig = serde_json::from_value(tree).context("invalid config")?;
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base_dir.join(&*p);
        }
    };
    for p in [&mut cfg.paths.corpus, &mut cfg.paths.ab_log, &mut cfg.paths.model_state].into_iter().flatten() {
        resolve(p);
    }
    resolve(&mut cfg.paths.out_dir);
    Ok(cfg)
}
