//! Run configuration: TOML files, dotted-key overrides, content hashes and
//! the named method presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backends::BackendConfig;
use crate::can::CanTrainConfig;
use crate::classifiers::ClassifierKind;
use crate::data::{DatasetName, DEFAULT_KEYWORDS};
use crate::ddpo::toy::ToyDenoiserConfig;
use crate::ddpo::{TrainerConfig, DEFAULT_PROMPTS};
use crate::eval::{SpaceOptions, DEFAULT_EVAL_SIZE};
use crate::reward::RewardConfig;
use crate::{Error, Result};

pub const SNAPSHOT_FILE: &str = "config.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    /// Which label set / cluster set the classifier draws on; `None` for
    /// methods without a classifier.
    pub dataset: Option<DatasetName>,
    pub temperature: f64,
    /// Newline-delimited label file; defaults to the dataset's built-in labels.
    pub labels: Option<PathBuf>,
    /// Cluster model JSON for the k-means classifier.
    pub clusters: Option<PathBuf>,
    /// Discriminator weights for the discriminator classifier.
    pub discriminator: Option<PathBuf>,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            dataset: Some(DatasetName::Full),
            temperature: 1.0,
            labels: None,
            clusters: None,
            discriminator: None,
        }
    }
}

/// The policy being fine-tuned: the built-in toy denoiser or an external checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    /// `toy` or `external:<checkpoint>`.
    pub kind: String,
    pub toy: ToyDenoiserConfig,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub codec: String,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            kind: "toy".into(),
            toy: ToyDenoiserConfig::default(),
            pretrain_steps: 1500,
            pretrain_batch: 64,
            pretrain_lr: 2e-3,
            codec: "identity".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset root laid out as `root/<label>/<image>`.
    pub root: Option<PathBuf>,
    pub dataset: DatasetName,
    pub keywords: Vec<String>,
    pub top_n: usize,
    pub caption_retries: usize,
    pub k: usize,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            root: None,
            dataset: DatasetName::Full,
            keywords: DEFAULT_KEYWORDS.iter().map(|s| s.to_string()).collect(),
            top_n: 10,
            caption_retries: 2,
            k: 27,
            max_iter: 300,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub n: usize,
    pub base_seed: u64,
    pub prompts: Vec<String>,
    pub steps: usize,
    pub eta: f64,
    pub space: SpaceOptions,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            n: DEFAULT_EVAL_SIZE,
            base_seed: 0,
            prompts: DEFAULT_PROMPTS.iter().map(|s| s.to_string()).collect(),
            steps: 30,
            eta: 1.0,
            space: SpaceOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Preset name this config was derived from, if any.
    pub method: Option<String>,
    pub seed: u64,
    pub backend: BackendConfig,
    pub reward: RewardConfig,
    pub classifier: ClassifierSection,
    pub policy: PolicySection,
    pub ddpo: TrainerConfig,
    pub can: CanTrainConfig,
    pub data: DataSection,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: None,
            seed: 0,
            backend: BackendConfig::default(),
            reward: RewardConfig::default(),
            classifier: ClassifierSection::default(),
            policy: PolicySection::default(),
            ddpo: TrainerConfig::default(),
            can: CanTrainConfig::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
        }
    }
}

/// Parses the right-hand side of `key=value` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `a.b.c = value` inside `table`, creating intermediate tables.
pub fn apply_override(table: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{spec}` is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

impl RunConfig {
    pub fn from_toml_str(s: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(s).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads `path` (or the defaults when `None`) and applies `key=value` overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides)
    }

    pub fn validate(&self) -> Result<()> {
        self.reward.validate()?;
        self.ddpo.validate()?;
        self.can.validate()?;
        if self.reward.classifier_kind != ClassifierKind::None && self.classifier.dataset.is_none() {
            return Err(Error::Config("classifier.dataset is required for a style classifier".into()));
        }
        if !(self.classifier.temperature > 0.0) {
            return Err(Error::Config("classifier.temperature must be positive".into()));
        }
        if self.data.k < 2 {
            return Err(Error::Config("data.k must be at least 2".into()));
        }
        if self.eval.n == 0 || self.eval.steps == 0 || self.eval.prompts.is_empty() {
            return Err(Error::Config("eval.n, eval.steps and eval.prompts must be nonempty".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// First 16 hex digits of the sha256 of the canonical TOML form.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(hex::encode(digest)[..16].to_string())
    }

    /// Writes `config.toml` into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        let p = dir.join(SNAPSHOT_FILE);
        std::fs::write(&p, self.to_toml()?)?;
        Ok(p)
    }
}

/// Creates `dir` with the config snapshot inside. A fresh directory is
/// staged under a temporary name and renamed into place, so a crash never
/// leaves a half-initialized output directory behind.
pub fn prepare_output_dir(dir: &Path, config: &RunConfig) -> Result<()> {
    if dir.is_dir() {
        config.write_snapshot(dir)?;
        return Ok(());
    }
    let parent = dir.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(parent)?;
    let name = dir
        .file_name()
        .ok_or_else(|| Error::Config(format!("bad output directory {}", dir.display())))?;
    let staging = parent.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        std::fs::remove_dir_all(&staging)?;
    }
    std::fs::create_dir(&staging)?;
    config.write_snapshot(&staging)?;
    std::fs::rename(&staging, dir)?;
    Ok(())
}

/// The ten diffusion methods compared in the evaluation.
pub const METHOD_NAMES: [&str; 10] = [
    "disc-full",
    "clip-full",
    "kmeans-full",
    "disc-med",
    "clip-med",
    "kmeans-med",
    "utility-30",
    "utility-10",
    "basic-30",
    "basic-10",
];

pub fn method_preset(name: &str) -> Result<RunConfig> {
    let mut cfg = RunConfig {
        method: Some(name.to_string()),
        ..RunConfig::default()
    };
    let creative = |kind: ClassifierKind, dataset: DatasetName| {
        (
            RewardConfig {
                lambda_novelty: 1.0,
                lambda_utility: 0.25,
                classifier_kind: kind,
            },
            Some(dataset),
            30,
        )
    };
    let plain = |lambda_utility: f64, steps: usize| {
        (
            RewardConfig {
                lambda_novelty: 0.0,
                lambda_utility,
                classifier_kind: ClassifierKind::None,
            },
            None,
            steps,
        )
    };
    let (reward, dataset, steps) = match name {
        "disc-full" => creative(ClassifierKind::Discriminator, DatasetName::Full),
        "clip-full" => creative(ClassifierKind::ZeroShot, DatasetName::Full),
        "kmeans-full" => creative(ClassifierKind::Kmeans, DatasetName::Full),
        "disc-med" => creative(ClassifierKind::Discriminator, DatasetName::Mediums),
        "clip-med" => creative(ClassifierKind::ZeroShot, DatasetName::Mediums),
        "kmeans-med" => creative(ClassifierKind::Kmeans, DatasetName::Mediums),
        "utility-30" => plain(1.0, 30),
        "utility-10" => plain(1.0, 10),
        "basic-30" => plain(0.0, 30),
        "basic-10" => plain(0.0, 10),
        _ => return Err(Error::Config(format!("unknown method `{name}`"))),
    };
    cfg.reward = reward;
    cfg.ddpo.inference_steps = steps;
    cfg.eval.steps = steps;
    // methods without a classifier keep the (unused) default dataset
    if let Some(d) = dataset {
        cfg.classifier.dataset = Some(d);
        cfg.data.dataset = d;
        cfg.data.k = d.n_styles();
    }
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, RunConfig::default());
        let back = RunConfig::from_toml_str(&c.to_toml().unwrap(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_reach_nested_keys() {
        let c = RunConfig::from_toml_str(
            "[reward]\nlambda_utility = 1.0\n",
            &[
                "reward.lambda_utility=0.25".into(),
                "ddpo.prompts=[\"a\", \"b\"]".into(),
                "can.dataset=mediums".into(),
                "classifier.labels=labels.txt".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.reward.lambda_utility, 0.25);
        assert_eq!(c.ddpo.prompts, vec!["a", "b"]);
        assert_eq!(c.can.dataset, DatasetName::Mediums);
        assert_eq!(c.classifier.labels.as_deref(), Some(Path::new("labels.txt")));
    }

    #[test]
    fn config_errors() {
        assert!(matches!(RunConfig::from_toml_str("bogus = 1", &[]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("", &["reward.nope=1".into()]), Err(Error::Config(_))));
        assert!(matches!(RunConfig::from_toml_str("", &["noequals".into()]), Err(Error::Config(_))));
        assert!(RunConfig::from_toml_str("", &["reward.lambda_novelty=-1".into()]).is_err());
        assert!(RunConfig::from_toml_str("", &["ddpo.clip_range=1.5".into()]).is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        b.seed = 1;
        assert_ne!(a.hash().unwrap(), b.hash().unwrap());
        assert_eq!(a.hash().unwrap().len(), 16);
    }

    #[test]
    fn presets_follow_the_methods_table() {
        let expect = [
            ("disc-full", 1.0, 0.25, ClassifierKind::Discriminator, Some(DatasetName::Full), 30),
            ("clip-full", 1.0, 0.25, ClassifierKind::ZeroShot, Some(DatasetName::Full), 30),
            ("kmeans-full", 1.0, 0.25, ClassifierKind::Kmeans, Some(DatasetName::Full), 30),
            ("disc-med", 1.0, 0.25, ClassifierKind::Discriminator, Some(DatasetName::Mediums), 30),
            ("clip-med", 1.0, 0.25, ClassifierKind::ZeroShot, Some(DatasetName::Mediums), 30),
            ("kmeans-med", 1.0, 0.25, ClassifierKind::Kmeans, Some(DatasetName::Mediums), 30),
            ("utility-30", 0.0, 1.0, ClassifierKind::None, None, 30),
            ("utility-10", 0.0, 1.0, ClassifierKind::None, None, 10),
            ("basic-30", 0.0, 0.0, ClassifierKind::None, None, 30),
            ("basic-10", 0.0, 0.0, ClassifierKind::None, None, 10),
        ];
        assert_eq!(expect.len(), METHOD_NAMES.len());
        for (name, ln, lu, kind, ds, steps) in expect {
            let c = method_preset(name).unwrap();
            assert_eq!(
                (c.reward.lambda_novelty, c.reward.lambda_utility, c.reward.classifier_kind),
                (ln, lu, kind),
                "{name}"
            );
            if ds.is_some() {
                assert_eq!(c.classifier.dataset, ds, "{name}");
            }
            assert_eq!((c.ddpo.inference_steps, c.eval.steps), (steps, steps), "{name}");
        }
        assert!(method_preset("nope").is_err());
    }

    #[test]
    fn checked_in_configs_match_presets() {
        let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in METHOD_NAMES {
            let c = RunConfig::load(Some(&dir.join(format!("{name}.toml"))), &[]).unwrap();
            assert_eq!(c, method_preset(name).unwrap(), "{name}");
        }
    }

    #[test]
    fn output_dir_is_staged_then_renamed() {
        let tmp = tempfile::tempdir().unwrap();
        let out = tmp.path().join("runs/a");
        let cfg = RunConfig::default();
        prepare_output_dir(&out, &cfg).unwrap();
        let snap = std::fs::read_to_string(out.join(SNAPSHOT_FILE)).unwrap();
        assert_eq!(RunConfig::from_toml_str(&snap, &[]).unwrap(), cfg);
        let leftovers: Vec<_> = std::fs::read_dir(tmp.path().join("runs")).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }
}
