//! TOML experiment configuration.
//!
//! Every section except `[data]` and `[model]` is optional; a missing
//! section disables the matching stage. Loading reports every unknown key
//! and every invalid value in one [`Error::Config`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attacks::{AttackConfig, AttackMethod, Objective, TargetSpec};
use crate::captions::TARGET_STRINGS;
use crate::data::{DataSource, DatasetSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::{TargetedConfig, ZeroShotConfig};
use crate::finetune::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    pub embed_dim: usize,
    pub bias: bool,
    pub init_seed: u64,
    pub text_seed: u64,
    /// Start from this checkpoint instead of a fresh initialization.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            bias: false,
            init_seed: 0,
            text_seed: 0,
            checkpoint: None,
        }
    }
}

/// Targeted attacks toward fixed captions on a slice of the eval split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetedSection {
    pub images: usize,
    pub image_seed: u64,
    pub targets: Vec<String>,
    pub attack: TargetedConfig,
}

impl Default for TargetedSection {
    fn default() -> Self {
        Self {
            images: 20,
            image_seed: 0,
            targets: TARGET_STRINGS.iter().map(|s| s.to_string()).collect(),
            attack: TargetedConfig::default(),
        }
    }
}

/// A single attack run on a slice of the eval split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSection {
    pub images: usize,
    pub image_seed: u64,
    pub method: AttackMethod,
    pub objective: Objective,
    pub epsilon: f64,
    pub steps: usize,
    pub step_fraction: f64,
    pub random_start: bool,
    /// Caption text for targeted objectives.
    pub target_caption: Option<String>,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for AttackSection {
    fn default() -> Self {
        Self {
            images: 100,
            image_seed: 0,
            method: AttackMethod::Apgd,
            objective: Objective::CeUntargeted,
            epsilon: 4.0 / 255.0,
            steps: 100,
            step_fraction: 0.25,
            random_start: false,
            target_caption: None,
            temperature: 0.01,
            seed: 0,
        }
    }
}

impl AttackSection {
    pub fn attack_config(&self) -> AttackConfig {
        AttackConfig {
            method: self.method,
            alpha: self.epsilon * self.step_fraction,
            seed: self.seed,
            random_start: self.random_start,
            target: self.target_caption.as_ref().map(|_| TargetSpec::PerExample),
            ..AttackConfig::pgd(self.epsilon, self.steps, self.objective)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub data: DatasetSpec,
    pub model: ModelSpec,
    /// Supervised clean training that produces the undefended encoder.
    pub pretrain: Option<TrainConfig>,
    pub train: Option<TrainConfig>,
    pub eval: Option<ZeroShotConfig>,
    pub targeted: Option<TargetedSection>,
    pub attack: Option<AttackSection>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "experiment".into(),
            seed: 0,
            data: DatasetSpec::default(),
            model: ModelSpec::default(),
            pretrain: None,
            train: None,
            eval: None,
            targeted: None,
            attack: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: toml::Table = toml::from_str(text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        let mut errs = Vec::new();
        unknown_keys(&toml_to_json(&toml::Value::Table(raw.clone())), &full_schema(), "", &mut errs);
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let cfg: Self = raw.try_into().map_err(|e: toml::de::Error| Error::Config(vec![e.message().to_string()]))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Load `path` (or start from the default) and apply `key.path=value`
    /// overrides on top. Values parse as TOML and fall back to strings.
    pub fn load_with_overrides(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)?,
            None => String::new(),
        };
        let mut table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(vec![e.message().to_string()]))?;
        let mut errs = Vec::new();
        for o in overrides {
            let Some((key, raw)) = o.split_once('=') else {
                errs.push(format!("override `{o}` is not key=value"));
                continue;
            };
            let value = parse_override(raw.trim());
            if let Err(m) = set_path(&mut table, key.trim(), value) {
                errs.push(m);
            }
        }
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        Self::from_toml_str(&toml::to_string(&table).map_err(|e| Error::Config(vec![e.to_string()]))?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Training-split size when it is known before ingestion.
    fn expected_train_len(&self) -> Option<usize> {
        match self.data.source {
            DataSource::DirectoryOfImages { .. } => None,
            _ => Some((self.data.count as f64 * self.data.train_fraction).floor() as usize),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if !(self.data.train_fraction > 0.0 && self.data.train_fraction < 1.0) {
            errs.push(format!("data.train_fraction must be in (0, 1), got {}", self.data.train_fraction));
        }
        if !matches!(self.data.source, DataSource::DirectoryOfImages { .. }) && self.data.count < 2 {
            errs.push(format!("data.count must be at least 2, got {}", self.data.count));
        }
        if self.model.embed_dim == 0 {
            errs.push("model.embed_dim must be positive".into());
        }
        let n = self.expected_train_len().unwrap_or(usize::MAX / 2);
        for (section, tc) in [("pretrain", &self.pretrain), ("train", &self.train)] {
            if let Some(Err(Error::Config(list))) = tc.as_ref().map(|t| t.validate(n)) {
                errs.extend(list.into_iter().map(|m| match m.strip_prefix("train.") {
                    Some(rest) => format!("{section}.{rest}"),
                    None => m,
                }));
            }
        }
        if let Some(ev) = &self.eval {
            if ev.epsilons.is_empty() {
                errs.push("eval.epsilons must not be empty".into());
            }
            if let Some(e) = ev.epsilons.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
                errs.push(format!("eval.epsilons entries must be in (0, 1), got {e}"));
            }
            if ev.steps == 0 {
                errs.push("eval.steps must be positive".into());
            }
            if !(ev.temperature > 0.0) {
                errs.push("eval.temperature must be positive".into());
            }
        }
        if let Some(t) = &self.targeted {
            if t.images == 0 {
                errs.push("targeted.images must be positive".into());
            }
            if t.targets.is_empty() {
                errs.push("targeted.targets must not be empty".into());
            }
            if !(t.attack.epsilon >= 0.0 && t.attack.epsilon < 1.0) {
                errs.push(format!("targeted.attack.epsilon must be in [0, 1), got {}", t.attack.epsilon));
            }
        }
        if let Some(a) = &self.attack {
            if a.images == 0 {
                errs.push("attack.images must be positive".into());
            }
            if let Err(Error::AttackConfig(m)) = a.attack_config().validate() {
                errs.extend(m.split("; ").map(str::to_string));
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Short hash of the canonical JSON form.
    pub fn digest(&self) -> String {
        crate::finetune::config_digest(self)
    }
}

/// Every optional section filled in, so each known key is present.
fn full_schema() -> Value {
    let cfg = ExperimentConfig {
        pretrain: Some(TrainConfig::default()),
        train: Some(TrainConfig::default()),
        eval: Some(ZeroShotConfig::default()),
        targeted: Some(TargetedSection::default()),
        attack: Some(AttackSection::default()),
        ..ExperimentConfig::default()
    };
    serde_json::to_value(cfg).expect("config serializes")
}

fn source_schema(kind: Option<&str>) -> Option<Value> {
    let src = match kind? {
        "builtin_small_images" => DataSource::BuiltinSmallImages,
        "synthetic" => DataSource::Synthetic(SyntheticSpec::default()),
        "directory_of_images" => DataSource::DirectoryOfImages { path: PathBuf::new() },
        _ => return None,
    };
    serde_json::to_value(src).ok()
}

fn parse_override(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> std::result::Result<(), String> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(format!("override key `{key}` is malformed"));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| format!("override `{key}`: `{p}` is not a section"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn toml_to_json(v: &toml::Value) -> Value {
    serde_json::to_value(v).unwrap_or(Value::Null)
}

fn unknown_keys(given: &Value, schema: &Value, path: &str, errs: &mut Vec<String>) {
    let (Value::Object(given), Value::Object(known)) = (given, schema) else {
        return;
    };
    let source;
    let known = if path == "data.source" {
        source = source_schema(given.get("kind").and_then(Value::as_str));
        match &source {
            Some(Value::Object(m)) => m,
            _ => return,
        }
    } else {
        known
    };
    for (k, v) in given {
        let full = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match known.get(k) {
            None => errs.push(format!("unknown key `{full}`")),
            Some(s) => unknown_keys(v, s, &full, errs),
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(ExperimentConfig::from_toml_str("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig {
            train: Some(TrainConfig { total_steps: Some(50), ..TrainConfig::default() }),
            eval: Some(ZeroShotConfig::default()),
            targeted: Some(TargetedSection::default()),
            data: DatasetSpec {
                source: DataSource::Synthetic(SyntheticSpec::default()),
                ..DatasetSpec::default()
            },
            ..ExperimentConfig::default()
        };
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.digest(), cfg.digest());
    }

    #[test]
    fn lists_every_unknown_key() {
        let text = r#"
            colour = 1
            [train]
            lrr = 0.1
            [train.inner]
            stepz = 3
            [data.source]
            kind = "synthetic"
            size = 8
            bogus = true
        "#;
        let Err(Error::Config(errs)) = ExperimentConfig::from_toml_str(text) else {
            panic!("expected a config error");
        };
        for key in ["colour", "train.lrr", "train.inner.stepz", "data.source.bogus"] {
            assert!(errs.iter().any(|e| e.contains(&format!("`{key}`"))), "{key} missing from {errs:?}");
        }
        assert_eq!(errs.len(), 4);
    }

    #[test]
    fn lists_every_invalid_value() {
        let text = r#"
            [data]
            train_fraction = 1.5
            [train]
            epsilon = 2.0
            batch_size = 1
            [pretrain]
            lr = -1.0
            [eval]
            steps = 0
        "#;
        let Err(Error::Config(errs)) = ExperimentConfig::from_toml_str(text) else {
            panic!("expected a config error");
        };
        for key in ["data.train_fraction", "train.epsilon", "train.batch_size", "pretrain.lr", "eval.steps"] {
            assert!(errs.iter().any(|e| e.starts_with(key)), "{key} missing from {errs:?}");
        }
    }

    #[test]
    fn overrides_take_precedence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "name = \"base\"\n[train]\nlr = 0.001\n").unwrap();
        let cfg = ExperimentConfig::load_with_overrides(
            Some(&path),
            &["train.lr=0.5".into(), "name=other".into(), "eval.steps=7".into()],
        )
        .unwrap();
        assert_eq!(cfg.name, "other");
        assert_eq!(cfg.train.unwrap().lr, 0.5);
        assert_eq!(cfg.eval.unwrap().steps, 7);
        let Err(Error::Config(errs)) = ExperimentConfig::load_with_overrides(None, &["train.lrr=1".into(), "oops".into()]) else {
            panic!("expected a config error");
        };
        assert_eq!(errs.len(), 1, "{errs:?}");
    }

    #[test]
    fn targeted_attack_section_needs_a_caption() {
        let text = "[attack]\nobjective = \"embedding_targeted\"\n";
        assert!(ExperimentConfig::from_toml_str(text).is_err());
        let ok = "[attack]\nobjective = \"ce_targeted\"\ntarget_caption = \"a photo of a cat\"\n";
        assert!(ExperimentConfig::from_toml_str(ok).is_ok());
    }
}
