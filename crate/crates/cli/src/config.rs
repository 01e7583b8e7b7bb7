use logoprompt_core::bench::{Corruption, DatasetSpec, Method, MethodConfig, SplitPlan, SplitRule, TrainingBudget};
use logoprompt_core::error::{Error, Result};
use logoprompt_core::glyph::{self, Placement};
use logoprompt_core::prompts::ContextInit;
use logoprompt_core::selection::DEFAULT_K;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Environment variable holding the default output root.
pub const OUTPUT_ROOT_ENV: &str = "LOGOPROMPT_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

/// Default checkpoint location under an output root.
pub fn default_checkpoint(root: &Path) -> PathBuf {
    root.join("checkpoint").join("encoder.json")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    FewShot,
    BaseToNew,
    DomainShift,
}

impl std::str::FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "few_shot" => Ok(Protocol::FewShot),
            "base_to_new" => Ok(Protocol::BaseToNew),
            "domain_shift" => Ok(Protocol::DomainShift),
            other => Err(Error::config("protocol", format!("unknown protocol `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    pub num_classes: usize,
    pub image_size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            num_classes: d.num_classes,
            image_size: d.image_size,
            train_per_class: d.train_per_class,
            test_per_class: d.test_per_class,
            seed: 0,
        }
    }
}

impl DatasetConfig {
    pub fn spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_classes: self.num_classes,
            image_size: self.image_size,
            train_per_class: self.train_per_class,
            test_per_class: self.test_per_class,
        }
    }
}

/// Everything `run` needs. Loaded from TOML or JSON; command-line flags
/// override file values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: DatasetConfig,
    pub protocol: Protocol,
    pub shots: usize,
    pub split_rule: SplitRule,
    /// Required for `domain_shift`, e.g. `gaussian_noise(0.1)`.
    pub corruption: Option<String>,
    pub method: Method,
    pub m: Option<usize>,
    pub ctx_init: ContextInit,
    pub k: usize,
    pub prompt_ratio: f64,
    pub placement: Placement,
    pub tunable_vp: bool,
    pub seeds: Vec<u64>,
    pub budget: TrainingBudget,
    pub checkpoint: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            protocol: Protocol::FewShot,
            shots: 16,
            split_rule: SplitRule::EvenOdd,
            corruption: None,
            method: Method::Logoprompt,
            m: None,
            ctx_init: ContextInit::Random,
            k: DEFAULT_K,
            prompt_ratio: glyph::DEFAULT_PROMPT_RATIO,
            placement: Placement::Rand,
            tunable_vp: false,
            seeds: (0..5).collect(),
            budget: TrainingBudget::default(),
            checkpoint: None,
            output_dir: None,
        }
    }
}

/// Parses a TOML (default) or JSON (`.json`) config file.
pub fn load_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        serde_json::from_str(&text).map_err(|e| {
            let line = text.lines().nth(e.line().saturating_sub(1)).unwrap_or("");
            config_error(path, e.to_string(), key_on_line(line))
        })
    } else {
        toml::from_str(&text).map_err(|e| {
            let key = e.span().and_then(|span| {
                let start = text[..span.start].rfind('\n').map_or(0, |i| i + 1);
                key_on_line(&text[start..])
            });
            config_error(path, e.message().to_string(), key)
        })
    }
}

/// The key of a `key = value` or `"key": value` line.
fn key_on_line(line: &str) -> Option<String> {
    let line = line.lines().next()?;
    let (key, _) = line.split_once('=').or_else(|| line.split_once(':'))?;
    let key = key.trim().trim_matches('"');
    (!key.is_empty()).then(|| key.to_string())
}

fn config_error(path: &Path, message: String, key: Option<String>) -> Error {
    let field = key
        .or_else(|| message.split('`').nth(1).filter(|f| !f.is_empty()).map(str::to_string))
        .unwrap_or_else(|| "config".to_string());
    Error::config(field, format!("{}: {}", path.display(), message.trim()))
}

impl RunConfig {
    pub fn plan(&self) -> Result<SplitPlan> {
        let plan = match self.protocol {
            Protocol::FewShot => SplitPlan::FewShot { shots: self.shots },
            Protocol::BaseToNew => SplitPlan::BaseToNew {
                shots: self.shots,
                rule: self.split_rule,
            },
            Protocol::DomainShift => {
                let spec = self
                    .corruption
                    .as_deref()
                    .ok_or_else(|| Error::config("corruption", "domain_shift needs a corruption, e.g. gaussian_noise(0.1)"))?;
                SplitPlan::DomainShift {
                    shots: self.shots,
                    corruption: spec.parse::<Corruption>()?,
                }
            }
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn method_config(&self) -> Result<MethodConfig> {
        let cfg = MethodConfig {
            method: self.method,
            m: self.m,
            ctx_init: self.ctx_init,
            k: self.k,
            prompt_ratio: self.prompt_ratio,
            placement: self.placement,
            tunable_vp: self.tunable_vp,
            budget: self.budget.clone(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks everything that can be checked without data.
    pub fn validate(&self) -> Result<()> {
        self.plan()?;
        self.method_config()?;
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        Ok(())
    }

    pub fn output_dir(&self) -> PathBuf {
        self.output_dir.clone().unwrap_or_else(output_root)
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.checkpoint.clone().unwrap_or_else(|| default_checkpoint(&output_root()))
    }
}
