//! Run configuration: a TOML file plus command-line overrides.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use gap_core::bench::WorldConfig;
use gap_core::grounder::{Aggregation, GrounderConfig};
use gap_core::models::{GateMode, ModelConfig, ModelFamily, TrainConfig};
use gap_core::pipeline::{PriorSource, VariantConfig};
use gap_core::refine::RefineMode;
use gap_core::{GapError, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub runs_dir: PathBuf,
    pub seed: u64,
    /// Seeds of the sample-efficiency sweep.
    pub seeds: Vec<u64>,
    pub family: ModelFamily,
    /// Refinement mode; the family default when absent.
    pub mode: Option<RefineMode>,
    pub dim: usize,
    pub steps: usize,
    pub refine_steps: Vec<usize>,
    pub supervision_fraction: f64,
    pub fractions: Vec<f64>,
    pub verify_cases: usize,
    pub ablation: Ablation,
    pub world: WorldConfig,
    pub grounder: GrounderSection,
    pub pretrain: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            name: "default".into(),
            runs_dir: PathBuf::from("runs"),
            seed: 0,
            seeds: vec![0, 1, 2],
            family: ModelFamily::SingleShot,
            mode: None,
            dim: 32,
            steps: 4,
            refine_steps: vec![1],
            supervision_fraction: 1.0,
            fractions: vec![0.1, 0.25, 0.5, 1.0],
            verify_cases: 200,
            ablation: Ablation::default(),
            world: WorldConfig::default(),
            grounder: GrounderSection::default(),
            pretrain: TrainConfig {
                epochs: 1,
                ..TrainConfig::default()
            },
            finetune: TrainConfig::default(),
        }
    }
}

/// Ablation switches. At most one of the prior-source switches may be set.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Train and evaluate without refinement.
    pub no_prior: bool,
    pub uniform_prior: bool,
    pub random_prior: bool,
    /// Ground the whole question instead of its extracted REs.
    pub no_re_grounding: bool,
    /// Skip stage-1 attention pre-training.
    pub no_pretrain_stage: bool,
    /// Clamp every gate to this value.
    pub fixed_gate: Option<f64>,
    /// Clamp every gate to 0, so the model attends with the prior alone.
    pub prior_only: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GrounderSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub aggregation: Aggregation,
}

impl Default for GrounderSection {
    fn default() -> Self {
        GrounderSection {
            epochs: 10,
            batch_size: 32,
            lr: 1e-3,
            aggregation: Aggregation::Coverage,
        }
    }
}

/// Command-line overrides applied on top of the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub name: Option<String>,
    pub seed: Option<u64>,
    pub runs_dir: Option<PathBuf>,
    /// `dotted.key=value` pairs; values parse as TOML, falling back to strings.
    pub set: Vec<String>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| GapError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| GapError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        for kv in &overrides.set {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| GapError::Config(format!("override `{kv}` is not key=value")))?;
            set_path(&mut table, key.trim(), parse_value(raw.trim()))?;
        }
        if let Some(name) = &overrides.name {
            table.insert("name".into(), toml::Value::String(name.clone()));
        }
        if let Some(seed) = overrides.seed {
            let seed = i64::try_from(seed).map_err(|_| GapError::Config(format!("seed {seed} too large")))?;
            table.insert("seed".into(), toml::Value::Integer(seed));
        }
        if let Some(dir) = &overrides.runs_dir {
            table.insert("runs_dir".into(), toml::Value::String(dir.display().to_string()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| GapError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name == "." || self.name == ".." {
            return Err(GapError::Config(format!("invalid run name `{}`", self.name)));
        }
        let a = &self.ablation;
        let sources = [a.no_prior, a.uniform_prior, a.random_prior, a.no_re_grounding]
            .iter()
            .filter(|b| **b)
            .count();
        if sources > 1 {
            return Err(GapError::Config(
                "no_prior, uniform_prior, random_prior and no_re_grounding are mutually exclusive".into(),
            ));
        }
        if a.prior_only && a.fixed_gate.is_some() {
            return Err(GapError::Config("prior_only and fixed_gate are mutually exclusive".into()));
        }
        if a.no_prior && (a.prior_only || a.fixed_gate.is_some()) {
            return Err(GapError::Config("gate clamps need a prior".into()));
        }
        if let Some(g) = a.fixed_gate {
            if !(0.0..=1.0).contains(&g) {
                return Err(GapError::Config(format!("fixed_gate {g} outside [0, 1]")));
            }
        }
        if self.dim != self.world.dim {
            return Err(GapError::Config(format!(
                "model dim {} differs from region feature dim {}",
                self.dim, self.world.dim
            )));
        }
        if !(self.supervision_fraction > 0.0 && self.supervision_fraction <= 1.0) {
            return Err(GapError::Config(format!(
                "supervision_fraction {} outside (0, 1]",
                self.supervision_fraction
            )));
        }
        if let Some(f) = self.fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
            return Err(GapError::Config(format!("fraction {f} outside (0, 1]")));
        }
        for t in [&self.pretrain, &self.finetune] {
            if t.batch_size == 0 || !(t.lr > 0.0) {
                return Err(GapError::Config("batch_size and lr must be positive".into()));
            }
        }
        self.world.validate().map_err(|e| GapError::Config(e.to_string()))?;
        self.model_config().validate().map_err(|e| GapError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.runs_dir.join(&self.name)
    }

    pub fn prior_source(&self) -> PriorSource {
        let a = &self.ablation;
        if a.uniform_prior {
            PriorSource::Uniform
        } else if a.random_prior {
            PriorSource::Random
        } else if a.no_re_grounding {
            PriorSource::WholeQuery
        } else {
            PriorSource::Grounder
        }
    }

    pub fn use_prior(&self) -> bool {
        !self.ablation.no_prior
    }

    pub fn model_config(&self) -> ModelConfig {
        let gate = if self.ablation.prior_only {
            GateMode::Fixed(0.0)
        } else if let Some(g) = self.ablation.fixed_gate {
            GateMode::Fixed(g)
        } else {
            GateMode::Learned
        };
        ModelConfig {
            family: self.family,
            dim: self.dim,
            steps: self.steps,
            refine_steps: self.refine_steps.iter().copied().collect::<BTreeSet<_>>(),
            mode: self.mode.unwrap_or(self.family.default_mode()),
            gate,
        }
    }

    pub fn grounder_config(&self) -> GrounderConfig {
        GrounderConfig {
            dim: self.dim,
            epochs: self.grounder.epochs,
            batch_size: self.grounder.batch_size,
            lr: self.grounder.lr,
            aggregation: self.grounder.aggregation,
        }
    }

    /// The configured variant: priors and pre-training unless ablated.
    pub fn variant(&self) -> VariantConfig {
        let use_prior = self.use_prior();
        VariantConfig {
            model: self.model_config(),
            use_prior,
            pretrain: (use_prior && !self.ablation.no_pretrain_stage).then_some(self.pretrain),
            finetune: self.finetune,
            supervision_fraction: self.supervision_fraction,
        }
    }

    /// The unrefined reference model of the sweep.
    pub fn baseline_variant(&self) -> VariantConfig {
        VariantConfig {
            model: ModelConfig {
                gate: GateMode::Learned,
                ..self.model_config()
            },
            use_prior: false,
            pretrain: None,
            finetune: self.finetune,
            supervision_fraction: self.supervision_fraction,
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| GapError::Config(e.to_string()))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_path(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(GapError::Config(format!("bad override key `{key}`")));
    }
    let last = parts.pop().expect("split yields one part");
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| GapError::Config(format!("override `{key}`: `{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}
