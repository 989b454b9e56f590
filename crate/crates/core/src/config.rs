//! Run configuration, method presets and the TOML config format.
//!
//! A config file names a `method`; its preset supplies every default and the
//! file's tables are merged over it key by key.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::{OptHyper, OptimizerKind};
use crate::schedule::{DropSchedule, ScheduleSpec};
use crate::select::{DEFAULT_HISTORY, SelectionConfig, SelectionMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Baseline,
    Stacking,
    Dropping,
    SelectiveBackprop,
    Rho,
    Lion,
    Sophia,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::Baseline,
        Method::Stacking,
        Method::Dropping,
        Method::SelectiveBackprop,
        Method::Rho,
        Method::Lion,
        Method::Sophia,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Baseline => "baseline",
            Method::Stacking => "stacking",
            Method::Dropping => "dropping",
            Method::SelectiveBackprop => "selective_backprop",
            Method::Rho => "rho",
            Method::Lion => "lion",
            Method::Sophia => "sophia",
        }
    }

    pub fn optimizer(self) -> OptimizerKind {
        match self {
            Method::Lion => OptimizerKind::Lion,
            Method::Sophia => OptimizerKind::Sophia,
            _ => OptimizerKind::Adamw,
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StackingParams {
    /// Budget fractions at which the model doubles.
    pub fractions: Vec<f64>,
    /// Depth trained before the first stack event.
    pub initial_layers: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionParams {
    /// Selectivity exponent (selective backprop only).
    pub beta: f64,
    /// Candidates scored per selection round.
    pub mega_batch: usize,
    pub history: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoParams {
    /// Proxy-train / proxy-val / main fractions of the training corpus.
    pub split: (f64, f64, f64),
    pub proxy_layers: usize,
    /// Proxy training budget as a fraction of the main budget; not charged.
    pub proxy_budget_fraction: f64,
    /// Upper bound on the number of fixed main-training examples.
    pub pool_size: usize,
    /// Load proxy losses from this table instead of training a proxy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub proxy_table: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSection {
    pub kind: OptimizerKind,
    #[serde(flatten)]
    pub hyper: OptHyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    /// Training budget in reference seconds.
    pub budget: f64,
    pub seed: u64,
    /// Corpus path, relative to the config file when loaded from one.
    pub corpus: PathBuf,
    /// Reference profile path, relative like `corpus`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub profile: Option<PathBuf>,
    /// Informational local profile; never affects charges.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub device_profile: Option<PathBuf>,
    pub batch_size: usize,
    pub mask_rate: f64,
    /// Trailing corpus fraction held out for validation.
    pub val_fraction: f64,
    pub val_batches: usize,
    /// Fixed batches from the training slice used to report train loss.
    pub probe_batches: usize,
    /// Seed of the validation and probe sets, shared by all runs.
    pub eval_seed: u64,
    /// Reference seconds between validations; defaults to a budget/8 cadence.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_interval: Option<f64>,
    /// Keep only the first this-many training tokens (multi-epoch regime).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus_truncation: Option<usize>,
    /// Schedules see progress `consumed / (stretch · budget)`.
    pub schedule_stretch: f64,
    pub free_selection: bool,
    pub free_hessian: bool,
    pub rms_scaling: bool,
    /// Model at its final depth; `vocab_size = 0` takes the corpus vocabulary.
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub optimizer: OptimizerSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stacking: Option<StackingParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dropping: Option<DropSchedule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionParams>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<RhoParams>,
}

pub const DEFAULT_CORPUS: &str = "data/shakespeare.txt";

impl RunConfig {
    pub fn preset(method: Method) -> Self {
        let model = ModelConfig {
            vocab_size: 0,
            ..ModelConfig::default()
        };
        let kind = method.optimizer();
        let peak_lr = match kind {
            OptimizerKind::Adamw => 1e-3,
            OptimizerKind::Lion => 7e-4,
            OptimizerKind::Sophia => 4e-4,
        };
        let batch_size = 8;
        let mut cfg = Self {
            method,
            budget: 60.0,
            seed: 0,
            corpus: PathBuf::from(DEFAULT_CORPUS),
            profile: None,
            device_profile: None,
            batch_size,
            mask_rate: crate::data::DEFAULT_MASK_RATE,
            val_fraction: 0.05,
            val_batches: 4,
            probe_batches: 4,
            eval_seed: 0x5EED,
            eval_interval: None,
            corpus_truncation: None,
            schedule_stretch: 1.0,
            free_selection: false,
            free_hessian: false,
            rms_scaling: false,
            model,
            schedule: ScheduleSpec::one_cycle(peak_lr),
            optimizer: OptimizerSection {
                kind,
                hyper: OptHyper::for_kind(kind),
            },
            stacking: None,
            dropping: None,
            selection: None,
            rho: None,
        };
        match method {
            Method::Stacking => {
                cfg.stacking = Some(StackingParams {
                    fractions: vec![0.125, 0.30],
                    initial_layers: model.num_layers / 4,
                });
            }
            Method::Dropping => cfg.dropping = Some(DropSchedule::default()),
            Method::SelectiveBackprop => {
                cfg.selection = Some(SelectionParams {
                    beta: 1.0,
                    mega_batch: batch_size,
                    history: DEFAULT_HISTORY,
                });
            }
            Method::Rho => {
                cfg.selection = Some(SelectionParams {
                    beta: 1.0,
                    mega_batch: 2 * batch_size,
                    history: DEFAULT_HISTORY,
                });
                cfg.rho = Some(RhoParams {
                    split: (0.20, 0.01, 0.79),
                    proxy_layers: model.num_layers / 2,
                    proxy_budget_fraction: 0.25,
                    pool_size: 2048,
                    proxy_table: None,
                });
            }
            _ => {}
        }
        cfg
    }

    /// The RHO preset with a 10× mega-batch, for the free-selection ablation.
    pub fn wide_rho_preset() -> Self {
        let mut cfg = Self::preset(Method::Rho);
        if let Some(s) = cfg.selection.as_mut() {
            s.mega_batch = 10 * cfg.batch_size;
        }
        cfg
    }

    /// The dropping preset with `γ_f = 20` and half the learning rate.
    pub fn t5_dropping_preset() -> Self {
        let mut cfg = Self::preset(Method::Dropping);
        cfg.dropping = Some(DropSchedule::t5_preset());
        cfg.schedule = cfg.schedule.scaled(0.5);
        cfg
    }

    /// Optimizer hyperparameters with the run-level RMS scaling flag applied.
    pub fn hyper(&self) -> OptHyper {
        OptHyper {
            rms_scaling: self.rms_scaling,
            ..self.optimizer.hyper
        }
    }

    pub fn selection_config(&self) -> Option<SelectionConfig> {
        let mode = match self.method {
            Method::SelectiveBackprop => SelectionMode::SelectiveBackprop,
            Method::Rho => SelectionMode::Rho,
            _ => return None,
        };
        let s = self.selection.as_ref()?;
        Some(SelectionConfig {
            mode,
            beta: s.beta,
            mega_batch: s.mega_batch,
            mini_batch: self.batch_size,
            free_selection: self.free_selection,
            history: s.history,
        })
    }

    /// Evaluation cadence in reference seconds.
    pub fn eval_every(&self) -> f64 {
        self.eval_interval.unwrap_or(self.budget / 8.0)
    }

    /// Depth of the freshly initialized model.
    pub fn initial_layers(&self) -> usize {
        match &self.stacking {
            Some(s) => s.initial_layers,
            None => self.model.num_layers,
        }
    }

    /// `method_budget_seed`, e.g. `baseline_60_0`.
    pub fn run_name(&self) -> String {
        format!("{}_{}_{}", self.method, self.budget, self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.budget >= 0.0) || !self.budget.is_finite() {
            return fail(format!("budget {} must be finite and non-negative", self.budget));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive".into());
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return fail("mask_rate must lie in (0, 1]".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail("val_fraction must lie in (0, 1)".into());
        }
        if !(self.schedule_stretch >= 1.0) {
            return fail("schedule_stretch must be at least 1".into());
        }
        if let Some(e) = self.eval_interval
            && !(e > 0.0)
        {
            return fail("eval_interval must be positive".into());
        }
        if self.model.vocab_size != 0 {
            self.model.validate()?;
        } else {
            ModelConfig {
                vocab_size: 1,
                ..self.model
            }
            .validate()?;
        }
        self.schedule.validate()?;
        self.hyper().validate()?;
        if self.optimizer.kind != self.method.optimizer() {
            return fail(format!(
                "method {} trains with {:?}, config says {:?}",
                self.method,
                self.method.optimizer(),
                self.optimizer.kind
            ));
        }
        let m = self.method;
        let present = |has: bool, uses: bool, what: &str| -> Result<()> {
            match (has, uses) {
                (true, false) => Err(Error::Config(format!("[{what}] is not used by method {m}"))),
                (false, true) => Err(Error::Config(format!("method {m} needs a [{what}] table"))),
                _ => Ok(()),
            }
        };
        present(self.stacking.is_some(), m == Method::Stacking, "stacking")?;
        present(self.dropping.is_some(), m == Method::Dropping, "dropping")?;
        present(
            self.selection.is_some(),
            matches!(m, Method::SelectiveBackprop | Method::Rho),
            "selection",
        )?;
        present(self.rho.is_some(), m == Method::Rho, "rho")?;
        if self.free_selection && self.selection.is_none() {
            return fail(format!("free_selection has no effect for method {m}"));
        }
        if self.free_hessian && m != Method::Sophia {
            return fail(format!("free_hessian has no effect for method {m}"));
        }
        if let Some(s) = &self.stacking {
            crate::schedule::stacking_points(1.0, &s.fractions)?;
            let final_depth = s.initial_layers << s.fractions.len();
            if s.initial_layers == 0 || final_depth != self.model.num_layers {
                return fail(format!(
                    "stacking from {} layers over {} events ends at {final_depth}, model has {}",
                    s.initial_layers,
                    s.fractions.len(),
                    self.model.num_layers
                ));
            }
        }
        if let Some(d) = &self.dropping {
            d.validate()?;
        }
        if let Some(sel) = self.selection_config() {
            sel.validate()?;
        }
        if let Some(r) = &self.rho {
            crate::data::split_rho(100, r.split)?;
            if r.proxy_layers == 0 || r.pool_size == 0 {
                return fail("rho proxy_layers and pool_size must be positive".into());
            }
            if !(r.proxy_budget_fraction > 0.0) {
                return fail("rho proxy_budget_fraction must be positive".into());
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Parses a config: the preset of `method` overlaid with the file's keys.
    /// Relative paths written in the file are resolved against `base_dir`;
    /// preset paths stay relative to the working directory.
    pub fn from_toml(text: &str, base_dir: Option<&Path>) -> Result<Self> {
        let user: toml::Table = text.parse().map_err(|e| Error::Parse(format!("config: {e}")))?;
        let method: Method = match user.get("method") {
            Some(toml::Value::String(s)) => s.parse()?,
            Some(_) => return Err(Error::Config("method must be a string".into())),
            None => return Err(Error::Config("config needs a method".into())),
        };
        let (has_corpus, has_profile, has_device) = (
            user.contains_key("corpus"),
            user.contains_key("profile"),
            user.contains_key("device_profile"),
        );
        let has_table = user.get("rho").and_then(|r| r.get("proxy_table")).is_some();
        let preset = toml::Table::try_from(Self::preset(method)).map_err(|e| Error::Parse(e.to_string()))?;
        let merged = merge(preset, user);
        let mut cfg: Self = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Parse(format!("config: {e}")))?;
        if let Some(dir) = base_dir {
            let fix = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            };
            if has_corpus {
                fix(&mut cfg.corpus);
            }
            if has_profile {
                cfg.profile.as_mut().map(fix);
            }
            if has_device {
                cfg.device_profile.as_mut().map(fix);
            }
            if has_table && let Some(r) = cfg.rho.as_mut() {
                r.proxy_table.as_mut().map(fix);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// The same config with every relative path made absolute against the
    /// working directory, so it can be reloaded from anywhere.
    pub fn with_absolute_paths(&self) -> Result<Self> {
        let abs = |p: &PathBuf| std::path::absolute(p).map_err(Error::from);
        let mut cfg = self.clone();
        cfg.corpus = abs(&cfg.corpus)?;
        cfg.profile = cfg.profile.as_ref().map(abs).transpose()?;
        cfg.device_profile = cfg.device_profile.as_ref().map(abs).transpose()?;
        if let Some(r) = cfg.rho.as_mut() {
            r.proxy_table = r.proxy_table.as_ref().map(abs).transpose()?;
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, path.parent())
    }
}

/// Recursive table merge; `over` wins on scalar and array conflicts.
fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.remove(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(k, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}
