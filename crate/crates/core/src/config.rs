//! Run configuration: one TOML file with a section per concern.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::distill::DistillConfig;
use crate::error::{DishftError, Result};
use crate::evalkit::{BacktestPolicy, Counting};
use crate::marketdata::{build_relation, generate_synthetic, load_panel, RelationMatrix, StockPanel, SyntheticSpec};
use crate::teacher::TeacherConfig;
use crate::train::TrainConfig;

/// Where the panel comes from: either both CSV paths or a synthetic spec.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Long-format panel CSV.
    pub csv: Option<PathBuf>,
    /// `symbol,industry` CSV.
    pub relation: Option<PathBuf>,
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub top_k: usize,
    /// Days between rebalances; defaults to the horizon.
    pub rebalance_every: Option<usize>,
    pub transaction_cost: f64,
    pub counting: Counting,
    /// Distillation weights tried per seed; the best validation accuracy wins.
    pub lambda_grid: Vec<f64>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            top_k: 10,
            rebalance_every: None,
            transaction_cost: 0.0,
            counting: Counting::Horizon,
            lambda_grid: vec![0.1, 0.5, 1.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub out_dir: Option<PathBuf>,
    /// Seeds of a multi-seed experiment.
    pub seeds: Vec<u64>,
    /// Seeds trained concurrently.
    pub jobs: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: None,
            seeds: vec![0, 1, 2, 3, 4],
            jobs: 1,
        }
    }
}

/// Overrides of the `[train]` budget for the baseline and the students.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StudentBudget {
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub learning_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: TeacherConfig,
    pub train: TrainConfig,
    pub distill: DistillConfig,
    pub eval: EvalConfig,
    pub student: StudentBudget,
    pub run: RunSection,
}

impl RunConfig {
    /// Parses TOML; relative data paths resolve against `base`.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| DishftError::Config(e.to_string()))?;
        for p in [&mut cfg.data.csv, &mut cfg.data.relation].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| DishftError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| DishftError::Config(e.to_string()))
    }

    /// `train` with the student overrides applied.
    pub fn student_train(&self, train: &TrainConfig) -> TrainConfig {
        let b = &self.student;
        TrainConfig {
            max_epochs: b.max_epochs.unwrap_or(train.max_epochs),
            patience: b.patience.unwrap_or(train.patience),
            learning_rate: b.learning_rate.unwrap_or(train.learning_rate),
            ..train.clone()
        }
    }

    pub fn policy(&self) -> BacktestPolicy {
        BacktestPolicy {
            top_k: self.eval.top_k,
            rebalance_every: self.eval.rebalance_every.unwrap_or(self.train.horizon),
            transaction_cost: self.eval.transaction_cost,
        }
    }

    /// Every invalid field, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        let d = &self.data;
        match (&d.csv, &d.relation, &d.synthetic) {
            (Some(csv), Some(rel), None) => {
                for p in [csv, rel] {
                    if !p.exists() {
                        out.push(format!("data path {} does not exist", p.display()));
                    }
                }
            }
            (None, None, Some(spec)) => {
                if let Err(e) = spec.validate() {
                    out.push(format!("data.synthetic: {e}"));
                }
            }
            (None, None, None) => out.push("no data source: set data.csv + data.relation or data.synthetic".into()),
            (Some(_), None, None) | (None, Some(_), None) => {
                out.push("data.csv and data.relation must be given together".into())
            }
            _ => out.push("exactly one data source allowed: csv files or data.synthetic".into()),
        }
        out.extend(self.model.problems().into_iter().map(|p| format!("model: {p}")));
        out.extend(self.train.problems().into_iter().map(|p| format!("train: {p}")));
        if self.student.max_epochs == Some(0) {
            out.push("student: max_epochs must be >= 1".into());
        }
        if let Some(lr) = self.student.learning_rate.filter(|lr| !(*lr > 0.0 && lr.is_finite())) {
            out.push(format!("student: learning_rate {lr} must be > 0"));
        }
        out.extend(self.distill.hsic.problems().into_iter().map(|p| format!("distill: {p}")));
        out.extend(self.policy().problems().into_iter().map(|p| format!("eval: {p}")));
        if self.eval.lambda_grid.is_empty() {
            out.push("eval: lambda_grid must not be empty".into());
        }
        if let Some(l) = self.eval.lambda_grid.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
            out.push(format!("eval: lambda_grid entry {l} must be >= 0"));
        }
        if self.run.seeds.is_empty() {
            out.push("run: seeds must not be empty".into());
        }
        if self.run.jobs == 0 {
            out.push("run: jobs must be >= 1".into());
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.problems();
        if p.is_empty() {
            Ok(())
        } else {
            Err(DishftError::Config(p.join("\n")))
        }
    }

    /// Loads or generates the panel and builds its relation matrix.
    pub fn load_data(&self) -> Result<(StockPanel, RelationMatrix)> {
        self.validate()?;
        let panel = match (&self.data.csv, &self.data.relation, &self.data.synthetic) {
            (Some(csv), Some(rel), None) => load_panel(csv, rel)?,
            (None, None, Some(spec)) => generate_synthetic(spec)?,
            _ => unreachable!("validated above"),
        };
        let a = build_relation(&panel)?;
        Ok((panel, a))
    }
}
