//! JSON run configuration, validated before any computation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bounds::PriorGridSpec;
use crate::error::{Error, Result};
use crate::fixed_point::{MetricId, ToleranceGrid};
use crate::learned::LossId;
use crate::problems::{DeblurSpec, QpSpec, SparseCodingSpec, ToySpec};
use crate::solvers::IstaForm;
use crate::training::DEFAULT_BTARGETS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FamilyConfig {
    Toy(ToySpec),
    SparseCoding(SparseCodingSpec),
    UnconstrainedQp(QpSpec),
    Deblurring(DeblurSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum OperatorConfig {
    ToyContraction { beta: f64 },
    /// Step defaults to 2/(mu + L).
    Gd {
        #[serde(default)]
        gamma: Option<f64>,
    },
    Ista {
        rho: f64,
        #[serde(default)]
        form: IstaForm,
    },
    Fista { rho: f64 },
    DrBoxqp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum InitConfig {
    #[default]
    Zero,
    NearestNeighbor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorstCaseConfig {
    /// Almost-sure bound on ||z^0 - z*||.
    pub dist_upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassicalConfig {
    pub operator: OperatorConfig,
    #[serde(default)]
    pub init: InitConfig,
    pub k_max: usize,
    /// Solved instances forming the nearest-neighbor base.
    #[serde(default)]
    pub n_warmstart: usize,
    #[serde(default)]
    pub worst_case: Option<WorstCaseConfig>,
}

fn default_lista_rho() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ArchConfig {
    Alista {
        k: usize,
    },
    Tilista {
        k: usize,
    },
    Lista {
        k: usize,
        #[serde(default = "default_lista_rho")]
        rho: f64,
    },
    /// MLP widths between the input and output layers, then k GD steps.
    L2ws {
        k: usize,
        hidden: Vec<usize>,
        #[serde(default)]
        gamma: Option<f64>,
    },
}

impl ArchConfig {
    pub fn k(&self) -> usize {
        match self {
            ArchConfig::Alista { k } | ArchConfig::Tilista { k } | ArchConfig::Lista { k, .. } | ArchConfig::L2ws { k, .. } => *k,
        }
    }
}

fn default_mu() -> f64 {
    1e3
}
fn default_lr() -> f64 {
    1e-3
}
fn default_s0() -> f64 {
    1e-4
}
fn default_btargets() -> Vec<f64> {
    DEFAULT_BTARGETS.to_vec()
}
fn default_h() -> usize {
    crate::calibration::DEFAULT_H
}
fn default_loss() -> LossId {
    LossId::Regression
}

/// Cell used to pick B_target: the calibrated `quantile` bound of `metric` at step `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectConfig {
    pub metric: MetricId,
    pub k: usize,
    pub quantile: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnedConfig {
    pub arch: ArchConfig,
    pub epochs: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default)]
    pub batch_size: usize,
    #[serde(default)]
    pub grid: PriorGridSpec,
    #[serde(default = "default_s0")]
    pub s0: f64,
    #[serde(default = "default_loss")]
    pub loss: LossId,
    #[serde(default = "default_btargets")]
    pub btargets: Vec<f64>,
    /// Monte Carlo weight samples H.
    #[serde(default = "default_h")]
    pub h: usize,
    /// Defaults to the first metric, the largest k and the first quantile.
    #[serde(default)]
    pub select: Option<SelectConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerConfig {
    Classical(ClassicalConfig),
    Learned(LearnedConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricConfig {
    pub metric: MetricId,
    #[serde(default)]
    pub grid: Option<ToleranceGrid>,
}

impl MetricConfig {
    pub fn tolerances(&self) -> Vec<f64> {
        self.grid.unwrap_or_else(|| self.metric.default_grid()).values()
    }
}

fn default_omega() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub delta: f64,
    #[serde(default = "default_omega")]
    pub omega: f64,
    pub metrics: Vec<MetricConfig>,
    #[serde(default)]
    pub quantiles: Vec<f64>,
    /// Iterations to report; all of 0..=k_max when absent.
    #[serde(default)]
    pub ks: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub family: FamilyConfig,
    /// Size N of the certification (and, for learned optimizers, training) set.
    pub n_samples: usize,
    /// Held-out instances evaluated empirically.
    #[serde(default)]
    pub n_test: usize,
    pub optimizer: OptimizerConfig,
    pub bounds: BoundConfig,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

fn cfg_err(path: &str, msg: impl Into<String>) -> Error {
    Error::Config { path: path.into(), msg: msg.into() }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            cfg_err(&path, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| cfg_err(".", format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// SHA-256 of the canonical serialization (defaults filled in).
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn k_max(&self) -> usize {
        match &self.optimizer {
            OptimizerConfig::Classical(c) => c.k_max,
            OptimizerConfig::Learned(l) => self.bounds.ks.as_ref().and_then(|ks| ks.iter().copied().max()).unwrap_or(l.arch.k()),
        }
    }

    /// Iterations that appear in the outputs.
    pub fn ks(&self) -> Vec<usize> {
        match &self.bounds.ks {
            Some(ks) => {
                let mut ks = ks.clone();
                ks.sort_unstable();
                ks.dedup();
                ks
            }
            None => (0..=self.k_max()).collect(),
        }
    }

    pub fn n_btargets(&self) -> usize {
        match &self.optimizer {
            OptimizerConfig::Classical(_) => 1,
            OptimizerConfig::Learned(l) => l.btargets.len(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let b = &self.bounds;
        if self.n_samples == 0 {
            return Err(cfg_err("n_samples", "must be at least 1"));
        }
        if !(b.delta > 0.0 && b.delta < 1.0) {
            return Err(cfg_err("bounds.delta", format!("must be in (0,1), got {}", b.delta)));
        }
        if b.metrics.is_empty() {
            return Err(cfg_err("bounds.metrics", "at least one metric is required"));
        }
        for (i, q) in b.quantiles.iter().enumerate() {
            if !(*q > 0.0 && *q < 1.0) {
                return Err(cfg_err(&format!("bounds.quantiles[{i}]"), format!("must be in (0,1), got {q}")));
            }
        }
        let learned = matches!(self.optimizer, OptimizerConfig::Learned(_));
        if learned && !(b.omega > 0.0 && b.omega < 1.0) {
            return Err(cfg_err("bounds.omega", format!("must be in (0,1), got {}", b.omega)));
        }
        let per = if learned { b.delta + b.omega } else { b.delta };
        let nb = self.n_btargets() as f64;
        for (i, m) in b.metrics.iter().enumerate() {
            let path = format!("bounds.metrics[{i}].grid");
            let grid = m.grid.unwrap_or_else(|| m.metric.default_grid());
            grid.validate().map_err(|e| cfg_err(&path, e.to_string()))?;
            let budget = nb * grid.count as f64 * per;
            if !(budget < 1.0) {
                return Err(cfg_err(
                    &path,
                    format!("failure budget {budget} over {} tolerances leaves no confidence", grid.count),
                ));
            }
            if m.metric.needs_truth() && matches!(self.family, FamilyConfig::Deblurring(_)) && learned {
                return Err(cfg_err(&format!("bounds.metrics[{i}].metric"), "no learned optimizer runs on deblurring"));
            }
        }
        match (&self.family, &self.optimizer) {
            (_, OptimizerConfig::Classical(c)) => self.validate_classical(c)?,
            (_, OptimizerConfig::Learned(l)) => self.validate_learned(l)?,
        }
        if let Some(ks) = &b.ks {
            if ks.is_empty() {
                return Err(cfg_err("bounds.ks", "must not be empty"));
            }
            if let OptimizerConfig::Classical(c) = &self.optimizer {
                if let Some(k) = ks.iter().find(|&&k| k > c.k_max) {
                    return Err(cfg_err("bounds.ks", format!("k = {k} exceeds k_max = {}", c.k_max)));
                }
            }
        }
        Ok(())
    }

    fn validate_classical(&self, c: &ClassicalConfig) -> Result<()> {
        if c.k_max == 0 {
            return Err(cfg_err("optimizer.k_max", "must be at least 1"));
        }
        let ok = matches!(
            (&self.family, &c.operator),
            (FamilyConfig::Toy(_), OperatorConfig::ToyContraction { .. })
                | (FamilyConfig::UnconstrainedQp(_), OperatorConfig::Gd { .. })
                | (FamilyConfig::SparseCoding(_), OperatorConfig::Ista { .. } | OperatorConfig::Fista { .. })
                | (FamilyConfig::Deblurring(_), OperatorConfig::DrBoxqp)
        );
        if !ok {
            return Err(cfg_err("optimizer.operator", "operator does not apply to this problem family"));
        }
        match c.operator {
            OperatorConfig::ToyContraction { beta } if !(beta > 0.0 && beta < 1.0) => {
                return Err(cfg_err("optimizer.operator.beta", format!("must be in (0,1), got {beta}")));
            }
            OperatorConfig::Ista { rho, .. } | OperatorConfig::Fista { rho } if !(rho >= 0.0) => {
                return Err(cfg_err("optimizer.operator.rho", format!("must be nonnegative, got {rho}")));
            }
            OperatorConfig::Gd { gamma: Some(g) } if !(g > 0.0) => {
                return Err(cfg_err("optimizer.operator.gamma", format!("must be positive, got {g}")));
            }
            _ => {}
        }
        if c.init == InitConfig::NearestNeighbor {
            if c.n_warmstart == 0 {
                return Err(cfg_err("optimizer.n_warmstart", "nearest-neighbor initialization needs a base set"));
            }
            if matches!(c.operator, OperatorConfig::Fista { .. }) {
                return Err(cfg_err("optimizer.init", "FISTA runs from zero"));
            }
        }
        if let Some(w) = &c.worst_case {
            if !(w.dist_upper >= 0.0) {
                return Err(cfg_err("optimizer.worst_case.dist_upper", "must be nonnegative"));
            }
            if matches!(c.operator, OperatorConfig::Fista { .. }) {
                return Err(cfg_err("optimizer.worst_case", "FISTA has no declared operator class"));
            }
            if self.bounds.metrics.iter().any(|m| m.metric != MetricId::FpResidual) {
                return Err(cfg_err("optimizer.worst_case", "worst-case rates apply to fp_residual only"));
            }
        }
        Ok(())
    }

    fn validate_learned(&self, l: &LearnedConfig) -> Result<()> {
        if self.n_samples < 8 {
            return Err(cfg_err("n_samples", "learned certificates need at least 8 instances"));
        }
        let ok = matches!(
            (&self.family, &l.arch),
            (FamilyConfig::SparseCoding(_), ArchConfig::Alista { .. } | ArchConfig::Tilista { .. } | ArchConfig::Lista { .. })
                | (FamilyConfig::UnconstrainedQp(_), ArchConfig::L2ws { .. })
        );
        if !ok {
            return Err(cfg_err("optimizer.arch", "architecture does not apply to this problem family"));
        }
        if l.arch.k() == 0 {
            return Err(cfg_err("optimizer.arch.k", "must be at least 1"));
        }
        if l.btargets.is_empty() {
            return Err(cfg_err("optimizer.btargets", "must not be empty"));
        }
        if let Some(i) = l.btargets.iter().position(|&b| !(b > 0.0)) {
            return Err(cfg_err(&format!("optimizer.btargets[{i}]"), "must be positive"));
        }
        if l.h == 0 {
            return Err(cfg_err("optimizer.h", "must be at least 1"));
        }
        for (name, v) in [("learning_rate", l.learning_rate), ("mu", l.mu), ("s0", l.s0)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(cfg_err(&format!("optimizer.{name}"), format!("must be positive, got {v}")));
            }
        }
        l.grid.validate().map_err(|e| cfg_err("optimizer.grid", e.to_string()))?;
        let loss_ok = match l.arch {
            ArchConfig::L2ws { .. } => true,
            _ => l.loss == LossId::Regression,
        };
        if !loss_ok {
            return Err(cfg_err("optimizer.loss", "the LISTA family trains on the regression loss"));
        }
        if let Some(s) = &l.select {
            if !self.bounds.metrics.iter().any(|m| m.metric == s.metric) {
                return Err(cfg_err("optimizer.select.metric", "not among bounds.metrics"));
            }
            if !(s.quantile > 0.0 && s.quantile < 1.0) {
                return Err(cfg_err("optimizer.select.quantile", "must be in (0,1)"));
            }
        } else if l.btargets.len() > 1 && self.bounds.quantiles.is_empty() {
            return Err(cfg_err("optimizer.select", "needed when several B targets are given and no quantiles are set"));
        }
        Ok(())
    }
}
