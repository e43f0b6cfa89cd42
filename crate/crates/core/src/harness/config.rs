use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::conformal::FullCpMode;
use crate::error::{Error, Result};
use crate::models::{Encoder, PrototypeFamily, RidgeFamily};
use crate::quantile::{Optimizer, TrainConfig};
use crate::simulator::{TaskDistributionConfig, TaskKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MethodSet {
    #[default]
    All,
    Meta,
    Full,
    Baselines,
}

impl std::str::FromStr for MethodSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(MethodSet::All),
            "meta" => Ok(MethodSet::Meta),
            "full" => Ok(MethodSet::Full),
            "baselines" => Ok(MethodSet::Baselines),
            other => Err(Error::Config(format!("unknown method selection `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    #[default]
    Marginal,
    Conditional,
}

impl std::str::FromStr for RunMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal" => Ok(RunMode::Marginal),
            "conditional" => Ok(RunMode::Conditional),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum FullCpVariant {
    #[default]
    Mondrian,
    Pooled,
}

impl From<FullCpVariant> for FullCpMode {
    fn from(v: FullCpVariant) -> Self {
        match v {
            FullCpVariant::Mondrian => FullCpMode::Mondrian,
            FullCpVariant::Pooled => FullCpMode::Pooled,
        }
    }
}

/// Every knob of an experiment. Keys in a config file match the field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub domain: TaskKind,
    pub n_train_tasks: usize,
    /// Calibration tasks per trial (`l`).
    pub n_cal_tasks: usize,
    /// Tasks added to the evaluation pool beyond `n_cal_tasks`; each trial
    /// draws its target and calibration tasks from the pool.
    pub n_test_tasks: usize,
    pub n_trials: usize,
    /// Support size: per class for classification, total for regression.
    pub k: usize,
    pub m: usize,
    pub q: usize,
    pub n_ways: usize,
    pub feature_dim: usize,
    /// Per-coordinate spread of class means; see [`TaskDistributionConfig`].
    pub class_separation: f64,
    pub noise_scale: f64,
    pub regression_weight_scale: f64,
    /// Output dimension of a fixed random projection; 0 keeps raw features.
    pub projection_dim: usize,
    pub ridge_lambda: f64,
    /// Optional grid for choosing the ridge penalty on training tasks.
    pub ridge_lambda_grid: Vec<f64>,
    pub epsilons: Vec<f64>,
    pub delta: f64,
    pub k_folds: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub batch: usize,
    pub optimizer: Optimizer,
    pub seed: u64,
    pub methods: MethodSet,
    pub mode: RunMode,
    pub full_cp: FullCpVariant,
    pub top_k: Vec<usize>,
    pub outer_resamples: usize,
    pub inner_trials: usize,
    pub output: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            domain: TaskKind::Classification,
            n_train_tasks: 50,
            n_cal_tasks: 25,
            n_test_tasks: 200,
            n_trials: 5000,
            k: 16,
            m: 500,
            q: 1,
            n_ways: 10,
            feature_dim: 8,
            class_separation: 1.5,
            noise_scale: 1.0,
            regression_weight_scale: 1.0,
            projection_dim: 0,
            ridge_lambda: 0.1,
            ridge_lambda_grid: Vec::new(),
            epsilons: vec![0.05, 0.1, 0.2, 0.3],
            delta: 0.1,
            k_folds: 5,
            hidden: 32,
            epochs: 100,
            step_size: 0.05,
            batch: 16,
            optimizer: Optimizer::Sgd,
            seed: 0,
            methods: MethodSet::All,
            mode: RunMode::Marginal,
            full_cp: FullCpVariant::Mondrian,
            top_k: vec![1, 3, 5],
            outer_resamples: 500,
            inner_trials: 2000,
            output: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        self.task_config().validate()?;
        for (name, v) in [
            ("n_train_tasks", self.n_train_tasks),
            ("n_cal_tasks", self.n_cal_tasks),
            ("n_test_tasks", self.n_test_tasks),
            ("n_trials", self.n_trials),
            ("hidden", self.hidden),
            ("batch", self.batch),
            ("outer_resamples", self.outer_resamples),
            ("inner_trials", self.inner_trials),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.k < 2 && self.domain == TaskKind::Regression {
            return bad("regression needs k ≥ 2 for leave-one-out scores".into());
        }
        if self.epsilons.is_empty() {
            return bad("epsilons must not be empty".into());
        }
        if let Some(e) = self.epsilons.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
            return bad(format!("epsilon {e} outside (0, 1)"));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return bad(format!("delta {} outside (0, 1)", self.delta));
        }
        if self.k_folds < 2 || self.k_folds > self.n_train_tasks {
            return bad(format!(
                "k_folds must be between 2 and n_train_tasks ({}), got {}",
                self.n_train_tasks, self.k_folds
            ));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return bad(format!("ridge_lambda must be ≥ 0, got {}", self.ridge_lambda));
        }
        if let Some(t) = self.top_k.iter().find(|&&t| t == 0 || t > self.n_ways) {
            return bad(format!("top_k entry {t} outside 1..={}", self.n_ways));
        }
        Ok(())
    }

    pub fn task_config(&self) -> TaskDistributionConfig {
        TaskDistributionConfig {
            kind: self.domain,
            n_ways: self.n_ways,
            feature_dim: self.feature_dim,
            class_separation: self.class_separation,
            noise_scale: self.noise_scale,
            regression_weight_scale: self.regression_weight_scale,
            k_support: self.k,
            m_extra: self.m,
            q_query: self.q,
            master_seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            hidden: self.hidden,
            epochs: self.epochs,
            step_size: self.step_size,
            batch: self.batch,
            seed: self.seed,
            optimizer: self.optimizer,
            variable_arity: false,
        }
    }

    pub fn encoder(&self) -> Result<Encoder> {
        if self.projection_dim == 0 {
            Ok(Encoder::Identity)
        } else {
            Encoder::projection(self.feature_dim, self.projection_dim, self.seed)
        }
    }

    pub fn prototype_family(&self) -> Result<PrototypeFamily> {
        Ok(PrototypeFamily::new(self.encoder()?))
    }

    pub fn ridge_family(&self) -> Result<RidgeFamily> {
        Ok(RidgeFamily::new(self.encoder()?, self.ridge_lambda).with_grid(self.ridge_lambda_grid.clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&c.to_toml_string().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("bogus = 1"),
            Err(Error::Config(_))
        ));
        let c = ExperimentConfig::from_toml_str("domain = \"regression\"\nepsilons = [0.1, 1.5]").unwrap();
        assert_eq!(c.domain, TaskKind::Regression);
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }
}
