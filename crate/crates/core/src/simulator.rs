//! Synthetic task distributions.
//!
//! A task is drawn once from the master seed and its task id, then any number
//! of episodes are sampled from it. Classification tasks place `n_ways` class
//! means at random and add unit Gaussian noise; regression tasks draw a
//! linear weight vector and observe `⟨w*, x⟩` plus Gaussian noise. The
//! location family skips features entirely and draws nonconformity scores
//! from a task-specific shift of a fixed shape.

use std::fmt::Display;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{Example, FeatureVector, Label};
use crate::rng::{self, purpose, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    #[default]
    Classification,
    Regression,
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "regression" => Ok(TaskKind::Regression),
            other => Err(Error::Config(format!("unknown task kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskDistributionConfig {
    pub kind: TaskKind,
    pub n_ways: usize,
    pub feature_dim: usize,
    /// Standard deviation of each class-mean coordinate, in units of the
    /// within-class noise.
    pub class_separation: f64,
    pub noise_scale: f64,
    pub regression_weight_scale: f64,
    /// Per class for classification, total for regression.
    pub k_support: usize,
    pub m_extra: usize,
    pub q_query: usize,
    pub master_seed: u64,
}

impl Default for TaskDistributionConfig {
    fn default() -> Self {
        TaskDistributionConfig {
            kind: TaskKind::Classification,
            n_ways: 10,
            feature_dim: 8,
            class_separation: 1.5,
            noise_scale: 1.0,
            regression_weight_scale: 1.0,
            k_support: 16,
            m_extra: 500,
            q_query: 1,
            master_seed: 0,
        }
    }
}

impl TaskDistributionConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_ways", self.n_ways),
            ("feature_dim", self.feature_dim),
            ("k_support", self.k_support),
            ("m_extra", self.m_extra),
            ("q_query", self.q_query),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if self.kind == TaskKind::Classification && self.n_ways < 2 {
            return Err(Error::Config("classification needs n_ways ≥ 2".into()));
        }
        for (name, v) in [
            ("class_separation", self.class_separation),
            ("noise_scale", self.noise_scale),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        if !(self.regression_weight_scale > 0.0 && self.regression_weight_scale.is_finite()) {
            return Err(Error::Config(format!(
                "regression_weight_scale must be positive, got {}",
                self.regression_weight_scale
            )));
        }
        Ok(())
    }

    /// Number of support examples in one episode.
    pub fn support_size(&self) -> usize {
        match self.kind {
            TaskKind::Classification => self.k_support * self.n_ways,
            TaskKind::Regression => self.k_support,
        }
    }
}

fn gaussian_vec(rng: &mut SimRng, dim: usize, scale: f64) -> Vec<f64> {
    (0..dim).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// One task distribution `P_XY`.
pub trait TaskSampler: Send + Sync {
    type Label: Clone + Send + Sync;

    fn task_id(&self) -> u64;

    fn master_seed(&self) -> u64;

    fn draw(&self, rng: &mut SimRng) -> Example<Self::Label>;

    /// Support set of `shots` examples (per class, for classification).
    fn draw_support(&self, shots: usize, rng: &mut SimRng) -> Vec<Example<Self::Label>>;

    /// Disjoint support, query and extra draws from this task. Every byte is
    /// determined by `(master_seed, task_id, episode_seed)`.
    fn sample_episode(&self, shots: usize, q: usize, m: usize, episode_seed: u64) -> Episode<Self::Label> {
        let mut rng = rng::stream(self.master_seed(), &[purpose::EPISODE, self.task_id(), episode_seed]);
        let support = self.draw_support(shots, &mut rng);
        let query = (0..q).map(|_| self.draw(&mut rng)).collect();
        let extra = (0..m).map(|_| self.draw(&mut rng)).collect();
        Episode {
            task_id: self.task_id(),
            seed: episode_seed,
            shots,
            support,
            query,
            extra,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Episode<Y> {
    pub task_id: u64,
    pub seed: u64,
    pub shots: usize,
    pub support: Vec<Example<Y>>,
    pub query: Vec<Example<Y>>,
    pub extra: Vec<Example<Y>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassificationTask {
    task_id: u64,
    master_seed: u64,
    means: Vec<Vec<f64>>,
}

impl ClassificationTask {
    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn n_ways(&self) -> usize {
        self.means.len()
    }

    fn example(&self, label: Label, rng: &mut SimRng) -> Example<Label> {
        let x = self.means[label]
            .iter()
            .map(|m| m + rng.sample::<f64, _>(StandardNormal))
            .collect();
        Example {
            x: FeatureVector::from_finite(x),
            y: label,
        }
    }
}

impl TaskSampler for ClassificationTask {
    type Label = Label;

    fn task_id(&self) -> u64 {
        self.task_id
    }

    fn master_seed(&self) -> u64 {
        self.master_seed
    }

    fn draw(&self, rng: &mut SimRng) -> Example<Label> {
        let label = rng.random_range(0..self.n_ways());
        self.example(label, rng)
    }

    fn draw_support(&self, shots: usize, rng: &mut SimRng) -> Vec<Example<Label>> {
        let mut support: Vec<Example<Label>> = (0..self.n_ways())
            .flat_map(|label| (0..shots).map(move |_| label))
            .map(|label| self.example(label, rng))
            .collect();
        support.shuffle(rng);
        support
    }
}

pub fn sample_classification_task(config: &TaskDistributionConfig, task_id: u64) -> Result<ClassificationTask> {
    config.validate()?;
    let mut rng = rng::stream(config.master_seed, &[purpose::TASK, task_id]);
    let means = (0..config.n_ways)
        .map(|_| gaussian_vec(&mut rng, config.feature_dim, config.class_separation))
        .collect();
    Ok(ClassificationTask {
        task_id,
        master_seed: config.master_seed,
        means,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionTask {
    task_id: u64,
    master_seed: u64,
    weights: Vec<f64>,
    noise_scale: f64,
}

impl RegressionTask {
    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }
}

impl TaskSampler for RegressionTask {
    type Label = f64;

    fn task_id(&self) -> u64 {
        self.task_id
    }

    fn master_seed(&self) -> u64 {
        self.master_seed
    }

    fn draw(&self, rng: &mut SimRng) -> Example<f64> {
        let x = FeatureVector::from_finite(gaussian_vec(rng, self.weights.len(), 1.0));
        let y = x.dot(&self.weights) + self.noise_scale * rng.sample::<f64, _>(StandardNormal);
        Example { x, y }
    }

    fn draw_support(&self, shots: usize, rng: &mut SimRng) -> Vec<Example<f64>> {
        (0..shots).map(|_| self.draw(rng)).collect()
    }
}

pub fn sample_regression_task(config: &TaskDistributionConfig, task_id: u64) -> Result<RegressionTask> {
    config.validate()?;
    let mut rng = rng::stream(config.master_seed, &[purpose::TASK, task_id]);
    Ok(RegressionTask {
        task_id,
        master_seed: config.master_seed,
        weights: gaussian_vec(&mut rng, config.feature_dim, config.regression_weight_scale),
        noise_scale: config.noise_scale,
    })
}

/// Shape of the per-task score distribution in [`LocationFamily`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocationShape {
    Uniform,
    Logistic,
}

/// Tasks whose scores are `μ_t + ξ` with `μ_t ~ N(0, spread²)` and `ξ` of a
/// fixed shape, so every task quantile is known in closed form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocationFamily {
    pub shape: LocationShape,
    pub spread: f64,
    pub master_seed: u64,
}

/// Scores for one location-family task.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationTask {
    pub location: f64,
    pub shape: LocationShape,
    pub support: Vec<f64>,
    pub test: Vec<f64>,
}

impl LocationTask {
    pub fn true_quantile(&self, beta: f64) -> f64 {
        self.location
            + match self.shape {
                LocationShape::Uniform => beta,
                LocationShape::Logistic => (beta / (1.0 - beta)).ln(),
            }
    }
}

impl LocationFamily {
    pub fn task(&self, task_id: u64, k: usize, m: usize) -> LocationTask {
        let mut rng = rng::stream(self.master_seed, &[purpose::TASK, task_id, k as u64, m as u64]);
        let location = self.spread * rng.sample::<f64, _>(StandardNormal);
        let mut draw = || {
            let u: f64 = rng.random();
            location
                + match self.shape {
                    LocationShape::Uniform => u,
                    // clamp keeps the logit finite on the half-open unit interval
                    LocationShape::Logistic => {
                        let u = u.clamp(1e-300, 1.0 - 1e-16);
                        (u / (1.0 - u)).ln()
                    }
                }
        };
        let support = (0..k).map(|_| draw()).collect();
        let test = (0..m).map(|_| draw()).collect();
        LocationTask {
            location,
            shape: self.shape,
            support,
            test,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Support,
    Query,
    Extra,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Support => "support",
            Split::Query => "query",
            Split::Extra => "extra",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "support" => Ok(Split::Support),
            "query" => Ok(Split::Query),
            "extra" => Ok(Split::Extra),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

/// One line of the episode export format.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord<Y> {
    pub task_id: u64,
    pub split: Split,
    pub example: Example<Y>,
}

/// Writes one example per line as `task_id,split,label,f1,...,fd`.
pub fn write_episode<Y: Display, W: Write>(out: &mut W, episode: &Episode<Y>) -> Result<()> {
    for (split, examples) in [
        (Split::Support, &episode.support),
        (Split::Query, &episode.query),
        (Split::Extra, &episode.extra),
    ] {
        for e in examples {
            write!(out, "{},{},{}", episode.task_id, split.as_str(), e.y)?;
            for v in e.x.as_slice() {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

pub fn read_episode_records<Y, R>(input: R) -> Result<Vec<EpisodeRecord<Y>>>
where
    Y: FromStr,
    Y::Err: Display,
    R: BufRead,
{
    let mut records = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: i + 1, msg };
        let mut fields = line.split(',');
        let mut next = |what: &str| fields.next().ok_or_else(|| parse_err(format!("missing {what}")));
        let task_id = next("task_id")?.parse::<u64>().map_err(|e| parse_err(e.to_string()))?;
        let split = next("split")?.parse::<Split>().map_err(parse_err)?;
        let y = next("label")?.parse::<Y>().map_err(|e| parse_err(e.to_string()))?;
        let coords = fields
            .map(|f| f.parse::<f64>().map_err(|e| parse_err(e.to_string())))
            .collect::<Result<Vec<f64>>>()?;
        if coords.is_empty() {
            return Err(parse_err("no feature columns".into()));
        }
        let x = FeatureVector::new(coords).map_err(|e| parse_err(e.to_string()))?;
        records.push(EpisodeRecord {
            task_id,
            split,
            example: Example { x, y },
        });
    }
    Ok(records)
}
