//! Learned β-quantile prediction from leave-one-out scores.
//!
//! [`SetRegressor`] is a deep-sets network: every score passes through a
//! shared two-layer ReLU encoder, the encodings are summed (scaled by a
//! constant `1/k`), and a two-layer decoder maps the pooled vector to one
//! output. Inputs are sorted before summation so the floating-point result
//! does not depend on input order at all. Gradients are computed by hand.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{quantile, ScoreSample};
use crate::error::{Error, Result};
use crate::models::{Example, Scorer, ScorerFamily, TaskPair};
use crate::rng::{self, purpose};
use crate::simulator::Episode;

/// Minimum number of training examples for [`train_set_regressor`].
pub const MIN_TRAINING_EXAMPLES: usize = 50;
/// Extra examples per support example required when building targets.
pub const EXTRA_PER_SHOT: usize = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantileTrainingExample {
    pub loo_scores: Vec<f64>,
    pub target: f64,
}

/// Leave-one-out scores and held-out test scores of one task under a scorer
/// fitted on its support.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScores {
    pub loo: Vec<f64>,
    pub test: Vec<f64>,
}

impl TaskScores {
    pub fn compute<F: ScorerFamily>(
        family: &F,
        support: &[Example<F::Label>],
        held_out: &[Example<F::Label>],
    ) -> Result<Self> {
        let loo = family.loo_scores(support)?.into_inner();
        let scorer = family.fit(support)?;
        let test = held_out
            .iter()
            .map(|e| scorer.score(&e.x, &e.y))
            .collect::<Result<Vec<f64>>>()?;
        Ok(TaskScores { loo, test })
    }

    pub fn training_example(&self, beta: f64) -> Result<QuantileTrainingExample> {
        let target = quantile(beta, &ScoreSample::new(self.test.clone())?)?;
        if !target.is_finite() {
            return Err(Error::NonFinite("quantile target".into()));
        }
        Ok(QuantileTrainingExample {
            loo_scores: self.loo.clone(),
            target,
        })
    }
}

fn check_extra<Y>(episode: &Episode<Y>) -> Result<()> {
    if episode.extra.len() < EXTRA_PER_SHOT * episode.shots {
        return Err(Error::Config(format!(
            "task {} has m = {} extra examples; at least {EXTRA_PER_SHOT}·{} are required",
            episode.task_id,
            episode.extra.len(),
            episode.shots
        )));
    }
    Ok(())
}

/// One training pair per episode: the support LOO scores and the β-quantile
/// of the extra examples' scores under the support-fitted scorer.
pub fn build_quantile_dataset<F: ScorerFamily>(
    episodes: &[Episode<F::Label>],
    family: &F,
    beta: f64,
) -> Result<Vec<QuantileTrainingExample>> {
    episodes.iter().try_for_each(check_extra)?;
    episodes
        .par_iter()
        .map(|ep| TaskScores::compute(family, &ep.support, &ep.extra)?.training_example(beta))
        .collect()
}

pub fn fold_of(index: usize, k_folds: usize) -> usize {
    index % k_folds
}

/// Cross-fold scoring: tasks in fold `f` are scored by a family meta-trained
/// on the other folds. Returns the family meta-trained on all tasks and the
/// held-out scores in episode order.
pub fn crossfold_scores<F: ScorerFamily>(
    episodes: &[Episode<F::Label>],
    family: &F,
    k_folds: usize,
) -> Result<(F, Vec<TaskScores>)> {
    if k_folds < 2 {
        return Err(Error::arg(format!("k_folds must be at least 2, got {k_folds}")));
    }
    if episodes.len() < k_folds {
        return Err(Error::arg(format!(
            "{} tasks cannot fill {k_folds} folds",
            episodes.len()
        )));
    }
    episodes.iter().try_for_each(check_extra)?;
    let pairs = |keep: &dyn Fn(usize) -> bool| -> Vec<TaskPair<F::Label>> {
        episodes
            .iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, ep)| (ep.support.as_slice(), ep.extra.as_slice()))
            .collect()
    };
    let fold_families = (0..k_folds)
        .map(|f| family.meta_train(&pairs(&|i| fold_of(i, k_folds) != f)))
        .collect::<Result<Vec<F>>>()?;
    let scores = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| TaskScores::compute(&fold_families[fold_of(i, k_folds)], &ep.support, &ep.extra))
        .collect::<Result<Vec<TaskScores>>>()?;
    Ok((family.meta_train(&pairs(&|_| true))?, scores))
}

pub fn crossfold_train<F: ScorerFamily>(
    episodes: &[Episode<F::Label>],
    family: &F,
    k_folds: usize,
    beta: f64,
    config: &TrainConfig,
) -> Result<(F, SetRegressor)> {
    let (trained, scores) = crossfold_scores(episodes, family, k_folds)?;
    let dataset = scores
        .iter()
        .map(|s| s.training_example(beta))
        .collect::<Result<Vec<_>>>()?;
    Ok((trained, train_set_regressor(&dataset, config)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub step_size: f64,
    pub batch: usize,
    pub seed: u64,
    pub optimizer: Optimizer,
    /// Accept inputs of any length; absent elements act as masked padding.
    pub variable_arity: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            hidden: 32,
            epochs: 200,
            step_size: 0.05,
            batch: 16,
            seed: 0,
            optimizer: Optimizer::Sgd,
            variable_arity: false,
        }
    }
}

const GRAD_CLIP: f64 = 10.0;

/// Parameter tensors, row-major.
#[derive(Debug, Clone, PartialEq)]
struct Params {
    hidden: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
    w3: Vec<f64>,
    b3: Vec<f64>,
    w4: Vec<f64>,
    b4: Vec<f64>,
}

const PARAM_NAMES: [&str; 8] = ["w1", "b1", "w2", "b2", "w3", "b3", "w4", "b4"];

impl Params {
    fn zeros(h: usize) -> Self {
        Params {
            hidden: h,
            w1: vec![0.0; h],
            b1: vec![0.0; h],
            w2: vec![0.0; h * h],
            b2: vec![0.0; h],
            w3: vec![0.0; h * h],
            b3: vec![0.0; h],
            w4: vec![0.0; h],
            b4: vec![0.0; 1],
        }
    }

    fn init(h: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[purpose::INIT, h as u64]);
        let mut p = Params::zeros(h);
        let fan_in = [1, 1, h, h, h, h, h, h];
        for (group, fan) in p.groups_mut().into_iter().zip(fan_in) {
            let bound = 1.0 / (fan as f64).sqrt();
            for v in group.iter_mut() {
                *v = rng.random_range(-bound..=bound);
            }
        }
        p
    }

    fn shapes(&self) -> [(usize, usize); 8] {
        let h = self.hidden;
        [(h, 1), (h, 1), (h, h), (h, 1), (h, h), (h, 1), (1, h), (1, 1)]
    }

    fn groups(&self) -> [&Vec<f64>; 8] {
        [
            &self.w1, &self.b1, &self.w2, &self.b2, &self.w3, &self.b3, &self.w4, &self.b4,
        ]
    }

    fn groups_mut(&mut self) -> [&mut Vec<f64>; 8] {
        [
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.w3,
            &mut self.b3,
            &mut self.w4,
            &mut self.b4,
        ]
    }

    fn norm_sq(&self) -> f64 {
        self.groups().iter().flat_map(|g| g.iter()).map(|v| v * v).sum()
    }

    fn axpy(&mut self, a: f64, other: &Params) {
        for (g, o) in self.groups_mut().into_iter().zip(other.groups()) {
            for (v, d) in g.iter_mut().zip(o) {
                *v += a * d;
            }
        }
    }
}

fn relu(v: f64) -> f64 {
    v.max(0.0)
}

/// `out = W v + b` for a row-major `rows × v.len()` matrix.
fn affine(w: &[f64], b: &[f64], v: &[f64], out: &mut [f64]) {
    let cols = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        let row = &w[r * cols..(r + 1) * cols];
        *o = b[r] + row.iter().zip(v).map(|(a, x)| a * x).sum::<f64>();
    }
}

/// Affine standardization `(v − shift) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Standardizer {
    shift: f64,
    scale: f64,
}

impl Standardizer {
    fn fit<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> Self {
        let n = values.clone().count().max(1) as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let sd = var.sqrt();
        Standardizer {
            shift: mean,
            scale: if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 },
        }
    }

    fn apply(&self, v: f64) -> f64 {
        (v - self.shift) / self.scale
    }

    fn invert(&self, v: f64) -> f64 {
        self.shift + self.scale * v
    }
}

/// Trained permutation-invariant map from `k` scores to a predicted quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct SetRegressor {
    params: Params,
    arity: usize,
    variable_arity: bool,
    input: Standardizer,
    output: Standardizer,
}

/// Intermediate activations for one set.
struct Trace {
    u: Vec<f64>,
    pre1: Vec<Vec<f64>>,
    pre2: Vec<Vec<f64>>,
    pooled: Vec<f64>,
    pre3: Vec<f64>,
    out: f64,
}

impl SetRegressor {
    pub fn hidden(&self) -> usize {
        self.params.hidden
    }

    pub fn arity(&self) -> usize {
        self.arity
    }

    fn check_input(&self, scores: &[f64]) -> Result<()> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("quantile predictor input".into()));
        }
        if scores.is_empty() || (!self.variable_arity && scores.len() != self.arity) {
            return Err(Error::arg(format!(
                "quantile predictor expects {} scores, got {}",
                self.arity,
                scores.len()
            )));
        }
        Ok(())
    }

    /// Forward pass in standardized output units.
    fn trace(&self, p: &Params, scores: &[f64]) -> Trace {
        let h = p.hidden;
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let u: Vec<f64> = sorted.iter().map(|&s| self.input.apply(s)).collect();
        let agg = 1.0 / self.arity as f64;
        let mut pooled = vec![0.0; h];
        let mut pre1 = Vec::with_capacity(u.len());
        let mut pre2 = Vec::with_capacity(u.len());
        let mut a1 = vec![0.0; h];
        for &ui in &u {
            let z1: Vec<f64> = (0..h).map(|r| p.w1[r] * ui + p.b1[r]).collect();
            for (a, z) in a1.iter_mut().zip(&z1) {
                *a = relu(*z);
            }
            let mut z2 = vec![0.0; h];
            affine(&p.w2, &p.b2, &a1, &mut z2);
            for (s, z) in pooled.iter_mut().zip(&z2) {
                *s += agg * relu(*z);
            }
            pre1.push(z1);
            pre2.push(z2);
        }
        let mut pre3 = vec![0.0; h];
        affine(&p.w3, &p.b3, &pooled, &mut pre3);
        let d: Vec<f64> = pre3.iter().map(|&z| relu(z)).collect();
        let out = p.b4[0] + p.w4.iter().zip(&d).map(|(a, b)| a * b).sum::<f64>();
        Trace {
            u,
            pre1,
            pre2,
            pooled,
            pre3,
            out,
        }
    }

    /// Same arithmetic as [`Self::trace`] without keeping activations.
    fn forward(&self, p: &Params, scores: &[f64]) -> f64 {
        let h = p.hidden;
        let mut sorted = scores.to_vec();
        sorted.sort_by(f64::total_cmp);
        let agg = 1.0 / self.arity as f64;
        let mut pooled = vec![0.0; h];
        let mut a1 = vec![0.0; h];
        let mut z2 = vec![0.0; h];
        for &s in &sorted {
            let ui = self.input.apply(s);
            for ((a, w), b) in a1.iter_mut().zip(&p.w1).zip(&p.b1) {
                *a = relu(w * ui + b);
            }
            affine(&p.w2, &p.b2, &a1, &mut z2);
            for (s, z) in pooled.iter_mut().zip(&z2) {
                *s += agg * relu(*z);
            }
        }
        let mut pre3 = vec![0.0; h];
        affine(&p.w3, &p.b3, &pooled, &mut pre3);
        p.b4[0] + p.w4.iter().zip(&pre3).map(|(a, &z)| a * relu(z)).sum::<f64>()
    }

    /// Adds `d(out)/dθ · g` into `grad`.
    #[allow(clippy::needless_range_loop)]
    fn backward(&self, p: &Params, t: &Trace, g: f64, grad: &mut Params) {
        let h = p.hidden;
        let agg = 1.0 / self.arity as f64;
        grad.b4[0] += g;
        let mut gpre3 = vec![0.0; h];
        for r in 0..h {
            let d = relu(t.pre3[r]);
            grad.w4[r] += g * d;
            gpre3[r] = if t.pre3[r] > 0.0 { g * p.w4[r] } else { 0.0 };
        }
        let mut gpool = vec![0.0; h];
        for r in 0..h {
            if gpre3[r] == 0.0 {
                continue;
            }
            grad.b3[r] += gpre3[r];
            for c in 0..h {
                grad.w3[r * h + c] += gpre3[r] * t.pooled[c];
                gpool[c] += gpre3[r] * p.w3[r * h + c];
            }
        }
        let ge: Vec<f64> = gpool.iter().map(|v| agg * v).collect();
        let mut gpre2 = vec![0.0; h];
        let mut ga1 = vec![0.0; h];
        for ((ui, z1), z2) in t.u.iter().zip(&t.pre1).zip(&t.pre2) {
            for r in 0..h {
                gpre2[r] = if z2[r] > 0.0 { ge[r] } else { 0.0 };
            }
            ga1.iter_mut().for_each(|v| *v = 0.0);
            for r in 0..h {
                if gpre2[r] == 0.0 {
                    continue;
                }
                grad.b2[r] += gpre2[r];
                for c in 0..h {
                    grad.w2[r * h + c] += gpre2[r] * relu(z1[c]);
                    ga1[c] += gpre2[r] * p.w2[r * h + c];
                }
            }
            for r in 0..h {
                if z1[r] > 0.0 {
                    grad.w1[r] += ga1[r] * ui;
                    grad.b1[r] += ga1[r];
                }
            }
        }
    }

    /// Predicted quantile `Q̂` for one task's leave-one-out scores.
    pub fn predict_quantile(&self, loo_scores: &[f64]) -> Result<f64> {
        self.check_input(loo_scores)?;
        Ok(self.output.invert(self.forward(&self.params, loo_scores)))
    }

    /// Mean squared error in the original target units.
    pub fn mse(&self, dataset: &[QuantileTrainingExample]) -> Result<f64> {
        let mut total = 0.0;
        for ex in dataset {
            total += (self.predict_quantile(&ex.loo_scores)? - ex.target).powi(2);
        }
        Ok(total / dataset.len().max(1) as f64)
    }

    /// Loss in standardized units and its gradient, averaged over `batch`.
    fn loss_and_grad(&self, p: &Params, batch: &[&QuantileTrainingExample]) -> (f64, Params) {
        let mut grad = Params::zeros(p.hidden);
        let mut loss = 0.0;
        let n = batch.len() as f64;
        for ex in batch {
            let t = self.trace(p, &ex.loo_scores);
            let err = t.out - self.output.apply(ex.target);
            loss += err * err / n;
            self.backward(p, &t, 2.0 * err / n, &mut grad);
        }
        (loss, grad)
    }

    fn standardized_loss(&self, p: &Params, dataset: &[QuantileTrainingExample]) -> f64 {
        dataset
            .iter()
            .map(|ex| (self.forward(p, &ex.loo_scores) - self.output.apply(ex.target)).powi(2))
            .sum::<f64>()
            / dataset.len() as f64
    }

    pub fn save<W: Write>(&self, out: &mut W) -> Result<()> {
        writeln!(out, "arity 1x1 {}", self.arity)?;
        writeln!(out, "variable_arity 1x1 {}", u8::from(self.variable_arity))?;
        writeln!(out, "input_shift 1x1 {}", self.input.shift)?;
        writeln!(out, "input_scale 1x1 {}", self.input.scale)?;
        writeln!(out, "output_shift 1x1 {}", self.output.shift)?;
        writeln!(out, "output_scale 1x1 {}", self.output.scale)?;
        for ((name, (r, c)), values) in PARAM_NAMES.iter().zip(self.params.shapes()).zip(self.params.groups()) {
            write!(out, "{name} {r}x{c}")?;
            for v in values {
                write!(out, " {v}")?;
            }
            writeln!(out)?;
        }
        Ok(())
    }

    pub fn load<R: BufRead>(input: R) -> Result<Self> {
        let mut entries: Vec<(String, usize, usize, Vec<f64>, usize)> = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            let perr = |msg: String| Error::Parse { line: i + 1, msg };
            let mut parts = line.split_whitespace();
            let Some(name) = parts.next() else { continue };
            let shape = parts.next().ok_or_else(|| perr("missing shape".into()))?;
            let (r, c) = shape
                .split_once('x')
                .and_then(|(r, c)| Some((r.parse::<usize>().ok()?, c.parse::<usize>().ok()?)))
                .ok_or_else(|| perr(format!("bad shape `{shape}`")))?;
            let values = parts
                .map(|v| v.parse::<f64>().map_err(|e| perr(format!("`{v}`: {e}"))))
                .collect::<Result<Vec<f64>>>()?;
            if values.len() != r * c {
                return Err(perr(format!("{name}: expected {} values, got {}", r * c, values.len())));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(perr(format!("{name}: non-finite value")));
            }
            entries.push((name.to_string(), r, c, values, i + 1));
        }
        let take = |name: &str| -> Result<&(String, usize, usize, Vec<f64>, usize)> {
            entries.iter().find(|e| e.0 == name).ok_or_else(|| Error::Parse {
                line: 0,
                msg: format!("missing entry `{name}`"),
            })
        };
        let scalar = |name: &str| -> Result<f64> { Ok(take(name)?.3[0]) };
        let hidden = take("w1")?.1;
        let mut params = Params::zeros(hidden);
        let shapes = params.shapes();
        for ((name, group), (r, c)) in PARAM_NAMES.iter().zip(params.groups_mut()).zip(shapes) {
            let e = take(name)?;
            if (e.1, e.2) != (r, c) {
                return Err(Error::Parse {
                    line: e.4,
                    msg: format!("{name}: shape {}x{} != {r}x{c}", e.1, e.2),
                });
            }
            group.copy_from_slice(&e.3);
        }
        let arity = scalar("arity")?;
        if arity < 1.0 || arity.fract() != 0.0 {
            return Err(Error::Parse {
                line: take("arity")?.4,
                msg: format!("bad arity {arity}"),
            });
        }
        Ok(SetRegressor {
            params,
            arity: arity as usize,
            variable_arity: scalar("variable_arity")? != 0.0,
            input: Standardizer {
                shift: scalar("input_shift")?,
                scale: scalar("input_scale")?,
            },
            output: Standardizer {
                shift: scalar("output_shift")?,
                scale: scalar("output_scale")?,
            },
        })
    }
}

/// Per-epoch training MSE in original target units; index 0 is before any
/// update.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingHistory {
    pub mse: Vec<f64>,
    pub best_epoch: usize,
}

pub fn train_set_regressor(dataset: &[QuantileTrainingExample], config: &TrainConfig) -> Result<SetRegressor> {
    train_set_regressor_with_history(dataset, config).map(|(m, _)| m)
}

/// Mini-batch training of the squared error to the targets. Returns the
/// parameters of the epoch with the lowest full-dataset loss, so the final
/// training MSE never exceeds the initial one.
pub fn train_set_regressor_with_history(
    dataset: &[QuantileTrainingExample],
    config: &TrainConfig,
) -> Result<(SetRegressor, TrainingHistory)> {
    if dataset.len() < MIN_TRAINING_EXAMPLES {
        return Err(Error::arg(format!(
            "set regressor needs at least {MIN_TRAINING_EXAMPLES} training examples, got {}",
            dataset.len()
        )));
    }
    if config.hidden == 0 || config.batch == 0 {
        return Err(Error::Config("hidden and batch must be positive".into()));
    }
    if !(config.step_size > 0.0 && config.step_size.is_finite()) {
        return Err(Error::Config(format!(
            "step_size must be positive, got {}",
            config.step_size
        )));
    }
    let arity = dataset[0].loo_scores.len();
    if arity == 0 {
        return Err(Error::arg("training examples have no scores"));
    }
    for ex in dataset {
        if !config.variable_arity && ex.loo_scores.len() != arity {
            return Err(Error::arg(format!(
                "mixed input sizes {} and {}; enable variable_arity",
                arity,
                ex.loo_scores.len()
            )));
        }
        if !ex.target.is_finite() || ex.loo_scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("training example".into()));
        }
    }
    let mut model = SetRegressor {
        params: Params::init(config.hidden, config.seed),
        arity,
        variable_arity: config.variable_arity,
        input: Standardizer::fit(dataset.iter().flat_map(|e| e.loo_scores.iter())),
        output: Standardizer::fit(dataset.iter().map(|e| &e.target)),
    };
    let to_original = model.output.scale.powi(2);
    let mut loss = model.standardized_loss(&model.params, dataset);
    let mut history = TrainingHistory {
        mse: vec![loss * to_original],
        best_epoch: 0,
    };
    let mut best = (loss, model.params.clone());
    let mut params = model.params.clone();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut adam = (Params::zeros(config.hidden), Params::zeros(config.hidden), 0i32);
    for epoch in 1..=config.epochs {
        let mut rng = rng::stream(config.seed, &[purpose::SHUFFLE, epoch as u64]);
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let batch: Vec<&QuantileTrainingExample> = chunk.iter().map(|&i| &dataset[i]).collect();
            let (_, mut grad) = model.loss_and_grad(&params, &batch);
            match config.optimizer {
                Optimizer::Sgd => {
                    let norm = grad.norm_sq().sqrt();
                    if norm > GRAD_CLIP {
                        let s = GRAD_CLIP / norm;
                        grad.groups_mut()
                            .into_iter()
                            .flat_map(|g| g.iter_mut())
                            .for_each(|v| *v *= s);
                    }
                    params.axpy(-config.step_size, &grad);
                }
                Optimizer::Adam => adam_step(&mut params, &grad, &mut adam, config.step_size),
            }
        }
        loss = model.standardized_loss(&params, dataset);
        if !loss.is_finite() {
            return Err(Error::TrainingDiverged { epoch, loss });
        }
        history.mse.push(loss * to_original);
        if loss < best.0 {
            best = (loss, params.clone());
            history.best_epoch = epoch;
        }
    }
    model.params = best.1;
    Ok((model, history))
}

fn adam_step(params: &mut Params, grad: &Params, state: &mut (Params, Params, i32), lr: f64) {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    state.2 += 1;
    let c1 = 1.0 - B1.powi(state.2);
    let c2 = 1.0 - B2.powi(state.2);
    let (m, v, _) = state;
    for (((p, g), m), v) in params
        .groups_mut()
        .into_iter()
        .zip(grad.groups())
        .zip(m.groups_mut())
        .zip(v.groups_mut())
    {
        for i in 0..p.len() {
            m[i] = B1 * m[i] + (1.0 - B1) * g[i];
            v[i] = B2 * v[i] + (1.0 - B2) * g[i] * g[i];
            p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + EPS);
        }
    }
}

impl SetRegressor {
    /// All parameters flattened in save order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params.groups().iter().flat_map(|g| g.iter().copied()).collect()
    }

    fn with_flat(&self, theta: &[f64]) -> Result<Params> {
        let mut p = self.params.clone();
        let total: usize = p.groups().iter().map(|g| g.len()).sum();
        if theta.len() != total {
            return Err(Error::arg(format!("expected {total} parameters, got {}", theta.len())));
        }
        let mut offset = 0;
        for g in p.groups_mut() {
            let n = g.len();
            g.copy_from_slice(&theta[offset..offset + n]);
            offset += n;
        }
        Ok(p)
    }

    /// Mean squared error of `batch` in standardized target units, evaluated
    /// at the flattened parameters `theta`.
    pub fn batch_loss_at(&self, batch: &[QuantileTrainingExample], theta: &[f64]) -> Result<f64> {
        let p = self.with_flat(theta)?;
        let refs: Vec<&QuantileTrainingExample> = batch.iter().collect();
        Ok(self.loss_and_grad(&p, &refs).0)
    }

    /// Analytic gradient of [`Self::batch_loss_at`] at the current parameters.
    pub fn batch_gradient(&self, batch: &[QuantileTrainingExample]) -> Vec<f64> {
        let refs: Vec<&QuantileTrainingExample> = batch.iter().collect();
        let (_, grad) = self.loss_and_grad(&self.params, &refs);
        grad.groups().iter().flat_map(|g| g.iter().copied()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dataset(n: usize, k: usize, seed: u64) -> Vec<QuantileTrainingExample> {
        let mut rng = rng::stream(seed, &[1]);
        (0..n)
            .map(|_| {
                let mu: f64 = rng.random_range(-2.0..2.0);
                let loo: Vec<f64> = (0..k).map(|_| mu + rng.random::<f64>()).collect();
                QuantileTrainingExample {
                    loo_scores: loo,
                    target: mu + 0.8,
                }
            })
            .collect()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            hidden: 8,
            epochs: 30,
            ..Default::default()
        }
    }

    #[test]
    fn permutation_gives_identical_bits() {
        let data = dataset(60, 6, 0);
        let m = train_set_regressor(&data, &small_config()).unwrap();
        let mut s = data[0].loo_scores.clone();
        let a = m.predict_quantile(&s).unwrap();
        s.reverse();
        assert_eq!(a.to_bits(), m.predict_quantile(&s).unwrap().to_bits());
        assert!(m.predict_quantile(&s[..5]).is_err());
    }

    #[test]
    fn forward_matches_trace() {
        let data = dataset(60, 6, 2);
        let m = train_set_regressor(&data, &small_config()).unwrap();
        for ex in &data {
            let t = m.trace(&m.params, &ex.loo_scores);
            assert_eq!(t.out.to_bits(), m.forward(&m.params, &ex.loo_scores).to_bits());
        }
    }

    #[test]
    fn training_is_deterministic_and_never_worse() {
        let data = dataset(60, 6, 1);
        let (a, hist) = train_set_regressor_with_history(&data, &small_config()).unwrap();
        let b = train_set_regressor(&data, &small_config()).unwrap();
        assert_eq!(a, b);
        assert!(a.mse(&data).unwrap() <= hist.mse[0] * (1.0 + 1e-12));
        assert!(hist.mse[hist.best_epoch] < hist.mse[0]);
    }

    #[test]
    fn rejects_small_datasets() {
        assert!(train_set_regressor(&dataset(49, 4, 0), &small_config()).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let data = dataset(60, 5, 2);
        let m = train_set_regressor(&data, &small_config()).unwrap();
        let mut buf = Vec::new();
        m.save(&mut buf).unwrap();
        let back = SetRegressor::load(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let text = String::from_utf8(buf).unwrap().replace("w2 8x8", "w2 8x7");
        assert!(matches!(SetRegressor::load(text.as_bytes()), Err(Error::Parse { .. })));
    }

    #[test]
    fn variable_arity_accepts_other_sizes() {
        let mut data = dataset(30, 4, 3);
        data.extend(dataset(30, 6, 4));
        assert!(train_set_regressor(&data, &small_config()).is_err());
        let cfg = TrainConfig {
            variable_arity: true,
            ..small_config()
        };
        let m = train_set_regressor(&data, &cfg).unwrap();
        assert!(m.predict_quantile(&[0.1, 0.2, 0.3]).is_ok());
    }
}
