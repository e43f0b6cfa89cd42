use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use super::baselines::{naive_baseline, top_k_baseline};
use super::config::{ExperimentConfig, MethodSet, RunMode};
use super::results::{
    summarize, write_conditional, write_results, write_summary, ConditionalResult, Method, TrialResult,
};
use crate::calibration::{
    epsilon_adjust, lambda_correction, meta_cp_classify, meta_cp_interval, CalibrationRecord, Correction,
    EpsilonAdjustment,
};
use crate::conformal::{full_cp_classify, split_cp_interval, PredictionSet, ScoreSample};
use crate::error::{Error, Result};
use crate::models::{
    Example, FeatureVector, Label, PrototypeFamily, PrototypeScorer, RidgeFamily, RidgeScorer, Scorer, ScorerFamily,
};
use crate::quantile::{crossfold_scores, train_set_regressor, SetRegressor, TaskScores};
use crate::rng::{self, derive_seed, purpose, SimRng};
use crate::simulator::{
    sample_classification_task, sample_regression_task, write_episode, ClassificationTask, Episode, RegressionTask,
    TaskDistributionConfig, TaskKind, TaskSampler,
};

/// Domain-specific pieces of the pipeline.
trait Domain: Sync {
    type Label: Clone + Send + Sync + std::fmt::Display;
    type Family: ScorerFamily<Label = Self::Label, Scorer = Self::Scorer>;
    type Scorer: Scorer<Self::Label> + Send + Sync;
    type Task: TaskSampler<Label = Self::Label>;

    fn family(&self) -> &Self::Family;

    fn task(&self, id: u64) -> Result<Self::Task>;

    fn covers(set: &PredictionSet, y: &Self::Label) -> bool;

    fn meta_set(
        &self,
        scorer: &Self::Scorer,
        x: &FeatureVector,
        q_hat: f64,
        correction: &Correction,
    ) -> Result<PredictionSet>;

    /// Non-meta methods at one significance level.
    fn reference_sets(
        &self,
        support: &[Example<Self::Label>],
        scorer: &Self::Scorer,
        x: &FeatureVector,
        epsilon: f64,
        want_full: bool,
        want_baselines: bool,
    ) -> Result<Vec<(Method, PredictionSet)>>;
}

struct ClassificationDomain {
    tasks: TaskDistributionConfig,
    family: PrototypeFamily,
    full_cp: crate::conformal::FullCpMode,
    top_k: Vec<usize>,
    candidates: Vec<Label>,
}

impl Domain for ClassificationDomain {
    type Label = Label;
    type Family = PrototypeFamily;
    type Scorer = PrototypeScorer;
    type Task = ClassificationTask;

    fn family(&self) -> &PrototypeFamily {
        &self.family
    }

    fn task(&self, id: u64) -> Result<ClassificationTask> {
        sample_classification_task(&self.tasks, id)
    }

    fn covers(set: &PredictionSet, y: &Label) -> bool {
        set.contains_label(*y)
    }

    fn meta_set(
        &self,
        scorer: &PrototypeScorer,
        x: &FeatureVector,
        q_hat: f64,
        correction: &Correction,
    ) -> Result<PredictionSet> {
        meta_cp_classify(x, &self.candidates, scorer, q_hat, correction)
    }

    fn reference_sets(
        &self,
        support: &[Example<Label>],
        scorer: &PrototypeScorer,
        x: &FeatureVector,
        epsilon: f64,
        want_full: bool,
        want_baselines: bool,
    ) -> Result<Vec<(Method, PredictionSet)>> {
        let mut out = Vec::new();
        if want_full {
            let set = full_cp_classify(
                x,
                &self.candidates,
                support,
                |s: &[Example<Label>]| self.family.fit(s),
                epsilon,
                self.full_cp,
            )?;
            out.push((Method::FullCp, set));
        }
        if want_baselines {
            // model labels are all classes because the support is balanced
            let probs = scorer.probs(x)?;
            let relabel = |set: PredictionSet| -> PredictionSet {
                let labels = set
                    .labels()
                    .unwrap_or_default()
                    .iter()
                    .map(|&i| scorer.model().labels()[i])
                    .collect();
                PredictionSet::from_labels(labels, set.level)
            };
            out.push((Method::Naive, relabel(naive_baseline(&probs, epsilon)?)));
            for &k in &self.top_k {
                out.push((Method::TopK(k), relabel(top_k_baseline(&probs, k)?)));
            }
        }
        Ok(out)
    }
}

struct RegressionDomain {
    tasks: TaskDistributionConfig,
    family: RidgeFamily,
}

impl Domain for RegressionDomain {
    type Label = f64;
    type Family = RidgeFamily;
    type Scorer = RidgeScorer;
    type Task = RegressionTask;

    fn family(&self) -> &RidgeFamily {
        &self.family
    }

    fn task(&self, id: u64) -> Result<RegressionTask> {
        sample_regression_task(&self.tasks, id)
    }

    fn covers(set: &PredictionSet, y: &f64) -> bool {
        set.contains_value(*y)
    }

    fn meta_set(
        &self,
        scorer: &RidgeScorer,
        x: &FeatureVector,
        q_hat: f64,
        correction: &Correction,
    ) -> Result<PredictionSet> {
        meta_cp_interval(scorer.predict(x)?, q_hat, correction)
    }

    /// Split conformal on the support: fit on the first half, calibrate on
    /// the second.
    fn reference_sets(
        &self,
        support: &[Example<f64>],
        _scorer: &RidgeScorer,
        x: &FeatureVector,
        epsilon: f64,
        want_full: bool,
        _want_baselines: bool,
    ) -> Result<Vec<(Method, PredictionSet)>> {
        if !want_full {
            return Ok(Vec::new());
        }
        let half = support.len() / 2;
        let fit = self.family.fit(&support[..half])?;
        let residuals = support[half..]
            .iter()
            .map(|e| fit.score(&e.x, &e.y))
            .collect::<Result<Vec<f64>>>()?;
        let set = split_cp_interval(fit.predict(x)?, &ScoreSample::new(residuals)?, epsilon)?;
        Ok(vec![(Method::SplitCp, set)])
    }
}

/// Quantile levels to train for, and which ε uses which.
struct Levels {
    betas: Vec<f64>,
    /// Per ε: index into `betas` for the plain level.
    plain: Vec<usize>,
    /// Per ε: adjusted level or the reason it is infeasible.
    adjusted: Vec<std::result::Result<(EpsilonAdjustment, usize), String>>,
}

impl Levels {
    fn new(cfg: &ExperimentConfig, with_plain: bool, with_adjusted: bool) -> Self {
        let mut betas: Vec<f64> = Vec::new();
        let index_of = |beta: f64, betas: &mut Vec<f64>| match betas.iter().position(|b| b.to_bits() == beta.to_bits())
        {
            Some(i) => i,
            None => {
                betas.push(beta);
                betas.len() - 1
            }
        };
        let l = cfg.n_cal_tasks;
        let cap = l as f64 / (l as f64 + 1.0);
        let mut plain = Vec::new();
        let mut adjusted = Vec::new();
        for &eps in &cfg.epsilons {
            plain.push(if with_plain {
                index_of(1.0 - eps, &mut betas)
            } else {
                usize::MAX
            });
            if !with_adjusted {
                adjusted.push(Err("not requested".to_string()));
                continue;
            }
            adjusted.push(match epsilon_adjust(eps, cfg.delta, &vec![cfg.m; l]) {
                Ok(adj) if 1.0 - adj.epsilon_prime > cap => Err(format!(
                    "level 1 − ε′ = {:.4} exceeds l/(l+1) = {cap:.4}",
                    1.0 - adj.epsilon_prime
                )),
                Ok(adj) => Ok((adj, index_of(1.0 - adj.epsilon_prime, &mut betas))),
                Err(e) => Err(e.to_string()),
            });
        }
        Levels { betas, plain, adjusted }
    }

    fn all_adjusted_infeasible(&self) -> bool {
        self.adjusted.iter().all(|a| a.is_err())
    }
}

struct Trained<F> {
    family: F,
    regressors: Vec<SetRegressor>,
}

fn train_episodes<D: Domain>(d: &D, cfg: &ExperimentConfig) -> Result<Vec<Episode<D::Label>>> {
    (0..cfg.n_train_tasks as u64)
        .into_par_iter()
        .map(|id| Ok(d.task(id)?.sample_episode(cfg.k, 0, cfg.m, 0)))
        .collect()
}

fn train<D: Domain>(d: &D, cfg: &ExperimentConfig, betas: &[f64]) -> Result<Trained<D::Family>> {
    let episodes = train_episodes(d, cfg)?;
    let (family, scores) = crossfold_scores(&episodes, d.family(), cfg.k_folds)?;
    let train_cfg = cfg.train_config();
    let regressors = betas
        .par_iter()
        .map(|&beta| {
            let dataset = scores
                .iter()
                .map(|s| s.training_example(beta))
                .collect::<Result<Vec<_>>>()?;
            train_set_regressor(&dataset, &train_cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Trained { family, regressors })
}

struct PoolTask<D: Domain> {
    task: D::Task,
    support: Vec<Example<D::Label>>,
    scorer: D::Scorer,
    /// Predicted quantile per trained level.
    q_hats: Vec<f64>,
}

fn q_hats(regressors: &[SetRegressor], loo: &[f64]) -> Result<Vec<f64>> {
    regressors.iter().map(|r| r.predict_quantile(loo)).collect()
}

fn build_task<D: Domain>(
    d: &D,
    trained: &Trained<D::Family>,
    id: u64,
    m: usize,
    k: usize,
) -> Result<(PoolTask<D>, Vec<f64>)> {
    let task = d.task(id)?;
    let ep = task.sample_episode(k, 0, m, 0);
    let scores = TaskScores::compute(&trained.family, &ep.support, &ep.extra)?;
    let scorer = trained.family.fit(&ep.support)?;
    Ok((
        PoolTask {
            task,
            support: ep.support,
            scorer,
            q_hats: q_hats(&trained.regressors, &scores.loo)?,
        },
        scores.test,
    ))
}

/// Outcome of a marginal run.
#[derive(Debug, Clone)]
pub struct MarginalOutcome {
    pub rows: Vec<TrialResult>,
    /// Every requested (δ, ε) pair was infeasible.
    pub all_adjusted_infeasible: bool,
}

fn selection(methods: MethodSet) -> (bool, bool, bool) {
    let meta = matches!(methods, MethodSet::All | MethodSet::Meta);
    let full = matches!(methods, MethodSet::All | MethodSet::Full);
    let baselines = matches!(methods, MethodSet::All | MethodSet::Baselines);
    (meta, full, baselines)
}

fn run_marginal_in<D: Domain>(d: &D, cfg: &ExperimentConfig) -> Result<MarginalOutcome> {
    let (want_meta, want_full, want_baselines) = selection(cfg.methods);
    let levels = Levels::new(cfg, want_meta, want_meta);
    let trained = train(d, cfg, &levels.betas)?;
    let n_pool = cfg.n_cal_tasks + cfg.n_test_tasks;
    let first_pool_id = cfg.n_train_tasks as u64;
    let built = (0..n_pool as u64)
        .into_par_iter()
        .map(|i| build_task(d, &trained, first_pool_id + i, cfg.m, cfg.k))
        .collect::<Result<Vec<_>>>()?;
    let mut pool = Vec::with_capacity(n_pool);
    let mut records: Vec<Vec<CalibrationRecord>> = vec![Vec::with_capacity(n_pool); levels.betas.len()];
    for (task, test) in built {
        let base = CalibrationRecord::new(0.0, ScoreSample::new(test)?)?;
        for (b, recs) in records.iter_mut().enumerate() {
            recs.push(base.with_q_hat(task.q_hats[b])?);
        }
        pool.push(task);
    }
    let trial_rows = (0..cfg.n_trials as u64)
        .into_par_iter()
        .map(|t| {
            run_trial(
                d,
                cfg,
                &levels,
                &pool,
                &records,
                t,
                (want_meta, want_full, want_baselines),
            )
        })
        .collect::<Result<Vec<Vec<TrialResult>>>>()?;
    Ok(MarginalOutcome {
        rows: trial_rows.into_iter().flatten().collect(),
        all_adjusted_infeasible: want_meta && levels.all_adjusted_infeasible(),
    })
}

/// Running coverage and size totals per method, in first-seen order.
#[derive(Default)]
struct Tally {
    entries: Vec<(Method, f64, f64)>,
}

impl Tally {
    fn add(&mut self, method: Method, covered: bool, size: f64) {
        let entry = match self.entries.iter().position(|e| e.0 == method) {
            Some(i) => &mut self.entries[i],
            None => {
                self.entries.push((method, 0.0, 0.0));
                self.entries.last_mut().expect("just pushed")
            }
        };
        entry.1 += if covered { 1.0 } else { 0.0 };
        entry.2 += size;
    }
}

/// `Λ` per trained level from the chosen calibration tasks; `None` where the
/// level is not attainable with this many tasks.
fn corrections_for(
    betas: &[f64],
    records: &[Vec<CalibrationRecord>],
    cal: &[usize],
) -> Result<Vec<Option<Correction>>> {
    betas
        .iter()
        .zip(records)
        .map(
            |(&beta, recs)| match lambda_correction(beta, cal.iter().map(|&i| &recs[i])) {
                Ok(c) => Ok(Some(c)),
                Err(Error::InfeasibleCorrection { .. }) => Ok(None),
                Err(e) => Err(e),
            },
        )
        .collect()
}

#[allow(clippy::too_many_arguments)]
fn run_trial<D: Domain>(
    d: &D,
    cfg: &ExperimentConfig,
    levels: &Levels,
    pool: &[PoolTask<D>],
    records: &[Vec<CalibrationRecord>],
    trial_id: u64,
    (want_meta, want_full, want_baselines): (bool, bool, bool),
) -> Result<Vec<TrialResult>> {
    let seed = derive_seed(cfg.seed, &[purpose::TRIAL, trial_id]);
    let mut rng: SimRng = rng::stream(cfg.seed, &[purpose::TRIAL, trial_id]);
    let target = rng.random_range(0..pool.len());
    let cal: Vec<usize> = index::sample(&mut rng, pool.len() - 1, cfg.n_cal_tasks)
        .into_iter()
        .map(|i| if i >= target { i + 1 } else { i })
        .collect();
    let tgt = &pool[target];
    let queries: Vec<Example<D::Label>> = (0..cfg.q).map(|_| tgt.task.draw(&mut rng)).collect();
    let corrections = if want_meta {
        corrections_for(&levels.betas, records, &cal)?
    } else {
        Vec::new()
    };
    let n = queries.len() as f64;
    let blank = |method: Method, epsilon: f64| TrialResult {
        trial_id,
        method,
        epsilon,
        epsilon_prime: None,
        covered: None,
        set_size: None,
        q_hat: None,
        lambda: None,
        seed,
        infeasible: false,
    };
    let mut rows = Vec::new();
    for (e, &eps) in cfg.epsilons.iter().enumerate() {
        let mut reference = Tally::default();
        let mut meta = Tally::default();
        // (method, level index, ε′) for each meta variant that is attainable
        let mut variants: Vec<(Method, Option<usize>, Option<f64>)> = Vec::new();
        if want_meta {
            let plain = levels.plain[e];
            variants.push((Method::MetaCp, corrections[plain].map(|_| plain), None));
            match &levels.adjusted[e] {
                Ok((adj, b)) => variants.push((
                    Method::MetaCpDelta,
                    corrections[*b].map(|_| *b),
                    Some(adj.epsilon_prime),
                )),
                Err(_) => variants.push((Method::MetaCpDelta, None, None)),
            }
        }
        for q in &queries {
            for (method, set) in d.reference_sets(&tgt.support, &tgt.scorer, &q.x, eps, want_full, want_baselines)? {
                reference.add(method, D::covers(&set, &q.y), set.size());
            }
            for &(method, level, _) in &variants {
                if let Some(b) = level {
                    let c = corrections[b].as_ref().expect("attainable level has a correction");
                    let set = d.meta_set(&tgt.scorer, &q.x, tgt.q_hats[b], c)?;
                    meta.add(method, D::covers(&set, &q.y), set.size());
                }
            }
        }
        let mut reference = reference.entries.into_iter();
        let full_methods = |m: &Method| matches!(m, Method::FullCp | Method::SplitCp);
        let mut finished = |(method, cov, size): (Method, f64, f64)| TrialResult {
            covered: Some(cov / n),
            set_size: Some(size / n),
            ..blank(method, eps)
        };
        let (full, others): (Vec<_>, Vec<_>) = reference.by_ref().partition(|(m, _, _)| full_methods(m));
        rows.extend(full.into_iter().map(&mut finished));
        for (method, level, eps_prime) in variants {
            match level {
                Some(b) => {
                    let (_, cov, size) = *meta.entries.iter().find(|x| x.0 == method).expect("tallied");
                    rows.push(TrialResult {
                        epsilon_prime: eps_prime,
                        q_hat: Some(tgt.q_hats[b]),
                        lambda: corrections[b].map(|c| c.lambda),
                        ..finished((method, cov, size))
                    });
                }
                None => rows.push(TrialResult {
                    infeasible: true,
                    ..blank(method, eps)
                }),
            }
        }
        rows.extend(others.into_iter().map(&mut finished));
    }
    Ok(rows)
}

/// Outcome of a conditional run.
#[derive(Debug, Clone)]
pub struct ConditionalOutcome {
    pub rows: Vec<ConditionalResult>,
    pub all_adjusted_infeasible: bool,
}

/// Two-level Monte Carlo: each outer resample draws fresh calibration tasks
/// and fixes `Λ′`; its inner trials draw fresh target tasks.
fn run_conditional_in<D: Domain>(d: &D, cfg: &ExperimentConfig) -> Result<ConditionalOutcome> {
    let levels = Levels::new(cfg, false, true);
    let trained = train(d, cfg, &levels.betas)?;
    let feasible: Vec<(usize, EpsilonAdjustment, usize)> = levels
        .adjusted
        .iter()
        .enumerate()
        .filter_map(|(e, a)| a.as_ref().ok().map(|(adj, b)| (e, *adj, *b)))
        .collect();
    let per_resample = (0..cfg.outer_resamples as u64)
        .into_par_iter()
        .map(|r| {
            let mut base = Vec::with_capacity(cfg.n_cal_tasks);
            for j in 0..cfg.n_cal_tasks as u64 {
                let id = derive_seed(cfg.seed, &[purpose::OUTER, r, j]);
                let (task, test) = build_task(d, &trained, id, cfg.m, cfg.k)?;
                base.push((task.q_hats, CalibrationRecord::new(0.0, ScoreSample::new(test)?)?));
            }
            let mut corrections = Vec::with_capacity(feasible.len());
            for &(_, _, b) in &feasible {
                let recs = base
                    .iter()
                    .map(|(q, rec)| rec.with_q_hat(q[b]))
                    .collect::<Result<Vec<_>>>()?;
                corrections.push(lambda_correction(levels.betas[b], &recs)?);
            }
            let mut covered = vec![0usize; feasible.len()];
            let mut size = vec![0.0; feasible.len()];
            for t in 0..cfg.inner_trials as u64 {
                let id = derive_seed(cfg.seed, &[purpose::INNER, r, t]);
                let ep = d.task(id)?.sample_episode(cfg.k, 1, 0, 0);
                let loo = trained.family.loo_scores(&ep.support)?;
                let scorer = trained.family.fit(&ep.support)?;
                let q = q_hats(&trained.regressors, loo.values())?;
                let query = &ep.query[0];
                for (i, &(_, _, b)) in feasible.iter().enumerate() {
                    let set = d.meta_set(&scorer, &query.x, q[b], &corrections[i])?;
                    covered[i] += usize::from(D::covers(&set, &query.y));
                    size[i] += set.size();
                }
            }
            let n = cfg.inner_trials as f64;
            Ok(feasible
                .iter()
                .zip(&corrections)
                .enumerate()
                .map(|(i, ((e, adj, _), c))| ConditionalResult {
                    resample_id: r,
                    epsilon: cfg.epsilons[*e],
                    epsilon_prime: adj.epsilon_prime,
                    lambda: c.lambda,
                    coverage: covered[i] as f64 / n,
                    mean_set_size: size[i] / n,
                    n_inner: cfg.inner_trials,
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ConditionalOutcome {
        rows: per_resample.into_iter().flatten().collect(),
        all_adjusted_infeasible: feasible.is_empty(),
    })
}

fn classification_domain(cfg: &ExperimentConfig) -> Result<ClassificationDomain> {
    Ok(ClassificationDomain {
        tasks: cfg.task_config(),
        family: cfg.prototype_family()?,
        full_cp: cfg.full_cp.into(),
        top_k: cfg.top_k.clone(),
        candidates: (0..cfg.n_ways).collect(),
    })
}

fn regression_domain(cfg: &ExperimentConfig) -> Result<RegressionDomain> {
    Ok(RegressionDomain {
        tasks: cfg.task_config(),
        family: cfg.ridge_family()?,
    })
}

/// Trial rows for the marginal experiment described by `cfg`.
pub fn run_marginal(cfg: &ExperimentConfig) -> Result<MarginalOutcome> {
    cfg.validate()?;
    match cfg.domain {
        TaskKind::Classification => run_marginal_in(&classification_domain(cfg)?, cfg),
        TaskKind::Regression => run_marginal_in(&regression_domain(cfg)?, cfg),
    }
}

/// Per-resample rows for the (δ, ε) experiment described by `cfg`.
pub fn run_conditional(cfg: &ExperimentConfig) -> Result<ConditionalOutcome> {
    cfg.validate()?;
    match cfg.domain {
        TaskKind::Classification => run_conditional_in(&classification_domain(cfg)?, cfg),
        TaskKind::Regression => run_conditional_in(&regression_domain(cfg)?, cfg),
    }
}

pub const RESULTS_FILE: &str = "results.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const CONDITIONAL_FILE: &str = "conditional.csv";
pub const EPISODES_FILE: &str = "episodes.csv";

/// Files written by [`run`].
#[derive(Debug, Clone)]
pub struct RunReport {
    pub files: Vec<PathBuf>,
    pub all_adjusted_infeasible: bool,
}

fn create(dir: &Path, name: &str) -> Result<(PathBuf, BufWriter<File>)> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let file = File::create(&path)?;
    Ok((path, BufWriter::new(file)))
}

/// Runs the configured mode and writes its CSV files into `out_dir`.
pub fn run(cfg: &ExperimentConfig, out_dir: &Path) -> Result<RunReport> {
    match cfg.mode {
        RunMode::Marginal => {
            let outcome = run_marginal(cfg)?;
            let (results_path, w) = create(out_dir, RESULTS_FILE)?;
            write_results(w, &outcome.rows)?;
            let (summary_path, w) = create(out_dir, SUMMARY_FILE)?;
            write_summary(w, &summarize(&outcome.rows))?;
            Ok(RunReport {
                files: vec![results_path, summary_path],
                all_adjusted_infeasible: outcome.all_adjusted_infeasible,
            })
        }
        RunMode::Conditional => {
            let outcome = run_conditional(cfg)?;
            let (path, w) = create(out_dir, CONDITIONAL_FILE)?;
            write_conditional(w, &outcome.rows)?;
            Ok(RunReport {
                files: vec![path],
                all_adjusted_infeasible: outcome.all_adjusted_infeasible,
            })
        }
    }
}

fn simulate_in<D: Domain>(d: &D, cfg: &ExperimentConfig, out: &mut impl Write) -> Result<()> {
    let total = cfg.n_train_tasks + cfg.n_cal_tasks + cfg.n_test_tasks;
    for id in 0..total as u64 {
        let ep = d.task(id)?.sample_episode(cfg.k, cfg.q, cfg.m, 0);
        write_episode(out, &ep)?;
    }
    Ok(())
}

/// Writes the training and pool episodes (task ids in that order) to
/// `out_dir/episodes.csv`.
pub fn simulate(cfg: &ExperimentConfig, out_dir: &Path) -> Result<PathBuf> {
    cfg.validate()?;
    let (path, mut w) = create(out_dir, EPISODES_FILE)?;
    match cfg.domain {
        TaskKind::Classification => simulate_in(&classification_domain(cfg)?, cfg, &mut w)?,
        TaskKind::Regression => simulate_in(&regression_domain(cfg)?, cfg, &mut w)?,
    }
    w.flush()?;
    Ok(path)
}

/// Cross-fold trains one quantile predictor per level used by the configured
/// ε list (and δ adjustment) and returns them with their levels.
pub fn train_quantile_predictors(cfg: &ExperimentConfig) -> Result<Vec<(f64, SetRegressor)>> {
    cfg.validate()?;
    let levels = Levels::new(cfg, true, true);
    let regressors = match cfg.domain {
        TaskKind::Classification => train(&classification_domain(cfg)?, cfg, &levels.betas)?.regressors,
        TaskKind::Regression => train(&regression_domain(cfg)?, cfg, &levels.betas)?.regressors,
    };
    Ok(levels.betas.into_iter().zip(regressors).collect())
}

/// Trains and saves predictors as `quantile_beta_<β>.txt` in `out_dir`.
pub fn train_and_save(cfg: &ExperimentConfig, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for (beta, model) in train_quantile_predictors(cfg)? {
        let (path, mut w) = create(
            out_dir,
            &format!("quantile_beta_{}.txt", super::results::format_sig6(beta)),
        )?;
        model.save(&mut w)?;
        w.flush()?;
        paths.push(path);
    }
    Ok(paths)
}
