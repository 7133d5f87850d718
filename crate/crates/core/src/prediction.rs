//! Prediction tasks, their metrics and baselines, and the parameter
//! recovery report.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::estimator::{fit_evaluation, EvaluationFit, FitConfig, FitError};
use crate::event::{
    split_train_test, Dataset, EventError, EventRecord, ItemHistory, Polarity, SplitUnit,
    TopicWeights,
};
use crate::kernels::BasisKernel;
use crate::params::{ItemParams, ModelParams};
use crate::quadrature;
use crate::stats::{average_ranks, mean};

#[derive(Debug, thiserror::Error)]
pub enum PredictionError {
    #[error("AUC needs both classes (got {positives} positive, {negatives} negative)")]
    SingleClass { positives: usize, negatives: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("item {0:?} has no fitted parameters")]
    UnfittedItem(String),
    #[error("parameter sets do not match: {0}")]
    IndexMismatch(String),
    #[error("task requires {} data", .0.as_str())]
    WrongPolarity(Polarity),
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Fit(#[from] FitError),
    #[error(transparent)]
    Event(#[from] EventError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Baseline {
    Full,
    /// Item-only hazard: source trustworthiness fixed at zero.
    Intrinsic,
    /// Source-only hazard: item parameters fixed at zero.
    Source,
    /// Sources ranked by training-set acceptance counts.
    CorrectAnswers,
}

impl Baseline {
    pub fn as_str(&self) -> &'static str {
        match self {
            Baseline::Full => "full",
            Baseline::Intrinsic => "intrinsic",
            Baseline::Source => "source",
            Baseline::CorrectAnswers => "correct-answers",
        }
    }
}

/// Survival `exp(-∫_0^x μ)` parts of a statement's evaluation hazard.
#[derive(Debug, Clone, Copy)]
pub struct StatementHazard<'a> {
    pub kernel: &'a BasisKernel,
    pub beta: &'a [f64],
    /// `w · α_s`.
    pub trust: f64,
    pub t_add: f64,
}

impl<'a> StatementHazard<'a> {
    /// Hazard of statement `e` of an item with parameters `item` under `p`.
    pub fn new(p: &'a ModelParams, item: &'a ItemParams, e: &EventRecord) -> Self {
        StatementHazard {
            kernel: &p.kernels.evaluation,
            beta: &item.beta,
            trust: p.trust(e.source, &item.w),
            t_add: e.t_add,
        }
    }

    pub fn cumulative(&self, x: f64) -> f64 {
        self.kernel
            .mixture_mass(self.beta, self.t_add, self.t_add + x)
            + self.trust * x
    }
}

/// `1 - exp(-∫_0^W μ)`: probability the statement is evaluated within
/// `window` of its addition.
pub fn prob_evaluated_within(h: &StatementHazard, window: f64) -> f64 {
    -(-h.cumulative(window)).exp_m1()
}

/// `E[Δ] = ∫_0^∞ S(τ) dτ` of the unterminated hazard. Constant kernels are
/// extrapolated past the horizon, so the hazard is the constant
/// `Σβ + trust`; RBF hazards become constant once the bumps have decayed
/// and the remaining tail is closed-form. Returns `f64::INFINITY` when the
/// survival function does not vanish.
pub fn expected_verification_time(h: &StatementHazard) -> f64 {
    match h.kernel {
        BasisKernel::Constant { .. } => {
            let mu = h.beta.iter().sum::<f64>() + h.trust;
            if mu > 0.0 {
                1.0 / mu
            } else {
                f64::INFINITY
            }
        }
        BasisKernel::Rbf { centers, sigma } => {
            if !(h.trust > 0.0) {
                return f64::INFINITY;
            }
            let last = centers.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let end = (last + 12.0 * sigma - h.t_add).max(0.0);
            // stop early once survival is negligible
            let end = end.min(800.0 / h.trust);
            let breaks: Vec<f64> = centers.iter().map(|c| c - h.t_add).collect();
            let body = quadrature::integrate_with_breaks(
                |x| (-h.cumulative(x)).exp(),
                0.0,
                end,
                &breaks,
                1e-14,
                1e-11,
            );
            body.value + (-h.cumulative(end)).exp() / h.trust
        }
    }
}

/// Rank-based AUC; ties contribute one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64, PredictionError> {
    if scores.len() != labels.len() {
        return Err(PredictionError::LengthMismatch(scores.len(), labels.len()));
    }
    let pos = labels.iter().filter(|l| **l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(PredictionError::SingleClass {
            positives: pos,
            negatives: neg,
        });
    }
    let ranks = average_ranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l)
        .map(|(r, _)| r)
        .sum();
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

pub fn success_rate<T: PartialEq>(predictions: &[T], truth: &[T]) -> Result<f64, PredictionError> {
    if predictions.len() != truth.len() {
        return Err(PredictionError::LengthMismatch(
            predictions.len(),
            truth.len(),
        ));
    }
    if predictions.is_empty() {
        return Err(PredictionError::EmptyTestSet);
    }
    let hits = predictions
        .iter()
        .zip(truth)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / predictions.len() as f64)
}

/// Training-set statistics used by the SOURCE and CORRECT_ANSWERS
/// baselines of the accepted-answer task.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceStats {
    /// Mean observed (uncensored) delay per source.
    pub mean_delay: Vec<Option<f64>>,
    pub global_mean_delay: f64,
    /// Number of evaluated statements per source.
    pub acceptances: Vec<usize>,
}

impl SourceStats {
    pub fn from_training(train: &Dataset) -> Self {
        let ns = train.n_sources();
        let mut sums = vec![0.0; ns];
        let mut counts = vec![0usize; ns];
        let mut all = Vec::new();
        for d in train.items() {
            for e in &d.events {
                if let Some(delta) = e.delay() {
                    sums[e.source] += delta;
                    counts[e.source] += 1;
                    all.push(delta);
                }
            }
        }
        let global = if all.is_empty() {
            f64::INFINITY
        } else {
            mean(&all)
        };
        SourceStats {
            mean_delay: sums
                .iter()
                .zip(&counts)
                .map(|(s, c)| (*c > 0).then(|| s / *c as f64))
                .collect(),
            global_mean_delay: global,
            acceptances: counts,
        }
    }
}

/// Mean fitted `β_d` over the model's items; the intrinsic term assumed
/// for items the model has not seen.
pub fn mean_beta(p: &ModelParams) -> Vec<f64> {
    let j = p.kernels.evaluation.len();
    if p.items.is_empty() {
        return vec![0.0; j];
    }
    (0..j)
        .map(|k| p.items.iter().map(|d| d.beta[k]).sum::<f64>() / p.items.len() as f64)
        .collect()
}

/// How answers of a question are ranked: by predicted verification time
/// `t_add + E[Δ]` (lower is better) or by acceptance counts.
#[derive(Debug, Clone, Copy)]
pub enum AnswerRanker<'a> {
    /// Expected delay under a fitted model; items the model has not seen
    /// get `prior_beta`.
    Full {
        model: &'a ModelParams,
        prior_beta: &'a [f64],
    },
    /// Mean observed training delay of the answer's source.
    Source(&'a SourceStats),
    CorrectAnswers(&'a SourceStats),
}

impl AnswerRanker<'_> {
    fn scores(&self, q: &ItemHistory) -> Vec<f64> {
        match self {
            AnswerRanker::Full {
                model: p,
                prior_beta,
            } => {
                let unseen;
                let item = match p.item(&q.id) {
                    Some(item) => item,
                    None => {
                        unseen = ItemParams {
                            id: q.id.clone(),
                            phi: vec![0.0; p.kernels.addition.len()],
                            beta: prior_beta.to_vec(),
                            w: vec![1.0 / p.n_topics as f64; p.n_topics],
                        };
                        &unseen
                    }
                };
                q.events
                    .iter()
                    .map(|e| {
                        e.t_add + expected_verification_time(&StatementHazard::new(p, item, e))
                    })
                    .collect()
            }
            AnswerRanker::Source(stats) => q
                .events
                .iter()
                .map(|e| {
                    let d = stats
                        .mean_delay
                        .get(e.source)
                        .copied()
                        .flatten()
                        .unwrap_or_else(|| {
                            log::warn!("source {} has no observed training delay", e.source);
                            stats.global_mean_delay
                        });
                    e.t_add + d
                })
                .collect(),
            AnswerRanker::CorrectAnswers(stats) => q
                .events
                .iter()
                .map(|e| -(stats.acceptances.get(e.source).copied().unwrap_or(0) as f64))
                .collect(),
        }
    }
}

/// Index of the answer predicted to be accepted: lowest score, ties going
/// to the earliest answer. `None` for a question without answers.
pub fn predict_accepted_answer(q: &ItemHistory, ranker: &AnswerRanker) -> Option<usize> {
    let scores = ranker.scores(q);
    let mut best: Option<usize> = None;
    for (i, s) in scores.iter().enumerate() {
        match best {
            None => best = Some(i),
            Some(b) => {
                let better =
                    s < &scores[b] || (s == &scores[b] && q.events[i].t_add < q.events[b].t_add);
                if better {
                    best = Some(i);
                }
            }
        }
    }
    best
}

/// The answer verified first, if any.
pub fn accepted_answer(q: &ItemHistory) -> Option<usize> {
    q.events
        .iter()
        .enumerate()
        .filter_map(|(i, e)| e.t_eval.map(|t| (i, t)))
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(i, _)| i)
}

/// RMSE per parameter family.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    pub alpha: f64,
    pub gamma: f64,
    pub beta: f64,
    pub phi: f64,
}

fn rmse_of(pairs: impl Iterator<Item = (f64, f64)>) -> f64 {
    let sq: Vec<f64> = pairs.map(|(a, b)| (a - b) * (a - b)).collect();
    if sq.is_empty() {
        return f64::NAN;
    }
    mean(&sq).sqrt()
}

/// RMSE between true and estimated parameters. Sources must match by id
/// and order; every estimated item must exist in the truth (the estimate
/// may cover a subset of the items).
pub fn rmse_report(truth: &ModelParams, est: &ModelParams) -> Result<Rmse, PredictionError> {
    if truth.sources.len() != est.sources.len() {
        return Err(PredictionError::IndexMismatch(format!(
            "{} true sources vs {} estimated",
            truth.sources.len(),
            est.sources.len()
        )));
    }
    for (a, b) in truth.sources.iter().zip(&est.sources) {
        if a.id != b.id || a.alpha.len() != b.alpha.len() {
            return Err(PredictionError::IndexMismatch(format!(
                "source {:?} vs {:?}",
                a.id, b.id
            )));
        }
    }
    let mut pairs_item = Vec::with_capacity(est.items.len());
    for d in &est.items {
        let t = truth.item(&d.id).ok_or_else(|| {
            PredictionError::IndexMismatch(format!("item {:?} not in the truth", d.id))
        })?;
        if t.beta.len() != d.beta.len() || t.phi.len() != d.phi.len() {
            return Err(PredictionError::IndexMismatch(format!(
                "item {:?} has different kernels",
                d.id
            )));
        }
        pairs_item.push((t, d));
    }
    let src = truth.sources.iter().zip(&est.sources);
    Ok(Rmse {
        alpha: rmse_of(
            src.clone()
                .flat_map(|(a, b)| a.alpha.iter().copied().zip(b.alpha.iter().copied())),
        ),
        gamma: rmse_of(src.flat_map(|(a, b)| a.gamma.iter().copied().zip(b.gamma.iter().copied()))),
        beta: rmse_of(
            pairs_item
                .iter()
                .flat_map(|(t, d)| t.beta.iter().copied().zip(d.beta.iter().copied())),
        ),
        phi: rmse_of(
            pairs_item
                .iter()
                .flat_map(|(t, d)| t.phi.iter().copied().zip(d.phi.iter().copied())),
        ),
    })
}

fn assemble_evaluation(
    ds: &Dataset,
    topics: &TopicWeights,
    cfg: &FitConfig,
    fit: &EvaluationFit,
) -> Result<ModelParams, PredictionError> {
    let w = topics.resolve(ds);
    let l = topics.n_topics();
    let sources = ds
        .sources()
        .iter()
        .enumerate()
        .map(|(s, id)| crate::params::SourceParams {
            id: id.clone(),
            alpha: fit.alpha[s].clone(),
            gamma: vec![0.0; l],
        })
        .collect();
    let items = ds
        .items()
        .iter()
        .enumerate()
        .map(|(di, d)| ItemParams {
            id: d.id.clone(),
            phi: vec![0.0; cfg.kernels.addition.len()],
            beta: fit.beta[di].clone(),
            w: w[di].clone(),
        })
        .collect();
    let pi = vec![vec![1.0 / ds.n_sources().max(1) as f64; ds.n_sources()]; l];
    Ok(ModelParams::new(
        ds.polarity(),
        ds.horizon(),
        l,
        cfg.kernels.clone(),
        fit.report.eta,
        sources,
        items,
        pi,
    )
    .map_err(FitError::from)?)
}

/// Evaluation-only model fitted under a baseline's restriction: INTRINSIC
/// refits with `α ≡ 0`, SOURCE with `β ≡ 0`.
pub fn fit_baseline(
    ds: &Dataset,
    topics: &TopicWeights,
    cfg: &FitConfig,
    baseline: Baseline,
) -> Result<ModelParams, PredictionError> {
    let mut c = cfg.clone();
    match baseline {
        Baseline::Full => {}
        Baseline::Intrinsic => c.freeze_alpha = true,
        Baseline::Source => {
            c.freeze_beta = true;
            c.eta_grid = vec![0.0];
        }
        Baseline::CorrectAnswers => {
            return Err(PredictionError::InvalidConfig(
                "correct-answers has no fitted model".into(),
            ));
        }
    }
    if c.eta_grid.len() > 1 {
        let cv = crate::estimator::cross_validate_eta(ds, topics, &c)?;
        c.eta_grid = vec![cv.chosen_eta];
    }
    let fit = fit_evaluation(ds, topics, &c)?;
    assemble_evaluation(ds, topics, &c, &fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RemovalTaskConfig {
    pub windows: Vec<f64>,
    pub test_fraction: f64,
    pub seed: u64,
    pub baselines: Vec<Baseline>,
}

impl Default for RemovalTaskConfig {
    fn default() -> Self {
        RemovalTaskConfig {
            windows: vec![0.25, 0.5, 1.0, 2.0, 4.0, 8.0],
            test_fraction: 0.1,
            seed: 0,
            baselines: vec![Baseline::Full, Baseline::Intrinsic, Baseline::Source],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub baseline: Baseline,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowResult {
    pub window: f64,
    pub positives: usize,
    pub negatives: usize,
    /// AUC per baseline; `None` when one class is missing.
    pub auc: Vec<(Baseline, Option<f64>)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RemovalReport {
    pub metric: String,
    pub n_test: usize,
    /// Test statements whose item has no training events.
    pub skipped_unfitted: usize,
    pub windows: Vec<WindowResult>,
}

impl RemovalReport {
    pub fn value(&self, window_index: usize, baseline: Baseline) -> Option<f64> {
        self.windows[window_index]
            .auc
            .iter()
            .find(|(b, _)| *b == baseline)
            .and_then(|(_, v)| *v)
    }
}

/// Will a statement be removed within `W`? Statements are split 90/10 at
/// random; each baseline is fitted on the training statements; every test
/// statement observable for the full window is scored.
pub fn run_removal_task(
    ds: &Dataset,
    topics: &TopicWeights,
    fit: &FitConfig,
    cfg: &RemovalTaskConfig,
) -> Result<RemovalReport, PredictionError> {
    if cfg.windows.is_empty() || cfg.windows.iter().any(|w| !(*w > 0.0)) {
        return Err(PredictionError::InvalidConfig(
            "windows must be positive".into(),
        ));
    }
    if cfg.baselines.contains(&Baseline::CorrectAnswers) {
        return Err(PredictionError::InvalidConfig(
            "correct-answers applies to the accepted-answer task".into(),
        ));
    }
    let (train, test) = split_train_test(ds, 1.0 - cfg.test_fraction, cfg.seed, SplitUnit::Event)?;
    if test.n_events() == 0 {
        return Err(PredictionError::EmptyTestSet);
    }
    let models: Vec<(Baseline, ModelParams)> = cfg
        .baselines
        .iter()
        .map(|&b| fit_baseline(&train, topics, fit, b).map(|m| (b, m)))
        .collect::<Result<_, _>>()?;

    let mut skipped = 0;
    let mut statements: Vec<(&ItemHistory, &EventRecord)> = Vec::new();
    for d in test.items() {
        if models[0].1.item(&d.id).is_none() {
            skipped += d.len();
            continue;
        }
        statements.extend(d.events.iter().map(|e| (d, e)));
    }
    if statements.is_empty() {
        return Err(PredictionError::EmptyTestSet);
    }

    let mut windows = Vec::new();
    for &wdw in &cfg.windows {
        let scored: Vec<&(&ItemHistory, &EventRecord)> = statements
            .iter()
            .filter(|(d, e)| e.t_eval.is_some() || d.horizon - e.t_add >= wdw)
            .collect();
        let labels: Vec<bool> = scored
            .iter()
            .map(|(_, e)| e.delay().is_some_and(|x| x <= wdw))
            .collect();
        let positives = labels.iter().filter(|l| **l).count();
        let negatives = labels.len() - positives;
        let auc_per = models
            .iter()
            .map(|(b, m)| {
                let scores: Vec<f64> = scored
                    .par_iter()
                    .map(|(d, e)| {
                        let item = m.item(&d.id).expect("fitted item");
                        prob_evaluated_within(&StatementHazard::new(m, item, e), wdw)
                    })
                    .collect();
                (*b, auc(&scores, &labels).ok())
            })
            .collect();
        windows.push(WindowResult {
            window: wdw,
            positives,
            negatives,
            auc: auc_per,
        });
    }
    Ok(RemovalReport {
        metric: "auc".into(),
        n_test: statements.len(),
        skipped_unfitted: skipped,
        windows,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AcceptanceTaskConfig {
    pub fractions: Vec<f64>,
    pub seed: u64,
    pub baselines: Vec<Baseline>,
}

impl Default for AcceptanceTaskConfig {
    fn default() -> Self {
        AcceptanceTaskConfig {
            fractions: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            seed: 0,
            baselines: vec![Baseline::Full, Baseline::Source, Baseline::CorrectAnswers],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FractionResult {
    pub fraction: f64,
    pub questions: usize,
    /// Mean of `1/k` over scored questions with `k` answers.
    pub chance: f64,
    pub success: Vec<(Baseline, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptanceReport {
    pub metric: String,
    pub fractions: Vec<FractionResult>,
}

impl AcceptanceReport {
    pub fn value(&self, fraction_index: usize, baseline: Baseline) -> Option<f64> {
        self.fractions[fraction_index]
            .success
            .iter()
            .find(|(b, _)| *b == baseline)
            .map(|(_, v)| *v)
    }
}

/// Which answer will be accepted? Questions are split by item at each
/// training fraction; questions with at least two answers and an accepted
/// one are scored.
pub fn run_acceptance_task(
    ds: &Dataset,
    topics: &TopicWeights,
    fit: &FitConfig,
    cfg: &AcceptanceTaskConfig,
) -> Result<AcceptanceReport, PredictionError> {
    if ds.polarity() != Polarity::Verification {
        return Err(PredictionError::WrongPolarity(Polarity::Verification));
    }
    if cfg.baselines.contains(&Baseline::Intrinsic) {
        return Err(PredictionError::InvalidConfig(
            "intrinsic cannot rank answers to unseen questions".into(),
        ));
    }
    let mut out = Vec::new();
    for &f in &cfg.fractions {
        let (train, test) = split_train_test(ds, f, cfg.seed, SplitUnit::Item)?;
        let questions: Vec<(&ItemHistory, usize)> = test
            .items()
            .iter()
            .filter(|q| q.len() >= 2)
            .filter_map(|q| accepted_answer(q).map(|a| (q, a)))
            .collect();
        if questions.is_empty() {
            return Err(PredictionError::EmptyTestSet);
        }
        let stats = SourceStats::from_training(&train);
        let chance = mean(
            &questions
                .iter()
                .map(|(q, _)| 1.0 / q.len() as f64)
                .collect::<Vec<_>>(),
        );
        let truth: Vec<usize> = questions.iter().map(|(_, a)| *a).collect();
        let mut success = Vec::new();
        for &b in &cfg.baselines {
            let (model, prior);
            let ranker = match b {
                Baseline::Full => {
                    model = fit_baseline(&train, topics, fit, Baseline::Full)?;
                    prior = mean_beta(&model);
                    AnswerRanker::Full {
                        model: &model,
                        prior_beta: &prior,
                    }
                }
                Baseline::Source => AnswerRanker::Source(&stats),
                Baseline::CorrectAnswers => AnswerRanker::CorrectAnswers(&stats),
                Baseline::Intrinsic => unreachable!(),
            };
            let preds: Vec<usize> = questions
                .par_iter()
                .map(|(q, _)| predict_accepted_answer(q, &ranker).expect("question has answers"))
                .collect();
            success.push((b, success_rate(&preds, &truth)?));
        }
        out.push(FractionResult {
            fraction: f,
            questions: questions.len(),
            chance,
            success,
        });
    }
    Ok(AcceptanceReport {
        metric: "success-rate".into(),
        fractions: out,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoveryConfig {
    /// Corpus sizes; each run fits the first `n` items.
    pub sizes: Vec<usize>,
    /// Minimum event count for a source to enter the α rank correlation.
    pub min_source_events: usize,
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            sizes: vec![50, 100, 200, 400],
            min_source_events: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub n_items: usize,
    pub n_events: usize,
    pub rmse: Rmse,
    /// Spearman correlation of true and fitted α over well-observed sources.
    pub alpha_spearman: Option<f64>,
    pub ranked_sources: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub seed: u64,
    pub rows: Vec<RecoveryRow>,
}

impl RecoveryReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "n_items,n_events,rmse_alpha,rmse_gamma,rmse_beta,rmse_phi,alpha_spearman\n",
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.n_items,
                r.n_events,
                r.rmse.alpha,
                r.rmse.gamma,
                r.rmse.beta,
                r.rmse.phi,
                r.alpha_spearman.map(|x| x.to_string()).unwrap_or_default()
            ));
        }
        s
    }
}

/// Fits nested prefixes of a synthetic corpus and reports the error of
/// each fit against the generating parameters.
pub fn run_recovery(
    ds: &Dataset,
    truth: &crate::simulator::TrueParams,
    fit: &FitConfig,
    cfg: &RecoveryConfig,
) -> Result<RecoveryReport, PredictionError> {
    if cfg.sizes.is_empty() || cfg.sizes.iter().any(|n| *n == 0 || *n > ds.items().len()) {
        return Err(PredictionError::InvalidConfig(format!(
            "sizes must lie in 1..={}",
            ds.items().len()
        )));
    }
    let mut fit = fit.clone();
    if fit.kernels != truth.model.kernels {
        log::warn!("recovery fits with the generating kernels");
        fit.kernels = truth.model.kernels.clone();
    }
    let topics = truth.topics()?;
    let mut rows = Vec::new();
    for &n in &cfg.sizes {
        let sub = ds.prefix(n);
        let (est, _) = crate::estimator::fit_all(&sub, &topics, &fit)?;
        let rmse = rmse_report(&truth.model, &est)?;
        let mut counts = vec![0usize; sub.n_sources()];
        for d in sub.items() {
            for e in &d.events {
                counts[e.source] += 1;
            }
        }
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for (s, c) in counts.iter().enumerate() {
            if *c >= cfg.min_source_events {
                a.extend_from_slice(&truth.model.sources[s].alpha);
                b.extend_from_slice(&est.sources[s].alpha);
            }
        }
        rows.push(RecoveryRow {
            n_items: n,
            n_events: sub.n_events(),
            rmse,
            alpha_spearman: (a.len() >= 3).then(|| crate::stats::spearman(&a, &b)),
            ranked_sources: a.len(),
        });
    }
    Ok(RecoveryReport {
        seed: truth.seed,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{KernelSet, SourceParams};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn constant(beta: f64, trust: f64) -> (BasisKernel, Vec<f64>, f64) {
        (BasisKernel::constant(100.0).unwrap(), vec![beta], trust)
    }

    #[test]
    fn survival_examples() {
        let (k, b, _) = constant(0.0, 0.0);
        let h = StatementHazard {
            kernel: &k,
            beta: &b,
            trust: std::f64::consts::LN_2,
            t_add: 0.0,
        };
        assert!((prob_evaluated_within(&h, 1.0) - 0.5).abs() < 1e-15);
        let zero = StatementHazard { trust: 0.0, ..h };
        assert_eq!(prob_evaluated_within(&zero, 50.0), 0.0);
    }

    #[test]
    fn expected_time_examples() {
        let (k, b, _) = constant(0.0, 0.0);
        let h = StatementHazard {
            kernel: &k,
            beta: &b,
            trust: 0.25,
            t_add: 1.0,
        };
        assert!((expected_verification_time(&h) - 4.0).abs() < 1e-12);
        assert!(expected_verification_time(&StatementHazard { trust: 0.0, ..h }).is_infinite());
        let mixed = vec![0.2];
        assert!(
            (expected_verification_time(&StatementHazard {
                beta: &mixed,
                trust: 0.3,
                ..h
            }) - 2.0)
                .abs()
                < 1e-12
        );
    }

    #[test]
    fn rbf_expected_time_matches_quadrature() {
        let k = BasisKernel::rbf(vec![0.0, 6.0, 12.0], 0.5).unwrap();
        let beta = vec![0.0, 3.0, 0.5];
        let h = StatementHazard {
            kernel: &k,
            beta: &beta,
            trust: 0.05,
            t_add: 4.0,
        };
        let direct =
            quadrature::integrate(|x| (-h.cumulative(x)).exp(), 0.0, 2000.0, 1e-13, 1e-12).value;
        assert!((expected_verification_time(&h) - direct).abs() < 1e-8 * direct);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.1], &[true, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.3; 4], &[true, false, true, false]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[true, true]).is_err());
    }

    #[test]
    fn auc_of_random_scores_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let n = 10_000;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<bool> = (0..n).map(|_| rng.random_bool(0.3)).collect();
        let p = labels.iter().filter(|l| **l).count() as f64;
        let q = n as f64 - p;
        let sd = ((p + q + 1.0) / (12.0 * p * q)).sqrt();
        assert!((auc(&scores, &labels).unwrap() - 0.5).abs() < 3.0 * sd);
    }

    #[test]
    fn success_rate_examples() {
        assert_eq!(success_rate(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(success_rate(&[1, 2], &[2, 1]).unwrap(), 0.0);
        assert!(success_rate(&[1], &[1, 2]).is_err());
    }

    fn two_source_model(alpha: [f64; 2]) -> ModelParams {
        ModelParams::new(
            Polarity::Verification,
            10.0,
            1,
            KernelSet::constant(10.0).unwrap(),
            0.0,
            vec![
                SourceParams {
                    id: "u".into(),
                    alpha: vec![alpha[0]],
                    gamma: vec![0.0],
                },
                SourceParams {
                    id: "v".into(),
                    alpha: vec![alpha[1]],
                    gamma: vec![0.0],
                },
            ],
            vec![],
            vec![vec![0.5, 0.5]],
        )
        .unwrap()
    }

    fn question() -> ItemHistory {
        ItemHistory::new(
            "q",
            vec![
                EventRecord {
                    source: 1,
                    t_add: 1.0,
                    t_eval: None,
                },
                EventRecord {
                    source: 0,
                    t_add: 2.0,
                    t_eval: Some(3.0),
                },
            ],
            10.0,
        )
    }

    fn full(p: &ModelParams, q: &ItemHistory) -> Option<usize> {
        predict_accepted_answer(
            q,
            &AnswerRanker::Full {
                model: p,
                prior_beta: &[0.0],
            },
        )
    }

    #[test]
    fn full_picks_fastest_source() {
        let mut q = question();
        q.events[1].t_add = 1.0;
        assert_eq!(full(&two_source_model([1.0, 0.5]), &q), Some(1));
        // common rescaling keeps the choice
        assert_eq!(full(&two_source_model([10.0, 5.0]), &q), Some(1));
        // ties go to the first answer
        assert_eq!(full(&two_source_model([1.0, 1.0]), &q), Some(0));
    }

    #[test]
    fn full_accounts_for_posting_time() {
        // 1 + 1/0.5 = 3 against 2 + 1/1 = 3: tie goes to the earlier answer
        assert_eq!(full(&two_source_model([1.0, 0.5]), &question()), Some(0));
        assert_eq!(full(&two_source_model([1.0, 0.4]), &question()), Some(1));
    }

    #[test]
    fn correct_answers_picks_most_accepted() {
        let stats = SourceStats {
            mean_delay: vec![None, None],
            global_mean_delay: 1.0,
            acceptances: vec![5, 2],
        };
        assert_eq!(
            predict_accepted_answer(&question(), &AnswerRanker::CorrectAnswers(&stats)),
            Some(1)
        );
        let stats = SourceStats {
            acceptances: vec![2, 5],
            ..stats
        };
        assert_eq!(
            predict_accepted_answer(&question(), &AnswerRanker::CorrectAnswers(&stats)),
            Some(0)
        );
    }

    #[test]
    fn accepted_answer_is_first_verified() {
        assert_eq!(accepted_answer(&question()), Some(1));
    }

    #[test]
    fn rmse_examples() {
        let truth = two_source_model([1.0, 0.5]);
        assert_eq!(rmse_report(&truth, &truth).unwrap().alpha, 0.0);
        let shifted = two_source_model([1.1, 0.6]);
        assert!((rmse_report(&truth, &shifted).unwrap().alpha - 0.1).abs() < 1e-12);
    }
}
