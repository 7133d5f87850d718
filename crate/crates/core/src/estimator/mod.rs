//! Maximum-likelihood fitting.
//!
//! The log-likelihood splits into three problems that share no parameters:
//! additions `(φ, γ)`, evaluations `(β, α)` and source popularity `π`.
//! The first two are linear-intensity problems handed to [`problem`]; the
//! third has a closed form (or a short EM when items mix topics).

mod popularity;
mod problem;

use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::event::{Dataset, ItemHistory, Polarity, TopicWeights};
use crate::kernels::TriggerKernel;
use crate::params::{ItemParams, KernelSet, ModelParams, ParamsError, SourceParams};
use crate::stats::pairwise_sum;

pub use popularity::{
    fit_source_popularity, fit_source_popularity_with, PopularityEstimator, PopularityFit,
};
use problem::{LinearProblem, ProblemBuilder, Solution, SolverSettings};

#[derive(Debug, thiserror::Error)]
pub enum FitError {
    #[error("training set has no statements")]
    EmptyTrainingSet,
    #[error("invalid fit config: {0}")]
    InvalidConfig(String),
    #[error("{what} requires {} data", expected.as_str())]
    WrongPolarity {
        what: &'static str,
        expected: Polarity,
    },
    #[error("the {solver} solver cannot handle this problem: {reason}")]
    Unsupported {
        solver: &'static str,
        reason: String,
    },
    #[error("statement {statement} of item {item:?} has zero intensity under every admissible parameter")]
    ZeroIntensity { item: String, statement: usize },
    #[error("no feasible starting point for the constrained addition fit")]
    Infeasible,
    #[error("cannot split {items} item(s) into {folds} folds")]
    DegenerateFolds { folds: usize, items: usize },
    #[error(transparent)]
    Params(#[from] ParamsError),
}

/// Which algorithm maximizes a linear-intensity subproblem.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Solver {
    /// MM where every coefficient is nonnegative, interior point otherwise.
    #[default]
    Auto,
    Mm,
    ProjectedGradient,
    InteriorPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub kernels: KernelSet,
    pub max_iters: usize,
    /// Stop once the relative objective change falls below this.
    pub rel_tol: f64,
    /// Candidate ℓ1 weights on β; a single value skips cross-validation.
    pub eta_grid: Vec<f64>,
    pub cv_folds: usize,
    pub cv_seed: u64,
    /// Starting values are `init_scale` times the data's event-rate scale.
    pub init_scale: f64,
    /// Random starting values from this seed instead of the uniform start.
    pub init_seed: Option<u64>,
    /// Minimum addition intensity at observed events (verification fits).
    pub constraint_epsilon: f64,
    pub accelerate: bool,
    pub solver: Solver,
    pub freeze_alpha: bool,
    pub freeze_beta: bool,
    pub freeze_gamma: bool,
    pub popularity: PopularityEstimator,
}

impl Default for FitConfig {
    fn default() -> Self {
        let sim = crate::simulator::SyntheticConfig::default();
        FitConfig {
            kernels: sim.kernels,
            max_iters: 500,
            rel_tol: 1e-6,
            eta_grid: vec![0.0, 0.01, 0.1, 1.0, 10.0],
            cv_folds: 5,
            cv_seed: 0,
            init_scale: 0.1,
            init_seed: None,
            constraint_epsilon: 1e-10,
            accelerate: true,
            solver: Solver::Auto,
            freeze_alpha: false,
            freeze_beta: false,
            freeze_gamma: false,
            popularity: PopularityEstimator::MaximumLikelihood,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), FitError> {
        let bad = |m: &str| Err(FitError::InvalidConfig(m.to_string()));
        self.kernels
            .validate()
            .map_err(|e| FitError::InvalidConfig(format!("kernels: {e}")))?;
        if !(self.rel_tol > 0.0) {
            return bad("rel_tol must be positive");
        }
        if self.max_iters == 0 {
            return bad("max_iters must be positive");
        }
        if self.eta_grid.is_empty() || self.eta_grid.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return bad("eta_grid must be a nonempty list of nonnegative values");
        }
        if self.eta_grid.len() > 1 && self.cv_folds < 2 {
            return bad("cv_folds must be at least 2");
        }
        if !(self.init_scale > 0.0) {
            return bad("init_scale must be positive");
        }
        if !(self.constraint_epsilon >= 0.0) {
            return bad("constraint_epsilon must be nonnegative");
        }
        Ok(())
    }

    fn settings(&self) -> SolverSettings {
        SolverSettings {
            max_iters: self.max_iters,
            rel_tol: self.rel_tol,
            accelerate: self.accelerate,
            min_rate: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub solver: String,
    /// Penalized objective at the returned parameters.
    pub objective: f64,
    /// Log-likelihood term at the returned parameters (objective without
    /// the ℓ1 penalty).
    pub loglik: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub eta: f64,
    pub converged: bool,
    pub kkt_residual: Option<f64>,
    #[serde(skip)]
    pub elapsed: Duration,
}

impl FitReport {
    fn from_solution(
        solver: &str,
        sol: &Solution,
        penalty: f64,
        eta: f64,
        elapsed: Duration,
    ) -> Self {
        FitReport {
            solver: solver.to_string(),
            objective: sol.objective,
            loglik: sol.objective + penalty,
            trace: sol.trace.clone(),
            iterations: sol.iterations,
            eta,
            converged: sol.converged,
            kkt_residual: sol.kkt_residual,
            elapsed,
        }
    }

    fn trivial(solver: &str, eta: f64) -> Self {
        FitReport {
            solver: solver.to_string(),
            objective: 0.0,
            loglik: 0.0,
            trace: vec![0.0],
            iterations: 0,
            eta,
            converged: true,
            kkt_residual: None,
            elapsed: Duration::ZERO,
        }
    }
}

/// Fitted evaluation parameters: `beta[d]` per item of the training set
/// (in dataset order) and `alpha[s]` per source.
#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationFit {
    pub beta: Vec<Vec<f64>>,
    pub alpha: Vec<Vec<f64>>,
    pub report: FitReport,
}

/// Fitted addition parameters. `gamma` carries its polarity's sign.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditionFit {
    pub phi: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub report: FitReport,
}

/// Index layout `[item blocks of width j | source blocks of width l]`.
#[derive(Debug, Clone, Copy)]
struct Layout {
    n_items: usize,
    j: usize,
    l: usize,
    n_sources: usize,
}

impl Layout {
    fn item(&self, d: usize) -> usize {
        d * self.j
    }
    fn source(&self, s: usize) -> usize {
        self.n_items * self.j + s * self.l
    }
    fn len(&self) -> usize {
        self.n_items * self.j + self.n_sources * self.l
    }
    fn split(&self, theta: &[f64], sign: f64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let items = (0..self.n_items)
            .map(|d| theta[self.item(d)..self.item(d) + self.j].to_vec())
            .collect();
        let sources = (0..self.n_sources)
            .map(|s| {
                theta[self.source(s)..self.source(s) + self.l]
                    .iter()
                    .map(|x| if *x == 0.0 { 0.0 } else { sign * x })
                    .collect()
            })
            .collect();
        (items, sources)
    }
}

#[derive(Default)]
struct Block {
    rows: Vec<(f64, Vec<(usize, f64)>)>,
    checks: Vec<Vec<(usize, f64)>>,
    linear: Vec<(usize, f64)>,
    /// Statement indices of `rows`, for diagnostics.
    statements: Vec<usize>,
}

fn assemble(blocks: &[Block], n: usize) -> (ProblemBuilder, Vec<(usize, usize)>) {
    let mut b = ProblemBuilder::new(n);
    let mut origin = Vec::new();
    for (di, blk) in blocks.iter().enumerate() {
        for ((offset, entries), &i) in blk.rows.iter().zip(&blk.statements) {
            b.row(*offset, entries);
            origin.push((di, i));
        }
        for entries in &blk.checks {
            b.check(0.0, entries);
        }
        for &(k, v) in &blk.linear {
            b.linear[k] += v;
        }
    }
    (b, origin)
}

fn check_dead(p: &LinearProblem, origin: &[(usize, usize)], ds: &Dataset) -> Result<(), FitError> {
    if let Some(r) = p.dead_row() {
        let (di, i) = origin[r];
        return Err(FitError::ZeroIntensity {
            item: ds.items()[di].id.clone(),
            statement: i,
        });
    }
    Ok(())
}

fn push_source(entries: &mut Vec<(usize, f64)>, base: usize, w: &[f64], v: f64) {
    for (ll, wl) in w.iter().enumerate() {
        if *wl > 0.0 {
            entries.push((base + ll, wl * v));
        }
    }
}

/// Evaluation rows of one item. With `fixed_alpha` the source term moves
/// into the row offsets and the compensator keeps only the β part.
fn evaluation_block(
    d: &ItemHistory,
    di: usize,
    w: &[f64],
    kernels: &KernelSet,
    lay: &Layout,
    keep: &dyn Fn(usize) -> bool,
    fixed_alpha: Option<&[Vec<f64>]>,
) -> Block {
    let k = &kernels.evaluation;
    let mut blk = Block::default();
    let base = lay.item(di);
    for (i, e) in d.events.iter().enumerate() {
        if !keep(i) {
            continue;
        }
        let x = e.exposure(d.horizon);
        for j in 0..lay.j {
            blk.linear.push((base + j, k.mass(j, e.t_add, e.t_add + x)));
        }
        if fixed_alpha.is_none() {
            push_source(&mut blk.linear, lay.source(e.source), w, x);
        }
        if let Some(delta) = e.delay() {
            let t = e.t_add + delta;
            let mut entries: Vec<(usize, f64)> =
                (0..lay.j).map(|j| (base + j, k.value(j, t))).collect();
            let offset = match fixed_alpha {
                Some(alpha) => w.iter().zip(&alpha[e.source]).map(|(a, b)| a * b).sum(),
                None => {
                    push_source(&mut entries, lay.source(e.source), w, 1.0);
                    0.0
                }
            };
            blk.rows.push((offset, entries));
            blk.statements.push(i);
        }
    }
    blk
}

/// Addition rows of one item. `sign` is +1 for `γ` and −1 for `γ' = −γ`;
/// with `checkpoints` the unclamped intensity is also required to be
/// nonnegative right after each evaluation and just before the horizon.
fn addition_block(
    d: &ItemHistory,
    di: usize,
    w: &[f64],
    kernels: &KernelSet,
    lay: &Layout,
    sign: f64,
    checkpoints: bool,
) -> Block {
    let k = &kernels.addition;
    let g = kernels.trigger;
    let horizon = d.horizon;
    let base = lay.item(di);
    let mut evals: Vec<(f64, usize)> = d
        .events
        .iter()
        .filter_map(|e| e.t_eval.map(|tau| (tau, e.source)))
        .collect();
    evals.sort_by(|a, b| a.0.total_cmp(&b.0));

    let excitation = |t: f64, inclusive: bool, entries: &mut Vec<(usize, f64)>| {
        let mut per_source: Vec<(usize, f64)> = Vec::new();
        for &(tau, s) in &evals {
            if tau > t || (!inclusive && tau == t) {
                break;
            }
            let v = trigger_value(g, t - tau);
            match per_source.iter_mut().find(|p| p.0 == s) {
                Some(p) => p.1 += v,
                None => per_source.push((s, v)),
            }
        }
        per_source.sort_by_key(|p| p.0);
        for (s, v) in per_source {
            push_source(entries, lay.source(s), w, sign * v);
        }
    };

    let mut blk = Block::default();
    for (i, e) in d.events.iter().enumerate() {
        let mut entries: Vec<(usize, f64)> = (0..lay.j)
            .map(|j| (base + j, k.value(j, e.t_add)))
            .collect();
        excitation(e.t_add, false, &mut entries);
        blk.rows.push((0.0, entries));
        blk.statements.push(i);
    }
    for j in 0..lay.j {
        blk.linear.push((base + j, k.mass(j, 0.0, horizon)));
    }
    for &(tau, s) in &evals {
        push_source(
            &mut blk.linear,
            lay.source(s),
            w,
            sign * g.mass(-tau, horizon - tau),
        );
    }
    if checkpoints {
        let end = horizon * (1.0 - f64::EPSILON);
        let mut times: Vec<f64> = evals.iter().map(|e| e.0).collect();
        times.dedup();
        times.push(end);
        for t in times {
            let mut entries: Vec<(usize, f64)> =
                (0..lay.j).map(|j| (base + j, k.value(j, t))).collect();
            excitation(t, true, &mut entries);
            blk.checks.push(entries);
        }
    }
    blk
}

fn trigger_value(g: TriggerKernel, t: f64) -> f64 {
    g.eval(t)
}

fn start(p: &LinearProblem, cfg: &FitConfig, salt: u64) -> Vec<f64> {
    match cfg.init_seed {
        Some(seed) => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            p.random_start(cfg.init_scale, &mut rng)
        }
        None => p.uniform_start(cfg.init_scale),
    }
}

fn topic_rows(ds: &Dataset, topics: &TopicWeights) -> Vec<Vec<f64>> {
    topics.resolve(ds)
}

fn eta_of(cfg: &FitConfig) -> f64 {
    cfg.eta_grid[0]
}

fn solve(
    p: &LinearProblem,
    cfg: &FitConfig,
    start: Vec<f64>,
    nonneg: bool,
    blocks: &[std::ops::Range<usize>],
) -> Result<(Solution, &'static str), FitError> {
    let s = cfg.settings();
    match (cfg.solver, nonneg) {
        (Solver::Auto | Solver::Mm, true) => Ok((p.solve_mm(start, &s), "mm")),
        (Solver::Mm, false) => Err(FitError::Unsupported {
            solver: "mm",
            reason: "signed intensity coefficients".into(),
        }),
        (Solver::ProjectedGradient, _) => Ok((p.solve_pg(start, &s), "projected-gradient")),
        (Solver::InteriorPoint, _) | (Solver::Auto, false) => {
            Ok((p.solve_ip(start, blocks, &s), "interior-point"))
        }
    }
}

/// Fits `β` and `α` by maximizing the evaluation log-likelihood minus
/// `η Σ_d ||β_d||₁` with `η = cfg.eta_grid[0]`.
pub fn fit_evaluation(
    ds: &Dataset,
    topics: &TopicWeights,
    cfg: &FitConfig,
) -> Result<EvaluationFit, FitError> {
    cfg.validate()?;
    fit_evaluation_inner(ds, topics, cfg, eta_of(cfg))
}

fn fit_evaluation_inner(
    ds: &Dataset,
    topics: &TopicWeights,
    cfg: &FitConfig,
    eta: f64,
) -> Result<EvaluationFit, FitError> {
    let clock = Instant::now();
    if ds.n_events() == 0 {
        return Err(FitError::EmptyTrainingSet);
    }
    let lay = Layout {
        n_items: ds.items().len(),
        j: cfg.kernels.evaluation.len(),
        l: topics.n_topics(),
        n_sources: ds.n_sources(),
    };
    let w = topic_rows(ds, topics);
    let blocks: Vec<Block> = ds
        .items()
        .par_iter()
        .enumerate()
        .map(|(di, d)| evaluation_block(d, di, &w[di], &cfg.kernels, &lay, &|_| true, None))
        .collect();
    let (builder, origin) = assemble(&blocks, lay.len());
    let mut penalty = vec![0.0; lay.len()];
    let mut frozen = vec![false; lay.len()];
    for d in 0..lay.n_items {
        for j in 0..lay.j {
            penalty[lay.item(d) + j] = eta;
            frozen[lay.item(d) + j] = cfg.freeze_beta;
        }
    }
    for s in 0..lay.n_sources {
        for ll in 0..lay.l {
            frozen[lay.source(s) + ll] = cfg.freeze_alpha;
        }
    }
    let p = builder.finish(penalty, frozen);
    check_dead(&p, &origin, ds)?;
    warn_unevaluated_sources(ds);

    let (sol, name) = if p.n_rows() == 0 {
        let theta = vec![0.0; p.n_params()];
        (
            Solution {
                objective: p.objective(&theta),
                theta,
                trace: vec![],
                iterations: 0,
                converged: true,
                kkt_residual: None,
            },
            "closed-form",
        )
    } else {
        let blocks: Vec<_> = (0..lay.n_items)
            .map(|d| lay.item(d)..lay.item(d) + lay.j)
            .collect();
        solve(&p, cfg, start(&p, cfg, 1), true, &blocks)?
    };
    let penalty_value = p.penalty_term(&sol.theta);
    let (beta, alpha) = lay.split(&sol.theta, 1.0);
    let mut report = FitReport::from_solution(name, &sol, penalty_value, eta, clock.elapsed());
    if report.trace.is_empty() {
        report.trace.push(report.objective);
    }
    Ok(EvaluationFit {
        beta,
        alpha,
        report,
    })
}

fn warn_unevaluated_sources(ds: &Dataset) {
    let mut seen = vec![(0usize, 0usize); ds.n_sources()];
    for d in ds.items() {
        for e in &d.events {
            seen[e.source].0 += 1;
            if e.t_eval.is_some() {
                seen[e.source].1 += 1;
            }
        }
    }
    let censored = seen.iter().filter(|(n, k)| *n > 0 && *k == 0).count();
    if censored > 0 {
        log::warn!("{censored} source(s) have only censored statements; their alpha is 0");
    }
    let silent = seen.iter().filter(|(n, _)| *n == 0).count();
    if silent > 0 {
        log::info!("{silent} source(s) have no statements; their alpha and gamma are 0");
    }
}

fn fit_addition(
    ds: &Dataset,
    topics: &TopicWeights,
    cfg: &FitConfig,
) -> Result<AdditionFit, FitError> {
    let clock = Instant::now();
    let verification = ds.polarity() == Polarity::Verification;
    let sign = if verification { -1.0 } else { 1.0 };
    let lay = Layout {
        n_items: ds.items().len(),
        j: cfg.kernels.addition.len(),
        l: topics.n_topics(),
        n_sources: ds.n_sources(),
    };
    if ds.n_events() == 0 {
        let theta = vec![0.0; lay.len()];
        let (phi, gamma) = lay.split(&theta, sign);
        return Ok(AdditionFit {
            phi,
            gamma,
            report: FitReport::trivial("closed-form", 0.0),
        });
    }
    let w = topic_rows(ds, topics);
    let blocks: Vec<Block> = ds
        .items()
        .par_iter()
        .enumerate()
        .map(|(di, d)| {
            addition_block(
                d,
                di,
                &w[di],
                &cfg.kernels,
                &lay,
                sign,
                verification && !cfg.freeze_gamma,
            )
        })
        .collect();
    let (builder, origin) = assemble(&blocks, lay.len());
    let mut frozen = vec![false; lay.len()];
    let mut is_gamma = vec![false; lay.len()];
    for s in 0..lay.n_sources {
        for ll in 0..lay.l {
            frozen[lay.source(s) + ll] = cfg.freeze_gamma;
            is_gamma[lay.source(s) + ll] = true;
        }
    }
    let p = builder.finish(vec![0.0; lay.len()], frozen);
    check_dead(&p, &origin, ds)?;
    let nonneg = p.is_nonnegative();

    let mut theta0 = start(&p, cfg, 2);
    if verification {
        if cfg.init_seed.is_none() {
            for (x, g) in theta0.iter_mut().zip(&is_gamma) {
                if *g {
                    *x = 0.0;
                }
            }
        }
        theta0 = p
            .repair_start(theta0, &is_gamma, cfg.constraint_epsilon)
            .ok_or(FitError::Infeasible)?;
    }
    let blocks: Vec<_> = (0..lay.n_items)
        .map(|d| lay.item(d)..lay.item(d) + lay.j)
        .collect();
    let (sol, name) = if verification {
        let mut s = cfg.settings();
        s.min_rate = cfg.constraint_epsilon;
        match cfg.solver {
            Solver::Mm if !nonneg => {
                return Err(FitError::Unsupported {
                    solver: "mm",
                    reason: "signed intensity coefficients".into(),
                })
            }
            Solver::Mm => (p.solve_mm(theta0, &s), "mm"),
            Solver::ProjectedGradient => (p.solve_pg(theta0, &s), "projected-gradient"),
            Solver::Auto | Solver::InteriorPoint => {
                (p.solve_ip(theta0, &blocks, &s), "interior-point")
            }
        }
    } else {
        solve(&p, cfg, theta0, nonneg, &blocks)?
    };
    let (phi, gamma) = lay.split(&sol.theta, sign);
    Ok(AdditionFit {
        phi,
        gamma,
        report: FitReport::from_solution(name, &sol, 0.0, 0.0, clock.elapsed()),
    })
}

/// Fits `φ` and `γ ≥ 0` on refutation data.
pub fn fit_addition_refutation(
    ds: &Dataset,
    topics: &TopicWeights,
    cfg: &FitConfig,
) -> Result<AdditionFit, FitError> {
    cfg.validate()?;
    if ds.polarity() != Polarity::Refutation {
        return Err(FitError::WrongPolarity {
            what: "fit_addition_refutation",
            expected: Polarity::Refutation,
        });
    }
    fit_addition(ds, topics, cfg)
}

/// Fits `φ` and `γ ≤ 0` on verification data, keeping the unclamped
/// intensity positive at events and nonnegative right after every
/// evaluation and at the horizon.
pub fn fit_addition_verification(
    ds: &Dataset,
    topics: &TopicWeights,
    cfg: &FitConfig,
) -> Result<AdditionFit, FitError> {
    cfg.validate()?;
    if ds.polarity() != Polarity::Verification {
        return Err(FitError::WrongPolarity {
            what: "fit_addition_verification",
            expected: Polarity::Verification,
        });
    }
    fit_addition(ds, topics, cfg)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub eta: f64,
    /// Held-out evaluation log-likelihood summed over folds.
    pub heldout_loglik: f64,
    pub scored: usize,
    /// Held-out statements with zero hazard at their evaluation time.
    pub degenerate: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub chosen_eta: f64,
    pub folds: usize,
    pub table: Vec<CvRow>,
}

/// Chooses η by k-fold cross-validation over items.
///
/// For each fold and η, `α` and the training items' `β` are fitted on the
/// other folds. Each held-out item then gets its own `β` fitted on its
/// even-indexed statements (same η, `α` frozen), and is scored on its
/// odd-indexed statements. The η with the highest total held-out
/// log-likelihood wins; ties go to the larger η.
pub fn cross_validate_eta(
    ds: &Dataset,
    topics: &TopicWeights,
    cfg: &FitConfig,
) -> Result<CvReport, FitError> {
    cfg.validate()?;
    let mut grid = cfg.eta_grid.clone();
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.len() == 1 {
        return Ok(CvReport {
            chosen_eta: grid[0],
            folds: 0,
            table: vec![],
        });
    }
    let n = ds.items().len();
    let k = cfg.cv_folds;
    if k < 2 || n < k {
        return Err(FitError::DegenerateFolds { folds: k, items: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    {
        use rand::seq::SliceRandom;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.cv_seed);
        order.shuffle(&mut rng);
    }
    let mut fold_of = vec![0; n];
    for (pos, &d) in order.iter().enumerate() {
        fold_of[d] = pos % k;
    }

    let mut table = Vec::new();
    for &eta in &grid {
        let mut ll = Vec::new();
        let mut scored = 0;
        let mut degenerate = 0;
        for f in 0..k {
            let train: Vec<ItemHistory> = (0..n)
                .filter(|d| fold_of[*d] != f)
                .map(|d| ds.items()[d].clone())
                .collect();
            let test: Vec<ItemHistory> = (0..n)
                .filter(|d| fold_of[*d] == f)
                .map(|d| ds.items()[d].clone())
                .collect();
            let train = ds.with_items(train);
            let test = ds.with_items(test);
            if train.n_events() == 0 {
                continue;
            }
            let fit = fit_evaluation_inner(&train, topics, cfg, eta)?;
            let (l, sc, dg) = heldout_score(&test, topics, cfg, eta, &fit.alpha)?;
            ll.push(l);
            scored += sc;
            degenerate += dg;
        }
        table.push(CvRow {
            eta,
            heldout_loglik: pairwise_sum(&ll),
            scored,
            degenerate,
        });
    }
    let mut best = 0;
    for (i, row) in table.iter().enumerate().skip(1) {
        let b = &table[best];
        let better = row.degenerate < b.degenerate
            || (row.degenerate == b.degenerate
                && row.heldout_loglik >= b.heldout_loglik - 1e-9 * b.heldout_loglik.abs().max(1.0));
        if better {
            best = i;
        }
    }
    Ok(CvReport {
        chosen_eta: table[best].eta,
        folds: k,
        table,
    })
}

/// Fits held-out `β` on even statements and scores odd ones; returns the
/// finite log-likelihood sum, the number scored and the number with zero
/// hazard.
fn heldout_score(
    test: &Dataset,
    topics: &TopicWeights,
    cfg: &FitConfig,
    eta: f64,
    alpha: &[Vec<f64>],
) -> Result<(f64, usize, usize), FitError> {
    let lay = Layout {
        n_items: test.items().len(),
        j: cfg.kernels.evaluation.len(),
        l: topics.n_topics(),
        n_sources: 0,
    };
    let w = topic_rows(test, topics);
    let even = |i: usize| i % 2 == 0;
    let blocks: Vec<Block> = test
        .items()
        .par_iter()
        .enumerate()
        .map(|(di, d)| evaluation_block(d, di, &w[di], &cfg.kernels, &lay, &even, Some(alpha)))
        .collect();
    let (builder, _) = assemble(&blocks, lay.len());
    let p = builder.finish(vec![eta; lay.len()], vec![cfg.freeze_beta; lay.len()]);
    let theta = if p.n_rows() == 0 || cfg.freeze_beta {
        vec![0.0; lay.len()]
    } else {
        let sol = p.solve_mm(p.uniform_start(cfg.init_scale), &cfg.settings());
        sol.theta
    };
    let k = &cfg.kernels.evaluation;
    let mut terms = Vec::new();
    let mut scored = 0;
    let mut degenerate = 0;
    for (di, d) in test.items().iter().enumerate() {
        let beta = &theta[lay.item(di)..lay.item(di) + lay.j];
        for (i, e) in d.events.iter().enumerate() {
            if even(i) {
                continue;
            }
            scored += 1;
            let trust: f64 = w[di].iter().zip(&alpha[e.source]).map(|(a, b)| a * b).sum();
            let x = e.exposure(d.horizon);
            let comp = k.mixture_mass(beta, e.t_add, e.t_add + x) + trust * x;
            match e.delay() {
                None => terms.push(-comp),
                Some(delta) => {
                    let mu = k.mixture(beta, e.t_add + delta) + trust;
                    if mu > 0.0 {
                        terms.push(mu.ln() - comp);
                    } else {
                        degenerate += 1;
                    }
                }
            }
        }
    }
    Ok((pairwise_sum(&terms), scored, degenerate))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSummary {
    pub addition: FitReport,
    pub evaluation: FitReport,
    pub source: FitReport,
    pub cross_validation: Option<CvReport>,
    /// Sum of the three log-likelihood terms at the fitted parameters.
    pub total_loglik: f64,
}

/// Fits all three subproblems (in parallel) and assembles the model.
pub fn fit_all(
    ds: &Dataset,
    topics: &TopicWeights,
    cfg: &FitConfig,
) -> Result<(ModelParams, FitSummary), FitError> {
    cfg.validate()?;
    if ds.n_events() == 0 {
        return Err(FitError::EmptyTrainingSet);
    }
    let ((add, eval), pop) = rayon::join(
        || {
            rayon::join(
                || fit_addition(ds, topics, cfg),
                || -> Result<(EvaluationFit, Option<CvReport>), FitError> {
                    let cv = if cfg.eta_grid.len() > 1 {
                        Some(cross_validate_eta(ds, topics, cfg)?)
                    } else {
                        None
                    };
                    let eta = cv.as_ref().map_or(cfg.eta_grid[0], |c| c.chosen_eta);
                    Ok((fit_evaluation_inner(ds, topics, cfg, eta)?, cv))
                },
            )
        },
        || {
            let clock = Instant::now();
            (
                fit_source_popularity_with(ds, topics, cfg.popularity),
                clock.elapsed(),
            )
        },
    );
    let add = add?;
    let (eval, cv) = eval?;
    let (pop, pop_time) = pop;

    let w = topic_rows(ds, topics);
    let sources: Vec<SourceParams> = ds
        .sources()
        .iter()
        .enumerate()
        .map(|(s, id)| SourceParams {
            id: id.clone(),
            alpha: eval.alpha[s].clone(),
            gamma: add.gamma[s].clone(),
        })
        .collect();
    let items: Vec<ItemParams> = ds
        .items()
        .iter()
        .enumerate()
        .map(|(di, d)| ItemParams {
            id: d.id.clone(),
            phi: add.phi[di].clone(),
            beta: eval.beta[di].clone(),
            w: w[di].clone(),
        })
        .collect();
    let params = ModelParams::new(
        ds.polarity(),
        ds.horizon(),
        topics.n_topics(),
        cfg.kernels.clone(),
        eval.report.eta,
        sources,
        items,
        pop.pi.clone(),
    )?;
    let source = FitReport {
        solver: if pop.iterations == 0 {
            "closed-form"
        } else {
            "em"
        }
        .to_string(),
        objective: pop.loglik,
        loglik: pop.loglik,
        trace: vec![pop.loglik],
        iterations: pop.iterations,
        eta: 0.0,
        converged: pop.converged,
        kkt_residual: None,
        elapsed: pop_time,
    };
    let total_loglik = add.report.loglik + eval.report.loglik + source.loglik;
    Ok((
        params,
        FitSummary {
            addition: add.report,
            evaluation: eval.report,
            source,
            cross_validation: cv,
            total_loglik,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::EventRecord;
    use crate::intensity::total_loglik;
    use rand::Rng;
    use rand_distr::{Distribution, Exp};

    fn constant_cfg(horizon: f64) -> FitConfig {
        FitConfig {
            kernels: KernelSet::constant(horizon).unwrap(),
            eta_grid: vec![0.0],
            rel_tol: 1e-12,
            max_iters: 5000,
            ..FitConfig::default()
        }
    }

    fn ev(source: usize, t_add: f64, t_eval: Option<f64>) -> EventRecord {
        EventRecord {
            source,
            t_add,
            t_eval,
        }
    }

    #[test]
    fn poisson_rate_with_gamma_frozen() {
        let ds = Dataset::new(
            Polarity::Refutation,
            4.0,
            vec!["a".into()],
            vec![ItemHistory::new(
                "d",
                vec![ev(0, 1.0, Some(1.5)), ev(0, 2.0, None), ev(0, 3.0, None)],
                4.0,
            )],
        )
        .unwrap();
        let cfg = FitConfig {
            freeze_gamma: true,
            ..constant_cfg(4.0)
        };
        let fit = fit_addition_refutation(&ds, &TopicWeights::uniform(1).unwrap(), &cfg).unwrap();
        assert!((fit.phi[0][0] - 0.75).abs() < 1e-9);
        assert_eq!(fit.gamma[0][0], 0.0);

        let vds = Dataset::new(
            Polarity::Verification,
            4.0,
            vec!["a".into()],
            ds.items().to_vec(),
        )
        .unwrap();
        let vfit =
            fit_addition_verification(&vds, &TopicWeights::uniform(1).unwrap(), &cfg).unwrap();
        assert!((vfit.phi[0][0] - 0.75).abs() < 1e-6);
    }

    #[test]
    fn no_additions_means_zero_phi() {
        let ds = Dataset::new(
            Polarity::Refutation,
            4.0,
            vec!["a".into()],
            vec![ItemHistory::new("d", vec![], 4.0)],
        )
        .unwrap();
        let fit =
            fit_addition_refutation(&ds, &TopicWeights::uniform(1).unwrap(), &constant_cfg(4.0))
                .unwrap();
        assert_eq!(fit.phi, vec![vec![0.0]]);
    }

    #[test]
    fn exponential_delays_give_alpha_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let exp = Exp::new(2.0).unwrap();
        let horizon = 1e6;
        let n = 10_000;
        let items: Vec<ItemHistory> = (0..100)
            .map(|d| {
                let events = (0..n / 100)
                    .map(|i| {
                        let t = 1.0 + i as f64;
                        ev(0, t, Some(t + exp.sample(&mut rng)))
                    })
                    .collect();
                ItemHistory::new(format!("d{d}"), events, horizon)
            })
            .collect();
        let ds = Dataset::new(Polarity::Refutation, horizon, vec!["a".into()], items).unwrap();
        let cfg = FitConfig {
            freeze_beta: true,
            ..constant_cfg(horizon)
        };
        let fit = fit_evaluation(&ds, &TopicWeights::uniform(1).unwrap(), &cfg).unwrap();
        let total: f64 = ds
            .items()
            .iter()
            .flat_map(|d| &d.events)
            .map(|e| e.delay().unwrap())
            .sum();
        let mle = n as f64 / total;
        assert!((fit.alpha[0][0] - mle).abs() < 1e-9 * mle);
        let sd = 2.0 / (n as f64).sqrt();
        assert!((fit.alpha[0][0] - 2.0).abs() < 3.0 * sd);
    }

    #[test]
    fn all_censored_gives_zero() {
        let ds = Dataset::new(
            Polarity::Refutation,
            5.0,
            vec!["a".into()],
            vec![ItemHistory::new(
                "d",
                vec![ev(0, 1.0, None), ev(0, 2.0, None)],
                5.0,
            )],
        )
        .unwrap();
        let fit =
            fit_evaluation(&ds, &TopicWeights::uniform(1).unwrap(), &constant_cfg(5.0)).unwrap();
        assert_eq!(fit.alpha, vec![vec![0.0]]);
        assert_eq!(fit.beta, vec![vec![0.0]]);
    }

    fn small_corpus(polarity: Polarity, seed: u64) -> (Dataset, crate::simulator::TrueParams) {
        let mut kernels = crate::simulator::SyntheticConfig::default().kernels;
        if polarity == Polarity::Verification {
            // a truth whose unclamped intensity stays nonnegative
            kernels.addition = crate::kernels::BasisKernel::constant(15.0).unwrap();
        }
        let cfg = crate::simulator::SyntheticConfig {
            polarity,
            kernels,
            gamma_scale: if polarity == Polarity::Verification {
                0.1
            } else {
                0.5
            },
            n_sources: 8,
            n_items: 12,
            active_sources_per_item: 3,
            phi_prior: crate::simulator::LogNormalPrior { mean: 1.0, sd: 0.1 },
            seed,
            ..crate::simulator::SyntheticConfig::default()
        };
        crate::simulator::generate_synthetic_corpus(&cfg).unwrap()
    }

    #[test]
    fn decomposition_identity() {
        for polarity in [Polarity::Refutation, Polarity::Verification] {
            let (ds, truth) = small_corpus(polarity, 3);
            let cfg = FitConfig {
                kernels: truth.model.kernels.clone(),
                eta_grid: vec![0.1],
                ..FitConfig::default()
            };
            let (params, summary) = fit_all(&ds, &TopicWeights::uniform(1).unwrap(), &cfg).unwrap();
            let ll = total_loglik(&ds, &params).unwrap();
            assert!(
                (ll.total - summary.total_loglik).abs() < 1e-9 * ll.total.abs(),
                "{polarity:?}"
            );
            assert!((ll.addition - summary.addition.loglik).abs() < 1e-9 * ll.addition.abs());
            let penalty: f64 = params.items.iter().flat_map(|d| &d.beta).sum::<f64>() * 0.1;
            assert!(
                (summary.evaluation.objective + penalty - ll.evaluation).abs()
                    < 1e-9 * ll.evaluation.abs()
            );
            let truth_ll = total_loglik(&ds, &truth.model).unwrap();
            assert!(
                crate::intensity::compensator_discrepancy(&ds, &truth.model)
                    .unwrap()
                    .abs()
                    < 1e-9
            );
            assert!(
                ll.addition >= truth_ll.addition - 1e-6 * truth_ll.addition.abs(),
                "{polarity:?} {} {}",
                ll.addition,
                truth_ll.addition
            );
        }
    }

    #[test]
    fn mm_and_pg_agree_on_refutation() {
        let (ds, truth) = small_corpus(Polarity::Refutation, 4);
        let topics = TopicWeights::uniform(1).unwrap();
        let base = FitConfig {
            kernels: truth.model.kernels.clone(),
            eta_grid: vec![0.0],
            rel_tol: 1e-11,
            max_iters: 20_000,
            ..FitConfig::default()
        };
        let mm = fit_addition_refutation(&ds, &topics, &base).unwrap();
        let pg = fit_addition_refutation(
            &ds,
            &topics,
            &FitConfig {
                solver: Solver::ProjectedGradient,
                ..base.clone()
            },
        )
        .unwrap();
        let (a, b) = (mm.report.objective, pg.report.objective);
        assert!((a - b).abs() <= 1e-4 * a.abs(), "{a} vs {b}");
    }

    #[test]
    fn verification_fit_respects_signs() {
        let (ds, truth) = small_corpus(Polarity::Verification, 5);
        let cfg = FitConfig {
            kernels: truth.model.kernels.clone(),
            eta_grid: vec![0.0],
            ..FitConfig::default()
        };
        let fit = fit_addition_verification(&ds, &TopicWeights::uniform(1).unwrap(), &cfg).unwrap();
        assert!(fit.gamma.iter().flatten().all(|g| *g <= 0.0));
        assert!(fit.phi.iter().flatten().all(|x| *x >= 0.0));
        assert!(fit.report.kkt_residual.is_some());
    }

    #[test]
    fn cross_validation_single_eta() {
        let (ds, truth) = small_corpus(Polarity::Refutation, 6);
        let cfg = FitConfig {
            kernels: truth.model.kernels.clone(),
            eta_grid: vec![0.0],
            ..FitConfig::default()
        };
        let cv = cross_validate_eta(&ds, &TopicWeights::uniform(1).unwrap(), &cfg).unwrap();
        assert_eq!(cv.chosen_eta, 0.0);
    }

    #[test]
    fn degenerate_folds_are_rejected() {
        let (ds, truth) = small_corpus(Polarity::Refutation, 6);
        let cfg = FitConfig {
            kernels: truth.model.kernels.clone(),
            cv_folds: 50,
            ..FitConfig::default()
        };
        assert!(matches!(
            cross_validate_eta(&ds, &TopicWeights::uniform(1).unwrap(), &cfg),
            Err(FitError::DegenerateFolds { .. })
        ));
    }

    #[test]
    fn random_starts_agree() {
        let (ds, truth) = small_corpus(Polarity::Refutation, 7);
        let topics = TopicWeights::uniform(1).unwrap();
        let mut objs = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..3 {
            let cfg = FitConfig {
                kernels: truth.model.kernels.clone(),
                eta_grid: vec![0.1],
                init_seed: Some(rng.random()),
                rel_tol: 1e-10,
                max_iters: 10_000,
                ..FitConfig::default()
            };
            objs.push(fit_evaluation(&ds, &topics, &cfg).unwrap().report.objective);
        }
        for o in &objs {
            assert!((o - objs[0]).abs() <= 1e-6 * objs[0].abs());
        }
    }
}
