//! Synthetic traces from the generative model.
//!
//! Addition times are drawn by Ogata thinning with a piecewise dominating
//! rate that is refreshed at every accepted event and every evaluation;
//! each accepted addition is marked with a sampled source and a sampled
//! evaluation delay, and evaluations feed back into the addition rate.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Exp1, Gamma, LogNormal, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::event::{Dataset, EventError, EventRecord, ItemHistory, Polarity, TopicWeights};
use crate::intensity::addition_intensity_raw;
use crate::kernels::{BasisKernel, TriggerKernel};
use crate::params::{ItemParams, KernelSet, ModelParams, ParamsError, SourceParams};

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("invalid config field `{field}`: {message}")]
    InvalidConfig {
        field: &'static str,
        message: String,
    },
    #[error("dominating rate {bound} exceeded by intensity {rate} at t = {t} (item {item:?})")]
    BoundExceeded {
        item: String,
        t: f64,
        rate: f64,
        bound: f64,
    },
    #[error("hazard bound is not finite on [{0}, {1}]")]
    UnboundedHazard(f64, f64),
    #[error(transparent)]
    Params(#[from] ParamsError),
    #[error(transparent)]
    Event(#[from] EventError),
}

fn invalid(field: &'static str, message: impl Into<String>) -> SimError {
    SimError::InvalidConfig {
        field,
        message: message.into(),
    }
}

/// A hazard function with a computable upper bound on any interval.
pub trait Hazard {
    fn rate(&self, t: f64) -> f64;
    /// An upper bound of `rate` on `[t0, t1]`.
    fn upper_bound(&self, t0: f64, t1: f64) -> f64;
    /// Preferred length of the intervals the bound is taken over.
    fn step_hint(&self) -> f64 {
        f64::INFINITY
    }
}

/// Time-invariant hazard.
#[derive(Debug, Clone, Copy)]
pub struct ConstantHazard(pub f64);

impl Hazard for ConstantHazard {
    fn rate(&self, _t: f64) -> f64 {
        self.0
    }
    fn upper_bound(&self, _t0: f64, _t1: f64) -> f64 {
        self.0
    }
}

/// Hazard given by a pair of closures.
pub struct FnHazard<F, G> {
    pub rate: F,
    pub bound: G,
    pub step: f64,
}

impl<F: Fn(f64) -> f64, G: Fn(f64, f64) -> f64> Hazard for FnHazard<F, G> {
    fn rate(&self, t: f64) -> f64 {
        (self.rate)(t)
    }
    fn upper_bound(&self, t0: f64, t1: f64) -> f64 {
        (self.bound)(t0, t1)
    }
    fn step_hint(&self) -> f64 {
        self.step
    }
}

/// Evaluation hazard of a statement added at `t_add`:
/// `Σ_j β_j k_j(t_add + t) + base`.
pub struct StatementHazard<'a> {
    pub kernel: &'a BasisKernel,
    pub beta: &'a [f64],
    pub t_add: f64,
    pub base: f64,
}

impl Hazard for StatementHazard<'_> {
    fn rate(&self, t: f64) -> f64 {
        self.kernel.mixture(self.beta, self.t_add + t) + self.base
    }
    fn upper_bound(&self, t0: f64, t1: f64) -> f64 {
        self.kernel
            .mixture_sup(self.beta, self.t_add + t0, self.t_add + t1)
            + self.base
    }
    fn step_hint(&self) -> f64 {
        if self.beta.iter().all(|b| *b == 0.0) {
            f64::INFINITY
        } else {
            0.5 * self.kernel.resolution()
        }
    }
}

const BOUND_SLACK: f64 = 1e-9;

/// Time of the single event of a survival process with the given hazard on
/// `[0, t_max]`, by thinning; `None` when no event happens by `t_max`.
pub fn sample_evaluation_delay<H: Hazard + ?Sized, R: Rng + ?Sized>(
    hazard: &H,
    t_max: f64,
    rng: &mut R,
) -> Result<Option<f64>, SimError> {
    let step = hazard.step_hint();
    let mut t = 0.0;
    while t < t_max {
        let seg_end = if step.is_finite() {
            (t + step).min(t_max)
        } else {
            t_max
        };
        let bound = hazard.upper_bound(t, seg_end);
        if !bound.is_finite() {
            return Err(SimError::UnboundedHazard(t, seg_end));
        }
        if bound <= 0.0 {
            t = seg_end;
            continue;
        }
        let e: f64 = rng.sample(Exp1);
        let cand = t + e / bound;
        if cand >= seg_end {
            t = seg_end;
            continue;
        }
        t = cand;
        let r = hazard.rate(t);
        if r > bound * (1.0 + BOUND_SLACK) {
            return Err(SimError::BoundExceeded {
                item: String::new(),
                t,
                rate: r,
                bound,
            });
        }
        if rng.random::<f64>() * bound <= r {
            return Ok(Some(t));
        }
    }
    Ok(None)
}

/// Draws a topic from `w`, then a source from that topic's popularity.
pub fn sample_source<R: Rng + ?Sized>(w: &[f64], pi: &[Vec<f64>], rng: &mut R) -> usize {
    let topic = WeightedIndex::new(w).expect("topic weights must form a distribution");
    let l = topic.sample(rng);
    WeightedIndex::new(&pi[l])
        .expect("source popularity must form a distribution")
        .sample(rng)
}

/// How the sources of an item's statements are drawn.
#[derive(Debug, Clone)]
pub enum SourceSampler {
    /// `p(s|d) = Σ_l w_l π_l(s)`, drawn topic first.
    TopicMixture {
        topics: WeightedIndex<f64>,
        per_topic: Vec<Option<WeightedIndex<f64>>>,
    },
    /// An item-specific categorical distribution over `sources`.
    Item {
        sources: Vec<usize>,
        weights: WeightedIndex<f64>,
    },
}

impl SourceSampler {
    pub fn topic_mixture(w: &[f64], pi: &[Vec<f64>]) -> Result<Self, SimError> {
        let topics = WeightedIndex::new(w).map_err(|e| invalid("w", e.to_string()))?;
        let per_topic = pi
            .iter()
            .zip(w)
            .map(|(row, wl)| {
                if *wl > 0.0 {
                    WeightedIndex::new(row)
                        .map(Some)
                        .map_err(|e| invalid("pi", e.to_string()))
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<_, _>>()?;
        Ok(SourceSampler::TopicMixture { topics, per_topic })
    }

    pub fn item(sources: Vec<usize>, probs: &[f64]) -> Result<Self, SimError> {
        let weights =
            WeightedIndex::new(probs).map_err(|e| invalid("source weights", e.to_string()))?;
        Ok(SourceSampler::Item { sources, weights })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        match self {
            SourceSampler::TopicMixture { topics, per_topic } => {
                let l = topics.sample(rng);
                per_topic[l]
                    .as_ref()
                    .expect("topic with positive weight")
                    .sample(rng)
            }
            SourceSampler::Item { sources, weights } => sources[weights.sample(rng)],
        }
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Time(f64);
impl Eq for Time {}
impl PartialOrd for Time {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Time {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Simulates one item's statements on `(0, T)` under `p`.
pub fn simulate_item<R: Rng + ?Sized>(
    p: &ModelParams,
    item: &ItemParams,
    sources: &SourceSampler,
    rng: &mut R,
) -> Result<ItemHistory, SimError> {
    let horizon = p.horizon;
    let add_kernel = &p.kernels.addition;
    let trigger = p.kernels.trigger;
    let step = add_kernel.resolution() * 0.5;

    let mut events: Vec<EventRecord> = Vec::new();
    // (τ, w·γ) of evaluations already in the history, in τ order
    let mut effects: Vec<(f64, f64)> = Vec::new();
    // (τ, statement index) of evaluations still to come
    let mut pending: BinaryHeap<Reverse<(Time, usize)>> = BinaryHeap::new();

    let mut t = 0.0;
    while t < horizon {
        let next_eval = pending
            .peek()
            .map_or(f64::INFINITY, |Reverse((tau, _))| tau.0);
        let seg_end = (t + step).min(next_eval).min(horizon);
        let mut bound = add_kernel.mixture_sup(&item.phi, t, seg_end);
        for &(tau, c) in &effects {
            if c > 0.0 {
                bound += c * trigger.eval(t - tau);
            }
        }
        let cand = if bound > 0.0 {
            t + rng.sample::<f64, _>(Exp1) / bound
        } else {
            f64::INFINITY
        };
        if cand >= seg_end {
            t = seg_end;
            while let Some(Reverse((tau, idx))) = pending.peek().copied() {
                if tau.0 > t {
                    break;
                }
                pending.pop();
                let e = &events[idx];
                effects.push((tau.0, p.impact(e.source, &item.w)));
            }
            continue;
        }
        t = cand;
        let raw = addition_intensity_raw(item, p, &effects, t);
        let rate = match p.polarity {
            Polarity::Refutation => raw,
            Polarity::Verification => raw.max(0.0),
        };
        if rate > bound * (1.0 + BOUND_SLACK) {
            return Err(SimError::BoundExceeded {
                item: item.id.clone(),
                t,
                rate,
                bound,
            });
        }
        if rng.random::<f64>() * bound > rate {
            continue;
        }
        let source = sources.sample(rng);
        let hazard = StatementHazard {
            kernel: &p.kernels.evaluation,
            beta: &item.beta,
            t_add: t,
            base: p.trust(source, &item.w),
        };
        let delay = sample_evaluation_delay(&hazard, horizon - t, rng).map_err(|e| match e {
            SimError::BoundExceeded {
                t: at, rate, bound, ..
            } => SimError::BoundExceeded {
                item: item.id.clone(),
                t: at,
                rate,
                bound,
            },
            other => other,
        })?;
        let t_eval = delay.map(|dl| t + dl).filter(|&te| te < horizon && te > t);
        if let Some(te) = t_eval {
            pending.push(Reverse((Time(te), events.len())));
        }
        events.push(EventRecord {
            source,
            t_add: t,
            t_eval,
        });
    }
    Ok(ItemHistory {
        id: item.id.clone(),
        events,
        horizon,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BetaPrior {
    pub a: f64,
    pub b: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogNormalPrior {
    /// Mean of the underlying normal.
    pub mean: f64,
    /// Standard deviation of the underlying normal.
    pub sd: f64,
}

/// Priors and layout of a synthetic corpus. Defaults reproduce the
/// reference protocol: 400 sources, 3600 items, one topic, refutation,
/// `alpha ~ Beta(2, 5)`, `gamma ~ U(0, 0.03 max alpha)`,
/// `phi ~ lnN(3.5, 0.1)`, `beta ~ U(0, 0.2 phi)`, RBF kernels at 0, 6, 12
/// (sigma 2 for additions, 0.5 for evaluations), one active kernel per item,
/// up to five active sources per item with Dirichlet(0.5) weights, `T = 15`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_sources: usize,
    pub n_items: usize,
    pub n_topics: usize,
    /// Dirichlet concentration of item topic weights (more than one topic).
    pub topic_concentration: f64,
    pub polarity: Polarity,
    pub alpha_prior: BetaPrior,
    /// Multiplier applied to every alpha draw.
    pub alpha_scale: f64,
    /// `gamma ~ U(0, gamma_scale * max alpha)` (negated for verification).
    pub gamma_scale: f64,
    pub phi_prior: LogNormalPrior,
    /// `beta ~ U(0, beta_fraction * phi)` on the item's active kernel.
    pub beta_fraction: f64,
    pub kernels: KernelSet,
    /// One active basis kernel per item, shared by both processes.
    pub single_active_kernel: bool,
    pub active_sources_per_item: usize,
    pub source_concentration: f64,
    /// Log-normal spread of per-source activity used when picking each
    /// item's active sources (0 = uniform).
    pub activity_log_sd: f64,
    pub horizon: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let centers = vec![0.0, 6.0, 12.0];
        SyntheticConfig {
            n_sources: 400,
            n_items: 3600,
            n_topics: 1,
            topic_concentration: 1.0,
            polarity: Polarity::Refutation,
            alpha_prior: BetaPrior { a: 2.0, b: 5.0 },
            alpha_scale: 1.0,
            gamma_scale: 0.03,
            phi_prior: LogNormalPrior { mean: 3.5, sd: 0.1 },
            beta_fraction: 0.2,
            kernels: KernelSet {
                addition: BasisKernel::Rbf {
                    centers: centers.clone(),
                    sigma: 2.0,
                },
                evaluation: BasisKernel::Rbf {
                    centers,
                    sigma: 0.5,
                },
                trigger: TriggerKernel::Exponential { omega: 0.5 },
            },
            single_active_kernel: true,
            active_sources_per_item: 5,
            source_concentration: 0.5,
            activity_log_sd: 0.0,
            horizon: 15.0,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    /// The reference protocol at a reduced number of sources and items.
    pub fn desk_scale(n_sources: usize, n_items: usize, seed: u64) -> Self {
        SyntheticConfig {
            n_sources,
            n_items,
            seed,
            ..SyntheticConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let positive = |field: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("must be positive, got {v}")))
            }
        };
        let nonneg = |field: &'static str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(invalid(field, format!("must be nonnegative, got {v}")))
            }
        };
        if self.n_sources == 0 {
            return Err(invalid("n_sources", "must be at least 1"));
        }
        if self.n_topics == 0 {
            return Err(invalid("n_topics", "must be at least 1"));
        }
        positive("topic_concentration", self.topic_concentration)?;
        positive("alpha_prior.a", self.alpha_prior.a)?;
        positive("alpha_prior.b", self.alpha_prior.b)?;
        positive("alpha_scale", self.alpha_scale)?;
        nonneg("gamma_scale", self.gamma_scale)?;
        if !self.phi_prior.mean.is_finite() {
            return Err(invalid("phi_prior.mean", "must be finite"));
        }
        positive("phi_prior.sd", self.phi_prior.sd)?;
        nonneg("beta_fraction", self.beta_fraction)?;
        positive("source_concentration", self.source_concentration)?;
        nonneg("activity_log_sd", self.activity_log_sd)?;
        positive("horizon", self.horizon)?;
        if self.active_sources_per_item == 0 {
            return Err(invalid("active_sources_per_item", "must be at least 1"));
        }
        if self.active_sources_per_item > self.n_sources {
            return Err(invalid(
                "active_sources_per_item",
                format!(
                    "cap {} exceeds n_sources {}",
                    self.active_sources_per_item, self.n_sources
                ),
            ));
        }
        self.kernels
            .validate()
            .map_err(|e| invalid("kernels", e.to_string()))?;
        for (field, k) in [
            ("kernels.addition", &self.kernels.addition),
            ("kernels.evaluation", &self.kernels.evaluation),
        ] {
            if let BasisKernel::Constant { horizon } = k {
                if *horizon != self.horizon {
                    return Err(invalid(
                        field,
                        "constant kernel horizon must equal the corpus horizon",
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Parameters a synthetic corpus was generated from.
#[derive(Debug, Clone, PartialEq)]
pub struct TrueParams {
    pub model: ModelParams,
    pub seed: u64,
    /// Each item's active sources and their probabilities.
    pub item_sources: Vec<Vec<(usize, f64)>>,
}

impl TrueParams {
    /// The generating topic weights of every item.
    pub fn topics(&self) -> Result<TopicWeights, EventError> {
        let mut topics = TopicWeights::uniform(self.model.n_topics)?;
        for d in &self.model.items {
            topics.insert(d.id.clone(), d.w.clone())?;
        }
        Ok(topics)
    }
}

fn dirichlet<R: Rng + ?Sized>(concentration: f64, k: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
    let sum: f64 = draws.iter().sum();
    if sum > 0.0 && sum.is_finite() {
        draws.into_iter().map(|g| g / sum).collect()
    } else {
        vec![1.0 / k as f64; k]
    }
}

/// `k` distinct indices drawn without replacement with probabilities
/// proportional to `weights` (Efraimidis–Spirakis keys).
fn weighted_subset<R: Rng + ?Sized>(weights: &[f64], k: usize, rng: &mut R) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, w)| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (u.ln() / w, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, i)| i).collect()
}

/// Random stream for item `index` of a corpus seeded with `seed`; stream 0
/// is reserved for parameter draws.
pub fn item_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64 + 1);
    rng
}

/// Samples every parameter from the configured priors and simulates each
/// item on `(0, T)`. Items run in parallel on independent streams, so the
/// output does not depend on the thread count.
pub fn generate_synthetic_corpus(cfg: &SyntheticConfig) -> Result<(Dataset, TrueParams), SimError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let l = cfg.n_topics;

    let alpha_dist = Beta::new(cfg.alpha_prior.a, cfg.alpha_prior.b)
        .map_err(|e| invalid("alpha_prior", e.to_string()))?;
    let alphas: Vec<Vec<f64>> = (0..cfg.n_sources)
        .map(|_| {
            (0..l)
                .map(|_| cfg.alpha_scale * alpha_dist.sample(&mut rng))
                .collect()
        })
        .collect();
    let max_alpha = alphas.iter().flatten().copied().fold(0.0, f64::max);
    let gamma_bound = cfg.gamma_scale * max_alpha;
    let sign = match cfg.polarity {
        Polarity::Refutation => 1.0,
        Polarity::Verification => -1.0,
    };
    let sources: Vec<SourceParams> = alphas
        .into_iter()
        .enumerate()
        .map(|(k, alpha)| SourceParams {
            id: format!("s{k}"),
            alpha,
            gamma: (0..l)
                .map(|_| sign * gamma_bound * rng.random::<f64>())
                .collect(),
        })
        .collect();
    let activity: Vec<f64> = if cfg.activity_log_sd > 0.0 {
        let normal = Normal::new(0.0, cfg.activity_log_sd).expect("valid sd");
        (0..cfg.n_sources)
            .map(|_| normal.sample(&mut rng).exp())
            .collect()
    } else {
        vec![1.0; cfg.n_sources]
    };

    let phi_dist = LogNormal::new(cfg.phi_prior.mean, cfg.phi_prior.sd)
        .map_err(|e| invalid("phi_prior", e.to_string()))?;
    let ja = cfg.kernels.addition.len();
    let je = cfg.kernels.evaluation.len();
    let mut items = Vec::with_capacity(cfg.n_items);
    let mut item_sources = Vec::with_capacity(cfg.n_items);
    for d in 0..cfg.n_items {
        let w = if l == 1 {
            vec![1.0]
        } else {
            dirichlet(cfg.topic_concentration, l, &mut rng)
        };
        let mut phi = vec![0.0; ja];
        let mut beta = vec![0.0; je];
        if cfg.single_active_kernel {
            let j_add = rng.random_range(0..ja);
            let j_eval = if je == ja {
                j_add
            } else {
                rng.random_range(0..je)
            };
            phi[j_add] = phi_dist.sample(&mut rng);
            beta[j_eval] = rng.random::<f64>() * cfg.beta_fraction * phi[j_add];
        } else {
            for x in phi.iter_mut() {
                *x = phi_dist.sample(&mut rng);
            }
            for (j, b) in beta.iter_mut().enumerate() {
                *b = rng.random::<f64>() * cfg.beta_fraction * phi[j.min(ja - 1)];
            }
        }
        let active = weighted_subset(&activity, cfg.active_sources_per_item, &mut rng);
        let probs = dirichlet(cfg.source_concentration, active.len(), &mut rng);
        item_sources.push(active.into_iter().zip(probs).collect::<Vec<_>>());
        items.push(ItemParams {
            id: format!("d{d}"),
            phi,
            beta,
            w,
        });
    }

    // topic-level popularity implied by the item-level source distributions
    let mut pi = vec![vec![0.0; cfg.n_sources]; l];
    let mut mass = vec![0.0; l];
    for (item, dist) in items.iter().zip(&item_sources) {
        for (ll, wl) in item.w.iter().enumerate() {
            mass[ll] += wl;
            for &(s, q) in dist {
                pi[ll][s] += wl * q;
            }
        }
    }
    for (row, m) in pi.iter_mut().zip(&mass) {
        if *m > 0.0 {
            let total: f64 = row.iter().sum();
            row.iter_mut().for_each(|x| *x /= total);
        } else {
            row.iter_mut().for_each(|x| *x = 1.0 / cfg.n_sources as f64);
        }
    }

    let model = ModelParams::new(
        cfg.polarity,
        cfg.horizon,
        l,
        cfg.kernels.clone(),
        0.0,
        sources,
        items,
        pi,
    )?;

    let histories: Vec<ItemHistory> = model
        .items
        .par_iter()
        .zip(item_sources.par_iter())
        .enumerate()
        .map(|(d, (item, dist))| {
            let (idx, probs): (Vec<usize>, Vec<f64>) = dist.iter().copied().unzip();
            let sampler = SourceSampler::item(idx, &probs)?;
            let mut rng = item_rng(cfg.seed, d);
            simulate_item(&model, item, &sampler, &mut rng)
        })
        .collect::<Result<_, _>>()?;

    let ds = Dataset::new(cfg.polarity, cfg.horizon, model.source_ids(), histories)?;
    Ok((
        ds,
        TrueParams {
            model,
            seed: cfg.seed,
            item_sources,
        },
    ))
}
