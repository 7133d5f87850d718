//! Addition intensity `λ_d(t)`, statement evaluation hazard `μ_i(t)` and the
//! three log-likelihood terms.
//!
//! ```text
//! λ_d(t) = Σ_j φ_dj k_j(t) + Σ_{i: τ_i < t} (w_d·γ_{s_i}) g(t - τ_i)
//! μ_i(t) = 1[t <= Δ_i] (Σ_j β_dj k_j(t_i + t) + w_d·α_{s_i})
//! ```
//!
//! Histories are strict: an event at time `t` only sees statements added and
//! evaluations happening before `t`. For verification data `λ_d` is clamped
//! at zero; the likelihood compensator uses the unclamped form, which keeps
//! the fitting objective concave.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::event::{Dataset, ItemHistory, Polarity};
use crate::params::{ItemParams, ModelParams};
use crate::quadrature;
use crate::stats::pairwise_sum;

/// Which likelihood term degenerated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Term {
    Addition,
    Evaluation,
    Source,
}

impl std::fmt::Display for Term {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Term::Addition => "addition",
            Term::Evaluation => "evaluation",
            Term::Source => "source",
        })
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IntensityError {
    #[error("time {t} is outside the observation window [0, {horizon})")]
    OutsideWindow { t: f64, horizon: f64 },
    #[error("item {item:?} has no statement {index}")]
    InvalidStatement { item: String, index: usize },
    #[error("negative elapsed time {0}")]
    NegativeTime(f64),
    #[error("model has no parameters for item {0:?}")]
    UnknownItem(String),
    /// A log-likelihood is `-∞`: an observed event happened where the model
    /// puts zero intensity.
    #[error("log-likelihood is -inf: zero {term} intensity in item {item:?} (statement {statement:?}, t = {time})")]
    ZeroIntensity {
        term: Term,
        item: String,
        statement: Option<usize>,
        time: f64,
    },
}

impl IntensityError {
    pub fn is_degenerate(&self) -> bool {
        matches!(self, IntensityError::ZeroIntensity { .. })
    }
}

/// Evaluated statements of an item as `(τ_i, w·γ_{s_i})`, sorted by `τ`.
pub fn evaluation_effects(d: &ItemHistory, item: &ItemParams, p: &ModelParams) -> Vec<(f64, f64)> {
    let mut out: Vec<(f64, f64)> = d
        .events
        .iter()
        .filter_map(|e| e.t_eval.map(|tau| (tau, p.impact(e.source, &item.w))))
        .collect();
    out.sort_by(|a, b| a.0.total_cmp(&b.0));
    out
}

/// Unclamped addition intensity at `t` given precomputed evaluation effects.
#[inline]
pub fn addition_intensity_raw(
    item: &ItemParams,
    p: &ModelParams,
    effects: &[(f64, f64)],
    t: f64,
) -> f64 {
    let mut lam = p.kernels.addition.mixture(&item.phi, t);
    for &(tau, c) in effects {
        if tau >= t {
            break;
        }
        lam += c * p.kernels.trigger.eval(t - tau);
    }
    lam
}

/// `λ_d(t)` for `t` in `[0, T)`, clamped at zero.
pub fn addition_intensity(
    d: &ItemHistory,
    item: &ItemParams,
    p: &ModelParams,
    t: f64,
) -> Result<f64, IntensityError> {
    if !(t >= 0.0 && t < d.horizon) {
        return Err(IntensityError::OutsideWindow {
            t,
            horizon: d.horizon,
        });
    }
    let effects = evaluation_effects(d, item, p);
    Ok(addition_intensity_raw(item, p, &effects, t).max(0.0))
}

/// Closed-form `∫_a^b` of the unclamped addition intensity.
pub fn addition_compensator(
    d: &ItemHistory,
    item: &ItemParams,
    p: &ModelParams,
    a: f64,
    b: f64,
) -> f64 {
    let effects = evaluation_effects(d, item, p);
    compensator_from_effects(item, p, &effects, a, b)
}

pub(crate) fn compensator_from_effects(
    item: &ItemParams,
    p: &ModelParams,
    effects: &[(f64, f64)],
    a: f64,
    b: f64,
) -> f64 {
    let mut total = p.kernels.addition.mixture_mass(&item.phi, a, b);
    for &(tau, c) in effects {
        if tau >= b {
            break;
        }
        total += c * p.kernels.trigger.mass(a - tau, b - tau);
    }
    total
}

/// `∫_a^b max(λ_raw, 0)`. Equals [`addition_compensator`] for refutation
/// data; for verification data it is integrated numerically.
pub fn addition_compensator_clamped(
    d: &ItemHistory,
    item: &ItemParams,
    p: &ModelParams,
    a: f64,
    b: f64,
) -> f64 {
    let effects = evaluation_effects(d, item, p);
    match p.polarity {
        Polarity::Refutation => compensator_from_effects(item, p, &effects, a, b),
        Polarity::Verification => {
            let mut breaks: Vec<f64> = effects.iter().map(|e| e.0).collect();
            breaks.extend(p.kernels.addition.breakpoints());
            quadrature::integrate_with_breaks(
                |t| addition_intensity_raw(item, p, &effects, t).max(0.0),
                a,
                b,
                &breaks,
                1e-12,
                1e-10,
            )
            .value
        }
    }
}

fn statement(d: &ItemHistory, i: usize) -> Result<&crate::event::EventRecord, IntensityError> {
    d.events
        .get(i)
        .ok_or_else(|| IntensityError::InvalidStatement {
            item: d.id.clone(),
            index: i,
        })
}

/// Hazard of statement `i` at elapsed time `t` since its addition, ignoring
/// whether it has been evaluated.
#[inline]
pub fn evaluation_rate(
    item: &ItemParams,
    p: &ModelParams,
    source: usize,
    t_add: f64,
    t: f64,
) -> f64 {
    p.kernels.evaluation.mixture(&item.beta, t_add + t) + p.trust(source, &item.w)
}

/// `μ_i(t)`: zero once the statement has been evaluated.
pub fn evaluation_intensity(
    d: &ItemHistory,
    i: usize,
    item: &ItemParams,
    p: &ModelParams,
    t: f64,
) -> Result<f64, IntensityError> {
    let e = statement(d, i)?;
    if t < 0.0 {
        return Err(IntensityError::NegativeTime(t));
    }
    if matches!(e.delay(), Some(delta) if t > delta) {
        return Ok(0.0);
    }
    Ok(evaluation_rate(item, p, e.source, e.t_add, t))
}

/// `∫_0^x` of the (unterminated) hazard of a statement added at `t_add`.
#[inline]
pub fn evaluation_compensator(
    item: &ItemParams,
    p: &ModelParams,
    source: usize,
    t_add: f64,
    x: f64,
) -> f64 {
    p.kernels
        .evaluation
        .mixture_mass(&item.beta, t_add, t_add + x)
        + p.trust(source, &item.w) * x
}

/// Point-process log-likelihood of the item's addition times on `[0, T)`.
pub fn addition_loglik(
    d: &ItemHistory,
    item: &ItemParams,
    p: &ModelParams,
) -> Result<f64, IntensityError> {
    let effects = evaluation_effects(d, item, p);
    let mut logs = Vec::with_capacity(d.len());
    for (k, e) in d.events.iter().enumerate() {
        let lam = addition_intensity_raw(item, p, &effects, e.t_add);
        if !(lam > 0.0) {
            return Err(IntensityError::ZeroIntensity {
                term: Term::Addition,
                item: d.id.clone(),
                statement: Some(k),
                time: e.t_add,
            });
        }
        logs.push(lam.ln());
    }
    Ok(pairwise_sum(&logs) - compensator_from_effects(item, p, &effects, 0.0, d.horizon))
}

/// Log-likelihood of statement `i`'s evaluation delay: density if evaluated,
/// survival to the horizon if censored.
pub fn evaluation_loglik(
    d: &ItemHistory,
    i: usize,
    item: &ItemParams,
    p: &ModelParams,
) -> Result<f64, IntensityError> {
    let e = statement(d, i)?;
    let x = e.exposure(d.horizon);
    let comp = evaluation_compensator(item, p, e.source, e.t_add, x);
    match e.delay() {
        None => Ok(-comp),
        Some(delta) => {
            let mu = evaluation_rate(item, p, e.source, e.t_add, delta);
            if !(mu > 0.0) {
                return Err(IntensityError::ZeroIntensity {
                    term: Term::Evaluation,
                    item: d.id.clone(),
                    statement: Some(i),
                    time: e.t_add + delta,
                });
            }
            Ok(mu.ln() - comp)
        }
    }
}

/// Sum of [`evaluation_loglik`] over the item's statements.
pub fn item_evaluation_loglik(
    d: &ItemHistory,
    item: &ItemParams,
    p: &ModelParams,
) -> Result<f64, IntensityError> {
    let terms = (0..d.len())
        .map(|i| evaluation_loglik(d, i, item, p))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(pairwise_sum(&terms))
}

/// `Σ_i log Σ_l w_l π_l(s_i)`.
pub fn source_loglik(
    d: &ItemHistory,
    item: &ItemParams,
    p: &ModelParams,
) -> Result<f64, IntensityError> {
    let mut logs = Vec::with_capacity(d.len());
    for (k, e) in d.events.iter().enumerate() {
        let prob = p.source_probability(e.source, &item.w);
        if !(prob > 0.0) {
            return Err(IntensityError::ZeroIntensity {
                term: Term::Source,
                item: d.id.clone(),
                statement: Some(k),
                time: e.t_add,
            });
        }
        logs.push(prob.ln());
    }
    Ok(pairwise_sum(&logs))
}

/// Per-term log-likelihood of a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LogLikBreakdown {
    pub addition: f64,
    pub evaluation: f64,
    pub source: f64,
    pub total: f64,
}

/// Log-likelihood of one item (all three terms).
pub fn item_loglik(
    d: &ItemHistory,
    item: &ItemParams,
    p: &ModelParams,
) -> Result<LogLikBreakdown, IntensityError> {
    let addition = addition_loglik(d, item, p)?;
    let evaluation = item_evaluation_loglik(d, item, p)?;
    let source = source_loglik(d, item, p)?;
    Ok(LogLikBreakdown {
        addition,
        evaluation,
        source,
        total: addition + evaluation + source,
    })
}

/// Log-likelihood of every item of `ds` under `p`. Items are matched by id;
/// per-item terms are computed in parallel and reduced in a fixed order.
pub fn total_loglik(ds: &Dataset, p: &ModelParams) -> Result<LogLikBreakdown, IntensityError> {
    let per_item: Vec<LogLikBreakdown> = ds
        .items()
        .par_iter()
        .map(|d| {
            let item = p
                .item(&d.id)
                .ok_or_else(|| IntensityError::UnknownItem(d.id.clone()))?;
            item_loglik(d, item, p)
        })
        .collect::<Result<_, _>>()?;
    let sum =
        |f: fn(&LogLikBreakdown) -> f64| pairwise_sum(&per_item.iter().map(f).collect::<Vec<_>>());
    let addition = sum(|b| b.addition);
    let evaluation = sum(|b| b.evaluation);
    let source = sum(|b| b.source);
    Ok(LogLikBreakdown {
        addition,
        evaluation,
        source,
        total: addition + evaluation + source,
    })
}

/// `Σ_d (∫ max(λ_d, 0) - ∫ λ_d)`: how much the clamped verification
/// intensity differs from the unclamped one used in fitting.
pub fn compensator_discrepancy(ds: &Dataset, p: &ModelParams) -> Result<f64, IntensityError> {
    let parts: Vec<f64> = ds
        .items()
        .par_iter()
        .map(|d| {
            let item = p
                .item(&d.id)
                .ok_or_else(|| IntensityError::UnknownItem(d.id.clone()))?;
            Ok(addition_compensator_clamped(d, item, p, 0.0, d.horizon)
                - addition_compensator(d, item, p, 0.0, d.horizon))
        })
        .collect::<Result<_, IntensityError>>()?;
    Ok(pairwise_sum(&parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::EventRecord;
    use crate::kernels::{BasisKernel, TriggerKernel};
    use crate::params::{KernelSet, SourceParams};
    use approx::assert_relative_eq;

    fn model(
        polarity: Polarity,
        kernels: KernelSet,
        alpha: f64,
        gamma: f64,
        phi: Vec<f64>,
        beta: Vec<f64>,
    ) -> ModelParams {
        ModelParams::new(
            polarity,
            15.0,
            1,
            kernels,
            0.0,
            vec![SourceParams {
                id: "s".into(),
                alpha: vec![alpha],
                gamma: vec![gamma],
            }],
            vec![ItemParams {
                id: "d".into(),
                phi,
                beta,
                w: vec![1.0],
            }],
            vec![vec![1.0]],
        )
        .unwrap()
    }

    fn constant_kernels(trigger: TriggerKernel) -> KernelSet {
        KernelSet {
            addition: BasisKernel::constant(15.0).unwrap(),
            evaluation: BasisKernel::constant(15.0).unwrap(),
            trigger,
        }
    }

    fn history(events: &[(f64, Option<f64>)], horizon: f64) -> ItemHistory {
        ItemHistory::new(
            "d",
            events
                .iter()
                .map(|&(t, te)| EventRecord {
                    source: 0,
                    t_add: t,
                    t_eval: te,
                })
                .collect(),
            horizon,
        )
    }

    #[test]
    fn constant_addition_intensity() {
        let p = model(
            Polarity::Refutation,
            constant_kernels(TriggerKernel::Step),
            0.0,
            0.0,
            vec![2.0],
            vec![0.0],
        );
        let d = history(&[(1.0, None)], 15.0);
        assert_eq!(addition_intensity(&d, &p.items[0], &p, 7.3).unwrap(), 2.0);
        assert!(matches!(
            addition_intensity(&d, &p.items[0], &p, 15.0),
            Err(IntensityError::OutsideWindow { .. })
        ));
    }

    #[test]
    fn refutation_excitation() {
        let p = model(
            Polarity::Refutation,
            constant_kernels(TriggerKernel::exponential(0.5).unwrap()),
            0.0,
            0.5,
            vec![1.0],
            vec![0.0],
        );
        let d = history(&[(0.5, Some(1.0))], 15.0);
        let lam = addition_intensity(&d, &p.items[0], &p, 3.0).unwrap();
        // independent summation: 1 + 0.5 * exp(-0.5 * (3 - 1))
        let expected = [1.0, 0.5 * (-1.0f64).exp()].iter().sum::<f64>();
        assert_relative_eq!(lam, expected, max_relative = 1e-15);
        assert_relative_eq!(lam, 1.183940, epsilon = 1e-6);
        // the evaluation at t = 1 is not yet in the history at t = 1
        assert_eq!(addition_intensity(&d, &p.items[0], &p, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn verification_clamps_at_zero() {
        let p = model(
            Polarity::Verification,
            constant_kernels(TriggerKernel::Step),
            0.0,
            -1.0,
            vec![0.1],
            vec![0.0],
        );
        let d = history(&[(0.5, Some(1.0))], 15.0);
        assert_eq!(addition_intensity(&d, &p.items[0], &p, 2.0).unwrap(), 0.0);
        assert_eq!(addition_intensity(&d, &p.items[0], &p, 0.9).unwrap(), 0.1);
        // clamped compensator: 0.1 * 1.0 on [0, 1), zero afterwards
        let c = addition_compensator_clamped(&d, &p.items[0], &p, 0.0, 15.0);
        assert_relative_eq!(c, 0.1, max_relative = 1e-9);
        let raw = addition_compensator(&d, &p.items[0], &p, 0.0, 15.0);
        assert_relative_eq!(raw, 1.5 - 14.0, max_relative = 1e-12);
    }

    #[test]
    fn evaluation_intensity_cases() {
        let p = model(
            Polarity::Refutation,
            constant_kernels(TriggerKernel::Step),
            0.5,
            0.0,
            vec![1.0],
            vec![0.0],
        );
        let d = history(&[(1.0, None), (2.0, Some(3.0))], 15.0);
        for t in [0.0, 1.0, 10.0] {
            assert_eq!(
                evaluation_intensity(&d, 0, &p.items[0], &p, t).unwrap(),
                0.5
            );
        }
        assert_eq!(
            evaluation_intensity(&d, 1, &p.items[0], &p, 1.0).unwrap(),
            0.5
        );
        assert_eq!(
            evaluation_intensity(&d, 1, &p.items[0], &p, 1.5).unwrap(),
            0.0
        );
        assert!(matches!(
            evaluation_intensity(&d, 2, &p.items[0], &p, 0.0),
            Err(IntensityError::InvalidStatement { .. })
        ));

        let p = model(
            Polarity::Refutation,
            constant_kernels(TriggerKernel::Step),
            0.3,
            0.0,
            vec![1.0],
            vec![0.2],
        );
        assert_relative_eq!(
            evaluation_intensity(&d, 0, &p.items[0], &p, 2.0).unwrap(),
            0.5,
            max_relative = 1e-15
        );
    }

    #[test]
    fn homogeneous_poisson_loglik() {
        let mut p = model(
            Polarity::Refutation,
            constant_kernels(TriggerKernel::Step),
            0.0,
            0.0,
            vec![2.0],
            vec![0.0],
        );
        p.horizon = 2.0;
        p.kernels = KernelSet::constant(2.0).unwrap();
        let d = history(&[(0.5, None), (1.0, None)], 2.0);
        let ll = addition_loglik(&d, &p.items[0], &p).unwrap();
        assert_relative_eq!(ll, 2.0 * 2f64.ln() - 4.0, max_relative = 1e-15);
        assert_relative_eq!(ll, -2.613706, epsilon = 1e-6);

        p.items[0].phi = vec![0.0];
        let err = addition_loglik(&d, &p.items[0], &p).unwrap_err();
        assert!(err.is_degenerate());
    }

    #[test]
    fn exponential_delay_loglik() {
        let p = model(
            Polarity::Refutation,
            constant_kernels(TriggerKernel::Step),
            0.5,
            0.0,
            vec![1.0],
            vec![0.0],
        );
        let d = history(&[(1.0, Some(2.0)), (12.0, None)], 15.0);
        let ll = evaluation_loglik(&d, 0, &p.items[0], &p).unwrap();
        assert_relative_eq!(ll, 0.5f64.ln() - 0.5, max_relative = 1e-15);
        assert_relative_eq!(ll, -1.193147, epsilon = 1e-6);
        let censored = evaluation_loglik(&d, 1, &p.items[0], &p).unwrap();
        assert_relative_eq!(censored, -1.5, max_relative = 1e-15);
    }

    #[test]
    fn observed_evaluation_with_zero_hazard_is_flagged() {
        let p = model(
            Polarity::Refutation,
            constant_kernels(TriggerKernel::Step),
            0.0,
            0.0,
            vec![1.0],
            vec![0.0],
        );
        let d = history(&[(1.0, Some(2.0))], 15.0);
        let err = evaluation_loglik(&d, 0, &p.items[0], &p).unwrap_err();
        assert!(matches!(
            err,
            IntensityError::ZeroIntensity {
                term: Term::Evaluation,
                statement: Some(0),
                ..
            }
        ));
    }

    #[test]
    fn source_loglik_cases() {
        let mut p = model(
            Polarity::Refutation,
            constant_kernels(TriggerKernel::Step),
            0.0,
            0.0,
            vec![1.0],
            vec![0.0],
        );
        let names = ["a", "b", "c", "d"];
        p.sources = names
            .iter()
            .map(|n| SourceParams {
                id: n.to_string(),
                alpha: vec![0.0],
                gamma: vec![0.0],
            })
            .collect();
        p.pi = vec![vec![0.25; 4]];
        let d = history(&[(1.0, None), (2.0, None), (3.0, None), (4.0, None)], 15.0);
        assert_relative_eq!(
            source_loglik(&d, &p.items[0], &p).unwrap(),
            4.0 * 0.25f64.ln(),
            max_relative = 1e-15
        );

        p.n_topics = 2;
        p.pi = vec![vec![0.2, 0.8, 0.0, 0.0], vec![0.4, 0.6, 0.0, 0.0]];
        p.items[0].w = vec![0.5, 0.5];
        let one = history(&[(1.0, None)], 15.0);
        assert_relative_eq!(
            source_loglik(&one, &p.items[0], &p).unwrap(),
            0.3f64.ln(),
            max_relative = 1e-14
        );

        p.pi = vec![vec![0.0, 1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0, 0.0]];
        assert!(source_loglik(&one, &p.items[0], &p)
            .unwrap_err()
            .is_degenerate());
    }
}
