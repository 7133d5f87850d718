use serde::{Deserialize, Serialize};

use crate::event::{Dataset, TopicWeights};
use crate::stats::pairwise_sum;

/// How topic-level source popularity is estimated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PopularityEstimator {
    /// Maximizer of `Σ_d Σ_i log Σ_l w_dl π_l(s_i)`.
    #[default]
    MaximumLikelihood,
    /// Topic-weighted average of per-item empirical source frequencies.
    ItemAverage,
}

/// Source popularity per topic and the source log-likelihood it attains.
#[derive(Debug, Clone, PartialEq)]
pub struct PopularityFit {
    pub pi: Vec<Vec<f64>>,
    pub loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Per-item source counts as sparse `(source, count)` lists, skipping
/// items without events.
fn item_counts(ds: &Dataset) -> Vec<(usize, Vec<(usize, f64)>)> {
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for (di, d) in ds.items().iter().enumerate() {
        if d.is_empty() {
            skipped += 1;
            continue;
        }
        let mut counts: Vec<(usize, f64)> = Vec::new();
        for e in &d.events {
            match counts.iter_mut().find(|(s, _)| *s == e.source) {
                Some(c) => c.1 += 1.0,
                None => counts.push((e.source, 1.0)),
            }
        }
        counts.sort_by_key(|c| c.0);
        out.push((di, counts));
    }
    if skipped > 0 {
        log::warn!("{skipped} item(s) without events skipped in source popularity");
    }
    out
}

fn normalize_or_uniform(row: &mut [f64]) {
    let total: f64 = row.iter().sum();
    if total > 0.0 {
        row.iter_mut().for_each(|x| *x /= total);
    } else {
        let n = row.len() as f64;
        row.iter_mut().for_each(|x| *x = 1.0 / n);
    }
}

fn source_loglik(counts: &[(usize, Vec<(usize, f64)>)], w: &[Vec<f64>], pi: &[Vec<f64>]) -> f64 {
    let mut terms = Vec::new();
    for (di, cs) in counts {
        for &(s, n) in cs {
            let p: f64 = w[*di].iter().zip(pi).map(|(wl, row)| wl * row[s]).sum();
            terms.push(n * p.ln());
        }
    }
    pairwise_sum(&terms)
}

/// Estimates `π_l` for every topic. Topics with no weight anywhere get the
/// uniform distribution.
pub fn fit_source_popularity_with(
    ds: &Dataset,
    topics: &TopicWeights,
    method: PopularityEstimator,
) -> PopularityFit {
    let l = topics.n_topics();
    let ns = ds.n_sources();
    let w = topics.resolve(ds);
    let counts = item_counts(ds);
    let mut pi = vec![vec![0.0; ns]; l];
    if ns == 0 {
        return PopularityFit {
            pi,
            loglik: 0.0,
            iterations: 0,
            converged: true,
        };
    }

    // with one topic per item the likelihood separates by topic
    let one_hot = counts
        .iter()
        .all(|(di, _)| w[*di].iter().filter(|x| **x > 0.0).count() == 1);

    let (iterations, converged) = if method == PopularityEstimator::MaximumLikelihood && !one_hot {
        for (di, cs) in &counts {
            for &(s, n) in cs {
                for (ll, wl) in w[*di].iter().enumerate() {
                    pi[ll][s] += wl * n;
                }
            }
        }
        pi.iter_mut().for_each(|row| normalize_or_uniform(row));
        em(&counts, &w, &mut pi)
    } else {
        for (di, cs) in &counts {
            let total: f64 = cs.iter().map(|c| c.1).sum();
            for &(s, n) in cs {
                let share = match method {
                    PopularityEstimator::MaximumLikelihood => n,
                    PopularityEstimator::ItemAverage => n / total,
                };
                for (ll, wl) in w[*di].iter().enumerate() {
                    pi[ll][s] += wl * share;
                }
            }
        }
        pi.iter_mut().for_each(|row| normalize_or_uniform(row));
        (0, true)
    };
    let loglik = source_loglik(&counts, &w, &pi);
    PopularityFit {
        pi,
        loglik,
        iterations,
        converged,
    }
}

/// Maximum-likelihood source popularity.
pub fn fit_source_popularity(ds: &Dataset, topics: &TopicWeights) -> PopularityFit {
    fit_source_popularity_with(ds, topics, PopularityEstimator::MaximumLikelihood)
}

/// EM over latent topic assignments of each statement.
fn em(counts: &[(usize, Vec<(usize, f64)>)], w: &[Vec<f64>], pi: &mut [Vec<f64>]) -> (usize, bool) {
    let l = pi.len();
    let ns = pi[0].len();
    for it in 1..=100_000 {
        let mut acc = vec![vec![0.0; ns]; l];
        for (di, cs) in counts {
            for &(s, n) in cs {
                let parts: Vec<f64> = (0..l).map(|ll| w[*di][ll] * pi[ll][s]).collect();
                let p: f64 = parts.iter().sum();
                if p > 0.0 {
                    for ll in 0..l {
                        acc[ll][s] += n * parts[ll] / p;
                    }
                }
            }
        }
        let mut change = 0.0f64;
        for (row, new) in pi.iter_mut().zip(acc.iter_mut()) {
            let total: f64 = new.iter().sum();
            if total > 0.0 {
                for (x, y) in row.iter_mut().zip(new.iter()) {
                    let v = y / total;
                    change = change.max((v - *x).abs());
                    *x = v;
                }
            }
        }
        if change < 1e-13 {
            return (it, true);
        }
    }
    (100_000, false)
}
