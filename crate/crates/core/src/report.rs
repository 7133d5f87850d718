//! Aggregate summaries of a fitted model: parameter histograms, the β–φ
//! joint grid, per-item intrinsic time series and source rankings.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::params::ModelParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub name: String,
    /// `bins + 1` edges; the last bin is closed on the right.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

fn range_of(values: &[f64]) -> (f64, f64) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi > lo {
        (lo, hi)
    } else {
        (lo, lo + 1.0)
    }
}

fn bin_of(x: f64, lo: f64, hi: f64, bins: usize) -> usize {
    let b = ((x - lo) / (hi - lo) * bins as f64).floor();
    (b.max(0.0) as usize).min(bins - 1)
}

impl Histogram {
    /// Equal-width histogram over the range of `values`. A degenerate range
    /// `[x, x]` becomes `[x, x + 1]`.
    pub fn new(name: impl Into<String>, values: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let (lo, hi) = range_of(values);
        let mut counts = vec![0; bins];
        for &x in values {
            counts[bin_of(x, lo, hi, bins)] += 1;
        }
        Histogram {
            name: name.into(),
            edges: (0..=bins)
                .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
                .collect(),
            counts,
        }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lower,upper,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            let _ = writeln!(s, "{},{},{}", self.edges[i], self.edges[i + 1], c);
        }
        s
    }
}

/// Counts of items over a 2-D grid of (β, φ) totals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointGrid {
    pub beta_edges: Vec<f64>,
    pub phi_edges: Vec<f64>,
    /// `counts[i][j]` for β bin `i`, φ bin `j`.
    pub counts: Vec<Vec<usize>>,
}

impl JointGrid {
    pub fn new(beta: &[f64], phi: &[f64], bins: usize) -> Self {
        let bins = bins.max(1);
        let (bl, bh) = range_of(beta);
        let (pl, ph) = range_of(phi);
        let mut counts = vec![vec![0; bins]; bins];
        for (b, p) in beta.iter().zip(phi) {
            counts[bin_of(*b, bl, bh, bins)][bin_of(*p, pl, ph, bins)] += 1;
        }
        let edges = |lo: f64, hi: f64| {
            (0..=bins)
                .map(|i| lo + (hi - lo) * i as f64 / bins as f64)
                .collect()
        };
        JointGrid {
            beta_edges: edges(bl, bh),
            phi_edges: edges(pl, ph),
            counts,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("beta_lower,beta_upper,phi_lower,phi_upper,count\n");
        for (i, row) in self.counts.iter().enumerate() {
            for (j, c) in row.iter().enumerate() {
                let _ = writeln!(
                    s,
                    "{},{},{},{},{}",
                    self.beta_edges[i],
                    self.beta_edges[i + 1],
                    self.phi_edges[j],
                    self.phi_edges[j + 1],
                    c
                );
            }
        }
        s
    }
}

/// Intrinsic addition and evaluation terms of one item on a uniform grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntrinsicSeries {
    pub item: String,
    pub t: Vec<f64>,
    pub addition: Vec<f64>,
    pub evaluation: Vec<f64>,
}

impl IntrinsicSeries {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,addition,evaluation\n");
        for i in 0..self.t.len() {
            let _ = writeln!(
                s,
                "{},{},{}",
                self.t[i], self.addition[i], self.evaluation[i]
            );
        }
        s
    }
}

/// `Σ_j φ_dj k_j(t)` and `Σ_j β_dj k_j(t)` at `points` grid points over
/// `[0, T)`. `None` for an unknown item.
pub fn intrinsic_series(p: &ModelParams, item: &str, points: usize) -> Option<IntrinsicSeries> {
    let d = p.item(item)?;
    let points = points.max(1);
    let t: Vec<f64> = (0..points)
        .map(|i| p.horizon * i as f64 / points as f64)
        .collect();
    Some(IntrinsicSeries {
        item: item.to_string(),
        addition: t
            .iter()
            .map(|&x| p.kernels.addition.mixture(&d.phi, x))
            .collect(),
        evaluation: t
            .iter()
            .map(|&x| p.kernels.evaluation.mixture(&d.beta, x))
            .collect(),
        t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRank {
    pub source: String,
    /// Probability a statement is evaluated within the window from source
    /// trust alone (`β = 0`).
    pub probability: f64,
}

/// Sources ordered by decreasing evaluation probability within `window`
/// under topic weights `w`, with ties by id.
pub fn source_ranking(p: &ModelParams, w: &[f64], window: f64) -> Vec<SourceRank> {
    let mut out: Vec<SourceRank> = (0..p.sources.len())
        .map(|s| SourceRank {
            source: p.sources[s].id.clone(),
            probability: -(-p.trust(s, w) * window).exp_m1(),
        })
        .collect();
    out.sort_by(|a, b| {
        b.probability
            .total_cmp(&a.probability)
            .then_with(|| a.source.cmp(&b.source))
    });
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    pub bins: usize,
    /// Items whose intrinsic series are emitted.
    pub items: Vec<String>,
    pub grid_points: usize,
    /// Window of the source ranking; `None` skips the ranking.
    pub ranking_window: Option<f64>,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            bins: 20,
            items: Vec::new(),
            grid_points: 200,
            ranking_window: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub alpha: Histogram,
    pub gamma: Histogram,
    /// Per-item totals `Σ_j β_dj`.
    pub beta: Histogram,
    /// Per-item totals `Σ_j φ_dj`.
    pub phi: Histogram,
    pub joint: JointGrid,
    pub series: Vec<IntrinsicSeries>,
    pub ranking: Vec<SourceRank>,
}

/// Histograms pool α and γ over sources and topics. Unknown series items
/// are skipped with a warning.
pub fn parameter_report(p: &ModelParams, cfg: &ReportConfig) -> ParameterReport {
    let alpha: Vec<f64> = p
        .sources
        .iter()
        .flat_map(|s| s.alpha.iter().copied())
        .collect();
    let gamma: Vec<f64> = p
        .sources
        .iter()
        .flat_map(|s| s.gamma.iter().copied())
        .collect();
    let beta: Vec<f64> = p.items.iter().map(|d| d.beta.iter().sum()).collect();
    let phi: Vec<f64> = p.items.iter().map(|d| d.phi.iter().sum()).collect();
    let series = cfg
        .items
        .iter()
        .filter_map(|id| {
            let s = intrinsic_series(p, id, cfg.grid_points);
            if s.is_none() {
                log::warn!("item {id:?} not in the model; no series written");
            }
            s
        })
        .collect();
    let uniform = vec![1.0 / p.n_topics as f64; p.n_topics];
    ParameterReport {
        alpha: Histogram::new("alpha", &alpha, cfg.bins),
        gamma: Histogram::new("gamma", &gamma, cfg.bins),
        beta: Histogram::new("beta", &beta, cfg.bins),
        phi: Histogram::new("phi", &phi, cfg.bins),
        joint: JointGrid::new(&beta, &phi, cfg.bins),
        series,
        ranking: cfg
            .ranking_window
            .map(|w| source_ranking(p, &uniform, w))
            .unwrap_or_default(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::Polarity;
    use crate::params::{ItemParams, KernelSet, SourceParams};

    fn model(beta: [f64; 3]) -> ModelParams {
        let items = beta
            .iter()
            .enumerate()
            .map(|(i, b)| ItemParams {
                id: format!("d{i}"),
                phi: vec![0.5 * i as f64],
                beta: vec![*b],
                w: vec![1.0],
            })
            .collect();
        ModelParams::new(
            Polarity::Refutation,
            10.0,
            1,
            KernelSet::constant(10.0).unwrap(),
            0.0,
            vec![
                SourceParams {
                    id: "a".into(),
                    alpha: vec![0.1],
                    gamma: vec![0.0],
                },
                SourceParams {
                    id: "b".into(),
                    alpha: vec![0.7],
                    gamma: vec![0.2],
                },
            ],
            items,
            vec![vec![0.5, 0.5]],
        )
        .unwrap()
    }

    #[test]
    fn zero_beta_is_all_in_first_bin() {
        let r = parameter_report(&model([0.0; 3]), &ReportConfig::default());
        assert_eq!(r.beta.counts[0], 3);
        assert_eq!(r.beta.total(), 3);
        assert_eq!(r.beta.edges[0], 0.0);
    }

    #[test]
    fn histogram_counts_every_value() {
        let h = Histogram::new("x", &[0.0, 0.5, 1.0, 1.0], 2);
        assert_eq!(h.counts, vec![1, 3]);
        assert!(h.to_csv().starts_with("lower,upper,count\n0,0.5,1\n"));
    }

    #[test]
    fn joint_grid_total() {
        let r = parameter_report(
            &model([0.1, 0.2, 0.3]),
            &ReportConfig {
                bins: 3,
                ..Default::default()
            },
        );
        assert_eq!(r.joint.counts.iter().flatten().sum::<usize>(), 3);
        assert_eq!(
            r.joint.counts[0][0] + r.joint.counts[1][1] + r.joint.counts[2][2],
            3
        );
    }

    #[test]
    fn series_on_uniform_grid() {
        let s = intrinsic_series(&model([0.3, 0.2, 0.1]), "d1", 5).unwrap();
        assert_eq!(s.t, vec![0.0, 2.0, 4.0, 6.0, 8.0]);
        assert!(s.addition.iter().all(|x| *x == 0.5));
        assert!(s.evaluation.iter().all(|x| *x == 0.2));
        assert!(intrinsic_series(&model([0.0; 3]), "nope", 5).is_none());
    }

    #[test]
    fn ranking_orders_by_trust() {
        let r = source_ranking(&model([0.0; 3]), &[1.0], 1.0);
        assert_eq!(r[0].source, "b");
        assert!((r[0].probability - (1.0 - (-0.7f64).exp())).abs() < 1e-15);
    }
}
