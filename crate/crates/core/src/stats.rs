//! Small statistics toolkit: reductions, goodness-of-fit and rank
//! statistics used by the simulator checks and the experiment harnesses.

use statrs::distribution::{ContinuousCDF, StudentsT};

/// Pairwise (cascade) summation; result depends only on the input order.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        return xs.iter().sum();
    }
    let mid = xs.len() / 2;
    pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance.
pub fn variance(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return f64::NAN;
    }
    let m = mean(xs);
    let sq: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&sq) / (xs.len() - 1) as f64
}

/// Kolmogorov–Smirnov statistic `sup |F_n - F|` of `sample` against `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &[f64], cdf: F) -> f64 {
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            let lo = f - i as f64 / n;
            let hi = (i + 1) as f64 / n - f;
            lo.max(hi)
        })
        .fold(0.0, f64::max)
}

/// Survival function of the Kolmogorov distribution, `P(K > z)`.
pub fn kolmogorov_sf(z: f64) -> f64 {
    if z <= 0.0 {
        return 1.0;
    }
    if z < 1.18 {
        // theta-function form, fast for small z
        let y = (-std::f64::consts::PI.powi(2) / (8.0 * z * z)).exp();
        let s: f64 = (1..=7).map(|k| y.powi((2 * k - 1) * (2 * k - 1))).sum();
        1.0 - (2.0 * std::f64::consts::PI).sqrt() / z * s
    } else {
        let s: f64 = (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * z * z).exp()
            })
            .sum();
        (2.0 * s).clamp(0.0, 1.0)
    }
}

/// One-sample KS p-value with Stephens' small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    kolmogorov_sf(d * (sn + 0.12 + 0.11 / sn))
}

/// KS test of `sample` against the unit exponential distribution.
pub fn ks_exp1_pvalue(sample: &[f64]) -> f64 {
    let d = ks_statistic(sample, |x| if x <= 0.0 { 0.0 } else { -(-x).exp_m1() });
    ks_pvalue(d, sample.len())
}

/// KS test of `sample` against `U(0, 1)`.
pub fn ks_uniform_pvalue(sample: &[f64]) -> f64 {
    let d = ks_statistic(sample, |x| x.clamp(0.0, 1.0));
    ks_pvalue(d, sample.len())
}

/// Ranks `1..=n` with ties sharing their average rank.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let mx = mean(xs);
    let my = mean(ys);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Spearman rank correlation.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    pearson(&average_ranks(xs), &average_ranks(ys))
}

/// One-sided one-sample t-test of `H1: mean(xs) > 0`; returns the p-value.
pub fn t_test_greater(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 1.0;
    }
    let m = mean(xs);
    let sd = variance(xs).sqrt();
    if sd == 0.0 {
        return if m > 0.0 { 0.0 } else { 1.0 };
    }
    let t = m / (sd / (n as f64).sqrt());
    let dist = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("valid degrees of freedom");
    1.0 - dist.cdf(t)
}
