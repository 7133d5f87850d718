//! Concave maximization problems of the form
//!
//! ```text
//! f(θ) = Σ_r log(o_r + c_r·θ) − Σ_k (b_k + η_k) θ_k,   θ ≥ 0
//! ```
//!
//! which is what every point-process subproblem reduces to once kernel
//! integrals are precomputed. Nonnegative coefficients admit the MM
//! (EM) multiplicative update; signed ones go through projected gradient
//! with a log barrier on extra linear constraints `q_c + a_c·θ ≥ 0`.

use rand::Rng;
use rayon::prelude::*;

use crate::stats::pairwise_sum;

/// Row-compressed sparse matrix.
#[derive(Debug, Clone)]
pub(crate) struct Csr {
    ptr: Vec<usize>,
    idx: Vec<usize>,
    val: Vec<f64>,
}

impl Default for Csr {
    fn default() -> Self {
        Csr {
            ptr: vec![0],
            idx: Vec::new(),
            val: Vec::new(),
        }
    }
}

impl Csr {
    pub(crate) fn push_row(&mut self, entries: &[(usize, f64)]) {
        for &(k, v) in entries {
            if v != 0.0 {
                self.idx.push(k);
                self.val.push(v);
            }
        }
        self.ptr.push(self.idx.len());
    }

    pub(crate) fn n_rows(&self) -> usize {
        self.ptr.len() - 1
    }

    #[inline]
    fn row(&self, r: usize) -> (&[usize], &[f64]) {
        let (a, b) = (self.ptr[r], self.ptr[r + 1]);
        (&self.idx[a..b], &self.val[a..b])
    }

    #[inline]
    fn dot(&self, r: usize, x: &[f64]) -> f64 {
        let (idx, val) = self.row(r);
        idx.iter().zip(val).map(|(&k, &v)| v * x[k]).sum()
    }

    fn transpose(&self, n_cols: usize) -> Csr {
        let mut counts = vec![0usize; n_cols + 1];
        for &k in &self.idx {
            counts[k + 1] += 1;
        }
        for k in 0..n_cols {
            counts[k + 1] += counts[k];
        }
        let ptr = counts.clone();
        let mut fill = counts;
        let mut idx = vec![0; self.idx.len()];
        let mut val = vec![0.0; self.idx.len()];
        for r in 0..self.n_rows() {
            let (ks, vs) = self.row(r);
            for (&k, &v) in ks.iter().zip(vs) {
                idx[fill[k]] = r;
                val[fill[k]] = v;
                fill[k] += 1;
            }
        }
        Csr { ptr, idx, val }
    }

    fn all_nonnegative(&self) -> bool {
        self.val.iter().all(|v| *v >= 0.0)
    }
}

#[derive(Debug, Clone, Default)]
pub(crate) struct ProblemBuilder {
    pub rows: Csr,
    pub offsets: Vec<f64>,
    pub checks: Csr,
    pub check_offsets: Vec<f64>,
    pub linear: Vec<f64>,
}

impl ProblemBuilder {
    pub(crate) fn new(n_params: usize) -> Self {
        ProblemBuilder {
            linear: vec![0.0; n_params],
            ..Default::default()
        }
    }

    pub(crate) fn row(&mut self, offset: f64, entries: &[(usize, f64)]) {
        self.rows.push_row(entries);
        self.offsets.push(offset);
    }

    pub(crate) fn check(&mut self, offset: f64, entries: &[(usize, f64)]) {
        self.checks.push_row(entries);
        self.check_offsets.push(offset);
    }

    pub(crate) fn finish(self, penalty: Vec<f64>, mut frozen: Vec<bool>) -> LinearProblem {
        let n = self.linear.len();
        assert_eq!(penalty.len(), n);
        assert_eq!(frozen.len(), n);
        let cols = self.rows.transpose(n);
        let check_cols = self.checks.transpose(n);
        // parameters the objective does not depend on stay at zero
        for k in 0..n {
            if cols.row(k).0.is_empty()
                && check_cols.row(k).0.is_empty()
                && self.linear[k] + penalty[k] == 0.0
            {
                frozen[k] = true;
            }
        }
        LinearProblem {
            n_params: n,
            rows: self.rows,
            offsets: self.offsets,
            cols,
            checks: self.checks,
            check_offsets: self.check_offsets,
            check_cols,
            linear: self.linear,
            penalty,
            frozen,
        }
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LinearProblem {
    n_params: usize,
    rows: Csr,
    offsets: Vec<f64>,
    cols: Csr,
    checks: Csr,
    check_offsets: Vec<f64>,
    check_cols: Csr,
    linear: Vec<f64>,
    penalty: Vec<f64>,
    frozen: Vec<bool>,
}

#[derive(Debug, Clone)]
pub(crate) struct Solution {
    pub theta: Vec<f64>,
    pub objective: f64,
    pub trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub kkt_residual: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct SolverSettings {
    pub max_iters: usize,
    pub rel_tol: f64,
    pub accelerate: bool,
    pub min_rate: f64,
}

const PAR_MIN: usize = 512;

fn converged(prev: f64, next: f64, rel_tol: f64) -> bool {
    (next - prev).abs() <= rel_tol * prev.abs().max(1.0)
}

impl LinearProblem {
    pub(crate) fn n_params(&self) -> usize {
        self.n_params
    }

    pub(crate) fn n_rows(&self) -> usize {
        self.rows.n_rows()
    }

    pub(crate) fn is_nonnegative(&self) -> bool {
        self.rows.all_nonnegative()
            && self.offsets.iter().all(|o| *o >= 0.0)
            && self.linear.iter().all(|b| *b >= 0.0)
    }

    /// Index of a row whose intensity is identically zero given the frozen
    /// parameters, if any.
    pub(crate) fn dead_row(&self) -> Option<usize> {
        (0..self.n_rows()).find(|&r| {
            let (idx, val) = self.rows.row(r);
            self.offsets[r] <= 0.0
                && !idx
                    .iter()
                    .zip(val)
                    .any(|(&k, &v)| v > 0.0 && !self.frozen[k])
        })
    }

    pub(crate) fn rates(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.n_rows())
            .into_par_iter()
            .with_min_len(PAR_MIN)
            .map(|r| self.offsets[r] + self.rows.dot(r, theta))
            .collect()
    }

    fn check_values(&self, theta: &[f64]) -> Vec<f64> {
        (0..self.checks.n_rows())
            .into_par_iter()
            .with_min_len(PAR_MIN)
            .map(|c| self.check_offsets[c] + self.checks.dot(c, theta))
            .collect()
    }

    fn linear_term(&self, theta: &[f64]) -> f64 {
        let terms: Vec<f64> = theta
            .iter()
            .zip(self.linear.iter().zip(&self.penalty))
            .map(|(t, (b, e))| (b + e) * t)
            .collect();
        pairwise_sum(&terms)
    }

    fn log_sum(values: &[f64]) -> f64 {
        if values.iter().any(|v| !(*v > 0.0)) {
            return f64::NEG_INFINITY;
        }
        let logs: Vec<f64> = values
            .par_iter()
            .with_min_len(PAR_MIN)
            .map(|v| v.ln())
            .collect();
        pairwise_sum(&logs)
    }

    pub(crate) fn objective_at(&self, theta: &[f64], rates: &[f64]) -> f64 {
        Self::log_sum(rates) - self.linear_term(theta)
    }

    pub(crate) fn objective(&self, theta: &[f64]) -> f64 {
        self.objective_at(theta, &self.rates(theta))
    }

    /// `Σ_k η_k θ_k`.
    pub(crate) fn penalty_term(&self, theta: &[f64]) -> f64 {
        theta.iter().zip(&self.penalty).map(|(t, e)| t * e).sum()
    }

    /// Deterministic start: every free parameter at `scale · R / Σ b`.
    pub(crate) fn uniform_start(&self, scale: f64) -> Vec<f64> {
        let base = self.rate_scale() * scale;
        (0..self.n_params)
            .map(|k| if self.frozen[k] { 0.0 } else { base })
            .collect()
    }

    /// Random start spread over two orders of magnitude around the
    /// uniform start.
    pub(crate) fn random_start<R: Rng + ?Sized>(&self, scale: f64, rng: &mut R) -> Vec<f64> {
        let base = self.rate_scale() * scale;
        (0..self.n_params)
            .map(|k| {
                if self.frozen[k] {
                    0.0
                } else {
                    base * (rng.random_range(-2.3..2.3f64)).exp()
                }
            })
            .collect()
    }

    fn rate_scale(&self) -> f64 {
        let mass: f64 = self
            .linear
            .iter()
            .zip(&self.penalty)
            .zip(&self.frozen)
            .filter(|(_, f)| !**f)
            .map(|((b, e), _)| (b + e).abs())
            .sum();
        if mass > 0.0 {
            self.n_rows().max(1) as f64 / mass
        } else {
            1.0
        }
    }

    /// One MM update from `theta`; also returns `f(theta)`.
    fn mm_step(&self, theta: &[f64]) -> (Vec<f64>, f64) {
        let rates = self.rates(theta);
        let f = self.objective_at(theta, &rates);
        let inv: Vec<f64> = rates.iter().map(|m| 1.0 / m).collect();
        let next: Vec<f64> = (0..self.n_params)
            .into_par_iter()
            .with_min_len(PAR_MIN)
            .map(|k| {
                if self.frozen[k] || theta[k] == 0.0 {
                    return 0.0;
                }
                let (rs, cs) = self.cols.row(k);
                let num: f64 = rs.iter().zip(cs).map(|(&r, &c)| c * inv[r]).sum();
                let den = self.linear[k] + self.penalty[k];
                if num == 0.0 {
                    0.0
                } else if den > 0.0 {
                    theta[k] * num / den
                } else {
                    theta[k]
                }
            })
            .collect();
        (next, f)
    }

    /// MM ascent with optional SQUAREM extrapolation. Every accepted
    /// iterate has an objective no lower than its predecessor.
    pub(crate) fn solve_mm(&self, start: Vec<f64>, s: &SolverSettings) -> Solution {
        debug_assert!(self.is_nonnegative());
        let mut theta = start;
        let (mut next, mut f) = self.mm_step(&theta);
        let mut trace = vec![f];
        let mut done = false;
        let mut it = 0;
        while it < s.max_iters {
            it += 1;
            let (cand, cand_next, cand_f) = if s.accelerate {
                let t1 = next;
                let (t2, f1) = self.mm_step(&t1);
                match self.extrapolate(&theta, &t1, &t2) {
                    Some(tx) => {
                        let (tx_next, fx) = self.mm_step(&tx);
                        if fx >= f1 {
                            (tx, tx_next, fx)
                        } else {
                            (t1, t2, f1)
                        }
                    }
                    None => (t1, t2, f1),
                }
            } else {
                let t1 = next;
                let (t2, f1) = self.mm_step(&t1);
                (t1, t2, f1)
            };
            let prev = f;
            theta = cand;
            next = cand_next;
            f = cand_f;
            trace.push(f);
            if converged(prev, f, s.rel_tol) {
                done = true;
                break;
            }
        }
        Solution {
            objective: f,
            theta,
            trace,
            iterations: it,
            converged: done,
            kkt_residual: None,
        }
    }

    fn extrapolate(&self, t0: &[f64], t1: &[f64], t2: &[f64]) -> Option<Vec<f64>> {
        let r: Vec<f64> = t1.iter().zip(t0).map(|(a, b)| a - b).collect();
        let v: Vec<f64> = t2
            .iter()
            .zip(t1)
            .zip(t0)
            .map(|((c, b), a)| c - 2.0 * b + a)
            .collect();
        let rn = r.iter().map(|x| x * x).sum::<f64>().sqrt();
        let vn = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !(vn > 0.0) || !(rn > 0.0) {
            return None;
        }
        let mut a = -(rn / vn);
        if a > -1.0 {
            return None;
        }
        for _ in 0..30 {
            let tx: Vec<f64> = (0..self.n_params)
                .map(|k| t0[k] - 2.0 * a * r[k] + a * a * v[k])
                .collect();
            let ok = tx
                .iter()
                .zip(t0)
                .all(|(x, base)| if *base > 0.0 { *x > 0.0 } else { *x == 0.0 });
            if ok {
                return Some(tx);
            }
            a = (a - 1.0) / 2.0;
            if a > -1.0 - 1e-9 {
                return None;
            }
        }
        None
    }

    fn feasible(&self, rates: &[f64], checks: &[f64], nu: f64, min_rate: f64) -> bool {
        rates.iter().all(|m| *m > min_rate && m.is_finite())
            && checks
                .iter()
                .all(|c| if nu > 0.0 { *c > 0.0 } else { *c >= 0.0 })
    }

    /// `f + ν Σ_c log(check_c)`.
    fn barrier_objective(&self, theta: &[f64], rates: &[f64], checks: &[f64], nu: f64) -> f64 {
        let f = self.objective_at(theta, rates);
        if nu > 0.0 && !checks.is_empty() {
            f + nu * Self::log_sum(checks)
        } else {
            f
        }
    }

    fn gradient(&self, rates: &[f64], checks: &[f64], nu: f64) -> Vec<f64> {
        let inv: Vec<f64> = rates.iter().map(|m| 1.0 / m).collect();
        let cinv: Vec<f64> = if nu > 0.0 {
            checks.iter().map(|c| nu / c).collect()
        } else {
            Vec::new()
        };
        (0..self.n_params)
            .into_par_iter()
            .with_min_len(PAR_MIN)
            .map(|k| {
                if self.frozen[k] {
                    return 0.0;
                }
                let (rs, cs) = self.cols.row(k);
                let mut g: f64 = rs.iter().zip(cs).map(|(&r, &c)| c * inv[r]).sum();
                if nu > 0.0 {
                    let (rs, cs) = self.check_cols.row(k);
                    g += rs.iter().zip(cs).map(|(&r, &c)| c * cinv[r]).sum::<f64>();
                }
                g - self.linear[k] - self.penalty[k]
            })
            .collect()
    }

    fn project(&self, theta: &mut [f64]) {
        for (x, f) in theta.iter_mut().zip(&self.frozen) {
            if *f || *x < 0.0 {
                *x = 0.0;
            }
        }
    }

    fn kkt(&self, theta: &[f64], grad: &[f64]) -> f64 {
        theta
            .iter()
            .zip(grad)
            .zip(&self.frozen)
            .filter(|(_, f)| !**f)
            .map(|((t, g), _)| (t - (t + g).max(0.0)).abs())
            .fold(0.0, f64::max)
    }

    /// Pulls a start inside the feasible region by shrinking the parameters
    /// selected by `shrinkable` toward zero.
    pub(crate) fn repair_start(
        &self,
        mut theta: Vec<f64>,
        shrinkable: &[bool],
        min_rate: f64,
    ) -> Option<Vec<f64>> {
        for _ in 0..80 {
            let rates = self.rates(&theta);
            let checks = self.check_values(&theta);
            if self.feasible(&rates, &checks, 1.0, min_rate) {
                return Some(theta);
            }
            for (x, s) in theta.iter_mut().zip(shrinkable) {
                if *s {
                    *x *= 0.5;
                }
            }
        }
        for (x, s) in theta.iter_mut().zip(shrinkable) {
            if *s {
                *x = 0.0;
            }
        }
        let rates = self.rates(&theta);
        let checks = self.check_values(&theta);
        self.feasible(&rates, &checks, 1.0, min_rate)
            .then_some(theta)
    }

    /// Projected gradient ascent (Barzilai–Borwein steps, Armijo
    /// backtracking). With constraint rows present, follows a log-barrier
    /// path `ν → 0`; the trace records the unbarriered objective.
    pub(crate) fn solve_pg(&self, start: Vec<f64>, s: &SolverSettings) -> Solution {
        let mut theta = start;
        self.project(&mut theta);
        let has_checks = self.checks.n_rows() > 0;
        let scale = self.n_rows().max(1) as f64;
        let schedule: Vec<f64> = if has_checks {
            (0..9).map(|i| 1e-2 * 0.1f64.powi(i)).collect()
        } else {
            vec![0.0]
        };
        let mut rates = self.rates(&theta);
        let mut checks = self.check_values(&theta);
        let mut trace = vec![self.objective_at(&theta, &rates)];
        let mut iterations = 0;
        let mut done = false;
        let mut kkt = f64::INFINITY;
        let last = schedule.len() - 1;
        for (stage, &nu_rel) in schedule.iter().enumerate() {
            let nu = nu_rel * scale / (self.checks.n_rows().max(1) as f64);
            let inner_tol = if stage == last {
                s.rel_tol
            } else {
                s.rel_tol.max(1e-8) * 10.0
            };
            let mut fb = self.barrier_objective(&theta, &rates, &checks, nu);
            let mut grad = self.gradient(&rates, &checks, nu);
            let mut step = 1.0 / grad.iter().fold(1.0f64, |m, g| m.max(g.abs()));
            let mut stage_done = false;
            let budget = if stage == last {
                s.max_iters
            } else {
                s.max_iters / 4 + 1
            };
            let mut small = 0;
            for _ in 0..budget {
                iterations += 1;
                let mut accepted = None;
                let mut st = step;
                for _ in 0..60 {
                    let mut cand: Vec<f64> =
                        theta.iter().zip(&grad).map(|(t, g)| t + st * g).collect();
                    self.project(&mut cand);
                    let cr = self.rates(&cand);
                    let cc = self.check_values(&cand);
                    if self.feasible(&cr, &cc, nu, s.min_rate) {
                        let fc = self.barrier_objective(&cand, &cr, &cc, nu);
                        let lin: f64 = cand
                            .iter()
                            .zip(&theta)
                            .zip(&grad)
                            .map(|((c, t), g)| (c - t) * g)
                            .sum();
                        if fc >= fb + 1e-4 * lin {
                            accepted = Some((cand, cr, cc, fc));
                            break;
                        }
                    }
                    st *= 0.5;
                }
                let Some((cand, cr, cc, fc)) = accepted else {
                    stage_done = true;
                    break;
                };
                let new_grad = self.gradient(&cr, &cc, nu);
                let sy: f64 = cand
                    .iter()
                    .zip(&theta)
                    .zip(new_grad.iter().zip(&grad))
                    .map(|((a, b), (g1, g0))| (a - b) * (g1 - g0))
                    .sum();
                let ss: f64 = cand
                    .iter()
                    .zip(&theta)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                step = if sy < 0.0 && ss > 0.0 {
                    (-ss / sy).clamp(1e-14, 1e14)
                } else {
                    (st * 4.0).min(1e14)
                };
                let prev = fb;
                theta = cand;
                rates = cr;
                checks = cc;
                fb = fc;
                grad = new_grad;
                trace.push(self.objective_at(&theta, &rates));
                kkt = self.kkt(&theta, &grad);
                if converged(prev, fb, inner_tol) {
                    small += 1;
                    if small >= 3 {
                        stage_done = true;
                        break;
                    }
                } else {
                    small = 0;
                }
            }
            if stage == last {
                done = stage_done;
                kkt = self.kkt(&theta, &grad);
            }
        }
        Solution {
            objective: self.objective_at(&theta, &rates),
            theta,
            trace,
            iterations,
            converged: done,
            kkt_residual: Some(kkt),
        }
    }
}

const NONE: usize = usize::MAX;

/// Sparsity layout of the Newton system: parameters in `blocks` are local
/// (each row touches at most one block), everything else is global.
struct NewtonLayout {
    /// Free parameters of each block.
    block_params: Vec<Vec<usize>>,
    /// Free global parameters.
    globals: Vec<usize>,
    /// `(block, position)` of each parameter, or `(NONE, global position)`.
    place: Vec<(usize, usize)>,
    block_rows: Vec<Vec<usize>>,
    block_checks: Vec<Vec<usize>>,
    global_rows: Vec<usize>,
    global_checks: Vec<usize>,
    /// Global positions each block couples to, sorted.
    block_globals: Vec<Vec<usize>>,
}

impl LinearProblem {
    fn newton_layout(&self, blocks: &[std::ops::Range<usize>]) -> NewtonLayout {
        let n = self.n_params;
        let mut place = vec![(NONE, NONE); n];
        let mut block_params = vec![Vec::new(); blocks.len()];
        for (b, range) in blocks.iter().enumerate() {
            for k in range.clone() {
                if !self.frozen[k] {
                    place[k] = (b, block_params[b].len());
                    block_params[b].push(k);
                }
            }
        }
        let mut globals = Vec::new();
        for k in 0..n {
            if place[k].0 == NONE && !self.frozen[k] && !blocks.iter().any(|r| r.contains(&k)) {
                place[k] = (NONE, globals.len());
                globals.push(k);
            }
        }
        let classify = |m: &Csr| {
            let mut per_block = vec![Vec::new(); blocks.len()];
            let mut global = Vec::new();
            for r in 0..m.n_rows() {
                let (idx, _) = m.row(r);
                let b = idx
                    .iter()
                    .map(|&k| place[k].0)
                    .find(|&b| b != NONE)
                    .unwrap_or(NONE);
                debug_assert!(idx.iter().all(|&k| place[k].0 == NONE || place[k].0 == b));
                if b == NONE {
                    global.push(r);
                } else {
                    per_block[b].push(r);
                }
            }
            (per_block, global)
        };
        let (block_rows, global_rows) = classify(&self.rows);
        let (block_checks, global_checks) = classify(&self.checks);
        let block_globals = (0..blocks.len())
            .map(|b| {
                let mut g: Vec<usize> = block_rows[b]
                    .iter()
                    .map(|&r| self.rows.row(r).0)
                    .chain(block_checks[b].iter().map(|&c| self.checks.row(c).0))
                    .flat_map(|idx| idx.iter().copied())
                    .filter(|&k| place[k].0 == NONE && place[k].1 != NONE)
                    .map(|k| place[k].1)
                    .collect();
                g.sort_unstable();
                g.dedup();
                g
            })
            .collect();
        NewtonLayout {
            block_params,
            globals,
            place,
            block_rows,
            block_checks,
            global_rows,
            global_checks,
            block_globals,
        }
    }

    fn ip_feasible(&self, theta: &[f64], rates: &[f64], checks: &[f64], min_rate: f64) -> bool {
        theta.iter().zip(&self.frozen).all(|(t, f)| *f || *t > 0.0)
            && rates.iter().all(|m| *m > min_rate && m.is_finite())
            && checks.iter().all(|c| *c > 0.0)
    }

    fn ip_objective(&self, theta: &[f64], rates: &[f64], checks: &[f64], nu: f64) -> f64 {
        let bounds: Vec<f64> = theta
            .iter()
            .zip(&self.frozen)
            .filter(|(_, f)| !**f)
            .map(|(t, _)| *t)
            .collect();
        self.objective_at(theta, rates) + nu * (Self::log_sum(checks) + Self::log_sum(&bounds))
    }

    /// Newton direction for the barrier objective: solves `M Δ = g` with
    /// `M = -∇²F` via block elimination of the local parameters.
    fn newton_direction(
        &self,
        lay: &NewtonLayout,
        theta: &[f64],
        grad: &[f64],
        rates: &[f64],
        checks: &[f64],
        nu: f64,
    ) -> Option<Vec<f64>> {
        use nalgebra::{DMatrix, DVector};
        let ng = lay.globals.len();

        // per-block dense pieces: A (local×local), B (local×coupled globals),
        // C (coupled×coupled), local rhs
        struct Piece {
            x: DMatrix<f64>,
            y: DVector<f64>,
            schur: DMatrix<f64>,
            srhs: DVector<f64>,
        }
        let accumulate = |idx: &[usize],
                          val: &[f64],
                          wgt: f64,
                          b: usize,
                          gpos: &[usize],
                          a: &mut DMatrix<f64>,
                          bm: &mut DMatrix<f64>,
                          c: &mut DMatrix<f64>| {
            for (i1, (&k1, &v1)) in idx.iter().zip(val).enumerate() {
                let (b1, p1) = lay.place[k1];
                if p1 == NONE {
                    continue;
                }
                for (&k2, &v2) in idx[i1..].iter().zip(&val[i1..]) {
                    let (b2, p2) = lay.place[k2];
                    if p2 == NONE {
                        continue;
                    }
                    let h = wgt * v1 * v2;
                    match (b1 == b, b2 == b) {
                        (true, true) => {
                            a[(p1, p2)] += h;
                            if k1 != k2 {
                                a[(p2, p1)] += h;
                            }
                        }
                        (true, false) => {
                            let q = gpos.binary_search(&p2).expect("coupled global");
                            bm[(p1, q)] += h;
                        }
                        (false, true) => {
                            let q = gpos.binary_search(&p1).expect("coupled global");
                            bm[(p2, q)] += h;
                        }
                        (false, false) => {
                            let q1 = gpos.binary_search(&p1).expect("coupled global");
                            let q2 = gpos.binary_search(&p2).expect("coupled global");
                            c[(q1, q2)] += h;
                            if k1 != k2 {
                                c[(q2, q1)] += h;
                            }
                        }
                    }
                }
            }
        };

        let pieces: Vec<Option<Piece>> = (0..lay.block_params.len())
            .into_par_iter()
            .map(|b| {
                let params = &lay.block_params[b];
                let gpos = &lay.block_globals[b];
                let n = params.len();
                let g = gpos.len();
                let mut a = DMatrix::<f64>::zeros(n, n);
                let mut bm = DMatrix::<f64>::zeros(n, g);
                let mut c = DMatrix::<f64>::zeros(g, g);
                for &r in &lay.block_rows[b] {
                    let (idx, val) = self.rows.row(r);
                    accumulate(
                        idx,
                        val,
                        1.0 / (rates[r] * rates[r]),
                        b,
                        gpos,
                        &mut a,
                        &mut bm,
                        &mut c,
                    );
                }
                for &ci in &lay.block_checks[b] {
                    let (idx, val) = self.checks.row(ci);
                    accumulate(
                        idx,
                        val,
                        nu / (checks[ci] * checks[ci]),
                        b,
                        gpos,
                        &mut a,
                        &mut bm,
                        &mut c,
                    );
                }
                for (p, &k) in params.iter().enumerate() {
                    a[(p, p)] += nu / (theta[k] * theta[k]);
                }
                let rhs = DVector::from_iterator(n, params.iter().map(|&k| grad[k]));
                let chol = nalgebra::Cholesky::new(a)?;
                let x = chol.solve(&bm);
                let y = chol.solve(&rhs);
                let schur = c - bm.transpose() * &x;
                let srhs = bm.transpose() * &y;
                Some(Piece { x, y, schur, srhs })
            })
            .collect();

        let mut cg = DMatrix::<f64>::zeros(ng, ng);
        let mut rg = DVector::from_iterator(ng, lay.globals.iter().map(|&k| grad[k]));
        for (&k, p) in lay.globals.iter().zip(0..) {
            cg[(p, p)] += nu / (theta[k] * theta[k]);
        }
        let mut ignored_a = DMatrix::<f64>::zeros(0, 0);
        let mut ignored_b = DMatrix::<f64>::zeros(0, 0);
        let all: Vec<usize> = (0..ng).collect();
        for &r in &lay.global_rows {
            let (idx, val) = self.rows.row(r);
            accumulate(
                idx,
                val,
                1.0 / (rates[r] * rates[r]),
                NONE - 1,
                &all,
                &mut ignored_a,
                &mut ignored_b,
                &mut cg,
            );
        }
        for &ci in &lay.global_checks {
            let (idx, val) = self.checks.row(ci);
            accumulate(
                idx,
                val,
                nu / (checks[ci] * checks[ci]),
                NONE - 1,
                &all,
                &mut ignored_a,
                &mut ignored_b,
                &mut cg,
            );
        }
        let mut pieces_ok = Vec::with_capacity(pieces.len());
        for (b, piece) in pieces.into_iter().enumerate() {
            let piece = piece?;
            let gpos = &lay.block_globals[b];
            for (q1, &p1) in gpos.iter().enumerate() {
                rg[p1] -= piece.srhs[q1];
                for (q2, &p2) in gpos.iter().enumerate() {
                    cg[(p1, p2)] += piece.schur[(q1, q2)];
                }
            }
            pieces_ok.push(piece);
        }
        let dg = if ng > 0 {
            nalgebra::Cholesky::new(cg)?.solve(&rg)
        } else {
            DVector::zeros(0)
        };
        let mut dir = vec![0.0; self.n_params];
        for (&k, p) in lay.globals.iter().zip(0..) {
            dir[k] = dg[p];
        }
        for (b, piece) in pieces_ok.iter().enumerate() {
            let gpos = &lay.block_globals[b];
            let sub = DVector::from_iterator(gpos.len(), gpos.iter().map(|&p| dg[p]));
            let local = &piece.y - &piece.x * sub;
            for (p, &k) in lay.block_params[b].iter().enumerate() {
                dir[k] = local[p];
            }
        }
        Some(dir)
    }

    /// Log-barrier interior-point method with Newton steps. `blocks` lists
    /// parameter ranges such that every row touches at most one of them;
    /// the Hessian is eliminated block by block onto the remaining
    /// (global) parameters.
    pub(crate) fn solve_ip(
        &self,
        start: Vec<f64>,
        blocks: &[std::ops::Range<usize>],
        s: &SolverSettings,
    ) -> Solution {
        let lay = self.newton_layout(blocks);
        let mut theta = start;
        self.project(&mut theta);
        // lift free zeros into the interior
        let positive: Vec<f64> = theta.iter().copied().filter(|t| *t > 0.0).collect();
        let mut lift = if positive.is_empty() {
            1e-3
        } else {
            1e-6 * crate::stats::mean(&positive)
        };
        let zeros: Vec<usize> = (0..self.n_params)
            .filter(|&k| !self.frozen[k] && theta[k] <= 0.0)
            .collect();
        loop {
            let mut cand = theta.clone();
            for &k in &zeros {
                cand[k] = lift;
            }
            let r = self.rates(&cand);
            let c = self.check_values(&cand);
            if self.ip_feasible(&cand, &r, &c, s.min_rate) || lift < 1e-300 {
                theta = cand;
                break;
            }
            lift *= 0.1;
        }
        let mut rates = self.rates(&theta);
        let mut checks = self.check_values(&theta);
        let f0 = self.objective_at(&theta, &rates);
        let mut trace = vec![f0];
        if !f0.is_finite() {
            return Solution {
                objective: f0,
                theta,
                trace,
                iterations: 0,
                converged: false,
                kkt_residual: None,
            };
        }
        let m = (lay.globals.len()
            + lay.block_params.iter().map(Vec::len).sum::<usize>()
            + self.checks.n_rows())
        .max(1) as f64;
        let target = s.rel_tol * f0.abs().max(1.0);
        let mut nu = (1e-2 * f0.abs().max(1.0) / m).max(target / m);
        let mut iterations = 0;
        let mut done = false;
        let mut last_dec = f64::INFINITY;
        'outer: loop {
            loop {
                let grad = self.ip_gradient(&theta, &rates, &checks, nu);
                let Some(dir) = self.newton_direction(&lay, &theta, &grad, &rates, &checks, nu)
                else {
                    break 'outer;
                };
                let dec: f64 = dir.iter().zip(&grad).map(|(d, g)| d * g).sum();
                last_dec = dec.max(0.0);
                if !(dec > 0.0) || dec / 2.0 <= 0.1 * target {
                    break;
                }
                iterations += 1;
                if iterations > s.max_iters {
                    break 'outer;
                }
                let fb = self.ip_objective(&theta, &rates, &checks, nu);
                // inside the quadratic region the objective change is below
                // rounding noise; take feasible Newton steps unconditionally
                let local = dec < 1e-9 * fb.abs().max(1.0);
                let mut t = 1.0;
                let mut moved = false;
                for _ in 0..80 {
                    let cand: Vec<f64> = theta.iter().zip(&dir).map(|(a, d)| a + t * d).collect();
                    let cr = self.rates(&cand);
                    let cc = self.check_values(&cand);
                    if self.ip_feasible(&cand, &cr, &cc, s.min_rate) {
                        let fc = self.ip_objective(&cand, &cr, &cc, nu);
                        if local || fc >= fb + 0.25 * t * dec {
                            theta = cand;
                            rates = cr;
                            checks = cc;
                            moved = true;
                            break;
                        }
                    }
                    t *= 0.5;
                }
                trace.push(self.objective_at(&theta, &rates));
                if !moved {
                    break;
                }
            }
            if m * nu <= 0.1 * target {
                done = true;
                break;
            }
            nu *= 0.1;
        }
        Solution {
            objective: self.objective_at(&theta, &rates),
            theta,
            trace,
            iterations,
            converged: done,
            // complementarity gap plus Newton decrement: bounds f* − f
            kkt_residual: Some(m * nu + last_dec / 2.0),
        }
    }

    fn ip_gradient(&self, theta: &[f64], rates: &[f64], checks: &[f64], nu: f64) -> Vec<f64> {
        let mut g = self.gradient(rates, checks, nu);
        for k in 0..self.n_params {
            if !self.frozen[k] {
                g[k] += nu / theta[k];
            }
        }
        g
    }
}
