//! Globally adaptive Gauss–Kronrod (7/15) quadrature.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

// Kronrod nodes (positive half, descending) and weights; Gauss weights for
// the embedded 7-point rule at the odd-indexed nodes.
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quadrature {
    pub value: f64,
    pub error: f64,
    pub converged: bool,
}

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let center = 0.5 * (a + b);
    let half = 0.5 * (b - a);
    let fc = f(center);
    let mut res_k = fc * WGK[7];
    let mut res_g = fc * WG[3];
    for j in 0..7 {
        let dx = half * XGK[j];
        let s = f(center - dx) + f(center + dx);
        res_k += WGK[j] * s;
        if j % 2 == 1 {
            res_g += WG[j / 2] * s;
        }
    }
    let value = res_k * half;
    let err = ((res_k - res_g) * half).abs();
    (value, err)
}

struct Segment {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Segment {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Segment {}
impl PartialOrd for Segment {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Segment {
    fn cmp(&self, other: &Self) -> Ordering {
        self.error.total_cmp(&other.error)
    }
}

/// Integrates `f` over `[a, b]`, bisecting the worst segment until the total
/// error estimate is below `max(abs_tol, rel_tol * |value|)`.
pub fn integrate<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    abs_tol: f64,
    rel_tol: f64,
) -> Quadrature {
    integrate_pieces(&f, &[a, b], abs_tol, rel_tol, 4000)
}

/// Like [`integrate`], but the integrand may be discontinuous at `breaks`
/// (points outside `(a, b)` are ignored).
pub fn integrate_with_breaks<F: Fn(f64) -> f64>(
    f: F,
    a: f64,
    b: f64,
    breaks: &[f64],
    abs_tol: f64,
    rel_tol: f64,
) -> Quadrature {
    let mut pts: Vec<f64> = breaks.iter().copied().filter(|&x| x > a && x < b).collect();
    pts.push(a);
    pts.push(b);
    pts.sort_by(f64::total_cmp);
    pts.dedup();
    integrate_pieces(&f, &pts, abs_tol, rel_tol, 4000 + 50 * pts.len())
}

fn integrate_pieces<F: Fn(f64) -> f64>(
    f: &F,
    points: &[f64],
    abs_tol: f64,
    rel_tol: f64,
    max_segments: usize,
) -> Quadrature {
    let mut heap = BinaryHeap::new();
    let mut total = 0.0;
    let mut total_err = 0.0;
    for w in points.windows(2) {
        if w[1] <= w[0] {
            continue;
        }
        let (v, e) = gk15(f, w[0], w[1]);
        total += v;
        total_err += e;
        heap.push(Segment {
            a: w[0],
            b: w[1],
            value: v,
            error: e,
        });
    }
    let mut n = heap.len();
    loop {
        if total_err <= abs_tol.max(rel_tol * total.abs()) {
            return Quadrature {
                value: total,
                error: total_err,
                converged: true,
            };
        }
        if n >= max_segments {
            break;
        }
        let Some(seg) = heap.pop() else { break };
        let mid = 0.5 * (seg.a + seg.b);
        if !(mid > seg.a && mid < seg.b) {
            // cannot bisect further
            heap.push(seg);
            break;
        }
        let (v1, e1) = gk15(f, seg.a, mid);
        let (v2, e2) = gk15(f, mid, seg.b);
        total += v1 + v2 - seg.value;
        total_err += e1 + e2 - seg.error;
        heap.push(Segment {
            a: seg.a,
            b: mid,
            value: v1,
            error: e1,
        });
        heap.push(Segment {
            a: mid,
            b: seg.b,
            value: v2,
            error: e2,
        });
        n += 1;
    }
    // recompute sums to shed accumulated rounding from the running totals
    let value = heap.iter().map(|s| s.value).sum();
    let error = heap.iter().map(|s| s.error).sum::<f64>();
    Quadrature {
        value,
        error,
        converged: error <= abs_tol.max(rel_tol * f64::abs(value)),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn polynomial_is_exact() {
        let q = integrate(|x| 3.0 * x * x + 1.0, 0.0, 2.0, 1e-14, 1e-14);
        assert!((q.value - 10.0).abs() < 1e-13);
    }

    #[test]
    fn gaussian_mass() {
        let q = integrate(|x| (-0.5 * x * x).exp(), -30.0, 30.0, 1e-14, 1e-13);
        assert!((q.value - (2.0 * std::f64::consts::PI).sqrt()).abs() < 1e-12);
        assert!(q.converged);
    }

    #[test]
    fn step_with_breaks() {
        let q = integrate_with_breaks(
            |x| if x < 1.3 { 1.0 } else { 5.0 },
            0.0,
            2.0,
            &[1.3],
            1e-14,
            1e-14,
        );
        assert!((q.value - (1.3 + 0.7 * 5.0)).abs() < 1e-12);
    }
}
