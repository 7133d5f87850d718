//! Basis kernels for intrinsic reliability mixtures and triggering kernels
//! for the effect of past evaluations, with exact definite integrals.

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erf, erfc};

const SQRT_2: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KernelError {
    #[error("basis index {index} out of range (kernel has {len} basis functions)")]
    InvalidIndex { index: usize, len: usize },
    #[error("interval [{0}, {1}] is reversed")]
    ReversedInterval(f64, f64),
    #[error("invalid kernel configuration: {0}")]
    InvalidConfig(String),
}

/// A family of basis functions `k_j(t)`.
///
/// `Rbf` bumps are unnormalized Gaussians with peak value 1 at each center.
/// `Constant` has a single basis function equal to 1 on `[0, horizon)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BasisKernel {
    Rbf { centers: Vec<f64>, sigma: f64 },
    Constant { horizon: f64 },
}

impl BasisKernel {
    pub fn rbf(centers: Vec<f64>, sigma: f64) -> Result<Self, KernelError> {
        let k = BasisKernel::Rbf { centers, sigma };
        k.validate()?;
        Ok(k)
    }

    pub fn constant(horizon: f64) -> Result<Self, KernelError> {
        let k = BasisKernel::Constant { horizon };
        k.validate()?;
        Ok(k)
    }

    /// `n` centers evenly spaced on `[start, end]`.
    pub fn rbf_grid(start: f64, end: f64, n: usize, sigma: f64) -> Result<Self, KernelError> {
        let centers = match n {
            0 => Vec::new(),
            1 => vec![start],
            _ => (0..n)
                .map(|j| start + (end - start) * j as f64 / (n - 1) as f64)
                .collect(),
        };
        BasisKernel::rbf(centers, sigma)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        match self {
            BasisKernel::Rbf { centers, sigma } => {
                if !(sigma.is_finite() && *sigma > 0.0) {
                    return Err(KernelError::InvalidConfig(format!(
                        "sigma must be positive, got {sigma}"
                    )));
                }
                if centers.is_empty() {
                    return Err(KernelError::InvalidConfig(
                        "RBF kernel needs at least one center".into(),
                    ));
                }
                if centers.iter().any(|c| !c.is_finite()) {
                    return Err(KernelError::InvalidConfig(
                        "RBF centers must be finite".into(),
                    ));
                }
                if centers.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(KernelError::InvalidConfig(
                        "RBF centers must be strictly increasing".into(),
                    ));
                }
                Ok(())
            }
            BasisKernel::Constant { horizon } => {
                if !(horizon.is_finite() && *horizon > 0.0) {
                    return Err(KernelError::InvalidConfig(format!(
                        "constant kernel horizon must be positive, got {horizon}"
                    )));
                }
                Ok(())
            }
        }
    }

    /// Number of basis functions.
    pub fn len(&self) -> usize {
        match self {
            BasisKernel::Rbf { centers, .. } => centers.len(),
            BasisKernel::Constant { .. } => 1,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn check(&self, j: usize) -> Result<(), KernelError> {
        if j >= self.len() {
            Err(KernelError::InvalidIndex {
                index: j,
                len: self.len(),
            })
        } else {
            Ok(())
        }
    }

    /// `k_j(t)`.
    pub fn eval(&self, j: usize, t: f64) -> Result<f64, KernelError> {
        self.check(j)?;
        Ok(self.value(j, t))
    }

    /// `∫_{t0}^{t1} k_j(t) dt`.
    pub fn integral(&self, j: usize, t0: f64, t1: f64) -> Result<f64, KernelError> {
        self.check(j)?;
        if t0 > t1 {
            return Err(KernelError::ReversedInterval(t0, t1));
        }
        Ok(self.mass(j, t0, t1))
    }

    /// Unchecked `k_j(t)`; `j` must be in range.
    #[inline]
    pub fn value(&self, j: usize, t: f64) -> f64 {
        match self {
            BasisKernel::Rbf { centers, sigma } => {
                let z = (t - centers[j]) / sigma;
                (-0.5 * z * z).exp()
            }
            BasisKernel::Constant { horizon } => {
                if (0.0..*horizon).contains(&t) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Unchecked integral over `[t0, t1]`, `t0 <= t1`.
    pub fn mass(&self, j: usize, t0: f64, t1: f64) -> f64 {
        match self {
            BasisKernel::Rbf { centers, sigma } => {
                let scale = sigma * SQRT_2;
                let a = (t0 - centers[j]) / scale;
                let b = (t1 - centers[j]) / scale;
                // Use the complementary function in the tails to avoid
                // cancellation between two values close to +-1.
                let diff = if a >= 0.0 {
                    erfc(a) - erfc(b)
                } else if b <= 0.0 {
                    erfc(-b) - erfc(-a)
                } else {
                    erf(b) - erf(a)
                };
                (sigma * (std::f64::consts::PI / 2.0).sqrt() * diff).max(0.0)
            }
            BasisKernel::Constant { horizon } => (t1.min(*horizon) - t0.max(0.0)).max(0.0),
        }
    }

    /// Upper bound of `k_j` on `[t0, t1]` (exact supremum).
    pub fn sup(&self, j: usize, t0: f64, t1: f64) -> f64 {
        match self {
            BasisKernel::Rbf { centers, .. } => {
                let c = centers[j];
                let nearest = c.clamp(t0, t1);
                self.value(j, nearest)
            }
            BasisKernel::Constant { horizon } => {
                if t1 >= 0.0 && t0 < *horizon {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `Σ_j weights_j k_j(t)`.
    #[inline]
    pub fn mixture(&self, weights: &[f64], t: f64) -> f64 {
        weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(j, w)| w * self.value(j, t))
            .sum()
    }

    /// `∫_{t0}^{t1} Σ_j weights_j k_j(t) dt`.
    pub fn mixture_mass(&self, weights: &[f64], t0: f64, t1: f64) -> f64 {
        weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w != 0.0)
            .map(|(j, w)| w * self.mass(j, t0, t1))
            .sum()
    }

    /// Upper bound of a nonnegative mixture on `[t0, t1]`.
    pub fn mixture_sup(&self, weights: &[f64], t0: f64, t1: f64) -> f64 {
        weights
            .iter()
            .enumerate()
            .filter(|(_, w)| **w > 0.0)
            .map(|(j, w)| w * self.sup(j, t0, t1))
            .sum()
    }

    /// Discontinuities of the basis functions (for piecewise quadrature).
    pub fn breakpoints(&self) -> Vec<f64> {
        match self {
            BasisKernel::Rbf { .. } => Vec::new(),
            BasisKernel::Constant { horizon } => vec![0.0, *horizon],
        }
    }

    /// A length scale over which the basis functions change appreciably.
    pub fn resolution(&self) -> f64 {
        match self {
            BasisKernel::Rbf { sigma, .. } => *sigma,
            BasisKernel::Constant { horizon } => *horizon,
        }
    }
}

/// Triggering kernel `g(t)` of an evaluation, `t` being the time elapsed
/// since it. `g(t) = 0` for `t < 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TriggerKernel {
    /// `exp(-omega t)`, jump of height 1 at the evaluation.
    Exponential { omega: f64 },
    /// `1` forever after the evaluation.
    Step,
}

impl TriggerKernel {
    pub fn exponential(omega: f64) -> Result<Self, KernelError> {
        let k = TriggerKernel::Exponential { omega };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<(), KernelError> {
        match self {
            TriggerKernel::Exponential { omega } if !(omega.is_finite() && *omega > 0.0) => Err(
                KernelError::InvalidConfig(format!("omega must be positive, got {omega}")),
            ),
            _ => Ok(()),
        }
    }

    #[inline]
    pub fn eval(&self, t: f64) -> f64 {
        if t < 0.0 {
            return 0.0;
        }
        match self {
            TriggerKernel::Exponential { omega } => (-omega * t).exp(),
            TriggerKernel::Step => 1.0,
        }
    }

    pub fn integral(&self, t0: f64, t1: f64) -> Result<f64, KernelError> {
        if t0 > t1 {
            return Err(KernelError::ReversedInterval(t0, t1));
        }
        Ok(self.mass(t0, t1))
    }

    /// Unchecked integral over `[t0, t1]`, `t0 <= t1`.
    #[inline]
    pub fn mass(&self, t0: f64, t1: f64) -> f64 {
        let a = t0.max(0.0);
        let b = t1.max(0.0);
        match self {
            TriggerKernel::Exponential { omega } => {
                // exp(-w a) (1 - exp(-w (b - a))) / w, accurate for short spans
                (-omega * a).exp() * (-(-omega * (b - a)).exp_m1()) / omega
            }
            TriggerKernel::Step => b - a,
        }
    }

    /// Whether `g` is non-increasing on `[0, ∞)` (true for both kinds).
    pub fn is_monotone_decreasing(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn rbf_values() {
        let k = BasisKernel::rbf(vec![0.0, 6.0], 2.0).unwrap();
        assert_eq!(k.eval(1, 6.0).unwrap(), 1.0);
        assert_relative_eq!(
            k.eval(0, 6.0).unwrap(),
            (-4.5f64).exp(),
            max_relative = 1e-15
        );
        assert_relative_eq!(k.eval(0, 6.0).unwrap(), 0.011109, epsilon = 1e-6);
        assert!(matches!(
            k.eval(2, 0.0),
            Err(KernelError::InvalidIndex { .. })
        ));
    }

    #[test]
    fn constant_values() {
        let k = BasisKernel::constant(15.0).unwrap();
        assert_eq!(k.eval(0, 3.0).unwrap(), 1.0);
        assert_eq!(k.eval(0, 15.0).unwrap(), 0.0);
        assert_eq!(k.eval(0, -0.1).unwrap(), 0.0);
        assert_eq!(k.integral(0, 1.0, 4.0).unwrap(), 3.0);
        assert_eq!(k.integral(0, -2.0, 20.0).unwrap(), 15.0);
    }

    #[test]
    fn rbf_full_mass() {
        let k = BasisKernel::rbf(vec![0.0], 2.0).unwrap();
        let m = k.integral(0, -40.0, 40.0).unwrap();
        assert_relative_eq!(
            m,
            2.0 * (2.0 * std::f64::consts::PI).sqrt(),
            max_relative = 1e-14
        );
        assert_relative_eq!(m, 5.013257, epsilon = 1e-6);
    }

    #[test]
    fn rbf_far_tail_keeps_relative_accuracy() {
        let k = BasisKernel::rbf(vec![0.0], 0.5).unwrap();
        let m = k.mass(0, 4.0, 4.5);
        // direct Simpson with many panels
        let n = 20_000;
        let h = 0.5 / n as f64;
        let mut s = k.value(0, 4.0) + k.value(0, 4.5);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * k.value(0, 4.0 + i as f64 * h);
        }
        assert_relative_eq!(m, s * h / 3.0, max_relative = 1e-9);
    }

    #[test]
    fn reversed_interval_is_an_error() {
        let k = BasisKernel::constant(1.0).unwrap();
        assert!(matches!(
            k.integral(0, 2.0, 1.0),
            Err(KernelError::ReversedInterval(..))
        ));
        assert!(TriggerKernel::Step.integral(1.0, 0.0).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(BasisKernel::rbf(vec![0.0], 0.0).is_err());
        assert!(BasisKernel::rbf(vec![1.0, 1.0], 1.0).is_err());
        assert!(BasisKernel::constant(-1.0).is_err());
        assert!(TriggerKernel::exponential(0.0).is_err());
    }

    #[test]
    fn trigger_values() {
        let g = TriggerKernel::exponential(0.5).unwrap();
        assert_eq!(g.eval(0.0), 1.0);
        assert_relative_eq!(g.eval(2.0), (-1.0f64).exp(), max_relative = 1e-15);
        assert_eq!(TriggerKernel::Step.eval(-1.0), 0.0);
        assert_eq!(g.eval(-1e-9), 0.0);
        assert_relative_eq!(g.integral(0.0, 1e6).unwrap(), 2.0, max_relative = 1e-15);
        assert_eq!(TriggerKernel::Step.integral(-1.0, 3.0).unwrap(), 3.0);
        let expected = ((-0.5f64).exp() - (-2.0f64).exp()) / 0.5;
        assert_relative_eq!(
            g.integral(1.0, 4.0).unwrap(),
            expected,
            max_relative = 1e-14
        );
        let q = crate::quadrature::integrate(|t| g.eval(t), 1.0, 4.0, 1e-13, 1e-13);
        assert_relative_eq!(expected, q.value, max_relative = 1e-10);
        assert_relative_eq!(expected, 0.942391, epsilon = 1e-6);
    }

    #[test]
    fn sup_bounds_rbf() {
        let k = BasisKernel::rbf(vec![6.0], 2.0).unwrap();
        assert_eq!(k.sup(0, 5.0, 7.0), 1.0);
        assert_relative_eq!(k.sup(0, 0.0, 2.0), k.value(0, 2.0));
        assert_relative_eq!(k.sup(0, 9.0, 12.0), k.value(0, 9.0));
    }

    #[test]
    fn serde_round_trip() {
        let k = BasisKernel::rbf(vec![0.0, 6.0, 12.0], 2.0).unwrap();
        let s = serde_json::to_string(&k).unwrap();
        assert_eq!(s, r#"{"kind":"rbf","centers":[0.0,6.0,12.0],"sigma":2.0}"#);
        assert_eq!(serde_json::from_str::<BasisKernel>(&s).unwrap(), k);
        let g: TriggerKernel = serde_json::from_str(r#"{"kind":"step"}"#).unwrap();
        assert_eq!(g, TriggerKernel::Step);
    }
}
