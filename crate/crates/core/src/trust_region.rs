//! Linearised KL trust region in statistics space.

use crate::approximator::{Approximator, ParamVector};
use crate::error::{invalid, AcerError, Result};

/// `minimize 0.5 |g - z|^2 subject to k . z <= delta`
#[derive(Debug, Clone, PartialEq)]
pub struct TrustRegionProblem {
    pub g: Vec<f64>,
    pub k: Vec<f64>,
    pub delta: f64,
}

impl TrustRegionProblem {
    pub fn new(g: Vec<f64>, k: Vec<f64>, delta: f64) -> Result<Self> {
        if g.len() != k.len() {
            return invalid(format!("g has {} entries but k has {}", g.len(), k.len()));
        }
        if !(delta >= 0.0) {
            return invalid("delta must be non-negative");
        }
        Ok(TrustRegionProblem { g, k, delta })
    }

    fn check_finite(&self) -> Result<()> {
        if self.g.iter().chain(&self.k).any(|v| !v.is_finite()) || !self.delta.is_finite() {
            return Err(AcerError::NumericFault("non-finite trust-region input".into()));
        }
        Ok(())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Closed-form solution `z* = g - max(0, (k.g - delta) / |k|^2) k`.
///
/// Returns `g` unchanged when `k = 0`.
pub fn project(problem: &TrustRegionProblem) -> Result<Vec<f64>> {
    problem.check_finite()?;
    let kk = dot(&problem.k, &problem.k);
    if kk == 0.0 {
        return Ok(problem.g.clone());
    }
    let scale = ((dot(&problem.k, &problem.g) - problem.delta) / kk).max(0.0);
    Ok(problem.g.iter().zip(&problem.k).map(|(g, k)| g - scale * k).collect())
}

/// Numerical solution of the same problem by bisection on the Lagrange
/// multiplier of the dual.
///
/// For a multiplier `lambda >= 0` the Lagrangian minimiser is
/// `z(lambda) = g - lambda k`, and `k . z(lambda)` is non-increasing in
/// `lambda`. The routine brackets the smallest feasible multiplier by
/// doubling, then bisects until the bracket is narrower than `tolerance`
/// measured in `z`.
pub fn project_numeric_oracle(problem: &TrustRegionProblem, tolerance: f64) -> Vec<f64> {
    let z_at = |lambda: f64| -> Vec<f64> { problem.g.iter().zip(&problem.k).map(|(g, k)| g - lambda * k).collect() };
    let feasible = |lambda: f64| dot(&problem.k, &z_at(lambda)) <= problem.delta;
    if feasible(0.0) {
        return problem.g.clone();
    }
    let k_norm = dot(&problem.k, &problem.k).sqrt();
    let mut hi = 1.0;
    while !feasible(hi) {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    let tolerance = tolerance.max(f64::MIN_POSITIVE);
    for _ in 0..2000 {
        if (hi - lo) * k_norm <= tolerance * 1e-3 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if feasible(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    z_at(hi)
}

/// Adds `J^T z_star` for the statistics head at `x` into `grad`.
pub fn trust_region_backprop(approx: &Approximator, x: &[f64], z_star: &[f64], grad: &mut ParamVector) -> Result<()> {
    if z_star.len() != approx.output_dim() {
        return invalid(format!(
            "statistics gradient has {} entries, head has {}",
            z_star.len(),
            approx.output_dim()
        ));
    }
    if z_star.iter().all(|v| *v == 0.0) {
        return Ok(());
    }
    approx.backward(x, z_star, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn problem(g: &[f64], k: &[f64], delta: f64) -> TrustRegionProblem {
        TrustRegionProblem::new(g.to_vec(), k.to_vec(), delta).unwrap()
    }

    #[test]
    fn examples() {
        let p = problem(&[2.0, 0.0], &[1.0, 0.0], 1.0);
        assert_eq!(project(&p).unwrap(), vec![1.0, 0.0]);
        let p = problem(&[0.5, -3.0], &[1.0, 1.0], 1.0);
        assert_eq!(project(&p).unwrap(), p.g);
        let p = problem(&[0.5, -3.0], &[0.0, 0.0], 0.0);
        assert_eq!(project(&p).unwrap(), p.g);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(TrustRegionProblem::new(vec![1.0], vec![1.0, 2.0], 1.0).is_err());
        assert!(TrustRegionProblem::new(vec![1.0], vec![1.0], -0.1).is_err());
        let p = problem(&[f64::NAN], &[1.0], 1.0);
        assert!(matches!(project(&p), Err(AcerError::NumericFault(_))));
    }

    #[test]
    fn zero_delta_limit() {
        let p = problem(&[3.0, 1.0, -2.0], &[0.5, 2.0, 1.0], 0.0);
        let z = project(&p).unwrap();
        assert!(dot(&p.k, &z).abs() < 1e-12);
        let p = problem(&[3.0, 1.0, -2.0], &[-0.5, -2.0, 1.0], 0.0);
        let z = project(&p).unwrap();
        assert!((dot(&p.k, &z) - dot(&p.k, &p.g).min(0.0)).abs() < 1e-12);
    }

    #[test]
    fn backprop_zero_is_noop() {
        let approx = Approximator::linear(3, 2);
        let mut grad = ParamVector::zeros_like(&approx.params);
        trust_region_backprop(&approx, &[1.0, 2.0, 3.0], &[0.0, 0.0], &mut grad).unwrap();
        assert!(grad.values.iter().all(|v| *v == 0.0));
        assert!(trust_region_backprop(&approx, &[1.0, 2.0, 3.0], &[0.0], &mut grad).is_err());
    }

    #[test]
    fn backprop_linear_outer_product() {
        let approx = Approximator::linear(2, 2);
        let mut grad = ParamVector::zeros_like(&approx.params);
        trust_region_backprop(&approx, &[2.0, -1.0], &[0.5, 3.0], &mut grad).unwrap();
        let mut expect = ParamVector::zeros_like(&approx.params);
        approx.backward(&[2.0, -1.0], &[0.5, 3.0], &mut expect).unwrap();
        assert_eq!(grad, expect);
        assert!(grad.values.iter().any(|v| (*v - 6.0).abs() < 1e-15));
        assert!(grad.values.iter().any(|v| (*v + 3.0).abs() < 1e-15));
    }

    fn instance() -> impl Strategy<Value = TrustRegionProblem> {
        (1usize..=32).prop_flat_map(|n| {
            (
                prop::collection::vec(-10.0f64..10.0, n),
                prop::collection::vec(-10.0f64..10.0, n),
                0.0f64..5.0,
            )
                .prop_map(|(g, k, delta)| TrustRegionProblem { g, k, delta })
        })
    }

    proptest! {
        #[test]
        fn feasible_optimal_idempotent(p in instance(), probes in prop::collection::vec(prop::collection::vec(-10.0f64..10.0, 32), 100)) {
            let z = project(&p).unwrap();
            let kk = dot(&p.k, &p.k);
            if kk > 0.0 {
                prop_assert!(dot(&p.k, &z) <= p.delta + 1e-10);
            }
            if dot(&p.k, &p.g) <= p.delta {
                prop_assert_eq!(&z, &p.g);
            }
            let dist = |y: &[f64]| p.g.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let best = dist(&z);
            for probe in &probes {
                let mut y = probe[..p.g.len()].to_vec();
                let excess = dot(&p.k, &y) - p.delta;
                if excess > 0.0 {
                    // Pull the probe back into the half-space along k.
                    for (yi, ki) in y.iter_mut().zip(&p.k) {
                        *yi -= excess / kk * ki;
                    }
                }
                prop_assert!(best <= dist(&y) + 1e-8);
            }
            let again = project(&TrustRegionProblem { g: z.clone(), ..p.clone() }).unwrap();
            for (a, b) in again.iter().zip(&z) {
                prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
            let oracle = project_numeric_oracle(&p, 1e-10);
            let gap = oracle.iter().zip(&z).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            prop_assert!(gap <= 1e-8, "gap {}", gap);
        }
    }
}
