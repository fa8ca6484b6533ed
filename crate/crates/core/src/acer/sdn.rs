//! Stochastic dueling critic and the value target built from it.

use rand::Rng;

use crate::approximator::{Approximator, ParamVector};
use crate::error::{invalid, Result};
use crate::policy::GaussianHead;

pub const DEFAULT_SDN_SAMPLES: usize = 5;

/// `Q~(x, a) = V(x) + A(x, a) - (1/n) sum_j A(x, u_j)` with `u_j ~ pi(.|x)`.
///
/// `v_net` maps observations to a scalar; `a_net` maps the concatenated
/// observation and action to a scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct SdnCritic {
    pub v_net: Approximator,
    pub a_net: Approximator,
    pub n_samples: usize,
}

fn concat(x: &[f64], a: &[f64]) -> Vec<f64> {
    let mut v = Vec::with_capacity(x.len() + a.len());
    v.extend_from_slice(x);
    v.extend_from_slice(a);
    v
}

impl SdnCritic {
    pub fn new(v_net: Approximator, a_net: Approximator, n_samples: usize) -> Result<Self> {
        if n_samples == 0 {
            return invalid("SDN needs at least one sample");
        }
        if v_net.output_dim() != 1 || a_net.output_dim() != 1 {
            return invalid("SDN heads must be scalar");
        }
        if a_net.input_dim() <= v_net.input_dim() {
            return invalid("advantage input must append the action to the observation");
        }
        Ok(SdnCritic { v_net, a_net, n_samples })
    }

    pub fn value(&self, x: &[f64]) -> Result<f64> {
        Ok(self.v_net.forward(x)?[0])
    }

    pub fn advantage(&self, x: &[f64], a: &[f64]) -> Result<f64> {
        Ok(self.a_net.forward(&concat(x, a))?[0])
    }

    /// `Q~` for given baseline samples.
    pub fn q_tilde_with(&self, x: &[f64], a: &[f64], samples: &[Vec<f64>]) -> Result<f64> {
        if samples.is_empty() {
            return invalid("no baseline samples");
        }
        let mut baseline = 0.0;
        for u in samples {
            baseline += self.advantage(x, u)?;
        }
        Ok(self.value(x)? + self.advantage(x, a)? - baseline / samples.len() as f64)
    }

    /// Draws `n_samples` fresh baseline actions from `head`, returning `Q~` and the draws.
    pub fn sample_q_tilde<R: Rng + ?Sized>(
        &self,
        head: &GaussianHead,
        x: &[f64],
        a: &[f64],
        rng: &mut R,
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        let samples: Vec<Vec<f64>> = (0..self.n_samples).map(|_| head.sample(rng)).collect();
        Ok((self.q_tilde_with(x, a, &samples)?, samples))
    }

    /// Accumulates `upstream * dQ~` into the two parameter gradients, holding the samples fixed.
    pub fn backward_q_tilde(
        &self,
        x: &[f64],
        a: &[f64],
        samples: &[Vec<f64>],
        upstream: f64,
        grad_v: &mut ParamVector,
        grad_a: &mut ParamVector,
    ) -> Result<()> {
        self.v_net.backward(x, &[upstream], grad_v)?;
        self.a_net.backward(&concat(x, a), &[upstream], grad_a)?;
        let share = -upstream / samples.len() as f64;
        for u in samples {
            self.a_net.backward(&concat(x, u), &[share], grad_a)?;
        }
        Ok(())
    }
}

/// `Q~` with fresh baseline samples.
pub fn sdn_q_tilde<R: Rng + ?Sized>(
    critic: &SdnCritic,
    head: &GaussianHead,
    x: &[f64],
    a: &[f64],
    rng: &mut R,
) -> Result<f64> {
    Ok(critic.sample_q_tilde(head, x, a, rng)?.0)
}

/// `min(1, rho) (q_ret - q_tilde) + v`
pub fn v_target(q_ret: f64, q_tilde_at_a: f64, v: f64, rho: f64) -> f64 {
    rho.min(1.0) * (q_ret - q_tilde_at_a) + v
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn critic(rng: &mut ChaCha8Rng, n: usize) -> SdnCritic {
        SdnCritic::new(Approximator::mlp(2, 4, 1, rng), Approximator::mlp(3, 4, 1, rng), n).unwrap()
    }

    #[test]
    fn zero_advantage_gives_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = critic(&mut rng, 5);
        c.a_net = Approximator::linear(3, 1);
        let head = GaussianHead::new(vec![0.2], 0.3).unwrap();
        let x = [0.4, -0.1];
        let q = sdn_q_tilde(&c, &head, &x, &[0.7], &mut rng).unwrap();
        assert_eq!(q, c.value(&x).unwrap());
    }

    #[test]
    fn v_target_examples() {
        assert_eq!(v_target(2.0, 2.0, 0.5, 3.0), 0.5);
        assert_eq!(v_target(3.0, 1.0, 1.0, 1.5), 3.0);
        assert_eq!(v_target(3.0, 1.0, 1.0, 0.25), 1.5);
    }

    #[test]
    fn baseline_variance_shrinks_with_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = critic(&mut rng, 1);
        let head = GaussianHead::new(vec![0.1], 0.3).unwrap();
        let x = [0.3, 0.2];
        let var = |n: usize, rng: &mut ChaCha8Rng| {
            let c = SdnCritic { n_samples: n, ..base.clone() };
            let draws: Vec<f64> = (0..20_000).map(|_| sdn_q_tilde(&c, &head, &x, &[0.5], rng).unwrap()).collect();
            let m = draws.iter().sum::<f64>() / draws.len() as f64;
            draws.iter().map(|d| (d - m).powi(2)).sum::<f64>() / (draws.len() - 1) as f64
        };
        let ratio = var(1, &mut rng) / var(100, &mut rng);
        assert!((ratio / 100.0 - 1.0).abs() < 0.2, "ratio {ratio}");
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = critic(&mut rng, 3);
        let head = GaussianHead::new(vec![0.0], 0.3).unwrap();
        let samples: Vec<Vec<f64>> = (0..3).map(|_| head.sample(&mut rng)).collect();
        let (x, a) = ([0.5, -0.3], [0.2]);
        let mut gv = ParamVector::zeros_like(&c.v_net.params);
        let mut ga = ParamVector::zeros_like(&c.a_net.params);
        c.backward_q_tilde(&x, &a, &samples, 1.0, &mut gv, &mut ga).unwrap();
        let h = 1e-5;
        for i in 0..ga.len() {
            let mut plus = c.clone();
            plus.a_net.params.values[i] += h;
            let mut minus = c.clone();
            minus.a_net.params.values[i] -= h;
            let fd = (plus.q_tilde_with(&x, &a, &samples).unwrap() - minus.q_tilde_with(&x, &a, &samples).unwrap())
                / (2.0 * h);
            assert!((fd - ga.values[i]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
        for i in 0..gv.len() {
            let mut plus = c.clone();
            plus.v_net.params.values[i] += h;
            let mut minus = c.clone();
            minus.v_net.params.values[i] -= h;
            let fd = (plus.q_tilde_with(&x, &a, &samples).unwrap() - minus.q_tilde_with(&x, &a, &samples).unwrap())
                / (2.0 * h);
            assert!((fd - gv.values[i]).abs() <= 1e-6 * (1.0 + fd.abs()));
        }
    }
}
