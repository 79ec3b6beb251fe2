use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// Linear β schedule with cumulative products held in double precision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::linear(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::validation("steps", "must be at least 1"));
        }
        if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::validation("beta", "need 0 < beta_start <= beta_end < 1"));
        }
        let beta: Vec<f64> = if steps == 1 {
            vec![beta_start]
        } else {
            (0..steps).map(|i| beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64).collect()
        };
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut acc = 1.0;
        for a in &alpha {
            acc *= a;
            alpha_bar.push(acc);
        }
        Ok(Self { beta_start, beta_end, beta, alpha, alpha_bar })
    }

    pub fn steps(&self) -> usize {
        self.beta.len()
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn alpha_bar(&self) -> &[f64] {
        &self.alpha_bar
    }

    pub fn check_t(&self, t: usize) -> Result<()> {
        if t < self.steps() {
            Ok(())
        } else {
            Err(Error::validation("t", format!("{t} outside [0, {})", self.steps())))
        }
    }

    /// Forward diffusion `z_t = sqrt(ᾱ_t)·z0 + sqrt(1-ᾱ_t)·noise`.
    pub fn q_sample<T: Float>(&self, z0: &Tensor<T>, t: usize, noise: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_t(t)?;
        if z0.shape() != noise.shape() {
            return Err(Error::shape("noise", z0.shape(), noise.shape()));
        }
        let a = T::of(self.alpha_bar[t].sqrt());
        let s = T::of((1.0 - self.alpha_bar[t]).sqrt());
        let data = z0.data().iter().zip(noise.data()).map(|(&x, &n)| a * x + s * n).collect();
        Ok(Tensor::new(z0.shape(), data))
    }

    /// Evenly spaced timesteps for a strided sampler, ascending, always
    /// including `0` and `T-1`.
    pub fn respaced(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::validation("steps", format!("must be in [1, {total}]")));
        }
        if steps == 1 {
            return Ok(vec![total - 1]);
        }
        let mut ts: Vec<usize> =
            (0..steps).map(|i| ((i as f64) * (total - 1) as f64 / (steps - 1) as f64).round() as usize).collect();
        ts.dedup();
        Ok(ts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_is_monotone_and_in_unit_interval() {
        let s = NoiseSchedule::default();
        assert_eq!(s.steps(), 1000);
        assert!(s.beta().windows(2).all(|w| w[0] <= w[1]));
        assert!(s.alpha_bar().windows(2).all(|w| w[0] > w[1]));
        assert!(s.alpha_bar().iter().all(|&a| a > 0.0 && a < 1.0));
        for &a in s.alpha_bar() {
            assert!((a.sqrt().powi(2) + (1.0 - a) - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn alpha_bar_matches_cumulative_product_oracle() {
        let s = NoiseSchedule::default();
        let t = 500;
        // Independent recomputation from the closed-form betas.
        let mut prod = 1.0f64;
        for i in 0..=t {
            prod *= 1.0 - (1e-4 + (2e-2 - 1e-4) * i as f64 / 999.0);
        }
        assert!((s.alpha_bar()[t] - prod).abs() < 1e-14);
        let z0 = Tensor::<f64>::new(&[1], vec![0.8]);
        let n = Tensor::<f64>::new(&[1], vec![-0.3]);
        let zt = s.q_sample(&z0, t, &n).unwrap();
        let want = prod.sqrt() * 0.8 + (1.0 - prod).sqrt() * -0.3;
        assert!((zt.data()[0] - want).abs() < 1e-14);
    }

    #[test]
    fn q_sample_limits() {
        let s = NoiseSchedule::default();
        let z0 = Tensor::<f64>::new(&[4], vec![0.5, -1.0, 0.25, 1.0]);
        let n = Tensor::<f64>::new(&[4], vec![0.9, -0.9, 0.5, 0.0]);
        let zt = s.q_sample(&z0, 0, &n).unwrap();
        let bound = (1.0 - s.alpha_bar()[0]).sqrt();
        for (a, b) in zt.data().iter().zip(z0.data()) {
            assert!((a - b).abs() <= bound);
        }
        let zeros = Tensor::<f64>::zeros(&[4]);
        let zt = s.q_sample(&zeros, 700, &n).unwrap();
        let k = (1.0 - s.alpha_bar()[700]).sqrt();
        for (a, b) in zt.data().iter().zip(n.data()) {
            assert_eq!(*a, k * b);
        }
        assert!(s.q_sample(&z0, 1000, &n).is_err());
    }

    #[test]
    fn respacing_covers_both_ends() {
        let s = NoiseSchedule::default();
        let ts = s.respaced(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!((ts[0], ts[49]), (0, 999));
        assert_eq!(s.respaced(1000).unwrap(), (0..1000).collect::<Vec<_>>());
        assert!(s.respaced(1001).is_err());
    }
}
