use super::{Real, Tensor};
use crate::error::{shape_err, Result};

/// Hyperparameters of the bias-corrected adaptive-moment optimizer.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-parameter first/second moment buffers plus the step counter.
#[derive(Clone, Debug, Default)]
pub struct OptimizerState<T> {
    pub first: Vec<Vec<T>>,
    pub second: Vec<Vec<T>>,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: OptimizerState<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            state: OptimizerState {
                first: Vec::new(),
                second: Vec::new(),
                step: 0,
            },
        }
    }

    /// One update of `params` given `grads` in the same order. Moment
    /// buffers are created lazily on the first call and must keep matching
    /// the parameter shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Tensor<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err!(
                "adam: {} params but {} grads",
                params.len(),
                grads.len()
            ));
        }
        if self.state.first.is_empty() {
            self.state.first = params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
            self.state.second = self.state.first.clone();
        }
        if self.state.first.len() != params.len() {
            return Err(shape_err!("adam: parameter list changed length"));
        }
        for ((p, g), m) in params.iter().zip(grads).zip(&self.state.first) {
            if p.shape() != g.shape() || m.len() != p.numel() {
                return Err(shape_err!(
                    "adam: param {:?} vs grad {:?}",
                    p.shape(),
                    g.shape()
                ));
            }
        }
        self.state.step += 1;
        let c = self.config;
        let t = self.state.step as i32;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let corr1 = T::lit(1.0 - c.beta1.powi(t));
        let corr2 = T::lit(1.0 - c.beta2.powi(t));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.eps);
        for (i, p) in params.iter_mut().enumerate() {
            let m = &mut self.state.first[i];
            let v = &mut self.state.second[i];
            for (((pv, &gv), mv), vv) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *mv = b1 * *mv + (one - b1) * gv;
                *vv = b2 * *vv + (one - b2) * gv * gv;
                let mhat = *mv / corr1;
                let vhat = *vv / corr2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::from_fn(&[3], |i| i as f64);
        let before = p.clone();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut [&mut p], &[Tensor::zeros(&[3])]).unwrap();
        assert_eq!(p, before);
        assert!(opt.state.first[0].iter().all(|&m| m == 0.0));
        assert_eq!(opt.state.step, 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::<f64>::new(&[3], vec![1.0, 1.0, 1.0]).unwrap();
        let g = Tensor::new(&[3], vec![0.5, -3.0, 1e-3]).unwrap();
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
        // mhat = g, vhat = g^2 so the step is lr * sign(g) up to eps
        for (pv, gv) in p.data().iter().zip(g.data()) {
            let moved = pv - 1.0;
            assert!((moved + 0.001 * gv.signum()).abs() < 1e-7, "{moved}");
        }
    }

    #[test]
    fn moments_decay_and_counter_increments() {
        let mut p = Tensor::<f64>::zeros(&[1]);
        let mut opt = Adam::new(AdamConfig::default());
        opt.step(&mut [&mut p], &[Tensor::ones(&[1])]).unwrap();
        let (m1, v1) = (opt.state.first[0][0], opt.state.second[0][0]);
        opt.step(&mut [&mut p], &[Tensor::zeros(&[1])]).unwrap();
        assert!((opt.state.first[0][0] - 0.9 * m1).abs() < 1e-15);
        assert!((opt.state.second[0][0] - 0.999 * v1).abs() < 1e-15);
        assert_eq!(opt.state.step, 2);
    }

    #[test]
    fn mismatched_grads_rejected() {
        let mut p = Tensor::<f32>::zeros(&[2]);
        let mut opt = Adam::new(AdamConfig::default());
        assert!(opt.step(&mut [&mut p], &[Tensor::zeros(&[3])]).is_err());
        assert!(opt.step(&mut [&mut p], &[]).is_err());
    }
}
