use crate::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-4, beta1: 0.0, beta2: 0.9, eps: 1e-8 }
    }
}

/// First/second moment buffers for one parameter set.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

/// Adam with bias correction, updating parameters in place.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    pub state: AdamState<T>,
}

impl<T: Element> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Tensor<T>]) -> Self {
        let zeros: Vec<Tensor<T>> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        Adam { config, state: AdamState { step: 0, m: zeros.clone(), v: zeros } }
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), self.state.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        self.state.step += 1;
        let c = &self.config;
        let t = self.state.step as f64;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);
        let step_size = T::lit(c.lr * bc2.sqrt() / bc1);
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, eps) = (T::one(), T::lit(c.eps * bc2.sqrt()));
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.state.m).zip(&mut self.state.v) {
            assert_eq!(p.shape(), g.shape(), "gradient shape");
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                *pi = *pi - step_size * *mi / (vi.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::from_vec(&[2], vec![1.0f64, -1.0])];
        let g = vec![Tensor::from_vec(&[2], vec![0.3, -5.0])];
        let mut opt = Adam::new(AdamConfig { lr: 0.01, beta1: 0.5, beta2: 0.9, eps: 1e-12 }, &p);
        opt.step(&mut p, &g);
        // bias-corrected first step is lr * sign(g)
        assert!((p[0].data()[0] - 0.99).abs() < 1e-9);
        assert!((p[0].data()[1] + 0.99).abs() < 1e-9);
        assert_eq!(opt.state.step, 1);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut p = vec![Tensor::from_vec(&[1], vec![3.0f64])];
        let mut opt = Adam::new(AdamConfig { lr: 0.05, beta1: 0.9, beta2: 0.999, eps: 1e-8 }, &p);
        for _ in 0..2000 {
            let g = vec![p[0].map(|x| 2.0 * (x - 1.0))];
            opt.step(&mut p, &g);
        }
        assert!((p[0].data()[0] - 1.0).abs() < 1e-3);
    }
}
