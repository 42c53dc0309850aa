use ndgrad::{ParamSet, Tensor};

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// One update; `grads[i]` pairs with `params.tensors()[i]`, `None` leaves it untouched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.tensors_mut().iter_mut().zip(grads).enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                *w -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![1.0, -2.0, 0.5]));
        let mut opt = Adam::new(&p, 0.1);
        opt.step(&mut p, &[Some(Tensor::from_vec(vec![3.0, -0.5, 0.0]))]);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-7);
        assert!((w[1] + 1.9).abs() < 1e-7);
        assert_eq!(w[2], 0.5);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::from_vec(vec![5.0]));
        let mut opt = Adam::new(&p, 0.05);
        for _ in 0..2000 {
            let w = p.get("w").unwrap().data()[0];
            opt.step(&mut p, &[Some(Tensor::from_vec(vec![2.0 * (w - 1.5)]))]);
        }
        assert!((p.get("w").unwrap().data()[0] - 1.5).abs() < 1e-3);
    }
}
