//! AdamW with decoupled weight decay.

use crate::matrix::Matrix;

#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64, tensor_sizes: &[usize]) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update over parallel lists of parameters and gradients. Weight
    /// decay is decoupled: `w -= lr * wd * w` on top of the Adam step.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let gd = g.data();
            for i in 0..pd.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gd[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gd[i] * gd[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                pd[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * pd[i]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_zero_decay_is_a_no_op() {
        let mut w = Matrix::from_rows(&[&[1.0, -2.0], &[0.5, 3.0]]);
        let g = Matrix::zeros(2, 2);
        let mut opt = AdamW::new(0.1, 0.0, &[4]);
        let before = w.clone();
        for _ in 0..5 {
            opt.step(&mut [&mut w], &[&g]);
        }
        assert_eq!(w, before);
    }

    #[test]
    fn first_step_moves_against_the_gradient_at_lr() {
        // With bias correction, the very first Adam step has magnitude
        // close to lr for any nonzero gradient.
        let mut w = Matrix::zeros(1, 3);
        let g = Matrix::from_rows(&[&[0.3, -2.0, 1e-4]]);
        let mut opt = AdamW::new(0.01, 0.0, &[3]);
        opt.step(&mut [&mut w], &[&g]);
        for (wi, gi) in w.data().iter().zip(g.data()) {
            assert!((wi.abs() - 0.01).abs() < 1e-3, "step size {wi}");
            assert!(wi.signum() == -gi.signum());
        }
    }

    #[test]
    fn decoupled_decay_shrinks_weights_without_gradient() {
        let mut w = Matrix::from_rows(&[&[2.0]]);
        let g = Matrix::zeros(1, 1);
        let mut opt = AdamW::new(0.1, 0.5, &[1]);
        opt.step(&mut [&mut w], &[&g]);
        // w - lr*wd*w = 2.0 * (1 - 0.05)
        assert!((w.at(0, 0) - 1.9).abs() < 1e-12);
    }
}
