use super::param::ParamStore;

/// Adam with bias correction; first and second moments are kept per parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        Self::with_betas(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_betas(params: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: params.iter().map(|p| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// One update at step `t >= 1` using the gradients currently stored in
    /// `params`.
    pub fn step(&mut self, params: &mut ParamStore, lr: f64, t: u64) {
        assert!(t >= 1, "Adam step index starts at 1");
        let bc1 = 1.0 - self.beta1.powi(t as i32);
        let bc2 = 1.0 - self.beta2.powi(t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let (values, grad) = p.values_mut_and_grad();
            for (((x, &g), mi), vi) in values.iter_mut().zip(grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * g;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * g * g;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::param::{ParamId, ParameterTensor};

    fn scalar_store(x: f64, g: f64) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.push(ParameterTensor::new("x", vec![1], vec![x]).unwrap());
        s.get_mut(id).grad_mut()[0] = g;
        s
    }

    #[test]
    fn zero_gradient_is_noop() {
        let mut s = scalar_store(0.25, 0.0);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, 1e-3, 1);
        assert_eq!(s.get(ParamId(0)).values()[0], 0.25);
    }

    #[test]
    fn first_step_hand_evaluated() {
        // m_hat = 1, v_hat = 1 -> x = 1 - 1e-3 / (1 + 1e-8)
        let mut s = scalar_store(1.0, 1.0);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, 1e-3, 1);
        let want = 1.0 - 1e-3 / (1.0 + 1e-8);
        assert!((s.get(ParamId(0)).values()[0] - want).abs() < 1e-15);
    }

    #[test]
    fn two_steps_constant_gradient() {
        // constant g: m_t = g (1 - b1^t), v_t = g^2 (1 - b2^t) so m_hat = g, v_hat = g^2
        let g = 0.3;
        let mut s = scalar_store(2.0, g);
        let mut adam = Adam::new(&s);
        adam.step(&mut s, 1e-2, 1);
        adam.step(&mut s, 1e-2, 2);
        let step = 1e-2 * g / (g + 1e-8);
        let want = 2.0 - 2.0 * step;
        assert!((s.get(ParamId(0)).values()[0] - want).abs() < 1e-14);
    }
}
