/// Adam with decoupled weight decay. Minimizes: `grad` is the gradient of
/// the loss, not of the log density.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamW {
    pub fn new(dim: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            t: 0,
        }
    }

    /// One update. `decay[i] == false` exempts coordinate `i` from weight
    /// decay; `None` decays everything.
    pub fn step(&mut self, params: &mut [f64], grad: &[f64], decay: Option<&[bool]>) {
        debug_assert_eq!(params.len(), grad.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            if self.weight_decay > 0.0 && decay.is_none_or(|d| d[i]) {
                params[i] -= self.lr * self.weight_decay * params[i];
            }
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = AdamW::new(2, 0.05, 0.0);
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0), 2.0 * (p[1] + 0.5)];
            opt.step(&mut p, &g, None);
        }
        assert!((p[0] - 1.0).abs() < 1e-3 && (p[1] + 0.5).abs() < 1e-3);
    }

    #[test]
    fn decay_mask_respected() {
        let mut p = vec![1.0, 1.0];
        let mut opt = AdamW::new(2, 0.1, 0.5);
        opt.step(&mut p, &[0.0, 0.0], Some(&[true, false]));
        assert!(p[0] < 1.0);
        assert_eq!(p[1], 1.0);
    }
}
