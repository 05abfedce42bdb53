/// Adam with bias correction over a fixed list of parameter tensors.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, sizes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    /// One update; `tensors[i]` pairs the i-th parameter slice with its gradient.
    pub fn step(&mut self, tensors: &mut [(&mut [f64], &[f64])]) {
        assert_eq!(tensors.len(), self.m.len(), "tensor count changed between steps");
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for ((params, grads), (m, v)) in tensors.iter_mut().zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            assert_eq!(params.len(), m.len());
            assert_eq!(grads.len(), m.len());
            for i in 0..m.len() {
                let g = grads[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}
