use crate::bench::config::AdamConfig;
use crate::tensor::Tensor;

/// Adam with coupled L2 weight decay (`g ← g + λθ` before the moment update).
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f64,
    weight_decay: f64,
    cfg: AdamConfig,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor], lr: f64, weight_decay: f64, cfg: AdamConfig) -> Self {
        Adam {
            lr,
            weight_decay,
            cfg,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update. A missing gradient counts as zero.
    pub fn step(&mut self, params: &mut [Tensor], grads: &[Option<Tensor>]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        assert_eq!(params.len(), grads.len(), "one gradient slot per parameter");
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t);
        let c2 = 1.0 - beta2.powi(self.t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].as_ref().map(Tensor::data);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, theta) in p.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]) + self.weight_decay * *theta;
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *theta -= self.lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
    }
}
