use crate::model::{ParamId, ParamStore};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamCfg {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Apply weight decay directly to the parameters instead of adding
    /// `weight_decay * p` to the gradient.
    pub decoupled: bool,
}

impl Default for AdamCfg {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0, decoupled: false }
    }
}

/// One Adam step on a flat slice; `t` is the 1-based step count.
pub fn adam_update<F: Real>(p: &mut [F], g: &[F], m: &mut [F], v: &mut [F], t: u64, lr: f64, cfg: &AdamCfg) {
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..p.len() {
        let pi = p[i].as_f64();
        let mut gi = g[i].as_f64();
        if !cfg.decoupled {
            gi += cfg.weight_decay * pi;
        }
        let mi = cfg.beta1 * m[i].as_f64() + (1.0 - cfg.beta1) * gi;
        let vi = cfg.beta2 * v[i].as_f64() + (1.0 - cfg.beta2) * gi * gi;
        m[i] = F::from_f64(mi);
        v[i] = F::from_f64(vi);
        let mut next = pi - lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        if cfg.decoupled {
            next -= lr * cfg.weight_decay * pi;
        }
        p[i] = F::from_f64(next);
    }
}

/// Adam over a fixed subset of a parameter store.
#[derive(Clone, Debug)]
pub struct Adam<F: Real> {
    pub cfg: AdamCfg,
    pub t: u64,
    trainable: Vec<ParamId>,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(store: &ParamStore<F>, trainable: Vec<ParamId>, cfg: AdamCfg) -> Self {
        let zeros = |id: &ParamId| Tensor::zeros(store.get(*id).shape().to_vec());
        let m = trainable.iter().map(zeros).collect();
        let v = trainable.iter().map(zeros).collect();
        Self { cfg, t: 0, trainable, m, v }
    }

    pub fn trainable(&self) -> &[ParamId] {
        &self.trainable
    }

    pub fn moments(&self, i: usize) -> (&Tensor<F>, &Tensor<F>) {
        (&self.m[i], &self.v[i])
    }

    pub fn set_moments(&mut self, i: usize, m: Tensor<F>, v: Tensor<F>) {
        self.m[i] = m;
        self.v[i] = v;
    }

    /// `grads` is indexed by parameter; a missing gradient counts as zero.
    pub fn step(&mut self, store: &mut ParamStore<F>, grads: &[Option<Tensor<F>>], lr: f64) {
        self.t += 1;
        for (i, &id) in self.trainable.iter().enumerate() {
            let p = store.get_mut(id);
            let zero;
            let g = match grads.get(id.index()).and_then(|g| g.as_ref()) {
                Some(g) => g.data(),
                None => {
                    zero = vec![F::zero(); p.len()];
                    &zero
                }
            };
            adam_update(p.data_mut(), g, self.m[i].data_mut(), self.v[i].data_mut(), self.t, lr, &self.cfg);
        }
    }
}
