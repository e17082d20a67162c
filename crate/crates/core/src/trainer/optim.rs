use crate::segnet::{Archive, ParamStore};
use crate::tensor::Tensor;

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v = mu v + (g + wd p)`, `p -= lr v`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Vec<Vec<f32>>,
}

impl Sgd {
    pub fn new(params: &ParamStore, momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: params.tensors().iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f32>], lr: f32) {
        assert_eq!(grads.len(), params.len());
        for (slot, g) in grads.iter().enumerate() {
            let p = params.get_mut(slot).data_mut();
            let v = &mut self.velocity[slot];
            for i in 0..p.len() {
                v[i] = self.momentum * v[i] + g[i] + self.weight_decay * p[i];
                p[i] -= lr * v[i];
            }
        }
    }

    pub fn save(&self, params: &ParamStore, archive: &mut Archive, prefix: &str) {
        archive.extend_prefixed(prefix, buffers(params, &self.velocity));
    }

    pub fn restore(&mut self, params: &ParamStore, archive: &Archive, prefix: &str) -> Result<(), String> {
        self.velocity = load_buffers(params, archive, prefix)?;
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    step: u64,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore, beta1: f32, beta2: f32) -> Self {
        let zeros = || params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut ParamStore, grads: &[Vec<f32>], lr: f32) {
        assert_eq!(grads.len(), params.len());
        self.step += 1;
        let c1 = 1.0 - (self.beta1 as f64).powi(self.step as i32);
        let c2 = 1.0 - (self.beta2 as f64).powi(self.step as i32);
        let step_size = (lr as f64 / c1) as f32;
        let c2_sqrt = c2.sqrt() as f32;
        for (slot, g) in grads.iter().enumerate() {
            let p = params.get_mut(slot).data_mut();
            let (m, v) = (&mut self.m[slot], &mut self.v[slot]);
            for i in 0..p.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() / c2_sqrt + self.eps);
            }
        }
    }

    pub fn save(&self, params: &ParamStore, archive: &mut Archive, prefix: &str) {
        archive.extend_prefixed(&format!("{prefix}_m"), buffers(params, &self.m));
        archive.extend_prefixed(&format!("{prefix}_v"), buffers(params, &self.v));
    }

    pub fn restore(&mut self, params: &ParamStore, archive: &Archive, prefix: &str, step: u64) -> Result<(), String> {
        self.m = load_buffers(params, archive, &format!("{prefix}_m"))?;
        self.v = load_buffers(params, archive, &format!("{prefix}_v"))?;
        self.step = step;
        Ok(())
    }
}

fn buffers(params: &ParamStore, bufs: &[Vec<f32>]) -> Vec<(String, Tensor)> {
    params
        .names()
        .iter()
        .zip(bufs)
        .enumerate()
        .map(|(slot, (n, b))| (n.clone(), Tensor::from_vec(params.get(slot).shape(), b.clone())))
        .collect()
}

fn load_buffers(params: &ParamStore, archive: &Archive, prefix: &str) -> Result<Vec<Vec<f32>>, String> {
    let stored = archive.prefixed(prefix);
    if stored.len() != params.len() {
        return Err(format!("{prefix}: expected {} buffers, found {}", params.len(), stored.len()));
    }
    stored
        .into_iter()
        .enumerate()
        .map(|(slot, (name, t))| {
            if name != params.name(slot) || t.shape() != params.get(slot).shape() {
                return Err(format!("{prefix}: buffer {name} does not match parameter {}", params.name(slot)));
            }
            Ok(t.into_data())
        })
        .collect()
}
