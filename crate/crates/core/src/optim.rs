use crate::nets::{Group, ParamId, ParamSet};
use crate::tensor::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Adam over a fixed subset of a [`ParamSet`], with a learning rate per
/// parameter group.
#[derive(Clone, Debug)]
pub struct Adam {
    pub t: u64,
    ids: Vec<ParamId>,
    lrs: Vec<f64>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(ps: &ParamSet, ids: Vec<ParamId>, lr_of: impl Fn(Group) -> f64) -> Self {
        let lrs = ids.iter().map(|&id| lr_of(ps.group(id))).collect();
        let m: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(ps.get(id).rows(), ps.get(id).cols())).collect();
        Adam {
            t: 0,
            v: m.clone(),
            m,
            ids,
            lrs,
        }
    }

    pub fn ids(&self) -> &[ParamId] {
        &self.ids
    }

    /// One descent step; `grads[i]` belongs to `ids()[i]`.
    pub fn step(&mut self, ps: &mut ParamSet, grads: &[Tensor]) {
        assert_eq!(grads.len(), self.ids.len());
        self.t += 1;
        let c1 = 1.0 - BETA1.powi(self.t as i32);
        let c2 = 1.0 - BETA2.powi(self.t as i32);
        for (i, &id) in self.ids.iter().enumerate() {
            let lr = self.lrs[i];
            let g = grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = ps.get_mut(id).data_mut();
            for j in 0..w.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPS);
            }
        }
    }

    /// Moment tensors in id order: all first moments, then all second.
    pub fn moments(&self) -> impl Iterator<Item = &Tensor> {
        self.m.iter().chain(self.v.iter())
    }

    pub fn moments_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.m.iter_mut().chain(self.v.iter_mut())
    }
}
