#![allow(dead_code)]

use cotp_core::cloud::{Point, PointCloud};
use cotp_core::nets::{ParamId, ParamSet};
use cotp_core::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Below this absolute gap two derivatives count as equal whatever their size.
pub const ABS_FLOOR: f64 = 1e-10;

pub fn close(analytic: f64, numeric: f64, tol: f64) -> bool {
    let gap = (analytic - numeric).abs();
    gap <= ABS_FLOOR || gap <= tol * analytic.abs().max(numeric.abs())
}

#[derive(Debug, Clone, Copy)]
pub struct Probe {
    pub within: usize,
    pub probed: usize,
}

impl Probe {
    pub fn fraction(&self) -> f64 {
        self.within as f64 / self.probed as f64
    }
}

/// Central differences of `f` at `count` randomly chosen scalars of the
/// tensors `ids`, compared with `grads` (aligned with `ids`).
pub fn probe_params(
    params: &ParamSet,
    ids: &[ParamId],
    grads: &[Tensor],
    count: usize,
    h: f64,
    tol: f64,
    seed: u64,
    f: impl Fn(&ParamSet) -> f64,
) -> Probe {
    let sizes: Vec<usize> = ids.iter().map(|&id| params.get(id).len()).collect();
    let total: usize = sizes.iter().sum();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut within = 0;
    for _ in 0..count {
        let mut k = rng.gen_range(0..total);
        let mut t = 0;
        while k >= sizes[t] {
            k -= sizes[t];
            t += 1;
        }
        let mut ps = params.clone();
        let v0 = params.get(ids[t]).data()[k];
        ps.get_mut(ids[t]).data_mut()[k] = v0 + h;
        let up = f(&ps);
        ps.get_mut(ids[t]).data_mut()[k] = v0 - h;
        let down = f(&ps);
        let numeric = (up - down) / (2.0 * h);
        let analytic = grads[t].data()[k];
        if close(analytic, numeric, tol) {
            within += 1;
        } else {
            eprintln!("  {}[{k}]: analytic {analytic:.6e} numeric {numeric:.6e}", params.name(ids[t]));
        }
    }
    Probe { within, probed: count }
}

/// Central differences over every entry of `x0`.
pub fn probe_input(x0: &Tensor, grad: &Tensor, h: f64, tol: f64, f: impl Fn(&Tensor) -> f64) -> Probe {
    let mut within = 0;
    for i in 0..x0.len() {
        let mut x = x0.clone();
        x.data_mut()[i] += h;
        let up = f(&x);
        x.data_mut()[i] -= 2.0 * h;
        let down = f(&x);
        if close(grad.data()[i], (up - down) / (2.0 * h), tol) {
            within += 1;
        }
    }
    Probe { within, probed: x0.len() }
}

pub fn uniform_points(n: usize, lim: f64, seed: u64) -> Vec<Point> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| [(); 3].map(|_| rng.gen_range(-lim..lim))).collect()
}

pub fn uniform_cloud(n: usize, seed: u64) -> PointCloud {
    PointCloud::new(uniform_points(n, 1.0, seed)).unwrap()
}

pub fn uniform_tensor(rows: usize, cols: usize, lim: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-lim..lim)).collect())
}

/// Generator-side pieces of the training objective for fixed seeds, with
/// the critic frozen and `L_OTR` supplied as a constant.
pub mod objective {
    use cotp_core::autodiff::{Graph, Var};
    use cotp_core::cloud::PointCloud;
    use cotp_core::losses::{cost_c, generator_objective, wasserstein_quadratic, LossWeights};
    use cotp_core::model::CodecModel;
    use cotp_core::nets::{Bound, Group, ParamSet};
    use cotp_core::tensor::Tensor;

    pub struct Terms<'g> {
        pub cost: Var<'g>,
        pub d_wass: Var<'g>,
        pub rate_bpp: Var<'g>,
        pub total: Var<'g>,
    }

    pub fn terms<'g>(m: &CodecModel, g: &'g Graph, p: &Bound<'g>, batch: &[PointCloud], w: &LossWeights, l_otr: f64) -> Terms<'g> {
        let mut xhat = Vec::new();
        let mut rates = Vec::new();
        for (i, c) in batch.iter().enumerate() {
            let out = m.forward_train(p, c.points(), 100 + i as u64, 200 + i as u64).unwrap();
            xhat.push(out.xhat);
            rates.push(out.rate_bits.scale(1.0 / c.len() as f64));
        }
        let x: Vec<Var> = batch.iter().map(|c| g.constant(Tensor::from_rows(c.points()))).collect();
        let cost = cost_c(&x, &xhat).unwrap();
        let jx: Vec<Var> = x.iter().map(|&v| m.critic_score(p, v)).collect();
        let jxh: Vec<Var> = xhat.iter().map(|&v| m.critic_score(p, v)).collect();
        let d_wass = wasserstein_quadratic(&jx, &jxh).unwrap();
        let rate_bpp = Var::concat_rows(&rates).sum().scale(1.0 / batch.len() as f64);
        let total = generator_objective(cost, d_wass, g.scalar(l_otr), rate_bpp, w);
        Terms { cost, d_wass, rate_bpp, total }
    }

    pub fn value(m: &CodecModel, ps: &ParamSet, batch: &[PointCloud], w: &LossWeights, l_otr: f64) -> f64 {
        let g = Graph::new();
        let p = ps.bind(&g, |_| false);
        terms(m, &g, &p, batch, w, l_otr).total.item()
    }

    /// Gradient of the objective for every generator-side tensor, in `leaves()` order.
    pub fn gradient(m: &CodecModel, batch: &[PointCloud], w: &LossWeights, l_otr: f64) -> (Vec<cotp_core::nets::ParamId>, Vec<Tensor>) {
        let g = Graph::new();
        let p = m.params.bind(&g, Group::is_generator);
        let t = terms(m, &g, &p, batch, w, l_otr);
        let grads = g.grad(t.total, &p.leaf_vars()).iter().map(|v| (*v.value()).clone()).collect();
        (p.leaves().to_vec(), grads)
    }
}
