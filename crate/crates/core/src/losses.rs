//! Objective terms: Chamfer cost, critic-based quadratic Wasserstein
//! estimate, the gradient-norm regularizer and their weighted sums.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::knn::KdTree;
use crate::tensor::Tensor;

/// Added under the square root of the critic gradient norm.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            beta: 100.0,
            gamma: 0.001,
            lambda: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.beta >= 0.0 && self.gamma >= 0.0 && self.lambda >= 0.0;
        if !ok || !(self.beta + self.gamma + self.lambda).is_finite() {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be finite and non-negative (beta {}, gamma {}, lambda {})",
                self.beta, self.gamma, self.lambda
            )));
        }
        Ok(())
    }
}

/// Scalar values of every term for one step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cost_c: f64,
    pub d_wass: f64,
    pub l_otr: f64,
    /// Estimated bits per source point.
    pub rate_bpp: f64,
    pub total_gen: f64,
    pub total_disc: f64,
}

impl LossBreakdown {
    pub fn new(cost_c: f64, d_wass: f64, l_otr: f64, rate_bpp: f64, w: &LossWeights) -> Self {
        LossBreakdown {
            cost_c,
            d_wass,
            l_otr,
            rate_bpp,
            total_gen: cost_c + w.beta * d_wass + w.gamma * l_otr + w.lambda * rate_bpp,
            total_disc: w.beta * d_wass - w.gamma * l_otr,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.cost_c, self.d_wass, self.l_otr, self.rate_bpp, self.total_gen, self.total_disc]
            .iter()
            .all(|v| v.is_finite())
    }

    /// Whether `total_gen` equals the weighted sum bit for bit.
    pub fn identity_holds(&self, w: &LossWeights) -> bool {
        self.total_gen == self.cost_c + w.beta * self.d_wass + w.gamma * self.l_otr + w.lambda * self.rate_bpp
    }
}

fn nearest_rows(from: &Tensor, to: &Tensor) -> Vec<usize> {
    let to_pts = to.to_points();
    let tree = KdTree::new(&to_pts);
    from.to_points().iter().map(|p| tree.nearest(p).0).collect()
}

/// Symmetric L2 Chamfer distance between `a` and `b` (`n x 3`, `m x 3`),
/// differentiable in both. Nearest neighbours are fixed at the current values.
pub fn chamfer<'g>(a: Var<'g>, b: Var<'g>) -> Var<'g> {
    let (av, bv) = (a.value(), b.value());
    let ab = b.gather_rows(Rc::new(nearest_rows(&av, &bv)));
    let ba = a.gather_rows(Rc::new(nearest_rows(&bv, &av)));
    a.sub(ab).square().mean().scale(3.0).add(b.sub(ba).square().mean().scale(3.0))
}

fn check_batch(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("batch sizes differ: {a} vs {b}")));
    }
    if a == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    Ok(())
}

fn batch_mean<'g>(terms: Vec<Var<'g>>) -> Var<'g> {
    let n = terms.len() as f64;
    Var::concat_rows(&terms).sum().scale(1.0 / n)
}

/// Mean Chamfer distance over the batch; gradients flow into `xhat`.
pub fn cost_c<'g>(x: &[Var<'g>], xhat: &[Var<'g>]) -> Result<Var<'g>> {
    check_batch(x.len(), xhat.len())?;
    Ok(batch_mean(x.iter().zip(xhat).map(|(&a, &b)| chamfer(a, b)).collect()))
}

/// Mean over pairs of `(J(x_i) - J(xhat_i))^2`.
pub fn wasserstein_quadratic<'g>(jx: &[Var<'g>], jxhat: &[Var<'g>]) -> Result<Var<'g>> {
    check_batch(jx.len(), jxhat.len())?;
    Ok(batch_mean(jx.iter().zip(jxhat).map(|(&a, &b)| a.sub(b).square()).collect()))
}

/// Regularizer value together with the critic scores `J(x_i)` it evaluated.
pub struct Regularized<'g> {
    pub value: Var<'g>,
    pub scores: Vec<Var<'g>>,
}

/// Mean over the batch of `(‖∇ₓJ(x_i)‖ − c_i)²`, with `c_i` constants.
/// The result is differentiable in whatever `critic` closes over.
pub fn ot_regularizer<'g>(
    g: &'g Graph,
    x: &[Tensor],
    costs: &[f64],
    critic: impl Fn(Var<'g>) -> Var<'g>,
) -> Result<Regularized<'g>> {
    check_batch(x.len(), costs.len())?;
    let mut terms = Vec::with_capacity(x.len());
    let mut scores = Vec::with_capacity(x.len());
    for (i, (xi, &c)) in x.iter().zip(costs).enumerate() {
        let leaf = g.leaf(xi.clone());
        let j = critic(leaf);
        let grad = g.grad(j, &[leaf])[0];
        if !grad.value().is_finite() {
            return Err(Error::NonFinite(format!("critic input gradient of sample {i}")));
        }
        let norm = grad.square().sum().affine(1.0, NORM_EPS).sqrt();
        terms.push(norm.affine(1.0, -c).square());
        scores.push(j);
    }
    Ok(Regularized {
        value: batch_mean(terms),
        scores,
    })
}

/// `c + β·d_wass + γ·L_OTR`.
pub fn ot_loss<'g>(c: Var<'g>, d_wass: Var<'g>, l_otr: Var<'g>, w: &LossWeights) -> Var<'g> {
    c.add(d_wass.scale(w.beta)).add(l_otr.scale(w.gamma))
}

/// `L_OT + λ·rate`, the quantity the encoder, decoder and entropy models descend.
pub fn generator_objective<'g>(c: Var<'g>, d_wass: Var<'g>, l_otr: Var<'g>, rate_bpp: Var<'g>, w: &LossWeights) -> Var<'g> {
    ot_loss(c, d_wass, l_otr, w).add(rate_bpp.scale(w.lambda))
}

/// `β·d_wass − γ·L_OTR`, the quantity the critic ascends.
pub fn discriminator_objective<'g>(d_wass: Var<'g>, l_otr: Var<'g>, w: &LossWeights) -> Var<'g> {
    d_wass.scale(w.beta).sub(l_otr.scale(w.gamma))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tests::{check_grad, rand_tensor};
    use crate::cloud::PointCloud;
    use crate::metrics::chamfer_l2;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cloud(t: &Tensor) -> PointCloud {
        PointCloud::new(t.to_points()).unwrap()
    }

    #[test]
    fn chamfer_matches_metric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (n, m) in [(1, 1), (5, 9), (40, 17)] {
            let a = rand_tensor(&mut rng, n, 3);
            let b = rand_tensor(&mut rng, m, 3);
            let g = Graph::new();
            let v = chamfer(g.constant(a.clone()), g.constant(b.clone())).item();
            let want = chamfer_l2(&cloud(&a), &cloud(&b)).unwrap();
            assert!((v - want).abs() <= 1e-12 * want.max(1.0), "{v} vs {want}");
        }
    }

    #[test]
    fn cost_is_batch_mean() {
        let g = Graph::new();
        let x = [g.constant(Tensor::from_rows(&[[0.0, 0.0, 0.0]])), g.constant(Tensor::from_rows(&[[1.0, 1.0, 1.0]]))];
        let xh = [g.constant(Tensor::from_rows(&[[1.0, 0.0, 0.0]])), g.constant(Tensor::from_rows(&[[1.0, 1.0, 1.0]]))];
        // CD 2 and 0
        assert_eq!(cost_c(&x, &xh).unwrap().item(), 1.0);
        assert_eq!(cost_c(&x, &x).unwrap().item(), 0.0);
        assert!(matches!(cost_c(&x, &xh[..1]), Err(Error::Shape(_))));
    }

    #[test]
    fn cost_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&mut rng, 16, 3);
        let xh = rand_tensor(&mut rng, 16, 3);
        check_grad(&xh, move |g, v| cost_c(&[g.constant(x.clone())], &[v]).unwrap());
    }

    #[test]
    fn wasserstein_examples() {
        let g = Graph::new();
        let s = |v: f64| g.scalar(v);
        assert_eq!(wasserstein_quadratic(&[s(3.0)], &[s(1.0)]).unwrap().item(), 4.0);
        assert_eq!(wasserstein_quadratic(&[s(2.0), s(1.0)], &[s(0.0), s(1.0)]).unwrap().item(), 2.0);
        assert_eq!(wasserstein_quadratic(&[s(5.0), s(5.0)], &[s(5.0), s(5.0)]).unwrap().item(), 0.0);
        assert!(wasserstein_quadratic(&[s(1.0)], &[]).is_err());
    }

    #[test]
    fn regularizer_of_linear_critic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = rand_tensor(&mut rng, 3, 1);
        let w2: f64 = w.data().iter().map(|v| v * v).sum();
        for n in [1, 7, 50] {
            let x = rand_tensor(&mut rng, n, 3);
            let g = Graph::new();
            let wv = g.constant(w.clone());
            let r = ot_regularizer(&g, &[x.clone()], &[0.0], |x| x.matmul(wv).sum()).unwrap();
            let want = n as f64 * w2;
            assert!((r.value.item() - want).abs() <= 1e-9 * want, "{} vs {want}", r.value.item());
            // matching cost exactly cancels
            let c = (n as f64 * w2).sqrt();
            let r = ot_regularizer(&g, &[x.clone()], &[c], |x| x.matmul(wv).sum()).unwrap();
            assert!(r.value.item() < 1e-10);
            let z = ot_regularizer(&g, &[x], &[0.0], |x| x.matmul(wv).sum().scale(0.0)).unwrap();
            assert!(z.value.item() < 1e-11);
        }
    }

    #[test]
    fn regularizer_gradient_reaches_critic_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, 6, 3);
        let w0 = rand_tensor(&mut rng, 3, 4);
        check_grad(&w0, move |g, w| {
            ot_regularizer(g, &[x.clone()], &[0.3], |x| x.matmul(w).tanh().sum()).unwrap().value
        });
    }

    #[test]
    fn weighted_sums() {
        let g = Graph::new();
        let w = LossWeights {
            beta: 100.0,
            gamma: 0.001,
            lambda: 0.0,
        };
        let v = ot_loss(g.scalar(2.0), g.scalar(4.0), g.scalar(1.0), &w).item();
        assert!((v - 402.001).abs() < 1e-12);
        let b = LossBreakdown::new(2.0, 4.0, 1.0, 3.0, &w);
        assert!(b.identity_holds(&w));
        assert_eq!(b.total_gen, v);
        let plain = LossWeights {
            beta: 0.0,
            gamma: 0.0,
            lambda: 0.5,
        };
        let v = generator_objective(g.scalar(2.0), g.scalar(4.0), g.scalar(1.0), g.scalar(3.0), &plain).item();
        assert!((v - 3.5).abs() <= 1e-12);
        let d = discriminator_objective(g.scalar(4.0), g.scalar(1.0), &w).item();
        assert!((d - 399.999).abs() < 1e-12);
        assert!(LossWeights { beta: -1.0, ..w }.validate().is_err());
    }
}
