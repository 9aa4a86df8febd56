use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::nets::params::{Bound, Group, Init, Linear, ParamSet};

pub const CRITIC_WIDTH: usize = 64;
const SLOPE: f64 = 0.2;

/// The critic `J`: pointwise residual blocks, max ⊕ mean pooling and a
/// two-layer head giving one scalar per cloud, squashed into (-1, 1).
#[derive(Clone, Debug)]
pub struct Critic {
    lift: Linear,
    blocks: [[Linear; 2]; 2],
    head: [Linear; 2],
}

impl Critic {
    pub fn new(ps: &mut ParamSet, zero_head: bool, rng: &mut ChaCha8Rng) -> Self {
        let g = Group::Discriminator;
        let w = CRITIC_WIDTH;
        let lift = Linear::new(ps, "critic.lift", g, 3, w, Init::He, rng);
        let mut block = |i: usize, ps: &mut ParamSet| {
            [
                Linear::new(ps, &format!("critic.block{i}.a"), g, w, w, Init::He, rng),
                Linear::new(ps, &format!("critic.block{i}.b"), g, w, w, Init::Scaled(0.5), rng),
            ]
        };
        let blocks = [block(0, ps), block(1, ps)];
        let last = if zero_head { Init::Zeros } else { Init::Scaled(0.1) };
        let head = [
            Linear::new(ps, "critic.head1", g, 2 * w, w, Init::He, rng),
            Linear::new(ps, "critic.head2", g, w, 1, last, rng),
        ];
        Critic { lift, blocks, head }
    }

    /// `J(x)` for one cloud `x` (`n x 3`), as a `1 x 1` var.
    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        let mut h = self.lift.forward(p, x).leaky_relu(SLOPE);
        for [a, b] in &self.blocks {
            let r = b.forward(p, a.forward(p, h).leaky_relu(SLOPE));
            h = h.add(r).leaky_relu(SLOPE);
        }
        let pooled = Var::concat_cols(&[h.max_rows(), h.mean_rows()]);
        self.head[1].forward(p, self.head[0].forward(p, pooled).leaky_relu(SLOPE)).tanh()
    }
}
