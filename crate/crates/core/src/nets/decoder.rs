use std::rc::Rc;

use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::knn::knn_table;
use crate::nets::params::{Bound, Group, Init, Linear, ParamId, ParamSet};

pub const DECODER_WIDTH: usize = 64;
pub const DECODER_K: usize = 8;
/// Child offset reach per upsampling stage (coarse to fine).
pub const OFFSET_SCALES: [f64; 3] = [0.25, 0.12, 0.06];
pub const REFINE_SCALE: f64 = 0.04;
pub const OUTPUT_BOUND: f64 = 1.2;

/// Children per point when undoing a stage of ratio `r`.
pub fn children(r: f64) -> usize {
    ((1.0 / r - 1e-9).ceil() as usize).max(1)
}

#[derive(Clone, Debug)]
struct UpStage {
    center: ParamId,
    neighbor: ParamId,
    pos: ParamId,
    bias: ParamId,
    offset: Linear,
    child: Linear,
    u: usize,
}

/// Offset-expansion decoder: three stages that each split every point into
/// `⌈1/r⌉` children placed by bounded learned offsets, then a pointwise
/// coordinate refinement.
#[derive(Clone, Debug)]
pub struct Decoder {
    input: Linear,
    stages: Vec<UpStage>,
    refine: [Linear; 2],
}

impl Decoder {
    /// `ratios` are the encoder's stage ratios, first stage first.
    pub fn new(ps: &mut ParamSet, latent_dim: usize, ratios: [f64; 3], rng: &mut ChaCha8Rng) -> Self {
        let g = Group::Decoder;
        let w = DECODER_WIDTH;
        let input = Linear::new(ps, "decoder.input", g, latent_dim + 3, w, Init::He, rng);
        let stages = (0..3)
            .map(|t| {
                let u = children(ratios[2 - t]);
                UpStage {
                    center: ps.add_init(format!("decoder.up{t}.center"), g, w, w, Init::Lecun, rng),
                    neighbor: ps.add_init(format!("decoder.up{t}.neighbor"), g, w, w, Init::Lecun, rng),
                    pos: ps.add_init(format!("decoder.up{t}.pos"), g, 3, w, Init::He, rng),
                    bias: ps.add_init(format!("decoder.up{t}.b"), g, 1, w, Init::Zeros, rng),
                    offset: Linear::new(ps, &format!("decoder.up{t}.offset"), g, w, 3 * u, Init::Lecun, rng),
                    child: Linear::new(ps, &format!("decoder.up{t}.child"), g, w, w * u, Init::He, rng),
                    u,
                }
            })
            .collect();
        let refine = [
            Linear::new(ps, "decoder.refine1", g, w, w, Init::He, rng),
            Linear::new(ps, "decoder.refine2", g, w, 3, Init::Scaled(0.1), rng),
        ];
        Decoder { input, stages, refine }
    }

    /// Expansion factor of the three stages.
    pub fn growth(&self) -> usize {
        self.stages.iter().map(|s| s.u).product()
    }

    /// Reconstructs `n` points from latent coordinates `p3` (`m x 3`) and
    /// features `f3` (`m x d`).
    pub fn forward<'g>(&self, p: &Bound<'g>, p3: Var<'g>, f3: Var<'g>, n: usize) -> Var<'g> {
        let mut h = self.input.forward(p, Var::concat_cols(&[f3, p3])).relu();
        let mut pos = p3;
        for (t, st) in self.stages.iter().enumerate() {
            let rows = pos.rows();
            let k = DECODER_K.min(rows);
            let pts = pos.value().to_points();
            let nbr = knn_table(&pts, &pts, k);
            let pw = pos.matmul(p.var(st.pos));
            let neigh = h.matmul(p.var(st.neighbor)).add(pw).gather_max(&nbr, k);
            let ctx = h.matmul(p.var(st.center)).add(neigh).sub(pw).add_row(p.var(st.bias)).relu();
            let off = st.offset.forward(p, ctx).tanh().scale(OFFSET_SCALES[t]).reshape(rows * st.u, 3);
            pos = pos.repeat_rows(st.u).add(off);
            h = st.child.forward(p, ctx).relu().reshape(rows * st.u, DECODER_WIDTH);
        }
        let r = self.refine[1].forward(p, self.refine[0].forward(p, h).relu());
        pos = pos.add(r.tanh().scale(REFINE_SCALE));
        let total = pos.rows();
        if total != n {
            // trim the tail, or pad by repeating rows (each its own nearest point)
            let idx: Vec<usize> = (0..n).map(|i| i % total).collect();
            pos = pos.gather_rows(Rc::new(idx));
        }
        pos.clamp(-OUTPUT_BOUND, OUTPUT_BOUND)
    }
}
