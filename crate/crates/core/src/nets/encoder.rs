use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::cloud::{fps, Point, PointCloud};
use crate::error::{Error, Result};
use crate::knn::knn_table;
use crate::nets::params::{Bound, Group, Init, Linear, ParamId, ParamSet};
use crate::nets::sampler::{significance_select, stage_size, Sampler, HIDDEN_WIDTH};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const STAGE_WIDTH: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    Learned,
    Fps,
}

impl std::str::FromStr for SamplerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "learned" => Ok(SamplerKind::Learned),
            "fps" => Ok(SamplerKind::Fps),
            _ => Err(Error::InvalidArgument(format!("unknown sampler '{s}' (learned|fps)"))),
        }
    }
}

impl std::fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplerKind::Learned => "learned",
            SamplerKind::Fps => "fps",
        })
    }
}

/// Sizes of the three stage outputs for `n` input points.
pub fn stage_sizes(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let a = stage_size(n, ratios[0]);
    let b = stage_size(a, ratios[1]);
    [a, b, stage_size(b, ratios[2])]
}

#[derive(Clone, Debug)]
struct StageLayer {
    feat: ParamId,
    offset: ParamId,
    bias: ParamId,
}

/// Three downsampling stages sharing one [`Sampler`]; each stage max-pools a
/// learned map of (neighbour feature ⊕ neighbour − centre) over the k-NN of
/// every kept point in the previous stage.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub k: usize,
    pub latent_dim: usize,
    stages: [StageLayer; 3],
    out: Linear,
}

pub struct EncoderOut<'g> {
    /// Kept coordinates after the last stage, `m x 3`.
    pub p3: Tensor,
    /// Unscaled latent features, `m x d`.
    pub y: Var<'g>,
    /// Per stage, the kept rows of that stage's input.
    pub stage_indices: [Vec<usize>; 3],
}

impl EncoderOut<'_> {
    /// Rows of the original cloud that survive all three stages.
    pub fn source_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.stage_indices[0].clone();
        for s in &self.stage_indices[1..] {
            idx = s.iter().map(|&i| idx[i]).collect();
        }
        idx
    }
}

impl Encoder {
    pub fn new(ps: &mut ParamSet, k: usize, latent_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = Group::Encoder;
        let mut layer = |i: usize, fan_in: usize, ps: &mut ParamSet| StageLayer {
            feat: ps.add_init(format!("encoder.stage{i}.feat"), g, fan_in, STAGE_WIDTH, Init::He, rng),
            offset: ps.add_init(format!("encoder.stage{i}.offset"), g, 3, STAGE_WIDTH, Init::He, rng),
            bias: ps.add_init(format!("encoder.stage{i}.b"), g, 1, STAGE_WIDTH, Init::Zeros, rng),
        };
        let s1 = layer(1, HIDDEN_WIDTH + 1, ps);
        let s2 = layer(2, STAGE_WIDTH + HIDDEN_WIDTH + 1, ps);
        let s3 = layer(3, STAGE_WIDTH + HIDDEN_WIDTH + 1, ps);
        let out = Linear::new(ps, "encoder.out", g, STAGE_WIDTH, latent_dim, Init::Lecun, rng);
        Encoder {
            k,
            latent_dim,
            stages: [s1, s2, s3],
            out,
        }
    }

    pub fn forward<'g>(
        &self,
        p: &Bound<'g>,
        sampler: &Sampler,
        points: &[Point],
        ratios: [f64; 3],
        kind: SamplerKind,
        seed: u64,
    ) -> Result<EncoderOut<'g>> {
        for r in ratios {
            if !(r > 0.0 && r <= 1.0) {
                return Err(Error::InvalidArgument(format!("stage ratio {r} outside (0, 1]")));
            }
        }
        let g = p.var(self.out.w).graph();
        let mut cur: Vec<Point> = points.to_vec();
        let mut feat: Option<Var<'g>> = None;
        let mut stage_indices: [Vec<usize>; 3] = Default::default();
        for (s, layer) in self.stages.iter().enumerate() {
            let n = cur.len();
            let so = sampler.forward(p, &cur, kind == SamplerKind::Learned)?;
            let m = stage_size(n, ratios[s]);
            let idx = match kind {
                SamplerKind::Learned => {
                    let f = so.features.as_ref().expect("learned sampler runs its head");
                    significance_select(f, ratios[s], derive_seed(seed, &[s as u64]))?
                }
                SamplerKind::Fps => fps(&PointCloud::new(cur.clone())?, m, 0)?,
            };
            let kept: Vec<Point> = idx.iter().map(|&i| cur[i]).collect();
            let k = self.k.min(n);
            let nbr = knn_table(&cur, &kept, k);
            let mut parts = Vec::with_capacity(3);
            if let Some(f) = feat {
                parts.push(f);
            }
            parts.push(so.hidden);
            parts.push(so.score);
            let input = Var::concat_cols(&parts);
            let cur_pos = g.constant(Tensor::from_rows(&cur));
            let kept_pos = g.constant(Tensor::from_rows(&kept));
            let w_off = p.var(layer.offset);
            let u = input.matmul(p.var(layer.feat)).add(cur_pos.matmul(w_off));
            let pooled = u.gather_max(&nbr, k).sub(kept_pos.matmul(w_off));
            feat = Some(pooled.add_row(p.var(layer.bias)).relu());
            stage_indices[s] = idx;
            cur = kept;
        }
        let y = self.out.forward(p, feat.expect("three stages ran"));
        Ok(EncoderOut {
            p3: Tensor::from_rows(&cur),
            y,
            stage_indices,
        })
    }
}
