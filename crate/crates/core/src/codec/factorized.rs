//! Per-channel learned cumulative distributions (monotone 1-3-3-3-1 nets
//! with softplus weights and tanh gates) over integer bins.

use std::f64::consts::LN_2;
use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{sigmoid, softplus, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::nets::{Bound, Group, ParamId, ParamSet};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const PARAMS_PER_CHANNEL: usize = 43;
/// Smallest probability any symbol may receive.
pub const LIKELIHOOD_FLOOR: f64 = 1.0 / 65536.0;

const FILTERS: [usize; 5] = [1, 3, 3, 3, 1];
// offsets into a channel's parameter row
const H1: usize = 0;
const B1: usize = 3;
const A1: usize = 6;
const H2: usize = 9;
const B2: usize = 18;
const A2: usize = 21;
const H3: usize = 24;
const B3: usize = 33;
const A3: usize = 36;
const H4: usize = 39;
const B4: usize = 42;

/// One channel's network with the positivity/gating transforms applied.
struct ChannelNet {
    w1: [f64; 3],
    b1: [f64; 3],
    t1: [f64; 3],
    w2: [f64; 9],
    b2: [f64; 3],
    t2: [f64; 3],
    w3: [f64; 9],
    b3: [f64; 3],
    t3: [f64; 3],
    w4: [f64; 3],
    b4: f64,
}

struct Trace {
    x: f64,
    u: [[f64; 3]; 3],
    f: [[f64; 3]; 3],
}

fn arr<const N: usize>(s: &[f64], f: impl Fn(f64) -> f64) -> [f64; N] {
    std::array::from_fn(|i| f(s[i]))
}

fn gate(u: f64, t: f64) -> f64 {
    u + t * u.tanh()
}

impl ChannelNet {
    fn new(row: &[f64]) -> Self {
        let id = |x: f64| x;
        ChannelNet {
            w1: arr(&row[H1..], softplus),
            b1: arr(&row[B1..], id),
            t1: arr(&row[A1..], f64::tanh),
            w2: arr(&row[H2..], softplus),
            b2: arr(&row[B2..], id),
            t2: arr(&row[A2..], f64::tanh),
            w3: arr(&row[H3..], softplus),
            b3: arr(&row[B3..], id),
            t3: arr(&row[A3..], f64::tanh),
            w4: arr(&row[H4..], softplus),
            b4: row[B4],
        }
    }

    fn logit(&self, x: f64) -> f64 {
        self.trace(x).0
    }

    fn trace(&self, x: f64) -> (f64, Trace) {
        let mut u = [[0.0; 3]; 3];
        let mut f = [[0.0; 3]; 3];
        for r in 0..3 {
            u[0][r] = self.w1[r] * x + self.b1[r];
            f[0][r] = gate(u[0][r], self.t1[r]);
        }
        for (layer, (w, b, t)) in [(&self.w2, &self.b2, &self.t2), (&self.w3, &self.b3, &self.t3)].into_iter().enumerate() {
            for r in 0..3 {
                let s: f64 = (0..3).map(|c| w[r * 3 + c] * f[layer][c]).sum();
                u[layer + 1][r] = s + b[r];
                f[layer + 1][r] = gate(u[layer + 1][r], t[r]);
            }
        }
        let l = (0..3).map(|c| self.w4[c] * f[2][c]).sum::<f64>() + self.b4;
        (l, Trace { x, u, f })
    }

    /// Accumulates `dl * d logit / d(raw params)` into `grad` and returns
    /// `d logit / dx * dl`.
    fn backward(&self, row: &[f64], tr: &Trace, dl: f64, grad: &mut [f64]) -> f64 {
        let dsp = |h: f64| sigmoid(h);
        let mut df = [0.0; 3];
        for c in 0..3 {
            grad[H4 + c] += dl * tr.f[2][c] * dsp(row[H4 + c]);
            df[c] = dl * self.w4[c];
        }
        grad[B4] += dl;
        let layers = [
            (&self.w3, &self.t3, H3, B3, A3),
            (&self.w2, &self.t2, H2, B2, A2),
        ];
        for (li, (w, t, h, b, a)) in layers.into_iter().enumerate() {
            let layer = 2 - li;
            let mut du = [0.0; 3];
            for r in 0..3 {
                let th = tr.u[layer][r].tanh();
                du[r] = df[r] * (1.0 + t[r] * (1.0 - th * th));
                grad[a + r] += df[r] * th * (1.0 - t[r] * t[r]);
                grad[b + r] += du[r];
            }
            let mut prev = [0.0; 3];
            for r in 0..3 {
                for c in 0..3 {
                    grad[h + r * 3 + c] += du[r] * tr.f[layer - 1][c] * dsp(row[h + r * 3 + c]);
                    prev[c] += w[r * 3 + c] * du[r];
                }
            }
            df = prev;
        }
        let mut dx = 0.0;
        for r in 0..3 {
            let th = tr.u[0][r].tanh();
            let du = df[r] * (1.0 + self.t1[r] * (1.0 - th * th));
            grad[A1 + r] += df[r] * th * (1.0 - self.t1[r] * self.t1[r]);
            grad[B1 + r] += du;
            grad[H1 + r] += du * tr.x * dsp(row[H1 + r]);
            dx += self.w1[r] * du;
        }
        dx
    }

    fn cdf(&self, x: f64) -> f64 {
        sigmoid(self.logit(x))
    }

    /// Probability mass of the unit bin centred on `x`.
    fn bin_mass(&self, x: f64) -> f64 {
        bin_mass(self.logit(x + 0.5), self.logit(x - 0.5))
    }
}

fn bin_mass(lu: f64, ll: f64) -> f64 {
    // evaluate in the tail where sigmoid keeps precision
    if lu + ll > 0.0 {
        sigmoid(-ll) - sigmoid(-lu)
    } else {
        sigmoid(lu) - sigmoid(ll)
    }
}

/// A bank of independent per-channel distributions stored as one
/// `channels x 43` parameter tensor.
#[derive(Clone, Copy, Debug)]
pub struct FactorizedModel {
    pub param: ParamId,
    pub channels: usize,
}

impl FactorizedModel {
    /// `init_scale` is the rough width, in bins, of the initial density.
    pub fn new(ps: &mut ParamSet, name: &str, channels: usize, init_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let t = init_params(channels, init_scale, rng);
        let param = ps.add(format!("{name}.cdf"), Group::Entropy, t);
        FactorizedModel { param, channels }
    }

    /// Total bits `Σ −log2 max(P(bin), floor)` of `z`, whose column `c` is
    /// modelled by channel `channel_of_col[c]`.
    pub fn bits<'g>(&self, p: &Bound<'g>, z: Var<'g>, channel_of_col: Rc<Vec<usize>>) -> Result<Var<'g>> {
        if channel_of_col.len() != z.cols() || channel_of_col.iter().any(|&c| c >= self.channels) {
            return Err(Error::Shape(format!(
                "{} data columns do not map onto {} model channels",
                z.cols(),
                self.channels
            )));
        }
        Ok(bits_op(z, p.var(self.param), channel_of_col, None))
    }

    /// Plain-value version of [`FactorizedModel::bits`] on integer symbols.
    pub fn symbol_bits(&self, params: &Tensor, symbols: &[i64], channel: usize) -> f64 {
        let net = ChannelNet::new(params.row(channel));
        symbols
            .iter()
            .map(|&q| -(net.bin_mass(q as f64).max(LIKELIHOOD_FLOOR)).log2())
            .sum()
    }

    pub fn cdf(&self, params: &Tensor, channel: usize, x: f64) -> f64 {
        ChannelNet::new(params.row(channel)).cdf(x)
    }

    pub fn bin_mass(&self, params: &Tensor, channel: usize, q: i64) -> f64 {
        ChannelNet::new(params.row(channel)).bin_mass(q as f64)
    }

    /// The `x` where the channel's CDF reaches `p`, by bisection.
    pub fn quantile(&self, params: &Tensor, channel: usize, p: f64) -> f64 {
        let net = ChannelNet::new(params.row(channel));
        let target = (p / (1.0 - p)).ln();
        let (mut lo, mut hi) = (-1.0, 1.0);
        while net.logit(lo) > target && lo > -1e12 {
            lo *= 2.0;
        }
        while net.logit(hi) < target && hi < 1e12 {
            hi *= 2.0;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if net.logit(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

pub fn init_params(channels: usize, init_scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let scale = init_scale.powf(1.0 / (FILTERS.len() - 1) as f64);
    let mut t = Tensor::zeros(channels, PARAMS_PER_CHANNEL);
    for c in 0..channels {
        let row = &mut t.data_mut()[c * PARAMS_PER_CHANNEL..(c + 1) * PARAMS_PER_CHANNEL];
        let layers = [(H1, B1, 3), (H2, B2, 9), (H3, B3, 9), (H4, B4, 3)];
        for (i, (h, b, nh)) in layers.into_iter().enumerate() {
            let init = (1.0 / scale / FILTERS[i + 1] as f64).exp_m1().ln();
            row[h..h + nh].fill(init);
            let nb = FILTERS[i + 1];
            for v in &mut row[b..b + nb] {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
    }
    t
}

/// `weights`, when given, multiplies each element's bits (one per entry of `z`).
fn bits_op<'g>(z: Var<'g>, params: Var<'g>, map: Rc<Vec<usize>>, weights: Option<Rc<Vec<f64>>>) -> Var<'g> {
    let g = z.graph();
    let op = BitsOp { map, weights };
    let bits = op.run(&z.value(), &params.value(), None).0;
    g.apply(Tensor::scalar(bits), op, &[z, params])
}

struct BitsOp {
    map: Rc<Vec<usize>>,
    weights: Option<Rc<Vec<f64>>>,
}

impl BitsOp {
    fn run(&self, z: &Tensor, params: &Tensor, upstream: Option<f64>) -> (f64, Tensor, Tensor) {
        let nets: Vec<ChannelNet> = (0..params.rows()).map(|c| ChannelNet::new(params.row(c))).collect();
        let cols = z.cols();
        let mut total = 0.0;
        let (mut dz, mut dp) = match upstream {
            Some(_) => (Tensor::zeros(z.rows(), cols), Tensor::zeros(params.rows(), params.cols())),
            None => (Tensor::zeros(0, 0), Tensor::zeros(0, 0)),
        };
        for (i, &x) in z.data().iter().enumerate() {
            let ch = self.map[i % cols];
            let net = &nets[ch];
            let (lu, tu) = net.trace(x + 0.5);
            let (ll, tl) = net.trace(x - 0.5);
            let p = bin_mass(lu, ll);
            let pf = p.max(LIKELIHOOD_FLOOR);
            let w = self.weights.as_ref().map_or(1.0, |w| w[i]);
            total -= w * pf.log2();
            let Some(g) = upstream else { continue };
            let g = g * w;
            // the floor passes a bounded gradient that lifts tiny masses
            let dbits_dp = -g / (pf * LN_2);
            let dlu = dbits_dp * sigmoid(lu) * sigmoid(-lu);
            let dll = -dbits_dp * sigmoid(ll) * sigmoid(-ll);
            let row = params.row(ch);
            let grow = &mut dp.data_mut()[ch * PARAMS_PER_CHANNEL..(ch + 1) * PARAMS_PER_CHANNEL];
            let dxu = net.backward(row, &tu, dlu, grow);
            let dxl = net.backward(row, &tl, dll, grow);
            dz.data_mut()[i] = dxu + dxl;
        }
        (total, dz, dp)
    }
}

impl Op for BitsOp {
    fn name(&self) -> &'static str {
        "factorized_bits"
    }

    fn backward<'g>(&self, g: &'g Graph, inputs: &[Var<'g>], _: Var<'g>, grad: Var<'g>) -> Vec<Option<Var<'g>>> {
        let (_, dz, dp) = self.run(&inputs[0].value(), &inputs[1].value(), Some(grad.item()));
        vec![Some(g.constant(dz)), Some(g.constant(dp))]
    }
}

pub struct FitOptions {
    pub steps: usize,
    pub learning_rate: f64,
    /// Train on `x + U(-1/2, 1/2)` instead of the values themselves.
    pub noise: bool,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            steps: 3000,
            learning_rate: 5e-2,
            noise: false,
            seed: 0,
        }
    }
}

/// Fits `model` to the columns of `data` by full-batch Adam on the mean
/// bits per symbol. Returns the final mean bits per symbol.
pub fn fit_model(ps: &mut ParamSet, model: &FactorizedModel, data: &Tensor, channel_of_col: &[usize], opts: &FitOptions) -> Result<f64> {
    use rand::SeedableRng;
    if channel_of_col.len() != data.cols() || channel_of_col.iter().any(|&c| c >= model.channels) {
        return Err(Error::Shape(format!("{} data columns do not map onto {} model channels", data.cols(), model.channels)));
    }
    let mut opt = Adam::new(ps, vec![model.param], |_| opts.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let count = data.len() as f64;
    // without noise, repeated (channel, value) pairs collapse into weights
    let (values, map, weights) = if opts.noise {
        (data.clone(), Rc::new(channel_of_col.to_vec()), None::<Rc<Vec<f64>>>)
    } else {
        let mut counts: std::collections::BTreeMap<(usize, u64), f64> = Default::default();
        for (i, &v) in data.data().iter().enumerate() {
            *counts.entry((channel_of_col[i % data.cols()], v.to_bits())).or_default() += 1.0;
        }
        let n = counts.len();
        // one column per entry so every entry carries its own channel
        let values = Tensor::from_vec(1, n, counts.keys().map(|&(_, b)| f64::from_bits(b)).collect());
        let chans: Vec<usize> = counts.keys().map(|&(c, _)| c).collect();
        let w: Vec<f64> = counts.values().copied().collect();
        (values, Rc::new(chans), Some(Rc::new(w)))
    };
    let rate = |ps: &ParamSet, input: Tensor| {
        let g = Graph::new();
        let p = ps.bind(&g, |grp| grp == Group::Entropy);
        let bits = bits_op(g.constant(input), p.var(model.param), map.clone(), weights.clone()).scale(1.0 / count);
        let grad = g.grad(bits, &[p.var(model.param)])[0].value();
        (bits.item(), (*grad).clone())
    };
    for _ in 0..opts.steps {
        let input = if opts.noise {
            values.map(|v| v + rng.gen_range(-0.5..0.5))
        } else {
            values.clone()
        };
        let (_, grad) = rate(ps, input);
        opt.step(ps, &[grad]);
    }
    Ok(rate(ps, values).0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tests::check_grad;
    use rand::SeedableRng;

    #[test]
    fn cdf_is_monotone_from_zero_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::new();
        let m = FactorizedModel::new(&mut ps, "t", 2, 10.0, &mut rng);
        let params = ps.get(m.param).clone();
        for ch in 0..2 {
            let mut prev = 0.0;
            for i in -400..=400 {
                let c = m.cdf(&params, ch, i as f64 * 0.5);
                assert!(c >= prev);
                prev = c;
            }
            assert!(m.cdf(&params, ch, -1e6) < 1e-6);
            assert!(m.cdf(&params, ch, 1e6) > 1.0 - 1e-6);
            let q = m.quantile(&params, ch, 0.25);
            assert!((m.cdf(&params, ch, q) - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn bits_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = init_params(2, 3.0, &mut rng).map(|v| v + rng.gen_range(-0.3..0.3));
        let z0 = Tensor::from_vec(3, 2, vec![0.3, -1.2, 2.6, 0.1, -0.4, 4.0]);
        let map = Rc::new(vec![1usize, 0]);
        let m2 = map.clone();
        let p0 = params.clone();
        check_grad(&z0, move |g, z| bits_op(z, g.constant(p0.clone()), m2.clone(), Some(Rc::new(vec![1.0, 2.0, 0.5, 1.0, 1.0, 3.0]))));
        let z1 = z0.clone();
        check_grad(&params, move |g, p| bits_op(g.constant(z1.clone()), p, map.clone(), None));
    }
}
