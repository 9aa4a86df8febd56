//! Density-sensitive point sampler: pointwise lift, vector self-attention
//! over coordinate k-NN, and EdgeConv layers up to a 1024-wide significance
//! space whose per-channel winners pick the points kept at each stage.

use std::collections::BTreeSet;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Op, Var};
use crate::cloud::Point;
use crate::error::{Error, Result};
use crate::knn::knn_table;
use crate::nets::params::{Bound, Group, Init, Linear, ParamId, ParamSet};
use crate::tensor::Tensor;

pub const LIFT_WIDTH: usize = 32;
pub const HIDDEN_WIDTH: usize = 64;
pub const ATTN_GROUPS: usize = 8;
pub const EDGE_WIDTHS: [usize; 3] = [128, 256, 1024];
pub const SIGNIFICANCE_WIDTH: usize = 1024;

/// `⌈n·r⌉`, guarded against the last-bit error of `n·r` in floating point.
pub fn stage_size(n: usize, r: f64) -> usize {
    (((n as f64) * r - 1e-9).ceil() as usize).clamp(1, n.max(1))
}

/// `relu(x·A + max_j x_j·B + b)`, the centre/offset edge function
/// `φ·x_i + θ·(x_j − x_i)` reparametrised as `A = φ − θ`, `B = θ`.
#[derive(Clone, Copy, Debug)]
pub struct EdgeConv {
    pub a: ParamId,
    pub b: ParamId,
    pub bias: ParamId,
}

impl EdgeConv {
    pub fn new(ps: &mut ParamSet, name: &str, group: Group, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        // two fan_in-wide inputs feed every output, so He over 2*fan_in
        let init = Init::Lecun;
        EdgeConv {
            a: ps.add_init(format!("{name}.center"), group, fan_in, fan_out, init, rng),
            b: ps.add_init(format!("{name}.neighbor"), group, fan_in, fan_out, init, rng),
            bias: ps.add_init(format!("{name}.b"), group, 1, fan_out, Init::Zeros, rng),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>, nbr: &[usize], k: usize) -> Var<'g> {
        let center = x.matmul(p.var(self.a));
        let neigh = x.matmul(p.var(self.b)).gather_max(nbr, k);
        center.add(neigh).add_row(p.var(self.bias)).relu()
    }
}

#[derive(Clone, Debug)]
pub struct Sampler {
    pub k: usize,
    lift: Linear,
    query: ParamId,
    key: ParamId,
    value: ParamId,
    pos: Linear,
    attn: Linear,
    edges: [EdgeConv; 2],
    head: EdgeConv,
}

pub struct SamplerOut<'g> {
    /// Attention-layer output, `n x 64`.
    pub hidden: Var<'g>,
    /// Per-point significance score `max_c features[i, c]`, `n x 1`. Zero
    /// when the head was skipped.
    pub score: Var<'g>,
    /// The `n x 1024` significance features, if the head ran.
    pub features: Option<Tensor>,
    pub knn: Rc<Vec<usize>>,
}

impl Sampler {
    pub fn new(ps: &mut ParamSet, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let g = Group::Sampler;
        let lift = Linear::new(ps, "sampler.lift", g, 3, LIFT_WIDTH, Init::He, rng);
        let query = ps.add_init("sampler.attn.q", g, LIFT_WIDTH, HIDDEN_WIDTH, Init::Lecun, rng);
        let key = ps.add_init("sampler.attn.k", g, LIFT_WIDTH, HIDDEN_WIDTH, Init::Lecun, rng);
        let value = ps.add_init("sampler.attn.v", g, LIFT_WIDTH, HIDDEN_WIDTH, Init::Lecun, rng);
        let pos = Linear::new(ps, "sampler.attn.pos", g, 3, HIDDEN_WIDTH, Init::He, rng);
        let attn = Linear::new(ps, "sampler.attn.weight", g, HIDDEN_WIDTH, ATTN_GROUPS, Init::Lecun, rng);
        let e1 = EdgeConv::new(ps, "sampler.edge1", g, HIDDEN_WIDTH, EDGE_WIDTHS[0], rng);
        let e2 = EdgeConv::new(ps, "sampler.edge2", g, EDGE_WIDTHS[0], EDGE_WIDTHS[1], rng);
        let head = EdgeConv::new(ps, "sampler.head", g, EDGE_WIDTHS[1], EDGE_WIDTHS[2], rng);
        Sampler {
            k,
            lift,
            query,
            key,
            value,
            pos,
            attn,
            edges: [e1, e2],
            head,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, points: &[Point], with_head: bool) -> Result<SamplerOut<'g>> {
        let n = points.len();
        if n < self.k {
            return Err(Error::InvalidArgument(format!("sampler needs at least {} points, got {n}", self.k)));
        }
        let g = p.var(self.lift.w).graph();
        let knn = Rc::new(knn_table(points, points, self.k));
        let pos = Rc::new(Tensor::from_rows(points));
        let x = self.lift.forward(p, g.constant_rc(pos.clone())).relu();
        let q = x.matmul(p.var(self.query));
        let kk = x.matmul(p.var(self.key));
        let v = x.matmul(p.var(self.value));
        let hidden = vector_attention(
            [q, kk, v, p.var(self.pos.w), p.var(self.pos.b), p.var(self.attn.w), p.var(self.attn.b)],
            pos,
            knn.clone(),
            self.k,
        );
        if !with_head {
            let score = g.constant(Tensor::zeros(n, 1));
            return Ok(SamplerOut {
                hidden,
                score,
                features: None,
                knn,
            });
        }
        let e1 = self.edges[0].forward(p, hidden, &knn, self.k);
        let e2 = self.edges[1].forward(p, e1, &knn, self.k);
        let (score, features) = significance_head(
            [e2, p.var(self.head.a), p.var(self.head.b), p.var(self.head.bias)],
            knn.clone(),
            self.k,
        );
        Ok(SamplerOut {
            hidden,
            score,
            features: Some(features),
            knn,
        })
    }

    /// The `n x 1024` significance features of `points`.
    pub fn features(&self, params: &ParamSet, points: &[Point]) -> Result<Tensor> {
        let g = Graph::new();
        let p = params.bind(&g, |_| false);
        Ok(self.forward(&p, points, true)?.features.expect("head ran"))
    }
}

/// Grouped vector attention over each point's k-NN (`pos` is `n x 3`,
/// `knn` row-major `n x k`). Inputs: `q, k, v` (`n x C`), position encoder
/// weight `3 x C` and bias, attention weight `C x G` and bias.
fn vector_attention<'g>(inputs: [Var<'g>; 7], pos: Rc<Tensor>, knn: Rc<Vec<usize>>, k: usize) -> Var<'g> {
    let g = inputs[0].graph();
    let op = VectorAttention { pos, knn, k };
    let vals: Vec<Rc<Tensor>> = inputs.iter().map(|v| v.value()).collect();
    let out = op.run(&vals, None).0;
    g.apply(out, op, &inputs)
}

struct VectorAttention {
    pos: Rc<Tensor>,
    knn: Rc<Vec<usize>>,
    k: usize,
}

impl VectorAttention {
    /// Forward pass; with `grad_out` also returns the input gradients.
    fn run(&self, v: &[Rc<Tensor>], grad_out: Option<&Tensor>) -> (Tensor, Vec<Tensor>) {
        let (q, kk, val, wp, bp, wa, ba) = (&v[0], &v[1], &v[2], &v[3], &v[4], &v[5], &v[6]);
        let n = q.rows();
        let c = q.cols();
        let groups = wa.cols();
        let per = c / groups;
        let k = self.k;
        let pw = self.pos.matmul(wp, false, false);
        let bp = bp.data();
        let rows = n * k;
        // per (point, neighbour) row: relative position code e and relation a
        let mut e = vec![0.0; rows * c];
        let mut a = vec![0.0; rows * c];
        for i in 0..n {
            let qi = q.row(i);
            let pwi = pw.row(i);
            for (t, &j) in self.knn[i * k..(i + 1) * k].iter().enumerate() {
                let kj = kk.row(j);
                let pwj = pw.row(j);
                let r = (i * k + t) * c;
                let et = &mut e[r..r + c];
                let at = &mut a[r..r + c];
                for ch in 0..c {
                    et[ch] = pwj[ch] - pwi[ch] + bp[ch];
                    at[ch] = (qi[ch] - kj[ch] + et[ch].max(0.0)).max(0.0);
                }
            }
        }
        let a = Tensor::from_vec(rows, c, a);
        // attention logits, then softmax over each point's neighbours
        let mut w = a.matmul(wa, false, false);
        for r in 0..rows {
            for (l, &b) in w.data_mut()[r * groups..(r + 1) * groups].iter_mut().zip(ba.data()) {
                *l += b;
            }
        }
        let wd = w.data_mut();
        for i in 0..n {
            let blk = &mut wd[i * k * groups..(i + 1) * k * groups];
            for gi in 0..groups {
                let mut m = f64::NEG_INFINITY;
                for t in 0..k {
                    m = m.max(blk[t * groups + gi]);
                }
                let mut s = 0.0;
                for t in 0..k {
                    let x = (blk[t * groups + gi] - m).exp();
                    blk[t * groups + gi] = x;
                    s += x;
                }
                for t in 0..k {
                    blk[t * groups + gi] /= s;
                }
            }
        }
        let mut out = Tensor::zeros(n, c);
        for i in 0..n {
            let orow = &mut out.data_mut()[i * c..(i + 1) * c];
            for (t, &j) in self.knn[i * k..(i + 1) * k].iter().enumerate() {
                let r = i * k + t;
                let vj = val.row(j);
                let et = &e[r * c..(r + 1) * c];
                let wr = &wd[r * groups..(r + 1) * groups];
                for ch in 0..c {
                    orow[ch] += wr[ch / per] * (vj[ch] + et[ch].max(0.0));
                }
            }
        }
        let Some(go) = grad_out else {
            return (out, Vec::new());
        };
        // gradient of the softmax inputs
        let mut dl = vec![0.0; rows * groups];
        for i in 0..n {
            let gi_row = go.row(i);
            for (t, &j) in self.knn[i * k..(i + 1) * k].iter().enumerate() {
                let r = i * k + t;
                let vj = val.row(j);
                let et = &e[r * c..(r + 1) * c];
                let dlt = &mut dl[r * groups..(r + 1) * groups];
                for ch in 0..c {
                    dlt[ch / per] += gi_row[ch] * (vj[ch] + et[ch].max(0.0));
                }
            }
            let blk = &mut dl[i * k * groups..(i + 1) * k * groups];
            let wb = &wd[i * k * groups..(i + 1) * k * groups];
            for gi in 0..groups {
                let mut s = 0.0;
                for t in 0..k {
                    s += wb[t * groups + gi] * blk[t * groups + gi];
                }
                for t in 0..k {
                    let idx = t * groups + gi;
                    blk[idx] = wb[idx] * (blk[idx] - s);
                }
            }
        }
        let dl = Tensor::from_vec(rows, groups, dl);
        let dwa = a.matmul(&dl, true, false);
        let da = dl.matmul(wa, false, true);
        let mut dba = vec![0.0; groups];
        for r in 0..rows {
            for (d, &l) in dba.iter_mut().zip(dl.row(r)) {
                *d += l;
            }
        }
        let (mut dq, mut dk, mut dv, mut dpw) = (vec![0.0; n * c], vec![0.0; n * c], vec![0.0; n * c], vec![0.0; n * c]);
        let mut dbp = vec![0.0; c];
        let ad = a.data();
        for i in 0..n {
            let gi_row = go.row(i);
            for (t, &j) in self.knn[i * k..(i + 1) * k].iter().enumerate() {
                let r = i * k + t;
                let wr = &wd[r * groups..(r + 1) * groups];
                let dar = da.row(r);
                for ch in 0..c {
                    let wg = wr[ch / per] * gi_row[ch];
                    dv[j * c + ch] += wg;
                    let mut dd = wg;
                    if ad[r * c + ch] > 0.0 {
                        let dp = dar[ch];
                        dq[i * c + ch] += dp;
                        dk[j * c + ch] -= dp;
                        dd += dp;
                    }
                    if e[r * c + ch] > 0.0 {
                        dpw[j * c + ch] += dd;
                        dpw[i * c + ch] -= dd;
                        dbp[ch] += dd;
                    }
                }
            }
        }
        let dwp = self.pos.matmul(&Tensor::from_vec(n, c, dpw), true, false);
        let grads = vec![
            Tensor::from_vec(n, c, dq),
            Tensor::from_vec(n, c, dk),
            Tensor::from_vec(n, c, dv),
            dwp,
            Tensor::from_vec(1, c, dbp),
            dwa,
            Tensor::from_vec(1, groups, dba),
        ];
        (out, grads)
    }
}

impl Op for VectorAttention {
    fn name(&self) -> &'static str {
        "vector_attention"
    }

    fn backward<'g>(&self, g: &'g Graph, inputs: &[Var<'g>], _: Var<'g>, grad: Var<'g>) -> Vec<Option<Var<'g>>> {
        let vals: Vec<Rc<Tensor>> = inputs.iter().map(|v| v.value()).collect();
        let (_, grads) = self.run(&vals, Some(&grad.value()));
        grads.into_iter().map(|t| Some(g.constant(t))).collect()
    }
}

/// Final EdgeConv to the significance space. Returns the per-point score
/// (max over channels, differentiable through the winning channel only) and
/// the full feature matrix as a plain tensor.
fn significance_head<'g>(inputs: [Var<'g>; 4], knn: Rc<Vec<usize>>, k: usize) -> (Var<'g>, Tensor) {
    let g = inputs[0].graph();
    let x = inputs[0].value();
    let a = inputs[1].value();
    let b = inputs[2].value();
    let bias = inputs[3].value();
    let n = x.rows();
    let c = a.cols();
    let mut feat = x.matmul(&a, false, false);
    let y = x.matmul(&b, false, false);
    let mut score = Tensor::zeros(n, 1);
    let mut winners = Vec::with_capacity(n);
    let mut best = vec![0.0f64; c];
    for i in 0..n {
        let nb = &knn[i * k..(i + 1) * k];
        best.copy_from_slice(y.row(nb[0]));
        for &j in &nb[1..] {
            for (b, &v) in best.iter_mut().zip(y.row(j)) {
                *b = b.max(v);
            }
        }
        let row = &mut feat.data_mut()[i * c..(i + 1) * c];
        let mut top = (0usize, f64::NEG_INFINITY);
        for ch in 0..c {
            let v = (row[ch] + best[ch] + bias.data()[ch]).max(0.0);
            row[ch] = v;
            if v > top.1 {
                top = (ch, v);
            }
        }
        // first neighbour attaining the max in the winning channel
        let ch = top.0;
        let j = *nb.iter().find(|&&j| y.at(j, ch) == best[ch]).expect("max is attained");
        score.data_mut()[i] = top.1;
        winners.push((ch, j, top.1 > 0.0));
    }
    let op = SignificanceHead { winners, knn };
    (g.apply(score, op, &inputs), feat)
}

struct SignificanceHead {
    /// Per point: winning channel, winning neighbour, active.
    winners: Vec<(usize, usize, bool)>,
    #[allow(dead_code)]
    knn: Rc<Vec<usize>>,
}

impl Op for SignificanceHead {
    fn name(&self) -> &'static str {
        "significance_head"
    }

    fn backward<'g>(&self, g: &'g Graph, inputs: &[Var<'g>], _: Var<'g>, grad: Var<'g>) -> Vec<Option<Var<'g>>> {
        let x = inputs[0].value();
        let a = inputs[1].value();
        let b = inputs[2].value();
        let go = grad.value();
        let (n, f) = x.shape();
        let c = a.cols();
        let mut dx = Tensor::zeros(n, f);
        let mut da = Tensor::zeros(f, c);
        let mut db = Tensor::zeros(f, c);
        let mut dbias = Tensor::zeros(1, c);
        for (i, &(ch, j, active)) in self.winners.iter().enumerate() {
            let gi = go.data()[i];
            if !active || gi == 0.0 {
                continue;
            }
            dbias.data_mut()[ch] += gi;
            let xi = x.row(i);
            let xj = x.row(j);
            for r in 0..f {
                da.data_mut()[r * c + ch] += gi * xi[r];
                db.data_mut()[r * c + ch] += gi * xj[r];
                dx.data_mut()[i * f + r] += gi * a.data()[r * c + ch];
                dx.data_mut()[j * f + r] += gi * b.data()[r * c + ch];
            }
        }
        vec![
            Some(g.constant(dx)),
            Some(g.constant(da)),
            Some(g.constant(db)),
            Some(g.constant(dbias)),
        ]
    }
}

/// Picks `⌈n·r⌉` rows of `features` (`n x C`): the per-column argmax rows
/// first, widened to per-column top-k rows when they are too few. The
/// random part is drawn over rows ordered by their maximum value, so the
/// chosen set does not depend on row order. Returns ascending indices.
pub fn significance_select(features: &Tensor, r: f64, seed: u64) -> Result<Vec<usize>> {
    let n = features.rows();
    if !(r > 0.0 && r <= 1.0) {
        return Err(Error::InvalidArgument(format!("ratio {r} outside (0, 1]")));
    }
    if n == 0 || features.cols() == 0 {
        return Err(Error::InvalidArgument("empty feature matrix".into()));
    }
    let target = stage_size(n, r);
    if target > n {
        return Err(Error::InvalidArgument(format!("cannot select {target} of {n} rows")));
    }
    let cols = features.transpose();
    let s1 = top_rows(&cols, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = if s1.len() >= target {
        let mut pool = canonical(features, s1.into_iter().collect());
        pool.shuffle(&mut rng);
        pool.truncate(target);
        pool
    } else {
        let mut k = target.div_ceil(s1.len());
        let sk = loop {
            let sk = top_rows(&cols, k);
            if sk.len() >= target || k >= n {
                break sk;
            }
            k += 1;
        };
        let mut extra = canonical(features, sk.difference(&s1).copied().collect());
        extra.shuffle(&mut rng);
        extra.truncate(target - s1.len());
        s1.into_iter().chain(extra).collect()
    };
    chosen.sort_unstable();
    Ok(chosen)
}

/// Union over columns of each column's `k` largest rows (ties to the lower
/// row index).
/// Union over columns of each column's `k` largest rows (ties to the
/// lower index). `cols` is the transposed feature matrix.
fn top_rows(cols: &Tensor, k: usize) -> BTreeSet<usize> {
    let (c, n) = cols.shape();
    let k = k.min(n);
    let mut set = BTreeSet::new();
    let mut col: Vec<(f64, usize)> = Vec::with_capacity(n);
    let cmp = |a: &(f64, usize), b: &(f64, usize)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    for ch in 0..c {
        let values = cols.row(ch);
        if k == 1 {
            let mut best = 0;
            for (i, &v) in values.iter().enumerate().skip(1) {
                if v > values[best] {
                    best = i;
                }
            }
            set.insert(best);
            continue;
        }
        col.clear();
        col.extend(values.iter().copied().zip(0..n));
        if k < n {
            col.select_nth_unstable_by(k - 1, cmp);
        }
        set.extend(col[..k].iter().map(|&(_, i)| i));
    }
    set
}

fn canonical(features: &Tensor, mut rows: Vec<usize>) -> Vec<usize> {
    let key: Vec<f64> = (0..features.rows())
        .map(|i| features.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .collect();
    rows.sort_by(|&a, &b| key[b].total_cmp(&key[a]).then(a.cmp(&b)));
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::tests::rand_tensor;
    use proptest::prelude::*;
    use rand::Rng;

    fn toy_cloud(n: usize, seed: u64) -> Vec<Point> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect()
    }

    fn fd_check(f: impl Fn(&[Tensor]) -> f64, an: &[Tensor], at: &[Tensor]) {
        let h = 1e-6;
        let mut bad = 0;
        let mut total = 0;
        for (ti, t) in at.iter().enumerate() {
            for e in 0..t.len() {
                let mut p = at.to_vec();
                p[ti].data_mut()[e] += h;
                let mut m = at.to_vec();
                m[ti].data_mut()[e] -= h;
                let fd = (f(&p) - f(&m)) / (2.0 * h);
                let a = an[ti].data()[e];
                total += 1;
                if (fd - a).abs() > 1e-5 * (1.0 + fd.abs()) {
                    bad += 1;
                }
            }
        }
        assert_eq!(bad, 0, "{bad} of {total} entries disagree");
    }

    #[test]
    fn vector_attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 9;
        let k = 4;
        let pts = toy_cloud(n, 1);
        let knn = Rc::new(knn_table(&pts, &pts, k));
        let pos = Rc::new(Tensor::from_rows(&pts));
        let shapes = [(n, 16), (n, 16), (n, 16), (3, 16), (1, 16), (16, 4), (1, 4)];
        let at: Vec<Tensor> = shapes.iter().map(|&(r, c)| rand_tensor(&mut rng, r, c)).collect();
        let weights = rand_tensor(&mut rng, n, 16);
        let f = |ts: &[Tensor]| {
            let g = Graph::new();
            let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            let out = vector_attention(vs.try_into().unwrap(), pos.clone(), knn.clone(), k);
            out.mul(g.constant(weights.clone())).sum().item()
        };
        let g = Graph::new();
        let vs: Vec<Var> = at.iter().map(|t| g.leaf(t.clone())).collect();
        let out = vector_attention(vs.clone().try_into().unwrap(), pos.clone(), knn.clone(), k);
        let y = out.mul(g.constant(weights.clone())).sum();
        let an: Vec<Tensor> = g.grad(y, &vs).iter().map(|v| (*v.value()).clone()).collect();
        fd_check(f, &an, &at);
    }

    #[test]
    fn head_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let n = 10;
        let k = 3;
        let pts = toy_cloud(n, 2);
        let knn = Rc::new(knn_table(&pts, &pts, k));
        let at: Vec<Tensor> = [(n, 5), (5, 7), (5, 7), (1, 7)].iter().map(|&(r, c)| rand_tensor(&mut rng, r, c)).collect();
        let weights = rand_tensor(&mut rng, n, 1);
        let f = |ts: &[Tensor]| {
            let g = Graph::new();
            let vs: Vec<Var> = ts.iter().map(|t| g.constant(t.clone())).collect();
            significance_head(vs.try_into().unwrap(), knn.clone(), k).0.mul(g.constant(weights.clone())).sum().item()
        };
        let g = Graph::new();
        let vs: Vec<Var> = at.iter().map(|t| g.leaf(t.clone())).collect();
        let (s, feat) = significance_head(vs.clone().try_into().unwrap(), knn.clone(), k);
        for i in 0..n {
            let m = feat.row(i).iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(s.value().data()[i], m);
        }
        let y = s.mul(g.constant(weights.clone())).sum();
        let an: Vec<Tensor> = g.grad(y, &vs).iter().map(|v| (*v.value()).clone()).collect();
        fd_check(f, &an, &at);
    }

    fn sampler(k: usize) -> (ParamSet, Sampler) {
        let mut ps = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let s = Sampler::new(&mut ps, k, &mut rng);
        (ps, s)
    }

    #[test]
    fn features_shape_and_equivariance() {
        let (ps, s) = sampler(16);
        let pts = toy_cloud(40, 5);
        let f = s.features(&ps, &pts).unwrap();
        assert_eq!(f.shape(), (40, SIGNIFICANCE_WIDTH));
        assert!(f.is_finite());
        let perm: Vec<usize> = (0..40).map(|i| (i * 7 + 3) % 40).collect();
        let permuted: Vec<Point> = perm.iter().map(|&i| pts[i]).collect();
        let fp = s.features(&ps, &permuted).unwrap();
        for (r, &i) in perm.iter().enumerate() {
            for c in 0..SIGNIFICANCE_WIDTH {
                assert!((fp.at(r, c) - f.at(i, c)).abs() < 1e-9);
            }
        }
        assert!(s.features(&ps, &pts[..15]).is_err());
    }

    #[test]
    fn shifted_cluster_rows_differ() {
        let (ps, s) = sampler(16);
        let a = toy_cloud(20, 6);
        let mut both: Vec<Point> = a.iter().map(|p| [p[0] * 0.1 - 0.5, p[1] * 0.1, p[2] * 0.1]).collect();
        both.extend(a.iter().map(|p| [p[0] * 0.1 + 0.5, p[1] * 0.1, p[2] * 0.1]));
        let f = s.features(&ps, &both).unwrap();
        for i in 0..20 {
            assert_ne!(f.row(i), f.row(i + 20));
        }
    }

    #[test]
    fn select_illustration() {
        let f = Tensor::from_vec(4, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1., 0.5, 0.5, 0.5]);
        for seed in 0..20 {
            let sel = significance_select(&f, 0.5, seed).unwrap();
            assert_eq!(sel.len(), 2);
            assert!(sel.iter().all(|&i| i < 3));
        }
    }

    #[test]
    fn select_expands_to_top_k() {
        // row 0 wins every column; row 1,2 follow in columns 0..2 and 3..5
        let mut f = Tensor::zeros(6, 6);
        for c in 0..6 {
            f.data_mut()[c] = 10.0;
        }
        for c in 0..3 {
            f.data_mut()[6 + c] = 5.0;
            f.data_mut()[12 + 3 + c] = 5.0;
        }
        assert_eq!(top_rows(&f.transpose(), 1).into_iter().collect::<Vec<_>>(), vec![0]);
        let sel = significance_select(&f, 0.5, 1).unwrap();
        assert_eq!(sel, vec![0, 1, 2]);
        assert_eq!(significance_select(&f, 1.0, 1).unwrap(), (0..6).collect::<Vec<_>>());
        assert!(significance_select(&f, 0.0, 1).is_err());
    }

    proptest! {
        #[test]
        fn select_count_unique_deterministic(n in 4usize..60, c in 1usize..12, r in 0.05f64..1.0, seed in 0u64..1000, fseed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(fseed);
            let f = rand_tensor(&mut rng, n, c);
            let a = significance_select(&f, r, seed).unwrap();
            prop_assert_eq!(a.len(), stage_size(n, r));
            prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
            prop_assert_eq!(&a, &significance_select(&f, r, seed).unwrap());
            let s1 = top_rows(&f.transpose(), 1);
            if s1.len() < a.len() {
                prop_assert!(s1.iter().all(|i| a.contains(i)));
            }
        }

        #[test]
        fn selected_set_ignores_row_order(n in 4usize..50, c in 1usize..10, r in 0.05f64..1.0, seed in 0u64..100, fseed in 0u64..1000, shift in 1usize..50) {
            let mut rng = ChaCha8Rng::seed_from_u64(fseed);
            let f = rand_tensor(&mut rng, n, c);
            let perm: Vec<usize> = (0..n).map(|i| (i + shift) % n).collect();
            let mut fp = Tensor::zeros(n, c);
            for (r2, &i) in perm.iter().enumerate() {
                fp.data_mut()[r2 * c..(r2 + 1) * c].copy_from_slice(f.row(i));
            }
            let a = significance_select(&f, r, seed).unwrap();
            let mut b: Vec<usize> = significance_select(&fp, r, seed).unwrap().into_iter().map(|i| perm[i]).collect();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
