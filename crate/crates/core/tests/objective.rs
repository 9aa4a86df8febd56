mod common;

use common::objective;
use common::probe_params;
use cotp_core::autodiff::{Graph, Var};
use cotp_core::cloud::{sample_surface, PointCloud, SurfaceKind};
use cotp_core::losses::{discriminator_objective, ot_regularizer, wasserstein_quadratic, LossWeights};
use cotp_core::model::{CodecModel, ModelConfig};
use cotp_core::nets::Group;
use cotp_core::optim::Adam;
use cotp_core::tensor::Tensor;

fn toy_model(seed: u64) -> CodecModel {
    CodecModel::new(ModelConfig {
        k_nn: 4,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

fn toy_batch(n: usize) -> Vec<PointCloud> {
    vec![
        sample_surface(SurfaceKind::Sphere, n, 1).unwrap(),
        sample_surface(SurfaceKind::Torus, n, 2).unwrap(),
    ]
}

#[test]
fn generator_gradient_matches_differences() {
    let m = toy_model(0);
    let batch = toy_batch(32);
    let w = LossWeights::default();
    let (ids, grads) = objective::gradient(&m, &batch, &w, 0.25);
    let probe = probe_params(&m.params, &ids, &grads, 50, 1e-5, 1e-3, 11, |ps| objective::value(&m, ps, &batch, &w, 0.25));
    assert!(probe.fraction() >= 0.9, "{probe:?}");
}

#[test]
fn rate_never_reaches_the_critic_and_critic_never_reaches_entropy_models() {
    let m = toy_model(1);
    let batch = toy_batch(32);
    let g = Graph::new();
    let p = m.params.bind(&g, |_| true);
    let t = objective::terms(&m, &g, &p, &batch, &LossWeights::default(), 0.0);
    let leaves = p.leaf_vars();
    let rate_grads = g.grad(t.rate_bpp, &leaves);
    let dw_grads = g.grad(t.d_wass, &leaves);
    let mut critic_seen = false;
    for (i, &id) in p.leaves().iter().enumerate() {
        let grp = m.params.group(id);
        if grp == Group::Discriminator {
            critic_seen = true;
            assert!(rate_grads[i].value().data().iter().all(|&v| v == 0.0), "{}", m.params.name(id));
        }
        if id == m.coord_model.param || id == m.feature_model.param {
            assert!(dw_grads[i].value().data().iter().all(|&v| v == 0.0), "{}", m.params.name(id));
        }
    }
    assert!(critic_seen);
    assert!(t.d_wass.item() > 0.0);
}

#[test]
fn disabled_terms_leave_the_rate_distortion_objective() {
    let m = toy_model(2);
    let batch = toy_batch(32);
    let g = Graph::new();
    let p = m.params.bind(&g, |_| false);
    let plain = LossWeights {
        beta: 0.0,
        gamma: 0.0,
        lambda: 0.3,
    };
    let t = objective::terms(&m, &g, &p, &batch, &plain, 7.0);
    let rd = t.cost.item() + 0.3 * t.rate_bpp.item();
    assert!((t.total.item() - rd).abs() <= 1e-12);
    // linear in lambda
    let more = objective::value(&m, &m.params, &batch, &LossWeights { lambda: 0.6, ..plain }, 7.0);
    assert!(t.rate_bpp.item() > 0.0 && more > t.total.item());
    let none = objective::value(&m, &m.params, &batch, &LossWeights { lambda: 0.0, ..plain }, 7.0);
    assert!((none - t.cost.item()).abs() <= 1e-12);
}

/// `β·d_wass − γ·L_OTR` for the critic inside `ps`, plus its gradient.
fn critic_objective(m: &CodecModel, ps: &cotp_core::nets::ParamSet, x: &[Tensor], xhat: &[Tensor], costs: &[f64], w: &LossWeights) -> (f64, Vec<Tensor>) {
    let g = Graph::new();
    let p = ps.bind(&g, |grp| grp == Group::Discriminator);
    let reg = ot_regularizer(&g, x, costs, |v| m.critic_score(&p, v)).unwrap();
    let jxh: Vec<Var> = xhat.iter().map(|t| m.critic_score(&p, g.constant(t.clone()))).collect();
    let d = wasserstein_quadratic(&reg.scores, &jxh).unwrap();
    let obj = discriminator_objective(d, reg.value, w);
    let grads = g.grad(obj, &p.leaf_vars()).iter().map(|v| (*v.value()).clone()).collect();
    (obj.item(), grads)
}

fn reconstructions(m: &CodecModel, batch: &[PointCloud]) -> (Vec<Tensor>, Vec<Tensor>, Vec<f64>) {
    let g = Graph::new();
    let p = m.params.bind(&g, |_| false);
    let mut xs = Vec::new();
    let mut xh = Vec::new();
    let mut costs = Vec::new();
    for (i, c) in batch.iter().enumerate() {
        let out = m.forward_train(&p, c.points(), i as u64, i as u64).unwrap();
        let x = Tensor::from_rows(c.points());
        costs.push(cotp_core::losses::chamfer(g.constant(x.clone()), out.xhat).item());
        xs.push(x);
        xh.push((*out.xhat.value()).clone());
    }
    (xs, xh, costs)
}

#[test]
fn critic_ascent_step_raises_its_objective() {
    let w = LossWeights::default();
    let mut raised = 0;
    for seed in 0..10 {
        let mut m = toy_model(seed);
        let batch = toy_batch(48);
        let (x, xh, costs) = reconstructions(&m, &batch);
        let (before, grads) = critic_objective(&m, &m.params, &x, &xh, &costs, &w);
        let ids = m.params.ids_in(|g| g == Group::Discriminator);
        let mut opt = Adam::new(&m.params, ids, |_| 1e-4);
        let neg: Vec<Tensor> = grads.iter().map(|t| t.map(|v| -v)).collect();
        opt.step(&mut m.params, &neg);
        let (after, _) = critic_objective(&m, &m.params, &x, &xh, &costs, &w);
        if after >= before {
            raised += 1;
        }
    }
    assert!(raised >= 8, "{raised}/10");
}

#[test]
fn symmetric_or_silent_critics_give_nothing() {
    let w = LossWeights {
        gamma: 0.0,
        ..LossWeights::default()
    };
    let m = toy_model(3);
    let batch = toy_batch(32);
    let x: Vec<Tensor> = batch.iter().map(|c| Tensor::from_rows(c.points())).collect();
    let (v, grads) = critic_objective(&m, &m.params, &x, &x, &[0.0, 0.0], &w);
    assert_eq!(v, 0.0);
    assert!(grads.iter().all(|t| t.data().iter().all(|&g| g == 0.0)));

    let silent = CodecModel::new(ModelConfig {
        k_nn: 4,
        zero_critic_head: true,
        ..ModelConfig::default()
    })
    .unwrap();
    let (x, xh, costs) = reconstructions(&silent, &batch);
    let zero_costs = vec![0.0; costs.len()];
    let (v, _) = critic_objective(&silent, &silent.params, &x, &xh, &zero_costs, &LossWeights::default());
    // only the norm's epsilon survives
    assert!(v.abs() <= 1e-12, "{v}");
}
