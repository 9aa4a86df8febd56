//! Alternating critic ascent / generator descent, checkpoints, run logs and
//! the rate-weight sweep.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{Graph, Var};
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::losses::{cost_c, discriminator_objective, generator_objective, ot_regularizer, wasserstein_quadratic, LossBreakdown, LossWeights};
use crate::model::{CodecModel, ModelConfig};
use crate::nets::{hex, Group, ParamSet};
use crate::optim::Adam;
use crate::seed::derive_seed;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"COTPCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_FAILURES: u32 = 3;
pub const LOG_FILE: &str = "train_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const MANIFEST_FILE: &str = "manifest.json";

const PURPOSE_SELECT: u64 = 1;
const PURPOSE_NOISE: u64 = 2;
const PURPOSE_SHUFFLE: u64 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub epochs: usize,
    pub learning_rate: f64,
    /// Learning rate of the entropy-model group.
    pub entropy_learning_rate: f64,
    pub batch_size: usize,
    pub disc_steps_per_gen_step: usize,
    /// Write a checkpoint every this many steps (0: final only).
    pub checkpoint_every: u64,
    /// Stop after this many steps in total, whatever the epoch count says.
    pub max_steps: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            epochs: 50,
            learning_rate: 1e-4,
            entropy_learning_rate: 1e-3,
            batch_size: 8,
            disc_steps_per_gen_step: 1,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn seed(&self) -> u64 {
        self.model.seed
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.weights.validate()?;
        let lr_ok = |v: f64| v > 0.0 && v.is_finite();
        if !lr_ok(self.learning_rate) || !lr_ok(self.entropy_learning_rate) {
            return Err(Error::InvalidArgument("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.disc_steps_per_gen_step == 0 {
            return Err(Error::InvalidArgument("batch size and critic steps must be positive".into()));
        }
        Ok(())
    }

    fn lr_of(&self, g: Group) -> f64 {
        if g == Group::Entropy {
            self.entropy_learning_rate
        } else {
            self.learning_rate
        }
    }
}

/// Points at which [`Trainer::train_step_observed`] reports the parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    AfterCritic,
    AfterGenerator,
}

/// Model plus both optimizers and the step counter.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: TrainConfig,
    pub model: CodecModel,
    gen_opt: Adam,
    disc_opt: Adam,
    pub step: u64,
    failures: u32,
}

fn group_digests(ps: &ParamSet) -> Vec<(String, String)> {
    Group::ALL
        .iter()
        .map(|&g| (g.name().to_string(), hex(&ps.digest(|x| x == g))))
        .collect()
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let model = CodecModel::new(config.model.clone())?;
        let ps = &model.params;
        let gen_opt = Adam::new(ps, ps.ids_in(Group::is_generator), |g| config.lr_of(g));
        let disc_opt = Adam::new(ps, ps.ids_in(|g| g == Group::Discriminator), |g| config.lr_of(g));
        Ok(Trainer {
            config,
            model,
            gen_opt,
            disc_opt,
            step: 0,
            failures: 0,
        })
    }

    pub fn params(&self) -> &ParamSet {
        &self.model.params
    }

    pub fn train_step(&mut self, batch: &[PointCloud]) -> Result<Option<LossBreakdown>> {
        self.train_step_observed(batch, |_, _| {})
    }

    /// One critic phase then one generator step. Returns `None` when the step
    /// produced non-finite values and was rolled back.
    pub fn train_step_observed(&mut self, batch: &[PointCloud], mut observe: impl FnMut(Phase, &ParamSet)) -> Result<Option<LossBreakdown>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if batch.iter().any(|c| c.len() != batch[0].len()) {
            return Err(Error::Shape("batch clouds must have equal point counts".into()));
        }
        let saved = (self.model.params.clone(), self.gen_opt.clone(), self.disc_opt.clone());
        let outcome = self.try_step(batch, &mut observe);
        self.step += 1;
        match outcome {
            Ok(b) if b.is_finite() => {
                self.failures = 0;
                Ok(Some(b))
            }
            Ok(_) | Err(Error::NonFinite(_)) => {
                (self.model.params, self.gen_opt, self.disc_opt) = saved;
                self.failures += 1;
                if self.failures >= MAX_FAILURES {
                    return Err(Error::Diverged(format!("{MAX_FAILURES} consecutive non-finite steps ending at step {}", self.step - 1)));
                }
                Ok(None)
            }
            Err(e) => {
                (self.model.params, self.gen_opt, self.disc_opt) = saved;
                Err(e)
            }
        }
    }

    fn try_step(&mut self, batch: &[PointCloud], observe: &mut impl FnMut(Phase, &ParamSet)) -> Result<LossBreakdown> {
        let w = self.config.weights;
        let seed = self.config.seed();
        let step = self.step;
        let x: Vec<Tensor> = batch.iter().map(|c| Tensor::from_rows(c.points())).collect();

        let g = Graph::new();
        let p = self.model.params.bind(&g, Group::is_generator);
        let mut xhat = Vec::with_capacity(batch.len());
        let mut rate = Vec::with_capacity(batch.len());
        for (i, cloud) in batch.iter().enumerate() {
            let i = i as u64;
            let out = self.model.forward_train(
                &p,
                cloud.points(),
                derive_seed(seed, &[PURPOSE_NOISE, step, i]),
                derive_seed(seed, &[PURPOSE_SELECT, step, i]),
            )?;
            xhat.push(out.xhat);
            rate.push(out.rate_bits.scale(1.0 / cloud.len() as f64));
        }
        if let Some(i) = xhat.iter().position(|v| !v.value().is_finite()) {
            return Err(Error::NonFinite(format!("reconstruction of sample {i} at step {step}")));
        }
        let xv: Vec<Var> = x.iter().map(|t| g.constant(t.clone())).collect();
        let costs: Vec<f64> = xv.iter().zip(&xhat).map(|(&a, &b)| crate::losses::chamfer(a, b).item()).collect();
        let xhat_values: Vec<Tensor> = xhat.iter().map(|v| (*v.value()).clone()).collect();

        for _ in 0..self.config.disc_steps_per_gen_step {
            self.critic_step(&x, &xhat_values, &costs)?;
        }
        observe(Phase::AfterCritic, &self.model.params);

        // critic frozen at its updated values
        let pc = self.model.params.bind(&g, |_| false);
        let jx: Vec<Var> = xv.iter().map(|&v| self.model.critic_score(&pc, v)).collect();
        let jxh: Vec<Var> = xhat.iter().map(|&v| self.model.critic_score(&pc, v)).collect();
        let d_wass = wasserstein_quadratic(&jx, &jxh)?;
        let c = cost_c(&xv, &xhat)?;
        let l_otr = self.regularizer_value(&x, &costs)?;
        let n = rate.len() as f64;
        let rate_bpp = Var::concat_rows(&rate).sum().scale(1.0 / n);
        let objective = generator_objective(c, d_wass, g.scalar(l_otr), rate_bpp, &w);
        let breakdown = LossBreakdown::new(c.item(), d_wass.item(), l_otr, rate_bpp.item(), &w);
        if !breakdown.is_finite() || !objective.item().is_finite() {
            return Err(Error::NonFinite(format!("generator objective at step {step}")));
        }
        let leaves = p.leaf_vars();
        let grads: Vec<Tensor> = g.grad(objective, &leaves).iter().map(|v| (*v.value()).clone()).collect();
        if !grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite(format!("generator gradient at step {step}")));
        }
        self.gen_opt.step(&mut self.model.params, &grads);
        observe(Phase::AfterGenerator, &self.model.params);
        Ok(breakdown)
    }

    /// One Adam ascent step of the critic on `β·d_wass − γ·L_OTR`.
    fn critic_step(&mut self, x: &[Tensor], xhat: &[Tensor], costs: &[f64]) -> Result<()> {
        let w = self.config.weights;
        let g = Graph::new();
        let p = self.model.params.bind(&g, |grp| grp == Group::Discriminator);
        let model = &self.model;
        let reg = ot_regularizer(&g, x, costs, |v| model.critic_score(&p, v))?;
        let jxh: Vec<Var> = xhat.iter().map(|t| model.critic_score(&p, g.constant(t.clone()))).collect();
        let d_wass = wasserstein_quadratic(&reg.scores, &jxh)?;
        let objective = discriminator_objective(d_wass, reg.value, &w);
        if !objective.item().is_finite() {
            return Err(Error::NonFinite("critic objective".into()));
        }
        let leaves = p.leaf_vars();
        let grads: Vec<Tensor> = g.grad(objective, &leaves).iter().map(|v| v.value().map(|d| -d)).collect();
        if !grads.iter().all(Tensor::is_finite) {
            return Err(Error::NonFinite("critic gradient".into()));
        }
        self.disc_opt.step(&mut self.model.params, &grads);
        Ok(())
    }

    fn regularizer_value(&self, x: &[Tensor], costs: &[f64]) -> Result<f64> {
        let g = Graph::new();
        let p = self.model.params.bind(&g, |_| false);
        Ok(ot_regularizer(&g, x, costs, |v| self.model.critic_score(&p, v))?.value.item())
    }

    /// Group name → hex digest of that group's parameters.
    pub fn digests(&self) -> Vec<(String, String)> {
        group_digests(&self.model.params)
    }

    pub fn save(&self, path: &Path, epoch: usize) -> Result<()> {
        let ps = &self.model.params;
        let header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            step: self.step,
            epoch,
            failures: self.failures,
            params: ps
                .ids()
                .map(|id| ParamEntry {
                    name: ps.name(id).to_string(),
                    group: ps.group(id),
                    rows: ps.get(id).rows(),
                    cols: ps.get(id).cols(),
                })
                .collect(),
            gen_adam_t: self.gen_opt.t,
            disc_adam_t: self.disc_opt.t,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let tensors = ps.ids().map(|id| ps.get(id)).chain(self.gen_opt.moments()).chain(self.disc_opt.moments());
        for t in tensors {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Restores a trainer exactly as saved; also returns the saved epoch.
    pub fn load(path: &Path) -> Result<(Self, usize)> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let (header, mut data) = split_checkpoint(&bytes)?;
        let mut trainer = Trainer::new(header.config.clone())?;
        let ps = &mut trainer.model.params;
        if ps.len() != header.params.len() {
            return Err(Error::Format(format!("checkpoint has {} tensors, model {}", header.params.len(), ps.len())));
        }
        let ids: Vec<_> = ps.ids().collect();
        for (id, entry) in ids.into_iter().zip(&header.params) {
            let t = ps.get(id);
            if ps.name(id) != entry.name || (t.rows(), t.cols()) != (entry.rows, entry.cols) || ps.group(id) != entry.group {
                return Err(Error::Format(format!("checkpoint tensor '{}' does not match the model", entry.name)));
            }
            let value = read_tensor(&mut data, entry.rows, entry.cols)?;
            ps.set(id, value);
        }
        for t in trainer.gen_opt.moments_mut().chain(trainer.disc_opt.moments_mut()) {
            *t = read_tensor(&mut data, t.rows(), t.cols())?;
        }
        if !data.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", data.len())));
        }
        trainer.gen_opt.t = header.gen_adam_t;
        trainer.disc_opt.t = header.disc_adam_t;
        trainer.step = header.step;
        trainer.failures = header.failures;
        Ok((trainer, header.epoch))
    }
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: Group,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: TrainConfig,
    step: u64,
    epoch: usize,
    failures: u32,
    params: Vec<ParamEntry>,
    gen_adam_t: u64,
    disc_adam_t: u64,
}

fn split_checkpoint(bytes: &[u8]) -> Result<(CheckpointHeader, &[u8])> {
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let json = bytes
        .get(16..16 + len)
        .ok_or_else(|| Error::Truncated { offset: bytes.len(), message: "checkpoint header".into() })?;
    let header: CheckpointHeader = serde_json::from_slice(json)?;
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", header.version)));
    }
    Ok((header, &bytes[16 + len..]))
}

fn read_tensor(data: &mut &[u8], rows: usize, cols: usize) -> Result<Tensor> {
    let need = rows * cols * 8;
    if data.len() < need {
        return Err(Error::Truncated { offset: 0, message: "checkpoint tensor data".into() });
    }
    let (head, rest) = data.split_at(need);
    *data = rest;
    let values = head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(Tensor::from_vec(rows, cols, values))
}

/// Loads only the model from a checkpoint.
pub fn load_model(path: &Path) -> Result<CodecModel> {
    Ok(Trainer::load(path)?.0.model)
}

/// Reads the config stored in a checkpoint without building the model.
pub fn checkpoint_config(path: &Path) -> Result<TrainConfig> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(split_checkpoint(&bytes)?.0.config)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub step: u64,
    pub epoch: usize,
    pub lambda: f64,
    pub config: TrainConfig,
    /// Group name → hex digest.
    pub digests: Vec<(String, String)>,
    /// Means over the steps run in this call (absent when none ran).
    pub running: Option<LossBreakdown>,
    pub checkpoint: Option<PathBuf>,
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub cost_c: f64,
    pub d_wass: f64,
    pub l_otr: f64,
    pub rate_bpp: f64,
    pub total_gen: f64,
    pub total_disc: f64,
}

impl LogRecord {
    pub fn new(step: u64, b: &LossBreakdown) -> Self {
        LogRecord {
            step,
            cost_c: b.cost_c,
            d_wass: b.d_wass,
            l_otr: b.l_otr,
            rate_bpp: b.rate_bpp,
            total_gen: b.total_gen,
            total_disc: b.total_disc,
        }
    }
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(format!("{}:{}", path.display(), i + 1), e.to_string())))
        .collect()
}

/// SHA-256 (first 8 bytes, hex) over every coordinate of every cloud.
pub fn dataset_digest(dataset: &[PointCloud]) -> String {
    let mut h = Sha256::new();
    for c in dataset {
        h.update((c.len() as u64).to_le_bytes());
        for p in c.points() {
            for v in p {
                h.update(v.to_le_bytes());
            }
        }
    }
    hex(&h.finalize()[..8])
}

#[derive(Serialize)]
struct RunManifest<'a> {
    config: &'a TrainConfig,
    seed: u64,
    dataset_digest: String,
    dataset_size: usize,
    steps: u64,
    digests: &'a [(String, String)],
}

pub fn steps_per_epoch(dataset_len: usize, batch_size: usize) -> u64 {
    dataset_len.div_ceil(batch_size) as u64
}

/// The batch used at global `step`: epochs reshuffle the dataset with a
/// seed derived from the epoch index.
pub fn batch_indices(dataset_len: usize, batch_size: usize, seed: u64, step: u64) -> (usize, Vec<usize>) {
    let per = steps_per_epoch(dataset_len, batch_size);
    let epoch = (step / per) as usize;
    let b = (step % per) as usize;
    let mut order: Vec<usize> = (0..dataset_len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[PURPOSE_SHUFFLE, epoch as u64])));
    let end = ((b + 1) * batch_size).min(dataset_len);
    (epoch, order[b * batch_size..end].to_vec())
}

/// Runs training until `epochs × ⌈|dataset|/batch⌉` steps (or `max_steps`)
/// have been taken in total. With `out`, appends to the log, writes periodic
/// and final checkpoints and the run manifest there.
pub fn fit(trainer: &mut Trainer, dataset: &[PointCloud], out: Option<&Path>) -> Result<CheckpointMeta> {
    fit_with_progress(trainer, dataset, out, |_, _| {})
}

pub fn fit_with_progress(
    trainer: &mut Trainer,
    dataset: &[PointCloud],
    out: Option<&Path>,
    mut progress: impl FnMut(u64, Option<&LossBreakdown>),
) -> Result<CheckpointMeta> {
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let cfg = trainer.config.clone();
    let per = steps_per_epoch(dataset.len(), cfg.batch_size);
    let mut total = cfg.epochs as u64 * per;
    if let Some(cap) = cfg.max_steps {
        total = total.min(cap);
    }
    let mut log = match out {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let path = dir.join(LOG_FILE);
            let f = fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            Some((std::io::BufWriter::new(f), path))
        }
        None => None,
    };
    let mut sums = [0.0; 4];
    let mut ran = 0usize;
    let mut epoch = (trainer.step / per) as usize;
    while trainer.step < total {
        let step = trainer.step;
        let (e, idx) = batch_indices(dataset.len(), cfg.batch_size, cfg.seed(), step);
        epoch = e;
        let batch: Vec<PointCloud> = idx.iter().map(|&i| dataset[i].clone()).collect();
        let result = trainer.train_step(&batch)?;
        if let Some(b) = &result {
            for (s, v) in sums.iter_mut().zip([b.cost_c, b.d_wass, b.l_otr, b.rate_bpp]) {
                *s += v;
            }
            ran += 1;
            if let Some((w, path)) = log.as_mut() {
                let line = serde_json::to_string(&LogRecord::new(step, b))?;
                writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
        }
        progress(step, result.as_ref());
        if let (Some(dir), true) = (out, cfg.checkpoint_every > 0 && trainer.step % cfg.checkpoint_every == 0) {
            trainer.save(&dir.join(format!("step_{:06}.ckpt", trainer.step)), epoch)?;
        }
    }
    if let Some((mut w, path)) = log {
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    let epoch_done = (trainer.step / per) as usize;
    let mut checkpoint = None;
    let digests = trainer.digests();
    if let Some(dir) = out {
        let path = dir.join(FINAL_CHECKPOINT);
        trainer.save(&path, epoch_done.max(epoch))?;
        checkpoint = Some(path);
        let manifest = RunManifest {
            config: &cfg,
            seed: cfg.seed(),
            dataset_digest: dataset_digest(dataset),
            dataset_size: dataset.len(),
            steps: trainer.step,
            digests: &digests,
        };
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, serde_json::to_vec_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;
    }
    let running = (ran > 0).then(|| {
        let k = ran as f64;
        LossBreakdown::new(sums[0] / k, sums[1] / k, sums[2] / k, sums[3] / k, &cfg.weights)
    });
    Ok(CheckpointMeta {
        step: trainer.step,
        epoch: epoch_done.max(epoch),
        lambda: cfg.weights.lambda,
        config: cfg,
        digests,
        running,
        checkpoint,
    })
}

/// Directory name used for the run with rate weight `lambda`.
pub fn lambda_dir(lambda: f64) -> String {
    format!("lambda_{lambda}")
}

/// Trains one model per λ from the same seeds. `lambdas` must be positive
/// and strictly increasing.
pub fn sweep_lambda(dataset: &[PointCloud], config: &TrainConfig, lambdas: &[f64], out: Option<&Path>) -> Result<Vec<CheckpointMeta>> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("no lambda values".into()));
    }
    if lambdas.iter().any(|&l| !(l > 0.0 && l.is_finite())) || lambdas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidArgument("lambdas must be positive and strictly increasing".into()));
    }
    lambdas
        .iter()
        .map(|&lambda| {
            let mut cfg = config.clone();
            cfg.weights.lambda = lambda;
            let mut trainer = Trainer::new(cfg)?;
            let dir = out.map(|d| d.join(lambda_dir(lambda)));
            fit(&mut trainer, dataset, dir.as_deref())
        })
        .collect()
}
