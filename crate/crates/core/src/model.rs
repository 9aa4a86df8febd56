//! The complete codec: shared sampler, encoder, quantizer, entropy models,
//! decoder and the critic used only during training.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::cloud::{Point, PointCloud};
use crate::codec::{
    decode_bitstream, encode_bitstream, noise_tensor, quantize, Bitstream, CodingTables, FactorizedModel, QuantizedLatent,
    QuantizerConfig,
};
use crate::error::{Error, Result};
use crate::nets::{stage_sizes, Bound, Critic, Decoder, Encoder, Group, ParamId, ParamSet, Sampler, SamplerKind};
use crate::seed::derive_seed;
use crate::tensor::Tensor;

/// Rough width, in grid steps, of the initial coordinate density.
pub const COORD_INIT_SCALE: f64 = 600.0;
pub const FEATURE_INIT_SCALE: f64 = 10.0;
/// Initial learned feature scale, before `feature_step`.
pub const INITIAL_FEATURE_SCALE: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub ratios: [f64; 3],
    pub latent_dim: usize,
    pub k_nn: usize,
    pub sampler: SamplerKind,
    pub quantizer: QuantizerConfig,
    /// Start the critic with an all-zero output layer (J ≡ 0).
    pub zero_critic_head: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            ratios: [0.5; 3],
            latent_dim: 8,
            k_nn: 16,
            sampler: SamplerKind::Learned,
            quantizer: QuantizerConfig::default(),
            zero_critic_head: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(r) = self.ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return Err(Error::InvalidArgument(format!("stage ratio {r} outside (0, 1]")));
        }
        if self.latent_dim == 0 || self.k_nn == 0 {
            return Err(Error::InvalidArgument("latent_dim and k_nn must be positive".into()));
        }
        if !(self.quantizer.coord_step > 0.0 && self.quantizer.feature_step > 0.0) {
            return Err(Error::InvalidArgument("quantizer steps must be positive".into()));
        }
        Ok(())
    }
}

/// What one training forward pass produces.
pub struct GenForward<'g> {
    /// Reconstruction, `n x 3`.
    pub xhat: Var<'g>,
    /// Estimated bits of the noisy latent (coordinates plus features).
    pub rate_bits: Var<'g>,
    pub m: usize,
}

#[derive(Clone, Debug)]
pub struct CodecModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    pub sampler: Sampler,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub coord_model: FactorizedModel,
    pub feature_model: FactorizedModel,
    pub log_scale: ParamId,
    pub critic: Critic,
}

impl CodecModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, &[0x1417]));
        let mut ps = ParamSet::new();
        let d = config.latent_dim;
        let sampler = Sampler::new(&mut ps, config.k_nn, &mut rng);
        let encoder = Encoder::new(&mut ps, config.k_nn, d, &mut rng);
        let decoder = Decoder::new(&mut ps, d, config.ratios, &mut rng);
        let coord_model = FactorizedModel::new(&mut ps, "entropy.coord", 1, COORD_INIT_SCALE, &mut rng);
        let feature_model = FactorizedModel::new(&mut ps, "entropy.feature", d, FEATURE_INIT_SCALE, &mut rng);
        let log_scale = ps.add("entropy.log_scale", Group::Entropy, Tensor::full(1, d, INITIAL_FEATURE_SCALE.ln()));
        let critic = Critic::new(&mut ps, config.zero_critic_head, &mut rng);
        Ok(CodecModel {
            config,
            params: ps,
            sampler,
            encoder,
            decoder,
            coord_model,
            feature_model,
            log_scale,
            critic,
        })
    }

    /// Latent size for `n` input points.
    pub fn latent_points(&self, n: usize) -> usize {
        stage_sizes(n, self.config.ratios)[2]
    }

    /// Digest of everything the decoder side depends on.
    pub fn generator_digest(&self) -> [u8; 8] {
        self.params.digest(Group::is_generator)
    }

    /// Per-channel feature quantization steps as stored in the bitstream.
    pub fn feature_scales(&self) -> Vec<f32> {
        let step = self.config.quantizer.feature_step;
        self.params.get(self.log_scale).data().iter().map(|l| (l.exp() * step) as f32).collect()
    }

    fn check_input(&self, points: &[Point]) -> Result<()> {
        if points.len() < self.config.k_nn {
            return Err(Error::InvalidArgument(format!(
                "cloud has {} points, fewer than k_nn = {}",
                points.len(),
                self.config.k_nn
            )));
        }
        Ok(())
    }

    /// Encode, noise-proxy quantize and decode one cloud. Gradients reach
    /// every generator-side leaf bound in `p`.
    pub fn forward_train<'g>(&self, p: &Bound<'g>, points: &[Point], noise_seed: u64, select_seed: u64) -> Result<GenForward<'g>> {
        self.check_input(points)?;
        let cfg = &self.config;
        let enc = self.encoder.forward(p, &self.sampler, points, cfg.ratios, cfg.sampler, select_seed)?;
        let g = enc.y.graph();
        let (m, d) = enc.y.shape();
        let cstep = cfg.quantizer.coord_step;

        let coord_noise = noise_tensor(m, 3, 1.0, derive_seed(noise_seed, &[0]));
        let zc = enc.p3.map(|v| v / cstep).zip_map(&coord_noise, |a, b| a + b);
        let p3_noisy = g.constant(zc.map(|v| v * cstep));
        let zc = g.constant(zc);

        let scale = p.var(self.log_scale).exp().scale(cfg.quantizer.feature_step).broadcast_rows(m);
        let feat_noise = g.constant(noise_tensor(m, d, 1.0, derive_seed(noise_seed, &[1])));
        let zf = enc.y.div(scale).add(feat_noise);
        let f3 = zf.mul(scale);

        let rate = self
            .coord_model
            .bits(p, zc, Rc::new(vec![0; 3]))?
            .add(self.feature_model.bits(p, zf, Rc::new((0..d).collect()))?);
        let xhat = self.decoder.forward(p, p3_noisy, f3, points.len());
        Ok(GenForward { xhat, rate_bits: rate, m })
    }

    /// `J(x)` as a `1 x 1` var.
    pub fn critic_score<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Var<'g> {
        self.critic.forward(p, x)
    }

    /// Selection seed used outside training, so compression is a function of
    /// the cloud and the weights only.
    fn inference_seed(&self) -> u64 {
        derive_seed(self.config.seed, &[0x5E1EC7])
    }

    pub fn encode_latent(&self, cloud: &PointCloud) -> Result<QuantizedLatent> {
        let points = cloud.points();
        self.check_input(points)?;
        let cfg = &self.config;
        let g = Graph::new();
        let p = self.params.bind(&g, |_| false);
        let enc = self.encoder.forward(&p, &self.sampler, points, cfg.ratios, cfg.sampler, self.inference_seed())?;
        let limit = (1.0 / cfg.quantizer.coord_step).round() as i64;
        let coords = quantize(enc.p3.data(), cfg.quantizer.coord_step)
            .into_iter()
            .map(|q| q.clamp(-limit, limit))
            .collect();
        let scales = self.feature_scales();
        let d = scales.len();
        let y = enc.y.value();
        let features = y
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (v / f64::from(scales[i % d])).round_ties_even() as i64)
            .collect();
        Ok(QuantizedLatent {
            n: u32::try_from(points.len()).map_err(|_| Error::InvalidArgument("cloud too large".into()))?,
            ratios: cfg.ratios.map(|r| r as f32),
            coord_step: cfg.quantizer.coord_step as f32,
            feature_scales: scales,
            coords,
            features,
        })
    }

    pub fn coding_tables(&self) -> CodingTables {
        CodingTables::from_models(
            (&self.coord_model, self.params.get(self.coord_model.param)),
            (&self.feature_model, self.params.get(self.feature_model.param)),
        )
    }

    pub fn compress(&self, cloud: &PointCloud) -> Result<Bitstream> {
        let latent = self.encode_latent(cloud)?;
        encode_bitstream(&latent, &self.coding_tables(), self.generator_digest())
    }

    pub fn decode_latent(&self, latent: &QuantizedLatent) -> Result<PointCloud> {
        if latent.d() != self.config.latent_dim {
            return Err(Error::Shape(format!("latent has {} channels, model {}", latent.d(), self.config.latent_dim)));
        }
        if latent.m() == 0 {
            return Err(Error::Format("latent holds no points".into()));
        }
        if latent.ratios != self.config.ratios.map(|r| r as f32) {
            return Err(Error::Format(format!("stream ratios {:?} differ from the model's {:?}", latent.ratios, self.config.ratios)));
        }
        if latent.m() != self.latent_points(latent.n as usize) {
            return Err(Error::Format(format!("{} latent points cannot come from {} source points", latent.m(), latent.n)));
        }
        let g = Graph::new();
        let p = self.params.bind(&g, |_| false);
        let p3 = g.constant(latent.coords_tensor());
        let f3 = g.constant(latent.features_tensor());
        let x = self.decoder.forward(&p, p3, f3, latent.n as usize);
        PointCloud::new(x.value().to_points())
    }

    pub fn decompress(&self, bs: &Bitstream) -> Result<PointCloud> {
        let latent = decode_bitstream(bs, &self.coding_tables(), self.generator_digest())?;
        self.decode_latent(&latent)
    }
}
