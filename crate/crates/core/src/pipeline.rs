//! End-to-end evaluation: compress, decompress, measure; dataset averages
//! and the sampler ablation.

use serde::{Deserialize, Serialize};

use crate::cloud::PointCloud;
use crate::codec::Bitstream;
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, DEFAULT_NORMAL_K};
use crate::model::CodecModel;
use crate::nets::SamplerKind;
use crate::training::{fit, CheckpointMeta, TrainConfig, Trainer};

pub struct Evaluation {
    pub report: MetricReport,
    pub bitstream: Bitstream,
    pub reconstruction: PointCloud,
}

/// Compresses `cloud`, decodes the bytes back and scores the result.
pub fn evaluate_cloud(model: &CodecModel, cloud: &PointCloud) -> Result<Evaluation> {
    let bitstream = model.compress(cloud)?;
    let parsed = Bitstream::from_bytes(&bitstream.to_bytes())?;
    let reconstruction = model.decompress(&parsed)?;
    let report = MetricReport::evaluate(
        cloud,
        &reconstruction,
        bitstream.payload_bits(),
        bitstream.header_bits(),
        DEFAULT_NORMAL_K.min(cloud.len() - 1),
    )?;
    Ok(Evaluation {
        report,
        bitstream,
        reconstruction,
    })
}

/// Means of the per-cloud metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Score {
    pub bpp: f64,
    pub cd: f64,
    pub psnr_db: f64,
    pub clouds: usize,
}

pub fn evaluate_dataset(model: &CodecModel, clouds: &[PointCloud]) -> Result<Score> {
    if clouds.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let mut s = [0.0; 3];
    for c in clouds {
        let r = evaluate_cloud(model, c)?.report;
        s[0] += r.bpp;
        s[1] += r.cd;
        s[2] += r.psnr_db;
    }
    let k = clouds.len() as f64;
    Ok(Score {
        bpp: s[0] / k,
        cd: s[1] / k,
        psnr_db: s[2] / k,
        clouds: clouds.len(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub sampler: SamplerKind,
    pub score: Score,
    pub meta: CheckpointMeta,
}

/// Which of (Bpp lower, CD lower, PSNR higher) the learned sampler wins.
pub fn learned_wins(fps: &Score, learned: &Score) -> [bool; 3] {
    [learned.bpp < fps.bpp, learned.cd < fps.cd, learned.psnr_db > fps.psnr_db]
}

/// Trains and scores the same configuration once per sampler kind.
pub fn ablate(config: &TrainConfig, train: &[PointCloud], eval: &[PointCloud]) -> Result<[AblationRow; 2]> {
    let run = |kind: SamplerKind| -> Result<AblationRow> {
        let mut cfg = config.clone();
        cfg.model.sampler = kind;
        let mut trainer = Trainer::new(cfg)?;
        let meta = fit(&mut trainer, train, None)?;
        let score = evaluate_dataset(&trainer.model, eval)?;
        Ok(AblationRow { sampler: kind, score, meta })
    };
    Ok([run(SamplerKind::Fps)?, run(SamplerKind::Learned)?])
}
