mod dataset;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::bail;
use clap::{Args, Parser, Subcommand, ValueEnum};
use cotp_core::codec::Bitstream;
use cotp_core::cloud::{load_cloud, write_cloud, SurfaceKind};
use cotp_core::losses::LossWeights;
use cotp_core::metrics::{MetricReport, DEFAULT_NORMAL_K};
use cotp_core::model::ModelConfig;
use cotp_core::nets::SamplerKind;
use cotp_core::pipeline::{evaluate_cloud, evaluate_dataset, learned_wins, Score};
use cotp_core::rd::{curves, plot_svg, read_rd_csv, write_rd_csv, RdRecord};
use cotp_core::training::{fit_with_progress, lambda_dir, load_model, TrainConfig, Trainer, FINAL_CHECKPOINT};
use cotp_core::Error;

#[derive(Parser)]
#[command(name = "cotp", version, about = "Learned point-cloud geometry codec")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a block dataset from synthetic surfaces or point-cloud scenes.
    Prepare(PrepareArgs),
    /// Train one model, or one per --lambda value.
    Train(TrainArgs),
    /// Encode a cloud file into a .cotp bitstream.
    Compress(CompressArgs),
    /// Decode a .cotp bitstream into a cloud file.
    Decompress(DecompressArgs),
    /// Score a checkpoint on a dataset, or a reconstruction against a reference.
    Evaluate(EvaluateArgs),
    /// Merge RD rows from CSV files and checkpoints into one CSV.
    RdCurve(RdCurveArgs),
    /// Draw CD-vs-Bpp and PSNR-vs-Bpp curves as SVG.
    Plot(PlotArgs),
    /// Train twin models that differ only in the sampler and compare them.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SamplerArg {
    Learned,
    Fps,
}

impl From<SamplerArg> for SamplerKind {
    fn from(s: SamplerArg) -> Self {
        match s {
            SamplerArg::Learned => SamplerKind::Learned,
            SamplerArg::Fps => SamplerKind::Fps,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ShapeArg {
    Sphere,
    Box,
    Torus,
    RidgedPlane,
}

impl From<ShapeArg> for SurfaceKind {
    fn from(s: ShapeArg) -> Self {
        match s {
            ShapeArg::Sphere => SurfaceKind::Sphere,
            ShapeArg::Box => SurfaceKind::Box,
            ShapeArg::Torus => SurfaceKind::Torus,
            ShapeArg::RidgedPlane => SurfaceKind::RidgedPlane,
        }
    }
}

#[derive(Args)]
struct PrepareArgs {
    /// Synthetic surface families, comma separated.
    #[arg(long, value_enum, value_delimiter = ',', conflicts_with = "source")]
    synthetic: Vec<ShapeArg>,
    /// Scene files (.xyz or .ply) to partition into blocks.
    #[arg(long, num_args = 1..)]
    source: Vec<PathBuf>,
    #[arg(long, default_value_t = 64)]
    blocks_per_shape: usize,
    /// Points per block.
    #[arg(long, default_value_t = 1024)]
    points: usize,
    #[arg(long, default_value_t = 0.5)]
    nonuniformity: f64,
    #[arg(long, default_value_t = 100.0)]
    cube_edge: f64,
    #[arg(long, default_value_t = 12.0)]
    block_edge: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Clone)]
struct TrainFlags {
    #[arg(long, default_value_t = 100.0)]
    beta: f64,
    #[arg(long, default_value_t = 0.001)]
    gamma: f64,
    /// Per-stage sampling ratios: one value for all stages or three, comma
    /// separated. Fractions like 1/3 are accepted.
    #[arg(long, value_delimiter = ',', value_parser = parse_ratio, default_values_t = [0.5, 0.5, 0.5])]
    ratios: Vec<f64>,
    #[arg(long, default_value_t = 50)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    #[arg(long, default_value_t = 1e-3)]
    entropy_lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, value_enum, default_value_t = SamplerArg::Learned)]
    sampler: SamplerArg,
    #[arg(long, default_value_t = 16)]
    k_nn: usize,
    #[arg(long, default_value_t = 8)]
    latent_dim: usize,
    /// Stop after this many steps in total.
    #[arg(long)]
    max_steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
}

impl TrainFlags {
    fn config(&self, lambda: f64) -> anyhow::Result<TrainConfig> {
        let ratios: [f64; 3] = match self.ratios[..] {
            [r] => [r; 3],
            [a, b, c] => [a, b, c],
            _ => return Err(Error::InvalidArgument("--ratios takes one value or three".into()).into()),
        };
        let cfg = TrainConfig {
            model: ModelConfig {
                ratios,
                latent_dim: self.latent_dim,
                k_nn: self.k_nn,
                sampler: self.sampler.into(),
                seed: self.seed,
                ..ModelConfig::default()
            },
            weights: LossWeights {
                beta: self.beta,
                gamma: self.gamma,
                lambda,
            },
            epochs: self.epochs,
            learning_rate: self.lr,
            entropy_learning_rate: self.entropy_lr,
            batch_size: self.batch_size,
            checkpoint_every: self.checkpoint_every,
            max_steps: self.max_steps,
            ..TrainConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Rate weight; repeat for a sweep (one run directory per value).
    #[arg(long, default_values_t = [0.1])]
    lambda: Vec<f64>,
    /// Continue from this checkpoint instead of starting fresh.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[command(flatten)]
    flags: TrainFlags,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DecompressArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, requires = "dataset")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Model name written to the RD row.
    #[arg(long, default_value = "cotp")]
    model: String,
    /// Reference cloud, for scoring an existing reconstruction.
    #[arg(long, conflicts_with = "checkpoint", requires = "reconstruction")]
    reference: Option<PathBuf>,
    #[arg(long)]
    reconstruction: Option<PathBuf>,
    /// Bitstream whose payload sets the Bpp of a reference/reconstruction pair.
    #[arg(long)]
    bitstream: Option<PathBuf>,
    /// RD CSV to write (checkpoint mode).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RdCurveArgs {
    /// RD CSV files to merge.
    #[arg(long)]
    csv: Vec<PathBuf>,
    /// Checkpoints to evaluate on --dataset.
    #[arg(long, requires = "dataset")]
    checkpoint: Vec<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "cotp")]
    model: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PlotArgs {
    #[arg(long)]
    csv: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    dataset: PathBuf,
    /// Held-out clouds for scoring; the training set is used when absent.
    #[arg(long)]
    eval_dataset: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[command(flatten)]
    flags: TrainFlags,
}

fn parse_ratio(s: &str) -> Result<f64, String> {
    let v = match s.split_once('/') {
        Some((a, b)) => {
            let a: f64 = a.trim().parse().map_err(|e| format!("{e}"))?;
            let b: f64 = b.trim().parse().map_err(|e| format!("{e}"))?;
            a / b
        }
        None => s.trim().parse().map_err(|e| format!("{e}"))?,
    };
    if v > 0.0 && v <= 1.0 {
        Ok(v)
    } else {
        Err(format!("ratio {s} outside (0, 1]"))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::InvalidArgument(_)) => 2,
        Some(Error::DigestMismatch { .. }) => 4,
        Some(Error::Diverged(_)) => 5,
        _ => 3,
    }
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Prepare(a) => prepare(a),
        Command::Train(a) => train(a),
        Command::Compress(a) => compress(a),
        Command::Decompress(a) => decompress(a),
        Command::Evaluate(a) => evaluate(a),
        Command::RdCurve(a) => rd_curve(a),
        Command::Plot(a) => plot(a),
        Command::Ablate(a) => ablate(a),
    }
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn prepare(a: PrepareArgs) -> anyhow::Result<()> {
    let source = if !a.source.is_empty() {
        cotp_core::cloud::DataSource::Files(a.source)
    } else if !a.synthetic.is_empty() {
        cotp_core::cloud::DataSource::Synthetic {
            shapes: a.synthetic.into_iter().map(Into::into).collect(),
            blocks_per_shape: a.blocks_per_shape,
        }
    } else {
        return Err(Error::InvalidArgument("give --synthetic shapes or --source files".into()).into());
    };
    let spec = cotp_core::cloud::DatasetSpec {
        source,
        cube_edge: a.cube_edge,
        block_edge: a.block_edge,
        points_per_block: a.points,
        nonuniformity: a.nonuniformity,
        seed: a.seed,
    };
    let manifest = dataset::prepare(&spec, &a.out)?;
    print_json(&manifest.summary())
}

fn progress_printer(label: String, total: u64) -> impl FnMut(u64, Option<&cotp_core::losses::LossBreakdown>) {
    let every = (total / 20).max(1);
    move |step, b| {
        if (step + 1) % every == 0 || step + 1 == total {
            match b {
                Some(b) => eprintln!(
                    "{label} step {}/{total}: cost {:.5} d_wass {:.5} l_otr {:.4} bpp {:.3}",
                    step + 1,
                    b.cost_c,
                    b.d_wass,
                    b.l_otr,
                    b.rate_bpp
                ),
                None => eprintln!("{label} step {}/{total}: rolled back (non-finite)", step + 1),
            }
        }
    }
}

fn total_steps(cfg: &TrainConfig, dataset_len: usize) -> u64 {
    let all = cfg.epochs as u64 * cotp_core::training::steps_per_epoch(dataset_len, cfg.batch_size);
    cfg.max_steps.map_or(all, |m| m.min(all))
}

fn train(a: TrainArgs) -> anyhow::Result<()> {
    let data = dataset::load(&a.dataset)?;
    let mut lambdas = a.lambda.clone();
    lambdas.sort_by(f64::total_cmp);
    if lambdas.windows(2).any(|w| w[0] == w[1]) || lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument("--lambda values must be distinct, finite and non-negative".into()).into());
    }
    if a.checkpoint.is_some() && lambdas.len() > 1 {
        return Err(Error::InvalidArgument("--checkpoint resumes a single run".into()).into());
    }
    let mut metas = Vec::new();
    for &lambda in &lambdas {
        let mut trainer = match &a.checkpoint {
            Some(path) => {
                let (mut t, _) = Trainer::load(path)?;
                t.config.epochs = a.flags.epochs;
                t.config.max_steps = a.flags.max_steps;
                t
            }
            None => Trainer::new(a.flags.config(lambda)?)?,
        };
        let dir = if lambdas.len() > 1 { a.out.join(lambda_dir(lambda)) } else { a.out.clone() };
        let total = total_steps(&trainer.config, data.len());
        let label = format!("lambda {}", trainer.config.weights.lambda);
        let meta = fit_with_progress(&mut trainer, &data, Some(&dir), progress_printer(label, total))?;
        metas.push(meta);
    }
    print_json(&metas)
}

fn compress(a: CompressArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let cloud = load_cloud(&a.input)?;
    let ev = evaluate_cloud(&model, &cloud)?;
    let bytes = ev.bitstream.to_bytes();
    std::fs::write(&a.out, &bytes).map_err(|e| Error::io(&a.out, e))?;
    print_json(&ev.report)
}

fn decompress(a: DecompressArgs) -> anyhow::Result<()> {
    let model = load_model(&a.checkpoint)?;
    let bytes = std::fs::read(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let bs = Bitstream::from_bytes(&bytes)?;
    let cloud = model.decompress(&bs)?;
    write_cloud(&a.out, &cloud)?;
    eprintln!("wrote {} points to {}", cloud.len(), a.out.display());
    Ok(())
}

fn rd_row(model: &str, checkpoint: &Path, data: &[cotp_core::PointCloud]) -> anyhow::Result<RdRecord> {
    let m = load_model(checkpoint)?;
    let cfg = cotp_core::training::checkpoint_config(checkpoint)?;
    let s: Score = evaluate_dataset(&m, data)?;
    Ok(RdRecord {
        model: model.to_string(),
        lambda: cfg.weights.lambda,
        bpp: s.bpp,
        cd_e3: s.cd * 1e3,
        psnr_db: s.psnr_db,
    })
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    if let (Some(reference), Some(rec)) = (&a.reference, &a.reconstruction) {
        let source = load_cloud(reference)?;
        let recon = load_cloud(rec)?;
        let (payload, header) = match &a.bitstream {
            Some(p) => {
                let bs = Bitstream::from_bytes(&std::fs::read(p).map_err(|e| Error::io(p, e))?)?;
                (bs.payload_bits(), bs.header_bits())
            }
            None => (0, 0),
        };
        let k = DEFAULT_NORMAL_K.min(source.len().saturating_sub(1)).max(1);
        return print_json(&MetricReport::evaluate(&source, &recon, payload, header, k)?);
    }
    let (Some(ckpt), Some(ds)) = (&a.checkpoint, &a.dataset) else {
        return Err(Error::InvalidArgument("give --checkpoint with --dataset, or --reference with --reconstruction".into()).into());
    };
    let data = dataset::load(ds)?;
    let row = rd_row(&a.model, ckpt, &data)?;
    if let Some(out) = &a.out {
        write_rd_csv(out, std::slice::from_ref(&row))?;
    }
    print_json(&row)
}

fn rd_curve(a: RdCurveArgs) -> anyhow::Result<()> {
    let mut rows = Vec::new();
    for p in &a.csv {
        rows.extend(read_rd_csv(p)?);
    }
    if !a.checkpoint.is_empty() {
        let data = dataset::load(a.dataset.as_ref().expect("clap requires --dataset"))?;
        for c in &a.checkpoint {
            rows.push(rd_row(&a.model, c, &data)?);
        }
    }
    if rows.is_empty() {
        bail!(Error::InvalidArgument("no RD rows: give --csv files or --checkpoint runs".into()));
    }
    rows.sort_by(|x, y| x.model.cmp(&y.model).then(x.lambda.total_cmp(&y.lambda)));
    write_rd_csv(&a.out, &rows)?;
    for (model, pts) in curves(&rows)? {
        eprintln!("{model}: {} points", pts.len());
    }
    print_json(&rows)
}

fn plot(a: PlotArgs) -> anyhow::Result<()> {
    let rows = read_rd_csv(&a.csv)?;
    let svg = plot_svg(&rows)?;
    std::fs::write(&a.out, svg).map_err(|e| Error::io(&a.out, e))?;
    eprintln!("wrote {}", a.out.display());
    Ok(())
}

#[derive(serde::Serialize)]
struct AblationRow {
    sampler: &'static str,
    bpp: f64,
    cd_e3: f64,
    psnr_db: f64,
    checkpoint: PathBuf,
}

fn ablate(a: AblateArgs) -> anyhow::Result<()> {
    let train = dataset::load(&a.dataset)?;
    let eval = match &a.eval_dataset {
        Some(p) => dataset::load(p)?,
        None => train.clone(),
    };
    let mut rows = Vec::new();
    let mut scores = Vec::new();
    for (name, kind) in [("fps", SamplerArg::Fps), ("sampler", SamplerArg::Learned)] {
        let mut flags = a.flags.clone();
        flags.sampler = kind;
        let mut trainer = Trainer::new(flags.config(a.lambda)?)?;
        let dir = a.out.join(name);
        let total = total_steps(&trainer.config, train.len());
        fit_with_progress(&mut trainer, &train, Some(&dir), progress_printer(name.to_string(), total))?;
        let s = evaluate_dataset(&trainer.model, &eval)?;
        rows.push(AblationRow {
            sampler: name,
            bpp: s.bpp,
            cd_e3: s.cd * 1e3,
            psnr_db: s.psnr_db,
            checkpoint: dir.join(FINAL_CHECKPOINT),
        });
        scores.push(s);
    }
    println!("{:<8} {:>10} {:>10} {:>10}", "", "Bpp", "CDx1e3", "PSNR");
    for r in &rows {
        println!("{:<8} {:>10.4} {:>10.4} {:>10.3}", r.sampler, r.bpp, r.cd_e3, r.psnr_db);
    }
    let wins = learned_wins(&scores[0], &scores[1]);
    let n = wins.iter().filter(|w| **w).count();
    println!("learned sampler better on {n} of 3 columns (Bpp {}, CD {}, PSNR {})", mark(wins[0]), mark(wins[1]), mark(wins[2]));
    let path = a.out.join("ablation.json");
    std::fs::create_dir_all(&a.out).map_err(|e| Error::io(&a.out, e))?;
    std::fs::write(&path, serde_json::to_vec_pretty(&rows)?).map_err(|e| Error::io(&path, e))?;
    Ok(())
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}
