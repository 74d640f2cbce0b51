use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dino_sd::attention::{AttentionMode, VIEW_COUNT};
use dino_sd::augment::{
    corrupt, preprocess_test, read_corruption_manifest, stack_images, CorruptionKind, CorruptionSpec, Image,
    PreprocessFlags, PreprocessOrder,
};
use dino_sd::checks::{gradient_suite, GRADIENT_TOLERANCE};
use dino_sd::data::{gen_dataset, read_dataset, write_dataset, SceneConfig};
use dino_sd::io::{dsd1, ppm};
use dino_sd::model::load_checkpoint;
use dino_sd::train::{evaluate_checkpoint, format_json_lines, format_table, train, Precision, TrainConfig};
use dino_sd::{Real, Tensor};

#[derive(Parser)]
#[command(name = "dino-sd", version, about = "Surround-view depth estimation on a six-camera ring")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a procedural multi-view dataset.
    GenData(GenData),
    /// Train a model and write checkpoints plus per-epoch metrics.
    Train(TrainArgs),
    /// Score a checkpoint; JSON lines on stdout, a table on stderr.
    Eval(EvalArgs),
    /// Apply one corruption to a PPM image.
    Corrupt(CorruptArgs),
    /// Run test-time restoration on a PPM image.
    Preprocess(PreprocessArgs),
    /// Predict depth for the six views of one scene.
    Infer(InferArgs),
    /// Finite-difference check of every registered op and loss.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Scene geometry as JSON (defaults otherwise).
    #[arg(long)]
    scene_config: Option<PathBuf>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Validation dataset; validation is skipped without it.
    #[arg(long)]
    val: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// TrainConfig JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    attention: Option<AttentionMode>,
    #[arg(long, value_parser = parse_precision)]
    precision: Option<Precision>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    encoder_lr: Option<f64>,
    #[arg(long)]
    decoder_lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    data_seed: Option<u64>,
}

#[derive(Args)]
struct RestoreFlags {
    #[arg(long)]
    denoise: bool,
    #[arg(long)]
    equalize: bool,
    /// Run equalisation before denoising.
    #[arg(long)]
    equalize_first: bool,
}

impl RestoreFlags {
    fn flags(&self) -> PreprocessFlags {
        let order = if self.equalize_first { PreprocessOrder::EqualizeFirst } else { PreprocessOrder::DenoiseFirst };
        PreprocessFlags { denoise: self.denoise, equalize: self.equalize, order }
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Overrides the mode stored in the checkpoint.
    #[arg(long)]
    attention: Option<AttentionMode>,
    #[command(flatten)]
    restore: RestoreFlags,
    /// Evaluate all four denoise/equalize combinations.
    #[arg(long, conflicts_with_all = ["denoise", "equalize"])]
    all_preprocess: bool,
    /// JSON list of corruptions; clean images when absent.
    #[arg(long)]
    corruptions: Option<PathBuf>,
    #[arg(long, value_parser = parse_precision, default_value = "f64")]
    precision: Precision,
}

#[derive(Args)]
struct CorruptArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    kind: CorruptionKind,
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=5))]
    severity: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    restore: RestoreFlags,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Six PPM views in ring order.
    #[arg(long, num_args = VIEW_COUNT, required = true)]
    views: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    attention: Option<AttentionMode>,
    #[command(flatten)]
    restore: RestoreFlags,
    #[arg(long, value_parser = parse_precision, default_value = "f64")]
    precision: Precision,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random inputs per check.
    #[arg(long, default_value_t = 10)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    match s {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(format!("expected f32 or f64, got {s:?}")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::GenData(a) => gen_data(a)?,
        Command::Train(a) => train_cmd(a)?,
        Command::Eval(a) => eval_cmd(a)?,
        Command::Corrupt(a) => {
            let img = read_image(&a.input)?;
            let spec = CorruptionSpec::new(a.kind, a.severity, a.seed)?;
            write_image(&a.output, &corrupt(&img, &spec))?;
        }
        Command::Preprocess(a) => {
            let img = read_image(&a.input)?;
            write_image(&a.output, &preprocess_test(&img, a.restore.flags()))?;
        }
        Command::Infer(a) => match a.precision {
            Precision::F32 => infer::<f32>(&a)?,
            Precision::F64 => infer::<f64>(&a)?,
        },
        Command::Gradcheck(a) => return gradcheck(a),
    }
    Ok(ExitCode::SUCCESS)
}

fn read_image(path: &Path) -> Result<Image> {
    Ok(Image::from_rgb_bytes(&ppm::read(path)?)?)
}

fn write_image(path: &Path, img: &Image) -> Result<()> {
    Ok(ppm::write(path, &img.to_rgb_bytes())?)
}

fn gen_data(a: GenData) -> Result<()> {
    let mut cfg = match &a.scene_config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => SceneConfig::default(),
    };
    cfg.view_height = a.height.unwrap_or(cfg.view_height);
    cfg.view_width = a.width.unwrap_or(cfg.view_width);
    let batches = gen_dataset(a.scenes, a.seed, &cfg)?;
    let index = write_dataset(&batches, &a.out)?;
    eprintln!("wrote {} scenes ({}x{}) to {}", index.scenes.len(), cfg.view_width, cfg.view_height, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => TrainConfig::from_json_file(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.attention {
        cfg.attention = v;
    }
    if let Some(v) = a.precision {
        cfg.precision = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if a.max_steps.is_some() {
        cfg.max_steps = a.max_steps;
    }
    if let Some(v) = a.encoder_lr {
        cfg.encoder_lr = v;
    }
    if let Some(v) = a.decoder_lr {
        cfg.decoder_lr = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.data_seed {
        cfg.data_seed = v;
    }
    let train_set = read_dataset(&a.data)?;
    let val_set = match &a.val {
        Some(p) => read_dataset(p)?,
        None => Vec::new(),
    };
    // The dataset fixes the view size.
    if let Some(b) = train_set.first() {
        cfg.model.encoder.image_height = b.height();
        cfg.model.encoder.image_width = b.width();
    }
    cfg.validate()?;
    let epochs = match cfg.precision {
        Precision::F32 => train::<f32>(&cfg, &train_set, &val_set, Some(&a.out))?.epochs,
        Precision::F64 => train::<f64>(&cfg, &train_set, &val_set, Some(&a.out))?.epochs,
    };
    for e in &epochs {
        match &e.val {
            Some(r) => eprintln!("epoch {}: loss {:.4}  val abs_rel {:.4}", e.epoch, e.mean_loss, r.abs_rel),
            None => eprintln!("epoch {}: loss {:.4}", e.epoch, e.mean_loss),
        }
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> Result<()> {
    let data = read_dataset(&a.data)?;
    let corruptions = match &a.corruptions {
        Some(p) => read_corruption_manifest(p)?,
        None => Vec::new(),
    };
    let flags: Vec<PreprocessFlags> = if a.all_preprocess {
        let order = a.restore.flags().order;
        [(false, false), (true, false), (false, true), (true, true)]
            .into_iter()
            .map(|(denoise, equalize)| PreprocessFlags { denoise, equalize, order })
            .collect()
    } else {
        vec![a.restore.flags()]
    };
    let rows = match a.precision {
        Precision::F32 => evaluate_checkpoint::<f32>(&a.checkpoint, &data, &corruptions, &flags, a.attention)?,
        Precision::F64 => evaluate_checkpoint::<f64>(&a.checkpoint, &data, &corruptions, &flags, a.attention)?,
    };
    print!("{}", format_json_lines(&rows));
    eprint!("{}", format_table(&rows));
    Ok(())
}

fn infer<T: Real>(a: &InferArgs) -> Result<()> {
    let (model, manifest) = load_checkpoint::<T>(&a.checkpoint)?;
    let mode = a.attention.or(manifest.attention).unwrap_or(AttentionMode::None);
    let flags = a.restore.flags();
    let views = a
        .views
        .iter()
        .map(|p| Ok(preprocess_test(&read_image(p)?, flags)))
        .collect::<Result<Vec<_>>>()?;
    let depth = model.predict(&stack_images::<T>(&views)?, mode)?;
    let (h, w) = (depth.shape()[2], depth.shape()[3]);
    let range = model.config().range;
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (v, plane) in depth.data().chunks(h * w).enumerate() {
        dsd1::write(a.out.join(format!("view_{v}.dsd1")), &Tensor::new(vec![1, h, w], plane.to_vec())?)?;
        // Log scale over the head's range, near is bright.
        let (lo, hi) = (range.d_min.ln(), range.d_max.ln());
        let pixels = plane
            .iter()
            .flat_map(|d| {
                let g = (255.0 * (hi - d.as_f64().ln()) / (hi - lo)).round().clamp(0.0, 255.0) as u8;
                [g; 3]
            })
            .collect();
        ppm::write(a.out.join(format!("view_{v}.ppm")), &ppm::RgbBytes { width: w, height: h, pixels })?;
    }
    eprintln!("wrote {} depth maps to {}", depth.shape()[0], a.out.display());
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    if a.draws == 0 {
        bail!("--draws must be positive");
    }
    let reports = gradient_suite(a.draws, a.seed)?;
    for r in &reports {
        println!(
            "{} {:<24} inputs {:>3}  max rel error {:.3e}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.inputs,
            r.max_rel_error
        );
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    eprintln!("{} of {} checks pass at tolerance {GRADIENT_TOLERANCE:e}", reports.len() - failed, reports.len());
    Ok(if failed == 0 { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
