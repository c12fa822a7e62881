use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use serde::Serialize;

use pixocr::analysis::{emit_scatter, extract_features, features_csv, project_2d, scatter_inputs, separation};
use pixocr::codec::{decode_segmentation, decode_tamper, encode_target, TaskLabel};
use pixocr::imageops::{mask_to_visible, read_rgb, to_rgb32f, to_rgb8, write_png};
use pixocr::losses::{ConvStack, FeatureExtractor};
use pixocr::metrics::{evaluate_dataset, ImageEmbedder, PredictionIndex, PredictionSource, StackEmbedder, PREDICTIONS_FILE};
use pixocr::synthdata::{generate, read_manifest, write_dataset, GeneratorConfig};
use pixocr::train::{load_model, train_loop, TrainConfig, TrainData};
use pixocr::{Error, Result, TaskId};

#[derive(Parser)]
#[command(name = "pixocr", version, about = "Unified pixel-level OCR: text removal, segmentation and tamper detection")]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Run a trained model on images and write decoded outputs.
    Infer(InferArgs),
    /// Score predictions against a dataset.
    Eval(EvalArgs),
    /// Export pooled prompt features, a separation report and a scatter plot.
    InspectPrompts(InspectArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum TaskArg {
    Removal,
    Segmentation,
    Tamper,
    All,
}

impl TaskArg {
    fn tasks(self) -> Vec<TaskId> {
        match self {
            TaskArg::Removal => vec![TaskId::Removal],
            TaskArg::Segmentation => vec![TaskId::Segmentation],
            TaskArg::Tamper => vec![TaskId::Tamper],
            TaskArg::All => TaskId::ALL.to_vec(),
        }
    }

    fn single(self) -> Result<TaskId> {
        match self {
            TaskArg::All => Err(Error::Config("this command needs a single task".into())),
            t => Ok(t.tasks()[0]),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum PresetArg {
    Toy,
    Small,
}

impl PresetArg {
    fn name(self) -> &'static str {
        match self {
            PresetArg::Toy => "toy",
            PresetArg::Small => "small",
        }
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, value_enum, default_value = "all")]
    task: TaskArg,
    /// Samples per task.
    #[arg(long, default_value_t = 8)]
    count: u64,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Generator config JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    image_size: Option<u32>,
    #[arg(long)]
    tamper_fraction: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training config JSON; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory; may be repeated.
    #[arg(long, required = true)]
    data: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides total_iters.
    #[arg(long)]
    iters: Option<usize>,
    /// Overrides lr_step.
    #[arg(long)]
    lr_step: Option<usize>,
    /// Feature network for the perceptual loss: `default` or a VGG-16 safetensors file.
    #[arg(long, default_value = "default")]
    extractor: String,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Dataset directory whose inputs are processed.
    #[arg(long, conflicts_with = "input")]
    data: Option<PathBuf>,
    /// A PNG file or a directory of PNG files.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Directory of predictions written by `infer`.
    #[arg(long, conflicts_with = "ckpt")]
    pred: Option<PathBuf>,
    /// Evaluate a checkpoint directly instead of stored predictions.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Ground-truth dataset directory.
    #[arg(long)]
    gt: PathBuf,
    /// FID embedder: `default` or a VGG-16 safetensors file.
    #[arg(long, default_value = "default")]
    embedder: String,
    /// Directory for report.json and per_image.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Use at most this many samples.
    #[arg(long)]
    count: Option<usize>,
}

fn echo_config<T: Serialize>(command: &str, value: &T) -> Result<()> {
    let json = serde_json::json!({ "command": command, "config": value });
    println!("{}", serde_json::to_string(&json)?);
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg: GeneratorConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => GeneratorConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.image_size {
        cfg.image_size = s;
    }
    if let Some(f) = a.tamper_fraction {
        cfg.tamper_fraction = f;
    }
    cfg.validate()?;
    echo_config(
        "gen-data",
        &serde_json::json!({ "generator": cfg, "tasks": a.task.tasks(), "count": a.count, "out": a.out }),
    )?;
    let samples = generate(&cfg, &a.task.tasks(), a.count)?;
    let manifest = write_dataset(&samples, &a.out, Some(&cfg))?;
    info!("wrote {} samples to {}", manifest.records.len(), a.out.display());
    Ok(())
}

fn extractor_from(spec: &str) -> Result<ConvStack> {
    match spec {
        "default" => ConvStack::default_stack(candle::DType::F32),
        path => ConvStack::load_vgg16(Path::new(path), candle::DType::F32),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(p) = a.preset {
        cfg.preset = p.name().into();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.iters {
        cfg.total_iters = n;
    }
    if let Some(n) = a.lr_step {
        cfg.lr_step = n;
    }
    cfg.validate()?;
    echo_config(
        "train",
        &serde_json::json!({ "train": cfg, "data": a.data, "out": a.out, "resume": a.resume, "extractor": a.extractor }),
    )?;
    create_dir(&a.out)?;
    write_text(&a.out.join("train_config.json"), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;
    let extractor = extractor_from(&a.extractor)?;
    let data = TrainData::load(&a.data, cfg.image_size)?;
    let summary = train_loop(&cfg, &data, &a.out, a.resume.as_deref(), &extractor as &dyn FeatureExtractor)?;
    info!(
        "finished {} iterations; checkpoint {}",
        summary.state.iter,
        summary.final_checkpoint.display()
    );
    Ok(())
}

/// `(id, path)` pairs of the images to process.
fn infer_inputs(a: &InferArgs, task: TaskId) -> Result<Vec<(String, PathBuf)>> {
    if let Some(dir) = &a.data {
        let manifest = read_manifest(dir)?;
        return Ok(manifest
            .records
            .iter()
            .filter(|r| r.task == task)
            .map(|r| (r.id.clone(), dir.join(&r.input)))
            .collect());
    }
    let Some(input) = &a.input else {
        return Err(Error::Config("give --data or --input".into()));
    };
    let stem = |p: &Path| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    if input.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(input)
            .map_err(|source| Error::Io {
                path: input.clone(),
                source,
            })?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
            .collect();
        files.sort();
        Ok(files.into_iter().map(|p| (stem(&p), p)).collect())
    } else {
        Ok(vec![(stem(input), input.clone())])
    }
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let task = a.task.single()?;
    echo_config(
        "infer",
        &serde_json::json!({ "ckpt": a.ckpt, "task": task, "data": a.data, "input": a.input, "out": a.out }),
    )?;
    let (model, _, _) = load_model(&a.ckpt, candle::DType::F32)?;
    let inputs = infer_inputs(&a, task)?;
    create_dir(&a.out)?;
    let mut ids = Vec::new();
    for (id, path) in inputs {
        let img = to_rgb32f(&read_rgb(&path)?);
        let pred = model.infer(&img, task)?;
        let out = a.out.join(format!("{id}.png"));
        match task {
            TaskId::Removal => write_png(&to_rgb8(&pred), &out)?,
            TaskId::Segmentation => write_png(&mask_to_visible(&decode_segmentation(&pred)), &out)?,
            TaskId::Tamper => write_png(&encode_target(&TaskLabel::Tamper(decode_tamper(&pred)))?, &out)?,
        }
        ids.push(id);
    }
    let index = PredictionIndex { task, ids };
    write_text(&a.out.join(PREDICTIONS_FILE), &(serde_json::to_string_pretty(&index)? + "\n"))?;
    info!("wrote {} predictions to {}", index.ids.len(), a.out.display());
    Ok(())
}

fn embedder_from(spec: &str) -> Result<StackEmbedder> {
    match spec {
        "default" => StackEmbedder::default_embedder(),
        path => StackEmbedder::from_vgg16(Path::new(path)),
    }
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let task = a.task.single()?;
    echo_config(
        "eval",
        &serde_json::json!({ "task": task, "pred": a.pred, "ckpt": a.ckpt, "gt": a.gt, "embedder": a.embedder, "out": a.out }),
    )?;
    let embedder = embedder_from(&a.embedder)?;
    let model;
    let source = match (&a.pred, &a.ckpt) {
        (Some(p), None) => PredictionSource::Dir(p.clone()),
        (None, Some(c)) => {
            model = load_model(c, candle::DType::F32)?.0;
            PredictionSource::Model(&model)
        }
        _ => return Err(Error::Config("give exactly one of --pred or --ckpt".into())),
    };
    let report = evaluate_dataset(&source, &a.gt, task, Some(&embedder as &dyn ImageEmbedder))?;
    print!("{}", report.table());
    if let Some(out) = &a.out {
        create_dir(out)?;
        write_text(&out.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
        write_text(&out.join("per_image.csv"), &report.per_image_csv())?;
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    echo_config(
        "inspect-prompts",
        &serde_json::json!({ "ckpt": a.ckpt, "data": a.data, "out": a.out, "count": a.count }),
    )?;
    let (model, meta, _) = load_model(&a.ckpt, candle::DType::F32)?;
    let trained_iters = meta.state.as_ref().map_or(0, |s| s.iter);
    if trained_iters == 0 {
        log::warn!("checkpoint has no training progress; features come from an untrained model");
    }
    let manifest = read_manifest(&a.data)?;
    let limit = a.count.unwrap_or(usize::MAX);
    let mut samples = Vec::new();
    for r in manifest.records.iter().take(limit) {
        samples.push((r.id.clone(), to_rgb32f(&read_rgb(&a.data.join(&r.input))?)));
    }
    let records = extract_features(&model, &samples, &TaskId::ALL)?;
    create_dir(&a.out)?;
    write_text(&a.out.join("features.csv"), &features_csv(&records))?;
    let sep = separation(&records)?;
    let (rows, labels) = scatter_inputs(&records);
    let proj = project_2d(&rows)?;
    let report = serde_json::json!({
        "trained_iterations": trained_iters,
        "untrained": trained_iters == 0,
        "records": records.len(),
        "separation": sep,
        "projection_variance": proj.variance,
        "projection_warning": proj.warning,
    });
    write_text(&a.out.join("separation.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    emit_scatter(&proj.points, &labels, &a.out.join("scatter.png"))?;
    emit_scatter(&proj.points, &labels, &a.out.join("scatter.svg"))?;
    println!(
        "intra {:.6}  inter {:.6}  ratio {:.4}",
        sep.intra, sep.inter, sep.ratio
    );
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    if e.is_usage_error() {
        1
    } else if e.is_data_error() {
        2
    } else {
        3
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectPrompts(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
