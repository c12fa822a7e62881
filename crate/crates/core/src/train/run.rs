use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle::{DType, Tensor};
use image::{GrayImage, Rgb32FImage};
use serde::{Deserialize, Serialize};

use super::{build_batch, lr_at, AdamW, TrainConfig};
use crate::checkpoint;
use crate::imageops::to_rgb32f;
use crate::losses::{total_loss, FeatureExtractor, LossBreakdown, LossTargets};
use crate::model::Model;
use crate::synthdata::{read_dataset, TaskSample};
use crate::{Error, ModelConfig, Result, TaskId};

pub const CHECKPOINT_FORMAT: u32 = 1;
const EMA_DECAY: f64 = 0.98;

/// Training progress. The data order is a pure function of the seed and the
/// iteration, so these fields fully determine how a run continues.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    /// Completed iterations.
    pub iter: usize,
    /// Learning rate of the last completed iteration.
    pub lr: f64,
    pub seed: u64,
    /// Exponential moving average of each task's total loss.
    pub loss_ema: [Option<f64>; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: u32,
    pub model: ModelConfig,
    #[serde(default)]
    pub train: Option<TrainConfig>,
    #[serde(default)]
    pub state: Option<ScheduleState>,
}

/// Name-level outcome of loading a checkpoint into a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// Model parameters absent from the checkpoint; they keep their
    /// initialization.
    pub missing: Vec<String>,
    /// Checkpoint tensors with no matching parameter.
    pub unexpected: Vec<String>,
}

fn is_optimizer_tensor(name: &str) -> bool {
    name.starts_with("optim.")
}

/// Copies matching tensors into the model. Any shape mismatch is an error
/// listing every offending tensor; with `strict`, so are missing or
/// unexpected names.
pub fn load_params(model: &Model, tensors: &BTreeMap<String, Tensor>, strict: bool) -> Result<LoadReport> {
    let mut report = LoadReport::default();
    let mut bad_shapes = Vec::new();
    for (name, var) in model.params().iter() {
        match tensors.get(name) {
            Some(t) if t.dims() != var.dims() => {
                bad_shapes.push(format!("{name}: model {:?}, checkpoint {:?}", var.dims(), t.dims()))
            }
            Some(_) => report.loaded.push(name.to_string()),
            None => report.missing.push(name.to_string()),
        }
    }
    report.unexpected = tensors
        .keys()
        .filter(|k| !is_optimizer_tensor(k) && model.params().get(k).is_none())
        .cloned()
        .collect();
    if !bad_shapes.is_empty() {
        return Err(Error::ParamMismatch(format!("shape mismatch: {}", bad_shapes.join("; "))));
    }
    if strict && !(report.missing.is_empty() && report.unexpected.is_empty()) {
        return Err(Error::ParamMismatch(format!(
            "missing {:?}, unexpected {:?}",
            report.missing, report.unexpected
        )));
    }
    for name in &report.loaded {
        model.params().set(name, &tensors[name])?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitSource {
    Random { seed: u64 },
    Checkpoint(PathBuf),
}

/// Builds a model from a random initialization or a (possibly partial)
/// checkpoint. Parameters missing from the checkpoint keep a seed-0 random
/// initialization and are listed in the report.
pub fn init_weights(config: &ModelConfig, source: &InitSource, dtype: DType) -> Result<(Model, LoadReport)> {
    match source {
        InitSource::Random { seed } => {
            let model = Model::new(config.clone(), *seed, dtype)?;
            let report = LoadReport {
                missing: model.params().names().map(String::from).collect(),
                ..Default::default()
            };
            Ok((model, report))
        }
        InitSource::Checkpoint(path) => {
            let model = Model::new(config.clone(), 0, dtype)?;
            let ckpt = checkpoint::load::<serde_json::Value>(path)?;
            let report = load_params(&model, &ckpt.tensors, false)?;
            Ok((model, report))
        }
    }
}

pub fn save_model(path: &Path, model: &Model, optimizer: Option<&AdamW>, meta: &CheckpointMeta) -> Result<()> {
    let mut tensors: BTreeMap<String, Tensor> = model
        .params()
        .iter()
        .map(|(k, v)| (k.to_string(), v.as_tensor().clone()))
        .collect();
    if let Some(opt) = optimizer {
        tensors.extend(opt.state_tensors());
    }
    checkpoint::save(path, &tensors, meta)
}

/// Rebuilds the model described by a checkpoint and loads it strictly.
pub fn load_model(path: &Path, dtype: DType) -> Result<(Model, CheckpointMeta, BTreeMap<String, Tensor>)> {
    let ckpt = checkpoint::load::<CheckpointMeta>(path)?;
    if ckpt.meta.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            msg: format!("unsupported format {}", ckpt.meta.format),
        });
    }
    let model = Model::zeroed(ckpt.meta.model.clone(), dtype)?;
    load_params(&model, &ckpt.tensors, true).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok((model, ckpt.meta, ckpt.tensors))
}

/// One sample converted for training.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub input: Rgb32FImage,
    pub target: Rgb32FImage,
    pub mask: Option<GrayImage>,
}

/// Training samples grouped by task.
#[derive(Debug, Clone, Default)]
pub struct TrainData {
    pub tasks: [Vec<PreparedSample>; 3],
}

impl TrainData {
    pub fn from_samples(samples: &[TaskSample], image_size: u32) -> Result<Self> {
        let mut data = TrainData::default();
        for s in samples {
            let (w, h) = s.input.dimensions();
            if (w, h) != (image_size, image_size) {
                return Err(Error::record(
                    &s.id,
                    format!("image is {w}x{h}, training expects {image_size}x{image_size}"),
                ));
            }
            if s.task == TaskId::Removal && s.mask.is_none() {
                return Err(Error::record(&s.id, "removal sample without box mask"));
            }
            data.tasks[s.task.index()].push(PreparedSample {
                id: s.id.clone(),
                input: to_rgb32f(&s.input),
                target: to_rgb32f(&s.target),
                mask: s.mask.clone(),
            });
        }
        Ok(data)
    }

    pub fn load(dirs: &[PathBuf], image_size: u32) -> Result<Self> {
        let mut all = Vec::new();
        for d in dirs {
            all.extend(read_dataset(d)?.1);
        }
        Self::from_samples(&all, image_size)
    }

    pub fn lens(&self) -> [usize; 3] {
        [self.tasks[0].len(), self.tasks[1].len(), self.tasks[2].len()]
    }
}

/// One JSON line of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub step: usize,
    pub task: TaskId,
    pub l_pix: f64,
    pub l_per: Option<f64>,
    pub l_sty: Option<f64>,
    pub l_total: f64,
}

#[derive(Debug, Clone)]
pub struct StepOutcome {
    pub lr: f64,
    /// Batch loss: mean of the per-sample totals.
    pub loss: f64,
    /// Per-task mean losses, in task order.
    pub tasks: Vec<(TaskId, LossBreakdown)>,
}

fn grad_norm_dump(model: &Model, grads: &candle::backprop::GradStore) -> BTreeMap<String, f64> {
    let mut groups: BTreeMap<String, f64> = BTreeMap::new();
    for (name, var) in model.params().iter() {
        let Some(g) = grads.get(var.as_tensor()) else { continue };
        let sq = g
            .sqr()
            .and_then(|s| s.sum_all())
            .and_then(|s| s.to_dtype(DType::F64))
            .and_then(|s| s.to_scalar::<f64>())
            .unwrap_or(f64::NAN);
        let group = name.split('.').take(2).collect::<Vec<_>>().join(".");
        *groups.entry(group).or_default() += sq;
    }
    groups.into_iter().map(|(k, v)| (k, v.sqrt())).collect()
}

/// Forward, loss, backward and one optimizer update for iteration `iter`.
pub fn train_step(
    model: &Model,
    optimizer: &mut AdamW,
    data: &TrainData,
    cfg: &TrainConfig,
    extractor: &dyn FeatureExtractor,
    iter: usize,
) -> Result<StepOutcome> {
    let lr = lr_at(iter, cfg)?;
    let batch = build_batch(cfg, data.lens(), iter)?;
    let device = model.params().device().clone();
    let dtype = model.dtype();
    let b = batch.len() as f64;
    let mut total: Option<Tensor> = None;
    let mut tasks = Vec::new();
    for task in TaskId::ALL {
        let group: Vec<&PreparedSample> = batch
            .iter()
            .filter(|it| it.task == task)
            .map(|it| &data.tasks[task.index()][it.index])
            .collect();
        if group.is_empty() {
            continue;
        }
        let inputs: Vec<&Rgb32FImage> = group.iter().map(|s| &s.input).collect();
        let targets: Vec<&Rgb32FImage> = group.iter().map(|s| &s.target).collect();
        let masks: Option<Vec<&GrayImage>> = group.iter().map(|s| s.mask.as_ref()).collect();
        let masks = if task == TaskId::Removal { masks } else { None };
        let lt = LossTargets::new(&inputs, &targets, masks.as_deref(), dtype, &device)?;
        let out = model.forward(&lt.input, task)?;
        let terms = total_loss(task, out.scales(), &lt, extractor, &cfg.loss)?;
        tasks.push((task, terms.breakdown()?));
        let weighted = (terms.total * (group.len() as f64 / b))?;
        total = Some(match total {
            Some(t) => (t + weighted)?,
            None => weighted,
        });
    }
    let total = total.ok_or_else(|| Error::Config("empty batch".into()))?;
    let loss = total.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    let grads = total.backward()?;
    if !loss.is_finite() {
        let dump = serde_json::json!({
            "step": iter,
            "loss": loss.to_string(),
            "task_losses": tasks
                .iter()
                .map(|(t, l)| (t.name().to_string(), l.l_total.to_string()))
                .collect::<BTreeMap<_, _>>(),
            "grad_norms": grad_norm_dump(model, &grads)
                .into_iter()
                .map(|(k, v)| (k, v.to_string()))
                .collect::<BTreeMap<_, _>>(),
        });
        return Err(Error::NonFinite {
            step: iter,
            dump: dump.to_string(),
        });
    }
    optimizer.step(model.params(), &grads, lr)?;
    Ok(StepOutcome { lr, loss, tasks })
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub log: PathBuf,
    pub state: ScheduleState,
}

pub const LOG_FILE: &str = "loss_log.jsonl";
pub const FINAL_CHECKPOINT: &str = "final.safetensors";

/// Runs the schedule from scratch (or from `resume`) to `total_iters`,
/// writing `loss_log.jsonl`, periodic checkpoints under `checkpoints/` and
/// `final.safetensors` into `out_dir`.
pub fn train_loop(
    cfg: &TrainConfig,
    data: &TrainData,
    out_dir: &Path,
    resume: Option<&Path>,
    extractor: &dyn FeatureExtractor,
) -> Result<TrainSummary> {
    cfg.validate()?;
    let model_cfg = ModelConfig::preset(&cfg.preset)?;
    // surface empty streams before any work
    build_batch(cfg, data.lens(), 0)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let (model, mut optimizer, mut state) = match resume {
        Some(path) => {
            let (model, meta, tensors) = load_model(path, DType::F32)?;
            let mismatch = |what: &str| Error::Config(format!("cannot resume from {}: {what} differs", path.display()));
            if meta.model != model_cfg {
                return Err(mismatch("model config"));
            }
            if meta.train.as_ref() != Some(cfg) {
                return Err(mismatch("training config"));
            }
            let state = meta.state.ok_or_else(|| mismatch("schedule state"))?;
            let mut opt = AdamW::new(cfg.optimizer());
            opt.load_state(&tensors, state.iter);
            (model, opt, state)
        }
        None => (
            Model::new(model_cfg.clone(), cfg.seed, DType::F32)?,
            AdamW::new(cfg.optimizer()),
            ScheduleState {
                iter: 0,
                lr: cfg.lr_start,
                seed: cfg.seed,
                loss_ema: [None; 3],
            },
        ),
    };

    let log_path = out_dir.join(LOG_FILE);
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let meta_for = |state: &ScheduleState| CheckpointMeta {
        format: CHECKPOINT_FORMAT,
        model: model_cfg.clone(),
        train: Some(cfg.clone()),
        state: Some(state.clone()),
    };

    while state.iter < cfg.total_iters {
        let step = state.iter;
        let outcome = train_step(&model, &mut optimizer, data, cfg, extractor, step)?;
        for (task, b) in &outcome.tasks {
            let line = LogLine {
                step,
                task: *task,
                l_pix: b.l_pix,
                l_per: b.l_per,
                l_sty: b.l_sty,
                l_total: b.l_total,
            };
            writeln!(log, "{}", serde_json::to_string(&line)?).map_err(|e| Error::io(&log_path, e))?;
            let ema = &mut state.loss_ema[task.index()];
            *ema = Some(match *ema {
                Some(prev) => EMA_DECAY * prev + (1.0 - EMA_DECAY) * b.l_total,
                None => b.l_total,
            });
        }
        state.iter += 1;
        state.lr = outcome.lr;
        log::info!("step {step} lr {:.3e} loss {:.5}", outcome.lr, outcome.loss);
        if cfg.checkpoint_every > 0 && state.iter % cfg.checkpoint_every == 0 && state.iter < cfg.total_iters {
            let p = out_dir.join("checkpoints").join(format!("iter_{:06}.safetensors", state.iter));
            save_model(&p, &model, Some(&optimizer), &meta_for(&state))?;
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let final_path = out_dir.join(FINAL_CHECKPOINT);
    save_model(&final_path, &model, Some(&optimizer), &meta_for(&state))?;
    Ok(TrainSummary {
        final_checkpoint: final_path,
        log: log_path,
        state,
    })
}
