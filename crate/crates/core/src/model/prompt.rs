//! Learnable task prompts and their injection into feature maps.

use candle::Tensor;

use super::layers::Linear;
use super::params::{Init, ParamStore};
use crate::config::{ModelConfig, PromptSite};
use crate::{Error, Result, TaskId};

/// One learnable vector per task, plus optional per-stage projections used
/// when prompts are also inserted inside the encoder or decoder.
#[derive(Debug, Clone)]
pub struct PromptBank {
    prompts: Vec<Tensor>,
    encoder_proj: Vec<Linear>,
    decoder_proj: Vec<Linear>,
}

impl PromptBank {
    pub fn new(store: &mut ParamStore, config: &ModelConfig) -> Result<Self> {
        let prompts = TaskId::ALL
            .iter()
            .take(config.prompt_count)
            .map(|t| store.create(&format!("prompts.{t}"), &[config.prompt_dim], Init::Zeros))
            .collect::<Result<Vec<_>>>()?;
        let mut encoder_proj = Vec::new();
        if config.prompt_sites.contains(&PromptSite::Encoder) {
            for (i, s) in config.encoder_stages[..3].iter().enumerate() {
                encoder_proj.push(Linear::new(
                    store,
                    &format!("prompt_proj.encoder{}", i + 1),
                    config.prompt_dim,
                    s.dim,
                )?);
            }
        }
        let mut decoder_proj = Vec::new();
        if config.prompt_sites.contains(&PromptSite::Decoder) {
            for (i, s) in config.decoder_stages.iter().enumerate() {
                decoder_proj.push(Linear::new(
                    store,
                    &format!("prompt_proj.decoder{}", i + 1),
                    config.prompt_dim,
                    s.out_dim,
                )?);
            }
        }
        Ok(Self {
            prompts,
            encoder_proj,
            decoder_proj,
        })
    }

    pub fn len(&self) -> usize {
        self.prompts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompts.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prompts.first().map(|p| p.elem_count()).unwrap_or(0)
    }

    pub fn prompt(&self, task: TaskId) -> Result<&Tensor> {
        self.prompts
            .get(task.index())
            .ok_or_else(|| Error::UnknownTask(format!("{task} (prompt bank holds {})", self.len())))
    }

    /// Adds the task prompt, projected to the stage width, after encoder stage
    /// `stage` (0-based). No-op when the encoder site is disabled.
    pub fn inject_encoder(&self, feat: &Tensor, stage: usize, task: TaskId) -> Result<Tensor> {
        match self.encoder_proj.get(stage) {
            Some(proj) => broadcast_add_vector(feat, &proj.forward(&self.prompt(task)?.unsqueeze(0)?)?),
            None => Ok(feat.clone()),
        }
    }

    /// Decoder counterpart of [`PromptBank::inject_encoder`].
    pub fn inject_decoder(&self, feat: &Tensor, stage: usize, task: TaskId) -> Result<Tensor> {
        match self.decoder_proj.get(stage) {
            Some(proj) => broadcast_add_vector(feat, &proj.forward(&self.prompt(task)?.unsqueeze(0)?)?),
            None => Ok(feat.clone()),
        }
    }
}

/// Adds the task prompt to every spatial position of the shared feature.
pub fn inject_prompt(shared: &Tensor, bank: &PromptBank, task: TaskId) -> Result<Tensor> {
    let prompt = bank.prompt(task)?;
    let c = shared.dim(candle::D::Minus1)?;
    if c != prompt.elem_count() {
        return Err(Error::Shape(format!(
            "prompt dim {} does not match feature dim {c}",
            prompt.elem_count()
        )));
    }
    broadcast_add_vector(shared, prompt)
}

fn broadcast_add_vector(feat: &Tensor, v: &Tensor) -> Result<Tensor> {
    let c = feat.dim(candle::D::Minus1)?;
    Ok(feat.broadcast_add(&v.reshape((1, 1, 1, c))?)?)
}
