//! Architecture hyperparameters and named presets.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One encoder or decoder block.
///
/// For encoder blocks `resample_ratio` is the patch-embedding downsampling
/// ratio and `out_dim` its output width, which must equal `dim`. For decoder
/// blocks the windowed transformer runs at `dim` first, then patch splitting
/// upsamples by `resample_ratio` to `out_dim` channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub resample_ratio: usize,
    pub out_dim: usize,
    pub window: usize,
    pub heads: usize,
    pub depth: usize,
    pub dim: usize,
}

impl StageSpec {
    pub const fn new(
        resample_ratio: usize,
        out_dim: usize,
        window: usize,
        heads: usize,
        depth: usize,
        dim: usize,
    ) -> Self {
        Self {
            resample_ratio,
            out_dim,
            window,
            heads,
            depth,
            dim,
        }
    }

    fn validate(&self, what: &str) -> Result<()> {
        if self.resample_ratio == 0
            || self.out_dim == 0
            || self.window == 0
            || self.heads == 0
            || self.dim == 0
        {
            return Err(Error::Config(format!(
                "{what}: ratio, out_dim, window, heads and dim must be >= 1"
            )));
        }
        if self.depth == 0 {
            return Err(Error::Config(format!("{what}: depth must be >= 1")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "{what}: dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Where task prompts are added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptSite {
    /// After each of the first three encoder blocks, through a linear projection.
    Encoder,
    /// On the final encoder feature, between encoder and decoder.
    Shared,
    /// After each decoder block, through a linear projection.
    Decoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_stages: Vec<StageSpec>,
    pub decoder_stages: Vec<StageSpec>,
    pub prompt_count: usize,
    pub prompt_dim: usize,
    pub prompt_sites: BTreeSet<PromptSite>,
    pub mlp_ratio: f64,
    pub head_kernel: usize,
}

pub const ENCODER_STAGES: usize = 4;
pub const DECODER_STAGES: usize = 5;

impl ModelConfig {
    /// The full-size architecture (about 108M parameters).
    pub fn small() -> Self {
        let enc = |r, dim, heads, depth| StageSpec::new(r, dim, 16, heads, depth, dim);
        let dec = |out, heads, depth, dim| StageSpec::new(2, out, 8, heads, depth, dim);
        Self {
            encoder_stages: vec![
                enc(4, 96, 3, 2),
                enc(2, 192, 6, 2),
                enc(2, 384, 12, 18),
                enc(2, 768, 24, 2),
            ],
            decoder_stages: vec![
                dec(384, 24, 2, 768),
                dec(192, 12, 18, 384),
                dec(96, 6, 2, 192),
                dec(48, 3, 2, 96),
                dec(24, 2, 2, 48),
            ],
            prompt_count: 3,
            prompt_dim: 768,
            prompt_sites: BTreeSet::from([PromptSite::Shared]),
            mlp_ratio: 4.0,
            head_kernel: 3,
        }
    }

    /// Desk-scale architecture for CPU training and tests.
    pub fn toy() -> Self {
        let enc = |r, dim, heads, depth| StageSpec::new(r, dim, 8, heads, depth, dim);
        let dec = |out, heads, depth, dim| StageSpec::new(2, out, 8, heads, depth, dim);
        Self {
            encoder_stages: vec![
                enc(4, 16, 1, 1),
                enc(2, 32, 2, 1),
                enc(2, 64, 4, 2),
                enc(2, 128, 8, 1),
            ],
            decoder_stages: vec![
                dec(64, 8, 1, 128),
                dec(32, 4, 2, 64),
                dec(16, 2, 1, 32),
                dec(16, 1, 1, 16),
                dec(16, 1, 1, 16),
            ],
            prompt_count: 3,
            prompt_dim: 128,
            prompt_sites: BTreeSet::from([PromptSite::Shared]),
            mlp_ratio: 4.0,
            head_kernel: 3,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "small" => Ok(Self::small()),
            "toy" => Ok(Self::toy()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected `toy` or `small`)"
            ))),
        }
    }

    /// Cumulative encoder strides relative to the input image.
    pub fn encoder_strides(&self) -> Vec<usize> {
        self.encoder_stages
            .iter()
            .scan(1, |acc, s| {
                *acc *= s.resample_ratio;
                Some(*acc)
            })
            .collect()
    }

    /// Cumulative decoder strides relative to the input image.
    pub fn decoder_strides(&self) -> Vec<usize> {
        let mut stride = self.encoder_strides().last().copied().unwrap_or(1);
        self.decoder_stages
            .iter()
            .map(|s| {
                stride /= s.resample_ratio.max(1);
                stride
            })
            .collect()
    }

    /// Total downsampling factor; input sizes must be multiples of it.
    pub fn input_multiple(&self) -> usize {
        self.encoder_strides().last().copied().unwrap_or(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.encoder_stages.len() != ENCODER_STAGES {
            return Err(Error::Config(format!(
                "expected {ENCODER_STAGES} encoder stages, got {}",
                self.encoder_stages.len()
            )));
        }
        if self.decoder_stages.len() != DECODER_STAGES {
            return Err(Error::Config(format!(
                "expected {DECODER_STAGES} decoder stages, got {}",
                self.decoder_stages.len()
            )));
        }
        for (i, s) in self.encoder_stages.iter().enumerate() {
            s.validate(&format!("encoder stage {}", i + 1))?;
            if s.out_dim != s.dim {
                return Err(Error::Config(format!(
                    "encoder stage {}: patch embedding width {} must equal block dim {}",
                    i + 1,
                    s.out_dim,
                    s.dim
                )));
            }
        }
        for (i, s) in self.decoder_stages.iter().enumerate() {
            s.validate(&format!("decoder stage {}", i + 1))?;
            let r2 = s.resample_ratio * s.resample_ratio;
            if s.dim % r2 != 0 {
                return Err(Error::Config(format!(
                    "decoder stage {}: dim {} is not divisible by ratio^2 = {r2}",
                    i + 1,
                    s.dim
                )));
            }
        }
        if self.encoder_strides() != [4, 8, 16, 32] {
            return Err(Error::Config(format!(
                "encoder strides must be [4, 8, 16, 32], got {:?}",
                self.encoder_strides()
            )));
        }
        if self.decoder_strides() != [16, 8, 4, 2, 1] {
            return Err(Error::Config(format!(
                "decoder strides must be [16, 8, 4, 2, 1], got {:?}",
                self.decoder_strides()
            )));
        }
        let enc4 = self.encoder_stages[3].dim;
        if self.decoder_stages[0].dim != enc4 {
            return Err(Error::Config(format!(
                "decoder stage 1 dim {} must equal final encoder dim {enc4}",
                self.decoder_stages[0].dim
            )));
        }
        for i in 1..DECODER_STAGES {
            let prev = self.decoder_stages[i - 1].out_dim;
            if self.decoder_stages[i].dim != prev {
                return Err(Error::Config(format!(
                    "decoder stage {} dim {} must equal stage {i} output {prev}",
                    i + 1,
                    self.decoder_stages[i].dim
                )));
            }
        }
        // encoder feature i is added into decoder feature 4 - i
        for i in 0..3 {
            let enc = self.encoder_stages[i].dim;
            let dec = self.decoder_stages[2 - i].out_dim;
            if enc != dec {
                return Err(Error::Config(format!(
                    "lateral connection: encoder stage {} dim {enc} != decoder stage {} output {dec}",
                    i + 1,
                    3 - i
                )));
            }
        }
        if self.prompt_count != crate::TaskId::ALL.len() {
            return Err(Error::Config(format!(
                "prompt_count must be {} (one per task), got {}",
                crate::TaskId::ALL.len(),
                self.prompt_count
            )));
        }
        if self.prompt_dim != enc4 {
            return Err(Error::Config(format!(
                "prompt_dim {} must equal final encoder dim {enc4}",
                self.prompt_dim
            )));
        }
        if self.prompt_sites.is_empty() {
            return Err(Error::Config("prompt_sites must not be empty".into()));
        }
        if !(self.mlp_ratio > 0.0) {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.head_kernel % 2 == 0 {
            return Err(Error::Config("head_kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self, dim: usize) -> usize {
        ((dim as f64) * self.mlp_ratio).round() as usize
    }

    /// Number of trainable scalars, computed from the configuration alone.
    pub fn param_count(&self) -> usize {
        let linear = |i: usize, o: usize| i * o + o;
        let conv = |i: usize, o: usize, k: usize| i * o * k * k + o;
        let block = |dim: usize, heads: usize, window: usize| {
            let hidden = self.mlp_hidden(dim);
            let table = (2 * window - 1) * (2 * window - 1) * heads;
            linear(dim, 3 * dim)
                + linear(dim, dim)
                + heads
                + table
                + 4 * dim
                + linear(dim, hidden)
                + linear(hidden, dim)
        };

        let mut total = 0;
        let mut c_in = 3;
        for s in &self.encoder_stages {
            total += linear(s.resample_ratio * s.resample_ratio * c_in, s.out_dim);
            total += s.depth * block(s.dim, s.heads, s.window);
            c_in = s.dim;
        }
        for s in &self.decoder_stages {
            total += s.depth * block(s.dim, s.heads, s.window);
            total += linear(s.dim / (s.resample_ratio * s.resample_ratio), s.out_dim);
        }
        for s in &self.encoder_stages[..3] {
            let c = s.dim;
            total += conv(c, c, 1) + conv(c, 2 * c, 3) + conv(2 * c, 2 * c, 3) + conv(2 * c, c, 1);
        }
        for s in &self.decoder_stages[2..] {
            total += conv(s.out_dim, 3, self.head_kernel);
        }
        total += self.prompt_count * self.prompt_dim;
        if self.prompt_sites.contains(&PromptSite::Encoder) {
            for s in &self.encoder_stages[..3] {
                total += linear(self.prompt_dim, s.dim);
            }
        }
        if self.prompt_sites.contains(&PromptSite::Decoder) {
            for s in &self.decoder_stages {
                total += linear(self.prompt_dim, s.out_dim);
            }
        }
        total
    }
}
