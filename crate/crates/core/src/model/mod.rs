//! The prompted encoder-decoder.
//!
//! The encoder produces feature maps at strides 4, 8, 16 and 32. The task
//! prompt is added to the last one, and the decoder upsamples back through
//! strides 16, 8, 4, 2 and 1, receiving lateral shortcuts from the first three
//! encoder features. Three 3x3 convolution heads read the stride-4, stride-2
//! and full-resolution decoder features.

pub mod layers;
pub mod params;
pub mod prompt;
pub mod swin;

use candle::{DType, Tensor};
use image::Rgb32FImage;

use crate::config::{ModelConfig, PromptSite};
use crate::imageops::{images_to_tensor, tensor_to_images};
use crate::{Error, Result, TaskId};
use layers::{Conv2d, Lateral, PatchEmbed, PatchSplit};
pub use params::{Init, ParamStore};
pub use prompt::{inject_prompt, PromptBank};
use swin::WindowedBlock;

/// Output head names, coarsest first.
pub const HEAD_NAMES: [&str; 3] = ["quarter", "half", "full"];

#[derive(Debug, Clone)]
struct EncoderStage {
    embed: PatchEmbed,
    blocks: Vec<WindowedBlock>,
}

#[derive(Debug, Clone)]
struct DecoderStage {
    blocks: Vec<WindowedBlock>,
    split: PatchSplit,
}

/// Intermediate features of one forward pass.
#[derive(Debug, Clone)]
pub struct FeatureBundle {
    pub enc_feats: Vec<Tensor>,
    /// Final encoder feature before prompt injection.
    pub shared_feat: Tensor,
    pub injected_feat: Tensor,
    pub dec_feats: Vec<Tensor>,
}

/// Predicted images, each `(batch, h, w, 3)`.
#[derive(Debug, Clone)]
pub struct ModelOutput {
    pub out_full: Tensor,
    pub out_half: Tensor,
    pub out_quarter: Tensor,
    pub features: Option<FeatureBundle>,
}

impl ModelOutput {
    /// Predictions ordered quarter, half, full.
    pub fn scales(&self) -> [&Tensor; 3] {
        [&self.out_quarter, &self.out_half, &self.out_full]
    }
}

pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    encoder: Vec<EncoderStage>,
    decoder: Vec<DecoderStage>,
    laterals: Vec<Lateral>,
    heads: Vec<Conv2d>,
    prompts: PromptBank,
}

impl Model {
    /// Randomly initialized model: truncated-normal linear weights, zero
    /// biases and zero prompts.
    pub fn new(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::build(config, ParamStore::seeded(seed, dtype))
    }

    /// Model with every parameter zero, ready to receive loaded weights.
    pub fn zeroed(config: ModelConfig, dtype: DType) -> Result<Self> {
        Self::build(config, ParamStore::zeroed(dtype))
    }

    fn build(config: ModelConfig, mut store: ParamStore) -> Result<Self> {
        config.validate()?;
        let mut encoder = Vec::new();
        let mut c_in = 3;
        for (i, spec) in config.encoder_stages.iter().enumerate() {
            let name = format!("encoder.stage{}", i + 1);
            let embed = PatchEmbed::new(
                &mut store,
                &format!("{name}.embed"),
                spec.resample_ratio,
                c_in,
                spec.out_dim,
            )?;
            let blocks = (0..spec.depth)
                .map(|j| {
                    WindowedBlock::new(
                        &mut store,
                        &format!("{name}.block{}", j + 1),
                        spec,
                        config.mlp_hidden(spec.dim),
                        j % 2 == 1,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            encoder.push(EncoderStage { embed, blocks });
            c_in = spec.dim;
        }

        let prompts = PromptBank::new(&mut store, &config)?;

        let mut decoder = Vec::new();
        for (i, spec) in config.decoder_stages.iter().enumerate() {
            let name = format!("decoder.stage{}", i + 1);
            let blocks = (0..spec.depth)
                .map(|j| {
                    WindowedBlock::new(
                        &mut store,
                        &format!("{name}.block{}", j + 1),
                        spec,
                        config.mlp_hidden(spec.dim),
                        j % 2 == 1,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            let split = PatchSplit::new(
                &mut store,
                &format!("{name}.split"),
                spec.resample_ratio,
                spec.dim,
                spec.out_dim,
            )?;
            decoder.push(DecoderStage { blocks, split });
        }

        let laterals = config.encoder_stages[..3]
            .iter()
            .enumerate()
            .map(|(i, s)| Lateral::new(&mut store, &format!("lateral.stage{}", i + 1), s.dim))
            .collect::<Result<Vec<_>>>()?;

        let heads = config.decoder_stages[2..]
            .iter()
            .zip(HEAD_NAMES)
            .map(|(s, n)| {
                Conv2d::new(&mut store, &format!("head.{n}"), s.out_dim, 3, config.head_kernel)
            })
            .collect::<Result<Vec<_>>>()?;

        Ok(Self {
            config,
            params: store,
            encoder,
            decoder,
            laterals,
            heads,
            prompts,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn param_count(&self) -> usize {
        self.params.param_count()
    }

    pub fn prompts(&self) -> &PromptBank {
        &self.prompts
    }

    pub fn forward(&self, images: &Tensor, task: TaskId) -> Result<ModelOutput> {
        let mut out = self.forward_with_features(images, task)?;
        out.features = None;
        Ok(out)
    }

    /// `images` is `(batch, height, width, 3)` with height and width
    /// multiples of 32.
    pub fn forward_with_features(&self, images: &Tensor, task: TaskId) -> Result<ModelOutput> {
        let (_, h, w, c) = images.dims4()?;
        let multiple = self.config.input_multiple();
        if c != 3 {
            return Err(Error::Shape(format!("expected RGB input, got {c} channels")));
        }
        if h % multiple != 0 || w % multiple != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not a positive multiple of {multiple}"
            )));
        }
        let images = images.to_dtype(self.dtype())?;
        let sites = &self.config.prompt_sites;

        let mut enc_feats = Vec::with_capacity(self.encoder.len());
        let mut x = images;
        for (i, stage) in self.encoder.iter().enumerate() {
            x = stage.embed.forward(&x)?;
            for blk in &stage.blocks {
                x = blk.forward(&x)?;
            }
            if i < 3 && sites.contains(&PromptSite::Encoder) {
                x = self.prompts.inject_encoder(&x, i, task)?;
            }
            enc_feats.push(x.clone());
        }

        let shared_feat = x;
        let injected_feat = if sites.contains(&PromptSite::Shared) {
            inject_prompt(&shared_feat, &self.prompts, task)?
        } else {
            shared_feat.clone()
        };

        let mut dec_feats = Vec::with_capacity(self.decoder.len());
        let mut y = injected_feat.clone();
        for (i, stage) in self.decoder.iter().enumerate() {
            for blk in &stage.blocks {
                y = blk.forward(&y)?;
            }
            y = stage.split.forward(&y)?;
            if sites.contains(&PromptSite::Decoder) {
                y = self.prompts.inject_decoder(&y, i, task)?;
            }
            if i < 3 {
                let k = 2 - i;
                y = self.laterals[k].forward(&enc_feats[k], &y)?;
            }
            dec_feats.push(y.clone());
        }

        let out_quarter = self.heads[0].forward(&dec_feats[2])?;
        let out_half = self.heads[1].forward(&dec_feats[3])?;
        let out_full = self.heads[2].forward(&dec_feats[4])?;
        Ok(ModelOutput {
            out_full,
            out_half,
            out_quarter,
            features: Some(FeatureBundle {
                enc_feats,
                shared_feat,
                injected_feat,
                dec_feats,
            }),
        })
    }

    /// Full-resolution prediction for one image (not clamped). Sizes that
    /// are not multiples of 32 are edge-padded and the output cropped back.
    pub fn infer(&self, image: &Rgb32FImage, task: TaskId) -> Result<Rgb32FImage> {
        let (w, h) = image.dimensions();
        let m = self.config.input_multiple() as u32;
        let (pw, ph) = (w.div_ceil(m) * m, h.div_ceil(m) * m);
        let padded;
        let input = if (pw, ph) == (w, h) {
            image
        } else {
            padded = Rgb32FImage::from_fn(pw, ph, |x, y| *image.get_pixel(x.min(w - 1), y.min(h - 1)));
            &padded
        };
        let x = images_to_tensor(&[input], self.dtype(), self.params.device())?;
        let out = self.forward(&x, task)?;
        let full = tensor_to_images(&out.out_full)?.remove(0);
        if (pw, ph) == (w, h) {
            return Ok(full);
        }
        Ok(image::imageops::crop_imm(&full, 0, 0, w, h).to_image())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle::Device;

    fn input(b: usize, h: usize, w: usize) -> Tensor {
        Tensor::rand(0f32, 1.0, (b, h, w, 3), &Device::Cpu).unwrap()
    }

    #[test]
    fn toy_param_count_matches_formula() {
        let cfg = ModelConfig::toy();
        let m = Model::new(cfg.clone(), 0, DType::F32).unwrap();
        assert_eq!(m.param_count(), cfg.param_count());
        let mut cfg2 = cfg.clone();
        cfg2.prompt_sites = [PromptSite::Encoder, PromptSite::Shared, PromptSite::Decoder].into();
        let m2 = Model::zeroed(cfg2.clone(), DType::F32).unwrap();
        assert_eq!(m2.param_count(), cfg2.param_count());
    }

    #[test]
    fn output_and_feature_shapes() {
        let m = Model::new(ModelConfig::toy(), 0, DType::F32).unwrap();
        let out = m.forward_with_features(&input(2, 64, 96), TaskId::Removal).unwrap();
        assert_eq!(out.out_full.dims(), &[2, 64, 96, 3]);
        assert_eq!(out.out_half.dims(), &[2, 32, 48, 3]);
        assert_eq!(out.out_quarter.dims(), &[2, 16, 24, 3]);
        let f = out.features.unwrap();
        let enc: Vec<_> = f.enc_feats.iter().map(|t| t.dims().to_vec()).collect();
        assert_eq!(
            enc,
            vec![
                vec![2, 16, 24, 16],
                vec![2, 8, 12, 32],
                vec![2, 4, 6, 64],
                vec![2, 2, 3, 128]
            ]
        );
        let dec: Vec<_> = f.dec_feats.iter().map(|t| t.dims()[1]).collect();
        assert_eq!(dec, vec![4, 8, 16, 32, 64]);
    }

    #[test]
    fn rejects_indivisible_input() {
        let m = Model::new(ModelConfig::toy(), 0, DType::F32).unwrap();
        assert!(matches!(
            m.forward(&input(1, 48, 64), TaskId::Removal),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn zero_prompts_give_task_independent_output() {
        let m = Model::new(ModelConfig::toy(), 5, DType::F32).unwrap();
        let x = input(1, 32, 32);
        let a = m.forward(&x, TaskId::Removal).unwrap().out_full;
        let b = m.forward(&x, TaskId::Tamper).unwrap().out_full;
        let d = (a - b).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn encoder_is_task_independent_with_shared_site() {
        let m = Model::new(ModelConfig::toy(), 5, DType::F32).unwrap();
        let p = Tensor::rand(-1f32, 1.0, 128, &Device::Cpu).unwrap();
        m.params().set("prompts.segmentation", &p).unwrap();
        let x = input(1, 32, 32);
        let a = m.forward_with_features(&x, TaskId::Removal).unwrap().features.unwrap();
        let b = m.forward_with_features(&x, TaskId::Segmentation).unwrap().features.unwrap();
        for (ea, eb) in a.enc_feats.iter().zip(&b.enc_feats) {
            let va = ea.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            let vb = eb.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert_eq!(va, vb);
        }
        let off = (b.injected_feat - &b.shared_feat).unwrap();
        let off = off.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let p = p.to_vec1::<f32>().unwrap();
        for (i, v) in off.iter().enumerate() {
            assert!((v - p[i % 128]).abs() < 1e-5);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let x = input(1, 32, 32);
        let a = Model::new(ModelConfig::toy(), 9, DType::F32).unwrap();
        let b = Model::new(ModelConfig::toy(), 9, DType::F32).unwrap();
        let ya = a.forward(&x, TaskId::Segmentation).unwrap().out_full;
        let yb = b.forward(&x, TaskId::Segmentation).unwrap().out_full;
        assert_eq!(
            ya.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            yb.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );
    }

    #[test]
    fn infer_pads_odd_sizes() {
        let m = Model::new(ModelConfig::toy(), 2, DType::F32).unwrap();
        let img = Rgb32FImage::from_fn(40, 33, |x, y| image::Rgb([x as f32 / 40.0, y as f32 / 33.0, 0.5]));
        let out = m.infer(&img, TaskId::Removal).unwrap();
        assert_eq!(out.dimensions(), (40, 33));
    }

    #[test]
    fn all_prompt_sites_run() {
        let mut cfg = ModelConfig::toy();
        cfg.prompt_sites = [PromptSite::Encoder, PromptSite::Shared, PromptSite::Decoder].into();
        let m = Model::new(cfg, 1, DType::F32).unwrap();
        let out = m.forward(&input(1, 32, 32), TaskId::Tamper).unwrap();
        assert_eq!(out.out_full.dims(), &[1, 32, 32, 3]);
    }
}
