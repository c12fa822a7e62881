//! Training objective: multi-scale pixel losses for every task plus a
//! perceptual and style loss for text removal.
//!
//! All tensors are channels-last. Prediction and target pyramids are ordered
//! quarter, half, full resolution. Every L1-type term is mean-reduced over all
//! elements of its tensor.

use std::path::Path;

use candle::{DType, Device, Tensor, D};
use image::{GrayImage, Rgb32FImage};
use serde::{Deserialize, Serialize};

use crate::imageops::{downsample2, downsample2_nearest, images_to_tensor, masks_to_tensor};
use crate::model::layers::{to_nchw, to_nhwc};
use crate::model::{Init, ParamStore};
use crate::{Error, Result, TaskId};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    /// Per-scale weights (quarter, half, full); inside text boxes for removal.
    pub alpha: [f64; 3],
    /// Per-scale weights outside text boxes for removal.
    pub beta: [f64; 3],
    pub per_weight: f64,
    pub sty_weight: f64,
    /// Transition point of the smooth L1 loss on the [0, 1] value scale.
    pub smooth_delta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: [5.0, 6.0, 10.0],
            beta: [0.8, 1.0, 2.0],
            per_weight: 0.01,
            sty_weight: 120.0,
            smooth_delta: 0.1,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = self
            .alpha
            .iter()
            .chain(&self.beta)
            .chain([&self.per_weight, &self.sty_weight, &self.smooth_delta]);
        for v in all {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "loss weights must be positive and finite, got {v}"
                )));
            }
        }
        Ok(())
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!(
            "{what}: prediction {:?} vs target {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

/// Box-weighted L1 over the three scales. Masks are `(b, h, w, 1)` with 1
/// inside text boxes.
pub fn pixel_loss_removal(
    outs: [&Tensor; 3],
    gts: [&Tensor; 3],
    masks: [&Tensor; 3],
    cfg: &LossConfig,
) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for i in 0..3 {
        same_shape(outs[i], gts[i], "removal pixel loss")?;
        let (b, h, w, _) = outs[i].dims4()?;
        if masks[i].dims() != [b, h, w, 1] {
            return Err(Error::Shape(format!(
                "removal pixel loss: mask {:?} does not match prediction {:?}",
                masks[i].dims(),
                outs[i].dims()
            )));
        }
        let diff = (outs[i] - gts[i])?;
        let inside = diff.broadcast_mul(masks[i])?.abs()?.mean_all()?;
        let outside = diff
            .broadcast_mul(&masks[i].affine(-1.0, 1.0)?)?
            .abs()?
            .mean_all()?;
        let term = ((inside * cfg.alpha[i])? + (outside * cfg.beta[i])?)?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("three scales"))
}

/// Elementwise smooth L1: `d^2 / (2 delta)` below `delta`, `|d| - delta / 2` above.
pub fn smooth_l1(diff: &Tensor, delta: f64) -> Result<Tensor> {
    let a = diff.abs()?;
    let m = a.minimum(delta)?;
    Ok(((m.sqr()? * (0.5 / delta))? + (a - m)?)?)
}

/// Smooth-L1 pixel loss used by the segmentation-style tasks.
pub fn pixel_loss_seg(outs: [&Tensor; 3], gts: [&Tensor; 3], cfg: &LossConfig) -> Result<Tensor> {
    let mut total: Option<Tensor> = None;
    for i in 0..3 {
        same_shape(outs[i], gts[i], "segmentation pixel loss")?;
        let term = (smooth_l1(&(outs[i] - gts[i])?, cfg.smooth_delta)?.mean_all()? * cfg.alpha[i])?;
        total = Some(match total {
            Some(t) => (t + term)?,
            None => term,
        });
    }
    Ok(total.expect("three scales"))
}

/// Prediction inside the text boxes, input image outside.
pub fn composite_image(out: &Tensor, inp: &Tensor, mask: &Tensor) -> Result<Tensor> {
    same_shape(out, inp, "composite image")?;
    let keep = mask.affine(-1.0, 1.0)?;
    Ok((out.broadcast_mul(mask)? + inp.broadcast_mul(&keep)?)?)
}

/// Gram matrix `F^T F / (h w c)` of a `(b, h, w, c)` feature, giving `(b, c, c)`.
pub fn gram(feat: &Tensor) -> Result<Tensor> {
    let (b, h, w, c) = feat.dims4()?;
    let f = feat.reshape((b, h * w, c))?;
    let g = f.t()?.contiguous()?.matmul(&f)?;
    Ok((g / (h * w * c) as f64)?)
}

/// A frozen network exposing three feature maps of decreasing resolution.
pub trait FeatureExtractor: Send + Sync {
    /// Channels-last `(b, h, w, 3)` images in [0, 1] to a list of
    /// channels-last feature maps.
    fn taps(&self, images: &Tensor) -> Result<Vec<Tensor>>;
}

/// Scalar loss tensors of the feature term.
#[derive(Debug, Clone)]
pub struct FeatureLoss {
    pub per: Tensor,
    pub sty: Tensor,
    pub total: Tensor,
}

pub fn feature_loss(
    out: &Tensor,
    out_star: &Tensor,
    gt: &Tensor,
    extractor: &dyn FeatureExtractor,
    cfg: &LossConfig,
) -> Result<FeatureLoss> {
    same_shape(out, gt, "feature loss")?;
    same_shape(out_star, gt, "feature loss")?;
    let b = out.dim(0)?;
    let stacked = Tensor::cat(&[out, out_star, &gt.detach()], 0)?;
    let taps = extractor.taps(&stacked)?;
    if taps.len() != 3 {
        return Err(Error::Config(format!(
            "feature extractor must expose 3 feature maps, got {}",
            taps.len()
        )));
    }
    let mut per: Option<Tensor> = None;
    let mut sty: Option<Tensor> = None;
    let acc = |slot: &mut Option<Tensor>, t: Tensor| -> Result<()> {
        *slot = Some(match slot.take() {
            Some(s) => (s + t)?,
            None => t,
        });
        Ok(())
    };
    for tap in &taps {
        let f_out = tap.narrow(0, 0, b)?;
        let f_star = tap.narrow(0, b, b)?;
        let f_gt = tap.narrow(0, 2 * b, b)?;
        acc(&mut per, (&f_out - &f_gt)?.abs()?.mean_all()?)?;
        acc(&mut per, (&f_star - &f_gt)?.abs()?.mean_all()?)?;
        let g_gt = gram(&f_gt)?;
        acc(&mut sty, (gram(&f_out)? - &g_gt)?.abs()?.mean_all()?)?;
        acc(&mut sty, (gram(&f_star)? - &g_gt)?.abs()?.mean_all()?)?;
    }
    let per = per.expect("three taps");
    let sty = sty.expect("three taps");
    let total = ((&per * cfg.per_weight)? + (&sty * cfg.sty_weight)?)?;
    Ok(FeatureLoss { per, sty, total })
}

/// Input normalization applied by a [`ConvStack`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InputNorm {
    /// `x - 0.5`.
    Centered,
    /// ImageNet channel mean and standard deviation.
    ImageNet,
}

/// VGG-style stack of 3x3 convolutions with ReLU, in four blocks of
/// `depths` convolutions separated by 2x2 max pooling. The outputs of the
/// first three poolings are the loss taps; the global average of the last
/// block is an image embedding.
pub struct ConvStack {
    blocks: Vec<Vec<(Tensor, Tensor)>>,
    norm: InputNorm,
}

pub const VGG16_WIDTHS: [usize; 4] = [64, 128, 256, 512];
pub const STACK_DEPTHS: [usize; 4] = [2, 2, 3, 3];
/// Indices of the first ten convolutions in torchvision's `vgg16().features`.
const VGG16_CONV_INDICES: [usize; 10] = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21];

impl ConvStack {
    /// Fixed random weights (He-normal) from a seed.
    pub fn seeded(widths: [usize; 4], seed: u64, dtype: DType) -> Result<Self> {
        let mut store = ParamStore::seeded(seed, dtype);
        let mut blocks = Vec::new();
        let mut c_in = 3;
        let mut k = 0;
        for (&width, &depth) in widths.iter().zip(&STACK_DEPTHS) {
            let mut convs = Vec::new();
            for _ in 0..depth {
                let w = store.create(&format!("conv{k}.weight"), &[width, c_in, 3, 3], Init::Kaiming(c_in * 9))?;
                let b = store.create(&format!("conv{k}.bias"), &[width], Init::Zeros)?;
                convs.push((w.detach(), b.detach()));
                c_in = width;
                k += 1;
            }
            blocks.push(convs);
        }
        Ok(Self {
            blocks,
            norm: InputNorm::Centered,
        })
    }

    /// The default extractor: widths 16/32/64/128, seed 0.
    pub fn default_stack(dtype: DType) -> Result<Self> {
        Self::seeded([16, 32, 64, 128], 0, dtype)
    }

    /// Loads the first ten convolutions of a torchvision VGG-16 exported to
    /// safetensors (`features.{i}.weight`/`bias`).
    pub fn load_vgg16(path: &Path, dtype: DType) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let ckpt_err = |msg: String| Error::Checkpoint {
            path: path.to_path_buf(),
            msg,
        };
        let st = safetensors::SafeTensors::deserialize(&bytes)
            .map_err(|e| ckpt_err(e.to_string()))?;
        let mut blocks = Vec::new();
        let mut k = 0;
        let mut c_in = 3;
        for (&width, &depth) in VGG16_WIDTHS.iter().zip(&STACK_DEPTHS) {
            let mut convs = Vec::new();
            for _ in 0..depth {
                let idx = VGG16_CONV_INDICES[k];
                let load = |name: String, shape: &[usize]| -> Result<Tensor> {
                    let view = st.tensor(&name).map_err(|e| ckpt_err(format!("{name}: {e}")))?;
                    let t = crate::checkpoint::view_to_tensor(&view)
                        .map_err(|e| ckpt_err(format!("{name}: {e}")))?;
                    if t.dims() != shape {
                        return Err(ckpt_err(format!(
                            "{name}: expected shape {shape:?}, got {:?}",
                            t.dims()
                        )));
                    }
                    Ok(t.to_dtype(dtype)?)
                };
                let w = load(format!("features.{idx}.weight"), &[width, c_in, 3, 3])?;
                let b = load(format!("features.{idx}.bias"), &[width])?;
                convs.push((w, b));
                c_in = width;
                k += 1;
            }
            blocks.push(convs);
        }
        Ok(Self {
            blocks,
            norm: InputNorm::ImageNet,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.blocks
            .last()
            .and_then(|b| b.last())
            .map(|(w, _)| w.dims()[0])
            .unwrap_or(0)
    }

    /// Convolution weights and biases in application order.
    pub fn weights(&self) -> impl Iterator<Item = &(Tensor, Tensor)> {
        self.blocks.iter().flatten()
    }

    fn normalize(&self, images: &Tensor) -> Result<Tensor> {
        Ok(match self.norm {
            InputNorm::Centered => images.affine(1.0, -0.5)?,
            InputNorm::ImageNet => {
                let dev = images.device();
                let mean = Tensor::new(&[0.485f32, 0.456, 0.406], dev)?.to_dtype(images.dtype())?;
                let std = Tensor::new(&[0.229f32, 0.224, 0.225], dev)?.to_dtype(images.dtype())?;
                images.broadcast_sub(&mean)?.broadcast_div(&std)?
            }
        })
    }

    /// Runs all blocks; returns the pooled outputs of the first three blocks
    /// and the (unpooled) output of the last, all NCHW.
    fn run(&self, images: &Tensor, stop_after: usize) -> Result<(Vec<Tensor>, Tensor)> {
        let mut x = to_nchw(&self.normalize(images)?)?;
        let mut pooled = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate().take(stop_after) {
            for (w, b) in block {
                let c = w.dims()[0];
                x = x
                    .conv2d(w, 1, 1, 1, 1)?
                    .broadcast_add(&b.reshape((1, c, 1, 1))?)?
                    .relu()?;
            }
            if bi < 3 {
                let (_, _, h, w) = x.dims4()?;
                if h < 2 || w < 2 {
                    return Err(Error::Shape(format!(
                        "feature extractor: {h}x{w} map cannot be pooled"
                    )));
                }
                x = x.max_pool2d(2)?;
                pooled.push(x.clone());
            }
        }
        Ok((pooled, x))
    }

    /// `(b, embed_dim)` global-average-pooled features of the last block.
    pub fn embed(&self, images: &Tensor) -> Result<Tensor> {
        let (_, last) = self.run(images, 4)?;
        Ok(last.mean(D::Minus1)?.mean(D::Minus1)?)
    }
}

impl FeatureExtractor for ConvStack {
    fn taps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let (pooled, _) = self.run(images, 3)?;
        pooled.iter().map(to_nhwc).collect()
    }
}

fn refs<T>(v: &[T]) -> Vec<&T> {
    v.iter().collect()
}

/// Target pyramids for one group of same-task samples.
#[derive(Debug, Clone)]
pub struct LossTargets {
    pub input: Tensor,
    /// Quarter, half and full resolution targets.
    pub gts: [Tensor; 3],
    /// Box masks at the same three scales (removal only).
    pub masks: Option<[Tensor; 3]>,
}

impl LossTargets {
    pub fn new(
        inputs: &[&Rgb32FImage],
        targets: &[&Rgb32FImage],
        masks: Option<&[&GrayImage]>,
        dtype: DType,
        device: &Device,
    ) -> Result<Self> {
        let input = images_to_tensor(inputs, dtype, device)?;
        let half: Vec<Rgb32FImage> = targets.iter().map(|t| downsample2(t)).collect::<Result<_>>()?;
        let quarter: Vec<Rgb32FImage> = half.iter().map(downsample2).collect::<Result<_>>()?;
        let gts = [
            images_to_tensor(&refs(&quarter), dtype, device)?,
            images_to_tensor(&refs(&half), dtype, device)?,
            images_to_tensor(targets, dtype, device)?,
        ];
        let masks = match masks {
            Some(m) => {
                let half: Vec<GrayImage> = m.iter().map(|x| downsample2_nearest(x)).collect::<Result<_>>()?;
                let quarter: Vec<GrayImage> = half.iter().map(downsample2_nearest).collect::<Result<_>>()?;
                Some([
                    masks_to_tensor(&refs(&quarter), dtype, device)?,
                    masks_to_tensor(&refs(&half), dtype, device)?,
                    masks_to_tensor(m, dtype, device)?,
                ])
            }
            None => None,
        };
        Ok(Self { input, gts, masks })
    }
}

/// Loss tensors of one group; `per`/`sty` are absent for tasks without the
/// feature loss.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub pix: Tensor,
    pub per: Option<Tensor>,
    pub sty: Option<Tensor>,
    pub total: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_pix: f64,
    pub l_per: Option<f64>,
    pub l_sty: Option<f64>,
    pub l_total: f64,
}

impl LossTerms {
    pub fn breakdown(&self) -> Result<LossBreakdown> {
        let scalar = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        let weighted = |t: &Option<Tensor>| -> Result<Option<f64>> {
            t.as_ref().map(scalar).transpose()
        };
        Ok(LossBreakdown {
            l_pix: scalar(&self.pix)?,
            l_per: weighted(&self.per)?,
            l_sty: weighted(&self.sty)?,
            l_total: scalar(&self.total)?,
        })
    }
}

/// Removal: box-weighted pixel loss plus feature loss on the raw and the
/// composited prediction. Segmentation and tamper: smooth-L1 pixel loss.
pub fn total_loss(
    task: TaskId,
    outs: [&Tensor; 3],
    targets: &LossTargets,
    extractor: &dyn FeatureExtractor,
    cfg: &LossConfig,
) -> Result<LossTerms> {
    let gts = [&targets.gts[0], &targets.gts[1], &targets.gts[2]];
    match task {
        TaskId::Removal => {
            let masks = targets.masks.as_ref().ok_or_else(|| {
                Error::InvalidLabel("removal sample has no text-box mask".into())
            })?;
            let pix = pixel_loss_removal(outs, gts, [&masks[0], &masks[1], &masks[2]], cfg)?;
            let out_star = composite_image(outs[2], &targets.input, &masks[2])?;
            let feat = feature_loss(outs[2], &out_star, gts[2], extractor, cfg)?;
            let per = (&feat.per * cfg.per_weight)?;
            let sty = (&feat.sty * cfg.sty_weight)?;
            let total = (&pix + &feat.total)?;
            Ok(LossTerms {
                pix,
                per: Some(per),
                sty: Some(sty),
                total,
            })
        }
        TaskId::Segmentation | TaskId::Tamper => {
            let pix = pixel_loss_seg(outs, gts, cfg)?;
            Ok(LossTerms {
                total: pix.clone(),
                pix,
                per: None,
                sty: None,
            })
        }
    }
}
