//! Building blocks shared by the encoder, decoder and lateral connections.
//! Feature maps are channels-last: `(batch, height, width, channels)`.

use candle::{Tensor, D};

use super::params::{Init, ParamStore};
use crate::{Error, Result};

pub const LINEAR_STD: f64 = 0.02;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize) -> Result<Self> {
        Self::with_init(store, name, c_in, c_out, Init::TruncNormal(LINEAR_STD))
    }

    pub fn with_init(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, init: Init) -> Result<Self> {
        let weight = store.create(&format!("{name}.weight"), &[c_out, c_in], init)?;
        let bias = store.create(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    /// Applies to the last dimension of a tensor of any rank.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let (lead, c_in) = dims.split_at(dims.len() - 1);
        let rows: usize = lead.iter().product();
        let y = x
            .reshape((rows, c_in[0]))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = lead.to_vec();
        out_dims.push(self.weight.dim(0)?);
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub weight: Tensor,
    pub bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Self::with_gain(store, name, dim, 1.0)
    }

    pub fn with_gain(store: &mut ParamStore, name: &str, dim: usize, gain: f64) -> Result<Self> {
        let weight = store.create(&format!("{name}.weight"), &[dim], Init::Const(gain))?;
        let bias = store.create(&format!("{name}.bias"), &[dim], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.weight)?.broadcast_add(&self.bias)?)
    }
}

/// Square convolution with "same" padding on channels-last input.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    kernel: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    ) -> Result<Self> {
        let weight = store.create(
            &format!("{name}.weight"),
            &[c_out, c_in, kernel, kernel],
            Init::Kaiming(c_in * kernel * kernel),
        )?;
        let bias = store.create(&format!("{name}.bias"), &[c_out], Init::Zeros)?;
        Ok(Self {
            weight,
            bias,
            kernel,
        })
    }

    pub fn forward_nchw(&self, x: &Tensor) -> Result<Tensor> {
        let c_out = self.weight.dim(0)?;
        let y = x.conv2d(&self.weight, self.kernel / 2, 1, 1, 1)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c_out, 1, 1))?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.forward_nchw(&to_nchw(x)?)?;
        to_nhwc(&y)
    }
}

pub fn to_nchw(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 3, 1, 2))?.contiguous()?)
}

pub fn to_nhwc(x: &Tensor) -> Result<Tensor> {
    Ok(x.permute((0, 2, 3, 1))?.contiguous()?)
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(D::Minus1)?;
    Ok(e.broadcast_div(&sum)?)
}

pub fn l2_normalize_last(x: &Tensor) -> Result<Tensor> {
    let norm = (x.sqr()?.sum_keepdim(D::Minus1)? + 1e-12)?.sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// Space-to-depth by `ratio` followed by a linear map.
#[derive(Debug, Clone)]
pub struct PatchEmbed {
    pub ratio: usize,
    pub proj: Linear,
}

impl PatchEmbed {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ratio: usize,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        Ok(Self {
            ratio,
            proj: Linear::with_init(store, name, ratio * ratio * c_in, c_out, Init::LeCun(ratio * ratio * c_in))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Linear::forward(&self.proj, &space_to_depth(x, self.ratio)?)
    }
}

/// Flatten each `r x r` patch to `r*r*c` channels, ordered (row, column, channel).
pub fn space_to_depth(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!(
            "patch embedding: {h}x{w} is not divisible by ratio {r}"
        )));
    }
    Ok(x.reshape((b, h / r, r, w / r, r, c))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h / r, w / r, r * r * c))?)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(Error::Shape(format!(
            "patch splitting: {c} channels not divisible by ratio^2 = {}",
            r * r
        )));
    }
    let c_out = c / (r * r);
    Ok(x.reshape((b, h, w, r, r, c_out))?
        .permute((0, 1, 3, 2, 4, 5))?
        .reshape((b, h * r, w * r, c_out))?)
}

/// Depth-to-space by `ratio` followed by a linear map.
#[derive(Debug, Clone)]
pub struct PatchSplit {
    pub ratio: usize,
    pub proj: Linear,
}

impl PatchSplit {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        ratio: usize,
        c_in: usize,
        c_out: usize,
    ) -> Result<Self> {
        if c_in % (ratio * ratio) != 0 {
            return Err(Error::Shape(format!(
                "patch splitting: {c_in} channels not divisible by ratio^2 = {}",
                ratio * ratio
            )));
        }
        Ok(Self {
            ratio,
            // resampling has no norm after it, so keep activations at unit scale
            proj: Linear::with_init(store, name, c_in / (ratio * ratio), c_out, Init::LeCun(c_in / (ratio * ratio)))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.proj.forward(&depth_to_space(x, self.ratio)?)
    }
}

/// Encoder-to-decoder shortcut: 1x1 (c), 3x3 (2c), 3x3 (2c), 1x1 (c), then
/// added to the decoder feature. GELU follows every convolution but the last.
#[derive(Debug, Clone)]
pub struct Lateral {
    pub convs: [Conv2d; 4],
}

impl Lateral {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        Ok(Self {
            convs: [
                Conv2d::new(store, &format!("{name}.conv1"), c, c, 1)?,
                Conv2d::new(store, &format!("{name}.conv2"), c, 2 * c, 3)?,
                Conv2d::new(store, &format!("{name}.conv3"), 2 * c, 2 * c, 3)?,
                Conv2d::new(store, &format!("{name}.conv4"), 2 * c, c, 1)?,
            ],
        })
    }

    pub fn forward(&self, enc: &Tensor, dec: &Tensor) -> Result<Tensor> {
        if enc.dims() != dec.dims() {
            return Err(Error::Shape(format!(
                "lateral connection: encoder feature {:?} vs decoder feature {:?}",
                enc.dims(),
                dec.dims()
            )));
        }
        let mut x = to_nchw(enc)?;
        for (i, conv) in self.convs.iter().enumerate() {
            x = conv.forward_nchw(&x)?;
            if i < 3 {
                x = gelu(&x)?;
            }
        }
        Ok((to_nhwc(&x)? + dec)?)
    }
}
