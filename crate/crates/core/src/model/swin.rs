//! Windowed transformer block with scaled cosine attention, a learnable
//! relative-position bias table and residual post-normalization.

use candle::{DType, Device, Tensor};

use super::layers::{gelu, l2_normalize_last, softmax_last, LayerNorm, Linear};
use super::params::{Init, ParamStore};
use crate::config::StageSpec;
use crate::{Error, Result};

/// Upper bound of the per-head attention temperature, as a log.
const MAX_LOG_SCALE: f64 = 4.605_170_185_988_091; // ln(100)
const MASK_VALUE: f64 = -100.0;

/// How a feature map of a given size is cut into windows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowGeometry {
    pub size: usize,
    pub shift: usize,
    pub pad_top: usize,
    pub pad_bottom: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl WindowGeometry {
    pub fn padded(&self, h: usize, w: usize) -> (usize, usize) {
        (
            h + self.pad_top + self.pad_bottom,
            w + self.pad_left + self.pad_right,
        )
    }
}

#[derive(Debug, Clone)]
pub struct WindowedBlock {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shifted: bool,
    pub qkv: Linear,
    pub proj: Linear,
    pub logit_scale: Tensor,
    pub rpb_table: Tensor,
    pub norm1: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
    pub norm2: LayerNorm,
}

impl WindowedBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: &StageSpec,
        mlp_hidden: usize,
        shifted: bool,
    ) -> Result<Self> {
        let StageSpec {
            dim, heads, window, ..
        } = *spec;
        if dim % heads != 0 {
            return Err(Error::Config(format!(
                "{name}: dim {dim} is not divisible by {heads} heads"
            )));
        }
        let table = (2 * window - 1) * (2 * window - 1);
        Ok(Self {
            dim,
            heads,
            window,
            shifted,
            qkv: Linear::new(store, &format!("{name}.attn.qkv"), dim, 3 * dim)?,
            proj: Linear::new(store, &format!("{name}.attn.proj"), dim, dim)?,
            logit_scale: store.create(
                &format!("{name}.attn.logit_scale"),
                &[heads],
                Init::Const(10f64.ln()),
            )?,
            rpb_table: store.create(
                &format!("{name}.attn.rpb_table"),
                &[table, heads],
                Init::TruncNormal(0.02),
            )?,
            // zero gain: every block starts as the identity
            norm1: LayerNorm::with_gain(store, &format!("{name}.norm1"), dim, 0.0)?,
            fc1: Linear::new(store, &format!("{name}.mlp.fc1"), dim, mlp_hidden)?,
            fc2: Linear::new(store, &format!("{name}.mlp.fc2"), mlp_hidden, dim)?,
            norm2: LayerNorm::with_gain(store, &format!("{name}.norm2"), dim, 0.0)?,
        })
    }

    /// Maps no larger than the window are attended as one unshifted window;
    /// otherwise sides are zero-padded symmetrically to a window multiple.
    pub fn geometry(&self, h: usize, w: usize) -> WindowGeometry {
        let (size, shift) = if h.min(w) <= self.window {
            (h.min(w), 0)
        } else {
            (self.window, if self.shifted { self.window / 2 } else { 0 })
        };
        let ph = h.div_ceil(size) * size - h;
        let pw = w.div_ceil(size) * size - w;
        WindowGeometry {
            size,
            shift,
            pad_top: ph / 2,
            pad_bottom: ph - ph / 2,
            pad_left: pw / 2,
            pad_right: pw - pw / 2,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let attn = self.attention(x)?;
        let x = (x + self.norm1.forward(&attn)?)?;
        let mlp = self.fc2.forward(&gelu(&self.fc1.forward(&x)?)?)?;
        Ok((&x + self.norm2.forward(&mlp)?)?)
    }

    /// The attention branch alone (no residual, no normalization).
    pub fn attention(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.attention_impl(x)?.0)
    }

    /// Attention probabilities, `(batch * windows, heads, tokens, tokens)`.
    pub fn attention_weights(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.attention_impl(x)?.1)
    }

    fn attention_impl(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, h, w, c) = x.dims4()?;
        if c != self.dim {
            return Err(Error::Shape(format!(
                "windowed block expects {} channels, got {c}",
                self.dim
            )));
        }
        let geo = self.geometry(h, w);
        let (hp, wp) = geo.padded(h, w);
        let mut xs = x
            .pad_with_zeros(1, geo.pad_top, geo.pad_bottom)?
            .pad_with_zeros(2, geo.pad_left, geo.pad_right)?;
        if geo.shift > 0 {
            let s = geo.shift as i32;
            xs = xs.roll(-s, 1)?.roll(-s, 2)?;
        }
        let ws = geo.size;
        let (nh, nw) = (hp / ws, wp / ws);
        let n = ws * ws;
        let windows = xs
            .reshape((b, nh, ws, nw, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b * nh * nw, n, c))?;

        let mask = if geo.shift > 0 {
            Some(shift_mask(hp, wp, ws, geo.shift, x.dtype(), x.device())?)
        } else {
            None
        };
        let (out, probs) = self.window_attention(&windows, ws, mask.as_ref())?;

        let mut y = out
            .reshape((b, nh, nw, ws, ws, c))?
            .permute((0, 1, 3, 2, 4, 5))?
            .reshape((b, hp, wp, c))?;
        if geo.shift > 0 {
            let s = geo.shift as i32;
            y = y.roll(s, 1)?.roll(s, 2)?;
        }
        let y = y.narrow(1, geo.pad_top, h)?.narrow(2, geo.pad_left, w)?;
        Ok((y.contiguous()?, probs))
    }

    /// Multi-head cosine attention within windows of `ws * ws` tokens.
    /// `mask` is additive with shape `(windows, tokens, tokens)`.
    fn window_attention(
        &self,
        xw: &Tensor,
        ws: usize,
        mask: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (bw, n, c) = xw.dims3()?;
        let heads = self.heads;
        let hd = c / heads;
        let qkv = self.qkv.forward(xw)?;
        let split = |i: usize| -> Result<Tensor> {
            Ok(qkv
                .narrow(2, i * c, c)?
                .reshape((bw, n, heads, hd))?
                .transpose(1, 2)?
                .contiguous()?)
        };
        let q = l2_normalize_last(&split(0)?)?;
        let k = l2_normalize_last(&split(1)?)?;
        let v = split(2)?;

        let scale = self
            .logit_scale
            .minimum(MAX_LOG_SCALE)?
            .exp()?
            .reshape((1, heads, 1, 1))?;
        let mut logits = q.matmul(&k.t()?.contiguous()?)?.broadcast_mul(&scale)?;

        let idx = relative_position_index(ws, self.window, xw.device())?;
        let bias = self
            .rpb_table
            .index_select(&idx, 0)?
            .reshape((n, n, heads))?
            .permute((2, 0, 1))?
            .unsqueeze(0)?;
        logits = logits.broadcast_add(&bias)?;

        if let Some(mask) = mask {
            let nwin = mask.dim(0)?;
            logits = logits
                .reshape((bw / nwin, nwin, heads, n, n))?
                .broadcast_add(&mask.reshape((1, nwin, 1, n, n))?)?
                .reshape((bw, heads, n, n))?;
        }
        let probs = softmax_last(&logits)?;
        let out = probs
            .matmul(&v)?
            .transpose(1, 2)?
            .reshape((bw, n, c))?;
        Ok((self.proj.forward(&out)?, probs))
    }
}

/// Flattened `(ws*ws) * (ws*ws)` indices into a bias table built for windows
/// of side `table_window >= ws`.
pub fn relative_position_index(ws: usize, table_window: usize, device: &Device) -> Result<Tensor> {
    let side = 2 * table_window - 1;
    let n = ws * ws;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = ((i / ws) as isize, (i % ws) as isize);
        for j in 0..n {
            let (yj, xj) = ((j / ws) as isize, (j % ws) as isize);
            let dy = (yi - yj + table_window as isize - 1) as usize;
            let dx = (xi - xj + table_window as isize - 1) as usize;
            idx.push((dy * side + dx) as u32);
        }
    }
    Ok(Tensor::from_vec(idx, n * n, device)?)
}

/// Region labels after the cyclic shift; tokens from different regions must
/// not attend to each other.
pub fn shift_region_labels(hp: usize, wp: usize, ws: usize, shift: usize) -> Vec<u8> {
    let region = |v: usize, len: usize| -> u8 {
        if v < len - ws {
            0
        } else if v < len - shift {
            1
        } else {
            2
        }
    };
    let mut labels = Vec::with_capacity(hp * wp);
    for y in 0..hp {
        for x in 0..wp {
            labels.push(region(y, hp) * 3 + region(x, wp));
        }
    }
    labels
}

fn shift_mask(
    hp: usize,
    wp: usize,
    ws: usize,
    shift: usize,
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let labels = shift_region_labels(hp, wp, ws, shift);
    let (nh, nw) = (hp / ws, wp / ws);
    let n = ws * ws;
    let mut mask = Vec::with_capacity(nh * nw * n * n);
    for wy in 0..nh {
        for wx in 0..nw {
            let win: Vec<u8> = (0..n)
                .map(|t| labels[(wy * ws + t / ws) * wp + wx * ws + t % ws])
                .collect();
            for &a in &win {
                for &b in &win {
                    mask.push(if a == b { 0.0 } else { MASK_VALUE });
                }
            }
        }
    }
    Ok(Tensor::from_vec(mask, (nh * nw, n, n), device)?.to_dtype(dtype)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle::D;

    fn block(window: usize, heads: usize, dim: usize, shifted: bool, dtype: DType) -> (ParamStore, WindowedBlock) {
        let mut s = ParamStore::seeded(11, dtype);
        let spec = StageSpec::new(1, dim, window, heads, 1, dim);
        let b = WindowedBlock::new(&mut s, "blk", &spec, 4 * dim, shifted).unwrap();
        (s, b)
    }

    #[test]
    fn shape_preserved() {
        for (h, w, shifted) in [(8, 8, false), (16, 16, true), (4, 12, true), (10, 6, false)] {
            let (_, b) = block(4, 2, 8, shifted, DType::F32);
            let x = Tensor::randn(0f32, 1.0, (2, h, w, 8), &Device::Cpu).unwrap();
            assert_eq!(b.forward(&x).unwrap().dims(), &[2, h, w, 8]);
        }
    }

    #[test]
    fn geometry_rules() {
        let (_, b) = block(8, 1, 4, true, DType::F32);
        let g = b.geometry(16, 16);
        assert_eq!((g.size, g.shift), (8, 4));
        let g = b.geometry(4, 4);
        assert_eq!((g.size, g.shift), (4, 0));
        // 12 wide with window 8 pads 4 columns, split 2/2
        let g = b.geometry(16, 12);
        assert_eq!((g.size, g.pad_left, g.pad_right, g.pad_top), (8, 2, 2, 0));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (_, b) = block(4, 2, 8, true, DType::F64);
        let x = Tensor::randn(0f64, 1.0, (1, 8, 8, 8), &Device::Cpu).unwrap();
        let p = b.attention_weights(&x).unwrap();
        assert_eq!(p.dims(), &[4, 2, 16, 16]);
        let sums = p.sum(D::Minus1).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-12));
    }

    #[test]
    fn shift_mask_blocks_cross_region_pairs() {
        let labels = shift_region_labels(8, 8, 4, 2);
        // bottom-right window holds four regions
        let m = shift_mask(8, 8, 4, 2, DType::F64, &Device::Cpu).unwrap();
        let last = m.get(3).unwrap().to_vec2::<f64>().unwrap();
        let tok = |t: usize| labels[(4 + t / 4) * 8 + 4 + t % 4];
        for i in 0..16 {
            for j in 0..16 {
                let expect = if tok(i) == tok(j) { 0.0 } else { MASK_VALUE };
                assert_eq!(last[i][j], expect);
            }
        }
        // top-left window is a single region
        let first = m.get(0).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(first.iter().all(|&v| v == 0.0));
    }

    /// Scalar-loop evaluation of one unshifted 2x2 window.
    #[test]
    fn single_window_matches_brute_force() {
        let (c, heads) = (4, 2);
        let (_, blk) = block(2, heads, c, false, DType::F64);
        let x = Tensor::randn(0f64, 1.0, (1, 2, 2, c), &Device::Cpu).unwrap();
        let got = blk.attention(&x).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();

        let xv = x.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let wqkv = blk.qkv.weight.to_vec2::<f64>().unwrap();
        let bqkv = blk.qkv.bias.to_vec1::<f64>().unwrap();
        let wp = blk.proj.weight.to_vec2::<f64>().unwrap();
        let bp = blk.proj.bias.to_vec1::<f64>().unwrap();
        let ls = blk.logit_scale.to_vec1::<f64>().unwrap();
        let table = blk.rpb_table.to_vec2::<f64>().unwrap();

        let n = 4;
        let hd = c / heads;
        let tok = |t: usize| &xv[t * c..(t + 1) * c];
        let lin = |w: &Vec<Vec<f64>>, b: &Vec<f64>, v: &[f64], row: usize| -> f64 {
            b[row] + (0..v.len()).map(|k| w[row][k] * v[k]).sum::<f64>()
        };
        let mut out = vec![0f64; n * c];
        let mut concat = vec![vec![0f64; c]; n];
        for h in 0..heads {
            let head = |t: usize, part: usize| -> Vec<f64> {
                (0..hd).map(|d| lin(&wqkv, &bqkv, tok(t), part * c + h * hd + d)).collect()
            };
            let unit = |v: Vec<f64>| {
                let norm = (v.iter().map(|a| a * a).sum::<f64>() + 1e-12).sqrt();
                v.into_iter().map(|a| a / norm).collect::<Vec<_>>()
            };
            let scale = ls[h].min(MAX_LOG_SCALE).exp();
            for i in 0..n {
                let qi = unit(head(i, 0));
                let mut logits = Vec::new();
                for j in 0..n {
                    let kj = unit(head(j, 1));
                    let dot: f64 = qi.iter().zip(&kj).map(|(a, b)| a * b).sum();
                    let (dy, dx) = ((i / 2) as isize - (j / 2) as isize + 1, (i % 2) as isize - (j % 2) as isize + 1);
                    let bias = table[(dy * 3 + dx) as usize][h];
                    logits.push(dot * scale + bias);
                }
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..n {
                    let vj = head(j, 2);
                    for d in 0..hd {
                        concat[i][h * hd + d] += e[j] / z * vj[d];
                    }
                }
            }
        }
        for i in 0..n {
            for o in 0..c {
                out[i * c + o] = lin(&wp, &bp, &concat[i], o);
            }
        }
        for (a, b) in got.iter().zip(&out) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn relative_index_center() {
        let idx = relative_position_index(2, 4, &Device::Cpu).unwrap().to_vec1::<u32>().unwrap();
        // self-pairs map to the centre of the 7x7 table
        assert_eq!(idx[0], 24);
        assert_eq!(idx[5], 24);
        assert_eq!(idx.len(), 16);
    }
}
