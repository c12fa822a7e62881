//! Image conversions, resizing and PNG I/O shared across modules.

use std::path::Path;

use candle::{DType, Device, Tensor};
use image::{GrayImage, Luma, Rgb, Rgb32FImage, RgbImage};

use crate::{Error, Result};

pub fn to_rgb32f(img: &RgbImage) -> Rgb32FImage {
    let (w, h) = img.dimensions();
    Rgb32FImage::from_fn(w, h, |x, y| {
        let p = img.get_pixel(x, y);
        Rgb([p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0])
    })
}

/// Clamp to [0, 1] and quantize to 8 bits with round-half-up.
pub fn to_rgb8(img: &Rgb32FImage) -> RgbImage {
    let (w, h) = img.dimensions();
    RgbImage::from_fn(w, h, |x, y| {
        let p = img.get_pixel(x, y);
        Rgb([quantize(p[0]), quantize(p[1]), quantize(p[2])])
    })
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// BT.601 luma rounded to 8 bits.
pub fn luma8(img: &RgbImage) -> Vec<u8> {
    img.pixels()
        .map(|p| {
            let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
            y.round().clamp(0.0, 255.0) as u8
        })
        .collect()
}

/// 2x box-filter downsampling.
pub fn downsample2(img: &Rgb32FImage) -> Result<Rgb32FImage> {
    let (w, h) = img.dimensions();
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::Shape(format!("cannot halve a {w}x{h} image")));
    }
    Ok(Rgb32FImage::from_fn(w / 2, h / 2, |x, y| {
        let mut acc = [0f32; 3];
        for (dx, dy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let p = img.get_pixel(2 * x + dx, 2 * y + dy);
            for c in 0..3 {
                acc[c] += p[c];
            }
        }
        Rgb(acc.map(|v| v / 4.0))
    }))
}

/// 2x nearest-neighbour downsampling; keeps binary masks binary.
pub fn downsample2_nearest(mask: &GrayImage) -> Result<GrayImage> {
    let (w, h) = mask.dimensions();
    if w % 2 != 0 || h % 2 != 0 {
        return Err(Error::Shape(format!("cannot halve a {w}x{h} mask")));
    }
    Ok(GrayImage::from_fn(w / 2, h / 2, |x, y| *mask.get_pixel(2 * x, 2 * y)))
}

/// Stack images into a `(batch, height, width, 3)` tensor.
pub fn images_to_tensor(images: &[&Rgb32FImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(images.len() * (w * h * 3) as usize);
    for img in images {
        if img.dimensions() != (w, h) {
            return Err(Error::Shape(format!(
                "batch mixes {w}x{h} and {}x{} images",
                img.width(),
                img.height()
            )));
        }
        data.extend_from_slice(img.as_raw());
    }
    let t = Tensor::from_vec(data, (images.len(), h as usize, w as usize, 3), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Stack binary masks (values 0/1) into a `(batch, height, width, 1)` tensor.
pub fn masks_to_tensor(masks: &[&GrayImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let Some(first) = masks.first() else {
        return Err(Error::Shape("empty mask batch".into()));
    };
    let (w, h) = first.dimensions();
    let mut data = Vec::with_capacity(masks.len() * (w * h) as usize);
    for m in masks {
        if m.dimensions() != (w, h) {
            return Err(Error::Shape("batch mixes mask sizes".into()));
        }
        data.extend(m.as_raw().iter().map(|&v| if v > 0 { 1f32 } else { 0f32 }));
    }
    let t = Tensor::from_vec(data, (masks.len(), h as usize, w as usize, 1), device)?;
    Ok(t.to_dtype(dtype)?)
}

/// Split a `(batch, height, width, 3)` tensor into images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<Rgb32FImage>> {
    let (b, h, w, c) = t.dims4()?;
    if c != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {c}")));
    }
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let n = h * w * 3;
    Ok((0..b)
        .map(|i| {
            Rgb32FImage::from_raw(w as u32, h as u32, data[i * n..(i + 1) * n].to_vec())
                .expect("buffer length matches dimensions")
        })
        .collect())
}

pub fn read_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_rgb8())
}

pub fn read_gray(path: &Path) -> Result<GrayImage> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(img.to_luma8())
}

pub fn write_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
}

/// Binary 0/1 mask to a viewable 0/255 image.
pub fn mask_to_visible(mask: &GrayImage) -> GrayImage {
    let (w, h) = mask.dimensions();
    GrayImage::from_fn(w, h, |x, y| Luma([if mask.get_pixel(x, y)[0] > 0 { 255 } else { 0 }]))
}

/// Any non-zero pixel counts as foreground.
pub fn mask_from_visible(img: &GrayImage) -> GrayImage {
    let (w, h) = img.dimensions();
    GrayImage::from_fn(w, h, |x, y| Luma([u8::from(img.get_pixel(x, y)[0] > 127)]))
}
