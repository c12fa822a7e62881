//! Mapping between task ground truth and the shared RGB target space.
//!
//! Every task is posed as RGB-to-RGB translation. Segmentation targets are
//! white strokes on black, tamper targets paint tampered text red, real text
//! green and everything else blue. Predictions are decoded back per task.

use std::fmt;
use std::str::FromStr;

use image::{GrayImage, Luma, Rgb, Rgb32FImage, RgbImage};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Removal = 0,
    Segmentation = 1,
    Tamper = 2,
}

impl TaskId {
    pub const ALL: [TaskId; 3] = [TaskId::Removal, TaskId::Segmentation, TaskId::Tamper];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Result<Self> {
        Self::ALL
            .get(index)
            .copied()
            .ok_or_else(|| Error::UnknownTask(index.to_string()))
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskId::Removal => "removal",
            TaskId::Segmentation => "segmentation",
            TaskId::Tamper => "tamper",
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "removal" => Ok(TaskId::Removal),
            "segmentation" => Ok(TaskId::Segmentation),
            "tamper" => Ok(TaskId::Tamper),
            other => Err(Error::UnknownTask(other.to_string())),
        }
    }
}

/// Per-pixel class of the tampered-text task. The discriminants are the values
/// stored in single-channel class-map PNGs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TamperClass {
    Tampered = 0,
    Real = 1,
    Background = 2,
}

impl TamperClass {
    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(TamperClass::Tampered),
            1 => Some(TamperClass::Real),
            2 => Some(TamperClass::Background),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorMap {
    pub seg_fg: [u8; 3],
    pub seg_bg: [u8; 3],
    pub tamper: [u8; 3],
    pub real: [u8; 3],
    pub background: [u8; 3],
    pub seg_threshold: f32,
}

pub const COLORS: ColorMap = ColorMap {
    seg_fg: [255, 255, 255],
    seg_bg: [0, 0, 0],
    tamper: [255, 0, 0],
    real: [0, 255, 0],
    background: [0, 0, 255],
    seg_threshold: 0.4,
};

impl ColorMap {
    pub fn class_color(&self, class: TamperClass) -> [u8; 3] {
        match class {
            TamperClass::Tampered => self.tamper,
            TamperClass::Real => self.real,
            TamperClass::Background => self.background,
        }
    }
}

/// Task-specific ground truth before encoding.
///
/// Binary masks hold 0/1 per pixel; class maps hold [`TamperClass`] values.
#[derive(Debug, Clone)]
pub enum TaskLabel {
    Removal(RgbImage),
    Segmentation(GrayImage),
    Tamper(GrayImage),
}

impl TaskLabel {
    pub fn task(&self) -> TaskId {
        match self {
            TaskLabel::Removal(_) => TaskId::Removal,
            TaskLabel::Segmentation(_) => TaskId::Segmentation,
            TaskLabel::Tamper(_) => TaskId::Tamper,
        }
    }
}

pub fn encode_target(label: &TaskLabel) -> Result<RgbImage> {
    match label {
        TaskLabel::Removal(img) => Ok(img.clone()),
        TaskLabel::Segmentation(mask) => {
            let (w, h) = mask.dimensions();
            let mut out = RgbImage::new(w, h);
            for (x, y, p) in mask.enumerate_pixels() {
                let color = match p[0] {
                    0 => COLORS.seg_bg,
                    1 => COLORS.seg_fg,
                    v => {
                        return Err(Error::InvalidLabel(format!(
                            "segmentation mask value {v} at ({x}, {y}) is not 0 or 1"
                        )))
                    }
                };
                out.put_pixel(x, y, Rgb(color));
            }
            Ok(out)
        }
        TaskLabel::Tamper(map) => {
            let (w, h) = map.dimensions();
            let mut out = RgbImage::new(w, h);
            for (x, y, p) in map.enumerate_pixels() {
                let class = TamperClass::from_u8(p[0]).ok_or_else(|| {
                    Error::InvalidLabel(format!(
                        "tamper class {} at ({x}, {y}) is outside {{0, 1, 2}}",
                        p[0]
                    ))
                })?;
                out.put_pixel(x, y, Rgb(COLORS.class_color(class)));
            }
            Ok(out)
        }
    }
}

/// Foreground iff the mean of the clamped channels exceeds the threshold.
pub fn decode_segmentation(pred: &Rgb32FImage) -> GrayImage {
    let (w, h) = pred.dimensions();
    GrayImage::from_fn(w, h, |x, y| {
        let p = pred.get_pixel(x, y);
        let mean = (p[0].clamp(0.0, 1.0) + p[1].clamp(0.0, 1.0) + p[2].clamp(0.0, 1.0)) / 3.0;
        Luma([u8::from(mean > COLORS.seg_threshold)])
    })
}

/// Channel argmax; ties resolve in the order R, G, B.
pub fn decode_tamper(pred: &Rgb32FImage) -> GrayImage {
    let (w, h) = pred.dimensions();
    GrayImage::from_fn(w, h, |x, y| {
        let p = pred.get_pixel(x, y);
        let mut best = 0;
        for c in 1..3 {
            if p[c] > p[best] {
                best = c;
            }
        }
        Luma([best as u8])
    })
}

pub fn decode_removal(pred: &Rgb32FImage) -> Rgb32FImage {
    let mut out = pred.clone();
    for v in out.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    out
}

/// Decoded prediction of one task.
#[derive(Debug, Clone)]
pub enum Decoded {
    Removal(RgbImage),
    Segmentation(GrayImage),
    Tamper(GrayImage),
}

pub fn decode(task: TaskId, pred: &Rgb32FImage) -> Decoded {
    match task {
        TaskId::Removal => Decoded::Removal(crate::imageops::to_rgb8(&decode_removal(pred))),
        TaskId::Segmentation => Decoded::Segmentation(decode_segmentation(pred)),
        TaskId::Tamper => Decoded::Tamper(decode_tamper(pred)),
    }
}
