//! Evaluation metrics for the three tasks and dataset-level evaluation.
//!
//! Removal metrics compare 8-bit RGB images. Segmentation and tamper scores
//! come from pixel confusion counts accumulated over a whole dataset.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle::{DType, Device};
use image::{GrayImage, Rgb32FImage, RgbImage};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::codec::{decode_segmentation, decode_tamper};
use crate::imageops::{images_to_tensor, luma8, read_rgb, to_rgb32f, to_rgb8};
use crate::losses::ConvStack;
use crate::synthdata::{load_record, read_manifest};
use crate::{Error, Model, Result, TaskId};

pub const REPORT_VERSION: u32 = 1;
pub const PSNR_CAP: f64 = 100.0;
/// Luma difference above which a pixel counts as an error pixel.
pub const ERROR_THRESHOLD: i32 = 20;
pub const PREDICTIONS_FILE: &str = "predictions.json";

fn check_dims(a: (u32, u32), b: (u32, u32)) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("image sizes differ: {a:?} vs {b:?}")));
    }
    Ok(())
}

fn mse8(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a.dimensions(), b.dimensions())?;
    let n = a.as_raw().len();
    if n == 0 {
        return Err(Error::Shape("empty image".into()));
    }
    let sum: f64 = a
        .as_raw()
        .iter()
        .zip(b.as_raw())
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum();
    Ok(sum / n as f64)
}

/// Peak signal-to-noise ratio in dB, capped at 100.
pub fn psnr(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    let mse = mse8(a, b)?;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

/// `mean(((a - b) / 255)^2) * 100`.
pub fn mse_percent(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(mse8(a, b)? / (255.0 * 255.0) * 100.0)
}

fn luma_f64(img: &RgbImage) -> Vec<f64> {
    img.pixels()
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_kernel() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of a row-major `w x h` signal.
fn filter_valid(x: &[f64], w: usize, h: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; ow * h];
    for y in 0..h {
        for ox in 0..ow {
            rows[y * ow + ox] = (0..n).map(|i| k[i] * x[y * w + ox + i]).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for oy in 0..oh {
        for ox in 0..ow {
            out[oy * ow + ox] = (0..n).map(|i| k[i] * rows[(oy + i) * ow + ox]).sum();
        }
    }
    out
}

/// Mean structural similarity of BT.601 luma, in percent.
pub fn mssim(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    check_dims(a.dimensions(), b.dimensions())?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "{w}x{h} image is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let k = gaussian_kernel();
    let x = luma_f64(a);
    let y = luma_f64(b);
    let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
    let mu_x = filter_valid(&x, w, h, &k);
    let mu_y = filter_valid(&y, w, h, &k);
    let xx = filter_valid(&prod(&x, &x), w, h, &k);
    let yy = filter_valid(&prod(&y, &y), w, h, &k);
    let xy = filter_valid(&prod(&x, &y), w, h, &k);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let n = mu_x.len();
    let total: f64 = (0..n)
        .map(|i| {
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sx = xx[i] - mx * mx;
            let sy = yy[i] - my * my;
            let sxy = xy[i] - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2))
        })
        .sum();
    Ok(total / n as f64 * 100.0)
}

/// Luma-domain errors: average absolute gray difference, error-pixel
/// fraction and the fraction of error pixels whose four neighbours (all in
/// bounds) are error pixels too. Both fractions use the pixel total.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GrayErrors {
    pub age: f64,
    pub peps: f64,
    pub pceps: f64,
}

pub fn gray_errors(a: &RgbImage, b: &RgbImage) -> Result<GrayErrors> {
    check_dims(a.dimensions(), b.dimensions())?;
    let (w, h) = (a.width() as usize, a.height() as usize);
    let (ga, gb) = (luma8(a), luma8(b));
    let diff: Vec<i32> = ga.iter().zip(&gb).map(|(&x, &y)| (x as i32 - y as i32).abs()).collect();
    let err: Vec<bool> = diff.iter().map(|&d| d > ERROR_THRESHOLD).collect();
    let n = (w * h) as f64;
    let mut connected = 0usize;
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            if err[i] && err[i - 1] && err[i + 1] && err[i - w] && err[i + w] {
                connected += 1;
            }
        }
    }
    Ok(GrayErrors {
        age: diff.iter().map(|&d| d as f64).sum::<f64>() / n,
        peps: err.iter().filter(|&&e| e).count() as f64 / n,
        pceps: connected as f64 / n,
    })
}

pub fn age(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(gray_errors(a, b)?.age)
}

pub fn peps(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(gray_errors(a, b)?.peps)
}

pub fn pceps(a: &RgbImage, b: &RgbImage) -> Result<f64> {
    Ok(gray_errors(a, b)?.pceps)
}

/// Pixel confusion counts of one class against the rest.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

/// IoU, precision, recall and F-measure in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub iou: f64,
    pub p: f64,
    pub r: f64,
    pub f: f64,
}

impl ConfusionCounts {
    pub fn add(&mut self, o: &ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// A ratio whose denominator is zero scores 100 when neither mask has
    /// any foreground and 0 otherwise.
    pub fn scores(&self) -> Scores {
        let both_empty = self.tp + self.fp + self.fn_ == 0;
        let ratio = |num: u64, den: u64| {
            if den == 0 {
                if both_empty {
                    100.0
                } else {
                    0.0
                }
            } else {
                num as f64 / den as f64 * 100.0
            }
        };
        let iou = ratio(self.tp, self.tp + self.fp + self.fn_);
        let p = ratio(self.tp, self.tp + self.fp);
        let r = ratio(self.tp, self.tp + self.fn_);
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Scores { iou, p, r, f }
    }
}

fn confusion_of(pred: &GrayImage, gt: &GrayImage, class: u8) -> ConfusionCounts {
    let mut c = ConfusionCounts::default();
    for (p, g) in pred.as_raw().iter().zip(gt.as_raw()) {
        match (*p == class, *g == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    c
}

fn check_values(m: &GrayImage, max: u8, what: &str) -> Result<()> {
    if let Some(v) = m.as_raw().iter().find(|&&v| v > max) {
        return Err(Error::InvalidLabel(format!("{what} contains value {v}")));
    }
    Ok(())
}

/// Foreground confusion of two 0/1 masks.
pub fn seg_confusion(pred: &GrayImage, gt: &GrayImage) -> Result<ConfusionCounts> {
    check_dims(pred.dimensions(), gt.dimensions())?;
    check_values(pred, 1, "segmentation prediction")?;
    check_values(gt, 1, "segmentation ground truth")?;
    Ok(confusion_of(pred, gt, 1))
}

pub fn seg_scores(pred: &GrayImage, gt: &GrayImage) -> Result<Scores> {
    Ok(seg_confusion(pred, gt)?.scores())
}

/// One-vs-rest confusion for the tampered and real classes.
pub fn tamper_confusion(pred: &GrayImage, gt: &GrayImage) -> Result<[ConfusionCounts; 2]> {
    check_dims(pred.dimensions(), gt.dimensions())?;
    check_values(pred, 2, "tamper prediction")?;
    check_values(gt, 2, "tamper ground truth")?;
    Ok([confusion_of(pred, gt, 0), confusion_of(pred, gt, 1)])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TamperScores {
    pub tampered: Scores,
    pub real: Scores,
    pub miou: f64,
    pub mf: f64,
}

impl TamperScores {
    pub fn from_counts(c: &[ConfusionCounts; 2]) -> Self {
        let tampered = c[0].scores();
        let real = c[1].scores();
        TamperScores {
            tampered,
            real,
            miou: (tampered.iou + real.iou) / 2.0,
            mf: (tampered.f + real.f) / 2.0,
        }
    }
}

pub fn tamper_scores(pred: &GrayImage, gt: &GrayImage) -> Result<TamperScores> {
    Ok(TamperScores::from_counts(&tamper_confusion(pred, gt)?))
}

/// Maps images to fixed-length vectors for the Fréchet distance.
pub trait ImageEmbedder {
    fn name(&self) -> String;
    fn embed(&self, images: &[&Rgb32FImage]) -> Result<Vec<Vec<f64>>>;
}

/// The frozen loss-network stack used as an embedder.
pub struct StackEmbedder {
    pub stack: ConvStack,
    pub label: String,
}

impl StackEmbedder {
    pub fn default_embedder() -> Result<Self> {
        Ok(Self {
            stack: ConvStack::default_stack(DType::F32)?,
            label: "default-convstack-128".into(),
        })
    }

    pub fn from_vgg16(path: &Path) -> Result<Self> {
        Ok(Self {
            stack: ConvStack::load_vgg16(path, DType::F32)?,
            label: format!("vgg16:{}", path.display()),
        })
    }
}

impl ImageEmbedder for StackEmbedder {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn embed(&self, images: &[&Rgb32FImage]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let x = images_to_tensor(chunk, DType::F32, &Device::Cpu)?;
            let e = self.stack.embed(&x)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            out.extend(e);
        }
        Ok(out)
    }
}

/// Added to both covariance diagonals before the matrix square root.
pub const FID_EPS: f64 = 1e-6;

fn gaussian_fit(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = x.len();
    if n < 2 {
        return Err(Error::Shape(format!("Fréchet distance needs at least 2 samples per set, got {n}")));
    }
    let d = x[0].len();
    if d == 0 || x.iter().any(|v| v.len() != d) {
        return Err(Error::Shape("embeddings must share one positive dimension".into()));
    }
    let m = DMatrix::from_fn(n, d, |i, j| x[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).sum() / n as f64);
    let mut centered = m;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let mut cov = centered.transpose() * &centered / (n - 1) as f64;
    for i in 0..d {
        cov[(i, i)] += FID_EPS;
    }
    Ok((mean, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let s = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&s) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two embedding sets.
pub fn frechet_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = gaussian_fit(a)?;
    let (mu_b, cov_b) = gaussian_fit(b)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Shape("embedding dimensions differ between sets".into()));
    }
    let root_a = sqrt_psd(&cov_a);
    let inner = &root_a * &cov_b * &root_a;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_cross: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let diff = (&mu_a - &mu_b).norm_squared();
    Ok((diff + cov_a.trace() + cov_b.trace() - 2.0 * tr_cross).max(0.0))
}

pub fn fid(a: &[&Rgb32FImage], b: &[&Rgb32FImage], embedder: &dyn ImageEmbedder) -> Result<f64> {
    frechet_distance(&embedder.embed(a)?, &embedder.embed(b)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RemovalMetrics {
    pub psnr: f64,
    pub mssim: f64,
    pub mse: f64,
    pub age: f64,
    pub peps: f64,
    pub pceps: f64,
    /// Absent with fewer than two images.
    pub fid: Option<f64>,
}

/// Per-image values, one CSV row each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRow {
    pub id: String,
    pub values: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub version: u32,
    pub task: TaskId,
    pub samples: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embedder: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub removal: Option<RemovalMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<Scores>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tamper: Option<TamperScores>,
    #[serde(skip)]
    pub per_image: Vec<ImageRow>,
}

impl MetricReport {
    /// Human-readable two-column table.
    pub fn table(&self) -> String {
        let mut rows: Vec<(String, String)> = vec![
            ("task".into(), self.task.to_string()),
            ("samples".into(), self.samples.to_string()),
        ];
        let num = |v: f64| format!("{v:.4}");
        if let Some(r) = &self.removal {
            rows.extend([
                ("PSNR (dB)".into(), num(r.psnr)),
                ("MSSIM (%)".into(), num(r.mssim)),
                ("MSE (%)".into(), num(r.mse)),
                ("AGE".into(), num(r.age)),
                ("pEPs".into(), num(r.peps)),
                ("pCEPs".into(), num(r.pceps)),
                ("FID".into(), r.fid.map(num).unwrap_or_else(|| "n/a".into())),
            ]);
            if let Some(e) = &self.embedder {
                rows.push(("FID embedder".into(), e.clone()));
            }
        }
        if let Some(s) = &self.segmentation {
            rows.extend([
                ("fgIoU (%)".into(), num(s.iou)),
                ("P (%)".into(), num(s.p)),
                ("R (%)".into(), num(s.r)),
                ("F (%)".into(), num(s.f)),
            ]);
        }
        if let Some(t) = &self.tamper {
            for (label, s) in [("tampered", &t.tampered), ("real", &t.real)] {
                rows.extend([
                    (format!("{label} IoU (%)"), num(s.iou)),
                    (format!("{label} P (%)"), num(s.p)),
                    (format!("{label} R (%)"), num(s.r)),
                    (format!("{label} F (%)"), num(s.f)),
                ]);
            }
            rows.extend([("mIoU (%)".into(), num(t.miou)), ("mF (%)".into(), num(t.mf))]);
        }
        let width = rows.iter().map(|r| r.0.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            let _ = writeln!(out, "{k:<width$}  {v}");
        }
        out
    }

    /// One header line plus one line per image.
    pub fn per_image_csv(&self) -> String {
        let mut out = String::new();
        let Some(first) = self.per_image.first() else {
            return "id\n".into();
        };
        let keys: Vec<&String> = first.values.keys().collect();
        let _ = writeln!(out, "id,{}", keys.iter().map(|k| k.as_str()).collect::<Vec<_>>().join(","));
        for row in &self.per_image {
            let vals: Vec<String> = keys.iter().map(|k| row.values[*k].to_string()).collect();
            let _ = writeln!(out, "{},{}", row.id, vals.join(","));
        }
        out
    }
}

/// Decoded form of a prediction or ground truth for metric computation.
#[derive(Debug, Clone)]
enum Decoded8 {
    Image(RgbImage),
    Mask(GrayImage),
}

fn decode8(task: TaskId, img: &RgbImage) -> Decoded8 {
    match task {
        TaskId::Removal => Decoded8::Image(img.clone()),
        TaskId::Segmentation => Decoded8::Mask(decode_segmentation(&to_rgb32f(img))),
        TaskId::Tamper => Decoded8::Mask(decode_tamper(&to_rgb32f(img))),
    }
}

/// Accumulates metrics one image pair at a time.
pub struct Accumulator {
    task: TaskId,
    rows: Vec<ImageRow>,
    sums: [f64; 6],
    preds: Vec<Rgb32FImage>,
    gts: Vec<Rgb32FImage>,
    seg: ConfusionCounts,
    tamper: [ConfusionCounts; 2],
}

impl Accumulator {
    pub fn new(task: TaskId) -> Self {
        Self {
            task,
            rows: Vec::new(),
            sums: [0.0; 6],
            preds: Vec::new(),
            gts: Vec::new(),
            seg: ConfusionCounts::default(),
            tamper: Default::default(),
        }
    }

    /// `pred` and `gt` are 8-bit images in the task's output colour space.
    pub fn add(&mut self, id: &str, pred: &RgbImage, gt: &RgbImage) -> Result<()> {
        if pred.dimensions() != gt.dimensions() {
            return Err(Error::record(
                id,
                format!("prediction {:?} and ground truth {:?} differ in size", pred.dimensions(), gt.dimensions()),
            ));
        }
        let mut values = BTreeMap::new();
        match (decode8(self.task, pred), decode8(self.task, gt)) {
            (Decoded8::Image(p), Decoded8::Image(g)) => {
                let ge = gray_errors(&p, &g)?;
                let v = [psnr(&p, &g)?, mssim(&p, &g)?, mse_percent(&p, &g)?, ge.age, ge.peps, ge.pceps];
                for (s, x) in self.sums.iter_mut().zip(v) {
                    *s += x;
                }
                for (k, x) in ["psnr", "mssim", "mse", "age", "peps", "pceps"].iter().zip(v) {
                    values.insert(k.to_string(), x);
                }
                self.preds.push(to_rgb32f(&p));
                self.gts.push(to_rgb32f(&g));
            }
            (Decoded8::Mask(p), Decoded8::Mask(g)) if self.task == TaskId::Segmentation => {
                let c = seg_confusion(&p, &g)?;
                self.seg.add(&c);
                let s = c.scores();
                values.extend([("iou".into(), s.iou), ("p".into(), s.p), ("r".into(), s.r), ("f".into(), s.f)]);
            }
            (Decoded8::Mask(p), Decoded8::Mask(g)) => {
                let c = tamper_confusion(&p, &g)?;
                self.tamper[0].add(&c[0]);
                self.tamper[1].add(&c[1]);
                let s = TamperScores::from_counts(&c);
                values.extend([("miou".into(), s.miou), ("mf".into(), s.mf)]);
            }
            _ => unreachable!("decode8 is consistent per task"),
        }
        self.rows.push(ImageRow {
            id: id.to_string(),
            values,
        });
        Ok(())
    }

    pub fn finish(self, embedder: Option<&dyn ImageEmbedder>) -> Result<MetricReport> {
        let n = self.rows.len();
        let mut report = MetricReport {
            version: REPORT_VERSION,
            task: self.task,
            samples: n,
            embedder: None,
            removal: None,
            segmentation: None,
            tamper: None,
            per_image: Vec::new(),
        };
        match self.task {
            TaskId::Removal if n > 0 => {
                let m = self.sums.map(|s| s / n as f64);
                let fid = match embedder {
                    Some(e) if n >= 2 => {
                        report.embedder = Some(e.name());
                        let p: Vec<&Rgb32FImage> = self.preds.iter().collect();
                        let g: Vec<&Rgb32FImage> = self.gts.iter().collect();
                        Some(fid(&p, &g, e)?)
                    }
                    _ => None,
                };
                report.removal = Some(RemovalMetrics {
                    psnr: m[0],
                    mssim: m[1],
                    mse: m[2],
                    age: m[3],
                    peps: m[4],
                    pceps: m[5],
                    fid,
                });
            }
            TaskId::Removal => {}
            TaskId::Segmentation => report.segmentation = Some(self.seg.scores()),
            TaskId::Tamper => report.tamper = Some(TamperScores::from_counts(&self.tamper)),
        }
        report.per_image = self.rows;
        Ok(report)
    }
}

/// Where predictions come from.
pub enum PredictionSource<'a> {
    Model(&'a Model),
    /// Directory of `<id>.png` files with an optional `predictions.json`
    /// naming the task.
    Dir(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionIndex {
    pub task: TaskId,
    pub ids: Vec<String>,
}

/// Runs the metrics of `task` over every record of that task in the dataset.
pub fn evaluate_dataset(
    source: &PredictionSource<'_>,
    gt_dir: &Path,
    task: TaskId,
    embedder: Option<&dyn ImageEmbedder>,
) -> Result<MetricReport> {
    let manifest = read_manifest(gt_dir)?;
    let records: Vec<_> = manifest.records.iter().filter(|r| r.task == task).collect();
    if records.is_empty() && !manifest.records.is_empty() {
        let found: std::collections::BTreeSet<String> =
            manifest.records.iter().map(|r| r.task.to_string()).collect();
        return Err(Error::Dataset {
            path: gt_dir.to_path_buf(),
            msg: format!("task mismatch: requested {task}, dataset holds {found:?}"),
        });
    }
    if let PredictionSource::Dir(dir) = source {
        let index_path = dir.join(PREDICTIONS_FILE);
        if index_path.is_file() {
            let text = std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
            let index: PredictionIndex = serde_json::from_str(&text)?;
            if index.task != task {
                return Err(Error::Dataset {
                    path: dir.clone(),
                    msg: format!("task mismatch: predictions are for {}, requested {task}", index.task),
                });
            }
        }
    }
    let mut acc = Accumulator::new(task);
    for r in records {
        let sample = load_record(gt_dir, r)?;
        let pred = match source {
            PredictionSource::Model(m) => to_rgb8(&m.infer(&to_rgb32f(&sample.input), task)?),
            PredictionSource::Dir(dir) => read_rgb(&dir.join(format!("{}.png", r.id)))
                .map_err(|e| Error::record(&r.id, e.to_string()))?,
        };
        acc.add(&r.id, &pred, &sample.target)?;
    }
    acc.finish(embedder)
}
