//! Deterministic synthetic samples for all three tasks and the on-disk
//! dataset layout.
//!
//! A scene is a procedural background with text-like glyphs: random
//! polylines stamped with a disc brush inside non-overlapping
//! boxes. All rasterization is integer arithmetic, so a seed produces the same
//! bytes on every platform.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{decode_segmentation, decode_tamper, encode_target, TamperClass, TaskLabel};
use crate::imageops::{mask_from_visible, mask_to_visible, read_gray, read_rgb, to_rgb32f, write_png};
use crate::{Error, Result, TaskId};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Relative weights of the background kinds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackgroundWeights {
    pub flat: u32,
    pub gradient: u32,
    pub noise: u32,
    pub shapes: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackgroundKind {
    Flat,
    Gradient,
    Noise,
    Shapes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    pub image_size: u32,
    /// Inclusive range of glyph boxes per image.
    pub glyphs_per_image: [u32; 2],
    /// Inclusive range of brush diameters in pixels.
    pub stroke_width: [u32; 2],
    pub background: BackgroundWeights,
    pub tamper_fraction: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            glyphs_per_image: [1, 3],
            stroke_width: [2, 3],
            background: BackgroundWeights {
                flat: 1,
                gradient: 1,
                noise: 1,
                shapes: 1,
            },
            tamper_fraction: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.image_size % 32 != 0 {
            return bad(format!("image_size {} is not a positive multiple of 32", self.image_size));
        }
        let [g0, g1] = self.glyphs_per_image;
        if g0 > g1 {
            return bad(format!("glyphs_per_image range [{g0}, {g1}] is empty"));
        }
        let [s0, s1] = self.stroke_width;
        if s0 == 0 || s0 > s1 || s1 > self.image_size / 8 {
            return bad(format!("stroke_width range [{s0}, {s1}] is invalid"));
        }
        let w = self.background;
        if w.flat + w.gradient + w.noise + w.shapes == 0 {
            return bad("background weights are all zero".into());
        }
        if !(0.0..=1.0).contains(&self.tamper_fraction) {
            return bad(format!("tamper_fraction {} is outside [0, 1]", self.tamper_fraction));
        }
        Ok(())
    }

    /// Independent generator for one sample of one task.
    pub fn sample_rng(&self, task: TaskId, index: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((task.index() as u64) << 48) | index);
        rng
    }
}

/// Axis-aligned text box; `x..x+w`, `y..y+h`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TextBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
    #[serde(default)]
    pub tampered: bool,
}

impl TextBox {
    pub fn contains(&self, x: u32, y: u32) -> bool {
        x >= self.x && x < self.x + self.w && y >= self.y && y < self.y + self.h
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    fn overlaps(&self, o: &TextBox) -> bool {
        self.x < o.x + o.w && o.x < self.x + self.w && self.y < o.y + o.h && o.y < self.y + self.h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskSample {
    pub id: String,
    pub task: TaskId,
    pub input: RgbImage,
    /// Codec-encoded target.
    pub target: RgbImage,
    /// Filled text boxes (0/1), removal only.
    pub mask: Option<GrayImage>,
    pub boxes: Vec<TextBox>,
}

fn pick_kind(w: &BackgroundWeights, rng: &mut ChaCha8Rng) -> BackgroundKind {
    let total = w.flat + w.gradient + w.noise + w.shapes;
    let mut r = rng.random_range(0..total);
    for (kind, weight) in [
        (BackgroundKind::Flat, w.flat),
        (BackgroundKind::Gradient, w.gradient),
        (BackgroundKind::Noise, w.noise),
        (BackgroundKind::Shapes, w.shapes),
    ] {
        if r < weight {
            return kind;
        }
        r -= weight;
    }
    unreachable!("weights sum to total")
}

fn random_color(rng: &mut ChaCha8Rng) -> [u8; 3] {
    [rng.random(), rng.random(), rng.random()]
}

/// Integer BT.601 luma.
fn luma(c: [u8; 3]) -> i32 {
    (299 * c[0] as i32 + 587 * c[1] as i32 + 114 * c[2] as i32) / 1000
}

pub fn gen_background_kind(kind: BackgroundKind, size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    match kind {
        BackgroundKind::Flat => {
            let c = random_color(rng);
            RgbImage::from_pixel(size, size, Rgb(c))
        }
        BackgroundKind::Gradient => {
            let a = random_color(rng);
            let b = random_color(rng);
            let horizontal: bool = rng.random();
            let span = (size - 1).max(1) as i32;
            RgbImage::from_fn(size, size, |x, y| {
                let t = if horizontal { x } else { y } as i32;
                Rgb(std::array::from_fn(|c| {
                    (a[c] as i32 + (b[c] as i32 - a[c] as i32) * t / span) as u8
                }))
            })
        }
        BackgroundKind::Noise => {
            let base = random_color(rng);
            let amp = rng.random_range(8..=40i32);
            let mut img = RgbImage::new(size, size);
            for p in img.pixels_mut() {
                let n = rng.random_range(-amp..=amp);
                *p = Rgb(base.map(|v| (v as i32 + n).clamp(0, 255) as u8));
            }
            img
        }
        BackgroundKind::Shapes => {
            let mut img = RgbImage::from_pixel(size, size, Rgb(random_color(rng)));
            let n = rng.random_range(2..=5);
            for _ in 0..n {
                let c = Rgb(random_color(rng));
                let cx = rng.random_range(0..size) as i64;
                let cy = rng.random_range(0..size) as i64;
                let r = rng.random_range(size / 16..=size / 4).max(1) as i64;
                let disc: bool = rng.random();
                for y in 0..size {
                    for x in 0..size {
                        let (dx, dy) = (x as i64 - cx, y as i64 - cy);
                        let inside = if disc {
                            dx * dx + dy * dy <= r * r
                        } else {
                            dx.abs() <= r && dy.abs() <= r / 2
                        };
                        if inside {
                            img.put_pixel(x, y, c);
                        }
                    }
                }
            }
            img
        }
    }
}

pub fn gen_background(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> RgbImage {
    let kind = pick_kind(&cfg.background, rng);
    gen_background_kind(kind, cfg.image_size, rng)
}

/// Stamps a disc of diameter `width` centred on every point of the segment
/// `p0`-`p1`, restricted to `clip`.
fn stamp_segment(mask: &mut GrayImage, p0: (i64, i64), p1: (i64, i64), width: u32, clip: &TextBox) {
    let lo = -((width as i64 - 1) / 2);
    let hi = width as i64 / 2;
    // disc radius in doubled coordinates so even widths stay symmetric
    let r2 = (width as i64) * (width as i64);
    let (mut x, mut y) = p0;
    let dx = (p1.0 - p0.0).abs();
    let dy = -(p1.1 - p0.1).abs();
    let sx = if p0.0 < p1.0 { 1 } else { -1 };
    let sy = if p0.1 < p1.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        for oy in lo..=hi {
            for ox in lo..=hi {
                let (ddx, ddy) = (2 * ox - (hi + lo), 2 * oy - (hi + lo));
                if ddx * ddx + ddy * ddy > r2 {
                    continue;
                }
                let (px, py) = (x + ox, y + oy);
                if px >= 0 && py >= 0 && clip.contains(px as u32, py as u32) {
                    mask.put_pixel(px as u32, py as u32, Luma([1]));
                }
            }
        }
        if (x, y) == p1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Places non-overlapping boxes and draws polyline glyphs inside them.
/// Returns a 0/1 stroke mask and the boxes.
pub fn gen_glyphs(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> (GrayImage, Vec<TextBox>) {
    let size = cfg.image_size;
    let mut mask = GrayImage::new(size, size);
    let n = rng.random_range(cfg.glyphs_per_image[0]..=cfg.glyphs_per_image[1]);
    let mut boxes: Vec<TextBox> = Vec::new();
    let h_lo = (size / 8).max(8);
    let h_hi = (size / 4).max(h_lo);
    for _ in 0..n {
        for _attempt in 0..32 {
            let h = rng.random_range(h_lo..=h_hi);
            let w = rng.random_range(h..=(3 * h).min(size - 2));
            let x = rng.random_range(1..=size - 1 - w);
            let y = rng.random_range(1..=size - 1 - h);
            let b = TextBox {
                x,
                y,
                w,
                h,
                tampered: false,
            };
            if boxes.iter().all(|o| !o.overlaps(&b)) {
                boxes.push(b);
                break;
            }
        }
    }
    for b in &boxes {
        let width = rng.random_range(cfg.stroke_width[0]..=cfg.stroke_width[1]);
        let inset = width.div_ceil(2);
        let cell_w = (b.h * 2 / 3).max(2 * inset + 2);
        let chars = (b.w / cell_w).max(1);
        for c in 0..chars {
            let x0 = b.x + c * cell_w + inset;
            let x1 = (b.x + (c + 1) * cell_w).min(b.x + b.w) - inset;
            let y0 = b.y + inset;
            let y1 = b.y + b.h - inset;
            if x1 <= x0 || y1 <= y0 {
                continue;
            }
            let vertices = rng.random_range(2..=4);
            let mut prev = (
                rng.random_range(x0..x1) as i64,
                rng.random_range(y0..y1) as i64,
            );
            for _ in 1..vertices {
                let next = (
                    rng.random_range(x0..x1) as i64,
                    rng.random_range(y0..y1) as i64,
                );
                stamp_segment(&mut mask, prev, next, width, b);
                prev = next;
            }
        }
    }
    (mask, boxes)
}

/// Mean colour of `img` over a box.
fn box_mean(img: &RgbImage, b: &TextBox) -> [u8; 3] {
    let mut acc = [0u64; 3];
    for y in b.y..b.y + b.h {
        for x in b.x..b.x + b.w {
            let p = img.get_pixel(x, y);
            for c in 0..3 {
                acc[c] += p[c] as u64;
            }
        }
    }
    acc.map(|v| (v / b.area()) as u8)
}

/// A text colour whose luma differs from `bg` by at least 80.
fn contrasting_color(bg: [u8; 3], rng: &mut ChaCha8Rng) -> [u8; 3] {
    let c = random_color(rng);
    if (luma(c) - luma(bg)).abs() >= 80 {
        c
    } else if luma(bg) >= 128 {
        c.map(|v| v / 4)
    } else {
        c.map(|v| 192 + v / 4)
    }
}

struct Scene {
    background: RgbImage,
    rendered: RgbImage,
    strokes: GrayImage,
    boxes: Vec<TextBox>,
}

fn gen_scene(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng) -> Scene {
    let background = gen_background(cfg, rng);
    let (strokes, boxes) = gen_glyphs(cfg, rng);
    let mut rendered = background.clone();
    for b in &boxes {
        let color = Rgb(contrasting_color(box_mean(&background, b), rng));
        for y in b.y..b.y + b.h {
            for x in b.x..b.x + b.w {
                if strokes.get_pixel(x, y)[0] == 1 {
                    rendered.put_pixel(x, y, color);
                }
            }
        }
    }
    Scene {
        background,
        rendered,
        strokes,
        boxes,
    }
}

fn box_mask(size: u32, boxes: &[TextBox]) -> GrayImage {
    GrayImage::from_fn(size, size, |x, y| {
        Luma([u8::from(boxes.iter().any(|b| b.contains(x, y)))])
    })
}

fn sample_id(task: TaskId, index: u64) -> String {
    format!("{}_{index:06}", task.name())
}

pub fn make_removal_sample(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, id: String) -> Result<TaskSample> {
    let scene = gen_scene(cfg, rng);
    Ok(TaskSample {
        id,
        task: TaskId::Removal,
        input: scene.rendered,
        target: encode_target(&TaskLabel::Removal(scene.background))?,
        mask: Some(box_mask(cfg.image_size, &scene.boxes)),
        boxes: scene.boxes,
    })
}

pub fn make_seg_sample(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, id: String) -> Result<TaskSample> {
    let scene = gen_scene(cfg, rng);
    let target = encode_target(&TaskLabel::Segmentation(scene.strokes.clone()))?;
    if decode_segmentation(&to_rgb32f(&target)) != scene.strokes {
        return Err(Error::record(&id, "segmentation target failed codec validation"));
    }
    Ok(TaskSample {
        id,
        task: TaskId::Segmentation,
        input: scene.rendered,
        target,
        mask: None,
        boxes: scene.boxes,
    })
}

#[derive(Debug, Clone, Copy)]
enum Tamper {
    CopyMove,
    Blur,
    ColorShift,
}

fn apply_tamper(img: &mut RgbImage, strokes: &GrayImage, b: &TextBox, kind: Tamper, rng: &mut ChaCha8Rng) {
    let size = img.width();
    match kind {
        Tamper::CopyMove => {
            let sx = rng.random_range(0..=size - b.w);
            let sy = rng.random_range(0..=size - b.h);
            let src = img.clone();
            // paste the source block mirrored so that a self-copy still changes the box
            for y in 0..b.h {
                for x in 0..b.w {
                    let p = *src.get_pixel(sx + b.w - 1 - x, sy + y);
                    img.put_pixel(b.x + x, b.y + y, p);
                }
            }
        }
        Tamper::Blur => {
            let src = img.clone();
            for y in b.y..b.y + b.h {
                for x in b.x..b.x + b.w {
                    let mut acc = [0u32; 3];
                    let mut n = 0u32;
                    for yy in y.saturating_sub(2)..=(y + 2).min(size - 1) {
                        for xx in x.saturating_sub(2)..=(x + 2).min(size - 1) {
                            let p = src.get_pixel(xx, yy);
                            for c in 0..3 {
                                acc[c] += p[c] as u32;
                            }
                            n += 1;
                        }
                    }
                    img.put_pixel(x, y, Rgb(acc.map(|v| ((v + n / 2) / n) as u8)));
                }
            }
        }
        Tamper::ColorShift => {
            let shift: [i32; 3] = std::array::from_fn(|_| rng.random_range(64..=128) * if rng.random() { 1 } else { -1 });
            for y in b.y..b.y + b.h {
                for x in b.x..b.x + b.w {
                    if strokes.get_pixel(x, y)[0] == 1 {
                        let p = img.get_pixel(x, y).0;
                        let q: [u8; 3] = std::array::from_fn(|c| {
                            let v = p[c] as i32 + shift[c];
                            // reflect instead of clamping so the shift stays visible
                            (if v > 255 { 510 - v } else { v.abs() }) as u8
                        });
                        img.put_pixel(x, y, Rgb(q));
                    }
                }
            }
        }
    }
}

pub fn make_tamper_sample(cfg: &GeneratorConfig, rng: &mut ChaCha8Rng, id: String) -> Result<TaskSample> {
    let mut scene = gen_scene(cfg, rng);
    let n = scene.boxes.len();
    let n_tampered = ((cfg.tamper_fraction * n as f64).round() as usize).min(n);
    // choose which boxes by a partial Fisher-Yates shuffle
    let mut order: Vec<usize> = (0..n).collect();
    for i in 0..n_tampered {
        let j = rng.random_range(i as u32..n as u32) as usize;
        order.swap(i, j);
    }
    for &i in &order[..n_tampered] {
        scene.boxes[i].tampered = true;
        let kind = match rng.random_range(0..3) {
            0 => Tamper::CopyMove,
            1 => Tamper::Blur,
            _ => Tamper::ColorShift,
        };
        let b = scene.boxes[i];
        apply_tamper(&mut scene.rendered, &scene.strokes, &b, kind, rng);
    }
    let size = cfg.image_size;
    let classes = GrayImage::from_fn(size, size, |x, y| {
        let class = match scene.boxes.iter().find(|b| b.contains(x, y)) {
            Some(b) if b.tampered => TamperClass::Tampered,
            Some(_) => TamperClass::Real,
            None => TamperClass::Background,
        };
        Luma([class as u8])
    });
    let target = encode_target(&TaskLabel::Tamper(classes.clone()))?;
    if decode_tamper(&to_rgb32f(&target)) != classes {
        return Err(Error::record(&id, "tamper target failed codec validation"));
    }
    Ok(TaskSample {
        id,
        task: TaskId::Tamper,
        input: scene.rendered,
        target,
        mask: None,
        boxes: scene.boxes,
    })
}

/// Sample `index` of `task`, independent of every other sample.
pub fn make_sample(cfg: &GeneratorConfig, task: TaskId, index: u64) -> Result<TaskSample> {
    let mut rng = cfg.sample_rng(task, index);
    let id = sample_id(task, index);
    match task {
        TaskId::Removal => make_removal_sample(cfg, &mut rng, id),
        TaskId::Segmentation => make_seg_sample(cfg, &mut rng, id),
        TaskId::Tamper => make_tamper_sample(cfg, &mut rng, id),
    }
}

/// `count` samples for each of `tasks`.
pub fn generate(cfg: &GeneratorConfig, tasks: &[TaskId], count: u64) -> Result<Vec<TaskSample>> {
    cfg.validate()?;
    let mut out = Vec::new();
    for &task in tasks {
        for i in 0..count {
            out.push(make_sample(cfg, task, i)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub id: String,
    pub task: TaskId,
    pub input: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub boxes: Vec<TextBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: u32,
    #[serde(default)]
    pub generator: Option<GeneratorConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
    pub records: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn count(&self, task: TaskId) -> usize {
        self.records.iter().filter(|r| r.task == task).count()
    }
}

pub fn write_dataset(
    samples: &[TaskSample],
    dir: &Path,
    generator: Option<&GeneratorConfig>,
) -> Result<DatasetManifest> {
    for sub in ["inputs", "targets", "masks"] {
        let p = dir.join(sub);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mut seen = BTreeSet::new();
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(Error::record(&s.id, "duplicate id"));
        }
        if s.mask.is_some() != (s.task == TaskId::Removal) {
            return Err(Error::record(&s.id, "mask must be present exactly for removal samples"));
        }
        let input = format!("inputs/{}.png", s.id);
        let target = format!("targets/{}.png", s.id);
        write_png(&s.input, &dir.join(&input))?;
        write_png(&s.target, &dir.join(&target))?;
        let mask = match &s.mask {
            Some(m) => {
                let rel = format!("masks/{}.png", s.id);
                write_png(&mask_to_visible(m), &dir.join(&rel))?;
                Some(rel)
            }
            None => None,
        };
        records.push(SampleRecord {
            id: s.id.clone(),
            task: s.task,
            input,
            target,
            mask,
            boxes: s.boxes.clone(),
        });
    }
    let manifest = DatasetManifest {
        version: MANIFEST_VERSION,
        generator: generator.cloned(),
        seed: generator.map(|g| g.seed),
        records,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_string_pretty(&manifest)? + "\n";
    std::fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

/// Reads and checks the manifest: version, unique ids, referenced files
/// present and masks given exactly for removal records.
pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::Dataset {
        path: path.clone(),
        msg: e.to_string(),
    })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(Error::Dataset {
            path,
            msg: format!("unsupported manifest version {}", manifest.version),
        });
    }
    let mut seen = BTreeSet::new();
    for r in &manifest.records {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::record(&r.id, "duplicate id"));
        }
        if r.mask.is_some() != (r.task == TaskId::Removal) {
            return Err(Error::record(&r.id, "mask must be present exactly for removal records"));
        }
        for rel in [Some(&r.input), Some(&r.target), r.mask.as_ref()].into_iter().flatten() {
            if !dir.join(rel).is_file() {
                return Err(Error::record(&r.id, format!("missing file {rel}")));
            }
        }
    }
    Ok(manifest)
}

/// Loads one record, checking image sizes.
pub fn load_record(dir: &Path, r: &SampleRecord) -> Result<TaskSample> {
    let tag = |e: Error| Error::record(&r.id, e.to_string());
    let input = read_rgb(&dir.join(&r.input)).map_err(tag)?;
    let target = read_rgb(&dir.join(&r.target)).map_err(tag)?;
    if input.dimensions() != target.dimensions() {
        return Err(Error::record(
            &r.id,
            format!("input {:?} and target {:?} differ in size", input.dimensions(), target.dimensions()),
        ));
    }
    let mask = match &r.mask {
        Some(rel) => {
            let m = mask_from_visible(&read_gray(&dir.join(rel)).map_err(tag)?);
            if m.dimensions() != input.dimensions() {
                return Err(Error::record(&r.id, "mask size differs from input"));
            }
            Some(m)
        }
        None => None,
    };
    Ok(TaskSample {
        id: r.id.clone(),
        task: r.task,
        input,
        target,
        mask,
        boxes: r.boxes.clone(),
    })
}

/// Manifest plus every sample, in manifest order.
pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<TaskSample>)> {
    let manifest = read_manifest(dir)?;
    let samples = manifest
        .records
        .iter()
        .map(|r| load_record(dir, r))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// Directory of a dataset given either the directory or its manifest.
pub fn dataset_dir(path: &Path) -> PathBuf {
    if path.file_name().is_some_and(|n| n == MANIFEST_FILE) {
        path.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        path.to_path_buf()
    }
}
