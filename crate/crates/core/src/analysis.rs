//! Geometry of the prompted features: pooled features before and after
//! prompt injection, a PCA projection, a separation score and scatter plots.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use candle::{DType, Tensor};
use image::{Rgb, Rgb32FImage, RgbImage};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::imageops::{images_to_tensor, write_png};
use crate::{Error, Model, Result, TaskId};

/// Spatially mean-pooled features of one sample under one task prompt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub id: String,
    pub task: TaskId,
    pub shared: Vec<f64>,
    pub injected: Vec<f64>,
}

/// `(b, h, w, c)` to `b` vectors of channel means.
fn spatial_mean(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.mean(1)?.mean(1)?.to_vec2::<f64>()?)
}

/// Runs every image under every task and pools the final encoder feature
/// before and after injection.
pub fn extract_features(
    model: &Model,
    samples: &[(String, Rgb32FImage)],
    tasks: &[TaskId],
) -> Result<Vec<FeatureRecord>> {
    let mut out = Vec::with_capacity(samples.len() * tasks.len());
    for (id, img) in samples {
        let x = images_to_tensor(&[img], model.dtype(), model.params().device())?;
        for &task in tasks {
            let f = model
                .forward_with_features(&x, task)?
                .features
                .expect("forward_with_features returns features");
            out.push(FeatureRecord {
                id: id.clone(),
                task,
                shared: spatial_mean(&f.shared_feat)?.remove(0),
                injected: spatial_mean(&f.injected_feat)?.remove(0),
            });
        }
    }
    Ok(out)
}

/// Two-dimensional PCA coordinates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Projection {
    pub points: Vec<[f64; 2]>,
    /// Variance along each component.
    pub variance: [f64; 2],
    pub warning: Option<String>,
}

/// Projects centred rows onto the top two principal axes. Each axis is
/// signed so that its largest-magnitude loading is positive.
pub fn project_2d(rows: &[Vec<f64>]) -> Result<Projection> {
    let n = rows.len();
    if n < 3 {
        return Err(Error::Shape(format!("projection needs at least 3 records, got {n}")));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Shape("records must share one positive dimension".into()));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| rows[i][j]);
    for j in 0..d {
        let mean = x.column(j).sum() / n as f64;
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let cov = x.transpose() * &x / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let scale = eig.eigenvalues[order[0]].abs().max(f64::MIN_POSITIVE);
    let mut warning = None;
    let mut variance = [0.0; 2];
    let mut axes: Vec<Option<Vec<f64>>> = Vec::new();
    for (k, &idx) in order.iter().take(2).enumerate() {
        let lambda = eig.eigenvalues[idx];
        if lambda <= 1e-12 * scale || lambda <= 0.0 {
            warning = Some(format!("features are rank-deficient; component {} set to zero", k + 1));
            axes.push(None);
            continue;
        }
        let mut v: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let lead = v
            .iter()
            .copied()
            .fold(0.0f64, |acc, e| if e.abs() > acc.abs() { e } else { acc });
        if lead < 0.0 {
            v.iter_mut().for_each(|e| *e = -*e);
        }
        variance[k] = lambda;
        axes.push(Some(v));
    }
    while axes.len() < 2 {
        warning = Some("features have a single dimension; component 2 set to zero".into());
        axes.push(None);
    }
    let points = (0..n)
        .map(|i| {
            let row = x.row(i);
            let coord = |a: &Option<Vec<f64>>| a.as_ref().map_or(0.0, |v| row.iter().zip(v).map(|(p, q)| p * q).sum());
            [coord(&axes[0]), coord(&axes[1])]
        })
        .collect();
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Ok(Projection {
        points,
        variance,
        warning,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeparationReport {
    /// Mean Euclidean distance over same-task pairs of injected features.
    pub intra: f64,
    /// Mean Euclidean distance over cross-task pairs.
    pub inter: f64,
    pub centroids: BTreeMap<TaskId, Vec<f64>>,
    /// `(inter - intra) / max(inter, intra)`, in [-1, 1]; 0 when both vanish.
    pub ratio: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

pub fn separation(records: &[FeatureRecord]) -> Result<SeparationReport> {
    let tasks: BTreeSet<TaskId> = records.iter().map(|r| r.task).collect();
    if tasks.len() < 2 {
        return Err(Error::Config(format!(
            "separation needs at least two tasks, got {}",
            tasks.len()
        )));
    }
    let (mut intra_sum, mut intra_n, mut inter_sum, mut inter_n) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..records.len() {
        for j in i + 1..records.len() {
            let d = dist(&records[i].injected, &records[j].injected);
            if records[i].task == records[j].task {
                intra_sum += d;
                intra_n += 1;
            } else {
                inter_sum += d;
                inter_n += 1;
            }
        }
    }
    let intra = if intra_n > 0 { intra_sum / intra_n as f64 } else { 0.0 };
    let inter = inter_sum / inter_n as f64;
    let mut centroids = BTreeMap::new();
    for &t in &tasks {
        let members: Vec<&FeatureRecord> = records.iter().filter(|r| r.task == t).collect();
        let d = members[0].injected.len();
        let c = (0..d)
            .map(|k| members.iter().map(|r| r.injected[k]).sum::<f64>() / members.len() as f64)
            .collect();
        centroids.insert(t, c);
    }
    let top = inter.max(intra);
    let ratio = if top > 0.0 { (inter - intra) / top } else { 0.0 };
    Ok(SeparationReport {
        intra,
        inter,
        centroids,
        ratio,
    })
}

/// Scatter-plot label: the shared feature or a task's injected feature.
pub const GENERAL: &str = "general";

fn label_color(label: &str) -> [u8; 3] {
    match label {
        GENERAL => [128, 128, 128],
        "removal" => [31, 119, 180],
        "segmentation" => [255, 127, 14],
        "tamper" => [44, 160, 44],
        _ => [214, 39, 40],
    }
}

const PLOT: u32 = 512;
const MARGIN: f64 = 40.0;

fn to_canvas(points: &[[f64; 2]]) -> Vec<(f64, f64)> {
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let span: Vec<f64> = (0..2).map(|k| (hi[k] - lo[k]).max(1e-12)).collect();
    let usable = PLOT as f64 - 2.0 * MARGIN;
    points
        .iter()
        .map(|p| {
            (
                MARGIN + (p[0] - lo[0]) / span[0] * usable,
                PLOT as f64 - MARGIN - (p[1] - lo[1]) / span[1] * usable,
            )
        })
        .collect()
}

/// Writes an SVG (for a `.svg` path) or PNG scatter plot. The SVG legend
/// lists exactly the labels present; the PNG legend shows their colours.
pub fn emit_scatter(points: &[[f64; 2]], labels: &[String], path: &Path) -> Result<()> {
    if points.len() != labels.len() {
        return Err(Error::Shape("one label per point is required".into()));
    }
    let present: BTreeSet<&str> = labels.iter().map(String::as_str).collect();
    let xy = to_canvas(points);
    let is_svg = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("svg"));
    if is_svg {
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{PLOT}" height="{PLOT}" viewBox="0 0 {PLOT} {PLOT}">"#
        );
        let _ = writeln!(s, r#"<rect width="{PLOT}" height="{PLOT}" fill="white"/>"#);
        for ((x, y), l) in xy.iter().zip(labels) {
            let [r, g, b] = label_color(l);
            let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="4" fill="rgb({r},{g},{b})"/>"#);
        }
        let _ = writeln!(s, r#"<g class="legend" font-family="sans-serif" font-size="12">"#);
        for (i, l) in present.iter().enumerate() {
            let [r, g, b] = label_color(l);
            let y = 14 + 16 * i;
            let _ = writeln!(s, r#"<rect x="8" y="{}" width="10" height="10" fill="rgb({r},{g},{b})"/>"#, y - 9);
            let _ = writeln!(s, r#"<text x="22" y="{y}">{l}</text>"#);
        }
        let _ = writeln!(s, "</g>\n</svg>");
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    } else {
        let mut img = RgbImage::from_pixel(PLOT, PLOT, Rgb([255, 255, 255]));
        let mut disc = |cx: i64, cy: i64, r: i64, c: [u8; 3]| {
            for dy in -r..=r {
                for dx in -r..=r {
                    let (x, y) = (cx + dx, cy + dy);
                    if dx * dx + dy * dy <= r * r && (0..PLOT as i64).contains(&x) && (0..PLOT as i64).contains(&y) {
                        img.put_pixel(x as u32, y as u32, Rgb(c));
                    }
                }
            }
        };
        for ((x, y), l) in xy.iter().zip(labels) {
            disc(x.round() as i64, y.round() as i64, 4, label_color(l));
        }
        for (i, l) in present.iter().enumerate() {
            let c = label_color(l);
            for dy in 0..10 {
                for dx in 0..10 {
                    img.put_pixel(8 + dx, 8 + 16 * i as u32 + dy, Rgb(c));
                }
            }
        }
        write_png(&img, path)
    }
}

/// `id,task,stage,d0,d1,...` with one row per record and stage.
pub fn features_csv(records: &[FeatureRecord]) -> String {
    let d = records.first().map_or(0, |r| r.shared.len());
    let mut s = String::from("id,task,stage");
    for k in 0..d {
        let _ = write!(s, ",d{k}");
    }
    s.push('\n');
    for r in records {
        for (stage, v) in [("shared", &r.shared), ("injected", &r.injected)] {
            let _ = write!(s, "{},{},{stage}", r.id, r.task);
            for x in v {
                let _ = write!(s, ",{x}");
            }
            s.push('\n');
        }
    }
    s
}

/// Points and labels for the scatter plot: one "general" point per sample
/// (the shared feature) and one injected point per record.
pub fn scatter_inputs(records: &[FeatureRecord]) -> (Vec<Vec<f64>>, Vec<String>) {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut seen = BTreeSet::new();
    for r in records {
        if seen.insert(r.id.as_str()) {
            rows.push(r.shared.clone());
            labels.push(GENERAL.to_string());
        }
    }
    for r in records {
        rows.push(r.injected.clone());
        labels.push(r.task.to_string());
    }
    (rows, labels)
}
