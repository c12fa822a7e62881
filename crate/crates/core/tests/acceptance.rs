//! End-to-end acceptance run. Each criterion prints one PASS/FAIL line; the
//! process exits non-zero if any of them fails.
//!
//! Criteria run one after another on purpose: the overfit run dominates the
//! wall clock and the others should not compete with it for cores.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use candle::{DType, Device, Tensor, Var};
use image::{GrayImage, Luma, Rgb, Rgb32FImage, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pixocr::codec::{decode_removal, decode_segmentation, decode_tamper, encode_target, TaskLabel};
use pixocr::imageops::{to_rgb32f, to_rgb8};
use pixocr::losses::{
    feature_loss, pixel_loss_removal, pixel_loss_seg, total_loss, ConvStack, FeatureExtractor, LossConfig,
    LossTargets,
};
use pixocr::metrics::{
    fid, frechet_distance, gray_errors, mse_percent, mssim, psnr, seg_confusion, tamper_confusion,
    ConfusionCounts, StackEmbedder, TamperScores,
};
use pixocr::synthdata::{generate, GeneratorConfig, TaskSample};
use pixocr::train::{lr_at, train_loop, TrainConfig, TrainData};
use pixocr::{analysis, Model, ModelConfig, PromptSite, TaskId};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn e<E: std::fmt::Display>(err: E) -> String {
    err.to_string()
}

fn within(elapsed: Duration, budget: Duration) -> Result<(), String> {
    ensure!(elapsed <= budget, "took {elapsed:.1?}, budget {budget:.0?}");
    Ok(())
}

// ---------------------------------------------------------------------------
// 1, 2: architecture

fn architecture_constants() -> Outcome {
    let c = ModelConfig::small();
    let enc = |f: fn(&pixocr::StageSpec) -> usize| c.encoder_stages.iter().map(f).collect::<Vec<_>>();
    let dec = |f: fn(&pixocr::StageSpec) -> usize| c.decoder_stages.iter().map(f).collect::<Vec<_>>();
    ensure!(enc(|s| s.dim) == [96, 192, 384, 768], "encoder dims {:?}", enc(|s| s.dim));
    ensure!(enc(|s| s.depth) == [2, 2, 18, 2], "encoder depths {:?}", enc(|s| s.depth));
    ensure!(enc(|s| s.window) == [16; 4], "encoder windows {:?}", enc(|s| s.window));
    ensure!(dec(|s| s.dim) == [768, 384, 192, 96, 48], "decoder dims {:?}", dec(|s| s.dim));
    ensure!(dec(|s| s.out_dim).last() == Some(&24), "decoder output dim {:?}", dec(|s| s.out_dim));
    ensure!(dec(|s| s.depth) == [2, 18, 2, 2, 2], "decoder depths {:?}", dec(|s| s.depth));
    ensure!(dec(|s| s.window) == [8; 5], "decoder windows {:?}", dec(|s| s.window));
    ensure!(c.encoder_strides() == [4, 8, 16, 32], "encoder strides {:?}", c.encoder_strides());
    ensure!(c.decoder_strides() == [16, 8, 4, 2, 1], "decoder strides {:?}", c.decoder_strides());
    ensure!(c.prompt_count == 3 && c.prompt_dim == 768, "prompts {}x{}", c.prompt_count, c.prompt_dim);
    ensure!(c.prompt_sites.contains(&PromptSite::Shared), "prompt sites {:?}", c.prompt_sites);
    Ok("small preset matches the reference table".into())
}

fn parameter_count() -> Outcome {
    let t = Instant::now();
    let cfg = ModelConfig::small();
    let model = Model::zeroed(cfg.clone(), DType::F32).map_err(e)?;
    let n = model.param_count();
    ensure!(n == cfg.param_count(), "built {n}, formula {}", cfg.param_count());
    let dev = (n as f64 - 108e6) / 108e6;
    ensure!(dev.abs() <= 0.10, "{n} parameters is {:+.1}% from 108M", dev * 100.0);
    within(t.elapsed(), Duration::from_secs(10))?;
    Ok(format!("{n} parameters ({:+.2}% from 108M)", dev * 100.0))
}

// ---------------------------------------------------------------------------
// 3: codec

fn codec_round_trips() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for i in 0..1000 {
        let (w, h) = (rng.random_range(1..24u32), rng.random_range(1..24u32));
        let img = RgbImage::from_fn(w, h, |_, _| Rgb(rng.random()));
        let enc = encode_target(&TaskLabel::Removal(img.clone())).map_err(e)?;
        ensure!(to_rgb8(&decode_removal(&to_rgb32f(&enc))) == img, "removal case {i}");

        let mask = GrayImage::from_fn(w, h, |_, _| Luma([rng.random_range(0..2u8)]));
        let enc = encode_target(&TaskLabel::Segmentation(mask.clone())).map_err(e)?;
        ensure!(decode_segmentation(&to_rgb32f(&enc)) == mask, "segmentation case {i}");

        let map = GrayImage::from_fn(w, h, |_, _| Luma([rng.random_range(0..3u8)]));
        let enc = encode_target(&TaskLabel::Tamper(map.clone())).map_err(e)?;
        ensure!(decode_tamper(&to_rgb32f(&enc)) == map, "tamper case {i}");
    }
    for i in 0..1000 {
        let (w, h) = (rng.random_range(1..24u32), rng.random_range(1..24u32));
        let img = Rgb32FImage::from_fn(w, h, |_, _| loop {
            let p: [f32; 3] = [rng.random(), rng.random(), rng.random()];
            if p[0] != p[1] && p[1] != p[2] && p[0] != p[2] {
                break Rgb(p);
            }
        });
        let s: f32 = rng.random_range(0.01..100.0);
        let mut scaled = img.clone();
        scaled.iter_mut().for_each(|v| *v *= s);
        ensure!(decode_tamper(&img) == decode_tamper(&scaled), "argmax changed under scale {s} in case {i}");
    }
    within(t.elapsed(), Duration::from_secs(30))?;
    Ok("3x1000 label maps and 1000 scaled argmax maps".into())
}

// ---------------------------------------------------------------------------
// 4: loss oracles
//
// Arrays are flat channels-last `(b, h, w, c)` buffers.

#[derive(Clone)]
struct Arr {
    v: Vec<f64>,
    s: [usize; 4],
}

impl Arr {
    fn random(rng: &mut ChaCha8Rng, s: [usize; 4]) -> Self {
        Arr {
            v: (0..s.iter().product()).map(|_| rng.random::<f64>()).collect(),
            s,
        }
    }

    fn mask(rng: &mut ChaCha8Rng, s: [usize; 4]) -> Self {
        Arr {
            v: (0..s.iter().product()).map(|_| f64::from(rng.random_range(0..2u8))).collect(),
            s,
        }
    }

    fn at(&self, b: usize, y: usize, x: usize, c: usize) -> f64 {
        let [_, h, w, ch] = self.s;
        self.v[((b * h + y) * w + x) * ch + c]
    }

    fn tensor(&self) -> Tensor {
        Tensor::from_vec(self.v.clone(), &self.s, &Device::Cpu).unwrap()
    }
}

/// Smooth three-tap extractor: per-pixel linear maps with tanh and 2x2
/// average pooling between taps.
struct TanhTaps {
    w: [Vec<f64>; 3],
    dims: [usize; 4],
}

impl TanhTaps {
    fn new(seed: u64) -> Self {
        let dims = [3, 4, 5, 3];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut mat = |i: usize, o: usize| (0..i * o).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let w = [mat(dims[0], dims[1]), mat(dims[1], dims[2]), mat(dims[2], dims[3])];
        TanhTaps { w, dims }
    }

    fn oracle(&self, x: &Arr) -> Vec<Arr> {
        let mut taps = Vec::new();
        let mut cur = x.clone();
        for k in 0..3 {
            if k > 0 {
                let [b, h, w, c] = cur.s;
                let mut p = Arr { v: vec![0.0; b * (h / 2) * (w / 2) * c], s: [b, h / 2, w / 2, c] };
                for bi in 0..b {
                    for y in 0..h / 2 {
                        for xx in 0..w / 2 {
                            for ci in 0..c {
                                let s = cur.at(bi, 2 * y, 2 * xx, ci)
                                    + cur.at(bi, 2 * y, 2 * xx + 1, ci)
                                    + cur.at(bi, 2 * y + 1, 2 * xx, ci)
                                    + cur.at(bi, 2 * y + 1, 2 * xx + 1, ci);
                                p.v[((bi * (h / 2) + y) * (w / 2) + xx) * c + ci] = s / 4.0;
                            }
                        }
                    }
                }
                cur = p;
            }
            let (ci, co) = (self.dims[k], self.dims[k + 1]);
            let [b, h, w, _] = cur.s;
            let mut out = Arr { v: vec![0.0; b * h * w * co], s: [b, h, w, co] };
            for p in 0..b * h * w {
                for o in 0..co {
                    let mut s = 0.0;
                    for i in 0..ci {
                        s += cur.v[p * ci + i] * self.w[k][i * co + o];
                    }
                    out.v[p * co + o] = s.tanh();
                }
            }
            taps.push(out.clone());
            cur = out;
        }
        taps
    }
}

impl FeatureExtractor for TanhTaps {
    fn taps(&self, images: &Tensor) -> pixocr::Result<Vec<Tensor>> {
        let mut taps = Vec::new();
        let mut cur = images.clone();
        for k in 0..3 {
            if k > 0 {
                let (b, h, w, c) = cur.dims4()?;
                cur = cur.reshape((b, h / 2, 2, w / 2, 2, c))?.mean(4)?.mean(2)?;
            }
            let (b, h, w, c) = cur.dims4()?;
            let wt = Tensor::from_vec(self.w[k].clone(), (self.dims[k], self.dims[k + 1]), images.device())?
                .to_dtype(images.dtype())?;
            cur = cur.reshape((b * h * w, c))?.matmul(&wt)?.tanh()?.reshape((b, h, w, self.dims[k + 1]))?;
            taps.push(cur.clone());
        }
        Ok(taps)
    }
}

fn oracle_removal_pix(outs: &[Arr; 3], gts: &[Arr; 3], masks: &[Arr; 3], cfg: &LossConfig) -> f64 {
    let mut total = 0.0;
    for i in 0..3 {
        let [b, h, w, c] = outs[i].s;
        let n = (b * h * w * c) as f64;
        let (mut inside, mut outside) = (0.0, 0.0);
        for bi in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let m = masks[i].at(bi, y, x, 0);
                    for ci in 0..c {
                        let d = (outs[i].at(bi, y, x, ci) - gts[i].at(bi, y, x, ci)).abs();
                        inside += d * m;
                        outside += d * (1.0 - m);
                    }
                }
            }
        }
        total += cfg.alpha[i] * inside / n + cfg.beta[i] * outside / n;
    }
    total
}

fn oracle_seg_pix(outs: &[Arr; 3], gts: &[Arr; 3], cfg: &LossConfig) -> f64 {
    let d = cfg.smooth_delta;
    let mut total = 0.0;
    for i in 0..3 {
        let mut s = 0.0;
        for (o, g) in outs[i].v.iter().zip(&gts[i].v) {
            let a = (o - g).abs();
            s += if a < d { 0.5 * a * a / d } else { a - 0.5 * d };
        }
        total += cfg.alpha[i] * s / outs[i].v.len() as f64;
    }
    total
}

fn oracle_gram(f: &Arr, b: usize) -> Vec<f64> {
    let [_, h, w, c] = f.s;
    let mut g = vec![0.0; c * c];
    for y in 0..h {
        for x in 0..w {
            for i in 0..c {
                for j in 0..c {
                    g[i * c + j] += f.at(b, y, x, i) * f.at(b, y, x, j);
                }
            }
        }
    }
    g.iter().map(|v| v / (h * w * c) as f64).collect()
}

/// Returns (per, sty) before weighting.
fn oracle_feature(out: &Arr, star: &Arr, gt: &Arr, ex: &TanhTaps) -> (f64, f64) {
    let (fo, fs, fg) = (ex.oracle(out), ex.oracle(star), ex.oracle(gt));
    let (mut per, mut sty) = (0.0, 0.0);
    for k in 0..3 {
        for f in [&fo[k], &fs[k]] {
            let n = f.v.len() as f64;
            per += f.v.iter().zip(&fg[k].v).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
            let b = f.s[0];
            let mut s = 0.0;
            let mut cnt = 0.0;
            for bi in 0..b {
                let (ga, gb) = (oracle_gram(f, bi), oracle_gram(&fg[k], bi));
                s += ga.iter().zip(&gb).map(|(a, b)| (a - b).abs()).sum::<f64>();
                cnt += ga.len() as f64;
            }
            sty += s / cnt;
        }
    }
    (per, sty)
}

fn oracle_composite(out: &Arr, inp: &Arr, mask: &Arr) -> Arr {
    let mut r = out.clone();
    let [b, h, w, c] = out.s;
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let m = mask.at(bi, y, x, 0);
                for ci in 0..c {
                    let i = ((bi * h + y) * w + x) * c + ci;
                    r.v[i] = out.v[i] * m + inp.v[i] * (1.0 - m);
                }
            }
        }
    }
    r
}

/// Loss value from the three prediction scales.
type ScalarLoss<'a> = Box<dyn Fn(&[Arr; 3]) -> f64 + 'a>;
type TensorLoss<'a> = Box<dyn Fn([&Tensor; 3]) -> pixocr::Result<Tensor> + 'a>;

struct Check {
    max_value_err: f64,
    max_grad_err: f64,
}

/// Compares one case: value against the oracle, autograd gradient of every
/// prediction scale against central differences of the oracle.
fn check_case(outs: &[Arr; 3], oracle: &ScalarLoss, loss: &TensorLoss, acc: &mut Check) -> Result<(), String> {
    let vars: Vec<Var> = outs.iter().map(|a| Var::from_tensor(&a.tensor()).unwrap()).collect();
    let value = loss([vars[0].as_tensor(), vars[1].as_tensor(), vars[2].as_tensor()]).map_err(e)?;
    let got = value.to_scalar::<f64>().map_err(e)?;
    let want = oracle(outs);
    acc.max_value_err = acc.max_value_err.max((got - want).abs());
    let grads = value.backward().map_err(e)?;
    let h = 1e-6;
    let (mut diff, mut norm_a, mut norm_n) = (0.0, 0.0, 0.0);
    for s in 0..3 {
        let g = grads
            .get(vars[s].as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; outs[s].v.len()]);
        for i in 0..outs[s].v.len() {
            let mut p = outs.clone();
            p[s].v[i] += h;
            let mut m = outs.clone();
            m[s].v[i] -= h;
            let num = (oracle(&p) - oracle(&m)) / (2.0 * h);
            diff += (g[i] - num).powi(2);
            norm_a += g[i] * g[i];
            norm_n += num * num;
        }
    }
    let rel = diff.sqrt() / norm_a.sqrt().max(norm_n.sqrt()).max(1e-12);
    acc.max_grad_err = acc.max_grad_err.max(rel);
    Ok(())
}

fn pyramid(rng: &mut ChaCha8Rng, b: usize, c: usize) -> [Arr; 3] {
    [Arr::random(rng, [b, 1, 1, c]), Arr::random(rng, [b, 2, 2, c]), Arr::random(rng, [b, 4, 4, c])]
}

fn loss_oracles() -> Outcome {
    let t = Instant::now();
    let cfg = &LossConfig::default();
    let ex = &TanhTaps::new(11);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut report = Vec::new();
    for name in ["removal pixel", "smooth-L1 pixel", "feature", "removal total"] {
        let mut acc = Check {
            max_value_err: 0.0,
            max_grad_err: 0.0,
        };
        for _ in 0..100 {
            let b = rng.random_range(1..3);
            let outs = pyramid(&mut rng, b, 3);
            let gts = pyramid(&mut rng, b, 3);
            let masks = [
                Arr::mask(&mut rng, [b, 1, 1, 1]),
                Arr::mask(&mut rng, [b, 2, 2, 1]),
                Arr::mask(&mut rng, [b, 4, 4, 1]),
            ];
            let inp = Arr::random(&mut rng, [b, 4, 4, 3]);
            let gt_t: Vec<Tensor> = gts.iter().map(Arr::tensor).collect();
            let mask_t: Vec<Tensor> = masks.iter().map(Arr::tensor).collect();
            let (oracle, loss): (ScalarLoss, TensorLoss) = match name {
                "removal pixel" => (
                    Box::new(|o: &[Arr; 3]| oracle_removal_pix(o, &gts, &masks, cfg)),
                    Box::new(|o: [&Tensor; 3]| {
                        pixel_loss_removal(o, [&gt_t[0], &gt_t[1], &gt_t[2]], [&mask_t[0], &mask_t[1], &mask_t[2]], cfg)
                    }),
                ),
                "smooth-L1 pixel" => (
                    Box::new(|o: &[Arr; 3]| oracle_seg_pix(o, &gts, cfg)),
                    Box::new(|o: [&Tensor; 3]| pixel_loss_seg(o, [&gt_t[0], &gt_t[1], &gt_t[2]], cfg)),
                ),
                "feature" => {
                    let star = Arr::random(&mut rng, [b, 4, 4, 3]);
                    let star_t = star.tensor();
                    (
                        Box::new(move |o: &[Arr; 3]| {
                            let (per, sty) = oracle_feature(&o[2], &star, &gts[2], ex);
                            cfg.per_weight * per + cfg.sty_weight * sty
                        }),
                        Box::new(move |o: [&Tensor; 3]| {
                            Ok(feature_loss(o[2], &star_t, &gt_t[2], ex, cfg)?.total)
                        }),
                    )
                }
                _ => {
                    let targets = LossTargets {
                        input: inp.tensor(),
                        gts: [gt_t[0].clone(), gt_t[1].clone(), gt_t[2].clone()],
                        masks: Some([mask_t[0].clone(), mask_t[1].clone(), mask_t[2].clone()]),
                    };
                    (
                        Box::new(|o: &[Arr; 3]| {
                            let star = oracle_composite(&o[2], &inp, &masks[2]);
                            let (per, sty) = oracle_feature(&o[2], &star, &gts[2], ex);
                            oracle_removal_pix(o, &gts, &masks, cfg) + cfg.per_weight * per + cfg.sty_weight * sty
                        }),
                        Box::new(move |o: [&Tensor; 3]| {
                            Ok(total_loss(TaskId::Removal, o, &targets, ex, cfg)?.total)
                        }),
                    )
                }
            };
            check_case(&outs, &oracle, &loss, &mut acc)?;
        }
        ensure!(acc.max_value_err <= 1e-9, "{name}: value error {:.3e}", acc.max_value_err);
        ensure!(acc.max_grad_err <= 1e-3, "{name}: gradient relative error {:.3e}", acc.max_grad_err);
        report.push(format!("{name} {:.1e}/{:.1e}", acc.max_value_err, acc.max_grad_err));
    }
    within(t.elapsed(), Duration::from_secs(120))?;
    Ok(format!("value/gradient errors: {}", report.join(", ")))
}

fn loss_constants() -> Outcome {
    let c = LossConfig::default();
    ensure!(c.alpha == [5.0, 6.0, 10.0], "alpha {:?}", c.alpha);
    ensure!(c.beta == [0.8, 1.0, 2.0], "beta {:?}", c.beta);
    ensure!(c.per_weight == 0.01 && c.sty_weight == 120.0, "feature weights {} {}", c.per_weight, c.sty_weight);
    ensure!(TrainConfig::default().loss == c, "training config does not ship the default loss");
    Ok("alpha 5/6/10, beta 0.8/1/2, feature 0.01/120".into())
}

// ---------------------------------------------------------------------------
// 6: schedule

fn schedule() -> Outcome {
    let t = Instant::now();
    let cfg = TrainConfig::default();
    ensure!(cfg.total_iters == 80_000 && cfg.lr_step == 200, "defaults {} / {}", cfg.total_iters, cfg.lr_step);
    let lrs: Vec<f64> = (0..cfg.total_iters).map(|i| lr_at(i, &cfg)).collect::<Result<_, _>>().map_err(e)?;
    ensure!(lrs[0] == 5e-4, "lr_at(0) = {}", lrs[0]);
    ensure!(lrs[79_800..].iter().all(|&v| v == 1e-5), "final window is not 1e-5");
    for (i, w) in lrs.windows(2).enumerate() {
        if (i + 1) % 200 != 0 {
            ensure!(w[0] == w[1], "lr changes inside a window at {}", i + 1);
        }
        ensure!(w[1] <= w[0], "lr increases at {}", i + 1);
    }
    ensure!(lr_at(cfg.total_iters, &cfg).is_err(), "iteration past the schedule accepted");
    within(t.elapsed(), Duration::from_secs(1))?;
    Ok(format!("80000 iterations checked in {:.1?}", t.elapsed()))
}

// ---------------------------------------------------------------------------
// 7, 8, 9: trained toy model

struct Trained {
    model: Model,
    samples: Vec<TaskSample>,
}

const OVERFIT_SIZE: u32 = 32;

fn overfit_config() -> TrainConfig {
    TrainConfig {
        total_iters: 500,
        lr_step: 50,
        lr_start: 6e-3,
        lr_end: 2e-3,
        batch_size: 6,
        per_task_batch: [2, 2, 2],
        image_size: OVERFIT_SIZE,
        preset: "toy".into(),
        checkpoint_every: 0,
        ..Default::default()
    }
}

fn train_toy(dir: &Path) -> Result<(Trained, Duration), String> {
    let g = GeneratorConfig {
        image_size: OVERFIT_SIZE,
        seed: 1,
        ..Default::default()
    };
    let samples = generate(&g, &TaskId::ALL, 8).map_err(e)?;
    let data = TrainData::from_samples(&samples, OVERFIT_SIZE).map_err(e)?;
    let ex = ConvStack::default_stack(DType::F32).map_err(e)?;
    let t = Instant::now();
    let summary = train_loop(&overfit_config(), &data, dir, None, &ex).map_err(e)?;
    let elapsed = t.elapsed();
    let (model, _, _) = pixocr::train::load_model(&summary.final_checkpoint, DType::F32).map_err(e)?;
    Ok((Trained { model, samples }, elapsed))
}

fn overfit(trained: &Trained, elapsed: Duration) -> Outcome {
    let (mut l1, mut n) = (0.0, 0usize);
    let mut seg = ConfusionCounts::default();
    let mut tam = [ConfusionCounts::default(); 2];
    for s in &trained.samples {
        let pred = trained.model.infer(&to_rgb32f(&s.input), s.task).map_err(e)?;
        let target = to_rgb32f(&s.target);
        match s.task {
            TaskId::Removal => {
                for (p, t) in decode_removal(&pred).iter().zip(target.iter()) {
                    l1 += f64::from((p - t).abs());
                    n += 1;
                }
            }
            TaskId::Segmentation => {
                seg.add(&seg_confusion(&decode_segmentation(&pred), &decode_segmentation(&target)).map_err(e)?);
            }
            TaskId::Tamper => {
                let c = tamper_confusion(&decode_tamper(&pred), &decode_tamper(&target)).map_err(e)?;
                tam[0].add(&c[0]);
                tam[1].add(&c[1]);
            }
        }
    }
    let l1 = l1 / n as f64;
    let fg_iou = seg.scores().iou;
    let miou = TamperScores::from_counts(&tam).miou;
    let summary = format!("removal L1 {l1:.4}, fgIoU {fg_iou:.2}%, mIoU {miou:.2}%, {elapsed:.0?}");
    ensure!(l1 < 0.05, "removal mean L1 too high: {summary}");
    ensure!(fg_iou > 90.0, "segmentation fgIoU too low: {summary}");
    ensure!(miou > 80.0, "tamper mIoU too low: {summary}");
    within(elapsed, Duration::from_secs(15 * 60)).map_err(|m| format!("{m}: {summary}"))?;
    Ok(summary)
}

fn prompt_separation(trained: &Trained) -> Outcome {
    let model = &trained.model;
    let images: Vec<(String, Rgb32FImage)> =
        trained.samples.iter().map(|s| (s.id.clone(), to_rgb32f(&s.input))).collect();
    for (id, img) in &images {
        let x = pixocr::imageops::images_to_tensor(&[img], DType::F32, &Device::Cpu).map_err(e)?;
        let mut shared: Vec<Vec<u32>> = Vec::new();
        for task in TaskId::ALL {
            let f = model.forward_with_features(&x, task).map_err(e)?.features.ok_or("no features")?;
            let bits = f.shared_feat.flatten_all().and_then(|t| t.to_vec1::<f32>()).map_err(e)?;
            shared.push(bits.iter().map(|v| v.to_bits()).collect());
        }
        ensure!(shared[0] == shared[1] && shared[1] == shared[2], "shared features of {id} depend on the task");
    }
    let records = analysis::extract_features(model, &images, &TaskId::ALL).map_err(e)?;
    let rep = analysis::separation(&records).map_err(e)?;
    ensure!(rep.inter > rep.intra, "inter {:.4} <= intra {:.4}", rep.inter, rep.intra);
    Ok(format!(
        "inter {:.4} > intra {:.4} over {} records; shared features bitwise equal",
        rep.inter,
        rep.intra,
        records.len()
    ))
}

fn task_switching(trained: &Trained) -> Outcome {
    let input = to_rgb32f(&trained.samples[0].input);
    let (w, h) = input.dimensions();
    let outs: Vec<Rgb32FImage> = TaskId::ALL
        .iter()
        .map(|&t| trained.model.infer(&input, t))
        .collect::<Result<_, _>>()
        .map_err(e)?;

    let removal = to_rgb8(&decode_removal(&outs[0]));
    ensure!(removal.dimensions() == (w, h), "removal output is {:?}", removal.dimensions());
    let seg = decode_segmentation(&outs[1]);
    ensure!(seg.pixels().all(|p| p[0] <= 1), "segmentation output is not binary");
    let enc = encode_target(&TaskLabel::Segmentation(seg.clone())).map_err(e)?;
    ensure!(decode_segmentation(&to_rgb32f(&enc)) == seg, "segmentation output does not round trip");
    let tam = decode_tamper(&outs[2]);
    ensure!(tam.pixels().all(|p| p[0] <= 2), "tamper output has an invalid class");
    let enc = encode_target(&TaskLabel::Tamper(tam.clone())).map_err(e)?;
    ensure!(decode_tamper(&to_rgb32f(&enc)) == tam, "tamper output does not round trip");

    let seg_rgb = to_rgb8(&decode_removal(&outs[1]));
    let differ = removal.pixels().zip(seg_rgb.pixels()).filter(|(a, b)| a != b).count();
    let frac = differ as f64 / (w * h) as f64 * 100.0;
    ensure!(frac > 1.0, "removal and segmentation outputs differ on only {frac:.2}% of pixels");
    Ok(format!("decoded outputs valid; removal vs segmentation differ on {frac:.1}% of pixels"))
}

// ---------------------------------------------------------------------------
// 10: metrics

fn metric_sanity() -> Outcome {
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let a = RgbImage::from_fn(16, 16, |_, _| Rgb(rng.random()));
    ensure!(psnr(&a, &a).map_err(e)? == 100.0, "psnr identity");
    ensure!((mssim(&a, &a).map_err(e)? - 100.0).abs() < 1e-9, "mssim identity");
    ensure!(mse_percent(&a, &a).map_err(e)? == 0.0, "mse identity");
    let ge = gray_errors(&a, &a).map_err(e)?;
    ensure!(ge.age == 0.0 && ge.peps == 0.0 && ge.pceps == 0.0, "gray identity {ge:?}");
    let black = RgbImage::from_pixel(1, 1, Rgb([0, 0, 0]));
    let white = RgbImage::from_pixel(1, 1, Rgb([255, 255, 255]));
    ensure!(psnr(&black, &white).map_err(e)?.abs() < 1e-12, "psnr 0 vs 255");

    let c = |v: u8| RgbImage::from_pixel(12, 12, Rgb([v, v, v]));
    let c1 = (0.01f64 * 255.0).powi(2);
    let closed = (2.0 * 40.0 * 168.0 + c1) / (40.0f64 * 40.0 + 168.0 * 168.0 + c1) * 100.0;
    let got = mssim(&c(40), &c(168)).map_err(e)?;
    ensure!((got - closed).abs() < 1e-6, "constant SSIM {got} vs closed form {closed}");

    let mut g1 = RgbImage::from_pixel(2, 2, Rgb([100; 3]));
    let g0 = g1.clone();
    g1.put_pixel(1, 0, Rgb([125; 3]));
    let ge = gray_errors(&g0, &g1).map_err(e)?;
    ensure!(ge.peps == 0.25 && ge.pceps == 0.0, "2x2 isolated error {ge:?}");
    let c3 = |v: u8| RgbImage::from_pixel(3, 3, Rgb([v, v, v]));
    let ge = gray_errors(&c3(0), &c3(200)).map_err(e)?;
    ensure!(ge.peps == 1.0 && (ge.pceps - 1.0 / 9.0).abs() < 1e-12, "3x3 all-error {ge:?}");

    for i in 0..1000 {
        let (w, h) = (rng.random_range(1..20u32), rng.random_range(1..20u32));
        let x = RgbImage::from_fn(w, h, |_, _| Rgb(rng.random()));
        let y = RgbImage::from_fn(w, h, |xx, yy| {
            let p = x.get_pixel(xx, yy);
            if rng.random_bool(0.5) {
                Rgb(rng.random())
            } else {
                *p
            }
        });
        let ge = gray_errors(&x, &y).map_err(e)?;
        ensure!(ge.pceps <= ge.peps, "pceps {} > peps {} in pair {i}", ge.pceps, ge.peps);
    }

    // pred {(0,0),(0,1)}, gt {(0,1),(1,1)} as (row, col)
    let m = |on: &[(u32, u32)]| GrayImage::from_fn(2, 2, |x, y| Luma([u8::from(on.contains(&(y, x)))]));
    let cc = seg_confusion(&m(&[(0, 0), (0, 1)]), &m(&[(0, 1), (1, 1)])).map_err(e)?;
    ensure!((cc.tp, cc.fp, cc.fn_, cc.tn) == (1, 1, 1, 1), "2x2 confusion {cc:?}");
    let s = cc.scores();
    ensure!((s.iou - 100.0 / 3.0).abs() < 1e-9 && s.p == 50.0 && s.r == 50.0 && s.f == 50.0, "2x2 scores {s:?}");

    let gt = GrayImage::from_raw(3, 3, vec![0, 0, 1, 1, 1, 2, 2, 2, 2]).unwrap();
    let pred = GrayImage::from_raw(3, 3, vec![1, 0, 1, 1, 1, 2, 2, 2, 2]).unwrap();
    let c = tamper_confusion(&pred, &gt).map_err(e)?;
    ensure!((c[0].tp, c[0].fp, c[0].fn_, c[0].tn) == (1, 0, 1, 7), "tampered confusion {:?}", c[0]);
    ensure!((c[1].tp, c[1].fp, c[1].fn_, c[1].tn) == (3, 1, 0, 5), "real confusion {:?}", c[1]);
    let ts = TamperScores::from_counts(&c);
    let mf = (2.0 * 100.0 * 50.0 / 150.0 + 2.0 * 75.0 * 100.0 / 175.0) / 2.0;
    ensure!((ts.miou - 62.5).abs() < 1e-9 && (ts.mf - mf).abs() < 1e-9, "3x3 tamper scores {ts:?}");

    let imgs: Vec<Rgb32FImage> = (0..4)
        .map(|_| Rgb32FImage::from_fn(32, 32, |_, _| Rgb([rng.random(), rng.random(), rng.random()])))
        .collect();
    let refs: Vec<&Rgb32FImage> = imgs.iter().collect();
    let embedder = StackEmbedder::default_embedder().map_err(e)?;
    let same = fid(&refs, &refs, &embedder).map_err(e)?;
    ensure!(same <= 1e-6, "fid(X, X) = {same:e}");
    let f = frechet_distance(&[vec![0.0], vec![0.0]], &[vec![1.0], vec![1.0]]).map_err(e)?;
    ensure!((f - 1.0).abs() < 1e-9, "univariate frechet {f}");
    within(t.elapsed(), Duration::from_secs(60))?;
    Ok(format!("identities, hand counts, 1000 pceps<=peps pairs, fid(X,X)={same:.1e}"))
}

// ---------------------------------------------------------------------------
// 11: CLI determinism

fn run_cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_pixocr")).args(args).output().map_err(e)?;
    ensure!(
        out.status.success(),
        "pixocr {} failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    Ok(())
}

fn files_under(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn pipeline(dir: &Path) -> Result<BTreeMap<PathBuf, Vec<u8>>, String> {
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    let cfg = serde_json::json!({
        "batch_size": 3,
        "per_task_batch": [1, 1, 1],
        "image_size": 64,
        "checkpoint_every": 0,
    });
    std::fs::write(dir.join("train.json"), cfg.to_string()).map_err(e)?;
    run_cli(&["gen-data", "--task", "all", "--count", "2", "--seed", "7", "--image-size", "64", "--out", &p("data")])?;
    run_cli(&[
        "train", "--config", &p("train.json"), "--data", &p("data"), "--out", &p("run"), "--preset", "toy",
        "--seed", "5", "--iters", "10", "--lr-step", "5",
    ])?;
    for task in ["removal", "segmentation", "tamper"] {
        run_cli(&[
            "eval", "--task", task, "--ckpt", &p("run/final.safetensors"), "--gt", &p("data"), "--out",
            &p(&format!("eval/{task}")),
        ])?;
    }
    let mut files = BTreeMap::new();
    for sub in ["data", "run", "eval"] {
        for (k, v) in files_under(&dir.join(sub)) {
            files.insert(Path::new(sub).join(k), v);
        }
    }
    Ok(files)
}

fn cli_determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(e)?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    std::fs::create_dir_all(&a).map_err(e)?;
    std::fs::create_dir_all(&b).map_err(e)?;
    let fa = pipeline(&a)?;
    let fb = pipeline(&b)?;
    ensure!(
        fa.keys().eq(fb.keys()),
        "file sets differ: {:?} vs {:?}",
        fa.keys().collect::<Vec<_>>(),
        fb.keys().collect::<Vec<_>>()
    );
    for key in [Path::new("run/loss_log.jsonl"), Path::new("data/manifest.json"), Path::new("eval/removal/report.json")] {
        ensure!(fa.contains_key(key), "missing {}", key.display());
    }
    let differ: Vec<_> = fa.iter().filter(|(k, v)| fb[*k] != **v).map(|(k, _)| k.display().to_string()).collect();
    ensure!(differ.is_empty(), "files differ: {differ:?}");
    Ok(format!("{} files byte-identical across two runs", fa.len()))
}

// ---------------------------------------------------------------------------

fn report(id: usize, name: &str, t: Instant, outcome: Outcome) -> bool {
    let secs = t.elapsed().as_secs_f64();
    match outcome {
        Ok(detail) => {
            println!("PASS  AC{id:<2} {name} ({secs:.1}s): {detail}");
            true
        }
        Err(msg) => {
            println!("FAIL  AC{id:<2} {name} ({secs:.1}s): {msg}");
            false
        }
    }
}

fn main() {
    let mut ok = true;
    let simple: [(usize, &str, fn() -> Outcome); 6] = [
        (1, "architecture constants", architecture_constants),
        (2, "parameter count", parameter_count),
        (3, "codec round trips", codec_round_trips),
        (4, "loss oracles", loss_oracles),
        (5, "loss constants", loss_constants),
        (6, "learning-rate schedule", schedule),
    ];
    for (id, name, f) in simple {
        ok &= report(id, name, Instant::now(), f());
    }

    let t = Instant::now();
    let dir = tempfile::tempdir().expect("temp dir");
    match train_toy(dir.path()) {
        Ok((trained, elapsed)) => {
            ok &= report(7, "overfit smoke test", t, overfit(&trained, elapsed));
            ok &= report(8, "prompt separation", Instant::now(), prompt_separation(&trained));
            ok &= report(9, "task switching", Instant::now(), task_switching(&trained));
        }
        Err(msg) => {
            for (id, name) in [(7, "overfit smoke test"), (8, "prompt separation"), (9, "task switching")] {
                ok &= report(id, name, t, Err(format!("training failed: {msg}")));
            }
        }
    }

    ok &= report(10, "metric suite", Instant::now(), metric_sanity());
    ok &= report(11, "end-to-end determinism", Instant::now(), cli_determinism());
    if !ok {
        std::process::exit(1);
    }
}
