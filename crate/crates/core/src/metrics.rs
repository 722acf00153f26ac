//! Frame-quality and forecast metrics.
//!
//! All metrics work on pixel values in reporting scale (`0..=255` by
//! default; the model's `[0, 1]` outputs are multiplied by
//! [`MetricsConfig::scale`] first). Two MSE conventions are reported:
//!
//! - `mse`: mean squared error per pixel in reporting scale;
//! - `mse_frame`: squared error summed over a frame with pixels in `[0, 1]`,
//!   then averaged over frames, the usual Moving-MNIST "per-frame MSE".

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsConfig {
    pub scale: f64,
    pub peak: f64,
    pub ssim_window: usize,
    pub ssim_sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub csi_threshold: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            scale: 255.0,
            peak: 255.0,
            ssim_window: 11,
            ssim_sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            csi_threshold: 128.0,
        }
    }
}

fn check_len(pred: &[f64], target: &[f64]) -> Result<()> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::shape(format!(
            "metric inputs differ in length: {} vs {}",
            pred.len(),
            target.len()
        )));
    }
    Ok(())
}

/// Mean squared error per pixel.
pub fn mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    check_len(pred, target)?;
    let sse: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / pred.len() as f64)
}

/// `10·log10(peak² / mse)`; `+∞` for identical inputs.
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub fn psnr(pred: &[f64], target: &[f64], peak: f64) -> Result<f64> {
    Ok(psnr_from_mse(mse(pred, target)?, peak))
}

pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let w: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of an `h×w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..n).map(|t| k[t] * img[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..n).map(|t| k[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Mean SSIM of a single-channel `h×w` image pair with a Gaussian window.
pub fn ssim(pred: &[f64], target: &[f64], h: usize, w: usize, cfg: &MetricsConfig) -> Result<f64> {
    check_len(pred, target)?;
    if pred.len() != h * w {
        return Err(Error::shape(format!(
            "ssim: {} pixels for {h}x{w}",
            pred.len()
        )));
    }
    let n = cfg.ssim_window;
    if n == 0 || h < n || w < n {
        return Err(Error::contract(format!(
            "ssim: frame {h}x{w} smaller than window {n}"
        )));
    }
    let k = gaussian_window(n, cfg.ssim_sigma);
    let c1 = (cfg.k1 * cfg.peak).powi(2);
    let c2 = (cfg.k2 * cfg.peak).powi(2);
    let xx: Vec<f64> = pred.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = target.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = pred.iter().zip(target).map(|(a, b)| a * b).collect();
    let mx = filter_valid(pred, h, w, &k);
    let my = filter_valid(target, h, w, &k);
    let sxx = filter_valid(&xx, h, w, &k);
    let syy = filter_valid(&yy, h, w, &k);
    let sxy = filter_valid(&xy, h, w, &k);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total +=
            ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Contingency {
    pub hits: u64,
    pub misses: u64,
    pub false_alarms: u64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CsiResult {
    pub value: f64,
    pub counts: Contingency,
    /// No event in either map; `value` is then 1.0 by convention.
    pub degenerate: bool,
}

pub fn contingency(pred: &[f64], target: &[f64], threshold: f64) -> Result<Contingency> {
    check_len(pred, target)?;
    let mut c = Contingency::default();
    for (&p, &t) in pred.iter().zip(target) {
        match (p >= threshold, t >= threshold) {
            (true, true) => c.hits += 1,
            (false, true) => c.misses += 1,
            (true, false) => c.false_alarms += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

impl Contingency {
    pub fn csi(&self) -> CsiResult {
        let denom = self.hits + self.misses + self.false_alarms;
        if denom == 0 {
            CsiResult {
                value: 1.0,
                counts: *self,
                degenerate: true,
            }
        } else {
            CsiResult {
                value: self.hits as f64 / denom as f64,
                counts: *self,
                degenerate: false,
            }
        }
    }
}

/// Hits / (hits + misses + false alarms) after thresholding both maps.
pub fn csi(pred: &[f64], target: &[f64], threshold: f64) -> Result<CsiResult> {
    Ok(contingency(pred, target, threshold)?.csi())
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct FrameMetrics {
    pub mse: f64,
    pub mse_frame: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub csi: f64,
}

impl FrameMetrics {
    fn add(&mut self, o: &FrameMetrics) {
        self.mse += o.mse;
        self.mse_frame += o.mse_frame;
        self.psnr += o.psnr;
        self.ssim += o.ssim;
        self.csi += o.csi;
    }

    fn scaled(&self, s: f64) -> FrameMetrics {
        FrameMetrics {
            mse: self.mse * s,
            mse_frame: self.mse_frame * s,
            psnr: self.psnr * s,
            ssim: self.ssim * s,
            csi: self.csi * s,
        }
    }
}

/// Metrics of one `c×h×w` frame pair given in `[0, 1]` model scale.
pub fn frame_metrics(
    pred: &[f64],
    target: &[f64],
    c: usize,
    h: usize,
    w: usize,
    cfg: &MetricsConfig,
) -> Result<FrameMetrics> {
    check_len(pred, target)?;
    let p: Vec<f64> = pred.iter().map(|v| v * cfg.scale).collect();
    let t: Vec<f64> = target.iter().map(|v| v * cfg.scale).collect();
    let m = mse(&p, &t)?;
    let unit_sse: f64 = pred
        .iter()
        .zip(target)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let mut s = 0.0;
    for ch in 0..c {
        let r = ch * h * w..(ch + 1) * h * w;
        s += ssim(&p[r.clone()], &t[r], h, w, cfg)?;
    }
    Ok(FrameMetrics {
        mse: m,
        mse_frame: unit_sse,
        psnr: psnr_from_mse(m, cfg.peak),
        ssim: s / c as f64,
        csi: csi(&p, &t, cfg.csi_threshold)?.value,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    /// One entry per predicted time step.
    pub per_frame: Vec<FrameMetrics>,
    pub aggregate: FrameMetrics,
    /// Sequences contributing to the report.
    pub count: usize,
    /// Frames where CSI had no events in either map.
    pub csi_degenerate: usize,
}

/// Streaming average of [`FrameMetrics`] over sequences, per horizon step.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    cfg: MetricsConfig,
    sums: Vec<FrameMetrics>,
    count: usize,
    csi_degenerate: usize,
}

impl MetricAccumulator {
    pub fn new(pred_len: usize, cfg: MetricsConfig) -> Self {
        Self {
            cfg,
            sums: vec![FrameMetrics::default(); pred_len],
            count: 0,
            csi_degenerate: 0,
        }
    }

    pub fn config(&self) -> &MetricsConfig {
        &self.cfg
    }

    /// Add one sequence: `pred` and `target` are `[P, c, H, W]` in model scale.
    pub fn add_sequence(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        let s = pred.shape();
        if s != target.shape() || s.len() != 4 || s[0] != self.sums.len() {
            return Err(Error::shape(format!(
                "metric sequence {:?} vs {:?}, horizon {}",
                s,
                target.shape(),
                self.sums.len()
            )));
        }
        let (c, h, w) = (s[1], s[2], s[3]);
        let f = c * h * w;
        for t in 0..s[0] {
            let p = &pred.data()[t * f..(t + 1) * f];
            let g = &target.data()[t * f..(t + 1) * f];
            let m = frame_metrics(p, g, c, h, w, &self.cfg)?;
            let scaled = |v: &[f64]| v.iter().map(|x| x * self.cfg.scale).collect::<Vec<_>>();
            if contingency(&scaled(p), &scaled(g), self.cfg.csi_threshold)?
                .csi()
                .degenerate
            {
                self.csi_degenerate += 1;
            }
            self.sums[t].add(&m);
        }
        self.count += 1;
        Ok(())
    }

    /// Add every sequence of a `[B, P, c, H, W]` batch.
    pub fn add_batch(&mut self, pred: &Tensor, target: &Tensor) -> Result<()> {
        if pred.shape() != target.shape() || pred.ndim() != 5 {
            return Err(Error::shape(format!(
                "metric batch {:?} vs {:?}",
                pred.shape(),
                target.shape()
            )));
        }
        for b in 0..pred.shape()[0] {
            self.add_sequence(&pred.index_first(b), &target.index_first(b))?;
        }
        Ok(())
    }

    pub fn finish(&self) -> MetricReport {
        let inv = if self.count == 0 {
            0.0
        } else {
            1.0 / self.count as f64
        };
        let per_frame: Vec<FrameMetrics> = self.sums.iter().map(|m| m.scaled(inv)).collect();
        let mut agg = FrameMetrics::default();
        per_frame.iter().for_each(|m| agg.add(m));
        let aggregate = agg.scaled(1.0 / per_frame.len().max(1) as f64);
        MetricReport {
            per_frame,
            aggregate,
            count: self.count,
            csi_degenerate: self.csi_degenerate,
        }
    }
}

pub const CSV_HEADER: &str = "frame,mse,mse_frame,psnr,ssim,csi";

fn csv_row(out: &mut String, label: &str, m: &FrameMetrics) {
    let _ = writeln!(
        out,
        "{label},{},{},{},{},{}",
        m.mse, m.mse_frame, m.psnr, m.ssim, m.csi
    );
}

impl MetricReport {
    /// One row per horizon step (1-based) and a final `mean` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        for (t, m) in self.per_frame.iter().enumerate() {
            csv_row(&mut out, &(t + 1).to_string(), m);
        }
        csv_row(&mut out, "mean", &self.aggregate);
        out
    }

    /// `key=value` lines, keys prefixed with `prefix`.
    pub fn to_key_values(&self, prefix: &str) -> String {
        let mut out = String::new();
        let mut put = |k: String, v: f64| {
            let _ = writeln!(out, "{prefix}{k}={v}");
        };
        put("count".into(), self.count as f64);
        put("csi_degenerate".into(), self.csi_degenerate as f64);
        let rows = self
            .per_frame
            .iter()
            .enumerate()
            .map(|(t, m)| ((t + 1).to_string(), m))
            .chain(std::iter::once(("mean".to_string(), &self.aggregate)));
        for (label, m) in rows {
            put(format!("{label}.mse"), m.mse);
            put(format!("{label}.mse_frame"), m.mse_frame);
            put(format!("{label}.psnr"), m.psnr);
            put(format!("{label}.ssim"), m.ssim);
            put(format!("{label}.csi"), m.csi);
        }
        out
    }
}
