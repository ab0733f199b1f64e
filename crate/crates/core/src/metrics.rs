//! Volumetric image-quality metrics and evaluation reports.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::Dataset;
use crate::error::TrainError;
use crate::swin3d::{ModelError, SuperFormer};
use crate::tensor::Tensor;
use crate::train::{EVAL_OVERLAP, EVAL_TILE};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("shape mismatch: {0:?} vs {1:?}")]
    ShapeMismatch(Vec<usize>, Vec<usize>),
    #[error("data range must be positive, got {0}")]
    BadRange(f64),
    #[error("reference volume has zero norm")]
    ZeroReference,
    #[error("volume {dims:?} smaller than the {SSIM_WINDOW}-voxel SSIM window")]
    TooSmall { dims: Vec<usize> },
    #[error("no subjects to aggregate")]
    Empty,
}

/// PSNR in dB, with an explicit value for identical inputs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Psnr {
    Finite(f64),
    /// MSE was exactly zero.
    Identical,
}

impl Psnr {
    pub fn finite(self) -> Option<f64> {
        match self {
            Psnr::Finite(v) => Some(v),
            Psnr::Identical => None,
        }
    }
}

impl fmt::Display for Psnr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Psnr::Finite(v) => write!(f, "{v:.4}"),
            Psnr::Identical => f.write_str("identical"),
        }
    }
}

fn check_pair(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<(), MetricsError> {
    if x.shape() != y.shape() {
        return Err(MetricsError::ShapeMismatch(x.shape().to_vec(), y.shape().to_vec()));
    }
    Ok(())
}

pub fn mse(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    let s: f64 = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(&a, &b)| {
            let d = a as f64 - b as f64;
            d * d
        })
        .sum();
    Ok(s / x.len().max(1) as f64)
}

/// `10·log10(range² / MSE)`.
pub fn psnr(x: &Tensor<f32>, y: &Tensor<f32>, data_range: f64) -> Result<Psnr, MetricsError> {
    if !(data_range > 0.0) {
        return Err(MetricsError::BadRange(data_range));
    }
    let e = mse(x, y)?;
    Ok(if e == 0.0 {
        Psnr::Identical
    } else {
        Psnr::Finite(10.0 * (data_range * data_range / e).log10())
    })
}

/// `‖x − y‖₂ / ‖y‖₂`.
pub fn nrmse(x: &Tensor<f32>, y: &Tensor<f32>) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    let (mut num, mut den) = (0.0f64, 0.0f64);
    for (&a, &b) in x.data().iter().zip(y.data()) {
        let d = a as f64 - b as f64;
        num += d * d;
        den += b as f64 * b as f64;
    }
    if den == 0.0 {
        return Err(MetricsError::ZeroReference);
    }
    Ok((num / den).sqrt())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let t = i as f64 - r;
            (-t * t / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable filtering of a `[h, w, d]` field along one axis.
fn filter_axis(src: &[f64], dims: [usize; 3], axis: usize, k: &[f64]) -> (Vec<f64>, [usize; 3]) {
    let mut out_dims = dims;
    out_dims[axis] = dims[axis] + 1 - k.len();
    let [oh, ow, od] = out_dims;
    let stride = [dims[1] * dims[2], dims[2], 1][axis];
    let mut out = vec![0.0; oh * ow * od];
    out.par_chunks_mut(ow * od).enumerate().for_each(|(i, plane)| {
        for j in 0..ow {
            for l in 0..od {
                let base = (i * dims[1] + j) * dims[2] + l;
                let mut acc = 0.0;
                for (t, &kv) in k.iter().enumerate() {
                    acc += kv * src[base + t * stride];
                }
                plane[j * od + l] = acc;
            }
        }
    });
    (out, out_dims)
}

fn gaussian_blur(src: &[f64], dims: [usize; 3], k: &[f64]) -> Vec<f64> {
    let (a, da) = filter_axis(src, dims, 0, k);
    let (b, db) = filter_axis(&a, da, 1, k);
    filter_axis(&b, db, 2, k).0
}

/// Mean local SSIM over all valid positions of an isotropic Gaussian window.
/// Both inputs are `[1, H, W, D]` or `[H, W, D]`.
pub fn ssim3d(x: &Tensor<f32>, y: &Tensor<f32>, data_range: f64) -> Result<f64, MetricsError> {
    check_pair(x, y)?;
    if !(data_range > 0.0) {
        return Err(MetricsError::BadRange(data_range));
    }
    let s = x.shape();
    let dims: [usize; 3] = match s.len() {
        3 => [s[0], s[1], s[2]],
        4 if s[0] == 1 => [s[1], s[2], s[3]],
        _ => return Err(MetricsError::TooSmall { dims: s.to_vec() }),
    };
    if dims.iter().any(|&d| d < SSIM_WINDOW) {
        return Err(MetricsError::TooSmall { dims: dims.to_vec() });
    }
    let k = gaussian_window();
    let xs: Vec<f64> = x.data().iter().map(|&v| v as f64).collect();
    let ys: Vec<f64> = y.data().iter().map(|&v| v as f64).collect();
    let xx: Vec<f64> = xs.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = ys.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = xs.iter().zip(&ys).map(|(a, b)| a * b).collect();
    let mx = gaussian_blur(&xs, dims, &k);
    let my = gaussian_blur(&ys, dims, &k);
    let exx = gaussian_blur(&xx, dims, &k);
    let eyy = gaussian_blur(&yy, dims, &k);
    let exy = gaussian_blur(&xy, dims, &k);
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (a, b) = (mx[i], my[i]);
        let vx = exx[i] - a * a;
        let vy = eyy[i] - b * b;
        let cov = exy[i] - a * b;
        total += ((2.0 * a * b + c1) * (2.0 * cov + c2)) / ((a * a + b * b + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

/// Metrics for one subject.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectMetrics {
    pub id: String,
    pub psnr: Psnr,
    pub ssim: f64,
    pub nrmse: f64,
}

impl SubjectMetrics {
    pub fn compute(id: impl Into<String>, sr: &Tensor<f32>, hr: &Tensor<f32>) -> Result<Self, MetricsError> {
        Ok(Self {
            id: id.into(),
            psnr: psnr(sr, hr, 1.0)?,
            ssim: ssim3d(sr, hr, 1.0)?,
            nrmse: nrmse(sr, hr)?,
        })
    }
}

/// Mean and population standard deviation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Result<Self, MetricsError> {
        if values.is_empty() {
            return Err(MetricsError::Empty);
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt() })
    }
}

impl fmt::Display for MeanStd {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.4}±{:.4}", self.mean, self.std)
    }
}

/// Aggregate PSNR; any identical subject makes the mean unbounded.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PsnrSummary {
    Finite(MeanStd),
    Identical,
}

impl fmt::Display for PsnrSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PsnrSummary::Finite(m) => m.fmt(f),
            PsnrSummary::Identical => f.write_str("identical"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub psnr: PsnrSummary,
    pub ssim: MeanStd,
    pub nrmse: MeanStd,
}

pub fn aggregate(subjects: &[SubjectMetrics]) -> Result<Aggregate, MetricsError> {
    let ssim: Vec<f64> = subjects.iter().map(|s| s.ssim).collect();
    let nrmse: Vec<f64> = subjects.iter().map(|s| s.nrmse).collect();
    let finite: Option<Vec<f64>> = subjects.iter().map(|s| s.psnr.finite()).collect();
    Ok(Aggregate {
        psnr: match finite {
            Some(v) => PsnrSummary::Finite(MeanStd::of(&v)?),
            None => PsnrSummary::Identical,
        },
        ssim: MeanStd::of(&ssim)?,
        nrmse: MeanStd::of(&nrmse)?,
    })
}

/// Per-subject metrics for the model and, optionally, the trilinear
/// baseline on the same pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub model: Vec<SubjectMetrics>,
    pub baseline: Vec<SubjectMetrics>,
}

impl MetricReport {
    pub fn model_aggregate(&self) -> Result<Aggregate, MetricsError> {
        aggregate(&self.model)
    }

    pub fn baseline_aggregate(&self) -> Result<Aggregate, MetricsError> {
        aggregate(&self.baseline)
    }

    /// One `key=value` record per subject, then one per aggregate.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (method, rows) in [("model", &self.model), ("trilinear", &self.baseline)] {
            for s in rows.iter() {
                out.push_str(&format!(
                    "method={method} subject={} psnr={} ssim={:.6} nrmse={:.6}\n",
                    s.id, s.psnr, s.ssim, s.nrmse
                ));
            }
            if let Ok(a) = aggregate(rows) {
                out.push_str(&format!(
                    "method={method} subject=ALL psnr={} ssim={} nrmse={}\n",
                    a.psnr, a.ssim, a.nrmse
                ));
            }
        }
        out
    }
}

/// Metrics of `model` and of the trilinear baseline (the degraded input
/// itself, which is already resized to the HR grid) on every subject.
pub fn evaluate(model: &SuperFormer<f32>, data: &Dataset) -> Result<MetricReport, TrainError> {
    if data.is_empty() {
        return Err(TrainError::Data("evaluation dataset is empty".into()));
    }
    let metric_err = |e: MetricsError| TrainError::Data(e.to_string());
    let mut report = MetricReport {
        model: Vec::new(),
        baseline: Vec::new(),
    };
    for pair in &data.pairs {
        let sr = model
            .predict_tiled(&pair.lr.data, EVAL_TILE, EVAL_OVERLAP)
            .map_err(|e| match e {
                ModelError::Config(c) => TrainError::from(c),
                ModelError::Tensor(t) => TrainError::from(t),
            })?;
        report
            .model
            .push(SubjectMetrics::compute(pair.id(), &sr, &pair.hr.data).map_err(metric_err)?);
        report
            .baseline
            .push(SubjectMetrics::compute(pair.id(), &pair.lr.data, &pair.hr.data).map_err(metric_err)?);
    }
    Ok(report)
}
