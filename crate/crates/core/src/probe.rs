//! Linear probes on frozen final-layer features.
//!
//! Both probes work per patch token. Segmentation uses softmax regression
//! against the per-patch class histogram; depth uses ridge regression
//! against the per-patch mean depth. Token predictions are bilinearly
//! upsampled to pixels before scoring.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::resize_bilinear;
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::metrics::{aligned, argmax, DepthScores, DepthSums, IouCounts, SegScores};
use crate::model::Model;
use crate::params::ParamStore;
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub seg_steps: usize,
    pub seg_lr: f64,
    /// Ridge penalty per training token.
    pub ridge: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            seg_steps: 200,
            seg_lr: 0.1,
            ridge: 1e-3,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.seg_lr > 0.0) {
            return Err(Error::config("probe.seg_lr", "must be > 0"));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::config("probe.ridge", "must be >= 0"));
        }
        Ok(())
    }
}

/// Final-layer token features of a set of images, row-major
/// `[tokens, dim]` per image.
#[derive(Debug, Clone)]
pub struct Features {
    pub per_image: Vec<Vec<f64>>,
    pub grid: usize,
    pub dim: usize,
    pub side: usize,
}

impl Features {
    pub fn extract<T: Real>(model: &Model, store: &ParamStore<T>, samples: &[Sample]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Evaluation("no samples to probe".into()));
        };
        let side = first.image.dims()[0];
        let per_image = samples
            .par_iter()
            .map(|s| Ok(model.features(store, &s.image.cast::<T>())?.to_f64_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            per_image,
            grid: side / model.cfg.backbone.patch_size,
            dim: model.cfg.backbone.embed_dim,
            side,
        })
    }

    fn tokens(&self) -> usize {
        self.grid * self.grid
    }
}

/// Per-feature affine standardization fitted on probe training tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub inv_std: Vec<f64>,
}

impl Standardizer {
    fn fit(f: &Features) -> Self {
        let d = f.dim;
        let n = (f.per_image.len() * f.tokens()) as f64;
        let mut mean = vec![0.0; d];
        for row in f.per_image.iter().flat_map(|x| x.chunks(d)) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for row in f.per_image.iter().flat_map(|x| x.chunks(d)) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        Self {
            mean,
            inv_std: var.iter().map(|v| 1.0 / (v.sqrt() + 1e-6)).collect(),
        }
    }

    fn apply(&self, row: &[f64]) -> Vec<f64> {
        row.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), s)| (v - m) * s).collect()
    }
}

/// `y = standardize(x) W + b` per token, with `W` row-major `[dim, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub outputs: usize,
    pub norm: Standardizer,
}

impl LinearProbe {
    fn predict_tokens(&self, feats: &[f64], dim: usize) -> Vec<f64> {
        let c = self.outputs;
        let mut out = Vec::with_capacity(feats.len() / dim * c);
        for row in feats.chunks(dim) {
            let x = self.norm.apply(row);
            let mut y = self.bias.clone();
            for (k, xv) in x.iter().enumerate() {
                for (j, yj) in y.iter_mut().enumerate() {
                    *yj += xv * self.weight[k * c + j];
                }
            }
            out.extend(y);
        }
        out
    }

    /// Per-pixel outputs `[side, side, outputs]` for one image.
    pub fn predict_pixels(&self, feats: &[f64], f: &Features) -> Vec<f64> {
        let t = self.predict_tokens(feats, f.dim);
        resize_bilinear(&t, f.grid, f.grid, self.outputs, f.side, f.side)
    }
}

/// Fraction of each class among the pixels of every patch,
/// `[tokens, classes]` row-major.
fn patch_histogram(labels: &[f32], side: usize, grid: usize, classes: usize) -> Result<Vec<f64>> {
    let p = side / grid;
    let w = 1.0 / (p * p) as f64;
    let mut h = vec![0.0; grid * grid * classes];
    for y in 0..side {
        for x in 0..side {
            let c = labels[y * side + x] as usize;
            if c >= classes {
                return Err(Error::contract(format!("class id {c} outside [0, {classes})")));
            }
            h[((y / p) * grid + x / p) * classes + c] += w;
        }
    }
    Ok(h)
}

fn patch_means(values: &[f32], side: usize, grid: usize) -> Vec<f64> {
    let p = side / grid;
    let mut m = vec![0.0; grid * grid];
    for y in 0..side {
        for x in 0..side {
            m[(y / p) * grid + x / p] += values[y * side + x] as f64 / (p * p) as f64;
        }
    }
    m
}

/// Softmax regression by full-batch gradient descent from zero weights.
pub fn fit_probe_seg(f: &Features, samples: &[Sample], classes: usize, cfg: &ProbeConfig) -> Result<LinearProbe> {
    if classes < 2 {
        return Err(Error::config("probe.classes", "need at least 2 classes"));
    }
    cfg.validate()?;
    let (d, c) = (f.dim, classes);
    let norm = Standardizer::fit(f);
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (feats, s) in f.per_image.iter().zip(samples) {
        for row in feats.chunks(d) {
            x.extend(norm.apply(row));
        }
        y.extend(patch_histogram(s.classes.data(), f.side, f.grid, c)?);
    }
    let n = x.len() / d;
    let mut w = vec![0.0; d * c];
    let mut b = vec![0.0; c];
    let mut logits = vec![0.0; c];
    for _ in 0..cfg.seg_steps {
        let mut gw = vec![0.0; d * c];
        let mut gb = vec![0.0; c];
        for i in 0..n {
            let xi = &x[i * d..(i + 1) * d];
            logits.copy_from_slice(&b);
            for (k, xv) in xi.iter().enumerate() {
                for (j, l) in logits.iter_mut().enumerate() {
                    *l += xv * w[k * c + j];
                }
            }
            let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for j in 0..c {
                let r = (logits[j] - m).exp() / z - y[i * c + j];
                logits[j] = r;
                gb[j] += r;
            }
            for (k, xv) in xi.iter().enumerate() {
                for j in 0..c {
                    gw[k * c + j] += xv * logits[j];
                }
            }
        }
        let step = cfg.seg_lr / n as f64;
        w.iter_mut().zip(&gw).for_each(|(wi, g)| *wi -= step * g);
        b.iter_mut().zip(&gb).for_each(|(bi, g)| *bi -= step * g);
    }
    Ok(LinearProbe {
        weight: w,
        bias: b,
        outputs: c,
        norm,
    })
}

/// Ridge regression in closed form; the bias is the mean target and is
/// not penalised.
pub fn fit_probe_depth(f: &Features, samples: &[Sample], cfg: &ProbeConfig) -> Result<LinearProbe> {
    cfg.validate()?;
    let d = f.dim;
    let norm = Standardizer::fit(f);
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for (feats, s) in f.per_image.iter().zip(samples) {
        for row in feats.chunks(d) {
            rows.extend(norm.apply(row));
        }
        y.extend(patch_means(s.depth.data(), f.side, f.grid));
    }
    let n = y.len();
    let mean_y = y.iter().sum::<f64>() / n as f64;
    let x = DMatrix::from_row_slice(n, d, &rows);
    let yc = DVector::from_iterator(n, y.iter().map(|v| v - mean_y));
    let mut gram = x.transpose() * &x;
    for k in 0..d {
        gram[(k, k)] += cfg.ridge * n as f64 + 1e-9;
    }
    let rhs = x.transpose() * yc;
    let w = gram
        .cholesky()
        .ok_or_else(|| Error::Evaluation("ridge system is not positive definite".into()))?
        .solve(&rhs);
    Ok(LinearProbe {
        weight: w.iter().copied().collect(),
        bias: vec![mean_y],
        outputs: 1,
        norm,
    })
}

/// mIoU over all pixels of all images; argmax ties go to the lowest class.
pub fn eval_probe_seg(probe: &LinearProbe, f: &Features, samples: &[Sample]) -> Result<SegScores> {
    let mut counts = IouCounts::new(probe.outputs);
    for (feats, s) in f.per_image.iter().zip(samples) {
        let px = probe.predict_pixels(feats, f);
        let pred: Vec<usize> = px.chunks(probe.outputs).map(argmax).collect();
        let gt: Vec<usize> = s.classes.data().iter().map(|&c| c as usize).collect();
        counts.add(&pred, &gt)?;
    }
    counts.scores()
}

/// Depth metrics pooled over pixels after per-image scale-shift alignment.
pub fn eval_probe_depth(probe: &LinearProbe, f: &Features, samples: &[Sample]) -> Result<DepthScores> {
    let mut sums = DepthSums::default();
    for (feats, s) in f.per_image.iter().zip(samples) {
        let pred = probe.predict_pixels(feats, f);
        let gt = s.depth.to_f64_vec();
        sums.add(&aligned(&pred, &gt)?, &gt)?;
    }
    sums.scores()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, Split, NUM_CLASSES};
    use crate::model::ModelConfig;
    use crate::tensor::Tensor;

    fn small_model() -> ModelConfig {
        let mut c = ModelConfig::default();
        c.backbone.image_side = 16;
        c.backbone.embed_dim = 16;
        c.backbone.num_layers = 3;
        c
    }

    #[test]
    fn probing_leaves_backbone_untouched() {
        let (m, store) = Model::init::<f32>(&small_model(), 0).unwrap();
        let before = store.digest(None);
        let ds = Dataset::generate(20, 0, Split::Val, 16);
        let f = Features::extract(&m, &store, &ds.samples).unwrap();
        let seg = fit_probe_seg(&f, &ds.samples, NUM_CLASSES, &ProbeConfig::default()).unwrap();
        let dep = fit_probe_depth(&f, &ds.samples, &ProbeConfig::default()).unwrap();
        let s = eval_probe_seg(&seg, &f, &ds.samples).unwrap();
        let d = eval_probe_depth(&dep, &f, &ds.samples).unwrap();
        assert!((0.0..=1.0).contains(&s.miou) && d.rmse.is_finite());
        assert_eq!(store.digest(None), before);
        assert!(matches!(
            fit_probe_seg(&f, &ds.samples, 1, &ProbeConfig::default()),
            Err(Error::Config { .. })
        ));
    }

    /// Two classes told apart by the sign of one feature.
    #[test]
    fn separable_two_class_probe_is_accurate() {
        let side = 8;
        let grid = 2;
        let mut samples = Vec::new();
        let mut per_image = Vec::new();
        let base = Dataset::generate(1, 0, Split::Train, side).samples[0].clone();
        for i in 0..12 {
            let mut s = base.clone();
            let labels: Vec<f32> = (0..side * side)
                .map(|p| (((p / side) / 4 * 2 + (p % side) / 4) + i) % 2)
                .map(|v| v as f32)
                .collect();
            let mut feats = Vec::new();
            for t in 0..grid * grid {
                let cls = ((t + i) % 2) as f64;
                feats.extend([2.0 * cls - 1.0, 0.3 * (t as f64), 0.1 * i as f64]);
            }
            s.classes = Tensor::new(vec![side, side], labels).unwrap();
            samples.push(s);
            per_image.push(feats);
        }
        let f = Features {
            per_image,
            grid,
            dim: 3,
            side,
        };
        let probe = fit_probe_seg(&f, &samples, 2, &ProbeConfig::default()).unwrap();
        let s = eval_probe_seg(&probe, &f, &samples).unwrap();
        assert!(s.miou > 0.9, "{}", s.miou);
    }

    #[test]
    fn ridge_recovers_linear_depth() {
        let side = 8;
        let grid = 2;
        let base = Dataset::generate(1, 0, Split::Train, side).samples[0].clone();
        let mut samples = Vec::new();
        let mut per_image = Vec::new();
        for i in 0..10 {
            let mut s = base.clone();
            let mut feats = Vec::new();
            let mut depth = vec![0f32; side * side];
            for t in 0..grid * grid {
                let a = ((i * 7 + t * 3) % 11) as f64 / 11.0;
                let b = ((i * 5 + t) % 7) as f64 / 7.0;
                feats.extend([a, b]);
                let v = 0.2 + 0.5 * a - 0.1 * b;
                for y in 0..4 {
                    for x in 0..4 {
                        depth[((t / 2) * 4 + y) * side + (t % 2) * 4 + x] = v as f32;
                    }
                }
            }
            s.depth = Tensor::new(vec![side, side], depth).unwrap();
            samples.push(s);
            per_image.push(feats);
        }
        let f = Features {
            per_image,
            grid,
            dim: 2,
            side,
        };
        let probe = fit_probe_depth(&f, &samples, &ProbeConfig { ridge: 0.0, ..ProbeConfig::default() }).unwrap();
        let pred = probe.predict_tokens(&f.per_image[0], 2);
        let want = patch_means(samples[0].depth.data(), side, grid);
        for (p, w) in pred.iter().zip(&want) {
            assert!((p - w).abs() < 1e-5, "{p} vs {w}");
        }
    }
}
