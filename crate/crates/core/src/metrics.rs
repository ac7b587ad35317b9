//! Segmentation and depth metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One line of a metrics report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub task: String,
    pub metric: String,
    pub value: f64,
    pub dataset: String,
    pub samples: usize,
}

impl MetricReport {
    pub fn new(task: &str, metric: &str, value: f64, dataset: &str, samples: usize) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Evaluation(format!("{task}/{metric} is not finite")));
        }
        if samples == 0 {
            return Err(Error::Evaluation(format!("{task}/{metric} over zero samples")));
        }
        Ok(Self {
            task: task.into(),
            metric: metric.into(),
            value,
            dataset: dataset.into(),
            samples,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegScores {
    /// `None` for classes absent from both prediction and ground truth.
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
}

/// Intersection and union counts accumulated over many maps.
#[derive(Debug, Clone, PartialEq)]
pub struct IouCounts {
    inter: Vec<u64>,
    union: Vec<u64>,
}

impl IouCounts {
    pub fn new(classes: usize) -> Self {
        Self {
            inter: vec![0; classes],
            union: vec![0; classes],
        }
    }

    pub fn add(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!("{} predicted vs {} labelled pixels", pred.len(), gt.len())));
        }
        let c = self.inter.len();
        if let Some(bad) = pred.iter().chain(gt).find(|&&x| x >= c) {
            return Err(Error::contract(format!("class id {bad} outside [0, {c})")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if p == g {
                self.inter[p] += 1;
                self.union[p] += 1;
            } else {
                self.union[p] += 1;
                self.union[g] += 1;
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> Result<SegScores> {
        let iou: Vec<Option<f64>> = self
            .inter
            .iter()
            .zip(&self.union)
            .map(|(&i, &u)| (u > 0).then(|| i as f64 / u as f64))
            .collect();
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        if present.is_empty() {
            return Err(Error::Evaluation("no pixels to score".into()));
        }
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(SegScores { iou, miou })
    }
}

pub fn seg_metrics(pred: &[usize], gt: &[usize], classes: usize) -> Result<SegScores> {
    let mut c = IouCounts::new(classes);
    c.add(pred, gt)?;
    c.scores()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthScores {
    pub rmse: f64,
    pub abs_rel: f64,
    pub delta1: f64,
}

/// Squared error, relative error and threshold counts pooled over pixels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DepthSums {
    sq: f64,
    rel: f64,
    within: u64,
    count: u64,
}

impl DepthSums {
    /// Adds pixels with `gt > 0`, comparing `pred` as given.
    pub fn add(&mut self, pred: &[f64], gt: &[f64]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!("{} predicted vs {} labelled pixels", pred.len(), gt.len())));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g > 0.0 {
                let e = p - g;
                self.sq += e * e;
                self.rel += e.abs() / g;
                if (p / g).max(g / p) < 1.25 && p > 0.0 {
                    self.within += 1;
                }
                self.count += 1;
            }
        }
        Ok(())
    }

    pub fn scores(&self) -> Result<DepthScores> {
        if self.count == 0 {
            return Err(Error::Evaluation("empty validity mask".into()));
        }
        let n = self.count as f64;
        Ok(DepthScores {
            rmse: (self.sq / n).sqrt(),
            abs_rel: self.rel / n,
            delta1: self.within as f64 / n,
        })
    }
}

/// Least-squares `(scale, shift)` minimising `sum (s pred + b - gt)^2`
/// over pixels with `gt > 0`.
pub fn align_scale_shift(pred: &[f64], gt: &[f64]) -> Result<(f64, f64)> {
    let pairs: Vec<(f64, f64)> = pred.iter().zip(gt).filter(|(_, &g)| g > 0.0).map(|(&p, &g)| (p, g)).collect();
    if pairs.is_empty() {
        return Err(Error::Evaluation("empty validity mask".into()));
    }
    let n = pairs.len() as f64;
    let (mp, mg) = pairs.iter().fold((0.0, 0.0), |(a, b), (p, g)| (a + p / n, b + g / n));
    let (mut cov, mut var) = (0.0, 0.0);
    for (p, g) in &pairs {
        cov += (p - mp) * (g - mg);
        var += (p - mp) * (p - mp);
    }
    let s = if var > 0.0 { cov / var } else { 0.0 };
    Ok((s, mg - s * mp))
}

/// Metrics of `pred` as given, on pixels with `gt > 0`.
pub fn depth_metrics_raw(pred: &[f64], gt: &[f64]) -> Result<DepthScores> {
    let mut s = DepthSums::default();
    s.add(pred, gt)?;
    s.scores()
}

/// Metrics after least-squares scale-and-shift alignment of `pred` to `gt`.
pub fn depth_metrics(pred: &[f64], gt: &[f64]) -> Result<DepthScores> {
    depth_metrics_raw(&aligned(pred, gt)?, gt)
}

pub fn aligned(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::shape(format!("{} predicted vs {} labelled pixels", pred.len(), gt.len())));
    }
    let (s, b) = align_scale_shift(pred, gt)?;
    Ok(pred.iter().map(|p| s * p + b).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn seg_examples() {
        let s = seg_metrics(&[1, 1, 0, 0], &[1, 0, 0, 0], 2).unwrap();
        assert!((s.iou[1].unwrap() - 0.5).abs() < 1e-12);
        assert!((s.iou[0].unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.miou - 7.0 / 12.0).abs() < 1e-12);
        assert_eq!(seg_metrics(&[2, 0, 1], &[2, 0, 1], 5).unwrap().miou, 1.0);
        let s = seg_metrics(&[0, 0, 0, 0], &[1, 1, 1, 1], 3).unwrap();
        assert_eq!(s.miou, 0.0);
        assert_eq!(s.iou[2], None);
        assert!(matches!(seg_metrics(&[0], &[0, 1], 2), Err(Error::Shape(_))));
        assert!(matches!(seg_metrics(&[3], &[0], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn depth_examples() {
        let s = depth_metrics_raw(&[1.0, 2.0, 2.0], &[1.0, 2.0, 4.0]).unwrap();
        assert!((s.abs_rel - 1.0 / 6.0).abs() < 1e-12);
        assert!((s.delta1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.rmse - (4.0f64 / 3.0).sqrt()).abs() < 1e-12);

        let gt = [0.3, 0.5, 0.9, 0.7];
        let id = depth_metrics(&gt, &gt).unwrap();
        assert_eq!((id.rmse, id.abs_rel, id.delta1), (0.0, 0.0, 1.0));
        let scaled: Vec<f64> = gt.iter().map(|g| 1.2 * g).collect();
        let s = depth_metrics(&scaled, &gt).unwrap();
        assert!(s.rmse < 1e-12 && s.abs_rel < 1e-12 && s.delta1 == 1.0);

        assert!(matches!(depth_metrics(&[1.0], &[0.0]), Err(Error::Evaluation(_))));
    }

    proptest! {
        #[test]
        fn miou_is_relabel_equivariant(pairs in prop::collection::vec((0usize..4, 0usize..4), 1..40), perm in Just([2usize, 0, 3, 1]).prop_shuffle()) {
            let (p, g): (Vec<usize>, Vec<usize>) = pairs.into_iter().unzip();
            let a = seg_metrics(&p, &g, 4).unwrap().miou;
            let p2: Vec<usize> = p.iter().map(|&x| perm[x]).collect();
            let g2: Vec<usize> = g.iter().map(|&x| perm[x]).collect();
            prop_assert!((a - seg_metrics(&p2, &g2, 4).unwrap().miou).abs() < 1e-12);
        }

        #[test]
        fn depth_scores_are_bounded(v in prop::collection::vec((0.05f64..2.0, 0.05f64..2.0), 1..40)) {
            let (p, g): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            let s = depth_metrics_raw(&p, &g).unwrap();
            prop_assert!(s.rmse >= 0.0 && s.abs_rel >= 0.0);
            prop_assert!((0.0..=1.0).contains(&s.delta1));
            let z = depth_metrics_raw(&g, &g).unwrap();
            prop_assert!(z.rmse == 0.0 && z.abs_rel == 0.0 && z.delta1 == 1.0);
        }
    }
}
