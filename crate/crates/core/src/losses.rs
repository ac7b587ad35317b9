//! Task losses and their weighted combination.
//!
//! Depth losses are affine-invariant: both maps are shifted by their median
//! and divided by their mean absolute deviation before comparison.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;

/// Guard on the mean absolute deviation of a depth map.
pub const MAD_EPS: f64 = 1e-6;
/// Additive smoothing in the Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

/// Task weights for the ablation over the combined objective, in
/// `(cap, depth, seg)` order. The balanced setting is the exact default
/// of 1/3 each.
pub const ABLATION_TASK_WEIGHTS: [[f64; 3]; 4] = [
    [0.50, 0.25, 0.25],
    [0.25, 0.50, 0.25],
    [0.25, 0.25, 0.50],
    [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub cap: f64,
    pub depth: f64,
    pub seg: f64,
    pub ssi: f64,
    pub gm: f64,
    pub bce: f64,
    pub dice: f64,
    /// Number of pooled scales in the gradient-matching term.
    pub gm_scales: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cap: 1.0 / 3.0,
            depth: 1.0 / 3.0,
            seg: 1.0 / 3.0,
            ssi: 1.0,
            gm: 0.5,
            bce: 2.0,
            dice: 0.5,
            gm_scales: 4,
        }
    }
}

impl LossWeights {
    pub fn with_tasks(mut self, [cap, depth, seg]: [f64; 3]) -> Self {
        self.cap = cap;
        self.depth = depth;
        self.seg = seg;
        self
    }

    pub fn validate(&self) -> Result<()> {
        for (k, v) in [
            ("cap", self.cap),
            ("depth", self.depth),
            ("seg", self.seg),
            ("ssi", self.ssi),
            ("gm", self.gm),
            ("bce", self.bce),
            ("dice", self.dice),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("loss.{k}"), format!("weight must be finite and >= 0, got {v}")));
            }
        }
        if self.cap + self.depth + self.seg <= 0.0 {
            return Err(Error::config("loss", "task weights must not all be zero"));
        }
        if self.gm_scales == 0 {
            return Err(Error::config("loss.gm_scales", "must be >= 1"));
        }
        Ok(())
    }
}

fn map_dims<T: Real>(g: &Graph<'_, T>, d: Var) -> Result<(usize, usize)> {
    match *g.dims(d)? {
        [h, w] => Ok((h, w)),
        ref other => Err(Error::shape(format!("expected a 2-d map, got {other:?}"))),
    }
}

fn same_dims<T: Real>(g: &Graph<'_, T>, a: Var, b: Var) -> Result<(usize, usize)> {
    let (da, db) = (map_dims(g, a)?, map_dims(g, b)?);
    if da != db {
        return Err(Error::shape(format!("map dims {da:?} vs {db:?}")));
    }
    Ok(da)
}

/// Result of [`affine_normalize`]: the normalized map and the
/// translation and (guarded) scale that produced it.
#[derive(Debug, Clone, Copy)]
pub struct Normalized {
    pub map: Var,
    pub t: Var,
    pub s: Var,
}

/// `(d - median(d)) / max(mean|d - median(d)|, eps)`.
pub fn affine_normalize<T: Real>(g: &mut Graph<'_, T>, d: Var) -> Result<Normalized> {
    let dims = g.dims(d)?.to_vec();
    let t = g.median(d)?;
    let tb = g.broadcast(t, &dims)?;
    let centered = g.sub(d, tb)?;
    let dev = g.abs(centered)?;
    let mad = g.mean(dev)?;
    let s = g.clamp_min(mad, MAD_EPS)?;
    let sb = g.broadcast(s, &dims)?;
    let map = g.div(centered, sb)?;
    Ok(Normalized { map, t, s })
}

/// Mean absolute difference of the two normalized maps.
pub fn loss_ssi<T: Real>(g: &mut Graph<'_, T>, pred: Var, gt: Var) -> Result<Var> {
    same_dims(g, pred, gt)?;
    let p = affine_normalize(g, pred)?.map;
    let q = affine_normalize(g, gt)?.map;
    let diff = g.sub(p, q)?;
    let a = g.abs(diff)?;
    g.mean(a)
}

fn rows(range: std::ops::Range<usize>) -> Vec<usize> {
    range.collect()
}

/// Sum over pixels of `|dx(a) - dx(b)| + |dy(a) - dy(b)|` for `[h, w]`
/// maps, using forward differences.
fn gradient_gap<T: Real>(g: &mut Graph<'_, T>, diff: Var, h: usize, w: usize) -> Result<Option<Var>> {
    let mut terms = Vec::new();
    if w > 1 {
        let right = g.narrow_cols(diff, 1, w - 1)?;
        let left = g.narrow_cols(diff, 0, w - 1)?;
        let dx = g.sub(right, left)?;
        let a = g.abs(dx)?;
        terms.push(g.sum(a)?);
    }
    if h > 1 {
        let down = g.gather_rows(diff, &rows(1..h))?;
        let up = g.gather_rows(diff, &rows(0..h - 1))?;
        let dy = g.sub(down, up)?;
        let a = g.abs(dy)?;
        terms.push(g.sum(a)?);
    }
    match terms[..] {
        [] => Ok(None),
        [x] => Ok(Some(x)),
        [x, y] => Ok(Some(g.add(x, y)?)),
        _ => unreachable!(),
    }
}

/// Multi-scale gradient matching on normalized maps. Each of the `k`
/// scales halves the previous one by 2x2 average pooling and contributes
/// its gradient gap divided by its pixel count.
pub fn loss_gm<T: Real>(g: &mut Graph<'_, T>, pred: Var, gt: Var, k: usize) -> Result<Var> {
    let (h, w) = same_dims(g, pred, gt)?;
    if k == 0 || k > 31 || (1usize << (k - 1)) > h.min(w) {
        return Err(Error::config(
            "loss.gm_scales",
            format!("{k} scales do not fit a {h}x{w} map"),
        ));
    }
    let p = affine_normalize(g, pred)?.map;
    let q = affine_normalize(g, gt)?.map;
    // The differences are linear, so matching gradients of the residual
    // is the same as differencing each map separately.
    let mut r = g.sub(p, q)?;
    let (mut hh, mut ww) = (h, w);
    let mut total: Option<Var> = None;
    for scale in 0..k {
        if scale > 0 {
            let flat = g.reshape(r, &[hh * ww, 1])?;
            let pooled = g.avg_pool2(flat, hh, ww)?;
            hh /= 2;
            ww /= 2;
            r = g.reshape(pooled, &[hh, ww])?;
        }
        if let Some(gap) = gradient_gap(g, r, hh, ww)? {
            let term = g.scale(gap, 1.0 / (hh * ww) as f64)?;
            total = Some(match total {
                None => term,
                Some(t) => g.add(t, term)?,
            });
        }
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(T::zero()))),
    }
}

pub fn loss_depth<T: Real>(g: &mut Graph<'_, T>, pred: Var, gt: Var, w: &LossWeights) -> Result<Var> {
    if w.ssi < 0.0 || w.gm < 0.0 {
        return Err(Error::config("loss", "depth weights must be >= 0"));
    }
    let ssi = loss_ssi(g, pred, gt)?;
    let ssi = g.scale(ssi, w.ssi)?;
    if w.gm == 0.0 {
        return Ok(ssi);
    }
    let gm = loss_gm(g, pred, gt, w.gm_scales)?;
    let gm = g.scale(gm, w.gm)?;
    g.add(ssi, gm)
}

fn check_binary<T: Real>(mask: &Tensor<T>) -> Result<()> {
    if mask.data().iter().any(|&m| m != T::zero() && m != T::one()) {
        return Err(Error::contract("mask must be binary"));
    }
    Ok(())
}

/// Mean per-pixel cross-entropy of `sigmoid(logits)` against `mask`,
/// evaluated as `softplus(x) - m x`.
pub fn loss_bce<T: Real>(g: &mut Graph<'_, T>, logits: Var, mask: &Tensor<T>) -> Result<Var> {
    check_binary(mask)?;
    let m = g.constant(mask.clone());
    same_dims(g, logits, m)?;
    let sp = g.softplus(logits)?;
    let mx = g.mul(m, logits)?;
    let l = g.sub(sp, mx)?;
    g.mean(l)
}

/// `1 - (2 sum(p m) + delta) / (sum p + sum m + delta)` with `p = sigmoid(logits)`.
pub fn loss_dice<T: Real>(g: &mut Graph<'_, T>, logits: Var, mask: &Tensor<T>) -> Result<Var> {
    check_binary(mask)?;
    let m = g.constant(mask.clone());
    same_dims(g, logits, m)?;
    let p = g.sigmoid(logits)?;
    let pm = g.mul(p, m)?;
    let inter = g.sum(pm)?;
    let num = g.scale(inter, 2.0)?;
    let num = g.add_const(num, DICE_SMOOTH)?;
    let sp = g.sum(p)?;
    let den = g.add_const(sp, mask.data().iter().map(|v| v.f64()).sum::<f64>() + DICE_SMOOTH)?;
    let ratio = g.div(num, den)?;
    let neg = g.scale(ratio, -1.0)?;
    g.add_const(neg, 1.0)
}

pub fn loss_seg<T: Real>(g: &mut Graph<'_, T>, logits: Var, mask: &Tensor<T>, w: &LossWeights) -> Result<Var> {
    if w.bce < 0.0 || w.dice < 0.0 {
        return Err(Error::config("loss", "segmentation weights must be >= 0"));
    }
    let bce = loss_bce(g, logits, mask)?;
    let bce = g.scale(bce, w.bce)?;
    let dice = loss_dice(g, logits, mask)?;
    let dice = g.scale(dice, w.dice)?;
    g.add(bce, dice)
}

/// `cap * l_cap + depth * l_depth + seg * l_seg`; terms with zero weight
/// are left out of the graph.
pub fn loss_all<T: Real>(
    g: &mut Graph<'_, T>,
    l_cap: Option<Var>,
    l_depth: Option<Var>,
    l_seg: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    w.validate()?;
    let mut total: Option<Var> = None;
    for (l, lambda) in [(l_cap, w.cap), (l_depth, w.depth), (l_seg, w.seg)] {
        let Some(l) = l else { continue };
        if lambda == 0.0 {
            continue;
        }
        let term = g.scale(l, lambda)?;
        total = Some(match total {
            None => term,
            Some(t) => g.add(t, term)?,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Ok(g.constant(Tensor::scalar(T::zero()))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FiniteDiff};
    use crate::params::{Group, ParamStore};
    use crate::rng::{keyed_rng, Purpose};
    use proptest::prelude::*;
    use rand::Rng;

    fn t(dims: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), v.to_vec()).unwrap()
    }

    fn eval(f: impl FnOnce(&mut Graph<'_, f64>) -> Result<Var>) -> Result<f64> {
        let store = ParamStore::new(0);
        let mut g = Graph::new(&store);
        let v = f(&mut g)?;
        g.scalar(v)
    }

    fn ssi(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
        eval(|g| {
            let (p, q) = (g.constant(a.clone()), g.constant(b.clone()));
            loss_ssi(g, p, q)
        })
        .unwrap()
    }

    fn gm(a: &Tensor<f64>, b: &Tensor<f64>, k: usize) -> Result<f64> {
        eval(|g| {
            let (p, q) = (g.constant(a.clone()), g.constant(b.clone()));
            loss_gm(g, p, q, k)
        })
    }

    /// Direct evaluation of the normalized, multi-scale gradient gap on
    /// plain vectors, independent of the graph.
    fn gm_oracle(a: &[f64], b: &[f64], h: usize, w: usize, k: usize) -> f64 {
        fn norm(d: &[f64]) -> Vec<f64> {
            let mut s = d.to_vec();
            s.sort_by(|x, y| x.partial_cmp(y).unwrap());
            let n = s.len();
            let med = if n % 2 == 1 { s[n / 2] } else { 0.5 * (s[n / 2 - 1] + s[n / 2]) };
            let mad = d.iter().map(|x| (x - med).abs()).sum::<f64>() / n as f64;
            d.iter().map(|x| (x - med) / mad.max(MAD_EPS)).collect()
        }
        let (mut pa, mut pb) = (norm(a), norm(b));
        let (mut hh, mut ww) = (h, w);
        let mut total = 0.0;
        for scale in 0..k {
            if scale > 0 {
                let pool = |m: &[f64]| {
                    let mut o = vec![0.0; (hh / 2) * (ww / 2)];
                    for y in 0..hh / 2 {
                        for x in 0..ww / 2 {
                            o[y * (ww / 2) + x] = 0.25
                                * (m[2 * y * ww + 2 * x]
                                    + m[2 * y * ww + 2 * x + 1]
                                    + m[(2 * y + 1) * ww + 2 * x]
                                    + m[(2 * y + 1) * ww + 2 * x + 1]);
                        }
                    }
                    o
                };
                pa = pool(&pa);
                pb = pool(&pb);
                hh /= 2;
                ww /= 2;
            }
            let mut s = 0.0;
            for y in 0..hh {
                for x in 0..ww {
                    let i = y * ww + x;
                    if x + 1 < ww {
                        s += ((pa[i + 1] - pa[i]) - (pb[i + 1] - pb[i])).abs();
                    }
                    if y + 1 < hh {
                        s += ((pa[i + ww] - pa[i]) - (pb[i + ww] - pb[i])).abs();
                    }
                }
            }
            total += s / (hh * ww) as f64;
        }
        total
    }

    #[test]
    fn normalize_example() {
        let store = ParamStore::new(0);
        let mut g = Graph::<f64>::new(&store);
        let d = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let n = affine_normalize(&mut g, d).unwrap();
        assert_eq!(g.scalar(n.t).unwrap(), 2.0);
        assert!((g.scalar(n.s).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        let m = g.tensor(n.map).unwrap();
        for (a, b) in m.data().iter().zip([-1.5, 0.0, 1.5]) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = g.constant(t(&[2, 2], &[3.5; 4]));
        let n = affine_normalize(&mut g, c).unwrap();
        assert!(g.tensor(n.map).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ssi_examples() {
        let a = t(&[1, 4], &[4.0, 3.0, 2.0, 1.0]);
        let b = t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]);
        assert!((ssi(&a, &b) - 2.0).abs() < 1e-12);
        assert_eq!(ssi(&b, &b), 0.0);
        assert!(ssi(&b.map(|x| 2.0 * x + 5.0), &b) < 1e-12);
        let bad = t(&[2, 2], &[1.0; 4]);
        assert!(matches!(
            eval(|g| {
                let (p, q) = (g.constant(a.clone()), g.constant(bad.clone()));
                loss_ssi(g, p, q)
            }),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn gm_examples() {
        let gt = t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]);
        let pred = t(&[2, 2], &[0.0, 2.0, 0.0, 2.0]);
        assert!(gm(&pred, &gt, 1).unwrap().abs() < 1e-12);
        let mut rng = keyed_rng(1, Purpose::Verify, 0);
        let d = Tensor::new(vec![8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        for k in 1..=4 {
            assert_eq!(gm(&d, &d, k).unwrap(), 0.0);
            assert!(gm(&d.map(|x| x + 0.7), &d, k).unwrap() < 1e-12);
        }
        assert!(matches!(gm(&d, &d, 5), Err(Error::Config { .. })));
        assert!(matches!(gm(&d, &d, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn gm_matches_direct_evaluation() {
        let mut rng = keyed_rng(2, Purpose::Verify, 0);
        for (h, w, k) in [(8, 8, 4), (6, 10, 2), (7, 9, 3), (32, 32, 4)] {
            let a: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            let b: Vec<f64> = (0..h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
            let got = gm(&t(&[h, w], &a), &t(&[h, w], &b), k).unwrap();
            let want = gm_oracle(&a, &b, h, w, k);
            assert!((got - want).abs() < 1e-12 * want.max(1.0), "{h}x{w} k={k}: {got} vs {want}");
        }
    }

    #[test]
    fn depth_combination() {
        let mut rng = keyed_rng(3, Purpose::Verify, 0);
        let a = Tensor::new(vec![8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let b = Tensor::new(vec![8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let w = LossWeights::default();
        let total = eval(|g| {
            let (p, q) = (g.constant(a.clone()), g.constant(b.clone()));
            loss_depth(g, p, q, &w)
        })
        .unwrap();
        let expect = 1.0 * ssi(&a, &b) + 0.5 * gm(&a, &b, 4).unwrap();
        assert!((total - expect).abs() < 1e-12);
        let no_gm = LossWeights { gm: 0.0, ..LossWeights::default() };
        let only = eval(|g| {
            let (p, q) = (g.constant(a.clone()), g.constant(b.clone()));
            loss_depth(g, p, q, &no_gm)
        })
        .unwrap();
        assert_eq!(only, ssi(&a, &b));
        let neg = LossWeights { gm: -1.0, ..LossWeights::default() };
        assert!(matches!(
            eval(|g| {
                let (p, q) = (g.constant(a.clone()), g.constant(b.clone()));
                loss_depth(g, p, q, &neg)
            }),
            Err(Error::Config { .. })
        ));
    }

    fn seg_parts(logits: &Tensor<f64>, mask: &Tensor<f64>) -> (f64, f64, f64) {
        let w = LossWeights::default();
        let f = |which: u8| {
            eval(|g| {
                let x = g.constant(logits.clone());
                match which {
                    0 => loss_bce(g, x, mask),
                    1 => loss_dice(g, x, mask),
                    _ => loss_seg(g, x, mask, &w),
                }
            })
            .unwrap()
        };
        (f(0), f(1), f(2))
    }

    #[test]
    fn seg_examples() {
        let mask = t(&[4, 4], &[1., 1., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0., 1., 1., 0., 0.]);
        let (bce, dice, seg) = seg_parts(&Tensor::zeros(vec![4, 4]), &mask);
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-12);
        // 1 - (0.5 * 16 + 1) / (16 + 1)
        assert!((dice - (1.0 - 9.0 / 17.0)).abs() < 1e-12);
        assert!((seg - (2.0 * bce + 0.5 * dice)).abs() < 1e-12);

        let saturated = mask.map(|m| if m == 1.0 { 60.0 } else { -60.0 });
        let (bce, dice, seg) = seg_parts(&saturated, &mask);
        assert!(bce < 1e-20 && dice < 1e-12 && seg < 1e-12);

        let large = mask.map(|m| if m == 1.0 { -800.0 } else { 800.0 });
        let (bce, _, _) = seg_parts(&large, &mask);
        assert!((bce - 800.0).abs() < 1e-9);

        let bad = mask.map(|m| m * 0.5);
        assert!(matches!(
            eval(|g| {
                let x = g.constant(Tensor::zeros(vec![4, 4]));
                loss_bce(g, x, &bad)
            }),
            Err(Error::Contract(_))
        ));
    }

    fn all(c: [f64; 3], w: [f64; 3]) -> f64 {
        let lw = LossWeights::default().with_tasks(w);
        eval(|g| {
            let v: Vec<Var> = c.iter().map(|&x| g.constant(Tensor::scalar(x))).collect();
            loss_all(g, Some(v[0]), Some(v[1]), Some(v[2]), &lw)
        })
        .unwrap()
    }

    #[test]
    fn combined_examples() {
        assert!((all([2.0, 4.0, 4.0], ABLATION_TASK_WEIGHTS[0]) - 3.0).abs() < 1e-15);
        let d = LossWeights::default();
        assert!((all([1.0, 2.0, 6.0], [d.cap, d.depth, d.seg]) - 3.0).abs() < 1e-12);
        assert_eq!(all([0.0; 3], [0.2, 0.3, 0.5]), 0.0);
        assert!(matches!(LossWeights::default().with_tasks([0.0; 3]).validate(), Err(Error::Config { .. })));
        assert!(matches!(LossWeights::default().with_tasks([-0.1, 1.0, 1.0]).validate(), Err(Error::Config { .. })));
    }

    #[test]
    fn losses_match_finite_differences() {
        let mut rng = keyed_rng(4, Purpose::Verify, 0);
        let mut store = ParamStore::<f64>::new(0);
        let p = store
            .insert("p", Group::Depth, Tensor::new(vec![8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap())
            .unwrap();
        let gt = Tensor::new(vec![8, 8], (0..64).map(|_| rng.gen_range(0.0..1.0)).collect::<Vec<f64>>()).unwrap();
        let mask = gt.map(|x| if x > 0.5 { 1.0 } else { 0.0 });
        let w = LossWeights::default();
        for which in 0..4 {
            let err = finite_diff_check(&store, &FiniteDiff::default().step(1e-6), |g| {
                let x = g.param(p);
                let y = g.constant(gt.clone());
                match which {
                    0 => loss_ssi(g, x, y),
                    1 => loss_gm(g, x, y, 3),
                    2 => loss_depth(g, x, y, &w),
                    _ => {
                        let z = g.scale(x, 4.0)?;
                        let z = g.add_const(z, -2.0)?;
                        loss_seg(g, z, &mask, &w)
                    }
                }
            })
            .unwrap();
            assert!(err < 1e-4, "loss {which}: {err}");
        }
    }

    fn map_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-5.0f64..5.0, 36)
    }

    proptest! {
        #[test]
        fn ssi_is_affine_invariant(a in map_strategy(), b in map_strategy(), alpha in 0.1f64..10.0, beta in -10.0f64..10.0) {
            let (ta, tb) = (t(&[6, 6], &a), t(&[6, 6], &b));
            let base = ssi(&ta, &tb);
            prop_assert!(base >= 0.0);
            prop_assert!((ssi(&ta.map(|x| alpha * x + beta), &tb) - base).abs() < 1e-9);
            prop_assert!((ssi(&ta, &tb.map(|x| alpha * x + beta)) - base).abs() < 1e-9);
        }

        #[test]
        fn gm_is_affine_invariant_and_nonnegative(a in map_strategy(), b in map_strategy(), alpha in 0.1f64..10.0, beta in -10.0f64..10.0) {
            let (ta, tb) = (t(&[6, 6], &a), t(&[6, 6], &b));
            let base = gm(&ta, &tb, 2).unwrap();
            prop_assert!(base >= 0.0);
            prop_assert!((gm(&ta.map(|x| alpha * x + beta), &tb, 2).unwrap() - base).abs() < 1e-9);
        }

        #[test]
        fn seg_losses_are_bounded(x in prop::collection::vec(-30.0f64..30.0, 16), m in prop::collection::vec(any::<bool>(), 16)) {
            let logits = t(&[4, 4], &x);
            let mask = t(&[4, 4], &m.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect::<Vec<_>>());
            let (bce, dice, _) = seg_parts(&logits, &mask);
            prop_assert!(bce >= 0.0);
            prop_assert!((0.0..=1.0).contains(&dice));
        }

        #[test]
        fn combined_is_linear_and_monotone(c in prop::collection::vec(0.0f64..10.0, 3), w in prop::collection::vec(0.01f64..1.0, 3), bump in 0.0f64..1.0, i in 0usize..3) {
            let (c, w) = ([c[0], c[1], c[2]], [w[0], w[1], w[2]]);
            let base = all(c, w);
            let direct = w[0] * c[0] + w[1] * c[1] + w[2] * c[2];
            prop_assert!((base - direct).abs() < 1e-12 * direct.max(1.0));
            let mut w2 = w;
            w2[i] += bump;
            prop_assert!(all(c, w2) >= base - 1e-12);
        }
    }
}
