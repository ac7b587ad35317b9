//! Self-check suite behind `mtvit verify`: gradient checks against
//! central differences, loss invariances with hand-worked values, and the
//! accumulation-equals-summed-loss property of the multitask step.

use std::fmt;

use rand::Rng;

use crate::autodiff::{finite_diff_check, FiniteDiff, GradientMap, Graph, Var};
use crate::backbone::BackboneConfig;
use crate::caption::{sequence_cross_entropy, CaptionConfig};
use crate::data::{gen_sample, Dataset, Sample, Split, Vocab};
use crate::depth::DepthConfig;
use crate::error::Result;
use crate::losses::{affine_normalize, loss_all, loss_bce, loss_depth, loss_dice, loss_gm, loss_seg, loss_ssi, LossWeights};
use crate::model::{MaskTarget, Model, ModelConfig};
use crate::optim::Optimizer;
use crate::params::{Group, ParamStore};
use crate::rng::{keyed_rng, KeyedRng, Purpose};
use crate::seg::SegConfig;
use crate::tensor::Tensor;
use crate::trainer::{multitask_step, RoundBatches, Task, TaskData, TrainConfig};

pub const GRAD_TOL: f64 = 1e-4;
pub const INVARIANCE_TOL: f64 = 1e-9;
pub const ORACLE_TOL: f64 = 1e-12;
pub const SGD_TOL: f64 = 1e-12;
pub const ADAMW_TOL: f64 = 1e-6;

/// Result of one property over all its instances.
#[derive(Debug, Clone, PartialEq)]
pub struct Property {
    pub name: String,
    pub instances: usize,
    /// Largest observed error (or violation) across instances.
    pub worst: f64,
    pub tolerance: f64,
}

impl Property {
    fn new(name: &str, instances: usize, worst: f64, tolerance: f64) -> Self {
        Self {
            name: name.into(),
            instances,
            worst,
            tolerance,
        }
    }

    /// Errors must stay below the tolerance; range violations (tolerance
    /// zero) must not occur at all.
    pub fn passed(&self) -> bool {
        if self.tolerance == 0.0 {
            self.worst == 0.0
        } else {
            self.worst < self.tolerance
        }
    }
}

impl fmt::Display for Property {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<28} {:>3} instances  worst {:.3e}  tol {:.0e}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.name,
            self.instances,
            self.worst,
            self.tolerance
        )
    }
}

fn rng(seed: u64, i: usize) -> KeyedRng {
    keyed_rng(seed, Purpose::Verify, i as u64)
}

fn random(rng: &mut KeyedRng, dims: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("dims match")
}

/// Binary mask with both classes present.
fn random_mask(rng: &mut KeyedRng, dims: &[usize]) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let mut m: Vec<f64> = (0..n).map(|_| if rng.gen_bool(0.4) { 1.0 } else { 0.0 }).collect();
    m[0] = 1.0;
    m[n - 1] = 0.0;
    Tensor::new(dims.to_vec(), m).expect("dims match")
}

fn single_param(name: &str, t: Tensor<f64>) -> ParamStore<f64> {
    let mut s = ParamStore::new(0);
    s.insert(name, Group::Depth, t).expect("fresh store");
    s
}

/// Worst finite-difference error of a scalar function of one input map
/// over `n` random instances.
fn loss_gradient<F>(name: &str, n: usize, seed: u64, make: F) -> Result<Property>
where
    F: Fn(&mut KeyedRng) -> (ParamStore<f64>, Box<dyn Fn(&mut Graph<'_, f64>) -> Result<Var>>),
{
    let mut worst = 0.0f64;
    for i in 0..n {
        let (store, f) = make(&mut rng(seed ^ crate::rng::name_hash(name), i));
        worst = worst.max(finite_diff_check(&store, &FiniteDiff::default().step(1e-6).seed(i as u64), &f)?);
    }
    Ok(Property::new(&format!("grad/{name}"), n, worst, GRAD_TOL))
}

/// Gradient checks for every loss term and every head.
pub fn gradient_suite(n: usize, seed: u64) -> Result<Vec<Property>> {
    let w = LossWeights::default();
    let (h, wd) = (8, 8);
    let mut out = Vec::new();

    out.push(loss_gradient("L_cap", n, seed, |r| {
        let targets: Vec<usize> = (0..6).map(|_| r.gen_range(0..17)).collect();
        let store = single_param("logits", random(r, &[6, 17], -3.0, 3.0));
        let id = store.id("logits").unwrap();
        (store, Box::new(move |g| {
            let x = g.param(id);
            sequence_cross_entropy(g, x, &targets)
        }))
    })?);
    let depth_case = |kind: &'static str| {
        let w = w.clone();
        move |r: &mut KeyedRng| {
            let gt = random(r, &[h, wd], 0.1, 1.0);
            let store = single_param("pred", random(r, &[h, wd], -1.0, 1.0));
            let id = store.id("pred").unwrap();
            let w = w.clone();
            let f: Box<dyn Fn(&mut Graph<'_, f64>) -> Result<Var>> = Box::new(move |g| {
                let p = g.param(id);
                let q = g.constant(gt.clone());
                match kind {
                    "L_ssi" => loss_ssi(g, p, q),
                    "L_gm" => loss_gm(g, p, q, 3),
                    _ => loss_depth(g, p, q, &w),
                }
            });
            (store, f)
        }
    };
    for kind in ["L_ssi", "L_gm", "L_depth"] {
        out.push(loss_gradient(kind, n, seed, depth_case(kind))?);
    }
    let seg_case = |kind: &'static str| {
        let w = w.clone();
        move |r: &mut KeyedRng| {
            let mask = random_mask(r, &[h, wd]);
            let store = single_param("logits", random(r, &[h, wd], -4.0, 4.0));
            let id = store.id("logits").unwrap();
            let w = w.clone();
            let f: Box<dyn Fn(&mut Graph<'_, f64>) -> Result<Var>> = Box::new(move |g| {
                let x = g.param(id);
                match kind {
                    "L_bce" => loss_bce(g, x, &mask),
                    "L_dice" => loss_dice(g, x, &mask),
                    _ => loss_seg(g, x, &mask, &w),
                }
            });
            (store, f)
        }
    };
    for kind in ["L_bce", "L_dice", "L_seg"] {
        out.push(loss_gradient(kind, n, seed, seg_case(kind))?);
    }
    out.push(loss_gradient("L_all", n, seed, |r| {
        let tw: [f64; 3] = [r.gen_range(0.1..1.0), r.gen_range(0.1..1.0), r.gen_range(0.1..1.0)];
        let w = LossWeights::default().with_tasks(tw);
        let targets: Vec<usize> = (0..5).map(|_| r.gen_range(0..17)).collect();
        let gt = random(r, &[h, wd], 0.1, 1.0);
        let mask = random_mask(r, &[h, wd]);
        let mut store = ParamStore::new(0);
        let a = store.insert("logits", Group::Decoder, random(r, &[5, 17], -3.0, 3.0)).unwrap();
        let b = store.insert("pred", Group::Depth, random(r, &[h, wd], -1.0, 1.0)).unwrap();
        let c = store.insert("mask_logits", Group::Seg, random(r, &[h, wd], -4.0, 4.0)).unwrap();
        (store, Box::new(move |g| {
            let x = g.param(a);
            let lc = sequence_cross_entropy(g, x, &targets)?;
            let p = g.param(b);
            let q = g.constant(gt.clone());
            let ld = loss_depth(g, p, q, &w)?;
            let m = g.param(c);
            let ls = loss_seg(g, m, &mask, &w)?;
            loss_all(g, Some(lc), Some(ld), Some(ls), &w)
        }))
    })?);

    out.extend(head_gradients(n, seed)?);
    Ok(out)
}

/// Small model used for the head checks.
pub fn check_model_config() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            patch_size: 4,
            num_layers: 3,
            embed_dim: 8,
            num_heads: 2,
            image_side: 16,
            mlp_ratio: 2,
        },
        caption: CaptionConfig {
            text_dim: 8,
            vocab_size: 17,
            decoder_layers: 1,
            decoder_heads: 2,
            max_text_len: 18,
        },
        depth: DepthConfig { width: 4 },
        seg: SegConfig {
            prompt_dim: 8,
            blocks: 1,
            heads: 2,
            vocab_size: 17,
        },
    }
}

/// Fresh model with biases moved off zero, so that no ReLU input sits
/// exactly on its kink.
pub fn perturbed_model(seed: u64) -> Result<(Model, ParamStore<f64>)> {
    let (m, mut s) = Model::init::<f64>(&check_model_config(), seed)?;
    let mut r = keyed_rng(seed, Purpose::Verify, u64::MAX);
    let biases: Vec<_> = s.iter().filter(|(_, p)| p.name.ends_with(".bias")).map(|(id, _)| id).collect();
    for id in biases {
        s.tensor_mut(id).data_mut().iter_mut().for_each(|b| *b = r.gen_range(-0.5..0.5));
    }
    Ok((m, s))
}

fn head_gradients(n: usize, seed: u64) -> Result<Vec<Property>> {
    let vocab = Vocab::default();
    let w = LossWeights::default();
    let mut worst = [0.0f64; 4];
    for i in 0..n {
        let (model, store) = perturbed_model(seed.wrapping_add(i as u64))?;
        let s: Sample = gen_sample(seed, Purpose::Verify, i as u64, 16, &vocab);
        let img = s.image.cast::<f64>();
        let seq = crate::caption::TokenSequence::new(s.caption.clone(), 17)?;
        let depth = s.depth.cast::<f64>();
        let target = MaskTarget {
            phrase: s.instances[0].phrase.clone(),
            mask: s.instances[0].mask.cast::<f64>(),
        };
        let fd = |groups: &[Group]| {
            let ids = store.iter().filter(|(_, p)| groups.contains(&p.group)).map(|(id, _)| id).collect();
            FiniteDiff::default().step(1e-6).coords(2).seed(i as u64).only(ids)
        };
        let checks: [(&[Group], Box<dyn Fn(&mut Graph<'_, f64>) -> Result<Var>>); 4] = [
            (&[Group::Backbone], Box::new(|g| {
                let p = model.backbone.forward_features(g, &img)?;
                let last = p.last();
                let sq = g.mul(last, last)?;
                g.mean(sq)
            })),
            (&[Group::Projector, Group::Decoder], Box::new(|g| model.caption_loss(g, &img, &seq))),
            (&[Group::Depth], Box::new(|g| model.depth_loss(g, &img, &depth, &w))),
            (&[Group::Seg], Box::new(|g| model.seg_loss(g, &img, std::slice::from_ref(&target), &w))),
        ];
        for (k, (groups, f)) in checks.iter().enumerate() {
            worst[k] = worst[k].max(finite_diff_check(&store, &fd(groups), f)?);
        }
    }
    Ok(["backbone", "caption_head", "depth_head", "seg_head"]
        .iter()
        .zip(worst)
        .map(|(name, e)| Property::new(&format!("grad/{name}"), n, e, GRAD_TOL))
        .collect())
}

fn eval(f: impl FnOnce(&mut Graph<'_, f64>) -> Result<Var>) -> Result<f64> {
    let store = ParamStore::new(0);
    let mut g = Graph::new(&store);
    let v = f(&mut g)?;
    g.scalar(v)
}

fn ssi(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    eval(|g| {
        let (p, q) = (g.constant(a.clone()), g.constant(b.clone()));
        loss_ssi(g, p, q)
    })
}

fn gm(a: &Tensor<f64>, b: &Tensor<f64>, k: usize) -> Result<f64> {
    eval(|g| {
        let (p, q) = (g.constant(a.clone()), g.constant(b.clone()));
        loss_gm(g, p, q, k)
    })
}

fn affine(t: &Tensor<f64>, a: f64, b: f64) -> Tensor<f64> {
    t.map(|x| a * x + b)
}

/// Loss invariances on random maps and the worked examples.
pub fn invariance_suite(n: usize, seed: u64) -> Result<Vec<Property>> {
    let mut aff = 0.0f64;
    let mut shift = 0.0f64;
    let mut dice_range = 0.0f64;
    let mut nonneg = 0.0f64;
    for i in 0..n {
        let mut r = rng(seed ^ 0x1a, i);
        let p = random(&mut r, &[8, 8], -2.0, 2.0);
        let q = random(&mut r, &[8, 8], 0.1, 1.0);
        let (alpha, beta) = (r.gen_range(0.05..20.0), r.gen_range(-10.0..10.0));
        let base = ssi(&p, &q)?;
        aff = aff.max((ssi(&affine(&p, alpha, beta), &q)? - base).abs());
        aff = aff.max((ssi(&p, &affine(&q, alpha, beta))? - base).abs());
        let c = r.gen_range(-10.0..10.0);
        let g0 = gm(&p, &q, 3)?;
        shift = shift.max((gm(&affine(&p, 1.0, c), &q, 3)? - g0).abs());
        shift = shift.max((gm(&p, &affine(&q, 1.0, c), 3)? - g0).abs());
        nonneg = nonneg.max(-base).max(-g0);

        let mask = random_mask(&mut r, &[8, 8]);
        let scale = [1.0, 10.0, 60.0][i % 3];
        let logits = random(&mut r, &[8, 8], -scale, scale);
        let (dice, bce) = {
            let d = eval(|g| {
                let x = g.constant(logits.clone());
                loss_dice(g, x, &mask)
            })?;
            let b = eval(|g| {
                let x = g.constant(logits.clone());
                loss_bce(g, x, &mask)
            })?;
            (d, b)
        };
        dice_range = dice_range.max(-dice).max(dice - 1.0);
        nonneg = nonneg.max(-bce);
    }
    // Range checks report how far outside the allowed range a value fell.
    let mut out = vec![
        Property::new("inv/ssi_affine", n, aff, INVARIANCE_TOL),
        Property::new("inv/gm_shift", n, shift, INVARIANCE_TOL),
        Property::new("inv/dice_in_unit_interval", n, dice_range.max(0.0), 0.0),
        Property::new("inv/losses_nonnegative", n, nonneg.max(0.0), 0.0),
    ];
    out.push(oracle_values()?);
    Ok(out)
}

/// Hand-worked loss values.
fn oracle_values() -> Result<Property> {
    let t = |d: &[usize], v: &[f64]| Tensor::new(d.to_vec(), v.to_vec()).expect("dims match");
    let mut errs = Vec::new();

    errs.push(ssi(&t(&[1, 4], &[4.0, 3.0, 2.0, 1.0]), &t(&[1, 4], &[1.0, 2.0, 3.0, 4.0]))? - 2.0);

    let store = ParamStore::<f64>::new(0);
    let mut g = Graph::new(&store);
    let d = g.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
    let nz = affine_normalize(&mut g, d)?;
    errs.push(g.scalar(nz.t)? - 2.0);
    errs.push(g.scalar(nz.s)? - 2.0 / 3.0);
    for (a, b) in g.value(nz.map)?.iter().zip([-1.5, 0.0, 1.5]) {
        errs.push(a - b);
    }

    errs.push(gm(&t(&[2, 2], &[0.0, 2.0, 0.0, 2.0]), &t(&[2, 2], &[0.0, 1.0, 0.0, 1.0]), 1)?);

    let hw = 16.0;
    let half: Vec<f64> = (0..16).map(|i| if i < 8 { 1.0 } else { 0.0 }).collect();
    let mask = t(&[4, 4], &half);
    let zeros = Tensor::<f64>::zeros(vec![4, 4]);
    let bce = eval(|g| {
        let x = g.constant(zeros.clone());
        loss_bce(g, x, &mask)
    })?;
    errs.push(bce - std::f64::consts::LN_2);
    let dice = eval(|g| {
        let x = g.constant(zeros.clone());
        loss_dice(g, x, &mask)
    })?;
    errs.push(dice - (1.0 - (0.5 * hw + 1.0) / (hw + 1.0)));
    let seg = eval(|g| {
        let x = g.constant(zeros.clone());
        loss_seg(g, x, &mask, &LossWeights::default())
    })?;
    errs.push(seg - (2.0 * bce + 0.5 * dice));

    let all = eval(|g| {
        let [a, b, c] = [2.0, 4.0, 4.0].map(|v| g.constant(Tensor::scalar(v)));
        loss_all(g, Some(a), Some(b), Some(c), &LossWeights::default().with_tasks([0.5, 0.25, 0.25]))
    })?;
    errs.push(all - 3.0);
    let mean = eval(|g| {
        let [a, b, c] = [1.0, 2.0, 6.0].map(|v| g.constant(Tensor::scalar(v)));
        loss_all(g, Some(a), Some(b), Some(c), &LossWeights::default())
    })?;
    errs.push(mean - 3.0);

    let worst = errs.iter().fold(0.0f64, |m, e| m.max(e.abs()));
    Ok(Property::new("inv/worked_examples", errs.len(), worst, ORACLE_TOL))
}

/// Gradient of one backward pass on `sum_t lambda_t * mean_i L_t,i`.
pub fn summed_loss_gradients(
    model: &Model,
    store: &ParamStore<f64>,
    data: &TaskData<f64>,
    round: RoundBatches<'_>,
    w: &LossWeights,
) -> Result<GradientMap<f64>> {
    let mut g = Graph::new(store);
    let mut ls = [None; 3];
    for t in Task::ALL {
        let Some(batch) = round[t.index()] else { continue };
        let mut acc: Option<Var> = None;
        for &i in batch {
            let l = data.sample_loss(model, &mut g, t, i, w)?;
            acc = Some(match acc {
                None => l,
                Some(a) => g.add(a, l)?,
            });
        }
        if let Some(a) = acc {
            ls[t.index()] = Some(g.scale(a, 1.0 / batch.len() as f64)?);
        }
    }
    let total = loss_all(&mut g, ls[0], ls[1], ls[2], w)?;
    g.backward(total)
}

pub fn max_abs_diff(a: &ParamStore<f64>, b: &ParamStore<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|((_, p), (_, q))| p.tensor.max_abs_diff(&q.tensor)).fold(0.0, f64::max)
}

/// `||a - b|| / ||a||` over all parameters as one vector.
pub fn rel_diff(a: &ParamStore<f64>, b: &ParamStore<f64>) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for ((_, p), (_, q)) in a.iter().zip(b.iter()) {
        for (x, y) in p.tensor.data().iter().zip(q.tensor.data()) {
            num += (x - y) * (x - y);
            den += x * x;
        }
    }
    (num / den).sqrt()
}

/// First perturbed model, counting up from `seed`, whose depth head
/// gives a non-constant map on every depth sample. A head whose ReLUs are
/// all off predicts a constant map; the MAD guard then scales every pixel
/// gradient by 1/eps, and the two update paths differ only by roundoff
/// amplified a millionfold.
fn live_model(seed: u64, data: &TaskData<f64>) -> Result<(Model, ParamStore<f64>)> {
    let mut s = seed;
    loop {
        let (m, store) = perturbed_model(s)?;
        let mut live = true;
        for (img, _) in &data.depth {
            let mut g = Graph::new(&store);
            let d = m.predict_depth(&mut g, img)?;
            let v = g.value(d)?;
            let (lo, hi) = v.iter().fold((f64::MAX, f64::MIN), |(a, b), &x| (a.min(x), b.max(x)));
            live &= hi - lo > 1e-3;
        }
        if live {
            return Ok((m, store));
        }
        s = s.wrapping_add(1 << 32);
    }
}

/// Multitask steps against single updates on the summed loss, under
/// plain descent and under the adaptive optimizer.
pub fn accumulation_suite(n: usize, seed: u64) -> Result<Vec<Property>> {
    let cfg = TrainConfig::default();
    let (mut sgd, mut adamw) = (0.0f64, 0.0f64);
    let ds = Dataset::generate(12, seed, Split::Train, 16);
    let data = TaskData::<f64>::from_dataset(&ds, [4; 3], 17)?;
    for i in 0..n {
        let mut r = rng(seed ^ 0xacc, i);
        let (model, s0) = live_model(seed.wrapping_add(i as u64), &data)?;
        let tasks = [r.gen_range(0.05..1.0), r.gen_range(0.05..1.0), r.gen_range(0.05..1.0)];
        let w = LossWeights::default().with_tasks(tasks);
        let batches: Vec<Vec<usize>> = (0..3).map(|_| (0..r.gen_range(1..4)).map(|_| r.gen_range(0..4)).collect()).collect();
        let round: RoundBatches<'_> = [Some(&batches[0]), Some(&batches[1]), Some(&batches[2])];

        let (mut a, mut b) = (s0.clone(), s0.clone());
        multitask_step(&model, &mut a, &mut Optimizer::sgd(), &data, round, &w, &cfg, 0)?;
        let grads = summed_loss_gradients(&model, &b, &data, round, &w)?;
        Optimizer::sgd().step(&mut b, &grads, |grp| cfg.lr(grp));
        sgd = sgd.max(max_abs_diff(&a, &b));

        let (mut a, mut b) = (s0.clone(), s0);
        let (mut oa, mut ob) = (Optimizer::new(&cfg.optimizer), Optimizer::new(&cfg.optimizer));
        for step in 0..2 {
            multitask_step(&model, &mut a, &mut oa, &data, round, &w, &cfg, step)?;
            let grads = summed_loss_gradients(&model, &b, &data, round, &w)?;
            ob.step(&mut b, &grads, |grp| cfg.lr(grp));
        }
        adamw = adamw.max(rel_diff(&a, &b));
    }
    Ok(vec![
        Property::new("accum/sgd_equals_summed", n, sgd, SGD_TOL),
        Property::new("accum/adamw_equals_summed", n, adamw, ADAMW_TOL),
    ])
}

/// Everything `mtvit verify` runs.
pub fn run_all(instances: usize, seed: u64) -> Result<Vec<Property>> {
    let mut out = gradient_suite(instances, seed)?;
    out.extend(invariance_suite(instances, seed)?);
    out.extend(accumulation_suite(instances, seed)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_suite_passes() {
        for p in run_all(2, 3).unwrap() {
            assert!(p.passed(), "{p}");
        }
    }

    #[test]
    fn dropping_a_task_is_detected() {
        let cfg = TrainConfig::default();
        let ds = Dataset::generate(12, 0, Split::Train, 16);
        let data = TaskData::<f64>::from_dataset(&ds, [4; 3], 17).unwrap();
        let (model, s0) = live_model(0, &data).unwrap();
        let w = LossWeights::default();
        let full: RoundBatches<'_> = [Some(&[0, 1]), Some(&[2]), Some(&[3])];
        let (mut a, mut b) = (s0.clone(), s0.clone());
        let mut oa = Optimizer::new(&cfg.optimizer);
        multitask_step(&model, &mut a, &mut oa, &data, full, &w, &cfg, 0).unwrap();
        let g = summed_loss_gradients(&model, &s0, &data, [Some(&[0, 1]), Some(&[2]), None], &w).unwrap();
        Optimizer::new(&cfg.optimizer).step(&mut b, &g, |grp| cfg.lr(grp));
        assert!(rel_diff(&a, &b) > 1e-4, "{}", rel_diff(&a, &b));
        assert!(max_abs_diff(&a, &b) > 1e-4);
    }

    #[test]
    fn display_marks_failures() {
        let p = Property::new("x", 1, 2.0, 1.0);
        assert!(p.to_string().starts_with("FAIL x"));
        assert!(Property::new("r", 1, 0.0, 0.0).passed());
        assert!(!Property::new("r", 1, 1e-300, 0.0).passed());
    }
}
