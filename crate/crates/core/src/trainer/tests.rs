use super::*;
use crate::backbone::BackboneConfig;
use crate::caption::CaptionConfig;
use crate::data::Split;
use crate::depth::DepthConfig;
use crate::model::ModelConfig;
use crate::seg::SegConfig;

pub(crate) fn tiny_model_config() -> ModelConfig {
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

fn setup(n: usize) -> (Model, ParamStore<f64>, TaskData<f64>) {
    let (m, s) = Model::init::<f64>(&tiny_model_config(), 5).unwrap();
    let ds = Dataset::generate(3 * n, 1, Split::Train, 16);
    let data = TaskData::from_dataset(&ds, [n; 3], 17).unwrap();
    (m, s, data)
}

fn max_diff(a: &ParamStore<f64>, b: &ParamStore<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|((_, p), (_, q))| p.tensor.max_abs_diff(&q.tensor)).fold(0.0, f64::max)
}

fn max_rel_diff(a: &ParamStore<f64>, b: &ParamStore<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .flat_map(|((_, p), (_, q))| {
            p.tensor.data().iter().zip(q.tensor.data()).map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-3)).collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

/// Single backward pass on `sum_t lambda_t * mean_i loss_t,i`.
fn summed_loss_update(
    model: &Model,
    store: &mut ParamStore<f64>,
    opt: &mut Optimizer<f64>,
    data: &TaskData<f64>,
    round: RoundBatches<'_>,
    w: &LossWeights,
    cfg: &TrainConfig,
) {
    let grads = {
        let mut g = Graph::new(store);
        let mut terms = Vec::new();
        for t in Task::ALL {
            let lambda = t.weight(w);
            if lambda == 0.0 {
                continue;
            }
            let batch = round[t.index()].unwrap();
            let mut acc: Option<Var> = None;
            for &i in batch {
                let l = data.sample_loss(model, &mut g, t, i, w).unwrap();
                acc = Some(match acc {
                    None => l,
                    Some(a) => g.add(a, l).unwrap(),
                });
            }
            terms.push(g.scale(acc.unwrap(), lambda / batch.len() as f64).unwrap());
        }
        let mut total = terms[0];
        for &t in &terms[1..] {
            total = g.add(total, t).unwrap();
        }
        g.backward(total).unwrap()
    };
    opt.step(store, &grads, |grp| cfg.lr(grp));
}

const CAP: &[usize] = &[0, 2, 3];
const DEPTH: &[usize] = &[1, 0];
const SEG: &[usize] = &[3, 1];

#[test]
fn resample_counts() {
    let plan = resample_equalize([100, 50, 100], [10; 3], 0, 0).unwrap();
    for p in &plan {
        assert_eq!(p.len(), 10);
        assert!(p.iter().all(|b| b.len() == 10));
    }
    let mut seen = [0usize; 50];
    plan[1].iter().flatten().for_each(|&i| seen[i] += 1);
    assert!(seen.iter().all(|&c| c == 2));
    for t in [0, 2] {
        let mut all: Vec<usize> = plan[t].iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
    }
    assert_eq!(plan, resample_equalize([100, 50, 100], [10; 3], 0, 0).unwrap());
    assert_ne!(plan, resample_equalize([100, 50, 100], [10; 3], 0, 1).unwrap());
}

#[test]
fn resample_uneven_batches() {
    let plan = resample_equalize([2000, 2000, 2000], [8, 32, 32], 3, 0).unwrap();
    assert!(plan.iter().all(|p| p.len() == 250));
    let mut seen = vec![0usize; 2000];
    plan[2].iter().flatten().for_each(|&i| seen[i] += 1);
    assert!(seen.iter().all(|&c| c == 4));
    let plan = resample_equalize([21, 5, 5], [4, 4, 4], 3, 0).unwrap();
    assert_eq!(plan[0].len(), 6);
    assert_eq!(plan[0].last().unwrap().len(), 1);
    assert!(plan[1].iter().all(|b| b.len() == 4));
    assert!(matches!(resample_equalize([0, 5, 5], [4; 3], 0, 0), Err(Error::Config { .. })));
}

#[test]
fn accumulation_equals_summed_loss_under_sgd() {
    let (m, s0, data) = setup(4);
    let cfg = TrainConfig::default();
    let w = LossWeights::default().with_tasks([0.5, 0.25, 0.25]);
    let round = [Some(CAP), Some(DEPTH), Some(SEG)];
    let (mut a, mut b) = (s0.clone(), s0.clone());
    multitask_step(&m, &mut a, &mut Optimizer::sgd(), &data, round, &w, &cfg, 0).unwrap();
    summed_loss_update(&m, &mut b, &mut Optimizer::sgd(), &data, round, &w, &cfg);
    let d = max_diff(&a, &b);
    assert!(d < 1e-12, "{d}");
    assert!(max_diff(&a, &s0) > 1e-6);
}

#[test]
fn accumulation_equals_summed_loss_under_adamw() {
    let (m, s0, data) = setup(4);
    let cfg = TrainConfig::default();
    let w = LossWeights::default();
    let round = [Some(CAP), Some(DEPTH), Some(SEG)];
    let (mut a, mut b) = (s0.clone(), s0.clone());
    let (mut oa, mut ob) = (Optimizer::new(&cfg.optimizer), Optimizer::new(&cfg.optimizer));
    for _ in 0..2 {
        multitask_step(&m, &mut a, &mut oa, &data, round, &w, &cfg, 0).unwrap();
        summed_loss_update(&m, &mut b, &mut ob, &data, round, &w, &cfg);
    }
    let d = max_rel_diff(&a, &b);
    assert!(d < 1e-6, "{d}");
}

#[test]
fn task_order_does_not_matter_under_sgd() {
    let (m, s0, data) = setup(4);
    let cfg = TrainConfig::default();
    let w = LossWeights::default();
    let (mut a, mut b) = (s0.clone(), s0.clone());
    multitask_step(&m, &mut a, &mut Optimizer::sgd(), &data, [Some(CAP), Some(DEPTH), Some(SEG)], &w, &cfg, 0).unwrap();
    let mut total = GradientMap::new();
    for t in [Task::Seg, Task::Cap, Task::Depth] {
        let batch = [CAP, DEPTH, SEG][t.index()];
        let (g, _) = task_gradients(&m, &b, &|_| true, &data, t, batch, &w).unwrap();
        total.accumulate(&g, 1.0);
    }
    Optimizer::sgd().step(&mut b, &total, |grp| cfg.lr(grp));
    assert!(max_diff(&a, &b) < 1e-12);
}

#[test]
fn zero_weights_reduce_to_caption_step() {
    let (m, s0, data) = setup(4);
    let cfg = TrainConfig::default();
    let w = LossWeights::default().with_tasks([0.4, 0.0, 0.0]);
    let (mut a, mut b) = (s0.clone(), s0.clone());
    let la = multitask_step(&m, &mut a, &mut Optimizer::new(&cfg.optimizer), &data, [Some(CAP), Some(DEPTH), Some(SEG)], &w, &cfg, 0).unwrap();
    let lb = multitask_step(&m, &mut b, &mut Optimizer::new(&cfg.optimizer), &data, [Some(CAP), None, None], &w, &cfg, 0).unwrap();
    assert_eq!(la, lb);
    assert_eq!(la[1], None);
    assert_eq!(a.digest(None), b.digest(None));
    assert_eq!(a.digest(Some(Group::Seg)), s0.digest(Some(Group::Seg)));
}

#[test]
fn missing_batch_is_contract_violation() {
    let (m, mut s, data) = setup(2);
    let cfg = TrainConfig::default();
    let r = multitask_step(&m, &mut s, &mut Optimizer::sgd(), &data, [Some(&[0]), None, Some(&[1])], &LossWeights::default(), &cfg, 0);
    assert!(matches!(r, Err(Error::Contract(_))));
}

#[test]
fn steps_are_deterministic() {
    let (m, s0, data) = setup(4);
    let cfg = TrainConfig::default();
    let run = || {
        let mut s = s0.clone();
        let mut opt = Optimizer::new(&cfg.optimizer);
        for _ in 0..2 {
            multitask_step(&m, &mut s, &mut opt, &data, [Some(CAP), Some(DEPTH), Some(SEG)], &LossWeights::default(), &cfg, 0).unwrap();
        }
        s
    };
    let (a, b) = (run(), run());
    for ((_, p), (_, q)) in a.iter().zip(b.iter()) {
        assert!(p.tensor.data().iter().zip(q.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn warmup_changes_only_projector() {
    let (m, s0, data) = setup(6);
    let cfg = TrainConfig {
        batch_cap: 4,
        ..TrainConfig::default()
    };
    let mut s = s0.clone();
    let mut log = Vec::new();
    let rep = warmup_alignment(&m, &mut s, &data, &cfg, 0, &mut log).unwrap();
    assert_eq!(rep.steps, 2);
    for g in Group::ALL {
        let same = s.digest(Some(g)) == s0.digest(Some(g));
        assert_eq!(same, g != Group::Projector, "{g:?}");
    }
    assert_eq!(String::from_utf8(log).unwrap().lines().count(), 2);

    let mut s = s0.clone();
    let none = TrainConfig {
        warmup_epochs: 0,
        ..TrainConfig::default()
    };
    warmup_alignment(&m, &mut s, &data, &none, 0, &mut std::io::sink()).unwrap();
    assert_eq!(s.digest(None), s0.digest(None));

    let bad = TrainConfig {
        warmup_trainable: vec![Group::Projector, Group::Backbone],
        ..TrainConfig::default()
    };
    assert!(matches!(
        warmup_alignment(&m, &mut s, &data, &bad, 0, &mut std::io::sink()),
        Err(Error::Config { .. })
    ));
}

#[test]
fn train_logs_every_task_step() {
    let (m, mut s, data) = setup(6);
    let cfg = TrainConfig {
        batch_cap: 2,
        batch_depth: 3,
        batch_seg: 3,
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    let rep = train(&m, &mut s, &data, &cfg, &LossWeights::default(), 0, &mut log).unwrap();
    assert_eq!(rep.steps, 3);
    let recs: Vec<StepRecord> = String::from_utf8(log).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 9);
    assert_eq!(recs.iter().map(|r| r.task).collect::<Vec<_>>()[..3], [Task::Cap, Task::Depth, Task::Seg]);
    assert!(rep.epoch_means[0].iter().all(|x| x.is_some()));
}

#[test]
fn different_weights_give_different_checkpoints() {
    let (m, s0, data) = setup(4);
    let cfg = TrainConfig {
        batch_cap: 2,
        batch_depth: 2,
        batch_seg: 2,
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut a = s0.clone();
    let mut b = s0.clone();
    train(&m, &mut a, &data, &cfg, &LossWeights::default(), 0, &mut std::io::sink()).unwrap();
    let w = LossWeights::default().with_tasks(crate::losses::ABLATION_TASK_WEIGHTS[0]);
    train(&m, &mut b, &data, &cfg, &w, 0, &mut std::io::sink()).unwrap();
    assert_ne!(a.digest(None), b.digest(None));
}

#[test]
fn divergence_names_task_and_step() {
    let (m, mut s, data) = setup(4);
    let id = s.id("depth.out2.bias").unwrap();
    s.tensor_mut(id).data_mut()[0] = f64::NAN;
    let cfg = TrainConfig {
        batch_cap: 2,
        batch_depth: 2,
        batch_seg: 2,
        epochs: 1,
        ..TrainConfig::default()
    };
    let mut log = Vec::new();
    match train(&m, &mut s, &data, &cfg, &LossWeights::default(), 0, &mut log) {
        Err(Error::Divergence { task, step }) => assert_eq!((task.as_str(), step), ("depth", 0)),
        r => panic!("{r:?}"),
    }
    assert!(String::from_utf8(log).unwrap().contains("non-finite"));
}
