//! Ablations over task weights: warm up once per seed, train one copy per
//! weight setting, probe every resulting backbone.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Sample, NUM_CLASSES};
use crate::error::Result;
use crate::losses::{LossWeights, ABLATION_TASK_WEIGHTS};
use crate::model::{Model, ModelConfig};
use crate::params::ParamStore;
use crate::probe::{eval_probe_depth, eval_probe_seg, fit_probe_depth, fit_probe_seg, Features, ProbeConfig};
use crate::trainer::{train, warmup_alignment, TaskData, TrainConfig};

/// Held-out probe quality of one backbone.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    pub miou: f64,
    pub rmse: f64,
    pub abs_rel: f64,
    pub delta1: f64,
}

impl ProbeOutcome {
    /// Mean of the relative mIoU gain and the relative RMSE reduction
    /// over `base`.
    pub fn combined_gain(&self, base: &ProbeOutcome) -> f64 {
        0.5 * ((self.miou - base.miou) / base.miou + (base.rmse - self.rmse) / base.rmse)
    }
}

pub fn probe_backbone(
    model: &Model,
    store: &ParamStore<f32>,
    fit: &[Sample],
    eval: &[Sample],
    cfg: &ProbeConfig,
) -> Result<ProbeOutcome> {
    let ff = Features::extract(model, store, fit)?;
    let fe = Features::extract(model, store, eval)?;
    let seg = fit_probe_seg(&ff, fit, NUM_CLASSES, cfg)?;
    let dep = fit_probe_depth(&ff, fit, cfg)?;
    let s = eval_probe_seg(&seg, &fe, eval)?;
    let d = eval_probe_depth(&dep, &fe, eval)?;
    Ok(ProbeOutcome {
        miou: s.miou,
        rmse: d.rmse,
        abs_rel: d.abs_rel,
        delta1: d.delta1,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Variant {
    pub name: String,
    /// `(cap, depth, seg)` task weights.
    pub tasks: [f64; 3],
}

/// Caption-only first, then the four weight settings, the last of which
/// is the equal-weight all-task run.
pub fn ablation_variants() -> Vec<Variant> {
    let mut v = vec![Variant {
        name: "caption-only".into(),
        tasks: [1.0, 0.0, 0.0],
    }];
    v.extend(ABLATION_TASK_WEIGHTS.iter().map(|w| Variant {
        name: format!("weights-{:.2}-{:.2}-{:.2}", w[0], w[1], w[2]),
        tasks: *w,
    }));
    v
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantResult {
    pub seed: u64,
    pub variant: String,
    pub outcome: ProbeOutcome,
    pub epoch_means: Vec<[Option<f64>; 3]>,
}

pub struct AblationInputs<'a> {
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub loss: &'a LossWeights,
    pub probe: &'a ProbeConfig,
    pub train_data: &'a Dataset,
    pub per_task: usize,
    pub probe_fit: &'a [Sample],
    pub probe_eval: &'a [Sample],
}

/// Runs every variant for one seed. Returns the results in variant order.
pub fn run_seed(inp: &AblationInputs<'_>, variants: &[Variant], seed: u64, log: &mut dyn Write) -> Result<Vec<VariantResult>> {
    let (model, mut store) = Model::init::<f32>(inp.model, seed)?;
    let data = TaskData::<f32>::from_dataset(inp.train_data, [inp.per_task; 3], inp.model.caption.vocab_size)?;
    warmup_alignment(&model, &mut store, &data, inp.train, seed, log)?;
    let mut out = Vec::new();
    for v in variants {
        let mut s = store.clone();
        let w = inp.loss.clone().with_tasks(v.tasks);
        let rep = train(&model, &mut s, &data, inp.train, &w, seed, log)?;
        let outcome = probe_backbone(&model, &s, inp.probe_fit, inp.probe_eval, inp.probe)?;
        out.push(VariantResult {
            seed,
            variant: v.name.clone(),
            outcome,
            epoch_means: rep.epoch_means,
        });
    }
    Ok(out)
}
