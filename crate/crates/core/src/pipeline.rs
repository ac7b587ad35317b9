//! The stages behind the command-line driver. Every stage reads the run
//! configuration, works under a lock on the output directory and leaves
//! its artifacts there.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::autodiff::Graph;
use crate::caption::TokenSequence;
use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, TensorFile};
use crate::config::RunConfig;
use crate::data::{gen_dataset, Dataset, Sample, Split, NUM_CLASSES};
use crate::error::{Error, Result};
use crate::metrics::{aligned, DepthSums, MetricReport};
use crate::model::{MaskTarget, Model};
use crate::params::ParamStore;
use crate::probe::{eval_probe_depth, eval_probe_seg, fit_probe_depth, fit_probe_seg, Features, LinearProbe};
use crate::tensor::Tensor;
use crate::trainer::{train as run_train, warmup_alignment, TaskData, TrainReport};

pub const LOCK_FILE: &str = ".lock";
pub const WARMUP_CKPT: &str = "warmup.ckpt";
pub const MODEL_CKPT: &str = "model.ckpt";
pub const WARMUP_LOG: &str = "warmup_metrics.jsonl";
pub const TRAIN_LOG: &str = "train_metrics.jsonl";
pub const PROBE_SEG_REPORT: &str = "probe_seg.jsonl";
pub const PROBE_DEPTH_REPORT: &str = "probe_depth.jsonl";
pub const PROBE_SEG_WEIGHTS: &str = "probe_seg.probe";
pub const PROBE_DEPTH_WEIGHTS: &str = "probe_depth.probe";
pub const EVAL_REPORT: &str = "eval.jsonl";

/// Exclusive hold on an output directory, released on drop.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// What a stage produced.
#[derive(Debug, Clone, Default)]
pub struct StageOutput {
    pub files: Vec<PathBuf>,
    pub reports: Vec<MetricReport>,
    /// Set when a loaded checkpoint was written under a different config.
    pub fingerprint_mismatch: Option<String>,
    /// Digest of all model parameters when the stage finished.
    pub param_digest: Option<String>,
}

fn load_split(cfg: &RunConfig, split: Split, need: usize) -> Result<Dataset> {
    let dir = cfg.split_dir(split);
    let ds = Dataset::load(&dir)?;
    if ds.side != cfg.backbone.image_side {
        return Err(Error::config(
            "backbone.image_side",
            format!("dataset at {} has side {}", dir.display(), ds.side),
        ));
    }
    if ds.len() < need {
        return Err(Error::config(
            "data",
            format!("{} holds {} samples, {need} needed", dir.display(), ds.len()),
        ));
    }
    Ok(ds)
}

fn load_model(cfg: &RunConfig, ckpt: &str, out: &mut StageOutput) -> Result<(Model, ParamStore<f32>)> {
    let (model, mut store) = Model::init::<f32>(&cfg.model(), cfg.seed)?;
    let path = cfg.output_dir.join(ckpt);
    if !path.is_file() {
        return Err(Error::io(&path, std::io::Error::new(std::io::ErrorKind::NotFound, "checkpoint not found; run the previous stage first")));
    }
    let fp = load_checkpoint(&mut store, &path)?;
    if fp != cfg.fingerprint() {
        out.fingerprint_mismatch = Some(fp);
    }
    Ok((model, store))
}

fn create_log(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn write_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut text = String::new();
    for r in reports {
        text.push_str(&serde_json::to_string(r).expect("serializable report"));
        text.push('\n');
    }
    write_atomic(path, text.as_bytes())
}

fn train_data(cfg: &RunConfig) -> Result<TaskData<f32>> {
    let n = cfg.data.train_per_task;
    let ds = load_split(cfg, Split::Train, 3 * n)?;
    TaskData::from_dataset(&ds, [n; 3], cfg.caption.vocab_size)
}

/// Writes the train, val and test splits.
pub fn gen_data(cfg: &RunConfig) -> Result<StageOutput> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let mut out = StageOutput::default();
    out.files.push(cfg.echo()?);
    for (split, n) in [
        (Split::Train, 3 * cfg.data.train_per_task),
        (Split::Val, cfg.data.probe_fit),
        (Split::Test, cfg.data.probe_eval),
    ] {
        out.files.push(gen_dataset(&cfg.split_dir(split), n, cfg.seed, split, cfg.backbone.image_side)?);
    }
    Ok(out)
}

/// Caption alignment from a fresh initialization; only the projector
/// moves.
pub fn warmup(cfg: &RunConfig) -> Result<StageOutput> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let data = train_data(cfg)?;
    let mut out = StageOutput::default();
    out.files.push(cfg.echo()?);
    let (model, mut store) = Model::init::<f32>(&cfg.model(), cfg.seed)?;
    let log_path = cfg.output_dir.join(WARMUP_LOG);
    let mut log = create_log(&log_path)?;
    warmup_alignment(&model, &mut store, &data, &cfg.train, cfg.seed, &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let ckpt = cfg.output_dir.join(WARMUP_CKPT);
    save_checkpoint(&store, &ckpt, &cfg.fingerprint())?;
    out.param_digest = Some(store.digest(None));
    out.files.extend([ckpt, log_path]);
    Ok(out)
}

/// Multitask training from the warm-up checkpoint.
pub fn train(cfg: &RunConfig) -> Result<(StageOutput, TrainReport)> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let data = train_data(cfg)?;
    let mut out = StageOutput::default();
    out.files.push(cfg.echo()?);
    let (model, mut store) = load_model(cfg, WARMUP_CKPT, &mut out)?;
    let log_path = cfg.output_dir.join(TRAIN_LOG);
    let mut log = create_log(&log_path)?;
    let result = run_train(&model, &mut store, &data, &cfg.train, &cfg.loss, cfg.seed, &mut log);
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let report = result?;
    let ckpt = cfg.output_dir.join(MODEL_CKPT);
    save_checkpoint(&store, &ckpt, &cfg.fingerprint())?;
    out.param_digest = Some(store.digest(None));
    out.files.extend([ckpt, log_path]);
    Ok((out, report))
}

fn probe_file(p: &LinearProbe, fingerprint: &str) -> Result<TensorFile> {
    let v = |dims: Vec<usize>, x: &[f64]| Tensor::new(dims, x.iter().map(|&a| a as f32).collect());
    let dim = p.norm.mean.len();
    Ok(TensorFile {
        tensors: vec![
            ("weight".into(), v(vec![dim, p.outputs], &p.weight)?),
            ("bias".into(), v(vec![p.outputs], &p.bias)?),
            ("norm.mean".into(), v(vec![dim], &p.norm.mean)?),
            ("norm.inv_std".into(), v(vec![dim], &p.norm.inv_std)?),
        ],
        fingerprint: fingerprint.to_string(),
    })
}

struct ProbeSets {
    store: ParamStore<f32>,
    fit: Dataset,
    eval: Dataset,
    f_fit: Features,
    f_eval: Features,
}

fn probe_sets(cfg: &RunConfig, out: &mut StageOutput) -> Result<ProbeSets> {
    let fit = load_split(cfg, Split::Val, cfg.data.probe_fit)?;
    let eval = load_split(cfg, Split::Test, cfg.data.probe_eval)?;
    let (model, store) = load_model(cfg, MODEL_CKPT, out)?;
    let fit_s = &fit.samples[..cfg.data.probe_fit];
    let eval_s = &eval.samples[..cfg.data.probe_eval];
    let f_fit = Features::extract(&model, &store, fit_s)?;
    let f_eval = Features::extract(&model, &store, eval_s)?;
    Ok(ProbeSets {
        store,
        fit,
        eval,
        f_fit,
        f_eval,
    })
}

/// Segmentation probe on frozen final-layer features.
pub fn probe_seg(cfg: &RunConfig) -> Result<StageOutput> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let mut out = StageOutput::default();
    let s = probe_sets(cfg, &mut out)?;
    let n = cfg.data.probe_eval;
    let probe = fit_probe_seg(&s.f_fit, &s.fit.samples[..cfg.data.probe_fit], NUM_CLASSES, &cfg.probe)?;
    let scores = eval_probe_seg(&probe, &s.f_eval, &s.eval.samples[..n])?;
    out.param_digest = Some(s.store.digest(None));
    out.reports.push(MetricReport::new("seg", "miou", scores.miou, "synthetic-test", n)?);
    finish_probe(cfg, out, &probe, PROBE_SEG_WEIGHTS, PROBE_SEG_REPORT)
}

/// Depth probe on frozen final-layer features.
pub fn probe_depth(cfg: &RunConfig) -> Result<StageOutput> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let mut out = StageOutput::default();
    let s = probe_sets(cfg, &mut out)?;
    let n = cfg.data.probe_eval;
    let probe = fit_probe_depth(&s.f_fit, &s.fit.samples[..cfg.data.probe_fit], &cfg.probe)?;
    let d = eval_probe_depth(&probe, &s.f_eval, &s.eval.samples[..n])?;
    out.param_digest = Some(s.store.digest(None));
    for (metric, v) in [("rmse", d.rmse), ("abs_rel", d.abs_rel), ("delta1", d.delta1)] {
        out.reports.push(MetricReport::new("depth", metric, v, "synthetic-test", n)?);
    }
    finish_probe(cfg, out, &probe, PROBE_DEPTH_WEIGHTS, PROBE_DEPTH_REPORT)
}

fn finish_probe(cfg: &RunConfig, mut out: StageOutput, probe: &LinearProbe, weights: &str, report: &str) -> Result<StageOutput> {
    let wpath = cfg.output_dir.join(weights);
    probe_file(probe, &cfg.fingerprint())?.write(&wpath)?;
    let rpath = cfg.output_dir.join(report);
    write_reports(&rpath, &out.reports)?;
    out.files.extend([wpath, rpath]);
    Ok(out)
}

/// Scores the trained task heads themselves on the test split: caption
/// token cross-entropy, aligned depth error and mean instance IoU of the
/// thresholded mask logits.
pub fn eval(cfg: &RunConfig) -> Result<StageOutput> {
    let _lock = RunLock::acquire(&cfg.output_dir)?;
    let mut out = StageOutput::default();
    let n = cfg.data.probe_eval;
    let test = load_split(cfg, Split::Test, n)?;
    let (model, store) = load_model(cfg, MODEL_CKPT, &mut out)?;
    let samples = &test.samples[..n];

    let mut nll = 0.0;
    let mut sums = DepthSums::default();
    let (mut iou_sum, mut instances) = (0.0, 0usize);
    for s in samples {
        let (l, depth, masks) = head_outputs(&model, &store, s, cfg.caption.vocab_size)?;
        nll += l;
        let gt = s.depth.to_f64_vec();
        sums.add(&aligned(&depth, &gt)?, &gt)?;
        for (logits, inst) in masks.iter().zip(&s.instances) {
            iou_sum += binary_iou(logits, inst.mask.data());
            instances += 1;
        }
    }
    let d = sums.scores()?;
    out.reports.push(MetricReport::new("cap", "token_nll", nll / n as f64, "synthetic-test", n)?);
    for (metric, v) in [("rmse", d.rmse), ("abs_rel", d.abs_rel), ("delta1", d.delta1)] {
        out.reports.push(MetricReport::new("depth_head", metric, v, "synthetic-test", n)?);
    }
    out.reports.push(MetricReport::new("seg_head", "instance_iou", iou_sum / instances.max(1) as f64, "synthetic-test", n)?);
    let rpath = cfg.output_dir.join(EVAL_REPORT);
    write_reports(&rpath, &out.reports)?;
    out.files.push(rpath);
    Ok(out)
}

/// Caption loss, depth map and one mask-logit map per instance.
fn head_outputs(model: &Model, store: &ParamStore<f32>, s: &Sample, vocab: usize) -> Result<(f64, Vec<f64>, Vec<Vec<f64>>)> {
    let mut g = Graph::with_trainable(store, |_| false);
    let seq = TokenSequence::new(s.caption.clone(), vocab)?;
    let l = model.caption_loss(&mut g, &s.image, &seq)?;
    let nll = g.scalar(l)? as f64;
    let d = model.predict_depth(&mut g, &s.image)?;
    let depth = g.value(d)?.iter().map(|&x| x as f64).collect();
    let targets: Vec<MaskTarget<f32>> = s.instances.clone();
    let masks = targets
        .iter()
        .map(|t| {
            let logits = model.mask_logits(&mut g, &s.image, &t.phrase)?;
            Ok(g.value(logits)?.iter().map(|&x| x as f64).collect())
        })
        .collect::<Result<_>>()?;
    Ok((nll, depth, masks))
}

/// IoU of `logits > 0` against a binary mask; 1 when both are empty.
pub fn binary_iou(logits: &[f64], mask: &[f32]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&l, &m) in logits.iter().zip(mask) {
        let (p, t) = (l > 0.0, m > 0.5);
        inter += (p && t) as usize;
        union += (p || t) as usize;
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
