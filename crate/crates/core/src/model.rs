//! The shared encoder together with the three task heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::backbone::{Backbone, BackboneConfig};
use crate::caption::{CaptionConfig, CaptionHead, TokenSequence};
use crate::depth::{DepthConfig, DepthHead};
use crate::error::{Error, Result};
use crate::losses::{loss_depth, loss_seg, LossWeights};
use crate::params::ParamStore;
use crate::scalar::Real;
use crate::seg::{SegConfig, SegHead};
use crate::tensor::Tensor;

/// Number of backbone layers fed to the depth head.
pub const DEPTH_LAYERS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub caption: CaptionConfig,
    pub depth: DepthConfig,
    pub seg: SegConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.caption.validate()?;
        self.depth.validate()?;
        self.seg.validate()?;
        if self.seg.vocab_size != self.caption.vocab_size {
            return Err(Error::config("seg.vocab_size", "must equal caption.vocab_size"));
        }
        if self.backbone.num_layers < DEPTH_LAYERS {
            return Err(Error::config(
                "backbone.num_layers",
                format!("depth head needs at least {DEPTH_LAYERS} layers"),
            ));
        }
        Ok(())
    }
}

/// One referring-segmentation target: a phrase and the mask it names.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskTarget<T> {
    pub phrase: Vec<usize>,
    pub mask: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub cfg: ModelConfig,
    pub backbone: Backbone,
    pub caption: CaptionHead,
    pub depth: DepthHead,
    pub seg: SegHead,
}

impl Model {
    /// Registers every parameter in `store`, in a fixed order.
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.backbone.embed_dim;
        let grid = cfg.backbone.grid();
        let backbone = Backbone::new(store, &cfg.backbone)?;
        let caption = CaptionHead::new(store, &cfg.caption, d, grid * grid)?;
        let depth = DepthHead::new(store, &cfg.depth, d)?;
        let seg = SegHead::new(store, &cfg.seg, d, grid)?;
        Ok(Self {
            cfg: cfg.clone(),
            backbone,
            caption,
            depth,
            seg,
        })
    }

    /// Fresh parameters drawn from `seed`.
    pub fn init<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<(Self, ParamStore<T>)> {
        let mut store = ParamStore::new(seed);
        let m = Self::new(&mut store, cfg)?;
        Ok((m, store))
    }

    fn side<T: Real>(image: &Tensor<T>) -> usize {
        image.dims()[0]
    }

    pub fn caption_loss<T: Real>(&self, g: &mut Graph<'_, T>, image: &Tensor<T>, seq: &TokenSequence) -> Result<Var> {
        let pyr = self.backbone.forward_features(g, image)?;
        let vis = self.caption.project(g, pyr.last())?;
        self.caption.caption_loss(g, vis, seq)
    }

    pub fn predict_depth<T: Real>(&self, g: &mut Graph<'_, T>, image: &Tensor<T>) -> Result<Var> {
        let pyr = self.backbone.forward_features(g, image)?;
        let sel = pyr.select(DEPTH_LAYERS)?;
        self.depth.predict_depth(g, &sel, pyr.grid, Self::side(image))
    }

    pub fn depth_loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        image: &Tensor<T>,
        gt: &Tensor<T>,
        w: &LossWeights,
    ) -> Result<Var> {
        let pred = self.predict_depth(g, image)?;
        let gt = g.constant(gt.clone());
        loss_depth(g, pred, gt, w)
    }

    /// Mean segmentation loss over all targets of one image; the encoder
    /// runs once and its output is shared by every prompt.
    pub fn seg_loss<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        image: &Tensor<T>,
        targets: &[MaskTarget<T>],
        w: &LossWeights,
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(Error::contract("segmentation sample without targets"));
        }
        let pyr = self.backbone.forward_features(g, image)?;
        let side = Self::side(image);
        let mut total: Option<Var> = None;
        for t in targets {
            let p = self.seg.embed_prompt(g, &t.phrase)?;
            let logits = self.seg.predict_mask(g, pyr.last(), pyr.grid, p, side)?;
            let l = loss_seg(g, logits, &t.mask, w)?;
            total = Some(match total {
                None => l,
                Some(acc) => g.add(acc, l)?,
            });
        }
        g.scale(total.expect("non-empty"), 1.0 / targets.len() as f64)
    }

    /// Mask logits `[side, side]` for one phrase.
    pub fn mask_logits<T: Real>(&self, g: &mut Graph<'_, T>, image: &Tensor<T>, phrase: &[usize]) -> Result<Var> {
        let pyr = self.backbone.forward_features(g, image)?;
        let p = self.seg.embed_prompt(g, phrase)?;
        self.seg.predict_mask(g, pyr.last(), pyr.grid, p, Self::side(image))
    }

    /// Final-layer features `[grid², D]` with nothing trainable.
    pub fn features<T: Real>(&self, store: &ParamStore<T>, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::with_trainable(store, |_| false);
        let pyr = self.backbone.forward_features(&mut g, image)?;
        g.tensor(pyr.last())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_model_fits_parameter_budget() {
        let (_, store) = Model::init::<f32>(&ModelConfig::default(), 0).unwrap();
        assert!(store.num_scalars() <= 500_000, "{}", store.num_scalars());
    }

    #[test]
    fn vocab_sizes_must_agree() {
        let mut cfg = ModelConfig::default();
        cfg.seg.vocab_size = 32;
        assert!(matches!(cfg.validate(), Err(Error::Config { .. })));
    }
}
