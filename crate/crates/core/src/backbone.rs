//! Toy vision transformer shared by all task heads.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Block, Linear};
use crate::params::{Group, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub patch_size: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub image_side: usize,
    pub mlp_ratio: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            patch_size: 4,
            num_layers: 4,
            embed_dim: 32,
            num_heads: 2,
            image_side: 16,
            mlp_ratio: 2,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: &str| Err(Error::config(format!("backbone.{k}"), m));
        if self.patch_size == 0 {
            return err("patch_size", "must be >= 1");
        }
        if self.image_side == 0 || self.image_side % self.patch_size != 0 {
            return err("image_side", "must be a positive multiple of patch_size");
        }
        if self.num_layers < 3 {
            return err("num_layers", "must be >= 3 (the depth head reads three layers)");
        }
        if self.num_heads == 0 || self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return err("embed_dim", "must be a positive multiple of num_heads");
        }
        if self.mlp_ratio == 0 {
            return err("mlp_ratio", "must be >= 1");
        }
        Ok(())
    }

    /// Token grid side at the configured resolution.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_size
    }
}

/// Per-layer token features, each `grid² x embed_dim`, shallowest first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub layers: Vec<Var>,
    pub grid: usize,
}

impl FeaturePyramid {
    pub fn last(&self) -> Var {
        *self.layers.last().expect("pyramid is never empty")
    }

    /// The `k` layers picked by [`select_uniform`].
    pub fn select(&self, k: usize) -> Result<Vec<Var>> {
        Ok(select_uniform(self.layers.len(), k)?
            .into_iter()
            .map(|i| self.layers[i - 1])
            .collect())
    }
}

/// 1-based layer indices `round(j * n / k)` for `j = 1..=k`; always ends
/// at layer `n`.
pub fn select_uniform(n: usize, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > n {
        return Err(Error::config(
            "depth.layers",
            format!("cannot select {k} of {n} layers"),
        ));
    }
    Ok((1..=k)
        .map(|j| ((j * n) as f64 / k as f64).round() as usize)
        .collect())
}

/// `H x W x 3` image to `(H/P)(W/P) x 3P²` tokens in raster order; each
/// row is one patch flattened as `(row, col, channel)`.
pub fn patchify<T: Real>(image: &Tensor<T>, p: usize) -> Result<Tensor<T>> {
    let (h, w, c) = match image.dims() {
        &[h, w, c] => (h, w, c),
        d => return Err(Error::shape(format!("expected an HxWx3 image, got {d:?}"))),
    };
    if c != 3 {
        return Err(Error::shape(format!("expected 3 channels, got {c}")));
    }
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::shape(format!("{h}x{w} image is not divisible by patch {p}")));
    }
    let (gh, gw) = (h / p, w / p);
    let x = image.data();
    let mut out = Vec::with_capacity(x.len());
    for py in 0..gh {
        for px in 0..gw {
            for r in 0..p {
                let start = ((py * p + r) * w + px * p) * c;
                out.extend_from_slice(&x[start..start + p * c]);
            }
        }
    }
    Tensor::new(vec![gh * gw, 3 * p * p], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(tokens: &Tensor<T>, h: usize, w: usize, p: usize) -> Result<Tensor<T>> {
    let c = 3;
    if p == 0 || h % p != 0 || w % p != 0 || tokens.dims() != [(h / p) * (w / p), c * p * p] {
        return Err(Error::shape(format!(
            "tokens {:?} do not tile a {h}x{w} image with patch {p}",
            tokens.dims()
        )));
    }
    let gw = w / p;
    let mut out = vec![T::zero(); h * w * c];
    for (k, row) in tokens.data().chunks(c * p * p).enumerate() {
        let (py, px) = (k / gw, k % gw);
        for r in 0..p {
            let start = ((py * p + r) * w + px * p) * c;
            out[start..start + p * c].copy_from_slice(&row[r * p * c..(r + 1) * p * c]);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub patch: Linear,
    pub pos: ParamId,
    pub blocks: Vec<Block>,
}

impl Backbone {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &BackboneConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let p = cfg.patch_size;
        let patch = Linear::new(store, "backbone.patch_embed", Group::Backbone, 3 * p * p, d);
        let pos = store.init_scaled("backbone.pos_embed", Group::Backbone, &[cfg.grid() * cfg.grid(), d], 0.1);
        let blocks = (0..cfg.num_layers)
            .map(|i| {
                Block::new(
                    store,
                    &format!("backbone.blocks.{i}"),
                    Group::Backbone,
                    d,
                    cfg.num_heads,
                    d * cfg.mlp_ratio,
                )
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            patch,
            pos,
            blocks,
        })
    }

    /// Runs the encoder and returns every block output. Images at a
    /// resolution other than the configured one are accepted; the learned
    /// positional grid is bilinearly resized to match.
    pub fn forward_features<T: Real>(&self, g: &mut Graph<'_, T>, image: &Tensor<T>) -> Result<FeaturePyramid> {
        let side = match image.dims() {
            &[h, w, 3] if h == w => h,
            d => return Err(Error::shape(format!("expected a square HxWx3 image, got {d:?}"))),
        };
        let tokens = patchify(image, self.cfg.patch_size)?;
        let grid = side / self.cfg.patch_size;
        let x = g.constant(tokens);
        let mut x = self.patch.forward(g, x)?;
        let mut pos = g.param(self.pos);
        let g0 = self.cfg.grid();
        if grid != g0 {
            pos = g.resize_bilinear(pos, g0, g0, grid, grid)?;
        }
        x = g.add(x, pos)?;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            x = b.forward(g, x, None)?;
            layers.push(x);
        }
        Ok(FeaturePyramid { layers, grid })
    }
}
