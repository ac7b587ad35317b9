//! Referring segmentation: phrase prompt encoder plus a two-way
//! attention mask decoder over the final backbone layer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Attention, LayerNorm, Linear, Mlp};
use crate::params::{Group, ParamId, ParamStore};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub prompt_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub vocab_size: usize,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            prompt_dim: 32,
            blocks: 2,
            heads: 2,
            vocab_size: 17,
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: &str| Err(Error::config(format!("seg.{k}"), m));
        if self.heads == 0 || self.prompt_dim < 4 || self.prompt_dim % (4 * self.heads) != 0 {
            return err("prompt_dim", "must be a multiple of 4 * heads");
        }
        if self.blocks == 0 {
            return err("blocks", "must be >= 1");
        }
        if self.vocab_size < 2 {
            return err("vocab_size", "must be >= 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct TwoWayBlock {
    self_attn: Attention,
    ln1: LayerNorm,
    cross_t2i: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
    ln3: LayerNorm,
    cross_i2t: Attention,
    ln4: LayerNorm,
}

impl TwoWayBlock {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, d: usize, heads: usize) -> Self {
        let s = Group::Seg;
        Self {
            self_attn: Attention::new(store, &format!("{name}.self_attn"), s, d, heads),
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), s, d),
            cross_t2i: Attention::new(store, &format!("{name}.cross_t2i"), s, d, heads),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), s, d),
            mlp: Mlp::new(store, &format!("{name}.mlp"), s, d, 2 * d, d),
            ln3: LayerNorm::new(store, &format!("{name}.ln3"), s, d),
            cross_i2t: Attention::new(store, &format!("{name}.cross_i2t"), s, d, heads),
            ln4: LayerNorm::new(store, &format!("{name}.ln4"), s, d),
        }
    }

    /// Queries attend to themselves and to the image; then the image
    /// attends back to the queries. Positional terms are re-added to keys
    /// and queries at every attention.
    fn forward<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        queries: Var,
        query_pe: Var,
        image: Var,
        image_pe: Var,
    ) -> Result<(Var, Var)> {
        let q = g.add(queries, query_pe)?;
        let a = self.self_attn.forward(g, q, q, queries)?;
        let queries = g.add(queries, a)?;
        let queries = self.ln1.forward(g, queries)?;

        let q = g.add(queries, query_pe)?;
        let k = g.add(image, image_pe)?;
        let a = self.cross_t2i.forward(g, q, k, image)?;
        let queries = g.add(queries, a)?;
        let queries = self.ln2.forward(g, queries)?;

        let m = self.mlp.forward(g, queries)?;
        let queries = g.add(queries, m)?;
        let queries = self.ln3.forward(g, queries)?;

        let q = g.add(queries, query_pe)?;
        let k = g.add(image, image_pe)?;
        let a = self.cross_i2t.forward(g, k, q, queries)?;
        let image = g.add(image, a)?;
        let image = self.ln4.forward(g, image)?;
        Ok((queries, image))
    }
}

#[derive(Debug, Clone)]
pub struct SegHead {
    pub cfg: SegConfig,
    grid: usize,
    prompt_table: ParamId,
    prompt_fc: Linear,
    neck: Linear,
    image_pe: ParamId,
    output_token: ParamId,
    blocks: Vec<TwoWayBlock>,
    final_attn: Attention,
    ln_final: LayerNorm,
    up1: Linear,
    up2: Linear,
    hyper: Mlp,
}

impl SegHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &SegConfig, feature_dim: usize, grid: usize) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.prompt_dim;
        let s = Group::Seg;
        let prompt_table = store.init_scaled("seg.prompt.tok_embed", s, &[cfg.vocab_size, d], 1.0);
        let prompt_fc = Linear::new(store, "seg.prompt.fc", s, d, d);
        let neck = Linear::new(store, "seg.neck", s, feature_dim, d);
        let image_pe = store.init_scaled("seg.image_pe", s, &[grid * grid, d], 0.1);
        let output_token = store.init_scaled("seg.output_token", s, &[1, d], 0.4);
        let blocks = (0..cfg.blocks)
            .map(|i| TwoWayBlock::new(store, &format!("seg.blocks.{i}"), d, cfg.heads))
            .collect();
        let final_attn = Attention::new(store, "seg.final_attn", s, d, cfg.heads);
        let ln_final = LayerNorm::new(store, "seg.ln_final", s, d);
        let up1 = Linear::new(store, "seg.upscale.0", s, d, d / 2);
        let up2 = Linear::new(store, "seg.upscale.1", s, d / 2, d / 4);
        let hyper = Mlp::new(store, "seg.hyper", s, d, d, d / 4);
        Ok(Self {
            cfg: cfg.clone(),
            grid,
            prompt_table,
            prompt_fc,
            neck,
            image_pe,
            output_token,
            blocks,
            final_attn,
            ln_final,
            up1,
            up2,
            hyper,
        })
    }

    /// `tanh(W mean(embed(tokens)) + b)`, shape `[1, prompt_dim]`.
    pub fn embed_prompt<T: Real>(&self, g: &mut Graph<'_, T>, phrase: &[usize]) -> Result<Var> {
        if phrase.is_empty() {
            return Err(Error::contract("empty phrase"));
        }
        if let Some(bad) = phrase.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Vocabulary(format!("id {bad}")));
        }
        let table = g.param(self.prompt_table);
        let rows = g.gather_rows(table, phrase)?;
        let mean = g.mean_rows(rows)?;
        let h = self.prompt_fc.forward(g, mean)?;
        g.tanh(h)
    }

    /// Mask logits `[image_side, image_side]` for one prompt.
    pub fn predict_mask<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        features: Var,
        grid: usize,
        prompt: Var,
        image_side: usize,
    ) -> Result<Var> {
        let d = self.cfg.prompt_dim;
        if g.dims(features)?[0] != grid * grid {
            return Err(Error::shape(format!(
                "{} feature tokens for a {grid}x{grid} grid",
                g.dims(features)?[0]
            )));
        }
        if g.dims(prompt)? != [1, d] {
            return Err(Error::shape(format!("prompt dims {:?}, expected [1, {d}]", g.dims(prompt)?)));
        }
        let mut image = self.neck.forward(g, features)?;
        let mut image_pe = g.param(self.image_pe);
        if grid != self.grid {
            image_pe = g.resize_bilinear(image_pe, self.grid, self.grid, grid, grid)?;
        }
        let out_tok = g.param(self.output_token);
        let query_pe = g.concat_rows(&[prompt, out_tok])?;
        let mut queries = query_pe;
        for b in &self.blocks {
            (queries, image) = b.forward(g, queries, query_pe, image, image_pe)?;
        }
        let q = g.add(queries, query_pe)?;
        let k = g.add(image, image_pe)?;
        let a = self.final_attn.forward(g, q, k, image)?;
        let queries = g.add(queries, a)?;
        let queries = self.ln_final.forward(g, queries)?;

        let u = g.resize_bilinear(image, grid, grid, 2 * grid, 2 * grid)?;
        let u = self.up1.forward(g, u)?;
        let u = g.relu(u)?;
        let u = g.resize_bilinear(u, 2 * grid, 2 * grid, 4 * grid, 4 * grid)?;
        let u = self.up2.forward(g, u)?;
        let mut u = g.relu(u)?;
        if 4 * grid != image_side {
            u = g.resize_bilinear(u, 4 * grid, 4 * grid, image_side, image_side)?;
        }
        let tok = g.gather_rows(queries, &[1])?;
        let w = self.hyper.forward(g, tok)?;
        let wt = g.transpose(w)?;
        let logits = g.matmul(u, wt)?;
        g.reshape(logits, &[image_side, image_side])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FiniteDiff};
    use crate::backbone::{Backbone, BackboneConfig};
    use crate::rng::{keyed_rng, Purpose};
    use crate::tensor::Tensor;
    use rand::Rng;

    fn random(dims: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = keyed_rng(seed, Purpose::Verify, 1);
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn prompt_embedding_properties() {
        let mut store = ParamStore::<f64>::new(0);
        let head = SegHead::new(&mut store, &SegConfig::default(), 64, 8).unwrap();
        let mut g = Graph::new(&store);
        let one = head.embed_prompt(&mut g, &[7]).unwrap();
        let table = g.param(head.prompt_table);
        let row = g.gather_rows(table, &[7]).unwrap();
        let h = head.prompt_fc.forward(&mut g, row).unwrap();
        let direct = g.tanh(h).unwrap();
        assert_eq!(g.tensor(one).unwrap(), g.tensor(direct).unwrap());

        let a = head.embed_prompt(&mut g, &[3, 9, 12]).unwrap();
        let b = head.embed_prompt(&mut g, &[3, 9, 12, 3, 9, 12]).unwrap();
        assert!(g.tensor(a).unwrap().max_abs_diff(&g.tensor(b).unwrap()) < 1e-15);

        assert!(matches!(head.embed_prompt(&mut g, &[]), Err(Error::Contract(_))));
        assert!(matches!(head.embed_prompt(&mut g, &[17]), Err(Error::Vocabulary(_))));
    }

    #[test]
    fn mask_shape_and_prompt_sensitivity() {
        let mut store = ParamStore::<f64>::new(1);
        let head = SegHead::new(&mut store, &SegConfig::default(), 64, 8).unwrap();
        let mut g = Graph::new(&store);
        let f = g.constant(random(vec![64, 64], 2));
        let p1 = head.embed_prompt(&mut g, &[4, 5]).unwrap();
        let p2 = head.embed_prompt(&mut g, &[6, 7]).unwrap();
        let m1 = head.predict_mask(&mut g, f, 8, p1, 32).unwrap();
        let m2 = head.predict_mask(&mut g, f, 8, p2, 32).unwrap();
        assert_eq!(g.dims(m1).unwrap(), &[32, 32]);
        assert!(g.tensor(m1).unwrap().max_abs_diff(&g.tensor(m2).unwrap()) > 0.0);
        let bad = g.constant(random(vec![60, 64], 3));
        assert!(matches!(head.predict_mask(&mut g, bad, 8, p1, 32), Err(Error::Shape(_))));
    }

    #[test]
    fn prompt_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new(4);
        let cfg = SegConfig {
            prompt_dim: 8,
            blocks: 1,
            heads: 2,
            vocab_size: 6,
        };
        let head = SegHead::new(&mut store, &cfg, 4, 2).unwrap();
        let f = random(vec![4, 4], 5);
        let ids = vec![head.prompt_table, head.prompt_fc.weight, head.prompt_fc.bias];
        let err = finite_diff_check(&store, &FiniteDiff::default().step(1e-6).only(ids), |g| {
            let p = head.embed_prompt(g, &[1, 4])?;
            let fv = g.constant(f.clone());
            let m = head.predict_mask(g, fv, 2, p, 8)?;
            g.mean(m)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn mask_gradient_wrt_backbone_matches_finite_differences() {
        let bcfg = BackboneConfig {
            patch_size: 4,
            num_layers: 3,
            embed_dim: 8,
            num_heads: 2,
            image_side: 8,
            mlp_ratio: 2,
        };
        let scfg = SegConfig {
            prompt_dim: 8,
            blocks: 1,
            heads: 2,
            vocab_size: 6,
        };
        let mut store = ParamStore::<f64>::new(6);
        let bb = Backbone::new(&mut store, &bcfg).unwrap();
        let head = SegHead::new(&mut store, &scfg, 8, 2).unwrap();
        let img = random(vec![8, 8, 3], 7).map(|x| 0.5 + 0.5 * x);
        let ids = store.ids_in(Group::Backbone);
        let err = finite_diff_check(&store, &FiniteDiff::default().step(1e-6).coords(3).only(ids), |g| {
            let pyr = bb.forward_features(g, &img)?;
            let p = head.embed_prompt(g, &[2])?;
            let m = head.predict_mask(g, pyr.last(), pyr.grid, p, 8)?;
            let s = g.sigmoid(m)?;
            g.mean(s)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
