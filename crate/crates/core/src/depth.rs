//! Dense depth head: three backbone layers reassembled at increasing
//! resolutions and fused coarse-to-fine.
//!
//! Layer roles, with `g` the token grid side:
//!
//! ```text
//! deepest  -> proj -> g x g   -> unit ----------------+
//!                                                    up x2
//! middle   -> proj -> 2g x 2g -> unit -> (+) <-------+
//!                                          unit
//!                                         up x2
//! shallow  -> proj -> 4g x 4g -> unit -> (+)
//!                                          unit -> out MLP -> resize to image side
//! ```
//!
//! Every "unit" is a residual pair of 1x1 channel mixings.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{Group, ParamStore};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DepthConfig {
    /// Shared channel width of the fusion path.
    pub width: usize,
}

impl Default for DepthConfig {
    fn default() -> Self {
        Self { width: 16 }
    }
}

impl DepthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width < 2 {
            return Err(Error::config("depth.width", "must be >= 2"));
        }
        Ok(())
    }
}

/// `x + W2 relu(W1 relu(x))`, per pixel.
#[derive(Debug, Clone)]
struct ResidualUnit {
    mlp: Mlp,
}

impl ResidualUnit {
    fn new<T: Real>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            mlp: Mlp::new(store, name, Group::Depth, c, c, c),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = g.relu(x)?;
        let h = self.mlp.forward(g, h)?;
        g.add(x, h)
    }
}

#[derive(Debug, Clone)]
pub struct DepthHead {
    pub cfg: DepthConfig,
    reassemble: [Linear; 3],
    units: [ResidualUnit; 5],
    out1: Linear,
    out2: Linear,
}

impl DepthHead {
    pub fn new<T: Real>(store: &mut ParamStore<T>, cfg: &DepthConfig, feature_dim: usize) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let reassemble = [0, 1, 2]
            .map(|i| Linear::new(store, &format!("depth.reassemble.{i}"), Group::Depth, feature_dim, c));
        let units = [0, 1, 2, 3, 4].map(|i| ResidualUnit::new(store, &format!("depth.fusion.{i}"), c));
        let out1 = Linear::new(store, "depth.out1", Group::Depth, c, c / 2);
        let out2 = Linear::new(store, "depth.out2", Group::Depth, c / 2, 1);
        Ok(Self {
            cfg: cfg.clone(),
            reassemble,
            units,
            out1,
            out2,
        })
    }

    /// `selected` holds three token matrices (shallow to deep) on a
    /// `grid x grid` layout; the result is an `image_side x image_side` map.
    pub fn predict_depth<T: Real>(
        &self,
        g: &mut Graph<'_, T>,
        selected: &[Var],
        grid: usize,
        image_side: usize,
    ) -> Result<Var> {
        let [shallow, mid, deep] = selected else {
            return Err(Error::shape(format!("depth head takes 3 layers, got {}", selected.len())));
        };
        for &s in selected {
            if g.dims(s)?[0] != grid * grid {
                return Err(Error::shape(format!(
                    "feature has {} tokens, expected {}",
                    g.dims(s)?[0],
                    grid * grid
                )));
            }
        }
        let reassemble = |g: &mut Graph<'_, T>, i: usize, x: Var, scale: usize| -> Result<Var> {
            let p = self.reassemble[i].forward(g, x)?;
            if scale == 1 {
                Ok(p)
            } else {
                g.resize_bilinear(p, grid, grid, grid * scale, grid * scale)
            }
        };
        let r_deep = reassemble(g, 2, *deep, 1)?;
        let r_mid = reassemble(g, 1, *mid, 2)?;
        let r_shallow = reassemble(g, 0, *shallow, 4)?;

        let f = self.units[0].forward(g, r_deep)?;
        let f = g.resize_bilinear(f, grid, grid, 2 * grid, 2 * grid)?;
        let m = self.units[1].forward(g, r_mid)?;
        let f = g.add(f, m)?;
        let f = self.units[2].forward(g, f)?;
        let f = g.resize_bilinear(f, 2 * grid, 2 * grid, 4 * grid, 4 * grid)?;
        let s = self.units[3].forward(g, r_shallow)?;
        let f = g.add(f, s)?;
        let f = self.units[4].forward(g, f)?;

        let h = self.out1.forward(g, f)?;
        let h = g.relu(h)?;
        let mut d = self.out2.forward(g, h)?;
        if 4 * grid != image_side {
            d = g.resize_bilinear(d, 4 * grid, 4 * grid, image_side, image_side)?;
        }
        g.reshape(d, &[image_side, image_side])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FiniteDiff};
    use crate::rng::{keyed_rng, Purpose};
    use crate::tensor::Tensor;
    use rand::Rng;

    fn feats(n: usize, d: usize, seed: u64) -> [Tensor<f64>; 3] {
        let mut rng = keyed_rng(seed, Purpose::Verify, 7);
        [0, 1, 2].map(|_| Tensor::new(vec![n, d], (0..n * d).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap())
    }

    fn run(head: &DepthHead, store: &ParamStore<f64>, f: &[Tensor<f64>; 3], grid: usize, side: usize) -> Tensor<f64> {
        let mut g = Graph::new(store);
        let vs: Vec<Var> = f.iter().map(|t| g.constant(t.clone())).collect();
        let d = head.predict_depth(&mut g, &vs, grid, side).unwrap();
        g.tensor(d).unwrap()
    }

    #[test]
    fn output_matches_image_size() {
        let mut store = ParamStore::<f64>::new(1);
        let head = DepthHead::new(&mut store, &DepthConfig::default(), 64).unwrap();
        let f = feats(64, 64, 0);
        let d = run(&head, &store, &f, 8, 32);
        assert_eq!(d.dims(), &[32, 32]);
        assert_eq!(d, run(&head, &store, &f, 8, 32));
        // a patch size of 2 on a 16-pixel image needs a final resize
        assert_eq!(run(&head, &store, &f, 8, 16).dims(), &[16, 16]);
    }

    #[test]
    fn every_layer_contributes() {
        let mut store = ParamStore::<f64>::new(2);
        let head = DepthHead::new(&mut store, &DepthConfig::default(), 16).unwrap();
        let f = feats(16, 16, 1);
        let base = run(&head, &store, &f, 4, 16);
        for i in 0..3 {
            let mut z = f.clone();
            z[i] = Tensor::zeros(vec![16, 16]);
            let other = run(&head, &store, &z, 4, 16);
            assert!(base.max_abs_diff(&other) > 0.0, "layer {i} ignored");
        }
    }

    #[test]
    fn token_count_mismatch() {
        let mut store = ParamStore::<f64>::new(1);
        let head = DepthHead::new(&mut store, &DepthConfig::default(), 8).unwrap();
        let f = feats(9, 8, 0);
        let mut g = Graph::new(&store);
        let vs: Vec<Var> = f.iter().map(|t| g.constant(t.clone())).collect();
        assert!(matches!(head.predict_depth(&mut g, &vs, 4, 16), Err(Error::Shape(_))));
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new(3);
        let head = DepthHead::new(&mut store, &DepthConfig { width: 4 }, 6).unwrap();
        // Zero biases put ReLU inputs exactly on the kink wherever a
        // pixel's activations all vanish; move them off it.
        let mut rng = keyed_rng(9, Purpose::Verify, 0);
        let biases: Vec<_> = store.iter().filter(|(_, p)| p.name.ends_with(".bias")).map(|(id, _)| id).collect();
        for id in biases {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        let f = feats(4, 6, 2);
        let err = finite_diff_check(&store, &FiniteDiff::default().step(1e-6).coords(5), |g| {
            let vs: Vec<Var> = f.iter().map(|t| g.constant(t.clone())).collect();
            let d = head.predict_depth(g, &vs, 2, 8)?;
            g.mean(d)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
