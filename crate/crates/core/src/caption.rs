//! Vision projector and a small causal text decoder producing the
//! caption loss from the final backbone layer.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{causal_mask, Block, LayerNorm, Linear, Mlp};
use crate::params::{Group, ParamId, ParamStore};
use crate::scalar::Real;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CaptionConfig {
    pub text_dim: usize,
    pub vocab_size: usize,
    pub decoder_layers: usize,
    pub decoder_heads: usize,
    /// Longest token sequence (including the begin token) the decoder accepts.
    pub max_text_len: usize,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        Self {
            text_dim: 32,
            vocab_size: 17,
            decoder_layers: 2,
            decoder_heads: 2,
            max_text_len: 18,
        }
    }
}

impl CaptionConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: &str| Err(Error::config(format!("caption.{k}"), m));
        if self.decoder_heads == 0 || self.text_dim == 0 || self.text_dim % self.decoder_heads != 0 {
            return err("text_dim", "must be a positive multiple of decoder_heads");
        }
        if self.vocab_size < 2 {
            return err("vocab_size", "must be >= 2");
        }
        if self.decoder_layers == 0 {
            return err("decoder_layers", "must be >= 1");
        }
        if self.max_text_len < 2 {
            return err("max_text_len", "must be >= 2");
        }
        Ok(())
    }
}

/// `t_0 .. t_L`; `t_0` is the begin token and `t_1..t_L` are supervised.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    tokens: Vec<usize>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<usize>, vocab_size: usize) -> Result<Self> {
        if tokens.len() < 2 {
            return Err(Error::contract("a token sequence needs at least one supervised token"));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= vocab_size) {
            return Err(Error::Vocabulary(format!("id {bad} >= vocabulary size {vocab_size}")));
        }
        Ok(Self { tokens })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    /// Number of supervised positions `L`.
    pub fn supervised_len(&self) -> usize {
        self.tokens.len() - 1
    }
}

/// Mean cross-entropy of rows of `logits [L, V]` against `targets`.
pub fn sequence_cross_entropy<T: Real>(g: &mut Graph<'_, T>, logits: Var, targets: &[usize]) -> Result<Var> {
    let (l, v) = match g.dims(logits)? {
        &[l, v] => (l, v),
        d => return Err(Error::shape(format!("logits must be a matrix, got {d:?}"))),
    };
    if targets.is_empty() {
        return Err(Error::contract("empty supervised span"));
    }
    if targets.len() != l {
        return Err(Error::shape(format!("{l} logit rows for {} targets", targets.len())));
    }
    if let Some(bad) = targets.iter().find(|&&t| t >= v) {
        return Err(Error::Vocabulary(format!("target {bad} >= {v}")));
    }
    let lp = g.log_softmax(logits)?;
    let flat = g.reshape(lp, &[l * v, 1])?;
    let picks: Vec<usize> = targets.iter().enumerate().map(|(i, &t)| i * v + t).collect();
    let picked = g.gather_rows(flat, &picks)?;
    let m = g.mean(picked)?;
    g.scale(m, -1.0)
}

#[derive(Debug, Clone)]
pub struct CaptionHead {
    pub cfg: CaptionConfig,
    pub visual_tokens: usize,
    pub projector: Mlp,
    pub tok_embed: ParamId,
    pub pos_embed: ParamId,
    pub blocks: Vec<Block>,
    pub ln_f: LayerNorm,
    pub lm_head: Linear,
}

impl CaptionHead {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        cfg: &CaptionConfig,
        feature_dim: usize,
        visual_tokens: usize,
    ) -> Result<Self> {
        cfg.validate()?;
        let dt = cfg.text_dim;
        let projector = Mlp {
            fc1: Linear::new(store, "caption.projector.fc1", Group::Projector, feature_dim, dt),
            fc2: Linear::new(store, "caption.projector.fc2", Group::Projector, dt, dt),
        };
        let dec = Group::Decoder;
        let tok_embed = store.init_scaled("caption.decoder.tok_embed", dec, &[cfg.vocab_size, dt], 1.0);
        let ctx = visual_tokens + cfg.max_text_len;
        let pos_embed = store.init_scaled("caption.decoder.pos_embed", dec, &[ctx, dt], 0.1);
        let blocks = (0..cfg.decoder_layers)
            .map(|i| Block::new(store, &format!("caption.decoder.blocks.{i}"), dec, dt, cfg.decoder_heads, 2 * dt))
            .collect();
        let ln_f = LayerNorm::new(store, "caption.decoder.ln_f", dec, dt);
        let lm_head = Linear::new(store, "caption.decoder.lm_head", dec, dt, cfg.vocab_size);
        Ok(Self {
            cfg: cfg.clone(),
            visual_tokens,
            projector,
            tok_embed,
            pos_embed,
            blocks,
            ln_f,
            lm_head,
        })
    }

    /// Final-layer features `[tokens, D]` to visual embeddings `[tokens, D_text]`.
    pub fn project<T: Real>(&self, g: &mut Graph<'_, T>, features: Var) -> Result<Var> {
        self.projector.forward(g, features)
    }

    /// Next-token logits for every text position of `[visual ; embed(tokens)]`.
    /// Row `i` predicts the token following `tokens[i]`.
    pub fn logits<T: Real>(&self, g: &mut Graph<'_, T>, visual: Var, tokens: &[usize]) -> Result<Var> {
        let n_vis = g.dims(visual)?[0];
        let pos = g.param(self.pos_embed);
        let ctx = g.dims(pos)?[0];
        let total = n_vis + tokens.len();
        if total > ctx {
            return Err(Error::contract(format!(
                "sequence of {total} positions exceeds decoder context {ctx}"
            )));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t >= self.cfg.vocab_size) {
            return Err(Error::Vocabulary(format!("id {bad}")));
        }
        let table = g.param(self.tok_embed);
        let text = g.gather_rows(table, tokens)?;
        let x = g.concat_rows(&[visual, text])?;
        let pos_rows: Vec<usize> = (0..total).collect();
        let pos = g.gather_rows(pos, &pos_rows)?;
        let mut x = g.add(x, pos)?;
        let mask = g.constant(causal_mask::<T>(total));
        for b in &self.blocks {
            x = b.forward(g, x, Some(mask))?;
        }
        let text_rows: Vec<usize> = (n_vis..total).collect();
        let h = g.gather_rows(x, &text_rows)?;
        let h = self.ln_f.forward(g, h)?;
        self.lm_head.forward(g, h)
    }

    /// Teacher-forced mean cross-entropy over the supervised tokens.
    pub fn caption_loss<T: Real>(&self, g: &mut Graph<'_, T>, visual: Var, seq: &TokenSequence) -> Result<Var> {
        let t = seq.tokens();
        let logits = self.logits(g, visual, &t[..t.len() - 1])?;
        sequence_cross_entropy(g, logits, &t[1..])
    }

    /// Greedy decoding, used only for caption-accuracy diagnostics.
    pub fn greedy<T: Real>(
        &self,
        store: &ParamStore<T>,
        features: &Tensor<T>,
        bos: usize,
        eos: usize,
    ) -> Result<Vec<usize>> {
        let mut tokens = vec![bos];
        while tokens.len() < self.cfg.max_text_len {
            let mut g = Graph::with_trainable(store, |_| false);
            let f = g.constant(features.clone());
            let vis = self.project(&mut g, f)?;
            let logits = self.logits(&mut g, vis, &tokens)?;
            let v = self.cfg.vocab_size;
            let vals = g.value(logits)?;
            let last = &vals[vals.len() - v..];
            let next = last
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |(bi, bv), (i, &x)| if x > bv { (i, x) } else { (bi, bv) })
                .0;
            tokens.push(next);
            if next == eos {
                break;
            }
        }
        Ok(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, FiniteDiff};
    use crate::rng::{keyed_rng, Purpose};
    use crate::tensor::Tensor;
    use rand::Rng;

    fn tiny() -> CaptionConfig {
        CaptionConfig {
            text_dim: 8,
            vocab_size: 10,
            decoder_layers: 1,
            decoder_heads: 2,
            max_text_len: 6,
        }
    }

    fn random(dims: Vec<usize>, seed: u64) -> Tensor<f64> {
        let mut rng = keyed_rng(seed, Purpose::Verify, 0);
        let n = dims.iter().product();
        Tensor::new(dims, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn projection_shape_and_zero_weights() {
        let mut store = ParamStore::<f64>::new(0);
        let head = CaptionHead::new(&mut store, &CaptionConfig::default(), 64, 64).unwrap();
        {
            let mut g = Graph::new(&store);
            let f = g.constant(random(vec![64, 64], 1));
            let e = head.project(&mut g, f).unwrap();
            assert_eq!(g.dims(e).unwrap(), &[64, 32]);
        }
        for id in store.ids_in(Group::Projector) {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new(&store);
        let f = g.constant(random(vec![64, 64], 1));
        let e = head.project(&mut g, f).unwrap();
        assert!(g.value(e).unwrap().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn forced_logits_give_zero_loss() {
        let store = ParamStore::<f64>::new(0);
        let mut g = Graph::new(&store);
        let targets = [3usize, 1, 4];
        let mut l = Tensor::full(vec![3, 5], -1e4);
        for (i, &t) in targets.iter().enumerate() {
            l.data_mut()[i * 5 + t] = 1e4;
        }
        let logits = g.constant(l);
        let ce = sequence_cross_entropy(&mut g, logits, &targets).unwrap();
        assert_eq!(g.scalar(ce).unwrap(), 0.0);
    }

    #[test]
    fn uniform_decoder_gives_log_vocab() {
        let mut store = ParamStore::<f64>::new(0);
        let head = CaptionHead::new(&mut store, &CaptionConfig::default(), 64, 64).unwrap();
        for id in [head.lm_head.weight, head.lm_head.bias] {
            store.tensor_mut(id).data_mut().iter_mut().for_each(|x| *x = 0.0);
        }
        let mut g = Graph::new(&store);
        let f = g.constant(random(vec![64, 64], 2));
        let vis = head.project(&mut g, f).unwrap();
        let seq = TokenSequence::new(vec![1, 5, 9, 13, 2], 17).unwrap();
        let l = head.caption_loss(&mut g, vis, &seq).unwrap();
        assert!((g.scalar(l).unwrap() - (17f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn mean_not_sum_over_positions() {
        let store = ParamStore::<f64>::new(0);
        let mut g = Graph::new(&store);
        let base = random(vec![3, 6], 3);
        let targets = [0usize, 5, 2];
        let a = g.constant(base.clone());
        let la = sequence_cross_entropy(&mut g, a, &targets).unwrap();
        let mut doubled = base.data().to_vec();
        doubled.extend_from_slice(base.data());
        let b = g.constant(Tensor::new(vec![6, 6], doubled).unwrap());
        let t2: Vec<usize> = targets.iter().chain(&targets).copied().collect();
        let lb = sequence_cross_entropy(&mut g, b, &t2).unwrap();
        assert!((g.scalar(la).unwrap() - g.scalar(lb).unwrap()).abs() < 1e-14);
    }

    #[test]
    fn shift_invariance_and_nonnegativity() {
        let store = ParamStore::<f64>::new(0);
        let mut g = Graph::new(&store);
        let base = random(vec![4, 7], 4);
        let targets = [6usize, 0, 3, 3];
        let a = g.constant(base.clone());
        let la = sequence_cross_entropy(&mut g, a, &targets).unwrap();
        let shifted = Tensor::new(
            vec![4, 7],
            base.data().iter().enumerate().map(|(i, &x)| x + (i / 7) as f64 * 3.5).collect(),
        )
        .unwrap();
        let b = g.constant(shifted);
        let lb = sequence_cross_entropy(&mut g, b, &targets).unwrap();
        let (va, vb) = (g.scalar(la).unwrap(), g.scalar(lb).unwrap());
        assert!(va > 0.0);
        assert!((va - vb).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(TokenSequence::new(vec![1], 10), Err(Error::Contract(_))));
        assert!(matches!(TokenSequence::new(vec![1, 12], 10), Err(Error::Vocabulary(_))));
        let store = ParamStore::<f64>::new(0);
        let mut g = Graph::new(&store);
        let l = g.constant(Tensor::zeros(vec![2, 3]));
        assert!(sequence_cross_entropy(&mut g, l, &[]).is_err());
    }

    #[test]
    fn projection_and_loss_gradients() {
        let mut store = ParamStore::<f64>::new(9);
        let head = CaptionHead::new(&mut store, &tiny(), 6, 4).unwrap();
        let feats = random(vec![4, 6], 5);
        let seq = TokenSequence::new(vec![0, 4, 7, 1], 10).unwrap();
        let err = finite_diff_check(&store, &FiniteDiff::default().step(1e-6).coords(6), |g| {
            let f = g.constant(feats.clone());
            let vis = head.project(g, f)?;
            head.caption_loss(g, vis, &seq)
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
