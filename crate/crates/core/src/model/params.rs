use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};
use crate::seed::{child_rng, streams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    /// 0 until filled in from a tokenizer.
    pub vocab_size: usize,
    /// Embedding rows produced per clip.
    pub clip_tokens: usize,
    /// Frame feature dimension; 0 until filled in from a corpus.
    pub clip_dim: usize,
    pub max_seq_len: usize,
    pub ffn_multiplier: f64,
    pub tie_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            vocab_size: 0,
            clip_tokens: 4,
            clip_dim: 0,
            max_seq_len: 640,
            ffn_multiplier: 4.0,
            tie_embeddings: true,
        }
    }
}

impl ModelConfig {
    pub fn ffn_dim(&self) -> usize {
        ((self.d_model as f64) * self.ffn_multiplier).round().max(1.0) as usize
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return fail(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.clip_tokens == 0 {
            return fail("clip_tokens must be at least 1".into());
        }
        if self.vocab_size < 4 {
            return fail(format!("vocab_size {} cannot hold the special tokens", self.vocab_size));
        }
        if self.clip_dim == 0 || self.max_seq_len == 0 || self.n_layers == 0 {
            return fail("clip_dim, max_seq_len and n_layers must be positive".into());
        }
        if !(self.ffn_multiplier > 0.0) {
            return fail("ffn_multiplier must be positive".into());
        }
        Ok(())
    }
}

/// A named tensor inside the flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Receives decoupled weight decay.
    pub decay: bool,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct LayerLayout {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub w_qkv: Range<usize>,
    pub b_qkv: Range<usize>,
    pub w_o: Range<usize>,
    pub b_o: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w_fc: Range<usize>,
    pub b_fc: Range<usize>,
    pub w_proj: Range<usize>,
    pub b_proj: Range<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct Layout {
    pub blocks: Vec<ParamBlock>,
    pub tok_emb: Range<usize>,
    pub pos_emb: Range<usize>,
    pub clip_w: Range<usize>,
    pub clip_b: Range<usize>,
    pub layers: Vec<LayerLayout>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub head: Option<Range<usize>>,
    pub total: usize,
}

impl Layout {
    pub fn new(c: &ModelConfig) -> Self {
        let d = c.d_model;
        let f = c.ffn_dim();
        let mut blocks = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>, decay: bool| -> Range<usize> {
            let b = ParamBlock {
                name,
                shape,
                offset,
                decay,
            };
            let r = b.range();
            offset = r.end;
            blocks.push(b);
            r
        };
        let tok_emb = add("tok_emb".into(), vec![c.vocab_size, d], true);
        let pos_emb = add("pos_emb".into(), vec![c.max_seq_len, d], true);
        let clip_w = add("clip_proj.w".into(), vec![c.clip_dim, c.clip_tokens * d], true);
        let clip_b = add("clip_proj.b".into(), vec![c.clip_tokens * d], false);
        let layers = (0..c.n_layers)
            .map(|l| LayerLayout {
                ln1_g: add(format!("layer{l}.ln1.g"), vec![d], false),
                ln1_b: add(format!("layer{l}.ln1.b"), vec![d], false),
                w_qkv: add(format!("layer{l}.attn.w_qkv"), vec![d, 3 * d], true),
                b_qkv: add(format!("layer{l}.attn.b_qkv"), vec![3 * d], false),
                w_o: add(format!("layer{l}.attn.w_o"), vec![d, d], true),
                b_o: add(format!("layer{l}.attn.b_o"), vec![d], false),
                ln2_g: add(format!("layer{l}.ln2.g"), vec![d], false),
                ln2_b: add(format!("layer{l}.ln2.b"), vec![d], false),
                w_fc: add(format!("layer{l}.ffn.w_fc"), vec![d, f], true),
                b_fc: add(format!("layer{l}.ffn.b_fc"), vec![f], false),
                w_proj: add(format!("layer{l}.ffn.w_proj"), vec![f, d], true),
                b_proj: add(format!("layer{l}.ffn.b_proj"), vec![d], false),
            })
            .collect();
        let lnf_g = add("lnf.g".into(), vec![d], false);
        let lnf_b = add("lnf.b".into(), vec![d], false);
        let head = (!c.tie_embeddings).then(|| add("head".into(), vec![d, c.vocab_size], true));
        let total = offset;
        Layout {
            blocks,
            tok_emb,
            pos_emb,
            clip_w,
            clip_b,
            layers,
            lnf_g,
            lnf_b,
            head,
            total,
        }
    }

    /// Name of the block holding flat index `i`.
    pub fn block_name(&self, i: usize) -> &str {
        self.blocks
            .iter()
            .find(|b| b.range().contains(&i))
            .map_or("?", |b| b.name.as_str())
    }
}

/// All trainable tensors of the model in one flat vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub data: Vec<T>,
    pub(crate) layout: Layout,
}

impl<T: Scalar> ModelParams<T> {
    /// GPT-style init: N(0, 0.02) matrices, residual projections scaled by
    /// 1/sqrt(2·layers), unit norm gains, zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut data = vec![T::zero(); layout.total];
        let mut rng = child_rng(seed, streams::INIT, 0);
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut fill = |r: &Range<usize>, s: f64, data: &mut [T]| {
            for v in &mut data[r.clone()] {
                *v = T::of(s * rng.sample::<f64, _>(StandardNormal));
            }
        };
        fill(&layout.tok_emb, std, &mut data);
        fill(&layout.pos_emb, std, &mut data);
        fill(&layout.clip_w, std, &mut data);
        for l in &layout.layers {
            fill(&l.w_qkv, std, &mut data);
            fill(&l.w_o, resid_std, &mut data);
            fill(&l.w_fc, std, &mut data);
            fill(&l.w_proj, resid_std, &mut data);
            for r in [&l.ln1_g, &l.ln2_g] {
                data[r.clone()].iter_mut().for_each(|v| *v = T::one());
            }
        }
        data[layout.lnf_g.clone()].iter_mut().for_each(|v| *v = T::one());
        if let Some(h) = &layout.head {
            fill(h, std, &mut data);
        }
        Ok(Self { config, data, layout })
    }

    /// Wrap an existing flat vector; its length must match the config.
    pub fn from_data(config: ModelConfig, data: Vec<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        if data.len() != layout.total {
            return Err(Error::config(format!(
                "parameter vector has {} entries, config needs {}",
                data.len(),
                layout.total
            )));
        }
        Ok(Self { config, data, layout })
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.layout.blocks
    }

    pub fn block(&self, name: &str) -> Option<&[T]> {
        self.layout
            .blocks
            .iter()
            .find(|b| b.name == name)
            .map(|b| &self.data[b.range()])
    }

    pub fn block_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.layout.blocks.iter().find(|b| b.name == name)?.range();
        Some(&mut self.data[r])
    }

    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    pub(crate) fn slice(&self, r: &Range<usize>) -> &[T] {
        &self.data[r.clone()]
    }

    /// Convert element type (e.g. train in f32, inspect in f64).
    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
            layout: self.layout.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            vocab_size: 10,
            clip_tokens: 2,
            clip_dim: 4,
            max_seq_len: 16,
            ffn_multiplier: 2.0,
            tie_embeddings: false,
        }
    }

    #[test]
    fn layout_is_contiguous_and_complete() {
        let l = Layout::new(&cfg());
        let mut next = 0;
        for b in &l.blocks {
            assert_eq!(b.offset, next);
            next = b.range().end;
        }
        assert_eq!(next, l.total);
        assert!(l.head.is_some());
        assert_eq!(l.block_name(l.layers[1].w_fc.start), "layer1.ffn.w_fc");
    }

    #[test]
    fn config_validation() {
        let mut c = cfg();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.clip_tokens = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_finite() {
        let a = ModelParams::<f32>::init(cfg(), 1).unwrap();
        let b = ModelParams::<f32>::init(cfg(), 1).unwrap();
        let c = ModelParams::<f32>::init(cfg(), 2).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.all_finite());
        assert!(a.block("lnf.g").unwrap().iter().all(|&v| v == 1.0));
    }
}
