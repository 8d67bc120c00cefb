//! Compact pre-norm transformer encoder with hand-written reverse-mode
//! gradients, all in `f64`.
//!
//! Parameters live in one flat vector. Their order is fixed by [`Layout`]:
//!
//! ```text
//! tok_emb [V,d]  pos_emb [L,d]
//! per layer l: l.ln1.gain [d] l.ln1.bias [d]
//!              l.attn.wq [d,d] l.attn.bq [d] l.attn.wk [d,d] l.attn.bk [d]
//!              l.attn.wv [d,d] l.attn.bv [d] l.attn.wo [d,d] l.attn.bo [d]
//!              l.ln2.gain [d] l.ln2.bias [d]
//!              l.ffn.w1 [d,f] l.ffn.b1 [f] l.ffn.w2 [f,d] l.ffn.b2 [d]
//! lnf.gain [d]  lnf.bias [d]  mlm.bias [V]
//! ```
//!
//! Matrices are row-major and multiply from the right (`x W`). MLM logits use
//! the token embedding table as a tied output projection.

mod checkpoint;
mod gradcheck;
mod model;
mod vocab;

pub use checkpoint::Checkpoint;
pub use gradcheck::{gradient_check, GradCheckReport, GroupError, REL_FLOOR};
pub use model::{EncoderOutput, IdBatch};
pub use vocab::*;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ff_dim: usize,
    pub max_len: usize,
    /// Filled from the vocabulary when the encoder is built.
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            dim: 64,
            layers: 2,
            heads: 4,
            ff_dim: 256,
            max_len: 128,
            vocab_size: 0,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("dim", self.dim),
            ("layers", self.layers),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("max_len", self.max_len),
            ("vocab_size", self.vocab_size),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("encoder {name} must be at least 1")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    /// Whether AdamW applies weight decay to this group.
    pub decay: bool,
}

impl ParamGroup {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct LayerGroups {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Parameter groups in storage order, with indices of the named groups.
#[derive(Debug, Clone)]
pub struct Layout {
    pub groups: Vec<ParamGroup>,
    pub total: usize,
    pub(crate) tok: usize,
    pub(crate) pos: usize,
    pub(crate) layers: Vec<LayerGroups>,
    pub(crate) lnf_g: usize,
    pub(crate) lnf_b: usize,
    pub(crate) mlm_b: usize,
}

impl Layout {
    pub fn new(c: &EncoderConfig) -> Self {
        let mut groups: Vec<ParamGroup> = Vec::new();
        let mut offset = 0;
        let mut add = |name: String, shape: Vec<usize>, decay: bool| {
            let g = ParamGroup {
                name,
                shape,
                offset,
                decay,
            };
            offset += g.len();
            groups.push(g);
            groups.len() - 1
        };
        let (d, f) = (c.dim, c.ff_dim);
        let tok = add("tok_emb".into(), vec![c.vocab_size, d], true);
        let pos = add("pos_emb".into(), vec![c.max_len, d], true);
        let mut layers = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let p = |s: &str| format!("{l}.{s}");
            layers.push(LayerGroups {
                ln1_g: add(p("ln1.gain"), vec![d], false),
                ln1_b: add(p("ln1.bias"), vec![d], false),
                wq: add(p("attn.wq"), vec![d, d], true),
                bq: add(p("attn.bq"), vec![d], false),
                wk: add(p("attn.wk"), vec![d, d], true),
                bk: add(p("attn.bk"), vec![d], false),
                wv: add(p("attn.wv"), vec![d, d], true),
                bv: add(p("attn.bv"), vec![d], false),
                wo: add(p("attn.wo"), vec![d, d], true),
                bo: add(p("attn.bo"), vec![d], false),
                ln2_g: add(p("ln2.gain"), vec![d], false),
                ln2_b: add(p("ln2.bias"), vec![d], false),
                w1: add(p("ffn.w1"), vec![d, f], true),
                b1: add(p("ffn.b1"), vec![f], false),
                w2: add(p("ffn.w2"), vec![f, d], true),
                b2: add(p("ffn.b2"), vec![d], false),
            });
        }
        let lnf_g = add("lnf.gain".into(), vec![d], false);
        let lnf_b = add("lnf.bias".into(), vec![d], false);
        let mlm_b = add("mlm.bias".into(), vec![c.vocab_size], false);
        Layout {
            groups,
            total: offset,
            tok,
            pos,
            layers,
            lnf_g,
            lnf_b,
            mlm_b,
        }
    }
}

impl Layout {
    /// Per-parameter weight-decay flags.
    pub fn decay_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.total];
        for g in &self.groups {
            mask[g.range()].iter_mut().for_each(|m| *m = g.decay);
        }
        mask
    }
}

/// Flat gradient buffer matching an encoder's [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub data: Vec<f64>,
}

impl Gradients {
    pub fn zeros(layout: &Layout) -> Self {
        Gradients {
            data: vec![0.0; layout.total],
        }
    }

    pub fn clear(&mut self) {
        self.data.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|g| *g *= s);
    }
}

pub(crate) fn view1<'a>(data: &'a [f64], g: &ParamGroup) -> ArrayView1<'a, f64> {
    ArrayView1::from(&data[g.range()])
}

pub(crate) fn view2<'a>(data: &'a [f64], g: &ParamGroup) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((g.shape[0], g.shape[1]), &data[g.range()]).expect("layout shape")
}

pub(crate) fn view1_mut<'a>(data: &'a mut [f64], g: &ParamGroup) -> ArrayViewMut1<'a, f64> {
    ArrayViewMut1::from(&mut data[g.range()])
}

pub(crate) fn view2_mut<'a>(data: &'a mut [f64], g: &ParamGroup) -> ArrayViewMut2<'a, f64> {
    ArrayViewMut2::from_shape((g.shape[0], g.shape[1]), &mut data[g.range()]).expect("layout shape")
}

#[derive(Debug, Clone)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub vocab: Vocab,
    pub params: Vec<f64>,
    pub(crate) layout: Layout,
}

impl Encoder {
    /// Fresh encoder. Embeddings are drawn from N(0, 0.5²), projection
    /// matrices from N(0, 1/fan_in) with the residual-output projections
    /// further scaled by 1/sqrt(2·layers); gains start at 1, biases at 0.
    pub fn new(mut config: EncoderConfig, vocab: Vocab) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = substream(config.seed, Purpose::Init);
        let residual_scale = 1.0 / ((2 * config.layers) as f64).sqrt();
        for (gi, g) in layout.groups.iter().enumerate() {
            let name = g.name.as_str();
            let std = if gi == layout.tok || gi == layout.pos {
                0.5
            } else if g.shape.len() == 2 {
                let base = 1.0 / (g.shape[0] as f64).sqrt();
                if name.ends_with("attn.wo") || name.ends_with("ffn.w2") {
                    base * residual_scale
                } else {
                    base
                }
            } else if name.ends_with("gain") {
                params[g.range()].iter_mut().for_each(|p| *p = 1.0);
                continue;
            } else {
                continue;
            };
            fill_normal(&mut params[g.range()], std, &mut rng);
        }
        Ok(Encoder {
            config,
            vocab,
            params,
            layout,
        })
    }

    /// Rebuilds an encoder around existing parameters.
    pub fn from_parts(mut config: EncoderConfig, vocab: Vocab, params: Vec<f64>) -> Result<Self> {
        config.vocab_size = vocab.len();
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(Error::Shape(format!(
                "{} parameters for a layout of {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Encoder {
            config,
            vocab,
            params,
            layout,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.layout.total
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients::zeros(&self.layout)
    }

    pub fn dim(&self) -> usize {
        self.config.dim
    }

    /// SHA-256 over the little-endian parameter bytes.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }
}

fn fill_normal(out: &mut [f64], std: f64, rng: &mut impl Rng) {
    let normal = Normal::new(0.0, std).expect("positive std");
    for v in out {
        *v = normal.sample(rng);
    }
}
