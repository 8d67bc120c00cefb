use ndarray::{Array2, Array3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{Encoder, EncoderConfig, IdBatch, TokenId, Vocab, BOS, PAD, RESERVED};
use crate::error::{Error, Result};
use crate::rng::{substream, Purpose};

const STEP: f64 = 1e-5;
/// Floor on the error denominator. Some groups have an identically zero
/// gradient (the attention key bias shifts every score in a row equally), and
/// for those both sides are pure rounding noise.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupError {
    pub name: String,
    /// `max |analytic - numeric|` over the group divided by the largest
    /// magnitude of either gradient in the group (at least [`REL_FLOOR`]).
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub params: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub groups: Vec<GroupError>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Compares analytic gradients with central differences (step 1e-5) for the
/// random linear loss `Σ R∘emb + Σ S∘mlm_logits(emb)` on a two-sequence batch
/// with padding. Every parameter is perturbed.
pub fn gradient_check(config: &EncoderConfig, tolerance: f64) -> Result<GradCheckReport> {
    let extra = config.vocab_size.saturating_sub(super::PROMPT_WORDS.len() + RESERVED.len()).max(4);
    let words: Vec<String> = (0..extra).map(|i| format!("w{i}")).collect();
    let vocab = Vocab::build(words.iter().map(String::as_str), 1);
    let mut enc = Encoder::new(config.clone(), vocab)?;
    if enc.num_params() > 10_000 {
        return Err(Error::Config(format!(
            "gradient check needs at most 10k parameters, config has {}",
            enc.num_params()
        )));
    }

    let mut rng = substream(config.seed, Purpose::Validation);
    let v = enc.config.vocab_size as TokenId;
    let len = enc.config.max_len.min(6).max(2);
    let mut first = vec![BOS];
    first.extend((1..len).map(|_| rng.gen_range(RESERVED.len() as TokenId..v)));
    let mut second = vec![BOS];
    second.extend((1..len / 2).map(|_| rng.gen_range(RESERVED.len() as TokenId..v)));
    second.resize(len, PAD);
    let batch = IdBatch::from_sequences(&[first, second]);

    // Weights are scaled so the loss is O(1); finite-difference noise grows
    // with |loss|.
    let emb_n = (2 * len * enc.config.dim) as f64;
    let logit_n = (2 * len * enc.config.vocab_size) as f64;
    let emb_w = Array3::from_shape_fn((2, len, enc.config.dim), |_| {
        rng.gen_range(-1.0..1.0) / emb_n.sqrt()
    });
    let logit_w = Array2::from_shape_fn((2 * len, enc.config.vocab_size), |_| {
        rng.gen_range(-1.0..1.0) / logit_n.sqrt()
    });

    let loss = |e: &Encoder| -> Result<f64> {
        let out = e.forward(&batch)?;
        let rows = out
            .embeddings
            .to_shape((2 * len, e.config.dim))
            .expect("contiguous")
            .to_owned();
        let logits = e.mlm_logits_rows(&rows);
        Ok((&out.embeddings * &emb_w).sum() + (&logits * &logit_w).sum())
    };

    let out = enc.forward(&batch)?;
    let rows = out
        .embeddings
        .to_shape((2 * len, enc.config.dim))
        .expect("contiguous")
        .to_owned();
    let mut grads = enc.zero_grads();
    let d_rows = enc.mlm_backward_rows(&rows, &logit_w, &mut grads)?;
    let d_emb = &emb_w
        + &d_rows
            .into_shape_with_order((2, len, enc.config.dim))
            .expect("contiguous");
    enc.backward(&out, &d_emb, &mut grads)?;

    let groups = enc.layout.groups.clone();
    let mut report = Vec::with_capacity(groups.len());
    for g in &groups {
        let mut max_abs: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for i in g.range() {
            let orig = enc.params[i];
            enc.params[i] = orig + STEP;
            let up = loss(&enc)?;
            enc.params[i] = orig - STEP;
            let down = loss(&enc)?;
            enc.params[i] = orig;
            let numeric = (up - down) / (2.0 * STEP);
            let analytic = grads.data[i];
            max_abs = max_abs.max((analytic - numeric).abs());
            scale = scale.max(analytic.abs()).max(numeric.abs());
        }
        report.push(GroupError {
            name: g.name.clone(),
            max_rel_error: max_abs / scale.max(REL_FLOOR),
            max_abs_error: max_abs,
            params: g.len(),
        });
    }
    let max_rel_error = report.iter().map(|g| g.max_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport {
        groups: report,
        max_rel_error,
        tolerance,
        passed: max_rel_error < tolerance,
    })
}
