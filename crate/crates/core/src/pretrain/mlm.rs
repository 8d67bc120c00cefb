use ndarray::Array2;

use crate::encoder::TokenId;
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct MlmOutput {
    pub loss: f64,
    pub grad: Array2<f64>,
}

/// Mean cross-entropy of `targets` under row-wise softmax of `logits`.
///
/// One row per masked position. With no rows the loss is 0.
pub fn mlm_loss(logits: &Array2<f64>, targets: &[TokenId]) -> Result<MlmOutput> {
    if logits.nrows() != targets.len() {
        return Err(Error::LengthMismatch(logits.nrows(), targets.len()));
    }
    let mut grad = Array2::<f64>::zeros(logits.raw_dim());
    if targets.is_empty() {
        log::debug!("no masked positions in batch, mlm loss is 0");
        return Ok(MlmOutput { loss: 0.0, grad });
    }
    let v = logits.ncols();
    let inv = 1.0 / targets.len() as f64;
    let mut loss = 0.0;
    for (r, &target) in targets.iter().enumerate() {
        let target = target as usize;
        if target >= v {
            return Err(Error::TokenOutOfRange { id: target, vocab: v });
        }
        let row = logits.row(r);
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
        let lse = max + sum.ln();
        loss += (lse - row[target]) * inv;
        let mut g = grad.row_mut(r);
        for (k, x) in row.iter().enumerate() {
            g[k] = (x - lse).exp() * inv;
        }
        g[target] -= inv;
    }
    Ok(MlmOutput { loss, grad })
}
