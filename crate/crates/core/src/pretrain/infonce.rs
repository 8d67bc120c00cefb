use ndarray::{Array1, Array2, Axis};

use super::batch::ContrastiveSet;
use super::{DenominatorMode, NegativeScope};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct InfoNceOutput {
    pub loss: f64,
    /// Gradient with respect to the input rows.
    pub grad: Array2<f64>,
    /// Number of (anchor, positive) terms.
    pub terms: usize,
}

fn normalize(emb: &Array2<f64>) -> (Array2<f64>, Array1<f64>) {
    let norms = emb.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let unit = emb / &norms.view().insert_axis(Axis(1));
    (unit, norms)
}

/// Cosine similarity matrix of the rows.
pub fn cosine_matrix(emb: &Array2<f64>) -> Array2<f64> {
    let (u, _) = normalize(emb);
    u.dot(&u.t())
}

/// Mean negative log-likelihood of each positive against its anchor's
/// negatives, with cosine similarity scaled by `1/tau`.
///
/// Row `t` of `emb` is token `t` of `set`. Anchors without positives add no
/// terms. In literal-self mode an anchor with no negatives has nothing but
/// itself in the denominator and is rejected.
pub fn info_nce(
    emb: &Array2<f64>,
    set: &ContrastiveSet,
    tau: f64,
    mode: DenominatorMode,
) -> Result<InfoNceOutput> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if emb.nrows() != set.len() {
        return Err(Error::LengthMismatch(emb.nrows(), set.len()));
    }
    let n = set.len();
    let (unit, norms) = normalize(emb);
    let cos = unit.dot(&unit.t());

    let mut terms = 0usize;
    for t in 0..n {
        terms += set.positives(t).count();
    }
    if terms == 0 {
        return Err(Error::NoPositivePairs);
    }
    let inv_p = 1.0 / terms as f64;

    // d loss / d cos[t][j]
    let mut g = Array2::<f64>::zeros((n, n));
    let mut loss = 0.0;
    let mut negatives = Vec::new();
    let mut logits = Vec::new();
    for t in 0..n {
        negatives.clear();
        for j in set.negatives(t) {
            if set.scope == NegativeScope::DifferentStories && set.story[j] == set.story[t] {
                return Err(Error::NegativeScope(format!(
                    "tokens {t} and {j} share story {}",
                    set.story[t]
                )));
            }
            negatives.push(j);
        }
        for p in set.positives(t) {
            if mode == DenominatorMode::LiteralSelf && negatives.is_empty() {
                return Err(Error::EmptyDenominator);
            }
            // Denominator entries: negatives first, then the extra element.
            logits.clear();
            logits.extend(negatives.iter().map(|&j| cos[[t, j]] / tau));
            let extra = match mode {
                DenominatorMode::IncludePositive => cos[[t, p]] / tau,
                DenominatorMode::LiteralSelf => 1.0 / tau,
            };
            logits.push(extra);
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = logits.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            loss += (lse - cos[[t, p]] / tau) * inv_p;

            let scale = inv_p / tau;
            for (k, &j) in negatives.iter().enumerate() {
                g[[t, j]] += scale * (logits[k] - lse).exp();
            }
            g[[t, p]] -= scale;
            if mode == DenominatorMode::IncludePositive {
                g[[t, p]] += scale * (extra - lse).exp();
            }
        }
    }

    // cos = u_t . u_j, u = e / |e|
    let du = (&g + &g.t()).dot(&unit);
    let mut grad = Array2::<f64>::zeros(emb.raw_dim());
    for t in 0..n {
        let u = unit.row(t);
        let d = du.row(t);
        let radial = d.dot(&u);
        let mut row = grad.row_mut(t);
        row.assign(&((&d - &(&u * radial)) / norms[t]));
    }
    Ok(InfoNceOutput { loss, grad, terms })
}
