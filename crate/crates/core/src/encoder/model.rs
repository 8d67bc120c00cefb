use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array1, Array2, Array3, ArrayView2, Axis, Zip};

use super::{view1, view1_mut, view2, view2_mut, Encoder, Gradients, TokenId, PAD};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.044_715;

/// Token ids padded to a common length with `[PAD]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdBatch {
    pub ids: ndarray::Array2<TokenId>,
}

impl IdBatch {
    pub fn from_sequences(seqs: &[Vec<TokenId>]) -> Self {
        let len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = ndarray::Array2::from_elem((seqs.len(), len), PAD);
        for (b, seq) in seqs.iter().enumerate() {
            for (t, &id) in seq.iter().enumerate() {
                ids[[b, t]] = id;
            }
        }
        IdBatch { ids }
    }

    pub fn batch_size(&self) -> usize {
        self.ids.nrows()
    }

    pub fn seq_len(&self) -> usize {
        self.ids.ncols()
    }
}

struct LnCache {
    xhat: Array2<f64>,
    rstd: Array1<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Attention weights per (sequence, head), row-major over that pair.
    probs: Vec<Array2<f64>>,
    o: Array2<f64>,
    ln2: LnCache,
    c: Array2<f64>,
    u: Array2<f64>,
    g: Array2<f64>,
}

/// Final-layer embeddings plus the activations needed by [`Encoder::backward`].
pub struct EncoderOutput {
    /// Shape `(batch, seq_len, dim)`.
    pub embeddings: Array3<f64>,
    ids: Array2<TokenId>,
    layers: Vec<LayerCache>,
    final_ln: LnCache,
}

impl EncoderOutput {
    pub fn ids(&self) -> &Array2<TokenId> {
        &self.ids
    }
}

fn layer_norm(x: &Array2<f64>, gain: ndarray::ArrayView1<f64>, bias: ndarray::ArrayView1<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut rstd = Array1::zeros(x.nrows());
    for (mut row, r) in xhat.rows_mut().into_iter().zip(rstd.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *r = 1.0 / (var + LN_EPS).sqrt();
        let rs = *r;
        row.mapv_inplace(|v| v * rs);
    }
    let y = &xhat * &gain + bias;
    (y, LnCache { xhat, rstd })
}

/// Returns d(input) and accumulates gain/bias gradients.
fn layer_norm_backward(
    dy: &Array2<f64>,
    cache: &LnCache,
    gain: ndarray::ArrayView1<f64>,
    mut dgain: ndarray::ArrayViewMut1<f64>,
    mut dbias: ndarray::ArrayViewMut1<f64>,
) -> Array2<f64> {
    dgain += &(dy * &cache.xhat).sum_axis(Axis(0));
    dbias += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let dxhat = dy * &gain;
    let mut dx = Array2::zeros(dy.raw_dim());
    for (((mut out, dxh), xh), &rs) in dx
        .rows_mut()
        .into_iter()
        .zip(dxhat.rows())
        .zip(cache.xhat.rows())
        .zip(cache.rstd.iter())
    {
        let m1 = dxh.sum() / d;
        let m2 = dxh.dot(&xh) / d;
        Zip::from(&mut out)
            .and(&dxh)
            .and(&xh)
            .for_each(|o, &g, &x| *o = rs * (g - m1 - x * m2));
    }
    dx
}

fn gelu(u: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * u * (1.0 + (k * (u + GELU_C * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (u + GELU_C * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * u * u)
}

fn linear(x: &Array2<f64>, w: ArrayView2<f64>, b: ndarray::ArrayView1<f64>) -> Array2<f64> {
    x.dot(&w) + b
}

impl Encoder {
    /// Runs the encoder over a padded batch. `[PAD]` keys are excluded from
    /// attention, so appending padding leaves the other positions unchanged.
    pub fn forward(&self, batch: &IdBatch) -> Result<EncoderOutput> {
        let (bsz, len) = batch.ids.dim();
        let c = &self.config;
        if len > c.max_len {
            return Err(Error::SequenceTooLong { len, max: c.max_len });
        }
        if let Some(&id) = batch.ids.iter().find(|&&id| id as usize >= c.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: id as usize,
                vocab: c.vocab_size,
            });
        }
        let valid: Vec<bool> = batch.ids.iter().map(|&id| id != PAD).collect();
        for b in 0..bsz {
            if !valid[b * len..(b + 1) * len].iter().any(|&v| v) {
                return Err(Error::Shape(format!("sequence {b} is all padding")));
            }
        }

        let p = &self.params;
        let lay = &self.layout;
        let groups = &lay.groups;
        let (d, heads, dh) = (c.dim, c.heads, c.head_dim());
        let n = bsz * len;

        let tok = view2(p, &groups[lay.tok]);
        let pos = view2(p, &groups[lay.pos]);
        let mut x = Array2::zeros((n, d));
        for b in 0..bsz {
            for t in 0..len {
                let id = batch.ids[[b, t]] as usize;
                let mut row = x.row_mut(b * len + t);
                row.assign(&tok.row(id));
                row += &pos.row(t);
            }
        }

        let scale = 1.0 / (dh as f64).sqrt();
        let mut caches = Vec::with_capacity(c.layers);
        for lg in &lay.layers {
            let (a, ln1) = layer_norm(&x, view1(p, &groups[lg.ln1_g]), view1(p, &groups[lg.ln1_b]));
            let q = linear(&a, view2(p, &groups[lg.wq]), view1(p, &groups[lg.bq]));
            let k = linear(&a, view2(p, &groups[lg.wk]), view1(p, &groups[lg.bk]));
            let v = linear(&a, view2(p, &groups[lg.wv]), view1(p, &groups[lg.bv]));
            let mut o = Array2::zeros((n, d));
            let mut probs = Vec::with_capacity(bsz * heads);
            for b in 0..bsz {
                let rows = b * len..(b + 1) * len;
                let keep = &valid[rows.clone()];
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let qh = q.slice(s![rows.clone(), cols.clone()]);
                    let kh = k.slice(s![rows.clone(), cols.clone()]);
                    let vh = v.slice(s![rows.clone(), cols.clone()]);
                    let mut sc = qh.dot(&kh.t());
                    for mut row in sc.rows_mut() {
                        let mut max = f64::NEG_INFINITY;
                        for (j, s) in row.iter_mut().enumerate() {
                            *s *= scale;
                            if keep[j] && *s > max {
                                max = *s;
                            }
                        }
                        let mut sum = 0.0;
                        for (j, s) in row.iter_mut().enumerate() {
                            *s = if keep[j] { (*s - max).exp() } else { 0.0 };
                            sum += *s;
                        }
                        row.mapv_inplace(|s| s / sum);
                    }
                    o.slice_mut(s![rows.clone(), cols]).assign(&sc.dot(&vh));
                    probs.push(sc);
                }
            }
            x = x + linear(&o, view2(p, &groups[lg.wo]), view1(p, &groups[lg.bo]));
            let (cn, ln2) = layer_norm(&x, view1(p, &groups[lg.ln2_g]), view1(p, &groups[lg.ln2_b]));
            let u = linear(&cn, view2(p, &groups[lg.w1]), view1(p, &groups[lg.b1]));
            let g = u.mapv(gelu);
            x = x + linear(&g, view2(p, &groups[lg.w2]), view1(p, &groups[lg.b2]));
            caches.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                probs,
                o,
                ln2,
                c: cn,
                u,
                g,
            });
        }
        let (out, final_ln) = layer_norm(&x, view1(p, &groups[lay.lnf_g]), view1(p, &groups[lay.lnf_b]));
        let embeddings = out.into_shape_with_order((bsz, len, d)).expect("contiguous");
        Ok(EncoderOutput {
            embeddings,
            ids: batch.ids.clone(),
            layers: caches,
            final_ln,
        })
    }

    /// Vocabulary logits for every position: `emb · tok_embᵀ + mlm.bias`.
    pub fn mlm_logits(&self, embeddings: &Array3<f64>) -> Array3<f64> {
        let (b, l, d) = embeddings.dim();
        let flat = embeddings
            .to_shape((b * l, d))
            .expect("contiguous")
            .to_owned();
        let logits = self.mlm_logits_rows(&flat);
        let v = logits.ncols();
        logits.into_shape_with_order((b, l, v)).expect("contiguous")
    }

    /// Logits for a stack of embedding rows `(n, dim)`.
    pub fn mlm_logits_rows(&self, rows: &Array2<f64>) -> Array2<f64> {
        let groups = &self.layout.groups;
        let tok = view2(&self.params, &groups[self.layout.tok]);
        rows.dot(&tok.t()) + view1(&self.params, &groups[self.layout.mlm_b])
    }

    /// Backpropagates logit gradients for rows given to
    /// [`mlm_logits_rows`](Self::mlm_logits_rows); returns d(rows).
    pub fn mlm_backward_rows(
        &self,
        rows: &Array2<f64>,
        dlogits: &Array2<f64>,
        grads: &mut Gradients,
    ) -> Result<Array2<f64>> {
        let groups = &self.layout.groups;
        if dlogits.nrows() != rows.nrows() || dlogits.ncols() != self.config.vocab_size {
            return Err(Error::Shape(format!(
                "logit gradient {:?} for {} rows and vocab {}",
                dlogits.dim(),
                rows.nrows(),
                self.config.vocab_size
            )));
        }
        let tok = view2(&self.params, &groups[self.layout.tok]);
        let drows = dlogits.dot(&tok);
        let mut dtok = view2_mut(&mut grads.data, &groups[self.layout.tok]);
        general_mat_mul(1.0, &dlogits.t(), rows, 1.0, &mut dtok);
        let mut db = view1_mut(&mut grads.data, &groups[self.layout.mlm_b]);
        db += &dlogits.sum_axis(Axis(0));
        Ok(drows)
    }

    /// Full-tensor counterpart of [`mlm_backward_rows`](Self::mlm_backward_rows).
    pub fn mlm_backward(
        &self,
        embeddings: &Array3<f64>,
        dlogits: &Array3<f64>,
        grads: &mut Gradients,
    ) -> Result<Array3<f64>> {
        let (b, l, d) = embeddings.dim();
        if dlogits.dim().0 != b || dlogits.dim().1 != l {
            return Err(Error::Shape(format!(
                "logit gradient {:?} for embeddings {:?}",
                dlogits.dim(),
                embeddings.dim()
            )));
        }
        let rows = embeddings.to_shape((b * l, d)).expect("contiguous").to_owned();
        let dl = dlogits
            .to_shape((b * l, dlogits.dim().2))
            .expect("contiguous")
            .to_owned();
        let drows = self.mlm_backward_rows(&rows, &dl, grads)?;
        Ok(drows.into_shape_with_order((b, l, d)).expect("contiguous"))
    }

    /// Accumulates into `grads` the parameter gradient of a loss whose
    /// gradient with respect to `out.embeddings` is `d_embeddings`.
    pub fn backward(
        &self,
        out: &EncoderOutput,
        d_embeddings: &Array3<f64>,
        grads: &mut Gradients,
    ) -> Result<()> {
        if d_embeddings.dim() != out.embeddings.dim() {
            return Err(Error::Shape(format!(
                "embedding gradient {:?} for output {:?}",
                d_embeddings.dim(),
                out.embeddings.dim()
            )));
        }
        if grads.data.len() != self.layout.total {
            return Err(Error::Shape(format!(
                "gradient buffer of {} for {} parameters",
                grads.data.len(),
                self.layout.total
            )));
        }
        let p = &self.params;
        let lay = &self.layout;
        let groups = &lay.groups;
        let c = &self.config;
        let (bsz, len, d) = out.embeddings.dim();
        let (heads, dh) = (c.heads, c.head_dim());
        let n = bsz * len;
        let scale = 1.0 / (dh as f64).sqrt();
        let gd = &mut grads.data;

        let dy = d_embeddings.to_shape((n, d)).expect("contiguous").to_owned();
        let mut dx = {
            let (gg, gb) = split_two(gd, &groups[lay.lnf_g], &groups[lay.lnf_b]);
            layer_norm_backward(&dy, &out.final_ln, view1(p, &groups[lay.lnf_g]), gg, gb)
        };

        for (lg, cache) in lay.layers.iter().zip(&out.layers).rev() {
            // Feedforward branch.
            accumulate_linear(gd, groups, lg.w2, lg.b2, &cache.g, &dx);
            let dg = dx.dot(&view2(p, &groups[lg.w2]).t());
            let du = Zip::from(&dg)
                .and(&cache.u)
                .map_collect(|&g, &u| g * gelu_grad(u));
            accumulate_linear(gd, groups, lg.w1, lg.b1, &cache.c, &du);
            let dc = du.dot(&view2(p, &groups[lg.w1]).t());
            let dln2 = {
                let (gg, gb) = split_two(gd, &groups[lg.ln2_g], &groups[lg.ln2_b]);
                layer_norm_backward(&dc, &cache.ln2, view1(p, &groups[lg.ln2_g]), gg, gb)
            };
            dx += &dln2;

            // Attention branch.
            accumulate_linear(gd, groups, lg.wo, lg.bo, &cache.o, &dx);
            let dout = dx.dot(&view2(p, &groups[lg.wo]).t());
            let mut dq = Array2::zeros((n, d));
            let mut dk = Array2::zeros((n, d));
            let mut dv = Array2::zeros((n, d));
            for b in 0..bsz {
                let rows = b * len..(b + 1) * len;
                for h in 0..heads {
                    let cols = h * dh..(h + 1) * dh;
                    let probs = &cache.probs[b * heads + h];
                    let doh = dout.slice(s![rows.clone(), cols.clone()]);
                    let qh = cache.q.slice(s![rows.clone(), cols.clone()]);
                    let kh = cache.k.slice(s![rows.clone(), cols.clone()]);
                    let vh = cache.v.slice(s![rows.clone(), cols.clone()]);
                    let dprobs = doh.dot(&vh.t());
                    dv.slice_mut(s![rows.clone(), cols.clone()])
                        .assign(&probs.t().dot(&doh));
                    let mut dscores = Array2::zeros(probs.raw_dim());
                    for ((mut ds, pr), dp) in dscores
                        .rows_mut()
                        .into_iter()
                        .zip(probs.rows())
                        .zip(dprobs.rows())
                    {
                        let dot = pr.dot(&dp);
                        Zip::from(&mut ds)
                            .and(&pr)
                            .and(&dp)
                            .for_each(|s, &pv, &g| *s = pv * (g - dot) * scale);
                    }
                    dq.slice_mut(s![rows.clone(), cols.clone()])
                        .assign(&dscores.dot(&kh));
                    dk.slice_mut(s![rows.clone(), cols])
                        .assign(&dscores.t().dot(&qh));
                }
            }
            accumulate_linear(gd, groups, lg.wq, lg.bq, &cache.a, &dq);
            accumulate_linear(gd, groups, lg.wk, lg.bk, &cache.a, &dk);
            accumulate_linear(gd, groups, lg.wv, lg.bv, &cache.a, &dv);
            let da = dq.dot(&view2(p, &groups[lg.wq]).t())
                + dk.dot(&view2(p, &groups[lg.wk]).t())
                + dv.dot(&view2(p, &groups[lg.wv]).t());
            let dln1 = {
                let (gg, gb) = split_two(gd, &groups[lg.ln1_g], &groups[lg.ln1_b]);
                layer_norm_backward(&da, &cache.ln1, view1(p, &groups[lg.ln1_g]), gg, gb)
            };
            dx += &dln1;
        }

        let d_cols = d;
        for b in 0..bsz {
            for t in 0..len {
                let r = b * len + t;
                let id = out.ids[[b, t]] as usize;
                let row = dx.row(r);
                let tok_off = groups[lay.tok].offset + id * d_cols;
                let pos_off = groups[lay.pos].offset + t * d_cols;
                for j in 0..d_cols {
                    gd[tok_off + j] += row[j];
                    gd[pos_off + j] += row[j];
                }
            }
        }
        Ok(())
    }
}

/// Gradients of `y = x W + b` given `dy`, accumulated into W and b.
fn accumulate_linear(
    gd: &mut [f64],
    groups: &[super::ParamGroup],
    w: usize,
    b: usize,
    x: &Array2<f64>,
    dy: &Array2<f64>,
) {
    {
        let mut dw = view2_mut(gd, &groups[w]);
        general_mat_mul(1.0, &x.t(), dy, 1.0, &mut dw);
    }
    let mut db = view1_mut(gd, &groups[b]);
    db += &dy.sum_axis(Axis(0));
}

/// Mutable views of two adjacent, non-overlapping groups.
fn split_two<'a>(
    gd: &'a mut [f64],
    first: &super::ParamGroup,
    second: &super::ParamGroup,
) -> (ndarray::ArrayViewMut1<'a, f64>, ndarray::ArrayViewMut1<'a, f64>) {
    assert!(first.offset + first.len() <= second.offset);
    let (lo, hi) = gd.split_at_mut(second.offset);
    (
        ndarray::ArrayViewMut1::from(&mut lo[first.range()]),
        ndarray::ArrayViewMut1::from(&mut hi[..second.len()]),
    )
}

#[cfg(test)]
mod tests {
    use super::super::{EncoderConfig, Vocab, BOS};
    use super::*;

    fn encoder(seed: u64) -> Encoder {
        let words: Vec<String> = (0..6).map(|i| format!("w{i}")).collect();
        let vocab = Vocab::build(words.iter().chain(words.iter()).map(String::as_str), 2);
        Encoder::new(
            EncoderConfig {
                dim: 8,
                layers: 2,
                heads: 2,
                ff_dim: 16,
                max_len: 12,
                vocab_size: 0,
                seed,
            },
            vocab,
        )
        .unwrap()
    }

    #[test]
    fn single_bos_has_expected_shape() {
        let enc = encoder(0);
        let out = enc.forward(&IdBatch::from_sequences(&[vec![BOS]])).unwrap();
        assert_eq!(out.embeddings.dim(), (1, 1, 8));
        assert!(out.embeddings.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn duplicated_rows_match() {
        let enc = encoder(0);
        let seq = vec![BOS, 17, 18, 19];
        let out = enc
            .forward(&IdBatch::from_sequences(&[seq.clone(), seq]))
            .unwrap();
        let (a, b) = (out.embeddings.index_axis(Axis(0), 0), out.embeddings.index_axis(Axis(0), 1));
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn padding_does_not_leak() {
        let enc = encoder(3);
        let seq = vec![BOS, 17, 18, 19, 20];
        let mut padded = seq.clone();
        padded.extend([PAD, PAD, PAD]);
        let a = enc.forward(&IdBatch::from_sequences(std::slice::from_ref(&seq))).unwrap();
        let b = enc
            .forward(&IdBatch::from_sequences(&[padded, seq]))
            .unwrap();
        for t in 0..5 {
            for j in 0..8 {
                assert!((a.embeddings[[0, t, j]] - b.embeddings[[0, t, j]]).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_out_of_range_ids() {
        let enc = encoder(0);
        let bad = enc.config.vocab_size as TokenId;
        assert!(matches!(
            enc.forward(&IdBatch::from_sequences(&[vec![BOS, bad]])),
            Err(Error::TokenOutOfRange { .. })
        ));
    }

    #[test]
    fn rejects_overlong_sequences() {
        let enc = encoder(0);
        let seq = vec![BOS; 13];
        assert!(matches!(
            enc.forward(&IdBatch::from_sequences(&[seq])),
            Err(Error::SequenceTooLong { .. })
        ));
    }

    #[test]
    fn logits_normalize_and_vary() {
        let enc = encoder(1);
        let out = enc
            .forward(&IdBatch::from_sequences(&[vec![BOS, 17, 18]]))
            .unwrap();
        let logits = enc.mlm_logits(&out.embeddings);
        assert_eq!(logits.dim(), (1, 3, enc.config.vocab_size));
        for row in logits.index_axis(Axis(0), 0).rows() {
            assert!(row.iter().all(|v| v.is_finite()));
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let total: f64 = row.iter().map(|v| (v - max).exp() / z).sum();
            assert!((total - 1.0).abs() < 1e-9);
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / row.len() as f64;
            assert!(var > 0.0);
        }
    }

    #[test]
    fn zero_output_gradient_gives_zero_parameter_gradient() {
        let enc = encoder(2);
        let out = enc
            .forward(&IdBatch::from_sequences(&[vec![BOS, 17, 18, 19]]))
            .unwrap();
        let mut grads = enc.zero_grads();
        enc.backward(&out, &Array3::zeros(out.embeddings.raw_dim()), &mut grads)
            .unwrap();
        assert!(grads.data.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn backward_is_deterministic() {
        let enc = encoder(2);
        let batch = IdBatch::from_sequences(&[vec![BOS, 17, 18, 19], vec![BOS, 20]]);
        let run = || {
            let out = enc.forward(&batch).unwrap();
            let dy = out.embeddings.mapv(|v| v.sin());
            let mut g = enc.zero_grads();
            enc.backward(&out, &dy, &mut g).unwrap();
            g
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn backward_rejects_shape_mismatch() {
        let enc = encoder(2);
        let out = enc
            .forward(&IdBatch::from_sequences(&[vec![BOS, 17]]))
            .unwrap();
        let mut g = enc.zero_grads();
        assert!(matches!(
            enc.backward(&out, &Array3::zeros((1, 3, 8)), &mut g),
            Err(Error::Shape(_))
        ));
    }
}
