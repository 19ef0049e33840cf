//! The standard two-layer attention-only transformer and its manual
//! backward pass.
//!
//! Residual streams are stored positions-by-rows (L x D). Per layer:
//!
//! ```text
//! Q = H Wq^T   K = H Wk^T   A = H Wv^T          (L x Dh)
//! S = Q K^T, causal row softmax T = softmax(S)  (L x L)
//! H' = H + (T A) Wo^T
//! ```
//!
//! There is no score scaling, normalization, or weight tying; a final linear
//! layer maps the last residual stream to vocabulary logits and the
//! cross-entropy loss reads only the final (query) position.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{masked_softmax, MaskMode, Matrix};
use crate::seeding::stream_rng;

const CHECKPOINT_MAGIC: &[u8; 4] = b"ICLT";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StdModelConfig {
    /// Residual stream dimension D.
    pub dim: usize,
    /// Head dimension (one head per layer).
    pub head_dim: usize,
    /// Vocabulary size N_T.
    pub vocab: usize,
    /// Block size N_P.
    pub block: usize,
    /// Standard deviation of the normal initialization.
    pub init_std: f64,
}

impl StdModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.head_dim == 0 || self.vocab == 0 || self.block == 0 {
            return Err(Error::Invalid("model dimensions must be positive".into()));
        }
        if !(self.init_std.is_finite() && self.init_std >= 0.0) {
            return Err(Error::Invalid("init_std must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayer {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StdModel {
    pub dim: usize,
    pub head_dim: usize,
    pub vocab: usize,
    pub block: usize,
    /// Token embeddings, one row per token.
    pub token_emb: Matrix,
    /// Positional embeddings, one row per position.
    pub pos_emb: Matrix,
    pub layers: Vec<AttnLayer>,
    /// Output projection, one row per vocabulary entry.
    pub w_out: Matrix,
}

impl StdModel {
    pub fn zeros(cfg: &StdModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layer = || AttnLayer {
            w_q: Matrix::zeros(cfg.head_dim, cfg.dim),
            w_k: Matrix::zeros(cfg.head_dim, cfg.dim),
            w_v: Matrix::zeros(cfg.head_dim, cfg.dim),
            w_o: Matrix::zeros(cfg.dim, cfg.head_dim),
        };
        Ok(StdModel {
            dim: cfg.dim,
            head_dim: cfg.head_dim,
            vocab: cfg.vocab,
            block: cfg.block,
            token_emb: Matrix::zeros(cfg.vocab, cfg.dim),
            pos_emb: Matrix::zeros(cfg.block, cfg.dim),
            layers: vec![layer(), layer()],
            w_out: Matrix::zeros(cfg.vocab, cfg.dim),
        })
    }

    /// i.i.d. normal initialization with the configured std.
    pub fn init(cfg: &StdModelConfig, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(cfg)?;
        let mut rng = stream_rng(seed, 0);
        for m in model.tensors_mut() {
            for v in m.data_mut() {
                *v = cfg.init_std * rng.sample::<f64, _>(StandardNormal);
            }
        }
        Ok(model)
    }

    /// Fixed tensor order shared with [`StdGradients`] and the optimizer.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.token_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([&l.w_q, &l.w_k, &l.w_v, &l.w_o]);
        }
        out.push(&self.w_out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.token_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.push(&mut l.w_q);
            out.push(&mut l.w_k);
            out.push(&mut l.w_v);
            out.push(&mut l.w_o);
        }
        out.push(&mut self.w_out);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    pub fn save<W: Write>(&self, out: &mut W) -> Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for dim in [self.dim, self.head_dim, self.vocab, self.block] {
            out.write_all(&(dim as u32).to_le_bytes())?;
        }
        for m in self.tensors() {
            for v in m.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn save_to(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.save(&mut f)
    }

    pub fn load<R: Read>(input: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let mut buf4 = [0u8; 4];
        input.read_exact(&mut buf4)?;
        let version = u32::from_le_bytes(buf4);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            input.read_exact(&mut buf4)?;
            *d = u32::from_le_bytes(buf4) as usize;
        }
        let cfg = StdModelConfig {
            dim: dims[0],
            head_dim: dims[1],
            vocab: dims[2],
            block: dims[3],
            init_std: 0.0,
        };
        let mut model = Self::zeros(&cfg)?;
        let mut buf8 = [0u8; 8];
        for m in model.tensors_mut() {
            for v in m.data_mut() {
                input.read_exact(&mut buf8)?;
                *v = f64::from_le_bytes(buf8);
            }
        }
        Ok(model)
    }

    pub fn load_from(path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::load(&mut f)
    }
}

#[derive(Debug, Clone)]
pub struct StdGradients {
    pub token_emb: Matrix,
    pub pos_emb: Matrix,
    pub layers: Vec<AttnLayer>,
    pub w_out: Matrix,
}

impl StdGradients {
    pub fn zeros_like(model: &StdModel) -> Self {
        let layer = || AttnLayer {
            w_q: Matrix::zeros(model.head_dim, model.dim),
            w_k: Matrix::zeros(model.head_dim, model.dim),
            w_v: Matrix::zeros(model.head_dim, model.dim),
            w_o: Matrix::zeros(model.dim, model.head_dim),
        };
        StdGradients {
            token_emb: Matrix::zeros(model.vocab, model.dim),
            pos_emb: Matrix::zeros(model.block, model.dim),
            layers: vec![layer(), layer()],
            w_out: Matrix::zeros(model.vocab, model.dim),
        }
    }

    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.token_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend([&l.w_q, &l.w_k, &l.w_v, &l.w_o]);
        }
        out.push(&self.w_out);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> = vec![&mut self.token_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.push(&mut l.w_q);
            out.push(&mut l.w_k);
            out.push(&mut l.w_v);
            out.push(&mut l.w_o);
        }
        out.push(&mut self.w_out);
        out
    }

    pub fn add_assign(&mut self, other: &StdGradients) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_scaled(b, 1.0);
        }
    }

    pub fn scale(&mut self, c: f64) {
        for m in self.tensors_mut() {
            m.scale(c);
        }
    }
}

/// Per-layer forward activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub h_in: Matrix,
    pub q: Matrix,
    pub k: Matrix,
    pub a_v: Matrix,
    pub t: Matrix,
    pub weighted: Matrix,
}

#[derive(Debug, Clone)]
pub struct StdCache {
    pub tokens: Vec<usize>,
    pub offset: usize,
    pub layers: Vec<LayerCache>,
    pub h_final: Matrix,
    /// Logits at every position (loss reads only the last row).
    pub logits: Matrix,
}

/// Forward pass for one sequence at a given block offset.
pub fn std_forward(tokens: &[usize], offset: usize, model: &StdModel) -> Result<StdCache> {
    let l = tokens.len();
    if l == 0 {
        return Err(Error::Invalid("empty sequence".into()));
    }
    if offset + l > model.block {
        return Err(Error::Invalid(format!(
            "sequence of length {l} at offset {offset} exceeds block {}",
            model.block
        )));
    }
    let mut h = Matrix::zeros(l, model.dim);
    for (i, &tok) in tokens.iter().enumerate() {
        if tok >= model.vocab {
            return Err(Error::Invalid(format!("token id {tok} out of vocabulary")));
        }
        let row = h.row_mut(i);
        for ((slot, &te), &pe) in row
            .iter_mut()
            .zip(model.token_emb.row(tok))
            .zip(model.pos_emb.row(offset + i))
        {
            *slot = te + pe;
        }
    }
    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let q = h.mul_bt(&layer.w_q);
        let k = h.mul_bt(&layer.w_k);
        let a_v = h.mul_bt(&layer.w_v);
        let s = q.mul_bt(&k);
        let t = masked_softmax(&s, MaskMode::CausalInclusiveSelf)?;
        let weighted = t.mul(&a_v);
        let out = weighted.mul_bt(&layer.w_o);
        let mut h_next = h.clone();
        h_next.add_scaled(&out, 1.0);
        layers.push(LayerCache {
            h_in: h,
            q,
            k,
            a_v,
            t,
            weighted,
        });
        h = h_next;
    }
    let logits = h.mul_bt(&model.w_out);
    Ok(StdCache {
        tokens: tokens.to_vec(),
        offset,
        layers,
        h_final: h,
        logits,
    })
}

/// Cross-entropy at the final position plus the softmax probabilities there.
pub fn std_loss_and_probs(cache: &StdCache, target: usize) -> (f64, Vec<f64>) {
    let logits = cache.logits.row(cache.logits.rows() - 1);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = logits.iter().map(|z| (z - max).exp()).sum();
    let lse = max + sum.ln();
    let probs: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    (lse - logits[target], probs)
}

pub fn std_loss(cache: &StdCache, target: usize) -> f64 {
    std_loss_and_probs(cache, target).0
}

fn softmax_rows_backward(t: &Matrix, dt: &Matrix) -> Matrix {
    let n = t.rows();
    let mut ds = Matrix::zeros(n, n);
    for i in 0..n {
        let t_row = t.row(i);
        let dt_row = dt.row(i);
        let dot: f64 = t_row.iter().zip(dt_row).map(|(a, b)| a * b).sum();
        let ds_row = ds.row_mut(i);
        for j in 0..n {
            ds_row[j] = t_row[j] * (dt_row[j] - dot);
        }
    }
    ds
}

/// Gradients of the final-position cross-entropy for one sequence.
pub fn std_backward(cache: &StdCache, model: &StdModel, target: usize) -> StdGradients {
    let mut grads = StdGradients::zeros_like(model);
    std_backward_into(cache, model, target, &mut grads);
    grads
}

/// Accumulating form of [`std_backward`]; the hot path for batch averaging.
pub fn std_backward_into(
    cache: &StdCache,
    model: &StdModel,
    target: usize,
    grads: &mut StdGradients,
) {
    let l = cache.tokens.len();
    let (_, probs) = std_loss_and_probs(cache, target);

    // d loss / d logits at the final position.
    let mut dlogit = probs;
    dlogit[target] -= 1.0;

    // w_out and the final residual stream.
    let h_last = cache.h_final.row(l - 1);
    let mut dh = Matrix::zeros(l, model.dim);
    {
        let dh_last = dh.row_mut(l - 1);
        for (t_idx, &dl) in dlogit.iter().enumerate() {
            if dl == 0.0 {
                continue;
            }
            let g_row = grads.w_out.row_mut(t_idx);
            for ((g, &h), (slot, &w)) in g_row
                .iter_mut()
                .zip(h_last)
                .zip(dh_last.iter_mut().zip(model.w_out.row(t_idx)))
            {
                *g += dl * h;
                *slot += dl * w;
            }
        }
    }

    for (layer_idx, layer) in model.layers.iter().enumerate().rev() {
        let cache_l = &cache.layers[layer_idx];
        let g_l = &mut grads.layers[layer_idx];
        // Attention branch: H' = H + weighted * Wo^T.
        g_l.w_o.add_scaled(&dh.mul_at(&cache_l.weighted), 1.0);
        let d_weighted = dh.mul(&layer.w_o);
        let d_t = d_weighted.mul_bt(&cache_l.a_v);
        let d_av = cache_l.t.mul_at(&d_weighted);
        let d_s = softmax_rows_backward(&cache_l.t, &d_t);
        let d_q = d_s.mul(&cache_l.k);
        let d_k = d_s.mul_at(&cache_l.q);
        g_l.w_q.add_scaled(&d_q.mul_at(&cache_l.h_in), 1.0);
        g_l.w_k.add_scaled(&d_k.mul_at(&cache_l.h_in), 1.0);
        g_l.w_v.add_scaled(&d_av.mul_at(&cache_l.h_in), 1.0);
        // dh flows through the residual plus all three projections.
        dh.add_scaled(&d_q.mul(&layer.w_q), 1.0);
        dh.add_scaled(&d_k.mul(&layer.w_k), 1.0);
        dh.add_scaled(&d_av.mul(&layer.w_v), 1.0);
    }

    // Embedding gradients.
    for (i, &tok) in cache.tokens.iter().enumerate() {
        let dh_row = dh.row(i).to_vec();
        for (g, &v) in grads.token_emb.row_mut(tok).iter_mut().zip(&dh_row) {
            *g += v;
        }
        for (g, &v) in grads
            .pos_emb
            .row_mut(cache.offset + i)
            .iter_mut()
            .zip(&dh_row)
        {
            *g += v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reference::task::gen_token_batch;

    fn tiny_cfg() -> StdModelConfig {
        StdModelConfig {
            dim: 8,
            head_dim: 8,
            vocab: 8,
            block: 12,
            init_std: 0.2,
        }
    }

    #[test]
    fn zero_attention_is_a_residual_passthrough() {
        let cfg = tiny_cfg();
        let mut model = StdModel::init(&cfg, 1).unwrap();
        for layer in &mut model.layers {
            for m in [
                &mut layer.w_q,
                &mut layer.w_k,
                &mut layer.w_v,
                &mut layer.w_o,
            ] {
                m.scale(0.0);
            }
        }
        let tokens = vec![1, 4, 2];
        let cache = std_forward(&tokens, 2, &model).unwrap();
        // H2 = H0, logits = H0 W_out^T.
        for (i, &tok) in tokens.iter().enumerate() {
            for (j, &h) in cache.h_final.row(i).iter().enumerate() {
                let expect = model.token_emb.at(tok, j) + model.pos_emb.at(2 + i, j);
                assert!((h - expect).abs() < 1e-15);
            }
        }
        let expect_logits = cache.h_final.mul_bt(&model.w_out);
        assert_eq!(cache.logits, expect_logits);
    }

    #[test]
    fn zero_scores_give_uniform_causal_attention() {
        let cfg = tiny_cfg();
        let mut model = StdModel::init(&cfg, 2).unwrap();
        for layer in &mut model.layers {
            layer.w_q.scale(0.0);
        }
        let cache = std_forward(&[0, 1, 2, 3], 0, &model).unwrap();
        for lc in &cache.layers {
            for i in 0..4 {
                for j in 0..4 {
                    let expect = if j <= i { 1.0 / (i as f64 + 1.0) } else { 0.0 };
                    assert!((lc.t.at(i, j) - expect).abs() < 1e-15);
                }
            }
        }
    }

    /// Naive re-implementation: per-position loops, no shared matmul code.
    fn naive_forward(tokens: &[usize], offset: usize, model: &StdModel) -> Vec<Vec<f64>> {
        let l = tokens.len();
        let d = model.dim;
        let dh = model.head_dim;
        let mut h: Vec<Vec<f64>> = (0..l)
            .map(|i| {
                (0..d)
                    .map(|j| model.token_emb.at(tokens[i], j) + model.pos_emb.at(offset + i, j))
                    .collect()
            })
            .collect();
        for layer in &model.layers {
            let proj = |w: &Matrix, v: &[f64]| -> Vec<f64> {
                (0..w.rows())
                    .map(|r| w.row(r).iter().zip(v).map(|(a, b)| a * b).sum())
                    .collect()
            };
            let q: Vec<Vec<f64>> = h.iter().map(|v| proj(&layer.w_q, v)).collect();
            let k: Vec<Vec<f64>> = h.iter().map(|v| proj(&layer.w_k, v)).collect();
            let a: Vec<Vec<f64>> = h.iter().map(|v| proj(&layer.w_v, v)).collect();
            let mut h_next = h.clone();
            for i in 0..l {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| q[i].iter().zip(&k[j]).map(|(x, y)| x * y).sum())
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut ctx = vec![0.0; dh];
                for (j, e) in exps.iter().enumerate() {
                    for (c, &av) in ctx.iter_mut().zip(&a[j]) {
                        *c += e / z * av;
                    }
                }
                let out = proj(&layer.w_o, &ctx);
                for (slot, &o) in h_next[i].iter_mut().zip(&out) {
                    *slot += o;
                }
            }
            h = h_next;
        }
        h.iter()
            .map(|v| {
                (0..model.vocab)
                    .map(|t| model.w_out.row(t).iter().zip(v).map(|(a, b)| a * b).sum())
                    .collect()
            })
            .collect()
    }

    #[test]
    fn forward_matches_naive_reimplementation() {
        let cfg = tiny_cfg();
        for seed in 0..3u64 {
            let model = StdModel::init(&cfg, seed).unwrap();
            let batch = gen_token_batch(cfg.vocab, cfg.block, 3, 2, seed).unwrap();
            for (seq, &off) in batch.sequences.iter().zip(&batch.offsets) {
                let cache = std_forward(seq, off, &model).unwrap();
                let naive = naive_forward(seq, off, &model);
                for (i, naive_row) in naive.iter().enumerate() {
                    for (j, &expect) in naive_row.iter().enumerate() {
                        assert!(
                            (cache.logits.at(i, j) - expect).abs() < 1e-10,
                            "logit mismatch at ({i},{j})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = tiny_cfg();
        let model = StdModel::init(&cfg, 7).unwrap();
        let batch = gen_token_batch(cfg.vocab, cfg.block, 3, 1, 3).unwrap();
        let seq = &batch.sequences[0];
        let off = batch.offsets[0];
        let target = batch.targets[0];
        let cache = std_forward(seq, off, &model).unwrap();
        let analytic = std_backward(&cache, &model, target);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for tensor_idx in 0..analytic.tensors().len() {
            let (rows, cols) = {
                let m = analytic.tensors()[tensor_idx];
                (m.rows(), m.cols())
            };
            for i in 0..rows {
                for j in 0..cols {
                    let mut plus = model.clone();
                    let mut minus = model.clone();
                    {
                        let m = &mut plus.tensors_mut()[tensor_idx];
                        let v = m.at(i, j);
                        m.set(i, j, v + h);
                    }
                    {
                        let m = &mut minus.tensors_mut()[tensor_idx];
                        let v = m.at(i, j);
                        m.set(i, j, v - h);
                    }
                    let lp = std_loss(&std_forward(seq, off, &plus).unwrap(), target);
                    let lm = std_loss(&std_forward(seq, off, &minus).unwrap(), target);
                    let numeric = (lp - lm) / (2.0 * h);
                    let got = analytic.tensors()[tensor_idx].at(i, j);
                    let scale = numeric.abs().max(got.abs()).max(1.0);
                    worst = worst.max((numeric - got).abs() / scale);
                }
            }
        }
        assert!(worst < 1e-4, "max relative gradient error {worst}");
    }

    #[test]
    fn checkpoint_roundtrip() {
        let model = StdModel::init(&tiny_cfg(), 4).unwrap();
        let mut buf = Vec::new();
        model.save(&mut buf).unwrap();
        let back = StdModel::load(&mut buf.as_slice()).unwrap();
        assert_eq!(model, back);
    }
}
