use std::collections::HashMap;

use rand::Rng;

use super::bucket::bucket_matrix;
use super::params::*;
use super::{ModelConfig, ModelError, ModelParams};
use crate::numerics::kernels::MASK_NEG;
use crate::numerics::{Array, Graph, Scalar, Var};
use crate::tokenizer::{TokenSeq, PAD_ID};

/// Rectangular batch in the layout the forward pass consumes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeqBatch {
    pub batch_size: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    /// `[B, src_len]`
    pub input_ids: Vec<u32>,
    pub input_mask: Vec<u8>,
    /// `[B, tgt_len]`, labels shifted right
    pub decoder_input: Vec<u32>,
    pub decoder_mask: Vec<u8>,
    /// `[B, tgt_len]`, pad where there is no target
    pub labels: Vec<u32>,
}

/// Teacher forcing input: `[start, l0, l1, ...]` with the mask shifted along.
pub fn shift_right(labels: &TokenSeq, start_id: u32) -> TokenSeq {
    let n = labels.ids.len();
    let mut ids = Vec::with_capacity(n);
    let mut mask = Vec::with_capacity(n);
    if n > 0 {
        ids.push(start_id);
        mask.push(1);
        ids.extend_from_slice(&labels.ids[..n - 1]);
        mask.extend_from_slice(&labels.mask[..n - 1]);
    }
    TokenSeq { ids, mask }
}

impl SeqBatch {
    /// Stacks `(input, labels)` pairs; all inputs and all labels must share
    /// their respective lengths.
    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a TokenSeq, &'a TokenSeq)>) -> Result<Self, ModelError> {
        let mut b = SeqBatch {
            batch_size: 0,
            src_len: 0,
            tgt_len: 0,
            input_ids: Vec::new(),
            input_mask: Vec::new(),
            decoder_input: Vec::new(),
            decoder_mask: Vec::new(),
            labels: Vec::new(),
        };
        for (input, labels) in pairs {
            if b.batch_size == 0 {
                b.src_len = input.ids.len();
                b.tgt_len = labels.ids.len();
            } else if input.ids.len() != b.src_len || labels.ids.len() != b.tgt_len {
                return Err(ModelError::Batch("ragged sequences in batch".into()));
            }
            if labels.real_len() == 0 {
                return Err(ModelError::Batch("labels without any real token".into()));
            }
            let dec = shift_right(labels, PAD_ID);
            b.input_ids.extend_from_slice(&input.ids);
            b.input_mask.extend_from_slice(&input.mask);
            b.decoder_input.extend_from_slice(&dec.ids);
            b.decoder_mask.extend_from_slice(&dec.mask);
            b.labels.extend(labels.ids.iter().zip(&labels.mask).map(|(&i, &m)| if m == 1 { i } else { PAD_ID }));
            b.batch_size += 1;
        }
        if b.batch_size == 0 {
            return Err(ModelError::Batch("empty batch".into()));
        }
        Ok(b)
    }
}

/// Graph handles of every parameter.
pub struct BoundParams {
    vars: HashMap<String, Var>,
}

impl BoundParams {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ModelParams<T>) -> Self {
        let vars = params
            .tensors()
            .iter()
            .map(|(name, arr)| (name.clone(), g.param(name, arr.clone())))
            .collect();
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn output_projection(&self) -> (Var, bool) {
        match self.vars.get(LM_HEAD) {
            Some(&v) => (v, false),
            None => (self.vars[SHARED], true),
        }
    }
}

struct Ctx<'a, 'r, T> {
    g: &'a mut Graph<T>,
    p: &'a BoundParams,
    cfg: &'a ModelConfig,
    dropout_rng: Option<&'r mut dyn rand::RngCore>,
}

impl<T: Scalar> Ctx<'_, '_, T> {
    fn dropout(&mut self, x: Var) -> Result<Var, ModelError> {
        let rate = self.cfg.dropout as f64;
        let Some(rng) = self.dropout_rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let shape = self.g.shape(x).to_vec();
        let n = shape.iter().product();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let m = self.g.constant(Array::from_vec(&shape, mask)?);
        Ok(self.g.mul(x, m)?)
    }

    /// `[H, q_len, k_len]` bias gathered from a `[buckets, H]` table.
    fn position_bias(&mut self, table: &str, q_len: usize, k_len: usize, bidirectional: bool) -> Result<Var, ModelError> {
        let ids = bucket_matrix(q_len, k_len, bidirectional, self.cfg.rel_pos_buckets, self.cfg.rel_pos_max_distance);
        let t = self.p.get(table);
        let rows = self.g.gather(t, &ids)?;
        let rows = self.g.reshape(rows, &[q_len, k_len, self.cfg.n_heads])?;
        Ok(self.g.permute(rows, &[2, 0, 1])?)
    }

    fn split_heads(&mut self, x: Var, b: usize, len: usize) -> Result<Var, ModelError> {
        let (h, dh) = (self.cfg.n_heads, self.cfg.d_head());
        let x = self.g.reshape(x, &[b, len, h, dh])?;
        let x = self.g.permute(x, &[0, 2, 1, 3])?;
        Ok(self.g.reshape(x, &[b * h, len, dh])?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &mut self,
        prefix: &str,
        xq: Var,
        xkv: Var,
        b: usize,
        lq: usize,
        lk: usize,
        bias: Var,
        mask: Var,
    ) -> Result<Var, ModelError> {
        let (h, dh) = (self.cfg.n_heads, self.cfg.d_head());
        let wq = self.p.get(&format!("{prefix}.q"));
        let wk = self.p.get(&format!("{prefix}.k"));
        let wv = self.p.get(&format!("{prefix}.v"));
        let wo = self.p.get(&format!("{prefix}.o"));
        let q = self.g.matmul(xq, wq, false)?;
        let k = self.g.matmul(xkv, wk, false)?;
        let v = self.g.matmul(xkv, wv, false)?;
        let q = self.split_heads(q, b, lq)?;
        let k = self.split_heads(k, b, lk)?;
        let v = self.split_heads(v, b, lk)?;
        let scores = self.g.bmm(q, k, true)?;
        let scores = self.g.scale(scores, T::lit(1.0 / (dh as f64).sqrt()));
        let scores = self.g.reshape(scores, &[b, h, lq, lk])?;
        let scores = self.g.add(scores, bias)?;
        let scores = self.g.add(scores, mask)?;
        let probs = self.g.softmax(scores);
        let probs = self.dropout(probs)?;
        let probs = self.g.reshape(probs, &[b * h, lq, lk])?;
        let ctx = self.g.bmm(probs, v, false)?;
        let ctx = self.g.reshape(ctx, &[b, h, lq, dh])?;
        let ctx = self.g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = self.g.reshape(ctx, &[b * lq, self.cfg.d_model])?;
        Ok(self.g.matmul(ctx, wo, false)?)
    }

    fn feed_forward(&mut self, x: Var, wi: &str, wo: &str) -> Result<Var, ModelError> {
        let h = self.g.matmul(x, self.p.get(wi), false)?;
        let h = self.g.relu(h);
        let h = self.dropout(h)?;
        Ok(self.g.matmul(h, self.p.get(wo), false)?)
    }

    fn residual(&mut self, x: Var, update: Var) -> Result<Var, ModelError> {
        let update = self.dropout(update)?;
        Ok(self.g.add(x, update)?)
    }
}

/// Additive `[B, H, lq, lk]` mask: `MASK_NEG` where the key is padding or
/// (when `causal`) lies after the query.
fn attention_mask<T: Scalar>(key_mask: &[u8], b: usize, h: usize, lq: usize, lk: usize, causal: bool) -> Array<T> {
    let neg = T::lit(MASK_NEG);
    let mut data = Vec::with_capacity(b * h * lq * lk);
    for bi in 0..b {
        let km = &key_mask[bi * lk..(bi + 1) * lk];
        for _ in 0..h {
            for q in 0..lq {
                for (k, &m) in km.iter().enumerate() {
                    let blocked = m == 0 || (causal && k > q);
                    data.push(if blocked { neg } else { T::zero() });
                }
            }
        }
    }
    Array::from_vec(&[b, h, lq, lk], data).expect("mask shape")
}

fn check_ids(ids: &[u32], vocab: usize) -> Result<Vec<usize>, ModelError> {
    ids.iter()
        .map(|&i| {
            if (i as usize) < vocab {
                Ok(i as usize)
            } else {
                Err(ModelError::Batch(format!("token id {i} >= vocab size {vocab}")))
            }
        })
        .collect()
}

/// Records the full encoder-decoder on `g` and returns `[B, tgt_len, V]`
/// logits. Dropout is applied only when `dropout_rng` is given and the
/// configured rate is positive.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &SeqBatch,
    dropout_rng: Option<&mut dyn rand::RngCore>,
) -> Result<Var, ModelError> {
    let (b, ls, lt, h) = (batch.batch_size, batch.src_len, batch.tgt_len, cfg.n_heads);
    if ls == 0 || lt == 0 || ls > cfg.max_input_len || lt > cfg.max_label_len {
        return Err(ModelError::Batch(format!(
            "lengths src {ls} / tgt {lt} outside 1..={} / 1..={}",
            cfg.max_input_len, cfg.max_label_len
        )));
    }
    if batch.input_ids.len() != b * ls
        || batch.input_mask.len() != b * ls
        || batch.decoder_input.len() != b * lt
        || batch.decoder_mask.len() != b * lt
    {
        return Err(ModelError::Batch("array lengths disagree with batch dimensions".into()));
    }
    let src_ids = check_ids(&batch.input_ids, cfg.vocab_size)?;
    let dec_ids = check_ids(&batch.decoder_input, cfg.vocab_size)?;
    let mut c = Ctx { g, p, cfg, dropout_rng };

    // encoder
    let enc_bias = c.position_bias(ENC_REL_BIAS, ls, ls, true)?;
    let enc_mask = c.g.constant(attention_mask(&batch.input_mask, b, h, ls, ls, false));
    let shared = c.p.get(SHARED);
    let mut x = c.g.gather(shared, &src_ids)?;
    x = c.dropout(x)?;
    for i in 0..cfg.n_enc_layers {
        let n = c.g.rms_norm(x, c.p.get(&enc_layer(i, "attn_norm")))?;
        let a = c.attention(&enc_layer(i, "attn"), n, n, b, ls, ls, enc_bias, enc_mask)?;
        x = c.residual(x, a)?;
        let n = c.g.rms_norm(x, c.p.get(&enc_layer(i, "ff_norm")))?;
        let f = c.feed_forward(n, &enc_layer(i, "ff.wi"), &enc_layer(i, "ff.wo"))?;
        x = c.residual(x, f)?;
    }
    let memory = c.g.rms_norm(x, c.p.get(ENC_FINAL_NORM))?;
    let memory = c.dropout(memory)?;

    // decoder
    let self_bias = c.position_bias(DEC_SELF_REL_BIAS, lt, lt, false)?;
    let cross_bias = c.position_bias(DEC_CROSS_REL_BIAS, lt, ls, true)?;
    let self_mask = c.g.constant(attention_mask(&batch.decoder_mask, b, h, lt, lt, true));
    let cross_mask = c.g.constant(attention_mask(&batch.input_mask, b, h, lt, ls, false));
    let mut y = c.g.gather(shared, &dec_ids)?;
    y = c.dropout(y)?;
    for i in 0..cfg.n_dec_layers {
        let n = c.g.rms_norm(y, c.p.get(&dec_layer(i, "self_norm")))?;
        let a = c.attention(&dec_layer(i, "self"), n, n, b, lt, lt, self_bias, self_mask)?;
        y = c.residual(y, a)?;
        let n = c.g.rms_norm(y, c.p.get(&dec_layer(i, "cross_norm")))?;
        let a = c.attention(&dec_layer(i, "cross"), n, memory, b, lt, ls, cross_bias, cross_mask)?;
        y = c.residual(y, a)?;
        let n = c.g.rms_norm(y, c.p.get(&dec_layer(i, "ff_norm")))?;
        let f = c.feed_forward(n, &dec_layer(i, "ff.wi"), &dec_layer(i, "ff.wo"))?;
        y = c.residual(y, f)?;
    }
    let y = c.g.rms_norm(y, c.p.get(DEC_FINAL_NORM))?;
    let y = c.dropout(y)?;
    let (head, transposed) = c.p.output_projection();
    let logits = c.g.matmul(y, head, transposed)?;
    Ok(c.g.reshape(logits, &[b, lt, cfg.vocab_size])?)
}

/// Mean cross entropy of the batch's labels, ignoring padding.
pub fn loss<T: Scalar>(
    g: &mut Graph<T>,
    p: &BoundParams,
    cfg: &ModelConfig,
    batch: &SeqBatch,
    dropout_rng: Option<&mut dyn rand::RngCore>,
) -> Result<Var, ModelError> {
    let logits = forward(g, p, cfg, batch, dropout_rng)?;
    let labels: Vec<usize> = batch.labels.iter().map(|&l| l as usize).collect();
    Ok(g.cross_entropy(logits, &labels, PAD_ID as usize)?)
}
