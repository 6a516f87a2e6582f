//! Tape-free forward pass for scoring and generation: a single unpadded
//! encoder pass plus an incremental decoder whose key/value cache is an
//! arena of prefix nodes, so hypotheses that share a prefix share its
//! computation.

use super::bucket::{bucket_matrix, relative_position_bucket};
use super::params::*;
use super::{ModelConfig, ModelError, ModelParams};
use crate::numerics::kernels::{self, RMS_NORM_EPS};
use crate::numerics::{Array, Scalar};
use crate::tokenizer::PAD_ID;

fn linear<T: Scalar>(x: &[T], rows: usize, w: &Array<T>) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![T::zero(); rows * n];
    kernels::matmul(x, w.data(), &mut out, rows, k, n, false, false, false);
    out
}

fn rms_norm<T: Scalar>(x: &[T], gain: &Array<T>) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    kernels::rms_norm_rows(x, gain.data(), &mut out, T::lit(RMS_NORM_EPS));
    out
}

fn add_into<T: Scalar>(x: &mut [T], y: &[T]) {
    for (a, &b) in x.iter_mut().zip(y) {
        *a += b;
    }
}

fn feed_forward<T: Scalar>(x: &[T], rows: usize, wi: &Array<T>, wo: &Array<T>) -> Vec<T> {
    let mut h = linear(x, rows, wi);
    h.iter_mut().for_each(|v| *v = v.max(T::zero()));
    linear(&h, rows, wo)
}

fn embed<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, ids: &[u32]) -> Result<Vec<T>, ModelError> {
    let table = params.get(SHARED).data();
    let d = cfg.d_model;
    let mut x = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        let i = id as usize;
        if i >= cfg.vocab_size {
            return Err(ModelError::Batch(format!("token id {id} >= vocab size {}", cfg.vocab_size)));
        }
        x.extend_from_slice(&table[i * d..(i + 1) * d]);
    }
    Ok(x)
}

/// Attention of one query row against `keys`/`values` rows (each `d` wide,
/// fetched by index), head by head, with a per-key bias lookup.
#[allow(clippy::too_many_arguments)]
fn attend_row<'a, T: Scalar>(
    q: &[T],
    keys: &dyn Fn(usize) -> &'a [T],
    values: &dyn Fn(usize) -> &'a [T],
    n_keys: usize,
    bias: &dyn Fn(usize, usize) -> T,
    n_heads: usize,
    scale: T,
    scores: &mut Vec<T>,
    out: &mut [T],
) {
    let dh = q.len() / n_heads;
    for h in 0..n_heads {
        let qh = &q[h * dh..(h + 1) * dh];
        scores.clear();
        for j in 0..n_keys {
            let kh = &keys(j)[h * dh..(h + 1) * dh];
            let dot: T = qh.iter().zip(kh).map(|(&a, &b)| a * b).sum();
            scores.push(dot * scale + bias(j, h));
        }
        kernels::softmax_rows(scores, n_keys);
        let oh = &mut out[h * dh..(h + 1) * dh];
        oh.iter_mut().for_each(|v| *v = T::zero());
        for (j, &p) in scores.iter().enumerate() {
            let vh = &values(j)[h * dh..(h + 1) * dh];
            for (o, &v) in oh.iter_mut().zip(vh) {
                *o += p * v;
            }
        }
    }
}

/// Encoder output of one definition, projected to every decoder layer's
/// cross-attention keys and values.
#[derive(Debug, Clone)]
pub struct EncoderMemory<T> {
    pub len: usize,
    cross_keys: Vec<Vec<T>>,
    cross_values: Vec<Vec<T>>,
}

/// Runs the encoder over the real (unpadded) tokens of one input.
pub fn encode<T: Scalar>(params: &ModelParams<T>, cfg: &ModelConfig, ids: &[u32]) -> Result<EncoderMemory<T>, ModelError> {
    let (l, d, h) = (ids.len(), cfg.d_model, cfg.n_heads);
    if l == 0 || l > cfg.max_input_len {
        return Err(ModelError::Batch(format!("input length {l} outside 1..={}", cfg.max_input_len)));
    }
    let scale = T::lit(1.0 / (cfg.d_head() as f64).sqrt());
    let buckets = bucket_matrix(l, l, true, cfg.rel_pos_buckets, cfg.rel_pos_max_distance);
    let bias_table = params.get(ENC_REL_BIAS).data();
    let mut x = embed(params, cfg, ids)?;
    let mut scores = Vec::new();
    for i in 0..cfg.n_enc_layers {
        let n = rms_norm(&x, params.get(&enc_layer(i, "attn_norm")));
        let q = linear(&n, l, params.get(&enc_layer(i, "attn.q")));
        let k = linear(&n, l, params.get(&enc_layer(i, "attn.k")));
        let v = linear(&n, l, params.get(&enc_layer(i, "attn.v")));
        let mut ctx = vec![T::zero(); l * d];
        for row in 0..l {
            attend_row(
                &q[row * d..(row + 1) * d],
                &|j| &k[j * d..(j + 1) * d],
                &|j| &v[j * d..(j + 1) * d],
                l,
                &|j, hh| bias_table[buckets[row * l + j] * h + hh],
                h,
                scale,
                &mut scores,
                &mut ctx[row * d..(row + 1) * d],
            );
        }
        add_into(&mut x, &linear(&ctx, l, params.get(&enc_layer(i, "attn.o"))));
        let n = rms_norm(&x, params.get(&enc_layer(i, "ff_norm")));
        add_into(
            &mut x,
            &feed_forward(&n, l, params.get(&enc_layer(i, "ff.wi")), params.get(&enc_layer(i, "ff.wo"))),
        );
    }
    let memory = rms_norm(&x, params.get(ENC_FINAL_NORM));
    let mut cross_keys = Vec::with_capacity(cfg.n_dec_layers);
    let mut cross_values = Vec::with_capacity(cfg.n_dec_layers);
    for i in 0..cfg.n_dec_layers {
        cross_keys.push(linear(&memory, l, params.get(&dec_layer(i, "cross.k"))));
        cross_values.push(linear(&memory, l, params.get(&dec_layer(i, "cross.v"))));
    }
    Ok(EncoderMemory {
        len: l,
        cross_keys,
        cross_values,
    })
}

#[derive(Debug, Clone)]
struct PrefixNode<T> {
    parent: Option<usize>,
    depth: usize,
    /// `n_dec_layers * d_model` self-attention keys and values at this position
    keys: Vec<T>,
    values: Vec<T>,
}

/// Key/value cache over a tree of decoder prefixes. Node `n` stands for the
/// decoder input sequence ending at `n`; the root's input is the start token.
#[derive(Debug, Clone, Default)]
pub struct DecoderCache<T> {
    nodes: Vec<PrefixNode<T>>,
}

/// A node to extend: feed `token` at the position after `parent` (or the
/// start position when `parent` is `None`).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepRequest {
    pub parent: Option<usize>,
    pub token: u32,
}

impl<T: Scalar> DecoderCache<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn depth(&self, node: usize) -> usize {
        self.nodes[node].depth
    }

    /// Root request feeding the decoder start token.
    pub fn root() -> StepRequest {
        StepRequest {
            parent: None,
            token: PAD_ID,
        }
    }

    fn path(&self, node: usize) -> Vec<usize> {
        let mut p = vec![node];
        let mut cur = self.nodes[node].parent;
        while let Some(c) = cur {
            p.push(c);
            cur = self.nodes[c].parent;
        }
        p.reverse();
        p
    }

    /// Computes new nodes for `requests` (whose parents must already be in
    /// the cache) and returns their ids with next-token log-probabilities,
    /// row-major `[requests.len(), vocab_size]`.
    pub fn step(
        &mut self,
        params: &ModelParams<T>,
        cfg: &ModelConfig,
        memory: &EncoderMemory<T>,
        requests: &[StepRequest],
    ) -> Result<(Vec<usize>, Vec<T>), ModelError> {
        let (n, d, h, nl) = (requests.len(), cfg.d_model, cfg.n_heads, cfg.n_dec_layers);
        let first = self.nodes.len();
        for r in requests {
            let depth = match r.parent {
                Some(p) if p >= first => {
                    return Err(ModelError::Batch(format!("parent {p} is not computed yet")));
                }
                Some(p) => self.nodes[p].depth + 1,
                None => 0,
            };
            if depth >= cfg.max_label_len {
                return Err(ModelError::Batch(format!("decoder position {depth} >= max_label_len")));
            }
            self.nodes.push(PrefixNode {
                parent: r.parent,
                depth,
                keys: vec![T::zero(); nl * d],
                values: vec![T::zero(); nl * d],
            });
        }
        let ids: Vec<usize> = (first..first + n).collect();
        let paths: Vec<Vec<usize>> = ids.iter().map(|&i| self.path(i)).collect();
        let tokens: Vec<u32> = requests.iter().map(|r| r.token).collect();
        let scale = T::lit(1.0 / (cfg.d_head() as f64).sqrt());
        let self_bias = params.get(DEC_SELF_REL_BIAS).data();
        let cross_bias = params.get(DEC_CROSS_REL_BIAS).data();
        let (nb, maxd) = (cfg.rel_pos_buckets, cfg.rel_pos_max_distance);
        let mut x = embed(params, cfg, &tokens)?;
        let mut scores = Vec::new();
        for l in 0..nl {
            let nrm = rms_norm(&x, params.get(&dec_layer(l, "self_norm")));
            let q = linear(&nrm, n, params.get(&dec_layer(l, "self.q")));
            let k = linear(&nrm, n, params.get(&dec_layer(l, "self.k")));
            let v = linear(&nrm, n, params.get(&dec_layer(l, "self.v")));
            for (r, &id) in ids.iter().enumerate() {
                self.nodes[id].keys[l * d..(l + 1) * d].copy_from_slice(&k[r * d..(r + 1) * d]);
                self.nodes[id].values[l * d..(l + 1) * d].copy_from_slice(&v[r * d..(r + 1) * d]);
            }
            let mut ctx = vec![T::zero(); n * d];
            for (r, path) in paths.iter().enumerate() {
                let t = path.len() - 1;
                let nodes = &self.nodes;
                attend_row(
                    &q[r * d..(r + 1) * d],
                    &|j| &nodes[path[j]].keys[l * d..(l + 1) * d],
                    &|j| &nodes[path[j]].values[l * d..(l + 1) * d],
                    path.len(),
                    &|j, hh| self_bias[relative_position_bucket(j as i64 - t as i64, false, nb, maxd) * h + hh],
                    h,
                    scale,
                    &mut scores,
                    &mut ctx[r * d..(r + 1) * d],
                );
            }
            add_into(&mut x, &linear(&ctx, n, params.get(&dec_layer(l, "self.o"))));

            let nrm = rms_norm(&x, params.get(&dec_layer(l, "cross_norm")));
            let q = linear(&nrm, n, params.get(&dec_layer(l, "cross.q")));
            let (mk, mv) = (&memory.cross_keys[l], &memory.cross_values[l]);
            for (r, path) in paths.iter().enumerate() {
                let t = (path.len() - 1) as i64;
                attend_row(
                    &q[r * d..(r + 1) * d],
                    &|j| &mk[j * d..(j + 1) * d],
                    &|j| &mv[j * d..(j + 1) * d],
                    memory.len,
                    &|j, hh| cross_bias[relative_position_bucket(j as i64 - t, true, nb, maxd) * h + hh],
                    h,
                    scale,
                    &mut scores,
                    &mut ctx[r * d..(r + 1) * d],
                );
            }
            add_into(&mut x, &linear(&ctx, n, params.get(&dec_layer(l, "cross.o"))));

            let nrm = rms_norm(&x, params.get(&dec_layer(l, "ff_norm")));
            add_into(
                &mut x,
                &feed_forward(&nrm, n, params.get(&dec_layer(l, "ff.wi")), params.get(&dec_layer(l, "ff.wo"))),
            );
        }
        let y = rms_norm(&x, params.get(DEC_FINAL_NORM));
        let (head, transposed) = params.output_projection();
        let v = cfg.vocab_size;
        let mut logits = vec![T::zero(); n * v];
        kernels::matmul(&y, head.data(), &mut logits, n, d, v, false, transposed, false);
        kernels::log_softmax_rows(&mut logits, v);
        Ok((ids, logits))
    }
}

/// Teacher-forced per-position log-probabilities of `labels` (real tokens,
/// eos included) given `input` ids, via the incremental decoder.
pub fn label_log_probs<T: Scalar>(
    params: &ModelParams<T>,
    cfg: &ModelConfig,
    input: &[u32],
    labels: &[u32],
) -> Result<Vec<T>, ModelError> {
    let memory = encode(params, cfg, input)?;
    let mut cache = DecoderCache::new();
    let mut out = Vec::with_capacity(labels.len());
    let mut parent = None;
    let mut token = PAD_ID;
    for &label in labels {
        let (ids, lp) = cache.step(params, cfg, &memory, &[StepRequest { parent, token }])?;
        out.push(lp[label as usize]);
        parent = Some(ids[0]);
        token = label;
    }
    Ok(out)
}
