//! Tape-free forward pass with a key/value cache, used for generation,
//! perplexity scoring and logit inspection.
//!
//! Sequences are right-aligned in the positional table: a sequence whose
//! complete length is `n` occupies positions `max_len - n..max_len`. For
//! in-context episodes this puts the query and its output at the same
//! positions whatever the number of demonstrations, so the copy relation
//! between them is learned once for every K.

use super::params::{BackboneParams, LoraAdapters};
use crate::numkernel::kernels::{self, gemm, gemm_view, View};
use crate::numkernel::{Rng, Tensor};
use crate::tokenizer::TokenSeq;
use crate::{Error, Result};

/// Incremental decoding state over one sequence.
pub struct Session<'a> {
    params: &'a BackboneParams,
    wq: Vec<Tensor>,
    wv: Vec<Tensor>,
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
    len: usize,
    span: usize,
    offset: usize,
}

impl<'a> Session<'a> {
    /// A session for a sequence that will reach `span` tokens in total.
    pub fn new(params: &'a BackboneParams, adapters: Option<&LoraAdapters>, span: usize) -> Result<Self> {
        let max_len = params.config.max_len;
        if span > max_len {
            return Err(Error::Capacity { len: span, capacity: max_len });
        }
        let (wq, wv) = match adapters {
            Some(ad) => {
                if ad.layers.len() != params.layers.len() {
                    return Err(Error::shape(format!(
                        "{} adapter layers for {} backbone layers",
                        ad.layers.len(),
                        params.layers.len()
                    )));
                }
                params
                    .layers
                    .iter()
                    .zip(&ad.layers)
                    .map(|(l, a)| (ad.merged(&l.wq, &a.q_a, &a.q_b), ad.merged(&l.wv, &a.v_a, &a.v_b)))
                    .unzip()
            }
            None => params.layers.iter().map(|l| (l.wq.clone(), l.wv.clone())).unzip(),
        };
        let n = params.layers.len();
        Ok(Session {
            params,
            wq,
            wv,
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            len: 0,
            span,
            offset: max_len - span,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `tokens` and returns the logits of the last `keep` of them.
    pub fn extend(&mut self, tokens: &[u32], keep: usize) -> Result<Tensor> {
        let hidden = self.extend_hidden(tokens, keep)?;
        let cfg = &self.params.config;
        let rows = hidden.len() / cfg.d_model;
        let mut logits = vec![0.0; rows * cfg.vocab];
        gemm(
            rows,
            cfg.d_model,
            cfg.vocab,
            &hidden,
            false,
            self.params.embed.data(),
            true,
            &mut logits,
            1.0,
            0.0,
        );
        Tensor::new(vec![rows, cfg.vocab], logits)
    }

    fn extend_hidden(&mut self, tokens: &[u32], keep: usize) -> Result<Vec<f64>> {
        let p = self.params;
        let cfg = &p.config;
        let (d, n) = (cfg.d_model, tokens.len());
        let keep = keep.min(n);
        if n == 0 {
            return Ok(Vec::new());
        }
        if self.len + n > self.span {
            return Err(Error::Capacity {
                len: self.len + n,
                capacity: self.span,
            });
        }
        let start = self.len;
        let mut x = vec![0.0; n * d];
        for (i, &tok) in tokens.iter().enumerate() {
            if tok as usize >= cfg.vocab {
                return Err(Error::Vocabulary {
                    token: tok,
                    vocab: cfg.vocab,
                });
            }
            let (e, ps) = (p.embed.row(tok as usize), p.pos.row(self.offset + start + i));
            for j in 0..d {
                x[i * d + j] = e[j] + ps[j];
            }
        }
        let total = start + n;
        let (heads, dh) = (cfg.heads, cfg.head_dim());
        let scale = 1.0 / (dh as f64).sqrt();
        let last = p.layers.len() - 1;
        let mut rows = n;
        for (li, layer) in p.layers.iter().enumerate() {
            let h = layernorm_rows(&x, layer.ln1_g.data(), layer.ln1_b.data(), d);
            // Keys and values for every new row extend the cache.
            let mut k_new = vec![0.0; rows * d];
            let mut v_new = vec![0.0; rows * d];
            gemm(rows, d, d, &h, false, layer.wk.data(), false, &mut k_new, 1.0, 0.0);
            gemm(rows, d, d, &h, false, self.wv[li].data(), false, &mut v_new, 1.0, 0.0);
            self.keys[li].extend_from_slice(&k_new);
            self.values[li].extend_from_slice(&v_new);

            // The last layer only needs outputs for the rows we return.
            let (q_rows, q_start) = if li == last { (keep, n - keep) } else { (rows, 0) };
            let hq = &h[q_start * d..(q_start + q_rows) * d];
            let mut q = vec![0.0; q_rows * d];
            gemm(q_rows, d, d, hq, false, self.wq[li].data(), false, &mut q, 1.0, 0.0);

            let mut att = vec![0.0; q_rows * d];
            let mut scores = vec![0.0; q_rows * total];
            let (keys, values) = (&self.keys[li], &self.values[li]);
            for hd in 0..heads {
                let qv = View::rows_of(&q, hd * dh, q_rows, dh, d);
                let kv = View::rows_of(keys, hd * dh, total, dh, d).t();
                gemm_view(qv, kv, &mut scores, 0, total, 1.0, 0.0);
                for i in 0..q_rows {
                    let row = &mut scores[i * total..(i + 1) * total];
                    row.iter_mut().for_each(|s| *s *= scale);
                    kernels::softmax_prefix(row, start + q_start + i + 1);
                }
                let pv = View::rows_of(&scores, 0, q_rows, total, total);
                let vv = View::rows_of(values, hd * dh, total, dh, d);
                gemm_view(pv, vv, &mut att, hd * dh, d, 1.0, 0.0);
            }
            let mut a = x[q_start * d..(q_start + q_rows) * d].to_vec();
            gemm(q_rows, d, d, &att, false, layer.wo.data(), false, &mut a, 1.0, 1.0);

            let h2 = layernorm_rows(&a, layer.ln2_g.data(), layer.ln2_b.data(), d);
            let f = cfg.ffn_width();
            let mut u = vec![0.0; q_rows * f];
            gemm(q_rows, d, f, &h2, false, layer.w1.data(), false, &mut u, 1.0, 0.0);
            u.iter_mut().for_each(|v| *v = kernels::gelu(*v));
            gemm(q_rows, f, d, &u, false, layer.w2.data(), false, &mut a, 1.0, 1.0);
            x = a;
            rows = q_rows;
        }
        let x = layernorm_rows(&x, p.ln_f_g.data(), p.ln_f_b.data(), d);
        self.len = total;
        Ok(x)
    }
}

fn layernorm_rows(x: &[f64], g: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
        kernels::layernorm_row(src, g, b, dst, None);
    }
    out
}

/// Next-token logits for every position of `seq` (row t predicts t + 1).
pub fn forward_logits(
    params: &BackboneParams,
    adapters: Option<&LoraAdapters>,
    seq: &[u32],
) -> Result<Tensor> {
    let mut s = Session::new(params, adapters, seq.len())?;
    s.extend(seq, seq.len())
}

/// Picks the next token: greedy (lowest index on ties) at temperature 0,
/// otherwise a draw from `softmax(logits / temperature)`.
pub fn pick_token(logits: &[f64], temperature: f64, rng: &mut Rng) -> u32 {
    if temperature <= 0.0 {
        return kernels::argmax(logits) as u32;
    }
    let mut probs: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    let n = probs.len();
    kernels::softmax_prefix(&mut probs, n);
    let u = rng.next_f64();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    (n - 1) as u32
}

/// Autoregressive generation after `input`, continuing a forced `prefix`,
/// until the output holds `total` tokens. Returns the whole output including
/// the prefix.
pub fn generate_from_prefix(
    params: &BackboneParams,
    adapters: Option<&LoraAdapters>,
    input: &[u32],
    prefix: &[u32],
    total: usize,
    temperature: f64,
    seed: u64,
) -> Result<TokenSeq> {
    let cap = params.config.max_len;
    if input.len() + total > cap {
        return Err(Error::Capacity {
            len: input.len() + total,
            capacity: cap,
        });
    }
    if prefix.len() > total {
        return Err(Error::shape(format!(
            "prefix of {} exceeds requested length {total}",
            prefix.len()
        )));
    }
    if input.is_empty() && prefix.is_empty() {
        return Err(Error::shape("generation needs a non-empty context"));
    }
    let mut rng = Rng::new(seed);
    let mut session = Session::new(params, adapters, input.len() + total)?;
    let mut out: Vec<u32> = prefix.to_vec();
    let mut context = input.to_vec();
    context.extend_from_slice(prefix);
    let mut logits = session.extend(&context, 1)?;
    while out.len() < total {
        let tok = pick_token(logits.row(0), temperature, &mut rng);
        out.push(tok);
        if out.len() < total {
            logits = session.extend(&[tok], 1)?;
        }
    }
    Ok(TokenSeq::new(out))
}

/// Generates `t_out` tokens after `input`.
pub fn generate(
    params: &BackboneParams,
    adapters: Option<&LoraAdapters>,
    input: &[u32],
    t_out: usize,
    temperature: f64,
    seed: u64,
) -> Result<TokenSeq> {
    generate_from_prefix(params, adapters, input, &[], t_out, temperature, seed)
}

/// `exp` of the mean negative log-likelihood of `output` teacher-forced
/// after `input` under the backbone without adapters.
pub fn perplexity(params: &BackboneParams, input: &[u32], output: &[u32]) -> Result<f64> {
    perplexity_with(params, None, input, output)
}

pub fn perplexity_with(
    params: &BackboneParams,
    adapters: Option<&LoraAdapters>,
    input: &[u32],
    output: &[u32],
) -> Result<f64> {
    if input.is_empty() || output.is_empty() {
        return Err(Error::shape("perplexity needs a non-empty input and output"));
    }
    let mut seq = input.to_vec();
    seq.extend_from_slice(&output[..output.len() - 1]);
    let mut s = Session::new(params, adapters, input.len() + output.len())?;
    let logits = s.extend(&seq, output.len())?;
    let mut nll = 0.0;
    for (i, &t) in output.iter().enumerate() {
        let row = logits.row(i);
        if t as usize >= row.len() {
            return Err(Error::Vocabulary {
                token: t,
                vocab: row.len(),
            });
        }
        nll += kernels::logsumexp(row) - row[t as usize];
    }
    Ok((nll / output.len() as f64).exp())
}
