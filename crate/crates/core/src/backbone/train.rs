//! Taped forward pass and the two training loops: full pretraining and
//! LoRA adaptation of a frozen backbone.

use super::params::{BackboneParams, LoraAdapters};
use crate::numkernel::{derive_seed, AdamW, Rng, Tape, Tensor, Var};
use crate::synthdata::{Episode, EpisodePool};
use crate::tokenizer::assemble_sequence;
use crate::{Error, Result};

/// Weight decay used by both training loops.
pub const WEIGHT_DECAY: f64 = 0.01;

struct LayerVars {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    w1: Var,
    w2: Var,
    ln1_g: Var,
    ln1_b: Var,
    ln2_g: Var,
    ln2_b: Var,
}

/// Backbone weights placed on a tape. `trainable` lists the leaves that
/// receive gradients, in optimizer order.
pub struct BackboneVars {
    embed: Var,
    pos: Var,
    layers: Vec<LayerVars>,
    ln_f_g: Var,
    ln_f_b: Var,
    heads: usize,
    pub trainable: Vec<Var>,
}

impl BackboneVars {
    /// Backbone leaves are trainable unless `adapters` is given, in which
    /// case the backbone is constant and only the adapter matrices train.
    pub fn attach(tape: &mut Tape, params: &BackboneParams, adapters: Option<&LoraAdapters>) -> Result<Self> {
        let train_backbone = adapters.is_none();
        let mut trainable = Vec::new();
        let leaf = |tape: &mut Tape, t: &Tensor, trainable: &mut Vec<Var>| {
            if train_backbone {
                let v = tape.param(t.clone());
                trainable.push(v);
                v
            } else {
                tape.constant(t.clone())
            }
        };
        let embed = leaf(tape, &params.embed, &mut trainable);
        let pos = leaf(tape, &params.pos, &mut trainable);
        let mut raw = Vec::new();
        for l in &params.layers {
            let mut vars = Vec::with_capacity(10);
            for t in [&l.wq, &l.wk, &l.wv, &l.wo, &l.w1, &l.w2, &l.ln1_g, &l.ln1_b, &l.ln2_g, &l.ln2_b] {
                vars.push(leaf(tape, t, &mut trainable));
            }
            raw.push(vars);
        }
        let ln_f_g = leaf(tape, &params.ln_f_g, &mut trainable);
        let ln_f_b = leaf(tape, &params.ln_f_b, &mut trainable);
        if let Some(ad) = adapters {
            if ad.layers.len() != params.layers.len() {
                return Err(Error::shape("adapter and backbone layer counts differ"));
            }
        }
        let mut layers = Vec::with_capacity(raw.len());
        for (i, v) in raw.into_iter().enumerate() {
            let (mut wq, mut wv) = (v[0], v[2]);
            if let Some(ad) = adapters {
                let a = &ad.layers[i];
                let ids: Vec<Var> = [&a.q_a, &a.q_b, &a.v_a, &a.v_b]
                    .into_iter()
                    .map(|t| tape.param(t.clone()))
                    .collect();
                trainable.extend(&ids);
                let dq = tape.matmul(ids[0], ids[1])?;
                let dq = tape.scale(dq, ad.scale());
                wq = tape.add(wq, dq)?;
                let dv = tape.matmul(ids[2], ids[3])?;
                let dv = tape.scale(dv, ad.scale());
                wv = tape.add(wv, dv)?;
            }
            layers.push(LayerVars {
                wq,
                wk: v[1],
                wv,
                wo: v[3],
                w1: v[4],
                w2: v[5],
                ln1_g: v[6],
                ln1_b: v[7],
                ln2_g: v[8],
                ln2_b: v[9],
            });
        }
        Ok(BackboneVars {
            embed,
            pos,
            layers,
            ln_f_g,
            ln_f_b,
            heads: params.config.heads,
            trainable,
        })
    }
}

/// Causal self-attention of the rows `q_start..` of the normed input `h`
/// over all of its rows, before the residual add.
fn attention(tape: &mut Tape, l: &LayerVars, h: Var, q_start: usize, heads: usize) -> Result<Var> {
    let rows = tape.value(h).rows();
    let d = tape.value(h).cols();
    let dh = d / heads;
    let hq = if q_start == 0 { h } else { tape.slice_rows(h, q_start, rows - q_start)? };
    let q = tape.matmul(hq, l.wq)?;
    let k = tape.matmul(h, l.wk)?;
    let v = tape.matmul(h, l.wv)?;
    let mut outs = Vec::with_capacity(heads);
    for i in 0..heads {
        let qh = tape.slice_cols(q, i * dh, dh)?;
        let kh = tape.slice_cols(k, i * dh, dh)?;
        let vh = tape.slice_cols(v, i * dh, dh)?;
        let s = tape.matmul_t(qh, kh, false, true)?;
        let s = tape.scale(s, 1.0 / (dh as f64).sqrt());
        let p = tape.causal_softmax_rows(s, q_start);
        outs.push(tape.matmul(p, vh)?);
    }
    let cat = tape.concat_cols(&outs)?;
    tape.matmul(cat, l.wo)
}

/// Next-token logits for rows `keep_from..` of `seq`, a prefix of a
/// sequence whose complete length is `span` (positions are right-aligned as
/// in [`super::Session`]).
pub fn taped_logits(tape: &mut Tape, vars: &BackboneVars, seq: &[u32], keep_from: usize, span: usize) -> Result<Var> {
    let n = seq.len();
    let max_len = tape.value(vars.pos).rows();
    if span > max_len {
        return Err(Error::Capacity { len: span, capacity: max_len });
    }
    if n > span {
        return Err(Error::shape(format!("sequence of {n} is longer than its span {span}")));
    }
    if keep_from >= n {
        return Err(Error::shape(format!("no rows kept from a sequence of {n}")));
    }
    let vocab = tape.value(vars.embed).rows();
    let ids = seq
        .iter()
        .map(|&t| {
            if (t as usize) < vocab {
                Ok(t as usize)
            } else {
                Err(Error::Vocabulary { token: t, vocab })
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let e = tape.gather_rows(vars.embed, &ids)?;
    let p = tape.slice_rows(vars.pos, max_len - span, n)?;
    let mut x = tape.add(e, p)?;
    let last = vars.layers.len() - 1;
    for (i, l) in vars.layers.iter().enumerate() {
        let q_start = if i == last { keep_from } else { 0 };
        let h = tape.layernorm(x, l.ln1_g, l.ln1_b)?;
        let a = attention(tape, l, h, q_start, vars.heads)?;
        let xq = if q_start == 0 { x } else { tape.slice_rows(x, q_start, n - q_start)? };
        let x1 = tape.add(xq, a)?;
        let h2 = tape.layernorm(x1, l.ln2_g, l.ln2_b)?;
        let u = tape.matmul(h2, l.w1)?;
        let u = tape.gelu(u);
        let f = tape.matmul(u, l.w2)?;
        x = tape.add(x1, f)?;
    }
    let x = tape.layernorm(x, vars.ln_f_g, vars.ln_f_b)?;
    tape.matmul_t(x, vars.embed, false, true)
}

/// Mean cross-entropy of the target block teacher-forced after the input.
pub fn taped_episode_loss(tape: &mut Tape, vars: &BackboneVars, input: &[u32], target: &[u32]) -> Result<Var> {
    if input.is_empty() || target.is_empty() {
        return Err(Error::shape("episode loss needs a non-empty input and target"));
    }
    let mut seq = input.to_vec();
    seq.extend_from_slice(&target[..target.len() - 1]);
    let logits = taped_logits(tape, vars, &seq, input.len() - 1, input.len() + target.len())?;
    let targets: Vec<usize> = target.iter().map(|&t| t as usize).collect();
    tape.cross_entropy(logits, &targets)
}

/// Loss and gradients (in `trainable` order) of one episode.
fn episode_grads(
    params: &BackboneParams,
    adapters: Option<&LoraAdapters>,
    episode: &Episode,
) -> Result<(f64, Vec<Tensor>)> {
    let (input, target) = assemble_sequence(episode);
    let mut tape = Tape::new();
    let vars = BackboneVars::attach(&mut tape, params, adapters)?;
    let loss = taped_episode_loss(&mut tape, &vars, &input, &target)?;
    tape.backward(loss)?;
    let value = tape.value(loss).item();
    let grads = vars
        .trainable
        .iter()
        .map(|&v| tape.grad(v).cloned().expect("trainable leaves receive gradients"))
        .collect();
    Ok((value, grads))
}

/// Mean loss and mean gradients over a batch of episodes.
fn batch_grads(
    params: &BackboneParams,
    adapters: Option<&LoraAdapters>,
    batch: &[Episode],
) -> Result<(f64, Vec<Tensor>)> {
    let mut total = 0.0;
    let mut acc: Option<Vec<Tensor>> = None;
    for ep in batch {
        let (loss, grads) = episode_grads(params, adapters, ep)?;
        total += loss;
        match acc.as_mut() {
            None => acc = Some(grads),
            Some(acc) => {
                for (a, g) in acc.iter_mut().zip(&grads) {
                    a.add_assign(g.data());
                }
            }
        }
    }
    let n = batch.len() as f64;
    let mut grads = acc.unwrap_or_default();
    for g in &mut grads {
        g.data_mut().iter_mut().for_each(|x| *x /= n);
    }
    Ok((total / n, grads))
}

/// Mean target-block cross-entropy of one episode, computed on a tape.
pub fn episode_loss(params: &BackboneParams, adapters: Option<&LoraAdapters>, episode: &Episode) -> Result<f64> {
    let (input, target) = assemble_sequence(episode);
    let mut tape = Tape::new();
    let vars = BackboneVars::attach(&mut tape, params, adapters)?;
    let loss = taped_episode_loss(&mut tape, &vars, &input, &target)?;
    Ok(tape.value(loss).item())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOptions {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Each sampled episode keeps a uniform number of demonstrations in
    /// `min_k..=K`, so one backbone serves every context size up to K.
    pub min_k: usize,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        PretrainOptions {
            steps: 2000,
            batch: 4,
            lr: 3e-3,
            seed: 0,
            min_k: 1,
        }
    }
}

/// Trains every backbone weight on the target-block cross-entropy of episodes
/// drawn with replacement from `pool`. Returns the per-step mean loss.
pub fn pretrain(params: &mut BackboneParams, pool: &EpisodePool, opts: &PretrainOptions) -> Result<Vec<f64>> {
    if params.is_frozen() {
        return Err(Error::contract("pretraining requires an unfrozen backbone"));
    }
    if pool.is_empty() {
        return Err(Error::InsufficientPool { requested: 1, available: 0 });
    }
    if opts.batch == 0 {
        return Err(Error::Domain("batch must be >= 1".into()));
    }
    let mut rng = Rng::new(derive_seed(opts.seed, 0x5052_4554));
    let mut opt = AdamW::new(opts.lr, WEIGHT_DECAY);
    let mut history = Vec::with_capacity(opts.steps);
    for _ in 0..opts.steps {
        let mut batch = Vec::with_capacity(opts.batch);
        for _ in 0..opts.batch {
            let ep = &pool.episodes[rng.below(pool.len())];
            let hi = ep.k();
            let lo = opts.min_k.clamp(1, hi);
            batch.push(ep.with_k(rng.range_inclusive(lo, hi))?);
        }
        let (loss, grads) = batch_grads(params, None, &batch)?;
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        opt.step(&mut params.tensors_mut(), &grad_refs)?;
        history.push(loss);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LoraOptions {
    fn default() -> Self {
        LoraOptions {
            epochs: 2,
            batch: 4,
            lr: 1e-4,
            seed: 0,
        }
    }
}

/// Trains the adapters of a frozen backbone with the pretraining objective,
/// one pass over a shuffled pool per epoch. Returns the per-step mean loss.
pub fn train_lora(
    params: &BackboneParams,
    adapters: &mut LoraAdapters,
    pool: &EpisodePool,
    opts: &LoraOptions,
) -> Result<Vec<f64>> {
    params.require_frozen("LoRA training")?;
    if opts.batch == 0 {
        return Err(Error::Domain("batch must be >= 1".into()));
    }
    let mut rng = Rng::new(derive_seed(opts.seed, 0x4C4F_5241));
    let mut opt = AdamW::new(opts.lr, WEIGHT_DECAY);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    for _ in 0..opts.epochs {
        rng.shuffle(&mut order);
        for chunk in order.chunks(opts.batch) {
            let batch: Vec<Episode> = chunk.iter().map(|&i| pool.episodes[i].clone()).collect();
            let (loss, grads) = batch_grads(params, Some(adapters), &batch)?;
            let grad_refs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut adapters.tensors_mut(), &grad_refs)?;
            history.push(loss);
        }
    }
    Ok(history)
}
