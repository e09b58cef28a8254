//! Joint residual refinement of generated-token embeddings, its training
//! loop and cosine nearest-neighbour decoding back to tokens.

mod net;

pub use net::{refine, RefinerConfig, RefinerParams, RefinerVariant, RefinerVars};

use std::fmt;
use std::str::FromStr;

use crate::backbone::{generate, BackboneParams};
use crate::numkernel::{derive_seed, kernels, AdamW, Rng, Tape, Tensor, Var};
use crate::synthdata::EpisodePool;
use crate::tokenizer::{assemble_sequence, TokenSeq};
use crate::{Error, Result};

/// A T×d matrix of token embeddings, one row per position.
pub type EmbeddingSeq = Tensor;

/// Rows of `embed` for each token.
pub fn embed_tokens(embed: &Tensor, tokens: &[u32]) -> Result<EmbeddingSeq> {
    let (vocab, d) = (embed.rows(), embed.cols());
    let mut data = Vec::with_capacity(tokens.len() * d);
    for &t in tokens {
        if t as usize >= vocab {
            return Err(Error::Vocabulary { token: t, vocab });
        }
        data.extend_from_slice(embed.row(t as usize));
    }
    Tensor::new(vec![tokens.len(), d], data)
}

/// Token whose embedding row is most cosine-similar to each row of `e`;
/// ties go to the lowest token index.
pub fn nn_decode(e: &EmbeddingSeq, embed: &Tensor) -> Result<TokenSeq> {
    if e.rows() > 0 && e.cols() != embed.cols() {
        return Err(Error::shape(format!(
            "decoding width {} against a codebook of width {}",
            e.cols(),
            embed.cols()
        )));
    }
    let norms: Vec<f64> = (0..embed.rows()).map(|v| kernels::norm(embed.row(v))).collect();
    if let Some(v) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("codebook row {v} has zero norm")));
    }
    let mut out = Vec::with_capacity(e.rows());
    for t in 0..e.rows() {
        let row = e.row(t);
        let n = kernels::norm(row);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Decode { position: t });
        }
        let scores: Vec<f64> = norms
            .iter()
            .enumerate()
            .map(|(v, nv)| kernels::dot(row, embed.row(v)) / (n * nv))
            .collect();
        out.push(kernels::argmax(&scores) as u32);
    }
    Ok(TokenSeq::new(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LossKind {
    Cosine,
    L2,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Cosine => "cosine",
            LossKind::L2 => "l2",
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(LossKind::Cosine),
            "l2" => Ok(LossKind::L2),
            other => Err(Error::Domain(format!("unknown loss `{other}` (expected cosine or l2)"))),
        }
    }
}

fn check_same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(format!("loss between {:?} and {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

/// Mean over positions of `1 - cos(e_ref_t, e_star_t)`.
pub fn loss_cosine(e_ref: &EmbeddingSeq, e_star: &EmbeddingSeq) -> Result<f64> {
    check_same_shape(e_ref, e_star)?;
    let t = e_ref.rows();
    let mut total = 0.0;
    for i in 0..t {
        total += crate::numkernel::cosine_distance(e_ref.row(i), e_star.row(i))?;
    }
    Ok(total / t as f64)
}

/// Mean over positions of the squared Euclidean distance.
pub fn loss_l2(e_ref: &EmbeddingSeq, e_star: &EmbeddingSeq) -> Result<f64> {
    check_same_shape(e_ref, e_star)?;
    let t = e_ref.rows();
    let total: f64 = (0..t)
        .map(|i| e_ref.row(i).iter().zip(e_star.row(i)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    Ok(total / t as f64)
}

/// Loss of the chosen kind on the tape; `e_star` must be a constant leaf.
pub fn taped_loss(tape: &mut Tape, kind: LossKind, e_ref: Var, e_star: Var) -> Result<Var> {
    match kind {
        LossKind::Cosine => tape.cosine_distance(e_ref, e_star),
        LossKind::L2 => tape.squared_distance(e_ref, e_star),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RefinerTrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub loss: LossKind,
    pub seed: u64,
}

impl Default for RefinerTrainOptions {
    fn default() -> Self {
        RefinerTrainOptions {
            epochs: 2,
            batch: 4,
            lr: 1e-4,
            loss: LossKind::Cosine,
            seed: 0,
        }
    }
}

/// Per-step losses plus the mean loss of each epoch.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub steps: Vec<f64>,
    pub epochs: Vec<f64>,
}

/// Greedy generations of the target block for every episode. The backbone
/// is frozen and decoding is deterministic, so training can reuse them
/// across epochs.
pub fn generate_pool(backbone: &BackboneParams, pool: &EpisodePool) -> Result<Vec<TokenSeq>> {
    pool.episodes
        .iter()
        .map(|ep| {
            let (input, target) = assemble_sequence(ep);
            generate(backbone, None, &input, target.len(), 0.0, 0)
        })
        .collect()
}

/// Trains the refiner: for each episode, embed the backbone's generation,
/// refine it and pull it toward the ground-truth embeddings. Only the
/// refiner's weights change.
pub fn train_refiner(
    params: &mut RefinerParams,
    backbone: &BackboneParams,
    pool: &EpisodePool,
    opts: &RefinerTrainOptions,
) -> Result<TrainHistory> {
    backbone.require_frozen("refiner training")?;
    let generations = generate_pool(backbone, pool)?;
    train_refiner_on(params, backbone, pool, &generations, opts)
}

/// [`train_refiner`] with the generations precomputed by [`generate_pool`].
pub fn train_refiner_on(
    params: &mut RefinerParams,
    backbone: &BackboneParams,
    pool: &EpisodePool,
    generations: &[TokenSeq],
    opts: &RefinerTrainOptions,
) -> Result<TrainHistory> {
    backbone.require_frozen("refiner training")?;
    if generations.len() != pool.len() {
        return Err(Error::shape(format!(
            "{} generations for {} episodes",
            generations.len(),
            pool.len()
        )));
    }
    if opts.batch == 0 {
        return Err(Error::Domain("batch must be >= 1".into()));
    }
    let embed = &backbone.embed;
    let mut rng = Rng::new(derive_seed(opts.seed, 0x5245_4649));
    let mut opt = AdamW::new(opts.lr, crate::backbone::WEIGHT_DECAY);
    let mut order: Vec<usize> = (0..pool.len()).collect();
    let mut history = TrainHistory::default();
    for _ in 0..opts.epochs {
        rng.shuffle(&mut order);
        let mut epoch_total = 0.0;
        for chunk in order.chunks(opts.batch) {
            let mut acc: Option<Vec<Tensor>> = None;
            let mut batch_loss = 0.0;
            for &i in chunk {
                let e = embed_tokens(embed, &generations[i])?;
                let e_star = embed_tokens(embed, pool.episodes[i].target.cells())?;
                let mut tape = Tape::new();
                let vars = RefinerVars::attach(&mut tape, params);
                let ev = tape.constant(e);
                let sv = tape.constant(e_star);
                let refined = vars.refine(&mut tape, ev)?;
                let loss = taped_loss(&mut tape, opts.loss, refined, sv)?;
                tape.backward(loss)?;
                batch_loss += tape.value(loss).item();
                let grads = vars.trainable.iter().map(|&v| tape.grad(v).cloned().expect("leaf gradient"));
                match acc.as_mut() {
                    None => acc = Some(grads.collect()),
                    Some(acc) => {
                        for (a, g) in acc.iter_mut().zip(grads) {
                            a.add_assign(g.data());
                        }
                    }
                }
            }
            let n = chunk.len() as f64;
            let mut grads = acc.expect("chunks are non-empty");
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|x| *x /= n);
            }
            let refs: Vec<&Tensor> = grads.iter().collect();
            opt.step(&mut params.tensors_mut(), &refs)?;
            history.steps.push(batch_loss / n);
            epoch_total += batch_loss;
        }
        history.epochs.push(epoch_total / pool.len().max(1) as f64);
    }
    Ok(history)
}
