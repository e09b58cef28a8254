use std::time::Instant;

use super::{auc, mean, mean_curve, position_distance_curve, token_accuracy};
use crate::backbone::{generate, generate_from_prefix, perplexity, BackboneParams, LoraAdapters};
use crate::numkernel::{derive_seed, Rng, Tensor};
use crate::refiner::{embed_tokens, nn_decode, refine, RefinerParams};
use crate::synthdata::{gen_episode, with_retrieved_context, Episode, EpisodePool, GridSpec};
use crate::tokenizer::{assemble_sequence, detokenize_grid, TokenSeq};
use crate::{Error, Result};

/// Wall time in seconds spent in each pipeline stage.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub generation: f64,
    pub refinement: f64,
    pub nn_lookup: f64,
    pub detokenize: f64,
}

impl StageTimes {
    pub fn total(&self) -> f64 {
        self.generation + self.refinement + self.nn_lookup + self.detokenize
    }

    fn add(&mut self, o: &StageTimes) {
        self.generation += o.generation;
        self.refinement += o.refinement;
        self.nn_lookup += o.nn_lookup;
        self.detokenize += o.detokenize;
    }

    fn scaled(&self, f: f64) -> StageTimes {
        StageTimes {
            generation: self.generation * f,
            refinement: self.refinement * f,
            nn_lookup: self.nn_lookup * f,
            detokenize: self.detokenize * f,
        }
    }

    /// Refinement plus lookup as a fraction of generation time.
    pub fn overhead_ratio(&self) -> f64 {
        (self.refinement + self.nn_lookup) / self.generation
    }
}

fn require_episodes(pool: &EpisodePool) -> Result<()> {
    if pool.is_empty() {
        Err(Error::contract("experiment needs a non-empty test pool"))
    } else {
        Ok(())
    }
}

/// One episode's tokenized context, ground truth and greedy generation.
#[derive(Clone, Debug, PartialEq)]
pub struct EpisodeRun {
    pub input: TokenSeq,
    pub target: TokenSeq,
    pub generated: TokenSeq,
}

pub fn run_episode(backbone: &BackboneParams, adapters: Option<&LoraAdapters>, ep: &Episode) -> Result<EpisodeRun> {
    let (input, target) = assemble_sequence(ep);
    let generated = generate(backbone, adapters, &input, target.len(), 0.0, 0)?;
    Ok(EpisodeRun { input, target, generated })
}

pub fn run_pool(backbone: &BackboneParams, pool: &EpisodePool) -> Result<Vec<EpisodeRun>> {
    pool.episodes.iter().map(|ep| run_episode(backbone, None, ep)).collect()
}

/// Refined embeddings of `tokens` and their nearest-neighbour decoding.
pub fn refine_tokens(backbone: &BackboneParams, refiner: &RefinerParams, tokens: &[u32]) -> Result<(Tensor, TokenSeq)> {
    let e = embed_tokens(&backbone.embed, tokens)?;
    let refined = refine(refiner, &e)?;
    let decoded = nn_decode(&refined, &backbone.embed)?;
    Ok((refined, decoded))
}

/// Accuracy, perplexity and distance AUC with and without refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct RefineEval {
    pub episodes: usize,
    pub raw_accuracy: f64,
    pub refined_accuracy: f64,
    pub raw_perplexity: f64,
    pub refined_perplexity: f64,
    pub raw_auc: f64,
    pub refined_auc: f64,
}

pub fn evaluate_runs(backbone: &BackboneParams, refiner: &RefinerParams, runs: &[EpisodeRun]) -> Result<RefineEval> {
    if runs.is_empty() {
        return Err(Error::contract("experiment needs a non-empty test pool"));
    }
    let mut acc = (Vec::new(), Vec::new());
    let mut ppl = (Vec::new(), Vec::new());
    let mut aucs = (Vec::new(), Vec::new());
    for r in runs {
        let e_star = embed_tokens(&backbone.embed, &r.target)?;
        let e = embed_tokens(&backbone.embed, &r.generated)?;
        let (refined, decoded) = refine_tokens(backbone, refiner, &r.generated)?;
        acc.0.push(token_accuracy(&r.generated, &r.target)?);
        acc.1.push(token_accuracy(&decoded, &r.target)?);
        ppl.0.push(perplexity(backbone, &r.input, &r.generated)?);
        ppl.1.push(perplexity(backbone, &r.input, &decoded)?);
        aucs.0.push(auc(&position_distance_curve(&e, &e_star)?));
        aucs.1.push(auc(&position_distance_curve(&refined, &e_star)?));
    }
    Ok(RefineEval {
        episodes: runs.len(),
        raw_accuracy: mean(&acc.0),
        refined_accuracy: mean(&acc.1),
        raw_perplexity: mean(&ppl.0),
        refined_perplexity: mean(&ppl.1),
        raw_auc: mean(&aucs.0),
        refined_auc: mean(&aucs.1),
    })
}

pub fn evaluate(backbone: &BackboneParams, refiner: &RefinerParams, pool: &EpisodePool) -> Result<RefineEval> {
    require_episodes(pool)?;
    evaluate_runs(backbone, refiner, &run_pool(backbone, pool)?)
}

/// Mean per-position distance to the ground truth, before and after
/// refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct AccumulationReport {
    pub episodes: usize,
    pub raw_curve: Vec<f64>,
    pub refined_curve: Vec<f64>,
    pub raw_auc: f64,
    pub refined_auc: f64,
}

pub fn exp_error_accumulation_runs(
    backbone: &BackboneParams,
    refiner: &RefinerParams,
    runs: &[EpisodeRun],
) -> Result<AccumulationReport> {
    if runs.is_empty() {
        return Err(Error::contract("experiment needs a non-empty test pool"));
    }
    let mut raw = Vec::with_capacity(runs.len());
    let mut refined = Vec::with_capacity(runs.len());
    for r in runs {
        let e_star = embed_tokens(&backbone.embed, &r.target)?;
        let e = embed_tokens(&backbone.embed, &r.generated)?;
        raw.push(position_distance_curve(&e, &e_star)?);
        refined.push(position_distance_curve(&refine(refiner, &e)?, &e_star)?);
    }
    let (raw_curve, refined_curve) = (mean_curve(&raw), mean_curve(&refined));
    Ok(AccumulationReport {
        episodes: runs.len(),
        raw_auc: auc(&raw_curve),
        refined_auc: auc(&refined_curve),
        raw_curve,
        refined_curve,
    })
}

pub fn exp_error_accumulation(
    backbone: &BackboneParams,
    refiner: &RefinerParams,
    pool: &EpisodePool,
) -> Result<AccumulationReport> {
    require_episodes(pool)?;
    exp_error_accumulation_runs(backbone, refiner, &run_pool(backbone, pool)?)
}

/// Length of the permuted segment: `ceil(frac * T)`.
pub fn segment_len(segment_frac: f64, t: usize) -> Result<usize> {
    if !(segment_frac > 0.0 && segment_frac <= 1.0) {
        return Err(Error::Domain(format!("segment_frac must lie in (0, 1], got {segment_frac}")));
    }
    Ok(((segment_frac * t as f64).ceil() as usize).clamp(1, t.max(1)))
}

/// Rows `offset..offset + perm.len()` of `e` rearranged so that new row
/// `offset + i` is old row `offset + perm[i]`.
pub fn permute_segment(e: &Tensor, offset: usize, perm: &[usize]) -> Result<Tensor> {
    if offset + perm.len() > e.rows() {
        return Err(Error::Bounds(format!(
            "segment {offset}..{} exceeds {} rows",
            offset + perm.len(),
            e.rows()
        )));
    }
    let mut out = e.clone();
    for (i, &p) in perm.iter().enumerate() {
        out.row_mut(offset + i).copy_from_slice(e.row(offset + p));
    }
    Ok(out)
}

/// Accuracies for clean and segment-permuted embeddings, each decoded
/// directly and after refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuredReport {
    pub episodes: usize,
    pub segment_len: usize,
    pub clean_raw: f64,
    pub clean_refined: f64,
    pub permuted_raw: f64,
    pub permuted_refined: f64,
}

impl StructuredReport {
    /// Share of the accuracy lost to the permutation that refinement wins
    /// back; `None` when the permutation cost nothing.
    pub fn recovery(&self) -> Option<f64> {
        let lost = self.clean_raw - self.permuted_raw;
        (lost > 0.0).then(|| (self.permuted_refined - self.permuted_raw) / lost)
    }
}

pub fn exp_structured_error_runs(
    backbone: &BackboneParams,
    refiner: &RefinerParams,
    runs: &[EpisodeRun],
    seeds: &[u64],
    segment_frac: f64,
    seed: u64,
) -> Result<StructuredReport> {
    if runs.is_empty() {
        return Err(Error::contract("experiment needs a non-empty test pool"));
    }
    let embed = &backbone.embed;
    let t = runs[0].target.len();
    let len = segment_len(segment_frac, t)?;
    let mut acc = [Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    for (r, &ep_seed) in runs.iter().zip(seeds) {
        let e = embed_tokens(embed, &r.generated)?;
        let t = e.rows();
        let mut rng = Rng::new(derive_seed(seed, ep_seed));
        let offset = rng.below(t - len + 1);
        let mut perm: Vec<usize> = (0..len).collect();
        rng.shuffle(&mut perm);
        let permuted = permute_segment(&e, offset, &perm)?;
        let arms = [
            nn_decode(&e, embed)?,
            nn_decode(&refine(refiner, &e)?, embed)?,
            nn_decode(&permuted, embed)?,
            nn_decode(&refine(refiner, &permuted)?, embed)?,
        ];
        for (a, decoded) in acc.iter_mut().zip(&arms) {
            a.push(token_accuracy(decoded, &r.target)?);
        }
    }
    Ok(StructuredReport {
        episodes: runs.len(),
        segment_len: len,
        clean_raw: mean(&acc[0]),
        clean_refined: mean(&acc[1]),
        permuted_raw: mean(&acc[2]),
        permuted_refined: mean(&acc[3]),
    })
}

pub fn exp_structured_error(
    backbone: &BackboneParams,
    refiner: &RefinerParams,
    pool: &EpisodePool,
    segment_frac: f64,
    seed: u64,
) -> Result<StructuredReport> {
    require_episodes(pool)?;
    segment_len(segment_frac, 1)?;
    let seeds: Vec<u64> = pool.episodes.iter().map(|e| e.seed).collect();
    exp_structured_error_runs(backbone, refiner, &run_pool(backbone, pool)?, &seeds, segment_frac, seed)
}

/// Continuation quality after forcing a raw or a refined prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixReport {
    pub episodes: usize,
    pub prefix_len: usize,
    pub raw_accuracy: f64,
    pub refined_accuracy: f64,
    pub raw_perplexity: f64,
    pub refined_perplexity: f64,
}

pub fn prefix_len(prefix_frac: f64, t: usize) -> Result<usize> {
    if !(prefix_frac > 0.0 && prefix_frac < 1.0) {
        return Err(Error::Domain(format!("prefix_frac must lie in (0, 1), got {prefix_frac}")));
    }
    Ok((prefix_frac * t as f64).floor() as usize)
}

pub fn exp_prefix_feedback_runs(
    backbone: &BackboneParams,
    refiner: &RefinerParams,
    runs: &[EpisodeRun],
    prefix_frac: f64,
) -> Result<PrefixReport> {
    if runs.is_empty() {
        return Err(Error::contract("experiment needs a non-empty test pool"));
    }
    let p = prefix_len(prefix_frac, runs[0].target.len())?;
    let mut acc = (Vec::new(), Vec::new());
    let mut ppl = (Vec::new(), Vec::new());
    for r in runs {
        let t = r.target.len();
        let (_, refined) = refine_tokens(backbone, refiner, &r.generated)?;
        for (prefix, acc, ppl) in [
            (&r.generated[..p], &mut acc.0, &mut ppl.0),
            (&refined[..p], &mut acc.1, &mut ppl.1),
        ] {
            let out = generate_from_prefix(backbone, None, &r.input, prefix, t, 0.0, 0)?;
            acc.push(token_accuracy(&out[p..], &r.target[p..])?);
            let context = r.input.concat(prefix);
            ppl.push(perplexity(backbone, &context, &out[p..])?);
        }
    }
    Ok(PrefixReport {
        episodes: runs.len(),
        prefix_len: p,
        raw_accuracy: mean(&acc.0),
        refined_accuracy: mean(&acc.1),
        raw_perplexity: mean(&ppl.0),
        refined_perplexity: mean(&ppl.1),
    })
}

pub fn exp_prefix_feedback(
    backbone: &BackboneParams,
    refiner: &RefinerParams,
    pool: &EpisodePool,
    prefix_frac: f64,
) -> Result<PrefixReport> {
    require_episodes(pool)?;
    prefix_len(prefix_frac, 1)?;
    exp_prefix_feedback_runs(backbone, refiner, &run_pool(backbone, pool)?, prefix_frac)
}

/// Episodes of `pool` regenerated with `k` demonstrations from their seeds.
pub fn pool_at_k(pool: &EpisodePool, k: usize, spec: &GridSpec) -> Result<EpisodePool> {
    let episodes = pool
        .episodes
        .iter()
        .map(|ep| gen_episode(ep.task, k, ep.seed, spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(EpisodePool { split: pool.split, episodes })
}

pub fn exp_context_sweep(
    backbone: &BackboneParams,
    refiner: &RefinerParams,
    pool: &EpisodePool,
    k_values: &[usize],
    spec: &GridSpec,
) -> Result<Vec<(usize, RefineEval)>> {
    require_episodes(pool)?;
    let t = spec.tokens_per_image();
    for &k in k_values {
        if k == 0 {
            return Err(Error::Domain("K must be >= 1".into()));
        }
        let len = (2 * k + 2) * t;
        if len > backbone.config.max_len {
            return Err(Error::Capacity { len, capacity: backbone.config.max_len });
        }
    }
    k_values
        .iter()
        .map(|&k| Ok((k, evaluate(backbone, refiner, &pool_at_k(pool, k, spec)?)?)))
        .collect()
}

/// One method's metrics in the comparison table.
#[derive(Clone, Debug, PartialEq)]
pub struct MethodRow {
    pub method: String,
    pub accuracy: f64,
    pub perplexity: f64,
    pub auc: f64,
    pub curve: Vec<f64>,
    /// Mean per-episode stage times.
    pub timing: StageTimes,
}

pub const METHOD_LVM: &str = "LVM";
pub const METHOD_RETRIEVAL: &str = "+Context Retrieval";
pub const METHOD_LORA: &str = "+LoRA";
pub const METHOD_REFINE: &str = "+Self-Refinement";

struct Accum {
    acc: Vec<f64>,
    ppl: Vec<f64>,
    curves: Vec<Vec<f64>>,
    time: StageTimes,
}

impl Accum {
    fn new() -> Self {
        Accum { acc: Vec::new(), ppl: Vec::new(), curves: Vec::new(), time: StageTimes::default() }
    }

    fn row(self, method: &str) -> MethodRow {
        let curve = mean_curve(&self.curves);
        let n = self.acc.len().max(1) as f64;
        MethodRow {
            method: method.to_string(),
            accuracy: mean(&self.acc),
            perplexity: mean(&self.ppl),
            auc: auc(&curve),
            curve,
            timing: self.time.scaled(1.0 / n),
        }
    }
}

fn secs(t: Instant) -> f64 {
    t.elapsed().as_secs_f64()
}

/// Scores one method's decoded output; perplexity always uses the frozen
/// backbone and the episode's own demonstrations.
fn score(
    acc: &mut Accum,
    backbone: &BackboneParams,
    input: &[u32],
    target: &[u32],
    decoded: &[u32],
    e_out: &Tensor,
) -> Result<()> {
    let e_star = embed_tokens(&backbone.embed, target)?;
    acc.acc.push(token_accuracy(decoded, target)?);
    acc.ppl.push(perplexity(backbone, input, decoded)?);
    acc.curves.push(position_distance_curve(e_out, &e_star)?);
    Ok(())
}

/// Table of methods: the frozen backbone, retrieved demonstrations, LoRA
/// adapters and self-refinement. Rows for absent artifacts are skipped.
pub fn compare_report(
    backbone: &BackboneParams,
    refiner: &RefinerParams,
    lora: Option<&LoraAdapters>,
    retrieval_pool: Option<&EpisodePool>,
    pool: &EpisodePool,
) -> Result<Vec<MethodRow>> {
    require_episodes(pool)?;
    let embed = &backbone.embed;
    let (h, w, v) = (pool.episodes[0].target.height(), pool.episodes[0].target.width(), backbone.config.vocab);
    let mut lvm = Accum::new();
    let mut retr = Accum::new();
    let mut lo = Accum::new();
    let mut refd = Accum::new();
    for ep in &pool.episodes {
        let (input, target) = assemble_sequence(ep);
        let t0 = Instant::now();
        let generated = generate(backbone, None, &input, target.len(), 0.0, 0)?;
        let gen_time = secs(t0);
        let t0 = Instant::now();
        detokenize_grid(&generated, h, w, v)?;
        let detok = secs(t0);
        lvm.time.add(&StageTimes { generation: gen_time, detokenize: detok, ..Default::default() });
        let e = embed_tokens(embed, &generated)?;
        score(&mut lvm, backbone, &input, &target, &generated, &e)?;

        // Refinement reuses the generation above; its generation time is the
        // same computation.
        let t0 = Instant::now();
        let refined = refine(refiner, &embed_tokens(embed, &generated)?)?;
        let ref_time = secs(t0);
        let t0 = Instant::now();
        let decoded = nn_decode(&refined, embed)?;
        let nn_time = secs(t0);
        let t0 = Instant::now();
        detokenize_grid(&decoded, h, w, v)?;
        refd.time.add(&StageTimes {
            generation: gen_time,
            refinement: ref_time,
            nn_lookup: nn_time,
            detokenize: secs(t0),
        });
        score(&mut refd, backbone, &input, &target, &decoded, &refined)?;

        if let Some(rp) = retrieval_pool {
            let t0 = Instant::now();
            let retrieved = with_retrieved_context(ep, rp, embed)?;
            let (r_input, _) = assemble_sequence(&retrieved);
            let out = generate(backbone, None, &r_input, target.len(), 0.0, 0)?;
            let gen_time = secs(t0);
            let t0 = Instant::now();
            detokenize_grid(&out, h, w, v)?;
            retr.time.add(&StageTimes { generation: gen_time, detokenize: secs(t0), ..Default::default() });
            score(&mut retr, backbone, &input, &target, &out, &embed_tokens(embed, &out)?)?;
        }
        if let Some(ad) = lora {
            let t0 = Instant::now();
            let out = generate(backbone, Some(ad), &input, target.len(), 0.0, 0)?;
            let gen_time = secs(t0);
            let t0 = Instant::now();
            detokenize_grid(&out, h, w, v)?;
            lo.time.add(&StageTimes { generation: gen_time, detokenize: secs(t0), ..Default::default() });
            score(&mut lo, backbone, &input, &target, &out, &embed_tokens(embed, &out)?)?;
        }
    }
    let mut rows = vec![lvm.row(METHOD_LVM)];
    if retrieval_pool.is_some() {
        rows.push(retr.row(METHOD_RETRIEVAL));
    }
    if lora.is_some() {
        rows.push(lo.row(METHOD_LORA));
    }
    rows.push(refd.row(METHOD_REFINE));
    Ok(rows)
}

/// Mean per-episode stage times of the full refinement pipeline.
pub fn exp_timing(backbone: &BackboneParams, refiner: &RefinerParams, pool: &EpisodePool) -> Result<StageTimes> {
    require_episodes(pool)?;
    let rows = compare_report(backbone, refiner, None, None, pool)?;
    Ok(rows.last().expect("refinement row is always present").timing)
}
