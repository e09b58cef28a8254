//! Subcommands. Each reads its inputs from the output directory, writes its
//! artifacts there and logs the config hash and stage wall times to stderr.
//!
//! Wall-clock timings never enter the metric CSVs; they go to separate
//! `*_timing.csv` files so that metric files are byte-reproducible.

use std::path::PathBuf;
use std::time::Instant;

use sha2::{Digest, Sha256};
use vqrefine::backbone::{pretrain, train_lora, BackboneParams, LoraAdapters, LoraOptions, PretrainOptions};
use vqrefine::evalharness::{
    compare_report, curves_svg, evaluate_runs, exp_context_sweep, exp_error_accumulation_runs,
    exp_prefix_feedback_runs, exp_structured_error_runs, exp_timing, run_pool, EpisodeRun, StageTimes,
};
use vqrefine::numkernel::Tensor;
use vqrefine::refiner::{
    generate_pool, train_refiner_on, LossKind, RefinerParams, RefinerTrainOptions, RefinerVariant, TrainHistory,
};
use vqrefine::synthdata::{read_episodes, write_episodes, EpisodePool, Split};
use vqrefine::tokenizer::TokenSeq;
use vqrefine::{Error, Result};

use crate::checkpoint::{self, HASH_TENSOR};
use crate::config::RunConfig;
use crate::report::{Cell, Table};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Pretrain,
    TrainRefiner,
    TrainLora,
    Eval,
    ExpErrorAccum,
    ExpStructured,
    ExpPrefix,
    ExpContext,
    AblateLoss,
    AblateArch,
    Timing,
}

impl Command {
    pub const ALL: [Command; 12] = [
        Command::GenData,
        Command::Pretrain,
        Command::TrainRefiner,
        Command::TrainLora,
        Command::Eval,
        Command::ExpErrorAccum,
        Command::ExpStructured,
        Command::ExpPrefix,
        Command::ExpContext,
        Command::AblateLoss,
        Command::AblateArch,
        Command::Timing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Pretrain => "pretrain",
            Command::TrainRefiner => "train-refiner",
            Command::TrainLora => "train-lora",
            Command::Eval => "eval",
            Command::ExpErrorAccum => "exp-error-accum",
            Command::ExpStructured => "exp-structured",
            Command::ExpPrefix => "exp-prefix",
            Command::ExpContext => "exp-context",
            Command::AblateLoss => "ablate-loss",
            Command::AblateArch => "ablate-arch",
            Command::Timing => "timing",
        }
    }
}

// Artifact names, relative to the output directory.
pub const TRAIN_DATA: &str = "data/train.txt";
pub const TEST_DATA: &str = "data/test.txt";
pub const BACKBONE_CKPT: &str = "backbone.ckpt";
pub const REFINER_CKPT: &str = "refiner.ckpt";
pub const LORA_CKPT: &str = "lora.ckpt";

/// Validated configuration plus its resolved output directory and hash.
pub struct Run {
    pub cfg: RunConfig,
    pub out: PathBuf,
    pub hash: String,
}

impl Run {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_dir();
        let hash = cfg.hash();
        Ok(Run { cfg, out, hash })
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    fn existing(&self, rel: &str, producer: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.is_file() {
            Ok(p)
        } else {
            Err(Error::MissingArtifact { path: p, producer: producer.to_string() })
        }
    }

    fn ensure_dir(&self, rel: &str) -> Result<()> {
        let p = self.path(rel);
        std::fs::create_dir_all(&p).map_err(|e| Error::io(p, e))
    }

    fn log(&self, msg: impl AsRef<str>) {
        eprintln!("[vqrefine] {}", msg.as_ref());
    }

    fn pool(&self, rel: &str, split: Split) -> Result<EpisodePool> {
        let p = self.existing(rel, "gen-data")?;
        let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let episodes = read_episodes(&text)?;
        if let Some(ep) = episodes.first() {
            let spec = self.cfg.grid_spec();
            if ep.task != self.cfg.task || ep.k() != self.cfg.k || ep.query.height() != spec.height || ep.query.width() != spec.width {
                return Err(Error::contract(format!(
                    "{} holds {} episodes with K = {} on {}x{} grids; the config asks for {} with K = {} on {}x{}; rerun gen-data",
                    p.display(),
                    ep.task.name(),
                    ep.k(),
                    ep.query.height(),
                    ep.query.width(),
                    self.cfg.task.name(),
                    self.cfg.k,
                    spec.height,
                    spec.width
                )));
            }
        }
        Ok(EpisodePool { split, episodes })
    }

    fn train_pool(&self) -> Result<EpisodePool> {
        self.pool(TRAIN_DATA, Split::Train)
    }

    fn test_pool(&self) -> Result<EpisodePool> {
        self.pool(TEST_DATA, Split::Test)
    }

    fn save(&self, rel: &str, tensors: Vec<(String, &Tensor)>) -> Result<()> {
        let hash = checkpoint::hash_tensor(&self.hash)?;
        let mut all = tensors;
        all.push((HASH_TENSOR.to_string(), &hash));
        let bytes = checkpoint::encode(all)?;
        checkpoint::write(&self.path(rel), &bytes)?;
        self.log(format!("wrote {rel} (sha256 {})", hex::encode(Sha256::digest(&bytes))));
        Ok(())
    }

    fn load(&self, rel: &str, producer: &str) -> Result<std::collections::BTreeMap<String, Tensor>> {
        let p = self.existing(rel, producer)?;
        let (hash, map) = checkpoint::take_hash(checkpoint::read(&p)?)?;
        if hash.as_deref() != Some(self.hash.as_str()) {
            self.log(format!("note: {rel} was written under config hash {}", hash.as_deref().unwrap_or("<none>")));
        }
        Ok(map)
    }

    pub fn backbone(&self) -> Result<BackboneParams> {
        let mut p = BackboneParams::from_named(self.cfg.backbone_config(), self.load(BACKBONE_CKPT, "pretrain")?)?;
        p.freeze();
        Ok(p)
    }

    pub fn refiner(&self) -> Result<RefinerParams> {
        RefinerParams::from_named(self.load(REFINER_CKPT, "train-refiner")?)
    }

    pub fn lora(&self) -> Result<LoraAdapters> {
        LoraAdapters::from_named(&self.cfg.backbone_config(), self.load(LORA_CKPT, "train-lora")?)
    }

    fn file_digest(&self, rel: &str) -> Result<String> {
        let p = self.path(rel);
        let bytes = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        Ok(hex::encode(Sha256::digest(bytes)))
    }

    fn write_table(&self, rel: &str, table: &Table) -> Result<()> {
        table.write(&self.path(rel))?;
        self.log(format!("wrote {rel}"));
        Ok(())
    }
}

/// Times a stage and logs it.
fn stage<T>(run: &Run, name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let t0 = Instant::now();
    let out = f()?;
    run.log(format!("stage {name}: {:.3} s", t0.elapsed().as_secs_f64()));
    Ok(out)
}

pub fn run(command: Command, cfg: RunConfig) -> Result<()> {
    let run = Run::new(cfg)?;
    run.ensure_dir("")?;
    run.log(format!("{} | config hash {} | out {}", command.name(), run.hash, run.out.display()));
    match command {
        Command::GenData => gen_data(&run),
        Command::Pretrain => cmd_pretrain(&run),
        Command::TrainRefiner => cmd_train_refiner(&run),
        Command::TrainLora => cmd_train_lora(&run),
        Command::Eval => cmd_eval(&run),
        Command::ExpErrorAccum => cmd_error_accum(&run),
        Command::ExpStructured => cmd_structured(&run),
        Command::ExpPrefix => cmd_prefix(&run),
        Command::ExpContext => cmd_context(&run),
        Command::AblateLoss => cmd_ablate_loss(&run),
        Command::AblateArch => cmd_ablate_arch(&run),
        Command::Timing => cmd_timing(&run),
    }
}

fn gen_data(run: &Run) -> Result<()> {
    let c = &run.cfg;
    let spec = c.grid_spec();
    run.ensure_dir("data")?;
    for (rel, split, n) in [(TRAIN_DATA, Split::Train, c.train_pool), (TEST_DATA, Split::Test, c.test_pool)] {
        let pool = stage(run, rel, || EpisodePool::generate(c.task, c.k, split, c.seed, n, &spec))?;
        let p = run.path(rel);
        std::fs::write(&p, write_episodes(&pool.episodes)).map_err(|e| Error::io(&p, e))?;
        run.log(format!("wrote {rel} ({n} episodes)"));
    }
    Ok(())
}

fn cmd_pretrain(run: &Run) -> Result<()> {
    let c = &run.cfg;
    let pool = run.train_pool()?;
    let mut params = BackboneParams::init(c.backbone_config(), c.seed)?;
    let opts = PretrainOptions { steps: c.steps, batch: c.batch, lr: c.pretrain_lr, seed: c.seed, min_k: c.pretrain_min_k };
    let losses = stage(run, "pretrain", || pretrain(&mut params, &pool, &opts))?;
    params.freeze();
    run.save(BACKBONE_CKPT, params.named_tensors())?;
    let mut t = Table::new(&["step", "loss"]);
    for (i, l) in losses.iter().enumerate() {
        t.push(vec![(i + 1).into(), (*l).into()])?;
    }
    run.write_table("pretrain_loss.csv", &t)
}

fn history_table(h: &TrainHistory) -> Result<Table> {
    let mut t = Table::new(&["step", "loss"]);
    for (i, l) in h.steps.iter().enumerate() {
        t.push(vec![(i + 1).into(), (*l).into()])?;
    }
    Ok(t)
}

/// Trains a refiner of the given variant and loss on precomputed
/// generations, with the optimiser settings of `cfg`.
pub fn fit_refiner(
    cfg: &RunConfig,
    backbone: &BackboneParams,
    pool: &EpisodePool,
    generations: &[TokenSeq],
    variant: RefinerVariant,
    loss: LossKind,
) -> Result<(RefinerParams, TrainHistory)> {
    let mut params = RefinerParams::init(cfg.refiner_config(variant), cfg.seed)?;
    let opts = RefinerTrainOptions { epochs: cfg.epochs, batch: cfg.batch, lr: cfg.lr, loss, seed: cfg.seed };
    let h = train_refiner_on(&mut params, backbone, pool, generations, &opts)?;
    Ok((params, h))
}

fn cmd_train_refiner(run: &Run) -> Result<()> {
    let pool = run.train_pool()?;
    let before = run.existing(BACKBONE_CKPT, "pretrain").and_then(|_| run.file_digest(BACKBONE_CKPT))?;
    let backbone = run.backbone()?;
    let generations = stage(run, "generation", || generate_pool(&backbone, &pool))?;
    let (params, h) = stage(run, "train refiner", || {
        fit_refiner(&run.cfg, &backbone, &pool, &generations, run.cfg.refiner_variant, run.cfg.loss)
    })?;
    run.save(REFINER_CKPT, params.named_tensors())?;
    run.write_table("refiner_loss.csv", &history_table(&h)?)?;
    check_backbone_unchanged(run, &before)
}

fn check_backbone_unchanged(run: &Run, before: &str) -> Result<()> {
    let after = run.file_digest(BACKBONE_CKPT)?;
    if after != before {
        return Err(Error::contract(format!("backbone checkpoint changed during training ({before} -> {after})")));
    }
    run.log(format!("backbone checkpoint unchanged (sha256 {after})"));
    Ok(())
}

fn cmd_train_lora(run: &Run) -> Result<()> {
    let c = &run.cfg;
    let pool = run.train_pool()?;
    let before = run.existing(BACKBONE_CKPT, "pretrain").and_then(|_| run.file_digest(BACKBONE_CKPT))?;
    let backbone = run.backbone()?;
    let mut adapters = LoraAdapters::init(&backbone.config, c.lora_rank, c.seed)?;
    let opts = LoraOptions { epochs: c.epochs, batch: c.batch, lr: c.lora_lr, seed: c.seed };
    let losses = stage(run, "train lora", || train_lora(&backbone, &mut adapters, &pool, &opts))?;
    run.save(LORA_CKPT, adapters.named_tensors())?;
    let mut t = Table::new(&["step", "loss"]);
    for (i, l) in losses.iter().enumerate() {
        t.push(vec![(i + 1).into(), (*l).into()])?;
    }
    run.write_table("lora_loss.csv", &t)?;
    check_backbone_unchanged(run, &before)
}

pub fn timing_row(label: &str, t: &StageTimes) -> Vec<Cell> {
    vec![
        label.into(),
        t.generation.into(),
        t.refinement.into(),
        t.nn_lookup.into(),
        t.detokenize.into(),
        t.total().into(),
    ]
}

pub const TIMING_HEADER: [&str; 6] = ["method", "generation_s", "refinement_s", "nn_lookup_s", "detokenize_s", "total_s"];

fn cmd_eval(run: &Run) -> Result<()> {
    let backbone = run.backbone()?;
    let refiner = run.refiner()?;
    let lora = run.lora()?;
    let train = run.train_pool()?;
    let test = run.test_pool()?;
    let rows = stage(run, "compare", || compare_report(&backbone, &refiner, Some(&lora), Some(&train), &test))?;
    let mut metrics = Table::new(&["method", "episodes", "accuracy", "perplexity", "auc"]);
    let mut curves = Table::new(&["method", "position", "distance"]);
    let mut timing = Table::new(&TIMING_HEADER);
    for r in &rows {
        metrics.push(vec![r.method.clone().into(), test.len().into(), r.accuracy.into(), r.perplexity.into(), r.auc.into()])?;
        for (i, v) in r.curve.iter().enumerate() {
            curves.push(vec![r.method.clone().into(), i.into(), (*v).into()])?;
        }
        timing.push(timing_row(&r.method, &r.timing))?;
        run.log(format!("{}: accuracy {:.4}, perplexity {:.4}", r.method, r.accuracy, r.perplexity));
    }
    run.write_table("eval.csv", &metrics)?;
    run.write_table("eval_curves.csv", &curves)?;
    run.write_table("eval_timing.csv", &timing)
}

/// Loads the frozen backbone, the trained refiner and greedy runs over the
/// test pool.
fn eval_inputs(run: &Run) -> Result<(BackboneParams, RefinerParams, EpisodePool, Vec<EpisodeRun>)> {
    let backbone = run.backbone()?;
    let refiner = run.refiner()?;
    let test = run.test_pool()?;
    let runs = stage(run, "generation", || run_pool(&backbone, &test))?;
    Ok((backbone, refiner, test, runs))
}

fn cmd_error_accum(run: &Run) -> Result<()> {
    let (backbone, refiner, test, runs) = eval_inputs(run)?;
    let rep = stage(run, "error accumulation", || exp_error_accumulation_runs(&backbone, &refiner, &runs))?;
    let mut curve = Table::new(&["position", "raw_distance", "refined_distance"]);
    for (i, (a, b)) in rep.raw_curve.iter().zip(&rep.refined_curve).enumerate() {
        curve.push(vec![i.into(), (*a).into(), (*b).into()])?;
    }
    let mut summary = Table::new(&["arm", "episodes", "auc"]);
    summary.push(vec!["raw".into(), test.len().into(), rep.raw_auc.into()])?;
    summary.push(vec!["refined".into(), test.len().into(), rep.refined_auc.into()])?;
    run.log(format!("AUC raw {:.6}, refined {:.6}", rep.raw_auc, rep.refined_auc));
    run.write_table("error_accum_curve.csv", &curve)?;
    run.write_table("error_accum_auc.csv", &summary)?;
    let svg = curves_svg(&rep.raw_curve, &rep.refined_curve);
    let p = run.path("error_accum.svg");
    std::fs::write(&p, svg).map_err(|e| Error::io(&p, e))?;
    run.log("wrote error_accum.svg");
    Ok(())
}

fn cmd_structured(run: &Run) -> Result<()> {
    let (backbone, refiner, test, runs) = eval_inputs(run)?;
    let seeds: Vec<u64> = test.episodes.iter().map(|e| e.seed).collect();
    let rep = stage(run, "structured error", || {
        exp_structured_error_runs(&backbone, &refiner, &runs, &seeds, run.cfg.segment_frac, run.cfg.seed)
    })?;
    let mut t = Table::new(&["arm", "episodes", "segment_len", "accuracy"]);
    for (arm, v) in [
        ("clean_raw", rep.clean_raw),
        ("clean_refined", rep.clean_refined),
        ("permuted_raw", rep.permuted_raw),
        ("permuted_refined", rep.permuted_refined),
    ] {
        t.push(vec![arm.into(), rep.episodes.into(), rep.segment_len.into(), v.into()])?;
    }
    run.log(format!("recovery {:?}", rep.recovery()));
    run.write_table("structured.csv", &t)
}

fn cmd_prefix(run: &Run) -> Result<()> {
    let (backbone, refiner, _, runs) = eval_inputs(run)?;
    let rep = stage(run, "prefix feedback", || exp_prefix_feedback_runs(&backbone, &refiner, &runs, run.cfg.prefix_frac))?;
    let mut t = Table::new(&["prefix", "episodes", "prefix_len", "remaining_accuracy", "remaining_perplexity"]);
    t.push(vec!["raw".into(), rep.episodes.into(), rep.prefix_len.into(), rep.raw_accuracy.into(), rep.raw_perplexity.into()])?;
    t.push(vec![
        "refined".into(),
        rep.episodes.into(),
        rep.prefix_len.into(),
        rep.refined_accuracy.into(),
        rep.refined_perplexity.into(),
    ])?;
    run.write_table("prefix.csv", &t)
}

fn cmd_context(run: &Run) -> Result<()> {
    let backbone = run.backbone()?;
    let refiner = run.refiner()?;
    let test = run.test_pool()?;
    let rows = stage(run, "context sweep", || {
        exp_context_sweep(&backbone, &refiner, &test, &run.cfg.k_values, &run.cfg.grid_spec())
    })?;
    let mut t = Table::new(&[
        "K",
        "episodes",
        "raw_accuracy",
        "refined_accuracy",
        "raw_perplexity",
        "refined_perplexity",
        "raw_auc",
        "refined_auc",
    ]);
    for (k, ev) in rows {
        t.push(vec![
            k.into(),
            ev.episodes.into(),
            ev.raw_accuracy.into(),
            ev.refined_accuracy.into(),
            ev.raw_perplexity.into(),
            ev.refined_perplexity.into(),
            ev.raw_auc.into(),
            ev.refined_auc.into(),
        ])?;
    }
    run.write_table("context.csv", &t)
}

/// Everything the ablations share: the frozen backbone, the training pool
/// with its greedy generations, and greedy runs over the test pool.
pub struct AblationInputs {
    pub backbone: BackboneParams,
    pub train: EpisodePool,
    pub generations: Vec<TokenSeq>,
    pub runs: Vec<EpisodeRun>,
}

fn ablation_inputs(run: &Run) -> Result<AblationInputs> {
    let backbone = run.backbone()?;
    let train = run.train_pool()?;
    let test = run.test_pool()?;
    let generations = stage(run, "train generation", || generate_pool(&backbone, &train))?;
    let runs = stage(run, "test generation", || run_pool(&backbone, &test))?;
    Ok(AblationInputs { backbone, train, generations, runs })
}

/// One refiner per loss, all of the configured variant.
pub fn ablate_loss_table(cfg: &RunConfig, a: &AblationInputs) -> Result<Table> {
    let mut t = Table::new(&["loss", "episodes", "raw_accuracy", "accuracy", "perplexity", "auc"]);
    for loss in [LossKind::Cosine, LossKind::L2] {
        let (params, _) = fit_refiner(cfg, &a.backbone, &a.train, &a.generations, cfg.refiner_variant, loss)?;
        let ev = evaluate_runs(&a.backbone, &params, &a.runs)?;
        t.push(vec![
            loss.name().into(),
            ev.episodes.into(),
            ev.raw_accuracy.into(),
            ev.refined_accuracy.into(),
            ev.refined_perplexity.into(),
            ev.refined_auc.into(),
        ])?;
    }
    Ok(t)
}

/// One refiner per architecture, all trained with the configured loss.
/// `parameter_ratio` is relative to the attention variant.
pub fn ablate_arch_table(cfg: &RunConfig, a: &AblationInputs) -> Result<Table> {
    let reference = cfg.refiner_config(RefinerVariant::Attention).parameter_count() as f64;
    let mut t = Table::new(&["variant", "parameters", "parameter_ratio", "episodes", "raw_accuracy", "accuracy", "perplexity", "auc"]);
    for variant in RefinerVariant::ALL {
        let (params, _) = fit_refiner(cfg, &a.backbone, &a.train, &a.generations, variant, cfg.loss)?;
        let ev = evaluate_runs(&a.backbone, &params, &a.runs)?;
        let n = params.parameter_count();
        t.push(vec![
            variant.name().into(),
            n.into(),
            (n as f64 / reference).into(),
            ev.episodes.into(),
            ev.raw_accuracy.into(),
            ev.refined_accuracy.into(),
            ev.refined_perplexity.into(),
            ev.refined_auc.into(),
        ])?;
    }
    Ok(t)
}

fn cmd_ablate_loss(run: &Run) -> Result<()> {
    let a = ablation_inputs(run)?;
    let t = stage(run, "loss ablation", || ablate_loss_table(&run.cfg, &a))?;
    run.write_table("ablate_loss.csv", &t)
}

fn cmd_ablate_arch(run: &Run) -> Result<()> {
    let a = ablation_inputs(run)?;
    let t = stage(run, "architecture ablation", || ablate_arch_table(&run.cfg, &a))?;
    run.write_table("ablate_arch.csv", &t)
}

fn cmd_timing(run: &Run) -> Result<()> {
    let backbone = run.backbone()?;
    let refiner = run.refiner()?;
    let test = run.test_pool()?;
    let times = stage(run, "timing", || exp_timing(&backbone, &refiner, &test))?;
    let mut t = Table::new(&TIMING_HEADER);
    t.push(timing_row("+Self-Refinement", &times))?;
    run.log(format!(
        "per episode: generation {:.4} s, refinement {:.5} s, nn lookup {:.5} s, detokenize {:.6} s, overhead {:.1}% of generation",
        times.generation,
        times.refinement,
        times.nn_lookup,
        times.detokenize,
        100.0 * times.overhead_ratio()
    ));
    run.write_table("timing.csv", &t)
}
