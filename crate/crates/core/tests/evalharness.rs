use vqrefine::backbone::{BackboneConfig, BackboneParams, LoraAdapters};
use vqrefine::evalharness::*;
use vqrefine::numkernel::Rng;
use vqrefine::refiner::{embed_tokens, nn_decode, RefinerConfig, RefinerParams, RefinerVariant};
use vqrefine::synthdata::{EpisodePool, GridSpec, Split, Task};
use vqrefine::Error;

fn spec() -> GridSpec {
    GridSpec { height: 4, width: 4, ..GridSpec::default() }
}

fn backbone() -> BackboneParams {
    let cfg = BackboneConfig { vocab: 32, d_model: 16, layers: 2, heads: 4, max_len: 160 };
    let mut p = BackboneParams::init(cfg, 5).unwrap();
    p.freeze();
    p
}

fn pool(n: usize) -> EpisodePool {
    EpisodePool::generate(Task::Inpaint, 2, Split::Test, 1, n, &spec()).unwrap()
}

fn identity_refiner() -> RefinerParams {
    RefinerParams::init(RefinerConfig::new(RefinerVariant::Attention, 16, 16), 0).unwrap()
}

fn trained_looking_refiner() -> RefinerParams {
    let mut p = identity_refiner();
    let mut rng = Rng::new(9);
    for name in ["ref.attn.wo", "ref.ffn.w2"] {
        let t = p.get_mut(name).unwrap();
        t.data_mut().iter_mut().for_each(|x| *x = 0.5 * rng.normal());
    }
    p
}

#[test]
fn identity_refiner_makes_every_arm_identical() {
    let (bb, r, pool) = (backbone(), identity_refiner(), pool(6));
    let ev = evaluate(&bb, &r, &pool).unwrap();
    assert_eq!(ev.raw_accuracy, ev.refined_accuracy);
    assert_eq!(ev.raw_perplexity, ev.refined_perplexity);
    assert_eq!(ev.raw_auc, ev.refined_auc);

    let acc = exp_error_accumulation(&bb, &r, &pool).unwrap();
    assert_eq!(acc.raw_curve, acc.refined_curve);
    assert_eq!(acc.raw_curve.len(), 16);
    assert!(acc.raw_curve.iter().all(|v| v.is_finite()));

    let st = exp_structured_error(&bb, &r, &pool, 0.1, 3).unwrap();
    assert_eq!(st.permuted_raw, st.permuted_refined);
    assert_eq!(st.clean_raw, st.clean_refined);
    assert_eq!(st.segment_len, 2);

    let pf = exp_prefix_feedback(&bb, &r, &pool, 0.273).unwrap();
    assert_eq!(pf.prefix_len, 4);
    assert_eq!(pf.raw_accuracy, pf.refined_accuracy);
    assert_eq!(pf.raw_perplexity, pf.refined_perplexity);

    let rows = compare_report(&bb, &r, None, None, &pool).unwrap();
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].accuracy, rows[1].accuracy);
    assert_eq!(rows[0].auc, rows[1].auc);
}

#[test]
fn experiments_reject_empty_pools() {
    let (bb, r) = (backbone(), identity_refiner());
    let empty = EpisodePool { split: Split::Test, episodes: vec![] };
    assert!(matches!(exp_error_accumulation(&bb, &r, &empty), Err(Error::Contract(_))));
    assert!(matches!(evaluate(&bb, &r, &empty), Err(Error::Contract(_))));
}

#[test]
fn full_reversal_hurts_raw_decoding() {
    let bb = backbone();
    let tokens: Vec<u32> = (1..=16).collect();
    let e = embed_tokens(&bb.embed, &tokens).unwrap();
    let rev: Vec<usize> = (0..16).rev().collect();
    let permuted = permute_segment(&e, 0, &rev).unwrap();
    let clean = token_accuracy(&nn_decode(&e, &bb.embed).unwrap(), &tokens).unwrap();
    let broken = token_accuracy(&nn_decode(&permuted, &bb.embed).unwrap(), &tokens).unwrap();
    assert_eq!(clean, 1.0);
    assert!(broken < clean);

    let ident: Vec<usize> = (0..5).collect();
    assert_eq!(permute_segment(&e, 3, &ident).unwrap(), e);
    assert!(permute_segment(&e, 12, &ident).is_err());
    assert_eq!(segment_len(1.0, 64).unwrap(), 64);
    assert_eq!(segment_len(0.1, 64).unwrap(), 7);
    assert!(segment_len(0.0, 64).is_err());
}

#[test]
fn empty_prefix_reduces_to_plain_generation() {
    let (bb, r, pool) = (backbone(), trained_looking_refiner(), pool(4));
    let pf = exp_prefix_feedback(&bb, &r, &pool, 0.01).unwrap();
    assert_eq!(pf.prefix_len, 0);
    assert_eq!(pf.raw_accuracy, pf.refined_accuracy);
    let ev = evaluate(&bb, &r, &pool).unwrap();
    assert_eq!(pf.raw_accuracy, ev.raw_accuracy);
    assert_eq!(prefix_len(0.273, 64).unwrap(), 17);
    assert!(prefix_len(1.0, 64).is_err());
}

#[test]
fn context_sweep_rows_and_capacity() {
    let (bb, r, pool) = (backbone(), trained_looking_refiner(), pool(3));
    let one = exp_context_sweep(&bb, &r, &pool, &[1], &spec()).unwrap();
    assert_eq!(one.len(), 1);
    assert_eq!(one[0].0, 1);
    let again = exp_context_sweep(&bb, &r, &pool, &[1], &spec()).unwrap();
    assert_eq!(one, again);
    // (2K + 2) * 16 tokens exceed the 160-token backbone at K = 5.
    assert!(matches!(
        exp_context_sweep(&bb, &r, &pool, &[1, 5], &spec()),
        Err(Error::Capacity { len: 192, capacity: 160 })
    ));
}

#[test]
fn comparison_rows_and_timing_accounting() {
    let (bb, r, test) = (backbone(), trained_looking_refiner(), pool(3));
    let train = EpisodePool::generate(Task::Inpaint, 2, Split::Train, 1, 8, &spec()).unwrap();
    let lora = LoraAdapters::init(&bb.config, 8, 0).unwrap();
    let rows = compare_report(&bb, &r, Some(&lora), Some(&train), &test).unwrap();
    let names: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
    assert_eq!(names, [METHOD_LVM, METHOD_RETRIEVAL, METHOD_LORA, METHOD_REFINE]);
    // Fresh adapters are an identity, so the LoRA row reproduces the LVM row.
    assert_eq!(rows[0].accuracy, rows[2].accuracy);
    for row in &rows {
        let t = row.timing;
        for v in [t.generation, t.refinement, t.nn_lookup, t.detokenize] {
            assert!(v >= 0.0);
        }
        let sum = t.generation + t.refinement + t.nn_lookup + t.detokenize;
        assert!((t.total() - sum).abs() < 1e-12);
        assert_eq!(row.curve.len(), 16);
    }
    let timing = exp_timing(&bb, &r, &test).unwrap();
    assert!(timing.generation > 0.0 && timing.refinement > 0.0);
}
