mod common;

use common::{
    canonical_model, random_model_and_prompt, reference_forward, reference_greedy,
    reference_logits,
};
use sinktrack_core::inject::InjectionPlan;
use sinktrack_core::runtime::{argmax_token, decode_step, embed, generate, prefill, GenOptions};
use sinktrack_core::trace::TraceRecorder;
use sinktrack_core::{Error, Injection, KvCache, Model, ModelConfig};
use sinktrack_core::weights_io::make_toy_model;

const OPTS: GenOptions = GenOptions {
    max_new_tokens: 6,
    record_logits: true,
};

#[test]
fn embed_rejects_missing_bos_and_bad_tokens() {
    let model = canonical_model();
    assert!(matches!(
        embed(&model, &[3, 1, 2], 0),
        Err(Error::MissingBos { .. })
    ));
    assert!(matches!(embed(&model, &[], 0), Err(Error::MissingBos { .. })));
    let vocab = model.config().vocab_size as u32;
    assert!(matches!(
        embed(&model, &[0, vocab], 0),
        Err(Error::TokenOutOfRange { .. })
    ));
}

#[test]
fn embed_copies_embedding_rows() {
    let model = canonical_model();
    let h = embed(&model, &[0, 5, 9], 0).unwrap();
    assert_eq!(h.shape(), &[3, model.config().d_model]);
    assert_eq!(h.row(1), model.weights().embedding.row(5));
    assert_eq!(h.row(2), model.weights().embedding.row(9));
}

#[test]
fn argmax_prefers_lowest_id_on_tie() {
    assert_eq!(argmax_token(&[1.0, 3.0, 3.0, 2.0]), 1);
    assert_eq!(argmax_token(&[5.0]), 0);
    assert_eq!(argmax_token(&[2.0, 2.0, 2.0]), 0);
}

#[test]
fn prefill_hidden_matches_dense_reference() {
    for seed in 0..10u64 {
        let (model, prompt, bos) = random_model_and_prompt(seed, 6);
        let out = prefill(&model, &prompt, bos, None, None).unwrap();
        let reference = reference_forward(&model, &prompt);
        let want = reference.hidden.last().unwrap();
        assert!(
            common::max_abs_diff(&out.last_hidden, want) <= 1e-6,
            "seed {seed}: cached prefill disagrees with dense recompute"
        );
    }
}

#[test]
fn prefill_cache_rows_match_reference_projections() {
    let (model, prompt, bos) = random_model_and_prompt(99, 5);
    let out = prefill(&model, &prompt, bos, None, None).unwrap();
    let reference = reference_forward(&model, &prompt);
    let d = model.config().d_model;
    for layer in 0..model.config().n_layers {
        let input_rows: Vec<Vec<f32>> = if layer == 0 {
            prompt
                .iter()
                .map(|&t| model.weights().embedding.row(t as usize).to_vec())
                .collect()
        } else {
            reference.layer_outputs[layer - 1].clone()
        };
        for (pos, row) in input_rows.iter().enumerate() {
            let mut want_k = vec![0.0f32; d];
            let mut want_v = vec![0.0f32; d];
            for (t, &x) in row.iter().enumerate() {
                for j in 0..d {
                    want_k[j] += x * model.layer(layer).w_k.data()[t * d + j];
                    want_v[j] += x * model.layer(layer).w_v.data()[t * d + j];
                }
            }
            assert!(
                common::max_abs_diff(out.cache.k_row(layer, pos), &want_k) <= 1e-6,
                "layer {layer} pos {pos}: cached K disagrees"
            );
            assert!(
                common::max_abs_diff(out.cache.v_row(layer, pos), &want_v) <= 1e-6,
                "layer {layer} pos {pos}: cached V disagrees"
            );
        }
    }
}

#[test]
fn cached_decode_matches_full_recompute() {
    for seed in 20..30u64 {
        let (model, prompt, bos) = random_model_and_prompt(seed, 5);
        let out = generate(&model, &prompt, bos, None, &OPTS, None).unwrap();
        let (want_tokens, want_logits) = reference_greedy(&model, &prompt, OPTS.max_new_tokens);
        assert_eq!(out.tokens, want_tokens, "seed {seed}: token paths diverge");
        let got_logits = out.step_logits.unwrap();
        for (g, (got, want)) in got_logits.iter().zip(&want_logits).enumerate() {
            assert!(
                common::max_abs_diff(got, want) <= 1e-6,
                "seed {seed} step {g}: cached logits drift from recompute"
            );
        }
    }
}

#[test]
fn mode_none_plan_is_transparent() {
    let (model, prompt, bos) = random_model_and_prompt(3, 8);
    let plain = generate(&model, &prompt, bos, None, &OPTS, None).unwrap();
    let plan = InjectionPlan::none();
    let resolved = sinktrack_core::inject::validate_plan(&plan, model.config()).unwrap();
    let inj = Injection::new(&resolved, None);
    let with_plan = generate(&model, &prompt, bos, Some(&inj), &OPTS, None).unwrap();
    assert_eq!(plain.tokens, with_plan.tokens);
    common::assert_bits_equal(
        &plain.step_logits.unwrap().concat(),
        &with_plan.step_logits.unwrap().concat(),
        "logits under a do-nothing plan",
    );
}

#[test]
fn capacity_limits_are_enforced() {
    let config = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab_size: 16,
        max_seq: 4,
        ln_eps: 1e-5,
    };
    let model = make_toy_model(&config, 11).unwrap();
    let long: Vec<u32> = vec![0, 1, 2, 3, 4];
    assert!(matches!(
        prefill(&model, &long, 0, None, None),
        Err(Error::CacheFull { .. })
    ));

    // a full cache rejects further decode steps
    let out = prefill(&model, &[0, 1, 2, 3], 0, None, None).unwrap();
    let mut cache = out.cache;
    assert!(matches!(
        decode_step(&model, &mut cache, &out.last_hidden, None, 1),
        Err(Error::CacheFull { .. })
    ));
}

#[test]
fn trace_counts_steps_and_positions() {
    let (model, prompt, bos) = random_model_and_prompt(8, 4);
    let cfg = *model.config();
    let mut rec = TraceRecorder::in_memory();
    let out = generate(
        &model,
        &prompt,
        bos,
        None,
        &GenOptions {
            max_new_tokens: 3,
            record_logits: false,
        },
        Some(&mut rec),
    )
    .unwrap();
    assert_eq!(out.tokens.len(), 3);
    let trace = rec.finish().unwrap().unwrap();

    let per_query = cfg.n_layers * cfg.n_heads;
    assert_eq!(trace.len(), per_query * (prompt.len() + 3));

    for record in trace.records() {
        if record.step == 0 {
            assert!(record.qpos < prompt.len());
        } else {
            // step g attends from the row that produced token g
            assert_eq!(record.qpos, prompt.len() + record.step - 1);
        }
        assert_eq!(record.weights.len(), record.qpos + 1);
    }
    assert_eq!(trace.bos_values().len(), cfg.n_layers);
}

#[test]
fn streamed_trace_matches_in_memory_trace() {
    let (model, prompt, bos) = random_model_and_prompt(40, 5);
    let mut mem = TraceRecorder::in_memory();
    generate(&model, &prompt, bos, None, &OPTS, Some(&mut mem)).unwrap();
    let mem_trace = mem.finish().unwrap().unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    let mut streamed = TraceRecorder::streaming(&path).unwrap();
    generate(&model, &prompt, bos, None, &OPTS, Some(&mut streamed)).unwrap();
    assert!(streamed.finish().unwrap().is_none());

    let loaded = sinktrack_core::AttentionTrace::read_jsonl(&path).unwrap();
    assert_eq!(loaded.len(), mem_trace.len());
    for (a, b) in loaded.records().iter().zip(mem_trace.records()) {
        assert_eq!((a.step, a.layer, a.head, a.qpos), (b.step, b.layer, b.head, b.qpos));
        common::assert_bits_equal(&a.weights, &b.weights, "streamed weight row");
    }
}

#[test]
fn logits_depend_only_on_last_hidden_row() {
    let model = canonical_model();
    let out = prefill(&model, &[0, 7, 3, 12], 0, None, None).unwrap();
    let logits = sinktrack_core::runtime::logits_for(&model, &out.last_hidden).unwrap();
    let want = reference_logits(&model, &out.last_hidden);
    assert!(common::max_abs_diff(&logits, &want) <= 1e-5);
    assert_eq!(logits.len(), model.config().vocab_size);
}

#[test]
fn fresh_cache_reports_consistent_lengths() {
    let model = canonical_model();
    let cache = KvCache::new(model.config());
    assert_eq!(cache.len().unwrap(), 0);
    assert!(cache.is_empty());
    let out = prefill(&model, &[0, 1, 2], 0, None, None).unwrap();
    assert_eq!(out.cache.len().unwrap(), 3);
    for layer in 0..model.config().n_layers {
        assert_eq!(out.cache.layer_len(layer), 3);
    }
}

#[allow(dead_code)]
fn _type_checks(model: &Model) {
    let _ = model.config().head_dim();
}
