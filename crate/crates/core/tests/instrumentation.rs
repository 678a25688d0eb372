mod common;

use common::{oracle_softmax, oracle_spearman_rho, random_model_and_prompt};
use proptest::prelude::*;
use sinktrack_core::analysis::{
    self, drift_report, drift_test, mean_attention_to_bos_per_layer, spearman_layers,
    synthetic_prompt, value_norm_report,
};
use sinktrack_core::anchor::{InfoSource, SourceForm};
use sinktrack_core::inject::{validate_plan, InjectionPlan, LayerSchedule, Mode};
use sinktrack_core::runtime::{generate, GenOptions};
use sinktrack_core::trace::TraceRecorder;
use sinktrack_core::{AttentionTrace, Error, Injection};

#[test]
fn captured_scores_reproduce_the_recorded_weights() {
    let (model, prompt, bos) = random_model_and_prompt(70, 6);
    let head_dim = model.config().head_dim();
    let scale = 1.0 / (head_dim as f32).sqrt();

    let mut rec = TraceRecorder::with_qk_capture();
    generate(
        &model,
        &prompt,
        bos,
        None,
        &GenOptions {
            max_new_tokens: 4,
            record_logits: false,
        },
        Some(&mut rec),
    )
    .unwrap();

    assert!(!rec.qk_records().is_empty());
    let weights_by_key: std::collections::HashMap<_, _> = rec
        .trace()
        .unwrap()
        .records()
        .iter()
        .map(|r| ((r.step, r.layer, r.head, r.qpos), r.weights.clone()))
        .collect();

    for qk in rec.qk_records() {
        let scores: Vec<f32> = qk
            .keys
            .iter()
            .map(|k| {
                let mut s = 0.0f32;
                for (a, b) in qk.q.iter().zip(k) {
                    s += a * b;
                }
                s * scale
            })
            .collect();
        let want = oracle_softmax(&scores);
        let got = &weights_by_key[&(qk.step, qk.layer, qk.head, qk.qpos)];
        assert_eq!(got.len(), want.len());
        assert!(
            common::max_abs_diff(got, &want) <= 1e-6,
            "recorded weights disagree with a softmax over the captured scores"
        );
    }
}

#[test]
fn drift_report_averages_by_hand() {
    // two layers, two heads, one decode step at qpos 3
    let mut trace = AttentionTrace::new();
    trace.record(1, 0, 0, 3, vec![0.4, 0.3, 0.2, 0.1]).unwrap();
    trace.record(1, 0, 1, 3, vec![0.6, 0.2, 0.1, 0.1]).unwrap();
    trace.record(1, 1, 0, 3, vec![0.2, 0.3, 0.3, 0.2]).unwrap();
    trace.record(1, 1, 1, 3, vec![0.4, 0.4, 0.1, 0.1]).unwrap();

    let report = drift_report(&trace, 0).unwrap();
    assert_eq!(report.rows.len(), 1);
    let row = &report.rows[0];
    assert_eq!(row.step, 1);
    assert_eq!(row.seq_position, 4);
    // mean over the four rows: position 0 -> (0.4+0.6+0.2+0.4)/4 = 0.4
    assert!((row.attn_to_bos - 0.4).abs() <= 1e-7);
    // mean row elsewhere: pos1 0.3, pos2 0.175, pos3 0.125 -> max 0.3
    assert!((row.max_attn_others - 0.3).abs() <= 1e-7);
    assert!((row.ratio - 0.4 / 0.3).abs() <= 1e-6);
    // per-layer means at the anchor: layer0 0.5, layer1 0.3
    assert!((row.per_layer_attn_to_bos[0] - 0.5).abs() <= 1e-7);
    assert!((row.per_layer_attn_to_bos[1] - 0.3).abs() <= 1e-7);
}

#[test]
fn drift_report_survives_a_save_and_reload() {
    let (model, prompt, bos) = random_model_and_prompt(71, 5);
    let mut rec = TraceRecorder::in_memory();
    generate(
        &model,
        &prompt,
        bos,
        None,
        &GenOptions {
            max_new_tokens: 5,
            record_logits: false,
        },
        Some(&mut rec),
    )
    .unwrap();
    let trace = rec.finish().unwrap().unwrap();
    let live = drift_report(&trace, 0).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.jsonl");
    trace.write_jsonl(&path).unwrap();
    let reloaded = AttentionTrace::read_jsonl(&path).unwrap();
    let offline = drift_report(&reloaded, 0).unwrap();

    assert_eq!(live.rows.len(), offline.rows.len());
    for (a, b) in live.rows.iter().zip(&offline.rows) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.seq_position, b.seq_position);
        assert_eq!(a.attn_to_bos.to_bits(), b.attn_to_bos.to_bits());
        assert_eq!(a.max_attn_others.to_bits(), b.max_attn_others.to_bits());
        assert_eq!(a.ratio.to_bits(), b.ratio.to_bits());
    }
}

#[test]
fn per_layer_means_skip_the_position_zero_query() {
    let mut trace = AttentionTrace::new();
    // the first query can only see itself; its weight is forced to 1 and
    // would inflate any anchor average
    trace.record(0, 0, 0, 0, vec![1.0]).unwrap();
    trace.record(0, 0, 0, 1, vec![0.3, 0.7]).unwrap();
    trace.record(0, 0, 0, 2, vec![0.5, 0.25, 0.25]).unwrap();
    let means = mean_attention_to_bos_per_layer(&trace, 0).unwrap();
    assert_eq!(means.len(), 1);
    assert!((means[0] - 0.4).abs() <= 1e-7);

    let mut only_first = AttentionTrace::new();
    only_first.record(0, 0, 0, 0, vec![1.0]).unwrap();
    assert!(matches!(
        mean_attention_to_bos_per_layer(&only_first, 0),
        Err(Error::EmptyTrace)
    ));
}

#[test]
fn rank_correlation_matches_brute_force() {
    let mut rng = common::TestRng::new(500);
    for case in 0..100 {
        let n = 3 + (rng.below(6) as usize);
        let x: Vec<f64> = (0..n).map(|_| rng.below(1000) as f64 / 100.0).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.below(1000) as f64 / 100.0).collect();
        let want = oracle_spearman_rho(&x, &y);
        if !want.is_finite() {
            continue; // constant input, rejected by the library
        }
        let got = spearman_layers(&x, &y).unwrap();
        assert_eq!(
            got.rho.to_bits(),
            want.to_bits(),
            "case {case}: rho {} vs oracle {}",
            got.rho,
            want
        );
        assert_eq!(got.n, n);
    }
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 1 {
        return vec![vec![0]];
    }
    let mut out = Vec::new();
    for rest in permutations(n - 1) {
        for slot in 0..n {
            let mut perm = rest.clone();
            perm.insert(slot, n - 1);
            out.push(perm);
        }
    }
    out
}

#[test]
fn small_sample_p_values_match_exhaustive_enumeration() {
    let mut rng = common::TestRng::new(900);
    for case in 0..20 {
        let n = 5 + (rng.below(3) as usize); // 5..=7, inside the exact regime
        let x: Vec<f64> = (0..n).map(|_| rng.below(10_000) as f64).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.below(10_000) as f64).collect();
        let observed = oracle_spearman_rho(&x, &y);
        if !observed.is_finite() {
            continue;
        }
        let mut at_least_as_extreme = 0usize;
        let perms = permutations(n);
        for perm in &perms {
            let shuffled: Vec<f64> = perm.iter().map(|&i| y[i]).collect();
            let rho = oracle_spearman_rho(&x, &shuffled);
            if rho.abs() >= observed.abs() - 1e-12 {
                at_least_as_extreme += 1;
            }
        }
        let want = at_least_as_extreme as f64 / perms.len() as f64;
        let got = spearman_layers(&x, &y).unwrap();
        assert!(
            (got.p_value - want).abs() <= 1e-12,
            "case {case} (n={n}): p {} vs exhaustive {}",
            got.p_value,
            want
        );
    }
}

proptest! {
    #[test]
    fn rho_is_invariant_under_rising_transforms(
        mut xs in prop::collection::vec(-1000i32..1000, 4..9),
        ys in prop::collection::vec(-1000i32..1000, 9)
    ) {
        xs.sort_unstable();
        xs.dedup();
        prop_assume!(xs.len() >= 3);
        let x: Vec<f64> = xs.iter().map(|&v| v as f64).collect();
        let y: Vec<f64> = ys.iter().take(x.len()).map(|&v| v as f64).collect();
        prop_assume!(y.iter().any(|&v| v != y[0]));

        let base = spearman_layers(&x, &y).unwrap();
        // cubing preserves order over the reals, so ranks cannot move
        let cubed: Vec<f64> = x.iter().map(|&v| v * v * v).collect();
        let transformed = spearman_layers(&cubed, &y).unwrap();
        prop_assert_eq!(base.rho.to_bits(), transformed.rho.to_bits());
        prop_assert_eq!(base.p_value.to_bits(), transformed.p_value.to_bits());

        let against_self = spearman_layers(&x, &cubed).unwrap();
        prop_assert!((against_self.rho - 1.0).abs() <= 1e-12);
        let negated: Vec<f64> = x.iter().map(|&v| -v).collect();
        let reversed = spearman_layers(&x, &negated).unwrap();
        prop_assert!((reversed.rho + 1.0).abs() <= 1e-12);
    }
}

#[test]
fn value_norms_compare_run_pairs() {
    let (model, prompt, bos) = random_model_and_prompt(72, 6);
    let target = model.config().n_layers - 1;
    let p = InjectionPlan {
        mode: Mode::Hard,
        schedule: LayerSchedule::Explicit(vec![target]),
        strength: None,
        source_form: SourceForm::Pooled,
    };
    let resolved = validate_plan(&p, model.config()).unwrap();
    let info = InfoSource::from_prompt(&model, &prompt, SourceForm::Pooled, None).unwrap();
    let inj = Injection::new(&resolved, Some(&info));

    let report = analysis::value_norm_for_runs(&model, &prompt, bos, &inj).unwrap();
    assert_eq!(report.rows.len(), model.config().n_layers);
    for row in &report.rows {
        assert_eq!(row.difference, row.l1_after - row.l1_before);
        if row.layer < target {
            // upstream layers never saw the rewrite
            assert_eq!(row.difference, 0.0, "layer {} moved", row.layer);
        }
    }
    let hit = &report.rows[target];
    assert!(
        hit.difference != 0.0,
        "the rewritten value row kept its norm exactly, injection had no effect"
    );

    // swapping the runs flips every difference sign exactly
    let before = analysis::bos_values_for_run(&model, &prompt, bos, None).unwrap();
    let after = analysis::bos_values_for_run(&model, &prompt, bos, Some(&inj)).unwrap();
    let fwd = value_norm_report(&before, &after).unwrap();
    let rev = value_norm_report(&after, &before).unwrap();
    for (f, r) in fwd.rows.iter().zip(&rev.rows) {
        assert_eq!(f.difference, -r.difference);
    }
}

#[test]
fn drift_test_reports_the_requested_checkpoints() {
    let (model, _prompt, bos) = random_model_and_prompt(73, 4);
    let vocab = model.config().vocab_size;
    let prompt_len = 8;
    let out = drift_test(&model, None, bos, prompt_len, 6, &[1, 3, 6]).unwrap();

    assert_eq!(out.report.prompt_len, prompt_len);
    assert_eq!(out.report.gen_steps, 6);
    assert_eq!(out.report.rows.len(), 3);
    for (row, &want_idx) in out.report.rows.iter().zip(&[1usize, 3, 6]) {
        assert_eq!(row.gen_idx, want_idx);
        assert_eq!(row.seq_position, prompt_len + want_idx);
        assert!(row.ratio.is_finite() && row.ratio >= 0.0);
    }

    // the trace must regenerate the same numbers offline
    let full = drift_report(&out.trace, 0).unwrap();
    for row in &out.report.rows {
        let from_trace = full
            .rows
            .iter()
            .find(|r| r.step == row.gen_idx)
            .expect("checkpoint missing from trace");
        assert_eq!(from_trace.attn_to_bos.to_bits(), row.attn_to_bos.to_bits());
        assert_eq!(
            from_trace.max_attn_others.to_bits(),
            row.max_attn_others.to_bits()
        );
    }

    assert_eq!(synthetic_prompt(5, vocab, bos), {
        let mut p = vec![bos];
        p.extend((1..5).map(|i| (i % vocab) as u32));
        p
    });

    assert!(matches!(
        drift_test(&model, None, bos, prompt_len, 4, &[5]),
        Err(Error::CheckpointOutOfRange { .. })
    ));
    assert!(matches!(
        drift_test(&model, None, bos, prompt_len, 4, &[0]),
        Err(Error::CheckpointOutOfRange { .. })
    ));
}

#[test]
fn bench_report_is_well_formed() {
    let (model, prompt, bos) = random_model_and_prompt(74, 6);
    let p = InjectionPlan {
        mode: Mode::Sinktrack,
        schedule: LayerSchedule::Explicit(vec![0]),
        strength: None,
        source_form: SourceForm::Full,
    };
    let resolved = validate_plan(&p, model.config()).unwrap();
    let info = InfoSource::from_prompt(&model, &prompt, SourceForm::Full, None).unwrap();
    let inj = Injection::new(&resolved, Some(&info));

    let report = analysis::bench_prefill(&model, &inj, &prompt, bos, 5).unwrap();
    assert_eq!(report.reps, 5);
    assert_eq!(report.prompt_len, prompt.len());
    assert!(report.baseline.mean_ms > 0.0);
    assert!(report.injected.mean_ms > 0.0);
    assert!(report.baseline.std_ms >= 0.0);
    assert!(
        (report.overhead_ms - (report.injected.mean_ms - report.baseline.mean_ms)).abs() <= 1e-12
    );
    assert!(
        (report.overhead_frac - report.overhead_ms / report.baseline.mean_ms).abs() <= 1e-12
    );
}
