//! Analyses over recorded attention: sink drift, rank correlation of
//! layer-wise attention, and L1 value-norm comparison. Each report
//! serializes to JSON or CSV with a fixed column order (documented per
//! type), and every number is computed in f64 before any formatting.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::anchor::InfoSource;
use crate::error::{Error, Result};
use crate::inject::Injection;
use crate::model::Model;
use crate::runtime::{self, GenOptions};
use crate::tensor;
use crate::trace::{AttentionTrace, TraceRecorder, WeightRecord};

// --- drift ------------------------------------------------------------------

/// One decode step's attention summary. `seq_position` is the 1-based
/// position of the query row (prompt length + generated index).
#[derive(Debug, Clone, Serialize)]
pub struct DriftRow {
    pub step: usize,
    pub seq_position: usize,
    pub attn_to_bos: f64,
    pub max_attn_others: f64,
    pub ratio: f64,
    pub per_layer_attn_to_bos: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftReport {
    pub bos_position: usize,
    pub rows: Vec<DriftRow>,
}

/// Averages each decode step's weight rows over heads and layers.
/// `attn_to_bos` is that average at the BOS key position, `max_attn_others`
/// the maximum over every other key position, `ratio` their quotient.
pub fn drift_report(trace: &AttentionTrace, bos_position: usize) -> Result<DriftReport> {
    if trace.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let mut steps: Vec<usize> = trace
        .records()
        .iter()
        .filter(|r| r.step >= 1)
        .map(|r| r.step)
        .collect();
    steps.sort_unstable();
    steps.dedup();

    let mut rows = Vec::with_capacity(steps.len());
    for step in steps {
        let records: Vec<&WeightRecord> = trace
            .records()
            .iter()
            .filter(|r| r.step == step)
            .collect();
        let qpos = records[0].qpos;
        for r in &records {
            if r.qpos != qpos {
                return Err(Error::TraceMixedPositions {
                    step,
                    a: qpos,
                    b: r.qpos,
                });
            }
        }
        if bos_position > qpos {
            return Err(Error::BosOutOfRange {
                bos: bos_position,
                len: qpos + 1,
            });
        }

        let mut avg = vec![0.0f64; qpos + 1];
        for r in &records {
            for (a, &w) in avg.iter_mut().zip(&r.weights) {
                *a += w as f64;
            }
        }
        for a in avg.iter_mut() {
            *a /= records.len() as f64;
        }
        let attn_to_bos = avg[bos_position];
        let max_attn_others = avg
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != bos_position)
            .map(|(_, &v)| v)
            .fold(0.0f64, f64::max);

        let max_layer = records.iter().map(|r| r.layer).max().unwrap();
        let mut per_layer = Vec::with_capacity(max_layer + 1);
        for layer in 0..=max_layer {
            let layer_records: Vec<&&WeightRecord> =
                records.iter().filter(|r| r.layer == layer).collect();
            if layer_records.is_empty() {
                return Err(Error::TraceLayerGap { layer, max_layer });
            }
            let sum: f64 = layer_records
                .iter()
                .map(|r| r.weights[bos_position] as f64)
                .sum();
            per_layer.push(sum / layer_records.len() as f64);
        }

        rows.push(DriftRow {
            step,
            seq_position: qpos + 1,
            attn_to_bos,
            max_attn_others,
            ratio: attn_to_bos / max_attn_others,
            per_layer_attn_to_bos: per_layer,
        });
    }
    Ok(DriftReport {
        bos_position,
        rows,
    })
}

impl DriftReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Columns: step, seq_position, attn_to_bos, max_attn_others, ratio,
    /// then attn_to_bos_layer{l} for each layer in order.
    pub fn to_csv(&self) -> String {
        let n_layers = self.rows.first().map_or(0, |r| r.per_layer_attn_to_bos.len());
        let mut out = String::from("step,seq_position,attn_to_bos,max_attn_others,ratio");
        for l in 0..n_layers {
            out.push_str(&format!(",attn_to_bos_layer{l}"));
        }
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}",
                r.step, r.seq_position, r.attn_to_bos, r.max_attn_others, r.ratio
            ));
            for v in &r.per_layer_attn_to_bos {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Per-layer mean attention paid to the BOS key by every recorded query row
/// past position 0 (the BOS self-row is trivially 1 and excluded). This is
/// the per-layer scalar the rank-correlation analysis compares.
pub fn mean_attention_to_bos_per_layer(
    trace: &AttentionTrace,
    bos_position: usize,
) -> Result<Vec<f64>> {
    let qualifying: Vec<&WeightRecord> = trace
        .records()
        .iter()
        .filter(|r| r.qpos >= 1)
        .collect();
    if qualifying.is_empty() {
        return Err(Error::EmptyTrace);
    }
    let max_layer = qualifying.iter().map(|r| r.layer).max().unwrap();
    let mut sums = vec![0.0f64; max_layer + 1];
    let mut counts = vec![0usize; max_layer + 1];
    for r in qualifying {
        if bos_position >= r.weights.len() {
            return Err(Error::BosOutOfRange {
                bos: bos_position,
                len: r.weights.len(),
            });
        }
        sums[r.layer] += r.weights[bos_position] as f64;
        counts[r.layer] += 1;
    }
    let mut means = Vec::with_capacity(max_layer + 1);
    for layer in 0..=max_layer {
        if counts[layer] == 0 {
            return Err(Error::TraceLayerGap { layer, max_layer });
        }
        means.push(sums[layer] / counts[layer] as f64);
    }
    Ok(means)
}

// --- rank correlation -------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct SpearmanResult {
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

impl SpearmanResult {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Columns: rho, p_value, n.
    pub fn to_csv(&self) -> String {
        format!("rho,p_value,n\n{},{},{}\n", self.rho, self.p_value, self.n)
    }
}

/// 1-based ranks with ties assigned their average rank.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).expect("finite values"));
    let mut out = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        // positions i..=j (0-based) share the average of ranks i+1..=j+1
        let avg = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &idx[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

/// Pearson correlation accumulated in index order.
fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len() as f64;
    let mut sx = 0.0;
    let mut sy = 0.0;
    for i in 0..x.len() {
        sx += x[i];
        sy += y[i];
    }
    let (mx, my) = (sx / n, sy / n);
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    if vx == 0.0 || vy == 0.0 {
        return Err(Error::DegenerateRanks);
    }
    Ok(cov / (vx * vy).sqrt())
}

fn erf(x: f64) -> f64 {
    // Abramowitz & Stegun 7.1.26, |error| <= 1.5e-7.
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

const EXACT_PERMUTATION_MAX_N: usize = 8;

/// Two-sided p-value under the permutation null. Exact for n up to 8 (all
/// n! permutations); beyond that a normal approximation with
/// z = rho * sqrt(n - 1).
fn spearman_p(rank_x: &[f64], rank_y: &[f64], rho: f64, n: usize) -> Result<f64> {
    if n <= EXACT_PERMUTATION_MAX_N {
        let mut perm = rank_y.to_vec();
        let mut counts = [0usize; 2]; // [at least as extreme, total]
        let threshold = rho.abs() - 1e-12;
        permute_all(&mut perm, 0, &mut |p| {
            let r = pearson(rank_x, p).expect("rank variance fixed under permutation");
            counts[1] += 1;
            if r.abs() >= threshold {
                counts[0] += 1;
            }
        });
        Ok(counts[0] as f64 / counts[1] as f64)
    } else {
        let z = rho * ((n - 1) as f64).sqrt();
        Ok((2.0 * (1.0 - normal_cdf(z.abs()))).clamp(0.0, 1.0))
    }
}

fn permute_all(xs: &mut [f64], k: usize, visit: &mut impl FnMut(&[f64])) {
    if k == xs.len() {
        visit(xs);
        return;
    }
    for i in k..xs.len() {
        xs.swap(k, i);
        permute_all(xs, k + 1, visit);
        xs.swap(k, i);
    }
}

/// Spearman rank correlation between two per-layer scalar profiles, with a
/// two-sided p-value. Inputs must be finite, equally long, and have at
/// least 3 entries.
pub fn spearman_layers(before: &[f64], after: &[f64]) -> Result<SpearmanResult> {
    if before.len() != after.len() {
        return Err(Error::LengthMismatch {
            left: before.len(),
            right: after.len(),
        });
    }
    let n = before.len();
    if n < 3 {
        return Err(Error::TooFewValues { min: 3, got: n });
    }
    if !before.iter().chain(after).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("spearman_layers"));
    }
    let rb = ranks(before);
    let ra = ranks(after);
    let rho = pearson(&rb, &ra)?;
    let p_value = spearman_p(&rb, &ra, rho, n)?;
    Ok(SpearmanResult { rho, p_value, n })
}

#[derive(Debug, Clone, Serialize)]
pub struct VectorSpearman {
    pub per_layer_rho: Vec<f64>,
    pub mean_rho: f64,
}

/// Secondary statistic: for each layer, the profile over query positions of
/// mean attention to BOS is rank-correlated between two traces, and the
/// resulting rho values are averaged. Both traces must cover the same
/// layers and query positions.
pub fn spearman_weight_vectors(
    before: &AttentionTrace,
    after: &AttentionTrace,
    bos_position: usize,
) -> Result<VectorSpearman> {
    let profile = |trace: &AttentionTrace| -> Result<Vec<Vec<(usize, f64)>>> {
        let qualifying: Vec<&WeightRecord> =
            trace.records().iter().filter(|r| r.qpos >= 1).collect();
        if qualifying.is_empty() {
            return Err(Error::EmptyTrace);
        }
        let max_layer = qualifying.iter().map(|r| r.layer).max().unwrap();
        let mut out = Vec::with_capacity(max_layer + 1);
        for layer in 0..=max_layer {
            let mut qpositions: Vec<usize> = qualifying
                .iter()
                .filter(|r| r.layer == layer)
                .map(|r| r.qpos)
                .collect();
            qpositions.sort_unstable();
            qpositions.dedup();
            if qpositions.is_empty() {
                return Err(Error::TraceLayerGap { layer, max_layer });
            }
            let mut points = Vec::with_capacity(qpositions.len());
            for q in qpositions {
                let rows: Vec<&&WeightRecord> = qualifying
                    .iter()
                    .filter(|r| r.layer == layer && r.qpos == q)
                    .collect();
                for r in &rows {
                    if bos_position >= r.weights.len() {
                        return Err(Error::BosOutOfRange {
                            bos: bos_position,
                            len: r.weights.len(),
                        });
                    }
                }
                let mean = rows
                    .iter()
                    .map(|r| r.weights[bos_position] as f64)
                    .sum::<f64>()
                    / rows.len() as f64;
                points.push((q, mean));
            }
            out.push(points);
        }
        Ok(out)
    };

    let pb = profile(before)?;
    let pa = profile(after)?;
    if pb.len() != pa.len() {
        return Err(Error::LengthMismatch {
            left: pb.len(),
            right: pa.len(),
        });
    }
    let mut per_layer_rho = Vec::with_capacity(pb.len());
    for (b, a) in pb.iter().zip(&pa) {
        if b.len() != a.len() || b.iter().map(|p| p.0).ne(a.iter().map(|p| p.0)) {
            return Err(Error::LengthMismatch {
                left: b.len(),
                right: a.len(),
            });
        }
        let vb: Vec<f64> = b.iter().map(|p| p.1).collect();
        let va: Vec<f64> = a.iter().map(|p| p.1).collect();
        per_layer_rho.push(spearman_layers(&vb, &va)?.rho);
    }
    let mean_rho = per_layer_rho.iter().sum::<f64>() / per_layer_rho.len() as f64;
    Ok(VectorSpearman {
        per_layer_rho,
        mean_rho,
    })
}

// --- value norms ------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ValueNormRow {
    pub layer: usize,
    pub l1_before: f32,
    pub l1_after: f32,
    /// l1_after - l1_before; the information-gain reading of the injection.
    pub difference: f32,
}

#[derive(Debug, Clone, Serialize)]
pub struct ValueNormReport {
    pub rows: Vec<ValueNormRow>,
}

/// L1 norms of the per-layer BOS value rows of two runs, layer by layer.
pub fn value_norm_report(before: &[Vec<f32>], after: &[Vec<f32>]) -> Result<ValueNormReport> {
    if before.len() != after.len() {
        return Err(Error::LengthMismatch {
            left: before.len(),
            right: after.len(),
        });
    }
    if before.is_empty() {
        return Err(Error::EmptyInput("value_norm_report"));
    }
    let mut rows = Vec::with_capacity(before.len());
    for (layer, (b, a)) in before.iter().zip(after).enumerate() {
        if b.len() != a.len() {
            return Err(Error::LengthMismatch {
                left: b.len(),
                right: a.len(),
            });
        }
        let l1_before = tensor::l1_slice(b);
        let l1_after = tensor::l1_slice(a);
        rows.push(ValueNormRow {
            layer,
            l1_before,
            l1_after,
            difference: l1_after - l1_before,
        });
    }
    Ok(ValueNormReport { rows })
}

impl ValueNormReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Columns: layer, l1_before, l1_after, difference.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,l1_before,l1_after,difference\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.layer, r.l1_before, r.l1_after, r.difference
            ));
        }
        out
    }
}

// --- drift test harness -----------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct DriftTestRow {
    pub gen_idx: usize,
    pub seq_position: usize,
    pub attn_to_bos: f64,
    pub max_attn_others: f64,
    pub ratio: f64,
}

#[derive(Debug, Serialize)]
pub struct DriftTestReport {
    pub prompt_len: usize,
    pub gen_steps: usize,
    pub rows: Vec<DriftTestRow>,
}

pub struct DriftTestOutput {
    pub report: DriftTestReport,
    /// The trace behind the table, for independent recomputation.
    pub trace: AttentionTrace,
}

/// Deterministic filler prompt: BOS followed by token ids cycling through
/// the vocabulary.
pub fn synthetic_prompt(len: usize, vocab: usize, bos_id: u32) -> Vec<u32> {
    let mut prompt = Vec::with_capacity(len);
    if len == 0 {
        return prompt;
    }
    prompt.push(bos_id);
    for i in 1..len {
        prompt.push((i % vocab) as u32);
    }
    prompt
}

/// Generates `gen_steps` tokens from a synthetic prompt and tabulates the
/// drift metrics at the requested generated indices (1-based). The reported
/// sequence position of generated token g is prompt_len + g.
pub fn drift_test(
    model: &Model,
    injection: Option<&Injection>,
    bos_id: u32,
    prompt_len: usize,
    gen_steps: usize,
    checkpoints: &[usize],
) -> Result<DriftTestOutput> {
    if prompt_len == 0 {
        return Err(Error::EmptyInput("drift_test prompt"));
    }
    for &c in checkpoints {
        if c == 0 || c > gen_steps {
            return Err(Error::CheckpointOutOfRange {
                checkpoint: c,
                gen_steps,
            });
        }
    }
    let mut wanted: Vec<usize> = checkpoints.to_vec();
    wanted.sort_unstable();
    wanted.dedup();

    let prompt = synthetic_prompt(prompt_len, model.config().vocab_size, bos_id);
    let mut recorder = TraceRecorder::in_memory();
    runtime::generate(
        model,
        &prompt,
        bos_id,
        injection,
        &GenOptions {
            max_new_tokens: gen_steps,
            record_logits: false,
        },
        Some(&mut recorder),
    )?;
    let trace = recorder.finish()?.expect("in-memory recorder returns trace");

    let mut rows = Vec::with_capacity(wanted.len());
    if !wanted.is_empty() {
        let full = drift_report(&trace, 0)?;
        for row in &full.rows {
            if wanted.binary_search(&row.step).is_ok() {
                debug_assert_eq!(row.seq_position, prompt_len + row.step);
                rows.push(DriftTestRow {
                    gen_idx: row.step,
                    seq_position: prompt_len + row.step,
                    attn_to_bos: row.attn_to_bos,
                    max_attn_others: row.max_attn_others,
                    ratio: row.ratio,
                });
            }
        }
    }
    Ok(DriftTestOutput {
        report: DriftTestReport {
            prompt_len,
            gen_steps,
            rows,
        },
        trace,
    })
}

impl DriftTestReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Columns: gen_idx, seq_position, attn_to_bos, max_attn_others, ratio.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("gen_idx,seq_position,attn_to_bos,max_attn_others,ratio\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.gen_idx, r.seq_position, r.attn_to_bos, r.max_attn_others, r.ratio
            ));
        }
        out
    }
}

// --- prefill benchmark ------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct BenchStats {
    pub mean_ms: f64,
    pub std_ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub reps: usize,
    pub prompt_len: usize,
    pub baseline: BenchStats,
    pub injected: BenchStats,
    pub overhead_ms: f64,
    pub overhead_frac: f64,
}

fn stats(samples: &[f64]) -> BenchStats {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n;
    BenchStats {
        mean_ms: mean,
        std_ms: var.sqrt(),
    }
}

/// Untimed warmup must run long enough for the CPU to leave whatever power
/// state the preceding work left it in; a handful of millisecond-scale reps
/// is not enough and the first timed samples land on a still-ramping clock.
const WARMUP: Duration = Duration::from_millis(500);

/// Times `reps` prefills of `prompt` with and without the injection,
/// alternating arms so slow clock drift hits both equally. Untimed warmup
/// passes run first until `WARMUP` wall time has elapsed.
pub fn bench_prefill(
    model: &Model,
    injection: &Injection,
    prompt: &[u32],
    bos_id: u32,
    reps: usize,
) -> Result<BenchReport> {
    if reps == 0 {
        return Err(Error::TooFewValues { min: 1, got: 0 });
    }
    let warm_start = Instant::now();
    loop {
        runtime::prefill(model, prompt, bos_id, None, None)?;
        runtime::prefill(model, prompt, bos_id, Some(injection), None)?;
        if warm_start.elapsed() >= WARMUP {
            break;
        }
    }
    let mut base = Vec::with_capacity(reps);
    let mut inj = Vec::with_capacity(reps);
    // within a pair the second run sits on warmer caches; swapping the order
    // every rep keeps that advantage from landing on one arm
    for rep in 0..reps {
        let arms: [bool; 2] = if rep % 2 == 0 { [false, true] } else { [true, false] };
        for injected_arm in arms {
            let t0 = Instant::now();
            if injected_arm {
                runtime::prefill(model, prompt, bos_id, Some(injection), None)?;
                inj.push(t0.elapsed().as_secs_f64() * 1e3);
            } else {
                runtime::prefill(model, prompt, bos_id, None, None)?;
                base.push(t0.elapsed().as_secs_f64() * 1e3);
            }
        }
    }
    let baseline = stats(&base);
    let injected = stats(&inj);
    let overhead_ms = injected.mean_ms - baseline.mean_ms;
    Ok(BenchReport {
        reps,
        prompt_len: prompt.len(),
        overhead_frac: overhead_ms / baseline.mean_ms,
        baseline,
        injected,
        overhead_ms,
    })
}

impl BenchReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Columns: reps, prompt_len, baseline_mean_ms, baseline_std_ms,
    /// injected_mean_ms, injected_std_ms, overhead_ms, overhead_frac.
    pub fn to_csv(&self) -> String {
        format!(
            "reps,prompt_len,baseline_mean_ms,baseline_std_ms,injected_mean_ms,injected_std_ms,overhead_ms,overhead_frac\n{},{},{},{},{},{},{},{}\n",
            self.reps,
            self.prompt_len,
            self.baseline.mean_ms,
            self.baseline.std_ms,
            self.injected.mean_ms,
            self.injected.std_ms,
            self.overhead_ms,
            self.overhead_frac
        )
    }
}

/// A run's per-layer BOS value rows, fetched for value-norm comparison.
pub fn bos_values_for_run(
    model: &Model,
    prompt: &[u32],
    bos_id: u32,
    injection: Option<&Injection>,
) -> Result<Vec<Vec<f32>>> {
    let out = runtime::prefill(model, prompt, bos_id, injection, None)?;
    out.cache.bos_value_rows()
}

/// Convenience wrapper for the usual before/after comparison: a plain run
/// against an injected run of the same prompt.
pub fn value_norm_for_runs(
    model: &Model,
    prompt: &[u32],
    bos_id: u32,
    injection: &Injection,
) -> Result<ValueNormReport> {
    let before = bos_values_for_run(model, prompt, bos_id, None)?;
    let after = bos_values_for_run(model, prompt, bos_id, Some(injection))?;
    value_norm_report(&before, &after)
}

// Referenced by doc comments; keeps the InfoSource import honest when the
// module is built without tests.
#[allow(dead_code)]
fn _anchor_type_check(_: &InfoSource) {}
