//! Independent oracles and fixtures shared by the integration tests.
//!
//! Everything in here recomputes results with plain loops over plain
//! slices, deliberately avoiding the crate's tensor ops, cache and
//! generation paths, so a bug in the implementation cannot hide in its own
//! checker.

#![allow(dead_code)]

use sinktrack_core::model::{Model, ModelConfig};
use sinktrack_core::weights_io::{default_toy_config, make_toy_model, DEFAULT_TOY_SEED};

// --- tensor-level oracles ---------------------------------------------------

/// Textbook i-j-k triple loop.
pub fn naive_matmul(a: &[f32], n: usize, k: usize, b: &[f32], m: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0f32;
            for t in 0..k {
                acc += a[i * k + t] * b[t * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// Two-pass mean/variance normalization.
pub fn oracle_layernorm(x: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Vec<f32> {
    let n = x.len() as f32;
    let mean: f32 = x.iter().sum::<f32>() / n;
    let var: f32 = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / n;
    let denom = (var + eps).sqrt();
    x.iter()
        .zip(gain.iter().zip(bias))
        .map(|(&v, (&g, &b))| (v - mean) / denom * g + b)
        .collect()
}

/// Column sums divided by the row count.
pub fn oracle_mean_pool(rows: &[Vec<f32>]) -> Vec<f32> {
    let d = rows[0].len();
    let mut out = vec![0.0f32; d];
    for row in rows {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in out.iter_mut() {
        *o /= rows.len() as f32;
    }
    out
}

pub fn oracle_softmax(xs: &[f32]) -> Vec<f32> {
    let max = xs.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = xs.iter().map(|x| (x - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

// --- full-model reference forward (no cache, all positions at once) ---------

fn vec_mat(x: &[f32], w: &[f32], cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; cols];
    for (t, &xv) in x.iter().enumerate() {
        for j in 0..cols {
            out[j] += xv * w[t * cols + j];
        }
    }
    out
}

fn oracle_gelu(x: f32) -> f32 {
    #[allow(clippy::excessive_precision)]
    const C: f32 = 0.79788456;
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

/// Dense forward through every layer without any cache; returns the final
/// hidden rows. Also exposes each layer's output via `layer_outputs`.
pub struct ReferenceForward {
    pub layer_outputs: Vec<Vec<Vec<f32>>>,
    pub hidden: Vec<Vec<f32>>,
}

pub fn reference_forward(model: &Model, tokens: &[u32]) -> ReferenceForward {
    let cfg = *model.config();
    let d = cfg.d_model;
    let dh = cfg.d_model / cfg.n_heads;
    let scale = 1.0 / (dh as f32).sqrt();

    let mut h: Vec<Vec<f32>> = tokens
        .iter()
        .map(|&t| model.weights().embedding.row(t as usize).to_vec())
        .collect();
    let n = h.len();
    let mut layer_outputs = Vec::with_capacity(cfg.n_layers);

    for l in 0..cfg.n_layers {
        let lw = model.layer(l);
        let q: Vec<Vec<f32>> = h.iter().map(|r| vec_mat(r, lw.w_q.data(), d)).collect();
        let k: Vec<Vec<f32>> = h.iter().map(|r| vec_mat(r, lw.w_k.data(), d)).collect();
        let v: Vec<Vec<f32>> = h.iter().map(|r| vec_mat(r, lw.w_v.data(), d)).collect();

        let mut attn = vec![vec![0.0f32; d]; n];
        for i in 0..n {
            for head in 0..cfg.n_heads {
                let hs = head * dh;
                let scores: Vec<f32> = (0..=i)
                    .map(|j| {
                        let mut s = 0.0f32;
                        for t in 0..dh {
                            s += q[i][hs + t] * k[j][hs + t];
                        }
                        s * scale
                    })
                    .collect();
                let weights = oracle_softmax(&scores);
                for (j, &w) in weights.iter().enumerate() {
                    for t in 0..dh {
                        attn[i][hs + t] += w * v[j][hs + t];
                    }
                }
            }
        }
        let attn_proj: Vec<Vec<f32>> =
            attn.iter().map(|r| vec_mat(r, lw.w_o.data(), d)).collect();

        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let resid1: Vec<f32> = h[i].iter().zip(&attn_proj[i]).map(|(a, b)| a + b).collect();
            let m = oracle_layernorm(&resid1, lw.ln1_gain.data(), lw.ln1_bias.data(), cfg.ln_eps);
            let mut inner = vec_mat(&m, lw.ffn_w1.data(), cfg.d_ff);
            for (x, &b) in inner.iter_mut().zip(lw.ffn_b1.data()) {
                *x = oracle_gelu(*x + b);
            }
            let mut ffn = vec_mat(&inner, lw.ffn_w2.data(), d);
            for (x, &b) in ffn.iter_mut().zip(lw.ffn_b2.data()) {
                *x += b;
            }
            let resid2: Vec<f32> = m.iter().zip(&ffn).map(|(a, b)| a + b).collect();
            next.push(oracle_layernorm(
                &resid2,
                lw.ln2_gain.data(),
                lw.ln2_bias.data(),
                cfg.ln_eps,
            ));
        }
        layer_outputs.push(next.clone());
        h = next;
    }
    ReferenceForward {
        layer_outputs,
        hidden: h,
    }
}

pub fn reference_logits(model: &Model, hidden: &[f32]) -> Vec<f32> {
    vec_mat(hidden, model.weights().unembedding.data(), model.config().vocab_size)
}

fn reference_argmax(logits: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &x) in logits.iter().enumerate() {
        if x > logits[best] {
            best = i;
        }
    }
    best as u32
}

/// Greedy generation by full recomputation: each step re-runs the dense
/// forward over prompt plus everything generated so far. Returns the
/// generated tokens and the logits behind each.
pub fn reference_greedy(model: &Model, prompt: &[u32], steps: usize) -> (Vec<u32>, Vec<Vec<f32>>) {
    let mut seq = prompt.to_vec();
    let mut tokens = Vec::with_capacity(steps);
    let mut all_logits = Vec::with_capacity(steps);
    for _ in 0..steps {
        let fwd = reference_forward(model, &seq);
        let logits = reference_logits(model, fwd.hidden.last().unwrap());
        let tok = reference_argmax(&logits);
        tokens.push(tok);
        all_logits.push(logits);
        seq.push(tok);
    }
    (tokens, all_logits)
}

// --- rank-correlation oracle ------------------------------------------------

fn oracle_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut out = vec![0.0f64; n];
    for i in 0..n {
        let mut below = 0usize;
        let mut equal = 0usize;
        for j in 0..n {
            if xs[j] < xs[i] {
                below += 1;
            } else if xs[j] == xs[i] {
                equal += 1;
            }
        }
        // ranks below+1 ..= below+equal share their average
        out[i] = (2 * below + equal + 1) as f64 / 2.0;
    }
    out
}

/// Definitional Spearman rho: Pearson correlation of average ranks.
pub fn oracle_spearman_rho(x: &[f64], y: &[f64]) -> f64 {
    let rx = oracle_ranks(x);
    let ry = oracle_ranks(y);
    let n = rx.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..rx.len() {
        let dx = rx[i] - mx;
        let dy = ry[i] - my;
        cov += dx * dy;
        vx += dx * dx;
        vy += dy * dy;
    }
    cov / (vx * vy).sqrt()
}

// --- fixtures ---------------------------------------------------------------

pub fn canonical_model() -> Model {
    make_toy_model(&default_toy_config(), DEFAULT_TOY_SEED).unwrap()
}

/// Small deterministic LCG for picking test dimensions and token ids.
pub struct TestRng(u64);

impl TestRng {
    pub fn new(seed: u64) -> TestRng {
        TestRng(seed.wrapping_mul(2862933555777941757).wrapping_add(3037000493))
    }

    pub fn next(&mut self) -> u64 {
        self.0 = self
            .0
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        self.0 >> 11
    }

    pub fn below(&mut self, n: u64) -> u64 {
        self.next() % n
    }
}

/// A small random-but-valid configuration derived from a seed.
pub fn random_config(seed: u64) -> ModelConfig {
    let mut rng = TestRng::new(seed);
    let n_heads = 1 + rng.below(4) as usize;
    let head_dim = 2 + rng.below(7) as usize;
    ModelConfig {
        n_layers: 1 + rng.below(6) as usize,
        d_model: n_heads * head_dim,
        n_heads,
        d_ff: 4 + rng.below(29) as usize,
        vocab_size: 8 + rng.below(57) as usize,
        max_seq: 64,
        ln_eps: 1e-5,
    }
}

/// Random model plus a random BOS-led prompt of the given length.
pub fn random_model_and_prompt(seed: u64, prompt_len: usize) -> (Model, Vec<u32>, u32) {
    let config = random_config(seed);
    let model = make_toy_model(&config, seed ^ 0xA5A5).unwrap();
    let mut rng = TestRng::new(seed ^ 0x1234);
    let bos_id = rng.below(config.vocab_size as u64) as u32;
    let mut prompt = vec![bos_id];
    for _ in 1..prompt_len {
        prompt.push(rng.below(config.vocab_size as u64) as u32);
    }
    (model, prompt, bos_id)
}

pub fn max_abs_diff(a: &[f32], b: &[f32]) -> f32 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0f32, f32::max)
}

pub fn assert_bits_equal(a: &[f32], b: &[f32], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length mismatch");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert_eq!(
            x.to_bits(),
            y.to_bits(),
            "{what}: bit mismatch at {i}: {x} vs {y}"
        );
    }
}
