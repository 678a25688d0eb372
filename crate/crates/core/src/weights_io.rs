//! STKW tensor files and the seeded toy-model generator.
//!
//! File layout, all integers little-endian:
//!
//! ```text
//! bytes 0..4    magic "STKW"
//! bytes 4..8    u32 format version (currently 1)
//! bytes 8..16   u64 header length in bytes
//! then          UTF-8 JSON header
//! then          zero padding up to the next 64-byte boundary
//! then          payload: raw f32 data
//! ```
//!
//! The header maps tensor names to `{"shape": [...], "dtype": "f32",
//! "offset": n}` where `offset` is relative to the payload start and a
//! multiple of 64; since the payload itself begins on a 64-byte boundary,
//! every tensor is 64-byte aligned in the file. Model files additionally
//! carry a `"__metadata__"` object with the model config and the activation
//! name, which the loader validates. Tensor entries are written in name
//! order and padding is zeroed, so saving the same data twice produces
//! identical bytes.
//!
//! Toy models draw every weight from xoshiro256** (seeded through
//! splitmix64) with a fixed, documented tensor order. Raw draws map to
//! [-1, 1) using the top 24 bits of each u64, which keeps the conversion
//! exact, so files are identical across platforms for a given seed.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{FormatError, Result};
use crate::model::{LayerWeights, Model, ModelConfig, ModelWeights};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"STKW";
pub const FORMAT_VERSION: u32 = 1;
pub const ALIGNMENT: u64 = 64;
pub const ACTIVATION_NAME: &str = "gelu_tanh";

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelMeta {
    config: ModelConfig,
    activation: String,
}

fn align_up(n: u64) -> u64 {
    n.div_ceil(ALIGNMENT) * ALIGNMENT
}

// --- writing ----------------------------------------------------------------

fn write_file(
    path: &Path,
    meta: Option<&ModelMeta>,
    tensors: &BTreeMap<String, &Tensor>,
) -> Result<()> {
    let mut header = serde_json::Map::new();
    if let Some(m) = meta {
        header.insert(
            "__metadata__".to_string(),
            serde_json::to_value(m).expect("meta serializes"),
        );
    }
    let mut offset = 0u64;
    for (name, t) in tensors {
        let entry = TensorEntry {
            shape: t.shape().to_vec(),
            dtype: "f32".to_string(),
            offset,
        };
        header.insert(
            name.clone(),
            serde_json::to_value(&entry).expect("entry serializes"),
        );
        offset = align_up(offset + (t.data().len() * 4) as u64);
    }
    let header_bytes = serde_json::to_vec(&serde_json::Value::Object(header))
        .expect("header serializes");

    let payload_start = align_up(16 + header_bytes.len() as u64);
    let mut bytes = Vec::with_capacity((payload_start + offset) as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    bytes.resize(payload_start as usize, 0);
    for t in tensors.values() {
        for &v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        bytes.resize(align_up(bytes.len() as u64 - payload_start) as usize + payload_start as usize, 0);
    }
    fs::write(path, bytes).map_err(|e| FormatError::io(path, e))?;
    Ok(())
}

/// Saves named tensors without model metadata.
pub fn save_tensors(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let map: BTreeMap<String, &Tensor> =
        tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_file(path, None, &map)
}

fn model_tensor_names(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let d = config.d_model;
    let mut names = vec![
        ("embed.weight".to_string(), vec![config.vocab_size, d]),
        ("unembed.weight".to_string(), vec![d, config.vocab_size]),
    ];
    for l in 0..config.n_layers {
        for (suffix, shape) in [
            ("attn.w_q", vec![d, d]),
            ("attn.w_k", vec![d, d]),
            ("attn.w_v", vec![d, d]),
            ("attn.w_o", vec![d, d]),
            ("ffn.w1", vec![d, config.d_ff]),
            ("ffn.b1", vec![config.d_ff]),
            ("ffn.w2", vec![config.d_ff, d]),
            ("ffn.b2", vec![d]),
            ("ln1.gain", vec![d]),
            ("ln1.bias", vec![d]),
            ("ln2.gain", vec![d]),
            ("ln2.bias", vec![d]),
        ] {
            names.push((format!("layers.{l}.{suffix}"), shape));
        }
    }
    names
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let w = model.weights();
    let mut map: BTreeMap<String, &Tensor> = BTreeMap::new();
    map.insert("embed.weight".to_string(), &w.embedding);
    map.insert("unembed.weight".to_string(), &w.unembedding);
    for (l, lw) in w.layers.iter().enumerate() {
        map.insert(format!("layers.{l}.attn.w_q"), &lw.w_q);
        map.insert(format!("layers.{l}.attn.w_k"), &lw.w_k);
        map.insert(format!("layers.{l}.attn.w_v"), &lw.w_v);
        map.insert(format!("layers.{l}.attn.w_o"), &lw.w_o);
        map.insert(format!("layers.{l}.ffn.w1"), &lw.ffn_w1);
        map.insert(format!("layers.{l}.ffn.b1"), &lw.ffn_b1);
        map.insert(format!("layers.{l}.ffn.w2"), &lw.ffn_w2);
        map.insert(format!("layers.{l}.ffn.b2"), &lw.ffn_b2);
        map.insert(format!("layers.{l}.ln1.gain"), &lw.ln1_gain);
        map.insert(format!("layers.{l}.ln1.bias"), &lw.ln1_bias);
        map.insert(format!("layers.{l}.ln2.gain"), &lw.ln2_gain);
        map.insert(format!("layers.{l}.ln2.bias"), &lw.ln2_bias);
    }
    let meta = ModelMeta {
        config: *model.config(),
        activation: ACTIVATION_NAME.to_string(),
    };
    write_file(path, Some(&meta), &map)
}

// --- reading ----------------------------------------------------------------

struct RawFile {
    meta: Option<ModelMeta>,
    tensors: BTreeMap<String, Tensor>,
}

fn read_file(path: &Path) -> Result<RawFile> {
    let bytes = fs::read(path).map_err(|e| FormatError::io(path, e))?;
    parse_bytes(&bytes)
}

fn parse_bytes(bytes: &[u8]) -> Result<RawFile> {
    let have = bytes.len() as u64;
    if have < 16 {
        return Err(FormatError::Truncated { need: 16, have }.into());
    }
    if &bytes[0..4] != MAGIC {
        return Err(FormatError::BadMagic.into());
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(FormatError::BadVersion(version).into());
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let need = 16 + header_len;
    if need > have {
        return Err(FormatError::Truncated { need, have }.into());
    }
    let header_json = std::str::from_utf8(&bytes[16..(16 + header_len) as usize])
        .map_err(|e| FormatError::HeaderJson(e.to_string()))?;
    let header: serde_json::Map<String, serde_json::Value> = serde_json::from_str(header_json)
        .map_err(|e| FormatError::HeaderJson(e.to_string()))?;

    let payload_start = align_up(16 + header_len);
    let mut meta = None;
    let mut entries: Vec<(String, TensorEntry)> = Vec::new();
    for (name, value) in header {
        if name == "__metadata__" {
            meta = Some(
                serde_json::from_value(value)
                    .map_err(|e| FormatError::HeaderJson(e.to_string()))?,
            );
        } else {
            let entry: TensorEntry = serde_json::from_value(value)
                .map_err(|e| FormatError::HeaderJson(e.to_string()))?;
            entries.push((name, entry));
        }
    }

    // Span checks before any data is touched.
    let mut spans: Vec<(u64, u64, &str)> = Vec::new();
    for (name, entry) in &entries {
        if entry.dtype != "f32" {
            return Err(FormatError::BadDtype {
                name: name.clone(),
                dtype: entry.dtype.clone(),
            }
            .into());
        }
        if entry.offset % ALIGNMENT != 0 {
            return Err(FormatError::Misaligned {
                name: name.clone(),
                offset: entry.offset,
            }
            .into());
        }
        let numel: usize = entry.shape.iter().product();
        if entry.shape.is_empty() || numel == 0 {
            return Err(FormatError::TensorShape {
                name: name.clone(),
                shape: entry.shape.clone(),
                expected: vec![],
            }
            .into());
        }
        let len = (numel * 4) as u64;
        let end = payload_start + entry.offset + len;
        if end > have {
            return Err(FormatError::SpanOutOfBounds { name: name.clone() }.into());
        }
        spans.push((entry.offset, len, name));
    }
    spans.sort_unstable_by_key(|s| s.0);
    for pair in spans.windows(2) {
        if pair[0].0 + pair[0].1 > pair[1].0 {
            return Err(FormatError::Overlap {
                a: pair[0].2.to_string(),
                b: pair[1].2.to_string(),
            }
            .into());
        }
    }

    let mut tensors = BTreeMap::new();
    for (name, entry) in entries {
        let numel: usize = entry.shape.iter().product();
        let start = (payload_start + entry.offset) as usize;
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let b = &bytes[start + i * 4..start + i * 4 + 4];
            let v = f32::from_le_bytes(b.try_into().unwrap());
            if !v.is_finite() {
                return Err(FormatError::NonFinitePayload { name }.into());
            }
            data.push(v);
        }
        let t = Tensor::from_vec(&entry.shape, data).map_err(|_| FormatError::TensorShape {
            name: name.clone(),
            shape: entry.shape.clone(),
            expected: vec![],
        })?;
        tensors.insert(name, t);
    }
    Ok(RawFile { meta, tensors })
}

/// Loads a bare tensor file (no model metadata required).
pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    Ok(read_file(path)?.tensors)
}

/// Loads and validates a model file: metadata present, activation supported,
/// exactly the expected tensor set with the expected shapes.
pub fn load_model(path: &Path) -> Result<Model> {
    let raw = read_file(path)?;
    let meta = raw.meta.ok_or(FormatError::MetadataMissing)?;
    if meta.activation != ACTIVATION_NAME {
        return Err(FormatError::ActivationUnsupported(meta.activation).into());
    }
    let config = meta.config;
    config.validate()?;

    let mut tensors = raw.tensors;
    let expected = model_tensor_names(&config);
    for (name, shape) in &expected {
        let t = tensors
            .get(name)
            .ok_or_else(|| FormatError::MissingTensor(name.clone()))?;
        if t.shape() != shape.as_slice() {
            return Err(FormatError::TensorShape {
                name: name.clone(),
                shape: t.shape().to_vec(),
                expected: shape.clone(),
            }
            .into());
        }
    }
    if tensors.len() != expected.len() {
        let expected_names: std::collections::BTreeSet<&String> =
            expected.iter().map(|(n, _)| n).collect();
        let extra = tensors
            .keys()
            .find(|k| !expected_names.contains(k))
            .cloned()
            .unwrap_or_default();
        return Err(FormatError::UnexpectedTensor(extra).into());
    }

    let mut take = |name: String| tensors.remove(&name).expect("checked above");
    let embedding = take("embed.weight".to_string());
    let unembedding = take("unembed.weight".to_string());
    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        layers.push(LayerWeights {
            w_q: take(format!("layers.{l}.attn.w_q")),
            w_k: take(format!("layers.{l}.attn.w_k")),
            w_v: take(format!("layers.{l}.attn.w_v")),
            w_o: take(format!("layers.{l}.attn.w_o")),
            ffn_w1: take(format!("layers.{l}.ffn.w1")),
            ffn_b1: take(format!("layers.{l}.ffn.b1")),
            ffn_w2: take(format!("layers.{l}.ffn.w2")),
            ffn_b2: take(format!("layers.{l}.ffn.b2")),
            ln1_gain: take(format!("layers.{l}.ln1.gain")),
            ln1_bias: take(format!("layers.{l}.ln1.bias")),
            ln2_gain: take(format!("layers.{l}.ln2.gain")),
            ln2_bias: take(format!("layers.{l}.ln2.bias")),
        });
    }
    Model::new(
        config,
        ModelWeights {
            embedding,
            unembedding,
            layers,
        },
    )
}

// --- toy model generation ---------------------------------------------------

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// xoshiro256** (Blackman & Vigna), seeded through splitmix64.
struct Xoshiro256 {
    s: [u64; 4],
}

impl Xoshiro256 {
    fn seeded(seed: u64) -> Xoshiro256 {
        let mut sm = seed;
        let s = [
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
            splitmix64(&mut sm),
        ];
        Xoshiro256 { s }
    }

    fn next_u64(&mut self) -> u64 {
        let result = self.s[1].wrapping_mul(5).rotate_left(7).wrapping_mul(9);
        let t = self.s[1] << 17;
        self.s[2] ^= self.s[0];
        self.s[3] ^= self.s[1];
        self.s[1] ^= self.s[2];
        self.s[0] ^= self.s[3];
        self.s[2] ^= t;
        self.s[3] = self.s[3].rotate_left(45);
        result
    }

    /// Uniform in [-1, 1) from the top 24 bits; every intermediate step is
    /// exact in f32, so results do not depend on the platform.
    fn next_pm1(&mut self) -> f32 {
        let k = (self.next_u64() >> 40) as f32;
        k / 16_777_216.0 * 2.0 - 1.0
    }
}

pub const WEIGHT_SCALE: f32 = 0.02;
pub const DEFAULT_TOY_SEED: u64 = 42;

/// The small reference configuration used throughout the tests and CLI
/// defaults.
pub fn default_toy_config() -> ModelConfig {
    ModelConfig {
        n_layers: 4,
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        vocab_size: 64,
        max_seq: 256,
        ln_eps: 1e-5,
    }
}

/// Deterministic random weights: tensors are drawn in file-name-independent
/// order (embedding, unembedding, then per layer w_q, w_k, w_v, w_o, ffn w1,
/// b1, w2, b2, ln1 gain, ln1 bias, ln2 gain, ln2 bias), each row-major.
/// LayerNorm gains sit at 1 plus scaled noise; everything else is scaled
/// noise of magnitude `WEIGHT_SCALE`.
pub fn make_toy_model(config: &ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = Xoshiro256::seeded(seed);
    let d = config.d_model;
    let mut noise = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| WEIGHT_SCALE * rng.next_pm1()).collect();
        Tensor::from_vec(shape, data)
    };
    let embedding = noise(&[config.vocab_size, d])?;
    let unembedding = noise(&[d, config.vocab_size])?;
    let mut layers = Vec::with_capacity(config.n_layers);
    for _ in 0..config.n_layers {
        let w_q = noise(&[d, d])?;
        let w_k = noise(&[d, d])?;
        let w_v = noise(&[d, d])?;
        let w_o = noise(&[d, d])?;
        let ffn_w1 = noise(&[d, config.d_ff])?;
        let ffn_b1 = noise(&[config.d_ff])?;
        let ffn_w2 = noise(&[config.d_ff, d])?;
        let ffn_b2 = noise(&[d])?;
        let mut gain1 = noise(&[d])?;
        for g in gain1.data_mut() {
            *g += 1.0;
        }
        let ln1_bias = noise(&[d])?;
        let mut gain2 = noise(&[d])?;
        for g in gain2.data_mut() {
            *g += 1.0;
        }
        let ln2_bias = noise(&[d])?;
        layers.push(LayerWeights {
            w_q,
            w_k,
            w_v,
            w_o,
            ffn_w1,
            ffn_b1,
            ffn_w2,
            ffn_b2,
            ln1_gain: gain1,
            ln1_bias,
            ln2_gain: gain2,
            ln2_bias,
        });
    }
    Model::new(
        *config,
        ModelWeights {
            embedding,
            unembedding,
            layers,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 12,
            vocab_size: 11,
            max_seq: 16,
            ln_eps: 1e-5,
        }
    }

    #[test]
    fn toy_model_is_seed_deterministic() {
        let a = make_toy_model(&tiny_config(), 7).unwrap();
        let b = make_toy_model(&tiny_config(), 7).unwrap();
        assert_eq!(a.weights(), b.weights());
        let c = make_toy_model(&tiny_config(), 8).unwrap();
        assert_ne!(a.weights().embedding, c.weights().embedding);
    }

    #[test]
    fn toy_model_weight_ranges() {
        let m = make_toy_model(&tiny_config(), 3).unwrap();
        for &v in m.weights().embedding.data() {
            assert!(v.abs() <= WEIGHT_SCALE);
        }
        for &g in m.layer(0).ln1_gain.data() {
            assert!((g - 1.0).abs() <= WEIGHT_SCALE);
        }
    }

    #[test]
    fn model_roundtrip_is_exact_and_bytes_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.stkw");
        let p2 = dir.path().join("b.stkw");
        let model = make_toy_model(&tiny_config(), 5).unwrap();
        save_model(&p1, &model).unwrap();
        save_model(&p2, &model).unwrap();
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        let back = load_model(&p1).unwrap();
        assert_eq!(back.config(), model.config());
        assert_eq!(back.weights(), model.weights());
    }

    #[test]
    fn bare_tensor_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.stkw");
        let t = Tensor::from_vec(&[2, 3], vec![1.0, -2.0, 3.5, 0.0, 4.25, -0.5]).unwrap();
        save_tensors(&p, &[("f_info".to_string(), t.clone())]).unwrap();
        let back = load_tensors(&p).unwrap();
        assert_eq!(back.get("f_info").unwrap(), &t);
    }

    /// Builds a one-tensor file byte by byte, independent of the writer.
    #[test]
    fn hand_built_file_loads() {
        let header = br#"{"t":{"shape":[2,2],"dtype":"f32","offset":0}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"STKW");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        while bytes.len() % 64 != 0 {
            bytes.push(0);
        }
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let raw = parse_bytes(&bytes).unwrap();
        assert_eq!(
            raw.tensors.get("t").unwrap().data(),
            &[1.0, 2.0, 3.0, 4.0]
        );
    }

    #[test]
    fn loader_rejects_defects() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.stkw");
        let model = make_toy_model(&tiny_config(), 1).unwrap();
        save_model(&p, &model).unwrap();
        let good = fs::read(&p).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(
            parse_bytes(&bad),
            Err(Error::Format(FormatError::BadMagic))
        ));

        let mut bad = good.clone();
        bad[4] = 9;
        assert!(matches!(
            parse_bytes(&bad),
            Err(Error::Format(FormatError::BadVersion(9)))
        ));

        let truncated = &good[..good.len() / 2];
        assert!(matches!(
            parse_bytes(truncated),
            Err(Error::Format(FormatError::SpanOutOfBounds { .. }))
        ));

        assert!(matches!(
            parse_bytes(&good[..10]),
            Err(Error::Format(FormatError::Truncated { .. }))
        ));
    }

    #[test]
    fn loader_rejects_misaligned_offset() {
        let header = br#"{"t":{"shape":[1],"dtype":"f32","offset":4}}"#;
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"STKW");
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
        bytes.extend_from_slice(header);
        while bytes.len() % 64 != 0 {
            bytes.push(0);
        }
        bytes.extend_from_slice(&[0u8; 8]);
        assert!(matches!(
            parse_bytes(&bytes),
            Err(Error::Format(FormatError::Misaligned { .. }))
        ));
    }

    #[test]
    fn model_loader_demands_every_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let model = make_toy_model(&tiny_config(), 2).unwrap();

        // Rebuild the file without one tensor.
        let p = dir.path().join("m.stkw");
        save_model(&p, &model).unwrap();
        let raw = read_file(&p).unwrap();
        let mut tensors: Vec<(String, Tensor)> = raw
            .tensors
            .into_iter()
            .filter(|(n, _)| n != "layers.1.ffn.b2")
            .collect();
        let p2 = dir.path().join("missing.stkw");
        {
            let map: BTreeMap<String, &Tensor> =
                tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
            let meta = ModelMeta {
                config: *model.config(),
                activation: ACTIVATION_NAME.to_string(),
            };
            write_file(&p2, Some(&meta), &map).unwrap();
        }
        assert!(matches!(
            load_model(&p2),
            Err(Error::Format(FormatError::MissingTensor(n))) if n == "layers.1.ffn.b2"
        ));

        // And with one extra.
        tensors.push((
            "layers.1.ffn.b2".to_string(),
            model.layer(1).ffn_b2.clone(),
        ));
        tensors.push(("stray".to_string(), model.layer(0).ffn_b2.clone()));
        let p3 = dir.path().join("extra.stkw");
        {
            let map: BTreeMap<String, &Tensor> =
                tensors.iter().map(|(n, t)| (n.clone(), t)).collect();
            let meta = ModelMeta {
                config: *model.config(),
                activation: ACTIVATION_NAME.to_string(),
            };
            write_file(&p3, Some(&meta), &map).unwrap();
        }
        assert!(matches!(
            load_model(&p3),
            Err(Error::Format(FormatError::UnexpectedTensor(n))) if n == "stray"
        ));
    }

    #[test]
    fn bare_file_is_not_a_model() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bare.stkw");
        let t = Tensor::from_vec(&[1], vec![1.0]).unwrap();
        save_tensors(&p, &[("x".to_string(), t)]).unwrap();
        assert!(matches!(
            load_model(&p),
            Err(Error::Format(FormatError::MetadataMissing))
        ));
    }
}
