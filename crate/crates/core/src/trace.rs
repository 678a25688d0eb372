//! Attention weight recording.
//!
//! Every attended query row can be captured as one record: which step, layer,
//! head and query position it came from, plus the full post-softmax weight
//! row over key positions 0..=qpos. Records are validated on entry: weights
//! must be finite, non-negative, sum to 1 within 1e-6, and carry no mass
//! beyond the query position. Step 0 is the prefill; decode steps count from
//! 1, one per generated token.
//!
//! A recorder either accumulates records in memory (for analyses in the same
//! process) or streams them to a JSON-lines file as they arrive, so long
//! generations do not hold the whole trace in RAM. The file format is one
//! JSON object per line with keys `step`, `layer`, `head`, `qpos`, `weights`.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError, Result};

pub const WEIGHT_SUM_TOLERANCE: f32 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightRecord {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub qpos: usize,
    pub weights: Vec<f32>,
}

fn validate_weights(step: usize, layer: usize, head: usize, qpos: usize, weights: &[f32]) -> Result<()> {
    let fail = |reason: String| Error::InvalidWeights {
        step,
        layer,
        head,
        reason,
    };
    if weights.is_empty() {
        return Err(fail("empty weight row".into()));
    }
    // sum in f64: long rows carry enough f32 summation noise to eat the
    // whole tolerance even when every weight is correct
    let mut sum = 0.0f64;
    for (j, &w) in weights.iter().enumerate() {
        if !w.is_finite() {
            return Err(fail(format!("non-finite weight at position {j}")));
        }
        if w < 0.0 {
            return Err(fail(format!("negative weight {w} at position {j}")));
        }
        if j > qpos && w != 0.0 {
            return Err(fail(format!(
                "mass {w} on position {j} beyond query position {qpos}"
            )));
        }
        sum += w as f64;
    }
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE as f64 {
        return Err(fail(format!("weights sum to {sum}, expected 1")));
    }
    Ok(())
}

/// An in-memory trace: validated weight records plus, once a prefill has run,
/// the per-layer BOS value rows used by the value-norm analysis.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AttentionTrace {
    records: Vec<WeightRecord>,
    bos_values: Vec<Vec<f32>>,
}

impl AttentionTrace {
    pub fn new() -> AttentionTrace {
        AttentionTrace::default()
    }

    pub fn record(
        &mut self,
        step: usize,
        layer: usize,
        head: usize,
        qpos: usize,
        weights: Vec<f32>,
    ) -> Result<()> {
        validate_weights(step, layer, head, qpos, &weights)?;
        self.records.push(WeightRecord {
            step,
            layer,
            head,
            qpos,
            weights,
        });
        Ok(())
    }

    pub fn records(&self) -> &[WeightRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn bos_values(&self) -> &[Vec<f32>] {
        &self.bos_values
    }

    pub fn set_bos_values(&mut self, values: Vec<Vec<f32>>) {
        self.bos_values = values;
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            let line = serde_json::to_string(r)
                .map_err(|e| FormatError::HeaderJson(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| FormatError::io(path, e))?;
        }
        w.flush().map_err(|e| FormatError::io(path, e))?;
        Ok(())
    }

    /// Loads a JSON-lines trace. Every record is re-validated, so a file
    /// edited into an invalid state is rejected.
    pub fn read_jsonl(path: &Path) -> Result<AttentionTrace> {
        let file = File::open(path).map_err(|e| FormatError::io(path, e))?;
        let mut trace = AttentionTrace::new();
        for line in BufReader::new(file).lines() {
            let line = line.map_err(|e| FormatError::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: WeightRecord = serde_json::from_str(&line)
                .map_err(|e| FormatError::HeaderJson(e.to_string()))?;
            trace.record(r.step, r.layer, r.head, r.qpos, r.weights)?;
        }
        Ok(trace)
    }
}

/// Side capture of the query vector and key rows behind one weight record.
/// Used by tests to recompute the softmax independently; never serialized.
#[derive(Debug, Clone)]
pub struct QkRecord {
    pub step: usize,
    pub layer: usize,
    pub head: usize,
    pub qpos: usize,
    pub q: Vec<f32>,
    pub keys: Vec<Vec<f32>>,
}

enum Sink {
    Memory(AttentionTrace),
    Stream {
        writer: BufWriter<File>,
        path: std::path::PathBuf,
        count: usize,
        bos_values: Vec<Vec<f32>>,
    },
}

/// Destination for records produced during a run.
pub struct TraceRecorder {
    sink: Sink,
    capture_qk: bool,
    qk: Vec<QkRecord>,
}

impl TraceRecorder {
    pub fn in_memory() -> TraceRecorder {
        TraceRecorder {
            sink: Sink::Memory(AttentionTrace::new()),
            capture_qk: false,
            qk: Vec::new(),
        }
    }

    /// In-memory recorder that also keeps each record's query vector and key
    /// rows for offline recomputation.
    pub fn with_qk_capture() -> TraceRecorder {
        let mut r = TraceRecorder::in_memory();
        r.capture_qk = true;
        r
    }

    /// Streams records straight to `path` as JSON lines; memory use stays
    /// bounded regardless of generation length.
    pub fn streaming(path: &Path) -> Result<TraceRecorder> {
        let file = File::create(path).map_err(|e| FormatError::io(path, e))?;
        Ok(TraceRecorder {
            sink: Sink::Stream {
                writer: BufWriter::new(file),
                path: path.to_path_buf(),
                count: 0,
                bos_values: Vec::new(),
            },
            capture_qk: false,
            qk: Vec::new(),
        })
    }

    pub fn wants_qk(&self) -> bool {
        self.capture_qk
    }

    pub fn record_attention(
        &mut self,
        step: usize,
        layer: usize,
        head: usize,
        qpos: usize,
        weights: &[f32],
        qk: Option<(Vec<f32>, Vec<Vec<f32>>)>,
    ) -> Result<()> {
        match &mut self.sink {
            Sink::Memory(trace) => {
                trace.record(step, layer, head, qpos, weights.to_vec())?;
            }
            Sink::Stream { writer, path, count, .. } => {
                validate_weights(step, layer, head, qpos, weights)?;
                let r = WeightRecord {
                    step,
                    layer,
                    head,
                    qpos,
                    weights: weights.to_vec(),
                };
                let line = serde_json::to_string(&r)
                    .map_err(|e| FormatError::HeaderJson(e.to_string()))?;
                writeln!(writer, "{line}").map_err(|e| FormatError::io(path, e))?;
                *count += 1;
            }
        }
        if self.capture_qk {
            if let Some((q, keys)) = qk {
                self.qk.push(QkRecord {
                    step,
                    layer,
                    head,
                    qpos,
                    q,
                    keys,
                });
            }
        }
        Ok(())
    }

    pub fn set_bos_values(&mut self, values: Vec<Vec<f32>>) {
        match &mut self.sink {
            Sink::Memory(trace) => trace.set_bos_values(values),
            Sink::Stream { bos_values, .. } => *bos_values = values,
        }
    }

    pub fn bos_values(&self) -> &[Vec<f32>] {
        match &self.sink {
            Sink::Memory(trace) => trace.bos_values(),
            Sink::Stream { bos_values, .. } => bos_values,
        }
    }

    pub fn record_count(&self) -> usize {
        match &self.sink {
            Sink::Memory(trace) => trace.len(),
            Sink::Stream { count, .. } => *count,
        }
    }

    pub fn qk_records(&self) -> &[QkRecord] {
        &self.qk
    }

    /// Flushes a streaming recorder or hands back the accumulated trace.
    pub fn finish(self) -> Result<Option<AttentionTrace>> {
        match self.sink {
            Sink::Memory(trace) => Ok(Some(trace)),
            Sink::Stream { mut writer, path, .. } => {
                writer.flush().map_err(|e| FormatError::io(&path, e))?;
                Ok(None)
            }
        }
    }

    /// Borrow of the in-memory trace; `None` for a streaming recorder.
    pub fn trace(&self) -> Option<&AttentionTrace> {
        match &self.sink {
            Sink::Memory(trace) => Some(trace),
            Sink::Stream { .. } => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accepts_valid_row_and_rejects_bad_sums() {
        let mut t = AttentionTrace::new();
        t.record(0, 0, 0, 1, vec![0.25, 0.75]).unwrap();
        assert_eq!(t.len(), 1);
        let err = t.record(0, 0, 0, 1, vec![0.25, 0.65]);
        assert!(matches!(err, Err(Error::InvalidWeights { .. })));
    }

    #[test]
    fn rejects_future_mass_and_negatives() {
        let mut t = AttentionTrace::new();
        assert!(t.record(0, 0, 0, 0, vec![0.5, 0.5]).is_err());
        assert!(t.record(0, 0, 0, 1, vec![1.5, -0.5]).is_err());
        // Explicit zeros beyond qpos are fine.
        assert!(t.record(0, 0, 0, 0, vec![1.0, 0.0]).is_ok());
    }

    #[test]
    fn jsonl_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trace.jsonl");
        let mut t = AttentionTrace::new();
        t.record(0, 1, 2, 3, vec![0.1, 0.2, 0.3, 0.4]).unwrap();
        t.record(1, 0, 0, 4, vec![0.2, 0.2, 0.2, 0.2, 0.2]).unwrap();
        t.write_jsonl(&path).unwrap();
        let back = AttentionTrace::read_jsonl(&path).unwrap();
        assert_eq!(back.records(), t.records());
    }

    #[test]
    fn streaming_recorder_writes_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.jsonl");
        let mut r = TraceRecorder::streaming(&path).unwrap();
        r.record_attention(0, 0, 0, 0, &[1.0], None).unwrap();
        r.record_attention(1, 0, 0, 1, &[0.5, 0.5], None).unwrap();
        assert_eq!(r.record_count(), 2);
        assert!(r.finish().unwrap().is_none());
        let back = AttentionTrace::read_jsonl(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back.records()[1].qpos, 1);
    }
}
