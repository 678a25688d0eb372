//! Context injection at the BOS anchor.
//!
//! Three interventions, all applied once during prefill; decoding afterwards
//! is the untouched standard path:
//!
//! * `hard` overwrites the cached BOS value row of each scheduled layer with
//!   the pooled info vector, head chunk by head chunk. Keys stay put, so the
//!   attention pattern is preserved and only the payload changes.
//! * `soft` blends the BOS hidden state after a scheduled block completes:
//!   `alpha * h0 + (1 - alpha) * f_info`. Strength comes from a per-layer
//!   schedule; alpha = 1 is an exact no-op.
//! * `sinktrack` swaps the scheduled layer's attention for a dual-track
//!   variant: the BOS row's output comes purely from cross-attention against
//!   projections of the info rows (reusing the layer's own Q/K/V/O weights),
//!   while every other row runs ordinary causal self-attention over the
//!   original sequence, byte for byte the standard result. The cache keeps
//!   the original K/V of all rows at that layer; the injected BOS state
//!   still propagates to later layers through the residual stream.

use crate::anchor::{InfoSource, SourceForm};
use crate::cache::KvCache;
use crate::error::{Error, PlanError, Result};
use crate::model::{Model, ModelConfig};
use crate::runtime;
use crate::tensor::{matmul, Tensor};
use crate::trace::TraceRecorder;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    None,
    Hard,
    Soft,
    Sinktrack,
}

impl Mode {
    pub fn name(&self) -> &'static str {
        match self {
            Mode::None => "none",
            Mode::Hard => "hard",
            Mode::Soft => "soft",
            Mode::Sinktrack => "sinktrack",
        }
    }
}

/// Which layers the intervention touches.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSchedule {
    All,
    /// Layers offset, offset+k, offset+2k, ... below n_layers.
    EveryK { k: usize, offset: usize },
    Explicit(Vec<usize>),
}

impl Default for LayerSchedule {
    /// Every fifth layer starting at 0; the interval that won the schedule
    /// comparison this runtime is built around.
    fn default() -> Self {
        LayerSchedule::EveryK { k: 5, offset: 0 }
    }
}

/// Per-layer blend strength for soft mode. Linear kinds interpolate between
/// the endpoints across the scheduled layers in ascending order; since
/// 1 - alpha is the injected fraction, decay means the early layers inject
/// hardest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum StrengthSchedule {
    Constant { alpha: f32 },
    LinearDecay { alpha_start: f32, alpha_end: f32 },
    LinearIncrease { alpha_start: f32, alpha_end: f32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct InjectionPlan {
    pub mode: Mode,
    pub schedule: LayerSchedule,
    pub strength: Option<StrengthSchedule>,
    pub source_form: SourceForm,
}

impl InjectionPlan {
    pub fn none() -> InjectionPlan {
        InjectionPlan {
            mode: Mode::None,
            schedule: LayerSchedule::default(),
            strength: None,
            source_form: SourceForm::Pooled,
        }
    }
}

/// A plan checked against a concrete model: schedule expanded to sorted
/// layer indices and strengths pinned per scheduled layer.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedPlan {
    pub mode: Mode,
    pub layers: Vec<usize>,
    /// Aligned with `layers`; present exactly for soft mode.
    pub alphas: Vec<f32>,
    pub source_form: SourceForm,
}

impl ResolvedPlan {
    pub fn is_scheduled(&self, layer: usize) -> bool {
        self.mode != Mode::None && self.layers.binary_search(&layer).is_ok()
    }

    pub fn alpha_for(&self, layer: usize) -> Option<f32> {
        let idx = self.layers.binary_search(&layer).ok()?;
        self.alphas.get(idx).copied()
    }
}

fn resolve_layers(schedule: &LayerSchedule, n_layers: usize) -> Result<Vec<usize>> {
    let layers = match schedule {
        LayerSchedule::All => (0..n_layers).collect::<Vec<_>>(),
        LayerSchedule::EveryK { k, offset } => {
            if *k == 0 {
                return Err(PlanError::ZeroStride.into());
            }
            if *offset >= n_layers {
                return Err(PlanError::LayerOutOfRange {
                    layer: *offset,
                    n_layers,
                }
                .into());
            }
            (*offset..n_layers).step_by(*k).collect()
        }
        LayerSchedule::Explicit(list) => {
            let mut sorted = list.clone();
            sorted.sort_unstable();
            for pair in sorted.windows(2) {
                if pair[0] == pair[1] {
                    return Err(PlanError::DuplicateLayer { layer: pair[0] }.into());
                }
            }
            if let Some(&last) = sorted.last() {
                if last >= n_layers {
                    return Err(PlanError::LayerOutOfRange {
                        layer: last,
                        n_layers,
                    }
                    .into());
                }
            }
            sorted
        }
    };
    Ok(layers)
}

fn check_alpha(alpha: f32) -> Result<()> {
    if !alpha.is_finite() || !(0.0..=1.0).contains(&alpha) {
        return Err(PlanError::AlphaOutOfRange { alpha }.into());
    }
    Ok(())
}

/// Validates a plan against a model config and expands it. Every rule
/// violation maps to its own `PlanError` variant.
pub fn validate_plan(plan: &InjectionPlan, config: &ModelConfig) -> Result<ResolvedPlan> {
    let layers = resolve_layers(&plan.schedule, config.n_layers)?;
    if plan.mode != Mode::None && layers.is_empty() {
        return Err(PlanError::EmptySchedule.into());
    }
    match plan.mode {
        Mode::Hard | Mode::Soft => {
            if plan.source_form != SourceForm::Pooled {
                return Err(PlanError::PooledRequired {
                    mode: plan.mode.name(),
                }
                .into());
            }
        }
        Mode::None | Mode::Sinktrack => {}
    }
    let mut alphas = Vec::new();
    match (plan.mode, plan.strength) {
        (Mode::Soft, None) => return Err(PlanError::StrengthMissing.into()),
        (Mode::Soft, Some(s)) => {
            let m = layers.len();
            let endpoints = |start: f32, end: f32| -> Result<()> {
                check_alpha(start)?;
                check_alpha(end)
            };
            match s {
                StrengthSchedule::Constant { alpha } => {
                    check_alpha(alpha)?;
                    alphas = vec![alpha; m];
                }
                StrengthSchedule::LinearDecay { alpha_start, alpha_end } => {
                    endpoints(alpha_start, alpha_end)?;
                    if alpha_start >= alpha_end {
                        return Err(PlanError::DecayEndpoints {
                            start: alpha_start,
                            end: alpha_end,
                        }
                        .into());
                    }
                    alphas = interpolate(alpha_start, alpha_end, m);
                }
                StrengthSchedule::LinearIncrease { alpha_start, alpha_end } => {
                    endpoints(alpha_start, alpha_end)?;
                    if alpha_start <= alpha_end {
                        return Err(PlanError::IncreaseEndpoints {
                            start: alpha_start,
                            end: alpha_end,
                        }
                        .into());
                    }
                    alphas = interpolate(alpha_start, alpha_end, m);
                }
            }
        }
        (Mode::Hard | Mode::Sinktrack, Some(_)) => {
            return Err(PlanError::StrengthForbidden {
                mode: plan.mode.name(),
            }
            .into())
        }
        _ => {}
    }
    Ok(ResolvedPlan {
        mode: plan.mode,
        layers,
        alphas,
        source_form: plan.source_form,
    })
}

/// Evenly spaced values from start to end inclusive; a single scheduled
/// layer takes the start value.
fn interpolate(start: f32, end: f32, m: usize) -> Vec<f32> {
    if m == 1 {
        return vec![start];
    }
    (0..m)
        .map(|i| start + (end - start) * (i as f32 / (m - 1) as f32))
        .collect()
}

/// A resolved plan paired with its info source, ready to hand to prefill.
pub struct Injection<'a> {
    pub plan: &'a ResolvedPlan,
    pub info: Option<&'a InfoSource>,
}

impl<'a> Injection<'a> {
    pub fn new(plan: &'a ResolvedPlan, info: Option<&'a InfoSource>) -> Injection<'a> {
        Injection { plan, info }
    }

    /// Mode/info compatibility: active modes need an info source whose form
    /// and width match the plan and model.
    pub fn check_against(&self, model: &Model) -> Result<()> {
        if self.plan.mode == Mode::None {
            return Ok(());
        }
        let info = self.info.ok_or(Error::InfoSourceMissing {
            mode: self.plan.mode.name(),
        })?;
        if info.form() != self.plan.source_form {
            return Err(Error::InfoFormMismatch {
                info: info.form().name(),
                plan: self.plan.source_form.name(),
            });
        }
        if info.rows().cols() != model.config().d_model {
            return Err(Error::ShapeMismatch {
                op: "Injection::check_against",
                left: info.rows().shape().to_vec(),
                right: vec![model.config().d_model],
            });
        }
        Ok(())
    }

    fn info(&self) -> Result<&InfoSource> {
        self.info.ok_or(Error::InfoSourceMissing {
            mode: self.plan.mode.name(),
        })
    }
}

// --- the three interventions ------------------------------------------------

/// Replaces the cached BOS value row at `layer` with `f_info`, head chunk h
/// taking elements [h*dh, (h+1)*dh). Key rows are untouched.
pub fn hard_inject(cache: &mut KvCache, layer: usize, f_info: &[f32]) -> Result<()> {
    let d = cache.n_heads() * cache.head_dim();
    if f_info.len() != d {
        return Err(Error::ShapeMismatch {
            op: "hard_inject",
            left: vec![f_info.len()],
            right: vec![d],
        });
    }
    if cache.layer_len(layer) == 0 {
        return Err(Error::EmptyInput("hard_inject: no BOS row cached"));
    }
    cache.v_row_mut(layer, 0).copy_from_slice(f_info);
    Ok(())
}

/// Weighted blend of the BOS hidden state with the pooled info vector:
/// `alpha * h0 + (1 - alpha) * f_info`.
pub fn soft_inject(h0: &[f32], f_info: &[f32], alpha: f32) -> Result<Vec<f32>> {
    if h0.len() != f_info.len() {
        return Err(Error::ShapeMismatch {
            op: "soft_inject",
            left: vec![h0.len()],
            right: vec![f_info.len()],
        });
    }
    check_alpha(alpha)?;
    Ok(h0
        .iter()
        .zip(f_info)
        .map(|(&h, &f)| alpha * h + (1.0 - alpha) * f)
        .collect())
}

/// Cross-attention of the BOS hidden state against the info rows, using the
/// layer's own projection weights: softmax(q K_info^T / sqrt(dh)) V_info per
/// head, concatenated, then through W_O.
pub fn cross_attend_bos(
    model: &Model,
    h0: &[f32],
    layer: usize,
    info_rows: &Tensor,
) -> Result<Tensor> {
    let d = model.config().d_model;
    if h0.len() != d || info_rows.cols() != d {
        return Err(Error::ShapeMismatch {
            op: "cross_attend_bos",
            left: vec![h0.len()],
            right: info_rows.shape().to_vec(),
        });
    }
    let h0t = Tensor::from_vec(&[d], h0.to_vec())?;
    let q0 = matmul(&h0t, &model.layer(layer).w_q)?;
    let heads = runtime::cross_head_outputs(model, layer, q0.data(), info_rows)?;
    let heads_t = Tensor::from_vec(&[d], heads)?;
    matmul(&heads_t, &model.layer(layer).w_o)
}

/// Dual-track attention at a scheduled layer during prefill. Row 0 (BOS)
/// attends only across the info rows; rows 1..n run the ordinary causal
/// self-attention over the original sequence and are bit-identical to the
/// standard path for the same inputs. The cache receives the original K/V of
/// every row.
///
/// Only valid at sequence start (the chunk must begin with BOS) and only at
/// layers the plan schedules.
#[allow(clippy::too_many_arguments)]
pub fn dual_track_attention(
    model: &Model,
    h: &Tensor,
    layer: usize,
    plan: &ResolvedPlan,
    info: &InfoSource,
    cache: &mut KvCache,
    recorder: Option<&mut TraceRecorder>,
    step: usize,
) -> Result<Tensor> {
    if !plan.is_scheduled(layer) {
        return Err(Error::UnscheduledLayer { layer });
    }
    let len = cache.layer_len(layer);
    if len != 0 {
        return Err(Error::NotSequenceStart { layer, len });
    }
    let (q, p0) = runtime::project_and_cache(model, h, layer, cache)?;
    let mut out = Tensor::zeros(&[h.rows(), model.config().d_model]);
    runtime::attend_rows(model, layer, &q, p0, 1, cache, recorder, step, &mut out)?;
    let first = runtime::cross_head_outputs(model, layer, q.row(0), info.rows())?;
    out.set_row(0, &first);
    matmul(&out, &model.layer(layer).w_o)
}

/// Runs one layer under the plan: the standard block off-schedule or for
/// mode none, otherwise the block with the mode's intervention applied.
pub fn apply_plan_at_layer(
    model: &Model,
    h: &Tensor,
    layer: usize,
    injection: &Injection,
    cache: &mut KvCache,
    mut recorder: Option<&mut TraceRecorder>,
    step: usize,
) -> Result<Tensor> {
    let plan = injection.plan;
    if !plan.is_scheduled(layer) {
        return runtime::decoder_block(model, h, layer, cache, recorder, step);
    }
    match plan.mode {
        Mode::None => unreachable!("mode none schedules no layers"),
        Mode::Hard => {
            let out =
                runtime::decoder_block(model, h, layer, cache, recorder.as_deref_mut(), step)?;
            let info = injection.info()?;
            let pooled = info.pooled_vec().ok_or(Error::InfoFormMismatch {
                info: info.form().name(),
                plan: plan.source_form.name(),
            })?;
            hard_inject(cache, layer, pooled)?;
            Ok(out)
        }
        Mode::Soft => {
            let mut out =
                runtime::decoder_block(model, h, layer, cache, recorder.as_deref_mut(), step)?;
            let info = injection.info()?;
            let pooled = info.pooled_vec().ok_or(Error::InfoFormMismatch {
                info: info.form().name(),
                plan: plan.source_form.name(),
            })?;
            let alpha = plan
                .alpha_for(layer)
                .expect("validated soft plan carries an alpha per scheduled layer");
            let blended = soft_inject(out.row(0), pooled, alpha)?;
            out.set_row(0, &blended);
            Ok(out)
        }
        Mode::Sinktrack => {
            let info = injection.info()?;
            let attn = dual_track_attention(
                model,
                h,
                layer,
                plan,
                info,
                cache,
                recorder,
                step,
            )?;
            runtime::block_from_attention(model, h, layer, &attn)
        }
    }
}
