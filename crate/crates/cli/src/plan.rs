//! Translates flags and config entries into an injection plan and an
//! information source. All semantic validation stays in the library; this
//! module only assembles the structures.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use sinktrack_core::anchor::{InfoSource, SourceForm};
use sinktrack_core::inject::{InjectionPlan, LayerSchedule, Mode, StrengthSchedule};
use sinktrack_core::weights_io::load_tensors;
use sinktrack_core::Model;

use crate::config::RunConfig;
use crate::errors::{require_file, usage, CliError};

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum ModeArg {
    None,
    Hard,
    Soft,
    Sinktrack,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum ScheduleArg {
    All,
    #[value(alias = "every_k")]
    EveryK,
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum AlphaKindArg {
    Constant,
    #[value(alias = "linear_decay")]
    LinearDecay,
    #[value(alias = "linear_increase")]
    LinearIncrease,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum FormArg {
    Pooled,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, ValueEnum)]
pub enum FormatArg {
    Json,
    Csv,
}

fn parse_named<T: ValueEnum>(raw: &str, what: &str) -> Result<T, CliError> {
    T::from_str(raw, true).map_err(|_| usage(format!("config: unknown {what} {raw:?}")))
}

/// Injection flags shared by `gen`, `analyze l1norm` and `bench-prefill`.
#[derive(Debug, Args)]
pub struct PlanFlags {
    /// Injection mode
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Which layers the injection applies to
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleArg>,
    /// Stride for the every-k schedule
    #[arg(long)]
    pub k: Option<usize>,
    /// First layer of the every-k schedule
    #[arg(long)]
    pub offset: Option<usize>,
    /// Comma-separated layer list for the explicit schedule
    #[arg(long, value_delimiter = ',')]
    pub layers: Option<Vec<usize>>,
    /// Strength schedule kind (soft mode only)
    #[arg(long, value_enum)]
    pub alpha_kind: Option<AlphaKindArg>,
    /// Blend weight for a constant strength schedule
    #[arg(long)]
    pub alpha: Option<f32>,
    /// Blend weight at the first scheduled layer
    #[arg(long)]
    pub alpha_start: Option<f32>,
    /// Blend weight at the last scheduled layer
    #[arg(long)]
    pub alpha_end: Option<f32>,
    /// Shape of the information source
    #[arg(long, value_enum)]
    pub source_form: Option<FormArg>,
    /// Prompt span feeding the information source, as START..END
    #[arg(long)]
    pub info_span: Option<String>,
    /// Tensor file holding an external information matrix
    #[arg(long)]
    pub info_file: Option<PathBuf>,
}

/// Flag values with the config file merged in underneath.
pub struct PlanSpec {
    pub mode: ModeArg,
    schedule: Option<ScheduleArg>,
    k: Option<usize>,
    offset: Option<usize>,
    layers: Option<Vec<usize>>,
    alpha_kind: Option<AlphaKindArg>,
    alpha: Option<f32>,
    alpha_start: Option<f32>,
    alpha_end: Option<f32>,
    source_form: Option<FormArg>,
    info_span: Option<String>,
    info_file: Option<PathBuf>,
}

impl PlanSpec {
    pub fn merge(flags: &PlanFlags, cfg: &RunConfig) -> Result<PlanSpec, CliError> {
        let mode = match (flags.mode, cfg.mode.as_deref()) {
            (Some(m), _) => m,
            (None, Some(raw)) => parse_named(raw, "mode")?,
            (None, None) => ModeArg::None,
        };
        let schedule = match (flags.schedule, cfg.schedule.as_deref()) {
            (Some(s), _) => Some(s),
            (None, Some(raw)) => Some(parse_named(raw, "schedule")?),
            (None, None) => None,
        };
        let alpha_kind = match (flags.alpha_kind, cfg.alpha_kind.as_deref()) {
            (Some(a), _) => Some(a),
            (None, Some(raw)) => Some(parse_named(raw, "alpha_kind")?),
            (None, None) => None,
        };
        let source_form = match (flags.source_form, cfg.source_form.as_deref()) {
            (Some(f), _) => Some(f),
            (None, Some(raw)) => Some(parse_named(raw, "source_form")?),
            (None, None) => None,
        };
        Ok(PlanSpec {
            mode,
            schedule,
            k: flags.k.or(cfg.k),
            offset: flags.offset.or(cfg.offset),
            layers: flags.layers.clone().or_else(|| cfg.layers.clone()),
            alpha_kind,
            alpha: flags.alpha.or(cfg.alpha),
            alpha_start: flags.alpha_start.or(cfg.alpha_start),
            alpha_end: flags.alpha_end.or(cfg.alpha_end),
            source_form,
            info_span: flags.info_span.clone().or_else(|| cfg.info_span.clone()),
            info_file: flags.info_file.clone().or_else(|| cfg.info_file.clone()),
        })
    }

    pub fn build_plan(&self) -> Result<InjectionPlan, CliError> {
        let schedule = match self.schedule {
            Some(ScheduleArg::All) => LayerSchedule::All,
            Some(ScheduleArg::Explicit) => {
                let layers = self
                    .layers
                    .clone()
                    .ok_or_else(|| usage("--schedule explicit needs --layers"))?;
                LayerSchedule::Explicit(layers)
            }
            Some(ScheduleArg::EveryK) | None => LayerSchedule::EveryK {
                k: self.k.unwrap_or(5),
                offset: self.offset.unwrap_or(0),
            },
        };
        let strength = match self.alpha_kind {
            None => self.alpha.map(|alpha| StrengthSchedule::Constant { alpha }),
            Some(AlphaKindArg::Constant) => {
                let alpha = self.alpha.ok_or_else(|| usage("constant strength needs --alpha"))?;
                Some(StrengthSchedule::Constant { alpha })
            }
            Some(kind) => {
                let alpha_start = self
                    .alpha_start
                    .ok_or_else(|| usage("ramped strength needs --alpha-start"))?;
                let alpha_end = self
                    .alpha_end
                    .ok_or_else(|| usage("ramped strength needs --alpha-end"))?;
                Some(match kind {
                    AlphaKindArg::LinearDecay => StrengthSchedule::LinearDecay {
                        alpha_start,
                        alpha_end,
                    },
                    _ => StrengthSchedule::LinearIncrease {
                        alpha_start,
                        alpha_end,
                    },
                })
            }
        };
        Ok(InjectionPlan {
            mode: self.mode(),
            schedule,
            strength,
            source_form: self.form(),
        })
    }

    pub fn mode(&self) -> Mode {
        match self.mode {
            ModeArg::None => Mode::None,
            ModeArg::Hard => Mode::Hard,
            ModeArg::Soft => Mode::Soft,
            ModeArg::Sinktrack => Mode::Sinktrack,
        }
    }

    fn form(&self) -> SourceForm {
        match self.source_form {
            Some(FormArg::Pooled) => SourceForm::Pooled,
            Some(FormArg::Full) => SourceForm::Full,
            // hard and soft only accept pooled; the dual track defaults to
            // the lossless full matrix
            None => match self.mode {
                ModeArg::Sinktrack => SourceForm::Full,
                _ => SourceForm::Pooled,
            },
        }
    }

    /// The information source behind an active mode: prompt embeddings over
    /// the chosen span, or an external tensor file.
    pub fn build_info(
        &self,
        model: &Model,
        prompt: &[u32],
    ) -> Result<Option<InfoSource>, CliError> {
        if self.mode == ModeArg::None {
            return Ok(None);
        }
        let form = self.form();
        if let Some(path) = &self.info_file {
            require_file(path, "info tensor file")?;
            let tensors = load_tensors(path)?;
            if tensors.len() != 1 {
                return Err(usage(format!(
                    "info file {} must hold exactly one tensor, found {}",
                    path.display(),
                    tensors.len()
                )));
            }
            let matrix = tensors.into_values().next().unwrap();
            let info = InfoSource::from_external(matrix, form, model.config().d_model)?;
            return Ok(Some(info));
        }
        let span = self.info_span.as_deref().map(parse_span).transpose()?;
        let info = InfoSource::from_prompt(model, prompt, form, span)?;
        Ok(Some(info))
    }
}

fn parse_span(raw: &str) -> Result<std::ops::Range<usize>, CliError> {
    let parts: Vec<&str> = raw.split("..").collect();
    if parts.len() == 2 {
        if let (Ok(start), Ok(end)) = (parts[0].parse(), parts[1].parse()) {
            return Ok(start..end);
        }
    }
    Err(usage(format!("info span {raw:?} is not START..END")))
}

pub fn parse_format(flag: Option<FormatArg>, cfg: &RunConfig) -> Result<FormatArg, CliError> {
    match (flag, cfg.format.as_deref()) {
        (Some(f), _) => Ok(f),
        (None, Some(raw)) => parse_named(raw, "format"),
        (None, None) => Ok(FormatArg::Json),
    }
}
