//! `sinktrack`: drive the toy transformer runtime from the shell. Makes
//! deterministic toy models, generates with any anchoring plan, analyzes
//! saved attention traces and benchmarks prefill overhead.

mod config;
mod errors;
mod plan;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sinktrack_core::analysis;
use sinktrack_core::inject::validate_plan;
use sinktrack_core::runtime::{generate, GenOptions};
use sinktrack_core::trace::TraceRecorder;
use sinktrack_core::weights_io::{
    default_toy_config, load_model, make_toy_model, save_model, DEFAULT_TOY_SEED,
};
use sinktrack_core::{AttentionTrace, Injection, Model, ModelConfig};

use config::RunConfig;
use errors::{require_file, runtime, usage, CliError};
use plan::{parse_format, FormatArg, PlanFlags, PlanSpec};

#[derive(Parser)]
#[command(name = "sinktrack", version, about = "BOS-anchored toy transformer runtime")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a deterministic toy model file
    MakeToyModel(MakeToyModelArgs),
    /// Generate tokens from a prompt, optionally under an injection plan
    Gen(GenArgs),
    /// Reports over saved traces or paired runs
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Time prefill with and without the injection
    BenchPrefill(BenchArgs),
}

#[derive(Args)]
struct MakeToyModelArgs {
    /// Where to write the model
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    vocab: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
    #[arg(long)]
    ln_eps: Option<f32>,
    /// Generator seed (the STKW_SEED environment variable wins over this)
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Prompt token ids, comma separated
    #[arg(long, value_delimiter = ',')]
    prompt: Option<Vec<u32>>,
    /// File of whitespace- or comma-separated token ids
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[arg(long)]
    bos_id: Option<u32>,
    #[arg(long)]
    max_new_tokens: Option<usize>,
    /// Write the attention trace to this JSONL file
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanFlags,
}

#[derive(Subcommand)]
enum AnalyzeCommand {
    /// Rank-correlate per-layer anchor attention between two traces
    Spearman(SpearmanArgs),
    /// Attention-drift table from a saved trace
    Drift(DriftArgs),
    /// Per-layer anchor value-norm change between a plain and an injected run
    L1norm(L1normArgs),
}

#[derive(Args)]
struct SpearmanArgs {
    #[arg(long)]
    trace_before: PathBuf,
    #[arg(long)]
    trace_after: PathBuf,
    #[arg(long, default_value_t = 0)]
    bos_position: usize,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args)]
struct DriftArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long, default_value_t = 0)]
    bos_position: usize,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
}

#[derive(Args)]
struct L1normArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    prompt: Option<Vec<u32>>,
    #[arg(long)]
    prompt_file: Option<PathBuf>,
    #[arg(long)]
    bos_id: Option<u32>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanFlags,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    model: Option<PathBuf>,
    /// Synthetic prompt length
    #[arg(long, default_value_t = 64)]
    prompt_len: usize,
    /// Timed repetitions per arm
    #[arg(long, default_value_t = 500)]
    reps: usize,
    #[arg(long)]
    bos_id: Option<u32>,
    #[arg(long, value_enum)]
    format: Option<FormatArg>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    plan: PlanFlags,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeToyModel(args) => cmd_make_toy_model(args),
        Command::Gen(args) => cmd_gen(args),
        Command::Analyze(AnalyzeCommand::Spearman(args)) => cmd_spearman(args),
        Command::Analyze(AnalyzeCommand::Drift(args)) => cmd_drift(args),
        Command::Analyze(AnalyzeCommand::L1norm(args)) => cmd_l1norm(args),
        Command::BenchPrefill(args) => cmd_bench_prefill(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn cmd_make_toy_model(args: MakeToyModelArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let toy = cfg.toy.unwrap_or_default();
    let stock = default_toy_config();
    let model_config = ModelConfig {
        n_layers: args.layers.or(toy.layers).unwrap_or(stock.n_layers),
        d_model: args.d_model.or(toy.d_model).unwrap_or(stock.d_model),
        n_heads: args.heads.or(toy.heads).unwrap_or(stock.n_heads),
        d_ff: args.d_ff.or(toy.d_ff).unwrap_or(stock.d_ff),
        vocab_size: args.vocab.or(toy.vocab).unwrap_or(stock.vocab_size),
        max_seq: args.max_seq.or(toy.max_seq).unwrap_or(stock.max_seq),
        ln_eps: args.ln_eps.or(toy.ln_eps).unwrap_or(stock.ln_eps),
    };
    let mut seed = args.seed.or(toy.seed).unwrap_or(DEFAULT_TOY_SEED);
    if let Ok(raw) = std::env::var("STKW_SEED") {
        seed = raw
            .trim()
            .parse()
            .map_err(|_| usage(format!("STKW_SEED {raw:?} is not a u64")))?;
    }
    let model = make_toy_model(&model_config, seed)?;
    let out = args.out.or(toy.out).unwrap_or_else(|| PathBuf::from("toy.stkw"));
    save_model(&out, &model)?;
    let summary = serde_json::json!({
        "path": out.display().to_string(),
        "seed": seed,
        "config": model.config(),
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn load_model_arg(flag: Option<&Path>, cfg: &RunConfig) -> Result<Model, CliError> {
    let path = flag
        .or(cfg.model.as_deref())
        .ok_or_else(|| usage("no model given: use --model"))?;
    require_file(path, "model file")?;
    Ok(load_model(path)?)
}

fn read_prompt_file(path: &Path) -> Result<Vec<u32>, CliError> {
    require_file(path, "prompt file")?;
    let raw = std::fs::read_to_string(path)
        .map_err(|e| runtime(format!("cannot read prompt {}: {e}", path.display())))?;
    let mut prompt = Vec::new();
    for piece in raw.split(|c: char| c.is_whitespace() || c == ',') {
        if piece.is_empty() {
            continue;
        }
        prompt.push(
            piece
                .parse()
                .map_err(|_| usage(format!("prompt entry {piece:?} is not a token id")))?,
        );
    }
    Ok(prompt)
}

fn resolve_prompt(
    inline: Option<Vec<u32>>,
    file: Option<&Path>,
    cfg: &RunConfig,
) -> Result<Vec<u32>, CliError> {
    if let Some(p) = inline {
        return Ok(p);
    }
    if let Some(f) = file {
        return read_prompt_file(f);
    }
    if let Some(p) = &cfg.prompt {
        return Ok(p.clone());
    }
    if let Some(f) = &cfg.prompt_file {
        return read_prompt_file(f);
    }
    Err(usage("no prompt given: use --prompt or --prompt-file"))
}

fn emit(format: FormatArg, json: String, csv: String) {
    match format {
        FormatArg::Json => println!("{json}"),
        FormatArg::Csv => print!("{csv}"),
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let model = load_model_arg(args.model.as_deref(), &cfg)?;
    let prompt = resolve_prompt(args.prompt, args.prompt_file.as_deref(), &cfg)?;
    let bos_id = args.bos_id.or(cfg.bos_id).unwrap_or(0);

    let spec = PlanSpec::merge(&args.plan, &cfg)?;
    let injection_plan = spec.build_plan()?;
    let resolved = validate_plan(&injection_plan, model.config())?;
    let info = spec.build_info(&model, &prompt)?;
    let injection = Injection::new(&resolved, info.as_ref());

    let opts = GenOptions {
        max_new_tokens: args.max_new_tokens.or(cfg.max_new_tokens).unwrap_or(16),
        record_logits: false,
    };
    let trace_path = args.trace.or_else(|| cfg.trace.clone());
    let mut recorder = trace_path
        .as_deref()
        .map(TraceRecorder::streaming)
        .transpose()?;

    let out = generate(
        &model,
        &prompt,
        bos_id,
        Some(&injection),
        &opts,
        recorder.as_mut(),
    )?;
    if let Some(rec) = recorder {
        rec.finish()?;
    }
    for token in out.tokens {
        println!("{token}");
    }
    Ok(())
}

fn cmd_spearman(args: SpearmanArgs) -> Result<(), CliError> {
    require_file(&args.trace_before, "trace")?;
    require_file(&args.trace_after, "trace")?;
    let before = AttentionTrace::read_jsonl(&args.trace_before)?;
    let after = AttentionTrace::read_jsonl(&args.trace_after)?;
    let vb = analysis::mean_attention_to_bos_per_layer(&before, args.bos_position)?;
    let va = analysis::mean_attention_to_bos_per_layer(&after, args.bos_position)?;
    let result = analysis::spearman_layers(&vb, &va)?;
    let format = parse_format(args.format, &RunConfig::default())?;
    emit(format, result.to_json(), result.to_csv());
    Ok(())
}

fn cmd_drift(args: DriftArgs) -> Result<(), CliError> {
    require_file(&args.trace, "trace")?;
    let trace = AttentionTrace::read_jsonl(&args.trace)?;
    let report = analysis::drift_report(&trace, args.bos_position)?;
    let format = parse_format(args.format, &RunConfig::default())?;
    emit(format, report.to_json(), report.to_csv());
    Ok(())
}

fn cmd_l1norm(args: L1normArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let model = load_model_arg(args.model.as_deref(), &cfg)?;
    let prompt = resolve_prompt(args.prompt, args.prompt_file.as_deref(), &cfg)?;
    let bos_id = args.bos_id.or(cfg.bos_id).unwrap_or(0);

    let spec = PlanSpec::merge(&args.plan, &cfg)?;
    let injection_plan = spec.build_plan()?;
    let resolved = validate_plan(&injection_plan, model.config())?;
    let info = spec.build_info(&model, &prompt)?;
    let injection = Injection::new(&resolved, info.as_ref());

    let report = analysis::value_norm_for_runs(&model, &prompt, bos_id, &injection)?;
    let format = parse_format(args.format, &cfg)?;
    emit(format, report.to_json(), report.to_csv());
    Ok(())
}

fn cmd_bench_prefill(args: BenchArgs) -> Result<(), CliError> {
    let cfg = RunConfig::load(args.config.as_deref())?;
    let model = load_model_arg(args.model.as_deref(), &cfg)?;
    let bos_id = args.bos_id.or(cfg.bos_id).unwrap_or(0);
    if args.prompt_len < 2 {
        return Err(usage("--prompt-len must be at least 2"));
    }
    let prompt = analysis::synthetic_prompt(args.prompt_len, model.config().vocab_size, bos_id);

    let spec = PlanSpec::merge(&args.plan, &cfg)?;
    let injection_plan = spec.build_plan()?;
    let resolved = validate_plan(&injection_plan, model.config())?;
    let info = spec.build_info(&model, &prompt)?;
    let injection = Injection::new(&resolved, info.as_ref());

    let report = analysis::bench_prefill(&model, &injection, &prompt, bos_id, args.reps)?;
    let format = parse_format(args.format, &cfg)?;
    emit(format, report.to_json(), report.to_csv());
    Ok(())
}
