//! `specdec`: command-line harness around the speculative decoding engine.
//!
//! Three subcommands:
//!
//! * `gen-model` — deterministically initialize a target + draft model and
//!   write it in the engine's file format (byte-identical for equal args).
//! * `run` — decode a synthetic prompt in vanilla, chain, or tree mode and
//!   report metrics as JSON on stdout (optionally to a file as well).
//! * `selftest` — execute the engine's invariant suites.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 configuration error (the
//! offending flag or field is named in the message).

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use specdec_core::draft::{init_draft, DraftWeights};
use specdec_core::model::{init_model, load_model, save_model, ModelWeights};
use specdec_core::positions::vanilla_indices;
use specdec_core::selftest::{self, Level, Sabotage};
use specdec_core::verify::{decode_loop, DecodeMode, DecodeParams, DraftPolicy};
use specdec_core::{Error, ModelConfig, RngStream, Token};

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "specdec",
    about = "Speculative decoding harness: generate models, run decodes, self-test the engine",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a target + draft model file from a seed.
    GenModel(GenModelArgs),
    /// Decode a synthetic prompt and print metrics JSON.
    Run(RunArgs),
    /// Run the engine's invariant suites.
    Selftest(SelftestArgs),
}

#[derive(Args)]
struct GenModelArgs {
    /// Output model file path.
    #[arg(long)]
    out: PathBuf,
    /// RNG seed for weight initialization.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Vocabulary size.
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    /// Model width.
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Target transformer layers.
    #[arg(long, default_value_t = 4)]
    layers: usize,
    /// Attention heads.
    #[arg(long, default_value_t = 4)]
    heads: usize,
    /// Per-head dimension.
    #[arg(long, default_value_t = 16)]
    head_dim: usize,
    /// Feed-forward hidden width.
    #[arg(long, default_value_t = 256)]
    ffn: usize,
    /// Draft sliding-window size W.
    #[arg(long, default_value_t = 512)]
    window: usize,
    /// Default speculation depth stored in the file.
    #[arg(long, default_value_t = 5)]
    gamma: usize,
    /// Default per-level beam widths stored in the file (comma separated).
    #[arg(long, value_delimiter = ',', default_value = "4,16,16,16,16")]
    beam_widths: Vec<usize>,
    /// Give the draft its own cross-attention K/V projections instead of
    /// reading the target cache verbatim.
    #[arg(long, default_value_t = false)]
    cross_proj: bool,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Vanilla,
    Chain,
    Tree,
}

#[derive(Args)]
struct RunArgs {
    /// Model file produced by gen-model.
    #[arg(long)]
    model: PathBuf,
    /// Decode mode.
    #[arg(long, value_enum)]
    mode: ModeArg,
    /// Softmax temperature; zero decodes greedily.
    #[arg(long, default_value_t = 0.0)]
    temperature: f64,
    /// Synthetic prompt length (tokens drawn from the "prompt" stream).
    #[arg(long, default_value_t = 1024)]
    prompt_len: usize,
    /// Tokens to generate.
    #[arg(long, default_value_t = 256)]
    gen_len: usize,
    /// Seed for the prompt and all sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Speculation depth; defaults to the model file's value.
    #[arg(long)]
    gamma: Option<usize>,
    /// Per-level beam widths (comma separated); defaults to the model
    /// file's widths in tree mode and to all ones in chain mode.
    #[arg(long, value_delimiter = ',')]
    beam_widths: Option<Vec<usize>>,
    /// Override the draft's sliding-window size W.
    #[arg(long)]
    window: Option<usize>,
    /// Draft policy: "glide", "oracle", or "noisy:<hit-rate>".
    #[arg(long, default_value = "glide")]
    draft: String,
    /// Target layer whose cache the draft cross-attends (default: last).
    #[arg(long)]
    cross_layer: Option<usize>,
    /// Write one JSON line per verification round (tree, accepted path,
    /// bonus token) to this file.
    #[arg(long)]
    dump_tree: Option<PathBuf>,
    /// Also write the metrics JSON to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LevelArg {
    Fast,
    Full,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SabotageArg {
    Merge,
}

#[derive(Args)]
struct SelftestArgs {
    /// Suite sizing: fast stays interactive, full runs the complete sweeps.
    #[arg(long, value_enum, default_value_t = LevelArg::Fast)]
    level: LevelArg,
    /// Run only the named suite.
    #[arg(long)]
    suite: Option<String>,
    /// Arm a deliberate fault to prove the suites can fail.
    #[arg(long, value_enum)]
    sabotage: Option<SabotageArg>,
}

// ---------------------------------------------------------------------------
// Failure classification
// ---------------------------------------------------------------------------

/// A command failure carrying its exit class: configuration errors name
/// the offending flag/field and exit 2, runtime failures exit 1.
enum Failure {
    Config(String),
    Runtime(String),
}

impl Failure {
    fn report(self) -> ExitCode {
        match self {
            Failure::Config(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(2)
            }
            Failure::Runtime(msg) => {
                eprintln!("error: {msg}");
                ExitCode::from(1)
            }
        }
    }
}

fn config_err(msg: impl Into<String>) -> Failure {
    Failure::Config(msg.into())
}

/// Errors surfaced while loading or validating inputs are configuration
/// errors; plain I/O failures are runtime.
fn load_failure(e: Error) -> Failure {
    match e {
        Error::Io(_) => Failure::Runtime(e.to_string()),
        _ => Failure::Config(e.to_string()),
    }
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::GenModel(args) => cmd_gen_model(args),
        Cmd::Run(args) => cmd_run(args),
        Cmd::Selftest(args) => cmd_selftest(args),
    };
    match result {
        Ok(code) => code,
        Err(f) => f.report(),
    }
}

// ---------------------------------------------------------------------------
// gen-model
// ---------------------------------------------------------------------------

fn cmd_gen_model(args: GenModelArgs) -> Result<ExitCode, Failure> {
    let config = ModelConfig {
        vocab_size: args.vocab,
        dim: args.dim,
        n_layers: args.layers,
        n_heads: args.heads,
        head_dim: args.head_dim,
        ffn_dim: args.ffn,
        window_w: args.window,
        gamma: args.gamma,
        beam_widths: args.beam_widths,
        cross_proj: args.cross_proj,
        ..ModelConfig::default()
    };
    config.validate().map_err(|e| config_err(e.to_string()))?;

    let mut wrng = RngStream::new(args.seed, "weights");
    let target: ModelWeights<f32> =
        init_model(&config, &mut wrng).map_err(|e| config_err(e.to_string()))?;
    let mut drng = RngStream::new(args.seed, "draft-weights");
    let draft: DraftWeights<f32> =
        init_draft(&config, &mut drng).map_err(|e| config_err(e.to_string()))?;

    save_model(&args.out, &target, Some(&draft))
        .map_err(|e| Failure::Runtime(format!("writing {}: {e}", args.out.display())))?;
    println!(
        "wrote {} (vocab {}, dim {}, {} layers, window {})",
        args.out.display(),
        config.vocab_size,
        config.dim,
        config.n_layers,
        config.window_w
    );
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// run
// ---------------------------------------------------------------------------

/// Metrics report printed by `run`. Field order is the serialization
/// order; everything except `wall_seconds` and the derived
/// `tokens_per_sec` is byte-deterministic for identical flags and seed.
#[derive(Serialize)]
struct RunReport {
    mode: String,
    draft: String,
    gamma: usize,
    beam_widths: Vec<usize>,
    temperature: f64,
    seed: u64,
    prompt_len: usize,
    gen_len: usize,
    total_tokens: usize,
    target_forwards: usize,
    tau: f64,
    accept_histogram: Vec<u64>,
    tokens_per_sec: f64,
    wall_seconds: f64,
    tokens: Vec<Token>,
}

/// Parsed `--draft` policy choice.
enum DraftArg {
    Glide,
    Oracle,
    Noisy(f64),
}

fn parse_draft(s: &str) -> Result<DraftArg, Failure> {
    match s {
        "glide" => Ok(DraftArg::Glide),
        "oracle" => Ok(DraftArg::Oracle),
        _ => match s.strip_prefix("noisy:") {
            Some(rate) => {
                let hit: f64 = rate.parse().map_err(|_| {
                    config_err(format!("--draft noisy:<hit-rate> needs a number, got '{rate}'"))
                })?;
                if !(0.0..=1.0).contains(&hit) || !hit.is_finite() {
                    return Err(config_err(format!(
                        "--draft noisy hit rate must be in [0, 1], got {hit}"
                    )));
                }
                Ok(DraftArg::Noisy(hit))
            }
            None => Err(config_err(format!(
                "--draft must be glide, oracle, or noisy:<hit-rate>, got '{s}'"
            ))),
        },
    }
}

fn cmd_run(args: RunArgs) -> Result<ExitCode, Failure> {
    // --- Load and validate ------------------------------------------------
    let (mut target, draft): (ModelWeights<f32>, Option<DraftWeights<f32>>) =
        load_model(&args.model).map_err(load_failure)?;

    if args.prompt_len == 0 {
        return Err(config_err("--prompt-len must be at least 1"));
    }
    if args.gen_len == 0 {
        return Err(config_err("--gen-len must be at least 1"));
    }
    if !args.temperature.is_finite() || args.temperature < 0.0 {
        return Err(config_err(format!(
            "--temperature must be finite and non-negative, got {}",
            args.temperature
        )));
    }
    if let Some(w) = args.window {
        if w == 0 {
            return Err(config_err("--window must be at least 1"));
        }
        target.config.window_w = w;
    }
    if let Some(cl) = args.cross_layer {
        if cl >= target.config.n_layers {
            return Err(config_err(format!(
                "--cross-layer {cl} out of range for a {}-layer model",
                target.config.n_layers
            )));
        }
    }

    let mode = match args.mode {
        ModeArg::Vanilla => DecodeMode::Vanilla,
        ModeArg::Chain => DecodeMode::Chain,
        ModeArg::Tree => DecodeMode::Tree,
    };
    let gamma = args.gamma.unwrap_or(target.config.gamma);
    let beam_widths = match (&mode, args.beam_widths) {
        (DecodeMode::Vanilla, _) => Vec::new(),
        (DecodeMode::Chain, None) => vec![1; gamma],
        (DecodeMode::Tree, None) => target.config.beam_widths.clone(),
        (_, Some(w)) => w,
    };
    if mode != DecodeMode::Vanilla {
        if gamma == 0 {
            return Err(config_err("--gamma must be at least 1 in chain and tree modes"));
        }
        if beam_widths.len() != gamma {
            return Err(config_err(format!(
                "--beam-widths has {} levels but --gamma is {gamma}",
                beam_widths.len()
            )));
        }
        if let Some(w) = beam_widths.iter().find(|&&w| w == 0) {
            return Err(config_err(format!("--beam-widths entries must be at least 1, got {w}")));
        }
        if mode == DecodeMode::Chain && beam_widths.iter().any(|&w| w != 1) {
            return Err(config_err(format!(
                "--beam-widths must be all ones in chain mode, got {beam_widths:?}"
            )));
        }
    }

    let draft_arg = parse_draft(&args.draft)?;
    let policy: DraftPolicy<'_, f32> = match draft_arg {
        DraftArg::Glide => match &draft {
            Some(d) => DraftPolicy::Glide {
                draft: d,
                cross_layer: args.cross_layer,
            },
            None => {
                return Err(config_err(
                    "--draft glide needs a model file with draft weights (regenerate with gen-model)",
                ))
            }
        },
        DraftArg::Oracle => DraftPolicy::Oracle,
        DraftArg::Noisy(hit) => DraftPolicy::Noisy(hit),
    };

    // --- Decode -----------------------------------------------------------
    let mut prng = RngStream::new(args.seed, "prompt");
    let prompt: Vec<Token> = (0..args.prompt_len)
        .map(|_| prng.token(target.config.vocab_size))
        .collect();
    let prompt_indices = vanilla_indices(0, prompt.len());

    let params = DecodeParams {
        gen_len: args.gen_len,
        mode,
        beam_widths: beam_widths.clone(),
        temperature: args.temperature,
        seed: args.seed,
        dump_trees: args.dump_tree.is_some(),
    };
    let out = decode_loop(&target, &policy, &prompt, &prompt_indices, &params)
        .map_err(|e| Failure::Runtime(format!("decode failed: {e}")))?;

    // --- Report -----------------------------------------------------------
    if let Some(path) = &args.dump_tree {
        let mut lines = String::new();
        for dump in &out.tree_dumps {
            let _ = writeln!(lines, "{dump}");
        }
        std::fs::write(path, lines)
            .map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))?;
    }

    let m = &out.metrics;
    let report = RunReport {
        mode: match mode {
            DecodeMode::Vanilla => "vanilla",
            DecodeMode::Chain => "chain",
            DecodeMode::Tree => "tree",
        }
        .to_string(),
        draft: args.draft.clone(),
        gamma: if mode == DecodeMode::Vanilla { 0 } else { gamma },
        beam_widths,
        temperature: args.temperature,
        seed: args.seed,
        prompt_len: args.prompt_len,
        gen_len: args.gen_len,
        total_tokens: m.total_tokens,
        target_forwards: m.target_forwards,
        tau: m.tau,
        accept_histogram: m.accept_histogram.clone(),
        tokens_per_sec: if m.wall_seconds > 0.0 {
            out.tokens.len() as f64 / m.wall_seconds
        } else {
            0.0
        },
        wall_seconds: m.wall_seconds,
        tokens: out.tokens,
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Failure::Runtime(format!("serializing metrics: {e}")))?;

    let mut stdout = std::io::stdout().lock();
    writeln!(stdout, "{json}").map_err(|e| Failure::Runtime(format!("writing stdout: {e}")))?;
    if let Some(path) = &args.out {
        std::fs::write(path, format!("{json}\n"))
            .map_err(|e| Failure::Runtime(format!("writing {}: {e}", path.display())))?;
    }
    Ok(ExitCode::SUCCESS)
}

// ---------------------------------------------------------------------------
// selftest
// ---------------------------------------------------------------------------

fn cmd_selftest(args: SelftestArgs) -> Result<ExitCode, Failure> {
    let level = match args.level {
        LevelArg::Fast => Level::Fast,
        LevelArg::Full => Level::Full,
    };
    let sabotage = args.sabotage.map(|SabotageArg::Merge| Sabotage::Merge);
    if sabotage.is_some() {
        println!("sabotage armed: attention-partial merges are deliberately perturbed");
    }

    let t0 = Instant::now();
    let outcomes = selftest::run(level, args.suite.as_deref(), sabotage)
        .map_err(|e| config_err(e.to_string()))?;

    let mut failed_suites = Vec::new();
    for o in &outcomes {
        if o.passed() {
            println!("suite {:28} ok      ({} checks)", o.name, o.cases);
        } else {
            println!(
                "suite {:28} FAILED  ({} of {} checks)",
                o.name, o.failed, o.cases
            );
            for f in &o.failures {
                println!("    {f}");
            }
            failed_suites.push(o.name);
        }
    }
    println!(
        "{} suites, {} checks in {:.1}s",
        outcomes.len(),
        outcomes.iter().map(|o| o.cases).sum::<usize>(),
        t0.elapsed().as_secs_f64()
    );

    if failed_suites.is_empty() {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Failure::Runtime(format!(
            "selftest failed: {}",
            failed_suites.join(", ")
        )))
    }
}
