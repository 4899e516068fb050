//! Command-line surface: data generation, training, evaluation, the
//! verification oracles, and report comparison.
//!
//! Exit codes: 0 success, 1 verification failure (gradcheck/oracle-check
//! out of tolerance), 2 usage or configuration errors. Human-readable
//! output goes to stdout, diagnostics to stderr. Every successful run
//! writes a RunManifest naming its inputs and checksummed outputs.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::check;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_dataset, read_report_csv, relative_metrics, write_report_csv, write_segment_details,
    ReportMeta,
};
use crate::network::{load_checkpoint, Mode, Model};
use crate::synthdata::{generate_dataset, read_dataset, write_dataset, SynthConfig};
use crate::training::{train, TrainConfig};

#[derive(Parser)]
#[command(
    name = "tlab",
    about = "Desk-scale contextual/dual-mode transducer training lab",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic contextual-session dataset.
    GenData(GenDataArgs),
    /// Train a model (two-phase schedule with optional warm start).
    Train(TrainArgs),
    /// Decode a dataset with a checkpoint and write an evaluation report.
    Eval(EvalArgs),
    /// Finite-difference verification of every gradient path.
    Gradcheck(GradcheckArgs),
    /// Exhaustive-path verification of the lattice dynamic program.
    OracleCheck(OracleCheckArgs),
    /// Relative metrics between two report CSVs.
    Compare(CompareArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// JSON file matching the generator configuration schema.
    #[arg(long)]
    config: PathBuf,
    /// Output dataset path (JSON Lines).
    #[arg(long)]
    out: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the number of sessions.
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON file matching the training configuration schema.
    #[arg(long)]
    config: PathBuf,
    /// Dataset path produced by gen-data.
    #[arg(long)]
    data: PathBuf,
    /// Output directory (checkpoints and training log).
    #[arg(long)]
    out: PathBuf,
    /// Checkpoint directory to warm-start from (skips phase 1).
    #[arg(long)]
    warm_start: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint directory.
    #[arg(long)]
    ckpt: PathBuf,
    /// Dataset path.
    #[arg(long)]
    data: PathBuf,
    /// Decoding mode: streaming | nonstreaming.
    #[arg(long)]
    mode: String,
    /// Past contextual utterances.
    #[arg(long, default_value_t = 0)]
    past: usize,
    /// Future contextual utterances.
    #[arg(long, default_value_t = 0)]
    future: usize,
    /// Report CSV path.
    #[arg(long)]
    report: PathBuf,
    /// Optional per-segment JSON Lines detail path.
    #[arg(long)]
    details: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    #[arg(long, default_value_t = 10)]
    max_symbols: usize,
    #[arg(long, default_value_t = 0)]
    separator_frames: usize,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct OracleCheckArgs {
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    baseline: PathBuf,
    #[arg(long)]
    candidate: PathBuf,
    /// Optional output CSV; the comparison always prints to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
}

/// Entry point for the binary.
pub fn dispatch_env() -> i32 {
    let args: Vec<String> = std::env::args().collect();
    dispatch(&args)
}

/// Parse and run; returns the process exit code.
pub fn dispatch(argv: &[String]) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .format_timestamp(None)
        .try_init();
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            eprint!("{e}");
            return 2;
        }
    };
    let started = now_ms();
    let outcome = match cli.command {
        Command::GenData(args) => run_gen_data(args, started),
        Command::Train(args) => run_train(args, started),
        Command::Eval(args) => run_eval(args, started),
        Command::Gradcheck(args) => run_gradcheck(args, started),
        Command::OracleCheck(args) => run_oracle_check(args, started),
        Command::Compare(args) => run_compare(args, started),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

#[derive(Serialize)]
struct OutputRecord {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    resolved_config: serde_json::Value,
    seed: u64,
    inputs: Vec<String>,
    outputs: Vec<OutputRecord>,
    started_unix_ms: u128,
    finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

fn sha256_hex(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Manifest written at run end, atomically (temp file + rename).
fn write_manifest(
    path: &Path,
    command: &str,
    config: serde_json::Value,
    seed: u64,
    inputs: &[&Path],
    outputs: &[PathBuf],
    started: u128,
) -> Result<()> {
    let mut records = Vec::with_capacity(outputs.len());
    for out in outputs {
        records.push(OutputRecord {
            path: out.display().to_string(),
            sha256: sha256_hex(out)?,
        });
    }
    let manifest = RunManifest {
        command: command.to_string(),
        resolved_config: config,
        seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        outputs: records,
        started_unix_ms: started,
        finished_unix_ms: now_ms(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    let tmp = path.with_extension("manifest.tmp");
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn sibling_manifest(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    primary.with_file_name(name)
}

fn load_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| Error::config(format!("bad {what} {}: {e}", path.display())))
}

fn run_gen_data(args: GenDataArgs, started: u128) -> Result<i32> {
    let mut config: SynthConfig = load_json(&args.config, "generator config")?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(sessions) = args.sessions {
        config.num_sessions = sessions;
    }
    config.validate()?;
    let dataset = generate_dataset(&config)?;
    write_dataset(&dataset, &args.out)?;
    println!(
        "wrote {} sessions ({} utterances, {} segments) to {}",
        dataset.sessions.len(),
        dataset.total_utterances(),
        dataset.total_segments(),
        args.out.display()
    );
    let manifest = args.manifest.unwrap_or_else(|| sibling_manifest(&args.out));
    write_manifest(
        &manifest,
        "gen-data",
        serde_json::to_value(&config)?,
        config.seed,
        &[&args.config],
        &[args.out.clone()],
        started,
    )?;
    Ok(0)
}

fn run_train(args: TrainArgs, started: u128) -> Result<i32> {
    let mut config: TrainConfig = load_json(&args.config, "training config")?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    let dataset = read_dataset(&args.data)?;
    let outcome = train(&config, &dataset, &args.out, args.warm_start.as_deref())?;
    println!(
        "trained to step {}; best validation WER {:.4}; checkpoints in {}",
        outcome.final_step,
        outcome.best_val_wer,
        args.out.display()
    );
    let mut outputs = vec![outcome.log_path.clone()];
    for dir in [&outcome.best_dir, &outcome.final_dir] {
        outputs.push(dir.join("manifest.json"));
        outputs.push(dir.join("params.bin"));
    }
    let mut inputs: Vec<&Path> = vec![&args.config, &args.data];
    if let Some(ws) = &args.warm_start {
        inputs.push(ws);
    }
    let manifest = args.manifest.unwrap_or_else(|| args.out.join("run_manifest.json"));
    write_manifest(
        &manifest,
        "train",
        serde_json::to_value(&config)?,
        config.seed,
        &inputs,
        &outputs,
        started,
    )?;
    Ok(0)
}

fn run_eval(args: EvalArgs, started: u128) -> Result<i32> {
    let mode: Mode = args.mode.parse()?;
    if matches!(mode, Mode::Streaming) && args.future > 0 {
        return Err(Error::usage("student cannot see future utterances".to_string()));
    }
    let ckpt = load_checkpoint(&args.ckpt)?;
    let model = Model::new(ckpt.config.clone())?;
    let dataset = read_dataset(&args.data)?;
    if dataset.feature_dim != ckpt.config.feature_dim
        || dataset.vocab_size != ckpt.config.vocab_size
    {
        return Err(Error::config(format!(
            "dataset dims ({}, {}) do not match checkpoint ({}, {})",
            dataset.feature_dim, dataset.vocab_size, ckpt.config.feature_dim, ckpt.config.vocab_size
        )));
    }
    let run_id = args
        .run_id
        .clone()
        .unwrap_or_else(|| format!("{mode}-p{}-f{}", args.past, args.future));
    let meta = ReportMeta {
        run_id,
        mode,
        past: args.past,
        future: args.future,
        beta: ckpt.train_meta.as_ref().map(|m| m.beta).unwrap_or(0.0),
        checkpoint: format!("{}@{}", args.ckpt.display(), ckpt.step),
    };
    let report = evaluate_dataset(
        &model,
        &ckpt.store,
        &dataset,
        args.past,
        args.future,
        args.max_symbols,
        args.separator_frames,
        meta,
    )?;
    write_report_csv(&report.summary(), &args.report)?;
    let mut outputs = vec![args.report.clone()];
    if let Some(details) = &args.details {
        write_segment_details(&report, details)?;
        outputs.push(details.clone());
    }
    println!(
        "{} segments: WER {:.4}, mean last-token latency {:.1} ms ({} empty hypotheses)",
        report.segments(),
        report.wer,
        report.ael_ms,
        report.empty_hypotheses
    );
    let manifest = args.manifest.unwrap_or_else(|| sibling_manifest(&args.report));
    let config = serde_json::json!({
        "ckpt": args.ckpt.display().to_string(),
        "mode": args.mode,
        "past": args.past,
        "future": args.future,
        "max_symbols": args.max_symbols,
        "separator_frames": args.separator_frames,
    });
    write_manifest(
        &manifest,
        "eval",
        config,
        0,
        &[&args.ckpt, &args.data],
        &outputs,
        started,
    )?;
    Ok(0)
}

fn run_gradcheck(args: GradcheckArgs, started: u128) -> Result<i32> {
    let (store, build) = check::primitive_zoo(args.seed)?;
    let zoo = check::gradient_check(&store, build)?;
    println!("primitive zoo: max relative error {zoo:.3e}");

    let mlp = check::mlp_check(args.seed.wrapping_add(1))?;
    println!("three-layer network: max relative error {mlp:.3e}");

    let dual = gradcheck_dual(args.seed.wrapping_add(2))?;
    println!("dual-mode loss: max relative error {dual:.3e}");

    let worst = zoo.max(mlp).max(dual);
    println!("overall max relative error {worst:.3e} (tolerance {:.0e})", check::GRAD_TOLERANCE);
    if let Some(path) = args.manifest {
        write_manifest(
            &path,
            "gradcheck",
            serde_json::json!({"seed": args.seed}),
            args.seed,
            &[],
            &[],
            started,
        )?;
    }
    if worst <= check::GRAD_TOLERANCE {
        println!("gradcheck PASS");
        Ok(0)
    } else {
        println!("gradcheck FAIL");
        Ok(1)
    }
}

fn gradcheck_dual(seed: u64) -> Result<f64> {
    use crate::context::{build_context_window, Segment};
    use crate::lattice::DistillMode;
    use crate::network::EncoderConfig;
    use crate::synthdata::generate_session;

    let model = Model::new(crate::network::ModelConfig {
        feature_dim: 4,
        vocab_size: 5,
        encoder: EncoderConfig {
            num_blocks: 1,
            model_dim: 8,
            num_heads: 2,
            feedforward_dim: 8,
            use_depthwise_conv: true,
            conv_kernel: 3,
            downsample_factor: 2,
        },
        pred_dim: 5,
        joint_dim: 6,
    })?;
    let store = model.init_params(seed)?;
    let session = generate_session(
        &SynthConfig {
            vocab_size: 4,
            feature_dim: 4,
            latent_count: 2,
            ambiguous_pairs: 1,
            frames_per_token: (2, 3),
            tokens_per_utterance: (2, 3),
            utterances_per_session: (3, 3),
            seed,
            ..SynthConfig::default()
        },
        0,
    )?;
    let teacher = build_context_window(&session, 1, 1, 1)?;
    let student = build_context_window(&session, 1, 1, 0)?;
    let segments: Vec<Segment> = session.utterances[1].segments.clone();
    check::dual_loss_gradient_check(
        &model,
        &store,
        &teacher,
        &student,
        &segments,
        crate::training::DEFAULT_BETA,
        DistillMode::Collapsed3,
    )
}

fn run_oracle_check(args: OracleCheckArgs, started: u128) -> Result<i32> {
    let diffs = crate::par::map_range(args.trials, |i| {
        check::oracle_trial(crate::synthdata::substream_seed(args.seed, "oracle", i as u64))
    });
    let mut worst = 0.0f64;
    for (i, d) in diffs.into_iter().enumerate() {
        let d = d?;
        println!("trial {i}: |dp - bruteforce| = {d:.3e}");
        worst = worst.max(d);
    }
    println!(
        "oracle-check over {} trials: max |dp - bruteforce| = {worst:.3e} (tolerance {:.0e})",
        args.trials,
        check::ORACLE_TOLERANCE
    );
    if let Some(path) = args.manifest {
        write_manifest(
            &path,
            "oracle-check",
            serde_json::json!({"trials": args.trials, "seed": args.seed}),
            args.seed,
            &[],
            &[],
            started,
        )?;
    }
    if worst <= check::ORACLE_TOLERANCE {
        println!("oracle-check PASS");
        Ok(0)
    } else {
        println!("oracle-check FAIL");
        Ok(1)
    }
}

fn run_compare(args: CompareArgs, started: u128) -> Result<i32> {
    let baseline = read_report_csv(&args.baseline)?;
    let candidate = read_report_csv(&args.candidate)?;
    let (rwerr, raelr) = relative_metrics(&baseline, &candidate)?;
    let text = format!(
        "baseline,candidate,rwerr_pct,raelr_ms\n{},{},{},{}\n",
        baseline.run_id, candidate.run_id, rwerr, raelr
    );
    print!("{text}");
    let mut outputs = Vec::new();
    if let Some(out) = &args.out {
        std::fs::write(out, &text)?;
        outputs.push(out.clone());
    }
    if let Some(path) = args.manifest {
        write_manifest(
            &path,
            "compare",
            serde_json::json!({
                "baseline": args.baseline.display().to_string(),
                "candidate": args.candidate.display().to_string(),
            }),
            0,
            &[&args.baseline, &args.candidate],
            &outputs,
            started,
        )?;
    }
    Ok(0)
}
