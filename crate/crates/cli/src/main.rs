//! Batch front end: generate, fit, segment, features.
//!
//! Exit codes: 0 success, 2 config/schema problems (message names the
//! offending field), 3 I/O problems (message names the path), 1 anything
//! else.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use segseq::error::Error;
use segseq::features::{
    frequency_vector, labels_to_string, per_timestep_labels_from_starts, window_labels,
};
use segseq::generator::sample_dataset;
use segseq::io;
use segseq::model::Hyperparams;
use segseq::plot::render_svg;
use segseq::trainer;
use segseq::Result;

#[derive(Parser)]
#[command(name = "segseq", version, about = "Shared multi-sequence time-series segmentation")]
struct Cli {
    /// Worker threads; falls back to SEGSEQ_THREADS, then all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample a synthetic dataset (and its ground truth) from a spec.
    Generate {
        /// Generator spec JSON.
        #[arg(long)]
        config: PathBuf,
        /// Dataset JSON to write.
        #[arg(long)]
        out: PathBuf,
        /// Ground-truth JSON to write (default: <out>.truth.json).
        #[arg(long)]
        truth: Option<PathBuf>,
        /// Overrides the seed in the spec.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit the model to a dataset.
    Fit {
        /// Dataset JSON (or CSV with columns seq_id,x,y).
        #[arg(long)]
        data: PathBuf,
        /// Hyperparameter config JSON.
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint JSON to write.
        #[arg(long)]
        model_out: PathBuf,
        /// Per-round diagnostics JSONL (default: <model-out>.diagnostics.jsonl).
        #[arg(long)]
        diagnostics: Option<PathBuf>,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Segment a dataset under a trained model.
    Segment {
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint JSON from `fit`.
        #[arg(long)]
        model: PathBuf,
        /// Segmentation report JSON to write.
        #[arg(long)]
        out: PathBuf,
        /// Retained Gibbs samples (overrides the checkpoint config).
        #[arg(long)]
        samples: Option<usize>,
        /// Directory receiving one SVG per sequence.
        #[arg(long)]
        plot: Option<PathBuf>,
        /// Overrides the sampling seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarize a segmentation report as label strings and frequencies.
    Features {
        /// Segmentation report JSON from `segment`.
        #[arg(long)]
        report: PathBuf,
        /// Features CSV to write.
        #[arg(long)]
        out: PathBuf,
        /// Timesteps per string symbol.
        #[arg(long, default_value_t = 10)]
        window: usize,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::File { .. } | Error::Io(_) => 3,
        Error::Numerical(_) => 1,
        _ => 2,
    }
}

fn resolve_threads(flag: Option<usize>) -> Result<Option<usize>> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("SEGSEQ_THREADS") {
        Ok(v) => {
            let n = v.parse::<usize>().map_err(|_| {
                Error::invalid(format!("SEGSEQ_THREADS must be a positive integer, got '{v}'"))
            })?;
            Ok(Some(n))
        }
        Err(_) => Ok(None),
    }
}

fn load_hyperparams(path: &Path) -> Result<Hyperparams> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    let hp: Hyperparams = serde_json::from_str(&text)
        .map_err(|e| Error::schema(format!("{}: {e}", path.display())))?;
    hp.validate()?;
    Ok(hp)
}

fn safe_file_stem(id: &str) -> String {
    id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn cmd_generate(
    config: &Path,
    out: &Path,
    truth: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let mut spec = io::load_generator_spec(config)?;
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let (data, truths) = sample_dataset(&spec)?;
    io::save_dataset_json(out, &data)?;
    let truth_path = match truth {
        Some(p) => p.to_path_buf(),
        None => out.with_extension("truth.json"),
    };
    io::save_ground_truth(&truth_path, &truths)?;
    let points: usize = data.sequences.iter().map(|s| s.len()).sum();
    let segments: usize = truths.iter().map(|t| t.labels.len()).sum();
    println!(
        "wrote {} sequences ({points} points, {segments} segments) to {} and {}",
        data.len(),
        out.display(),
        truth_path.display()
    );
    Ok(())
}

fn cmd_fit(
    data: &Path,
    config: &Path,
    model_out: &Path,
    diagnostics: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let dataset = io::load_dataset(data)?;
    let mut hp = load_hyperparams(config)?;
    if let Some(seed) = seed {
        hp.seed = seed;
    }
    let outcome = trainer::fit(&dataset, &hp)?;
    io::save_checkpoint(model_out, &outcome.state, &hp)?;
    let diag_path = match diagnostics {
        Some(p) => p.to_path_buf(),
        None => model_out.with_extension("diagnostics.jsonl"),
    };
    io::save_diagnostics_jsonl(&diag_path, &outcome.diagnostics)?;
    if let Some(err) = &outcome.round_error {
        eprintln!("warning: stopped early, keeping the last completed round ({err})");
    }
    let active = outcome.state.active_kernels(hp.active_threshold).len();
    let objective = outcome.diagnostics.last().map(|d| d.objective).unwrap_or(f64::NAN);
    println!(
        "rounds: {} (converged: {}), active kernels: {active}, objective: {objective}",
        outcome.diagnostics.len(),
        outcome.converged
    );
    Ok(())
}

fn cmd_segment(
    data: &Path,
    model: &Path,
    out: &Path,
    samples: Option<usize>,
    plot: Option<&Path>,
    seed: Option<u64>,
) -> Result<()> {
    let dataset = io::load_dataset(data)?;
    let (state, mut hp) = io::load_checkpoint(model)?;
    if let Some(l) = samples {
        if l == 0 {
            return Err(Error::invalid("samples must be positive"));
        }
        hp.gibbs.num_samples = l;
    }
    if let Some(seed) = seed {
        hp.seed = seed;
    }
    let outputs = trainer::segment(&dataset, &state, &hp)?;
    let report = io::SegmentationReport::from_outputs(&outputs, hp.m);
    io::save_segmentation_report(out, &report)?;

    if let Some(dir) = plot {
        std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        for (output, seq) in outputs.iter().zip(&dataset.sequences) {
            let starts: Vec<Vec<usize>> =
                output.samples.iter().map(|s| s.start_indices()).collect();
            let labels =
                per_timestep_labels_from_starts(seq.len(), &starts, &output.labels, hp.m)?;
            let svg = render_svg(seq, &output.marginal_split_prob, &labels)?;
            let path = dir.join(format!("{}.svg", safe_file_stem(&seq.id)));
            std::fs::write(&path, svg).map_err(|e| Error::file(&path, e))?;
        }
    }
    println!("segmented {} sequences into {}", dataset.len(), out.display());
    Ok(())
}

fn cmd_features(report_path: &Path, out: &Path, window: usize) -> Result<()> {
    if window == 0 {
        return Err(Error::invalid("window must be positive"));
    }
    let report = io::load_segmentation_report(report_path)?;
    let mut rows = Vec::with_capacity(report.sequences.len());
    for seq in &report.sequences {
        let per_t = per_timestep_labels_from_starts(seq.n, &seq.samples, &seq.labels, report.m)?;
        let windows = window_labels(&per_t, report.m, window)?;
        rows.push(io::FeatureRow {
            seq_id: seq.seq_id.clone(),
            string: labels_to_string(&windows)?,
            frequencies: frequency_vector(&windows, report.m)?,
        });
    }
    io::save_features_csv(out, &rows, report.m)?;
    println!("wrote {} feature rows to {}", rows.len(), out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(threads) = resolve_threads(cli.threads)? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| Error::invalid(format!("threads: {e}")))?;
    }
    match &cli.command {
        Command::Generate { config, out, truth, seed } => {
            cmd_generate(config, out, truth.as_deref(), *seed)
        }
        Command::Fit { data, config, model_out, diagnostics, seed } => {
            cmd_fit(data, config, model_out, diagnostics.as_deref(), *seed)
        }
        Command::Segment { data, model, out, samples, plot, seed } => {
            cmd_segment(data, model, out, *samples, plot.as_deref(), *seed)
        }
        Command::Features { report, out, window } => cmd_features(report, out, *window),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
