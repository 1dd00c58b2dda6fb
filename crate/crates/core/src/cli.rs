//! Command-line front end for the `vap` binary.
//!
//! Pipeline settings resolve as flag, then environment variable, then the
//! `--config` file, then the built-in default.
//!
//! The config file is flat TOML: one `key = value` per line, keys named like
//! the long flags with `_` for `-`. Strings are quoted, lists use `[...]`,
//! `resize` is `[width, height]`. For example:
//!
//! ```toml
//! dataset = "corpus/qa.jsonl"
//! frames = 8
//! initial_frames = 16
//! predictor = "linear"
//! policy = ["most_surprising", "random"]
//! bank_dir = "/tmp/bank"
//! ```

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;
use tracing::{error, info};

use crate::bank::{LatentBank, BANK_DIR_ENV};
use crate::evalharness::{compare_points, CompareMode, OperatingPoint, RunReport, SchemaId};
use crate::ingest::ShiftDirection;
use crate::pipeline::{self, AblationAxis, PipelineConfig, PipelineError};
use crate::prior::PredictorKind;
use crate::select::{Metric, Policy};
use crate::synthworld::{generate_corpus, WorldConfig};
use crate::vlmclient::{FixtureMode, ENDPOINT_ENV, MODEL_ENV};

pub const PREDICTOR_ENDPOINT_ENV: &str = "VAP_PREDICTOR_ENDPOINT";
pub const LOG_ENV: &str = "VAP_LOG";

pub const EXIT_OK: u8 = 0;
pub const EXIT_FATAL: u8 = 1;
pub const EXIT_PARTIAL: u8 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "vap",
    version,
    about = "Keyframe selection by predictive surprise"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus.
    Synth(SynthArgs),
    /// Select frames for every video of a dataset.
    Select(PipelineArgs),
    /// Answer the dataset's questions from selected frames and grade them.
    Eval(EvalArgs),
    /// Pair operating points iso-compute or iso-accuracy.
    Compare(CompareArgs),
    /// Sweep one setting and tabulate accuracy.
    Ablate(AblateArgs),
    /// Inspect or clear the latent bank.
    Cache(CacheArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// World settings (TOML); defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub count: usize,
    /// Overrides the seed in the config.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Default, Args)]
pub struct PipelineArgs {
    /// Flat TOML file with pipeline settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// QA dataset (JSON lines).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Directory of videos; defaults to the dataset's directory.
    #[arg(long)]
    pub videos: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub schema: Option<SchemaId>,
    /// Frames handed to the VLM.
    #[arg(long, short = 'n')]
    pub frames: Option<usize>,
    /// Uniformly sampled anchor frames.
    #[arg(long, short = 'k')]
    pub initial_frames: Option<usize>,
    #[arg(long, value_enum)]
    pub shift: Option<ShiftDirection>,
    #[arg(long, value_enum)]
    pub predictor: Option<PredictorKind>,
    #[arg(long, env = PREDICTOR_ENDPOINT_ENV)]
    pub predictor_endpoint: Option<String>,
    /// Encode frames through the remote predictor's /encode.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", require_equals = true)]
    pub remote_encode: Option<bool>,
    /// Base retry delay for the remote predictor, in milliseconds.
    #[arg(long)]
    pub remote_backoff_ms: Option<u64>,
    #[arg(long)]
    pub ssim_threshold: Option<f64>,
    /// Frames per latent (1 or 4).
    #[arg(long)]
    pub temporal_stride: Option<usize>,
    #[arg(long, value_enum)]
    pub metric: Option<Metric>,
    /// Repeatable or comma separated.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub policy: Vec<Policy>,
    /// Shorthand for every policy.
    #[arg(long)]
    pub all_policies: bool,
    /// Never select anchor frames.
    #[arg(long, num_args = 0..=1, default_missing_value = "true", require_equals = true)]
    pub exclude_initial: Option<bool>,
    #[arg(long)]
    pub min_gap: Option<usize>,
    #[arg(long, env = ENDPOINT_ENV)]
    pub vlm_endpoint: Option<String>,
    #[arg(long, env = MODEL_ENV)]
    pub vlm_model: Option<String>,
    /// Directory of recorded VLM responses.
    #[arg(long)]
    pub fixtures: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub fixture_mode: Option<FixtureMode>,
    /// Re-ask this many times when the provider blocks an answer.
    #[arg(long)]
    pub blocked_retries: Option<usize>,
    #[arg(long, env = BANK_DIR_ENV)]
    pub bank_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Videos processed in parallel.
    #[arg(long, short = 'j')]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// WIDTHxHEIGHT, applied after decoding.
    #[arg(long, value_parser = parse_size)]
    pub resize: Option<(u32, u32)>,
    /// Overrides the frame rate found next to the frames.
    #[arg(long)]
    pub fps: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    /// Existing selections; selection runs first when absent.
    #[arg(long)]
    pub selections: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub pipeline: PipelineArgs,
    #[arg(long, value_enum)]
    pub axis: AblationAxis,
    /// Comma separated axis values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    /// Report or operating-point JSON for the baseline system.
    #[arg(long)]
    pub baseline: PathBuf,
    #[arg(long)]
    pub candidate: PathBuf,
    #[arg(long, value_enum, default_value_t = CompareMode::IsoCompute)]
    pub mode: CompareMode,
    /// Also write `comparison.json` here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CacheArgs {
    #[arg(value_enum)]
    pub action: CacheAction,
    #[arg(long, env = BANK_DIR_ENV)]
    pub bank_dir: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum CacheAction {
    Stat,
    Clear,
}

fn parse_size(s: &str) -> Result<(u32, u32), String> {
    let (w, h) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected WIDTHxHEIGHT, got {s:?}"))?;
    let num = |v: &str| v.trim().parse::<u32>().map_err(|e| format!("{v:?}: {e}"));
    Ok((num(w)?, num(h)?))
}

/// Keys accepted in a pipeline config file.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub dataset: Option<PathBuf>,
    pub videos: Option<PathBuf>,
    pub schema: Option<SchemaId>,
    pub frames: Option<usize>,
    pub initial_frames: Option<usize>,
    pub shift: Option<ShiftDirection>,
    pub predictor: Option<PredictorKind>,
    pub predictor_endpoint: Option<String>,
    pub remote_encode: Option<bool>,
    pub remote_backoff_ms: Option<u64>,
    pub ssim_threshold: Option<f64>,
    pub temporal_stride: Option<usize>,
    pub metric: Option<Metric>,
    pub policy: Option<Vec<Policy>>,
    pub exclude_initial: Option<bool>,
    pub min_gap: Option<usize>,
    pub vlm_endpoint: Option<String>,
    pub vlm_model: Option<String>,
    pub fixtures: Option<PathBuf>,
    pub fixture_mode: Option<FixtureMode>,
    pub blocked_retries: Option<usize>,
    pub bank_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub jobs: Option<usize>,
    pub out: Option<PathBuf>,
    pub resize: Option<(u32, u32)>,
    pub fps: Option<f64>,
}

impl FileConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::InvalidConfig(format!("config file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::parse(&std::fs::read_to_string(path)?)
    }
}

impl PipelineArgs {
    /// Merges flags (clap has already folded in environment variables) over
    /// the config file and defaults.
    pub fn resolve(&self) -> Result<PipelineConfig, PipelineError> {
        let file = match &self.config {
            Some(p) => FileConfig::load(p)?,
            None => FileConfig::default(),
        };
        self.resolve_with(file)
    }

    pub fn resolve_with(&self, file: FileConfig) -> Result<PipelineConfig, PipelineError> {
        let d = PipelineConfig::default();
        let dataset = self.dataset.clone().or(file.dataset).ok_or_else(|| {
            PipelineError::InvalidConfig("no dataset given (--dataset or config key)".into())
        })?;
        let policies = if self.all_policies {
            Policy::ALL.to_vec()
        } else if !self.policy.is_empty() {
            self.policy.clone()
        } else {
            file.policy.unwrap_or(d.policies)
        };
        let cfg = PipelineConfig {
            dataset,
            videos: self.videos.clone().or(file.videos),
            schema: self.schema.or(file.schema).unwrap_or(d.schema),
            frames: self.frames.or(file.frames).unwrap_or(d.frames),
            initial_frames: self
                .initial_frames
                .or(file.initial_frames)
                .unwrap_or(d.initial_frames),
            shift: self.shift.or(file.shift).unwrap_or(d.shift),
            predictor: self.predictor.or(file.predictor).unwrap_or(d.predictor),
            predictor_endpoint: self.predictor_endpoint.clone().or(file.predictor_endpoint),
            remote_encode: self
                .remote_encode
                .or(file.remote_encode)
                .unwrap_or(d.remote_encode),
            remote_backoff_ms: self
                .remote_backoff_ms
                .or(file.remote_backoff_ms)
                .unwrap_or(d.remote_backoff_ms),
            ssim_threshold: self
                .ssim_threshold
                .or(file.ssim_threshold)
                .unwrap_or(d.ssim_threshold),
            temporal_stride: self
                .temporal_stride
                .or(file.temporal_stride)
                .unwrap_or(d.temporal_stride),
            metric: self.metric.or(file.metric).unwrap_or(d.metric),
            policies,
            exclude_initial: self
                .exclude_initial
                .or(file.exclude_initial)
                .unwrap_or(d.exclude_initial),
            min_gap: self.min_gap.or(file.min_gap).unwrap_or(d.min_gap),
            vlm_endpoint: self.vlm_endpoint.clone().or(file.vlm_endpoint),
            vlm_model: self.vlm_model.clone().or(file.vlm_model),
            fixtures: self.fixtures.clone().or(file.fixtures),
            fixture_mode: self
                .fixture_mode
                .or(file.fixture_mode)
                .unwrap_or(d.fixture_mode),
            blocked_retries: self
                .blocked_retries
                .or(file.blocked_retries)
                .unwrap_or(d.blocked_retries),
            bank_dir: self.bank_dir.clone().or(file.bank_dir),
            seed: self.seed.or(file.seed).unwrap_or(d.seed),
            jobs: self.jobs.or(file.jobs).unwrap_or(d.jobs),
            out: self.out.clone().or(file.out).unwrap_or(d.out),
            resize: self.resize.or(file.resize),
            fps: self.fps.or(file.fps),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Installs the JSON-lines stderr logger. Level from `VAP_LOG` (default info).
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_env(LOG_ENV)
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}

fn with_jobs<T>(jobs: usize, f: impl FnOnce() -> T + Send) -> Result<T, PipelineError>
where
    T: Send,
{
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| PipelineError::InvalidConfig(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

fn partial(failures: usize) -> u8 {
    if failures > 0 {
        EXIT_PARTIAL
    } else {
        EXIT_OK
    }
}

/// Operating points from a report, a list of reports, or a list of points.
pub fn load_points(path: &Path) -> Result<Vec<OperatingPoint>, PipelineError> {
    let text = std::fs::read_to_string(path)?;
    if let Ok(points) = serde_json::from_str::<Vec<OperatingPoint>>(&text) {
        return Ok(points);
    }
    if let Ok(reports) = serde_json::from_str::<Vec<RunReport>>(&text) {
        return Ok(reports.iter().map(OperatingPoint::from_report).collect());
    }
    let report: RunReport = serde_json::from_str(&text)?;
    Ok(vec![OperatingPoint::from_report(&report)])
}

fn run_command(command: Command) -> Result<u8, PipelineError> {
    match command {
        Command::Synth(args) => {
            let mut world = match &args.config {
                Some(p) => WorldConfig::from_toml(&std::fs::read_to_string(p)?)?,
                None => WorldConfig::default(),
            };
            if let Some(s) = args.seed {
                world.seed = s;
            }
            let manifest = generate_corpus(&world, args.count, world.seed, &args.out)?;
            info!(videos = manifest.count, out = %args.out.display(), "corpus written");
            Ok(EXIT_OK)
        }
        Command::Select(args) => {
            let cfg = args.resolve()?;
            let out = with_jobs(cfg.jobs, || pipeline::run_select(&cfg))??;
            println!(
                "{} videos, {} failed, {} selections -> {}",
                out.videos,
                out.failures.len(),
                out.records.len(),
                cfg.out.join(pipeline::SELECTIONS_FILE).display()
            );
            Ok(partial(out.failures.len()))
        }
        Command::Eval(args) => {
            let cfg = args.pipeline.resolve()?;
            let selections = args.selections.clone();
            let (out, videos) =
                with_jobs(cfg.jobs, || pipeline::run_eval(&cfg, selections.as_deref()))??;
            for run in &out.runs {
                print!("{}", run.report.to_text());
            }
            println!("{videos} videos, {} failed", out.failures.len());
            Ok(partial(out.failures.len()))
        }
        Command::Compare(args) => {
            let baselines = load_points(&args.baseline)?;
            let candidates = load_points(&args.candidate)?;
            let cmp = compare_points(&baselines, &candidates, args.mode);
            print!("{}", cmp.to_text());
            if let Some(dir) = &args.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(
                    dir.join("comparison.json"),
                    serde_json::to_vec_pretty(&cmp)?,
                )?;
            }
            Ok(EXIT_OK)
        }
        Command::Ablate(args) => {
            let cfg = args.pipeline.resolve()?;
            let values = args.values.clone();
            let axis = args.axis;
            let table = with_jobs(cfg.jobs, || pipeline::run_ablation(&cfg, axis, &values))??;
            print!("{}", table.to_text());
            Ok(partial(table.rows.iter().map(|r| r.failures).sum()))
        }
        Command::Cache(args) => {
            let bank = LatentBank::new(&args.bank_dir);
            match args.action {
                CacheAction::Stat => {
                    let s = bank.stat()?;
                    println!(
                        "{} videos, {} real, {} generated, {} bytes",
                        s.videos, s.real_entries, s.generated_entries, s.bytes
                    );
                }
                CacheAction::Clear => {
                    bank.clear()?;
                    println!("cleared {}", args.bank_dir.display());
                }
            }
            Ok(EXIT_OK)
        }
    }
}

/// Runs a parsed command line and maps the outcome to an exit code.
pub fn run(cli: Cli) -> ExitCode {
    match run_command(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            error!(error = %e, "fatal");
            eprintln!("error: {e}");
            ExitCode::from(EXIT_FATAL)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(extra: &[&str]) -> PipelineArgs {
        let mut argv = vec!["vap", "select"];
        argv.extend_from_slice(extra);
        match Cli::try_parse_from(argv).unwrap().command {
            Command::Select(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn flags_beat_file_beats_default() {
        let file = FileConfig::parse(
            "dataset = \"qa.jsonl\"\nframes = 8\ninitial_frames = 16\nmetric = \"dot\"\n",
        )
        .unwrap();
        let cfg = args(&["--frames", "4"]).resolve_with(file).unwrap();
        assert_eq!(cfg.frames, 4);
        assert_eq!(cfg.initial_frames, 16);
        assert_eq!(cfg.metric, Metric::Dot);
        assert_eq!(cfg.min_gap, 0);
        assert_eq!(cfg.dataset, PathBuf::from("qa.jsonl"));
    }

    #[test]
    fn defaults() {
        let cfg = args(&["--dataset", "d.jsonl"])
            .resolve_with(FileConfig::default())
            .unwrap();
        assert_eq!(cfg.frames, 32);
        assert_eq!(cfg.initial_frames, 32);
        assert!(!cfg.exclude_initial);
        assert_eq!(cfg.policies, vec![Policy::MostSurprising]);
        assert!(cfg.jobs >= 1 && cfg.jobs <= 8);
    }

    #[test]
    fn file_grammar() {
        let file = FileConfig::parse(
            "dataset = \"x\"\npolicy = [\"random\", \"uniform\"]\nresize = [64, 48]\nexclude_initial = true\nshift = \"left\"\n",
        )
        .unwrap();
        let cfg = args(&[]).resolve_with(file).unwrap();
        assert_eq!(cfg.policies, vec![Policy::Random, Policy::Uniform]);
        assert_eq!(cfg.resize, Some((64, 48)));
        assert!(cfg.exclude_initial);
        assert_eq!(cfg.shift, ShiftDirection::Left);
        assert!(FileConfig::parse("fames = 3").is_err());
    }

    #[test]
    fn flag_forms() {
        let a = args(&[
            "--dataset",
            "d",
            "--policy",
            "random,uniform",
            "--exclude-initial",
            "--resize",
            "64x48",
        ]);
        let cfg = a.resolve_with(FileConfig::default()).unwrap();
        assert_eq!(cfg.policies, vec![Policy::Random, Policy::Uniform]);
        assert!(cfg.exclude_initial);
        assert_eq!(cfg.resize, Some((64, 48)));
        let all = args(&["--dataset", "d", "--all-policies"])
            .resolve_with(FileConfig::default())
            .unwrap();
        assert_eq!(all.policies.len(), 4);
        let off = args(&["--dataset", "d", "--exclude-initial=false"]);
        let file = FileConfig::parse("exclude_initial = true").unwrap();
        assert!(!off.resolve_with(file).unwrap().exclude_initial);
    }

    #[test]
    fn missing_dataset_is_fatal() {
        assert!(args(&[]).resolve_with(FileConfig::default()).is_err());
        assert!(args(&["--dataset", "d", "--frames", "0"])
            .resolve_with(FileConfig::default())
            .is_err());
    }
}
