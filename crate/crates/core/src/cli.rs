//! The `dfmr` command-line tool.
//!
//! Exit codes: 0 on success, 2 when some inputs were skipped with
//! diagnostics, 1 on fatal errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analyzer::{analyze_corpus, export_csv, write_json, CorpusReport};
use crate::bench::{format_table, ladder_cases, run_bench_with, BenchCase, BenchOptions, BenchResult};
use crate::budget::{max_images_with_overhead, plan_video_with_overhead, sequence_length, PromptSpec, VideoPlan};
use crate::config::{ConfigOverrides, PolicyKind, ToolConfig};
use crate::corpus::{entry_path, load_entry, scan_corpus_with, synth_corpus, Diagnostic, MANIFEST_FILE};
use crate::metric::ChannelAggregation;
use crate::npy;
use crate::reducer::{compress_indexed, StopReason, TraceEntry};
use crate::synth::SynthKind;
use crate::tensor::WindowMode;
use crate::Error;

#[derive(Parser, Debug)]
#[command(
    name = "dfmr",
    version,
    about = "Dynamic feature-map reduction for visual-token grids"
)]
pub struct Cli {
    /// JSON config file; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Emit diagnostics on stderr as JSON lines.
    #[arg(long, global = true)]
    json_errors: bool,
    /// Omit the generated_at field from output artifacts.
    #[arg(long, global = true)]
    no_timestamp: bool,
    /// Process corpus entries on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compress every map in a corpus and record the chosen factors.
    Compress(CompressArgs),
    /// Sigma distributions, rankings and ratio summaries for a corpus.
    Analyze(AnalyzeArgs),
    /// Token-budget arithmetic for multi-image and video prompts.
    Budget(BudgetArgs),
    /// Time the per-map pipeline.
    Bench(BenchArgs),
    /// Write a synthetic corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug, Default)]
struct PolicyFlags {
    /// dynamic, random, or fixed:<s>
    #[arg(long)]
    policy: Option<PolicyKind>,
    #[arg(long)]
    threshold: Option<f64>,
    /// Ascending candidate factors, e.g. 1,2,3
    #[arg(long, value_delimiter = ',')]
    candidates: Option<Vec<usize>>,
    /// paper-literal or pool-window
    #[arg(long)]
    mode: Option<WindowMode>,
    /// pooled-scalars or per-channel-mean
    #[arg(long)]
    aggregation: Option<ChannelAggregation>,
    #[arg(long)]
    seed: Option<u64>,
    /// Evaluate the configured threshold schedule at this step.
    #[arg(long)]
    step: Option<u64>,
    /// Accept flat (N, D) arrays as side x side grids.
    #[arg(long)]
    flat_side: Option<usize>,
}

impl PolicyFlags {
    fn overrides(&self) -> ConfigOverrides {
        ConfigOverrides {
            policy: self.policy,
            threshold: self.threshold,
            candidates: self.candidates.clone(),
            mode: self.mode,
            aggregation: self.aggregation,
            seed: self.seed,
            step: self.step,
            flat_side: self.flat_side,
            ..Default::default()
        }
    }
}

#[derive(Args, Debug)]
struct CompressArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    policy: PolicyFlags,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[arg(long, value_delimiter = ',')]
    thresholds: Option<Vec<f64>>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    k: Option<usize>,
    /// json, csv, or both
    #[arg(long, default_value = "both")]
    format: String,
    #[command(flatten)]
    policy: PolicyFlags,
}

#[derive(Args, Debug)]
struct BudgetArgs {
    /// JSON prompt spec: {image_grids, text_tokens, context_limit, factors, per_image_overhead?}
    #[arg(long)]
    spec: Option<PathBuf>,
    /// Token grid per image, HxW
    #[arg(long, default_value = "24x24", value_parser = parse_grid)]
    grid: (usize, usize),
    /// Compression factor(s); one value applies to every frame
    #[arg(long = "s", value_delimiter = ',', default_value = "1")]
    factors: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    text: usize,
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    frames: Option<usize>,
    /// Report how many images fit for each factor.
    #[arg(long)]
    max_images: bool,
    /// Extra tokens per image for template delimiters.
    #[arg(long, default_value_t = 0)]
    overhead: usize,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// HxWxD; repeatable. Without it the full size ladder runs.
    #[arg(long = "case", value_parser = parse_dims)]
    cases: Vec<[usize; 3]>,
    #[arg(long, default_value_t = 100)]
    iterations: usize,
    #[arg(long, default_value_t = crate::bench::DEFAULT_WARMUP)]
    warmup: usize,
    /// Synthetic input kind.
    #[arg(long, default_value = "constant")]
    input: SynthKind,
    /// Spread iterations over all cores to measure aggregate throughput.
    #[arg(long)]
    parallel: bool,
    #[arg(long)]
    output: Option<PathBuf>,
    #[command(flatten)]
    policy: PolicyFlags,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long)]
    kind: SynthKind,
    /// HxWxD
    #[arg(long, value_parser = parse_dims)]
    dims: [usize; 3],
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    amplitude: f32,
    #[arg(long)]
    output: PathBuf,
}

fn parse_sizes(s: &str, n: usize) -> Result<Vec<usize>, String> {
    let parts: Vec<_> = s.split('x').map(|p| p.trim().parse::<usize>()).collect();
    if parts.len() != n || parts.iter().any(|p| p.as_ref().map_or(true, |v| *v == 0)) {
        return Err(format!("expected {n} positive sizes separated by 'x', got `{s}`"));
    }
    Ok(parts.into_iter().map(Result::unwrap).collect())
}

fn parse_grid(s: &str) -> Result<(usize, usize), String> {
    parse_sizes(s, 2).map(|v| (v[0], v[1]))
}

fn parse_dims(s: &str) -> Result<[usize; 3], String> {
    parse_sizes(s, 3).map(|v| [v[0], v[1], v[2]])
}

enum Outcome {
    Success,
    Partial,
}

struct Ctx {
    json_errors: bool,
    no_timestamp: bool,
    parallel: bool,
    config_file: Option<ConfigOverrides>,
}

impl Ctx {
    fn timestamp(&self) -> Option<String> {
        (!self.no_timestamp).then(|| chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true))
    }

    fn config(&self, flags: ConfigOverrides) -> anyhow::Result<ToolConfig> {
        Ok(ToolConfig::resolve(self.config_file.clone(), flags)?)
    }

    fn warn(&self, d: &Diagnostic) {
        if self.json_errors {
            let line = serde_json::json!({"level": "warning", "path": d.path, "error": d.error});
            eprintln!("{line}");
        } else {
            eprintln!("warning: {}: {}", d.path, d.error);
        }
    }

    fn fatal(&self, err: &anyhow::Error) {
        if self.json_errors {
            let line = serde_json::json!({"level": "error", "error": format!("{err:#}")});
            eprintln!("{line}");
        } else {
            eprintln!("error: {err:#}");
        }
    }

    fn finish(&self, diagnostics: &[Diagnostic]) -> Outcome {
        for d in diagnostics {
            self.warn(d);
        }
        if diagnostics.is_empty() {
            Outcome::Success
        } else {
            Outcome::Partial
        }
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let mut ctx = Ctx {
        json_errors: cli.json_errors,
        no_timestamp: cli.no_timestamp,
        parallel: !cli.sequential,
        config_file: None,
    };
    let result = (|| {
        if let Some(path) = &cli.config {
            ctx.config_file = Some(ConfigOverrides::from_file(path)?);
        }
        match &cli.command {
            Command::Compress(a) => cmd_compress(&ctx, a),
            Command::Analyze(a) => cmd_analyze(&ctx, a),
            Command::Budget(a) => cmd_budget(&ctx, a),
            Command::Bench(a) => cmd_bench(&ctx, a),
            Command::Synth(a) => cmd_synth(&ctx, a),
        }
    })();
    match result {
        Ok(Outcome::Success) => ExitCode::SUCCESS,
        Ok(Outcome::Partial) => ExitCode::from(2),
        Err(e) => {
            ctx.fatal(&e);
            ExitCode::from(1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub s: usize,
    pub sigma_trace: Vec<TraceEntry>,
    pub tokens_out: usize,
    pub stop_reason: StopReason,
}

#[derive(Serialize)]
struct DecisionsArtifact<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    config: &'a ToolConfig,
    decisions: BTreeMap<String, DecisionRecord>,
    diagnostics: Vec<Diagnostic>,
}

fn cmd_compress(ctx: &Ctx, args: &CompressArgs) -> anyhow::Result<Outcome> {
    let cfg = ctx.config(args.policy.overrides())?;
    let policy = cfg.policy()?;
    let manifest = scan_corpus_with(&args.input, cfg.read_options())
        .with_context(|| format!("reading corpus {}", args.input.display()))?;
    std::fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;

    let work = |(index, entry): (usize, &crate::corpus::ManifestEntry)| {
        let run = || -> crate::Result<DecisionRecord> {
            let map = load_entry(&args.input, entry, cfg.read_options())?;
            let (pooled, d) = compress_indexed(&map, &policy, index as u64)?;
            let out = entry_path(&args.output, entry);
            if let Some(parent) = out.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            npy::write_map(&pooled, &out)?;
            Ok(DecisionRecord {
                s: d.chosen_factor,
                sigma_trace: d.sigma_trace,
                tokens_out: d.tokens_out,
                stop_reason: d.stop_reason,
            })
        };
        (index, run())
    };
    let results: Vec<_> = if ctx.parallel {
        manifest.entries.par_iter().enumerate().map(work).collect()
    } else {
        manifest.entries.iter().enumerate().map(work).collect()
    };

    let mut diagnostics = manifest.diagnostics.clone();
    let mut decisions = BTreeMap::new();
    for (index, r) in results {
        let entry = &manifest.entries[index];
        match r {
            Ok(rec) => {
                decisions.insert(entry.id.clone(), rec);
            }
            Err(e) => diagnostics.push(Diagnostic::new(entry.path.clone(), &e)),
        }
    }
    let artifact = DecisionsArtifact {
        generated_at: ctx.timestamp(),
        config: &cfg,
        decisions,
        diagnostics: diagnostics.clone(),
    };
    write_json(&args.output.join("decisions.json"), &artifact)?;
    Ok(ctx.finish(&diagnostics))
}

#[derive(Serialize)]
struct ReportArtifact<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    config: &'a ToolConfig,
    #[serde(flatten)]
    report: &'a CorpusReport,
}

fn cmd_analyze(ctx: &Ctx, args: &AnalyzeArgs) -> anyhow::Result<Outcome> {
    let (json, csv) = match args.format.as_str() {
        "json" => (true, false),
        "csv" => (false, true),
        "both" => (true, true),
        other => bail!("unknown format `{other}` (expected json, csv or both)"),
    };
    let overrides = ConfigOverrides {
        thresholds: args.thresholds.clone(),
        bins: args.bins,
        k: args.k,
        ..args.policy.overrides()
    };
    let cfg = ctx.config(overrides)?;
    let manifest = scan_corpus_with(&args.input, cfg.read_options())
        .with_context(|| format!("reading corpus {}", args.input.display()))?;
    let report = analyze_corpus(&args.input, &manifest, &cfg.analyze_options(ctx.parallel))?;
    std::fs::create_dir_all(&args.output).map_err(|e| Error::io(&args.output, e))?;
    if json {
        let artifact = ReportArtifact {
            generated_at: ctx.timestamp(),
            config: &cfg,
            report: &report,
        };
        write_json(&args.output.join("report.json"), &artifact)?;
    }
    if csv {
        export_csv(&report, &args.output)?;
    }
    Ok(ctx.finish(&report.diagnostics))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BudgetSpecFile {
    image_grids: Vec<(usize, usize)>,
    text_tokens: usize,
    context_limit: usize,
    factors: Vec<usize>,
    #[serde(default)]
    per_image_overhead: usize,
}

#[derive(Debug, Serialize)]
struct MaxImagesRow {
    s: usize,
    max_images: usize,
}

#[derive(Debug, Serialize)]
struct BudgetReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    image_grids: Vec<(usize, usize)>,
    factors: Vec<usize>,
    text_tokens: usize,
    context_limit: usize,
    per_image_overhead: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    max_images: Option<Vec<MaxImagesRow>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    plan: Option<VideoPlan>,
}

fn cmd_budget(ctx: &Ctx, args: &BudgetArgs) -> anyhow::Result<Outcome> {
    let report = if let Some(path) = &args.spec {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: BudgetSpecFile =
            serde_json::from_str(&text).with_context(|| format!("parsing budget spec {}", path.display()))?;
        let prompt = PromptSpec {
            image_grids: spec.image_grids.clone(),
            text_tokens: spec.text_tokens,
            context_limit: spec.context_limit,
            per_image_overhead: spec.per_image_overhead,
        };
        prompt.validate()?;
        let total = sequence_length(&prompt, &spec.factors)?;
        BudgetReport {
            generated_at: ctx.timestamp(),
            image_grids: spec.image_grids,
            factors: spec.factors,
            text_tokens: spec.text_tokens,
            context_limit: spec.context_limit,
            per_image_overhead: spec.per_image_overhead,
            max_images: None,
            plan: Some(VideoPlan {
                fits: total <= spec.context_limit,
                total,
                overflow: total.saturating_sub(spec.context_limit),
            }),
        }
    } else {
        let Some(limit) = args.limit else {
            bail!("--limit is required unless --spec is given");
        };
        if limit == 0 {
            bail!("--limit must be >= 1");
        }
        if args.max_images {
            let rows = args
                .factors
                .iter()
                .map(|&s| {
                    Ok(MaxImagesRow {
                        s,
                        max_images: max_images_with_overhead(args.grid, s, args.text, limit, args.overhead)?,
                    })
                })
                .collect::<crate::Result<Vec<_>>>()?;
            BudgetReport {
                generated_at: ctx.timestamp(),
                image_grids: vec![args.grid],
                factors: args.factors.clone(),
                text_tokens: args.text,
                context_limit: limit,
                per_image_overhead: args.overhead,
                max_images: Some(rows),
                plan: None,
            }
        } else {
            let frames = args.frames.unwrap_or(args.factors.len());
            let factors = match args.factors.as_slice() {
                [s] => vec![*s; frames],
                many => many.to_vec(),
            };
            let plan = plan_video_with_overhead(frames, args.grid, &factors, args.text, limit, args.overhead)?;
            BudgetReport {
                generated_at: ctx.timestamp(),
                image_grids: vec![args.grid; frames],
                factors,
                text_tokens: args.text,
                context_limit: limit,
                per_image_overhead: args.overhead,
                max_images: None,
                plan: Some(plan),
            }
        }
    };
    let text = serde_json::to_string_pretty(&report)?;
    println!("{text}");
    if let Some(path) = &args.output {
        write_json(path, &report)?;
    }
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct BenchArtifact<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    config: &'a ToolConfig,
    iterations: usize,
    warmup: usize,
    parallel: bool,
    results: &'a [BenchResult],
}

fn cmd_bench(ctx: &Ctx, args: &BenchArgs) -> anyhow::Result<Outcome> {
    let cfg = ctx.config(args.policy.overrides())?;
    let policy = cfg.policy()?;
    let cases: Vec<BenchCase> = if args.cases.is_empty() {
        ladder_cases(&policy, args.input)
    } else {
        args.cases
            .iter()
            .map(|&[height, width, channels]| BenchCase {
                height,
                width,
                channels,
                policy: policy.clone(),
                input: args.input,
            })
            .collect()
    };
    let opts = BenchOptions {
        iterations: args.iterations,
        warmup: args.warmup,
        seed: cfg.seed,
        parallel: args.parallel,
    };
    let results = run_bench_with(&cases, &opts)?;
    print!("{}", format_table(&results));
    if let Some(path) = &args.output {
        let artifact = BenchArtifact {
            generated_at: ctx.timestamp(),
            config: &cfg,
            iterations: args.iterations,
            warmup: args.warmup,
            parallel: args.parallel,
            results: &results,
        };
        write_json(path, &artifact)?;
    }
    Ok(Outcome::Success)
}

#[derive(Serialize)]
struct SynthParams {
    kind: SynthKind,
    dims: [usize; 3],
    count: usize,
    seed: u64,
    amplitude: f32,
}

#[derive(Serialize)]
struct ManifestArtifact<'a> {
    #[serde(skip_serializing_if = "Option::is_none")]
    generated_at: Option<String>,
    synth: SynthParams,
    #[serde(flatten)]
    manifest: &'a crate::corpus::CorpusManifest,
}

fn cmd_synth(ctx: &Ctx, args: &SynthArgs) -> anyhow::Result<Outcome> {
    let manifest = synth_corpus(
        args.kind,
        args.dims,
        args.count,
        args.seed,
        args.amplitude,
        &args.output,
    )?;
    let artifact = ManifestArtifact {
        generated_at: ctx.timestamp(),
        synth: SynthParams {
            kind: args.kind,
            dims: args.dims,
            count: args.count,
            seed: args.seed,
            amplitude: args.amplitude,
        },
        manifest: &manifest,
    };
    write_json(&args.output.join(MANIFEST_FILE), &artifact)?;
    Ok(Outcome::Success)
}

/// Reads the `decisions.json` written by `compress`.
pub fn read_decisions(path: &Path) -> crate::Result<BTreeMap<String, DecisionRecord>> {
    #[derive(Deserialize)]
    struct Partial {
        decisions: BTreeMap<String, DecisionRecord>,
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str::<Partial>(&text)?.decisions)
}
