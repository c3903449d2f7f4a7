use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use cotpack::analysis::{
    collect_runs, load_lengths, plan_expected, plan_monte_carlo, synthetic_prompts, write_csv,
    CollectOptions, Summary,
};
use cotpack::engine::{
    decode_autoregressive_with, decode_oracle_with, decode_parallel_with, DecodeOptions, NoHooks,
};
use cotpack::graph::{load_graph, DependencyGraph};
use cotpack::model::{MockHashModel, ReferenceTransformer, Sampler, TokenModel, TransformerConfig};
use cotpack::scheduler::{simulate, PassRecord};
use cotpack::template::{load_template, render_indexed, ByteTokenizer, TemplateSpec, Tokenizer};

/// Share of mock-model queries that emit the terminator.
const MOCK_STOP_PERMILLE: u32 = 100;

#[derive(Parser)]
#[command(
    name = "cotpack",
    version,
    about = "Parallel decoding of template-structured reasoning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check a template and graph and summarize them.
    Validate(ConfigArgs),
    /// Print the critical path and the schedule for given field lengths.
    Plan(PlanArgs),
    /// Decode one prompt and print the rendered text.
    Decode(DecodeArgs),
    /// Decode synthetic prompts and report pass counts and speedups.
    Bench(BenchArgs),
    /// Write seeded reference-model weights and their manifest.
    InitWeights(InitWeightsArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    template: PathBuf,
    #[arg(long)]
    graph: PathBuf,
}

#[derive(Args)]
struct PlanArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated per-field lengths in template order; defaults to each max_len.
    #[arg(long, conflicts_with = "lengths_file")]
    lengths: Option<String>,
    /// JSON lengths: an array in template order or an object keyed by field name.
    #[arg(long)]
    lengths_file: Option<PathBuf>,
    /// Also sample this many Poisson length draws around the lengths.
    #[arg(long)]
    monte_carlo: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write the per-pass schedule as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelKind {
    Reference,
    Mock,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Parallel,
    Autoregressive,
    Oracle,
}

#[derive(Args)]
struct ModelArgs {
    #[arg(long, value_enum, default_value_t = ModelKind::Reference)]
    model: ModelKind,
    /// Reference-model weights; without it the model is initialized from --seed.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, default_value_t = Mode::Parallel)]
    mode: Mode,
    /// Prompt text; defaults to the template's prompt.
    #[arg(long)]
    prompt: Option<String>,
    /// Sample at this temperature instead of greedy decoding.
    #[arg(long)]
    temperature: Option<f32>,
    /// Write the JSON result here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the per-pass trace as JSON lines.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Leave wall times out of the JSON result.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Number of synthetic prompts.
    #[arg(long, default_value_t = 50)]
    prompts: usize,
    /// Untimed iterations discarded before measuring.
    #[arg(long, default_value_t = 10)]
    warmup: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// CSV output; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    /// JSON summary output; stderr when absent.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Leave wall times out of both outputs.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct InitWeightsArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Failures split by exit code.
enum Failure {
    /// Bad or unreadable configuration: exit 2.
    Config(anyhow::Error),
    /// Failure after configuration was accepted: exit 1.
    Runtime(anyhow::Error),
}

trait OrConfig<T> {
    fn config(self) -> Result<T, Failure>;
}

impl<T> OrConfig<T> for Result<T> {
    fn config(self) -> Result<T, Failure> {
        self.map_err(Failure::Config)
    }
}

trait OrRuntime<T> {
    fn runtime(self) -> Result<T, Failure>;
}

impl<T> OrRuntime<T> for Result<T> {
    fn runtime(self) -> Result<T, Failure> {
        self.map_err(Failure::Runtime)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Validate(args) => cmd_validate(&args),
        Command::Plan(args) => cmd_plan(&args),
        Command::Decode(args) => cmd_decode(&args),
        Command::Bench(args) => cmd_bench(&args),
        Command::InitWeights(args) => cmd_init_weights(&args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Writes to stdout; a closed pipe is not an error.
fn emit(text: &str) -> Result<(), Failure> {
    match io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(Failure::Runtime(
            anyhow!(e).context("cannot write to stdout"),
        )),
        _ => Ok(()),
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))
}

/// Loads both configs, reporting every problem found rather than the first.
fn load_configs(args: &ConfigArgs) -> Result<(TemplateSpec, DependencyGraph), Failure> {
    let template_doc = read(&args.template);
    let graph_doc = read(&args.graph);
    let mut problems = Vec::new();
    let template = match &template_doc {
        Ok(doc) => match load_template(doc, &ByteTokenizer) {
            Ok(t) => Some(t),
            Err(e) => {
                problems.push(format!("template {}: {e}", args.template.display()));
                None
            }
        },
        Err(e) => {
            problems.push(format!("{e:#}"));
            None
        }
    };
    let graph = match (&graph_doc, &template) {
        (Ok(doc), Some(t)) => match load_graph(doc, t) {
            Ok(g) => Some(g),
            Err(e) => {
                problems.push(format!("graph {}: {e}", args.graph.display()));
                None
            }
        },
        (Err(e), _) => {
            problems.push(format!("{e:#}"));
            None
        }
        (Ok(_), None) => None,
    };
    match (template, graph) {
        (Some(t), Some(g)) if problems.is_empty() => Ok((t, g)),
        _ => Err(Failure::Config(anyhow!(problems.join("\n")))),
    }
}

fn cmd_validate(args: &ConfigArgs) -> Result<(), Failure> {
    let (template, graph) = load_configs(args)?;
    println!(
        "{} fields, {} edges, {} sources, no cycles",
        template.len(),
        graph.edges().len(),
        graph.sources().len()
    );
    Ok(())
}

fn path_names(template: &TemplateSpec, path: &[usize]) -> String {
    path.iter()
        .map(|&f| template.field(f).name.as_str())
        .collect::<Vec<_>>()
        .join("→")
}

fn parse_lengths(text: &str, template: &TemplateSpec) -> Result<Vec<f64>> {
    let lengths = text
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("invalid length `{}`", s.trim()))
        })
        .collect::<Result<Vec<_>>>()?;
    if lengths.len() != template.len() {
        bail!(
            "{} lengths given for {} fields",
            lengths.len(),
            template.len()
        );
    }
    Ok(lengths)
}

fn trace_lines(template: &TemplateSpec, trace: &[PassRecord]) -> String {
    let name = |f: &usize| template.field(*f).name.as_str();
    trace
        .iter()
        .map(|r| {
            json!({
                "pass": r.pass,
                "fields": r.fields.iter().map(name).collect::<Vec<_>>(),
                "completed": r.completed.iter().map(name).collect::<Vec<_>>(),
            })
            .to_string()
                + "\n"
        })
        .collect()
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn cmd_plan(args: &PlanArgs) -> Result<(), Failure> {
    let (template, graph) = load_configs(&args.config)?;
    let lengths = match (&args.lengths, &args.lengths_file) {
        (Some(text), _) => parse_lengths(text, &template).config()?,
        (None, Some(path)) => read(path)
            .and_then(|doc| load_lengths(&doc, &template).map_err(Into::into))
            .config()?,
        (None, None) => template.max_lens().iter().map(|&m| m as f64).collect(),
    };
    let plan = plan_expected(&template, &graph, &lengths)
        .map_err(anyhow::Error::from)
        .config()?;
    println!(
        "critical path {} ({}), degree {:.2}",
        plan.critical_path,
        path_names(&template, &plan.path),
        plan.parallel_degree
    );

    // Whole lengths within every slot can be run through the scheduler.
    let schedulable = lengths
        .iter()
        .zip(template.fields())
        .all(|(&l, f)| l.fract() == 0.0 && l >= 1.0 && l as usize <= f.max_len);
    if schedulable {
        let exact: Vec<usize> = lengths.iter().map(|&l| l as usize).collect();
        let trace = simulate(&graph, &template, &exact)
            .map_err(anyhow::Error::from)
            .runtime()?;
        let passes = trace.len();
        let tokens: usize = exact.iter().sum();
        println!(
            "passes {passes}, degree {:.2}, tokens {tokens}",
            tokens as f64 / passes as f64
        );
        if let Some(path) = &args.trace {
            write_file(path, trace_lines(&template, &trace).as_bytes()).runtime()?;
        }
    } else {
        println!(
            "expected passes {:.2}, degree {:.2}, tokens {:.2}",
            plan.critical_path, plan.parallel_degree, plan.total
        );
        if args.trace.is_some() {
            return Err(Failure::Config(anyhow!(
                "a trace needs whole lengths between 1 and each field's max_len"
            )));
        }
    }
    if let Some(samples) = args.monte_carlo {
        let mc = plan_monte_carlo(&template, &graph, &lengths, samples, args.seed)
            .map_err(anyhow::Error::from)
            .runtime()?;
        println!(
            "sampled {samples}: critical path {:.2}, degree {:.2}, tokens {:.2}",
            mc.mean_critical_path, mc.mean_parallel_degree, mc.mean_total
        );
    }
    Ok(())
}

fn build_model(args: &ModelArgs, template: &TemplateSpec) -> Result<Box<dyn TokenModel>, Failure> {
    match args.model {
        ModelKind::Mock => {
            if args.weights.is_some() {
                return Err(Failure::Config(anyhow!(
                    "--weights applies to the reference model only"
                )));
            }
            Ok(Box::new(
                MockHashModel::new(template.vocab_size(), args.seed)
                    .with_stop(template.terminator(), MOCK_STOP_PERMILLE),
            ))
        }
        ModelKind::Reference => {
            let model = match &args.weights {
                Some(path) => ReferenceTransformer::load(path)
                    .map_err(|e| anyhow!(e))
                    .config()?,
                None => ReferenceTransformer::new(
                    TransformerConfig {
                        vocab_size: template.vocab_size(),
                        ..TransformerConfig::default()
                    },
                    args.seed,
                ),
            };
            if model.config().vocab_size != template.vocab_size() {
                return Err(Failure::Config(anyhow!(
                    "model vocabulary {} differs from template vocabulary {}",
                    model.config().vocab_size,
                    template.vocab_size()
                )));
            }
            Ok(Box::new(model))
        }
    }
}

fn cmd_decode(args: &DecodeArgs) -> Result<(), Failure> {
    let (template, graph) = load_configs(&args.config)?;
    let model = build_model(&args.model, &template)?;
    let prompt = match &args.prompt {
        Some(text) => ByteTokenizer.encode(text),
        None => template.prompt_tokens().to_vec(),
    };
    let options = DecodeOptions {
        sampler: args
            .temperature
            .map(|t| Sampler::temperature(t, args.model.seed)),
        ..DecodeOptions::default()
    };
    let result = match args.mode {
        Mode::Parallel => {
            decode_parallel_with(&template, &graph, &*model, &prompt, &options, &mut NoHooks)
        }
        Mode::Autoregressive => {
            decode_autoregressive_with(&template, &*model, &prompt, &options, &mut NoHooks)
        }
        Mode::Oracle => {
            decode_oracle_with(&template, &graph, &*model, &prompt, &options, &mut NoHooks)
        }
    }
    .map_err(anyhow::Error::from)
    .runtime()?;

    emit(&(render_indexed(&template, &result.contents, &ByteTokenizer) + "\n"))?;
    eprintln!(
        "passes {}, tokens {}, degree {:.2}",
        result.pass_count,
        result.total_generated,
        result.average_parallel_degree()
    );
    if let Some(path) = &args.out {
        let value = result.to_json(&template, &ByteTokenizer, !args.no_timing);
        let mut text = serde_json::to_string_pretty(&value).expect("json value serializes");
        text.push('\n');
        write_file(path, text.as_bytes()).runtime()?;
    }
    if let Some(path) = &args.trace {
        write_file(path, trace_lines(&template, &result.trace).as_bytes()).runtime()?;
    }
    Ok(())
}

fn cmd_bench(args: &BenchArgs) -> Result<(), Failure> {
    if args.prompts == 0 {
        return Err(Failure::Config(anyhow!("--prompts must be at least 1")));
    }
    let (template, graph) = load_configs(&args.config)?;
    let model = build_model(&args.model, &template)?;
    // Synthetic token prompts stand in for real scene inputs.
    let prompts = synthetic_prompts(
        args.prompts,
        template.prompt_tokens().len(),
        template.vocab_size(),
        args.model.seed,
    );
    let options = CollectOptions {
        warmup: args.warmup,
        jobs: args.jobs,
    };
    let records = collect_runs(&template, &graph, &*model, &prompts, options)
        .map_err(anyhow::Error::from)
        .runtime()?;
    let timing = !args.no_timing;

    let mut csv = Vec::new();
    write_csv(&records, &mut csv, timing)
        .map_err(anyhow::Error::from)
        .runtime()?;
    match &args.out {
        Some(path) => write_file(path, &csv).runtime()?,
        None => emit(&String::from_utf8(csv).expect("csv output is utf-8"))?,
    }
    let mut summary = Vec::new();
    Summary::new(&records, timing)
        .write_json(&mut summary)
        .map_err(anyhow::Error::from)
        .runtime()?;
    match &args.summary {
        Some(path) => write_file(path, &summary).runtime()?,
        None => io::stderr()
            .write_all(&summary)
            .context("cannot write summary")
            .runtime()?,
    }
    Ok(())
}

fn cmd_init_weights(args: &InitWeightsArgs) -> Result<(), Failure> {
    ReferenceTransformer::seeded(args.seed)
        .save(&args.out)
        .map_err(|e| anyhow!(e))
        .runtime()?;
    println!(
        "wrote {} and {}",
        args.out.display(),
        ReferenceTransformer::manifest_path(&args.out).display()
    );
    Ok(())
}
