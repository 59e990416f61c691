use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use echo_embed::analysis::{load_pairs, overestimation_report, score_pairs};
use echo_embed::backend::provider::{run_conformance, serve_tcp, ProviderClient, ToyProvider};
use echo_embed::backend::toy::{read_checkpoint, write_checkpoint};
use echo_embed::backend::BackendError;
use echo_embed::bench::{
    append_noise_token, load_corpus, load_corpus_file, synthetic_triplets, triplet_accuracy, RunConfig, Scope, Structure,
    SyntheticConfig,
};
use echo_embed::strategy::{embed_with, EmbedOptions};
use echo_embed::templating::sample_templates;
use echo_embed::trainer::{
    examples_from_triplets, grad_check, load_training_data, make_batches, train, TrainConfig, TrainingExample,
    SIMILARITY_INSTRUCTION,
};
use echo_embed::{AttentionMode, Backend, HiddenStates, Pooling, Strategy, Template, Tokenization, ToyModel, ToyModelConfig};
use serde::Deserialize;
use serde_json::json;

#[derive(Parser)]
#[command(name = "echo-embed", version, about = "Echo embeddings on a toy transformer or an external provider")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Embed each input line; prints one JSON object per line.
    Embed(EmbedArgs),
    /// Triplet accuracy over the bundled corpora.
    Bench(BenchArgs),
    /// Contrastive fine-tuning of the toy model.
    Train(TrainArgs),
    /// Rank errors on a scored pair file.
    Analyze(AnalyzeArgs),
    /// Print sampled prompt templates.
    SamplePrompts(SampleArgs),
    /// Serve the toy model over the provider protocol.
    ServeToy(ServeArgs),
    /// Run the protocol conformance checks against a provider.
    Conformance(ConformanceArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Classical,
    Echo,
    Summarization,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Classical => Strategy::Classical,
            StrategyArg::Echo => Strategy::Echo,
            StrategyArg::Summarization => Strategy::Summarization,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolingArg {
    Mean,
    Last,
    FinalToken,
}

impl From<PoolingArg> for Pooling {
    fn from(p: PoolingArg) -> Self {
        match p {
            PoolingArg::Mean => Pooling::Mean,
            PoolingArg::Last => Pooling::Last,
            PoolingArg::FinalToken => Pooling::FinalToken,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendArg {
    Toy,
    Provider,
}

#[derive(Clone, Copy, ValueEnum)]
enum StructureArg {
    S1,
    S2,
    S3,
}

impl From<StructureArg> for Structure {
    fn from(s: StructureArg) -> Self {
        match s {
            StructureArg::S1 => Structure::S1,
            StructureArg::S2 => Structure::S2,
            StructureArg::S3 => Structure::S3,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Full,
    APortion,
}

#[derive(Args)]
struct ModelArgs {
    /// Backend producing hidden states.
    #[arg(long, value_enum, default_value = "toy")]
    backend: BackendArg,
    /// Provider address (host:port).
    #[arg(long, env = "ECHO_EMBED_PROVIDER")]
    provider_addr: Option<String>,
    /// Seconds to wait for a provider reply.
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
    /// Seed of the toy model's initialisation.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Load the toy model from a checkpoint instead.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Let toy-model attention see the whole sequence.
    #[arg(long)]
    bidirectional: bool,
}

#[derive(Args)]
struct TemplateArgs {
    #[arg(long, value_enum, default_value = "echo")]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value = "mean")]
    pooling: PoolingArg,
    /// TOML file with `pattern` and optional `instruction`.
    #[arg(long, conflicts_with = "template_seed")]
    template_file: Option<PathBuf>,
    /// Use the template sampled with this seed.
    #[arg(long)]
    template_seed: Option<u64>,
}

#[derive(Args)]
struct EmbedArgs {
    #[command(flatten)]
    template: TemplateArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Input file with one text per line, or `-` for stdin.
    #[arg(long, default_value = "-")]
    input: String,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["s1", "s2", "s3"])]
    structures: Vec<StructureArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["classical", "echo"])]
    strategies: Vec<StrategyArg>,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["mean", "last"])]
    poolings: Vec<PoolingArg>,
    #[arg(long, value_enum, default_value = "full")]
    scope: ScopeArg,
    /// Append a random pseudo-word to every sentence, drawn with this seed.
    #[arg(long)]
    noise_seed: Option<u64>,
    /// Directory holding structure1.jsonl etc. instead of the bundled corpora.
    #[arg(long)]
    corpus_dir: Option<PathBuf>,
    /// Accuracy CSV; stdout if omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-triplet margins CSV.
    #[arg(long)]
    margins: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    /// JSONL training examples.
    #[arg(long, required_unless_present = "synthetic", conflicts_with = "synthetic")]
    data: Option<PathBuf>,
    /// Train on this many synthetic triplets instead.
    #[arg(long)]
    synthetic: Option<usize>,
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
    #[arg(long, value_enum, default_value = "echo")]
    strategy: StrategyArg,
    #[arg(long, value_enum, default_value = "mean")]
    pooling: PoolingArg,
    #[arg(long, default_value_t = 1.0 / 50.0)]
    tau: f64,
    #[arg(long, default_value_t = 8e-4)]
    learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    /// Seed of batch order.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    /// Start from a checkpoint instead of a fresh model.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 1024)]
    vocab_size: usize,
    #[arg(long, default_value_t = 32)]
    d_model: usize,
    #[arg(long, default_value_t = 2)]
    n_layers: usize,
    #[arg(long, default_value_t = 4)]
    n_heads: usize,
    #[arg(long, default_value_t = 128)]
    max_seq_len: usize,
    #[arg(long)]
    bidirectional: bool,
    #[arg(long)]
    checkpoint_out: Option<PathBuf>,
    /// Per-step loss CSV.
    #[arg(long)]
    loss_log: Option<PathBuf>,
    /// Verify gradients by finite differences before training.
    #[arg(long)]
    grad_check: bool,
    /// Entries checked per parameter tensor; 0 checks all.
    #[arg(long, default_value_t = 8)]
    grad_check_samples: usize,
    #[arg(long, default_value_t = 1e-4)]
    grad_check_tolerance: f64,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// JSONL with `x`, `y`, `score`.
    #[arg(long)]
    pairs: PathBuf,
    #[command(flatten)]
    template: TemplateArgs,
    #[command(flatten)]
    model: ModelArgs,
    /// Strategy of the embedder that picks similar halves; defaults to --strategy.
    #[arg(long, value_enum)]
    reference_strategy: Option<StrategyArg>,
    #[arg(long, default_value_t = 0.1)]
    fraction: f64,
    #[arg(long, default_value_t = 1.0)]
    bin_width: f64,
    /// Rank-error histogram CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long, value_enum, default_value = "echo")]
    strategy: StrategyArg,
    #[arg(long, default_value_t = 10)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:7878")]
    bind: String,
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 128)]
    max_seq_len: usize,
}

#[derive(Args)]
struct ConformanceArgs {
    #[arg(long, env = "ECHO_EMBED_PROVIDER")]
    provider_addr: String,
    #[arg(long, default_value_t = 30)]
    timeout_secs: u64,
}

enum Engine {
    Toy(ToyModel<f32>),
    Provider(ProviderClient),
}

impl Backend<f32> for Engine {
    fn encode(&self, text: &str) -> Result<(Tokenization, HiddenStates<f32>), BackendError> {
        match self {
            Engine::Toy(m) => m.encode(text),
            Engine::Provider(p) => p.encode(text),
        }
    }

    fn dim(&self) -> usize {
        match self {
            Engine::Toy(m) => Backend::<f32>::dim(m),
            Engine::Provider(p) => Backend::<f32>::dim(p),
        }
    }

    fn max_seq_len(&self) -> usize {
        match self {
            Engine::Toy(m) => Backend::<f32>::max_seq_len(m),
            Engine::Provider(p) => Backend::<f32>::max_seq_len(p),
        }
    }
}

impl Engine {
    fn vocab_size(&self) -> usize {
        match self {
            Engine::Toy(m) => m.config().vocab_size,
            Engine::Provider(_) => ToyModelConfig::default().vocab_size,
        }
    }
}

fn load_toy(checkpoint: Option<&Path>, seed: u64, config: ToyModelConfig) -> Result<ToyModel<f32>> {
    match checkpoint {
        Some(path) => {
            let f = File::open(path).with_context(|| format!("cannot open checkpoint {}", path.display()))?;
            Ok(read_checkpoint(BufReader::new(f))?)
        }
        None => Ok(ToyModel::init(config.with_seed(seed))?),
    }
}

fn engine(args: &ModelArgs) -> Result<Engine> {
    match args.backend {
        BackendArg::Toy => {
            let mut model = load_toy(args.checkpoint.as_deref(), args.model_seed, ToyModelConfig::default())?;
            if args.bidirectional {
                model.set_attention(AttentionMode::Bidirectional);
            }
            Ok(Engine::Toy(model))
        }
        BackendArg::Provider => {
            let Some(addr) = &args.provider_addr else {
                bail!("--backend provider needs --provider-addr or ECHO_EMBED_PROVIDER");
            };
            Ok(Engine::Provider(ProviderClient::connect(addr, Duration::from_secs(args.timeout_secs))?))
        }
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TemplateFile {
    pattern: String,
    instruction: Option<String>,
}

fn template(args: &TemplateArgs, strategy: Strategy) -> Result<Template> {
    if let Some(path) = &args.template_file {
        let src = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
        let file: TemplateFile = toml::from_str(&src).with_context(|| format!("bad template file {}", path.display()))?;
        return Ok(Template::custom(strategy, &file.pattern, file.instruction.as_deref())?);
    }
    match args.template_seed {
        Some(seed) => Ok(sample_templates(strategy, 1, seed).remove(0)),
        None => Ok(Template::default_for(strategy)),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("cannot create {}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn cmd_embed(args: EmbedArgs) -> Result<()> {
    let strategy = Strategy::from(args.template.strategy);
    let tpl = template(&args.template, strategy)?;
    let pooling = Pooling::from(args.template.pooling);
    let input: Box<dyn BufRead> = if args.input == "-" {
        Box::new(BufReader::new(io::stdin()))
    } else {
        Box::new(BufReader::new(File::open(&args.input).with_context(|| format!("cannot open {}", args.input))?))
    };
    let backend = engine(&args.model)?;
    let mut out = output(None)?;
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        let e = embed_with(&line, &tpl, pooling, &backend, &EmbedOptions::default())
            .with_context(|| format!("input line {}", i + 1))?;
        let v = &e.embedding.vector;
        let row = json!({
            "embedding": v,
            "dim": v.len(),
            "strategy": strategy.as_str(),
            "pooled_tokens": e.pooled.len(),
        });
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let backend = engine(&args.model)?;
    let scope = match args.scope {
        ScopeArg::Full => Scope::Full,
        ScopeArg::APortion => Scope::APortion,
    };
    let mut out = output(args.out.as_deref())?;
    let mut margins = args.margins.as_deref().map(|p| output(Some(p))).transpose()?;
    writeln!(out, "structure,strategy,pooling,accuracy,n")?;
    if let Some(m) = &mut margins {
        writeln!(m, "structure,strategy,pooling,index,sim_plus,sim_minus,margin")?;
    }
    for s in &args.structures {
        let structure = Structure::from(*s);
        let mut corpus = match &args.corpus_dir {
            Some(dir) => load_corpus_file(&dir.join(format!("structure{}.jsonl", &structure.as_str()[1..])))?,
            None => load_corpus(structure)?,
        };
        if let Some(seed) = args.noise_seed {
            corpus = append_noise_token(&corpus, seed, backend.vocab_size());
        }
        for st in &args.strategies {
            let strategy = Strategy::from(*st);
            let tpl = Template::default_for(strategy);
            for p in &args.poolings {
                let pooling = Pooling::from(*p);
                let f = echo_embed::bench::strategy_embedder(&tpl, pooling, &backend, scope);
                let config = RunConfig {
                    strategy: strategy.as_str().into(),
                    pooling: pooling.to_string(),
                    template_id: "default".into(),
                    seed: args.noise_seed.unwrap_or(0),
                };
                let report = triplet_accuracy(&corpus, config, f)?;
                writeln!(out, "{structure},{strategy},{pooling},{},{}", report.accuracy, corpus.len())?;
                if let Some(m) = &mut margins {
                    for (i, (&(sp, sm), d)) in report.similarities.iter().zip(&report.margins).enumerate() {
                        writeln!(m, "{structure},{strategy},{pooling},{i},{sp},{sm},{d}")?;
                    }
                }
            }
        }
    }
    out.flush()?;
    if let Some(m) = &mut margins {
        m.flush()?;
    }
    Ok(())
}

fn training_data(args: &TrainArgs) -> Result<Vec<TrainingExample>> {
    match (&args.data, args.synthetic) {
        (Some(path), _) => Ok(load_training_data(path)?),
        (None, Some(count)) => {
            let config = SyntheticConfig {
                count,
                ..SyntheticConfig::default()
            };
            let triplets = synthetic_triplets(&config, args.data_seed);
            Ok(examples_from_triplets(&triplets, SIMILARITY_INSTRUCTION, "synthetic"))
        }
        (None, None) => bail!("one of --data or --synthetic is required"),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let config = TrainConfig {
        tau: args.tau,
        learning_rate: args.learning_rate,
        momentum: args.momentum,
        batch_size: args.batch_size,
        steps: args.steps,
        seed: args.seed,
        pooling: args.pooling.into(),
        strategy: args.strategy.into(),
    };
    config.validate()?;
    let data = training_data(&args)?;
    let model_config = ToyModelConfig {
        vocab_size: args.vocab_size,
        d_model: args.d_model,
        n_layers: args.n_layers,
        n_heads: args.n_heads,
        max_seq_len: args.max_seq_len,
        seed: args.model_seed,
        attention: if args.bidirectional {
            AttentionMode::Bidirectional
        } else {
            AttentionMode::Causal
        },
    };
    let model = load_toy(args.checkpoint.as_deref(), args.model_seed, model_config)?;
    if args.grad_check {
        let Some(batch) = make_batches(&data, config.batch_size.min(4), config.seed).into_iter().next() else {
            bail!("gradient check needs a batch of at least two examples from one dataset");
        };
        let sample = (args.grad_check_samples > 0).then_some(args.grad_check_samples);
        let report = grad_check(&model.cast::<f64>(), &data, &batch.examples, &config, 1e-4, sample)?;
        for g in &report.groups {
            eprintln!("grad-check {:<24} |g| {:.3e}  rel err {:.3e}", g.name, g.analytic_norm, g.relative_error);
        }
        let worst = report.max_relative_error();
        if worst.is_nan() || worst > args.grad_check_tolerance {
            bail!("gradient check failed: max relative error {worst:.3e} > {:.1e}", args.grad_check_tolerance);
        }
        eprintln!("grad-check passed: max relative error {worst:.3e}");
    }
    let (model, losses) = train(model, &data, &config)?;
    if let Some(path) = &args.loss_log {
        let mut w = output(Some(path))?;
        writeln!(w, "step,loss")?;
        for (i, l) in losses.iter().enumerate() {
            writeln!(w, "{i},{l}")?;
        }
        w.flush()?;
    }
    if let Some(path) = &args.checkpoint_out {
        let f = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
        let mut w = BufWriter::new(f);
        write_checkpoint(&model, &mut w)?;
        w.flush()?;
    }
    let summary = json!({
        "steps": losses.len(),
        "examples": data.len(),
        "first_loss": losses.first(),
        "final_loss": losses.last(),
    });
    println!("{summary}");
    Ok(())
}

fn text_embedder<'a>(
    template: &'a Template,
    pooling: Pooling,
    backend: &'a Engine,
) -> impl Fn(&str) -> Result<Vec<f64>, echo_embed::Error> + Sync + 'a {
    move |s: &str| Ok(embed_with(s, template, pooling, backend, &EmbedOptions::default())?.embedding.vector)
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<()> {
    if !(args.bin_width > 0.0 && args.bin_width.is_finite()) {
        bail!("--bin-width must be positive");
    }
    let records = load_pairs(&args.pairs)?;
    let strategy = Strategy::from(args.template.strategy);
    let pooling = Pooling::from(args.template.pooling);
    let tpl = template(&args.template, strategy)?;
    let reference_tpl = match args.reference_strategy {
        Some(s) => Template::default_for(s.into()),
        None => tpl.clone(),
    };
    let backend = engine(&args.model)?;
    let pairs = score_pairs(&records, text_embedder(&tpl, pooling, &backend))?;
    let report = overestimation_report(&pairs, text_embedder(&reference_tpl, pooling, &backend), args.fraction)?;
    if let Some(path) = &args.csv {
        let mut w = output(Some(path))?;
        w.write_all(report.to_csv(args.bin_width).as_bytes())?;
        w.flush()?;
    }
    let subset = |s: &echo_embed::analysis::SubsetErrors| json!({"count": s.errors.len(), "mean_rank_error": s.mean});
    let spearman = if report.spearman.is_finite() {
        json!(report.spearman)
    } else {
        serde_json::Value::Null
    };
    let summary = json!({
        "n": pairs.len(),
        "strategy": strategy.as_str(),
        "pooling": pooling.as_str(),
        "spearman": spearman,
        "first_half": subset(&report.first),
        "second_half": subset(&report.second),
    });
    println!("{summary}");
    Ok(())
}

fn cmd_sample_prompts(args: SampleArgs) -> Result<()> {
    let strategy = Strategy::from(args.strategy);
    let mut out = output(None)?;
    for (i, t) in sample_templates(strategy, args.count, args.seed).into_iter().enumerate() {
        let row = json!({"seed": args.seed, "index": i, "strategy": strategy.as_str(), "pattern": t.pattern, "template": t});
        writeln!(out, "{row}")?;
    }
    out.flush()?;
    Ok(())
}

fn cmd_serve_toy(args: ServeArgs) -> Result<()> {
    let config = ToyModelConfig {
        max_seq_len: args.max_seq_len,
        ..ToyModelConfig::default()
    };
    let model = load_toy(args.checkpoint.as_deref(), args.model_seed, config)?;
    let listener = TcpListener::bind(&args.bind).with_context(|| format!("cannot bind {}", args.bind))?;
    eprintln!("serving toy model on {}", listener.local_addr()?);
    serve_tcp(listener, move || ToyProvider::new(model.clone()))
        .join()
        .map_err(|_| anyhow::anyhow!("server thread panicked"))
}

fn cmd_conformance(args: ConformanceArgs) -> Result<()> {
    let checks = run_conformance(&args.provider_addr, Duration::from_secs(args.timeout_secs));
    let mut failed = 0;
    for c in &checks {
        match &c.outcome {
            Ok(()) => println!("PASS {}", c.name),
            Err(e) => {
                failed += 1;
                println!("FAIL {}: {e}", c.name);
            }
        }
    }
    if failed > 0 {
        bail!("{failed} of {} conformance checks failed", checks.len());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Embed(a) => cmd_embed(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Train(a) => cmd_train(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::SamplePrompts(a) => cmd_sample_prompts(a),
        Command::ServeToy(a) => cmd_serve_toy(a),
        Command::Conformance(a) => cmd_conformance(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

